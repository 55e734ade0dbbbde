//! Confusion matrix and the derived segmentation scores.

use memadapt::metrics::ConfusionMatrix;
use memadapt::VOID;

fn main() -> memadapt::Result<()> {
    let gt = [0, 0, 0, 1, 1, 1, 2, 2, VOID, 2];
    let pred = [0, 0, 1, 1, 1, 0, 2, 2, 1, 1];
    let mut cm = ConfusionMatrix::new(4);
    cm.accumulate(&pred, &gt)?;
    for t in 0..3 {
        println!("truth {t}: {:?}", (0..4).map(|p| cm.get(t, p)).collect::<Vec<_>>());
    }
    let m = cm.summary();
    println!("pixels {}, classes without support {:?}", m.pixels, m.excluded_classes);
    println!("OA {:.3}  mA {:.3}  mIoU {:.3}", m.oa.unwrap(), m.ma.unwrap(), m.miou.unwrap());
    println!("per-class IoU {:?}", m.per_class.iou);
    println!("{}", serde_json::to_string_pretty(&m).expect("serializable"));
    Ok(())
}
