//! Two-step training: adversarial feature alignment, then memory aggregation.
//!
//! Each iteration of step 1 updates `G_1 = (F, C1)` on the source
//! segmentation loss plus (when a discriminator exists) the adversarial loss on
//! target predictions, then updates the discriminator. From iteration `tau'`
//! on, modes with a memory also refresh the memory from source labels and
//! filtered target pseudo labels and update `G_2 = (F, A, C2)` on the source
//! segmentation loss of the aggregated branch.

pub mod checkpoint;
pub mod config;
pub mod experiments;
pub mod model;
pub mod source;

pub use checkpoint::{CheckpointMeta, EvalRecord};
pub use config::{DataConfig, SharedFUpdates, TrainConfig, TrainMode};
pub use model::Model;
pub use source::{DataAccess, DataSource};

use crate::data::augment::{augment_affine, augment_colorspace};
use crate::data::{to_batch, Domain, EpochSampler, Split, TileDataset, CLASS_NAMES};
use crate::error::{Error, Result};
use crate::losses::{adv_loss_target, d_loss, seg_ce_loss, total_g1_loss, LossReport};
use crate::memory::downsample_labels;
use crate::metrics::{ConfusionMatrix, Metrics};
use crate::networks::init_rng;
use crate::nn::{Mode, Module};
use crate::optim::{check_state_names, scheduled_lr, Adam, Sgd};
use crate::pseudo_label::{pseudo_labels, ProbMap};
use crate::tensor::io::Dtype;
use crate::tensor::{Tape, Tensor, Var};
use crate::VOID;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use std::time::Instant;

const LOG_FILE: &str = "train_log.csv";
const SAMPLING_STREAM: u64 = 10;

/// Points inside an iteration where a probe may inspect the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// After the `G_1` optimizer step.
    G1,
    /// After the discriminator step.
    D,
    /// After the `G_2` optimizer step.
    G2,
}

pub type Probe = Box<dyn FnMut(Phase, &Model)>;

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub iteration: usize,
    pub seg1: f64,
    pub seg2: f64,
    pub adv: f64,
    pub d_loss: f64,
    pub m_t: f64,
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub losses: LossReport,
    /// Memory momentum used this iteration (step 2 only).
    pub momentum: Option<f64>,
    /// Fraction of target pixels that kept a pseudo label (step 2 only).
    pub retained: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub iterations: usize,
    /// Final model on the target test split.
    pub test: Metrics,
    pub test_confusion: ConfusionMatrix,
    pub evals: Vec<EvalRecord>,
    pub best: Option<EvalRecord>,
    pub mean_retained: Option<f64>,
    pub seconds: f64,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    opt_g1: Sgd,
    opt_g2: Sgd,
    opt_d: Adam,
    rng: ChaCha8Rng,
    source_sampler: EpochSampler,
    target_sampler: EpochSampler,
    pub iteration: usize,
    pub log: Vec<LogRow>,
    pub evals: Vec<EvalRecord>,
    data: DataSource,
    source: TileDataset,
    target: Option<TileDataset>,
    val: Option<TileDataset>,
    retained: Vec<f64>,
    probe: Option<Probe>,
}

fn check_tiles(d: &TileDataset, cfg: &TrainConfig) -> Result<()> {
    if d.is_empty() {
        return Err(Error::Invalid(format!("{}/{} split is empty", d.domain.name(), d.split.name())));
    }
    let s = cfg.network.tile_size;
    for (i, t) in d.tiles.iter().enumerate() {
        if (t.height, t.width) != (s, s) {
            return Err(Error::Invalid(format!(
                "{}/{} tile {i} is {}x{}, expected {s}x{s}",
                d.domain.name(),
                d.split.name(),
                t.width,
                t.height
            )));
        }
        t.validate_labels(cfg.network.num_classes)?;
    }
    Ok(())
}

fn draw_batch(
    data: &TileDataset,
    sampler: &mut EpochSampler,
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<(Tensor, Vec<u8>)> {
    let tiles: Vec<_> = sampler
        .batch(cfg.batch_size, rng)
        .into_iter()
        .map(|i| {
            let t = augment_affine(&data.tiles[i], &cfg.augment, rng);
            augment_colorspace(&t, &cfg.color_augment, rng)
        })
        .collect();
    let refs: Vec<_> = tiles.iter().collect();
    to_batch(&refs)
}

fn finite(tape: &Tape, loss: Var) -> Result<()> {
    if tape.value(loss).is_finite() {
        return Ok(());
    }
    Err(Error::NonFinite {
        op: tape.first_non_finite().unwrap_or("loss"),
    })
}

/// Filtered pseudo labels for target features `[N, C, h, w]`, flat `N*H*W`.
///
/// Runs the aggregated branch without gradients, with batch statistics.
pub fn target_pseudo_labels(model: &Model, cfg: &TrainConfig, ft: &Tensor, size: (usize, usize)) -> Result<Vec<u8>> {
    let (Some(attn), Some(c2), Some(mem)) = (&model.attn, &model.c2, &model.memory) else {
        return Err(Error::Invalid("pseudo labels need the memory branch".into()));
    };
    let mut tape = Tape::inference();
    let x = tape.constant(ft.clone());
    let agg = attn.forward(&mut tape, x, mem, Mode::Train)?;
    let logits = c2.forward(&mut tape, agg.features, size, Mode::Train)?;
    let prob = tape.softmax(logits, 1)?;
    let mut out = Vec::with_capacity(ft.dim(0) * size.0 * size.1);
    for map in ProbMap::from_tensor(tape.value(prob))? {
        out.extend(pseudo_labels(&map, cfg.filter_mode, cfg.sigma, cfg.prob_threshold).labels);
    }
    Ok(out)
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let data = DataSource::new(&config.data, config.network.tile_size)?;
        let source = data.load(Domain::Source, Split::Train, true)?;
        check_tiles(&source, &config)?;
        let target = if config.mode.uses_target() {
            let t = data.load(Domain::Target, Split::Train, false)?;
            check_tiles(&t, &config)?;
            Some(t)
        } else {
            None
        };
        let val = if config.eval_every > 0 {
            let v = data.load(Domain::Target, Split::Val, true)?;
            check_tiles(&v, &config)?;
            Some(v)
        } else {
            None
        };
        let model = Model::new(&config);
        log::info!(
            "mode {} with {} parameters, {} source / {} target tiles",
            config.mode.name(),
            model.param_count(),
            source.len(),
            target.as_ref().map_or(0, |t| t.len())
        );
        Ok(Self {
            opt_g1: Sgd::new(config.g_lr, config.g_momentum, config.g_weight_decay),
            opt_g2: Sgd::new(config.g_lr, config.g_momentum, config.g_weight_decay),
            opt_d: Adam::new(config.d_lr, config.d_betas[0], config.d_betas[1]),
            rng: init_rng(config.seed, SAMPLING_STREAM),
            source_sampler: EpochSampler::new(source.len()),
            target_sampler: EpochSampler::new(target.as_ref().map_or(0, |t| t.len())),
            iteration: 0,
            log: Vec::new(),
            evals: Vec::new(),
            data,
            source,
            target,
            val,
            retained: Vec::new(),
            probe: None,
            model,
            config,
        })
    }

    /// Continues from a checkpoint written with the same configuration.
    pub fn resume(config: TrainConfig, dir: &Path) -> Result<Self> {
        let (meta, tensors) = checkpoint::load(dir)?;
        if meta.config_hash != config.hash() {
            return Err(Error::Checkpoint(format!(
                "{}: configuration differs from the one the checkpoint was written with",
                dir.display()
            )));
        }
        let mut t = Trainer::new(config)?;
        t.model.load_state(&tensors)?;
        t.opt_g1.load_state("opt.g1", &tensors);
        t.opt_g2.load_state("opt.g2", &tensors);
        t.opt_d.load_state("opt.d", &tensors);
        let params = t.model.params();
        check_state_names(t.opt_g1.state_names(), &params)?;
        check_state_names(t.opt_g2.state_names(), &params)?;
        check_state_names(t.opt_d.state_names(), &params)?;
        t.rng = meta.rng.restore()?;
        t.source_sampler = meta.source_sampler;
        t.target_sampler = meta.target_sampler;
        t.iteration = meta.iteration;
        t.evals = meta.evals;
        if let Some(out) = &t.config.output_dir {
            let path = out.join(LOG_FILE);
            if path.exists() {
                let rows: Vec<LogRow> = read_log(&path)?
                    .into_iter()
                    .filter(|r| r.iteration < t.iteration)
                    .collect();
                write_log(&path, &rows)?;
                t.log = rows;
            }
        }
        log::info!("resumed at iteration {} from {}", t.iteration, dir.display());
        Ok(t)
    }

    /// Resumes with the configuration stored in the checkpoint.
    pub fn from_checkpoint(dir: &Path) -> Result<Self> {
        let (meta, _) = checkpoint::load(dir)?;
        Self::resume(meta.config, dir)
    }

    pub fn set_probe(&mut self, probe: Probe) {
        self.probe = Some(probe);
    }

    pub fn data_access(&self) -> Vec<DataAccess> {
        self.data.access_log()
    }

    fn notify(&mut self, phase: Phase) {
        if let Some(p) = self.probe.as_mut() {
            p(phase, &self.model);
        }
    }

    pub fn in_step2(&self) -> bool {
        self.config.mode.has_memory() && self.iteration >= self.config.tau()
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let cfg = self.config.clone();
        let it = self.iteration;
        let lr = scheduled_lr(cfg.g_lr, it, cfg.total_iters, cfg.lr_poly_power);
        self.opt_g1.lr = lr;
        self.opt_g2.lr = lr;
        self.opt_d.lr = scheduled_lr(cfg.d_lr, it, cfg.total_iters, cfg.lr_poly_power);
        let step2 = self.in_step2();
        let (dfa_moves_f, idma_moves_f) = match (step2, cfg.shared_f_updates) {
            (true, SharedFUpdates::Alternate) => (it % 2 == 0, it % 2 == 1),
            _ => (true, true),
        };
        let k = cfg.network.num_classes;

        let (xs, ys) = draw_batch(&self.source, &mut self.source_sampler, &mut self.rng, &cfg)?;
        let xt = if cfg.mode.has_discriminator() || step2 {
            let target = self.target.as_ref().expect("target split loaded for adaptation modes");
            Some(draw_batch(target, &mut self.target_sampler, &mut self.rng, &cfg)?.0)
        } else {
            None
        };
        let size = (xs.dim(2), xs.dim(3));

        let mut losses = LossReport::default();
        let mut tape = Tape::new();
        let xs_v = tape.constant(xs.clone());
        let fs = self.model.f.forward(&mut tape, xs_v, Mode::Train)?;
        let ps = self.model.c1.forward(&mut tape, fs, size, Mode::Train)?;
        let seg1 = seg_ce_loss(&mut tape, ps, &ys)?;
        let mut total = seg1;
        let mut ft = None;
        let mut pt = None;
        if let Some(xt) = &xt {
            let xt_v = tape.constant(xt.clone());
            let f = self.model.f.forward(&mut tape, xt_v, Mode::Train)?;
            ft = Some(f);
            if let Some(d) = &self.model.d {
                let logits = self.model.c1.forward(&mut tape, f, size, Mode::Train)?;
                let prob = tape.softmax(logits, 1)?;
                let d_out = d.forward(&mut tape, prob)?;
                let adv = adv_loss_target(&mut tape, d_out);
                losses.adv = tape.value(adv).item();
                total = total_g1_loss(&mut tape, seg1, adv, cfg.lambda_adv)?;
                pt = Some(prob);
            }
        }
        finite(&tape, total)?;
        losses.seg1 = tape.value(seg1).item();

        let mut momentum = None;
        let mut retained = None;
        let mut idma_ready = false;
        if step2 {
            let fs_val = tape.value(fs).clone();
            let (n, fh) = (fs_val.dim(0), fs_val.dim(2));
            let factor = size.0 / fh;
            let ys_small = downsample_labels(&ys, n, size.0, size.1, factor, k);
            let mem = self.model.memory.as_mut().expect("memory in step 2");
            // rows still empty take the source class means before labelling the target
            mem.update_pooled(&[(&fs_val, &ys_small)], 0.0)?;
            idma_ready = !mem.initialized_classes().is_empty();
            if !idma_ready {
                log::warn!("iteration {it}: memory has no initialized class, IDMA update skipped");
            }
        }
        if idma_ready {
            let fs_val = tape.value(fs).clone();
            let ft_val = tape.value(ft.expect("target features in step 2")).clone();
            let (n, fh) = (fs_val.dim(0), fs_val.dim(2));
            let factor = size.0 / fh;
            let ys_small = downsample_labels(&ys, n, size.0, size.1, factor, k);
            let pl = target_pseudo_labels(&self.model, &cfg, &ft_val, size)?;
            let kept = pl.iter().filter(|&&l| l != VOID).count();
            retained = Some(kept as f64 / pl.len() as f64);
            let yt_small = downsample_labels(&pl, ft_val.dim(0), size.0, size.1, factor, k);
            let mem = self.model.memory.as_mut().expect("memory in step 2");
            let m = if cfg.freeze_memory {
                0.0
            } else {
                mem.momentum_at(it - cfg.tau())
            };
            mem.update_pooled(&[(&fs_val, &ys_small), (&ft_val, &yt_small)], m)?;
            momentum = Some(m);
        }

        let grads = tape.backward(total)?;
        if dfa_moves_f {
            self.opt_g1.step(self.model.g1_params_mut(), &grads);
        } else {
            self.opt_g1.step(self.model.c1.params_mut(), &grads);
        }
        self.model.f.commit_batch_stats(&tape);
        self.model.c1.commit_batch_stats(&tape);
        self.notify(Phase::G1);

        if let (Some(d), Some(pt)) = (&self.model.d, pt) {
            let mut dt = Tape::new();
            let src_logits = dt.constant(tape.value(ps).clone());
            let src = dt.softmax(src_logits, 1)?;
            let tgt = dt.constant(tape.value(pt).clone());
            let d_src = d.forward(&mut dt, src)?;
            let d_tgt = d.forward(&mut dt, tgt)?;
            let loss = d_loss(&mut dt, d_src, d_tgt)?;
            finite(&dt, loss)?;
            losses.d_loss = dt.value(loss).item();
            let g = dt.backward(loss)?;
            let d = self.model.d.as_mut().expect("discriminator");
            self.opt_d.step(d.params_mut(), &g);
            self.notify(Phase::D);
        }
        drop(tape);

        if idma_ready {
            let mut t2 = Tape::new();
            let x = t2.constant(xs);
            let (attn, c2, mem) = (
                self.model.attn.as_ref().expect("aggregator"),
                self.model.c2.as_ref().expect("second classifier"),
                self.model.memory.as_ref().expect("memory"),
            );
            let f = self.model.f.forward(&mut t2, x, Mode::Train)?;
            let agg = attn.forward(&mut t2, f, mem, Mode::Train)?;
            let logits = c2.forward(&mut t2, agg.features, size, Mode::Train)?;
            let seg2 = seg_ce_loss(&mut t2, logits, &ys)?;
            finite(&t2, seg2)?;
            losses.seg2 = t2.value(seg2).item();
            let g = t2.backward(seg2)?;
            self.opt_g2.step(self.model.g2_params_mut(idma_moves_f), &g);
            if let Some(a) = self.model.attn.as_mut() {
                a.commit_batch_stats(&t2);
            }
            if let Some(c) = self.model.c2.as_mut() {
                c.commit_batch_stats(&t2);
            }
            self.notify(Phase::G2);
        }

        losses.total_g = losses.seg1 + cfg.lambda_adv * losses.adv + losses.seg2;
        self.log.push(LogRow {
            iteration: it,
            seg1: losses.seg1,
            seg2: losses.seg2,
            adv: losses.adv,
            d_loss: losses.d_loss,
            m_t: momentum.unwrap_or(0.0),
            lr,
        });
        if let Some(r) = retained {
            self.retained.push(r);
        }
        self.iteration += 1;
        Ok(StepReport {
            losses,
            momentum,
            retained,
        })
    }

    /// Metrics of the current model on the target validation split.
    pub fn validate(&self) -> Result<Metrics> {
        let val = self
            .val
            .as_ref()
            .ok_or_else(|| Error::Invalid("validation split not loaded (eval_every = 0)".into()))?;
        Ok(self.model.evaluate(val, self.config.eval_batch)?.summary())
    }

    pub fn evaluate_split(&self, domain: Domain, split: Split) -> Result<ConfusionMatrix> {
        let data = self.data.load(domain, split, true)?;
        check_tiles(&data, &self.config)?;
        self.model.evaluate(&data, self.config.eval_batch)
    }

    pub fn checkpoint_meta(&self, val_metrics: Option<Metrics>) -> CheckpointMeta {
        CheckpointMeta {
            format: checkpoint::FORMAT.into(),
            iteration: self.iteration,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            rng: checkpoint::RngState::capture(&self.rng),
            source_sampler: self.source_sampler.clone(),
            target_sampler: self.target_sampler.clone(),
            dtype: Dtype::F64,
            evals: self.evals.clone(),
            val_metrics,
        }
    }

    pub fn save_checkpoint(&self, dir: &Path, val_metrics: Option<Metrics>) -> Result<()> {
        let mut tensors = self.model.state_tensors();
        tensors.extend(self.opt_g1.state_tensors("opt.g1"));
        tensors.extend(self.opt_g2.state_tensors("opt.g2"));
        tensors.extend(self.opt_d.state_tensors("opt.d"));
        checkpoint::save(dir, &self.checkpoint_meta(val_metrics), &tensors)
    }

    pub fn best(&self) -> Option<&EvalRecord> {
        self.evals.iter().fold(None, |best: Option<&EvalRecord>, e| match (best, e.metrics.miou) {
            (Some(b), Some(m)) if b.metrics.miou.is_some_and(|bm| bm >= m) => Some(b),
            (_, Some(_)) => Some(e),
            (b, None) => b,
        })
    }

    /// Trains to `total_iters`, evaluating every `eval_every` iterations, and
    /// reports the final model on the target test split.
    pub fn run(&mut self) -> Result<RunSummary> {
        let started = Instant::now();
        let cfg = self.config.clone();
        let out = cfg.output_dir.clone();
        let mut writer = match &out {
            Some(d) => Some(open_log(d, self.iteration == 0)?),
            None => None,
        };
        while self.iteration < cfg.total_iters {
            let report = self.step()?;
            let done = self.iteration;
            if let Some(w) = writer.as_mut() {
                w.serialize(self.log.last().expect("row just pushed"))?;
            }
            if done % 100 == 0 || done == cfg.total_iters {
                log::info!(
                    "iter {done}/{}: seg1 {:.4} seg2 {:.4} adv {:.4} d {:.4}",
                    cfg.total_iters,
                    report.losses.seg1,
                    report.losses.seg2,
                    report.losses.adv,
                    report.losses.d_loss
                );
            }
            if cfg.eval_every > 0 && (done % cfg.eval_every == 0 || done == cfg.total_iters) {
                let metrics = self.validate()?;
                let improved = match (self.best().and_then(|b| b.metrics.miou), metrics.miou) {
                    (_, None) => false,
                    (None, Some(_)) => true,
                    (Some(b), Some(m)) => m > b,
                };
                log::info!("iter {done}: target val mIoU {:?}", metrics.miou);
                self.evals.push(EvalRecord {
                    iteration: done,
                    metrics: metrics.clone(),
                });
                if improved {
                    if let (Some(d), Some(w)) = (&out, writer.as_mut()) {
                        w.flush().map_err(|e| Error::io(d.join(LOG_FILE), e))?;
                        self.save_checkpoint(&d.join("best"), Some(metrics))?;
                    }
                }
            }
            if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                if let (Some(d), Some(w)) = (&out, writer.as_mut()) {
                    w.flush().map_err(|e| Error::io(d.join(LOG_FILE), e))?;
                    self.save_checkpoint(&d.join(format!("ckpt_{done:06}")), None)?;
                }
            }
        }
        if let (Some(d), Some(w)) = (&out, writer.as_mut()) {
            w.flush().map_err(|e| Error::io(d.join(LOG_FILE), e))?;
        }
        let test_confusion = self.evaluate_split(Domain::Target, Split::Test)?;
        let test = test_confusion.summary();
        if let Some(d) = &out {
            let last_val = self
                .evals
                .last()
                .filter(|e| e.iteration == self.iteration)
                .map(|e| e.metrics.clone());
            self.save_checkpoint(&d.join("final"), last_val)?;
            test.write_json(&d.join("metrics.json"))?;
            let names: Vec<String> = CLASS_NAMES.iter().map(|s| s.to_string()).collect();
            test_confusion.write_csv(&d.join("confusion.csv"), &names)?;
        }
        let mean_retained =
            (!self.retained.is_empty()).then(|| self.retained.iter().sum::<f64>() / self.retained.len() as f64);
        Ok(RunSummary {
            iterations: self.iteration,
            test,
            test_confusion,
            evals: self.evals.clone(),
            best: self.best().cloned(),
            mean_retained,
            seconds: started.elapsed().as_secs_f64(),
        })
    }
}

/// Model and metadata of a saved checkpoint, ready for inference.
pub fn load_model(dir: &Path) -> Result<(Model, CheckpointMeta)> {
    let (meta, tensors) = checkpoint::load(dir)?;
    let mut model = Model::new(&meta.config);
    model.load_state(&tensors)?;
    Ok((model, meta))
}

fn open_log(dir: &Path, fresh: bool) -> Result<csv::Writer<std::fs::File>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join(LOG_FILE);
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(!fresh)
        .truncate(fresh)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    let has_rows = !fresh && file.metadata().map(|m| m.len() > 0).unwrap_or(false);
    Ok(csv::WriterBuilder::new().has_headers(!has_rows).from_writer(file))
}

pub fn read_log(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_log(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn log_path(output_dir: &Path) -> PathBuf {
    output_dir.join(LOG_FILE)
}
