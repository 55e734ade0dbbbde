//! Randomized finite-difference checks of every tape operation and of the
//! generator and discriminator objectives.

use crate::error::{Error, Result};
use crate::losses::{adv_loss_target, d_loss, seg_ce_loss, total_g1_loss};
use crate::networks::NetworkSpec;
use crate::nn::Mode;
use crate::tensor::{grad_check_with, BnMode, Conv2dGeom, Param, Tape, Tensor, Var};
use crate::trainer::{Model, TrainConfig, TrainMode};
use crate::VOID;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

/// Largest accepted `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
pub const TOLERANCE: f64 = 1e-4;
const EPS: f64 = 1e-6;
/// Input elements probed per case.
const PROBES: usize = 48;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Op,
    Net,
    All,
}

impl Scope {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "op" => Ok(Scope::Op),
            "net" => Ok(Scope::Net),
            "all" => Ok(Scope::All),
            _ => Err(Error::Invalid(format!("unknown scope {s:?} (op, net, all)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub cases: usize,
    pub max_rel_error: f64,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

type Case = fn(&mut ChaCha8Rng) -> Result<f64>;

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

fn rand_shape(rng: &mut ChaCha8Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| rng.gen_range(1..=4)).collect()
}

/// Checks `f` at `x` on a random subset of elements.
fn check(x: &Tensor, rng: &mut ChaCha8Rng, f: impl FnMut(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let mut idx: Vec<usize> = (0..x.numel()).collect();
    idx.shuffle(rng);
    idx.truncate(PROBES);
    Ok(grad_check_with(f, x, EPS, Some(&idx))?.max_rel_error)
}

/// `sum(y * r)` for a fixed random `r`, so every output element gets a distinct upstream gradient.
fn project(tape: &mut Tape, y: Var, r: &Tensor) -> Result<Var> {
    let w = tape.constant(r.clone());
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Checks a unary op through a random projection of its output.
fn unary(x: Tensor, rng: &mut ChaCha8Rng, op: impl Fn(&mut Tape, Var) -> Result<Var>) -> Result<f64> {
    let mut probe = Tape::new();
    let v = probe.constant(x.clone());
    let y = op(&mut probe, v)?;
    let out_shape = probe.shape(y).to_vec();
    let r = randn(&out_shape, rng);
    check(&x, rng, |t, v| {
        let y = op(t, v)?;
        project(t, y, &r)
    })
}

/// Checks each operand slot of `op` in turn, the other operands held constant.
fn multi(inputs: Vec<Tensor>, rng: &mut ChaCha8Rng, op: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut probe = Tape::new();
    let vs: Vec<Var> = inputs.iter().map(|x| probe.constant(x.clone())).collect();
    let y = op(&mut probe, &vs)?;
    let out_shape = probe.shape(y).to_vec();
    let r = randn(&out_shape, rng);
    let mut worst: f64 = 0.0;
    for slot in 0..inputs.len() {
        let e = check(&inputs[slot], rng, |t, v| {
            let vs: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, x)| if i == slot { v } else { t.constant(x.clone()) })
                .collect();
            let y = op(t, &vs)?;
            project(t, y, &r)
        })?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn case_add(rng: &mut ChaCha8Rng) -> Result<f64> {
    let rank = rng.gen_range(1..=4);
    let s = rand_shape(rng, rank);
    multi(vec![randn(&s, rng), randn(&s, rng)], rng, |t, v| t.add(v[0], v[1]))
}

fn case_sub(rng: &mut ChaCha8Rng) -> Result<f64> {
    let rank = rng.gen_range(1..=4);
    let s = rand_shape(rng, rank);
    multi(vec![randn(&s, rng), randn(&s, rng)], rng, |t, v| t.sub(v[0], v[1]))
}

fn case_mul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let rank = rng.gen_range(1..=4);
    let s = rand_shape(rng, rank);
    multi(vec![randn(&s, rng), randn(&s, rng)], rng, |t, v| t.mul(v[0], v[1]))
}

fn case_scale(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = rand_shape(rng, 3);
    let c = rng.gen_range(-3.0..3.0);
    unary(randn(&s, rng), rng, move |t, v| Ok(t.scale(v, c)))
}

fn case_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = rand_shape(rng, 3);
    unary(randn(&s, rng), rng, |t, v| Ok(t.relu(v)))
}

fn case_leaky_relu(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = rand_shape(rng, 3);
    let slope = rng.gen_range(0.01..0.5);
    unary(randn(&s, rng), rng, move |t, v| Ok(t.leaky_relu(v, slope)))
}

fn case_log(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = rand_shape(rng, 3);
    let x = Tensor::uniform(&s, 0.5, 3.0, rng);
    unary(x, rng, |t, v| Ok(t.log(v)))
}

fn case_exp(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = rand_shape(rng, 3);
    unary(randn(&s, rng), rng, |t, v| Ok(t.exp(v)))
}

fn case_sigmoid(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = rand_shape(rng, 3);
    let x = Tensor::randn(&s, 3.0, rng);
    unary(x, rng, |t, v| Ok(t.sigmoid(v)))
}

fn case_sum(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = rand_shape(rng, 3);
    let x = randn(&s, rng);
    check(&x, rng, |t, v| {
        let sq = t.mul(v, v)?;
        Ok(t.sum(sq))
    })
}

fn case_mean(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = rand_shape(rng, 3);
    let x = randn(&s, rng);
    check(&x, rng, |t, v| {
        let e = t.exp(v);
        Ok(t.mean(e))
    })
}

fn case_reshape(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = rand_shape(rng, 3);
    let target = vec![s[2], s[0] * s[1]];
    unary(randn(&s, rng), rng, move |t, v| t.reshape(v, &target))
}

fn case_permute(rng: &mut ChaCha8Rng) -> Result<f64> {
    let rank = rng.gen_range(2..=4);
    let s = rand_shape(rng, rank);
    let mut perm: Vec<usize> = (0..rank).collect();
    perm.shuffle(rng);
    unary(randn(&s, rng), rng, move |t, v| t.permute(v, &perm))
}

fn case_concat(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = rand_shape(rng, 4);
    let axis = rng.gen_range(0..4);
    let mut s2 = s.clone();
    s2[axis] = rng.gen_range(1..=3);
    multi(vec![randn(&s, rng), randn(&s2, rng)], rng, move |t, v| t.concat(v, axis))
}

fn case_narrow(rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut s = rand_shape(rng, 3);
    let axis = rng.gen_range(0..3);
    s[axis] += 2;
    let start = rng.gen_range(0..s[axis]);
    let len = rng.gen_range(1..=s[axis] - start);
    unary(randn(&s, rng), rng, move |t, v| t.narrow(v, axis, start, len))
}

fn case_softmax(rng: &mut ChaCha8Rng) -> Result<f64> {
    let rank = rng.gen_range(1..=4);
    let s = rand_shape(rng, rank);
    let axis = rng.gen_range(0..rank);
    unary(Tensor::randn(&s, 2.0, rng), rng, move |t, v| t.softmax(v, axis))
}

fn case_matmul(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (b, m, k, n) = (
        rng.gen_range(1..=3),
        rng.gen_range(1..=4),
        rng.gen_range(1..=4),
        rng.gen_range(1..=4),
    );
    let (sa, sb) = match rng.gen_range(0..3) {
        0 => (vec![m, k], vec![k, n]),
        1 => (vec![b, m, k], vec![k, n]),
        _ => (vec![b, m, k], vec![b, k, n]),
    };
    multi(vec![randn(&sa, rng), randn(&sb, rng)], rng, |t, v| t.matmul(v[0], v[1]))
}

fn case_conv2d(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, cin, cout) = (rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=3));
    let k = rng.gen_range(1..=3);
    let geom = Conv2dGeom::new(rng.gen_range(1..=2), rng.gen_range(0..=2), rng.gen_range(1..=2));
    let span = geom.dilation * (k - 1) + 1;
    let h = span + rng.gen_range(0..=4);
    let w = span + rng.gen_range(0..=4);
    let inputs = vec![
        randn(&[n, cin, h, w], rng),
        randn(&[cout, cin, k, k], rng),
        randn(&[cout], rng),
    ];
    multi(inputs, rng, move |t, v| t.conv2d(v[0], v[1], Some(v[2]), geom))
}

fn case_batch_norm_train(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c) = (rng.gen_range(2..=3), rng.gen_range(1..=3));
    let (h, w) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let key = Param::new("bn", Tensor::zeros(&[c])).id();
    let inputs = vec![
        Tensor::randn(&[n, c, h, w], 2.0, rng),
        Tensor::uniform(&[c], 0.5, 1.5, rng),
        randn(&[c], rng),
    ];
    multi(inputs, rng, move |t, v| t.batch_norm(v[0], v[1], v[2], BnMode::Train { key }))
}

fn case_batch_norm_eval(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c) = (rng.gen_range(1..=3), rng.gen_range(1..=3));
    let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
    let inputs = vec![randn(&[n, c, 2, 3], rng), randn(&[c], rng), randn(&[c], rng)];
    multi(inputs, rng, move |t, v| {
        t.batch_norm(
            v[0],
            v[1],
            v[2],
            BnMode::Eval {
                mean: &mean,
                var: &var,
            },
        )
    })
}

fn case_upsample_bilinear(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
    let size = (rng.gen_range(1..=9), rng.gen_range(1..=9));
    unary(randn(&s, rng), rng, move |t, v| t.upsample_bilinear(v, size))
}

fn case_upsample_nearest(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = [rng.gen_range(1..=2), rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
    let size = (rng.gen_range(1..=9), rng.gen_range(1..=9));
    unary(randn(&s, rng), rng, move |t, v| t.upsample_nearest(v, size))
}

fn case_cross_entropy(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (n, c, h, w) = (rng.gen_range(1..=2), rng.gen_range(2..=5), rng.gen_range(1..=4), rng.gen_range(1..=4));
    let mut targets: Vec<u8> = (0..n * h * w).map(|_| rng.gen_range(0..c) as u8).collect();
    for t in targets.iter_mut().skip(1) {
        if rng.gen_bool(0.2) {
            *t = VOID;
        }
    }
    let x = Tensor::randn(&[n, c, h, w], 2.0, rng);
    check(&x, rng, |t, v| t.cross_entropy(v, &targets, VOID))
}

fn case_bce_with_logits(rng: &mut ChaCha8Rng) -> Result<f64> {
    let s = rand_shape(rng, 4);
    let target = [0.0, 1.0, rng.gen_range(0.0..1.0)][rng.gen_range(0..3)];
    let x = Tensor::randn(&s, 3.0, rng);
    check(&x, rng, |t, v| Ok(t.bce_with_logits(v, target)))
}

const OP_CASES: &[(&str, Case)] = &[
    ("add", case_add),
    ("sub", case_sub),
    ("mul", case_mul),
    ("scale", case_scale),
    ("relu", case_relu),
    ("leaky_relu", case_leaky_relu),
    ("log", case_log),
    ("exp", case_exp),
    ("sigmoid", case_sigmoid),
    ("sum", case_sum),
    ("mean", case_mean),
    ("reshape", case_reshape),
    ("permute", case_permute),
    ("concat", case_concat),
    ("narrow", case_narrow),
    ("softmax", case_softmax),
    ("matmul", case_matmul),
    ("conv2d", case_conv2d),
    ("batch_norm_train", case_batch_norm_train),
    ("batch_norm_eval", case_batch_norm_eval),
    ("upsample_bilinear", case_upsample_bilinear),
    ("upsample_nearest", case_upsample_nearest),
    ("cross_entropy", case_cross_entropy),
    ("bce_with_logits", case_bce_with_logits),
];

/// Small full model with random memory rows; 8x8 inputs.
fn small_model(rng: &mut ChaCha8Rng) -> Model {
    let cfg = TrainConfig {
        mode: TrainMode::DfaIdma,
        seed: rng.gen(),
        network: NetworkSpec {
            input_channels: 3,
            feature_channels: 4,
            num_classes: 3,
            discriminator_channels: vec![4, 4, 1],
            tile_size: 8,
            ..NetworkSpec::default()
        },
        ..TrainConfig::default()
    };
    let mut model = Model::new(&cfg);
    let mem = model.memory.as_mut().expect("memory");
    for k in 0..3 {
        if k == 0 || rng.gen_bool(0.7) {
            let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            mem.set_row(k, &row);
        }
    }
    model
}

fn labels(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n)
        .map(|_| if rng.gen_bool(0.1) { VOID } else { rng.gen_range(0..3) })
        .collect()
}

/// Finite-difference check of parameter gradients, sampled per parameter tensor.
fn check_params(
    model: &Model,
    rng: &mut ChaCha8Rng,
    include: impl Fn(&str) -> bool,
    loss: impl Fn(&Model, &mut Tape) -> Result<Var>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let l = loss(model, &mut tape)?;
    let grads = tape.backward(l)?;
    let eval = |m: &Model| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss(m, &mut t)?;
        Ok(t.value(l).item())
    };
    let mut worst: f64 = 0.0;
    for (pi, p) in model.params().iter().enumerate() {
        if !include(p.name()) {
            continue;
        }
        let g = grads
            .param(p.id())
            .ok_or_else(|| Error::Invalid(format!("no gradient for {}", p.name())))?;
        for _ in 0..2 {
            let i = rng.gen_range(0..p.value.numel());
            let mut plus = model.clone();
            plus.params_mut()[pi].value.data_mut()[i] += EPS;
            let mut minus = model.clone();
            minus.params_mut()[pi].value.data_mut()[i] -= EPS;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * EPS);
            let err = (g[i] - numeric).abs() / 1f64.max(g[i].abs()).max(numeric.abs());
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn is_g1(name: &str) -> bool {
    name.starts_with("extractor.") || name.starts_with("c1.")
}

fn is_g2(name: &str) -> bool {
    name.starts_with("extractor.") || name.starts_with("attn.") || name.starts_with("c2.")
}

fn g1_loss(m: &Model, t: &mut Tape, xs: Var, xt: Var, ys: &[u8]) -> Result<Var> {
    let fs = m.f.forward(t, xs, Mode::Train)?;
    let ps = m.c1.forward(t, fs, (8, 8), Mode::Train)?;
    let seg1 = seg_ce_loss(t, ps, ys)?;
    let ft = m.f.forward(t, xt, Mode::Train)?;
    let pt = m.c1.forward(t, ft, (8, 8), Mode::Train)?;
    let prob = t.softmax(pt, 1)?;
    let d_out = m.d.as_ref().expect("discriminator").forward(t, prob)?;
    let adv = adv_loss_target(t, d_out);
    total_g1_loss(t, seg1, adv, 0.7)
}

fn g2_loss(m: &Model, t: &mut Tape, xs: Var, ys: &[u8]) -> Result<Var> {
    let fs = m.f.forward(t, xs, Mode::Train)?;
    let agg = m
        .attn
        .as_ref()
        .expect("aggregator")
        .forward(t, fs, m.memory.as_ref().expect("memory"), Mode::Train)?;
    let logits = m.c2.as_ref().expect("c2").forward(t, agg.features, (8, 8), Mode::Train)?;
    seg_ce_loss(t, logits, ys)
}

fn d_objective(m: &Model, t: &mut Tape, src_logits: Var, tgt_prob: Var) -> Result<Var> {
    let d = m.d.as_ref().expect("discriminator");
    let src = t.softmax(src_logits, 1)?;
    let a = d.forward(t, src)?;
    let b = d.forward(t, tgt_prob)?;
    d_loss(t, a, b)
}

fn case_g1(rng: &mut ChaCha8Rng) -> Result<f64> {
    let model = small_model(rng);
    let xs = randn(&[2, 3, 8, 8], rng);
    let xt = randn(&[2, 3, 8, 8], rng);
    let ys = labels(rng, 2 * 64);
    let e_in = check(&xs, rng, |t, v| {
        let c = t.constant(xt.clone());
        g1_loss(&model, t, v, c, &ys)
    })?;
    let e_p = check_params(&model, rng, is_g1, |m, t| {
        let a = t.constant(xs.clone());
        let b = t.constant(xt.clone());
        g1_loss(m, t, a, b, &ys)
    })?;
    Ok(e_in.max(e_p))
}

fn case_g2(rng: &mut ChaCha8Rng) -> Result<f64> {
    let model = small_model(rng);
    let xs = randn(&[2, 3, 8, 8], rng);
    let ys = labels(rng, 2 * 64);
    let e_in = check(&xs, rng, |t, v| g2_loss(&model, t, v, &ys))?;
    let e_p = check_params(&model, rng, is_g2, |m, t| {
        let a = t.constant(xs.clone());
        g2_loss(m, t, a, &ys)
    })?;
    Ok(e_in.max(e_p))
}

fn case_d(rng: &mut ChaCha8Rng) -> Result<f64> {
    let model = small_model(rng);
    let src = Tensor::randn(&[2, 3, 8, 8], 2.0, rng);
    let tgt_logits = Tensor::randn(&[2, 3, 8, 8], 2.0, rng);
    let mut pt = Tape::new();
    let v = pt.constant(tgt_logits);
    let s = pt.softmax(v, 1)?;
    let tgt = pt.value(s).clone();
    let e_in = check(&src, rng, |t, v| {
        let c = t.constant(tgt.clone());
        d_objective(&model, t, v, c)
    })?;
    let e_p = check_params(
        &model,
        rng,
        |n| n.starts_with("disc."),
        |m, t| {
            let a = t.constant(src.clone());
            let b = t.constant(tgt.clone());
            d_objective(m, t, a, b)
        },
    )?;
    Ok(e_in.max(e_p))
}

const NET_CASES: &[(&str, Case)] = &[("G1 (F, C1, adversarial)", case_g1), ("G2 (F, A, C2)", case_g2), ("D", case_d)];

fn run_case(name: &'static str, case: Case, cases: usize, rng: &mut ChaCha8Rng) -> Result<CheckOutcome> {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..cases {
        worst = worst.max(case(rng)?);
    }
    Ok(CheckOutcome {
        name,
        cases,
        max_rel_error: worst,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Runs `cases` random instances of every check in `scope`.
pub fn run(scope: Scope, cases: usize, seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    if matches!(scope, Scope::Op | Scope::All) {
        for &(name, case) in OP_CASES {
            out.push(run_case(name, case, cases, &mut rng)?);
        }
    }
    if matches!(scope, Scope::Net | Scope::All) {
        for &(name, case) in NET_CASES {
            out.push(run_case(name, case, cases, &mut rng)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ops_pass_on_a_few_cases() {
        for o in run(Scope::Op, 3, 1).unwrap() {
            assert!(o.passed(), "{} {}", o.name, o.max_rel_error);
        }
    }

    #[test]
    fn nets_pass_on_one_case() {
        for o in run(Scope::Net, 1, 2).unwrap() {
            assert!(o.passed(), "{} {}", o.name, o.max_rel_error);
        }
    }

    #[test]
    fn scope_names() {
        assert_eq!(Scope::parse("all").unwrap(), Scope::All);
        assert!(Scope::parse("nets").is_err());
    }
}
