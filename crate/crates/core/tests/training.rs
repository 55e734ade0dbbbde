mod common;

use common::tiny;
use memadapt::data::{Domain, Split};
use memadapt::nn::{params_fingerprint, Module};
use memadapt::pseudo_label::FilterMode;
use memadapt::trainer::{read_log, Model, Phase, TrainConfig, TrainMode, Trainer};
use memadapt::Error;
use std::cell::RefCell;
use std::rc::Rc;

fn run_to_end(cfg: TrainConfig) -> Trainer {
    let mut t = Trainer::new(cfg).unwrap();
    t.run().unwrap();
    t
}

#[test]
fn identical_config_gives_identical_log_csv() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [&a, &b] {
        let cfg = TrainConfig {
            output_dir: Some(dir.path().to_path_buf()),
            ..tiny(TrainMode::DfaIdma, 3, 24)
        };
        run_to_end(cfg);
    }
    let la = std::fs::read(a.path().join("train_log.csv")).unwrap();
    let lb = std::fs::read(b.path().join("train_log.csv")).unwrap();
    assert!(!la.is_empty());
    assert_eq!(la, lb);
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 10,
        output_dir: Some(dir.path().to_path_buf()),
        ..tiny(TrainMode::DfaIdma, 1, 24)
    };
    let mut full = Trainer::new(cfg.clone()).unwrap();
    let s_full = full.run().unwrap();
    let log_full = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();

    let mut resumed = Trainer::resume(cfg, &dir.path().join("ckpt_000010")).unwrap();
    assert_eq!(resumed.iteration, 10);
    let s_res = resumed.run().unwrap();
    let log_res = std::fs::read_to_string(dir.path().join("train_log.csv")).unwrap();

    assert_eq!(s_full.test, s_res.test);
    assert_eq!(s_full.test_confusion, s_res.test_confusion);
    assert_eq!(full.evals, resumed.evals);
    assert_eq!(full.model.g_fingerprint(), resumed.model.g_fingerprint());
    assert_eq!(full.model.d_fingerprint(), resumed.model.d_fingerprint());
    assert_eq!(log_full, log_res);
}

#[test]
fn resume_refuses_different_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 5,
        output_dir: Some(dir.path().to_path_buf()),
        ..tiny(TrainMode::Dfa, 0, 5)
    };
    run_to_end(cfg.clone());
    let other = TrainConfig { lambda_adv: 0.5, ..cfg };
    let err = Trainer::resume(other, &dir.path().join("ckpt_000005")).err().unwrap();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

#[test]
fn source_only_never_reads_target_training_images() {
    let t = run_to_end(tiny(TrainMode::SourceOnly, 0, 12));
    let log = t.data_access();
    assert!(log.iter().all(|a| !(a.domain == Domain::Target && a.split == Split::Train)));
    assert!(t.model.d.is_none() && t.model.memory.is_none() && t.model.attn.is_none());
}

fn fp(params: Vec<&memadapt::tensor::Param>) -> String {
    params_fingerprint(params)
}

#[derive(Clone, Debug, PartialEq)]
struct Groups {
    f: String,
    c1: String,
    c2: String,
    attn: String,
    d: String,
}

fn groups(m: &Model) -> Groups {
    Groups {
        f: fp(m.f.params()),
        c1: fp(m.c1.params()),
        c2: m.c2.as_ref().map(|c| fp(c.params())).unwrap_or_default(),
        attn: m.attn.as_ref().map(|a| fp(a.params())).unwrap_or_default(),
        d: m.d.as_ref().map(|d| fp(d.params())).unwrap_or_default(),
    }
}

#[test]
fn each_update_touches_only_its_own_parameters() {
    let mut t = Trainer::new(tiny(TrainMode::DfaIdma, 5, 100)).unwrap();
    let prev = Rc::new(RefCell::new(groups(&t.model)));
    let violations = Rc::new(RefCell::new(Vec::<String>::new()));
    let counts = Rc::new(RefCell::new([0usize; 3]));
    let (p, v, c) = (prev.clone(), violations.clone(), counts.clone());
    t.set_probe(Box::new(move |phase, model| {
        let now = groups(model);
        let before = p.borrow().clone();
        let bad = |what: &str, ok: bool| {
            if !ok {
                v.borrow_mut().push(format!("{phase:?}: {what}"));
            }
        };
        match phase {
            Phase::G1 => {
                c.borrow_mut()[0] += 1;
                bad("c1 unchanged", now.c1 != before.c1);
                bad("c2 changed", now.c2 == before.c2);
                bad("attn changed", now.attn == before.attn);
                bad("d changed", now.d == before.d);
            }
            Phase::D => {
                c.borrow_mut()[1] += 1;
                bad("d unchanged", now.d != before.d);
                bad("g changed", (&now.f, &now.c1, &now.c2, &now.attn) == (&before.f, &before.c1, &before.c2, &before.attn));
            }
            Phase::G2 => {
                c.borrow_mut()[2] += 1;
                bad("c2 unchanged", now.c2 != before.c2);
                bad("c1 changed", now.c1 == before.c1);
                bad("d changed", now.d == before.d);
            }
        }
        *p.borrow_mut() = now;
    }));
    for _ in 0..100 {
        t.step().unwrap();
    }
    assert!(violations.borrow().is_empty(), "{:?}", violations.borrow());
    let c = *counts.borrow();
    assert_eq!(c[0], 100);
    assert_eq!(c[1], 100);
    assert_eq!(c[2], 75);
}

#[test]
fn seg1_decreases_over_200_iterations() {
    let mut first = Vec::new();
    let mut last = Vec::new();
    for seed in 0..3 {
        let mut t = Trainer::new(TrainConfig {
            eval_every: 0,
            ..tiny(TrainMode::Dfa, seed, 200)
        })
        .unwrap();
        for _ in 0..200 {
            t.step().unwrap();
        }
        first.push(t.log[0].seg1);
        last.push(t.log[199].seg1);
    }
    let median = |v: &mut Vec<f64>| {
        v.sort_by(f64::total_cmp);
        v[1]
    };
    assert!(median(&mut last) < median(&mut first), "{last:?} vs {first:?}");
}

#[test]
fn zero_adversarial_weight_is_plain_supervised_step() {
    let cfg = |mode| TrainConfig {
        lambda_adv: 0.0,
        eval_every: 0,
        ..tiny(mode, 4, 10)
    };
    let mut dfa = Trainer::new(cfg(TrainMode::Dfa)).unwrap();
    let mut so = Trainer::new(cfg(TrainMode::SourceOnly)).unwrap();
    assert_eq!(dfa.model.g_fingerprint(), so.model.g_fingerprint());
    let r = dfa.step().unwrap();
    so.step().unwrap();
    assert!(r.losses.adv > 0.0);
    assert_eq!(fp(dfa.model.g1_params()), fp(so.model.g1_params()));
    assert_eq!(dfa.log[0].seg1, so.log[0].seg1);
}

#[test]
fn frozen_memory_keeps_aggregated_loss_finite() {
    let mut t = Trainer::new(TrainConfig {
        freeze_memory: true,
        eval_every: 0,
        ..tiny(TrainMode::DfaIdma, 2, 30)
    })
    .unwrap();
    for _ in 0..30 {
        let r = t.step().unwrap();
        if t.iteration > t.config.tau() {
            assert_eq!(r.momentum, Some(0.0));
            assert!(r.losses.seg2.is_finite() && r.losses.seg2 > 0.0);
        }
    }
    assert!(!t.model.memory.as_ref().unwrap().initialized_classes().is_empty());
}

#[test]
fn momentum_follows_schedule_from_step_two() {
    let mut t = Trainer::new(TrainConfig {
        eval_every: 0,
        ..tiny(TrainMode::Idma, 0, 20)
    })
    .unwrap();
    let tau = t.config.tau();
    for it in 0..20 {
        let r = t.step().unwrap();
        let mem = t.model.memory.as_ref().unwrap();
        if it < tau {
            assert_eq!(r.momentum, None);
        } else {
            assert_eq!(r.momentum, Some(mem.momentum_at(it - tau)));
        }
    }
}

#[test]
fn sigma_one_matches_no_filtering() {
    let a = run_to_end(TrainConfig {
        sigma: 1.0,
        filter_mode: FilterMode::Entropy,
        ..tiny(TrainMode::DfaIdma, 6, 20)
    });
    let b = run_to_end(TrainConfig {
        sigma: 1.0,
        filter_mode: FilterMode::None,
        ..tiny(TrainMode::DfaIdma, 6, 20)
    });
    assert_eq!(a.log, b.log);
    assert_eq!(a.model.g_fingerprint(), b.model.g_fingerprint());
    assert_eq!(a.model.memory.as_ref().unwrap().values(), b.model.memory.as_ref().unwrap().values());
}

#[test]
fn sigma_zero_never_uses_target_pixels() {
    let mut t = Trainer::new(TrainConfig {
        sigma: 0.0,
        eval_every: 0,
        ..tiny(TrainMode::DfaIdma, 7, 20)
    })
    .unwrap();
    let mut step2 = 0;
    for _ in 0..20 {
        if let Some(r) = t.step().unwrap().retained {
            assert_eq!(r, 0.0);
            step2 += 1;
        }
    }
    assert_eq!(step2, 15);
}

#[test]
fn idma_from_iteration_zero_without_discriminator() {
    let mut t = Trainer::new(TrainConfig {
        tau_prime: Some(0),
        eval_every: 0,
        ..tiny(TrainMode::Idma, 0, 5)
    })
    .unwrap();
    assert!(t.model.d.is_none());
    let r = t.step().unwrap();
    assert!(r.momentum.is_some());
    assert!(r.losses.seg2 > 0.0 && r.losses.adv == 0.0 && r.losses.d_loss == 0.0);
}

#[test]
fn class_count_mismatch_is_rejected_before_training() {
    let mut cfg = tiny(TrainMode::SourceOnly, 0, 5);
    cfg.network.num_classes = 4;
    assert!(Trainer::new(cfg).is_err());
}

#[test]
fn config_errors_name_the_json_path() {
    let err = TrainConfig::from_json(r#"{"network": {"tile_size": "big"}}"#, "cfg.json").unwrap_err();
    match err {
        Error::Config { path, .. } => assert!(path.contains("network.tile_size"), "{path}"),
        e => panic!("{e}"),
    }
    let err = TrainConfig::from_json(r#"{"sigmaa": 0.5}"#, "cfg.json").unwrap_err();
    assert!(matches!(err, Error::Config { .. }), "{err}");
    let err = TrainConfig::from_json(r#"{"sigma": 1.5}"#, "cfg.json").unwrap_err();
    match err {
        Error::Config { path, .. } => assert!(path.ends_with("sigma"), "{path}"),
        e => panic!("{e}"),
    }
}

#[test]
fn log_has_one_row_per_iteration() {
    let dir = tempfile::tempdir().unwrap();
    run_to_end(TrainConfig {
        output_dir: Some(dir.path().to_path_buf()),
        ..tiny(TrainMode::Dfa, 0, 12)
    });
    let rows = read_log(&dir.path().join("train_log.csv")).unwrap();
    assert_eq!(rows.iter().map(|r| r.iteration).collect::<Vec<_>>(), (0..12).collect::<Vec<_>>());
    for f in ["metrics.json", "confusion.csv", "best/checkpoint.json", "final/checkpoint.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}
