use std::fs;
use std::path::Path;

use llpq::losses::Grade;
use llpq::models::{load_checkpoint, HeadKind};
use llpq::synthcohort::{generate_cohort, CohortSpec};
use llpq::trainer::{train, LossKind, PhaseSpec, TrainConfig, TrainControl, TrainError};
use llpq::volumes::LabeledSample;

fn cohort(n: usize, seed: u64) -> Vec<LabeledSample> {
    let spec = CohortSpec {
        n_samples: n,
        grid_shape: [24, 24, 24],
        grade_distribution: vec![0.3, 0.3, 0.1, 0.1, 0.1, 0.1],
        seed,
        ..CohortSpec::default()
    };
    generate_cohort(&spec).unwrap()
}

fn small_config(epochs: usize, iters: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        iters_per_epoch: iters,
        ..TrainConfig::default()
    };
    for p in cfg.phases.iter_mut() {
        p.epochs = epochs;
    }
    cfg
}

/// Every file under `dir`, relative path → bytes.
fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[test]
fn identical_seeds_give_identical_outputs() {
    let data = cohort(24, 3);
    let (tr, va) = data.split_at(16);
    let cfg = small_config(1, 2);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ctl = TrainControl::default();
    let ra = train(&cfg, tr, va, Some(a.path()), &ctl).unwrap();
    let rb = train(&cfg, tr, va, Some(b.path()), &ctl).unwrap();
    assert_eq!(ra.history, rb.history);
    assert_eq!(tree(a.path()), tree(b.path()));
}

#[test]
fn resume_matches_uninterrupted_run() {
    let data = cohort(24, 4);
    let (tr, va) = data.split_at(16);
    let cfg = small_config(2, 2);
    let full = tempfile::tempdir().unwrap();
    let split = tempfile::tempdir().unwrap();
    let whole = train(&cfg, tr, va, Some(full.path()), &TrainControl::default()).unwrap();
    assert!(whole.completed);

    // stop inside the first phase, then at the phase boundary
    for stop in [1, 1] {
        let ctl = TrainControl {
            resume: true,
            stop_after_epochs: Some(stop),
            ..TrainControl::default()
        };
        let part = train(&cfg, tr, va, Some(split.path()), &ctl).unwrap();
        assert!(!part.completed);
    }
    let ctl = TrainControl {
        resume: true,
        ..TrainControl::default()
    };
    let resumed = train(&cfg, tr, va, Some(split.path()), &ctl).unwrap();
    assert!(resumed.completed);
    assert_eq!(resumed.history, whole.history);
    assert_eq!(
        tree(&split.path().join("checkpoint")),
        tree(&full.path().join("checkpoint"))
    );
    assert_eq!(
        fs::read(split.path().join("metrics.csv")).unwrap(),
        fs::read(full.path().join("metrics.csv")).unwrap()
    );

    // resuming a finished run is a no-op returning the same model
    let again = train(&cfg, tr, va, Some(split.path()), &ctl).unwrap();
    assert_eq!(again.model.params, whole.model.params);
}

#[test]
fn resume_rejects_changed_config() {
    let data = cohort(24, 5);
    let (tr, va) = data.split_at(16);
    let cfg = small_config(2, 1);
    let dir = tempfile::tempdir().unwrap();
    let ctl = TrainControl {
        resume: true,
        stop_after_epochs: Some(1),
        ..TrainControl::default()
    };
    train(&cfg, tr, va, Some(dir.path()), &ctl).unwrap();
    let other = TrainConfig { seed: 9, ..cfg };
    let err = train(&other, tr, va, Some(dir.path()), &ctl).unwrap_err();
    assert!(matches!(err, TrainError::InvalidConfig(_)), "{err}");
}

#[test]
fn zero_updates_keep_initial_weights() {
    let data = cohort(24, 6);
    let (tr, va) = data.split_at(16);
    let cfg = small_config(1, 0);
    let out = train(&cfg, tr, va, None, &TrainControl::default()).unwrap();
    assert_eq!(out.model.params, cfg.model.init_params().unwrap());
}

#[test]
fn outputs_written() {
    let data = cohort(24, 7);
    let (tr, va) = data.split_at(16);
    let cfg = small_config(1, 1);
    let dir = tempfile::tempdir().unwrap();
    train(&cfg, tr, va, Some(dir.path()), &TrainControl::default()).unwrap();
    let resolved: TrainConfig =
        serde_json::from_str(&fs::read_to_string(dir.path().join("config.resolved.json")).unwrap())
            .unwrap();
    assert_eq!(resolved, cfg);
    let metrics = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[0].starts_with("epoch,phase,phase_epoch,loss,train_loss,val_loss"));
    assert!(lines[1].contains("lpi2") && lines[2].contains("lpi6"));
    let ck = load_checkpoint(&dir.path().join("checkpoint")).unwrap();
    assert_eq!(ck.model.config, cfg.model);
    assert_eq!(ck.training["completed"], serde_json::json!(true));
    assert_eq!(ck.training["history"].as_array().unwrap().len(), 2);
}

#[test]
fn missing_strata_is_an_error() {
    let data: Vec<LabeledSample> = cohort(24, 8)
        .into_iter()
        .filter(|s| s.grade_rater1 != Grade(1))
        .collect();
    let cfg = small_config(1, 1);
    let err = train(
        &cfg,
        &data[..10],
        &data[10..],
        None,
        &TrainControl::default(),
    )
    .unwrap_err();
    assert_eq!(err.to_string(), "missing strata: grades 1");
}

#[test]
fn divergence_saves_last_finite_state() {
    let data = cohort(24, 9);
    let (tr, va) = data.split_at(16);
    let mut cfg = small_config(1, 5);
    cfg.adadelta.lr = 1e30;
    let dir = tempfile::tempdir().unwrap();
    let err = train(&cfg, tr, va, Some(dir.path()), &TrainControl::default()).unwrap_err();
    assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
    let ck = load_checkpoint(&dir.path().join("checkpoint_last_finite")).unwrap();
    assert!(ck.model.params.iter().all(|(_, t)| t.all_finite()));
}

/// Median training loss of the first five epochs exceeds that of the last
/// five, for every head and loss combination.
#[test]
fn loss_decreases_for_every_head_and_loss() {
    let data = cohort(36, 10);
    let (tr, va) = data.split_at(28);
    let epochs = 10;
    let mut proportion_lpi2 = TrainConfig {
        iters_per_epoch: 4,
        ..TrainConfig::default()
    };
    proportion_lpi2.phases = vec![PhaseSpec {
        loss: LossKind::Lpi2,
        epochs,
        mila: None,
    }];
    let mut proportion_lpi6 = proportion_lpi2.clone();
    proportion_lpi6.phases[0].loss = LossKind::Lpi6;
    let mut gap_lpi6 = proportion_lpi6.clone();
    gap_lpi6.model.head = HeadKind::Gap;
    let mut mgap_lpi6 = proportion_lpi6.clone();
    mgap_lpi6.model.head = HeadKind::Mgap;
    let rms = gap_lpi6.rms_baseline();
    for (name, cfg) in [
        ("proportion+lpi2", proportion_lpi2),
        ("proportion+lpi6", proportion_lpi6),
        ("gap+lpi6", gap_lpi6),
        ("mgap+lpi6", mgap_lpi6),
        ("gap+rms", rms),
    ] {
        let out = train(&cfg, tr, va, None, &TrainControl::default()).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|r| r.train_loss).collect();
        let first = median(&mut losses[..5].to_vec());
        let last = median(&mut losses[losses.len() - 5..].to_vec());
        assert!(
            first > last,
            "{name}: first {first} last {last} ({losses:?})"
        );
    }
}
