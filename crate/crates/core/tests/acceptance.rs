//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria 5-8 train nine models (three configurations, three seeds).
//! Runs live under the cargo target tmp dir and resume where they stopped,
//! so completed runs are reused. `LLPQ_ACCEPTANCE_QUICK=1` skips them.
//! The process exits nonzero on a failed criterion only when
//! `LLPQ_ACCEPTANCE_STRICT=1`.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use llpq::cli::{
    mean_dice, pattern_report, score_samples, PatternSource, ScoreOptions, ScoredSample, Scorer,
};
use llpq::evalmetrics::{auc, evaluate, icc, EvalInput, EvalReport, GradeIntervalMap};
use llpq::losses::{lpi_loss_and_grad, mila_loss, rms_loss, Grade, LpiConfig, ThresholdVector};
use llpq::models::{Model, ModelConfig};
use llpq::nncore::{conv3d_forward, grad_check, Graph, ResidualParams, Tensor, Var};
use llpq::synthcohort::{cohort_checksum, generate_cohort, write_cohort, CohortSpec};
use llpq::trainer::{
    sample_batch, stratified_split, train, OutputMapping, Strata, TrainConfig, TrainControl,
};
use llpq::volumes::{LabeledSample, Mask, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
/// Central-difference step for smooth functions; balances truncation
/// (∝ h²) against roundoff (∝ 1/h) for the steep α = 120 losses.
const FD_EPS: f64 = 1e-4;
/// Step for piecewise-linear ops, which have no truncation error but
/// internal ReLU kinks that a wide step would cross.
const FD_EPS_PL: f64 = 1e-6;
const GRAD_POINTS: usize = 10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn tmp_root() -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

// ---------------------------------------------------------------- 1

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
}

/// Values bounded away from zero, so ReLU kinks stay outside the probe step.
fn off_kink(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.gen_range(0.05..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Max relative error of `Σ r ⊙ op(leaves)` over all leaf coordinates.
fn graph_check(
    shapes: &[Vec<usize>],
    point: &[f64],
    r_seed: u64,
    h: f64,
    build: &dyn Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> f64 {
    let eval = |x: &[f64]| -> (f64, Vec<f64>) {
        let mut g = Graph::<f64>::new();
        let mut off = 0;
        let leaves: Vec<Var> = shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let v = g.leaf(
                    Tensor::new(s.clone(), x[off..off + n].to_vec()).unwrap(),
                    true,
                );
                off += n;
                v
            })
            .collect();
        let out = build(&mut g, &leaves);
        let shape = g.value(out).shape.clone();
        let mut rr = ChaCha8Rng::seed_from_u64(r_seed);
        let r = normal_vec(&mut rr, g.value(out).len(), 1.0);
        let value: f64 = g.value(out).data.iter().zip(&r).map(|(a, b)| a * b).sum();
        g.backward(&[(out, Tensor::new(shape, r).unwrap())])
            .unwrap();
        let grad: Vec<f64> = leaves
            .iter()
            .flat_map(|&v| match g.grad(v) {
                Some(t) => t.data.clone(),
                None => vec![0.0; g.value(v).len()],
            })
            .collect();
        (value, grad)
    };
    grad_check(eval, point, h)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(e);
    };

    let mask: Vec<u8> = (0..27).map(|i| (i % 3 != 0) as u8).collect();
    for trial in 0..GRAD_POINTS {
        let r = 1000 + trial as u64;
        // conv3d, stride 1 and 2, padded and valid
        for &(stride, pad) in &[(1usize, 1usize), (2, 1), (1, 0), (2, 0)] {
            let shapes = vec![vec![2, 5, 4, 5], vec![3, 2, 3, 3, 3], vec![3]];
            let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
            let p = normal_vec(&mut rng, n, 1.0);
            note(
                "conv3d",
                graph_check(&shapes, &p, r, FD_EPS_PL, &|g, v| {
                    g.conv3d(v[0], v[1], v[2], stride, pad).unwrap()
                }),
            );
        }
        let shapes = vec![vec![2, 3, 3, 3], vec![2, 3, 3, 3]];
        let p = normal_vec(&mut rng, 108, 1.0);
        note(
            "add",
            graph_check(&shapes, &p, r, FD_EPS_PL, &|g, v| {
                g.add(v[0], v[1]).unwrap()
            }),
        );

        let p = off_kink(&mut rng, 54);
        note(
            "relu",
            graph_check(&shapes[..1], &p, r, FD_EPS_PL, &|g, v| {
                g.relu(v[0]).unwrap()
            }),
        );
        let p = normal_vec(&mut rng, 54, 4.0);
        note(
            "sigmoid",
            graph_check(&shapes[..1], &p, r, FD_EPS, &|g, v| {
                g.sigmoid(v[0]).unwrap()
            }),
        );
        let p: Vec<f64> = off_kink(&mut rng, 54).iter().map(|x| x + 0.5).collect();
        note(
            "clamp",
            graph_check(&shapes[..1], &p, r, FD_EPS_PL, &|g, v| {
                g.clamp(v[0], 0.0, 0.5).unwrap()
            }),
        );
        let p = normal_vec(&mut rng, 54, 1.0);
        note(
            "gap",
            graph_check(&shapes[..1], &p, r, FD_EPS_PL, &|g, v| g.gap(v[0]).unwrap()),
        );
        note(
            "masked_gap",
            graph_check(&shapes[..1], &p, r, FD_EPS_PL, &|g, v| {
                g.masked_gap(v[0], &mask).unwrap()
            }),
        );
        let fc = vec![vec![4], vec![3, 4], vec![3]];
        let p = normal_vec(&mut rng, 19, 1.0);
        note(
            "fully_connected",
            graph_check(&fc, &p, r, FD_EPS_PL, &|g, v| {
                g.fully_connected(v[0], v[1], v[2]).unwrap()
            }),
        );
        let rb = vec![
            vec![2, 4, 4, 4],
            vec![2, 2, 3, 3, 3],
            vec![2],
            vec![2, 2, 3, 3, 3],
            vec![2],
        ];
        let n: usize = rb.iter().map(|s| s.iter().product::<usize>()).sum();
        let p = normal_vec(&mut rng, n, 0.5);
        note(
            "residual_block",
            graph_check(&rb, &p, r, FD_EPS_PL, &|g, v| {
                g.residual_block(
                    v[0],
                    &ResidualParams {
                        w1: v[1],
                        b1: v[2],
                        w2: v[3],
                        b2: v[4],
                    },
                )
                .unwrap()
            }),
        );
    }

    let lpi6 = LpiConfig::default();
    let lpi2 = lpi6.presence_only();
    for _ in 0..GRAD_POINTS {
        let y_hat = rng.gen_range(0.0..0.5);
        let g = Grade(rng.gen_range(0..6));
        let f6 = |x: &[f64]| {
            let (v, d) = lpi_loss_and_grad(x[0], g, &lpi6).unwrap();
            (v, vec![d])
        };
        note("lpi6", grad_check(f6, &[y_hat], FD_EPS));
        let g2 = g.presence();
        let f2 = |x: &[f64]| {
            let (v, d) = lpi_loss_and_grad(x[0], g2, &lpi2).unwrap();
            (v, vec![d])
        };
        note("lpi2", grad_check(f2, &[y_hat], FD_EPS));

        let pm: Vec<f64> = (0..27).map(|_| rng.gen_range(0.01..0.99)).collect();
        let fm = |x: &[f64]| mila_loss(x, &mask, Grade(0), &lpi6).unwrap();
        note("mila", grad_check(fm, &pm, FD_EPS));

        let grades: Vec<Grade> = (0..6).map(|_| Grade(rng.gen_range(0..6))).collect();
        let s = normal_vec(&mut rng, 6, 3.0);
        let fr = |x: &[f64]| rms_loss(x, &grades).unwrap();
        note("rms", grad_check(fr, &s, FD_EPS));
    }

    // conv → relu → conv → sigmoid → masked GAP → LPI₆
    for trial in 0..GRAD_POINTS {
        let shapes = [
            vec![1, 5, 5, 5],
            vec![2, 1, 3, 3, 3],
            vec![2],
            vec![1, 2, 1, 1, 1],
            vec![1],
        ];
        let n: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let p = normal_vec(&mut rng, n, 0.7);
        let grade = Grade((trial % 6) as u8);
        let cfg = lpi6.clone();
        let f = |x: &[f64]| {
            let mut g = Graph::<f64>::new();
            let mut off = 0;
            let v: Vec<Var> = shapes
                .iter()
                .map(|s| {
                    let n: usize = s.iter().product();
                    let l = g.leaf(
                        Tensor::new(s.clone(), x[off..off + n].to_vec()).unwrap(),
                        true,
                    );
                    off += n;
                    l
                })
                .collect();
            let h = g.conv3d(v[0], v[1], v[2], 1, 0).unwrap();
            let h = g.relu(h).unwrap();
            let h = g.conv3d(h, v[3], v[4], 1, 0).unwrap();
            let h = g.sigmoid(h).unwrap();
            let y = g.masked_gap(h, &mask).unwrap();
            let (loss, d) = lpi_loss_and_grad(g.value(y).data[0], grade, &cfg).unwrap();
            g.backward(&[(y, Tensor::new(vec![1], vec![d]).unwrap())])
                .unwrap();
            let grad = v
                .iter()
                .flat_map(|&l| {
                    g.grad(l)
                        .map(|t| t.data.clone())
                        .unwrap_or(vec![0.0; g.value(l).len()])
                })
                .collect();
            (loss, grad)
        };
        note("chain", grad_check(f, &p, FD_EPS));
    }

    let max = worst.values().cloned().fold(0.0, f64::max);
    let listing: Vec<String> = worst.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    outcome(
        max < GRAD_TOL,
        format!(
            "max rel err {max:.2e} < {GRAD_TOL:e} [{}]",
            listing.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let cfg = LpiConfig {
        thresholds: ThresholdVector::scoring(),
        weights: vec![1.0; 5],
        alpha: 120.0,
        w_mila: 0.0,
    };
    let t = cfg.thresholds.values().to_vec();
    let margin = 2.0 / cfg.alpha;
    let grid: Vec<f64> = (0..=2000).map(|i| i as f64 / 2000.0).collect();
    let mut failures = Vec::new();
    let mut worst_flat = 0.0f64;
    let mut worst_flat_rel_min = 0.0f64;
    for y in 0..6u8 {
        let loss: Vec<f64> = grid
            .iter()
            .map(|&x| lpi_loss_and_grad(x, Grade(y), &cfg).unwrap().0)
            .collect();
        let (lo, hi) = (t[y as usize], t[y as usize + 1]);
        let top = y == 5;
        let inside = |x: f64| x >= lo && (x < hi || (top && x <= hi));
        let argmin = (0..grid.len())
            .min_by(|&a, &b| loss[a].total_cmp(&loss[b]))
            .unwrap();
        if !inside(grid[argmin]) {
            failures.push(format!(
                "grade {y}: argmin {} outside [{lo}, {hi})",
                grid[argmin]
            ));
        }
        let interval_min = (0..grid.len())
            .filter(|&i| inside(grid[i]))
            .map(|i| loss[i])
            .fold(f64::INFINITY, f64::min);
        let range = loss.iter().cloned().fold(f64::NEG_INFINITY, f64::max) - interval_min;
        let (c_lo, c_hi) = (lo + 0.2 * (hi - lo), hi - 0.2 * (hi - lo));
        for (i, &x) in grid.iter().enumerate() {
            if x >= c_lo && x <= c_hi {
                let excess = loss[i] - interval_min;
                worst_flat = worst_flat.max(excess / range);
                worst_flat_rel_min = worst_flat_rel_min.max(excess / interval_min);
            }
        }
        // monotone rise beyond each boundary the grade can violate
        for i in 1..grid.len() {
            if grid[i - 1] >= hi + margin && !top && loss[i] < loss[i - 1] {
                failures.push(format!("grade {y}: loss falls at {} above {hi}", grid[i]));
                break;
            }
        }
        for i in 1..grid.len() {
            if grid[i] <= lo - margin && y > 0 && loss[i] > loss[i - 1] {
                failures.push(format!("grade {y}: loss falls at {} below {lo}", grid[i]));
                break;
            }
        }
        let at = |x: f64| lpi_loss_and_grad(x, Grade(y), &cfg).unwrap().0;
        if !top && at(hi + margin) <= at(hi) {
            failures.push(format!("grade {y}: no rise across {hi}"));
        }
        if y > 0 && lo - margin >= 0.0 && at(lo - margin) <= at(lo) {
            failures.push(format!("grade {y}: no rise across {lo}"));
        }
    }
    if worst_flat > 0.01 {
        failures.push(format!("central excess {worst_flat:.3} of the loss range"));
    }
    let detail = format!(
        "argmin inside, central-60% excess ≤ {:.2e} of loss range ({:.2} of interval min), monotone beyond 2/α{}",
        worst_flat,
        worst_flat_rel_min,
        if failures.is_empty() {
            String::new()
        } else {
            format!("; {}", failures.join("; "))
        }
    );
    outcome(failures.is_empty(), detail)
}

// ---------------------------------------------------------------- 3

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let mut num = 0.0;
    let (mut np, mut nn) = (0usize, 0usize);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            np += 1;
        } else {
            nn += 1;
        }
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            num += match scores[i].partial_cmp(&scores[j]).unwrap() {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            };
        }
    }
    num / (np * nn) as f64
}

/// Two-way ANOVA mean squares, computed directly.
fn icc_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let k = 2.0;
    let grand = (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (n * k);
    let row_means: Vec<f64> = a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect();
    let col_means = [a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n];
    let ssr: f64 = row_means.iter().map(|m| k * (m - grand).powi(2)).sum();
    let ssc: f64 = col_means.iter().map(|m| n * (m - grand).powi(2)).sum();
    let sst: f64 = a.iter().chain(b).map(|x| (x - grand).powi(2)).sum();
    let sse = sst - ssr - ssc;
    let msr = ssr / (n - 1.0);
    let msc = ssc / (k - 1.0);
    let mse = sse / ((n - 1.0) * (k - 1.0));
    (msr - mse) / (msr + (k - 1.0) * mse + k * (msc - mse) / n)
}

fn conv_oracle(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: &Tensor<f64>,
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let (ci, d, h, wd) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (co, k) = (w.shape[0], w.shape[2]);
    let od = |n: usize| (n + 2 * pad - k) / stride + 1;
    let (a, bb, c) = (od(d), od(h), od(wd));
    let mut out = Vec::with_capacity(co * a * bb * c);
    for o in 0..co {
        for z in 0..a {
            for y in 0..bb {
                for xx in 0..c {
                    let mut s = b.data[o];
                    for i in 0..ci {
                        for kz in 0..k {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (pz, py, px) = (
                                        (z * stride + kz) as isize - pad as isize,
                                        (y * stride + ky) as isize - pad as isize,
                                        (xx * stride + kx) as isize - pad as isize,
                                    );
                                    if pz < 0
                                        || py < 0
                                        || px < 0
                                        || pz >= d as isize
                                        || py >= h as isize
                                        || px >= wd as isize
                                    {
                                        continue;
                                    }
                                    let xi = ((i * d + pz as usize) * h + py as usize) * wd
                                        + px as usize;
                                    let wi = (((o * ci + i) * k + kz) * k + ky) * k + kx;
                                    s += x.data[xi] * w.data[wi];
                                }
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut auc_mismatch = 0;
    for _ in 0..200 {
        let n = rng.gen_range(2..=50);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let levels = rng.gen_range(2..20);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        if auc(&scores, &labels).unwrap() != brute_auc(&scores, &labels) {
            auc_mismatch += 1;
        }
    }
    let mut icc_err = 0.0f64;
    for _ in 0..200 {
        let n = rng.gen_range(3..=50);
        let a: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + rng.gen_range(-0.2..0.3)).collect();
        icc_err = icc_err.max((icc(&a, &b).unwrap() - icc_oracle(&a, &b)).abs());
    }
    let mut conv_err = 0.0f64;
    for _ in 0..50 {
        let ci = rng.gen_range(1..=3);
        let co = rng.gen_range(1..=4);
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let dims: Vec<usize> = (0..3).map(|_| rng.gen_range(k..=8)).collect();
        let stride = rng.gen_range(1..=2);
        let pad = rng.gen_range(0..=k / 2);
        let x = Tensor::new(
            vec![ci, dims[0], dims[1], dims[2]],
            normal_vec(&mut rng, ci * dims.iter().product::<usize>(), 1.0),
        )
        .unwrap();
        let w = Tensor::new(
            vec![co, ci, k, k, k],
            normal_vec(&mut rng, co * ci * k * k * k, 1.0),
        )
        .unwrap();
        let b = Tensor::new(vec![co], normal_vec(&mut rng, co, 1.0)).unwrap();
        let fast = conv3d_forward(&x, &w, &b, stride, pad).unwrap();
        let slow = conv_oracle(&x, &w, &b, stride, pad);
        for (f, s) in fast.data.iter().zip(&slow) {
            conv_err = conv_err.max((f - s).abs() / s.abs().max(1.0));
        }
    }
    outcome(
        auc_mismatch == 0 && icc_err < 1e-10 && conv_err < 1e-5,
        format!("AUC mismatches {auc_mismatch}/200, ICC max err {icc_err:.1e}, conv max rel err {conv_err:.1e}"),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for trial in 0..100u64 {
        let shape = [
            rng.gen_range(12..=24),
            rng.gen_range(12..=24),
            rng.gen_range(12..=24),
        ];
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1000.0..0.0)).collect();
        let volume = Volume::new(shape, [1.0; 3], data).unwrap();
        let region = Mask::new(shape, (0..n).map(|_| rng.gen_bool(0.7) as u8).collect()).unwrap();
        let cfg = ModelConfig {
            init_seed: trial,
            head_bias_init: rng.gen_range(-3.0..3.0),
            ..ModelConfig::default()
        };
        let model = Model::<f32>::new(cfg).unwrap();
        let p = model.predict(&volume, &region).unwrap();
        let map = p.prob_map.as_ref().unwrap();
        let reg = p.aligned_region.as_ref().unwrap();
        let (s, c) = map
            .iter()
            .zip(&reg.data)
            .filter(|(_, &r)| r != 0)
            .fold((0.0f64, 0usize), |(s, c), (&v, _)| (s + v as f64, c + 1));
        worst = worst.max((s / c as f64 - p.y_hat).abs());
    }
    outcome(
        worst <= 1e-6,
        format!("max |ŷ − masked mean| {worst:.1e} over 100 trials"),
    )
}

// ---------------------------------------------------------------- 5-8

const SEEDS: [u64; 3] = [0, 1, 2];

struct Experiments {
    test: Vec<LabeledSample>,
    /// `(config name, seed) -> (report, scored test samples)`.
    runs: BTreeMap<(&'static str, u64), (EvalReport, Vec<ScoredSample>)>,
}

fn experiment_configs() -> Vec<(&'static str, TrainConfig)> {
    let base = TrainConfig::default();
    let mut gap = base.clone();
    gap.model.head = llpq::models::HeadKind::Gap;
    let rms = base.rms_baseline();
    vec![("proportion_lpi", base), ("gap_lpi", gap), ("gap_rms", rms)]
}

fn eval_map() -> GradeIntervalMap {
    GradeIntervalMap::new(ThresholdVector::scoring())
}

fn run_experiments() -> Experiments {
    let spec = CohortSpec {
        n_samples: 700,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(&spec).expect("cohort");
    let grades: Vec<Grade> = cohort.iter().map(|s| s.grade_rater1).collect();
    let parts = stratified_split(&grades, &[400, 100, 200], 0).expect("split");
    let pick = |idx: &[usize]| idx.iter().map(|&i| cohort[i].clone()).collect::<Vec<_>>();
    let (train_set, val_set, test) = (pick(&parts[0]), pick(&parts[1]), pick(&parts[2]));

    let mut runs = BTreeMap::new();
    for (name, base) in experiment_configs() {
        for seed in SEEDS {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.model.init_seed = seed;
            let dir = tmp_root().join(format!("{name}_seed{seed}"));
            let t0 = Instant::now();
            let out = train(
                &cfg,
                &train_set,
                &val_set,
                Some(&dir),
                &TrainControl {
                    resume: true,
                    ..TrainControl::default()
                },
            )
            .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
            assert!(out.completed);
            let scorer = Scorer::Model {
                model: out.model,
                mapping: OutputMapping::for_config(&cfg),
            };
            let scored = score_samples(&scorer, &test, &ScoreOptions::default()).expect("scoring");
            let inputs: Vec<EvalInput> = scored.iter().map(|s| s.input.clone()).collect();
            let report = evaluate(&inputs, &eval_map(), 0, 0);
            eprintln!(
                "  {name} seed {seed}: presence {:?} extent {:?} ({:.0}s)",
                report.presence_auc,
                report.extent_auc,
                t0.elapsed().as_secs_f64()
            );
            runs.insert((name, seed), (report, scored));
        }
    }
    Experiments { test, runs }
}

impl Experiments {
    /// Mean over seeds; a missing metric makes the mean NaN.
    fn mean(&self, name: &'static str, f: impl Fn(&EvalReport) -> Option<f64>) -> f64 {
        let v: Vec<f64> = SEEDS
            .iter()
            .map(|s| f(&self.runs[&(name, *s)].0).unwrap_or(f64::NAN))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn criterion_5(x: &Experiments) -> Outcome {
    let p_pres = x.mean("proportion_lpi", |r| r.presence_auc);
    let p_ext = x.mean("proportion_lpi", |r| r.extent_auc);
    let g_ext = x.mean("gap_lpi", |r| r.extent_auc);
    let r_ext = x.mean("gap_rms", |r| r.extent_auc);
    let pass = p_pres >= 0.95 && p_ext >= 0.85 && p_ext - g_ext >= 0.03 && g_ext - r_ext >= 0.03;
    outcome(
        pass,
        format!(
            "ProportionNet presence {p_pres:.4} (≥0.95) extent {p_ext:.4} (≥0.85); GAPNet extent {g_ext:.4} (gap {:+.4}, need ≥0.03); GAPNet+RMS extent {r_ext:.4} (gap {:+.4}, need ≥0.03)",
            p_ext - g_ext,
            g_ext - r_ext
        ),
    )
}

fn criterion_6(x: &Experiments) -> Outcome {
    let per: Vec<f64> = SEEDS
        .iter()
        .map(|s| mean_dice(&x.runs[&("proportion_lpi", *s)].1, 2).unwrap_or(0.0))
        .collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    outcome(
        mean >= 0.5,
        format!("mean Dice {mean:.4} (≥0.5) per seed {per:.3?}"),
    )
}

fn criterion_7(x: &Experiments) -> Outcome {
    let opts = ScoreOptions::default();
    let per: Vec<f64> = SEEDS
        .iter()
        .map(|s| {
            pattern_report(&x.runs[&("proportion_lpi", *s)].1, &opts)
                .map(|r| r.auc)
                .unwrap_or(f64::NAN)
        })
        .collect();
    let model_auc = per.iter().sum::<f64>() / per.len() as f64;
    let truth_opts = ScoreOptions {
        pattern_source: PatternSource::LesionMask,
        ..ScoreOptions::default()
    };
    let oracle = Scorer::TruthOracle {
        thresholds: ThresholdVector::scoring(),
    };
    let truth_scored = score_samples(&oracle, &x.test, &truth_opts).expect("scoring");
    let truth_auc = pattern_report(&truth_scored, &truth_opts)
        .map(|r| r.auc)
        .unwrap_or(f64::NAN);
    outcome(
        model_auc >= 0.85 && truth_auc >= 0.95,
        format!("segmentation AUC {model_auc:.4} (≥0.85) per seed {per:.3?}; planted masks AUC {truth_auc:.4} (≥0.95)"),
    )
}

fn criterion_8(x: &Experiments) -> Outcome {
    let spec = CohortSpec {
        n_samples: 700,
        ..CohortSpec::default()
    };
    let cohort = generate_cohort(&spec).expect("cohort");
    let worst = cohort
        .iter()
        .map(|s| {
            let laa = llpq::evalmetrics::densitometry_laa950(
                &s.volume,
                &s.region,
                llpq::evalmetrics::LAA_THRESHOLD_HU,
            )
            .unwrap();
            (laa - s.true_proportion.unwrap()).abs()
        })
        .fold(0.0f64, f64::max);
    let dens = x.runs[&("proportion_lpi", 0)]
        .0
        .densitometry_auc
        .unwrap_or(f64::NAN);
    let model = x.mean("proportion_lpi", |r| r.presence_auc_max_rater);
    outcome(
        worst <= 0.005 && dens <= model,
        format!("max |LAA%-950 − p| {worst:.2e} (≤0.005, 700 samples); test presence AUC densitometry {dens:.4} ≤ ProportionNet {model:.4}"),
    )
}

// ---------------------------------------------------------------- 9

fn tree_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn criterion_9() -> Outcome {
    let root = tmp_root().join("determinism");
    let _ = fs::remove_dir_all(&root);
    let spec = CohortSpec {
        n_samples: 40,
        grid_shape: [24, 24, 24],
        grade_distribution: vec![0.3, 0.3, 0.1, 0.1, 0.1, 0.1],
        seed: 9,
        ..CohortSpec::default()
    };
    let checksums: Vec<String> = ["a", "b"]
        .iter()
        .map(|tag| {
            let dir = root.join(format!("cohort_{tag}"));
            let samples = generate_cohort(&spec).unwrap();
            write_cohort(&dir, &spec, &samples).unwrap();
            cohort_checksum(&dir).unwrap()
        })
        .collect();
    let cohort = generate_cohort(&spec).unwrap();
    let (tr, va) = cohort.split_at(30);

    let mut cfg = TrainConfig::default();
    cfg.iters_per_epoch = 3;
    cfg.phases.iter_mut().for_each(|p| p.epochs = 2);
    let run = |name: &str, stops: &[Option<usize>]| {
        let dir = root.join(name);
        for (i, &stop) in stops.iter().enumerate() {
            let ctl = TrainControl {
                resume: i > 0,
                stop_after_epochs: stop,
                verbose: false,
            };
            train(&cfg, tr, va, Some(&dir), &ctl).unwrap();
        }
        let mut t = tree_bytes(&dir);
        t.retain(|k, _| k == "metrics.csv" || k.starts_with("checkpoint"));
        t
    };
    let a = run("run_a", &[None]);
    let b = run("run_b", &[None]);
    let resumed = run("run_resumed", &[Some(1), Some(2), None]);
    let cohort_ok = checksums[0] == checksums[1];
    let repeat_ok = a == b && !a.is_empty();
    let resume_ok = a == resumed;
    outcome(
        cohort_ok && repeat_ok && resume_ok,
        format!(
            "cohort checksums equal: {cohort_ok}; repeated run bit-identical ({} files): {repeat_ok}; resumed run bit-identical: {resume_ok}",
            a.len()
        ),
    )
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let grades: Vec<Grade> = (0..120).map(|i| Grade((i % 6) as u8)).collect();
    let strata = Strata::new(&grades, 6).unwrap();
    let mut counts = [0usize; 6];
    let mut bad = 0;
    let n = 10_000;
    for _ in 0..n {
        let b = sample_batch(&strata, 3, &mut rng);
        let g: Vec<u8> = b.iter().map(|&i| grades[i].0).collect();
        if g.len() != 3 || g[0] != 0 || g[1] != 1 || g[2] < 2 {
            bad += 1;
        }
        counts[g[2] as usize] += 1;
    }
    let freqs: Vec<f64> = counts[2..].iter().map(|&c| c as f64 / n as f64).collect();
    let ok = bad == 0 && freqs.iter().all(|f| (f - 0.25).abs() <= 0.02);
    outcome(
        ok,
        format!("{bad} malformed batches; third-slot frequencies {freqs:.4?} (0.25 ± 0.02)"),
    )
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(o) => o,
        Err(e) => {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        }
    }
}

fn main() {
    let quick = std::env::var("LLPQ_ACCEPTANCE_QUICK").is_ok_and(|v| v == "1");
    let strict = std::env::var("LLPQ_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let mut results: Vec<(usize, &str, Option<Outcome>, f64)> = Vec::new();
    let mut record = |id: usize, name: &'static str, f: &mut dyn FnMut() -> Option<Outcome>| {
        let t0 = Instant::now();
        let o = f();
        let secs = t0.elapsed().as_secs_f64();
        let (tag, detail) = match &o {
            Some(o) if o.pass => ("PASS", o.detail.as_str()),
            Some(o) => ("FAIL", o.detail.as_str()),
            None => ("SKIP", "LLPQ_ACCEPTANCE_QUICK=1"),
        };
        println!("[{tag}] {id:>2} {name}: {detail} ({secs:.1}s)");
        results.push((id, name, o, secs));
    };

    record(1, "gradient fidelity", &mut || Some(guarded(criterion_1)));
    record(2, "loss geometry", &mut || Some(guarded(criterion_2)));
    record(3, "oracle equivalence", &mut || Some(guarded(criterion_3)));
    record(4, "architecture identity", &mut || {
        Some(guarded(criterion_4))
    });

    let experiments = if quick {
        None
    } else {
        match catch_unwind(run_experiments) {
            Ok(x) => Some(Ok(x)),
            Err(e) => Some(Err(e
                .downcast_ref::<String>()
                .cloned()
                .unwrap_or_else(|| "experiment panicked".into()))),
        }
    };
    let exp = |f: fn(&Experiments) -> Outcome| match &experiments {
        None => None,
        Some(Ok(x)) => Some(guarded(|| f(x))),
        Some(Err(msg)) => Some(outcome(false, format!("experiments failed: {msg}"))),
    };
    record(5, "end-to-end ordering", &mut || exp(criterion_5));
    record(6, "segmentation from proportions", &mut || exp(criterion_6));
    record(7, "pattern classification", &mut || exp(criterion_7));
    record(8, "densitometry sanity", &mut || exp(criterion_8));
    record(9, "determinism", &mut || Some(guarded(criterion_9)));
    record(10, "batch sampler composition", &mut || {
        Some(guarded(criterion_10))
    });

    let passed = results
        .iter()
        .filter(|r| r.2.as_ref().is_some_and(|o| o.pass))
        .count();
    let failed = results
        .iter()
        .filter(|r| r.2.as_ref().is_some_and(|o| !o.pass))
        .count();
    println!(
        "acceptance: {passed} passed, {failed} failed, {} skipped",
        results.len() - passed - failed
    );
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
