//! Property tests for the cross-module invariants.

use llpq::evalmetrics::{
    auc, boundary_ratio, densitometry_laa950, grade_from_proportion, icc, GradeIntervalMap,
    LAA_THRESHOLD_HU,
};
use llpq::losses::{
    lpi_loss, lpi_loss_and_grad, lpi_terms, mila_loss, Grade, LpiConfig, ThresholdVector,
};
use llpq::models::{BackboneConfig, HeadKind, LayerSpec, Model, ModelConfig, ModelError};
use llpq::nncore::{conv3d_forward, Graph, Tensor};
use llpq::synthcohort::{generate_indexed, CohortSpec};
use llpq::trainer::{sample_batch, Strata};
use llpq::volumes::{
    augment, load_sample, preprocess_sample, save_sample, AugmentConfig, LabeledSample, Mask,
    Pattern, PreprocessOptions, Shape3, Volume,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn shape_strategy(max: usize) -> impl Strategy<Value = Shape3> {
    (1..=max, 1..=max, 1..=max).prop_map(|(a, b, c)| [a, b, c])
}

/// Volume and nonempty region on a shared grid.
fn volume_and_region(max: usize) -> impl Strategy<Value = (Volume, Mask)> {
    shape_strategy(max).prop_flat_map(|shape| {
        let n = shape.iter().product::<usize>();
        (
            prop::collection::vec(-1100.0f32..200.0, n),
            prop::collection::vec(any::<bool>(), n),
            0..n,
        )
            .prop_map(move |(data, bits, forced)| {
                let mut region: Vec<u8> = bits.into_iter().map(u8::from).collect();
                region[forced] = 1;
                (
                    Volume::new(shape, [1.0, 0.8, 0.8], data).unwrap(),
                    Mask::new(shape, region).unwrap(),
                )
            })
    })
}

/// Like [`volume_and_region`] on a grid of at least `min` per axis, with
/// opposite corners in the region so the crop keeps the whole grid.
fn spanning(min: usize, max: usize) -> impl Strategy<Value = (Volume, Mask)> {
    (volume_and_region(max - min + 1), Just(min - 1)).prop_map(|((v, r), extra)| {
        let shape = [v.shape[0] + extra, v.shape[1] + extra, v.shape[2] + extra];
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|i| v.data[i % v.data.len()]).collect();
        let mut region: Vec<u8> = (0..n).map(|i| r.data[i % r.data.len()]).collect();
        region[0] = 1;
        region[n - 1] = 1;
        (
            Volume::new(shape, v.spacing, data).unwrap(),
            Mask::new(shape, region).unwrap(),
        )
    })
}

fn labeled(
    (volume, region): (Volume, Mask),
    lesion_bits: Vec<bool>,
    g1: u8,
    g2: u8,
) -> LabeledSample {
    let lesion_data: Vec<u8> = region
        .data
        .iter()
        .zip(&lesion_bits)
        .map(|(&r, &l)| u8::from(r != 0 && l))
        .collect();
    let lesion = Mask::new(region.shape, lesion_data).unwrap();
    let p = lesion.count() as f64 / region.count() as f64;
    LabeledSample {
        id: "s".into(),
        volume,
        region,
        grade_rater1: Grade(g1),
        grade_rater2: Grade(g2),
        true_proportion: Some(p),
        lesion: Some(lesion),
        pattern: Some(Pattern::None),
    }
}

fn sample_strategy(max: usize) -> impl Strategy<Value = LabeledSample> {
    volume_and_region(max).prop_flat_map(|vr| {
        let n = vr.0.data.len();
        (
            Just(vr),
            prop::collection::vec(any::<bool>(), n),
            0u8..6,
            0u8..6,
        )
            .prop_map(|(vr, bits, g1, g2)| labeled(vr, bits, g1, g2))
    })
}

fn flip_axis<T: Copy>(data: &[T], shape: Shape3, axis: usize) -> Vec<T> {
    let mut out = data.to_vec();
    for z in 0..shape[0] {
        for y in 0..shape[1] {
            for x in 0..shape[2] {
                let mut c = [z, y, x];
                c[axis] = shape[axis] - 1 - c[axis];
                out[(c[0] * shape[1] + c[1]) * shape[2] + c[2]] =
                    data[(z * shape[1] + y) * shape[2] + x];
            }
        }
    }
    out
}

fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                num += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / pairs
}

fn icc_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let grand = (a.iter().sum::<f64>() + b.iter().sum::<f64>()) / (2.0 * n);
    let ssr: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| 2.0 * ((x + y) / 2.0 - grand).powi(2))
        .sum();
    let ssc: f64 = [a, b]
        .iter()
        .map(|c| n * (c.iter().sum::<f64>() / n - grand).powi(2))
        .sum();
    let sst: f64 = a.iter().chain(b).map(|x| (x - grand).powi(2)).sum();
    let (msr, msc, mse) = (ssr / (n - 1.0), ssc, (sst - ssr - ssc) / (n - 1.0));
    (msr - mse) / (msr + mse + 2.0 * (msc - mse) / n)
}

fn lpi_config() -> impl Strategy<Value = LpiConfig> {
    (prop::collection::vec(0.001f64..2.0, 5), 10.0f64..200.0).prop_map(|(weights, alpha)| {
        LpiConfig {
            thresholds: ThresholdVector::training(),
            weights,
            alpha,
            w_mila: 0.5,
        }
    })
}

fn small_model(head: HeadKind, seed: u64, bias: f64) -> Model<f32> {
    Model::new(ModelConfig {
        backbone: BackboneConfig {
            in_channels: 1,
            layers: vec![
                LayerSpec::Conv {
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                },
                LayerSpec::Residual {
                    channels: 3,
                    kernel: 3,
                },
            ],
        },
        head,
        init_seed: seed,
        head_bias_init: bias,
        ..ModelConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn preprocess_is_idempotent(s in sample_strategy(7), margin in 0usize..3) {
        let opts = PreprocessOptions { margin, ..PreprocessOptions::default() };
        let (once, _) = preprocess_sample(&s, opts).unwrap();
        let (twice, _) = preprocess_sample(&once, opts).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn augment_preserves_region_intensities(s in sample_strategy(8), seed in any::<u64>(), shift in 0usize..3) {
        let cfg = AugmentConfig { max_shift_vox: shift, ..AugmentConfig::default() };
        let a = augment(&s, seed, &cfg);
        let in_region = |x: &LabeledSample| {
            let mut v: Vec<u32> = x
                .volume
                .data
                .iter()
                .zip(&x.region.data)
                .filter(|(_, &r)| r != 0)
                .map(|(&v, _)| v.to_bits())
                .collect();
            v.sort_unstable();
            v
        };
        prop_assert_eq!(in_region(&s), in_region(&a));
        prop_assert_eq!(a.true_proportion, s.true_proportion);
        prop_assert_eq!(a.lesion_proportion(), s.lesion_proportion());
    }

    #[test]
    fn sample_io_round_trip(s in sample_strategy(6)) {
        let dir = tempfile::tempdir().unwrap();
        save_sample(dir.path(), &s).unwrap();
        prop_assert_eq!(load_sample(dir.path()).unwrap(), s);
    }

    #[test]
    fn masked_gap_with_full_mask_is_gap(c in 1usize..4, shape in shape_strategy(5), seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = c * shape.iter().product::<usize>();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let x = g.leaf(Tensor::new(vec![c, shape[0], shape[1], shape[2]], data).unwrap(), false);
        let full = vec![1u8; n / c];
        let a = g.gap(x).unwrap();
        let b = g.masked_gap(x, &full).unwrap();
        prop_assert_eq!(&g.value(a).data, &g.value(b).data);
    }

    #[test]
    fn conv_matches_loop(
        ci in 1usize..=4, co in 1usize..=4, k in prop::sample::select(vec![1usize, 2, 3]),
        shape in shape_strategy(8), stride in 1usize..=2, seed in any::<u64>()
    ) {
        use rand::Rng;
        prop_assume!(shape.iter().all(|&d| d >= k));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut vals = |n: usize| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let x = Tensor::new(vec![ci, shape[0], shape[1], shape[2]], vals(ci * shape.iter().product::<usize>())).unwrap();
        let w = Tensor::new(vec![co, ci, k, k, k], vals(co * ci * k * k * k)).unwrap();
        let b = Tensor::new(vec![co], vals(co)).unwrap();
        let y = conv3d_forward(&x, &w, &b, stride, 0).unwrap();
        let od: Vec<usize> = shape.iter().map(|&d| (d - k) / stride + 1).collect();
        prop_assert_eq!(&y.shape, &vec![co, od[0], od[1], od[2]]);
        let mut i = 0;
        for o in 0..co {
            for z in 0..od[0] {
                for yy in 0..od[1] {
                    for xx in 0..od[2] {
                        let mut s = b.data[o];
                        for c in 0..ci {
                            for a in 0..k {
                                for bb in 0..k {
                                    for cc in 0..k {
                                        let xi = ((c * shape[0] + z * stride + a) * shape[1] + yy * stride + bb) * shape[2] + xx * stride + cc;
                                        s += x.data[xi] * w.data[(((o * ci + c) * k + a) * k + bb) * k + cc];
                                    }
                                }
                            }
                        }
                        prop_assert!((y.data[i] - s).abs() <= 1e-5 * s.abs().max(1.0));
                        i += 1;
                    }
                }
            }
        }
    }

    #[test]
    fn lpi_monotone_at_extreme_grades(cfg in lpi_config()) {
        let grid: Vec<f64> = (0..=2000).map(|i| i as f64 / 2000.0).collect();
        let top = Grade(5);
        for w in grid.windows(2) {
            prop_assert!(lpi_loss(w[1], top, &cfg).unwrap() <= lpi_loss(w[0], top, &cfg).unwrap());
            prop_assert!(lpi_loss(w[1], Grade(0), &cfg).unwrap() >= lpi_loss(w[0], Grade(0), &cfg).unwrap());
        }
    }

    #[test]
    fn lpi2_is_first_lpi6_term(cfg in lpi_config(), y_hat in 0.0f64..1.0, g in 0u8..6) {
        let two = cfg.presence_only();
        let first = lpi_terms(y_hat, Grade(g), &cfg).unwrap()[0];
        prop_assert_eq!(lpi_loss_and_grad(y_hat, Grade(g).presence(), &two).unwrap(), first);
    }

    #[test]
    fn lpi_gradient_matches_finite_differences(cfg in lpi_config(), y_hat in 0.0f64..1.0, g in 0u8..6) {
        // away from thresholds and from the kinks where the probability clamp engages
        let clamp_edge = ((1.0 - 1e-7) / 1e-7f64).ln() / cfg.alpha;
        let t = cfg.thresholds.values();
        for &c in &t[1..t.len() - 1] {
            prop_assume!((y_hat - c).abs() >= 1e-3);
            prop_assume!((y_hat - c - clamp_edge).abs() >= 1e-4 && (y_hat - c + clamp_edge).abs() >= 1e-4);
        }
        let h = 1e-6;
        let f = |x: f64| lpi_loss(x, Grade(g), &cfg).unwrap();
        let numeric = (f(y_hat + h) - f(y_hat - h)) / (2.0 * h);
        let (_, analytic) = lpi_loss_and_grad(y_hat, Grade(g), &cfg).unwrap();
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
        prop_assert!(rel < 1e-4, "analytic {analytic} numeric {numeric}");
    }

    #[test]
    fn mila_vanishes_for_positive_bags(
        probs in prop::collection::vec(0.0f64..1.0, 1..40), g in 1u8..6
    ) {
        let region = vec![1u8; probs.len()];
        let (v, grad) = mila_loss(&probs, &region, Grade(g), &LpiConfig::default()).unwrap();
        prop_assert_eq!(v, 0.0);
        prop_assert!(grad.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn threshold_vectors_must_be_strict(v in prop::collection::vec(-0.5f64..1.5, 2..8)) {
        let valid = v[0] == 0.0 && v[v.len() - 1] == 1.0 && v.windows(2).all(|w| w[0] < w[1]);
        prop_assert_eq!(ThresholdVector::new(v).is_ok(), valid);
    }

    #[test]
    fn auc_matches_pair_counting(
        pairs in prop::collection::vec((0u8..8, any::<bool>()), 2..=50)
    ) {
        let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
        let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let a = auc(&scores, &labels).unwrap();
        prop_assert_eq!(a, brute_auc(&scores, &labels));
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn icc_matches_mean_squares(ab in prop::collection::vec((0.0f64..1.0, -0.3f64..0.3), 3..=50)) {
        let a: Vec<f64> = ab.iter().map(|p| p.0).collect();
        let b: Vec<f64> = ab.iter().map(|p| p.0 + p.1).collect();
        prop_assert!((icc(&a, &b).unwrap() - icc_oracle(&a, &b)).abs() < 1e-10);
    }

    #[test]
    fn boundary_ratio_is_flip_invariant((v, region) in volume_and_region(8), axis in 0usize..3, margin in 1.0f64..3.0) {
        let fg: Vec<f64> = v.data.iter().map(|&x| ((x + 1100.0) / 1300.0) as f64).collect();
        let r = boundary_ratio(&fg, &region, margin).unwrap();
        let ff = flip_axis(&fg, region.shape, axis);
        let fr = Mask::new(region.shape, flip_axis(&region.data, region.shape, axis)).unwrap();
        let rf = boundary_ratio(&ff, &fr, margin).unwrap();
        prop_assert!((r - rf).abs() <= 1e-12 * r.abs().max(1.0), "{r} vs {rf}");
    }

    #[test]
    fn sampler_batches_are_triplets(
        grades in prop::collection::vec(0u8..6, 3..60), batch in 1usize..5, seed in any::<u64>()
    ) {
        let mut grades = grades;
        grades[0] = 0;
        grades[1] = 1;
        grades[2] = grades[2].max(2);
        let grades: Vec<Grade> = grades.into_iter().map(Grade).collect();
        let strata = Strata::new(&grades, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = sample_batch(&strata, 3 * batch, &mut rng);
        prop_assert_eq!(b.len(), 3 * batch);
        for t in b.chunks(3) {
            prop_assert_eq!(grades[t[0]].0, 0);
            prop_assert_eq!(grades[t[1]].0, 1);
            prop_assert!(grades[t[2]].0 >= 2);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generator_contract(seed in any::<u64>(), index in 0usize..1000) {
        let spec = CohortSpec { grid_shape: [20, 20, 20], seed, ..CohortSpec::default() };
        let s = generate_indexed(&spec, index).unwrap();
        let p = s.true_proportion.unwrap();
        let laa = densitometry_laa950(&s.volume, &s.region, LAA_THRESHOLD_HU).unwrap();
        prop_assert!((laa - p).abs() <= 0.005);
        prop_assert_eq!(grade_from_proportion(p, &spec.thresholds), s.grade_rater1);
        prop_assert!((s.lesion_proportion().unwrap() - p).abs() <= 1e-6);
    }

    #[test]
    fn sigmoid_heads_lie_in_unit_interval(
        (v, region) in spanning(6, 12), seed in any::<u64>(), bias in -6.0f64..6.0,
        head in prop::sample::select(vec![HeadKind::Proportion, HeadKind::Gap, HeadKind::Mgap])
    ) {
        let model = small_model(head, seed, bias);
        // A sparse region may leave no feature cell majority-covered.
        let p = match model.predict(&v, &region) {
            Err(ModelError::RegionLost) => return Err(TestCaseError::reject("region lost")),
            r => r.unwrap(),
        };
        prop_assert!(p.y_hat > 0.0 && p.y_hat < 1.0, "{}", p.y_hat);
        let again = model.predict(&v, &region).unwrap();
        prop_assert_eq!(p.y_hat.to_bits(), again.y_hat.to_bits());
    }

    #[test]
    fn pointwise_proportion_net_commutes_with_flips(
        (v, region) in volume_and_region(10), seed in any::<u64>(), axis in 0usize..3
    ) {
        let model = Model::<f32>::new(ModelConfig {
            backbone: BackboneConfig {
                in_channels: 1,
                layers: vec![LayerSpec::Conv { out_channels: 4, kernel: 1, stride: 1 }],
            },
            head: HeadKind::Proportion,
            init_seed: seed,
            head_bias_init: 0.0,
            ..ModelConfig::default()
        })
        .unwrap();
        let masked_mean = |map: &[f32], reg: &Mask| {
            let (s, n) = map.iter().zip(&reg.data).filter(|(_, &r)| r != 0).fold((0.0f64, 0usize), |(s, n), (&m, _)| (s + m as f64, n + 1));
            s / n as f64
        };
        let p = model.predict(&v, &region).unwrap();
        let fv = Volume::new(v.shape, v.spacing, flip_axis(&v.data, v.shape, axis)).unwrap();
        let fr = Mask::new(region.shape, flip_axis(&region.data, region.shape, axis)).unwrap();
        let q = model.predict(&fv, &fr).unwrap();
        let g = q.geometry.output_shape;
        let back = flip_axis(q.prob_map.as_ref().unwrap(), g, axis);
        let back_region = Mask::new(g, flip_axis(&q.aligned_region.as_ref().unwrap().data, g, axis)).unwrap();
        let a = masked_mean(p.prob_map.as_ref().unwrap(), p.aligned_region.as_ref().unwrap());
        let b = masked_mean(&back, &back_region);
        prop_assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        prop_assert!((p.y_hat - q.y_hat).abs() <= 1e-6);
    }
}

#[test]
fn midpoints_fall_in_their_own_interval() {
    for t in [ThresholdVector::scoring(), ThresholdVector::training()] {
        let map = GradeIntervalMap::new(t.clone());
        for g in 1..t.ncat() as u8 {
            assert_eq!(
                grade_from_proportion(map.midpoints[g as usize], &t),
                Grade(g)
            );
        }
        assert_eq!(map.midpoints[0], 0.0);
    }
}
