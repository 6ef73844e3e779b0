use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use super::scoring::{mean_dice, score_samples, PatternSource, ScoreOptions, ScoredSample, Scorer};
use super::{
    read_config, usage, write_json, EvalArgs, GenerateArgs, PatternArgs, RunManifest, SegmentArgs,
    TrainArgs,
};
use crate::evalmetrics::{
    evaluate, pattern_auc, roc_points, EvalInput, GradeIntervalMap, MetricError, RATIO_CAP,
};
use crate::losses::{Grade, ThresholdVector};
use crate::models::load_checkpoint;
use crate::synthcohort::{generate_cohort, load_cohort, write_cohort, CohortError, CohortSpec};
use crate::trainer::{
    predict, stratified_split, train, OutputMapping, TrainConfig, TrainControl, TrainError,
};
use crate::volumes::{load_sample, LabeledSample, Pattern};

pub const SPLIT_FILE: &str = "split.json";
const RUN_CONFIG_FILE: &str = "run_config.json";

fn cohort_err(e: CohortError) -> anyhow::Error {
    match e {
        CohortError::InvalidSpec(_) | CohortError::CannotPlace { .. } => usage(e.to_string()),
        other => other.into(),
    }
}

fn train_err(e: TrainError) -> anyhow::Error {
    match e {
        TrainError::InvalidConfig(_) | TrainError::MissingStrata(_) => usage(e.to_string()),
        other => other.into(),
    }
}

fn load_cohort_dir(dir: &Path) -> Result<Vec<LabeledSample>> {
    load_cohort(dir).map_err(|e| usage(format!("cannot load cohort {}: {e}", dir.display())))
}

pub fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let t0 = Instant::now();
    let mut spec: CohortSpec = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    spec.validate().map_err(cohort_err)?;
    let samples = generate_cohort(&spec).map_err(cohort_err)?;
    let manifest = write_cohort(&a.out, &spec, &samples).map_err(cohort_err)?;

    let mut run = RunManifest::new("generate", serde_json::to_value(&spec)?);
    run.seeds.insert("cohort".into(), spec.seed);
    run.artifacts = vec![
        crate::synthcohort::MANIFEST_FILE.into(),
        crate::synthcohort::LABELS_FILE.into(),
    ];
    run.artifacts.extend(manifest.ids.iter().cloned());
    run.timings_s
        .insert("total".into(), t0.elapsed().as_secs_f64());
    run.write(&a.out)?;
    println!(
        "wrote {} samples to {} (cohort checksum {})",
        samples.len(),
        a.out.display(),
        manifest.cohort_checksum
    );
    Ok(())
}

/// Fractions of the cohort held out for validation and test; the rest
/// trains. Parts are stratified by first-rater grade.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSpec {
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            val_fraction: 0.2,
            test_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SplitSpec {
    /// `[train, val, test]` sample counts for a cohort of `n`.
    pub fn sizes(&self, n: usize) -> Result<[usize; 3]> {
        let ok = |f: f64| (0.0..1.0).contains(&f);
        if !ok(self.val_fraction)
            || !ok(self.test_fraction)
            || self.val_fraction + self.test_fraction >= 1.0
        {
            return Err(usage(format!(
                "split fractions val {} and test {} must be in [0, 1) with a nonempty training part",
                self.val_fraction, self.test_fraction
            )));
        }
        let val = (n as f64 * self.val_fraction).round() as usize;
        let test = (n as f64 * self.test_fraction).round() as usize;
        Ok([n.saturating_sub(val + test), val, test])
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub trainer: TrainConfig,
    pub split: SplitSpec,
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let t0 = Instant::now();
    let (out, resume): (&Path, bool) = match (&a.out, &a.resume) {
        (Some(o), Some(r)) if o != r => {
            return Err(usage("--out and --resume name different directories"))
        }
        (_, Some(r)) => (r, true),
        (Some(o), None) => (o, false),
        (None, None) => return Err(usage("--out is required")),
    };
    let mut cfg: TrainRunConfig = match (&a.config, resume) {
        (None, true) => read_config(Some(&out.join(RUN_CONFIG_FILE)))?,
        (c, _) => read_config(c.as_deref())?,
    };
    if let Some(s) = a.seed {
        cfg.trainer.seed = s;
        cfg.trainer.model.init_seed = s;
    }
    if let Some(e) = a.epochs {
        cfg.trainer.phases.iter_mut().for_each(|p| p.epochs = e);
    }
    cfg.trainer.validate().map_err(train_err)?;

    let cohort = load_cohort_dir(&a.cohort)?;
    let sizes = cfg.split.sizes(cohort.len())?;
    let grades: Vec<Grade> = cohort.iter().map(|s| s.grade_rater1).collect();
    let parts = stratified_split(&grades, &sizes, cfg.split.seed).map_err(train_err)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| cohort[i].clone()).collect::<Vec<_>>();
    let (train_set, val_set) = (pick(&parts[0]), pick(&parts[1]));

    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let ids = |idx: &[usize]| {
        idx.iter()
            .map(|&i| cohort[i].id.clone())
            .collect::<Vec<_>>()
    };
    let split: BTreeMap<&str, Vec<String>> = BTreeMap::from([
        ("train", ids(&parts[0])),
        ("val", ids(&parts[1])),
        ("test", ids(&parts[2])),
    ]);
    write_json(&out.join(SPLIT_FILE), &split)?;
    write_json(&out.join(RUN_CONFIG_FILE), &cfg)?;

    let ctl = TrainControl {
        resume,
        stop_after_epochs: a.stop_after_epochs,
        verbose: !a.quiet,
    };
    let outcome = train(&cfg.trainer, &train_set, &val_set, Some(out), &ctl).map_err(train_err)?;

    let mut run = RunManifest::new("train", serde_json::to_value(&cfg)?);
    run.seeds.insert("trainer".into(), cfg.trainer.seed);
    run.seeds.insert("init".into(), cfg.trainer.model.init_seed);
    run.seeds.insert("split".into(), cfg.split.seed);
    run.artifacts = [
        "config.resolved.json",
        "metrics.csv",
        "checkpoint",
        "state",
        SPLIT_FILE,
        RUN_CONFIG_FILE,
    ]
    .map(String::from)
    .to_vec();
    run.timings_s
        .insert("total".into(), t0.elapsed().as_secs_f64());
    run.write(out)?;
    println!(
        "{} after {} epochs; checkpoint in {}",
        if outcome.completed {
            "finished"
        } else {
            "stopped"
        },
        outcome.history.len(),
        out.join("checkpoint").display()
    );
    Ok(())
}

/// Grade mapping stored with a checkpoint, or the default for its output.
fn mapping_from(training: &serde_json::Value, linear_output: bool) -> OutputMapping {
    training
        .get("output_mapping")
        .and_then(|v| serde_json::from_value(v.clone()).ok())
        .unwrap_or(if linear_output {
            OutputMapping::Score { ncat: 6 }
        } else {
            OutputMapping::Proportion {
                thresholds: ThresholdVector::training(),
            }
        })
}

pub fn load_scorer(checkpoint: &Path) -> Result<Scorer> {
    let ck =
        load_checkpoint(checkpoint).map_err(|e| usage(format!("cannot load checkpoint: {e}")))?;
    let mapping = mapping_from(&ck.training, ck.model.config.linear_output);
    Ok(Scorer::Model {
        model: ck.model,
        mapping,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub scoring: ScoreOptions,
    /// Scoring-system intervals: label midpoints and oracle grades.
    pub grade_thresholds: ThresholdVector,
    pub bootstrap_resamples: usize,
    pub seed: u64,
    /// Restrict to one part of a training run's `split.json`.
    pub split_file: Option<PathBuf>,
    pub split_part: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            scoring: ScoreOptions::default(),
            grade_thresholds: ThresholdVector::scoring(),
            bootstrap_resamples: 1000,
            seed: 0,
            split_file: None,
            split_part: "test".into(),
        }
    }
}

fn restrict_to_split(cohort: Vec<LabeledSample>, cfg: &EvalConfig) -> Result<Vec<LabeledSample>> {
    let Some(path) = &cfg.split_file else {
        return Ok(cohort);
    };
    let split: BTreeMap<String, Vec<String>> =
        read_config(Some(path)).with_context(|| format!("reading split {}", path.display()))?;
    let ids = split.get(&cfg.split_part).ok_or_else(|| {
        usage(format!(
            "{} has no part {:?}",
            path.display(),
            cfg.split_part
        ))
    })?;
    let by_id: BTreeMap<&str, &LabeledSample> = cohort.iter().map(|s| (s.id.as_str(), s)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|s| (*s).clone())
                .ok_or_else(|| usage(format!("sample {id} from the split is not in the cohort")))
        })
        .collect()
}

fn write_roc(path: &Path, scores: &[f64], labels: &[bool]) -> Result<bool> {
    let Ok(points) = roc_points(scores, labels) else {
        return Ok(false);
    };
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["fpr", "tpr"])?;
    for (f, t) in points {
        w.write_record([f.to_string(), t.to_string()])?;
    }
    w.flush()?;
    Ok(true)
}

/// ROC point files for presence, each adjacent grade pair, and
/// densitometry (first-rater labels). Returns the files written.
fn write_rocs(dir: &Path, inputs: &[EvalInput], ncat: usize) -> Result<Vec<String>> {
    let mut written = Vec::new();
    let y: Vec<f64> = inputs.iter().map(|s| s.y_hat).collect();
    let presence: Vec<bool> = inputs.iter().map(|s| s.grade_rater1.0 >= 1).collect();
    if write_roc(&dir.join("roc_presence.csv"), &y, &presence)? {
        written.push("roc_presence.csv".into());
    }
    for g in 1..ncat.saturating_sub(1) as u8 {
        let (s, l): (Vec<f64>, Vec<bool>) = inputs
            .iter()
            .filter(|x| x.grade_rater1.0 == g || x.grade_rater1.0 == g + 1)
            .map(|x| (x.y_hat, x.grade_rater1.0 == g + 1))
            .unzip();
        let name = format!("roc_extent_{g}v{}.csv", g + 1);
        if write_roc(&dir.join(&name), &s, &l)? {
            written.push(name);
        }
    }
    if let Some(laa) = inputs
        .iter()
        .map(|s| s.laa950)
        .collect::<Option<Vec<f64>>>()
    {
        if write_roc(&dir.join("roc_densitometry.csv"), &laa, &presence)? {
            written.push("roc_densitometry.csv".into());
        }
    }
    Ok(written)
}

fn write_predictions(path: &Path, scored: &[ScoredSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "id",
        "y_hat",
        "predicted_grade",
        "grade_rater1",
        "grade_rater2",
        "true_proportion",
        "laa950",
        "boundary_ratio",
        "pattern",
        "dice",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in scored {
        let i = &s.input;
        w.write_record([
            i.id.clone(),
            i.y_hat.to_string(),
            i.predicted_grade.0.to_string(),
            i.grade_rater1.0.to_string(),
            i.grade_rater2.0.to_string(),
            opt(s.true_proportion),
            opt(i.laa950),
            opt(i.boundary_ratio.map(|r| r.min(RATIO_CAP))),
            i.pattern
                .map(|p| p.as_str().to_string())
                .unwrap_or_default(),
            opt(s.dice),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let t0 = Instant::now();
    let mut cfg: EvalConfig = read_config(a.config.as_deref())?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let cohort = restrict_to_split(load_cohort_dir(&a.cohort)?, &cfg)?;
    let scorer = match &a.checkpoint {
        Some(ck) => load_scorer(ck)?,
        None => Scorer::TruthOracle {
            thresholds: cfg.grade_thresholds.clone(),
        },
    };
    let scored = score_samples(&scorer, &cohort, &cfg.scoring).map_err(train_err)?;
    let inputs: Vec<EvalInput> = scored.iter().map(|s| s.input.clone()).collect();
    let map = GradeIntervalMap::new(cfg.grade_thresholds.clone());
    let report = evaluate(&inputs, &map, cfg.bootstrap_resamples, cfg.seed);

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("report.json"), &report)?;
    fs::write(a.out.join("report.csv"), report.to_csv())?;
    write_predictions(&a.out.join("predictions.csv"), &scored)?;
    let mut artifacts: Vec<String> = ["report.json", "report.csv", "predictions.csv"]
        .map(String::from)
        .to_vec();
    artifacts.extend(write_rocs(&a.out, &inputs, map.thresholds.ncat())?);

    let mut run = RunManifest::new("eval", serde_json::to_value(&cfg)?);
    run.seeds.insert("bootstrap".into(), cfg.seed);
    run.artifacts = artifacts;
    run.timings_s
        .insert("total".into(), t0.elapsed().as_secs_f64());
    run.write(&a.out)?;

    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    println!(
        "n={} presence AUC {} extent AUC {} ICC {} Spearman {} densitometry AUC {} pattern AUC {}",
        report.n_samples,
        show(report.presence_auc),
        show(report.extent_auc),
        show(report.icc),
        show(report.spearman_r),
        show(report.densitometry_auc),
        show(report.pattern_auc)
    );
    if let Some(d) = mean_dice(&scored, 2) {
        println!("mean Dice (grades >= 2): {d:.4}");
    }
    Ok(())
}

/// Header written next to an exported probability map.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SegmentHeader {
    pub sample_id: String,
    pub y_hat: f64,
    pub predicted_grade: u8,
    /// Mean of the feature-grid map over the aligned region.
    pub masked_mean: f64,
    pub geometry: crate::models::Geometry,
    /// Shape of `prob_map_input.f32` (the sample's own grid).
    pub input_shape: [usize; 3],
    pub dtype: String,
    pub files: Vec<String>,
}

pub fn cmd_segment(a: &SegmentArgs) -> Result<()> {
    let t0 = Instant::now();
    let Scorer::Model { model, mapping } = load_scorer(&a.checkpoint)? else {
        unreachable!("load_scorer returns a model");
    };
    let sample = load_sample(&a.sample)
        .map_err(|e| usage(format!("cannot load sample {}: {e}", a.sample.display())))?;
    let p = predict(&model, &mapping, &sample).map_err(train_err)?;
    let (Some(map), Some(region)) = (p.prob_map.as_ref(), p.aligned_region.as_ref()) else {
        return Err(usage(format!(
            "the {} head has no probability map",
            model.config.head.as_str()
        )));
    };
    let (sum, n) = map
        .iter()
        .zip(&region.data)
        .filter(|(_, &r)| r != 0)
        .fold((0.0f64, 0usize), |(s, n), (&v, _)| (s + v as f64, n + 1));
    let on_source = p.prob_map_on_source().expect("map present");

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    crate::volumes::io::write_raw_f32(&a.out.join("prob_map.f32"), map.iter().copied())?;
    crate::volumes::io::write_raw_f32(
        &a.out.join("prob_map_input.f32"),
        on_source.iter().copied(),
    )?;
    let header = SegmentHeader {
        sample_id: sample.id.clone(),
        y_hat: p.y_hat,
        predicted_grade: p.grade.0,
        masked_mean: sum / n as f64,
        geometry: p.geometry,
        input_shape: p.source_shape,
        dtype: crate::volumes::io::DTYPE_TAG.into(),
        files: vec!["prob_map.f32".into(), "prob_map_input.f32".into()],
    };
    write_json(&a.out.join("segment.json"), &header)?;

    let mut run = RunManifest::new(
        "segment",
        serde_json::json!({ "checkpoint": a.checkpoint, "sample": a.sample }),
    );
    run.artifacts = vec![
        "segment.json".into(),
        "prob_map.f32".into(),
        "prob_map_input.f32".into(),
    ];
    run.timings_s
        .insert("total".into(), t0.elapsed().as_secs_f64());
    run.write(&a.out)?;
    println!(
        "{}: y_hat {:.4}, map {:?} written to {}",
        sample.id,
        p.y_hat,
        p.geometry.output_shape,
        a.out.display()
    );
    Ok(())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatternRatio {
    pub id: String,
    pub pattern: Pattern,
    /// Capped at the report ratio cap.
    pub ratio: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PatternReport {
    /// AUC of the ratio for paraseptal against centrilobular samples.
    pub auc: f64,
    pub n_paraseptal: usize,
    pub n_centrilobular: usize,
    pub source: PatternSource,
    pub margin_vox: f64,
    pub samples: Vec<PatternRatio>,
}

/// Pattern AUC over scored samples that carry a pattern and a ratio.
pub fn pattern_report(scored: &[ScoredSample], opts: &ScoreOptions) -> Result<PatternReport> {
    let samples: Vec<PatternRatio> = scored
        .iter()
        .filter_map(|s| {
            Some(PatternRatio {
                id: s.input.id.clone(),
                pattern: s.input.pattern?,
                ratio: s.input.boundary_ratio?.min(RATIO_CAP),
            })
        })
        .collect();
    let ratios: Vec<f64> = samples.iter().map(|s| s.ratio).collect();
    let patterns: Vec<Pattern> = samples.iter().map(|s| s.pattern).collect();
    let auc = pattern_auc(&ratios, &patterns).map_err(|e| match e {
        MetricError::NoPositives | MetricError::SingleClass(_) => usage(e.to_string()),
        other => other.into(),
    })?;
    let count = |p: Pattern| patterns.iter().filter(|&&q| q == p).count();
    Ok(PatternReport {
        auc,
        n_paraseptal: count(Pattern::Paraseptal),
        n_centrilobular: count(Pattern::Centrilobular),
        source: opts.pattern_source,
        margin_vox: opts.pattern_margin_vox,
        samples,
    })
}

pub fn cmd_pattern(a: &PatternArgs) -> Result<()> {
    let t0 = Instant::now();
    let mut cfg: EvalConfig = read_config(a.config.as_deref())?;
    let cohort = restrict_to_split(load_cohort_dir(&a.cohort)?, &cfg)?;
    let scorer = match &a.checkpoint {
        Some(ck) => load_scorer(ck)?,
        None => {
            cfg.scoring.pattern_source = PatternSource::LesionMask;
            Scorer::TruthOracle {
                thresholds: cfg.grade_thresholds.clone(),
            }
        }
    };
    let scored = score_samples(&scorer, &cohort, &cfg.scoring).map_err(train_err)?;
    let report = pattern_report(&scored, &cfg.scoring)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_json(&a.out.join("pattern_report.json"), &report)?;
    let mut run = RunManifest::new("pattern", serde_json::to_value(&cfg)?);
    run.artifacts = vec!["pattern_report.json".into()];
    run.timings_s
        .insert("total".into(), t0.elapsed().as_secs_f64());
    run.write(&a.out)?;
    println!(
        "pattern AUC {:.4} ({} paraseptal, {} centrilobular)",
        report.auc, report.n_paraseptal, report.n_centrilobular
    );
    Ok(())
}
