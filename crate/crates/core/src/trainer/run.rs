use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{
    prepare, sample_batch, LossKind, OutputMapping, PhaseSpec, PreparedSample, Result,
    SelectionMetric, Strata, TrainConfig, TrainError,
};
use crate::evalmetrics::{extent_auc, presence_auc, MetricError};
use crate::losses::{lpi_loss_and_grad, mila_loss, rms_loss, Grade, LpiConfig};
use crate::models::{
    read_tensors, save_checkpoint, write_tensors, ForwardPass, Model, TensorEntry,
};
use crate::nncore::{AdadeltaState, ParamStore, Tensor};
use crate::synthcohort::derive_seed;
use crate::volumes::{augment, LabeledSample};

const STREAM_SAMPLER: u64 = 10;
const STREAM_AUGMENT: u64 = 11;

/// Run-length controls that do not change the result.
#[derive(Clone, Debug, Default)]
pub struct TrainControl {
    /// Continue from `<out>/state` when present.
    pub resume: bool,
    /// Stop (saving resumable state) after this many epochs in this call.
    pub stop_after_epochs: Option<usize>,
    /// Print one line per epoch to stderr.
    pub verbose: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch across all phases.
    pub epoch: usize,
    pub phase: usize,
    pub phase_epoch: usize,
    pub loss: LossKind,
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_presence_auc: Option<f64>,
    pub val_extent_auc: Option<f64>,
    /// This epoch became the phase's best so far.
    pub selected: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Selected model of the last phase run (the current model when no
    /// validation happened).
    pub model: Model<f32>,
    pub history: Vec<EpochRecord>,
    /// All phases ran to the end.
    pub completed: bool,
}

/// Everything needed to continue a run bit-exactly.
struct RunState {
    params: ParamStore<f32>,
    best: Option<(ParamStore<f32>, [f64; 2])>,
    phase: usize,
    phase_epoch: usize,
    global_epoch: usize,
    history: Vec<EpochRecord>,
}

#[derive(Serialize, Deserialize)]
struct StateMeta {
    config: TrainConfig,
    phase: usize,
    phase_epoch: usize,
    global_epoch: usize,
    best_score: Option<[f64; 2]>,
    params: Vec<TensorEntry>,
    acc_grad: Vec<TensorEntry>,
    acc_update: Vec<TensorEntry>,
    best: Vec<TensorEntry>,
    history: Vec<EpochRecord>,
}

fn io_err(path: &Path, e: impl ToString) -> TrainError {
    TrainError::Io {
        path: path.to_path_buf(),
        reason: e.to_string(),
    }
}

fn params_map(p: &ParamStore<f32>) -> BTreeMap<String, Tensor<f32>> {
    p.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

fn state_map(
    p: &ParamStore<f32>,
    pick: fn(&AdadeltaState<f32>) -> &Vec<f32>,
) -> Result<BTreeMap<String, Tensor<f32>>> {
    p.iter()
        .map(|(k, v)| {
            Ok((
                k.clone(),
                Tensor::new(v.shape.clone(), pick(p.state(k)?).clone())?,
            ))
        })
        .collect()
}

fn store_from(map: BTreeMap<String, Tensor<f32>>) -> Result<ParamStore<f32>> {
    let mut s = ParamStore::new();
    for (k, v) in map {
        s.insert(k, v)?;
    }
    Ok(s)
}

impl RunState {
    fn save(&self, dir: &Path, cfg: &TrainConfig) -> Result<()> {
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            fs::remove_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
        }
        let params = write_tensors(&tmp.join("params"), &params_map(&self.params))?;
        let acc_grad = write_tensors(
            &tmp.join("acc_grad"),
            &state_map(&self.params, |s| &s.acc_grad)?,
        )?;
        let acc_update = write_tensors(
            &tmp.join("acc_update"),
            &state_map(&self.params, |s| &s.acc_update)?,
        )?;
        let best = match &self.best {
            Some((b, _)) => write_tensors(&tmp.join("best"), &params_map(b))?,
            None => Vec::new(),
        };
        let meta = StateMeta {
            config: cfg.clone(),
            phase: self.phase,
            phase_epoch: self.phase_epoch,
            global_epoch: self.global_epoch,
            best_score: self.best.as_ref().map(|b| b.1),
            params,
            acc_grad,
            acc_update,
            best,
            history: self.history.clone(),
        };
        let path = tmp.join("state.json");
        fs::write(
            &path,
            serde_json::to_string_pretty(&meta).expect("state serializes"),
        )
        .map_err(|e| io_err(&path, e))?;
        if dir.exists() {
            fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
        fs::rename(&tmp, dir).map_err(|e| io_err(dir, e))
    }

    fn load(dir: &Path, cfg: &TrainConfig) -> Result<Self> {
        let path = dir.join("state.json");
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        let meta: StateMeta = serde_json::from_str(&text).map_err(|e| io_err(&path, e))?;
        if meta.config != *cfg {
            return Err(TrainError::InvalidConfig(
                "resume state was written with a different training config".into(),
            ));
        }
        let mut params = store_from(read_tensors(&dir.join("params"), &meta.params)?)?;
        let acc_grad = read_tensors(&dir.join("acc_grad"), &meta.acc_grad)?;
        let mut acc_update = read_tensors(&dir.join("acc_update"), &meta.acc_update)?;
        for (name, g) in acc_grad {
            let u = acc_update
                .remove(&name)
                .ok_or_else(|| io_err(&path, format!("missing acc_update for {name}")))?;
            params.set_state(
                &name,
                AdadeltaState {
                    acc_grad: g.data,
                    acc_update: u.data,
                },
            )?;
        }
        let best = match meta.best_score {
            Some(score) => Some((
                store_from(read_tensors(&dir.join("best"), &meta.best)?)?,
                score,
            )),
            None => None,
        };
        Ok(Self {
            params,
            best,
            phase: meta.phase,
            phase_epoch: meta.phase_epoch,
            global_epoch: meta.global_epoch,
            history: meta.history,
        })
    }
}

/// Loss configuration and label transform of one phase.
struct PhaseLoss {
    kind: LossKind,
    lpi: LpiConfig,
    mila: bool,
}

impl PhaseLoss {
    fn new(phase: &PhaseSpec, cfg: &TrainConfig) -> Self {
        let lpi = match phase.loss {
            LossKind::Lpi2 => cfg.lpi.presence_only(),
            _ => cfg.lpi.clone(),
        };
        Self {
            kind: phase.loss,
            lpi,
            mila: phase.uses_mila(cfg.model.head),
        }
    }

    fn label(&self, g: Grade) -> Grade {
        match self.kind {
            LossKind::Lpi2 => g.presence(),
            _ => g,
        }
    }

    /// Per-sample interval (+ MILA) loss with its output and probability-map
    /// seeds. Only for interval losses.
    fn interval_terms(
        &self,
        fp: &ForwardPass<f32>,
        grade: Grade,
    ) -> Result<(f64, f64, Option<Vec<f64>>)> {
        let (l, dl) = lpi_loss_and_grad(fp.y_hat_value(), self.label(grade), &self.lpi)?;
        if !self.mila {
            return Ok((l, dl, None));
        }
        let pm = fp
            .prob_map
            .expect("MILA is validated to need the proportion head");
        let probs: Vec<f64> = fp.graph.value(pm).data.iter().map(|&p| p as f64).collect();
        let region = fp
            .aligned_region
            .as_ref()
            .expect("proportion head aligns its region");
        let (m, gm) = mila_loss(&probs, &region.data, grade, &self.lpi)?;
        Ok((l + m, dl, Some(gm)))
    }
}

fn seed_tensor(shape: &[usize], data: impl Iterator<Item = f64>) -> Tensor<f32> {
    Tensor {
        shape: shape.to_vec(),
        data: data.map(|v| v as f32).collect(),
    }
}

/// One optimizer step on the batch; returns the batch loss.
fn train_step(
    model: &mut Model<f32>,
    batch: &[LabeledSample],
    loss: &PhaseLoss,
    cfg: &TrainConfig,
) -> Result<f64> {
    let grades: Vec<Grade> = batch.iter().map(|s| s.grade_rater1).collect();
    let passes: Vec<ForwardPass<f32>> = batch
        .par_iter()
        .map(|s| {
            let input = model.config.input_tensor::<f32>(&s.volume);
            model.forward(input, Some(&s.region), true)
        })
        .collect::<std::result::Result<_, _>>()?;
    let b = batch.len() as f64;

    // (batch loss, per-sample seeds)
    let (batch_loss, seeds): (f64, Vec<Vec<(usize, Tensor<f32>)>>) = match loss.kind {
        LossKind::Rms => {
            let y: Vec<f64> = passes.iter().map(ForwardPass::y_hat_value).collect();
            let (l, g) = rms_loss(&y, &grades)?;
            let seeds = g
                .iter()
                .zip(&passes)
                .map(|(&gj, fp)| vec![(fp.y_hat.index(), Tensor::scalar(gj as f32))])
                .collect();
            (l, seeds)
        }
        LossKind::Lpi2 | LossKind::Lpi6 => {
            let mut total = 0.0;
            let mut seeds = Vec::with_capacity(passes.len());
            for (fp, &g) in passes.iter().zip(&grades) {
                let (l, dl, gm) = loss.interval_terms(fp, g)?;
                total += l;
                let mut s = vec![(fp.y_hat.index(), Tensor::scalar((dl / b) as f32))];
                if let (Some(gm), Some(pm)) = (gm, fp.prob_map) {
                    let shape = fp.graph.value(pm).shape.clone();
                    s.push((
                        pm.index(),
                        seed_tensor(&shape, gm.into_iter().map(|v| v / b)),
                    ));
                }
                seeds.push(s);
            }
            (total / b, seeds)
        }
    };
    if !batch_loss.is_finite() {
        return Err(TrainError::Diverged {
            epoch: 0,
            iter: 0,
            reason: format!("non-finite batch loss {batch_loss}"),
        });
    }

    let grads: Vec<BTreeMap<String, Tensor<f32>>> = passes
        .into_par_iter()
        .zip(seeds.into_par_iter())
        .map(|(mut fp, seeds)| {
            let vars: Vec<_> = seeds
                .into_iter()
                .map(|(idx, t)| {
                    let v = if idx == fp.y_hat.index() {
                        fp.y_hat
                    } else {
                        fp.prob_map.expect("second seed is the probability map")
                    };
                    (v, t)
                })
                .collect();
            fp.graph.backward(&vars)?;
            Ok(fp.param_grads())
        })
        .collect::<Result<_>>()?;

    // Fixed-order reduction over the batch.
    let mut sum = grads[0].clone();
    for g in &grads[1..] {
        for (name, t) in g {
            let acc = sum.get_mut(name).expect("same parameter set");
            for (a, &v) in acc.data.iter_mut().zip(&t.data) {
                *a += v;
            }
        }
    }
    if sum.values().any(|t| !t.all_finite()) {
        return Err(TrainError::Diverged {
            epoch: 0,
            iter: 0,
            reason: "non-finite gradient".into(),
        });
    }
    model.params.adadelta_step(&sum, &cfg.adadelta)?;
    Ok(batch_loss)
}

struct Validation {
    loss: f64,
    presence: Option<f64>,
    extent: Option<f64>,
}

fn metric_or_none(r: std::result::Result<f64, MetricError>) -> Option<f64> {
    r.ok()
}

fn rater_mean(f: impl Fn(&[Grade]) -> Option<f64>, val: &[PreparedSample]) -> Option<f64> {
    let r1: Vec<Grade> = val.iter().map(|p| p.sample.grade_rater1).collect();
    let r2: Vec<Grade> = val.iter().map(|p| p.sample.grade_rater2).collect();
    Some((f(&r1)? + f(&r2)?) / 2.0)
}

fn validate(model: &Model<f32>, val: &[PreparedSample], loss: &PhaseLoss) -> Result<Validation> {
    let passes: Vec<(f64, f64)> = val
        .par_iter()
        .map(|p| {
            let input = model.config.input_tensor::<f32>(&p.sample.volume);
            let fp = model.forward(input, Some(&p.sample.region), false)?;
            let y = fp.y_hat_value();
            let l = match loss.kind {
                LossKind::Rms => 0.0,
                _ => loss.interval_terms(&fp, p.sample.grade_rater1)?.0,
            };
            Ok((y, l))
        })
        .collect::<Result<_>>()?;
    let y: Vec<f64> = passes.iter().map(|p| p.0).collect();
    let vloss = match loss.kind {
        LossKind::Rms => {
            let grades: Vec<Grade> = val.iter().map(|p| p.sample.grade_rater1).collect();
            rms_loss(&y, &grades)?.0
        }
        _ => passes.iter().map(|p| p.1).sum::<f64>() / passes.len() as f64,
    };
    let ncat = loss_ncat(loss);
    Ok(Validation {
        loss: vloss,
        presence: rater_mean(|g| metric_or_none(presence_auc(&y, g)), val),
        extent: rater_mean(
            |g| metric_or_none(extent_auc(&y, g, ncat).map(|e| e.mean)),
            val,
        ),
    })
}

fn loss_ncat(loss: &PhaseLoss) -> usize {
    match loss.kind {
        // presence-only loss still validates extent over the full scale
        LossKind::Lpi2 => 6.max(loss.lpi.ncat()),
        _ => loss.lpi.ncat().max(2),
    }
}

fn write_metrics_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record([
        "epoch",
        "phase",
        "phase_epoch",
        "loss",
        "train_loss",
        "val_loss",
        "val_presence_auc",
        "val_extent_auc",
        "selected",
    ])
    .map_err(|e| io_err(path, e))?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in history {
        let kind = serde_json::to_value(r.loss).expect("serializes");
        w.write_record([
            r.epoch.to_string(),
            r.phase.to_string(),
            r.phase_epoch.to_string(),
            kind.as_str().unwrap_or_default().to_string(),
            r.train_loss.to_string(),
            opt(r.val_loss),
            opt(r.val_presence_auc),
            opt(r.val_extent_auc),
            r.selected.to_string(),
        ])
        .map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Training provenance stored in checkpoints.
pub(crate) fn provenance(
    cfg: &TrainConfig,
    state_history: &[EpochRecord],
    phase: usize,
    completed: bool,
) -> serde_json::Value {
    serde_json::json!({
        "config": cfg,
        "output_mapping": OutputMapping::for_config(cfg),
        "phase": phase,
        "epochs_run": state_history.len(),
        "completed": completed,
        "history": state_history,
    })
}

fn save_outputs(
    out: &Path,
    cfg: &TrainConfig,
    model: &Model<f32>,
    st: &RunState,
    completed: bool,
) -> Result<()> {
    write_metrics_csv(&out.join("metrics.csv"), &st.history)?;
    let ck = out.join("checkpoint");
    let tmp = out.join("checkpoint.tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| io_err(&tmp, e))?;
    }
    save_checkpoint(
        &tmp,
        model,
        &provenance(cfg, &st.history, st.phase, completed),
    )?;
    if ck.exists() {
        fs::remove_dir_all(&ck).map_err(|e| io_err(&ck, e))?;
    }
    fs::rename(&tmp, &ck).map_err(|e| io_err(&ck, e))
}

fn better(a: [f64; 2], b: [f64; 2]) -> bool {
    a[0] > b[0] || (a[0] == b[0] && a[1] > b[1])
}

/// Runs the phase plan on `train_set`, selecting per phase on `val_set`.
///
/// With `out`, writes `config.resolved.json`, `metrics.csv`, the selected
/// model in `checkpoint/`, and resumable state in `state/` after every
/// epoch. On divergence the last finite parameters go to
/// `checkpoint_last_finite/` before the error is returned.
pub fn train(
    cfg: &TrainConfig,
    train_set: &[LabeledSample],
    val_set: &[LabeledSample],
    out: Option<&Path>,
    ctl: &TrainControl,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if val_set.is_empty() {
        return Err(TrainError::InvalidConfig(
            "validation split is empty".into(),
        ));
    }
    let ncat = cfg.lpi.ncat();
    let train_prep: Vec<PreparedSample> = train_set
        .par_iter()
        .map(|s| prepare(s, &cfg.model))
        .collect::<Result<_>>()?;
    let val_prep: Vec<PreparedSample> = val_set
        .par_iter()
        .map(|s| prepare(s, &cfg.model))
        .collect::<Result<_>>()?;
    let strata = Strata::new(
        &train_prep
            .iter()
            .map(|p| p.sample.grade_rater1)
            .collect::<Vec<_>>(),
        ncat,
    )?;

    let state_dir: Option<PathBuf> = out.map(|o| o.join("state"));
    if let Some(o) = out {
        fs::create_dir_all(o).map_err(|e| io_err(o, e))?;
        let p = o.join("config.resolved.json");
        fs::write(
            &p,
            serde_json::to_string_pretty(cfg).expect("config serializes") + "\n",
        )
        .map_err(|e| io_err(&p, e))?;
    }

    let mut st = match &state_dir {
        Some(d) if ctl.resume && d.join("state.json").exists() => RunState::load(d, cfg)?,
        _ => RunState {
            params: cfg.model.init_params()?,
            best: None,
            phase: 0,
            phase_epoch: 0,
            global_epoch: 0,
            history: Vec::new(),
        },
    };
    let mut model = Model::from_parts(cfg.model.clone(), st.params.clone())?;
    let mut epochs_this_call = 0usize;

    while st.phase < cfg.phases.len() {
        let phase = cfg.phases[st.phase];
        let loss = PhaseLoss::new(&phase, cfg);
        while st.phase_epoch < phase.epochs {
            if ctl.stop_after_epochs.is_some_and(|n| epochs_this_call >= n) {
                st.params = model.params.clone();
                if let (Some(o), Some(d)) = (out, &state_dir) {
                    st.save(d, cfg)?;
                    save_outputs(o, cfg, &model, &st, false)?;
                }
                return Ok(TrainOutcome {
                    model,
                    history: st.history,
                    completed: false,
                });
            }
            let t0 = Instant::now();
            let mut loss_sum = 0.0;
            for it in 0..cfg.iters_per_epoch {
                let global_iter = (st.global_epoch * cfg.iters_per_epoch + it) as u64;
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, global_iter, STREAM_SAMPLER));
                let idx = sample_batch(&strata, cfg.batch_size, &mut rng);
                let batch: Vec<LabeledSample> = idx
                    .iter()
                    .enumerate()
                    .map(|(j, &i)| {
                        let seed = derive_seed(
                            cfg.seed,
                            global_iter * cfg.batch_size as u64 + j as u64,
                            STREAM_AUGMENT,
                        );
                        augment(&train_prep[i].sample, seed, &cfg.augment)
                    })
                    .collect();
                let before = model.params.clone();
                match train_step(&mut model, &batch, &loss, cfg) {
                    Ok(l) => loss_sum += l,
                    Err(e) => {
                        let reason = match e {
                            TrainError::Diverged { reason, .. } => reason,
                            TrainError::Nn(crate::nncore::NnError::NonFinite(op)) => {
                                format!("non-finite value in {op}")
                            }
                            TrainError::Model(crate::models::ModelError::Nn(
                                crate::nncore::NnError::NonFinite(op),
                            )) => {
                                format!("non-finite value in {op}")
                            }
                            other => return Err(other),
                        };
                        if let Some(o) = out {
                            let last = Model::from_parts(cfg.model.clone(), before)?;
                            save_checkpoint(
                                &o.join("checkpoint_last_finite"),
                                &last,
                                &provenance(cfg, &st.history, st.phase, false),
                            )?;
                        }
                        return Err(TrainError::Diverged {
                            epoch: st.global_epoch + 1,
                            iter: it,
                            reason,
                        });
                    }
                }
            }
            st.phase_epoch += 1;
            st.global_epoch += 1;
            epochs_this_call += 1;
            let train_loss = if cfg.iters_per_epoch > 0 {
                loss_sum / cfg.iters_per_epoch as f64
            } else {
                0.0
            };

            let do_val = st.phase_epoch % cfg.validate_every == 0 || st.phase_epoch == phase.epochs;
            let mut rec = EpochRecord {
                epoch: st.global_epoch,
                phase: st.phase,
                phase_epoch: st.phase_epoch,
                loss: phase.loss,
                train_loss,
                val_loss: None,
                val_presence_auc: None,
                val_extent_auc: None,
                selected: false,
            };
            if do_val {
                let v = validate(&model, &val_prep, &loss)?;
                rec.val_loss = Some(v.loss);
                rec.val_presence_auc = v.presence;
                rec.val_extent_auc = v.extent;
                let metric = match phase.selection_metric() {
                    SelectionMetric::PresenceAuc => v.presence,
                    SelectionMetric::ExtentAuc => v.extent,
                };
                let score = [metric.unwrap_or(f64::NEG_INFINITY), -v.loss];
                if st.best.as_ref().is_none_or(|b| better(score, b.1)) {
                    st.best = Some((model.params.clone(), score));
                    rec.selected = true;
                }
            }
            if ctl.verbose {
                eprintln!(
                    "epoch {:>3} phase {} {:?} train {:.5} val {:?} presence {:?} extent {:?} ({:.1}s)",
                    rec.epoch,
                    rec.phase,
                    rec.loss,
                    rec.train_loss,
                    rec.val_loss,
                    rec.val_presence_auc,
                    rec.val_extent_auc,
                    t0.elapsed().as_secs_f64()
                );
            }
            st.history.push(rec);

            if st.phase_epoch == phase.epochs {
                // Next phase starts from this phase's selection with fresh
                // optimizer state.
                if let Some((best, _)) = st.best.take() {
                    model.params = best;
                }
                model.params.reset_state();
                st.phase += 1;
                st.phase_epoch = 0;
            }
            st.params = model.params.clone();
            if let (Some(o), Some(d)) = (out, &state_dir) {
                let selected = match &st.best {
                    Some((b, _)) => Model::from_parts(cfg.model.clone(), b.clone())?,
                    None => model.clone(),
                };
                st.save(d, cfg)?;
                save_outputs(o, cfg, &selected, &st, st.phase >= cfg.phases.len())?;
            }
            if st.phase_epoch == 0 {
                break;
            }
        }
    }

    if let Some(o) = out {
        save_outputs(o, cfg, &model, &st, true)?;
    }
    Ok(TrainOutcome {
        model,
        history: st.history,
        completed: true,
    })
}
