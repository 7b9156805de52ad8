use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::hints::{epoch_rng, select_hint_layers, HintMode};
use super::loss::{loss_feat, loss_hint, loss_kd_graph, LossBreakdown};
use super::optim::{adamw_step, lr_at, AdamWConfig, OptimizerState};
use crate::error::{Error, Result};
use crate::io::WaveClip;
use crate::model::Model;
use crate::tensor::{Element, Gradients, Graph, Tensor};

/// Environment variable holding the default worker count.
pub const THREADS_ENV: &str = "FHKD_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillConfig {
    pub lambda: f64,
    pub hint_mode: HintMode,
    pub learning_rate: f64,
    pub betas: (f64, f64),
    pub epsilon: f64,
    pub weight_decay: f64,
    pub warmup_proportion: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub grad_accumulation: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            hint_mode: HintMode::All,
            learning_rate: 5e-4,
            betas: (0.9, 0.98),
            epsilon: 1e-6,
            weight_decay: 1e-6,
            warmup_proportion: 0.05,
            total_steps: 1000,
            batch_size: 3,
            grad_accumulation: 4,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda must be ≥ 0, got {}", self.lambda));
        }
        if !(self.warmup_proportion > 0.0 && self.warmup_proportion < 1.0) {
            return bad(format!(
                "warmup_proportion must lie in (0, 1), got {}",
                self.warmup_proportion
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("invalid learning_rate {}", self.learning_rate));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("betas must lie in [0, 1), got ({b1}, {b2})"));
        }
        if !(self.epsilon > 0.0) || !(self.weight_decay >= 0.0) {
            return bad("epsilon must be > 0 and weight_decay ≥ 0".into());
        }
        if self.total_steps == 0 || self.batch_size == 0 || self.grad_accumulation == 0 {
            return bad("total_steps, batch_size and grad_accumulation must be ≥ 1".into());
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.betas.0,
            beta2: self.betas.1,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
        }
    }
}

/// One optimizer step of the loss history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub l_feat: f64,
    pub l_hint: f64,
    pub l_kd: f64,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn losses(&self) -> LossBreakdown {
        LossBreakdown {
            l_feat: self.l_feat,
            l_hint: self.l_hint,
            l_kd: self.l_kd,
        }
    }
}

pub const HISTORY_HEADER: [&str; 6] = ["step", "lr", "l_feat", "l_hint", "l_kd", "wall_ms"];

pub fn write_history_csv<W: Write>(history: &[StepRecord], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(HISTORY_HEADER)
        .map_err(|e| Error::Parse(e.to_string()))?;
    for r in history {
        w.serialize(r).map_err(|e| Error::Parse(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::Parse(e.to_string()))
}

pub fn save_history_csv(history: &[StepRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_history_csv(history, file)
}

pub fn read_history_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize()
        .map(|rec| rec.map_err(|e| Error::Parse(e.to_string())))
        .collect()
}

/// Worker count from `FHKD_THREADS`, defaulting to 1.
pub fn default_threads() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

fn check_pair<T: Element>(teacher: &Model<T>, student: &Model<T>) -> Result<()> {
    if !teacher.is_frozen() {
        return Err(Error::Config(
            "teacher must be frozen before distillation".into(),
        ));
    }
    let (t, s) = (&teacher.config, &student.config);
    if t.num_layers != s.num_layers {
        return Err(Error::Config(format!(
            "teacher has {} layers, student {}",
            t.num_layers, s.num_layers
        )));
    }
    if s.head_target_dim != Some(t.model_dim) {
        return Err(Error::Config(format!(
            "student heads emit {:?} features, teacher width is {}",
            s.head_target_dim, t.model_dim
        )));
    }
    if !s.has_head(s.num_layers) {
        return Err(Error::MissingHead(s.num_layers));
    }
    Ok(())
}

fn samples<T: Element>(clip: &WaveClip) -> Vec<T> {
    clip.samples.iter().map(|&x| T::c(x)).collect()
}

/// Teacher hidden states `h_T^(1..N)` for one clip.
pub fn teacher_targets<T: Element>(teacher: &Model<T>, clip: &WaveClip) -> Result<Vec<Tensor<T>>> {
    teacher.infer(&samples(clip))
}

/// Student forward, loss and backward for one clip against precomputed
/// teacher targets.
pub fn clip_loss_and_grads<T: Element>(
    student: &Model<T>,
    clip: &WaveClip,
    targets: &[Tensor<T>],
    selected: &[usize],
    lambda: f64,
) -> Result<(LossBreakdown, Gradients<T>)> {
    let n = student.config.num_layers;
    if targets.len() != n {
        return Err(Error::arg(
            "distill_step",
            format!("{} teacher layers for {n} student layers", targets.len()),
        ));
    }
    let mut g = Graph::new();
    let wave = student.wave_input(&mut g, &samples(clip))?;
    let out = student.encoder_forward(&mut g, wave)?;
    let target_len = targets[n - 1].shape()[0];
    let mut teacher = Vec::with_capacity(n);
    for t in targets {
        teacher.push(g.constant(t.clone()));
    }
    let last = student.prediction_head_forward(&mut g, n, out.hidden[n - 1], target_len)?;
    let feat = loss_feat(&mut g, teacher[n - 1], last)?;
    let hint = if selected.is_empty() {
        None
    } else {
        let mut heads = Vec::with_capacity(selected.len());
        for &l in selected {
            if l == 0 || l >= n {
                return Err(Error::arg(
                    "distill_step",
                    format!("hint layer {l} outside 1..{n}"),
                ));
            }
            heads.push((
                l,
                student.prediction_head_forward(&mut g, l, out.hidden[l - 1], target_len)?,
            ));
        }
        Some(loss_hint(&mut g, &teacher, &heads, selected)?)
    };
    let kd = loss_kd_graph(&mut g, feat, hint, lambda)?;
    let l_feat = g.value(feat).item().to_f64().unwrap_or(f64::NAN);
    let l_hint = hint.map_or(0.0, |h| g.value(h).item().to_f64().unwrap_or(f64::NAN));
    let grads = g.backward(kd)?;
    Ok((LossBreakdown::new(l_feat, l_hint, lambda), grads))
}

fn check_finite(step: usize, loss: &LossBreakdown) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss {
            step,
            l_feat: loss.l_feat,
            l_hint: loss.l_hint,
        })
    }
}

/// Runs `batch` through both models and adds `scale ×` the summed student
/// gradients onto its accumulators (in clip order). Returns the per-clip
/// losses.
fn accumulate_batch<T: Element>(
    student: &mut Model<T>,
    batch: &[(&WaveClip, &[Tensor<T>])],
    selected: &[usize],
    lambda: f64,
    scale: f64,
) -> Result<Vec<LossBreakdown>> {
    let model = &*student;
    let results: Vec<Result<(LossBreakdown, Gradients<T>)>> = batch
        .par_iter()
        .map(|(clip, targets)| clip_loss_and_grads(model, clip, targets, selected, lambda))
        .collect();
    let mut losses = Vec::with_capacity(batch.len());
    for r in results {
        let (loss, grads) = r?;
        for (id, g) in grads.params() {
            student.params.accumulate_one(id, g.data(), T::c(scale));
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// One batch of the distillation objective: teacher forward without
/// gradients, student forward with heads at `selected` plus the last layer,
/// and `l_kd` backpropagated into the student. Gradients are averaged over
/// the batch and added to the student's accumulators; the returned
/// breakdown is the batch mean.
pub fn distill_step<T: Element>(
    teacher: &Model<T>,
    student: &mut Model<T>,
    batch: &[WaveClip],
    config: &DistillConfig,
    selected: &[usize],
) -> Result<LossBreakdown> {
    config.validate()?;
    check_pair(teacher, student)?;
    if batch.is_empty() {
        return Err(Error::arg("distill_step", "empty batch"));
    }
    let targets = batch
        .par_iter()
        .map(|c| teacher_targets(teacher, c))
        .collect::<Result<Vec<_>>>()?;
    let pairs: Vec<_> = batch
        .iter()
        .zip(&targets)
        .map(|(c, t)| (c, t.as_slice()))
        .collect();
    let losses = accumulate_batch(
        student,
        &pairs,
        selected,
        config.lambda,
        1.0 / batch.len() as f64,
    )?;
    let mean = LossBreakdown::mean(&losses, config.lambda);
    check_finite(0, &mean)?;
    Ok(mean)
}

#[derive(Debug, Clone)]
pub struct DistillOutcome<T: Element = f64> {
    pub student: Model<T>,
    pub optimizer: OptimizerState<T>,
    pub history: Vec<StepRecord>,
}

/// Full distillation loop.
///
/// Each epoch is a seeded shuffle of `dataset` cut into micro-batches of
/// `batch_size` clips (a short remainder is dropped); hint layers are
/// reselected at each epoch start. An optimizer step accumulates
/// `grad_accumulation` micro-batches, averaging gradients over all of their
/// clips, and uses `lr_at(step)` for steps numbered from 1.
///
/// Micro-batch clips run on a pool of [`default_threads`] workers; gradients
/// are reduced in clip order so results do not depend on the worker count.
pub fn distill_run<T: Element>(
    teacher: &Model<T>,
    student: Model<T>,
    dataset: &[WaveClip],
    config: &DistillConfig,
) -> Result<DistillOutcome<T>> {
    distill_run_with_threads(teacher, student, dataset, config, default_threads())
}

/// [`distill_run`] on an explicit number of workers.
pub fn distill_run_with_threads<T: Element>(
    teacher: &Model<T>,
    student: Model<T>,
    dataset: &[WaveClip],
    config: &DistillConfig,
    threads: usize,
) -> Result<DistillOutcome<T>> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    pool.install(|| run(teacher, student, dataset, config))
}

fn run<T: Element>(
    teacher: &Model<T>,
    mut student: Model<T>,
    dataset: &[WaveClip],
    config: &DistillConfig,
) -> Result<DistillOutcome<T>> {
    config.validate()?;
    check_pair(teacher, &student)?;
    if dataset.is_empty() {
        return Err(Error::arg("distill_run", "empty dataset"));
    }
    let n_layers = student.config.num_layers;
    let batch_size = config.batch_size.min(dataset.len());
    let per_step = batch_size * config.grad_accumulation;
    let hyper = config.adamw();
    let start = Instant::now();

    let mut cache: Vec<Option<Vec<Tensor<T>>>> = vec![None; dataset.len()];
    let mut optimizer = OptimizerState::new(&student.params);
    let mut history = Vec::with_capacity(config.total_steps);
    let mut epoch = 0u64;
    let mut order = epoch_order(dataset.len(), config.seed, epoch);
    let mut selected = select_hint_layers(config.hint_mode, epoch, config.seed, n_layers)?;
    let mut cursor = 0;

    for step in 1..=config.total_steps {
        student.params.zero_grad();
        let lr = lr_at(
            step,
            config.total_steps,
            config.learning_rate,
            config.warmup_proportion,
        )?;
        let mut losses = Vec::with_capacity(per_step);
        for _ in 0..config.grad_accumulation {
            if cursor + batch_size > order.len() {
                epoch += 1;
                order = epoch_order(dataset.len(), config.seed, epoch);
                selected = select_hint_layers(config.hint_mode, epoch, config.seed, n_layers)?;
                cursor = 0;
            }
            let ids = &order[cursor..cursor + batch_size];
            cursor += batch_size;
            let missing: Vec<usize> = ids
                .iter()
                .copied()
                .filter(|&i| cache[i].is_none())
                .collect();
            let fresh = missing
                .par_iter()
                .map(|&i| teacher_targets(teacher, &dataset[i]))
                .collect::<Result<Vec<_>>>()?;
            for (i, t) in missing.into_iter().zip(fresh) {
                cache[i] = Some(t);
            }
            let pairs: Vec<_> = ids
                .iter()
                .map(|&i| (&dataset[i], cache[i].as_deref().expect("cached above")))
                .collect();
            let part = accumulate_batch(
                &mut student,
                &pairs,
                &selected,
                config.lambda,
                1.0 / per_step as f64,
            )?;
            losses.extend(part);
        }
        let loss = LossBreakdown::mean(&losses, config.lambda);
        check_finite(step, &loss)?;
        adamw_step(&mut optimizer, &mut student.params, lr, &hyper)?;
        history.push(StepRecord {
            step,
            lr,
            l_feat: loss.l_feat,
            l_hint: loss.l_hint,
            l_kd: loss.l_kd,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    student.params.zero_grad();
    Ok(DistillOutcome {
        student,
        optimizer,
        history,
    })
}

fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut epoch_rng(seed, epoch, 0));
    order
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_toml() {
        let c = DistillConfig::default();
        assert_eq!(
            (c.lambda, c.learning_rate, c.grad_accumulation),
            (0.1, 5e-4, 4)
        );
        assert_eq!(c.hint_mode, HintMode::All);
        let text = toml::to_string(&c).unwrap();
        assert!(text.contains("hint_mode = \"all\""));
        let back: DistillConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, c);
        let partial: DistillConfig =
            toml::from_str("total_steps = 7\nhint_mode = \"random-2\"").unwrap();
        assert_eq!(
            (partial.total_steps, partial.hint_mode),
            (7, HintMode::Random(2))
        );
    }

    #[test]
    fn config_validation() {
        let bad = [
            DistillConfig {
                lambda: -0.1,
                ..Default::default()
            },
            DistillConfig {
                warmup_proportion: 0.0,
                ..Default::default()
            },
            DistillConfig {
                warmup_proportion: 1.0,
                ..Default::default()
            },
            DistillConfig {
                grad_accumulation: 0,
                ..Default::default()
            },
            DistillConfig {
                total_steps: 0,
                ..Default::default()
            },
        ];
        for c in bad {
            assert_eq!(c.validate().unwrap_err().code(), "E_CONFIG");
        }
    }

    #[test]
    fn history_csv_round_trip() {
        let h = vec![StepRecord {
            step: 1,
            lr: 1e-5,
            l_feat: 0.123456789012345,
            l_hint: 2.0,
            l_kd: 0.323456789012345,
            wall_ms: 3.5,
        }];
        let mut buf = Vec::new();
        write_history_csv(&h, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,lr,l_feat,l_hint,l_kd,wall_ms\n"));
        assert_eq!(read_history_csv(&text).unwrap(), h);
    }
}
