//! Randomized finite-difference gradient suites.
//!
//! Each case draws a small random configuration from its seed, reduces the
//! output to a scalar through a fixed random projection, and compares
//! reverse-mode gradients with central differences at sampled coordinates
//! of every input and parameter tensor.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::distill::clip_loss_and_grads;
use crate::error::{Error, Result};
use crate::io::WaveClip;
use crate::layers::{
    AttentionSpec, Conv1d, Conv1dSpec, ConvPositionalEmbedding, ConvTranspose1d, FeedForward,
    FfnSpec, Linear, MultiHeadAttention, Norm, PosConvSpec, TransformerLayer,
};
use crate::model::{presets, Model, ModelConfig};
use crate::params::{ParamDef, ParamStore};
use crate::tensor::gradcheck::{finite_diff_at, rel_err, DEFAULT_STEP};
use crate::tensor::{Graph, Tensor, Var};

pub const TOLERANCE: f64 = 1e-4;
pub const DEFAULT_SEEDS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Ops,
    Layers,
    Model,
    Distill,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Ops, Suite::Layers, Suite::Model, Suite::Distill];
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Ops => "ops",
            Suite::Layers => "layers",
            Suite::Model => "model",
            Suite::Distill => "distill",
        })
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|m| m.to_string() == s)
            .ok_or_else(|| {
                Error::arg(
                    "gradcheck",
                    format!("unknown module `{s}` (ops, layers, model, distill)"),
                )
            })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct CaseResult {
    pub name: String,
    pub seed: u64,
    pub probes: usize,
    pub max_rel_err: f64,
}

impl CaseResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(CaseResult::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CaseResult> {
        self.cases.iter().filter(|c| !c.passed())
    }

    pub fn worst(&self) -> f64 {
        self.cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max)
    }
}

type Forward<'a> = dyn Fn(&mut Graph<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'a;

/// Gradient check of `forward` at `store`/`inputs`, probing up to `probes`
/// coordinates of each tensor.
pub fn check_case(
    name: &str,
    seed: u64,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    probes: usize,
    forward: &Forward<'_>,
) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let shape = {
        let mut g = Graph::new();
        let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = forward(&mut g, store, &xs)?;
        g.shape(y).to_vec()
    };
    let numel: usize = shape.iter().product();
    let proj = Tensor::randn(&shape, &mut rng).map(|v| v / (numel as f64).sqrt());
    let scalar = |g: &mut Graph<f64>, y: Var| -> Result<Var> {
        let p = g.constant(proj.clone());
        let m = g.mul(y, p)?;
        g.sum(m)
    };
    let eval = |store: &ParamStore<f64>, inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut g = Graph::new();
        let xs: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let y = forward(&mut g, store, &xs)?;
        let s = scalar(&mut g, y)?;
        Ok(g.value(s).item())
    };

    let mut g = Graph::new();
    let xs: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let y = forward(&mut g, store, &xs)?;
    let s = scalar(&mut g, y)?;
    let grads = g.backward(s)?;
    let mut param_grads: Vec<Option<Tensor<f64>>> = vec![None; store.len()];
    for (id, gr) in grads.params() {
        match &mut param_grads[id] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(gr.data())
                .for_each(|(a, b)| *a += b),
            slot => *slot = Some(gr.clone()),
        }
    }

    let mut worst = 0.0f64;
    let mut count = 0;
    let mut pick = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
        let k = probes.min(n);
        count += k;
        rand::seq::index::sample(rng, n, k).into_vec()
    };
    for (i, x) in inputs.iter().enumerate() {
        let analytic = grads
            .get(xs[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()));
        let idx = pick(x.numel(), &mut rng);
        let mut f = |t: &Tensor<f64>| {
            let mut probe = inputs.to_vec();
            probe[i] = t.clone();
            eval(store, &probe)
        };
        for (j, num) in finite_diff_at(&mut f, x, DEFAULT_STEP, idx)? {
            worst = worst.max(rel_err(analytic.data()[j], num));
        }
    }
    for id in 0..store.len() {
        let p = store.by_id(id);
        if !p.requires_grad {
            continue;
        }
        let analytic = param_grads[id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let idx = pick(p.value.numel(), &mut rng);
        let mut work = store.clone();
        let mut f = |t: &Tensor<f64>| {
            work.by_id_mut(id).value = t.clone();
            eval(&work, inputs)
        };
        for (j, num) in finite_diff_at(&mut f, &p.value, DEFAULT_STEP, idx)? {
            worst = worst.max(rel_err(analytic.data()[j], num));
        }
    }
    Ok(CaseResult {
        name: name.to_string(),
        seed,
        probes: count,
        max_rel_err: worst,
    })
}

/// Parameters for `defs` with every entry jittered off its initializer, so
/// unit gains and zero shifts do not hide errors.
fn random_store(defs: &[ParamDef], rng: &mut ChaCha8Rng) -> Result<ParamStore<f64>> {
    let mut store = ParamStore::new();
    for d in defs {
        let base: Tensor<f64> = d.materialize(rng);
        let noise = Tensor::<f64>::uniform(&d.shape, 0.3, rng);
        let data = base
            .data()
            .iter()
            .zip(noise.data())
            .map(|(a, b)| a + b)
            .collect();
        store.insert(d.name.clone(), Tensor::from_vec(&d.shape, data)?)?;
    }
    Ok(store)
}

fn rand_input(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::uniform(shape, 1.0, rng)
}

pub fn run_suite(suite: Suite, seeds: usize) -> Result<SuiteReport> {
    let mut cases = Vec::new();
    for seed in 0..seeds as u64 {
        match suite {
            Suite::Ops => ops_cases(seed, &mut cases)?,
            Suite::Layers => layer_cases(seed, &mut cases)?,
            Suite::Model => cases.push(model_case(seed)?),
            Suite::Distill => cases.push(distill_case(seed)?),
        }
    }
    Ok(SuiteReport {
        suite: suite.to_string(),
        cases,
    })
}

fn ops_cases(seed: u64, out: &mut Vec<CaseResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let empty = ParamStore::new();
    let (m, k, n) = (
        rng.gen_range(1..6),
        rng.gen_range(1..6),
        rng.gen_range(1..6),
    );
    let probes = 8;
    let mut case = |name: &str, inputs: Vec<Tensor<f64>>, f: &Forward<'_>| -> Result<()> {
        out.push(check_case(name, seed, &empty, &inputs, probes, f)?);
        Ok(())
    };
    case(
        "matmul",
        vec![rand_input(&[m, k], &mut rng), rand_input(&[k, n], &mut rng)],
        &|g, _, x| g.matmul(x[0], x[1]),
    )?;
    let axis = rng.gen_range(0..2);
    let b_len = [m, k][axis];
    case(
        "broadcast",
        vec![
            rand_input(&[m, k], &mut rng),
            rand_input(&[b_len], &mut rng),
            rand_input(&[b_len], &mut rng),
        ],
        &|g, _, x| {
            let y = g.mul_broadcast(x[0], x[1], axis)?;
            g.add_broadcast(y, x[2], axis)
        },
    )?;
    case(
        "softmax",
        vec![rand_input(&[m, k + 1], &mut rng)],
        &|g, _, x| g.softmax(x[0], axis),
    )?;
    case(
        "gelu",
        vec![rand_input(&[m, k], &mut rng).map(|v| 3.0 * v)],
        &|g, _, x| g.gelu(x[0]),
    )?;
    case(
        "normalize",
        vec![rand_input(&[m, k + 1], &mut rng)],
        &|g, _, x| g.normalize(x[0], 1e-5),
    )?;
    case(
        "mean",
        vec![rand_input(&[m, k, n], &mut rng)],
        &|g, _, x| g.mean(x[0], &[axis]),
    )?;
    case(
        "mse",
        vec![rand_input(&[m, n], &mut rng), rand_input(&[m, n], &mut rng)],
        &|g, _, x| g.mse(x[0], x[1]),
    )?;
    let groups = rng.gen_range(1..3);
    let (cin, cout) = (groups * rng.gen_range(1..3), groups * rng.gen_range(1..3));
    let kernel = rng.gen_range(1..5);
    let stride = rng.gen_range(1..4);
    let pad = (rng.gen_range(0..3), rng.gen_range(0..3));
    let len = kernel + rng.gen_range(0..8);
    case(
        "conv1d",
        vec![
            rand_input(&[cin, len], &mut rng),
            rand_input(&[cout, cin / groups, kernel], &mut rng),
        ],
        &|g, _, x| g.conv1d(x[0], x[1], stride, pad, groups),
    )?;
    case(
        "conv_transpose1d",
        vec![
            rand_input(&[cin, len], &mut rng),
            rand_input(&[cin, cout, kernel], &mut rng),
        ],
        &|g, _, x| g.conv_transpose1d(x[0], x[1], stride),
    )?;
    let start = rng.gen_range(0..m + 1);
    let wlen = rng.gen_range(1..m + 3);
    case("window", vec![rand_input(&[m, k], &mut rng)], &|g, _, x| {
        g.window(x[0], 0, start, wlen)
    })?;
    case(
        "concat_transpose",
        vec![rand_input(&[m, k], &mut rng), rand_input(&[m, n], &mut rng)],
        &|g, _, x| {
            let c = g.concat(&[x[0], x[1]], 1)?;
            g.transpose(c)
        },
    )?;
    Ok(())
}

fn layer_cases(seed: u64, out: &mut Vec<CaseResult>) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probes = 4;
    let heads = rng.gen_range(1..4);
    let d = heads * rng.gen_range(1..4);
    let len = rng.gen_range(2..9);
    let mut case = |name: &str,
                    defs: Vec<ParamDef>,
                    input: &[usize],
                    f: &Forward<'_>,
                    rng: &mut ChaCha8Rng|
     -> Result<()> {
        let store = random_store(&defs, rng)?;
        let x = rand_input(input, rng);
        out.push(check_case(name, seed, &store, &[x], probes, f)?);
        Ok(())
    };

    let spec = Conv1dSpec {
        in_channels: rng.gen_range(1..4),
        out_channels: rng.gen_range(1..4),
        kernel: rng.gen_range(1..4),
        stride: rng.gen_range(1..3),
        bias: rng.gen_bool(0.5),
    };
    let conv_len = spec.kernel + rng.gen_range(0..6);
    case(
        "conv1d",
        spec.params("c"),
        &[spec.in_channels, conv_len],
        &|g, s, x| Conv1d::bind(spec, g, s, "c")?.forward(g, x[0]),
        &mut rng,
    )?;
    let dspec = Conv1dSpec { bias: true, ..spec };
    case(
        "conv_transpose1d",
        ConvTranspose1d::params(&dspec, "t"),
        &[dspec.in_channels, len],
        &|g, s, x| ConvTranspose1d::bind(dspec, g, s, "t")?.forward(g, x[0]),
        &mut rng,
    )?;
    let out_dim = rng.gen_range(1..5);
    case(
        "linear",
        Linear::params("l", d, out_dim),
        &[len, d],
        &|g, s, x| Linear::bind(g, s, "l")?.forward(g, x[0]),
        &mut rng,
    )?;
    case(
        "layer_norm",
        Norm::params("n", d),
        &[len, d],
        &|g, s, x| Norm::bind(g, s, "n", 1)?.forward(g, x[0]),
        &mut rng,
    )?;
    case(
        "channel_norm",
        Norm::params("n", d),
        &[d, len],
        &|g, s, x| Norm::bind(g, s, "n", 0)?.forward(g, x[0]),
        &mut rng,
    )?;
    let attn = AttentionSpec {
        model_dim: d,
        num_heads: heads,
    };
    case(
        "attention",
        attn.params("a"),
        &[len, d],
        &|g, s, x| MultiHeadAttention::bind(attn, g, s, "a")?.forward(g, x[0]),
        &mut rng,
    )?;
    let ffn = FfnSpec {
        model_dim: d,
        inner_dim: rng.gen_range(1..7),
    };
    case(
        "ffn",
        ffn.params("f"),
        &[len, d],
        &|g, s, x| FeedForward::bind(ffn, g, s, "f")?.forward(g, x[0]),
        &mut rng,
    )?;
    let groups = heads;
    let pos = PosConvSpec {
        model_dim: d,
        kernel: rng.gen_range(1..6),
        groups,
    };
    case(
        "pos_conv",
        pos.params("p"),
        &[len, d],
        &|g, s, x| ConvPositionalEmbedding::bind(pos, g, s, "p")?.forward(g, x[0]),
        &mut rng,
    )?;
    case(
        "transformer_layer",
        TransformerLayer::params("t", &attn, &ffn),
        &[len, d],
        &|g, s, x| TransformerLayer::bind(attn, ffn, g, s, "t")?.forward(g, x[0]),
        &mut rng,
    )?;
    Ok(())
}

/// A random miniature teacher/student pair sharing depth, the student
/// with heads on every layer.
pub fn micro_pair(seed: u64) -> (ModelConfig, ModelConfig) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.gen_range(2..4);
    let mut teacher = presets::toy_teacher();
    teacher.name = "micro-teacher".into();
    teacher.num_layers = layers;
    teacher.model_dim = 8;
    teacher.num_heads = 2;
    teacher.ffn_inner_dim = 8;
    teacher.pos_conv_kernel = rng.gen_range(2..5);
    teacher.pos_conv_groups = 2;
    teacher.cnn = presets::cnn_stack(&[4, 4], &[10, 3], &[5, 2]);
    let mut student = teacher.clone();
    student.name = "micro-student".into();
    student.model_dim = 4;
    student.ffn_inner_dim = 4;
    student.pos_conv_groups = rng.gen_range(1..3);
    student.time_reduction = rng.gen_range(1..4);
    student.head_target_dim = Some(teacher.model_dim);
    student.heads = (1..=layers).collect();
    student.cnn = presets::cnn_stack(&[2, 4, 4], &[10, 1, 3], &[5, 1, 2]);
    (teacher, student)
}

fn micro_wave(rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let len = rng.gen_range(60..90);
    Tensor::uniform(&[1, len], 0.9, rng)
}

fn model_case(seed: u64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (_, cfg) = micro_pair(seed);
    let store = random_store(&cfg.param_defs(), &mut rng)?;
    let model = Model::from_parts(cfg, store.clone())?;
    let wave = micro_wave(&mut rng);
    let layer = rng.gen_range(1..=model.config.num_layers);
    let target_len = model.config.frames_for(wave.shape()[1])?;
    check_case(
        "student_encoder_head",
        seed,
        &store,
        &[wave],
        2,
        &|g, s, x| {
            let m = Model::from_parts(model.config.clone(), s.clone())?;
            let out = m.encoder_forward(g, x[0])?;
            m.prediction_head_forward(g, layer, out.hidden[layer - 1], target_len)
        },
    )
}

fn distill_case(seed: u64) -> Result<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (tcfg, scfg) = micro_pair(seed);
    let teacher =
        Model::from_parts(tcfg.clone(), random_store(&tcfg.param_defs(), &mut rng)?)?.freeze();
    let store = random_store(&scfg.param_defs(), &mut rng)?;
    let wave = micro_wave(&mut rng);
    let clip = WaveClip::new("probe", wave.data().to_vec())?;
    let targets = crate::distill::teacher_targets(&teacher, &clip)?;
    let n = scfg.num_layers;
    let selected: Vec<usize> = (1..n).filter(|_| rng.gen_bool(0.7)).collect();
    let lambda = rng.gen_range(0.0..1.0);

    let model = Model::from_parts(scfg.clone(), store.clone())?;
    let (_, grads) = clip_loss_and_grads(&model, &clip, &targets, &selected, lambda)?;
    let mut analytic: Vec<Option<Tensor<f64>>> = vec![None; store.len()];
    for (id, g) in grads.params() {
        match &mut analytic[id] {
            Some(acc) => acc
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(a, b)| *a += b),
            slot => *slot = Some(g.clone()),
        }
    }
    let loss = |s: &ParamStore<f64>| -> Result<f64> {
        let m = Model::from_parts(scfg.clone(), s.clone())?;
        Ok(clip_loss_and_grads(&m, &clip, &targets, &selected, lambda)?
            .0
            .l_kd)
    };
    let mut worst = 0.0f64;
    let mut probes = 0;
    for id in 0..store.len() {
        let p = store.by_id(id);
        let a = analytic[id]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(p.value.shape()));
        let idx =
            rand::seq::index::sample(&mut rng, p.value.numel(), 2.min(p.value.numel())).into_vec();
        probes += idx.len();
        let mut work = store.clone();
        let mut f = |t: &Tensor<f64>| {
            work.by_id_mut(id).value = t.clone();
            loss(&work)
        };
        for (j, num) in finite_diff_at(&mut f, &p.value, DEFAULT_STEP, idx)? {
            worst = worst.max(rel_err(a.data()[j], num));
        }
    }
    Ok(CaseResult {
        name: "distill_step".into(),
        seed,
        probes,
        max_rel_err: worst,
    })
}
