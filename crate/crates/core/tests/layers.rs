use fhkd::checks::{run_suite, Suite};
use fhkd::layers::{
    conv_output_length, AttentionSpec, ConvPositionalEmbedding, FeedForward, FfnSpec, Linear,
    MultiHeadAttention, Norm, PosConvSpec,
};
use fhkd::model::presets::{STUDENT_KERNELS, STUDENT_STRIDES, TEACHER_KERNELS, TEACHER_STRIDES};
use fhkd::params::{ParamDef, ParamStore};
use fhkd::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn store(defs: &[ParamDef], seed: u64) -> ParamStore {
    let mut r = rng(seed);
    let mut s = ParamStore::new();
    for d in defs {
        s.insert(
            d.name.clone(),
            Tensor::<f64>::uniform(&d.shape, 0.8, &mut r),
        )
        .unwrap();
    }
    s
}

fn w<'a>(s: &'a ParamStore, name: &str) -> &'a [f64] {
    s.get(name).unwrap().value.data()
}

/// `x·W + b` by explicit loops, `x: [rows × din]`, `W: [din × dout]`.
fn linear(x: &[f64], rows: usize, din: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let dout = bias.len();
    let mut y = vec![0.0; rows * dout];
    for r in 0..rows {
        for o in 0..dout {
            let mut acc = bias[o];
            for i in 0..din {
                acc += x[r * din + i] * weight[i * dout + o];
            }
            y[r * dout + o] = acc;
        }
    }
    y
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn attention_oracle(s: &ParamStore, x: &[f64], l: usize, d: usize, heads: usize) -> Vec<f64> {
    let q = linear(x, l, d, w(s, "a.q.weight"), w(s, "a.q.bias"));
    let k = linear(x, l, d, w(s, "a.k.weight"), w(s, "a.k.bias"));
    let v = linear(x, l, d, w(s, "a.v.weight"), w(s, "a.v.bias"));
    let dh = d / heads;
    let mut ctx = vec![0.0; l * d];
    for h in 0..heads {
        for i in 0..l {
            let scores: Vec<f64> = (0..l)
                .map(|j| {
                    (0..dh)
                        .map(|c| q[i * d + h * dh + c] * k[j * d + h * dh + c])
                        .sum::<f64>()
                        / (dh as f64).sqrt()
                })
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..dh {
                ctx[i * d + h * dh + c] = (0..l).map(|j| e[j] / z * v[j * d + h * dh + c]).sum();
            }
        }
    }
    linear(&ctx, l, d, w(s, "a.out.weight"), w(s, "a.out.bias"))
}

#[test]
fn attention_matches_direct_formula() {
    let (l, d, heads) = (4, 8, 2);
    let spec = AttentionSpec {
        model_dim: d,
        num_heads: heads,
    };
    let s = store(&spec.params("a"), 1);
    let x = Tensor::<f64>::uniform(&[l, d], 1.0, &mut rng(2));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = MultiHeadAttention::bind(spec, &mut g, &s, "a")
        .unwrap()
        .forward(&mut g, xv)
        .unwrap();
    assert_eq!(g.shape(y), &[l, d]);
    assert!(
        max_diff(
            g.value(y).data(),
            &attention_oracle(&s, x.data(), l, d, heads)
        ) <= 1e-10
    );
}

#[test]
fn attention_single_frame_and_uniform_rows() {
    let spec = AttentionSpec {
        model_dim: 6,
        num_heads: 3,
    };
    let s = store(&spec.params("a"), 3);
    let mut g = Graph::new();
    let attn = MultiHeadAttention::bind(spec, &mut g, &s, "a").unwrap();
    let x1 = g.constant(Tensor::<f64>::uniform(&[1, 6], 1.0, &mut rng(4)));
    let (_, probs) = attn.forward_with_weights(&mut g, x1).unwrap();
    assert!(probs.iter().all(|&p| g.value(p).data() == [1.0]));

    let row = Tensor::<f64>::uniform(&[6], 1.0, &mut rng(5));
    let rows: Vec<f64> = (0..5).flat_map(|_| row.data().to_vec()).collect();
    let x = g.constant(Tensor::from_vec(&[5, 6], rows).unwrap());
    let (_, probs) = attn.forward_with_weights(&mut g, x).unwrap();
    for p in probs {
        assert!(g.value(p).data().iter().all(|&v| (v - 0.2).abs() <= 1e-15));
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let (l, d) = (5, 4);
    let spec = AttentionSpec {
        model_dim: d,
        num_heads: 2,
    };
    let s = store(&spec.params("a"), 6);
    let x = Tensor::<f64>::uniform(&[l, d], 1.0, &mut rng(7));
    let perm = [3, 0, 4, 1, 2];
    let xp: Vec<f64> = perm
        .iter()
        .flat_map(|&i| x.data()[i * d..(i + 1) * d].to_vec())
        .collect();
    let mut g = Graph::new();
    let attn = MultiHeadAttention::bind(spec, &mut g, &s, "a").unwrap();
    let (a, b) = (
        g.constant(x.clone()),
        g.constant(Tensor::from_vec(&[l, d], xp).unwrap()),
    );
    let ya = attn.forward(&mut g, a).unwrap();
    let yb = attn.forward(&mut g, b).unwrap();
    let ya_perm: Vec<f64> = perm
        .iter()
        .flat_map(|&i| g.value(ya).data()[i * d..(i + 1) * d].to_vec())
        .collect();
    assert!(max_diff(&ya_perm, g.value(yb).data()) <= 1e-12);
}

#[test]
fn ffn_matches_explicit_composition() {
    let spec = FfnSpec {
        model_dim: 6,
        inner_dim: 5,
    };
    let s = store(&spec.params("f"), 8);
    let x = Tensor::<f64>::uniform(&[3, 6], 2.0, &mut rng(9));
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = FeedForward::bind(spec, &mut g, &s, "f")
        .unwrap()
        .forward(&mut g, xv)
        .unwrap();
    let h: Vec<f64> = linear(x.data(), 3, 6, w(&s, "f.fc1.weight"), w(&s, "f.fc1.bias"))
        .into_iter()
        .map(gelu)
        .collect();
    let direct = linear(&h, 3, 5, w(&s, "f.fc2.weight"), w(&s, "f.fc2.bias"));
    assert!(max_diff(g.value(y).data(), &direct) <= 1e-10);
}

#[test]
fn ffn_with_zero_second_stage_is_zero() {
    let spec = FfnSpec {
        model_dim: 4,
        inner_dim: 4,
    };
    let mut s = ParamStore::new();
    s.insert("f.fc1.weight", Tensor::<f64>::eye(4)).unwrap();
    s.insert("f.fc1.bias", Tensor::zeros(&[4])).unwrap();
    s.insert("f.fc2.weight", Tensor::zeros(&[4, 4])).unwrap();
    s.insert("f.fc2.bias", Tensor::zeros(&[4])).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::<f64>::uniform(&[3, 4], 5.0, &mut rng(10)));
    let y = FeedForward::bind(spec, &mut g, &s, "f")
        .unwrap()
        .forward(&mut g, x)
        .unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_moments_and_degenerate_cases() {
    let d = 7;
    let mut s = store(&Norm::params("n", d), 11);
    s.get_mut("n.gain").unwrap().value = Tensor::full(&[d], 1.0);
    s.get_mut("n.shift").unwrap().value = Tensor::zeros(&[d]);
    let x = Tensor::<f64>::uniform(&[4, d], 10.0, &mut rng(12)).map(|v| v + 10.0);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let y = Norm::bind(&mut g, &s, "n", 1)
        .unwrap()
        .forward(&mut g, xv)
        .unwrap();
    for row in g.value(y).data().chunks(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        assert!(mean.abs() <= 1e-10);
        assert!((var - 1.0).abs() <= 1e-6, "{var}");
    }
    let c = g.constant(Tensor::full(&[2, d], 3.3));
    let y = Norm::bind(&mut g, &s, "n", 1)
        .unwrap()
        .forward(&mut g, c)
        .unwrap();
    assert!(g.value(y).data().iter().all(|&v| v.abs() <= 1e-12));

    s.get_mut("n.gain").unwrap().value = Tensor::zeros(&[d]);
    let shift = Tensor::<f64>::uniform(&[d], 1.0, &mut rng(13));
    s.get_mut("n.shift").unwrap().value = shift.clone();
    let y = Norm::bind(&mut g, &s, "n", 1)
        .unwrap()
        .forward(&mut g, xv)
        .unwrap();
    for row in g.value(y).data().chunks(d) {
        assert_eq!(row, shift.data());
    }
}

fn pos_conv_oracle(s: &ParamStore, x: &[f64], l: usize, spec: PosConvSpec) -> Vec<f64> {
    let d = spec.model_dim;
    let per = d / spec.groups;
    let k = spec.kernel;
    let (pad_left, _) = spec.padding();
    let (wt, b) = (w(s, "p.weight"), w(s, "p.bias"));
    let mut y = x.to_vec();
    for grp in 0..spec.groups {
        for oc in 0..per {
            let o = grp * per + oc;
            for t in 0..l {
                let mut acc = b[o];
                for ic in 0..per {
                    for j in 0..k {
                        let pos = t as isize + j as isize - pad_left as isize;
                        if pos >= 0 && (pos as usize) < l {
                            acc +=
                                wt[(o * per + ic) * k + j] * x[pos as usize * d + grp * per + ic];
                        }
                    }
                }
                y[t * d + o] += gelu(acc);
            }
        }
    }
    y
}

#[test]
fn positional_conv_matches_per_group_loops() {
    for (l, kernel, groups) in [(9, 4, 2), (5, 3, 3), (7, 8, 6), (1, 4, 2)] {
        let spec = PosConvSpec {
            model_dim: 6,
            kernel,
            groups,
        };
        let s = store(&spec.params("p"), 14);
        let x = Tensor::<f64>::uniform(&[l, 6], 1.0, &mut rng(15));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = ConvPositionalEmbedding::bind(spec, &mut g, &s, "p")
            .unwrap()
            .forward(&mut g, xv)
            .unwrap();
        assert_eq!(g.shape(y), &[l, 6]);
        assert!(max_diff(g.value(y).data(), &pos_conv_oracle(&s, x.data(), l, spec)) <= 1e-10);
    }
}

#[test]
fn positional_conv_zero_weights_pass_through_and_keeps_length() {
    let spec = PosConvSpec {
        model_dim: 8,
        kernel: 128,
        groups: 4,
    };
    let mut s = ParamStore::new();
    s.insert("p.weight", Tensor::<f64>::zeros(&[8, 2, 128]))
        .unwrap();
    s.insert("p.bias", Tensor::zeros(&[8])).unwrap();
    for l in [1, 7, 49] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::<f64>::uniform(&[l, 8], 1.0, &mut rng(l as u64)));
        let y = ConvPositionalEmbedding::bind(spec, &mut g, &s, "p")
            .unwrap()
            .forward(&mut g, x)
            .unwrap();
        assert_eq!(g.value(y), g.value(x));
    }
    let bad = PosConvSpec {
        model_dim: 8,
        kernel: 3,
        groups: 3,
    };
    assert!(bad.validate().is_err());
}

#[test]
fn linear_shapes() {
    let s = store(&Linear::params("l", 3, 2), 16);
    let mut g = Graph::new();
    let lin = Linear::bind(&mut g, &s, "l").unwrap();
    let x = g.constant(Tensor::<f64>::zeros(&[4, 3]));
    let y = lin.forward(&mut g, x).unwrap();
    assert_eq!(g.shape(y), &[4, 2]);
    let bad = g.constant(Tensor::<f64>::zeros(&[4, 2]));
    assert_eq!(lin.forward(&mut g, bad).unwrap_err().code(), "E_SHAPE");
}

#[test]
fn cnn_length_recurrences() {
    assert_eq!(conv_output_length(16_000, 10, 5).unwrap(), 3199);
    let chain = |ks: &[usize], ss: &[usize]| {
        let mut v = vec![16_000];
        for (&k, &s) in ks.iter().zip(ss) {
            v.push(conv_output_length(*v.last().unwrap(), k, s).unwrap());
        }
        v
    };
    assert_eq!(
        chain(&STUDENT_KERNELS, &STUDENT_STRIDES),
        [16000, 3199, 3199, 1599, 799, 399, 199, 199, 99, 49]
    );
    assert_eq!(
        *chain(&TEACHER_KERNELS, &TEACHER_STRIDES).last().unwrap(),
        49
    );
    assert_eq!(
        conv_output_length(9, 10, 5).unwrap_err().code(),
        "E_TOO_SHORT"
    );
}

#[test]
fn layer_gradients_agree_with_finite_differences() {
    let report = run_suite(Suite::Layers, 20).unwrap();
    assert!(report.passed(), "worst {:.3e}", report.worst());
    let report = run_suite(Suite::Ops, 20).unwrap();
    assert!(report.passed(), "worst {:.3e}", report.worst());
}
