//! Neural building blocks shared by the teacher and student encoders.
//!
//! Sequence layouts: convolutions consume channel-major `[channels × L]`,
//! everything transformer-side consumes time-major `[L × d]`. Each layer is
//! a plain struct of graph handles, so a test can bind arbitrary weights
//! with [`Graph::input`] while models bind them from a [`ParamStore`].

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Init, ParamDef, ParamStore};
use crate::tensor::{Element, Graph, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Output length of a valid (unpadded) convolution.
pub fn conv_output_length(len: usize, kernel: usize, stride: usize) -> Result<usize> {
    if kernel == 0 || stride == 0 {
        return Err(Error::arg(
            "conv_output_length",
            "kernel and stride must be ≥ 1",
        ));
    }
    if len < kernel {
        return Err(Error::TooShort {
            op: "conv_output_length",
            len,
            min: kernel,
        });
    }
    Ok((len - kernel) / stride + 1)
}

/// Output length of an unpadded transposed convolution.
pub fn deconv_output_length(len: usize, kernel: usize, stride: usize) -> usize {
    (len - 1) * stride + kernel
}

fn param<T: Element>(
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    prefix: &str,
    leaf: &str,
) -> Result<Var> {
    store.var(g, &format!("{prefix}.{leaf}"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv1dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub bias: bool,
}

impl Conv1dSpec {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.kernel == 0 || self.stride == 0 {
            return Err(Error::Config(format!(
                "conv spec has a zero field: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamDef> {
        let fan_in = self.in_channels * self.kernel;
        let mut defs = vec![ParamDef::new(
            format!("{prefix}.weight"),
            &[self.out_channels, self.in_channels, self.kernel],
            Init::FanIn(fan_in),
        )];
        if self.bias {
            defs.push(ParamDef::new(
                format!("{prefix}.bias"),
                &[self.out_channels],
                Init::FanIn(fan_in),
            ));
        }
        defs
    }

    /// Multiply-accumulates per output frame, times two.
    pub fn flops(&self, in_len: usize) -> Result<u64> {
        let out = conv_output_length(in_len, self.kernel, self.stride)?;
        Ok(2 * (self.out_channels * self.in_channels * self.kernel * out) as u64)
    }
}

/// Valid 1-D convolution over `[in_channels × L]`.
#[derive(Debug, Clone, Copy)]
pub struct Conv1d {
    pub spec: Conv1dSpec,
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Conv1d {
    pub fn bind<T: Element>(
        spec: Conv1dSpec,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prefix: &str,
    ) -> Result<Self> {
        Ok(Self {
            spec,
            weight: param(g, store, prefix, "weight")?,
            bias: if spec.bias {
                Some(param(g, store, prefix, "bias")?)
            } else {
                None
            },
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[0] != self.spec.in_channels {
            return Err(Error::shape("conv1d_forward", s, &[self.spec.in_channels]));
        }
        if s[1] < self.spec.kernel {
            return Err(Error::TooShort {
                op: "conv1d_forward",
                len: s[1],
                min: self.spec.kernel,
            });
        }
        let y = g.conv1d(x, self.weight, self.spec.stride, (0, 0), 1)?;
        match self.bias {
            Some(b) => g.add_broadcast(y, b, 0),
            None => Ok(y),
        }
    }
}

/// Transposed 1-D convolution over `[in_channels × L]`; weight layout
/// `[in_channels × out_channels × kernel]`.
#[derive(Debug, Clone, Copy)]
pub struct ConvTranspose1d {
    pub spec: Conv1dSpec,
    pub weight: Var,
    pub bias: Option<Var>,
}

impl ConvTranspose1d {
    pub fn params(spec: &Conv1dSpec, prefix: &str) -> Vec<ParamDef> {
        let fan_in = spec.in_channels * spec.kernel;
        let mut defs = vec![ParamDef::new(
            format!("{prefix}.weight"),
            &[spec.in_channels, spec.out_channels, spec.kernel],
            Init::FanIn(fan_in),
        )];
        if spec.bias {
            defs.push(ParamDef::new(
                format!("{prefix}.bias"),
                &[spec.out_channels],
                Init::FanIn(fan_in),
            ));
        }
        defs
    }

    pub fn bind<T: Element>(
        spec: Conv1dSpec,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prefix: &str,
    ) -> Result<Self> {
        Ok(Self {
            spec,
            weight: param(g, store, prefix, "weight")?,
            bias: if spec.bias {
                Some(param(g, store, prefix, "bias")?)
            } else {
                None
            },
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[0] != self.spec.in_channels {
            return Err(Error::shape(
                "transposed_conv1d_forward",
                s,
                &[self.spec.in_channels],
            ));
        }
        let y = g.conv_transpose1d(x, self.weight, self.spec.stride)?;
        match self.bias {
            Some(b) => g.add_broadcast(y, b, 0),
            None => Ok(y),
        }
    }
}

/// `y = x·W + b` over `[L × in]`; weight layout `[in × out]`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: Var,
    pub bias: Var,
}

impl Linear {
    pub fn params(prefix: &str, inp: usize, out: usize) -> Vec<ParamDef> {
        vec![
            ParamDef::new(format!("{prefix}.weight"), &[inp, out], Init::FanIn(inp)),
            ParamDef::new(format!("{prefix}.bias"), &[out], Init::FanIn(inp)),
        ]
    }

    pub fn bind<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, prefix: &str) -> Result<Self> {
        Ok(Self {
            weight: param(g, store, prefix, "weight")?,
            bias: param(g, store, prefix, "bias")?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let y = g.matmul(x, self.weight)?;
        g.add_broadcast(y, self.bias, 1)
    }
}

/// Normalization over the last axis followed by a per-feature affine map
/// applied along `affine_axis`. Time-major inputs use `affine_axis = 1`
/// (layer norm); channel-major inputs use `affine_axis = 0`, which
/// normalizes each channel over time (group norm with one channel per
/// group).
#[derive(Debug, Clone, Copy)]
pub struct Norm {
    pub gain: Var,
    pub shift: Var,
    pub affine_axis: usize,
}

impl Norm {
    pub fn params(prefix: &str, dim: usize) -> Vec<ParamDef> {
        vec![
            ParamDef::new(format!("{prefix}.gain"), &[dim], Init::Ones),
            ParamDef::new(format!("{prefix}.shift"), &[dim], Init::Zeros),
        ]
    }

    pub fn bind<T: Element>(
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prefix: &str,
        affine_axis: usize,
    ) -> Result<Self> {
        Ok(Self {
            gain: param(g, store, prefix, "gain")?,
            shift: param(g, store, prefix, "shift")?,
            affine_axis,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let n = g.normalize(x, LAYER_NORM_EPS)?;
        let y = g.mul_broadcast(n, self.gain, self.affine_axis)?;
        g.add_broadcast(y, self.shift, self.affine_axis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionSpec {
    pub model_dim: usize,
    pub num_heads: usize,
}

impl AttentionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.model_dim == 0 || self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamDef> {
        ["q", "k", "v", "out"]
            .iter()
            .flat_map(|p| Linear::params(&format!("{prefix}.{p}"), self.model_dim, self.model_dim))
            .collect()
    }
}

/// Multi-head scaled dot-product self-attention, unmasked.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub spec: AttentionSpec,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn bind<T: Element>(
        spec: AttentionSpec,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prefix: &str,
    ) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            q: Linear::bind(g, store, &format!("{prefix}.q"))?,
            k: Linear::bind(g, store, &format!("{prefix}.k"))?,
            v: Linear::bind(g, store, &format!("{prefix}.v"))?,
            out: Linear::bind(g, store, &format!("{prefix}.out"))?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.forward_with_weights(g, x).map(|(y, _)| y)
    }

    /// Also returns each head's `[L × L]` attention-probability node.
    pub fn forward_with_weights<T: Element>(
        &self,
        g: &mut Graph<T>,
        x: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.spec.model_dim {
            return Err(Error::shape(
                "multi_head_attention_forward",
                s,
                &[self.spec.model_dim],
            ));
        }
        let dh = self.spec.head_dim();
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let mut contexts = Vec::with_capacity(self.spec.num_heads);
        let mut probs = Vec::with_capacity(self.spec.num_heads);
        for h in 0..self.spec.num_heads {
            let qh = g.window(q, 1, h * dh, dh)?;
            let kh = g.window(k, 1, h * dh, dh)?;
            let vh = g.window(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let p = g.softmax(scores, 1)?;
            contexts.push(g.matmul(p, vh)?);
            probs.push(p);
        }
        let ctx = if contexts.len() == 1 {
            contexts[0]
        } else {
            g.concat(&contexts, 1)?
        };
        Ok((self.out.forward(g, ctx)?, probs))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FfnSpec {
    pub model_dim: usize,
    pub inner_dim: usize,
}

impl FfnSpec {
    pub fn params(&self, prefix: &str) -> Vec<ParamDef> {
        let mut defs = Linear::params(&format!("{prefix}.fc1"), self.model_dim, self.inner_dim);
        defs.extend(Linear::params(
            &format!("{prefix}.fc2"),
            self.inner_dim,
            self.model_dim,
        ));
        defs
    }
}

/// `linear(d→inner) → GELU → linear(inner→d)`.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub spec: FfnSpec,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn bind<T: Element>(
        spec: FfnSpec,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prefix: &str,
    ) -> Result<Self> {
        Ok(Self {
            spec,
            fc1: Linear::bind(g, store, &format!("{prefix}.fc1"))?,
            fc2: Linear::bind(g, store, &format!("{prefix}.fc2"))?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.spec.model_dim {
            return Err(Error::shape("ffn_forward", s, &[self.spec.model_dim]));
        }
        let h = self.fc1.forward(g, x)?;
        let h = g.gelu(h)?;
        self.fc2.forward(g, h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PosConvSpec {
    pub model_dim: usize,
    pub kernel: usize,
    pub groups: usize,
}

impl PosConvSpec {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.kernel == 0 || self.model_dim % self.groups != 0 {
            return Err(Error::Config(format!(
                "positional conv: dim {} not divisible by {} groups",
                self.model_dim, self.groups
            )));
        }
        Ok(())
    }

    pub fn params(&self, prefix: &str) -> Vec<ParamDef> {
        let per_group = self.model_dim / self.groups.max(1);
        let fan_in = per_group * self.kernel;
        vec![
            ParamDef::new(
                format!("{prefix}.weight"),
                &[self.model_dim, per_group, self.kernel],
                Init::FanIn(fan_in),
            ),
            ParamDef::new(
                format!("{prefix}.bias"),
                &[self.model_dim],
                Init::FanIn(fan_in),
            ),
        ]
    }

    /// Left/right zero padding giving an output as long as the input.
    pub fn padding(&self) -> (usize, usize) {
        (self.kernel / 2, self.kernel - 1 - self.kernel / 2)
    }
}

/// Grouped same-padded temporal convolution + GELU, added residually.
#[derive(Debug, Clone, Copy)]
pub struct ConvPositionalEmbedding {
    pub spec: PosConvSpec,
    pub weight: Var,
    pub bias: Var,
}

impl ConvPositionalEmbedding {
    pub fn bind<T: Element>(
        spec: PosConvSpec,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prefix: &str,
    ) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            spec,
            weight: param(g, store, prefix, "weight")?,
            bias: param(g, store, prefix, "bias")?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        self.spec.validate()?;
        let s = g.shape(x);
        if s.len() != 2 || s[1] != self.spec.model_dim {
            return Err(Error::shape(
                "conv_positional_embedding_forward",
                s,
                &[self.spec.model_dim],
            ));
        }
        let xt = g.transpose(x)?;
        let c = g.conv1d(xt, self.weight, 1, self.spec.padding(), self.spec.groups)?;
        let c = g.add_broadcast(c, self.bias, 0)?;
        let c = g.gelu(c)?;
        let c = g.transpose(c)?;
        g.add(x, c)
    }
}

/// Pre-norm transformer block: `x + attn(ln₁ x)`, then `x + ffn(ln₂ x)`.
#[derive(Debug, Clone, Copy)]
pub struct TransformerLayer {
    pub ln_attn: Norm,
    pub attn: MultiHeadAttention,
    pub ln_ffn: Norm,
    pub ffn: FeedForward,
}

impl TransformerLayer {
    pub fn params(prefix: &str, attn: &AttentionSpec, ffn: &FfnSpec) -> Vec<ParamDef> {
        let mut defs = Norm::params(&format!("{prefix}.ln_attn"), attn.model_dim);
        defs.extend(attn.params(&format!("{prefix}.attn")));
        defs.extend(Norm::params(&format!("{prefix}.ln_ffn"), attn.model_dim));
        defs.extend(ffn.params(&format!("{prefix}.ffn")));
        defs
    }

    pub fn bind<T: Element>(
        attn: AttentionSpec,
        ffn: FfnSpec,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        prefix: &str,
    ) -> Result<Self> {
        Ok(Self {
            ln_attn: Norm::bind(g, store, &format!("{prefix}.ln_attn"), 1)?,
            attn: MultiHeadAttention::bind(attn, g, store, &format!("{prefix}.attn"))?,
            ln_ffn: Norm::bind(g, store, &format!("{prefix}.ln_ffn"), 1)?,
            ffn: FeedForward::bind(ffn, g, store, &format!("{prefix}.ffn"))?,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let h = self.ln_attn.forward(g, x)?;
        let h = self.attn.forward(g, h)?;
        let x = g.add(x, h)?;
        let h = self.ln_ffn.forward(g, x)?;
        let h = self.ffn.forward(g, h)?;
        g.add(x, h)
    }
}
