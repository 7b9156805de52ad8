//! Teacher and student encoders.
//!
//! Pipeline: CNN feature extractor → layer norm + linear projection →
//! time-reduction (students with `k > 1`) → convolutional positional
//! embedding → `N` pre-norm transformer layers. Every layer output
//! `h^(l)` is recorded. Students additionally carry per-layer prediction
//! heads (transposed conv + linear) mapping `h^(l)` onto the teacher's
//! length and width.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{
    Conv1d, ConvPositionalEmbedding, ConvTranspose1d, Linear, Norm, TransformerLayer,
};
use crate::params::ParamStore;
use crate::tensor::{Element, Graph, Tensor, Var};

mod config;
pub mod presets;

pub use config::{ModelConfig, ParamCounts};
pub use presets::preset;

/// Per-layer hidden states from one encoder pass.
#[derive(Debug, Clone)]
pub struct LayerOutputs {
    /// `hidden[l − 1]` is `h^(l)`, shape `[L × model_dim]`.
    pub hidden: Vec<Var>,
    /// Time-major CNN output, `[frames × cnn_out_channels]`.
    pub features: Var,
}

#[derive(Debug, Clone)]
pub struct Model<T: Element = f64> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    frozen: bool,
}

/// Builds `config` with parameters drawn from a generator seeded by `seed`.
pub fn build_model(config: &ModelConfig, seed: u64) -> Result<Model<f64>> {
    Model::build(config, seed)
}

impl<T: Element> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for def in config.param_defs() {
            let value = def.materialize(&mut rng);
            params.insert(def.name, value)?;
        }
        Ok(Self {
            config: config.clone(),
            params,
            frozen: false,
        })
    }

    /// Reassembles a model from stored tensors, checking them against the
    /// config's layout.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let defs = config.param_defs();
        if defs.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameters, found {}",
                defs.len(),
                params.len()
            )));
        }
        for def in &defs {
            let p = params
                .get(&def.name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", def.name)))?;
            if p.value.shape() != def.shape.as_slice() {
                return Err(Error::shape("from_parts", p.value.shape(), &def.shape));
            }
        }
        Ok(Self {
            config,
            params,
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Marks every parameter constant; frozen models never receive
    /// gradients.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self.params.set_requires_grad(false);
        self.params.zero_grad();
        self
    }

    pub fn count_parameters(&self) -> ParamCounts {
        let is_head = |name: &str| name.starts_with("heads.");
        let total = self.params.numel();
        let heads: usize = self
            .params
            .iter()
            .filter(|p| is_head(&p.name))
            .map(|p| p.value.numel())
            .sum();
        let last_prefix = format!("heads.{}.", self.config.num_layers);
        let last: usize = self
            .params
            .iter()
            .filter(|p| p.name.starts_with(&last_prefix))
            .map(|p| p.value.numel())
            .sum();
        ParamCounts {
            total,
            without_heads: total - heads,
            last_head_only: total - heads + last,
        }
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            frozen: self.frozen,
        }
    }

    /// Copies every same-named, same-shaped parameter from `other`;
    /// returns how many were copied.
    pub fn copy_shared_from(&mut self, other: &Model<T>) -> usize {
        let mut copied = 0;
        for p in self.params.iter_mut() {
            if let Some(src) = other.params.get(&p.name) {
                if src.value.shape() == p.value.shape() {
                    p.value = src.value.clone();
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Sets every head to the exact identity map (identity deconvolution
    /// and linear stage, zero biases). Requires `k = 1` and heads whose
    /// output width equals `model_dim`.
    pub fn set_heads_to_identity(&mut self) -> Result<()> {
        let d = self.config.model_dim;
        if self.config.time_reduction != 1 || self.config.head_target_dim != Some(d) {
            return Err(Error::Config(
                "identity heads need k = 1 and head_target_dim = model_dim".into(),
            ));
        }
        for l in self.config.heads.clone() {
            let eye = Tensor::eye(d);
            self.set(
                &format!("heads.{l}.deconv.weight"),
                eye.reshape(&[d, d, 1])?,
            )?;
            self.set(&format!("heads.{l}.deconv.bias"), Tensor::zeros(&[d]))?;
            self.set(&format!("heads.{l}.fc.weight"), eye)?;
            self.set(&format!("heads.{l}.fc.bias"), Tensor::zeros(&[d]))?;
        }
        Ok(())
    }

    fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let p = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    /// Places a `[1 × L]` waveform on `g`.
    pub fn wave_input(&self, g: &mut Graph<T>, samples: &[T]) -> Result<Var> {
        Ok(g.constant(Tensor::from_vec(&[1, samples.len()], samples.to_vec())?))
    }

    /// CNN stack (conv → [per-channel norm on layer 0] → GELU), returned
    /// time-major as `[frames × channels]`.
    pub fn feature_extractor_forward(&self, g: &mut Graph<T>, wave: Var) -> Result<Var> {
        let s = g.shape(wave);
        if s.len() != 2 || s[0] != 1 {
            return Err(Error::shape("feature_extractor_forward", s, &[1]));
        }
        let len = s[1];
        let min = self.config.min_input_len();
        if len < min {
            return Err(Error::TooShort {
                op: "feature_extractor_forward",
                len,
                min,
            });
        }
        let mut x = wave;
        for (i, spec) in self.config.cnn.iter().enumerate() {
            let conv = Conv1d::bind(*spec, g, &self.params, &format!("cnn.{i}"))?;
            x = conv.forward(g, x)?;
            if i == 0 {
                x = Norm::bind(g, &self.params, "cnn.0.norm", 0)?.forward(g, x)?;
            }
            x = g.gelu(x)?;
        }
        g.transpose(x)
    }

    /// Strided temporal convolution (kernel = stride = k) over `[L × d]`;
    /// identity when `k = 1`.
    pub fn time_reduction_forward(&self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        let Some(spec) = self.config.time_reduction_spec() else {
            return Ok(x);
        };
        let len = g.shape(x)[0];
        if len < spec.kernel {
            return Err(Error::TooShort {
                op: "time_reduction_forward",
                len,
                min: spec.kernel,
            });
        }
        let conv = Conv1d::bind(spec, g, &self.params, "time_reduction")?;
        let xt = g.transpose(x)?;
        let y = conv.forward(g, xt)?;
        g.transpose(y)
    }

    pub fn encoder_forward(&self, g: &mut Graph<T>, wave: Var) -> Result<LayerOutputs> {
        let features = self.feature_extractor_forward(g, wave)?;
        let x = Norm::bind(g, &self.params, "proj.norm", 1)?.forward(g, features)?;
        let x = Linear::bind(g, &self.params, "proj.linear")?.forward(g, x)?;
        let x = self.time_reduction_forward(g, x)?;
        let pos =
            ConvPositionalEmbedding::bind(self.config.pos_conv(), g, &self.params, "pos_conv")?;
        let x = pos.forward(g, x)?;
        let mut x = Norm::bind(g, &self.params, "enc_norm", 1)?.forward(g, x)?;
        let (attn, ffn) = (self.config.attention(), self.config.ffn());
        let mut hidden = Vec::with_capacity(self.config.num_layers);
        for l in 1..=self.config.num_layers {
            let layer = TransformerLayer::bind(attn, ffn, g, &self.params, &format!("layers.{l}"))?;
            x = layer.forward(g, x)?;
            hidden.push(x);
        }
        Ok(LayerOutputs { hidden, features })
    }

    /// Maps `h^(layer)` (`[L_S × model_dim]`) to `[target_len × head_target_dim]`:
    /// transposed conv (kernel = stride = k), linear, then truncation or
    /// right zero-padding along time.
    pub fn prediction_head_forward(
        &self,
        g: &mut Graph<T>,
        layer: usize,
        h: Var,
        target_len: usize,
    ) -> Result<Var> {
        if !self.config.has_head(layer) {
            return Err(Error::MissingHead(layer));
        }
        let s = g.shape(h);
        if s.len() != 2 || s[1] != self.config.model_dim {
            return Err(Error::shape(
                "prediction_head_forward",
                s,
                &[self.config.model_dim],
            ));
        }
        let deconv = ConvTranspose1d::bind(
            self.config.head_deconv_spec(),
            g,
            &self.params,
            &format!("heads.{layer}.deconv"),
        )?;
        let fc = Linear::bind(g, &self.params, &format!("heads.{layer}.fc"))?;
        let ht = g.transpose(h)?;
        let up = deconv.forward(g, ht)?;
        let up = g.transpose(up)?;
        let y = fc.forward(g, up)?;
        g.resize(y, 0, target_len)
    }

    /// Keeps only the layer-N head, as used for fine-tuning.
    pub fn strip_heads_for_finetuning(&self) -> Result<Self> {
        let last = self.config.num_layers;
        if self.config.heads.is_empty() {
            return Err(Error::Config(format!(
                "{} has no prediction heads",
                self.config.name
            )));
        }
        if !self.config.has_head(last) {
            return Err(Error::MissingHead(last));
        }
        let mut out = self.clone();
        out.config.heads = vec![last];
        let keep = format!("heads.{last}.");
        out.params
            .remove_where(|name| name.starts_with("heads.") && !name.starts_with(&keep));
        Ok(out)
    }

    /// Encoder forward without gradient bookkeeping; returns the hidden
    /// states as tensors.
    pub fn infer(&self, samples: &[T]) -> Result<Vec<Tensor<T>>> {
        let mut g = Graph::new();
        let wave = self.wave_input(&mut g, samples)?;
        let out = self.encoder_forward(&mut g, wave)?;
        Ok(out.hidden.iter().map(|&h| g.value(h).clone()).collect())
    }
}
