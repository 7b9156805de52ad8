use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{
    conv_output_length, deconv_output_length, AttentionSpec, Conv1dSpec, ConvTranspose1d, FfnSpec,
    Linear, Norm, PosConvSpec, TransformerLayer,
};
use crate::params::ParamDef;

/// Declarative encoder description shared by teacher and student.
///
/// Layer and head indices are 1-based, matching `h^(1..N)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub model_dim: usize,
    pub ffn_inner_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    /// Time-reduction ratio `k`; 1 means no time-reduction layer.
    pub time_reduction: usize,
    pub pos_conv_kernel: usize,
    pub pos_conv_groups: usize,
    /// Output width of the prediction heads (the teacher's model_dim).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_target_dim: Option<usize>,
    /// Transformer layers carrying a prediction head.
    #[serde(default)]
    pub heads: Vec<usize>,
    pub cnn: Vec<Conv1dSpec>,
}

/// Scalar parameter counts of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub total: usize,
    pub without_heads: usize,
    /// Encoder plus the layer-N head only, i.e. the fine-tuning shape.
    pub last_head_only: usize,
}

impl ModelConfig {
    pub fn attention(&self) -> AttentionSpec {
        AttentionSpec {
            model_dim: self.model_dim,
            num_heads: self.num_heads,
        }
    }

    pub fn ffn(&self) -> FfnSpec {
        FfnSpec {
            model_dim: self.model_dim,
            inner_dim: self.ffn_inner_dim,
        }
    }

    pub fn pos_conv(&self) -> PosConvSpec {
        PosConvSpec {
            model_dim: self.model_dim,
            kernel: self.pos_conv_kernel,
            groups: self.pos_conv_groups,
        }
    }

    pub fn cnn_out_channels(&self) -> usize {
        self.cnn.last().map_or(0, |c| c.out_channels)
    }

    pub fn time_reduction_spec(&self) -> Option<Conv1dSpec> {
        (self.time_reduction > 1).then_some(Conv1dSpec {
            in_channels: self.model_dim,
            out_channels: self.model_dim,
            kernel: self.time_reduction,
            stride: self.time_reduction,
            bias: true,
        })
    }

    /// Deconvolution stage of every prediction head (kernel = stride = k).
    pub fn head_deconv_spec(&self) -> Conv1dSpec {
        Conv1dSpec {
            in_channels: self.model_dim,
            out_channels: self.model_dim,
            kernel: self.time_reduction,
            stride: self.time_reduction,
            bias: true,
        }
    }

    pub fn has_head(&self, layer: usize) -> bool {
        self.heads.contains(&layer)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(format!("{}: {msg}", self.name)));
        if self.num_layers == 0 {
            return fail("num_layers must be ≥ 1".into());
        }
        if self.time_reduction == 0 {
            return fail("time_reduction must be ≥ 1".into());
        }
        if self.ffn_inner_dim == 0 || self.model_dim == 0 {
            return fail("model_dim and ffn_inner_dim must be ≥ 1".into());
        }
        self.attention().validate()?;
        self.pos_conv().validate()?;
        let Some(first) = self.cnn.first() else {
            return fail("empty CNN stack".into());
        };
        if first.in_channels != 1 {
            return fail("first CNN layer must take one input channel".into());
        }
        for (i, pair) in self.cnn.windows(2).enumerate() {
            if pair[0].out_channels != pair[1].in_channels {
                return fail(format!("CNN layer {} input channels do not chain", i + 1));
            }
        }
        for c in &self.cnn {
            c.validate()?;
        }
        if !self.heads.is_empty() && self.head_target_dim.is_none() {
            return fail("prediction heads need head_target_dim".into());
        }
        if let Some(&bad) = self.heads.iter().find(|&&l| l == 0 || l > self.num_layers) {
            return fail(format!("head index {bad} outside 1..={}", self.num_layers));
        }
        let mut sorted = self.heads.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.heads {
            return fail("head indices must be strictly increasing".into());
        }
        Ok(())
    }

    /// Smallest waveform that yields one CNN frame.
    pub fn min_input_len(&self) -> usize {
        self.cnn
            .iter()
            .rev()
            .fold(1, |r, c| (r - 1) * c.stride + c.kernel)
    }

    /// CNN output frames for a waveform of `len` samples.
    pub fn frames_for(&self, len: usize) -> Result<usize> {
        self.cnn
            .iter()
            .try_fold(len, |l, c| conv_output_length(l, c.kernel, c.stride))
            .map_err(|_| Error::TooShort {
                op: "feature_extractor_forward",
                len,
                min: self.min_input_len(),
            })
    }

    /// Transformer sequence length (after time reduction).
    pub fn sequence_len_for(&self, len: usize) -> Result<usize> {
        let frames = self.frames_for(len)?;
        if frames < self.time_reduction {
            return Err(Error::TooShort {
                op: "time_reduction_forward",
                len: frames,
                min: self.time_reduction,
            });
        }
        Ok(frames / self.time_reduction)
    }

    /// Length produced by a head's deconvolution before length matching.
    pub fn head_deconv_len(&self, seq_len: usize) -> usize {
        deconv_output_length(seq_len, self.time_reduction, self.time_reduction)
    }

    fn head_params(&self, layer: usize) -> Vec<ParamDef> {
        let target = self.head_target_dim.unwrap_or(self.model_dim);
        let mut defs =
            ConvTranspose1d::params(&self.head_deconv_spec(), &format!("heads.{layer}.deconv"));
        defs.extend(Linear::params(
            &format!("heads.{layer}.fc"),
            self.model_dim,
            target,
        ));
        defs
    }

    /// Every parameter in construction order.
    pub fn param_defs(&self) -> Vec<ParamDef> {
        let mut defs = Vec::new();
        for (i, c) in self.cnn.iter().enumerate() {
            defs.extend(c.params(&format!("cnn.{i}")));
            if i == 0 {
                defs.extend(Norm::params("cnn.0.norm", c.out_channels));
            }
        }
        defs.extend(Norm::params("proj.norm", self.cnn_out_channels()));
        defs.extend(Linear::params(
            "proj.linear",
            self.cnn_out_channels(),
            self.model_dim,
        ));
        if let Some(tr) = self.time_reduction_spec() {
            defs.extend(tr.params("time_reduction"));
        }
        defs.extend(self.pos_conv().params("pos_conv"));
        defs.extend(Norm::params("enc_norm", self.model_dim));
        let (attn, ffn) = (self.attention(), self.ffn());
        for l in 1..=self.num_layers {
            defs.extend(TransformerLayer::params(
                &format!("layers.{l}"),
                &attn,
                &ffn,
            ));
        }
        for &l in &self.heads {
            defs.extend(self.head_params(l));
        }
        defs
    }

    /// Counts from the layout alone; no parameter memory is allocated.
    pub fn param_counts(&self) -> ParamCounts {
        let numel = |defs: Vec<ParamDef>| defs.iter().map(ParamDef::numel).sum::<usize>();
        let total = numel(self.param_defs());
        let heads: usize = self.heads.iter().map(|&l| numel(self.head_params(l))).sum();
        let without_heads = total - heads;
        let last_head_only = if self.heads.is_empty() {
            without_heads
        } else {
            without_heads + numel(self.head_params(self.num_layers))
        };
        ParamCounts {
            total,
            without_heads,
            last_head_only,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
