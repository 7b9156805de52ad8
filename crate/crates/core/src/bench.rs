//! Analytic FLOP model, inference timing and teacher/student comparison
//! reports.
//!
//! FLOPs count a multiply-accumulate as two operations. Per attention
//! layer over `L` frames at width `d`:
//!
//! ```text
//! projections  4 · 2·L·d²   (q, k, v, out)
//! scores       2·L²·d       (QKᵀ)
//! context      2·L²·d       (softmax · V)
//! ```
//!
//! so `attention_flops = 8·L·d² + 4·L²·d`, whose quadratic part scales
//! exactly with `L²`. Normalizations, activations and softmax are not
//! counted.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use num_integer::Integer;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Element;

pub const DEFAULT_REPEATS: usize = 5;

pub fn attention_flops(seq_len: usize, model_dim: usize, num_heads: usize) -> Result<u64> {
    if seq_len == 0 || num_heads == 0 || !model_dim.is_multiple_of(num_heads) {
        return Err(Error::arg(
            "attention_flops",
            format!("L = {seq_len}, d = {model_dim}, heads = {num_heads}"),
        ));
    }
    let (l, d) = (seq_len as u64, model_dim as u64);
    Ok(8 * l * d * d + attention_quadratic_flops(seq_len, model_dim))
}

/// The score and context matmuls, `4·L²·d`; independent of the head count.
pub fn attention_quadratic_flops(seq_len: usize, model_dim: usize) -> u64 {
    let (l, d) = (seq_len as u64, model_dim as u64);
    4 * l * l * d
}

/// An exact ratio in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ratio {
    pub num: u64,
    pub den: u64,
}

impl Ratio {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if den == 0 {
            return Err(Error::arg("Ratio", "zero denominator"));
        }
        let g = num.gcd(&den).max(1);
        Ok(Self {
            num: num / g,
            den: den / g,
        })
    }

    pub fn value(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.num, self.den)
    }
}

/// Whole-model quadratic attention FLOPs of `a` over `b` for one clip of
/// `samples` samples.
pub fn quadratic_attention_ratio(
    a: &ModelConfig,
    b: &ModelConfig,
    samples: usize,
) -> Result<Ratio> {
    let quad = |c: &ModelConfig| -> Result<u64> {
        Ok(c.num_layers as u64
            * attention_quadratic_flops(c.sequence_len_for(samples)?, c.model_dim))
    };
    Ratio::new(quad(a)?, quad(b)?)
}

/// Per-component forward FLOPs of one model over one clip.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct FlopBreakdown {
    pub cnn: u64,
    pub attention: u64,
    pub attention_quadratic: u64,
    pub ffn: u64,
    /// Projection, time reduction and positional convolution.
    pub other: u64,
    /// All configured prediction heads (distillation only).
    pub heads: u64,
}

impl FlopBreakdown {
    /// Encoder FLOPs, excluding heads.
    pub fn encoder(&self) -> u64 {
        self.cnn + self.attention + self.ffn + self.other
    }

    pub fn add(&mut self, o: &FlopBreakdown) {
        self.cnn += o.cnn;
        self.attention += o.attention;
        self.attention_quadratic += o.attention_quadratic;
        self.ffn += o.ffn;
        self.other += o.other;
        self.heads += o.heads;
    }
}

pub fn model_flops(config: &ModelConfig, samples: usize) -> Result<FlopBreakdown> {
    let mut len = samples;
    let mut cnn = 0;
    for spec in &config.cnn {
        cnn += spec.flops(len)?;
        len = crate::layers::conv_output_length(len, spec.kernel, spec.stride)?;
    }
    let frames = len as u64;
    let d = config.model_dim as u64;
    let mut other = 2 * frames * config.cnn_out_channels() as u64 * d;
    if let Some(spec) = config.time_reduction_spec() {
        other += spec.flops(len)?;
    }
    let seq = config.sequence_len_for(samples)?;
    let l = seq as u64;
    let pos = config.pos_conv();
    other += 2 * l * d * (d / pos.groups as u64) * pos.kernel as u64;
    let n = config.num_layers as u64;
    let per_head = {
        let k = config.time_reduction as u64;
        let target = config.head_target_dim.unwrap_or(config.model_dim) as u64;
        2 * l * d * d * k + 2 * l * k * d * target
    };
    Ok(FlopBreakdown {
        cnn,
        attention: n * attention_flops(seq, config.model_dim, config.num_heads)?,
        attention_quadratic: n * attention_quadratic_flops(seq, config.model_dim),
        ffn: n * 4 * l * d * config.ffn_inner_dim as u64,
        other,
        heads: config.heads.len() as u64 * per_head,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub mean_s: f64,
    pub std_s: f64,
    pub repeats: usize,
}

/// Wall-clock seconds of one encoder pass over every clip (batch size 1),
/// as mean and sample standard deviation over `repeats` timed passes. One
/// untimed warmup pass runs first.
pub fn measure_inference<T: Element>(
    model: &Model<T>,
    clips: &[Vec<T>],
    repeats: usize,
) -> Result<Timing> {
    if clips.is_empty() {
        return Err(Error::arg("measure_inference", "no clips"));
    }
    if repeats < 2 {
        return Err(Error::arg("measure_inference", "need at least 2 repeats"));
    }
    let pass = || -> Result<()> {
        for c in clips {
            std::hint::black_box(model.infer(c)?);
        }
        Ok(())
    };
    pass()?;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = Instant::now();
        pass()?;
        times.push(t.elapsed().as_secs_f64());
    }
    let mean = times.iter().sum::<f64>() / repeats as f64;
    let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (repeats - 1) as f64;
    Ok(Timing {
        mean_s: mean,
        std_s: var.sqrt(),
        repeats,
    })
}

/// One model measured against a reference model on the same clips.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub model: String,
    pub reference: String,
    pub clips: usize,
    pub clip_samples: usize,
    pub repeats: usize,
    pub params_total: usize,
    pub params_without_heads: usize,
    pub params_last_head_only: usize,
    pub reference_params: usize,
    /// `params_last_head_only / reference_params`.
    pub param_ratio: f64,
    pub flops_cnn: u64,
    pub flops_attention: u64,
    pub flops_attention_quadratic: u64,
    pub flops_ffn: u64,
    pub flops_other: u64,
    pub flops_heads: u64,
    pub reference_flops: u64,
    pub mean_s: f64,
    pub std_s: f64,
    pub reference_mean_s: f64,
    pub reference_std_s: f64,
    /// `reference_mean_s / mean_s`.
    pub speedup: f64,
}

/// Column order of the CSV report (one header line, one data line).
pub const REPORT_CSV_HEADER: &str = "model,reference,clips,clip_samples,repeats,params_total,params_without_heads,params_last_head_only,reference_params,param_ratio,flops_cnn,flops_attention,flops_attention_quadratic,flops_ffn,flops_other,flops_heads,reference_flops,mean_s,std_s,reference_mean_s,reference_std_s,speedup";

pub fn speedup_report<T: Element>(
    model: &Model<T>,
    reference: &Model<T>,
    clips: &[Vec<T>],
    repeats: usize,
) -> Result<BenchReport> {
    let flops = |c: &ModelConfig| -> Result<FlopBreakdown> {
        let mut acc = FlopBreakdown::default();
        for clip in clips {
            acc.add(&model_flops(c, clip.len())?);
        }
        Ok(acc)
    };
    let f = flops(&model.config)?;
    let rf = flops(&reference.config)?;
    let timing = measure_inference(model, clips, repeats)?;
    let ref_timing = measure_inference(reference, clips, repeats)?;
    let counts = model.count_parameters();
    let ref_counts = reference.count_parameters();
    Ok(BenchReport {
        model: model.config.name.clone(),
        reference: reference.config.name.clone(),
        clips: clips.len(),
        clip_samples: clips.iter().map(Vec::len).sum(),
        repeats,
        params_total: counts.total,
        params_without_heads: counts.without_heads,
        params_last_head_only: counts.last_head_only,
        reference_params: ref_counts.last_head_only,
        param_ratio: counts.last_head_only as f64 / ref_counts.last_head_only as f64,
        flops_cnn: f.cnn,
        flops_attention: f.attention,
        flops_attention_quadratic: f.attention_quadratic,
        flops_ffn: f.ffn,
        flops_other: f.other,
        flops_heads: f.heads,
        reference_flops: rf.encoder(),
        mean_s: timing.mean_s,
        std_s: timing.std_s,
        reference_mean_s: ref_timing.mean_s,
        reference_std_s: ref_timing.std_s,
        speedup: ref_timing.mean_s / timing.mean_s,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::arg(
                "report format",
                format!("unknown format `{other}` (json, csv)"),
            )),
        }
    }
}

pub fn emit_report(report: &BenchReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).map_err(|e| Error::Parse(e.to_string()))
        }
        ReportFormat::Csv => {
            let mut w = csv::WriterBuilder::new()
                .has_headers(false)
                .from_writer(Vec::new());
            w.write_record(REPORT_CSV_HEADER.split(','))
                .and_then(|_| w.serialize(report))
                .map_err(|e| Error::Parse(e.to_string()))?;
            let bytes = w.into_inner().map_err(|e| Error::Parse(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| Error::Parse(e.to_string()))
        }
    }
}

pub fn parse_report(text: &str, format: ReportFormat) -> Result<BenchReport> {
    match format {
        ReportFormat::Json => serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string())),
        ReportFormat::Csv => {
            let mut r = csv::Reader::from_reader(text.as_bytes());
            let header = r.headers().map_err(|e| Error::Parse(e.to_string()))?;
            if header.iter().collect::<Vec<_>>().join(",") != REPORT_CSV_HEADER {
                return Err(Error::Parse("unexpected CSV header".into()));
            }
            r.deserialize()
                .next()
                .ok_or_else(|| Error::Parse("CSV report has no data row".into()))?
                .map_err(|e| Error::Parse(e.to_string()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_length_one() {
        assert_eq!(attention_quadratic_flops(1, 480), 4 * 480);
        assert_eq!(attention_flops(1, 8, 2).unwrap(), 8 * 64 + 32);
        assert!(attention_flops(0, 8, 2).is_err());
    }

    #[test]
    fn ratio_reduces() {
        let r = Ratio::new(24 * 24, 49 * 49).unwrap();
        assert_eq!((r.num, r.den), (576, 2401));
        assert_eq!(Ratio::new(6, 24).unwrap().to_string(), "1/4");
    }

    #[test]
    fn unknown_format() {
        assert!("xml".parse::<ReportFormat>().is_err());
    }
}
