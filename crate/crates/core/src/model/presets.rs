//! Named architectures: the teacher, the thin-and-deep student, the CNN
//! and time-reduction ablation variants, and two toy-sized configs used
//! by the desk-scale training runs.

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::Conv1dSpec;

pub const STUDENT: &str = "student-fithubert";
pub const TEACHER_HUBERT: &str = "teacher-hubert-base";
pub const TEACHER_W2V2: &str = "teacher-w2v2-base";
pub const TOY_TEACHER: &str = "toy-teacher";
pub const TOY_STUDENT: &str = "toy-student";

pub const PRESET_NAMES: &[&str] = &[
    STUDENT,
    TEACHER_HUBERT,
    TEACHER_W2V2,
    "table2-no-pointwise",
    "table2-fixed-256",
    "table2-fixed-512",
    "table4-k1",
    "table4-k2",
    "table4-k3",
    TOY_TEACHER,
    TOY_STUDENT,
];

pub const STUDENT_CHANNELS: [usize; 9] = [128, 256, 256, 256, 256, 256, 512, 512, 512];
pub const STUDENT_KERNELS: [usize; 9] = [10, 1, 3, 3, 3, 3, 1, 2, 2];
pub const STUDENT_STRIDES: [usize; 9] = [5, 1, 2, 2, 2, 2, 1, 2, 2];
pub const TEACHER_KERNELS: [usize; 7] = [10, 3, 3, 3, 3, 2, 2];
pub const TEACHER_STRIDES: [usize; 7] = [5, 2, 2, 2, 2, 2, 2];

/// Chains `(channels, kernel, stride)` triples into bias-free conv specs
/// starting from a mono waveform.
pub fn cnn_stack(channels: &[usize], kernels: &[usize], strides: &[usize]) -> Vec<Conv1dSpec> {
    assert!(channels.len() == kernels.len() && kernels.len() == strides.len());
    let mut in_channels = 1;
    channels
        .iter()
        .zip(kernels)
        .zip(strides)
        .map(|((&out_channels, &kernel), &stride)| {
            let spec = Conv1dSpec {
                in_channels,
                out_channels,
                kernel,
                stride,
                bias: false,
            };
            in_channels = out_channels;
            spec
        })
        .collect()
}

pub fn student() -> ModelConfig {
    ModelConfig {
        name: STUDENT.into(),
        model_dim: 480,
        ffn_inner_dim: 480,
        num_layers: 12,
        num_heads: 12,
        time_reduction: 2,
        pos_conv_kernel: 128,
        pos_conv_groups: 16,
        head_target_dim: Some(768),
        heads: (1..=12).collect(),
        cnn: cnn_stack(&STUDENT_CHANNELS, &STUDENT_KERNELS, &STUDENT_STRIDES),
    }
}

pub fn teacher_hubert_base() -> ModelConfig {
    ModelConfig {
        name: TEACHER_HUBERT.into(),
        model_dim: 768,
        ffn_inner_dim: 3072,
        num_layers: 12,
        num_heads: 12,
        time_reduction: 1,
        pos_conv_kernel: 128,
        pos_conv_groups: 16,
        head_target_dim: None,
        heads: Vec::new(),
        cnn: cnn_stack(&[512; 7], &TEACHER_KERNELS, &TEACHER_STRIDES),
    }
}

fn student_variant(name: &str, f: impl FnOnce(&mut ModelConfig)) -> ModelConfig {
    let mut cfg = student();
    cfg.name = name.into();
    f(&mut cfg);
    cfg
}

/// Small teacher for training runs: the full-size CNN geometry (total
/// stride 320) at 16 channels, 4 transformer layers at width 32.
pub fn toy_teacher() -> ModelConfig {
    ModelConfig {
        name: TOY_TEACHER.into(),
        model_dim: 32,
        ffn_inner_dim: 64,
        num_layers: 4,
        num_heads: 4,
        time_reduction: 1,
        pos_conv_kernel: 8,
        pos_conv_groups: 4,
        head_target_dim: None,
        heads: Vec::new(),
        cnn: cnn_stack(&[16; 7], &TEACHER_KERNELS, &TEACHER_STRIDES),
    }
}

/// Student counterpart of [`toy_teacher`]: channel-increasing CNN with a
/// pointwise layer, equal attention/FFN width 16, k = 2, heads on every
/// layer.
pub fn toy_student() -> ModelConfig {
    ModelConfig {
        name: TOY_STUDENT.into(),
        model_dim: 16,
        ffn_inner_dim: 16,
        num_layers: 4,
        num_heads: 2,
        time_reduction: 2,
        pos_conv_kernel: 8,
        pos_conv_groups: 4,
        head_target_dim: Some(32),
        heads: (1..=4).collect(),
        cnn: cnn_stack(
            &[8, 16, 16, 16, 16, 16, 16, 16],
            &[10, 1, 3, 3, 3, 3, 2, 2],
            &[5, 1, 2, 2, 2, 2, 2, 2],
        ),
    }
}

pub fn preset(name: &str) -> Result<ModelConfig> {
    let cfg = match name {
        STUDENT => student(),
        TEACHER_HUBERT => teacher_hubert_base(),
        TEACHER_W2V2 => {
            let mut cfg = teacher_hubert_base();
            cfg.name = TEACHER_W2V2.into();
            cfg
        }
        "table2-no-pointwise" => student_variant(name, |c| {
            let keep: Vec<usize> = (0..9)
                .filter(|&i| STUDENT_KERNELS[i] != 1 || i == 0)
                .collect();
            let pick = |src: &[usize]| keep.iter().map(|&i| src[i]).collect::<Vec<_>>();
            c.cnn = cnn_stack(
                &pick(&STUDENT_CHANNELS),
                &pick(&STUDENT_KERNELS),
                &pick(&STUDENT_STRIDES),
            );
        }),
        "table2-fixed-256" => student_variant(name, |c| {
            c.cnn = cnn_stack(&[256; 9], &STUDENT_KERNELS, &STUDENT_STRIDES);
        }),
        "table2-fixed-512" => student_variant(name, |c| {
            c.cnn = cnn_stack(&[512; 9], &STUDENT_KERNELS, &STUDENT_STRIDES);
        }),
        "table4-k1" => student_variant(name, |c| c.time_reduction = 1),
        "table4-k2" => student_variant(name, |c| c.time_reduction = 2),
        "table4-k3" => student_variant(name, |c| c.time_reduction = 3),
        TOY_TEACHER => toy_teacher(),
        TOY_STUDENT => toy_student(),
        other => return Err(Error::UnknownPreset(other.to_string())),
    };
    cfg.validate()?;
    Ok(cfg)
}
