use fhkd::model::{build_model, preset, presets, Model, ModelConfig};
use fhkd::{Graph, Tensor};
use proptest::prelude::*;

fn wave(len: usize) -> Vec<f32> {
    (0..len).map(|i| (i as f32 * 0.013).sin() * 0.5).collect()
}

#[test]
fn same_config_and_seed_give_identical_parameters() {
    let cfg = presets::toy_student();
    let a = build_model(&cfg, 11).unwrap();
    let b = build_model(&cfg, 11).unwrap();
    let c = build_model(&cfg, 12).unwrap();
    assert!(a
        .params
        .iter()
        .zip(b.params.iter())
        .all(|(x, y)| x.value == y.value));
    assert!(a
        .params
        .iter()
        .zip(c.params.iter())
        .any(|(x, y)| x.value != y.value));
}

#[test]
fn layout_counts_match_materialized_counts() {
    for name in ["toy-student", "toy-teacher", "table4-k3"] {
        let cfg = preset(name).unwrap();
        let m = build_model(&cfg, 0).unwrap();
        assert_eq!(m.count_parameters(), cfg.param_counts(), "{name}");
    }
}

#[test]
fn single_linear_480_to_768() {
    let defs = fhkd::layers::Linear::params("fc", 480, 768);
    assert_eq!(defs.iter().map(|d| d.numel()).sum::<usize>(), 369_408);
}

#[test]
fn teacher_and_student_counts_near_reference_sizes() {
    let teacher = preset("teacher-hubert-base").unwrap().param_counts();
    assert!(
        (teacher.total as f64 / 94.68e6 - 1.0).abs() <= 0.05,
        "{teacher:?}"
    );
    let w2v2 = preset("teacher-w2v2-base").unwrap().param_counts();
    assert!((w2v2.total as f64 / 95.04e6 - 1.0).abs() <= 0.05);
    let student = preset("student-fithubert").unwrap().param_counts();
    for n in [student.without_heads, student.last_head_only] {
        assert!((n as f64 / 22.49e6 - 1.0).abs() <= 0.10, "{student:?}");
    }
    assert!(student.total > student.last_head_only);
}

#[test]
fn ablation_presets_are_ordered_by_size() {
    let count = |n: &str| preset(n).unwrap().param_counts().last_head_only;
    assert!(count("table4-k1") < count("table4-k2"));
    assert!(count("table4-k2") < count("table4-k3"));
    assert!(count("table2-fixed-256") < count("table2-no-pointwise"));
    assert!(count("table2-no-pointwise") < count("student-fithubert"));
    assert!(count("student-fithubert") < count("table2-fixed-512"));
    assert_eq!(count("table4-k2"), count("student-fithubert"));
}

#[test]
fn one_second_gives_49_frames_for_both_presets() {
    for name in [
        "teacher-hubert-base",
        "student-fithubert",
        "table2-no-pointwise",
    ] {
        assert_eq!(
            preset(name).unwrap().frames_for(16_000).unwrap(),
            49,
            "{name}"
        );
    }
    assert_eq!(
        preset("student-fithubert")
            .unwrap()
            .sequence_len_for(16_000)
            .unwrap(),
        24
    );
    assert_eq!(
        preset("table4-k1")
            .unwrap()
            .sequence_len_for(16_000)
            .unwrap(),
        49
    );
    assert_eq!(
        preset("table4-k3")
            .unwrap()
            .sequence_len_for(16_000)
            .unwrap(),
        16
    );
}

#[test]
fn minimum_input_is_400_samples() {
    for name in ["teacher-hubert-base", "student-fithubert"] {
        let cfg = preset(name).unwrap();
        assert_eq!(cfg.min_input_len(), 400);
        assert_eq!(cfg.frames_for(400).unwrap(), 1);
        assert_eq!(cfg.frames_for(399).unwrap_err().code(), "E_TOO_SHORT");
    }
}

#[test]
fn student_encoder_and_heads_produce_teacher_shapes() {
    let student: Model<f32> = Model::build(&preset("student-fithubert").unwrap(), 1).unwrap();
    let mut g = Graph::new();
    let w = student.wave_input(&mut g, &wave(16_000)).unwrap();
    let out = student.encoder_forward(&mut g, w).unwrap();
    assert_eq!(g.shape(out.features), &[49, 512]);
    assert_eq!(out.hidden.len(), 12);
    for (i, &h) in out.hidden.iter().enumerate() {
        assert_eq!(g.shape(h), &[24, 480]);
        let y = student
            .prediction_head_forward(&mut g, i + 1, h, 49)
            .unwrap();
        assert_eq!(g.shape(y), &[49, 768]);
    }
}

#[test]
fn teacher_encoder_shapes() {
    let teacher: Model<f32> = Model::build(&preset("teacher-hubert-base").unwrap(), 2).unwrap();
    let hidden = teacher.infer(&wave(16_000)).unwrap();
    assert_eq!(hidden.len(), 12);
    assert!(hidden.iter().all(|h| h.shape() == [49, 768]));
}

#[test]
fn k1_variant_keeps_all_frames() {
    let m: Model<f32> = Model::build(&preset("table4-k1").unwrap(), 3).unwrap();
    let hidden = m.infer(&wave(16_000)).unwrap();
    assert!(hidden.iter().all(|h| h.shape() == [49, 480]));
}

#[test]
fn short_input_is_rejected() {
    let m = build_model(&presets::toy_teacher(), 0).unwrap();
    let min = m.config.min_input_len();
    assert!(m.infer(&vec![0.1; min]).is_ok());
    let err = m.infer(&vec![0.1; min - 1]).unwrap_err();
    assert_eq!(err.code(), "E_TOO_SHORT");
}

#[test]
fn time_reduction_lengths() {
    let m = build_model(&presets::toy_student(), 0).unwrap();
    for (len, expect) in [(49, 24), (50, 25), (2, 1)] {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[len, 16], 0.1));
        let y = m.time_reduction_forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[expect, 16]);
    }
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[1, 16], 0.1));
    assert_eq!(
        m.time_reduction_forward(&mut g, x).unwrap_err().code(),
        "E_TOO_SHORT"
    );

    let mut k1 = presets::toy_student();
    k1.time_reduction = 1;
    let m = build_model(&k1, 0).unwrap();
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[7, 16], 0.3));
    assert_eq!(m.time_reduction_forward(&mut g, x).unwrap(), x);
}

#[test]
fn head_lengths_pad_and_truncate() {
    let m = build_model(&presets::toy_student(), 4).unwrap();
    let mut g = Graph::new();
    let h = g.constant(Tensor::full(&[24, 16], 0.2));
    let y = m.prediction_head_forward(&mut g, 2, h, 49).unwrap();
    assert_eq!(g.shape(y), &[49, 32]);
    // the padded row is exactly zero
    assert!(g.value(y).data()[48 * 32..].iter().all(|&v| v == 0.0));
    let y = m.prediction_head_forward(&mut g, 2, h, 40).unwrap();
    assert_eq!(g.shape(y), &[40, 32]);
    assert_eq!(
        m.prediction_head_forward(&mut g, 9, h, 40)
            .unwrap_err()
            .code(),
        "E_HEAD"
    );
}

#[test]
fn strip_heads_keeps_only_the_last() {
    let m = build_model(&presets::toy_student(), 5).unwrap();
    let stripped = m.strip_heads_for_finetuning().unwrap();
    assert_eq!(stripped.config.heads, vec![4]);
    assert!(stripped.count_parameters().total < m.count_parameters().total);
    assert_eq!(
        stripped.count_parameters().total,
        m.count_parameters().last_head_only
    );

    let mut g = Graph::new();
    let h = g.constant(Tensor::full(&[10, 16], 0.7));
    let a = m.prediction_head_forward(&mut g, 4, h, 21).unwrap();
    let b = stripped.prediction_head_forward(&mut g, 4, h, 21).unwrap();
    assert_eq!(g.value(a), g.value(b));
    assert_eq!(
        stripped
            .prediction_head_forward(&mut g, 1, h, 21)
            .unwrap_err()
            .code(),
        "E_HEAD"
    );

    let teacher = build_model(&presets::toy_teacher(), 0).unwrap();
    assert!(teacher.strip_heads_for_finetuning().is_err());
}

#[test]
fn removing_a_layer_changes_the_hidden_count() {
    let mut cfg = presets::toy_teacher();
    let wave: Vec<f64> = (0..800).map(|i| (i as f64 * 0.05).cos()).collect();
    assert_eq!(build_model(&cfg, 0).unwrap().infer(&wave).unwrap().len(), 4);
    cfg.num_layers = 3;
    assert_eq!(build_model(&cfg, 0).unwrap().infer(&wave).unwrap().len(), 3);
}

#[test]
fn config_round_trips_through_toml() {
    for name in fhkd::model::presets::PRESET_NAMES {
        let cfg = preset(name).unwrap();
        let text = cfg.to_toml().unwrap();
        assert_eq!(ModelConfig::from_toml(&text).unwrap(), cfg);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = presets::toy_student();
    cfg.num_heads = 3;
    assert_eq!(build_model(&cfg, 0).unwrap_err().code(), "E_CONFIG");
    let mut cfg = presets::toy_student();
    cfg.time_reduction = 0;
    assert!(build_model(&cfg, 0).is_err());
    let mut cfg = presets::toy_student();
    cfg.heads = vec![5];
    assert!(build_model(&cfg, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn student_and_teacher_frame_counts_agree(len in 400usize..=32_000) {
        let t = preset("teacher-hubert-base").unwrap();
        let s = preset("student-fithubert").unwrap();
        prop_assert_eq!(t.frames_for(len).unwrap(), s.frames_for(len).unwrap());
        let frames = t.frames_for(len).unwrap();
        let s_len = s.sequence_len_for(len).unwrap_or(0);
        if s_len > 0 {
            // head output always reaches the teacher length after matching
            prop_assert!(s.head_deconv_len(s_len) + 1 >= frames);
        }
    }
}
