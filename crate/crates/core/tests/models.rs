//! Architecture arithmetic, warm-start contracts and training behavior of
//! the face-alone and face-audio models.

use sn_core::audio::AudioFeatureVector;
use sn_core::models::{
    self, build_face_model, build_fused_model, count_parameters, extract_feature, face_arch,
    fused_arch, predict_identity, train, validate_architecture, Model, ModelKind, TrainSample,
    TrainingConfig,
};
use sn_core::nn::{self, ArchSpec, ConvSpec, LayerParams, WeightInit};
use sn_core::rng::Rng;
use sn_core::tensor::Tensor;

/// Hand-computed per-layer parameter counts for six classes.
///
///   conv1:  48 * (3*15*15)  + 48   =    32,448
///   conv2:  256 * (48*5*4)  + 256  =   246,016
///   dense1: 8960 * 1024     + 1024 = 9,176,064   (face)
///           9035 * 1024     + 1024 = 9,252,864   (fused)
///   dense2: 1024 * 2048     + 2048 = 2,099,200
///   output: 2048 * 6        + 6    =    12,294
const FACE_LAYER_COUNTS: [usize; 5] = [32_448, 246_016, 9_176_064, 2_099_200, 12_294];
const FUSED_LAYER_COUNTS: [usize; 5] = [32_448, 246_016, 9_252_864, 2_099_200, 12_294];

fn random_face(rng: &mut Rng) -> Tensor {
    Tensor::new(
        vec![3, 50, 40],
        (0..3 * 50 * 40).map(|_| rng.uniform()).collect(),
    )
    .unwrap()
}

fn random_audio(rng: &mut Rng) -> AudioFeatureVector {
    let mut values = [0.0; 75];
    for v in values.iter_mut() {
        *v = rng.range(-2.0, 2.0);
    }
    // Standard-deviation blocks must be non-negative.
    for v in values[25..].iter_mut() {
        *v = v.abs();
    }
    AudioFeatureVector::new(values).unwrap()
}

#[test]
fn face_shape_pipeline() {
    let arch = face_arch(6);
    assert_eq!(arch.conv_output_shapes().unwrap(), vec![(48, 18, 13), (256, 7, 5)]);
    assert_eq!(arch.conv_flat_dim().unwrap(), 8960);
    assert_eq!(
        arch.dense_dims().unwrap(),
        vec![(8960, 1024), (1024, 2048), (2048, 6)]
    );
}

#[test]
fn fused_dense_input_is_9035() {
    let arch = fused_arch(6);
    assert_eq!(arch.dense_dims().unwrap()[0], (9035, 1024));
}

#[test]
fn face_parameter_count_exact() {
    let model = build_face_model(6, 1).unwrap();
    let summary = models::layer_summary(&model);
    for ((_, _, count), expected) in summary.iter().zip(FACE_LAYER_COUNTS) {
        assert_eq!(*count, expected);
    }
    assert_eq!(count_parameters(&model), FACE_LAYER_COUNTS.iter().sum::<usize>());
    assert_eq!(count_parameters(&model), 11_566_022);
    assert!(count_parameters(&model) > 11_000_000);
}

#[test]
fn fused_parameter_count_exact() {
    let model = build_fused_model(6, 1, None).unwrap();
    let summary = models::layer_summary(&model);
    for ((_, _, count), expected) in summary.iter().zip(FUSED_LAYER_COUNTS) {
        assert_eq!(*count, expected);
    }
    assert_eq!(count_parameters(&model), 11_642_822);
    assert!(count_parameters(&model) > 11_000_000);
}

#[test]
fn face_forward_is_probability_vector() {
    let model = build_face_model(6, 3).unwrap();
    let mut rng = Rng::new(10);
    let face = random_face(&mut rng);
    let (label, probs) = predict_identity(&model, &face, None).unwrap();
    assert_eq!(probs.len(), 6);
    assert!(label < 6);
    let sum: f64 = probs.iter().sum();
    assert!((sum - 1.0).abs() < 1e-12);
    // The label is the argmax with lowest-index tie-breaking.
    assert!(probs.iter().all(|&p| p <= probs[label]));
}

#[test]
fn architecture_validation_rejects_non_increasing_hidden() {
    let bad = ArchSpec {
        hidden: vec![2048, 1024],
        ..face_arch(6)
    };
    assert!(validate_architecture(&bad).is_err());
    let equal = ArchSpec {
        hidden: vec![1024, 1024],
        ..face_arch(6)
    };
    assert!(validate_architecture(&equal).is_err());
    assert!(validate_architecture(&face_arch(6)).is_ok());
}

#[test]
fn warm_start_copies_blocks_bitwise() {
    let face = build_face_model(6, 11).unwrap();
    let fused = build_fused_model(6, 12, Some(&face)).unwrap();
    for (f, g) in face.params.layers.iter().zip(&fused.params.layers) {
        match (f, g) {
            (LayerParams::Conv(a), LayerParams::Conv(b)) => {
                assert_eq!(a, b);
            }
            (LayerParams::Dense(a), LayerParams::Dense(b)) => {
                if a.in_dim() == b.in_dim() {
                    assert_eq!(a, b);
                } else {
                    let shared = a.in_dim() * a.out_dim();
                    for (x, y) in a.weights.data().iter().zip(&b.weights.data()[..shared]) {
                        assert_eq!(x.to_bits(), y.to_bits());
                    }
                    assert_eq!(a.bias, b.bias);
                    // The fresh audio rows are not all zero.
                    assert!(b.weights.data()[shared..].iter().any(|&v| v != 0.0));
                }
            }
            _ => panic!("layer kinds diverge"),
        }
    }
}

#[test]
fn warm_start_rejects_class_mismatch() {
    let face = build_face_model(5, 11).unwrap();
    assert!(build_fused_model(6, 12, Some(&face)).is_err());
}

#[test]
fn zeroed_audio_rows_reproduce_face_scores_bitwise() {
    let face = build_face_model(6, 21).unwrap();
    let mut fused = build_fused_model(6, 22, Some(&face)).unwrap();
    models::zero_audio_weights(&mut fused).unwrap();
    let mut rng = Rng::new(5);
    for _ in 0..20 {
        let img = random_face(&mut rng);
        let audio = random_audio(&mut rng);
        let pf = models::class_probabilities(&face, &img, None).unwrap();
        let pg = models::class_probabilities(&fused, &img, Some(&audio)).unwrap();
        for (a, b) in pf.iter().zip(&pg) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}

#[test]
fn extract_feature_is_1024_nonnegative_deterministic() {
    let model = build_fused_model(6, 31, None).unwrap();
    let mut rng = Rng::new(6);
    let img = random_face(&mut rng);
    let audio = random_audio(&mut rng);
    let f1 = extract_feature(&model, &img, Some(&audio)).unwrap();
    let f2 = extract_feature(&model, &img, Some(&audio)).unwrap();
    assert_eq!(f1.len(), 1024);
    assert!(f1.data().iter().all(|&v| v >= 0.0));
    assert_eq!(f1, f2);
}

#[test]
fn extract_feature_audio_mismatch_is_usage_error() {
    let face = build_face_model(6, 1).unwrap();
    let fused = build_fused_model(6, 1, None).unwrap();
    let mut rng = Rng::new(7);
    let img = random_face(&mut rng);
    let audio = random_audio(&mut rng);
    assert!(extract_feature(&face, &img, Some(&audio)).is_err());
    assert!(extract_feature(&fused, &img, None).is_err());
}

// --- toy-model training behavior -----------------------------------------

fn toy_arch(aux: usize) -> ArchSpec {
    ArchSpec {
        in_channels: 1,
        in_h: 8,
        in_w: 8,
        aux_dim: aux,
        conv: vec![ConvSpec { out_maps: 2, kh: 3, kw: 3 }],
        hidden: vec![6, 8],
        n_classes: 3,
        init: WeightInit::TruncatedGaussian,
    }
}

fn toy_model(aux: usize, seed: u64) -> Model {
    let arch = toy_arch(aux);
    Model {
        kind: if aux == 0 { ModelKind::FaceOnly } else { ModelKind::FaceAudio },
        params: nn::init_params(&arch, seed).unwrap(),
        arch,
    }
}

fn toy_dataset(n: usize, seed: u64) -> Vec<TrainSample> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|i| {
            let label = i % 3;
            // Class-dependent blob location makes the set separable.
            let data: Vec<f64> = (0..64)
                .map(|p| {
                    let (y, x) = (p / 8, p % 8);
                    let lit = match label {
                        0 => y < 3,
                        1 => x < 3,
                        _ => y >= 5 && x >= 5,
                    };
                    if lit { 0.9 + 0.1 * rng.uniform() } else { 0.1 * rng.uniform() }
                })
                .collect();
            TrainSample {
                image: Tensor::new(vec![1, 8, 8], data).unwrap(),
                audio: None,
                label,
            }
        })
        .collect()
}

#[test]
fn train_with_zero_lr_keeps_parameters() {
    let mut model = toy_model(0, 1);
    let snapshot = model.params.clone();
    let data = toy_dataset(12, 2);
    let cfg = TrainingConfig {
        lr: 0.0,
        momentum: 0.0,
        epochs: 2,
        batch_size: 4,
        seed: 3,
        threads: 1,
    };
    train(&mut model, &data, &cfg).unwrap();
    assert_eq!(model.params, snapshot);
}

#[test]
fn train_empty_dataset_errors() {
    let mut model = toy_model(0, 1);
    assert!(train(&mut model, &[], &TrainingConfig::default()).is_err());
}

#[test]
fn train_epoch1_loss_near_ln_nclasses() {
    // With a tiny learning rate the first epoch stays at the near-uniform
    // softmax of a fresh model.
    let mut model = toy_model(0, 4);
    let data = toy_dataset(30, 5);
    let cfg = TrainingConfig {
        lr: 1e-4,
        momentum: 0.0,
        epochs: 1,
        batch_size: 8,
        seed: 6,
        threads: 1,
    };
    let history = train(&mut model, &data, &cfg).unwrap();
    let ln3 = 3f64.ln();
    assert!(
        (history[0] - ln3).abs() / ln3 < 0.10,
        "epoch-1 loss {} vs ln 3 {}",
        history[0],
        ln3
    );
}

#[test]
fn train_learns_separable_toy_set() {
    let mut model = toy_model(0, 7);
    let data = toy_dataset(60, 8);
    let cfg = TrainingConfig {
        lr: 0.1,
        momentum: 0.9,
        epochs: 30,
        batch_size: 10,
        seed: 9,
        threads: 2,
    };
    let history = train(&mut model, &data, &cfg).unwrap();
    let acc = models::evaluate_accuracy(&model, &data, 2).unwrap();
    assert!(acc >= 0.95, "train accuracy {acc}");
    assert!(history.last().unwrap() < &history[0]);
}

#[test]
fn train_deterministic_and_thread_invariant() {
    let data = toy_dataset(24, 11);
    let run = |threads: usize| {
        let mut model = toy_model(0, 12);
        let cfg = TrainingConfig {
            lr: 0.1,
            momentum: 0.9,
            epochs: 3,
            batch_size: 5,
            seed: 13,
            threads,
        };
        let history = train(&mut model, &data, &cfg).unwrap();
        (model.params, history)
    };
    let (p1, h1) = run(1);
    let (p3, h3) = run(3);
    assert_eq!(p1, p3);
    assert_eq!(h1, h3);
}

#[test]
fn batched_training_gradient_matches_per_sample_backward() {
    // One batch of the optimized training path must produce exactly the same
    // update as summing single-sample backward passes.
    let data = toy_dataset(6, 14);
    let mut batched = toy_model(0, 15);
    let cfg = TrainingConfig {
        lr: 0.2,
        momentum: 0.0,
        epochs: 1,
        batch_size: 6,
        seed: 16,
        threads: 2,
    };
    train(&mut batched, &data, &cfg).unwrap();

    // Reference: accumulate per-sample gradients by hand, then one SGD step.
    let mut reference = toy_model(0, 15);
    let mut order: Vec<usize> = (0..6).collect();
    Rng::new(16).shuffle(&mut order);
    let mut grads = nn::GradientSet::zeros_like(&reference.params);
    for &si in &order {
        let trace = nn::forward_pass(&reference.params, &data[si].image, None, 1).unwrap();
        let res = nn::backward_pass(&reference.params, &trace, data[si].label, 1).unwrap();
        let mut g = res.grads;
        g.scale(1.0 / 6.0);
        for (acc, add) in grads.layers.iter_mut().zip(&g.layers) {
            match (acc, add) {
                (
                    nn::LayerGrad::Conv { kernels: ka, bias: ba },
                    nn::LayerGrad::Conv { kernels: kb, bias: bb },
                ) => {
                    for (a, b) in ka.iter_mut().zip(kb) {
                        *a += b;
                    }
                    for (a, b) in ba.iter_mut().zip(bb) {
                        *a += b;
                    }
                }
                (
                    nn::LayerGrad::Dense { weights: wa, bias: ba },
                    nn::LayerGrad::Dense { weights: wb, bias: bb },
                ) => {
                    for (a, b) in wa.iter_mut().zip(wb) {
                        *a += b;
                    }
                    for (a, b) in ba.iter_mut().zip(bb) {
                        *a += b;
                    }
                }
                _ => panic!(),
            }
        }
    }
    nn::sgd_step(&mut reference.params, &grads, 0.2).unwrap();

    for (a, b) in batched.params.layers.iter().zip(&reference.params.layers) {
        let (wa, ba, wb, bb) = match (a, b) {
            (LayerParams::Conv(x), LayerParams::Conv(y)) => (&x.kernels, &x.bias, &y.kernels, &y.bias),
            (LayerParams::Dense(x), LayerParams::Dense(y)) => (&x.weights, &x.bias, &y.weights, &y.bias),
            _ => panic!(),
        };
        for (x, y) in wa.data().iter().zip(wb.data()) {
            assert!((x - y).abs() < 1e-13, "weight {x} vs {y}");
        }
        for (x, y) in ba.data().iter().zip(bb.data()) {
            assert!((x - y).abs() < 1e-13, "bias {x} vs {y}");
        }
    }
}

#[test]
fn fused_toy_training_runs_with_audio() {
    let mut rng = Rng::new(17);
    let mut model = toy_model(75, 18);
    let data: Vec<TrainSample> = (0..12)
        .map(|i| {
            let img = Tensor::new(
                vec![1, 8, 8],
                (0..64).map(|_| rng.uniform()).collect(),
            )
            .unwrap();
            TrainSample {
                image: img,
                audio: Some(random_audio(&mut rng)),
                label: i % 3,
            }
        })
        .collect();
    let cfg = TrainingConfig {
        lr: 0.05,
        momentum: 0.0,
        epochs: 2,
        batch_size: 4,
        seed: 19,
        threads: 1,
    };
    let history = train(&mut model, &data, &cfg).unwrap();
    assert_eq!(history.len(), 2);
    assert!(history.iter().all(|l| l.is_finite()));
}

#[test]
fn model_save_load_round_trip_bitwise() {
    let dir = std::env::temp_dir().join("sn-model-tests");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("toy.model");
    let model = toy_model(0, 20);
    // Toy archs cannot be persisted (load reconstructs the named face/fused
    // architectures), so exercise the real face model here.
    let face = build_face_model(6, 23).unwrap();
    models::save_model(&face, &path, &[("seed".into(), "23".into())]).unwrap();
    let loaded = models::load_model(&path).unwrap();
    assert_eq!(loaded.kind, ModelKind::FaceOnly);
    assert_eq!(loaded.arch, face.arch);
    assert_eq!(loaded.params, face.params);
    drop(model);
}

#[test]
fn pairing_rule_builds_five_per_face() {
    let mut rng = Rng::new(24);
    let faces: Vec<(Tensor, usize)> = (0..4)
        .map(|i| {
            (
                Tensor::new(vec![1, 2, 2], vec![rng.uniform(); 4]).unwrap(),
                i % 2,
            )
        })
        .collect();
    let audio: Vec<Vec<AudioFeatureVector>> = (0..2)
        .map(|_| (0..8).map(|_| random_audio(&mut rng)).collect())
        .collect();
    let pairs = models::pair_faces_with_audio(&faces, &audio, 5, 25).unwrap();
    assert_eq!(pairs.len(), 20);
    for (fi, chunk) in pairs.chunks(5).enumerate() {
        let subject = faces[fi].1;
        // Same-subject pairing, five distinct utterances.
        let mut seen = Vec::new();
        for s in chunk {
            assert_eq!(s.label, subject);
            let bits: Vec<u64> = s.audio.as_ref().unwrap().as_slice().iter().map(|v| v.to_bits()).collect();
            assert!(!seen.contains(&bits), "duplicate utterance for one face");
            seen.push(bits);
        }
    }
    // Too few utterances per subject is a data error.
    let short: Vec<Vec<AudioFeatureVector>> =
        vec![vec![random_audio(&mut rng); 3], vec![random_audio(&mut rng); 8]];
    assert!(models::pair_faces_with_audio(&faces, &short, 5, 26).is_err());
}

#[test]
fn training_loss_non_increasing_after_first_epoch() {
    // Within a 5% tolerance band, epoch losses on the separable toy set only
    // go down after epoch one.
    let mut model = toy_model(0, 40);
    let data = toy_dataset(60, 41);
    let cfg = TrainingConfig {
        lr: 0.1,
        momentum: 0.9,
        epochs: 12,
        batch_size: 10,
        seed: 42,
        threads: 2,
    };
    let history = train(&mut model, &data, &cfg).unwrap();
    for pair in history[1..].windows(2) {
        assert!(
            pair[1] <= pair[0] * 1.05,
            "loss rose beyond the band: {} -> {} (history {history:?})",
            pair[0],
            pair[1]
        );
    }
}
