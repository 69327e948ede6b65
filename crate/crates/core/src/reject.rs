//! Matched / non-matched classification of face-audio pairs.
//!
//! A linear margin classifier is trained by stochastic subgradient descent on
//! the hinge loss (step 1/(lambda t)) over one of three feature variants:
//!
//! * A - the 1024-d fused feature alone,
//! * B - the 1024-d face feature concatenated with the 75 utterance features,
//! * C - the 1024-d fused feature concatenated with the 75 utterance features.
//!
//! Features are standardized per dimension with statistics from the training
//! set; the transform travels with the model.

use crate::audio::{AudioFeatureVector, AUDIO_FEATURE_DIM};
use crate::error::{Error, Result};
use crate::models::{extract_feature, Model, ModelKind};
use crate::nn::kernels::{dense_row_accumulate, dense_row_finish};
use crate::nn::serialize::{read_param_file, write_param_file, ParamFile};
use crate::nn::LayerParams;
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::path::Path;

/// One face-audio pair with its subject labels. The matched flag is derived
/// from the labels at construction, so it can never disagree with them.
#[derive(Debug, Clone)]
pub struct PairSample {
    pub face_idx: usize,
    pub audio: AudioFeatureVector,
    pub face_subject: usize,
    pub audio_subject: usize,
    matched: bool,
}

impl PairSample {
    pub fn new(
        face_idx: usize,
        audio: AudioFeatureVector,
        face_subject: usize,
        audio_subject: usize,
    ) -> Self {
        PairSample {
            face_idx,
            audio,
            face_subject,
            audio_subject,
            matched: face_subject == audio_subject,
        }
    }

    pub fn matched(&self) -> bool {
        self.matched
    }

    /// +1 matched, -1 non-matched.
    pub fn label(&self) -> f64 {
        if self.matched {
            1.0
        } else {
            -1.0
        }
    }
}

/// Which feature the margin classifier consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectionVariant {
    /// 1024-d fused feature.
    FusedOnly,
    /// 1024-d face feature + 75-d utterance features.
    FaceWithMfcc,
    /// 1024-d fused feature + 75-d utterance features.
    FusedWithMfcc,
}

impl RejectionVariant {
    pub fn dim(self) -> usize {
        match self {
            RejectionVariant::FusedOnly => 1024,
            _ => 1024 + AUDIO_FEATURE_DIM,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            RejectionVariant::FusedOnly => "A",
            RejectionVariant::FaceWithMfcc => "B",
            RejectionVariant::FusedWithMfcc => "C",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(RejectionVariant::FusedOnly),
            "B" | "b" => Ok(RejectionVariant::FaceWithMfcc),
            "C" | "c" => Ok(RejectionVariant::FusedWithMfcc),
            other => Err(Error::Usage(format!("unknown variant {other:?}, expected A, B or C"))),
        }
    }

    fn needs_face_model(self) -> bool {
        self == RejectionVariant::FaceWithMfcc
    }

    fn needs_fused_model(self) -> bool {
        self != RejectionVariant::FaceWithMfcc
    }
}

/// Linear margin classifier with its standardization transform.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginModel {
    pub variant: RejectionVariant,
    pub weights: Vec<f64>,
    pub offset: f64,
    pub lambda: f64,
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl MarginModel {
    /// Raw model with an identity standardization; mostly for tests.
    pub fn raw(variant: RejectionVariant, weights: Vec<f64>, offset: f64) -> Self {
        let dim = weights.len();
        MarginModel {
            variant,
            weights,
            offset,
            lambda: 0.0,
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }
}

/// Signed score `w . z(x) + b` after standardization; positive means matched.
pub fn margin(model: &MarginModel, x: &[f64]) -> Result<f64> {
    if x.len() != model.weights.len() {
        return Err(Error::ShapeMismatch {
            context: "margin feature",
            left: vec![x.len()],
            right: vec![model.weights.len()],
        });
    }
    let mut acc = 0.0;
    for ((&xv, &w), (&m, &s)) in x
        .iter()
        .zip(&model.weights)
        .zip(model.mean.iter().zip(&model.std))
    {
        acc += w * ((xv - m) / s);
    }
    Ok(acc + model.offset)
}

/// Builds labeled pairs: per face, `POSITIVES_PER_FACE` distinct same-subject
/// utterances and `POSITIVES_PER_FACE * negatives_per_positive` non-matched
/// draws with the audio subject uniform over the other subjects.
pub const POSITIVES_PER_FACE: usize = 5;

pub fn make_pair_dataset(
    faces: &[(Tensor, usize)],
    audio_by_subject: &[Vec<AudioFeatureVector>],
    negatives_per_positive: usize,
    seed: u64,
) -> Result<Vec<PairSample>> {
    let n_subjects = audio_by_subject.len();
    if n_subjects < 2 {
        return Err(Error::Data(format!(
            "pair dataset needs at least 2 subjects, got {n_subjects}"
        )));
    }
    for (s, pool) in audio_by_subject.iter().enumerate() {
        if pool.len() < POSITIVES_PER_FACE {
            return Err(Error::Data(format!(
                "subject {s} has {} utterances, need at least {POSITIVES_PER_FACE}",
                pool.len()
            )));
        }
    }
    let mut rng = Rng::new(seed);
    let mut pairs = Vec::with_capacity(faces.len() * POSITIVES_PER_FACE * (1 + negatives_per_positive));
    for (face_idx, (_, subject)) in faces.iter().enumerate() {
        if *subject >= n_subjects {
            return Err(Error::Data(format!(
                "face {face_idx} has subject {subject}, only {n_subjects} known"
            )));
        }
        let pool = &audio_by_subject[*subject];
        // Distinct positives via partial Fisher-Yates.
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        for k in 0..POSITIVES_PER_FACE {
            let j = k + rng.below(idx.len() - k);
            idx.swap(k, j);
            pairs.push(PairSample::new(face_idx, pool[idx[k]].clone(), *subject, *subject));
        }
        // Negatives: audio subject uniform over the others.
        for _ in 0..POSITIVES_PER_FACE * negatives_per_positive {
            let mut other = rng.below(n_subjects - 1);
            if other >= *subject {
                other += 1;
            }
            let pool = &audio_by_subject[other];
            let a = pool[rng.below(pool.len())].clone();
            pairs.push(PairSample::new(face_idx, a, *subject, other));
        }
    }
    Ok(pairs)
}

/// Hinge-loss objective `lambda/2 |w|^2 + mean(max(0, 1 - y (w.x + b)))`
/// over already-standardized features.
pub fn hinge_objective(w: &[f64], b: f64, lambda: f64, features: &[Vec<f64>], labels: &[f64]) -> f64 {
    let mut loss = 0.0;
    for (x, &y) in features.iter().zip(labels) {
        let score: f64 = x.iter().zip(w).map(|(xv, wv)| xv * wv).sum::<f64>() + b;
        loss += (1.0 - y * score).max(0.0);
    }
    let reg: f64 = 0.5 * lambda * w.iter().map(|v| v * v).sum::<f64>();
    reg + loss / features.len() as f64
}

/// Trains the margin classifier by stochastic subgradient descent with step
/// 1/(lambda t). Standardization statistics are computed from `features` and
/// stored in the model. Labels are +1 (matched) / -1 (non-matched); both
/// classes must be present.
pub fn train_margin(
    variant: RejectionVariant,
    features: &[Vec<f64>],
    labels: &[f64],
    lambda: f64,
    epochs: usize,
    seed: u64,
) -> Result<MarginModel> {
    if features.is_empty() || features.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} features vs {} labels",
            features.len(),
            labels.len()
        )));
    }
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::InvalidInput("ragged feature rows".into()));
    }
    if dim != variant.dim() {
        return Err(Error::ShapeMismatch {
            context: "margin training features",
            left: vec![dim],
            right: vec![variant.dim()],
        });
    }
    if labels.iter().any(|&y| y != 1.0 && y != -1.0) {
        return Err(Error::Label("labels must be +1 or -1".into()));
    }
    if !labels.contains(&1.0) || !labels.contains(&-1.0) {
        return Err(Error::Label("both classes must be present".into()));
    }
    if lambda <= 0.0 || epochs == 0 {
        return Err(Error::InvalidInput("lambda and epochs must be positive".into()));
    }

    // Per-dimension z-score from the training set; constant dimensions keep
    // unit scale.
    let n = features.len() as f64;
    let mut mean = vec![0.0; dim];
    for x in features {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut std = vec![0.0; dim];
    for x in features {
        for ((s, v), m) in std.iter_mut().zip(x).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    for s in &mut std {
        *s = (*s / n).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let standardized: Vec<Vec<f64>> = features
        .iter()
        .map(|x| {
            x.iter()
                .zip(mean.iter().zip(&std))
                .map(|(v, (m, s))| (v - m) / s)
                .collect()
        })
        .collect();

    // Stochastic subgradient steps of size 1/(lambda t), returning the
    // average of the second half of the iterates: the early steps are huge
    // and the raw final iterate oscillates, the suffix average settles.
    let mut rng = Rng::new(seed);
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let mut w_sum = vec![0.0; dim];
    let mut b_sum = 0.0;
    let mut averaged = 0u64;
    let total_steps = (features.len() * epochs) as u64;
    let suffix_start = total_steps / 2;
    let mut order: Vec<usize> = (0..features.len()).collect();
    let mut t = 1u64;
    for _ in 0..epochs {
        rng.shuffle(&mut order);
        for &i in &order {
            let eta = 1.0 / (lambda * t as f64);
            let x = &standardized[i];
            let y = labels[i];
            let score: f64 = x.iter().zip(&w).map(|(xv, wv)| xv * wv).sum::<f64>() + b;
            let shrink = 1.0 - eta * lambda;
            if y * score < 1.0 {
                for (wv, xv) in w.iter_mut().zip(x) {
                    *wv = shrink * *wv + eta * y * xv;
                }
                b += eta * y;
            } else {
                for wv in w.iter_mut() {
                    *wv *= shrink;
                }
            }
            if t > suffix_start {
                for (s, wv) in w_sum.iter_mut().zip(&w) {
                    *s += wv;
                }
                b_sum += b;
                averaged += 1;
            }
            t += 1;
        }
    }
    let scale = 1.0 / averaged.max(1) as f64;
    for s in &mut w_sum {
        *s *= scale;
    }
    Ok(MarginModel {
        variant,
        weights: w_sum,
        offset: b_sum * scale,
        lambda,
        mean,
        std,
    })
}

/// Assembles the feature for one pair under the given variant. Network
/// features come first in every concatenation.
pub fn build_variant_feature(
    variant: RejectionVariant,
    face_model: Option<&Model>,
    fused_model: Option<&Model>,
    face: &Tensor,
    audio: &AudioFeatureVector,
) -> Result<Vec<f64>> {
    let mut feature = match variant {
        RejectionVariant::FaceWithMfcc => {
            let model = face_model
                .ok_or_else(|| Error::Usage("variant B needs the face-alone model".into()))?;
            extract_feature(model, face, None)?.data().to_vec()
        }
        RejectionVariant::FusedOnly | RejectionVariant::FusedWithMfcc => {
            let model = fused_model
                .ok_or_else(|| Error::Usage("variants A and C need the fused model".into()))?;
            extract_feature(model, face, Some(audio))?.data().to_vec()
        }
    };
    if variant != RejectionVariant::FusedOnly {
        feature.extend_from_slice(audio.as_slice());
    }
    Ok(feature)
}

/// Bulk feature extraction over a fixed face list. The conv stack and the
/// face rows of the first dense layer are evaluated once per face; each pair
/// then only adds the audio rows and the bias, in the same accumulation order
/// as the full forward pass, so features are bit-identical to
/// [`build_variant_feature`].
pub struct PairFeaturizer<'a> {
    variant: RejectionVariant,
    face_partial: Vec<Vec<f64>>,
    dense1_audio_rows: Option<&'a [f64]>,
    dense1_bias: &'a [f64],
}

impl<'a> PairFeaturizer<'a> {
    pub fn new(
        variant: RejectionVariant,
        face_model: Option<&'a Model>,
        fused_model: Option<&'a Model>,
        faces: &[(Tensor, usize)],
        threads: usize,
    ) -> Result<Self> {
        let model = if variant.needs_face_model() {
            face_model.ok_or_else(|| Error::Usage("variant B needs the face-alone model".into()))?
        } else {
            fused_model.ok_or_else(|| Error::Usage("variants A and C need the fused model".into()))?
        };
        if variant.needs_fused_model() && model.kind != ModelKind::FaceAudio {
            return Err(Error::Usage("fused-feature variants need a fused model".into()));
        }
        if variant.needs_face_model() && model.kind != ModelKind::FaceOnly {
            return Err(Error::Usage("variant B needs a face-alone model".into()));
        }
        let flat = model.arch.conv_flat_dim()?;
        let dense1 = model
            .params
            .layers
            .iter()
            .find_map(|l| match l {
                LayerParams::Dense(p) => Some(p),
                LayerParams::Conv(_) => None,
            })
            .ok_or_else(|| Error::Usage("model has no dense layer".into()))?;
        let out_dim = dense1.out_dim();
        let face_partial = crate::parallel::map_indexed(faces.len(), threads, |i| {
            let flat_features = conv_flat_features(model, &faces[i].0);
            let mut partial = vec![0.0; out_dim];
            dense_row_accumulate(
                &flat_features,
                &dense1.weights.data()[..flat * out_dim],
                out_dim,
                &mut partial,
            );
            partial
        });
        let dense1_audio_rows = (model.arch.aux_dim > 0)
            .then(|| &dense1.weights.data()[flat * out_dim..]);
        Ok(PairFeaturizer {
            variant,
            face_partial,
            dense1_audio_rows,
            dense1_bias: dense1.bias.data(),
        })
    }

    /// Feature vector for the pair (face `face_idx`, `audio`).
    pub fn feature(&self, face_idx: usize, audio: &AudioFeatureVector) -> Result<Vec<f64>> {
        let partial = self
            .face_partial
            .get(face_idx)
            .ok_or_else(|| Error::Usage(format!("face index {face_idx} out of range")))?;
        let mut y = partial.clone();
        if let Some(audio_rows) = self.dense1_audio_rows {
            dense_row_accumulate(audio.as_slice(), audio_rows, y.len(), &mut y);
        }
        dense_row_finish(&mut y, self.dense1_bias, true);
        if self.variant != RejectionVariant::FusedOnly {
            y.extend_from_slice(audio.as_slice());
        }
        Ok(y)
    }
}

/// Flattened rectified conv-stack output of one image.
fn conv_flat_features(model: &Model, image: &Tensor) -> Vec<f64> {
    use crate::nn::kernels;
    let mut current = image.data().to_vec();
    let mut shape = (model.arch.in_channels, model.arch.in_h, model.arch.in_w);
    for layer in &model.params.layers {
        let LayerParams::Conv(cp) = layer else { break };
        let k = cp.kernels.shape();
        let s = kernels::ConvShape {
            in_c: shape.0,
            in_h: shape.1,
            in_w: shape.2,
            out_c: k[0],
            kh: k[2],
            kw: k[3],
        };
        let mut z = vec![0.0; s.conv_len()];
        kernels::conv_forward(&current, cp.kernels.data(), cp.bias.data(), &s, &mut z, 1);
        let mut pooled = vec![0.0; s.pool_len()];
        kernels::relu_avg_pool2(&z, &s, &mut pooled, 1);
        current = pooled.iter().map(|&v| v.max(0.0)).collect();
        shape = (s.out_c, s.pool_h(), s.pool_w());
    }
    current
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Writes the margin model: variant tag, dimension, standardization vectors,
/// weights and offset.
pub fn save_margin_model(model: &MarginModel, path: &Path, extra_meta: &[(String, String)]) -> Result<()> {
    let mut meta = vec![
        ("margin.variant".to_string(), model.variant.tag().to_string()),
        ("margin.dim".to_string(), model.weights.len().to_string()),
        ("margin.lambda".to_string(), format!("{:e}", model.lambda)),
    ];
    meta.extend_from_slice(extra_meta);
    let blocks = vec![
        ("w".to_string(), Tensor::from_vec(model.weights.clone())?),
        ("b".to_string(), Tensor::from_vec(vec![model.offset])?),
        ("mean".to_string(), Tensor::from_vec(model.mean.clone())?),
        ("std".to_string(), Tensor::from_vec(model.std.clone())?),
    ];
    write_param_file(path, &ParamFile { meta, blocks })
}

pub fn load_margin_model(path: &Path) -> Result<MarginModel> {
    let file = read_param_file(path)?;
    let variant = RejectionVariant::parse(
        file.meta_value("margin.variant")
            .ok_or_else(|| Error::Parse("margin file missing variant".into()))?,
    )?;
    let lambda: f64 = file
        .meta_value("margin.lambda")
        .and_then(|v| v.parse().ok())
        .unwrap_or(0.0);
    let get = |name: &str| {
        file.block(name)
            .map(|t| t.data().to_vec())
            .ok_or_else(|| Error::Parse(format!("margin file missing block {name}")))
    };
    let weights = get("w")?;
    let offset = get("b")?[0];
    let mean = get("mean")?;
    let std = get("std")?;
    if weights.len() != variant.dim() || mean.len() != weights.len() || std.len() != weights.len() {
        return Err(Error::Parse(format!(
            "margin file dimensions disagree with variant {}",
            variant.tag()
        )));
    }
    Ok(MarginModel {
        variant,
        weights,
        offset,
        lambda,
        mean,
        std,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn margin_arithmetic() {
        let zero = MarginModel::raw(RejectionVariant::FusedOnly, vec![0.0; 1024], 0.0);
        let x = vec![0.7; 1024];
        assert_eq!(margin(&zero, &x).unwrap(), 0.0);

        let mut w = vec![0.0; 1024];
        w[0] = 1.0;
        w[1] = 1.0;
        let m = MarginModel::raw(RejectionVariant::FusedOnly, w, -1.0);
        let mut x = vec![0.0; 1024];
        x[0] = 1.0;
        x[1] = 1.0;
        assert!((margin(&m, &x).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn margin_is_linear_in_scaling() {
        let m = MarginModel::raw(RejectionVariant::FusedOnly, (0..1024).map(|i| (i % 7) as f64 * 0.1).collect(), 0.4);
        let x: Vec<f64> = (0..1024).map(|i| ((i * 13) % 11) as f64 * 0.01).collect();
        let base = margin(&m, &x).unwrap() - 0.4;
        for alpha in [0.0, 0.5, 2.0, -1.5] {
            let scaled: Vec<f64> = x.iter().map(|v| v * alpha).collect();
            let got = margin(&m, &scaled).unwrap() - 0.4;
            assert!((got - alpha * base).abs() < 1e-9);
        }
    }

    #[test]
    fn margin_rejects_dimension_mismatch() {
        let m = MarginModel::raw(RejectionVariant::FusedOnly, vec![1.0; 1024], 0.0);
        assert!(margin(&m, &[1.0; 10]).is_err());
    }

    #[test]
    fn variant_dims() {
        assert_eq!(RejectionVariant::FusedOnly.dim(), 1024);
        assert_eq!(RejectionVariant::FaceWithMfcc.dim(), 1099);
        assert_eq!(RejectionVariant::FusedWithMfcc.dim(), 1099);
        assert_eq!(RejectionVariant::parse("C").unwrap(), RejectionVariant::FusedWithMfcc);
        assert!(RejectionVariant::parse("D").is_err());
    }

    /// Separable blobs around (2,2) and (-2,-2) in the first two dimensions,
    /// zero-padded to the requested feature width.
    fn blob_features(seed: u64, n_per_class: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut rng = Rng::new(seed);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for i in 0..2 * n_per_class {
            let y = if i % 2 == 0 { 1.0 } else { -1.0 };
            let c = 2.0 * y;
            let mut x = vec![0.0; dim];
            x[0] = c + rng.gaussian() * 0.3;
            x[1] = c + rng.gaussian() * 0.3;
            features.push(x);
            labels.push(y);
        }
        (features, labels)
    }

    #[test]
    fn separable_blobs_reach_full_training_accuracy() {
        let (features, labels) = blob_features(1, 50, 1024);
        let model = train_margin(RejectionVariant::FusedOnly, &features, &labels, 1e-2, 50, 2)
            .unwrap();
        let correct = features
            .iter()
            .zip(&labels)
            .filter(|(x, &y)| margin(&model, x).unwrap() * y > 0.0)
            .count();
        assert_eq!(correct, 100);
    }

    #[test]
    fn label_flip_negates_every_decision() {
        let (features, labels) = blob_features(3, 30, 1024);
        let flipped: Vec<f64> = labels.iter().map(|y| -y).collect();
        let a = train_margin(RejectionVariant::FusedOnly, &features, &labels, 1e-2, 30, 4).unwrap();
        let b = train_margin(RejectionVariant::FusedOnly, &features, &flipped, 1e-2, 30, 4).unwrap();
        for x in &features {
            let sa = margin(&a, x).unwrap();
            let sb = margin(&b, x).unwrap();
            assert!(
                sa.signum() == -sb.signum() || (sa.abs() < 1e-9 && sb.abs() < 1e-9),
                "margins {sa} and {sb} should have opposite signs"
            );
        }
    }

    #[test]
    fn objective_halves_on_separable_data() {
        let (features, labels) = blob_features(5, 50, 1024);
        // Standardize the same way training does, to evaluate the objective
        // in the model's own coordinates.
        let model = train_margin(RejectionVariant::FusedOnly, &features, &labels, 1e-2, 50, 6).unwrap();
        let standardized: Vec<Vec<f64>> = features
            .iter()
            .map(|x| {
                x.iter()
                    .zip(model.mean.iter().zip(&model.std))
                    .map(|(v, (m, s))| (v - m) / s)
                    .collect()
            })
            .collect();
        let start = hinge_objective(&vec![0.0; 1024], 0.0, 1e-2, &standardized, &labels);
        let end = hinge_objective(&model.weights, model.offset, 1e-2, &standardized, &labels);
        assert!(
            end <= 0.5 * start,
            "objective went {start} -> {end}, expected at least a halving"
        );
    }

    #[test]
    fn single_class_is_label_error() {
        let features = vec![vec![1.0; 1024]; 10];
        let labels = vec![1.0; 10];
        assert!(matches!(
            train_margin(RejectionVariant::FusedOnly, &features, &labels, 1e-3, 5, 1),
            Err(Error::Label(_))
        ));
    }

    #[test]
    fn margin_training_deterministic() {
        let (features, labels) = blob_features(9, 40, 1099);
        let a = train_margin(RejectionVariant::FusedWithMfcc, &features, &labels, 1e-2, 8, 10).unwrap();
        let b = train_margin(RejectionVariant::FusedWithMfcc, &features, &labels, 1e-2, 8, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn pair_dataset_construction_contracts() {
        let mut rng = Rng::new(12);
        let faces: Vec<(Tensor, usize)> = (0..6)
            .map(|i| (Tensor::from_vec(vec![rng.uniform()]).unwrap(), i % 3))
            .collect();
        let audio: Vec<Vec<AudioFeatureVector>> = (0..3)
            .map(|_| {
                (0..6)
                    .map(|_| {
                        let mut v = [0.0; 75];
                        for e in v.iter_mut() {
                            *e = rng.uniform();
                        }
                        AudioFeatureVector::new(v).unwrap()
                    })
                    .collect()
            })
            .collect();
        let pairs = make_pair_dataset(&faces, &audio, 1, 13).unwrap();
        assert_eq!(pairs.len(), 6 * 5 * 2);
        for p in &pairs {
            if p.matched() {
                assert_eq!(p.face_subject, p.audio_subject);
            } else {
                assert_ne!(p.face_subject, p.audio_subject);
            }
        }
        let positives = pairs.iter().filter(|p| p.matched()).count();
        assert_eq!(positives, pairs.len() - positives);
    }

    #[test]
    fn negative_subjects_uniform_chi_square() {
        // 10k negative draws for faces of subject 0 over 5 other subjects;
        // chi-square with 4 degrees of freedom at the 0.01 level is 13.277.
        let mut rng = Rng::new(14);
        let faces: Vec<(Tensor, usize)> = (0..1000)
            .map(|_| (Tensor::from_vec(vec![rng.uniform()]).unwrap(), 0))
            .collect();
        let audio: Vec<Vec<AudioFeatureVector>> = (0..6)
            .map(|_| {
                (0..5)
                    .map(|_| AudioFeatureVector::new([0.5; 75]).unwrap())
                    .collect()
            })
            .collect();
        let pairs = make_pair_dataset(&faces, &audio, 2, 15).unwrap();
        let mut counts = [0usize; 6];
        for p in pairs.iter().filter(|p| !p.matched()) {
            counts[p.audio_subject] += 1;
        }
        assert_eq!(counts[0], 0);
        let total: usize = counts.iter().sum();
        assert_eq!(total, 10_000);
        let expected = total as f64 / 5.0;
        let chi2: f64 = counts[1..]
            .iter()
            .map(|&c| {
                let d = c as f64 - expected;
                d * d / expected
            })
            .sum();
        assert!(chi2 < 13.277, "chi-square {chi2} fails uniformity at 0.01");
    }

    #[test]
    fn margin_model_file_round_trip() {
        let dir = std::env::temp_dir().join("sn-margin-tests");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("margin.bin");
        let (features, labels) = blob_features(20, 30, 1099);
        let model = train_margin(RejectionVariant::FusedWithMfcc, &features, &labels, 1e-3, 5, 21).unwrap();
        save_margin_model(&model, &path, &[("seed".into(), "21".into())]).unwrap();
        let loaded = load_margin_model(&path).unwrap();
        assert_eq!(model, loaded);
    }
}
