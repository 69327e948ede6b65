//! Concrete face-alone and face-audio architectures, training, feature taps
//! and identity prediction.
//!
//! The face network takes a 3x50x40 image through two conv blocks (48 maps of
//! 15x15, then 256 maps of 5x4), flattens the resulting 256x7x5 volume to
//! 8960 features, and classifies through dense layers of 1024 and 2048 units
//! and a softmax. The fused network appends the 75 utterance features to the
//! flattened conv output (8960 + 75 = 9035) and is otherwise identical; its
//! 1024-unit hidden activation is the "fused feature" the rejection stage
//! consumes.

use crate::audio::{AudioFeatureVector, AUDIO_FEATURE_DIM};
use crate::error::{Error, Result};
use crate::nn::serialize::{read_param_file, write_param_file, ParamFile};
use crate::nn::{
    self, kernels, ArchSpec, ConvSpec, GradientSet, LayerGrad, LayerParams, ModelParams, Sgd,
    WeightInit,
};
use crate::rng::Rng;
use crate::tensor::Tensor;
use std::path::Path;

/// Face input volume: channels, height, width.
pub const FACE_CHANNELS: usize = 3;
pub const FACE_HEIGHT: usize = 50;
pub const FACE_WIDTH: usize = 40;

/// Flattened conv output feeding the dense stack: 256 * 7 * 5.
pub const CONV_FLAT_DIM: usize = 8960;
/// Fused dense input: conv output plus the 75 audio features.
pub const FUSED_INPUT_DIM: usize = CONV_FLAT_DIM + AUDIO_FEATURE_DIM;
/// Width of the feature tap used by the rejection stage.
pub const FEATURE_DIM: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    FaceOnly,
    FaceAudio,
}

impl ModelKind {
    fn as_str(self) -> &'static str {
        match self {
            ModelKind::FaceOnly => "face",
            ModelKind::FaceAudio => "fused",
        }
    }
}

/// A trained or trainable network plus its architecture description.
#[derive(Debug, Clone)]
pub struct Model {
    pub kind: ModelKind,
    pub arch: ArchSpec,
    pub params: ModelParams,
}

/// Face-alone architecture for `n_classes` identities.
pub fn face_arch(n_classes: usize) -> ArchSpec {
    ArchSpec {
        in_channels: FACE_CHANNELS,
        in_h: FACE_HEIGHT,
        in_w: FACE_WIDTH,
        aux_dim: 0,
        conv: vec![
            ConvSpec { out_maps: 48, kh: 15, kw: 15 },
            ConvSpec { out_maps: 256, kh: 5, kw: 4 },
        ],
        hidden: vec![1024, 2048],
        n_classes,
        init: WeightInit::TruncatedGaussian,
    }
}

/// Face-audio architecture: same conv stack, audio joining at the flatten.
pub fn fused_arch(n_classes: usize) -> ArchSpec {
    ArchSpec {
        aux_dim: AUDIO_FEATURE_DIM,
        ..face_arch(n_classes)
    }
}

/// Rejects any architecture whose interior dense widths do not strictly
/// increase.
pub fn validate_architecture(arch: &ArchSpec) -> Result<()> {
    for pair in arch.hidden.windows(2) {
        if pair[0] >= pair[1] {
            return Err(Error::InvalidInput(format!(
                "interior dense widths must strictly increase, got {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    arch.dense_dims()?;
    Ok(())
}

/// Initialized face-alone model.
pub fn build_face_model(n_classes: usize, seed: u64) -> Result<Model> {
    let arch = face_arch(n_classes);
    validate_architecture(&arch)?;
    Ok(Model {
        kind: ModelKind::FaceOnly,
        params: nn::init_params(&arch, seed)?,
        arch,
    })
}

/// Initialized face-audio model, optionally warm-started from a face-alone
/// model: conv blocks and every dense block are copied bit-exactly except the
/// 75 audio rows of the first dense layer, which keep their fresh draw.
pub fn build_fused_model(n_classes: usize, seed: u64, warm_start: Option<&Model>) -> Result<Model> {
    let arch = fused_arch(n_classes);
    validate_architecture(&arch)?;
    let mut params = nn::init_params(&arch, seed)?;
    if let Some(face) = warm_start {
        if face.kind != ModelKind::FaceOnly {
            return Err(Error::Usage("warm start must be a face-alone model".into()));
        }
        if face.arch != face_arch(n_classes) {
            return Err(Error::Usage(format!(
                "warm-start model does not match the face architecture for {n_classes} classes"
            )));
        }
        for (li, (dst, src)) in params.layers.iter_mut().zip(&face.params.layers).enumerate() {
            match (dst, src) {
                (LayerParams::Conv(d), LayerParams::Conv(s)) => {
                    *d = s.clone();
                }
                (LayerParams::Dense(d), LayerParams::Dense(s)) => {
                    if d.in_dim() == s.in_dim() {
                        *d = s.clone();
                    } else {
                        // First dense layer: copy the 8960 face rows, keep the
                        // fresh 75 audio rows.
                        let face_rows = s.in_dim() * s.out_dim();
                        d.weights.data_mut()[..face_rows].copy_from_slice(s.weights.data());
                        d.bias = s.bias.clone();
                    }
                }
                _ => {
                    return Err(Error::Usage(format!(
                        "warm-start layer {li} kind does not match"
                    )))
                }
            }
        }
    }
    Ok(Model {
        kind: ModelKind::FaceAudio,
        params,
        arch,
    })
}

/// Total number of trainable scalars.
pub fn count_parameters(model: &Model) -> usize {
    model.params.param_count()
}

/// Zeroes the audio input rows of the first dense layer. With a warm-started
/// model this makes the fused forward reproduce the face-alone class scores
/// exactly; used for ablation and the degeneracy checks.
pub fn zero_audio_weights(model: &mut Model) -> Result<()> {
    if model.kind != ModelKind::FaceAudio {
        return Err(Error::Usage("only a fused model has audio rows".into()));
    }
    let flat = model.arch.conv_flat_dim()?;
    let dense1 = model
        .params
        .layers
        .iter_mut()
        .find_map(|l| match l {
            LayerParams::Dense(p) => Some(p),
            LayerParams::Conv(_) => None,
        })
        .ok_or_else(|| Error::Usage("model has no dense layer".into()))?;
    let out = dense1.out_dim();
    let start = flat * out;
    dense1.weights.data_mut()[start..].fill(0.0);
    Ok(())
}

fn check_inputs(model: &Model, face: &Tensor, audio: Option<&AudioFeatureVector>) -> Result<()> {
    let arch = &model.arch;
    if face.shape() != [arch.in_channels, arch.in_h, arch.in_w] {
        return Err(Error::ShapeMismatch {
            context: "face image",
            left: face.shape().to_vec(),
            right: vec![arch.in_channels, arch.in_h, arch.in_w],
        });
    }
    match (model.kind, audio) {
        (ModelKind::FaceOnly, None) => Ok(()),
        (ModelKind::FaceAudio, Some(a)) => {
            if a.as_slice().len() != arch.aux_dim {
                return Err(Error::ShapeMismatch {
                    context: "audio features",
                    left: vec![a.as_slice().len()],
                    right: vec![arch.aux_dim],
                });
            }
            Ok(())
        }
        (ModelKind::FaceOnly, Some(_)) => {
            Err(Error::Usage("audio passed to a face-alone model".into()))
        }
        (ModelKind::FaceAudio, None) => {
            Err(Error::Usage("fused model needs an audio feature vector".into()))
        }
    }
}

/// Class probabilities for one face (plus audio for fused models).
pub fn class_probabilities(
    model: &Model,
    face: &Tensor,
    audio: Option<&AudioFeatureVector>,
) -> Result<Vec<f64>> {
    check_inputs(model, face, audio)?;
    let trace = nn::forward_pass(&model.params, face, audio.map(|a| a.as_slice()), 1)?;
    Ok(trace.probabilities().to_vec())
}

/// The 1024-dimensional hidden activation (first dense layer, rectified):
/// the face feature of a face-alone model or the fused feature of a
/// face-audio model.
pub fn extract_feature(
    model: &Model,
    face: &Tensor,
    audio: Option<&AudioFeatureVector>,
) -> Result<Tensor> {
    check_inputs(model, face, audio)?;
    let trace = nn::forward_pass(&model.params, face, audio.map(|a| a.as_slice()), 1)?;
    let feature = trace
        .dense_output(0)
        .ok_or_else(|| Error::Usage("model has no dense layer".into()))?;
    Tensor::from_vec(feature.to_vec())
}

/// Most probable identity and the full probability vector. Ties break toward
/// the lowest class index.
pub fn predict_identity(
    model: &Model,
    face: &Tensor,
    audio: Option<&AudioFeatureVector>,
) -> Result<(usize, Vec<f64>)> {
    let probs = class_probabilities(model, face, audio)?;
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok((best, probs))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// One labeled training sample: a face image and, for fused models, its
/// paired utterance features.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub image: Tensor,
    pub audio: Option<AudioFeatureVector>,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub seed: u64,
    /// Worker threads for the layer kernels; 0 picks the machine parallelism.
    /// Results are bitwise identical for any value.
    pub threads: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            lr: 0.01,
            batch_size: 64,
            epochs: 5,
            momentum: 0.9,
            seed: 0,
            threads: 0,
        }
    }
}

impl TrainingConfig {
    fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidInput(format!("learning rate {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidInput(
                "batch size and epochs must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidInput(format!("momentum {}", self.momentum)));
        }
        Ok(())
    }

    pub fn resolved_threads(&self) -> usize {
        if self.threads > 0 {
            self.threads
        } else {
            std::thread::available_parallelism().map_or(1, |n| n.get())
        }
    }
}

/// Pairs every face with `per_face` distinct same-subject utterances, the
/// dataset construction for fused training.
pub fn pair_faces_with_audio(
    faces: &[(Tensor, usize)],
    audio_by_subject: &[Vec<AudioFeatureVector>],
    per_face: usize,
    seed: u64,
) -> Result<Vec<TrainSample>> {
    let mut out = Vec::with_capacity(faces.len() * per_face);
    let mut rng = Rng::new(seed);
    for (image, subject) in faces {
        let pool = audio_by_subject.get(*subject).ok_or_else(|| {
            Error::Data(format!("subject {subject} has no audio vectors"))
        })?;
        if pool.len() < per_face {
            return Err(Error::Data(format!(
                "subject {subject} has {} utterances, pairing needs {per_face}",
                pool.len()
            )));
        }
        // Partial Fisher-Yates: the first `per_face` slots are a uniform
        // without-replacement draw.
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        for k in 0..per_face {
            let j = k + rng.below(idx.len() - k);
            idx.swap(k, j);
            out.push(TrainSample {
                image: image.clone(),
                audio: Some(pool[idx[k]].clone()),
                label: *subject,
            });
        }
    }
    Ok(out)
}

/// Per-sample conv-stack activations kept for the backward sweep.
#[derive(Default)]
struct ConvTrace {
    shape: Option<kernels::ConvShape>,
    /// Unrolled input patches, shared by forward and kernel-gradient passes.
    cols: Vec<f64>,
    pre_act: Vec<f64>,
    pooled: Vec<f64>,
    /// Rectified pooled output, the next layer's input.
    output: Vec<f64>,
}

/// Large buffers recycled across batches; conv traces are hundreds of
/// megabytes per batch and churn the allocator if rebuilt every time.
#[derive(Default)]
struct TrainScratch {
    traces: Vec<Vec<ConvTrace>>,
    d_z: Vec<f64>,
    d_x: Vec<f64>,
}

/// Shuffled mini-batch SGD. Returns the mean loss per epoch. Deterministic
/// given the seed; parallelism inside the kernels does not change results.
pub fn train(model: &mut Model, data: &[TrainSample], cfg: &TrainingConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    let n_classes = model.arch.n_classes;
    for (i, sample) in data.iter().enumerate() {
        check_inputs(model, &sample.image, sample.audio.as_ref())
            .map_err(|e| Error::Usage(format!("sample {i}: {e}")))?;
        if sample.label >= n_classes {
            return Err(Error::Label(format!(
                "sample {i} has label {} but the model has {n_classes} classes",
                sample.label
            )));
        }
    }
    let threads = cfg.resolved_threads();
    let mut rng = Rng::new(cfg.seed);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut grads = GradientSet::zeros_like(&model.params);
    let mut scratch = TrainScratch::default();
    let mut indices: Vec<usize> = (0..data.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        rng.shuffle(&mut indices);
        let mut loss_sum = 0.0;
        for batch in indices.chunks(cfg.batch_size) {
            let batch_loss = train_batch(model, data, batch, &mut grads, &mut scratch, threads)?;
            if !batch_loss.is_finite() {
                return Err(Error::Divergence { epoch });
            }
            loss_sum += batch_loss * batch.len() as f64;
            opt.step(&mut model.params, &grads)?;
            grads.zero();
        }
        history.push(loss_sum / data.len() as f64);
    }
    Ok(history)
}

/// Forward and backward over one mini-batch. Conv blocks run per sample; the
/// dense stack runs batched so the big weight matrices stream through memory
/// once per batch. Gradients (already scaled by 1/batch) are added into
/// `grads`; returns the mean loss.
fn train_batch(
    model: &Model,
    data: &[TrainSample],
    batch: &[usize],
    grads: &mut GradientSet,
    scratch: &mut TrainScratch,
    threads: usize,
) -> Result<f64> {
    let b = batch.len();
    let params = &model.params;
    let conv_params: Vec<&nn::ConvBlockParams> = params
        .layers
        .iter()
        .filter_map(|l| match l {
            LayerParams::Conv(p) => Some(p),
            _ => None,
        })
        .collect();
    let dense_params: Vec<&nn::DenseParams> = params
        .layers
        .iter()
        .filter_map(|l| match l {
            LayerParams::Dense(p) => Some(p),
            _ => None,
        })
        .collect();
    let d1_in = dense_params[0].in_dim();
    let aux_dim = model.arch.aux_dim;
    let flat_dim = d1_in - aux_dim;

    // Conv stack forward, one sample at a time, into recycled trace slots.
    while scratch.traces.len() < b {
        scratch.traces.push(Vec::new());
    }
    let mut x1 = vec![0.0; b * d1_in];
    for (bi, &si) in batch.iter().enumerate() {
        let sample = &data[si];
        let trace_row = &mut scratch.traces[bi];
        while trace_row.len() < conv_params.len() {
            trace_row.push(ConvTrace::default());
        }
        let mut cur_shape = (model.arch.in_channels, model.arch.in_h, model.arch.in_w);
        for (ci, cp) in conv_params.iter().enumerate() {
            let (done, todo) = trace_row.split_at_mut(ci);
            let input: &[f64] = if ci == 0 {
                sample.image.data()
            } else {
                &done[ci - 1].output
            };
            let trace = &mut todo[0];
            let kshape = cp.kernels.shape();
            let shape = kernels::ConvShape {
                in_c: cur_shape.0,
                in_h: cur_shape.1,
                in_w: cur_shape.2,
                out_c: kshape[0],
                kh: kshape[2],
                kw: kshape[3],
            };
            kernels::im2col_into(input, &shape, &mut trace.cols);
            trace.pre_act.resize(shape.conv_len(), 0.0);
            kernels::conv_forward_cols(&trace.cols, cp.kernels.data(), cp.bias.data(), &shape, &mut trace.pre_act, threads);
            trace.pooled.resize(shape.pool_len(), 0.0);
            kernels::relu_avg_pool2(&trace.pre_act, &shape, &mut trace.pooled, threads);
            trace.output.resize(shape.pool_len(), 0.0);
            for (o, &p) in trace.output.iter_mut().zip(&trace.pooled) {
                *o = p.max(0.0);
            }
            trace.shape = Some(shape);
            cur_shape = (shape.out_c, shape.pool_h(), shape.pool_w());
        }
        let row = &mut x1[bi * d1_in..(bi + 1) * d1_in];
        row[..flat_dim].copy_from_slice(&trace_row.last().expect("conv stack").output);
        if aux_dim > 0 {
            row[flat_dim..].copy_from_slice(sample.audio.as_ref().expect("checked").as_slice());
        }
    }

    // Dense stack forward, batched.
    let n_dense = dense_params.len();
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(n_dense);
    for (di, dp) in dense_params.iter().enumerate() {
        let relu = di + 1 < n_dense;
        let mut y = vec![0.0; b * dp.out_dim()];
        let cur: &[f64] = if di == 0 { &x1 } else { &acts[di - 1] };
        kernels::dense_forward_batch(
            cur,
            b,
            dp.weights.data(),
            dp.bias.data(),
            dp.in_dim(),
            dp.out_dim(),
            relu,
            &mut y,
            threads,
        );
        acts.push(y);
    }

    // Softmax, loss, and the logit gradient (p - t) / batch.
    let n_out = dense_params[n_dense - 1].out_dim();
    let mut probs = acts.pop().expect("output layer");
    kernels::softmax_rows(&mut probs, n_out);
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    for (bi, &si) in batch.iter().enumerate() {
        let target = data[si].label;
        let row = &mut probs[bi * n_out..(bi + 1) * n_out];
        loss -= row[target].max(nn::CE_EPSILON).ln();
        for v in row.iter_mut() {
            *v *= inv_b;
        }
        row[target] -= inv_b;
    }
    loss *= inv_b;
    let mut d_out = probs;

    // Dense stack backward, batched. `acts` now holds the rectified hidden
    // activations; the first dense input is `x1`.
    let dense_grad_indices: Vec<usize> = params
        .layers
        .iter()
        .enumerate()
        .filter_map(|(i, l)| matches!(l, LayerParams::Dense(_)).then_some(i))
        .collect();
    for di in (0..n_dense).rev() {
        let dp = dense_params[di];
        let input: &[f64] = if di == 0 { &x1 } else { &acts[di - 1] };
        let LayerGrad::Dense { weights: dw, bias: db } = &mut grads.layers[dense_grad_indices[di]]
        else {
            return Err(Error::InvalidInput("gradient set does not match model".into()));
        };
        kernels::dense_backward_params(input, &d_out, b, dp.in_dim(), dp.out_dim(), dw, db, threads);
        if di == 0 && conv_params.is_empty() {
            break;
        }
        let mut d_in = vec![0.0; b * dp.in_dim()];
        kernels::dense_backward_input(&d_out, dp.weights.data(), b, dp.in_dim(), dp.out_dim(), &mut d_in, threads);
        if di > 0 {
            // Rectifier gate via the stored post-activations.
            let prev = &acts[di - 1];
            for (d, &y) in d_in.iter_mut().zip(prev) {
                if y <= 0.0 {
                    *d = 0.0;
                }
            }
            d_out = d_in;
        } else {
            d_out = d_in;
            break;
        }
    }

    // Conv stack backward, per sample. The audio slice of the fused gradient
    // is dropped: utterance features are inputs, not parameters.
    if !conv_params.is_empty() {
        let conv_grad_indices: Vec<usize> = params
            .layers
            .iter()
            .enumerate()
            .filter_map(|(i, l)| matches!(l, LayerParams::Conv(_)).then_some(i))
            .collect();
        for (bi, &si) in batch.iter().enumerate() {
            let _ = si;
            let traces = &scratch.traces[bi];
            let mut d_cur: Vec<f64> = d_out[bi * d1_in..bi * d1_in + flat_dim].to_vec();
            for ci in (0..conv_params.len()).rev() {
                let trace = &traces[ci];
                let shape = trace.shape.expect("trace filled by the forward pass");
                // Outer rectifier gate on the pooled values.
                for (d, &p) in d_cur.iter_mut().zip(&trace.pooled) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
                scratch.d_z.resize(shape.conv_len(), 0.0);
                kernels::relu_avg_pool2_backward(&trace.pre_act, &shape, &d_cur, &mut scratch.d_z, threads);
                let LayerGrad::Conv { kernels: dk, bias: dbias } =
                    &mut grads.layers[conv_grad_indices[ci]]
                else {
                    return Err(Error::InvalidInput("gradient set does not match model".into()));
                };
                // Already-scaled logit gradients flow down, so parameter
                // gradients arrive scaled by 1/batch as well.
                kernels::conv_backward_params_cols(&trace.cols, &scratch.d_z, &shape, dk, dbias, threads);
                if ci > 0 {
                    scratch.d_x.resize(shape.input_len(), 0.0);
                    kernels::conv_backward_input(conv_params[ci].kernels.data(), &scratch.d_z, &shape, &mut scratch.d_x, threads);
                    d_cur.clear();
                    d_cur.extend_from_slice(&scratch.d_x);
                }
            }
        }
    }
    Ok(loss)
}

/// Fraction of samples whose predicted identity matches the label. Samples
/// are scored independently across threads; the count is thread-invariant.
pub fn evaluate_accuracy(model: &Model, data: &[TrainSample], threads: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::InvalidInput("evaluation dataset is empty".into()));
    }
    let hits: Vec<Result<bool>> = crate::parallel::map_indexed(data.len(), threads, |i| {
        let sample = &data[i];
        let (label, _) = predict_identity(model, &sample.image, sample.audio.as_ref())?;
        Ok(label == sample.label)
    });
    let mut correct = 0usize;
    for hit in hits {
        if hit? {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

// ---------------------------------------------------------------------------
// Persistence and reporting
// ---------------------------------------------------------------------------

fn layer_names(params: &ModelParams) -> Vec<String> {
    let n_dense = params
        .layers
        .iter()
        .filter(|l| matches!(l, LayerParams::Dense(_)))
        .count();
    let mut conv_i = 0;
    let mut dense_i = 0;
    params
        .layers
        .iter()
        .map(|l| match l {
            LayerParams::Conv(_) => {
                conv_i += 1;
                format!("conv{conv_i}")
            }
            LayerParams::Dense(_) => {
                dense_i += 1;
                if dense_i == n_dense {
                    "output".to_string()
                } else {
                    format!("dense{dense_i}")
                }
            }
        })
        .collect()
}

/// (name, shape, parameter count) per layer, for the audit table.
pub fn layer_summary(model: &Model) -> Vec<(String, String, usize)> {
    layer_names(&model.params)
        .into_iter()
        .zip(&model.params.layers)
        .map(|(name, layer)| {
            let shape = match layer {
                LayerParams::Conv(p) => format!("{:?}+{:?}", p.kernels.shape(), p.bias.shape()),
                LayerParams::Dense(p) => format!("{:?}+{:?}", p.weights.shape(), p.bias.shape()),
            };
            (name, shape, layer.param_count())
        })
        .collect()
}

fn arch_to_meta(model: &Model) -> Vec<(String, String)> {
    let arch = &model.arch;
    vec![
        ("model.kind".into(), model.kind.as_str().into()),
        ("model.classes".into(), arch.n_classes.to_string()),
        (
            "arch.input".into(),
            format!("{}x{}x{}", arch.in_channels, arch.in_h, arch.in_w),
        ),
        (
            "arch.conv".into(),
            arch.conv
                .iter()
                .map(|c| format!("{}:{}x{}", c.out_maps, c.kh, c.kw))
                .collect::<Vec<_>>()
                .join(","),
        ),
        (
            "arch.hidden".into(),
            arch.hidden
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        ),
        ("arch.aux".into(), arch.aux_dim.to_string()),
    ]
}

/// Writes the model to the versioned binary container. `extra_meta` lets the
/// caller record provenance such as the seed and tool version.
pub fn save_model(model: &Model, path: &Path, extra_meta: &[(String, String)]) -> Result<()> {
    let mut meta = arch_to_meta(model);
    meta.extend_from_slice(extra_meta);
    let names = layer_names(&model.params);
    let mut blocks = Vec::new();
    for (name, layer) in names.iter().zip(&model.params.layers) {
        match layer {
            LayerParams::Conv(p) => {
                blocks.push((format!("{name}/kernels"), p.kernels.clone()));
                blocks.push((format!("{name}/bias"), p.bias.clone()));
            }
            LayerParams::Dense(p) => {
                blocks.push((format!("{name}/weights"), p.weights.clone()));
                blocks.push((format!("{name}/bias"), p.bias.clone()));
            }
        }
    }
    write_param_file(path, &ParamFile { meta, blocks })
}

fn meta_usize(file: &ParamFile, key: &str) -> Result<usize> {
    file.meta_value(key)
        .ok_or_else(|| Error::Parse(format!("model file missing {key}")))?
        .parse()
        .map_err(|_| Error::Parse(format!("model file has malformed {key}")))
}

/// Reads a model back; validates the architecture metadata against the block
/// shapes.
pub fn load_model(path: &Path) -> Result<Model> {
    let file = read_param_file(path)?;
    let kind = match file.meta_value("model.kind") {
        Some("face") => ModelKind::FaceOnly,
        Some("fused") => ModelKind::FaceAudio,
        other => {
            return Err(Error::Parse(format!(
                "model file has unknown kind {other:?}"
            )))
        }
    };
    let n_classes = meta_usize(&file, "model.classes")?;
    let arch = match kind {
        ModelKind::FaceOnly => face_arch(n_classes),
        ModelKind::FaceAudio => fused_arch(n_classes),
    };
    let mut layers = Vec::new();
    let n_layers = arch.conv.len() + arch.hidden.len() + 1;
    let names = {
        let mut names = Vec::new();
        for i in 0..arch.conv.len() {
            names.push(format!("conv{}", i + 1));
        }
        for i in 0..arch.hidden.len() {
            names.push(format!("dense{}", i + 1));
        }
        names.push("output".to_string());
        names
    };
    debug_assert_eq!(names.len(), n_layers);
    for (i, name) in names.iter().enumerate() {
        if i < arch.conv.len() {
            let kernels = file
                .block(&format!("{name}/kernels"))
                .ok_or_else(|| Error::Parse(format!("model file missing {name}/kernels")))?;
            let bias = file
                .block(&format!("{name}/bias"))
                .ok_or_else(|| Error::Parse(format!("model file missing {name}/bias")))?;
            layers.push(LayerParams::Conv(nn::ConvBlockParams::new(
                kernels.clone(),
                bias.clone(),
            )?));
        } else {
            let weights = file
                .block(&format!("{name}/weights"))
                .ok_or_else(|| Error::Parse(format!("model file missing {name}/weights")))?;
            let bias = file
                .block(&format!("{name}/bias"))
                .ok_or_else(|| Error::Parse(format!("model file missing {name}/bias")))?;
            layers.push(LayerParams::Dense(nn::DenseParams::new(
                weights.clone(),
                bias.clone(),
            )?));
        }
    }
    let model = Model {
        kind,
        arch,
        params: ModelParams { layers },
    };
    // Cross-check the stored blocks against the declared architecture.
    let expected = nn::init_params(&model.arch, 0)?;
    for (a, b) in model.params.layers.iter().zip(&expected.layers) {
        let matches = match (a, b) {
            (LayerParams::Conv(x), LayerParams::Conv(y)) => {
                x.kernels.shape() == y.kernels.shape() && x.bias.shape() == y.bias.shape()
            }
            (LayerParams::Dense(x), LayerParams::Dense(y)) => {
                x.weights.shape() == y.weights.shape() && x.bias.shape() == y.bias.shape()
            }
            _ => false,
        };
        if !matches {
            return Err(Error::Parse(
                "model file blocks do not match its declared architecture".into(),
            ));
        }
    }
    Ok(model)
}
