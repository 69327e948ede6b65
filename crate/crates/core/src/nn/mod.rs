//! Layers, initialization, reverse-mode gradients and the SGD update.
//!
//! A network is a stack of conv blocks followed by a stack of dense layers.
//! One conv block computes `relu(pool2(relu(conv(x) + bias)))`: valid
//! (no-padding) correlation with stride 1, a rectifier, non-overlapping 2x2
//! average pooling and a second rectifier. The conv output is flattened and,
//! for fused models, an auxiliary feature vector is appended before the dense
//! stack. Dense layers are rectified except the last, whose logits go through
//! softmax.
//!
//! Every backward pass here is checked against central finite differences in
//! the test suites.

pub mod kernels;
pub mod serialize;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use kernels::ConvShape;

/// Loss floor inside the log, keeping cross-entropy finite.
pub const CE_EPSILON: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Architecture description
// ---------------------------------------------------------------------------

/// One conv block: number of output maps and kernel extents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_maps: usize,
    pub kh: usize,
    pub kw: usize,
}

/// Weight initialization family. Both draw within [-1, 1] and scale by the
/// fan-in of the unit the weight feeds, so that weight variance falls off as
/// 1/fan-in and the per-layer signal gain stays near one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightInit {
    /// Standard Gaussian truncated to [-1, 1] by rejection (default).
    TruncatedGaussian,
    /// Uniform over [-1, 1].
    Uniform,
}

/// Input/layer geometry of a whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchSpec {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    /// Auxiliary features appended after the conv output is flattened.
    pub aux_dim: usize,
    pub conv: Vec<ConvSpec>,
    /// Interior dense layer widths (rectified).
    pub hidden: Vec<usize>,
    pub n_classes: usize,
    pub init: WeightInit,
}

impl ArchSpec {
    /// Shapes of each conv block output, validating that kernels fit.
    pub fn conv_output_shapes(&self) -> Result<Vec<(usize, usize, usize)>> {
        let (mut c, mut h, mut w) = (self.in_channels, self.in_h, self.in_w);
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::InvalidInput("input volume has a zero extent".into()));
        }
        let mut shapes = Vec::with_capacity(self.conv.len());
        for (i, spec) in self.conv.iter().enumerate() {
            if spec.kh == 0 || spec.kw == 0 || spec.out_maps == 0 {
                return Err(Error::InvalidInput(format!("conv{} has a zero extent", i + 1)));
            }
            if spec.kh > h || spec.kw > w {
                return Err(Error::ShapeMismatch {
                    context: "conv kernel larger than its input",
                    left: vec![c, h, w],
                    right: vec![spec.out_maps, spec.kh, spec.kw],
                });
            }
            h = (h - spec.kh + 1) / 2;
            w = (w - spec.kw + 1) / 2;
            c = spec.out_maps;
            if h == 0 || w == 0 {
                return Err(Error::InvalidInput(format!(
                    "conv{} pools away the whole spatial extent",
                    i + 1
                )));
            }
            shapes.push((c, h, w));
        }
        Ok(shapes)
    }

    /// Flattened conv output size, before the auxiliary features join.
    pub fn conv_flat_dim(&self) -> Result<usize> {
        Ok(match self.conv_output_shapes()?.last() {
            Some(&(c, h, w)) => c * h * w,
            None => self.in_channels * self.in_h * self.in_w,
        })
    }

    /// (in, out) extents of every dense layer, output layer included.
    pub fn dense_dims(&self) -> Result<Vec<(usize, usize)>> {
        if self.n_classes < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 classes, got {}",
                self.n_classes
            )));
        }
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.conv_flat_dim()? + self.aux_dim;
        for &hdim in &self.hidden {
            if hdim == 0 {
                return Err(Error::InvalidInput("dense layer of width zero".into()));
            }
            dims.push((prev, hdim));
            prev = hdim;
        }
        dims.push((prev, self.n_classes));
        Ok(dims)
    }

    /// Total number of trainable scalars.
    pub fn param_count(&self) -> Result<usize> {
        let mut total = 0;
        let mut in_c = self.in_channels;
        for spec in &self.conv {
            self.conv_output_shapes()?; // validation
            total += spec.out_maps * (in_c * spec.kh * spec.kw + 1);
            in_c = spec.out_maps;
        }
        for (i, o) in self.dense_dims()? {
            total += i * o + o;
        }
        Ok(total)
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// Kernels `[out_maps, in_maps, kh, kw]` and per-map bias of one conv block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlockParams {
    pub kernels: Tensor,
    pub bias: Tensor,
}

impl ConvBlockParams {
    pub fn new(kernels: Tensor, bias: Tensor) -> Result<Self> {
        if kernels.ndim() != 4 {
            return Err(Error::InvalidInput(format!(
                "conv kernels must be 4-d, got shape {:?}",
                kernels.shape()
            )));
        }
        if bias.ndim() != 1 || bias.len() != kernels.shape()[0] {
            return Err(Error::ShapeMismatch {
                context: "conv bias vs kernels",
                left: bias.shape().to_vec(),
                right: kernels.shape().to_vec(),
            });
        }
        Ok(ConvBlockParams { kernels, bias })
    }

    pub fn out_maps(&self) -> usize {
        self.kernels.shape()[0]
    }
}

/// Weights `[in_dim, out_dim]` and bias of one dense layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl DenseParams {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self> {
        if weights.ndim() != 2 {
            return Err(Error::InvalidInput(format!(
                "dense weights must be 2-d, got shape {:?}",
                weights.shape()
            )));
        }
        if bias.ndim() != 1 || bias.len() != weights.shape()[1] {
            return Err(Error::ShapeMismatch {
                context: "dense bias vs weights",
                left: bias.shape().to_vec(),
                right: weights.shape().to_vec(),
            });
        }
        Ok(DenseParams { weights, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Conv(ConvBlockParams),
    Dense(DenseParams),
}

impl LayerParams {
    pub fn param_count(&self) -> usize {
        match self {
            LayerParams::Conv(p) => p.kernels.len() + p.bias.len(),
            LayerParams::Dense(p) => p.weights.len() + p.bias.len(),
        }
    }
}

/// Ordered parameter blocks of a whole network: conv blocks first, then the
/// dense stack.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<LayerParams>,
}

impl ModelParams {
    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerParams::param_count).sum()
    }

    fn conv_layers(&self) -> impl Iterator<Item = &ConvBlockParams> {
        self.layers.iter().filter_map(|l| match l {
            LayerParams::Conv(p) => Some(p),
            LayerParams::Dense(_) => None,
        })
    }

    fn dense_layers(&self) -> impl Iterator<Item = &DenseParams> {
        self.layers.iter().filter_map(|l| match l {
            LayerParams::Dense(p) => Some(p),
            LayerParams::Conv(_) => None,
        })
    }

    /// Checks the conv-then-dense layer ordering.
    pub fn validate_structure(&self) -> Result<()> {
        let mut seen_dense = false;
        for layer in &self.layers {
            match layer {
                LayerParams::Conv(_) if seen_dense => {
                    return Err(Error::InvalidInput(
                        "conv layer after a dense layer is not supported".into(),
                    ))
                }
                LayerParams::Dense(_) => seen_dense = true,
                LayerParams::Conv(_) => {}
            }
        }
        if !seen_dense {
            return Err(Error::InvalidInput("model must end in a dense stack".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gradients
// ---------------------------------------------------------------------------

/// Gradient blocks, shape-congruent with their `ModelParams`.
#[derive(Debug, Clone, PartialEq)]
pub enum LayerGrad {
    Conv { kernels: Vec<f64>, bias: Vec<f64> },
    Dense { weights: Vec<f64>, bias: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGrad>,
}

impl GradientSet {
    pub fn zeros_like(params: &ModelParams) -> Self {
        let layers = params
            .layers
            .iter()
            .map(|l| match l {
                LayerParams::Conv(p) => LayerGrad::Conv {
                    kernels: vec![0.0; p.kernels.len()],
                    bias: vec![0.0; p.bias.len()],
                },
                LayerParams::Dense(p) => LayerGrad::Dense {
                    weights: vec![0.0; p.weights.len()],
                    bias: vec![0.0; p.bias.len()],
                },
            })
            .collect();
        GradientSet { layers }
    }

    pub fn scale(&mut self, s: f64) {
        for layer in &mut self.layers {
            let (a, b) = match layer {
                LayerGrad::Conv { kernels, bias } => (kernels, bias),
                LayerGrad::Dense { weights, bias } => (weights, bias),
            };
            for v in a.iter_mut() {
                *v *= s;
            }
            for v in b.iter_mut() {
                *v *= s;
            }
        }
    }

    pub fn zero(&mut self) {
        for layer in &mut self.layers {
            let (a, b) = match layer {
                LayerGrad::Conv { kernels, bias } => (kernels, bias),
                LayerGrad::Dense { weights, bias } => (weights, bias),
            };
            a.fill(0.0);
            b.fill(0.0);
        }
    }

    /// Errors unless this set mirrors `params` block-for-block.
    pub fn check_congruent(&self, params: &ModelParams) -> Result<()> {
        if self.layers.len() != params.layers.len() {
            return Err(Error::InvalidInput(format!(
                "gradient set has {} blocks, model has {}",
                self.layers.len(),
                params.layers.len()
            )));
        }
        for (g, p) in self.layers.iter().zip(&params.layers) {
            let ok = match (g, p) {
                (LayerGrad::Conv { kernels, bias }, LayerParams::Conv(cp)) => {
                    kernels.len() == cp.kernels.len() && bias.len() == cp.bias.len()
                }
                (LayerGrad::Dense { weights, bias }, LayerParams::Dense(dp)) => {
                    weights.len() == dp.weights.len() && bias.len() == dp.bias.len()
                }
                _ => false,
            };
            if !ok {
                return Err(Error::InvalidInput(
                    "gradient blocks are not congruent with the model".into(),
                ));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Activation trace
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub(crate) enum LayerTrace {
    Conv {
        input: Vec<f64>,
        shape: ConvShape,
        /// Pre-rectifier correlation output.
        pre_act: Vec<f64>,
        /// Pooled values before the outer rectifier.
        pooled: Vec<f64>,
    },
    Dense {
        input: Vec<f64>,
        /// Post-activation output (raw logits for the final layer).
        output: Vec<f64>,
        relu: bool,
    },
}

/// Cached per-layer activations of one forward pass, everything the backward
/// pass needs.
#[derive(Debug, Clone)]
pub struct ActivationTrace {
    pub(crate) layers: Vec<LayerTrace>,
    pub(crate) probs: Vec<f64>,
    pub(crate) aux_len: usize,
    pub(crate) input_shape: Vec<usize>,
}

impl ActivationTrace {
    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Softmax output of the final layer.
    pub fn probabilities(&self) -> &[f64] {
        &self.probs
    }

    /// Post-activation output of the `i`-th dense layer (0-based within the
    /// dense stack).
    pub fn dense_output(&self, i: usize) -> Option<&[f64]> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerTrace::Dense { output, .. } => Some(output.as_slice()),
                _ => None,
            })
            .nth(i)
    }
}

// ---------------------------------------------------------------------------
// Public layer operations
// ---------------------------------------------------------------------------

/// One conv block forward: valid correlation plus bias, rectifier, 2x2
/// average pooling, rectifier.
pub fn conv_block_forward(x: &Tensor, p: &ConvBlockParams) -> Result<Tensor> {
    let (shape, _z, pooled) = conv_block_forward_raw(x.data(), tensor_shape3(x)?, p, 1)?;
    let y: Vec<f64> = pooled.iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(vec![shape.out_c, shape.pool_h(), shape.pool_w()], y)
}

fn tensor_shape3(x: &Tensor) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::InvalidInput(format!(
            "expected a 3-d volume, got shape {:?}",
            x.shape()
        ))),
    }
}

/// Raw conv block forward used by both the public op and the training loop.
fn conv_block_forward_raw(
    x: &[f64],
    (c, h, w): (usize, usize, usize),
    p: &ConvBlockParams,
    threads: usize,
) -> Result<(ConvShape, Vec<f64>, Vec<f64>)> {
    let kshape = p.kernels.shape();
    if kshape[1] != c {
        return Err(Error::ShapeMismatch {
            context: "conv input channels",
            left: vec![c, h, w],
            right: kshape.to_vec(),
        });
    }
    if kshape[2] > h || kshape[3] > w {
        return Err(Error::ShapeMismatch {
            context: "conv kernel larger than input",
            left: vec![c, h, w],
            right: kshape.to_vec(),
        });
    }
    let shape = ConvShape {
        in_c: c,
        in_h: h,
        in_w: w,
        out_c: kshape[0],
        kh: kshape[2],
        kw: kshape[3],
    };
    if shape.pool_h() == 0 || shape.pool_w() == 0 {
        return Err(Error::InvalidInput(
            "conv output too small for 2x2 pooling".into(),
        ));
    }
    let mut z = vec![0.0; shape.conv_len()];
    kernels::conv_forward(x, p.kernels.data(), p.bias.data(), &shape, &mut z, threads);
    let mut pooled = vec![0.0; shape.pool_len()];
    kernels::relu_avg_pool2(&z, &shape, &mut pooled, threads);
    Ok((shape, z, pooled))
}

/// Dense layer forward on a single feature vector: `relu(f . W + b)` when
/// `apply_nonlinearity` is set, plain `f . W + b` for the pre-softmax layer.
pub fn dense_forward(f: &Tensor, p: &DenseParams, apply_nonlinearity: bool) -> Result<Tensor> {
    if f.ndim() != 1 || f.len() != p.in_dim() {
        return Err(Error::ShapeMismatch {
            context: "dense input",
            left: f.shape().to_vec(),
            right: p.weights.shape().to_vec(),
        });
    }
    let mut y = vec![0.0; p.out_dim()];
    kernels::dense_forward_batch(
        f.data(),
        1,
        p.weights.data(),
        p.bias.data(),
        p.in_dim(),
        p.out_dim(),
        apply_nonlinearity,
        &mut y,
        1,
    );
    Tensor::from_vec(y)
}

/// Numerically stable softmax: subtracts the max logit before exponentiating,
/// so the output is invariant under shifting all logits by a constant.
pub fn softmax(z: &Tensor) -> Result<Tensor> {
    if z.ndim() != 1 || z.is_empty() {
        return Err(Error::InvalidInput(format!(
            "softmax expects a non-empty vector, got shape {:?}",
            z.shape()
        )));
    }
    let mut p = z.data().to_vec();
    let n = p.len();
    kernels::softmax_rows(&mut p, n);
    Tensor::from_vec(p)
}

/// Negative log-likelihood of a one-hot target under `p`, floored at
/// `CE_EPSILON` so it never becomes infinite.
pub fn cross_entropy(p: &Tensor, t: &Tensor) -> Result<f64> {
    if p.shape() != t.shape() || p.ndim() != 1 {
        return Err(Error::ShapeMismatch {
            context: "cross entropy",
            left: p.shape().to_vec(),
            right: t.shape().to_vec(),
        });
    }
    let mut target = None;
    for (i, &tv) in t.data().iter().enumerate() {
        if tv == 1.0 {
            if target.replace(i).is_some() {
                return Err(Error::Label("target has more than one hot entry".into()));
            }
        } else if tv != 0.0 {
            return Err(Error::Label(format!("target entry {tv} is neither 0 nor 1")));
        }
    }
    let target = target.ok_or_else(|| Error::Label("target has no hot entry".into()))?;
    Ok(-p.data()[target].max(CE_EPSILON).ln())
}

// ---------------------------------------------------------------------------
// Whole-network forward and backward
// ---------------------------------------------------------------------------

/// Runs the full network on one input volume (plus optional auxiliary
/// features), caching everything the backward pass needs.
pub fn forward_pass(
    params: &ModelParams,
    input: &Tensor,
    aux: Option<&[f64]>,
    threads: usize,
) -> Result<ActivationTrace> {
    params.validate_structure()?;
    let has_conv = params.conv_layers().next().is_some();
    let mut layers = Vec::with_capacity(params.layers.len());
    let mut current = input.data().to_vec();
    let mut cur_shape = if has_conv {
        tensor_shape3(input)?
    } else {
        (1, 1, input.len())
    };

    for conv in params.conv_layers() {
        let (shape, z, pooled) = conv_block_forward_raw(&current, cur_shape, conv, threads)?;
        let next: Vec<f64> = pooled.iter().map(|&v| v.max(0.0)).collect();
        layers.push(LayerTrace::Conv {
            input: std::mem::take(&mut current),
            shape,
            pre_act: z,
            pooled,
        });
        cur_shape = (shape.out_c, shape.pool_h(), shape.pool_w());
        current = next;
    }

    // Fusion point: flattened conv output with auxiliary features appended.
    let aux_len = aux.map_or(0, <[f64]>::len);
    if let Some(aux) = aux {
        current.extend_from_slice(aux);
    }

    let dense: Vec<&DenseParams> = params.dense_layers().collect();
    for (li, dp) in dense.iter().enumerate() {
        if current.len() != dp.in_dim() {
            return Err(Error::ShapeMismatch {
                context: "dense stack input",
                left: vec![current.len()],
                right: dp.weights.shape().to_vec(),
            });
        }
        let relu = li + 1 < dense.len();
        let mut y = vec![0.0; dp.out_dim()];
        kernels::dense_forward_batch(
            &current,
            1,
            dp.weights.data(),
            dp.bias.data(),
            dp.in_dim(),
            dp.out_dim(),
            relu,
            &mut y,
            threads,
        );
        layers.push(LayerTrace::Dense {
            input: std::mem::take(&mut current),
            output: y.clone(),
            relu,
        });
        current = y;
    }

    let mut probs = current;
    let n_out = probs.len();
    kernels::softmax_rows(&mut probs, n_out);
    if !probs.iter().all(|v| v.is_finite()) {
        return Err(Error::Numerical("softmax produced non-finite output".into()));
    }
    Ok(ActivationTrace {
        layers,
        probs,
        aux_len,
        input_shape: input.shape().to_vec(),
    })
}

/// Gradients of the whole network. Also returned: the gradient with respect
/// to the input volume and, for fused models, the auxiliary feature vector.
pub struct BackwardResult {
    pub grads: GradientSet,
    pub input_grad: Tensor,
    pub aux_grad: Vec<f64>,
}

/// Exact reverse-mode gradients of the cross-entropy loss for one sample.
/// `trace` must come from a forward pass of the same parameters.
pub fn backward_pass(
    params: &ModelParams,
    trace: &ActivationTrace,
    target_class: usize,
    threads: usize,
) -> Result<BackwardResult> {
    let mut grads = GradientSet::zeros_like(params);
    let (input_grad, aux_grad) =
        backward_accumulate(params, trace, target_class, 1.0, &mut grads, true, threads)?;
    Ok(BackwardResult {
        grads,
        input_grad: input_grad.expect("input gradient requested"),
        aux_grad,
    })
}

/// Backward pass that adds `scale` times the sample gradient into `grads`.
/// Returns the input gradient only when asked to spare the first conv block's
/// input-gradient pass during training.
pub(crate) fn backward_accumulate(
    params: &ModelParams,
    trace: &ActivationTrace,
    target_class: usize,
    scale: f64,
    grads: &mut GradientSet,
    want_input_grad: bool,
    threads: usize,
) -> Result<(Option<Tensor>, Vec<f64>)> {
    grads.check_congruent(params)?;
    if trace.layers.len() != params.layers.len() {
        return Err(Error::InvalidInput(format!(
            "trace has {} layers, model has {}",
            trace.layers.len(),
            params.layers.len()
        )));
    }
    if target_class >= trace.probs.len() {
        return Err(Error::Label(format!(
            "target class {target_class} out of range for {} outputs",
            trace.probs.len()
        )));
    }

    // Softmax plus cross-entropy collapses to p - t at the logits.
    let mut d_out: Vec<f64> = trace.probs.iter().map(|&p| p * scale).collect();
    d_out[target_class] -= scale;

    // Index of the first dense layer: the fused vector (flattened conv output
    // plus auxiliary features) is its input, so the aux gradient splits off
    // right after its backward step.
    let first_dense = params
        .layers
        .iter()
        .position(|l| matches!(l, LayerParams::Dense(_)))
        .expect("validated structure has a dense stack");

    let mut aux_grad = Vec::new();
    for (li, layer) in params.layers.iter().enumerate().rev() {
        let is_first = li == 0;
        match (layer, &trace.layers[li]) {
            (LayerParams::Dense(dp), LayerTrace::Dense { input, output, relu }) => {
                if input.len() != dp.in_dim() || output.len() != dp.out_dim() {
                    return Err(Error::InvalidInput(
                        "trace is not consistent with the model parameters".into(),
                    ));
                }
                if *relu {
                    // Post-activation is zero exactly where the rectifier cut.
                    for (d, &y) in d_out.iter_mut().zip(output) {
                        if y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                }
                let LayerGrad::Dense { weights: dw, bias: db } = &mut grads.layers[li] else {
                    unreachable!("congruence checked above");
                };
                kernels::dense_backward_params(
                    input,
                    &d_out,
                    1,
                    dp.in_dim(),
                    dp.out_dim(),
                    dw,
                    db,
                    threads,
                );
                let mut d_in = vec![0.0; dp.in_dim()];
                kernels::dense_backward_input(
                    &d_out,
                    dp.weights.data(),
                    1,
                    dp.in_dim(),
                    dp.out_dim(),
                    &mut d_in,
                    threads,
                );
                d_out = d_in;
                if li == first_dense && trace.aux_len > 0 {
                    aux_grad = d_out.split_off(d_out.len() - trace.aux_len);
                }
            }
            (LayerParams::Conv(cp), LayerTrace::Conv { input, shape, pre_act, pooled }) => {
                if d_out.len() != shape.pool_len() || pre_act.len() != shape.conv_len() {
                    return Err(Error::InvalidInput(
                        "trace is not consistent with the model parameters".into(),
                    ));
                }
                // Outer rectifier gate on the pooled values.
                for (d, &p) in d_out.iter_mut().zip(pooled) {
                    if p <= 0.0 {
                        *d = 0.0;
                    }
                }
                let mut d_z = vec![0.0; shape.conv_len()];
                kernels::relu_avg_pool2_backward(pre_act, shape, &d_out, &mut d_z, threads);
                let LayerGrad::Conv { kernels: dk, bias: db } = &mut grads.layers[li] else {
                    unreachable!("congruence checked above");
                };
                kernels::conv_backward_params(input, &d_z, shape, dk, db, threads);
                if !is_first || want_input_grad {
                    let mut d_x = vec![0.0; shape.input_len()];
                    kernels::conv_backward_input(cp.kernels.data(), &d_z, shape, &mut d_x, threads);
                    d_out = d_x;
                } else {
                    d_out = Vec::new();
                }
            }
            _ => {
                return Err(Error::InvalidInput(
                    "trace layer kinds do not match the model".into(),
                ))
            }
        }
    }

    let input_grad = if want_input_grad {
        Some(Tensor::new(trace.input_shape.clone(), d_out)?)
    } else {
        None
    };
    Ok((input_grad, aux_grad))
}

// ---------------------------------------------------------------------------
// Initialization and updates
// ---------------------------------------------------------------------------

/// Fresh parameters for an architecture. Biases start at exactly 0.01; every
/// weight is drawn within [-1, 1] and scaled by the fan-in of the unit it
/// feeds (variance proportional to 1/fan-in). Deterministic given the seed.
pub fn init_params(arch: &ArchSpec, seed: u64) -> Result<ModelParams> {
    let mut rng = Rng::new(seed);
    let mut layers = Vec::with_capacity(arch.conv.len() + arch.hidden.len() + 1);
    let mut in_c = arch.in_channels;
    arch.conv_output_shapes()?;
    for spec in &arch.conv {
        let fan_in = (in_c * spec.kh * spec.kw) as f64;
        let n = spec.out_maps * in_c * spec.kh * spec.kw;
        let kernels = draw_weights(&mut rng, n, fan_in, arch.init);
        layers.push(LayerParams::Conv(ConvBlockParams::new(
            Tensor::new(vec![spec.out_maps, in_c, spec.kh, spec.kw], kernels)?,
            Tensor::new(vec![spec.out_maps], vec![0.01; spec.out_maps])?,
        )?));
        in_c = spec.out_maps;
    }
    for (in_dim, out_dim) in arch.dense_dims()? {
        let weights = draw_weights(&mut rng, in_dim * out_dim, in_dim as f64, arch.init);
        layers.push(LayerParams::Dense(DenseParams::new(
            Tensor::new(vec![in_dim, out_dim], weights)?,
            Tensor::new(vec![out_dim], vec![0.01; out_dim])?,
        )?));
    }
    Ok(ModelParams { layers })
}

fn draw_weights(rng: &mut Rng, n: usize, fan_in: f64, init: WeightInit) -> Vec<f64> {
    // Scale so weight variance is proportional to 1/fan-in, which keeps the
    // per-layer signal gain near one through the whole stack.
    let scale = 1.0 / fan_in.sqrt();
    (0..n)
        .map(|_| match init {
            WeightInit::TruncatedGaussian => rng.gaussian_trunc(1.0) * scale,
            WeightInit::Uniform => rng.range(-1.0, 1.0) * scale,
        })
        .collect()
}

/// Plain SGD update: `theta <- theta - lr * g` per entry.
pub fn sgd_step(params: &mut ModelParams, grads: &GradientSet, lr: f64) -> Result<()> {
    grads.check_congruent(params)?;
    for (layer, grad) in params.layers.iter_mut().zip(&grads.layers) {
        let (p_a, p_b, g_a, g_b) = match (layer, grad) {
            (LayerParams::Conv(p), LayerGrad::Conv { kernels, bias }) => {
                (p.kernels.data_mut(), p.bias.data_mut(), kernels, bias)
            }
            (LayerParams::Dense(p), LayerGrad::Dense { weights, bias }) => {
                (p.weights.data_mut(), p.bias.data_mut(), weights, bias)
            }
            _ => unreachable!("congruence checked above"),
        };
        for (p, g) in p_a.iter_mut().zip(g_a) {
            *p -= lr * g;
        }
        for (p, g) in p_b.iter_mut().zip(g_b) {
            *p -= lr * g;
        }
    }
    Ok(())
}

/// SGD with optional classical momentum: `v <- m v + g`, `theta <- theta - lr v`.
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Option<GradientSet>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &GradientSet) -> Result<()> {
        grads.check_congruent(params)?;
        if self.momentum == 0.0 {
            return sgd_step(params, grads, self.lr);
        }
        let velocity = self
            .velocity
            .get_or_insert_with(|| GradientSet::zeros_like(params));
        velocity.check_congruent(params)?;
        for ((layer, grad), vel) in params
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut velocity.layers)
        {
            let (p_a, p_b, g_a, g_b, v_a, v_b) = match (layer, grad, vel) {
                (
                    LayerParams::Conv(p),
                    LayerGrad::Conv { kernels: gk, bias: gb },
                    LayerGrad::Conv { kernels: vk, bias: vb },
                ) => (p.kernels.data_mut(), p.bias.data_mut(), gk, gb, vk, vb),
                (
                    LayerParams::Dense(p),
                    LayerGrad::Dense { weights: gw, bias: gb },
                    LayerGrad::Dense { weights: vw, bias: vb },
                ) => (p.weights.data_mut(), p.bias.data_mut(), gw, gb, vw, vb),
                _ => unreachable!("congruence checked above"),
            };
            for ((p, g), v) in p_a.iter_mut().zip(g_a).zip(v_a.iter_mut()) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
            for ((p, g), v) in p_b.iter_mut().zip(g_b).zip(v_b.iter_mut()) {
                *v = self.momentum * *v + g;
                *p -= self.lr * *v;
            }
        }
        Ok(())
    }
}
