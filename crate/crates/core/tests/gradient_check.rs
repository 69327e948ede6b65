//! Finite-difference verification of every backward pass.
//!
//! Each network variant is checked over ten seeds: the analytic gradient of
//! the cross-entropy loss for every parameter block, the input volume and the
//! auxiliary features must match a central-difference probe at h = 1e-5 with
//! relative error below 1e-4.

use sn_core::nn::{
    backward_pass, forward_pass, ArchSpec, ConvSpec, GradientSet, LayerGrad, LayerParams,
    ModelParams, WeightInit,
};
use sn_core::rng::Rng;
use sn_core::tensor::Tensor;

const H: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

/// Relative error with a floor that keeps near-zero gradients from blowing
/// up the ratio; differences below the floor are noise-level agreements.
fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn loss(params: &ModelParams, input: &Tensor, aux: Option<&[f64]>, target: usize) -> f64 {
    let trace = forward_pass(params, input, aux, 1).unwrap();
    -trace.probabilities()[target].max(1e-12).ln()
}

/// Well-conditioned random parameters: same shapes as `init_params` would
/// produce, but at unit-ish scale so no layer starves the probe.
fn random_params(arch: &ArchSpec, rng: &mut Rng) -> ModelParams {
    let mut params = sn_core::nn::init_params(arch, rng.next_u64()).unwrap();
    for layer in &mut params.layers {
        let (weights, bias, fan_in) = match layer {
            LayerParams::Conv(p) => {
                let s = p.kernels.shape().to_vec();
                (&mut p.kernels, &mut p.bias, (s[1] * s[2] * s[3]) as f64)
            }
            LayerParams::Dense(p) => {
                let fan = p.in_dim() as f64;
                (&mut p.weights, &mut p.bias, fan)
            }
        };
        let scale = fan_in.sqrt();
        for w in weights.data_mut() {
            *w *= scale;
        }
        for b in bias.data_mut() {
            *b = rng.range(-0.3, 0.3);
        }
    }
    params
}

fn random_input(arch: &ArchSpec, rng: &mut Rng) -> (Tensor, Option<Vec<f64>>) {
    let n = arch.in_channels * arch.in_h * arch.in_w;
    let input = Tensor::new(
        vec![arch.in_channels, arch.in_h, arch.in_w],
        (0..n).map(|_| rng.range(-1.0, 1.0)).collect(),
    )
    .unwrap();
    let aux = (arch.aux_dim > 0)
        .then(|| (0..arch.aux_dim).map(|_| rng.range(-1.0, 1.0)).collect());
    (input, aux)
}

fn perturb(params: &mut ModelParams, layer: usize, weight: bool, idx: usize, delta: f64) {
    match &mut params.layers[layer] {
        LayerParams::Conv(p) => {
            let t = if weight { &mut p.kernels } else { &mut p.bias };
            t.data_mut()[idx] += delta;
        }
        LayerParams::Dense(p) => {
            let t = if weight { &mut p.weights } else { &mut p.bias };
            t.data_mut()[idx] += delta;
        }
    }
}

/// Max relative error between analytic and finite-difference gradients over
/// all parameters, the input volume and the auxiliary vector.
fn max_grad_error(arch: &ArchSpec, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let params = random_params(arch, &mut rng);
    let (input, aux) = random_input(arch, &mut rng);
    let target = rng.below(arch.n_classes);
    let aux_slice = aux.as_deref();

    let trace = forward_pass(&params, &input, aux_slice, 1).unwrap();
    let result = backward_pass(&params, &trace, target, 1).unwrap();

    let mut worst = 0.0f64;
    for (li, grad) in result.grads.layers.iter().enumerate() {
        let (gw, gb) = match grad {
            LayerGrad::Conv { kernels, bias } => (kernels, bias),
            LayerGrad::Dense { weights, bias } => (weights, bias),
        };
        for (weight, grads) in [(true, gw), (false, gb)] {
            for (idx, &analytic) in grads.iter().enumerate() {
                let mut plus = params.clone();
                perturb(&mut plus, li, weight, idx, H);
                let mut minus = params.clone();
                perturb(&mut minus, li, weight, idx, -H);
                let numeric = (loss(&plus, &input, aux_slice, target)
                    - loss(&minus, &input, aux_slice, target))
                    / (2.0 * H);
                worst = worst.max(rel_err(analytic, numeric));
            }
        }
    }

    // Input volume gradient.
    for (idx, &analytic) in result.input_grad.data().iter().enumerate() {
        let mut data = input.data().to_vec();
        data[idx] += H;
        let plus = Tensor::new(input.shape().to_vec(), data.clone()).unwrap();
        data[idx] -= 2.0 * H;
        let minus = Tensor::new(input.shape().to_vec(), data).unwrap();
        let numeric = (loss(&params, &plus, aux_slice, target)
            - loss(&params, &minus, aux_slice, target))
            / (2.0 * H);
        worst = worst.max(rel_err(analytic, numeric));
    }

    // Auxiliary feature gradient.
    if let Some(aux) = &aux {
        assert_eq!(result.aux_grad.len(), aux.len());
        for (idx, &analytic) in result.aux_grad.iter().enumerate() {
            let mut plus = aux.clone();
            plus[idx] += H;
            let mut minus = aux.clone();
            minus[idx] -= H;
            let numeric = (loss(&params, &input, Some(&plus), target)
                - loss(&params, &input, Some(&minus), target))
                / (2.0 * H);
            worst = worst.max(rel_err(analytic, numeric));
        }
    }
    worst
}

fn check_arch(arch: &ArchSpec, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let err = max_grad_error(arch, seed);
        assert!(
            err < TOLERANCE,
            "seed {seed}: max relative gradient error {err:.3e} >= {TOLERANCE:.0e}"
        );
    }
}

#[test]
fn dense_stack_gradients() {
    let arch = ArchSpec {
        in_channels: 1,
        in_h: 1,
        in_w: 7,
        aux_dim: 0,
        conv: vec![],
        hidden: vec![6, 8],
        n_classes: 4,
        init: WeightInit::TruncatedGaussian,
    };
    check_arch(&arch, 100..110);
}

#[test]
fn single_conv_block_gradients() {
    let arch = ArchSpec {
        in_channels: 2,
        in_h: 7,
        in_w: 8,
        aux_dim: 0,
        conv: vec![ConvSpec { out_maps: 3, kh: 3, kw: 3 }],
        hidden: vec![],
        n_classes: 3,
        init: WeightInit::TruncatedGaussian,
    };
    check_arch(&arch, 200..210);
}

#[test]
fn two_conv_two_dense_gradients() {
    let arch = ArchSpec {
        in_channels: 1,
        in_h: 12,
        in_w: 11,
        aux_dim: 0,
        conv: vec![
            ConvSpec { out_maps: 2, kh: 3, kw: 2 },
            ConvSpec { out_maps: 3, kh: 2, kw: 2 },
        ],
        hidden: vec![6],
        n_classes: 3,
        init: WeightInit::TruncatedGaussian,
    };
    check_arch(&arch, 300..310);
}

#[test]
fn reduced_fused_network_gradients() {
    // Shrunk copy of the fused face-audio topology: conv stack, auxiliary
    // features joining at the flatten, growing dense stack, softmax.
    let arch = ArchSpec {
        in_channels: 1,
        in_h: 10,
        in_w: 8,
        aux_dim: 5,
        conv: vec![ConvSpec { out_maps: 2, kh: 3, kw: 3 }],
        hidden: vec![8, 10],
        n_classes: 4,
        init: WeightInit::TruncatedGaussian,
    };
    check_arch(&arch, 400..410);
}

#[test]
fn presoftmax_gradient_is_p_minus_t() {
    // The bias gradient of the final dense layer is exactly the logit
    // gradient, so it must equal softmax(z) - t.
    let arch = ArchSpec {
        in_channels: 1,
        in_h: 1,
        in_w: 6,
        aux_dim: 0,
        conv: vec![],
        hidden: vec![5],
        n_classes: 4,
        init: WeightInit::TruncatedGaussian,
    };
    let mut rng = Rng::new(7);
    for _ in 0..20 {
        let params = random_params(&arch, &mut rng);
        let (input, _) = random_input(&arch, &mut rng);
        let target = rng.below(arch.n_classes);
        let trace = forward_pass(&params, &input, None, 1).unwrap();
        let result = backward_pass(&params, &trace, target, 1).unwrap();
        let LayerGrad::Dense { bias, .. } = result.grads.layers.last().unwrap() else {
            panic!("final layer must be dense");
        };
        for (i, &g) in bias.iter().enumerate() {
            let expected = trace.probabilities()[i] - if i == target { 1.0 } else { 0.0 };
            assert!(
                (g - expected).abs() < 1e-10,
                "logit grad {g} vs p - t {expected}"
            );
        }
    }
}

#[test]
fn dead_rectifier_blocks_gradient() {
    // A dense unit whose pre-activation is negative must receive zero weight
    // gradient through the rectifier.
    let w1 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let b1 = Tensor::from_vec(vec![-10.0, 0.5]).unwrap(); // unit 0 is dead
    let w2 = Tensor::new(vec![2, 2], vec![1.0, -1.0, -1.0, 1.0]).unwrap();
    let b2 = Tensor::from_vec(vec![0.0, 0.0]).unwrap();
    let params = ModelParams {
        layers: vec![
            LayerParams::Dense(sn_core::nn::DenseParams::new(w1, b1).unwrap()),
            LayerParams::Dense(sn_core::nn::DenseParams::new(w2, b2).unwrap()),
        ],
    };
    let input = Tensor::new(vec![1, 1, 2], vec![0.7, 0.3]).unwrap();
    let trace = forward_pass(&params, &input, None, 1).unwrap();
    let result = backward_pass(&params, &trace, 0, 1).unwrap();
    let LayerGrad::Dense { weights, bias } = &result.grads.layers[0] else {
        panic!()
    };
    // Gradients into dead unit 0 (column 0 of the first layer) vanish.
    assert_eq!(weights[0], 0.0);
    assert_eq!(weights[2], 0.0);
    assert_eq!(bias[0], 0.0);
    assert_ne!(bias[1], 0.0);
}

#[test]
fn backward_rejects_mismatched_trace() {
    let arch_a = ArchSpec {
        in_channels: 1,
        in_h: 1,
        in_w: 5,
        aux_dim: 0,
        conv: vec![],
        hidden: vec![4],
        n_classes: 3,
        init: WeightInit::TruncatedGaussian,
    };
    let arch_b = ArchSpec { hidden: vec![6], ..arch_a.clone() };
    let pa = sn_core::nn::init_params(&arch_a, 1).unwrap();
    let pb = sn_core::nn::init_params(&arch_b, 1).unwrap();
    let input = Tensor::new(vec![1, 1, 5], vec![0.1; 5]).unwrap();
    let trace = forward_pass(&pa, &input, None, 1).unwrap();
    assert!(backward_pass(&pb, &trace, 0, 1).is_err());
}

#[test]
fn gradients_finite_and_threads_bitwise_equal() {
    let arch = ArchSpec {
        in_channels: 2,
        in_h: 9,
        in_w: 9,
        aux_dim: 3,
        conv: vec![ConvSpec { out_maps: 4, kh: 3, kw: 3 }],
        hidden: vec![6],
        n_classes: 3,
        init: WeightInit::TruncatedGaussian,
    };
    let mut rng = Rng::new(55);
    let params = random_params(&arch, &mut rng);
    let (input, aux) = random_input(&arch, &mut rng);
    let run = |threads: usize| -> (Vec<f64>, GradientSet) {
        let trace = forward_pass(&params, &input, aux.as_deref(), threads).unwrap();
        let probs = trace.probabilities().to_vec();
        let res = backward_pass(&params, &trace, 1, threads).unwrap();
        (probs, res.grads)
    };
    let (p1, g1) = run(1);
    let (p4, g4) = run(4);
    assert!(p1.iter().all(|v| v.is_finite()));
    for (a, b) in p1.iter().zip(&p4) {
        assert_eq!(a.to_bits(), b.to_bits());
    }
    assert_eq!(g1, g4);
}
