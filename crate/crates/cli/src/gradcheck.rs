//! Finite-difference self-check of the backward passes, runnable in the
//! field. Prints the worst relative error over several reduced architectures
//! and fails if any coordinate misses the tolerance.

use crate::config::RunConfig;
use sn_core::error::{Error, Result};
use sn_core::nn::{
    backward_pass, forward_pass, ArchSpec, ConvSpec, LayerGrad, LayerParams, ModelParams,
    WeightInit,
};
use sn_core::rng::Rng;
use sn_core::tensor::Tensor;

const H: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn loss(params: &ModelParams, input: &Tensor, aux: Option<&[f64]>, target: usize) -> f64 {
    let trace = forward_pass(params, input, aux, 1).expect("forward");
    -trace.probabilities()[target].max(1e-12).ln()
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

/// Max relative error between analytic and central-difference gradients for
/// one seeded model and input.
fn max_error(arch: &ArchSpec, seed: u64) -> f64 {
    let mut rng = Rng::new(seed);
    let mut params = sn_core::nn::init_params(arch, rng.next_u64()).expect("init");
    // Healthy scales keep every layer's gradient well above probe noise.
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
    let n = arch.in_channels * arch.in_h * arch.in_w;
    let input = Tensor::new(
        vec![arch.in_channels, arch.in_h, arch.in_w],
        (0..n).map(|_| rng.range(-1.0, 1.0)).collect(),
    )
    .expect("input");
    let aux: Option<Vec<f64>> = (arch.aux_dim > 0)
        .then(|| (0..arch.aux_dim).map(|_| rng.range(-1.0, 1.0)).collect());
    let target = rng.below(arch.n_classes);
    let trace = forward_pass(&params, &input, aux.as_deref(), 1).expect("forward");
    let result = backward_pass(&params, &trace, target, 1).expect("backward");

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
                let numeric = (loss(&plus, &input, aux.as_deref(), target)
                    - loss(&minus, &input, aux.as_deref(), target))
                    / (2.0 * H);
                worst = worst.max(rel_err(analytic, numeric));
            }
        }
    }
    worst
}

pub fn run(config: &RunConfig) -> Result<()> {
    let base_seed = config.u64("seed")?;
    let suites: [(&str, ArchSpec); 3] = [
        (
            "dense stack",
            ArchSpec {
                in_channels: 1,
                in_h: 1,
                in_w: 7,
                aux_dim: 0,
                conv: vec![],
                hidden: vec![6, 8],
                n_classes: 4,
                init: WeightInit::TruncatedGaussian,
            },
        ),
        (
            "conv block",
            ArchSpec {
                in_channels: 2,
                in_h: 7,
                in_w: 8,
                aux_dim: 0,
                conv: vec![ConvSpec { out_maps: 3, kh: 3, kw: 3 }],
                hidden: vec![],
                n_classes: 3,
                init: WeightInit::TruncatedGaussian,
            },
        ),
        (
            "reduced fused network",
            ArchSpec {
                in_channels: 1,
                in_h: 10,
                in_w: 8,
                aux_dim: 5,
                conv: vec![ConvSpec { out_maps: 2, kh: 3, kw: 3 }],
                hidden: vec![8, 10],
                n_classes: 4,
                init: WeightInit::TruncatedGaussian,
            },
        ),
    ];
    let mut global_worst = 0.0f64;
    for (label, arch) in &suites {
        let mut worst = 0.0f64;
        for s in 0..10 {
            worst = worst.max(max_error(arch, base_seed.wrapping_add(1000 + s)));
        }
        println!("{label:<24} max relative error {worst:.3e} over 10 seeds");
        global_worst = global_worst.max(worst);
    }
    println!("gradcheck max relative error: {global_worst:.3e} (tolerance {TOLERANCE:.0e})");
    if global_worst < TOLERANCE {
        Ok(())
    } else {
        Err(Error::Numerical(format!(
            "gradient check failed: {global_worst:.3e} >= {TOLERANCE:.0e}"
        )))
    }
}
