//! Finite-difference checks of the analytic gradients, run in 64-bit.
//!
//! Two checks are provided: the per-pixel flow gradient of the constraint
//! loss, and the parameter gradients of a small network trained through
//! that loss end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::Image;
use crate::image_ops::spatiotemporal_derivatives;
use crate::loss::ConstraintTerms;
use crate::network::{stack_frames, LayerSpec, Network};
use crate::tensor::Tensor;

/// Largest relative error accepted for the per-pixel loss gradient.
pub const LOSS_TOLERANCE: f64 = 1e-5;
/// Largest relative error accepted for network parameter gradients.
pub const NETWORK_TOLERANCE: f64 = 1e-3;

/// Central-difference steps for the loss and the network parameters.
const LOSS_STEP: f64 = 1e-4;
const STEP: f64 = 1e-6;
/// Magnitudes below this are compared absolutely.
const REL_FLOOR: f64 = 1e-8;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Three-layer network on 8x8 inputs: a stride-2 encoder, an upsampling
/// decoder and a linear head.
pub const SMALL_LAYERS: [LayerSpec; 3] = [
    LayerSpec {
        kernel: 3,
        in_channels: 2,
        out_channels: 4,
        stride: 2,
        upsample_before: false,
        activation: true,
    },
    LayerSpec {
        kernel: 3,
        in_channels: 4,
        out_channels: 4,
        stride: 1,
        upsample_before: true,
        activation: true,
    },
    LayerSpec {
        kernel: 3,
        in_channels: 4,
        out_channels: 2,
        stride: 1,
        upsample_before: false,
        activation: false,
    },
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub loss_max_rel: f64,
    pub network_max_rel: f64,
    pub network_parameters: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.loss_max_rel < LOSS_TOLERANCE && self.network_max_rel < NETWORK_TOLERANCE
    }
}

/// Runs both checks. With `corrupt_backward` the analytic network
/// gradient is deliberately perturbed, which the check must catch.
pub fn run_gradcheck(seed: u64, corrupt_backward: bool) -> Result<GradCheckReport> {
    let loss_max_rel = check_loss_gradient(seed, 100, 16, 16, 1e-3)?;
    let (network_max_rel, network_parameters) = check_network_gradient(seed, corrupt_backward)?;
    Ok(GradCheckReport {
        loss_max_rel,
        network_max_rel,
        network_parameters,
    })
}

/// Largest relative error between the analytic per-pixel gradient and
/// central differences over `instances` random `height x width` problems.
pub fn check_loss_gradient(
    seed: u64,
    instances: usize,
    height: usize,
    width: usize,
    eps: f64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = height * width;
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let mut draw = |scale: f64| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
        };
        let (u, v) = (draw(2.0), draw(2.0));
        let (ix, iy, it) = (draw(1.0), draw(1.0), draw(1.0));
        let (mut gu, mut gv) = (vec![0.0; n], vec![0.0; n]);
        ConstraintTerms {
            u: &u,
            v: &v,
            ix: &ix,
            iy: &iy,
            it: &it,
        }
        .gradient(eps, &mut gu, &mut gv)?;
        // Only pixel i's term depends on (u_i, v_i), so differencing that
        // term alone equals differencing the sum, without the rounding
        // noise of the other terms.
        for i in 0..n {
            let term = |du: f64, dv: f64| {
                ConstraintTerms {
                    u: &[u[i] + du],
                    v: &[v[i] + dv],
                    ix: &ix[i..=i],
                    iy: &iy[i..=i],
                    it: &it[i..=i],
                }
                .loss(eps)
            };
            let h = LOSS_STEP;
            let du = (term(h, 0.0)? - term(-h, 0.0)?) / (2.0 * h);
            let dv = (term(0.0, h)? - term(0.0, -h)?) / (2.0 * h);
            worst = worst
                .max(relative_error(gu[i], du))
                .max(relative_error(gv[i], dv));
        }
    }
    Ok(worst)
}

/// Largest relative error over every parameter of [`SMALL_LAYERS`], with
/// the number of parameters checked.
pub fn check_network_gradient(seed: u64, corrupt_backward: bool) -> Result<(f64, usize)> {
    const SIDE: usize = 8;
    const EPS: f64 = 1e-3;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let frame1 = Image::from_fn(SIDE, SIDE, |_, _| rng.gen());
    let frame2 = Image::from_fn(SIDE, SIDE, |_, _| rng.gen());
    let d = spatiotemporal_derivatives(&frame1, &frame2)?;
    let widen = |t: &Tensor| t.data().iter().map(|&x| x as f64).collect::<Vec<_>>();
    let (ix, iy, it) = (widen(&d.ix), widen(&d.iy), widen(&d.it));
    let input: Tensor<f64> = stack_frames(&frame1, &frame2)?;
    let mut net = Network::<f64>::from_specs(&SMALL_LAYERS, seed)?;

    let loss_of = |net: &Network<f64>| -> Result<(f64, Tensor<f64>)> {
        let cache = net.forward_tensor(&input)?;
        let (u, v) = cache.output().data().split_at(SIDE * SIDE);
        let terms = ConstraintTerms {
            u,
            v,
            ix: &ix,
            iy: &iy,
            it: &it,
        };
        let mut grad = vec![0.0; 2 * SIDE * SIDE];
        let (gu, gv) = grad.split_at_mut(SIDE * SIDE);
        terms.gradient(EPS, gu, gv)?;
        Ok((terms.loss(EPS)?, Tensor::from_vec(&[2, SIDE, SIDE], grad)?))
    };

    let cache = net.forward_tensor(&input)?;
    let (_, grad_out) = loss_of(&net)?;
    let mut analytic = net.backward(&cache, &grad_out)?;
    if corrupt_backward {
        // A backward pass off by a constant factor in one layer.
        let (w, _) = &mut analytic.layers[0];
        for g in w.data_mut() {
            *g *= 1.05;
        }
    }

    let mut worst = 0.0f64;
    let mut count = 0;
    for l in 0..net.layers().len() {
        for (which, grads) in [&analytic.layers[l].0, &analytic.layers[l].1]
            .into_iter()
            .enumerate()
        {
            for (k, &g) in grads.data().iter().enumerate() {
                let p0 = *param_mut(&mut net, l, which, k);
                let mut at = |value: f64| {
                    *param_mut(&mut net, l, which, k) = value;
                    loss_of(&net).map(|r| r.0)
                };
                let plus = at(p0 + STEP)?;
                let minus = at(p0 - STEP)?;
                at(p0)?;
                worst = worst.max(relative_error(g, (plus - minus) / (2.0 * STEP)));
                count += 1;
            }
        }
    }
    Ok((worst, count))
}

fn param_mut(net: &mut Network<f64>, layer: usize, which: usize, k: usize) -> &mut f64 {
    let (w, b) = net.layers_mut()[layer].params_mut();
    let t = if which == 0 { w } else { b };
    &mut t.data_mut()[k]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_examples() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert_eq!(relative_error(2.0, 1.0), 0.5);
        assert!(relative_error(1e-12, 0.0) < 1e-3);
    }

    #[test]
    fn loss_gradient_matches() {
        assert!(check_loss_gradient(1, 5, 8, 8, 1e-3).unwrap() < LOSS_TOLERANCE);
    }

    #[test]
    fn network_gradient_matches_and_corruption_is_caught() {
        let (clean, count) = check_network_gradient(2, false).unwrap();
        assert_eq!(count, 76 + 148 + 74);
        assert!(clean < NETWORK_TOLERANCE, "{clean}");
        let (bad, _) = check_network_gradient(2, true).unwrap();
        assert!(bad > NETWORK_TOLERANCE, "{bad}");
    }
}
