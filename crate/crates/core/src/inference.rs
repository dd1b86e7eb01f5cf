//! Coarse-to-fine iterative flow estimation.
//!
//! At every pyramid level the network predicts a residual flow between the
//! reference frame and the second frame warped by the accumulated flow.
//! Each residual is median filtered and added to the total, and the second
//! frame is re-warped from its original with the new total. Between levels
//! the total is upsampled by two.

use crate::error::{Error, Result};
use crate::image::{FlowField, Image};
use crate::image_ops::{bilinear_warp, build_pyramid, median_filter_flow, upsample_flow};
use crate::loss::photometric_loss;
use crate::network::EncoderDecoderNet;

/// Smallest side the coarsest pyramid level may have under the default configuration.
pub const MIN_COARSE_SIDE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct InferenceConfig {
    /// Pyramid levels; the coarsest is downsampled by `2^(num_scales - 1)`.
    pub num_scales: usize,
    pub iterations_per_scale: usize,
    pub median_radius: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            num_scales: 1,
            iterations_per_scale: 4,
            median_radius: 2,
        }
    }
}

impl InferenceConfig {
    /// Default configuration with as many levels as keep the coarsest
    /// side at least [`MIN_COARSE_SIDE`] pixels.
    pub fn for_extents(height: usize, width: usize) -> Self {
        let mut scales = 1;
        while height.min(width) >> scales >= MIN_COARSE_SIDE {
            scales += 1;
        }
        InferenceConfig {
            num_scales: scales,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_scales == 0 || self.iterations_per_scale == 0 || self.median_radius == 0 {
            return Err(Error::Config(format!(
                "scales, iterations and median radius must all be >= 1: {self:?}"
            )));
        }
        if self.num_scales > 16 {
            return Err(Error::Config(format!(
                "{} pyramid levels is more than any frame supports",
                self.num_scales
            )));
        }
        Ok(())
    }
}

/// Photometric residual recorded after one update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceEntry {
    /// Pyramid level, 0 being full resolution.
    pub scale: usize,
    /// Updates applied at this level, counting from 1.
    pub iteration: usize,
    pub photometric_loss: f64,
}

/// Flow from `frame1` to `frame2` at full resolution.
pub fn estimate_flow(
    net: &EncoderDecoderNet,
    frame1: &Image,
    frame2: &Image,
    cfg: &InferenceConfig,
) -> Result<FlowField> {
    Ok(run(net, frame1, frame2, cfg, false)?.0)
}

/// Same computation as [`estimate_flow`], also returning the photometric
/// loss of `(frame1_n, warped2_n)` after every update, coarse to fine.
pub fn iteration_trace(
    net: &EncoderDecoderNet,
    frame1: &Image,
    frame2: &Image,
    cfg: &InferenceConfig,
) -> Result<(FlowField, Vec<TraceEntry>)> {
    run(net, frame1, frame2, cfg, true)
}

/// Padded extents admissible for `scales` levels on this network.
pub fn padded_extents(
    net: &EncoderDecoderNet,
    height: usize,
    width: usize,
    scales: usize,
) -> (usize, usize) {
    let m = net.required_multiple() << (scales - 1);
    (height.div_ceil(m) * m, width.div_ceil(m) * m)
}

fn run(
    net: &EncoderDecoderNet,
    frame1: &Image,
    frame2: &Image,
    cfg: &InferenceConfig,
    record: bool,
) -> Result<(FlowField, Vec<TraceEntry>)> {
    cfg.validate()?;
    frame1.check_same_extents(frame2)?;
    let (h, w) = frame1.extents();
    let (ph, pw) = padded_extents(net, h, w, cfg.num_scales);
    let (f1, f2) = if (ph, pw) == (h, w) {
        (frame1.clone(), frame2.clone())
    } else {
        (frame1.pad_replicate(ph, pw)?, frame2.pad_replicate(ph, pw)?)
    };
    let pyr1 = build_pyramid(&f1, cfg.num_scales)?;
    let pyr2 = build_pyramid(&f2, cfg.num_scales)?;
    let coarse = cfg.num_scales - 1;
    net.check_extents(pyr1[coarse].height(), pyr1[coarse].width())?;

    let mut total = FlowField::zeros(pyr1[coarse].height(), pyr1[coarse].width());
    let mut trace = Vec::new();
    for level in (0..cfg.num_scales).rev() {
        let (ref1, orig2) = (&pyr1[level], &pyr2[level]);
        let mut warped = if level == coarse {
            orig2.clone()
        } else {
            total = upsample_flow(&total);
            bilinear_warp(orig2, &total)?
        };
        for iteration in 1..=cfg.iterations_per_scale {
            let delta = net.forward(ref1, &warped)?;
            let delta = median_filter_flow(&delta, cfg.median_radius)?;
            total.add_assign(&delta)?;
            warped = bilinear_warp(orig2, &total)?;
            if !total.all_finite() {
                return Err(Error::NonFinite(format!(
                    "accumulated flow became non-finite at level {level}, iteration {iteration}"
                )));
            }
            if record {
                trace.push(TraceEntry {
                    scale: level,
                    iteration,
                    photometric_loss: photometric_loss(ref1, &warped)?,
                });
            }
        }
    }
    let flow = if (ph, pw) == (h, w) {
        total
    } else {
        total.crop(h, w)?
    };
    Ok((flow, trace))
}
