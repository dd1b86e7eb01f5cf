//! Synthetic frame pairs with known global motion.
//!
//! Textures are Gaussian-blurred random impulse fields evaluated in closed
//! form, so a sub-pixel shift is exact rather than interpolated.

use rand::Rng;

use crate::image::{FlowField, Image};

/// Blurred random impulses: `I(x, y) = 0.5 + gain * sum a_i exp(-|p - p_i|^2 / 2 sigma^2)`.
#[derive(Clone, Debug)]
pub struct Texture {
    impulses: Vec<(f32, f32, f32)>,
    sigma: f32,
    gain: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureParams {
    /// Blur standard deviation in pixels.
    pub sigma: f32,
    /// Impulses per square pixel.
    pub density: f32,
    /// Target intensity standard deviation around 0.5.
    pub contrast: f32,
}

impl Default for TextureParams {
    fn default() -> Self {
        TextureParams {
            sigma: 1.5,
            density: 0.5,
            contrast: 0.2,
        }
    }
}

impl Texture {
    pub fn random(height: usize, width: usize, rng: &mut impl Rng) -> Self {
        Self::with_params(height, width, TextureParams::default(), rng)
    }

    /// Texture covering `[-margin, width + margin] x [-margin, height + margin]`
    /// where the margin is large enough for shifts of a few pixels.
    pub fn with_params(height: usize, width: usize, p: TextureParams, rng: &mut impl Rng) -> Self {
        let margin = 4.0 * p.sigma + 8.0;
        let (x0, x1) = (-margin, width as f32 + margin);
        let (y0, y1) = (-margin, height as f32 + margin);
        let count = ((x1 - x0) * (y1 - y0) * p.density).round() as usize;
        let impulses = (0..count)
            .map(|_| {
                (
                    rng.gen_range(x0..x1),
                    rng.gen_range(y0..y1),
                    rng.gen_range(-1.0f32..1.0),
                )
            })
            .collect();
        // Variance of the impulse sum: density * E[a^2] * pi * sigma^2.
        let std = (p.density / 3.0 * std::f32::consts::PI * p.sigma * p.sigma).sqrt();
        Texture {
            impulses,
            sigma: p.sigma,
            gain: p.contrast / std,
        }
    }

    /// Renders a `height x width` frame whose content is displaced by
    /// `(dx, dy)`: `frame(x, y) = I(x - dx, y - dy)`.
    pub fn render(&self, height: usize, width: usize, dx: f32, dy: f32) -> Image {
        let mut acc = vec![0.0f32; height * width];
        let reach = 4.0 * self.sigma;
        let inv = 1.0 / (2.0 * self.sigma * self.sigma);
        for &(px, py, a) in &self.impulses {
            // Impulse position in frame coordinates.
            let (cx, cy) = (px + dx, py + dy);
            let xa = (cx - reach).ceil().max(0.0) as usize;
            let xb = ((cx + reach).floor().min(width as f32 - 1.0)).max(-1.0);
            let ya = (cy - reach).ceil().max(0.0) as usize;
            let yb = ((cy + reach).floor().min(height as f32 - 1.0)).max(-1.0);
            if xb < 0.0 || yb < 0.0 {
                continue;
            }
            for y in ya..=yb as usize {
                let ddy = y as f32 - cy;
                for x in xa..=xb as usize {
                    let ddx = x as f32 - cx;
                    acc[y * width + x] += a * (-(ddx * ddx + ddy * ddy) * inv).exp();
                }
            }
        }
        let data = acc
            .into_iter()
            .map(|s| (0.5 + self.gain * s).clamp(0.0, 1.0))
            .collect();
        Image::new(height, width, data).expect("extents match buffer")
    }
}

/// One synthetic sample: the reference frame, the moved frame, and the
/// constant ground-truth flow that maps the first onto the second.
#[derive(Clone, Debug)]
pub struct ShiftedPair {
    pub frame1: Image,
    pub frame2: Image,
    pub truth: FlowField,
}

/// Renders a pair related by a global displacement `(dx, dy)` in pixels.
pub fn shifted_pair(
    height: usize,
    width: usize,
    dx: f32,
    dy: f32,
    params: TextureParams,
    rng: &mut impl Rng,
) -> ShiftedPair {
    let tex = Texture::with_params(height, width, params, rng);
    ShiftedPair {
        frame1: tex.render(height, width, 0.0, 0.0),
        frame2: tex.render(height, width, dx, dy),
        truth: FlowField::constant(height, width, dx, dy),
    }
}

/// Pair with a displacement drawn uniformly from the disc of radius `max_shift`.
pub fn random_shifted_pair(
    height: usize,
    width: usize,
    max_shift: f32,
    params: TextureParams,
    rng: &mut impl Rng,
) -> ShiftedPair {
    let (dx, dy) = loop {
        let dx = rng.gen_range(-max_shift..=max_shift);
        let dy = rng.gen_range(-max_shift..=max_shift);
        if dx * dx + dy * dy <= max_shift * max_shift {
            break (dx, dy);
        }
    };
    shifted_pair(height, width, dx, dy, params, rng)
}
