//! Classical image kernels used by the loss and the coarse-to-fine loop.
//!
//! Every kernel clamps coordinates at the frame border.

use crate::error::{Error, Result};
use crate::image::{FlowField, Image};
use crate::tensor::Tensor;

/// Spatiotemporal intensity derivatives, each `[H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Derivatives {
    pub ix: Tensor,
    pub iy: Tensor,
    pub it: Tensor,
}

/// Horn–Schunck derivative estimates: each derivative averages the four
/// first differences along its axis inside the 2x2x2 cube spanned by
/// pixels `(x..=x+1, y..=y+1)` of both frames.
pub fn spatiotemporal_derivatives(frame1: &Image, frame2: &Image) -> Result<Derivatives> {
    frame1.check_same_extents(frame2)?;
    let (h, w) = frame1.extents();
    let mut ix = Vec::with_capacity(h * w);
    let mut iy = Vec::with_capacity(h * w);
    let mut it = Vec::with_capacity(h * w);
    for y in 0..h {
        let y1 = (y + 1).min(h - 1);
        for x in 0..w {
            let x1 = (x + 1).min(w - 1);
            let a = |f: &Image, yy: usize, xx: usize| f.at(yy, xx) as f64;
            let (p00, p01, p10, p11) = (
                a(frame1, y, x),
                a(frame1, y, x1),
                a(frame1, y1, x),
                a(frame1, y1, x1),
            );
            let (q00, q01, q10, q11) = (
                a(frame2, y, x),
                a(frame2, y, x1),
                a(frame2, y1, x),
                a(frame2, y1, x1),
            );
            ix.push((0.25 * ((p01 - p00) + (p11 - p10) + (q01 - q00) + (q11 - q10))) as f32);
            iy.push((0.25 * ((p10 - p00) + (p11 - p01) + (q10 - q00) + (q11 - q01))) as f32);
            it.push((0.25 * ((q00 - p00) + (q01 - p01) + (q10 - p10) + (q11 - p11))) as f32);
        }
    }
    Ok(Derivatives {
        ix: Tensor::from_vec(&[h, w], ix)?,
        iy: Tensor::from_vec(&[h, w], iy)?,
        it: Tensor::from_vec(&[h, w], it)?,
    })
}

/// Bilinear sample at fractional `(x, y)`, with the coordinates first clamped into the frame.
pub fn sample_bilinear(image: &Image, x: f32, y: f32) -> f32 {
    let (h, w) = image.extents();
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f32, y - y0 as f32);
    let top = image.at(y0, x0) + fx * (image.at(y0, x1) - image.at(y0, x0));
    let bottom = image.at(y1, x0) + fx * (image.at(y1, x1) - image.at(y1, x0));
    top + fy * (bottom - top)
}

/// Inverse warp: `out(x, y) = image(x + u(x, y), y + v(x, y))`.
pub fn bilinear_warp(image: &Image, flow: &FlowField) -> Result<Image> {
    let (h, w) = image.extents();
    if flow.extents() != (h, w) {
        return Err(Error::Shape(format!(
            "flow extents {:?} differ from image {h}x{w}",
            flow.extents()
        )));
    }
    Ok(Image::from_fn(h, w, |y, x| {
        let (u, v) = flow.at(y, x);
        sample_bilinear(image, x as f32 + u, y as f32 + v)
    }))
}

const BINOMIAL5: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Binomial low-pass followed by factor-2 decimation. Output extents are
/// `ceil(H / 2) x ceil(W / 2)`.
pub fn pyramid_downsample(image: &Image) -> Result<Image> {
    let (h, w) = image.extents();
    if h < 2 || w < 2 {
        return Err(Error::Degenerate(format!(
            "cannot downsample a {h}x{w} frame"
        )));
    }
    let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
    // Horizontal pass at the kept columns, all rows.
    let mut rows = vec![0.0f64; h * ow];
    for y in 0..h {
        for ox in 0..ow {
            let cx = (2 * ox) as isize;
            rows[y * ow + ox] = BINOMIAL5
                .iter()
                .enumerate()
                .map(|(t, &k)| k * image.at_clamped(y as isize, cx + t as isize - 2) as f64)
                .sum();
        }
    }
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let cy = (2 * oy) as isize;
        for ox in 0..ow {
            let acc: f64 = BINOMIAL5
                .iter()
                .enumerate()
                .map(|(t, &k)| {
                    let yy = (cy + t as isize - 2).clamp(0, h as isize - 1) as usize;
                    k * rows[yy * ow + ox]
                })
                .sum();
            out.push(acc as f32);
        }
    }
    Image::new(oh, ow, out)
}

/// Gaussian-style pyramid: level 0 is the input, each further level halves it.
pub fn build_pyramid(image: &Image, levels: usize) -> Result<Vec<Image>> {
    let mut pyr = vec![image.clone()];
    for _ in 1..levels {
        let next = pyramid_downsample(pyr.last().expect("non-empty"))?;
        pyr.push(next);
    }
    Ok(pyr)
}

fn median_filter_channel(t: &Tensor, h: usize, w: usize, radius: usize) -> Tensor {
    let r = radius as isize;
    let side = 2 * radius + 1;
    let src = t.data();
    let mut window = Vec::with_capacity(side * side);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            window.clear();
            for dy in -r..=r {
                let yy = (y + dy).clamp(0, h as isize - 1) as usize;
                for dx in -r..=r {
                    let xx = (x + dx).clamp(0, w as isize - 1) as usize;
                    window.push(src[yy * w + xx]);
                }
            }
            let mid = window.len() / 2;
            let (_, m, _) = window.select_nth_unstable_by(mid, |a, b| a.total_cmp(b));
            out.push(*m);
        }
    }
    Tensor::from_vec(&[h, w], out).expect("same extents")
}

/// Replaces `u` and `v` independently by their median over the
/// `(2 * radius + 1)^2` window.
pub fn median_filter_flow(flow: &FlowField, radius: usize) -> Result<FlowField> {
    if radius == 0 {
        return Err(Error::Config("median radius must be >= 1".into()));
    }
    let (h, w) = flow.extents();
    Ok(FlowField {
        u: median_filter_channel(&flow.u, h, w, radius),
        v: median_filter_channel(&flow.v, h, w, radius),
    })
}

/// Doubles the flow grid by row/column repetition and doubles the
/// displacements so they stay in pixels of the finer grid.
pub fn upsample_flow(flow: &FlowField) -> FlowField {
    let (h, w) = flow.extents();
    let up = |t: &Tensor| {
        let src = t.data();
        let data = (0..2 * h)
            .flat_map(|y| (0..2 * w).map(move |x| 2.0 * src[(y / 2) * w + x / 2]))
            .collect();
        Tensor::from_vec(&[2 * h, 2 * w], data).expect("doubled extents")
    };
    FlowField {
        u: up(&flow.u),
        v: up(&flow.v),
    }
}
