//! Grayscale frames and dense flow fields.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Single-channel frame with intensities in `[0, 1]`, stored as `[1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    intensities: Tensor,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Ok(Image {
            intensities: Tensor::from_vec(&[1, height, width], data)?,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        Image {
            intensities: Tensor::from_fn(&[1, height, width], |i| f(i / width, i % width)),
        }
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Image {
            intensities: Tensor::full(&[1, height, width], value),
        }
    }

    pub fn height(&self) -> usize {
        self.intensities.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.intensities.shape()[2]
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn data(&self) -> &[f32] {
        self.intensities.data()
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        self.intensities.data_mut()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.intensities
    }

    /// Intensity at row `y`, column `x`.
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.data()[y * self.width() + x]
    }

    /// Intensity with coordinates clamped into the frame.
    pub fn at_clamped(&self, y: isize, x: isize) -> f32 {
        let yy = y.clamp(0, self.height() as isize - 1) as usize;
        let xx = x.clamp(0, self.width() as isize - 1) as usize;
        self.at(yy, xx)
    }

    pub fn mean(&self) -> f64 {
        self.data().iter().map(|&x| x as f64).sum::<f64>() / self.data().len() as f64
    }

    /// Copies the `height x width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height() || left + width > self.width() || height == 0 || width == 0
        {
            return Err(Error::Shape(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds frame {}x{}",
                self.height(),
                self.width()
            )));
        }
        Ok(Image::from_fn(height, width, |y, x| self.at(top + y, left + x)))
    }

    /// Extends the frame to `height x width` by replicating the last row and column.
    pub fn pad_replicate(&self, height: usize, width: usize) -> Result<Image> {
        if height < self.height() || width < self.width() {
            return Err(Error::Shape(format!(
                "cannot pad {}x{} down to {height}x{width}",
                self.height(),
                self.width()
            )));
        }
        Ok(Image::from_fn(height, width, |y, x| {
            self.at_clamped(y as isize, x as isize)
        }))
    }

    pub fn check_same_extents(&self, other: &Image) -> Result<()> {
        if self.extents() != other.extents() {
            return Err(Error::Shape(format!(
                "frame extents differ: {:?} vs {:?}",
                self.extents(),
                other.extents()
            )));
        }
        Ok(())
    }
}

/// Per-pixel displacement in pixels; `u` is horizontal, `v` vertical.
/// Both components are `[H, W]` tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub u: Tensor,
    pub v: Tensor,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            u: Tensor::zeros(&[height, width]),
            v: Tensor::zeros(&[height, width]),
        }
    }

    pub fn constant(height: usize, width: usize, u: f32, v: f32) -> Self {
        FlowField {
            u: Tensor::full(&[height, width], u),
            v: Tensor::full(&[height, width], v),
        }
    }

    pub fn from_components(height: usize, width: usize, u: Vec<f32>, v: Vec<f32>) -> Result<Self> {
        Ok(FlowField {
            u: Tensor::from_vec(&[height, width], u)?,
            v: Tensor::from_vec(&[height, width], v)?,
        })
    }

    /// Splits a `[2, H, W]` network output into `(u, v)`.
    pub fn from_channels(t: &Tensor) -> Result<Self> {
        let (c, h, w) = t.dims3()?;
        if c != 2 {
            return Err(Error::Shape(format!(
                "flow tensor must have 2 channels, got {c}"
            )));
        }
        let (u, v) = t.data().split_at(h * w);
        Self::from_components(h, w, u.to_vec(), v.to_vec())
    }

    /// Stacks `(u, v)` into a `[2, H, W]` tensor.
    pub fn to_channels(&self) -> Tensor {
        let (h, w) = self.extents();
        let mut data = self.u.data().to_vec();
        data.extend_from_slice(self.v.data());
        Tensor::from_vec(&[2, h, w], data).expect("flow components share extents")
    }

    pub fn height(&self) -> usize {
        self.u.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.u.shape()[1]
    }

    pub fn extents(&self) -> (usize, usize) {
        (self.height(), self.width())
    }

    pub fn at(&self, y: usize, x: usize) -> (f32, f32) {
        let i = y * self.width() + x;
        (self.u.data()[i], self.v.data()[i])
    }

    pub fn all_finite(&self) -> bool {
        self.u.all_finite() && self.v.all_finite()
    }

    pub fn add_assign(&mut self, other: &FlowField) -> Result<()> {
        self.u.axpy(1.0, &other.u)?;
        self.v.axpy(1.0, &other.v)
    }

    pub fn crop(&self, height: usize, width: usize) -> Result<FlowField> {
        if height > self.height() || width > self.width() {
            return Err(Error::Shape(format!(
                "cannot crop flow {:?} to {height}x{width}",
                self.extents()
            )));
        }
        let pick = |t: &Tensor| {
            let src = t.data();
            (0..height)
                .flat_map(|y| src[y * self.width()..][..width].iter().copied())
                .collect::<Vec<_>>()
        };
        FlowField::from_components(height, width, pick(&self.u), pick(&self.v))
    }

    /// Mean of per-pixel magnitudes.
    pub fn mean_magnitude(&self) -> f64 {
        let n = self.u.len() as f64;
        self.u
            .data()
            .iter()
            .zip(self.v.data())
            .map(|(&u, &v)| (u as f64).hypot(v as f64))
            .sum::<f64>()
            / n
    }

    /// Component-wise medians of `u` and `v`.
    pub fn median(&self) -> (f32, f32) {
        fn med(xs: &[f32]) -> f32 {
            let mut s = xs.to_vec();
            s.sort_by(|a, b| a.total_cmp(b));
            let n = s.len();
            if n % 2 == 1 {
                s[n / 2]
            } else {
                0.5 * (s[n / 2 - 1] + s[n / 2])
            }
        }
        (med(self.u.data()), med(self.v.data()))
    }

    pub fn check_same_extents(&self, other: &FlowField) -> Result<()> {
        if self.extents() != other.extents() {
            return Err(Error::Shape(format!(
                "flow extents differ: {:?} vs {:?}",
                self.extents(),
                other.extents()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channels_round_trip() {
        let f = FlowField::from_components(2, 2, vec![1., 2., 3., 4.], vec![5., 6., 7., 8.])
            .unwrap();
        let t = f.to_channels();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert_eq!(FlowField::from_channels(&t).unwrap(), f);
    }

    #[test]
    fn pad_and_crop() {
        let img = Image::from_fn(2, 3, |y, x| (y * 3 + x) as f32);
        let padded = img.pad_replicate(4, 4).unwrap();
        assert_eq!(padded.at(3, 3), 5.0);
        assert_eq!(padded.at(0, 3), 2.0);
        assert_eq!(padded.crop(0, 0, 2, 3).unwrap(), img);
        let f = FlowField::constant(4, 4, 1.0, 2.0);
        assert_eq!(f.crop(2, 3).unwrap(), FlowField::constant(2, 3, 1.0, 2.0));
    }
}
