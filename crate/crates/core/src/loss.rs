//! Unsupervised training objective: the Charbonnier-penalised optical flow
//! constraint `E(F) = sum sqrt((u Ix + v Iy + It)^2 + eps)` and its
//! per-pixel gradient with respect to the flow.

use crate::error::{Error, Result};
use crate::image::{FlowField, Image};
use crate::image_ops::Derivatives;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    /// Constant inside the Charbonnier square root.
    pub epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { epsilon: 1e-3 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "Charbonnier epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Borrowed per-pixel inputs of the constraint, all of one length.
#[derive(Clone, Copy, Debug)]
pub struct ConstraintTerms<'a, T> {
    pub u: &'a [T],
    pub v: &'a [T],
    pub ix: &'a [T],
    pub iy: &'a [T],
    pub it: &'a [T],
}

impl<'a, T: Scalar> ConstraintTerms<'a, T> {
    fn check(&self) -> Result<usize> {
        let n = self.u.len();
        if [self.v.len(), self.ix.len(), self.iy.len(), self.it.len()]
            .iter()
            .any(|&m| m != n)
        {
            return Err(Error::Shape(format!(
                "constraint inputs differ in length: u {}, v {}, Ix {}, Iy {}, It {}",
                n,
                self.v.len(),
                self.ix.len(),
                self.iy.len(),
                self.it.len()
            )));
        }
        Ok(n)
    }

    fn residual(&self, i: usize) -> T {
        self.u[i] * self.ix[i] + self.v[i] * self.iy[i] + self.it[i]
    }

    /// Summed Charbonnier penalty of the residuals.
    pub fn loss(&self, eps: T) -> Result<T> {
        let n = self.check()?;
        Ok((0..n).fold(T::zero(), |acc, i| {
            let r = self.residual(i);
            acc + (r * r + eps).sqrt()
        }))
    }

    /// Per-pixel `(dE/du, dE/dv)` written into the output slices.
    pub fn gradient(&self, eps: T, grad_u: &mut [T], grad_v: &mut [T]) -> Result<()> {
        let n = self.check()?;
        if grad_u.len() != n || grad_v.len() != n {
            return Err(Error::Shape("gradient buffers have the wrong length".into()));
        }
        for i in 0..n {
            let r = self.residual(i);
            let s = r / (r * r + eps).sqrt();
            grad_u[i] = self.ix[i] * s;
            grad_v[i] = self.iy[i] * s;
        }
        Ok(())
    }
}

fn widened(flow: &FlowField, d: &Derivatives) -> Result<[Vec<f64>; 5]> {
    let ext = [flow.height(), flow.width()];
    for (name, t) in [("Ix", &d.ix), ("Iy", &d.iy), ("It", &d.it)] {
        if t.shape() != ext {
            return Err(Error::Shape(format!(
                "{name} has shape {:?}, flow is {:?}",
                t.shape(),
                ext
            )));
        }
    }
    let w = |s: &[f32]| s.iter().map(|&x| x as f64).collect::<Vec<_>>();
    Ok([
        w(flow.u.data()),
        w(flow.v.data()),
        w(d.ix.data()),
        w(d.iy.data()),
        w(d.it.data()),
    ])
}

/// `sum_{x,y} sqrt((u Ix + v Iy + It)^2 + eps)`, accumulated in 64-bit.
pub fn ofc_loss(flow: &FlowField, d: &Derivatives, cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    let [u, v, ix, iy, it] = widened(flow, d)?;
    ConstraintTerms {
        u: &u,
        v: &v,
        ix: &ix,
        iy: &iy,
        it: &it,
    }
    .loss(cfg.epsilon)
}

/// Per-pixel gradient `(Ix r, Iy r) / sqrt(r^2 + eps)` with `r = u Ix + v Iy + It`.
///
/// Summing the returned field over pixels gives the two-component total derivative.
pub fn ofc_loss_grad(flow: &FlowField, d: &Derivatives, cfg: &LossConfig) -> Result<FlowField> {
    cfg.validate()?;
    let [u, v, ix, iy, it] = widened(flow, d)?;
    let n = u.len();
    let (mut gu, mut gv) = (vec![0.0; n], vec![0.0; n]);
    ConstraintTerms {
        u: &u,
        v: &v,
        ix: &ix,
        iy: &iy,
        it: &it,
    }
    .gradient(cfg.epsilon, &mut gu, &mut gv)?;
    let narrow = |x: Vec<f64>| x.into_iter().map(|g| g as f32).collect();
    FlowField::from_components(flow.height(), flow.width(), narrow(gu), narrow(gv))
}

/// Sum of squared intensity differences between the reference frame and
/// the warped second frame.
pub fn photometric_loss(frame1: &Image, warped2: &Image) -> Result<f64> {
    frame1.check_same_extents(warped2)?;
    Ok(frame1
        .data()
        .iter()
        .zip(warped2.data())
        .map(|(&a, &b)| ((b - a) as f64).powi(2))
        .sum())
}
