//! Endpoint and angular error, split at a ground-truth magnitude of 5 px.

use crate::error::Result;
use crate::image::FlowField;

/// Ground-truth magnitude separating small from large motions. Pixels
/// exactly at the boundary count as large.
pub const MAGNITUDE_SPLIT: f64 = 5.0;

/// Average endpoint (pixels) and angular (degrees) errors per bucket.
/// Empty buckets report zero with a zero count.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FlowMetrics {
    pub aee_lt5: f64,
    pub aee_ge5: f64,
    pub aee_tot: f64,
    pub aae_lt5: f64,
    pub aae_ge5: f64,
    pub aae_tot: f64,
    pub count_lt5: usize,
    pub count_ge5: usize,
}

impl FlowMetrics {
    /// `(label, value)` rows in reporting order.
    pub fn rows(&self) -> [(&'static str, f64); 6] {
        [
            ("AEE-05", self.aee_lt5),
            ("AEE-5so", self.aee_ge5),
            ("AEE-tot", self.aee_tot),
            ("AAE-05", self.aae_lt5),
            ("AAE-5so", self.aae_ge5),
            ("AAE-tot", self.aae_tot),
        ]
    }
}

/// Euclidean distance between estimated and true flow vectors.
pub fn endpoint_error(est: (f64, f64), truth: (f64, f64)) -> f64 {
    (est.0 - truth.0).hypot(est.1 - truth.1)
}

/// Angle in degrees between `(u, v, 1)` and `(u', v', 1)`.
pub fn angular_error(est: (f64, f64), truth: (f64, f64)) -> f64 {
    let a = [est.0, est.1, 1.0];
    let b = [truth.0, truth.1, 1.0];
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let cross = [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ];
    let cross_norm = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    // atan2 stays accurate near zero, where acos of the normalised dot product does not.
    cross_norm.atan2(dot).to_degrees()
}

/// Compares `estimate` against `truth`. Pixels whose ground truth is not
/// finite are excluded from every mean.
pub fn compute_metrics(estimate: &FlowField, truth: &FlowField) -> Result<FlowMetrics> {
    estimate.check_same_extents(truth)?;
    let mut sums = [[0.0f64; 2]; 2]; // [bucket][aee, aae]
    let mut counts = [0usize; 2];
    let pixels = estimate
        .u
        .data()
        .iter()
        .zip(estimate.v.data())
        .zip(truth.u.data().iter().zip(truth.v.data()));
    for ((&eu, &ev), (&tu, &tv)) in pixels {
        if !tu.is_finite() || !tv.is_finite() {
            continue;
        }
        let (e, t) = ((eu as f64, ev as f64), (tu as f64, tv as f64));
        let bucket = usize::from(t.0.hypot(t.1) >= MAGNITUDE_SPLIT);
        sums[bucket][0] += endpoint_error(e, t);
        sums[bucket][1] += angular_error(e, t);
        counts[bucket] += 1;
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    let total = counts[0] + counts[1];
    Ok(FlowMetrics {
        aee_lt5: mean(sums[0][0], counts[0]),
        aee_ge5: mean(sums[1][0], counts[1]),
        aee_tot: mean(sums[0][0] + sums[1][0], total),
        aae_lt5: mean(sums[0][1], counts[0]),
        aae_ge5: mean(sums[1][1], counts[1]),
        aae_tot: mean(sums[0][1] + sums[1][1], total),
        count_lt5: counts[0],
        count_ge5: counts[1],
    })
}
