//! Standard-normal helpers and replicate summaries.

use libm::erfc;

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Scale factor that makes the median absolute deviation consistent for a Gaussian SD.
pub const MAD_SCALE: f64 = 1.4826;

pub fn norm_pdf(z: f64) -> f64 {
    (-0.5 * z * z - LN_SQRT_2PI).exp()
}

pub fn norm_ln_pdf(z: f64) -> f64 {
    -0.5 * z * z - LN_SQRT_2PI
}

pub fn norm_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

/// Mills ratio `(1 - Φ(z)) / φ(z)` for large positive `z`, by backward continued fraction.
fn mills_ratio_tail(z: f64) -> f64 {
    let mut acc = z;
    for k in (1..=80).rev() {
        acc = z + k as f64 / acc;
    }
    1.0 / acc
}

/// `ln(1 - Φ(z))`, accurate far into the upper tail.
pub fn norm_ln_sf(z: f64) -> f64 {
    if z < 5.0 {
        (0.5 * erfc(z / std::f64::consts::SQRT_2)).ln()
    } else {
        norm_ln_pdf(z) + mills_ratio_tail(z).ln()
    }
}

/// `ln Φ(z)`.
pub fn norm_ln_cdf(z: f64) -> f64 {
    norm_ln_sf(-z)
}

/// Hazard `φ(z) / (1 - Φ(z))` (inverse Mills ratio).
pub fn norm_hazard(z: f64) -> f64 {
    if z < 5.0 {
        norm_pdf(z) / (0.5 * erfc(z / std::f64::consts::SQRT_2))
    } else {
        1.0 / mills_ratio_tail(z)
    }
}

/// Derivative of the hazard, `h(z) (h(z) - z)`; lies in (0, 1).
pub fn norm_hazard_deriv(z: f64) -> f64 {
    let h = norm_hazard(z);
    if z < 5.0 {
        h * (h - z)
    } else {
        // h - z loses digits in the tail; expand 1/R - z from the continued fraction instead.
        let r = mills_ratio_tail(z);
        let h_minus_z = (1.0 - z * r) / r;
        h * h_minus_z
    }
}

/// Arithmetic mean, accumulated as offsets from the first value (exact for constant input).
pub fn mean(xs: &[f64]) -> Option<f64> {
    let first = *xs.first()?;
    Some(first + xs.iter().map(|x| x - first).sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation (n - 1 denominator); needs two or more values.
pub fn sd(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// Sample variance with n - 1 denominator.
pub fn variance(xs: &[f64]) -> Option<f64> {
    sd(xs).map(|s| s * s)
}

/// Linear-interpolation quantile on sorted data (Hyndman-Fan type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let h = (sorted.len() - 1) as f64 * q.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    Some(sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo]))
}

fn sorted_copy(xs: &[f64]) -> Vec<f64> {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

pub fn median(xs: &[f64]) -> Option<f64> {
    quantile_sorted(&sorted_copy(xs), 0.5)
}

pub fn quantile(xs: &[f64], q: f64) -> Option<f64> {
    quantile_sorted(&sorted_copy(xs), q)
}

/// Scaled median absolute deviation; needs two or more values.
pub fn scaled_mad(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let med = median(xs)?;
    let dev: Vec<f64> = xs.iter().map(|x| (x - med).abs()).collect();
    median(&dev).map(|m| MAD_SCALE * m)
}
