//! Scalar kernels shared by every module.
//!
//! Squared L2 is the canonical distance. All accumulation happens in `f64`
//! and results are rounded once to `f32` where 32-bit storage is wanted.

#[inline]
pub fn l2_sq_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = f64::from(x) - f64::from(y);
            d * d
        })
        .sum()
}

/// Squared L2 distance rounded to `f32`.
#[inline]
pub fn l2_sq(a: &[f32], b: &[f32]) -> f32 {
    l2_sq_f64(a, b) as f32
}

#[inline]
pub fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

#[inline]
pub fn norm_sq_f64(a: &[f32]) -> f64 {
    a.iter().map(|&x| f64::from(x) * f64::from(x)).sum()
}

/// Squared L2 in plain `f32` arithmetic; used by the hot loops of k-means and
/// ADC table construction, where `f64` accumulation buys nothing.
#[inline]
pub(crate) fn l2_sq_fast(a: &[f32], b: &[f32]) -> f32 {
    let mut acc = 0.0f32;
    for (&x, &y) in a.iter().zip(b) {
        let d = x - y;
        acc += d * d;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_values() {
        let d = 1.0 - f64::from(0.9f32);
        assert_eq!(l2_sq(&[0.9, 0.0], &[1.0, 0.0]), (d * d) as f32);
        assert_eq!(dot_f64(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]), 32.0);
        assert_eq!(norm_sq_f64(&[3.0, 4.0]), 25.0);
        assert_eq!(l2_sq_fast(&[1.0, 1.0], &[4.0, 5.0]), 25.0);
    }
}
