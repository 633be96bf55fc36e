//! Small dense-vector helpers shared by memory and retrieval.

/// Tolerance on the L2 norm of vectors that are supposed to be unit length.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-6;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn l2_norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

pub fn is_unit(v: &[f64]) -> bool {
    !v.is_empty() && (l2_norm(v) - 1.0).abs() <= UNIT_NORM_TOLERANCE
}

/// Scales `v` to unit length. A zero (or non-finite) vector becomes the
/// guard vector `(1, 0, ..., 0)`.
pub fn normalize(mut v: Vec<f64>) -> Vec<f64> {
    let n = l2_norm(&v);
    if n == 0.0 || !n.is_finite() {
        return guard_vector(v.len());
    }
    for x in &mut v {
        *x /= n;
    }
    v
}

pub fn guard_vector(dimension: usize) -> Vec<f64> {
    let mut v = vec![0.0; dimension.max(1)];
    v[0] = 1.0;
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_zero_vector_uses_guard() {
        assert_eq!(normalize(vec![0.0, 0.0, 0.0]), vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_gives_unit_norm() {
        let v = normalize(vec![3.0, 4.0]);
        assert!(is_unit(&v));
        assert!((v[0] - 0.6).abs() < 1e-12);
    }
}
