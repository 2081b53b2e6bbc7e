use crate::error::{DoktError, Result};

/// Cosine similarity in `[-1, 1]`; rejects zero-norm inputs.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(DoktError::Shape(format!(
            "cosine over vectors of length {} and {}",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return Err(DoktError::DegenerateVector("cosine of a zero-norm vector".into()));
    }
    // Adding +0.0 turns -0.0 into +0.0.
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0) + 0.0)
}

/// Cosine mapped affinely onto `[0, 1]`.
pub fn scaled_cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    cosine(a, b).map(scale_cosine)
}

#[inline]
pub fn scale_cosine(raw: f64) -> f64 {
    (raw + 1.0) / 2.0
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn squared_euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Population variance (divides by the length).
pub fn population_variance(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_similarity_is_one() {
        let v = [0.3, -1.2, 4.0];
        assert!((cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
        assert!((scaled_cosine(&v, &v).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn antipodal_is_minus_one() {
        let v = [0.3, -1.2, 4.0];
        let w: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &w).unwrap() + 1.0).abs() < 1e-12);
        assert!(scaled_cosine(&v, &w).unwrap().abs() < 1e-12);
    }

    #[test]
    fn orthogonal_is_zero() {
        assert_eq!(cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert_eq!(scaled_cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.5);
    }

    #[test]
    fn symmetric() {
        let a = [0.2, 0.9, -0.4];
        let b = [1.5, -0.1, 0.7];
        assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
    }

    #[test]
    fn zero_norm_rejected() {
        assert!(matches!(
            cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(DoktError::DegenerateVector(_))
        ));
    }

    #[test]
    fn population_variance_of_one_hot() {
        // (C-1)/C^2 for C = 4
        assert!((population_variance(&[1.0, 0.0, 0.0, 0.0]) - 3.0 / 16.0).abs() < 1e-15);
    }
}
