//! Temperature-softened KL distillation between an old (teacher) and a new (student) output.

use crate::autograd::{log_softmax_rows, softmax_rows, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Matrix;

fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature must be positive, got {tau}")))
    }
}

/// `KL(softmax(src/τ) ‖ softmax(tgt/τ))`
pub fn distill_kl(src: &[f64], tgt: &[f64], tau: f64) -> Result<f64> {
    check_temperature(tau)?;
    if src.len() != tgt.len() || src.is_empty() {
        return Err(Error::invalid(format!("shape mismatch: {} vs {}", src.len(), tgt.len())));
    }
    if src.iter().chain(tgt).any(|v| !v.is_finite()) {
        return Err(Error::invalid("distillation inputs must be finite"));
    }
    let s = Matrix::row_vector(&src.iter().map(|v| v / tau).collect::<Vec<_>>());
    let t = Matrix::row_vector(&tgt.iter().map(|v| v / tau).collect::<Vec<_>>());
    let (ls, lt) = (log_softmax_rows(&s), log_softmax_rows(&t));
    let kl: f64 = ls.data().iter().zip(lt.data()).map(|(a, b)| a.exp() * (a - b)).sum();
    Ok(kl.max(0.0))
}

/// Mean of [`distill_kl`] over corresponding rows.
pub fn distill_kl_rows(src: &Matrix, tgt: &Matrix, tau: f64) -> Result<f64> {
    if src.shape() != tgt.shape() {
        return Err(Error::invalid(format!("shape mismatch: {:?} vs {:?}", src.shape(), tgt.shape())));
    }
    if src.rows() == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for r in 0..src.rows() {
        total += distill_kl(src.row(r), tgt.row(r), tau)?;
    }
    Ok(total / src.rows() as f64)
}

/// Graph form of [`distill_kl_rows`] with a constant teacher `src` and a differentiable student `tgt`.
pub fn distill_kl_var(g: &mut Graph, src: &Matrix, tgt: Var, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    if g.shape(tgt) != src.shape() || src.rows() == 0 {
        return Err(Error::invalid(format!("shape mismatch: {:?} vs {:?}", src.shape(), g.shape(tgt))));
    }
    let scaled = src.map(|v| v / tau);
    let p = softmax_rows(&scaled);
    let lp = log_softmax_rows(&scaled);
    let entropy_term: f64 = p.data().iter().zip(lp.data()).map(|(a, b)| a * b).sum();
    let t = g.scale(tgt, 1.0 / tau);
    let lt = g.log_softmax_rows(t);
    let pv = g.constant(p);
    let cross = g.mul(pv, lt);
    let cross = g.sum(cross);
    let neg = g.scale(cross, -1.0);
    let kl = g.add_scalar(neg, entropy_term);
    Ok(g.scale(kl, 1.0 / src.rows() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn known_value() {
        let v = distill_kl(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        let a = 1.0 / (1.0 + (-1.0f64).exp());
        let expected = a * (a / (1.0 - a)).ln() + (1.0 - a) * ((1.0 - a) / a).ln();
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.46212).abs() < 1e-5);
    }

    #[test]
    fn decreases_with_temperature() {
        let vals: Vec<f64> = [1.0, 2.0, 4.0, 8.0].iter().map(|&t| distill_kl(&[1.0, 0.0], &[0.0, 1.0], t).unwrap()).collect();
        assert!(vals.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn errors() {
        assert!(distill_kl(&[1.0], &[1.0, 2.0], 1.0).is_err());
        assert!(distill_kl(&[1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn graph_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = Matrix::randn(3, 5, 1.0, &mut rng);
        let b = Matrix::randn(3, 5, 1.0, &mut rng);
        let mut g = Graph::new();
        let v = g.variable(b.clone());
        let l = distill_kl_var(&mut g, &a, v, 2.0).unwrap();
        assert!((g.value(l).get(0, 0) - distill_kl_rows(&a, &b, 2.0).unwrap()).abs() < 1e-12);
    }
}
