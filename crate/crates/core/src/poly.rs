//! Legendre polynomial evaluation with first and second derivatives.

/// `P_0..P_{n-1}` and their first two derivatives at `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LegendreValues {
    pub value: Vec<f64>,
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
}

/// Evaluate the first `n` Legendre polynomials on `[-1, 1]` at `x`.
pub fn legendre(n: usize, x: f64) -> LegendreValues {
    let mut value = vec![0.0; n];
    let mut d1 = vec![0.0; n];
    let mut d2 = vec![0.0; n];
    if n == 0 {
        return LegendreValues { value, d1, d2 };
    }
    value[0] = 1.0;
    if n > 1 {
        value[1] = x;
        d1[1] = 1.0;
    }
    for k in 1..n.saturating_sub(1) {
        let kf = k as f64;
        value[k + 1] = ((2.0 * kf + 1.0) * x * value[k] - kf * value[k - 1]) / (kf + 1.0);
        // P'_{k+1} = P'_{k-1} + (2k+1) P_k, and differentiate once more for P''.
        d1[k + 1] = d1[k - 1] + (2.0 * kf + 1.0) * value[k];
        d2[k + 1] = d2[k - 1] + (2.0 * kf + 1.0) * d1[k];
    }
    LegendreValues { value, d1, d2 }
}

/// Gauss-Legendre nodes and weights on `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = Vec::with_capacity(n);
    let mut weights = Vec::with_capacity(n);
    for i in 0..n {
        // Chebyshev-like initial guess, refined by Newton on P_n.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 1.0;
        for _ in 0..100 {
            let l = legendre(n + 1, x);
            let p = l.value[n];
            dp = l.d1[n];
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let l = legendre(n + 1, x);
        dp = if l.d1[n] != 0.0 { l.d1[n] } else { dp };
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes.push(0.5 * (x + 1.0));
        weights.push(0.5 * w);
    }
    let mut pairs: Vec<(f64, f64)> = nodes.into_iter().zip(weights).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn low_order_closed_forms() {
        let x = 0.3;
        let l = legendre(4, x);
        assert!((l.value[2] - 0.5 * (3.0 * x * x - 1.0)).abs() < 1e-15);
        assert!((l.value[3] - 0.5 * (5.0 * x * x * x - 3.0 * x)).abs() < 1e-15);
        assert!((l.d1[2] - 3.0 * x).abs() < 1e-15);
        assert!((l.d1[3] - 0.5 * (15.0 * x * x - 3.0)).abs() < 1e-14);
        assert!((l.d2[2] - 3.0).abs() < 1e-15);
        assert!((l.d2[3] - 15.0 * x).abs() < 1e-14);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let h = 1e-5;
        for &x in &[-0.7, 0.0, 0.45] {
            let l = legendre(12, x);
            let lp = legendre(12, x + h);
            let lm = legendre(12, x - h);
            for k in 0..12 {
                let fd1 = (lp.value[k] - lm.value[k]) / (2.0 * h);
                let fd2 = (lp.d1[k] - lm.d1[k]) / (2.0 * h);
                assert!((fd1 - l.d1[k]).abs() < 1e-6 * (1.0 + l.d1[k].abs()));
                assert!((fd2 - l.d2[k]).abs() < 1e-5 * (1.0 + l.d2[k].abs()));
            }
        }
    }

    #[test]
    fn quadrature_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre_unit(8);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        // degree 15 is exact for 8 nodes
        let integral: f64 = x.iter().zip(&w).map(|(x, w)| w * x.powi(15)).sum();
        assert!((integral - 1.0 / 16.0).abs() < 1e-14);
        let e: f64 = x.iter().zip(&w).map(|(x, w)| w * x.exp()).sum();
        assert!((e - (1f64.exp() - 1.0)).abs() < 1e-14);
    }
}
