//! Companion-form casting of ARIMA fits and X-factor inflation.

use nalgebra::{DMatrix, DVector};

use super::ArimaFit;
use crate::error::{Error, Result};
use crate::gaussian::RegimeParams;
use crate::switch::ChannelDynamicsBlock;

/// Coefficients `a_i` of `x_t = Σ a_i x_{t−i} + …`, i.e. the expansion of
/// `φ(B)(1 − B)^d`.
pub fn level_coefficients(ar: &[f64], d: usize) -> Vec<f64> {
    // polynomial in B, constant term first
    let mut poly = vec![1.0];
    poly.extend(ar.iter().map(|v| -v));
    for _ in 0..d {
        let mut next = vec![0.0; poly.len() + 1];
        for (i, c) in poly.iter().enumerate() {
            next[i] += c;
            next[i + 1] -= c;
        }
        poly = next;
    }
    poly[1..].iter().map(|c| -c).collect()
}

/// Level-space state-space block of a fit.
///
/// State `[x_t, …, x_{t−p−d}, ε_t, …, ε_{t−q+1}]`; the top row carries the
/// integrated AR coefficients, a trailing zero, then the MA coefficients.
pub fn cast_to_state_space(fit: &ArimaFit) -> ChannelDynamicsBlock {
    let p = fit.ar_coeffs.len();
    let q = fit.ma_coeffs.len();
    let d = fit.order.d;
    let n_pos = p + d + 1;
    let n = n_pos + q;
    let mut a = DMatrix::zeros(n, n);
    for (i, c) in level_coefficients(&fit.ar_coeffs, d).iter().enumerate() {
        a[(0, i)] = *c;
    }
    for (j, theta) in fit.ma_coeffs.iter().enumerate() {
        a[(0, n_pos + j)] = *theta;
    }
    for i in 1..n_pos {
        a[(i, i - 1)] = 1.0;
    }
    for k in 1..q {
        a[(n_pos + k, n_pos + k - 1)] = 1.0;
    }
    let mut g = DVector::zeros(n);
    g[0] = 1.0;
    if q > 0 {
        g[n_pos] = 1.0;
    }
    let noise = &g * g.transpose() * fit.system_var;
    let mut selector = DVector::zeros(n);
    selector[0] = 1.0;
    ChannelDynamicsBlock {
        transition: a,
        noise,
        obs_noise: fit.obs_var,
        selector,
        order: fit.order,
        n_pos,
        n_ma: q,
    }
}

/// `Q ← ξ·Q`, everything else unchanged.
pub fn inflate_x_factor(stable: &RegimeParams, xi: f64) -> Result<RegimeParams> {
    if !(xi > 1.0 && xi.is_finite()) {
        return Err(Error::invalid(format!("inflation factor must exceed 1, got {xi}")));
    }
    Ok(RegimeParams { q: &stable.q * xi, ..stable.clone() })
}

pub fn inflate_block(block: &ChannelDynamicsBlock, xi: f64) -> Result<ChannelDynamicsBlock> {
    if !(xi > 1.0 && xi.is_finite()) {
        return Err(Error::invalid(format!("inflation factor must exceed 1, got {xi}")));
    }
    Ok(ChannelDynamicsBlock { noise: &block.noise * xi, ..block.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arima::ArimaOrder;
    use crate::gaussian::{gaussian_loglik, GaussianBelief};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn fit(p: &[f64], d: usize, q: &[f64]) -> ArimaFit {
        ArimaFit {
            order: ArimaOrder::new(p.len(), d, q.len()),
            ar_coeffs: p.to_vec(),
            ma_coeffs: q.to_vec(),
            system_var: 0.7,
            obs_var: 0.2,
            mean: 0.0,
            log_likelihood: 0.0,
            n_params: p.len() + q.len() + 2,
        }
    }

    #[test]
    fn ar2_block_shape() {
        let b = cast_to_state_space(&fit(&[0.5, -0.3], 0, &[]));
        assert_eq!(b.dim(), 3);
        assert_eq!(b.transition.row(0).iter().copied().collect::<Vec<_>>(), vec![0.5, -0.3, 0.0]);
        assert_eq!(b.transition[(1, 0)], 1.0);
        assert_eq!(b.transition[(2, 1)], 1.0);
        assert_eq!(b.selector.as_slice(), &[1.0, 0.0, 0.0]);
        assert_eq!(cast_to_state_space(&fit(&[0.4], 0, &[])).dim(), 2);
    }

    #[test]
    fn integrated_coefficients() {
        assert_eq!(level_coefficients(&[0.5, -0.3], 1), vec![1.5, -0.8, 0.3]);
        assert_eq!(level_coefficients(&[], 2), vec![2.0, -1.0]);
    }

    /// Shared-noise simulation: ARMA on the differences, then integration,
    /// against the cast state-space recursion.
    #[test]
    fn casting_equivalence() {
        let f = fit(&[0.6, -0.2], 1, &[0.4]);
        let b = cast_to_state_space(&f);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let eps: Vec<f64> = (0..300).map(|_| StandardNormal.sample(&mut rng)).collect();

        // history: x_{-1} = x_{-2} = x_{-3} = 0, ε_{-1} = 0
        let mut w = vec![0.0; 2];
        let mut x_prev = 0.0;
        let mut e_prev = 0.0;
        let mut levels = Vec::new();
        for &e in &eps {
            let wt = 0.6 * w[w.len() - 1] - 0.2 * w[w.len() - 2] + e + 0.4 * e_prev;
            w.push(wt);
            x_prev += wt;
            levels.push(x_prev);
            e_prev = e;
        }

        let mut s = DVector::zeros(b.dim());
        for (t, &e) in eps.iter().enumerate() {
            let mut noise = DVector::zeros(b.dim());
            noise[0] = e;
            noise[b.n_pos] = e;
            s = &b.transition * s + noise;
            assert!((s[0] - levels[t]).abs() < 1e-10);
        }
    }

    #[test]
    fn inflation() {
        let b = cast_to_state_space(&fit(&[0.5], 0, &[]));
        let r = b.as_regime(0);
        let doubled = inflate_x_factor(&r, 2.0).unwrap();
        assert_eq!(doubled.q[(0, 0)], 1.4);
        assert_eq!(doubled.a, r.a);
        assert!(inflate_x_factor(&r, 1.0).is_err());
        let near = inflate_x_factor(&r, 1.0 + 1e-12).unwrap();
        assert!((near.q - &r.q).amax() < 1e-11);

        let prior = GaussianBelief::new(DVector::zeros(2), DMatrix::identity(2, 2)).unwrap();
        let outlier = DVector::from_vec(vec![8.0]);
        let big = inflate_x_factor(&r, 20.0).unwrap();
        let pred = |p: &RegimeParams| crate::gaussian::kalman_predict(&prior, &p.a, &p.q).unwrap();
        let ll_s = gaussian_loglik(&pred(&r), &outlier, &r.c, &r.r).unwrap();
        let ll_x = gaussian_loglik(&pred(&big), &outlier, &big.c, &big.r).unwrap();
        assert!(ll_x > ll_s);
    }
}
