//! Gaussian belief algebra: Kalman prediction and update, predictive
//! log-densities and moment-matching collapse of Gaussian mixtures.
//!
//! Observation vectors use `NaN` as the missing marker. A channel takes part
//! in an update only when its value is present *and* its row of `C` is not
//! identically zero, so artifact channels (zeroed `C` rows) and data gaps are
//! handled by the same row-removal.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, cholesky_jittered, symmetrize, JITTER};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Mean and covariance over the latent physiology.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    #[serde(with = "linalg::vector")]
    pub mean: DVector<f64>,
    #[serde(with = "linalg::row_major")]
    pub cov: DMatrix<f64>,
}

impl GaussianBelief {
    /// Validating constructor: square, matching, finite, symmetric PSD.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let b = Self::from_parts(mean, cov)?;
        b.validate()?;
        Ok(b)
    }

    /// Checks dimensions and symmetrizes without the eigen-decomposition.
    pub(crate) fn from_parts(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != cov.ncols() || cov.nrows() != mean.len() {
            return Err(Error::dim(format!(
                "belief mean has length {} but covariance is {}x{}",
                mean.len(),
                cov.nrows(),
                cov.ncols()
            )));
        }
        if !linalg::all_finite_vec(&mean) {
            return Err(Error::NonFinite("belief mean"));
        }
        if !linalg::all_finite_mat(&cov) {
            return Err(Error::NonFinite("belief covariance"));
        }
        Ok(Self { mean, cov: symmetrize(&cov) })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn validate(&self) -> Result<()> {
        if linalg::asymmetry(&self.cov) > 1e-10 {
            return Err(Error::invalid("belief covariance is not symmetric"));
        }
        if linalg::min_eigenvalue(&self.cov) < -1e-9 {
            return Err(Error::NotPsd("belief covariance"));
        }
        Ok(())
    }
}

/// Per-regime linear-Gaussian parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegimeParams {
    #[serde(with = "linalg::row_major")]
    pub a: DMatrix<f64>,
    #[serde(with = "linalg::row_major")]
    pub q: DMatrix<f64>,
    #[serde(with = "linalg::row_major")]
    pub c: DMatrix<f64>,
    #[serde(with = "linalg::row_major")]
    pub r: DMatrix<f64>,
    pub regime_id: usize,
}

impl RegimeParams {
    pub fn new(
        a: DMatrix<f64>,
        q: DMatrix<f64>,
        c: DMatrix<f64>,
        r: DMatrix<f64>,
        regime_id: usize,
    ) -> Result<Self> {
        let p = Self { a, q, c, r, regime_id };
        p.check_dims()?;
        Ok(p)
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn obs_dim(&self) -> usize {
        self.c.nrows()
    }

    pub fn check_dims(&self) -> Result<()> {
        let n = self.a.nrows();
        let m = self.c.nrows();
        if self.a.ncols() != n
            || self.q.shape() != (n, n)
            || self.c.ncols() != n
            || self.r.shape() != (m, m)
        {
            return Err(Error::dim(format!(
                "regime {}: A {:?}, Q {:?}, C {:?}, R {:?}",
                self.regime_id,
                self.a.shape(),
                self.q.shape(),
                self.c.shape(),
                self.r.shape()
            )));
        }
        Ok(())
    }

    /// Full invariant check: dimensions, symmetric PSD noise and, when
    /// `binary_c` is set, a 0/1 observation matrix with at most one 1 per row.
    pub fn validate(&self, binary_c: bool) -> Result<()> {
        self.check_dims()?;
        for (m, what) in [(&self.q, "Q"), (&self.r, "R")] {
            if linalg::asymmetry(m) > 1e-10 {
                return Err(Error::invalid(format!("{what} is not symmetric")));
            }
            if !linalg::is_psd(m, 1e-9) {
                return Err(Error::NotPsd(if what == "Q" { "Q" } else { "R" }));
            }
        }
        if binary_c {
            for i in 0..self.c.nrows() {
                let row = self.c.row(i);
                if row.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::invalid(format!("C row {i} is not binary")));
                }
                if row.iter().filter(|&&v| v == 1.0).count() > 1 {
                    return Err(Error::invalid(format!("C row {i} selects more than one state")));
                }
            }
        }
        Ok(())
    }
}

/// A finite mixture of Gaussian beliefs with normalized weights.
#[derive(Debug, Clone)]
pub struct WeightedGaussianMixture {
    components: Vec<(f64, GaussianBelief)>,
}

impl WeightedGaussianMixture {
    pub fn new(components: Vec<(f64, GaussianBelief)>) -> Result<Self> {
        let Some((_, first)) = components.first() else {
            return Err(Error::invalid("mixture needs at least one component"));
        };
        let d = first.dim();
        let mut total = 0.0;
        for (w, b) in &components {
            if !(w.is_finite() && *w >= 0.0) {
                return Err(Error::invalid(format!("mixture weight {w} is not a probability")));
            }
            if b.dim() != d {
                return Err(Error::dim("mixture components have different dimensions"));
            }
            total += w;
        }
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("mixture weights sum to {total}")));
        }
        Ok(Self { components })
    }

    pub fn components(&self) -> &[(f64, GaussianBelief)] {
        &self.components
    }
}

/// Time update: `N(A m, A P Aᵀ + Q)`.
pub fn kalman_predict(
    belief: &GaussianBelief,
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    let n = belief.dim();
    if a.shape() != (n, n) || q.shape() != (n, n) {
        return Err(Error::dim(format!(
            "predict: belief dim {n}, A {:?}, Q {:?}",
            a.shape(),
            q.shape()
        )));
    }
    let mean = a * &belief.mean;
    let cov = a * &belief.cov * a.transpose() + q;
    if !linalg::all_finite_vec(&mean) || !linalg::all_finite_mat(&cov) {
        return Err(Error::NonFinite("predicted belief"));
    }
    Ok(GaussianBelief { mean, cov: symmetrize(&cov) })
}

/// Rows of `(C, R, y)` that carry information: value present and `C` row
/// not identically zero.
pub fn observed_rows(y: &DVector<f64>, c: &DMatrix<f64>) -> Vec<usize> {
    (0..c.nrows())
        .filter(|&i| y[i].is_finite() && c.row(i).iter().any(|&v| v != 0.0))
        .collect()
}

struct Reduced {
    c: DMatrix<f64>,
    r: DMatrix<f64>,
    y: DVector<f64>,
}

fn reduce(y: &DVector<f64>, c: &DMatrix<f64>, r: &DMatrix<f64>, rows: &[usize]) -> Reduced {
    let k = rows.len();
    let n = c.ncols();
    let mut cr = DMatrix::zeros(k, n);
    let mut rr = DMatrix::zeros(k, k);
    let mut yr = DVector::zeros(k);
    for (a, &i) in rows.iter().enumerate() {
        cr.row_mut(a).copy_from(&c.row(i));
        yr[a] = y[i];
        for (b, &j) in rows.iter().enumerate() {
            rr[(a, b)] = r[(i, j)];
        }
    }
    Reduced { c: cr, r: rr, y: yr }
}

fn check_obs_dims(
    belief: &GaussianBelief,
    y: &DVector<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<()> {
    let m = c.nrows();
    if c.ncols() != belief.dim() || y.len() != m || r.shape() != (m, m) {
        return Err(Error::dim(format!(
            "observation: belief dim {}, y {}, C {:?}, R {:?}",
            belief.dim(),
            y.len(),
            c.shape(),
            r.shape()
        )));
    }
    Ok(())
}

/// Measurement update and predictive log-density computed together.
///
/// Returns the input belief and a log-density of `0.0` when no channel is
/// observed.
pub fn kalman_update_with_loglik(
    belief: &GaussianBelief,
    y: &DVector<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<(GaussianBelief, f64)> {
    check_obs_dims(belief, y, c, r)?;
    let rows = observed_rows(y, c);
    if rows.is_empty() {
        return Ok((belief.clone(), 0.0));
    }
    let red = reduce(y, c, r, &rows);
    let p = &belief.cov;
    let pct = p * red.c.transpose();
    let s = &red.c * &pct + &red.r;
    let chol = cholesky_jittered(&s, "innovation covariance")?;
    let resid = &red.y - &red.c * &belief.mean;

    // K = P Cᵀ S⁻¹, solved as S Kᵀ = C P.
    let gain = chol.solve(&pct.transpose()).transpose();
    let mean = &belief.mean + &gain * &resid;
    let n = belief.dim();
    let ikc = DMatrix::<f64>::identity(n, n) - &gain * &red.c;
    // Joseph form.
    let cov = &ikc * p * ikc.transpose() + &gain * &red.r * gain.transpose();
    if !linalg::all_finite_vec(&mean) || !linalg::all_finite_mat(&cov) {
        return Err(Error::NonFinite("updated belief"));
    }

    let k = rows.len() as f64;
    let solved = chol.solve(&resid);
    let maha = resid.dot(&solved);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let ll = -0.5 * (k * LN_2PI + log_det + maha);
    if !ll.is_finite() {
        return Err(Error::NonFinite("predictive log-density"));
    }
    Ok((GaussianBelief { mean, cov: symmetrize(&cov) }, ll))
}

/// Gaussian conditioning of the belief on the observed channels of `y`.
pub fn kalman_update(
    belief: &GaussianBelief,
    y: &DVector<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<GaussianBelief> {
    kalman_update_with_loglik(belief, y, c, r).map(|(b, _)| b)
}

/// `log N(y; C m, C P Cᵀ + R)` over the observed channels.
pub fn gaussian_loglik(
    belief: &GaussianBelief,
    y: &DVector<f64>,
    c: &DMatrix<f64>,
    r: &DMatrix<f64>,
) -> Result<f64> {
    check_obs_dims(belief, y, c, r)?;
    let rows = observed_rows(y, c);
    if rows.is_empty() {
        return Err(Error::invalid("log-density needs at least one observed channel"));
    }
    let red = reduce(y, c, r, &rows);
    let s = &red.c * &belief.cov * red.c.transpose() + &red.r;
    let chol = symmetrize(&s)
        .cholesky()
        .ok_or(Error::NotPsd("predictive covariance"))?;
    let resid = &red.y - &red.c * &belief.mean;
    let maha = resid.dot(&chol.solve(&resid));
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    Ok(-0.5 * (rows.len() as f64 * LN_2PI + log_det + maha))
}

/// Single Gaussian with the exact first and second moments of the mixture.
pub fn moment_match_collapse(mix: &WeightedGaussianMixture) -> GaussianBelief {
    collapse_weighted(mix.components().iter().map(|(w, b)| (*w, b)))
}

pub(crate) fn collapse_weighted<'a, I>(components: I) -> GaussianBelief
where
    I: IntoIterator<Item = (f64, &'a GaussianBelief)> + Clone,
{
    let mut iter = components.clone().into_iter();
    let (_, first) = iter.next().expect("collapse of an empty mixture");
    let n = first.dim();
    let mut mean = DVector::zeros(n);
    for (w, b) in components.clone() {
        if w > 0.0 {
            mean.axpy(w, &b.mean, 1.0);
        }
    }
    let mut cov = DMatrix::zeros(n, n);
    for (w, b) in components {
        if w > 0.0 {
            let d = &b.mean - &mean;
            cov += (&b.cov + &d * d.transpose()) * w;
        }
    }
    GaussianBelief { mean, cov: symmetrize(&cov) }
}

/// Log-likelihood of a univariate series under a time-invariant model
/// `x' = A x + w`, `y = h·x + v`, starting from the prior `N(m0, P0)` on the
/// state at the first observation time.
///
/// Allocation-light path used inside likelihood optimisation. Once the
/// predicted covariance stops changing (relative change below 1e-14) the gain
/// is frozen until the next missing value.
pub fn univariate_loglik(
    a: &DMatrix<f64>,
    q: &DMatrix<f64>,
    h: &DVector<f64>,
    r: f64,
    m0: &DVector<f64>,
    p0: &DMatrix<f64>,
    obs: &[f64],
) -> Result<f64> {
    let n = a.nrows();
    if a.ncols() != n || q.shape() != (n, n) || h.len() != n || m0.len() != n || p0.shape() != (n, n)
    {
        return Err(Error::dim("univariate_loglik: inconsistent model dimensions"));
    }
    // Nonzeros of A by row; the ARIMA transitions are companion-sparse.
    let a_rows: Vec<Vec<(usize, f64)>> =
        (0..n).map(|i| (0..n).filter(|&j| a[(i, j)] != 0.0).map(|j| (j, a[(i, j)])).collect()).collect();
    let q_rm: Vec<f64> = (0..n * n).map(|k| q[(k / n, k % n)]).collect();
    let h: Vec<f64> = h.iter().copied().collect();
    let mut m: Vec<f64> = m0.iter().copied().collect();
    let mut p: Vec<f64> = (0..n * n).map(|k| p0[(k / n, k % n)]).collect();

    let mut ph = vec![0.0; n];
    let mut gain = vec![0.0; n];
    let mut ap = vec![0.0; n * n];
    let mut p_before = vec![0.0; n * n];
    let mut tmp_m = vec![0.0; n];
    // (A · gain, innovation variance, predicted covariance) once converged.
    let mut frozen: Option<(Vec<f64>, f64, Vec<f64>)> = None;
    // Squared innovations and their count accumulated while frozen.
    let (mut frozen_sq, mut frozen_n) = (0.0, 0usize);
    let mut ll = 0.0;
    let h_nz: Vec<(usize, f64)> = h.iter().enumerate().filter(|(_, v)| **v != 0.0).map(|(i, v)| (i, *v)).collect();
    let flush = |ll: &mut f64, s: f64, sq: &mut f64, cnt: &mut usize| {
        *ll += -0.5 * (*cnt as f64 * (LN_2PI + s.ln()) + *sq / s);
        *sq = 0.0;
        *cnt = 0;
    };

    for &y in obs {
        if let Some((ag, s, p_pred)) = &frozen {
            if y.is_finite() {
                let e = y - h_nz.iter().map(|&(i, v)| v * m[i]).sum::<f64>();
                frozen_sq += e * e;
                frozen_n += 1;
                for ((o, row), g) in tmp_m.iter_mut().zip(&a_rows).zip(ag) {
                    *o = row.iter().map(|&(j, a)| a * m[j]).sum::<f64>() + g * e;
                }
                std::mem::swap(&mut m, &mut tmp_m);
                continue;
            }
            flush(&mut ll, *s, &mut frozen_sq, &mut frozen_n);
            p.copy_from_slice(p_pred);
            frozen = None;
        }

        let observed = y.is_finite();
        let mut s = 0.0;
        if observed {
            p_before.copy_from_slice(&p);
            mat_vec(&p, &h, &mut ph, n);
            s = dot(&h, &ph) + r + JITTER;
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Singular("univariate innovation variance"));
            }
            for i in 0..n {
                gain[i] = ph[i] / s;
            }
            for i in 0..n {
                for j in 0..n {
                    p[i * n + j] -= gain[i] * ph[j];
                }
            }
            let e = y - dot(&h, &m);
            ll += -0.5 * (LN_2PI + s.ln() + e * e / s);
            for i in 0..n {
                m[i] += gain[i] * e;
            }
        }

        sparse_mat_vec(&a_rows, &m, &mut tmp_m);
        m.copy_from_slice(&tmp_m);

        for (i, row) in a_rows.iter().enumerate() {
            for j in 0..n {
                ap[i * n + j] = row.iter().map(|&(k, v)| v * p[k * n + j]).sum();
            }
        }
        let mut scale = 0.0_f64;
        for i in 0..n {
            for (j, row) in a_rows.iter().enumerate() {
                let v = row.iter().map(|&(k, a)| ap[i * n + k] * a).sum::<f64>() + q_rm[i * n + j];
                p[i * n + j] = v;
                scale = scale.max(v.abs());
            }
        }
        if !scale.is_finite() {
            return Err(Error::NonFinite("univariate predicted covariance"));
        }
        if observed {
            let change = p
                .iter()
                .zip(&p_before)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if change <= 1e-14 * scale {
                let mut ag = vec![0.0; n];
                sparse_mat_vec(&a_rows, &gain, &mut ag);
                frozen = Some((ag, s, p.clone()));
            }
        }
    }
    if let Some((_, s, _)) = &frozen {
        flush(&mut ll, *s, &mut frozen_sq, &mut frozen_n);
    }
    if !ll.is_finite() {
        return Err(Error::NonFinite("univariate log-likelihood"));
    }
    Ok(ll)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sparse_mat_vec(rows: &[Vec<(usize, f64)>], v: &[f64], out: &mut [f64]) {
    for (o, row) in out.iter_mut().zip(rows) {
        *o = row.iter().map(|&(j, a)| a * v[j]).sum();
    }
}

fn mat_vec(m: &[f64], v: &[f64], out: &mut [f64], n: usize) {
    for i in 0..n {
        out[i] = (0..n).map(|j| m[i * n + j] * v[j]).sum();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar(m: f64, v: f64) -> GaussianBelief {
        GaussianBelief::new(DVector::from_element(1, m), DMatrix::from_element(1, 1, v)).unwrap()
    }

    fn m1(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn predict_identity_is_noop() {
        let b = GaussianBelief::new(
            DVector::from_vec(vec![1.0, -2.0]),
            DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]),
        )
        .unwrap();
        let out = kalman_predict(&b, &DMatrix::identity(2, 2), &DMatrix::zeros(2, 2)).unwrap();
        assert_eq!(out, b);
    }

    #[test]
    fn predict_scalar_arithmetic() {
        let out = kalman_predict(&scalar(1.0, 1.0), &m1(2.0), &m1(1.0)).unwrap();
        assert_eq!(out.mean[0], 2.0);
        assert_eq!(out.cov[(0, 0)], 5.0);
    }

    #[test]
    fn predict_rejects_bad_dims() {
        assert!(kalman_predict(&scalar(0.0, 1.0), &DMatrix::identity(2, 2), &m1(1.0)).is_err());
    }

    #[test]
    fn update_without_observations_returns_input() {
        let b = scalar(0.3, 2.0);
        let y = DVector::from_element(1, f64::NAN);
        assert_eq!(kalman_update(&b, &y, &m1(1.0), &m1(1.0)).unwrap(), b);
        // zeroed C row behaves the same as a missing value
        let y = DVector::from_element(1, 5.0);
        assert_eq!(kalman_update(&b, &y, &m1(0.0), &m1(1.0)).unwrap(), b);
    }

    #[test]
    fn update_scalar_conjugate() {
        let y = DVector::from_element(1, 1.0);
        let out = kalman_update(&scalar(0.0, 1.0), &y, &m1(1.0), &m1(1.0)).unwrap();
        assert!((out.mean[0] - 0.5).abs() < 1e-9);
        assert!((out.cov[(0, 0)] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn update_near_uninformative_is_prior() {
        let prior = scalar(0.7, 1.3);
        let y = DVector::from_element(1, 100.0);
        let out = kalman_update(&prior, &y, &m1(1.0), &m1(1e12)).unwrap();
        assert!((out.mean[0] - 0.7).abs() < 1e-6);
        assert!((out.cov[(0, 0)] - 1.3).abs() < 1e-6);
    }

    #[test]
    fn loglik_zero_residual() {
        let b = scalar(3.0, 0.5);
        let y = DVector::from_element(1, 3.0);
        let ll = gaussian_loglik(&b, &y, &m1(1.0), &m1(1.5)).unwrap();
        assert!((ll + 0.5 * (2.0 * std::f64::consts::PI * 2.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn loglik_scalar_density() {
        let y = DVector::from_element(1, 2.0);
        let ll = gaussian_loglik(&scalar(0.0, 1.0), &y, &m1(1.0), &m1(1.0)).unwrap();
        let expect = -0.5 * (4.0 * std::f64::consts::PI).ln() - 1.0;
        assert!((ll - expect).abs() < 1e-12);
    }

    #[test]
    fn loglik_requires_an_observation() {
        let y = DVector::from_element(1, f64::NAN);
        assert!(gaussian_loglik(&scalar(0.0, 1.0), &y, &m1(1.0), &m1(1.0)).is_err());
    }

    #[test]
    fn collapse_examples() {
        let a = scalar(-1.0, 1.0);
        let b = scalar(1.0, 1.0);
        let mix = WeightedGaussianMixture::new(vec![(0.5, a.clone()), (0.5, b.clone())]).unwrap();
        let c = moment_match_collapse(&mix);
        assert!(c.mean[0].abs() < 1e-15);
        assert!((c.cov[(0, 0)] - 2.0).abs() < 1e-15);

        let mix = WeightedGaussianMixture::new(vec![(1.0, a.clone()), (0.0, b)]).unwrap();
        assert_eq!(moment_match_collapse(&mix), a);

        let mix = WeightedGaussianMixture::new(vec![(0.25, a.clone()), (0.75, a.clone())]).unwrap();
        let c = moment_match_collapse(&mix);
        assert!((c.mean[0] - a.mean[0]).abs() < 1e-15);
        assert!((c.cov[(0, 0)] - a.cov[(0, 0)]).abs() < 1e-15);
    }

    #[test]
    fn mixture_rejects_unnormalized_weights() {
        assert!(WeightedGaussianMixture::new(vec![(0.4, scalar(0.0, 1.0))]).is_err());
        assert!(WeightedGaussianMixture::new(vec![]).is_err());
    }

    #[test]
    fn regime_validate_flags_non_binary_c() {
        let p = RegimeParams::new(m1(0.5), m1(1.0), m1(0.5), m1(1.0), 0).unwrap();
        assert!(p.validate(true).is_err());
        assert!(p.validate(false).is_ok());
    }

    #[test]
    fn univariate_path_matches_general_filter() {
        let a = DMatrix::from_row_slice(3, 3, &[0.5, -0.3, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let mut q = DMatrix::zeros(3, 3);
        q[(0, 0)] = 0.7;
        let h = DVector::from_vec(vec![1.0, 0.0, 0.0]);
        let m0 = DVector::zeros(3);
        let p0 = DMatrix::identity(3, 3) * 2.0;
        let obs: Vec<f64> = (0..400)
            .map(|t| if t % 97 == 13 { f64::NAN } else { ((t as f64) * 0.37).sin() * 2.0 })
            .collect();
        let fast = univariate_loglik(&a, &q, &h, 0.4, &m0, &p0, &obs).unwrap();

        let c = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
        let r = m1(0.4);
        let mut b = GaussianBelief::new(m0, p0).unwrap();
        let mut slow = 0.0;
        for &y in &obs {
            let yv = DVector::from_element(1, y);
            let (upd, ll) = kalman_update_with_loglik(&b, &yv, &c, &r).unwrap();
            slow += ll;
            b = kalman_predict(&upd, &a, &q).unwrap();
        }
        assert!((fast - slow).abs() < 1e-8 * slow.abs(), "{fast} vs {slow}");
    }

    fn random_psd(seed: &[f64], n: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(n, n, |i, j| seed[(i * n + j) % seed.len()]);
        &m * m.transpose() + DMatrix::identity(n, n) * 1e-3
    }

    proptest! {
        #[test]
        fn predict_and_update_keep_psd(
            vals in proptest::collection::vec(-1.0f64..1.0, 16),
            phi1 in -0.9f64..0.9,
            phi2 in -0.9f64..0.9,
            y in -5.0f64..5.0,
        ) {
            // AR(2) companion block in the p+1 layout
            let a = DMatrix::from_row_slice(3, 3, &[phi1, phi2, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
            let mut q = DMatrix::zeros(3, 3);
            q[(0, 0)] = 1.0;
            let prior = GaussianBelief::new(DVector::zeros(3), random_psd(&vals, 3)).unwrap();
            let pred = kalman_predict(&prior, &a, &q).unwrap();
            prop_assert!(linalg::asymmetry(&pred.cov) <= 1e-10);
            prop_assert!(linalg::min_eigenvalue(&pred.cov) >= -1e-9);

            let c = DMatrix::from_row_slice(1, 3, &[1.0, 0.0, 0.0]);
            let upd = kalman_update(&pred, &DVector::from_element(1, y), &c, &m1(0.5)).unwrap();
            prop_assert!(linalg::asymmetry(&upd.cov) <= 1e-10);
            prop_assert!(linalg::min_eigenvalue(&upd.cov) >= -1e-9);
            // observed-subspace variance never increases
            prop_assert!(upd.cov[(0, 0)] <= pred.cov[(0, 0)] + 1e-12);
        }

        #[test]
        fn loglik_decreases_with_residual(d1 in 0.0f64..5.0, extra in 0.01f64..5.0) {
            let b = scalar(1.0, 0.8);
            let lo = gaussian_loglik(&b, &DVector::from_element(1, 1.0 + d1), &m1(1.0), &m1(0.3)).unwrap();
            let hi = gaussian_loglik(&b, &DVector::from_element(1, 1.0 + d1 + extra), &m1(1.0), &m1(0.3)).unwrap();
            prop_assert!(hi < lo);
        }
    }
}
