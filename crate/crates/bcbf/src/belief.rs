//! Gaussian belief states, their flat vector encoding, and risk-aware
//! half-space evaluation.
//!
//! A belief is a Gaussian `N(mu, Sigma)` over the system state. For
//! belief-space control the pair is flattened into a single vector
//! `b = [mu; vec(Sigma)]` where `vec` stores the row-major upper triangle of
//! the (symmetric) covariance once, so `dim(b) = (n^2 + 3n) / 2`.
//!
//! Safety requirements are *risk-aware half-spaces*: "the state lies in
//! `{x : alpha' x >= beta}` with probability at least `1 - delta`". Over a
//! Gaussian belief that chance constraint is exactly the deterministic
//! value-at-risk barrier
//!
//! ```text
//! h(b) = alpha' mu - beta - erfinv(1 - 2 delta) * sqrt(2 alpha' Sigma alpha) - gamma
//! ```
//!
//! with an optional extra margin `gamma >= 0` used to absorb measurement
//! jumps. [`var_value`], [`var_gradient`], and [`prob_halfspace`] implement
//! the barrier, its gradient in the flat layout, and the underlying Gaussian
//! probability.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::special::{erf, erfinv};

/// Maximum tolerated asymmetry `max_ij |Sigma_ij - Sigma_ji|` on input
/// covariances; anything worse is rejected rather than silently symmetrized.
pub const ASYMMETRY_TOL: f64 = 1e-9;

/// Eigenvalue floor for positive semidefiniteness checks: eigenvalues above
/// `-PSD_FLOOR` are accepted as numerical zeros.
pub const PSD_FLOOR: f64 = 1e-9;

/// Directional variances at or below this are considered singular for
/// gradient purposes (the risk term's slope blows up like `1/sqrt(s)`).
pub const SINGULAR_VARIANCE: f64 = 1e-12;

/// Length of the flat belief vector for state dimension `n`.
#[inline]
pub fn belief_len(n: usize) -> usize {
    (n * n + 3 * n) / 2
}

/// Index of covariance entry `(i, j)` in the flat belief layout.
///
/// The layout is `[mu_0..mu_{n-1}, S_00, S_01, .., S_0{n-1}, S_11, ..]`:
/// mean first, then the row-major upper triangle. Indices may be given in
/// either order; they are sorted internally.
#[inline]
pub fn cov_index(n: usize, i: usize, j: usize) -> usize {
    let (i, j) = if i <= j { (i, j) } else { (j, i) };
    debug_assert!(j < n);
    n + i * n - i * (i + 1) / 2 + j
}

/// A Gaussian belief `N(mean, cov)` with validated covariance.
///
/// Construction symmetrizes the covariance as `(S + S') / 2` after checking
/// the asymmetry is within [`ASYMMETRY_TOL`], and verifies eigenvalues are
/// above `-`[`PSD_FLOOR`]. [`GaussianBelief::new_with_repair`] additionally
/// clamps slightly negative eigenvalues to zero (and logs when it does).
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    mean: DVector<f64>,
    cov: DMatrix<f64>,
}

impl GaussianBelief {
    /// Validated constructor. See the type docs for the checks applied.
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Dimension(format!(
                "covariance is {}x{} but mean has length {n}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let mut max_asym = 0.0_f64;
        for i in 0..n {
            for j in (i + 1)..n {
                max_asym = max_asym.max((cov[(i, j)] - cov[(j, i)]).abs());
            }
        }
        if max_asym > ASYMMETRY_TOL {
            return Err(Error::Domain(format!(
                "covariance asymmetry {max_asym:.3e} exceeds tolerance {ASYMMETRY_TOL:.1e}"
            )));
        }
        let cov = symmetrize(&cov);
        check_psd(&cov)?;
        Ok(GaussianBelief { mean, cov })
    }

    /// Constructor that repairs slightly indefinite covariances by clamping
    /// negative eigenvalues to zero. Each repair is logged at `warn` level;
    /// use [`GaussianBelief::new`] when indefiniteness should be an error.
    pub fn new_with_repair(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if cov.nrows() != n || cov.ncols() != n {
            return Err(Error::Dimension(format!(
                "covariance is {}x{} but mean has length {n}",
                cov.nrows(),
                cov.ncols()
            )));
        }
        let cov = symmetrize(&cov);
        let eig = cov.clone().symmetric_eigen();
        let min_eig = eig.eigenvalues.min();
        if min_eig >= 0.0 {
            return Ok(GaussianBelief { mean, cov });
        }
        log::warn!(
            "repairing covariance: clamping eigenvalues below zero (min {min_eig:.3e})"
        );
        let clamped = DVector::from_iterator(n, eig.eigenvalues.iter().map(|&l| l.max(0.0)));
        let repaired = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
        Ok(GaussianBelief {
            mean,
            cov: symmetrize(&repaired),
        })
    }

    /// State dimension `n`.
    #[inline]
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Mean vector.
    #[inline]
    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    /// Covariance matrix (symmetric, PSD up to the accepted floor).
    #[inline]
    pub fn cov(&self) -> &DMatrix<f64> {
        &self.cov
    }

    /// Flatten to the `[mu; vec(Sigma)]` layout.
    pub fn to_vec(&self) -> BeliefVector {
        let n = self.dim();
        let mut data = DVector::zeros(belief_len(n));
        for i in 0..n {
            data[i] = self.mean[i];
        }
        for i in 0..n {
            for j in i..n {
                data[cov_index(n, i, j)] = self.cov[(i, j)];
            }
        }
        BeliefVector { n, data }
    }

    /// Draw one state sample `x ~ N(mean, cov)` using the symmetric
    /// eigendecomposition square root (valid for singular covariances).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let n = self.dim();
        let eig = self.cov.clone().symmetric_eigen();
        let sqrt_l =
            DVector::from_iterator(n, eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
        let noise = DVector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        &self.mean + &eig.eigenvectors * noise.component_mul(&sqrt_l)
    }
}

/// `(S + S') / 2`.
pub(crate) fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Eigenvalue floor check: accepts matrices whose eigenvalues are all above
/// `-PSD_FLOOR`. Tries a shifted Cholesky first (cheap), falls back to the
/// symmetric eigendecomposition to produce an exact verdict.
pub(crate) fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    let n = m.nrows();
    let shifted = m + DMatrix::<f64>::identity(n, n) * PSD_FLOOR;
    if shifted.cholesky().is_some() {
        return Ok(());
    }
    let min_eig = m.clone().symmetric_eigen().eigenvalues.min();
    if min_eig < -PSD_FLOOR {
        Err(Error::NotPsd { min_eig })
    } else {
        Ok(())
    }
}

/// A vector in the flat belief layout `[mu; vec(Sigma)]`.
///
/// Used both for belief points and for gradients/tangents expressed in the
/// same coordinates (where the covariance block holds one entry per stored
/// upper-triangle element).
#[derive(Clone, Debug, PartialEq)]
pub struct BeliefVector {
    n: usize,
    data: DVector<f64>,
}

impl BeliefVector {
    /// Wrap a raw vector, checking its length matches [`belief_len`]`(n)`.
    pub fn new(n: usize, data: DVector<f64>) -> Result<Self> {
        if data.len() != belief_len(n) {
            return Err(Error::Dimension(format!(
                "belief vector for n = {n} must have length {}, got {}",
                belief_len(n),
                data.len()
            )));
        }
        Ok(BeliefVector { n, data })
    }

    /// The zero vector in the layout for state dimension `n`.
    pub fn zeros(n: usize) -> Self {
        BeliefVector {
            n,
            data: DVector::zeros(belief_len(n)),
        }
    }

    /// State dimension `n`.
    #[inline]
    pub fn state_dim(&self) -> usize {
        self.n
    }

    /// Total flat length `(n^2 + 3n) / 2`.
    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    /// True when the wrapped vector is empty (only for `n = 0`).
    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Borrow the raw flat vector.
    #[inline]
    pub fn as_vector(&self) -> &DVector<f64> {
        &self.data
    }

    /// Consume into the raw flat vector.
    #[inline]
    pub fn into_vector(self) -> DVector<f64> {
        self.data
    }

    /// Copy of the mean block.
    pub fn mean(&self) -> DVector<f64> {
        DVector::from_iterator(self.n, (0..self.n).map(|i| self.data[i]))
    }

    /// Reconstruct the full symmetric matrix from the covariance block.
    pub fn cov_matrix(&self) -> DMatrix<f64> {
        let n = self.n;
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = self.data[cov_index(n, i, j)];
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    /// Rebuild a validated [`GaussianBelief`] (the inverse of
    /// [`GaussianBelief::to_vec`]; the round trip is exact).
    pub fn to_belief(&self) -> Result<GaussianBelief> {
        GaussianBelief::new(self.mean(), self.cov_matrix())
    }
}

/// A chance constraint "`alpha' x >= beta` with probability `>= 1 - delta`"
/// over Gaussian beliefs, with an optional extra margin `gamma`.
///
/// Invariants enforced on construction: `alpha != 0`, `0 < delta <= 0.5`
/// (at `delta = 0.5` the risk tightening vanishes and the constraint reduces
/// to the mean half-space), `gamma >= 0` and finite. The tightening factor
/// `erfinv(1 - 2 delta)` is precomputed and cached.
#[derive(Clone, Debug)]
pub struct RiskHalfSpace {
    alpha: DVector<f64>,
    beta: f64,
    delta: f64,
    gamma: f64,
    tightening: f64,
}

impl RiskHalfSpace {
    /// Construct with `gamma = 0`.
    pub fn new(alpha: DVector<f64>, beta: f64, delta: f64) -> Result<Self> {
        if alpha.iter().all(|&a| a == 0.0) {
            return Err(Error::Config(
                "half-space direction alpha must be nonzero".into(),
            ));
        }
        if !alpha.iter().all(|a| a.is_finite()) || !beta.is_finite() {
            return Err(Error::Config(
                "half-space coefficients must be finite".into(),
            ));
        }
        if !(delta > 0.0 && delta <= 0.5) {
            return Err(Error::Config(format!(
                "risk level delta must lie in (0, 0.5], got {delta} \
                 (0.5 disables the tightening and recovers the mean half-space)"
            )));
        }
        let tightening = erfinv(1.0 - 2.0 * delta).map_err(|_| {
            Error::Config(format!("delta = {delta} is too close to zero to represent"))
        })?;
        Ok(RiskHalfSpace {
            alpha,
            beta,
            delta,
            gamma: 0.0,
            tightening,
        })
    }

    /// Builder-style copy with a different margin `gamma >= 0`.
    pub fn with_gamma(mut self, gamma: f64) -> Result<Self> {
        self.set_gamma(gamma)?;
        Ok(self)
    }

    /// Replace the margin `gamma >= 0`.
    pub fn set_gamma(&mut self, gamma: f64) -> Result<()> {
        if !(gamma >= 0.0 && gamma.is_finite()) {
            return Err(Error::Config(format!(
                "margin gamma must be finite and >= 0, got {gamma}"
            )));
        }
        self.gamma = gamma;
        Ok(())
    }

    /// Replace the direction and offset (used when the half-space tracks a
    /// moving linearization point), keeping `delta` and `gamma`.
    pub fn set_geometry(&mut self, alpha: DVector<f64>, beta: f64) -> Result<()> {
        if alpha.iter().all(|&a| a == 0.0) {
            return Err(Error::Config(
                "half-space direction alpha must be nonzero".into(),
            ));
        }
        self.alpha = alpha;
        self.beta = beta;
        Ok(())
    }

    /// Half-space direction.
    #[inline]
    pub fn alpha(&self) -> &DVector<f64> {
        &self.alpha
    }

    /// Half-space offset.
    #[inline]
    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Risk level.
    #[inline]
    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Extra margin.
    #[inline]
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Cached tightening factor `erfinv(1 - 2 delta)`.
    #[inline]
    pub fn tightening(&self) -> f64 {
        self.tightening
    }
}

/// Probability that `alpha' x >= beta` under the belief's Gaussian:
/// `Phi((alpha' mu - beta) / sqrt(alpha' Sigma alpha))`, written via `erf`.
///
/// # Errors
///
/// `DegenerateDirection` when `alpha' Sigma alpha <= 0` (the probability is
/// a step function of the mean there), `Dimension` on length mismatch.
pub fn prob_halfspace(b: &GaussianBelief, alpha: &DVector<f64>, beta: f64) -> Result<f64> {
    if alpha.len() != b.dim() {
        return Err(Error::Dimension(format!(
            "alpha has length {} but belief dimension is {}",
            alpha.len(),
            b.dim()
        )));
    }
    let s = directional_variance(b, alpha);
    if s <= 0.0 {
        return Err(Error::DegenerateDirection { variance: s });
    }
    let z = (alpha.dot(b.mean()) - beta) / (2.0 * s).sqrt();
    Ok(0.5 * (1.0 + erf(z)))
}

/// Value of the risk-aware barrier
/// `h(b) = alpha' mu - beta - erfinv(1 - 2 delta) sqrt(2 alpha' Sigma alpha) - gamma`.
///
/// Zero directional variance is fine here (the risk term is simply zero);
/// only a dimension mismatch errors.
pub fn var_value(b: &GaussianBelief, hs: &RiskHalfSpace) -> Result<f64> {
    if hs.alpha.len() != b.dim() {
        return Err(Error::Dimension(format!(
            "alpha has length {} but belief dimension is {}",
            hs.alpha.len(),
            b.dim()
        )));
    }
    let s = directional_variance(b, &hs.alpha).max(0.0);
    Ok(hs.alpha.dot(b.mean()) - hs.beta - hs.tightening * (2.0 * s).sqrt() - hs.gamma)
}

/// Gradient of [`var_value`] in the flat belief layout.
///
/// Mean block: `alpha`. Covariance block (stored upper triangle):
/// `-erfinv(1 - 2 delta) * alpha_i alpha_j * (2 - [i == j]) / sqrt(2 alpha' Sigma alpha)`
/// — the factor `(2 - [i == j])` accounts for each off-diagonal entry
/// appearing twice in the symmetric matrix.
///
/// # Errors
///
/// `SingularGradient` when `alpha' Sigma alpha <= 1e-12` (the slope of the
/// square root is unbounded there), `Dimension` on length mismatch.
pub fn var_gradient(b: &GaussianBelief, hs: &RiskHalfSpace) -> Result<BeliefVector> {
    let n = b.dim();
    if hs.alpha.len() != n {
        return Err(Error::Dimension(format!(
            "alpha has length {} but belief dimension is {}",
            hs.alpha.len(),
            n
        )));
    }
    let s = directional_variance(b, &hs.alpha);
    if s <= SINGULAR_VARIANCE {
        return Err(Error::SingularGradient {
            variance: s,
            threshold: SINGULAR_VARIANCE,
        });
    }
    let coeff = hs.tightening / (2.0 * s).sqrt();
    let mut grad = BeliefVector::zeros(n);
    for i in 0..n {
        grad.data[i] = hs.alpha[i];
    }
    for i in 0..n {
        for j in i..n {
            let mult = if i == j { 1.0 } else { 2.0 };
            grad.data[cov_index(n, i, j)] = -coeff * hs.alpha[i] * hs.alpha[j] * mult;
        }
    }
    Ok(grad)
}

/// `alpha' Sigma alpha`.
fn directional_variance(b: &GaussianBelief, alpha: &DVector<f64>) -> f64 {
    alpha.dot(&(b.cov() * alpha))
}
