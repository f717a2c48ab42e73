//! Sparse total-least-squares estimator: centralized recursion and the
//! distributed adapt-then-combine diffusion form.

use nalgebra::DVector;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::scene::RoiGrid;
use crate::topology::CombinationMatrix;

/// Step sizes and sparsity weights for the recursive estimator. `mu` holds
/// one step size per user; the centralized recursion uses `mu[0]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorParams {
    pub mu: Vec<f64>,
    pub eta1: f64,
    pub eta2: f64,
}

impl EstimatorParams {
    pub fn uniform(mu: f64, eta1: f64, eta2: f64, n_users: usize) -> Result<Self> {
        let p = Self {
            mu: vec![mu; n_users],
            eta1,
            eta2,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.iter().any(|&m| !(m >= 0.0) || !m.is_finite()) {
            return Err(Error::Parameter("step sizes must be finite and >= 0".into()));
        }
        if self.eta1 < 0.0 || self.eta2 < 0.0 {
            return Err(Error::Parameter("sparsity weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Normalized residual `ε = (y − uᴴx)/(‖x‖² + 1)`.
pub fn weighted_error(y: Complex64, u: &DVector<Complex64>, x: &DVector<Complex64>) -> Complex64 {
    (y - u.dotc(x)) / (x.norm_squared() + 1.0)
}

/// Conjugate (Wirtinger) gradient of the single-sample cost
/// `‖y − uᴴx‖²/(‖x‖²+1)`, scaled so that its real and imaginary parts equal
/// the partial derivatives in Re(x_k) and Im(x_k): `−2(εu + |ε|²x)`.
pub fn instantaneous_gradient(
    y: Complex64,
    u: &DVector<Complex64>,
    x: &DVector<Complex64>,
) -> DVector<Complex64> {
    let eps = weighted_error(y, u, x);
    let e2 = eps.norm_sqr();
    DVector::from_fn(x.len(), |k, _| -2.0 * (eps * u[k] + e2 * x[k]))
}

/// Element-wise phase: `x_k/|x_k|`, zero where `x_k = 0`.
pub fn sign_vec(x: &DVector<Complex64>) -> DVector<Complex64> {
    DVector::from_fn(x.len(), |k, _| {
        let m = x[k].norm();
        if m == 0.0 {
            Complex64::ZERO
        } else {
            x[k] / m
        }
    })
}

/// Block-normalized direction: each grid block scaled to unit Euclidean
/// norm, zero blocks left at zero (the group-sparsity subgradient).
pub fn block_shrink_direction(x: &DVector<Complex64>, grid: &RoiGrid) -> Result<DVector<Complex64>> {
    if x.len() != grid.k() {
        return Err(Error::Dimension(format!(
            "vector length {} does not match grid size {}",
            x.len(),
            grid.k()
        )));
    }
    let b = grid.block_len();
    let mut out = DVector::from_element(x.len(), Complex64::ZERO);
    for blk in 0..grid.n_blocks() {
        let norm: f64 = (0..b)
            .map(|j| x[blk * b + j].norm_sqr())
            .sum::<f64>()
            .sqrt();
        if norm > 0.0 {
            for j in 0..b {
                out[blk * b + j] = x[blk * b + j] / norm;
            }
        }
    }
    Ok(out)
}

/// Local adaptation step of user `n`:
/// `φ = x + μ_n(ε(u + ε̄x) − η₁·sign(x) − η₂·Σ(x)x)`.
pub fn adapt(
    x: &DVector<Complex64>,
    y: Complex64,
    u: &DVector<Complex64>,
    params: &EstimatorParams,
    grid: &RoiGrid,
    n: usize,
) -> Result<DVector<Complex64>> {
    let mu = params.mu[n];
    let grad = instantaneous_gradient(y, u, x);
    let s1 = sign_vec(x);
    let s2 = block_shrink_direction(x, grid)?;
    Ok(DVector::from_fn(x.len(), |k, _| {
        x[k] + mu * (-0.5 * grad[k] - params.eta1 * s1[k] - params.eta2 * s2[k])
    }))
}

/// Neighborhood fusion: `x_n = Σ_l c_{l,n} φ_l`.
pub fn combine(
    phis: &[DVector<Complex64>],
    c: &CombinationMatrix,
    n: usize,
) -> DVector<Complex64> {
    let k = phis[0].len();
    let mut out = DVector::from_element(k, Complex64::ZERO);
    for (l, phi) in phis.iter().enumerate() {
        let w = c.weight(l, n);
        if w != 0.0 {
            out.axpy(Complex64::new(w, 0.0), phi, Complex64::new(1.0, 0.0));
        }
    }
    out
}

/// Per-iteration record of every user's estimate; index 0 is the initial
/// state, so the record has `T+1` snapshots.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vec<DVector<Complex64>>>,
}

impl Trajectory {
    pub fn final_estimates(&self) -> &[DVector<Complex64>] {
        self.states.last().expect("trajectory has an initial state")
    }

    pub fn iterations(&self) -> usize {
        self.states.len() - 1
    }
}

fn check_finite(x: &DVector<Complex64>, iteration: usize, user: usize) -> Result<()> {
    if x.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Divergence { iteration, user });
    }
    Ok(())
}

/// Per-user measurement streams feeding the estimator: `y[n][i]` and the
/// matching input rows `u[n][i]`.
pub struct EstimatorInputs<'a> {
    pub y: &'a [DVector<Complex64>],
    pub u: &'a [Vec<DVector<Complex64>>],
}

impl EstimatorInputs<'_> {
    fn horizon(&self) -> usize {
        self.y.first().map(|v| v.len()).unwrap_or(0)
    }
}

/// Runs the diffusion estimator: every user adapts on its own sample, then
/// fuses neighbor intermediates through the combination matrix, once per
/// time slot.
pub fn run_distributed(
    inputs: &EstimatorInputs,
    c: &CombinationMatrix,
    params: &EstimatorParams,
    grid: &RoiGrid,
    x_init: &DVector<Complex64>,
) -> Result<Trajectory> {
    let n_users = inputs.y.len();
    if n_users == 0 || inputs.u.len() != n_users {
        return Err(Error::Dimension("inconsistent user stream counts".into()));
    }
    if c.n_users() != n_users || params.mu.len() != n_users {
        return Err(Error::Dimension(
            "combination matrix / step sizes do not match user count".into(),
        ));
    }
    params.validate()?;
    let t = inputs.horizon();
    let mut states = Vec::with_capacity(t + 1);
    states.push(vec![x_init.clone(); n_users]);
    let mut phis = vec![DVector::from_element(grid.k(), Complex64::ZERO); n_users];
    for i in 0..t {
        {
            let current = states.last().unwrap();
            for n in 0..n_users {
                phis[n] = adapt(&current[n], inputs.y[n][i], &inputs.u[n][i], params, grid, n)?;
                check_finite(&phis[n], i, n)?;
            }
        }
        let mut next = Vec::with_capacity(n_users);
        for n in 0..n_users {
            let xn = combine(&phis, c, n);
            check_finite(&xn, i, n)?;
            next.push(xn);
        }
        states.push(next);
    }
    Ok(Trajectory { states })
}

/// Centralized recursion on the pooled stream: at each time slot the single
/// state absorbs every user's sample in round-robin order.
pub fn run_centralized(
    inputs: &EstimatorInputs,
    params: &EstimatorParams,
    grid: &RoiGrid,
    x_init: &DVector<Complex64>,
) -> Result<Trajectory> {
    let n_users = inputs.y.len();
    if n_users == 0 {
        return Err(Error::Dimension("pooled stream is empty".into()));
    }
    params.validate()?;
    let t = inputs.horizon();
    let single = EstimatorParams {
        mu: vec![params.mu[0]],
        eta1: params.eta1,
        eta2: params.eta2,
    };
    let mut states = Vec::with_capacity(t + 1);
    states.push(vec![x_init.clone()]);
    let mut x = x_init.clone();
    for i in 0..t {
        for n in 0..n_users {
            x = adapt(&x, inputs.y[n][i], &inputs.u[n][i], &single, grid, 0)?;
            check_finite(&x, i, n)?;
        }
        states.push(vec![x.clone()]);
    }
    Ok(Trajectory { states })
}
