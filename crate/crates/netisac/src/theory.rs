//! Closed-form steady-state error prediction for the diffusion estimator,
//! plus the affine-in-`wwᴴ` sensing metric consumed by the beamformer.
//!
//! Conventions: `vec` is column-major; `(Ā⊗A)vec(X) = vec(AXAᴴ)`. The
//! network operators are `O = Cᵀ⊗I_K` (so `Oᴴ = C⊗I_K`), `D` the diagonal
//! of per-user step sizes, `H` the block-diagonal quadratic-cost curvature.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scene::Scene;
use crate::topology::CombinationMatrix;
use crate::waveform::user_signature;

/// Largest vectorized dimension for which dense `(KN)²×(KN)²` operators may
/// be materialized.
pub const DENSE_KN_CAP: usize = 64;

const STABILITY_MARGIN: f64 = 1e-9;
const SINGULAR_TOL: f64 = 1e-9;
const TIKHONOV_SHIFT: f64 = 1e-6;

/// Input covariance of user `l`: `R_l = |s^e|² a_l a_lᴴ` with
/// `a_l = diag(h_l)ᴴ Gᴴ w` (rank ≤ 1, Hermitian PSD).
pub fn covariance_r(
    scene: &Scene,
    w: &DVector<Complex64>,
    s_e_power: f64,
) -> Vec<DMatrix<Complex64>> {
    (0..scene.n_users())
        .map(|l| {
            let a = user_signature(scene, w, l);
            let mut r = &a * a.adjoint();
            r *= Complex64::new(s_e_power, 0.0);
            r
        })
        .collect()
}

/// Block-diagonal curvature `H = blkdiag(2R_l/(‖x⁰‖²+1))`, size KN×KN.
pub fn hessian_blocks(
    r: &[DMatrix<Complex64>],
    x0: &DVector<Complex64>,
) -> DMatrix<Complex64> {
    let k = x0.len();
    let n = r.len();
    let scale = Complex64::new(2.0 / (x0.norm_squared() + 1.0), 0.0);
    let mut h = DMatrix::from_element(k * n, k * n, Complex64::ZERO);
    for (l, rl) in r.iter().enumerate() {
        h.view_mut((l * k, l * k), (k, k)).copy_from(&(rl * scale));
    }
    h
}

/// Gradient-error covariance `Q` (block-diagonal KN×KN) and its
/// vectorization, assembled two independent ways for cross-validation.
pub struct GradientErrorCov {
    /// Definitional per-block assembly.
    pub q_mat: DMatrix<Complex64>,
    pub q_vec: DVector<Complex64>,
    /// Factored form `α₁|s^e|²(Ū⊗U)vec(I_N⊗wwᴴ) + vec(B)`.
    pub q_vec_factored: DVector<Complex64>,
    /// The signal-independent block-diagonal part `B`.
    pub b_noise: DMatrix<Complex64>,
    pub alpha1: f64,
}

/// Stacked per-user channel aggregate `U = blkdiag(diag(h_l)ᴴGᴴ)`, KN×MN.
pub fn channel_aggregate(scene: &Scene) -> DMatrix<Complex64> {
    let k = scene.k();
    let m = scene.channels.m();
    let n = scene.n_users();
    let gh = scene.channels.g_bs_roi.adjoint();
    let mut u = DMatrix::from_element(k * n, m * n, Complex64::ZERO);
    for l in 0..n {
        for kk in 0..k {
            let hc = scene.channels.h[l][kk].conj();
            for mm in 0..m {
                u[(l * k + kk, l * m + mm)] = hc * gh[(kk, mm)];
            }
        }
    }
    u
}

fn vec_of(mat: &DMatrix<Complex64>) -> DVector<Complex64> {
    DVector::from_column_slice(mat.as_slice())
}

fn unvec(v: &DVector<Complex64>, rows: usize) -> DMatrix<Complex64> {
    DMatrix::from_column_slice(rows, v.len() / rows, v.as_slice())
}

pub fn gradient_error_cov(
    scene: &Scene,
    w: &DVector<Complex64>,
    x0: &DVector<Complex64>,
    sigma_in2: f64,
    s_e_power: f64,
) -> GradientErrorCov {
    let k = x0.len();
    let n = scene.n_users();
    let d0 = x0.norm_squared() + 1.0;
    let alpha1 = 4.0 * sigma_in2 / d0;
    let r = covariance_r(scene, w, s_e_power);
    let x0x0 = x0 * x0.adjoint();
    let noise_block = {
        let mut b = DMatrix::<Complex64>::identity(k, k) * Complex64::new(sigma_in2, 0.0);
        b -= &x0x0 * Complex64::new(3.0 * sigma_in2 / d0, 0.0);
        b * Complex64::new(alpha1, 0.0)
    };
    let mut q_mat = DMatrix::from_element(k * n, k * n, Complex64::ZERO);
    let mut b_noise = DMatrix::from_element(k * n, k * n, Complex64::ZERO);
    for l in 0..n {
        let block = &r[l] * Complex64::new(alpha1, 0.0) + &noise_block;
        q_mat.view_mut((l * k, l * k), (k, k)).copy_from(&block);
        b_noise
            .view_mut((l * k, l * k), (k, k))
            .copy_from(&noise_block);
    }
    let q_vec = vec_of(&q_mat);
    // Factored route: the signal part is U(I_N⊗wwᴴ)Uᴴ pushed through the
    // Kronecker/vec identity.
    let u = channel_aggregate(scene);
    let m = scene.channels.m();
    let www = w * w.adjoint();
    let mut inww = DMatrix::from_element(m * n, m * n, Complex64::ZERO);
    for l in 0..n {
        inww.view_mut((l * m, l * m), (m, m)).copy_from(&www);
    }
    let big = u.conjugate().kronecker(&u);
    let q_vec_factored =
        big * vec_of(&inww) * Complex64::new(alpha1 * s_e_power, 0.0) + vec_of(&b_noise);
    GradientErrorCov {
        q_mat,
        q_vec,
        q_vec_factored,
        b_noise,
        alpha1,
    }
}

/// Everything the closed-form predictions need, precomputed once.
pub struct TheoryWorkspace {
    pub k: usize,
    pub n_users: usize,
    pub x0: DVector<Complex64>,
    pub mu: Vec<f64>,
    pub cmat: DMatrix<f64>,
    pub hblk: DMatrix<Complex64>,
    pub r: Vec<DMatrix<Complex64>>,
    pub grad_cov: GradientErrorCov,
    pub u_agg: DMatrix<Complex64>,
    pub w: DVector<Complex64>,
    pub sigma_in2: f64,
    pub s_e_power: f64,
}

impl TheoryWorkspace {
    pub fn build(
        scene: &Scene,
        w: &DVector<Complex64>,
        mu: &[f64],
        c: &CombinationMatrix,
        sigma_in2: f64,
        s_e_power: f64,
    ) -> Result<Self> {
        let n = scene.n_users();
        if mu.len() != n || c.n_users() != n {
            return Err(Error::Dimension(
                "step sizes / combination matrix do not match user count".into(),
            ));
        }
        if sigma_in2 < 0.0 || s_e_power <= 0.0 {
            return Err(Error::Parameter("variances must be nonnegative".into()));
        }
        let r = covariance_r(scene, w, s_e_power);
        let hblk = hessian_blocks(&r, &scene.roi.x);
        let grad_cov = gradient_error_cov(scene, w, &scene.roi.x, sigma_in2, s_e_power);
        Ok(Self {
            k: scene.k(),
            n_users: n,
            x0: scene.roi.x.clone(),
            mu: mu.to_vec(),
            cmat: c.matrix().clone(),
            hblk,
            r,
            grad_cov,
            u_agg: channel_aggregate(scene),
            w: w.clone(),
            sigma_in2,
            s_e_power,
        })
    }

    pub fn kn(&self) -> usize {
        self.k * self.n_users
    }

    /// Diagonal of `D`: user `l`'s step size repeated over its K slots.
    pub fn d_diag(&self) -> DVector<f64> {
        DVector::from_fn(self.kn(), |i, _| self.mu[i / self.k])
    }

    /// `Oᴴ = C⊗I_K` as a complex matrix.
    pub fn o_adjoint(&self) -> DMatrix<Complex64> {
        let kn = self.kn();
        DMatrix::from_fn(kn, kn, |i, j| {
            if i % self.k == j % self.k {
                Complex64::new(self.cmat[(i / self.k, j / self.k)], 0.0)
            } else {
                Complex64::ZERO
            }
        })
    }

    /// Error-propagation operator `A = (I − DH)Oᴴ`.
    pub fn a_mat(&self) -> DMatrix<Complex64> {
        let kn = self.kn();
        let d = self.d_diag();
        let mut idh = DMatrix::<Complex64>::identity(kn, kn);
        for i in 0..kn {
            for j in 0..kn {
                idh[(i, j)] -= Complex64::new(d[i], 0.0) * self.hblk[(i, j)];
            }
        }
        idh * self.o_adjoint()
    }

    /// Noise-injection operator `B = DOᴴ` (real-valued).
    pub fn b_mat(&self) -> DMatrix<Complex64> {
        let d = self.d_diag();
        let mut b = self.o_adjoint();
        for (i, mut row) in b.row_iter_mut().enumerate() {
            row *= Complex64::new(d[i], 0.0);
        }
        b
    }

    /// Largest eigenvalue of `H` (closed form from the rank-1 blocks).
    pub fn lambda_max(&self) -> f64 {
        let d0 = self.x0.norm_squared() + 1.0;
        self.r
            .iter()
            .map(|rl| 2.0 * rl.trace().re / d0)
            .fold(0.0, f64::max)
    }
}

/// Dense transition operator `P = Ā⊗A`, only below the size cap.
pub fn assemble_p_dense(ws: &TheoryWorkspace) -> Result<DMatrix<Complex64>> {
    if ws.kn() > DENSE_KN_CAP {
        return Err(Error::Dimension(format!(
            "dense operator requested for KN = {} (cap {DENSE_KN_CAP})",
            ws.kn()
        )));
    }
    let a = ws.a_mat();
    Ok(a.conjugate().kronecker(&a))
}

/// Dense noise operator `V = B⊗B` (B real), only below the size cap.
pub fn assemble_v_dense(ws: &TheoryWorkspace) -> Result<DMatrix<Complex64>> {
    if ws.kn() > DENSE_KN_CAP {
        return Err(Error::Dimension(format!(
            "dense operator requested for KN = {} (cap {DENSE_KN_CAP})",
            ws.kn()
        )));
    }
    let b = ws.b_mat();
    Ok(b.conjugate().kronecker(&b))
}

/// Matrix-free product `Py = vec(A·unvec(y)·Aᴴ)`.
pub fn apply_p(ws: &TheoryWorkspace, a: &DMatrix<Complex64>, y: &DVector<Complex64>) -> DVector<Complex64> {
    let x = unvec(y, ws.kn());
    vec_of(&(a * x * a.adjoint()))
}

#[derive(Debug, Clone, Serialize)]
pub struct StabilityReport {
    /// Spectral radius of `DH` (real nonnegative spectrum).
    pub spectral_radius_dh: f64,
    /// Spectral radius of the propagation operator `(I−DH)Oᴴ`.
    pub spectral_radius_propagation: f64,
    pub pass: bool,
}

fn spectral_radius_complex(a: &DMatrix<Complex64>) -> f64 {
    // Log-scaled repeated squaring: with A^(2^m) = s·M, ‖M‖_F = 1, the
    // Gelfand limit gives ρ(A) = lim ‖A^k‖_F^(1/k); at k = 2^40 the
    // non-normal polynomial factor is washed out to machine precision.
    // This always terminates, unlike shifted-QR eigenvalue iteration,
    // which can stall on consensus-style matrices whose spectrum has
    // many eigenvalues of identical modulus.
    let mut m = a.clone();
    let mut log_s = 0.0f64;
    for _ in 0..40 {
        let norm = m.norm();
        if !norm.is_finite() {
            return f64::INFINITY;
        }
        if norm == 0.0 {
            return 0.0;
        }
        m.unscale_mut(norm);
        log_s = 2.0 * (log_s + norm.ln());
        m = &m * m.clone();
    }
    let norm = m.norm();
    if norm == 0.0 {
        return 0.0;
    }
    ((log_s + norm.ln()) / 2f64.powi(40)).exp()
}

/// Mean-square stability: the prediction solve is valid iff the
/// propagation operator is a strict contraction in spectrum.
pub fn stability_check(ws: &TheoryWorkspace) -> StabilityReport {
    // DH is similar to the Hermitian D^{1/2} H D^{1/2}.
    let d = ws.d_diag();
    let kn = ws.kn();
    let mut sym = DMatrix::from_element(kn, kn, Complex64::ZERO);
    for i in 0..kn {
        for j in 0..kn {
            sym[(i, j)] = Complex64::new((d[i] * d[j]).sqrt(), 0.0) * ws.hblk[(i, j)];
        }
    }
    let rho_dh = SymmetricEigen::new(sym)
        .eigenvalues
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    let rho_prop = spectral_radius_complex(&ws.a_mat());
    StabilityReport {
        spectral_radius_dh: rho_dh,
        spectral_radius_propagation: rho_prop,
        pass: rho_prop < 1.0 - STABILITY_MARGIN,
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MsePrediction {
    pub mse: f64,
    pub alpha_bound: f64,
    pub spectral_radius_dh: f64,
    pub spectral_radius_propagation: f64,
}

fn quad_form(q: &DMatrix<Complex64>, v0: &DMatrix<Complex64>) -> f64 {
    // ⟨vec(Q), vec(V0)⟩ = tr(QᴴV0).
    q.iter()
        .zip(v0.iter())
        .map(|(a, b)| (a.conj() * b).re)
        .sum()
}

fn mse_from_solution(ws: &TheoryWorkspace, s: &DVector<Complex64>, alpha_bound: f64, report: &StabilityReport) -> MsePrediction {
    let x = unvec(s, ws.kn());
    let b = ws.b_mat();
    let v0 = &b * x * b.adjoint();
    MsePrediction {
        mse: quad_form(&ws.grad_cov.q_mat, &v0) + alpha_bound,
        alpha_bound,
        spectral_radius_dh: report.spectral_radius_dh,
        spectral_radius_propagation: report.spectral_radius_propagation,
    }
}

/// Steady-state network MSE `qᴴV(I−P)⁻¹vec(I) + α` via a dense linear
/// solve (requires the stability check to pass).
pub fn steady_state_mse(ws: &TheoryWorkspace, alpha_bound: f64) -> Result<MsePrediction> {
    let report = stability_check(ws);
    if !report.pass {
        return Err(Error::Stability(format!(
            "propagation spectral radius {} is not strictly below 1",
            report.spectral_radius_propagation
        )));
    }
    let kn = ws.kn();
    if kn <= DENSE_KN_CAP {
        let p = assemble_p_dense(ws)?;
        let kn2 = kn * kn;
        let lhs = DMatrix::<Complex64>::identity(kn2, kn2) - p;
        let rhs = vec_of(&DMatrix::<Complex64>::identity(kn, kn));
        let s = lhs
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Stability("(I - P) is numerically singular".into()))?;
        Ok(mse_from_solution(ws, &s, alpha_bound, &report))
    } else {
        steady_state_mse_iterative(ws, alpha_bound, 1e-12, 100_000)
    }
}

/// Same prediction via the fixed-point iteration `s ← vec(I) + Ps`,
/// convergent whenever the stability check passes; never materializes P.
pub fn steady_state_mse_iterative(
    ws: &TheoryWorkspace,
    alpha_bound: f64,
    tol: f64,
    max_iters: usize,
) -> Result<MsePrediction> {
    let report = stability_check(ws);
    if !report.pass {
        return Err(Error::Stability(format!(
            "propagation spectral radius {} is not strictly below 1",
            report.spectral_radius_propagation
        )));
    }
    let a = ws.a_mat();
    let rhs = vec_of(&DMatrix::<Complex64>::identity(ws.kn(), ws.kn()));
    let mut s = rhs.clone();
    for _ in 0..max_iters {
        let next = &rhs + apply_p(ws, &a, &s);
        let delta = (&next - &s).norm();
        s = next;
        if delta <= tol * s.norm().max(1.0) {
            return Ok(mse_from_solution(ws, &s, alpha_bound, &report));
        }
    }
    Err(Error::Numerical(
        "fixed-point solve for the steady-state MSE did not converge".into(),
    ))
}

/// Sensing metric under the consensus-only propagation approximation
/// (`P → Oᴴ⊗Oᴴ`), reduced to an affine function of `W = wwᴴ`:
/// `F₂(W) = c0 + Re tr(S W)`.
#[derive(Debug, Clone)]
pub struct F2Report {
    pub value: f64,
    pub c0: f64,
    /// PSD quadratic kernel: `F₂ = c0 + Re(wᴴ S w)`.
    pub s_quad: DMatrix<Complex64>,
    /// True when the consensus eigenvalue made the solve singular and a
    /// Tikhonov shift was applied (always the case for stochastic C).
    pub shift_applied: bool,
}

pub fn theory_f2(ws: &TheoryWorkspace) -> Result<F2Report> {
    let n = ws.n_users;
    let k = ws.k;
    let sym_err = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .map(|(i, j)| (ws.cmat[(i, j)] - ws.cmat[(j, i)]).abs())
        .fold(0.0, f64::max);
    if sym_err > 1e-10 {
        return Err(Error::Parameter(
            "consensus-approximation solve requires a symmetric combination matrix".into(),
        ));
    }
    // Stein solve Y − (C⊗I)Y(C⊗I)ᵀ = I in C's orthonormal eigenbasis: only
    // the diagonal pairs survive, Y = Σ_a (v_a v_aᵀ ⊗ I_K)/(1 − λ_a²).
    let eig = SymmetricEigen::new(ws.cmat.clone());
    let mut y = DMatrix::<f64>::zeros(n * k, n * k);
    let mut shift_applied = false;
    for a in 0..n {
        let lam = eig.eigenvalues[a];
        let mut denom = 1.0 - lam * lam;
        if denom.abs() < SINGULAR_TOL {
            denom += TIKHONOV_SHIFT;
            shift_applied = true;
        }
        let va = eig.eigenvectors.column(a);
        for i in 0..n {
            for j in 0..n {
                let w = va[i] * va[j] / denom;
                if w != 0.0 {
                    for kk in 0..k {
                        y[(i * k + kk, j * k + kk)] += w;
                    }
                }
            }
        }
    }
    let b = ws.b_mat();
    let yc = y.map(|v| Complex64::new(v, 0.0));
    let v0 = &b * yc * b.adjoint();
    let c0 = quad_form(&ws.grad_cov.b_noise, &v0);
    let inner = ws.u_agg.adjoint() * &v0 * &ws.u_agg;
    let m = inner.nrows() / n;
    let mut s_quad = DMatrix::from_element(m, m, Complex64::ZERO);
    for l in 0..n {
        s_quad += inner.view((l * m, l * m), (m, m));
    }
    s_quad *= Complex64::new(ws.grad_cov.alpha1 * ws.s_e_power, 0.0);
    let value = c0 + (ws.w.adjoint() * &s_quad * &ws.w)[(0, 0)].re;
    Ok(F2Report {
        value,
        c0,
        s_quad,
        shift_applied,
    })
}

/// Maps the simulation's disturbances onto the theory's single
/// input-perturbation variance: the per-row average power of the
/// data-path interference plus the receiver noise referred through the
/// normalized error.
pub fn effective_input_variance(
    scene: &Scene,
    f: &DVector<Complex64>,
    sigma_o2: f64,
) -> f64 {
    let k = scene.k() as f64;
    let n = scene.n_users();
    let interference: f64 = (0..n)
        .map(|l| user_signature(scene, f, l).norm_squared() / k)
        .sum::<f64>()
        / n as f64;
    interference + sigma_o2 / (scene.roi.x.norm_squared() + 1.0)
}
