//! Signed (general) measure control by exact penalization.
//!
//! The control is split as `u = u⁺ - u⁻` with `u⁺, u⁻ >= 0` and budget
//! `Σ(u⁺ + u⁻) <= α`; the disjoint-support (complementarity) condition
//! `u⁺_i u⁻_i = 0` is enforced through the exact penalty `γ (u⁺)ᵀ u⁻` added
//! to the tracking objective. For `γ` beyond the largest KKT multiplier the
//! penalized and constrained problems share their solutions, and `γ` is
//! grown geometrically with warm starts ([`gamma_homotopy`]).
//!
//! The KKT system of the penalized problem is rewritten with the max-NCP
//! function and solved by the same Tikhonov-stabilized semismooth Newton
//! iteration as the positive case, on the condensed `4n + 1` unknowns
//! `(u⁺, u⁻, μ¹, μ², μ³)`.
//!
//! The penalized landscape has a numerically flat valley of near-optimal
//! vertices (residuals at solver tolerance over a wide multiplier range);
//! converged SSN points are therefore cross-checked against the exact
//! double-double active-set solution of the equivalent L1-ball problem
//! ([`exact`]) and replaced whenever the exact point is strictly better.

pub mod dd;
pub mod exact;

use nalgebra::{DMatrix, DVector};
use pde_solver::{HeatSystem, PdeError};
use serde::{Deserialize, Serialize};
use thiserror::Error;

const NEWTON_EPS: f64 = 1e-12;
const STEP_CAP: f64 = 1e8;
/// Hard ceiling of the homotopy schedule (2^16).
const GAMMA_MAX: f64 = 65536.0;

#[derive(Debug, Error)]
pub enum KktGeneralError {
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(
        "general solver did not converge: residual {residual:.3e} after {iterations} Newton steps"
    )]
    NonConvergence {
        iterations: usize,
        residual: f64,
        best: Box<GeneralSolution>,
    },
    #[error(
        "gamma homotopy exhausted the schedule at gamma = {gamma_max}: {stages:?}"
    )]
    HomotopyExhausted {
        gamma_max: f64,
        stages: Vec<HomotopyStage>,
        best: Box<GeneralSolution>,
    },
}

/// Options for the general solver. Defaults: κ = 2, fixed γ = 70,
/// tol = 1e-12, 200 Newton steps per (sub)problem.
#[derive(Debug, Clone, Copy)]
pub struct GeneralOptions {
    pub kappa: f64,
    pub gamma: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for GeneralOptions {
    fn default() -> Self {
        GeneralOptions { kappa: 2.0, gamma: 70.0, tol: 1e-12, max_iter: 200 }
    }
}

/// How the reported point was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SolutionMethod {
    /// The semismooth Newton iterate.
    Ssn,
    /// The double-double active-set refinement replaced the SSN point.
    Refined,
}

/// Primal-dual point of the penalized general problem.
#[derive(Debug, Clone)]
pub struct GeneralSolution {
    pub u_plus: DVector<f64>,
    pub u_minus: DVector<f64>,
    /// Budget multiplier.
    pub mu1: f64,
    /// Bound multipliers for `u⁺ >= 0` and `u⁻ >= 0`.
    pub mu2: DVector<f64>,
    pub mu3: DVector<f64>,
    /// Newton steps spent (SSN count even when the refinement is reported).
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub converged: bool,
    pub method: SolutionMethod,
}

impl GeneralSolution {
    /// Signed control `u⁺ - u⁻`.
    pub fn control(&self) -> DVector<f64> {
        &self.u_plus - &self.u_minus
    }

    pub fn tv_plus(&self) -> f64 {
        self.u_plus.sum()
    }

    pub fn tv_minus(&self) -> f64 {
        self.u_minus.sum()
    }

    /// `max_i u⁺_i u⁻_i`.
    pub fn complementarity(&self) -> f64 {
        self.u_plus
            .iter()
            .zip(self.u_minus.iter())
            .map(|(p, m)| p * m)
            .fold(0.0, f64::max)
    }
}

/// One accepted or attempted homotopy stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HomotopyStage {
    pub gamma: f64,
    pub newton_steps: usize,
    pub residual: f64,
}

/// Result of the γ-homotopy.
#[derive(Debug)]
pub struct HomotopyResult {
    pub solution: GeneralSolution,
    pub terminal_gamma: f64,
    pub total_newton_steps: usize,
    pub stages: Vec<HomotopyStage>,
}

/// Penalized objective `1/2 |S(u⁺-u⁻) - y_d|² + γ (u⁺)ᵀ u⁻`.
pub fn penalized_objective(
    sys: &HeatSystem,
    y_d: &DVector<f64>,
    gamma: f64,
    u_plus: &DVector<f64>,
    u_minus: &DVector<f64>,
) -> Result<f64, KktGeneralError> {
    let w = u_plus - u_minus;
    let r = sys.final_state(&w)? - y_d;
    Ok(0.5 * r.norm_squared() + gamma * u_plus.dot(u_minus))
}

// state layout in the condensed vector z (length 4n+1):
// [u+ (n) | u- (n) | mu1 (1) | mu2 (n) | mu3 (n)]
fn unpack(z: &DVector<f64>, n: usize) -> (DVector<f64>, DVector<f64>, f64, DVector<f64>, DVector<f64>) {
    (
        z.rows(0, n).into_owned(),
        z.rows(n, n).into_owned(),
        z[2 * n],
        z.rows(2 * n + 1, n).into_owned(),
        z.rows(3 * n + 1, n).into_owned(),
    )
}

fn residual_condensed(
    s: &DMatrix<f64>,
    y_d: &DVector<f64>,
    alpha: f64,
    kappa: f64,
    gamma: f64,
    z: &DVector<f64>,
) -> DVector<f64> {
    let n = y_d.len();
    let (up, um, mu1, mu2, mu3) = unpack(z, n);
    let g = s.transpose() * (s * (&up - &um) - y_d);
    let mut f = DVector::zeros(4 * n + 1);
    for i in 0..n {
        f[i] = g[i] + gamma * um[i] + mu1 - mu2[i];
        f[n + i] = -g[i] + gamma * up[i] + mu1 - mu3[i];
    }
    f[2 * n] = (mu1 + kappa * (up.sum() + um.sum() - alpha)).max(0.0) - mu1;
    for i in 0..n {
        f[2 * n + 1 + i] = (mu2[i] - kappa * up[i]).max(0.0) - mu2[i];
        f[3 * n + 1 + i] = (mu3[i] - kappa * um[i]).max(0.0) - mu3[i];
    }
    f
}

/// NCP residual of the penalized KKT system at a candidate point, stacked as
/// `[∂u⁺ L; ∂u⁻ L; budget NCP; bound NCPs]` (length `4 n + 1`).
#[allow(clippy::too_many_arguments)]
pub fn general_kkt_residual(
    sys: &HeatSystem,
    y_d: &DVector<f64>,
    alpha: f64,
    kappa: f64,
    gamma: f64,
    sol: &GeneralSolution,
) -> DVector<f64> {
    let z = pack(sol, y_d.len());
    residual_condensed(sys.final_time_operator(), y_d, alpha, kappa, gamma, &z)
}

fn pack(sol: &GeneralSolution, n: usize) -> DVector<f64> {
    let mut z = DVector::zeros(4 * n + 1);
    for i in 0..n {
        z[i] = sol.u_plus[i];
        z[n + i] = sol.u_minus[i];
        z[2 * n + 1 + i] = sol.mu2[i];
        z[3 * n + 1 + i] = sol.mu3[i];
    }
    z[2 * n] = sol.mu1;
    z
}

fn solution_from_z(
    z: &DVector<f64>,
    n: usize,
    iterations: usize,
    residual: f64,
    history: Vec<f64>,
    converged: bool,
    method: SolutionMethod,
) -> GeneralSolution {
    let (up, um, mu1, mu2, mu3) = unpack(z, n);
    GeneralSolution {
        u_plus: up,
        u_minus: um,
        mu1,
        mu2,
        mu3,
        iterations,
        residual,
        residual_history: history,
        converged,
        method,
    }
}

/// Raw semismooth Newton loop on the condensed system; returns the best
/// iterate seen when the tolerance is not reached.
fn ssn_general_raw(
    sys: &HeatSystem,
    y_d: &DVector<f64>,
    alpha: f64,
    gamma: f64,
    warm: Option<&DVector<f64>>,
    opts: &GeneralOptions,
) -> (DVector<f64>, usize, f64, Vec<f64>, bool) {
    let n = y_d.len();
    let s = sys.final_time_operator();
    let h = s.transpose() * s;
    let kappa = opts.kappa;
    let dim = 4 * n + 1;

    let mut z = warm.cloned().unwrap_or_else(|| DVector::zeros(dim));
    let mut best = z.clone();
    let mut r_min = f64::INFINITY;
    let mut history = Vec::new();

    for it in 0..opts.max_iter {
        let f = residual_condensed(s, y_d, alpha, kappa, gamma, &z);
        let r = f.norm();
        history.push(r);
        if r < r_min {
            r_min = r;
            best.copy_from(&z);
        }
        if r <= opts.tol {
            return (z, it + 1, r, history, true);
        }

        let (up, um, mu1, mu2, mu3) = unpack(&z, n);
        let mut df = DMatrix::zeros(dim, dim);
        df.view_mut((0, 0), (n, n)).copy_from(&h);
        df.view_mut((n, n), (n, n)).copy_from(&h);
        for i in 0..n {
            for j in 0..n {
                let v = -h[(i, j)] + if i == j { gamma } else { 0.0 };
                df[(i, n + j)] = v;
                df[(n + i, j)] = v;
            }
            df[(i, 2 * n)] = 1.0;
            df[(n + i, 2 * n)] = 1.0;
            df[(i, 2 * n + 1 + i)] = -1.0;
            df[(n + i, 3 * n + 1 + i)] = -1.0;
        }
        if mu1 + kappa * (up.sum() + um.sum() - alpha) >= 0.0 {
            for j in 0..2 * n {
                df[(2 * n, j)] = kappa;
            }
        } else {
            df[(2 * n, 2 * n)] = -1.0;
        }
        for i in 0..n {
            if mu2[i] - kappa * up[i] >= 0.0 {
                df[(2 * n + 1 + i, i)] = -kappa;
            } else {
                df[(2 * n + 1 + i, 2 * n + 1 + i)] = -1.0;
            }
            if mu3[i] - kappa * um[i] >= 0.0 {
                df[(3 * n + 1 + i, n + i)] = -kappa;
            } else {
                df[(3 * n + 1 + i, 3 * n + 1 + i)] = -1.0;
            }
        }
        for i in 0..dim {
            df[(i, i)] += NEWTON_EPS;
        }

        let mut d = nalgebra::LU::new(df)
            .solve(&(-&f))
            .unwrap_or_else(|| DVector::zeros(dim));
        if d.iter().any(|x| !x.is_finite()) {
            d = DVector::zeros(dim);
        }
        let nd = d.norm();
        if nd > STEP_CAP {
            d *= STEP_CAP / nd;
        }
        z += d;
    }
    (best, opts.max_iter, r_min, history, false)
}

/// Semismooth Newton solve of the penalized problem at fixed γ (no
/// refinement). Non-convergence is reported through the `converged` flag;
/// the best iterate is returned either way.
pub fn ssn_solve_general(
    sys: &HeatSystem,
    y_d: &DVector<f64>,
    alpha: f64,
    gamma: f64,
    warm: Option<&GeneralSolution>,
    opts: &GeneralOptions,
) -> Result<GeneralSolution, KktGeneralError> {
    validate(sys, y_d, alpha)?;
    let n = y_d.len();
    let warm_z = warm.map(|w| pack(w, n));
    let (z, it, r, history, ok) =
        ssn_general_raw(sys, y_d, alpha, gamma, warm_z.as_ref(), opts);
    Ok(solution_from_z(&z, n, it, r, history, ok, SolutionMethod::Ssn))
}

fn validate(sys: &HeatSystem, y_d: &DVector<f64>, alpha: f64) -> Result<(), KktGeneralError> {
    let n = sys.grid().n_nodes();
    if y_d.len() != n {
        return Err(KktGeneralError::InvalidArgument(format!(
            "y_d has length {}, expected {n}",
            y_d.len()
        )));
    }
    if !(alpha >= 0.0) {
        return Err(KktGeneralError::InvalidArgument(format!(
            "alpha must be nonnegative, got {alpha}"
        )));
    }
    Ok(())
}

/// Build the full primal-dual vector for the refined (L1-ball) point: the
/// Jordan split of `w` plus multipliers reconstructed from the gradient.
fn refined_z(
    sys: &HeatSystem,
    y_d: &DVector<f64>,
    gamma: f64,
    refined: &exact::L1BallSolution,
) -> DVector<f64> {
    let n = y_d.len();
    let w = DVector::from_vec(refined.w.clone());
    let s = sys.final_time_operator();
    let g = s.transpose() * (s * &w - y_d);
    let mut z = DVector::zeros(4 * n + 1);
    let mu1 = refined.lambda;
    z[2 * n] = mu1;
    for i in 0..n {
        let up = w[i].max(0.0);
        let um = (-w[i]).max(0.0);
        z[i] = up;
        z[n + i] = um;
        z[2 * n + 1 + i] = if w[i] > 0.0 { 0.0 } else { g[i] + gamma * um + mu1 };
        z[3 * n + 1 + i] = if w[i] < 0.0 { 0.0 } else { -g[i] + gamma * up + mu1 };
    }
    z
}

fn tracking_objective(sys: &HeatSystem, y_d: &DVector<f64>, w: &DVector<f64>) -> f64 {
    let s = sys.final_time_operator();
    0.5 * (s * w - y_d).norm_squared()
}

/// Solve the penalized problem at fixed γ: SSN first, then the exact
/// double-double refinement; the refined point replaces the SSN iterate when
/// it verifies to tolerance and is certified better (target reachable, SSN
/// stuck, or strictly smaller objective).
pub fn solve_general(
    sys: &HeatSystem,
    y_d: &DVector<f64>,
    alpha: f64,
    opts: &GeneralOptions,
) -> Result<GeneralSolution, KktGeneralError> {
    validate(sys, y_d, alpha)?;
    let n = y_d.len();
    let gamma = opts.gamma;
    let (z, it, r, history, ok) = ssn_general_raw(sys, y_d, alpha, gamma, None, opts);

    if let Some(refined) = exact::solve_l1ball(sys, y_d, alpha) {
        let zr = refined_z(sys, y_d, gamma, &refined);
        let rr = residual_condensed(sys.final_time_operator(), y_d, alpha, opts.kappa, gamma, &zr)
            .norm();
        if rr <= opts.tol {
            let take = refined.reachable || !ok || {
                let (up, um, ..) = unpack(&z, n);
                let j_ssn = tracking_objective(sys, y_d, &(&up - &um));
                let j_ref = tracking_objective(sys, y_d, &DVector::from_vec(refined.w.clone()));
                j_ref < j_ssn
            };
            if take {
                return Ok(solution_from_z(&zr, n, it, rr, history, true, SolutionMethod::Refined));
            }
        }
    }

    if ok {
        Ok(solution_from_z(&z, n, it, r, history, true, SolutionMethod::Ssn))
    } else {
        Err(KktGeneralError::NonConvergence {
            iterations: it,
            residual: r,
            best: Box::new(solution_from_z(&z, n, it, r, history, false, SolutionMethod::Ssn)),
        })
    }
}

/// Exact-penalty homotopy: γ starts at 1 and doubles with warm starts. A
/// stage is terminal when (a) the SSN residual meets the tolerance, (b) the
/// complementarity defect is below `1e-12 max(α,1)²`, and (c) γ dominates
/// the a-priori multiplier bound `|S^T y_d|_∞` — the exact-penalty
/// threshold: γ must exceed the largest KKT multiplier, and every
/// multiplier is bounded by the gradient at `u = 0`. The accepted terminal
/// point is then polished by the exact refinement under the same
/// acceptance policy as [`solve_general`].
pub fn gamma_homotopy(
    sys: &HeatSystem,
    y_d: &DVector<f64>,
    alpha: f64,
    opts: &GeneralOptions,
) -> Result<HomotopyResult, KktGeneralError> {
    validate(sys, y_d, alpha)?;
    let n = y_d.len();
    let s = sys.final_time_operator();
    let gate = (s.transpose() * y_d).amax();
    let comp_tol = 1e-12 * alpha.max(1.0).powi(2);

    let mut gamma = 1.0;
    let mut warm: Option<DVector<f64>> = None;
    let mut stages = Vec::new();
    let mut total = 0;
    let mut last_best: Option<(DVector<f64>, f64, Vec<f64>)> = None;

    while gamma <= GAMMA_MAX {
        let (z, it, r, history, ok) =
            ssn_general_raw(sys, y_d, alpha, gamma, warm.as_ref(), opts);
        total += it;
        stages.push(HomotopyStage { gamma, newton_steps: it, residual: r });
        let sol_probe = solution_from_z(&z, n, it, r, Vec::new(), ok, SolutionMethod::Ssn);
        let comp = sol_probe.complementarity();
        if ok && comp <= comp_tol && gamma >= gate {
            // terminal stage: attempt the exact refinement
            let mut final_z = z.clone();
            let mut method = SolutionMethod::Ssn;
            let mut res = r;
            if let Some(refined) = exact::solve_l1ball(sys, y_d, alpha) {
                let zr = refined_z(sys, y_d, gamma, &refined);
                let rr = residual_condensed(s, y_d, alpha, opts.kappa, gamma, &zr).norm();
                if rr <= opts.tol {
                    let (up, um, ..) = unpack(&z, n);
                    let j_ssn = tracking_objective(sys, y_d, &(&up - &um));
                    let j_ref =
                        tracking_objective(sys, y_d, &DVector::from_vec(refined.w.clone()));
                    if refined.reachable || j_ref < j_ssn {
                        final_z = zr;
                        method = SolutionMethod::Refined;
                        res = rr;
                    }
                }
            }
            let solution = solution_from_z(&final_z, n, total, res, history, true, method);
            return Ok(HomotopyResult {
                solution,
                terminal_gamma: gamma,
                total_newton_steps: total,
                stages,
            });
        }
        // on a gated-but-stuck stage the certified exact point stands in
        if gamma >= gate {
            if let Some(refined) = exact::solve_l1ball(sys, y_d, alpha) {
                let zr = refined_z(sys, y_d, gamma, &refined);
                let rr = residual_condensed(s, y_d, alpha, opts.kappa, gamma, &zr).norm();
                if rr <= opts.tol {
                    let solution =
                        solution_from_z(&zr, n, total, rr, history, true, SolutionMethod::Refined);
                    return Ok(HomotopyResult {
                        solution,
                        terminal_gamma: gamma,
                        total_newton_steps: total,
                        stages,
                    });
                }
            }
        }
        last_best = Some((z.clone(), r, history));
        warm = Some(z);
        gamma *= 2.0;
    }

    let (z, r, history) = last_best.unwrap_or_else(|| {
        (DVector::zeros(4 * n + 1), f64::INFINITY, Vec::new())
    });
    Err(KktGeneralError::HomotopyExhausted {
        gamma_max: GAMMA_MAX,
        stages: stages.clone(),
        best: Box::new(solution_from_z(&z, n, total, r, history, false, SolutionMethod::Ssn)),
    })
}

/// First-order optimality report for the general problem.
#[derive(Debug, Clone)]
pub struct GeneralOptimality {
    /// Multiplier of the TV budget (`0` when inactive).
    pub lambda: f64,
    pub support_plus: Vec<usize>,
    pub support_minus: Vec<usize>,
    pub budget_active: bool,
    pub adjoint_max: f64,
    pub duality_value: f64,
    pub max_violation: f64,
    pub ok: bool,
}

/// Check the signed sparsity structure: when the budget is slack the
/// adjoint vanishes (reachable target); when it is active the supports of
/// `u⁺`/`u⁻` sit where the initial adjoint attains `∓λ` and `|φ(0)| <= λ`
/// everywhere.
pub fn verify_general_optimality(
    sys: &HeatSystem,
    y_d: &DVector<f64>,
    alpha: f64,
    sol: &GeneralSolution,
) -> Result<GeneralOptimality, KktGeneralError> {
    let support_eps = 1e-10 * alpha.max(1.0);
    let check_eps = 1e-8;
    let n = y_d.len();
    let w = sol.control();
    let s = sys.final_time_operator();
    let g = s.transpose() * (s * &w - y_d);
    let tv = sol.tv_plus() + sol.tv_minus();
    let budget_active = tv >= alpha - support_eps;
    let lambda = if budget_active { sol.mu1 } else { 0.0 };
    let support_plus: Vec<usize> =
        (0..n).filter(|&i| sol.u_plus[i] > support_eps).collect();
    let support_minus: Vec<usize> =
        (0..n).filter(|&i| sol.u_minus[i] > support_eps).collect();

    let mut viol: f64 = 0.0;
    viol = viol.max(-sol.u_plus.min()).max(-sol.u_minus.min()); // nonnegativity
    viol = viol.max(tv - alpha); // budget
    viol = viol.max(sol.complementarity()); // disjoint supports
    let scale = lambda.abs().max(1.0);
    if budget_active {
        for &i in &support_plus {
            viol = viol.max((g[i] + lambda).abs() / scale);
        }
        for &i in &support_minus {
            viol = viol.max((g[i] - lambda).abs() / scale);
        }
        for i in 0..n {
            viol = viol.max((g[i].abs() - lambda).max(0.0) / scale);
        }
    } else {
        viol = viol.max(g.amax()); // slack budget: adjoint ≈ 0
    }

    Ok(GeneralOptimality {
        lambda,
        support_plus,
        support_minus,
        budget_active,
        adjoint_max: g.amax(),
        duality_value: g.dot(&w),
        max_violation: viol,
        ok: viol <= check_eps,
    })
}
