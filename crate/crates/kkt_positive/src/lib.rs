//! Semismooth Newton (SSN) solver for the positive-control case
//!
//! ```text
//! min_{u >= 0, Σu <= α}  1/2 |S u - y_d|²
//! ```
//!
//! over nodal-Dirac coefficient vectors `u`. The KKT system is rewritten
//! with the max-NCP function,
//!
//! ```text
//! F(u, μ¹, μ²) = [ g(u) + μ¹ 1 - μ²
//!                  max(0, μ¹ + κ(Σu - α)) - μ¹
//!                  max(0, μ² - κ u) - μ² ]  = 0,
//! ```
//!
//! where `g(u) = S^T (S u - y_d)` is the adjoint gradient in the Dirac
//! pairing, and solved by a Newton iteration on the piecewise-linear system.
//! At kinks (max argument exactly zero) the generalized derivative of the
//! inner argument is taken.
//!
//! Newton steps solve the Tikhonov-stabilized system `(DF + εI) d = -F`
//! (ε = 1e-12) by dense partial-pivot LU with a step-norm cap; this keeps
//! the iteration well-defined on the rank-deficient active-set
//! configurations that occur at degenerate vertices.

use nalgebra::{DMatrix, DVector};
use pde_solver::{HeatSystem, PdeError};
use thiserror::Error;

/// Tikhonov shift applied to every Newton matrix.
const NEWTON_EPS: f64 = 1e-12;
/// Cap on the Euclidean norm of a Newton step.
const STEP_CAP: f64 = 1e8;
/// Post-convergence snap threshold: coefficients this close to zero whose
/// bound multiplier is decisively positive are rounded to exact zero.
const SNAP_TOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum KktError {
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error(
        "semismooth Newton did not converge: residual {residual:.3e} after {iterations} iterations"
    )]
    NonConvergence {
        iterations: usize,
        residual: f64,
        /// Last iterate, for diagnosis / partial reports.
        best: Box<PositiveSolution>,
    },
}

/// Solver options. Defaults: κ = 1, tol = 1e-12, 200 iterations.
#[derive(Debug, Clone, Copy)]
pub struct SsnOptions {
    pub kappa: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SsnOptions {
    fn default() -> Self {
        SsnOptions { kappa: 1.0, tol: 1e-12, max_iter: 200 }
    }
}

/// Converged (or best-effort) primal-dual point of the positive problem.
#[derive(Debug, Clone)]
pub struct PositiveSolution {
    pub u: DVector<f64>,
    /// Budget multiplier (scalar, for `Σu <= α`).
    pub mu1: f64,
    /// Bound multipliers (for `u >= 0`).
    pub mu2: DVector<f64>,
    pub iterations: usize,
    pub residual: f64,
    pub residual_history: Vec<f64>,
    pub converged: bool,
}

/// Tracking objective `J(u) = 1/2 |S u - y_d|²` in the Dirac-coefficient
/// pairing, together with its gradient `g = S^T (S u - y_d)` computed by a
/// forward solve followed by the adjoint solve (no cached operator).
pub fn objective_and_gradient(
    sys: &HeatSystem,
    y_d: &DVector<f64>,
    u: &DVector<f64>,
) -> Result<(f64, DVector<f64>), KktError> {
    let r = sys.final_state(u)? - y_d;
    let g = sys.adjoint_gradient(&r)?;
    Ok((0.5 * r.norm_squared(), g))
}

/// Reduced Hessian `H = S^T S` from the cached final-time operator.
pub fn hessian(sys: &HeatSystem) -> DMatrix<f64> {
    let s = sys.final_time_operator();
    s.transpose() * s
}

/// The NCP residual `F(u, μ¹, μ²)` of the positive KKT system, stacked as
/// `[stationarity; budget NCP; bound NCP]` (length `2 n + 1`).
pub fn ncp_residual(
    sys: &HeatSystem,
    y_d: &DVector<f64>,
    alpha: f64,
    kappa: f64,
    u: &DVector<f64>,
    mu1: f64,
    mu2: &DVector<f64>,
) -> DVector<f64> {
    let s = sys.final_time_operator();
    let g = s.transpose() * (s * u - y_d);
    residual_from_gradient(&g, alpha, kappa, u, mu1, mu2)
}

fn residual_from_gradient(
    g: &DVector<f64>,
    alpha: f64,
    kappa: f64,
    u: &DVector<f64>,
    mu1: f64,
    mu2: &DVector<f64>,
) -> DVector<f64> {
    let n = u.len();
    let mut f = DVector::zeros(2 * n + 1);
    for i in 0..n {
        f[i] = g[i] + mu1 - mu2[i];
    }
    f[n] = (mu1 + kappa * (u.sum() - alpha)).max(0.0) - mu1;
    for i in 0..n {
        f[n + 1 + i] = (mu2[i] - kappa * u[i]).max(0.0) - mu2[i];
    }
    f
}

/// Solve the positive problem by semismooth Newton from `u = 0`.
pub fn ssn_solve_positive(
    sys: &HeatSystem,
    y_d: &DVector<f64>,
    alpha: f64,
    opts: &SsnOptions,
) -> Result<PositiveSolution, KktError> {
    let n = sys.grid().n_nodes();
    if y_d.len() != n {
        return Err(KktError::InvalidArgument(format!(
            "y_d has length {}, expected {n}",
            y_d.len()
        )));
    }
    if !(alpha >= 0.0) {
        return Err(KktError::InvalidArgument(format!("alpha must be nonnegative, got {alpha}")));
    }
    let s = sys.final_time_operator();
    let h = s.transpose() * s;
    let kappa = opts.kappa;

    let dim = 2 * n + 1;
    let mut u = DVector::zeros(n);
    let mut mu1 = 0.0;
    let mut mu2 = DVector::zeros(n);
    let mut history = Vec::new();
    let mut residual = f64::INFINITY;

    for it in 0..opts.max_iter {
        let g = s.transpose() * (s * &u - y_d);
        let f = residual_from_gradient(&g, alpha, kappa, &u, mu1, &mu2);
        residual = f.norm();
        history.push(residual);
        if residual <= opts.tol {
            let mut sol = PositiveSolution {
                u,
                mu1,
                mu2,
                iterations: it,
                residual,
                residual_history: history,
                converged: true,
            };
            snap_to_zero(&mut sol, kappa);
            return Ok(sol);
        }

        // generalized Jacobian
        let mut df = DMatrix::zeros(dim, dim);
        df.view_mut((0, 0), (n, n)).copy_from(&h);
        for i in 0..n {
            df[(i, n)] = 1.0;
            df[(i, n + 1 + i)] = -1.0;
        }
        if mu1 + kappa * (u.sum() - alpha) >= 0.0 {
            for i in 0..n {
                df[(n, i)] = kappa;
            }
        } else {
            df[(n, n)] = -1.0;
        }
        for i in 0..n {
            if mu2[i] - kappa * u[i] >= 0.0 {
                df[(n + 1 + i, i)] = -kappa;
            } else {
                df[(n + 1 + i, n + 1 + i)] = -1.0;
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
        for i in 0..n {
            u[i] += d[i];
            mu2[i] += d[n + 1 + i];
        }
        mu1 += d[n];
    }

    Err(KktError::NonConvergence {
        iterations: opts.max_iter,
        residual,
        best: Box::new(PositiveSolution {
            u,
            mu1,
            mu2,
            iterations: opts.max_iter,
            residual,
            residual_history: history,
            converged: false,
        }),
    })
}

/// Round coefficients that are numerically zero — and certified inactive by
/// a decisively positive bound multiplier — to exact zero. The induced
/// residual perturbation is below the solver tolerance.
fn snap_to_zero(sol: &mut PositiveSolution, kappa: f64) {
    for i in 0..sol.u.len() {
        if sol.u[i].abs() <= SNAP_TOL && sol.mu2[i] > kappa * SNAP_TOL {
            sol.u[i] = 0.0;
        }
    }
}

/// First-order optimality report for a candidate `u` of the positive problem.
#[derive(Debug, Clone)]
pub struct PositiveOptimality {
    /// `λ̄ = min_j φ(0)(x_j)`, the extreme adjoint value.
    pub lambda_bar: f64,
    /// Support of `u` (indices with `u_j > support_eps`).
    pub support: Vec<usize>,
    /// `∫ φ(0) dū = g^T u`.
    pub duality_value: f64,
    /// `max_j |φ(0)(x_j)|`.
    pub adjoint_max: f64,
    pub budget_active: bool,
    /// Worst violation over feasibility and support conditions.
    pub max_violation: f64,
    pub ok: bool,
}

/// Check the sparsity structure of Theorem 3.5: the support of an optimal
/// `ū` concentrates where the initial-time adjoint attains its minimum, the
/// multiplier is `λ̄ = min φ(0)`, and `λ̄ ≈ 0` when the budget is inactive.
pub fn verify_positive_optimality(
    sys: &HeatSystem,
    y_d: &DVector<f64>,
    alpha: f64,
    u: &DVector<f64>,
) -> Result<PositiveOptimality, KktError> {
    let support_eps = 1e-10 * alpha.max(1.0);
    let min_eps = 1e-8;
    let (_, g) = objective_and_gradient(sys, y_d, u)?;
    let lambda_bar = g.min();
    let support: Vec<usize> =
        (0..u.len()).filter(|&i| u[i] > support_eps).collect();
    let total = u.sum();
    let budget_active = total >= alpha - support_eps;

    let mut viol: f64 = 0.0;
    for i in 0..u.len() {
        viol = viol.max(-u[i]); // nonnegativity
    }
    viol = viol.max(total - alpha); // budget
    for &i in &support {
        viol = viol.max((g[i] - lambda_bar).abs()); // support at the minimum
    }
    if !budget_active {
        viol = viol.max(-lambda_bar); // inactive budget forces λ̄ >= 0 (≈ 0)
    }

    Ok(PositiveOptimality {
        lambda_bar,
        support,
        duality_value: g.dot(u),
        adjoint_max: g.amax(),
        budget_active,
        max_violation: viol,
        ok: viol <= min_eps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use fem_core::build_grid;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sys20() -> HeatSystem {
        HeatSystem::new(build_grid(1.0, 20, 1.0, 20).unwrap(), 0.01).unwrap()
    }

    fn unit_dirac(n: usize, j: usize, w: f64) -> DVector<f64> {
        let mut u = DVector::zeros(n);
        u[j] = w;
        u
    }

    #[test]
    fn reachable_target_recovered_exactly() {
        let sys = sys20();
        let n = sys.grid().n_nodes();
        let y_d = sys.final_state(&unit_dirac(n, 10, 1.0)).unwrap();
        let sol = ssn_solve_positive(&sys, &y_d, 2.0, &SsnOptions::default()).unwrap();
        assert!(sol.converged);
        let r = sys.final_state(&sol.u).unwrap() - &y_d;
        assert!(r.norm() <= 1e-10, "misfit {}", r.norm());
        assert_relative_eq!(sol.u.sum(), 1.0, epsilon = 1e-10);
        let rep = verify_positive_optimality(&sys, &y_d, 2.0, &sol.u).unwrap();
        assert!(rep.ok);
        assert!(rep.adjoint_max <= 1e-8);
        assert!(!rep.budget_active);
    }

    #[test]
    fn budget_activates_when_target_needs_more_mass() {
        let sys = sys20();
        let n = sys.grid().n_nodes();
        let y_d = 1.5 * sys.final_state(&unit_dirac(n, 10, 1.0)).unwrap();
        let sol = ssn_solve_positive(&sys, &y_d, 1.0, &SsnOptions::default()).unwrap();
        assert!(sol.converged);
        assert_relative_eq!(sol.u.sum(), 1.0, epsilon = 1e-10);
        let rep = verify_positive_optimality(&sys, &y_d, 1.0, &sol.u).unwrap();
        assert!(rep.ok && rep.budget_active);
        assert!(rep.lambda_bar < 0.0);
    }

    #[test]
    fn negative_target_yields_exact_zero() {
        let sys = sys20();
        let n = sys.grid().n_nodes();
        let y_d = DVector::from_element(n, -1.0);
        let sol = ssn_solve_positive(&sys, &y_d, 1.0, &SsnOptions::default()).unwrap();
        assert!(sol.converged);
        // exactly zero, not merely small
        assert!(sol.u.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn ncp_residual_small_at_converged_point() {
        let sys = sys20();
        let n = sys.grid().n_nodes();
        let y_d = 1.5 * sys.final_state(&unit_dirac(n, 10, 1.0)).unwrap();
        let opts = SsnOptions::default();
        let sol = ssn_solve_positive(&sys, &y_d, 1.0, &opts).unwrap();
        let f = ncp_residual(&sys, &y_d, 1.0, opts.kappa, &sol.u, sol.mu1, &sol.mu2);
        // snap perturbs by at most ||H|| * SNAP_TOL
        assert!(f.norm() <= 1e-7, "residual {}", f.norm());
        // residual history decreases to tolerance
        assert!(sol.residual <= opts.tol);
        assert_eq!(sol.residual_history.len(), sol.iterations + 1);
    }

    #[test]
    fn kappa_scaling_invariance() {
        let sys = sys20();
        let n = sys.grid().n_nodes();
        let y_d = 1.5 * sys.final_state(&unit_dirac(n, 10, 1.0)).unwrap();
        let a = ssn_solve_positive(&sys, &y_d, 1.0, &SsnOptions { kappa: 1.0, ..Default::default() })
            .unwrap();
        let b = ssn_solve_positive(&sys, &y_d, 1.0, &SsnOptions { kappa: 10.0, ..Default::default() })
            .unwrap();
        assert!((a.u - b.u).amax() <= 1e-8);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        // spec: random control on a 5-node grid vs central differences
        let sys = HeatSystem::new(build_grid(1.0, 4, 1.0, 6).unwrap(), 0.01).unwrap();
        let n = sys.grid().n_nodes();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let y_d = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
        for _ in 0..10 {
            let u = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
            let (_, g) = objective_and_gradient(&sys, &y_d, &u).unwrap();
            let dh = 1e-6;
            for i in 0..n {
                let mut up = u.clone();
                let mut um = u.clone();
                up[i] += dh;
                um[i] -= dh;
                let (jp, _) = objective_and_gradient(&sys, &y_d, &up).unwrap();
                let (jm, _) = objective_and_gradient(&sys, &y_d, &um).unwrap();
                let fd = (jp - jm) / (2.0 * dh);
                assert!(
                    (g[i] - fd).abs() <= 1e-6 * g[i].abs().max(1.0),
                    "component {i}: g = {}, fd = {fd}",
                    g[i]
                );
            }
        }
    }

    #[test]
    fn hessian_is_symmetric_psd() {
        let sys = sys20();
        let h = hessian(&sys);
        assert!((&h - h.transpose()).amax() <= 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let x = DVector::from_fn(h.nrows(), |_, _| rng.gen_range(-1.0..1.0));
            assert!(x.dot(&(&h * &x)) >= -1e-12);
        }
    }

    #[test]
    fn brute_force_oracle_small_grid() {
        // N_h = 3 nodes, N_τ = 2 steps: exhaustive search over the simplex
        // with step α/200 must not beat the SSN solution by more than 1e-6.
        let sys = HeatSystem::new(build_grid(1.0, 2, 1.0, 2).unwrap(), 0.05).unwrap();
        let n = 3;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..3 {
            let alpha = [0.5, 1.0, 2.0][trial];
            let y_d = DVector::from_fn(n, |_, _| rng.gen_range(-0.5..1.5));
            let sol = ssn_solve_positive(&sys, &y_d, alpha, &SsnOptions::default()).unwrap();
            let (j_ssn, _) = objective_and_gradient(&sys, &y_d, &sol.u).unwrap();

            let steps = 200usize;
            let delta = alpha / steps as f64;
            let mut j_best = f64::INFINITY;
            for i0 in 0..=steps {
                for i1 in 0..=(steps - i0) {
                    for i2 in 0..=(steps - i0 - i1) {
                        let u = DVector::from_vec(vec![
                            i0 as f64 * delta,
                            i1 as f64 * delta,
                            i2 as f64 * delta,
                        ]);
                        let (j, _) = objective_and_gradient(&sys, &y_d, &u).unwrap();
                        if j < j_best {
                            j_best = j;
                        }
                    }
                }
            }
            assert!(
                j_ssn <= j_best + 1e-6,
                "alpha {alpha}: SSN J = {j_ssn}, brute force J = {j_best}"
            );
        }
    }
}
