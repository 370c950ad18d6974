//! Time-stepping solvers for the 1D heat equation `y_t - a y_xx = f` with
//! natural boundary conditions and measure-valued initial data, discretized
//! by P1 finite elements in space and a one-step θ-scheme in time (θ = 1,
//! i.e. implicit Euler / dG(0), by default).
//!
//! The initial condition is given in the dual sense: the coefficient vector
//! `u` of the control measure enters through `M y_0 = u`. The final-time
//! solution operator `S : u ↦ y(T)` is assembled column by column on demand
//! and cached; the adjoint solve runs the same tridiagonal factorization
//! backwards in time.

use fem_core::{assemble, FemError, Grid1d, SymTridiag, TriFactor};
use nalgebra::{DMatrix, DVector};
use std::sync::OnceLock;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PdeError {
    #[error(transparent)]
    Fem(#[from] FemError),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
}

/// Discretized heat equation: grid, assembled operators, and the factorized
/// time-stepping matrices `K1 = M + θ τ a A`, `K0 = M - (1-θ) τ a A`.
#[derive(Debug)]
pub struct HeatSystem {
    grid: Grid1d,
    diffusion: f64,
    theta: f64,
    mass: SymTridiag,
    stiffness: SymTridiag,
    k0: SymTridiag,
    k1: SymTridiag,
    mass_factor: TriFactor,
    k1_factor: TriFactor,
    s_cache: OnceLock<DMatrix<f64>>,
}

impl HeatSystem {
    /// Implicit Euler system (θ = 1), the standard dG(0) discretization.
    pub fn new(grid: Grid1d, diffusion: f64) -> Result<Self, PdeError> {
        Self::with_theta(grid, diffusion, 1.0)
    }

    /// General one-step θ-scheme, θ ∈ (1/2, 1].
    pub fn with_theta(grid: Grid1d, diffusion: f64, theta: f64) -> Result<Self, PdeError> {
        if !(diffusion > 0.0) || !diffusion.is_finite() {
            return Err(PdeError::InvalidParameter(format!(
                "diffusion must be positive, got {diffusion}"
            )));
        }
        if !(theta > 0.5 && theta <= 1.0) {
            return Err(PdeError::InvalidParameter(format!(
                "theta must lie in (1/2, 1], got {theta}"
            )));
        }
        let (mass, stiffness) = assemble(&grid);
        let tau = grid.tau();
        let k1 = SymTridiag::lin_comb(1.0, &mass, theta * tau * diffusion, &stiffness);
        let k0 = SymTridiag::lin_comb(1.0, &mass, -(1.0 - theta) * tau * diffusion, &stiffness);
        let mass_factor = mass.factorize()?;
        let k1_factor = k1.factorize()?;
        Ok(HeatSystem {
            grid,
            diffusion,
            theta,
            mass,
            stiffness,
            k0,
            k1,
            mass_factor,
            k1_factor,
            s_cache: OnceLock::new(),
        })
    }

    pub fn grid(&self) -> &Grid1d {
        &self.grid
    }

    pub fn diffusion(&self) -> f64 {
        self.diffusion
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    pub fn mass(&self) -> &SymTridiag {
        &self.mass
    }

    pub fn stiffness(&self) -> &SymTridiag {
        &self.stiffness
    }

    /// Explicit-side stepping matrix `M - (1-θ) τ a A`.
    pub fn k0(&self) -> &SymTridiag {
        &self.k0
    }

    /// Implicit-side stepping matrix `M + θ τ a A`.
    pub fn k1(&self) -> &SymTridiag {
        &self.k1
    }

    fn check_dim(&self, v: &DVector<f64>) -> Result<(), PdeError> {
        if v.len() != self.grid.n_nodes() {
            return Err(PdeError::DimensionMismatch {
                expected: self.grid.n_nodes(),
                got: v.len(),
            });
        }
        Ok(())
    }

    /// Forward solve. `u_coeffs` is the coefficient vector of the initial
    /// measure (`M y_0 = u`); `source`, if given, holds `f_k` for the steps
    /// `k = 1..=n_steps`. Returns the trajectory `y_0, ..., y_N`.
    pub fn solve_forward(
        &self,
        u_coeffs: &DVector<f64>,
        source: Option<&[DVector<f64>]>,
    ) -> Result<Vec<DVector<f64>>, PdeError> {
        self.check_dim(u_coeffs)?;
        let n_steps = self.grid.n_steps();
        if let Some(f) = source {
            if f.len() != n_steps {
                return Err(PdeError::DimensionMismatch { expected: n_steps, got: f.len() });
            }
            for fk in f {
                self.check_dim(fk)?;
            }
        }
        let tau = self.grid.tau();
        let mut traj = Vec::with_capacity(n_steps + 1);
        let mut y = DVector::from_vec(self.mass_factor.solve(u_coeffs.as_slice()));
        traj.push(y.clone());
        for k in 0..n_steps {
            let mut rhs = self.k0.matvec(y.as_slice());
            if let Some(f) = source {
                let mf = self.mass.matvec(f[k].as_slice());
                for (r, m) in rhs.iter_mut().zip(&mf) {
                    *r += tau * m;
                }
            }
            y = DVector::from_vec(self.k1_factor.solve(&rhs));
            traj.push(y.clone());
        }
        Ok(traj)
    }

    /// Final state `y(T) = S u` computed by time stepping (no cached matrix).
    pub fn final_state(&self, u_coeffs: &DVector<f64>) -> Result<DVector<f64>, PdeError> {
        self.check_dim(u_coeffs)?;
        let mut y = DVector::from_vec(self.mass_factor.solve(u_coeffs.as_slice()));
        for _ in 0..self.grid.n_steps() {
            y = DVector::from_vec(self.k1_factor.solve(&self.k0.matvec(y.as_slice())));
        }
        Ok(y)
    }

    /// Adjoint solve backwards in time: `φ_N = terminal_residual`,
    /// `K1 φ_{k-1} = K0 φ_k`. Returned in forward time order `φ_0, ..., φ_N`.
    ///
    /// With this convention the exact discrete duality identity
    /// `(y_u(T) - y_d)^T M z_v(T) = φ(0)^T v` holds (see `duality_gap`).
    pub fn solve_adjoint(
        &self,
        terminal_residual: &DVector<f64>,
    ) -> Result<Vec<DVector<f64>>, PdeError> {
        self.check_dim(terminal_residual)?;
        let n_steps = self.grid.n_steps();
        let mut rev = Vec::with_capacity(n_steps + 1);
        let mut phi = terminal_residual.clone();
        rev.push(phi.clone());
        for _ in 0..n_steps {
            phi = DVector::from_vec(self.k1_factor.solve(&self.k0.matvec(phi.as_slice())));
            rev.push(phi.clone());
        }
        rev.reverse();
        Ok(rev)
    }

    /// Gradient of `u ↦ 1/2 |S u - y_d|²` at residual `r = S u - y_d` in the
    /// Dirac-coefficient pairing: `S^T r`, evaluated as the initial value of
    /// the adjoint solve with terminal datum `M^{-1} r` (equivalently, the
    /// nodal values of the adjoint state driven by the Riesz representative
    /// of the residual functional).
    pub fn adjoint_gradient(&self, residual: &DVector<f64>) -> Result<DVector<f64>, PdeError> {
        self.check_dim(residual)?;
        let mut g = DVector::from_vec(self.mass_factor.solve(residual.as_slice()));
        for _ in 0..self.grid.n_steps() {
            g = DVector::from_vec(self.k1_factor.solve(&self.k0.matvec(g.as_slice())));
        }
        Ok(g)
    }

    /// The final-time solution operator `S` as a dense matrix, assembled
    /// column by column with the cached tridiagonal factorizations and
    /// memoized for the lifetime of the system.
    pub fn final_time_operator(&self) -> &DMatrix<f64> {
        self.s_cache.get_or_init(|| {
            let n = self.grid.n_nodes();
            let mut s = DMatrix::zeros(n, n);
            for c in 0..n {
                let e = DVector::from_fn(n, |i, _| if i == c { 1.0 } else { 0.0 });
                let col = self.final_state(&e).expect("dimension is consistent by construction");
                s.set_column(c, &col);
            }
            s
        })
    }

    /// Solve `M x = rhs` with the cached mass factorization (e.g. for Riesz
    /// representatives of coefficient-space functionals).
    pub fn mass_solve(&self, rhs: &DVector<f64>) -> Result<DVector<f64>, PdeError> {
        self.check_dim(rhs)?;
        Ok(DVector::from_vec(self.mass_factor.solve(rhs.as_slice())))
    }

    /// `|r|_{M_h} = sqrt(r^T M r)`.
    pub fn mass_norm(&self, r: &DVector<f64>) -> f64 {
        let mr = self.mass.matvec(r.as_slice());
        r.iter().zip(&mr).map(|(a, b)| a * b).sum::<f64>().max(0.0).sqrt()
    }

    /// Defect in the discrete duality identity
    /// `(y_u(T) - y_d)^T M z_v(T) - φ_u(0)^T v` where `z_v` is the forward
    /// solve from `v` and `φ_u` the adjoint driven by `y_u(T) - y_d`.
    pub fn duality_gap(
        &self,
        u: &DVector<f64>,
        v: &DVector<f64>,
        y_d: &DVector<f64>,
    ) -> Result<f64, PdeError> {
        self.check_dim(y_d)?;
        let r = self.final_state(u)? - y_d;
        let z_t = self.final_state(v)?;
        let mz = self.mass.matvec(z_t.as_slice());
        let lhs: f64 = r.iter().zip(&mz).map(|(a, b)| a * b).sum();
        let phi0 = &self.solve_adjoint(&r)?[0];
        let rhs = phi0.dot(v);
        Ok((lhs - rhs).abs())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use fem_core::build_grid;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn sys_default() -> HeatSystem {
        HeatSystem::new(build_grid(1.0, 20, 1.0, 20).unwrap(), 0.01).unwrap()
    }

    fn mass_functional(sys: &HeatSystem, y: &DVector<f64>) -> f64 {
        sys.mass().matvec(y.as_slice()).iter().sum()
    }

    #[test]
    fn rejects_bad_parameters() {
        let g = build_grid(1.0, 20, 1.0, 20).unwrap();
        assert!(HeatSystem::new(g.clone(), -0.01).is_err());
        assert!(HeatSystem::with_theta(g.clone(), 0.01, 0.4).is_err());
        assert!(HeatSystem::with_theta(g, 0.01, 1.0).is_ok());
    }

    #[test]
    fn forward_conserves_mass() {
        let sys = sys_default();
        let n = sys.grid().n_nodes();
        let mut u = DVector::zeros(n);
        u[10] = 1.0;
        u[3] = -0.25;
        let traj = sys.solve_forward(&u, None).unwrap();
        let total0 = u.iter().sum::<f64>();
        for y in &traj {
            assert_relative_eq!(mass_functional(&sys, y), total0, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_with_source_balances_mass() {
        let sys = sys_default();
        let n = sys.grid().n_nodes();
        let tau = sys.grid().tau();
        let u = DVector::from_element(n, 0.1);
        let f: Vec<DVector<f64>> =
            (0..sys.grid().n_steps()).map(|k| DVector::from_element(n, 0.5 + 0.01 * k as f64)).collect();
        let traj = sys.solve_forward(&u, Some(&f)).unwrap();
        let mut expected = mass_functional(&sys, &traj[0]);
        for (k, y) in traj.iter().enumerate().skip(1) {
            expected += tau * mass_functional(&sys, &f[k - 1]);
            assert_relative_eq!(mass_functional(&sys, y), expected, epsilon = 1e-12);
        }
    }

    #[test]
    fn diffusion_smooths_dirac() {
        let sys = sys_default();
        let n = sys.grid().n_nodes();
        let mut u = DVector::zeros(n);
        u[10] = 1.0;
        let y_t = sys.final_state(&u).unwrap();
        // strictly positive, symmetric about x = 0.5, peak at the source
        for i in 0..n {
            assert!(y_t[i] > 0.0);
            assert_relative_eq!(y_t[i], y_t[n - 1 - i], epsilon = 1e-12);
        }
        let peak = y_t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_relative_eq!(peak, y_t[10]);
    }

    #[test]
    fn operator_columns_match_time_stepping() {
        let sys = sys_default();
        let s = sys.final_time_operator();
        let n = sys.grid().n_nodes();
        let mut u = DVector::zeros(n);
        u[4] = 2.0;
        u[17] = -1.0;
        let via_matrix = s * &u;
        let via_stepping = sys.final_state(&u).unwrap();
        for i in 0..n {
            assert_relative_eq!(via_matrix[i], via_stepping[i], epsilon = 1e-13);
        }
    }

    #[test]
    fn adjoint_gradient_is_transpose_of_s() {
        // the recursion M^{-1} then N applications of K1^{-1} K0 equals S^T
        for theta in [1.0, 0.84] {
            let sys =
                HeatSystem::with_theta(build_grid(1.0, 20, 1.0, 20).unwrap(), 0.01, theta).unwrap();
            let n = sys.grid().n_nodes();
            let r = DVector::from_fn(n, |i, _| (0.3 * i as f64).cos());
            let g = sys.adjoint_gradient(&r).unwrap();
            let st_r = sys.final_time_operator().transpose() * &r;
            for i in 0..n {
                assert_relative_eq!(g[i], st_r[i], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn duality_gap_vanishes_on_random_data() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for theta in [1.0, 0.84] {
            let sys =
                HeatSystem::with_theta(build_grid(1.0, 20, 1.0, 20).unwrap(), 0.01, theta).unwrap();
            let n = sys.grid().n_nodes();
            for _ in 0..50 {
                let u = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
                let v = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
                let y_d = DVector::from_fn(n, |_, _| rng.gen_range(-1.0..1.0));
                assert!(sys.duality_gap(&u, &v, &y_d).unwrap() <= 1e-12);
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let sys = sys_default();
        let bad = DVector::zeros(5);
        assert!(matches!(
            sys.solve_forward(&bad, None),
            Err(PdeError::DimensionMismatch { .. })
        ));
    }
}
