//! P1 finite element core for the 1D heat equation on a uniform grid.
//!
//! Provides the space-time grid description, assembly of the consistent mass
//! matrix `M` and stiffness matrix `A` with natural (Neumann) boundary
//! conditions, and a symmetric tridiagonal storage type with a direct
//! (Thomas) factorization. Everything downstream — forward/adjoint heat
//! solves, the solution operator, the KKT solvers — is built on these pieces.

use nalgebra::DMatrix;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FemError {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("tridiagonal factorization failed at row {row} (pivot {pivot:.3e})")]
    SingularPivot { row: usize, pivot: f64 },
}

/// Uniform space-time grid: `n_elements` P1 elements on `[0, length]` and
/// `n_steps` uniform time steps on `[0, t_final]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid1d {
    length: f64,
    n_elements: usize,
    t_final: f64,
    n_steps: usize,
}

/// Build a grid, validating positivity of all extents.
pub fn build_grid(
    length: f64,
    n_elements: usize,
    t_final: f64,
    n_steps: usize,
) -> Result<Grid1d, FemError> {
    if !(length > 0.0) || !length.is_finite() {
        return Err(FemError::InvalidGrid(format!("length must be positive, got {length}")));
    }
    if !(t_final > 0.0) || !t_final.is_finite() {
        return Err(FemError::InvalidGrid(format!("t_final must be positive, got {t_final}")));
    }
    if n_elements == 0 || n_steps == 0 {
        return Err(FemError::InvalidGrid(
            "n_elements and n_steps must be at least 1".into(),
        ));
    }
    Ok(Grid1d { length, n_elements, t_final, n_steps })
}

impl Grid1d {
    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn n_elements(&self) -> usize {
        self.n_elements
    }

    /// Number of nodes, `n_elements + 1`.
    pub fn n_nodes(&self) -> usize {
        self.n_elements + 1
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    /// Mesh width.
    pub fn h(&self) -> f64 {
        self.length / self.n_elements as f64
    }

    /// Time step size.
    pub fn tau(&self) -> f64 {
        self.t_final / self.n_steps as f64
    }

    /// Coordinate of node `j`.
    pub fn node(&self, j: usize) -> f64 {
        self.length * j as f64 / self.n_elements as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|j| self.node(j)).collect()
    }

    /// Index of the node at coordinate `x`, if `x` is a node (up to `tol`).
    pub fn node_index(&self, x: f64, tol: f64) -> Option<usize> {
        let t = x / self.h();
        let j = t.round() as i64;
        if j < 0 || j as usize >= self.n_nodes() {
            return None;
        }
        if (x - self.node(j as usize)).abs() <= tol {
            Some(j as usize)
        } else {
            None
        }
    }
}

/// Symmetric tridiagonal matrix: `diag[i] = T_{i,i}`, `off[i] = T_{i,i+1} = T_{i+1,i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SymTridiag {
    pub diag: Vec<f64>,
    pub off: Vec<f64>,
}

impl SymTridiag {
    pub fn zeros(n: usize) -> Self {
        SymTridiag { diag: vec![0.0; n], off: vec![0.0; n.saturating_sub(1)] }
    }

    pub fn n(&self) -> usize {
        self.diag.len()
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.n();
        assert_eq!(x.len(), n, "matvec dimension mismatch");
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut s = self.diag[i] * x[i];
            if i > 0 {
                s += self.off[i - 1] * x[i - 1];
            }
            if i + 1 < n {
                s += self.off[i] * x[i + 1];
            }
            y[i] = s;
        }
        y
    }

    /// Linear combination `ca * a + cb * b` of two matrices of equal size.
    pub fn lin_comb(ca: f64, a: &SymTridiag, cb: f64, b: &SymTridiag) -> SymTridiag {
        assert_eq!(a.n(), b.n(), "lin_comb dimension mismatch");
        SymTridiag {
            diag: a.diag.iter().zip(&b.diag).map(|(x, y)| ca * x + cb * y).collect(),
            off: a.off.iter().zip(&b.off).map(|(x, y)| ca * x + cb * y).collect(),
        }
    }

    /// Dense copy (for the small condensed Newton systems and tests).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n();
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = self.diag[i];
            if i + 1 < n {
                m[(i, i + 1)] = self.off[i];
                m[(i + 1, i)] = self.off[i];
            }
        }
        m
    }

    /// Thomas (LU without pivoting) factorization. Valid for the diagonally
    /// dominant SPD matrices that arise here (`M`, `M + c A` with `c >= 0`).
    pub fn factorize(&self) -> Result<TriFactor, FemError> {
        let n = self.n();
        let mut d = vec![0.0; n];
        let mut l = vec![0.0; n.saturating_sub(1)];
        d[0] = self.diag[0];
        if d[0] == 0.0 || !d[0].is_finite() {
            return Err(FemError::SingularPivot { row: 0, pivot: d[0] });
        }
        for i in 1..n {
            l[i - 1] = self.off[i - 1] / d[i - 1];
            d[i] = self.diag[i] - l[i - 1] * self.off[i - 1];
            if d[i] == 0.0 || !d[i].is_finite() {
                return Err(FemError::SingularPivot { row: i, pivot: d[i] });
            }
        }
        Ok(TriFactor { lower: l, pivot: d, off: self.off.clone() })
    }
}

/// Thomas factorization of a symmetric tridiagonal matrix: `T = L D L^T`
/// stored as the unit-lower multipliers, pivots, and the original
/// off-diagonal (used in the back substitution).
#[derive(Debug, Clone)]
pub struct TriFactor {
    lower: Vec<f64>,
    pivot: Vec<f64>,
    off: Vec<f64>,
}

impl TriFactor {
    pub fn n(&self) -> usize {
        self.pivot.len()
    }

    /// Solve `T x = rhs`.
    pub fn solve(&self, rhs: &[f64]) -> Vec<f64> {
        let n = self.n();
        assert_eq!(rhs.len(), n, "solve dimension mismatch");
        let mut x = rhs.to_vec();
        for i in 1..n {
            x[i] -= self.lower[i - 1] * x[i - 1];
        }
        x[n - 1] /= self.pivot[n - 1];
        for i in (0..n - 1).rev() {
            x[i] = (x[i] - self.off[i] * x[i + 1]) / self.pivot[i];
        }
        x
    }
}

/// Assemble the P1 mass matrix `M` and stiffness matrix `A` (natural
/// boundary conditions, no diffusion coefficient folded in), so callers can
/// form `M + c A` for any time-stepping scheme.
///
/// Element contributions on an element of width `h`:
/// mass `h/6 * [[2, 1], [1, 2]]`, stiffness `1/h * [[1, -1], [-1, 1]]`.
pub fn assemble(grid: &Grid1d) -> (SymTridiag, SymTridiag) {
    let n = grid.n_nodes();
    let h = grid.h();
    let mut mass = SymTridiag::zeros(n);
    let mut stiff = SymTridiag::zeros(n);
    for e in 0..grid.n_elements() {
        mass.diag[e] += h / 3.0;
        mass.diag[e + 1] += h / 3.0;
        mass.off[e] += h / 6.0;
        stiff.diag[e] += 1.0 / h;
        stiff.diag[e + 1] += 1.0 / h;
        stiff.off[e] -= 1.0 / h;
    }
    (mass, stiff)
}
