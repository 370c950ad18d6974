//! Measure-space control representations.
//!
//! The variational discretization never discretizes the control directly:
//! a general regular Borel measure `μ` on the closed interval only ever
//! enters the discrete problem through its action on the P1 hat functions.
//! [`upsilon_h`] computes exactly that projection — the coefficient vector
//! `(Υ_h μ)_j = ⟨μ, φ_j⟩` — turning any measure into a combination of nodal
//! Diracs without losing the values of discrete functionals.

use fem_core::Grid1d;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MeasureError {
    #[error("atom at x = {0} lies outside the domain")]
    AtomOutsideDomain(f64),
    #[error("density must have at least two increasing nodes")]
    InvalidDensity,
}

/// Discrete control measure `u = Σ_j u_j δ_{x_j}` identified with its
/// coefficient vector on the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteMeasure {
    pub coefficients: Vec<f64>,
}

impl DiscreteMeasure {
    pub fn new(coefficients: Vec<f64>) -> Self {
        DiscreteMeasure { coefficients }
    }

    pub fn zeros(n: usize) -> Self {
        DiscreteMeasure { coefficients: vec![0.0; n] }
    }

    /// Total variation norm `Σ |u_j|`.
    pub fn total_variation(&self) -> f64 {
        self.coefficients.iter().map(|c| c.abs()).sum()
    }

    /// Total mass `Σ u_j` (signed).
    pub fn total_mass(&self) -> f64 {
        self.coefficients.iter().sum()
    }

    pub fn is_nonnegative(&self, tol: f64) -> bool {
        self.coefficients.iter().all(|&c| c >= -tol)
    }

    /// Jordan decomposition into nonnegative parts with disjoint supports.
    pub fn jordan_split(&self) -> (DiscreteMeasure, DiscreteMeasure) {
        let plus = self.coefficients.iter().map(|&c| c.max(0.0)).collect();
        let minus = self.coefficients.iter().map(|&c| (-c).max(0.0)).collect();
        (DiscreteMeasure::new(plus), DiscreteMeasure::new(minus))
    }

    /// Indices with `|u_j| > eps`.
    pub fn support(&self, eps: f64) -> Vec<usize> {
        self.coefficients
            .iter()
            .enumerate()
            .filter(|(_, &c)| c.abs() > eps)
            .map(|(j, _)| j)
            .collect()
    }

    /// Pairing `⟨u, v_h⟩ = Σ_j u_j v_h(x_j)` with a discrete function given
    /// by its nodal values.
    pub fn pair(&self, nodal_values: &[f64]) -> f64 {
        self.coefficients.iter().zip(nodal_values).map(|(u, v)| u * v).sum()
    }
}

/// Point mass `weight · δ_location`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Atom {
    pub location: f64,
    pub weight: f64,
}

/// Continuous piecewise linear density on its own (sorted) partition,
/// extended by zero outside.
#[derive(Debug, Clone, PartialEq)]
pub struct P1Density {
    pub nodes: Vec<f64>,
    pub values: Vec<f64>,
}

impl P1Density {
    pub fn new(nodes: Vec<f64>, values: Vec<f64>) -> Result<Self, MeasureError> {
        if nodes.len() < 2 || nodes.len() != values.len() {
            return Err(MeasureError::InvalidDensity);
        }
        if nodes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(MeasureError::InvalidDensity);
        }
        Ok(P1Density { nodes, values })
    }

    pub fn eval(&self, x: f64) -> f64 {
        let n = self.nodes.len();
        if x < self.nodes[0] || x > self.nodes[n - 1] {
            return 0.0;
        }
        let k = match self.nodes.binary_search_by(|v| v.partial_cmp(&x).unwrap()) {
            Ok(k) => return self.values[k],
            Err(k) => k - 1,
        };
        let (x0, x1) = (self.nodes[k], self.nodes[k + 1]);
        let t = (x - x0) / (x1 - x0);
        self.values[k] * (1.0 - t) + self.values[k + 1] * t
    }

    /// `∫ |ρ| dx`, exact for the piecewise linear density.
    pub fn l1_norm(&self) -> f64 {
        let mut total = 0.0;
        for k in 0..self.nodes.len() - 1 {
            let len = self.nodes[k + 1] - self.nodes[k];
            let (v0, v1) = (self.values[k], self.values[k + 1]);
            if v0 * v1 >= 0.0 {
                total += 0.5 * (v0 + v1).abs() * len;
            } else {
                let t_root = v0 / (v0 - v1) * len;
                total += 0.5 * (v0.abs() * t_root + v1.abs() * (len - t_root));
            }
        }
        total
    }
}

/// General control measure: finitely many atoms plus an optional P1 density.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GeneralMeasure {
    pub atoms: Vec<Atom>,
    pub density: Option<P1Density>,
}

impl GeneralMeasure {
    pub fn from_atoms(atoms: Vec<Atom>) -> Self {
        GeneralMeasure { atoms, density: None }
    }

    /// Total variation `Σ |w_a| + ∫ |ρ|`.
    pub fn total_variation(&self) -> f64 {
        let atom_part: f64 = self.atoms.iter().map(|a| a.weight.abs()).sum();
        atom_part + self.density.as_ref().map_or(0.0, |d| d.l1_norm())
    }

    /// `∫ v dμ` for a continuous piecewise linear test function with the
    /// given breakpoints (exact; used to verify the pairing property).
    pub fn pair_p1(&self, test: &P1Density) -> f64 {
        let mut s: f64 = self.atoms.iter().map(|a| a.weight * test.eval(a.location)).sum();
        if let Some(rho) = &self.density {
            let lo = rho.nodes[0].max(test.nodes[0]);
            let hi = rho.nodes[rho.nodes.len() - 1].min(test.nodes[test.nodes.len() - 1]);
            s += integrate_product(|x| test.eval(x), rho, lo, hi, &test.nodes);
        }
        s
    }
}

/// Exact integral of `f · ρ` over `[lo, hi]` where `f` is piecewise linear
/// with the given breakpoints and `ρ` is a P1 density: Simpson on each
/// subinterval of the merged partition (exact for quadratics).
fn integrate_product(
    f: impl Fn(f64) -> f64,
    rho: &P1Density,
    lo: f64,
    hi: f64,
    f_breaks: &[f64],
) -> f64 {
    if hi <= lo {
        return 0.0;
    }
    let mut breaks: Vec<f64> = rho
        .nodes
        .iter()
        .chain(f_breaks.iter())
        .cloned()
        .filter(|&x| x > lo && x < hi)
        .collect();
    breaks.push(lo);
    breaks.push(hi);
    breaks.sort_by(|a, b| a.partial_cmp(b).unwrap());
    breaks.dedup();
    let mut total = 0.0;
    for w in breaks.windows(2) {
        let (a, b) = (w[0], w[1]);
        let m = 0.5 * (a + b);
        let g = |x: f64| f(x) * rho.eval(x);
        total += (b - a) / 6.0 * (g(a) + 4.0 * g(m) + g(b));
    }
    total
}

/// Hat function `φ_j` of the grid evaluated at `x`.
pub fn hat(grid: &Grid1d, j: usize, x: f64) -> f64 {
    let h = grid.h();
    let t = 1.0 - (x - grid.node(j)).abs() / h;
    t.max(0.0)
}

/// The variational-discretization projection `Υ_h`: coefficients
/// `(Υ_h μ)_j = ⟨μ, φ_j⟩ = Σ_a w_a φ_j(x_a) + ∫ φ_j ρ dx`.
pub fn upsilon_h(grid: &Grid1d, mu: &GeneralMeasure) -> Result<DiscreteMeasure, MeasureError> {
    let n = grid.n_nodes();
    let mut coeffs = vec![0.0; n];
    for a in &mu.atoms {
        if a.location < -1e-14 || a.location > grid.length() + 1e-14 {
            return Err(MeasureError::AtomOutsideDomain(a.location));
        }
        // at most two hats are nonzero at an atom
        let h = grid.h();
        let k = ((a.location / h).floor() as usize).min(grid.n_elements() - 1);
        for j in [k, k + 1] {
            coeffs[j] += a.weight * hat(grid, j, a.location);
        }
    }
    if let Some(rho) = &mu.density {
        let grid_nodes = grid.nodes();
        for (j, c) in coeffs.iter_mut().enumerate() {
            let lo = (grid.node(j) - grid.h()).max(0.0).max(rho.nodes[0]);
            let hi = (grid.node(j) + grid.h())
                .min(grid.length())
                .min(rho.nodes[rho.nodes.len() - 1]);
            *c += integrate_product(|x| hat(grid, j, x), rho, lo, hi, &grid_nodes);
        }
    }
    Ok(DiscreteMeasure::new(coeffs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use fem_core::build_grid;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn grid20() -> Grid1d {
        build_grid(1.0, 20, 1.0, 20).unwrap()
    }

    #[test]
    fn identity_on_nodal_diracs() {
        let g = grid20();
        let mu = GeneralMeasure::from_atoms(vec![
            Atom { location: 0.5, weight: 2.0 },
            Atom { location: 0.3, weight: -0.5 },
        ]);
        let u = upsilon_h(&g, &mu).unwrap();
        assert_relative_eq!(u.coefficients[10], 2.0);
        assert_relative_eq!(u.coefficients[6], -0.5);
        assert_relative_eq!(u.total_variation(), 2.5);
    }

    #[test]
    fn off_node_atom_splits_between_neighbors() {
        let g = grid20();
        let mu = GeneralMeasure::from_atoms(vec![Atom { location: 0.5125, weight: 1.0 }]);
        let u = upsilon_h(&g, &mu).unwrap();
        // 0.5125 sits a quarter of the way into element [0.5, 0.55]
        assert_relative_eq!(u.coefficients[10], 0.75, epsilon = 1e-12);
        assert_relative_eq!(u.coefficients[11], 0.25, epsilon = 1e-12);
        assert_relative_eq!(u.total_mass(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn atom_outside_domain_is_rejected() {
        let g = grid20();
        let mu = GeneralMeasure::from_atoms(vec![Atom { location: 1.5, weight: 1.0 }]);
        assert!(matches!(upsilon_h(&g, &mu), Err(MeasureError::AtomOutsideDomain(_))));
    }

    #[test]
    fn constant_density_projects_to_mass_weights() {
        let g = grid20();
        let rho = P1Density::new(vec![0.0, 1.0], vec![1.0, 1.0]).unwrap();
        let mu = GeneralMeasure { atoms: vec![], density: Some(rho) };
        let u = upsilon_h(&g, &mu).unwrap();
        let h = g.h();
        // ⟨1, φ_j⟩ = h interior, h/2 at the boundary
        assert_relative_eq!(u.coefficients[0], h / 2.0, epsilon = 1e-14);
        assert_relative_eq!(u.coefficients[7], h, epsilon = 1e-14);
        assert_relative_eq!(u.total_mass(), 1.0, epsilon = 1e-13);
    }

    #[test]
    fn jordan_split_disjoint_and_nonnegative() {
        let u = DiscreteMeasure::new(vec![1.0, -2.0, 0.0, 3.0]);
        let (p, m) = u.jordan_split();
        assert!(p.is_nonnegative(0.0) && m.is_nonnegative(0.0));
        for i in 0..4 {
            assert_relative_eq!(p.coefficients[i] - m.coefficients[i], u.coefficients[i]);
            assert!(p.coefficients[i] * m.coefficients[i] == 0.0);
        }
        assert_relative_eq!(p.total_variation() + m.total_variation(), u.total_variation());
    }

    #[test]
    fn density_l1_handles_sign_change() {
        let rho = P1Density::new(vec![0.0, 1.0], vec![-1.0, 1.0]).unwrap();
        assert_relative_eq!(rho.l1_norm(), 0.5, epsilon = 1e-14);
    }

    #[test]
    fn random_atom_sets_satisfy_pairing_linearity_contraction() {
        let g = grid20();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n_atoms = rng.gen_range(1..6);
            let atoms: Vec<Atom> = (0..n_atoms)
                .map(|_| Atom {
                    location: rng.gen_range(0.0..1.0),
                    weight: rng.gen_range(-2.0..2.0),
                })
                .collect();
            let mu = GeneralMeasure::from_atoms(atoms.clone());
            let u = upsilon_h(&g, &mu).unwrap();

            // TV contraction
            assert!(u.total_variation() <= mu.total_variation() + 1e-12);
            // mass preservation (hats form a partition of unity)
            let mass: f64 = atoms.iter().map(|a| a.weight).sum();
            assert_relative_eq!(u.total_mass(), mass, epsilon = 1e-12);

            // pairing preservation against a random P1 test function
            let vals: Vec<f64> = (0..g.n_nodes()).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let test = P1Density::new(g.nodes(), vals.clone()).unwrap();
            let lhs = u.pair(&vals);
            let rhs = mu.pair_p1(&test);
            assert_relative_eq!(lhs, rhs, epsilon = 1e-10);

            // positivity preservation
            let mu_pos = GeneralMeasure::from_atoms(
                atoms.iter().map(|a| Atom { location: a.location, weight: a.weight.abs() }).collect(),
            );
            assert!(upsilon_h(&g, &mu_pos).unwrap().is_nonnegative(0.0));

            // linearity: Υ(μ + 2ν) = Υμ + 2Υν with ν a shifted copy
            let nu = GeneralMeasure::from_atoms(
                atoms.iter().map(|a| Atom { location: 1.0 - a.location, weight: a.weight }).collect(),
            );
            let mut combined = mu.clone();
            combined
                .atoms
                .extend(nu.atoms.iter().map(|a| Atom { location: a.location, weight: 2.0 * a.weight }));
            let u_nu = upsilon_h(&g, &nu).unwrap();
            let u_comb = upsilon_h(&g, &combined).unwrap();
            for j in 0..g.n_nodes() {
                assert_relative_eq!(
                    u_comb.coefficients[j],
                    u.coefficients[j] + 2.0 * u_nu.coefficients[j],
                    epsilon = 1e-12
                );
            }
        }
    }

    #[test]
    fn pairing_with_density_part() {
        let g = grid20();
        let rho = P1Density::new(vec![0.2, 0.6, 0.9], vec![1.0, -1.0, 0.5]).unwrap();
        let mu = GeneralMeasure {
            atoms: vec![Atom { location: 0.35, weight: 1.5 }],
            density: Some(rho),
        };
        let u = upsilon_h(&g, &mu).unwrap();
        assert!(u.total_variation() <= mu.total_variation() + 1e-12);
        let vals: Vec<f64> = (0..g.n_nodes()).map(|j| (j as f64 * 0.37).sin()).collect();
        let test = P1Density::new(g.nodes(), vals.clone()).unwrap();
        assert_relative_eq!(u.pair(&vals), mu.pair_p1(&test), epsilon = 1e-12);
    }
}
