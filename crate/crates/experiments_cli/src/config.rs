//! Experiment configuration: JSON in, defaults echoed back out so every run
//! is self-describing.

use serde::{Deserialize, Serialize};
use std::path::PathBuf;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_elements: usize,
    pub n_steps: usize,
}

/// A point mass of the true control, placed on a fine-grid node.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtomSpec {
    pub x: f64,
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Positive,
    General,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub domain_length: f64,
    pub t_final: f64,
    pub diffusion_a: f64,
    pub coarse: GridSpec,
    pub fine: GridSpec,
    /// θ of the coarse one-step scheme (1 = implicit Euler).
    pub coarse_theta: f64,
    /// Multiplier on the diffusion coefficient of the coarse propagator
    /// (calibration of the effective damping; the fine generator always
    /// uses `diffusion_a` exactly).
    pub coarse_diffusion_scale: f64,
    pub true_control: Vec<AtomSpec>,
    pub alpha: f64,
    pub solver: SolverKind,
    /// NCP scaling; defaults to 1 (positive) / 2 (general) when absent.
    pub kappa: Option<f64>,
    /// Fixed penalty parameter of the general solver (ignored with
    /// `homotopy = true`).
    pub gamma: f64,
    pub homotopy: bool,
    pub tol: f64,
    pub max_iter: usize,
    /// Project the target onto the coarse range (Lemma 2.7 construction).
    pub reachable_target: bool,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            domain_length: 1.0,
            t_final: 1.0,
            diffusion_a: 0.01,
            coarse: GridSpec { n_elements: 20, n_steps: 20 },
            fine: GridSpec { n_elements: 1000, n_steps: 1000 },
            coarse_theta: 1.0,
            coarse_diffusion_scale: 1.0,
            true_control: vec![AtomSpec { x: 0.5, weight: 1.0 }],
            alpha: 1.0,
            solver: SolverKind::Positive,
            kappa: None,
            gamma: 70.0,
            homotopy: false,
            tol: 1e-12,
            max_iter: 200,
            reachable_target: false,
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn effective_kappa(&self) -> f64 {
        self.kappa.unwrap_or(match self.solver {
            SolverKind::Positive => 1.0,
            SolverKind::General => 2.0,
        })
    }

    /// Grid nesting and placement invariants.
    pub fn validate(&self) -> Result<(), String> {
        if !(self.domain_length > 0.0 && self.t_final > 0.0 && self.diffusion_a > 0.0) {
            return Err("domain_length, t_final and diffusion_a must be positive".into());
        }
        if self.coarse.n_elements == 0
            || self.coarse.n_steps == 0
            || self.fine.n_elements == 0
            || self.fine.n_steps == 0
        {
            return Err("grid sizes must be positive".into());
        }
        if self.fine.n_elements % self.coarse.n_elements != 0 {
            return Err(format!(
                "coarse grid ({} elements) is not nested in the fine grid ({} elements); \
                 fine-to-coarse evaluation is exact only for nested grids",
                self.coarse.n_elements, self.fine.n_elements
            ));
        }
        let fine_h = self.domain_length / self.fine.n_elements as f64;
        for atom in &self.true_control {
            if atom.x < 0.0 || atom.x > self.domain_length {
                return Err(format!("atom at x = {} lies outside the domain", atom.x));
            }
            let steps = atom.x / fine_h;
            if (steps - steps.round()).abs() > 1e-9 {
                return Err(format!("atom at x = {} is not a fine-grid node", atom.x));
            }
        }
        if !(self.alpha >= 0.0) {
            return Err(format!("alpha must be nonnegative, got {}", self.alpha));
        }
        if !(self.tol > 0.0) || self.max_iter == 0 {
            return Err("tol must be positive and max_iter at least 1".into());
        }
        if !(self.gamma > 0.0) {
            return Err(format!("gamma must be positive, got {}", self.gamma));
        }
        if let Some(k) = self.kappa {
            if !(k > 0.0) {
                return Err(format!("kappa must be positive, got {k}"));
            }
        }
        Ok(())
    }
}
