//! Machine-readable solve reports: everything quoted in the paper's §4
//! figures and text, plus solver diagnostics.

use crate::config::ExperimentConfig;
use kkt_general::HomotopyStage;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolveReport {
    pub name: String,
    /// The full configuration with defaults filled in (self-describing run).
    pub config: ExperimentConfig,
    pub tv_plus: f64,
    pub tv_minus: f64,
    /// Node coordinates carrying positive / negative mass.
    pub support_plus: Vec<f64>,
    pub support_minus: Vec<f64>,
    /// Positive solver: `min φ(0)`; general solver: the (signed) budget
    /// multiplier `-λ` (so the sign convention matches the positive case).
    pub lambda_bar: f64,
    /// `∫ φ(0) dū`.
    pub duality_value: f64,
    /// `|y(T) - y_d|` in the `M_h` norm.
    pub final_misfit: f64,
    /// Same residual in the Euclidean coefficient norm.
    pub final_misfit_euclid: f64,
    /// `max |φ(0)|` over the nodes.
    pub adjoint_max: f64,
    pub newton_steps: usize,
    pub terminal_gamma: Option<f64>,
    pub homotopy_stages: Option<Vec<HomotopyStage>>,
    pub residual_history: Vec<f64>,
    /// `"ssn"` or `"refined"`.
    pub method: String,
    pub converged: bool,
    pub optimality_ok: bool,
    pub wall_time_seconds: f64,
}

impl SolveReport {
    /// All reported numbers must be finite for the report to be usable.
    pub fn is_finite(&self) -> bool {
        let scalars = [
            self.tv_plus,
            self.tv_minus,
            self.lambda_bar,
            self.duality_value,
            self.final_misfit,
            self.final_misfit_euclid,
            self.adjoint_max,
            self.wall_time_seconds,
        ];
        scalars.iter().all(|x| x.is_finite())
            && self.support_plus.iter().all(|x| x.is_finite())
            && self.support_minus.iter().all(|x| x.is_finite())
    }
}
