//! Serializable description of a manufactured test problem.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::GridSpec;
use crate::mfg_system::{
    manufactured_problem, Bounds, ClosedForm, Coupling, Elasticity, InteractionSpec, Kernel, ManufacturedProblem,
    TimeProfile,
};

/// Coefficients and closed-form solution of a manufactured problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProblemSpec {
    pub beta: f64,
    pub elasticity: Elasticity,
    pub interaction: InteractionSpec,
    pub bounds: Bounds,
    pub u_star: ClosedForm,
    pub m_star: ClosedForm,
}

/// The nonlinear reference case: `u* = e^{−t} cos πx`, `m* = 1 + ½ e^{−t} cos πx`,
/// Gaussian kernel and tanh coupling.
impl Default for ProblemSpec {
    fn default() -> Self {
        Self {
            beta: 0.1,
            elasticity: Elasticity::Constant { value: 1.0 },
            interaction: InteractionSpec {
                kernel: Kernel::Gaussian { sigma: 0.3, amplitude: 1.0 },
                coupling: Coupling::Tanh { gamma_y: 0.5, gamma_z: 0.5 },
            },
            bounds: Bounds::default(),
            u_star: ClosedForm::single(0.0, 1.0, 1.0, false, TimeProfile::Exp { rate: -1.0 }),
            m_star: ClosedForm::single(1.0, 0.5, 1.0, false, TimeProfile::Exp { rate: -1.0 }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub grid: GridSpec,
    #[serde(default)]
    pub problem: ProblemSpec,
}

impl ScenarioSpec {
    pub fn reference(grid: GridSpec) -> Self {
        Self { grid, problem: ProblemSpec::default() }
    }

    pub fn build(&self) -> Result<ManufacturedProblem> {
        let p = &self.problem;
        manufactured_problem(
            self.grid.build()?,
            &p.u_star,
            &p.m_star,
            p.beta,
            p.elasticity.clone(),
            p.interaction.clone(),
            p.bounds,
        )
    }
}
