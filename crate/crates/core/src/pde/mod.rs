//! Ground-truth trajectory generation for 1-D advection and Burgers.

mod advection;
mod burgers;
mod dataset;
mod ic;
mod io;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

pub use advection::solve_advection;
pub use burgers::{solve_burgers, BurgersSolver, MAX_SUBSTEPS};
pub use dataset::{derive_seed, generate_dataset, group_file_name, DataConfig, GeneratedFile};
pub use ic::{sample_initial_condition, IC_MAX_WAVENUMBER, IC_MODES};
pub use io::{decode_group, encode_group, read_group, write_group, MAGIC, VERSION};

/// Uniform periodic grid with stored time sampling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid1D {
    pub n_x: usize,
    #[serde(default = "default_length")]
    pub length: f64,
    pub n_t: usize,
    pub dt: f64,
}

fn default_length() -> f64 {
    1.0
}

impl Default for Grid1D {
    fn default() -> Self {
        Self {
            n_x: 128,
            length: 1.0,
            n_t: 40,
            dt: 0.05,
        }
    }
}

impl Grid1D {
    pub fn new(n_x: usize, n_t: usize, dt: f64) -> Result<Self> {
        let g = Self {
            n_x,
            length: 1.0,
            n_t,
            dt,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_x < 2 || !self.n_x.is_power_of_two() {
            return config_err(format!("n_x = {} must be a power of two", self.n_x));
        }
        if self.n_t == 0 || !(self.dt > 0.0) || !(self.length > 0.0) {
            return config_err("grid needs n_t > 0, dt > 0, length > 0");
        }
        Ok(())
    }

    pub fn dx(&self) -> f64 {
        self.length / self.n_x as f64
    }

    pub fn final_time(&self) -> f64 {
        self.dt * self.n_t as f64
    }

    /// Sample positions `x_j = j dx`.
    pub fn coords(&self) -> Vec<f64> {
        (0..self.n_x).map(|j| j as f64 * self.dx()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PdeKind {
    Advection,
    Burgers,
}

impl PdeKind {
    pub fn code(self) -> u8 {
        match self {
            PdeKind::Advection => 0,
            PdeKind::Burgers => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PdeKind::Advection),
            1 => Some(PdeKind::Burgers),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PdeKind::Advection => "advection",
            PdeKind::Burgers => "burgers",
        }
    }
}

/// PDE parameter: advection velocity or Burgers diffusion coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdeParams {
    pub kind: PdeKind,
    pub value: f64,
}

impl PdeParams {
    pub fn new(kind: PdeKind, value: f64) -> Result<Self> {
        if !(value > 0.0) || !value.is_finite() {
            return config_err(format!(
                "{} parameter must be > 0, got {value}",
                kind.name()
            ));
        }
        Ok(Self { kind, value })
    }
}

/// One solution sequence `u^0 .. u^{n_t}` with a single field channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub grid: Grid1D,
    pub params: PdeParams,
    /// `[(n_t + 1) * n_x]`, frame-major.
    pub u: Vec<f64>,
}

impl Trajectory {
    pub fn frames(&self) -> usize {
        self.grid.n_t + 1
    }

    pub fn frame(&self, k: usize) -> &[f64] {
        let n = self.grid.n_x;
        &self.u[k * n..(k + 1) * n]
    }

    /// Integral of frame `k` over the domain.
    pub fn mass(&self, k: usize) -> f64 {
        self.frame(k).iter().sum::<f64>() * self.grid.dx()
    }

    pub fn std(&self) -> f64 {
        let n = self.u.len() as f64;
        let mean = self.u.iter().sum::<f64>() / n;
        (self.u.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

/// All trajectories of one `(kind, parameter, split)`; the unit stored in
/// one dataset file.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGroup {
    pub params: PdeParams,
    pub split: Split,
    pub trajectories: Vec<Trajectory>,
    pub metadata: serde_json::Value,
}

impl ParamGroup {
    pub fn grid(&self) -> Option<Grid1D> {
        self.trajectories.first().map(|t| t.grid)
    }
}

/// Trajectory groups of one split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub split: Split,
    pub groups: Vec<ParamGroup>,
}

impl Dataset {
    pub fn trajectory_count(&self) -> usize {
        self.groups.iter().map(|g| g.trajectories.len()).sum()
    }

    pub fn grid(&self) -> Option<Grid1D> {
        self.groups.iter().find_map(ParamGroup::grid)
    }

    pub fn trajectories(&self) -> impl Iterator<Item = &Trajectory> {
        self.groups.iter().flat_map(|g| g.trajectories.iter())
    }
}
