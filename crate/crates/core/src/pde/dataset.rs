use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::burgers::BurgersSolver;
use super::io::{read_group, write_group};
use super::{
    sample_initial_condition, solve_advection, Dataset, Grid1D, ParamGroup, PdeKind, PdeParams,
    Split, Trajectory, IC_MAX_WAVENUMBER, IC_MODES,
};
use crate::error::{config_err, Error, Result};

/// What to generate: one PDE, train/test parameter lists, counts, grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub kind: PdeKind,
    pub train_params: Vec<f64>,
    pub test_params: Vec<f64>,
    #[serde(default = "default_n_train")]
    pub n_train: usize,
    #[serde(default = "default_n_test")]
    pub n_test: usize,
    #[serde(default)]
    pub grid: Grid1D,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub burgers: BurgersSolver,
}

fn default_n_train() -> usize {
    200
}

fn default_n_test() -> usize {
    50
}

impl DataConfig {
    pub fn advection_default() -> Self {
        Self {
            kind: PdeKind::Advection,
            train_params: vec![0.2, 0.4, 0.7, 2.0, 4.0],
            test_params: vec![0.1, 1.0, 7.0],
            n_train: default_n_train(),
            n_test: default_n_test(),
            grid: Grid1D::default(),
            seed: 0,
            burgers: BurgersSolver::default(),
        }
    }

    pub fn burgers_default() -> Self {
        Self {
            kind: PdeKind::Burgers,
            train_params: vec![0.002, 0.007, 0.02, 0.04, 0.2, 0.4, 2.0],
            test_params: vec![0.001, 0.01, 0.1, 1.0],
            ..Self::advection_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.train_params.is_empty() {
            return config_err("data.train_params is empty");
        }
        for &p in self.train_params.iter().chain(&self.test_params) {
            PdeParams::new(self.kind, p)?;
        }
        if self.n_train == 0 {
            return config_err("data.n_train must be positive");
        }
        Ok(())
    }

    pub fn is_seen(&self, value: f64) -> bool {
        self.train_params.contains(&value)
    }

    /// Parameters stored for `split`: the test split holds held-out
    /// trajectories for the training parameters followed by the unseen ones.
    pub fn params_for(&self, split: Split) -> Vec<f64> {
        match split {
            Split::Train => self.train_params.clone(),
            Split::Test => {
                let mut all = self.train_params.clone();
                all.extend(self.test_params.iter().filter(|p| !self.is_seen(**p)));
                all
            }
        }
    }

    pub fn count_for(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Test => self.n_test,
        }
    }

    /// Solve one trajectory from a seeded initial condition.
    pub fn solve(&self, value: f64, seed: u64) -> Result<Trajectory> {
        let u0 = sample_initial_condition(seed, &self.grid);
        match self.kind {
            PdeKind::Advection => solve_advection(&u0, value, &self.grid),
            PdeKind::Burgers => self.burgers.solve(&u0, value, &self.grid),
        }
    }

    /// Build the group for one parameter of one split.
    pub fn build_group(&self, split: Split, value: f64) -> Result<ParamGroup> {
        let params = PdeParams::new(self.kind, value)?;
        let count = self.count_for(split);
        let seeds: Vec<u64> = (0..count)
            .map(|i| trajectory_seed(self.seed, self.kind, split, value, i))
            .collect();
        let trajectories = seeds
            .iter()
            .map(|&s| self.solve(value, s))
            .collect::<Result<Vec<_>>>()?;
        let metadata = serde_json::json!({
            "seed": self.seed,
            "trajectory_seeds": seeds,
            "generator": {
                "initial_condition": {"modes": IC_MODES, "max_wavenumber": IC_MAX_WAVENUMBER},
                "burgers": self.burgers,
            },
        });
        Ok(ParamGroup {
            params,
            split,
            trajectories,
            metadata,
        })
    }

    /// Every group of `split`, generated in memory.
    pub fn build_split(&self, split: Split) -> Result<Dataset> {
        self.validate()?;
        let groups = self
            .params_for(split)
            .into_iter()
            .map(|v| self.build_group(split, v))
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { split, groups })
    }

    /// Read the files [`generate_dataset`] wrote for `split`.
    pub fn load_split(&self, dir: &Path, split: Split) -> Result<Dataset> {
        let mut groups = Vec::new();
        for value in self.params_for(split) {
            let path = dir.join(group_file_name(self.kind, split, value));
            if !path.exists() {
                return Err(Error::Data(format!(
                    "missing dataset file {}",
                    path.display()
                )));
            }
            let g = read_group(&path)?;
            if g.params.kind != self.kind || g.params.value != value {
                return Err(Error::Data(format!(
                    "{} holds {:?} = {}, expected {value}",
                    path.display(),
                    g.params.kind,
                    g.params.value
                )));
            }
            if g.trajectories.len() != self.count_for(split) {
                return Err(Error::Data(format!(
                    "{} holds {} trajectories, config asks for {}",
                    path.display(),
                    g.trajectories.len(),
                    self.count_for(split)
                )));
            }
            if g.grid() != Some(self.grid) {
                return Err(Error::Data(format!(
                    "{} was generated on a different grid",
                    path.display()
                )));
            }
            groups.push(g);
        }
        Ok(Dataset { split, groups })
    }
}

/// Mix integers into one 64-bit seed (splitmix64 finalizer chain).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        state ^= p;
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    state
}

fn trajectory_seed(master: u64, kind: PdeKind, split: Split, value: f64, index: usize) -> u64 {
    let split_code = match split {
        Split::Train => 0,
        Split::Test => 1,
    };
    derive_seed(&[
        master,
        kind.code() as u64,
        split_code,
        value.to_bits(),
        index as u64,
    ])
}

pub fn group_file_name(kind: PdeKind, split: Split, value: f64) -> String {
    format!("{}_{}_{}.pdeb", kind.name(), split.name(), value)
}

#[derive(Debug, Clone)]
pub struct GeneratedFile {
    pub path: PathBuf,
    pub split: Split,
    pub param: f64,
    pub n_traj: usize,
}

/// Write one `PDEB1` file per `(parameter, split)` into `dir`.
pub fn generate_dataset(config: &DataConfig, dir: &Path) -> Result<Vec<GeneratedFile>> {
    config.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    for split in [Split::Train, Split::Test] {
        if config.count_for(split) == 0 {
            continue;
        }
        for value in config.params_for(split) {
            let group = config.build_group(split, value)?;
            let path = dir.join(group_file_name(config.kind, split, value));
            write_group(&path, &group)?;
            log::info!(
                "wrote {} ({} trajectories)",
                path.display(),
                group.trajectories.len()
            );
            files.push(GeneratedFile {
                path,
                split,
                param: value,
                n_traj: group.trajectories.len(),
            });
        }
    }
    Ok(files)
}
