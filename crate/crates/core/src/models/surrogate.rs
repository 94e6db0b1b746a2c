use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::base::{channel_shape, BaseConfig, BaseModel, CnnConfig, FnoConfig};
use crate::cape::{assemble_base_input, Cape, CapeConfig};
use crate::error::{config_err, Result};
use crate::pde::derive_seed;
use crate::tensor::{Bound, ParamId, ParamSet, Tape, Tensor, Var};

/// How the base model sees the PDE parameter and history.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// `u^k` only.
    Vanilla,
    /// `u^k` plus a constant channel holding the raw parameter.
    Conditional,
    /// `(u^k, u^{k-1})`.
    Prev2,
    /// `u^k` plus the attention module's estimated future states.
    Cape,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    Fno,
    Cnn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_kind")]
    pub kind: BaseKind,
    pub conditioning: Conditioning,
    /// Width defaults to 20 with the attention module and 36 without.
    #[serde(default)]
    pub fno: Option<FnoConfig>,
    #[serde(default)]
    pub cnn: CnnConfig,
    #[serde(default = "default_channels")]
    pub channels: usize,
}

fn default_kind() -> BaseKind {
    BaseKind::Fno
}

fn default_channels() -> usize {
    1
}

impl ModelConfig {
    pub fn new(kind: BaseKind, conditioning: Conditioning) -> Self {
        Self {
            kind,
            conditioning,
            fno: None,
            cnn: CnnConfig::default(),
            channels: 1,
        }
    }

    pub fn base_config(&self) -> BaseConfig {
        match self.kind {
            BaseKind::Fno => BaseConfig::Fno(self.fno.clone().unwrap_or_else(|| {
                if self.conditioning == Conditioning::Cape {
                    FnoConfig::default()
                } else {
                    FnoConfig::vanilla()
                }
            })),
            BaseKind::Cnn => BaseConfig::Cnn(self.cnn.clone()),
        }
    }

    /// Base-model input channels for `ell` intermediate states.
    pub fn in_channels(&self, ell: usize) -> usize {
        let c = self.channels;
        match self.conditioning {
            Conditioning::Vanilla => c,
            Conditioning::Conditional => c + 1,
            Conditioning::Prev2 => 2 * c,
            Conditioning::Cape => c * (1 + ell),
        }
    }
}

/// One step of the surrogate on a tape.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub next: Var,
    /// Attention-module estimates of `u^{k+1..k+ell}` (empty otherwise).
    pub intermediates: Vec<Var>,
}

/// Base model plus its conditioning, with all weights in one [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Surrogate {
    pub model: ModelConfig,
    pub cape_config: Option<CapeConfig>,
    pub params: ParamSet,
    base: BaseModel,
    cape: Option<Cape>,
}

impl Surrogate {
    pub fn new(model: &ModelConfig, cape: Option<&CapeConfig>, seed: u64) -> Result<Self> {
        if model.channels == 0 {
            return config_err("model.channels must be positive");
        }
        let wants_cape = model.conditioning == Conditioning::Cape;
        if wants_cape != cape.is_some() {
            return config_err("the attention module is used exactly when conditioning = cape");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 0x1417]));
        let mut params = ParamSet::new();
        let fno_base = model.kind == BaseKind::Fno;
        let cape = cape
            .map(|c| Cape::new(c, model.channels, fno_base, &mut params, &mut rng))
            .transpose()?;
        let ell = cape.as_ref().map_or(0, |c| c.config.ell);
        let base = BaseModel::new(
            &model.base_config(),
            model.in_channels(ell),
            model.channels,
            &mut params,
            &mut rng,
        )?;
        Ok(Self {
            model: model.clone(),
            cape_config: cape.as_ref().map(|c| c.config.clone()),
            params,
            base,
            cape,
        })
    }

    pub fn base(&self) -> &BaseModel {
        &self.base
    }

    pub fn cape(&self) -> Option<&Cape> {
        self.cape.as_ref()
    }

    pub fn needs_prev(&self) -> bool {
        self.model.conditioning == Conditioning::Prev2
    }

    pub fn is_cape_param(&self, id: ParamId) -> bool {
        self.params.name(id).starts_with("cape.")
    }

    pub fn check_grid(&self, n_x: usize) -> Result<()> {
        self.base.check_grid(n_x)?;
        if let Some(c) = &self.cape {
            if c.config.modes > n_x / 2 + 1 {
                return config_err(format!(
                    "cape.modes {} exceed n_x/2 + 1 for n_x = {n_x}",
                    c.config.modes
                ));
            }
        }
        Ok(())
    }

    /// Predict `u^{k+1}` from `u` (and `prev = u^{k-1}` in prev2 mode).
    pub fn step(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        u: Var,
        prev: Option<Var>,
        value: f64,
    ) -> Result<StepOutput> {
        let mut intermediates = Vec::new();
        let input = match self.model.conditioning {
            Conditioning::Vanilla => u,
            Conditioning::Conditional => {
                let lam = tape.constant(Tensor::full(&channel_shape(tape.shape(u), 1), value));
                tape.concat(&[u, lam])?
            }
            Conditioning::Prev2 => {
                let p = prev.unwrap_or(u);
                tape.concat(&[u, p])?
            }
            Conditioning::Cape => {
                let cape = self
                    .cape
                    .as_ref()
                    .expect("cape conditioning without module");
                let out = cape.forward(tape, bound, u, value)?;
                let x = assemble_base_input(tape, u, &out)?;
                intermediates = out.intermediates;
                x
            }
        };
        let next = self.base.forward(tape, bound, input)?;
        Ok(StepOutput {
            next,
            intermediates,
        })
    }

    /// Parameter totals as (base, attention module).
    pub fn param_counts(&self) -> (usize, usize) {
        let mut base = 0;
        let mut cape = 0;
        for (id, _, t) in self.params.iter() {
            if self.is_cape_param(id) {
                cape += t.numel();
            } else {
                base += t.numel();
            }
        }
        (base, cape)
    }
}
