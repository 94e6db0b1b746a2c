use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::init::{kaiming_uniform, spectral_normal};
use crate::error::{config_err, shape_err, Result};
use crate::tensor::{Bound, Modes, ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FnoConfig {
    pub width: usize,
    pub modes: usize,
    pub n_layers: usize,
}

impl Default for FnoConfig {
    fn default() -> Self {
        Self {
            width: 20,
            modes: 12,
            n_layers: 4,
        }
    }
}

impl FnoConfig {
    /// Width used without an attention module.
    pub fn vanilla() -> Self {
        Self {
            width: 36,
            ..Self::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub channels: Vec<usize>,
    pub kernel: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            channels: vec![32, 32, 32],
            kernel: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseConfig {
    Fno(FnoConfig),
    Cnn(CnnConfig),
}

impl Default for BaseConfig {
    fn default() -> Self {
        BaseConfig::Fno(FnoConfig::default())
    }
}

#[derive(Debug, Clone)]
struct Pointwise {
    w: ParamId,
    b: ParamId,
}

impl Pointwise {
    fn new(
        params: &mut ParamSet,
        name: &str,
        c_out: usize,
        c_in: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = params.add(
            format!("{name}.w"),
            kaiming_uniform(&[c_out, c_in], c_in, rng),
        );
        let b = params.add(format!("{name}.b"), kaiming_uniform(&[c_out], c_in, rng));
        Self { w, b }
    }

    fn apply(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.conv1x1(x, bound.var(self.w), Some(bound.var(self.b)))
    }
}

#[derive(Debug, Clone)]
struct FnoLayer {
    spectral: ParamId,
    pointwise: Pointwise,
}

/// Lift, `n_layers` blocks of spectral + parallel 1x1 path, projection.
#[derive(Debug, Clone)]
pub struct Fno {
    pub config: FnoConfig,
    modes: Modes,
    lift: Pointwise,
    layers: Vec<FnoLayer>,
    proj: Pointwise,
}

impl Fno {
    pub fn new(
        config: &FnoConfig,
        in_channels: usize,
        out_channels: usize,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.width < out_channels || config.n_layers == 0 || config.modes == 0 {
            return config_err("fno needs width >= channels, n_layers > 0 and modes > 0");
        }
        let w = config.width;
        let lift = Pointwise::new(params, &format!("{prefix}.lift"), w, in_channels, rng);
        let layers = (0..config.n_layers)
            .map(|i| {
                let name = format!("{prefix}.layer{i}");
                let spectral = params.add(
                    format!("{name}.spectral"),
                    spectral_normal(config.modes, w, w, rng),
                );
                let pointwise = Pointwise::new(params, &format!("{name}.pointwise"), w, w, rng);
                FnoLayer {
                    spectral,
                    pointwise,
                }
            })
            .collect();
        let proj = Pointwise::new(params, &format!("{prefix}.proj"), out_channels, w, rng);
        Ok(Self {
            config: config.clone(),
            modes: Modes::one_d(config.modes),
            lift,
            layers,
            proj,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = self.lift.apply(tape, bound, x)?;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let s = tape.spectral(h, bound.var(layer.spectral), self.modes)?;
            let p = layer.pointwise.apply(tape, bound, h)?;
            h = tape.add(s, p)?;
            if i != last {
                h = tape.gelu(h)?;
            }
        }
        self.proj.apply(tape, bound, h)
    }

    pub fn projection(&self) -> (ParamId, ParamId) {
        (self.proj.w, self.proj.b)
    }

    /// Ids of the parallel 1x1 paths inside the Fourier layers.
    pub fn pointwise_paths(&self) -> Vec<(ParamId, ParamId)> {
        self.layers
            .iter()
            .map(|l| (l.pointwise.w, l.pointwise.b))
            .collect()
    }
}

/// Periodic convolutions with GeLU, then a linear output convolution.
#[derive(Debug, Clone)]
pub struct Cnn {
    pub config: CnnConfig,
    layers: Vec<(ParamId, ParamId)>,
}

impl Cnn {
    pub fn new(
        config: &CnnConfig,
        in_channels: usize,
        out_channels: usize,
        params: &mut ParamSet,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        if config.kernel.is_multiple_of(2) {
            return config_err(format!("cnn kernel {} must be odd", config.kernel));
        }
        let k = config.kernel;
        let mut layers = Vec::new();
        let mut c_in = in_channels;
        for (i, &c_out) in config.channels.iter().chain([&out_channels]).enumerate() {
            let fan_in = c_in * k;
            let w = params.add(
                format!("{prefix}.conv{i}.w"),
                kaiming_uniform(&[c_out, c_in, k], fan_in, rng),
            );
            let b = params.add(
                format!("{prefix}.conv{i}.b"),
                kaiming_uniform(&[c_out], fan_in, rng),
            );
            layers.push((w, b));
            c_in = c_out;
        }
        Ok(Self {
            config: config.clone(),
            layers,
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.conv(h, bound.var(w), Some(bound.var(b)))?;
            if i != last {
                h = tape.gelu(h)?;
            }
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
pub enum BaseModel {
    Fno(Fno),
    Cnn(Cnn),
}

impl BaseModel {
    pub fn new(
        config: &BaseConfig,
        in_channels: usize,
        out_channels: usize,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(match config {
            BaseConfig::Fno(c) => {
                BaseModel::Fno(Fno::new(c, in_channels, out_channels, params, "base", rng)?)
            }
            BaseConfig::Cnn(c) => {
                BaseModel::Cnn(Cnn::new(c, in_channels, out_channels, params, "base", rng)?)
            }
        })
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        match self {
            BaseModel::Fno(m) => m.forward(tape, bound, x),
            BaseModel::Cnn(m) => m.forward(tape, bound, x),
        }
    }

    /// Check the spatial size against the model's mode count.
    pub fn check_grid(&self, n_x: usize) -> Result<()> {
        match self {
            BaseModel::Fno(m) if m.config.modes > n_x / 2 + 1 => config_err(format!(
                "fno modes {} exceed n_x/2 + 1 for n_x = {n_x}",
                m.config.modes
            )),
            _ => Ok(()),
        }
    }
}

/// Append a channel holding the raw parameter value at every site.
pub fn make_conditional_input(u: &Tensor, value: f64) -> Result<Tensor> {
    let lam = Tensor::full(&channel_shape(u.shape(), 1), value);
    Tensor::concat_channels(&[u, &lam])
}

/// Channel concatenation `(u^k, u^{k-1})`.
pub fn make_prev2_input(u_k: &Tensor, u_km1: &Tensor) -> Result<Tensor> {
    if u_k.shape() != u_km1.shape() {
        return shape_err(format!(
            "prev2 inputs differ in shape: {:?} vs {:?}",
            u_k.shape(),
            u_km1.shape()
        ));
    }
    Tensor::concat_channels(&[u_k, u_km1])
}

pub(crate) fn channel_shape(shape: &[usize], channels: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s[0] = channels;
    s
}
