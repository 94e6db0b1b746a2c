//! Channel attention guided by PDE parameter embeddings.
//!
//! Three branches act on the current field `u` (1x1 conv, depthwise conv,
//! spectral conv). Each branch output is gated channel-wise by a mask
//! produced from the encoded PDE parameter by a two-layer MLP. The gated
//! sum joins a lifted copy of `u` and a head emits `ell` estimated future
//! states.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::metrics::nrmse_var;
use crate::models::init::{kaiming_uniform, spectral_normal};
use crate::tensor::{Bound, Modes, ParamId, ParamSet, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadVariant {
    /// `u + LN(y_i)`
    Layernorm,
    /// `u + y_i`
    NoLayernorm,
    /// `u (1 + LN(y_i))`
    Multiplicative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Spectral,
    Conv1x1,
    Depthwise,
    Layernorm,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spectral" => Ok(Ablation::Spectral),
            "conv1x1" | "1x1" => Ok(Ablation::Conv1x1),
            "depthwise" => Ok(Ablation::Depthwise),
            "layernorm" | "ln" => Ok(Ablation::Layernorm),
            other => config_err(format!("unknown ablation flag {other:?}")),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::Spectral => "spectral",
            Ablation::Conv1x1 => "conv1x1",
            Ablation::Depthwise => "depthwise",
            Ablation::Layernorm => "layernorm",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapeConfig {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_ell")]
    pub ell: usize,
    #[serde(default = "default_kernel")]
    pub kernel: usize,
    #[serde(default = "default_modes")]
    pub modes: usize,
    /// `None` picks `no_layernorm` for an FNO base and `layernorm` otherwise.
    #[serde(default)]
    pub variant: Option<HeadVariant>,
    /// MLP hidden width, `d` when absent.
    #[serde(default)]
    pub hidden: Option<usize>,
    #[serde(default)]
    pub dropped: Vec<Ablation>,
}

fn default_d() -> usize {
    64
}
fn default_ell() -> usize {
    1
}
fn default_kernel() -> usize {
    5
}
fn default_modes() -> usize {
    12
}

impl Default for CapeConfig {
    fn default() -> Self {
        Self {
            d: default_d(),
            ell: default_ell(),
            kernel: default_kernel(),
            modes: default_modes(),
            variant: None,
            hidden: None,
            dropped: Vec::new(),
        }
    }
}

impl CapeConfig {
    pub fn variant_for(&self, fno_base: bool) -> HeadVariant {
        let v = self.variant.unwrap_or(if fno_base {
            HeadVariant::NoLayernorm
        } else {
            HeadVariant::Layernorm
        });
        if self.is_dropped(Ablation::Layernorm) && v == HeadVariant::Layernorm {
            HeadVariant::NoLayernorm
        } else {
            v
        }
    }

    pub fn is_dropped(&self, a: Ablation) -> bool {
        self.dropped.contains(&a)
    }

    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.d < channels || !self.d.is_multiple_of(channels) {
            return config_err(format!(
                "cape.d = {} must be a multiple of the field channels {channels}",
                self.d
            ));
        }
        if self.ell == 0 {
            return config_err("cape.ell must be at least 1");
        }
        if self.kernel.is_multiple_of(2) {
            return config_err("cape.kernel must be odd");
        }
        if self.modes == 0 {
            return config_err("cape.modes must be positive");
        }
        Ok(())
    }
}

/// Copy of `config` with the named branch removed.
pub fn ablate(config: &CapeConfig, drop: &str) -> Result<CapeConfig> {
    let a: Ablation = drop.parse()?;
    let mut out = config.clone();
    if !out.dropped.contains(&a) {
        out.dropped.push(a);
    }
    Ok(out)
}

/// Parameter encoding fed to the mask MLPs: `[log10 lambda]`.
pub fn encode_param(value: f64) -> Result<Tensor> {
    if !(value > 0.0) {
        return config_err(format!(
            "parameter {value} must be positive for log encoding"
        ));
    }
    Tensor::new(&[1, 1], vec![value.log10()])
}

#[derive(Debug, Clone)]
struct MaskMlp {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
pub struct CapeOutput {
    /// `ell` tensors shaped like `u`.
    pub intermediates: Vec<Var>,
    /// One `[d, 1]` mask per branch (1x1, depthwise, spectral).
    pub masks: [Var; 3],
}

#[derive(Debug, Clone)]
pub struct Cape {
    pub config: CapeConfig,
    pub variant: HeadVariant,
    channels: usize,
    mlps: [MaskMlp; 3],
    g1: ParamId,
    g2: ParamId,
    g3: ParamId,
    lift: (ParamId, ParamId),
    head: (ParamId, ParamId),
    ln: (ParamId, ParamId),
}

impl Cape {
    pub fn new(
        config: &CapeConfig,
        channels: usize,
        fno_base: bool,
        params: &mut ParamSet,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate(channels)?;
        let (d, c) = (config.d, channels);
        let hidden = config.hidden.unwrap_or(d);
        let mut mlp = |name: &str, rng: &mut ChaCha8Rng| MaskMlp {
            w1: params.add(
                format!("cape.{name}.w1"),
                kaiming_uniform(&[hidden, 1], 1, rng),
            ),
            b1: params.add(
                format!("cape.{name}.b1"),
                kaiming_uniform(&[hidden], 1, rng),
            ),
            w2: params.add(
                format!("cape.{name}.w2"),
                kaiming_uniform(&[d, hidden], hidden, rng),
            ),
            b2: params.add(
                format!("cape.{name}.b2"),
                kaiming_uniform(&[d], hidden, rng),
            ),
        };
        let mlps = [mlp("mask1", rng), mlp("mask2", rng), mlp("mask3", rng)];
        let k = config.kernel;
        let g1 = params.add("cape.g1", kaiming_uniform(&[d, c], c, rng));
        let g2 = params.add("cape.g2", kaiming_uniform(&[d, k], k, rng));
        let g3 = params.add("cape.g3", spectral_normal(config.modes, d, c, rng));
        let lift = (
            params.add("cape.lift.w", kaiming_uniform(&[d, c], c, rng)),
            params.add("cape.lift.b", kaiming_uniform(&[d], c, rng)),
        );
        let head = (
            params.add("cape.head.w", kaiming_uniform(&[c * config.ell, d], d, rng)),
            params.add("cape.head.b", kaiming_uniform(&[c * config.ell], d, rng)),
        );
        let ln = (
            params.add("cape.ln.gamma", Tensor::full(&[c], 1.0)),
            params.add("cape.ln.beta", Tensor::zeros(&[c])),
        );
        Ok(Self {
            config: config.clone(),
            variant: config.variant_for(fno_base),
            channels,
            mlps,
            g1,
            g2,
            g3,
            lift,
            head,
            ln,
        })
    }

    pub fn head_ids(&self) -> (ParamId, ParamId) {
        self.head
    }

    pub fn lift_ids(&self) -> (ParamId, ParamId) {
        self.lift
    }

    pub fn depthwise_id(&self) -> ParamId {
        self.g2
    }

    fn masks(&self, tape: &mut Tape, bound: &Bound, value: f64) -> Result<[Var; 3]> {
        let enc = tape.constant(encode_param(value)?);
        let mut out = Vec::with_capacity(3);
        for m in &self.mlps {
            let h = tape.conv1x1(enc, bound.var(m.w1), Some(bound.var(m.b1)))?;
            let h = tape.gelu(h)?;
            out.push(tape.conv1x1(h, bound.var(m.w2), Some(bound.var(m.b2)))?);
        }
        Ok([out[0], out[1], out[2]])
    }

    /// The three `d`-vectors gating the branches for parameter `value`.
    pub fn attention_masks(&self, params: &ParamSet, value: f64) -> Result<[Tensor; 3]> {
        let mut tape = Tape::new();
        let bound = params.bind_frozen(&mut tape);
        let m = self.masks(&mut tape, &bound, value)?;
        let flat = |v: Var| tape.value(v).clone().reshape(&[self.config.d]);
        Ok([flat(m[0])?, flat(m[1])?, flat(m[2])?])
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        u: Var,
        value: f64,
    ) -> Result<CapeOutput> {
        let c = self.channels;
        if tape.shape(u)[0] != c {
            return shape_err(format!(
                "cape expects {c} channels, got {:?}",
                tape.shape(u)
            ));
        }
        let masks = self.masks(tape, bound, value)?;
        let mut h = tape.conv1x1(u, bound.var(self.lift.0), Some(bound.var(self.lift.1)))?;
        if !self.config.is_dropped(Ablation::Conv1x1) {
            let z = tape.conv1x1(u, bound.var(self.g1), None)?;
            let v = tape.mul(z, masks[0])?;
            h = tape.add(h, v)?;
        }
        if !self.config.is_dropped(Ablation::Depthwise) {
            let z = tape.depthwise(u, bound.var(self.g2))?;
            let v = tape.mul(z, masks[1])?;
            h = tape.add(h, v)?;
        }
        if !self.config.is_dropped(Ablation::Spectral) {
            let z = tape.spectral(u, bound.var(self.g3), Modes::one_d(self.config.modes))?;
            let v = tape.mul(z, masks[2])?;
            h = tape.add(h, v)?;
        }
        let h = tape.gelu(h)?;
        let y = tape.conv1x1(h, bound.var(self.head.0), Some(bound.var(self.head.1)))?;
        let mut intermediates = Vec::with_capacity(self.config.ell);
        for i in 0..self.config.ell {
            let yi = tape.slice(y, i * c, c)?;
            let out = match self.variant {
                HeadVariant::NoLayernorm => tape.add(u, yi)?,
                HeadVariant::Layernorm => {
                    let n = tape.layer_norm(yi, bound.var(self.ln.0), bound.var(self.ln.1))?;
                    tape.add(u, n)?
                }
                HeadVariant::Multiplicative => {
                    let n = tape.layer_norm(yi, bound.var(self.ln.0), bound.var(self.ln.1))?;
                    let gated = tape.mul(u, n)?;
                    tape.add(u, gated)?
                }
            };
            intermediates.push(out);
        }
        Ok(CapeOutput {
            intermediates,
            masks,
        })
    }

    /// Depthwise kernels scaled by the second mask, one row per channel.
    pub fn gated_kernels(&self, params: &ParamSet, value: f64) -> Result<Tensor> {
        let [_, a2, _] = self.attention_masks(params, value)?;
        let k = params.get(self.g2);
        let taps = self.config.kernel;
        Ok(Tensor::from_fn(k.shape(), |j| {
            a2.data()[j / taps] * k.data()[j]
        }))
    }

    /// Write [`Cape::gated_kernels`] as CSV: `channel,tap0,...`.
    pub fn dump_gated_kernels(&self, params: &ParamSet, value: f64, path: &Path) -> Result<()> {
        let g = self.gated_kernels(params, value)?;
        let taps = self.config.kernel;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        let header: Vec<String> = (0..taps).map(|t| format!("tap{t}")).collect();
        writeln!(f, "channel,{}", header.join(","))?;
        for (ch, row) in g.data().chunks(taps).enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
            writeln!(f, "{ch},{}", cells.join(","))?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Sum of nRMSE between each intermediate and the matching future frame;
/// `truth` holds the frames that exist, so the sum stops at the shorter
/// of the two. `None` when no future frame is available.
pub fn cape_loss(tape: &mut Tape, intermediates: &[Var], truth: &[Var]) -> Result<Option<Var>> {
    let mut total: Option<Var> = None;
    for (&p, &t) in intermediates.iter().zip(truth) {
        let term = nrmse_var(tape, p, t)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total)
}

/// Base-model input `(u^k, u_hat^{k+1}, ..., u_hat^{k+ell})`.
pub fn assemble_base_input(tape: &mut Tape, u: Var, out: &CapeOutput) -> Result<Var> {
    let mut parts = Vec::with_capacity(1 + out.intermediates.len());
    parts.push(u);
    for &v in &out.intermediates {
        if tape.shape(v) != tape.shape(u) {
            return shape_err("cape intermediates must match the field shape");
        }
        parts.push(v);
    }
    tape.concat(&parts)
}
