//! Curriculum training, rollout and evaluation.

mod config;
mod schedule;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use config::{TrainConfig, TrainMode};
pub use schedule::{k_trans, learning_rate};

use crate::cape::cape_loss;
use crate::error::{DivergenceInfo, Error, Result};
use crate::metrics::{mean_std, nrmse, nrmse_var};
use crate::models::Surrogate;
use crate::pde::{derive_seed, Dataset, PdeKind, Split, Trajectory};
use crate::tensor::{Adam, Bound, ParamSet, Tape, Tensor, Var};

/// Loss summary of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub k_trans: usize,
    /// Mean per-trajectory loss.
    pub loss: f64,
    /// Mean per-trajectory loss for each parameter value.
    pub per_param: Vec<(f64, f64)>,
}

/// Evaluation of one `(kind, parameter, split)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub kind: PdeKind,
    pub param: f64,
    pub split: Split,
    pub seen: bool,
    pub nrmse_mean: f64,
    pub nrmse_std: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub wall_clock_s: f64,
    pub config_hash: String,
}

impl EvalReport {
    pub fn row(&self, split: Split, param: f64) -> Option<&EvalRow> {
        self.rows
            .iter()
            .find(|r| r.split == split && r.param == param)
    }

    /// Mean nRMSE over the rows of `split` with the given seen flag.
    pub fn mean_over(&self, split: Split, seen: bool) -> f64 {
        let xs: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.split == split && r.seen == seen)
            .map(|r| r.nrmse_mean)
            .collect();
        mean_std(&xs).0
    }
}

fn frame_tensor(t: &Trajectory, k: usize) -> Tensor {
    Tensor::new(&[1, t.grid.n_x], t.frame(k).to_vec()).expect("frame shape")
}

fn diverged(e: Error, epoch: usize, step: usize, param: f64) -> Error {
    match e {
        Error::Numeric(_) => Error::Diverged(DivergenceInfo { epoch, step, param }),
        other => other,
    }
}

fn accumulate(acc: &mut [Option<Tensor>], grads: Vec<Option<Tensor>>, scale: f64) {
    for (a, g) in acc.iter_mut().zip(grads) {
        let Some(g) = g else { continue };
        match a {
            Some(a) => a
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .for_each(|(x, y)| *x += scale * y),
            None => {
                let mut g = g;
                g.data_mut().iter_mut().for_each(|x| *x *= scale);
                *a = Some(g);
            }
        }
    }
}

/// Model, optimizer and position in the epoch sequence.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub surrogate: Surrogate,
    pub config: TrainConfig,
    pub adam: Adam,
    /// Next epoch to run.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(surrogate: Surrogate, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let adam = Adam::new(&surrogate.params, config.lr);
        Ok(Self {
            surrogate,
            config,
            adam,
            epoch: 0,
        })
    }

    /// Transition index actually used at `epoch` for the configured mode.
    pub fn k_trans_at(&self, epoch: usize, n_t: usize) -> usize {
        match self.config.mode {
            TrainMode::TeacherForcing => 0,
            TrainMode::Autoregressive => n_t,
            TrainMode::Curriculum => k_trans(epoch, self.config.epochs, n_t, self.config.delta),
        }
    }

    fn first_step(&self) -> usize {
        usize::from(self.surrogate.needs_prev())
    }

    /// Loss of one trajectory; steps `k <= k_trans` chain predictions.
    pub fn trajectory_loss(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        traj: &Trajectory,
        k_trans: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let n_t = traj.grid.n_t;
        let n_x = traj.grid.n_x;
        let value = traj.params.value;
        let sigma = self.config.noise * traj.std();
        let noise = Normal::new(0.0, sigma.max(0.0)).map_err(|e| Error::Numeric(e.to_string()))?;
        let ell = self.surrogate.cape_config.as_ref().map_or(0, |c| c.ell);
        let start = self.first_step();
        let truth: Vec<Var> = (0..=n_t)
            .map(|k| tape.constant(frame_tensor(traj, k)))
            .collect();
        let mut states: Vec<Var> = truth[..=start].to_vec();
        let mut total: Option<Var> = None;
        for k in start..n_t {
            let chained = k > start && k <= k_trans;
            let mut u = if chained { states[k] } else { truth[k] };
            if chained {
                if let Some(b) = self.config.bptt {
                    if (k - start).is_multiple_of(b) {
                        u = tape.detach(u);
                    }
                }
            }
            if sigma > 0.0 {
                let eps = Tensor::from_fn(&[1, n_x], |_| noise.sample(rng));
                let e = tape.constant(eps);
                u = tape.add(u, e)?;
            }
            let prev = if start > 0 { Some(states[k - 1]) } else { None };
            let out = self.surrogate.step(tape, bound, u, prev, value)?;
            let mut term = nrmse_var(tape, out.next, truth[k + 1])?;
            if self.config.alpha > 0.0 && !out.intermediates.is_empty() {
                let avail = &truth[k + 1..=(k + ell).min(n_t)];
                if let Some(aux) = cape_loss(tape, &out.intermediates, avail)? {
                    let aux = tape.scale(aux, self.config.alpha)?;
                    term = tape.add(term, aux)?;
                }
            }
            total = Some(match total {
                Some(t) => tape
                    .add(t, term)
                    .map_err(|e| diverged(e, self.epoch, k, value))?,
                None => term,
            });
            states.push(if k < k_trans { out.next } else { truth[k + 1] });
        }
        total.ok_or_else(|| Error::Data("trajectory too short to train on".into()))
    }

    /// One pass over `data`, one optimizer step per batch.
    pub fn train_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        let grid = data
            .grid()
            .ok_or_else(|| Error::Data("empty training set".into()))?;
        self.surrogate.check_grid(grid.n_x)?;
        let epoch = self.epoch;
        let lr = learning_rate(self.config.lr, epoch, self.config.halve_every);
        self.adam.lr = lr;
        let kt = self.k_trans_at(epoch, grid.n_t);
        let warmup = epoch < self.config.warmup_epochs && self.surrogate.cape().is_some();

        let trajs: Vec<(usize, &Trajectory)> = data.trajectories().enumerate().collect();
        let mut order: Vec<usize> = (0..trajs.len()).collect();
        let mut shuffle =
            ChaCha8Rng::seed_from_u64(derive_seed(&[self.config.seed, epoch as u64, 1]));
        order.shuffle(&mut shuffle);

        let mut per_param: BTreeMap<u64, (f64, usize)> = BTreeMap::new();
        let mut sum = 0.0;
        for batch in order.chunks(self.config.batch) {
            let mut acc: Vec<Option<Tensor>> = vec![None; self.surrogate.params.len()];
            for &i in batch {
                let (idx, traj) = trajs[i];
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                    self.config.seed,
                    epoch as u64,
                    2,
                    idx as u64,
                ]));
                let mut tape = Tape::new();
                let bound = self.surrogate.params.bind(&mut tape);
                let value = traj.params.value;
                let loss = self
                    .trajectory_loss(&mut tape, &bound, traj, kt, &mut rng)
                    .map_err(|e| diverged(e, epoch, 0, value))?;
                let l = tape.value(loss).item();
                if !l.is_finite() {
                    return Err(Error::Diverged(DivergenceInfo {
                        epoch,
                        step: grid.n_t,
                        param: value,
                    }));
                }
                tape.backward(loss)
                    .map_err(|e| diverged(e, epoch, grid.n_t, value))?;
                accumulate(&mut acc, bound.grads(&tape), 1.0 / batch.len() as f64);
                sum += l;
                let e = per_param.entry(value.to_bits()).or_insert((0.0, 0));
                e.0 += l;
                e.1 += 1;
            }
            if warmup {
                for (id, _, _) in self.surrogate.params.iter() {
                    if !self.surrogate.is_cape_param(id) {
                        acc[id.0] = None;
                    }
                }
            }
            self.adam.step(&mut self.surrogate.params, &acc)?;
            if !self.surrogate.params.iter().all(|(_, _, t)| t.is_finite()) {
                return Err(Error::Diverged(DivergenceInfo {
                    epoch,
                    step: grid.n_t,
                    param: f64::NAN,
                }));
            }
        }
        self.epoch += 1;
        let mut per: Vec<(f64, f64)> = per_param
            .into_iter()
            .map(|(bits, (s, n))| (f64::from_bits(bits), s / n as f64))
            .collect();
        per.sort_by(|a, b| a.0.total_cmp(&b.0));
        Ok(EpochStats {
            epoch,
            lr,
            k_trans: kt,
            loss: sum / trajs.len() as f64,
            per_param: per,
        })
    }

    /// Parameters plus optimizer moments, for checkpointing.
    pub fn state_tensors(&self) -> ParamSet {
        let mut set = self.surrogate.params.clone();
        let (m, v) = self.adam.moments();
        for ((_, name, t), (m, v)) in self.surrogate.params.iter().zip(m.iter().zip(v)) {
            set.add(
                format!("adam.m.{name}"),
                Tensor::new(t.shape(), m.clone()).expect("moment"),
            );
            set.add(
                format!("adam.v.{name}"),
                Tensor::new(t.shape(), v.clone()).expect("moment"),
            );
        }
        set
    }

    /// Inverse of [`Trainer::state_tensors`]; `epoch` is the next epoch.
    pub fn restore_state(
        &mut self,
        tensors: &ParamSet,
        adam_step: u64,
        epoch: usize,
    ) -> Result<()> {
        self.surrogate.params.load_from(tensors)?;
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (_, name, _) in self.surrogate.params.iter() {
            let get = |prefix: &str| {
                tensors
                    .find(&format!("{prefix}.{name}"))
                    .map(|id| tensors.get(id).data().to_vec())
                    .ok_or_else(|| Error::Data(format!("checkpoint lacks {prefix}.{name}")))
            };
            m.push(get("adam.m")?);
            v.push(get("adam.v")?);
        }
        self.adam.restore(adam_step, m, v)?;
        self.epoch = epoch;
        Ok(())
    }
}

/// Autoregressive prediction of `n_steps` frames after `u0` (after `u1`
/// for models that read two frames). No noise is added.
pub fn rollout(
    s: &Surrogate,
    u0: &[f64],
    u1: Option<&[f64]>,
    value: f64,
    n_steps: usize,
) -> Result<Vec<Vec<f64>>> {
    let n_x = u0.len();
    let mut tape = Tape::new();
    let bound = s.params.bind_frozen(&mut tape);
    let mk = |t: &mut Tape, v: &[f64]| -> Result<Var> {
        Ok(t.constant(Tensor::new(&[1, n_x], v.to_vec())?))
    };
    let mut prev = None;
    let mut u = mk(&mut tape, u0)?;
    if s.needs_prev() {
        let u1 = u1.ok_or_else(|| Error::Data("two-frame model needs u1".into()))?;
        prev = Some(u);
        u = mk(&mut tape, u1)?;
    }
    let mut out = Vec::with_capacity(n_steps);
    for k in 0..n_steps {
        let step = s
            .step(&mut tape, &bound, u, prev, value)
            .map_err(|e| match e {
                Error::Numeric(_) => Error::RolloutDiverged(k + 1),
                other => other,
            })?;
        out.push(tape.value(step.next).data().to_vec());
        prev = Some(u);
        u = step.next;
    }
    Ok(out)
}

/// Mean over predicted frames of the per-frame nRMSE.
pub fn trajectory_nrmse(s: &Surrogate, traj: &Trajectory) -> Result<f64> {
    let n_t = traj.grid.n_t;
    let start = usize::from(s.needs_prev());
    let u1 = (start == 1).then(|| traj.frame(1));
    let pred = rollout(s, traj.frame(0), u1, traj.params.value, n_t - start)?;
    let mut total = 0.0;
    for (i, p) in pred.iter().enumerate() {
        let k = start + 1 + i;
        let truth = frame_tensor(traj, k);
        total += nrmse(&Tensor::new(&[1, p.len()], p.clone())?, &truth)?;
    }
    Ok(total / pred.len() as f64)
}

/// Per-parameter nRMSE of `s` on `data`.
pub fn evaluate(s: &Surrogate, data: &Dataset, seen: impl Fn(f64) -> bool) -> Result<Vec<EvalRow>> {
    if let Some(g) = data.grid() {
        s.check_grid(g.n_x)?;
    }
    data.groups
        .iter()
        .map(|g| {
            let scores = g
                .trajectories
                .iter()
                .map(|t| trajectory_nrmse(s, t))
                .collect::<Result<Vec<_>>>()?;
            let (mean, std) = mean_std(&scores);
            Ok(EvalRow {
                kind: g.params.kind,
                param: g.params.value,
                split: data.split,
                seen: seen(g.params.value),
                nrmse_mean: mean,
                nrmse_std: std,
                count: scores.len(),
            })
        })
        .collect()
}
