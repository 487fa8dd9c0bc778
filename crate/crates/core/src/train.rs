//! Minibatch Adam training over in-memory samples.
//!
//! Shuffle order depends only on `(seed, epoch)` and each sample's noise only
//! on `(seed, epoch, step, position)`, so resuming needs no RNG state beyond
//! the epoch and step counters.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Vae, Variant};
use crate::objectives::{sample_loss_and_grad, LossBreakdown, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::seed;
use crate::volume::Label;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl Preset {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "desk" => Some(Preset::Desk),
            "paper" => Some(Preset::Paper),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Paper => "paper",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub preset: Preset,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub gamma: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub optimizer: String,
    pub adam: AdamConfig,
    pub model: ModelConfig,
}

impl TrainConfig {
    /// Desk: 30 epochs, batch 8, 32³, n_z 128. Paper: 400 epochs, batch 32,
    /// 64×77×66, n_z 2048. Both use Adam at lr 0.001 with beta = gamma = 1.
    pub fn preset(preset: Preset, variant: Variant) -> Self {
        let (epochs, batch_size, model) = match preset {
            Preset::Desk => (30, 8, ModelConfig::desk(variant)),
            Preset::Paper => (400, 32, ModelConfig::paper(variant)),
        };
        Self {
            preset,
            epochs,
            learning_rate: 1e-3,
            batch_size,
            beta: 1.0,
            gamma: 1.0,
            seed: 0,
            checkpoint_every: 10,
            optimizer: "adam".into(),
            adam: AdamConfig::default(),
            model,
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            beta: self.beta,
            gamma: self.gamma,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            ..self.adam
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights().validate()?;
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be at least 1".into()));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::Validation("checkpoint_every must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Validation(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.optimizer != "adam" {
            return Err(Error::Validation(format!("unsupported optimizer {:?}", self.optimizer)));
        }
        Ok(())
    }
}

/// One preprocessed training volume.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub subject_id: String,
    pub x: Vec<f64>,
    pub a_c: f64,
    pub label: Label,
}

/// One optimizer step's batch-mean losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub l_rec: f64,
    pub l_kl: f64,
    pub l_age: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: Vae,
    pub opt: Adam,
    /// Completed epochs.
    pub epoch: usize,
    /// Optimizer steps taken.
    pub step: u64,
}

/// Rejects any anomalous training sample.
pub fn check_purity(data: &[TrainSample]) -> Result<()> {
    match data.iter().find(|s| s.label != Label::Normal) {
        Some(s) => Err(Error::Contamination(s.subject_id.clone())),
        None => Ok(()),
    }
}

/// Fresh model and optimizer; the age head starts at the mean training age.
pub fn init_state(cfg: &TrainConfig, data: &[TrainSample]) -> Result<TrainState> {
    cfg.validate()?;
    let mut model = Vae::new(cfg.model.clone(), cfg.seed)?;
    if cfg.model.variant.predicts_age() && !data.is_empty() {
        let mean = data.iter().map(|s| s.a_c).sum::<f64>() / data.len() as f64;
        model.set_age_bias(mean)?;
    }
    let opt = Adam::new(cfg.adam_config(), model.num_params());
    Ok(TrainState {
        model,
        opt,
        epoch: 0,
        step: 0,
    })
}

/// Sample order for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seed::rng(seed, &[seed::tag::SHUFFLE, epoch as u64]));
    order
}

/// Runs one epoch (the last batch may be short), calling `on_step` after
/// every optimizer update.
pub fn run_epoch(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &[TrainSample],
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<StepLog>> {
    check_purity(data)?;
    if data.is_empty() {
        return Err(Error::Validation("train split is empty".into()));
    }
    let epoch = state.epoch;
    let order = epoch_order(cfg.seed, epoch, data.len());
    let n_z = cfg.model.latent_dim;
    let w = cfg.weights();
    let mut grad = vec![0.0; state.model.num_params()];
    let mut logs = Vec::new();
    for batch in order.chunks(cfg.batch_size) {
        grad.fill(0.0);
        let scale = 1.0 / batch.len() as f64;
        let mut parts = Vec::with_capacity(batch.len());
        for (pos, &i) in batch.iter().enumerate() {
            let s = &data[i];
            let mut rng = seed::rng(cfg.seed, &[seed::tag::NOISE, epoch as u64, state.step, pos as u64]);
            let noise: Vec<f64> = (0..n_z).map(|_| StandardNormal.sample(&mut rng)).collect();
            parts.push(sample_loss_and_grad(&state.model, &s.x, Some(s.a_c), &noise, w, scale, &mut grad)?);
        }
        let loss = LossBreakdown::mean(&parts, w)?;
        if !loss.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                step: state.step,
            });
        }
        state.opt.step(state.model.params_mut(), &grad)?;
        let log = StepLog {
            epoch,
            step: state.step,
            l_rec: loss.l_rec,
            l_kl: loss.l_kl,
            l_age: loss.l_age,
            total: loss.total,
        };
        state.step += 1;
        on_step(&log);
        logs.push(log);
    }
    state.epoch += 1;
    Ok(logs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomParams};
    use crate::volume::{standardize, Shape};

    fn small_cfg(variant: Variant) -> TrainConfig {
        let mut cfg = TrainConfig::preset(Preset::Desk, variant);
        cfg.model.input_shape = Shape::new(16, 16, 16);
        cfg.model.latent_dim = 16;
        cfg.model.channels = vec![4, 8, 8];
        cfg.batch_size = 4;
        cfg.seed = 5;
        cfg
    }

    fn phantoms(n: usize, size: usize) -> Vec<TrainSample> {
        let params = PhantomParams {
            size: Shape::new(size, size, size),
            ..PhantomParams::default()
        };
        (0..n)
            .map(|i| {
                let age = 20.0 + 60.0 * i as f64 / n.max(2) as f64;
                let v = standardize(&generate_phantom(&params, age, 100 + i as u64).unwrap()).unwrap();
                TrainSample {
                    subject_id: v.subject_id.clone(),
                    x: v.data_f64(),
                    a_c: age,
                    label: Label::Normal,
                }
            })
            .collect()
    }

    #[test]
    fn presets() {
        let p = TrainConfig::preset(Preset::Paper, Variant::VaeAp);
        assert_eq!((p.epochs, p.learning_rate, p.batch_size), (400, 0.001, 32));
        assert_eq!(p.optimizer, "adam");
        assert_eq!(p.model.latent_dim, 2048);
        let d = TrainConfig::preset(Preset::Desk, Variant::Vae);
        assert_eq!((d.epochs, d.batch_size), (30, 8));
    }

    #[test]
    fn contamination_is_rejected() {
        let cfg = small_cfg(Variant::Vae);
        let mut data = phantoms(3, 16);
        data[1].label = Label::Anomalous;
        let mut st = init_state(&cfg, &data).unwrap();
        assert!(matches!(run_epoch(&mut st, &cfg, &data, |_| {}), Err(Error::Contamination(_))));
    }

    #[test]
    fn shuffles_are_seeded_permutations() {
        let a = epoch_order(1, 0, 20);
        assert_eq!(a, epoch_order(1, 0, 20));
        assert_ne!(a, epoch_order(1, 1, 20));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..20).collect::<Vec<_>>());
    }

    #[test]
    fn steps_increase_and_short_batches_kept() {
        let cfg = small_cfg(Variant::Vae);
        let data = phantoms(6, 16);
        let mut st = init_state(&cfg, &data).unwrap();
        let mut all = run_epoch(&mut st, &cfg, &data, |_| {}).unwrap();
        all.extend(run_epoch(&mut st, &cfg, &data, |_| {}).unwrap());
        assert_eq!(all.len(), 4);
        assert!(all.windows(2).all(|w| (w[0].epoch, w[0].step) < (w[1].epoch, w[1].step)));
    }

    #[test]
    fn overfit_reduces_reconstruction() {
        let mut cfg = small_cfg(Variant::Vae);
        cfg.model.channels = vec![16, 32, 64, 128];
        cfg.model.latent_dim = 32;
        cfg.beta = 0.0;
        let data = phantoms(4, 16);
        let mut st = init_state(&cfg, &data).unwrap();
        let mut logs = Vec::new();
        for _ in 0..300 {
            logs.extend(run_epoch(&mut st, &cfg, &data, |_| {}).unwrap());
        }
        let first = logs[0].l_rec;
        let last = logs.last().unwrap().l_rec;
        assert!(last < 0.3 * first, "l_rec {first} -> {last}");
    }

    #[test]
    fn age_head_overfits() {
        let mut cfg = small_cfg(Variant::VaeAp);
        cfg.batch_size = 8;
        let data = phantoms(8, 16);
        let mut st = init_state(&cfg, &data).unwrap();
        for _ in 0..200 {
            run_epoch(&mut st, &cfg, &data, |_| {}).unwrap();
        }
        let mae = data
            .iter()
            .map(|s| {
                let f = st.model.encode_features(&s.x).unwrap();
                (st.model.predict_age(&f).unwrap() - s.a_c).abs()
            })
            .sum::<f64>()
            / data.len() as f64;
        assert!(mae < 3.0, "training MAE {mae}");
    }

    #[test]
    fn divergence_is_reported() {
        let mut cfg = small_cfg(Variant::Vae);
        cfg.batch_size = 2;
        let mut data = phantoms(2, 16);
        data[0].x[0] = f64::NAN;
        let mut st = init_state(&cfg, &data).unwrap();
        assert!(matches!(run_epoch(&mut st, &cfg, &data, |_| {}), Err(Error::Divergence { .. })));
    }
}
