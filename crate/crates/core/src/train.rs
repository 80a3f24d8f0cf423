//! Training loop: one sequence per optimizer step, focal loss plus the
//! weighted consistency loss, gradient clipping, Adam, and early stopping on
//! validation mAP.

use numkit::gradcheck::GradCheckReport;
use numkit::{clip_grad_norm, Adam, AdamConfig, Graph, ParameterSet, Tensor, Var};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result, ResultExt};
use crate::evalkit::{self, Grouping, Metrics};
use crate::fusion;
use crate::model::{Prepared, TtmModel};
use crate::psa;
use crate::rng::{stream, tag};
use crate::scenario::{noise_samples, NoiseKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub clip: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
    pub lambda_psa: f64,
    /// Epochs without a validation mAP improvement before stopping.
    pub patience: usize,
    /// Probability that a training step uses the noise-mixed audio path.
    pub mix_prob: f64,
    pub mix_gamma: f64,
    pub noise_kind: NoiseKind,
    /// Bounds of the log-uniform RMS of the noise drawn for mixing.
    pub noise_rms: [f64; 2],
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 40,
            clip: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
            lambda_psa: 0.1,
            patience: 100,
            mix_prob: 0.5,
            mix_gamma: 0.5,
            noise_kind: NoiseKind::Mixed,
            noise_rms: [0.01, 0.1],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(CoreError::Config(format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if !(self.clip > 0.0) {
            return Err(CoreError::Config(format!("clip norm {} must be positive", self.clip)));
        }
        for (name, p) in [
            ("mix_prob", self.mix_prob),
            ("mix_gamma", self.mix_gamma),
            ("focal_alpha", self.focal_alpha),
            ("beta1", self.beta1),
            ("beta2", self.beta2),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(CoreError::Config(format!("{name} = {p} outside [0, 1]")));
            }
        }
        if !(self.focal_gamma >= 0.0) || !(self.lambda_psa >= 0.0) {
            return Err(CoreError::Config("focal_gamma and lambda_psa must be non-negative".into()));
        }
        let [lo, hi] = self.noise_rms;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(CoreError::Config(format!("noise_rms bounds [{lo}, {hi}] must satisfy 0 < lo ≤ hi")));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub focal: f64,
    pub mse: f64,
    /// Fraction of training steps that used the mixed path.
    pub mixed: f64,
    pub train_acc: f64,
    pub val: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val: Option<Metrics>,
    pub stopped_early: bool,
}

pub struct StepLoss {
    pub total: f64,
    pub focal: f64,
    pub mse: f64,
    pub correct: usize,
}

/// Training objective on one sequence: focal loss, plus `λ_psa` times the
/// consistency loss when `mixed` holds a noise-mixed encoder input.
pub struct Objective {
    pub total: Var,
    pub focal: Var,
    pub mse: Option<Var>,
    pub scores: Var,
}

pub fn objective(
    g: &mut Graph,
    model: &TtmModel,
    params: &ParameterSet,
    s: &Prepared,
    cfg: &TrainConfig,
    mixed: Option<&Tensor>,
) -> Result<Objective> {
    let (out, mse) = match mixed {
        Some(m) => {
            let (o, mse) = model.forward_mixed_with(g, params, s, m)?;
            (o, Some(mse))
        }
        None => (model.forward_with(g, params, s, &s.mel)?, None),
    };
    let focal = fusion::focal_loss(g, out.scores, &s.labels, cfg.focal_alpha, cfg.focal_gamma)?;
    let total = match mse {
        Some(m) => {
            let w = g.scale(m, cfg.lambda_psa)?;
            g.add(focal, w)?
        }
        None => focal,
    };
    Ok(Objective {
        total,
        focal,
        mse,
        scores: out.scores,
    })
}

/// Forward and backward on one sequence; gradients accumulate into the model
/// parameters.
pub fn step_gradients(model: &mut TtmModel, s: &Prepared, cfg: &TrainConfig, mixed: Option<&Tensor>) -> Result<StepLoss> {
    let mut g = Graph::new();
    let obj = objective(&mut g, model, &model.params, s, cfg, mixed)?;
    let correct = g
        .value(obj.scores)
        .data()
        .iter()
        .zip(&s.labels)
        .filter(|(p, y)| (**p >= 0.5) == (**y == 1.0))
        .count();
    let loss = StepLoss {
        total: g.value(obj.total).item(),
        focal: g.value(obj.focal).item(),
        mse: obj.mse.map_or(0.0, |m| g.value(m).item()),
        correct,
    };
    g.backward(obj.total, &mut model.params)?;
    Ok(loss)
}

/// Encoder input of `s` mixed with freshly drawn noise.
pub fn mixed_input<R: Rng + ?Sized>(model: &TtmModel, fe: &psa::MelFrontEnd, s: &Prepared, cfg: &TrainConfig, rng: &mut R) -> Result<Tensor> {
    let len = s.clean.len() + s.clean.sample_rate as usize / 4;
    let [lo, hi] = cfg.noise_rms;
    let rms = (lo.ln() + rng.random::<f64>() * (hi / lo).ln()).exp();
    let noise = noise_samples(cfg.noise_kind, len, s.clean.sample_rate, rms, rng);
    let noise = psa::Waveform::new(noise, s.clean.sample_rate)?;
    let mixed = psa::mix_noise(&s.clean, &noise, cfg.mix_gamma, rng)?;
    model.mel_of(fe, &mixed)
}

/// One pass over `data` in a seeded shuffled order.
pub fn train_epoch(model: &mut TtmModel, data: &[Prepared], cfg: &TrainConfig, adam: &mut Adam, seed: u64, epoch: usize) -> Result<EpochRecord> {
    if data.is_empty() {
        return Err(CoreError::Data("empty training set".into()));
    }
    let fe = model.front_end()?;
    let mut rng = stream(seed, &[tag("epoch"), epoch as u64]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);
    // per-sequence losses, summed in dataset order so the totals do not
    // depend on the shuffle
    let mut losses = vec![[0.0; 3]; data.len()];
    let (mut mixed_steps, mut correct, mut frames) = (0usize, 0usize, 0usize);
    model.params.zero_grads();
    for &i in &order {
        let s = &data[i];
        let use_mix = model.variant.psa && rng.random::<f64>() < cfg.mix_prob;
        let mixed = if use_mix {
            Some(mixed_input(model, &fe, s, cfg, &mut rng)?)
        } else {
            None
        };
        let step = step_gradients(model, s, cfg, mixed.as_ref()).map_err(|e| CoreError::Context {
            module: "train",
            source: Box::new(CoreError::Data(format!("sequence {} at epoch {epoch}: {e}", s.id))),
        })?;
        if !step.total.is_finite() {
            return Err(CoreError::Data(format!("non-finite loss on sequence {} at epoch {epoch}", s.id)));
        }
        clip_grad_norm(&mut model.params, cfg.clip);
        adam.step(&mut model.params).within("train")?;
        losses[i] = [step.total, step.focal, step.mse];
        mixed_steps += use_mix as usize;
        correct += step.correct;
        frames += s.frames;
    }
    let n = data.len() as f64;
    let sum = |k: usize| losses.iter().map(|l| l[k]).sum::<f64>();
    let (loss, focal, mse) = (sum(0), sum(1), sum(2));
    Ok(EpochRecord {
        epoch,
        loss: loss / n,
        focal: focal / n,
        mse: mse / n,
        mixed: mixed_steps as f64 / n,
        train_acc: correct as f64 / frames.max(1) as f64,
        val: None,
    })
}

/// Scores for every sequence, clean audio.
pub fn predict_all(model: &TtmModel, data: &[Prepared]) -> Result<Vec<Vec<f64>>> {
    use rayon::prelude::*;
    data.par_iter().map(|s| model.predict(s, None)).collect()
}

pub fn evaluate(model: &TtmModel, data: &[Prepared], grouping: Grouping) -> Result<Metrics> {
    let scores = predict_all(model, data)?;
    let labels: Vec<&[f64]> = data.iter().map(|s| s.labels.as_slice()).collect();
    evalkit::metrics(&scores, &labels, grouping, 0.5)
}

/// Trains for up to `cfg.epochs` epochs, keeping the parameters of the best
/// validation epoch. `progress` sees each finished epoch.
pub fn fit(
    model: &mut TtmModel,
    train: &[Prepared],
    val: &[Prepared],
    cfg: &TrainConfig,
    seed: u64,
    grouping: Grouping,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut adam = Adam::new(cfg.adam());
    let mut best: Option<(usize, Metrics, ParameterSet)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut stale = 0usize;
    let mut stopped_early = false;
    for epoch in 0..cfg.epochs {
        let mut rec = train_epoch(model, train, cfg, &mut adam, seed, epoch)?;
        if !val.is_empty() {
            let m = evaluate(model, val, grouping)?;
            let improved = best.as_ref().is_none_or(|(_, b, _)| m.map_or(-1.0) > b.map_or(-1.0));
            if improved {
                best = Some((epoch, m.clone(), model.params.clone()));
                stale = 0;
            } else {
                stale += 1;
            }
            rec.val = Some(m);
        }
        progress(&rec);
        epochs.push(rec);
        if stale >= cfg.patience && !val.is_empty() {
            stopped_early = epoch + 1 < cfg.epochs;
            break;
        }
    }
    let (best_epoch, best_val) = match best {
        Some((e, m, p)) => {
            model.params = p;
            (Some(e), Some(m))
        }
        None => (None, None),
    };
    Ok(TrainReport {
        epochs,
        best_epoch,
        best_val,
        stopped_early,
    })
}

/// Central-difference check of the full training objective with respect to
/// every model parameter. With `mixed` the dual audio path and the
/// consistency term are included.
pub fn gradcheck(model: &TtmModel, s: &Prepared, cfg: &TrainConfig, mixed: Option<&Tensor>, eps: f64) -> Result<GradCheckReport> {
    let report = numkit::gradcheck::check_params(&model.params, eps, |g, p| {
        objective(g, model, p, s, cfg, mixed)
            .map(|o| o.total)
            .map_err(|e| numkit::NumError::Contract(e.to_string()))
    })?;
    Ok(report)
}
