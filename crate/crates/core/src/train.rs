//! Minibatch SGD for the victim model, optionally on PGD-perturbed inputs.

use serde::{Deserialize, Serialize};

use crate::attack::{project_in_place, sign_step};
use crate::data::Sample;
use crate::error::{ensure, Error, Result};
use crate::objectives::{loss_and_logit_grad, LossKind};
use crate::segmodel::{accumulate, zero_grads, ModelParams, DEFAULT_CLASSES};
use crate::tensor::Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// PGD steps per training image; 0 trains on clean images.
    pub adv_steps: usize,
    pub adv_eps: f64,
    pub seed: u64,
    pub classes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 0.05,
            batch_size: 8,
            adv_steps: 0,
            adv_eps: 8.0 / 255.0,
            seed: 0,
            classes: DEFAULT_CLASSES,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.learning_rate.is_finite() && self.learning_rate > 0.0,
            InvalidArgument,
            "learning_rate must be positive, got {}",
            self.learning_rate
        );
        ensure!(self.batch_size >= 1, InvalidArgument, "batch_size must be >= 1");
        ensure!(self.classes >= 2, InvalidArgument, "classes must be >= 2");
        if self.adv_steps > 0 {
            ensure!(
                self.adv_eps > 0.0 && self.adv_eps <= 1.0,
                InvalidArgument,
                "adv_eps must be in (0, 1], got {}",
                self.adv_eps
            );
        }
        Ok(())
    }
}

/// Trains from the seeded reference initialisation.
pub fn train(config: &TrainConfig, samples: &[Sample]) -> Result<ModelParams> {
    train_logged(config, samples).map(|(m, _)| m)
}

/// Like [`train`], also returning the mean training loss of every epoch.
pub fn train_logged(config: &TrainConfig, samples: &[Sample]) -> Result<(ModelParams, Vec<f64>)> {
    config.validate()?;
    ensure!(!samples.is_empty(), InvalidArgument, "training set is empty");
    let (channels, _, _) = samples[0].image.chw()?;
    for (i, s) in samples.iter().enumerate() {
        s.labels
            .check_classes(config.classes)
            .map_err(|e| Error::InvalidArgument(format!("sample {i}: {e}")))?;
    }

    let mut model = ModelParams::reference(channels, config.classes, config.seed)?;
    let mut rng = Rng::for_item(config.seed, 1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for (batch, chunk) in order.chunks(config.batch_size).enumerate() {
            let mut grads = zero_grads(&model);
            let mut batch_loss = 0.0;
            for &i in chunk {
                let s = &samples[i];
                let (_, h, w) = s.image.chw()?;
                let diverged = |e| match e {
                    Error::NonFinite(_) => Error::Diverged {
                        epoch,
                        batch,
                        loss: f64::NAN,
                    },
                    other => other,
                };
                let x = if config.adv_steps > 0 {
                    adversarial_input(&model, s, config, &mut rng).map_err(diverged)?
                } else {
                    s.image.to_f64()
                };
                let trace = model.trace_f64(&x, h, w).map_err(diverged)?;
                let report = loss_and_logit_grad(LossKind::Ce, trace.logits(), model.classes(), &s.labels, None)
                    .map_err(diverged)?;
                let (_, g) = model.backward_full(&trace, &report.logit_grad).map_err(diverged)?;
                accumulate(&mut grads, &g, 1.0 / chunk.len() as f64);
                batch_loss += report.scalar_loss / chunk.len() as f64;
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch,
                    loss: batch_loss,
                });
            }
            model = model.sgd_step(&grads, config.learning_rate).map_err(|_| Error::Diverged {
                epoch,
                batch,
                loss: batch_loss,
            })?;
            total += batch_loss * chunk.len() as f64;
        }
        epoch_losses.push(total / samples.len() as f64);
    }
    Ok((model, epoch_losses))
}

/// Plain sign-PGD on CE with step `eps / 2` from a uniform random start.
fn adversarial_input(model: &ModelParams, s: &Sample, config: &TrainConfig, rng: &mut Rng) -> Result<Vec<f64>> {
    let (_, h, w) = s.image.chw()?;
    let eps = config.adv_eps;
    let origin = s.image.to_f64();
    let mut x: Vec<f64> = origin.iter().map(|&o| o + rng.uniform(-eps, eps)).collect();
    project_in_place(&mut x, &origin, eps);
    for _ in 0..config.adv_steps {
        let trace = model.trace_f64(&x, h, w)?;
        let report = loss_and_logit_grad(LossKind::Ce, trace.logits(), model.classes(), &s.labels, None)?;
        let g = model.backward_input(&trace, &report.logit_grad)?;
        sign_step(&mut x, &g, eps / 2.0)?;
        project_in_place(&mut x, &origin, eps);
    }
    Ok(x)
}

/// Pixel accuracy in percent over non-ignored pixels of `samples`.
pub fn clean_accuracy(model: &ModelParams, samples: &[Sample]) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for s in samples {
        let pred = model.predict(&s.image)?;
        for (&p, &t) in pred.data().iter().zip(s.labels.data()) {
            if t != crate::tensor::IGNORE_INDEX {
                total += 1;
                correct += (p == t) as usize;
            }
        }
    }
    ensure!(total > 0, InvalidArgument, "no labelled pixels");
    Ok(100.0 * correct as f64 / total as f64)
}
