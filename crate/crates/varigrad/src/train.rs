//! Epoch-driven training with temporal parameter averaging, per-epoch
//! metrics, and early stopping on validation error.

use crate::data::{Dataset, MinibatchSampler};
use crate::error::{Error, Result};
use crate::layers::EstimatorMode;
use crate::model::{classification_error, elbo_minibatch, Mlp, PredictMode};
use crate::optim::{AdamConfig, AdamState};
use crate::posterior::KlMode;
use crate::rng::RngStream;

#[derive(Debug, Clone)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: EstimatorMode,
    pub kl_mode: KlMode,
    pub kl_scale: f64,
    pub adam: AdamConfig,
    /// Stop after this many epochs without a strict validation improvement;
    /// 0 disables early stopping.
    pub patience: usize,
    pub with_replacement: bool,
    /// How predictions are formed when scoring train/val error.
    pub eval: PredictMode,
}

impl Default for FitOptions {
    fn default() -> FitOptions {
        FitOptions {
            epochs: 10,
            batch_size: 100,
            mode: EstimatorMode::LocalReparam,
            kl_mode: KlMode::Polynomial,
            kl_scale: 1.0,
            adam: AdamConfig::default(),
            patience: 0,
            with_replacement: false,
            eval: PredictMode::MeanWeights,
        }
    }
}

/// One metrics row. Errors are misclassification fractions in [0, 1];
/// mean_alpha holds one entry per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_elbo: f64,
    pub train_error: f64,
    pub val_error: Option<f64>,
    pub mean_alpha: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    pub rows: Vec<EpochRow>,
    /// Averaged (Polyak) parameters from the best validation epoch, or from
    /// the final epoch when there is no validation set.
    pub best_model: Mlp,
    pub best_val_error: Option<f64>,
    pub epochs_run: usize,
}

/// Train `model` in place; metrics and the returned snapshot come from the
/// temporally averaged parameters, which is also what gets evaluated.
pub fn fit(
    model: &mut Mlp,
    train: &Dataset,
    val: Option<&Dataset>,
    opts: &FitOptions,
    rng: &mut RngStream,
) -> Result<FitReport> {
    if opts.epochs == 0 {
        return Err(Error::Config("training needs at least one epoch".into()));
    }
    if opts.kl_mode == KlMode::Quadrature {
        return Err(Error::Config(
            "quadrature KL evaluation has no gradient; train with poly or bound".into(),
        ));
    }
    train.validate()?;
    if let Some(v) = val {
        v.validate()?;
        if v.d() != train.d() || v.c != train.c {
            return Err(Error::Shape(format!(
                "validation data is {}x{} with {} classes, training data is {}x{} with {}",
                v.n(),
                v.d(),
                v.c,
                train.n(),
                train.d(),
                train.c
            )));
        }
    }
    let n = train.n();
    let steps_per_epoch = n.div_ceil(opts.batch_size.min(n));
    let mut sampler =
        MinibatchSampler::new(opts.batch_size.min(n), n, opts.with_replacement, rng.substream(1))?;
    let mut noise_rng = rng.substream(2);
    let eval_base = rng.substream(3);
    let mut opt = AdamState::new(model, opts.adam)?;

    let mut rows: Vec<EpochRow> = Vec::new();
    let mut best: Option<(f64, Mlp)> = None;
    let mut since_improvement = 0usize;

    for epoch in 1..=opts.epochs {
        let mut elbo_sum = 0.0;
        for _ in 0..steps_per_epoch {
            let (xm, ym, _) = sampler.next_batch(train)?;
            let (report, grads) = elbo_minibatch(
                model,
                &xm,
                &ym,
                n,
                opts.mode,
                opts.kl_mode,
                opts.kl_scale,
                &mut noise_rng,
            )?;
            elbo_sum += report.elbo;
            opt.step(model, &grads)?;
        }
        let averaged = opt.averaged_model(model)?;
        let mut eval_rng = eval_base.substream(epoch as u64);
        let train_error =
            classification_error(&averaged, &train.x, &train.y, opts.eval, &mut eval_rng)?;
        let val_error = match val {
            Some(v) => {
                Some(classification_error(&averaged, &v.x, &v.y, opts.eval, &mut eval_rng)?)
            }
            None => None,
        };
        rows.push(EpochRow {
            epoch,
            train_elbo: elbo_sum / steps_per_epoch as f64,
            train_error,
            val_error,
            mean_alpha: averaged.layers.iter().map(|l| l.mean_alpha()).collect(),
        });
        match val_error {
            Some(ve) => {
                let improved = best.as_ref().map_or(true, |(b, _)| ve < *b);
                if improved {
                    best = Some((ve, averaged));
                    since_improvement = 0;
                } else {
                    since_improvement += 1;
                    if opts.patience > 0 && since_improvement >= opts.patience {
                        break;
                    }
                }
            }
            None => {
                // No validation signal: keep the latest averaged snapshot.
                best = Some((f64::NAN, averaged));
            }
        }
    }

    let epochs_run = rows.len();
    let (best_val_error, best_model) = match best {
        Some((v, m)) if v.is_nan() => (None, m),
        Some((v, m)) => (Some(v), m),
        None => unreachable!("at least one epoch ran"),
    };
    Ok(FitReport { rows, best_model, best_val_error, epochs_run })
}
