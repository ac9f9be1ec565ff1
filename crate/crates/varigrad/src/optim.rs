use crate::error::{Error, Result};
use crate::model::{Mlp, ModelGrads};

/// Adam hyper-parameters plus the decay used for temporal parameter
/// averaging. Defaults are the conventional ones.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub avg_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> AdamConfig {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, avg_decay: 0.999 }
    }
}

#[derive(Debug, Clone)]
struct Slot {
    m: Vec<f64>,
    v: Vec<f64>,
    avg: Vec<f64>,
}

impl Slot {
    fn new(len: usize) -> Slot {
        Slot { m: vec![0.0; len], v: vec![0.0; len], avg: vec![0.0; len] }
    }
}

/// Adam state for gradient ASCENT on the variational objective, with an
/// exponentially-weighted average of the parameter iterates maintained
/// alongside. After every step, log_alpha entries are clipped to <= 0 so
/// the noise level never exceeds alpha = 1.
#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    step: u64,
    theta: Vec<Slot>,
    log_alpha: Vec<Option<Slot>>,
    bias: Vec<Slot>,
}

impl AdamState {
    pub fn new(model: &Mlp, cfg: AdamConfig) -> Result<AdamState> {
        if !(cfg.lr > 0.0) || !cfg.lr.is_finite() {
            return Err(Error::Config(format!("step size must be positive, got {}", cfg.lr)));
        }
        for (name, beta) in [("beta1", cfg.beta1), ("beta2", cfg.beta2), ("avg_decay", cfg.avg_decay)]
        {
            if !(0.0..1.0).contains(&beta) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {beta}")));
            }
        }
        if !(cfg.eps > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {}", cfg.eps)));
        }
        let mut theta = Vec::new();
        let mut log_alpha = Vec::new();
        let mut bias = Vec::new();
        for layer in &model.layers {
            theta.push(Slot::new(layer.posterior.theta.data().len()));
            log_alpha.push(if layer.is_adaptive() {
                Some(Slot::new(layer.posterior.log_alpha.data().len()))
            } else {
                None
            });
            bias.push(Slot::new(layer.bias.len()));
        }
        Ok(AdamState { cfg, step: 0, theta, log_alpha, bias })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    /// One ascent step over every parameter group, then the alpha <= 1
    /// projection, then the averaging update (so the average tracks the
    /// feasible iterates).
    pub fn step(&mut self, model: &mut Mlp, grads: &ModelGrads) -> Result<()> {
        if grads.layers.len() != model.layers.len() || model.layers.len() != self.theta.len() {
            return Err(Error::Shape("gradient/model/optimizer layer counts differ".into()));
        }
        self.step += 1;
        let t = self.step;
        for (i, layer) in model.layers.iter_mut().enumerate() {
            update_group(
                &mut self.theta[i],
                layer.posterior.theta.data_mut(),
                grads.layers[i].dtheta.data(),
                t,
                self.cfg,
                false,
                &format!("layer {i} theta"),
            )?;
            match (&mut self.log_alpha[i], &grads.layers[i].dlog_alpha) {
                (Some(slot), Some(dla)) => update_group(
                    slot,
                    layer.posterior.log_alpha.data_mut(),
                    dla.data(),
                    t,
                    self.cfg,
                    true,
                    &format!("layer {i} log_alpha"),
                )?,
                (None, None) => {}
                (Some(_), None) => {
                    return Err(Error::Config(format!(
                        "layer {i} has learnable noise but no log_alpha gradient"
                    )))
                }
                (None, Some(_)) => {
                    return Err(Error::Config(format!(
                        "layer {i} has no learnable noise but received a log_alpha gradient"
                    )))
                }
            }
            update_group(
                &mut self.bias[i],
                &mut layer.bias,
                &grads.layers[i].dbias,
                t,
                self.cfg,
                false,
                &format!("layer {i} bias"),
            )?;
        }
        Ok(())
    }

    /// Bias-corrected temporally-averaged parameters, materialized into a
    /// copy of `template` (which must be the model this state was stepping).
    pub fn averaged_model(&self, template: &Mlp) -> Result<Mlp> {
        if self.step == 0 {
            return Err(Error::Stats("temporal average requested before any step".into()));
        }
        if template.layers.len() != self.theta.len() {
            return Err(Error::Shape("template layer count differs from optimizer state".into()));
        }
        let correction = 1.0 - self.cfg.avg_decay.powi(self.step as i32);
        let mut out = template.clone();
        for (i, layer) in out.layers.iter_mut().enumerate() {
            copy_avg(&self.theta[i], layer.posterior.theta.data_mut(), correction)?;
            if let Some(slot) = &self.log_alpha[i] {
                copy_avg(slot, layer.posterior.log_alpha.data_mut(), correction)?;
            }
            copy_avg(&self.bias[i], &mut layer.bias, correction)?;
        }
        Ok(out)
    }
}

fn copy_avg(slot: &Slot, params: &mut [f64], correction: f64) -> Result<()> {
    if slot.avg.len() != params.len() {
        return Err(Error::Shape("parameter group size changed under the optimizer".into()));
    }
    for (p, a) in params.iter_mut().zip(&slot.avg) {
        *p = a / correction;
    }
    Ok(())
}

fn update_group(
    slot: &mut Slot,
    params: &mut [f64],
    grads: &[f64],
    t: u64,
    cfg: AdamConfig,
    clip_to_zero: bool,
    path: &str,
) -> Result<()> {
    if grads.len() != params.len() || slot.m.len() != params.len() {
        return Err(Error::Shape(format!("gradient size mismatch for {path}")));
    }
    for g in grads {
        if !g.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {path}")));
        }
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * grads[i];
        slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let mhat = slot.m[i] / bc1;
        let vhat = slot.v[i] / bc2;
        params[i] += cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        if clip_to_zero && params[i] > 0.0 {
            params[i] = 0.0;
        }
        if !params[i].is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite parameter after update step {t} for {path}"
            )));
        }
        slot.avg[i] = cfg.avg_decay * slot.avg[i] + (1.0 - cfg.avg_decay) * params[i];
    }
    Ok(())
}
