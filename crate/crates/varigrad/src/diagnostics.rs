//! Empirical gradient-variance measurement, variance-vs-batch-size scaling
//! curves, finite-difference gradient audits, and estimator wall-clock
//! benchmarks.

use std::time::Instant;

use crate::data::{Dataset, MinibatchSampler};
use crate::error::{Error, Result};
use crate::layers::{DenseVariationalLayer, EstimatorMode, NoiseModel};
use crate::model::{elbo_minibatch, Mlp, ModelGrads};
use crate::posterior::{Granularity, KlMode};
use crate::rng::RngStream;
use crate::tensor::Matrix;

/// Settings shared by one variance measurement cell.
#[derive(Debug, Clone)]
pub struct VarianceOptions {
    pub mode: EstimatorMode,
    pub m: usize,
    pub r: usize,
    pub with_replacement: bool,
    pub kl_mode: KlMode,
    pub kl_scale: f64,
}

/// One (layer, mode, M) measurement: the mean over the layer's theta
/// parameters of the per-parameter empirical variance of the gradient
/// estimate across `r` independent minibatch draws.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceCell {
    pub layer_index: usize,
    pub layer_label: String,
    pub mode: EstimatorMode,
    pub m: usize,
    pub r: usize,
    pub mean_variance: f64,
    pub stderr: f64,
}

/// Draw `r` minibatches with fresh noise, take the gradient of the
/// stochastic training objective each time, and summarize the spread of the
/// named layer's theta gradient.
///
/// `stderr` comes from splitting the draws into up to 10 equal groups,
/// computing the statistic per group, and taking the standard error of the
/// group values; it is 0 when fewer than 2 groups fit.
pub fn gradient_variance(
    model: &Mlp,
    data: &Dataset,
    layer_index: usize,
    opts: &VarianceOptions,
    rng: &mut RngStream,
) -> Result<VarianceCell> {
    if opts.r < 2 {
        return Err(Error::Stats(format!(
            "variance estimation needs at least 2 repeats, got {}",
            opts.r
        )));
    }
    if layer_index >= model.layers.len() {
        return Err(Error::Shape(format!(
            "layer index {layer_index} out of range for {} layers",
            model.layers.len()
        )));
    }
    let sampler_base = rng.substream(1);
    let mut noise_rng = rng.substream(2);
    let n_params = {
        let (k, l) = model.layers[layer_index].posterior.theta.shape();
        k * l
    };
    let mut draws: Vec<Vec<f64>> = Vec::with_capacity(opts.r);
    for draw in 0..opts.r {
        // A fresh sampler per draw makes the R minibatches independent; a
        // shared epoch permutation would correlate them (and mix batch
        // sizes when M does not divide N).
        let mut sampler = MinibatchSampler::new(
            opts.m,
            data.n(),
            opts.with_replacement,
            sampler_base.substream(draw as u64),
        )?;
        let (xm, ym, _) = sampler.next_batch(data)?;
        let (_, grads) = elbo_minibatch(
            model,
            &xm,
            &ym,
            data.n(),
            opts.mode,
            opts.kl_mode,
            opts.kl_scale,
            &mut noise_rng,
        )?;
        draws.push(grads.layers[layer_index].dtheta.data().to_vec());
    }
    let mean_variance = mean_param_variance(&draws, n_params);
    // Batch-means standard error of the statistic.
    let groups = 10.min(opts.r / 2);
    let stderr = if groups >= 2 {
        let per = opts.r / groups;
        let vals: Vec<f64> = (0..groups)
            .map(|g| mean_param_variance(&draws[g * per..(g + 1) * per], n_params))
            .collect();
        let mean = vals.iter().sum::<f64>() / groups as f64;
        let var =
            vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (groups as f64 - 1.0);
        (var / groups as f64).sqrt()
    } else {
        0.0
    };
    Ok(VarianceCell {
        layer_index,
        layer_label: format!("layer{layer_index}"),
        mode: opts.mode,
        m: opts.m,
        r: opts.r,
        mean_variance,
        stderr,
    })
}

fn mean_param_variance(draws: &[Vec<f64>], n_params: usize) -> f64 {
    let r = draws.len();
    let mut total = 0.0;
    for p in 0..n_params {
        // Shift by the first draw: identical draws then give exactly zero,
        // and the subtraction is better conditioned in general.
        let base = draws[0][p];
        let mean = draws.iter().map(|d| d[p] - base).sum::<f64>() / r as f64;
        let var = draws
            .iter()
            .map(|d| {
                let dev = (d[p] - base) - mean;
                dev * dev
            })
            .sum::<f64>()
            / (r as f64 - 1.0);
        total += var;
    }
    total / n_params as f64
}

/// Run `gradient_variance` across a list of batch sizes. Each cell uses an
/// rng substream derived from its position, so results do not depend on
/// evaluation order.
pub fn variance_scaling_curve(
    model: &Mlp,
    data: &Dataset,
    layer_index: usize,
    base: &VarianceOptions,
    m_list: &[usize],
    rng: &mut RngStream,
) -> Result<Vec<VarianceCell>> {
    let mut out = Vec::with_capacity(m_list.len());
    for (i, &m) in m_list.iter().enumerate() {
        if m > data.n() {
            return Err(Error::Config(format!(
                "batch size {m} exceeds the dataset size {}",
                data.n()
            )));
        }
        let opts = VarianceOptions { m, ..base.clone() };
        let mut cell_rng = rng.substream(i as u64);
        out.push(gradient_variance(model, data, layer_index, &opts, &mut cell_rng)?);
    }
    Ok(out)
}

/// CSV for a set of variance cells; pinned column order.
pub fn variance_csv(cells: &[VarianceCell]) -> String {
    let mut out = String::from("layer,mode,M,R,mean_variance,stderr\n");
    for c in cells {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            c.layer_label,
            c.mode.label(),
            c.m,
            c.r,
            c.mean_variance,
            c.stderr
        ));
    }
    out
}

/// Which scalar loss the finite-difference audit probes.
#[derive(Debug, Clone, Copy)]
pub enum LossProbe {
    /// The stochastic training objective itself.
    Elbo { mode: EstimatorMode, kl_mode: KlMode, kl_scale: f64, n_total: usize },
    /// 0.5 * sum((logits - onehot)^2): a smooth deterministic stand-in that
    /// exercises the network pass without the softmax.
    SquaredError { mode: EstimatorMode },
}

/// Worst relative error for one parameter group of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupError {
    pub layer_index: usize,
    pub group: &'static str,
    pub max_rel_err: f64,
}

impl GroupError {
    fn update(&mut self, rel: f64) {
        if rel > self.max_rel_err {
            self.max_rel_err = rel;
        }
    }
}

/// Freeze the noise via a fixed rng stream, then compare analytic gradients
/// of the probe loss against central finite differences for every
/// parameter. Returns per-group worst relative errors.
pub fn finite_difference_audit(
    model: &Mlp,
    x: &Matrix,
    y: &[usize],
    probe: LossProbe,
    h: f64,
    rng: &RngStream,
) -> Result<Vec<GroupError>> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let (_, analytic) = probe_loss_and_grads(model, x, y, probe, rng, true)?;
    let analytic = analytic.expect("gradients requested");
    let mut work = model.clone();
    let mut report = Vec::new();
    for li in 0..model.layers.len() {
        let mut theta_err = GroupError { layer_index: li, group: "theta", max_rel_err: 0.0 };
        let n_theta = work.layers[li].posterior.theta.data().len();
        for p in 0..n_theta {
            let an = analytic.layers[li].dtheta.data()[p];
            let at = ParamRef { layer: li, group: ParamGroup::Theta, index: p };
            theta_err.update(relative_error(an, central_difference(&mut work, x, y, probe, rng, h, at)?));
        }
        report.push(theta_err);

        if let Some(dla) = &analytic.layers[li].dlog_alpha {
            let mut alpha_err =
                GroupError { layer_index: li, group: "log_alpha", max_rel_err: 0.0 };
            let n_alpha = work.layers[li].posterior.log_alpha.data().len();
            for p in 0..n_alpha {
                let an = dla.data()[p];
                let at = ParamRef { layer: li, group: ParamGroup::LogAlpha, index: p };
                alpha_err
                    .update(relative_error(an, central_difference(&mut work, x, y, probe, rng, h, at)?));
            }
            report.push(alpha_err);
        }

        let mut bias_err = GroupError { layer_index: li, group: "bias", max_rel_err: 0.0 };
        let n_bias = work.layers[li].bias.len();
        for p in 0..n_bias {
            let an = analytic.layers[li].dbias[p];
            let at = ParamRef { layer: li, group: ParamGroup::Bias, index: p };
            bias_err.update(relative_error(an, central_difference(&mut work, x, y, probe, rng, h, at)?));
        }
        report.push(bias_err);
    }
    Ok(report)
}

fn relative_error(an: f64, fd: f64) -> f64 {
    (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6)
}

#[derive(Clone, Copy)]
enum ParamGroup {
    Theta,
    LogAlpha,
    Bias,
}

#[derive(Clone, Copy)]
struct ParamRef {
    layer: usize,
    group: ParamGroup,
    index: usize,
}

fn param_mut(model: &mut Mlp, at: ParamRef) -> &mut f64 {
    let layer = &mut model.layers[at.layer];
    match at.group {
        ParamGroup::Theta => &mut layer.posterior.theta.data_mut()[at.index],
        ParamGroup::LogAlpha => &mut layer.posterior.log_alpha.data_mut()[at.index],
        ParamGroup::Bias => &mut layer.bias[at.index],
    }
}

fn central_difference(
    work: &mut Mlp,
    x: &Matrix,
    y: &[usize],
    probe: LossProbe,
    rng: &RngStream,
    h: f64,
    at: ParamRef,
) -> Result<f64> {
    let orig = *param_mut(work, at);
    *param_mut(work, at) = orig + h;
    let (up, _) = probe_loss_and_grads(work, x, y, probe, rng, false)?;
    *param_mut(work, at) = orig - h;
    let (down, _) = probe_loss_and_grads(work, x, y, probe, rng, false)?;
    *param_mut(work, at) = orig;
    Ok((up - down) / (2.0 * h))
}

/// Loss of the probe with noise frozen by cloning `rng`; optionally its
/// analytic parameter gradients.
fn probe_loss_and_grads(
    model: &Mlp,
    x: &Matrix,
    y: &[usize],
    probe: LossProbe,
    rng: &RngStream,
    want_grads: bool,
) -> Result<(f64, Option<ModelGrads>)> {
    let mut frozen = rng.clone();
    match probe {
        LossProbe::Elbo { mode, kl_mode, kl_scale, n_total } => {
            let (report, grads) =
                elbo_minibatch(model, x, y, n_total, mode, kl_mode, kl_scale, &mut frozen)?;
            Ok((report.elbo, if want_grads { Some(grads) } else { None }))
        }
        LossProbe::SquaredError { mode } => {
            let (logits, cache) = model.forward(x, mode, &mut frozen)?;
            let (m, c) = logits.shape();
            let mut loss = 0.0;
            let mut d_logits = Matrix::zeros(m, c);
            for r in 0..m {
                if y[r] >= c {
                    return Err(Error::Domain(format!("label {} out of range", y[r])));
                }
                for j in 0..c {
                    let target = if j == y[r] { 1.0 } else { 0.0 };
                    let diff = logits.get(r, j) - target;
                    loss += 0.5 * diff * diff;
                    *d_logits.at_mut(r, j) = diff;
                }
            }
            let grads = if want_grads { Some(model.backward(&cache, &d_logits)?) } else { None };
            Ok((loss, grads))
        }
    }
}

/// One timed cell of the estimator speed benchmark.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedEntry {
    pub mode: EstimatorMode,
    pub k: usize,
    pub l: usize,
    pub m: usize,
    pub median_seconds: f64,
    pub trials: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedReport {
    pub entries: Vec<SpeedEntry>,
    pub note: String,
}

/// Median wall-clock of one forward+backward of a single K x K layer with
/// learnable independent weight noise, per (K, mode) cell. One warmup
/// iteration runs before timing. Data loading is excluded so the comparison
/// isolates estimator cost.
pub fn estimator_speed_bench(
    k_list: &[usize],
    m: usize,
    modes: &[EstimatorMode],
    trials: usize,
    rng: &mut RngStream,
) -> Result<SpeedReport> {
    if trials < 3 {
        return Err(Error::Config(format!("speed benchmark needs at least 3 trials, got {trials}")));
    }
    if k_list.is_empty() || modes.is_empty() || m == 0 {
        return Err(Error::Config("speed benchmark needs widths, modes, and a batch size".into()));
    }
    let mut entries = Vec::with_capacity(k_list.len() * modes.len());
    for &k in k_list {
        let layer = DenseVariationalLayer::new(
            k,
            k,
            NoiseModel::IndependentWeight,
            Granularity::PerLayer,
            0.5,
            &mut rng.substream(k as u64),
        )?;
        let mut data_rng = rng.substream(1000 + k as u64);
        let a = Matrix::from_fn(m, k, |_, _| data_rng.next_uniform());
        let ones = Matrix::filled(m, k, 1.0);
        for &mode in modes {
            let mut noise_rng = rng.substream(2000 + k as u64);
            let mut times = Vec::with_capacity(trials);
            for trial in 0..=trials {
                let started = Instant::now();
                let (_, cache) = layer.forward(&a, mode, &mut noise_rng)?;
                let grads = layer.backward(&cache, &ones)?;
                let elapsed = started.elapsed().as_secs_f64();
                std::hint::black_box(&grads);
                if trial > 0 {
                    // Trial 0 is warmup.
                    times.push(elapsed.max(1e-9));
                }
            }
            times.sort_by(|a, b| a.partial_cmp(b).expect("elapsed times are finite"));
            let median_seconds = times[times.len() / 2];
            entries.push(SpeedEntry { mode, k, l: k, m, median_seconds, trials });
        }
    }
    Ok(SpeedReport {
        entries,
        note: format!(
            "median of {trials} forward+backward passes of one KxK layer, batch {m}, single thread"
        ),
    })
}

fn json_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            c if (c as u32) < 0x20 => out.push_str(&format!("\\u{:04x}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

/// JSON rendering of a speed report; stable key order.
pub fn speed_report_json(report: &SpeedReport) -> String {
    let mut out = String::from("{\n  \"entries\": [\n");
    for (i, e) in report.entries.iter().enumerate() {
        out.push_str(&format!(
            "    {{\"mode\": \"{}\", \"k\": {}, \"l\": {}, \"m\": {}, \"median_seconds\": {}, \"trials\": {}}}{}\n",
            e.mode.label(),
            e.k,
            e.l,
            e.m,
            e.median_seconds,
            e.trials,
            if i + 1 < report.entries.len() { "," } else { "" }
        ));
    }
    out.push_str(&format!("  ],\n  \"note\": \"{}\"\n}}\n", json_escape(&report.note)));
    out
}
