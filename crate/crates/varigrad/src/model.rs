use crate::error::{Error, Result};
use crate::layers::{DenseVariationalLayer, EstimatorMode, ForwardCache, LayerGrads, NoiseModel};
use crate::posterior::{neg_kl_total, Granularity, KlMode};
use crate::rng::RngStream;
use crate::tensor::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    ReLU,
    Softplus,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::ReLU => x.max(0.0),
            // Overflow-safe: ln(1 + e^x) = max(x, 0) + ln(1 + e^(-|x|)).
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::ReLU => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Softplus => 1.0 / (1.0 + (-x).exp()),
        }
    }
}

/// Construction recipe for one layer of an Mlp.
#[derive(Debug, Clone, Copy)]
pub struct LayerSpec {
    pub noise: NoiseModel,
    pub granularity: Granularity,
    pub alpha0: f64,
}

/// Fully connected classifier. The first layer's noise multiplies the raw
/// inputs, so input dropout is configured as that layer's noise model.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<DenseVariationalLayer>,
    pub activation: Activation,
}

/// Per-layer forward caches plus the hidden pre-activations needed to chain
/// gradients through the nonlinearity.
#[derive(Debug, Clone)]
pub struct ModelCache {
    pub layer_caches: Vec<ForwardCache>,
    preacts: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub layers: Vec<LayerGrads>,
}

/// One evaluation of the stochastic training objective.
///
/// elbo is computed as expected_ll_estimate + neg_kl, so the decomposition
/// identity holds exactly.
#[derive(Debug, Clone)]
pub struct ElboReport {
    pub expected_ll_estimate: f64,
    pub neg_kl: f64,
    pub elbo: f64,
    pub per_layer_kl: Vec<f64>,
}

/// Test-time prediction policy.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PredictMode {
    /// Deterministic pass through the posterior means.
    MeanWeights,
    /// Average the softmax outputs of this many stochastic passes.
    McAverage(usize),
}

impl Mlp {
    pub fn new(
        dims: &[usize],
        activation: Activation,
        specs: &[LayerSpec],
        rng: &mut RngStream,
    ) -> Result<Mlp> {
        if dims.len() < 2 {
            return Err(Error::Config("a network needs at least input and output widths".into()));
        }
        if specs.len() != dims.len() - 1 {
            return Err(Error::Config(format!(
                "{} layer specs for {} layers",
                specs.len(),
                dims.len() - 1
            )));
        }
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            layers.push(DenseVariationalLayer::new(
                dims[i],
                dims[i + 1],
                spec.noise,
                spec.granularity,
                spec.alpha0,
                rng,
            )?);
        }
        Ok(Mlp { layers, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].output_dim()
    }

    /// Stochastic pass through every layer with one shared estimator mode.
    pub fn forward(
        &self,
        x: &Matrix,
        mode: EstimatorMode,
        rng: &mut RngStream,
    ) -> Result<(Matrix, ModelCache)> {
        let n_layers = self.layers.len();
        let mut layer_caches = Vec::with_capacity(n_layers);
        let mut preacts = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let (b, cache) = layer.forward(&h, mode, rng)?;
            layer_caches.push(cache);
            if i + 1 < n_layers {
                preacts.push(b.clone());
                h = b.map(|v| self.activation.apply(v));
            } else {
                h = b;
            }
        }
        Ok((h, ModelCache { layer_caches, preacts }))
    }

    /// Backpropagate d(loss)/d(logits) through the cached pass; returns
    /// per-layer parameter gradients (gradients of the same scalar loss).
    pub fn backward(&self, cache: &ModelCache, d_logits: &Matrix) -> Result<ModelGrads> {
        let n_layers = self.layers.len();
        if cache.layer_caches.len() != n_layers {
            return Err(Error::Config("model cache does not match layer count".into()));
        }
        let mut grads: Vec<Option<LayerGrads>> = vec![None; n_layers];
        let mut upstream = d_logits.clone();
        for i in (0..n_layers).rev() {
            let g = self.layers[i].backward(&cache.layer_caches[i], &upstream)?;
            if i > 0 {
                let deriv = cache.preacts[i - 1].map(|v| self.activation.derivative(v));
                upstream = g.dinput.hadamard(&deriv)?;
            }
            grads[i] = Some(g);
        }
        Ok(ModelGrads { layers: grads.into_iter().map(|g| g.expect("filled above")).collect() })
    }
}

/// Total log-likelihood of the labeled rows under a softmax over the logits,
/// stabilized by max-subtraction. The returned gradient is softmax minus
/// one-hot, i.e. the gradient of the NEGATIVE total log-likelihood; callers
/// maximizing must negate it.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (m, c) = logits.shape();
    if labels.len() != m {
        return Err(Error::Shape(format!("{} labels for {m} rows", labels.len())));
    }
    logits.ensure_finite("logits")?;
    let mut grad = Matrix::zeros(m, c);
    let mut total = 0.0;
    for row in 0..m {
        let y = labels[row];
        if y >= c {
            return Err(Error::Domain(format!("label {y} out of range for {c} classes")));
        }
        let rowv = logits.row(row);
        let mx = rowv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in rowv {
            z += (v - mx).exp();
        }
        total += rowv[y] - mx - z.ln();
        for j in 0..c {
            let p = (rowv[j] - mx).exp() / z;
            grad.set(row, j, p - if j == y { 1.0 } else { 0.0 });
        }
    }
    Ok((total, grad))
}

/// Row-wise softmax probabilities.
pub fn softmax_rows(logits: &Matrix) -> Matrix {
    let (m, c) = logits.shape();
    let mut out = Matrix::zeros(m, c);
    for row in 0..m {
        let rowv = logits.row(row);
        let mx = rowv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in rowv {
            z += (v - mx).exp();
        }
        for j in 0..c {
            out.set(row, j, (rowv[j] - mx).exp() / z);
        }
    }
    out
}

fn check_batch(model: &Mlp, x: &Matrix, y: &[usize], n_total: usize) -> Result<()> {
    if x.rows() == 0 {
        return Err(Error::Domain("empty minibatch".into()));
    }
    if y.len() != x.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", y.len(), x.rows())));
    }
    if n_total < x.rows() {
        return Err(Error::Domain(format!(
            "dataset size {n_total} below minibatch size {}",
            x.rows()
        )));
    }
    if x.cols() != model.input_dim() {
        return Err(Error::Shape(format!(
            "input width {} does not match model input {}",
            x.cols(),
            model.input_dim()
        )));
    }
    Ok(())
}

fn kl_terms(model: &Mlp, kl_mode: KlMode, kl_scale: f64, want_grads: bool) -> Result<(f64, Vec<f64>, Vec<Option<Matrix>>)> {
    let mut total = 0.0;
    let mut per_layer = Vec::with_capacity(model.layers.len());
    let mut grads = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        if layer.is_adaptive() {
            let (v, g) = neg_kl_total(&layer.posterior, kl_mode, kl_scale)?;
            if want_grads && g.is_none() {
                return Err(Error::Config(
                    "quadrature evaluation of the noise prior term has no gradient; \
                     use the polynomial or lower-bound mode for training"
                        .into(),
                ));
            }
            total += v;
            per_layer.push(v);
            grads.push(g);
        } else {
            // Fixed or absent noise contributes a parameter-independent
            // constant that is dropped from the reported objective.
            per_layer.push(0.0);
            grads.push(None);
        }
    }
    Ok((total, per_layer, grads))
}

/// One SGVB evaluation of the variational objective on a minibatch, with
/// gradients of the realized stochastic estimate w.r.t. every parameter
/// (ascent direction: positive gradients increase the objective).
pub fn elbo_minibatch(
    model: &Mlp,
    x: &Matrix,
    y: &[usize],
    n_total: usize,
    mode: EstimatorMode,
    kl_mode: KlMode,
    kl_scale: f64,
    rng: &mut RngStream,
) -> Result<(ElboReport, ModelGrads)> {
    check_batch(model, x, y, n_total)?;
    let m = x.rows();
    let scale = n_total as f64 / m as f64;
    let (logits, cache) = model.forward(x, mode, rng)?;
    let (ll, nll_grad) = softmax_cross_entropy(&logits, y)?;
    let expected_ll_estimate = scale * ll;
    // The layer chain computes gradients of whatever scalar d_logits
    // differentiates; feed it the ELBO's likelihood term directly.
    let d_logits = nll_grad.scale(-scale);
    let mut grads = model.backward(&cache, &d_logits)?;
    let (neg_kl, per_layer_kl, kl_grads) = kl_terms(model, kl_mode, kl_scale, true)?;
    for (layer_grads, kl_grad) in grads.layers.iter_mut().zip(kl_grads) {
        if let Some(kg) = kl_grad {
            match &mut layer_grads.dlog_alpha {
                Some(dla) => *dla = dla.add(&kg)?,
                None => layer_grads.dlog_alpha = Some(kg),
            }
        }
    }
    let elbo = expected_ll_estimate + neg_kl;
    Ok((ElboReport { expected_ll_estimate, neg_kl, elbo, per_layer_kl }, grads))
}

/// Objective value only (no gradients), for finite-difference probes: with a
/// cloned rng the realized noise is identical across calls, making the value
/// a deterministic function of the parameters.
pub fn elbo_value(
    model: &Mlp,
    x: &Matrix,
    y: &[usize],
    n_total: usize,
    mode: EstimatorMode,
    kl_mode: KlMode,
    kl_scale: f64,
    rng: &mut RngStream,
) -> Result<f64> {
    check_batch(model, x, y, n_total)?;
    let scale = n_total as f64 / x.rows() as f64;
    let (logits, _) = model.forward(x, mode, rng)?;
    let (ll, _) = softmax_cross_entropy(&logits, y)?;
    let (neg_kl, _, _) = kl_terms(model, kl_mode, kl_scale, false)?;
    Ok(scale * ll + neg_kl)
}

/// Class probabilities for every row of x.
pub fn predict(model: &Mlp, x: &Matrix, mode: PredictMode, rng: &mut RngStream) -> Result<Matrix> {
    match mode {
        PredictMode::MeanWeights => {
            let (logits, _) = model.forward(x, EstimatorMode::NoNoise, rng)?;
            Ok(softmax_rows(&logits))
        }
        PredictMode::McAverage(t) => {
            if t == 0 {
                return Err(Error::Domain("Monte Carlo averaging needs at least one pass".into()));
            }
            let mut acc = Matrix::zeros(x.rows(), model.output_dim());
            for _ in 0..t {
                let (logits, _) = model.forward(x, EstimatorMode::LocalReparam, rng)?;
                acc = acc.add(&softmax_rows(&logits))?;
            }
            Ok(acc.scale(1.0 / t as f64))
        }
    }
}

/// Fraction of rows whose argmax probability disagrees with the label.
pub fn classification_error(
    model: &Mlp,
    x: &Matrix,
    y: &[usize],
    mode: PredictMode,
    rng: &mut RngStream,
) -> Result<f64> {
    if y.len() != x.rows() {
        return Err(Error::Shape(format!("{} labels for {} rows", y.len(), x.rows())));
    }
    if x.rows() == 0 {
        return Err(Error::Domain("empty evaluation set".into()));
    }
    let probs = predict(model, x, mode, rng)?;
    let mut wrong = 0usize;
    for row in 0..x.rows() {
        let rowv = probs.row(row);
        let mut best = 0usize;
        for (j, &v) in rowv.iter().enumerate() {
            if v > rowv[best] {
                best = j;
            }
        }
        if best != y[row] {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / x.rows() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(noise: NoiseModel, granularity: Granularity, alpha0: f64) -> LayerSpec {
        LayerSpec { noise, granularity, alpha0 }
    }

    fn small_model(seed: u64) -> Mlp {
        let mut rng = RngStream::new(seed, 0);
        Mlp::new(
            &[3, 4, 2],
            Activation::Softplus,
            &[
                spec(NoiseModel::IndependentWeight, Granularity::PerWeight, 0.5),
                spec(NoiseModel::CorrelatedScale, Granularity::PerInputNeuron, 0.5),
            ],
            &mut rng,
        )
        .unwrap()
    }

    fn batch(m: usize, d: usize, c: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = RngStream::new(seed, 1);
        let mut x = Matrix::zeros(m, d);
        for v in x.data_mut() {
            *v = 2.0 * rng.next_uniform() - 1.0;
        }
        let y = (0..m).map(|_| rng.next_index(c)).collect();
        (x, y)
    }

    #[test]
    fn uniform_logits_score_log_one_over_c() {
        let logits = Matrix::filled(3, 10, 0.7);
        let labels = [0usize, 4, 9];
        let (ll, _) = softmax_cross_entropy(&logits, &labels).unwrap();
        assert!((ll / 3.0 - (0.1f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        let mut logits = Matrix::zeros(1, 3);
        logits.set(0, 1, 1000.0);
        let (ll, grad) = softmax_cross_entropy(&logits, &[1]).unwrap();
        assert!(ll <= 0.0 && ll > -1e-6, "log-likelihood {ll}");
        grad.ensure_finite("gradient").unwrap();
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let (mut logits, _) = batch(4, 3, 3, 5);
        let labels = [2usize, 0, 1, 1];
        let (_, grad) = softmax_cross_entropy(&logits, &labels).unwrap();
        let h = 1e-5;
        for idx in 0..logits.data().len() {
            let orig = logits.data()[idx];
            logits.data_mut()[idx] = orig + h;
            let up = softmax_cross_entropy(&logits, &labels).unwrap().0;
            logits.data_mut()[idx] = orig - h;
            let down = softmax_cross_entropy(&logits, &labels).unwrap().0;
            logits.data_mut()[idx] = orig;
            // grad is of the negative log-likelihood.
            let fd = -(up - down) / (2.0 * h);
            let an = grad.data()[idx];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            assert!(rel < 1e-6, "entry {idx}: {an} vs {fd}");
        }
    }

    #[test]
    fn out_of_range_labels_are_rejected() {
        let logits = Matrix::zeros(2, 3);
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0, 3]),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            softmax_cross_entropy(&logits, &[0]),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn elbo_decomposition_identity_holds() {
        let model = small_model(2);
        let (x, y) = batch(5, 3, 2, 3);
        let mut rng = RngStream::new(10, 2);
        let (report, _) = elbo_minibatch(
            &model,
            &x,
            &y,
            20,
            EstimatorMode::LocalReparam,
            KlMode::Polynomial,
            1.0 / 3.0,
            &mut rng,
        )
        .unwrap();
        assert!((report.elbo - (report.expected_ll_estimate + report.neg_kl)).abs() < 1e-12);
        assert!((report.neg_kl - report.per_layer_kl.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn vanishing_kl_scale_leaves_the_likelihood_term() {
        let model = small_model(4);
        let (x, y) = batch(5, 3, 2, 6);
        let mut rng = RngStream::new(11, 2);
        let (report, _) = elbo_minibatch(
            &model,
            &x,
            &y,
            20,
            EstimatorMode::NoNoise,
            KlMode::Polynomial,
            1e-300,
            &mut rng,
        )
        .unwrap();
        assert!((report.elbo - report.expected_ll_estimate).abs() < 1e-12);
    }

    #[test]
    fn duplicated_datapoint_scales_to_dataset_size() {
        let model = small_model(7);
        let (x1, _) = batch(1, 3, 2, 8);
        let mut x4 = Matrix::zeros(4, 3);
        for row in 0..4 {
            for col in 0..3 {
                x4.set(row, col, x1.get(0, col));
            }
        }
        let mut rng = RngStream::new(12, 2);
        let (logits, _) = model.forward(&x1, EstimatorMode::NoNoise, &mut rng).unwrap();
        let (single_ll, _) = softmax_cross_entropy(&logits, &[1]).unwrap();
        let (report, _) = elbo_minibatch(
            &model,
            &x4,
            &[1, 1, 1, 1],
            16,
            EstimatorMode::NoNoise,
            KlMode::Polynomial,
            1.0,
            &mut rng,
        )
        .unwrap();
        assert!((report.expected_ll_estimate - 16.0 * single_ll).abs() < 1e-9);
    }

    #[test]
    fn minibatch_estimator_averages_to_the_full_objective() {
        // Enumerating every single-point minibatch of a 16-point dataset
        // recovers the full-dataset log-likelihood exactly under NoNoise.
        let model = small_model(9);
        let (x, y) = batch(16, 3, 2, 10);
        let mut rng = RngStream::new(13, 2);
        let (logits, _) = model.forward(&x, EstimatorMode::NoNoise, &mut rng).unwrap();
        let (full_ll, _) = softmax_cross_entropy(&logits, &y).unwrap();
        let mut mean = 0.0;
        for i in 0..16 {
            let xi = Matrix::from_rows(&[x.row(i).to_vec()]).unwrap();
            let (report, _) = elbo_minibatch(
                &model,
                &xi,
                &y[i..i + 1],
                16,
                EstimatorMode::NoNoise,
                KlMode::Polynomial,
                1.0,
                &mut rng,
            )
            .unwrap();
            mean += report.expected_ll_estimate / 16.0;
        }
        assert!((mean - full_ll).abs() < 1e-9, "mean {mean} vs full {full_ll}");
    }

    #[test]
    fn quadrature_mode_is_rejected_for_training_gradients() {
        let model = small_model(14);
        let (x, y) = batch(4, 3, 2, 15);
        let mut rng = RngStream::new(14, 2);
        let err = elbo_minibatch(
            &model,
            &x,
            &y,
            8,
            EstimatorMode::LocalReparam,
            KlMode::Quadrature,
            1.0,
            &mut rng,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn full_gradient_matches_finite_differences_on_a_two_layer_net() {
        let mut build_rng = RngStream::new(20, 0);
        let mut model = Mlp::new(
            &[4, 8, 3],
            Activation::Softplus,
            &[
                spec(NoiseModel::IndependentWeight, Granularity::PerWeight, 0.5),
                spec(NoiseModel::CorrelatedScale, Granularity::PerInputNeuron, 0.5),
            ],
            &mut build_rng,
        )
        .unwrap();
        for layer in &mut model.layers {
            for (j, b) in layer.bias.iter_mut().enumerate() {
                *b = 0.03 * (j as f64 + 1.0);
            }
        }
        let (x, y) = batch(3, 4, 3, 21);
        let rng = RngStream::new(500, 3);
        let mode = EstimatorMode::LocalReparam;
        let kl = KlMode::Polynomial;
        let (_, grads) = elbo_minibatch(&model, &x, &y, 12, mode, kl, 0.7, &mut rng.clone()).unwrap();
        let h = 1e-5;
        let value = |m: &Mlp| {
            elbo_value(m, &x, &y, 12, mode, kl, 0.7, &mut rng.clone()).unwrap()
        };
        for li in 0..model.layers.len() {
            for idx in 0..model.layers[li].posterior.theta.data().len() {
                let orig = model.layers[li].posterior.theta.data()[idx];
                model.layers[li].posterior.theta.data_mut()[idx] = orig + h;
                let up = value(&model);
                model.layers[li].posterior.theta.data_mut()[idx] = orig - h;
                let down = value(&model);
                model.layers[li].posterior.theta.data_mut()[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.layers[li].dtheta.data()[idx];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "layer {li} theta {idx}: {an} vs {fd}");
            }
            for idx in 0..model.layers[li].posterior.log_alpha.data().len() {
                let orig = model.layers[li].posterior.log_alpha.data()[idx];
                model.layers[li].posterior.log_alpha.data_mut()[idx] = orig + h;
                let up = value(&model);
                model.layers[li].posterior.log_alpha.data_mut()[idx] = orig - h;
                let down = value(&model);
                model.layers[li].posterior.log_alpha.data_mut()[idx] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.layers[li].dlog_alpha.as_ref().unwrap().data()[idx];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "layer {li} log_alpha {idx}: {an} vs {fd}");
            }
            for j in 0..model.layers[li].bias.len() {
                let orig = model.layers[li].bias[j];
                model.layers[li].bias[j] = orig + h;
                let up = value(&model);
                model.layers[li].bias[j] = orig - h;
                let down = value(&model);
                model.layers[li].bias[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.layers[li].dbias[j];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
                assert!(rel < 1e-4, "layer {li} bias {j}: {an} vs {fd}");
            }
        }
    }

    #[test]
    fn stochastic_modes_agree_on_the_mean_gradient() {
        // Single adaptive layer as its own classifier: all three sampling
        // strategies are unbiased estimates of the same expected gradient.
        let mut build_rng = RngStream::new(30, 0);
        let model = Mlp::new(
            &[3, 2],
            Activation::ReLU,
            &[spec(NoiseModel::IndependentWeight, Granularity::PerWeight, 0.5)],
            &mut build_rng,
        )
        .unwrap();
        let (x, y) = batch(2, 3, 2, 31);
        let modes = [
            EstimatorMode::LocalReparam,
            EstimatorMode::WeightPerDatapoint,
            EstimatorMode::WeightPerMinibatch,
        ];
        let draws = 10_000usize;
        let n_params = 6usize;
        let mut means = Vec::new();
        let mut ses = Vec::new();
        for (mi, mode) in modes.into_iter().enumerate() {
            let mut rng = RngStream::new(600 + mi as u64, 4);
            let mut sum = vec![0.0; n_params];
            let mut sumsq = vec![0.0; n_params];
            for _ in 0..draws {
                let (_, grads) = elbo_minibatch(
                    &model,
                    &x,
                    &y,
                    2,
                    mode,
                    KlMode::Polynomial,
                    1.0,
                    &mut rng,
                )
                .unwrap();
                for (i, &g) in grads.layers[0].dtheta.data().iter().enumerate() {
                    sum[i] += g;
                    sumsq[i] += g * g;
                }
            }
            let n = draws as f64;
            means.push(sum.iter().map(|s| s / n).collect::<Vec<_>>());
            ses.push(
                sum.iter()
                    .zip(&sumsq)
                    .map(|(s, sq)| (((sq - s * s / n) / (n - 1.0)) / n).sqrt())
                    .collect::<Vec<_>>(),
            );
        }
        for a in 0..3 {
            for b in (a + 1)..3 {
                for i in 0..n_params {
                    let diff = (means[a][i] - means[b][i]).abs();
                    let se = (ses[a][i] * ses[a][i] + ses[b][i] * ses[b][i]).sqrt();
                    assert!(
                        diff < 3.0 * se + 1e-12,
                        "modes {a}/{b} param {i}: means differ by {diff} (3 se = {})",
                        3.0 * se
                    );
                }
            }
        }
    }

    #[test]
    fn mean_weight_predictions_are_deterministic() {
        let model = small_model(40);
        let (x, _) = batch(6, 3, 2, 41);
        let mut rng1 = RngStream::new(1, 1);
        let mut rng2 = RngStream::new(2, 2);
        let p1 = predict(&model, &x, PredictMode::MeanWeights, &mut rng1).unwrap();
        let p2 = predict(&model, &x, PredictMode::MeanWeights, &mut rng2).unwrap();
        assert_eq!(p1, p2);
    }

    #[test]
    fn prediction_rows_are_probability_vectors() {
        let model = small_model(42);
        let (x, _) = batch(5, 3, 2, 43);
        let mut rng = RngStream::new(3, 3);
        for mode in [PredictMode::MeanWeights, PredictMode::McAverage(7)] {
            let p = predict(&model, &x, mode, &mut rng).unwrap();
            for row in 0..p.rows() {
                let s: f64 = p.row(row).iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "{mode:?} row {row} sums to {s}");
                assert!(p.row(row).iter().all(|&v| v >= 0.0));
            }
        }
        assert!(matches!(
            predict(&model, &x, PredictMode::McAverage(0), &mut rng),
            Err(Error::Domain(_))
        ));
    }

    #[test]
    fn averaged_sampling_approaches_the_mean_pass_as_noise_vanishes() {
        let mut build_rng = RngStream::new(44, 0);
        let model = Mlp::new(
            &[3, 4, 2],
            Activation::ReLU,
            &[
                spec(NoiseModel::IndependentWeight, Granularity::PerWeight, 1e-12),
                spec(NoiseModel::IndependentWeight, Granularity::PerWeight, 1e-12),
            ],
            &mut build_rng,
        )
        .unwrap();
        let (x, _) = batch(4, 3, 2, 45);
        let mut rng = RngStream::new(4, 4);
        let mean = predict(&model, &x, PredictMode::MeanWeights, &mut rng).unwrap();
        let mc = predict(&model, &x, PredictMode::McAverage(3), &mut rng).unwrap();
        assert!(mean.max_abs_diff(&mc) < 1e-5);
    }

    #[test]
    fn softplus_and_relu_behave_at_reference_points() {
        assert!((Activation::Softplus.apply(0.0) - 2f64.ln()).abs() < 1e-15);
        assert!((Activation::Softplus.apply(100.0) - 100.0).abs() < 1e-12);
        assert!(Activation::Softplus.apply(-100.0) < 1e-40);
        assert_eq!(Activation::ReLU.apply(-2.0), 0.0);
        assert_eq!(Activation::ReLU.apply(3.0), 3.0);
        let h = 1e-6;
        for x in [-2.0, -0.5, 0.3, 1.7] {
            let fd = (Activation::Softplus.apply(x + h) - Activation::Softplus.apply(x - h)) / (2.0 * h);
            assert!((Activation::Softplus.derivative(x) - fd).abs() < 1e-8);
        }
    }

    #[test]
    fn mismatched_construction_is_rejected() {
        let mut rng = RngStream::new(50, 0);
        assert!(matches!(
            Mlp::new(&[3], Activation::ReLU, &[], &mut rng),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            Mlp::new(
                &[3, 2],
                Activation::ReLU,
                &[
                    spec(NoiseModel::None, Granularity::PerLayer, 1.0),
                    spec(NoiseModel::None, Granularity::PerLayer, 1.0)
                ],
                &mut rng
            ),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn batch_preconditions_are_enforced() {
        let model = small_model(60);
        let (x, y) = batch(4, 3, 2, 61);
        let mut rng = RngStream::new(5, 5);
        assert!(matches!(
            elbo_minibatch(
                &model,
                &x,
                &y,
                3,
                EstimatorMode::NoNoise,
                KlMode::Polynomial,
                1.0,
                &mut rng
            ),
            Err(Error::Domain(_))
        ));
        let (wide, wy) = batch(4, 5, 2, 62);
        assert!(matches!(
            elbo_minibatch(
                &model,
                &wide,
                &wy,
                8,
                EstimatorMode::NoNoise,
                KlMode::Polynomial,
                1.0,
                &mut rng
            ),
            Err(Error::Shape(_))
        ));
    }
}
