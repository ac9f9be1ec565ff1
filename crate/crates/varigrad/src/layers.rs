use crate::error::{Error, Result};
use crate::posterior::{DropoutPosterior, Granularity, PosteriorKind};
use crate::rng::{sample_standard_normal, RngStream};
use crate::tensor::Matrix;

/// Noise model attached to a dense layer.
///
/// The first layer's noise multiplies the raw network input, so input
/// dropout is expressed by giving the first layer its own rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    /// Independent Gaussian noise per weight: w_ij ~ N(theta_ij, alpha theta_ij^2),
    /// with learnable alpha.
    IndependentWeight,
    /// One Gaussian scale per input neuron, w_i = s_i theta_i with
    /// s_i ~ N(1, alpha_i) and learnable alpha; equivalent to multiplying
    /// the layer input by N(1, alpha) noise, which correlates the noise on
    /// all weights sharing an input.
    CorrelatedScale,
    /// Classical binary dropout on the layer input, drop probability p.
    Binary { p: f64 },
    /// Gaussian multiplicative input noise with a fixed, non-learned alpha.
    GaussianFixed { alpha: f64 },
    /// Plain deterministic dense layer.
    None,
}

/// How the stochastic forward pass realizes the weight posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    /// Sample the post-linear activations from their marginal Gaussian
    /// (for scale noise: sample the input scales per row).
    LocalReparam,
    /// Sample a separate weight matrix for every minibatch row.
    WeightPerDatapoint,
    /// Sample one weight matrix shared by the whole minibatch.
    WeightPerMinibatch,
    /// Deterministic pass through the posterior means; ignores log_alpha.
    NoNoise,
}

impl EstimatorMode {
    pub fn is_weight_sampling(self) -> bool {
        matches!(self, EstimatorMode::WeightPerDatapoint | EstimatorMode::WeightPerMinibatch)
    }

    /// Stable name used in reports and on the command line.
    pub fn label(self) -> &'static str {
        match self {
            EstimatorMode::LocalReparam => "local",
            EstimatorMode::WeightPerDatapoint => "per-datapoint",
            EstimatorMode::WeightPerMinibatch => "per-minibatch",
            EstimatorMode::NoNoise => "none",
        }
    }
}

/// Dense layer with a multiplicative-noise posterior over its weights and
/// deterministic maximum-likelihood biases.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseVariationalLayer {
    pub posterior: DropoutPosterior,
    pub bias: Vec<f64>,
    pub noise: NoiseModel,
}

/// Everything backward needs to reproduce the exact stochastic pass that
/// forward realized. Weight-per-datapoint noise is regenerated from the
/// recorded stream rather than stored (M weight matrices would not fit).
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub mode: EstimatorMode,
    detail: CacheDetail,
}

#[derive(Debug, Clone)]
enum CacheDetail {
    Deterministic { a: Matrix },
    /// Independent weight noise via sampled activations.
    LrWeightNoise { a: Matrix, zeta: Matrix, sqrt_delta: Matrix },
    /// Per-row input scales xi (correlated scale noise or fixed Gaussian input noise).
    RowScale { a: Matrix, xi: Matrix },
    /// One multiplier matrix (1 + sqrt(alpha) eta) shared by the minibatch.
    MbWeightNoise { a: Matrix, mult: Matrix },
    /// One input-scale vector shared by the minibatch.
    MbRowScale { a: Matrix, scale: Vec<f64> },
    /// Fresh weights per row, regenerated from `base` substreams.
    PdWeightNoise { a: Matrix, base: RngStream },
    BinaryMask { a: Matrix, mask: Matrix, keep: f64 },
}

/// Gradients of a scalar loss w.r.t. one layer's parameters and its input,
/// summed over minibatch rows. dlog_alpha is None when the layer has no
/// learnable noise.
#[derive(Debug, Clone)]
pub struct LayerGrads {
    pub dtheta: Matrix,
    pub dlog_alpha: Option<Matrix>,
    pub dbias: Vec<f64>,
    pub dinput: Matrix,
}

impl DenseVariationalLayer {
    /// Fresh layer: theta symmetric-uniform scaled by 1/sqrt(K), biases 0,
    /// log_alpha at ln(alpha0) for learnable-noise models.
    pub fn new(
        k: usize,
        l: usize,
        noise: NoiseModel,
        granularity: Granularity,
        alpha0: f64,
        rng: &mut RngStream,
    ) -> Result<DenseVariationalLayer> {
        if k == 0 || l == 0 {
            return Err(Error::Shape("layer dimensions must be positive".into()));
        }
        match noise {
            NoiseModel::Binary { p } => {
                if !(0.0..1.0).contains(&p) {
                    return Err(Error::Domain(format!(
                        "binary dropout probability must lie in [0, 1), got {p}"
                    )));
                }
            }
            NoiseModel::GaussianFixed { alpha } => {
                if !(alpha > 0.0 && alpha <= 1.0) {
                    return Err(Error::Constraint(format!(
                        "fixed Gaussian dropout alpha must lie in (0, 1], got {alpha}"
                    )));
                }
            }
            _ => {}
        }
        let scale = 1.0 / (k as f64).sqrt();
        let mut theta = Matrix::zeros(k, l);
        for x in theta.data_mut() {
            *x = (2.0 * rng.next_uniform() - 1.0) * scale;
        }
        // Non-learnable models keep an inert 1x1 log_alpha of 0 so the
        // posterior invariants hold; it is never read by their passes.
        let (kind, gran, a0) = match noise {
            NoiseModel::IndependentWeight => {
                (PosteriorKind::IndependentWeightNoise, granularity, alpha0)
            }
            NoiseModel::CorrelatedScale => {
                (PosteriorKind::CorrelatedScaleNoise, granularity, alpha0)
            }
            NoiseModel::GaussianFixed { alpha } => {
                (PosteriorKind::CorrelatedScaleNoise, Granularity::PerLayer, alpha)
            }
            NoiseModel::Binary { .. } | NoiseModel::None => {
                (PosteriorKind::IndependentWeightNoise, Granularity::PerLayer, 1.0)
            }
        };
        let posterior = DropoutPosterior::new(theta, gran, kind, a0)?;
        Ok(DenseVariationalLayer { posterior, bias: vec![0.0; l], noise })
    }

    pub fn input_dim(&self) -> usize {
        self.posterior.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.posterior.output_dim()
    }

    /// Whether the noise parameters are learned (and thus carry a KL term).
    pub fn is_adaptive(&self) -> bool {
        matches!(self.noise, NoiseModel::IndependentWeight | NoiseModel::CorrelatedScale)
    }

    /// Mean noise level for reporting: mean alpha for models that carry one,
    /// the variance-matched p/(1-p) for binary dropout, 0 for no noise.
    pub fn mean_alpha(&self) -> f64 {
        match self.noise {
            NoiseModel::Binary { p } => p / (1.0 - p),
            NoiseModel::None => 0.0,
            _ => {
                let d = self.posterior.log_alpha.data();
                d.iter().map(|x| x.exp()).sum::<f64>() / d.len() as f64
            }
        }
    }

    fn check_mode(&self, mode: EstimatorMode) -> Result<()> {
        if mode.is_weight_sampling() && !self.is_adaptive() {
            return Err(Error::Config(format!(
                "estimator mode {mode:?} needs multiplicative weight noise, layer has {:?}",
                self.noise
            )));
        }
        Ok(())
    }

    pub fn forward(
        &self,
        a: &Matrix,
        mode: EstimatorMode,
        rng: &mut RngStream,
    ) -> Result<(Matrix, ForwardCache)> {
        self.posterior.validate()?;
        for b in &self.bias {
            if !b.is_finite() {
                return Err(Error::Numeric("layer bias is not finite".into()));
            }
        }
        if a.cols() != self.input_dim() {
            return Err(Error::Shape(format!(
                "input has {} columns, layer expects {}",
                a.cols(),
                self.input_dim()
            )));
        }
        a.ensure_finite("layer input")?;
        self.check_mode(mode)?;
        let theta = &self.posterior.theta;
        let m = a.rows();
        let (k, l) = theta.shape();

        if mode == EstimatorMode::NoNoise || self.noise == NoiseModel::None {
            let mut b = a.matmul(theta)?;
            b.add_row_vector(&self.bias)?;
            return Ok((b, ForwardCache { mode, detail: CacheDetail::Deterministic { a: a.clone() } }));
        }

        let (mut b, detail) = match (self.noise, mode) {
            (NoiseModel::IndependentWeight, EstimatorMode::LocalReparam) => {
                let gamma = a.matmul(theta)?;
                let delta = a.square().matmul(&self.posterior.sigma2())?;
                let sqrt_delta = delta.sqrt()?;
                let zeta = sample_standard_normal(m, l, rng);
                let mut b = gamma;
                for ((bv, sd), z) in
                    b.data_mut().iter_mut().zip(sqrt_delta.data()).zip(zeta.data())
                {
                    *bv += sd * z;
                }
                (b, CacheDetail::LrWeightNoise { a: a.clone(), zeta, sqrt_delta })
            }
            (NoiseModel::IndependentWeight, EstimatorMode::WeightPerMinibatch) => {
                let eta = sample_standard_normal(k, l, rng);
                let alpha = self.posterior.alpha_full();
                let mut mult = eta;
                for (mv, al) in mult.data_mut().iter_mut().zip(alpha.data()) {
                    *mv = 1.0 + al.sqrt() * *mv;
                }
                let w = theta.hadamard(&mult)?;
                (a.matmul(&w)?, CacheDetail::MbWeightNoise { a: a.clone(), mult })
            }
            (NoiseModel::IndependentWeight, EstimatorMode::WeightPerDatapoint) => {
                let id = rng.next_u64();
                let base = rng.substream(id);
                let sqrt_alpha = self.posterior.alpha_full().sqrt()?;
                let mut b = Matrix::zeros(m, l);
                for row in 0..m {
                    let mut s = base.substream(row as u64);
                    for i in 0..k {
                        let a_mi = a.get(row, i);
                        for j in 0..l {
                            let mult = 1.0 + sqrt_alpha.get(i, j) * s.next_normal();
                            let w = theta.get(i, j) * mult;
                            *b.at_mut(row, j) += a_mi * w;
                        }
                    }
                }
                (b, CacheDetail::PdWeightNoise { a: a.clone(), base })
            }
            (
                NoiseModel::CorrelatedScale,
                EstimatorMode::LocalReparam | EstimatorMode::WeightPerDatapoint,
            )
            | (NoiseModel::GaussianFixed { .. }, EstimatorMode::LocalReparam) => {
                let sd: Vec<f64> =
                    self.posterior.alpha_rows().iter().map(|al| al.sqrt()).collect();
                let mut xi = Matrix::zeros(m, k);
                for row in 0..m {
                    for i in 0..k {
                        xi.set(row, i, 1.0 + sd[i] * rng.next_normal());
                    }
                }
                let ax = a.hadamard(&xi)?;
                (ax.matmul(theta)?, CacheDetail::RowScale { a: a.clone(), xi })
            }
            (NoiseModel::CorrelatedScale, EstimatorMode::WeightPerMinibatch) => {
                let scale: Vec<f64> = self
                    .posterior
                    .alpha_rows()
                    .iter()
                    .map(|al| 1.0 + al.sqrt() * rng.next_normal())
                    .collect();
                let mut ax = a.clone();
                for row in 0..m {
                    for (i, s) in scale.iter().enumerate() {
                        *ax.at_mut(row, i) *= s;
                    }
                }
                (ax.matmul(theta)?, CacheDetail::MbRowScale { a: a.clone(), scale })
            }
            (NoiseModel::Binary { p }, EstimatorMode::LocalReparam) => {
                let (a_tilde, mask) = forward_binary_dropout(a, p, rng)?;
                let b = a_tilde.matmul(theta)?;
                (b, CacheDetail::BinaryMask { a: a.clone(), mask, keep: 1.0 - p })
            }
            (noise, mode) => {
                return Err(Error::Config(format!(
                    "estimator mode {mode:?} is not defined for noise model {noise:?}"
                )));
            }
        };
        b.add_row_vector(&self.bias)?;
        b.ensure_finite("layer output")?;
        Ok((b, ForwardCache { mode, detail }))
    }

    /// Exact gradients of the realized stochastic pass, summed over rows.
    pub fn backward(&self, cache: &ForwardCache, dl_db: &Matrix) -> Result<LayerGrads> {
        let theta = &self.posterior.theta;
        let (k, l) = theta.shape();
        let a = cache.input();
        let m = a.rows();
        if dl_db.shape() != (m, l) {
            return Err(Error::Shape(format!(
                "output gradient has shape {:?}, expected {:?}",
                dl_db.shape(),
                (m, l)
            )));
        }
        dl_db.ensure_finite("output gradient")?;
        let dbias = dl_db.col_sums();
        // Zeros for adaptive layers in deterministic passes, so optimizer
        // buffers always see a gradient of the stored shape.
        let zero_dla = || -> Option<Matrix> {
            if self.is_adaptive() {
                let (r, c) = self.posterior.log_alpha.shape();
                Some(Matrix::zeros(r, c))
            } else {
                None
            }
        };

        let grads = match (&cache.detail, self.noise) {
            (CacheDetail::Deterministic { a }, _) => {
                let dtheta = a.transpose().matmul(dl_db)?;
                let dinput = dl_db.matmul(&theta.transpose())?;
                LayerGrads { dtheta, dlog_alpha: zero_dla(), dbias, dinput }
            }
            (CacheDetail::LrWeightNoise { a, zeta, sqrt_delta }, NoiseModel::IndependentWeight) => {
                // t = dL/d(delta): zero where delta is zero, since the
                // activation is deterministic there.
                let mut t = Matrix::zeros(m, l);
                for idx in 0..m * l {
                    let sd = sqrt_delta.data()[idx];
                    if sd != 0.0 {
                        t.data_mut()[idx] = dl_db.data()[idx] * zeta.data()[idx] / (2.0 * sd);
                    }
                }
                let sigma2 = self.posterior.sigma2();
                let alpha = self.posterior.alpha_full();
                let dsigma2 = a.square().transpose().matmul(&t)?;
                let mut dtheta = a.transpose().matmul(dl_db)?;
                for i in 0..k {
                    for j in 0..l {
                        *dtheta.at_mut(i, j) +=
                            2.0 * dsigma2.get(i, j) * alpha.get(i, j) * theta.get(i, j);
                    }
                }
                let dla_pw = dsigma2.hadamard(&sigma2)?;
                let mut dinput = dl_db.matmul(&theta.transpose())?;
                let t_s2 = t.matmul(&sigma2.transpose())?;
                for (dv, (av, tv)) in
                    dinput.data_mut().iter_mut().zip(a.data().iter().zip(t_s2.data()))
                {
                    *dv += 2.0 * av * tv;
                }
                LayerGrads {
                    dtheta,
                    dlog_alpha: Some(self.posterior.reduce_per_weight(&dla_pw)?),
                    dbias,
                    dinput,
                }
            }
            (CacheDetail::MbWeightNoise { a, mult }, NoiseModel::IndependentWeight) => {
                let h = a.transpose().matmul(dl_db)?;
                let dtheta = h.hadamard(mult)?;
                let mut dla_pw = Matrix::zeros(k, l);
                for idx in 0..k * l {
                    dla_pw.data_mut()[idx] =
                        h.data()[idx] * theta.data()[idx] * (mult.data()[idx] - 1.0) / 2.0;
                }
                let w = theta.hadamard(mult)?;
                let dinput = dl_db.matmul(&w.transpose())?;
                LayerGrads {
                    dtheta,
                    dlog_alpha: Some(self.posterior.reduce_per_weight(&dla_pw)?),
                    dbias,
                    dinput,
                }
            }
            (CacheDetail::PdWeightNoise { a, base }, NoiseModel::IndependentWeight) => {
                let sqrt_alpha = self.posterior.alpha_full().sqrt()?;
                let mut dtheta = Matrix::zeros(k, l);
                let mut dla_pw = Matrix::zeros(k, l);
                let mut dinput = Matrix::zeros(m, k);
                for row in 0..m {
                    // Same substream and draw order as the forward pass.
                    let mut s = base.substream(row as u64);
                    for i in 0..k {
                        let a_mi = a.get(row, i);
                        let mut dinp = 0.0;
                        for j in 0..l {
                            let mult = 1.0 + sqrt_alpha.get(i, j) * s.next_normal();
                            let r = dl_db.get(row, j);
                            let th = theta.get(i, j);
                            *dtheta.at_mut(i, j) += a_mi * r * mult;
                            *dla_pw.at_mut(i, j) += a_mi * r * th * (mult - 1.0) / 2.0;
                            dinp += r * th * mult;
                        }
                        dinput.set(row, i, dinp);
                    }
                }
                LayerGrads {
                    dtheta,
                    dlog_alpha: Some(self.posterior.reduce_per_weight(&dla_pw)?),
                    dbias,
                    dinput,
                }
            }
            (CacheDetail::RowScale { a, xi }, NoiseModel::CorrelatedScale)
            | (CacheDetail::RowScale { a, xi }, NoiseModel::GaussianFixed { .. }) => {
                let g = dl_db.matmul(&theta.transpose())?;
                let dtheta = a.hadamard(xi)?.transpose().matmul(dl_db)?;
                let dinput = g.hadamard(xi)?;
                let dlog_alpha = if self.is_adaptive() {
                    let mut per_row = vec![0.0; k];
                    for row in 0..m {
                        for (i, acc) in per_row.iter_mut().enumerate() {
                            let dxi = g.get(row, i) * a.get(row, i);
                            *acc += dxi * (xi.get(row, i) - 1.0) / 2.0;
                        }
                    }
                    Some(self.posterior.reduce_per_row(&per_row)?)
                } else {
                    None
                };
                LayerGrads { dtheta, dlog_alpha, dbias, dinput }
            }
            (CacheDetail::MbRowScale { a, scale }, NoiseModel::CorrelatedScale) => {
                let g = dl_db.matmul(&theta.transpose())?;
                let mut ax = a.clone();
                for row in 0..m {
                    for (i, s) in scale.iter().enumerate() {
                        *ax.at_mut(row, i) *= s;
                    }
                }
                let dtheta = ax.transpose().matmul(dl_db)?;
                let mut dinput = g.clone();
                for row in 0..m {
                    for (i, s) in scale.iter().enumerate() {
                        *dinput.at_mut(row, i) *= s;
                    }
                }
                let mut per_row = vec![0.0; k];
                for row in 0..m {
                    for (i, acc) in per_row.iter_mut().enumerate() {
                        *acc += g.get(row, i) * a.get(row, i) * (scale[i] - 1.0) / 2.0;
                    }
                }
                LayerGrads {
                    dtheta,
                    dlog_alpha: Some(self.posterior.reduce_per_row(&per_row)?),
                    dbias,
                    dinput,
                }
            }
            (CacheDetail::BinaryMask { a, mask, keep }, NoiseModel::Binary { .. }) => {
                let a_tilde = a.hadamard(mask)?.scale(1.0 / keep);
                let dtheta = a_tilde.transpose().matmul(dl_db)?;
                let dinput = dl_db.matmul(&theta.transpose())?.hadamard(mask)?.scale(1.0 / keep);
                LayerGrads { dtheta, dlog_alpha: None, dbias, dinput }
            }
            (detail, noise) => {
                return Err(Error::Config(format!(
                    "forward cache {} does not match layer noise model {noise:?}",
                    detail.name()
                )));
            }
        };
        Ok(grads)
    }
}

impl ForwardCache {
    pub fn input(&self) -> &Matrix {
        match &self.detail {
            CacheDetail::Deterministic { a }
            | CacheDetail::LrWeightNoise { a, .. }
            | CacheDetail::RowScale { a, .. }
            | CacheDetail::MbWeightNoise { a, .. }
            | CacheDetail::MbRowScale { a, .. }
            | CacheDetail::PdWeightNoise { a, .. }
            | CacheDetail::BinaryMask { a, .. } => a,
        }
    }
}

impl CacheDetail {
    fn name(&self) -> &'static str {
        match self {
            CacheDetail::Deterministic { .. } => "deterministic",
            CacheDetail::LrWeightNoise { .. } => "sampled-activation weight noise",
            CacheDetail::RowScale { .. } => "per-row input scales",
            CacheDetail::MbWeightNoise { .. } => "shared weight noise",
            CacheDetail::MbRowScale { .. } => "shared input scales",
            CacheDetail::PdWeightNoise { .. } => "per-row weight noise",
            CacheDetail::BinaryMask { .. } => "binary mask",
        }
    }
}

/// Binary dropout on an activation matrix: zero entries with probability p
/// and rescale survivors by 1/(1-p) so the expectation is unchanged.
pub fn forward_binary_dropout(a: &Matrix, p: f64, rng: &mut RngStream) -> Result<(Matrix, Matrix)> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "dropout probability must lie in [0, 1), got {p}"
        )));
    }
    let keep = 1.0 - p;
    let mut mask = Matrix::zeros(a.rows(), a.cols());
    for x in mask.data_mut() {
        *x = if rng.next_uniform() < keep { 1.0 } else { 0.0 };
    }
    let mut a_tilde = a.clone();
    for (v, mk) in a_tilde.data_mut().iter_mut().zip(mask.data()) {
        *v *= mk / keep;
    }
    Ok((a_tilde, mask))
}

/// The Gaussian dropout rate whose noise variance matches binary dropout
/// with drop probability p: alpha = p/(1-p).
pub fn matched_gaussian_alpha(p: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Domain(format!(
            "dropout probability must lie in [0, 1), got {p}"
        )));
    }
    Ok(p / (1.0 - p))
}
