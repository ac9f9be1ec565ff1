//! Flat key-value run configuration.
//!
//! Config files are plain text: one `key = value` pair per line, `#` starts a
//! full-line comment, blank lines are ignored, later occurrences of a key win.
//! Every key can also be supplied on the command line, either through one of
//! the dedicated flags (`--seed`, `--mode`, ...) or through the generic
//! repeatable `--set key=value`; overrides funnel through the same typed
//! parser as the file, so a bad value fails identically either way.
//!
//! `RunConfig::echo` renders the fully-resolved configuration back out with
//! the keys sorted, and every command copies that echo into its output
//! directory so a run can always be reproduced from its artifacts alone.

use std::fmt::Write as _;
use std::path::Path;

use varigrad::{
    Activation, AdamConfig, EstimatorMode, Error, Granularity, KlMode, NoiseModel, PredictMode,
    Result,
};

/// Which dataset a run trains or measures on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Mnist,
}

/// Multiplicative-noise family applied to every dense layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    /// Correlated scale noise: one N(1, alpha) factor per input neuron
    /// (adaptive alpha).
    TypeA,
    /// Independent per-weight Gaussian noise N(theta, alpha theta^2)
    /// (adaptive alpha).
    TypeB,
    /// Classical binary dropout with fixed drop rate p.
    Binary,
    /// Gaussian input noise with fixed alpha = p/(1-p).
    GaussianFixed,
    /// No noise at all.
    None,
}

/// A fully typed, validated run configuration. Defaults are chosen so that
/// `varigrad train` with no config file completes a small synthetic run in
/// seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    // Dataset.
    pub dataset: DatasetKind,
    pub n_per_class: usize,
    pub dim: usize,
    pub classes: usize,
    pub separation: f64,
    pub data_seed: u64,
    pub n_val_per_class: usize,
    pub val_split: usize,

    // Model.
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub noise: NoiseKind,
    pub granularity: Granularity,
    pub input_p: f64,
    pub hidden_p: f64,

    // Objective and training.
    pub mode: EstimatorMode,
    pub kl: KlMode,
    pub kl_scale: f64,
    pub m: usize,
    pub epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub avg_decay: f64,
    pub seed: u64,
    pub out: String,
    pub with_replacement: bool,
    pub predict: PredictMode,

    // Variance command.
    pub var_r: usize,
    pub var_m: usize,
    pub var_layers: Vec<String>,
    pub var_modes: Vec<EstimatorMode>,
    pub checkpoint: String,
    pub fresh_train: bool,

    // Bench command.
    pub bench_dims: Vec<usize>,
    pub bench_m: usize,
    pub bench_trials: usize,
    pub bench_modes: Vec<EstimatorMode>,

    // KL-table command.
    pub kl_grid_min: f64,
    pub kl_grid_max: f64,
    pub kl_grid_points: usize,

    // Gradcheck command.
    pub fd_step: f64,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            dataset: DatasetKind::Synthetic,
            n_per_class: 200,
            dim: 8,
            classes: 4,
            separation: 2.0,
            data_seed: 1,
            n_val_per_class: 50,
            val_split: 10000,
            layer_widths: vec![32],
            activation: Activation::Softplus,
            noise: NoiseKind::TypeB,
            granularity: Granularity::PerLayer,
            input_p: 0.2,
            hidden_p: 0.5,
            mode: EstimatorMode::LocalReparam,
            kl: KlMode::Polynomial,
            kl_scale: 1.0,
            m: 100,
            epochs: 10,
            patience: 0,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            avg_decay: 0.999,
            seed: 42,
            out: "runs/latest".into(),
            with_replacement: true,
            predict: PredictMode::MeanWeights,
            var_r: 200,
            var_m: 100,
            var_layers: vec!["first".into(), "last".into()],
            var_modes: vec![
                EstimatorMode::NoNoise,
                EstimatorMode::LocalReparam,
                EstimatorMode::WeightPerDatapoint,
                EstimatorMode::WeightPerMinibatch,
            ],
            checkpoint: String::new(),
            fresh_train: false,
            bench_dims: vec![64, 256, 512],
            bench_m: 256,
            bench_trials: 5,
            bench_modes: vec![EstimatorMode::LocalReparam, EstimatorMode::WeightPerDatapoint],
            kl_grid_min: 1.0 / 19.0,
            kl_grid_max: 1.0,
            kl_grid_points: 100,
            fd_step: 1e-5,
        }
    }
}

fn bad(key: &str, value: &str, want: &str) -> Error {
    Error::Config(format!("config key '{key}': cannot parse '{value}' as {want}"))
}

fn parse_usize(key: &str, value: &str) -> Result<usize> {
    value.parse().map_err(|_| bad(key, value, "a nonnegative integer"))
}

fn parse_u64(key: &str, value: &str) -> Result<u64> {
    value.parse().map_err(|_| bad(key, value, "a nonnegative integer"))
}

fn parse_f64(key: &str, value: &str) -> Result<f64> {
    value.parse().map_err(|_| bad(key, value, "a number"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(bad(key, value, "true or false")),
    }
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    for item in value.split(',') {
        out.push(parse_usize(key, item.trim())?);
    }
    Ok(out)
}

pub fn parse_mode(key: &str, value: &str) -> Result<EstimatorMode> {
    match value {
        "local" => Ok(EstimatorMode::LocalReparam),
        "per-datapoint" => Ok(EstimatorMode::WeightPerDatapoint),
        "per-minibatch" => Ok(EstimatorMode::WeightPerMinibatch),
        "none" => Ok(EstimatorMode::NoNoise),
        _ => Err(bad(key, value, "one of local|per-datapoint|per-minibatch|none")),
    }
}

fn mode_str(mode: EstimatorMode) -> &'static str {
    match mode {
        EstimatorMode::LocalReparam => "local",
        EstimatorMode::WeightPerDatapoint => "per-datapoint",
        EstimatorMode::WeightPerMinibatch => "per-minibatch",
        EstimatorMode::NoNoise => "none",
    }
}

fn parse_mode_list(key: &str, value: &str) -> Result<Vec<EstimatorMode>> {
    let mut out = Vec::new();
    for item in value.split(',') {
        out.push(parse_mode(key, item.trim())?);
    }
    Ok(out)
}

fn parse_kl(key: &str, value: &str) -> Result<KlMode> {
    match value {
        "poly" => Ok(KlMode::Polynomial),
        "bound" => Ok(KlMode::LowerBound),
        "quad" => Ok(KlMode::Quadrature),
        _ => Err(bad(key, value, "one of poly|bound|quad")),
    }
}

fn kl_str(mode: KlMode) -> &'static str {
    match mode {
        KlMode::Polynomial => "poly",
        KlMode::LowerBound => "bound",
        KlMode::Quadrature => "quad",
    }
}

fn parse_noise(key: &str, value: &str) -> Result<NoiseKind> {
    match value {
        "typeA" => Ok(NoiseKind::TypeA),
        "typeB" => Ok(NoiseKind::TypeB),
        "binary" => Ok(NoiseKind::Binary),
        "gaussian-fixed" => Ok(NoiseKind::GaussianFixed),
        "none" => Ok(NoiseKind::None),
        _ => Err(bad(key, value, "one of typeA|typeB|binary|gaussian-fixed|none")),
    }
}

fn noise_str(noise: NoiseKind) -> &'static str {
    match noise {
        NoiseKind::TypeA => "typeA",
        NoiseKind::TypeB => "typeB",
        NoiseKind::Binary => "binary",
        NoiseKind::GaussianFixed => "gaussian-fixed",
        NoiseKind::None => "none",
    }
}

fn parse_granularity(key: &str, value: &str) -> Result<Granularity> {
    match value {
        "layer" => Ok(Granularity::PerLayer),
        "neuron" => Ok(Granularity::PerInputNeuron),
        "weight" => Ok(Granularity::PerWeight),
        _ => Err(bad(key, value, "one of layer|neuron|weight")),
    }
}

fn granularity_str(g: Granularity) -> &'static str {
    match g {
        Granularity::PerLayer => "layer",
        Granularity::PerInputNeuron => "neuron",
        Granularity::PerWeight => "weight",
    }
}

fn parse_predict(key: &str, value: &str) -> Result<PredictMode> {
    if value == "mean" {
        return Ok(PredictMode::MeanWeights);
    }
    if let Some(t) = value.strip_prefix("mc:") {
        let draws = parse_usize(key, t)?;
        if draws == 0 {
            return Err(bad(key, value, "mc:T with T >= 1"));
        }
        return Ok(PredictMode::McAverage(draws));
    }
    Err(bad(key, value, "mean or mc:T"))
}

fn predict_str(p: PredictMode) -> String {
    match p {
        PredictMode::MeanWeights => "mean".into(),
        PredictMode::McAverage(t) => format!("mc:{t}"),
    }
}

fn activation_str(a: Activation) -> &'static str {
    match a {
        Activation::ReLU => "relu",
        Activation::Softplus => "softplus",
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Apply one `key = value` assignment. Both the config file and every
    /// command-line override go through here, so error messages always name
    /// the offending key.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "dataset" => {
                self.dataset = match value {
                    "synthetic" => DatasetKind::Synthetic,
                    "mnist" => DatasetKind::Mnist,
                    _ => return Err(bad(key, value, "synthetic or mnist")),
                }
            }
            "n_per_class" => self.n_per_class = parse_usize(key, value)?,
            "dim" => self.dim = parse_usize(key, value)?,
            "classes" => self.classes = parse_usize(key, value)?,
            "separation" => self.separation = parse_f64(key, value)?,
            "data_seed" => self.data_seed = parse_u64(key, value)?,
            "n_val_per_class" => self.n_val_per_class = parse_usize(key, value)?,
            "val_split" => self.val_split = parse_usize(key, value)?,
            "layer_widths" => self.layer_widths = parse_usize_list(key, value)?,
            "activation" => {
                self.activation = match value {
                    "relu" => Activation::ReLU,
                    "softplus" => Activation::Softplus,
                    _ => return Err(bad(key, value, "relu or softplus")),
                }
            }
            "noise" => self.noise = parse_noise(key, value)?,
            "granularity" => self.granularity = parse_granularity(key, value)?,
            "input_p" => self.input_p = parse_f64(key, value)?,
            "hidden_p" => self.hidden_p = parse_f64(key, value)?,
            "mode" => self.mode = parse_mode(key, value)?,
            "kl" => self.kl = parse_kl(key, value)?,
            "kl_scale" => self.kl_scale = parse_f64(key, value)?,
            "M" => self.m = parse_usize(key, value)?,
            "epochs" => self.epochs = parse_usize(key, value)?,
            "patience" => self.patience = parse_usize(key, value)?,
            "lr" => self.lr = parse_f64(key, value)?,
            "beta1" => self.beta1 = parse_f64(key, value)?,
            "beta2" => self.beta2 = parse_f64(key, value)?,
            "adam_eps" => self.adam_eps = parse_f64(key, value)?,
            "avg_decay" => self.avg_decay = parse_f64(key, value)?,
            "seed" => self.seed = parse_u64(key, value)?,
            "out" => self.out = value.to_string(),
            "sampler" => {
                self.with_replacement = match value {
                    "replacement" => true,
                    "epoch" => false,
                    _ => return Err(bad(key, value, "replacement or epoch")),
                }
            }
            "predict" => self.predict = parse_predict(key, value)?,
            "var_R" => self.var_r = parse_usize(key, value)?,
            "var_M" => self.var_m = parse_usize(key, value)?,
            "var_layers" => {
                self.var_layers =
                    value.split(',').map(|s| s.trim().to_string()).collect::<Vec<_>>();
            }
            "var_modes" => self.var_modes = parse_mode_list(key, value)?,
            "checkpoint" => self.checkpoint = value.to_string(),
            "fresh_train" => self.fresh_train = parse_bool(key, value)?,
            "bench_dims" => self.bench_dims = parse_usize_list(key, value)?,
            "bench_M" => self.bench_m = parse_usize(key, value)?,
            "bench_trials" => self.bench_trials = parse_usize(key, value)?,
            "bench_modes" => self.bench_modes = parse_mode_list(key, value)?,
            "kl_grid_min" => self.kl_grid_min = parse_f64(key, value)?,
            "kl_grid_max" => self.kl_grid_max = parse_f64(key, value)?,
            "kl_grid_points" => self.kl_grid_points = parse_usize(key, value)?,
            "fd_step" => self.fd_step = parse_f64(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key '{key}'"))),
        }
        Ok(())
    }

    /// Parse a config file on top of the defaults.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "config {} line {}: expected 'key = value', got '{line}'",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    /// Cross-field validation with field-level messages. Called once after
    /// all overrides are applied.
    pub fn validate(&self) -> Result<()> {
        fn check(ok: bool, msg: &str) -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(msg.to_string()))
            }
        }
        check(self.n_per_class >= 1, "n_per_class must be >= 1")?;
        check(self.n_val_per_class >= 1, "n_val_per_class must be >= 1")?;
        check(self.dim >= 1, "dim must be >= 1")?;
        check(self.classes >= 2, "classes must be >= 2")?;
        check(
            self.separation.is_finite() && self.separation >= 0.0,
            "separation must be finite and >= 0",
        )?;
        check(self.val_split >= 1, "val_split must be >= 1")?;
        check(
            !self.layer_widths.is_empty() && self.layer_widths.iter().all(|&w| w >= 1),
            "layer_widths needs at least one positive width",
        )?;
        check(
            self.input_p > 0.0 && self.input_p < 1.0,
            "input_p must lie strictly between 0 and 1",
        )?;
        check(
            self.hidden_p > 0.0 && self.hidden_p < 1.0,
            "hidden_p must lie strictly between 0 and 1",
        )?;
        if matches!(
            self.noise,
            NoiseKind::TypeA | NoiseKind::TypeB | NoiseKind::GaussianFixed
        ) {
            check(
                self.input_p <= 0.5 && self.hidden_p <= 0.5,
                "input_p and hidden_p must be <= 0.5 for Gaussian noise so that alpha = p/(1-p) stays within (0, 1]",
            )?;
        }
        if self.noise == NoiseKind::TypeA {
            check(
                self.granularity != Granularity::PerWeight,
                "granularity = weight is incompatible with noise = typeA (scale noise is shared per input neuron)",
            )?;
        }
        check(
            self.kl_scale.is_finite() && self.kl_scale > 0.0,
            "kl_scale must be finite and > 0",
        )?;
        check(self.m >= 1, "M must be >= 1")?;
        check(self.epochs >= 1, "epochs must be >= 1")?;
        check(self.lr.is_finite() && self.lr > 0.0, "lr must be finite and > 0")?;
        check(
            self.beta1 >= 0.0 && self.beta1 < 1.0,
            "beta1 must lie in [0, 1)",
        )?;
        check(
            self.beta2 >= 0.0 && self.beta2 < 1.0,
            "beta2 must lie in [0, 1)",
        )?;
        check(
            self.adam_eps.is_finite() && self.adam_eps > 0.0,
            "adam_eps must be finite and > 0",
        )?;
        check(
            self.avg_decay >= 0.0 && self.avg_decay < 1.0,
            "avg_decay must lie in [0, 1)",
        )?;
        check(!self.out.is_empty(), "out must name an output directory")?;
        check(self.var_r >= 2, "var_R must be >= 2")?;
        check(self.var_m >= 1, "var_M must be >= 1")?;
        check(!self.var_layers.is_empty(), "var_layers must not be empty")?;
        check(!self.var_modes.is_empty(), "var_modes must not be empty")?;
        check(
            !self.bench_dims.is_empty() && self.bench_dims.iter().all(|&k| k >= 1),
            "bench_dims needs at least one positive width",
        )?;
        check(self.bench_m >= 1, "bench_M must be >= 1")?;
        check(self.bench_trials >= 3, "bench_trials must be >= 3")?;
        check(!self.bench_modes.is_empty(), "bench_modes must not be empty")?;
        if !(self.kl_grid_min.is_finite() && self.kl_grid_min > 0.0) {
            return Err(Error::Domain("kl_grid_min must be finite and > 0".into()));
        }
        if !(self.kl_grid_max.is_finite() && self.kl_grid_max <= 1.0) {
            return Err(Error::Domain(format!(
                "kl_grid_max must be <= 1 (alpha is constrained to (0, 1]), got {}",
                self.kl_grid_max
            )));
        }
        if self.kl_grid_min > self.kl_grid_max {
            return Err(Error::Domain("kl_grid_min must be <= kl_grid_max".into()));
        }
        check(self.kl_grid_points >= 2, "kl_grid_points must be >= 2")?;
        check(
            self.fd_step.is_finite() && self.fd_step > 0.0,
            "fd_step must be finite and > 0",
        )?;
        Ok(())
    }

    /// Optimizer hyper-parameters as the library's config struct.
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            avg_decay: self.avg_decay,
        }
    }

    /// Dropout rate for one dense layer: the first layer noises the network
    /// input, every later layer noises a hidden activation.
    pub fn layer_p(&self, layer_index: usize) -> f64 {
        if layer_index == 0 {
            self.input_p
        } else {
            self.hidden_p
        }
    }

    /// Noise model for one dense layer under the configured family.
    pub fn layer_noise(&self, layer_index: usize) -> NoiseModel {
        let p = self.layer_p(layer_index);
        match self.noise {
            NoiseKind::TypeA => NoiseModel::CorrelatedScale,
            NoiseKind::TypeB => NoiseModel::IndependentWeight,
            NoiseKind::Binary => NoiseModel::Binary { p },
            NoiseKind::GaussianFixed => NoiseModel::GaussianFixed { alpha: p / (1.0 - p) },
            NoiseKind::None => NoiseModel::None,
        }
    }

    /// Canonical echo of the full configuration: sorted keys, `key = value`,
    /// LF line endings. Written into every run directory.
    pub fn echo(&self) -> String {
        let mut pairs: Vec<(&str, String)> = vec![
            ("M", self.m.to_string()),
            ("activation", activation_str(self.activation).into()),
            ("adam_eps", self.adam_eps.to_string()),
            ("avg_decay", self.avg_decay.to_string()),
            ("bench_M", self.bench_m.to_string()),
            ("bench_dims", join(&self.bench_dims)),
            (
                "bench_modes",
                self.bench_modes.iter().map(|&m| mode_str(m)).collect::<Vec<_>>().join(","),
            ),
            ("bench_trials", self.bench_trials.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("checkpoint", self.checkpoint.clone()),
            ("classes", self.classes.to_string()),
            ("data_seed", self.data_seed.to_string()),
            (
                "dataset",
                match self.dataset {
                    DatasetKind::Synthetic => "synthetic".into(),
                    DatasetKind::Mnist => "mnist".into(),
                },
            ),
            ("dim", self.dim.to_string()),
            ("epochs", self.epochs.to_string()),
            ("fd_step", self.fd_step.to_string()),
            ("fresh_train", self.fresh_train.to_string()),
            ("granularity", granularity_str(self.granularity).into()),
            ("hidden_p", self.hidden_p.to_string()),
            ("input_p", self.input_p.to_string()),
            ("kl", kl_str(self.kl).into()),
            ("kl_grid_max", self.kl_grid_max.to_string()),
            ("kl_grid_min", self.kl_grid_min.to_string()),
            ("kl_grid_points", self.kl_grid_points.to_string()),
            ("kl_scale", self.kl_scale.to_string()),
            ("layer_widths", join(&self.layer_widths)),
            ("lr", self.lr.to_string()),
            ("mode", mode_str(self.mode).into()),
            ("n_per_class", self.n_per_class.to_string()),
            ("n_val_per_class", self.n_val_per_class.to_string()),
            ("noise", noise_str(self.noise).into()),
            ("out", self.out.clone()),
            ("patience", self.patience.to_string()),
            ("predict", predict_str(self.predict)),
            ("sampler", if self.with_replacement { "replacement" } else { "epoch" }.into()),
            ("seed", self.seed.to_string()),
            ("separation", self.separation.to_string()),
            ("val_split", self.val_split.to_string()),
            ("var_M", self.var_m.to_string()),
            ("var_R", self.var_r.to_string()),
            ("var_layers", self.var_layers.join(",")),
            (
                "var_modes",
                self.var_modes.iter().map(|&m| mode_str(m)).collect::<Vec<_>>().join(","),
            ),
        ];
        pairs.sort_by(|a, b| a.0.cmp(b.0));
        let mut out = String::new();
        for (k, v) in pairs {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_echo_round_trips() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let echo = cfg.echo();
        // Re-applying the echoed pairs reproduces the configuration exactly,
        // starting from a scribbled-over lr so the round trip has to restore it.
        let mut back = RunConfig { lr: 999.0, ..RunConfig::default() };
        for line in echo.lines() {
            let (k, v) = line.split_once('=').unwrap();
            back.apply(k.trim(), v.trim()).unwrap();
        }
        assert_eq!(back, cfg);
        // Keys are sorted.
        let keys: Vec<&str> = echo.lines().map(|l| l.split('=').next().unwrap().trim()).collect();
        let mut sorted = keys.clone();
        sorted.sort_unstable();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_field() {
        let mut cfg = RunConfig::default();
        let err = cfg.apply("learning_rate", "0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = cfg.apply("lr", "fast").unwrap_err();
        assert!(err.to_string().contains("lr"), "{err}");
        assert!(err.to_string().contains("fast"), "{err}");
        let err = cfg.apply("mode", "warp").unwrap_err();
        assert!(err.to_string().contains("per-minibatch"), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn cross_field_validation_catches_inconsistent_settings() {
        let mut cfg = RunConfig::default();
        cfg.apply("noise", "typeA").unwrap();
        cfg.apply("granularity", "weight").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("typeA"), "{err}");

        let mut cfg = RunConfig::default();
        cfg.apply("hidden_p", "0.9").unwrap();
        assert!(cfg.validate().is_err());
        cfg.apply("noise", "binary").unwrap();
        cfg.validate().unwrap(); // binary dropout allows p > 0.5

        let mut cfg = RunConfig::default();
        cfg.apply("kl_grid_max", "1.5").unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn files_parse_comments_blanks_and_last_wins() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("varigrad-cfg-{}-{}.txt", std::process::id(), line!()));
        std::fs::write(
            &path,
            "# a comment\n\nseed = 7\nM = 32\nnoise = typeA\nseed = 9\n",
        )
        .unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.m, 32);
        assert_eq!(cfg.noise, NoiseKind::TypeA);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn layer_noise_uses_input_rate_only_on_the_first_layer() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.layer_p(0), 0.2);
        assert_eq!(cfg.layer_p(1), 0.5);
        assert_eq!(cfg.layer_p(3), 0.5);
        let mut g = RunConfig::default();
        g.apply("noise", "gaussian-fixed").unwrap();
        match g.layer_noise(0) {
            NoiseModel::GaussianFixed { alpha } => assert!((alpha - 0.25).abs() < 1e-15),
            other => panic!("unexpected noise {other:?}"),
        }
        match g.layer_noise(2) {
            NoiseModel::GaussianFixed { alpha } => assert!((alpha - 1.0).abs() < 1e-15),
            other => panic!("unexpected noise {other:?}"),
        }
    }
}
