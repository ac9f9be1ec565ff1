//! Command-line front end for the varigrad library.
//!
//! Subcommands: `train`, `variance`, `kl-table`, `bench`, `gradcheck`. Every
//! command reads an optional flat key-value config file (see `config`),
//! applies command-line overrides, validates, and writes its outputs plus a
//! canonical echo of the effective configuration into the `out` directory.
//!
//! Exit codes: 0 success, 2 configuration/domain error, 3 numeric failure,
//! 4 I/O or file-format error. All outputs are deterministic for a fixed
//! (config, seed) pair except wall-clock fields in speed reports.

mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use config::{DatasetKind, NoiseKind, RunConfig};
use varigrad::checkpoint::{load_model, save_model};
use varigrad::data::{load_mnist_idx, synthetic_gaussian_classes, Dataset};
use varigrad::diagnostics::{
    estimator_speed_bench, finite_difference_audit, gradient_variance, speed_report_json,
    variance_csv, LossProbe, VarianceOptions,
};
use varigrad::posterior::neg_kl_per_unit;
use varigrad::train::{fit, EpochRow, FitOptions};
use varigrad::{Error, KlMode, LayerSpec, Matrix, Mlp, Result, RngStream};

/// Maximum relative error between analytic gradients and central finite
/// differences for `gradcheck` to pass.
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "varigrad",
    version,
    about = "Variational dropout networks: training, gradient-variance reports, KL tables, and estimator speed benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a network; writes metrics.csv, model.ckpt, and config.txt
    Train(CommonArgs),
    /// Measure per-layer gradient variance; writes variance.csv
    Variance(CommonArgs),
    /// Tabulate the negative-KL evaluations over an alpha grid
    KlTable(CommonArgs),
    /// Benchmark estimator forward+backward wall time; writes speed.json
    Bench(CommonArgs),
    /// Compare analytic gradients against central finite differences
    Gradcheck(CommonArgs),
}

/// Flags shared by every subcommand. Each one overrides the config key of
/// the same name; `--set key=value` reaches any remaining key.
#[derive(Args)]
struct CommonArgs {
    /// Flat key-value config file applied on top of the defaults
    #[arg(long)]
    config: Option<PathBuf>,
    /// RNG seed for model init, training, and diagnostics
    #[arg(long)]
    seed: Option<String>,
    /// Output directory for this run
    #[arg(long)]
    out: Option<String>,
    /// Gradient estimator: local|per-datapoint|per-minibatch|none
    #[arg(long)]
    mode: Option<String>,
    /// Noise family: typeA|typeB|binary|gaussian-fixed|none
    #[arg(long)]
    noise: Option<String>,
    /// KL evaluation: poly|bound|quad
    #[arg(long)]
    kl: Option<String>,
    /// Multiplier on the KL term of the objective
    #[arg(long = "kl-scale")]
    kl_scale: Option<String>,
    /// Minibatch size
    #[arg(long = "M")]
    m: Option<String>,
    /// Number of training epochs
    #[arg(long)]
    epochs: Option<String>,
    /// Override any config key: --set key=value (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

fn build_config(args: &CommonArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let named: [(&str, &Option<String>); 8] = [
        ("seed", &args.seed),
        ("out", &args.out),
        ("mode", &args.mode),
        ("noise", &args.noise),
        ("kl", &args.kl),
        ("kl_scale", &args.kl_scale),
        ("M", &args.m),
        ("epochs", &args.epochs),
    ];
    for (key, value) in named {
        if let Some(v) = value {
            cfg.apply(key, v)?;
        }
    }
    for pair in &args.set {
        let (k, v) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects key=value, got '{pair}'"))
        })?;
        cfg.apply(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)
        .map_err(|e| Error::Io(format!("cannot write {}: {e}", path.display())))
}

/// Create the output directory and drop the canonical config echo into it,
/// so even a run that later fails is auditable.
fn prepare_out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(&cfg.out);
    std::fs::create_dir_all(&dir).map_err(|e| {
        Error::Io(format!("cannot create output directory {}: {e}", dir.display()))
    })?;
    write_text(&dir.join("config.txt"), &cfg.echo())?;
    Ok(dir)
}

/// Training and validation sets per the config. The synthetic validation set
/// is generated from `data_seed + 1` so it never overlaps the training draw;
/// MNIST reserves the last `val_split` rows of the training file.
fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    match cfg.dataset {
        DatasetKind::Synthetic => {
            let train = synthetic_gaussian_classes(
                cfg.n_per_class,
                cfg.dim,
                cfg.classes,
                cfg.separation,
                cfg.data_seed,
            )?;
            let val = synthetic_gaussian_classes(
                cfg.n_val_per_class,
                cfg.dim,
                cfg.classes,
                cfg.separation,
                cfg.data_seed + 1,
            )?;
            Ok((train, val))
        }
        DatasetKind::Mnist => {
            let dir = std::env::var("VARIGRAD_DATA_DIR").map_err(|_| {
                Error::Config(
                    "dataset = mnist requires the VARIGRAD_DATA_DIR environment variable to point at the IDX files"
                        .into(),
                )
            })?;
            let dir = PathBuf::from(dir);
            let full = load_mnist_idx(
                &dir.join("train-images-idx3-ubyte"),
                &dir.join("train-labels-idx1-ubyte"),
            )?;
            full.split_tail(cfg.val_split)
        }
    }
}

/// Network from the config: dims are input width, the configured hidden
/// widths, then the class count. Layer 0 noises the input at `input_p`;
/// every later layer noises a hidden activation at `hidden_p`.
fn build_model(cfg: &RunConfig, input_dim: usize, classes: usize) -> Result<Mlp> {
    let mut dims = Vec::with_capacity(cfg.layer_widths.len() + 2);
    dims.push(input_dim);
    dims.extend_from_slice(&cfg.layer_widths);
    dims.push(classes);
    let adaptive = matches!(cfg.noise, NoiseKind::TypeA | NoiseKind::TypeB);
    let specs: Vec<LayerSpec> = (0..dims.len() - 1)
        .map(|i| {
            let p = cfg.layer_p(i);
            LayerSpec {
                noise: cfg.layer_noise(i),
                granularity: if adaptive {
                    cfg.granularity
                } else {
                    varigrad::Granularity::PerLayer
                },
                alpha0: p / (1.0 - p),
            }
        })
        .collect();
    let mut rng = RngStream::new(cfg.seed, 0);
    Mlp::new(&dims, cfg.activation, &specs, &mut rng)
}

fn fit_options(cfg: &RunConfig) -> FitOptions {
    FitOptions {
        epochs: cfg.epochs,
        batch_size: cfg.m,
        mode: cfg.mode,
        kl_mode: cfg.kl,
        kl_scale: cfg.kl_scale,
        adam: cfg.adam(),
        patience: cfg.patience,
        with_replacement: cfg.with_replacement,
        eval: cfg.predict,
    }
}

fn metrics_csv(rows: &[EpochRow], n_layers: usize) -> String {
    let mut csv = String::from("epoch,train_elbo,train_error,val_error");
    for i in 0..n_layers {
        let _ = write!(csv, ",mean_alpha_layer{i}");
    }
    csv.push('\n');
    for row in rows {
        let _ = write!(csv, "{},{},{}", row.epoch, row.train_elbo, row.train_error);
        match row.val_error {
            Some(v) => {
                let _ = write!(csv, ",{v}");
            }
            None => csv.push(','),
        }
        for a in &row.mean_alpha {
            let _ = write!(csv, ",{a}");
        }
        csv.push('\n');
    }
    csv
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_out_dir(cfg)?;
    let (train, val) = load_datasets(cfg)?;
    let mut model = build_model(cfg, train.d(), train.c)?;
    let opts = fit_options(cfg);
    let mut rng = RngStream::new(cfg.seed, 1);
    let report = fit(&mut model, &train, Some(&val), &opts, &mut rng)?;
    write_text(
        &dir.join("metrics.csv"),
        &metrics_csv(&report.rows, report.best_model.layers.len()),
    )?;
    save_model(&report.best_model, &dir.join("model.ckpt"))?;
    println!("trained {} of {} requested epochs on {}", report.epochs_run, cfg.epochs, train.name);
    if let Some(v) = report.best_val_error {
        println!("best_val_error = {v}");
    }
    println!("wrote {}", dir.join("metrics.csv").display());
    println!("wrote {}", dir.join("model.ckpt").display());
    Ok(())
}

fn cmd_variance(cfg: &RunConfig) -> Result<()> {
    let has_checkpoint = !cfg.checkpoint.is_empty();
    if has_checkpoint == cfg.fresh_train {
        return Err(Error::Config(
            "variance needs a model: set exactly one of 'checkpoint = <path>' or 'fresh_train = true'"
                .into(),
        ));
    }
    let dir = prepare_out_dir(cfg)?;
    let (train, val) = load_datasets(cfg)?;
    let model = if has_checkpoint {
        load_model(Path::new(&cfg.checkpoint))?
    } else {
        let mut model = build_model(cfg, train.d(), train.c)?;
        let mut rng = RngStream::new(cfg.seed, 1);
        fit(&mut model, &train, Some(&val), &fit_options(cfg), &mut rng)?.best_model
    };

    let n_layers = model.layers.len();
    let mut resolved: Vec<(usize, String)> = Vec::new();
    for item in &cfg.var_layers {
        let idx = match item.as_str() {
            "first" => 0,
            "last" => n_layers - 1,
            other => other.parse::<usize>().map_err(|_| {
                Error::Config(format!(
                    "var_layers entry '{other}' is neither 'first', 'last', nor a layer index"
                ))
            })?,
        };
        if idx >= n_layers {
            return Err(Error::Config(format!(
                "var_layers entry '{item}' is out of range for a {n_layers}-layer model"
            )));
        }
        if !resolved.iter().any(|(i, _)| *i == idx) {
            resolved.push((idx, item.clone()));
        }
    }

    let base = RngStream::new(cfg.seed, 2);
    let mut cells = Vec::new();
    let mut cell_id = 0u64;
    for (idx, label) in &resolved {
        for &mode in &cfg.var_modes {
            let opts = VarianceOptions {
                mode,
                m: cfg.var_m,
                r: cfg.var_r,
                with_replacement: cfg.with_replacement,
                kl_mode: cfg.kl,
                kl_scale: cfg.kl_scale,
            };
            let mut rng = base.substream(cell_id);
            cell_id += 1;
            let mut cell = gradient_variance(&model, &train, *idx, &opts, &mut rng)?;
            cell.layer_label = label.clone();
            cells.push(cell);
        }
    }
    write_text(&dir.join("variance.csv"), &variance_csv(&cells))?;
    println!("measured {} cells on {}", cells.len(), train.name);
    println!("wrote {}", dir.join("variance.csv").display());
    Ok(())
}

fn cmd_kl_table(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_out_dir(cfg)?;
    let ln_min = cfg.kl_grid_min.ln();
    let ln_max = cfg.kl_grid_max.ln();
    let points = cfg.kl_grid_points;
    let mut csv =
        String::from("log_alpha,neg_kl_polynomial,neg_kl_lower_bound,neg_kl_quadrature\n");
    for i in 0..points {
        // The grid is uniform in log(alpha); the final point lands exactly on
        // the configured maximum so alpha = 1 rows are exact.
        let la = if i + 1 == points {
            ln_max
        } else {
            ln_min + (ln_max - ln_min) * (i as f64 / (points - 1) as f64)
        };
        let poly = neg_kl_per_unit(la, KlMode::Polynomial)?;
        let bound = neg_kl_per_unit(la, KlMode::LowerBound)?;
        let quad = neg_kl_per_unit(la, KlMode::Quadrature)?;
        let _ = writeln!(csv, "{la},{poly},{bound},{quad}");
    }
    write_text(&dir.join("kl_table.csv"), &csv)?;
    println!("tabulated {points} grid points");
    println!("wrote {}", dir.join("kl_table.csv").display());
    Ok(())
}

fn cmd_bench(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_out_dir(cfg)?;
    let mut rng = RngStream::new(cfg.seed, 3);
    let report = estimator_speed_bench(
        &cfg.bench_dims,
        cfg.bench_m,
        &cfg.bench_modes,
        cfg.bench_trials,
        &mut rng,
    )?;
    write_text(&dir.join("speed.json"), &speed_report_json(&report))?;
    println!("timed {} cells", report.entries.len());
    println!("wrote {}", dir.join("speed.json").display());
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let dir = prepare_out_dir(cfg)?;
    let (train, _) = load_datasets(cfg)?;
    let mut model = build_model(cfg, train.d(), train.c)?;
    // Central differences on log_alpha evaluate at +/- fd_step around the
    // current point, and alpha = 1 (e.g. from hidden_p = 0.5) sits exactly on
    // the alpha <= 1 boundary; pull every entry a few steps inside so both
    // probes stay feasible.
    let margin = 10.0 * cfg.fd_step;
    for layer in &mut model.layers {
        for v in layer.posterior.log_alpha.data_mut() {
            if *v > -margin {
                *v = -margin;
            }
        }
    }
    let rows = cfg.m.min(train.n());
    let mut data = Vec::with_capacity(rows * train.d());
    for r in 0..rows {
        data.extend_from_slice(train.x.row(r));
    }
    let x = Matrix::from_vec(rows, train.d(), data)?;
    let y = train.y[..rows].to_vec();
    let probe = LossProbe::Elbo {
        mode: cfg.mode,
        kl_mode: cfg.kl,
        kl_scale: cfg.kl_scale,
        n_total: train.n(),
    };
    let rng = RngStream::new(cfg.seed, 4);
    let report = finite_difference_audit(&model, &x, &y, probe, cfg.fd_step, &rng)?;
    let mut text = String::new();
    let mut worst = 0.0f64;
    for g in &report {
        let _ = writeln!(text, "layer {} {} max_rel_err = {:e}", g.layer_index, g.group, g.max_rel_err);
        worst = worst.max(g.max_rel_err);
    }
    let verdict = if worst < GRADCHECK_TOL { "PASS" } else { "FAIL" };
    let _ = writeln!(text, "worst = {worst:e} tolerance = {GRADCHECK_TOL:e} -> {verdict}");
    write_text(&dir.join("gradcheck.txt"), &text)?;
    print!("{text}");
    if worst >= GRADCHECK_TOL {
        return Err(Error::Numeric(format!(
            "gradient check failed: worst relative error {worst:e} exceeds {GRADCHECK_TOL:e}"
        )));
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::Train(args) => cmd_train(&build_config(&args)?),
        Cmd::Variance(args) => cmd_variance(&build_config(&args)?),
        Cmd::KlTable(args) => cmd_kl_table(&build_config(&args)?),
        Cmd::Bench(args) => cmd_bench(&build_config(&args)?),
        Cmd::Gradcheck(args) => cmd_gradcheck(&build_config(&args)?),
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
