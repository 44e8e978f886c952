use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use encp::data::{read_points, write_matrix, Dataset};
use encp::experiment::{run_experiment, ExperimentConfig, RunDir};
use encp::gmm::build_spec;
use encp::group::{data_representation, isotypic_decomposition, real_irreps, regular_representation, FiniteGroup, IrrepType};
use encp::inference::{regress, CcdfTable, ObservableSamples, QuantileOptions, DEFAULT_BINS};
use nalgebra::DMatrix;
use serde_json::json;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "encp", version, about = "Equivariant conditional expectation operators on finite-group symmetric data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Group tables, irreps and isotypic decompositions.
    #[command(subcommand)]
    Group(GroupCommand),
    /// Symmetric Gaussian mixture datasets.
    #[command(subcommand)]
    Gmm(GmmCommand),
    /// Train every seed of a config on its full training split.
    Train(RunArgs),
    /// Evaluate a trained run on a dataset directory.
    Eval(EvalArgs),
    /// Estimators from a trained run.
    #[command(subcommand)]
    Infer(InferCommand),
    /// Train every seed at every size of the config's sweep section.
    Sweep(RunArgs),
}

#[derive(Subcommand)]
enum GroupCommand {
    Inspect {
        #[arg(long)]
        group: String,
        /// Also decompose the default action on R^dim.
        #[arg(long)]
        dim: Option<usize>,
    },
}

#[derive(Subcommand)]
enum GmmCommand {
    Generate(GenerateArgs),
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    group: String,
    #[arg(long, default_value_t = 1)]
    px: usize,
    #[arg(long, default_value_t = 1)]
    qy: usize,
    #[arg(long, default_value_t = 3)]
    n_g: usize,
    /// Seed of the mixture parameters.
    #[arg(long, default_value_t = 0)]
    spec_seed: u64,
    /// Seed of the sample draw.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum InferCommand {
    /// Conditional mean of y at each probe x.
    Regress {
        #[command(flatten)]
        common: InferArgs,
    },
    /// Per-dimension conditional quantiles at each probe x.
    Quantile {
        #[command(flatten)]
        common: InferArgs,
        /// Comma-separated levels in (0, 1).
        #[arg(long, value_delimiter = ',', required = true)]
        alpha: Vec<f64>,
        #[arg(long, default_value_t = DEFAULT_BINS)]
        bins: usize,
    },
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    x_file: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Model of this seed; the first trained model otherwise.
    #[arg(long)]
    seed: Option<u64>,
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ENCP_LOG", "warn")).init();
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Group(GroupCommand::Inspect { group, dim }) => inspect(&group, dim),
        Command::Gmm(GmmCommand::Generate(a)) => generate(&a),
        Command::Train(a) => {
            let mut config = load_config(&a.config)?;
            config.sweep = None;
            finish(run_experiment(&config, &a.out)?, &a.out)
        }
        Command::Sweep(a) => {
            let config = load_config(&a.config)?;
            if config.sweep.is_none() {
                bail!("{}: the config has no sweep section", a.config.display());
            }
            finish(run_experiment(&config, &a.out)?, &a.out)
        }
        Command::Eval(a) => {
            let run = RunDir::open(&a.run)?;
            let (test, meta) = Dataset::load(&a.data).with_context(|| format!("loading {}", a.data.display()))?;
            let reports = run.evaluate_on(&test, &meta.source)?;
            let out = json!({
                "config_digest": run.report.config_digest,
                "data_digest": test.spec_digest,
                "reports": reports,
            });
            write_json(&a.out, &out)
        }
        Command::Infer(InferCommand::Regress { common }) => {
            let run = RunDir::open(&common.run)?;
            let mut op = run.fitted(common.seed)?;
            let xs = read_points(&common.x_file)?;
            let h = ObservableSamples::new(op.fit_data().y.clone(), Some(op.model().rep_y().clone()))?;
            op.register_observable("y", &h)?;
            let z = regress(&op, "y", &xs)?;
            let names: Vec<String> = (0..z.ncols()).map(|j| format!("zhat_{j}")).collect();
            write_matrix(&common.out, &names, &z)?;
            Ok(())
        }
        Command::Infer(InferCommand::Quantile { common, alpha, bins }) => {
            let run = RunDir::open(&common.run)?;
            let op = run.fitted(common.seed)?;
            let xs = read_points(&common.x_file)?;
            quantiles(&op, &xs, &alpha, bins, &common.out)
        }
    }
}

fn load_config(path: &Path) -> Result<ExperimentConfig> {
    ExperimentConfig::load(path).with_context(|| format!("reading config {}", path.display()))
}

fn finish(report: encp::experiment::ExperimentReport, out: &Path) -> Result<()> {
    for f in &report.failures {
        eprintln!("seed {} (n_train {}) failed: {}", f.seed, f.n_train, f.error);
    }
    println!(
        "{} models trained, {} failed; artifacts in {}",
        report.reports.len(),
        report.failures.len(),
        out.display()
    );
    if report.reports.is_empty() {
        bail!("every run failed");
    }
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn inspect(label: &str, dim: Option<usize>) -> Result<()> {
    let group = FiniteGroup::from_label(label)?;
    let irreps = real_irreps(&group)?;
    let regular = regular_representation(&group);
    let iso = isotypic_decomposition(&regular, &irreps)?;
    let irrep_info: Vec<_> = irreps
        .iter()
        .map(|k| {
            json!({
                "id": k.id(),
                "name": k.name(),
                "dim": k.dim(),
                "type": match k.irrep_type() { IrrepType::Real => "real", IrrepType::Complex => "complex" },
            })
        })
        .collect();
    let mut out = json!({
        "group": group.label(),
        "order": group.order(),
        "axioms_hold": group.check_axioms(),
        "irreps": irrep_info,
        "regular": {
            "homomorphism_error": regular.homomorphism_error(),
            "blocks": iso.blocks(),
            "q_orthogonality_error": iso.orthogonality_error(),
            "block_residual": iso.block_residual(&regular),
        },
    });
    if let Some(d) = dim {
        let rep = data_representation(&group, d)?;
        let iso = isotypic_decomposition(&rep, &irreps)?;
        out["data_action"] = json!({
            "dim": d,
            "blocks": iso.blocks(),
            "block_residual": iso.block_residual(&rep),
        });
    }
    writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(&out)?)?;
    Ok(())
}

fn generate(a: &GenerateArgs) -> Result<()> {
    let group = FiniteGroup::from_label(&a.group)?;
    let spec = build_spec(&data_representation(&group, a.px)?, &data_representation(&group, a.qy)?, a.n_g, a.spec_seed)?;
    let data = spec.sample(a.n, a.seed)?;
    let source = spec.source().expect("generated spec records its source").clone();
    data.save(&a.out, source, &group.label())?;
    println!("{} samples written to {}", data.len(), a.out.display());
    Ok(())
}

fn quantiles(op: &encp::model::FittedOperator, xs: &DMatrix<f64>, alphas: &[f64], bins: usize, out: &Path) -> Result<()> {
    if alphas.is_empty() {
        bail!("at least one alpha is required");
    }
    let q = op.model().y_dim();
    let mut names = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let opts = QuantileOptions { n_bins: bins, range: None };
    let mut outside = 0usize;
    for j in 0..q {
        let table = CcdfTable::new(op, j, &opts)?;
        for &alpha in alphas {
            let est = table.quantiles(op, xs, alpha)?;
            outside += est.iter().filter(|e| e.out_of_range).count();
            names.push(format!("y{j}_q{alpha}"));
            columns.push(est.iter().map(|e| e.value).collect());
            names.push(format!("y{j}_q{alpha}_out_of_range"));
            columns.push(est.iter().map(|e| if e.out_of_range { 1.0 } else { 0.0 }).collect());
        }
    }
    if outside > 0 {
        log::warn!("{outside} quantile crossings fell outside the binned range");
    }
    let m = DMatrix::from_fn(xs.nrows(), columns.len(), |i, c| columns[c][i]);
    write_matrix(out, &names, &m)?;
    Ok(())
}
