//! Command-line surface for the insulin-resistance screening pipeline.
//!
//! Every command reads one JSON config, writes deterministic outputs
//! under the configured output directory, and exits nonzero with a
//! single-line JSON error on failure. Wall-clock metadata is confined to
//! `run_meta.json`.

use std::io::{BufRead, Write};
use std::path::PathBuf;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ir_core::artifacts::{self, OutputLayout, RunMeta};
use ir_core::config::{RunConfig, SynthKind};
use ir_core::domain::ParticipantRecord;
use ir_core::featureset::build_design_matrix;
use ir_core::ingest::{apply_quality_control, load_cohort, CohortFiles};
use ir_core::model_io::ModelBundle;
use ir_core::pipeline::{run_experiment_grid, ExperimentSpec};
use ir_core::synthcohort::{
    generate_functional_cohort, generate_synthetic_cohort,
};
use ir_core::tools::{dispatch_line, Toolbox, PREDICTION_TOOLS};

#[derive(Parser)]
#[command(
    name = "ir-pipeline",
    about = "Insulin-resistance screening pipeline: cohort ingestion, HOMA-IR modeling, evaluation, explanation, and robustness analysis"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort into <output_dir>/cohort
    Synth {
        #[arg(long)]
        config: PathBuf,
    },
    /// Parse the cohort files and print a summary
    Ingest {
        #[arg(long)]
        config: PathBuf,
    },
    /// Apply quality control and write qc_report.json
    Qc {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run one experiment from the config
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Experiment name; defaults to the first configured experiment
        #[arg(long)]
        experiment: Option<String>,
    },
    /// Run every configured experiment and write the grid summary
    Grid {
        #[arg(long)]
        config: PathBuf,
    },
    /// Rolling-window sweeps and consistency buckets
    Robustness {
        #[arg(long)]
        config: PathBuf,
    },
    /// SHAP importance (direct schemes) or latent probes and embeddings
    /// (representation schemes)
    Explain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Serve the line-delimited JSON tool protocol on stdin/stdout
    Tools {
        /// Directory of frozen model bundles named <tool>.json
        #[arg(long)]
        models: Option<PathBuf>,
        /// Read requests from stdin until EOF (the only supported mode)
        #[arg(long, default_value_t = true)]
        stdin: bool,
    },
    /// Aggregate per-experiment reports into reports/summary.csv
    Report {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let started = Instant::now();
    match dispatch(cli, started) {
        Ok(()) => {}
        Err(err) => {
            let line = serde_json::json!({ "error": format!("{err:#}") });
            eprintln!("{line}");
            std::process::exit(1);
        }
    }
}

fn dispatch(cli: Cli, started: Instant) -> Result<()> {
    match cli.command {
        Command::Synth { config } => {
            let config = RunConfig::load(&config)?;
            let layout = OutputLayout::new(&config.output_dir);
            synthesize(&config, &layout, true)?;
            finish(&layout, "synth", started)
        }
        Command::Ingest { config } => {
            let config = RunConfig::load(&config)?;
            let layout = OutputLayout::new(&config.output_dir);
            let records = load_records(&config, &layout)?;
            let days: usize = records.iter().map(|r| r.days.len()).sum();
            println!(
                "{}",
                serde_json::json!({
                    "participants": records.len(),
                    "wearable_days": days,
                })
            );
            Ok(())
        }
        Command::Qc { config } => {
            let config = RunConfig::load(&config)?;
            let layout = OutputLayout::new(&config.output_dir);
            let records = load_records(&config, &layout)?;
            let (retained, report) = apply_quality_control(&records, &config.qc);
            artifacts::write_qc_report(&layout, &report)?;
            println!(
                "{}",
                serde_json::json!({
                    "input_n": report.input_n,
                    "retained_n": retained.len(),
                })
            );
            finish(&layout, "qc", started)
        }
        Command::Run { config, experiment } => {
            let config = RunConfig::load(&config)?;
            let layout = OutputLayout::new(&config.output_dir);
            configure_workers(&config);
            let records = qc_records(&config, &layout)?;
            let specs = config.resolve_experiments()?;
            if specs.is_empty() {
                bail!("config defines no experiments");
            }
            let spec = match &experiment {
                Some(name) => specs
                    .iter()
                    .find(|s| &s.name == name)
                    .with_context(|| format!("no experiment named '{name}'"))?
                    .clone(),
                None => specs[0].clone(),
            };
            let result = ir_core::pipeline::run_experiment(&records, &spec)?;
            artifacts::write_experiment_outputs(&layout, &result, config.thresholds)?;
            println!(
                "{}",
                serde_json::json!({
                    "experiment": result.name,
                    "n": result.predictions.len(),
                    "pooled_r2": result.evaluation.pooled_regression.r2,
                    "pooled_auroc": result.evaluation.pooled_auroc,
                })
            );
            finish(&layout, "run", started)
        }
        Command::Grid { config } => {
            let config = RunConfig::load(&config)?;
            let layout = OutputLayout::new(&config.output_dir);
            configure_workers(&config);
            let records = qc_records(&config, &layout)?;
            let specs = config.resolve_experiments()?;
            if specs.is_empty() {
                bail!("config defines no experiments");
            }
            let cells = run_experiment_grid(&records, &specs);
            for cell in &cells {
                if let Ok(result) = &cell.outcome {
                    artifacts::write_experiment_outputs(&layout, result, config.thresholds)?;
                }
            }
            artifacts::write_grid_summary(&layout, &cells)?;
            artifacts::write_grid_comparisons(&layout, &cells)?;
            let failures: Vec<&str> = cells
                .iter()
                .filter(|c| c.outcome.is_err())
                .map(|c| c.name.as_str())
                .collect();
            println!(
                "{}",
                serde_json::json!({
                    "experiments": cells.len(),
                    "failed": failures,
                })
            );
            finish(&layout, "grid", started)
        }
        Command::Robustness { config } => {
            let config = RunConfig::load(&config)?;
            let layout = OutputLayout::new(&config.output_dir);
            configure_workers(&config);
            let records = qc_records(&config, &layout)?;
            let specs = select_experiments(&config, &config.robustness.experiments)?;
            for spec in &specs {
                let result = ir_core::pipeline::run_experiment(&records, spec)?;
                for &window in &config.robustness.windows {
                    let (sweeps, report) = ir_core::robustness::sweep_experiment(
                        &records,
                        &result,
                        config.thresholds,
                        window,
                        config.robustness.stride,
                    )?;
                    let cvs = ir_core::robustness::sweep_cvs(&sweeps);
                    artifacts::write_robustness_outputs(
                        &layout, &spec.name, window, &sweeps, &report, &cvs,
                    )?;
                }
            }
            println!(
                "{}",
                serde_json::json!({
                    "experiments": specs.len(),
                    "windows": config.robustness.windows,
                })
            );
            finish(&layout, "robustness", started)
        }
        Command::Explain { config } => {
            let config = RunConfig::load(&config)?;
            let layout = OutputLayout::new(&config.output_dir);
            configure_workers(&config);
            let records = qc_records(&config, &layout)?;
            let specs = config.resolve_experiments()?;
            for spec in &specs {
                let result = ir_core::pipeline::run_experiment(&records, spec)?;
                let matrix = build_design_matrix(
                    &records,
                    &spec.feature_set,
                    spec.window_days,
                    &spec.catalog,
                )?;
                if spec.scheme.uses_autoencoder() {
                    let embeddings =
                        ir_core::explain::test_fold_embeddings(&matrix, &result)?;
                    artifacts::write_embeddings(&layout, &spec.name, &embeddings)?;
                    let probes = ir_core::explain::latent_probes(
                        &records,
                        &matrix,
                        &result,
                        spec.seeds[0],
                    )?;
                    artifacts::write_json(
                        &layout.shap_dir().join(format!("{}.probes.json", spec.name)),
                        &probes,
                    )?;
                } else {
                    let (importance, per_row) =
                        ir_core::explain::pooled_importance(&matrix, &result)?;
                    artifacts::write_importance_outputs(
                        &layout,
                        &spec.name,
                        &importance,
                        &per_row,
                    )?;
                }
            }
            println!("{}", serde_json::json!({ "experiments": specs.len() }));
            finish(&layout, "explain", started)
        }
        Command::Tools { models, stdin: _ } => {
            let mut toolbox = Toolbox::new(ir_core::domain::IrThresholds::default());
            if let Some(dir) = models {
                for tool in PREDICTION_TOOLS {
                    let path = dir.join(format!("{tool}.json"));
                    if path.exists() {
                        let bundle = ModelBundle::load(&path)
                            .with_context(|| format!("loading model for {tool}"))?;
                        toolbox.register(tool, bundle);
                    }
                }
            }
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            let mut out = stdout.lock();
            for line in stdin.lock().lines() {
                let line = line.context("reading request line")?;
                if line.trim().is_empty() {
                    continue;
                }
                let response = dispatch_line(&line, &toolbox);
                let json = serde_json::to_string(&response).expect("response serializes");
                writeln!(out, "{json}").context("writing response")?;
                out.flush().context("flushing response")?;
            }
            Ok(())
        }
        Command::Report { config } => {
            let config = RunConfig::load(&config)?;
            let layout = OutputLayout::new(&config.output_dir);
            write_report_table(&layout)?;
            finish(&layout, "report", started)
        }
    }
}

fn configure_workers(config: &RunConfig) {
    if let Some(workers) = config.workers {
        if workers > 0 {
            // ignore failure if a pool is already installed
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build_global();
        }
    }
}

/// Write the cohort files if configured for synthesis. Regenerates only
/// when missing unless `force`.
fn synthesize(config: &RunConfig, layout: &OutputLayout, force: bool) -> Result<CohortFiles> {
    let synth = config
        .synth
        .as_ref()
        .context("config has no 'synth' section")?;
    let dir = layout.cohort_dir();
    let files = CohortFiles::in_dir(&dir);
    if !force && files.participants_path.exists() {
        return Ok(files);
    }
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    match synth.kind {
        SynthKind::Calibrated => {
            let calibration = synth.calibration.clone().unwrap_or_default();
            generate_synthetic_cohort(synth.n, &calibration, synth.seed, &dir, &synth.violations)?;
        }
        SynthKind::Functional => {
            let spec = synth.functional.clone().unwrap_or_default();
            let (_, _, truth) = generate_functional_cohort(synth.n, &spec, synth.seed, &dir)?;
            artifacts::write_json(&dir.join("functional_truth.json"), &truth)?;
        }
    }
    Ok(files)
}

fn load_records(config: &RunConfig, layout: &OutputLayout) -> Result<Vec<ParticipantRecord>> {
    let files = match &config.data {
        Some(paths) => CohortFiles {
            participants_path: paths.participants.clone(),
            wearables_path: paths.wearables.clone(),
            labs_path: paths.labs.clone(),
        },
        None => synthesize(config, layout, false)?,
    };
    Ok(load_cohort(&files)?)
}

fn qc_records(config: &RunConfig, layout: &OutputLayout) -> Result<Vec<ParticipantRecord>> {
    let records = load_records(config, layout)?;
    let (retained, report) = apply_quality_control(&records, &config.qc);
    artifacts::write_qc_report(layout, &report)?;
    if retained.is_empty() {
        bail!("quality control excluded every participant");
    }
    Ok(retained)
}

fn select_experiments(config: &RunConfig, names: &[String]) -> Result<Vec<ExperimentSpec>> {
    let specs = config.resolve_experiments()?;
    if names.is_empty() {
        if specs.is_empty() {
            bail!("config defines no experiments");
        }
        return Ok(specs);
    }
    names
        .iter()
        .map(|name| {
            specs
                .iter()
                .find(|s| &s.name == name)
                .cloned()
                .with_context(|| format!("no experiment named '{name}'"))
        })
        .collect()
}

/// Flatten every per-experiment report JSON into one CSV table.
fn write_report_table(layout: &OutputLayout) -> Result<()> {
    let dir = layout.reports_dir();
    let mut rows: Vec<(String, serde_json::Value)> = Vec::new();
    let entries = std::fs::read_dir(&dir)
        .with_context(|| format!("reading {} (run 'grid' first)", dir.display()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.ends_with(".report.json"))
        })
        .collect();
    paths.sort();
    for path in paths {
        let doc: serde_json::Value = serde_json::from_slice(
            &std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?,
        )?;
        let name = doc["name"].as_str().unwrap_or_default().to_string();
        rows.push((name, doc));
    }
    let header = "name,feature_set,window_days,scheme,cv,n,pooled_r2,pooled_mae,pooled_mse,\
                  pooled_sensitivity,pooled_specificity,pooled_adjusted_specificity,\
                  pooled_precision,pooled_auroc,pooled_auprc";
    let mut lines = vec![header.to_string()];
    for (name, doc) in &rows {
        let eval = &doc["evaluation"];
        let get = |v: &serde_json::Value| -> String {
            v.as_f64().map(|f| format!("{f}")).unwrap_or_default()
        };
        lines.push(
            [
                name.clone(),
                doc["feature_set"].as_str().unwrap_or_default().to_string(),
                doc["window_days"].to_string(),
                doc["scheme"].as_str().unwrap_or_default().to_string(),
                doc["cv"].as_str().unwrap_or_default().to_string(),
                doc["n"].to_string(),
                get(&eval["pooled_regression"]["r2"]),
                get(&eval["pooled_regression"]["mae"]),
                get(&eval["pooled_regression"]["mse"]),
                get(&eval["pooled_classification"]["sensitivity"]),
                get(&eval["pooled_classification"]["specificity"]),
                get(&eval["pooled_classification"]["adjusted_specificity"]),
                get(&eval["pooled_classification"]["precision"]),
                get(&eval["pooled_auroc"]),
                get(&eval["pooled_auprc"]),
            ]
            .join(","),
        );
    }
    let path = dir.join("summary.csv");
    std::fs::write(&path, lines.join("\n") + "\n")
        .with_context(|| format!("writing {}", path.display()))?;
    println!("{}", serde_json::json!({ "reports": rows.len() }));
    Ok(())
}

fn finish(layout: &OutputLayout, command: &str, started: Instant) -> Result<()> {
    let meta = RunMeta {
        command: command.to_string(),
        started_unix_ms: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0),
        elapsed_ms: started.elapsed().as_millis(),
    };
    artifacts::write_run_meta(layout, &meta)?;
    Ok(())
}
