use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anodiff_core::config::{RunConfig, OUT_ENV};
use anodiff_core::dataset::LoadedCategory;
use anodiff_core::pipeline::{self, Run};
use anodiff_core::Error;
use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

const DEFAULT_OUT: &str = "anodiff-out";

#[derive(Parser, Debug)]
#[command(
    name = "anodiff",
    version,
    about = "Anomaly detection by adaptive diffusion reconstruction"
)]
struct Cli {
    #[command(flatten)]
    overrides: Overrides,
    #[command(subcommand)]
    command: Command,
}

/// Flags override the config file.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML run configuration; defaults apply for anything missing.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Process only this category.
    #[arg(long, global = true, value_name = "NAME")]
    category: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    #[arg(long, global = true, value_name = "N")]
    resolution: Option<usize>,
    /// Threshold for every category ("inf" disables detection).
    #[arg(long, global = true, value_name = "X")]
    delta: Option<f64>,
    /// Largest starting step of the search.
    #[arg(long = "T", global = true, value_name = "N")]
    t_start: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    t_min: Option<usize>,
    #[arg(long, global = true, value_name = "N")]
    stride: Option<usize>,
    /// Dataset root.
    #[arg(long, global = true, value_name = "DIR")]
    dataset: Option<PathBuf>,
    /// Output root; falls back to the config, then $ANODIFF_OUT, then ./anodiff-out.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the denoiser and feature extractor per category.
    Train,
    /// Reconstruct and score every test image.
    Reconstruct,
    /// Compute metrics from reconstruct outputs.
    Eval,
    /// Render input | reconstruction | map | ground truth panels.
    Report,
    /// Render synthetic anomaly pairs from training images.
    SynthPreview {
        #[arg(long, default_value_t = 8)]
        rows: usize,
    },
    /// Write the configured toy dataset to the dataset root.
    MakeToy,
    /// train, reconstruct and eval in sequence.
    Run,
}

impl Overrides {
    fn resolve(&self) -> Result<(RunConfig, PathBuf)> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.apply_seed(seed);
        }
        if let Some(r) = self.resolution {
            cfg.resolution = r;
        }
        if let Some(d) = self.delta {
            cfg.delta.fixed = Some(d);
        }
        if let Some(t) = self.t_start {
            cfg.search.t_start = t;
        }
        if let Some(t) = self.t_min {
            cfg.search.t_min = t;
        }
        if let Some(s) = self.stride {
            cfg.search.stride = s;
        }
        if let Some(c) = &self.category {
            cfg.categories = vec![c.clone()];
        }
        if let Some(d) = &self.dataset {
            cfg.dataset_root = Some(d.clone());
        }
        let out = self
            .out
            .clone()
            .or_else(|| cfg.output_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        cfg.output_dir = Some(out.clone());
        Ok((cfg, out))
    }
}

fn for_each_category(run: &Run, mut f: impl FnMut(&LoadedCategory) -> Result<()>) -> Result<()> {
    let layout = run.dataset()?;
    for c in run.categories(&layout)? {
        let data = run
            .load(&layout, &c)
            .with_context(|| format!("loading category {c}"))?;
        f(&data).with_context(|| format!("category {c}"))?;
    }
    Ok(())
}

fn execute(command: &Command, run: &Run) -> Result<()> {
    match command {
        Command::Train => for_each_category(run, |data| {
            let s = pipeline::train_category(run, data)?;
            println!(
                "{}: {} iterations, final loss {:.6}",
                s.category, s.iterations, s.final_loss
            );
            if let Some(l) = s.finetune_final_loss {
                println!("{}: extractor fine-tune final loss {l:.6}", s.category);
            }
            Ok(())
        }),
        Command::Reconstruct => for_each_category(run, |data| {
            let rows = pipeline::reconstruct_category(run, data)?;
            let detected = rows.iter().filter(|r| r.detected_step.is_some()).count();
            println!(
                "{}: {} images reconstructed, {detected} with a detected step",
                data.name,
                rows.len()
            );
            Ok(())
        }),
        Command::Eval => {
            let mut reports = Vec::new();
            for_each_category(run, |data| {
                reports.push(pipeline::eval_category(run, data)?);
                Ok(())
            })?;
            pipeline::write_metrics(run, &reports)?;
            print!("{}", std::fs::read_to_string(run.out.join("metrics.txt"))?);
            Ok(())
        }
        Command::Report => for_each_category(run, |data| {
            let n = pipeline::report_category(run, data)?;
            println!(
                "{}: {n} panels in {}",
                data.name,
                run.category_dir(&data.name).join("report").display()
            );
            Ok(())
        }),
        Command::SynthPreview { rows } => {
            let layout = run.dataset()?;
            let first = run
                .categories(&layout)?
                .into_iter()
                .next()
                .context("no category to preview")?;
            let data = run.load(&layout, &first)?;
            let path = pipeline::synth_preview(run, &data.train, *rows)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::MakeToy => {
            let root = run
                .config
                .dataset_root
                .as_deref()
                .context("make-toy needs --dataset or dataset_root")?;
            let dir = pipeline::make_toy(run, root)?;
            println!("wrote {}", dir.display());
            Ok(())
        }
        Command::Run => {
            for r in pipeline::run_all(run)? {
                println!("{}", r.summary());
            }
            Ok(())
        }
    }
}

fn detail(err: &anyhow::Error) -> String {
    let mut lines = Vec::new();
    for cause in err.chain() {
        match cause.downcast_ref::<Error>() {
            Some(Error::Dataset(issues)) => {
                lines.push(format!(
                    "dataset validation failed with {} issue(s):",
                    issues.len()
                ));
                lines.extend(issues.iter().map(|i| format!("  {i}")));
            }
            _ => lines.push(cause.to_string()),
        }
    }
    lines.join("\n")
}

fn write_error_log(out: &Path, detail: &str) -> Option<PathBuf> {
    std::fs::create_dir_all(out).ok()?;
    let path = out.join("error.log");
    std::fs::write(&path, format!("{detail}\n")).ok()?;
    Some(path)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (cfg, out) = match cli.overrides.resolve() {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{}", detail(&e));
            return ExitCode::FAILURE;
        }
    };
    let result = Run::new(cfg, out.clone())
        .map_err(anyhow::Error::from)
        .and_then(|run| {
            let echoed = run.echo_config()?;
            println!("seed = {}", run.config.seed);
            println!("output = {}", run.out.display());
            print!("{echoed}");
            execute(&cli.command, &run)
        });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.chain().nth(1) {
                Some(_) => eprintln!("error: {e}: {}", e.root_cause()),
                None => eprintln!("error: {e}"),
            }
            let detail = detail(&e);
            eprintln!("{detail}");
            if let Some(p) = write_error_log(&out, &detail) {
                eprintln!("detail log: {}", p.display());
            }
            ExitCode::FAILURE
        }
    }
}
