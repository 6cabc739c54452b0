use std::path::{Path, PathBuf};
use std::process::ExitCode;

use bgnet::ablation::{planned_studies, run_study};
use bgnet::checkpoint;
use bgnet::config::{RunConfig, Variant};
use bgnet::data::{list_images, load_dataset, synthesize_dataset, DatasetSpec, LoadReport, SynthParams};
use bgnet::datamodel::{Plane, Sample};
use bgnet::error::{BgError, Result};
use bgnet::imageio;
use bgnet::metrics::MetricReport;
use bgnet::trainer::{complexity_report, predict, train_loop, TrainOutputs, Trainer, FINAL_CHECKPOINT};
use bgnet_tensor::ops::resize_plane;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "bgnet", version, about = "Boundary-guided camouflaged object segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Shared {
    /// Run configuration file (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write checkpoints, a step log and a manifest.
    Train {
        #[command(flatten)]
        shared: Shared,
        /// Model variant: a, b, c, d, e (full).
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Dataset root (overrides `data_root`).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write 8-bit prediction maps for every image in a directory.
    Predict {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        /// Also write edge probability maps under `<out>/edges`.
        #[arg(long)]
        emit_edges: bool,
    },
    /// Score prediction maps against ground-truth masks.
    Eval {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Train and score each configured ablation setting.
    Ablate {
        #[command(flatten)]
        shared: Shared,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train the cases of each study concurrently.
        #[arg(long)]
        parallel: bool,
    },
    /// Report parameter and FLOP counts.
    Complexity {
        #[command(flatten)]
        shared: Shared,
        /// FLOPs per multiply-accumulate (1 or 2).
        #[arg(long)]
        mac_convention: Option<u8>,
        #[arg(long)]
        input_size: Option<usize>,
    },
    /// Generate a synthetic camouflage dataset.
    Synth {
        #[command(flatten)]
        shared: Shared,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0.25)]
        contrast: f64,
        #[arg(long, default_value = "train")]
        split: String,
    },
}

fn parse_variant(s: &str) -> std::result::Result<Variant, String> {
    s.parse().map_err(|e: BgError| e.to_string())
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    config_path: Option<&'a Path>,
    resolved_config: &'a RunConfig,
    build_id: String,
    seed: u64,
    outputs: Vec<PathBuf>,
}

fn build_id() -> String {
    let rev = std::process::Command::new("git")
        .args(["rev-parse", "--short", "HEAD"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string())
        .unwrap_or_else(|| "unknown".into());
    format!("bgnet {} ({rev})", env!("CARGO_PKG_VERSION"))
}

struct Run<'a> {
    command: &'a str,
    shared: &'a Shared,
    config: RunConfig,
    out: PathBuf,
}

impl<'a> Run<'a> {
    fn new(command: &'a str, shared: &'a Shared) -> Result<Self> {
        let mut config = match &shared.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = shared.seed {
            config.seed = seed;
        }
        let out = shared.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(command));
        Ok(Run { command, shared, config, out })
    }

    fn write_manifest(&self, outputs: &[PathBuf]) -> Result<()> {
        std::fs::create_dir_all(&self.out)?;
        let manifest = RunManifest {
            command: self.command,
            config_path: self.shared.config.as_deref(),
            resolved_config: &self.config,
            build_id: build_id(),
            seed: self.config.seed,
            outputs: outputs.to_vec(),
        };
        std::fs::write(self.out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }
}

fn data_root(cfg: &RunConfig, flag: &Option<PathBuf>) -> Result<PathBuf> {
    let root = flag
        .clone()
        .or_else(|| cfg.data_root.clone())
        .ok_or_else(|| BgError::config("data_root", "no dataset directory given (set data_root or pass --data)"))?;
    if !root.is_dir() {
        return Err(BgError::Load { path: root, message: "dataset directory does not exist".into() });
    }
    Ok(root)
}

fn report_load(split: &str, report: &LoadReport) {
    for p in &report.orphans {
        eprintln!("warning: {split}: no mask for {}, skipped", p.display());
    }
    for (p, m) in &report.unreadable {
        eprintln!("warning: {split}: cannot read {}: {m}", p.display());
    }
    for id in &report.no_boundary {
        eprintln!("warning: {split}: mask of {id} has no boundary; edge target is empty");
    }
}

fn load_split(cfg: &RunConfig, root: &Path, split: &str) -> Result<Vec<Sample>> {
    let (samples, report) = load_dataset(&DatasetSpec::from_run(cfg, root, split))?;
    report_load(split, &report);
    if samples.is_empty() {
        return Err(BgError::Load { path: root.join(split), message: "no usable samples".into() });
    }
    Ok(samples)
}

fn cmd_train(shared: &Shared, variant: Option<Variant>, data: &Option<PathBuf>) -> Result<()> {
    let mut run = Run::new("train", shared)?;
    if let Some(v) = variant {
        run.config.variant = v;
    }
    run.config.validate()?;
    let root = data_root(&run.config, data)?;
    let log_path = run.out.join("train_log.jsonl");
    let final_ckpt = run.out.join(FINAL_CHECKPOINT);
    run.write_manifest(&[log_path.clone(), final_ckpt.clone()])?;
    let samples = load_split(&run.config, &root, &run.config.train_split)?;
    let cfg = run.config.train();
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    let trainer = train_loop(&cfg, &samples, &TrainOutputs { dir: Some(run.out.clone()) }, &mut log)?;
    println!("trained {} steps on {} samples; checkpoint {}", trainer.steps, samples.len(), final_ckpt.display());
    Ok(())
}

fn cmd_predict(shared: &Shared, ckpt: &Path, images: &Path, emit_edges: bool) -> Result<()> {
    let mut run = Run::new("predict", shared)?;
    let trainer = Trainer::from_archive(&checkpoint::load(ckpt)?)?;
    run.config = RunConfig::from_parts(&trainer.config);
    let edge_dir = run.out.join("edges");
    run.write_manifest(&if emit_edges { vec![run.out.clone(), edge_dir.clone()] } else { vec![run.out.clone()] })?;
    if emit_edges {
        std::fs::create_dir_all(&edge_dir)?;
    }
    let mut inputs = Vec::new();
    let mut skipped = 0;
    for (stem, path) in list_images(images)? {
        match imageio::read_rgb(&path) {
            Ok(t) => inputs.push((stem, t)),
            Err(e) => {
                eprintln!("warning: skipping {}: {e}", path.display());
                skipped += 1;
            }
        }
    }
    let batch: Vec<_> = inputs.iter().map(|(_, t)| (t.shape()[1], t.shape()[2], t.clone())).collect();
    let preds = predict(&trainer.model, &trainer.store, &batch, 4)?;
    for ((stem, _), p) in inputs.iter().zip(&preds) {
        imageio::write_mask(&run.out.join(format!("{stem}.png")), &p.mask)?;
        if let (true, Some(e)) = (emit_edges, &p.edge) {
            imageio::write_mask(&edge_dir.join(format!("{stem}.png")), e)?;
        }
    }
    println!("wrote {} prediction maps to {} ({skipped} unreadable inputs skipped)", preds.len(), run.out.display());
    Ok(())
}

fn cmd_eval(shared: &Shared, pred: &Path, gt: &Path) -> Result<()> {
    let run = Run::new("eval", shared)?;
    let report_path = run.out.join("metrics.tsv");
    run.write_manifest(std::slice::from_ref(&report_path))?;
    let preds = list_images(pred)?;
    let gts = list_images(gt)?;
    let mut items = Vec::new();
    let mut unmatched = 0;
    for (stem, path) in &preds {
        match gts.iter().find(|(s, _)| s == stem) {
            Some((_, gt_path)) => {
                let g = imageio::read_mask(gt_path)?;
                let mut p = imageio::read_mask(path)?;
                if !p.same_dims(&g) {
                    p = Plane::new(g.height, g.width, resize_plane(&p.data, p.height, p.width, g.height, g.width));
                }
                items.push((stem.clone(), p, g));
            }
            None => {
                eprintln!("warning: prediction {stem} has no ground truth");
                unmatched += 1;
            }
        }
    }
    for (stem, _) in gts.iter().filter(|(s, _)| !preds.iter().any(|(p, _)| p == s)) {
        eprintln!("warning: ground truth {stem} has no prediction");
        unmatched += 1;
    }
    let report = MetricReport::evaluate(&items)?;
    let tsv = report.to_tsv();
    std::fs::write(&report_path, &tsv)?;
    print!("{tsv}");
    println!(
        "{} images scored, {unmatched} unmatched stems excluded, {} without foreground excluded from F_beta_w",
        items.len(),
        report.f_beta_w_excluded
    );
    Ok(())
}

fn cmd_ablate(shared: &Shared, data: &Option<PathBuf>, parallel: bool) -> Result<()> {
    let run = Run::new("ablate", shared)?;
    let studies = planned_studies(&run.config)?;
    let root = data_root(&run.config, data)?;
    let outputs: Vec<PathBuf> = studies.iter().map(|(k, _)| run.out.join(format!("ablation_{}.tsv", k.slug()))).collect();
    run.write_manifest(&outputs)?;
    let train = load_split(&run.config, &root, &run.config.train_split)?;
    let test = if root.join(&run.config.test_split).is_dir() {
        load_split(&run.config, &root, &run.config.test_split)?
    } else {
        eprintln!("warning: no {} split; scoring on the training split", run.config.test_split);
        train.clone()
    };
    for ((kind, cases), path) in studies.iter().zip(&outputs) {
        let table = run_study(*kind, cases, &train, &test, parallel)?;
        print!("{}", table.render());
        std::fs::write(path, table.to_tsv())?;
    }
    Ok(())
}

fn cmd_complexity(shared: &Shared, mac: Option<u8>, input_size: Option<usize>) -> Result<()> {
    let run = Run::new("complexity", shared)?;
    let path = run.out.join("complexity.json");
    run.write_manifest(std::slice::from_ref(&path))?;
    let size = input_size.unwrap_or(run.config.input_size);
    let report = complexity_report(&run.config.model(), size, mac.unwrap_or(run.config.mac_convention))?;
    print!("{}", report.render());
    std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn cmd_synth(shared: &Shared, count: usize, size: usize, contrast: f64, split: &str) -> Result<()> {
    let run = Run::new("synth", shared)?;
    if size == 0 || size % 32 != 0 {
        return Err(BgError::config("size", format!("{size} must be a positive multiple of 32")));
    }
    run.write_manifest(&[run.out.join(split)])?;
    let params = SynthParams { count, size, seed: run.config.seed, contrast };
    let written = synthesize_dataset(&run.out, split, &params)?;
    println!("wrote {} samples under {}", written.len(), run.out.join(split).display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Train { shared, variant, data } => cmd_train(shared, *variant, data),
        Command::Predict { shared, checkpoint, images, emit_edges } => cmd_predict(shared, checkpoint, images, *emit_edges),
        Command::Eval { shared, pred, gt } => cmd_eval(shared, pred, gt),
        Command::Ablate { shared, data, parallel } => cmd_ablate(shared, data, *parallel),
        Command::Complexity { shared, mac_convention, input_size } => cmd_complexity(shared, *mac_convention, *input_size),
        Command::Synth { shared, count, size, contrast, split } => cmd_synth(shared, *count, *size, *contrast, split),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
