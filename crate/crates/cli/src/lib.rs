//! Subcommands of the `genequery` binary. Every command writes only under
//! its `--out` directory and echoes the resolved config there.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use genequery::binio;
use genequery::config::RunConfig;
use genequery::error::ErrorClass;
use genequery::evalkit::{self, EvalReport, Scope};
use genequery::model::Mode;
use genequery::stdata::{load_dataset, synth_generate, Dataset, GeneRecord, SynthParams};
use genequery::trainer::{loss_log_text, Checkpoint, Trainer};
use genequery::{Error, Result};

pub const CHECKPOINT_FILE: &str = "model.gqck";

#[derive(Debug, Parser)]
#[command(name = "genequery", version, about = "Predict spot gene expression by querying genes against histology")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset with planted structure.
    Synth(SynthArgs),
    /// Train on every slide of a dataset and save a checkpoint.
    Train(TrainArgs),
    /// Cross-validate over slides, or score a checkpoint on another dataset.
    Eval(EvalArgs),
    /// Per-spot predictions for named genes.
    Predict(PredictArgs),
    /// Per-spot latent vectors plus k-means labels.
    ExportLatent(LatentArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 2)]
    pub wsis: usize,
    #[arg(long, default_value_t = 200)]
    pub spots_per_wsi: usize,
    #[arg(long, default_value_t = 60)]
    pub m_genes: usize,
    #[arg(long, default_value_t = 16)]
    pub feature_dim: usize,
    #[arg(long, default_value_t = 1.0)]
    pub noise_sd: f64,
    /// Square patch side; 0 writes feature vectors instead of images.
    #[arg(long, default_value_t = 0)]
    pub patch_size: usize,
    /// Seed of the gene vocabulary; datasets sharing it agree on gene meaning.
    #[arg(long)]
    pub world_seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub gene_offset: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub mode: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, default_value_t = 2)]
    pub folds: usize,
    /// Fraction of genes seen in training; the rest are held out.
    #[arg(long)]
    pub gene_ratio: Option<f64>,
    /// seen, unseen or all; defaults to unseen with --gene-ratio.
    #[arg(long)]
    pub scope: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Second dataset to score the checkpoint on, over shared gene names.
    #[arg(long)]
    pub transfer: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated gene names; unknown names use the dataset's metadata
    /// when present, else the name alone.
    #[arg(long, value_delimiter = ',', required = true)]
    pub genes: Vec<String>,
}

#[derive(Debug, Args)]
pub struct LatentArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Usage => 1,
        ErrorClass::Data => 2,
        ErrorClass::Numeric => 3,
    }
}

/// Parses `args` (program name first) and runs the command. Returns the
/// process exit code.
pub fn main_with<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth(a) => cmd_synth(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Predict(a) => cmd_predict(&a),
        Command::ExportLatent(a) => cmd_export_latent(&a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Evaluation parallelism: available cores, capped by `GENEQUERY_THREADS`.
pub fn thread_budget() -> usize {
    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    match std::env::var("GENEQUERY_THREADS").ok().and_then(|v| v.trim().parse::<usize>().ok()) {
        Some(cap) if cap > 0 => cores.min(cap),
        _ => cores,
    }
}

fn resolve_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(m) = &a.mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_prepared(path: &Path, cfg: &RunConfig) -> Result<Dataset> {
    load_dataset(path)?.prepared(cfg.min_spots, cfg.hvg_k)
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let p = SynthParams {
        n_wsis: a.wsis,
        spots_per_wsi: a.spots_per_wsi,
        m_genes: a.m_genes,
        feature_dim: a.feature_dim,
        noise_sd: a.noise_sd,
        seed: a.seed,
        world_seed: a.world_seed,
        gene_offset: a.gene_offset,
        patch_size: a.patch_size,
    };
    synth_generate(&p, &a.out)?;
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_config(&a.run)?;
    let ds = load_prepared(&a.run.data, &cfg)?;
    cfg.resolve(ds.payload_kind);
    create_dir(&a.run.out)?;
    write_text(&a.run.out.join("config.txt"), &cfg.to_text())?;
    let genes: Vec<usize> = (0..ds.library.len()).collect();
    let trainer = Trainer::new(&ds, &ds.wsi_ids(), &genes, &cfg)?;
    let out = trainer.run(|e| {
        let eval = e.eval_mse.map(|v| format!(" eval_mse {v:.6}")).unwrap_or_default();
        eprintln!("epoch {:>4} train_mse {:.6}{eval}", e.epoch, e.train_mse);
    })?;
    write_text(&a.run.out.join("loss.tsv"), &loss_log_text(&out.log))?;
    out.checkpoint.save(&a.run.out.join(CHECKPOINT_FILE))
}

fn parse_scope(a: &EvalArgs) -> Result<Scope> {
    match &a.scope {
        Some(s) => s.parse(),
        None if a.gene_ratio.is_some() => Ok(Scope::Unseen),
        None => Ok(Scope::All),
    }
}

pub fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let scope = parse_scope(a)?;
    if let Some(ck) = &a.checkpoint {
        return eval_checkpoint(a, ck, scope);
    }
    if a.transfer.is_some() {
        return Err(Error::Argument("--transfer needs --checkpoint".into()));
    }
    if a.gene_ratio.is_none() && scope != Scope::All {
        return Err(Error::Argument(format!("--scope {} needs --gene-ratio", scope.as_str())));
    }
    let mut cfg = resolve_config(&a.run)?;
    let ds = load_prepared(&a.run.data, &cfg)?;
    cfg.resolve(ds.payload_kind);
    create_dir(&a.run.out)?;
    write_text(&a.run.out.join("config.txt"), &cfg.to_text())?;
    let cv = evalkit::cross_validate(&ds, &cfg, a.folds, a.gene_ratio, &[scope], thread_budget())?;
    let mut splits = String::from("fold\ttrain\ttest\n");
    for (i, f) in cv.plan.folds.iter().enumerate() {
        let _ = writeln!(splits, "{i}\t{}\t{}", f.train.join(","), f.test.join(","));
        write_text(&a.run.out.join(format!("loss_fold{i}.tsv")), &loss_log_text(&cv.logs[i]))?;
    }
    if let Some(gs) = &cv.plan.gene_split {
        let names = |idx: &[usize]| idx.iter().map(|&j| ds.library.get(j).name.clone()).collect::<Vec<_>>().join(",");
        let _ = writeln!(splits, "seen\t{}\t-", names(&gs.seen));
        let _ = writeln!(splits, "unseen\t{}\t-", names(&gs.unseen));
    }
    write_text(&a.run.out.join("splits.tsv"), &splits)?;
    let title = match a.gene_ratio {
        Some(r) => format!("{}-fold cross-validation, seen gene ratio {r}", a.folds),
        None => format!("{}-fold cross-validation", a.folds),
    };
    evalkit::write_reports(&a.run.out, &cv.reports, &title)
}

fn eval_checkpoint(a: &EvalArgs, ck: &Path, scope: Scope) -> Result<()> {
    if scope != Scope::All {
        return Err(Error::Argument("checkpoint evaluation only supports --scope all".into()));
    }
    let ckpt = Checkpoint::load(ck)?;
    let target = a.transfer.as_deref().unwrap_or(&a.run.data);
    let ds = load_prepared(target, &ckpt.config)?;
    create_dir(&a.run.out)?;
    write_text(&a.run.out.join("config.txt"), &ckpt.config.to_text())?;
    let (report, shared): (EvalReport, Vec<usize>) = evalkit::transfer_eval(&ckpt, &ds)?;
    let names: Vec<&str> = shared.iter().map(|&j| ds.library.get(j).name.as_str()).collect();
    write_text(&a.run.out.join("genes.txt"), &(names.join("\n") + "\n"))?;
    let title = format!(
        "checkpoint {} on {} ({} shared genes)",
        ck.display(),
        target.display(),
        shared.len()
    );
    evalkit::write_reports(&a.run.out, &[report], &title)
}

/// Library record for `name`, else a bare record carrying only the name.
fn query_record(ds: &Dataset, name: &str) -> Result<GeneRecord> {
    match ds.library.index_of(name) {
        Some(j) => Ok(ds.library.get(j).clone()),
        None => GeneRecord::new(name, ""),
    }
}

pub fn cmd_predict(a: &PredictArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = load_prepared(&a.data, &ckpt.config)?;
    let model = ckpt.model()?;
    let enc = ckpt.encoders()?;
    let records = a.genes.iter().map(|n| query_record(&ds, n)).collect::<Result<Vec<_>>>()?;
    let refs: Vec<&GeneRecord> = records.iter().collect();
    create_dir(&a.out)?;
    write_text(&a.out.join("config.txt"), &ckpt.config.to_text())?;
    let mut s = String::from("spot_id\tx\ty\tgene\tvalue\n");
    for w in &ds.wsis {
        let preds = model.predict_matrix(&enc, w, &refs)?;
        for (i, spot) in w.spots.iter().enumerate() {
            for (j, r) in records.iter().enumerate() {
                let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", spot.spot_id, spot.x, spot.y, r.name, preds[i * refs.len() + j]);
            }
        }
    }
    write_text(&a.out.join("predictions.tsv"), &s)
}

pub fn cmd_export_latent(a: &LatentArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let ds = load_prepared(&a.data, &ckpt.config)?;
    if a.k == 0 || a.k > ds.n_spots() {
        return Err(Error::Argument(format!("--k {} must lie in 1..={}", a.k, ds.n_spots())));
    }
    let model = ckpt.model()?;
    let enc = ckpt.encoders()?;
    let genes = evalkit::gene_intersection(&ckpt.genes, &ds)?;
    let d = model.config().d_fuse;
    let mut latents = Vec::with_capacity(ds.n_spots() * d);
    for w in &ds.wsis {
        latents.extend(evalkit::latent_export(&model, &enc, &ds, &w.id, &genes)?);
    }
    let seed = a.seed.unwrap_or(ckpt.config.seed);
    let points: Vec<f64> = latents.iter().map(|&v| f64::from(v)).collect();
    let labels = evalkit::kmeans(&points, d, a.k, seed)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("config.txt"), &ckpt.config.to_text())?;
    binio::write_matrix(&a.out.join("latents.f32"), ds.n_spots(), d, &latents)?;
    let mut s = String::from("spot_id\twsi_id\tx\ty\tcluster\n");
    let spots = ds.wsis.iter().flat_map(|w| w.spots.iter());
    for (spot, l) in spots.zip(&labels) {
        let _ = writeln!(s, "{}\t{}\t{}\t{}\t{l}", spot.spot_id, spot.wsi_id, spot.x, spot.y);
    }
    write_text(&a.out.join("labels.tsv"), &s)
}
