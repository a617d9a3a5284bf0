//! Evaluation protocol: per-gene Pearson correlation over pooled test
//! spots, HEG/HVG/ALL panel means, fold aggregation, cross-validation,
//! transfer to another dataset, and latent export with k-means.
//!
//! Genes whose predictions or ground truth are constant on the test spots
//! have no defined correlation. They are left out of panel means and
//! counted instead.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use crate::binio;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::featurize::Encoders;
use crate::model::GeneQueryModel;
use crate::numcore::SplitMix64;
use crate::stdata::preprocess::top_k_desc;
use crate::stdata::{make_gene_split, make_wsi_folds, Dataset, ExpressionMatrix, GeneRecord, GeneSplit, SplitPlan};
use crate::trainer::{Checkpoint, EpochLog, Trainer};

pub const PANEL_SIZE: usize = 50;
pub const KMEANS_MAX_ITER: usize = 100;

/// Sample Pearson correlation. `None` when either side has zero variance.
pub fn pearson(pred: &[f64], truth: &[f64]) -> Result<Option<f64>> {
    if pred.len() != truth.len() {
        return Err(Error::Argument(format!(
            "pearson over {} predictions and {} observations",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len();
    if n < 2 {
        return Err(Error::Argument(format!("pearson needs at least 2 samples, got {n}")));
    }
    // an exactly constant side can leave rounding residue in the sums
    if pred.iter().all(|&v| v == pred[0]) || truth.iter().all(|&v| v == truth[0]) {
        return Ok(None);
    }
    let mx = pred.iter().sum::<f64>() / n as f64;
    let my = truth.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in pred.iter().zip(truth) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(None);
    }
    Ok(Some((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Panel {
    Heg,
    Hvg,
    All,
}

impl Panel {
    pub const ALL: [Panel; 3] = [Panel::Heg, Panel::Hvg, Panel::All];

    pub fn as_str(self) -> &'static str {
        match self {
            Panel::Heg => "HEG",
            Panel::Hvg => "HVG",
            Panel::All => "ALL",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Seen,
    Unseen,
    All,
}

impl Scope {
    pub fn as_str(self) -> &'static str {
        match self {
            Scope::Seen => "seen",
            Scope::Unseen => "unseen",
            Scope::All => "all",
        }
    }
}

impl std::str::FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "seen" => Ok(Scope::Seen),
            "unseen" => Ok(Scope::Unseen),
            "all" => Ok(Scope::All),
            other => Err(Error::Argument(format!(
                "unknown scope {other:?} (expected seen, unseen or all)"
            ))),
        }
    }
}

/// Column indices of an evaluated gene set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenePanels {
    pub heg: Vec<usize>,
    pub hvg: Vec<usize>,
    pub all: Vec<usize>,
}

impl GenePanels {
    pub fn get(&self, panel: Panel) -> &[usize] {
        match panel {
            Panel::Heg => &self.heg,
            Panel::Hvg => &self.hvg,
            Panel::All => &self.all,
        }
    }
}

/// Top genes by mean and by population variance of the ground truth,
/// ties to the lower index.
pub fn build_panels(truth: &ExpressionMatrix) -> GenePanels {
    let (n, m) = (truth.rows(), truth.cols());
    let mut means = vec![0.0; m];
    let mut vars = vec![0.0; m];
    if n > 0 {
        for (c, (mean, var)) in means.iter_mut().zip(vars.iter_mut()).enumerate() {
            let col = truth.column(c);
            *mean = col.iter().sum::<f64>() / n as f64;
            *var = col.iter().map(|v| (v - *mean).powi(2)).sum::<f64>() / n as f64;
        }
    }
    GenePanels {
        heg: top_k_desc(&means, PANEL_SIZE),
        hvg: top_k_desc(&vars, PANEL_SIZE),
        all: (0..m).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PanelScore {
    pub panel: Panel,
    /// Mean PCC over the panel's defined genes; 0 when none are defined.
    pub value: f64,
    pub used: usize,
    pub excluded: usize,
    pub all_excluded: bool,
}

/// Scores of one fold under one gene scope.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldEntry {
    pub fold: usize,
    pub scope: Scope,
    pub scores: Vec<PanelScore>,
}

impl FoldEntry {
    pub fn score(&self, panel: Panel) -> &PanelScore {
        self.scores.iter().find(|s| s.panel == panel).expect("every panel scored")
    }
}

/// Per-gene PCC of a `spots x genes` prediction against truth.
pub fn gene_pccs(pred: &[f64], truth: &ExpressionMatrix) -> Result<Vec<Option<f64>>> {
    let (n, m) = (truth.rows(), truth.cols());
    if pred.len() != n * m {
        return Err(Error::DimensionMismatch {
            context: "prediction cells vs truth cells".into(),
            expected: n * m,
            found: pred.len(),
        });
    }
    (0..m)
        .map(|c| {
            let p: Vec<f64> = (0..n).map(|r| pred[r * m + c]).collect();
            pearson(&p, &truth.column(c))
        })
        .collect()
}

/// Panel means restricted to genes with `in_scope[c]`.
pub fn score_panels(pccs: &[Option<f64>], panels: &GenePanels, in_scope: &[bool]) -> Vec<PanelScore> {
    Panel::ALL
        .iter()
        .map(|&panel| {
            let genes: Vec<usize> = panels.get(panel).iter().copied().filter(|&c| in_scope[c]).collect();
            let defined: Vec<f64> = genes.iter().filter_map(|&c| pccs[c]).collect();
            let used = defined.len();
            PanelScore {
                panel,
                value: if used == 0 { 0.0 } else { defined.iter().sum::<f64>() / used as f64 },
                used,
                excluded: genes.len() - used,
                all_excluded: used == 0,
            }
        })
        .collect()
}

/// Predictions and truth pooled over `test_wsis` for the library columns
/// `genes`, spots concatenated in the given slide order.
pub fn pooled_predictions(
    model: &GeneQueryModel<f32>,
    enc: &Encoders,
    ds: &Dataset,
    test_wsis: &[String],
    genes: &[usize],
) -> Result<(Vec<f64>, ExpressionMatrix)> {
    let records: Vec<&GeneRecord> = genes.iter().map(|&j| ds.library.get(j)).collect();
    let mut preds = Vec::new();
    let mut parts = Vec::new();
    for id in test_wsis {
        let w = ds.wsi(id).ok_or_else(|| Error::UnknownId(id.clone()))?;
        preds.extend(model.predict_matrix(enc, w, &records)?.into_iter().map(f64::from));
        parts.push(w.expression.select_columns(genes));
    }
    let truth = ExpressionMatrix::vstack(&parts.iter().collect::<Vec<_>>())?;
    Ok((preds, truth))
}

/// Scores one fold for each requested scope. `seen` are library indices
/// used in training; panels are built over all of `genes`.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &GeneQueryModel<f32>,
    enc: &Encoders,
    ds: &Dataset,
    test_wsis: &[String],
    genes: &[usize],
    seen: &[usize],
    scopes: &[Scope],
    fold: usize,
) -> Result<Vec<FoldEntry>> {
    let (preds, truth) = pooled_predictions(model, enc, ds, test_wsis, genes)?;
    let pccs = gene_pccs(&preds, &truth)?;
    let panels = build_panels(&truth);
    let seen: HashSet<usize> = seen.iter().copied().collect();
    Ok(scopes
        .iter()
        .map(|&scope| {
            let in_scope: Vec<bool> = genes
                .iter()
                .map(|j| match scope {
                    Scope::All => true,
                    Scope::Seen => seen.contains(j),
                    Scope::Unseen => !seen.contains(j),
                })
                .collect();
            FoldEntry {
                fold,
                scope,
                scores: score_panels(&pccs, &panels, &in_scope),
            }
        })
        .collect())
}

/// Arithmetic mean and population variance.
pub fn aggregate_folds(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub panel: Panel,
    pub mean: f64,
    pub var: f64,
    pub sd: f64,
}

/// All folds of one scope plus their aggregate.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub scope: Scope,
    pub folds: Vec<FoldEntry>,
    pub aggregate: Vec<Aggregate>,
}

impl EvalReport {
    pub fn from_folds(scope: Scope, folds: Vec<FoldEntry>) -> Self {
        let aggregate = Panel::ALL
            .iter()
            .map(|&panel| {
                let vals: Vec<f64> = folds.iter().map(|f| f.score(panel).value).collect();
                let (mean, var) = aggregate_folds(&vals);
                Aggregate {
                    panel,
                    mean,
                    var,
                    sd: var.sqrt(),
                }
            })
            .collect();
        Self { scope, folds, aggregate }
    }

    pub fn mean(&self, panel: Panel) -> f64 {
        self.aggregate.iter().find(|a| a.panel == panel).map(|a| a.mean).unwrap_or(0.0)
    }
}

/// `panel scope fold value var sd used excluded`; fold rows leave `var`
/// and `sd` as `-`, aggregate rows use fold `mean`.
pub fn report_tsv(reports: &[EvalReport]) -> String {
    let mut s = String::from("panel\tscope\tfold\tvalue\tvar\tsd\tused\texcluded\n");
    for r in reports {
        for panel in Panel::ALL {
            for f in &r.folds {
                let sc = f.score(panel);
                let _ = writeln!(
                    s,
                    "{}\t{}\t{}\t{}\t-\t-\t{}\t{}",
                    panel.as_str(),
                    r.scope.as_str(),
                    f.fold,
                    sc.value,
                    sc.used,
                    sc.excluded
                );
            }
            let a = r.aggregate.iter().find(|a| a.panel == panel).unwrap();
            let used: usize = r.folds.iter().map(|f| f.score(panel).used).sum();
            let excluded: usize = r.folds.iter().map(|f| f.score(panel).excluded).sum();
            let _ = writeln!(
                s,
                "{}\t{}\tmean\t{}\t{}\t{}\t{}\t{}",
                panel.as_str(),
                r.scope.as_str(),
                a.mean,
                a.var,
                a.sd,
                used,
                excluded
            );
        }
    }
    s
}

pub fn report_txt(reports: &[EvalReport], title: &str) -> String {
    let mut s = format!("{title}\n");
    for r in reports {
        let _ = writeln!(s, "\nscope: {} ({} folds)", r.scope.as_str(), r.folds.len());
        for a in &r.aggregate {
            let _ = writeln!(
                s,
                "  {}  mean {:.4}  var {:.6}  sd {:.4}",
                a.panel.as_str(),
                a.mean,
                a.var,
                a.sd
            );
        }
        for f in &r.folds {
            let flagged: Vec<&str> = f
                .scores
                .iter()
                .filter(|sc| sc.all_excluded)
                .map(|sc| sc.panel.as_str())
                .collect();
            let excluded = f.score(Panel::All).excluded;
            let mut line = format!("  fold {}: ALL {:.4}", f.fold, f.score(Panel::All).value);
            if excluded > 0 {
                let _ = write!(line, ", {excluded} zero-variance genes excluded");
            }
            if !flagged.is_empty() {
                let _ = write!(line, ", no defined genes in {}", flagged.join("/"));
            }
            s.push_str(&line);
            s.push('\n');
        }
    }
    s
}

pub fn write_reports(dir: &Path, reports: &[EvalReport], title: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    binio::write_file(&dir.join("report.tsv"), report_tsv(reports).as_bytes())?;
    binio::write_file(&dir.join("report.txt"), report_txt(reports, title).as_bytes())
}

/// Output of a cross-validation run.
#[derive(Debug, Clone)]
pub struct CvResult {
    pub plan: SplitPlan,
    /// One report per requested scope.
    pub reports: Vec<EvalReport>,
    pub logs: Vec<Vec<EpochLog>>,
    pub checkpoints: Vec<Checkpoint>,
}

/// Trains and evaluates every fold. Folds run on up to `threads` threads;
/// results are identical for any thread count.
pub fn cross_validate(
    ds: &Dataset,
    cfg: &RunConfig,
    n_folds: usize,
    gene_ratio: Option<f64>,
    scopes: &[Scope],
    threads: usize,
) -> Result<CvResult> {
    let folds = make_wsi_folds(&ds.wsi_ids(), n_folds, cfg.seed)?;
    let gene_split = gene_ratio
        .map(|r| make_gene_split(ds.library.len(), r, cfg.seed))
        .transpose()?;
    let plan = SplitPlan {
        folds,
        gene_split,
        seed: cfg.seed,
    };
    let all: Vec<usize> = (0..ds.library.len()).collect();
    let seen = seen_genes(plan.gene_split.as_ref(), all.len());
    let run_fold = |i: usize| -> Result<(Vec<FoldEntry>, Vec<EpochLog>, Checkpoint)> {
        let fold = &plan.folds[i];
        let out = Trainer::new(ds, &fold.train, &seen, cfg)?.run(|_| {})?;
        let entries = evaluate(&out.model, &out.encoders, ds, &fold.test, &all, &seen, scopes, i)?;
        Ok((entries, out.log, out.checkpoint))
    };
    let threads = threads.max(1);
    let mut results = Vec::with_capacity(plan.folds.len());
    let idx: Vec<usize> = (0..plan.folds.len()).collect();
    for group in idx.chunks(threads) {
        if group.len() == 1 {
            results.push(run_fold(group[0]));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = group.iter().map(|&i| s.spawn(move || run_fold(i))).collect();
            for h in handles {
                results.push(h.join().expect("fold thread panicked"));
            }
        });
    }
    let mut per_scope: Vec<Vec<FoldEntry>> = vec![Vec::new(); scopes.len()];
    let mut logs = Vec::new();
    let mut checkpoints = Vec::new();
    for r in results {
        let (entries, log, ck) = r?;
        for (k, e) in entries.into_iter().enumerate() {
            per_scope[k].push(e);
        }
        logs.push(log);
        checkpoints.push(ck);
    }
    let reports = scopes
        .iter()
        .zip(per_scope)
        .map(|(&scope, folds)| EvalReport::from_folds(scope, folds))
        .collect();
    Ok(CvResult {
        plan,
        reports,
        logs,
        checkpoints,
    })
}

/// Library indices of `b` whose names appear in `trained`, in `b`'s order.
pub fn gene_intersection(trained: &[String], b: &Dataset) -> Result<Vec<usize>> {
    let names: HashSet<&str> = trained.iter().map(String::as_str).collect();
    let shared: Vec<usize> = (0..b.library.len())
        .filter(|&j| names.contains(b.library.get(j).name.as_str()))
        .collect();
    if shared.is_empty() {
        return Err(Error::Argument("trained genes and target dataset share no gene names".into()));
    }
    Ok(shared)
}

/// Evaluates a trained checkpoint on every slide of dataset `b`, over the
/// genes the two share by name. Queries use `b`'s gene metadata.
pub fn transfer_eval(ckpt: &Checkpoint, b: &Dataset) -> Result<(EvalReport, Vec<usize>)> {
    let shared = gene_intersection(&ckpt.genes, b)?;
    let model = ckpt.model()?;
    let enc = Encoders::new(
        &ckpt.config.gene_spec(),
        &ckpt.config.image_spec()?,
        (b.patch_h, b.patch_w),
        b.feature_dim,
    )?;
    if enc.image.dim() != ckpt.img_in_dim {
        return Err(Error::DimensionMismatch {
            context: "image features of the target dataset".into(),
            expected: ckpt.img_in_dim,
            found: enc.image.dim(),
        });
    }
    let entries = evaluate(&model, &enc, b, &b.wsi_ids(), &shared, &shared, &[Scope::All], 0)?;
    Ok((EvalReport::from_folds(Scope::All, entries), shared))
}

/// Per-spot latent vectors of one slide (`spots x d_fuse`).
pub fn latent_export(
    model: &GeneQueryModel<f32>,
    enc: &Encoders,
    ds: &Dataset,
    wsi: &str,
    genes: &[usize],
) -> Result<Vec<f32>> {
    let w = ds.wsi(wsi).ok_or_else(|| Error::UnknownId(wsi.to_string()))?;
    let records: Vec<&GeneRecord> = genes.iter().map(|&j| ds.library.get(j)).collect();
    Ok(model.predict_with_latents(enc, w, &records)?.latents.unwrap_or_default())
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// k-means with k-means++ seeding and at most 100 Lloyd iterations over
/// `n` row-major points of width `d`. Ties go to the lower cluster index.
pub fn kmeans(points: &[f64], d: usize, k: usize, seed: u64) -> Result<Vec<usize>> {
    if d == 0 || !points.len().is_multiple_of(d) {
        return Err(Error::Shape(format!("{} values do not form rows of width {d}", points.len())));
    }
    let n = points.len() / d;
    if k == 0 || k > n {
        return Err(Error::Argument(format!("k = {k} must lie in 1..={n} (the point count)")));
    }
    let row = |i: usize| &points[i * d..(i + 1) * d];
    let mut rng = SplitMix64::stream(seed, "kmeans");
    let mut centers: Vec<f64> = row(rng.below(n)).to_vec();
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(row(i), &centers[..d])).collect();
    for _ in 1..k {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &w) in dist.iter().enumerate() {
                acc += w;
                if acc > target && w > 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.below(n)
        };
        let c = row(pick).to_vec();
        for (i, dv) in dist.iter_mut().enumerate() {
            *dv = dv.min(sq_dist(row(i), &c));
        }
        centers.extend(c);
    }
    let nearest = |centers: &[f64], i: usize| {
        let mut best = (0, f64::INFINITY);
        for c in 0..k {
            let dv = sq_dist(row(i), &centers[c * d..(c + 1) * d]);
            if dv < best.1 {
                best = (c, dv);
            }
        }
        best.0
    };
    let mut labels: Vec<usize> = (0..n).map(|i| nearest(&centers, i)).collect();
    for _ in 0..KMEANS_MAX_ITER {
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            counts[l] += 1;
            for (s, &v) in sums[l * d..(l + 1) * d].iter_mut().zip(row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centers[c * d + j] = sums[c * d + j] / counts[c] as f64;
                }
            }
        }
        let next: Vec<usize> = (0..n).map(|i| nearest(&centers, i)).collect();
        if next == labels {
            break;
        }
        labels = next;
    }
    Ok(labels)
}

/// Training genes of a plan: the seen side of its gene split, else all `m`.
pub fn seen_genes(split: Option<&GeneSplit>, m: usize) -> Vec<usize> {
    split.map(|s| s.seen.clone()).unwrap_or_else(|| (0..m).collect())
}
