//! MSE training with Adam, deterministic batching and the `GQCK`
//! checkpoint format.
//!
//! Gene-aware batches are up to `batch_size` training spots, each paired
//! with the full (chunked) gene sequence. Spot-aware batches are up to
//! `batch_size` gene queries against one slide's training spots, visiting
//! slides round-robin. Order is reshuffled every epoch from `(seed, epoch)`.
//! A seeded fraction of the training spots is held out and only used to log
//! an evaluation loss.

use std::collections::BTreeMap;
use std::path::Path;

use crate::binio::{self, put_f32s, put_u32, ByteReader};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::featurize::Encoders;
use crate::model::{GeneQueryModel, Mode};
use crate::numcore::{AdamState, Graph, NodeId, ParamStore, SplitMix64, Tensor};
use crate::stdata::{Dataset, ExprState, GeneRecord, SpotRecord};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GQCK";

/// Read access to training targets, so tests can observe which cells a
/// run touches.
pub trait Targets {
    fn target(&self, wsi: usize, spot: usize, gene: usize) -> f64;
}

impl Targets for Dataset {
    fn target(&self, wsi: usize, spot: usize, gene: usize) -> f64 {
        self.wsis[wsi].expression.get(spot, gene)
    }
}

/// Mean squared error over the cells where `mask` is set.
pub fn mse_loss(pred: &[f64], truth: &[f64], mask: &[bool]) -> Result<f64> {
    if pred.len() != truth.len() || pred.len() != mask.len() {
        return Err(Error::Shape(format!(
            "mse over {} predictions, {} targets, {} mask cells",
            pred.len(),
            truth.len(),
            mask.len()
        )));
    }
    let (mut sse, mut n) = (0.0, 0usize);
    for ((p, t), &m) in pred.iter().zip(truth).zip(mask) {
        if m {
            sse += (p - t) * (p - t);
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Argument("mse with zero valid cells".into()));
    }
    Ok(sse / n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Cell-weighted mean of the batch losses seen during the epoch.
    pub train_mse: f64,
    pub eval_mse: Option<f64>,
}

/// Writes `epoch  train_mse  eval_mse` lines.
pub fn loss_log_text(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch\ttrain_mse\teval_mse\n");
    for e in log {
        let eval = e.eval_mse.map(|v| v.to_string()).unwrap_or_else(|| "-".into());
        s.push_str(&format!("{}\t{}\t{}\n", e.epoch, e.train_mse, eval));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct SpotRef {
    wsi: usize,
    spot: usize,
}

/// A training run in progress.
pub struct Trainer<'a> {
    ds: &'a Dataset,
    targets: &'a dyn Targets,
    cfg: RunConfig,
    enc: Encoders,
    model: GeneQueryModel<f32>,
    adam: Option<AdamState<f32>>,
    genes: Vec<usize>,
    gene_records: Vec<&'a GeneRecord>,
    train: Vec<SpotRef>,
    eval: Vec<SpotRef>,
    img_cache: BTreeMap<usize, Vec<f32>>,
    gene_cache: Option<Vec<f32>>,
    log: Vec<EpochLog>,
}

/// Everything a finished run produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GeneQueryModel<f32>,
    pub encoders: Encoders,
    pub log: Vec<EpochLog>,
    pub checkpoint: Checkpoint,
}

impl<'a> Trainer<'a> {
    /// Prepares a run on the slides `train_wsis`, fitting only the library
    /// columns in `genes`. Expression must be normalized.
    pub fn new(ds: &'a Dataset, train_wsis: &[String], genes: &[usize], cfg: &RunConfig) -> Result<Self> {
        Self::with_targets(ds, ds, train_wsis, genes, cfg)
    }

    pub fn with_targets(
        ds: &'a Dataset,
        targets: &'a dyn Targets,
        train_wsis: &[String],
        genes: &[usize],
        cfg: &RunConfig,
    ) -> Result<Self> {
        let mut cfg = cfg.clone();
        cfg.validate()?;
        cfg.resolve(ds.payload_kind);
        if genes.is_empty() {
            return Err(Error::Argument("no genes to train on".into()));
        }
        if let Some(&bad) = genes.iter().find(|&&j| j >= ds.library.len()) {
            return Err(Error::Argument(format!("gene index {bad} outside the library")));
        }
        let mut wsi_idx = Vec::new();
        for id in train_wsis {
            let i = ds
                .wsis
                .iter()
                .position(|w| &w.id == id)
                .ok_or_else(|| Error::UnknownId(id.clone()))?;
            if ds.wsis[i].expression.state() != ExprState::Normalized {
                return Err(Error::ExpressionState(format!(
                    "training needs normalized expression, slide {id} is raw"
                )));
            }
            wsi_idx.push(i);
        }
        let mut all: Vec<SpotRef> = wsi_idx
            .iter()
            .flat_map(|&w| (0..ds.wsis[w].spots.len()).map(move |s| SpotRef { wsi: w, spot: s }))
            .collect();
        let n_eval = (cfg.eval_fraction * all.len() as f64).round() as usize;
        if n_eval >= all.len() {
            return Err(Error::Argument(format!(
                "{} training spots leave nothing to train on after the evaluation split",
                all.len()
            )));
        }
        let mut rng = SplitMix64::stream(cfg.seed, "eval-split");
        rng.shuffle(&mut all);
        let mut eval = all.split_off(all.len() - n_eval);
        all.sort_by_key(|r| (r.wsi, r.spot));
        eval.sort_by_key(|r| (r.wsi, r.spot));

        let enc = Encoders::new(
            &cfg.gene_spec(),
            &cfg.image_spec()?,
            (ds.patch_h, ds.patch_w),
            ds.feature_dim,
        )?;
        let mut model = GeneQueryModel::new(cfg.model_config(enc.image.dim(), enc.gene.dim()))?;
        enc.register_params(model.params_mut())?;
        let gene_records: Vec<&GeneRecord> = genes.iter().map(|&j| ds.library.get(j)).collect();

        let mut img_cache = BTreeMap::new();
        if !enc.image.is_trainable() {
            for &w in &wsi_idx {
                img_cache.insert(w, enc.image_features(&ds.wsis[w].spots, None)?);
            }
        }
        let gene_cache = if enc.gene.is_trainable() {
            None
        } else {
            Some(enc.gene_features(&gene_records, None)?)
        };
        Ok(Self {
            ds,
            targets,
            cfg,
            enc,
            model,
            adam: None,
            genes: genes.to_vec(),
            gene_records,
            train: all,
            eval,
            img_cache,
            gene_cache,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &GeneQueryModel<f32> {
        &self.model
    }

    /// Only valid before the first epoch.
    pub fn model_mut(&mut self) -> Result<&mut GeneQueryModel<f32>> {
        if self.adam.is_some() {
            return Err(Error::State("model edited after training started".into()));
        }
        Ok(&mut self.model)
    }

    pub fn log(&self) -> &[EpochLog] {
        &self.log
    }

    pub fn n_train_spots(&self) -> usize {
        self.train.len()
    }

    pub fn n_eval_spots(&self) -> usize {
        self.eval.len()
    }

    fn image_input(&self, g: &mut Graph<f32>, spots: &[SpotRef]) -> Result<NodeId> {
        let dim = self.enc.image.dim();
        if self.enc.image.is_trainable() {
            let recs: Vec<&SpotRecord> = spots.iter().map(|r| &self.ds.wsis[r.wsi].spots[r.spot]).collect();
            return self.enc.image.encode(g, self.model.params(), &recs, self.enc.patch_dims);
        }
        let mut flat = Vec::with_capacity(spots.len() * dim);
        for r in spots {
            flat.extend_from_slice(&self.img_cache[&r.wsi][r.spot * dim..(r.spot + 1) * dim]);
        }
        Ok(g.input(Tensor::matrix(spots.len(), dim, flat)?))
    }

    fn gene_input(&self, g: &mut Graph<f32>, genes: &[usize]) -> Result<NodeId> {
        let dim = self.enc.gene.dim();
        match &self.gene_cache {
            Some(cache) => {
                let mut flat = Vec::with_capacity(genes.len() * dim);
                for &k in genes {
                    flat.extend_from_slice(&cache[k * dim..(k + 1) * dim]);
                }
                Ok(g.input(Tensor::matrix(genes.len(), dim, flat)?))
            }
            None => {
                let recs: Vec<&GeneRecord> = genes.iter().map(|&k| self.gene_records[k]).collect();
                self.enc.gene.encode(g, self.model.params(), &recs)
            }
        }
    }

    /// Builds the loss of one batch; `genes` index into the training genes.
    /// Returns the graph, the loss node and the number of cells.
    fn batch_loss(&self, spots: &[SpotRef], genes: &[usize]) -> Result<(Graph<f32>, NodeId, usize)> {
        let mut g = Graph::new();
        let ei = self.image_input(&mut g, spots)?;
        let eg = self.gene_input(&mut g, genes)?;
        let coords: Vec<(i64, i64)> = spots
            .iter()
            .map(|r| {
                let s = &self.ds.wsis[r.wsi].spots[r.spot];
                (s.x, s.y)
            })
            .collect();
        let out = self.model.forward_batch(&mut g, ei, eg, Some(&coords))?;
        let mut target = Vec::with_capacity(spots.len() * genes.len());
        for r in spots {
            for &k in genes {
                target.push(self.targets.target(r.wsi, r.spot, self.genes[k]) as f32);
            }
        }
        let cells = target.len();
        let loss = g.masked_mse(out.preds, &target, &vec![true; cells])?;
        Ok((g, loss, cells))
    }

    /// Batches of one pass in schedule order.
    fn schedule(&self, spots: &[SpotRef], rng: Option<&mut SplitMix64>) -> Vec<(Vec<SpotRef>, Vec<usize>)> {
        let bs = self.cfg.batch_size;
        let all_genes: Vec<usize> = (0..self.genes.len()).collect();
        match self.cfg.mode {
            Mode::GeneAware => {
                let mut order = spots.to_vec();
                if let Some(rng) = rng {
                    rng.shuffle(&mut order);
                }
                order.chunks(bs).map(|c| (c.to_vec(), all_genes.clone())).collect()
            }
            Mode::SpotAware => {
                let mut by_wsi: BTreeMap<usize, Vec<SpotRef>> = BTreeMap::new();
                for &r in spots {
                    by_wsi.entry(r.wsi).or_default().push(r);
                }
                let mut rng = rng;
                let queues: Vec<Vec<(Vec<SpotRef>, Vec<usize>)>> = by_wsi
                    .into_values()
                    .map(|seq| {
                        let mut genes = all_genes.clone();
                        if let Some(r) = rng.as_deref_mut() {
                            r.shuffle(&mut genes);
                        }
                        genes.chunks(bs).map(|c| (seq.clone(), c.to_vec())).collect()
                    })
                    .collect();
                let rounds = queues.iter().map(Vec::len).max().unwrap_or(0);
                (0..rounds)
                    .flat_map(|i| queues.iter().filter_map(move |q| q.get(i).cloned()))
                    .collect()
            }
        }
    }

    /// Runs one epoch and returns its log entry.
    pub fn epoch(&mut self) -> Result<EpochLog> {
        let epoch = self.log.len() + 1;
        if self.adam.is_none() {
            self.adam = Some(AdamState::new(self.cfg.adam(), self.model.params()));
        }
        let mut rng = SplitMix64::stream(self.cfg.seed, &format!("epoch-{epoch}"));
        let batches = self.schedule(&self.train, Some(&mut rng));
        let (mut sse, mut cells) = (0f64, 0usize);
        for (b, (spots, genes)) in batches.iter().enumerate() {
            let (g, loss, n) = self.batch_loss(spots, genes)?;
            let l = g.scalar(loss);
            if !l.is_finite() {
                return Err(Error::NumericFailure(format!(
                    "loss is {l} at epoch {epoch}, batch {}",
                    b + 1
                )));
            }
            sse += l as f64 * n as f64;
            cells += n;
            let grads = g.backward(loss)?;
            let params = self.model.params_mut();
            params.zero_grads();
            g.accumulate_param_grads(&grads, params)?;
            self.adam.as_mut().unwrap().step(params)?;
        }
        if !self.model.params().all_finite() {
            return Err(Error::NumericFailure(format!(
                "parameters became non-finite in epoch {epoch}"
            )));
        }
        let eval_mse = self.eval_mse()?;
        let entry = EpochLog {
            epoch,
            train_mse: sse / cells as f64,
            eval_mse,
        };
        self.log.push(entry);
        Ok(entry)
    }

    fn eval_mse(&self) -> Result<Option<f64>> {
        if self.eval.is_empty() {
            return Ok(None);
        }
        let (mut sse, mut cells) = (0f64, 0usize);
        for (spots, genes) in self.schedule(&self.eval, None) {
            let (g, loss, n) = self.batch_loss(&spots, &genes)?;
            sse += g.scalar(loss) as f64 * n as f64;
            cells += n;
        }
        Ok(Some(sse / cells as f64))
    }

    /// Runs the remaining configured epochs, calling `observe` after each.
    pub fn run(mut self, mut observe: impl FnMut(&EpochLog)) -> Result<TrainOutcome> {
        while self.log.len() < self.cfg.epochs {
            let e = self.epoch()?;
            observe(&e);
        }
        Ok(self.finish())
    }

    pub fn finish(self) -> TrainOutcome {
        let mut params = self.model.params().clone();
        params.zero_grads();
        let checkpoint = Checkpoint {
            config: self.cfg.clone(),
            epoch: self.log.len(),
            img_in_dim: self.enc.image.dim(),
            gene_in_dim: self.enc.gene.dim(),
            patch_dims: self.enc.patch_dims,
            feature_dim: self.ds.feature_dim,
            genes: self.gene_records.iter().map(|r| r.name.clone()).collect(),
            params,
        };
        TrainOutcome {
            model: self.model,
            encoders: self.enc,
            log: self.log,
            checkpoint,
        }
    }
}

/// Trains for the configured number of epochs.
pub fn train(ds: &Dataset, train_wsis: &[String], genes: &[usize], cfg: &RunConfig) -> Result<TrainOutcome> {
    Trainer::new(ds, train_wsis, genes, cfg)?.run(|_| {})
}

/// A saved model: resolved config, geometry needed to rebuild the encoders,
/// trained gene names and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: usize,
    pub img_in_dim: usize,
    pub gene_in_dim: usize,
    pub patch_dims: (usize, usize),
    pub feature_dim: usize,
    pub genes: Vec<String>,
    pub params: ParamStore<f32>,
}

const META_KEYS: [&str; 7] = [
    "epoch",
    "img_in_dim",
    "gene_in_dim",
    "patch_h",
    "patch_w",
    "feature_dim",
    "genes",
];

impl Checkpoint {
    pub fn model(&self) -> Result<GeneQueryModel<f32>> {
        GeneQueryModel::from_params(
            self.config.model_config(self.img_in_dim, self.gene_in_dim),
            self.params.clone(),
        )
    }

    /// Rebuilds the encoders; frozen weights are regenerated from the seed.
    pub fn encoders(&self) -> Result<Encoders> {
        let enc = Encoders::new(
            &self.config.gene_spec(),
            &self.config.image_spec()?,
            self.patch_dims,
            self.feature_dim,
        )?;
        if enc.image.dim() != self.img_in_dim || enc.gene.dim() != self.gene_in_dim {
            return Err(Error::DimensionMismatch {
                context: "encoder widths recorded in checkpoint".into(),
                expected: self.img_in_dim + self.gene_in_dim,
                found: enc.image.dim() + enc.gene.dim(),
            });
        }
        Ok(enc)
    }

    fn header_text(&self) -> String {
        let mut s = self.config.to_text();
        s.push_str(&format!("epoch={}\n", self.epoch));
        s.push_str(&format!("img_in_dim={}\n", self.img_in_dim));
        s.push_str(&format!("gene_in_dim={}\n", self.gene_in_dim));
        s.push_str(&format!("patch_h={}\n", self.patch_dims.0));
        s.push_str(&format!("patch_w={}\n", self.patch_dims.1));
        s.push_str(&format!("feature_dim={}\n", self.feature_dim));
        s.push_str(&format!("genes={}\n", self.genes.join("\t")));
        s
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        put_u32(&mut out, binio::VERSION);
        let header = self.header_text();
        put_u32(&mut out, header.len() as u32);
        out.extend_from_slice(header.as_bytes());
        for (name, p) in self.params.iter() {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::State(format!("parameter name {name} too long")))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let shape = p.value.shape();
            out.push(shape.len() as u8);
            for &d in shape {
                put_u32(&mut out, d as u32);
            }
            put_f32s(&mut out, p.value.data().iter().copied());
        }
        put_u32(&mut out, self.params.len() as u32);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        let mut r = ByteReader::new(bytes, context);
        r.header(CHECKPOINT_MAGIC)?;
        let hlen = r.u32("header length")? as usize;
        let header = std::str::from_utf8(r.take(hlen, "header")?)
            .map_err(|_| Error::data(context, "checkpoint header is not UTF-8"))?;
        let mut meta = BTreeMap::new();
        let mut rest = String::new();
        for line in header.lines() {
            match line.split_once('=') {
                Some((k, v)) if META_KEYS.contains(&k) => {
                    meta.insert(k, v);
                }
                _ => {
                    rest.push_str(line);
                    rest.push('\n');
                }
            }
        }
        let config = RunConfig::parse(&rest)?;
        let num = |k: &str| -> Result<usize> {
            meta.get(k)
                .ok_or_else(|| Error::data(context, format!("header lacks {k}")))?
                .parse()
                .map_err(|_| Error::data(context, format!("bad {k} in header")))
        };
        let genes = match meta.get("genes") {
            Some(v) if !v.is_empty() => v.split('\t').map(str::to_string).collect(),
            _ => Vec::new(),
        };
        let mut params = ParamStore::new();
        while r.remaining() > 4 {
            let len = r.u16("section name length")? as usize;
            let name = std::str::from_utf8(r.take(len, "section name")?)
                .map_err(|_| Error::data(context, "section name is not UTF-8"))?
                .to_string();
            let rank = r.u8("section rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("section dims")? as usize);
            }
            let n = shape.iter().product();
            let values = r.f32s(n, &format!("section {name}"))?;
            params.insert(name, Tensor::new(shape, values)?)?;
        }
        let count = r.u32("section count")? as usize;
        if count != params.len() {
            return Err(Error::Truncated(format!(
                "{context}: trailer records {count} sections, found {}",
                params.len()
            )));
        }
        Ok(Self {
            config,
            epoch: num("epoch")?,
            img_in_dim: num("img_in_dim")?,
            gene_in_dim: num("gene_in_dim")?,
            patch_dims: (num("patch_h")?, num("patch_w")?),
            feature_dim: num("feature_dim")?,
            genes,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        binio::write_file(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&binio::read_file(path)?, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stdata::{synth_dataset, SynthParams};
    use std::cell::RefCell;
    use std::collections::BTreeSet;

    fn fixture() -> Dataset {
        let (ds, _) = synth_dataset(&SynthParams {
            n_wsis: 2,
            spots_per_wsi: 30,
            m_genes: 12,
            feature_dim: 8,
            ..SynthParams::default()
        })
        .unwrap();
        ds.normalized().unwrap()
    }

    fn small_cfg(mode: Mode) -> RunConfig {
        RunConfig {
            mode,
            d_fuse: 16,
            heads: 2,
            layers: 1,
            epochs: 3,
            batch_size: 10,
            gene_dim: 16,
            gene_buckets: 256,
            seed: 5,
            ..RunConfig::default()
        }
    }

    fn all_genes(ds: &Dataset) -> Vec<usize> {
        (0..ds.library.len()).collect()
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_loss(&[1.0, 2.0], &[1.0, 2.0], &[true; 2]).unwrap(), 0.0);
        assert_eq!(mse_loss(&[0.0], &[2.0], &[true]).unwrap(), 4.0);
        assert_eq!(mse_loss(&[1.0, 2.0], &[0.0, 0.0], &[true; 2]).unwrap(), 2.5);
        assert!(matches!(mse_loss(&[1.0], &[0.0], &[false]), Err(Error::Argument(_))));
        assert!(matches!(mse_loss(&[1.0], &[0.0, 1.0], &[true]), Err(Error::Shape(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_parameters() {
        let ds = fixture();
        let cfg = RunConfig { lr: 0.0, epochs: 1, ..small_cfg(Mode::GeneAware) };
        let t = Trainer::new(&ds, &ds.wsi_ids(), &all_genes(&ds), &cfg).unwrap();
        let before = t.model().params().clone();
        let out = t.run(|_| {}).unwrap();
        for ((_, a), (_, b)) in before.iter().zip(out.model.params().iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn zero_regressor_loss_is_mean_square_target() {
        let ds = fixture();
        for mode in [Mode::GeneAware, Mode::SpotAware] {
            let cfg = RunConfig { lr: 0.0, epochs: 1, eval_fraction: 0.0, ..small_cfg(mode) };
            let genes = all_genes(&ds);
            let mut t = Trainer::new(&ds, &ds.wsi_ids(), &genes, &cfg).unwrap();
            for name in ["reg.w", "reg.b"] {
                let p = t.model_mut().unwrap().params_mut().value_mut(name).unwrap();
                p.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
            let e = t.epoch().unwrap();
            let mut sq = 0.0;
            let mut n = 0.0;
            for w in &ds.wsis {
                for v in w.expression.values() {
                    let v32 = *v as f32 as f64;
                    sq += v32 * v32;
                    n += 1.0;
                }
            }
            assert!((e.train_mse - sq / n).abs() < 1e-6, "{mode:?} {} vs {}", e.train_mse, sq / n);
        }
    }

    #[test]
    fn one_step_matches_closed_form_adam() {
        let ds = fixture();
        let cfg = RunConfig {
            layers: 0,
            epochs: 1,
            eval_fraction: 0.0,
            batch_size: 100,
            lr: 0.01,
            ..small_cfg(Mode::GeneAware)
        };
        let w0 = ds.wsis[0].id.clone();
        let one = Dataset {
            wsis: vec![crate::stdata::Wsi {
                spots: ds.wsis[0].spots[..1].to_vec(),
                expression: crate::stdata::ExpressionMatrix::new(
                    1,
                    12,
                    ds.wsis[0].expression.row(0).to_vec(),
                    ExprState::Normalized,
                )
                .unwrap(),
                id: w0.clone(),
            }],
            ..ds.clone()
        };
        let mut t = Trainer::new(&one, &[w0], &[3], &cfg).unwrap();
        let b0 = t.model().params().value("reg.b").unwrap().data()[0] as f64;
        // prediction before the step, from an inference pass
        let p0 = t.model().predict_matrix(&t.enc, &one.wsis[0], &[one.library.get(3)]).unwrap()[0] as f64;
        let y = one.wsis[0].expression.get(0, 3) as f32 as f64;
        let grad = 2.0 * (p0 - y);
        t.epoch().unwrap();
        let b1 = t.model().params().value("reg.b").unwrap().data()[0] as f64;
        let want = b0 - 0.01 * grad / (grad.abs() + 1e-8);
        assert!((b1 - want).abs() < 1e-6, "{b1} vs {want}");
    }

    struct Tracker<'a> {
        ds: &'a Dataset,
        seen: RefCell<BTreeSet<usize>>,
    }

    impl Targets for Tracker<'_> {
        fn target(&self, wsi: usize, spot: usize, gene: usize) -> f64 {
            self.seen.borrow_mut().insert(gene);
            self.ds.target(wsi, spot, gene)
        }
    }

    #[test]
    fn seen_gene_training_never_reads_unseen_columns() {
        let ds = fixture();
        let split = crate::stdata::make_gene_split(12, 0.4, 3).unwrap();
        for mode in [Mode::GeneAware, Mode::SpotAware] {
            let tracker = Tracker {
                ds: &ds,
                seen: RefCell::new(BTreeSet::new()),
            };
            let cfg = RunConfig { epochs: 2, ..small_cfg(mode) };
            Trainer::with_targets(&ds, &tracker, &ds.wsi_ids(), &split.seen, &cfg)
                .unwrap()
                .run(|_| {})
                .unwrap();
            let touched: Vec<usize> = tracker.seen.into_inner().into_iter().collect();
            assert_eq!(touched, split.seen);
        }
    }

    #[test]
    fn runs_are_deterministic_and_learn() {
        let ds = fixture();
        for mode in [Mode::GeneAware, Mode::SpotAware] {
            let cfg = RunConfig { epochs: 8, lr: 3e-3, ..small_cfg(mode) };
            let a = train(&ds, &ds.wsi_ids(), &all_genes(&ds), &cfg).unwrap();
            let b = train(&ds, &ds.wsi_ids(), &all_genes(&ds), &cfg).unwrap();
            assert_eq!(loss_log_text(&a.log), loss_log_text(&b.log));
            assert!(a.log.iter().all(|e| e.eval_mse.is_some()));
            assert!(a.log.last().unwrap().train_mse < a.log[0].train_mse, "{mode:?} {:?}", a.log);
        }
    }

    #[test]
    fn raw_expression_is_rejected() {
        let (raw, _) = synth_dataset(&SynthParams {
            n_wsis: 1,
            spots_per_wsi: 4,
            m_genes: 3,
            ..SynthParams::default()
        })
        .unwrap();
        let r = Trainer::new(&raw, &raw.wsi_ids(), &[0], &small_cfg(Mode::GeneAware));
        assert!(matches!(r, Err(Error::ExpressionState(_))));
    }

    #[test]
    fn nan_loss_aborts_with_diagnostics() {
        let ds = fixture();
        let mut t = Trainer::new(&ds, &ds.wsi_ids(), &[0, 1], &small_cfg(Mode::GeneAware)).unwrap();
        t.model_mut().unwrap().params_mut().value_mut("reg.b").unwrap().data_mut()[0] = f32::NAN;
        match t.epoch() {
            Err(Error::NumericFailure(msg)) => assert!(msg.contains("epoch 1, batch 1"), "{msg}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let ds = fixture();
        let dir = tempfile::tempdir().unwrap();
        for mode in [Mode::GeneAware, Mode::SpotAware] {
            let cfg = RunConfig { epochs: 1, gene_trainable: true, ..small_cfg(mode) };
            let out = train(&ds, &ds.wsi_ids(), &all_genes(&ds), &cfg).unwrap();
            let path = dir.path().join("model.gqck");
            out.checkpoint.save(&path).unwrap();
            let back = Checkpoint::load(&path).unwrap();
            assert_eq!(back, out.checkpoint);
            let genes: Vec<&GeneRecord> = ds.library.records().iter().collect();
            let before = out.model.predict_matrix(&out.encoders, &ds.wsis[1], &genes).unwrap();
            let after = back
                .model()
                .unwrap()
                .predict_matrix(&back.encoders().unwrap(), &ds.wsis[1], &genes)
                .unwrap();
            let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&before), bits(&after));

            let bytes = out.checkpoint.to_bytes().unwrap();
            let mut bad = bytes.clone();
            bad[0] = b'X';
            assert!(matches!(Checkpoint::from_bytes(&bad, "t"), Err(Error::BadMagic { .. })));
            let mut bad = bytes.clone();
            bad[4] += 1;
            assert!(matches!(
                Checkpoint::from_bytes(&bad, "t"),
                Err(Error::VersionMismatch { expected: 1, found: 2 })
            ));
            for cut in [bytes.len() - 1, bytes.len() - 7, bytes.len() / 2, 20] {
                assert!(
                    matches!(Checkpoint::from_bytes(&bytes[..cut], "t"), Err(Error::Truncated(_))),
                    "cut at {cut}"
                );
            }
        }
    }
}
