//! The gene-query network.
//!
//! Spot features and gene features are projected to a shared width
//! `d_fuse`, fused by addition, passed through `L` pre-norm transformer
//! blocks and regressed to one value per sequence position.
//!
//! In gene-aware mode a sequence is the gene list for one spot (the spot's
//! projected features are added to every gene row). In spot-aware mode a
//! sequence is a slide's spots for one queried gene. Sequences longer than
//! `max_len` are cut into consecutive chunks that are processed
//! independently.

use crate::error::{Error, Result};
use crate::featurize::Encoders;
use crate::numcore::nn::{init_linear, init_transformer_block, linear, transformer_block_segments, INIT_STD};
use crate::numcore::{Graph, NodeId, ParamStore, Real, SplitMix64, Tensor};
use crate::stdata::{GeneRecord, Wsi};

/// Rows of each learned coordinate table; grid coordinates wrap around.
pub const COORD_BUCKETS: usize = 64;

const PREDICT_SPOTS: usize = 64;
const PREDICT_GENES: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    SpotAware,
    GeneAware,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SpotAware => "spot_aware",
            Mode::GeneAware => "gene_aware",
        }
    }

    pub fn default_max_len(self) -> usize {
        match self {
            Mode::SpotAware => 2400,
            Mode::GeneAware => 3467,
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spot_aware" => Ok(Mode::SpotAware),
            "gene_aware" => Ok(Mode::GeneAware),
            other => Err(Error::Config(format!(
                "unknown mode {other:?} (expected spot_aware or gene_aware)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub mode: Mode,
    pub d_fuse: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_len: usize,
    pub img_in_dim: usize,
    pub gene_in_dim: usize,
    pub seed: u64,
    /// Learned grid-coordinate embedding added to spot rows (spot-aware only).
    pub coord_embed: bool,
}

impl ModelConfig {
    pub fn new(mode: Mode, img_in_dim: usize, gene_in_dim: usize) -> Self {
        Self {
            mode,
            d_fuse: 256,
            layers: 2,
            heads: 8,
            max_len: mode.default_max_len(),
            img_in_dim,
            gene_in_dim,
            seed: 0,
            coord_embed: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_fuse == 0 || self.heads == 0 || !self.d_fuse.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_fuse {} must be a positive multiple of heads {}",
                self.d_fuse, self.heads
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be at least 1".into()));
        }
        if self.img_in_dim == 0 || self.gene_in_dim == 0 {
            return Err(Error::Config("encoder widths must be at least 1".into()));
        }
        Ok(())
    }
}

/// Result of one sequence-level forward pass.
#[derive(Debug, Clone, Copy)]
pub struct SeqOutput {
    /// `len x d_fuse` output of the last block.
    pub hidden: NodeId,
    /// `len x 1` regressor output.
    pub preds: NodeId,
}

/// Result of a batched forward pass over `spots x genes` pairs.
#[derive(Debug, Clone, Copy)]
pub struct BatchOutput {
    /// `spots x genes` predictions, spot-major.
    pub preds: NodeId,
    /// Last-block outputs, one row per pair, in the mode's sequence order
    /// (spot-major for gene-aware, gene-major for spot-aware).
    pub hidden: NodeId,
    pub spots: usize,
    pub genes: usize,
}

fn chunk_lengths(len: usize, max_len: usize) -> impl Iterator<Item = usize> {
    (0..len).step_by(max_len).map(move |s| max_len.min(len - s))
}

#[derive(Debug, Clone)]
pub struct GeneQueryModel<T = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Real> GeneQueryModel<T> {
    /// Fresh parameters drawn from the config seed.
    pub fn new(config: ModelConfig) -> Result<Self> {
        Ok(Self {
            params: Self::init_params(&config)?,
            config,
        })
    }

    fn init_params(config: &ModelConfig) -> Result<ParamStore<T>> {
        config.validate()?;
        let d = config.d_fuse;
        let mut rng = SplitMix64::stream(config.seed, "model-init");
        let mut params = ParamStore::new();
        init_linear(&mut params, &mut rng, "proj.img", config.img_in_dim, d)?;
        init_linear(&mut params, &mut rng, "proj.gene", config.gene_in_dim, d)?;
        for l in 0..config.layers {
            init_transformer_block(&mut params, &mut rng, &format!("block{l}"), d)?;
        }
        init_linear(&mut params, &mut rng, "reg", d, 1)?;
        if config.coord_embed {
            for axis in ["coord.x", "coord.y"] {
                let data = (0..COORD_BUCKETS * d)
                    .map(|_| T::lit(rng.normal() * INIT_STD))
                    .collect();
                params.insert(axis, Tensor::matrix(COORD_BUCKETS, d, data)?)?;
            }
        }
        Ok(params)
    }

    /// Wraps existing parameters after checking them against the config.
    /// Extra entries are allowed only for trainable encoders (`enc_` prefix).
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let expected = Self::init_params(&config)?;
        for (name, p) in expected.iter() {
            let found = params
                .get(name)
                .ok_or_else(|| Error::State(format!("parameter {name} missing")))?;
            if found.value.shape() != p.value.shape() {
                return Err(Error::State(format!(
                    "parameter {name} has shape {:?}, config implies {:?}",
                    found.value.shape(),
                    p.value.shape()
                )));
            }
        }
        if let Some(extra) = params
            .names()
            .find(|n| !expected.contains(n) && !n.starts_with("enc_"))
        {
            return Err(Error::State(format!("unexpected parameter {extra}")));
        }
        if !params.all_finite() {
            return Err(Error::NumericInput("non-finite model parameter".into()));
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> GeneQueryModel<U> {
        GeneQueryModel {
            config: self.config.clone(),
            params: self.params.cast(),
        }
    }

    /// Projects `e_img` (`n x img_in_dim`) and `e_gene` (`k x gene_in_dim`)
    /// to `d_fuse` columns.
    pub fn project(&self, g: &mut Graph<T>, e_img: NodeId, e_gene: NodeId) -> Result<(NodeId, NodeId)> {
        for (what, node, want) in [
            ("image", e_img, self.config.img_in_dim),
            ("gene", e_gene, self.config.gene_in_dim),
        ] {
            let have = g.dims(node).1;
            if have != want {
                return Err(Error::Shape(format!(
                    "{what} features have width {have}, model expects {want}"
                )));
            }
        }
        let h_img = linear(g, &self.params, "proj.img", e_img)?;
        let h_gene = linear(g, &self.params, "proj.gene", e_gene)?;
        Ok((h_img, h_gene))
    }

    fn run(&self, g: &mut Graph<T>, joint: NodeId, mask: &[bool], segments: &[usize]) -> Result<SeqOutput> {
        let mut x = joint;
        for l in 0..self.config.layers {
            x = transformer_block_segments(
                g,
                &self.params,
                &format!("block{l}"),
                x,
                mask,
                self.config.heads,
                segments,
            )?;
        }
        let preds = linear(g, &self.params, "reg", x)?;
        Ok(SeqOutput { hidden: x, preds })
    }

    fn run_sequence(&self, g: &mut Graph<T>, joint: NodeId, mask: &[bool]) -> Result<SeqOutput> {
        let n = g.dims(joint).0;
        if mask.len() != n {
            return Err(Error::Shape(format!("mask length {} for {n} positions", mask.len())));
        }
        let segments: Vec<usize> = chunk_lengths(n, self.config.max_len).collect();
        self.run(g, joint, mask, &segments)
    }

    /// One spot (`h_img`, a single row) against a gene sequence. Positions
    /// with `mask == false` are padding; their outputs are meaningless.
    pub fn forward_gene_aware(
        &self,
        g: &mut Graph<T>,
        h_img: NodeId,
        h_gene_seq: NodeId,
        mask: &[bool],
    ) -> Result<SeqOutput> {
        let joint = g.add_row(h_gene_seq, h_img)?;
        self.run_sequence(g, joint, mask)
    }

    /// One queried gene (`h_gene`, a single row) against a spot sequence.
    pub fn forward_spot_aware(
        &self,
        g: &mut Graph<T>,
        h_img_seq: NodeId,
        h_gene: NodeId,
        mask: &[bool],
    ) -> Result<SeqOutput> {
        let joint = g.add_row(h_img_seq, h_gene)?;
        self.run_sequence(g, joint, mask)
    }

    /// Learned coordinate rows for the given grid positions.
    pub fn coord_node(&self, g: &mut Graph<T>, coords: &[(i64, i64)]) -> Result<NodeId> {
        let wrap = |v: i64| v.rem_euclid(COORD_BUCKETS as i64) as usize;
        let tx = g.param(&self.params, "coord.x")?;
        let ty = g.param(&self.params, "coord.y")?;
        let xs: Vec<usize> = coords.iter().map(|c| wrap(c.0)).collect();
        let ys: Vec<usize> = coords.iter().map(|c| wrap(c.1)).collect();
        let ex = g.gather_rows(tx, &xs)?;
        let ey = g.gather_rows(ty, &ys)?;
        g.add(ex, ey)
    }

    /// Predictions for every pair of `spots` (rows of `e_img`) and `genes`
    /// (rows of `e_gene`). In spot-aware mode the spots must come from one
    /// slide, in sequence order; `coords` are required when the coordinate
    /// embedding is enabled.
    pub fn forward_batch(
        &self,
        g: &mut Graph<T>,
        e_img: NodeId,
        e_gene: NodeId,
        coords: Option<&[(i64, i64)]>,
    ) -> Result<BatchOutput> {
        let (s_n, g_n) = (g.dims(e_img).0, g.dims(e_gene).0);
        if s_n == 0 || g_n == 0 {
            return Err(Error::Argument("forward over an empty spot or gene set".into()));
        }
        let (mut h_img, h_gene) = self.project(g, e_img, e_gene)?;
        let max_len = self.config.max_len;
        let (img_idx, gene_idx, segments): (Vec<usize>, Vec<usize>, Vec<usize>) = match self.config.mode {
            Mode::GeneAware => (
                (0..s_n).flat_map(|s| std::iter::repeat_n(s, g_n)).collect(),
                (0..s_n).flat_map(|_| 0..g_n).collect(),
                (0..s_n).flat_map(|_| chunk_lengths(g_n, max_len)).collect(),
            ),
            Mode::SpotAware => {
                if self.config.coord_embed {
                    let coords = coords.ok_or_else(|| {
                        Error::Argument("coordinate embedding needs spot coordinates".into())
                    })?;
                    if coords.len() != s_n {
                        return Err(Error::Shape(format!(
                            "{} coordinates for {s_n} spots",
                            coords.len()
                        )));
                    }
                    let c = self.coord_node(g, coords)?;
                    h_img = g.add(h_img, c)?;
                }
                (
                    (0..g_n).flat_map(|_| 0..s_n).collect(),
                    (0..g_n).flat_map(|j| std::iter::repeat_n(j, s_n)).collect(),
                    (0..g_n).flat_map(|_| chunk_lengths(s_n, max_len)).collect(),
                )
            }
        };
        let rows_img = g.gather_rows(h_img, &img_idx)?;
        let rows_gene = g.gather_rows(h_gene, &gene_idx)?;
        let joint = g.add(rows_img, rows_gene)?;
        let mask = vec![true; s_n * g_n];
        let out = self.run(g, joint, &mask, &segments)?;
        let order: Vec<usize> = match self.config.mode {
            Mode::GeneAware => (0..s_n * g_n).collect(),
            Mode::SpotAware => (0..s_n)
                .flat_map(|s| (0..g_n).map(move |j| j * s_n + s))
                .collect(),
        };
        let preds = g.gather(out.preds, order, s_n, g_n)?;
        Ok(BatchOutput {
            preds,
            hidden: out.hidden,
            spots: s_n,
            genes: g_n,
        })
    }

    /// Per-spot latent vectors from a batch: the mean of the last-block
    /// outputs over the batch's genes (`spots x d_fuse`).
    pub fn batch_latents(&self, g: &Graph<T>, out: &BatchOutput) -> Vec<T> {
        let d = self.config.d_fuse;
        let h = g.data(out.hidden);
        let mut lat = vec![T::zero(); out.spots * d];
        for s in 0..out.spots {
            let dst = &mut lat[s * d..(s + 1) * d];
            for j in 0..out.genes {
                let r = match self.config.mode {
                    Mode::GeneAware => s * out.genes + j,
                    Mode::SpotAware => j * out.spots + s,
                };
                for (o, &v) in dst.iter_mut().zip(&h[r * d..(r + 1) * d]) {
                    *o += v;
                }
            }
            let n = T::from_usize(out.genes).unwrap();
            dst.iter_mut().for_each(|o| *o = *o / n);
        }
        lat
    }
}

/// Predictions (and optionally latents) for one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideOutput {
    /// `spots x genes`, spot-major.
    pub preds: Vec<f32>,
    /// `spots x d_fuse` when requested.
    pub latents: Option<Vec<f32>>,
}

impl GeneQueryModel<f32> {
    fn infer(&self, enc: &Encoders, wsi: &Wsi, genes: &[&GeneRecord], latents: bool) -> Result<SlideOutput> {
        let (n, k) = (wsi.spots.len(), genes.len());
        if n == 0 || k == 0 {
            return Err(Error::Argument("prediction over an empty spot or gene set".into()));
        }
        let e_img = enc.image_features(&wsi.spots, Some(&self.params))?;
        let e_gene = enc.gene_features(genes, Some(&self.params))?;
        let (di, dg, d) = (enc.image.dim(), enc.gene.dim(), self.config.d_fuse);
        let coords: Vec<(i64, i64)> = wsi.spots.iter().map(|s| (s.x, s.y)).collect();
        let mut preds = vec![0f32; n * k];
        let mut lat = latents.then(|| vec![0f32; n * d]);
        match self.config.mode {
            Mode::GeneAware => {
                let gene_t = Tensor::matrix(k, dg, e_gene)?;
                for lo in (0..n).step_by(PREDICT_SPOTS) {
                    let hi = (lo + PREDICT_SPOTS).min(n);
                    let mut g = Graph::new();
                    let ei = g.input(Tensor::matrix(hi - lo, di, e_img[lo * di..hi * di].to_vec())?);
                    let eg = g.input(gene_t.clone());
                    let out = self.forward_batch(&mut g, ei, eg, None)?;
                    preds[lo * k..hi * k].copy_from_slice(g.data(out.preds));
                    if let Some(l) = lat.as_mut() {
                        l[lo * d..hi * d].copy_from_slice(&self.batch_latents(&g, &out));
                    }
                }
            }
            Mode::SpotAware => {
                let img_t = Tensor::matrix(n, di, e_img)?;
                let mut sums = vec![0f64; n * d];
                for lo in (0..k).step_by(PREDICT_GENES) {
                    let hi = (lo + PREDICT_GENES).min(k);
                    let mut g = Graph::new();
                    let ei = g.input(img_t.clone());
                    let eg = g.input(Tensor::matrix(hi - lo, dg, e_gene[lo * dg..hi * dg].to_vec())?);
                    let out = self.forward_batch(&mut g, ei, eg, Some(&coords))?;
                    for (s, row) in g.data(out.preds).chunks(hi - lo).enumerate() {
                        preds[s * k + lo..s * k + hi].copy_from_slice(row);
                    }
                    if latents {
                        let h = g.data(out.hidden);
                        for j in 0..hi - lo {
                            for s in 0..n {
                                let r = j * n + s;
                                for (o, &v) in sums[s * d..(s + 1) * d].iter_mut().zip(&h[r * d..(r + 1) * d]) {
                                    *o += v as f64;
                                }
                            }
                        }
                    }
                }
                if let Some(l) = lat.as_mut() {
                    for (o, s) in l.iter_mut().zip(&sums) {
                        *o = (s / k as f64) as f32;
                    }
                }
            }
        }
        if let Some(i) = preds.iter().position(|v| !v.is_finite()) {
            return Err(Error::NumericFailure(format!(
                "non-finite prediction for spot {} gene {}",
                wsi.spots[i / k].spot_id,
                genes[i % k].name
            )));
        }
        Ok(SlideOutput { preds, latents: lat })
    }

    /// `spots x genes` predictions for one slide, spot-major.
    pub fn predict_matrix(&self, enc: &Encoders, wsi: &Wsi, genes: &[&GeneRecord]) -> Result<Vec<f32>> {
        Ok(self.infer(enc, wsi, genes, false)?.preds)
    }

    /// Predictions plus per-spot latents (mean last-block output over the
    /// queried genes).
    pub fn predict_with_latents(&self, enc: &Encoders, wsi: &Wsi, genes: &[&GeneRecord]) -> Result<SlideOutput> {
        self.infer(enc, wsi, genes, true)
    }
}
