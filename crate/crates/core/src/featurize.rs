//! Encoders turning gene metadata and spot payloads into fixed-width
//! feature vectors.
//!
//! Gene text is featurized by hashing tokens into an embedding table
//! (64-bit FNV-1a, offset 14695981039346656037, prime 1099511628211, bucket
//! = hash mod V) and averaging the rows. Spot patches are featurized either
//! by intensity statistics or by a small two-layer convolution. Either side
//! may instead come from externally computed embeddings.
//!
//! Trainable encoders expose their weights under the `enc_gene.` and
//! `enc_img.` prefixes so they can join the model's parameter store.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use crate::binio;
use crate::error::{Error, Result};
use crate::numcore::{Graph, NodeId, ParamStore, Real, SplitMix64, Tensor};
use crate::stdata::{GeneRecord, Payload, SpotRecord};

pub const FNV_OFFSET: u64 = 14695981039346656037;
pub const FNV_PRIME: u64 = 1099511628211;

pub const DEFAULT_BUCKETS: usize = 8192;
pub const DEFAULT_EMBED_DIM: usize = 64;
pub const PATCH_STATS_DIM: usize = 30;
const HIST_BINS: usize = 8;
const CONV1_CHANNELS: usize = 8;

pub const GENE_TABLE: &str = "enc_gene.table";
pub const CONV1_W: &str = "enc_img.conv1.w";
pub const CONV1_B: &str = "enc_img.conv1.b";
pub const CONV2_W: &str = "enc_img.conv2.w";
pub const CONV2_B: &str = "enc_img.conv2.b";

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes
        .iter()
        .fold(FNV_OFFSET, |h, &b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

/// Lowercases and splits on every non-alphanumeric character.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeaturizerKind {
    HashedText,
    PatchStats,
    TinyConv,
    /// Feature-vector payloads used as stored.
    Passthrough,
    Precomputed,
}

impl FeaturizerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            FeaturizerKind::HashedText => "hashed_text",
            FeaturizerKind::PatchStats => "patch_stats",
            FeaturizerKind::TinyConv => "tiny_conv",
            FeaturizerKind::Passthrough => "passthrough",
            FeaturizerKind::Precomputed => "precomputed",
        }
    }
}

impl std::str::FromStr for FeaturizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "hashed_text" => FeaturizerKind::HashedText,
            "patch_stats" => FeaturizerKind::PatchStats,
            "tiny_conv" => FeaturizerKind::TinyConv,
            "passthrough" => FeaturizerKind::Passthrough,
            "precomputed" => FeaturizerKind::Precomputed,
            other => return Err(Error::Config(format!("unknown featurizer kind {other:?}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizerSpec {
    pub kind: FeaturizerKind,
    /// Embedding width (hashed_text) or output channels (tiny_conv);
    /// other kinds take their width from the data.
    pub output_dim: usize,
    /// Hash buckets V for hashed_text.
    pub buckets: usize,
    pub trainable: bool,
    pub seed: u64,
    pub source: Option<PathBuf>,
}

impl FeaturizerSpec {
    pub fn hashed_text(seed: u64) -> Self {
        Self {
            kind: FeaturizerKind::HashedText,
            output_dim: DEFAULT_EMBED_DIM,
            buckets: DEFAULT_BUCKETS,
            trainable: false,
            seed,
            source: None,
        }
    }

    pub fn passthrough() -> Self {
        Self {
            kind: FeaturizerKind::Passthrough,
            output_dim: 0,
            buckets: 0,
            trainable: false,
            seed: 0,
            source: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            FeaturizerKind::HashedText if self.buckets == 0 || self.output_dim == 0 => {
                Err(Error::Config("hashed_text needs buckets >= 1 and output_dim >= 1".into()))
            }
            FeaturizerKind::TinyConv if self.output_dim == 0 => {
                Err(Error::Config("tiny_conv needs output_dim >= 1".into()))
            }
            FeaturizerKind::Precomputed if self.source.is_none() => {
                Err(Error::Config("precomputed featurizer requires a source file".into()))
            }
            FeaturizerKind::PatchStats | FeaturizerKind::Passthrough | FeaturizerKind::Precomputed
                if self.trainable =>
            {
                Err(Error::Config(format!("{} has nothing to train", self.kind.as_str())))
            }
            _ => Ok(()),
        }
    }
}

/// Rows of externally computed embeddings keyed by spot id or gene name.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecomputedTable {
    dim: usize,
    index: HashMap<String, usize>,
    values: Vec<f32>,
}

impl PrecomputedTable {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, id: &str) -> Result<&[f32]> {
        let r = *self.index.get(id).ok_or_else(|| Error::UnknownId(id.to_string()))?;
        Ok(&self.values[r * self.dim..(r + 1) * self.dim])
    }
}

/// Reads a `GQEX`-framed matrix plus the `ids.tsv` next to it.
pub fn load_precomputed(path: &Path) -> Result<PrecomputedTable> {
    let (rows, dim, values) = binio::read_matrix(path)?;
    let ids_path = path.with_file_name("ids.tsv");
    let text = String::from_utf8(binio::read_file(&ids_path)?)
        .map_err(|_| Error::data(ids_path.display().to_string(), "not valid UTF-8"))?;
    let ids: Vec<&str> = text
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split('\t').next().unwrap_or(l))
        .collect();
    if ids.len() != rows {
        return Err(Error::DimensionMismatch {
            context: format!("{} rows vs {}", path.display(), ids_path.display()),
            expected: ids.len(),
            found: rows,
        });
    }
    let mut index = HashMap::with_capacity(rows);
    for (i, id) in ids.iter().enumerate() {
        if index.insert(id.to_string(), i).is_some() {
            return Err(Error::data(ids_path.display().to_string(), format!("duplicate id {id:?}")));
        }
    }
    Ok(PrecomputedTable { dim, index, values })
}

/// Writes a precomputed table (`GQEX` matrix plus `ids.tsv` alongside).
pub fn save_precomputed(path: &Path, ids: &[String], dim: usize, values: &[f32]) -> Result<()> {
    binio::write_matrix(path, ids.len(), dim, values)?;
    let mut text = ids.join("\n");
    text.push('\n');
    binio::write_file(&path.with_file_name("ids.tsv"), text.as_bytes())
}

fn bucket(token: &str, buckets: usize) -> usize {
    (fnv1a64(token.as_bytes()) % buckets as u64) as usize
}

/// Query text of a gene: its description, or its name when the
/// description has no tokens.
pub fn gene_text(record: &GeneRecord) -> &str {
    if tokenize(&record.description).is_empty() {
        &record.name
    } else {
        &record.description
    }
}

#[derive(Debug, Clone)]
pub enum GeneFeaturizer {
    Hashed {
        buckets: usize,
        dim: usize,
        trainable: bool,
        /// Frozen copy of the table (`GENE_TABLE`).
        table: ParamStore<f32>,
    },
    Precomputed(PrecomputedTable),
}

impl GeneFeaturizer {
    pub fn new(spec: &FeaturizerSpec) -> Result<Self> {
        spec.validate()?;
        match spec.kind {
            FeaturizerKind::HashedText => {
                let mut rng = SplitMix64::stream(spec.seed, "gene-embedding");
                let n = spec.buckets * spec.output_dim;
                let data = (0..n).map(|_| rng.normal() as f32).collect();
                let mut table = ParamStore::new();
                table.insert(GENE_TABLE, Tensor::matrix(spec.buckets, spec.output_dim, data)?)?;
                Ok(GeneFeaturizer::Hashed {
                    buckets: spec.buckets,
                    dim: spec.output_dim,
                    trainable: spec.trainable,
                    table,
                })
            }
            FeaturizerKind::Precomputed => Ok(GeneFeaturizer::Precomputed(load_precomputed(
                spec.source.as_deref().unwrap(),
            )?)),
            other => Err(Error::Config(format!("{} cannot featurize genes", other.as_str()))),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            GeneFeaturizer::Hashed { dim, .. } => *dim,
            GeneFeaturizer::Precomputed(t) => t.dim(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, GeneFeaturizer::Hashed { trainable: true, .. })
    }

    /// Hash buckets of the query text, one per token.
    pub fn buckets_of(&self, record: &GeneRecord) -> Vec<usize> {
        match self {
            GeneFeaturizer::Hashed { buckets, .. } => tokenize(gene_text(record))
                .iter()
                .map(|t| bucket(t, *buckets))
                .collect(),
            GeneFeaturizer::Precomputed(_) => Vec::new(),
        }
    }

    pub fn featurize(&self, record: &GeneRecord) -> Result<Vec<f32>> {
        self.featurize_with(record, None)
    }

    /// Like [`featurize`](Self::featurize) but reading a trainable table
    /// from `params` when given.
    pub fn featurize_with(&self, record: &GeneRecord, params: Option<&ParamStore<f32>>) -> Result<Vec<f32>> {
        match self {
            GeneFeaturizer::Hashed { dim, table, trainable, .. } => {
                let store = match params {
                    Some(p) if *trainable => p,
                    _ => table,
                };
                let t = store.value(GENE_TABLE)?;
                let ids = self.buckets_of(record);
                let mut out = vec![0.0f32; *dim];
                if ids.is_empty() {
                    return Ok(out);
                }
                for &b in &ids {
                    for (o, &v) in out.iter_mut().zip(t.row(b)) {
                        *o += v;
                    }
                }
                let n = ids.len() as f32;
                out.iter_mut().for_each(|o| *o /= n);
                Ok(out)
            }
            GeneFeaturizer::Precomputed(t) => t.get(&record.name).map(<[f32]>::to_vec).map_err(|e| match e {
                Error::UnknownId(id) => Error::UnknownGene(id),
                other => other,
            }),
        }
    }

    /// Registers the table in `store` when trainable.
    pub fn register_params<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if let GeneFeaturizer::Hashed { trainable: true, table, .. } = self {
            store.insert(GENE_TABLE, table.value(GENE_TABLE)?.cast())?;
        }
        Ok(())
    }

    /// Query features of `records` as a `k x dim` graph node. A trainable
    /// table is read from `store` and receives gradients.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        records: &[&GeneRecord],
    ) -> Result<NodeId> {
        if !self.is_trainable() {
            let dim = self.dim();
            let mut flat = Vec::with_capacity(records.len() * dim);
            for r in records {
                flat.extend(self.featurize(r)?.into_iter().map(|v| T::lit(v as f64)));
            }
            return Ok(g.input(Tensor::matrix(records.len(), dim, flat)?));
        }
        let table = g.param(store, GENE_TABLE)?;
        let zero = g.input(Tensor::zeros(&[1, self.dim()]));
        let rows = records
            .iter()
            .map(|r| {
                let ids = self.buckets_of(r);
                if ids.is_empty() {
                    return Ok(zero);
                }
                let picked = g.gather_rows(table, &ids)?;
                Ok(g.mean_rows(picked))
            })
            .collect::<Result<Vec<_>>>()?;
        g.concat_rows(&rows)
    }
}

/// Per channel: 8-bin intensity histogram (sums to 1), mean and standard
/// deviation of intensities scaled to `[0, 1]`. 30 values in total.
pub fn patch_stats(patch: &[u8]) -> Vec<f32> {
    let pixels = patch.len() / 3;
    let mut out = Vec::with_capacity(PATCH_STATS_DIM);
    for c in 0..3 {
        let mut hist = [0f64; HIST_BINS];
        let (mut sum, mut sq) = (0f64, 0f64);
        for p in 0..pixels {
            let v = patch[p * 3 + c];
            hist[v as usize * HIST_BINS / 256] += 1.0;
            let x = v as f64 / 255.0;
            sum += x;
            sq += x * x;
        }
        let n = pixels.max(1) as f64;
        out.extend(hist.iter().map(|h| (h / n) as f32));
        let mean = sum / n;
        let var = (sq / n - mean * mean).max(0.0);
        out.push(mean as f32);
        out.push(var.sqrt() as f32);
    }
    out
}

/// im2col indices of a 3x3, stride-2, unpadded convolution over an
/// `h x w x c` row-major input.
fn conv_indices(h: usize, w: usize, c: usize) -> (usize, usize, Vec<usize>) {
    let (oh, ow) = ((h - 3) / 2 + 1, (w - 3) / 2 + 1);
    let mut idx = Vec::with_capacity(oh * ow * 9 * c);
    for oy in 0..oh {
        for ox in 0..ow {
            for ky in 0..3 {
                for kx in 0..3 {
                    let base = ((2 * oy + ky) * w + 2 * ox + kx) * c;
                    idx.extend(base..base + c);
                }
            }
        }
    }
    (oh, ow, idx)
}

#[derive(Debug, Clone)]
pub enum ImageFeaturizer {
    PatchStats,
    TinyConv {
        dim: usize,
        trainable: bool,
        weights: ParamStore<f32>,
    },
    Passthrough {
        dim: usize,
    },
    Precomputed(PrecomputedTable),
}

impl ImageFeaturizer {
    /// `feature_dim` is the dataset's feature width, used by pass-through.
    pub fn new(spec: &FeaturizerSpec, feature_dim: usize) -> Result<Self> {
        spec.validate()?;
        match spec.kind {
            FeaturizerKind::PatchStats => Ok(ImageFeaturizer::PatchStats),
            FeaturizerKind::Passthrough => Ok(ImageFeaturizer::Passthrough { dim: feature_dim }),
            FeaturizerKind::Precomputed => Ok(ImageFeaturizer::Precomputed(load_precomputed(
                spec.source.as_deref().unwrap(),
            )?)),
            FeaturizerKind::TinyConv => {
                let mut rng = SplitMix64::stream(spec.seed, "tiny-conv");
                let mut weights = ParamStore::new();
                let mut he = |fan_in: usize, fan_out: usize| {
                    let std = (2.0 / fan_in as f64).sqrt();
                    let data = (0..fan_in * fan_out).map(|_| (rng.normal() * std) as f32).collect();
                    Tensor::matrix(fan_in, fan_out, data)
                };
                weights.insert(CONV1_W, he(27, CONV1_CHANNELS)?)?;
                weights.insert(CONV1_B, Tensor::zeros(&[CONV1_CHANNELS]))?;
                weights.insert(CONV2_W, he(9 * CONV1_CHANNELS, spec.output_dim)?)?;
                weights.insert(CONV2_B, Tensor::zeros(&[spec.output_dim]))?;
                Ok(ImageFeaturizer::TinyConv {
                    dim: spec.output_dim,
                    trainable: spec.trainable,
                    weights,
                })
            }
            FeaturizerKind::HashedText => Err(Error::Config("hashed_text cannot featurize images".into())),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ImageFeaturizer::PatchStats => PATCH_STATS_DIM,
            ImageFeaturizer::TinyConv { dim, .. } | ImageFeaturizer::Passthrough { dim } => *dim,
            ImageFeaturizer::Precomputed(t) => t.dim(),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, ImageFeaturizer::TinyConv { trainable: true, .. })
    }

    pub fn register_params<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if let ImageFeaturizer::TinyConv { trainable: true, weights, .. } = self {
            for (name, p) in weights.iter() {
                store.insert(name, p.value.cast())?;
            }
        }
        Ok(())
    }

    fn patch_of<'a>(&self, spot: &'a SpotRecord, patch_dims: (usize, usize)) -> Result<&'a [u8]> {
        match &spot.payload {
            Payload::Patch(p) if p.len() == patch_dims.0 * patch_dims.1 * 3 => Ok(p),
            Payload::Patch(p) => Err(Error::data(
                &spot.spot_id,
                format!(
                    "patch has {} bytes, manifest declares {}x{}x3",
                    p.len(),
                    patch_dims.0,
                    patch_dims.1
                ),
            )),
            Payload::Feature(_) => Err(Error::data(&spot.spot_id, "featurizer expects a patch payload")),
        }
    }

    /// Feature vector of one spot. `patch_dims` is the manifest's `(h, w)`.
    pub fn featurize(&self, spot: &SpotRecord, patch_dims: (usize, usize)) -> Result<Vec<f32>> {
        self.featurize_with(spot, patch_dims, None)
    }

    /// Like [`featurize`](Self::featurize) but reading trainable weights
    /// from `params` when given.
    pub fn featurize_with(
        &self,
        spot: &SpotRecord,
        patch_dims: (usize, usize),
        params: Option<&ParamStore<f32>>,
    ) -> Result<Vec<f32>> {
        match self {
            ImageFeaturizer::PatchStats => Ok(patch_stats(self.patch_of(spot, patch_dims)?)),
            ImageFeaturizer::TinyConv { weights, trainable, .. } => {
                let store = match params {
                    Some(p) if *trainable => p,
                    _ => weights,
                };
                let mut g = Graph::<f32>::new();
                let node = self.conv_node(&mut g, store, spot, patch_dims)?;
                Ok(g.data(node).to_vec())
            }
            ImageFeaturizer::Passthrough { dim } => match &spot.payload {
                Payload::Feature(f) if f.len() == *dim => Ok(f.clone()),
                Payload::Feature(f) => Err(Error::DimensionMismatch {
                    context: format!("feature vector of spot {}", spot.spot_id),
                    expected: *dim,
                    found: f.len(),
                }),
                Payload::Patch(_) => Err(Error::data(&spot.spot_id, "pass-through expects a feature payload")),
            },
            ImageFeaturizer::Precomputed(t) => t.get(&spot.spot_id).map(<[f32]>::to_vec),
        }
    }

    fn conv_node<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        spot: &SpotRecord,
        (h, w): (usize, usize),
    ) -> Result<NodeId> {
        let patch = self.patch_of(spot, (h, w))?;
        if h < 7 || w < 7 {
            return Err(Error::data(&spot.spot_id, "tiny_conv needs patches of at least 7x7"));
        }
        let pixels = patch.iter().map(|&b| T::lit(b as f64 / 255.0)).collect();
        let x = g.input(Tensor::matrix(h * w, 3, pixels)?);
        let (oh, ow, idx) = conv_indices(h, w, 3);
        let cols = g.gather(x, idx, oh * ow, 27)?;
        let w1 = g.param(store, CONV1_W)?;
        let b1 = g.param(store, CONV1_B)?;
        let y = g.matmul(cols, w1)?;
        let y = g.add_row(y, b1)?;
        let y = g.relu(y);
        let (oh2, ow2, idx2) = conv_indices(oh, ow, CONV1_CHANNELS);
        let cols2 = g.gather(y, idx2, oh2 * ow2, 9 * CONV1_CHANNELS)?;
        let w2 = g.param(store, CONV2_W)?;
        let b2 = g.param(store, CONV2_B)?;
        let z = g.matmul(cols2, w2)?;
        let z = g.add_row(z, b2)?;
        let z = g.relu(z);
        Ok(g.mean_rows(z))
    }

    /// Spot features as an `n x dim` graph node; trainable convolutions read
    /// their weights from `store`.
    pub fn encode<T: Real>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        spots: &[&SpotRecord],
        patch_dims: (usize, usize),
    ) -> Result<NodeId> {
        if self.is_trainable() {
            let rows = spots
                .iter()
                .map(|s| self.conv_node(g, store, s, patch_dims))
                .collect::<Result<Vec<_>>>()?;
            return g.concat_rows(&rows);
        }
        let dim = self.dim();
        let mut flat = Vec::with_capacity(spots.len() * dim);
        for s in spots {
            flat.extend(self.featurize(s, patch_dims)?.into_iter().map(|v| T::lit(v as f64)));
        }
        Ok(g.input(Tensor::matrix(spots.len(), dim, flat)?))
    }
}

/// The pair of encoders used by a model, plus the patch geometry of the
/// dataset they read.
#[derive(Debug, Clone)]
pub struct Encoders {
    pub gene: GeneFeaturizer,
    pub image: ImageFeaturizer,
    pub patch_dims: (usize, usize),
}

impl Encoders {
    pub fn new(
        gene_spec: &FeaturizerSpec,
        image_spec: &FeaturizerSpec,
        patch_dims: (usize, usize),
        feature_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            gene: GeneFeaturizer::new(gene_spec)?,
            image: ImageFeaturizer::new(image_spec, feature_dim)?,
            patch_dims,
        })
    }

    pub fn register_params<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        self.gene.register_params(store)?;
        self.image.register_params(store)
    }

    /// `n x image.dim()` features, row-major.
    pub fn image_features(&self, spots: &[SpotRecord], params: Option<&ParamStore<f32>>) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(spots.len() * self.image.dim());
        for s in spots {
            out.extend(self.image.featurize_with(s, self.patch_dims, params)?);
        }
        Ok(out)
    }

    /// `k x gene.dim()` features, row-major.
    pub fn gene_features(&self, genes: &[&GeneRecord], params: Option<&ParamStore<f32>>) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(genes.len() * self.gene.dim());
        for g in genes {
            out.extend(self.gene.featurize_with(g, params)?);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::grad_check;

    fn gene(name: &str, desc: &str) -> GeneRecord {
        GeneRecord::new(name, desc).unwrap()
    }

    fn spot(payload: Payload) -> SpotRecord {
        SpotRecord {
            spot_id: "s0".into(),
            wsi_id: "w".into(),
            x: 0,
            y: 0,
            payload,
        }
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn tokenizer() {
        assert_eq!(tokenize("Beta-Actin, (ACTB) x2"), ["beta", "actin", "actb", "x2"]);
        assert!(tokenize(" -- ").is_empty());
    }

    #[test]
    fn hashed_text_behaviour() {
        let f = GeneFeaturizer::new(&FeaturizerSpec::hashed_text(5)).unwrap();
        let a = f.featurize(&gene("X", "cell cycle kinase")).unwrap();
        let b = f.featurize(&gene("X", "cell cycle kinase")).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), DEFAULT_EMBED_DIM);
        // empty description falls back to the name
        let by_name = f.featurize(&gene("DDT", "")).unwrap();
        let by_text = f.featurize(&gene("other", "ddt")).unwrap();
        assert_eq!(by_name, by_text);
        // single token equals its table row
        let GeneFeaturizer::Hashed { table, .. } = &f else { unreachable!() };
        let row = (fnv1a64(b"kinase") % DEFAULT_BUCKETS as u64) as usize;
        let single = f.featurize(&gene("Y", "Kinase")).unwrap();
        assert_eq!(single, table.value(GENE_TABLE).unwrap().row(row));
    }

    #[test]
    fn patch_stats_black_patch() {
        let v = patch_stats(&[0u8; 4 * 4 * 3]);
        assert_eq!(v.len(), PATCH_STATS_DIM);
        for c in 0..3 {
            let seg = &v[c * 10..c * 10 + 10];
            assert_eq!(seg[..8], [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
            assert_eq!(seg[8], 0.0);
            assert_eq!(seg[9], 0.0);
        }
    }

    #[test]
    fn patch_stats_histograms_sum_to_one() {
        let mut rng = SplitMix64::new(3);
        let patch: Vec<u8> = (0..10 * 10 * 3).map(|_| rng.below(256) as u8).collect();
        let v = patch_stats(&patch);
        for c in 0..3 {
            let s: f64 = v[c * 10..c * 10 + 8].iter().map(|&x| x as f64).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn passthrough_and_dimension_check() {
        let f = ImageFeaturizer::new(&FeaturizerSpec::passthrough(), 3).unwrap();
        let s = spot(Payload::Feature(vec![1.0, 2.0, 3.0]));
        assert_eq!(f.featurize(&s, (0, 0)).unwrap(), vec![1.0, 2.0, 3.0]);
        let bad = spot(Payload::Feature(vec![1.0]));
        assert!(matches!(f.featurize(&bad, (0, 0)), Err(Error::DimensionMismatch { .. })));
        let stats = ImageFeaturizer::new(
            &FeaturizerSpec {
                kind: FeaturizerKind::PatchStats,
                ..FeaturizerSpec::passthrough()
            },
            0,
        )
        .unwrap();
        assert!(stats.featurize(&spot(Payload::Patch(vec![0; 10])), (2, 2)).is_err());
    }

    fn conv_spec(trainable: bool) -> FeaturizerSpec {
        FeaturizerSpec {
            kind: FeaturizerKind::TinyConv,
            output_dim: 4,
            buckets: 0,
            trainable,
            seed: 17,
            source: None,
        }
    }

    #[test]
    fn tiny_conv_is_deterministic() {
        let mut rng = SplitMix64::new(8);
        let patch: Vec<u8> = (0..16 * 16 * 3).map(|_| rng.below(256) as u8).collect();
        let s = spot(Payload::Patch(patch));
        let a = ImageFeaturizer::new(&conv_spec(false), 0).unwrap().featurize(&s, (16, 16)).unwrap();
        let b = ImageFeaturizer::new(&conv_spec(false), 0).unwrap().featurize(&s, (16, 16)).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn trainable_encoders_differentiate() {
        let conv = ImageFeaturizer::new(&conv_spec(true), 0).unwrap();
        let genes = GeneFeaturizer::new(&FeaturizerSpec {
            output_dim: 4,
            buckets: 16,
            trainable: true,
            ..FeaturizerSpec::hashed_text(2)
        })
        .unwrap();
        let mut store = ParamStore::<f64>::new();
        conv.register_params(&mut store).unwrap();
        genes.register_params(&mut store).unwrap();
        let mut rng = SplitMix64::new(9);
        let patch: Vec<u8> = (0..9 * 9 * 3).map(|_| rng.below(256) as u8).collect();
        let s = spot(Payload::Patch(patch));
        let recs = [gene("A", "alpha beta"), gene("B", "gamma")];
        let r = grad_check(&store, 1e-4, |g, st| {
            let img = conv.encode(g, st, &[&s], (9, 9))?;
            let gn = genes.encode(g, st, &[&recs[0], &recs[1]])?;
            let col = g.gather(img, (0..4).collect(), 4, 1)?;
            let prod = g.matmul(gn, col)?;
            Ok(g.sum(prod))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn precomputed_tables() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("features.f32");
        let ids: Vec<String> = ["a", "b", "c"].iter().map(|s| s.to_string()).collect();
        save_precomputed(&path, &ids, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let t = load_precomputed(&path).unwrap();
        assert_eq!(t.len(), 3);
        assert_eq!(t.get("b").unwrap(), &[3.0, 4.0]);
        assert!(matches!(t.get("zz"), Err(Error::UnknownId(_))));
        binio::write_matrix(&path, 2, 2, &[0.0; 4]).unwrap();
        assert!(matches!(load_precomputed(&path), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn precomputed_gene_miss_is_unknown_gene() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("genes.f32");
        save_precomputed(&path, &["ACTB".to_string()], 1, &[0.5]).unwrap();
        let f = GeneFeaturizer::new(&FeaturizerSpec {
            kind: FeaturizerKind::Precomputed,
            source: Some(path),
            ..FeaturizerSpec::hashed_text(0)
        })
        .unwrap();
        assert_eq!(f.featurize(&gene("ACTB", "")).unwrap(), vec![0.5]);
        assert!(matches!(f.featurize(&gene("NOPE", "")), Err(Error::UnknownGene(_))));
    }
}
