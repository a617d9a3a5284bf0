//! Spatial transcriptomics datasets: genes, spots grouped by whole-slide
//! image, expression matrices, preprocessing, splits and a synthetic
//! generator.

mod io;
pub(crate) mod preprocess;
mod split;
pub mod synth;

use std::collections::HashMap;

pub use io::{load_dataset, save_dataset, Manifest};
pub use preprocess::{filter_min_spots, normalize, rescale_rows, select_hvg};
pub use split::{make_gene_split, make_wsi_folds, Fold, GeneSplit, SplitPlan};
pub use synth::{synth_dataset, synth_generate, SynthParams, SynthTruth};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneRecord {
    pub name: String,
    pub description: String,
}

impl GeneRecord {
    pub fn new(name: impl Into<String>, description: impl Into<String>) -> Result<Self> {
        let name = name.into();
        let description = description.into();
        if name.trim().is_empty() {
            return Err(Error::data("gene record", "empty gene name"));
        }
        if name.contains(['\t', '\n', '\r']) {
            return Err(Error::data("gene record", format!("gene name {name:?} contains a tab or newline")));
        }
        if description.contains(['\t', '\n', '\r']) {
            return Err(Error::data(
                "gene record",
                format!("description of {name:?} contains a tab or newline"),
            ));
        }
        Ok(Self { name, description })
    }
}

/// The query vocabulary: genes in a fixed order with a name index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GeneLibrary {
    records: Vec<GeneRecord>,
    index: HashMap<String, usize>,
}

impl GeneLibrary {
    pub fn new(records: Vec<GeneRecord>) -> Result<Self> {
        let mut index = HashMap::with_capacity(records.len());
        for (i, r) in records.iter().enumerate() {
            if index.insert(r.name.clone(), i).is_some() {
                return Err(Error::DuplicateGene(r.name.clone()));
            }
        }
        Ok(Self { records, index })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[GeneRecord] {
        &self.records
    }

    pub fn get(&self, i: usize) -> &GeneRecord {
        &self.records[i]
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|r| r.name.as_str())
    }

    /// Sub-library with the given indices, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        Self::new(indices.iter().map(|&i| self.records[i].clone()).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PayloadKind {
    Patch,
    Feature,
}

impl PayloadKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PayloadKind::Patch => "patch",
            PayloadKind::Feature => "feature",
        }
    }
}

impl std::str::FromStr for PayloadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "patch" => Ok(PayloadKind::Patch),
            "feature" => Ok(PayloadKind::Feature),
            other => Err(Error::data("manifest", format!("unknown payload_kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// `h x w x 3` bytes, row-major, channel-interleaved.
    Patch(Vec<u8>),
    Feature(Vec<f32>),
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Patch(_) => PayloadKind::Patch,
            Payload::Feature(_) => PayloadKind::Feature,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpotRecord {
    pub spot_id: String,
    pub wsi_id: String,
    pub x: i64,
    pub y: i64,
    pub payload: Payload,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExprState {
    Raw,
    Normalized,
}

/// Spots x genes expression values.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpressionMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
    state: ExprState,
}

impl ExpressionMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>, state: ExprState) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                context: "expression matrix values".into(),
                expected: rows * cols,
                found: values.len(),
            });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::data("expression matrix", format!("non-finite value at flat index {i}")));
        }
        match state {
            ExprState::Raw => {
                if let Some(i) = values.iter().position(|&v| v < 0.0) {
                    return Err(Error::NegativeCount {
                        context: "expression matrix".into(),
                        row: i / cols.max(1),
                        col: i % cols.max(1),
                        value: values[i] as f32,
                    });
                }
            }
            ExprState::Normalized => {
                if let Some(i) = values.iter().position(|&v| !(0.0..=1.0).contains(&v)) {
                    return Err(Error::ExpressionState(format!(
                        "normalized value {} outside [0, 1] at flat index {i}",
                        values[i]
                    )));
                }
            }
        }
        Ok(Self {
            rows,
            cols,
            values,
            state,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn state(&self) -> ExprState {
        self.state
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let values = (0..self.rows)
            .flat_map(|r| cols.iter().map(move |&c| (r, c)))
            .map(|(r, c)| self.get(r, c))
            .collect();
        Self {
            rows: self.rows,
            cols: cols.len(),
            values,
            state: self.state,
        }
    }

    /// Rows of several matrices stacked in order.
    pub fn vstack(parts: &[&ExpressionMatrix]) -> Result<Self> {
        let Some(first) = parts.first() else {
            return Err(Error::Argument("stacking zero matrices".into()));
        };
        let mut values = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != first.cols || p.state != first.state {
                return Err(Error::DimensionMismatch {
                    context: "stacked expression columns".into(),
                    expected: first.cols,
                    found: p.cols,
                });
            }
            rows += p.rows;
            values.extend_from_slice(&p.values);
        }
        Ok(Self {
            rows,
            cols: first.cols,
            values,
            state: first.state,
        })
    }
}

/// The spots and expression of one whole-slide image.
#[derive(Debug, Clone, PartialEq)]
pub struct Wsi {
    pub id: String,
    pub spots: Vec<SpotRecord>,
    pub expression: ExpressionMatrix,
}

/// A loaded dataset: the gene library plus every whole-slide image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub library: GeneLibrary,
    pub wsis: Vec<Wsi>,
    pub payload_kind: PayloadKind,
    pub patch_h: usize,
    pub patch_w: usize,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn n_spots(&self) -> usize {
        self.wsis.iter().map(|w| w.spots.len()).sum()
    }

    pub fn wsi_ids(&self) -> Vec<String> {
        self.wsis.iter().map(|w| w.id.clone()).collect()
    }

    pub fn wsi(&self, id: &str) -> Option<&Wsi> {
        self.wsis.iter().find(|w| w.id == id)
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            payload_kind: self.payload_kind,
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            feature_dim: self.feature_dim,
            n_genes: self.library.len(),
            wsi_ids: self.wsi_ids(),
        }
    }

    /// Restricts the library and every expression matrix to `genes`.
    pub fn select_genes(&self, genes: &[usize]) -> Result<Self> {
        Ok(Self {
            library: self.library.subset(genes)?,
            wsis: self
                .wsis
                .iter()
                .map(|w| Wsi {
                    id: w.id.clone(),
                    spots: w.spots.clone(),
                    expression: w.expression.select_columns(genes),
                })
                .collect(),
            ..self.clone_header()
        })
    }

    /// Normalizes every WSI's expression (log1p then per-spot min-max).
    pub fn normalized(&self) -> Result<Self> {
        Ok(Self {
            library: self.library.clone(),
            wsis: self
                .wsis
                .iter()
                .map(|w| {
                    Ok(Wsi {
                        id: w.id.clone(),
                        spots: w.spots.clone(),
                        expression: normalize(&w.expression)?,
                    })
                })
                .collect::<Result<_>>()?,
            ..self.clone_header()
        })
    }

    /// Raw-count pipeline: keep genes seen in at least `min_spots` spots,
    /// then the union of per-WSI top `hvg_k` variable genes (0 keeps all),
    /// then normalize. Already normalized datasets pass through unfiltered.
    pub fn prepared(&self, min_spots: usize, hvg_k: usize) -> Result<Self> {
        if self.wsis.iter().all(|w| w.expression.state() == ExprState::Normalized) {
            return Ok(self.clone());
        }
        let per_wsi: Vec<&ExpressionMatrix> = self.wsis.iter().map(|w| &w.expression).collect();
        let mut keep: Vec<usize> = if min_spots > 0 {
            filter_min_spots(&per_wsi, min_spots)?
        } else {
            (0..self.library.len()).collect()
        };
        let mut ds = self.select_genes(&keep)?;
        if hvg_k > 0 {
            let per_wsi: Vec<&ExpressionMatrix> = ds.wsis.iter().map(|w| &w.expression).collect();
            keep = select_hvg(&per_wsi, hvg_k.min(ds.library.len()))?;
            ds = ds.select_genes(&keep)?;
        }
        if ds.library.is_empty() {
            return Err(Error::data("gene filtering", "no genes survive the filters"));
        }
        ds.normalized()
    }

    fn clone_header(&self) -> Self {
        Self {
            library: GeneLibrary::default(),
            wsis: Vec::new(),
            payload_kind: self.payload_kind,
            patch_h: self.patch_h,
            patch_w: self.patch_w,
            feature_dim: self.feature_dim,
        }
    }
}
