//! Browser demo. One synthetic slide on a square grid; a small gene-aware
//! model is trained on part of the gene panel, then queried for any gene,
//! including held-out genes and free-text descriptions.

use genequery::config::RunConfig;
use genequery::evalkit::{kmeans, pearson};
use genequery::featurize::Encoders;
use genequery::model::GeneQueryModel;
use genequery::stdata::{make_gene_split, synth_dataset, Dataset, GeneRecord, SynthParams};
use genequery::trainer::Trainer;
use wasm_bindgen::prelude::*;

const SIDE: usize = 12;
const GENES: usize = 24;
const SEEN_RATIO: f64 = 0.75;

fn msg(e: genequery::Error) -> String {
    e.to_string()
}

#[wasm_bindgen]
pub struct Demo {
    ds: Dataset,
    cfg: RunConfig,
    seen: Vec<usize>,
    trained: Option<(GeneQueryModel<f32>, Encoders)>,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, String> {
        let params = SynthParams {
            n_wsis: 1,
            spots_per_wsi: SIDE * SIDE,
            m_genes: GENES,
            feature_dim: 8,
            seed: u64::from(seed),
            ..SynthParams::default()
        };
        let ds = synth_dataset(&params).map_err(msg)?.0.normalized().map_err(msg)?;
        let cfg = RunConfig {
            seed: u64::from(seed),
            d_fuse: 16,
            heads: 2,
            batch_size: 48,
            lr: 3e-3,
            ..RunConfig::default()
        };
        let seen = make_gene_split(GENES, SEEN_RATIO, cfg.seed).map_err(msg)?.seen;
        Ok(Demo {
            ds,
            cfg,
            seen,
            trained: None,
        })
    }

    /// Grid side; spot `i` sits at column `i % side`, row `i / side`.
    pub fn side(&self) -> usize {
        SIDE
    }

    pub fn gene_count(&self) -> usize {
        self.ds.library.len()
    }

    pub fn gene_name(&self, gene: usize) -> String {
        self.ds.library.get(gene).name.clone()
    }

    pub fn gene_description(&self, gene: usize) -> String {
        self.ds.library.get(gene).description.clone()
    }

    /// Whether the gene is part of the training panel.
    pub fn is_seen(&self, gene: usize) -> bool {
        self.seen.contains(&gene)
    }

    pub fn is_trained(&self) -> bool {
        self.trained.is_some()
    }

    /// Trains a fresh model for `epochs` epochs; returns the train MSE of
    /// each epoch.
    pub fn train(&mut self, epochs: usize) -> Result<Vec<f64>, String> {
        let mut cfg = self.cfg.clone();
        cfg.epochs = epochs.max(1);
        let out = Trainer::new(&self.ds, &self.ds.wsi_ids(), &self.seen, &cfg)
            .and_then(|t| t.run(|_| {}))
            .map_err(msg)?;
        self.trained = Some((out.model, out.encoders));
        Ok(out.log.iter().map(|l| l.train_mse).collect())
    }

    /// Normalized measured expression per spot.
    pub fn truth_map(&self, gene: usize) -> Result<Vec<f64>, String> {
        if gene >= self.gene_count() {
            return Err(format!("no gene {gene}"));
        }
        Ok(self.ds.wsis[0].expression.column(gene))
    }

    /// Predicted expression per spot for a library gene.
    pub fn predict_map(&self, gene: usize) -> Result<Vec<f64>, String> {
        if gene >= self.gene_count() {
            return Err(format!("no gene {gene}"));
        }
        self.predict(self.ds.library.get(gene))
    }

    /// Predicted expression per spot for a gene known only by its text.
    pub fn query_map(&self, description: &str) -> Result<Vec<f64>, String> {
        let clean: String = description.chars().map(|c| if c.is_control() { ' ' } else { c }).collect();
        let rec = GeneRecord::new("QUERY", clean).map_err(msg)?;
        self.predict(&rec)
    }

    /// Correlation between predicted and measured maps of one gene.
    pub fn correlation(&self, gene: usize) -> Result<f64, String> {
        let p = self.predict_map(gene)?;
        let t = self.truth_map(gene)?;
        Ok(pearson(&p, &t).map_err(msg)?.unwrap_or(0.0))
    }

    /// k-means labels of the per-spot latent vectors.
    pub fn cluster(&self, k: usize) -> Result<Vec<u32>, String> {
        let (model, enc) = self.model()?;
        let genes: Vec<&GeneRecord> = self.seen.iter().map(|&j| self.ds.library.get(j)).collect();
        let out = model.predict_with_latents(enc, &self.ds.wsis[0], &genes).map_err(msg)?;
        let latents: Vec<f64> = out.latents.unwrap_or_default().into_iter().map(f64::from).collect();
        let labels = kmeans(&latents, model.config().d_fuse, k, self.cfg.seed).map_err(msg)?;
        Ok(labels.into_iter().map(|l| l as u32).collect())
    }
}

impl Demo {
    fn model(&self) -> Result<(&GeneQueryModel<f32>, &Encoders), String> {
        self.trained
            .as_ref()
            .map(|(m, e)| (m, e))
            .ok_or_else(|| "train the model first".to_string())
    }

    fn predict(&self, gene: &GeneRecord) -> Result<Vec<f64>, String> {
        let (model, enc) = self.model()?;
        let p = model.predict_matrix(enc, &self.ds.wsis[0], &[gene]).map_err(msg)?;
        Ok(p.into_iter().map(f64::from).collect())
    }
}
