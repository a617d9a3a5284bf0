//! Synthetic datasets with a planted image-to-gene signal.
//!
//! A shared "world" (seeded by `world_seed`) fixes a pool of signal tokens,
//! each with a random latent vector, and a pool of distractor tokens. Gene
//! `g` gets a description of 4 signal and 4 distractor tokens; its latent
//! `u_g` is a fixed multiple of the sum of its signal-token vectors, so the
//! latent is a function of the description text alone. Spot `s` draws
//! `v_s ~ N(0, I)`; its feature vector is `v_s` followed by distractor
//! dimensions (or, for patch payloads, a rendered texture whose channel
//! means and contrast encode `v_s`). Raw expression is
//! `max(0, round(50 * sigmoid(u_g . v_s) + noise))`.

use std::path::Path;

use super::{save_dataset, Dataset, ExprState, ExpressionMatrix, GeneLibrary, GeneRecord, Payload, PayloadKind, SpotRecord, Wsi};
use crate::error::{Error, Result};
use crate::featurize::tokenize;
use crate::numcore::SplitMix64;

pub const SIGNAL_TOKENS_PER_GENE: usize = 4;
pub const DISTRACTOR_TOKENS_PER_GENE: usize = 4;
const SIGNAL_POOL: usize = 8;
const DISTRACTOR_POOL: usize = 512;
const MAX_LATENT: usize = 4;
/// Keeps `u . v` at a standard deviation of roughly 1.5.
const LATENT_SCALE: f64 = 0.375;
const AMPLITUDE: f64 = 50.0;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub n_wsis: usize,
    pub spots_per_wsi: usize,
    pub m_genes: usize,
    /// Feature dimension for feature payloads; ignored when `patch_size > 0`.
    pub feature_dim: usize,
    pub noise_sd: f64,
    pub seed: u64,
    /// Seed of the token pools and latents; defaults to `seed`. Datasets
    /// sharing a world seed share gene descriptions by name.
    pub world_seed: Option<u64>,
    /// Index of the first gene; gene `j` is named `GQ{offset + j:05}`.
    pub gene_offset: usize,
    /// Side of square patch payloads; 0 writes feature vectors.
    pub patch_size: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            n_wsis: 2,
            spots_per_wsi: 200,
            m_genes: 60,
            feature_dim: 16,
            noise_sd: 1.0,
            seed: 0,
            world_seed: None,
            gene_offset: 0,
            patch_size: 0,
        }
    }
}

/// Planted latents behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthTruth {
    pub gene_latents: Vec<Vec<f64>>,
    /// Per WSI, per spot.
    pub spot_latents: Vec<Vec<Vec<f64>>>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn random_token(rng: &mut SplitMix64) -> String {
    (0..7).map(|_| (b'a' + rng.below(26) as u8) as char).collect()
}

/// Token pools and signal vectors shared by every dataset of one world.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    latent_dim: usize,
    signal: Vec<(String, Vec<f64>)>,
    distractors: Vec<String>,
    seed: u64,
}

impl SynthWorld {
    pub fn new(seed: u64, latent_dim: usize) -> Self {
        let mut rng = SplitMix64::stream(seed, "synth-world");
        let mut used = std::collections::HashSet::new();
        let mut fresh = |rng: &mut SplitMix64| loop {
            let t = random_token(rng);
            if used.insert(t.clone()) {
                break t;
            }
        };
        let mut signal = Vec::with_capacity(SIGNAL_POOL);
        for _ in 0..SIGNAL_POOL {
            let tok = fresh(&mut rng);
            let vec = (0..MAX_LATENT).map(|_| rng.normal()).collect::<Vec<_>>();
            signal.push((tok, vec[..latent_dim].to_vec()));
        }
        let distractors = (0..DISTRACTOR_POOL).map(|_| fresh(&mut rng)).collect();
        Self {
            latent_dim,
            signal,
            distractors,
            seed,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    /// Description of the gene with global index `idx`.
    pub fn description(&self, idx: usize) -> String {
        let mut rng = SplitMix64::stream(self.seed ^ (idx as u64).wrapping_mul(0x9E37_79B9), "synth-gene");
        let mut sig: Vec<usize> = (0..SIGNAL_POOL).collect();
        rng.shuffle(&mut sig);
        let mut toks: Vec<&str> = sig[..SIGNAL_TOKENS_PER_GENE]
            .iter()
            .map(|&i| self.signal[i].0.as_str())
            .collect();
        for _ in 0..DISTRACTOR_TOKENS_PER_GENE {
            toks.push(&self.distractors[rng.below(DISTRACTOR_POOL)]);
        }
        rng.shuffle(&mut toks);
        toks.join(" ")
    }

    /// `u_g`: scaled sum of the vectors of the signal tokens in `text`.
    pub fn gene_latent(&self, text: &str) -> Vec<f64> {
        let mut u = vec![0.0; self.latent_dim];
        for tok in tokenize(text) {
            if let Some((_, v)) = self.signal.iter().find(|(t, _)| *t == tok) {
                for (a, b) in u.iter_mut().zip(v) {
                    *a += LATENT_SCALE * b;
                }
            }
        }
        u
    }

    /// Noise-free expected raw count.
    pub fn mean_count(gene_latent: &[f64], spot_latent: &[f64]) -> f64 {
        let z: f64 = gene_latent.iter().zip(spot_latent).map(|(a, b)| a * b).sum();
        AMPLITUDE * sigmoid(z)
    }
}

fn render_patch(v: &[f64], size: usize, rng: &mut SplitMix64) -> Vec<u8> {
    let lat = |i: usize| v.get(i).copied().unwrap_or(0.0);
    let base: Vec<f64> = (0..3).map(|c| 40.0 + 175.0 * sigmoid(lat(c))).collect();
    let contrast = 10.0 + 50.0 * sigmoid(lat(3));
    let mut out = Vec::with_capacity(size * size * 3);
    for _ in 0..size * size {
        let n = rng.normal();
        for b in &base {
            out.push((b + contrast * n).round().clamp(0.0, 255.0) as u8);
        }
    }
    out
}

/// Builds the dataset in memory together with its planted latents.
pub fn synth_dataset(p: &SynthParams) -> Result<(Dataset, SynthTruth)> {
    if p.n_wsis == 0 || p.spots_per_wsi == 0 || p.m_genes == 0 {
        return Err(Error::Argument("synthetic counts must all be at least 1".into()));
    }
    let patch = p.patch_size > 0;
    if !patch && p.feature_dim == 0 {
        return Err(Error::Argument("feature_dim must be at least 1".into()));
    }
    if !(p.noise_sd >= 0.0 && p.noise_sd.is_finite()) {
        return Err(Error::Argument(format!("noise_sd must be non-negative, got {}", p.noise_sd)));
    }
    let latent_dim = if patch { MAX_LATENT } else { p.feature_dim.min(MAX_LATENT) };
    let world = SynthWorld::new(p.world_seed.unwrap_or(p.seed), latent_dim);

    let records = (0..p.m_genes)
        .map(|j| {
            let idx = p.gene_offset + j;
            GeneRecord::new(format!("GQ{idx:05}"), world.description(idx))
        })
        .collect::<Result<Vec<_>>>()?;
    let gene_latents: Vec<Vec<f64>> = records.iter().map(|r| world.gene_latent(&r.description)).collect();
    let library = GeneLibrary::new(records)?;

    let side = (p.spots_per_wsi as f64).sqrt().ceil() as usize;
    let mut wsis = Vec::with_capacity(p.n_wsis);
    let mut spot_latents = Vec::with_capacity(p.n_wsis);
    for w in 0..p.n_wsis {
        let wsi_id = format!("wsi{w}");
        let mut rng = SplitMix64::stream(p.seed, &format!("synth-spots-{w}"));
        let mut noise = SplitMix64::stream(p.seed, &format!("synth-noise-{w}"));
        let mut spots = Vec::with_capacity(p.spots_per_wsi);
        let mut latents = Vec::with_capacity(p.spots_per_wsi);
        let mut values = Vec::with_capacity(p.spots_per_wsi * p.m_genes);
        for i in 0..p.spots_per_wsi {
            let v: Vec<f64> = (0..latent_dim).map(|_| rng.normal()).collect();
            let payload = if patch {
                Payload::Patch(render_patch(&v, p.patch_size, &mut rng))
            } else {
                let mut f: Vec<f32> = v.iter().map(|&x| x as f32).collect();
                f.extend((latent_dim..p.feature_dim).map(|_| rng.normal() as f32));
                Payload::Feature(f)
            };
            for u in &gene_latents {
                let y = SynthWorld::mean_count(u, &v) + p.noise_sd * noise.normal();
                values.push(y.round().max(0.0));
            }
            spots.push(SpotRecord {
                spot_id: format!("{wsi_id}_s{i:04}"),
                wsi_id: wsi_id.clone(),
                x: (i % side) as i64,
                y: (i / side) as i64,
                payload,
            });
            latents.push(v);
        }
        wsis.push(Wsi {
            id: wsi_id,
            expression: ExpressionMatrix::new(p.spots_per_wsi, p.m_genes, values, ExprState::Raw)?,
            spots,
        });
        spot_latents.push(latents);
    }

    let ds = Dataset {
        library,
        wsis,
        payload_kind: if patch { PayloadKind::Patch } else { PayloadKind::Feature },
        patch_h: p.patch_size,
        patch_w: p.patch_size,
        feature_dim: if patch { 0 } else { p.feature_dim },
    };
    Ok((
        ds,
        SynthTruth {
            gene_latents,
            spot_latents,
        },
    ))
}

/// Generates a dataset and writes it to `out_dir`.
pub fn synth_generate(p: &SynthParams, out_dir: &Path) -> Result<Dataset> {
    let (ds, _) = synth_dataset(p)?;
    save_dataset(&ds, out_dir)?;
    Ok(ds)
}
