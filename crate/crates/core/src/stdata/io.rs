use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{Dataset, ExprState, ExpressionMatrix, GeneLibrary, GeneRecord, Payload, PayloadKind, SpotRecord, Wsi};
use crate::binio;
use crate::error::{Error, Result};

/// Contents of `manifest.txt`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    pub payload_kind: PayloadKind,
    pub patch_h: usize,
    pub patch_w: usize,
    pub feature_dim: usize,
    pub n_genes: usize,
    pub wsi_ids: Vec<String>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "payload_kind={}", self.payload_kind.as_str()).unwrap();
        writeln!(s, "patch_h={}", self.patch_h).unwrap();
        writeln!(s, "patch_w={}", self.patch_w).unwrap();
        writeln!(s, "feature_dim={}", self.feature_dim).unwrap();
        writeln!(s, "n_genes={}", self.n_genes).unwrap();
        writeln!(s, "wsi_ids={}", self.wsi_ids.join(",")).unwrap();
        s
    }

    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::data(context, format!("line {} is not key=value", i + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::data(context, format!("missing key {k:?}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::data(context, format!("key {k:?} is not a non-negative integer")))
        };
        let wsi_ids: Vec<String> = get("wsi_ids")?
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect();
        if wsi_ids.is_empty() {
            return Err(Error::data(context, "wsi_ids is empty"));
        }
        Ok(Self {
            payload_kind: get("payload_kind")?.parse()?,
            patch_h: num("patch_h")?,
            patch_w: num("patch_w")?,
            feature_dim: num("feature_dim")?,
            n_genes: num("n_genes")?,
            wsi_ids,
        })
    }
}

fn read_text(path: &Path) -> Result<String> {
    let bytes = binio::read_file(path)?;
    String::from_utf8(bytes).map_err(|_| Error::data(path.display().to_string(), "not valid UTF-8"))
}

fn parse_genes(text: &str, context: &str) -> Result<Vec<GeneRecord>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|line| {
            let (name, desc) = line.split_once('\t').unwrap_or((line, ""));
            GeneRecord::new(name, desc).map_err(|e| match e {
                Error::Data { detail, .. } => Error::data(context, detail),
                other => other,
            })
        })
        .collect()
}

fn parse_spots(text: &str, context: &str) -> Result<Vec<(String, i64, i64)>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 3 {
                return Err(Error::data(
                    context,
                    format!("line {} has {} fields, expected spot_id, x, y", i + 1, f.len()),
                ));
            }
            let coord = |s: &str| {
                s.trim()
                    .parse::<i64>()
                    .map_err(|_| Error::data(context, format!("line {}: bad coordinate {s:?}", i + 1)))
            };
            Ok((f[0].to_string(), coord(f[1])?, coord(f[2])?))
        })
        .collect()
}

/// Resolves either a dataset directory or its `manifest.txt`.
fn dataset_dir(path: &Path) -> PathBuf {
    if path.file_name().is_some_and(|n| n == "manifest.txt") {
        path.parent().map(Path::to_path_buf).unwrap_or_default()
    } else {
        path.to_path_buf()
    }
}

/// Loads a dataset directory, validating every cross-reference. Expression is
/// returned in the raw state.
pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let dir = dataset_dir(path);
    let manifest_path = dir.join("manifest.txt");
    let manifest = Manifest::parse(&read_text(&manifest_path)?, &manifest_path.display().to_string())?;

    let genes_path = dir.join("genes.tsv");
    let genes = parse_genes(&read_text(&genes_path)?, &genes_path.display().to_string())?;
    if genes.len() != manifest.n_genes {
        return Err(Error::DimensionMismatch {
            context: format!("{} gene count vs manifest n_genes", genes_path.display()),
            expected: manifest.n_genes,
            found: genes.len(),
        });
    }
    let library = GeneLibrary::new(genes)?;

    let mut wsis = Vec::with_capacity(manifest.wsi_ids.len());
    for wsi_id in &manifest.wsi_ids {
        let wdir = dir.join(wsi_id);
        let spots_path = wdir.join("spots.tsv");
        let spots = parse_spots(&read_text(&spots_path)?, &spots_path.display().to_string())?;

        let expr_path = wdir.join("expression.f32");
        let (rows, cols, values) = binio::read_matrix(&expr_path)?;
        let ctx = expr_path.display().to_string();
        if rows != spots.len() {
            return Err(Error::DimensionMismatch {
                context: format!("{ctx} rows vs {} spots", spots_path.display()),
                expected: spots.len(),
                found: rows,
            });
        }
        if cols != library.len() {
            return Err(Error::DimensionMismatch {
                context: format!("{ctx} columns vs genes.tsv"),
                expected: library.len(),
                found: cols,
            });
        }
        if let Some(i) = values.iter().position(|&v| v < 0.0) {
            return Err(Error::NegativeCount {
                context: ctx,
                row: i / cols,
                col: i % cols,
                value: values[i],
            });
        }
        let expression = ExpressionMatrix::new(
            rows,
            cols,
            values.into_iter().map(f64::from).collect(),
            ExprState::Raw,
        )
        .map_err(|e| match e {
            Error::Data { detail, .. } => Error::data(expr_path.display().to_string(), detail),
            other => other,
        })?;

        let payloads: Vec<Payload> = match manifest.payload_kind {
            PayloadKind::Feature => {
                let fpath = wdir.join("features.f32");
                let (frows, fcols, fvals) = binio::read_matrix(&fpath)?;
                if frows != spots.len() {
                    return Err(Error::DimensionMismatch {
                        context: format!("{} rows vs spots", fpath.display()),
                        expected: spots.len(),
                        found: frows,
                    });
                }
                if fcols != manifest.feature_dim {
                    return Err(Error::DimensionMismatch {
                        context: format!("{} columns vs manifest feature_dim", fpath.display()),
                        expected: manifest.feature_dim,
                        found: fcols,
                    });
                }
                fvals
                    .chunks(fcols.max(1))
                    .take(frows)
                    .map(|c| Payload::Feature(c.to_vec()))
                    .collect()
            }
            PayloadKind::Patch => {
                let ppath = wdir.join("patches.u8");
                let (h, w, patches) =
                    binio::decode_patches(&binio::read_file(&ppath)?, &ppath.display().to_string())?;
                if (h, w) != (manifest.patch_h, manifest.patch_w) {
                    return Err(Error::data(
                        ppath.display().to_string(),
                        format!(
                            "patch size {h}x{w} differs from manifest {}x{}",
                            manifest.patch_h, manifest.patch_w
                        ),
                    ));
                }
                if patches.len() != spots.len() {
                    return Err(Error::DimensionMismatch {
                        context: format!("{} patch count vs spots", ppath.display()),
                        expected: spots.len(),
                        found: patches.len(),
                    });
                }
                patches.into_iter().map(Payload::Patch).collect()
            }
        };

        let spots = spots
            .into_iter()
            .zip(payloads)
            .map(|((spot_id, x, y), payload)| SpotRecord {
                spot_id,
                wsi_id: wsi_id.clone(),
                x,
                y,
                payload,
            })
            .collect();
        wsis.push(Wsi {
            id: wsi_id.clone(),
            spots,
            expression,
        });
    }

    Ok(Dataset {
        library,
        wsis,
        payload_kind: manifest.payload_kind,
        patch_h: manifest.patch_h,
        patch_w: manifest.patch_w,
        feature_dim: manifest.feature_dim,
    })
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes a dataset in the directory layout read by [`load_dataset`].
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    binio::write_file(&dir.join("manifest.txt"), ds.manifest().to_text().as_bytes())?;
    let mut genes = String::new();
    for g in ds.library.records() {
        writeln!(genes, "{}\t{}", g.name, g.description).unwrap();
    }
    binio::write_file(&dir.join("genes.tsv"), genes.as_bytes())?;

    for w in &ds.wsis {
        let wdir = dir.join(&w.id);
        create_dir(&wdir)?;
        let mut spots = String::new();
        for s in &w.spots {
            writeln!(spots, "{}\t{}\t{}", s.spot_id, s.x, s.y).unwrap();
        }
        binio::write_file(&wdir.join("spots.tsv"), spots.as_bytes())?;
        let e = &w.expression;
        let vals: Vec<f32> = e.values().iter().map(|&v| v as f32).collect();
        binio::write_matrix(&wdir.join("expression.f32"), e.rows(), e.cols(), &vals)?;
        match ds.payload_kind {
            PayloadKind::Feature => {
                let mut flat = Vec::with_capacity(w.spots.len() * ds.feature_dim);
                for s in &w.spots {
                    match &s.payload {
                        Payload::Feature(f) if f.len() == ds.feature_dim => flat.extend_from_slice(f),
                        _ => {
                            return Err(Error::data(
                                &s.spot_id,
                                format!("payload is not a {}-dim feature vector", ds.feature_dim),
                            ))
                        }
                    }
                }
                binio::write_matrix(&wdir.join("features.f32"), w.spots.len(), ds.feature_dim, &flat)?;
            }
            PayloadKind::Patch => {
                let size = ds.patch_h * ds.patch_w * 3;
                let patches = w
                    .spots
                    .iter()
                    .map(|s| match &s.payload {
                        Payload::Patch(p) if p.len() == size => Ok(p.clone()),
                        _ => Err(Error::data(&s.spot_id, "payload is not a patch of the declared size")),
                    })
                    .collect::<Result<Vec<_>>>()?;
                binio::write_file(
                    &wdir.join("patches.u8"),
                    &binio::encode_patches(ds.patch_h, ds.patch_w, &patches),
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Dataset {
        let library = GeneLibrary::new(vec![
            GeneRecord::new("ACTB", "beta actin").unwrap(),
            GeneRecord::new("GAPDH", "").unwrap(),
            GeneRecord::new("DDT", "d-dopachrome tautomerase").unwrap(),
        ])
        .unwrap();
        let wsi = |id: &str, base: f64| Wsi {
            id: id.into(),
            spots: (0..2)
                .map(|i| SpotRecord {
                    spot_id: format!("{id}_{i}"),
                    wsi_id: id.into(),
                    x: i,
                    y: 2 * i,
                    payload: Payload::Feature(vec![i as f32, base as f32]),
                })
                .collect(),
            expression: ExpressionMatrix::new(2, 3, (0..6).map(|v| v as f64 + base).collect(), ExprState::Raw)
                .unwrap(),
        };
        Dataset {
            library,
            wsis: vec![wsi("A", 0.0), wsi("B", 10.0)],
            payload_kind: PayloadKind::Feature,
            patch_h: 0,
            patch_w: 0,
            feature_dim: 2,
        }
    }

    #[test]
    fn round_trip_and_counts() {
        let dir = tempfile::tempdir().unwrap();
        let ds = fixture();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.n_spots(), 4);
        assert_eq!(back.library.len(), 3);
        assert_eq!(back, ds);
        let via_manifest = load_dataset(&dir.path().join("manifest.txt")).unwrap();
        assert_eq!(via_manifest, ds);
    }

    #[test]
    fn patch_payload_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = fixture();
        ds.payload_kind = PayloadKind::Patch;
        ds.patch_h = 2;
        ds.patch_w = 2;
        ds.feature_dim = 0;
        for w in &mut ds.wsis {
            for (i, s) in w.spots.iter_mut().enumerate() {
                s.payload = Payload::Patch(vec![i as u8 * 40; 12]);
            }
        }
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }

    #[test]
    fn row_count_mismatch_names_both_counts() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&fixture(), dir.path()).unwrap();
        std::fs::write(dir.path().join("A/spots.tsv"), "A_0\t0\t0\n").unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { expected: 1, found: 2, .. }), "{err}");
        let msg = err.to_string();
        assert!(msg.contains('1') && msg.contains('2'));
    }

    #[test]
    fn duplicate_name_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&fixture(), dir.path()).unwrap();
        std::fs::write(dir.path().join("genes.tsv"), "ACTB\ta\nACTB\tb\nDDT\tc\n").unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::DuplicateGene(n)) if n == "ACTB"));
    }

    #[test]
    fn negative_count_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&fixture(), dir.path()).unwrap();
        binio::write_matrix(&dir.path().join("B/expression.f32"), 2, 3, &[0.0, 1.0, -3.0, 0.0, 0.0, 0.0])
            .unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::NegativeCount { row: 0, col: 2, .. })
        ));
        std::fs::remove_file(dir.path().join("B/expression.f32")).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn feature_dim_checked() {
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&fixture(), dir.path()).unwrap();
        binio::write_matrix(&dir.path().join("A/features.f32"), 2, 3, &[0.0; 6]).unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(Error::DimensionMismatch { expected: 2, found: 3, .. })
        ));
    }
}
