use super::{ExprState, ExpressionMatrix};
use crate::error::{Error, Result};

/// Min-max rescales each row to `[0, 1]`; constant rows become zeros.
pub fn rescale_rows(values: &mut [f64], cols: usize) {
    if cols == 0 {
        return;
    }
    for row in values.chunks_mut(cols) {
        let (lo, hi) = row
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let span = hi - lo;
        for v in row.iter_mut() {
            *v = if span > 0.0 {
                ((*v - lo) / span).clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
}

/// `log(1 + v)` followed by per-spot min-max scaling.
pub fn normalize(raw: &ExpressionMatrix) -> Result<ExpressionMatrix> {
    if raw.state() != ExprState::Raw {
        return Err(Error::ExpressionState("normalize expects raw counts".into()));
    }
    let mut values: Vec<f64> = raw.values().iter().map(|v| v.ln_1p()).collect();
    rescale_rows(&mut values, raw.cols());
    ExpressionMatrix::new(raw.rows(), raw.cols(), values, ExprState::Normalized)
}

fn log1p_variance(m: &ExpressionMatrix, col: usize) -> f64 {
    let n = m.rows();
    if n == 0 {
        return 0.0;
    }
    let xs: Vec<f64> = (0..n).map(|r| m.get(r, col).ln_1p()).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64
}

/// Indices of the `k` largest scores, ties broken by the lower index.
pub(crate) fn top_k_desc(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Union over WSIs of each WSI's `k` most variable genes (variance of
/// log1p counts across that WSI's spots). Returned ascending.
pub fn select_hvg(per_wsi: &[&ExpressionMatrix], k: usize) -> Result<Vec<usize>> {
    let Some(first) = per_wsi.first() else {
        return Ok(Vec::new());
    };
    let m = first.cols();
    if k > m {
        return Err(Error::Argument(format!("k = {k} exceeds the {m} genes in the library")));
    }
    let mut keep = vec![false; m];
    for w in per_wsi {
        if w.cols() != m {
            return Err(Error::DimensionMismatch {
                context: "per-WSI gene columns".into(),
                expected: m,
                found: w.cols(),
            });
        }
        if w.state() != ExprState::Raw {
            return Err(Error::ExpressionState("gene selection expects raw counts".into()));
        }
        let vars: Vec<f64> = (0..m).map(|j| log1p_variance(w, j)).collect();
        for j in top_k_desc(&vars, k) {
            keep[j] = true;
        }
    }
    Ok((0..m).filter(|&j| keep[j]).collect())
}

/// Genes expressed (count > 0) in at least `threshold` spots over all WSIs.
pub fn filter_min_spots(per_wsi: &[&ExpressionMatrix], threshold: usize) -> Result<Vec<usize>> {
    let Some(first) = per_wsi.first() else {
        return Ok(Vec::new());
    };
    let m = first.cols();
    let mut counts = vec![0usize; m];
    for w in per_wsi {
        if w.cols() != m {
            return Err(Error::DimensionMismatch {
                context: "per-WSI gene columns".into(),
                expected: m,
                found: w.cols(),
            });
        }
        if w.state() != ExprState::Raw {
            return Err(Error::ExpressionState("spot filtering expects raw counts".into()));
        }
        for r in 0..w.rows() {
            for (j, &v) in w.row(r).iter().enumerate() {
                if v > 0.0 {
                    counts[j] += 1;
                }
            }
        }
    }
    Ok((0..m).filter(|&j| counts[j] >= threshold).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn raw(rows: usize, cols: usize, v: Vec<f64>) -> ExpressionMatrix {
        ExpressionMatrix::new(rows, cols, v, ExprState::Raw).unwrap()
    }

    #[test]
    fn hand_derived_row() {
        let e = std::f64::consts::E;
        let n = normalize(&raw(1, 3, vec![0.0, e - 1.0, e * e - 1.0])).unwrap();
        for (a, b) in n.values().iter().zip([0.0, 0.5, 1.0]) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(n.state(), ExprState::Normalized);
    }

    #[test]
    fn degenerate_rows() {
        let n = normalize(&raw(2, 3, vec![4.0, 4.0, 4.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(n.values(), &[0.0; 6]);
    }

    #[test]
    fn normalize_twice_is_state_error() {
        let n = normalize(&raw(1, 2, vec![1.0, 2.0])).unwrap();
        assert!(matches!(normalize(&n), Err(Error::ExpressionState(_))));
    }

    proptest! {
        #[test]
        fn normalized_rows_are_bounded_monotone_and_stable(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1e4, 1..12), 1..6)
        ) {
            let cols = rows.iter().map(Vec::len).min().unwrap();
            let flat: Vec<f64> = rows.iter().flat_map(|r| r[..cols].to_vec()).collect();
            let m = raw(rows.len(), cols, flat.clone());
            let n = normalize(&m).unwrap();
            for r in 0..m.rows() {
                let (a, b) = (m.row(r), n.row(r));
                for i in 0..cols {
                    prop_assert!((0.0..=1.0).contains(&b[i]));
                    for j in 0..cols {
                        if a[i] < a[j] {
                            prop_assert!(b[i] <= b[j]);
                        }
                    }
                }
            }
            let mut again = n.values().to_vec();
            rescale_rows(&mut again, cols);
            for (x, y) in again.iter().zip(n.values()) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn hvg_union_across_wsis() {
        // WSI A: gene 2 varies most; WSI B: gene 0 varies most.
        let a = raw(3, 3, vec![1.0, 1.0, 0.0, 1.0, 2.0, 50.0, 1.0, 1.0, 9.0]);
        let b = raw(3, 3, vec![0.0, 1.0, 3.0, 40.0, 1.0, 3.0, 9.0, 2.0, 3.0]);
        assert_eq!(select_hvg(&[&a, &b], 1).unwrap(), vec![0, 2]);
    }

    #[test]
    fn hvg_zero_variance_tie_break() {
        let a = raw(2, 4, vec![3.0; 8]);
        assert_eq!(select_hvg(&[&a], 2).unwrap(), vec![0, 1]);
        assert!(matches!(select_hvg(&[&a], 5), Err(Error::Argument(_))));
    }

    #[test]
    fn hvg_planted_variances() {
        // log1p values per gene are mean 1 +/- sqrt(var), giving population
        // variances [0.1, 0.9, 0.5] exactly.
        let targets = [0.1f64, 0.9, 0.5];
        let mut v = Vec::new();
        for sign in [1.0, -1.0] {
            for t in targets {
                v.push((1.0 + sign * t.sqrt()).exp_m1());
            }
        }
        let m = raw(2, 3, v);
        for (j, t) in targets.iter().enumerate() {
            assert!((log1p_variance(&m, j) - t).abs() < 1e-12);
        }
        assert_eq!(select_hvg(&[&m], 2).unwrap(), vec![1, 2]);
    }

    #[test]
    fn min_spot_filter_boundary() {
        // gene 0 expressed in 999 spots, gene 1 in 1000, gene 2 in none
        let n = 1000;
        let mut v = Vec::with_capacity(n * 3);
        for r in 0..n {
            v.extend([if r < 999 { 1.0 } else { 0.0 }, 2.0, 0.0]);
        }
        let half = raw(n / 2, 3, v[..n / 2 * 3].to_vec());
        let rest = raw(n / 2, 3, v[n / 2 * 3..].to_vec());
        assert_eq!(filter_min_spots(&[&half, &rest], 1000).unwrap(), vec![1]);
        assert_eq!(filter_min_spots(&[&half, &rest], 999).unwrap(), vec![0, 1]);
        assert_eq!(filter_min_spots(&[&half, &rest], 0).unwrap(), vec![0, 1, 2]);
    }
}
