use crate::error::{Error, Result};
use crate::numcore::SplitMix64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<String>,
    pub test: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneSplit {
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitPlan {
    pub folds: Vec<Fold>,
    pub gene_split: Option<GeneSplit>,
    pub seed: u64,
}

/// Seeded shuffle of the WSI ids, then a contiguous partition into `n_folds`
/// balanced test groups. Both sides of a fold keep the input order.
pub fn make_wsi_folds(wsi_ids: &[String], n_folds: usize, seed: u64) -> Result<Vec<Fold>> {
    if n_folds < 2 {
        return Err(Error::Argument(format!("need at least 2 folds, got {n_folds}")));
    }
    let n = wsi_ids.len();
    if n_folds > n {
        return Err(Error::Argument(format!("{n_folds} folds requested for {n} WSIs")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SplitMix64::stream(seed, "wsi-folds").shuffle(&mut order);
    let mut group = vec![0usize; n];
    for f in 0..n_folds {
        for &i in &order[f * n / n_folds..(f + 1) * n / n_folds] {
            group[i] = f;
        }
    }
    Ok((0..n_folds)
        .map(|f| {
            let (test, train): (Vec<_>, Vec<_>) = (0..n).partition(|&i| group[i] == f);
            Fold {
                train: train.into_iter().map(|i| wsi_ids[i].clone()).collect(),
                test: test.into_iter().map(|i| wsi_ids[i].clone()).collect(),
            }
        })
        .collect())
}

/// Seen/unseen gene partition with `round(ratio * m)` seen genes.
pub fn make_gene_split(m: usize, ratio: f64, seed: u64) -> Result<GeneSplit> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Argument(format!("gene ratio must lie in (0, 1), got {ratio}")));
    }
    let n_seen = (ratio * m as f64).round() as usize;
    if n_seen == 0 || n_seen >= m {
        return Err(Error::Argument(format!(
            "ratio {ratio} of {m} genes leaves {n_seen} seen and {} unseen",
            m.saturating_sub(n_seen)
        )));
    }
    let mut order: Vec<usize> = (0..m).collect();
    SplitMix64::stream(seed, "gene-split").shuffle(&mut order);
    let mut seen = order[..n_seen].to_vec();
    let mut unseen = order[n_seen..].to_vec();
    seen.sort_unstable();
    unseen.sort_unstable();
    Ok(GeneSplit { seen, unseen, ratio })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("w{i}")).collect()
    }

    #[test]
    fn leave_one_out_with_four() {
        let folds = make_wsi_folds(&ids(4), 4, 1).unwrap();
        assert_eq!(folds.len(), 4);
        let mut tested: Vec<String> = Vec::new();
        for f in &folds {
            assert_eq!(f.test.len(), 1);
            assert_eq!(f.train.len(), 3);
            assert!(!f.train.contains(&f.test[0]));
            tested.extend(f.test.clone());
        }
        tested.sort();
        assert_eq!(tested, ids(4));
    }

    #[test]
    fn ten_into_five() {
        for f in make_wsi_folds(&ids(10), 5, 9).unwrap() {
            assert_eq!(f.test.len(), 2);
            assert_eq!(f.train.len() + f.test.len(), 10);
        }
    }

    #[test]
    fn folds_are_seeded() {
        assert_eq!(make_wsi_folds(&ids(7), 3, 5).unwrap(), make_wsi_folds(&ids(7), 3, 5).unwrap());
        assert!(matches!(make_wsi_folds(&ids(4), 1, 0), Err(Error::Argument(_))));
        assert!(matches!(make_wsi_folds(&ids(3), 4, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn gene_split_counts() {
        let s = make_gene_split(10, 0.2, 0).unwrap();
        assert_eq!((s.seen.len(), s.unseen.len()), (2, 8));
        assert_eq!(make_gene_split(785, 0.6, 3).unwrap().seen.len(), 471);
        let mut all: Vec<usize> = s.seen.iter().chain(&s.unseen).copied().collect();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn gene_split_seeds_and_errors() {
        assert_eq!(make_gene_split(50, 0.4, 11).unwrap(), make_gene_split(50, 0.4, 11).unwrap());
        assert_ne!(make_gene_split(50, 0.4, 11).unwrap(), make_gene_split(50, 0.4, 12).unwrap());
        assert!(matches!(make_gene_split(10, 0.0, 0), Err(Error::Argument(_))));
        assert!(matches!(make_gene_split(10, 1.0, 0), Err(Error::Argument(_))));
        assert!(matches!(make_gene_split(3, 0.1, 0), Err(Error::Argument(_))));
        assert!(matches!(make_gene_split(3, 0.9, 0), Err(Error::Argument(_))));
    }
}
