//! Label-frequency statistics and the two resampled training sets: the
//! tail-label subset and the tripled hard-pattern set.
//!
//! Label rank is frequency rank: rank 0 is the most frequent label, ties
//! broken by ascending label id. Labels that never occur are ranked last.

use std::borrow::Borrow;

use crate::error::{invalid, Result};
use crate::featureio::{Dataset, VideoRecord};

#[derive(Clone, Debug, PartialEq)]
pub struct LabelStats {
    /// Occurrences per label id.
    pub counts: Vec<u64>,
    /// Label ids by descending count.
    pub ranked: Vec<u32>,
    /// `coverage[k]` is the share of label instances held by the top `k + 1` labels.
    pub coverage: Vec<f64>,
    pub total: u64,
}

impl LabelStats {
    pub const CSV_HEADER: &'static str = "rank,label,count,cumulative_coverage";

    /// Rank of every label id.
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![0; self.ranked.len()];
        for (rank, &l) in self.ranked.iter().enumerate() {
            r[l as usize] = rank;
        }
        r
    }

    /// Share of label instances covered by the `k` most frequent labels.
    pub fn coverage_top(&self, k: usize) -> f64 {
        match k {
            0 => 0.0,
            k => self.coverage[(k - 1).min(self.coverage.len() - 1)],
        }
    }

    /// `(rank, label, count, cumulative_coverage)` rows.
    pub fn rows(&self) -> impl Iterator<Item = (usize, u32, u64, f64)> + '_ {
        self.ranked
            .iter()
            .enumerate()
            .map(move |(rank, &l)| (rank, l, self.counts[l as usize], self.coverage[rank]))
    }
}

pub fn label_frequency_stats<R: Borrow<VideoRecord>>(records: &[R], vocab_size: u32) -> Result<LabelStats> {
    if records.is_empty() {
        return Err(invalid("label statistics need a non-empty dataset"));
    }
    let mut counts = vec![0u64; vocab_size as usize];
    for r in records {
        for &l in &r.borrow().labels {
            let slot = counts
                .get_mut(l as usize)
                .ok_or_else(|| invalid(format!("label {l} outside vocab_size {vocab_size}")))?;
            *slot += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let mut ranked: Vec<u32> = (0..vocab_size).collect();
    ranked.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
    let mut running = 0u64;
    let coverage = ranked
        .iter()
        .map(|&l| {
            running += counts[l as usize];
            if total == 0 {
                0.0
            } else {
                running as f64 / total as f64
            }
        })
        .collect();
    Ok(LabelStats { counts, ranked, coverage, total })
}

/// Videos carrying at least one label whose frequency rank exceeds
/// `rank_threshold`, in input order. Label lists are kept intact.
pub fn build_tail_subset(dataset: &Dataset, rank_threshold: usize) -> Result<Vec<&VideoRecord>> {
    let vocab = dataset.header.vocab_size as usize;
    if rank_threshold >= vocab {
        return Err(invalid(format!(
            "rank threshold {rank_threshold} must be below vocab_size {vocab}"
        )));
    }
    let stats = label_frequency_stats(&dataset.records, dataset.header.vocab_size)?;
    let ranks = stats.ranks();
    Ok(dataset
        .records
        .iter()
        .filter(|r| r.labels.iter().any(|&l| ranks[l as usize] > rank_threshold))
        .collect())
}

/// True for the single-label and four-plus-label videos that get repeated.
pub fn is_hard_pattern(record: &VideoRecord) -> bool {
    let n = record.labels.len();
    n == 1 || n >= 4
}

/// Repeats every hard-pattern video `multiplier` times in place; other
/// videos appear once.
pub fn build_hard_subset<R: Borrow<VideoRecord>>(records: &[R], multiplier: usize) -> Result<Vec<&VideoRecord>> {
    if multiplier == 0 {
        return Err(invalid("multiplier must be at least 1"));
    }
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let r = r.borrow();
        let copies = if is_hard_pattern(r) { multiplier } else { 1 };
        out.extend(std::iter::repeat_n(r, copies));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featureio::{generate_synthetic, SyntheticSpec};
    use ndarray::Array2;

    fn rec(i: usize, labels: &[u32]) -> VideoRecord {
        VideoRecord {
            id: format!("r{i}").into_bytes(),
            frames: Array2::zeros((1, 2)),
            labels: labels.to_vec(),
        }
    }

    #[test]
    fn uniform_labels_give_linear_coverage() {
        let records: Vec<_> = (0..40).map(|i| rec(i, &[(i % 8) as u32])).collect();
        let s = label_frequency_stats(&records, 8).unwrap();
        for k in 1..=8 {
            assert_eq!(s.coverage_top(k), k as f64 / 8.0);
        }
        assert_eq!(s.ranked, (0..8).collect::<Vec<u32>>());
    }

    #[test]
    fn stats_basics() {
        let records = vec![rec(0, &[2]), rec(1, &[0, 2]), rec(2, &[1, 2, 3])];
        let s = label_frequency_stats(&records, 5).unwrap();
        assert_eq!(s.counts, vec![1, 1, 3, 1, 0]);
        assert_eq!(s.total, 6);
        assert_eq!(s.ranked, vec![2, 0, 1, 3, 4]);
        assert_eq!(*s.coverage.last().unwrap(), 1.0);
        assert!(s.coverage.windows(2).all(|w| w[0] <= w[1]));
        assert!(label_frequency_stats::<VideoRecord>(&[], 5).is_err());
    }

    #[test]
    fn tail_subset_boundaries() {
        let records = vec![rec(0, &[0]), rec(1, &[0, 1]), rec(2, &[2]), rec(3, &[0])];
        let ds = Dataset::new(2, 0, 3, records);
        // ranks: 0 → 0, 1 → 1, 2 → 2
        assert!(build_tail_subset(&ds, 2).unwrap().is_empty());
        let kept: Vec<_> = build_tail_subset(&ds, 0).unwrap().iter().map(|r| r.id_str()).collect();
        assert_eq!(kept, vec!["r1", "r2"]);
        let kept: Vec<_> = build_tail_subset(&ds, 1).unwrap().iter().map(|r| r.id_str()).collect();
        assert_eq!(kept, vec!["r2"]);
        assert!(build_tail_subset(&ds, 3).is_err());
    }

    #[test]
    fn hard_subset_rules() {
        let regular = vec![rec(0, &[0, 1]), rec(1, &[1, 2, 3])];
        let out = build_hard_subset(&regular, 3).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().zip(&regular).all(|(a, b)| *a == b));

        let mixed = vec![rec(0, &[0]), rec(1, &[0, 1]), rec(2, &[0, 1, 2, 3])];
        let out = build_hard_subset(&mixed, 3).unwrap();
        let ids: Vec<_> = out.iter().map(|r| r.id_str()).collect();
        assert_eq!(ids, vec!["r0", "r0", "r0", "r1", "r2", "r2", "r2"]);
        assert_eq!(build_hard_subset(&mixed, 1).unwrap().len(), 3);
        assert!(build_hard_subset(&mixed, 0).is_err());
    }

    #[test]
    fn power_law_head_dominates() {
        let spec = SyntheticSpec {
            num_videos: 10_000,
            vocab_size: 50,
            labels_min: 1,
            labels_max: 5,
            imbalance_exponent: 1.5,
            frames_min: 1,
            frames_max: 1,
            ..Default::default()
        };
        let ds = generate_synthetic(&spec).unwrap().dataset;
        let s = label_frequency_stats(&ds.records, 50).unwrap();
        assert!(s.coverage_top(10) >= 0.75, "top-20% coverage {}", s.coverage_top(10));
    }
}
