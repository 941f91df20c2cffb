//! Global average precision over pooled top-N predictions, and the
//! missed-label breakdown.
//!
//! Ordering rules, shared by every function here:
//!
//! - per video, predictions are ranked by confidence descending, ties by
//!   ascending label id, and the first `n` are kept;
//! - the pooled list is sorted by confidence descending, then video input
//!   order, then label id.
//!
//! The recall denominator counts every ground-truth pair of the evaluated
//! videos, including labels that could never fit in a top-`n` list.

use std::cmp::Ordering;
use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Result};

/// Ground-truth label sets keyed by video id.
pub type GroundTruth = HashMap<String, BTreeSet<u32>>;

#[derive(Clone, Debug, PartialEq)]
pub struct VideoPredictions {
    pub id: String,
    pub scores: Vec<(u32, f64)>,
}

/// Ranked predictions for a sequence of videos, in evaluation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PredictionSet {
    pub videos: Vec<VideoPredictions>,
}

impl PredictionSet {
    /// Keeps the `top_n` highest-probability labels of every row.
    pub fn from_probabilities(ids: &[String], probs: &Array2<f64>, top_n: usize) -> Result<Self> {
        if ids.len() != probs.nrows() {
            return Err(shape(format!(
                "{} ids for {} probability rows",
                ids.len(),
                probs.nrows()
            )));
        }
        let videos = ids
            .iter()
            .zip(probs.rows())
            .map(|(id, row)| {
                let scores: Vec<(u32, f64)> =
                    row.iter().enumerate().map(|(l, &p)| (l as u32, p)).collect();
                VideoPredictions { id: id.clone(), scores: top_n_sorted(&scores, top_n) }
            })
            .collect();
        Ok(Self { videos })
    }

    fn validate(&self, truth: &GroundTruth) -> Result<()> {
        for v in &self.videos {
            if !truth.contains_key(&v.id) {
                return Err(invalid(format!("no ground truth for video {:?}", v.id)));
            }
            let mut seen = HashSet::with_capacity(v.scores.len());
            for &(l, c) in &v.scores {
                if !seen.insert(l) {
                    return Err(invalid(format!("label {l} predicted twice for video {:?}", v.id)));
                }
                if !c.is_finite() {
                    return Err(invalid(format!("non-finite confidence for video {:?}", v.id)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GapConfig {
    pub n: usize,
}

impl Default for GapConfig {
    fn default() -> Self {
        Self { n: 20 }
    }
}

impl GapConfig {
    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(invalid("GAP cut-off n must be at least 1"));
        }
        Ok(())
    }
}

fn by_confidence_then_label(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The per-video top-`n` in rank order.
pub fn top_n_sorted(scores: &[(u32, f64)], n: usize) -> Vec<(u32, f64)> {
    let mut v = scores.to_vec();
    v.sort_by(by_confidence_then_label);
    v.truncate(n);
    v
}

fn total_positives(predictions: &PredictionSet, truth: &GroundTruth) -> Result<usize> {
    let p: usize = predictions.videos.iter().map(|v| truth[&v.id].len()).sum();
    if p == 0 {
        return Err(invalid("ground truth of the evaluated videos is empty"));
    }
    Ok(p)
}

pub fn gap(predictions: &PredictionSet, truth: &GroundTruth, config: &GapConfig) -> Result<f64> {
    config.validate()?;
    predictions.validate(truth)?;
    let positives = total_positives(predictions, truth)?;

    // (confidence, video index, label, hit)
    let mut pooled: Vec<(f64, usize, u32, bool)> = Vec::new();
    for (vi, v) in predictions.videos.iter().enumerate() {
        let labels = &truth[&v.id];
        for (l, c) in top_n_sorted(&v.scores, config.n) {
            pooled.push((c, vi, l, labels.contains(&l)));
        }
    }
    pooled.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &(_, _, _, hit)) in pooled.iter().enumerate() {
        if hit {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// Quadratic reference for [`gap`]: selection by repeated linear scans and
/// precision recounted from the list head at every hit.
pub fn gap_bruteforce(predictions: &PredictionSet, truth: &GroundTruth, config: &GapConfig) -> Result<f64> {
    config.validate()?;
    predictions.validate(truth)?;
    let positives = total_positives(predictions, truth)?;

    // `a` ranks ahead of `b`
    fn ahead(a: (f64, usize, u32), b: (f64, usize, u32)) -> bool {
        if a.0 != b.0 {
            return a.0 > b.0;
        }
        if a.1 != b.1 {
            return a.1 < b.1;
        }
        a.2 < b.2
    }

    let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
    for (vi, v) in predictions.videos.iter().enumerate() {
        let mut rest: Vec<(f64, usize, u32)> = v.scores.iter().map(|&(l, c)| (c, vi, l)).collect();
        for _ in 0..config.n.min(rest.len()) {
            let mut best = 0;
            for j in 1..rest.len() {
                if ahead(rest[j], rest[best]) {
                    best = j;
                }
            }
            candidates.push(rest.swap_remove(best));
        }
    }

    let mut ranked = Vec::with_capacity(candidates.len());
    while !candidates.is_empty() {
        let mut best = 0;
        for j in 1..candidates.len() {
            if ahead(candidates[j], candidates[best]) {
                best = j;
            }
        }
        ranked.push(candidates.swap_remove(best));
    }

    let is_hit = |item: &(f64, usize, u32)| truth[&predictions.videos[item.1].id].contains(&item.2);
    let mut ap_sum = 0.0;
    for i in 0..ranked.len() {
        if is_hit(&ranked[i]) {
            let correct = ranked[..=i].iter().filter(|it| is_hit(it)).count();
            ap_sum += correct as f64 / (i + 1) as f64;
        }
    }
    Ok(ap_sum / positives as f64)
}

/// Videos whose top-`n` list misses at least one ground-truth label,
/// bucketed by ground-truth cardinality.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissReport {
    pub total_videos: usize,
    pub videos_with_missed_labels: usize,
    pub single_label: usize,
    pub two_or_three_labels: usize,
    pub four_plus_labels: usize,
}

impl MissReport {
    pub const CSV_HEADER: &'static str = "bucket,videos";

    pub fn csv_rows(&self) -> Vec<(String, usize)> {
        vec![
            ("total".into(), self.total_videos),
            ("missed".into(), self.videos_with_missed_labels),
            ("missed_1_label".into(), self.single_label),
            ("missed_2_3_labels".into(), self.two_or_three_labels),
            ("missed_4plus_labels".into(), self.four_plus_labels),
        ]
    }
}

impl fmt::Display for MissReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} of {} videos missed some or all labels in the top-N",
            self.videos_with_missed_labels, self.total_videos
        )?;
        writeln!(f, "  1 label:    {}", self.single_label)?;
        writeln!(f, "  2-3 labels: {}", self.two_or_three_labels)?;
        write!(f, "  4+ labels:  {}", self.four_plus_labels)
    }
}

pub fn miss_analysis(predictions: &PredictionSet, truth: &GroundTruth, config: &GapConfig) -> Result<MissReport> {
    config.validate()?;
    predictions.validate(truth)?;
    let mut report = MissReport { total_videos: predictions.videos.len(), ..Default::default() };
    for v in &predictions.videos {
        let labels = &truth[&v.id];
        let kept: HashSet<u32> = top_n_sorted(&v.scores, config.n).into_iter().map(|(l, _)| l).collect();
        if labels.iter().all(|l| kept.contains(l)) {
            continue;
        }
        report.videos_with_missed_labels += 1;
        match labels.len() {
            0 | 1 => report.single_label += 1,
            2 | 3 => report.two_or_three_labels += 1,
            _ => report.four_plus_labels += 1,
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn preds(items: &[(&str, &[(u32, f64)])]) -> PredictionSet {
        PredictionSet {
            videos: items
                .iter()
                .map(|(id, s)| VideoPredictions { id: id.to_string(), scores: s.to_vec() })
                .collect(),
        }
    }

    fn truth(items: &[(&str, &[u32])]) -> GroundTruth {
        items.iter().map(|(id, l)| (id.to_string(), l.iter().copied().collect())).collect()
    }

    fn fixture() -> (PredictionSet, GroundTruth) {
        (
            preds(&[("A", &[(0, 0.9), (3, 0.7)]), ("B", &[(1, 0.8), (4, 0.6), (2, 0.4)])]),
            truth(&[("A", &[0]), ("B", &[1, 2])]),
        )
    }

    #[test]
    fn hand_fixture() {
        let (p, t) = fixture();
        let cfg = GapConfig::default();
        let expected = (1.0 + 1.0 + 3.0 / 5.0) / 3.0;
        assert!((gap(&p, &t, &cfg).unwrap() - expected).abs() < 1e-15);
        assert!((gap_bruteforce(&p, &t, &cfg).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.866_666_7).abs() < 1e-7);
    }

    #[test]
    fn perfect_and_hopeless_rankings() {
        let t = truth(&[("A", &[0, 1]), ("B", &[2])]);
        let ok = preds(&[("A", &[(0, 0.9), (1, 0.8), (5, 0.1)]), ("B", &[(2, 0.85), (3, 0.2)])]);
        let bad = preds(&[("A", &[(4, 0.9)]), ("B", &[(3, 0.2)])]);
        let cfg = GapConfig::default();
        assert_eq!(gap(&ok, &t, &cfg).unwrap(), 1.0);
        assert_eq!(gap_bruteforce(&ok, &t, &cfg).unwrap(), 1.0);
        assert_eq!(gap(&bad, &t, &cfg).unwrap(), 0.0);
        let single = preds(&[("A", &[(0, 0.3)])]);
        assert_eq!(gap_bruteforce(&single, &truth(&[("A", &[0])]), &cfg).unwrap(), 1.0);
    }

    #[test]
    fn labels_beyond_cutoff_cost_recall() {
        let t = truth(&[("A", &[0, 1, 2])]);
        let p = preds(&[("A", &[(0, 0.9), (1, 0.8), (2, 0.7)])]);
        let g = gap(&p, &t, &GapConfig { n: 2 }).unwrap();
        assert!((g - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn ties_break_by_video_order_then_label() {
        // equal confidences across videos: video A's miss ranks before B's hit
        let t = truth(&[("A", &[9]), ("B", &[1])]);
        let p = preds(&[("A", &[(0, 0.5)]), ("B", &[(1, 0.5)])]);
        assert!((gap(&p, &t, &GapConfig::default()).unwrap() - 0.25).abs() < 1e-15);
        // within a video, lower label id survives the cut
        let t = truth(&[("A", &[3])]);
        let p = preds(&[("A", &[(5, 0.5), (3, 0.5)])]);
        assert_eq!(gap(&p, &t, &GapConfig { n: 1 }).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        let (p, t) = fixture();
        let mut missing = t.clone();
        missing.remove("B");
        assert!(gap(&p, &missing, &GapConfig::default()).is_err());
        let empty = truth(&[("A", &[]), ("B", &[])]);
        assert!(gap(&p, &empty, &GapConfig::default()).is_err());
        assert!(gap(&p, &t, &GapConfig { n: 0 }).is_err());
        let dup = preds(&[("A", &[(0, 0.9), (0, 0.7)])]);
        assert!(gap(&dup, &t, &GapConfig::default()).is_err());
        assert!(miss_analysis(&p, &missing, &GapConfig::default()).is_err());
    }

    #[test]
    fn miss_report_buckets() {
        let (p, t) = fixture();
        let r = miss_analysis(&p, &t, &GapConfig::default()).unwrap();
        assert_eq!(r.videos_with_missed_labels, 0);

        let r = miss_analysis(&p, &t, &GapConfig { n: 1 }).unwrap();
        assert_eq!(r.videos_with_missed_labels, 1);
        assert_eq!(r.two_or_three_labels, 1);
    }

    #[test]
    fn constructed_misses_are_counted() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut videos = Vec::new();
        let mut t = GroundTruth::new();
        for i in 0..100 {
            let id = format!("v{i}");
            let count = rng.random_range(1..=6usize);
            let labels: BTreeSet<u32> = (0..count as u32).map(|k| k * 7).collect();
            let scores: Vec<(u32, f64)> = if i % 10 == 3 {
                // nothing from the truth set appears
                (0..5).map(|k| (1000 + k, 0.9 - 0.1 * k as f64)).collect()
            } else {
                labels.iter().map(|&l| (l, rng.random::<f64>())).collect()
            };
            t.insert(id.clone(), labels);
            videos.push(VideoPredictions { id, scores });
        }
        let r = miss_analysis(&PredictionSet { videos }, &t, &GapConfig::default()).unwrap();
        assert_eq!(r.total_videos, 100);
        assert_eq!(r.videos_with_missed_labels, 10);
        assert_eq!(r.single_label + r.two_or_three_labels + r.four_plus_labels, 10);
    }

    fn random_instance(rng: &mut ChaCha8Rng) -> (PredictionSet, GroundTruth) {
        let n_videos = rng.random_range(1..=20);
        let vocab = rng.random_range(1..=15u32);
        let mut videos = Vec::new();
        let mut t = GroundTruth::new();
        for i in 0..n_videos {
            let id = format!("v{i}");
            let mut labels = BTreeSet::new();
            labels.insert(rng.random_range(0..vocab));
            for l in 0..vocab {
                if rng.random::<f64>() < 0.2 {
                    labels.insert(l);
                }
            }
            let mut scores = Vec::new();
            for l in 0..vocab {
                if rng.random::<f64>() < 0.8 {
                    scores.push((l, rng.random_range(0..6) as f64 / 5.0));
                }
            }
            t.insert(id.clone(), labels);
            videos.push(VideoPredictions { id, scores });
        }
        (PredictionSet { videos }, t)
    }

    #[test]
    fn matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..200 {
            let (p, t) = random_instance(&mut rng);
            let n = rng.random_range(1..=20);
            let cfg = GapConfig { n };
            let a = gap(&p, &t, &cfg).unwrap();
            let b = gap_bruteforce(&p, &t, &cfg).unwrap();
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    proptest! {
        #[test]
        fn rank_only_and_monotone(seed in 0u64..5000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (p, t) = random_instance(&mut rng);
            let cfg = GapConfig { n: 5 };
            let g = gap(&p, &t, &cfg).unwrap();
            prop_assert!((0.0..=1.0).contains(&g));

            let mut warped = p.clone();
            for v in &mut warped.videos {
                for s in &mut v.scores {
                    s.1 = (3.0 * s.1).exp() - 7.0;
                }
            }
            prop_assert_eq!(gap(&warped, &t, &cfg).unwrap(), g);

            // drop one correct prediction
            let mut fewer = p.clone();
            let mut removed = false;
            'outer: for v in &mut fewer.videos {
                let labels = &t[&v.id];
                for i in 0..v.scores.len() {
                    if labels.contains(&v.scores[i].0) {
                        v.scores.remove(i);
                        removed = true;
                        break 'outer;
                    }
                }
            }
            if removed {
                prop_assert!(gap(&fewer, &t, &cfg).unwrap() <= g + 1e-12);
            }

            // a correct label placed at the very top of the pool
            let mut boosted = p.clone();
            let v = &mut boosted.videos[0];
            let l = *t[&v.id].iter().next().unwrap();
            v.scores.retain(|s| s.0 != l);
            v.scores.push((l, 10.0));
            let before = {
                let mut q = p.clone();
                q.videos[0].scores.retain(|s| s.0 != l);
                gap(&q, &t, &cfg).unwrap()
            };
            prop_assert!(gap(&boosted, &t, &cfg).unwrap() >= before - 1e-12);
        }
    }
}
