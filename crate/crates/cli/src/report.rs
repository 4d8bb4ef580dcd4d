//! Report computations over trajectory dumps: strict keyphrase-usage trends,
//! configurable pattern counters, and importance-weight analyses.

use std::collections::BTreeMap;

use ctrlr_core::lexicon::{contains_phrase, KeyphraseConstraint};
use ctrlr_core::optimizer::{weight_regime, REGIME_HIGH, REGIME_LOW};
use ctrlr_core::rollout::GuidedTrajectory;

/// Fraction of trajectories, per iteration, whose emitted content contains
/// any phrase of each pattern (exact contiguous containment; EOS is not
/// content). Measured over every trajectory regardless of which constraint
/// guided it.
pub fn keyword_usage_by_iteration(
    trajectories: &[GuidedTrajectory],
    patterns: &[KeyphraseConstraint],
    eos: u32,
) -> Vec<(u64, BTreeMap<String, f64>)> {
    let mut grouped: BTreeMap<u64, Vec<&GuidedTrajectory>> = BTreeMap::new();
    for t in trajectories {
        grouped.entry(t.iteration).or_default().push(t);
    }
    grouped
        .into_iter()
        .map(|(iter, trajs)| {
            let mut rates = BTreeMap::new();
            for pattern in patterns {
                let hits = trajs
                    .iter()
                    .filter(|t| {
                        let content: Vec<u32> =
                            t.tokens.iter().copied().filter(|&x| x != eos).collect();
                        pattern.phrases.iter().any(|p| contains_phrase(&content, p))
                    })
                    .count();
                rates.insert(pattern.id.clone(), hits as f64 / trajs.len().max(1) as f64);
            }
            (iter, rates)
        })
        .collect()
}

/// One log10-decade histogram bin with its accuracy.
#[derive(Debug, Clone)]
pub struct WeightBin {
    pub log10_lo: i32,
    pub log10_hi: i32,
    pub count: usize,
    pub mean_accuracy: Option<f64>,
}

/// Decade histogram of trajectory weights with per-bin mean accuracy
/// (accuracy = fraction with positive reward).
pub fn weight_histogram(trajectories: &[GuidedTrajectory]) -> Vec<WeightBin> {
    if trajectories.is_empty() {
        return Vec::new();
    }
    let decade = |t: &GuidedTrajectory| -> i32 {
        let l10 = t.log_w_total / std::f64::consts::LN_10;
        l10.floor().clamp(-30.0, 5.0) as i32
    };
    let decades: Vec<i32> = trajectories.iter().map(&decade).collect();
    let lo = *decades.iter().min().unwrap();
    let hi = *decades.iter().max().unwrap();
    (lo..=hi)
        .map(|d| {
            let in_bin: Vec<&GuidedTrajectory> = trajectories
                .iter()
                .zip(decades.iter())
                .filter(|(_, &dec)| dec == d)
                .map(|(t, _)| t)
                .collect();
            let mean_accuracy = (!in_bin.is_empty()).then(|| {
                in_bin.iter().filter(|t| t.reward > 0.0).count() as f64 / in_bin.len() as f64
            });
            WeightBin { log10_lo: d, log10_hi: d + 1, count: in_bin.len(), mean_accuracy }
        })
        .collect()
}

/// One of the three weight regimes.
#[derive(Debug, Clone)]
pub struct RegimeRow {
    pub name: &'static str,
    pub w_lo: f64,
    pub w_hi: f64,
    pub count: usize,
    pub mean_accuracy: Option<f64>,
}

/// Buckets trajectories at the 1e-6 and 1e-1 weight boundaries.
pub fn weight_regimes(trajectories: &[GuidedTrajectory]) -> [RegimeRow; 3] {
    let names = ["noisy", "exploratory", "on_policy"];
    let bounds = [(0.0, REGIME_LOW), (REGIME_LOW, REGIME_HIGH), (REGIME_HIGH, f64::INFINITY)];
    let mut counts = [0usize; 3];
    let mut correct = [0usize; 3];
    for t in trajectories {
        let r = weight_regime(t.log_w_total);
        counts[r] += 1;
        correct[r] += (t.reward > 0.0) as usize;
    }
    std::array::from_fn(|i| RegimeRow {
        name: names[i],
        w_lo: bounds[i].0,
        w_hi: bounds[i].1,
        count: counts[i],
        mean_accuracy: (counts[i] > 0).then(|| correct[i] as f64 / counts[i] as f64),
    })
}

/// Decile row of the accuracy-vs-weight table.
#[derive(Debug, Clone)]
pub struct AccuracyRow {
    pub decile: usize,
    pub w_lo: f64,
    pub w_hi: f64,
    pub count: usize,
    pub mean_accuracy: f64,
}

/// Splits trajectories into weight deciles and reports accuracy per decile.
pub fn accuracy_vs_weight(trajectories: &[GuidedTrajectory]) -> Vec<AccuracyRow> {
    if trajectories.is_empty() {
        return Vec::new();
    }
    let mut sorted: Vec<&GuidedTrajectory> = trajectories.iter().collect();
    sorted.sort_by(|a, b| a.log_w_total.total_cmp(&b.log_w_total));
    let n = sorted.len();
    let deciles = 10.min(n);
    (0..deciles)
        .map(|d| {
            let start = d * n / deciles;
            let end = ((d + 1) * n / deciles).max(start + 1);
            let slice = &sorted[start..end.min(n)];
            let correct = slice.iter().filter(|t| t.reward > 0.0).count();
            AccuracyRow {
                decile: d,
                w_lo: slice.first().unwrap().weight(),
                w_hi: slice.last().unwrap().weight(),
                count: slice.len(),
                mean_accuracy: correct as f64 / slice.len() as f64,
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(iteration: u64, tokens: Vec<u32>, log_w: f64, reward: f64) -> GuidedTrajectory {
        let n = tokens.len();
        GuidedTrajectory {
            constraint_id: "c".into(),
            prompt_id: 0,
            prompt: vec![],
            tokens,
            log_pi_old: vec![0.0; n],
            log_mu: vec![0.0; n],
            log_w: vec![0.0; n],
            acceptance_step: None,
            log_w_total: log_w,
            fallback: false,
            reward,
            iteration,
        }
    }

    #[test]
    fn unguided_dump_lands_in_the_unit_weight_bin() {
        let trajs: Vec<GuidedTrajectory> =
            (0..10).map(|i| traj(0, vec![1, 2], 0.0, if i < 4 { 1.0 } else { -1.0 })).collect();
        let regimes = weight_regimes(&trajs);
        assert_eq!(regimes[0].count, 0);
        assert_eq!(regimes[1].count, 0);
        assert_eq!(regimes[2].count, 10);
        assert!((regimes[2].mean_accuracy.unwrap() - 0.4).abs() < 1e-12);
        let hist = weight_histogram(&trajs);
        assert_eq!(hist.iter().map(|b| b.count).sum::<usize>(), 10);
    }

    #[test]
    fn regime_boundaries_are_exactly_the_published_ones() {
        let rows = weight_regimes(&[]);
        assert_eq!(rows[0].w_hi, 1e-6);
        assert_eq!(rows[1].w_lo, 1e-6);
        assert_eq!(rows[1].w_hi, 1e-1);
        assert_eq!(rows[2].w_lo, 1e-1);
    }

    #[test]
    fn absent_phrase_has_zero_usage() {
        let trajs = vec![traj(0, vec![1, 2, 3], 0.0, 1.0), traj(0, vec![2, 2], 0.0, -1.0)];
        let patterns = vec![
            KeyphraseConstraint::new("present", vec![vec![2]]).unwrap(),
            KeyphraseConstraint::new("absent", vec![vec![7, 8]]).unwrap(),
        ];
        let usage = keyword_usage_by_iteration(&trajs, &patterns, 99);
        assert_eq!(usage.len(), 1);
        let (_, rates) = &usage[0];
        assert_eq!(rates["present"], 1.0);
        assert_eq!(rates["absent"], 0.0);
    }

    #[test]
    fn eos_is_excluded_from_content() {
        let eos = 9u32;
        let trajs = vec![traj(0, vec![1, eos, 2], 0.0, 1.0)];
        let patterns = vec![KeyphraseConstraint::new("pair", vec![vec![1, 2]]).unwrap()];
        let usage = keyword_usage_by_iteration(&trajs, &patterns, eos);
        assert_eq!(usage[0].1["pair"], 1.0);
    }

    #[test]
    fn accuracy_table_is_monotone_in_weight_ranges() {
        let trajs: Vec<GuidedTrajectory> = (0..40)
            .map(|i| traj(0, vec![1], -(i as f64), if i % 3 == 0 { 1.0 } else { -1.0 }))
            .collect();
        let table = accuracy_vs_weight(&trajs);
        assert_eq!(table.len(), 10);
        for pair in table.windows(2) {
            assert!(pair[0].w_lo <= pair[1].w_lo);
        }
        assert_eq!(table.iter().map(|r| r.count).sum::<usize>(), 40);
    }
}
