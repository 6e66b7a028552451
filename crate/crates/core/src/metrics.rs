//! Episode-level Macro-F1 and AUC, run aggregation and significance testing.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::model::predict;

/// Scores and gold labels of the queries of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeScores {
    n_way: usize,
    /// Row-major `M × N`.
    scores: Vec<f64>,
    gold: Vec<bool>,
}

impl EpisodeScores {
    pub fn new(n_way: usize, scores: Vec<f64>, gold: Vec<bool>) -> Result<Self> {
        if n_way == 0 || scores.len() != gold.len() || !scores.len().is_multiple_of(n_way) {
            return Err(Error::dim("episode scores", &[scores.len(), n_way], &[gold.len()]));
        }
        if let Some(q) = gold.chunks(n_way).position(|row| !row.contains(&true)) {
            return Err(Error::Input(format!("query {q} has no gold label")));
        }
        Ok(Self { n_way, scores, gold })
    }

    pub fn n_way(&self) -> usize {
        self.n_way
    }

    pub fn queries(&self) -> usize {
        self.scores.len() / self.n_way
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn gold(&self) -> &[bool] {
        &self.gold
    }
}

/// Mean over classes of per-class F1; a class with no positives and no
/// predictions scores 1.
pub fn macro_f1(ep: &EpisodeScores, threshold: f64) -> f64 {
    let n = ep.n_way;
    let mut tp = vec![0usize; n];
    let mut fp = vec![0usize; n];
    let mut fn_ = vec![0usize; n];
    for (s, g) in ep.scores.chunks(n).zip(ep.gold.chunks(n)) {
        for (c, (p, &y)) in predict(s, threshold).into_iter().zip(g).enumerate() {
            match (p, y) {
                (true, true) => tp[c] += 1,
                (true, false) => fp[c] += 1,
                (false, true) => fn_[c] += 1,
                (false, false) => {}
            }
        }
    }
    let f1 = |c: usize| {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom == 0 {
            1.0
        } else {
            2.0 * tp[c] as f64 / denom as f64
        }
    };
    (0..n).map(f1).sum::<f64>() / n as f64
}

/// ROC-AUC of the pooled `(score, label)` pairs, by the rank-sum statistic
/// with midranks for ties. `None` when every pair has the same label.
pub fn auc(ep: &EpisodeScores) -> Option<f64> {
    auc_pairs(&ep.scores, &ep.gold)
}

pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let pos = labels.iter().filter(|&&b| b).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1 ..= j+1 share their mean.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Two-sided.
    pub p: f64,
    pub df: usize,
    /// The differences had zero variance; `t` is 0 or ±∞ by convention.
    pub degenerate: bool,
}

/// Paired two-sided t-test on `a - b`.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<TTest> {
    if a.len() != b.len() {
        return Err(Error::dim("paired_t_test", &[a.len()], &[b.len()]));
    }
    if a.len() < 2 {
        return Err(Error::Input("paired t-test needs at least two pairs".into()));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let df = d.len() - 1;
    if var == 0.0 {
        let (t, p) = if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (f64::INFINITY.copysign(mean), 0.0)
        };
        return Ok(TTest { t, p, df, degenerate: true });
    }
    let t = mean / (var / n).sqrt();
    let dist = StudentsT::new(0.0, 1.0, df as f64)
        .map_err(|e| Error::Numeric(format!("t distribution: {e}")))?;
    let p = 2.0 * (1.0 - dist.cdf(t.abs()));
    Ok(TTest { t, p, df, degenerate: false })
}

/// Per-run values with their mean and sample standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub values: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate_runs(values: &[f64]) -> Result<RunSummary> {
    if values.is_empty() {
        return Err(Error::Input("no run values to aggregate".into()));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok(RunSummary {
        values: values.to_vec(),
        mean,
        std,
    })
}

/// Episode-mean metrics of one evaluation pass.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub macro_f1: f64,
    pub auc: f64,
    pub episodes: usize,
    /// Episodes left out of the AUC mean because all labels agreed.
    pub auc_skipped: usize,
}

/// Averages per-episode metrics in episode order.
pub fn mean_metrics(episodes: &[EpisodeScores], threshold: f64) -> Result<EvalMetrics> {
    if episodes.is_empty() {
        return Err(Error::Input("no episodes to evaluate".into()));
    }
    let f1 = episodes.iter().map(|e| macro_f1(e, threshold)).sum::<f64>() / episodes.len() as f64;
    let aucs: Vec<f64> = episodes.iter().filter_map(auc).collect();
    let skipped = episodes.len() - aucs.len();
    if skipped > 0 {
        log::warn!("{skipped} episode(s) had a single-label pool and were left out of AUC");
    }
    let auc = if aucs.is_empty() {
        f64::NAN
    } else {
        aucs.iter().sum::<f64>() / aucs.len() as f64
    };
    Ok(EvalMetrics {
        macro_f1: f1,
        auc,
        episodes: episodes.len(),
        auc_skipped: skipped,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: String,
    pub f1: RunSummary,
    pub auc: RunSummary,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub rows: Vec<ReportRow>,
}

impl Report {
    pub fn push(&mut self, setting: impl Into<String>, f1: &[f64], auc: &[f64]) -> Result<()> {
        self.rows.push(ReportRow {
            setting: setting.into(),
            f1: aggregate_runs(f1)?,
            auc: aggregate_runs(auc)?,
        });
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned text table, scores in percent.
    pub fn to_table(&self) -> String {
        let cell = |s: &RunSummary| format!("{:.2} ± {:.2}", 100.0 * s.mean, 100.0 * s.std);
        let rows: Vec<[String; 3]> = self
            .rows
            .iter()
            .map(|r| [r.setting.clone(), cell(&r.f1), cell(&r.auc)])
            .collect();
        let header = ["setting".to_string(), "Macro-F1".into(), "AUC".into()];
        let mut w = [0usize; 3];
        for r in std::iter::once(&header).chain(&rows) {
            for (wi, c) in w.iter_mut().zip(r) {
                *wi = (*wi).max(c.chars().count());
            }
        }
        let line = |r: &[String; 3]| {
            format!(
                "{:<a$}  {:>b$}  {:>c$}\n",
                r[0],
                r[1],
                r[2],
                a = w[0],
                b = w[1],
                c = w[2]
            )
        };
        let mut out = line(&header);
        out.push_str(&format!("{}\n", "-".repeat(w[0] + w[1] + w[2] + 4)));
        for r in &rows {
            out.push_str(&line(r));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn ep(n: usize, scores: &[f64], gold: &[u8]) -> EpisodeScores {
        EpisodeScores::new(n, scores.to_vec(), gold.iter().map(|&g| g == 1).collect()).unwrap()
    }

    fn brute_auc(scores: &[f64], labels: &[bool]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    wins += if si > sj {
                        1.0
                    } else if si == sj {
                        0.5
                    } else {
                        0.0
                    };
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn f1_cases() {
        let perfect = ep(2, &[0.9, 0.1, 0.2, 0.8], &[1, 0, 0, 1]);
        assert_eq!(macro_f1(&perfect, 0.3), 1.0);
        let silent = ep(2, &[0.1, 0.1, 0.1, 0.1], &[1, 0, 0, 1]);
        assert_eq!(macro_f1(&silent, 0.3), 0.0);
        let hand = ep(2, &[0.9, 0.1, 0.9, 0.1], &[1, 0, 0, 1]);
        assert_abs_diff_eq!(macro_f1(&hand, 0.3), 1.0 / 3.0, epsilon = 1e-15);
        // Third class never gold and never predicted.
        let absent = ep(3, &[0.9, 0.05, 0.05, 0.05, 0.9, 0.05], &[1, 0, 0, 0, 1, 0]);
        assert_eq!(macro_f1(&absent, 0.3), 1.0);
    }

    #[test]
    fn auc_cases() {
        let sep = ep(2, &[0.9, 0.1, 0.3, 0.7], &[1, 0, 0, 1]);
        assert_eq!(auc(&sep), Some(1.0));
        let flat = ep(2, &[0.5; 4], &[1, 0, 0, 1]);
        assert_eq!(auc(&flat), Some(0.5));
        let hand = auc_pairs(&[0.9, 0.8, 0.7, 0.1], &[true, false, true, false]).unwrap();
        assert_abs_diff_eq!(hand, 0.75, epsilon = 1e-15);
        let all_pos = ep(1, &[0.3, 0.7], &[1, 1]);
        assert_eq!(auc(&all_pos), None);
    }

    #[test]
    fn t_test_cases() {
        let a = [1.0, 2.0, 3.0];
        let same = paired_t_test(&a, &a).unwrap();
        assert!(same.degenerate && same.t == 0.0 && same.p == 1.0);
        let shifted = paired_t_test(&[2.0, 3.0, 4.0], &a).unwrap();
        assert!(shifted.degenerate && shifted.t == f64::INFINITY && shifted.p == 0.0);
        let r = paired_t_test(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        assert_abs_diff_eq!(r.t, 2.0 * 3f64.sqrt(), epsilon = 1e-12);
        assert_eq!(r.df, 2);
        // With 2 degrees of freedom the two-sided tail is 1 - t/√(t²+2).
        let t = r.t;
        assert_abs_diff_eq!(r.p, 1.0 - t / (t * t + 2.0).sqrt(), epsilon = 1e-9);
        assert!(paired_t_test(&[1.0], &[1.0]).is_err());
        assert!(paired_t_test(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn aggregation_cases() {
        let one = aggregate_runs(&[0.7]).unwrap();
        assert_eq!((one.mean, one.std), (0.7, 0.0));
        let five = aggregate_runs(&[1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(five.mean, 3.0);
        assert_abs_diff_eq!(five.std, 2.5f64.sqrt(), epsilon = 1e-15);
        let perm = aggregate_runs(&[4.0, 2.0, 5.0, 1.0, 3.0]).unwrap();
        assert_abs_diff_eq!(perm.std, five.std, epsilon = 1e-15);
        assert!(aggregate_runs(&[]).is_err());
    }

    #[test]
    fn report_renders() {
        let mut r = Report::default();
        r.push("base", &[0.8, 0.82], &[0.9, 0.91]).unwrap();
        r.push("ldf", &[0.85, 0.86], &[0.93, 0.95]).unwrap();
        let table = r.to_table();
        assert!(table.contains("81.00 ± 1.41"), "{table}");
        let lines: Vec<&str> = table.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.chars().count() == lines[0].chars().count()));
        let back: Report = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn invalid_scores_rejected() {
        assert!(EpisodeScores::new(2, vec![0.5; 3], vec![true; 3]).is_err());
        assert!(EpisodeScores::new(2, vec![0.5; 2], vec![false; 2]).is_err());
    }

    proptest! {
        #[test]
        fn auc_matches_enumeration(
            pairs in proptest::collection::vec((0u8..6, any::<bool>()), 2..14)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 5.0).collect();
            let labels: Vec<bool> = pairs.iter().map(|p| p.1).collect();
            match auc_pairs(&scores, &labels) {
                Some(a) => {
                    prop_assert!((a - brute_auc(&scores, &labels)).abs() < 1e-12);
                    let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp()).collect();
                    prop_assert!((auc_pairs(&warped, &labels).unwrap() - a).abs() < 1e-12);
                    prop_assert!((0.0..=1.0).contains(&a));
                }
                None => prop_assert!(labels.iter().all(|&b| b) || labels.iter().all(|&b| !b)),
            }
        }

        #[test]
        fn f1_in_unit_interval(
            rows in proptest::collection::vec(proptest::collection::vec(0.0f64..1.0, 3), 1..6)
        ) {
            let scores: Vec<f64> = rows.concat();
            let gold: Vec<bool> = (0..scores.len()).map(|i| i % 3 == 0).collect();
            let e = EpisodeScores::new(3, scores, gold).unwrap();
            let f = macro_f1(&e, 0.3);
            prop_assert!((0.0..=1.0).contains(&f));
        }
    }
}
