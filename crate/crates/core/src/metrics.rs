//! Detection metrics: AUC, EER, and expert-selection-frequency reports.

use crate::error::{Error, Result};

/// Scores (probability of fake) with their ground-truth labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredBatch {
    pub scores: Vec<f64>,
    /// 0 real, 1 fake.
    pub labels: Vec<usize>,
}

impl ScoredBatch {
    pub fn new(scores: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::dim(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::numeric("scores", "non-finite score"));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::arg("labels must be 0 or 1".to_string()));
        }
        Ok(ScoredBatch { scores, labels })
    }

    fn class_counts(&self) -> Result<(usize, usize)> {
        let fakes = self.labels.iter().filter(|&&l| l == 1).count();
        let reals = self.labels.len() - fakes;
        if fakes == 0 || reals == 0 {
            return Err(Error::arg(
                "metric needs at least one sample of each class".to_string(),
            ));
        }
        Ok((reals, fakes))
    }
}

/// Area under the ROC curve via the rank (Mann-Whitney) formulation, ties
/// credited 0.5 through midranks.
pub fn auc(batch: &ScoredBatch) -> Result<f64> {
    let (reals, fakes) = batch.class_counts()?;
    let n = batch.scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| batch.scores[a].partial_cmp(&batch.scores[b]).unwrap());
    // midranks: equal scores share the average of their 1-based rank span
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && batch.scores[order[j + 1]] == batch.scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = mid;
        }
        i = j + 1;
    }
    let rank_sum: f64 = (0..n).filter(|&k| batch.labels[k] == 1).map(|k| ranks[k]).sum();
    let f = fakes as f64;
    Ok((rank_sum - f * (f + 1.0) / 2.0) / (f * reals as f64))
}

/// Equal error rate: sweep every decision threshold (classify fake when
/// score ≥ threshold), find the one minimizing |FPR − FNR|, and return
/// (FPR + FNR) / 2 there. Ties on |FPR − FNR| go to the smaller
/// (FPR + FNR) / 2, then to the lower threshold.
pub fn eer(batch: &ScoredBatch) -> Result<f64> {
    let (reals, fakes) = batch.class_counts()?;
    let mut thresholds: Vec<f64> = batch.scores.clone();
    thresholds.sort_by(|a, b| a.partial_cmp(b).unwrap());
    thresholds.dedup();
    thresholds.push(f64::INFINITY);
    let mut best: Option<(f64, f64)> = None; // (|FPR−FNR|, (FPR+FNR)/2)
    for &t in &thresholds {
        let fp = batch
            .scores
            .iter()
            .zip(&batch.labels)
            .filter(|&(&s, &l)| l == 0 && s >= t)
            .count();
        let fnr_count = batch
            .scores
            .iter()
            .zip(&batch.labels)
            .filter(|&(&s, &l)| l == 1 && s < t)
            .count();
        let fpr = fp as f64 / reals as f64;
        let fnr = fnr_count as f64 / fakes as f64;
        let cand = ((fpr - fnr).abs(), (fpr + fnr) / 2.0);
        let better = match best {
            None => true,
            Some(b) => cand < b,
        };
        if better {
            best = Some(cand);
        }
    }
    Ok(best.unwrap().1)
}

/// Which of a block's two gates a record refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateType {
    Lora,
    Adapter,
}

impl GateType {
    pub fn name(self) -> &'static str {
        match self {
            GateType::Lora => "lora",
            GateType::Adapter => "adapter",
        }
    }
}

/// Top-1 expert choices of one evaluated sample, indexed by block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleGateRecord {
    pub lora_top1: Vec<usize>,
    pub adapter_top1: Vec<usize>,
}

/// Top-1 selection counts per gate over an evaluation set.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertFrequencyReport {
    pub samples: usize,
    /// [(block, gate type, counts per expert)]
    pub gates: Vec<(usize, GateType, Vec<usize>)>,
}

pub fn expert_frequencies(
    records: &[SampleGateRecord],
    num_lora_experts: usize,
    num_adapter_experts: usize,
) -> Result<ExpertFrequencyReport> {
    let first = records
        .first()
        .ok_or_else(|| Error::arg("no gate records".to_string()))?;
    let depth = first.lora_top1.len();
    let mut gates = Vec::new();
    for block in 0..depth {
        for (gt, ne, pick) in [
            (GateType::Lora, num_lora_experts, true),
            (GateType::Adapter, num_adapter_experts, false),
        ] {
            let mut counts = vec![0usize; ne];
            for r in records {
                let top1 = if pick { r.lora_top1[block] } else { r.adapter_top1[block] };
                if top1 >= ne {
                    return Err(Error::arg(format!("expert {top1} out of {ne}")));
                }
                counts[top1] += 1;
            }
            gates.push((block, gt, counts));
        }
    }
    Ok(ExpertFrequencyReport {
        samples: records.len(),
        gates,
    })
}

/// `metrics.csv` rows: run_id, split, auc, eer.
pub fn metrics_csv(rows: &[(String, String, f64, f64)]) -> String {
    let mut out = String::from("run_id,split,auc,eer\n");
    for (run, split, a, e) in rows {
        out.push_str(&format!("{run},{split},{a},{e}\n"));
    }
    out
}

/// `expert_freq.csv` rows: block, gate_type, expert_index, count.
pub fn expert_freq_csv(report: &ExpertFrequencyReport) -> String {
    let mut out = String::from("block,gate_type,expert_index,count\n");
    for (block, gt, counts) in &report.gates {
        for (e, c) in counts.iter().enumerate() {
            out.push_str(&format!("{block},{},{e},{c}\n", gt.name()));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    /// O(n²) pair-counting reference, ties worth half.
    fn auc_pairs(batch: &ScoredBatch) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..batch.scores.len() {
            for j in 0..batch.scores.len() {
                if batch.labels[i] == 1 && batch.labels[j] == 0 {
                    den += 1.0;
                    if batch.scores[i] > batch.scores[j] {
                        num += 1.0;
                    } else if batch.scores[i] == batch.scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    fn random_batch(n: usize, rng: &mut Stream) -> ScoredBatch {
        // quantized scores force plenty of ties
        let scores: Vec<f64> = (0..n).map(|_| (rng.next_f64() * 8.0).floor() / 8.0).collect();
        let mut labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
        rng.shuffle(&mut labels);
        ScoredBatch::new(scores, labels).unwrap()
    }

    #[test]
    fn perfect_separation_is_auc_one_eer_zero() {
        let b = ScoredBatch::new(vec![0.1, 0.2, 0.8, 0.9], vec![0, 0, 1, 1]).unwrap();
        assert_eq!(auc(&b).unwrap(), 1.0);
        assert_eq!(eer(&b).unwrap(), 0.0);
    }

    #[test]
    fn inverted_labels_give_auc_zero_eer_one() {
        let b = ScoredBatch::new(vec![0.1, 0.2, 0.8, 0.9], vec![1, 1, 0, 0]).unwrap();
        assert_eq!(auc(&b).unwrap(), 0.0);
        assert_eq!(eer(&b).unwrap(), 1.0);
    }

    #[test]
    fn all_equal_scores_are_chance() {
        let b = ScoredBatch::new(vec![0.5; 6], vec![0, 1, 0, 1, 0, 1]).unwrap();
        assert_eq!(auc(&b).unwrap(), 0.5);
    }

    #[test]
    fn auc_matches_pair_counting_oracle() {
        let mut rng = Stream::new(12);
        for _ in 0..20 {
            let b = random_batch(40, &mut rng);
            assert!((auc(&b).unwrap() - auc_pairs(&b)).abs() <= 1e-12);
        }
    }

    #[test]
    fn auc_is_monotone_transform_invariant() {
        let mut rng = Stream::new(13);
        let b = random_batch(30, &mut rng);
        let warped = ScoredBatch::new(
            b.scores.iter().map(|s| (3.0 * s + 1.0).exp()).collect(),
            b.labels.clone(),
        )
        .unwrap();
        assert!((auc(&b).unwrap() - auc(&warped).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn auc_complement_identity() {
        let mut rng = Stream::new(14);
        let b = random_batch(25, &mut rng);
        let flipped = ScoredBatch::new(
            b.scores.clone(),
            b.labels.iter().map(|l| 1 - l).collect(),
        )
        .unwrap();
        assert!((auc(&b).unwrap() + auc(&flipped).unwrap() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn single_class_batches_are_rejected() {
        let b = ScoredBatch::new(vec![0.4, 0.6], vec![1, 1]).unwrap();
        assert!(auc(&b).is_err());
        assert!(eer(&b).is_err());
    }

    #[test]
    fn frequency_counts_sum_to_sample_count() {
        let records = vec![
            SampleGateRecord {
                lora_top1: vec![2, 0],
                adapter_top1: vec![1, 1],
            },
            SampleGateRecord {
                lora_top1: vec![2, 1],
                adapter_top1: vec![0, 1],
            },
        ];
        let r = expert_frequencies(&records, 4, 5).unwrap();
        assert_eq!(r.samples, 2);
        for (_, _, counts) in &r.gates {
            assert_eq!(counts.iter().sum::<usize>(), 2);
        }
        assert_eq!(r.gates[0].2, vec![0, 0, 2, 0]);
        let csv = expert_freq_csv(&r);
        assert!(csv.starts_with("block,gate_type,expert_index,count\n"));
        assert!(csv.contains("0,lora,2,2\n"));
    }
}
