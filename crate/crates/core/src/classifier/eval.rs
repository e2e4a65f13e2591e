use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::forge::Subgroup;

/// Confusion counts and derived rates for one slice of the evaluation set.
/// Rates with an empty denominator are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub support: usize,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: Option<f64>,
}

impl GroupMetrics {
    pub fn from_counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> Option<Self> {
        let support = tp + fp + tn + fn_;
        if support == 0 {
            return None;
        }
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = ratio(2 * tp, 2 * tp + fp + fn_);
        Some(Self { support, tp, fp, tn, fn_, accuracy: (tp + tn) as f64 / support as f64, precision, recall, f1 })
    }

    fn tally(preds: impl Iterator<Item = (bool, bool)>) -> Option<Self> {
        let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
        for (pred, truth) in preds {
            match (pred, truth) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        Self::from_counts(tp, fp, tn, fn_)
    }
}

/// Per-subgroup classification quality. Serialises as JSON keyed by
/// subgroup name; empty subgroups appear as `null`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubgroupPerformance {
    pub threshold: f64,
    pub subgroups: BTreeMap<Subgroup, Option<GroupMetrics>>,
    pub overall: GroupMetrics,
    pub auc: Option<f64>,
    pub worst_group: Option<Subgroup>,
    pub worst_group_accuracy: Option<f64>,
}

impl SubgroupPerformance {
    pub fn accuracy(&self, g: Subgroup) -> Option<f64> {
        self.subgroups.get(&g).and_then(|m| m.as_ref()).map(|m| m.accuracy)
    }

    /// Mean accuracy over the two majority subgroups that are present.
    pub fn majority_accuracy(&self) -> Option<f64> {
        let accs: Vec<f64> = Subgroup::ALL.into_iter().filter(|g| g.is_majority()).filter_map(|g| self.accuracy(g)).collect();
        (!accs.is_empty()).then(|| accs.iter().sum::<f64>() / accs.len() as f64)
    }
}

/// Scores `probs` against `labels` (sick = true) per subgroup.
pub fn evaluate_predictions(
    probs: &[f64],
    labels: &[bool],
    groups: &[Subgroup],
    threshold: f64,
) -> Option<SubgroupPerformance> {
    assert!(probs.len() == labels.len() && labels.len() == groups.len());
    let pred = |i: usize| probs[i] >= threshold;
    let overall = GroupMetrics::tally((0..probs.len()).map(|i| (pred(i), labels[i])))?;
    let mut subgroups = BTreeMap::new();
    for g in Subgroup::ALL {
        let m = GroupMetrics::tally((0..probs.len()).filter(|&i| groups[i] == g).map(|i| (pred(i), labels[i])));
        subgroups.insert(g, m);
    }
    let worst = subgroups
        .iter()
        .filter_map(|(g, m)| m.as_ref().map(|m| (*g, m.accuracy)))
        .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
    Some(SubgroupPerformance {
        threshold,
        subgroups,
        overall,
        auc: auc(probs, labels),
        worst_group: worst.map(|w| w.0),
        worst_group_accuracy: worst.map(|w| w.1),
    })
}

/// Area under the ROC curve via the rank-sum statistic, ties counted half.
/// `None` when either class is missing.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            if labels[k] {
                rank_sum += mid_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Some(u / (n_pos * n_neg) as f64)
}
