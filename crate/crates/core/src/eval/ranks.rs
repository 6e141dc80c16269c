//! Mean accuracy and mean rank across datasets.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_accuracy: f64,
    pub mean_rank: f64,
    pub datasets: usize,
}

/// Ranks methods per dataset (1 = best accuracy, ties share the mean of the
/// tied ranks) and averages over the datasets each method was run on.
/// Input rows are `(method, dataset, accuracy)`; output is sorted by method name.
pub fn aggregate_ranks(results: &[(String, String, f64)]) -> Vec<MethodSummary> {
    let mut by_dataset: BTreeMap<&str, Vec<(&str, f64)>> = BTreeMap::new();
    for (m, d, a) in results {
        by_dataset.entry(d.as_str()).or_default().push((m.as_str(), *a));
    }
    let mut ranks: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut accs: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for rows in by_dataset.values() {
        for &(m, a) in rows {
            let better = rows.iter().filter(|(_, b)| *b > a).count() as f64;
            let tied = rows.iter().filter(|(_, b)| *b == a).count() as f64;
            ranks.entry(m).or_default().push(better + (tied + 1.0) / 2.0);
            accs.entry(m).or_default().push(a);
        }
    }
    ranks
        .iter()
        .map(|(m, r)| {
            let a = &accs[m];
            MethodSummary {
                method: m.to_string(),
                mean_accuracy: a.iter().sum::<f64>() / a.len() as f64,
                mean_rank: r.iter().sum::<f64>() / r.len() as f64,
                datasets: r.len(),
            }
        })
        .collect()
}
