//! Group-wise metrics, validation-based model selection and pseudo-label
//! quality.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{FeatureDataset, Split};
use crate::error::{Error, Result};
use crate::probe::LinearScorer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub class: usize,
    pub attribute: usize,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Populated (class, attribute) groups in lexicographic order.
    pub per_group: Vec<GroupAccuracy>,
    pub worst_group_accuracy: f64,
    /// The first group (in `per_group` order) attaining the minimum.
    pub worst_group: (usize, usize),
    /// Sample-weighted accuracy over the whole set.
    pub average_accuracy: f64,
    /// One minus the unweighted mean of per-group accuracies.
    pub balanced_group_error: f64,
    pub samples: usize,
}

impl EvalReport {
    pub fn group(&self, class: usize, attribute: usize) -> Option<&GroupAccuracy> {
        self.per_group
            .iter()
            .find(|g| g.class == class && g.attribute == attribute)
    }
}

/// Scores a class-space scorer on every sample of `ds`.
pub fn evaluate(scorer: &LinearScorer<f64>, ds: &FeatureDataset) -> Result<EvalReport> {
    let preds: Vec<usize> = (0..ds.len()).map(|i| scorer.predict(ds.features().row(i))).collect();
    report_from_predictions(&preds, ds, None)
}

/// Scores `scorer` on the samples of one split.
pub fn evaluate_split(scorer: &LinearScorer<f64>, ds: &FeatureDataset, split: Split) -> Result<EvalReport> {
    let idx = ds.split_indices(split);
    if idx.is_empty() {
        return Err(Error::EmptySplit(split.name()));
    }
    let preds: Vec<usize> = idx.iter().map(|&i| scorer.predict(ds.features().row(i))).collect();
    report_from_predictions(&preds, ds, Some(&idx))
}

/// Builds a report from predictions aligned with `subset` (or with all of
/// `ds` when `subset` is `None`).
pub fn report_from_predictions(preds: &[usize], ds: &FeatureDataset, subset: Option<&[usize]>) -> Result<EvalReport> {
    let attrs = ds.attributes().ok_or(Error::MissingAttributes("evaluation"))?;
    let all: Vec<usize>;
    let idx = match subset {
        Some(s) => s,
        None => {
            all = (0..ds.len()).collect();
            &all
        }
    };
    if preds.len() != idx.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions for {} samples",
            preds.len(),
            idx.len()
        )));
    }
    if idx.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let n_attr = ds.effective_attribute_count().unwrap_or(1);
    let n_class = ds.class_count();
    let mut count = vec![0usize; n_class * n_attr];
    let mut correct = vec![0usize; n_class * n_attr];
    for (&i, &p) in idx.iter().zip(preds) {
        let y = ds.labels()[i];
        let g = y * n_attr + attrs[i];
        count[g] += 1;
        if p == y {
            correct[g] += 1;
        }
    }
    let per_group: Vec<GroupAccuracy> = (0..n_class * n_attr)
        .filter(|&g| count[g] > 0)
        .map(|g| GroupAccuracy {
            class: g / n_attr,
            attribute: g % n_attr,
            count: count[g],
            correct: correct[g],
            accuracy: correct[g] as f64 / count[g] as f64,
        })
        .collect();
    let worst = per_group
        .iter()
        .fold(&per_group[0], |w, g| if g.accuracy < w.accuracy { g } else { w });
    let total_correct: usize = correct.iter().sum();
    let mean_acc = per_group.iter().map(|g| g.accuracy).sum::<f64>() / per_group.len() as f64;
    Ok(EvalReport {
        worst_group_accuracy: worst.accuracy,
        worst_group: (worst.class, worst.attribute),
        average_accuracy: total_correct as f64 / idx.len() as f64,
        balanced_group_error: 1.0 - mean_acc,
        samples: idx.len(),
        per_group,
    })
}

/// Picks the snapshot with the highest worst-group accuracy on the validation
/// split; ties go to the earliest snapshot.
pub fn select_model(snapshots: &[LinearScorer<f64>], ds: &FeatureDataset) -> Result<(usize, EvalReport)> {
    let mut best: Option<(usize, EvalReport)> = None;
    for (e, s) in snapshots.iter().enumerate() {
        let r = evaluate_split(s, ds, Split::Val)?;
        if best
            .as_ref()
            .is_none_or(|(_, b)| r.worst_group_accuracy > b.worst_group_accuracy)
        {
            best = Some((e, r));
        }
    }
    best.ok_or(Error::NoSnapshots)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentificationReport {
    pub worst_group: (usize, usize),
    pub worst_group_size: usize,
    pub identified: usize,
    pub hits: usize,
    /// `None` when nothing was identified.
    pub precision: Option<f64>,
    pub recall: f64,
}

impl IdentificationReport {
    pub fn is_empty(&self) -> bool {
        self.identified == 0
    }
}

/// Precision and recall of `flags` (1 = identified as bias-conflicting) against
/// membership in `worst_group`, over the samples `subset` of `ds`.
pub fn identification_quality(
    flags: &[usize],
    ds: &FeatureDataset,
    subset: &[usize],
    worst_group: (usize, usize),
) -> Result<IdentificationReport> {
    let attrs = ds.attributes().ok_or(Error::MissingAttributes("identification"))?;
    if flags.len() != subset.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} flags for {} samples",
            flags.len(),
            subset.len()
        )));
    }
    let (mut identified, mut size, mut hits) = (0, 0, 0);
    for (&i, &f) in subset.iter().zip(flags) {
        let member = (ds.labels()[i], attrs[i]) == worst_group;
        size += usize::from(member);
        if f == 1 {
            identified += 1;
            hits += usize::from(member);
        }
    }
    if size == 0 {
        return Err(Error::InvalidArgument(format!("group {worst_group:?} has no samples")));
    }
    Ok(IdentificationReport {
        worst_group,
        worst_group_size: size,
        identified,
        hits,
        precision: (identified > 0).then(|| hits as f64 / identified as f64),
        recall: hits as f64 / size as f64,
    })
}

/// One row of a τ sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TauPoint {
    pub tau: f64,
    pub val_wga: f64,
    pub test_wga: f64,
    pub test_avg: f64,
    pub test_bge: f64,
}

pub fn tau_sweep_csv(points: &[TauPoint]) -> String {
    let mut out = String::from("tau,val_wga,test_wga,test_avg,test_bge\n");
    for p in points {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            p.tau, p.val_wga, p.test_wga, p.test_avg, p.test_bge
        );
    }
    out
}

/// Gnuplot script plotting test WGA and BGE against τ from `csv_name`.
pub fn tau_sweep_gnuplot(csv_name: &str) -> String {
    format!(
        "set datafile separator ','\n\
         set key autotitle columnhead\n\
         set xlabel 'tau'\n\
         set ylabel 'accuracy / error'\n\
         set terminal pngcairo size 800,500\n\
         set output 'tau_sweep.png'\n\
         plot '{csv_name}' using 1:3 with linespoints title 'test WGA', \\\n     \
         '{csv_name}' using 1:5 with linespoints title 'test BGE'\n"
    )
}

pub fn report_csv(rows: &[(String, EvalReport)]) -> String {
    let mut out = String::from("method,wga,avg,bge,worst_class,worst_attribute\n");
    for (name, r) in rows {
        let _ = writeln!(
            out,
            "{name},{},{},{},{},{}",
            r.worst_group_accuracy, r.average_accuracy, r.balanced_group_error, r.worst_group.0, r.worst_group.1
        );
    }
    out
}
