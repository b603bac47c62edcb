//! Closed-set and open-set metrics, the multi-class OOD protocol, and the
//! threshold sweep that scores internal-node localization.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, NodeId};
use crate::inference::{
    mean_path_entropy, open_set_from_prediction, predict_leaf, EntropyRecord, PathPrediction,
};
use crate::model::{node_probabilities, HeadParameters};
use crate::scalar::Scalar;

/// OOD true-positive rate at which the detection error is read.
pub const TPR_TARGET: f64 = 0.95;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdReport {
    pub classes: Vec<String>,
    pub per_class_f1: BTreeMap<String, f64>,
    pub macro_f1: f64,
    /// Rows are true classes, columns predicted, both in `classes` order.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodReport {
    pub auroc: f64,
    pub detection_error: f64,
    pub ood_classes: BTreeSet<String>,
    pub n_id: usize,
    pub n_ood: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationRow {
    pub lambda_hat: f64,
    pub mean_distance: f64,
    pub mean_depth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationReport {
    pub mapping_rule: String,
    pub per_lambda: Vec<LocalizationRow>,
}

impl LocalizationReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda_hat,mean_distance,mean_depth\n");
        for r in &self.per_lambda {
            s.push_str(&format!("{},{},{}\n", r.lambda_hat, r.mean_distance, r.mean_depth));
        }
        s
    }
}

pub fn macro_f1(predictions: &[String], truths: &[String]) -> Result<IdReport> {
    if predictions.len() != truths.len() {
        return Err(Error::arg("predictions and truths differ in length"));
    }
    if truths.is_empty() {
        return Err(Error::arg("macro F1 of an empty set"));
    }
    let classes: Vec<String> = truths
        .iter()
        .chain(predictions)
        .cloned()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let index: BTreeMap<&str, usize> = classes
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let k = classes.len();
    let mut confusion = vec![vec![0usize; k]; k];
    for (p, t) in predictions.iter().zip(truths) {
        confusion[index[t.as_str()]][index[p.as_str()]] += 1;
    }
    let mut per_class_f1 = BTreeMap::new();
    let mut present = Vec::new();
    for (i, c) in classes.iter().enumerate() {
        let tp = confusion[i][i];
        let support: usize = confusion[i].iter().sum();
        let predicted: usize = confusion.iter().map(|r| r[i]).sum();
        let (fn_, fp) = (support - tp, predicted - tp);
        let f1 = if 2 * tp + fp + fn_ == 0 {
            0.0
        } else {
            2.0 * tp as f64 / (2 * tp + fp + fn_) as f64
        };
        per_class_f1.insert(c.clone(), f1);
        if support > 0 {
            present.push(f1);
        }
    }
    let macro_f1 = present.iter().sum::<f64>() / present.len() as f64;
    Ok(IdReport {
        classes,
        per_class_f1,
        macro_f1,
        confusion,
    })
}

fn check_binary(scores_len: usize, is_ood: &[bool]) -> Result<(usize, usize)> {
    if scores_len != is_ood.len() {
        return Err(Error::arg("scores and labels differ in length"));
    }
    let n_ood = is_ood.iter().filter(|&&b| b).count();
    let n_id = is_ood.len() - n_ood;
    if n_ood == 0 || n_id == 0 {
        return Err(Error::arg("need both in-distribution and OOD samples"));
    }
    Ok((n_id, n_ood))
}

/// Mann–Whitney AUROC with midranks; OOD is the positive class and higher
/// scores mean "more OOD".
pub fn auroc<T: Scalar>(scores: &[T], is_ood: &[bool]) -> Result<f64> {
    let (n_id, n_ood) = check_binary(scores.len(), is_ood)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .ok_or(())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::arg("NaN score"));
    }
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share their average.
        let mid = (i + j + 2) as f64 / 2.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| is_ood[k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_ood * (n_ood + 1)) as f64 / 2.0;
    Ok(u / (n_ood as f64 * n_id as f64))
}

/// `0.5 · (FPR + (1 − TPR_TARGET))` at the largest threshold whose OOD
/// true-positive rate reaches [`TPR_TARGET`].
pub fn detection_error<T: Scalar>(scores: &[T], is_ood: &[bool]) -> Result<f64> {
    let (n_id, n_ood) = check_binary(scores.len(), is_ood)?;
    let mut ood: Vec<T> = scores
        .iter()
        .zip(is_ood)
        .filter(|(_, &o)| o)
        .map(|(&s, _)| s)
        .collect();
    ood.sort_by(|a, b| b.partial_cmp(a).expect("finite score"));
    // Smallest count of OOD samples reaching the target rate.
    let needed = (95 * n_ood).div_ceil(100).max(1);
    let tau = ood[needed - 1];
    let fp = scores
        .iter()
        .zip(is_ood)
        .filter(|(&s, &o)| !o && s >= tau)
        .count();
    let fpr = fp as f64 / n_id as f64;
    Ok(0.5 * (fpr + (1.0 - TPR_TARGET)))
}

/// Leaf-set correspondence between a deployment hierarchy and a reference
/// hierarchy over a superset of its classes: the reference node whose
/// in-distribution leaves have maximal Jaccard overlap with the deployment
/// node's leaves; ties prefer fewer total leaves, then the smaller id.
pub fn map_to_reference<T: Scalar>(
    deploy: &Hierarchy<T>,
    reference: &Hierarchy<T>,
) -> Vec<NodeId> {
    let known: BTreeSet<String> = deploy.classes().into_iter().collect();
    let ref_sets: Vec<(BTreeSet<String>, usize)> = (0..reference.len())
        .map(|r| {
            let all = reference.leaf_set(r);
            let n = all.len();
            (all.intersection(&known).cloned().collect(), n)
        })
        .collect();
    (0..deploy.len())
        .map(|d| {
            let s = deploy.leaf_set(d);
            let mut best = (reference.root(), -1.0, usize::MAX);
            for (r, (set, total)) in ref_sets.iter().enumerate() {
                let inter = s.intersection(set).count();
                let union = s.union(set).count();
                let j = if union == 0 { 0.0 } else { inter as f64 / union as f64 };
                if j > best.1 || (j == best.1 && (*total, r) < (best.2, best.0)) {
                    best = (r, j, *total);
                }
            }
            best.0
        })
        .collect()
}

pub const MAPPING_RULE: &str =
    "max Jaccard overlap of in-distribution leaf sets; ties: fewer leaves, then smaller node id";

pub fn default_lambda_grid() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// Runs the stopping rule for every `lambda_hat` on the OOD windows and
/// averages the cumulative cosine distance, in the reference hierarchy,
/// between each terminal node and the true OOD leaf.
#[allow(clippy::too_many_arguments)]
pub fn localization_sweep<T: Scalar>(
    ood_features: &[Vec<T>],
    ood_labels: &[String],
    params: &HeadParameters<T>,
    deploy: &Hierarchy<T>,
    reference: &Hierarchy<T>,
    entropies: &EntropyRecord<T>,
    lambda_grid: &[f64],
) -> Result<LocalizationReport> {
    if ood_features.len() != ood_labels.len() {
        return Err(Error::arg("OOD features and labels differ in length"));
    }
    if ood_features.is_empty() {
        return Err(Error::arg("localization needs OOD samples"));
    }
    if !reference.has_merge_distances() {
        return Err(Error::Capability(
            "reference hierarchy has no merge distances".into(),
        ));
    }
    let truth = ood_labels
        .iter()
        .map(|l| {
            reference.leaf_of(l).ok_or_else(|| {
                Error::arg(format!("OOD class `{l}` is absent from the reference hierarchy"))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mapping = map_to_reference(deploy, reference);
    let preds = ood_features
        .iter()
        .map(|x| Ok(predict_leaf(&node_probabilities(params, deploy, x)?, deploy)))
        .collect::<Result<Vec<PathPrediction<T>>>>()?;

    let n = preds.len() as f64;
    let mut per_lambda = Vec::with_capacity(lambda_grid.len());
    for &lambda_hat in lambda_grid {
        let table = entropies.thresholds(lambda_hat)?;
        let mut dist = 0.0;
        let mut depth = 0.0;
        for (pred, &t) in preds.iter().zip(&truth) {
            let out = open_set_from_prediction(pred, deploy, &table);
            dist += reference
                .cumulative_cosine_distance(mapping[out.terminal_node], t)?
                .as_f64();
            depth += out.stopped_at_depth as f64;
        }
        per_lambda.push(LocalizationRow {
            lambda_hat,
            mean_distance: dist / n,
            mean_depth: depth / n,
        });
    }
    Ok(LocalizationReport {
        mapping_rule: MAPPING_RULE.to_string(),
        per_lambda,
    })
}

/// Mean-path-entropy AUROC and detection error over a pooled OOD set, plus
/// closed-set macro F1 on the in-distribution windows.
pub fn ood_set_evaluate<T: Scalar>(
    params: &HeadParameters<T>,
    h: &Hierarchy<T>,
    id_features: &[Vec<T>],
    id_labels: &[String],
    ood_features: &[Vec<T>],
    ood_labels: &[String],
) -> Result<(OodReport, IdReport)> {
    if id_features.len() != id_labels.len() || ood_features.len() != ood_labels.len() {
        return Err(Error::arg("features and labels differ in length"));
    }
    let ood_classes: BTreeSet<String> = ood_labels.iter().cloned().collect();
    if let Some(c) = ood_classes.iter().find(|c| h.leaf_of(c).is_some()) {
        return Err(Error::arg(format!(
            "OOD class `{c}` is a training class"
        )));
    }
    let score = |x: &Vec<T>| -> Result<(T, NodeId)> {
        let pred = predict_leaf(&node_probabilities(params, h, x)?, h);
        Ok((mean_path_entropy(&pred)?, pred.leaf))
    };
    let id = id_features.iter().map(score).collect::<Result<Vec<_>>>()?;
    let ood = ood_features.iter().map(score).collect::<Result<Vec<_>>>()?;
    let predicted: Vec<String> = id
        .iter()
        .map(|&(_, leaf)| h.class_of(leaf).expect("leaf").to_string())
        .collect();
    let id_report = macro_f1(&predicted, id_labels)?;
    let scores: Vec<T> = id.iter().chain(&ood).map(|&(s, _)| s).collect();
    let is_ood: Vec<bool> = (0..scores.len()).map(|i| i >= id.len()).collect();
    Ok((
        OodReport {
            auroc: auroc(&scores, &is_ood)?,
            detection_error: detection_error(&scores, &is_ood)?,
            ood_classes,
            n_id: id.len(),
            n_ood: ood.len(),
        },
        id_report,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedTTest {
    pub mean_difference: f64,
    pub t_statistic: f64,
    pub degrees_of_freedom: usize,
    pub p_value: f64,
    pub cohens_d: f64,
}

/// Two-sided paired t-test over matched fold scores, with Cohen's d of the
/// differences.
pub fn paired_t_test(a: &[f64], b: &[f64]) -> Result<PairedTTest> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::arg("paired t-test needs two equal-length samples of size ≥ 2"));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();
    let df = a.len() - 1;
    let (t, p) = if sd == 0.0 {
        if mean == 0.0 {
            (0.0, 1.0)
        } else {
            (mean.signum() * f64::INFINITY, 0.0)
        }
    } else {
        let t = mean / (sd / n.sqrt());
        let dist = StudentsT::new(0.0, 1.0, df as f64)
            .map_err(|e| Error::arg(format!("t distribution: {e}")))?;
        (t, 2.0 * (1.0 - dist.cdf(t.abs())))
    };
    Ok(PairedTTest {
        mean_difference: mean,
        t_statistic: t,
        degrees_of_freedom: df,
        p_value: p,
        cohens_d: if sd == 0.0 { 0.0 } else { mean / sd },
    })
}

/// Mean and sample standard deviation.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() > 1 {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    (mean, sd)
}
