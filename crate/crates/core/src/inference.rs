//! Path-likelihood prediction, entropy-based OOD scoring and the
//! threshold-driven stopping rule that can return internal nodes.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, NodeId};
use crate::model::{node_probabilities, HeadParameters, NodeProbabilities};
use crate::scalar::{euclidean, Scalar};

#[derive(Debug, Clone, PartialEq)]
pub struct PathPrediction<T> {
    pub leaf: NodeId,
    /// Root to leaf, inclusive.
    pub path: Vec<NodeId>,
    pub path_likelihood: T,
    /// One entry per internal node on `path`, in path order.
    pub decision_entropies: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct OpenSetOutput<T> {
    pub terminal_node: NodeId,
    pub is_leaf: bool,
    pub ood_score: T,
    pub closed_set_leaf: NodeId,
    pub stopped_at_depth: usize,
}

/// Product of the softmax scores along the root-to-`k` path.
pub fn path_likelihood<T: Scalar>(
    p: &NodeProbabilities<T>,
    h: &Hierarchy<T>,
    k: NodeId,
) -> Result<T> {
    if k >= h.len() || !h.is_leaf(k) {
        return Err(Error::arg(format!("node {k} is not a leaf")));
    }
    let mut prod = p.p[k];
    let mut cur = k;
    while let Some(parent) = h.parent(cur) {
        if parent != h.root() {
            prod *= p.p[parent];
        }
        cur = parent;
    }
    Ok(prod)
}

/// `−Σ p ln p` over the children of internal node `n`, with `0 ln 0 = 0`.
pub fn decision_entropy<T: Scalar>(
    p: &NodeProbabilities<T>,
    h: &Hierarchy<T>,
    n: NodeId,
) -> Result<T> {
    if n >= h.len() || h.is_leaf(n) {
        return Err(Error::arg(format!("node {n} is not an internal node")));
    }
    Ok(entropy(p, h.children(n)))
}

fn entropy<T: Scalar>(p: &NodeProbabilities<T>, kids: &[NodeId]) -> T {
    kids.iter()
        .map(|&c| {
            let q = p.p[c];
            if q > T::zero() {
                -q * q.ln()
            } else {
                T::zero()
            }
        })
        .sum::<T>()
        .max(T::zero())
}

/// Leaf with maximal path likelihood; exact ties go to the smaller id.
pub fn predict_leaf<T: Scalar>(p: &NodeProbabilities<T>, h: &Hierarchy<T>) -> PathPrediction<T> {
    let mut cum = vec![T::zero(); h.len()];
    cum[h.root()] = T::one();
    let mut stack = vec![h.root()];
    while let Some(n) = stack.pop() {
        for &c in h.children(n) {
            cum[c] = cum[n] * p.p[c];
            stack.push(c);
        }
    }
    let mut leaf = None;
    for k in h.leaves() {
        match leaf {
            Some(b) if !(cum[k] > cum[b]) && !(cum[k] == cum[b] && k < b) => {}
            _ => leaf = Some(k),
        }
    }
    let leaf = leaf.expect("hierarchy has leaves");
    let path = h.path_to(leaf).expect("valid leaf");
    let decision_entropies = path[..path.len() - 1]
        .iter()
        .map(|&n| entropy(p, h.children(n)))
        .collect();
    PathPrediction {
        leaf,
        path,
        path_likelihood: cum[leaf],
        decision_entropies,
    }
}

/// Mean of the decision entropies along the predicted path: the OOD score.
pub fn mean_path_entropy<T: Scalar>(pred: &PathPrediction<T>) -> Result<T> {
    if pred.decision_entropies.is_empty() {
        return Err(Error::arg("path has no internal decisions"));
    }
    Ok(pred.decision_entropies.iter().copied().sum::<T>()
        / T::from_usize_lossy(pred.decision_entropies.len()))
}

/// Nearest-rank quantile of an ascending slice: element `ceil(q·n)`, clamped
/// to `[1, n]`.
pub fn nearest_rank<T: Scalar>(sorted: &[T], q: f64) -> T {
    let n = sorted.len();
    let rank = ((q * n as f64).ceil() as usize).clamp(1, n);
    sorted[rank - 1]
}

/// Decision entropies recorded per internal node along the predicted paths
/// of in-distribution samples, kept sorted.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyRecord<T> {
    pub per_node: BTreeMap<NodeId, Vec<T>>,
}

impl<T: Scalar> EntropyRecord<T> {
    pub fn from_predictions<'a>(preds: impl IntoIterator<Item = &'a PathPrediction<T>>) -> Self {
        let mut per_node: BTreeMap<NodeId, Vec<T>> = BTreeMap::new();
        for pred in preds {
            for (&n, &e) in pred.path.iter().zip(&pred.decision_entropies) {
                per_node.entry(n).or_default().push(e);
            }
        }
        for v in per_node.values_mut() {
            v.sort_by(|a, b| a.partial_cmp(b).expect("finite entropy"));
        }
        EntropyRecord { per_node }
    }

    pub fn collect(
        features: &[Vec<T>],
        params: &HeadParameters<T>,
        h: &Hierarchy<T>,
    ) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::arg("threshold fitting needs at least one sample"));
        }
        let preds = features
            .iter()
            .map(|x| Ok(predict_leaf(&node_probabilities(params, h, x)?, h)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_predictions(&preds))
    }

    pub fn thresholds(&self, lambda_hat: f64) -> Result<ThresholdTable<T>> {
        if !(0.0..=1.0).contains(&lambda_hat) {
            return Err(Error::arg("lambda_hat must lie in [0, 1]"));
        }
        Ok(ThresholdTable {
            lambda_hat,
            per_node_threshold: self
                .per_node
                .iter()
                .map(|(&n, v)| (n, nearest_rank(v, lambda_hat)))
                .collect(),
            sample_counts: self.per_node.iter().map(|(&n, v)| (n, v.len())).collect(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ThresholdTable<T> {
    pub lambda_hat: f64,
    pub per_node_threshold: BTreeMap<NodeId, T>,
    pub sample_counts: BTreeMap<NodeId, usize>,
}

impl<T: Scalar> ThresholdTable<T> {
    /// Threshold for `n`; nodes never traversed get the entropy ceiling
    /// `ln(arity)`, which no decision can exceed.
    pub fn threshold(&self, h: &Hierarchy<T>, n: NodeId) -> T {
        self.per_node_threshold
            .get(&n)
            .copied()
            .unwrap_or_else(|| T::from_usize_lossy(h.children(n).len()).ln())
    }

    /// Thresholds that never trip.
    pub fn untrippable() -> Self {
        ThresholdTable {
            lambda_hat: 1.0,
            per_node_threshold: BTreeMap::new(),
            sample_counts: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

pub fn fit_thresholds<T: Scalar>(
    train_features: &[Vec<T>],
    params: &HeadParameters<T>,
    h: &Hierarchy<T>,
    lambda_hat: f64,
) -> Result<ThresholdTable<T>> {
    if !(0.0..=1.0).contains(&lambda_hat) {
        return Err(Error::arg("lambda_hat must lie in [0, 1]"));
    }
    EntropyRecord::collect(train_features, params, h)?.thresholds(lambda_hat)
}

/// Walks the predicted path and stops at the first node whose decision
/// entropy exceeds its threshold.
pub fn open_set_from_prediction<T: Scalar>(
    pred: &PathPrediction<T>,
    h: &Hierarchy<T>,
    thresholds: &ThresholdTable<T>,
) -> OpenSetOutput<T> {
    let ood_score = mean_path_entropy(pred).unwrap_or(T::zero());
    let stop = pred
        .decision_entropies
        .iter()
        .zip(&pred.path)
        .position(|(&e, &n)| e > thresholds.threshold(h, n));
    let (terminal_node, depth) = match stop {
        Some(d) => (pred.path[d], d),
        None => (pred.leaf, pred.path.len() - 1),
    };
    OpenSetOutput {
        terminal_node,
        is_leaf: h.is_leaf(terminal_node),
        ood_score,
        closed_set_leaf: pred.leaf,
        stopped_at_depth: depth,
    }
}

pub fn open_set_predict<T: Scalar>(
    x: &[T],
    params: &HeadParameters<T>,
    h: &Hierarchy<T>,
    thresholds: &ThresholdTable<T>,
) -> Result<OpenSetOutput<T>> {
    let pred = predict_leaf(&node_probabilities(params, h, x)?, h);
    Ok(open_set_from_prediction(&pred, h, thresholds))
}

/// Mean Euclidean distance to the `k` nearest training vectors.
pub fn knn_ood_score<T: Scalar>(x: &[T], train: &[Vec<T>], k: usize) -> Result<T> {
    if k == 0 {
        return Err(Error::arg("k must be positive"));
    }
    if k > train.len() {
        return Err(Error::arg(format!(
            "k = {k} exceeds the {} training vectors",
            train.len()
        )));
    }
    let mut d: Vec<T> = train.iter().map(|t| euclidean(x, t)).collect();
    d.select_nth_unstable_by(k - 1, |a, b| a.partial_cmp(b).expect("finite distance"));
    Ok(d[..k].iter().copied().sum::<T>() / T::from_usize_lossy(k))
}

/// One prediction record per window, as CSV.
pub fn predictions_csv<T: Scalar>(rows: &[(u64, OpenSetOutput<T>)]) -> String {
    let mut s = String::from(
        "window_id,closed_set_leaf,terminal_node,is_leaf,ood_score,stopped_at_depth\n",
    );
    for (id, o) in rows {
        s.push_str(&format!(
            "{id},{},{},{},{},{}\n",
            o.closed_set_leaf, o.terminal_node, o.is_leaf, o.ood_score, o.stopped_at_depth
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::pairwise_softmax;
    use std::f64::consts::LN_2;

    fn names(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    /// ((A,B),C): leaves 0..3, inner 3, root 4.
    fn tree3() -> Hierarchy<f64> {
        let d = vec![vec![0.0, 0.1, 0.9], vec![0.1, 0.0, 0.8], vec![0.9, 0.8, 0.0]];
        Hierarchy::build_from_distances(&names(&["A", "B", "C"]), &d).unwrap()
    }

    /// (((A,B),C),D) chain.
    fn chain4() -> Hierarchy<f64> {
        Hierarchy::import_str(
            r#"{"name":"r","children":[{"name":"x","children":[{"name":"y","children":[{"name":"A"},{"name":"B"}]},{"name":"C"}]},{"name":"D"}]}"#,
        )
        .unwrap()
    }

    #[test]
    fn likelihood_half_chain() {
        let h = chain4();
        let p = NodeProbabilities { p: vec![0.5; h.len()] };
        let a = h.leaf_of("A").unwrap();
        assert_eq!(path_likelihood(&p, &h, a).unwrap(), 0.125);
        assert!(path_likelihood(&p, &h, h.root()).is_err());
    }

    #[test]
    fn likelihood_two_leaves_sum() {
        let h = Hierarchy::<f64>::flat(&names(&["a", "b"])).unwrap();
        let p = pairwise_softmax(&[0.3, -1.2, 0.0], &h).unwrap();
        let s = path_likelihood(&p, &h, 0).unwrap() + path_likelihood(&p, &h, 1).unwrap();
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn certain_leaf() {
        let h = tree3();
        let b = h.leaf_of("B").unwrap();
        let mut p = NodeProbabilities { p: vec![0.0; h.len()] };
        for n in h.path_to(b).unwrap() {
            p.p[n] = 1.0;
        }
        let pred = predict_leaf(&p, &h);
        assert_eq!(pred.leaf, b);
        assert_eq!(pred.path_likelihood, 1.0);
        assert_eq!(pred.decision_entropies, vec![0.0, 0.0]);
    }

    #[test]
    fn global_argmax_beats_greedy() {
        // The (A,B) subtree wins the root split at 0.51 but its mass splits
        // evenly; C alone holds 0.49.
        let h = tree3();
        let (a, b, c) = (h.leaf_of("A").unwrap(), h.leaf_of("B").unwrap(), h.leaf_of("C").unwrap());
        let inner = h.parent(a).unwrap();
        let mut p = NodeProbabilities { p: vec![0.0; h.len()] };
        p.p[h.root()] = 1.0;
        p.p[inner] = 0.51;
        p.p[c] = 0.49;
        p.p[a] = 0.5;
        p.p[b] = 0.5;
        // Greedy would descend into `inner`.
        assert!(p.p[inner] > p.p[c]);
        let brute = h
            .leaves()
            .into_iter()
            .map(|k| (k, path_likelihood(&p, &h, k).unwrap()))
            .fold((usize::MAX, -1.0), |best, (k, v)| if v > best.1 { (k, v) } else { best });
        let pred = predict_leaf(&p, &h);
        assert_eq!(pred.leaf, c);
        assert_eq!(pred.leaf, brute.0);
        assert!((pred.path_likelihood - 0.49).abs() < 1e-15);
    }

    #[test]
    fn tie_goes_to_smallest_id() {
        let h = Hierarchy::<f64>::flat(&names(&["a", "b", "c"])).unwrap();
        let p = pairwise_softmax(&[0.0, 0.0, 0.0, 0.0], &h).unwrap();
        assert_eq!(predict_leaf(&p, &h).leaf, 0);
    }

    #[test]
    fn entropy_values() {
        let h = Hierarchy::<f64>::flat(&names(&["a", "b"])).unwrap();
        let e = |x: f64| {
            let p = NodeProbabilities { p: vec![x, 1.0 - x, 1.0] };
            decision_entropy(&p, &h, 2).unwrap()
        };
        assert!((e(0.5) - LN_2).abs() < 1e-15);
        assert_eq!(e(1.0), 0.0);
        let oracle = -(0.9f64 * 0.9f64.ln() + 0.1 * 0.1f64.ln());
        assert!((e(0.9) - oracle).abs() < 1e-15);
        assert!((oracle - 0.3251).abs() < 1e-4);
        assert!(decision_entropy(&NodeProbabilities { p: vec![0.5; 3] }, &h, 0).is_err());
    }

    #[test]
    fn mean_entropy_cases() {
        let mk = |e: Vec<f64>| PathPrediction {
            leaf: 0,
            path: vec![],
            path_likelihood: 1.0,
            decision_entropies: e,
        };
        assert!((mean_path_entropy(&mk(vec![LN_2; 3])).unwrap() - LN_2).abs() < 1e-15);
        assert_eq!(mean_path_entropy(&mk(vec![0.0, 0.0])).unwrap(), 0.0);
        assert!((mean_path_entropy(&mk(vec![0.2, 0.6])).unwrap() - 0.4).abs() < 1e-15);
        assert!(mean_path_entropy(&mk(vec![])).is_err());
    }

    #[test]
    fn nearest_rank_quantiles() {
        let v = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(nearest_rank(&v, 0.5), 0.2);
        assert_eq!(nearest_rank(&v, 0.0), 0.1);
        assert_eq!(nearest_rank(&v, 1.0), 0.4);
        assert_eq!(nearest_rank(&v, 0.51), 0.3);
    }

    #[test]
    fn stopping_rule() {
        let h = chain4();
        let a = h.leaf_of("A").unwrap();
        let path = h.path_to(a).unwrap();
        let pred = PathPrediction {
            leaf: a,
            path: path.clone(),
            path_likelihood: 0.5,
            decision_entropies: vec![0.1, 0.1, 0.6],
        };
        let out = open_set_from_prediction(&pred, &h, &ThresholdTable::untrippable());
        assert!(out.is_leaf);
        assert_eq!(out.terminal_node, a);
        assert_eq!(out.stopped_at_depth, 3);

        let mut t = ThresholdTable::untrippable();
        for &n in &path[..3] {
            t.per_node_threshold.insert(n, 0.3);
        }
        // Only the last split is ambiguous: stop at the leaf's parent.
        let out = open_set_from_prediction(&pred, &h, &t);
        assert_eq!(out.terminal_node, h.parent(a).unwrap());
        assert!(!out.is_leaf);
        assert_eq!(out.stopped_at_depth, 2);
        assert!((out.ood_score - 0.8 / 3.0).abs() < 1e-15);

        t.per_node_threshold.insert(h.root(), 0.05);
        let out = open_set_from_prediction(&pred, &h, &t);
        assert_eq!(out.terminal_node, h.root());
        assert_eq!(out.stopped_at_depth, 0);
    }

    #[test]
    fn threshold_table_from_record() {
        let mut rec = EntropyRecord { per_node: BTreeMap::new() };
        rec.per_node.insert(4, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(rec.thresholds(0.5).unwrap().per_node_threshold[&4], 0.2);
        assert_eq!(rec.thresholds(1.0).unwrap().per_node_threshold[&4], 0.4);
        assert_eq!(rec.thresholds(0.0).unwrap().per_node_threshold[&4], 0.1);
        assert!(rec.thresholds(1.5).is_err());
        let t = rec.thresholds(0.5).unwrap();
        let h = tree3();
        assert_eq!(t.threshold(&h, 3), LN_2);
        let back = ThresholdTable::<f64>::from_json(&t.to_json().unwrap()).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn knn_cases() {
        let train = vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 3.0]];
        assert_eq!(knn_ood_score(&[1.0, 0.0], &train, 1).unwrap(), 0.0);
        let far = knn_ood_score(&[50.0, 50.0], &train, 2).unwrap();
        for t in &train {
            assert!(far > knn_ood_score(t, &train, 2).unwrap());
        }
        // Exhaustive sort.
        let x = [0.4, 0.7];
        let mut d: Vec<f64> = train.iter().map(|t| euclidean(&x, t)).collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((knn_ood_score(&x, &train, 2).unwrap() - (d[0] + d[1]) / 2.0).abs() < 1e-15);
        assert!(knn_ood_score(&x, &train, 0).is_err());
        assert!(knn_ood_score(&x, &train, 4).is_err());
    }
}
