//! Sibling-group softmax over hierarchy nodes and the training objective:
//! weighted on-path cross-entropy plus KL-to-uniform on splits that lie
//! entirely off the target path.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hierarchy::{Hierarchy, NodeId};
use crate::scalar::Scalar;

/// Floor applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct NodeProbabilities<T> {
    pub p: Vec<T>,
}

impl<T: Scalar> NodeProbabilities<T> {
    pub fn get(&self, n: NodeId) -> T {
        self.p[n]
    }
}

/// Softmax within every sibling group (pairs for binary trees). The root
/// gets probability 1.
pub fn pairwise_softmax<T: Scalar>(
    activations: &[T],
    h: &Hierarchy<T>,
) -> Result<NodeProbabilities<T>> {
    if activations.len() != h.len() {
        return Err(Error::arg(format!(
            "{} activations for a hierarchy of {} nodes",
            activations.len(),
            h.len()
        )));
    }
    let mut p = vec![T::zero(); h.len()];
    p[h.root()] = T::one();
    for n in h.internal_nodes() {
        let kids = h.children(n);
        let max = kids
            .iter()
            .map(|&c| activations[c])
            .fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for &c in kids {
            let e = (activations[c] - max).exp();
            p[c] = e;
            total += e;
        }
        for &c in kids {
            p[c] /= total;
        }
    }
    Ok(NodeProbabilities { p })
}

/// Inverse-frequency class weights, `N / (count_y · K)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ClassWeights<T> {
    pub w: BTreeMap<String, T>,
}

impl<T: Scalar> ClassWeights<T> {
    pub fn from_labels(labels: &[String]) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for l in labels {
            *counts.entry(l.clone()).or_default() += 1;
        }
        if counts.is_empty() {
            return Err(Error::arg("class weights need at least one label"));
        }
        let n = T::from_usize_lossy(labels.len());
        let k = T::from_usize_lossy(counts.len());
        Ok(ClassWeights {
            w: counts
                .into_iter()
                .map(|(c, m)| (c, n / (T::from_usize_lossy(m) * k)))
                .collect(),
        })
    }

    pub fn uniform(classes: &[String]) -> Self {
        ClassWeights {
            w: classes.iter().map(|c| (c.clone(), T::one())).collect(),
        }
    }

    pub fn weight(&self, class: &str) -> T {
        self.w.get(class).copied().unwrap_or(T::one())
    }

    /// Weight per node id; non-leaves and unknown classes get 1.
    pub fn per_node(&self, h: &Hierarchy<T>) -> Vec<T> {
        (0..h.len())
            .map(|n| h.class_of(n).map_or(T::one(), |c| self.weight(c)))
            .collect()
    }
}

fn check_leaf<T: Scalar>(h: &Hierarchy<T>, y: NodeId) -> Result<()> {
    if y >= h.len() || !h.is_leaf(y) {
        return Err(Error::arg(format!("target {y} is not a leaf")));
    }
    Ok(())
}

fn on_path<T: Scalar>(h: &Hierarchy<T>, y: NodeId) -> Vec<bool> {
    let mut mask = vec![false; h.len()];
    let mut cur = Some(y);
    while let Some(n) = cur {
        mask[n] = true;
        cur = h.parent(n);
    }
    mask
}

fn safe_ln<T: Scalar>(p: T) -> T {
    p.max(T::lit(PROB_FLOOR)).ln()
}

fn id_term<T: Scalar>(p: &NodeProbabilities<T>, h: &Hierarchy<T>, y: NodeId) -> T {
    let mut total = T::zero();
    let mut cur = y;
    while let Some(parent) = h.parent(cur) {
        total -= safe_ln(p.p[cur]);
        cur = parent;
    }
    total
}

/// `w_y · Σ −ln p(n)` over the target leaf and its non-root ancestors.
pub fn loss_id<T: Scalar>(
    p: &NodeProbabilities<T>,
    h: &Hierarchy<T>,
    y: NodeId,
    weights: &ClassWeights<T>,
) -> Result<T> {
    check_leaf(h, y)?;
    let w = h.class_of(y).map_or(T::one(), |c| weights.weight(c));
    Ok(w * id_term(p, h, y))
}

/// `Σ_c p(c) ln(p(c) · m)` for an `m`-way split.
fn kl_to_uniform<T: Scalar>(p: &NodeProbabilities<T>, kids: &[NodeId]) -> T {
    let m = T::from_usize_lossy(kids.len());
    kids.iter()
        .map(|&c| {
            let q = p.p[c];
            if q > T::zero() {
                q * (safe_ln(q) + m.ln())
            } else {
                T::zero()
            }
        })
        .sum()
}

/// KL divergence to uniform summed over internal nodes none of whose
/// children lie on the path to `y`.
pub fn loss_ood<T: Scalar>(p: &NodeProbabilities<T>, h: &Hierarchy<T>, y: NodeId) -> Result<T> {
    check_leaf(h, y)?;
    let path = on_path(h, y);
    Ok(h.internal_nodes()
        .filter(|&n| !path[n])
        .map(|n| kl_to_uniform(p, h.children(n)))
        .sum())
}

pub fn total_loss<T: Scalar>(
    p: &NodeProbabilities<T>,
    h: &Hierarchy<T>,
    y: NodeId,
    weights: &ClassWeights<T>,
) -> Result<T> {
    Ok(loss_id(p, h, y, weights)? + loss_ood(p, h, y)?)
}

/// Total loss of one sample and its derivative with respect to the raw
/// activations. `weight` is `w_y`.
pub(crate) fn loss_and_activation_grad<T: Scalar>(
    p: &NodeProbabilities<T>,
    h: &Hierarchy<T>,
    y: NodeId,
    weight: T,
) -> (T, Vec<T>) {
    let mut grad = vec![T::zero(); h.len()];
    let path = on_path(h, y);
    let mut loss = T::zero();

    let mut cur = y;
    while let Some(parent) = h.parent(cur) {
        loss -= weight * safe_ln(p.p[cur]);
        for &c in h.children(parent) {
            let target = if c == cur { T::one() } else { T::zero() };
            grad[c] += weight * (p.p[c] - target);
        }
        cur = parent;
    }

    for n in h.internal_nodes().filter(|&n| !path[n]) {
        let kids = h.children(n);
        loss += kl_to_uniform(p, kids);
        let neg_entropy: T = kids
            .iter()
            .map(|&c| {
                let q = p.p[c];
                if q > T::zero() {
                    q * safe_ln(q)
                } else {
                    T::zero()
                }
            })
            .sum();
        for &c in kids {
            let q = p.p[c];
            if q > T::zero() {
                grad[c] += q * (safe_ln(q) - neg_entropy);
            }
        }
    }
    (loss, grad)
}
