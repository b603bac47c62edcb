#![allow(dead_code)]

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use openset_har::hierarchy::Hierarchy;
use openset_har::model::{gradient, mean_loss, ClassWeights, HeadParameters};
use openset_har::NodeId;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn names(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("c{i}")).collect()
}

/// `n` isotropic Gaussian draws around each mean.
pub fn blobs(
    means: &[(String, Vec<f64>)],
    n: usize,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> (Vec<Vec<f64>>, Vec<String>) {
    let noise = Normal::new(0.0, sigma).unwrap();
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (label, mu) in means {
        for _ in 0..n {
            x.push(mu.iter().map(|m| m + noise.sample(rng)).collect());
            y.push(label.clone());
        }
    }
    (x, y)
}

/// Uniformly random binary tree over `k` leaves, by merging random pairs.
pub fn random_tree(k: usize, rng: &mut ChaCha8Rng) -> Hierarchy<f64> {
    let mut parts: Vec<String> = names(k)
        .into_iter()
        .map(|n| format!("{{\"name\":\"{n}\"}}"))
        .collect();
    let mut next = 0;
    while parts.len() > 1 {
        parts.shuffle(rng);
        let a = parts.pop().unwrap();
        let b = parts.pop().unwrap();
        parts.push(format!("{{\"name\":\"i{next}\",\"children\":[{a},{b}]}}"));
        next += 1;
    }
    Hierarchy::import_str(&parts[0]).unwrap()
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (1.0 - dot / (na * nb)).clamp(0.0, 2.0)
}

pub type Merge = (BTreeSet<String>, BTreeSet<String>, f64);

/// Greedy agglomeration recomputing every cluster distance from scratch as
/// the mean pairwise leaf distance. Ties go to the pair whose sorted member
/// index lists compare smallest.
#[allow(clippy::type_complexity)]
pub fn hac_oracle(classes: &[String], dist: &[Vec<f64>]) -> Vec<Merge> {
    let mut clusters: Vec<Vec<usize>> = (0..classes.len()).map(|i| vec![i]).collect();
    let mut out = Vec::new();
    while clusters.len() > 1 {
        let mut best: Option<(f64, Vec<usize>, Vec<usize>, usize, usize)> = None;
        for i in 0..clusters.len() {
            for j in 0..clusters.len() {
                if i == j {
                    continue;
                }
                let (a, b) = (&clusters[i], &clusters[j]);
                if a > b {
                    continue;
                }
                let mut sum = 0.0;
                for &p in a {
                    for &q in b {
                        sum += dist[p][q];
                    }
                }
                let d = sum / (a.len() * b.len()) as f64;
                let better = match &best {
                    None => true,
                    Some((bd, ba, bb, _, _)) => {
                        d < *bd || (d == *bd && (a, b) < (ba, bb))
                    }
                };
                if better {
                    best = Some((d, a.clone(), b.clone(), i, j));
                }
            }
        }
        let (d, a, b, i, j) = best.unwrap();
        let set = |v: &[usize]| v.iter().map(|&k| classes[k].clone()).collect::<BTreeSet<_>>();
        out.push((set(&a), set(&b), d));
        let mut merged = [a, b].concat();
        merged.sort();
        let (hi, lo) = (i.max(j), i.min(j));
        clusters.remove(hi);
        clusters.remove(lo);
        clusters.push(merged);
    }
    out
}

/// Brute-force AUROC over all (OOD, ID) pairs.
pub fn pair_count_auroc(scores: &[f64], is_ood: &[bool]) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        if !is_ood[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if is_ood[j] {
                continue;
            }
            den += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    num / den
}

/// Largest relative difference between the analytic gradient and central
/// differences with `step`, over every parameter of a random instance.
/// Components where both sides are below `floor` in magnitude are compared
/// against `floor` instead of their own size.
pub fn gradient_check(seed: u64, k: usize, step: f64, floor: f64) -> f64 {
    let mut r = rng(seed);
    let h = random_tree(k, &mut r);
    let mut params = HeadParameters::<f64>::random(4, &[5], h.len(), 0.0, &mut r).unwrap();
    for b in params.layers.iter_mut().flat_map(|l| l.bias.iter_mut()) {
        *b = r.random_range(-0.5..0.5);
    }
    let leaves = h.leaves();
    let batch_x: Vec<Vec<f64>> = (0..6)
        .map(|_| (0..4).map(|_| r.random_range(-2.0..2.0)).collect())
        .collect();
    let batch_y: Vec<NodeId> = (0..6).map(|_| leaves[r.random_range(0..leaves.len())]).collect();
    let labels: Vec<String> = batch_y
        .iter()
        .map(|&y| h.class_of(y).unwrap().to_string())
        .collect();
    let weights = ClassWeights::from_labels(&labels).unwrap();
    let batch: Vec<(&[f64], NodeId)> = batch_x
        .iter()
        .zip(&batch_y)
        .map(|(x, &y)| (x.as_slice(), y))
        .collect();
    let (grad, _) = gradient(&params, &batch, &weights, &h).unwrap();

    let mut worst: f64 = 0.0;
    for l in 0..params.layers.len() {
        let n_w = params.layers[l].weights.len();
        let n_b = params.layers[l].bias.len();
        for idx in 0..n_w + n_b {
            let analytic = if idx < n_w {
                grad.layers[l].weights[idx]
            } else {
                grad.layers[l].bias[idx - n_w]
            };
            let original = *param_mut(&mut params, l, idx);
            *param_mut(&mut params, l, idx) = original + step;
            let up = mean_loss(&params, &batch, &weights, &h).unwrap();
            *param_mut(&mut params, l, idx) = original - step;
            let down = mean_loss(&params, &batch, &weights, &h).unwrap();
            *param_mut(&mut params, l, idx) = original;
            let numeric = (up - down) / (2.0 * step);
            let scale = analytic.abs().max(numeric.abs()).max(floor);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

fn param_mut(p: &mut HeadParameters<f64>, layer: usize, idx: usize) -> &mut f64 {
    let l = &mut p.layers[layer];
    let n_w = l.weights.len();
    if idx < n_w {
        &mut l.weights[idx]
    } else {
        &mut l.bias[idx - n_w]
    }
}

/// Raw multichannel recordings: each class is a sinusoid with its own
/// frequency and amplitude on three channels plus noise; every subject
/// performs every class for `seconds` at `hz`.
pub fn write_recordings(
    path: &Path,
    subjects: usize,
    classes: &[&str],
    seconds: f64,
    hz: f64,
    seed: u64,
) {
    let mut r = rng(seed);
    let noise = Normal::new(0.0, 0.3).unwrap();
    let mut s = String::from("subject,activity,acc_x,acc_y,acc_z\n");
    let n = (seconds * hz) as usize;
    for sub in 0..subjects {
        for (c, class) in classes.iter().enumerate() {
            let freq = 0.5 + c as f64;
            let amp = 1.0 + 0.5 * c as f64;
            for t in 0..n {
                let time = t as f64 / hz;
                let phase = 2.0 * std::f64::consts::PI * freq * time;
                let _ = writeln!(
                    s,
                    "s{sub},{class},{:.6},{:.6},{:.6}",
                    amp * phase.sin() + noise.sample(&mut r),
                    amp * phase.cos() + noise.sample(&mut r),
                    c as f64 * 0.5 + noise.sample(&mut r),
                );
            }
        }
    }
    std::fs::write(path, s).unwrap();
}

pub const SCHEMA_TOML: &str = r#"
[schema]
subject = "subject"
label = "activity"
channels = ["acc_x", "acc_y", "acc_z"]
sample_rate_hz = 30.0
"#;
