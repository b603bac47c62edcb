//! Window → fixed-length feature vector.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::{write_file, Window};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FeatureVector<T> {
    pub values: Vec<T>,
    pub feature_names: Vec<String>,
    pub window_id: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Handcrafted,
    Ecdf,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub kind: FeatureKind,
    pub ecdf_points: usize,
    pub external_path: Option<PathBuf>,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            kind: FeatureKind::Handcrafted,
            ecdf_points: 15,
            external_path: None,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.ecdf_points == 0 {
            return Err(Error::Config("ecdf_points must be positive".into()));
        }
        if self.kind == FeatureKind::External && self.external_path.is_none() {
            return Err(Error::Config("external features need external_path".into()));
        }
        Ok(())
    }
}

pub const HANDCRAFTED_STATS: [&str; 7] = [
    "mean", "std", "range", "mad", "kurtosis", "skew", "errnorm",
];

fn median<T: Scalar>(sorted: &[T]) -> T {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / T::lit(2.0)
    }
}

fn sorted<T: Scalar>(xs: &[T]) -> Vec<T> {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite samples"));
    v
}

/// The seven per-channel statistics in [`HANDCRAFTED_STATS`] order.
pub fn channel_statistics<T: Scalar>(xs: &[T]) -> [T; 7] {
    let n = T::from_usize_lossy(xs.len());
    let mean = xs.iter().copied().sum::<T>() / n;
    let (mut m2, mut m3, mut m4, mut abs) = (T::zero(), T::zero(), T::zero(), T::zero());
    for &x in xs {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
        abs += d.abs();
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    let std = m2.sqrt();
    let s = sorted(xs);
    let range = s[s.len() - 1] - s[0];
    let med = median(&s);
    let mad = median(&sorted(&xs.iter().map(|&x| (x - med).abs()).collect::<Vec<_>>()));
    // Variance below this is rounding noise around a constant signal.
    let degenerate = m2 <= T::epsilon() * T::epsilon() * (mean * mean + T::one());
    let (kurt, skew) = if degenerate {
        (T::zero(), T::zero())
    } else {
        (m4 / (m2 * m2) - T::lit(3.0), m3 / (m2 * std))
    };
    [mean, std, range, mad, kurt, skew, abs / n]
}

pub fn handcrafted_features<T: Scalar>(
    w: &Window<T>,
    channel_names: &[String],
) -> Result<FeatureVector<T>> {
    if w.len() < 2 {
        return Err(Error::arg(format!(
            "window {} has {} samples; handcrafted features need at least 2",
            w.window_id,
            w.len()
        )));
    }
    let mut values = Vec::with_capacity(7 * w.data.len());
    let mut feature_names = Vec::with_capacity(values.capacity());
    for (c, row) in w.data.iter().enumerate() {
        values.extend(channel_statistics(row));
        let ch = channel_label(channel_names, c);
        feature_names.extend(HANDCRAFTED_STATS.iter().map(|s| format!("{ch}_{s}")));
    }
    Ok(FeatureVector {
        values,
        feature_names,
        window_id: w.window_id,
    })
}

fn channel_label(names: &[String], c: usize) -> String {
    names.get(c).cloned().unwrap_or_else(|| format!("ch{c}"))
}

/// Quantile reads at `(i + 0.5) / n_points`, nearest rank, plus the mean.
pub fn ecdf_channel<T: Scalar>(xs: &[T], n_points: usize) -> Vec<T> {
    let s = sorted(xs);
    let len = s.len();
    let mut out: Vec<T> = (0..n_points)
        .map(|i| {
            let idx = ((2 * i + 1) * len) / (2 * n_points);
            s[idx.min(len - 1)]
        })
        .collect();
    out.push(xs.iter().copied().sum::<T>() / T::from_usize_lossy(len));
    out
}

pub fn ecdf_features<T: Scalar>(
    w: &Window<T>,
    n_points: usize,
    channel_names: &[String],
) -> Result<FeatureVector<T>> {
    if n_points == 0 || w.len() < n_points {
        return Err(Error::arg(format!(
            "window {} has {} samples; ECDF needs at least {} (and n_points > 0)",
            w.window_id,
            w.len(),
            n_points
        )));
    }
    let mut values = Vec::with_capacity((n_points + 1) * w.data.len());
    let mut feature_names = Vec::with_capacity(values.capacity());
    for (c, row) in w.data.iter().enumerate() {
        values.extend(ecdf_channel(row, n_points));
        let ch = channel_label(channel_names, c);
        feature_names.extend((0..n_points).map(|i| format!("{ch}_ecdf{i}")));
        feature_names.push(format!("{ch}_mean"));
    }
    Ok(FeatureVector {
        values,
        feature_names,
        window_id: w.window_id,
    })
}

/// Parses the `window_id, v_0, ..., v_{F-1}` line format.
pub fn parse_embeddings<T: Scalar>(text: &str) -> Result<BTreeMap<u64, Vec<T>>> {
    let mut map = BTreeMap::new();
    let mut width = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = lineno + 1;
        let mut fields = line.split(',').map(str::trim);
        let id_text = fields.next().unwrap_or("");
        let id: u64 = id_text.parse().map_err(|_| Error::Parse {
            row,
            msg: format!("bad window id `{id_text}`"),
        })?;
        let values = fields
            .map(|s| {
                s.parse::<T>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        row,
                        msg: format!("bad value `{s}`"),
                    })
            })
            .collect::<Result<Vec<T>>>()?;
        match width {
            None => width = Some(values.len()),
            Some(w) if w != values.len() => {
                return Err(Error::format(format!(
                    "line {row}: {} values, expected {w}",
                    values.len()
                )))
            }
            _ => {}
        }
        if values.is_empty() {
            return Err(Error::format(format!("line {row}: no values")));
        }
        if map.insert(id, values).is_some() {
            return Err(Error::format(format!("duplicate window id {id}")));
        }
    }
    Ok(map)
}

pub fn import_embeddings<T: Scalar>(
    path: &Path,
    windows: &[Window<T>],
) -> Result<Vec<FeatureVector<T>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    match_embeddings(&parse_embeddings(&text)?, windows)
}

pub fn match_embeddings<T: Scalar>(
    table: &BTreeMap<u64, Vec<T>>,
    windows: &[Window<T>],
) -> Result<Vec<FeatureVector<T>>> {
    let missing: Vec<String> = windows
        .iter()
        .filter(|w| !table.contains_key(&w.window_id))
        .map(|w| w.window_id.to_string())
        .collect();
    if !missing.is_empty() {
        return Err(Error::format(format!(
            "embeddings missing for window ids: {}",
            missing.join(", ")
        )));
    }
    let width = table.values().next().map_or(0, Vec::len);
    let names: Vec<String> = (0..width).map(|i| format!("emb{i}")).collect();
    Ok(windows
        .iter()
        .map(|w| FeatureVector {
            values: table[&w.window_id].clone(),
            feature_names: names.clone(),
            window_id: w.window_id,
        })
        .collect())
}

/// Same line format as the embedding import.
pub fn format_features<T: Scalar>(features: &[FeatureVector<T>]) -> String {
    let mut out = String::new();
    for f in features {
        out.push_str(&f.window_id.to_string());
        for v in &f.values {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

pub fn export_features<T: Scalar>(path: &Path, features: &[FeatureVector<T>]) -> Result<()> {
    write_file(path, &format_features(features))
}

/// Runs the configured extractor over every window.
pub fn extract<T: Scalar>(
    config: &FeatureConfig,
    windows: &[Window<T>],
    channel_names: &[String],
) -> Result<Vec<FeatureVector<T>>> {
    config.validate()?;
    match config.kind {
        FeatureKind::Handcrafted => windows
            .iter()
            .map(|w| handcrafted_features(w, channel_names))
            .collect(),
        FeatureKind::Ecdf => windows
            .iter()
            .map(|w| ecdf_features(w, config.ecdf_points, channel_names))
            .collect(),
        FeatureKind::External => import_embeddings(
            config.external_path.as_deref().expect("validated"),
            windows,
        ),
    }
}

/// Per-feature z-score, fitted on training vectors only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct FeatureScaler<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> FeatureScaler<T> {
    pub fn fit(features: &[Vec<T>]) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| Error::arg("cannot fit scaler on zero vectors"))?;
        let f = first.len();
        let n = T::from_usize_lossy(features.len());
        let mut mean = vec![T::zero(); f];
        for x in features {
            if x.len() != f {
                return Err(Error::arg("feature vectors differ in length"));
            }
            for (m, &v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![T::zero(); f];
        for x in features {
            for ((s, &v), &m) in var.iter_mut().zip(x).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > T::epsilon() {
                    sd
                } else {
                    T::one()
                }
            })
            .collect();
        Ok(FeatureScaler { mean, std })
    }

    pub fn transform(&self, x: &[T]) -> Vec<T> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((&v, &m), &s)| (v - m) / s)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn window(rows: Vec<Vec<f64>>) -> Window<f64> {
        Window {
            data: rows,
            label: "a".into(),
            subject_id: "s".into(),
            window_id: 3,
        }
    }

    // Straightforward re-implementation, one statistic at a time.
    fn naive_stats(xs: &[f64]) -> [f64; 7] {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        let max = xs.iter().cloned().fold(f64::MIN, f64::max);
        let min = xs.iter().cloned().fold(f64::MAX, f64::min);
        let med = |v: &mut Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let k = v.len();
            if k % 2 == 1 {
                v[k / 2]
            } else {
                0.5 * (v[k / 2 - 1] + v[k / 2])
            }
        };
        let m = med(&mut xs.to_vec());
        let mad = med(&mut xs.iter().map(|x| (x - m).abs()).collect());
        let skew = xs.iter().map(|x| ((x - mean) / std).powi(3)).sum::<f64>() / n;
        let kurt = xs.iter().map(|x| ((x - mean) / std).powi(4)).sum::<f64>() / n - 3.0;
        let err = xs.iter().map(|x| (x - mean).abs()).sum::<f64>() / n;
        [mean, std, max - min, mad, kurt, skew, err]
    }

    #[test]
    fn constant_channel_degenerate_convention() {
        let fv = handcrafted_features(&window(vec![vec![3.0; 50]]), &[]).unwrap();
        assert_eq!(fv.values, vec![3.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(fv.feature_names[0], "ch0_mean");
        assert_eq!(fv.window_id, 3);
    }

    #[test]
    fn small_closed_form() {
        let s = channel_statistics(&[1.0f64, 2.0, 3.0, 4.0]);
        assert_eq!(s[0], 2.5);
        assert_eq!(s[2], 3.0);
        assert!((s[1] - 1.118033988749895).abs() < 1e-12);
        assert_eq!(s[3], 1.0);
        assert_eq!(s[6], 1.0);
    }

    #[test]
    fn agrees_with_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.random_range(2..200);
            let xs: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
            let got = channel_statistics(&xs);
            let want = naive_stats(&xs);
            for (g, w) in got.iter().zip(want) {
                assert!((g - w).abs() < 1e-9, "{g} vs {w}");
            }
        }
    }

    #[test]
    fn too_short_window() {
        assert!(matches!(
            handcrafted_features(&window(vec![vec![1.0]]), &[]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn ecdf_on_ramp() {
        let ramp: Vec<f64> = (0..100).map(f64::from).collect();
        let fv = ecdf_features(&window(vec![ramp]), 10, &["x".into()]).unwrap();
        let expected: Vec<f64> = (0..10).map(|i| (10 * i + 5) as f64).collect();
        assert_eq!(&fv.values[..10], &expected[..]);
        assert_eq!(fv.values[10], 49.5);
        assert_eq!(fv.values.len(), 11);
        assert_eq!(fv.feature_names[10], "x_mean");
    }

    #[test]
    fn ecdf_constant_and_errors() {
        let fv = ecdf_features(&window(vec![vec![2.0; 20]]), 15, &[]).unwrap();
        assert!(fv.values.iter().all(|&v| v == 2.0));
        assert!(ecdf_features(&window(vec![vec![2.0; 5]]), 6, &[]).is_err());
    }

    proptest! {
        #[test]
        fn ecdf_reads_non_decreasing(xs in proptest::collection::vec(-1e3f64..1e3, 15..120)) {
            let reads = ecdf_channel(&xs, 15);
            for pair in reads[..15].windows(2) {
                prop_assert!(pair[0] <= pair[1]);
            }
        }

        #[test]
        fn scale_equivariance(xs in proptest::collection::vec(-10f64..10.0, 8..60), s in 0.1f64..20.0) {
            let a = channel_statistics(&xs);
            prop_assume!(a[1] > 1e-3);
            let scaled: Vec<f64> = xs.iter().map(|x| x * s).collect();
            let b = channel_statistics(&scaled);
            for i in [0, 1, 2, 3, 6] {
                prop_assert!((b[i] - s * a[i]).abs() < 1e-8 * (1.0 + (s * a[i]).abs()));
            }
            for i in [4, 5] {
                prop_assert!((b[i] - a[i]).abs() < 1e-7 * (1.0 + a[i].abs()));
            }
        }

        #[test]
        fn channel_permutation_permutes_blocks(a in proptest::collection::vec(-5f64..5.0, 4..30), seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let b: Vec<f64> = a.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let ab = handcrafted_features(&window(vec![a.clone(), b.clone()]), &[]).unwrap();
            let ba = handcrafted_features(&window(vec![b, a]), &[]).unwrap();
            prop_assert_eq!(&ab.values[..7], &ba.values[7..]);
            prop_assert_eq!(&ab.values[7..], &ba.values[..7]);
        }
    }

    fn windows(ids: &[u64]) -> Vec<Window<f64>> {
        ids.iter()
            .map(|&id| Window {
                data: vec![vec![0.0, 1.0]],
                label: "a".into(),
                subject_id: "s".into(),
                window_id: id,
            })
            .collect()
    }

    #[test]
    fn embedding_import_matches_ids() {
        let mut text = String::new();
        for id in [2u64, 0, 1] {
            text.push_str(&id.to_string());
            for j in 0..1024 {
                text.push_str(&format!(", {}", j as f64 + id as f64));
            }
            text.push('\n');
        }
        let table = parse_embeddings::<f64>(&text).unwrap();
        let fvs = match_embeddings(&table, &windows(&[0, 1, 2])).unwrap();
        assert_eq!(fvs.len(), 3);
        assert!(fvs.iter().all(|f| f.values.len() == 1024));
        assert_eq!(fvs[1].values[0], 1.0);
    }

    #[test]
    fn embedding_errors() {
        let table = parse_embeddings::<f64>("0,1,2\n1,3,4\n").unwrap();
        let err = match_embeddings(&table, &windows(&[0, 1, 7])).unwrap_err();
        assert!(err.to_string().contains('7'), "{err}");
        assert!(matches!(
            parse_embeddings::<f64>("0,1,2\n0,3,4\n"),
            Err(Error::Format(_))
        ));
        assert!(matches!(
            parse_embeddings::<f64>("0,1,2\n1,3\n"),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn export_roundtrips_through_import() {
        let fvs = vec![FeatureVector {
            values: vec![0.1, 1.0 / 3.0, -2e-7],
            feature_names: vec![],
            window_id: 9,
        }];
        let table = parse_embeddings::<f64>(&format_features(&fvs)).unwrap();
        assert_eq!(table[&9], fvs[0].values);
    }
}
