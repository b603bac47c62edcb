//! Ingestion of labelled sensor recordings, resampling, windowing and
//! subject-wise fold planning.
//!
//! Recordings come from CSV files described by a small key-value schema
//! file. Each contiguous run of rows sharing a subject and a label becomes
//! one [`Recording`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// One subject's multichannel stream with per-timestep labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording<T> {
    pub subject_id: String,
    /// `C` rows of `T` samples each.
    pub channels: Vec<Vec<T>>,
    pub channel_names: Vec<String>,
    pub sample_rate_hz: T,
    pub labels: Vec<String>,
}

impl<T: Scalar> Recording<T> {
    pub fn new(
        subject_id: impl Into<String>,
        channel_names: Vec<String>,
        channels: Vec<Vec<T>>,
        sample_rate_hz: T,
        labels: Vec<String>,
    ) -> Result<Self> {
        let rec = Recording {
            subject_id: subject_id.into(),
            channels,
            channel_names,
            sample_rate_hz,
            labels,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Recording whose every timestep carries the same label.
    pub fn with_label(
        subject_id: impl Into<String>,
        channel_names: Vec<String>,
        channels: Vec<Vec<T>>,
        sample_rate_hz: T,
        label: &str,
    ) -> Result<Self> {
        let len = channels.first().map_or(0, Vec::len);
        Self::new(
            subject_id,
            channel_names,
            channels,
            sample_rate_hz,
            vec![label.to_string(); len],
        )
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn channel_count(&self) -> usize {
        self.channels.len()
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::arg("recording needs at least one channel"));
        }
        if self.channel_names.len() != self.channels.len() {
            return Err(Error::arg(format!(
                "{} channel names for {} channels",
                self.channel_names.len(),
                self.channels.len()
            )));
        }
        let len = self.labels.len();
        if len == 0 {
            return Err(Error::arg("recording has no samples"));
        }
        if self.channels.iter().any(|c| c.len() != len) {
            return Err(Error::arg("channel rows and labels differ in length"));
        }
        if !(self.sample_rate_hz > T::zero()) {
            return Err(Error::arg("sample rate must be positive"));
        }
        Ok(())
    }
}

/// Fixed-length multichannel segment, the unit of classification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Window<T> {
    /// `C` rows of `L` samples.
    pub data: Vec<Vec<T>>,
    pub label: String,
    pub subject_id: String,
    pub window_id: u64,
}

impl<T> Window<T> {
    pub fn len(&self) -> usize {
        self.data.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

/// Maps CSV columns onto logical roles.
///
/// The on-disk form is one `key = value` pair per line, `#` starts a
/// comment:
///
/// ```text
/// subject = participant
/// label = activity
/// timestamp = t
/// channels = acc_x, acc_y, acc_z
/// sample_rate_hz = 100
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schema {
    pub subject: String,
    pub label: String,
    pub timestamp: Option<String>,
    pub channels: Vec<String>,
    pub sample_rate_hz: f64,
}

impl Schema {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .or_else(|| line.split_once(':'))
                .ok_or_else(|| {
                    Error::Schema(format!("line {}: expected `key = value`", lineno + 1))
                })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let take = |key: &str| {
            map.get(key)
                .filter(|v| !v.is_empty())
                .cloned()
                .ok_or_else(|| Error::Schema(format!("schema is missing `{key}`")))
        };
        let channels: Vec<String> = take("channels")?
            .split(',')
            .map(|s| s.trim().to_string())
            .filter(|s| !s.is_empty())
            .collect();
        if channels.is_empty() {
            return Err(Error::Schema("schema lists no channels".into()));
        }
        let rate_text = take("sample_rate_hz")?;
        let sample_rate_hz: f64 = rate_text
            .parse()
            .map_err(|_| Error::Schema(format!("sample_rate_hz `{rate_text}` is not a number")))?;
        if !(sample_rate_hz > 0.0) {
            return Err(Error::Schema("sample_rate_hz must be positive".into()));
        }
        Ok(Schema {
            subject: take("subject")?,
            label: take("label")?,
            timestamp: map.get("timestamp").filter(|v| !v.is_empty()).cloned(),
            channels,
            sample_rate_hz,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

fn csv_files(path: &Path) -> Result<Vec<PathBuf>> {
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, "no such file or directory"),
        ));
    }
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    let mut files: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    files.sort();
    Ok(files)
}

/// Reads every recording from a CSV file, or from all `*.csv` files of a
/// directory in name order.
pub fn load_recordings<T: Scalar>(path: &Path, schema: &Schema) -> Result<Vec<Recording<T>>> {
    let mut out = Vec::new();
    for file in csv_files(path)? {
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let recs = parse_recordings::<T>(&text, schema).map_err(|e| match e {
            Error::Parse { row, msg } => Error::Parse {
                row,
                msg: format!("{}: {msg}", file.display()),
            },
            other => other,
        })?;
        if recs.is_empty() {
            warn!("{}: no data rows", file.display());
        }
        out.extend(recs);
    }
    Ok(out)
}

/// Parses CSV text already in memory. See [`load_recordings`].
pub fn parse_recordings<T: Scalar>(text: &str, schema: &Schema) -> Result<Vec<Recording<T>>> {
    if text.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let column = |role: &str, name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("missing column `{name}` for role {role}")))
    };
    let subject_col = column("subject", &schema.subject)?;
    let label_col = column("label", &schema.label)?;
    if let Some(ts) = &schema.timestamp {
        column("timestamp", ts)?;
    }
    let channel_cols = schema
        .channels
        .iter()
        .map(|c| column("channel", c))
        .collect::<Result<Vec<_>>>()?;

    let rate = T::lit(schema.sample_rate_hz);
    let mut out = Vec::new();
    let mut current: Option<(String, String, Vec<Vec<T>>)> = None;
    let flush = |cur: Option<(String, String, Vec<Vec<T>>)>, out: &mut Vec<Recording<T>>| {
        if let Some((subject, label, channels)) = cur {
            out.push(Recording::with_label(
                subject,
                schema.channels.clone(),
                channels,
                rate,
                &label,
            )?);
        }
        Ok::<(), Error>(())
    };

    for record in reader.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| record.get(i).unwrap_or("");
        let subject = field(subject_col);
        let label = field(label_col);
        let same = matches!(&current, Some((s, l, _)) if s == subject && l == label);
        if !same {
            flush(current.take(), &mut out)?;
            current = Some((
                subject.to_string(),
                label.to_string(),
                vec![Vec::new(); channel_cols.len()],
            ));
        }
        let (_, _, channels) = current.as_mut().expect("segment open");
        for (c, &col) in channel_cols.iter().enumerate() {
            let raw = field(col);
            let v: T = raw.parse().ok().filter(|v: &T| v.is_finite()).ok_or_else(|| {
                Error::Parse {
                    row,
                    msg: format!("column `{}` value `{raw}` is not a finite number", schema.channels[c]),
                }
            })?;
            channels[c].push(v);
        }
    }
    flush(current, &mut out)?;
    Ok(out)
}

/// Linear-interpolation resampling onto an endpoint-aligned uniform grid.
pub fn resample<T: Scalar>(rec: &Recording<T>, target_hz: T) -> Result<Recording<T>> {
    if !(target_hz > T::zero()) {
        return Err(Error::arg("target_hz must be positive"));
    }
    rec.validate()?;
    let n = rec.len();
    let n_out = (T::from_usize_lossy(n) * target_hz / rec.sample_rate_hz)
        .round()
        .to_usize()
        .unwrap_or(0)
        .max(1);
    let step = if n_out > 1 {
        T::from_usize_lossy(n - 1) / T::from_usize_lossy(n_out - 1)
    } else {
        T::zero()
    };
    let last = n - 1;
    let positions: Vec<(usize, T)> = (0..n_out)
        .map(|j| {
            let pos = T::from_usize_lossy(j) * step;
            let lo = pos.floor().to_usize().unwrap_or(0).min(last);
            (lo, pos - T::from_usize_lossy(lo))
        })
        .collect();
    let channels = rec
        .channels
        .iter()
        .map(|row| {
            positions
                .iter()
                .map(|&(lo, frac)| {
                    if lo == last || frac == T::zero() {
                        row[lo]
                    } else {
                        row[lo] + (row[lo + 1] - row[lo]) * frac
                    }
                })
                .collect()
        })
        .collect();
    let labels = positions
        .iter()
        .map(|&(lo, frac)| {
            let idx = if frac >= T::lit(0.5) { lo + 1 } else { lo };
            rec.labels[idx.min(last)].clone()
        })
        .collect();
    Ok(Recording {
        subject_id: rec.subject_id.clone(),
        channels,
        channel_names: rec.channel_names.clone(),
        sample_rate_hz: target_hz,
        labels,
    })
}

/// Window length and stride in samples for a given rate.
pub fn window_geometry<T: Scalar>(
    sample_rate_hz: T,
    window_seconds: T,
    overlap_fraction: T,
) -> Result<(usize, usize)> {
    if !(window_seconds > T::zero()) {
        return Err(Error::arg("window_seconds must be positive"));
    }
    if !(overlap_fraction >= T::zero() && overlap_fraction < T::one()) {
        return Err(Error::arg("overlap_fraction must lie in [0, 1)"));
    }
    let len = (window_seconds * sample_rate_hz)
        .round()
        .to_usize()
        .unwrap_or(0);
    if len == 0 {
        return Err(Error::arg("window shorter than one sample"));
    }
    let stride = (T::from_usize_lossy(len) * (T::one() - overlap_fraction))
        .round()
        .to_usize()
        .unwrap_or(1)
        .max(1);
    Ok((len, stride))
}

/// Cuts a recording into overlapping windows. Windows without a strict
/// majority label are dropped; `window_id`s are local indices starting at 0.
pub fn make_windows<T: Scalar>(
    rec: &Recording<T>,
    window_seconds: T,
    overlap_fraction: T,
) -> Result<Vec<Window<T>>> {
    let (len, stride) = window_geometry(rec.sample_rate_hz, window_seconds, overlap_fraction)?;
    let total = rec.len();
    if total < len {
        return Ok(Vec::new());
    }
    let count = (total - len) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let start = i * stride;
        let Some(label) = majority_label(&rec.labels[start..start + len]) else {
            continue;
        };
        out.push(Window {
            data: rec
                .channels
                .iter()
                .map(|row| row[start..start + len].to_vec())
                .collect(),
            label: label.to_string(),
            subject_id: rec.subject_id.clone(),
            window_id: i as u64,
        });
    }
    Ok(out)
}

fn majority_label(labels: &[String]) -> Option<&str> {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for l in labels {
        *counts.entry(l.as_str()).or_default() += 1;
    }
    counts
        .into_iter()
        .find(|&(_, c)| 2 * c > labels.len())
        .map(|(l, _)| l)
}

/// Resamples and windows every recording, numbering windows globally in
/// recording order.
pub fn window_recordings<T: Scalar>(
    recs: &[Recording<T>],
    target_hz: T,
    window_seconds: T,
    overlap_fraction: T,
) -> Result<Vec<Window<T>>> {
    let mut out = Vec::new();
    for rec in recs {
        let rec = resample(rec, target_hz)?;
        for mut w in make_windows(&rec, window_seconds, overlap_fraction)? {
            w.window_id = out.len() as u64;
            out.push(w);
        }
    }
    Ok(out)
}

/// Distinct subjects, sorted.
pub fn subjects<T>(windows: &[Window<T>]) -> Vec<String> {
    windows
        .iter()
        .map(|w| w.subject_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Distinct labels, sorted.
pub fn classes<T>(windows: &[Window<T>]) -> Vec<String> {
    windows
        .iter()
        .map(|w| w.label.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect()
}

/// Shuffles subjects with `seed` and partitions them into test groups of
/// `subjects_per_fold` (the last group may be smaller).
pub fn subject_kfold<T>(
    windows: &[Window<T>],
    subjects_per_fold: usize,
    seed: u64,
) -> Result<FoldPlan> {
    if subjects_per_fold == 0 {
        return Err(Error::arg("subjects_per_fold must be positive"));
    }
    let mut subs = subjects(windows);
    if subs.len() < 2 * subjects_per_fold {
        return Err(Error::arg(format!(
            "{} subjects cannot form folds of {} test subjects",
            subs.len(),
            subjects_per_fold
        )));
    }
    subs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let folds = subs
        .chunks(subjects_per_fold)
        .map(|test| {
            let mut test_subjects = test.to_vec();
            test_subjects.sort();
            let mut train_subjects: Vec<String> = subs
                .iter()
                .filter(|s| !test_subjects.contains(s))
                .cloned()
                .collect();
            train_subjects.sort();
            Fold {
                train_subjects,
                test_subjects,
            }
        })
        .collect();
    Ok(FoldPlan { folds })
}

/// Splits windows by subject membership: (in `subjects`, not in `subjects`).
pub fn split_by_subjects<T: Clone>(
    windows: &[Window<T>],
    subjects: &[String],
) -> (Vec<Window<T>>, Vec<Window<T>>) {
    windows
        .iter()
        .cloned()
        .partition(|w| subjects.contains(&w.subject_id))
}

/// Separates windows of the held-out classes from the rest.
#[allow(clippy::type_complexity)]
pub fn hold_out_classes<T: Clone>(
    windows: &[Window<T>],
    ood_classes: &BTreeSet<String>,
) -> Result<(Vec<Window<T>>, Vec<Window<T>>)> {
    let known = classes(windows);
    if let Some(bad) = ood_classes.iter().find(|c| !known.contains(c)) {
        return Err(Error::arg(format!(
            "unknown class `{bad}`; known classes: {}",
            known.join(", ")
        )));
    }
    Ok(windows
        .iter()
        .cloned()
        .partition(|w| !ood_classes.contains(&w.label)))
}

/// Per-channel z-score statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ChannelNormalizer<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
}

impl<T: Scalar> ChannelNormalizer<T> {
    /// Fits on the given (training) windows. Zero-variance channels get unit
    /// scale.
    pub fn fit(windows: &[Window<T>]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::arg("cannot fit normalizer on zero windows"))?;
        let c = first.data.len();
        let mut sum = vec![T::zero(); c];
        let mut sq = vec![T::zero(); c];
        let mut n = 0usize;
        for w in windows {
            if w.data.len() != c {
                return Err(Error::arg("windows disagree on channel count"));
            }
            for (ch, row) in w.data.iter().enumerate() {
                for &v in row {
                    sum[ch] += v;
                }
            }
            n += w.len();
        }
        let nt = T::from_usize_lossy(n);
        let mean: Vec<T> = sum.iter().map(|&s| s / nt).collect();
        for w in windows {
            for (ch, row) in w.data.iter().enumerate() {
                for &v in row {
                    let d = v - mean[ch];
                    sq[ch] += d * d;
                }
            }
        }
        let std = sq
            .iter()
            .map(|&s| {
                let sd = (s / nt).sqrt();
                if sd > T::epsilon() {
                    sd
                } else {
                    T::one()
                }
            })
            .collect();
        Ok(ChannelNormalizer { mean, std })
    }

    pub fn apply(&self, w: &Window<T>) -> Window<T> {
        let data = w
            .data
            .iter()
            .enumerate()
            .map(|(ch, row)| {
                row.iter()
                    .map(|&v| (v - self.mean[ch]) / self.std[ch])
                    .collect()
            })
            .collect();
        Window {
            data,
            label: w.label.clone(),
            subject_id: w.subject_id.clone(),
            window_id: w.window_id,
        }
    }
}

/// Writes `windows.csv` (one row per window channel) and `manifest.csv`.
pub fn write_archive<T: Scalar>(
    dir: &Path,
    windows: &[Window<T>],
    channel_names: &[String],
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut data = String::new();
    let len = windows.first().map_or(0, Window::len);
    data.push_str("window_id,channel");
    for i in 0..len {
        data.push_str(&format!(",s{i}"));
    }
    data.push('\n');
    let mut manifest = String::from("window_id,subject,label\n");
    for w in windows {
        manifest.push_str(&format!("{},{},{}\n", w.window_id, w.subject_id, w.label));
        for (row, name) in w.data.iter().zip(channel_names) {
            data.push_str(&format!("{},{}", w.window_id, name));
            for v in row {
                data.push_str(&format!(",{v}"));
            }
            data.push('\n');
        }
    }
    write_file(&dir.join("windows.csv"), &data)?;
    write_file(&dir.join("manifest.csv"), &manifest)
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Reads an archive written by [`write_archive`]. Returns the windows and
/// the channel names.
pub fn read_archive<T: Scalar>(dir: &Path) -> Result<(Vec<Window<T>>, Vec<String>)> {
    let manifest_path = dir.join("manifest.csv");
    let mut manifest = csv::Reader::from_path(&manifest_path)?;
    let mut windows: Vec<Window<T>> = Vec::new();
    let mut index = BTreeMap::new();
    for rec in manifest.records() {
        let rec = rec?;
        let id: u64 = rec[0]
            .parse()
            .map_err(|_| Error::format(format!("bad window id `{}`", &rec[0])))?;
        index.insert(id, windows.len());
        windows.push(Window {
            data: Vec::new(),
            label: rec[2].to_string(),
            subject_id: rec[1].to_string(),
            window_id: id,
        });
    }
    let mut names: Vec<String> = Vec::new();
    let mut data = csv::Reader::from_path(dir.join("windows.csv"))?;
    for rec in data.records() {
        let rec = rec?;
        let row = rec.position().map_or(0, |p| p.line() as usize);
        let id: u64 = rec[0].parse().map_err(|_| Error::Parse {
            row,
            msg: format!("bad window id `{}`", &rec[0]),
        })?;
        let &slot = index
            .get(&id)
            .ok_or_else(|| Error::format(format!("window {id} missing from manifest")))?;
        let w = &mut windows[slot];
        if slot == 0 {
            names.push(rec[1].to_string());
        }
        let values = rec
            .iter()
            .skip(2)
            .map(|s| {
                s.parse().map_err(|_| Error::Parse {
                    row,
                    msg: format!("bad sample `{s}`"),
                })
            })
            .collect::<Result<Vec<T>>>()?;
        w.data.push(values);
    }
    Ok((windows, names))
}
