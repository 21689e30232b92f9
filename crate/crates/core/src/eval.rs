//! Correlation and 2AFC statistics for judging a distance against human data.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{load_wav, AudioBuffer};
use crate::error::{Error, Result};
use crate::metric::{MetricModel, Scalar};

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::EmptyInput("need at least two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// 1-based ranks; tied values share the mean of their positions.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MosRecord {
    pub speaker: String,
    pub condition: String,
    pub mos: f64,
    #[serde(rename = "ref")]
    pub reference: PathBuf,
    pub deg: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    A,
    B,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoAfcRecord {
    #[serde(rename = "ref")]
    pub reference: PathBuf,
    pub a: PathBuf,
    pub b: PathBuf,
    pub choice: Choice,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub spearman: f64,
    pub pearson: f64,
    pub groups: usize,
}

fn resolve(base: Option<&Path>, p: &mut PathBuf) {
    if let Some(base) = base {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
}

/// Relative audio paths are resolved against the CSV's directory.
pub fn load_mos_csv(path: impl AsRef<Path>) -> Result<Vec<MosRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows: Vec<MosRecord> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    for r in &mut rows {
        resolve(path.parent(), &mut r.reference);
        resolve(path.parent(), &mut r.deg);
    }
    if let Some((i, _)) = rows.iter().enumerate().find(|(_, r)| !r.mos.is_finite()) {
        return Err(Error::NonFinite(i));
    }
    Ok(rows)
}

pub fn load_2afc_csv(path: impl AsRef<Path>) -> Result<Vec<TwoAfcRecord>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let mut rows: Vec<TwoAfcRecord> = reader
        .deserialize()
        .collect::<std::result::Result<_, _>>()?;
    for r in &mut rows {
        for p in [&mut r.reference, &mut r.a, &mut r.b] {
            resolve(path.parent(), p);
        }
    }
    if let Some(r) = rows.iter().find(|r| r.a == r.b) {
        return Err(Error::InvalidParameter(format!(
            "2AFC alternatives are identical: {:?}",
            r.a
        )));
    }
    Ok(rows)
}

/// Averages distance and MOS per `(speaker, condition)` group and correlates
/// the group means. Both coefficients are reported for `-D`, so agreement
/// between low distance and high MOS is positive.
pub fn mos_correlation_with<F>(records: &[MosRecord], mut distance: F) -> Result<CorrelationReport>
where
    F: FnMut(&MosRecord) -> Result<f64>,
{
    let mut groups: BTreeMap<(&str, &str), (f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let d = distance(r)?;
        let g = groups
            .entry((r.speaker.as_str(), r.condition.as_str()))
            .or_insert((0.0, 0.0, 0));
        g.0 += d;
        g.1 += r.mos;
        g.2 += 1;
    }
    if groups.len() < 2 {
        return Err(Error::NotEnoughGroups(groups.len()));
    }
    let (neg_d, mos): (Vec<f64>, Vec<f64>) = groups
        .values()
        .map(|&(d, m, n)| (-d / n as f64, m / n as f64))
        .unzip();
    Ok(CorrelationReport {
        spearman: spearman(&neg_d, &mos)?,
        pearson: pearson(&neg_d, &mos)?,
        groups: groups.len(),
    })
}

/// Model picks the alternative with the smaller distance; ties go to A.
pub fn model_choice(d_a: f64, d_b: f64) -> Choice {
    if d_b < d_a {
        Choice::B
    } else {
        Choice::A
    }
}

/// Fraction of records where the model's choice matches the human one.
/// `distances` returns `(D(ref, a), D(ref, b))`.
pub fn two_afc_accuracy_with<F>(records: &[TwoAfcRecord], mut distances: F) -> Result<f64>
where
    F: FnMut(&TwoAfcRecord) -> Result<(f64, f64)>,
{
    if records.is_empty() {
        return Err(Error::EmptyInput("no 2AFC records"));
    }
    let mut hits = 0usize;
    for r in records {
        let (da, db) = distances(r)?;
        if model_choice(da, db) == r.choice {
            hits += 1;
        }
    }
    Ok(hits as f64 / records.len() as f64)
}

fn cached(cache: &BTreeMap<&Path, AudioBuffer>, p: &Path) -> AudioBuffer {
    cache[p].clone()
}

fn load_all<'a>(paths: impl Iterator<Item = &'a Path>) -> Result<BTreeMap<&'a Path, AudioBuffer>> {
    let unique: Vec<&Path> = paths
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    let loaded: Vec<AudioBuffer> = unique.par_iter().map(load_wav).collect::<Result<_>>()?;
    Ok(unique.into_iter().zip(loaded).collect())
}

/// [`mos_correlation_with`] using the model's distance. Records are scored in
/// parallel; the reduction runs in record order.
pub fn mos_correlation<S: Scalar + Send + Sync>(
    model: &MetricModel<S>,
    records: &[MosRecord],
) -> Result<CorrelationReport> {
    let audio = load_all(
        records
            .iter()
            .flat_map(|r| [r.reference.as_path(), r.deg.as_path()]),
    )?;
    let d: Vec<f64> = records
        .par_iter()
        .map(|r| model.distance(&cached(&audio, &r.reference), &cached(&audio, &r.deg)))
        .collect::<Result<_>>()?;
    let mut next = d.into_iter();
    mos_correlation_with(records, |_| {
        Ok(next.next().expect("one distance per record"))
    })
}

/// [`two_afc_accuracy_with`] using the model's distance.
pub fn two_afc_accuracy<S: Scalar + Send + Sync>(
    model: &MetricModel<S>,
    records: &[TwoAfcRecord],
) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::EmptyInput("no 2AFC records"));
    }
    let audio = load_all(
        records
            .iter()
            .flat_map(|r| [r.reference.as_path(), r.a.as_path(), r.b.as_path()]),
    )?;
    let d: Vec<(f64, f64)> = records
        .par_iter()
        .map(|r| {
            let x_ref = cached(&audio, &r.reference);
            let a = cached(&audio, &r.a);
            let b = cached(&audio, &r.b);
            if a.len() == b.len() {
                let d = model.distances_to(&x_ref, &[&a, &b])?;
                Ok((d[0], d[1]))
            } else {
                Ok((model.distance(&x_ref, &a)?, model.distance(&x_ref, &b)?))
            }
        })
        .collect::<Result<_>>()?;
    let mut next = d.into_iter();
    two_afc_accuracy_with(records, |_| Ok(next.next().expect("one pair per record")))
}
