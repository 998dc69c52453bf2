//! Synthetic-data quality metrics: marginal and pairwise similarity,
//! nearest-record distances and the holdout-referenced overfitting report.

use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{transform, FeatureSchema, PreprocessState, TableDataset};
use crate::error::{Error, Result};

pub const TREND_BINS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    Train,
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScore {
    pub column: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub left: String,
    pub right: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub shape: f64,
    pub trend: f64,
    pub dcr_raw: f64,
    pub dcr_score: f64,
    pub authenticity: f64,
    pub reference: Reference,
    pub columns: Vec<ColumnScore>,
    pub pairs: Vec<PairScore>,
}

impl EvalReport {
    /// `(metric, value)` rows for a flat table.
    pub fn flat(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("shape".to_string(), self.shape),
            ("trend".to_string(), self.trend),
            ("dcr_raw".to_string(), self.dcr_raw),
            ("dcr_score".to_string(), self.dcr_score),
            ("authenticity".to_string(), self.authenticity),
        ];
        rows.extend(self.columns.iter().map(|c| (format!("shape/{}", c.column), c.score)));
        rows.extend(self.pairs.iter().map(|p| (format!("trend/{}/{}", p.left, p.right), p.score)));
        rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (k, v) in self.flat() {
            out.push_str(&format!("{k},{v}\n"));
        }
        out
    }
}

fn check_schemas(a: &TableDataset, b: &TableDataset) -> Result<()> {
    if a.schema != b.schema {
        return Err(Error::Schema("tables have different schemas".into()));
    }
    Ok(())
}

fn present(col: ArrayView1<'_, f64>) -> Vec<f64> {
    col.iter().copied().filter(|v| !v.is_nan()).collect()
}

/// Two-sample Kolmogorov-Smirnov statistic.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j, mut d) = (0, 0, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

fn frequencies(codes: &[f64], c: usize) -> Vec<f64> {
    let mut f = vec![0.0; c];
    for &v in codes {
        f[v as usize] += 1.0;
    }
    let n = codes.len().max(1) as f64;
    f.iter_mut().for_each(|x| *x /= n);
    f
}

/// Total-variation distance between two discrete distributions.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

fn column_score(f: &FeatureSchema, real: &[f64], synth: &[f64]) -> f64 {
    match (real.is_empty(), synth.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    if f.is_categorical() {
        let c = f.cardinality();
        1.0 - total_variation(&frequencies(real, c), &frequencies(synth, c))
    } else {
        1.0 - ks_statistic(real, synth)
    }
}

/// Mean per-column marginal similarity and its per-column breakdown.
pub fn shape_score(real: &TableDataset, synth: &TableDataset) -> Result<(f64, Vec<ColumnScore>)> {
    check_schemas(real, synth)?;
    let cols: Vec<ColumnScore> = real
        .schema
        .iter()
        .enumerate()
        .map(|(j, f)| ColumnScore {
            column: f.name.clone(),
            score: column_score(f, &present(real.values.column(j)), &present(synth.values.column(j))),
        })
        .collect();
    let mean = cols.iter().map(|c| c.score).sum::<f64>() / cols.len() as f64;
    Ok((mean, cols))
}

/// Pearson correlation; 0 when either side is constant or fewer than two
/// points are present.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return 0.0;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Interior quantile edges for equal-frequency bins of the real column.
fn bin_edges(real: &[f64], bins: usize) -> Vec<f64> {
    let mut v = real.to_vec();
    v.sort_by(f64::total_cmp);
    let mut edges: Vec<f64> = (1..bins)
        .filter_map(|k| v.get(((k * v.len()) / bins).min(v.len().saturating_sub(1))).copied())
        .collect();
    edges.dedup();
    edges
}

fn bin_of(edges: &[f64], v: f64) -> usize {
    edges.partition_point(|&e| e <= v)
}

fn pair_rows(ds: &TableDataset, i: usize, j: usize) -> Vec<(f64, f64)> {
    ds.values
        .rows()
        .into_iter()
        .filter(|r| !r[i].is_nan() && !r[j].is_nan())
        .map(|r| (r[i], r[j]))
        .collect()
}

fn discretizer(f: &FeatureSchema, real_col: &[f64]) -> (usize, Box<dyn Fn(f64) -> usize + Sync>) {
    if f.is_categorical() {
        (f.cardinality(), Box::new(|v| v as usize))
    } else {
        let edges = bin_edges(real_col, TREND_BINS);
        (edges.len() + 1, Box::new(move |v| bin_of(&edges, v)))
    }
}

fn contingency(pairs: &[(f64, f64)], di: &dyn Fn(f64) -> usize, dj: &dyn Fn(f64) -> usize, ci: usize, cj: usize) -> Vec<f64> {
    let mut t = vec![0.0; ci * cj];
    for &(a, b) in pairs {
        t[di(a) * cj + dj(b)] += 1.0;
    }
    let n = pairs.len().max(1) as f64;
    t.iter_mut().for_each(|x| *x /= n);
    t
}

/// Mean pairwise dependence similarity and its per-pair breakdown.
pub fn trend_score(real: &TableDataset, synth: &TableDataset) -> Result<(f64, Vec<PairScore>)> {
    check_schemas(real, synth)?;
    let d = real.n_features();
    if d < 2 {
        return Err(Error::Argument("trend needs at least two columns".into()));
    }
    let idx: Vec<(usize, usize)> = (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect();
    let pairs: Vec<PairScore> = idx
        .par_iter()
        .map(|&(i, j)| {
            let (fi, fj) = (&real.schema[i], &real.schema[j]);
            let rp = pair_rows(real, i, j);
            let sp = pair_rows(synth, i, j);
            let score = if !fi.is_categorical() && !fj.is_categorical() {
                let split = |p: &[(f64, f64)]| -> (Vec<f64>, Vec<f64>) { p.iter().copied().unzip() };
                let (rx, ry) = split(&rp);
                let (sx, sy) = split(&sp);
                1.0 - (pearson(&rx, &ry) - pearson(&sx, &sy)).abs() / 2.0
            } else {
                let (ci, di) = discretizer(fi, &present(real.values.column(i)));
                let (cj, dj) = discretizer(fj, &present(real.values.column(j)));
                let p = contingency(&rp, &*di, &*dj, ci, cj);
                let q = contingency(&sp, &*di, &*dj, ci, cj);
                1.0 - total_variation(&p, &q)
            };
            PairScore {
                left: fi.name.clone(),
                right: fj.name.clone(),
                score,
            }
        })
        .collect();
    let mean = pairs.iter().map(|p| p.score).sum::<f64>() / pairs.len() as f64;
    Ok((mean, pairs))
}

/// Rows standardised by `state` (imputed, Z-scored, codes kept) plus the
/// categorical mask used by the mixed distance.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedPoints {
    pub values: Array2<f64>,
    pub categorical: Vec<bool>,
}

impl MixedPoints {
    pub fn new(ds: &TableDataset, state: &PreprocessState) -> Result<Self> {
        let t = transform(ds, state)?;
        Ok(Self {
            values: t.values,
            categorical: ds.schema.iter().map(FeatureSchema::is_categorical).collect(),
        })
    }

    pub fn n_rows(&self) -> usize {
        self.values.nrows()
    }
}

/// `sqrt(sum of squared standardised differences + number of categorical
/// mismatches)`.
pub fn mixed_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, categorical: &[bool]) -> f64 {
    squared_distance(a, b, categorical, f64::INFINITY).sqrt()
}

/// Accumulates in column order and stops once the partial sum exceeds
/// `bound`.
fn squared_distance(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>, categorical: &[bool], bound: f64) -> f64 {
    let mut s = 0.0;
    for j in 0..categorical.len() {
        s += if categorical[j] {
            if a[j] != b[j] {
                1.0
            } else {
                0.0
            }
        } else {
            (a[j] - b[j]) * (a[j] - b[j])
        };
        if s > bound {
            return s;
        }
    }
    s
}

/// Nearest reference row for every query row: `(index, distance)`, ties to
/// the lowest index. With `exclude_self` query `i` skips reference `i`.
pub fn nearest_brute(query: &MixedPoints, reference: &MixedPoints, exclude_self: bool) -> Vec<(usize, f64)> {
    (0..query.n_rows())
        .into_par_iter()
        .map(|i| {
            let q = query.values.row(i);
            let mut best = (usize::MAX, f64::INFINITY);
            for (r, row) in reference.values.rows().into_iter().enumerate() {
                if exclude_self && r == i {
                    continue;
                }
                let d = mixed_distance(q, row, &query.categorical);
                if d < best.1 {
                    best = (r, d);
                }
            }
            best
        })
        .collect()
}

/// Same result as [`nearest_brute`], abandoning candidates early once their
/// partial distance exceeds the best so far.
pub fn nearest(query: &MixedPoints, reference: &MixedPoints, exclude_self: bool) -> Vec<(usize, f64)> {
    (0..query.n_rows())
        .into_par_iter()
        .map(|i| {
            let q = query.values.row(i);
            let mut best = (usize::MAX, f64::INFINITY);
            for (r, row) in reference.values.rows().into_iter().enumerate() {
                if exclude_self && r == i {
                    continue;
                }
                let d2 = squared_distance(q, row, &query.categorical, best.1);
                if d2 < best.1 {
                    best = (r, d2);
                }
            }
            (best.0, best.1.sqrt())
        })
        .collect()
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn median_nn(query: &MixedPoints, train: &MixedPoints, exclude_self: bool) -> f64 {
    let mut d: Vec<f64> = nearest(query, train, exclude_self).into_iter().map(|x| x.1).collect();
    median(&mut d)
}

/// `raw / (raw + reference)`, 0 when both vanish.
pub fn dcr_normalize(raw: f64, reference: f64) -> f64 {
    if raw + reference > 0.0 {
        raw / (raw + reference)
    } else {
        0.0
    }
}

/// Median nearest-record distance from synthetic rows to training rows and
/// its normalised score. The reference is the same statistic for holdout
/// rows when given, otherwise the median leave-one-out distance within the
/// training rows.
pub fn dcr(
    train: &TableDataset,
    synth: &TableDataset,
    state: &PreprocessState,
    holdout: Option<&TableDataset>,
) -> Result<(f64, f64, Reference)> {
    check_schemas(train, synth)?;
    if synth.n_rows() == 0 {
        return Err(Error::Argument("no synthetic rows".into()));
    }
    let tp = MixedPoints::new(train, state)?;
    let raw = median_nn(&MixedPoints::new(synth, state)?, &tp, false);
    let (m, reference) = dcr_reference(&tp, train, state, holdout)?;
    Ok((raw, dcr_normalize(raw, m), reference))
}

fn dcr_reference(
    tp: &MixedPoints,
    train: &TableDataset,
    state: &PreprocessState,
    holdout: Option<&TableDataset>,
) -> Result<(f64, Reference)> {
    match holdout {
        Some(h) => {
            check_schemas(train, h)?;
            Ok((median_nn(&MixedPoints::new(h, state)?, tp, false), Reference::Holdout))
        }
        None => {
            if tp.n_rows() < 2 {
                return Err(Error::Argument("need at least two training rows".into()));
            }
            Ok((median_nn(tp, tp, true), Reference::Train))
        }
    }
}

/// Fraction of synthetic rows that are not closer to their nearest training
/// row than that row is to its own nearest training neighbour.
pub fn authenticity(train: &TableDataset, synth: &TableDataset, state: &PreprocessState) -> Result<f64> {
    check_schemas(train, synth)?;
    if train.n_rows() < 2 {
        return Err(Error::Argument("authenticity needs at least two training rows".into()));
    }
    if synth.n_rows() == 0 {
        return Err(Error::Argument("no synthetic rows".into()));
    }
    let tp = MixedPoints::new(train, state)?;
    Ok(authenticity_points(&tp, &MixedPoints::new(synth, state)?))
}

fn authenticity_points(tp: &MixedPoints, sp: &MixedPoints) -> f64 {
    let gaps = nearest(tp, tp, true);
    let nn = nearest(sp, tp, false);
    let authentic = nn.iter().filter(|(t, d)| *d >= gaps[*t].1).count();
    authentic as f64 / nn.len() as f64
}

/// Every metric of `synth` against the training table.
pub fn evaluate(
    train: &TableDataset,
    synth: &TableDataset,
    state: &PreprocessState,
    holdout: Option<&TableDataset>,
) -> Result<EvalReport> {
    let (shape, columns) = shape_score(train, synth)?;
    let (trend, pairs) = trend_score(train, synth)?;
    let (dcr_raw, dcr_score, reference) = dcr(train, synth, state, holdout)?;
    let authenticity = authenticity(train, synth, state)?;
    let report = EvalReport {
        shape,
        trend,
        dcr_raw,
        dcr_score,
        authenticity,
        reference,
        columns,
        pairs,
    };
    debug_assert!(report.flat().iter().all(|(_, v)| v.is_finite()));
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OverfitFlags {
    pub shape: bool,
    pub trend: bool,
    pub dcr: bool,
    pub authenticity: bool,
}

impl OverfitFlags {
    pub fn any(&self) -> bool {
        self.shape || self.trend || self.dcr || self.authenticity
    }

    pub fn all(&self) -> bool {
        self.shape && self.trend && self.dcr && self.authenticity
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverfitReport {
    pub synthetic: EvalReport,
    pub holdout: EvalReport,
    pub flags: OverfitFlags,
}

/// Scores both the synthetic and the holdout table against training data;
/// a flag is raised where the synthetic table is more train-like than the
/// holdout.
pub fn overfit_report(
    train: &TableDataset,
    holdout: &TableDataset,
    synth: &TableDataset,
    state: &PreprocessState,
) -> Result<OverfitReport> {
    let s = evaluate(train, synth, state, Some(holdout))?;
    let h = evaluate(train, holdout, state, Some(holdout))?;
    let flags = OverfitFlags {
        shape: s.shape > h.shape,
        trend: s.trend > h.trend,
        dcr: s.dcr_raw < h.dcr_raw,
        authenticity: s.authenticity < h.authenticity,
    };
    Ok(OverfitReport {
        synthetic: s,
        holdout: h,
        flags,
    })
}
