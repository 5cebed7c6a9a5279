//! Classification metrics, ROC analysis, region-wise relevance tables and
//! the lesion-load baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{relevance_sum, Heatmap};
use crate::preprocess::{DatasetManifest, Split};
use crate::synth::Parcellation;

/// Probabilities at or above this count as patient predictions.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fn_: usize,
    pub tn: usize,
    pub fp: usize,
}

impl Confusion {
    pub fn from_scores(scores: &[f64], labels: &[u8]) -> Self {
        let mut c = Confusion::default();
        for (&s, &y) in scores.iter().zip(labels) {
            match (y == 1, s >= THRESHOLD) {
                (true, true) => c.tp += 1,
                (true, false) => c.fn_ += 1,
                (false, false) => c.tn += 1,
                (false, true) => c.fp += 1,
            }
        }
        c
    }

    pub fn metrics(&self) -> ClassificationMetrics {
        let ratio = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
        let sensitivity = ratio(self.tp, self.tp + self.fn_);
        let specificity = ratio(self.tn, self.tn + self.fp);
        let balanced_accuracy = match (sensitivity, specificity) {
            (Some(a), Some(b)) => Some((a + b) / 2.0),
            _ => None,
        };
        let n = self.tp + self.fn_ + self.tn + self.fp;
        ClassificationMetrics {
            sensitivity,
            specificity,
            balanced_accuracy,
            accuracy: ratio(self.tp + self.tn, n).unwrap_or(0.0),
        }
    }
}

/// Fractions in `[0, 1]`. Class-conditional rates are absent when the
/// corresponding class is missing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassificationMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    pub accuracy: f64,
}

/// Metrics at the 0.5 probability threshold.
pub fn classification_metrics(scores: &[f64], labels: &[u8]) -> Result<ClassificationMetrics> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    Ok(Confusion::from_scores(scores, labels).metrics())
}

/// Rounds a fraction to a percentage with `decimals` places, half-up.
pub fn percent_half_up(fraction: f64, decimals: i32) -> f64 {
    let scale = 10f64.powi(decimals);
    ((fraction * 100.0 * scale) + 0.5 + 1e-9).floor() / scale
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    /// Predictions `>= threshold` are positive; the first point uses +inf.
    pub threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub auc: f64,
    pub points: Vec<RocPoint>,
}

impl RocCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("fpr,tpr,threshold\n");
        for p in &self.points {
            s.push_str(&format!("{:.8},{:.8},{}\n", p.fpr, p.tpr, p.threshold));
        }
        s
    }
}

/// ROC over every distinct score threshold and its trapezoidal AUC; tied
/// scores move the curve diagonally, which counts ties as one half.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Shape(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let pos = labels.iter().filter(|&&y| y == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Invalid("ROC analysis needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Invalid("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut k = 0;
    while k < order.len() {
        let t = scores[order[k]];
        while k < order.len() && scores[order[k]] == t {
            if labels[order[k]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let prev = *points.last().unwrap();
        let p = RocPoint {
            fpr: fp as f64 / neg as f64,
            tpr: tp as f64 / pos as f64,
            threshold: t,
        };
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { auc, points })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub label: u16,
    pub name: String,
    pub sum: f64,
    pub mean: f64,
    pub voxels: usize,
}

/// Signed relevance per parcellation region; label 0 is kept apart as
/// background. Regions with no voxels are omitted.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionTable {
    pub regions: Vec<RegionStats>,
    pub background: RegionStats,
}

impl RegionTable {
    pub fn total(&self) -> f64 {
        self.regions.iter().map(|r| r.sum).sum::<f64>() + self.background.sum
    }

    pub fn get(&self, name: &str) -> Option<&RegionStats> {
        self.regions.iter().find(|r| r.name == name)
    }
}

pub fn region_relevance(h: &Heatmap, parc: &Parcellation) -> Result<RegionTable> {
    let labels = parc.labels();
    if h.dims() != labels.dims() {
        return Err(Error::Shape(format!("heatmap {:?} vs parcellation {:?}", h.dims(), labels.dims())));
    }
    let mut acc: BTreeMap<u16, (f64, usize)> = BTreeMap::new();
    for (&l, &v) in labels.data().iter().zip(h.data()) {
        let e = acc.entry(l).or_insert((0.0, 0));
        e.0 += v as f64;
        e.1 += 1;
    }
    let stats = |label: u16, (sum, voxels): (f64, usize)| RegionStats {
        label,
        name: parc.name(label).unwrap_or("background").to_string(),
        sum,
        mean: if voxels > 0 { sum / voxels as f64 } else { 0.0 },
        voxels,
    };
    let background = stats(0, acc.remove(&0).unwrap_or((0.0, 0)));
    let regions = acc.into_iter().map(|(l, s)| stats(l, s)).collect();
    Ok(RegionTable { regions, background })
}

pub fn region_csv(rows: &[(&str, &RegionTable)]) -> String {
    let mut s = String::from("class,region,sum,mean,voxels\n");
    for (class, table) in rows {
        for r in table.regions.iter().chain(std::iter::once(&table.background)) {
            s.push_str(&format!("{class},{},{:.9e},{:.9e},{}\n", r.name, r.sum, r.mean, r.voxels));
        }
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedRegion {
    pub name: String,
    pub mean_patient: f64,
    pub mean_control: f64,
    pub key: f64,
}

/// Regions ranked by `|mean_patient| + |mean_control|`, descending, ties
/// by name; at most `k` entries.
pub fn top_regions(patients: &RegionTable, controls: &RegionTable, k: usize) -> Result<Vec<RankedRegion>> {
    fn names(t: &RegionTable) -> Vec<&str> {
        let mut v: Vec<&str> = t.regions.iter().map(|r| r.name.as_str()).collect();
        v.sort_unstable();
        v
    }
    if names(patients) != names(controls) {
        return Err(Error::Invalid("patient and control tables cover different regions".into()));
    }
    let mut ranked: Vec<RankedRegion> = patients
        .regions
        .iter()
        .map(|p| {
            let c = controls.get(&p.name).expect("same region set");
            RankedRegion {
                name: p.name.clone(),
                mean_patient: p.mean,
                mean_control: c.mean,
                key: p.mean.abs() + c.mean.abs(),
            }
        })
        .collect();
    ranked.sort_by(|a, b| b.key.partial_cmp(&a.key).unwrap().then_with(|| a.name.cmp(&b.name)));
    ranked.truncate(k);
    Ok(ranked)
}

pub fn ranking_csv(ranked: &[RankedRegion]) -> String {
    let mut s = String::from("rank,region,mean_patient,mean_control,key\n");
    for (i, r) in ranked.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{:.9e},{:.9e},{:.9e}\n",
            i + 1,
            r.name,
            r.mean_patient,
            r.mean_control,
            r.key
        ));
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SumStats {
    pub n: usize,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
}

/// Mean and standard deviation of per-heatmap relevance sums for each group.
pub fn class_relevance_summary(groups: &[(&str, &[Heatmap])]) -> Result<Vec<(String, SumStats)>> {
    groups
        .iter()
        .map(|(name, hs)| {
            if hs.is_empty() {
                return Err(Error::Invalid(format!("class {name} has no heatmaps")));
            }
            let sums: Vec<f64> = hs.iter().map(relevance_sum).collect();
            let mean = sums.iter().sum::<f64>() / sums.len() as f64;
            let var = sums.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / sums.len() as f64;
            Ok((
                name.to_string(),
                SumStats {
                    n: sums.len(),
                    mean,
                    std: var.sqrt(),
                },
            ))
        })
        .collect()
}

/// Single-feature logistic regression on lesion volume.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionLoadModel {
    pub center: f64,
    pub scale: f64,
    pub weight: f64,
    pub bias: f64,
}

impl LesionLoadModel {
    /// Batch gradient descent on the standardized feature.
    pub fn fit(volumes: &[f64], labels: &[u8]) -> Result<Self> {
        if volumes.is_empty() || volumes.len() != labels.len() {
            return Err(Error::Invalid("lesion-load baseline needs matching, nonempty inputs".into()));
        }
        let n = volumes.len() as f64;
        let center = volumes.iter().sum::<f64>() / n;
        let sd = (volumes.iter().map(|v| (v - center).powi(2)).sum::<f64>() / n).sqrt();
        let scale = if sd > 0.0 { sd } else { 1.0 };
        let xs: Vec<f64> = volumes.iter().map(|v| (v - center) / scale).collect();
        let (mut w, mut b) = (0.0, 0.0);
        for _ in 0..5000 {
            let (mut gw, mut gb) = (0.0, 0.0);
            for (&x, &y) in xs.iter().zip(labels) {
                let p = crate::nn::sigmoid(w * x + b);
                gw += (p - y as f64) * x;
                gb += p - y as f64;
            }
            w -= 0.5 * gw / n;
            b -= 0.5 * gb / n;
        }
        Ok(LesionLoadModel {
            center,
            scale,
            weight: w,
            bias: b,
        })
    }

    pub fn predict(&self, volume: f64) -> f64 {
        crate::nn::sigmoid(self.weight * (volume - self.center) / self.scale + self.bias)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineReport {
    pub model: LesionLoadModel,
    pub metrics: ClassificationMetrics,
    pub auc: f64,
}

/// Fits on `(lesion volume, label)` pairs from `train` and scores `holdout`.
pub fn lesion_load_baseline(train: &[(f64, u8)], holdout: &[(f64, u8)]) -> Result<BaselineReport> {
    let (xs, ys): (Vec<f64>, Vec<u8>) = train.iter().copied().unzip();
    let model = LesionLoadModel::fit(&xs, &ys)?;
    let (hx, hy): (Vec<f64>, Vec<u8>) = holdout.iter().copied().unzip();
    let scores: Vec<f64> = hx.iter().map(|&v| model.predict(v)).collect();
    Ok(BaselineReport {
        model,
        metrics: classification_metrics(&scores, &hy)?,
        auc: roc_auc(&scores, &hy)?.auc,
    })
}

/// Lesion volume (mask voxel count times `voxel_volume`) for each subject
/// of a split; every subject needs a lesion mask.
pub fn lesion_volumes(m: &DatasetManifest, split: Split, voxel_volume: f64) -> Result<Vec<(f64, u8)>> {
    m.subjects_in(Some(split))
        .map(|s| {
            let mask = m
                .load_lesion_mask(s)?
                .ok_or_else(|| Error::Manifest(format!("subject {} has no lesion mask", s.id)))?;
            Ok((mask.count() as f64 * voxel_volume, s.label))
        })
        .collect()
}
