//! Brain-like phantoms: ellipsoidal tissue classes with smoothed noise,
//! hyperintense white-matter lesions, enlarged ventricles, and a matching synthetic parcellation.

use std::fs;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{save_manifest, split_dataset, DatasetManifest, Subject};
use crate::rng::{child_seed, seeded};
use crate::volume::{linear_index, minmax_scale, save_labels, save_mask, save_volume, voxel_count, Dims, LabelVolume, Mask, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Class {
    Patient,
    Control,
}

impl Class {
    pub fn label(self) -> u8 {
        match self {
            Class::Patient => 1,
            Class::Control => 0,
        }
    }
}

/// `Lesion`: patients carry white-matter lesions. `Atrophy`: patients carry
/// enlarged ventricles.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Lesion,
    Atrophy,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tissue {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LesionParams {
    /// Inclusive range of lesion counts.
    pub count: [usize; 2],
    /// Radius range in voxels.
    pub radius: [f64; 2],
    /// Probability of placing a lesion in posterior periventricular WM.
    pub periventricular_bias: f64,
    /// Added to the WM mean inside lesions.
    pub delta: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AtrophyParams {
    pub ventricle_scale: [f64; 2],
}

/// Geometry lengths are fractions of the grid extent along each axis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomParams {
    pub dims: Dims,
    pub brain_semi_axes: [f64; 3],
    /// Normalized ellipsoid radius where grey matter begins.
    pub gm_inner: f64,
    pub ventricle_semi_axes: [f64; 3],
    /// Offset of each lateral ventricle from the midline.
    pub ventricle_separation: f64,
    /// Superior offset of the ventricle centres.
    pub ventricle_lift: f64,
    /// Voxel margin around the ventricles counted as periventricular.
    pub periventricular_margin: f64,
    /// Relative jitter of the brain semi-axes per subject.
    pub shape_jitter: f64,
    pub gm: Tissue,
    pub wm: Tissue,
    pub csf: Tissue,
    pub smoothing_sigma: f64,
    pub lesion: LesionParams,
    pub control_lesion: LesionParams,
    pub atrophy: AtrophyParams,
}

impl Default for PhantomParams {
    fn default() -> Self {
        PhantomParams {
            dims: [32, 38, 32],
            brain_semi_axes: [0.42, 0.42, 0.40],
            gm_inner: 0.78,
            ventricle_semi_axes: [0.06, 0.2, 0.1],
            ventricle_separation: 0.09,
            ventricle_lift: 0.05,
            periventricular_margin: 3.0,
            shape_jitter: 0.03,
            gm: Tissue { mean: 0.6, std: 0.04 },
            wm: Tissue { mean: 0.42, std: 0.04 },
            csf: Tissue { mean: 0.12, std: 0.03 },
            smoothing_sigma: 0.7,
            lesion: LesionParams {
                count: [4, 9],
                radius: [1.2, 2.4],
                periventricular_bias: 0.7,
                delta: 0.4,
            },
            control_lesion: LesionParams {
                count: [0, 1],
                radius: [0.8, 1.2],
                periventricular_bias: 0.0,
                delta: 0.4,
            },
            atrophy: AtrophyParams {
                ventricle_scale: [1.4, 1.8],
            },
        }
    }
}

impl PhantomParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Invalid(format!("phantom parameters: {m}")));
        if self.dims.iter().any(|&d| d < 16) {
            return bad("every dimension must be at least 16");
        }
        if self.brain_semi_axes.iter().any(|&a| !(a > 0.0 && a <= 0.5)) {
            return bad("brain semi-axes must lie in (0, 0.5]");
        }
        if !(self.gm_inner > 0.0 && self.gm_inner < 1.0) {
            return bad("gm_inner must lie in (0, 1)");
        }
        if self.ventricle_semi_axes.iter().any(|&a| a <= 0.0) {
            return bad("ventricle semi-axes must be positive");
        }
        for t in [self.gm, self.wm, self.csf] {
            if !(0.0..=1.0).contains(&t.mean) || t.std < 0.0 {
                return bad("tissue means must lie in [0, 1] with nonnegative std");
            }
        }
        if self.smoothing_sigma < 0.0 || !(0.0..0.5).contains(&self.shape_jitter) {
            return bad("smoothing sigma and shape jitter out of range");
        }
        let min_brain = (0..3)
            .map(|a| self.brain_semi_axes[a] * self.dims[a] as f64)
            .fold(f64::INFINITY, f64::min);
        for (name, l) in [("lesion", &self.lesion), ("control lesion", &self.control_lesion)] {
            if l.count[0] > l.count[1] || !(l.radius[0] > 0.0 && l.radius[0] <= l.radius[1]) {
                return bad(&format!("{name} ranges must be nonempty and positive"));
            }
            if l.radius[1] >= min_brain {
                return bad(&format!("{name} radius must be smaller than the brain radius"));
            }
            if !(0.0..=1.0).contains(&l.periventricular_bias) {
                return bad(&format!("{name} periventricular bias must lie in [0, 1]"));
            }
        }
        let s = self.atrophy.ventricle_scale;
        if !(s[0] > 0.0 && s[0] <= s[1]) {
            return bad("ventricle scale range must be positive and ordered");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TissueClass {
    Background,
    Csf,
    Thalamus,
    Gm,
    Wm,
}

/// Continuous geometry of one subject, in voxel coordinates.
struct Anatomy {
    center: [f64; 3],
    brain: [f64; 3],
    gm_inner: f64,
    ventricles: [[f64; 3]; 2],
    ventricle_axes: [f64; 3],
    thalami: [[f64; 3]; 2],
    thalamus_axes: [f64; 3],
    margin: f64,
}

fn ellipsoid_radius(p: [f64; 3], c: [f64; 3], a: [f64; 3]) -> f64 {
    (0..3).map(|i| ((p[i] - c[i]) / a[i]).powi(2)).sum::<f64>().sqrt()
}

impl Anatomy {
    fn new(p: &PhantomParams, brain_scale: [f64; 3], ventricle_scale: f64) -> Self {
        let d = p.dims.map(|n| n as f64);
        let center = p.dims.map(|n| (n as f64 - 1.0) / 2.0);
        let brain = [0, 1, 2].map(|i| p.brain_semi_axes[i] * d[i] * brain_scale[i]);
        let sep = p.ventricle_separation * d[0];
        let lift = p.ventricle_lift * d[2];
        let ventricles = [-1.0, 1.0].map(|s| [center[0] + s * sep, center[1], center[2] + lift]);
        let ventricle_axes = [0, 1, 2].map(|i| p.ventricle_semi_axes[i] * d[i] * ventricle_scale);
        let thalami = [-1.0, 1.0].map(|s| [center[0] + s * 0.07 * d[0], center[1] - 0.02 * d[1], center[2] - 0.12 * d[2]]);
        let thalamus_axes = [0.06 * d[0], 0.09 * d[1], 0.08 * d[2]];
        Anatomy {
            center,
            brain,
            gm_inner: p.gm_inner,
            ventricles,
            ventricle_axes,
            thalami,
            thalamus_axes,
            margin: p.periventricular_margin,
        }
    }

    fn nominal(p: &PhantomParams) -> Self {
        Anatomy::new(p, [1.0; 3], 1.0)
    }

    fn point(x: usize, y: usize, z: usize) -> [f64; 3] {
        [x as f64, y as f64, z as f64]
    }

    fn brain_radius(&self, q: [f64; 3]) -> f64 {
        ellipsoid_radius(q, self.center, self.brain)
    }

    fn ventricle_side(&self, q: [f64; 3]) -> Option<usize> {
        (0..2).find(|&i| ellipsoid_radius(q, self.ventricles[i], self.ventricle_axes) <= 1.0)
    }

    fn periventricular(&self, q: [f64; 3]) -> bool {
        let inflated = self.ventricle_axes.map(|a| a + self.margin);
        (0..2).any(|i| ellipsoid_radius(q, self.ventricles[i], inflated) <= 1.0)
    }

    fn tissue(&self, q: [f64; 3]) -> TissueClass {
        let rho = self.brain_radius(q);
        if rho > 1.0 {
            TissueClass::Background
        } else if self.ventricle_side(q).is_some() {
            TissueClass::Csf
        } else if (0..2).any(|i| ellipsoid_radius(q, self.thalami[i], self.thalamus_axes) <= 1.0) {
            TissueClass::Thalamus
        } else if rho > self.gm_inner {
            TissueClass::Gm
        } else {
            TissueClass::Wm
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian blur with zero padding.
fn smooth(data: &[f64], dims: Dims, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let stride = [1, dims[0], dims[0] * dims[1]];
    let mut cur = data.to_vec();
    for axis in 0..3 {
        let mut next = vec![0.0; cur.len()];
        for (i, out) in next.iter_mut().enumerate() {
            let pos = (i / stride[axis] % dims[axis]) as i64;
            let mut acc = 0.0;
            for (t, w) in k.iter().enumerate() {
                let q = pos + t as i64 - r;
                if q >= 0 && q < dims[axis] as i64 {
                    acc += w * cur[(i as i64 + (q - pos) * stride[axis] as i64) as usize];
                }
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

/// Standard deviation of unit white noise after `smooth`, away from borders.
fn noise_gain(sigma: f64) -> f64 {
    if sigma <= 0.0 {
        return 1.0;
    }
    gaussian_kernel(sigma).iter().map(|w| w * w).sum::<f64>().powf(1.5)
}

fn uniform<R: Rng>(rng: &mut R, range: [f64; 2]) -> f64 {
    if range[0] == range[1] {
        range[0]
    } else {
        rng.random_range(range[0]..range[1])
    }
}

fn place_lesions<R: Rng>(
    rng: &mut R,
    anatomy: &Anatomy,
    dims: Dims,
    wm: &Mask,
    l: &LesionParams,
) -> Result<Mask> {
    let mut lesions = Mask::empty(dims);
    let count = rng.random_range(l.count[0]..=l.count[1]);
    if count == 0 {
        return Ok(lesions);
    }
    let all: Vec<usize> = (0..voxel_count(dims)).filter(|&i| wm.contains(i)).collect();
    if all.is_empty() {
        return Err(Error::Invalid("no white matter available for lesion placement".into()));
    }
    let posterior_pv: Vec<usize> = all
        .iter()
        .copied()
        .filter(|&i| {
            let q = Anatomy::point(i % dims[0], i / dims[0] % dims[1], i / (dims[0] * dims[1]));
            q[1] < anatomy.center[1] && anatomy.periventricular(q)
        })
        .collect();
    for _ in 0..count {
        let biased = rng.random_bool(l.periventricular_bias);
        let pool = if biased && !posterior_pv.is_empty() { &posterior_pv } else { &all };
        let c = *pool.choose(rng).expect("nonempty pool");
        let radius = uniform(rng, l.radius);
        let cc = [c % dims[0], c / dims[0] % dims[1], c / (dims[0] * dims[1])];
        let r = radius.ceil() as i64;
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if ((dx * dx + dy * dy + dz * dz) as f64) > radius * radius {
                        continue;
                    }
                    let p = [cc[0] as i64 + dx, cc[1] as i64 + dy, cc[2] as i64 + dz];
                    if (0..3).any(|a| p[a] < 0 || p[a] >= dims[a] as i64) {
                        continue;
                    }
                    let i = linear_index(dims, p[0] as usize, p[1] as usize, p[2] as usize);
                    if wm.contains(i) {
                        lesions.set(i, true);
                    }
                }
            }
        }
    }
    Ok(lesions)
}

/// Generates one phantom: the min-max scaled image, its lesion mask and its
/// white-matter mask. Lesion voxels lie inside the white-matter mask.
pub fn generate_subject(class: Class, regime: Regime, p: &PhantomParams, seed: u64) -> Result<(Volume, Mask, Mask)> {
    p.validate()?;
    let mut rng = seeded(seed);
    let dims = p.dims;
    let brain_scale = [(); 3].map(|_| 1.0 + uniform(&mut rng, [-p.shape_jitter, p.shape_jitter]));
    let ventricle_scale = match (regime, class) {
        (Regime::Atrophy, Class::Patient) => uniform(&mut rng, p.atrophy.ventricle_scale),
        _ => 1.0,
    };
    let anatomy = Anatomy::new(p, brain_scale, ventricle_scale);
    let n = voxel_count(dims);
    let mut tissue = Vec::with_capacity(n);
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                tissue.push(anatomy.tissue(Anatomy::point(x, y, z)));
            }
        }
    }
    let wm = Mask::new(dims, tissue.iter().map(|&t| (t == TissueClass::Wm) as u8).collect())?;
    let lesion_params = match (regime, class) {
        (Regime::Lesion, Class::Patient) => &p.lesion,
        _ => &p.control_lesion,
    };
    let lesions = place_lesions(&mut rng, &anatomy, dims, &wm, lesion_params)?;

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let white: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
    let noise = smooth(&white, dims, p.smoothing_sigma);
    let gain = noise_gain(p.smoothing_sigma);
    let mut raw = vec![0.0; n];
    for (i, t) in tissue.iter().enumerate() {
        let tissue = match t {
            TissueClass::Background => continue,
            TissueClass::Csf => p.csf,
            TissueClass::Gm | TissueClass::Thalamus => p.gm,
            TissueClass::Wm => p.wm,
        };
        let mut mean = tissue.mean;
        if lesions.contains(i) {
            mean += lesion_params.delta;
        }
        raw[i] = (mean + tissue.std * noise[i] / gain).max(0.0);
    }
    let image = Volume::new(dims, raw.into_iter().map(|v| v as f32).collect())?;
    Ok((minmax_scale(&image), lesions, wm))
}

/// Writes `2 * n_per_class` subjects (patients and controls alternating)
/// plus `manifest.json` under `out_dir`. Subject `k` uses
/// `child_seed(seed, k)`; the holdout split uses `child_seed(seed, u64::MAX)`.
pub fn generate_dataset(
    n_per_class: usize,
    regime: Regime,
    p: &PhantomParams,
    holdout_fraction: f64,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    if n_per_class == 0 {
        return Err(Error::Invalid("n_per_class must be positive".into()));
    }
    p.validate()?;
    let out = out_dir.as_ref();
    for sub in ["images", "lesions", "wm"] {
        fs::create_dir_all(out.join(sub)).map_err(|e| Error::io(out.join(sub), e))?;
    }
    let mut subjects = Vec::with_capacity(2 * n_per_class);
    for k in 0..2 * n_per_class {
        let class = if k % 2 == 0 { Class::Patient } else { Class::Control };
        let id = format!("{}_{:04}", if class == Class::Patient { "patient" } else { "control" }, k / 2);
        let (image, lesions, wm) = generate_subject(class, regime, p, child_seed(seed, k as u64))?;
        let mut s = Subject::new(&id, format!("images/{id}.vvol"), class.label());
        s.lesion_mask_path = Some(format!("lesions/{id}.vvol"));
        s.wm_mask_path = Some(format!("wm/{id}.vvol"));
        save_volume(&image, out.join(&s.image_path))?;
        save_mask(&lesions, out.join(s.lesion_mask_path.as_ref().unwrap()))?;
        save_mask(&wm, out.join(s.wm_mask_path.as_ref().unwrap()))?;
        subjects.push(s);
    }
    let name = match regime {
        Regime::Lesion => "lesion",
        Regime::Atrophy => "atrophy",
    };
    let m = DatasetManifest::in_memory(name, p.dims, seed, subjects);
    let mut m = split_dataset(&m, holdout_fraction, child_seed(seed, u64::MAX))?;
    m.root = out.to_path_buf();
    save_manifest(&m, out.join("manifest.json"))?;
    Ok(m)
}

/// Label volume with named regions; label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct Parcellation {
    labels: LabelVolume,
    names: Vec<(u16, String)>,
}

#[derive(Serialize, Deserialize)]
struct NameEntry {
    label: u16,
    name: String,
}

impl Parcellation {
    pub fn new(labels: LabelVolume, names: Vec<(u16, String)>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for (l, n) in &names {
            if *l == 0 || !seen.insert(*l) || n.is_empty() {
                return Err(Error::Invalid(format!("bad region entry {l} {n:?}")));
            }
        }
        if let Some(&l) = labels.data().iter().find(|&&l| l != 0 && !seen.contains(&l)) {
            return Err(Error::Invalid(format!("label {l} has no name")));
        }
        Ok(Parcellation { labels, names })
    }

    pub fn labels(&self) -> &LabelVolume {
        &self.labels
    }

    pub fn names(&self) -> &[(u16, String)] {
        &self.names
    }

    pub fn name(&self, label: u16) -> Option<&str> {
        self.names.iter().find(|(l, _)| *l == label).map(|(_, n)| n.as_str())
    }

    pub fn label_of(&self, name: &str) -> Option<u16> {
        self.names.iter().find(|(_, n)| n == name).map(|(l, _)| *l)
    }

    pub fn region_mask(&self, label: u16) -> Mask {
        let dims = self.labels.dims();
        Mask::new(dims, self.labels.data().iter().map(|&l| (l == label) as u8).collect()).expect("same length")
    }

    /// Writes `<stem>.vvol` and `<stem>.json`.
    pub fn save(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        save_labels(&self.labels, dir.join(format!("{stem}.vvol")))?;
        let entries: Vec<NameEntry> = self.names.iter().map(|(l, n)| NameEntry { label: *l, name: n.clone() }).collect();
        let path = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&entries)?;
        fs::write(&path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Reads `<path>` as a label VVOL and the name table beside it (same stem, `.json`).
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let labels = crate::volume::load_labels(path)?;
        let names_path = path.with_extension("json");
        let text = fs::read_to_string(&names_path).map_err(|e| Error::io(&names_path, e))?;
        let entries: Vec<NameEntry> = serde_json::from_str(&text)?;
        Parcellation::new(labels, entries.into_iter().map(|e| (e.label, e.name)).collect())
    }
}

/// Partitions the nominal brain of `p` into named regions.
pub fn generate_parcellation(p: &PhantomParams) -> Result<Parcellation> {
    p.validate()?;
    let a = Anatomy::nominal(p);
    let dims = p.dims;
    let mut names: Vec<String> = vec!["ventricles".into(), "corpus_callosum".into()];
    for side in ["left", "right"] {
        for base in [
            "thalamus",
            "periventricular_posterior_wm",
            "periventricular_anterior_wm",
            "deep_wm",
            "gm_shell_frontal",
            "gm_shell_parietal",
            "gm_shell_temporal",
            "gm_shell_occipital",
        ] {
            names.push(format!("{base}_{side}"));
        }
    }
    let label_of = |n: &str| names.iter().position(|m| m == n).unwrap() as u16 + 1;
    let mut data = Vec::with_capacity(voxel_count(dims));
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let q = Anatomy::point(x, y, z);
                let side = if q[0] < a.center[0] { "left" } else { "right" };
                let rel = [0, 1, 2].map(|i| (q[i] - a.center[i]) / a.brain[i]);
                let label = match a.tissue(q) {
                    TissueClass::Background => 0,
                    TissueClass::Csf => label_of("ventricles"),
                    TissueClass::Thalamus => label_of(&format!("thalamus_{side}")),
                    TissueClass::Gm => {
                        let lobe = if rel[1] > 0.25 {
                            "frontal"
                        } else if rel[1] < -0.4 {
                            "occipital"
                        } else if rel[2] < -0.1 {
                            "temporal"
                        } else {
                            "parietal"
                        };
                        label_of(&format!("gm_shell_{lobe}_{side}"))
                    }
                    TissueClass::Wm => {
                        if (q[0] - a.center[0]).abs() < 1.0 && q[2] > a.ventricles[0][2] {
                            label_of("corpus_callosum")
                        } else if a.periventricular(q) {
                            let part = if q[1] < a.center[1] { "posterior" } else { "anterior" };
                            label_of(&format!("periventricular_{part}_wm_{side}"))
                        } else {
                            label_of(&format!("deep_wm_{side}"))
                        }
                    }
                };
                data.push(label);
            }
        }
    }
    let labels = LabelVolume::new(dims, data)?;
    let names = names.into_iter().enumerate().map(|(i, n)| (i as u16 + 1, n)).collect();
    Parcellation::new(labels, names)
}
