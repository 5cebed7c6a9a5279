//! Dataset manifests, stratified splitting and lesion filling.

mod fill;
mod manifest;

pub use fill::{fill_lesions, FillParams};
pub use manifest::{load_manifest, save_manifest, DatasetManifest, Metadata, Split, Subject};

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::seeded;

/// Stratified random holdout selection. Returns one flag per entry
/// (`true` = held out).
///
/// The holdout size is `round_half_up(n * fraction)`. Each class first gets
/// `floor(n_class * fraction)`; the remaining slots go to the classes with
/// the largest fractional remainders, ties to the lower label.
pub fn stratified_holdout(labels: &[u8], fraction: f64, seed: u64) -> Result<Vec<bool>> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::Invalid(format!("holdout fraction {fraction} outside [0, 1)")));
    }
    let mut flags = vec![false; labels.len()];
    if fraction == 0.0 {
        return Ok(flags);
    }
    let mut classes: Vec<u8> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let members: Vec<Vec<usize>> = classes
        .iter()
        .map(|&c| (0..labels.len()).filter(|&i| labels[i] == c).collect())
        .collect();
    if let Some((c, m)) = classes.iter().zip(&members).find(|(_, m)| m.len() < 2) {
        return Err(Error::Invalid(format!(
            "class {c} has {} subject(s); stratified splitting needs at least 2",
            m.len()
        )));
    }
    const TOL: f64 = 1e-9;
    let total = (labels.len() as f64 * fraction + 0.5 + TOL).floor() as usize;
    let exact: Vec<f64> = members.iter().map(|m| m.len() as f64 * fraction).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + TOL).floor() as usize).collect();
    let mut by_remainder: Vec<usize> = (0..classes.len()).collect();
    by_remainder.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut missing = total.saturating_sub(counts.iter().sum());
    for &k in by_remainder.iter().cycle().take(classes.len() * 2) {
        if missing == 0 {
            break;
        }
        if counts[k] + 1 < members[k].len() {
            counts[k] += 1;
            missing -= 1;
        }
    }
    let mut rng = seeded(seed);
    for (m, &k) in members.iter().zip(&counts) {
        let mut idx = m.clone();
        idx.shuffle(&mut rng);
        for &i in idx.iter().take(k) {
            flags[i] = true;
        }
    }
    Ok(flags)
}

/// Reassigns every subject to train or holdout with a stratified split.
pub fn split_dataset(m: &DatasetManifest, holdout_fraction: f64, seed: u64) -> Result<DatasetManifest> {
    let labels: Vec<u8> = m.subjects.iter().map(|s| s.label).collect();
    if holdout_fraction > 0.0 && (!labels.contains(&0) || !labels.contains(&1)) {
        return Err(Error::Invalid("both classes must be present to split".into()));
    }
    let flags = stratified_holdout(&labels, holdout_fraction, seed)?;
    let mut out = m.clone();
    for (s, &h) in out.subjects.iter_mut().zip(&flags) {
        s.split = if h { Split::Holdout } else { Split::Train };
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    fn labels(pos: usize, neg: usize) -> Vec<u8> {
        let mut l = vec![1u8; pos];
        l.extend(vec![0u8; neg]);
        l
    }

    #[test]
    fn hundred_subjects_split_eight_and_seven() {
        let l = labels(50, 50);
        let flags = stratified_holdout(&l, 0.15, 4).unwrap();
        let pos = (0..100).filter(|&i| flags[i] && l[i] == 1).count();
        let neg = (0..100).filter(|&i| flags[i] && l[i] == 0).count();
        assert_eq!(pos + neg, 15);
        let mut got = [pos, neg];
        got.sort();
        assert_eq!(got, [7, 8]);
    }

    #[test]
    fn per_class_counts_follow_rounding_rule() {
        // 76 * 0.15 = 11.4, 71 * 0.15 = 10.65, total round(22.05) = 22
        let l = labels(76, 71);
        let flags = stratified_holdout(&l, 0.15, 0).unwrap();
        let pos = (0..l.len()).filter(|&i| flags[i] && l[i] == 1).count();
        let neg = (0..l.len()).filter(|&i| flags[i] && l[i] == 0).count();
        assert_eq!((pos, neg), (11, 11));
    }

    #[test]
    fn deterministic_and_zero_fraction() {
        let l = labels(20, 13);
        assert_eq!(stratified_holdout(&l, 0.3, 9).unwrap(), stratified_holdout(&l, 0.3, 9).unwrap());
        assert_ne!(stratified_holdout(&l, 0.3, 9).unwrap(), stratified_holdout(&l, 0.3, 10).unwrap());
        assert!(stratified_holdout(&l, 0.0, 1).unwrap().iter().all(|h| !h));
        assert!(stratified_holdout(&labels(1, 10), 0.2, 0).is_err());
    }

    #[test]
    fn split_manifest_has_no_overlap() {
        let m = DatasetManifest::in_memory(
            "t",
            [4, 4, 4],
            1,
            (0..30).map(|i| Subject::new(format!("s{i:02}"), format!("s{i:02}.vvol"), (i % 3 == 0) as u8)).collect(),
        );
        let out = split_dataset(&m, 0.15, 2).unwrap();
        let hold: HashSet<_> = out.subjects.iter().filter(|s| s.split == Split::Holdout).map(|s| &s.id).collect();
        let train: HashSet<_> = out.subjects.iter().filter(|s| s.split == Split::Train).map(|s| &s.id).collect();
        assert!(hold.is_disjoint(&train));
        assert_eq!(hold.len() + train.len(), 30);
        assert_eq!(hold.len(), 5);
    }
}
