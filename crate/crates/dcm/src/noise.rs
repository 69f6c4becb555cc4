//! Synthetic label-noise generators.
//!
//! All three corruption protocols draw one decision per sample from a
//! counter-based generator, so the output depends only on (labels, spec,
//! seed) and never on iteration order. Symmetric noise flips to a uniformly
//! chosen *other* class; the asymmetric variants flip along a fixed
//! class-pair map or circularly inside ordered class groups.

use std::collections::BTreeMap;
use std::str::FromStr;

use crate::error::{DcmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Symmetric,
    AsymmetricPairs,
    AsymmetricCircular,
}

impl NoiseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            NoiseKind::Symmetric => "symmetric",
            NoiseKind::AsymmetricPairs => "asymmetric_pairs",
            NoiseKind::AsymmetricCircular => "asymmetric_circular",
        }
    }
}

impl FromStr for NoiseKind {
    type Err = DcmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(NoiseKind::Symmetric),
            "asymmetric_pairs" => Ok(NoiseKind::AsymmetricPairs),
            "asymmetric_circular" => Ok(NoiseKind::AsymmetricCircular),
            other => Err(DcmError::InvalidParameter(format!(
                "unknown noise kind `{other}`"
            ))),
        }
    }
}

/// Complete description of a corruption protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub pair_map: BTreeMap<usize, usize>,
    pub groups: Vec<Vec<usize>>,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn symmetric(rate: f64, seed: u64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Symmetric,
            rate,
            pair_map: BTreeMap::new(),
            groups: Vec::new(),
            seed,
        }
    }

    pub fn apply(&self, labels: &[usize], classes: usize) -> Result<(Vec<usize>, Vec<bool>)> {
        match self.kind {
            NoiseKind::Symmetric => corrupt_symmetric(labels, classes, self.rate, self.seed),
            NoiseKind::AsymmetricPairs => {
                corrupt_asymmetric_pairs(labels, classes, &self.pair_map, self.rate, self.seed)
            }
            NoiseKind::AsymmetricCircular => {
                corrupt_asymmetric_circular(labels, classes, &self.groups, self.rate, self.seed)
            }
        }
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Hash several stream identifiers into one derived seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut acc = 0x51_7C_C1_B7_27_22_0A_95;
    for &p in parts {
        acc = splitmix64(acc ^ splitmix64(p));
    }
    acc
}

/// Counter-based uniform draw in [0, 1): a pure function of (seed, index,
/// slot), independent of call order.
pub fn counter_uniform(seed: u64, index: u64, slot: u64) -> f64 {
    let h = splitmix64(seed ^ splitmix64(index ^ splitmix64(slot.wrapping_add(0xA5A5_A5A5))));
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

fn check_rate(rate: f64) -> Result<()> {
    if !(rate > 0.0 && rate < 1.0) {
        return Err(DcmError::InvalidParameter(format!(
            "noise rate must lie strictly inside (0, 1), got {rate}"
        )));
    }
    Ok(())
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(DcmError::InvalidLabels(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    Ok(())
}

/// Flip each label with probability `rate` to a class drawn uniformly from
/// the other C-1 classes. A flipped label never equals the original.
pub fn corrupt_symmetric(
    labels: &[usize],
    classes: usize,
    rate: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<bool>)> {
    if classes < 2 {
        return Err(DcmError::InvalidParameter(format!(
            "symmetric noise needs at least 2 classes, got {classes}"
        )));
    }
    check_rate(rate)?;
    check_labels(labels, classes)?;
    let mut noisy = Vec::with_capacity(labels.len());
    let mut flipped = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let flip = counter_uniform(seed, i as u64, 0) < rate;
        if flip {
            let draw = counter_uniform(seed, i as u64, 1);
            let mut target = (draw * (classes - 1) as f64) as usize;
            if target >= classes - 1 {
                target = classes - 2; // guards draw == 1.0 - ulp edge
            }
            if target >= y {
                target += 1;
            }
            noisy.push(target);
            flipped.push(true);
        } else {
            noisy.push(y);
            flipped.push(false);
        }
    }
    Ok((noisy, flipped))
}

/// Flip labels whose class is a pair-map source to the mapped target with
/// probability `rate`; all other labels pass through unchanged.
pub fn corrupt_asymmetric_pairs(
    labels: &[usize],
    classes: usize,
    pair_map: &BTreeMap<usize, usize>,
    rate: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<bool>)> {
    check_rate(rate)?;
    check_labels(labels, classes)?;
    for (&src, &dst) in pair_map {
        if src >= classes || dst >= classes {
            return Err(DcmError::InvalidParameter(format!(
                "pair map entry {src} -> {dst} references a class outside 0..{classes}"
            )));
        }
    }
    let mut noisy = Vec::with_capacity(labels.len());
    let mut flipped = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let target = match pair_map.get(&y) {
            Some(&dst) if counter_uniform(seed, i as u64, 0) < rate => dst,
            _ => y,
        };
        noisy.push(target);
        flipped.push(target != y);
    }
    Ok((noisy, flipped))
}

/// With probability `rate`, move each label to its successor inside its
/// ordered group, wrapping from the last group member to the first.
pub fn corrupt_asymmetric_circular(
    labels: &[usize],
    classes: usize,
    groups: &[Vec<usize>],
    rate: f64,
    seed: u64,
) -> Result<(Vec<usize>, Vec<bool>)> {
    check_rate(rate)?;
    check_labels(labels, classes)?;
    let mut successor = vec![usize::MAX; classes];
    for group in groups {
        if group.is_empty() {
            return Err(DcmError::InvalidParameter("empty noise group".into()));
        }
        for (pos, &c) in group.iter().enumerate() {
            if c >= classes {
                return Err(DcmError::InvalidParameter(format!(
                    "group class {c} out of range for {classes} classes"
                )));
            }
            if successor[c] != usize::MAX {
                return Err(DcmError::InvalidParameter(format!(
                    "class {c} appears in more than one noise group"
                )));
            }
            successor[c] = group[(pos + 1) % group.len()];
        }
    }
    if let Some(missing) = successor.iter().position(|&s| s == usize::MAX) {
        return Err(DcmError::InvalidParameter(format!(
            "noise groups do not cover class {missing}"
        )));
    }
    let mut noisy = Vec::with_capacity(labels.len());
    let mut flipped = Vec::with_capacity(labels.len());
    for (i, &y) in labels.iter().enumerate() {
        let target = if counter_uniform(seed, i as u64, 0) < rate {
            successor[y]
        } else {
            y
        };
        noisy.push(target);
        flipped.push(target != y);
    }
    Ok((noisy, flipped))
}

/// The CIFAR-10 pair-flip table, verbatim: BIRD -> BIRD, CAT -> DOG,
/// DEER -> HORSE, TRUCK -> AUTOMOBILE. The bird self-map is kept as printed;
/// experiments may override it.
pub fn cifar10_pair_map() -> BTreeMap<usize, usize> {
    BTreeMap::from([(2, 2), (3, 5), (4, 7), (9, 1)])
}

/// Partition `0..classes` into consecutive ordered groups of `group_size`
/// (the last group may be smaller when sizes do not divide evenly).
pub fn consecutive_groups(classes: usize, group_size: usize) -> Result<Vec<Vec<usize>>> {
    if group_size == 0 {
        return Err(DcmError::InvalidParameter(
            "noise group size must be positive".into(),
        ));
    }
    Ok((0..classes)
        .collect::<Vec<_>>()
        .chunks(group_size)
        .map(|c| c.to_vec())
        .collect())
}
