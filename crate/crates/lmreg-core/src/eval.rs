//! Registration quality metrics: per-label Dice overlap, non-positive
//! Jacobian (fold) fraction, and inference timing, emitted as a flat
//! key/value report.
//!
//! Report schema (tab-separated `key<TAB>value` lines, keys sorted):
//! `mean_dice`, `pct_nonpos_jacobian`, `register_time_ms`, and one
//! `dice_label_<n>` entry per non-background label present in the fixed map.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::volume::{DisplacementField, LabelVolume, VolumeGeometry};
use crate::warp::{self, WarpError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("geometry mismatch: {a:?} vs {b:?}")]
    GeometryMismatch { a: VolumeGeometry, b: VolumeGeometry },
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error("malformed report line: {0:?}")]
    MalformedReport(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// Dice per non-background label present in the fixed map.
    pub dice_per_label: BTreeMap<u32, f64>,
    /// Unweighted mean over those labels.
    pub mean_dice: f64,
    /// Percent of voxels with non-positive Jacobian determinant.
    pub pct_nonpos_jacobian: f64,
    /// Inference time; 0 when evaluating a precomputed field.
    pub register_time_ms: f64,
}

impl EvalReport {
    /// Flat key/value text form.
    pub fn to_text(&self) -> String {
        let mut lines = vec![
            format!("mean_dice\t{}", self.mean_dice),
            format!("pct_nonpos_jacobian\t{}", self.pct_nonpos_jacobian),
            format!("register_time_ms\t{}", self.register_time_ms),
        ];
        for (label, dice) in &self.dice_per_label {
            lines.push(format!("dice_label_{label}\t{dice}"));
        }
        lines.sort();
        lines.join("\n") + "\n"
    }

    pub fn from_text(text: &str) -> Result<Self, EvalError> {
        let mut dice_per_label = BTreeMap::new();
        let mut mean_dice = 0.0;
        let mut pct = 0.0;
        let mut time = 0.0;
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (key, value) = line
                .split_once('\t')
                .ok_or_else(|| EvalError::MalformedReport(line.to_string()))?;
            let value: f64 = value
                .parse()
                .map_err(|_| EvalError::MalformedReport(line.to_string()))?;
            if let Some(label) = key.strip_prefix("dice_label_") {
                let label: u32 = label
                    .parse()
                    .map_err(|_| EvalError::MalformedReport(line.to_string()))?;
                dice_per_label.insert(label, value);
            } else {
                match key {
                    "mean_dice" => mean_dice = value,
                    "pct_nonpos_jacobian" => pct = value,
                    "register_time_ms" => time = value,
                    _ => return Err(EvalError::MalformedReport(line.to_string())),
                }
            }
        }
        Ok(Self {
            dice_per_label,
            mean_dice,
            pct_nonpos_jacobian: pct,
            register_time_ms: time,
        })
    }
}

/// Dice overlap of one label: `2|A∩B| / (|A| + |B|)`, and 1.0 when both
/// masks are empty.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u32) -> Result<f64, EvalError> {
    if a.geometry != b.geometry {
        return Err(EvalError::GeometryMismatch {
            a: a.geometry,
            b: b.geometry,
        });
    }
    let mut na = 0u64;
    let mut nb = 0u64;
    let mut overlap = 0u64;
    for (&va, &vb) in a.data.iter().zip(&b.data) {
        let ia = va == label;
        let ib = vb == label;
        na += ia as u64;
        nb += ib as u64;
        overlap += (ia && ib) as u64;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * overlap as f64 / (na + nb) as f64)
}

/// Percent of voxels where the warp folds (`det(I + ∇u) <= 0`).
pub fn fold_fraction(phi: &DisplacementField) -> Result<f64, EvalError> {
    let det = warp::jacobian_det(phi)?;
    let folded = det.data.iter().filter(|&&d| d <= 0.0).count();
    Ok(100.0 * folded as f64 / det.data.len() as f64)
}

/// Labels present in the fixed map, background excluded.
fn foreground_labels(seg: &LabelVolume) -> Vec<u32> {
    let mut labels: Vec<u32> = seg.data.iter().copied().filter(|&l| l != 0).collect();
    labels.sort_unstable();
    labels.dedup();
    labels
}

/// Metrics for a precomputed field: warps `seg_m` onto `seg_f`'s frame and
/// scores the overlap. `register_time_ms` is the caller's to fill when the
/// field came out of a timed inference.
pub fn evaluate_field(
    phi: &DisplacementField,
    seg_m: &LabelVolume,
    seg_f: &LabelVolume,
    register_time_ms: f64,
) -> Result<EvalReport, EvalError> {
    if seg_m.geometry != seg_f.geometry {
        return Err(EvalError::GeometryMismatch {
            a: seg_m.geometry,
            b: seg_f.geometry,
        });
    }
    if phi.geometry != seg_f.geometry {
        return Err(EvalError::GeometryMismatch {
            a: phi.geometry,
            b: seg_f.geometry,
        });
    }
    let warped = warp::warp_labels(seg_m, phi)?;
    let labels = foreground_labels(seg_f);
    let mut dice_per_label = BTreeMap::new();
    let mut total = 0.0;
    for &label in &labels {
        let d = dice(&warped, seg_f, label)?;
        dice_per_label.insert(label, d);
        total += d;
    }
    let mean_dice = if labels.is_empty() {
        1.0
    } else {
        total / labels.len() as f64
    };
    Ok(EvalReport {
        dice_per_label,
        mean_dice,
        pct_nonpos_jacobian: fold_fraction(phi)?,
        register_time_ms,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::DisplacementField;

    fn geom(n: usize) -> VolumeGeometry {
        VolumeGeometry::new(n, n, n)
    }

    #[test]
    fn dice_of_identical_masks_is_one() {
        let mut l = LabelVolume::zeros(geom(4));
        for i in 0..10 {
            l.data[i] = 2;
        }
        assert_eq!(dice(&l, &l, 2).unwrap(), 1.0);
    }

    #[test]
    fn dice_of_disjoint_masks_is_zero() {
        let mut a = LabelVolume::zeros(geom(4));
        let mut b = LabelVolume::zeros(geom(4));
        a.data[0] = 1;
        b.data[1] = 1;
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.0);
    }

    #[test]
    fn dice_counts_overlap() {
        // |A| = 8, |B| = 8, overlap 4 -> 0.5
        let mut a = LabelVolume::zeros(geom(4));
        let mut b = LabelVolume::zeros(geom(4));
        for i in 0..8 {
            a.data[i] = 1;
        }
        for i in 4..12 {
            b.data[i] = 1;
        }
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
    }

    #[test]
    fn dice_of_empty_masks_is_one() {
        let a = LabelVolume::zeros(geom(3));
        assert_eq!(dice(&a, &a, 9).unwrap(), 1.0);
    }

    #[test]
    fn dice_is_symmetric_and_bounded() {
        let mut a = LabelVolume::zeros(geom(4));
        let mut b = LabelVolume::zeros(geom(4));
        for i in 0..20 {
            a.data[i * 3 % 64] = 1;
            b.data[i * 5 % 64] = 1;
        }
        let d1 = dice(&a, &b, 1).unwrap();
        let d2 = dice(&b, &a, 1).unwrap();
        assert_eq!(d1, d2);
        assert!((0.0..=1.0).contains(&d1));
    }

    #[test]
    fn fold_fraction_of_zero_field_is_zero() {
        let phi = DisplacementField::zeros(geom(5));
        assert_eq!(fold_fraction(&phi).unwrap(), 0.0);
    }

    #[test]
    fn fold_fraction_of_compression_field_is_total() {
        let g = geom(5);
        let mut phi = DisplacementField::zeros(g);
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    phi.data[3 * g.index(x, y, z)] = -2.0 * x as f32;
                }
            }
        }
        assert_eq!(fold_fraction(&phi).unwrap(), 100.0);
    }

    #[test]
    fn small_smooth_field_never_folds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let g = geom(8);
        // |u| <= 0.2 everywhere keeps det(I + grad u) > 0 by perturbation bound
        let mut phi = DisplacementField::zeros(g);
        for z in 0..8 {
            for y in 0..8 {
                for x in 0..8 {
                    let i = 3 * g.index(x, y, z);
                    let s = (x as f32 * 0.8).sin() * (y as f32 * 0.7).cos();
                    phi.data[i] = 0.15 * s + rng.gen_range(-0.02..0.02);
                    phi.data[i + 1] = 0.15 * (z as f32 * 0.6).sin() + rng.gen_range(-0.02..0.02);
                    phi.data[i + 2] = rng.gen_range(-0.05..0.05);
                }
            }
        }
        assert!(phi.max_abs() <= 0.2);
        assert_eq!(fold_fraction(&phi).unwrap(), 0.0);
    }

    #[test]
    fn evaluate_identity_field_equal_segs() {
        let g = geom(4);
        let mut seg = LabelVolume::zeros(g);
        seg.data[5] = 1;
        seg.data[6] = 2;
        let phi = DisplacementField::zeros(g);
        let r = evaluate_field(&phi, &seg, &seg, 0.0).unwrap();
        assert_eq!(r.mean_dice, 1.0);
        assert_eq!(r.pct_nonpos_jacobian, 0.0);
        assert_eq!(r.dice_per_label.len(), 2);
    }

    #[test]
    fn evaluate_disjoint_segs_scores_zero() {
        let g = geom(4);
        let mut a = LabelVolume::zeros(g);
        let mut b = LabelVolume::zeros(g);
        a.data[0] = 1;
        b.data[63] = 1;
        let phi = DisplacementField::zeros(g);
        let r = evaluate_field(&phi, &a, &b, 0.0).unwrap();
        assert_eq!(r.mean_dice, 0.0);
    }

    #[test]
    fn report_text_round_trips() {
        let g = geom(4);
        let mut seg = LabelVolume::zeros(g);
        seg.data[3] = 1;
        seg.data[9] = 3;
        let phi = DisplacementField::zeros(g);
        let r = evaluate_field(&phi, &seg, &seg, 1.5).unwrap();
        let text = r.to_text();
        let back = EvalReport::from_text(&text).unwrap();
        assert_eq!(back, r);
    }
}
