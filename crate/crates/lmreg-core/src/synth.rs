//! Deterministic synthetic dataset generator.
//!
//! Each pair starts from a base volume (smooth random background plus
//! intensity-coded shapes with labels 1..n) and a smooth random ground-truth
//! field, rejected/rescaled until fold-free. The base volume is the moving
//! image; the fixed image and its labels are the base warped by the
//! ground-truth field. Warping the moving image by `gt_field` therefore
//! reproduces the fixed image, so the generated field is an exact
//! registration oracle for the pair.
//!
//! Everything is fully determined by `(seed, index)`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval;
use crate::volume::{
    write_volume, DisplacementField, LabelVolume, ScalarVolume, Volume, VolumeError, VolumeGeometry,
};
use crate::warp::{self, WarpError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("could not generate a fold-free field after {0} rescale attempts")]
    RetryExhausted(usize),
    #[error(transparent)]
    Volume(#[from] VolumeError),
    #[error(transparent)]
    Warp(#[from] WarpError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Grid size; must be divisible by 8 for model use.
    pub size: [usize; 3],
    /// Number of pairs.
    pub count: usize,
    pub seed: u64,
    /// Peak displacement magnitude per component, in voxels.
    pub max_disp: f32,
    /// Gaussian smoothing radius of the random field, in voxels.
    pub smooth_sigma: f32,
    /// Labelled shapes per volume: n-1 spheres plus one box.
    pub n_shapes: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: [32, 32, 32],
            count: 20,
            seed: 7,
            max_disp: 4.0,
            smooth_sigma: 4.0,
            n_shapes: 4,
        }
    }
}

impl SynthConfig {
    pub fn geometry(&self) -> VolumeGeometry {
        VolumeGeometry::new(self.size[0], self.size[1], self.size[2])
    }

    pub fn validate(&self) -> Result<(), String> {
        let g = self.geometry();
        if !g.divisible_by(8) {
            return Err(format!(
                "synth.size: each dimension must be divisible by 8, got {:?}",
                self.size
            ));
        }
        let min_dim = self.size.iter().copied().min().unwrap_or(0);
        if self.max_disp < 0.0 || self.max_disp >= min_dim as f32 / 4.0 {
            return Err(format!(
                "synth.max_disp must lie in [0, min(dims)/4) = [0, {}), got {}",
                min_dim as f32 / 4.0,
                self.max_disp
            ));
        }
        if self.count == 0 {
            return Err("synth.count must be >= 1".into());
        }
        if self.n_shapes == 0 {
            return Err("synth.n_shapes must be >= 1".into());
        }
        Ok(())
    }
}

/// One generated pair with its exact registration field.
#[derive(Debug, Clone)]
pub struct SynthPair {
    pub fixed: ScalarVolume,
    pub seg_fixed: LabelVolume,
    pub moving: ScalarVolume,
    pub seg_moving: LabelVolume,
    pub gt_field: DisplacementField,
}

/// Separable Gaussian blur, kernel truncated at 3σ, replicated borders.
fn gaussian_smooth(data: &mut Vec<f32>, g: VolumeGeometry, sigma: f32) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity(2 * radius as usize + 1);
    let mut total = 0.0f32;
    for i in -radius..=radius {
        let w = (-(i * i) as f32 / (2.0 * sigma * sigma)).exp();
        kernel.push(w);
        total += w;
    }
    for w in &mut kernel {
        *w /= total;
    }
    let dims = [g.nx, g.ny, g.nz];
    let strides = [1usize, g.nx, g.nx * g.ny];
    let mut tmp = vec![0.0f32; data.len()];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let stride = strides[axis];
        for z in 0..g.nz {
            for y in 0..g.ny {
                for x in 0..g.nx {
                    let pos = [x as isize, y as isize, z as isize];
                    let idx = g.index(x, y, z);
                    let mut acc = 0.0f32;
                    for (k, w) in kernel.iter().enumerate() {
                        let off = k as isize - radius;
                        let p = (pos[axis] + off).clamp(0, n - 1);
                        let sample = idx as isize + (p - pos[axis]) * stride as isize;
                        acc += w * data[sample as usize];
                    }
                    tmp[idx] = acc;
                }
            }
        }
        std::mem::swap(data, &mut tmp);
    }
}

/// Stationary smoothed white noise: the noise grid is padded by the kernel
/// radius before smoothing and cropped back, so border voxels have the same
/// statistics as the interior (replicated-border smoothing would concentrate
/// the field's peaks at the faces).
fn smooth_noise(rng: &mut ChaCha8Rng, g: VolumeGeometry, sigma: f32) -> Vec<f32> {
    let pad = (3.0 * sigma.max(0.0)).ceil() as usize;
    let ext = VolumeGeometry::new(g.nx + 2 * pad, g.ny + 2 * pad, g.nz + 2 * pad);
    let mut noise: Vec<f32> = (0..ext.voxels()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    gaussian_smooth(&mut noise, ext, sigma);
    let mut out = vec![0.0f32; g.voxels()];
    for z in 0..g.nz {
        for y in 0..g.ny {
            for x in 0..g.nx {
                out[g.index(x, y, z)] = noise[ext.index(x + pad, y + pad, z + pad)];
            }
        }
    }
    out
}

fn base_volume(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> (ScalarVolume, LabelVolume) {
    let g = cfg.geometry();
    // textured smooth background in [0, 0.35]
    let mut bg = smooth_noise(rng, g, (cfg.smooth_sigma / 2.0).max(1.5));
    let (mut lo, mut hi) = (f32::MAX, f32::MIN);
    for v in &bg {
        lo = lo.min(*v);
        hi = hi.max(*v);
    }
    let span = (hi - lo).max(1e-6);
    for v in &mut bg {
        *v = 0.35 * (*v - lo) / span;
    }
    let mut img = ScalarVolume::new(g, bg).unwrap();
    let mut seg = LabelVolume::zeros(g);

    let min_dim = cfg.size.iter().copied().min().unwrap() as f32;
    let r_lo = (min_dim / 8.0).max(1.5);
    let r_hi = (min_dim / 4.5).max(2.0);
    for shape in 0..cfg.n_shapes {
        let label = shape as u32 + 1;
        let intensity = 0.55 + 0.45 * (shape as f32 + 1.0) / cfg.n_shapes as f32;
        let radius = rng.gen_range(r_lo..r_hi);
        let margin = radius + cfg.max_disp + 1.0;
        let center: Vec<f32> = (0..3)
            .map(|a| {
                let n = cfg.size[a] as f32;
                if 2.0 * margin >= n {
                    n / 2.0
                } else {
                    rng.gen_range(margin..n - margin)
                }
            })
            .collect();
        let is_box = shape == cfg.n_shapes - 1;
        for z in 0..g.nz {
            for y in 0..g.ny {
                for x in 0..g.nx {
                    let dx = x as f32 - center[0];
                    let dy = y as f32 - center[1];
                    let dz = z as f32 - center[2];
                    let (inside, r_frac) = if is_box {
                        let m = dx.abs().max(dy.abs()).max(dz.abs());
                        (m <= radius, m / radius)
                    } else {
                        let r2 = dx * dx + dy * dy + dz * dz;
                        (r2 <= radius * radius, (r2 / (radius * radius)).sqrt())
                    };
                    if inside {
                        let i = g.index(x, y, z);
                        // radial falloff keeps intensity gradients alive
                        // inside the shape, not just at its boundary
                        img.data[i] = intensity * (1.0 - 0.35 * r_frac * r_frac);
                        seg.data[i] = label;
                    }
                }
            }
        }
    }
    // soften edges so the similarity gradient's basin spans a few voxels
    gaussian_smooth(&mut img.data, g, 1.0);
    for v in &mut img.data {
        *v = v.clamp(0.0, 1.0);
    }
    (img, seg)
}

/// Gaussian-smoothed random field scaled to `max_disp`, rescaled and retried
/// until fold-free.
fn smooth_random_field(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
) -> Result<DisplacementField, SynthError> {
    let g = cfg.geometry();
    let mut field = DisplacementField::zeros(g);
    if cfg.max_disp == 0.0 {
        return Ok(field);
    }
    let mut channels: Vec<Vec<f32>> = Vec::with_capacity(3);
    for _ in 0..3 {
        channels.push(smooth_noise(rng, g, cfg.smooth_sigma));
    }
    let mut peak = 0.0f32;
    for c in &channels {
        for v in c {
            peak = peak.max(v.abs());
        }
    }
    let mut scale = cfg.max_disp / peak.max(1e-12);
    const MAX_TRIES: usize = 20;
    for _ in 0..MAX_TRIES {
        for v in 0..g.voxels() {
            field.data[3 * v] = scale * channels[0][v];
            field.data[3 * v + 1] = scale * channels[1][v];
            field.data[3 * v + 2] = scale * channels[2][v];
        }
        if g.nx < 3 || g.ny < 3 || g.nz < 3 {
            return Ok(field); // too small for a Jacobian; accept as-is
        }
        if eval::fold_fraction(&field).map_err(|e| match e {
            eval::EvalError::Warp(w) => SynthError::Warp(w),
            _ => unreachable!(),
        })? == 0.0
        {
            return Ok(field);
        }
        scale *= 0.9;
    }
    Err(SynthError::RetryExhausted(MAX_TRIES))
}

/// Generate pair `index`; bitwise reproducible for a `(seed, index)` pair.
pub fn gen_pair(cfg: &SynthConfig, index: u64) -> Result<SynthPair, SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index.wrapping_add(1));
    let (moving, seg_moving) = base_volume(&mut rng, cfg);
    let gt_field = smooth_random_field(&mut rng, cfg)?;
    let fixed = warp::apply_field(&moving, &gt_field)?;
    let seg_fixed = warp::warp_labels(&seg_moving, &gt_field)?;
    Ok(SynthPair {
        fixed,
        seg_fixed,
        moving,
        seg_moving,
        gt_field,
    })
}

/// The five files of one pair, relative to the dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PairFiles {
    pub fixed: String,
    pub moving: String,
    pub seg_fixed: String,
    pub seg_moving: String,
    pub gt_field: String,
}

impl PairFiles {
    pub fn for_index(index: u64) -> Self {
        Self {
            fixed: format!("pair{index}_fixed.vol"),
            moving: format!("pair{index}_moving.vol"),
            seg_fixed: format!("pair{index}_fixedseg.vol"),
            seg_moving: format!("pair{index}_movingseg.vol"),
            gt_field: format!("pair{index}_gtfield.vol"),
        }
    }

    pub fn manifest_line(&self) -> String {
        format!(
            "{} {} {} {} {}",
            self.fixed, self.moving, self.seg_fixed, self.seg_moving, self.gt_field
        )
    }
}

pub const MANIFEST_NAME: &str = "manifest.txt";

/// Write `cfg.count` pairs plus a manifest into `dir`; returns the manifest
/// entries in index order.
pub fn gen_dataset(cfg: &SynthConfig, dir: &Path) -> Result<Vec<PairFiles>, SynthError> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count as u64 {
        let pair = gen_pair(cfg, index)?;
        let files = PairFiles::for_index(index);
        write_volume(&Volume::Scalar(pair.fixed), dir.join(&files.fixed))?;
        write_volume(&Volume::Scalar(pair.moving), dir.join(&files.moving))?;
        write_volume(&Volume::Labels(pair.seg_fixed), dir.join(&files.seg_fixed))?;
        write_volume(&Volume::Labels(pair.seg_moving), dir.join(&files.seg_moving))?;
        write_volume(&Volume::Field(pair.gt_field), dir.join(&files.gt_field))?;
        entries.push(files);
    }
    let manifest: String = entries
        .iter()
        .map(|e| e.manifest_line() + "\n")
        .collect();
    fs::write(dir.join(MANIFEST_NAME), manifest)?;
    Ok(entries)
}

/// Parse a dataset manifest into per-pair file paths.
pub fn read_manifest(dir: &Path) -> Result<Vec<PairFiles>, SynthError> {
    let text = fs::read_to_string(dir.join(MANIFEST_NAME))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 5 {
            return Err(SynthError::Io(std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                format!("manifest line needs 5 file names: {line:?}"),
            )));
        }
        out.push(PairFiles {
            fixed: parts[0].to_string(),
            moving: parts[1].to_string(),
            seg_fixed: parts[2].to_string(),
            seg_moving: parts[3].to_string(),
            gt_field: parts[4].to_string(),
        });
    }
    Ok(out)
}

/// Absolute paths of one manifest entry.
pub fn pair_paths(dir: &Path, files: &PairFiles) -> [PathBuf; 5] {
    [
        dir.join(&files.fixed),
        dir.join(&files.moving),
        dir.join(&files.seg_fixed),
        dir.join(&files.seg_moving),
        dir.join(&files.gt_field),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::{dice, evaluate_field};
    use crate::volume::read_volume;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            size: [16, 16, 16],
            count: 2,
            seed: 7,
            max_disp: 2.5,
            smooth_sigma: 3.0,
            n_shapes: 3,
        }
    }

    #[test]
    fn generation_is_bitwise_deterministic() {
        let cfg = small_cfg();
        let a = gen_pair(&cfg, 1).unwrap();
        let b = gen_pair(&cfg, 1).unwrap();
        assert_eq!(a.fixed, b.fixed);
        assert_eq!(a.moving, b.moving);
        assert_eq!(a.gt_field, b.gt_field);
        let c = gen_pair(&cfg, 2).unwrap();
        assert_ne!(a.fixed.data, c.fixed.data);
    }

    #[test]
    fn zero_max_disp_gives_identical_pair() {
        let cfg = SynthConfig {
            max_disp: 0.0,
            ..small_cfg()
        };
        let p = gen_pair(&cfg, 0).unwrap();
        assert_eq!(p.fixed, p.moving);
        assert_eq!(p.seg_fixed, p.seg_moving);
        assert!(p.gt_field.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn intensities_stay_in_unit_range() {
        let p = gen_pair(&small_cfg(), 0).unwrap();
        for vol in [&p.fixed, &p.moving] {
            assert!(vol.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn ground_truth_fields_are_fold_free() {
        let cfg = small_cfg();
        for i in 0..20 {
            let p = gen_pair(&cfg, i).unwrap();
            assert_eq!(eval::fold_fraction(&p.gt_field).unwrap(), 0.0, "pair {i}");
        }
    }

    #[test]
    fn ground_truth_field_is_a_registration_oracle() {
        let cfg = small_cfg();
        for i in 0..5 {
            let p = gen_pair(&cfg, i).unwrap();
            let r = evaluate_field(&p.gt_field, &p.seg_moving, &p.seg_fixed, 0.0).unwrap();
            assert!(r.mean_dice >= 0.95, "pair {i}: {}", r.mean_dice);
        }
    }

    #[test]
    fn pairs_start_misaligned() {
        // shipped-default geometry: the invariant is stated for max_disp >= 3
        let cfg = SynthConfig {
            max_disp: 3.0,
            ..SynthConfig::default()
        };
        let mut any_label = false;
        for i in 0..5 {
            let p = gen_pair(&cfg, i).unwrap();
            let mut labels: Vec<u32> = p.seg_fixed.data.iter().copied().filter(|&l| l != 0).collect();
            labels.sort_unstable();
            labels.dedup();
            let mut total = 0.0;
            for &l in &labels {
                total += dice(&p.seg_moving, &p.seg_fixed, l).unwrap();
                any_label = true;
            }
            let mean = total / labels.len().max(1) as f64;
            assert!(mean < 0.9, "pair {i} already aligned: {mean}");
        }
        assert!(any_label);
    }

    #[test]
    fn tiny_grid_field_round_trips_through_disk() {
        // 4x4x4 per the I/O contract; model-size validation lives elsewhere
        let cfg = SynthConfig {
            size: [4, 4, 4],
            count: 1,
            seed: 7,
            max_disp: 0.5,
            smooth_sigma: 1.0,
            n_shapes: 1,
        };
        let p = gen_pair(&cfg, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.vol");
        write_volume(&Volume::Field(p.gt_field.clone()), &path).unwrap();
        let back = read_volume(&path).unwrap().into_field().unwrap();
        assert_eq!(back, p.gt_field);
    }

    #[test]
    fn dataset_writes_expected_files_and_is_reproducible() {
        let cfg = small_cfg();
        let dir = tempfile::tempdir().unwrap();
        let entries = gen_dataset(&cfg, dir.path()).unwrap();
        assert_eq!(entries.len(), 2);
        let names: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        assert_eq!(names.len(), 11); // 10 volumes + manifest
        assert!(names.contains(&MANIFEST_NAME.to_string()));

        let before = std::fs::read(dir.path().join("pair1_gtfield.vol")).unwrap();
        gen_dataset(&cfg, dir.path()).unwrap();
        let after = std::fs::read(dir.path().join("pair1_gtfield.vol")).unwrap();
        assert_eq!(before, after);

        let manifest = read_manifest(dir.path()).unwrap();
        assert_eq!(manifest, entries);
    }

    #[test]
    fn config_validation_names_the_constraint() {
        let bad = SynthConfig {
            size: [12, 16, 16],
            ..small_cfg()
        };
        let err = bad.validate().unwrap_err();
        assert!(err.contains("divisible by 8"), "{err}");
        let bad = SynthConfig {
            max_disp: 10.0,
            ..small_cfg()
        };
        assert!(bad.validate().is_err());
    }
}
