//! Spatial-transformer warping, field composition and Jacobian analysis.
//!
//! A field `phi` with displacement `u` maps `x -> x + u(x)`; warping pulls
//! the value at the mapped point back to `x`. Sampled coordinates are
//! clamped to the volume edge. Composition is fixed so that
//! `I ∘ compose(a, b) = (I ∘ a) ∘ b`: the coarse/earlier field goes first,
//! the refinement second.
//!
//! The differentiable counterpart of [`apply_field`] is the
//! `gather_trilinear` primitive in [`crate::diff`]; both share the same
//! trilinear/clamp arithmetic.

use thiserror::Error;

use crate::exec;
use crate::volume::{
    sample_trilinear_strided, DisplacementField, LabelVolume, ScalarVolume, VolumeGeometry,
};

#[derive(Debug, Error)]
pub enum WarpError {
    #[error("geometry mismatch: {a:?} vs {b:?}")]
    GeometryMismatch { a: VolumeGeometry, b: VolumeGeometry },
    #[error("dims too small for jacobian: need at least 3 per axis, got {0:?}")]
    DimsTooSmall(VolumeGeometry),
}

fn check_geometry(a: VolumeGeometry, b: VolumeGeometry) -> Result<(), WarpError> {
    if a == b {
        Ok(())
    } else {
        Err(WarpError::GeometryMismatch { a, b })
    }
}

/// Warp a scalar volume: `out(x) = v(x + u(x))`, trilinear, clamped.
pub fn apply_field(v: &ScalarVolume, phi: &DisplacementField) -> Result<ScalarVolume, WarpError> {
    check_geometry(v.geometry, phi.geometry)?;
    let g = v.geometry;
    let mut out = vec![0.0f32; g.voxels()];
    exec::for_each_chunk(&mut out, g.nx * g.ny, |z, plane| {
        for y in 0..g.ny {
            for x in 0..g.nx {
                let u = phi.at(x, y, z);
                plane[y * g.nx + x] = sample_trilinear_strided(
                    &v.data,
                    g,
                    1,
                    0,
                    x as f32 + u[0],
                    y as f32 + u[1],
                    z as f32 + u[2],
                );
            }
        }
    });
    Ok(ScalarVolume { geometry: g, data: out })
}

/// Warp a label map with nearest-neighbor sampling.
pub fn warp_labels(l: &LabelVolume, phi: &DisplacementField) -> Result<LabelVolume, WarpError> {
    check_geometry(l.geometry, phi.geometry)?;
    let g = l.geometry;
    let mut out = vec![0u32; g.voxels()];
    exec::for_each_chunk(&mut out, g.nx * g.ny, |z, plane| {
        for y in 0..g.ny {
            for x in 0..g.nx {
                let u = phi.at(x, y, z);
                let sx = (x as f32 + u[0]).round().clamp(0.0, (g.nx - 1) as f32) as usize;
                let sy = (y as f32 + u[1]).round().clamp(0.0, (g.ny - 1) as f32) as usize;
                let sz = (z as f32 + u[2]).round().clamp(0.0, (g.nz - 1) as f32) as usize;
                plane[y * g.nx + x] = l.at(sx, sy, sz);
            }
        }
    });
    Ok(LabelVolume { geometry: g, data: out })
}

/// Compose two fields on the same grid:
/// `u_out(x) = u_second(x) + u_first(x + u_second(x))`,
/// so that warping by the result equals warping by `first` then refining by
/// `second`.
pub fn compose(
    first: &DisplacementField,
    second: &DisplacementField,
) -> Result<DisplacementField, WarpError> {
    check_geometry(first.geometry, second.geometry)?;
    let g = first.geometry;
    let mut out = vec![0.0f32; 3 * g.voxels()];
    exec::for_each_chunk(&mut out, 3 * g.nx * g.ny, |z, plane| {
        for y in 0..g.ny {
            for x in 0..g.nx {
                let u2 = second.at(x, y, z);
                let px = x as f32 + u2[0];
                let py = y as f32 + u2[1];
                let pz = z as f32 + u2[2];
                let o = 3 * (y * g.nx + x);
                for c in 0..3 {
                    plane[o + c] =
                        u2[c] + sample_trilinear_strided(&first.data, g, 3, c, px, py, pz);
                }
            }
        }
    });
    Ok(DisplacementField { geometry: g, data: out })
}

/// Trilinearly resample a field onto a new grid and rescale the displacement
/// values by the grid ratio, keeping them in voxel units of the target grid.
/// Axis ratios must match (uniform rescale).
pub fn resize_field(phi: &DisplacementField, target: VolumeGeometry) -> DisplacementField {
    if target == phi.geometry {
        return phi.clone();
    }
    let src = phi.geometry;
    let scale = target.nx as f32 / src.nx as f32;
    debug_assert!(
        (target.ny as f32 / src.ny as f32 - scale).abs() < 1e-6
            && (target.nz as f32 / src.nz as f32 - scale).abs() < 1e-6
    );
    let inv = 1.0 / scale;
    let mut out = vec![0.0f32; 3 * target.voxels()];
    exec::for_each_chunk(&mut out, 3 * target.nx * target.ny, |z, plane| {
        let pz = (z as f32 + 0.5) * inv - 0.5;
        for y in 0..target.ny {
            let py = (y as f32 + 0.5) * inv - 0.5;
            for x in 0..target.nx {
                let px = (x as f32 + 0.5) * inv - 0.5;
                let o = 3 * (y * target.nx + x);
                for c in 0..3 {
                    plane[o + c] =
                        scale * sample_trilinear_strided(&phi.data, src, 3, c, px, py, pz);
                }
            }
        }
    });
    DisplacementField { geometry: target, data: out }
}

/// Double each grid dimension and the displacement values.
pub fn upscale_field(phi: &DisplacementField) -> DisplacementField {
    resize_field(phi, phi.geometry.doubled())
}

/// Per-voxel `det(I + ∇u)` with central differences in the interior and
/// one-sided differences on the faces.
pub fn jacobian_det(phi: &DisplacementField) -> Result<ScalarVolume, WarpError> {
    let g = phi.geometry;
    if g.nx < 3 || g.ny < 3 || g.nz < 3 {
        return Err(WarpError::DimsTooSmall(g));
    }
    let mut out = vec![0.0f32; g.voxels()];
    exec::for_each_chunk(&mut out, g.nx * g.ny, |z, plane| {
        for y in 0..g.ny {
            for x in 0..g.nx {
                // d u / d axis, rows of the displacement gradient.
                let diff = |axis: usize| -> [f32; 3] {
                    let (lo, hi, scale) = match axis {
                        0 => {
                            let lo = x.saturating_sub(1);
                            let hi = (x + 1).min(g.nx - 1);
                            (phi.at(lo, y, z), phi.at(hi, y, z), 1.0 / (hi - lo) as f32)
                        }
                        1 => {
                            let lo = y.saturating_sub(1);
                            let hi = (y + 1).min(g.ny - 1);
                            (phi.at(x, lo, z), phi.at(x, hi, z), 1.0 / (hi - lo) as f32)
                        }
                        _ => {
                            let lo = z.saturating_sub(1);
                            let hi = (z + 1).min(g.nz - 1);
                            (phi.at(x, y, lo), phi.at(x, y, hi), 1.0 / (hi - lo) as f32)
                        }
                    };
                    [
                        (hi[0] - lo[0]) * scale,
                        (hi[1] - lo[1]) * scale,
                        (hi[2] - lo[2]) * scale,
                    ]
                };
                let dx = diff(0);
                let dy = diff(1);
                let dz = diff(2);
                // J = I + [du/dx du/dy du/dz] columns; row c is (dx[c], dy[c], dz[c]).
                let m = [
                    [1.0 + dx[0], dy[0], dz[0]],
                    [dx[1], 1.0 + dy[1], dz[1]],
                    [dx[2], dy[2], 1.0 + dz[2]],
                ];
                let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
                plane[y * g.nx + x] = det;
            }
        }
    });
    Ok(ScalarVolume { geometry: g, data: out })
}
