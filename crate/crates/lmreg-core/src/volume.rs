//! Grid-data types and the `VOL1` file format.
//!
//! All arrays are C-order with x fastest and z slowest: the voxel `(x, y, z)`
//! of an `(nx, ny, nz)` grid lives at linear index `x + nx * (y + ny * z)`.
//! Displacement fields store three values per voxel, channel-interleaved in
//! `(ux, uy, uz)` order, in voxel units.
//!
//! `VOL1` layout (little-endian): magic `"VOL1"`, `u32` nx/ny/nz, `u32`
//! channel count (1 or 3), `u8` dtype code (0 = f32, 1 = u32), three zero
//! padding bytes, then the payload. The header is exactly 24 bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

pub const VOL1_MAGIC: [u8; 4] = *b"VOL1";
pub const VOL1_HEADER_LEN: usize = 24;

const DTYPE_F32: u8 = 0;
const DTYPE_U32: u8 = 1;

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("bad magic: expected VOL1")]
    BadMagic,
    #[error("zero dimension in header")]
    ZeroDimension,
    #[error("unknown dtype code {0}")]
    UnknownDtype(u8),
    #[error("unsupported channel count {0} (expected 1 or 3)")]
    BadChannels(u32),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("dtype mismatch: file holds {found}, requested {requested}")]
    DtypeMismatch {
        found: &'static str,
        requested: &'static str,
    },
    #[error("data length {got} does not match geometry ({expected} elements)")]
    LengthMismatch { expected: usize, got: usize },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Voxel counts of a 3D grid. Spacing is implicit unit voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct VolumeGeometry {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl VolumeGeometry {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Self { nx, ny, nz }
    }

    pub fn voxels(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    /// Linear index of voxel `(x, y, z)`, x fastest.
    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    /// The model needs three 2x downsamplings.
    pub fn divisible_by(&self, factor: usize) -> bool {
        self.nx % factor == 0 && self.ny % factor == 0 && self.nz % factor == 0
    }

    pub fn halved(&self) -> Self {
        Self::new(self.nx / 2, self.ny / 2, self.nz / 2)
    }

    pub fn doubled(&self) -> Self {
        Self::new(self.nx * 2, self.ny * 2, self.nz * 2)
    }
}

/// A 3D grid of f32 intensities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarVolume {
    pub geometry: VolumeGeometry,
    pub data: Vec<f32>,
}

impl ScalarVolume {
    pub fn new(geometry: VolumeGeometry, data: Vec<f32>) -> Result<Self, VolumeError> {
        if data.len() != geometry.voxels() {
            return Err(VolumeError::LengthMismatch {
                expected: geometry.voxels(),
                got: data.len(),
            });
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: VolumeGeometry) -> Self {
        Self {
            data: vec![0.0; geometry.voxels()],
            geometry,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.geometry.index(x, y, z)]
    }
}

/// Integer segmentation map; label 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub geometry: VolumeGeometry,
    pub data: Vec<u32>,
}

impl LabelVolume {
    pub fn new(geometry: VolumeGeometry, data: Vec<u32>) -> Result<Self, VolumeError> {
        if data.len() != geometry.voxels() {
            return Err(VolumeError::LengthMismatch {
                expected: geometry.voxels(),
                got: data.len(),
            });
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: VolumeGeometry) -> Self {
        Self {
            data: vec![0; geometry.voxels()],
            geometry,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u32 {
        self.data[self.geometry.index(x, y, z)]
    }
}

/// Per-voxel 3-vector displacements in voxel units, interleaved `(ux,uy,uz)`.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub geometry: VolumeGeometry,
    pub data: Vec<f32>,
}

impl DisplacementField {
    pub fn new(geometry: VolumeGeometry, data: Vec<f32>) -> Result<Self, VolumeError> {
        if data.len() != 3 * geometry.voxels() {
            return Err(VolumeError::LengthMismatch {
                expected: 3 * geometry.voxels(),
                got: data.len(),
            });
        }
        Ok(Self { geometry, data })
    }

    pub fn zeros(geometry: VolumeGeometry) -> Self {
        Self {
            data: vec![0.0; 3 * geometry.voxels()],
            geometry,
        }
    }

    /// Displacement vector at voxel `(x, y, z)`.
    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        let i = 3 * self.geometry.index(x, y, z);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel-planar copy `[3, nz, ny, nx]`, the layout the model emits.
    pub fn to_planar(&self) -> Vec<f32> {
        let n = self.geometry.voxels();
        let mut out = vec![0.0; 3 * n];
        for v in 0..n {
            out[v] = self.data[3 * v];
            out[n + v] = self.data[3 * v + 1];
            out[2 * n + v] = self.data[3 * v + 2];
        }
        out
    }

    /// Inverse of [`DisplacementField::to_planar`].
    pub fn from_planar(geometry: VolumeGeometry, planar: &[f32]) -> Result<Self, VolumeError> {
        let n = geometry.voxels();
        if planar.len() != 3 * n {
            return Err(VolumeError::LengthMismatch {
                expected: 3 * n,
                got: planar.len(),
            });
        }
        let mut data = vec![0.0; 3 * n];
        for v in 0..n {
            data[3 * v] = planar[v];
            data[3 * v + 1] = planar[n + v];
            data[3 * v + 2] = planar[2 * n + v];
        }
        Ok(Self { geometry, data })
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Any object the VOL1 container can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(ScalarVolume),
    Labels(LabelVolume),
    Field(DisplacementField),
}

impl Volume {
    pub fn geometry(&self) -> VolumeGeometry {
        match self {
            Volume::Scalar(v) => v.geometry,
            Volume::Labels(v) => v.geometry,
            Volume::Field(v) => v.geometry,
        }
    }

    pub fn into_scalar(self) -> Result<ScalarVolume, VolumeError> {
        match self {
            Volume::Scalar(v) => Ok(v),
            Volume::Labels(_) => Err(VolumeError::DtypeMismatch {
                found: "u32 labels",
                requested: "f32 scalar",
            }),
            Volume::Field(_) => Err(VolumeError::DtypeMismatch {
                found: "f32 field",
                requested: "f32 scalar",
            }),
        }
    }

    pub fn into_labels(self) -> Result<LabelVolume, VolumeError> {
        match self {
            Volume::Labels(v) => Ok(v),
            Volume::Scalar(_) => Err(VolumeError::DtypeMismatch {
                found: "f32 scalar",
                requested: "u32 labels",
            }),
            Volume::Field(_) => Err(VolumeError::DtypeMismatch {
                found: "f32 field",
                requested: "u32 labels",
            }),
        }
    }

    pub fn into_field(self) -> Result<DisplacementField, VolumeError> {
        match self {
            Volume::Field(v) => Ok(v),
            Volume::Scalar(_) => Err(VolumeError::DtypeMismatch {
                found: "f32 scalar",
                requested: "f32 field",
            }),
            Volume::Labels(_) => Err(VolumeError::DtypeMismatch {
                found: "u32 labels",
                requested: "f32 field",
            }),
        }
    }
}

fn encode_header(geom: VolumeGeometry, channels: u32, dtype: u8) -> [u8; VOL1_HEADER_LEN] {
    let mut h = [0u8; VOL1_HEADER_LEN];
    h[0..4].copy_from_slice(&VOL1_MAGIC);
    h[4..8].copy_from_slice(&(geom.nx as u32).to_le_bytes());
    h[8..12].copy_from_slice(&(geom.ny as u32).to_le_bytes());
    h[12..16].copy_from_slice(&(geom.nz as u32).to_le_bytes());
    h[16..20].copy_from_slice(&channels.to_le_bytes());
    h[20] = dtype;
    h
}

/// Serialize a volume object to `VOL1` bytes.
pub fn volume_to_bytes(obj: &Volume) -> Vec<u8> {
    let (geom, channels, dtype) = match obj {
        Volume::Scalar(v) => (v.geometry, 1u32, DTYPE_F32),
        Volume::Labels(v) => (v.geometry, 1u32, DTYPE_U32),
        Volume::Field(v) => (v.geometry, 3u32, DTYPE_F32),
    };
    let n = geom.voxels() * channels as usize;
    let mut out = Vec::with_capacity(VOL1_HEADER_LEN + n * 4);
    out.extend_from_slice(&encode_header(geom, channels, dtype));
    match obj {
        Volume::Scalar(v) => {
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Volume::Labels(v) => {
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Volume::Field(v) => {
            for x in &v.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
    }
    out
}

/// Parse `VOL1` bytes into a typed volume.
pub fn volume_from_bytes(bytes: &[u8]) -> Result<Volume, VolumeError> {
    if bytes.len() < VOL1_HEADER_LEN {
        return Err(VolumeError::Truncated {
            expected: VOL1_HEADER_LEN,
            found: bytes.len(),
        });
    }
    if bytes[0..4] != VOL1_MAGIC {
        return Err(VolumeError::BadMagic);
    }
    let rd32 = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let (nx, ny, nz) = (rd32(4), rd32(8), rd32(12));
    if nx == 0 || ny == 0 || nz == 0 {
        return Err(VolumeError::ZeroDimension);
    }
    let channels = rd32(16);
    if channels != 1 && channels != 3 {
        return Err(VolumeError::BadChannels(channels));
    }
    let dtype = bytes[20];
    if dtype != DTYPE_F32 && dtype != DTYPE_U32 {
        return Err(VolumeError::UnknownDtype(dtype));
    }
    let geom = VolumeGeometry::new(nx as usize, ny as usize, nz as usize);
    let n = geom.voxels() * channels as usize;
    let expected = VOL1_HEADER_LEN + n * 4;
    if bytes.len() < expected {
        return Err(VolumeError::Truncated {
            expected,
            found: bytes.len(),
        });
    }
    let payload = &bytes[VOL1_HEADER_LEN..expected];
    match (dtype, channels) {
        (DTYPE_F32, 1) => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Volume::Scalar(ScalarVolume::new(geom, data)?))
        }
        (DTYPE_U32, 1) => {
            let data = payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Volume::Labels(LabelVolume::new(geom, data)?))
        }
        (DTYPE_F32, 3) => {
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Volume::Field(DisplacementField::new(geom, data)?))
        }
        // u32 payloads are single-channel only.
        (d, _) => Err(VolumeError::UnknownDtype(d)),
    }
}

pub fn write_volume<P: AsRef<Path>>(obj: &Volume, path: P) -> Result<(), VolumeError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&volume_to_bytes(obj))?;
    w.flush()?;
    Ok(())
}

pub fn read_volume<P: AsRef<Path>>(path: P) -> Result<Volume, VolumeError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    volume_from_bytes(&bytes)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    Trilinear,
    Nearest,
}

/// Source coordinate for target index `t` under the align-corners-false
/// convention: `(t + 0.5) * scale - 0.5` with `scale = src/dst`.
#[inline]
fn source_coord(t: usize, src: usize, dst: usize) -> f32 {
    (t as f32 + 0.5) * (src as f32 / dst as f32) - 0.5
}

/// Sample one channel of a strided volume at a continuous point with
/// clamp-to-edge boundaries. `data` holds `stride` values per voxel and the
/// channel lives at `offset`.
#[inline]
pub(crate) fn sample_trilinear_strided(
    data: &[f32],
    geom: VolumeGeometry,
    stride: usize,
    offset: usize,
    px: f32,
    py: f32,
    pz: f32,
) -> f32 {
    let cx = px.clamp(0.0, (geom.nx - 1) as f32);
    let cy = py.clamp(0.0, (geom.ny - 1) as f32);
    let cz = pz.clamp(0.0, (geom.nz - 1) as f32);
    let x0 = (cx.floor() as usize).min(geom.nx - 1);
    let y0 = (cy.floor() as usize).min(geom.ny - 1);
    let z0 = (cz.floor() as usize).min(geom.nz - 1);
    let x1 = (x0 + 1).min(geom.nx - 1);
    let y1 = (y0 + 1).min(geom.ny - 1);
    let z1 = (z0 + 1).min(geom.nz - 1);
    let fx = cx - x0 as f32;
    let fy = cy - y0 as f32;
    let fz = cz - z0 as f32;
    let g = |x: usize, y: usize, z: usize| data[stride * geom.index(x, y, z) + offset];
    // a + (b - a) * f is exact for constants (weights degenerate to a + 0)
    let lerp = |a: f32, b: f32, f: f32| a + (b - a) * f;
    let c00 = lerp(g(x0, y0, z0), g(x1, y0, z0), fx);
    let c10 = lerp(g(x0, y1, z0), g(x1, y1, z0), fx);
    let c01 = lerp(g(x0, y0, z1), g(x1, y0, z1), fx);
    let c11 = lerp(g(x0, y1, z1), g(x1, y1, z1), fx);
    lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
}

#[inline]
fn nearest_index(p: f32, n: usize) -> usize {
    (p.round().clamp(0.0, (n - 1) as f32)) as usize
}

/// Resample a scalar volume onto a new grid.
pub fn resample_volume(
    v: &ScalarVolume,
    target: VolumeGeometry,
    mode: ResampleMode,
) -> ScalarVolume {
    if target == v.geometry {
        return v.clone();
    }
    let src = v.geometry;
    let mut out = vec![0.0f32; target.voxels()];
    crate::exec::for_each_chunk(&mut out, target.nx * target.ny, |z, plane| {
        let pz = source_coord(z, src.nz, target.nz);
        for y in 0..target.ny {
            let py = source_coord(y, src.ny, target.ny);
            for x in 0..target.nx {
                let px = source_coord(x, src.nx, target.nx);
                plane[y * target.nx + x] = match mode {
                    ResampleMode::Trilinear => {
                        sample_trilinear_strided(&v.data, src, 1, 0, px, py, pz)
                    }
                    ResampleMode::Nearest => v.at(
                        nearest_index(px, src.nx),
                        nearest_index(py, src.ny),
                        nearest_index(pz, src.nz),
                    ),
                };
            }
        }
    });
    ScalarVolume {
        geometry: target,
        data: out,
    }
}

/// Nearest-neighbor resampling for label maps.
pub fn resample_labels(l: &LabelVolume, target: VolumeGeometry) -> LabelVolume {
    if target == l.geometry {
        return l.clone();
    }
    let src = l.geometry;
    let mut out = vec![0u32; target.voxels()];
    crate::exec::for_each_chunk(&mut out, target.nx * target.ny, |z, plane| {
        let pz = source_coord(z, src.nz, target.nz);
        for y in 0..target.ny {
            let py = source_coord(y, src.ny, target.ny);
            for x in 0..target.nx {
                let px = source_coord(x, src.nx, target.nx);
                plane[y * target.nx + x] = l.at(
                    nearest_index(px, src.nx),
                    nearest_index(py, src.ny),
                    nearest_index(pz, src.nz),
                );
            }
        }
    });
    LabelVolume {
        geometry: target,
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(n: usize) -> VolumeGeometry {
        VolumeGeometry::new(n, n, n)
    }

    #[test]
    fn round_trip_scalar_is_byte_identical() {
        let v = Volume::Scalar(ScalarVolume::new(geom(2), vec![0.0; 8]).unwrap());
        let bytes = volume_to_bytes(&v);
        let back = volume_from_bytes(&bytes).unwrap();
        assert_eq!(volume_to_bytes(&back), bytes);
        assert_eq!(back, v);
    }

    #[test]
    fn zero_dimension_rejected() {
        let v = Volume::Scalar(ScalarVolume::new(VolumeGeometry::new(4, 4, 4), vec![0.0; 64]).unwrap());
        let mut bytes = volume_to_bytes(&v);
        bytes[4..8].copy_from_slice(&0u32.to_le_bytes());
        match volume_from_bytes(&bytes) {
            Err(VolumeError::ZeroDimension) => {}
            other => panic!("expected zero dimension error, got {other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let v = Volume::Labels(LabelVolume::zeros(geom(2)));
        let mut bytes = volume_to_bytes(&v);
        bytes[0] = b'X';
        assert!(matches!(volume_from_bytes(&bytes), Err(VolumeError::BadMagic)));
    }

    #[test]
    fn truncated_payload_rejected() {
        let v = Volume::Scalar(ScalarVolume::zeros(geom(2)));
        let bytes = volume_to_bytes(&v);
        assert!(matches!(
            volume_from_bytes(&bytes[..bytes.len() - 1]),
            Err(VolumeError::Truncated { .. })
        ));
    }

    #[test]
    fn unknown_dtype_rejected() {
        let v = Volume::Scalar(ScalarVolume::zeros(geom(2)));
        let mut bytes = volume_to_bytes(&v);
        bytes[20] = 7;
        assert!(matches!(
            volume_from_bytes(&bytes),
            Err(VolumeError::UnknownDtype(7))
        ));
    }

    #[test]
    fn labels_reinterpreted_as_scalar_is_dtype_mismatch() {
        let v = Volume::Labels(LabelVolume::zeros(geom(2)));
        let bytes = volume_to_bytes(&v);
        let back = volume_from_bytes(&bytes).unwrap();
        assert!(matches!(
            back.into_scalar(),
            Err(VolumeError::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn field_file_size_is_header_plus_payload() {
        let v = Volume::Field(DisplacementField::zeros(geom(8)));
        let bytes = volume_to_bytes(&v);
        assert_eq!(bytes.len(), 24 + 3 * 512 * 4);
    }

    #[test]
    fn file_round_trip_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.vol");
        let mut field = DisplacementField::zeros(geom(3));
        for (i, v) in field.data.iter_mut().enumerate() {
            *v = i as f32 * 0.5 - 7.0;
        }
        let v = Volume::Field(field);
        write_volume(&v, &path).unwrap();
        assert_eq!(read_volume(&path).unwrap(), v);
    }

    #[test]
    fn resample_identity_geometry_is_exact() {
        let mut v = ScalarVolume::zeros(geom(4));
        for (i, x) in v.data.iter_mut().enumerate() {
            *x = (i % 13) as f32;
        }
        let out = resample_volume(&v, v.geometry, ResampleMode::Trilinear);
        assert_eq!(out, v);
    }

    #[test]
    fn resample_ramp_matches_closed_form() {
        // 2x1x1 ramp [0, 10] -> 3x1x1 under align-corners-false:
        // source coords (2/3)*(t+0.5)-0.5 = -1/6, 1/2, 7/6 -> clamped lerp 0, 5, 10.
        let v = ScalarVolume::new(VolumeGeometry::new(2, 1, 1), vec![0.0, 10.0]).unwrap();
        let out = resample_volume(&v, VolumeGeometry::new(3, 1, 1), ResampleMode::Trilinear);
        let expect = [0.0, 5.0, 10.0];
        for (o, e) in out.data.iter().zip(expect) {
            assert!((o - e).abs() < 1e-6, "{:?}", out.data);
        }
    }

    #[test]
    fn resample_constant_stays_constant() {
        let v = ScalarVolume::new(geom(4), vec![3.25; 64]).unwrap();
        let out = resample_volume(&v, VolumeGeometry::new(7, 3, 5), ResampleMode::Trilinear);
        assert!(out.data.iter().all(|&x| x == 3.25));
    }

    #[test]
    fn planar_round_trip() {
        let mut f = DisplacementField::zeros(geom(3));
        for (i, v) in f.data.iter_mut().enumerate() {
            *v = i as f32;
        }
        let planar = f.to_planar();
        let back = DisplacementField::from_planar(f.geometry, &planar).unwrap();
        assert_eq!(back, f);
    }
}
