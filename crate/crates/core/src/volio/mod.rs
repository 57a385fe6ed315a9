//! Volume data model and file I/O.
//!
//! Every volume lives on a [`Grid`] (voxel counts plus mm spacing) with the
//! x axis varying fastest. Three payload kinds exist: integer label maps,
//! real-valued intensity images and probability maps. Binary masks are
//! probability maps restricted to `{0, 1}`.
//!
//! Two on-disk formats are supported: the native `DPAV` container (bit-exact
//! round trip, used for everything this crate writes) and a read/write subset
//! of NIfTI-1.

mod native;
mod nifti;

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use native::{decode_native, encode_native, NATIVE_HEADER_LEN, NATIVE_MAGIC};
pub use nifti::{decode_nifti, encode_nifti, write_nifti, NIFTI_HEADER_LEN};

/// Voxel counts and physical spacing of a volume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidHeader(format!(
                "every dimension must be at least 1, got {dims:?}"
            )));
        }
        if spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidHeader(format!(
                "spacing must be finite and positive, got {spacing:?}"
            )));
        }
        if dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(Error::InvalidHeader("voxel count overflows".into()));
        }
        Ok(Self { dims, spacing })
    }

    /// Unit-spacing grid.
    pub fn cube(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let x = idx % self.dims[0];
        let rest = idx / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    pub fn ensure_same(&self, other: &Grid) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::grid(self, other))
        }
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}x{}x{} @ {}x{}x{} mm",
            self.dims[0], self.dims[1], self.dims[2], self.spacing[0], self.spacing[1], self.spacing[2]
        )
    }
}

/// Payload kind; fixes the bytes per voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DataKind {
    LabelU16,
    IntensityF32,
    ProbF32,
}

impl DataKind {
    pub const fn voxel_bytes(self) -> usize {
        match self {
            DataKind::LabelU16 => 2,
            DataKind::IntensityF32 | DataKind::ProbF32 => 4,
        }
    }

    pub(crate) const fn code(self) -> u16 {
        match self {
            DataKind::LabelU16 => 0,
            DataKind::IntensityF32 => 1,
            DataKind::ProbF32 => 2,
        }
    }

    pub(crate) fn from_code(code: u16) -> Result<Self> {
        match code {
            0 => Ok(DataKind::LabelU16),
            1 => Ok(DataKind::IntensityF32),
            2 => Ok(DataKind::ProbF32),
            other => Err(Error::Format(format!("unknown datakind code {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VolumeHeader {
    pub grid: Grid,
    pub kind: DataKind,
}

impl VolumeHeader {
    pub fn payload_bytes(&self) -> usize {
        self.grid.len() * self.kind.voxel_bytes()
    }
}

/// Integer region labels; 0 is background, `1..num_labels` are regions.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    grid: Grid,
    voxels: Vec<u16>,
    num_labels: u16,
}

impl LabelVolume {
    pub fn new(grid: Grid, voxels: Vec<u16>, num_labels: u16) -> Result<Self> {
        check_len(&grid, voxels.len())?;
        if num_labels == 0 {
            return Err(Error::InvalidHeader("num_labels must be at least 1".into()));
        }
        if let Some(&bad) = voxels.iter().find(|&&v| v >= num_labels) {
            return Err(Error::LabelRange {
                value: bad as u32,
                num_labels: num_labels as u32,
            });
        }
        Ok(Self {
            grid,
            voxels,
            num_labels,
        })
    }

    pub fn filled(grid: Grid, label: u16, num_labels: u16) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![label; n], num_labels)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            grid: self.grid.clone(),
            kind: DataKind::LabelU16,
        }
    }

    pub fn voxels(&self) -> &[u16] {
        &self.voxels
    }

    pub fn num_labels(&self) -> u16 {
        self.num_labels
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> u16 {
        self.voxels[self.grid.index(x, y, z)]
    }

    pub fn contains_label(&self, k: u16) -> bool {
        self.voxels.contains(&k)
    }

    pub fn count_label(&self, k: u16) -> usize {
        self.voxels.iter().filter(|&&v| v == k).count()
    }

    /// Binary indicator map of label `k`.
    pub fn indicator(&self, k: u16) -> ProbMap {
        let voxels = self.voxels.iter().map(|&v| if v == k { 1.0 } else { 0.0 }).collect();
        ProbMap {
            grid: self.grid.clone(),
            voxels,
        }
    }

    pub fn into_voxels(self) -> Vec<u16> {
        self.voxels
    }
}

/// Real-valued anatomical image. All voxels finite.
#[derive(Debug, Clone, PartialEq)]
pub struct IntensityVolume {
    grid: Grid,
    voxels: Vec<f32>,
}

impl IntensityVolume {
    pub fn new(grid: Grid, voxels: Vec<f32>) -> Result<Self> {
        check_len(&grid, voxels.len())?;
        if let Some(index) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteVoxel { index });
        }
        Ok(Self { grid, voxels })
    }

    pub fn filled(grid: Grid, value: f32) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![value; n])
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            grid: self.grid.clone(),
            kind: DataKind::IntensityF32,
        }
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }
}

/// Single-label probability map with every voxel in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    grid: Grid,
    voxels: Vec<f32>,
}

impl ProbMap {
    pub fn new(grid: Grid, voxels: Vec<f32>) -> Result<Self> {
        check_len(&grid, voxels.len())?;
        if let Some(index) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteVoxel { index });
        }
        if let Some(index) = voxels.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::ProbabilityRange {
                index,
                value: voxels[index],
            });
        }
        Ok(Self { grid, voxels })
    }

    pub fn filled(grid: Grid, value: f32) -> Result<Self> {
        let n = grid.len();
        Self::new(grid, vec![value; n])
    }

    /// Binary mask from a predicate over voxel indices.
    pub fn mask_from_fn(grid: Grid, f: impl Fn(usize) -> bool) -> Self {
        let voxels = (0..grid.len()).map(|i| if f(i) { 1.0 } else { 0.0 }).collect();
        Self { grid, voxels }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn header(&self) -> VolumeHeader {
        VolumeHeader {
            grid: self.grid.clone(),
            kind: DataKind::ProbF32,
        }
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn into_voxels(self) -> Vec<f32> {
        self.voxels
    }

    pub fn is_binary(&self) -> bool {
        self.voxels.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn ensure_binary(&self) -> Result<()> {
        match self.voxels.iter().position(|&v| v != 0.0 && v != 1.0) {
            None => Ok(()),
            Some(index) => Err(Error::NonBinaryMask {
                index,
                value: self.voxels[index],
            }),
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.voxels.iter().filter(|&&v| v != 0.0).count()
    }

    pub fn max(&self) -> f32 {
        self.voxels.iter().copied().fold(0.0, f32::max)
    }
}

fn check_len(grid: &Grid, len: usize) -> Result<()> {
    if grid.len() != len {
        return Err(Error::InvalidHeader(format!(
            "grid {grid} holds {} voxels but payload has {len}",
            grid.len()
        )));
    }
    Ok(())
}

/// Volumes with an `f32` payload that can be masked.
pub trait RealVolume: Sized {
    fn grid(&self) -> &Grid;
    fn values(&self) -> &[f32];
    /// Rebuild a volume of the same kind on the same grid.
    fn with_values(&self, voxels: Vec<f32>) -> Result<Self>;
}

impl RealVolume for IntensityVolume {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn values(&self) -> &[f32] {
        &self.voxels
    }
    fn with_values(&self, voxels: Vec<f32>) -> Result<Self> {
        IntensityVolume::new(self.grid.clone(), voxels)
    }
}

impl RealVolume for ProbMap {
    fn grid(&self) -> &Grid {
        &self.grid
    }
    fn values(&self) -> &[f32] {
        &self.voxels
    }
    fn with_values(&self, voxels: Vec<f32>) -> Result<Self> {
        ProbMap::new(self.grid.clone(), voxels)
    }
}

/// Voxelwise product of a volume with a binary mask.
pub fn mask_apply<V: RealVolume>(vol: &V, mask: &ProbMap) -> Result<V> {
    vol.grid().ensure_same(mask.grid())?;
    mask.ensure_binary()?;
    let voxels = vol.values().iter().zip(mask.voxels()).map(|(&v, &m)| v * m).collect();
    vol.with_values(voxels)
}

/// K+1 label maps on one grid; index 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilisticAtlas {
    grid: Grid,
    maps: Vec<ProbMap>,
    normalized: bool,
}

/// Tolerance on the per-voxel sum of a normalized atlas.
pub const NORMALIZATION_TOLERANCE: f64 = 1e-6;

impl ProbabilisticAtlas {
    pub fn new(maps: Vec<ProbMap>, normalized: bool) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidHeader("atlas needs at least one map".into()))?;
        let grid = first.grid().clone();
        for m in &maps[1..] {
            grid.ensure_same(m.grid())?;
        }
        let atlas = Self { grid, maps, normalized };
        if normalized {
            atlas.check_normalized(NORMALIZATION_TOLERANCE)?;
        }
        Ok(atlas)
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn maps(&self) -> &[ProbMap] {
        &self.maps
    }

    pub fn map(&self, label: u16) -> &ProbMap {
        &self.maps[label as usize]
    }

    pub fn num_labels(&self) -> usize {
        self.maps.len()
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Largest deviation of the per-voxel label sum from 1.
    pub fn max_sum_deviation(&self) -> f64 {
        (0..self.grid.len())
            .map(|i| {
                let s: f64 = self.maps.iter().map(|m| m.voxels[i] as f64).sum();
                (s - 1.0).abs()
            })
            .fold(0.0, f64::max)
    }

    pub fn check_normalized(&self, tol: f64) -> Result<()> {
        for i in 0..self.grid.len() {
            let s: f64 = self.maps.iter().map(|m| m.voxels[i] as f64).sum();
            if (s - 1.0).abs() > tol {
                return Err(Error::InvalidDistribution(format!(
                    "voxel {i} sums to {s}, outside 1 +/- {tol}"
                )));
            }
        }
        Ok(())
    }

    pub fn into_maps(self) -> Vec<ProbMap> {
        self.maps
    }
}

/// A volume as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Label(LabelVolume),
    Intensity(IntensityVolume),
    Prob(ProbMap),
}

impl Volume {
    pub fn header(&self) -> VolumeHeader {
        match self {
            Volume::Label(v) => v.header(),
            Volume::Intensity(v) => v.header(),
            Volume::Prob(v) => v.header(),
        }
    }

    pub fn grid(&self) -> &Grid {
        match self {
            Volume::Label(v) => v.grid(),
            Volume::Intensity(v) => v.grid(),
            Volume::Prob(v) => v.grid(),
        }
    }

    pub fn into_label(self) -> Result<LabelVolume> {
        match self {
            Volume::Label(v) => Ok(v),
            other => Err(Error::Format(format!(
                "expected a label volume, found {:?}",
                other.header().kind
            ))),
        }
    }

    /// Intensity image; probability maps are accepted and reinterpreted.
    pub fn into_intensity(self) -> Result<IntensityVolume> {
        match self {
            Volume::Intensity(v) => Ok(v),
            Volume::Prob(p) => Ok(IntensityVolume {
                grid: p.grid,
                voxels: p.voxels,
            }),
            Volume::Label(_) => Err(Error::Format(
                "expected an intensity volume, found a label volume".into(),
            )),
        }
    }

    pub fn into_prob(self) -> Result<ProbMap> {
        match self {
            Volume::Prob(v) => Ok(v),
            other => Err(Error::Format(format!(
                "expected a probability map, found {:?}",
                other.header().kind
            ))),
        }
    }
}

impl From<LabelVolume> for Volume {
    fn from(v: LabelVolume) -> Self {
        Volume::Label(v)
    }
}

impl From<IntensityVolume> for Volume {
    fn from(v: IntensityVolume) -> Self {
        Volume::Intensity(v)
    }
}

impl From<ProbMap> for Volume {
    fn from(v: ProbMap) -> Self {
        Volume::Prob(v)
    }
}

const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&GZIP_MAGIC) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

/// Read a native or NIfTI-1 volume (optionally gzip-compressed).
pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    if bytes.starts_with(NATIVE_MAGIC) {
        return decode_native(&bytes);
    }
    if bytes.len() >= NIFTI_HEADER_LEN && &bytes[344..348] == b"ni1\0" {
        // Header/image pair: the payload lives in the sibling .img file.
        let img_path = path.with_extension("img");
        let payload = read_bytes(&img_path)?;
        return nifti::decode_nifti_pair(&bytes, &payload);
    }
    decode_nifti(&bytes)
}

/// Write a volume in the native container format.
pub fn write_volume(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_native(vol)).map_err(|e| Error::io(path, e))
}

/// Read any f32 native volume without enforcing the probability range.
///
/// Displacement fields are stored in the probability container but carry
/// signed millimetre offsets.
pub fn read_real_unchecked(path: impl AsRef<Path>) -> Result<IntensityVolume> {
    let path = path.as_ref();
    let bytes = read_bytes(path)?;
    native::decode_native_real_unchecked(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(d: [usize; 3]) -> Grid {
        Grid::cube(d).unwrap()
    }

    #[test]
    fn zero_dim_is_rejected_before_io() {
        assert!(matches!(Grid::new([0, 3, 3], [1.0; 3]), Err(Error::InvalidHeader(_))));
        assert!(Grid::new([3, 3, 3], [1.0, 0.0, 1.0]).is_err());
    }

    #[test]
    fn index_is_x_fastest() {
        let g = grid([2, 3, 4]);
        assert_eq!(g.index(1, 0, 0), 1);
        assert_eq!(g.index(0, 1, 0), 2);
        assert_eq!(g.index(0, 0, 1), 6);
        assert_eq!(g.coords(g.index(1, 2, 3)), [1, 2, 3]);
    }

    #[test]
    fn label_range_enforced() {
        let err = LabelVolume::new(grid([2, 1, 1]), vec![0, 3], 3).unwrap_err();
        assert!(matches!(
            err,
            Error::LabelRange {
                value: 3,
                num_labels: 3
            }
        ));
    }

    #[test]
    fn nan_intensity_rejected() {
        let err = IntensityVolume::new(grid([2, 1, 1]), vec![0.0, f32::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFiniteVoxel { index: 1 }));
    }

    #[test]
    fn mask_apply_hand_case() {
        let g = grid([1, 4, 1]);
        let v = IntensityVolume::new(g.clone(), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = ProbMap::new(g, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let out = mask_apply(&v, &m).unwrap();
        assert_eq!(out.voxels(), &[1.0, 0.0, 0.0, 4.0]);
    }

    #[test]
    fn mask_apply_identity_and_zero() {
        let g = grid([2, 2, 2]);
        let v = IntensityVolume::new(g.clone(), (0..8).map(|i| i as f32 - 3.5).collect()).unwrap();
        let ones = ProbMap::filled(g.clone(), 1.0).unwrap();
        let zeros = ProbMap::filled(g, 0.0).unwrap();
        assert_eq!(mask_apply(&v, &ones).unwrap(), v);
        assert!(mask_apply(&v, &zeros).unwrap().voxels().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn mask_apply_rejects_mismatch_and_soft_masks() {
        let v = IntensityVolume::filled(grid([2, 2, 2]), 1.0).unwrap();
        let m = ProbMap::filled(grid([2, 2, 3]), 1.0).unwrap();
        assert!(matches!(mask_apply(&v, &m), Err(Error::GridMismatch { .. })));
        let soft = ProbMap::filled(grid([2, 2, 2]), 0.5).unwrap();
        assert!(matches!(mask_apply(&v, &soft), Err(Error::NonBinaryMask { .. })));
    }

    #[test]
    fn atlas_normalization_flag_is_checked() {
        let g = grid([1, 1, 2]);
        let a = ProbMap::new(g.clone(), vec![0.25, 1.0]).unwrap();
        let b = ProbMap::new(g.clone(), vec![0.75, 0.0]).unwrap();
        assert!(ProbabilisticAtlas::new(vec![a.clone(), b], true).is_ok());
        let c = ProbMap::new(g, vec![0.5, 0.0]).unwrap();
        assert!(ProbabilisticAtlas::new(vec![a.clone(), c.clone()], true).is_err());
        assert!(ProbabilisticAtlas::new(vec![a, c], false).is_ok());
    }
}
