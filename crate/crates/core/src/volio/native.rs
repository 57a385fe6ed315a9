//! Native `DPAV` container.
//!
//! Layout (little-endian, 64-byte header):
//!
//! | offset | size | field                         |
//! |--------|------|-------------------------------|
//! | 0      | 4    | magic `DPAV`                  |
//! | 4      | 2    | version (u16, currently 1)    |
//! | 6      | 2    | datakind (0 label, 1 int, 2 prob) |
//! | 8      | 12   | dims, 3 x u32                 |
//! | 20     | 24   | spacing, 3 x f64              |
//! | 44     | 4    | num_labels (u32, 0 for reals) |
//! | 48     | 16   | reserved, zero                |
//!
//! followed by the raw payload, x fastest.

use super::{DataKind, Grid, IntensityVolume, LabelVolume, ProbMap, Volume};
use crate::error::{Error, Result};

pub const NATIVE_MAGIC: &[u8; 4] = b"DPAV";
pub const NATIVE_HEADER_LEN: usize = 64;
const VERSION: u16 = 1;

pub fn encode_native(vol: &Volume) -> Vec<u8> {
    let header = vol.header();
    let grid = &header.grid;
    let mut out = Vec::with_capacity(NATIVE_HEADER_LEN + header.payload_bytes());
    out.extend_from_slice(NATIVE_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&header.kind.code().to_le_bytes());
    for &d in &grid.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &s in &grid.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    let num_labels = match vol {
        Volume::Label(v) => v.num_labels() as u32,
        _ => 0,
    };
    out.extend_from_slice(&num_labels.to_le_bytes());
    out.resize(NATIVE_HEADER_LEN, 0);
    match vol {
        Volume::Label(v) => v.voxels().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Volume::Intensity(v) => v.voxels().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        Volume::Prob(v) => v.voxels().iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

struct RawNative<'a> {
    kind: DataKind,
    grid: Grid,
    num_labels: u32,
    payload: &'a [u8],
}

fn u16_at(b: &[u8], off: usize) -> u16 {
    u16::from_le_bytes([b[off], b[off + 1]])
}

fn u32_at(b: &[u8], off: usize) -> u32 {
    u32::from_le_bytes(b[off..off + 4].try_into().unwrap())
}

fn f64_at(b: &[u8], off: usize) -> f64 {
    f64::from_le_bytes(b[off..off + 8].try_into().unwrap())
}

fn parse(bytes: &[u8]) -> Result<RawNative<'_>> {
    if bytes.len() < NATIVE_HEADER_LEN || &bytes[..4] != NATIVE_MAGIC {
        return Err(Error::Format("missing DPAV magic or truncated header".into()));
    }
    let version = u16_at(bytes, 4);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported container version {version}")));
    }
    let kind = DataKind::from_code(u16_at(bytes, 6))?;
    let dims = [
        u32_at(bytes, 8) as usize,
        u32_at(bytes, 12) as usize,
        u32_at(bytes, 16) as usize,
    ];
    let spacing = [f64_at(bytes, 20), f64_at(bytes, 28), f64_at(bytes, 36)];
    let grid = Grid::new(dims, spacing).map_err(|e| Error::Format(e.to_string()))?;
    let num_labels = u32_at(bytes, 44);
    let payload = &bytes[NATIVE_HEADER_LEN..];
    let expected = grid.len() * kind.voxel_bytes();
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header implies {expected}",
            payload.len()
        )));
    }
    Ok(RawNative {
        kind,
        grid,
        num_labels,
        payload,
    })
}

fn f32_payload(payload: &[u8]) -> Vec<f32> {
    payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub fn decode_native(bytes: &[u8]) -> Result<Volume> {
    let raw = parse(bytes)?;
    match raw.kind {
        DataKind::LabelU16 => {
            let voxels: Vec<u16> = raw
                .payload
                .chunks_exact(2)
                .map(|c| u16::from_le_bytes([c[0], c[1]]))
                .collect();
            if raw.num_labels == 0 || raw.num_labels > u16::MAX as u32 {
                return Err(Error::Format(format!(
                    "label volume declares {} labels",
                    raw.num_labels
                )));
            }
            Ok(Volume::Label(LabelVolume::new(
                raw.grid,
                voxels,
                raw.num_labels as u16,
            )?))
        }
        DataKind::IntensityF32 => Ok(Volume::Intensity(IntensityVolume::new(
            raw.grid,
            f32_payload(raw.payload),
        )?)),
        DataKind::ProbF32 => Ok(Volume::Prob(ProbMap::new(raw.grid, f32_payload(raw.payload))?)),
    }
}

pub(super) fn decode_native_real_unchecked(bytes: &[u8]) -> Result<IntensityVolume> {
    let raw = parse(bytes)?;
    match raw.kind {
        DataKind::LabelU16 => Err(Error::Format("expected an f32 volume, found labels".into())),
        _ => IntensityVolume::new(raw.grid, f32_payload(raw.payload)),
    }
}
