//! NIfTI-1 subset: single-file (`n+1`) and header/image pair (`ni1`),
//! three spatial dimensions, datatypes uint8, int16, uint16 and float32.
//! Orientation fields are ignored on read and left zero on write.

use std::fs;
use std::path::Path;

use super::{Grid, IntensityVolume, LabelVolume, Volume};
use crate::error::{Error, Result};

pub const NIFTI_HEADER_LEN: usize = 348;
const SINGLE_FILE_VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_FLOAT32: i16 = 16;
const DT_UINT16: i16 = 512;

mod off {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const MAGIC: usize = 344;
}

#[derive(Clone, Copy)]
struct Endian {
    little: bool,
}

impl Endian {
    fn i16(self, b: &[u8], o: usize) -> i16 {
        let a = [b[o], b[o + 1]];
        if self.little {
            i16::from_le_bytes(a)
        } else {
            i16::from_be_bytes(a)
        }
    }
    fn u16(self, b: &[u8], o: usize) -> u16 {
        self.i16(b, o) as u16
    }
    fn i32(self, b: &[u8], o: usize) -> i32 {
        let a: [u8; 4] = b[o..o + 4].try_into().unwrap();
        if self.little {
            i32::from_le_bytes(a)
        } else {
            i32::from_be_bytes(a)
        }
    }
    fn f32(self, b: &[u8], o: usize) -> f32 {
        f32::from_bits(self.i32(b, o) as u32)
    }
}

struct Header {
    endian: Endian,
    grid: Grid,
    datatype: i16,
    vox_offset: usize,
    slope: f32,
    inter: f32,
}

fn parse_header(bytes: &[u8], expect_magic: &[u8; 4]) -> Result<Header> {
    if bytes.len() < NIFTI_HEADER_LEN {
        return Err(Error::Format(format!(
            "file is {} bytes, shorter than a NIfTI-1 header",
            bytes.len()
        )));
    }
    let endian = if i32::from_le_bytes(bytes[0..4].try_into().unwrap()) == 348 {
        Endian { little: true }
    } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == 348 {
        Endian { little: false }
    } else {
        return Err(Error::Format("sizeof_hdr is not 348".into()));
    };
    debug_assert_eq!(endian.i32(bytes, off::SIZEOF_HDR), 348);
    let magic = &bytes[off::MAGIC..off::MAGIC + 4];
    if magic != expect_magic {
        return Err(Error::Format(format!(
            "bad NIfTI magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let ndim = endian.i16(bytes, off::DIM);
    if !(3..=7).contains(&ndim) {
        return Err(Error::Format(format!("dim[0] = {ndim}, need 3")));
    }
    let dim = |i: usize| endian.i16(bytes, off::DIM + 2 * i);
    for i in 4..=ndim as usize {
        if dim(i) != 1 {
            return Err(Error::Format(format!(
                "dim[{i}] = {}, only 3D volumes are supported",
                dim(i)
            )));
        }
    }
    let mut dims = [0usize; 3];
    for (a, d) in dims.iter_mut().enumerate() {
        let v = dim(a + 1);
        if v < 1 {
            return Err(Error::Format(format!("dim[{}] = {v}", a + 1)));
        }
        *d = v as usize;
    }
    let mut spacing = [0f64; 3];
    for (a, s) in spacing.iter_mut().enumerate() {
        let v = endian.f32(bytes, off::PIXDIM + 4 * (a + 1)).abs() as f64;
        *s = if v > 0.0 && v.is_finite() { v } else { 1.0 };
    }
    let grid = Grid::new(dims, spacing).map_err(|e| Error::Format(e.to_string()))?;
    let datatype = endian.i16(bytes, off::DATATYPE);
    let vox_offset = endian.f32(bytes, off::VOX_OFFSET);
    if !(vox_offset.is_finite() && vox_offset >= 0.0) {
        return Err(Error::Format(format!("vox_offset {vox_offset}")));
    }
    Ok(Header {
        endian,
        grid,
        datatype,
        vox_offset: vox_offset as usize,
        slope: endian.f32(bytes, off::SCL_SLOPE),
        inter: endian.f32(bytes, off::SCL_INTER),
    })
}

fn has_scaling(h: &Header) -> bool {
    h.slope != 0.0 && h.slope.is_finite() && !(h.slope == 1.0 && h.inter == 0.0)
}

fn decode_payload(h: &Header, payload: &[u8]) -> Result<Volume> {
    let n = h.grid.len();
    let width = match h.datatype {
        DT_UINT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_FLOAT32 => 4,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    if payload.len() < n * width {
        return Err(Error::Format(format!(
            "payload has {} bytes, need {}",
            payload.len(),
            n * width
        )));
    }
    let payload = &payload[..n * width];
    let e = h.endian;
    let ints: Option<Vec<i32>> = match h.datatype {
        DT_UINT8 => Some(payload.iter().map(|&b| b as i32).collect()),
        DT_INT16 => Some((0..n).map(|i| e.i16(payload, 2 * i) as i32).collect()),
        DT_UINT16 => Some((0..n).map(|i| e.u16(payload, 2 * i) as i32).collect()),
        _ => None,
    };
    match ints {
        Some(values) if !has_scaling(h) => {
            if let Some(neg) = values.iter().find(|&&v| v < 0) {
                return Err(Error::Format(format!("negative label value {neg}")));
            }
            let max = values.iter().copied().max().unwrap_or(0);
            let num_labels = u16::try_from(max + 1).map_err(|_| Error::LabelRange {
                value: max as u32,
                num_labels: u16::MAX as u32,
            })?;
            let voxels = values.into_iter().map(|v| v as u16).collect();
            Ok(Volume::Label(LabelVolume::new(h.grid.clone(), voxels, num_labels)?))
        }
        Some(values) => {
            let voxels = values.into_iter().map(|v| v as f32 * h.slope + h.inter).collect();
            Ok(Volume::Intensity(IntensityVolume::new(h.grid.clone(), voxels)?))
        }
        None => {
            let scale = has_scaling(h);
            let voxels = (0..n)
                .map(|i| {
                    let v = e.f32(payload, 4 * i);
                    if scale {
                        v * h.slope + h.inter
                    } else {
                        v
                    }
                })
                .collect();
            Ok(Volume::Intensity(IntensityVolume::new(h.grid.clone(), voxels)?))
        }
    }
}

/// Decode a single-file (`n+1`) NIfTI-1 image.
pub fn decode_nifti(bytes: &[u8]) -> Result<Volume> {
    let h = parse_header(bytes, b"n+1\0")?;
    if h.vox_offset < NIFTI_HEADER_LEN || h.vox_offset > bytes.len() {
        return Err(Error::Format(format!("vox_offset {} out of file", h.vox_offset)));
    }
    decode_payload(&h, &bytes[h.vox_offset..])
}

pub(super) fn decode_nifti_pair(hdr: &[u8], img: &[u8]) -> Result<Volume> {
    let h = parse_header(hdr, b"ni1\0")?;
    if h.vox_offset > img.len() {
        return Err(Error::Format(format!("vox_offset {} out of file", h.vox_offset)));
    }
    decode_payload(&h, &img[h.vox_offset..])
}

/// Encode as single-file NIfTI-1: labels as uint16, reals as float32.
pub fn encode_nifti(vol: &Volume) -> Vec<u8> {
    let grid = vol.grid();
    let mut h = vec![0u8; SINGLE_FILE_VOX_OFFSET];
    let put_i16 = |h: &mut [u8], o: usize, v: i16| h[o..o + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |h: &mut [u8], o: usize, v: f32| h[o..o + 4].copy_from_slice(&v.to_le_bytes());
    h[0..4].copy_from_slice(&348i32.to_le_bytes());
    put_i16(&mut h, off::DIM, 3);
    for a in 0..3 {
        put_i16(&mut h, off::DIM + 2 * (a + 1), grid.dims[a] as i16);
    }
    for i in 4..8 {
        put_i16(&mut h, off::DIM + 2 * i, 1);
    }
    let (dt, bitpix) = match vol {
        Volume::Label(_) => (DT_UINT16, 16),
        _ => (DT_FLOAT32, 32),
    };
    put_i16(&mut h, off::DATATYPE, dt);
    put_i16(&mut h, off::BITPIX, bitpix);
    put_f32(&mut h, off::PIXDIM, 1.0);
    for a in 0..3 {
        put_f32(&mut h, off::PIXDIM + 4 * (a + 1), grid.spacing[a] as f32);
    }
    put_f32(&mut h, off::VOX_OFFSET, SINGLE_FILE_VOX_OFFSET as f32);
    put_f32(&mut h, off::SCL_SLOPE, 1.0);
    put_f32(&mut h, off::SCL_INTER, 0.0);
    h[off::XYZT_UNITS] = 2;
    h[off::MAGIC..off::MAGIC + 4].copy_from_slice(b"n+1\0");
    match vol {
        Volume::Label(v) => v.voxels().iter().for_each(|x| h.extend_from_slice(&x.to_le_bytes())),
        Volume::Intensity(v) => v.voxels().iter().for_each(|x| h.extend_from_slice(&x.to_le_bytes())),
        Volume::Prob(v) => v.voxels().iter().for_each(|x| h.extend_from_slice(&x.to_le_bytes())),
    }
    h
}

pub fn write_nifti(vol: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_nifti(vol)).map_err(|e| Error::io(path, e))
}
