//! NIfTI-1 single-file (`.nii`, `.nii.gz`) reading and writing.
//!
//! Axis mapping: file axis i (dim[1]) is `D`, j (dim[2]) is `H`, k (dim[3])
//! is `W`, so `volume[d, h, w]` equals `array[i, j, k]` in the usual
//! Python tooling. The file stores i fastest; we transpose on the way in
//! and out.
//!
//! Orientation fields are carried verbatim and never applied. Two files
//! with different qform/sform describe the same voxel grid here.

use std::io::{Read, Write};

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use thiserror::Error;

use crate::tensor::Tensor;
use crate::volume::{LabelMap, Orientation, Volume};

pub const HEADER_SIZE: usize = 348;
pub const DATA_OFFSET: usize = 352;
pub const MAGIC_SINGLE: [u8; 4] = *b"n+1\0";
pub const MAGIC_PAIRED: [u8; 4] = *b"ni1\0";

/// Largest payload we agree to allocate (4 GiB).
const MAX_PAYLOAD: usize = 1 << 32;

const OFF_DIM: usize = 40;
const OFF_DATATYPE: usize = 70;
const OFF_BITPIX: usize = 72;
const OFF_PIXDIM: usize = 76;
const OFF_VOX_OFFSET: usize = 108;
const OFF_SCL_SLOPE: usize = 112;
const OFF_MAGIC: usize = 344;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
}

impl Datatype {
    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
        }
    }

    pub fn from_code(code: i16) -> Option<Self> {
        match code {
            2 => Some(Datatype::U8),
            4 => Some(Datatype::I16),
            8 => Some(Datatype::I32),
            16 => Some(Datatype::F32),
            _ => None,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NiftiError {
    #[error("file is {len} bytes, shorter than the {HEADER_SIZE}-byte header")]
    HeaderTruncated { len: usize },
    #[error("sizeof_hdr at offset 0 is {value} in either byte order, expected 348")]
    BadHeaderSize { value: i32 },
    #[error("paired-file magic \"ni1\" at offset 344; only single-file \"n+1\" is supported")]
    PairedFile,
    #[error("bad magic {found:?} at offset 344")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported datatype code {code} at offset 70")]
    UnsupportedDatatype { code: i16 },
    #[error("bitpix {bitpix} at offset 72 does not match datatype {code}")]
    BadBitpix { code: i16, bitpix: i16 },
    #[error("dim[{index}] = {value} at offset {offset}: {reason}")]
    BadDim {
        index: usize,
        value: i16,
        offset: usize,
        reason: &'static str,
    },
    #[error("pixdim[{index}] = {value} at offset {offset} is not a positive spacing")]
    BadSpacing {
        index: usize,
        value: f32,
        offset: usize,
    },
    #[error("vox_offset {value} at offset 108 must be an integer >= 352")]
    BadVoxOffset { value: f32 },
    #[error("scl_slope/scl_inter at offset 112 give a non-finite scaling")]
    BadScaling,
    #[error(
        "payload truncated: need {needed} bytes from offset {offset}, only {available} present"
    )]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("payload of {bytes} bytes exceeds the supported maximum")]
    TooLarge { bytes: u128 },
    #[error("gzip stream: {0}")]
    Gzip(String),
    #[error("non-finite voxel value at byte offset {offset}")]
    NonFinite { offset: usize },
    #[error("voxel at byte offset {offset} holds {value}, not a label in [0, 32767]")]
    BadLabel { offset: usize, value: f64 },
    #[error("label value {max} exceeds the int16 range")]
    LabelRange { max: u16 },
}

impl NiftiError {
    /// Stable numeric code, distinct per variant.
    pub fn code(&self) -> i32 {
        match self {
            NiftiError::HeaderTruncated { .. } => 1,
            NiftiError::BadHeaderSize { .. } => 2,
            NiftiError::PairedFile => 3,
            NiftiError::BadMagic { .. } => 4,
            NiftiError::UnsupportedDatatype { .. } => 5,
            NiftiError::BadBitpix { .. } => 6,
            NiftiError::BadDim { .. } => 7,
            NiftiError::BadSpacing { .. } => 8,
            NiftiError::BadVoxOffset { .. } => 9,
            NiftiError::BadScaling => 10,
            NiftiError::Truncated { .. } => 11,
            NiftiError::TooLarge { .. } => 12,
            NiftiError::Gzip(_) => 13,
            NiftiError::NonFinite { .. } => 14,
            NiftiError::BadLabel { .. } => 15,
            NiftiError::LabelRange { .. } => 16,
        }
    }
}

type NResult<T> = std::result::Result<T, NiftiError>;

/// The fields this crate reads and writes; everything else is zero on write.
#[derive(Clone, Debug, PartialEq)]
pub struct NiftiHeader {
    pub big_endian: bool,
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
}

struct Fields<'a> {
    b: &'a [u8],
    be: bool,
}

impl Fields<'_> {
    fn arr<const N: usize>(&self, off: usize) -> [u8; N] {
        let mut a = [0u8; N];
        a.copy_from_slice(&self.b[off..off + N]);
        a
    }
    fn i16(&self, off: usize) -> i16 {
        let a = self.arr(off);
        if self.be {
            i16::from_be_bytes(a)
        } else {
            i16::from_le_bytes(a)
        }
    }
    fn i32(&self, off: usize) -> i32 {
        let a = self.arr(off);
        if self.be {
            i32::from_be_bytes(a)
        } else {
            i32::from_le_bytes(a)
        }
    }
    fn f32(&self, off: usize) -> f32 {
        let a = self.arr(off);
        if self.be {
            f32::from_be_bytes(a)
        } else {
            f32::from_le_bytes(a)
        }
    }
}

impl NiftiHeader {
    /// Parses the fixed 348-byte block without validating semantics.
    pub fn parse(bytes: &[u8]) -> NResult<Self> {
        if bytes.len() < HEADER_SIZE {
            return Err(NiftiError::HeaderTruncated { len: bytes.len() });
        }
        let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let be = i32::from_be_bytes(bytes[0..4].try_into().unwrap());
        let big_endian = match (le, be) {
            (348, _) => false,
            (_, 348) => true,
            _ => return Err(NiftiError::BadHeaderSize { value: le }),
        };
        let f = Fields {
            b: bytes,
            be: big_endian,
        };
        debug_assert_eq!(f.i32(0), 348);
        let f32s = |off: usize, n: usize| (0..n).map(|i| f.f32(off + 4 * i)).collect::<Vec<_>>();
        Ok(NiftiHeader {
            big_endian,
            dim: std::array::from_fn(|i| f.i16(OFF_DIM + 2 * i)),
            datatype: f.i16(OFF_DATATYPE),
            bitpix: f.i16(OFF_BITPIX),
            pixdim: std::array::from_fn(|i| f.f32(OFF_PIXDIM + 4 * i)),
            vox_offset: f.f32(OFF_VOX_OFFSET),
            scl_slope: f.f32(OFF_SCL_SLOPE),
            scl_inter: f.f32(OFF_SCL_SLOPE + 4),
            xyzt_units: bytes[123],
            qform_code: f.i16(252),
            sform_code: f.i16(254),
            quatern: f32s(256, 3).try_into().unwrap(),
            qoffset: f32s(268, 3).try_into().unwrap(),
            srow: std::array::from_fn(|r| f32s(280 + 16 * r, 4).try_into().unwrap()),
            magic: f.arr(OFF_MAGIC),
        })
    }

    /// The 348-byte block plus the 4-byte empty extension flag.
    pub fn encode(&self) -> Vec<u8> {
        let mut b = vec![0u8; DATA_OFFSET];
        let be = self.big_endian;
        let mut put = |off: usize, v: &[u8]| b[off..off + v.len()].copy_from_slice(v);
        macro_rules! num {
            ($off:expr, $v:expr) => {
                put(
                    $off,
                    &if be {
                        $v.to_be_bytes()
                    } else {
                        $v.to_le_bytes()
                    },
                )
            };
        }
        num!(0, 348i32);
        for (i, d) in self.dim.iter().enumerate() {
            num!(OFF_DIM + 2 * i, *d);
        }
        num!(OFF_DATATYPE, self.datatype);
        num!(OFF_BITPIX, self.bitpix);
        for (i, p) in self.pixdim.iter().enumerate() {
            num!(OFF_PIXDIM + 4 * i, *p);
        }
        num!(OFF_VOX_OFFSET, self.vox_offset);
        num!(OFF_SCL_SLOPE, self.scl_slope);
        num!(OFF_SCL_SLOPE + 4, self.scl_inter);
        put(123, &[self.xyzt_units]);
        num!(252, self.qform_code);
        num!(254, self.sform_code);
        for i in 0..3 {
            num!(256 + 4 * i, self.quatern[i]);
            num!(268 + 4 * i, self.qoffset[i]);
        }
        for r in 0..3 {
            for c in 0..4 {
                num!(280 + 16 * r + 4 * c, self.srow[r][c]);
            }
        }
        put(OFF_MAGIC, &self.magic);
        b
    }

    fn validate(&self) -> NResult<(Datatype, [usize; 3], [f64; 3])> {
        if self.magic == MAGIC_PAIRED {
            return Err(NiftiError::PairedFile);
        }
        if self.magic != MAGIC_SINGLE {
            return Err(NiftiError::BadMagic { found: self.magic });
        }
        let dt = Datatype::from_code(self.datatype).ok_or(NiftiError::UnsupportedDatatype {
            code: self.datatype,
        })?;
        if self.bitpix as usize != dt.bytes() * 8 {
            return Err(NiftiError::BadBitpix {
                code: self.datatype,
                bitpix: self.bitpix,
            });
        }
        let ndim = self.dim[0];
        let bad = |index: usize, reason| NiftiError::BadDim {
            index,
            value: self.dim[index],
            offset: OFF_DIM + 2 * index,
            reason,
        };
        if !(3..=7).contains(&ndim) {
            return Err(bad(0, "only 3-D volumes are supported"));
        }
        for i in 1..=ndim as usize {
            if self.dim[i] < 1 {
                return Err(bad(i, "size must be positive"));
            }
            if i > 3 && self.dim[i] != 1 {
                return Err(bad(i, "dimensions beyond the third must be singleton"));
            }
        }
        let dims = [
            self.dim[1] as usize,
            self.dim[2] as usize,
            self.dim[3] as usize,
        ];
        let mut spacing = [0f64; 3];
        for a in 0..3 {
            let v = self.pixdim[a + 1];
            if !(v > 0.0) || !v.is_finite() {
                return Err(NiftiError::BadSpacing {
                    index: a + 1,
                    value: v,
                    offset: OFF_PIXDIM + 4 * (a + 1),
                });
            }
            spacing[a] = v as f64;
        }
        let off = self.vox_offset;
        if !off.is_finite() || off < DATA_OFFSET as f32 || off.fract() != 0.0 || off > 1e9 {
            return Err(NiftiError::BadVoxOffset { value: off });
        }
        Ok((dt, dims, spacing))
    }

    fn scaling(&self) -> NResult<Option<(f64, f64)>> {
        let (s, i) = (self.scl_slope, self.scl_inter);
        if s == 0.0 || s.is_nan() {
            return Ok(None);
        }
        if !s.is_finite() || !i.is_finite() {
            return Err(NiftiError::BadScaling);
        }
        Ok(Some((s as f64, i as f64)))
    }

    fn orientation(&self) -> Orientation {
        Orientation {
            qform_code: self.qform_code,
            sform_code: self.sform_code,
            quatern: self.quatern,
            qoffset: self.qoffset,
            qfac: self.pixdim[0],
            srow: self.srow,
            xyzt_units: self.xyzt_units,
        }
    }

    fn for_grid(
        dt: Datatype,
        dims: [usize; 3],
        spacing: [f64; 3],
        o: &Orientation,
    ) -> NResult<Self> {
        let mut dim = [1i16; 8];
        dim[0] = 3;
        for a in 0..3 {
            dim[a + 1] = i16::try_from(dims[a]).map_err(|_| NiftiError::BadDim {
                index: a + 1,
                value: i16::MAX,
                offset: OFF_DIM + 2 * (a + 1),
                reason: "axis longer than 32767 voxels",
            })?;
        }
        let mut pixdim = [1f32; 8];
        pixdim[0] = o.qfac;
        for a in 0..3 {
            pixdim[a + 1] = spacing[a] as f32;
        }
        Ok(NiftiHeader {
            big_endian: false,
            dim,
            datatype: dt.code(),
            bitpix: (dt.bytes() * 8) as i16,
            pixdim,
            vox_offset: DATA_OFFSET as f32,
            scl_slope: 1.0,
            scl_inter: 0.0,
            xyzt_units: o.xyzt_units,
            qform_code: o.qform_code,
            sform_code: o.sform_code,
            quatern: o.quatern,
            qoffset: o.qoffset,
            srow: o.srow,
            magic: MAGIC_SINGLE,
        })
    }
}

fn is_gzip(bytes: &[u8]) -> bool {
    bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b
}

/// Inflates only as many bytes as the header says the file needs.
fn inflate(bytes: &[u8]) -> NResult<Vec<u8>> {
    let mut dec = GzDecoder::new(bytes);
    let mut head = Vec::with_capacity(HEADER_SIZE);
    (&mut dec)
        .take(HEADER_SIZE as u64)
        .read_to_end(&mut head)
        .map_err(|e| NiftiError::Gzip(e.to_string()))?;
    let hdr = NiftiHeader::parse(&head)?;
    let (dt, dims, _) = hdr.validate()?;
    let need = payload_end(&hdr, dt, dims)?;
    let mut out = head;
    out.reserve(need.saturating_sub(HEADER_SIZE).min(1 << 26));
    dec.take((need - HEADER_SIZE) as u64)
        .read_to_end(&mut out)
        .map_err(|e| NiftiError::Gzip(e.to_string()))?;
    Ok(out)
}

fn payload_end(hdr: &NiftiHeader, dt: Datatype, dims: [usize; 3]) -> NResult<usize> {
    let bytes = dims.iter().map(|&d| d as u128).product::<u128>() * dt.bytes() as u128;
    let end = bytes + hdr.vox_offset as u128;
    if bytes > MAX_PAYLOAD as u128 {
        return Err(NiftiError::TooLarge { bytes });
    }
    Ok(end as usize)
}

/// Decoded raw voxels in D-H-W (row-major) order, as f64.
struct Raw {
    hdr: NiftiHeader,
    dt: Datatype,
    dims: [usize; 3],
    spacing: [f64; 3],
    values: Vec<f64>,
    offset: usize,
}

impl Raw {
    /// File byte offset of the voxel at row-major index `v`.
    fn byte_offset(&self, v: usize) -> usize {
        let [d, h, w] = self.dims;
        let (i, j, k) = (v / (h * w), (v / w) % h, v % w);
        self.offset + (i + d * (j + h * k)) * self.dt.bytes()
    }
}

fn decode(bytes: &[u8]) -> NResult<Raw> {
    let owned;
    let bytes = if is_gzip(bytes) {
        owned = inflate(bytes)?;
        &owned[..]
    } else {
        bytes
    };
    let hdr = NiftiHeader::parse(bytes)?;
    let (dt, dims, spacing) = hdr.validate()?;
    let end = payload_end(&hdr, dt, dims)?;
    let offset = hdr.vox_offset as usize;
    if bytes.len() < end {
        return Err(NiftiError::Truncated {
            offset,
            needed: end - offset,
            available: bytes.len().saturating_sub(offset),
        });
    }
    let [d, h, w] = dims;
    let n = d * h * w;
    let f = Fields {
        b: bytes,
        be: hdr.big_endian,
    };
    let at = |file_index: usize| -> f64 {
        let off = offset + file_index * dt.bytes();
        match dt {
            Datatype::U8 => bytes[off] as f64,
            Datatype::I16 => f.i16(off) as f64,
            Datatype::I32 => f.i32(off) as f64,
            Datatype::F32 => f.f32(off) as f64,
        }
    };
    let mut values = Vec::with_capacity(n);
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                values.push(at(z + d * (y + h * x)));
            }
        }
    }
    Ok(Raw {
        hdr,
        dt,
        dims,
        spacing,
        values,
        offset,
    })
}

/// Reads an image, applying `scl_slope`/`scl_inter` when the slope is non-zero.
pub fn read_volume(bytes: &[u8]) -> NResult<Volume> {
    let raw = decode(bytes)?;
    let scale = raw.hdr.scaling()?;
    let mut data = Vec::with_capacity(raw.values.len());
    for (v, &x) in raw.values.iter().enumerate() {
        let y = match scale {
            Some((s, i)) => (x * s + i) as f32,
            None => x as f32,
        };
        if !y.is_finite() {
            return Err(NiftiError::NonFinite {
                offset: raw.byte_offset(v),
            });
        }
        data.push(y);
    }
    let [d, h, w] = raw.dims;
    let tensor = Tensor::new(vec![1, d, h, w], data).expect("shape from validated header");
    let mut vol = Volume::new(tensor, raw.spacing).expect("validated spacing");
    vol.orientation = raw.hdr.orientation();
    Ok(vol)
}

/// Reads a label map; every scaled voxel value must be an integer in `[0, 32767]`.
pub fn read_labelmap(bytes: &[u8]) -> NResult<LabelMap> {
    let raw = decode(bytes)?;
    let scale = raw.hdr.scaling()?;
    let mut labels = Vec::with_capacity(raw.values.len());
    for (v, &x) in raw.values.iter().enumerate() {
        let y = match scale {
            Some((s, i)) => x * s + i,
            None => x,
        };
        if !(0.0..=32767.0).contains(&y) || y.fract() != 0.0 {
            return Err(NiftiError::BadLabel {
                offset: raw.byte_offset(v),
                value: y,
            });
        }
        labels.push(y as u16);
    }
    let mut lm = LabelMap::new(raw.dims, labels, raw.spacing).expect("validated header");
    lm.orientation = raw.hdr.orientation();
    Ok(lm)
}

fn encode_payload(
    hdr: &NiftiHeader,
    dims: [usize; 3],
    mut emit: impl FnMut(usize, &mut Vec<u8>),
) -> Vec<u8> {
    let [d, h, w] = dims;
    let mut out = hdr.encode();
    for x in 0..w {
        for y in 0..h {
            for z in 0..d {
                emit((z * h + y) * w + x, &mut out);
            }
        }
    }
    out
}

/// Little-endian float32 file with unit scaling; deterministic bytes.
pub fn write_volume(vol: &Volume) -> NResult<Vec<u8>> {
    let hdr = NiftiHeader::for_grid(Datatype::F32, vol.dims(), vol.spacing(), &vol.orientation)?;
    let data = vol.data().data();
    Ok(encode_payload(&hdr, vol.dims(), |v, out| {
        out.extend_from_slice(&data[v].to_le_bytes())
    }))
}

/// uint8 when every label fits, int16 otherwise.
pub fn write_labelmap(lm: &LabelMap) -> NResult<Vec<u8>> {
    let max = lm.max_label();
    if max > i16::MAX as u16 {
        return Err(NiftiError::LabelRange { max });
    }
    let dt = if max <= u8::MAX as u16 {
        Datatype::U8
    } else {
        Datatype::I16
    };
    let hdr = NiftiHeader::for_grid(dt, lm.dims(), lm.spacing(), &lm.orientation)?;
    let labels = lm.labels();
    Ok(encode_payload(&hdr, lm.dims(), |v, out| match dt {
        Datatype::U8 => out.push(labels[v] as u8),
        _ => out.extend_from_slice(&(labels[v] as i16).to_le_bytes()),
    }))
}

/// The uncompressed file: inflated if gzip, else a copy.
pub fn decompress(bytes: &[u8]) -> NResult<Vec<u8>> {
    if is_gzip(bytes) {
        inflate(bytes)
    } else {
        Ok(bytes.to_vec())
    }
}

pub fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

/// Gzips when `path` ends in `.gz`.
pub fn encode_for_path(path: &std::path::Path, bytes: Vec<u8>) -> Vec<u8> {
    if path.extension().is_some_and(|e| e == "gz") {
        gzip(&bytes)
    } else {
        bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_volume() -> Volume {
        let data: Vec<f32> = (0..60).map(|i| i as f32 * 0.25 - 3.0).collect();
        Volume::new(
            Tensor::new(vec![1, 5, 4, 3], data).unwrap(),
            [1.5, 0.75, 2.0],
        )
        .unwrap()
    }

    #[test]
    fn volume_round_trip() {
        let vol = sample_volume();
        let bytes = write_volume(&vol).unwrap();
        assert_eq!(bytes.len(), DATA_OFFSET + 60 * 4);
        assert_eq!(read_volume(&bytes).unwrap(), vol);
        assert_eq!(read_volume(&gzip(&bytes)).unwrap(), vol);
    }

    #[test]
    fn fortran_order_on_disk() {
        let vol = sample_volume();
        let bytes = write_volume(&vol).unwrap();
        // file index 1 is (i=1, j=0, k=0) -> row-major index 12
        let v = f32::from_le_bytes(bytes[DATA_OFFSET + 4..DATA_OFFSET + 8].try_into().unwrap());
        assert_eq!(v, vol.data().data()[12]);
    }

    #[test]
    fn zero_labels_layout() {
        let lm = LabelMap::filled([3, 4, 5], 0, [1.0; 3]).unwrap();
        let bytes = write_labelmap(&lm).unwrap();
        assert_eq!(bytes.len(), DATA_OFFSET + 60);
        assert!(bytes[DATA_OFFSET..].iter().all(|&b| b == 0));
        assert_eq!(read_labelmap(&bytes).unwrap(), lm);
    }

    #[test]
    fn wide_labels_use_int16() {
        let lm = LabelMap::new([1, 1, 3], vec![0, 300, 7], [1.0; 3]).unwrap();
        let bytes = write_labelmap(&lm).unwrap();
        assert_eq!(NiftiHeader::parse(&bytes).unwrap().datatype, 4);
        assert_eq!(read_labelmap(&bytes).unwrap(), lm);
        let too_big = LabelMap::new([1, 1, 1], vec![40000], [1.0; 3]).unwrap();
        assert_eq!(write_labelmap(&too_big).unwrap_err().code(), 16);
    }

    #[test]
    fn scaled_int16() {
        let lm = LabelMap::new([1, 1, 2], vec![5, 300], [1.0; 3]).unwrap();
        let mut bytes = write_labelmap(&lm).unwrap();
        bytes[OFF_SCL_SLOPE..OFF_SCL_SLOPE + 4].copy_from_slice(&2f32.to_le_bytes());
        bytes[OFF_SCL_SLOPE + 4..OFF_SCL_SLOPE + 8].copy_from_slice(&1f32.to_le_bytes());
        let vol = read_volume(&bytes).unwrap();
        assert_eq!(vol.data().data(), &[11.0, 601.0]);
    }

    #[test]
    fn rejections_are_typed() {
        let bytes = write_volume(&sample_volume()).unwrap();
        let mut paired = bytes.clone();
        paired[OFF_MAGIC..OFF_MAGIC + 4].copy_from_slice(&MAGIC_PAIRED);
        assert_eq!(read_volume(&paired).unwrap_err(), NiftiError::PairedFile);
        let truncated = &bytes[..bytes.len() - 1];
        assert!(matches!(
            read_volume(truncated),
            Err(NiftiError::Truncated { .. })
        ));
        assert!(matches!(
            read_volume(&bytes[..100]),
            Err(NiftiError::HeaderTruncated { .. })
        ));
        let mut four_d = bytes.clone();
        four_d[OFF_DIM..OFF_DIM + 2].copy_from_slice(&4i16.to_le_bytes());
        four_d[OFF_DIM + 8..OFF_DIM + 10].copy_from_slice(&2i16.to_le_bytes());
        let err = read_volume(&four_d).unwrap_err();
        assert!(err.to_string().contains("offset 48"), "{err}");
    }
}
