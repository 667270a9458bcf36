//! NIfTI-1 reading and writing (`.nii` and `.nii.gz`).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::grid::{det3, identity_affine, Affine, DataKind, Geometry, VoxelData, VoxelGrid};

const HEADER_SIZE: usize = 348;
const NIFTI2_HEADER_SIZE: i32 = 540;
const DEFAULT_VOX_OFFSET: usize = 352;

mod offsets {
    pub const SIZEOF_HDR: usize = 0;
    pub const DIM: usize = 40;
    pub const DATATYPE: usize = 70;
    pub const BITPIX: usize = 72;
    pub const PIXDIM: usize = 76;
    pub const VOX_OFFSET: usize = 108;
    pub const SCL_SLOPE: usize = 112;
    pub const SCL_INTER: usize = 116;
    pub const XYZT_UNITS: usize = 123;
    pub const DESCRIP: usize = 148;
    pub const QFORM_CODE: usize = 252;
    pub const SFORM_CODE: usize = 254;
    pub const QUATERN_B: usize = 256;
    pub const QOFFSET_X: usize = 268;
    pub const SROW_X: usize = 280;
    pub const MAGIC: usize = 344;
}

/// NIfTI-1 datatype code for an element kind.
pub fn datatype_code(kind: DataKind) -> i16 {
    match kind {
        DataKind::U8 => 2,
        DataKind::I16 => 4,
        DataKind::I32 => 8,
        DataKind::F32 => 16,
        DataKind::F64 => 64,
        DataKind::U16 => 512,
        DataKind::U32 => 768,
    }
}

fn kind_from_code(code: i16) -> Result<DataKind> {
    Ok(match code {
        2 => DataKind::U8,
        4 => DataKind::I16,
        8 => DataKind::I32,
        16 => DataKind::F32,
        64 => DataKind::F64,
        512 => DataKind::U16,
        768 => DataKind::U32,
        other => return Err(Error::UnsupportedDatatype(other)),
    })
}

/// The header fields this toolkit reads and writes.
#[derive(Debug, Clone, PartialEq)]
pub struct NiftiHeader {
    pub dim: [i16; 8],
    pub datatype: i16,
    pub bitpix: i16,
    pub pixdim: [f32; 8],
    pub vox_offset: f32,
    pub scl_slope: f32,
    pub scl_inter: f32,
    pub xyzt_units: u8,
    pub descrip: String,
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub big_endian: bool,
}

struct Reader<'a> {
    buf: &'a [u8],
    big_endian: bool,
}

impl Reader<'_> {
    fn i16(&self, at: usize) -> i16 {
        let b = [self.buf[at], self.buf[at + 1]];
        if self.big_endian {
            i16::from_be_bytes(b)
        } else {
            i16::from_le_bytes(b)
        }
    }

    fn f32(&self, at: usize) -> f32 {
        let b = [self.buf[at], self.buf[at + 1], self.buf[at + 2], self.buf[at + 3]];
        if self.big_endian {
            f32::from_be_bytes(b)
        } else {
            f32::from_le_bytes(b)
        }
    }
}

impl NiftiHeader {
    pub fn parse(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_SIZE {
            return Err(Error::MalformedHeader(format!(
                "file is {} bytes, shorter than the {HEADER_SIZE}-byte header",
                buf.len()
            )));
        }
        let raw = [buf[0], buf[1], buf[2], buf[3]];
        let big_endian = match (i32::from_le_bytes(raw), i32::from_be_bytes(raw)) {
            (348, _) => false,
            (_, 348) => true,
            (NIFTI2_HEADER_SIZE, _) | (_, NIFTI2_HEADER_SIZE) => {
                return Err(Error::MalformedHeader(
                    "NIfTI-2 files are not supported, convert to NIfTI-1".into(),
                ))
            }
            (other, _) => {
                return Err(Error::MalformedHeader(format!("sizeof_hdr is {other}, expected 348")))
            }
        };
        let magic = &buf[offsets::MAGIC..offsets::MAGIC + 4];
        if magic == b"ni1\0" {
            return Err(Error::MalformedHeader(
                "detached .hdr/.img pairs are not supported".into(),
            ));
        }
        if magic != b"n+1\0" {
            return Err(Error::MalformedHeader(format!("bad magic {magic:?}")));
        }
        let r = Reader { buf, big_endian };
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = r.i16(offsets::DIM + 2 * i);
        }
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = r.f32(offsets::PIXDIM + 4 * i);
        }
        let mut srow = [[0f32; 4]; 3];
        for (row, vals) in srow.iter_mut().enumerate() {
            for (c, v) in vals.iter_mut().enumerate() {
                *v = r.f32(offsets::SROW_X + 16 * row + 4 * c);
            }
        }
        let descrip_raw = &buf[offsets::DESCRIP..offsets::DESCRIP + 80];
        let end = descrip_raw.iter().position(|&b| b == 0).unwrap_or(80);
        Ok(NiftiHeader {
            dim,
            datatype: r.i16(offsets::DATATYPE),
            bitpix: r.i16(offsets::BITPIX),
            pixdim,
            vox_offset: r.f32(offsets::VOX_OFFSET),
            scl_slope: r.f32(offsets::SCL_SLOPE),
            scl_inter: r.f32(offsets::SCL_INTER),
            xyzt_units: buf[offsets::XYZT_UNITS],
            descrip: String::from_utf8_lossy(&descrip_raw[..end]).into_owned(),
            qform_code: r.i16(offsets::QFORM_CODE),
            sform_code: r.i16(offsets::SFORM_CODE),
            quatern: [
                r.f32(offsets::QUATERN_B),
                r.f32(offsets::QUATERN_B + 4),
                r.f32(offsets::QUATERN_B + 8),
            ],
            qoffset: [
                r.f32(offsets::QOFFSET_X),
                r.f32(offsets::QOFFSET_X + 4),
                r.f32(offsets::QOFFSET_X + 8),
            ],
            srow,
            big_endian,
        })
    }

    /// Spatial dims, rejecting non-singleton dimensions beyond the third.
    pub fn spatial_dims(&self) -> Result<[usize; 3]> {
        let ndim = self.dim[0];
        if !(1..=7).contains(&ndim) {
            return Err(Error::MalformedHeader(format!("dim[0] = {ndim}")));
        }
        let ndim = ndim as usize;
        let mut dims = [1usize; 3];
        for i in 1..=ndim {
            let d = self.dim[i];
            if d < 1 {
                return Err(Error::MalformedHeader(format!("dim[{i}] = {d}")));
            }
            if i <= 3 {
                dims[i - 1] = d as usize;
            } else if d != 1 {
                return Err(Error::UnsupportedDimensions(format!(
                    "dimension {i} has size {d}; only 3D volumes are supported"
                )));
            }
        }
        Ok(dims)
    }

    fn qform_affine(&self) -> Affine {
        let [b, c, d] = self.quatern.map(|v| v as f64);
        let mut a2 = 1.0 - (b * b + c * c + d * d);
        let (b, c, d) = if a2 < 1e-7 {
            let n = (b * b + c * c + d * d).sqrt();
            a2 = 0.0;
            (b / n, c / n, d / n)
        } else {
            (b, c, d)
        };
        let a = a2.sqrt();
        let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
        let sx = self.pixdim[1] as f64;
        let sy = self.pixdim[2] as f64;
        let sz = self.pixdim[3] as f64 * qfac;
        let r = [
            [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
            [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
            [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ];
        let mut m = identity_affine();
        for row in 0..3 {
            m[row][0] = r[row][0] * sx;
            m[row][1] = r[row][1] * sy;
            m[row][2] = r[row][2] * sz;
            m[row][3] = self.qoffset[row] as f64;
        }
        m
    }

    /// Voxel-to-world affine: sform if set, else qform, else diagonal pixdim.
    pub fn affine(&self) -> Affine {
        if self.sform_code > 0 {
            let mut m = identity_affine();
            for r in 0..3 {
                for c in 0..4 {
                    m[r][c] = self.srow[r][c] as f64;
                }
            }
            if det3(&[
                [m[0][0], m[0][1], m[0][2]],
                [m[1][0], m[1][1], m[1][2]],
                [m[2][0], m[2][1], m[2][2]],
            ])
            .abs()
                > 0.0
            {
                return m;
            }
        }
        if self.qform_code > 0 {
            return self.qform_affine();
        }
        let mut m = identity_affine();
        for i in 0..3 {
            let p = self.pixdim[i + 1].abs() as f64;
            m[i][i] = if p > 0.0 { p } else { 1.0 };
        }
        m
    }

    /// Slope/intercept to apply, if the header requests non-identity scaling.
    pub fn scaling(&self) -> Option<(f64, f64)> {
        let slope = self.scl_slope as f64;
        let inter = self.scl_inter as f64;
        if !slope.is_finite() || slope == 0.0 {
            return None;
        }
        let inter = if inter.is_finite() { inter } else { 0.0 };
        if slope == 1.0 && inter == 0.0 {
            None
        } else {
            Some((slope, inter))
        }
    }
}

fn maybe_gunzip(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.len() >= 2 && bytes[0] == 0x1f && bytes[1] == 0x8b {
        let mut out = Vec::new();
        GzDecoder::new(bytes.as_slice())
            .read_to_end(&mut out)
            .map_err(|e| Error::MalformedHeader(format!("gzip stream: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn decode_data(buf: &[u8], kind: DataKind, n: usize, big_endian: bool) -> VoxelData {
    macro_rules! decode {
        ($t:ty, $size:expr, $variant:ident) => {{
            let v = buf[..n * $size]
                .chunks_exact($size)
                .map(|c| {
                    let arr: [u8; $size] = c.try_into().unwrap();
                    if big_endian {
                        <$t>::from_be_bytes(arr)
                    } else {
                        <$t>::from_le_bytes(arr)
                    }
                })
                .collect();
            VoxelData::$variant(v)
        }};
    }
    match kind {
        DataKind::U8 => VoxelData::U8(buf[..n].to_vec()),
        DataKind::U16 => decode!(u16, 2, U16),
        DataKind::U32 => decode!(u32, 4, U32),
        DataKind::I16 => decode!(i16, 2, I16),
        DataKind::I32 => decode!(i32, 4, I32),
        DataKind::F32 => decode!(f32, 4, F32),
        DataKind::F64 => decode!(f64, 8, F64),
    }
}

/// Decodes a NIfTI-1 image held in memory (optionally gzip-compressed).
pub fn decode_nifti(bytes: Vec<u8>) -> Result<VoxelGrid> {
    let buf = maybe_gunzip(bytes)?;
    let header = NiftiHeader::parse(&buf)?;
    let dims = header.spatial_dims()?;
    let kind = kind_from_code(header.datatype)?;
    let offset = if header.vox_offset.is_finite() && header.vox_offset >= HEADER_SIZE as f32 {
        header.vox_offset as usize
    } else {
        DEFAULT_VOX_OFFSET
    };
    let n: usize = dims.iter().product();
    let expected = n * kind.bytes();
    let available = buf.len().saturating_sub(offset);
    if available < expected {
        return Err(Error::TruncatedPayload {
            expected,
            found: available,
        });
    }
    let geometry = Geometry::new(dims, header.affine())?;
    let mut data = decode_data(&buf[offset..], kind, n, header.big_endian);
    if let Some((slope, inter)) = header.scaling() {
        let scaled: Vec<f64> = data.to_f64_vec().iter().map(|v| v * slope + inter).collect();
        data = VoxelData::F64(scaled);
    }
    VoxelGrid::new(geometry, data)
}

/// Reads a `.nii` or `.nii.gz` file; gzip is detected from the stream, not the extension.
pub fn load_nifti(path: impl AsRef<Path>) -> Result<VoxelGrid> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_nifti(bytes)
}

/// Reads only the header of a NIfTI-1 file.
pub fn read_header(path: impl AsRef<Path>) -> Result<NiftiHeader> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    NiftiHeader::parse(&maybe_gunzip(bytes)?)
}

/// Quaternion parameters (b, c, d), qfac for the rotation part of an affine.
fn affine_to_quaternion(affine: &Affine) -> ([f64; 3], f64) {
    let mut cols = [[0.0; 3]; 3];
    for c in 0..3 {
        let norm = (0..3).map(|r| affine[r][c].powi(2)).sum::<f64>().sqrt();
        let norm = if norm > 0.0 { norm } else { 1.0 };
        for r in 0..3 {
            cols[c][r] = affine[r][c] / norm;
        }
    }
    // Gram-Schmidt so sheared affines still yield a rotation
    let dot = |a: &[f64; 3], b: &[f64; 3]| a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let normalize = |v: [f64; 3]| {
        let n = dot(&v, &v).sqrt();
        [v[0] / n, v[1] / n, v[2] / n]
    };
    let c0 = cols[0];
    let p = dot(&cols[1], &c0);
    let c1 = normalize([cols[1][0] - p * c0[0], cols[1][1] - p * c0[1], cols[1][2] - p * c0[2]]);
    let p0 = dot(&cols[2], &c0);
    let p1 = dot(&cols[2], &c1);
    let mut c2 = normalize([
        cols[2][0] - p0 * c0[0] - p1 * c1[0],
        cols[2][1] - p0 * c0[1] - p1 * c1[1],
        cols[2][2] - p0 * c0[2] - p1 * c1[2],
    ]);
    let rot = [[c0[0], c1[0], c2[0]], [c0[1], c1[1], c2[1]], [c0[2], c1[2], c2[2]]];
    let qfac = if det3(&rot) < 0.0 {
        c2 = [-c2[0], -c2[1], -c2[2]];
        -1.0
    } else {
        1.0
    };
    let r = [[c0[0], c1[0], c2[0]], [c0[1], c1[1], c2[1]], [c0[2], c1[2], c2[2]]];
    let (r11, r12, r13) = (r[0][0], r[0][1], r[0][2]);
    let (r21, r22, r23) = (r[1][0], r[1][1], r[1][2]);
    let (r31, r32, r33) = (r[2][0], r[2][1], r[2][2]);
    let trace = r11 + r22 + r33 + 1.0;
    let (mut a, mut b, mut c, mut d);
    if trace > 0.5 {
        a = 0.5 * trace.sqrt();
        b = 0.25 * (r32 - r23) / a;
        c = 0.25 * (r13 - r31) / a;
        d = 0.25 * (r21 - r12) / a;
    } else {
        let xd = 1.0 + r11 - (r22 + r33);
        let yd = 1.0 + r22 - (r11 + r33);
        let zd = 1.0 + r33 - (r11 + r22);
        if xd > 1.0 {
            b = 0.5 * xd.sqrt();
            c = 0.25 * (r12 + r21) / b;
            d = 0.25 * (r13 + r31) / b;
            a = 0.25 * (r32 - r23) / b;
        } else if yd > 1.0 {
            c = 0.5 * yd.sqrt();
            b = 0.25 * (r12 + r21) / c;
            d = 0.25 * (r23 + r32) / c;
            a = 0.25 * (r13 - r31) / c;
        } else {
            d = 0.5 * zd.sqrt();
            b = 0.25 * (r13 + r31) / d;
            c = 0.25 * (r23 + r32) / d;
            a = 0.25 * (r21 - r12) / d;
        }
        if a < 0.0 {
            a = -a;
            b = -b;
            c = -c;
            d = -d;
        }
    }
    let _ = a;
    ([b, c, d], qfac)
}

/// Builds the header the writer emits for a grid.
pub fn header_for(grid: &VoxelGrid) -> NiftiHeader {
    let dims = grid.dims();
    let spacing = grid.spacing();
    let affine = grid.affine();
    let kind = grid.data().kind();
    let (quatern, qfac) = affine_to_quaternion(affine);
    let mut srow = [[0f32; 4]; 3];
    for (r, row) in srow.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = affine[r][c] as f32;
        }
    }
    NiftiHeader {
        dim: [3, dims[0] as i16, dims[1] as i16, dims[2] as i16, 1, 1, 1, 1],
        datatype: datatype_code(kind),
        bitpix: (kind.bytes() * 8) as i16,
        pixdim: [
            qfac as f32,
            spacing[0] as f32,
            spacing[1] as f32,
            spacing[2] as f32,
            0.0,
            0.0,
            0.0,
            0.0,
        ],
        vox_offset: DEFAULT_VOX_OFFSET as f32,
        scl_slope: 1.0,
        scl_inter: 0.0,
        xyzt_units: 2,
        descrip: String::from("uhfsegkit"),
        qform_code: 1,
        sform_code: 1,
        quatern: quatern.map(|v| v as f32),
        qoffset: [affine[0][3] as f32, affine[1][3] as f32, affine[2][3] as f32],
        srow,
        big_endian: false,
    }
}

fn encode_header(h: &NiftiHeader) -> Vec<u8> {
    let mut buf = vec![0u8; DEFAULT_VOX_OFFSET];
    let put_i16 = |buf: &mut Vec<u8>, at: usize, v: i16| buf[at..at + 2].copy_from_slice(&v.to_le_bytes());
    let put_f32 = |buf: &mut Vec<u8>, at: usize, v: f32| buf[at..at + 4].copy_from_slice(&v.to_le_bytes());
    buf[offsets::SIZEOF_HDR..4].copy_from_slice(&(HEADER_SIZE as i32).to_le_bytes());
    for (i, d) in h.dim.iter().enumerate() {
        put_i16(&mut buf, offsets::DIM + 2 * i, *d);
    }
    put_i16(&mut buf, offsets::DATATYPE, h.datatype);
    put_i16(&mut buf, offsets::BITPIX, h.bitpix);
    for (i, p) in h.pixdim.iter().enumerate() {
        put_f32(&mut buf, offsets::PIXDIM + 4 * i, *p);
    }
    put_f32(&mut buf, offsets::VOX_OFFSET, h.vox_offset);
    put_f32(&mut buf, offsets::SCL_SLOPE, h.scl_slope);
    put_f32(&mut buf, offsets::SCL_INTER, h.scl_inter);
    buf[offsets::XYZT_UNITS] = h.xyzt_units;
    let descrip = h.descrip.as_bytes();
    let n = descrip.len().min(79);
    buf[offsets::DESCRIP..offsets::DESCRIP + n].copy_from_slice(&descrip[..n]);
    put_i16(&mut buf, offsets::QFORM_CODE, h.qform_code);
    put_i16(&mut buf, offsets::SFORM_CODE, h.sform_code);
    for i in 0..3 {
        put_f32(&mut buf, offsets::QUATERN_B + 4 * i, h.quatern[i]);
        put_f32(&mut buf, offsets::QOFFSET_X + 4 * i, h.qoffset[i]);
    }
    for r in 0..3 {
        for c in 0..4 {
            put_f32(&mut buf, offsets::SROW_X + 16 * r + 4 * c, h.srow[r][c]);
        }
    }
    buf[offsets::MAGIC..offsets::MAGIC + 4].copy_from_slice(b"n+1\0");
    buf
}

/// Serializes a grid as an uncompressed little-endian NIfTI-1 byte stream.
pub fn encode_nifti(grid: &VoxelGrid) -> Vec<u8> {
    encode_with_header(grid, &header_for(grid))
}

fn encode_with_header(grid: &VoxelGrid, header: &NiftiHeader) -> Vec<u8> {
    let mut buf = encode_header(header);
    buf.reserve(grid.data().len() * grid.data().kind().bytes());
    match grid.data() {
        VoxelData::U8(v) => buf.extend_from_slice(v),
        VoxelData::U16(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        VoxelData::U32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        VoxelData::I16(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        VoxelData::I32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        VoxelData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        VoxelData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
    }
    buf
}

pub fn gzip_bytes(bytes: &[u8]) -> Vec<u8> {
    let mut enc = GzEncoder::new(Vec::new(), Compression::default());
    enc.write_all(bytes).expect("writing to a Vec cannot fail");
    enc.finish().expect("writing to a Vec cannot fail")
}

/// Writes a grid; `compress` selects a gzip stream regardless of the file extension.
pub fn save_nifti(grid: &VoxelGrid, path: impl AsRef<Path>, compress: bool) -> Result<()> {
    let path = path.as_ref();
    let raw = encode_nifti(grid);
    let bytes = if compress { gzip_bytes(&raw) } else { raw };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// As [`save_nifti`], with `descrip` (truncated to 79 bytes) in the header's description field.
pub fn save_nifti_described(grid: &VoxelGrid, path: impl AsRef<Path>, compress: bool, descrip: &str) -> Result<()> {
    let path = path.as_ref();
    let mut header = header_for(grid);
    header.descrip = descrip.to_string();
    let raw = encode_with_header(grid, &header);
    let bytes = if compress { gzip_bytes(&raw) } else { raw };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// True when a path ends in `.gz`.
pub fn wants_gzip(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("gz"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_grid(kind: DataKind) -> VoxelGrid {
        let mut a = identity_affine();
        a[0][0] = 0.8;
        a[1][1] = 0.8;
        a[2][2] = 0.8;
        a[0][3] = -10.0;
        a[2][3] = 5.0;
        let geom = Geometry::new([4, 4, 4], a).unwrap();
        let values: Vec<f64> = (0..64).map(|x| (x * 3 % 17) as f64).collect();
        VoxelGrid::new(geom, VoxelData::from_f64(kind, &values)).unwrap()
    }

    #[test]
    fn wrong_magic_is_malformed() {
        let mut bytes = encode_nifti(&small_grid(DataKind::F32));
        bytes[offsets::MAGIC] = b'x';
        assert!(matches!(decode_nifti(bytes), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn nifti2_rejected_with_message() {
        let mut bytes = encode_nifti(&small_grid(DataKind::F32));
        bytes[0..4].copy_from_slice(&540i32.to_le_bytes());
        let err = decode_nifti(bytes).unwrap_err();
        assert!(err.to_string().contains("NIfTI-2"));
    }

    #[test]
    fn unsupported_datatype() {
        let mut bytes = encode_nifti(&small_grid(DataKind::U8));
        bytes[offsets::DATATYPE..offsets::DATATYPE + 2].copy_from_slice(&256i16.to_le_bytes());
        assert!(matches!(decode_nifti(bytes), Err(Error::UnsupportedDatatype(256))));
    }

    #[test]
    fn truncated_payload() {
        let mut bytes = encode_nifti(&small_grid(DataKind::F32));
        bytes.truncate(bytes.len() - 5);
        assert!(matches!(decode_nifti(bytes), Err(Error::TruncatedPayload { .. })));
    }

    #[test]
    fn four_d_with_frames_rejected() {
        let mut bytes = encode_nifti(&small_grid(DataKind::U8));
        bytes[offsets::DIM..offsets::DIM + 2].copy_from_slice(&4i16.to_le_bytes());
        bytes[offsets::DIM + 8..offsets::DIM + 10].copy_from_slice(&2i16.to_le_bytes());
        assert!(matches!(decode_nifti(bytes), Err(Error::UnsupportedDimensions(_))));
    }

    #[test]
    fn four_d_singleton_accepted() {
        let mut bytes = encode_nifti(&small_grid(DataKind::U8));
        bytes[offsets::DIM..offsets::DIM + 2].copy_from_slice(&4i16.to_le_bytes());
        let g = decode_nifti(bytes).unwrap();
        assert_eq!(g.dims(), [4, 4, 4]);
    }

    #[test]
    fn scaling_applied() {
        let geom = Geometry::with_spacing([1, 1, 1], [1.0; 3]).unwrap();
        let grid = VoxelGrid::new(geom, VoxelData::U8(vec![3])).unwrap();
        let mut bytes = encode_nifti(&grid);
        bytes[offsets::SCL_SLOPE..offsets::SCL_SLOPE + 4].copy_from_slice(&2f32.to_le_bytes());
        bytes[offsets::SCL_INTER..offsets::SCL_INTER + 4].copy_from_slice(&1f32.to_le_bytes());
        let g = decode_nifti(bytes).unwrap();
        assert_eq!(g.data().get_f64(0), 7.0);
    }

    #[test]
    fn big_endian_read() {
        let grid = small_grid(DataKind::I16);
        let le = encode_nifti(&grid);
        let mut be = le.clone();
        let swap = |b: &mut [u8], at: usize, n: usize| b[at..at + n].reverse();
        swap(&mut be, 0, 4);
        for i in 0..8 {
            swap(&mut be, offsets::DIM + 2 * i, 2);
            swap(&mut be, offsets::PIXDIM + 4 * i, 4);
        }
        for at in [offsets::DATATYPE, offsets::BITPIX, offsets::QFORM_CODE, offsets::SFORM_CODE] {
            swap(&mut be, at, 2);
        }
        for at in [offsets::VOX_OFFSET, offsets::SCL_SLOPE, offsets::SCL_INTER] {
            swap(&mut be, at, 4);
        }
        for i in 0..6 {
            swap(&mut be, offsets::QUATERN_B + 4 * i, 4);
        }
        for i in 0..12 {
            swap(&mut be, offsets::SROW_X + 4 * i, 4);
        }
        for i in 0..64 {
            swap(&mut be, DEFAULT_VOX_OFFSET + 2 * i, 2);
        }
        let g = decode_nifti(be).unwrap();
        assert_eq!(g.data(), grid.data());
    }

    #[test]
    fn qform_only_reproduces_affine() {
        // oblique rotation about z by 30 degrees, with an axis flip
        let (s, c) = (30f64.to_radians().sin(), 30f64.to_radians().cos());
        let mut a = identity_affine();
        a[0][0] = c * 0.9;
        a[0][1] = -s * 1.1;
        a[1][0] = s * 0.9;
        a[1][1] = c * 1.1;
        a[2][2] = -1.3;
        a[0][3] = 12.5;
        a[1][3] = -3.0;
        a[2][3] = 40.0;
        let geom = Geometry::new([2, 2, 2], a).unwrap();
        let grid = VoxelGrid::new(geom, VoxelData::U8(vec![0; 8])).unwrap();
        let mut bytes = encode_nifti(&grid);
        bytes[offsets::SFORM_CODE..offsets::SFORM_CODE + 2].copy_from_slice(&0i16.to_le_bytes());
        let back = decode_nifti(bytes).unwrap();
        for r in 0..3 {
            for col in 0..4 {
                assert!((back.affine()[r][col] - a[r][col]).abs() < 1e-5, "{r},{col}");
            }
        }
    }

    #[test]
    fn no_xform_falls_back_to_pixdim() {
        let grid = small_grid(DataKind::U8);
        let mut bytes = encode_nifti(&grid);
        bytes[offsets::SFORM_CODE..offsets::SFORM_CODE + 2].copy_from_slice(&0i16.to_le_bytes());
        bytes[offsets::QFORM_CODE..offsets::QFORM_CODE + 2].copy_from_slice(&0i16.to_le_bytes());
        let back = decode_nifti(bytes).unwrap();
        assert!((back.affine()[0][0] - 0.8).abs() < 1e-6);
        assert_eq!(back.affine()[0][3], 0.0);
    }
}
