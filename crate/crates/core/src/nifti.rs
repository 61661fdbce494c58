//! Single-file NIfTI-1 reader/writer (`.nii`, optionally gzipped).

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;

use crate::error::{Error, Result};
use crate::geometry::AffineMatrix;
use crate::volume::{Grid, LabelMap, Volume};

pub const HEADER_SIZE: usize = 348;
pub const VOX_OFFSET: usize = 352;
const XFORM_SCANNER: i16 = 1;
const UNITS_MM: u8 = 2;

/// Supported on-disk voxel types.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Datatype {
    U8,
    I16,
    I32,
    F32,
}

impl Datatype {
    pub fn from_code(code: i16) -> Result<Datatype> {
        match code {
            2 => Ok(Datatype::U8),
            4 => Ok(Datatype::I16),
            8 => Ok(Datatype::I32),
            16 => Ok(Datatype::F32),
            other => Err(Error::UnsupportedDatatype(other)),
        }
    }

    pub fn code(self) -> i16 {
        match self {
            Datatype::U8 => 2,
            Datatype::I16 => 4,
            Datatype::I32 => 8,
            Datatype::F32 => 16,
        }
    }

    pub fn bytes(self) -> usize {
        match self {
            Datatype::U8 => 1,
            Datatype::I16 => 2,
            Datatype::I32 | Datatype::F32 => 4,
        }
    }

    fn range(self) -> (f64, f64) {
        match self {
            Datatype::U8 => (0.0, u8::MAX as f64),
            Datatype::I16 => (i16::MIN as f64, i16::MAX as f64),
            Datatype::I32 => (i32::MIN as f64, i32::MAX as f64),
            Datatype::F32 => (f32::MIN as f64, f32::MAX as f64),
        }
    }
}

/// The header fields this crate reads or writes.
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
    pub qform_code: i16,
    pub sform_code: i16,
    pub quatern: [f32; 3],
    pub qoffset: [f32; 3],
    pub srow: [[f32; 4]; 3],
    pub magic: [u8; 4],
    /// Header was stored in the opposite byte order.
    pub swapped: bool,
}

impl NiftiHeader {
    fn for_grid(grid: &Grid, dt: Datatype) -> NiftiHeader {
        let d = grid.dims;
        let mut srow = [[0.0f32; 4]; 3];
        for (r, row) in srow.iter_mut().enumerate() {
            for c in 0..4 {
                row[c] = grid.affine.0[r][c] as f32;
            }
        }
        NiftiHeader {
            dim: [3, d[0] as i16, d[1] as i16, d[2] as i16, 1, 1, 1, 1],
            datatype: dt.code(),
            bitpix: (dt.bytes() * 8) as i16,
            pixdim: [
                1.0,
                grid.voxel_size[0] as f32,
                grid.voxel_size[1] as f32,
                grid.voxel_size[2] as f32,
                0.0,
                0.0,
                0.0,
                0.0,
            ],
            vox_offset: VOX_OFFSET as f32,
            scl_slope: 0.0,
            scl_inter: 0.0,
            xyzt_units: UNITS_MM,
            qform_code: 0,
            sform_code: XFORM_SCANNER,
            quatern: [0.0; 3],
            qoffset: [0.0; 3],
            srow,
            magic: *b"n+1\0",
            swapped: false,
        }
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.dim[1] as usize, self.dim[2] as usize, self.dim[3] as usize]
    }

    /// Voxel → world: sform, else qform, else diagonal pixdim.
    pub fn affine(&self) -> AffineMatrix {
        if self.sform_code > 0 {
            let mut m = AffineMatrix::identity();
            for r in 0..3 {
                for c in 0..4 {
                    m.0[r][c] = self.srow[r][c] as f64;
                }
            }
            return m;
        }
        let px = [self.pixdim[1] as f64, self.pixdim[2] as f64, self.pixdim[3] as f64];
        if self.qform_code > 0 {
            let [b, c, d] = self.quatern.map(|v| v as f64);
            let a = (1.0 - b * b - c * c - d * d).max(0.0).sqrt();
            let r = [
                [a * a + b * b - c * c - d * d, 2.0 * (b * c - a * d), 2.0 * (b * d + a * c)],
                [2.0 * (b * c + a * d), a * a + c * c - b * b - d * d, 2.0 * (c * d - a * b)],
                [2.0 * (b * d - a * c), 2.0 * (c * d + a * b), a * a + d * d - c * c - b * b],
            ];
            let qfac = if self.pixdim[0] < 0.0 { -1.0 } else { 1.0 };
            let s = [px[0], px[1], qfac * px[2]];
            let mut l = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    l[i][j] = r[i][j] * s[j];
                }
            }
            return AffineMatrix::from_linear(l, self.qoffset.map(|v| v as f64));
        }
        AffineMatrix::scaling(px)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut h = vec![0u8; VOX_OFFSET];
        let mut w = Writer { buf: &mut h, swap: self.swapped };
        w.i32(0, HEADER_SIZE as i32);
        for (i, d) in self.dim.iter().enumerate() {
            w.i16(40 + 2 * i, *d);
        }
        w.i16(70, self.datatype);
        w.i16(72, self.bitpix);
        for (i, p) in self.pixdim.iter().enumerate() {
            w.f32(76 + 4 * i, *p);
        }
        w.f32(108, self.vox_offset);
        w.f32(112, self.scl_slope);
        w.f32(116, self.scl_inter);
        w.buf[123] = self.xyzt_units;
        w.i16(252, self.qform_code);
        w.i16(254, self.sform_code);
        for i in 0..3 {
            w.f32(256 + 4 * i, self.quatern[i]);
            w.f32(268 + 4 * i, self.qoffset[i]);
        }
        for r in 0..3 {
            for c in 0..4 {
                w.f32(280 + 16 * r + 4 * c, self.srow[r][c]);
            }
        }
        h[344..348].copy_from_slice(&self.magic);
        h
    }

    pub fn decode(bytes: &[u8]) -> Result<NiftiHeader> {
        if bytes.len() < HEADER_SIZE {
            return Err(Error::Truncated { expected: HEADER_SIZE, found: bytes.len() });
        }
        let le = i32::from_le_bytes(bytes[0..4].try_into().unwrap());
        let swapped = if le == HEADER_SIZE as i32 {
            cfg!(target_endian = "big")
        } else if i32::from_be_bytes(bytes[0..4].try_into().unwrap()) == HEADER_SIZE as i32 {
            cfg!(target_endian = "little")
        } else {
            return Err(Error::UnsupportedLayout(format!("sizeof_hdr is {le}, not 348 in either byte order (NIfTI-2?)")));
        };
        let mut magic = [0u8; 4];
        magic.copy_from_slice(&bytes[344..348]);
        match &magic {
            b"n+1\0" => {}
            b"ni1\0" => return Err(Error::UnsupportedLayout("separate .hdr/.img pairs are not supported".into())),
            _ => return Err(Error::BadMagic(magic)),
        }
        let r = Reader { buf: bytes, swap: swapped };
        let mut dim = [0i16; 8];
        for (i, d) in dim.iter_mut().enumerate() {
            *d = r.i16(40 + 2 * i);
        }
        let mut pixdim = [0f32; 8];
        for (i, p) in pixdim.iter_mut().enumerate() {
            *p = r.f32(76 + 4 * i);
        }
        let mut srow = [[0f32; 4]; 3];
        for (ri, row) in srow.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = r.f32(280 + 16 * ri + 4 * c);
            }
        }
        Ok(NiftiHeader {
            dim,
            datatype: r.i16(70),
            bitpix: r.i16(72),
            pixdim,
            vox_offset: r.f32(108),
            scl_slope: r.f32(112),
            scl_inter: r.f32(116),
            xyzt_units: bytes[123],
            qform_code: r.i16(252),
            sform_code: r.i16(254),
            quatern: [r.f32(256), r.f32(260), r.f32(264)],
            qoffset: [r.f32(268), r.f32(272), r.f32(276)],
            srow,
            magic,
            swapped,
        })
    }

    fn check_layout(&self) -> Result<()> {
        let nd = self.dim[0];
        let extra_singleton = self.dim[4..].iter().take((nd.max(3) - 3) as usize).all(|d| *d == 1);
        if !(3..=7).contains(&nd) || !extra_singleton {
            return Err(Error::UnsupportedLayout(format!("only 3D volumes are supported, dim = {:?}", self.dim)));
        }
        if self.dim[1..4].iter().any(|d| *d <= 0) {
            return Err(Error::UnsupportedLayout(format!("non-positive dimension in {:?}", self.dim)));
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    swap: bool,
}

impl Reader<'_> {
    fn bytes<const N: usize>(&self, at: usize) -> [u8; N] {
        let mut b: [u8; N] = self.buf[at..at + N].try_into().unwrap();
        if self.swap {
            b.reverse();
        }
        b
    }
    fn i16(&self, at: usize) -> i16 {
        i16::from_ne_bytes(self.bytes(at))
    }
    fn f32(&self, at: usize) -> f32 {
        f32::from_ne_bytes(self.bytes(at))
    }
}

struct Writer<'a> {
    buf: &'a mut [u8],
    swap: bool,
}

impl Writer<'_> {
    fn put<const N: usize>(&mut self, at: usize, mut b: [u8; N]) {
        if self.swap {
            b.reverse();
        }
        self.buf[at..at + N].copy_from_slice(&b);
    }
    fn i16(&mut self, at: usize, v: i16) {
        self.put(at, v.to_ne_bytes());
    }
    fn i32(&mut self, at: usize, v: i32) {
        self.put(at, v.to_ne_bytes());
    }
    fn f32(&mut self, at: usize, v: f32) {
        self.put(at, v.to_ne_bytes());
    }
}

/// A decoded file: header, grid and scaled voxel values.
#[derive(Debug, Clone)]
pub struct NiftiImage {
    pub header: NiftiHeader,
    pub grid: Grid,
    /// Raw values with `scl_slope`/`scl_inter` applied when the slope is nonzero.
    pub data: Vec<f64>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..]).read_to_end(&mut out).map_err(|e| Error::io(path, e))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

pub fn decode(bytes: &[u8]) -> Result<NiftiImage> {
    let header = NiftiHeader::decode(bytes)?;
    header.check_layout()?;
    let dt = Datatype::from_code(header.datatype)?;
    let dims = header.dims();
    let n = dims[0] * dims[1] * dims[2];
    let off = header.vox_offset as usize;
    if off < HEADER_SIZE {
        return Err(Error::UnsupportedLayout(format!("vox_offset {off} inside the header")));
    }
    let need = off + n * dt.bytes();
    if bytes.len() < need {
        return Err(Error::Truncated { expected: need, found: bytes.len() });
    }
    let r = Reader { buf: bytes, swap: header.swapped };
    let payload = &bytes[off..need];
    let mut data: Vec<f64> = match dt {
        Datatype::U8 => payload.iter().map(|b| *b as f64).collect(),
        Datatype::I16 => (0..n).map(|i| i16::from_ne_bytes(r.bytes(off + 2 * i)) as f64).collect(),
        Datatype::I32 => (0..n).map(|i| i32::from_ne_bytes(r.bytes(off + 4 * i)) as f64).collect(),
        Datatype::F32 => (0..n).map(|i| f32::from_ne_bytes(r.bytes(off + 4 * i)) as f64).collect(),
    };
    if header.scl_slope != 0.0 && header.scl_slope.is_finite() && !(header.scl_slope == 1.0 && header.scl_inter == 0.0) {
        let (s, b) = (header.scl_slope as f64, header.scl_inter as f64);
        data.iter_mut().for_each(|v| *v = *v * s + b);
    }
    let vs = [header.pixdim[1], header.pixdim[2], header.pixdim[3]].map(|p| p.abs() as f64);
    let grid = Grid::with_affine(dims, vs, header.affine())?;
    Ok(NiftiImage { header, grid, data })
}

pub fn read_nifti(path: &Path) -> Result<NiftiImage> {
    decode(&read_bytes(path)?)
}

pub fn read_volume(path: &Path) -> Result<Volume> {
    let img = read_nifti(path)?;
    if let Some(bad) = img.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{}: non-finite voxel value {bad}", path.display())));
    }
    Volume::new(img.grid, img.data.iter().map(|v| *v as f32).collect())
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = read_nifti(path)?;
    let mut out = Vec::with_capacity(img.data.len());
    for v in &img.data {
        if !(v.fract() == 0.0 && *v >= 0.0 && *v <= u32::MAX as f64) {
            return Err(Error::invalid(format!("{}: label value {v} is not a non-negative integer", path.display())));
        }
        out.push(*v as u32);
    }
    LabelMap::new(img.grid, out)
}

/// Encodes `values` on `grid`. Integer datatypes require integral values in range.
pub fn encode(grid: &Grid, values: &[f64], dt: Datatype) -> Result<Vec<u8>> {
    if values.len() != grid.len() {
        return Err(Error::Shape(format!("{} values for {} voxels", values.len(), grid.len())));
    }
    if grid.dims.iter().any(|d| *d > i16::MAX as usize) {
        return Err(Error::UnsupportedLayout(format!("dims {:?} exceed the NIfTI-1 limit", grid.dims)));
    }
    let (lo, hi) = dt.range();
    if dt != Datatype::F32 {
        if let Some(bad) = values.iter().find(|v| v.fract() != 0.0 || **v < lo || **v > hi) {
            return Err(Error::invalid(format!("value {bad} not representable as {dt:?}")));
        }
    }
    let header = NiftiHeader::for_grid(grid, dt);
    let mut out = header.encode();
    out.reserve(values.len() * dt.bytes());
    for v in values {
        match dt {
            Datatype::U8 => out.push(*v as u8),
            Datatype::I16 => out.extend_from_slice(&(*v as i16).to_ne_bytes()),
            Datatype::I32 => out.extend_from_slice(&(*v as i32).to_ne_bytes()),
            Datatype::F32 => out.extend_from_slice(&(*v as f32).to_ne_bytes()),
        }
    }
    Ok(out)
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let gz = path.extension().is_some_and(|e| e == "gz");
    let out = if gz {
        let mut enc = GzEncoder::new(Vec::new(), Compression::default());
        enc.write_all(bytes).map_err(|e| Error::io(path, e))?;
        enc.finish().map_err(|e| Error::io(path, e))?
    } else {
        bytes.to_vec()
    };
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn write_nifti(grid: &Grid, values: &[f64], path: &Path, dt: Datatype) -> Result<()> {
    write_bytes(path, &encode(grid, values, dt)?)
}

/// float32 payloads are stored bit-exactly.
pub fn write_volume(v: &Volume, path: &Path) -> Result<()> {
    let header = NiftiHeader::for_grid(&v.grid, Datatype::F32);
    let mut out = header.encode();
    out.reserve(v.data.len() * 4);
    for x in &v.data {
        out.extend_from_slice(&x.to_ne_bytes());
    }
    write_bytes(path, &out)
}

/// Narrowest of uint8 / int16 / int32 that holds every label.
pub fn write_labels(l: &LabelMap, path: &Path) -> Result<()> {
    let max = l.labels.last().copied().unwrap_or(0);
    let dt = if max <= u8::MAX as u32 {
        Datatype::U8
    } else if max <= i16::MAX as u32 {
        Datatype::I16
    } else {
        Datatype::I32
    };
    let values: Vec<f64> = l.data.iter().map(|v| *v as f64).collect();
    write_nifti(&l.grid, &values, path, dt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn grid() -> Grid {
        let a = AffineMatrix::from_linear([[0.0, -1.25, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 3.0]], [-10.0, 4.5, 7.25]);
        Grid::with_affine([4, 3, 2], [1.0, 1.25, 3.0], a).unwrap()
    }

    /// Byte-swapped copy of a file produced by [`encode`].
    fn swap_file(bytes: &[u8], elem: usize) -> Vec<u8> {
        let h = NiftiHeader::decode(bytes).unwrap();
        let mut swapped = NiftiHeader { swapped: true, ..h.clone() }.encode();
        for chunk in bytes[VOX_OFFSET..].chunks(elem) {
            swapped.extend(chunk.iter().rev());
        }
        swapped
    }

    #[test]
    fn float_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let g = grid();
        let data: Vec<f32> = (0..g.len()).map(|i| (i as f32 * 0.37).sin() * 1e3 + f32::EPSILON).collect();
        let v = Volume::new(g, data).unwrap();
        for name in ["a.nii", "a.nii.gz"] {
            let p = dir.path().join(name);
            write_volume(&v, &p).unwrap();
            let back = read_volume(&p).unwrap();
            assert_eq!(back.grid.dims, v.grid.dims);
            assert_eq!(back.grid.voxel_size, v.grid.voxel_size);
            assert!(back.grid.affine.max_abs_diff(&v.grid.affine) < 1e-6);
            let a: Vec<u32> = back.data.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = v.data.iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
        let raw = fs::read(dir.path().join("a.nii")).unwrap();
        assert_eq!(raw.len(), VOX_OFFSET + 4 * g.len());
        assert_eq!(&raw[344..348], b"n+1\0");
        assert_eq!(i32::from_ne_bytes(raw[0..4].try_into().unwrap()), 348);
        assert_eq!(f32::from_ne_bytes(raw[108..112].try_into().unwrap()), 352.0);
    }

    #[test]
    fn header_fields_survive() {
        let h = NiftiHeader::for_grid(&grid(), Datatype::I16);
        let back = NiftiHeader::decode(&h.encode()).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn byte_swapped_fixture() {
        let g = grid();
        let vals: Vec<f64> = (0..g.len()).map(|i| i as f64 * 1.5 - 7.0).collect();
        let native = encode(&g, &vals, Datatype::F32).unwrap();
        let swapped = swap_file(&native, 4);
        let sizeof = i32::from_ne_bytes(swapped[0..4].try_into().unwrap());
        assert_eq!(sizeof, 1543569408);
        let img = decode(&swapped).unwrap();
        assert!(img.header.swapped);
        assert_eq!(img.data, vals);
        assert_eq!(img.grid.dims, g.dims);

        let ivals: Vec<f64> = (0..g.len()).map(|i| i as f64 * 300.0 - 2000.0).collect();
        let img = decode(&swap_file(&encode(&g, &ivals, Datatype::I16).unwrap(), 2)).unwrap();
        assert_eq!(img.data, ivals);
    }

    #[test]
    fn malformed_inputs_have_distinct_errors() {
        let g = grid();
        let good = encode(&g, &vec![1.0; g.len()], Datatype::F32).unwrap();
        let mut bad = good.clone();
        bad[344..348].copy_from_slice(b"abc\0");
        assert!(matches!(decode(&bad), Err(Error::BadMagic(_))));
        let mut pair = good.clone();
        pair[344..348].copy_from_slice(b"ni1\0");
        assert!(matches!(decode(&pair), Err(Error::UnsupportedLayout(_))));
        let mut dt = good.clone();
        dt[70..72].copy_from_slice(&64i16.to_ne_bytes());
        assert!(matches!(decode(&dt), Err(Error::UnsupportedDatatype(64))));
        assert!(matches!(decode(&good[..good.len() - 1]), Err(Error::Truncated { .. })));
        assert!(matches!(decode(&good[..100]), Err(Error::Truncated { .. })));
        let mut nifti2 = good.clone();
        nifti2[0..4].copy_from_slice(&540i32.to_ne_bytes());
        assert!(matches!(decode(&nifti2), Err(Error::UnsupportedLayout(_))));
        assert!(Datatype::from_code(32).is_err());
        assert!(matches!(read_nifti(Path::new("/nonexistent/x.nii")), Err(Error::Io { .. })));
    }

    #[test]
    fn scaling_and_transform_fallbacks() {
        let g = Grid::new([2, 2, 2], [2.0, 2.0, 2.0]).unwrap();
        let mut bytes = encode(&g, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0], Datatype::U8).unwrap();
        bytes[112..116].copy_from_slice(&0.5f32.to_ne_bytes());
        bytes[116..120].copy_from_slice(&10.0f32.to_ne_bytes());
        let img = decode(&bytes).unwrap();
        assert_eq!(img.data[3], 11.5);

        let mut h = NiftiHeader::decode(&bytes).unwrap();
        h.sform_code = 0;
        h.qform_code = 1;
        // 90 degrees about z: b = c = 0, d = sin(45°)
        h.quatern = [0.0, 0.0, std::f32::consts::FRAC_1_SQRT_2];
        h.qoffset = [1.0, 2.0, 3.0];
        h.pixdim[0] = -1.0;
        let m = h.affine();
        let p = m.apply_point([1.0, 0.0, 1.0]);
        let want = [1.0, 4.0, 1.0];
        for a in 0..3 {
            assert!((p[a] - want[a]).abs() < 1e-6, "{p:?}");
        }
        h.qform_code = 0;
        assert_eq!(h.affine(), AffineMatrix::scaling([2.0, 2.0, 2.0]));
    }

    #[test]
    fn labels_use_narrowest_type() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::new([3, 2, 1], [1.0; 3]).unwrap();
        for (max, code) in [(200u32, 2i16), (4000, 4), (70000, 8)] {
            let l = LabelMap::new(g, vec![0, 1, 2, 3, 4, max]).unwrap();
            let p = dir.path().join(format!("l{max}.nii"));
            write_labels(&l, &p).unwrap();
            assert_eq!(read_nifti(&p).unwrap().header.datatype, code);
            assert_eq!(read_labels(&p).unwrap(), l);
        }
        assert!(encode(&g, &[0.5, 0.0, 0.0, 0.0, 0.0, 0.0], Datatype::U8).is_err());
        assert!(encode(&g, &[300.0, 0.0, 0.0, 0.0, 0.0, 0.0], Datatype::U8).is_err());
        let p = dir.path().join("f.nii");
        write_volume(&Volume::new(g, vec![0.5; 6]).unwrap(), &p).unwrap();
        assert!(read_labels(&p).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn any_float_payload_round_trips(bits in proptest::collection::vec(any::<u32>(), 24)) {
            let g = grid();
            let data: Vec<f32> = bits.iter().map(|b| f32::from_bits(*b)).map(|f| if f.is_finite() { f } else { 0.0 }).collect();
            let v = Volume::new(g, data.clone()).unwrap();
            let bytes = {
                let mut out = NiftiHeader::for_grid(&g, Datatype::F32).encode();
                for x in &v.data { out.extend_from_slice(&x.to_ne_bytes()); }
                out
            };
            let img = decode(&bytes).unwrap();
            let back: Vec<u32> = img.data.iter().map(|x| (*x as f32).to_bits()).collect();
            let want: Vec<u32> = data.iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(back, want);
        }

        #[test]
        fn corrupted_magic_is_rejected(m in proptest::array::uniform4(any::<u8>())) {
            prop_assume!(&m != b"n+1\0" && &m != b"ni1\0");
            let g = grid();
            let mut bytes = encode(&g, &vec![0.0; g.len()], Datatype::F32).unwrap();
            bytes[344..348].copy_from_slice(&m);
            prop_assert!(matches!(decode(&bytes), Err(Error::BadMagic(_))));
        }
    }
}
