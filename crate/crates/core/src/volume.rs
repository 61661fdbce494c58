//! 3D scalar and label grids with sampling, warping, resampling, normalization
//! and cropping.
//!
//! Data is stored x-fastest: `index = x + nx * (y + ny * z)`. Voxel coordinates
//! refer to voxel centres, so voxel `(0,0,0)` sits at `affine · (0,0,0)`.
//! Every warp is a backward map: each output voxel pulls its value from the
//! mapped source location. Samples outside the source grid are 0.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::deform::DenseDeformation;
use crate::error::{Error, Result};
use crate::geometry::AffineMatrix;

/// Grid geometry shared by intensity and label volumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    /// mm per voxel.
    pub voxel_size: [f64; 3],
    /// voxel → world (mm).
    pub affine: AffineMatrix,
}

impl Grid {
    /// Axis-aligned grid with voxel `(0,0,0)` at the world origin.
    pub fn new(dims: [usize; 3], voxel_size: [f64; 3]) -> Result<Grid> {
        Grid::with_affine(dims, voxel_size, AffineMatrix::scaling(voxel_size))
    }

    pub fn with_affine(dims: [usize; 3], voxel_size: [f64; 3], affine: AffineMatrix) -> Result<Grid> {
        if dims.iter().any(|d| *d == 0) {
            return Err(Error::invalid(format!("dims must be positive, got {dims:?}")));
        }
        if voxel_size.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return Err(Error::invalid(format!("voxel size must be positive, got {voxel_size:?}")));
        }
        affine.validate()?;
        affine.invert()?;
        Ok(Grid { dims, voxel_size, affine })
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn coords(&self, i: usize) -> [usize; 3] {
        let nx = self.dims[0];
        let ny = self.dims[1];
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }

    pub fn world_to_voxel(&self) -> AffineMatrix {
        self.affine.invert().expect("grid affine validated as invertible")
    }

    /// World position of the geometric centre of the voxel lattice.
    pub fn center_world(&self) -> [f64; 3] {
        let c = [
            (self.dims[0] as f64 - 1.0) / 2.0,
            (self.dims[1] as f64 - 1.0) / 2.0,
            (self.dims[2] as f64 - 1.0) / 2.0,
        ];
        self.affine.apply_point(c)
    }

    /// Grid covering the same world extent at a new spacing, anchored at the
    /// first voxel centre: `n' = floor((n - 1) r / s) + 1` along each axis.
    pub fn with_spacing(&self, spacing: [f64; 3]) -> Result<Grid> {
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::invalid(format!("spacing must be positive, got {spacing:?}")));
        }
        let mut dims = [0; 3];
        let mut ratio = [0.0; 3];
        for a in 0..3 {
            let extent = (self.dims[a] as f64 - 1.0) * self.voxel_size[a];
            dims[a] = (extent / spacing[a] + 1e-9).floor() as usize + 1;
            ratio[a] = spacing[a] / self.voxel_size[a];
        }
        Grid::with_affine(dims, spacing, self.affine.compose(&AffineMatrix::scaling(ratio)))
    }

    /// Sub-grid starting at voxel `offset`.
    pub fn cropped(&self, offset: [usize; 3], size: [usize; 3]) -> Grid {
        let shift = self.affine.apply_vector([offset[0] as f64, offset[1] as f64, offset[2] as f64]);
        let affine = AffineMatrix::translation(shift).compose(&self.affine);
        Grid { dims: size, voxel_size: self.voxel_size, affine }
    }

    pub fn same_lattice(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && self.voxel_size.iter().zip(other.voxel_size.iter()).all(|(a, b)| (a - b).abs() < 1e-6)
            && self.affine.max_abs_diff(&other.affine) < 1e-6
    }

    /// Backward map from output voxel coordinates to source voxel
    /// coordinates for a world-space transform `t`, with entries within
    /// 1e-12 of an integer snapped to it.
    pub fn voxel_map(&self, t: &AffineMatrix, source: &Grid) -> AffineMatrix {
        let mut m = source.world_to_voxel().compose(t).compose(&self.affine);
        for row in m.0.iter_mut().take(3) {
            for v in row.iter_mut() {
                let r = v.round();
                if (*v - r).abs() < 1e-12 {
                    *v = r;
                }
            }
        }
        m
    }
}

/// Interpolation used by [`Volume::warp`] and [`LabelMap::warp`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    Trilinear,
    Nearest,
}

/// Backward mapping applied by a warp.
#[derive(Debug, Clone, Copy)]
pub enum Transform<'a> {
    /// World-space map from output to source positions.
    Affine(&'a AffineMatrix),
    /// Voxel-space displacement defined on the output grid.
    Dense(&'a DenseDeformation),
}

impl Transform<'_> {
    fn source_coords(&self, grid: &Grid) -> Result<Box<dyn Fn(usize) -> [f64; 3] + Sync + '_>> {
        match *self {
            Transform::Affine(t) => {
                let m = grid.voxel_map(t, grid);
                let g = *grid;
                Ok(Box::new(move |i| {
                    let [x, y, z] = g.coords(i);
                    m.apply_point([x as f64, y as f64, z as f64])
                }))
            }
            Transform::Dense(d) => {
                if d.dims != grid.dims {
                    return Err(Error::GridMismatch(format!(
                        "deformation dims {:?} vs volume dims {:?}",
                        d.dims, grid.dims
                    )));
                }
                let g = *grid;
                Ok(Box::new(move |i| {
                    let [x, y, z] = g.coords(i);
                    let u = d.disp[i];
                    [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]]
                }))
            }
        }
    }
}

/// Scalar volume with 32-bit storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Volume> {
        if data.len() != grid.len() {
            return Err(Error::Shape(format!("data length {} != {} voxels", data.len(), grid.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { stage: "volume construction".into() });
        }
        Ok(Volume { grid, data })
    }

    pub fn filled(grid: Grid, value: f32) -> Volume {
        Volume { grid, data: vec![value; grid.len()] }
    }

    pub fn from_fn(grid: Grid, f: impl Fn(usize, usize, usize) -> f32 + Sync) -> Volume {
        let data = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                f(x, y, z)
            })
            .collect();
        Volume { grid, data }
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(x, y, z)]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32 + Sync) -> Volume {
        Volume { grid: self.grid, data: self.data.par_iter().map(|v| f(*v)).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> (f32, f32) {
        self.data.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|v| *v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Standard 8-neighbour trilinear blend at a continuous voxel coordinate.
    /// Neighbours outside the grid contribute 0.
    #[inline]
    pub fn trilinear_sample(&self, p: [f64; 3]) -> f64 {
        trilinear(&self.data, self.grid.dims, p, |v| *v as f64)
    }

    /// Backward warp on the volume's own grid.
    pub fn warp(&self, t: Transform<'_>, mode: Interpolation) -> Result<Volume> {
        if let Transform::Affine(m) = t {
            if *m == AffineMatrix::identity() {
                return Ok(self.clone());
            }
        }
        let src = t.source_coords(&self.grid)?;
        let data = (0..self.grid.len())
            .into_par_iter()
            .map(|i| {
                let p = src(i);
                match mode {
                    Interpolation::Trilinear => self.trilinear_sample(p) as f32,
                    Interpolation::Nearest => {
                        nearest_index(self.grid.dims, p).map(|j| self.data[j]).unwrap_or(0.0)
                    }
                }
            })
            .collect();
        Ok(Volume { grid: self.grid, data })
    }

    /// Trilinear resampling onto `target`, preserving world positions.
    /// `t` optionally maps target world positions to source world positions.
    pub fn resample_to_grid(&self, target: &Grid, t: Option<&AffineMatrix>) -> Volume {
        let id = AffineMatrix::identity();
        let m = target.voxel_map(t.unwrap_or(&id), &self.grid);
        let data = (0..target.len())
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = target.coords(i);
                self.trilinear_sample(m.apply_point([x as f64, y as f64, z as f64])) as f32
            })
            .collect();
        Volume { grid: *target, data }
    }

    /// Resample to a new voxel spacing over the same world extent.
    pub fn resample(&self, spacing: [f64; 3]) -> Result<Volume> {
        let target = self.grid.with_spacing(spacing)?;
        Ok(self.resample_to_grid(&target, None))
    }

    /// Affine map of intensities onto [0, 1].
    pub fn minmax_normalize(&self) -> Result<Volume> {
        let (lo, hi) = self.min_max();
        if !(hi > lo) {
            return Err(Error::DegenerateNormalization(format!("constant volume (value {lo})")));
        }
        Ok(self.normalize_with(lo, hi))
    }

    /// `(v - lo) / (hi - lo)` computed in 64-bit.
    pub fn normalize_with(&self, lo: f32, hi: f32) -> Volume {
        let (lo, span) = (lo as f64, hi as f64 - lo as f64);
        self.map(|v| ((v as f64 - lo) / span) as f32)
    }

    /// Divide by the median intensity over voxels whose label is in `wm_labels`.
    pub fn wm_median_normalize(&self, labels: &LabelMap, wm_labels: &[u32]) -> Result<Volume> {
        if labels.grid.dims != self.grid.dims {
            return Err(Error::GridMismatch("label map and volume differ in dims".into()));
        }
        let mut wm: Vec<f64> = self
            .data
            .iter()
            .zip(labels.data.iter())
            .filter(|(_, l)| wm_labels.contains(l))
            .map(|(v, _)| *v as f64)
            .collect();
        if wm.is_empty() {
            return Err(Error::EmptyMask);
        }
        let med = crate::stats::median(&mut wm);
        if !(med.abs() > 0.0) {
            return Err(Error::DegenerateNormalization("white-matter median is zero".into()));
        }
        Ok(self.map(|v| (v as f64 / med) as f32))
    }

    pub fn crop(&self, w: &CropWindow) -> Volume {
        Volume { grid: self.grid.cropped(w.offset, w.size), data: crop_data(&self.data, self.grid.dims, w) }
    }
}

/// Integer label volume.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    pub grid: Grid,
    pub data: Vec<u32>,
    /// Sorted, distinct labels present in the map.
    pub labels: Vec<u32>,
}

impl LabelMap {
    pub fn new(grid: Grid, data: Vec<u32>) -> Result<LabelMap> {
        if data.len() != grid.len() {
            return Err(Error::Shape(format!("data length {} != {} voxels", data.len(), grid.len())));
        }
        let mut labels = data.clone();
        labels.sort_unstable();
        labels.dedup();
        Ok(LabelMap { grid, data, labels })
    }

    pub fn from_fn(grid: Grid, f: impl Fn(usize, usize, usize) -> u32 + Sync) -> LabelMap {
        let data: Vec<u32> = (0..grid.len())
            .into_par_iter()
            .map(|i| {
                let [x, y, z] = grid.coords(i);
                f(x, y, z)
            })
            .collect();
        LabelMap::new(grid, data).expect("length matches grid")
    }

    /// Round to the nearest node, ties toward the lower index; label 0 outside.
    pub fn nearest_sample(&self, p: [f64; 3]) -> u32 {
        nearest_index(self.grid.dims, p).map(|i| self.data[i]).unwrap_or(0)
    }

    pub fn warp(&self, t: Transform<'_>, mode: Interpolation) -> Result<LabelMap> {
        if mode == Interpolation::Trilinear {
            return Err(Error::TrilinearOnLabels);
        }
        if let Transform::Affine(m) = t {
            if *m == AffineMatrix::identity() {
                return Ok(self.clone());
            }
        }
        let src = t.source_coords(&self.grid)?;
        let data = (0..self.grid.len()).into_par_iter().map(|i| self.nearest_sample(src(i))).collect();
        LabelMap::new(self.grid, data)
    }

    pub fn crop(&self, w: &CropWindow) -> LabelMap {
        LabelMap::new(self.grid.cropped(w.offset, w.size), crop_data(&self.data, self.grid.dims, w))
            .expect("crop preserves length")
    }

    /// Label volume as floats, for writing and inspection.
    pub fn to_volume(&self) -> Volume {
        Volume { grid: self.grid, data: self.data.iter().map(|l| *l as f32).collect() }
    }
}

/// Zero-padded trilinear interpolation over an x-fastest buffer.
#[inline]
pub(crate) fn trilinear<T>(data: &[T], dims: [usize; 3], p: [f64; 3], get: impl Fn(&T) -> f64) -> f64 {
    let [nx, ny, nz] = dims;
    let fx = p[0].floor();
    let fy = p[1].floor();
    let fz = p[2].floor();
    let (tx, ty, tz) = (p[0] - fx, p[1] - fy, p[2] - fz);
    let (x0, y0, z0) = (fx as i64, fy as i64, fz as i64);
    if x0 < -1 || y0 < -1 || z0 < -1 || x0 >= nx as i64 || y0 >= ny as i64 || z0 >= nz as i64 {
        return 0.0;
    }
    let mut acc = 0.0;
    for (dz, wz) in [(0, 1.0 - tz), (1, tz)] {
        let z = z0 + dz;
        if wz == 0.0 || z < 0 || z >= nz as i64 {
            continue;
        }
        for (dy, wy) in [(0, 1.0 - ty), (1, ty)] {
            let y = y0 + dy;
            if wy == 0.0 || y < 0 || y >= ny as i64 {
                continue;
            }
            let row = (z as usize * ny + y as usize) * nx;
            for (dx, wx) in [(0, 1.0 - tx), (1, tx)] {
                let x = x0 + dx;
                if wx == 0.0 || x < 0 || x >= nx as i64 {
                    continue;
                }
                acc += wz * wy * wx * get(&data[row + x as usize]);
            }
        }
    }
    acc
}

#[inline]
fn nearest_index(dims: [usize; 3], p: [f64; 3]) -> Option<usize> {
    let mut idx = [0usize; 3];
    for a in 0..3 {
        // ceil(p - 0.5) rounds half toward the lower node
        let i = (p[a] - 0.5).ceil();
        if !(i >= 0.0) || i >= dims[a] as f64 {
            return None;
        }
        idx[a] = i as usize;
    }
    Some(idx[0] + dims[0] * (idx[1] + dims[1] * idx[2]))
}

/// A crop window shared by every volume of an aligned set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropWindow {
    pub offset: [usize; 3],
    pub size: [usize; 3],
}

impl CropWindow {
    /// Uniform random offset; sizes larger than `dims` clamp to `dims`.
    pub fn sample<R: Rng + ?Sized>(dims: [usize; 3], size: [usize; 3], rng: &mut R) -> CropWindow {
        let mut w = CropWindow { offset: [0; 3], size: [0; 3] };
        for a in 0..3 {
            w.size[a] = size[a].clamp(1, dims[a]);
            let slack = dims[a] - w.size[a];
            w.offset[a] = if slack == 0 { 0 } else { rng.random_range(0..=slack) };
        }
        w
    }
}

fn crop_data<T: Copy>(data: &[T], dims: [usize; 3], w: &CropWindow) -> Vec<T> {
    let mut out = Vec::with_capacity(w.size.iter().product());
    for z in w.offset[2]..w.offset[2] + w.size[2] {
        for y in w.offset[1]..w.offset[1] + w.size[1] {
            let row = (z * dims[1] + y) * dims[0];
            out.extend_from_slice(&data[row + w.offset[0]..row + w.offset[0] + w.size[0]]);
        }
    }
    out
}

/// Applies one random window to every volume of an aligned set.
pub fn crop_random<R: Rng + ?Sized>(vols: &[Volume], size: [usize; 3], rng: &mut R) -> Result<(CropWindow, Vec<Volume>)> {
    let first = vols.first().ok_or(Error::Empty("volume set"))?;
    if vols.iter().any(|v| v.grid.dims != first.grid.dims) {
        return Err(Error::GridMismatch("crop inputs must share dims".into()));
    }
    let w = CropWindow::sample(first.grid.dims, size, rng);
    Ok((w, vols.iter().map(|v| v.crop(&w)).collect()))
}
