//! Diffeomorphic deformation from a stationary velocity field (SVF).
//!
//! A coarse random velocity grid is trilinearly upsampled to the image
//! lattice and integrated by scaling and squaring. Fields are in voxel units
//! of the grid they are defined on; out-of-bounds displacement is zero.

use rand::Rng;
use rayon::prelude::*;

use crate::geometry::AffineMatrix;
use crate::rng;
use crate::volume::{trilinear, Grid, Volume};

/// Default number of squaring steps.
pub const DEFAULT_STEPS: u32 = 10;

/// Coarse velocity grid, `control_dims` nodes × 3 components.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    pub control_dims: [usize; 3],
    pub data: Vec<[f64; 3]>,
    pub sigma: f64,
}

/// Dense per-voxel displacement (voxel units). Also used to carry an
/// upsampled velocity field, in which case `diffeomorphic` is false.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseDeformation {
    pub dims: [usize; 3],
    pub disp: Vec<[f64; 3]>,
    pub diffeomorphic: bool,
}

/// Zero-mean i.i.d. Gaussian control values with standard deviation `sigma`.
pub fn sample_svf<R: Rng + ?Sized>(sigma: f64, control_dims: [usize; 3], rng: &mut R) -> VelocityField {
    let n = control_dims.iter().product();
    let data = (0..n)
        .map(|_| [rng::normal(rng, 0.0, sigma), rng::normal(rng, 0.0, sigma), rng::normal(rng, 0.0, sigma)])
        .collect();
    VelocityField { control_dims, data, sigma }
}

/// Per-axis (lower index, upper weight) for corner-aligned upsampling of
/// `from` nodes onto `to` nodes: output node `i` sits at `i (from-1)/(to-1)`.
pub(crate) fn axis_weights(from: usize, to: usize) -> Vec<(usize, f64)> {
    (0..to)
        .map(|i| {
            if from == 1 || to == 1 {
                return (0, 0.0);
            }
            let p = i as f64 * (from - 1) as f64 / (to - 1) as f64;
            let lo = (p.floor() as usize).min(from - 2);
            (lo, p - lo as f64)
        })
        .collect()
}

/// Trilinear corner-aligned upsampling of any per-node value onto `dims`.
pub(crate) fn upsample_nodes<T, F>(nodes: &[T], from: [usize; 3], dims: [usize; 3], zero: F) -> Vec<T>
where
    T: Copy + Send + Sync + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T>,
    F: Fn() -> T + Sync,
{
    let wx = axis_weights(from[0], dims[0]);
    let wy = axis_weights(from[1], dims[1]);
    let wz = axis_weights(from[2], dims[2]);
    let at = |x: usize, y: usize, z: usize| nodes[x + from[0] * (y + from[1] * z)];
    (0..dims.iter().product::<usize>())
        .into_par_iter()
        .map(|i| {
            let x = i % dims[0];
            let y = (i / dims[0]) % dims[1];
            let z = i / (dims[0] * dims[1]);
            let (x0, tx) = wx[x];
            let (y0, ty) = wy[y];
            let (z0, tz) = wz[z];
            let mut acc = zero();
            for (dz, w_z) in [(0, 1.0 - tz), (1, tz)] {
                if w_z == 0.0 {
                    continue;
                }
                for (dy, w_y) in [(0, 1.0 - ty), (1, ty)] {
                    if w_y == 0.0 {
                        continue;
                    }
                    for (dx, w_x) in [(0, 1.0 - tx), (1, tx)] {
                        if w_x == 0.0 {
                            continue;
                        }
                        acc = acc + at(x0 + dx, y0 + dy, z0 + dz) * (w_z * w_y * w_x);
                    }
                }
            }
            acc
        })
        .collect()
}

#[derive(Clone, Copy)]
struct V3([f64; 3]);

impl std::ops::Add for V3 {
    type Output = V3;
    fn add(self, o: V3) -> V3 {
        V3([self.0[0] + o.0[0], self.0[1] + o.0[1], self.0[2] + o.0[2]])
    }
}

impl std::ops::Mul<f64> for V3 {
    type Output = V3;
    fn mul(self, w: f64) -> V3 {
        V3([self.0[0] * w, self.0[1] * w, self.0[2] * w])
    }
}

/// Trilinear upsampling of the control grid so that it spans the full volume.
pub fn upsample_svf(f: &VelocityField, dims: [usize; 3]) -> DenseDeformation {
    let nodes: Vec<V3> = f.data.iter().map(|v| V3(*v)).collect();
    let disp = upsample_nodes(&nodes, f.control_dims, dims, || V3([0.0; 3])).into_iter().map(|v| v.0).collect();
    DenseDeformation { dims, disp, diffeomorphic: false }
}

/// Lie exponential by scaling and squaring: scale by `2^-steps`, then
/// self-compose `steps` times.
pub fn exponentiate(svf: &DenseDeformation, steps: u32) -> DenseDeformation {
    let scale = 0.5f64.powi(steps as i32);
    let mut u = DenseDeformation {
        dims: svf.dims,
        disp: svf.disp.iter().map(|v| [v[0] * scale, v[1] * scale, v[2] * scale]).collect(),
        diffeomorphic: true,
    };
    for _ in 0..steps {
        u = compose(&u, &u);
    }
    u.diffeomorphic = true;
    u
}

/// `outer ∘ inner`: the map `x ↦ φ_outer(φ_inner(x))`.
pub fn compose(outer: &DenseDeformation, inner: &DenseDeformation) -> DenseDeformation {
    assert_eq!(outer.dims, inner.dims, "composed fields must share dims");
    let dims = inner.dims;
    let disp = inner
        .disp
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let x = i % dims[0];
            let y = (i / dims[0]) % dims[1];
            let z = i / (dims[0] * dims[1]);
            let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
            let v = sample(outer, p);
            [u[0] + v[0], u[1] + v[1], u[2] + v[2]]
        })
        .collect();
    DenseDeformation { dims, disp, diffeomorphic: outer.diffeomorphic && inner.diffeomorphic }
}

/// Trilinear displacement at a continuous voxel position, zero outside.
pub fn sample(d: &DenseDeformation, p: [f64; 3]) -> [f64; 3] {
    [
        trilinear(&d.disp, d.dims, p, |v| v[0]),
        trilinear(&d.disp, d.dims, p, |v| v[1]),
        trilinear(&d.disp, d.dims, p, |v| v[2]),
    ]
}

/// Dense backward map for `T_lin ∘ T_nonlin` on `grid`: a voxel `x` reads
/// the source at `T_lin(x + u(x))`, with `T_lin` given in world space.
pub fn compose_affine_nonlinear(t_lin: &AffineMatrix, t_nonlin: &DenseDeformation, grid: &Grid) -> DenseDeformation {
    assert_eq!(t_nonlin.dims, grid.dims, "deformation must live on the output grid");
    let m = grid.voxel_map(t_lin, grid);
    let dims = grid.dims;
    let disp = t_nonlin
        .disp
        .par_iter()
        .enumerate()
        .map(|(i, u)| {
            let x = [(i % dims[0]) as f64, ((i / dims[0]) % dims[1]) as f64, (i / (dims[0] * dims[1])) as f64];
            let q = m.apply_point([x[0] + u[0], x[1] + u[1], x[2] + u[2]]);
            [q[0] - x[0], q[1] - x[1], q[2] - x[2]]
        })
        .collect();
    DenseDeformation { dims, disp, diffeomorphic: t_nonlin.diffeomorphic }
}

/// Determinant of the Jacobian of `x ↦ x + u(x)`: central differences in the
/// interior, one-sided differences on the border.
pub fn jacobian_determinant(d: &DenseDeformation, grid: &Grid) -> Volume {
    let dims = d.dims;
    let idx = |x: usize, y: usize, z: usize| x + dims[0] * (y + dims[1] * z);
    let data = (0..d.disp.len())
        .into_par_iter()
        .map(|i| {
            let c = [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
            let mut j = [[0.0; 3]; 3];
            for a in 0..3 {
                if dims[a] == 1 {
                    j[0][a] = if a == 0 { 1.0 } else { 0.0 };
                    j[1][a] = if a == 1 { 1.0 } else { 0.0 };
                    j[2][a] = if a == 2 { 1.0 } else { 0.0 };
                    continue;
                }
                let mut lo = c;
                let mut hi = c;
                if c[a] > 0 {
                    lo[a] -= 1;
                }
                if c[a] + 1 < dims[a] {
                    hi[a] += 1;
                }
                let h = (hi[a] - lo[a]) as f64;
                let ul = d.disp[idx(lo[0], lo[1], lo[2])];
                let uh = d.disp[idx(hi[0], hi[1], hi[2])];
                for comp in 0..3 {
                    j[comp][a] = (uh[comp] - ul[comp]) / h + if comp == a { 1.0 } else { 0.0 };
                }
            }
            let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1]) - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
                + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
            det as f32
        })
        .collect();
    Volume { grid: Grid { dims, ..*grid }, data }
}

impl DenseDeformation {
    pub fn zeros(dims: [usize; 3]) -> Self {
        DenseDeformation { dims, disp: vec![[0.0; 3]; dims.iter().product()], diffeomorphic: true }
    }

    pub fn constant(dims: [usize; 3], v: [f64; 3]) -> Self {
        DenseDeformation { dims, disp: vec![v; dims.iter().product()], diffeomorphic: false }
    }

    pub fn negated(&self) -> Self {
        DenseDeformation {
            dims: self.dims,
            disp: self.disp.iter().map(|v| [-v[0], -v[1], -v[2]]).collect(),
            diffeomorphic: self.diffeomorphic,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.disp.iter().flatten().all(|v| v.is_finite())
    }

    pub fn max_norm(&self) -> f64 {
        self.disp.iter().map(|v| norm(*v)).fold(0.0, f64::max)
    }

    /// Indices of voxels at least `margin` voxels away from every face.
    pub fn interior(&self, margin: usize) -> impl Iterator<Item = usize> + '_ {
        let d = self.dims;
        (0..self.disp.len()).filter(move |&i| {
            let c = [i % d[0], (i / d[0]) % d[1], i / (d[0] * d[1])];
            (0..3).all(|a| c[a] >= margin && c[a] + margin < d[a])
        })
    }

    /// Mean displacement magnitude over the interior at `margin`.
    pub fn mean_norm(&self, margin: usize) -> f64 {
        let (s, n) = self.interior(margin).fold((0.0, 0usize), |(s, n), i| (s + norm(self.disp[i]), n + 1));
        s / n.max(1) as f64
    }
}

fn norm(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}
