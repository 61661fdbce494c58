//! Per-channel low-resolution corruption: slice-profile blur, slice-spacing
//! subsampling, inter-scan motion, simulated registration error, resampling
//! onto the target grid and reliability maps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter;
use crate::geometry::{build_rigid, AffineMatrix, RigidParams};
use crate::rng;
use crate::volume::{Grid, Interpolation, Transform, Volume};

/// Logarithm applied to 10 in the slice-profile width. Natural log; the
/// base-10 reading would give 1.0 here instead.
pub const SLICE_LOG_TEN: f64 = std::f64::consts::LN_10;

/// Acquisition geometry of one input contrast.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    /// Acquired voxel size (slice thickness, no gap), mm.
    pub r_mm: [f64; 3],
    /// Voxel spacing (slice separation), mm.
    pub d_mm: [f64; 3],
    #[serde(default)]
    pub reference: bool,
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.r_mm.iter().chain(self.d_mm.iter()).any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::invalid(format!("channel spacings must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// Reliability map: 1 where data was measured, 0 where interpolated.
pub type ReliabilityMap = Volume;

/// Slice-profile σ in target voxels:
/// `2 α log(10) / (2π) · r_c / r_targ`, componentwise.
pub fn slice_sigma(alpha: f64, r_c: [f64; 3], r_targ: [f64; 3]) -> [f64; 3] {
    let k = 2.0 * alpha * SLICE_LOG_TEN / (2.0 * std::f64::consts::PI);
    [k * r_c[0] / r_targ[0], k * r_c[1] / r_targ[1], k * r_c[2] / r_targ[2]]
}

/// Separable anisotropic Gaussian with σ in voxels (0 leaves an axis alone).
pub fn gaussian_blur_aniso(g: &Volume, sigma: [f64; 3]) -> Volume {
    filter::blur_separable(g, sigma)
}

/// Low-resolution lattice at spacing `d_c` over the extent of `hr`, with
/// its first node shifted by `phase` high-resolution voxels.
pub fn lr_grid(hr: &Grid, d_c: [f64; 3], phase: [f64; 3]) -> Result<Grid> {
    let g = hr.with_spacing(d_c)?;
    if phase == [0.0; 3] {
        return Ok(g);
    }
    let mut dims = g.dims;
    for a in 0..3 {
        let extent = (hr.dims[a] as f64 - 1.0 - phase[a]) * hr.voxel_size[a];
        dims[a] = ((extent / d_c[a] + 1e-9).floor().max(0.0)) as usize + 1;
    }
    let shift = hr.affine.apply_vector(phase);
    Grid::with_affine(dims, d_c, AffineMatrix::translation(shift).compose(&g.affine))
}

/// Resample the blurred high-resolution volume at spacing `d_c`.
pub fn subsample_slices(g: &Volume, d_c: [f64; 3], phase: [f64; 3]) -> Result<Volume> {
    let lr = lr_grid(&g.grid, d_c, phase)?;
    Ok(g.resample_to_grid(&lr, None))
}

/// `G ∘ R_c`: trilinear warp by the rigid motion about the volume centre.
/// The reference channel (0) must not move.
pub fn apply_interscan_motion(g: &Volume, rc: &RigidParams, channel: usize) -> Result<Volume> {
    if channel == 0 && !rc.is_zero() {
        return Err(Error::ReferenceMotion(format!("{rc:?}")));
    }
    let m = build_rigid(rc, g.grid.center_world());
    g.warp(Transform::Affine(&m), Interpolation::Trilinear)
}

/// Registration error: zero for the reference channel, otherwise independent
/// N(0, σ²) rotation (degrees) and translation (mm) components.
pub fn sample_registration_error<R: Rng + ?Sized>(sigma_rot: f64, sigma_trans: f64, channel: usize, rng: &mut R) -> RigidParams {
    if channel == 0 {
        return RigidParams::default();
    }
    let mut p = RigidParams::default();
    for a in 0..3 {
        p.rotation[a] = rng::normal(rng, 0.0, sigma_rot);
    }
    for a in 0..3 {
        p.translation[a] = rng::normal(rng, 0.0, sigma_trans);
    }
    p
}

/// `R'_c = R_c⁻¹ · Rigid(ε_c)`, both about `center`.
pub fn realignment(rc: &RigidParams, err: &RigidParams, center: [f64; 3]) -> AffineMatrix {
    let r = build_rigid(rc, center).invert().expect("rigid transforms are invertible");
    r.compose(&build_rigid(err, center))
}

/// `U_c`: the low-resolution volume read through `R'_c` at every target
/// voxel. Warping and resampling share one trilinear interpolation.
pub fn realign_and_resample(i_lr: &Volume, rc: &RigidParams, err: &RigidParams, target: &Grid) -> Volume {
    let m = realignment(rc, err, target.center_world());
    i_lr.resample_to_grid(target, Some(&m))
}

/// Reliability of low-resolution data seen through `map` (target world →
/// acquisition world) on the target grid.
///
/// Along each axis the acquired planes of `lr` are splatted with a unit tent
/// onto a lattice of target-sized voxels aligned with `lr`; the separable
/// product of these combs is read trilinearly at each mapped target voxel and
/// clamped to [0, 1].
pub fn reliability_map(lr: &Grid, target: &Grid, map: &AffineMatrix) -> ReliabilityMap {
    let mut ratio = [0.0; 3];
    let mut profiles: Vec<Vec<f64>> = Vec::with_capacity(3);
    for a in 0..3 {
        ratio[a] = lr.voxel_size[a] / target.voxel_size[a];
        let len = ((lr.dims[a] as f64 - 1.0) * ratio[a] + 1e-9).floor() as usize + 1;
        let mut prof = vec![0.0f64; len];
        for j in 0..lr.dims[a] {
            let s = j as f64 * ratio[a];
            let lo = s.floor() as usize;
            let t = s - lo as f64;
            if lo < len {
                prof[lo] = prof[lo].max(1.0 - t);
            }
            if t > 0.0 && lo + 1 < len {
                prof[lo + 1] = prof[lo + 1].max(t);
            }
        }
        profiles.push(prof);
    }
    let vox = target.voxel_map(map, lr);
    let interp = |prof: &[f64], q: f64| -> f64 {
        let f = q.floor();
        let t = q - f;
        let i = f as i64;
        let get = |k: i64| if k >= 0 && (k as usize) < prof.len() { prof[k as usize] } else { 0.0 };
        let lo = if t == 1.0 { 0.0 } else { (1.0 - t) * get(i) };
        let hi = if t == 0.0 { 0.0 } else { t * get(i + 1) };
        lo + hi
    };
    Volume::from_fn(*target, |x, y, z| {
        let p = vox.apply_point([x as f64, y as f64, z as f64]);
        let mut v = 1.0;
        for a in 0..3 {
            v *= interp(&profiles[a], p[a] * ratio[a]);
            if v == 0.0 {
                break;
            }
        }
        // snap rounding residue so exactly acquired/absent planes stay exact
        let v = v.clamp(0.0, 1.0);
        if v < 1e-9 {
            0.0
        } else if v > 1.0 - 1e-9 {
            1.0
        } else {
            v as f32
        }
    })
}

/// `V_c` for a generated channel: the acquisition comb pushed through the
/// same `R'_c` as `U_c`.
pub fn compute_reliability(lr: &Grid, target: &Grid, rc: &RigidParams, err: &RigidParams) -> ReliabilityMap {
    let m = realignment(rc, err, target.center_world());
    reliability_map(lr, target, &m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stage};
    use crate::stats;

    fn grid(dims: [usize; 3]) -> Grid {
        Grid::new(dims, [1.0; 3]).unwrap()
    }

    #[test]
    fn slice_sigma_values() {
        let k = std::f64::consts::LN_10 / std::f64::consts::PI;
        let s = slice_sigma(1.0, [1.0; 3], [1.0; 3]);
        assert!(s.iter().all(|v| (v - k).abs() < 1e-12 && (v - 0.7329).abs() < 1e-4));
        let s = slice_sigma(1.0, [1.0, 1.0, 5.0], [1.0; 3]);
        for (got, want) in s.iter().zip([0.7329, 0.7329, 3.6643]) {
            assert!((got - want).abs() < 1e-3);
        }
        let s2 = slice_sigma(2.0, [1.0, 2.0, 5.0], [1.0, 1.0, 0.5]);
        let s1 = slice_sigma(1.0, [1.0, 2.0, 5.0], [1.0, 1.0, 0.5]);
        for a in 0..3 {
            assert!((s2[a] - 2.0 * s1[a]).abs() < 1e-12);
        }
        let r2 = slice_sigma(1.0, [2.0, 2.0, 10.0], [1.0; 3]);
        let r1 = slice_sigma(1.0, [1.0, 1.0, 5.0], [1.0; 3]);
        for a in 0..3 {
            assert!((r2[a] - 2.0 * r1[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn aniso_blur_identity_and_constant() {
        let v = Volume::from_fn(grid([6, 6, 6]), |x, y, z| (x ^ y ^ z) as f32);
        assert_eq!(gaussian_blur_aniso(&v, [0.0; 3]), v);
        let c = Volume::filled(grid([6, 6, 6]), 2.0);
        assert!(gaussian_blur_aniso(&c, [0.7, 0.7, 3.6]).data.iter().all(|x| (x - 2.0).abs() < 1e-6));
    }

    #[test]
    fn subsample_keeps_every_fifth_plane() {
        let v = Volume::from_fn(grid([8, 8, 26]), |x, y, z| (x + 10 * y + 100 * z) as f32);
        let same = subsample_slices(&v, [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(same.data, v.data);
        let lr = subsample_slices(&v, [1.0, 1.0, 5.0], [0.0; 3]).unwrap();
        assert_eq!(lr.grid.dims, [8, 8, 6]);
        for k in 0..6 {
            assert_eq!(lr.at(3, 2, k), v.at(3, 2, 5 * k));
        }
        let c = Volume::filled(grid([8, 8, 26]), 1.5);
        assert!(subsample_slices(&c, [2.0, 1.0, 5.0], [0.0; 3]).unwrap().data.iter().all(|x| *x == 1.5));
    }

    #[test]
    fn motion_contract() {
        let v = Volume::from_fn(grid([10, 10, 10]), |x, y, z| (x * x + y + 2 * z) as f32);
        assert_eq!(apply_interscan_motion(&v, &RigidParams::default(), 0).unwrap(), v);
        let t = RigidParams { translation: [2.0, 0.0, -1.0], ..Default::default() };
        assert!(matches!(apply_interscan_motion(&v, &t, 0), Err(Error::ReferenceMotion(_))));
        let moved = apply_interscan_motion(&v, &t, 1).unwrap();
        for z in 1..10 {
            for y in 0..10 {
                for x in 0..8 {
                    assert_eq!(moved.at(x, y, z), v.at(x + 2, y, z - 1));
                }
            }
        }
    }

    #[test]
    fn registration_error_sampling() {
        let mut r = substream(1, 0, Stage::RegistrationError, 0);
        assert!(sample_registration_error(0.3, 0.3, 0, &mut r).is_zero());
        assert!(sample_registration_error(0.0, 0.0, 2, &mut r).is_zero());
        let mut rot = Vec::new();
        let mut trans = Vec::new();
        for _ in 0..(100_000 / 3 + 1) {
            let e = sample_registration_error(0.3, 0.3, 1, &mut r);
            rot.extend(e.rotation);
            trans.extend(e.translation);
        }
        for xs in [rot, trans] {
            let n = xs.len() as f64;
            assert!((stats::std_population(&xs) - 0.3).abs() < 3.0 * 0.3 / (2.0 * n).sqrt());
        }
    }

    #[test]
    fn identity_realignment_is_plain_resample() {
        let hr = grid([12, 12, 16]);
        let v = Volume::from_fn(hr, |x, y, z| ((x * 7 + y * 3 + z * z) % 11) as f32);
        let lr = subsample_slices(&v, [1.0, 1.0, 3.0], [0.0; 3]).unwrap();
        let u = realign_and_resample(&lr, &RigidParams::default(), &RigidParams::default(), &hr);
        assert_eq!(u, lr.resample_to_grid(&hr, None));
    }

    #[test]
    fn motion_then_realignment_recovers_interior() {
        let hr = grid([32, 32, 32]);
        let v = Volume::from_fn(hr, |x, y, z| {
            let (x, y, z) = (x as f32, y as f32, z as f32);
            (0.3 * x).sin() + (0.2 * y).cos() + 0.05 * z
        });
        let rc = RigidParams { rotation: [6.0, -4.0, 8.0], translation: [1.5, -2.0, 0.7] };
        let moved = apply_interscan_motion(&v, &rc, 1).unwrap();
        let u = realign_and_resample(&moved, &rc, &RigidParams::default(), &hr);
        let (lo, hi) = v.min_max();
        let mut s = 0.0;
        let mut n = 0;
        for z in 8..24 {
            for y in 8..24 {
                for x in 8..24 {
                    s += (u.at(x, y, z) - v.at(x, y, z)).abs() as f64;
                    n += 1;
                }
            }
        }
        assert!(s / n as f64 / ((hi - lo) as f64) < 0.02);
    }

    #[test]
    fn realignment_smooths_high_frequencies() {
        let hr = grid([24, 24, 24]);
        let mut r = substream(5, 0, Stage::Misc, 0);
        let data = (0..hr.len()).map(|_| r.random::<f32>()).collect();
        let v = Volume::new(hr, data).unwrap();
        let rc = RigidParams { rotation: [0.0, 0.0, 9.0], ..Default::default() };
        let moved = apply_interscan_motion(&v, &rc, 1).unwrap();
        let u = realign_and_resample(&moved, &rc, &RigidParams::default(), &hr);
        let hf = |w: &Volume| {
            let mut e = 0.0;
            for z in 6..18 {
                for y in 6..18 {
                    for x in 6..18 {
                        e += (w.at(x + 1, y, z) - w.at(x, y, z)).powi(2) as f64;
                    }
                }
            }
            e
        };
        assert!(hf(&u) < 0.8 * hf(&v), "{} vs {}", hf(&u), hf(&v));
    }

    #[test]
    fn reliability_comb() {
        let hr = grid([8, 8, 31]);
        let lr = lr_grid(&hr, [1.0, 1.0, 5.0], [0.0; 3]).unwrap();
        let v = compute_reliability(&lr, &hr, &RigidParams::default(), &RigidParams::default());
        for z in 0..31 {
            let want = if z % 5 == 0 { 1.0 } else { 0.0 };
            for y in 0..8 {
                for x in 0..8 {
                    assert_eq!(v.at(x, y, z), want, "z={z}");
                }
            }
        }
        let full = lr_grid(&hr, [1.0; 3], [0.0; 3]).unwrap();
        let ones = compute_reliability(&full, &hr, &RigidParams::default(), &RigidParams::default());
        assert!(ones.data.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn reliability_fractional_spacing() {
        let hr = grid([4, 4, 11]);
        let lr = lr_grid(&hr, [1.0, 1.0, 2.5], [0.0; 3]).unwrap();
        let v = compute_reliability(&lr, &hr, &RigidParams::default(), &RigidParams::default());
        let col: Vec<f32> = (0..11).map(|z| v.at(1, 1, z)).collect();
        assert_eq!(col, vec![1.0, 0.0, 0.5, 0.5, 0.0, 1.0, 0.0, 0.5, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn reliability_in_unit_range_under_motion() {
        let hr = grid([20, 20, 20]);
        let lr = lr_grid(&hr, [1.0, 1.3, 4.0], [0.0; 3]).unwrap();
        let cfg = crate::generator::GeneratorConfig::default();
        for s in 0..10 {
            let mut r = substream(s, 0, Stage::Motion, 1);
            let rc = crate::geometry::sample_rigid_params(&cfg, 1, &mut r);
            let err = sample_registration_error(0.3, 0.3, 1, &mut r);
            let v = compute_reliability(&lr, &hr, &rc, &err);
            assert!(v.data.iter().all(|x| (0.0..=1.0).contains(x)));
        }
    }
}
