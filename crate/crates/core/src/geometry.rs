//! Homogeneous 3D transforms.
//!
//! All matrices act on world coordinates in millimetres. Augmentation and
//! motion matrices rotate, scale and shear about a supplied centre (the
//! geometric centre of the volume) rather than the world origin.

use std::ops::Mul;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::rng;

/// 4×4 homogeneous matrix, row-major, last row `(0, 0, 0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineMatrix(pub [[f64; 4]; 4]);

impl Default for AffineMatrix {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineMatrix {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        AffineMatrix(m)
    }

    pub fn from_linear(l: [[f64; 3]; 3], t: [f64; 3]) -> Self {
        let mut m = Self::identity().0;
        for i in 0..3 {
            m[i][..3].copy_from_slice(&l[i]);
            m[i][3] = t[i];
        }
        AffineMatrix(m)
    }

    pub fn translation(t: [f64; 3]) -> Self {
        Self::from_linear([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], t)
    }

    pub fn scaling(s: [f64; 3]) -> Self {
        Self::from_linear([[s[0], 0.0, 0.0], [0.0, s[1], 0.0], [0.0, 0.0, s[2]]], [0.0; 3])
    }

    /// Row-major 16-element view.
    pub fn from_row_major(v: &[f64]) -> Result<Self> {
        if v.len() != 16 {
            return Err(Error::invalid(format!("expected 16 matrix entries, got {}", v.len())));
        }
        let mut m = [[0.0; 4]; 4];
        for (i, x) in v.iter().enumerate() {
            m[i / 4][i % 4] = *x;
        }
        let a = AffineMatrix(m);
        a.validate()?;
        Ok(a)
    }

    pub fn validate(&self) -> Result<()> {
        let last = self.0[3];
        if last != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid(format!("last row must be (0,0,0,1), got {last:?}")));
        }
        if self.0.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::invalid("non-finite matrix entry"));
        }
        Ok(())
    }

    pub fn linear(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation_part(&self) -> [f64; 3] {
        [self.0[0][3], self.0[1][3], self.0[2][3]]
    }

    pub fn determinant(&self) -> f64 {
        det3(&self.linear())
    }

    pub fn apply_point(&self, p: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    pub fn apply_vector(&self, v: [f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    /// `self · other`: applies `other` first.
    pub fn compose(&self, other: &AffineMatrix) -> AffineMatrix {
        let (a, b) = (&self.0, &other.0);
        let mut m = [[0.0; 4]; 4];
        for i in 0..4 {
            for j in 0..4 {
                m[i][j] = (0..4).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        AffineMatrix(m)
    }

    pub fn invert(&self) -> Result<AffineMatrix> {
        let l = self.linear();
        let det = det3(&l);
        if !det.is_finite() || det.abs() <= 1e-12 {
            return Err(Error::SingularMatrix { det });
        }
        let inv = [
            [
                (l[1][1] * l[2][2] - l[1][2] * l[2][1]) / det,
                (l[0][2] * l[2][1] - l[0][1] * l[2][2]) / det,
                (l[0][1] * l[1][2] - l[0][2] * l[1][1]) / det,
            ],
            [
                (l[1][2] * l[2][0] - l[1][0] * l[2][2]) / det,
                (l[0][0] * l[2][2] - l[0][2] * l[2][0]) / det,
                (l[0][2] * l[1][0] - l[0][0] * l[1][2]) / det,
            ],
            [
                (l[1][0] * l[2][1] - l[1][1] * l[2][0]) / det,
                (l[0][1] * l[2][0] - l[0][0] * l[2][1]) / det,
                (l[0][0] * l[1][1] - l[0][1] * l[1][0]) / det,
            ],
        ];
        let t = self.translation_part();
        let ti = [
            -(inv[0][0] * t[0] + inv[0][1] * t[1] + inv[0][2] * t[2]),
            -(inv[1][0] * t[0] + inv[1][1] * t[1] + inv[1][2] * t[2]),
            -(inv[2][0] * t[0] + inv[2][1] * t[1] + inv[2][2] * t[2]),
        ];
        Ok(AffineMatrix::from_linear(inv, ti))
    }

    /// Conjugates the linear map `l` so that it acts about `center`.
    pub fn about(l: [[f64; 3]; 3], center: [f64; 3]) -> AffineMatrix {
        AffineMatrix::translation(center)
            .compose(&AffineMatrix::from_linear(l, [0.0; 3]))
            .compose(&AffineMatrix::translation([-center[0], -center[1], -center[2]]))
    }

    /// Largest absolute entry-wise difference.
    pub fn max_abs_diff(&self, other: &AffineMatrix) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Mul for AffineMatrix {
    type Output = AffineMatrix;
    fn mul(self, rhs: AffineMatrix) -> AffineMatrix {
        self.compose(&rhs)
    }
}

fn det3(l: &[[f64; 3]; 3]) -> f64 {
    l[0][0] * (l[1][1] * l[2][2] - l[1][2] * l[2][1]) - l[0][1] * (l[1][0] * l[2][2] - l[1][2] * l[2][0])
        + l[0][2] * (l[1][0] * l[2][1] - l[1][1] * l[2][0])
}

fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut m = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            m[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    m
}

fn rot_x(deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    [[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]]
}

fn rot_y(deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    [[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]]
}

fn rot_z(deg: f64) -> [[f64; 3]; 3] {
    let (s, c) = deg.to_radians().sin_cos();
    [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
}

/// `Rot_x · Rot_y · Rot_z`, angles in degrees.
pub fn rotation(deg: [f64; 3]) -> [[f64; 3]; 3] {
    matmul3(&matmul3(&rot_x(deg[0]), &rot_y(deg[1])), &rot_z(deg[2]))
}

/// Rotations (degrees), scalings and shearings of the linear augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineParams {
    pub rotation: [f64; 3],
    pub scaling: [f64; 3],
    pub shearing: [f64; 3],
}

impl Default for AffineParams {
    fn default() -> Self {
        AffineParams { rotation: [0.0; 3], scaling: [1.0; 3], shearing: [0.0; 3] }
    }
}

/// Rotations (degrees) and translations (mm).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct RigidParams {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl RigidParams {
    pub fn is_zero(&self) -> bool {
        self.rotation.iter().chain(self.translation.iter()).all(|v| *v == 0.0)
    }
}

/// `Scale_x·Scale_y·Scale_z·Shear_x·Shear_y·Shear_z·Rot_x·Rot_y·Rot_z` about `center`.
///
/// Shear convention: `Shear_x` adds `φ_x·y` to x, `Shear_y` adds `φ_y·z` to y
/// and `Shear_z` adds `φ_z·x` to z.
pub fn build_affine(p: &AffineParams, center: [f64; 3]) -> Result<AffineMatrix> {
    if p.scaling.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid(format!("scalings must be positive, got {:?}", p.scaling)));
    }
    let [sx, sy, sz] = p.scaling;
    let [hx, hy, hz] = p.shearing;
    let scale = [[sx, 0.0, 0.0], [0.0, sy, 0.0], [0.0, 0.0, sz]];
    let shear_x = [[1.0, hx, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    let shear_y = [[1.0, 0.0, 0.0], [0.0, 1.0, hy], [0.0, 0.0, 1.0]];
    let shear_z = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [hz, 0.0, 1.0]];
    let shear = matmul3(&matmul3(&shear_x, &shear_y), &shear_z);
    let l = matmul3(&matmul3(&scale, &shear), &rotation(p.rotation));
    Ok(AffineMatrix::about(l, center))
}

/// Rotation about `center` followed by translation.
pub fn build_rigid(p: &RigidParams, center: [f64; 3]) -> AffineMatrix {
    AffineMatrix::translation(p.translation).compose(&AffineMatrix::about(rotation(p.rotation), center))
}

pub fn sample_affine_params<R: Rng + ?Sized>(cfg: &GeneratorConfig, rng: &mut R) -> AffineParams {
    let mut p = AffineParams::default();
    let (ls_a, ls_b) = (cfg.scaling.0.ln(), cfg.scaling.1.ln());
    for axis in 0..3 {
        p.rotation[axis] = rng::uniform(rng, cfg.rotation.0, cfg.rotation.1);
        p.scaling[axis] = rng::uniform(rng, ls_a, ls_b).exp();
        p.shearing[axis] = rng::uniform(rng, cfg.shearing.0, cfg.shearing.1);
    }
    p
}

/// Channel 0 is the reference and never moves.
pub fn sample_rigid_params<R: Rng + ?Sized>(cfg: &GeneratorConfig, channel: usize, rng: &mut R) -> RigidParams {
    if channel == 0 {
        return RigidParams::default();
    }
    let mut p = RigidParams::default();
    for axis in 0..3 {
        p.rotation[axis] = rng::uniform(rng, cfg.rotation.0, cfg.rotation.1);
        p.translation[axis] = rng::uniform(rng, cfg.translation.0, cfg.translation.1);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stage};
    use proptest::prelude::*;

    const C: [f64; 3] = [10.0, -4.0, 7.5];

    fn close(a: [f64; 3], b: [f64; 3], tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn neutral_affine_is_identity() {
        let m = build_affine(&AffineParams::default(), C).unwrap();
        assert!(m.max_abs_diff(&AffineMatrix::identity()) < 1e-15);
    }

    #[test]
    fn quarter_turn_about_z() {
        let p = AffineParams { rotation: [0.0, 0.0, 90.0], ..Default::default() };
        let m = build_affine(&p, C).unwrap();
        assert!(close(m.apply_vector([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], 1e-12));
    }

    #[test]
    fn scaling_acts_about_center() {
        let p = AffineParams { scaling: [2.0, 1.0, 1.0], ..Default::default() };
        let m = build_affine(&p, C).unwrap();
        let q = m.apply_point([C[0] + 1.0, C[1], C[2]]);
        assert!(close([q[0] - C[0], q[1] - C[1], q[2] - C[2]], [2.0, 0.0, 0.0], 1e-12));
        assert!(close(m.apply_point(C), C, 1e-12));
    }

    #[test]
    fn non_positive_scaling_rejected() {
        let p = AffineParams { scaling: [1.0, 0.0, 1.0], ..Default::default() };
        assert!(matches!(build_affine(&p, C), Err(Error::InvalidParameter(_))));
        let p = AffineParams { scaling: [1.0, 1.0, -2.0], ..Default::default() };
        assert!(build_affine(&p, C).is_err());
    }

    #[test]
    fn rigid_special_cases() {
        assert!(build_rigid(&RigidParams::default(), C).max_abs_diff(&AffineMatrix::identity()) == 0.0);

        let t = build_rigid(&RigidParams { translation: [3.0, 0.0, 0.0], ..Default::default() }, C);
        assert_eq!(t.translation_part(), [3.0, 0.0, 0.0]);
        assert_eq!(t.linear(), AffineMatrix::identity().linear());

        let r = build_rigid(&RigidParams { rotation: [180.0, 0.0, 0.0], ..Default::default() }, C);
        assert!(close(r.apply_vector([0.0, 1.0, 0.0]), [0.0, -1.0, 0.0], 1e-12));
    }

    #[test]
    fn compose_and_invert_basics() {
        let a = build_affine(
            &AffineParams { rotation: [5.0, -3.0, 8.0], scaling: [1.05, 0.95, 1.0], shearing: [0.01, 0.0, -0.01] },
            C,
        )
        .unwrap();
        assert_eq!(AffineMatrix::identity().compose(&a), a);

        let t = AffineMatrix::translation([1.5, -2.0, 4.0]);
        assert!(t.invert().unwrap().max_abs_diff(&AffineMatrix::translation([-1.5, 2.0, -4.0])) < 1e-15);

        let singular = AffineMatrix::scaling([1.0, 0.0, 1.0]);
        assert!(matches!(singular.invert(), Err(Error::SingularMatrix { .. })));
    }

    #[test]
    fn rigid_inverse_matches_reversed_motion() {
        // Single-axis rotation: reversing the motion is the negated angle.
        let fwd = build_rigid(&RigidParams { rotation: [0.0, 23.0, 0.0], ..Default::default() }, C);
        let back = build_rigid(&RigidParams { rotation: [0.0, -23.0, 0.0], ..Default::default() }, C);
        assert!(fwd.invert().unwrap().max_abs_diff(&back) < 1e-10);

        // General rigid: the reversed motion is R⁻¹ about C after undoing t,
        // assembled here from the transposed rotation.
        let p = RigidParams { rotation: [7.0, -12.0, 31.0], translation: [3.0, -1.0, 2.5] };
        let m = build_rigid(&p, C);
        let rt = {
            let r = rotation(p.rotation);
            [[r[0][0], r[1][0], r[2][0]], [r[0][1], r[1][1], r[2][1]], [r[0][2], r[1][2], r[2][2]]]
        };
        let reversed = AffineMatrix::about(rt, C)
            .compose(&AffineMatrix::translation([-p.translation[0], -p.translation[1], -p.translation[2]]));
        assert!(m.invert().unwrap().max_abs_diff(&reversed) < 1e-10);
    }

    #[test]
    fn table_defaults_stay_in_range() {
        let cfg = GeneratorConfig::default();
        let mut r = substream(3, 0, Stage::Affine, 0);
        for _ in 0..2000 {
            let p = sample_affine_params(&cfg, &mut r);
            for a in 0..3 {
                assert!((-10.0..=10.0).contains(&p.rotation[a]));
                assert!((0.9..=1.1).contains(&p.scaling[a]));
                assert!((-0.01..=0.01).contains(&p.shearing[a]));
            }
            let q = sample_rigid_params(&cfg, 1, &mut r);
            assert!(q.translation.iter().all(|t| (-20.0..=20.0).contains(t)));
        }
    }

    #[test]
    fn degenerate_ranges_are_neutral() {
        let cfg = GeneratorConfig {
            rotation: (0.0, 0.0),
            scaling: (1.0, 1.0),
            shearing: (0.0, 0.0),
            translation: (0.0, 0.0),
            ..Default::default()
        };
        let mut r = substream(3, 0, Stage::Affine, 0);
        assert_eq!(sample_affine_params(&cfg, &mut r), AffineParams::default());
        for c in 0..4 {
            assert!(sample_rigid_params(&cfg, c, &mut r).is_zero());
        }
    }

    #[test]
    fn log_scale_mean_matches_uniform_moments() {
        let cfg = GeneratorConfig::default();
        let mut r = substream(11, 0, Stage::Affine, 0);
        let n = 100_000 / 3 + 1;
        let draws: Vec<f64> =
            (0..n).flat_map(|_| sample_affine_params(&cfg, &mut r).scaling).map(f64::ln).collect();
        let (a, b) = (0.9f64.ln(), 1.1f64.ln());
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        let se = (b - a) / 12f64.sqrt() / (draws.len() as f64).sqrt();
        assert!((mean - (a + b) / 2.0).abs() < 3.0 * se, "mean {mean}");
    }

    #[test]
    fn sampling_is_deterministic() {
        let cfg = GeneratorConfig::default();
        let mut a = substream(5, 9, Stage::Motion, 2);
        let mut b = substream(5, 9, Stage::Motion, 2);
        for _ in 0..10 {
            assert_eq!(sample_affine_params(&cfg, &mut a), sample_affine_params(&cfg, &mut b));
            assert_eq!(sample_rigid_params(&cfg, 2, &mut a), sample_rigid_params(&cfg, 2, &mut b));
        }
    }

    proptest! {
        #[test]
        fn rigid_linear_block_is_proper_rotation(
            rx in -180.0f64..180.0, ry in -180.0f64..180.0, rz in -180.0f64..180.0,
            tx in -50.0f64..50.0, ty in -50.0f64..50.0, tz in -50.0f64..50.0,
        ) {
            let m = build_rigid(&RigidParams { rotation: [rx, ry, rz], translation: [tx, ty, tz] }, C);
            let l = m.linear();
            for i in 0..3 {
                for j in 0..3 {
                    let dot: f64 = (0..3).map(|k| l[i][k] * l[j][k]).sum();
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((dot - want).abs() < 1e-12);
                }
            }
            prop_assert!((m.determinant() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn reference_channel_never_moves(seed in any::<u64>()) {
            let cfg = GeneratorConfig::default();
            let mut r = substream(seed, 0, Stage::Motion, 0);
            prop_assert!(sample_rigid_params(&cfg, 0, &mut r).is_zero());
        }
    }

    #[test]
    fn inverse_composes_to_identity_for_random_affines() {
        let cfg = GeneratorConfig { rotation: (-180.0, 180.0), shearing: (-0.3, 0.3), scaling: (0.5, 2.0), ..Default::default() };
        let mut r = substream(99, 0, Stage::Misc, 0);
        for _ in 0..1000 {
            let p = sample_affine_params(&cfg, &mut r);
            let t = [rng::uniform(&mut r, -30.0, 30.0), rng::uniform(&mut r, -30.0, 30.0), rng::uniform(&mut r, -30.0, 30.0)];
            let a = AffineMatrix::translation(t).compose(&build_affine(&p, C).unwrap());
            let e = a.invert().unwrap().compose(&a);
            assert!(e.max_abs_diff(&AffineMatrix::identity()) < 1e-10);
        }
    }
}
