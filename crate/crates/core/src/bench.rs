//! Timing harness for the hot paths.

use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::acquire;
use crate::deform;
use crate::error::Result;
use crate::generator::{self, Generator, GeneratorConfig, TrainingPool};
use crate::geometry::{self, AffineParams};
use crate::net::layers::Conv;
use crate::phantom;
use crate::rng::{substream, Stage};
use crate::volume::{Grid, Interpolation, Transform, Volume};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchReport {
    pub op: String,
    pub dims: [usize; 3],
    pub ms_per_call: f64,
    pub voxels_per_sec: f64,
    pub workers: usize,
    /// Sum of the op's output, to confirm timing does not change results.
    pub checksum: f64,
}

/// Median wall time of `reps` calls after one untimed warm-up call.
pub fn time_op<T>(reps: usize, mut f: impl FnMut() -> T) -> (f64, T) {
    let mut out = f();
    let mut times: Vec<f64> = (0..reps.max(1))
        .map(|_| {
            let t = Instant::now();
            out = f();
            t.elapsed().as_secs_f64() * 1e3
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let n = times.len();
    let median = if n % 2 == 1 { times[n / 2] } else { 0.5 * (times[n / 2 - 1] + times[n / 2]) };
    (median.max(1e-6), out)
}

fn report(op: &str, dims: [usize; 3], ms: f64, workers: usize, checksum: f64) -> BenchReport {
    let vox = dims.iter().product::<usize>() as f64;
    BenchReport { op: op.into(), dims, ms_per_call: ms, voxels_per_sec: vox / (ms / 1e3), workers, checksum }
}

fn checksum(v: &[f32]) -> f64 {
    v.iter().map(|x| *x as f64).sum()
}

fn test_volume(dims: [usize; 3]) -> Result<Volume> {
    let g = Grid::new(dims, [1.0; 3])?;
    Ok(Volume::from_fn(g, |x, y, z| ((x * 7 + y * 3 + z * 5) % 17) as f32 / 17.0))
}

pub fn bench_blur(dims: [usize; 3], reps: usize) -> Result<BenchReport> {
    let v = test_volume(dims)?;
    let sigma = acquire::slice_sigma(1.0, [1.0, 1.0, 5.0], [1.0; 3]);
    let (ms, out) = time_op(reps, || acquire::gaussian_blur_aniso(&v, sigma));
    Ok(report("separable_blur", dims, ms, rayon::current_num_threads(), checksum(&out.data)))
}

/// Hot-path timings at `dims`; `generate_sample` is timed once per entry of
/// `workers`.
pub fn bench_all(dims: [usize; 3], reps: usize, workers: &[usize]) -> Result<Vec<BenchReport>> {
    let threads = rayon::current_num_threads();
    let v = test_volume(dims)?;
    let mut out = vec![bench_blur(dims, reps)?];

    let p = AffineParams { rotation: [5.0, -3.0, 2.0], scaling: [1.05, 0.97, 1.0], shearing: [0.01, 0.0, -0.01] };
    let a = geometry::build_affine(&p, v.grid.center_world())?;
    let (ms, w) = time_op(reps, || v.warp(Transform::Affine(&a), Interpolation::Trilinear));
    out.push(report("trilinear_warp", dims, ms, threads, checksum(&w?.data)));

    let svf = deform::upsample_svf(&deform::sample_svf(3.0, [10, 10, 10], &mut substream(0, 0, Stage::Svf, 0)), dims);
    let (ms, e) = time_op(reps, || deform::exponentiate(&svf, deform::DEFAULT_STEPS));
    out.push(report("scaling_and_squaring", dims, ms, threads, e.disp.iter().map(|d| d[0] + d[1] + d[2]).sum()));

    let conv = Conv::<f32>::uniform(8, 8, 3, &mut substream(0, 0, Stage::Init, 0));
    let x: Vec<f32> = (0..8).flat_map(|_| v.data.iter().copied()).collect();
    let (ms, y) = time_op(reps, || conv.forward(&x, dims));
    out.push(report("conv3d_forward_8x8", dims, ms, threads, checksum(&y)));
    let (ms, dx) = time_op(reps, || {
        let mut g = Conv::zeros(8, 8, 3);
        conv.backward(&x, dims, &y, &mut g)
    });
    out.push(report("conv3d_backward_8x8", dims, ms, threads, checksum(&dx)));

    let labels = phantom::label_map(dims, 4, 0)?;
    let crop = dims.map(|d| d.min(32));
    let cfg = GeneratorConfig {
        channels: vec![acquire::ChannelSpec { r_mm: [1.0, 1.0, 5.0], d_mm: [1.0, 1.0, 5.0], reference: true }],
        crop,
        ..Default::default()
    };
    let gen = Arc::new(Generator::new(cfg, TrainingPool::from_labels(vec![labels]), phantom::hyper(4, 1, 0.03)?)?);
    for &w in workers {
        let n = (reps.max(1) * w.max(1)) as u64;
        let t = Instant::now();
        let mut sum = 0.0;
        for s in generator::stream(gen.clone(), 0, n, w) {
            sum += checksum(&s?.target.residual.data);
        }
        let ms = t.elapsed().as_secs_f64() * 1e3 / n as f64;
        out.push(report("generate_sample", dims, ms.max(1e-6), w, sum));
    }
    Ok(out)
}

pub fn to_csv(reports: &[BenchReport]) -> String {
    let mut s = String::from("op,nx,ny,nz,ms_per_call,voxels_per_sec,workers,checksum\n");
    for r in reports {
        s += &format!(
            "{},{},{},{},{:.4},{:.1},{},{:.6e}\n",
            r.op, r.dims[0], r.dims[1], r.dims[2], r.ms_per_call, r.voxels_per_sec, r.workers, r.checksum
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_row_per_op_with_stable_checksums() {
        let a = bench_all([16, 16, 16], 1, &[1, 2]).unwrap();
        let ops: Vec<&str> = a.iter().map(|r| r.op.as_str()).collect();
        assert_eq!(
            ops,
            ["separable_blur", "trilinear_warp", "scaling_and_squaring", "conv3d_forward_8x8", "conv3d_backward_8x8", "generate_sample", "generate_sample"]
        );
        assert!(a.iter().all(|r| r.ms_per_call > 0.0 && r.voxels_per_sec > 0.0));
        // checksums do not depend on how often an op was timed
        let b = bench_all([16, 16, 16], 3, &[1]).unwrap();
        for (x, y) in a.iter().zip(&b).take(5) {
            assert_eq!(x.checksum, y.checksum);
        }
        let direct = acquire::gaussian_blur_aniso(&test_volume([16; 3]).unwrap(), acquire::slice_sigma(1.0, [1.0, 1.0, 5.0], [1.0; 3]));
        assert_eq!(checksum(&direct.data), a[0].checksum);
        assert_eq!(to_csv(&a).lines().count(), a.len() + 1);
    }
}
