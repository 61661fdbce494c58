//! Procedural label maps and intensity priors for tests, demos and benchmarks.

use rand::Rng;

use crate::error::Result;
use crate::intensity::GmmHyper;
use crate::rng::{substream, Stage};
use crate::volume::{Grid, LabelMap};

/// Head-like phantom: background 0, an ellipsoidal "head" of label 1, an
/// inner ellipsoid of label 2 and randomly placed blobs of labels 3.. up to
/// `classes − 1`. Shapes vary with `seed`.
pub fn label_map(dims: [usize; 3], classes: u32, seed: u64) -> Result<LabelMap> {
    let grid = Grid::new(dims, [1.0; 3])?;
    let mut r = substream(seed, 0, Stage::Misc, 0);
    let c = dims.map(|d| (d as f64 - 1.0) / 2.0);
    let outer: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * r.random_range(0.36..0.46));
    let inner: [f64; 3] = std::array::from_fn(|a| outer[a] * r.random_range(0.5..0.75));
    let shift: [f64; 3] = std::array::from_fn(|a| dims[a] as f64 * r.random_range(-0.05..0.05));
    let blobs: Vec<([f64; 3], f64, u32)> = (0..8)
        .map(|i| {
            let p = std::array::from_fn(|a| c[a] + outer[a] * r.random_range(-0.7..0.7));
            let rad = dims.iter().copied().min().unwrap() as f64 * r.random_range(0.06..0.14);
            let lab = if classes > 3 { 3 + (i as u32 % (classes - 3)) } else { 2 };
            (p, rad, lab)
        })
        .collect();
    let ell = |p: [f64; 3], ax: [f64; 3]| -> f64 { (0..3).map(|a| ((p[a] - c[a] - shift[a]) / ax[a]).powi(2)).sum() };
    Ok(LabelMap::from_fn(grid, |x, y, z| {
        let p = [x as f64, y as f64, z as f64];
        if ell(p, outer) > 1.0 {
            return 0;
        }
        for (b, rad, lab) in &blobs {
            if (0..3).map(|a| (p[a] - b[a]).powi(2)).sum::<f64>() < rad * rad {
                return *lab;
            }
        }
        if classes > 2 && ell(p, inner) <= 1.0 {
            2
        } else {
            1
        }
    }))
}

/// Fixed priors with well-separated class means and small spreads.
pub fn hyper(classes: u32, channels: usize, sigma: f64) -> Result<GmmHyper> {
    let labels: Vec<u32> = (0..classes).collect();
    let k1 = classes.max(2) as usize - 1;
    let mu = (0..classes as usize)
        .map(|k| {
            (0..channels)
                .map(|c| if k == 0 { 0.0 } else { 0.25 + 0.75 * ((k - 1 + c) % k1) as f64 / (k1 - 1).max(1) as f64 })
                .collect()
        })
        .collect();
    let sd = (0..classes as usize).map(|k| vec![if k == 0 { 0.0 } else { sigma }; channels]).collect();
    GmmHyper::fixed(labels, mu, sd)
}
