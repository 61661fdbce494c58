//! High-resolution intensity synthesis from label maps: per-class Gaussian
//! mixture draws, gamma augmentation, multiplicative bias fields and the
//! 0.5 mm realism blur.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::deform::upsample_nodes;
use crate::error::{Error, Result};
use crate::filter;
use crate::rng;
use crate::volume::{Grid, LabelMap, Volume};

/// Prior hyperparameters of the per-class, per-channel Gaussians.
/// Matrices are indexed `[class][channel]`, classes in `labels` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmHyper {
    pub labels: Vec<u32>,
    pub channels: usize,
    pub m_mu: Vec<Vec<f64>>,
    pub a_mu: Vec<Vec<f64>>,
    pub m_sigma: Vec<Vec<f64>>,
    pub a_sigma: Vec<Vec<f64>>,
}

impl GmmHyper {
    /// Hyperparameters with zero spread: every draw equals `(mu, sigma)`.
    pub fn fixed(labels: Vec<u32>, mu: Vec<Vec<f64>>, sigma: Vec<Vec<f64>>) -> Result<GmmHyper> {
        let channels = mu.first().map(|r| r.len()).unwrap_or(0);
        let zeros = vec![vec![0.0; channels]; labels.len()];
        let h = GmmHyper { labels, channels, m_mu: mu, a_mu: zeros.clone(), m_sigma: sigma, a_sigma: zeros };
        h.validate()?;
        Ok(h)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.labels.len();
        if k == 0 || self.channels == 0 {
            return Err(Error::invalid("hyperparameters need at least one class and one channel"));
        }
        let mut sorted = self.labels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != k {
            return Err(Error::invalid("duplicate labels in hyperparameters"));
        }
        for (name, m) in [("m_mu", &self.m_mu), ("a_mu", &self.a_mu), ("m_sigma", &self.m_sigma), ("a_sigma", &self.a_sigma)] {
            if m.len() != k || m.iter().any(|r| r.len() != self.channels) {
                return Err(Error::Shape(format!("{name} must be {k}×{}", self.channels)));
            }
            if m.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("{name} has non-finite entries")));
            }
        }
        for (name, m) in [("a_mu", &self.a_mu), ("m_sigma", &self.m_sigma), ("a_sigma", &self.a_sigma)] {
            if m.iter().flatten().any(|v| *v < 0.0) {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        Ok(())
    }

    pub fn class_index(&self, label: u32) -> Option<usize> {
        self.labels.iter().position(|l| *l == label)
    }

    pub fn load(path: &Path) -> Result<GmmHyper> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let h: GmmHyper = serde_json::from_str(&text)?;
        h.validate()?;
        Ok(h)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Realized means and standard deviations, `[class][channel]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmDraw {
    pub labels: Vec<u32>,
    pub mu: Vec<Vec<f64>>,
    pub sigma: Vec<Vec<f64>>,
}

/// μ ~ N(m_μ, a_μ²); σ ~ N(m_σ, a_σ²) truncated at zero by rejection.
pub fn sample_gmm_params<R: Rng + ?Sized>(h: &GmmHyper, rng: &mut R) -> GmmDraw {
    let k = h.labels.len();
    let mut mu = vec![vec![0.0; h.channels]; k];
    let mut sigma = vec![vec![0.0; h.channels]; k];
    for c in 0..h.channels {
        for i in 0..k {
            mu[i][c] = rng::normal(rng, h.m_mu[i][c], h.a_mu[i][c]);
            sigma[i][c] = truncated_normal(rng, h.m_sigma[i][c], h.a_sigma[i][c]);
        }
    }
    GmmDraw { labels: h.labels.clone(), mu, sigma }
}

fn truncated_normal<R: Rng + ?Sized>(rng: &mut R, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return mean.max(0.0);
    }
    loop {
        let v = rng::normal(rng, mean, sd);
        if v >= 0.0 {
            return v;
        }
    }
}

/// Independent per-voxel draws `N(μ[label, c], σ²[label, c])`.
pub fn synthesize_intensities<R: Rng + ?Sized>(l: &LabelMap, d: &GmmDraw, channel: usize, rng: &mut R) -> Result<Volume> {
    let lookup: HashMap<u32, (f64, f64)> =
        d.labels.iter().enumerate().map(|(i, lab)| (*lab, (d.mu[i][channel], d.sigma[i][channel]))).collect();
    for lab in &l.labels {
        if !lookup.contains_key(lab) {
            return Err(Error::UnknownLabel(*lab));
        }
    }
    let data = l
        .data
        .iter()
        .map(|lab| {
            let (m, s) = lookup[lab];
            rng::normal(rng, m, s) as f32
        })
        .collect();
    Volume::new(l.grid, data)
}

/// `min + (max - min) · ((g - min) / (max - min))^γ`. Constant input is
/// returned unchanged.
pub fn gamma_augment(g: &Volume, gamma: f64) -> Volume {
    let (lo, hi) = g.min_max();
    if !(hi > lo) {
        return g.clone();
    }
    let (lo, span) = (lo as f64, hi as f64 - lo as f64);
    g.map(|v| {
        let t = ((v as f64 - lo) / span).clamp(0.0, 1.0);
        (lo + span * t.powf(gamma)) as f32
    })
}

/// Smooth, strictly positive multiplicative field.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasField {
    pub field: Volume,
    pub control_dims: [usize; 3],
    pub sigma: f64,
    /// Control-grid log values.
    pub log_nodes: Vec<f64>,
}

/// Log-field N(0, σ_B²) on the control grid, trilinearly upsampled and
/// exponentiated.
pub fn sample_bias<R: Rng + ?Sized>(grid: &Grid, sigma: f64, control_dims: [usize; 3], rng: &mut R) -> BiasField {
    let n = control_dims.iter().product();
    let log_nodes: Vec<f64> = (0..n).map(|_| rng::normal(rng, 0.0, sigma)).collect();
    let dense = upsample_nodes(&log_nodes, control_dims, grid.dims, || 0.0);
    let field = Volume { grid: *grid, data: dense.into_iter().map(|v| v.exp() as f32).collect() };
    BiasField { field, control_dims, sigma, log_nodes }
}

pub fn apply_bias(g: &Volume, b: &BiasField) -> Result<Volume> {
    if g.grid.dims != b.field.grid.dims {
        return Err(Error::GridMismatch(format!("bias {:?} vs image {:?}", b.field.grid.dims, g.grid.dims)));
    }
    let data = g.data.iter().zip(b.field.data.iter()).map(|(v, f)| v * f).collect();
    Ok(Volume { grid: g.grid, data })
}

/// Default standard deviation of the realism blur, mm.
pub const HR_BLUR_MM: f64 = 0.5;

/// Isotropic Gaussian blur with σ in mm, converted per axis with the voxel size.
pub fn blur_hr(g: &Volume, sigma_mm: f64) -> Volume {
    let r = g.grid.voxel_size;
    filter::blur_separable(g, [sigma_mm / r[0], sigma_mm / r[1], sigma_mm / r[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stage};
    use crate::stats;

    fn two_class_labels(n: usize) -> LabelMap {
        let g = Grid::new([n, n, n], [1.0; 3]).unwrap();
        LabelMap::from_fn(g, |x, _, _| if x < n / 2 { 2 } else { 5 })
    }

    fn hyper() -> GmmHyper {
        GmmHyper {
            labels: vec![2, 5],
            channels: 2,
            m_mu: vec![vec![0.3, 0.8], vec![0.6, 0.2]],
            a_mu: vec![vec![0.1, 0.05], vec![0.02, 0.2]],
            m_sigma: vec![vec![0.02, 0.05], vec![0.01, 0.03]],
            a_sigma: vec![vec![0.03, 0.01], vec![0.02, 0.04]],
        }
    }

    #[test]
    fn zero_spread_draw_is_exact() {
        let h = GmmHyper::fixed(vec![1, 4], vec![vec![3.0], vec![-1.0]], vec![vec![0.5], vec![0.25]]).unwrap();
        let d = sample_gmm_params(&h, &mut substream(1, 0, Stage::GmmParams, 0));
        assert_eq!(d.mu, h.m_mu);
        assert_eq!(d.sigma, h.m_sigma);
    }

    /// Moments of N(m, s²) truncated to [0, ∞), by trapezoidal quadrature.
    fn truncated_moments(m: f64, s: f64) -> (f64, f64) {
        let hi = m + 12.0 * s;
        let n = 200_000;
        let h = hi / n as f64;
        let (mut z, mut m1, mut m2) = (0.0, 0.0, 0.0);
        for i in 0..=n {
            let x = i as f64 * h;
            let w = if i == 0 || i == n { 0.5 } else { 1.0 };
            let p = w * (-(x - m).powi(2) / (2.0 * s * s)).exp();
            z += p;
            m1 += p * x;
            m2 += p * x * x;
        }
        let mean = m1 / z;
        (mean, (m2 / z - mean * mean).sqrt())
    }

    #[test]
    fn prior_moments_match() {
        let h = hyper();
        let mut r = substream(2, 0, Stage::GmmParams, 0);
        let n = 100_000;
        let draws: Vec<GmmDraw> = (0..n).map(|_| sample_gmm_params(&h, &mut r)).collect();
        for k in 0..2 {
            for c in 0..2 {
                let mus: Vec<f64> = draws.iter().map(|d| d.mu[k][c]).collect();
                let sig: Vec<f64> = draws.iter().map(|d| d.sigma[k][c]).collect();
                assert!(sig.iter().all(|s| *s >= 0.0));
                let se = h.a_mu[k][c] / (n as f64).sqrt();
                assert!((stats::mean(&mus) - h.m_mu[k][c]).abs() < 3.0 * se);
                let (tm, ts) = truncated_moments(h.m_sigma[k][c], h.a_sigma[k][c]);
                let se = ts / (n as f64).sqrt();
                assert!((stats::mean(&sig) - tm).abs() < 3.0 * se, "k{k} c{c}: {} vs {tm}", stats::mean(&sig));
            }
        }
    }

    #[test]
    fn single_class_without_noise_is_constant() {
        let g = Grid::new([4, 4, 4], [1.0; 3]).unwrap();
        let l = LabelMap::from_fn(g, |_, _, _| 3);
        let d = GmmDraw { labels: vec![3], mu: vec![vec![7.0]], sigma: vec![vec![0.0]] };
        let v = synthesize_intensities(&l, &d, 0, &mut substream(1, 0, Stage::GmmVoxels, 0)).unwrap();
        assert!(v.data.iter().all(|x| *x == 7.0));
    }

    #[test]
    fn unseen_label_is_rejected() {
        let l = two_class_labels(4);
        let d = GmmDraw { labels: vec![2], mu: vec![vec![1.0]], sigma: vec![vec![0.1]] };
        assert!(matches!(
            synthesize_intensities(&l, &d, 0, &mut substream(1, 0, Stage::GmmVoxels, 0)),
            Err(Error::UnknownLabel(5))
        ));
    }

    #[test]
    fn per_class_voxel_statistics() {
        let l = two_class_labels(32);
        let d = GmmDraw { labels: vec![2, 5], mu: vec![vec![10.0], vec![-3.0]], sigma: vec![vec![2.0], vec![0.5]] };
        let v = synthesize_intensities(&l, &d, 0, &mut substream(3, 0, Stage::GmmVoxels, 0)).unwrap();
        for (k, lab) in [2u32, 5].iter().enumerate() {
            let xs: Vec<f64> =
                v.data.iter().zip(l.data.iter()).filter(|(_, q)| *q == lab).map(|(x, _)| *x as f64).collect();
            assert!(xs.len() >= 10_000);
            let n = xs.len() as f64;
            let (mu, sd) = (d.mu[k][0], d.sigma[k][0]);
            assert!((stats::mean(&xs) - mu).abs() < 3.0 * sd / n.sqrt());
            assert!((stats::std_population(&xs) - sd).abs() < 3.0 * sd / (2.0 * n).sqrt());
        }
    }

    #[test]
    fn gamma_cases() {
        let g = Grid::new([3, 1, 1], [1.0; 3]).unwrap();
        let v = Volume::new(g, vec![0.0, 50.0, 100.0]).unwrap();
        assert_eq!(gamma_augment(&v, 1.0).data, v.data);
        let out = gamma_augment(&v, 2.0);
        assert!((out.data[1] - 25.0).abs() < 1e-4);
        for gamma in [0.3, 0.7, 1.3, 4.0] {
            assert_eq!(gamma_augment(&v, gamma).min_max(), v.min_max());
        }
        let c = Volume::filled(g, 4.0);
        assert_eq!(gamma_augment(&c, 2.0), c);
    }

    #[test]
    fn gamma_is_monotone() {
        let g = Grid::new([64, 1, 1], [1.0; 3]).unwrap();
        let v = Volume::from_fn(g, |x, _, _| ((x * 37) % 64) as f32 * 0.3 - 4.0);
        for gamma in [0.7, 1.0, 1.3] {
            let out = gamma_augment(&v, gamma);
            let mut pairs: Vec<(f32, f32)> = v.data.iter().copied().zip(out.data.iter().copied()).collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            assert!(pairs.windows(2).all(|w| w[1].1 >= w[0].1));
        }
    }

    #[test]
    fn bias_cases() {
        let g = Grid::new([12, 10, 8], [1.0; 3]).unwrap();
        let b = sample_bias(&g, 0.0, [4, 4, 4], &mut substream(1, 0, Stage::Bias, 0));
        assert!(b.field.data.iter().all(|v| *v == 1.0));
        let img = Volume::from_fn(g, |x, y, z| (x + y + z) as f32);
        assert_eq!(apply_bias(&img, &b).unwrap(), img);

        let two = BiasField { field: Volume::filled(g, 2.0), ..b.clone() };
        let doubled = apply_bias(&img, &two).unwrap();
        assert!(doubled.data.iter().zip(img.data.iter()).all(|(d, v)| *d == 2.0 * v));
        let scaled = apply_bias(&img.map(|v| 3.0 * v), &two).unwrap();
        assert!(scaled.data.iter().zip(doubled.data.iter()).all(|(s, d)| (*s - 3.0 * d).abs() < 1e-4));

        let other = Grid::new([3, 3, 3], [1.0; 3]).unwrap();
        assert!(apply_bias(&Volume::filled(other, 1.0), &b).is_err());

        for s in 0..20 {
            let b = sample_bias(&g, 0.5, [4, 4, 4], &mut substream(s, 0, Stage::Bias, 0));
            assert!(b.field.data.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn bias_log_std() {
        let g = Grid::new([4, 4, 4], [1.0; 3]).unwrap();
        let mut logs = Vec::new();
        for s in 0..1600 {
            logs.extend(sample_bias(&g, 0.5, [4, 4, 4], &mut substream(s, 0, Stage::Bias, 0)).log_nodes);
        }
        let n = logs.len() as f64;
        let sd = stats::std_population(&logs);
        assert!((sd - 0.5).abs() < 3.0 * 0.5 / (2.0 * n).sqrt(), "{sd}");
    }

    #[test]
    fn hr_blur_cases() {
        let g = Grid::new([21, 21, 21], [1.0; 3]).unwrap();
        let c = Volume::filled(g, 0.75);
        assert!(blur_hr(&c, HR_BLUR_MM).data.iter().all(|v| (v - 0.75).abs() < 1e-6));
        let imp = Volume::from_fn(g, |x, y, z| if (x, y, z) == (10, 10, 10) { 1.0 } else { 0.0 });
        let b = blur_hr(&imp, HR_BLUR_MM);
        let (mut m0, mut m2) = (0.0, 0.0);
        for i in 0..g.len() {
            let p = g.coords(i)[0] as f64 - 10.0;
            m0 += b.data[i] as f64;
            m2 += b.data[i] as f64 * p * p;
        }
        assert!(((m2 / m0) - 0.25).abs() / 0.25 < 0.05);
    }

    #[test]
    fn hyper_json_layout() {
        let h = hyper();
        let v: serde_json::Value = serde_json::to_value(&h).unwrap();
        for key in ["labels", "channels", "m_mu", "a_mu", "m_sigma", "a_sigma"] {
            assert!(v.get(key).is_some(), "{key}");
        }
        let back: GmmHyper = serde_json::from_value(v).unwrap();
        assert_eq!(back, h);
    }
}
