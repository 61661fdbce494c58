//! Estimation of Gaussian-mixture hyperparameters from a few real scans with
//! rough segmentations.
//!
//! Per scan and class: median and scaled MAD of the intensities, with the
//! variance rescaled by the resolution ratio. Across scans: mean and
//! population standard deviation of those estimates, widened by a factor
//! (5 by default) so training sees a broader range than the test data.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::intensity::GmmHyper;
use crate::stats;
use crate::volume::{LabelMap, Volume};

/// Consistency constant turning a MAD into a Gaussian standard deviation.
pub const MAD_SCALE: f64 = 1.4826;

pub const DEFAULT_WIDEN: f64 = 5.0;

/// Relative floor on the across-scan spread.
pub const SPREAD_FLOOR_REL: f64 = 0.05;
pub const SPREAD_FLOOR_ABS: f64 = 1e-6;

/// Median and `1.4826 · MAD`.
pub fn robust_stats(values: &[f64]) -> Result<(f64, f64)> {
    if values.is_empty() {
        return Err(Error::Empty("value list"));
    }
    let mut v = values.to_vec();
    let med = stats::median(&mut v);
    let mut dev: Vec<f64> = values.iter().map(|x| (x - med).abs()).collect();
    let mad = stats::median(&mut dev);
    Ok((med, MAD_SCALE * mad))
}

/// How the variance of a low-resolution channel is rescaled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceRatio {
    /// `(Σ r_c) / (Σ r_targ)`.
    #[default]
    Sum,
    /// `(Π r_c) / (Π r_targ)`, the ratio of voxel volumes.
    Product,
}

pub fn scale_variance(var: f64, r_c: [f64; 3], r_targ: [f64; 3], ratio: VarianceRatio) -> f64 {
    let f = match ratio {
        VarianceRatio::Sum => r_c.iter().sum::<f64>() / r_targ.iter().sum::<f64>(),
        VarianceRatio::Product => r_c.iter().product::<f64>() / r_targ.iter().product::<f64>(),
    };
    var * f
}

/// One channel of one scan with its rough segmentation.
#[derive(Debug, Clone)]
pub struct ScanObservation {
    pub image: Volume,
    pub labels: LabelMap,
    pub channel: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateOptions {
    pub r_c: [f64; 3],
    pub r_targ: [f64; 3],
    pub ratio: VarianceRatio,
    /// Min-max normalize each image before measuring.
    pub normalize: bool,
}

/// Per-class `(μ̂, σ̂)` of one scan, σ̂ already variance-scaled.
pub type ScanEstimate = BTreeMap<u32, (f64, f64)>;

pub fn estimate_scan(obs: &ScanObservation, opts: &EstimateOptions) -> Result<ScanEstimate> {
    if obs.image.grid.dims != obs.labels.grid.dims {
        return Err(Error::GridMismatch("image and label map must share a grid".into()));
    }
    let image = if opts.normalize { obs.image.minmax_normalize()? } else { obs.image.clone() };
    let mut by_class: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for (v, l) in image.data.iter().zip(obs.labels.data.iter()) {
        by_class.entry(*l).or_default().push(*v as f64);
    }
    by_class
        .into_par_iter()
        .map(|(label, values)| {
            let (mu, sigma) = robust_stats(&values)?;
            let var = scale_variance(sigma * sigma, opts.r_c, opts.r_targ, opts.ratio);
            Ok((label, (mu, var.sqrt())))
        })
        .collect()
}

/// Population statistics of per-scan estimates for one channel, widened.
/// `labels` lists the classes to fit; `None` fits every class seen.
pub fn fit_hyper(estimates: &[ScanEstimate], labels: Option<&[u32]>, widen: f64) -> Result<GmmHyper> {
    if estimates.is_empty() {
        return Err(Error::Empty("scan estimate list"));
    }
    let labels: Vec<u32> = match labels {
        Some(l) => l.to_vec(),
        None => {
            let mut all: Vec<u32> = estimates.iter().flat_map(|e| e.keys().copied()).collect();
            all.sort_unstable();
            all.dedup();
            all
        }
    };
    let mut h = GmmHyper {
        labels: labels.clone(),
        channels: 1,
        m_mu: Vec::new(),
        a_mu: Vec::new(),
        m_sigma: Vec::new(),
        a_sigma: Vec::new(),
    };
    for label in labels {
        let (mus, sigmas): (Vec<f64>, Vec<f64>) = estimates.iter().filter_map(|e| e.get(&label).copied()).unzip();
        if mus.is_empty() {
            return Err(Error::MissingClass(label));
        }
        let m_mu = stats::mean(&mus);
        let m_sigma = stats::mean(&sigmas);
        let a_mu = stats::std_population(&mus).max(SPREAD_FLOOR_REL * m_mu.abs() + SPREAD_FLOOR_ABS);
        let a_sigma = stats::std_population(&sigmas).max(SPREAD_FLOOR_REL * m_sigma + SPREAD_FLOOR_ABS);
        h.m_mu.push(vec![m_mu]);
        h.a_mu.push(vec![widen * a_mu]);
        h.m_sigma.push(vec![m_sigma]);
        h.a_sigma.push(vec![widen * a_sigma]);
    }
    h.validate()?;
    Ok(h)
}

/// Estimate a single-channel hyperparameter set from observations.
pub fn estimate_hyper(obs: &[ScanObservation], labels: Option<&[u32]>, opts: &EstimateOptions, widen: f64) -> Result<GmmHyper> {
    let per_scan = obs.par_iter().map(|o| estimate_scan(o, opts)).collect::<Result<Vec<_>>>()?;
    fit_hyper(&per_scan, labels, widen)
}

/// Insert a single-channel estimate as channel `channel` of `base`,
/// growing `base` as needed. Classes must match.
pub fn merge_channel(base: Option<GmmHyper>, single: &GmmHyper, channel: usize) -> Result<GmmHyper> {
    if single.channels != 1 {
        return Err(Error::invalid("merge expects a single-channel estimate"));
    }
    let mut h = match base {
        Some(b) => b,
        None => GmmHyper {
            labels: single.labels.clone(),
            channels: 0,
            m_mu: vec![Vec::new(); single.labels.len()],
            a_mu: vec![Vec::new(); single.labels.len()],
            m_sigma: vec![Vec::new(); single.labels.len()],
            a_sigma: vec![Vec::new(); single.labels.len()],
        },
    };
    if h.labels != single.labels {
        return Err(Error::invalid(format!("class lists differ: {:?} vs {:?}", h.labels, single.labels)));
    }
    let channels = h.channels.max(channel + 1);
    for (dst, src) in [(&mut h.m_mu, &single.m_mu), (&mut h.a_mu, &single.a_mu), (&mut h.m_sigma, &single.m_sigma), (&mut h.a_sigma, &single.a_sigma)] {
        for (row, s) in dst.iter_mut().zip(src.iter()) {
            row.resize(channels, 0.0);
            row[channel] = s[0];
        }
    }
    h.channels = channels;
    h.validate()?;
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intensity::{synthesize_intensities, GmmDraw};
    use crate::rng::{substream, Stage};
    use crate::volume::Grid;

    /// Sort-based median, independent of `stats::median`.
    fn sorted_median(v: &[f64]) -> f64 {
        let mut s = v.to_vec();
        s.sort_by(f64::total_cmp);
        let n = s.len();
        if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) }
    }

    #[test]
    fn robust_stats_fixture() {
        let v = [10.0, 12.0, 14.0, 16.0, 100.0];
        let med = sorted_median(&v);
        let mad = sorted_median(&v.map(|x| (x - med).abs()));
        assert_eq!((med, mad), (14.0, 2.0));
        let (m, s) = robust_stats(&v).unwrap();
        assert_eq!(m, 14.0);
        assert!((s - 2.9652).abs() < 1e-12);
        assert_eq!(robust_stats(&[3.0; 7]).unwrap(), (3.0, 0.0));
        assert_eq!(robust_stats(&[-2.5]).unwrap(), (-2.5, 0.0));
        assert!(robust_stats(&[]).is_err());
    }

    #[test]
    fn robust_stats_resists_outlier_and_order() {
        let base = [3.0, 9.0, 4.0, 7.0, 5.0];
        let (m0, s0) = robust_stats(&base).unwrap();
        let mut rev = base;
        rev.reverse();
        assert_eq!(robust_stats(&rev).unwrap(), (m0, s0));
        let mut outlier = base;
        outlier[1] = 1e9;
        assert_eq!(robust_stats(&outlier).unwrap().0, m0);
    }

    #[test]
    fn variance_scaling() {
        assert_eq!(scale_variance(2.0, [1.0; 3], [1.0; 3], VarianceRatio::Sum), 2.0);
        assert!((scale_variance(3.0, [1.0, 1.0, 5.0], [1.0; 3], VarianceRatio::Sum) - 7.0).abs() < 1e-12);
        assert!((scale_variance(1.0, [1.0, 1.0, 5.0], [1.0; 3], VarianceRatio::Product) - 5.0).abs() < 1e-12);
    }

    fn est(pairs: &[(u32, f64, f64)]) -> ScanEstimate {
        pairs.iter().map(|(l, m, s)| (*l, (*m, *s))).collect()
    }

    #[test]
    fn fit_population_and_widening() {
        let scans = [est(&[(1, 90.0, 4.0)]), est(&[(1, 110.0, 6.0)])];
        let h = fit_hyper(&scans, None, DEFAULT_WIDEN).unwrap();
        assert_eq!(h.m_mu[0][0], 100.0);
        assert_eq!(h.a_mu[0][0], 50.0);
        assert_eq!(h.m_sigma[0][0], 5.0);
        assert_eq!(h.a_sigma[0][0], 5.0);
        let raw = fit_hyper(&scans, None, 1.0).unwrap();
        assert_eq!(raw.a_mu[0][0], 10.0);

        let same = [est(&[(1, 80.0, 2.0)]), est(&[(1, 80.0, 2.0)])];
        let h = fit_hyper(&same, None, DEFAULT_WIDEN).unwrap();
        assert!((h.a_mu[0][0] - 5.0 * (0.05 * 80.0 + SPREAD_FLOOR_ABS)).abs() < 1e-9);
        assert!((h.a_sigma[0][0] - 5.0 * (0.05 * 2.0 + SPREAD_FLOOR_ABS)).abs() < 1e-9);
    }

    #[test]
    fn missing_class_is_named() {
        let scans = [est(&[(1, 1.0, 0.1)]), est(&[(2, 1.0, 0.1)])];
        assert!(matches!(fit_hyper(&scans, Some(&[1, 2, 7]), 1.0), Err(Error::MissingClass(7))));
        assert!(fit_hyper(&scans, Some(&[1, 2]), 1.0).is_ok());
    }

    #[test]
    fn recovers_known_parameters() {
        let g = Grid::new([30, 30, 30], [1.0; 3]).unwrap();
        let labels = LabelMap::from_fn(g, |x, y, _| (x / 10 + 3 * (y / 15)) as u32);
        let k = labels.labels.len();
        let mu: Vec<f64> = (0..k).map(|i| 20.0 + 15.0 * i as f64).collect();
        let sd: Vec<f64> = (0..k).map(|i| 1.0 + 0.5 * i as f64).collect();
        let draw = GmmDraw { labels: labels.labels.clone(), mu: mu.iter().map(|m| vec![*m]).collect(), sigma: sd.iter().map(|s| vec![*s]).collect() };
        let obs: Vec<ScanObservation> = (0..3)
            .map(|s| ScanObservation {
                image: synthesize_intensities(&labels, &draw, 0, &mut substream(s, 0, Stage::GmmVoxels, 0)).unwrap(),
                labels: labels.clone(),
                channel: 0,
            })
            .collect();
        let opts = EstimateOptions { r_c: [1.0; 3], r_targ: [1.0; 3], ratio: VarianceRatio::Sum, normalize: false };
        let h = estimate_hyper(&obs, None, &opts, 1.0).unwrap();
        for i in 0..k {
            assert!((h.m_mu[i][0] - mu[i]).abs() / mu[i] < 0.02);
            assert!((h.m_sigma[i][0] - sd[i]).abs() / sd[i] < 0.10);
        }
    }

    #[test]
    fn merge_builds_multichannel() {
        let a = fit_hyper(&[est(&[(1, 1.0, 0.1), (2, 2.0, 0.2)])], None, 1.0).unwrap();
        let b = fit_hyper(&[est(&[(1, 3.0, 0.3), (2, 4.0, 0.4)])], None, 1.0).unwrap();
        let h = merge_channel(None, &a, 0).unwrap();
        let h = merge_channel(Some(h), &b, 1).unwrap();
        assert_eq!(h.channels, 2);
        assert_eq!(h.m_mu, vec![vec![1.0, 3.0], vec![2.0, 4.0]]);
        let c = fit_hyper(&[est(&[(1, 3.0, 0.3)])], None, 1.0).unwrap();
        assert!(merge_channel(Some(h), &c, 1).is_err());
    }
}
