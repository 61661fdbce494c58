//! Training-sample generation: pair selection, spatial augmentation, GMM
//! synthesis, per-channel corruption and regression targets.
//!
//! A sample is a pure function of `(config, pool, hyper, sample index)`:
//! every random draw comes from a substream keyed by
//! `(seed, index, stage, channel, attempt)`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::acquire::{self, ChannelSpec};
use crate::deform::{self, DenseDeformation};
use crate::error::{Error, Result};
use crate::geometry::{self, AffineParams, RigidParams};
use crate::intensity::{self, GmmDraw, GmmHyper};
use crate::rng::{self, Stage, StreamKey};
use crate::volume::{CropWindow, Interpolation, LabelMap, Transform, Volume};

/// Regression mode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Super-resolution of the reference contrast; target is `G_1^B − U_1`.
    #[default]
    Sr,
    /// Joint super-resolution and synthesis of a real reference contrast.
    SrSynth,
}

/// Generator hyperparameters. Defaults are the published values; angles in
/// degrees, spatial quantities in mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    /// `(a_rot, b_rot)`, degrees.
    pub rotation: (f64, f64),
    /// `(a_sc, b_sc)`; log-scalings are drawn uniformly between their logs.
    pub scaling: (f64, f64),
    pub shearing: (f64, f64),
    /// σ_T², velocity-field variance (voxels²).
    pub svf_variance: f64,
    pub gamma: (f64, f64),
    /// σ_B², log-bias variance.
    pub bias_variance: f64,
    /// `(a_t, b_t)`, inter-scan translation range.
    pub translation: (f64, f64),
    pub alpha: (f64, f64),
    /// σ²_εθ, registration-error rotation variance (degrees²).
    pub reg_rotation_variance: f64,
    /// σ²_εt, registration-error translation variance (mm²).
    pub reg_translation_variance: f64,
    pub channels: Vec<ChannelSpec>,
    pub r_targ: [f64; 3],
    pub mode: Mode,
    pub crop: [usize; 3],
    pub svf_control: [usize; 3],
    pub bias_control: [usize; 3],
    pub num_steps: u32,
    pub seed: u64,
    pub hr_blur_mm: f64,
    /// Random slice phase per channel instead of anchoring at HR voxel 0.
    pub random_phase: bool,
    /// Input channel whose contrast resembles the synthesis target (`c*`).
    pub similar_channel: Option<usize>,
    /// White-matter labels for synthesis-target normalization.
    pub wm_labels: Vec<u32>,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            rotation: (-10.0, 10.0),
            scaling: (0.9, 1.1),
            shearing: (-0.01, 0.01),
            svf_variance: 3.0 * 3.0,
            gamma: (0.7, 1.3),
            bias_variance: 0.5 * 0.5,
            translation: (-20.0, 20.0),
            alpha: (0.8, 1.2),
            reg_rotation_variance: 0.3 * 0.3,
            reg_translation_variance: 0.3 * 0.3,
            channels: vec![ChannelSpec { r_mm: [1.0; 3], d_mm: [1.0; 3], reference: true }],
            r_targ: [1.0; 3],
            mode: Mode::Sr,
            crop: [192; 3],
            svf_control: [10, 10, 10],
            bias_control: [4, 4, 4],
            num_steps: deform::DEFAULT_STEPS,
            seed: 0,
            hr_blur_mm: intensity::HR_BLUR_MM,
            random_phase: false,
            similar_channel: None,
            wm_labels: Vec::new(),
        }
    }
}

impl GeneratorConfig {
    /// Every source of randomness collapsed to its neutral value.
    pub fn neutral() -> Self {
        GeneratorConfig {
            rotation: (0.0, 0.0),
            scaling: (1.0, 1.0),
            shearing: (0.0, 0.0),
            svf_variance: 0.0,
            gamma: (1.0, 1.0),
            bias_variance: 0.0,
            translation: (0.0, 0.0),
            alpha: (1.0, 1.0),
            reg_rotation_variance: 0.0,
            reg_translation_variance: 0.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, (a, b)) in [
            ("rotation", self.rotation),
            ("scaling", self.scaling),
            ("shearing", self.shearing),
            ("gamma", self.gamma),
            ("translation", self.translation),
            ("alpha", self.alpha),
        ] {
            if !(a <= b) {
                return Err(Error::invalid(format!("{name} range must satisfy a <= b, got ({a}, {b})")));
            }
        }
        if !(self.scaling.0 > 0.0) || !(self.gamma.0 > 0.0) || !(self.alpha.0 > 0.0) {
            return Err(Error::invalid("scaling, gamma and alpha ranges must be positive"));
        }
        for (name, v) in [
            ("svf_variance", self.svf_variance),
            ("bias_variance", self.bias_variance),
            ("reg_rotation_variance", self.reg_rotation_variance),
            ("reg_translation_variance", self.reg_translation_variance),
            ("hr_blur_mm", self.hr_blur_mm),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be non-negative")));
            }
        }
        if self.r_targ.iter().any(|r| !(*r > 0.0)) {
            return Err(Error::invalid("r_targ must be positive"));
        }
        if self.channels.is_empty() {
            return Err(Error::invalid("at least one channel is required"));
        }
        for c in &self.channels {
            c.validate()?;
        }
        let refs: Vec<usize> = self.channels.iter().enumerate().filter(|(_, c)| c.reference).map(|(i, _)| i).collect();
        if refs != [0] {
            return Err(Error::invalid(format!(
                "exactly one reference channel is required and it must be channel 0 (found {refs:?})"
            )));
        }
        if self.crop.iter().any(|c| *c == 0) {
            return Err(Error::invalid("crop size must be positive"));
        }
        if self.svf_control.iter().chain(self.bias_control.iter()).any(|c| *c == 0) {
            return Err(Error::invalid("control grids must be non-empty"));
        }
        if self.num_steps == 0 {
            return Err(Error::invalid("num_steps must be at least 1"));
        }
        if let Some(c) = self.similar_channel {
            if c >= self.channels.len() {
                return Err(Error::invalid(format!("similar_channel {c} out of range")));
            }
        }
        if self.mode == Mode::SrSynth && self.wm_labels.is_empty() {
            return Err(Error::invalid("sr_synth mode needs wm_labels for target normalization"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<GeneratorConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: GeneratorConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

/// Image/segmentation pairs to draw from. Images are only required for
/// joint synthesis.
#[derive(Debug, Clone, Default)]
pub struct TrainingPool {
    pub pairs: Vec<(Option<Volume>, LabelMap)>,
}

impl TrainingPool {
    pub fn from_labels(labels: Vec<LabelMap>) -> Self {
        TrainingPool { pairs: labels.into_iter().map(|l| (None, l)).collect() }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Empty("training pool"));
        }
        for (i, (img, lab)) in self.pairs.iter().enumerate() {
            match (mode, img) {
                (Mode::SrSynth, None) => {
                    return Err(Error::invalid(format!("pair {i} lacks an image, required for sr_synth")));
                }
                (_, Some(img)) if img.grid.dims != lab.grid.dims => {
                    return Err(Error::GridMismatch(format!("pair {i}: image and labels differ in dims")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// Uniform choice of a pool index.
pub fn select_pair<R: Rng + ?Sized>(pool: &TrainingPool, rng: &mut R) -> Result<usize> {
    if pool.is_empty() {
        return Err(Error::Empty("training pool"));
    }
    Ok(rng.random_range(0..pool.len()))
}

/// Per-channel random draws, recorded for provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelDraws {
    pub gamma: f64,
    pub motion: RigidParams,
    pub alpha: f64,
    pub slice_sigma: [f64; 3],
    pub phase: [f64; 3],
    pub registration_error: RigidParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMetadata {
    pub sample_index: u64,
    pub seed: u64,
    pub attempt: u64,
    pub source_index: usize,
    pub mode: Mode,
    pub affine: AffineParams,
    pub gmm: GmmDraw,
    pub channels: Vec<ChannelDraws>,
    pub crop: CropWindow,
    /// Intensity range of `U_1` used to normalize the inputs and, in `sr`
    /// mode, the target.
    pub reference_range: (f32, f32),
}

/// Network inputs, regression target and the normalized volume the target
/// reconstructs.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// Interleaved `[U_1, V_1, U_2, V_2, ...]`, all normalized.
    pub inputs: Vec<Volume>,
    pub target: Y,
    pub metadata: SampleMetadata,
}

/// Regression target with the volume it reconstructs.
#[derive(Debug, Clone)]
pub struct Y {
    pub residual: Volume,
    /// `G_1^B` (sr) or `I^T` (sr_synth), normalized.
    pub reference: Volume,
}

impl TrainingSample {
    pub fn u(&self, c: usize) -> &Volume {
        &self.inputs[2 * c]
    }

    pub fn v(&self, c: usize) -> &Volume {
        &self.inputs[2 * c + 1]
    }
}

/// Target per mode. Inputs must already be normalized.
///
/// * `sr`: `G_1^B − U_1`.
/// * `sr_synth` with `c*`: `I^T − U_{c*}`; without: `I^T`.
pub fn make_target(mode: Mode, i_t: Option<&Volume>, g1b: &Volume, u: &[Volume], c_star: Option<usize>) -> Result<Volume> {
    let diff = |a: &Volume, b: &Volume| -> Result<Volume> {
        if a.grid.dims != b.grid.dims {
            return Err(Error::GridMismatch("target and input differ in dims".into()));
        }
        let data = a.data.iter().zip(b.data.iter()).map(|(x, y)| (*x as f64 - *y as f64) as f32).collect();
        Ok(Volume { grid: b.grid, data })
    };
    match mode {
        Mode::Sr => diff(g1b, u.first().ok_or(Error::Empty("input stack"))?),
        Mode::SrSynth => {
            let it = i_t.ok_or_else(|| Error::invalid("sr_synth target needs the deformed real image"))?;
            match c_star {
                Some(c) => diff(it, u.get(c).ok_or_else(|| Error::invalid(format!("no input channel {c}")))?),
                None => Ok(it.clone()),
            }
        }
    }
}

const MAX_ATTEMPTS: u64 = 32;

/// Shared, read-only sample generator.
#[derive(Debug, Clone)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    pub pool: TrainingPool,
    pub hyper: GmmHyper,
}

struct Hr {
    labels: LabelMap,
    image: Option<Volume>,
    affine: AffineParams,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, pool: TrainingPool, hyper: GmmHyper) -> Result<Generator> {
        cfg.validate()?;
        pool.validate(cfg.mode)?;
        hyper.validate()?;
        if hyper.channels < cfg.num_channels() {
            return Err(Error::invalid(format!(
                "hyperparameters cover {} channels, config has {}",
                hyper.channels,
                cfg.num_channels()
            )));
        }
        for (_, l) in &pool.pairs {
            for a in 0..3 {
                if (l.grid.voxel_size[a] - cfg.r_targ[a]).abs() > 1e-3 * cfg.r_targ[a] {
                    return Err(Error::GridMismatch(format!(
                        "label voxel size {:?} differs from r_targ {:?}",
                        l.grid.voxel_size, cfg.r_targ
                    )));
                }
            }
            if let Some(bad) = l.labels.iter().find(|lab| hyper.class_index(**lab).is_none()) {
                return Err(Error::UnknownLabel(*bad));
            }
        }
        Ok(Generator { cfg, pool, hyper })
    }

    fn key(&self, index: u64, stage: Stage, channel: usize, attempt: u64) -> StreamKey {
        StreamKey::new(self.cfg.seed, index, stage, channel as u32).with_attempt(attempt)
    }

    fn spatial(&self, index: u64, attempt: u64) -> Result<(usize, Hr)> {
        let n = select_pair(&self.pool, &mut self.key(index, Stage::Selection, 0, attempt).stream())?;
        let (image, labels) = &self.pool.pairs[n];
        let grid = labels.grid;
        let affine = geometry::sample_affine_params(&self.cfg, &mut self.key(index, Stage::Affine, 0, attempt).stream());
        let t_lin = geometry::build_affine(&affine, grid.center_world())?;
        let sigma_t = self.cfg.svf_variance.sqrt();
        let t_nonlin = if sigma_t > 0.0 {
            let svf = deform::sample_svf(sigma_t, self.cfg.svf_control, &mut self.key(index, Stage::Svf, 0, attempt).stream());
            deform::exponentiate(&deform::upsample_svf(&svf, grid.dims), self.cfg.num_steps)
        } else {
            DenseDeformation::zeros(grid.dims)
        };
        let t = deform::compose_affine_nonlinear(&t_lin, &t_nonlin, &grid);
        if !t.is_finite() {
            return Err(Error::NonFinite { stage: "spatial deformation".into() });
        }
        let labels_t = labels.warp(Transform::Dense(&t), Interpolation::Nearest)?;
        let image_t = match image {
            Some(img) => Some(img.warp(Transform::Dense(&t), Interpolation::Trilinear)?),
            None => None,
        };
        Ok((n, Hr { labels: labels_t, image: image_t, affine }))
    }

    /// Gamma-augmented GMM intensities per channel, before any blur.
    pub fn synthesize_hr(&self, labels: &LabelMap, index: u64, attempt: u64) -> Result<(GmmDraw, Vec<f64>, Vec<Volume>)> {
        let draw = intensity::sample_gmm_params(&self.hyper, &mut self.key(index, Stage::GmmParams, 0, attempt).stream());
        let mut gammas = Vec::new();
        let mut out = Vec::new();
        for c in 0..self.cfg.num_channels() {
            let g = intensity::synthesize_intensities(labels, &draw, c, &mut self.key(index, Stage::GmmVoxels, c, attempt).stream())?;
            let gamma = rng::uniform(&mut self.key(index, Stage::Gamma, c, attempt).stream(), self.cfg.gamma.0, self.cfg.gamma.1);
            let g = intensity::gamma_augment(&g, gamma);
            check(&g, "gmm synthesis")?;
            gammas.push(gamma);
            out.push(g);
        }
        Ok((draw, gammas, out))
    }

    /// Builds sample `index`, retrying with the next attempt key when a crop
    /// is constant.
    pub fn generate_sample(&self, index: u64) -> Result<TrainingSample> {
        for attempt in 0..MAX_ATTEMPTS {
            match self.attempt(index, attempt) {
                Err(Error::DegenerateNormalization(why)) => {
                    log::info!("sample {index} attempt {attempt}: {why}; regenerating");
                }
                other => return other,
            }
        }
        Err(Error::DegenerateNormalization(format!("sample {index}: every attempt produced a constant crop")))
    }

    fn attempt(&self, index: u64, attempt: u64) -> Result<TrainingSample> {
        let cfg = &self.cfg;
        let (source_index, hr) = self.spatial(index, attempt)?;
        let grid = hr.labels.grid;
        let (gmm, gammas, g) = self.synthesize_hr(&hr.labels, index, attempt)?;

        let mut us = Vec::new();
        let mut vs = Vec::new();
        let mut g1b = None;
        let mut draws = Vec::new();
        for (c, spec) in cfg.channels.iter().enumerate() {
            let gc = intensity::blur_hr(&g[c], cfg.hr_blur_mm);
            let motion = geometry::sample_rigid_params(cfg, c, &mut self.key(index, Stage::Motion, c, attempt).stream());
            let g_r = acquire::apply_interscan_motion(&gc, &motion, c)?;
            let bias = intensity::sample_bias(
                &grid,
                cfg.bias_variance.sqrt(),
                cfg.bias_control,
                &mut self.key(index, Stage::Bias, c, attempt).stream(),
            );
            let g_b = intensity::apply_bias(&g_r, &bias)?;
            check(&g_b, "bias field")?;

            let alpha = rng::uniform(&mut self.key(index, Stage::Slice, c, attempt).stream(), cfg.alpha.0, cfg.alpha.1);
            let sigma = acquire::slice_sigma(alpha, spec.r_mm, cfg.r_targ);
            let blurred = acquire::gaussian_blur_aniso(&g_b, sigma);
            let phase = if cfg.random_phase {
                let mut r = self.key(index, Stage::Phase, c, attempt).stream();
                let mut p = [0.0; 3];
                for a in 0..3 {
                    p[a] = rng::uniform(&mut r, 0.0, spec.d_mm[a] / cfg.r_targ[a]);
                }
                p
            } else {
                [0.0; 3]
            };
            let i_lr = acquire::subsample_slices(&blurred, spec.d_mm, phase)?;
            let err = acquire::sample_registration_error(
                cfg.reg_rotation_variance.sqrt(),
                cfg.reg_translation_variance.sqrt(),
                c,
                &mut self.key(index, Stage::RegistrationError, c, attempt).stream(),
            );
            let u = acquire::realign_and_resample(&i_lr, &motion, &err, &grid);
            let v = acquire::compute_reliability(&i_lr.grid, &grid, &motion, &err);
            check(&u, "resampling")?;
            if c == 0 {
                g1b = Some(g_b);
            }
            us.push(u);
            vs.push(v);
            draws.push(ChannelDraws { gamma: gammas[c], motion, alpha, slice_sigma: sigma, phase, registration_error: err });
        }
        let g1b = g1b.expect("channel 0 exists");

        let window = CropWindow::sample(grid.dims, cfg.crop, &mut self.key(index, Stage::Crop, 0, attempt).stream());
        let us: Vec<Volume> = us.iter().map(|u| u.crop(&window)).collect();
        let vs: Vec<Volume> = vs.iter().map(|v| v.crop(&window)).collect();
        let g1b = g1b.crop(&window);

        let reference_range = us[0].min_max();
        let mut un = Vec::with_capacity(us.len());
        for (c, u) in us.iter().enumerate() {
            un.push(u.minmax_normalize().map_err(|e| match e {
                Error::DegenerateNormalization(m) => Error::DegenerateNormalization(format!("channel {c}: {m}")),
                other => other,
            })?);
        }

        let (reference, residual) = match cfg.mode {
            Mode::Sr => {
                let gn = g1b.normalize_with(reference_range.0, reference_range.1);
                let y = make_target(Mode::Sr, None, &gn, &un, None)?;
                (gn, y)
            }
            Mode::SrSynth => {
                let it = hr.image.as_ref().ok_or_else(|| Error::invalid("missing image for sr_synth"))?.crop(&window);
                let lt = hr.labels.crop(&window);
                let itn = it.wm_median_normalize(&lt, &cfg.wm_labels)?;
                let y = make_target(Mode::SrSynth, Some(&itn), &g1b, &un, cfg.similar_channel)?;
                (itn, y)
            }
        };
        check(&residual, "target")?;

        let inputs = un.into_iter().zip(vs).flat_map(|(u, v)| [u, v]).collect();
        Ok(TrainingSample {
            inputs,
            target: Y { residual, reference },
            metadata: SampleMetadata {
                sample_index: index,
                seed: cfg.seed,
                attempt,
                source_index,
                mode: cfg.mode,
                affine: hr.affine,
                gmm,
                channels: draws,
                crop: window,
                reference_range,
            },
        })
    }
}

fn check(v: &Volume, stage: &str) -> Result<()> {
    if v.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { stage: stage.into() })
    }
}

/// Samples `[start, start + count)` delivered in index order, produced by
/// `workers` threads (inline when `workers <= 1`).
pub struct SampleStream {
    next: u64,
    end: u64,
    inline: Option<Arc<Generator>>,
    rx: Option<mpsc::Receiver<(u64, Result<TrainingSample>)>>,
    pending: BTreeMap<u64, Result<TrainingSample>>,
    stop: Arc<AtomicBool>,
    handles: Vec<thread::JoinHandle<()>>,
}

pub fn stream(generator: Arc<Generator>, start: u64, count: u64, workers: usize) -> SampleStream {
    let end = start + count;
    let stop = Arc::new(AtomicBool::new(false));
    if workers <= 1 || count <= 1 {
        return SampleStream { next: start, end, inline: Some(generator), rx: None, pending: BTreeMap::new(), stop, handles: Vec::new() };
    }
    let (tx, rx) = mpsc::sync_channel(2 * workers);
    let counter = Arc::new(AtomicU64::new(start));
    let handles = (0..workers)
        .map(|_| {
            let (g, tx, counter, stop) = (generator.clone(), tx.clone(), counter.clone(), stop.clone());
            thread::spawn(move || loop {
                if stop.load(Ordering::Relaxed) {
                    break;
                }
                let i = counter.fetch_add(1, Ordering::Relaxed);
                if i >= end {
                    break;
                }
                if tx.send((i, g.generate_sample(i))).is_err() {
                    break;
                }
            })
        })
        .collect();
    SampleStream { next: start, end, inline: None, rx: Some(rx), pending: BTreeMap::new(), stop, handles }
}

impl Iterator for SampleStream {
    type Item = Result<TrainingSample>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.end {
            return None;
        }
        let i = self.next;
        self.next += 1;
        if let Some(g) = &self.inline {
            return Some(g.generate_sample(i));
        }
        loop {
            if let Some(s) = self.pending.remove(&i) {
                return Some(s);
            }
            match self.rx.as_ref().expect("threaded stream").recv() {
                Ok((j, s)) => {
                    self.pending.insert(j, s);
                }
                Err(_) => return Some(Err(Error::invalid(format!("generator workers stopped before sample {i}")))),
            }
        }
    }
}

impl Drop for SampleStream {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        self.rx.take();
        for h in self.handles.drain(..) {
            let _ = h.join();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;
    use crate::volume::Grid;

    pub(crate) fn blobs(n: usize, seed: u64) -> LabelMap {
        let g = Grid::new([n, n, n], [1.0; 3]).unwrap();
        let mut r = substream(seed, 0, Stage::Misc, 0);
        let centers: Vec<([f64; 3], f64, u32)> = (0..6)
            .map(|i| {
                let c = [r.random::<f64>() * n as f64, r.random::<f64>() * n as f64, r.random::<f64>() * n as f64];
                (c, 3.0 + r.random::<f64>() * n as f64 / 4.0, 1 + (i % 3) as u32)
            })
            .collect();
        LabelMap::from_fn(g, |x, y, z| {
            for (c, rad, lab) in &centers {
                let d2 = (x as f64 - c[0]).powi(2) + (y as f64 - c[1]).powi(2) + (z as f64 - c[2]).powi(2);
                if d2 < rad * rad {
                    return *lab;
                }
            }
            0
        })
    }

    fn hyper(channels: usize) -> GmmHyper {
        let mu = (0..4).map(|k| (0..channels).map(|c| 0.1 + 0.25 * ((k + c) % 4) as f64).collect()).collect();
        let sd = (0..4).map(|_| vec![0.02; channels]).collect();
        GmmHyper::fixed(vec![0, 1, 2, 3], mu, sd).unwrap()
    }

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig {
            channels: vec![
                ChannelSpec { r_mm: [1.0, 1.0, 3.0], d_mm: [1.0, 1.0, 3.0], reference: true },
                ChannelSpec { r_mm: [3.0, 1.0, 1.0], d_mm: [3.0, 1.0, 1.0], reference: false },
            ],
            crop: [16, 16, 16],
            seed: 42,
            ..Default::default()
        }
    }

    #[test]
    fn config_defaults_follow_published_table() {
        let c = GeneratorConfig::default();
        let row = [
            c.rotation.0, c.rotation.1, c.scaling.0, c.scaling.1, c.shearing.0, c.shearing.1, c.svf_variance,
            c.gamma.0, c.gamma.1, c.bias_variance, c.translation.0, c.translation.1, c.alpha.0, c.alpha.1,
            c.reg_rotation_variance, c.reg_translation_variance,
        ];
        let want = [-10.0, 10.0, 0.9, 1.1, -0.01, 0.01, 9.0, 0.7, 1.3, 0.25, -20.0, 20.0, 0.8, 1.2, 0.09, 0.09];
        for (a, b) in row.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg();
        c.rotation = (5.0, -5.0);
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.channels[1].reference = true;
        assert!(c.validate().is_err());
        let mut c = small_cfg();
        c.mode = Mode::SrSynth;
        assert!(c.validate().is_err());
        let json = serde_json::to_string(&small_cfg()).unwrap();
        let back: GeneratorConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, small_cfg());
        let partial: GeneratorConfig = serde_json::from_str(r#"{"seed": 9}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.rotation, (-10.0, 10.0));
    }

    #[test]
    fn pair_selection() {
        let one = TrainingPool::from_labels(vec![blobs(8, 1)]);
        let mut r = substream(1, 0, Stage::Selection, 0);
        assert!((0..50).all(|_| select_pair(&one, &mut r).unwrap() == 0));
        assert!(select_pair(&TrainingPool::default(), &mut r).is_err());

        let four = TrainingPool::from_labels((0..4).map(|s| blobs(4, s)).collect());
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[select_pair(&four, &mut r).unwrap()] += 1;
        }
        let se = (0.25 * 0.75 / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - 0.25).abs() < 3.0 * se, "{counts:?}");
        }
        let a: Vec<usize> = {
            let mut r = substream(5, 0, Stage::Selection, 0);
            (0..10).map(|_| select_pair(&four, &mut r).unwrap()).collect()
        };
        let b: Vec<usize> = {
            let mut r = substream(5, 0, Stage::Selection, 0);
            (0..10).map(|_| select_pair(&four, &mut r).unwrap()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn make_target_modes() {
        let g = Grid::new([3, 1, 1], [1.0; 3]).unwrap();
        let u = Volume::new(g, vec![0.0, 0.5, 1.0]).unwrap();
        let y = make_target(Mode::Sr, None, &u, &[u.clone()], None).unwrap();
        assert!(y.data.iter().all(|v| *v == 0.0));
        let gb = Volume::new(g, vec![0.1, 0.4, 1.2]).unwrap();
        let y = make_target(Mode::Sr, None, &gb, &[u.clone()], None).unwrap();
        for i in 0..3 {
            assert!((y.data[i] + u.data[i] - gb.data[i]).abs() < 1e-7);
        }
        let it = Volume::new(g, vec![0.9, 1.0, 1.1]).unwrap();
        assert_eq!(make_target(Mode::SrSynth, Some(&it), &gb, &[u.clone()], None).unwrap(), it);
        let y = make_target(Mode::SrSynth, Some(&it), &gb, &[u.clone()], Some(0)).unwrap();
        assert!((y.data[0] - 0.9).abs() < 1e-7);
        assert!(make_target(Mode::SrSynth, None, &gb, &[u], None).is_err());
    }

    #[test]
    fn samples_are_deterministic_and_well_formed() {
        let pool = TrainingPool::from_labels(vec![blobs(20, 1), blobs(20, 2)]);
        let gen = Generator::new(small_cfg(), pool, hyper(2)).unwrap();
        let a = gen.generate_sample(3).unwrap();
        let b = gen.generate_sample(3).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.target.residual, b.target.residual);
        assert_eq!(a.inputs.len(), 4);
        for v in a.inputs.iter().chain([&a.target.residual, &a.target.reference]) {
            assert_eq!(v.grid.dims, [16, 16, 16]);
        }
        for v in &a.inputs {
            assert!(v.data.iter().all(|x| (0.0..=1.0).contains(x)));
        }
        for i in 0..a.target.residual.data.len() {
            let r = a.target.residual.data[i] + a.u(0).data[i];
            assert!((r - a.target.reference.data[i]).abs() <= 1e-6);
        }
        assert!(a.metadata.channels[0].motion.is_zero());
        assert!(a.metadata.channels[0].registration_error.is_zero());
        let c = gen.generate_sample(4).unwrap();
        assert_ne!(a.inputs[0], c.inputs[0]);
    }

    #[test]
    fn neutral_pipeline_reduces_to_blur() {
        let labels = blobs(16, 3);
        let cfg = GeneratorConfig { crop: [16; 3], seed: 1, ..GeneratorConfig::neutral() };
        let gen = Generator::new(cfg.clone(), TrainingPool::from_labels(vec![labels.clone()]), hyper(1)).unwrap();
        let s = gen.generate_sample(0).unwrap();
        let (_, _, g) = gen.synthesize_hr(&labels, 0, s.metadata.attempt).unwrap();
        let sigma = acquire::slice_sigma(1.0, [1.0; 3], [1.0; 3]);
        let expected = acquire::gaussian_blur_aniso(&intensity::blur_hr(&g[0], cfg.hr_blur_mm), sigma);
        let en = expected.minmax_normalize().unwrap();
        for (a, b) in s.u(0).data.iter().zip(en.data.iter()) {
            assert!((a - b).abs() < 1e-5);
        }
        assert!(s.v(0).data.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn labels_drive_intensities_without_noise() {
        let labels = blobs(12, 4);
        let cfg = GeneratorConfig { crop: [12; 3], ..GeneratorConfig::neutral() };
        let h = GmmHyper::fixed(
            vec![0, 1, 2, 3],
            vec![vec![0.1], vec![0.4], vec![0.7], vec![0.95]],
            vec![vec![0.0]; 4],
        )
        .unwrap();
        let gen = Generator::new(cfg, TrainingPool::from_labels(vec![labels.clone()]), h.clone()).unwrap();
        let (_, _, g) = gen.synthesize_hr(&labels, 0, 0).unwrap();
        for (v, l) in g[0].data.iter().zip(labels.data.iter()) {
            assert_eq!(*v as f64, (h.m_mu[h.class_index(*l).unwrap()][0] as f32) as f64);
        }
    }

    #[test]
    fn stream_order_is_worker_independent() {
        let pool = TrainingPool::from_labels(vec![blobs(16, 1), blobs(16, 2), blobs(16, 3)]);
        let cfg = GeneratorConfig { crop: [12; 3], ..small_cfg() };
        let gen = Arc::new(Generator::new(cfg, pool, hyper(2)).unwrap());
        assert_eq!(stream(gen.clone(), 0, 0, 4).count(), 0);
        let one: Vec<TrainingSample> = stream(gen.clone(), 5, 6, 1).map(|s| s.unwrap()).collect();
        let four: Vec<TrainingSample> = stream(gen.clone(), 5, 6, 4).map(|s| s.unwrap()).collect();
        assert_eq!(one.len(), 6);
        for (a, b) in one.iter().zip(four.iter()) {
            assert_eq!(a.metadata, b.metadata);
            assert_eq!(a.inputs, b.inputs);
        }
        let idx: Vec<u64> = four.iter().map(|s| s.metadata.sample_index).collect();
        assert_eq!(idx, (5..11).collect::<Vec<_>>());
        // dropping a partially consumed stream must not hang
        let mut s = stream(gen, 100, 50, 3);
        s.next().unwrap().unwrap();
        drop(s);
    }

    #[test]
    fn synthesis_mode_targets() {
        let labels = blobs(16, 7);
        let image = Volume::from_fn(labels.grid, |x, y, z| 50.0 + (x + y + z) as f32);
        let pool = TrainingPool { pairs: vec![(Some(image), labels)] };
        let cfg = GeneratorConfig { mode: Mode::SrSynth, wm_labels: vec![1, 2], crop: [16; 3], ..small_cfg() };
        let gen = Generator::new(cfg.clone(), pool.clone(), hyper(2)).unwrap();
        let s = gen.generate_sample(0).unwrap();
        assert_eq!(s.target.residual, s.target.reference);
        let cfg = GeneratorConfig { similar_channel: Some(1), ..cfg };
        let s = Generator::new(cfg, pool, hyper(2)).unwrap().generate_sample(0).unwrap();
        for i in 0..s.target.residual.data.len() {
            assert!((s.target.residual.data[i] + s.u(1).data[i] - s.target.reference.data[i]).abs() < 1e-6);
        }
        let no_img = TrainingPool::from_labels(vec![blobs(8, 1)]);
        let cfg = GeneratorConfig { mode: Mode::SrSynth, wm_labels: vec![1], ..small_cfg() };
        assert!(Generator::new(cfg, no_img, hyper(2)).is_err());
    }
}
