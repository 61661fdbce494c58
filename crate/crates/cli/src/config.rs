//! Run configuration shared by `generate` and `train`, plus argument parsers.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use synthvol_core::generator::{Generator, GeneratorConfig, TrainingPool};
use synthvol_core::hyper::VarianceRatio;
use synthvol_core::intensity::GmmHyper;
use synthvol_core::net::{Adam, UNetConfig};
use synthvol_core::{nifti, phantom};

use crate::commands::{Failure, Stage};

/// Procedural label maps in place of files, for demos and tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSource {
    pub count: usize,
    pub dims: [usize; 3],
    /// Class counts cycle through `min_classes..=max_classes`.
    pub min_classes: u32,
    pub max_classes: u32,
    /// Within-class σ of the built-in priors, used when no `hyper` is given.
    #[serde(default = "default_phantom_sigma")]
    pub sigma: f64,
}

fn default_phantom_sigma() -> f64 {
    0.02
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    pub levels: usize,
    pub base_features: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        let d = UNetConfig::default();
        NetworkConfig { levels: d.levels, base_features: d.base_features }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub generator: GeneratorConfig,
    #[serde(default)]
    pub network: NetworkConfig,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "one")]
    pub batch_size: usize,
    /// Generator workers; `--workers` overrides.
    #[serde(default = "one")]
    pub workers: usize,
    /// Prior JSON as written by `estimate-hyper`.
    #[serde(default)]
    pub hyper: Option<PathBuf>,
    #[serde(default)]
    pub label_maps: Vec<PathBuf>,
    /// Target images aligned with `label_maps`; needed for `sr_synth`.
    #[serde(default)]
    pub images: Vec<PathBuf>,
    #[serde(default)]
    pub phantom: Option<PhantomSource>,
}

fn default_lr() -> f64 {
    Adam::<f32>::DEFAULT_LR
}

fn one() -> usize {
    1
}

impl RunConfig {
    /// Parses the file, resolves relative paths against its directory and
    /// checks that every referenced file exists.
    pub fn load(path: &Path) -> Result<RunConfig, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::input(Stage::Config, format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Failure::input(Stage::Config, format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        cfg.hyper.iter_mut().for_each(resolve);
        cfg.label_maps.iter_mut().for_each(resolve);
        cfg.images.iter_mut().for_each(resolve);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let bad = |m: String| Failure::input(Stage::Config, m);
        for p in self.hyper.iter().chain(&self.label_maps).chain(&self.images) {
            if !p.is_file() {
                return Err(bad(format!("{} does not exist", p.display())));
            }
        }
        match (&self.phantom, self.label_maps.is_empty()) {
            (Some(_), false) => return Err(bad("give either `phantom` or `label_maps`, not both".into())),
            (None, true) => return Err(bad("no training label maps (`label_maps` or `phantom`)".into())),
            _ => {}
        }
        if !self.images.is_empty() && self.images.len() != self.label_maps.len() {
            return Err(bad(format!("{} images for {} label maps", self.images.len(), self.label_maps.len())));
        }
        if self.hyper.is_none() && self.phantom.is_none() {
            return Err(bad("`hyper` is required unless `phantom` is used".into()));
        }
        if let Some(p) = &self.phantom {
            if p.count == 0 || p.min_classes < 2 || p.max_classes < p.min_classes {
                return Err(bad("phantom needs count ≥ 1 and 2 ≤ min_classes ≤ max_classes".into()));
            }
        }
        if self.batch_size == 0 || self.workers == 0 {
            return Err(bad("batch_size and workers must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(bad("learning_rate must be finite and non-negative".into()));
        }
        self.generator.validate().map_err(|e| Failure::input(Stage::Config, e.to_string()))?;
        self.unet_config().validate().map_err(|e| Failure::input(Stage::Config, e.to_string()))?;
        Ok(())
    }

    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            levels: self.network.levels,
            base_features: self.network.base_features,
            in_channels: 2 * self.generator.num_channels(),
            ..UNetConfig::default()
        }
    }

    /// Reads the training pool and priors and builds the generator.
    pub fn build_generator(&self, seed: Option<u64>) -> Result<Generator, Failure> {
        let mut gcfg = self.generator.clone();
        if let Some(s) = seed {
            gcfg.seed = s;
        }
        let (pool, default_hyper) = match &self.phantom {
            Some(p) => {
                let span = p.max_classes - p.min_classes + 1;
                let labels = (0..p.count)
                    .map(|i| phantom::label_map(p.dims, p.min_classes + i as u32 % span, i as u64))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|e| Failure::input(Stage::Config, e.to_string()))?;
                let h = phantom::hyper(p.max_classes, gcfg.num_channels(), p.sigma)
                    .map_err(|e| Failure::input(Stage::Config, e.to_string()))?;
                (TrainingPool::from_labels(labels), Some(h))
            }
            None => {
                let mut pairs = Vec::with_capacity(self.label_maps.len());
                for (i, lp) in self.label_maps.iter().enumerate() {
                    let labels = nifti::read_labels(lp).map_err(|e| Failure::input(Stage::ReadLabels, format!("{}: {e}", lp.display())))?;
                    let image = match self.images.get(i) {
                        Some(ip) => Some(nifti::read_volume(ip).map_err(|e| Failure::input(Stage::ReadImage, format!("{}: {e}", ip.display())))?),
                        None => None,
                    };
                    pairs.push((image, labels));
                }
                (TrainingPool { pairs }, None)
            }
        };
        let hyper = match &self.hyper {
            Some(p) => GmmHyper::load(p).map_err(|e| Failure::input(Stage::Hyper, format!("{}: {e}", p.display())))?,
            None => default_hyper.expect("validated: phantom supplies priors"),
        };
        Generator::new(gcfg, pool, hyper).map_err(|e| Failure::input(Stage::Generator, e.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum RatioArg {
    Sum,
    Product,
}

impl From<RatioArg> for VarianceRatio {
    fn from(r: RatioArg) -> Self {
        match r {
            RatioArg::Sum => VarianceRatio::Sum,
            RatioArg::Product => VarianceRatio::Product,
        }
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let mut out = Vec::with_capacity(3);
    for p in parts {
        out.push(p.parse::<T>().map_err(|_| format!("cannot parse {p:?}"))?);
    }
    out.try_into().map_err(|_| unreachable!())
}

/// `x,y,z` of positive finite numbers.
pub fn parse_triple(s: &str) -> Result<[f64; 3], String> {
    let v: [f64; 3] = parse_list(s)?;
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return Err(format!("values must be positive, got {s:?}"));
    }
    Ok(v)
}

pub fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    let v: [usize; 3] = parse_list(s)?;
    if v.contains(&0) {
        return Err(format!("dims must be positive, got {s:?}"));
    }
    Ok(v)
}
