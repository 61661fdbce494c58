use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use log::info;
use synthvol_core::eval::{self, Metrics};
use synthvol_core::generator;
use synthvol_core::geometry::AffineMatrix;
use synthvol_core::hyper::{self, EstimateOptions, ScanObservation};
use synthvol_core::intensity::GmmHyper;
use synthvol_core::net::checkpoint::Checkpoint;
use synthvol_core::net::{self, TrainConfig, UNet};
use synthvol_core::volume::Volume;
use synthvol_core::{acquire, bench as perf, export, nifti, Error};

use crate::config::RunConfig;
use crate::{BenchArgs, EstimateHyperArgs, EvalArgs, GenerateArgs, PredictArgs, TrainArgs};

/// Where in a command a failure happened; prefixes every error line.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Args,
    Config,
    ReadImage,
    ReadLabels,
    Hyper,
    Generator,
    Generate,
    Checkpoint,
    Train,
    Transform,
    Preprocess,
    Predict,
    Eval,
    Bench,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Args => "args",
            Stage::Config => "config",
            Stage::ReadImage => "read-image",
            Stage::ReadLabels => "read-labels",
            Stage::Hyper => "hyper",
            Stage::Generator => "generator",
            Stage::Generate => "generate",
            Stage::Checkpoint => "checkpoint",
            Stage::Train => "train",
            Stage::Transform => "transform",
            Stage::Preprocess => "preprocess",
            Stage::Predict => "predict",
            Stage::Eval => "eval",
            Stage::Bench => "bench",
            Stage::Write => "write",
        })
    }
}

/// A command failure: exit code 2 for bad input, 3 for runtime faults.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn input(stage: Stage, msg: String) -> Failure {
        Failure { code: 2, message: format!("{stage}: {msg}") }
    }

    pub fn runtime(stage: Stage, msg: String) -> Failure {
        Failure { code: 3, message: format!("{stage}: {msg}") }
    }

    /// Numerical breakdowns are runtime faults; everything else traces back
    /// to what the user supplied.
    pub fn core(stage: Stage, e: Error) -> Failure {
        match e {
            Error::NonFinite { .. } | Error::DegenerateNormalization(_) => Failure::runtime(stage, e.to_string()),
            Error::Io { .. } if matches!(stage, Stage::Write) => Failure::runtime(stage, e.to_string()),
            _ => Failure::input(stage, e.to_string()),
        }
    }
}

fn at(stage: Stage) -> impl Fn(Error) -> Failure {
    move |e| Failure::core(stage, e)
}

fn io_at(stage: Stage, path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| Failure::core(stage, Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(io_at(Stage::Write, dir))
}

fn write_text(path: Option<&Path>, text: &str) -> Result<(), Failure> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(io_at(Stage::Write, p)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn estimate_hyper(a: EstimateHyperArgs) -> Result<(), Failure> {
    if a.channel == 0 {
        return Err(Failure::input(Stage::Args, "channels are numbered from 1".into()));
    }
    if !(a.widen.is_finite() && a.widen > 0.0) {
        return Err(Failure::input(Stage::Args, format!("--widen must be positive, got {}", a.widen)));
    }
    let mut estimates = Vec::with_capacity(a.scans.len());
    for spec in &a.scans {
        let (img, lab) = spec
            .split_once(':')
            .ok_or_else(|| Failure::input(Stage::Args, format!("--scan expects image.nii:labels.nii, got {spec:?}")))?;
        let image = nifti::read_volume(Path::new(img)).map_err(at(Stage::ReadImage))?;
        let labels = nifti::read_labels(Path::new(lab)).map_err(at(Stage::ReadLabels))?;
        let opts = EstimateOptions {
            r_c: a.acq_res.unwrap_or(image.grid.voxel_size),
            r_targ: a.target_res,
            ratio: a.variance_ratio.into(),
            normalize: !a.raw_intensities,
        };
        let obs = ScanObservation { image, labels, channel: a.channel - 1 };
        estimates.push(hyper::estimate_scan(&obs, &opts).map_err(at(Stage::Hyper))?);
        info!("estimated {spec}");
    }
    let single = hyper::fit_hyper(&estimates, a.labels.as_deref(), a.widen).map_err(at(Stage::Hyper))?;
    let base = match &a.merge {
        Some(p) => Some(GmmHyper::load(p).map_err(at(Stage::Hyper))?),
        None => None,
    };
    let out = if base.is_none() && a.channel == 1 { single } else { hyper::merge_channel(base, &single, a.channel - 1).map_err(at(Stage::Hyper))? };
    let text = serde_json::to_string_pretty(&out).map_err(|e| Failure::runtime(Stage::Write, e.to_string()))? + "\n";
    write_text(a.out.as_deref(), &text)
}

pub fn generate(a: GenerateArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load(&a.config)?;
    let workers = a.workers.unwrap_or(cfg.workers).max(1);
    let gen = Arc::new(cfg.build_generator(a.seed)?);
    let seed = gen.cfg.seed;
    create_dir(&a.out)?;
    let mut entries = Vec::with_capacity(a.count as usize);
    for s in generator::stream(gen, a.start, a.count, workers) {
        let s = s.map_err(at(Stage::Generate))?;
        entries.push(export::write_sample(&a.out, &s).map_err(at(Stage::Write))?);
        info!("sample {} written", s.metadata.sample_index);
    }
    export::write_manifest(&a.out, seed, entries).map_err(at(Stage::Write))?;
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<(), Failure> {
    let cfg = RunConfig::load(&a.config)?;
    let workers = a.workers.unwrap_or(cfg.workers).max(1);
    let gen = Arc::new(cfg.build_generator(a.seed)?);
    let ucfg = cfg.unet_config();
    let mut state = match &a.resume {
        Some(p) => {
            let st = Checkpoint::load(p).map_err(at(Stage::Checkpoint))?;
            if st.net.cfg != ucfg {
                return Err(Failure::input(Stage::Checkpoint, format!("checkpoint network {:?} differs from config {:?}", st.net.cfg, ucfg)));
            }
            if st.mode != gen.cfg.mode {
                return Err(Failure::input(Stage::Checkpoint, "checkpoint was trained in a different mode".into()));
            }
            st
        }
        None => {
            let net = UNet::init(ucfg, gen.cfg.seed).map_err(at(Stage::Config))?;
            Checkpoint::fresh(net, cfg.learning_rate, gen.cfg.mode, gen.cfg.similar_channel)
        }
    };
    create_dir(&a.out)?;
    if a.resume.is_none() {
        state.save_to_dir(&a.out).map_err(at(Stage::Write))?;
    }
    if a.iters == 0 {
        return Ok(());
    }

    let csv_path = a.out.join("loss.csv");
    let fresh_csv = a.resume.is_none() || !csv_path.exists();
    let file = if fresh_csv {
        File::create(&csv_path)
    } else {
        OpenOptions::new().append(true).open(&csv_path)
    }
    .map_err(io_at(Stage::Write, &csv_path))?;
    let mut csv = BufWriter::new(file);
    if fresh_csv {
        writeln!(csv, "iteration,loss").map_err(io_at(Stage::Write, &csv_path))?;
    }

    let batch = cfg.batch_size as u64;
    let mut samples = generator::stream(gen, state.iteration * batch, a.iters * batch, workers);
    let tcfg = TrainConfig {
        iterations: a.iters,
        batch_size: cfg.batch_size,
        checkpoint_every: a.checkpoint_every,
        checkpoint_dir: Some(a.out.clone()),
    };
    let result = net::train(&mut state, &mut samples, &tcfg, |i, loss| {
        if i % 50 == 0 {
            info!("iteration {i}: loss {loss:.6}");
        }
        writeln!(csv, "{i},{loss:.9}").map_err(|e| Error::io(&csv_path, e))
    });
    csv.flush().map_err(io_at(Stage::Write, &csv_path))?;
    result.map_err(at(Stage::Train))?;
    state.save_to_dir(&a.out).map_err(at(Stage::Write))?;
    Ok(())
}

/// Whitespace-separated 4×4 row-major matrix; `#` starts a comment.
pub fn read_matrix(path: &Path) -> Result<AffineMatrix, Failure> {
    let text = std::fs::read_to_string(path).map_err(io_at(Stage::Transform, path))?;
    let mut values = Vec::with_capacity(16);
    for line in text.lines() {
        let line = line.split('#').next().unwrap_or("");
        for tok in line.split(|c: char| c.is_whitespace() || c == ',').filter(|t| !t.is_empty()) {
            let v: f64 = tok
                .parse()
                .map_err(|_| Failure::input(Stage::Transform, format!("{}: cannot parse {tok:?}", path.display())))?;
            values.push(v);
        }
    }
    let m = AffineMatrix::from_row_major(&values).map_err(|e| Failure::input(Stage::Transform, format!("{}: {e}", path.display())))?;
    m.validate().map_err(|e| Failure::input(Stage::Transform, format!("{}: {e}", path.display())))?;
    Ok(m)
}

/// `out.nii.gz` → `out`, `out.nii` → `out`.
fn stem_path(out: &Path) -> PathBuf {
    let s = out.to_string_lossy();
    let s = s.strip_suffix(".gz").unwrap_or(&s);
    PathBuf::from(s.strip_suffix(".nii").unwrap_or(s))
}

pub fn predict(a: PredictArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(&a.checkpoint).map_err(at(Stage::Checkpoint))?;
    let n = a.inputs.len();
    if 2 * n != ck.net.cfg.in_channels {
        return Err(Failure::input(
            Stage::Args,
            format!("checkpoint expects {} channels, got {n} inputs", ck.net.cfg.in_channels / 2),
        ));
    }
    let mut maps = vec![AffineMatrix::identity(); n];
    for spec in &a.transforms {
        let (c, p) = spec
            .split_once(':')
            .ok_or_else(|| Failure::input(Stage::Args, format!("--transform expects c:matrix.txt, got {spec:?}")))?;
        let c: usize = c.parse().map_err(|_| Failure::input(Stage::Args, format!("bad channel in {spec:?}")))?;
        if c < 2 || c > n {
            return Err(Failure::input(Stage::Args, format!("--transform channel must be in 2..={n}, got {c}")));
        }
        maps[c - 1] = read_matrix(Path::new(p))?;
    }
    let vols = a.inputs.iter().map(|p| nifti::read_volume(p).map_err(at(Stage::ReadImage))).collect::<Result<Vec<_>, _>>()?;
    let target = vols[0].grid.with_spacing(a.target_res).map_err(at(Stage::Args))?;

    let mut inputs = Vec::with_capacity(2 * n);
    for (c, (v, m)) in vols.iter().zip(&maps).enumerate() {
        let u = v
            .resample_to_grid(&target, Some(m))
            .minmax_normalize()
            .map_err(|e| Failure::input(Stage::Preprocess, format!("channel {}: {e}", c + 1)))?;
        inputs.push(u);
        inputs.push(acquire::reliability_map(&v.grid, &target, m));
    }
    let out = net::predict(&ck.net, &inputs, ck.mode, ck.similar_channel).map_err(at(Stage::Predict))?;
    if !out.all_finite() {
        return Err(Failure::runtime(Stage::Predict, "network output has non-finite values".into()));
    }
    nifti::write_volume(&out, &a.out).map_err(at(Stage::Write))?;
    if a.save_reliability {
        let stem = stem_path(&a.out);
        for c in 0..n {
            let p = PathBuf::from(format!("{}_V{}.nii", stem.display(), c + 1));
            nifti::write_volume(&inputs[2 * c + 1], &p).map_err(at(Stage::Write))?;
        }
    }
    Ok(())
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn metrics_json(m: &Metrics) -> serde_json::Value {
    let num = |v: f64| if v.is_finite() { serde_json::json!(v) } else { serde_json::json!("inf") };
    serde_json::json!({ "mae": num(m.mae), "rmse": num(m.rmse), "psnr": num(m.psnr) })
}

pub fn eval(a: EvalArgs) -> Result<(), Failure> {
    let pred = nifti::read_volume(&a.pred).map_err(at(Stage::ReadImage))?;
    let reference = nifti::read_volume(&a.reference).map_err(at(Stage::ReadImage))?;
    let m = eval::compare(&pred, &reference, a.range).map_err(at(Stage::Eval))?;
    let base = match &a.baseline {
        Some(p) => {
            let b: Volume = nifti::read_volume(p).map_err(at(Stage::ReadImage))?;
            let b = if b.grid.same_lattice(&reference.grid) { b } else { b.resample_to_grid(&reference.grid, None) };
            Some(eval::compare(&b, &reference, a.range).map_err(at(Stage::Eval))?)
        }
        None => None,
    };
    let text = if a.json {
        let mut j = serde_json::json!({ "prediction": metrics_json(&m) });
        if let Some(b) = &base {
            j["baseline"] = metrics_json(b);
        }
        serde_json::to_string_pretty(&j).map_err(|e| Failure::runtime(Stage::Write, e.to_string()))? + "\n"
    } else {
        let mut s = format!("{:<6}{:>14}", "metric", "prediction");
        if base.is_some() {
            s += &format!("{:>14}", "baseline");
        }
        s.push('\n');
        for (name, f) in [("mae", (|m: &Metrics| m.mae) as fn(&Metrics) -> f64), ("rmse", |m| m.rmse), ("psnr", |m| m.psnr)] {
            s += &format!("{name:<6}{:>14}", fmt_metric(f(&m)));
            if let Some(b) = &base {
                s += &format!("{:>14}", fmt_metric(f(b)));
            }
            s.push('\n');
        }
        s
    };
    write_text(None, &text)
}

pub fn bench(a: BenchArgs) -> Result<(), Failure> {
    if a.workers.contains(&0) {
        return Err(Failure::input(Stage::Args, "worker counts must be positive".into()));
    }
    let reports = perf::bench_all(a.dims, a.reps, &a.workers).map_err(at(Stage::Bench))?;
    write_text(a.out.as_deref(), &perf::to_csv(&reports))
}
