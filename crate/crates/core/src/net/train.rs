use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::generator::{Mode, TrainingSample};
use crate::net::checkpoint::Checkpoint;
use crate::net::tensor::Tensor5;
use crate::net::unet::UNet;
use crate::volume::{Grid, Volume};

/// Training progress lives in the checkpoint itself.
pub type TrainState = Checkpoint;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    /// Save every this many iterations (0 disables periodic saves).
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { iterations: 0, batch_size: 1, checkpoint_every: 0, checkpoint_dir: None }
    }
}

impl Checkpoint {
    pub fn fresh(net: UNet<f32>, lr: f64, mode: Mode, similar_channel: Option<usize>) -> Checkpoint {
        let adam = crate::net::Adam::new(&net, lr);
        Checkpoint { net, adam, iteration: 0, mode, similar_channel }
    }

    pub fn save_to_dir(&self, dir: &std::path::Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join(format!("iter_{:08}.ckpt", self.iteration));
        self.save(&p)?;
        self.save(&dir.join("latest.ckpt"))?;
        Ok(p)
    }
}

pub fn sample_tensors(samples: &[TrainingSample]) -> Result<(Tensor5<f32>, Tensor5<f32>)> {
    let mut xs = Vec::with_capacity(samples.len());
    let mut ys = Vec::with_capacity(samples.len());
    for s in samples {
        xs.push(Tensor5::from_volumes(&s.inputs)?);
        ys.push(Tensor5::from_volumes(std::slice::from_ref(&s.target.residual))?);
    }
    Ok((Tensor5::stack(&xs)?, Tensor5::stack(&ys)?))
}

/// Runs `cfg.iterations` Adam steps on batches drawn from `samples`, calling
/// `on_step(iteration, loss)` after each one. Returns the loss trace.
pub fn train<I, F>(state: &mut TrainState, samples: &mut I, cfg: &TrainConfig, mut on_step: F) -> Result<Vec<f64>>
where
    I: Iterator<Item = Result<TrainingSample>>,
    F: FnMut(u64, f64) -> Result<()>,
{
    if cfg.batch_size == 0 {
        return Err(Error::invalid("batch size must be at least 1"));
    }
    let mut trace = Vec::with_capacity(cfg.iterations as usize);
    for _ in 0..cfg.iterations {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            batch.push(samples.next().ok_or(Error::Empty("sample stream"))??);
        }
        if batch[0].metadata.mode != state.mode {
            return Err(Error::invalid("generator mode differs from the network's training mode"));
        }
        let (x, y) = sample_tensors(&batch)?;
        let (loss, grads) = state.net.loss_and_grad(&x, &y)?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { stage: format!("loss at iteration {}", state.iteration + 1) });
        }
        state.adam.update(&mut state.net, &grads)?;
        state.iteration += 1;
        trace.push(loss as f64);
        on_step(state.iteration, loss as f64)?;
        if let Some(dir) = &cfg.checkpoint_dir {
            if cfg.checkpoint_every > 0 && state.iteration % cfg.checkpoint_every == 0 {
                state.save_to_dir(dir)?;
            }
        }
    }
    Ok(trace)
}

/// Network output added back onto the input it was trained as a residual of.
/// Inputs are `[U_1, V_1, U_2, V_2, ...]`; volumes whose dims do not divide
/// by `2^(levels−1)` are zero-padded at the far edge and cropped back.
pub fn predict(net: &UNet<f32>, inputs: &[Volume], mode: Mode, similar_channel: Option<usize>) -> Result<Volume> {
    if inputs.len() != net.cfg.in_channels {
        return Err(Error::Shape(format!("network expects {} input volumes, got {}", net.cfg.in_channels, inputs.len())));
    }
    let grid = inputs[0].grid;
    if inputs.iter().any(|v| v.grid.dims != grid.dims) {
        return Err(Error::GridMismatch("input channels differ in dims".into()));
    }
    let m = net.cfg.multiple();
    let d = grid.dims;
    let pd = d.map(|n| n.div_ceil(m) * m);
    let padded: Vec<Volume> = if pd == d {
        inputs.to_vec()
    } else {
        let pg = Grid::with_affine(pd, grid.voxel_size, grid.affine)?;
        inputs
            .iter()
            .map(|v| Volume::from_fn(pg, |x, y, z| if x < d[0] && y < d[1] && z < d[2] { v.at(x, y, z) } else { 0.0 }))
            .collect()
    };
    let out = net.forward(&Tensor5::from_volumes(&padded)?)?;
    let n = out.channel(0, 0);
    let residual = Volume::from_fn(grid, |x, y, z| n[x + pd[0] * (y + pd[1] * z)]);
    let base = match (mode, similar_channel) {
        (Mode::Sr, _) => Some(&inputs[0]),
        (Mode::SrSynth, Some(c)) => Some(inputs.get(2 * c).ok_or_else(|| Error::invalid(format!("no input channel {c}")))?),
        (Mode::SrSynth, None) => None,
    };
    Ok(match base {
        Some(b) => Volume::from_fn(grid, |x, y, z| b.at(x, y, z) + residual.at(x, y, z)),
        None => residual,
    })
}
