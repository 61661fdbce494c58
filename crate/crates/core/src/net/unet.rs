use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::net::layers::{self, Conv};
use crate::net::tensor::Tensor5;
use crate::net::{cast, Scalar};
use crate::rng::{substream, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_features: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig { levels: 5, base_features: 24, in_channels: 2, out_channels: 1, kernel: 3 }
    }
}

impl UNetConfig {
    /// Feature width at level `l`; doubles after every pooling.
    pub fn features(&self, level: usize) -> usize {
        self.base_features << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_features == 0 || self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid(format!("degenerate network config {self:?}")));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::invalid("kernel size must be odd"));
        }
        Ok(())
    }

    /// Spatial dims must halve cleanly `levels − 1` times.
    pub fn multiple(&self) -> usize {
        1 << (self.levels - 1)
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let m = self.multiple();
        if dims.iter().any(|d| *d == 0 || d % m != 0) {
            return Err(Error::Shape(format!("spatial dims {dims:?} not divisible by {m} ({} levels)", self.levels)));
        }
        Ok(())
    }
}

/// Mean absolute error.
pub fn l1_loss<T: Scalar>(pred: &[T], target: &[T]) -> Result<T> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!("loss over {} vs {} elements", pred.len(), target.len())));
    }
    let s: T = pred.iter().zip(target).map(|(p, t)| (*p - *t).abs()).sum();
    Ok(s / cast(pred.len() as f64))
}

/// Network parameters; convolutions ordered encoder (two per level, shallow
/// first), decoder (two per level, deepest first), final 1×1×1 projection.
#[derive(Debug, Clone, PartialEq)]
pub struct UNet<T> {
    pub cfg: UNetConfig,
    pub convs: Vec<Conv<T>>,
}

struct Cache<T> {
    /// Input of every convolution.
    inputs: Vec<Vec<T>>,
    /// Post-ELU output of every non-final convolution.
    outputs: Vec<Vec<T>>,
    pool_args: Vec<Vec<usize>>,
    dims: Vec<[usize; 3]>,
}

impl<T> Cache<T> {
    fn new(convs: usize, levels: usize) -> Self {
        Cache { inputs: (0..convs).map(|_| Vec::new()).collect(), outputs: (0..convs).map(|_| Vec::new()).collect(), pool_args: vec![Vec::new(); levels], dims: Vec::new() }
    }
}

impl<T: Scalar> UNet<T> {
    fn shapes(cfg: &UNetConfig) -> Vec<(usize, usize, usize)> {
        let l = cfg.levels;
        let k = cfg.kernel;
        let mut s = Vec::new();
        for lev in 0..l {
            let cin = if lev == 0 { cfg.in_channels } else { cfg.features(lev - 1) };
            s.push((cin, cfg.features(lev), k));
            s.push((cfg.features(lev), cfg.features(lev), k));
        }
        for lev in (0..l - 1).rev() {
            s.push((cfg.features(lev) + cfg.features(lev + 1), cfg.features(lev), k));
            s.push((cfg.features(lev), cfg.features(lev), k));
        }
        s.push((cfg.base_features, cfg.out_channels, 1));
        s
    }

    fn enc(level: usize) -> usize {
        2 * level
    }

    fn dec(&self, level: usize) -> usize {
        let l = self.cfg.levels;
        2 * l + 2 * (l - 2 - level)
    }

    fn last(&self) -> usize {
        self.convs.len() - 1
    }

    pub fn zeros(cfg: UNetConfig) -> Result<Self> {
        cfg.validate()?;
        let convs = Self::shapes(&cfg).into_iter().map(|(i, o, k)| Conv::zeros(i, o, k)).collect();
        Ok(UNet { cfg, convs })
    }

    /// Fan-in uniform kernels, zero biases and a zero final layer, so the
    /// untrained network outputs 0.
    pub fn init(cfg: UNetConfig, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(cfg)?;
        let last = net.last();
        let mut rng = substream(seed, 0, Stage::Init, 0);
        for c in &mut net.convs[..last] {
            *c = Conv::uniform(c.cin, c.cout, c.k, &mut rng);
        }
        Ok(net)
    }

    /// Random values in every layer including the final one.
    pub fn randomize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        for c in &mut self.convs {
            let mut r = Conv::uniform(c.cin, c.cout, c.k, rng);
            r.b.iter_mut().for_each(|b| *b = cast(rng.random_range(-0.1..0.1)));
            *c = r;
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.cfg).expect("config already validated")
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(|c| c.w.len() + c.b.len()).sum()
    }

    pub fn blobs(&self) -> Vec<&[T]> {
        self.convs.iter().flat_map(|c| [c.w.as_slice(), c.b.as_slice()]).collect()
    }

    pub fn blobs_mut(&mut self) -> Vec<&mut [T]> {
        self.convs.iter_mut().flat_map(|c| [c.w.as_mut_slice(), c.b.as_mut_slice()]).collect()
    }

    pub fn cast<U: Scalar>(&self) -> UNet<U> {
        let f = |v: &[T]| v.iter().map(|x| cast::<U>(x.to_f64().unwrap_or(0.0))).collect();
        UNet {
            cfg: self.cfg,
            convs: self.convs.iter().map(|c| Conv { cin: c.cin, cout: c.cout, k: c.k, w: f(&c.w), b: f(&c.b) }).collect(),
        }
    }

    fn check_input(&self, x: &Tensor5<T>) -> Result<()> {
        if x.shape[1] != self.cfg.in_channels {
            return Err(Error::Shape(format!("network expects {} channels, got {}", self.cfg.in_channels, x.shape[1])));
        }
        self.cfg.check_dims(x.spatial())
    }

    pub fn forward(&self, x: &Tensor5<T>) -> Result<Tensor5<T>> {
        self.check_input(x)?;
        let mut out = Vec::with_capacity(x.shape[0] * self.cfg.out_channels * x.voxels());
        for b in 0..x.shape[0] {
            out.extend(self.forward_item(x.item(b), x.spatial(), None));
        }
        let [n, _, d0, d1, d2] = x.shape;
        Ok(Tensor5 { shape: [n, self.cfg.out_channels, d0, d1, d2], data: out })
    }

    fn conv_elu(&self, i: usize, x: Vec<T>, dims: [usize; 3], cache: &mut Option<&mut Cache<T>>) -> Vec<T> {
        let mut y = self.convs[i].forward(&x, dims);
        layers::elu(&mut y);
        if let Some(c) = cache.as_deref_mut() {
            c.inputs[i] = x;
            c.outputs[i] = y.clone();
        }
        y
    }

    fn forward_item(&self, x: &[T], dims: [usize; 3], mut cache: Option<&mut Cache<T>>) -> Vec<T> {
        let l = self.cfg.levels;
        let mut skips: Vec<Vec<T>> = Vec::with_capacity(l);
        let mut level_dims = vec![dims];
        let mut h = x.to_vec();
        for lev in 0..l {
            let d = level_dims[lev];
            if lev > 0 {
                let prev = level_dims[lev - 1];
                let (p, arg, pd) = layers::max_pool(skips.last().unwrap(), self.cfg.features(lev - 1), prev);
                if let Some(c) = cache.as_deref_mut() {
                    c.pool_args[lev - 1] = arg;
                }
                debug_assert_eq!(pd, d);
                h = p;
            }
            let a = self.conv_elu(Self::enc(lev), h, d, &mut cache);
            h = self.conv_elu(Self::enc(lev) + 1, a, d, &mut cache);
            skips.push(h.clone());
            if lev + 1 < l {
                level_dims.push([d[0] / 2, d[1] / 2, d[2] / 2]);
            }
        }
        for lev in (0..l - 1).rev() {
            let (up, d) = layers::upsample(&h, self.cfg.features(lev + 1), level_dims[lev + 1]);
            let mut cat = std::mem::take(&mut skips[lev]);
            cat.extend(up);
            let a = self.conv_elu(self.dec(lev), cat, d, &mut cache);
            h = self.conv_elu(self.dec(lev) + 1, a, d, &mut cache);
        }
        let last = self.last();
        let y = self.convs[last].forward(&h, dims);
        if let Some(c) = cache {
            c.inputs[last] = h;
            c.dims = level_dims;
        }
        y
    }

    fn backward_item(&self, cache: &mut Cache<T>, g_out: &[T], grads: &mut UNet<T>) {
        let l = self.cfg.levels;
        let dims = cache.dims.clone();
        let last = self.last();
        let mut g = self.convs[last].backward(&cache.inputs[last], dims[0], g_out, &mut grads.convs[last]);

        let mut conv_elu_back = |i: usize, g: &mut Vec<T>, d: [usize; 3], cache: &mut Cache<T>| {
            layers::elu_backward(&cache.outputs[i], g);
            let gi = self.convs[i].backward(&cache.inputs[i], d, g, &mut grads.convs[i]);
            cache.inputs[i] = Vec::new();
            cache.outputs[i] = Vec::new();
            *g = gi;
        };

        // decoder, shallow to deep; `g` is the gradient of the level's output
        let mut g_skip: Vec<Vec<T>> = vec![Vec::new(); l];
        for lev in 0..l - 1 {
            let d = dims[lev];
            conv_elu_back(self.dec(lev) + 1, &mut g, d, cache);
            conv_elu_back(self.dec(lev), &mut g, d, cache);
            let n = d.iter().product::<usize>();
            let split = self.cfg.features(lev) * n;
            g_skip[lev] = g[..split].to_vec();
            g = layers::upsample_backward(&g[split..], self.cfg.features(lev + 1), dims[lev + 1]);
        }
        // encoder, deep to shallow
        for lev in (0..l).rev() {
            if lev + 1 < l {
                let n = dims[lev].iter().product::<usize>();
                let from_pool = layers::max_pool_backward(&g, &cache.pool_args[lev], self.cfg.features(lev), n);
                g = from_pool.iter().zip(&g_skip[lev]).map(|(a, b)| *a + *b).collect();
            }
            conv_elu_back(Self::enc(lev) + 1, &mut g, dims[lev], cache);
            conv_elu_back(Self::enc(lev), &mut g, dims[lev], cache);
        }
    }

    /// L1 loss over the whole batch and its exact gradient (subgradient 0 at
    /// zero residual).
    pub fn loss_and_grad(&self, x: &Tensor5<T>, target: &Tensor5<T>) -> Result<(T, UNet<T>)> {
        self.check_input(x)?;
        let out_shape = [x.shape[0], self.cfg.out_channels, x.shape[2], x.shape[3], x.shape[4]];
        if target.shape != out_shape {
            return Err(Error::Shape(format!("target shape {:?} != output shape {out_shape:?}", target.shape)));
        }
        let total = target.data.len();
        let scale: T = T::one() / cast(total as f64);
        let mut grads = self.zeros_like();
        let mut sum = T::zero();
        for b in 0..x.shape[0] {
            let mut cache = Cache::new(self.convs.len(), self.cfg.levels);
            let y = self.forward_item(x.item(b), x.spatial(), Some(&mut cache));
            let t = target.item(b);
            let g: Vec<T> = y
                .iter()
                .zip(t)
                .map(|(p, q)| {
                    let r = *p - *q;
                    sum = sum + r.abs();
                    if r > T::zero() {
                        scale
                    } else if r < T::zero() {
                        -scale
                    } else {
                        T::zero()
                    }
                })
                .collect();
            self.backward_item(&mut cache, &g, &mut grads);
        }
        Ok((sum * scale, grads))
    }
}
