use crate::error::{Error, Result};
use crate::net::unet::UNet;
use crate::net::{cast, Scalar};

/// Adam with bias correction; moments mirror the network's parameter blobs.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub const DEFAULT_LR: f64 = 1e-4;

    pub fn new(net: &UNet<T>, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = net.blobs().iter().map(|b| vec![T::zero(); b.len()]).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, m: zeros.clone(), v: zeros }
    }

    pub fn update(&mut self, net: &mut UNet<T>, grads: &UNet<T>) -> Result<()> {
        let g = grads.blobs();
        if g.len() != self.m.len() || g.iter().zip(&self.m).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::Shape("optimizer state does not match the network".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (cast::<T>(self.beta1), cast::<T>(self.beta2));
        let (c1, c2) = (cast::<T>(1.0 - self.beta1.powi(t)), cast::<T>(1.0 - self.beta2.powi(t)));
        let (lr, eps, one) = (cast::<T>(self.lr), cast::<T>(self.eps), T::one());
        for (((p, g), m), v) in net.blobs_mut().into_iter().zip(g).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] = p[i] - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
