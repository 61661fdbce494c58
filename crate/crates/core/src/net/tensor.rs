use crate::error::{Error, Result};
use crate::net::{cast, Scalar};
use crate::volume::{Grid, Volume};

/// `(batch, channels, x, y, z)`, x fastest within a channel.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5<T> {
    pub shape: [usize; 5],
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor5<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor5 { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn new(shape: [usize; 5], data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|s| *s == 0) {
            return Err(Error::Shape(format!("tensor dims must be positive, got {shape:?}")));
        }
        if data.len() != shape.iter().product::<usize>() {
            return Err(Error::Shape(format!("{} values for shape {shape:?}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { stage: "tensor construction".into() });
        }
        Ok(Tensor5 { shape, data })
    }

    /// One-item batch with one channel per volume.
    pub fn from_volumes(vols: &[Volume]) -> Result<Self> {
        let first = vols.first().ok_or(Error::Empty("volume stack"))?;
        let d = first.grid.dims;
        if vols.iter().any(|v| v.grid.dims != d) {
            return Err(Error::GridMismatch("channel volumes differ in dims".into()));
        }
        let data = vols.iter().flat_map(|v| v.data.iter().map(|x| cast::<T>(*x as f64))).collect();
        Tensor5::new([1, vols.len(), d[0], d[1], d[2]], data)
    }

    /// Stacks one-item tensors along the batch axis.
    pub fn stack(items: &[Tensor5<T>]) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("batch"))?;
        let mut shape = first.shape;
        if items.iter().any(|t| t.shape != shape || t.shape[0] != 1) {
            return Err(Error::Shape("batch items must be single tensors of equal shape".into()));
        }
        shape[0] = items.len();
        Ok(Tensor5 { shape, data: items.iter().flat_map(|t| t.data.iter().copied()).collect() })
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn voxels(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    pub fn item(&self, b: usize) -> &[T] {
        let n = self.shape[1] * self.voxels();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn channel(&self, b: usize, c: usize) -> &[T] {
        let n = self.voxels();
        &self.item(b)[c * n..(c + 1) * n]
    }

    pub fn to_volume(&self, b: usize, c: usize, grid: Grid) -> Result<Volume> {
        if grid.dims != self.spatial() {
            return Err(Error::GridMismatch("tensor and grid differ in dims".into()));
        }
        Volume::new(grid, self.channel(b, c).iter().map(|v| v.to_f64().unwrap_or(f64::NAN) as f32).collect())
    }
}
