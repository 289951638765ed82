use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Image dimensions excluding the batch axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ImageDims {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        ImageDims {
            channels,
            height,
            width,
        }
    }

    pub fn square(channels: usize, size: usize) -> Self {
        Self::new(channels, size, size)
    }

    pub fn numel(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Batch of images laid out `N x C x H x W`, row-major.
///
/// Pixel range is not enforced here; see [`crate::corruption::range_check`].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    len: usize,
    dims: ImageDims,
    data: Vec<f64>,
}

impl ImageBatch {
    pub fn new(len: usize, dims: ImageDims, data: Vec<f64>) -> Result<Self> {
        if len * dims.numel() != data.len() {
            return Err(Error::InvalidShape {
                shape: vec![len, dims.channels, dims.height, dims.width],
                len: data.len(),
            });
        }
        Ok(ImageBatch { len, dims, data })
    }

    pub fn empty(dims: ImageDims) -> Self {
        ImageBatch {
            len: 0,
            dims,
            data: Vec::new(),
        }
    }

    pub fn filled(len: usize, dims: ImageDims, value: f64) -> Self {
        ImageBatch {
            len,
            dims,
            data: vec![value; len * dims.numel()],
        }
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "ImageBatch::from_tensor",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        Self::new(s[0], ImageDims::new(s[1], s[2], s[3]), t.data().to_vec())
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.shape().to_vec(), self.data.clone()).expect("consistent shape")
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dims(&self) -> ImageDims {
        self.dims
    }

    pub fn shape(&self) -> [usize; 4] {
        [
            self.len,
            self.dims.channels,
            self.dims.height,
            self.dims.width,
        ]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let n = self.dims.numel();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.dims.numel();
        &mut self.data[i * n..(i + 1) * n]
    }

    /// New batch holding the images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> ImageBatch {
        let mut data = Vec::with_capacity(indices.len() * self.dims.numel());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        ImageBatch {
            len: indices.len(),
            dims: self.dims,
            data,
        }
    }

    pub fn push(&mut self, image: &[f64]) -> Result<()> {
        if image.len() != self.dims.numel() {
            return Err(Error::ShapeMismatch {
                op: "ImageBatch::push",
                lhs: vec![self.dims.numel()],
                rhs: vec![image.len()],
            });
        }
        self.data.extend_from_slice(image);
        self.len += 1;
        Ok(())
    }

    /// Records the batch on `tape` as a constant leaf.
    pub fn to_var(&self, tape: &mut Tape) -> Var {
        tape.constant(&self.shape(), self.data.clone())
            .expect("consistent shape")
    }
}
