use crate::error::{Error, Result};
use crate::patches::Block;
use crate::scalar::Real;

/// Batch of feature maps, `N × C × H × W` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T: Real = f64> {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            n,
            c,
            h,
            w,
            data: vec![T::zero(); n * c * h * w],
        }
    }

    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != n * c * h * w {
            return Err(Error::Dimensions(format!(
                "tensor {n}x{c}x{h}x{w} needs {} values, got {}",
                n * c * h * w,
                data.len()
            )));
        }
        Ok(Tensor { n, c, h, w, data })
    }

    pub fn shape(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Values of sample `i` (`C × H × W`).
    pub fn sample(&self, i: usize) -> &[T] {
        let s = self.c * self.h * self.w;
        &self.data[i * s..(i + 1) * s]
    }

    pub fn sample_mut(&mut self, i: usize) -> &mut [T] {
        let s = self.c * self.h * self.w;
        &mut self.data[i * s..(i + 1) * s]
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> T {
        self.data[((n * self.c + c) * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, y: usize, x: usize) -> &mut T {
        let i = ((n * self.c + c) * self.h + y) * self.w + x;
        &mut self.data[i]
    }

    /// Stacks equally shaped blocks into a batch.
    pub fn from_blocks(blocks: &[&Block<T>]) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
        let (c, h, w) = (first.channels, first.height, first.width);
        let mut data = Vec::with_capacity(blocks.len() * c * h * w);
        for b in blocks {
            if (b.channels, b.height, b.width) != (c, h, w) {
                return Err(Error::Dimensions("blocks in a batch must share a shape".into()));
            }
            data.extend_from_slice(&b.data);
        }
        Ok(Tensor {
            n: blocks.len(),
            c,
            h,
            w,
            data,
        })
    }

    pub fn to_block(&self, i: usize) -> Block<T> {
        Block {
            channels: self.c,
            height: self.h,
            width: self.w,
            data: self.sample(i).to_vec(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
