use crate::error::{Error, Result};

/// Dense n-dimensional array of `f32` in row-major order.
///
/// Public constructors validate that the element count matches the shape and
/// that every value is finite; the numeric kernels in this crate preserve
/// finiteness (the training loop additionally traps non-finite losses).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f32) -> Tensor {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Argument(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        if n != data.len() {
            return Err(Error::Argument(format!(
                "tensor shape {shape:?} implies {n} elements, got {}",
                data.len()
            )));
        }
        let t = Tensor {
            shape: shape.to_vec(),
            data,
        };
        t.check_finite("from_vec")?;
        Ok(t)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Reinterprets the buffer under a new shape with the same element count.
    pub fn reshaped(mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Argument(format!(
                "cannot reshape {:?} ({} elems) to {shape:?} ({n} elems)",
                self.shape,
                self.data.len()
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if let Some(pos) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Argument(format!(
                "non-finite value {} at flat index {pos} ({context})",
                self.data[pos]
            )));
        }
        Ok(())
    }

    /// Bit-level equality, stricter than `==` for distinguishing -0.0/0.0.
    pub fn bits_eq(&self, other: &Tensor) -> bool {
        self.shape == other.shape
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    /// Flat offset of `[n, c, h, w]` in an NCHW tensor.
    #[inline]
    pub fn at4(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        debug_assert_eq!(self.shape.len(), 4);
        let (cs, hs, ws) = (self.shape[1], self.shape[2], self.shape[3]);
        self.data[((n * cs + c) * hs + h) * ws + w]
    }

    /// View of sample `n` in an NCHW tensor as a `(C,H,W)` tensor.
    pub fn sample(&self, n: usize) -> Tensor {
        assert_eq!(self.shape.len(), 4, "sample() expects an NCHW tensor");
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks same-shaped `(C,H,W)` tensors into an NCHW batch.
    pub fn stack(samples: &[Tensor]) -> Result<Tensor> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Argument("cannot stack an empty sample list".into()))?;
        let mut data = Vec::with_capacity(samples.len() * first.len());
        for s in samples {
            if s.shape != first.shape {
                return Err(Error::Argument(format!(
                    "stack shape mismatch: {:?} vs {:?}",
                    s.shape, first.shape
                )));
            }
            data.extend_from_slice(&s.data);
        }
        let mut shape = vec![samples.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}
