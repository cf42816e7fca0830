//! Dense 4-D tensors in (batch, channel, height, width) layout plus the
//! GST1 binary file format.

use std::fmt;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::scalar::Scalar;

/// Extents of a 4-D tensor. All extents are at least 1.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Shape {
        Shape { n, c, h, w }
    }

    /// The shape of a scalar: (1, 1, 1, 1).
    pub fn scalar() -> Shape {
        Shape::new(1, 1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn is_scalar(&self) -> bool {
        self.len() == 1
    }

    /// Row-major flat index, width fastest.
    #[inline(always)]
    pub fn idx(&self, n: usize, c: usize, y: usize, x: usize) -> usize {
        ((n * self.c + c) * self.h + y) * self.w + x
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.c == 0 || self.h == 0 || self.w == 0 {
            return Err(Error::Shape(format!("all extents must be >= 1, got {self}")));
        }
        Ok(())
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{},{})", self.n, self.c, self.h, self.w)
    }
}

/// A dense 4-D array with an optional gradient of the same shape.
#[derive(Clone, Debug)]
pub struct Tensor<S> {
    shape: Shape,
    data: Vec<S>,
    requires_grad: bool,
    grad: Option<Vec<S>>,
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Shape, data: Vec<S>) -> Result<Tensor<S>> {
        shape.validate()?;
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "data length {} does not match shape {} ({} elements)",
                data.len(),
                shape,
                shape.len()
            )));
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    pub fn zeros(shape: Shape) -> Tensor<S> {
        Tensor { shape, data: vec![S::zero(); shape.len()], requires_grad: false, grad: None }
    }

    pub fn filled(shape: Shape, v: S) -> Tensor<S> {
        Tensor { shape, data: vec![v; shape.len()], requires_grad: false, grad: None }
    }

    pub fn scalar(v: S) -> Tensor<S> {
        Tensor::filled(Shape::scalar(), v)
    }

    pub fn from_f64(shape: Shape, vals: &[f64]) -> Result<Tensor<S>> {
        Tensor::new(shape, vals.iter().map(|&v| S::of(v)).collect())
    }

    /// Uniform random values in [lo, hi), useful for test inputs.
    pub fn random(shape: Shape, stream: &mut Stream, lo: f64, hi: f64) -> Tensor<S> {
        let data = (0..shape.len()).map(|_| S::of(stream.uniform(lo, hi))).collect();
        Tensor { shape, data, requires_grad: false, grad: None }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    #[inline(always)]
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> S {
        self.data[self.shape.idx(n, c, y, x)]
    }

    #[inline(always)]
    pub fn set(&mut self, n: usize, c: usize, y: usize, x: usize, v: S) {
        let i = self.shape.idx(n, c, y, x);
        self.data[i] = v;
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn with_grad(mut self) -> Tensor<S> {
        self.requires_grad = true;
        self
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn grad(&self) -> Option<&[S]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<S>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::Shape(format!(
                "gradient length {} does not match tensor shape {}",
                grad.len(),
                self.shape
            )));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Stacks single-sample tensors (N = 1) into one batch along N.
    pub fn stack_batch(items: &[&Tensor<S>]) -> Result<Tensor<S>> {
        if items.is_empty() {
            return Err(Error::Shape("cannot stack an empty batch".into()));
        }
        let s0 = items[0].shape;
        let mut data = Vec::with_capacity(items.len() * s0.len());
        for t in items {
            if t.shape != s0 {
                return Err(Error::Shape(format!(
                    "batch members must share shape, got {} and {}",
                    s0, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor::new(Shape::new(items.len() * s0.n, s0.c, s0.h, s0.w), data)
    }

    /// Writes the tensor in the GST1 format: magic "GST1", u8 dtype code
    /// (0 = f32, 1 = f64), u8 ndim (always 4), four little-endian u32
    /// extents (N, C, H, W), then the row-major payload.
    pub fn write_gst1<W: Write>(&self, out: &mut W) -> Result<()> {
        let mut buf = Vec::with_capacity(14 + self.data.len() * S::BYTES);
        buf.extend_from_slice(b"GST1");
        buf.push(S::DTYPE);
        buf.push(4);
        for extent in [self.shape.n, self.shape.c, self.shape.h, self.shape.w] {
            let v = u32::try_from(extent)
                .map_err(|_| Error::Format(format!("extent {extent} exceeds u32")))?;
            buf.extend_from_slice(&v.to_le_bytes());
        }
        for &v in &self.data {
            v.write_le(&mut buf);
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads a tensor written by [`Tensor::write_gst1`]. The stored dtype
    /// must match `S`.
    pub fn read_gst1<R: Read>(input: &mut R) -> Result<Tensor<S>> {
        let mut header = [0u8; 22];
        input.read_exact(&mut header)?;
        if &header[..4] != b"GST1" {
            return Err(Error::Format("bad magic, expected GST1".into()));
        }
        if header[4] != S::DTYPE {
            return Err(Error::Format(format!(
                "dtype code {} does not match requested precision {}",
                header[4],
                S::NAME
            )));
        }
        if header[5] != 4 {
            return Err(Error::Format(format!("ndim must be 4, got {}", header[5])));
        }
        let mut extents = [0usize; 4];
        for (i, e) in extents.iter_mut().enumerate() {
            let off = 6 + 4 * i;
            *e = u32::from_le_bytes(header[off..off + 4].try_into().unwrap()) as usize;
        }
        let shape = Shape::new(extents[0], extents[1], extents[2], extents[3]);
        shape.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut payload = vec![0u8; shape.len() * S::BYTES];
        input.read_exact(&mut payload)?;
        let data = payload.chunks_exact(S::BYTES).map(S::read_le).collect();
        Tensor::new(shape, data)
    }
}

/// Integer class-id map of shape (N, H, W); the label companion of `Tensor`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(n: usize, h: usize, w: usize, data: Vec<u32>) -> Result<LabelMap> {
        if n == 0 || h == 0 || w == 0 {
            return Err(Error::Shape("label extents must be >= 1".into()));
        }
        if data.len() != n * h * w {
            return Err(Error::Shape(format!(
                "label data length {} does not match {}x{}x{}",
                data.len(),
                n,
                h,
                w
            )));
        }
        Ok(LabelMap { n, h, w, data })
    }

    pub fn zeros(n: usize, h: usize, w: usize) -> LabelMap {
        LabelMap { n, h, w, data: vec![0; n * h * w] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    #[inline(always)]
    pub fn at(&self, n: usize, y: usize, x: usize) -> u32 {
        self.data[(n * self.h + y) * self.w + x]
    }

    #[inline(always)]
    pub fn set(&mut self, n: usize, y: usize, x: usize, v: u32) {
        self.data[(n * self.h + y) * self.w + x] = v;
    }

    pub fn stack_batch(items: &[&LabelMap]) -> Result<LabelMap> {
        if items.is_empty() {
            return Err(Error::Shape("cannot stack an empty batch".into()));
        }
        let (h, w) = (items[0].h, items[0].w);
        let mut data = Vec::new();
        let mut n = 0;
        for m in items {
            if m.h != h || m.w != w {
                return Err(Error::Shape("batch members must share extents".into()));
            }
            data.extend_from_slice(&m.data);
            n += m.n;
        }
        LabelMap::new(n, h, w, data)
    }
}
