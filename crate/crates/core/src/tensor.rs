//! Rank-3 tensors laid out row-major over (batch, channel, time).
//!
//! Every activation in the library is a [`Tensor3`]. Feature vectors are
//! tensors with `time == 1`, scalars are `1×1×1`. Layer weights reuse the
//! same container: a conv kernel is `out × in × kernel_size` and a bias is
//! `1 × out × 1`.

use std::fmt;

use thiserror::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Shape {
    pub batch: usize,
    pub channels: usize,
    pub time: usize,
}

impl Shape {
    pub const SCALAR: Shape = Shape { batch: 1, channels: 1, time: 1 };

    pub const fn new(batch: usize, channels: usize, time: usize) -> Self {
        Shape { batch, channels, time }
    }

    pub const fn len(&self) -> usize {
        self.batch * self.channels * self.time
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub const fn index(&self, b: usize, c: usize, t: usize) -> usize {
        (b * self.channels + c) * self.time + t
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}×{}", self.batch, self.channels, self.time)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {left} vs {right}")]
    ShapeMismatch { op: &'static str, left: Shape, right: Shape },
    #[error("invalid shape {0}: every dimension must be positive")]
    EmptyDimension(Shape),
    #[error("buffer of length {len} does not fit shape {shape}")]
    LengthMismatch { shape: Shape, len: usize },
    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },
    #[error("{channels} channels cannot be split into {groups} equal groups")]
    IndivisibleChannels { channels: usize, groups: usize },
    #[error("channel range {start}..{end} out of bounds for {channels} channels")]
    ChannelRange { start: usize, end: usize, channels: usize },
    #[error("expected a scalar, got shape {0}")]
    NotScalar(Shape),
    #[error("{0}: operand count does not match the operation arity")]
    Arity(&'static str),
    #[error("{0}: empty input list")]
    Empty(&'static str),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("dropout probability {0} outside [0, 1)")]
    InvalidProbability(f64),
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
}

pub type Result<T, E = TensorError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor3 {
    /// Validated constructor: positive dimensions, matching length, finite values.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        check_shape(shape)?;
        if data.len() != shape.len() {
            return Err(TensorError::LengthMismatch { shape, len: data.len() });
        }
        let t = Tensor3 { shape, data };
        t.check_finite()?;
        Ok(t)
    }

    pub fn from_vec(batch: usize, channels: usize, time: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(Shape::new(batch, channels, time), data)
    }

    /// Kernel-side constructor. Finiteness is only verified in debug builds.
    pub(crate) fn from_raw(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite value produced for shape {shape}"
        );
        Tensor3 { shape, data }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        assert!(!shape.is_empty(), "invalid shape {shape}");
        Tensor3 { shape, data: vec![value; shape.len()] }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn scalar(value: f64) -> Self {
        Tensor3 { shape: Shape::SCALAR, data: vec![value] }
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        assert!(!shape.is_empty(), "invalid shape {shape}");
        let mut data = Vec::with_capacity(shape.len());
        for b in 0..shape.batch {
            for c in 0..shape.channels {
                for t in 0..shape.time {
                    data.push(f(b, c, t));
                }
            }
        }
        Tensor3 { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn batch(&self) -> usize {
        self.shape.batch
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn time(&self) -> usize {
        self.shape.time
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, b: usize, c: usize, t: usize) -> f64 {
        self.data[self.shape.index(b, c, t)]
    }

    /// The time series of one (batch, channel) pair.
    pub fn row(&self, b: usize, c: usize) -> &[f64] {
        let start = self.shape.index(b, c, 0);
        &self.data[start..start + self.shape.time]
    }

    pub fn as_scalar(&self) -> Result<f64> {
        if self.shape != Shape::SCALAR {
            return Err(TensorError::NotScalar(self.shape));
        }
        Ok(self.data[0])
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(TensorError::NonFinite { index, value: self.data[index] }),
            None => Ok(()),
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor3 {
        Tensor3 { shape: self.shape, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Samples of one batch element, as a `1×C×T` tensor.
    pub fn sample(&self, b: usize) -> Tensor3 {
        let n = self.shape.channels * self.shape.time;
        Tensor3 {
            shape: Shape::new(1, self.shape.channels, self.shape.time),
            data: self.data[b * n..(b + 1) * n].to_vec(),
        }
    }
}

fn check_shape(shape: Shape) -> Result<()> {
    if shape.batch == 0 || shape.channels == 0 || shape.time == 0 {
        return Err(TensorError::EmptyDimension(shape));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Tanh,
    Sigmoid,
    Relu,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }

    fn name(self) -> &'static str {
        match self {
            Elementwise::Add => "add",
            Elementwise::Sub => "sub",
            Elementwise::Mul => "mul",
            Elementwise::Tanh => "tanh",
            Elementwise::Sigmoid => "sigmoid",
            Elementwise::Relu => "relu",
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn elementwise(op: Elementwise, a: &Tensor3, b: Option<&Tensor3>) -> Result<Tensor3> {
    match (op.is_binary(), b) {
        (true, Some(b)) => {
            if a.shape != b.shape {
                return Err(TensorError::ShapeMismatch { op: op.name(), left: a.shape, right: b.shape });
            }
            let f: fn(f64, f64) -> f64 = match op {
                Elementwise::Add => |x, y| x + y,
                Elementwise::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
            Ok(Tensor3::from_raw(a.shape, data))
        }
        (false, None) => Ok(match op {
            Elementwise::Tanh => a.map(f64::tanh),
            Elementwise::Sigmoid => a.map(sigmoid),
            _ => a.map(|v| v.max(0.0)),
        }),
        _ => Err(TensorError::Arity(op.name())),
    }
}

/// Copy of channels `start..start + len`.
pub fn slice_channels(x: &Tensor3, start: usize, len: usize) -> Result<Tensor3> {
    let s = x.shape;
    if len == 0 || start + len > s.channels {
        return Err(TensorError::ChannelRange { start, end: start + len, channels: s.channels });
    }
    let out_shape = Shape::new(s.batch, len, s.time);
    let mut data = Vec::with_capacity(out_shape.len());
    for b in 0..s.batch {
        let from = s.index(b, start, 0);
        data.extend_from_slice(&x.data[from..from + len * s.time]);
    }
    Ok(Tensor3::from_raw(out_shape, data))
}

/// Splits the channel axis into `groups` equal consecutive slices.
pub fn split_channels(x: &Tensor3, groups: usize) -> Result<Vec<Tensor3>> {
    if groups == 0 || !x.channels().is_multiple_of(groups) {
        return Err(TensorError::IndivisibleChannels { channels: x.channels(), groups });
    }
    let width = x.channels() / groups;
    (0..groups).map(|g| slice_channels(x, g * width, width)).collect()
}

pub fn concat_channels(parts: &[Tensor3]) -> Result<Tensor3> {
    let first = parts.first().ok_or(TensorError::Empty("concat_channels"))?;
    let (batch, time) = (first.batch(), first.time());
    for p in &parts[1..] {
        if p.batch() != batch || p.time() != time {
            return Err(TensorError::ShapeMismatch { op: "concat_channels", left: first.shape, right: p.shape });
        }
    }
    let channels = parts.iter().map(Tensor3::channels).sum();
    let shape = Shape::new(batch, channels, time);
    let mut data = Vec::with_capacity(shape.len());
    for b in 0..batch {
        for p in parts {
            let n = p.channels() * time;
            data.extend_from_slice(&p.data[b * n..(b + 1) * n]);
        }
    }
    Ok(Tensor3::from_raw(shape, data))
}

/// Stacks `1×C×T` samples (or `B×C×T` chunks) along the batch axis,
/// right-padding the time axis with zeros up to the longest part.
pub fn stack_batch(parts: &[&Tensor3]) -> Result<Tensor3> {
    let first = parts.first().ok_or(TensorError::Empty("stack_batch"))?;
    let channels = first.channels();
    let time = parts.iter().map(|p| p.time()).max().unwrap_or(1);
    let mut batch = 0;
    for p in parts {
        if p.channels() != channels {
            return Err(TensorError::ShapeMismatch { op: "stack_batch", left: first.shape, right: p.shape });
        }
        batch += p.batch();
    }
    let shape = Shape::new(batch, channels, time);
    let mut data = vec![0.0; shape.len()];
    let mut b0 = 0;
    for p in parts {
        for b in 0..p.batch() {
            for c in 0..channels {
                let dst = shape.index(b0 + b, c, 0);
                data[dst..dst + p.time()].copy_from_slice(p.row(b, c));
            }
        }
        b0 += p.batch();
    }
    Ok(Tensor3::from_raw(shape, data))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(shape: Shape) -> Tensor3 {
        Tensor3::new(shape, (0..shape.len()).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn construction_rejects_bad_input() {
        assert!(matches!(
            Tensor3::from_vec(1, 2, 2, vec![0.0; 3]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert!(matches!(Tensor3::from_vec(0, 2, 2, vec![]), Err(TensorError::EmptyDimension(_))));
        assert!(matches!(
            Tensor3::from_vec(1, 1, 2, vec![0.0, f64::NAN]),
            Err(TensorError::NonFinite { index: 1, .. })
        ));
    }

    #[test]
    fn unary_examples() {
        let z = Tensor3::zeros(Shape::new(1, 2, 3));
        assert_eq!(elementwise(Elementwise::Tanh, &z, None).unwrap(), z);
        let s = elementwise(Elementwise::Sigmoid, &Tensor3::scalar(0.0), None).unwrap();
        assert_eq!(s.as_scalar().unwrap(), 0.5);
        let a = Tensor3::scalar(2.0);
        assert_eq!(elementwise(Elementwise::Mul, &a, Some(&a)).unwrap().as_scalar().unwrap(), 4.0);
    }

    #[test]
    fn binary_shape_mismatch_reports_both() {
        let a = Tensor3::zeros(Shape::new(1, 2, 3));
        let b = Tensor3::zeros(Shape::new(1, 3, 2));
        let err = elementwise(Elementwise::Add, &a, Some(&b)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("1×2×3") && msg.contains("1×3×2"), "{msg}");
        assert_eq!(elementwise(Elementwise::Tanh, &a, Some(&a)), Err(TensorError::Arity("tanh")));
        assert_eq!(elementwise(Elementwise::Mul, &a, None), Err(TensorError::Arity("mul")));
    }

    #[test]
    fn bounded_activations() {
        let x = Tensor3::from_fn(Shape::new(2, 3, 5), |b, c, t| (b as f64 - 1.0) * 40.0 + c as f64 * t as f64);
        let th = elementwise(Elementwise::Tanh, &x, None).unwrap();
        assert!(th.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let sg = elementwise(Elementwise::Sigmoid, &x, None).unwrap();
        assert!(sg.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(sigmoid(-800.0).is_finite() && sigmoid(800.0) == 1.0);
    }

    #[test]
    fn split_two_groups_roundtrip() {
        let x = ramp(Shape::new(1, 4, 5));
        let parts = split_channels(&x, 2).unwrap();
        assert_eq!(parts.len(), 2);
        assert!(parts.iter().all(|p| p.shape() == Shape::new(1, 2, 5)));
        assert_eq!(concat_channels(&parts).unwrap(), x);
        assert_eq!(split_channels(&x, 1).unwrap(), vec![x.clone()]);
    }

    #[test]
    fn split_three_groups_matches_index_oracle() {
        let x = ramp(Shape::new(2, 6, 4));
        let parts = split_channels(&x, 3).unwrap();
        for (g, p) in parts.iter().enumerate() {
            assert_eq!(p.shape(), Shape::new(2, 2, 4));
            for b in 0..2 {
                for c in 0..2 {
                    for t in 0..4 {
                        // flat index of the source element, computed by hand
                        let flat = b * 24 + (2 * g + c) * 4 + t;
                        assert_eq!(p.at(b, c, t), flat as f64);
                    }
                }
            }
        }
    }

    #[test]
    fn split_rejects_indivisible() {
        let x = ramp(Shape::new(1, 5, 2));
        assert_eq!(
            split_channels(&x, 2),
            Err(TensorError::IndivisibleChannels { channels: 5, groups: 2 })
        );
    }

    #[test]
    fn concat_uneven_parts_layout() {
        let a = Tensor3::from_fn(Shape::new(2, 1, 3), |b, _, t| 100.0 * b as f64 + t as f64);
        let b = Tensor3::from_fn(Shape::new(2, 3, 3), |b, c, t| 1000.0 + 100.0 * b as f64 + 10.0 * c as f64 + t as f64);
        let out = concat_channels(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(out.shape(), Shape::new(2, 4, 3));
        for bi in 0..2 {
            for c in 0..4 {
                for t in 0..3 {
                    let expected = if c == 0 { a.at(bi, 0, t) } else { b.at(bi, c - 1, t) };
                    assert_eq!(out.at(bi, c, t), expected);
                }
            }
        }
        assert_eq!(concat_channels(std::slice::from_ref(&a)).unwrap(), a);
        let bad = Tensor3::zeros(Shape::new(2, 1, 4));
        assert!(concat_channels(&[a, bad]).is_err());
        assert_eq!(concat_channels(&[]), Err(TensorError::Empty("concat_channels")));
    }

    #[test]
    fn stack_batch_pads_right() {
        let a = Tensor3::from_vec(1, 1, 2, vec![1.0, 2.0]).unwrap();
        let b = Tensor3::from_vec(1, 1, 3, vec![3.0, 4.0, 5.0]).unwrap();
        let s = stack_batch(&[&a, &b]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 1, 3));
        assert_eq!(s.data(), &[1.0, 2.0, 0.0, 3.0, 4.0, 5.0]);
    }
}
