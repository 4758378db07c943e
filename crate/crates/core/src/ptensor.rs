//! Dense row-major tensors whose elements carry exact-bit counts.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::precision::{self, add_span, Precision, Span, Tracked, UnaryFn};

/// Values (always held as `f64`, rounded to the working format) plus a
/// same-shape buffer of exact-bit counts.
#[derive(Clone, Debug)]
pub struct PTensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    bits: Vec<u8>,
    precision: Precision,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinaryOp {
    pub fn name(self) -> &'static str {
        match self {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
            BinaryOp::Div => "div",
        }
    }

    #[inline]
    pub fn apply(self, p: Precision, x: Tracked, y: Tracked) -> Tracked {
        match self {
            BinaryOp::Add => precision::add(p, x, y),
            BinaryOp::Sub => precision::sub(p, x, y),
            BinaryOp::Mul => precision::mul(p, x, y),
            BinaryOp::Div => precision::div(p, x, y),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ReduceOp {
    Sum,
    Mean,
    Max,
}

impl ReduceOp {
    pub fn name(self) -> &'static str {
        match self {
            ReduceOp::Sum => "sum",
            ReduceOp::Mean => "mean",
            ReduceOp::Max => "max",
        }
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Right-aligned broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside the broadcast `out` shape (0 on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

impl PTensor {
    /// Input data declared exact: every element gets `E_MAX` bits.
    pub fn exact_literal(values: Vec<f64>, shape: &[usize], p: Precision) -> Result<Self> {
        if values.len() != numel(shape) {
            return Err(Error::shape(format!("{} values for shape {shape:?}", values.len())));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidValue(format!(
                "exact literal element {i} is {}",
                values[i]
            )));
        }
        let values: Vec<f64> = values.into_iter().map(|v| p.round(v)).collect();
        let bits = values
            .iter()
            .map(|v| if v.is_finite() { p.max_bits() } else { 0 })
            .collect();
        Ok(PTensor {
            shape: shape.to_vec(),
            values,
            bits,
            precision: p,
        })
    }

    /// Assembles a tensor from raw buffers, enforcing the element invariants.
    pub fn from_parts(shape: &[usize], values: Vec<f64>, bits: Vec<u8>, p: Precision) -> Result<Self> {
        let n = numel(shape);
        if values.len() != n || bits.len() != n {
            return Err(Error::shape(format!(
                "{} values and {} bits for shape {shape:?}",
                values.len(),
                bits.len()
            )));
        }
        if let Some(i) = bits.iter().position(|&b| b > p.max_bits()) {
            return Err(Error::InvalidValue(format!(
                "element {i} claims {} exact bits (max {})",
                bits[i],
                p.max_bits()
            )));
        }
        if let Some(i) = values.iter().position(|&v| !p.is_representable(v)) {
            return Err(Error::InvalidValue(format!(
                "element {i} ({}) is not representable in {p}",
                values[i]
            )));
        }
        let mut t = PTensor {
            shape: shape.to_vec(),
            values,
            bits,
            precision: p,
        };
        t.clear_nonfinite_bits();
        Ok(t)
    }

    pub(crate) fn from_raw(shape: Vec<usize>, values: Vec<f64>, bits: Vec<u8>, p: Precision) -> Self {
        debug_assert_eq!(values.len(), numel(&shape));
        debug_assert_eq!(bits.len(), values.len());
        PTensor {
            shape,
            values,
            bits,
            precision: p,
        }
    }

    pub fn scalar(value: f64, p: Precision) -> Self {
        let t = Tracked::exact(value, p);
        PTensor::from_raw(vec![], vec![t.value], vec![t.bits], p)
    }

    pub fn tracked_scalar(t: Tracked, p: Precision) -> Self {
        PTensor::from_raw(vec![], vec![t.value], vec![t.bits], p)
    }

    /// Exact zeros.
    pub fn zeros(shape: &[usize], p: Precision) -> Self {
        PTensor::full(shape, 0.0, p)
    }

    /// Exact constant fill.
    pub fn full(shape: &[usize], value: f64, p: Precision) -> Self {
        let t = Tracked::exact(value, p);
        let n = numel(shape);
        PTensor::from_raw(shape.to_vec(), vec![t.value; n], vec![t.bits; n], p)
    }

    fn clear_nonfinite_bits(&mut self) {
        for (v, b) in self.values.iter().zip(self.bits.iter_mut()) {
            if !v.is_finite() {
                *b = 0;
            }
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn get(&self, i: usize) -> Tracked {
        Tracked::new(self.values[i], self.bits[i])
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> Result<Tracked> {
        if self.numel() != 1 {
            return Err(Error::shape(format!("item() on shape {:?}", self.shape)));
        }
        Ok(self.get(0))
    }

    pub fn min_bits(&self) -> Option<u8> {
        self.bits.iter().copied().min()
    }

    pub fn max_bits(&self) -> Option<u8> {
        self.bits.iter().copied().max()
    }

    pub fn mean_bits(&self) -> Option<f64> {
        if self.bits.is_empty() {
            return None;
        }
        Some(self.bits.iter().map(|&b| b as f64).sum::<f64>() / self.bits.len() as f64)
    }

    /// Same shape, same value bit patterns, same exact bits, same precision.
    pub fn bitwise_eq(&self, other: &PTensor) -> bool {
        self.precision == other.precision
            && self.shape == other.shape
            && self.bits == other.bits
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    /// Replaces the exact-bit buffer (used by gradient hooks).
    pub fn with_bits(mut self, bits: Vec<u8>) -> Result<Self> {
        if bits.len() != self.numel() {
            return Err(Error::shape(format!(
                "{} bits for a tensor of {} elements",
                bits.len(),
                self.numel()
            )));
        }
        if let Some(&b) = bits.iter().find(|&&b| b > self.precision.max_bits()) {
            return Err(Error::InvalidValue(format!("{b} exact bits exceeds maximum")));
        }
        self.bits = bits;
        self.clear_nonfinite_bits();
        Ok(self)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        let mut t = self.clone();
        t.shape = shape.to_vec();
        Ok(t)
    }

    pub fn into_reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(Error::shape(format!("cannot reshape {:?} into {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Transpose of a 2-D tensor (pure selection).
    pub fn transpose2d(&self) -> Result<Self> {
        let [r, c] = self.dims2()?;
        let mut values = Vec::with_capacity(r * c);
        let mut bits = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                values.push(self.values[i * c + j]);
                bits.push(self.bits[i * c + j]);
            }
        }
        Ok(PTensor::from_raw(vec![c, r], values, bits, self.precision))
    }

    pub(crate) fn dims2(&self) -> Result<[usize; 2]> {
        match self.shape[..] {
            [r, c] => Ok([r, c]),
            _ => Err(Error::shape(format!("expected a 2-D tensor, got {:?}", self.shape))),
        }
    }

    /// Re-expresses the tensor in another working precision.
    ///
    /// Widening keeps values and finite bit counts; an exact element stays exact.
    /// Narrowing rounds values, and elements changed by the rounding lose exactness.
    pub fn convert(&self, p: Precision) -> Self {
        let from_max = self.precision.max_bits();
        let mut values = Vec::with_capacity(self.numel());
        let mut bits = Vec::with_capacity(self.numel());
        for (&v, &b) in self.values.iter().zip(&self.bits) {
            let r = p.round(v);
            let span = Span::of(v, b, self.precision).shift(r - v);
            values.push(r);
            bits.push(if b == from_max && r == v {
                p.max_bits()
            } else {
                span.bits(r, p)
            });
        }
        PTensor::from_raw(self.shape.clone(), values, bits, p)
    }

    fn check_same_precision(&self, other: &PTensor) -> Result<()> {
        if self.precision != other.precision {
            return Err(Error::PrecisionMismatch {
                expected: self.precision,
                actual: other.precision,
            });
        }
        Ok(())
    }

    pub fn map_tracked(&self, f: impl Fn(Tracked) -> Tracked) -> Self {
        let mut values = Vec::with_capacity(self.numel());
        let mut bits = Vec::with_capacity(self.numel());
        for (&v, &b) in self.values.iter().zip(&self.bits) {
            let t = f(Tracked::new(v, b));
            values.push(t.value);
            bits.push(t.bits);
        }
        PTensor::from_raw(self.shape.clone(), values, bits, self.precision)
    }

    /// Broadcasting elementwise combination.
    pub fn zip_tracked(&self, other: &PTensor, f: impl Fn(Tracked, Tracked) -> Tracked) -> Result<Self> {
        self.check_same_precision(other)?;
        let p = self.precision;
        if self.shape == other.shape {
            let mut values = Vec::with_capacity(self.numel());
            let mut bits = Vec::with_capacity(self.numel());
            for i in 0..self.numel() {
                let t = f(self.get(i), other.get(i));
                values.push(t.value);
                bits.push(t.bits);
            }
            return Ok(PTensor::from_raw(self.shape.clone(), values, bits, p));
        }
        let out = broadcast_shape(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out);
        let sb = broadcast_strides(&other.shape, &out);
        let n = numel(&out);
        let mut values = Vec::with_capacity(n);
        let mut bits = Vec::with_capacity(n);
        let mut idx = vec![0usize; out.len()];
        let (mut ia, mut ib) = (0usize, 0usize);
        for _ in 0..n {
            let t = f(self.get(ia), other.get(ib));
            values.push(t.value);
            bits.push(t.bits);
            // odometer increment
            for d in (0..out.len()).rev() {
                idx[d] += 1;
                ia += sa[d];
                ib += sb[d];
                if idx[d] < out[d] {
                    break;
                }
                ia -= sa[d] * out[d];
                ib -= sb[d] * out[d];
                idx[d] = 0;
            }
        }
        Ok(PTensor::from_raw(out, values, bits, p))
    }

    /// Sums over broadcast axes so the result has `shape`; the inverse of broadcasting.
    ///
    /// Each output element folds its contributions in ascending flat index order.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let b = broadcast_shape(shape, &self.shape)?;
        if b != self.shape {
            return Err(Error::shape(format!("cannot sum {:?} down to {shape:?}", self.shape)));
        }
        let p = self.precision;
        let out_strides = broadcast_strides(shape, &self.shape);
        let n_out = numel(shape);
        let mut acc = vec![0.0f64; n_out];
        let mut err = vec![Span::EXACT; n_out];
        let mut idx = vec![0usize; self.shape.len()];
        let mut o = 0usize;
        for i in 0..self.numel() {
            let x = self.values[i];
            let (z, a) = add_span(p, acc[o], err[o], x, Span::of(x, self.bits[i], p));
            acc[o] = z;
            err[o] = a;
            for d in (0..self.shape.len()).rev() {
                idx[d] += 1;
                o += out_strides[d];
                if idx[d] < self.shape[d] {
                    break;
                }
                o -= out_strides[d] * self.shape[d];
                idx[d] = 0;
            }
        }
        let bits = acc.iter().zip(&err).map(|(&z, &a)| a.bits(z, p)).collect();
        Ok(PTensor::from_raw(shape.to_vec(), acc, bits, p))
    }

    /// Copies an element subset: `out[i] = self[index[i]]` (pure selection).
    pub fn gather_flat(&self, index: &[usize], shape: &[usize]) -> Result<Self> {
        if index.len() != numel(shape) {
            return Err(Error::shape("gather index does not match output shape"));
        }
        let mut values = Vec::with_capacity(index.len());
        let mut bits = Vec::with_capacity(index.len());
        for &i in index {
            if i >= self.numel() {
                return Err(Error::shape(format!("gather index {i} out of range")));
            }
            values.push(self.values[i]);
            bits.push(self.bits[i]);
        }
        Ok(PTensor::from_raw(shape.to_vec(), values, bits, self.precision))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = BufReader::new(File::open(path)?);
        PTensor::read_from(&mut r)
    }

    /// Little-endian container: `PTSR`, version, dtype, rank, extents, values, bits.
    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&[dtype_code(self.precision)])?;
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match self.precision {
            Precision::Single => {
                for &v in &self.values {
                    w.write_all(&(v as f32).to_le_bytes())?;
                }
            }
            Precision::Double => {
                for &v in &self.values {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        w.write_all(&self.bits)?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Parse(format!("bad tensor magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != FORMAT_VERSION {
            return Err(Error::Parse(format!("unsupported tensor format version {version}")));
        }
        let mut dtype = [0u8; 1];
        r.read_exact(&mut dtype)?;
        let p = match dtype[0] {
            0 => Precision::Single,
            1 => Precision::Double,
            d => return Err(Error::Parse(format!("unknown dtype code {d}"))),
        };
        let ndim = read_u32(r)? as usize;
        if ndim > 16 {
            return Err(Error::Parse(format!("implausible rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            shape.push(
                usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Parse("extent overflows usize".into()))?,
            );
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Parse("element count overflows".into()))?;
        let mut values = Vec::with_capacity(n);
        match p {
            Precision::Single => {
                let mut b = [0u8; 4];
                for _ in 0..n {
                    r.read_exact(&mut b)?;
                    values.push(f32::from_le_bytes(b) as f64);
                }
            }
            Precision::Double => {
                let mut b = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut b)?;
                    values.push(f64::from_le_bytes(b));
                }
            }
        }
        let mut bits = vec![0u8; n];
        r.read_exact(&mut bits)?;
        PTensor::from_parts(&shape, values, bits, p)
    }
}

const MAGIC: &[u8; 4] = b"PTSR";
const FORMAT_VERSION: u32 = 1;

fn dtype_code(p: Precision) -> u8 {
    match p {
        Precision::Single => 0,
        Precision::Double => 1,
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

impl fmt::Display for PTensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PTensor({}, {:?}, [", self.precision, self.shape)?;
        for (i, (v, b)) in self.values.iter().zip(&self.bits).enumerate().take(8) {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v}~{b}")?;
        }
        if self.numel() > 8 {
            write!(f, ", ...")?;
        }
        write!(f, "])")
    }
}

/// Elementwise binary operation with right-aligned broadcasting.
pub fn ew_binary(op: BinaryOp, a: &PTensor, b: &PTensor) -> Result<PTensor> {
    let p = a.precision;
    a.zip_tracked(b, |x, y| op.apply(p, x, y))
}

/// Elementwise function; domain violations give NaN with 0 bits.
pub fn ew_unary(f: UnaryFn, a: &PTensor) -> PTensor {
    let p = a.precision;
    a.map_tracked(|x| precision::unary(p, f, x))
}

/// Reduction over one axis (`Some`) or over every element (`None`).
///
/// Sums fold strictly left to right in index order. The mean divides the
/// sum by the element count as an exact literal. Max copies the winning
/// element; ties go to the lowest index.
pub fn reduce(op: ReduceOp, a: &PTensor, axis: Option<usize>) -> Result<PTensor> {
    let p = a.precision;
    let (outer, len, inner, out_shape) = match axis {
        None => (1, a.numel(), 1, vec![]),
        Some(ax) => {
            if ax >= a.ndim() {
                return Err(Error::shape(format!("axis {ax} out of range for shape {:?}", a.shape)));
            }
            let outer = numel(&a.shape[..ax]);
            let inner = numel(&a.shape[ax + 1..]);
            let mut s = a.shape.clone();
            s.remove(ax);
            (outer, a.shape[ax], inner, s)
        }
    };
    if op == ReduceOp::Max && len == 0 {
        return Err(Error::shape("max over an empty axis"));
    }
    let n_out = outer * inner;
    let mut values = Vec::with_capacity(n_out);
    let mut bits = Vec::with_capacity(n_out);
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            match op {
                ReduceOp::Sum | ReduceOp::Mean => {
                    let (mut s, mut e) = (0.0, Span::EXACT);
                    for k in 0..len {
                        let j = at(k);
                        let x = a.values[j];
                        let (z, ez) = add_span(p, s, e, x, Span::of(x, a.bits[j], p));
                        s = z;
                        e = ez;
                    }
                    let sum = Tracked::from_span(s, e, p);
                    let t = if op == ReduceOp::Mean {
                        precision::div(p, sum, count_literal(len, p))
                    } else {
                        sum
                    };
                    values.push(t.value);
                    bits.push(t.bits);
                }
                ReduceOp::Max => {
                    let mut best = at(0);
                    for k in 1..len {
                        let j = at(k);
                        if a.values[j].is_nan() {
                            best = j;
                            break;
                        }
                        if a.values[j] > a.values[best] {
                            best = j;
                        }
                    }
                    values.push(a.values[best]);
                    bits.push(a.bits[best]);
                }
            }
        }
    }
    Ok(PTensor::from_raw(out_shape, values, bits, p))
}

/// An element count as a literal; exact unless the count is not representable.
pub(crate) fn count_literal(n: usize, p: Precision) -> Tracked {
    let v = n as f64;
    let r = p.round(v);
    if r == v {
        Tracked::new(r, p.max_bits())
    } else {
        Tracked::from_span(r, Span::EXACT.shift(r - v), p)
    }
}
