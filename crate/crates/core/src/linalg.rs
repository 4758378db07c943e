//! Tracked matrix products and the im2col lowering used by convolutions.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::precision::{add_span, bits_from_abs, mul_span, rel_bound, Precision, Span};
use crate::ptensor::PTensor;

/// How a matrix product derives the exact bits of its result.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum MatmulStrategy {
    /// Every product and partial sum is tracked in the order the value is accumulated.
    #[default]
    Rigorous,
    /// One aggregate bound from `|A|·|B|` and the worst bits of each row and column.
    TropicalBound,
}

impl MatmulStrategy {
    pub fn name(self) -> &'static str {
        match self {
            MatmulStrategy::Rigorous => "rigorous",
            MatmulStrategy::TropicalBound => "tropical",
        }
    }
}

impl fmt::Display for MatmulStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MatmulStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rigorous" => Ok(MatmulStrategy::Rigorous),
            "tropical" => Ok(MatmulStrategy::TropicalBound),
            other => Err(Error::Parse(format!("unknown matmul strategy `{other}`"))),
        }
    }
}

fn check_operands(a: &PTensor, b: &PTensor) -> Result<(usize, usize, usize)> {
    if a.precision() != b.precision() {
        return Err(Error::PrecisionMismatch {
            expected: a.precision(),
            actual: b.precision(),
        });
    }
    let [m, k] = a.dims2()?;
    let [k2, n] = b.dims2()?;
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok((m, k, n))
}

/// `a[m×k] · b[k×n]`; each element is a sequential dot product in ascending `k`.
pub fn matmul(a: &PTensor, b: &PTensor, strategy: MatmulStrategy) -> Result<PTensor> {
    let (m, k, n) = check_operands(a, b)?;
    let p = a.precision();
    let av = a.values();
    let bv = b.values();
    let mut values = vec![0.0; m * n];
    let mut bits = vec![0u8; m * n];

    match strategy {
        MatmulStrategy::Rigorous => {
            let sa: Vec<Span> = av.iter().zip(a.bits()).map(|(&x, &e)| Span::of(x, e, p)).collect();
            let sb: Vec<Span> = bv.iter().zip(b.bits()).map(|(&x, &e)| Span::of(x, e, p)).collect();
            for i in 0..m {
                for j in 0..n {
                    let (mut z, mut s) = (0.0, Span::EXACT);
                    for l in 0..k {
                        let (x, y) = (av[i * k + l], bv[l * n + j]);
                        let (t, st) = mul_span(p, x, sa[i * k + l], y, sb[l * n + j]);
                        (z, s) = add_span(p, z, s, t, st);
                    }
                    values[i * n + j] = z;
                    bits[i * n + j] = s.bits(z, p);
                }
            }
        }
        MatmulStrategy::TropicalBound => {
            for i in 0..m {
                for j in 0..n {
                    let mut z = 0.0;
                    for l in 0..k {
                        z = p.round(z + p.round(av[i * k + l] * bv[l * n + j]));
                    }
                    values[i * n + j] = z;
                }
            }
            let abs_a = abs_tensor(a);
            let abs_b = abs_tensor(b);
            let t = tropical_abs_product(&abs_a, &abs_b)?;
            let row_r: Vec<f64> = (0..m)
                .map(|i| worst_rel(a.bits()[i * k..(i + 1) * k].iter().copied(), p))
                .collect();
            let col_r: Vec<f64> = (0..n)
                .map(|j| worst_rel((0..k).map(|l| b.bits()[l * n + j]), p))
                .collect();
            let gamma = gamma(k, p);
            // f64 evaluation of Σ|a||b| is itself off by at most k ulps of f64
            let slack = 1.0 + (k as f64 + 2.0) * f64::EPSILON;
            for i in 0..m {
                for j in 0..n {
                    let (ra, rb) = (row_r[i], col_r[j]);
                    let mag = t.values()[i * n + j];
                    let prop = if ra >= 1.0 || rb >= 1.0 {
                        f64::INFINITY
                    } else {
                        (ra + rb + ra * rb) / ((1.0 - ra) * (1.0 - rb))
                    };
                    let bound = if mag == 0.0 { 0.0 } else { mag * slack * (prop + gamma) };
                    bits[i * n + j] = bits_from_abs(values[i * n + j], bound, p);
                }
            }
        }
    }
    Ok(PTensor::from_raw(vec![m, n], values, bits, p))
}

/// `k·u/(1 − k·u)`, the classical bound for `k` rounded steps.
fn gamma(k: usize, p: Precision) -> f64 {
    let ku = k as f64 * p.unit_roundoff();
    if ku >= 1.0 {
        f64::INFINITY
    } else {
        ku / (1.0 - ku)
    }
}

fn worst_rel(bits: impl Iterator<Item = u8>, p: Precision) -> f64 {
    bits.map(|e| rel_bound(e, p)).fold(0.0, f64::max)
}

fn abs_tensor(t: &PTensor) -> PTensor {
    let values = t.values().iter().map(|v| v.abs()).collect();
    PTensor::from_raw(t.shape().to_vec(), values, t.bits().to_vec(), t.precision())
}

/// Magnitude aggregate `Σ_k a_ik·b_kj` of two non-negative matrices, in `f64`.
///
/// The result is a bound ingredient, not a tracked value: its bits are all
/// zero and its values are not rounded to the working precision.
pub fn tropical_abs_product(a_abs: &PTensor, b_abs: &PTensor) -> Result<PTensor> {
    let (m, k, n) = check_operands(a_abs, b_abs)?;
    if a_abs
        .values()
        .iter()
        .chain(b_abs.values())
        .any(|&v| v.is_nan() || v < 0.0)
    {
        return Err(Error::InvalidValue(
            "tropical product needs non-negative entries".into(),
        ));
    }
    let (av, bv) = (a_abs.values(), b_abs.values());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let x = av[i * k + l];
            if x == 0.0 {
                continue;
            }
            let row = &bv[l * n..(l + 1) * n];
            for (o, &y) in out[i * n..(i + 1) * n].iter_mut().zip(row) {
                *o += x * y;
            }
        }
    }
    Ok(PTensor::from_raw(vec![m, n], out, vec![0; m * n], Precision::Double))
}

/// Geometry of a strided, unpadded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], kh: usize, kw: usize, stride: usize) -> Result<Self> {
        let [batch, channels, height, width] = x_shape else {
            return Err(Error::shape(format!(
                "convolution input must be [N, C, H, W], got {x_shape:?}"
            )));
        };
        if stride == 0 || kh == 0 || kw == 0 {
            return Err(Error::shape("kernel extents and stride must be positive"));
        }
        if kh > *height || kw > *width {
            return Err(Error::shape(format!(
                "kernel {kh}x{kw} larger than input {height}x{width}"
            )));
        }
        Ok(ConvGeometry {
            batch: *batch,
            channels: *channels,
            height: *height,
            width: *width,
            kh,
            kw,
            stride,
        })
    }

    pub fn out_h(&self) -> usize {
        (self.height - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.width - self.kw) / self.stride + 1
    }

    /// Rows of the lowered matrix: one per output position.
    pub fn rows(&self) -> usize {
        self.batch * self.out_h() * self.out_w()
    }

    /// Columns of the lowered matrix: one per kernel tap, ordered (c, i, j).
    pub fn cols(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    /// Flat input index feeding each entry of the lowered matrix.
    pub fn gather_index(&self) -> Vec<usize> {
        let (oh, ow) = (self.out_h(), self.out_w());
        let mut idx = Vec::with_capacity(self.rows() * self.cols());
        for n in 0..self.batch {
            for y in 0..oh {
                for x in 0..ow {
                    for c in 0..self.channels {
                        for i in 0..self.kh {
                            for j in 0..self.kw {
                                let h = y * self.stride + i;
                                let w = x * self.stride + j;
                                idx.push(((n * self.channels + c) * self.height + h) * self.width + w);
                            }
                        }
                    }
                }
            }
        }
        idx
    }
}

/// Lowers `x[N, C, H, W]` to `[N·OH·OW, C·KH·KW]` by pure selection.
pub fn im2col(x: &PTensor, g: &ConvGeometry) -> Result<PTensor> {
    x.gather_flat(&g.gather_index(), &[g.rows(), g.cols()])
}

/// Adjoint of [`im2col`]: scatters and sums columns back onto the input grid.
///
/// Contributions to one input element are added in ascending lowered-matrix order.
pub fn col2im(cols: &PTensor, g: &ConvGeometry) -> Result<PTensor> {
    if cols.shape() != [g.rows(), g.cols()] {
        return Err(Error::shape(format!(
            "col2im expects [{}, {}], got {:?}",
            g.rows(),
            g.cols(),
            cols.shape()
        )));
    }
    let p = cols.precision();
    let n = g.batch * g.channels * g.height * g.width;
    let mut acc = vec![0.0; n];
    let mut spans = vec![Span::EXACT; n];
    for (src, dst) in g.gather_index().into_iter().enumerate() {
        let t = cols.get(src);
        (acc[dst], spans[dst]) = add_span(p, acc[dst], spans[dst], t.value, t.span(p));
    }
    let bits = acc.iter().zip(&spans).map(|(&z, s)| s.bits(z, p)).collect();
    Ok(PTensor::from_raw(
        vec![g.batch, g.channels, g.height, g.width],
        acc,
        bits,
        p,
    ))
}
