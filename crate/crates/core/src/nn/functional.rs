//! Eager layer and loss kernels. The graph operations call into these.

use crate::error::{Error, Result};
use crate::linalg::{col2im, im2col, matmul, ConvGeometry, MatmulStrategy};
use crate::precision::{
    self, add_span, div_exact_span, prod_rounded, rounding_abs, square_span, Precision, Span, Tracked,
};
use crate::ptensor::{ew_binary, BinaryOp, PTensor};

/// `x·Wᵀ + b` as a tracked product followed by a tracked broadcast addition.
pub fn linear_forward(x: &PTensor, w: &PTensor, b: &PTensor) -> Result<PTensor> {
    let y = matmul(x, &w.transpose2d()?, MatmulStrategy::Rigorous)?;
    ew_binary(BinaryOp::Add, &y, b)
}

fn check_same(a: &PTensor, b: &PTensor, what: &str) -> Result<()> {
    if a.precision() != b.precision() {
        return Err(Error::PrecisionMismatch {
            expected: a.precision(),
            actual: b.precision(),
        });
    }
    if a.shape() != b.shape() {
        return Err(Error::shape(format!("{what}: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Mean squared error as one fused operation.
///
/// The residuals, squares and their sum keep enclosures of the exact values
/// internally, so a residual that cancels to near zero only costs what it
/// contributes to the sum instead of poisoning the loss.
pub fn mse_loss(pred: &PTensor, target: &PTensor) -> Result<PTensor> {
    check_same(pred, target, "mse operands")?;
    let p = pred.precision();
    let (mut acc, mut span) = (0.0, Span::EXACT);
    for i in 0..pred.numel() {
        let (a, b) = (pred.get(i), target.get(i));
        let (d, sd) = add_span(p, a.value, a.span(p), -b.value, -b.span(p));
        let (sq, round) = prod_rounded(p, d, d);
        (acc, span) = add_span(p, acc, span, sq, square_span(d, sd) + round);
    }
    let n = pred.numel().max(1) as f64;
    let (z, s) = div_exact_span(p, acc, span, n);
    Ok(PTensor::tracked_scalar(Tracked::from_span(z, s, p), p))
}

/// Gradients of [`mse_loss`] for both operands given the upstream scalar `g`.
pub fn mse_backward(pred: &PTensor, target: &PTensor, g: Tracked) -> Result<(PTensor, PTensor)> {
    check_same(pred, target, "mse operands")?;
    let p = pred.precision();
    let n = precision_count(pred.numel(), p);
    let two = Tracked::exact(2.0, p);
    let gp = pred.zip_tracked(target, |a, b| {
        let d = precision::sub(p, a, b);
        let s = precision::div(p, precision::mul(p, d, two), n);
        precision::mul(p, s, g)
    })?;
    let gt = gp.map_tracked(|t| Tracked::new(-t.value, t.bits));
    Ok((gp, gt))
}

fn precision_count(n: usize, p: Precision) -> Tracked {
    crate::ptensor::count_literal(n.max(1), p)
}

/// Validates a label tensor (one integral entry per row) against `classes`.
pub fn labels_from_tensor(labels: &PTensor, rows: usize, classes: usize) -> Result<Vec<usize>> {
    if labels.numel() != rows {
        return Err(Error::shape(format!("{} labels for {rows} rows", labels.numel())));
    }
    labels
        .values()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < classes {
                Ok(v as usize)
            } else {
                Err(Error::InvalidValue(format!(
                    "label {v} is not a class index below {classes}"
                )))
            }
        })
        .collect()
}

/// Per-row intermediates of the shifted log-sum-exp.
struct SoftmaxRow {
    shifted: Vec<(f64, Span)>,
    exps: Vec<(f64, Span)>,
    sum: (f64, Span),
}

fn softmax_row(p: Precision, row: &[Tracked]) -> SoftmaxRow {
    // the shift is a selected computed value used as an exact constant;
    // log-sum-exp minus a logit does not depend on it in exact arithmetic
    let m = row
        .iter()
        .map(|t| t.value)
        .fold(f64::NEG_INFINITY, |a, b| if b > a || b.is_nan() { b } else { a });
    let mut shifted = Vec::with_capacity(row.len());
    let mut exps = Vec::with_capacity(row.len());
    let (mut s, mut ss) = (0.0, Span::EXACT);
    for t in row {
        let (d, sd) = add_span(p, t.value, t.span(p), -m, Span::EXACT);
        let e = exp_span(p, d, sd);
        (s, ss) = add_span(p, s, ss, e.0, e.1);
        shifted.push((d, sd));
        exps.push(e);
    }
    SoftmaxRow {
        shifted,
        exps,
        sum: (s, ss),
    }
}

fn exp_span(p: Precision, x: f64, s: Span) -> (f64, Span) {
    let z = p.round(x.exp());
    if !z.is_finite() || !x.is_finite() || s.hi.is_infinite() || s.hi.is_nan() || s.lo.is_nan() {
        return (z, Span::UNBOUNDED);
    }
    // exp(0) = 1 is the only exact case we rely on
    let r = if x == 0.0 { 0.0 } else { 2.0 * rounding_abs(z, p) };
    if s.is_exact() {
        return (z, Span::symmetric(r));
    }
    (
        z,
        Span {
            lo: (z - r) * s.lo.exp_m1() - r,
            hi: (z + r) * s.hi.exp_m1() + r,
        },
    )
}

fn ln_span(p: Precision, x: f64, s: Span) -> (f64, Span) {
    let z = p.round(x.ln());
    if !z.is_finite() || !s.is_bounded() || x + s.lo <= 0.0 {
        return (z, Span::UNBOUNDED);
    }
    let r = if x == 1.0 { 0.0 } else { 2.0 * rounding_abs(z, p) };
    if s.is_exact() {
        return (z, Span::symmetric(r));
    }
    (
        z,
        Span {
            lo: (s.lo / x).ln_1p() - r,
            hi: (s.hi / x).ln_1p() + r,
        },
    )
}

fn rows_of(logits: &PTensor) -> Result<(usize, usize)> {
    match logits.shape() {
        [b, c] if *c > 0 => Ok((*b, *c)),
        s => Err(Error::shape(format!(
            "cross entropy expects [batch, classes] logits, got {s:?}"
        ))),
    }
}

/// Mean cross-entropy of `logits[batch, classes]` against class indices, fused.
pub fn cross_entropy(logits: &PTensor, labels: &[usize]) -> Result<PTensor> {
    let (b, c) = rows_of(logits)?;
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for {b} rows", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidValue(format!("label {l} out of range for {c} classes")));
    }
    let p = logits.precision();
    let (mut acc, mut span) = (0.0, Span::EXACT);
    for (r, &label) in labels.iter().enumerate() {
        let row: Vec<Tracked> = (0..c).map(|j| logits.get(r * c + j)).collect();
        let sm = softmax_row(p, &row);
        let (l, sl) = ln_span(p, sm.sum.0, sm.sum.1);
        let (d, sd) = sm.shifted[label];
        let (loss, sloss) = add_span(p, l, sl, -d, -sd);
        (acc, span) = add_span(p, acc, span, loss, sloss);
    }
    let (z, s) = div_exact_span(p, acc, span, b.max(1) as f64);
    Ok(PTensor::tracked_scalar(Tracked::from_span(z, s, p), p))
}

/// Gradient of [`cross_entropy`] with respect to the logits: `(softmax − onehot)/B · g`.
pub fn cross_entropy_backward(logits: &PTensor, labels: &[usize], g: Tracked) -> Result<PTensor> {
    let (b, c) = rows_of(logits)?;
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for {b} rows", labels.len())));
    }
    let p = logits.precision();
    let one = Tracked::exact(1.0, p);
    let count = precision_count(b, p);
    let mut values = Vec::with_capacity(b * c);
    let mut bits = Vec::with_capacity(b * c);
    for (r, &label) in labels.iter().enumerate() {
        let row: Vec<Tracked> = (0..c).map(|j| logits.get(r * c + j)).collect();
        let sm = softmax_row(p, &row);
        let total = Tracked::from_span(sm.sum.0, sm.sum.1, p);
        for (j, &(e, se)) in sm.exps.iter().enumerate() {
            let mut q = precision::div(p, Tracked::from_span(e, se, p), total);
            if j == label {
                q = precision::sub(p, q, one);
            }
            let t = precision::mul(p, precision::div(p, q, count), g);
            values.push(t.value);
            bits.push(t.bits);
        }
    }
    PTensor::from_parts(&[b, c], values, bits, p)
}

/// Convolution of `x[N, C, H, W]` with `kernel[OC, C, KH, KW]` plus `bias[OC]`.
///
/// Lowered to im2col, a tracked product with the flattened kernel and a
/// tracked bias addition; the result is laid out as `[N, OC, OH, OW]`.
pub fn conv2d_forward(x: &PTensor, kernel: &PTensor, bias: &PTensor, stride: usize) -> Result<PTensor> {
    let (g, oc) = conv_geometry(x, kernel, bias, stride)?;
    let cols = im2col(x, &g)?;
    let wmat = kernel.reshape(&[oc, g.cols()])?;
    let y = matmul(&cols, &wmat.transpose2d()?, MatmulStrategy::Rigorous)?;
    let y = ew_binary(BinaryOp::Add, &y, bias)?;
    rows_to_nchw(&y, &g, oc)
}

pub(crate) fn conv_geometry(
    x: &PTensor,
    kernel: &PTensor,
    bias: &PTensor,
    stride: usize,
) -> Result<(ConvGeometry, usize)> {
    let [oc, kc, kh, kw] = kernel.shape() else {
        return Err(Error::shape(format!(
            "kernel must be [OC, C, KH, KW], got {:?}",
            kernel.shape()
        )));
    };
    let g = ConvGeometry::new(x.shape(), *kh, *kw, stride)?;
    if *kc != g.channels {
        return Err(Error::shape(format!(
            "kernel expects {kc} channels, input has {}",
            g.channels
        )));
    }
    if bias.shape() != [*oc] {
        return Err(Error::shape(format!("bias must be [{oc}], got {:?}", bias.shape())));
    }
    Ok((g, *oc))
}

/// `[N·OH·OW, OC]` rows to `[N, OC, OH, OW]`.
pub(crate) fn rows_to_nchw(y: &PTensor, g: &ConvGeometry, oc: usize) -> Result<PTensor> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut idx = Vec::with_capacity(y.numel());
    for n in 0..g.batch {
        for o in 0..oc {
            for r in 0..oh * ow {
                idx.push((n * oh * ow + r) * oc + o);
            }
        }
    }
    y.gather_flat(&idx, &[g.batch, oc, oh, ow])
}

/// `[N, OC, OH, OW]` to `[N·OH·OW, OC]` rows.
pub(crate) fn nchw_to_rows(t: &PTensor, g: &ConvGeometry, oc: usize) -> Result<PTensor> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut idx = Vec::with_capacity(t.numel());
    for n in 0..g.batch {
        for r in 0..oh * ow {
            for o in 0..oc {
                idx.push((n * oc + o) * oh * ow + r);
            }
        }
    }
    t.gather_flat(&idx, &[g.rows(), oc])
}

/// Gradients of [`conv2d_forward`] for input, kernel and bias.
pub fn conv2d_backward(
    x: &PTensor,
    kernel: &PTensor,
    bias: &PTensor,
    stride: usize,
    grad: &PTensor,
) -> Result<(PTensor, PTensor, PTensor)> {
    let (g, oc) = conv_geometry(x, kernel, bias, stride)?;
    if grad.shape() != [g.batch, oc, g.out_h(), g.out_w()] {
        return Err(Error::shape(format!(
            "convolution gradient has shape {:?}",
            grad.shape()
        )));
    }
    let g2 = nchw_to_rows(grad, &g, oc)?;
    let cols = im2col(x, &g)?;
    let wmat = kernel.reshape(&[oc, g.cols()])?;
    let gb = g2.sum_to_shape(&[oc])?;
    let gw = matmul(&g2.transpose2d()?, &cols, MatmulStrategy::Rigorous)?.into_reshape(kernel.shape())?;
    let gcols = matmul(&g2, &wmat, MatmulStrategy::Rigorous)?;
    let gx = col2im(&gcols, &g)?;
    Ok((gx, gw, gb))
}

#[cfg(test)]
mod tests {
    use super::*;

    const S: Precision = Precision::Single;

    fn lit(v: &[f64], shape: &[usize]) -> PTensor {
        PTensor::exact_literal(v.to_vec(), shape, S).unwrap()
    }

    #[test]
    fn linear_identity() {
        let x = lit(&[0.3, -1.25, 7.0], &[1, 3]);
        let mut eye = vec![0.0; 9];
        eye[0] = 1.0;
        eye[4] = 1.0;
        eye[8] = 1.0;
        let y = linear_forward(&x, &lit(&eye, &[3, 3]), &lit(&[0.0; 3], &[3])).unwrap();
        assert_eq!(y.values(), x.values());
        assert_eq!(y.bits(), &[24, 24, 24]);
    }

    #[test]
    fn linear_one_by_one_is_mul_then_add() {
        let (x, w, b) = (0.3f32 as f64, 1.7f32 as f64, -0.2f32 as f64);
        let y = linear_forward(&lit(&[x], &[1, 1]), &lit(&[w], &[1, 1]), &lit(&[b], &[1])).unwrap();
        let m = precision::mul(S, Tracked::exact(x, S), Tracked::exact(w, S));
        let s = precision::add(S, m, Tracked::exact(b, S));
        assert_eq!((y.values()[0], y.bits()[0]), (s.value, s.bits));
    }

    #[test]
    fn mse_of_equal_operands_is_exact_zero() {
        let a = lit(&[0.1, 0.2, 0.3], &[3]);
        let l = mse_loss(&a, &a).unwrap();
        assert_eq!((l.values()[0], l.bits()[0]), (0.0, 24));
    }

    #[test]
    fn mse_exact_residuals() {
        let l = mse_loss(&lit(&[3.0, -1.0], &[2]), &lit(&[1.0, 1.0], &[2])).unwrap();
        assert_eq!(l.values()[0], 4.0);
        assert_eq!(l.bits()[0], 24);
    }

    #[test]
    fn mse_near_cancellation_has_few_bits() {
        let a = PTensor::from_parts(&[1], vec![1.0], vec![22], S).unwrap();
        let t = lit(&[1.0 - 2f64.powi(-20)], &[1]);
        let l = mse_loss(&a, &t).unwrap();
        assert!(l.bits()[0] <= 2, "bits {}", l.bits()[0]);
        // a bounded residual does not make the loss meaningless
        let a = PTensor::from_parts(&[2], vec![1.0, 5.0], vec![22, 24], S).unwrap();
        let t = lit(&[1.0, 3.0], &[2]);
        let l = mse_loss(&a, &t).unwrap();
        assert!(l.bits()[0] >= 18, "bits {}", l.bits()[0]);
    }

    #[test]
    fn cross_entropy_equal_logits() {
        let l = cross_entropy(&lit(&[0.5, 0.5], &[1, 2]), &[0]).unwrap();
        assert_eq!(l.values()[0], (2f64.ln() as f32) as f64);
        assert!(l.bits()[0] >= 21, "bits {}", l.bits()[0]);
    }

    #[test]
    fn cross_entropy_dominant_logit_cancels() {
        let logits = PTensor::from_parts(&[1, 2], vec![50.0, 0.0], vec![20, 20], S).unwrap();
        let l = cross_entropy(&logits, &[0]).unwrap();
        assert!(l.values()[0] < 1e-20);
        assert_eq!(l.bits()[0], 0);
    }

    #[test]
    fn cross_entropy_large_logits_are_finite() {
        let l = cross_entropy(&lit(&[1e4, -1e4, 3.0], &[1, 3]), &[1]).unwrap();
        assert!(l.values()[0].is_finite());
        assert_eq!(l.values()[0], 2e4);
    }

    #[test]
    fn cross_entropy_rejects_bad_labels() {
        let logits = lit(&[0.0; 4], &[2, 2]);
        assert!(cross_entropy(&logits, &[0, 2]).is_err());
        assert!(cross_entropy(&logits, &[0]).is_err());
        assert!(labels_from_tensor(&lit(&[0.0, 1.5], &[2]), 2, 2).is_err());
        assert_eq!(labels_from_tensor(&lit(&[1.0, 0.0], &[2]), 2, 2).unwrap(), vec![1, 0]);
    }

    #[test]
    fn cross_entropy_backward_rows_sum_to_zero() {
        let logits = lit(&[0.2, -1.0, 3.0, 0.0, 0.0, 0.0], &[2, 3]);
        let g = cross_entropy_backward(&logits, &[2, 0], Tracked::exact(1.0, S)).unwrap();
        for r in 0..2 {
            let s: f64 = g.values()[r * 3..r * 3 + 3].iter().sum();
            assert!(s.abs() < 1e-7);
        }
        assert!((g.values()[3] - (1.0 / 3.0 - 1.0) / 2.0).abs() < 1e-7);
    }

    #[test]
    fn conv_identity_kernel_crops() {
        let x = lit(&(0..25).map(|v| v as f64 * 0.1).collect::<Vec<_>>(), &[1, 1, 5, 5]);
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let y = conv2d_forward(&x, &lit(&k, &[1, 1, 3, 3]), &lit(&[0.0], &[1]), 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        let expect: Vec<f64> = [6, 7, 8, 11, 12, 13, 16, 17, 18]
            .iter()
            .map(|&i| x.values()[i])
            .collect();
        assert_eq!(y.values(), &expect[..]);
        assert!(y.bits().iter().all(|&b| b == 24));
    }

    #[test]
    fn conv_one_by_one_is_pointwise_linear() {
        let x = lit(&[1.0, 2.0, 3.0, 4.0, 0.5, 0.25, 0.125, 2.0], &[1, 2, 2, 2]);
        let k = lit(&[2.0, -1.0], &[1, 2, 1, 1]);
        let y = conv2d_forward(&x, &k, &lit(&[1.0], &[1]), 1).unwrap();
        assert_eq!(y.values(), &[2.5, 4.75, 6.875, 7.0]);
    }

    #[test]
    fn conv_shape_errors() {
        let x = lit(&[0.0; 16], &[1, 1, 4, 4]);
        let k = lit(&[0.0; 18], &[1, 2, 3, 3]);
        assert!(conv2d_forward(&x, &k, &lit(&[0.0], &[1]), 1).is_err());
        let k = lit(&[0.0; 9], &[1, 1, 3, 3]);
        assert!(conv2d_forward(&x, &k, &lit(&[0.0, 0.0], &[2]), 1).is_err());
    }
}
