//! Ground truth for validating bit estimates: double-precision shadow runs
//! and matched-bit measurement.

use std::collections::BTreeMap;

use crate::autograd::{Feed, Graph, NodeId};
use crate::error::{Error, Result};
use crate::precision::{floor_neg_log2, two_prod, two_sum, Precision};
use crate::ptensor::PTensor;

/// Leading mantissa bits on which `work` agrees with the reference `shadow`.
pub fn matched_bits(work: f64, shadow: f64, p: Precision) -> u8 {
    let e_max = p.max_bits();
    if work == shadow {
        return e_max;
    }
    if !work.is_finite() || !shadow.is_finite() || shadow == 0.0 {
        return 0;
    }
    let r = (work - shadow).abs() / shadow.abs();
    floor_neg_log2(r).clamp(0, i64::from(e_max)) as u8
}

/// Elementwise [`matched_bits`] of two same-shape tensors.
pub fn matched_tensor(work: &PTensor, shadow: &PTensor) -> Result<Vec<u8>> {
    if work.shape() != shadow.shape() {
        return Err(Error::shape(format!(
            "work {:?} vs shadow {:?}",
            work.shape(),
            shadow.shape()
        )));
    }
    let p = work.precision();
    Ok(work
        .values()
        .iter()
        .zip(shadow.values())
        .map(|(&w, &s)| matched_bits(w, s, p))
        .collect())
}

/// Elements whose estimate exceeds the matched bits by more than `slack`.
pub fn violations(work: &PTensor, shadow: &PTensor, slack: u8) -> Result<Vec<usize>> {
    let matched = matched_tensor(work, shadow)?;
    Ok(work
        .bits()
        .iter()
        .zip(matched)
        .enumerate()
        .filter(|(_, (&est, m))| est > m.saturating_add(slack))
        .map(|(i, _)| i)
        .collect())
}

/// Working-precision values paired with their double-precision shadows.
#[derive(Clone, Debug, Default)]
pub struct ShadowRun {
    pub values: BTreeMap<NodeId, (PTensor, PTensor)>,
    pub grads: BTreeMap<NodeId, (PTensor, PTensor)>,
}

impl ShadowRun {
    /// Worst excess of estimated over matched bits across all values and
    /// gradients (negative when every estimate is below its matched count).
    pub fn worst_excess(&self) -> Result<i32> {
        let mut worst = i32::MIN;
        for (w, s) in self.values.values().chain(self.grads.values()) {
            for (est, m) in w.bits().iter().zip(matched_tensor(w, s)?) {
                worst = worst.max(i32::from(*est) - i32::from(m));
            }
        }
        Ok(worst)
    }
}

/// Re-executes `g` at its own precision and in double precision with the
/// same schedule and summation orders, feeding the double run the working
/// inputs widened exactly. Gradients are included when `loss` is given.
///
/// Hooks and the values of `g` itself are left untouched.
pub fn shadow_eval(g: &Graph, feed: &Feed, loss: Option<NodeId>) -> Result<ShadowRun> {
    if g.precision() == Precision::Double {
        return Err(Error::Unsupported(
            "graph shadow runs need a single-precision working graph; use the compensated kernels for double".into(),
        ));
    }
    let mut work = g.rebuild_at(g.precision());
    let mut shadow = g.rebuild_at(Precision::Double);
    let wide: Feed = feed.iter().map(|(&k, v)| (k, v.convert(Precision::Double))).collect();
    work.forward(feed)?;
    shadow.forward(&wide)?;
    let mut run = ShadowRun::default();
    for id in g.ids() {
        if let (Some(w), Some(s)) = (work.value(id), shadow.value(id)) {
            run.values.insert(id, (w.clone(), s.clone()));
        }
    }
    match loss {
        Some(loss) => {
            let gw = work.backward(loss)?;
            let mut gs = shadow.backward(loss)?;
            for (id, w) in gw.iter() {
                if let Some(s) = gs.remove(id) {
                    run.grads.insert(id, (w.clone(), s));
                }
            }
        }
        None => {
            work.release_temporaries();
            shadow.release_temporaries();
        }
    }
    Ok(run)
}

/// Sum with an error-free running compensation (cascaded TwoSum), about as
/// accurate as summing in twice the working precision.
pub fn compensated_sum(xs: &[f64]) -> f64 {
    let (mut s, mut c) = (0.0, 0.0);
    for &x in xs {
        let (t, e) = two_sum(s, x);
        s = t;
        c += e;
    }
    s + c
}

/// Dot product in twice the working precision (Ogita–Rump–Oishi Dot2).
pub fn dot2(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "dot2 operands differ in length");
    let (mut s, mut c) = (0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (h, r) = two_prod(x, y);
        let (t, e) = two_sum(s, h);
        s = t;
        c += e + r;
    }
    s + c
}
