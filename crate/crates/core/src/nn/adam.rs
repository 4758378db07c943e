use crate::error::{Error, Result};
use crate::precision::{self, Precision, Tracked, UnaryFn};
use crate::ptensor::PTensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Verdict {
    Proceed,
    SkipStep,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SignificanceReport {
    pub loss_bits: u8,
    pub min_grad_bits: u8,
    pub verdict: Verdict,
}

/// Skips the step when the loss or any gradient element has no exact bits.
pub fn significance_check(loss: &PTensor, grads: &[PTensor]) -> SignificanceReport {
    let e_max = loss.precision().max_bits();
    let loss_bits = loss.min_bits().unwrap_or(0);
    let min_grad_bits = grads.iter().filter_map(PTensor::min_bits).min().unwrap_or(e_max);
    let verdict = if loss_bits == 0 || min_grad_bits == 0 {
        Verdict::SkipStep
    } else {
        Verdict::Proceed
    };
    SignificanceReport {
        loss_bits,
        min_grad_bits,
        verdict,
    }
}

/// Adam whose moments, bias corrections and updates are all tracked.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    precision: Precision,
    m: Vec<PTensor>,
    v: Vec<PTensor>,
    t: u64,
    skipped_steps: u64,
    beta1_pow: Tracked,
    beta2_pow: Tracked,
}

impl Adam {
    pub fn new(cfg: AdamConfig, params: &[PTensor]) -> Result<Self> {
        let precision = params
            .first()
            .map(PTensor::precision)
            .ok_or_else(|| Error::InvalidValue("optimizer needs at least one parameter".into()))?;
        let zeros: Vec<PTensor> = params.iter().map(|p| PTensor::zeros(p.shape(), precision)).collect();
        Ok(Adam {
            cfg,
            precision,
            m: zeros.clone(),
            v: zeros,
            t: 0,
            skipped_steps: 0,
            beta1_pow: Tracked::exact(1.0, precision),
            beta2_pow: Tracked::exact(1.0, precision),
        })
    }

    pub fn config(&self) -> AdamConfig {
        self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn skipped_steps(&self) -> u64 {
        self.skipped_steps
    }

    pub fn first_moments(&self) -> &[PTensor] {
        &self.m
    }

    pub fn second_moments(&self) -> &[PTensor] {
        &self.v
    }

    /// Restores a saved state.
    pub fn restore(&mut self, m: Vec<PTensor>, v: Vec<PTensor>, t: u64, skipped_steps: u64) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::shape("moment count differs from parameter count"));
        }
        for (new, old) in m.iter().zip(&self.m).chain(v.iter().zip(&self.v)) {
            if new.shape() != old.shape() || new.precision() != self.precision {
                return Err(Error::shape("moment shape or precision differs"));
            }
        }
        self.m = m;
        self.v = v;
        self.t = t;
        self.skipped_steps = skipped_steps;
        let p = self.precision;
        let (mut b1, mut b2) = (Tracked::exact(1.0, p), Tracked::exact(1.0, p));
        let (c1, c2) = (self.constant(self.cfg.beta1), self.constant(self.cfg.beta2));
        for _ in 0..t {
            b1 = precision::mul(p, b1, c1);
            b2 = precision::mul(p, b2, c2);
        }
        self.beta1_pow = b1;
        self.beta2_pow = b2;
        Ok(())
    }

    /// Declares the stored moments and bias-correction powers exact, so the
    /// next step's bits describe that step alone.
    pub fn reanchor(&mut self) {
        let e = self.precision.max_bits();
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            let n = t.numel();
            *t = t.clone().with_bits(vec![e; n]).expect("same element count");
        }
        self.beta1_pow.bits = e;
        self.beta2_pow.bits = e;
    }

    fn constant(&self, x: f64) -> Tracked {
        Tracked::exact(self.precision.round(x), self.precision)
    }

    /// Applies one update, or on `SkipStep` leaves parameters, moments and
    /// the step counter untouched, zeroes the gradients and counts the skip.
    /// Returns whether the update was applied.
    pub fn step(&mut self, params: &mut [PTensor], grads: &mut [PTensor], report: &SignificanceReport) -> Result<bool> {
        self.check(params, grads)?;
        if report.verdict == Verdict::SkipStep {
            for g in grads.iter_mut() {
                *g = PTensor::zeros(g.shape(), self.precision);
            }
            self.skipped_steps += 1;
            return Ok(false);
        }
        self.apply(params, grads)?;
        Ok(true)
    }

    /// Unconditional update.
    pub fn apply(&mut self, params: &mut [PTensor], grads: &[PTensor]) -> Result<()> {
        self.check(params, grads)?;
        let p = self.precision;
        let one = Tracked::exact(1.0, p);
        let (b1, b2) = (self.constant(self.cfg.beta1), self.constant(self.cfg.beta2));
        let (c1, c2) = (precision::sub(p, one, b1), precision::sub(p, one, b2));
        let (lr, eps) = (self.constant(self.cfg.lr), self.constant(self.cfg.eps));
        self.t += 1;
        self.beta1_pow = precision::mul(p, self.beta1_pow, b1);
        self.beta2_pow = precision::mul(p, self.beta2_pow, b2);
        let bc1 = precision::sub(p, one, self.beta1_pow);
        let bc2 = precision::sub(p, one, self.beta2_pow);
        for ((param, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let n = param.numel();
            let (mut pv, mut pb) = (Vec::with_capacity(n), Vec::with_capacity(n));
            let (mut mv, mut mb) = (Vec::with_capacity(n), Vec::with_capacity(n));
            let (mut vv, mut vb) = (Vec::with_capacity(n), Vec::with_capacity(n));
            for i in 0..n {
                let gi = g.get(i);
                let mi = precision::add(p, precision::mul(p, b1, m.get(i)), precision::mul(p, c1, gi));
                let g2 = precision::mul(p, gi, gi);
                let vi = precision::add(p, precision::mul(p, b2, v.get(i)), precision::mul(p, c2, g2));
                let mhat = precision::div(p, mi, bc1);
                let vhat = precision::div(p, vi, bc2);
                let den = precision::add(p, precision::unary(p, UnaryFn::Sqrt, vhat), eps);
                let upd = precision::mul(p, lr, precision::div(p, mhat, den));
                let new = precision::sub(p, param.get(i), upd);
                for (t, (vals, bits)) in [
                    (new, (&mut pv, &mut pb)),
                    (mi, (&mut mv, &mut mb)),
                    (vi, (&mut vv, &mut vb)),
                ] {
                    vals.push(t.value);
                    bits.push(if t.value.is_finite() { t.bits } else { 0 });
                }
            }
            let shape = param.shape().to_vec();
            *param = PTensor::from_parts(&shape, pv, pb, p)?;
            *m = PTensor::from_parts(&shape, mv, mb, p)?;
            *v = PTensor::from_parts(&shape, vv, vb, p)?;
        }
        Ok(())
    }

    fn check(&self, params: &[PTensor], grads: &[PTensor]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::shape(format!(
                "optimizer holds {} parameters, got {} values and {} gradients",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.m) {
            if p.shape() != m.shape() || g.shape() != m.shape() {
                return Err(Error::shape(format!(
                    "parameter {:?} / gradient {:?} vs state {:?}",
                    p.shape(),
                    g.shape(),
                    m.shape()
                )));
            }
            if p.precision() != self.precision || g.precision() != self.precision {
                return Err(Error::PrecisionMismatch {
                    expected: self.precision,
                    actual: if p.precision() != self.precision {
                        p.precision()
                    } else {
                        g.precision()
                    },
                });
            }
        }
        Ok(())
    }
}
