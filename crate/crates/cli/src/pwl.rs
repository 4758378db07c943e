//! Piecewise-linear regression experiment.

use std::path::Path;

use bittrace_core::nn::{LayerSpec, LossKind, Model, StepRecord, Trainer, TrainerConfig};
use bittrace_core::{MatmulStrategy, PTensor, Precision};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::error::{CliError, Result};
use crate::trace::TrainTrace;

#[derive(Clone, Debug, PartialEq)]
pub struct PwlConfig {
    pub breaks: usize,
    pub neurons: usize,
    pub grid_n: usize,
    pub seed: u64,
    pub steps: u64,
    pub lr: f64,
    pub guard: bool,
    pub precision: Precision,
}

impl Default for PwlConfig {
    fn default() -> Self {
        PwlConfig {
            breaks: 3,
            neurons: 7,
            grid_n: 100,
            seed: 0,
            steps: 200_000,
            lr: 1e-3,
            guard: false,
            precision: Precision::Single,
        }
    }
}

impl PwlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.breaks < 1 {
            return Err(CliError::Usage("--breaks must be at least 1".into()));
        }
        if self.neurons < 1 {
            return Err(CliError::Usage("--neurons must be at least 1".into()));
        }
        if self.grid_n < 2 {
            return Err(CliError::Usage("--grid must be at least 2".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(CliError::Usage("--lr must be positive".into()));
        }
        Ok(())
    }
}

/// A continuous piecewise-linear function on [−1, 1].
#[derive(Clone, Debug, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PwlSpec {
    /// Interior breakpoints, strictly increasing inside (−1, 1).
    pub breaks: Vec<f64>,
    /// One slope per segment (`breaks.len() + 1`).
    pub slopes: Vec<f64>,
    /// Value at x = −1.
    pub left_value: f64,
}

impl PwlSpec {
    pub fn random(breaks: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inner = Uniform::new(-0.9, 0.9);
        let mut bs: Vec<f64> = (0..breaks).map(|_| inner.sample(&mut rng)).collect();
        bs.sort_by(f64::total_cmp);
        let slope = Uniform::new_inclusive(-2.0, 2.0);
        let slopes = (0..=breaks).map(|_| slope.sample(&mut rng)).collect();
        let left_value = Uniform::new_inclusive(-1.0, 1.0).sample(&mut rng);
        PwlSpec {
            breaks: bs,
            slopes,
            left_value,
        }
    }

    pub fn parse(text: &str) -> std::result::Result<Self, String> {
        let spec: PwlSpec = toml::from_str(text).map_err(|e| e.to_string())?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.breaks.is_empty() {
            return Err("at least one break is required".into());
        }
        if self.slopes.len() != self.breaks.len() + 1 {
            return Err(format!(
                "{} breaks need {} slopes, got {}",
                self.breaks.len(),
                self.breaks.len() + 1,
                self.slopes.len()
            ));
        }
        let inside = self.breaks.iter().all(|b| *b > -1.0 && *b < 1.0);
        let increasing = self.breaks.windows(2).all(|w| w[0] < w[1]);
        if !inside || !increasing {
            return Err("breaks must increase strictly inside (-1, 1)".into());
        }
        let finite = self.slopes.iter().chain([&self.left_value]).all(|v| v.is_finite());
        if !finite {
            return Err("slopes and left_value must be finite".into());
        }
        Ok(())
    }

    pub fn eval(&self, x: f64) -> f64 {
        let mut y = self.left_value;
        let mut from = -1.0;
        for (i, &b) in self.breaks.iter().enumerate() {
            if x <= b {
                return y + self.slopes[i] * (x - from);
            }
            y += self.slopes[i] * (b - from);
            from = b;
        }
        y + self.slopes[self.breaks.len()] * (x - from)
    }
}

#[derive(Clone, Debug)]
pub struct PwlData {
    /// Grid arguments, shape `[grid_n, 1]`.
    pub x: PTensor,
    /// Function values, shape `[grid_n, 1]`.
    pub y: PTensor,
}

/// Samples `spec` on a uniform grid. The rounded samples are the exact data.
pub fn sample(spec: &PwlSpec, grid_n: usize, p: Precision) -> Result<PwlData> {
    if grid_n < 2 {
        return Err(CliError::Usage("grid needs at least 2 points".into()));
    }
    let xs: Vec<f64> = (0..grid_n)
        .map(|i| p.round(-1.0 + 2.0 * i as f64 / (grid_n - 1) as f64))
        .collect();
    let ys: Vec<f64> = xs.iter().map(|&x| p.round(spec.eval(x))).collect();
    Ok(PwlData {
        x: PTensor::exact_literal(xs, &[grid_n, 1], p)?,
        y: PTensor::exact_literal(ys, &[grid_n, 1], p)?,
    })
}

pub fn gen_pwl(cfg: &PwlConfig) -> Result<(PwlSpec, PwlData)> {
    cfg.validate()?;
    let spec = PwlSpec::random(cfg.breaks, cfg.seed);
    let data = sample(&spec, cfg.grid_n, cfg.precision)?;
    Ok((spec, data))
}

pub fn load_spec(path: &Path) -> Result<PwlSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    PwlSpec::parse(&text).map_err(|m| CliError::format(path, m))
}

pub fn build_model(cfg: &PwlConfig) -> Result<Model> {
    let layers = [
        LayerSpec::Linear {
            inputs: 1,
            outputs: cfg.neurons,
        },
        LayerSpec::Relu,
        LayerSpec::Linear {
            inputs: cfg.neurons,
            outputs: 1,
        },
    ];
    Ok(Model::build(
        &layers,
        LossKind::Mse,
        cfg.precision,
        MatmulStrategy::Rigorous,
        cfg.seed,
    )?)
}

pub fn trainer(cfg: &PwlConfig) -> Result<Trainer> {
    let mut tc = TrainerConfig {
        guard: cfg.guard,
        ..TrainerConfig::default()
    };
    tc.adam.lr = cfg.lr;
    Ok(Trainer::new(build_model(cfg)?, tc)?)
}

/// Full-batch training of a one-hidden-layer ReLU network on `data`;
/// `on_step` sees every record as it is produced.
pub fn run_pwl(cfg: &PwlConfig, data: &PwlData, mut on_step: impl FnMut(&StepRecord)) -> Result<TrainTrace> {
    cfg.validate()?;
    let mut tr = trainer(cfg)?;
    let mut trace = TrainTrace::default();
    for _ in 0..cfg.steps {
        let out = tr.step(data.x.clone(), data.y.clone())?;
        on_step(&out.record);
        trace.push(out.record);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tent_from_spec_file() {
        let spec = PwlSpec::parse("breaks = [0.0]\nslopes = [1.0, -1.0]\nleft_value = 0.0\n").unwrap();
        let d = sample(&spec, 5, Precision::Single).unwrap();
        assert_eq!(d.x.values(), &[-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(d.y.values(), &[0.0, 0.5, 1.0, 0.5, 0.0]);
        assert_eq!(d.y.min_bits(), Some(24));
    }

    #[test]
    fn rejects_bad_configs() {
        let cfg = PwlConfig {
            breaks: 0,
            ..Default::default()
        };
        assert!(matches!(gen_pwl(&cfg), Err(CliError::Usage(_))));
        assert!(PwlSpec::parse("breaks = [0.5, 0.1]\nslopes = [1, 2, 3]\nleft_value = 0\n").is_err());
        assert!(PwlSpec::parse("breaks = [0.5]\nslopes = [1.0]\nleft_value = 0.0\n").is_err());
    }

    #[test]
    fn seeded_generation_is_deterministic() {
        let cfg = PwlConfig::default();
        let (s1, d1) = gen_pwl(&cfg).unwrap();
        let (s2, d2) = gen_pwl(&cfg).unwrap();
        assert_eq!(s1, s2);
        assert!(d1.y.bitwise_eq(&d2.y));
        let (s3, _) = gen_pwl(&PwlConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(s1, s3);
    }

    #[test]
    fn random_spec_is_continuous() {
        let s = PwlSpec::random(3, 7);
        for &b in &s.breaks {
            let (l, r) = (s.eval(b - 1e-12), s.eval(b + 1e-12));
            assert!((l - r).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_steps_give_empty_trace() {
        let cfg = PwlConfig {
            steps: 0,
            ..Default::default()
        };
        let (_, data) = gen_pwl(&cfg).unwrap();
        assert!(run_pwl(&cfg, &data, |_| {}).unwrap().is_empty());
    }
}
