//! Small convolutional classifier trained with masked-digit batch logs.

use std::io::Write;

use bittrace_core::nn::{LayerSpec, LossKind, Model, Trainer, TrainerConfig};
use bittrace_core::{MatmulStrategy, PTensor, Precision};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};
use crate::idx::{Dataset, IdxArray};
use crate::mask::mask_digits;
use crate::trace::TrainTrace;

pub const SYNTHETIC_SIDE: usize = 8;
pub const SYNTHETIC_CLASSES: usize = 3;
const HIDDEN: usize = 32;
const CONV_CHANNELS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct MnistConfig {
    pub subset: usize,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
    pub precision: Precision,
    pub guard: bool,
}

impl Default for MnistConfig {
    fn default() -> Self {
        MnistConfig {
            subset: 600,
            epochs: 1,
            batch: 60,
            seed: 0,
            precision: Precision::Single,
            guard: true,
        }
    }
}

/// Three classes of 8×8 images, each a bright blob at a class-specific
/// position over uniform noise.
pub fn synthetic(n: usize, seed: u64) -> Dataset {
    let centers = [(2.0, 2.0), (2.0, 5.0), (5.5, 3.5)];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Uniform::new_inclusive(0.0, 60.0);
    let jitter = Uniform::new_inclusive(-0.75, 0.75);
    let class = Uniform::new(0, SYNTHETIC_CLASSES);
    let side = SYNTHETIC_SIDE;
    let mut pixels = Vec::with_capacity(n * side * side);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let c = class.sample(&mut rng);
        let (cy, cx) = centers[c];
        let (cy, cx) = (cy + jitter.sample(&mut rng), cx + jitter.sample(&mut rng));
        for i in 0..side {
            for j in 0..side {
                let d2 = (i as f64 - cy).powi(2) + (j as f64 - cx).powi(2);
                let v = 195.0 * (-d2 / 2.0).exp() + noise.sample(&mut rng);
                pixels.push(v.round().clamp(0.0, 255.0) as u8);
            }
        }
        labels.push(c as u8);
    }
    let images = IdxArray {
        dims: vec![n, side, side],
        data: pixels,
    };
    let labels = IdxArray {
        dims: vec![n],
        data: labels,
    };
    Dataset::new(images, labels, SYNTHETIC_CLASSES).expect("generated labels are in range")
}

/// Conv 1→4 (3×3) → ReLU → Flatten → Linear(→32) → ReLU → Linear(→classes).
pub fn layers(rows: usize, cols: usize, classes: usize) -> Result<Vec<LayerSpec>> {
    if rows < 3 || cols < 3 {
        return Err(CliError::Usage(format!(
            "images of {rows}x{cols} are smaller than the 3x3 kernel"
        )));
    }
    Ok(vec![
        LayerSpec::Conv2d {
            in_channels: 1,
            out_channels: CONV_CHANNELS,
            kh: 3,
            kw: 3,
            stride: 1,
        },
        LayerSpec::Relu,
        LayerSpec::Flatten,
        LayerSpec::Linear {
            inputs: CONV_CHANNELS * (rows - 2) * (cols - 2),
            outputs: HIDDEN,
        },
        LayerSpec::Relu,
        LayerSpec::Linear {
            inputs: HIDDEN,
            outputs: classes,
        },
    ])
}

pub fn trainer(cfg: &MnistConfig, data: &Dataset) -> Result<Trainer> {
    let (r, c) = data.side();
    let model = Model::build(
        &layers(r, c, data.classes)?,
        LossKind::CrossEntropy,
        cfg.precision,
        MatmulStrategy::Rigorous,
        cfg.seed,
    )?;
    let tc = TrainerConfig {
        guard: cfg.guard,
        ..TrainerConfig::default()
    };
    Ok(Trainer::new(model, tc)?)
}

/// Row-wise argmax (first maximum wins) compared with the labels.
pub fn correct_count(logits: &PTensor, labels: &PTensor) -> usize {
    let classes = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .values()
        .chunks(classes)
        .zip(labels.values())
        .filter(|(row, &label)| {
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (i, &v)| if v > row[b] { i } else { b });
            best as f64 == label
        })
        .count()
}

pub struct MnistOutcome {
    pub trace: TrainTrace,
    pub correct: usize,
    pub seen: usize,
    pub trainer: Trainer,
}

/// Trains for `epochs` passes over the first `subset` samples in fixed
/// order, writing `batch_num=N <loss> <correct>/<batch>` per batch. The
/// batch counter runs across epochs starting at 0.
pub fn run_mnist(cfg: &MnistConfig, data: &Dataset, log: &mut dyn Write) -> Result<MnistOutcome> {
    if cfg.batch == 0 {
        return Err(CliError::Usage("--batch must be positive".into()));
    }
    let mut data = data.clone();
    data.truncate(cfg.subset);
    if data.is_empty() {
        return Err(CliError::Usage("no samples to train on".into()));
    }
    let mut tr = trainer(cfg, &data)?;
    let mut trace = TrainTrace::default();
    let (mut correct, mut seen) = (0, 0);
    let mut batch_num = 0u64;
    for _ in 0..cfg.epochs {
        let mut start = 0;
        while start < data.len() {
            let end = (start + cfg.batch).min(data.len());
            let (x, y) = data.batch(start..end, cfg.precision)?;
            let out = tr.step(x, y.clone())?;
            let ok = correct_count(&out.output, &y);
            let masked = mask_digits(out.record.loss, out.record.loss_bits, cfg.precision);
            writeln!(log, "batch_num={batch_num} {masked} {ok}/{}", end - start)
                .map_err(|e| CliError::io("<log>", e))?;
            correct += ok;
            seen += end - start;
            trace.push(out.record);
            batch_num += 1;
            start = end;
        }
    }
    Ok(MnistOutcome {
        trace,
        correct,
        seen,
        trainer: tr,
    })
}
