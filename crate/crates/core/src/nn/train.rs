use std::cell::RefCell;
use std::rc::Rc;

use crate::error::Result;
use crate::nn::adam::{significance_check, Adam, AdamConfig, SignificanceReport, Verdict};
use crate::nn::layers::Model;
use crate::ptensor::PTensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainerConfig {
    pub adam: AdamConfig,
    /// Skip the update when the loss or a gradient element has no exact bits.
    pub guard: bool,
    /// Carry tracked bits of parameters and moments across steps. When off,
    /// the stored state is declared exact after every applied update.
    pub carry_bits: bool,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            adam: AdamConfig::default(),
            guard: true,
            carry_bits: false,
        }
    }
}

/// One optimizer call, skipped or not.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub loss_bits: u8,
    pub min_grad_bits: u8,
    pub mean_grad_bits: f64,
    pub min_param_bits: u8,
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub record: StepRecord,
    pub report: SignificanceReport,
    /// Network output before the update.
    pub output: PTensor,
}

#[derive(Debug, Default)]
struct Probe {
    min: Option<u8>,
    sum: f64,
    count: usize,
}

pub struct Trainer {
    model: Model,
    adam: Adam,
    cfg: TrainerConfig,
    steps: u64,
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainerConfig) -> Result<Self> {
        let adam = Adam::new(cfg.adam, &model.param_values())?;
        Ok(Trainer {
            model,
            adam,
            cfg,
            steps: 0,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut Model {
        &mut self.model
    }

    pub fn optimizer(&self) -> &Adam {
        &self.adam
    }

    pub fn optimizer_mut(&mut self) -> &mut Adam {
        &mut self.adam
    }

    pub fn config(&self) -> TrainerConfig {
        self.cfg
    }

    /// Optimizer calls made so far, including skipped ones.
    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn set_steps(&mut self, steps: u64) {
        self.steps = steps;
    }

    /// Forward, backward, significance check and (possibly skipped) update.
    ///
    /// Gradient statistics are gathered by once-callable hooks on the
    /// parameter nodes, registered afresh for every pass.
    pub fn step(&mut self, x: PTensor, target: PTensor) -> Result<StepOutcome> {
        let probe = Rc::new(RefCell::new(Probe::default()));
        let param_nodes: Vec<_> = self.model.params().iter().map(|p| p.node).collect();
        for &node in &param_nodes {
            let probe = Rc::clone(&probe);
            self.model.graph_mut().register_hook(node, &[], move |grad, _| {
                let mut pr = probe.borrow_mut();
                for &b in grad.bits() {
                    pr.min = Some(pr.min.map_or(b, |m| m.min(b)));
                    pr.sum += f64::from(b);
                }
                pr.count += grad.numel();
                grad.bits().to_vec()
            })?;
        }
        let feed = self.model.feed(x, target, !self.cfg.carry_bits);
        let (loss_node, output_node) = (self.model.loss(), self.model.output());
        let graph = self.model.graph_mut();
        graph.forward(&feed)?;
        let loss = graph.value(loss_node).cloned().expect("forward computed the loss");
        let output = graph.value(output_node).cloned().expect("forward computed the output");
        let mut grads_by_node = graph.backward(loss_node)?;

        let p = self.model.precision();
        let mut params = self.model.param_values();
        let mut grads: Vec<PTensor> = param_nodes
            .iter()
            .zip(&params)
            .map(|(&n, v)| grads_by_node.remove(n).unwrap_or_else(|| PTensor::zeros(v.shape(), p)))
            .collect();
        let report = significance_check(&loss, &grads);
        let skipped = if self.cfg.guard {
            !self.adam.step(&mut params, &mut grads, &report)?
        } else {
            self.adam.apply(&mut params, &grads)?;
            false
        };
        let stored = if skipped { self.model.param_values() } else { params };
        let min_param_bits = stored.iter().filter_map(|t| t.min_bits()).min().unwrap_or(p.max_bits());
        if !skipped {
            let stored = if self.cfg.carry_bits {
                stored
            } else {
                self.adam.reanchor();
                stored
                    .into_iter()
                    .map(|t| {
                        let n = t.numel();
                        t.with_bits(vec![p.max_bits(); n])
                    })
                    .collect::<Result<Vec<_>>>()?
            };
            self.model.set_param_values(stored)?;
        }

        let pr = probe.borrow();
        let record = StepRecord {
            step: self.steps,
            loss: loss.values()[0],
            loss_bits: report.loss_bits,
            min_grad_bits: pr.min.unwrap_or(report.min_grad_bits),
            mean_grad_bits: if pr.count == 0 {
                f64::from(p.max_bits())
            } else {
                pr.sum / pr.count as f64
            },
            min_param_bits,
            skipped,
        };
        self.steps += 1;
        debug_assert!(!skipped || report.verdict == Verdict::SkipStep);
        Ok(StepOutcome { record, report, output })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::MatmulStrategy;
    use crate::nn::layers::{LayerSpec, LossKind};
    use crate::precision::Precision;

    fn tiny() -> Model {
        let layers = [
            LayerSpec::Linear { inputs: 1, outputs: 3 },
            LayerSpec::Relu,
            LayerSpec::Linear { inputs: 3, outputs: 1 },
        ];
        Model::build(&layers, LossKind::Mse, Precision::Single, MatmulStrategy::Rigorous, 1).unwrap()
    }

    fn data() -> (PTensor, PTensor) {
        let xs: Vec<f64> = (0..8).map(|i| -1.0 + i as f64 / 4.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 1.0 - f64::abs(*x)).collect();
        (
            PTensor::exact_literal(xs, &[8, 1], Precision::Single).unwrap(),
            PTensor::exact_literal(ys, &[8, 1], Precision::Single).unwrap(),
        )
    }

    #[test]
    fn training_reduces_loss() {
        let mut tr = Trainer::new(
            tiny(),
            TrainerConfig {
                guard: false,
                ..Default::default()
            },
        )
        .unwrap();
        let (x, y) = data();
        let first = tr.step(x.clone(), y.clone()).unwrap().record.loss;
        let mut last = first;
        for _ in 0..300 {
            last = tr.step(x.clone(), y.clone()).unwrap().record.loss;
        }
        assert!(last < first);
        assert_eq!(tr.steps(), 301);
        assert_eq!(tr.model().graph().live_temporaries(), 0);
        assert_eq!(tr.model().graph().pending_hooks(), 0);
    }

    #[test]
    fn records_are_consistent() {
        let mut tr = Trainer::new(tiny(), TrainerConfig::default()).unwrap();
        let (x, y) = data();
        for i in 0..20 {
            let out = tr.step(x.clone(), y.clone()).unwrap();
            assert_eq!(out.record.step, i);
            assert_eq!(out.record.skipped, out.report.verdict == Verdict::SkipStep);
            assert!(out.record.mean_grad_bits >= f64::from(out.record.min_grad_bits));
        }
        assert_eq!(tr.model().graph().hooks_fired(), 20 * 4);
    }
}
