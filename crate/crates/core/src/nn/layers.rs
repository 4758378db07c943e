use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Feed, Graph, NodeId};
use crate::error::{Error, Result};
use crate::linalg::MatmulStrategy;
use crate::precision::Precision;
use crate::ptensor::PTensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Relu,
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kh: usize,
        kw: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    /// Shapes of the weight and bias, if the layer has parameters.
    pub fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        match *self {
            LayerSpec::Linear { inputs, outputs } => Some((vec![outputs, inputs], vec![outputs])),
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kh,
                kw,
                ..
            } => Some((vec![out_channels, in_channels, kh, kw], vec![out_channels])),
            LayerSpec::Relu | LayerSpec::Flatten => None,
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Linear { inputs, .. } => inputs,
            LayerSpec::Conv2d {
                in_channels, kh, kw, ..
            } => in_channels * kh * kw,
            LayerSpec::Relu | LayerSpec::Flatten => 0,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LayerSpec::Linear { inputs, outputs } => inputs > 0 && outputs > 0,
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kh,
                kw,
                stride,
            } => in_channels > 0 && out_channels > 0 && kh > 0 && kw > 0 && stride > 0,
            LayerSpec::Relu | LayerSpec::Flatten => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidValue(format!("degenerate layer {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    /// Targets are class indices, one per row.
    CrossEntropy,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub node: NodeId,
    pub value: PTensor,
}

/// A sequential network compiled into a graph ending in its loss.
#[derive(Debug)]
pub struct Model {
    graph: Graph,
    input: NodeId,
    target: NodeId,
    output: NodeId,
    loss: NodeId,
    params: Vec<Param>,
}

impl Model {
    /// Builds the graph and draws parameters uniformly from ±1/√fan_in.
    pub fn build(
        layers: &[LayerSpec],
        loss: LossKind,
        precision: Precision,
        strategy: MatmulStrategy,
        seed: u64,
    ) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut g = Graph::new(precision);
        let input = g.input("x");
        let mut params = Vec::new();
        let mut h = input;
        for (i, layer) in layers.iter().enumerate() {
            layer.validate()?;
            let mut param = |g: &mut Graph, name: String, shape: &[usize]| {
                let bound = 1.0 / (layer.fan_in() as f64).sqrt();
                let dist = Uniform::new_inclusive(-bound, bound);
                let n: usize = shape.iter().product();
                let values = (0..n).map(|_| precision.round(dist.sample(&mut rng))).collect();
                let value = PTensor::exact_literal(values, shape, precision)?;
                let node = g.parameter(&name);
                params.push(Param { name, node, value });
                Ok::<_, Error>(node)
            };
            h = match *layer {
                LayerSpec::Linear { .. } => {
                    let (ws, bs) = layer.param_shapes().expect("linear has parameters");
                    let w = param(&mut g, format!("l{i}.weight"), &ws)?;
                    let b = param(&mut g, format!("l{i}.bias"), &bs)?;
                    let wt = g.transpose(w);
                    let y = g.matmul(h, wt, strategy);
                    g.add(y, b)
                }
                LayerSpec::Conv2d { stride, .. } => {
                    let (ks, bs) = layer.param_shapes().expect("conv has parameters");
                    let k = param(&mut g, format!("l{i}.kernel"), &ks)?;
                    let b = param(&mut g, format!("l{i}.bias"), &bs)?;
                    g.conv2d(h, k, b, stride)
                }
                LayerSpec::Relu => g.relu(h),
                LayerSpec::Flatten => g.flatten(h),
            };
        }
        let output = h;
        let target = g.input("target");
        let loss = match loss {
            LossKind::Mse => g.mse_loss(output, target),
            LossKind::CrossEntropy => g.cross_entropy(output, target),
        };
        Ok(Model {
            graph: g,
            input,
            target,
            output,
            loss,
            params,
        })
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut Graph {
        &mut self.graph
    }

    pub fn precision(&self) -> Precision {
        self.graph.precision()
    }

    pub fn input(&self) -> NodeId {
        self.input
    }

    pub fn target(&self) -> NodeId {
        self.target
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn loss(&self) -> NodeId {
        self.loss
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_values(&self) -> Vec<PTensor> {
        self.params.iter().map(|p| p.value.clone()).collect()
    }

    /// Replaces all parameter values; shapes and precision must be unchanged.
    pub fn set_param_values(&mut self, values: Vec<PTensor>) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::shape(format!(
                "{} parameter tensors for {} parameters",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter().zip(&values) {
            if p.value.shape() != v.shape() || p.value.precision() != v.precision() {
                return Err(Error::shape(format!("parameter {} changed shape or precision", p.name)));
            }
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            p.value = v;
        }
        Ok(())
    }

    /// Feed for one pass. With `exact_params` the stored parameter values are
    /// declared exact, otherwise they carry their tracked bits.
    pub fn feed(&self, x: PTensor, target: PTensor, exact_params: bool) -> Feed {
        let mut feed = Feed::new();
        feed.insert(self.input, x);
        feed.insert(self.target, target);
        for p in &self.params {
            let v = if exact_params {
                let e = p.value.precision().max_bits();
                p.value
                    .clone()
                    .with_bits(vec![e; p.value.numel()])
                    .expect("same element count")
            } else {
                p.value.clone()
            };
            feed.insert(p.node, v);
        }
        feed
    }
}
