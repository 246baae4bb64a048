use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::{contract, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
}

/// Affine layer `x W + b` followed by an activation. `W` is `in x out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub activation: Activation,
}

impl Dense {
    /// Glorot-uniform weights in `±sqrt(6 / (in + out))`, zero bias.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        activation: Activation,
        rng: &mut R,
    ) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-limit..=limit))
            .collect();
        let w = Tensor::from_vec(fan_in, fan_out, data).expect("sized buffer");
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(1, fan_out)));
        Self {
            weight,
            bias,
            activation,
        }
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        store.tensor(self.weight).cols()
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        store.tensor(self.weight).rows()
    }
}

/// Feed-forward stack of dense layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

/// Nodes recorded by a forward pass, used to rebuild input gradients.
#[derive(Clone, Debug)]
pub struct MlpTrace {
    pub output: NodeId,
    weights: Vec<NodeId>,
    pre_activations: Vec<NodeId>,
    dropout: bool,
}

impl Mlp {
    /// Layers `sizes[0] -> sizes[1] -> ...`; hidden layers use ReLU, the
    /// last layer uses `output`.
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        sizes: &[usize],
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(contract(format!("network `{name}` needs at least two non-zero layer sizes, got {sizes:?}")));
        }
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(k, w)| {
                let act = if k == last { output } else { Activation::Relu };
                Dense::init(store, &format!("{name}.{k}"), w[0], w[1], true, act, rng)
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_dim(&self, store: &ParamStore) -> usize {
        self.layers[0].input_dim(store)
    }

    pub fn output_dim(&self, store: &ParamStore) -> usize {
        self.layers.last().map_or(0, |l| l.output_dim(store))
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| std::iter::once(l.weight).chain(l.bias))
            .collect()
    }

    /// Plain forward pass without recording a graph.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        let mut h = x.clone();
        for layer in &self.layers {
            let mut a = h.matmul(store.tensor(layer.weight));
            if let Some(b) = layer.bias {
                let bias = store.tensor(b);
                let c = a.cols();
                for (k, v) in a.data_mut().iter_mut().enumerate() {
                    *v += bias.data()[k % c];
                }
            }
            h = match layer.activation {
                Activation::Identity => a,
                Activation::Relu => a.map(|v| if v > 0.0 { v } else { 0.0 }),
            };
        }
        h
    }

    /// Forward pass. With `frozen` the weights enter the graph as constants.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId, frozen: bool) -> Result<MlpTrace> {
        self.forward_dropout::<rand_chacha::ChaCha8Rng>(g, store, x, frozen, None)
    }

    /// Forward pass with inverted dropout after every hidden activation.
    pub fn forward_dropout<R: Rng>(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        frozen: bool,
        mut dropout: Option<(f64, &mut R)>,
    ) -> Result<MlpTrace> {
        let mut h = x;
        let mut weights = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut used_dropout = false;
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let w = if frozen {
                g.frozen_param(store, layer.weight)?
            } else {
                g.param(store, layer.weight)?
            };
            let mut a = g.matmul(h, w)?;
            if let Some(b) = layer.bias {
                let b = if frozen { g.frozen_param(store, b)? } else { g.param(store, b)? };
                a = g.add_row(a, b)?;
            }
            weights.push(w);
            pre_activations.push(a);
            h = match layer.activation {
                Activation::Identity => a,
                Activation::Relu => g.relu(a)?,
            };
            if k < last {
                if let Some((rate, rng)) = dropout.as_mut() {
                    if *rate > 0.0 {
                        let (r, c) = g.shape(h);
                        let keep = 1.0 - *rate;
                        let mask = (0..r * c)
                            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                            .collect();
                        let m = g.constant(Tensor::from_vec(r, c, mask)?)?;
                        h = g.mul(h, m)?;
                        used_dropout = true;
                    }
                }
            }
        }
        Ok(MlpTrace {
            output: h,
            weights,
            pre_activations,
            dropout: used_dropout,
        })
    }

    /// Gradient of `sum_ij selector_ij * output_ij` with respect to the
    /// network input, built row by row from transposed weights and ReLU
    /// masks. Masks are piecewise constant, so the result is differentiable
    /// in the weights with first-order reverse mode. `selector` has the
    /// output shape; the returned node has the input shape.
    pub fn input_gradient(&self, g: &mut Graph, trace: &MlpTrace, selector: NodeId) -> Result<NodeId> {
        if trace.dropout {
            return Err(contract("input gradient of a network with dropout is not supported"));
        }
        let mut grad = selector;
        for (k, layer) in self.layers.iter().enumerate().rev() {
            if layer.activation == Activation::Relu {
                let mask = g.step(trace.pre_activations[k])?;
                grad = g.mul(grad, mask)?;
            }
            grad = g.matmul_t(grad, false, trace.weights[k], true)?;
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_input_gradient_is_weight() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::matrix(3, 1, &[0.2, -0.5, 1.5]));
        let mlp = Mlp {
            layers: vec![Dense {
                weight: w,
                bias: None,
                activation: Activation::Identity,
            }],
        };
        let mut g = Graph::new();
        let z = g.constant(Tensor::matrix(2, 3, &[1., 2., 3., -1., 0., 4.])).unwrap();
        let trace = mlp.forward(&mut g, &store, z, false).unwrap();
        let sel = g.constant(Tensor::full(2, 1, 1.0)).unwrap();
        let grad = mlp.input_gradient(&mut g, &trace, sel).unwrap();
        for i in 0..2 {
            assert_eq!(g.value(grad).row(i), &[0.2, -0.5, 1.5]);
        }
    }

    #[test]
    fn dead_unit_contributes_nothing() {
        let mut store = ParamStore::new();
        let w1 = store.add("w1", Tensor::matrix(2, 2, &[1., 0., 0., -1.]));
        let w2 = store.add("w2", Tensor::matrix(2, 1, &[3., 5.]));
        let mlp = Mlp {
            layers: vec![
                Dense { weight: w1, bias: None, activation: Activation::Relu },
                Dense { weight: w2, bias: None, activation: Activation::Identity },
            ],
        };
        let mut g = Graph::new();
        // second hidden pre-activation is -1 < 0
        let z = g.constant(Tensor::matrix(1, 2, &[1., 1.])).unwrap();
        let trace = mlp.forward(&mut g, &store, z, false).unwrap();
        let sel = g.constant(Tensor::scalar(1.0)).unwrap();
        let grad = mlp.input_gradient(&mut g, &trace, sel).unwrap();
        assert_eq!(g.value(grad).data(), &[3.0, 0.0]);
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let build = || {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            Mlp::init(&mut store, "net", &[4, 8, 2], Activation::Identity, &mut rng).unwrap();
            store
        };
        assert_eq!(build(), build());
    }
}
