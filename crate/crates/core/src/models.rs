//! Network constructors for the private sphere, the public sphere and the
//! privacy discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, Dense, Graph, Mlp, NodeId, ParamId, ParamStore};
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Shape of the released-representation layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunnelKind {
    /// `x W`, no bias or activation.
    Linear,
    /// `relu(x W + b)`.
    ReluAffine,
    /// `relu(x W + b)` with `W` pushed towards orthonormal columns.
    OrthonormalReluAffine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivateSphereSpec {
    pub input_dim: usize,
    pub funnel_dim: usize,
    pub kind: FunnelKind,
}

fn default_public_hidden() -> Vec<usize> {
    vec![500]
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PublicSphereSpec {
    #[serde(default = "default_public_hidden")]
    pub hidden: Vec<usize>,
    pub classes: usize,
    #[serde(default = "default_true")]
    pub softmax_head: bool,
    /// Inverted-dropout rate on hidden activations; 0 disables it.
    #[serde(default)]
    pub dropout: f64,
}

fn default_disc_hidden() -> Vec<usize> {
    vec![1024]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscriminatorSpec {
    #[serde(default = "default_disc_hidden")]
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    /// Must stay 0: the discriminator is never regularized.
    #[serde(default)]
    pub dropout: f64,
    /// Must stay false.
    #[serde(default)]
    pub batch_norm: bool,
}

impl PrivateSphereSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.funnel_dim == 0 {
            return Err(config("model.private", "dimensions must be positive"));
        }
        if self.funnel_dim > self.input_dim {
            return Err(config(
                "model.private.funnel_dim",
                format!("funnel dimension {} exceeds input dimension {}", self.funnel_dim, self.input_dim),
            ));
        }
        Ok(())
    }
}

impl PublicSphereSpec {
    pub fn new(hidden: &[usize], classes: usize) -> Self {
        Self {
            hidden: hidden.to_vec(),
            classes,
            softmax_head: true,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(config("model.public.classes", "at least two classes required"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(config("model.public.dropout", format!("rate {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

impl DiscriminatorSpec {
    pub fn new(hidden: &[usize], output_dim: usize) -> Self {
        Self {
            hidden: hidden.to_vec(),
            output_dim,
            dropout: 0.0,
            batch_norm: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dropout != 0.0 {
            return Err(config("model.discriminator.dropout", "the discriminator does not take dropout"));
        }
        if self.batch_norm {
            return Err(config("model.discriminator.batch_norm", "the discriminator does not take batch normalization"));
        }
        if self.output_dim == 0 {
            return Err(config("model.discriminator.output_dim", "must be positive"));
        }
        Ok(())
    }
}

fn config(key: &str, msg: impl Into<String>) -> Error {
    Error::Config {
        key: key.to_string(),
        msg: msg.into(),
    }
}

/// The released-representation map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrivateSphere {
    pub kind: FunnelKind,
    pub layer: Dense,
}

impl PrivateSphere {
    pub fn weight(&self) -> ParamId {
        self.layer.weight
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.layer.weight).chain(self.layer.bias).collect()
    }

    fn as_mlp(&self) -> Mlp {
        Mlp {
            layers: vec![self.layer.clone()],
        }
    }

    /// Representation node for `x`; returns `(z, weight node)`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<(NodeId, NodeId)> {
        let w = g.param(store, self.layer.weight)?;
        let z = self.as_mlp().forward(g, store, x, false)?.output;
        Ok((z, w))
    }

    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Tensor {
        self.as_mlp().apply(store, x)
    }
}

/// The utility predictor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PublicSphere {
    pub net: Mlp,
    pub softmax_head: bool,
    pub dropout: f64,
}

impl PublicSphere {
    pub fn params(&self) -> Vec<ParamId> {
        self.net.params()
    }

    /// Logits node; dropout is applied when an RNG is supplied.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        z: NodeId,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<NodeId> {
        let drop = rng.filter(|_| self.dropout > 0.0).map(|r| (self.dropout, r));
        Ok(self.net.forward_dropout(g, store, z, false, drop)?.output)
    }

    pub fn logits(&self, store: &ParamStore, z: &Tensor) -> Tensor {
        self.net.apply(store, z)
    }

    /// Row-wise softmax of the logits.
    pub fn probabilities(&self, store: &ParamStore, z: &Tensor) -> Tensor {
        softmax_rows(&self.logits(store, z))
    }

    pub fn predict(&self, store: &ParamStore, z: &Tensor) -> Vec<usize> {
        self.logits(store, z).argmax_rows()
    }
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let c = logits.cols();
    for i in 0..logits.rows() {
        let row = logits.row(i);
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for j in 0..c {
            out.set(i, j, e[j] / s);
        }
    }
    out
}

/// All networks of one training run and their parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Networks {
    pub store: ParamStore,
    pub private: PrivateSphere,
    pub public: PublicSphere,
    pub discriminator: Option<Mlp>,
}

impl Networks {
    /// Builds fresh networks with seeded Glorot-uniform weights and zero
    /// biases.
    pub fn build(
        private: &PrivateSphereSpec,
        public: &PublicSphereSpec,
        discriminator: Option<&DiscriminatorSpec>,
        seed: u64,
    ) -> Result<Self> {
        private.validate()?;
        public.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (bias, act) = match private.kind {
            FunnelKind::Linear => (false, Activation::Identity),
            FunnelKind::ReluAffine | FunnelKind::OrthonormalReluAffine => (true, Activation::Relu),
        };
        let layer = Dense::init(&mut store, "private", private.input_dim, private.funnel_dim, bias, act, &mut rng);
        let mut sizes = vec![private.funnel_dim];
        sizes.extend(&public.hidden);
        sizes.push(public.classes);
        let net = Mlp::init(&mut store, "public", &sizes, Activation::Identity, &mut rng)?;
        let discriminator = match discriminator {
            Some(spec) => {
                spec.validate()?;
                let mut sizes = vec![private.funnel_dim];
                sizes.extend(&spec.hidden);
                sizes.push(spec.output_dim);
                Some(Mlp::init(&mut store, "discriminator", &sizes, Activation::Identity, &mut rng)?)
            }
            None => None,
        };
        Ok(Self {
            store,
            private: PrivateSphere {
                kind: private.kind,
                layer,
            },
            public: PublicSphere {
                net,
                softmax_head: public.softmax_head,
                dropout: public.dropout,
            },
            discriminator,
        })
    }

    /// Released representation of `x`.
    pub fn represent(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.store.tensor(self.private.weight()).rows();
        if x.cols() != d {
            return Err(contract(format!("private sphere expects {d} features, got {}", x.cols())));
        }
        Ok(self.private.apply(&self.store, x))
    }

    /// Utility predictions for raw inputs.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.public.predict(&self.store, &self.represent(x)?))
    }

    /// `|W^T W - I|_F^2` of the funnel weights.
    pub fn orthonormality_error(&self) -> f64 {
        let w = self.store.tensor(self.private.weight());
        let gram = crate::linalg::matmul(w, true, w, false);
        gram.sub(&Tensor::identity(w.cols())).frobenius_sq()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn specs() -> (PrivateSphereSpec, PublicSphereSpec, DiscriminatorSpec) {
        (
            PrivateSphereSpec {
                input_dim: 4,
                funnel_dim: 2,
                kind: FunnelKind::ReluAffine,
            },
            PublicSphereSpec::new(&[6], 3),
            DiscriminatorSpec::new(&[5], 2),
        )
    }

    #[test]
    fn shapes_and_zero_input() {
        let (p, u, d) = specs();
        let nets = Networks::build(&p, &u, Some(&d), 1).unwrap();
        let z = nets.represent(&Tensor::zeros(7, 4)).unwrap();
        assert_eq!(z, Tensor::zeros(7, 2));
        let probs = nets.public.probabilities(&nets.store, &z);
        for i in 0..7 {
            assert!((probs.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_weights() {
        let (p, u, d) = specs();
        let a = Networks::build(&p, &u, Some(&d), 9).unwrap();
        let b = Networks::build(&p, &u, Some(&d), 9).unwrap();
        assert_eq!(a, b);
        let c = Networks::build(&p, &u, Some(&d), 10).unwrap();
        assert_ne!(a.store, c.store);
    }

    #[test]
    fn discriminator_regularizers_rejected() {
        let mut d = DiscriminatorSpec::new(&[4], 2);
        d.dropout = 0.5;
        assert!(matches!(d.validate(), Err(Error::Config { .. })));
        let mut d = DiscriminatorSpec::new(&[4], 2);
        d.batch_norm = true;
        assert!(matches!(d.validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn funnel_wider_than_input_rejected() {
        let p = PrivateSphereSpec {
            input_dim: 2,
            funnel_dim: 3,
            kind: FunnelKind::Linear,
        };
        assert!(p.validate().is_err());
    }
}
