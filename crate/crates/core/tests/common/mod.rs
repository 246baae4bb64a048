//! Shared builders for the integration tests.
#![allow(dead_code)]

use privsphere::autodiff::{Graph, NodeId, ParamId, ParamStore};
use privsphere::kernel::{KernelSpec, PreparedKernel};
use privsphere::models::{DiscriminatorSpec, FunnelKind, Networks, PrivateSphereSpec, PublicSphereSpec};
use privsphere::objectives::{
    disc_loss_lsdn, disc_loss_wdn, orthonormality_penalty, privacy_loss_kdi, privacy_loss_lsdn, privacy_loss_mmd,
    privacy_loss_wdn, private_sphere_loss, utility_loss,
};
use privsphere::tensor::one_hot;
use privsphere::{Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::from_vec(rows, cols, data).unwrap()
}

/// Balanced labels `0..classes` in random order.
pub fn balanced_labels(n: usize, classes: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

/// A small random network family with data, sized for finite differences.
pub struct GradientCase {
    pub nets: Networks,
    pub x: Tensor,
    pub y: Tensor,
    pub p: Tensor,
}

pub fn gradient_case(seed: u64, funnel: FunnelKind) -> GradientCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.random_range(8..=32);
    let d = rng.random_range(2..=8);
    let q = rng.random_range(2..=d);
    let classes = rng.random_range(2..=3);
    let sensitive = rng.random_range(2..=4);
    let private = PrivateSphereSpec {
        input_dim: d,
        funnel_dim: q,
        kind: funnel,
    };
    let public = PublicSphereSpec::new(&[rng.random_range(3..=6)], classes);
    let disc = DiscriminatorSpec {
        hidden: vec![rng.random_range(3..=6)],
        output_dim: sensitive,
        dropout: 0.0,
        batch_norm: false,
    };
    let mut nets = Networks::build(&private, &public, Some(&disc), seed).unwrap();
    let ids: Vec<ParamId> = nets.store.iter().map(|p| p.id).collect();
    for id in ids {
        let len = nets.store.tensor(id).len();
        let values: Vec<f64> = nets
            .store
            .tensor(id)
            .data()
            .iter()
            .map(|v| v + 0.1 * rng.sample::<f64, _>(StandardNormal))
            .collect();
        assert_eq!(values.len(), len);
        nets.store.set_values(id, &values).unwrap();
    }
    let x = gaussian(n, d, &mut rng);
    let y = one_hot(&balanced_labels(n, classes, &mut rng), classes);
    let p = one_hot(&balanced_labels(n, sensitive, &mut rng), sensitive);
    GradientCase { nets, x, y, p }
}

type Builder = Box<dyn Fn(&GradientCase, &ParamStore) -> Result<(Graph, NodeId)>>;

/// Which parameter groups a loss is differentiated against.
#[derive(Clone, Copy, PartialEq, Eq)]
pub enum Trains {
    Private,
    PrivateAndPublic,
    Discriminator,
}

fn released(case: &GradientCase, g: &mut Graph, store: &ParamStore) -> Result<(NodeId, NodeId)> {
    let x = g.input(case.x.clone())?;
    case.nets.private.forward(g, store, x)
}

fn released_constant(case: &GradientCase, g: &mut Graph, store: &ParamStore) -> Result<NodeId> {
    g.constant(case.nets.private.apply(store, &case.x))
}

/// Every loss of the privacy objectives, with the parameters it trains.
pub fn loss_builders() -> Vec<(&'static str, Trains, Builder)> {
    let kernel_loss = |spec: KernelSpec, kdi: bool| -> Builder {
        Box::new(move |case, store| {
            let mut g = Graph::new();
            let (z, _) = released(case, &mut g, store)?;
            let prepared: PreparedKernel = spec.prepare(g.shape(z).1)?;
            let root = if kdi {
                privacy_loss_kdi(&mut g, z, &case.p, &prepared, 1e-2)?
            } else {
                privacy_loss_mmd(&mut g, z, &case.p, &prepared)?
            };
            Ok((g, root))
        })
    };
    vec![
        (
            "utility_cross_entropy",
            Trains::PrivateAndPublic,
            Box::new(|case, store| {
                let mut g = Graph::new();
                let (z, _) = released(case, &mut g, store)?;
                let logits = case.nets.public.forward(&mut g, store, z, None)?;
                let root = utility_loss(&mut g, logits, &case.y)?;
                Ok((g, root))
            }),
        ),
        ("mmd_gaussian_mixture", Trains::Private, kernel_loss(KernelSpec::default(), false)),
        ("mmd_random_fourier", Trains::Private, kernel_loss(KernelSpec::random_fourier(&[1.0, 4.0], 40, 3), false)),
        ("kdi_gaussian_mixture", Trains::Private, kernel_loss(KernelSpec::default(), true)),
        ("kdi_random_fourier", Trains::Private, kernel_loss(KernelSpec::random_fourier(&[1.0, 4.0], 40, 3), true)),
        (
            "wdn_privacy",
            Trains::Private,
            Box::new(|case, store| {
                let mut g = Graph::new();
                let (z, _) = released(case, &mut g, store)?;
                let disc = case.nets.discriminator.as_ref().unwrap();
                let root = privacy_loss_wdn(&mut g, z, &case.p, disc, store)?;
                Ok((g, root))
            }),
        ),
        (
            "lsdn_privacy",
            Trains::Private,
            Box::new(|case, store| {
                let mut g = Graph::new();
                let (z, _) = released(case, &mut g, store)?;
                let disc = case.nets.discriminator.as_ref().unwrap();
                let root = privacy_loss_lsdn(&mut g, z, &case.p, disc, store)?;
                Ok((g, root))
            }),
        ),
        (
            "wdn_discriminator_with_penalty",
            Trains::Discriminator,
            Box::new(|case, store| {
                let mut g = Graph::new();
                let z = released_constant(case, &mut g, store)?;
                let disc = case.nets.discriminator.as_ref().unwrap();
                let parts = disc_loss_wdn(&mut g, z, &case.p, disc, store, 10.0)?;
                Ok((g, parts.total))
            }),
        ),
        (
            "lsdn_discriminator",
            Trains::Discriminator,
            Box::new(|case, store| {
                let mut g = Graph::new();
                let z = released_constant(case, &mut g, store)?;
                let disc = case.nets.discriminator.as_ref().unwrap();
                let root = disc_loss_lsdn(&mut g, z, &case.p, disc, store)?;
                Ok((g, root))
            }),
        ),
        (
            "orthonormality_penalty",
            Trains::Private,
            Box::new(|case, store| {
                let mut g = Graph::new();
                let w = g.param(store, case.nets.private.weight())?;
                let root = orthonormality_penalty(&mut g, w)?;
                Ok((g, root))
            }),
        ),
        (
            "private_sphere_total",
            Trains::PrivateAndPublic,
            Box::new(|case, store| {
                let mut g = Graph::new();
                let (z, w) = released(case, &mut g, store)?;
                let logits = case.nets.public.forward(&mut g, store, z, None)?;
                let utility = utility_loss(&mut g, logits, &case.y)?;
                let kernel = KernelSpec::default().prepare(g.shape(z).1)?;
                let privacy = privacy_loss_mmd(&mut g, z, &case.p, &kernel)?;
                let ortho = orthonormality_penalty(&mut g, w)?;
                let root = private_sphere_loss(&mut g, utility, privacy, Some(ortho), 0.7)?;
                Ok((g, root))
            }),
        ),
    ]
}

/// Copy of the case's store with only the parameter groups in `trains`
/// left trainable.
pub fn store_for(case: &GradientCase, trains: Trains) -> ParamStore {
    let mut store = case.nets.store.clone();
    let private = case.nets.private.params();
    let public = case.nets.public.params();
    let ids: Vec<ParamId> = store.iter().map(|p| p.id).collect();
    for id in ids {
        let on = match trains {
            Trains::Private => private.contains(&id),
            Trains::PrivateAndPublic => private.contains(&id) || public.contains(&id),
            Trains::Discriminator => !private.contains(&id) && !public.contains(&id),
        };
        store.set_trainable(id, on);
    }
    store
}
