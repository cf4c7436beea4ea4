//! Small fixtures shared by the integration tests.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use slimgan::data::{make_task, TaskSpec};
use slimgan::distill::FeatureExtractor;
use slimgan::engine::Setup;
use slimgan::models::{catalog, ArchSpec, InitConfig, Network, ParamRole, ParamSet};
use slimgan::Tensor;

/// Generator with one prunable norm and 26 parameters.
pub const TOY_G: &str = "archspec 1
name toy-g
input image 2 3 3
conv 2 3 k=1 s=1 p=0 pad=zero bias=true
norm 3 instance prunable
act relu
conv 3 2 k=1 s=1 p=0 pad=zero bias=true
act tanh
";

/// PatchGAN-like discriminator with 21 parameters and a 2x2 output map.
pub const TOY_D: &str = "archspec 1
name toy-d
input image 2 3 3
conv 2 2 k=2 s=1 p=0 pad=zero bias=true
act leaky_relu 0.2
conv 2 1 k=1 s=1 p=0 pad=zero bias=true
act sigmoid
";

pub const TOY_F: &str = "archspec 1
name toy-f
input image 2 3 3
conv 2 3 k=1 s=1 p=0 pad=zero bias=true
act relu
conv 3 2 k=3 s=1 p=1 pad=zero bias=true
act relu
";

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Parameters with every trainable tensor drawn at a scale large enough to
/// make the toy nonlinear.
pub fn random_params(net: &Network, seed: u64) -> ParamSet {
    let mut r = rng(seed);
    let init = InitConfig {
        conv_std: 0.6,
        gamma_range: (0.5, 1.5),
    };
    let mut p = net.init_params(&init, &mut r);
    for e in p.entries_mut() {
        if matches!(e.role, ParamRole::Bias | ParamRole::Beta) {
            e.tensor = Tensor::randn(e.tensor.shape(), 0.3, &mut r);
        }
    }
    p
}

pub struct Toy {
    pub g: Network,
    pub d: Network,
    pub f: FeatureExtractor,
    pub w: ParamSet,
    pub theta: ParamSet,
}

pub fn toy(seed: u64) -> Toy {
    let spec = |s: &str| -> ArchSpec { s.parse().unwrap() };
    let g = Network::new(spec(TOY_G)).unwrap();
    let d = Network::new(spec(TOY_D)).unwrap();
    let fnet = Network::new(spec(TOY_F)).unwrap();
    let fp = random_params(&fnet, seed + 1000);
    let f = FeatureExtractor::new(fnet.spec(), &fp, &[1, 3], "toy").unwrap();
    let w = random_params(&g, seed);
    let theta = random_params(&d, seed + 1);
    Toy { g, d, f, w, theta }
}

pub fn images(seed: u64, n: usize) -> Tensor {
    Tensor::uniform(&[n, 2, 3, 3], -1.0, 1.0, &mut rng(seed))
}

/// Task, untrained teacher and builtin extractor at a size that keeps
/// end-to-end pipeline tests to seconds.
pub fn small_setup(seed: u64) -> Setup {
    let data = make_task(&TaskSpec {
        train_size: 24,
        test_size: 16,
        seed,
        ..TaskSpec::default()
    })
    .unwrap();
    let spec = catalog::desk_generator();
    let teacher = slimgan::engine::init_generator(&spec, seed + 77).unwrap();
    Setup::new(
        data,
        spec,
        teacher,
        catalog::discriminator(),
        FeatureExtractor::builtin().unwrap(),
    )
    .unwrap()
}

/// Central difference of `f` along coordinate `j` of tensor `id`.
pub fn central_difference(params: &ParamSet, id: usize, j: usize, h: f64, f: impl Fn(&ParamSet) -> f64) -> f64 {
    let mut plus = params.clone();
    plus.tensor_mut(id).data_mut()[j] += h;
    let mut minus = params.clone();
    minus.tensor_mut(id).data_mut()[j] -= h;
    (f(&plus) - f(&minus)) / (2.0 * h)
}

/// `|a - b|` relative to the larger magnitude, with an absolute floor.
pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
