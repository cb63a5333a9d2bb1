//! Fixtures shared by the benchmarks.

use std::f64::consts::FRAC_1_SQRT_2;
use std::sync::Arc;

use kamtor_core::hamiltonian::{xi_of_omega, FrequencyModel, Model, Perturbation};
use kamtor_core::kam::{synthetic_normal_form, synthetic_remainder, BlockNormalForm};
use kamtor_core::lattice::{AngleLattice, Discretization, IndexSets, OperatorMap};
use kamtor_core::measure::{FrequencyBox, MeasureParams};
use kamtor_core::nash_moser::NashMoserConfig;
use rand::SeedableRng;

/// One tangential site, `omega = 0.6`.
pub fn single_site(eps: f64, k_normal: i64, l_angle: usize) -> (Model, Discretization, Vec<f64>) {
    let ix = IndexSets::new(&[0], k_normal, l_angle).expect("index sets");
    let freq = FrequencyModel::quartic();
    let omega = vec![0.6];
    let xi = xi_of_omega(&omega, &ix.s, &freq).expect("xi");
    let m = Model::new(ix.clone(), xi, freq, Perturbation::reference(k_normal, eps)).expect("model");
    (m, Discretization::new(ix), omega)
}

/// `S = {-1, 0, 1}` at the actions `(1, 1.1, 1.2)`.
pub fn three_sites(eps: f64, k_normal: i64, l_angle: usize) -> (Model, Discretization) {
    let ix = IndexSets::new(&[-1, 0, 1], k_normal, l_angle).expect("index sets");
    let m = Model::new(ix.clone(), vec![1.0, 1.1, 1.2], FrequencyModel::quartic(), Perturbation::reference(k_normal, eps))
        .expect("model");
    (m, Discretization::new(ix))
}

pub fn nm_config() -> NashMoserConfig {
    let mut cfg = NashMoserConfig::new(0.1, 1);
    cfg.delta2 = 2.0;
    cfg
}

/// Random block normal form and smoothing remainder over a two-frequency lattice.
pub fn homological_instance(seed: u64) -> (Arc<AngleLattice>, BlockNormalForm, OperatorMap) {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let lat = Arc::new(AngleLattice::new(2, 3));
    let sites = [2i64, 3, 5];
    let nf = synthetic_normal_form(&mut rng, &sites, &[FRAC_1_SQRT_2, 1.3247]);
    let r = synthetic_remainder(&mut rng, &lat, &sites, 1e-3, 2.0);
    (lat, nf, r)
}

pub fn measure_instance(n_samples: usize) -> (FrequencyBox, MeasureParams) {
    let s = vec![-1i64, 0, 1];
    let model = FrequencyModel::quartic();
    let fbox = FrequencyBox::around_actions(&[1.0; 3], 0.5, n_samples, 1, &s, &model).expect("box");
    let params = MeasureParams { s, k_normal: 8, model, l_max: 4, tau: 7.0, shift: 0.0, gammas: vec![1e-3, 1e-2, 1e-1] };
    (fbox, params)
}
