#![allow(dead_code)]

use apt_core::head::{loss, AptHead, CategoryPrompts, FusionMode, HeadConfig, ProposalBatch, TuningMode};
use apt_core::math::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn random_prompts(rng: &mut impl Rng, m: usize, d: usize) -> CategoryPrompts {
    CategoryPrompts::new((0..m).map(|j| format!("c{j}")).collect(), random_matrix(rng, m, d)).unwrap()
}

pub fn random_batch(rng: &mut impl Rng, n: usize, d: usize, m: usize) -> ProposalBatch {
    let labels = (0..n).map(|_| rng.random_range(0..m)).collect();
    ProposalBatch::new(random_matrix(rng, n, d), random_matrix(rng, n, d), Some(labels)).unwrap()
}

/// Head with every parameter moved away from its structured init, so no
/// gradient vanishes by construction.
pub fn randomized_head(cfg: HeadConfig, d: usize, rng: &mut ChaCha8Rng) -> AptHead {
    let mut head = AptHead::new(cfg, d, rng).unwrap();
    let mut params = head.params();
    for p in params.iter_mut() {
        *p += rng.random_range(-0.5..0.5);
    }
    head.set_params(&params).unwrap();
    head
}

/// Mean cross-entropy at the given flat parameters, train-mode statistics.
pub fn loss_at(head: &AptHead, params: &[f64], prompts: &CategoryPrompts, batch: &ProposalBatch) -> f64 {
    let mut h = head.clone();
    h.set_params(params).unwrap();
    let trace = h.forward(prompts, batch, true).unwrap();
    loss(&trace.probs, batch.labels.as_ref().unwrap()).unwrap()
}

/// Central differences over every parameter.
pub fn finite_difference(head: &AptHead, prompts: &CategoryPrompts, batch: &ProposalBatch, h: f64) -> Vec<f64> {
    let base = head.params();
    (0..base.len())
        .map(|k| {
            let mut plus = base.clone();
            plus[k] += h;
            let mut minus = base.clone();
            minus[k] -= h;
            (loss_at(head, &plus, prompts, batch) - loss_at(head, &minus, prompts, batch)) / (2.0 * h)
        })
        .collect()
}

/// Central-difference step for the configuration sweep.
pub const FD_STEP: f64 = 1e-5;

/// Components below this magnitude in both gradients compare absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(GRAD_FLOOR))
        .fold(0.0, f64::max)
}

pub struct GradCase {
    pub cfg: HeadConfig,
    pub d: usize,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
}

/// Draws a head and batch for `case`, redrawing while any rectified unit sits
/// within `margin` of its kink (where central differences are invalid).
pub fn gradient_instance(case: &GradCase, margin: f64) -> (AptHead, CategoryPrompts, ProposalBatch) {
    let mut rng = ChaCha8Rng::seed_from_u64(case.seed);
    loop {
        let head = randomized_head(case.cfg, case.d, &mut rng);
        let prompts = random_prompts(&mut rng, case.m, case.d);
        let batch = random_batch(&mut rng, case.n, case.d, case.m);
        let trace = head.forward(&prompts, &batch, true).unwrap();
        let kink = trace
            .network_traces()
            .map(|(o, t)| t.min_abs_rectified_input(head.network_for(o).unwrap()))
            .fold(f64::INFINITY, f64::min);
        if kink > margin {
            return (head, prompts, batch);
        }
    }
}

/// Every fusion × tuning combination over the small size grid.
pub fn gradient_cases() -> Vec<GradCase> {
    let mut cases = Vec::new();
    let mut seed = 100;
    for (k, fusion) in FusionMode::ALL.into_iter().enumerate() {
        for (l, tuning) in TuningMode::ALL.into_iter().enumerate() {
            let idx = k * 4 + l;
            let d = if idx % 2 == 0 { 8 } else { 16 };
            let n = if idx % 3 == 0 { 4 } else { 8 };
            let m = if idx % 4 < 2 { 3 } else { 5 };
            for share in [true, false] {
                seed += 1;
                let cfg = HeadConfig {
                    fusion,
                    tuning,
                    share_weights: share,
                    tau: 0.5,
                    reduction: 4,
                    layers: if seed % 3 == 0 { 3 } else { 2 },
                    rectify_output: seed % 5 == 0,
                    ..HeadConfig::default()
                };
                cases.push(GradCase { cfg, d, n, m, seed });
            }
        }
    }
    cases
}
