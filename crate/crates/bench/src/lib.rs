//! Fixtures shared by the benchmarks.

use d3pm_core::diffusion::Tokens;
use d3pm_core::harness::{gen_ground_truth, MixtureSpec};
use d3pm_core::{init_params, CodeMatrix, DenoiserConfig, DenoiserParams};

/// Desk-mixture records on `n_codes` codes.
pub fn records(n_codes: usize, n: usize, seed: u64) -> CodeMatrix {
    gen_ground_truth(&MixtureSpec::desk(n_codes), n, seed).expect("valid preset").data
}

pub fn tokens(n_codes: usize, n: usize, seed: u64) -> Tokens {
    Tokens::from_codes(&records(n_codes, n, seed))
}

/// Width-32 two-layer denoiser with projection length 8.
pub fn model(n_codes: usize) -> DenoiserParams {
    init_params(&DenoiserConfig::new(n_codes, 32, 2, 2, 8), 0).expect("valid config")
}
