//! Benchmark fixtures shared by the criterion targets.

use plumeinv::experiments::{make_synthetic_case, Case, ExperimentConfig, Scenario};

/// A small crosswell velocity case: `n × n` cells, two shots.
pub fn wave_case(n: usize) -> (ExperimentConfig, Case) {
    let mut cfg = ExperimentConfig::preset(Scenario::Fwi);
    cfg.grid.nx = n;
    cfg.grid.nz = n;
    cfg.acquisition.n_sources = 2;
    cfg.acquisition.n_receivers = 8;
    cfg.acquisition.record_length = 0.3;
    let case = make_synthetic_case(&cfg).expect("bench case");
    (cfg, case)
}
