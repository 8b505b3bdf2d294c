//! A small weak-scaling grid on the modeled clock.
//!
//! cargo run --release --example scaling_experiment

use voxsim::experiment::{run_experiment, write_grid_csv, ExperimentConfig, ExperimentKind};

fn main() -> voxsim::Result<()> {
    let cfg = ExperimentConfig {
        kind: ExperimentKind::WeakScaling,
        workers: vec![1, 2, 4],
        neurons: 5_000,
        voxels: 4,
        steps: 300,
        window: 200,
        ..Default::default()
    };
    let rows = run_experiment(&cfg)?;
    write_grid_csv(std::io::stdout(), &rows)
}
