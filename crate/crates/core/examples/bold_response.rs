//! BOLD response of one voxel to a two-second burst of activity.
//!
//! cargo run --release --example bold_response

use voxsim::hemo::{bold_at, step_hemodynamics, HemoParams, HemoState};

fn main() -> voxsim::Result<()> {
    let dt = 1e-3;
    let mut st = HemoState::rest(1, HemoParams::default());
    println!("t_s,drive,bold");
    for n in 0..20_000 {
        let t = n as f64 * dt;
        let z = if (1.0..3.0).contains(&t) { 1.5 } else { 0.0 };
        step_hemodynamics(&mut st, &[z], dt)?;
        if n % 250 == 0 {
            println!("{t:.2},{z},{:.6}", bold_at(&st, 0));
        }
    }
    Ok(())
}
