//! Releases the arm from rest with the motors off and prints the energy
//! budget with and without joint friction.

use exosim::dynamics::{step, total_energy, FrictionTruth, RobotParams, SimState};
use nalgebra::DVector;

fn main() -> exosim::Result<()> {
    let params = RobotParams::default();
    let start = SimState::gravity_balanced(DVector::from_vec(vec![0.5, -0.3, 0.4]), &params)?;
    let zero = DVector::zeros(3);
    for (label, friction) in [("frictionless", FrictionTruth::zero(3)), ("with friction", FrictionTruth::default())] {
        let mut s = start.clone();
        let e0 = total_energy(&s, &params)?;
        println!("{label}:");
        for k in 1..=10_000 {
            s = step(&s, &zero, &zero, &friction, &params, 1e-3)?;
            if k % 2000 == 0 {
                let e = total_energy(&s, &params)?;
                println!("  t {:>4.1} s  q {:>7.3?}  energy {:.6} J ({:+.2e} rel)", s.t, s.q.as_slice(), e, (e - e0) / e0);
            }
        }
    }
    Ok(())
}
