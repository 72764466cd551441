use reactnet_core::kinetics::*;
use reactnet_core::network::{presets, ModelIndicator};
use std::time::Instant;
use nalgebra::{DVector, DMatrix};
use std::collections::BTreeSet;

fn main() {
    let net = presets::five_reaction_problem();
    let params = RateParameters::base_values(&net);
    let model = ModelIndicator::all(5);
    let included: BTreeSet<u32> = net.included_reactions(&model);
    let sys = ReducedSystem::new(&net, &included, &params);
    let y = sys.initial_state();
    let n = sys.n_dyn();
    let mut out = DVector::zeros(n);
    let t0 = Instant::now();
    let reps = 1_000_000u32;
    for _ in 0..reps { sys.rhs(&y, &mut out); }
    println!("rhs: {:?} per eval", t0.elapsed() / reps);
    let mut jac = DMatrix::zeros(n, n);
    let t0 = Instant::now();
    for _ in 0..100_000u32 { sys.jacobian(&y, &mut jac); }
    println!("jac: {:?} per eval", t0.elapsed() / 100_000u32);
    let t0 = Instant::now();
    for _ in 0..100_000u32 { let _ = jac.clone().lu(); }
    println!("lu: {:?} per factorization", t0.elapsed() / 100_000u32);
}
