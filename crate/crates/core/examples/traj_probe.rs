use reactnet_core::kinetics::*;
use reactnet_core::network::{presets, ModelIndicator};
use std::time::Instant;

fn main() {
    let net = presets::five_reaction_problem();
    let params = RateParameters::base_values(&net);
    let model = ModelIndicator::all(5);
    let cfg = IntegratorConfig::default();
    let times: Vec<f64> = (1..=60).map(|i| i as f64 * 0.25).collect();
    let traj = integrate(&net, &model, &params, &times, &cfg).unwrap();
    let braf = net.species_index("BRaf").unwrap();
    println!("t      BRaf(full)");
    for (i, t) in times.iter().enumerate() {
        if i % 4 == 0 || i + 1 == times.len() {
            println!("{t:6.2} {:10.3}", traj.states[i].values[braf]);
        }
    }
    // left pathway broken (EN = right only)
    let m_left_broken = ModelIndicator::from_mask(0b00000, 5);
    let traj2 = integrate(&net, &m_left_broken, &params, &times, &cfg).unwrap();
    println!("-- right-pathway-only model(base EN)");
    for (i, t) in times.iter().enumerate() {
        if i % 8 == 0 || i + 1 == times.len() {
            println!("{t:6.2} {:10.3}", traj2.states[i].values[braf]);
        }
    }
    // timing: full-model solve at 20 output points over [0.1, 2.0]
    let obs: Vec<f64> = (1..=20).map(|i| i as f64 * 0.1).collect();
    let t0 = Instant::now();
    let n = 200;
    for _ in 0..n {
        let _ = predict_observables(&net, &model, &params, &obs, &cfg).unwrap();
    }
    println!("full-model solve (20 pts over [0.1,2]): {:?} per solve", t0.elapsed() / n);
    let obs10: Vec<f64> = (1..=20).map(|i| i as f64 * 0.5).collect();
    let t0 = Instant::now();
    for _ in 0..n {
        let _ = predict_observables(&net, &model, &params, &obs10, &cfg).unwrap();
    }
    println!("full-model solve (20 pts over [0.5,10]): {:?} per solve", t0.elapsed() / n);
}
