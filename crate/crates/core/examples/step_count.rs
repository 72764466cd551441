use reactnet_core::kinetics::*;
use reactnet_core::network::{presets, ModelIndicator};

fn main() {
    let net = presets::five_reaction_problem();
    let params = RateParameters::base_values(&net);
    let model = ModelIndicator::all(5);
    for rel in [1e-6, 1e-7, 1e-8] {
        let cfg = IntegratorConfig { rel_tol: rel, abs_tol: rel * 1e-2, max_steps: 1_000_000 };
        let obs: Vec<f64> = (1..=20).map(|i| i as f64 * 0.1).collect();
        let t0 = std::time::Instant::now();
        let n = 100;
        for _ in 0..n {
            let _ = predict_observables(&net, &model, &params, &obs, &cfg).unwrap();
        }
        println!("rel={rel:.0e}: {:?} per solve", t0.elapsed() / n);
    }
}
