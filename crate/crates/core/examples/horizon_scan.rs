use reactnet_core::bayes::*;
use reactnet_core::kinetics::*;
use reactnet_core::network::{presets, ModelIndicator};

fn main() {
    let net = presets::five_reaction_problem();
    let model = ModelIndicator::all(5);
    let params = RateParameters::base_values(&net);
    for (label, dt, n) in [("h2.5", 0.125, 20), ("h5", 0.25, 20), ("h7.5", 0.375, 20), ("h10", 0.5, 20), ("h15", 0.75, 20)] {
        let times: Vec<f64> = (1..=n).map(|i| i as f64 * dt).collect();
        let g0 = predict_observables(&net, &model, &params, &times, &IntegratorConfig::default()).unwrap();
        // difference between full and right-only at base values (identifiability of the left branch)
        let right = ModelIndicator::from_mask(0, 5);
        let g1 = predict_observables(&net, &right, &params, &times, &IntegratorConfig::default()).unwrap();
        let dev: f64 = g0.iter().zip(&g1).map(|(a, b)| (a - b) * (a - b) / 4.0).sum();
        let data = Dataset::new(times.clone(), g0, 4.0, vec!["BRaf".into()]);
        let eval = Evaluator::new(&net, Some(&data), IntegratorConfig::default());
        let coords: Vec<f64> = vec![0.5, 2.0, 2.0, 0.4, 1.0];
        let g = eval.conditional_gaussian(&model, &[1], &coords, &Default::default(), &Default::default()).unwrap();
        let prior = eval.layout().prior(1);
        let (lo, hi) = (prior.mean - 4.0 * prior.sd(), prior.mean + 4.0 * prior.sd());
        let nq = 1000;
        let h = (hi - lo) / nq as f64;
        let logv: Vec<f64> = (0..=nq).map(|i| {
            let x = lo + i as f64 * h;
            let mut c = coords.clone();
            c[1] = x;
            eval.log_likelihood(&model, &c) + normal_log_density(x, prior.mean, prior.variance)
        }).collect();
        let m = logv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logv.iter().map(|v| (v - m).exp()).sum();
        let mean: f64 = logv.iter().enumerate().map(|(i, v)| (lo + i as f64 * h) * (v - m).exp()).sum::<f64>() / z;
        let var: f64 = logv.iter().enumerate().map(|(i, v)| { let x = lo + i as f64 * h; (x - mean) * (x - mean) * (v - m).exp() }).sum::<f64>() / z;
        println!("{label}: halfChi2(left-vs-right)={dev:8.1}  laplace_var={:.5} quad_var={var:.5} ratio_err={:.1}%",
                 g.cov[(0,0)], 100.0 * (g.cov[(0,0)] - var).abs() / var);
    }
}
