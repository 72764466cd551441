use reactnet_core::bayes::*;
use reactnet_core::kinetics::*;
use reactnet_core::network::{presets, ModelIndicator};

fn main() {
    let net = presets::five_reaction_problem();
    let times: Vec<f64> = (1..=20).map(|i| 0.25 * i as f64).collect();
    let params = RateParameters::base_values(&net);
    let model = ModelIndicator::all(5);
    let g0 = predict_observables(&net, &model, &params, &times, &IntegratorConfig::default()).unwrap();
    let data = Dataset::new(times.clone(), g0, 4.0, vec!["BRaf".into()]);
    let eval = Evaluator::new(&net, Some(&data), IntegratorConfig::default());
    let coords: Vec<f64> = vec![0.5, 2.0, 2.0, 0.4, 1.0];
    let g = eval.conditional_gaussian(&model, &[1], &coords, &Default::default(), &Default::default()).unwrap();
    println!("laplace mean {} var {}", g.mean[0], g.cov[(0,0)]);
    // dense scan of the conditional
    let prior = eval.layout().prior(1);
    let (lo, hi) = (prior.mean - 4.0*prior.sd(), prior.mean + 4.0*prior.sd());
    let n = 400;
    let h = (hi - lo)/n as f64;
    let mut logv = vec![];
    for i in 0..=n {
        let x = lo + i as f64 * h;
        let mut c = coords.clone();
        c[1] = x;
        logv.push(eval.log_likelihood(&model, &c) + normal_log_density(x, prior.mean, prior.variance));
    }
    let m = logv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logv.iter().map(|v| (v-m).exp()).sum();
    let mean: f64 = logv.iter().enumerate().map(|(i,v)| (lo + i as f64*h)*(v-m).exp()).sum::<f64>()/z;
    let var: f64 = logv.iter().enumerate().map(|(i,v)| { let x = lo + i as f64*h; (x-mean)*(x-mean)*(v-m).exp() }).sum::<f64>()/z;
    println!("quadrature mean {mean} var {var}");
    // profile of the conditional every 40 points
    for i in (0..=n).step_by(40) {
        println!("x={:+.3} logp={:.4}", lo + i as f64*h, logv[i]-m);
    }
}
