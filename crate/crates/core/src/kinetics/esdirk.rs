//! Adaptive implicit integrator for stiff kinetics.
//!
//! Six-stage, fourth-order, L-stable ESDIRK scheme (explicit first stage,
//! singly diagonally implicit remainder with γ = 1/4, stiffly accurate) with
//! an embedded third-order solution for local error control. Implicit stages
//! are solved by a simplified Newton iteration against the analytic kinetics
//! Jacobian. The Jacobian and the LU factors of the iteration matrix
//! `I − hγJ` are reused across steps until the step size drifts, the
//! Jacobian ages out, or Newton convergence degrades.
//!
//! The step controller is the standard elementary one: WRMS error norm with
//! per-component weights `abs_tol + rel_tol·max(|y_n|, |y_{n+1}|)`, accept at
//! `err ≤ 1`, step-size factor `0.9·err^(−1/4)` clamped to `[0.2, 5]`. Output
//! times are hit exactly by capping the step, so no interpolation error
//! enters reported states.

use nalgebra::{DMatrix, DVector};

use super::{IntegratorConfig, ReducedSystem};

const STAGES: usize = 6;
const GAMMA: f64 = 0.25;

/// Stage abscissae. The kinetics system is autonomous, so these only enter
/// the order-condition checks.
#[cfg_attr(not(test), allow(dead_code))]
const C: [f64; STAGES] = [0.0, 0.5, 83.0 / 250.0, 31.0 / 50.0, 17.0 / 20.0, 1.0];

const A: [[f64; STAGES]; STAGES] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.25, GAMMA, 0.0, 0.0, 0.0, 0.0],
    [8611.0 / 62500.0, -1743.0 / 31250.0, GAMMA, 0.0, 0.0, 0.0],
    [
        5012029.0 / 34652500.0,
        -654441.0 / 2922500.0,
        174375.0 / 388108.0,
        GAMMA,
        0.0,
        0.0,
    ],
    [
        15267082809.0 / 155376265600.0,
        -71443401.0 / 120774400.0,
        730878875.0 / 902184768.0,
        2285395.0 / 8070912.0,
        GAMMA,
        0.0,
    ],
    [
        82889.0 / 524892.0,
        0.0,
        15625.0 / 83664.0,
        69875.0 / 102672.0,
        -2260.0 / 8211.0,
        GAMMA,
    ],
];

/// Fourth-order weights (last row of A: the scheme is stiffly accurate).
const B: [f64; STAGES] = A[STAGES - 1];

/// Embedded third-order weights.
const B_HAT: [f64; STAGES] = [
    4586570599.0 / 29645900160.0,
    0.0,
    178811875.0 / 945068544.0,
    814220225.0 / 1159782912.0,
    -3700637.0 / 11593932.0,
    61727.0 / 225920.0,
];

const NEWTON_MAX_ITER: usize = 8;
const NEWTON_TOL: f64 = 0.03;
/// Accepted steps a Jacobian may serve before mandatory refresh.
const MAX_JAC_AGE: usize = 25;
/// Relative step-size drift the LU factors tolerate.
const MAX_H_DRIFT: f64 = 0.2;

#[derive(Debug, Clone, Copy)]
pub(super) enum RawFailure {
    StepsExhausted { t: f64 },
    NonFinite { t: f64 },
    NegativeState { t: f64 },
    StepUnderflow { t: f64 },
}

struct Workspace {
    stages: Vec<DVector<f64>>,
    z: DVector<f64>,
    base: DVector<f64>,
    residual: DVector<f64>,
    delta: DVector<f64>,
    y_new: DVector<f64>,
    err_vec: DVector<f64>,
    jac: DMatrix<f64>,
    iter_matrix: DMatrix<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Workspace {
            stages: (0..STAGES).map(|_| DVector::zeros(n)).collect(),
            z: DVector::zeros(n),
            base: DVector::zeros(n),
            residual: DVector::zeros(n),
            delta: DVector::zeros(n),
            y_new: DVector::zeros(n),
            err_vec: DVector::zeros(n),
            jac: DMatrix::zeros(n, n),
            iter_matrix: DMatrix::zeros(n, n),
        }
    }
}

/// Jacobian/LU bookkeeping shared across steps.
struct LinearState {
    lu: Option<nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>>,
    h_factored: f64,
    jac_age: usize,
    jac_fresh: bool,
}

impl LinearState {
    fn new() -> Self {
        LinearState {
            lu: None,
            h_factored: 0.0,
            jac_age: usize::MAX,
            jac_fresh: false,
        }
    }

    /// Ensures the LU factors match the current state and step size,
    /// re-evaluating the Jacobian only when it has aged out.
    fn prepare(&mut self, sys: &ReducedSystem, y: &DVector<f64>, h: f64, ws: &mut Workspace) {
        let need_jac = self.jac_age >= MAX_JAC_AGE;
        let need_factor = need_jac
            || self.lu.is_none()
            || (h - self.h_factored).abs() > MAX_H_DRIFT * self.h_factored;
        if need_jac {
            sys.jacobian(y, &mut ws.jac);
            self.jac_age = 0;
            self.jac_fresh = true;
        }
        if need_factor {
            let n = y.len();
            for r in 0..n {
                for c in 0..n {
                    ws.iter_matrix[(r, c)] = -h * GAMMA * ws.jac[(r, c)];
                }
                ws.iter_matrix[(r, r)] += 1.0;
            }
            self.lu = Some(ws.iter_matrix.clone().lu());
            self.h_factored = h;
        }
    }

    /// Forces a Jacobian refresh at the current state (after a Newton
    /// failure with stale factors).
    fn invalidate(&mut self) {
        self.jac_age = usize::MAX;
        self.jac_fresh = false;
    }
}

fn wrms(v: &DVector<f64>, y_a: &DVector<f64>, y_b: &DVector<f64>, cfg: &IntegratorConfig) -> f64 {
    let n = v.len();
    let mut acc = 0.0;
    for i in 0..n {
        let scale = cfg.abs_tol + cfg.rel_tol * y_a[i].abs().max(y_b[i].abs());
        let r = v[i] / scale;
        acc += r * r;
    }
    (acc / n as f64).sqrt()
}

fn initial_step(sys: &ReducedSystem, y0: &DVector<f64>, span: f64, cfg: &IntegratorConfig) -> f64 {
    let mut f0 = DVector::zeros(y0.len());
    sys.rhs(y0, &mut f0);
    let d0 = wrms(y0, y0, y0, cfg);
    let d1 = wrms(&f0, y0, y0, cfg);
    let h = if d0 < 1e-10 || d1 < 1e-10 {
        1e-6 * span
    } else {
        0.01 * d0 / d1
    };
    h.min(span).max(span * 1e-12)
}

/// Integrates from `t0` and returns states at each of `outputs` (strictly
/// increasing, all ≥ `t0`).
pub(super) fn integrate(
    sys: &ReducedSystem,
    t0: f64,
    y0: DVector<f64>,
    outputs: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<DVector<f64>>, RawFailure> {
    let n = y0.len();
    let span = outputs.last().unwrap() - t0;
    let mut ws = Workspace::new(n);
    let mut out = Vec::with_capacity(outputs.len());
    let mut oi = 0;
    while oi < outputs.len() && outputs[oi] <= t0 {
        out.push(y0.clone());
        oi += 1;
    }
    if oi == outputs.len() {
        return Ok(out);
    }

    let mut t = t0;
    let mut y = y0;
    let mut h = initial_step(sys, &y, span, cfg).min(outputs[oi] - t);
    let mut steps = 0usize;
    let mut lin = LinearState::new();

    while oi < outputs.len() {
        steps += 1;
        if steps > cfg.max_steps {
            return Err(RawFailure::StepsExhausted { t });
        }
        if !(h.is_finite() && h > 0.0) || t + h == t {
            return Err(RawFailure::StepUnderflow { t });
        }
        let hits_output = t + h >= outputs[oi] - 1e-12 * span;
        let h_eff = if hits_output { outputs[oi] - t } else { h };

        lin.prepare(sys, &y, h_eff, &mut ws);
        match attempt_step(sys, &y, h_eff, cfg, &mut ws, &lin) {
            StepResult::Accept { err } => {
                std::mem::swap(&mut y, &mut ws.y_new);
                lin.jac_age += 1;
                lin.jac_fresh = false;
                if hits_output {
                    t = outputs[oi];
                    out.push(y.clone());
                    oi += 1;
                } else {
                    t += h_eff;
                }
                let factor = if err > 0.0 {
                    (0.9 * err.powf(-0.25)).clamp(0.2, 5.0)
                } else {
                    5.0
                };
                h = h_eff * factor;
            }
            StepResult::Reject { err } => {
                let factor = (0.9 * err.powf(-0.25)).clamp(0.1, 0.5);
                h = h_eff * factor;
            }
            StepResult::NewtonFailed => {
                // Retry at the same step size with a fresh Jacobian before
                // shrinking.
                if lin.jac_fresh {
                    h = h_eff * 0.25;
                } else {
                    lin.invalidate();
                }
            }
            StepResult::NonFinite => {
                // A wildly wrong trial step; shrink hard before giving up.
                if h_eff <= span * 1e-13 {
                    return Err(RawFailure::NonFinite { t });
                }
                lin.invalidate();
                h = h_eff * 0.1;
            }
            StepResult::Negative => {
                // Treat like an error-test failure: the only way a solution
                // component sinks below -abs_tol is a step too large for the
                // entry's decay. Persistent failure ends in step underflow.
                if h_eff <= span * 1e-13 {
                    return Err(RawFailure::NegativeState { t });
                }
                h = h_eff * 0.5;
            }
        }
    }
    Ok(out)
}

enum StepResult {
    Accept { err: f64 },
    Reject { err: f64 },
    NewtonFailed,
    NonFinite,
    Negative,
}

fn attempt_step(
    sys: &ReducedSystem,
    y: &DVector<f64>,
    h: f64,
    cfg: &IntegratorConfig,
    ws: &mut Workspace,
    lin: &LinearState,
) -> StepResult {
    let n = y.len();
    let lu = lin.lu.as_ref().expect("prepared LU");

    // Explicit first stage.
    sys.rhs(y, &mut ws.stages[0]);
    if ws.stages[0].iter().any(|v| !v.is_finite()) {
        return StepResult::NonFinite;
    }

    for i in 1..STAGES {
        // base = y + h * Σ_{j<i} a_ij k_j; unknown z solves
        // z = base + hγ f(z).
        ws.base.copy_from(y);
        for j in 0..i {
            ws.base.axpy(h * A[i][j], &ws.stages[j], 1.0);
        }
        ws.z.copy_from(&ws.base);
        let mut converged = false;
        let mut last_norm = f64::INFINITY;
        for iter in 0..NEWTON_MAX_ITER {
            // residual = z - base - hγ f(z)
            sys.rhs(&ws.z, &mut ws.residual);
            if ws.residual.iter().any(|v| !v.is_finite()) {
                return StepResult::NonFinite;
            }
            for r in 0..n {
                ws.residual[r] = ws.z[r] - ws.base[r] - h * GAMMA * ws.residual[r];
            }
            ws.delta.copy_from(&ws.residual);
            if !lu.solve_mut(&mut ws.delta) {
                return StepResult::NewtonFailed;
            }
            ws.z -= &ws.delta;
            let norm = wrms(&ws.delta, y, &ws.z, cfg);
            if !norm.is_finite() {
                return StepResult::NonFinite;
            }
            if norm <= NEWTON_TOL {
                converged = true;
                break;
            }
            if iter >= 1 && norm > 2.0 * last_norm {
                return StepResult::NewtonFailed;
            }
            last_norm = norm;
        }
        if !converged {
            return StepResult::NewtonFailed;
        }
        // k_i = (z - base) / (hγ), algebraically f(t_i, z) at convergence.
        for r in 0..n {
            ws.stages[i][r] = (ws.z[r] - ws.base[r]) / (h * GAMMA);
        }
    }

    // Stiffly accurate: y_{n+1} = y_n + h Σ b_j k_j equals the last stage z.
    ws.y_new.copy_from(y);
    ws.err_vec.fill(0.0);
    for j in 0..STAGES {
        ws.y_new.axpy(h * B[j], &ws.stages[j], 1.0);
        ws.err_vec.axpy(h * (B[j] - B_HAT[j]), &ws.stages[j], 1.0);
    }
    if ws.y_new.iter().any(|v| !v.is_finite()) {
        return StepResult::NonFinite;
    }
    // Filter the embedded difference through (I - hγJ)^{-1}; the raw
    // difference wildly overestimates the error of an L-stable solution in
    // the stiff transient.
    if !lu.solve_mut(&mut ws.err_vec) {
        return StepResult::NewtonFailed;
    }
    let err = wrms(&ws.err_vec, y, &ws.y_new, cfg);
    if !err.is_finite() {
        return StepResult::NonFinite;
    }
    if err > 1.0 {
        return StepResult::Reject { err: err.max(1e-4) };
    }
    if ws.y_new.iter().any(|&v| v < -cfg.abs_tol) {
        return StepResult::Negative;
    }
    StepResult::Accept { err }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// The tableau must satisfy the fourth-order conditions (and third-order
    /// for the embedded weights); a transcription slip in any coefficient
    /// breaks these algebraic identities.
    #[test]
    fn tableau_satisfies_order_conditions() {
        let close = |a: f64, b: f64| (a - b).abs() < 1e-13;
        for i in 0..STAGES {
            let row: f64 = A[i].iter().sum();
            assert!(close(row, C[i]), "row {i} sum {row} != c {}", C[i]);
        }
        assert!(close(B.iter().sum::<f64>(), 1.0));
        assert!(close(B_HAT.iter().sum::<f64>(), 1.0));
        let moment = |w: &[f64; STAGES], p: i32| -> f64 {
            w.iter().zip(&C).map(|(wi, ci)| wi * ci.powi(p)).sum()
        };
        assert!(close(moment(&B, 1), 0.5));
        assert!(close(moment(&B, 2), 1.0 / 3.0));
        assert!(close(moment(&B, 3), 0.25));
        assert!(close(moment(&B_HAT, 1), 0.5));
        assert!(close(moment(&B_HAT, 2), 1.0 / 3.0));
        let mut bac = 0.0;
        let mut bhac = 0.0;
        for i in 0..STAGES {
            for j in 0..STAGES {
                bac += B[i] * A[i][j] * C[j];
                bhac += B_HAT[i] * A[i][j] * C[j];
            }
        }
        assert!(close(bac, 1.0 / 6.0));
        assert!(close(bhac, 1.0 / 6.0));
        // b differs from the embedded weights, otherwise the error estimate
        // would be identically zero.
        assert!(B.iter().zip(&B_HAT).any(|(b, bh)| (b - bh).abs() > 1e-6));
    }
}
