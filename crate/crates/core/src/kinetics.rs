//! Deterministic ODE forward model for reaction networks.
//!
//! Rate laws:
//!
//! - mass action: `k · Π [reactants]`, each direction separately for
//!   reversible reactions;
//! - Michaelis-Menten with enzyme `E` and single substrate `S`:
//!   `k · [E] · [S] / (k_M + [S])`; without an enzyme the `[E]` factor is 1.
//!
//! Each included reaction's net rate contributes −1 to every reactant, +1 to
//! every product and 0 to every enzyme. The right-hand side is always
//! assembled from the model's included reaction set; restricting evaluation
//! to an effective network is an optimization callers request explicitly via
//! the `*_included` entry points.
//!
//! Integration uses an L-stable ESDIRK scheme of order 4 with an embedded
//! third-order error estimate (see `esdirk`), adaptive in step size and
//! deterministic for fixed inputs and configuration.

mod esdirk;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::network::{
    Direction, ModelIndicator, RateLaw, Reaction, ReactionId, ReactionNetwork, SpeciesId,
};

/// Log10 rate constants indexed by (reaction, direction), plus Michaelis
/// constants. Constructed from the network's base values and overridden per
/// sampled coordinate.
#[derive(Debug, Clone, PartialEq)]
pub struct RateParameters {
    log10_k: BTreeMap<(ReactionId, Direction), f64>,
    michaelis: BTreeMap<ReactionId, f64>,
}

impl RateParameters {
    /// All rate constants at their base values, Michaelis constants from the
    /// network definition.
    pub fn base_values(net: &ReactionNetwork) -> Self {
        let mut log10_k = BTreeMap::new();
        let mut michaelis = BTreeMap::new();
        for rx in &net.reactions {
            log10_k.insert((rx.id, Direction::Forward), rx.base_log10_k);
            if let Some(rev) = rx.base_log10_k_reverse {
                log10_k.insert((rx.id, Direction::Reverse), rev);
            }
            if let Some(km) = rx.michaelis_constant {
                michaelis.insert(rx.id, km);
            }
        }
        RateParameters { log10_k, michaelis }
    }

    pub fn set_log10(&mut self, id: ReactionId, dir: Direction, value: f64) {
        self.log10_k.insert((id, dir), value);
    }

    pub fn log10(&self, id: ReactionId, dir: Direction) -> f64 {
        *self
            .log10_k
            .get(&(id, dir))
            .unwrap_or_else(|| panic!("no rate constant for reaction {id} {dir:?}"))
    }

    /// Linear-scale rate constant `k = 10^log10_k`.
    pub fn k(&self, id: ReactionId, dir: Direction) -> f64 {
        10f64.powf(self.log10(id, dir))
    }

    pub fn michaelis(&self, id: ReactionId) -> f64 {
        *self
            .michaelis
            .get(&id)
            .unwrap_or_else(|| panic!("no Michaelis constant for reaction {id}"))
    }
}

/// Species concentrations at one time point, full species space.
#[derive(Debug, Clone, PartialEq)]
pub struct ConcentrationState {
    pub values: Vec<f64>,
    pub time: f64,
}

/// States reported at strictly increasing times.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<ConcentrationState>,
}

impl Trajectory {
    /// Concentration of one species over time.
    pub fn series(&self, species: SpeciesId) -> Vec<f64> {
        self.states.iter().map(|s| s.values[species]).collect()
    }
}

/// Integrator tolerances and budget.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorConfig {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            rel_tol: 1e-8,
            abs_tol: 1e-10,
            max_steps: 1_000_000,
        }
    }
}

/// Integration failure. The sampler maps these to log-likelihood −∞; the
/// context string carries the reaction set and rate constants for diagnosis.
#[derive(Debug, Clone, Error)]
pub enum IntegrationError {
    #[error("step budget ({max_steps}) exhausted at t={t} [{context}]")]
    StepsExhausted {
        t: f64,
        max_steps: usize,
        context: String,
    },
    #[error("non-finite state at t={t} [{context}]")]
    NonFinite { t: f64, context: String },
    #[error("concentration below -abs_tol persisted at t={t} [{context}]")]
    NegativeState { t: f64, context: String },
    #[error("step size underflow at t={t} [{context}]")]
    StepUnderflow { t: f64, context: String },
}

/// Directional rates of one reaction at a state: `(forward, reverse)`, the
/// reverse present iff the reaction is reversible. Concentrations slightly
/// below zero are treated as zero.
pub fn reaction_rate(
    reaction: &Reaction,
    params: &RateParameters,
    conc: &ConcentrationState,
) -> (f64, Option<f64>) {
    let c = |sid: SpeciesId| conc.values[sid].max(0.0);
    match reaction.rate_law {
        RateLaw::MassAction => {
            let kf = params.k(reaction.id, Direction::Forward);
            let fwd = reaction.reactants.iter().fold(kf, |acc, &s| acc * c(s));
            let rev = reaction.reversible.then(|| {
                let kr = params.k(reaction.id, Direction::Reverse);
                reaction.products.iter().fold(kr, |acc, &s| acc * c(s))
            });
            (fwd, rev)
        }
        RateLaw::MichaelisMenten => {
            let k = params.k(reaction.id, Direction::Forward);
            let km = params.michaelis(reaction.id);
            let s = c(*reaction
                .reactants
                .iter()
                .next()
                .expect("Michaelis-Menten reaction without substrate"));
            let e = reaction
                .enzymes
                .iter()
                .next()
                .map(|&sid| c(sid))
                .unwrap_or(1.0);
            (k * e * s / (km + s), None)
        }
    }
}

/// Species production rates d[S]/dt over the full species space for the
/// model's included reactions.
pub fn assemble_rhs(
    net: &ReactionNetwork,
    model: &ModelIndicator,
    params: &RateParameters,
    conc: &ConcentrationState,
) -> Vec<f64> {
    assemble_rhs_included(net, &net.included_reactions(model), params, conc)
}

/// As [`assemble_rhs`] for an explicit reaction set.
pub fn assemble_rhs_included(
    net: &ReactionNetwork,
    included: &BTreeSet<ReactionId>,
    params: &RateParameters,
    conc: &ConcentrationState,
) -> Vec<f64> {
    let mut dydt = vec![0.0; net.species.len()];
    for rx in net.reactions.iter().filter(|r| included.contains(&r.id)) {
        let (fwd, rev) = reaction_rate(rx, params, conc);
        let net_rate = fwd - rev.unwrap_or(0.0);
        for &s in &rx.reactants {
            dydt[s] -= net_rate;
        }
        for &s in &rx.products {
            dydt[s] += net_rate;
        }
    }
    dydt
}

// ---------------------------------------------------------------------------
// Compiled reduced system
// ---------------------------------------------------------------------------

/// Where a rate-law factor reads its concentration from: a dynamic state
/// component or a constant (species untouched by every included reaction).
#[derive(Debug, Clone, Copy)]
enum Term {
    Dyn(usize),
    Const(f64),
}

#[derive(Debug, Clone)]
enum CompiledLaw {
    MassAction {
        reactants: Vec<Term>,
        products: Vec<Term>,
    },
    MichaelisMenten {
        substrate: Term,
        enzyme: Option<Term>,
        km: f64,
    },
}

#[derive(Debug, Clone)]
struct CompiledReaction {
    k_f: f64,
    k_r: f64,
    law: CompiledLaw,
    /// Dynamic state indices receiving −net_rate / +net_rate.
    reactant_rows: Vec<usize>,
    product_rows: Vec<usize>,
}

/// A model's ODE system restricted to the species its included reactions can
/// move. Enzymes of included reactions that are never consumed or produced
/// stay at their initial concentrations as constants.
#[derive(Debug, Clone)]
pub struct ReducedSystem {
    dyn_species: Vec<SpeciesId>,
    init_dyn: DVector<f64>,
    /// Full species vector template (initial concentrations).
    full_template: Vec<f64>,
    reactions: Vec<CompiledReaction>,
}

impl ReducedSystem {
    pub fn new(
        net: &ReactionNetwork,
        included: &BTreeSet<ReactionId>,
        params: &RateParameters,
    ) -> Self {
        let mut is_dyn = vec![false; net.species.len()];
        for rx in net.reactions.iter().filter(|r| included.contains(&r.id)) {
            for &s in rx.reactants.iter().chain(&rx.products) {
                is_dyn[s] = true;
            }
        }
        let dyn_species: Vec<SpeciesId> = (0..net.species.len()).filter(|&s| is_dyn[s]).collect();
        let mut full_to_dyn = vec![usize::MAX; net.species.len()];
        for (i, &s) in dyn_species.iter().enumerate() {
            full_to_dyn[s] = i;
        }
        let term = |s: SpeciesId| -> Term {
            if is_dyn[s] {
                Term::Dyn(full_to_dyn[s])
            } else {
                Term::Const(net.species[s].initial_concentration)
            }
        };
        let reactions = net
            .reactions
            .iter()
            .filter(|r| included.contains(&r.id))
            .map(|rx| {
                let law = match rx.rate_law {
                    RateLaw::MassAction => CompiledLaw::MassAction {
                        reactants: rx.reactants.iter().map(|&s| term(s)).collect(),
                        products: rx.products.iter().map(|&s| term(s)).collect(),
                    },
                    RateLaw::MichaelisMenten => CompiledLaw::MichaelisMenten {
                        substrate: term(*rx.reactants.iter().next().unwrap()),
                        enzyme: rx.enzymes.iter().next().map(|&s| term(s)),
                        km: params.michaelis(rx.id),
                    },
                };
                CompiledReaction {
                    k_f: params.k(rx.id, Direction::Forward),
                    k_r: if rx.reversible {
                        params.k(rx.id, Direction::Reverse)
                    } else {
                        0.0
                    },
                    law,
                    reactant_rows: rx.reactants.iter().map(|&s| full_to_dyn[s]).collect(),
                    product_rows: rx.products.iter().map(|&s| full_to_dyn[s]).collect(),
                }
            })
            .collect();
        let init_dyn = DVector::from_iterator(
            dyn_species.len(),
            dyn_species
                .iter()
                .map(|&s| net.species[s].initial_concentration),
        );
        ReducedSystem {
            dyn_species,
            init_dyn,
            full_template: net
                .species
                .iter()
                .map(|s| s.initial_concentration)
                .collect(),
            reactions,
        }
    }

    pub fn n_dyn(&self) -> usize {
        self.dyn_species.len()
    }

    pub fn initial_state(&self) -> DVector<f64> {
        self.init_dyn.clone()
    }

    fn read(&self, y: &DVector<f64>, t: Term) -> f64 {
        match t {
            Term::Dyn(i) => y[i].max(0.0),
            Term::Const(c) => c,
        }
    }

    /// d y/dt into `out` (length `n_dyn`). The system is autonomous.
    pub fn rhs(&self, y: &DVector<f64>, out: &mut DVector<f64>) {
        out.fill(0.0);
        for rx in &self.reactions {
            let net_rate = match &rx.law {
                CompiledLaw::MassAction {
                    reactants,
                    products,
                } => {
                    let fwd = reactants.iter().fold(rx.k_f, |a, &t| a * self.read(y, t));
                    let rev = if rx.k_r > 0.0 {
                        products.iter().fold(rx.k_r, |a, &t| a * self.read(y, t))
                    } else {
                        0.0
                    };
                    fwd - rev
                }
                CompiledLaw::MichaelisMenten {
                    substrate,
                    enzyme,
                    km,
                } => {
                    let s = self.read(y, *substrate);
                    let e = enzyme.map(|t| self.read(y, t)).unwrap_or(1.0);
                    rx.k_f * e * s / (km + s)
                }
            };
            for &row in &rx.reactant_rows {
                out[row] -= net_rate;
            }
            for &row in &rx.product_rows {
                out[row] += net_rate;
            }
        }
    }

    /// Analytic Jacobian d(rhs)/dy into `out` (`n_dyn` × `n_dyn`).
    pub fn jacobian(&self, y: &DVector<f64>, out: &mut DMatrix<f64>) {
        out.fill(0.0);
        // (input column, d net_rate / d input) pairs per reaction.
        let mut grads: Vec<(usize, f64)> = Vec::with_capacity(4);
        for rx in &self.reactions {
            grads.clear();
            match &rx.law {
                CompiledLaw::MassAction {
                    reactants,
                    products,
                } => {
                    for (i, t) in reactants.iter().enumerate() {
                        if let Term::Dyn(col) = *t {
                            let mut g = rx.k_f;
                            for (j, u) in reactants.iter().enumerate() {
                                if j != i {
                                    g *= self.read(y, *u);
                                }
                            }
                            grads.push((col, g));
                        }
                    }
                    if rx.k_r > 0.0 {
                        for (i, t) in products.iter().enumerate() {
                            if let Term::Dyn(col) = *t {
                                let mut g = rx.k_r;
                                for (j, u) in products.iter().enumerate() {
                                    if j != i {
                                        g *= self.read(y, *u);
                                    }
                                }
                                grads.push((col, -g));
                            }
                        }
                    }
                }
                CompiledLaw::MichaelisMenten {
                    substrate,
                    enzyme,
                    km,
                } => {
                    let s = self.read(y, *substrate);
                    let e = enzyme.map(|t| self.read(y, t)).unwrap_or(1.0);
                    if let Term::Dyn(col) = *substrate {
                        grads.push((col, rx.k_f * e * km / ((km + s) * (km + s))));
                    }
                    if let Some(Term::Dyn(col)) = enzyme {
                        grads.push((*col, rx.k_f * s / (km + s)));
                    }
                }
            }
            for &(col, g) in &grads {
                for &row in &rx.reactant_rows {
                    out[(row, col)] -= g;
                }
                for &row in &rx.product_rows {
                    out[(row, col)] += g;
                }
            }
        }
    }

    /// Expands a reduced state into the full species vector.
    pub fn expand(&self, y: &DVector<f64>) -> Vec<f64> {
        let mut full = self.full_template.clone();
        for (i, &s) in self.dyn_species.iter().enumerate() {
            full[s] = y[i];
        }
        full
    }

    pub fn dyn_species(&self) -> &[SpeciesId] {
        &self.dyn_species
    }
}

fn failure_context(included: &BTreeSet<ReactionId>, params: &RateParameters) -> String {
    let ids: Vec<String> = included.iter().map(|id| id.to_string()).collect();
    let ks: Vec<String> = included
        .iter()
        .map(|&id| {
            let f = params.log10(id, Direction::Forward);
            format!("log10k{id}={f:.4}")
        })
        .collect();
    format!("reactions {{{}}}; {}", ids.join(","), ks.join(","))
}

/// Integrates the model's included reactions, reporting states at exactly the
/// requested times. `times` must be strictly increasing and non-negative.
pub fn integrate(
    net: &ReactionNetwork,
    model: &ModelIndicator,
    params: &RateParameters,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Trajectory, IntegrationError> {
    integrate_included(net, &net.included_reactions(model), params, times, cfg)
}

/// As [`integrate`] for an explicit reaction set (e.g. an effective network).
pub fn integrate_included(
    net: &ReactionNetwork,
    included: &BTreeSet<ReactionId>,
    params: &RateParameters,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Trajectory, IntegrationError> {
    assert!(!times.is_empty(), "at least one output time required");
    assert!(times[0] >= 0.0, "output times must be non-negative");
    assert!(
        times.windows(2).all(|w| w[0] < w[1]),
        "output times must be strictly increasing"
    );
    let sys = ReducedSystem::new(net, included, params);
    let states = if sys.n_dyn() == 0 {
        times.iter().map(|_| sys.initial_state()).collect()
    } else {
        esdirk::integrate(&sys, 0.0, sys.initial_state(), times, cfg).map_err(|raw| {
            let context = failure_context(included, params);
            match raw {
                esdirk::RawFailure::StepsExhausted { t } => IntegrationError::StepsExhausted {
                    t,
                    max_steps: cfg.max_steps,
                    context,
                },
                esdirk::RawFailure::NonFinite { t } => IntegrationError::NonFinite { t, context },
                esdirk::RawFailure::NegativeState { t } => {
                    IntegrationError::NegativeState { t, context }
                }
                esdirk::RawFailure::StepUnderflow { t } => {
                    IntegrationError::StepUnderflow { t, context }
                }
            }
        })?
    };
    Ok(Trajectory {
        times: times.to_vec(),
        states: times
            .iter()
            .zip(states)
            .map(|(&t, y)| ConcentrationState {
                values: sys.expand(&y),
                time: t,
            })
            .collect(),
    })
}

/// Observed-species predictions `G(M, k_M)`: concatenated observed values at
/// the requested times, time-major then species id.
pub fn predict_observables(
    net: &ReactionNetwork,
    model: &ModelIndicator,
    params: &RateParameters,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>, IntegrationError> {
    predict_observables_included(net, &net.included_reactions(model), params, times, cfg)
}

/// As [`predict_observables`] for an explicit reaction set.
pub fn predict_observables_included(
    net: &ReactionNetwork,
    included: &BTreeSet<ReactionId>,
    params: &RateParameters,
    times: &[f64],
    cfg: &IntegratorConfig,
) -> Result<Vec<f64>, IntegrationError> {
    let observed = net.observed_species();
    let traj = integrate_included(net, included, params, times, cfg)?;
    let mut out = Vec::with_capacity(times.len() * observed.len());
    for state in &traj.states {
        for &s in &observed {
            out.push(state.values[s]);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::presets;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn full_model(net: &ReactionNetwork) -> ModelIndicator {
        ModelIndicator::all(net.n_uncertain())
    }

    fn state_at(net: &ReactionNetwork, values: Vec<f64>) -> ConcentrationState {
        assert_eq!(values.len(), net.species.len());
        ConcentrationState { values, time: 0.0 }
    }

    fn initial_state(net: &ReactionNetwork) -> ConcentrationState {
        state_at(
            net,
            net.species
                .iter()
                .map(|s| s.initial_concentration)
                .collect(),
        )
    }

    #[test]
    fn mass_action_rate_matches_hand_evaluation() {
        // Reaction 2 forward at log10 k = 1.5, [EGF] = 1000,
        // [unboundEGFR] = 500: 10^1.5 * 1000 * 500.
        let net = presets::five_reaction_problem();
        let params = RateParameters::base_values(&net);
        let conc = initial_state(&net);
        let (fwd, rev) = reaction_rate(net.reaction(2), &params, &conc);
        let expected = 10f64.powf(1.5) * 1000.0 * 500.0;
        assert!((fwd - expected).abs() / expected < 1e-14);
        assert!((fwd - 1.5811388300841898e7).abs() / expected < 1e-12);
        // Reverse direction: k = 10^0 times [boundEGFR] = 0 initially.
        assert_eq!(rev, Some(0.0));
    }

    #[test]
    fn michaelis_menten_rate_matches_hand_evaluation() {
        // Reaction 12 at log10 k = 2.5, k_M = 8176.56, [boundEGFR] = 1,
        // [inactiveSOS] = 1200: 10^2.5 * 1 * 1200 / (8176.56 + 1200).
        let net = presets::five_reaction_problem();
        let params = RateParameters::base_values(&net);
        let mut conc = initial_state(&net);
        conc.values[net.species_index("boundEGFR").unwrap()] = 1.0;
        let (rate, rev) = reaction_rate(net.reaction(12), &params, &conc);
        let expected = 10f64.powf(2.5) * 1.0 * 1200.0 / (8176.56 + 1200.0);
        assert!((rate - expected).abs() / expected < 1e-14);
        assert!((rate - 40.470_419_772_305_14).abs() < 1e-9);
        assert_eq!(rev, None);
    }

    #[test]
    fn zero_substrate_gives_zero_rate() {
        let net = presets::five_reaction_problem();
        let params = RateParameters::base_values(&net);
        let conc = initial_state(&net);
        // activeC3G starts at zero, so reaction 4 cannot fire.
        let (rate, _) = reaction_rate(net.reaction(4), &params, &conc);
        assert_eq!(rate, 0.0);
        // Slightly negative values are clamped, not propagated.
        let mut conc = initial_state(&net);
        conc.values[net.species_index("activeC3G").unwrap()] = -1e-12;
        let (rate, _) = reaction_rate(net.reaction(4), &params, &conc);
        assert_eq!(rate, 0.0);
    }

    #[test]
    fn rhs_at_initial_state_matches_hand_values() {
        let net = presets::five_reaction_problem();
        let params = RateParameters::base_values(&net);
        let dydt = assemble_rhs(&net, &full_model(&net), &params, &initial_state(&net));
        // Gap is only ever an enzyme.
        assert_eq!(dydt[net.species_index("Gap").unwrap()], 0.0);
        // degradedEGFR production is k1*[boundEGFR] and boundEGFR starts at 0.
        assert_eq!(dydt[net.species_index("degradedEGFR").unwrap()], 0.0);
        // EGF is consumed at the mass-action rate of reaction 2.
        let expected = -(10f64.powf(1.5) * 1000.0 * 500.0);
        let egf = dydt[net.species_index("EGF").unwrap()];
        assert!((egf - expected).abs() / expected.abs() < 1e-14);
    }

    /// Independent transcription of the published per-species production
    /// rates for the 12-reaction cascade, with the activeRap1 equation's
    /// reaction-7 term carrying the sign stoichiometry forces (the source
    /// writes "+"; reaction 7 consumes activeRap1, and the Rap1 conservation
    /// law requires "−").
    fn reference_rhs(net: &ReactionNetwork, params: &RateParameters, c: &[f64]) -> Vec<f64> {
        let id = |name: &str| net.species_index(name).unwrap();
        let k = |rid: u32| params.k(rid, Direction::Forward);
        let km = |rid: u32| params.michaelis(rid);
        let mm = |rid: u32, e: f64, s: f64| k(rid) * e * s / (km(rid) + s);
        let mm0 = |rid: u32, s: f64| k(rid) * s / (km(rid) + s);
        let k2f = params.k(2, Direction::Forward);
        let k2r = params.k(2, Direction::Reverse);

        let uegfr = c[id("unboundEGFR")];
        let begfr = c[id("boundEGFR")];
        let egf = c[id("EGF")];
        let isos = c[id("inactiveSOS")];
        let asos = c[id("activeSOS")];
        let iras = c[id("inactiveRas")];
        let aras = c[id("activeRas")];
        let irap = c[id("inactiveRap1")];
        let arap = c[id("activeRap1")];
        let ic3g = c[id("inactiveC3G")];
        let ac3g = c[id("activeC3G")];
        let braf = c[id("BRaf")];
        let gap = c[id("Gap")];

        let mut d = vec![0.0; net.species.len()];
        d[id("unboundEGFR")] = -k2f * egf * uegfr + k2r * begfr;
        d[id("inactiveSOS")] = -mm(12, begfr, isos) + mm0(11, asos);
        d[id("inactiveRas")] = -mm(10, asos, iras) + mm(9, gap, aras);
        d[id("inactiveRap1")] = mm(7, gap, arap) - mm(5, ac3g, irap);
        d[id("boundEGFR")] = k2f * egf * uegfr - k2r * begfr - k(1) * begfr;
        d[id("activeSOS")] = mm(12, begfr, isos) - mm0(11, asos);
        d[id("activeRas")] = mm(10, asos, iras) - mm(9, gap, aras);
        d[id("activeRap1")] = -mm(7, gap, arap) + mm(5, ac3g, irap);
        d[id("EGF")] = -k2f * egf * uegfr + k2r * begfr;
        d[id("BRafPP")] = mm(6, arap, braf) + mm(8, aras, braf);
        d[id("BRaf")] = -mm(6, arap, braf) - mm(8, aras, braf);
        d[id("activeC3G")] = mm(3, begfr, ic3g) - k(4) * ac3g;
        d[id("inactiveC3G")] = -mm(3, begfr, ic3g) + k(4) * ac3g;
        d[id("degradedEGFR")] = k(1) * begfr;
        d[id("Gap")] = 0.0;
        d
    }

    #[test]
    fn generic_assembly_matches_transcribed_production_rates() {
        let net = presets::five_reaction_problem();
        let mut rng = ChaCha12Rng::seed_from_u64(901);
        for trial in 0..100 {
            let mut params = RateParameters::base_values(&net);
            if trial % 2 == 1 {
                for rid in 1..=12u32 {
                    let jitter: f64 = rng.random_range(-0.5..0.5);
                    params.set_log10(
                        rid,
                        Direction::Forward,
                        net.reaction(rid).base_log10_k + jitter,
                    );
                }
            }
            let values: Vec<f64> = (0..net.species.len())
                .map(|_| rng.random_range(0.0..2000.0))
                .collect();
            let conc = state_at(&net, values.clone());
            let got = assemble_rhs(&net, &full_model(&net), &params, &conc);
            let want = reference_rhs(&net, &params, &values);
            for (s, (g, w)) in got.iter().zip(&want).enumerate() {
                let scale = w.abs().max(1.0);
                assert!(
                    (g - w).abs() / scale < 1e-12,
                    "species {s}: {g} vs {w} (trial {trial})"
                );
            }
        }
    }

    #[test]
    fn conserved_family_rhs_sums_vanish_at_random_states() {
        let net = presets::five_reaction_problem();
        let params = RateParameters::base_values(&net);
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let families: Vec<Vec<&str>> = vec![
            vec!["unboundEGFR", "boundEGFR", "degradedEGFR"],
            vec!["EGF", "boundEGFR", "degradedEGFR"],
            vec!["inactiveSOS", "activeSOS"],
            vec!["inactiveRas", "activeRas"],
            vec!["inactiveRap1", "activeRap1"],
            vec!["inactiveC3G", "activeC3G"],
            vec!["BRaf", "BRafPP"],
            vec!["Gap"],
        ];
        for _ in 0..20 {
            let values: Vec<f64> = (0..net.species.len())
                .map(|_| rng.random_range(0.0..2000.0))
                .collect();
            let dydt = assemble_rhs(&net, &full_model(&net), &params, &state_at(&net, values));
            for family in &families {
                let total: f64 = family
                    .iter()
                    .map(|n| dydt[net.species_index(n).unwrap()])
                    .sum();
                assert!(total.abs() < 1e-6, "family {family:?} drifts: {total}");
            }
        }
    }

    #[test]
    fn directional_rates_are_nonnegative() {
        let net = presets::five_reaction_problem();
        let params = RateParameters::base_values(&net);
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..200 {
            let values: Vec<f64> = (0..net.species.len())
                .map(|_| rng.random_range(0.0..5000.0))
                .collect();
            let conc = state_at(&net, values);
            for rx in &net.reactions {
                let (fwd, rev) = reaction_rate(rx, &params, &conc);
                assert!(fwd >= 0.0);
                if let Some(r) = rev {
                    assert!(r >= 0.0);
                }
            }
        }
    }

    #[test]
    fn reduced_system_agrees_with_generic_assembly() {
        let net = presets::five_reaction_problem();
        let params = RateParameters::base_values(&net);
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for mask in [0b11111u64, 0b00101, 0b00000, 0b10011] {
            let model = ModelIndicator::from_mask(mask, 5);
            let included = net.included_reactions(&model);
            let sys = ReducedSystem::new(&net, &included, &params);
            for _ in 0..10 {
                // Species no included reaction can move stay pinned at their
                // initial concentrations; randomize only the dynamic ones.
                let mut full: Vec<f64> = net
                    .species
                    .iter()
                    .map(|s| s.initial_concentration)
                    .collect();
                for &s in sys.dyn_species() {
                    full[s] = rng.random_range(0.0..2000.0);
                }
                let reduced = DVector::from_iterator(
                    sys.dyn_species.len(),
                    sys.dyn_species.iter().map(|&s| full[s]),
                );
                let mut out = DVector::zeros(sys.n_dyn());
                sys.rhs(&reduced, &mut out);
                let want = assemble_rhs_included(&net, &included, &params, &state_at(&net, full));
                for (i, &s) in sys.dyn_species.iter().enumerate() {
                    let scale = want[s].abs().max(1.0);
                    assert!((out[i] - want[s]).abs() / scale < 1e-12);
                }
            }
        }
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let net = presets::five_reaction_problem();
        let params = RateParameters::base_values(&net);
        let included = net.included_reactions(&full_model(&net));
        let sys = ReducedSystem::new(&net, &included, &params);
        let n = sys.n_dyn();
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let y = DVector::from_iterator(n, (0..n).map(|_| rng.random_range(10.0..2000.0)));
        let mut jac = DMatrix::zeros(n, n);
        sys.jacobian(&y, &mut jac);
        let mut f_plus = DVector::zeros(n);
        let mut f_minus = DVector::zeros(n);
        for col in 0..n {
            let h = 1e-5 * y[col].abs().max(1.0);
            let mut yp = y.clone();
            yp[col] += h;
            let mut ym = y.clone();
            ym[col] -= h;
            sys.rhs(&yp, &mut f_plus);
            sys.rhs(&ym, &mut f_minus);
            for row in 0..n {
                let fd = (f_plus[row] - f_minus[row]) / (2.0 * h);
                let scale = fd.abs().max(1e-2);
                assert!(
                    (jac[(row, col)] - fd).abs() / scale < 1e-4,
                    "J[{row},{col}] = {} vs fd {}",
                    jac[(row, col)],
                    fd
                );
            }
        }
    }

    #[test]
    fn zero_reaction_model_stays_at_the_initial_state() {
        let net = presets::ten_reaction_problem();
        let times = [0.5, 1.0, 2.0];
        let params = RateParameters::base_values(&net);
        let traj = integrate_included(&net, &BTreeSet::new(), &params, &times, &Default::default())
            .unwrap();
        for state in &traj.states {
            for (s, sp) in net.species.iter().enumerate() {
                assert_eq!(state.values[s], sp.initial_concentration);
            }
        }
    }

    #[test]
    fn conservation_holds_along_the_base_trajectory() {
        let net = presets::five_reaction_problem();
        let params = RateParameters::base_values(&net);
        let cfg = IntegratorConfig::default();
        let times: Vec<f64> = (1..=50).map(|i| 0.2 * i as f64).collect();
        let traj = integrate(&net, &full_model(&net), &params, &times, &cfg).unwrap();
        let totals: Vec<(Vec<&str>, f64)> = vec![
            (vec!["unboundEGFR", "boundEGFR", "degradedEGFR"], 500.0),
            (vec!["EGF", "boundEGFR", "degradedEGFR"], 1000.0),
            (vec!["inactiveSOS", "activeSOS"], 1200.0),
            (vec!["inactiveRas", "activeRas"], 1200.0),
            (vec!["inactiveRap1", "activeRap1"], 1200.0),
            (vec!["inactiveC3G", "activeC3G"], 1200.0),
            (vec!["BRaf", "BRafPP"], 1500.0),
            (vec!["Gap"], 2400.0),
        ];
        for state in &traj.states {
            for (family, expected) in &totals {
                let total: f64 = family
                    .iter()
                    .map(|n| state.values[net.species_index(n).unwrap()])
                    .sum();
                assert!(
                    (total - expected).abs() / expected < 10.0 * cfg.rel_tol,
                    "family {family:?} at t={}: {total} vs {expected}",
                    state.time
                );
            }
        }
    }

    #[test]
    fn integration_reports_exactly_the_requested_times() {
        let net = presets::five_reaction_problem();
        let params = RateParameters::base_values(&net);
        let times = [0.0, 0.13, 0.77, 1.9];
        let traj =
            integrate(&net, &full_model(&net), &params, &times, &Default::default()).unwrap();
        assert_eq!(traj.times, times.to_vec());
        assert_eq!(traj.states.len(), 4);
        // Time zero reproduces the initial concentrations exactly.
        for (s, sp) in net.species.iter().enumerate() {
            assert_eq!(traj.states[0].values[s], sp.initial_concentration);
        }
    }

    #[test]
    fn self_convergence_under_tolerance_refinement() {
        let net = presets::five_reaction_problem();
        let params = RateParameters::base_values(&net);
        let times = [0.5, 1.0, 2.0, 4.0];
        let braf = net.species_index("BRaf").unwrap();
        let run = |rel: f64| {
            let cfg = IntegratorConfig {
                rel_tol: rel,
                abs_tol: rel * 1e-2,
                max_steps: 1_000_000,
            };
            integrate(&net, &full_model(&net), &params, &times, &cfg)
                .unwrap()
                .series(braf)
        };
        let reference = run(1e-11);
        let mut errors = Vec::new();
        for rel in [1e-5, 5e-6, 2.5e-6] {
            let got = run(rel);
            let err = got
                .iter()
                .zip(&reference)
                .map(|(g, r)| (g - r).abs() / r.abs().max(1.0))
                .fold(0.0f64, f64::max);
            errors.push(err);
        }
        // Errors shrink under refinement and stay within an order of
        // magnitude of the coarser tolerance.
        assert!(errors[2] <= errors[0] + 1e-12, "{errors:?}");
        assert!(errors[0] < 10.0 * 1e-5, "{errors:?}");
        assert!(errors[2] < 10.0 * 2.5e-6, "{errors:?}");
    }

    #[test]
    fn effective_network_reproduces_observed_trajectories() {
        use crate::network::effective_network;
        let net = presets::five_reaction_problem();
        let cfg = IntegratorConfig::default();
        let times: Vec<f64> = (1..=10).map(|i| 0.4 * i as f64).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(2024);
        for mask in [0b00110u64, 0b01011, 0b11101] {
            let model = ModelIndicator::from_mask(mask, 5);
            let mut params = RateParameters::base_values(&net);
            for &id in &net.uncertain_ids {
                let p = net.reaction(id).priors[0];
                params.set_log10(
                    id,
                    Direction::Forward,
                    p.mean + p.sd() * rng.random_range(-1.0..1.0),
                );
            }
            let en = effective_network(&net, &model);
            let full = predict_observables(&net, &model, &params, &times, &cfg).unwrap();
            let reduced =
                predict_observables_included(&net, &en.reaction_ids, &params, &times, &cfg)
                    .unwrap();
            for (f, r) in full.iter().zip(&reduced) {
                assert!((f - r).abs() / f.abs().max(1.0) < 10.0 * cfg.rel_tol);
            }
            // Perturbing a non-EN reaction by a factor of 10 leaves the
            // observables unchanged.
            let included = net.included_reactions(&model);
            if let Some(&outside) = included.iter().find(|id| !en.contains(**id)) {
                let mut perturbed = params.clone();
                perturbed.set_log10(
                    outside,
                    Direction::Forward,
                    params.log10(outside, Direction::Forward) + 1.0,
                );
                let again = predict_observables(&net, &model, &perturbed, &times, &cfg).unwrap();
                for (f, a) in full.iter().zip(&again) {
                    assert!((f - a).abs() / f.abs().max(1.0) < 10.0 * cfg.rel_tol);
                }
            }
        }
    }

    #[test]
    fn base_value_predictions_stay_in_physical_bounds() {
        let net = presets::five_reaction_problem();
        let params = RateParameters::base_values(&net);
        let times: Vec<f64> = (1..=20).map(|i| 0.2 * i as f64).collect();
        let g = predict_observables(&net, &full_model(&net), &params, &times, &Default::default())
            .unwrap();
        assert_eq!(g.len(), 20);
        for v in &g {
            assert!(
                v.is_finite() && *v > 0.0 && *v <= 1500.0 + 1e-6,
                "BRaf = {v}"
            );
        }
        // BRaf only ever decays from its initial 1500.
        assert!(g.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    }
}
