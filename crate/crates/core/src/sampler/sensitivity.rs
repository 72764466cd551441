//! Expected local sensitivity indices and the selection of common reactions
//! whose rate constants are refreshed during sensitivity-based jumps.
//!
//! The index of reaction `i` in a network is the average, over a few draws
//! of `k_i` from its prior with every other rate constant clamped at its
//! nominal value (the prior mean), of the absolute local derivative of the
//! conditional log posterior with respect to `log10 k_i`. Reactions outside
//! the effective network cannot move the observables, so their index is 0
//! without any evaluation.

use std::collections::{BTreeSet, HashMap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};

use crate::bayes::{normal_log_density, Evaluator};
use crate::network::{EffectiveNetworkKey, ReactionId};

/// Central-difference step for the local sensitivity derivative, log10 units.
const SENS_FD_STEP: f64 = 1e-3;

/// Average absolute local derivative of the conditional log posterior with
/// respect to one reaction's log10 rate constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensitivityIndex {
    pub reaction: ReactionId,
    pub index: f64,
}

/// Sensitivity indices for every uncertain reaction inside an effective
/// network, at nominal values (prior means) for all other coordinates.
///
/// Draws come from a stream derived from `(seed, en)` so that cached values
/// are independent of when the sampler first needs them.
pub fn sensitivity_indices(
    eval: &Evaluator,
    en: &EffectiveNetworkKey,
    n_draws: usize,
    seed: u64,
) -> Vec<SensitivityIndex> {
    let layout = eval.layout();
    let slots = eval.en_slots(en);
    let nominal: Vec<f64> = (0..layout.n_coords())
        .map(|s| layout.prior(s).mean)
        .collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ fnv_hash(en));
    let mut out: Vec<SensitivityIndex> = Vec::new();
    for &slot in &slots {
        let prior = layout.prior(slot);
        let mut total = 0.0;
        let mut used = 0usize;
        for _ in 0..n_draws {
            let z: f64 = rng.sample(StandardNormal);
            let draw = prior.mean + prior.sd() * z;
            let mut coords = nominal.clone();
            coords[slot] = draw + SENS_FD_STEP;
            let up = conditional_log_post(eval, en, &coords, slot);
            coords[slot] = draw - SENS_FD_STEP;
            let down = conditional_log_post(eval, en, &coords, slot);
            if up.is_finite() && down.is_finite() {
                total += ((up - down) / (2.0 * SENS_FD_STEP)).abs();
                used += 1;
            }
        }
        let index = if used > 0 { total / used as f64 } else { 0.0 };
        let reaction = layout.slot(slot).reaction;
        match out.iter_mut().find(|s| s.reaction == reaction) {
            // Reversible reactions: keep the larger of the two directions.
            Some(existing) => existing.index = existing.index.max(index),
            None => out.push(SensitivityIndex { reaction, index }),
        }
    }
    out
}

fn conditional_log_post(
    eval: &Evaluator,
    en: &EffectiveNetworkKey,
    coords: &[f64],
    slot: usize,
) -> f64 {
    let ll = eval.log_likelihood_on(&en.reaction_ids, coords, eval.proposal_integrator_config());
    if ll == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let p = eval.layout().prior(slot);
    ll + normal_log_density(coords[slot], p.mean, p.variance)
}

/// Deterministic hash of an EN key for stream derivation.
fn fnv_hash(en: &EffectiveNetworkKey) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &id in &en.reaction_ids {
        h ^= id as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Per-run cache of sensitivity rankings, keyed by effective network.
#[derive(Debug, Default)]
pub struct SensitivityCache {
    map: HashMap<EffectiveNetworkKey, Vec<SensitivityIndex>>,
}

impl SensitivityCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_compute(
        &mut self,
        eval: &Evaluator,
        en: &EffectiveNetworkKey,
        n_draws: usize,
        seed: u64,
    ) -> &[SensitivityIndex] {
        self.map
            .entry(en.clone())
            .or_insert_with(|| sensitivity_indices(eval, en, n_draws, seed))
    }
}

/// Reactions common to both effective networks whose rate constants get
/// refreshed during the jump: the union of the top-`r1` sensitivities of the
/// current EN and top-`r2` of the proposed EN (`r1, r2 ~ Poisson(mean)`),
/// intersected with the common-reaction set. Ties break toward the smaller
/// reaction id.
pub fn select_common_update_set<R: Rng + ?Sized>(
    en_current: &EffectiveNetworkKey,
    en_proposed: &EffectiveNetworkKey,
    sens_current: &[SensitivityIndex],
    sens_proposed: &[SensitivityIndex],
    poisson_mean: f64,
    rng: &mut R,
) -> BTreeSet<ReactionId> {
    let pois = Poisson::new(poisson_mean).expect("positive poisson mean");
    let r1 = pois.sample(rng) as usize;
    let r2 = pois.sample(rng) as usize;
    let common: BTreeSet<ReactionId> = en_current
        .reaction_ids
        .intersection(&en_proposed.reaction_ids)
        .copied()
        .collect();
    let mut set = BTreeSet::new();
    for (list, r) in [(sens_current, r1), (sens_proposed, r2)] {
        let mut ranked: Vec<&SensitivityIndex> = list.iter().collect();
        ranked.sort_by(|a, b| {
            b.index
                .partial_cmp(&a.index)
                .unwrap()
                .then(a.reaction.cmp(&b.reaction))
        });
        for s in ranked.into_iter().take(r) {
            if common.contains(&s.reaction) {
                set.insert(s.reaction);
            }
        }
    }
    set
}
