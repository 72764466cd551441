//! Reaction-network data model and topology analysis.
//!
//! A [`ReactionNetwork`] is a hypothesis universe: a species list plus a set
//! of parameterized reactions, some of which are `fixed` (present in every
//! candidate model) and the rest uncertain. A [`ModelIndicator`] selects one
//! candidate model by toggling the uncertain reactions.
//!
//! The central topological notion is the *effective network* of a model: the
//! smallest subset of its reactions that reproduces the observable
//! trajectories for every rate-parameter setting. It is computed in two
//! passes, both pure fixed-point iterations over the network graph:
//!
//! 1. [`active_reactions`] finds the reactions that can fire at all, starting
//!    from the species with nonzero initial concentration. A reaction
//!    activates only when *all* of its reactants and enzymes are available.
//! 2. [`influences_observables`] checks whether perturbing one active
//!    reaction can reach an observed species. Influence propagates when *any*
//!    participating species is perturbed, and never propagates through an
//!    enzyme (enzyme concentrations are unaffected by the reactions they
//!    catalyze).
//!
//! Models sharing an effective network form a *cluster*; all cluster members
//! have identical marginal likelihood, which the sampler and the
//! derandomized estimators exploit.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Index into [`ReactionNetwork::species`].
pub type SpeciesId = usize;
/// Stable external reaction id (as written in network spec files).
pub type ReactionId = u32;

/// Rate-law family of a reaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RateLaw {
    MassAction,
    MichaelisMenten,
}

/// Direction of a rate constant. Irreversible reactions only have `Forward`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Forward,
    Reverse,
}

/// Normal prior on a log10 rate constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatePrior {
    pub mean: f64,
    /// Variance (sigma squared), not standard deviation.
    pub variance: f64,
}

impl RatePrior {
    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// A chemical species.
#[derive(Debug, Clone, PartialEq)]
pub struct Species {
    pub name: String,
    pub initial_concentration: f64,
    pub observed: bool,
}

/// A parameterized reaction.
///
/// `enzymes` are species required for the reaction to proceed but neither
/// consumed nor produced. Michaelis-Menten reactions have exactly one
/// reactant (the substrate) and at most one enzyme.
#[derive(Debug, Clone, PartialEq)]
pub struct Reaction {
    pub id: ReactionId,
    pub reactants: BTreeSet<SpeciesId>,
    pub products: BTreeSet<SpeciesId>,
    pub enzymes: BTreeSet<SpeciesId>,
    pub reversible: bool,
    pub rate_law: RateLaw,
    /// Base-10 log of the forward rate constant's base value.
    pub base_log10_k: f64,
    /// Reverse base value; present iff `reversible`.
    pub base_log10_k_reverse: Option<f64>,
    pub michaelis_constant: Option<f64>,
    pub fixed: bool,
    /// One prior per uncertain rate constant: `[forward]` or
    /// `[forward, reverse]`. Empty for fixed reactions.
    pub priors: Vec<RatePrior>,
}

impl Reaction {
    /// Number of rate constants this reaction carries (2 if reversible).
    pub fn n_rate_constants(&self) -> usize {
        if self.reversible {
            2
        } else {
            1
        }
    }

    pub fn base_log10(&self, dir: Direction) -> f64 {
        match dir {
            Direction::Forward => self.base_log10_k,
            Direction::Reverse => self
                .base_log10_k_reverse
                .expect("reverse rate constant on irreversible reaction"),
        }
    }
}

/// The hypothesis universe: species plus proposed reactions.
#[derive(Debug, Clone, PartialEq)]
pub struct ReactionNetwork {
    pub species: Vec<Species>,
    pub reactions: Vec<Reaction>,
    /// Uncertain reaction ids in ascending order; positions in this list
    /// index [`ModelIndicator`] bits.
    pub uncertain_ids: Vec<ReactionId>,
}

impl ReactionNetwork {
    /// Assembles a network, deriving `uncertain_ids` from the non-fixed
    /// reactions in ascending id order.
    pub fn new(species: Vec<Species>, reactions: Vec<Reaction>) -> Self {
        let mut uncertain_ids: Vec<ReactionId> = reactions
            .iter()
            .filter(|r| !r.fixed)
            .map(|r| r.id)
            .collect();
        uncertain_ids.sort_unstable();
        ReactionNetwork {
            species,
            reactions,
            uncertain_ids,
        }
    }

    pub fn species_index(&self, name: &str) -> Option<SpeciesId> {
        self.species.iter().position(|s| s.name == name)
    }

    pub fn reaction(&self, id: ReactionId) -> &Reaction {
        self.reactions
            .iter()
            .find(|r| r.id == id)
            .unwrap_or_else(|| panic!("unknown reaction id {id}"))
    }

    pub fn n_uncertain(&self) -> usize {
        self.uncertain_ids.len()
    }

    /// Position of an uncertain reaction id in the indicator bit vector.
    pub fn uncertain_position(&self, id: ReactionId) -> Option<usize> {
        self.uncertain_ids.iter().position(|&u| u == id)
    }

    /// Observed species ids in ascending order.
    pub fn observed_species(&self) -> Vec<SpeciesId> {
        (0..self.species.len())
            .filter(|&i| self.species[i].observed)
            .collect()
    }

    /// Ids of species with nonzero initial concentration.
    pub fn initially_present(&self) -> BTreeSet<SpeciesId> {
        (0..self.species.len())
            .filter(|&i| self.species[i].initial_concentration > 0.0)
            .collect()
    }

    /// Reaction ids included by a model: all fixed reactions plus the
    /// uncertain reactions the indicator switches on.
    pub fn included_reactions(&self, model: &ModelIndicator) -> BTreeSet<ReactionId> {
        let mut ids: BTreeSet<ReactionId> = self
            .reactions
            .iter()
            .filter(|r| r.fixed)
            .map(|r| r.id)
            .collect();
        for (pos, &id) in self.uncertain_ids.iter().enumerate() {
            if model.included[pos] {
                ids.insert(id);
            }
        }
        ids
    }
}

/// Inclusion vector over the uncertain reactions; identifies one candidate
/// model. Fixed reactions are implicitly always included.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ModelIndicator {
    pub included: Vec<bool>,
}

impl ModelIndicator {
    pub fn none(n: usize) -> Self {
        ModelIndicator {
            included: vec![false; n],
        }
    }

    pub fn all(n: usize) -> Self {
        ModelIndicator {
            included: vec![true; n],
        }
    }

    /// Bit `pos` set iff uncertain reaction at that position is included.
    pub fn from_mask(mask: u64, n: usize) -> Self {
        assert!(n <= 64);
        ModelIndicator {
            included: (0..n).map(|i| mask >> i & 1 == 1).collect(),
        }
    }

    pub fn mask(&self) -> u64 {
        assert!(self.included.len() <= 64);
        self.included
            .iter()
            .enumerate()
            .fold(0u64, |m, (i, &b)| if b { m | 1 << i } else { m })
    }

    pub fn len(&self) -> usize {
        self.included.len()
    }

    pub fn is_empty(&self) -> bool {
        self.included.is_empty()
    }

    pub fn count_included(&self) -> usize {
        self.included.iter().filter(|&&b| b).count()
    }

    pub fn toggled(&self, pos: usize) -> Self {
        let mut m = self.clone();
        m.included[pos] = !m.included[pos];
        m
    }

    /// Bitwise subset relation (self included in other).
    pub fn is_subset_of(&self, other: &ModelIndicator) -> bool {
        self.included
            .iter()
            .zip(&other.included)
            .all(|(&a, &b)| !a || b)
    }

    /// 0/1 string in uncertain-id order, first uncertain id leftmost.
    pub fn bits_string(&self) -> String {
        self.included
            .iter()
            .map(|&b| if b { '1' } else { '0' })
            .collect()
    }

    pub fn from_bits_string(s: &str) -> Option<Self> {
        let mut included = Vec::with_capacity(s.len());
        for c in s.chars() {
            match c {
                '0' => included.push(false),
                '1' => included.push(true),
                _ => return None,
            }
        }
        Some(ModelIndicator { included })
    }
}

impl fmt::Display for ModelIndicator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.bits_string())
    }
}

/// Sorted reaction-id set identifying an effective network. Key equality
/// defines the cluster relation.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct EffectiveNetworkKey {
    pub reaction_ids: BTreeSet<ReactionId>,
}

impl EffectiveNetworkKey {
    pub fn from_ids<I: IntoIterator<Item = ReactionId>>(ids: I) -> Self {
        EffectiveNetworkKey {
            reaction_ids: ids.into_iter().collect(),
        }
    }

    pub fn contains(&self, id: ReactionId) -> bool {
        self.reaction_ids.contains(&id)
    }

    pub fn len(&self) -> usize {
        self.reaction_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reaction_ids.is_empty()
    }
}

impl fmt::Display for EffectiveNetworkKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{{")?;
        for (i, id) in self.reaction_ids.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{id}")?;
        }
        write!(f, "}}")
    }
}

/// A named constraint violation found by [`validate_network`].
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    /// Which element is at fault, e.g. `reaction 3` or `species X`.
    pub element: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.element, self.message)
    }
}

/// Checks every structural invariant of the network; returns an empty list
/// iff the network is well formed. Purely diagnostic, never panics.
pub fn validate_network(net: &ReactionNetwork) -> Vec<Violation> {
    let mut out = Vec::new();
    let n_species = net.species.len();

    let mut seen_names: BTreeSet<&str> = BTreeSet::new();
    for sp in &net.species {
        if !seen_names.insert(sp.name.as_str()) {
            out.push(Violation {
                element: format!("species {}", sp.name),
                message: "duplicate species name".into(),
            });
        }
        if !(sp.initial_concentration >= 0.0) {
            out.push(Violation {
                element: format!("species {}", sp.name),
                message: format!(
                    "initial concentration must be non-negative, got {}",
                    sp.initial_concentration
                ),
            });
        }
    }
    if !net.species.iter().any(|s| s.observed) {
        out.push(Violation {
            element: "network".into(),
            message: "no species is observed".into(),
        });
    }

    let mut seen_ids: BTreeSet<ReactionId> = BTreeSet::new();
    for rx in &net.reactions {
        let el = format!("reaction {}", rx.id);
        if !seen_ids.insert(rx.id) {
            out.push(Violation {
                element: el.clone(),
                message: "duplicate reaction id".into(),
            });
        }
        for &sid in rx.reactants.iter().chain(&rx.products).chain(&rx.enzymes) {
            if sid >= n_species {
                out.push(Violation {
                    element: el.clone(),
                    message: format!("references unknown species index {sid}"),
                });
            }
        }
        let rp: Vec<_> = rx.reactants.intersection(&rx.products).collect();
        let re: Vec<_> = rx.reactants.intersection(&rx.enzymes).collect();
        let pe: Vec<_> = rx.products.intersection(&rx.enzymes).collect();
        if !rp.is_empty() || !re.is_empty() || !pe.is_empty() {
            out.push(Violation {
                element: el.clone(),
                message: "reactants, products and enzymes must be pairwise disjoint".into(),
            });
        }
        match rx.rate_law {
            RateLaw::MassAction => {
                if rx.michaelis_constant.is_some() {
                    out.push(Violation {
                        element: el.clone(),
                        message: "mass-action reaction must not carry a Michaelis constant".into(),
                    });
                }
            }
            RateLaw::MichaelisMenten => {
                match rx.michaelis_constant {
                    Some(km) if km > 0.0 => {}
                    Some(km) => out.push(Violation {
                        element: el.clone(),
                        message: format!("Michaelis constant must be positive, got {km}"),
                    }),
                    None => out.push(Violation {
                        element: el.clone(),
                        message: "Michaelis-Menten reaction requires a Michaelis constant".into(),
                    }),
                }
                if rx.reactants.len() != 1 {
                    out.push(Violation {
                        element: el.clone(),
                        message: format!(
                            "Michaelis-Menten reaction requires exactly one substrate, got {}",
                            rx.reactants.len()
                        ),
                    });
                }
                if rx.enzymes.len() > 1 {
                    out.push(Violation {
                        element: el.clone(),
                        message: "Michaelis-Menten reaction admits at most one enzyme".into(),
                    });
                }
                if rx.reversible {
                    out.push(Violation {
                        element: el.clone(),
                        message: "reversible Michaelis-Menten kinetics are not supported".into(),
                    });
                }
            }
        }
        if rx.reversible != rx.base_log10_k_reverse.is_some() {
            out.push(Violation {
                element: el.clone(),
                message: "reverse base rate constant present iff reaction is reversible".into(),
            });
        }
        let expected_priors = if rx.fixed { 0 } else { rx.n_rate_constants() };
        if rx.priors.len() != expected_priors {
            out.push(Violation {
                element: el.clone(),
                message: format!(
                    "expected {} prior(s), got {}",
                    expected_priors,
                    rx.priors.len()
                ),
            });
        }
        for p in &rx.priors {
            if !(p.variance > 0.0) {
                out.push(Violation {
                    element: el.clone(),
                    message: format!("prior variance must be positive, got {}", p.variance),
                });
            }
        }
    }
    out
}

/// Fixed-point activation analysis over an included-reaction set.
///
/// Starting from the initially present species, an irreversible reaction
/// activates once all of its reactants and enzymes are available, adding its
/// products; a reversible reaction activates from either side, adding both
/// products and reactants. Iterates to a fixed point.
pub fn active_reactions(
    net: &ReactionNetwork,
    included: &BTreeSet<ReactionId>,
) -> BTreeSet<ReactionId> {
    let mut species_avail = net.initially_present();
    let mut active: BTreeSet<ReactionId> = BTreeSet::new();
    loop {
        let (n_active, n_species) = (active.len(), species_avail.len());
        for rx in net.reactions.iter().filter(|r| included.contains(&r.id)) {
            if active.contains(&rx.id) {
                continue;
            }
            let forward_ready = rx
                .reactants
                .iter()
                .chain(&rx.enzymes)
                .all(|s| species_avail.contains(s));
            let backward_ready = rx.reversible
                && rx
                    .products
                    .iter()
                    .chain(&rx.enzymes)
                    .all(|s| species_avail.contains(s));
            if forward_ready || backward_ready {
                active.insert(rx.id);
                species_avail.extend(rx.products.iter().copied());
                if rx.reversible {
                    species_avail.extend(rx.reactants.iter().copied());
                }
            }
        }
        if active.len() == n_active && species_avail.len() == n_species {
            return active;
        }
    }
}

/// Influence closure: does perturbing the rate of active reaction `r` reach
/// an observed species?
///
/// The perturbed-species set starts from the reactants and products of `r`.
/// Any active reaction that consumes, is catalyzed by, or produces a
/// perturbed species is itself perturbed, and contributes its reactants and
/// products (never its enzymes) to the set. Returns true iff the closure
/// contains an observable.
///
/// Panics if `r` is not in `active`.
pub fn influences_observables(
    net: &ReactionNetwork,
    active: &BTreeSet<ReactionId>,
    r: ReactionId,
) -> bool {
    assert!(
        active.contains(&r),
        "influence query on inactive reaction {r}"
    );
    let seed = net.reaction(r);
    let mut perturbed: BTreeSet<SpeciesId> =
        seed.reactants.union(&seed.products).copied().collect();
    let mut reached: BTreeSet<ReactionId> = BTreeSet::new();
    reached.insert(r);
    let observed: BTreeSet<SpeciesId> = net.observed_species().into_iter().collect();
    loop {
        if perturbed.iter().any(|s| observed.contains(s)) {
            return true;
        }
        let before = perturbed.len();
        for rx in net.reactions.iter().filter(|x| active.contains(&x.id)) {
            if reached.contains(&rx.id) {
                continue;
            }
            let touches = rx
                .reactants
                .iter()
                .chain(&rx.enzymes)
                .any(|s| perturbed.contains(s))
                || rx.products.iter().any(|s| perturbed.contains(s));
            if touches {
                reached.insert(rx.id);
            }
        }
        for &id in &reached {
            let rx = net.reaction(id);
            perturbed.extend(rx.reactants.iter().copied());
            perturbed.extend(rx.products.iter().copied());
        }
        if perturbed.len() == before {
            return perturbed.iter().any(|s| observed.contains(s));
        }
    }
}

/// Effective network of a model: the active reactions that influence the
/// observables. Depends only on topology; no ODE solve involved.
pub fn effective_network(net: &ReactionNetwork, model: &ModelIndicator) -> EffectiveNetworkKey {
    let included = net.included_reactions(model);
    effective_network_of_included(net, &included)
}

/// Effective network of an explicit included-reaction set.
pub fn effective_network_of_included(
    net: &ReactionNetwork,
    included: &BTreeSet<ReactionId>,
) -> EffectiveNetworkKey {
    let active = active_reactions(net, included);
    let reaction_ids = active
        .iter()
        .copied()
        .filter(|&r| influences_observables(net, &active, r))
        .collect();
    EffectiveNetworkKey { reaction_ids }
}

/// Memoization cache for effective networks, keyed by model bit mask.
/// Intended to be held per chain; computing an entry is cheap but the
/// sampler asks for the same models constantly.
#[derive(Debug, Default, Clone)]
pub struct EnCache {
    map: HashMap<u64, EffectiveNetworkKey>,
}

impl EnCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get_or_compute(
        &mut self,
        net: &ReactionNetwork,
        model: &ModelIndicator,
    ) -> EffectiveNetworkKey {
        self.map
            .entry(model.mask())
            .or_insert_with(|| effective_network(net, model))
            .clone()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Errors from network-level operations.
#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(
        "model space has 2^{n_uncertain} models, above the enumeration cap 2^{cap}; \
         use online clustering (memoized effective networks during sampling) instead"
    )]
    EnumerationCapExceeded { n_uncertain: usize, cap: usize },
    #[error("network spec: {0}")]
    Spec(String),
    #[error("network validation failed:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Invalid(Vec<Violation>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Partition of the full model space by effective-network key.
#[derive(Debug, Clone)]
pub struct ClusterMap {
    /// Deterministic order: keys ascending; member models in mask order.
    pub clusters: BTreeMap<EffectiveNetworkKey, Vec<ModelIndicator>>,
}

impl ClusterMap {
    pub fn n_clusters(&self) -> usize {
        self.clusters.len()
    }

    /// Number of distinct nonempty effective networks. Models in which no
    /// reaction can influence an observable share the empty key; they form a
    /// regular cluster for estimation purposes but no effective *network*.
    pub fn n_effective_networks(&self) -> usize {
        self.clusters.keys().filter(|k| !k.is_empty()).count()
    }

    pub fn n_models(&self) -> usize {
        self.clusters.values().map(|v| v.len()).sum()
    }

    pub fn cluster_of(&self, key: &EffectiveNetworkKey) -> Option<&[ModelIndicator]> {
        self.clusters.get(key).map(|v| v.as_slice())
    }
}

/// Enumerates all `2^N` models and groups them by effective network.
///
/// Refuses to enumerate above `cap` uncertain reactions; at that point the
/// sampler's online memoization is the right tool.
pub fn enumerate_clusters(net: &ReactionNetwork, cap: usize) -> Result<ClusterMap, NetworkError> {
    let n = net.n_uncertain();
    if n > cap {
        return Err(NetworkError::EnumerationCapExceeded {
            n_uncertain: n,
            cap,
        });
    }
    let mut clusters: BTreeMap<EffectiveNetworkKey, Vec<ModelIndicator>> = BTreeMap::new();
    for mask in 0..(1u64 << n) {
        let model = ModelIndicator::from_mask(mask, n);
        let key = effective_network(net, &model);
        clusters.entry(key).or_default().push(model);
    }
    Ok(ClusterMap { clusters })
}

/// One pathway classification rule: the model must include every reaction in
/// `required`, and (when `excluded_any` is nonempty) exclude at least one
/// reaction from `excluded_any`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PathwayRule {
    pub label: String,
    #[serde(default)]
    pub required: BTreeSet<ReactionId>,
    #[serde(default)]
    pub excluded_any: BTreeSet<ReactionId>,
}

impl PathwayRule {
    pub fn matches(&self, net: &ReactionNetwork, model: &ModelIndicator) -> bool {
        let included = net.included_reactions(model);
        if !self.required.iter().all(|id| included.contains(id)) {
            return false;
        }
        if self.excluded_any.is_empty() {
            return true;
        }
        self.excluded_any.iter().any(|id| !included.contains(id))
    }
}

/// First matching rule's label, or `"other"`.
pub fn pathway_class<'a>(
    net: &ReactionNetwork,
    model: &ModelIndicator,
    rules: &'a [PathwayRule],
) -> &'a str {
    rules
        .iter()
        .find(|r| r.matches(net, model))
        .map(|r| r.label.as_str())
        .unwrap_or("other")
}

// ---------------------------------------------------------------------------
// Rate-constant coordinate layout
// ---------------------------------------------------------------------------

/// One sampled coordinate: a (reaction, direction) rate constant in log10
/// space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoordSlot {
    pub reaction: ReactionId,
    pub direction: Direction,
}

/// Dense layout of the uncertain rate-constant coordinates of a network:
/// one slot per uncertain (reaction, direction), in ascending reaction-id
/// order with forward before reverse. Chain states, proposal blocks and
/// snapshots all index into this layout.
#[derive(Debug, Clone)]
pub struct CoordLayout {
    slots: Vec<CoordSlot>,
    priors: Vec<RatePrior>,
    by_reaction: BTreeMap<ReactionId, std::ops::Range<usize>>,
}

impl CoordLayout {
    pub fn new(net: &ReactionNetwork) -> Self {
        let mut slots = Vec::new();
        let mut priors = Vec::new();
        let mut by_reaction = BTreeMap::new();
        for &id in &net.uncertain_ids {
            let rx = net.reaction(id);
            let start = slots.len();
            slots.push(CoordSlot {
                reaction: id,
                direction: Direction::Forward,
            });
            priors.push(rx.priors[0]);
            if rx.reversible {
                slots.push(CoordSlot {
                    reaction: id,
                    direction: Direction::Reverse,
                });
                priors.push(rx.priors[1]);
            }
            by_reaction.insert(id, start..slots.len());
        }
        CoordLayout {
            slots,
            priors,
            by_reaction,
        }
    }

    pub fn n_coords(&self) -> usize {
        self.slots.len()
    }

    pub fn slot(&self, idx: usize) -> CoordSlot {
        self.slots[idx]
    }

    pub fn prior(&self, idx: usize) -> RatePrior {
        self.priors[idx]
    }

    /// Coordinate index range of one uncertain reaction.
    pub fn coords_of(&self, id: ReactionId) -> std::ops::Range<usize> {
        self.by_reaction
            .get(&id)
            .cloned()
            .unwrap_or_else(|| panic!("reaction {id} is not uncertain"))
    }

    /// Coordinate indices of all uncertain reactions in `ids`, ascending.
    pub fn coords_of_ids<'a, I: IntoIterator<Item = &'a ReactionId>>(&self, ids: I) -> Vec<usize> {
        let mut v: Vec<usize> = ids
            .into_iter()
            .filter_map(|id| self.by_reaction.get(id).cloned())
            .flatten()
            .collect();
        v.sort_unstable();
        v
    }

    /// Prior means over all coordinates.
    pub fn prior_means(&self) -> Vec<f64> {
        self.priors.iter().map(|p| p.mean).collect()
    }
}

// ---------------------------------------------------------------------------
// Network specification file (TOML)
// ---------------------------------------------------------------------------

#[derive(Debug, Serialize, Deserialize)]
struct SpeciesSpec {
    name: String,
    initial_concentration: f64,
    #[serde(default)]
    observed: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct ReactionSpec {
    id: ReactionId,
    #[serde(default)]
    reactants: Vec<String>,
    #[serde(default)]
    products: Vec<String>,
    #[serde(default)]
    enzymes: Vec<String>,
    #[serde(default)]
    reversible: bool,
    rate_law: RateLaw,
    base_log10_k: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base_log10_k_reverse: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    michaelis_constant: Option<f64>,
    #[serde(default)]
    fixed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prior: Option<RatePrior>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    prior_reverse: Option<RatePrior>,
}

#[derive(Debug, Serialize, Deserialize)]
struct NetworkSpecFile {
    species: Vec<SpeciesSpec>,
    reactions: Vec<ReactionSpec>,
}

/// Parses a network from its TOML spec document and validates it.
pub fn network_from_toml(text: &str) -> Result<ReactionNetwork, NetworkError> {
    let file: NetworkSpecFile =
        toml::from_str(text).map_err(|e| NetworkError::Spec(e.to_string()))?;
    let species: Vec<Species> = file
        .species
        .iter()
        .map(|s| Species {
            name: s.name.clone(),
            initial_concentration: s.initial_concentration,
            observed: s.observed,
        })
        .collect();
    let name_to_id: BTreeMap<&str, SpeciesId> = species
        .iter()
        .enumerate()
        .map(|(i, s)| (s.name.as_str(), i))
        .collect();
    let resolve = |names: &[String], rid: ReactionId| -> Result<BTreeSet<SpeciesId>, NetworkError> {
        names
            .iter()
            .map(|n| {
                name_to_id.get(n.as_str()).copied().ok_or_else(|| {
                    NetworkError::Spec(format!("reaction {rid} references unknown species {n:?}"))
                })
            })
            .collect()
    };
    let mut reactions = Vec::with_capacity(file.reactions.len());
    for r in &file.reactions {
        let mut priors = Vec::new();
        if !r.fixed {
            let p = r.prior.ok_or_else(|| {
                NetworkError::Spec(format!("uncertain reaction {} carries no prior", r.id))
            })?;
            priors.push(p);
            if r.reversible {
                let p = r.prior_reverse.ok_or_else(|| {
                    NetworkError::Spec(format!(
                        "uncertain reversible reaction {} carries no reverse prior",
                        r.id
                    ))
                })?;
                priors.push(p);
            }
        } else if r.prior.is_some() || r.prior_reverse.is_some() {
            return Err(NetworkError::Spec(format!(
                "fixed reaction {} must not carry a prior",
                r.id
            )));
        }
        reactions.push(Reaction {
            id: r.id,
            reactants: resolve(&r.reactants, r.id)?,
            products: resolve(&r.products, r.id)?,
            enzymes: resolve(&r.enzymes, r.id)?,
            reversible: r.reversible,
            rate_law: r.rate_law,
            base_log10_k: r.base_log10_k,
            base_log10_k_reverse: r.base_log10_k_reverse,
            michaelis_constant: r.michaelis_constant,
            fixed: r.fixed,
            priors,
        });
    }
    let net = ReactionNetwork::new(species, reactions);
    let violations = validate_network(&net);
    if violations.is_empty() {
        Ok(net)
    } else {
        Err(NetworkError::Invalid(violations))
    }
}

/// Loads and validates a network spec file.
pub fn load_network(path: &Path) -> Result<ReactionNetwork, NetworkError> {
    let text = std::fs::read_to_string(path)?;
    network_from_toml(&text)
}

// ---------------------------------------------------------------------------
// Preset networks used across tests and the bundled CLI configurations
// ---------------------------------------------------------------------------

pub mod presets {
    //! The 12-reaction EGF/ERK signalling cascade used by the bundled
    //! examples, with either reactions 3-7 uncertain (the 5-reaction
    //! inference problem) or reactions 3-12 uncertain (the 10-reaction one).

    use super::*;

    const SPECIES: &[(&str, f64, bool)] = &[
        ("unboundEGFR", 500.0, false),
        ("boundEGFR", 0.0, false),
        ("degradedEGFR", 0.0, false),
        ("EGF", 1000.0, false),
        ("inactiveSOS", 1200.0, false),
        ("activeSOS", 0.0, false),
        ("inactiveRas", 1200.0, false),
        ("activeRas", 0.0, false),
        ("inactiveRap1", 1200.0, false),
        ("activeRap1", 0.0, false),
        ("inactiveC3G", 1200.0, false),
        ("activeC3G", 0.0, false),
        ("BRaf", 1500.0, true),
        ("BRafPP", 0.0, false),
        ("Gap", 2400.0, false),
    ];

    struct Rx {
        id: ReactionId,
        reactants: &'static [&'static str],
        products: &'static [&'static str],
        enzymes: &'static [&'static str],
        reversible: bool,
        base: f64,
        base_rev: Option<f64>,
        km: Option<f64>,
    }

    const REACTIONS: &[Rx] = &[
        Rx {
            id: 1,
            reactants: &["boundEGFR"],
            products: &["degradedEGFR"],
            enzymes: &[],
            reversible: false,
            base: 0.0,
            base_rev: None,
            km: None,
        },
        Rx {
            id: 2,
            reactants: &["EGF", "unboundEGFR"],
            products: &["boundEGFR"],
            enzymes: &[],
            reversible: true,
            base: 1.5,
            base_rev: Some(0.0),
            km: None,
        },
        Rx {
            id: 3,
            reactants: &["inactiveC3G"],
            products: &["activeC3G"],
            enzymes: &["boundEGFR"],
            reversible: false,
            base: 0.5,
            base_rev: None,
            km: Some(3386.3875),
        },
        Rx {
            id: 4,
            reactants: &["activeC3G"],
            products: &["inactiveC3G"],
            enzymes: &[],
            reversible: false,
            base: 2.0,
            base_rev: None,
            km: None,
        },
        Rx {
            id: 5,
            reactants: &["inactiveRap1"],
            products: &["activeRap1"],
            enzymes: &["activeC3G"],
            reversible: false,
            base: 2.0,
            base_rev: None,
            km: Some(3566.0),
        },
        Rx {
            id: 6,
            reactants: &["BRaf"],
            products: &["BRafPP"],
            enzymes: &["activeRap1"],
            reversible: false,
            base: 0.4,
            base_rev: None,
            km: Some(17991.179),
        },
        Rx {
            id: 7,
            reactants: &["activeRap1"],
            products: &["inactiveRap1"],
            enzymes: &["Gap"],
            reversible: false,
            base: 1.0,
            base_rev: None,
            km: Some(6808.32),
        },
        Rx {
            id: 8,
            reactants: &["BRaf"],
            products: &["BRafPP"],
            enzymes: &["activeRas"],
            reversible: false,
            base: 0.5,
            base_rev: None,
            km: Some(7631.63),
        },
        Rx {
            id: 9,
            reactants: &["activeRas"],
            products: &["inactiveRas"],
            enzymes: &["Gap"],
            reversible: false,
            base: 0.0,
            base_rev: None,
            km: Some(12457.816),
        },
        Rx {
            id: 10,
            reactants: &["inactiveRas"],
            products: &["activeRas"],
            enzymes: &["activeSOS"],
            reversible: false,
            base: 0.5,
            base_rev: None,
            km: Some(13.73),
        },
        Rx {
            id: 11,
            reactants: &["activeSOS"],
            products: &["inactiveSOS"],
            enzymes: &[],
            reversible: false,
            base: 4.0,
            base_rev: None,
            km: Some(9834.13),
        },
        Rx {
            id: 12,
            reactants: &["inactiveSOS"],
            products: &["activeSOS"],
            enzymes: &["boundEGFR"],
            reversible: false,
            base: 2.5,
            base_rev: None,
            km: Some(8176.56),
        },
    ];

    fn build(priors: &[(ReactionId, f64, f64)]) -> ReactionNetwork {
        let species: Vec<Species> = SPECIES
            .iter()
            .map(|&(name, c0, obs)| Species {
                name: name.into(),
                initial_concentration: c0,
                observed: obs,
            })
            .collect();
        let name_to_id: BTreeMap<&str, SpeciesId> = SPECIES
            .iter()
            .enumerate()
            .map(|(i, &(name, _, _))| (name, i))
            .collect();
        let reactions = REACTIONS
            .iter()
            .map(|rx| {
                let prior = priors.iter().find(|&&(id, _, _)| id == rx.id);
                Reaction {
                    id: rx.id,
                    reactants: rx.reactants.iter().map(|n| name_to_id[n]).collect(),
                    products: rx.products.iter().map(|n| name_to_id[n]).collect(),
                    enzymes: rx.enzymes.iter().map(|n| name_to_id[n]).collect(),
                    reversible: rx.reversible,
                    rate_law: if rx.km.is_some() {
                        RateLaw::MichaelisMenten
                    } else {
                        RateLaw::MassAction
                    },
                    base_log10_k: rx.base,
                    base_log10_k_reverse: rx.base_rev,
                    michaelis_constant: rx.km,
                    fixed: prior.is_none(),
                    priors: prior
                        .map(|&(_, mean, variance)| vec![RatePrior { mean, variance }])
                        .unwrap_or_default(),
                }
            })
            .collect();
        ReactionNetwork::new(species, reactions)
    }

    /// Reactions 3-7 uncertain; 1, 2, 8-12 fixed at base values.
    pub fn five_reaction_problem() -> ReactionNetwork {
        build(&[
            (3, 1.1, 0.2),
            (4, 1.4, 0.2),
            (5, 2.6, 0.2),
            (6, 1.0, 0.2),
            (7, 0.4, 0.2),
        ])
    }

    /// Reactions 3-12 uncertain; only 1 and 2 fixed.
    pub fn ten_reaction_problem() -> ReactionNetwork {
        build(&[
            (3, 1.2, 0.1),
            (4, 2.0, 0.1),
            (5, 2.7, 0.1),
            (6, 1.1, 0.1),
            (7, 1.0, 0.01),
            (8, 0.5, 0.1),
            (9, 0.0, 0.01),
            (10, 0.5, 0.1),
            (11, 4.0, 0.01),
            (12, 2.5, 0.1),
        ])
    }

    /// Pathway classification used with both problems: "left" models carry
    /// the EGFR/SOS/Ras branch but break the C3G/Rap1 branch; "both" carry
    /// the two complete branches.
    pub fn pathway_rules() -> Vec<PathwayRule> {
        vec![
            PathwayRule {
                label: "both".into(),
                required: [1, 2, 3, 5, 6, 8, 10, 12].into_iter().collect(),
                excluded_any: BTreeSet::new(),
            },
            PathwayRule {
                label: "left".into(),
                required: [1, 2, 8, 10, 12].into_iter().collect(),
                excluded_any: [3, 5, 6].into_iter().collect(),
            },
        ]
    }
}
