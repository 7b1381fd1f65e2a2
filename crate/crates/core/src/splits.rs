//! Per-member train/validation index plans over the non-test data `D′`.
//!
//! Three holdout strategies are supported:
//!
//! - **shared**: one validation set, identical for every member and excluded
//!   from every member's training data;
//! - **disjoint**: `M` mutually disjoint validation sets, member `m` trains on
//!   everything except its own;
//! - **overlapping**: `M` portions `S_0..S_{M-1}`; member `m` validates on
//!   `S_m ∪ S_{m+1 mod M}`, so cyclically adjacent members share one portion
//!   that neither trains on.
//!
//! All draws are stratified by label when labels are supplied. Index sets are
//! stored sorted.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_from_seed, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Shared,
    Disjoint,
    Overlapping,
}

impl Strategy {
    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Shared => "shared",
            Strategy::Disjoint => "disjoint",
            Strategy::Overlapping => "overlapping",
        }
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Strategy::Shared),
            "disjoint" => Ok(Strategy::Disjoint),
            "overlapping" => Ok(Strategy::Overlapping),
            other => Err(Error::invalid(format!("unknown holdout strategy {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemberSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Two cyclically adjacent members and the portion both validate on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointPair {
    pub members: [usize; 2],
    pub indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub strategy: Strategy,
    pub n_total: usize,
    pub members: Vec<MemberSplit>,
    /// Overlapping only: for pair `m`, members `(m, m+1 mod M)` share
    /// portion `S_{m+1 mod M}`.
    #[serde(default)]
    pub pairs: Vec<JointPair>,
}

/// A group of members and an index set all of them hold out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointEvalSet {
    pub members: Vec<usize>,
    pub indices: Vec<usize>,
}

fn val_size(n_total: usize, val_fraction: f64) -> Result<usize> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Split(format!("validation fraction {val_fraction} must lie in (0, 1)")));
    }
    Ok((val_fraction * n_total as f64).round() as usize)
}

fn check_labels(n_total: usize, labels: Option<&[usize]>) -> Result<()> {
    match labels {
        Some(y) if y.len() != n_total => Err(Error::dims("split label count", n_total, y.len())),
        _ => Ok(()),
    }
}

/// Orders `pool` so that every prefix is stratified: classes are interleaved
/// in proportion to their frequency, with a random order inside each class.
pub(crate) fn stratified_order(pool: &[usize], labels: Option<&[usize]>, rng: &mut Rng) -> Vec<usize> {
    let mut pool = pool.to_vec();
    pool.shuffle(rng);
    let Some(y) = labels else {
        return pool;
    };
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in pool {
        by_class.entry(y[i]).or_default().push(i);
    }
    // Assign each element a fractional position (j + 0.5) / n_c in [0, 1) and
    // merge classes by that position; prefixes then hold ≈ proportional counts.
    let mut keyed: Vec<(f64, usize, usize)> = Vec::new();
    for (&class, members) in &by_class {
        let n_c = members.len() as f64;
        for (j, &i) in members.iter().enumerate() {
            keyed.push(((j as f64 + 0.5) / n_c, class, i));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, _, i)| i).collect()
}

/// Stable class-major reordering; dealing the result round-robin gives every
/// group an equal share (±1) of each class.
fn class_major(items: &[usize], labels: Option<&[usize]>) -> Vec<usize> {
    let mut items = items.to_vec();
    if let Some(y) = labels {
        items.sort_by_key(|&i| y[i]);
    }
    items
}

fn complement(n_total: usize, excluded: &[usize]) -> Vec<usize> {
    let mut mask = vec![false; n_total];
    for &i in excluded {
        mask[i] = true;
    }
    (0..n_total).filter(|&i| !mask[i]).collect()
}

fn sorted(mut v: Vec<usize>) -> Vec<usize> {
    v.sort_unstable();
    v
}

/// Every member validates on the same random `round(val_fraction·n)` indices.
pub fn make_shared(
    n_total: usize,
    val_fraction: f64,
    members: usize,
    seed: u64,
    labels: Option<&[usize]>,
) -> Result<SplitPlan> {
    if members == 0 {
        return Err(Error::Split("an ensemble needs at least one member".into()));
    }
    check_labels(n_total, labels)?;
    let v = val_size(n_total, val_fraction)?;
    if v == 0 || v >= n_total {
        return Err(Error::Split(format!(
            "validation set of size {v} out of {n_total} leaves no validation or no training data"
        )));
    }
    let mut rng = rng_from_seed(seed);
    let order = stratified_order(&(0..n_total).collect::<Vec<_>>(), labels, &mut rng);
    let val = sorted(order[..v].to_vec());
    let train = complement(n_total, &val);
    Ok(SplitPlan {
        strategy: Strategy::Shared,
        n_total,
        members: vec![MemberSplit { train, val }; members],
        pairs: Vec::new(),
    })
}

/// `M` mutually disjoint validation sets of `round(val_fraction·n)` indices each.
pub fn make_disjoint(
    n_total: usize,
    val_fraction: f64,
    members: usize,
    seed: u64,
    labels: Option<&[usize]>,
) -> Result<SplitPlan> {
    if members == 0 {
        return Err(Error::Split("an ensemble needs at least one member".into()));
    }
    check_labels(n_total, labels)?;
    let v = val_size(n_total, val_fraction)?;
    if v == 0 {
        return Err(Error::Split(format!("validation fraction {val_fraction} of {n_total} rounds to 0")));
    }
    if members * v > n_total {
        return Err(Error::Split(format!(
            "{members} disjoint validation sets of size {v} need {} indices but only {n_total} are available",
            members * v
        )));
    }
    if members == 1 && v >= n_total {
        return Err(Error::Split("validation set covers all data".into()));
    }
    let mut rng = rng_from_seed(seed);
    let order = stratified_order(&(0..n_total).collect::<Vec<_>>(), labels, &mut rng);
    // Stratified subset of M·v, dealt round-robin in class-major order.
    let chosen = class_major(&order[..members * v], labels);
    let mut groups = vec![Vec::with_capacity(v); members];
    for (j, &i) in chosen.iter().enumerate() {
        groups[j % members].push(i);
    }
    let members = groups
        .into_iter()
        .map(|g| {
            let val = sorted(g);
            MemberSplit {
                train: complement(n_total, &val),
                val,
            }
        })
        .collect();
    Ok(SplitPlan {
        strategy: Strategy::Disjoint,
        n_total,
        members,
        pairs: Vec::new(),
    })
}

/// Disjoint validation sets that partition all of `D′` (largest-remainder
/// sizes), so every index is held out by exactly one member.
pub fn make_disjoint_partition(n_total: usize, members: usize, seed: u64, labels: Option<&[usize]>) -> Result<SplitPlan> {
    if members < 2 || n_total < members {
        return Err(Error::Split(format!("a disjoint partition needs 2 <= M <= n, got M = {members}, n = {n_total}")));
    }
    check_labels(n_total, labels)?;
    let mut rng = rng_from_seed(seed);
    let order = stratified_order(&(0..n_total).collect::<Vec<_>>(), labels, &mut rng);
    let chosen = class_major(&order, labels);
    let mut groups = vec![Vec::with_capacity(n_total / members + 1); members];
    for (j, &i) in chosen.iter().enumerate() {
        groups[j % members].push(i);
    }
    let members = groups
        .into_iter()
        .map(|g| {
            let val = sorted(g);
            MemberSplit {
                train: complement(n_total, &val),
                val,
            }
        })
        .collect();
    Ok(SplitPlan {
        strategy: Strategy::Disjoint,
        n_total,
        members,
        pairs: Vec::new(),
    })
}

/// Cyclic half-shared validation sets.
///
/// With `val_fraction = None`, all of `D′` is partitioned into `M` portions
/// (largest-remainder sizes: the first `n mod M` portions get one extra).
/// With `Some(p)`, only a random subset of `round(p·n·M/2)` indices is split
/// into portions, so each member validates on ≈ `p·n` indices; the remaining
/// indices go into every member's training set.
pub fn make_overlapping(
    n_total: usize,
    members: usize,
    seed: u64,
    val_fraction: Option<f64>,
    labels: Option<&[usize]>,
) -> Result<SplitPlan> {
    if members < 2 {
        return Err(Error::Split(format!("overlapping holdout needs at least 2 members, got {members}")));
    }
    if members == 2 {
        return Err(Error::Split(
            "overlapping holdout with 2 members validates both on all data, leaving no training data".into(),
        ));
    }
    check_labels(n_total, labels)?;
    if n_total < members {
        return Err(Error::Split(format!("{n_total} indices cannot form {members} portions")));
    }
    let subset = match val_fraction {
        None => n_total,
        Some(p) => {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::Split(format!("validation fraction {p} must lie in (0, 1)")));
            }
            let s = (p * n_total as f64 * members as f64 / 2.0).round() as usize;
            if s > n_total {
                return Err(Error::Split(format!(
                    "validation fraction {p} with {members} members needs {s} portion indices but only {n_total} exist"
                )));
            }
            if s < members {
                return Err(Error::Split(format!(
                    "validation fraction {p} yields {s} portion indices, fewer than {members} members"
                )));
            }
            s
        }
    };
    let mut rng = rng_from_seed(seed);
    let order = stratified_order(&(0..n_total).collect::<Vec<_>>(), labels, &mut rng);
    let chosen = class_major(&order[..subset], labels);
    let mut portions = vec![Vec::new(); members];
    for (j, &i) in chosen.iter().enumerate() {
        portions[j % members].push(i);
    }
    let portions: Vec<Vec<usize>> = portions.into_iter().map(sorted).collect();

    let splits = (0..members)
        .map(|m| {
            let next = (m + 1) % members;
            let val = sorted([portions[m].as_slice(), portions[next].as_slice()].concat());
            MemberSplit {
                train: complement(n_total, &val),
                val,
            }
        })
        .collect();
    let pairs = (0..members)
        .map(|m| {
            let next = (m + 1) % members;
            JointPair {
                members: [m, next],
                indices: portions[next].clone(),
            }
        })
        .collect();
    Ok(SplitPlan {
        strategy: Strategy::Overlapping,
        n_total,
        members: splits,
        pairs,
    })
}

/// Builds a plan for `strategy`. `val_fraction` is the per-member validation
/// fraction for every strategy.
pub fn make_plan(
    strategy: Strategy,
    n_total: usize,
    val_fraction: f64,
    members: usize,
    seed: u64,
    labels: Option<&[usize]>,
) -> Result<SplitPlan> {
    match strategy {
        Strategy::Shared => make_shared(n_total, val_fraction, members, seed, labels),
        Strategy::Disjoint => make_disjoint(n_total, val_fraction, members, seed, labels),
        Strategy::Overlapping => make_overlapping(n_total, members, seed, Some(val_fraction), labels),
    }
}

/// Index sets on which groups of members can be evaluated jointly.
pub fn joint_eval_sets(plan: &SplitPlan) -> Vec<JointEvalSet> {
    match plan.strategy {
        Strategy::Shared => vec![JointEvalSet {
            members: (0..plan.members.len()).collect(),
            indices: plan.members[0].val.clone(),
        }],
        Strategy::Overlapping => plan
            .pairs
            .iter()
            .map(|p| JointEvalSet {
                members: p.members.to_vec(),
                indices: p.indices.clone(),
            })
            .collect(),
        Strategy::Disjoint => Vec::new(),
    }
}

impl SplitPlan {
    pub fn ensemble_size(&self) -> usize {
        self.members.len()
    }

    /// The overlapping portions `S_0..S_{M-1}`, recovered from the pairs.
    pub fn portions(&self) -> Vec<Vec<usize>> {
        let m = self.members.len();
        let mut out = vec![Vec::new(); m];
        for p in &self.pairs {
            out[p.members[1] % m.max(1)] = p.indices.clone();
        }
        out
    }

    /// Checks the structural invariants of the plan's strategy.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_total;
        if self.members.is_empty() {
            return Err(Error::Split("plan has no members".into()));
        }
        for (m, s) in self.members.iter().enumerate() {
            let mut seen = vec![0u8; n];
            for &i in s.train.iter().chain(&s.val) {
                if i >= n {
                    return Err(Error::Split(format!("member {m} index {i} out of range {n}")));
                }
                seen[i] += 1;
            }
            if let Some(i) = seen.iter().position(|&c| c != 1) {
                return Err(Error::Split(format!(
                    "member {m}: index {i} appears {} times across train and val",
                    seen[i]
                )));
            }
            if s.val.is_empty() || s.train.is_empty() {
                return Err(Error::Split(format!("member {m} has an empty train or val set")));
            }
        }
        let mut val_count = vec![0usize; n];
        for s in &self.members {
            for &i in &s.val {
                val_count[i] += 1;
            }
        }
        match self.strategy {
            Strategy::Shared => {
                if self.members.iter().any(|s| s.val != self.members[0].val) {
                    return Err(Error::Split("shared plan with differing validation sets".into()));
                }
            }
            Strategy::Disjoint => {
                if let Some(i) = val_count.iter().position(|&c| c > 1) {
                    return Err(Error::Split(format!("index {i} is in {} disjoint val sets", val_count[i])));
                }
            }
            Strategy::Overlapping => {
                let m = self.members.len();
                if self.pairs.len() != m {
                    return Err(Error::dims("overlapping pair count", m, self.pairs.len()));
                }
                for (k, p) in self.pairs.iter().enumerate() {
                    if p.members != [k, (k + 1) % m] {
                        return Err(Error::Split(format!("pair {k} is not cyclically adjacent")));
                    }
                    for &i in &p.indices {
                        for &member in &p.members {
                            if self.members[member].train.binary_search(&i).is_ok() {
                                return Err(Error::Split(format!("shared index {i} is in member {member}'s train set")));
                            }
                        }
                    }
                }
                if let Some(i) = val_count.iter().position(|&c| c != 0 && c != 2) {
                    return Err(Error::Split(format!("index {i} is in {} overlapping val sets", val_count[i])));
                }
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let plan: SplitPlan = serde_json::from_str(s)?;
        plan.validate()?;
        Ok(plan)
    }
}
