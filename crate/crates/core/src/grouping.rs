//! User partitions and the heuristics that produce them.
//!
//! A [`Grouping`] is a disjoint cover of the user set; every group is served
//! by one jointly encoded codeword in its own TDMA slot. The search routines
//! here only look at per-user SNRs, so they take the reflective beamformer as
//! fixed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fbl::{self, FblError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GroupingError {
    #[error("grouping must contain at least one user")]
    NoUsers,
    #[error("group {0} is empty")]
    EmptyGroup(usize),
    #[error("user {0} appears in more than one group")]
    Duplicate(usize),
    #[error("user {user} is out of range for {users} users")]
    OutOfRange { user: usize, users: usize },
    #[error("user {0} is not assigned to any group")]
    Uncovered(usize),
    #[error("payload size of user {0} must be at least one bit")]
    ZeroPayload(usize),
    #[error("group count {groups} must lie in 1..={users}")]
    GroupCount { groups: usize, users: usize },
    #[error("exhaustive search over {users} users exceeds the cap of {cap}")]
    ExhaustiveCap { users: usize, cap: usize },
    #[error("snr vector has {snrs} entries but there are {users} users")]
    Length { snrs: usize, users: usize },
    #[error("group payload totals do not match the member payloads")]
    PayloadMismatch,
    #[error(transparent)]
    Fbl(#[from] FblError),
}

/// Disjoint, covering partition of users `0..K` with per-group payload totals.
///
/// Always stored canonically: members sorted, groups ordered by their
/// smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawGrouping", into = "RawGrouping")]
pub struct Grouping {
    groups: Vec<Vec<usize>>,
    payloads: Vec<u64>,
    user_payloads: Vec<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrouping {
    groups: Vec<Vec<usize>>,
    user_payload_bits: Vec<u64>,
    /// Derived from the other two fields; checked when present.
    #[serde(default)]
    group_payload_bits: Vec<u64>,
}

impl TryFrom<RawGrouping> for Grouping {
    type Error = GroupingError;
    fn try_from(raw: RawGrouping) -> Result<Self, Self::Error> {
        let echo = raw.group_payload_bits;
        let g = Grouping::new(raw.groups, &raw.user_payload_bits)?;
        if !echo.is_empty() && echo != g.payloads {
            return Err(GroupingError::PayloadMismatch);
        }
        Ok(g)
    }
}

impl From<Grouping> for RawGrouping {
    fn from(g: Grouping) -> Self {
        RawGrouping {
            groups: g.groups,
            user_payload_bits: g.user_payloads,
            group_payload_bits: g.payloads,
        }
    }
}

impl Grouping {
    pub fn new(groups: Vec<Vec<usize>>, user_payloads: &[u64]) -> Result<Self, GroupingError> {
        let users = user_payloads.len();
        if users == 0 {
            return Err(GroupingError::NoUsers);
        }
        if let Some(k) = user_payloads.iter().position(|&d| d == 0) {
            return Err(GroupingError::ZeroPayload(k));
        }
        let mut seen = vec![false; users];
        let mut groups = groups;
        for (i, g) in groups.iter_mut().enumerate() {
            if g.is_empty() {
                return Err(GroupingError::EmptyGroup(i));
            }
            g.sort_unstable();
            for &k in g.iter() {
                if k >= users {
                    return Err(GroupingError::OutOfRange { user: k, users });
                }
                if seen[k] {
                    return Err(GroupingError::Duplicate(k));
                }
                seen[k] = true;
            }
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(GroupingError::Uncovered(k));
        }
        groups.sort_unstable_by_key(|g| g[0]);
        let payloads = groups
            .iter()
            .map(|g| g.iter().map(|&k| user_payloads[k]).sum())
            .collect();
        Ok(Self {
            groups,
            payloads,
            user_payloads: user_payloads.to_vec(),
        })
    }

    /// Builds a grouping from one label per user (labels need not be dense).
    pub fn from_labels(labels: &[usize], user_payloads: &[u64]) -> Result<Self, GroupingError> {
        let mut by_label: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for (k, &l) in labels.iter().enumerate() {
            by_label.entry(l).or_default().push(k);
        }
        if labels.len() != user_payloads.len() {
            return Err(GroupingError::Length {
                snrs: labels.len(),
                users: user_payloads.len(),
            });
        }
        Self::new(by_label.into_values().collect(), user_payloads)
    }

    /// All users in one codeword (`G = 1`).
    pub fn single(user_payloads: &[u64]) -> Self {
        Self::new(vec![(0..user_payloads.len()).collect()], user_payloads)
            .expect("single group over valid payloads")
    }

    /// One codeword per user (`G = K`).
    pub fn singletons(user_payloads: &[u64]) -> Self {
        Self::new(
            (0..user_payloads.len()).map(|k| vec![k]).collect(),
            user_payloads,
        )
        .expect("singleton groups over valid payloads")
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Number of groups `G`.
    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.user_payloads.len()
    }

    /// Total payload `D_i` of group `i`, in bits.
    pub fn payload(&self, i: usize) -> u64 {
        self.payloads[i]
    }

    pub fn payloads(&self) -> &[u64] {
        &self.payloads
    }

    pub fn user_payloads(&self) -> &[u64] {
        &self.user_payloads
    }

    /// Group index of every user.
    pub fn labels(&self) -> Vec<usize> {
        let mut labels = vec![0; self.num_users()];
        for (i, g) in self.groups.iter().enumerate() {
            for &k in g {
                labels[k] = i;
            }
        }
        labels
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("grouping serializes")
    }
}

/// Value space the K-means distance is measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SnrScale {
    #[default]
    Linear,
    Db,
}

impl SnrScale {
    fn map(self, snr: f64) -> f64 {
        match self {
            SnrScale::Linear => snr,
            SnrScale::Db => 10.0 * snr.log10(),
        }
    }
}

/// Result of one K-means run, with the within-cluster sum of squares after
/// every assignment step.
#[derive(Debug, Clone)]
pub struct KMeansRun {
    pub grouping: Grouping,
    pub centers: Vec<f64>,
    pub objective_history: Vec<f64>,
}

const KMEANS_MAX_ITERS: usize = 1000;

/// 1-D Lloyd iteration on SNR values with `clusters` centers.
///
/// Centers start at evenly spaced order statistics (always the extreme SNRs
/// for `clusters >= 2`). Ties in assignment go to the lower-indexed center.
/// Clusters that end up empty are dropped, so the result can have fewer than
/// `clusters` groups when SNR values coincide.
pub fn kmeans_run(
    snrs: &[f64],
    payloads: &[u64],
    clusters: usize,
    scale: SnrScale,
) -> Result<KMeansRun, GroupingError> {
    let users = snrs.len();
    if users != payloads.len() {
        return Err(GroupingError::Length {
            snrs: users,
            users: payloads.len(),
        });
    }
    if clusters == 0 || clusters > users {
        return Err(GroupingError::GroupCount {
            groups: clusters,
            users,
        });
    }
    let values: Vec<f64> = snrs.iter().map(|&s| scale.map(s)).collect();
    let mut sorted = values.clone();
    sorted.sort_by(f64::total_cmp);

    let mut centers: Vec<f64> = if clusters == 1 {
        vec![values.iter().sum::<f64>() / users as f64]
    } else {
        (0..clusters)
            .map(|j| {
                let idx = (j as f64 * (users - 1) as f64 / (clusters - 1) as f64).round() as usize;
                sorted[idx]
            })
            .collect()
    };

    let mut labels = vec![0usize; users];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITERS {
        for (k, &x) in values.iter().enumerate() {
            let mut best = 0;
            for j in 1..clusters {
                if (x - centers[j]).abs() < (x - centers[best]).abs() {
                    best = j;
                }
            }
            labels[k] = best;
        }
        history.push(within_cluster_ss(&values, &labels, &centers));

        let mut sums = vec![0.0; clusters];
        let mut counts = vec![0usize; clusters];
        for (k, &l) in labels.iter().enumerate() {
            sums[l] += values[k];
            counts[l] += 1;
        }
        let updated: Vec<f64> = (0..clusters)
            .map(|j| {
                if counts[j] == 0 {
                    centers[j]
                } else {
                    sums[j] / counts[j] as f64
                }
            })
            .collect();
        if updated == centers {
            break;
        }
        centers = updated;
    }

    Ok(KMeansRun {
        grouping: Grouping::from_labels(&labels, payloads)?,
        centers,
        objective_history: history,
    })
}

fn within_cluster_ss(values: &[f64], labels: &[usize], centers: &[f64]) -> f64 {
    values
        .iter()
        .zip(labels)
        .map(|(&x, &l)| (x - centers[l]).powi(2))
        .sum()
}

pub fn kmeans_grouping(
    snrs: &[f64],
    payloads: &[u64],
    clusters: usize,
    scale: SnrScale,
) -> Result<Grouping, GroupingError> {
    Ok(kmeans_run(snrs, payloads, clusters, scale)?.grouping)
}

/// Runs K-means for every `G` in `1..=K` and keeps the partition with the
/// lowest evaluated latency; ties go to the smaller `G`.
pub fn kmeans_best<F>(
    snrs: &[f64],
    payloads: &[u64],
    scale: SnrScale,
    mut latency_eval: F,
) -> Result<(Grouping, f64), GroupingError>
where
    F: FnMut(&Grouping) -> f64,
{
    let mut best: Option<(Grouping, f64)> = None;
    for g in 1..=snrs.len() {
        let grouping = kmeans_grouping(snrs, payloads, g, scale)?;
        let latency = latency_eval(&grouping);
        if best.as_ref().is_none_or(|(_, b)| latency < *b) {
            best = Some((grouping, latency));
        }
    }
    best.ok_or(GroupingError::NoUsers)
}

/// Selection rule applied to the tentative total latencies in the greedy
/// search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GreedyRule {
    /// Pick the placement with the smallest resulting total latency.
    #[default]
    Min,
    /// Pick the placement with the largest resulting total latency.
    Max,
}

/// Greedy incremental grouping.
///
/// Each of the `K` rounds tries every ungrouped user in every existing group
/// and in a fresh group, scores the total real blocklength of the users
/// placed so far, and commits the placement chosen by `rule`. Ties resolve to
/// the lowest user index, then the lowest group index.
pub fn greedy_grouping(
    snrs: &[f64],
    payloads: &[u64],
    eps: f64,
    rule: GreedyRule,
) -> Result<Grouping, GroupingError> {
    let users = snrs.len();
    if users != payloads.len() {
        return Err(GroupingError::Length {
            snrs: users,
            users: payloads.len(),
        });
    }
    if users == 0 {
        return Err(GroupingError::NoUsers);
    }

    struct Open {
        members: Vec<usize>,
        min_snr: f64,
        bits: u64,
        blocklength: f64,
    }

    let mut ungrouped: Vec<usize> = (0..users).collect();
    let mut groups: Vec<Open> = Vec::new();
    let mut committed = 0.0;

    while !ungrouped.is_empty() {
        let mut best: Option<(usize, usize, f64, f64)> = None; // (pos, group, total, m_new)
        for (pos, &k) in ungrouped.iter().enumerate() {
            for i in 0..=groups.len() {
                let (m_new, total) = if i == groups.len() {
                    let m = fbl::blocklength(eps, snrs[k], payloads[k])?;
                    (m, committed + m)
                } else {
                    let g = &groups[i];
                    let m = fbl::blocklength(eps, g.min_snr.min(snrs[k]), g.bits + payloads[k])?;
                    (m, committed - g.blocklength + m)
                };
                let better = match best {
                    None => true,
                    Some((_, _, b, _)) => match rule {
                        GreedyRule::Min => total < b,
                        GreedyRule::Max => total > b,
                    },
                };
                if better {
                    best = Some((pos, i, total, m_new));
                }
            }
        }
        let (pos, i, total, m_new) = best.expect("at least one candidate");
        let k = ungrouped.remove(pos);
        if i == groups.len() {
            groups.push(Open {
                members: vec![k],
                min_snr: snrs[k],
                bits: payloads[k],
                blocklength: m_new,
            });
        } else {
            let g = &mut groups[i];
            g.members.push(k);
            g.min_snr = g.min_snr.min(snrs[k]);
            g.bits += payloads[k];
            g.blocklength = m_new;
        }
        committed = total;
    }

    Grouping::new(groups.into_iter().map(|g| g.members).collect(), payloads)
}

/// Default upper limit on `K` for exhaustive search (Bell(8) = 4140).
pub const DEFAULT_EXHAUSTIVE_CAP: usize = 8;

/// Iterator over all set partitions of `0..n` as restricted-growth strings:
/// `a[0] = 0` and `a[i] <= 1 + max(a[..i])`, in lexicographic order.
#[derive(Debug, Clone)]
pub struct RestrictedGrowth {
    labels: Vec<usize>,
    // prefix_max[i] = max(labels[..=i])
    prefix_max: Vec<usize>,
    done: bool,
}

impl RestrictedGrowth {
    pub fn new(n: usize) -> Self {
        Self {
            labels: vec![0; n],
            prefix_max: vec![0; n],
            done: n == 0,
        }
    }
}

impl Iterator for RestrictedGrowth {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        if self.done {
            return None;
        }
        let out = self.labels.clone();
        let n = self.labels.len();
        // Find the rightmost position that can still grow.
        let mut i = n;
        loop {
            if i <= 1 {
                self.done = true;
                break;
            }
            i -= 1;
            if self.labels[i] <= self.prefix_max[i - 1] {
                self.labels[i] += 1;
                self.prefix_max[i] = self.prefix_max[i - 1].max(self.labels[i]);
                for j in i + 1..n {
                    self.labels[j] = 0;
                    self.prefix_max[j] = self.prefix_max[i];
                }
                break;
            }
        }
        Some(out)
    }
}

/// Globally latency-minimal partition under `latency_eval`, by enumeration.
/// Ties keep the lexicographically first restricted-growth string.
pub fn exhaustive_grouping<F>(
    payloads: &[u64],
    cap: usize,
    mut latency_eval: F,
) -> Result<(Grouping, f64), GroupingError>
where
    F: FnMut(&Grouping) -> f64,
{
    let users = payloads.len();
    if users == 0 {
        return Err(GroupingError::NoUsers);
    }
    if users > cap {
        return Err(GroupingError::ExhaustiveCap { users, cap });
    }
    let mut best: Option<(Grouping, f64)> = None;
    for labels in RestrictedGrowth::new(users) {
        let grouping = Grouping::from_labels(&labels, payloads)?;
        let latency = latency_eval(&grouping);
        if best.as_ref().is_none_or(|(_, b)| latency < *b) {
            best = Some((grouping, latency));
        }
    }
    best.ok_or(GroupingError::NoUsers)
}

/// Real-valued total blocklength of `grouping` at fixed SNRs, or `+inf` when
/// it cannot be evaluated.
pub fn fixed_snr_latency(grouping: &Grouping, snrs: &[f64], eps: f64) -> f64 {
    fbl::group_total_latency(grouping, snrs, eps)
        .map(|(_, t)| t)
        .unwrap_or(f64::INFINITY)
}
