//! Alternation between grouping and reflection design, the benchmark
//! schemes, and paired Monte-Carlo batches.

use std::borrow::Cow;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::beamform::{self, BeamformError, BeamformResult, P2Context, ScaControls};
use crate::channel::{self, ChannelError, ChannelRealization, Scenario, Stream};
use crate::grouping::{self, GreedyRule, Grouping, GroupingError, SnrScale, DEFAULT_EXHAUSTIVE_CAP};

#[derive(Debug, Error)]
pub enum DriverError {
    #[error(transparent)]
    Beamform(#[from] BeamformError),
    #[error(transparent)]
    Grouping(#[from] GroupingError),
    #[error(transparent)]
    Channel(#[from] ChannelError),
    #[error("unknown scheme `{0}`")]
    UnknownScheme(String),
    #[error("trials must be at least 1")]
    NoTrials,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SchemeKind {
    ProposedKmeans,
    ProposedGreedy,
    Exhaustive,
    /// One group per user.
    IndividualEncoding,
    /// All users in one group.
    SingleCodeword,
}

impl SchemeKind {
    const ALL: [SchemeKind; 5] = [
        SchemeKind::ProposedKmeans,
        SchemeKind::ProposedGreedy,
        SchemeKind::Exhaustive,
        SchemeKind::IndividualEncoding,
        SchemeKind::SingleCodeword,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SchemeKind::ProposedKmeans => "proposed_kmeans",
            SchemeKind::ProposedGreedy => "proposed_greedy",
            SchemeKind::Exhaustive => "exhaustive",
            SchemeKind::IndividualEncoding => "individual_encoding",
            SchemeKind::SingleCodeword => "single_codeword",
        }
    }

    pub fn is_fixed(self) -> bool {
        matches!(self, SchemeKind::IndividualEncoding | SchemeKind::SingleCodeword)
    }
}

/// A scheme name, optionally suffixed with `_no_irs` to switch the surface
/// off.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct SchemeId {
    pub kind: SchemeKind,
    pub with_irs: bool,
}

impl SchemeId {
    pub const fn new(kind: SchemeKind, with_irs: bool) -> Self {
        Self { kind, with_irs }
    }
}

impl fmt::Display for SchemeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.name())?;
        if !self.with_irs {
            f.write_str("_no_irs")?;
        }
        Ok(())
    }
}

impl FromStr for SchemeId {
    type Err = DriverError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (base, with_irs) = match s.strip_suffix("_no_irs") {
            Some(base) => (base, false),
            None => (s, true),
        };
        SchemeKind::ALL
            .into_iter()
            .find(|k| k.name() == base)
            .map(|kind| SchemeId { kind, with_irs })
            .ok_or_else(|| DriverError::UnknownScheme(s.to_string()))
    }
}

impl TryFrom<String> for SchemeId {
    type Error = DriverError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<SchemeId> for String {
    fn from(id: SchemeId) -> Self {
        id.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriverControls {
    pub sca: ScaControls,
    /// Cap on grouping/beamforming alternations.
    pub outer_cap: usize,
    pub greedy_rule: GreedyRule,
    pub snr_scale: SnrScale,
    /// Largest `K` accepted by the exhaustive scheme.
    pub exhaustive_cap: usize,
    /// Largest `K` for which the exhaustive scheme runs a full reflection
    /// design per candidate partition; above it candidates are scored at
    /// fixed `v`.
    pub exhaustive_solve_cap: usize,
}

impl Default for DriverControls {
    fn default() -> Self {
        Self {
            sca: ScaControls::default(),
            outer_cap: 10,
            greedy_rule: GreedyRule::Min,
            snr_scale: SnrScale::Linear,
            exhaustive_cap: DEFAULT_EXHAUSTIVE_CAP,
            exhaustive_solve_cap: 5,
        }
    }
}

/// Link budget shared by every scheme of one trial.
#[derive(Debug, Clone, PartialEq)]
pub struct Budget {
    pub payload_bits: Vec<u64>,
    pub eps_max: f64,
    pub tx_power_w: f64,
    pub noise_power_w: f64,
}

impl From<&Scenario> for Budget {
    fn from(s: &Scenario) -> Self {
        Self {
            payload_bits: s.payload_bits.clone(),
            eps_max: s.eps_max,
            tx_power_w: s.tx_power_w,
            noise_power_w: s.noise_power_w,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveResult {
    pub scheme: SchemeId,
    pub grouping: Grouping,
    pub beamform: BeamformResult,
    pub total_latency: u64,
    /// Integer latency of the best point after each alternation.
    pub history: Vec<u64>,
    pub outer_iterations: usize,
}

fn context<'a>(real: &'a ChannelRealization, grouping: &'a Grouping, budget: &Budget) -> P2Context<'a> {
    P2Context {
        realization: real,
        grouping,
        eps_max: budget.eps_max,
        tx_power_w: budget.tx_power_w,
        noise_power_w: budget.noise_power_w,
    }
}

fn fixed_grouping(kind: SchemeKind, payloads: &[u64]) -> Grouping {
    match kind {
        SchemeKind::IndividualEncoding => Grouping::singletons(payloads),
        _ => Grouping::single(payloads),
    }
}

/// Grouping step of one alternation, given SNRs under the current `v`.
fn regroup(
    kind: SchemeKind,
    real: &ChannelRealization,
    snrs: &[f64],
    budget: &Budget,
    controls: &DriverControls,
) -> Result<Grouping, DriverError> {
    let payloads = &budget.payload_bits;
    let eps = budget.eps_max;
    let fixed_v = |g: &Grouping| grouping::fixed_snr_latency(g, snrs, eps);
    Ok(match kind {
        SchemeKind::IndividualEncoding | SchemeKind::SingleCodeword => fixed_grouping(kind, payloads),
        SchemeKind::ProposedKmeans => grouping::kmeans_best(snrs, payloads, controls.snr_scale, fixed_v)?.0,
        SchemeKind::ProposedGreedy => grouping::greedy_grouping(snrs, payloads, eps, controls.greedy_rule)?,
        SchemeKind::Exhaustive if payloads.len() <= controls.exhaustive_solve_cap => {
            let mut failure = None;
            let (g, _) = grouping::exhaustive_grouping(payloads, controls.exhaustive_cap, |g| {
                match beamform::solve_p2(&context(real, g, budget), &controls.sca) {
                    Ok(r) => r.total_latency as f64,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::INFINITY
                    }
                }
            })?;
            if let Some(e) = failure {
                return Err(e.into());
            }
            g
        }
        SchemeKind::Exhaustive => grouping::exhaustive_grouping(payloads, controls.exhaustive_cap, fixed_v)?.0,
    })
}

/// Alternates grouping and reflection design until the integer latency stops
/// improving or `outer_cap` rounds have run, returning the best point seen.
pub fn alternating_optimize(
    real: &ChannelRealization,
    scheme: SchemeId,
    budget: &Budget,
    controls: &DriverControls,
) -> Result<SolveResult, DriverError> {
    let real: Cow<ChannelRealization> = if scheme.with_irs {
        Cow::Borrowed(real)
    } else {
        Cow::Owned(real.without_irs())
    };
    let payloads = &budget.payload_bits;
    if scheme.kind == SchemeKind::Exhaustive && payloads.len() > controls.exhaustive_cap {
        return Err(GroupingError::ExhaustiveCap {
            users: payloads.len(),
            cap: controls.exhaustive_cap,
        }
        .into());
    }

    let start = fixed_grouping(scheme.kind, payloads);
    let init = beamform::initialize(&context(&real, &start, budget), &controls.sca)?;
    let n = real.num_elements();
    let mut v: Vec<_> = (0..n).map(|i| init.v[(i, n)]).collect();

    let mut best: Option<(Grouping, BeamformResult)> = None;
    let mut history = Vec::new();
    let mut last_grouping: Option<Grouping> = None;
    let mut rounds = 0;
    while rounds < controls.outer_cap.max(1) {
        let snrs = channel::effective_snrs(&real, &v, budget.tx_power_w, budget.noise_power_w)?;
        let grouping = regroup(scheme.kind, &real, &snrs, budget, controls)?;
        if last_grouping.as_ref() == Some(&grouping) {
            // The same grouping would reproduce the same solve.
            break;
        }
        rounds += 1;
        let result = beamform::solve_p2(&context(&real, &grouping, budget), &controls.sca)?;
        let improved = best.as_ref().is_none_or(|(_, b)| result.total_latency < b.total_latency);
        if improved {
            v = result.v.clone();
            best = Some((grouping.clone(), result));
        }
        history.push(best.as_ref().map_or(u64::MAX, |(_, b)| b.total_latency));
        if !improved || scheme.kind.is_fixed() {
            break;
        }
        last_grouping = Some(grouping);
    }
    let (grouping, beamform) = best.expect("at least one round runs");
    Ok(SolveResult {
        scheme,
        total_latency: beamform.total_latency,
        grouping,
        beamform,
        history,
        outer_iterations: rounds,
    })
}

/// One row of a Monte-Carlo batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial_index: u64,
    pub scheme: SchemeId,
    /// Fingerprint of the channel draw; equal across schemes of one trial.
    pub realization: String,
    pub total_latency: Option<u64>,
    pub groups: Option<usize>,
    pub m: Vec<u64>,
    pub sca_iterations: Option<usize>,
    pub wall_ms: f64,
    pub error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<SolveResult>,
}

impl TrialRecord {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub scheme: SchemeId,
    pub trials: usize,
    pub failed: usize,
    pub mean: f64,
    /// Sample standard deviation; zero for fewer than two successes.
    pub std: f64,
    pub min: f64,
    pub max: f64,
}

/// Statistics of the successful trials of each scheme, in scheme order.
pub fn aggregate(records: &[TrialRecord], schemes: &[SchemeId]) -> Vec<Aggregate> {
    schemes
        .iter()
        .map(|&scheme| {
            let rows: Vec<&TrialRecord> = records.iter().filter(|r| r.scheme == scheme).collect();
            let values: Vec<f64> = rows.iter().filter_map(|r| r.total_latency).map(|l| l as f64).collect();
            let n = values.len();
            let mean = if n > 0 { values.iter().sum::<f64>() / n as f64 } else { f64::NAN };
            let std = if n > 1 {
                (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            Aggregate {
                scheme,
                trials: rows.len(),
                failed: rows.len() - n,
                mean,
                std,
                min: values.iter().copied().fold(f64::NAN, f64::min),
                max: values.iter().copied().fold(f64::NAN, f64::max),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BatchOptions {
    /// Keep the full [`SolveResult`] in every record.
    pub keep_results: bool,
}

/// Seed of the randomization stream of `trial`, shared by all schemes.
pub fn randomization_seed(seed: u64, trial: u64) -> u64 {
    channel::stream_rng(seed, trial, Stream::Randomization).random()
}

/// Runs every scheme on `trials` paired channel draws.
///
/// Records come back ordered by trial, then by the order of `schemes`,
/// whatever the thread count.
pub fn monte_carlo(
    scenario: &Scenario,
    schemes: &[SchemeId],
    trials: u64,
    controls: &DriverControls,
    options: BatchOptions,
) -> Result<(Vec<TrialRecord>, Vec<Aggregate>), DriverError> {
    if trials == 0 {
        return Err(DriverError::NoTrials);
    }
    scenario.validate()?;
    let budget = Budget::from(scenario);
    let per_trial: Vec<Vec<TrialRecord>> = (0..trials)
        .into_par_iter()
        .map(|trial| run_trial(scenario, trial, schemes, &budget, controls, options))
        .collect();
    let records: Vec<TrialRecord> = per_trial.into_iter().flatten().collect();
    let aggregates = aggregate(&records, schemes);
    Ok((records, aggregates))
}

fn run_trial(
    scenario: &Scenario,
    trial: u64,
    schemes: &[SchemeId],
    budget: &Budget,
    controls: &DriverControls,
    options: BatchOptions,
) -> Vec<TrialRecord> {
    let mut controls = *controls;
    controls.sca.seed = randomization_seed(scenario.seed, trial);
    let real = channel::generate_realization(scenario, trial);
    let fingerprint = real.as_ref().map(|r| r.fingerprint()).unwrap_or_default();
    schemes
        .iter()
        .map(|&scheme| {
            let start = Instant::now();
            let outcome = match &real {
                Ok(r) => alternating_optimize(r, scheme, budget, &controls),
                Err(e) => Err(e.clone().into()),
            };
            let wall_ms = start.elapsed().as_secs_f64() * 1e3;
            match outcome {
                Ok(res) => TrialRecord {
                    trial_index: trial,
                    scheme,
                    realization: fingerprint.clone(),
                    total_latency: Some(res.total_latency),
                    groups: Some(res.grouping.len()),
                    m: res.beamform.m.clone(),
                    sca_iterations: Some(res.beamform.sca_iterations),
                    wall_ms,
                    error: None,
                    result: options.keep_results.then_some(res),
                },
                Err(e) => TrialRecord {
                    trial_index: trial,
                    scheme,
                    realization: fingerprint.clone(),
                    total_latency: None,
                    groups: None,
                    m: Vec::new(),
                    sca_iterations: None,
                    wall_ms,
                    error: Some(e.to_string()),
                    result: None,
                },
            }
        })
        .collect()
}

/// Mean latency of each scheme keyed by name, for quick comparisons.
pub fn means(aggregates: &[Aggregate]) -> BTreeMap<SchemeId, f64> {
    aggregates.iter().map(|a| (a.scheme, a.mean)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(users: usize, elements: usize) -> Scenario {
        Scenario {
            users,
            elements,
            payload_bits: vec![256; users],
            ..Scenario::default()
        }
    }

    fn quick() -> DriverControls {
        let mut c = DriverControls::default();
        c.sca.randomization_trials = 50;
        c
    }

    #[test]
    fn scheme_names_round_trip() {
        for kind in SchemeKind::ALL {
            for with_irs in [true, false] {
                let id = SchemeId::new(kind, with_irs);
                assert_eq!(id.to_string().parse::<SchemeId>().unwrap(), id);
            }
        }
        assert!("bogus".parse::<SchemeId>().is_err());
        assert_eq!(
            "single_codeword_no_irs".parse::<SchemeId>().unwrap(),
            SchemeId::new(SchemeKind::SingleCodeword, false)
        );
    }

    #[test]
    fn fixed_schemes_run_one_round() {
        let s = scenario(3, 4);
        let real = channel::generate_realization(&s, 0).unwrap();
        for kind in [SchemeKind::IndividualEncoding, SchemeKind::SingleCodeword] {
            let r = alternating_optimize(&real, SchemeId::new(kind, true), &Budget::from(&s), &quick()).unwrap();
            assert_eq!(r.outer_iterations, 1);
            assert_eq!(r.history.len(), 1);
            let expected = if kind == SchemeKind::SingleCodeword { 1 } else { 3 };
            assert_eq!(r.grouping.len(), expected);
            assert_eq!(r.total_latency, r.beamform.m.iter().sum::<u64>());
        }
    }

    #[test]
    fn history_is_non_increasing() {
        let s = scenario(4, 6);
        for trial in 0..3 {
            let real = channel::generate_realization(&s, trial).unwrap();
            let id = SchemeId::new(SchemeKind::ProposedGreedy, true);
            let r = alternating_optimize(&real, id, &Budget::from(&s), &quick()).unwrap();
            assert!(r.history.windows(2).all(|w| w[1] <= w[0]));
            assert_eq!(*r.history.last().unwrap(), r.total_latency);
        }
    }

    #[test]
    fn exhaustive_bounds_proposed() {
        let s = scenario(3, 3);
        let budget = Budget::from(&s);
        for trial in 0..2 {
            let real = channel::generate_realization(&s, trial).unwrap();
            let ex = alternating_optimize(&real, SchemeId::new(SchemeKind::Exhaustive, true), &budget, &quick()).unwrap();
            for kind in [SchemeKind::ProposedGreedy, SchemeKind::ProposedKmeans] {
                let p = alternating_optimize(&real, SchemeId::new(kind, true), &budget, &quick()).unwrap();
                assert!(ex.total_latency <= p.total_latency, "{} > {}", ex.total_latency, p.total_latency);
            }
        }
    }

    #[test]
    fn exhaustive_refuses_above_cap() {
        let s = scenario(3, 0);
        let real = channel::generate_realization(&s, 0).unwrap();
        let mut c = quick();
        c.exhaustive_cap = 2;
        let err = alternating_optimize(&real, SchemeId::new(SchemeKind::Exhaustive, true), &Budget::from(&s), &c);
        assert!(matches!(err, Err(DriverError::Grouping(GroupingError::ExhaustiveCap { .. }))));
    }

    #[test]
    fn records_are_paired_and_ordered() {
        let s = scenario(2, 2);
        let schemes = ["proposed_kmeans", "single_codeword_no_irs"].map(|n| n.parse().unwrap());
        let (records, agg) = monte_carlo(&s, &schemes, 2, &quick(), BatchOptions::default()).unwrap();
        assert_eq!(records.len(), 4);
        assert_eq!(records[0].realization, records[1].realization);
        assert_ne!(records[0].realization, records[2].realization);
        let order: Vec<(u64, SchemeId)> = records.iter().map(|r| (r.trial_index, r.scheme)).collect();
        assert_eq!(order, vec![(0, schemes[0]), (0, schemes[1]), (1, schemes[0]), (1, schemes[1])]);
        assert_eq!(agg.len(), 2);
        assert!(agg.iter().all(|a| a.trials == 2 && a.failed == 0));
    }

    #[test]
    fn zero_trials_is_an_error() {
        let s = scenario(2, 0);
        assert!(matches!(
            monte_carlo(&s, &[], 0, &quick(), BatchOptions::default()),
            Err(DriverError::NoTrials)
        ));
    }

    #[test]
    fn aggregate_statistics() {
        let id = SchemeId::new(SchemeKind::SingleCodeword, true);
        let row = |lat: Option<u64>| TrialRecord {
            trial_index: 0,
            scheme: id,
            realization: String::new(),
            total_latency: lat,
            groups: None,
            m: Vec::new(),
            sca_iterations: None,
            wall_ms: 0.0,
            error: lat.is_none().then(|| "x".to_string()),
            result: None,
        };
        let agg = aggregate(&[row(Some(2)), row(Some(4)), row(None)], &[id]);
        assert_eq!(agg[0].trials, 3);
        assert_eq!(agg[0].failed, 1);
        assert_eq!(agg[0].mean, 3.0);
        assert!((agg[0].std - 2f64.sqrt()).abs() < 1e-15);
        assert_eq!((agg[0].min, agg[0].max), (2.0, 4.0));
    }
}
