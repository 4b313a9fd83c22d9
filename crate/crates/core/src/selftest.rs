//! Quick runs of the reference-oracle checks, for the `selftest` command.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::beamform::{self, P2Context, ScaControls};
use crate::channel::{self, Scenario};
use crate::conic::{self, Cone, ConicProblem, SolverSettings, Status};
use crate::fbl;
use crate::grouping::{self, Grouping};
use crate::oracle;

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn check(name: &'static str, f: impl FnOnce() -> (bool, String)) -> Check {
    let start = Instant::now();
    let (passed, detail) = f();
    Check {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

pub fn run_all() -> Vec<Check> {
    vec![
        check("q_function_vs_quadrature", q_function_vs_quadrature),
        check("q_inverse_vs_bisection", q_inverse_vs_bisection),
        check("blocklength_round_trip", blocklength_round_trip),
        check("merge_gain", merge_gain),
        check("conic_planted_instances", conic_planted_instances),
        check("conic_2x2_sdp", conic_2x2_sdp),
        check("single_user_alignment", single_user_alignment),
        check("exhaustive_vs_naive_enumerator", exhaustive_vs_naive),
    ]
}

fn q_function_vs_quadrature() -> (bool, String) {
    let mut worst = 0.0f64;
    for i in 0..=120 {
        let x = -6.0 + 0.1 * i as f64;
        let rel = (fbl::q_function(x) / oracle::q_quadrature(x) - 1.0).abs();
        worst = worst.max(rel);
    }
    (worst <= 1e-10, format!("max relative error {worst:.3e}"))
}

fn q_inverse_vs_bisection() -> (bool, String) {
    let got = fbl::q_inverse(1e-9).unwrap_or(f64::NAN);
    let want = oracle::q_inverse_bisection(1e-9);
    let err = (got - want).abs();
    (err <= 1e-10, format!("|Δ| = {err:.3e}"))
}

const EPS_GRID: [f64; 5] = [1e-9, 1e-6, 1e-3, 0.1, 0.4];
const SNR_GRID: [f64; 4] = [0.1, 1.0, 10.0, 100.0];
const PAYLOAD_GRID: [u64; 3] = [64, 256, 2048];

fn blocklength_round_trip() -> (bool, String) {
    let mut worst = 0.0f64;
    for eps in EPS_GRID {
        for snr in SNR_GRID {
            for d in PAYLOAD_GRID {
                let rel = fbl::blocklength(eps, snr, d)
                    .and_then(|m| fbl::pep(m, snr, d))
                    .map_or(f64::INFINITY, |p| (p - eps).abs() / eps);
                worst = worst.max(rel);
            }
        }
    }
    (worst <= 1e-8, format!("max relative error {worst:.3e}"))
}

fn merge_gain() -> (bool, String) {
    let mut ok = true;
    let mut worst = f64::NEG_INFINITY;
    for eps in EPS_GRID {
        for snr in SNR_GRID {
            for d in PAYLOAD_GRID {
                match (fbl::blocklength(eps, snr, 2 * d), fbl::blocklength(eps, snr, d)) {
                    (Ok(joint), Ok(single)) => {
                        ok &= joint < 2.0 * single;
                        worst = worst.max(joint / (2.0 * single));
                    }
                    _ => ok = false,
                }
            }
        }
    }
    (ok, format!("largest joint/separate ratio {worst:.6}"))
}

fn conic_planted_instances() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let settings = SolverSettings::default();
    let mut worst_res = 0.0f64;
    let mut worst_obj = 0.0f64;
    for _ in 0..100 {
        let inst = oracle::planted_instance(&mut rng, 20);
        match conic::solve(&inst.problem, &settings) {
            Ok(sol) if sol.status == Status::Optimal => {
                worst_res = worst_res.max(sol.residuals.max());
                worst_obj = worst_obj.max((sol.objective() - inst.optimal_value).abs());
            }
            _ => return (false, "solver did not reach optimality".into()),
        }
    }
    (
        worst_res <= 1e-7 && worst_obj <= 1e-6,
        format!("max residual {worst_res:.2e}, max objective error {worst_obj:.2e}"),
    )
}

/// `min Tr(C X)` over 2×2 correlation matrices with `C = [[0, −1], [−1, 0]]`.
pub fn two_by_two_sdp() -> ConicProblem {
    let c = conic::svec(&nalgebra::DMatrix::from_row_slice(2, 2, &[0.0, -1.0, -1.0, 0.0]));
    ConicProblem::new(
        nalgebra::DVector::from_vec(c),
        nalgebra::DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]),
        nalgebra::DVector::from_vec(vec![1.0, 1.0]),
        vec![Cone::Psd(2)],
    )
}

fn conic_2x2_sdp() -> (bool, String) {
    let (brute, _) = oracle::brute_force_2x2_sdp([[0.0, -1.0], [-1.0, 0.0]], 2000);
    match conic::solve(&two_by_two_sdp(), &SolverSettings::default()) {
        Ok(sol) => {
            let err = (sol.objective() - brute).abs();
            (err <= 1e-7, format!("value {:.9}, brute force {brute}", sol.objective()))
        }
        Err(e) => (false, e.to_string()),
    }
}

fn single_user_alignment() -> (bool, String) {
    let mut worst = f64::INFINITY;
    let controls = ScaControls {
        randomization_trials: 100,
        ..ScaControls::default()
    };
    for (n, trial) in [(1, 0), (8, 1), (32, 2)] {
        let s = Scenario {
            users: 1,
            elements: n,
            payload_bits: vec![256],
            ..Scenario::default()
        };
        let Ok(real) = channel::generate_realization(&s, trial) else {
            return (false, "channel generation failed".into());
        };
        let g = Grouping::single(&s.payload_bits);
        let ctx = P2Context {
            realization: &real,
            grouping: &g,
            eps_max: s.eps_max,
            tx_power_w: s.tx_power_w,
            noise_power_w: s.noise_power_w,
        };
        let Ok(res) = beamform::solve_p2(&ctx, &controls) else {
            return (false, format!("solve failed at N={n}"));
        };
        let bound = oracle::single_user_optimal_snr(real.h[0], &real.phi[0], s.tx_power_w, s.noise_power_w);
        worst = worst.min(res.snrs[0] / bound);
    }
    (worst >= 0.999, format!("worst SNR ratio {worst:.6}"))
}

fn exhaustive_vs_naive() -> (bool, String) {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let eps = 1e-5;
    for _ in 0..10 {
        let snrs: Vec<f64> = (0..4).map(|_| 10f64.powf(rng.random_range(-1.0..2.0))).collect();
        let payloads: Vec<u64> = (0..4).map(|_| rng.random_range(32..512)).collect();
        let eval = |g: &Grouping| grouping::fixed_snr_latency(g, &snrs, eps);
        let Ok((_, best)) = grouping::exhaustive_grouping(&payloads, 8, eval) else {
            return (false, "exhaustive search failed".into());
        };
        let naive = oracle::naive_partitions(4)
            .into_iter()
            .filter_map(|groups| Grouping::new(groups, &payloads).ok())
            .map(|g| eval(&g))
            .fold(f64::INFINITY, f64::min);
        if (best - naive).abs() > 1e-9 {
            return (false, format!("exhaustive {best} vs naive {naive}"));
        }
    }
    (true, "10 instances agree".into())
}
