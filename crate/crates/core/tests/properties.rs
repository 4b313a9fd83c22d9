use nalgebra::DVector;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use urllc_core::beamform::{self, P2Context, ScaControls};
use urllc_core::channel::{self, ChannelRealization, Scenario};
use urllc_core::conic::{self, Cone, ConicProblem, SolverSettings, Status};
use urllc_core::driver::{self, Budget, DriverControls, SchemeId, SchemeKind};
use urllc_core::grouping::{self, GreedyRule, Grouping, SnrScale};
use urllc_core::{fbl, oracle};

fn scenario(users: usize, elements: usize, seed: u64) -> Scenario {
    Scenario {
        users,
        elements,
        payload_bits: vec![256; users],
        seed,
        ..Scenario::default()
    }
}

fn quick_controls() -> ScaControls {
    ScaControls {
        randomization_trials: 50,
        ..ScaControls::default()
    }
}

fn ctx<'a>(s: &Scenario, real: &'a ChannelRealization, g: &'a Grouping) -> P2Context<'a> {
    P2Context {
        realization: real,
        grouping: g,
        eps_max: s.eps_max,
        tx_power_w: s.tx_power_w,
        noise_power_w: s.noise_power_w,
    }
}

fn assert_partition(g: &Grouping, users: usize) {
    let mut seen = vec![false; users];
    for members in g.groups() {
        assert!(!members.is_empty());
        for &k in members {
            assert!(!seen[k], "user {k} in two groups");
            seen[k] = true;
        }
    }
    assert!(seen.iter().all(|&s| s), "not every user is grouped");
}

/// Smallest cone margin of `x`, relative to the block norm.
fn cone_margin(x: &DVector<f64>, cones: &[Cone]) -> f64 {
    let mut worst = f64::INFINITY;
    let mut at = 0;
    for &cone in cones {
        let block = x.rows(at, cone.dim());
        let scale = block.norm().max(1.0);
        let margin = match cone {
            Cone::NonNeg(_) => block.min(),
            Cone::Soc(_) => block[0] - block.rows(1, cone.dim() - 1).norm(),
            Cone::Psd(side) => {
                let m = conic::smat(block.as_slice(), side);
                m.symmetric_eigen().eigenvalues.min()
            }
        };
        worst = worst.min(margin / scale);
        at += cone.dim();
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pep_and_blocklength_invert(eps in 1e-9f64..0.5, snr in 0.05f64..200.0, d in 8u64..4096) {
        let m = fbl::blocklength(eps, snr, d).unwrap();
        let p = fbl::pep(m, snr, d).unwrap();
        prop_assert!((p - eps).abs() <= 1e-8 * eps);
    }

    #[test]
    fn pep_decreasing_in_blocklength(m in 20.0f64..3000.0, snr in 0.05f64..100.0, d in 8u64..512) {
        let a = fbl::pep(m, snr, d).unwrap();
        prop_assume!(a > 0.0 && a < 1.0);
        prop_assert!(fbl::pep(m * 1.05, snr, d).unwrap() < a);
    }

    #[test]
    fn q_function_strictly_decreasing(x in -8.0f64..8.0, dx in 1e-3f64..1.0) {
        prop_assert!(fbl::q_function(x + dx) < fbl::q_function(x));
    }

    #[test]
    fn lifted_matrix_trace_and_corner(seed in 0u64..1000, n in 1usize..12) {
        let s = scenario(3, n, seed);
        let real = channel::generate_realization(&s, 0).unwrap();
        for k in 0..3 {
            let r = &real.lifted[k];
            let phi_sq: f64 = real.phi[k].iter().map(|p| p.norm_sqr()).sum();
            prop_assert!((r.trace().re - phi_sq).abs() <= 1e-12 * phi_sq.max(1e-300));
            prop_assert_eq!(r[(n, n)], Complex64::new(0.0, 0.0));
        }
    }

    #[test]
    fn lifted_gain_invariant_under_common_phase(seed in 0u64..1000, theta in 0.0f64..std::f64::consts::TAU) {
        let s = scenario(2, 6, seed);
        let real = channel::generate_realization(&s, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vbar: Vec<Complex64> = (0..7).map(|_| Complex64::from_polar(1.0, rng.random_range(0.0..6.3))).collect();
        let rot = Complex64::from_polar(1.0, theta);
        for k in 0..2 {
            let r = &real.lifted[k];
            let quad = |w: &[Complex64]| -> f64 {
                let w = nalgebra::DVector::from_column_slice(w);
                (w.adjoint() * r * &w)[(0, 0)].re
            };
            let rotated: Vec<Complex64> = vbar.iter().map(|z| z * rot).collect();
            let a = quad(&vbar);
            prop_assert!((a - quad(&rotated)).abs() <= 1e-9 * a.abs().max(1e-20));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conic_solutions_are_in_cone_with_small_gap(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = oracle::planted_instance(&mut rng, 20);
        let sol = conic::solve(&inst.problem, &SolverSettings::default()).unwrap();
        prop_assert_eq!(sol.status, Status::Optimal);
        prop_assert!(cone_margin(&sol.x, &inst.problem.cones) >= -1e-7);
        prop_assert!(cone_margin(&sol.z, &inst.problem.cones) >= -1e-7);
        let gap = (sol.primal_objective - sol.dual_objective).abs();
        prop_assert!(gap <= 1e-7 * (1.0 + sol.primal_objective.abs()));
    }

    #[test]
    fn conic_argmin_survives_objective_scaling(seed in 0u64..10_000, alpha in 0.1f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = oracle::planted_instance(&mut rng, 16);
        let p = &inst.problem;
        let scaled = ConicProblem::new(&p.c * alpha, p.a.clone(), p.b.clone(), p.cones.clone());
        let settings = SolverSettings::default();
        let x = conic::solve(&scaled, &settings).unwrap().x;
        let value = p.c.dot(&x);
        prop_assert!((value - inst.optimal_value).abs() <= 1e-6 * (1.0 + inst.optimal_value.abs()));
        prop_assert!((&p.a * &x - &p.b).norm() <= 1e-6 * (1.0 + p.b.norm()));
        prop_assert!(cone_margin(&x, &p.cones) >= -1e-7);
    }

    #[test]
    fn groupings_are_partitions(snrs in prop::collection::vec(0.01f64..300.0, 1..8), eps in 1e-8f64..1e-2) {
        let d = vec![256u64; snrs.len()];
        let users = snrs.len();
        assert_partition(&grouping::greedy_grouping(&snrs, &d, eps, GreedyRule::Min).unwrap(), users);
        assert_partition(&grouping::greedy_grouping(&snrs, &d, eps, GreedyRule::Max).unwrap(), users);
        for g in 1..=users {
            assert_partition(&grouping::kmeans_grouping(&snrs, &d, g, SnrScale::Linear).unwrap(), users);
            assert_partition(&grouping::kmeans_grouping(&snrs, &d, g, SnrScale::Db).unwrap(), users);
        }
        let eval = |g: &Grouping| grouping::fixed_snr_latency(g, &snrs, eps);
        assert_partition(&grouping::exhaustive_grouping(&d, 8, eval).unwrap().0, users);
        assert_partition(&grouping::kmeans_best(&snrs, &d, SnrScale::Linear, eval).unwrap().0, users);
    }

    #[test]
    fn kmeans_objective_never_increases(snrs in prop::collection::vec(0.01f64..300.0, 2..10), g in 1usize..6) {
        let d = vec![256u64; snrs.len()];
        let run = grouping::kmeans_run(&snrs, &d, g.min(snrs.len()), SnrScale::Linear).unwrap();
        for w in run.objective_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{:?}", run.objective_history);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn latency_invariant_under_global_phase(seed in 0u64..1000, theta in 0.0f64..std::f64::consts::TAU) {
        let s = scenario(3, 6, seed);
        let real = channel::generate_realization(&s, 0).unwrap();
        let g = Grouping::new(vec![vec![0, 2], vec![1]], &s.payload_bits).unwrap();
        let c = ctx(&s, &real, &g);
        let res = beamform::solve_p2(&c, &quick_controls()).unwrap();
        let rot = Complex64::from_polar(1.0, theta);
        let vbar: Vec<Complex64> = res.v.iter().chain(std::iter::once(&Complex64::new(1.0, 0.0))).map(|z| z * rot).collect();
        let back: Vec<Complex64> = vbar[..6].iter().map(|z| z / vbar[6]).collect();
        prop_assert!((c.latency(&res.v) - c.latency(&back)).abs() <= 1e-9 * c.latency(&res.v));
    }

    #[test]
    fn final_result_meets_every_constraint(seed in 0u64..1000, n in 1usize..8) {
        let s = scenario(3, n, seed);
        let real = channel::generate_realization(&s, 0).unwrap();
        let g = Grouping::new(vec![vec![0], vec![1, 2]], &s.payload_bits).unwrap();
        let c = ctx(&s, &real, &g);
        let res = beamform::solve_p2(&c, &quick_controls()).unwrap();
        prop_assert!(res.v.iter().all(|z| (z.norm() - 1.0).abs() <= 1e-12));
        prop_assert!(res.m.iter().all(|&m| m >= 1));
        let snrs = c.snrs(&res.v).unwrap();
        for (i, members) in g.groups().iter().enumerate() {
            for &k in members {
                prop_assert!(fbl::pep(res.m[i] as f64, snrs[k], g.payload(i)).unwrap() <= s.eps_max);
            }
        }
        let init = beamform::initialize(&c, &quick_controls()).unwrap();
        let v0: Vec<Complex64> = (0..n).map(|i| init.v[(i, n)]).collect();
        let (m0, _) = beamform::integer_blocklengths(&g, &c.snrs(&v0).unwrap(), s.eps_max).unwrap();
        prop_assert!(res.total_latency <= m0.iter().sum::<u64>());
    }

    #[test]
    fn without_surface_latency_is_the_ceiled_closed_form(seed in 0u64..1000) {
        let s = scenario(4, 0, seed);
        let real = channel::generate_realization(&s, 0).unwrap();
        let g = Grouping::new(vec![vec![0, 3], vec![1, 2]], &s.payload_bits).unwrap();
        let c = ctx(&s, &real, &g);
        let res = beamform::solve_p2(&c, &quick_controls()).unwrap();
        let snrs: Vec<f64> = real.h.iter().map(|h| s.tx_power_w * h.norm_sqr() / s.noise_power_w).collect();
        let (m, _) = beamform::integer_blocklengths(&g, &snrs, s.eps_max).unwrap();
        let (real_m, _) = fbl::group_total_latency(&g, &snrs, s.eps_max).unwrap();
        prop_assert_eq!(&res.m, &m);
        for (a, b) in m.iter().zip(&real_m) {
            prop_assert!(*a as f64 >= *b);
        }
    }

    #[test]
    fn paired_schemes_are_ordered(seed in 0u64..1000, trial in 0u64..50) {
        let s = scenario(3, 4, seed);
        let real = channel::generate_realization(&s, trial).unwrap();
        let budget = Budget::from(&s);
        let controls = DriverControls {
            sca: ScaControls {
                seed: driver::randomization_seed(seed, trial),
                ..quick_controls()
            },
            ..DriverControls::default()
        };
        let latency = |kind| {
            driver::alternating_optimize(&real, SchemeId::new(kind, true), &budget, &controls).unwrap().total_latency
        };
        let exhaustive = latency(SchemeKind::Exhaustive);
        let proposed = latency(SchemeKind::ProposedGreedy);
        let worst_fixed = latency(SchemeKind::IndividualEncoding).max(latency(SchemeKind::SingleCodeword));
        prop_assert!(proposed <= worst_fixed, "proposed {proposed} > {worst_fixed}");
        prop_assert!(exhaustive <= proposed, "exhaustive {exhaustive} > proposed {proposed}");
    }
}

#[test]
fn taylor_expansion_lower_bound_sampling() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut violations = 0;
    let samples = 1000;
    for _ in 0..samples {
        let m0 = 50.0 + 800.0 * rng.random::<f64>();
        let mu0 = 0.1 + 100.0 * rng.random::<f64>();
        let eps = 10f64.powf(-1.0 - 8.0 * rng.random::<f64>());
        let t = beamform::taylor_lower_bound(m0, mu0, 256, eps).unwrap();
        let radius = 0.1 * (m0 * m0 + mu0 * mu0).sqrt();
        let (a, r): (f64, f64) = (rng.random_range(0.0..std::f64::consts::TAU), radius * rng.random::<f64>().sqrt());
        let m = (m0 + r * a.cos()).max(1.0);
        let mu = (mu0 + r * a.sin()).max(1e-6);
        let exact = beamform::r_function(m, mu, 256, eps).unwrap();
        violations += usize::from(t.eval(m0, mu0, m, mu) > exact + 1e-9 * exact.abs().max(1.0));
    }
    println!("taylor lower bound violated at {violations} of {samples} trust-region samples");
}
