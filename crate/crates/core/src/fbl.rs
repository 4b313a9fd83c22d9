//! Finite-blocklength arithmetic.
//!
//! Normal approximation of the maximal coding rate over a complex AWGN
//! channel, written in terms of the quantities a short-packet scheduler
//! actually trades: payload bits `D`, received SNR `γ` (linear), blocklength
//! `m` in channel uses and packet error probability `ε`.

use std::f64::consts::{LN_2, SQRT_2};

use thiserror::Error;

use crate::grouping::Grouping;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FblError {
    #[error("{name} = {value} is outside the domain {domain}")]
    Domain {
        name: &'static str,
        value: f64,
        domain: &'static str,
    },
    #[error("group {0} has no members")]
    EmptyGroup(usize),
    #[error("user {user} has no SNR entry ({available} provided)")]
    MissingSnr { user: usize, available: usize },
}

fn domain(name: &'static str, value: f64, domain: &'static str) -> FblError {
    FblError::Domain {
        name,
        value,
        domain,
    }
}

/// One operating point of the normal approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FblPoint {
    pub payload_bits: u64,
    pub snr: f64,
    pub blocklength: f64,
    pub pep: f64,
}

/// Gaussian upper-tail probability `Q(x) = P(N(0,1) > x)`.
pub fn q_function(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

fn std_normal_pdf(x: f64) -> f64 {
    const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Rational starting point for the normal quantile (P. J. Acklam), relative
/// error around 1e-9, polished by Halley steps in [`q_inverse`].
fn acklam_lower_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    const P_LOW: f64 = 0.024_25;

    if p < P_LOW {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Inverse of [`q_function`]: the `x` with `Q(x) = p`.
pub fn q_inverse(p: f64) -> Result<f64, FblError> {
    if !(p > 0.0 && p < 1.0) {
        return Err(domain("p", p, "(0, 1)"));
    }
    if p == 0.5 {
        return Ok(0.0);
    }
    // Work in the tail where p is represented with full relative precision.
    // 1 - p is exact for p in [0.5, 1).
    let (tail, sign) = if p < 0.5 { (p, 1.0) } else { (1.0 - p, -1.0) };

    // Q(x) = tail  <=>  Phi(-x) = tail.
    let mut x = -acklam_lower_quantile(tail);
    for _ in 0..3 {
        let pdf = std_normal_pdf(x);
        if pdf == 0.0 {
            break;
        }
        // f(x) = Q(x) - tail, f' = -pdf, f'' = x pdf.
        let t = (q_function(x) - tail) / pdf;
        let step = t / (1.0 + 0.5 * x * t);
        x += step;
        if step.abs() <= 1e-16 * x.abs().max(1.0) {
            break;
        }
    }
    Ok(sign * x)
}

/// `1 - (1 + γ)^-2` without cancellation for small `γ`.
fn dispersion_factor(snr: f64) -> f64 {
    let one_plus = 1.0 + snr;
    snr * (2.0 + snr) / (one_plus * one_plus)
}

fn check_snr(snr: f64) -> Result<(), FblError> {
    if snr > 0.0 && snr.is_finite() {
        Ok(())
    } else {
        Err(domain("snr", snr, "(0, inf)"))
    }
}

fn check_payload(bits: u64) -> Result<(), FblError> {
    if bits >= 1 {
        Ok(())
    } else {
        Err(domain("payload_bits", bits as f64, "[1, inf)"))
    }
}

/// Packet error probability of a `payload_bits`-bit codeword of `blocklength`
/// symbols received at `snr`.
pub fn pep(blocklength: f64, snr: f64, payload_bits: u64) -> Result<f64, FblError> {
    if !(blocklength > 0.0 && blocklength.is_finite()) {
        return Err(domain("blocklength", blocklength, "(0, inf)"));
    }
    check_snr(snr)?;
    check_payload(payload_bits)?;
    let numerator = blocklength * snr.ln_1p() - LN_2 * payload_bits as f64;
    let denominator = blocklength.sqrt() * dispersion_factor(snr).sqrt();
    Ok(q_function(numerator / denominator))
}

/// Smallest real blocklength meeting `pep <= eps` at `snr`, in closed form.
///
/// Only valid for `eps <= 0.5`; above that the quadratic in `sqrt(m)` picks
/// the wrong root.
pub fn blocklength(eps: f64, snr: f64, payload_bits: u64) -> Result<f64, FblError> {
    if !(eps > 0.0 && eps <= 0.5) {
        return Err(domain("eps", eps, "(0, 0.5]"));
    }
    check_snr(snr)?;
    check_payload(payload_bits)?;
    let capacity = snr.ln_1p();
    let base = payload_bits as f64 * LN_2 / capacity;
    let lambda = dispersion_factor(snr).sqrt() * q_inverse(eps)? / capacity;
    Ok(base + 0.5 * lambda * lambda + lambda * (0.25 * lambda * lambda + base).sqrt())
}

/// Normal-approximation rate in bits per channel use.
pub fn achievable_rate(blocklength: f64, snr: f64, eps: f64) -> Result<f64, FblError> {
    if !(blocklength > 0.0 && blocklength.is_finite()) {
        return Err(domain("blocklength", blocklength, "(0, inf)"));
    }
    check_snr(snr)?;
    if !(eps > 0.0 && eps < 1.0) {
        return Err(domain("eps", eps, "(0, 1)"));
    }
    let dispersion = (dispersion_factor(snr) / blocklength).sqrt() * q_inverse(eps)? / LN_2;
    Ok(snr.ln_1p() / LN_2 - dispersion)
}

/// Per-group real blocklengths and their sum for a grouping under fixed SNRs.
///
/// Each group is served at the SNR of its weakest member.
pub fn group_total_latency(
    grouping: &Grouping,
    snrs: &[f64],
    eps: f64,
) -> Result<(Vec<f64>, f64), FblError> {
    let mut per_group = Vec::with_capacity(grouping.len());
    for (i, members) in grouping.groups().iter().enumerate() {
        let min_snr = group_min_snr(members, snrs).ok_or(FblError::EmptyGroup(i))??;
        per_group.push(blocklength(eps, min_snr, grouping.payload(i))?);
    }
    let total = per_group.iter().sum();
    Ok((per_group, total))
}

fn group_min_snr(members: &[usize], snrs: &[f64]) -> Option<Result<f64, FblError>> {
    let mut min: Option<f64> = None;
    for &k in members {
        let Some(&snr) = snrs.get(k) else {
            return Some(Err(FblError::MissingSnr {
                user: k,
                available: snrs.len(),
            }));
        };
        min = Some(min.map_or(snr, |m: f64| m.min(snr)));
    }
    min.map(Ok)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn q_symmetry_and_reflection() {
        assert_eq!(q_function(0.0), 0.5);
        let y = 1.7;
        assert!((q_function(-y) - (1.0 - q_function(y))).abs() < 1e-15);
    }

    #[test]
    fn q_inverse_half_is_zero() {
        assert_eq!(q_inverse(0.5).unwrap(), 0.0);
    }

    #[test]
    fn q_inverse_round_trip_integers() {
        for x in -3..=3 {
            let x = x as f64;
            let back = q_inverse(q_function(x)).unwrap();
            assert!((back - x).abs() < 1e-9, "{x} -> {back}");
        }
    }

    #[test]
    fn q_inverse_rejects_out_of_domain() {
        for p in [0.0, 1.0, -0.1, 1.5, f64::NAN] {
            assert!(q_inverse(p).is_err(), "{p}");
        }
    }

    #[test]
    fn q_inverse_relative_residual() {
        let mut p = 1e-12;
        while p < 1.0 - 1e-12 {
            let x = q_inverse(p).unwrap();
            let err = (q_function(x) - p).abs();
            assert!(err <= 1e-12 * p, "p={p:e} err={err:e}");
            p *= 1.37;
        }
        for p in [1.0 - 1e-12, 1.0 - 1e-9, 0.999, 0.75] {
            let x = q_inverse(p).unwrap();
            assert!((q_function(x) - p).abs() <= 1e-12 * p);
        }
    }

    #[test]
    fn pep_is_half_at_capacity_blocklength() {
        let (snr, d) = (3.0_f64, 256);
        let m = LN_2 * d as f64 / snr.ln_1p();
        assert!((pep(m, snr, d).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn pep_strictly_decreasing_in_blocklength() {
        let (snr, d) = (10.0, 256);
        let mut prev = pep(50.0, snr, d).unwrap();
        for m in 51..=2000 {
            let cur = pep(m as f64, snr, d).unwrap();
            // Deep in the tail the Q-function underflows to exactly zero.
            assert!(cur < prev || cur == 0.0, "m={m}");
            prev = cur;
        }
    }

    #[test]
    fn pep_domain_errors() {
        assert!(pep(0.0, 1.0, 8).is_err());
        assert!(pep(-1.0, 1.0, 8).is_err());
        assert!(pep(10.0, 0.0, 8).is_err());
        assert!(pep(10.0, 1.0, 0).is_err());
    }

    #[test]
    fn blocklength_at_half_pep_is_capacity_limit() {
        let (snr, d) = (0.7_f64, 2048);
        let expect = d as f64 * LN_2 / snr.ln_1p();
        assert!((blocklength(0.5, snr, d).unwrap() - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn blocklength_rejects_pep_above_half() {
        assert!(blocklength(0.51, 1.0, 8).is_err());
        assert!(blocklength(0.0, 1.0, 8).is_err());
    }

    #[test]
    fn rate_at_half_pep_is_shannon() {
        let snr = 10.0_f64;
        let r = achievable_rate(123.0, snr, 0.5).unwrap();
        assert_eq!(r, snr.ln_1p() / LN_2);
    }

    #[test]
    fn rate_approaches_capacity() {
        let r = achievable_rate(1e8, 10.0, 1e-6).unwrap();
        assert!((r - 11.0_f64.log2()).abs() <= 1e-3);
    }

    #[test]
    fn rate_times_blocklength_recovers_payload() {
        for &(m, snr, d) in &[(200.0, 10.0, 256_u64), (120.0, 3.0, 64), (900.0, 1.5, 1024)] {
            let eps = pep(m, snr, d).unwrap();
            let bits = achievable_rate(m, snr, eps).unwrap() * m;
            assert!((bits - d as f64).abs() <= 1e-6 * d as f64, "{bits} vs {d}");
        }
    }

    #[test]
    fn singleton_groups_match_individual_blocklengths() {
        let g = Grouping::singletons(&[256, 256, 512]);
        let snrs = [1.0, 4.0, 9.0];
        let (per, total) = group_total_latency(&g, &snrs, 1e-5).unwrap();
        for k in 0..3 {
            let d = [256, 256, 512][k];
            assert!((per[k] - blocklength(1e-5, snrs[k], d).unwrap()).abs() < 1e-12);
        }
        assert!((total - per.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn equal_snr_pair_gains_from_joint_encoding() {
        let snrs = [5.0, 5.0];
        let joint = Grouping::single(&[256, 256]);
        let split = Grouping::singletons(&[256, 256]);
        let (_, t_joint) = group_total_latency(&joint, &snrs, 1e-6).unwrap();
        let (_, t_split) = group_total_latency(&split, &snrs, 1e-6).unwrap();
        assert!(t_joint < t_split);
    }

    #[test]
    fn disparate_snr_pair_prefers_separate_codewords() {
        let snrs = [0.01, 100.0];
        let joint = Grouping::single(&[256, 256]);
        let split = Grouping::singletons(&[256, 256]);
        let (_, t_joint) = group_total_latency(&joint, &snrs, 1e-6).unwrap();
        let (_, t_split) = group_total_latency(&split, &snrs, 1e-6).unwrap();
        assert!(t_split < t_joint, "{t_split} vs {t_joint}");
    }

    #[test]
    fn missing_snr_is_an_error() {
        let g = Grouping::single(&[8, 8, 8]);
        assert!(matches!(
            group_total_latency(&g, &[1.0, 1.0], 1e-3),
            Err(FblError::MissingSnr { user: 2, .. })
        ));
    }

    mod props {
        use super::super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn blocklength_monotone(snr in 0.05f64..200.0, d in 8u64..4096, eps in 1e-9f64..0.4) {
                let m = blocklength(eps, snr, d).unwrap();
                prop_assert!(blocklength(eps, snr * 1.01, d).unwrap() < m);
                prop_assert!(blocklength(eps, snr, d + 1).unwrap() > m);
            }

            #[test]
            fn pep_decreasing_in_snr(m in 20.0f64..3000.0, snr in 0.05f64..100.0, d in 8u64..512) {
                // Monotone in SNR on the operating region pep < 1/2.
                let a = pep(m, snr, d).unwrap();
                prop_assume!(a < 0.5);
                let b = pep(m, snr * 1.05, d).unwrap();
                prop_assert!(b < a || a == 0.0);
            }

            #[test]
            fn q_inverse_is_decreasing(p in 1e-12f64..0.999, r in 1.001f64..2.0) {
                let q = (p * r).min(1.0 - 1e-12);
                prop_assume!(q > p);
                prop_assert!(q_inverse(q).unwrap() < q_inverse(p).unwrap());
            }
        }
    }
}
