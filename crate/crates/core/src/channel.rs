//! Geometry, fading draws and the lifted channel matrices.
//!
//! All powers are linear (watts, or unitless gains). Conversion from dB
//! happens in the configuration layer.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChannelError {
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("reflection coefficient {index} has modulus {modulus}, expected 1")]
    NotUnitModulus { index: usize, modulus: f64 },
    #[error("beamformer has {got} entries but the surface has {expected} elements")]
    Dimension { got: usize, expected: usize },
    #[error("user {user} out of range ({users} users)")]
    User { user: usize, users: usize },
}

/// Path-loss exponents of the three link types.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathlossExponents {
    pub bs_user: f64,
    pub irs_user: f64,
    pub bs_irs: f64,
}

impl Default for PathlossExponents {
    fn default() -> Self {
        Self {
            bs_user: 3.5,
            irs_user: 2.5,
            bs_irs: 2.0,
        }
    }
}

/// Static description of one experiment point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    pub bs_position: [f64; 2],
    pub irs_position: [f64; 2],
    pub user_area_center: [f64; 2],
    pub user_area_radius: f64,
    pub users: usize,
    /// Number of reflecting elements; zero means no surface.
    pub elements: usize,
    pub tx_power_w: f64,
    pub noise_power_w: f64,
    /// Payload of each user in bits (length `users`).
    pub payload_bits: Vec<u64>,
    pub eps_max: f64,
    pub pathloss_exponents: PathlossExponents,
    /// Linear path gain at the 1 m reference distance.
    pub pathloss_ref: f64,
    pub seed: u64,
}

impl Default for Scenario {
    fn default() -> Self {
        let users = 5;
        Self {
            bs_position: [0.0, 0.0],
            irs_position: [100.0, 20.0],
            user_area_center: [100.0, 0.0],
            user_area_radius: 10.0,
            users,
            elements: 20,
            tx_power_w: 1.0,         // 30 dBm
            noise_power_w: 1e-11,    // -80 dBm
            payload_bits: vec![256; users],
            eps_max: 1e-5,
            pathloss_exponents: PathlossExponents::default(),
            pathloss_ref: 1e-3,      // -30 dB
            seed: 1,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ChannelError> {
        let bad = |msg: String| Err(ChannelError::Scenario(msg));
        if self.users == 0 {
            return bad("users must be at least 1".into());
        }
        if self.payload_bits.len() != self.users {
            return bad(format!(
                "payload_bits has {} entries for {} users",
                self.payload_bits.len(),
                self.users
            ));
        }
        if self.payload_bits.contains(&0) {
            return bad("payload_bits entries must be at least 1".into());
        }
        if !(self.tx_power_w > 0.0 && self.tx_power_w.is_finite()) {
            return bad(format!("tx_power must be positive, got {}", self.tx_power_w));
        }
        if !(self.noise_power_w > 0.0 && self.noise_power_w.is_finite()) {
            return bad(format!("noise_power must be positive, got {}", self.noise_power_w));
        }
        if !(self.eps_max > 0.0 && self.eps_max <= 0.5) {
            return bad(format!("eps_max must lie in (0, 0.5], got {}", self.eps_max));
        }
        if !(self.pathloss_ref > 0.0 && self.pathloss_ref.is_finite()) {
            return bad(format!("pathloss_ref must be positive, got {}", self.pathloss_ref));
        }
        if !(self.user_area_radius >= 0.0 && self.user_area_radius.is_finite()) {
            return bad("user_area_radius must be non-negative".into());
        }
        let e = self.pathloss_exponents;
        if ![e.bs_user, e.irs_user, e.bs_irs].iter().all(|x| x.is_finite()) {
            return bad("path-loss exponents must be finite".into());
        }
        if distance(self.bs_position, self.irs_position) <= 0.0 {
            return bad("base station and surface must not coincide".into());
        }
        Ok(())
    }

    /// Same scenario with the surface removed.
    pub fn without_irs(&self) -> Self {
        Self {
            elements: 0,
            ..self.clone()
        }
    }

    /// Transmit SNR scale `P / σ²`.
    pub fn snr_scale(&self) -> f64 {
        self.tx_power_w / self.noise_power_w
    }

    fn path_gain(&self, dist: f64, exponent: f64) -> f64 {
        self.pathloss_ref * dist.max(1.0).powf(-exponent)
    }
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Independent random streams carved out of one experiment seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Positions,
    Direct,
    /// IRS→user link of one user; separate per user so that growing the
    /// surface extends, rather than reshuffles, the element draws.
    Reflected(usize),
    Randomization,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Positions => 1,
            Stream::Direct => 2,
            Stream::Randomization => 3,
            Stream::Reflected(k) => 1 << 32 | k as u64,
        }
    }
}

/// Deterministic RNG for `(seed, trial, stream)`, independent of execution
/// order.
pub fn stream_rng(seed: u64, trial: u64, stream: Stream) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(b"urllc-stream");
    hasher.update(seed.to_le_bytes());
    hasher.update(trial.to_le_bytes());
    hasher.update(stream.tag().to_le_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Circularly-symmetric complex Gaussian sample with unit variance.
pub fn complex_normal<R: Rng + ?Sized>(rng: &mut R) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// One fading draw for all users.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRealization {
    pub user_positions: Vec<[f64; 2]>,
    /// BS→user direct channels.
    pub h: Vec<Complex64>,
    /// BS→IRS channel.
    pub g: Vec<Complex64>,
    /// IRS→user channels, one vector per user.
    pub f: Vec<Vec<Complex64>>,
    /// Cascaded channels `φ_k[n] = conj(f_k[n]) g[n]`.
    pub phi: Vec<Vec<Complex64>>,
    /// Lifted matrices from [`build_lifted_matrix`].
    pub lifted: Vec<DMatrix<Complex64>>,
}

pub fn generate_realization(scenario: &Scenario, trial: u64) -> Result<ChannelRealization, ChannelError> {
    scenario.validate()?;
    let k_users = scenario.users;
    let n = scenario.elements;
    let exps = scenario.pathloss_exponents;

    let mut pos_rng = stream_rng(scenario.seed, trial, Stream::Positions);
    let user_positions: Vec<[f64; 2]> = (0..k_users)
        .map(|_| {
            let r = scenario.user_area_radius * pos_rng.random::<f64>().sqrt();
            let theta = std::f64::consts::TAU * pos_rng.random::<f64>();
            [
                scenario.user_area_center[0] + r * theta.cos(),
                scenario.user_area_center[1] + r * theta.sin(),
            ]
        })
        .collect();

    let mut direct_rng = stream_rng(scenario.seed, trial, Stream::Direct);
    let h: Vec<Complex64> = user_positions
        .iter()
        .map(|&p| {
            let gain = scenario.path_gain(distance(scenario.bs_position, p), exps.bs_user);
            complex_normal(&mut direct_rng) * gain.sqrt()
        })
        .collect();

    let g = los_steering(scenario);

    let f: Vec<Vec<Complex64>> = user_positions
        .iter()
        .enumerate()
        .map(|(k, &p)| {
            let gain = scenario.path_gain(distance(scenario.irs_position, p), exps.irs_user);
            let mut rng = stream_rng(scenario.seed, trial, Stream::Reflected(k));
            (0..n).map(|_| complex_normal(&mut rng) * gain.sqrt()).collect()
        })
        .collect();

    Ok(ChannelRealization::from_links(user_positions, h, g, f))
}

/// Deterministic line-of-sight BS→IRS channel on a half-wavelength linear
/// array laid along the x axis.
fn los_steering(scenario: &Scenario) -> Vec<Complex64> {
    let d = distance(scenario.bs_position, scenario.irs_position);
    let amplitude = scenario
        .path_gain(d, scenario.pathloss_exponents.bs_irs)
        .sqrt();
    let sin_aoa = (scenario.bs_position[0] - scenario.irs_position[0]) / d;
    (0..scenario.elements)
        .map(|n| Complex64::from_polar(amplitude, std::f64::consts::PI * n as f64 * sin_aoa))
        .collect()
}

impl ChannelRealization {
    /// Assembles a realization from raw link coefficients, deriving the
    /// cascaded channels and lifted matrices.
    pub fn from_links(
        user_positions: Vec<[f64; 2]>,
        h: Vec<Complex64>,
        g: Vec<Complex64>,
        f: Vec<Vec<Complex64>>,
    ) -> Self {
        let phi: Vec<Vec<Complex64>> = f
            .iter()
            .map(|fk| fk.iter().zip(&g).map(|(a, b)| a.conj() * b).collect())
            .collect();
        let lifted = h
            .iter()
            .zip(&phi)
            .map(|(&hk, pk)| build_lifted_matrix(hk, pk))
            .collect();
        Self {
            user_positions,
            h,
            g,
            f,
            phi,
            lifted,
        }
    }

    pub fn num_users(&self) -> usize {
        self.h.len()
    }

    pub fn num_elements(&self) -> usize {
        self.g.len()
    }

    /// The same users with the surface switched off.
    pub fn without_irs(&self) -> Self {
        Self::from_links(
            self.user_positions.clone(),
            self.h.clone(),
            Vec::new(),
            vec![Vec::new(); self.num_users()],
        )
    }

    /// End-to-end coefficient `h_k + v^H φ_k`.
    pub fn end_to_end(&self, v: &[Complex64], k: usize) -> Complex64 {
        self.h[k]
            + v.iter()
                .zip(&self.phi[k])
                .map(|(vn, pn)| vn.conj() * pn)
                .sum::<Complex64>()
    }

    /// Hex SHA-256 of the link coefficients; equal across schemes that share
    /// a draw.
    pub fn fingerprint(&self) -> String {
        let mut hasher = Sha256::new();
        let mut feed = |c: &Complex64| {
            hasher.update(c.re.to_le_bytes());
            hasher.update(c.im.to_le_bytes());
        };
        self.h.iter().for_each(&mut feed);
        self.g.iter().for_each(&mut feed);
        self.f.iter().flatten().for_each(&mut feed);
        hex::encode(hasher.finalize())
    }
}

/// Checks `|v_n| = 1` within `1e-9` and that the length matches the surface.
pub fn check_unit_modulus(v: &[Complex64], elements: usize) -> Result<(), ChannelError> {
    if v.len() != elements {
        return Err(ChannelError::Dimension {
            got: v.len(),
            expected: elements,
        });
    }
    for (index, c) in v.iter().enumerate() {
        let modulus = c.norm();
        if (modulus - 1.0).abs() > 1e-9 {
            return Err(ChannelError::NotUnitModulus { index, modulus });
        }
    }
    Ok(())
}

/// Received SNR `P |h_k + v^H φ_k|² / σ²` of user `k`.
pub fn effective_snr(
    real: &ChannelRealization,
    v: &[Complex64],
    k: usize,
    tx_power_w: f64,
    noise_power_w: f64,
) -> Result<f64, ChannelError> {
    if k >= real.num_users() {
        return Err(ChannelError::User {
            user: k,
            users: real.num_users(),
        });
    }
    check_unit_modulus(v, real.num_elements())?;
    Ok(tx_power_w * real.end_to_end(v, k).norm_sqr() / noise_power_w)
}

/// SNRs of all users under `v`.
pub fn effective_snrs(
    real: &ChannelRealization,
    v: &[Complex64],
    tx_power_w: f64,
    noise_power_w: f64,
) -> Result<Vec<f64>, ChannelError> {
    check_unit_modulus(v, real.num_elements())?;
    Ok((0..real.num_users())
        .map(|k| tx_power_w * real.end_to_end(v, k).norm_sqr() / noise_power_w)
        .collect())
}

/// `R_k = [[φφ^H, φ h^*], [h φ^H, 0]]`, so that with `v̄ = [v; 1]`,
/// `|h + v^H φ|² = v̄^H R_k v̄ + |h|²`.
pub fn build_lifted_matrix(h: Complex64, phi: &[Complex64]) -> DMatrix<Complex64> {
    let n = phi.len();
    let mut r = DMatrix::<Complex64>::zeros(n + 1, n + 1);
    for i in 0..n {
        for j in 0..n {
            r[(i, j)] = phi[i] * phi[j].conj();
        }
        r[(i, n)] = phi[i] * h.conj();
        r[(n, i)] = h * phi[i].conj();
    }
    r
}

/// Phase-only beamformer that co-phases every cascaded path of user `k`
/// with its direct path: `v_n = exp(j(arg φ_n − arg h))`.
pub fn align_to_user(real: &ChannelRealization, k: usize) -> Vec<Complex64> {
    let h_phase = if real.h[k].norm() > 0.0 { real.h[k].arg() } else { 0.0 };
    real.phi[k]
        .iter()
        .map(|p| Complex64::from_polar(1.0, p.arg() - h_phase))
        .collect()
}

/// Largest SNR reachable by user `k` alone: `P (|h| + Σ|φ_n|)² / σ²`.
pub fn aligned_snr_bound(real: &ChannelRealization, k: usize, tx_power_w: f64, noise_power_w: f64) -> f64 {
    let amplitude = real.h[k].norm() + real.phi[k].iter().map(|p| p.norm()).sum::<f64>();
    tx_power_w * amplitude * amplitude / noise_power_w
}
