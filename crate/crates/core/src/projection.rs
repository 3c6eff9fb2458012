//! Round-specific random projection matrices and the sealed seed exchange
//! that lets clients share them without the server learning them.
//!
//! A matrix is never stored unless it is small: row `j` of the `m x n` matrix
//! for a given round seed is regenerated on demand from the counter-based
//! stream in [`crate::rng`], scaled so entries are `N(0, 1/n)`.

use std::collections::HashSet;

use sha2::{Digest, Sha256};

use crate::error::{ensure_len, Error, Result};
use crate::rng;
use crate::vector::{dot, ParamVector, ProjectedVector};

/// Below this many entries a projector caches the dense matrix.
pub const DEFAULT_MATERIALIZE_LIMIT: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ProjectionSpec {
    pub round_seed: u64,
    /// Projected dimension.
    pub m: usize,
    /// Parameter count.
    pub n: usize,
}

impl ProjectionSpec {
    pub fn new(round_seed: u64, m: usize, n: usize) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidArgument(format!(
                "projection needs m >= 1 and n >= 1, got m={m} n={n}"
            )));
        }
        Ok(Self { round_seed, m, n })
    }

    fn scale(&self) -> f64 {
        (1.0 / self.n as f64).sqrt()
    }
}

/// Writes row `row_index` of the matrix into `out` (length `n`).
pub fn fill_row(spec: &ProjectionSpec, row_index: usize, out: &mut [f64]) -> Result<()> {
    if row_index >= spec.m {
        return Err(Error::OutOfRange {
            index: row_index,
            len: spec.m,
        });
    }
    ensure_len("row buffer", spec.n, out.len())?;
    rng::fill_normal_row(spec.round_seed, row_index as u64, spec.scale(), out);
    Ok(())
}

pub fn matrix_row_stream(spec: &ProjectionSpec, row_index: usize) -> Result<Vec<f64>> {
    let mut row = vec![0.0; spec.n];
    fill_row(spec, row_index, &mut row)?;
    Ok(row)
}

/// `z = A w`, one regenerated row at a time.
pub fn project(spec: &ProjectionSpec, w: &[f64]) -> Result<ProjectedVector> {
    ensure_len("projected parameter vector", spec.n, w.len())?;
    let mut row = vec![0.0; spec.n];
    let z = (0..spec.m)
        .map(|j| {
            rng::fill_normal_row(spec.round_seed, j as u64, spec.scale(), &mut row);
            dot(&row, w)
        })
        .collect::<Vec<_>>();
    Ok(ProjectedVector::from(z))
}

/// `A^T v`, one regenerated row at a time.
pub fn project_transpose(spec: &ProjectionSpec, v: &[f64]) -> Result<ParamVector> {
    ensure_len("projected vector", spec.m, v.len())?;
    let mut row = vec![0.0; spec.n];
    let mut out = vec![0.0; spec.n];
    for (j, &vj) in v.iter().enumerate() {
        rng::fill_normal_row(spec.round_seed, j as u64, spec.scale(), &mut row);
        crate::vector::axpy(vj, &row, &mut out);
    }
    Ok(ParamVector::from(out))
}

/// A linear map from parameter space into the consensus space.
pub trait ConsensusMap: Send + Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn apply(&self, w: &[f64]) -> Vec<f64>;
    fn adjoint(&self, v: &[f64]) -> Vec<f64>;
}

/// `A` for one round. Caches the dense matrix when it is small enough.
#[derive(Debug, Clone)]
pub struct Projector {
    spec: ProjectionSpec,
    dense: Option<Vec<f64>>,
}

impl Projector {
    pub fn new(spec: ProjectionSpec) -> Self {
        Self::with_limit(spec, DEFAULT_MATERIALIZE_LIMIT)
    }

    pub fn with_limit(spec: ProjectionSpec, materialize_limit: usize) -> Self {
        let dense = spec.m.checked_mul(spec.n).filter(|&e| e <= materialize_limit).map(|entries| {
            let mut a = vec![0.0; entries];
            for (j, row) in a.chunks_exact_mut(spec.n).enumerate() {
                rng::fill_normal_row(spec.round_seed, j as u64, spec.scale(), row);
            }
            a
        });
        Self { spec, dense }
    }

    pub fn spec(&self) -> &ProjectionSpec {
        &self.spec
    }

    pub fn is_materialized(&self) -> bool {
        self.dense.is_some()
    }
}

impl ConsensusMap for Projector {
    fn input_dim(&self) -> usize {
        self.spec.n
    }

    fn output_dim(&self) -> usize {
        self.spec.m
    }

    fn apply(&self, w: &[f64]) -> Vec<f64> {
        match &self.dense {
            Some(a) => a.chunks_exact(self.spec.n).map(|row| dot(row, w)).collect(),
            None => project(&self.spec, w).expect("caller checked dimensions").into_inner(),
        }
    }

    fn adjoint(&self, v: &[f64]) -> Vec<f64> {
        match &self.dense {
            Some(a) => {
                let mut out = vec![0.0; self.spec.n];
                for (row, &vj) in a.chunks_exact(self.spec.n).zip(v) {
                    crate::vector::axpy(vj, row, &mut out);
                }
                out
            }
            None => project_transpose(&self.spec, v)
                .expect("caller checked dimensions")
                .into_inner(),
        }
    }
}

/// The identity on `R^n`; turns the projected protocol into classic ADMM.
#[derive(Debug, Clone, Copy)]
pub struct IdentityMap {
    pub n: usize,
}

impl ConsensusMap for IdentityMap {
    fn input_dim(&self) -> usize {
        self.n
    }

    fn output_dim(&self) -> usize {
        self.n
    }

    fn apply(&self, w: &[f64]) -> Vec<f64> {
        w.to_vec()
    }

    fn adjoint(&self, v: &[f64]) -> Vec<f64> {
        v.to_vec()
    }
}

// ---------------------------------------------------------------------------
// Seed exchange

/// Secret key held by one client. The server never sees these.
#[derive(Clone, PartialEq, Eq)]
pub struct ClientKey(pub [u8; 32]);

impl std::fmt::Debug for ClientKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("ClientKey(..)")
    }
}

impl ClientKey {
    /// Deterministic key for simulations.
    pub fn derive(master_seed: u64, client: u32) -> Self {
        let mut key = [0u8; 32];
        for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
            let word = rng::derive_seed(master_seed, rng::Purpose::KeyGen, &[client as u64, i as u64]);
            chunk.copy_from_slice(&word.to_le_bytes());
        }
        Self(key)
    }
}

/// A round seed sealed for one recipient, relayed by the server.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedEnvelope {
    pub round: u32,
    pub sender_client: u32,
    pub recipient_client: u32,
    pub sealed_payload: Vec<u8>,
}

impl SeedEnvelope {
    fn associated_data(&self) -> [u8; 12] {
        associated_data(self.round, self.sender_client, self.recipient_client)
    }
}

fn associated_data(round: u32, sender: u32, recipient: u32) -> [u8; 12] {
    let mut aad = [0u8; 12];
    aad[..4].copy_from_slice(&round.to_le_bytes());
    aad[4..8].copy_from_slice(&sender.to_le_bytes());
    aad[8..].copy_from_slice(&recipient.to_le_bytes());
    aad
}

/// Authenticated sealing of an 8-byte seed under a recipient key.
pub trait SealingScheme: Send + Sync {
    fn seal(&self, key: &ClientKey, nonce: [u8; 16], aad: &[u8], seed: u64) -> Vec<u8>;
    fn open(&self, key: &ClientKey, aad: &[u8], sealed: &[u8]) -> Result<u64>;
}

/// Keyed-hash construction over SHA-256, adequate for modelling the exchange
/// (not a vetted cipher):
///
/// ```text
/// payload = nonce[16] || ct[8] || tag[16]
/// ct  = seed_le XOR SHA256("fedrp/seal/stream" || key || nonce)[..8]
/// tag = SHA256("fedrp/seal/tag" || key || nonce || ct || aad)[..16]
/// aad = round_le32 || sender_le32 || recipient_le32
/// ```
#[derive(Debug, Clone, Copy, Default)]
pub struct KeyedHashSeal;

pub const SEALED_LEN: usize = 16 + 8 + 16;

impl KeyedHashSeal {
    fn keystream(key: &ClientKey, nonce: &[u8]) -> [u8; 8] {
        let mut h = Sha256::new();
        h.update(b"fedrp/seal/stream");
        h.update(key.0);
        h.update(nonce);
        let d = h.finalize();
        let mut ks = [0u8; 8];
        ks.copy_from_slice(&d[..8]);
        ks
    }

    fn tag(key: &ClientKey, nonce: &[u8], ct: &[u8], aad: &[u8]) -> [u8; 16] {
        let mut h = Sha256::new();
        h.update(b"fedrp/seal/tag");
        h.update(key.0);
        h.update(nonce);
        h.update(ct);
        h.update(aad);
        let d = h.finalize();
        let mut t = [0u8; 16];
        t.copy_from_slice(&d[..16]);
        t
    }
}

impl SealingScheme for KeyedHashSeal {
    fn seal(&self, key: &ClientKey, nonce: [u8; 16], aad: &[u8], seed: u64) -> Vec<u8> {
        let ks = Self::keystream(key, &nonce);
        let ct: Vec<u8> = seed.to_le_bytes().iter().zip(ks).map(|(p, k)| p ^ k).collect();
        let tag = Self::tag(key, &nonce, &ct, aad);
        let mut out = Vec::with_capacity(SEALED_LEN);
        out.extend_from_slice(&nonce);
        out.extend_from_slice(&ct);
        out.extend_from_slice(&tag);
        out
    }

    fn open(&self, key: &ClientKey, aad: &[u8], sealed: &[u8]) -> Result<u64> {
        if sealed.len() != SEALED_LEN {
            return Err(Error::Authentication);
        }
        let (nonce, rest) = sealed.split_at(16);
        let (ct, tag) = rest.split_at(8);
        let expected = Self::tag(key, nonce, ct, aad);
        // Constant-time compare.
        let diff = expected.iter().zip(tag).fold(0u8, |acc, (a, b)| acc | (a ^ b));
        if diff != 0 {
            return Err(Error::Authentication);
        }
        let ks = Self::keystream(key, nonce);
        let mut seed = [0u8; 8];
        for (i, (c, k)) in ct.iter().zip(ks).enumerate() {
            seed[i] = c ^ k;
        }
        Ok(u64::from_le_bytes(seed))
    }
}

/// Tracks sealed rounds so every round gets a fresh seed and rounds advance
/// strictly.
#[derive(Debug, Clone, Default)]
pub struct SeedSchedule {
    last_round: Option<u32>,
    used: HashSet<u64>,
    log: Vec<(u32, u64)>,
}

impl SeedSchedule {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, round: u32, seed: u64) -> Result<()> {
        if let Some(last) = self.last_round {
            if round <= last {
                return Err(Error::Protocol(format!(
                    "round {round} already sealed (last sealed round is {last})"
                )));
            }
        }
        if self.used.contains(&seed) {
            return Err(Error::Protocol(format!(
                "seed for round {round} repeats an earlier round's seed"
            )));
        }
        self.last_round = Some(round);
        self.used.insert(seed);
        self.log.push((round, seed));
        Ok(())
    }

    pub fn history(&self) -> &[(u32, u64)] {
        &self.log
    }
}

/// Seals `seed` for every recipient after checking the schedule.
pub fn seal_round_seed(
    scheme: &dyn SealingScheme,
    schedule: &mut SeedSchedule,
    round: u32,
    seed: u64,
    sender: u32,
    recipients: &[(u32, &ClientKey)],
    nonce_seed: u64,
) -> Result<Vec<SeedEnvelope>> {
    schedule.register(round, seed)?;
    Ok(recipients
        .iter()
        .map(|&(recipient, key)| {
            let mut nonce = [0u8; 16];
            let a = rng::derive_seed(nonce_seed, rng::Purpose::SealNonce, &[round as u64, recipient as u64, 0]);
            let b = rng::derive_seed(nonce_seed, rng::Purpose::SealNonce, &[round as u64, recipient as u64, 1]);
            nonce[..8].copy_from_slice(&a.to_le_bytes());
            nonce[8..].copy_from_slice(&b.to_le_bytes());
            let aad = associated_data(round, sender, recipient);
            SeedEnvelope {
                round,
                sender_client: sender,
                recipient_client: recipient,
                sealed_payload: scheme.seal(key, nonce, &aad, seed),
            }
        })
        .collect())
}

pub fn open_round_seed(scheme: &dyn SealingScheme, envelope: &SeedEnvelope, key: &ClientKey) -> Result<u64> {
    scheme.open(key, &envelope.associated_data(), &envelope.sealed_payload)
}

/// Client that generates the seed for `round`.
pub fn seed_generator(round: u32, num_clients: u32) -> u32 {
    round % num_clients
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_vec(len: usize, seed: u64) -> Vec<f64> {
        let mut r = rng::chacha(seed);
        (0..len).map(|_| r.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn rows_are_deterministic_and_seed_dependent() {
        let spec = ProjectionSpec::new(5, 3, 100).unwrap();
        let a = matrix_row_stream(&spec, 2).unwrap();
        assert_eq!(a, matrix_row_stream(&spec, 2).unwrap());
        let other = ProjectionSpec::new(6, 3, 100).unwrap();
        assert_ne!(a, matrix_row_stream(&other, 2).unwrap());
        assert!(matches!(
            matrix_row_stream(&spec, 3),
            Err(Error::OutOfRange { index: 3, len: 3 })
        ));
    }

    #[test]
    fn single_row_variance_within_band() {
        let n = 10_000;
        let spec = ProjectionSpec::new(99, 1, n).unwrap();
        let row = matrix_row_stream(&spec, 0).unwrap();
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let target = 1.0 / n as f64;
        assert!(var > 0.8 * target && var < 1.2 * target, "{var}");
    }

    #[test]
    fn pooled_entries_match_distribution() {
        let n = 10_000;
        let spec = ProjectionSpec::new(1234, 100, n).unwrap();
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for j in 0..100 {
            for v in matrix_row_stream(&spec, j).unwrap() {
                sum += v;
                sumsq += v * v;
            }
        }
        let count = (100 * n) as f64;
        let mean = sum / count;
        let var = sumsq / count - mean * mean;
        assert!(mean.abs() < 4.0 * (1.0 / (n as f64 * count)).sqrt());
        assert!((var * n as f64 - 1.0).abs() < 0.05);
    }

    #[test]
    fn linearity_and_zero() {
        let spec = ProjectionSpec::new(3, 7, 50).unwrap();
        assert!(project(&spec, &[0.0; 50]).unwrap().iter().all(|&v| v == 0.0));
        assert!(project_transpose(&spec, &[0.0; 7]).unwrap().iter().all(|&v| v == 0.0));
        let a = rand_vec(50, 1);
        let b = rand_vec(50, 2);
        let sum: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
        let (za, zb, zs) = (
            project(&spec, &a).unwrap(),
            project(&spec, &b).unwrap(),
            project(&spec, &sum).unwrap(),
        );
        for j in 0..7 {
            let expect = za[j] + zb[j];
            assert!((zs[j] - expect).abs() <= 1e-9 * expect.abs().max(1.0));
        }
        assert!(project(&spec, &[0.0; 49]).is_err());
        assert!(project_transpose(&spec, &[0.0; 8]).is_err());
    }

    #[test]
    fn adjoint_identity_holds() {
        for t in 0..100u64 {
            let spec = ProjectionSpec::new(t, 1 + (t as usize % 9), 30 + t as usize).unwrap();
            let w = rand_vec(spec.n, t + 10);
            let v = rand_vec(spec.m, t + 20);
            let lhs = dot(&project(&spec, &w).unwrap(), &v);
            let rhs = dot(&w, &project_transpose(&spec, &v).unwrap());
            assert!((lhs - rhs).abs() <= 1e-9 * lhs.abs().max(rhs.abs()).max(1e-12));
        }
    }

    #[test]
    fn transpose_of_unit_vector_is_row_zero() {
        let spec = ProjectionSpec::new(8, 1, 20).unwrap();
        assert_eq!(
            project_transpose(&spec, &[1.0]).unwrap().into_inner(),
            matrix_row_stream(&spec, 0).unwrap()
        );
    }

    #[test]
    fn dense_and_streaming_paths_agree() {
        let spec = ProjectionSpec::new(77, 6, 40).unwrap();
        let dense = Projector::new(spec);
        let streamed = Projector::with_limit(spec, 0);
        assert!(dense.is_materialized() && !streamed.is_materialized());
        let w = rand_vec(40, 3);
        let v = rand_vec(6, 4);
        assert_eq!(dense.apply(&w), streamed.apply(&w));
        assert_eq!(dense.adjoint(&v), streamed.adjoint(&v));
    }

    #[test]
    fn expected_squared_norm_over_seeds() {
        let (m, n) = (4, 64);
        let w = rand_vec(n, 5);
        let wn2 = dot(&w, &w);
        let mean: f64 = (0..1000u64)
            .map(|s| {
                let z = project(&ProjectionSpec::new(s, m, n).unwrap(), &w).unwrap();
                dot(&z, &z)
            })
            .sum::<f64>()
            / 1000.0;
        let expect = m as f64 * wn2 / n as f64;
        assert!((mean - expect).abs() < 0.1 * expect, "{mean} vs {expect}");
    }

    fn keys() -> Vec<ClientKey> {
        (0..3).map(|c| ClientKey::derive(1, c)).collect()
    }

    #[test]
    fn seal_open_round_trip_and_wrong_key() {
        let keys = keys();
        let mut sched = SeedSchedule::new();
        let recipients: Vec<(u32, &ClientKey)> = vec![(1, &keys[1]), (2, &keys[2])];
        let env = seal_round_seed(&KeyedHashSeal, &mut sched, 4, 0xDEAD_BEEF, 0, &recipients, 9).unwrap();
        assert_eq!(env.len(), 2);
        assert_eq!(open_round_seed(&KeyedHashSeal, &env[0], &keys[1]).unwrap(), 0xDEAD_BEEF);
        assert_eq!(open_round_seed(&KeyedHashSeal, &env[1], &keys[2]).unwrap(), 0xDEAD_BEEF);
        assert!(matches!(
            open_round_seed(&KeyedHashSeal, &env[0], &keys[2]),
            Err(Error::Authentication)
        ));
        // The server holds no key; neither the payload nor a zero key opens it.
        assert!(open_round_seed(&KeyedHashSeal, &env[0], &ClientKey([0; 32])).is_err());
    }

    #[test]
    fn tampering_is_detected() {
        let keys = keys();
        let mut sched = SeedSchedule::new();
        let env = seal_round_seed(&KeyedHashSeal, &mut sched, 0, 17, 0, &[(1, &keys[1])], 2).unwrap();
        for i in 0..SEALED_LEN {
            let mut bad = env[0].clone();
            bad.sealed_payload[i] ^= 0x01;
            assert!(matches!(
                open_round_seed(&KeyedHashSeal, &bad, &keys[1]),
                Err(Error::Authentication)
            ));
        }
        let mut rerouted = env[0].clone();
        rerouted.round = 1;
        assert!(open_round_seed(&KeyedHashSeal, &rerouted, &keys[1]).is_err());
        let mut short = env[0].clone();
        short.sealed_payload.pop();
        assert!(open_round_seed(&KeyedHashSeal, &short, &keys[1]).is_err());
    }

    #[test]
    fn schedule_rejects_repeats() {
        let keys = keys();
        let r = [(1u32, &keys[1])];
        let mut sched = SeedSchedule::new();
        seal_round_seed(&KeyedHashSeal, &mut sched, 1, 10, 0, &r, 0).unwrap();
        assert!(matches!(
            seal_round_seed(&KeyedHashSeal, &mut sched, 1, 11, 0, &r, 0),
            Err(Error::Protocol(_))
        ));
        assert!(matches!(
            seal_round_seed(&KeyedHashSeal, &mut sched, 2, 10, 0, &r, 0),
            Err(Error::Protocol(_))
        ));
        seal_round_seed(&KeyedHashSeal, &mut sched, 2, 12, 0, &r, 0).unwrap();
        assert_eq!(sched.history(), &[(1, 10), (2, 12)]);
    }

    #[test]
    fn generator_rotates() {
        assert_eq!((0..5).map(|r| seed_generator(r, 3)).collect::<Vec<_>>(), vec![0, 1, 2, 0, 1]);
    }
}
