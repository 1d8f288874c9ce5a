//! Log-linear softmax token policy with sparse hashed features.
//!
//! The policy is a single weight matrix Θ (vocab × feature dim). A context
//! and response prefix are encoded into a sparse binary feature vector φ;
//! token logits are Θ·φ scaled by temperature. Small enough that the exact
//! gradient ∇ log π(t) = (onehot(t) − π) ⊗ φ is cheap, which is what makes
//! finite-difference verification of every objective variant feasible.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::{StableHasher, HASH_VERSION};
use crate::types::{PromptContext, TokenId, TokenSequence};

/// Feature hashing keeps at most this many active indices per position.
pub const MAX_ACTIVE_FEATURES: usize = 64;

/// Response positions at or past this index share one position bucket.
const POSITION_BUCKETS: u32 = 8;

/// Synthetic observation feature that is active in every context, giving the
/// policy position/grammar features independent of the board.
const BIAS_FEATURE: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("logit overflow: non-finite logit at token {token}")]
    LogitOverflow { token: usize },
    #[error("token id {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { token: TokenId, vocab: usize },
    #[error("response is empty")]
    EmptyResponse,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a policy checkpoint (bad magic)")]
    BadMagic,
    #[error("checkpoint hash version {got} does not match build version {want}; feature layouts differ")]
    HashVersion { got: u32, want: u32 },
    #[error("checkpoint corrupt: {0}")]
    Corrupt(&'static str),
}

/// The policy weights. A frozen clone of this acts as the behavior or
/// reference snapshot; there is no separate snapshot type.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyParams {
    theta: Array2<f64>,
}

/// Alias used where a frozen copy is meant (behavior or reference policy).
pub type PolicySnapshot = PolicyParams;

impl PolicyParams {
    pub fn zeros(vocab: usize, dim: usize) -> Self {
        PolicyParams { theta: Array2::zeros((vocab, dim)) }
    }

    pub fn from_theta(theta: Array2<f64>) -> Self {
        PolicyParams { theta }
    }

    /// Gaussian-ish random weights for tests and benchmarks.
    pub fn random(vocab: usize, dim: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let mut theta = Array2::zeros((vocab, dim));
        for w in theta.iter_mut() {
            // Sum of three uniforms, mean-centered: cheap, bounded, smooth.
            let u: f64 = rng.gen::<f64>() + rng.gen::<f64>() + rng.gen::<f64>();
            *w = (u - 1.5) * scale;
        }
        PolicyParams { theta }
    }

    pub fn vocab(&self) -> usize {
        self.theta.nrows()
    }

    pub fn dim(&self) -> usize {
        self.theta.ncols()
    }

    pub fn theta(&self) -> &Array2<f64> {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut Array2<f64> {
        &mut self.theta
    }
}

/// Sparse binary feature vector: sorted, deduplicated active indices.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVec {
    pub indices: Vec<u32>,
}

impl FeatureVec {
    pub fn active(&self) -> usize {
        self.indices.len()
    }
}

/// Encodes (context, response prefix) into active feature indices.
///
/// Each active index is a hashed conjunction of one observation feature,
/// the last emitted token, and the bucketed position within the response.
/// History is folded in as derived observation features keyed by (age,
/// action), so the configured memory window actually conditions the policy.
/// Deterministic under the frozen hash version.
pub fn featurize(ctx: &PromptContext, prefix: &[TokenId], dim: usize) -> FeatureVec {
    let last = match prefix.last() {
        Some(&t) => u64::from(t) + 1,
        None => 0,
    };
    let bucket = (prefix.len() as u32).min(POSITION_BUCKETS - 1);
    let conj = |code: u64| -> u32 {
        let h = StableHasher::new()
            .u32(HASH_VERSION)
            .u64(code)
            .u64(last)
            .u32(bucket)
            .finish();
        (h % dim as u64) as u32
    };

    let mut indices = Vec::with_capacity(ctx.obs_features.len() + ctx.history.len() + 1);
    indices.push(conj(obs_code(BIAS_FEATURE)));
    for &f in &ctx.obs_features {
        indices.push(conj(obs_code(f)));
    }
    for (age, entry) in ctx.history.iter().rev().enumerate() {
        let action = entry.action.map_or(0u64, |a| u64::from(a) + 1);
        let code = StableHasher::new().str("hist").u64(age as u64).u64(action).finish();
        indices.push(conj(code));
    }
    indices.sort_unstable();
    indices.dedup();
    indices.truncate(MAX_ACTIVE_FEATURES);
    FeatureVec { indices }
}

fn obs_code(f: u32) -> u64 {
    StableHasher::new().str("obs").u32(f).finish()
}

/// Raw logits Θ·φ (before temperature).
fn logits(p: &PolicyParams, phi: &FeatureVec) -> Vec<f64> {
    let vocab = p.vocab();
    let dim = p.dim();
    let mut z = vec![0.0; vocab];
    for &d in &phi.indices {
        let d = d as usize;
        debug_assert!(d < dim);
        for (v, zv) in z.iter_mut().enumerate() {
            *zv += p.theta[[v, d]];
        }
    }
    z
}

/// Softmax of (Θ·φ)/temperature. Max-subtracted for stability; entries sum
/// to 1 up to rounding.
pub fn token_distribution(p: &PolicyParams, phi: &FeatureVec, temperature: f64) -> Result<Vec<f64>, PolicyError> {
    assert!(temperature > 0.0, "temperature must be positive");
    let mut z = logits(p, phi);
    let mut max = f64::NEG_INFINITY;
    for (v, zv) in z.iter_mut().enumerate() {
        *zv /= temperature;
        if !zv.is_finite() {
            return Err(PolicyError::LogitOverflow { token: v });
        }
        max = max.max(*zv);
    }
    let mut sum = 0.0;
    for zv in z.iter_mut() {
        *zv = (*zv - max).exp();
        sum += *zv;
    }
    for zv in z.iter_mut() {
        *zv /= sum;
    }
    Ok(z)
}

/// Distribution entropy in nats.
pub fn entropy(dist: &[f64]) -> f64 {
    let mut h = 0.0;
    for &p in dist {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    h
}

/// One sampled response with its sampling-time records.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledResponse {
    pub response: TokenSequence,
    pub logps: Vec<f64>,
    pub entropies: Vec<f64>,
}

/// Samples tokens autoregressively until the end marker or the length cap.
pub fn sample_response(
    p: &PolicyParams,
    ctx: &PromptContext,
    max_len: usize,
    temperature: f64,
    eos: TokenId,
    rng: &mut impl Rng,
) -> Result<SampledResponse, PolicyError> {
    assert!(max_len >= 1, "response cap must allow at least one token");
    let mut tokens: Vec<TokenId> = Vec::with_capacity(max_len);
    let mut logps = Vec::with_capacity(max_len);
    let mut entropies = Vec::with_capacity(max_len);
    for _ in 0..max_len {
        let phi = featurize(ctx, &tokens, p.dim());
        let dist = token_distribution(p, &phi, temperature)?;
        let u: f64 = rng.gen();
        let tok = sample_index(&dist, u);
        logps.push(dist[tok].ln());
        entropies.push(entropy(&dist));
        tokens.push(tok as TokenId);
        if tok == usize::from(eos) {
            break;
        }
    }
    Ok(SampledResponse { response: TokenSequence { tokens }, logps, entropies })
}

/// Inverse-CDF draw; rounding shortfalls fall through to the last token.
fn sample_index(dist: &[f64], u: f64) -> usize {
    let mut cum = 0.0;
    for (ix, &p) in dist.iter().enumerate() {
        cum += p;
        if u < cum {
            return ix;
        }
    }
    dist.len() - 1
}

/// Re-evaluates per-token log-probs of a fixed response under `p`. Matches
/// sampling-time records bit for bit when `p` is the sampling snapshot.
pub fn response_logps(
    p: &PolicyParams,
    ctx: &PromptContext,
    response: &TokenSequence,
    temperature: f64,
) -> Result<Vec<f64>, PolicyError> {
    if response.is_empty() {
        return Err(PolicyError::EmptyResponse);
    }
    let mut out = Vec::with_capacity(response.len());
    for (t, &tok) in response.tokens.iter().enumerate() {
        let phi = featurize(ctx, &response.tokens[..t], p.dim());
        let dist = token_distribution(p, &phi, temperature)?;
        let tok = usize::from(tok);
        if tok >= dist.len() {
            return Err(PolicyError::TokenOutOfRange { token: tok as TokenId, vocab: dist.len() });
        }
        out.push(dist[tok].ln());
    }
    Ok(out)
}

/// Exact gradient of log π(token | φ) over Θ at temperature 1:
/// (onehot(token) − π) ⊗ φ, dense in Θ's shape.
pub fn grad_log_prob(p: &PolicyParams, phi: &FeatureVec, token: TokenId) -> Result<Array2<f64>, PolicyError> {
    let dist = token_distribution(p, phi, 1.0)?;
    let tok = usize::from(token);
    if tok >= dist.len() {
        return Err(PolicyError::TokenOutOfRange { token, vocab: dist.len() });
    }
    let mut grad = Array2::zeros((p.vocab(), p.dim()));
    accumulate_grad_log_prob(&mut grad, 1.0, &dist, tok, phi, 1.0);
    Ok(grad)
}

/// Hot-path accumulation: `acc += coeff * ∇ log π(token | φ)` at the given
/// temperature, where ∇ log π = (onehot − π) ⊗ φ / temperature.
pub fn accumulate_grad_log_prob(
    acc: &mut Array2<f64>,
    coeff: f64,
    dist: &[f64],
    token: usize,
    phi: &FeatureVec,
    temperature: f64,
) {
    let c = coeff / temperature;
    for &d in &phi.indices {
        let d = d as usize;
        for (v, &pv) in dist.iter().enumerate() {
            let onehot = if v == token { 1.0 } else { 0.0 };
            acc[[v, d]] += c * (onehot - pv);
        }
    }
}

const CKPT_MAGIC: &[u8; 8] = b"ARLPOL1\0";

/// Writes the policy weights with a header (vocab, dim, hash version) and a
/// trailing content hash.
pub fn save_checkpoint(p: &PolicyParams, path: &Path) -> Result<(), PolicyError> {
    let mut buf = Vec::with_capacity(32 + p.vocab() * p.dim() * 8);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&(p.vocab() as u32).to_le_bytes());
    buf.extend_from_slice(&(p.dim() as u32).to_le_bytes());
    buf.extend_from_slice(&HASH_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    write_matrix(&mut buf, &p.theta)?;
    let digest = StableHasher::new().bytes(&buf).finish();
    buf.extend_from_slice(&digest.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams, PolicyError> {
    let data = fs::read(path)?;
    if data.len() < 32 + 8 {
        return Err(PolicyError::Corrupt("truncated header"));
    }
    let (body, tail) = data.split_at(data.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
    if StableHasher::new().bytes(body).finish() != stored {
        return Err(PolicyError::Corrupt("content hash mismatch"));
    }
    let mut r = body;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(PolicyError::BadMagic);
    }
    let vocab = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let hash_version = read_u32(&mut r)?;
    let _reserved = read_u32(&mut r)?;
    if hash_version != HASH_VERSION {
        return Err(PolicyError::HashVersion { got: hash_version, want: HASH_VERSION });
    }
    let theta = read_matrix(&mut r, vocab, dim)?;
    if !r.is_empty() {
        return Err(PolicyError::Corrupt("trailing bytes"));
    }
    Ok(PolicyParams { theta })
}

pub(crate) fn write_matrix(w: &mut impl Write, arr: &Array2<f64>) -> std::io::Result<()> {
    for &x in arr.iter() {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

pub(crate) fn read_matrix(r: &mut &[u8], rows: usize, cols: usize) -> Result<Array2<f64>, PolicyError> {
    let n = rows * cols;
    if r.len() < n * 8 {
        return Err(PolicyError::Corrupt("truncated weights"));
    }
    let mut flat = Vec::with_capacity(n);
    for _ in 0..n {
        let mut b = [0u8; 8];
        r.read_exact(&mut b)?;
        flat.push(f64::from_le_bytes(b));
    }
    Ok(Array2::from_shape_vec((rows, cols), flat).expect("shape matches length"))
}

pub(crate) fn read_u32(r: &mut &[u8]) -> Result<u32, PolicyError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut &[u8]) -> Result<u64, PolicyError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::HistoryEntry;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn ctx(features: &[u32]) -> PromptContext {
        PromptContext { obs_features: features.to_vec(), turn_index: 1, history: vec![] }
    }

    /// Independent softmax route for the oracle: p_v = 1/Σ_u exp(z_u − z_v)
    /// with Neumaier-compensated summation. No shared max-trick or shared
    /// normalizer with the implementation.
    fn softmax_oracle(p: &PolicyParams, phi: &FeatureVec, temperature: f64) -> Vec<f64> {
        let z: Vec<f64> = super::logits(p, phi).iter().map(|x| x / temperature).collect();
        z.iter()
            .map(|&zv| {
                let mut sum = 0.0;
                let mut comp = 0.0;
                for &zu in &z {
                    let term = (zu - zv).exp();
                    let t = sum + term;
                    comp += if sum.abs() >= term.abs() { (sum - t) + term } else { (term - t) + sum };
                    sum = t;
                }
                1.0 / (sum + comp)
            })
            .collect()
    }

    #[test]
    fn distribution_matches_independent_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for case in 0..200 {
            let vocab = 2 + (case % 14);
            let dim = 16;
            let p = PolicyParams::random(vocab, dim, 2.0, &mut rng);
            let phi = featurize(&ctx(&[case as u32, 7, 19]), &[1, 2], dim);
            let temp = [0.5, 1.0, 1.7][case % 3];
            let dist = token_distribution(&p, &phi, temp).unwrap();
            let oracle = softmax_oracle(&p, &phi, temp);
            let sum: f64 = dist.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum {sum}");
            for (a, b) in dist.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn uniform_limit_at_huge_temperature() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let p = PolicyParams::random(8, 16, 1.0, &mut rng);
        let phi = featurize(&ctx(&[1, 2, 3]), &[], 16);
        let dist = token_distribution(&p, &phi, 1e6).unwrap();
        let max = dist.iter().cloned().fold(f64::MIN, f64::max);
        let min = dist.iter().cloned().fold(f64::MAX, f64::min);
        assert!(max - min < 1e-6, "spread {}", max - min);
    }

    #[test]
    fn grad_log_prob_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let vocab = 5;
        let dim = 12;
        let p = PolicyParams::random(vocab, dim, 1.0, &mut rng);
        let phi = featurize(&ctx(&[4, 9]), &[3], dim);
        let token: TokenId = 2;
        let grad = grad_log_prob(&p, &phi, token).unwrap();
        let h = 1e-5;
        for v in 0..vocab {
            for d in 0..dim {
                let mut plus = p.clone();
                plus.theta_mut()[[v, d]] += h;
                let mut minus = p.clone();
                minus.theta_mut()[[v, d]] -= h;
                let lp = |q: &PolicyParams| {
                    token_distribution(q, &phi, 1.0).unwrap()[usize::from(token)].ln()
                };
                let fd = (lp(&plus) - lp(&minus)) / (2.0 * h);
                let an = grad[[v, d]];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-3);
                assert!(err < 1e-6, "theta[{v},{d}]: fd {fd} analytic {an}");
            }
        }
    }

    #[test]
    fn score_function_identity() {
        // Σ_t π(t) ∇log π(t) = 0: expectation of the score is zero.
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let p = PolicyParams::random(6, 10, 1.5, &mut rng);
        let phi = featurize(&ctx(&[2, 5, 8]), &[1], 10);
        let dist = token_distribution(&p, &phi, 1.0).unwrap();
        let mut acc = Array2::<f64>::zeros((6, 10));
        for (t, &pt) in dist.iter().enumerate() {
            accumulate_grad_log_prob(&mut acc, pt, &dist, t, &phi, 1.0);
        }
        for &x in acc.iter() {
            assert!(x.abs() < 1e-12, "score expectation entry {x}");
        }
    }

    #[test]
    fn sampling_frequencies_track_probabilities() {
        let mut rng = ChaCha12Rng::seed_from_u64(13);
        let p = PolicyParams::random(4, 8, 1.0, &mut rng);
        let phi = featurize(&ctx(&[3]), &[], 8);
        let dist = token_distribution(&p, &phi, 1.0).unwrap();
        let n = 200_000;
        let mut counts = [0u32; 4];
        for _ in 0..n {
            let u: f64 = rng.gen();
            counts[sample_index(&dist, u)] += 1;
        }
        for (c, &pt) in counts.iter().zip(&dist) {
            let freq = f64::from(*c) / f64::from(n);
            // Three-ish sigma of a binomial proportion at this sample size.
            assert!((freq - pt).abs() < 4e-3, "freq {freq} vs p {pt}");
        }
    }

    #[test]
    fn near_deterministic_policy_repeats_itself() {
        let dim = 8;
        let mut p = PolicyParams::zeros(4, dim);
        let c = ctx(&[1]);
        // Drive every position's logit mass onto token 0 (the end marker).
        for d in 0..dim {
            p.theta_mut()[[0, d]] = 500.0;
        }
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let first = sample_response(&p, &c, 6, 1.0, 0, &mut rng).unwrap();
        for _ in 0..20 {
            let again = sample_response(&p, &c, 6, 1.0, 0, &mut rng).unwrap();
            assert_eq!(first.response, again.response);
        }
        assert_eq!(first.response.tokens, vec![0]);
    }

    #[test]
    fn sampled_logps_match_reevaluation_bitwise() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let p = PolicyParams::random(6, 24, 0.8, &mut rng);
        let c = PromptContext {
            obs_features: vec![1, 4],
            turn_index: 2,
            history: vec![HistoryEntry { observation: vec![1], action: Some(3) }],
        };
        for _ in 0..20 {
            let s = sample_response(&p, &c, 8, 1.0, 0, &mut rng).unwrap();
            let re = response_logps(&p, &c, &s.response, 1.0).unwrap();
            assert_eq!(s.logps, re);
        }
    }

    #[test]
    fn featurize_is_sensitive_to_each_input() {
        let dim = 4096;
        let base = featurize(&ctx(&[10, 20]), &[1, 2], dim);
        // Fixed corpus of single-field perturbations; every one must move
        // the feature set.
        let changed_obs = featurize(&ctx(&[10, 21]), &[1, 2], dim);
        let changed_last = featurize(&ctx(&[10, 20]), &[1, 3], dim);
        let changed_pos = featurize(&ctx(&[10, 20]), &[1, 2, 2], dim);
        assert_ne!(base, changed_obs);
        assert_ne!(base, changed_last);
        assert_ne!(base, changed_pos);
        let with_history = PromptContext {
            obs_features: vec![10, 20],
            turn_index: 1,
            history: vec![HistoryEntry { observation: vec![], action: Some(5) }],
        };
        assert_ne!(base, featurize(&with_history, &[1, 2], dim));
        let mut sorted = base.indices.clone();
        sorted.sort_unstable();
        sorted.dedup();
        assert_eq!(base.indices, sorted, "indices sorted and unique");
        assert!(base.active() <= MAX_ACTIVE_FEATURES);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let p = PolicyParams::random(8, 32, 1.0, &mut rng);
        save_checkpoint(&p, &path).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(p, q);
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.ckpt");
        let p = PolicyParams::zeros(4, 4);
        save_checkpoint(&p, &path).unwrap();
        let mut data = fs::read(&path).unwrap();
        let mid = data.len() / 2;
        data[mid] ^= 0xff;
        fs::write(&path, data).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(PolicyError::Corrupt(_))));
    }
}
