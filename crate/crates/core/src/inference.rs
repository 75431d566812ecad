//! Response generation by perturbing `z_s2s(x)` with a random vector on a
//! sphere of fixed radius, greedy decoding, and length-aware ranking of the
//! resulting hypothesis pool.

use std::cmp::Ordering;
use std::collections::HashSet;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::corpus::{content_len, MultiRefSample, EOS, MAX_SEQ_LEN};
use crate::error::{Error, Result};
use crate::model::{LatentVector, SpaceFusionModel};

pub const DEFAULT_POOL_SIZE: usize = 100;
pub const DEFAULT_MAX_DECODE_LEN: usize = MAX_SEQ_LEN - 1;
pub const LAMBDA_RANGE: (f64, f64) = (-2.0, 2.0);
pub const LAMBDA_BISECTION_STEPS: usize = 40;

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Decoded tokens, always terminated by EOS.
    pub tokens: Vec<usize>,
    /// Per-token mean log-likelihood under the noise-free `z_s2s(x)`.
    pub mean_log_prob: f64,
    /// Summed log-likelihood, `mean_log_prob · tokens.len()`.
    pub log_prob: f64,
    /// Tokens before EOS.
    pub len: usize,
    /// Perturbation that produced this hypothesis (first one, when merged).
    pub offset: LatentVector,
}

impl Hypothesis {
    pub fn score(&self, lambda: f64) -> f64 {
        self.log_prob + lambda * self.len as f64
    }

    pub fn content(&self) -> &[usize] {
        &self.tokens[..self.len]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankerConfig {
    /// Length bonus weight.
    pub lambda: f64,
    pub pool_size: usize,
    pub radius: f64,
    /// Mean hypothesis length that λ tuning aims for.
    pub target_mean_length: Option<f64>,
    pub dedup: bool,
    /// Decoding budget in tokens; EOS is appended to rows that run out.
    pub max_len: usize,
}

impl RankerConfig {
    pub fn new(radius: f64) -> Self {
        RankerConfig {
            lambda: 0.0,
            pool_size: DEFAULT_POOL_SIZE,
            radius,
            target_mean_length: None,
            dedup: true,
            max_len: DEFAULT_MAX_DECODE_LEN,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_size == 0 {
            return Err(Error::Config("pool size must be at least 1".into()));
        }
        if !(self.radius >= 0.0 && self.radius.is_finite()) {
            return Err(Error::Config(format!("radius must be non-negative, got {}", self.radius)));
        }
        if self.max_len == 0 {
            return Err(Error::Config("maximum decode length must be at least 1".into()));
        }
        Ok(())
    }
}

/// Uniform draw from the sphere of radius `radius` in `dim` dimensions.
pub fn sample_hypersphere<R: Rng + ?Sized>(dim: usize, radius: f64, rng: &mut R) -> Result<LatentVector> {
    if !(radius >= 0.0) {
        return Err(Error::Domain(format!("radius must be non-negative, got {radius}")));
    }
    if dim == 0 {
        return Err(Error::Domain("sphere dimension must be positive".into()));
    }
    loop {
        let g: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            return Ok(LatentVector(g.into_iter().map(|x| radius * x / norm).collect()));
        }
    }
}

/// Cuts a decoded sequence after its first EOS, appending one if it never appeared.
fn terminate(mut tokens: Vec<usize>) -> Vec<usize> {
    match tokens.iter().position(|&t| t == EOS) {
        Some(p) => tokens.truncate(p + 1),
        None => tokens.push(EOS),
    }
    tokens
}

/// Decodes `pool_size` perturbations `z_s2s(x) + r` and scores each hypothesis
/// by its log-likelihood under the unperturbed `z_s2s(x)`.
pub fn generate_pool<R: Rng + ?Sized>(
    model: &SpaceFusionModel,
    context: &[usize],
    config: &RankerConfig,
    rng: &mut R,
) -> Result<Vec<Hypothesis>> {
    config.validate()?;
    let z = model.encode_contexts(&[context])?.remove(0);
    let offsets = (0..config.pool_size)
        .map(|_| sample_hypersphere(z.dim(), config.radius, rng))
        .collect::<Result<Vec<_>>>()?;
    let perturbed: Vec<LatentVector> = offsets.iter().map(|r| z.add(r)).collect();
    let decoded = model.greedy_decode_batch(&perturbed, config.max_len)?;

    let mut seen = HashSet::new();
    let mut kept: Vec<(Vec<usize>, LatentVector)> = Vec::new();
    for (tokens, offset) in decoded.into_iter().zip(offsets) {
        let tokens = terminate(tokens);
        if config.dedup && !seen.insert(tokens.clone()) {
            continue;
        }
        kept.push((tokens, offset));
    }

    let zs = vec![z; kept.len()];
    let targets: Vec<&[usize]> = kept.iter().map(|(t, _)| t.as_slice()).collect();
    let means = model.decode_mean_log_probs(&zs, &targets)?;
    Ok(kept
        .into_iter()
        .zip(means)
        .map(|((tokens, offset), mean)| Hypothesis {
            log_prob: mean * tokens.len() as f64,
            mean_log_prob: mean,
            len: content_len(&tokens),
            tokens,
            offset,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub hypotheses: Vec<Hypothesis>,
    /// How many of the requested hypotheses could not be filled with distinct ones.
    pub shortfall: usize,
}

fn rank_order(a: &Hypothesis, b: &Hypothesis, lambda: f64) -> Ordering {
    b.score(lambda)
        .partial_cmp(&a.score(lambda))
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.len.cmp(&b.len))
        .then_with(|| a.tokens.cmp(&b.tokens))
}

/// Top `n` distinct hypotheses by `log p(h|x) + λ·|h|`, ties going to the shorter
/// and then the lexicographically smaller sequence.
pub fn select_top(pool: &[Hypothesis], n: usize, lambda: f64) -> Result<Selection> {
    if pool.is_empty() {
        return Err(Error::Data("cannot select from an empty hypothesis pool".into()));
    }
    let mut ranked: Vec<&Hypothesis> = pool.iter().collect();
    ranked.sort_by(|a, b| rank_order(a, b, lambda));
    let mut seen = HashSet::new();
    let hypotheses: Vec<Hypothesis> = ranked
        .into_iter()
        .filter(|h| seen.insert(h.tokens.clone()))
        .take(n)
        .cloned()
        .collect();
    Ok(Selection {
        shortfall: n - hypotheses.len(),
        hypotheses,
    })
}

/// Mean length of the hypotheses selected from each pool.
pub fn mean_selected_length(pools: &[Vec<Hypothesis>], counts: &[usize], lambda: f64) -> Result<f64> {
    let mut total = 0usize;
    let mut num = 0usize;
    for (pool, &n) in pools.iter().zip(counts) {
        for h in select_top(pool, n, lambda)?.hypotheses {
            total += h.len;
            num += 1;
        }
    }
    if num == 0 {
        return Err(Error::Data("no hypotheses selected".into()));
    }
    Ok(total as f64 / num as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LambdaTuning {
    pub lambda: f64,
    pub mean_length: f64,
    /// False when the target lies outside what the search range can reach.
    pub attained: bool,
}

/// Bisection over λ in [-2, 2] for a mean selected length within `tolerance` of `target`.
pub fn tune_lambda_on_pools(pools: &[Vec<Hypothesis>], counts: &[usize], target: f64, tolerance: f64) -> Result<LambdaTuning> {
    if !(target > 0.0) {
        return Err(Error::Domain(format!("target length must be positive, got {target}")));
    }
    let (mut lo, mut hi) = LAMBDA_RANGE;
    let at = |l: f64| mean_selected_length(pools, counts, l);
    let low_len = at(lo)?;
    if low_len > target + tolerance {
        return Ok(LambdaTuning {
            lambda: lo,
            mean_length: low_len,
            attained: false,
        });
    }
    let high_len = at(hi)?;
    if high_len < target - tolerance {
        return Ok(LambdaTuning {
            lambda: hi,
            mean_length: high_len,
            attained: false,
        });
    }
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for _ in 0..LAMBDA_BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let len = at(mid)?;
        let gap = (len - target).abs();
        if gap < best.0 {
            best = (gap, mid, len);
        }
        if gap <= tolerance {
            return Ok(LambdaTuning {
                lambda: mid,
                mean_length: len,
                attained: true,
            });
        }
        if len < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(LambdaTuning {
        lambda: best.1,
        mean_length: best.2,
        attained: false,
    })
}

/// Generates one pool per validation context (each with its own seeded stream)
/// and tunes λ so that `N_r` selections per context average `target` tokens.
pub fn tune_lambda(
    model: &SpaceFusionModel,
    samples: &[MultiRefSample],
    config: &RankerConfig,
    target: f64,
    tolerance: f64,
    seed: u64,
) -> Result<LambdaTuning> {
    let (pools, counts) = pools_for(model, samples, config, seed)?;
    tune_lambda_on_pools(&pools, &counts, target, tolerance)
}

/// Per-context rng stream split from a master seed.
pub fn context_rng(seed: u64, index: usize) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Hypothesis pools for every sample with at least one reference, plus the
/// number of references of each.
pub fn pools_for(
    model: &SpaceFusionModel,
    samples: &[MultiRefSample],
    config: &RankerConfig,
    seed: u64,
) -> Result<(Vec<Vec<Hypothesis>>, Vec<usize>)> {
    let mut pools = Vec::new();
    let mut counts = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        if s.responses.is_empty() {
            continue;
        }
        let mut rng = context_rng(seed, i);
        pools.push(generate_pool(model, &s.context, config, &mut rng)?);
        counts.push(s.responses.len());
    }
    if pools.is_empty() {
        return Err(Error::Data("no samples with references".into()));
    }
    Ok((pools, counts))
}
