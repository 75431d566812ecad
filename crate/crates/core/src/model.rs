//! The fused-latent response model: a context encoder producing `z_s2s`, a
//! response encoder producing `z_ae`, one decoder shared by both, an additive
//! Gaussian noise layer, and the training objective
//!
//! ```text
//! L = -(1/|y|) log p(y|z_s2s) - (1/|y|) log p(y|z_ae) + α·L_interp + β·L_fuse
//! ```
//!
//! Interpolation convention: `u = 0` is `z_s2s` and `u = 1` is `z_ae`.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{validate_sequence, Batch, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::kv::{fmt_f64, KvBlock};
use crate::neural::{rms, Array, GruStack, ParamId, ParameterSet, Tape, Var, INIT_BOUND};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub hidden_size: usize,
    pub embedding_dim: usize,
    pub num_layers: usize,
    pub latent_dim: usize,
    pub noise_sigma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub clip_distance: f64,
    pub radius: f64,
    pub vocab_size: usize,
    /// `false` trains the plain multi-task ablation (reconstruction terms only).
    pub regularization_enabled: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-size settings: two GRU layers of 128 units, 128-d embeddings,
    /// σ = 0.1, α = 1, β = 30, clip 0.3, inference radius 1.5.
    pub fn full(vocab_size: usize) -> Self {
        ModelConfig {
            hidden_size: 128,
            embedding_dim: 128,
            num_layers: 2,
            latent_dim: 128,
            noise_sigma: 0.1,
            alpha: 1.0,
            beta: 30.0,
            clip_distance: 0.3,
            radius: 1.5,
            vocab_size,
            regularization_enabled: true,
            seed: 0,
        }
    }

    /// Same objective at a width that trains on one core in minutes.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            hidden_size: 32,
            embedding_dim: 32,
            latent_dim: 32,
            ..Self::full(vocab_size)
        }
    }

    pub fn with_hidden(mut self, hidden: usize) -> Self {
        self.hidden_size = hidden;
        self.latent_dim = hidden;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("noise_sigma", self.noise_sigma),
            ("clip_distance", self.clip_distance),
            ("radius", self.radius),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.latent_dim != self.hidden_size {
            return Err(Error::Config(format!(
                "latent_dim {} must equal hidden_size {}",
                self.latent_dim, self.hidden_size
            )));
        }
        if self.hidden_size == 0 || self.embedding_dim == 0 || self.num_layers == 0 {
            return Err(Error::Config("dimensions and layer count must be positive".into()));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config("vocab_size must be at least 4".into()));
        }
        Ok(())
    }

    pub fn write_kv(&self, kv: &mut KvBlock) {
        kv.set("hidden_size", self.hidden_size);
        kv.set("embedding_dim", self.embedding_dim);
        kv.set("num_layers", self.num_layers);
        kv.set("latent_dim", self.latent_dim);
        kv.set("noise_sigma", fmt_f64(self.noise_sigma));
        kv.set("alpha", fmt_f64(self.alpha));
        kv.set("beta", fmt_f64(self.beta));
        kv.set("clip_distance", fmt_f64(self.clip_distance));
        kv.set("radius", fmt_f64(self.radius));
        kv.set("vocab_size", self.vocab_size);
        kv.set("regularization_enabled", self.regularization_enabled);
        kv.set("model_seed", self.seed);
    }

    /// Reads every field present in `kv`, keeping `base` for the rest.
    pub fn read_kv(kv: &KvBlock, base: &ModelConfig) -> Result<Self> {
        let hidden_size = kv.parse_or("hidden_size", base.hidden_size)?;
        let config = ModelConfig {
            hidden_size,
            embedding_dim: kv.parse_or("embedding_dim", base.embedding_dim)?,
            num_layers: kv.parse_or("num_layers", base.num_layers)?,
            latent_dim: kv.parse_or(
                "latent_dim",
                if kv.contains("hidden_size") { hidden_size } else { base.latent_dim },
            )?,
            noise_sigma: kv.parse_or("noise_sigma", base.noise_sigma)?,
            alpha: kv.parse_or("alpha", base.alpha)?,
            beta: kv.parse_or("beta", base.beta)?,
            clip_distance: kv.parse_or("clip_distance", base.clip_distance)?,
            radius: kv.parse_or("radius", base.radius)?,
            vocab_size: kv.parse_or("vocab_size", base.vocab_size)?,
            regularization_enabled: kv.parse_or("regularization_enabled", base.regularization_enabled)?,
            seed: kv.parse_or("model_seed", base.seed)?,
        };
        Ok(config)
    }
}

/// A point in the shared latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVector(pub Vec<f64>);

impl LatentVector {
    pub fn zeros(dim: usize) -> Self {
        LatentVector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn add(&self, other: &LatentVector) -> LatentVector {
        LatentVector(self.0.iter().zip(&other.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &LatentVector) -> LatentVector {
        LatentVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// `(1 - u)·z_from + u·z_to`, exact at both endpoints.
pub fn interpolate(z_from: &LatentVector, z_to: &LatentVector, u: f64) -> Result<LatentVector> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Domain(format!("interpolation weight {u} outside [0, 1]")));
    }
    if z_from.dim() != z_to.dim() {
        return Err(Error::Dimension(format!("{} vs {}", z_from.dim(), z_to.dim())));
    }
    if u == 0.0 {
        return Ok(z_from.clone());
    }
    if u == 1.0 {
        return Ok(z_to.clone());
    }
    Ok(LatentVector(
        z_from
            .0
            .iter()
            .zip(&z_to.0)
            .map(|(a, b)| (1.0 - u) * a + u * b)
            .collect(),
    ))
}

/// Root mean square of the coordinate differences.
pub fn rms_distance(a: &LatentVector, b: &LatentVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Dimension(format!("{} vs {}", a.dim(), b.dim())));
    }
    Ok(rms(&a.0, &b.0))
}

/// Batch-level fusion regularizer with every distance clipped at `clip`:
/// mean matched distance minus mean within-S2S and within-AE pairwise distances.
pub fn loss_fuse(z_s2s: &[LatentVector], z_ae: &[LatentVector], clip: f64) -> Result<f64> {
    let n = z_s2s.len();
    if n < 2 {
        return Err(Error::Domain(format!("fusion loss needs a batch of at least 2, got {n}")));
    }
    if z_ae.len() != n {
        return Err(Error::Dimension(format!("{n} context vectors vs {} response vectors", z_ae.len())));
    }
    let d = |a: &LatentVector, b: &LatentVector| rms_distance(a, b).map(|v| v.min(clip));
    let mut matched = 0.0;
    for i in 0..n {
        matched += d(&z_s2s[i], &z_ae[i])?;
    }
    let mut spread_s2s = 0.0;
    let mut spread_ae = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                spread_s2s += d(&z_s2s[i], &z_s2s[j])?;
                spread_ae += d(&z_ae[i], &z_ae[j])?;
            }
        }
    }
    let pairs = (n * n - n) as f64;
    Ok(matched / n as f64 - spread_s2s / pairs - spread_ae / pairs)
}

/// Source of the stochastic parts of the training loss: encoder noise and
/// per-row interpolation weights.
pub struct LossSampler {
    rng: ChaCha8Rng,
    pub noise: bool,
    pub fixed_u: Option<f64>,
}

impl LossSampler {
    pub fn new(seed: u64) -> Self {
        LossSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            noise: true,
            fixed_u: None,
        }
    }

    pub fn without_noise(mut self) -> Self {
        self.noise = false;
        self
    }

    pub fn with_fixed_u(mut self, u: f64) -> Self {
        self.fixed_u = Some(u);
        self
    }

    fn draw_u(&mut self, n: usize) -> Vec<f64> {
        match self.fixed_u {
            Some(u) => vec![u; n],
            None => (0..n).map(|_| self.rng.gen::<f64>()).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    /// Batch mean of `-(1/|y|) log p(y|z_s2s)`.
    pub recon_s2s: f64,
    /// Batch mean of `-(1/|y|) log p(y|z_ae)`.
    pub recon_ae: f64,
    /// Batch mean of the interpolation loss; zero when regularization is off.
    pub interp: f64,
    /// Fusion regularizer; zero when regularization is off.
    pub fuse: f64,
    /// Interpolation weights drawn for each row.
    pub us: Vec<f64>,
}

impl LossBreakdown {
    /// Recombines the components with the weights of `config`.
    pub fn weighted_sum(&self, config: &ModelConfig) -> f64 {
        if config.regularization_enabled {
            self.recon_s2s + self.recon_ae + config.alpha * self.interp + config.beta * self.fuse
        } else {
            self.recon_s2s + self.recon_ae
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Side {
    Context,
    Response,
}

#[derive(Clone, Debug)]
pub struct SpaceFusionModel {
    config: ModelConfig,
    params: ParameterSet,
    ctx_embedding: ParamId,
    resp_embedding: ParamId,
    dec_embedding: ParamId,
    ctx_encoder: GruStack,
    resp_encoder: GruStack,
    decoder: GruStack,
    out_w: ParamId,
    out_b: ParamId,
}

impl SpaceFusionModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParameterSet::new();
        let (v, e, h, l) = (
            config.vocab_size,
            config.embedding_dim,
            config.hidden_size,
            config.num_layers,
        );
        let ctx_embedding = params.insert_uniform("context.embedding", v, e, INIT_BOUND, &mut rng)?;
        let ctx_encoder = GruStack::new(&mut params, "context.gru", l, e, h, &mut rng)?;
        let resp_embedding = params.insert_uniform("response.embedding", v, e, INIT_BOUND, &mut rng)?;
        let resp_encoder = GruStack::new(&mut params, "response.gru", l, e, h, &mut rng)?;
        let dec_embedding = params.insert_uniform("decoder.embedding", v, e, INIT_BOUND, &mut rng)?;
        let decoder = GruStack::new(&mut params, "decoder.gru", l, e, h, &mut rng)?;
        let out_w = params.insert_uniform("decoder.out.w", h, v, INIT_BOUND, &mut rng)?;
        let out_b = params.insert_zeros("decoder.out.b", 1, v)?;
        Ok(SpaceFusionModel {
            config,
            params,
            ctx_embedding,
            resp_embedding,
            dec_embedding,
            ctx_encoder,
            resp_encoder,
            decoder,
            out_w,
            out_b,
        })
    }

    /// Rebuilds a model around previously trained parameter values.
    pub fn from_parameters(config: ModelConfig, params: &ParameterSet) -> Result<Self> {
        let mut model = Self::new(config)?;
        model.params.copy_values_from(params)?;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut ModelConfig {
        &mut self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    /// Parameters reached by the decoder path (shared by both encoders' outputs).
    pub fn decoder_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.dec_embedding, self.out_w, self.out_b];
        for layer in self.decoder.layers() {
            ids.extend([layer.w_x, layer.u_zr, layer.u_h, layer.b]);
        }
        ids
    }

    pub fn response_encoder_param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.resp_embedding];
        for layer in self.resp_encoder.layers() {
            ids.extend([layer.w_x, layer.u_zr, layer.u_h, layer.b]);
        }
        ids
    }

    fn check_ids(&self, seq: &[usize]) -> Result<()> {
        match seq.iter().find(|&&t| t >= self.config.vocab_size) {
            Some(&bad) => Err(Error::Index {
                index: bad,
                size: self.config.vocab_size,
            }),
            None => Ok(()),
        }
    }

    /// Final top-layer encoder state for each row, plus optional N(0, σ²) noise.
    fn encode_rows(&self, tape: &mut Tape, side: Side, rows: &[&[usize]], rng: Option<&mut dyn RngCore>) -> Result<Var> {
        let (table, stack) = match side {
            Side::Context => (self.ctx_embedding, &self.ctx_encoder),
            Side::Response => (self.resp_embedding, &self.resp_encoder),
        };
        for r in rows {
            validate_sequence(r)?;
            self.check_ids(r)?;
        }
        let n = rows.len();
        let h = self.config.hidden_size;
        let steps = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let table = tape.param(&self.params, table);
        let mut inputs = Vec::with_capacity(steps);
        let mut masks = Vec::with_capacity(steps);
        for t in 0..steps {
            let ids: Vec<usize> = rows.iter().map(|r| r.get(t).copied().unwrap_or(PAD)).collect();
            inputs.push(tape.gather(table, ids));
            masks.push(rows.iter().map(|r| if t < r.len() { 1.0 } else { 0.0 }).collect());
        }
        let zero = tape.constant(Array::zeros(n, h));
        let init = vec![zero; stack.num_layers()];
        let (_, finals) = stack.forward(tape, &self.params, &inputs, &init, Some(&masks))?;
        let z = *finals.last().expect("non-empty stack");
        match rng {
            Some(rng) if self.config.noise_sigma > 0.0 => {
                let normal = Normal::new(0.0, self.config.noise_sigma)
                    .map_err(|e| Error::Config(format!("noise distribution: {e}")))?;
                let eps: Vec<f64> = (0..n * h).map(|_| normal.sample(rng)).collect();
                let eps = tape.constant(Array::from_vec(n, h, eps)?);
                Ok(tape.add(z, eps))
            }
            _ => Ok(z),
        }
    }

    fn initial_state(&self, z: Var) -> Vec<Var> {
        vec![z; self.decoder.num_layers()]
    }

    fn project(&self, tape: &mut Tape, top: Var) -> Var {
        let w = tape.param(&self.params, self.out_w);
        let b = tape.param(&self.params, self.out_b);
        let logits = tape.matmul(top, w);
        tape.add_row(logits, b)
    }

    /// Teacher-forced per-row mean log-likelihood of `targets` with `z` (one row per
    /// target) replicated as the initial state of every decoder layer.
    fn decode_rows(&self, tape: &mut Tape, z: Var, targets: &[&[usize]]) -> Result<Var> {
        let m = targets.len();
        if tape.value(z).rows() != m {
            return Err(Error::Dimension(format!("{} latent rows for {m} targets", tape.value(z).rows())));
        }
        if tape.value(z).cols() != self.config.hidden_size {
            return Err(Error::Dimension(format!(
                "latent width {} but decoder hidden size {}",
                tape.value(z).cols(),
                self.config.hidden_size
            )));
        }
        for t in targets {
            if t.is_empty() {
                return Err(Error::Domain("cannot score an empty target".into()));
            }
            self.check_ids(t)?;
        }
        let steps = targets.iter().map(|t| t.len()).max().unwrap_or(0);
        let table = tape.param(&self.params, self.dec_embedding);
        let mut state = self.initial_state(z);
        let mut total: Option<Var> = None;
        for t in 0..steps {
            let inputs: Vec<usize> = targets
                .iter()
                .map(|y| match t {
                    0 => BOS,
                    _ => y.get(t - 1).copied().unwrap_or(PAD),
                })
                .collect();
            let x = tape.gather(table, inputs);
            state = self.decoder.step(tape, &self.params, x, &state, None);
            let logits = self.project(tape, *state.last().expect("non-empty stack"));
            let gold: Vec<usize> = targets.iter().map(|y| y.get(t).copied().unwrap_or(PAD)).collect();
            let picked = tape.log_softmax_pick(logits, gold);
            let weights = targets
                .iter()
                .map(|y| if t < y.len() { 1.0 / y.len() as f64 } else { 0.0 })
                .collect();
            let weighted = tape.row_scale(picked, weights);
            total = Some(match total {
                Some(acc) => tape.add(acc, weighted),
                None => weighted,
            });
        }
        Ok(total.expect("at least one step"))
    }

    fn latent_rows(&self, tape: &mut Tape, zs: &[LatentVector]) -> Result<Var> {
        let d = self.config.latent_dim;
        let mut data = Vec::with_capacity(zs.len() * d);
        for z in zs {
            if z.dim() != d {
                return Err(Error::Dimension(format!("latent of dim {} for a model of dim {d}", z.dim())));
            }
            data.extend_from_slice(&z.0);
        }
        Ok(tape.constant(Array::from_vec(zs.len(), d, data)?))
    }

    fn to_latents(tape: &Tape, v: Var) -> Vec<LatentVector> {
        let a = tape.value(v);
        (0..a.rows()).map(|r| LatentVector(a.row(r).to_vec())).collect()
    }

    /// `z_s2s` for one context. Noise is added only when `noise_on`.
    pub fn encode_context<R: RngCore>(&self, context: &[usize], noise_on: bool, rng: &mut R) -> Result<LatentVector> {
        let mut tape = Tape::new();
        let rng: Option<&mut dyn RngCore> = if noise_on { Some(rng) } else { None };
        let z = self.encode_rows(&mut tape, Side::Context, &[context], rng)?;
        Ok(Self::to_latents(&tape, z).remove(0))
    }

    /// `z_ae` for one response. Noise is added only when `noise_on`.
    pub fn encode_response<R: RngCore>(&self, response: &[usize], noise_on: bool, rng: &mut R) -> Result<LatentVector> {
        let mut tape = Tape::new();
        let rng: Option<&mut dyn RngCore> = if noise_on { Some(rng) } else { None };
        let z = self.encode_rows(&mut tape, Side::Response, &[response], rng)?;
        Ok(Self::to_latents(&tape, z).remove(0))
    }

    /// Noise-free `z_s2s` for many contexts at once.
    pub fn encode_contexts(&self, contexts: &[&[usize]]) -> Result<Vec<LatentVector>> {
        if contexts.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let z = self.encode_rows(&mut tape, Side::Context, contexts, None)?;
        Ok(Self::to_latents(&tape, z))
    }

    /// Noise-free `z_ae` for many responses at once.
    pub fn encode_responses(&self, responses: &[&[usize]]) -> Result<Vec<LatentVector>> {
        if responses.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let z = self.encode_rows(&mut tape, Side::Response, responses, None)?;
        Ok(Self::to_latents(&tape, z))
    }

    /// `(1/|y|) log p(y|z)`, where `|y|` counts every token of `target` including EOS.
    pub fn decode_mean_log_prob(&self, z: &LatentVector, target: &[usize]) -> Result<f64> {
        Ok(self.decode_mean_log_probs(std::slice::from_ref(z), &[target])?[0])
    }

    pub fn decode_mean_log_probs(&self, zs: &[LatentVector], targets: &[&[usize]]) -> Result<Vec<f64>> {
        if zs.is_empty() {
            return Ok(Vec::new());
        }
        let mut tape = Tape::new();
        let z = self.latent_rows(&mut tape, zs)?;
        let lp = self.decode_rows(&mut tape, z, targets)?;
        Ok(tape.value(lp).data().to_vec())
    }

    /// Greedy decoding from each latent: argmax per step (lowest id wins ties),
    /// stopping a row at EOS or after `max_len` tokens.
    pub fn greedy_decode_batch(&self, zs: &[LatentVector], max_len: usize) -> Result<Vec<Vec<usize>>> {
        if zs.is_empty() || max_len == 0 {
            return Ok(vec![Vec::new(); zs.len()]);
        }
        let mut tape = Tape::new();
        let z = self.latent_rows(&mut tape, zs)?;
        let table = tape.param(&self.params, self.dec_embedding);
        let mut state = self.initial_state(z);
        let mut out: Vec<Vec<usize>> = vec![Vec::new(); zs.len()];
        let mut done = vec![false; zs.len()];
        let mut prev = vec![BOS; zs.len()];
        for _ in 0..max_len {
            let x = tape.gather(table, prev.clone());
            state = self.decoder.step(&mut tape, &self.params, x, &state, None);
            let logits = self.project(&mut tape, *state.last().expect("non-empty stack"));
            let values = tape.value(logits);
            for r in 0..zs.len() {
                if done[r] {
                    continue;
                }
                let tok = argmax_lowest(values.row(r));
                out[r].push(tok);
                prev[r] = tok;
                if tok == EOS {
                    done[r] = true;
                }
            }
            if done.iter().all(|&d| d) {
                break;
            }
        }
        Ok(out)
    }

    pub fn greedy_decode(&self, z: &LatentVector, max_len: usize) -> Result<Vec<usize>> {
        Ok(self.greedy_decode_batch(std::slice::from_ref(z), max_len)?.remove(0))
    }

    /// Interpolation loss at weight `u`: `-(1/|y|) log p(y | (1-u)·z_s2s + u·z_ae)`.
    pub fn loss_interp_at(&self, z_s2s: &LatentVector, z_ae: &LatentVector, target: &[usize], u: f64) -> Result<f64> {
        let z = interpolate(z_s2s, z_ae, u)?;
        Ok(-self.decode_mean_log_prob(&z, target)?)
    }

    /// Interpolation loss with `u ~ U(0, 1)`; returns the loss and the drawn `u`.
    pub fn loss_interp<R: Rng>(&self, z_s2s: &LatentVector, z_ae: &LatentVector, target: &[usize], rng: &mut R) -> Result<(f64, f64)> {
        let u: f64 = rng.gen();
        Ok((self.loss_interp_at(z_s2s, z_ae, target, u)?, u))
    }

    fn loss_graph(&self, tape: &mut Tape, batch: &Batch, sampler: &mut LossSampler) -> Result<(Var, LossBreakdown)> {
        let n = batch.size();
        let contexts: Vec<&[usize]> = (0..n).map(|i| batch.context(i)).collect();
        let responses: Vec<&[usize]> = (0..n).map(|i| batch.response(i)).collect();
        let noise = sampler.noise;
        let z_s2s = {
            let rng: Option<&mut dyn RngCore> = if noise { Some(&mut sampler.rng) } else { None };
            self.encode_rows(tape, Side::Context, &contexts, rng)?
        };
        let z_ae = {
            let rng: Option<&mut dyn RngCore> = if noise { Some(&mut sampler.rng) } else { None };
            self.encode_rows(tape, Side::Response, &responses, rng)?
        };
        let reg = self.config.regularization_enabled;
        if reg && n < 2 {
            return Err(Error::Domain("fusion loss needs a batch of at least 2 rows".into()));
        }

        let us = if reg { sampler.draw_u(n) } else { Vec::new() };
        let mut latents = vec![z_s2s, z_ae];
        if reg {
            let from = tape.row_scale(z_s2s, us.iter().map(|u| 1.0 - u).collect());
            let to = tape.row_scale(z_ae, us.clone());
            latents.push(tape.add(from, to));
        }
        let all = tape.concat_rows(&latents);
        let targets: Vec<&[usize]> = (0..latents.len()).flat_map(|_| responses.iter().copied()).collect();
        let lp = self.decode_rows(tape, all, &targets)?;

        let neg_mean = |tape: &mut Tape, block: usize| {
            let part = tape.slice_rows(lp, block * n, n);
            let mean = tape.mean(part);
            tape.scale(mean, -1.0)
        };
        let recon_s2s = neg_mean(tape, 0);
        let recon_ae = neg_mean(tape, 1);
        let mut total = tape.add(recon_s2s, recon_ae);
        let mut breakdown = LossBreakdown {
            total: 0.0,
            recon_s2s: tape.value(recon_s2s).item(),
            recon_ae: tape.value(recon_ae).item(),
            interp: 0.0,
            fuse: 0.0,
            us,
        };

        if reg {
            let interp = neg_mean(tape, 2);
            let clip = self.config.clip_distance;
            let matched = tape.pair_rms(z_s2s, z_ae, (0..n).map(|i| (i, i)).collect(), clip);
            let matched = tape.mean(matched);
            let off_diagonal: Vec<(usize, usize)> = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .collect();
            let spread_s2s = tape.pair_rms(z_s2s, z_s2s, off_diagonal.clone(), clip);
            let spread_s2s = tape.mean(spread_s2s);
            let spread_ae = tape.pair_rms(z_ae, z_ae, off_diagonal, clip);
            let spread_ae = tape.mean(spread_ae);
            let fuse = tape.sub(matched, spread_s2s);
            let fuse = tape.sub(fuse, spread_ae);

            breakdown.interp = tape.value(interp).item();
            breakdown.fuse = tape.value(fuse).item();
            let wi = tape.scale(interp, self.config.alpha);
            let wf = tape.scale(fuse, self.config.beta);
            total = tape.add(total, wi);
            total = tape.add(total, wf);
        }
        breakdown.total = tape.value(total).item();
        Ok((total, breakdown))
    }

    /// Training objective on a batch, without touching gradients.
    pub fn total_loss(&self, batch: &Batch, sampler: &mut LossSampler) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        Ok(self.loss_graph(&mut tape, batch, sampler)?.1)
    }

    /// Training objective on a batch; its gradient is added to the parameter gradient buffers.
    pub fn accumulate_gradients(&mut self, batch: &Batch, sampler: &mut LossSampler) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let (root, breakdown) = self.loss_graph(&mut tape, batch, sampler)?;
        tape.backward(root, &mut self.params);
        Ok(breakdown)
    }
}

fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
