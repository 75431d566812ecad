//! Shared test helpers: a finite-difference gradient check, and reference
//! implementations that read parameters by name and redo the math by hand.
#![allow(dead_code)]

use std::collections::HashMap;

use spacefusion::corpus::{Batch, EOS};
use spacefusion::model::{LossSampler, ModelConfig, SpaceFusionModel};

pub const BOS: usize = 1;

const STEP: f64 = 1e-5;

pub fn gradient_toy_model(regularized: bool) -> SpaceFusionModel {
    let mut cfg = ModelConfig::desk(20).with_hidden(8);
    cfg.embedding_dim = 8;
    cfg.regularization_enabled = regularized;
    cfg.seed = 7;
    let mut model = SpaceFusionModel::new(cfg).unwrap();
    // Spread the weights out so that gates are not all near 0.5.
    let ids: Vec<_> = model.params().ids().collect();
    for (k, id) in ids.into_iter().enumerate() {
        let v = model.params_mut().value_mut(id);
        for (i, x) in v.data_mut().iter_mut().enumerate() {
            *x = *x * 6.0 + 0.05 * (((i + 3 * k) % 7) as f64 - 3.0);
        }
    }
    model
}

pub fn gradient_toy_batch() -> Batch {
    let c0 = [4, 5, 6, EOS];
    let c1 = [7, 8, EOS];
    let r0 = [9, 10, 11, 12, EOS];
    let r1 = [13, 14, EOS];
    Batch::from_pairs(&[(&c0[..], &r0[..]), (&c1[..], &r1[..])]).unwrap()
}

fn fd_loss(model: &SpaceFusionModel, batch: &Batch) -> f64 {
    model.total_loss(batch, &mut LossSampler::new(11)).unwrap().total
}

/// Largest relative error `|a - n| / max(|a| + |n|, 1e-6)` over every scalar parameter.
pub fn max_relative_gradient_error(regularized: bool) -> (f64, String) {
    let mut model = gradient_toy_model(regularized);
    let batch = gradient_toy_batch();
    model.params_mut().zero_grads();
    model.accumulate_gradients(&batch, &mut LossSampler::new(11)).unwrap();
    let analytic = model.params().clone();
    let ids: Vec<_> = model.params().ids().collect();
    let mut worst = (0.0, String::new());
    for id in ids {
        let len = model.params().value(id).data().len();
        for i in 0..len {
            let orig = model.params().value(id).data()[i];
            model.params_mut().value_mut(id).data_mut()[i] = orig + STEP;
            let up = fd_loss(&model, &batch);
            model.params_mut().value_mut(id).data_mut()[i] = orig - STEP;
            let down = fd_loss(&model, &batch);
            model.params_mut().value_mut(id).data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let a = analytic.grad(id).data()[i];
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
            if rel > worst.0 {
                worst = (rel, format!("{}[{i}] analytic {a:e} numeric {numeric:e}", model.params().name(id)));
            }
        }
    }
    worst
}

/// Brute-force sentence BLEU: counts n-grams with nested loops over positions.
pub fn bleu_oracle(reference: &[&str], hypothesis: &[&str]) -> f64 {
    if hypothesis.is_empty() {
        return 0.0;
    }
    let mut precisions = Vec::new();
    for n in 1..=4usize {
        let total = if hypothesis.len() >= n { hypothesis.len() - n + 1 } else { 0 };
        let mut grams: Vec<&[&str]> = Vec::new();
        for i in 0..total {
            let g = &hypothesis[i..i + n];
            if !grams.contains(&g) {
                grams.push(g);
            }
        }
        let count = |seq: &[&str], g: &[&str]| {
            if seq.len() < n {
                return 0;
            }
            (0..=seq.len() - n).filter(|&i| &seq[i..i + n] == g).count()
        };
        let mut matched = 0;
        for g in grams {
            matched += count(hypothesis, g).min(count(reference, g));
        }
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        precisions.push(p);
    }
    if precisions[0] == 0.0 {
        return 0.0;
    }
    let geo = precisions.iter().map(|p| p.ln()).sum::<f64>() / 4.0;
    let bp = if hypothesis.len() < reference.len() {
        (1.0 - reference.len() as f64 / hypothesis.len() as f64).exp()
    } else {
        1.0
    };
    bp * geo.exp()
}

type Mat = Vec<Vec<f64>>;

/// Plain nested-vector copy of the model's parameters.
pub struct Weights(HashMap<String, Mat>);

impl Weights {
    pub fn of(model: &SpaceFusionModel) -> Self {
        let mut map = HashMap::new();
        for (name, a) in model.params().iter() {
            let m = (0..a.rows()).map(|r| (0..a.cols()).map(|c| a.get(r, c)).collect()).collect();
            map.insert(name.to_string(), m);
        }
        Weights(map)
    }

    fn get(&self, name: &str) -> &Mat {
        self.0.get(name).unwrap_or_else(|| panic!("no parameter {name}"))
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// `x · W[:, offset..offset+width]`
fn affine(x: &[f64], w: &Mat, offset: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|j| x.iter().enumerate().map(|(i, xi)| xi * w[i][offset + j]).sum())
        .collect()
}

/// One GRU cell: z = σ(xWz + hUz + bz), r = σ(xWr + hUr + br),
/// c = tanh(xWh + (r∘h)Uh + bh), h' = (1 − z)∘h + z∘c.
fn gru_cell(w: &Weights, prefix: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
    let hs = h.len();
    let wx = w.get(&format!("{prefix}.w_x"));
    let uzr = w.get(&format!("{prefix}.u_zr"));
    let uh = w.get(&format!("{prefix}.u_h"));
    let b = &w.get(&format!("{prefix}.b"))[0];
    let (xz, xr, xh) = (affine(x, wx, 0, hs), affine(x, wx, hs, hs), affine(x, wx, 2 * hs, hs));
    let (hz, hr) = (affine(h, uzr, 0, hs), affine(h, uzr, hs, hs));
    let z: Vec<f64> = (0..hs).map(|j| sigmoid(xz[j] + hz[j] + b[j])).collect();
    let r: Vec<f64> = (0..hs).map(|j| sigmoid(xr[j] + hr[j] + b[hs + j])).collect();
    let rh: Vec<f64> = (0..hs).map(|j| r[j] * h[j]).collect();
    let rhu = affine(&rh, uh, 0, hs);
    (0..hs)
        .map(|j| {
            let c = (xh[j] + rhu[j] + b[2 * hs + j]).tanh();
            (1.0 - z[j]) * h[j] + z[j] * c
        })
        .collect()
}

fn stack_step(w: &Weights, prefix: &str, layers: usize, x: &[f64], state: &mut [Vec<f64>]) {
    let mut input = x.to_vec();
    for (l, h) in state.iter_mut().enumerate().take(layers) {
        *h = gru_cell(w, &format!("{prefix}.l{l}"), &input, h);
        input = h.clone();
    }
}

pub struct Oracle<'a> {
    pub w: Weights,
    pub model: &'a SpaceFusionModel,
}

impl<'a> Oracle<'a> {
    pub fn new(model: &'a SpaceFusionModel) -> Self {
        Oracle { w: Weights::of(model), model }
    }

    fn layers(&self) -> usize {
        self.model.config().num_layers
    }

    fn hidden(&self) -> usize {
        self.model.config().hidden_size
    }

    /// Final top-layer state of an encoder over the tokens of `seq`.
    pub fn encode(&self, side: &str, seq: &[usize]) -> Vec<f64> {
        let emb = self.w.get(&format!("{side}.embedding"));
        let mut state = vec![vec![0.0; self.hidden()]; self.layers()];
        for &t in seq {
            stack_step(&self.w, &format!("{side}.gru"), self.layers(), &emb[t], &mut state);
        }
        state.last().unwrap().clone()
    }

    /// `(1/|y|) log p(y | z)` with z as the initial state of every decoder layer.
    pub fn mean_log_prob(&self, z: &[f64], target: &[usize]) -> f64 {
        let emb = self.w.get("decoder.embedding");
        let out_w = self.w.get("decoder.out.w");
        let out_b = &self.w.get("decoder.out.b")[0];
        let mut state = vec![z.to_vec(); self.layers()];
        let mut prev = BOS;
        let mut sum = 0.0;
        for &y in target {
            stack_step(&self.w, "decoder.gru", self.layers(), &emb[prev], &mut state);
            let top = state.last().unwrap();
            let logits: Vec<f64> = (0..out_b.len())
                .map(|v| out_b[v] + top.iter().enumerate().map(|(i, h)| h * out_w[i][v]).sum::<f64>())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            sum += logits[y] - lse;
            prev = y;
        }
        sum / target.len() as f64
    }
}

pub fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Fusion loss straight from its definition with every distance clipped.
pub fn fuse_oracle(s2s: &[Vec<f64>], ae: &[Vec<f64>], clip: f64) -> f64 {
    let n = s2s.len();
    let d = |a: &[f64], b: &[f64]| rms(a, b).min(clip);
    let matched: f64 = (0..n).map(|i| d(&s2s[i], &ae[i])).sum::<f64>() / n as f64;
    let (mut ss, mut aa) = (0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                ss += d(&s2s[i], &s2s[j]);
                aa += d(&ae[i], &ae[j]);
            }
        }
    }
    let pairs = (n * n - n) as f64;
    matched - ss / pairs - aa / pairs
}

/// Noise-free training loss of a batch for given interpolation weights `us`.
pub fn total_loss_oracle(o: &Oracle, pairs: &[(Vec<usize>, Vec<usize>)], us: &[f64]) -> f64 {
    let cfg = o.model.config();
    let n = pairs.len() as f64;
    let s2s: Vec<Vec<f64>> = pairs.iter().map(|(x, _)| o.encode("context", x)).collect();
    let ae: Vec<Vec<f64>> = pairs.iter().map(|(_, y)| o.encode("response", y)).collect();
    let mut recon = 0.0;
    for (i, (_, y)) in pairs.iter().enumerate() {
        recon -= o.mean_log_prob(&s2s[i], y) / n;
        recon -= o.mean_log_prob(&ae[i], y) / n;
    }
    if !cfg.regularization_enabled {
        return recon;
    }
    let mut interp = 0.0;
    for (i, (_, y)) in pairs.iter().enumerate() {
        let z: Vec<f64> = s2s[i].iter().zip(&ae[i]).map(|(a, b)| (1.0 - us[i]) * a + us[i] * b).collect();
        interp -= o.mean_log_prob(&z, y) / n;
    }
    recon + cfg.alpha * interp + cfg.beta * fuse_oracle(&s2s, &ae, cfg.clip_distance)
}
