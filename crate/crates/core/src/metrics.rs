//! Sentence BLEU and the multi-reference precision / recall / F1 built on it.

use std::collections::HashMap;
use std::hash::Hash;

use crate::corpus::{MultiRefSample, EOS, PAD};
use crate::error::{Error, Result};
use crate::inference::{pools_for, select_top, RankerConfig};
use crate::kv::KvBlock;
use crate::model::SpaceFusionModel;

pub const MAX_ORDER: usize = 4;

fn ngram_counts<T: Eq + Hash>(seq: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut counts = HashMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence-level 4-gram BLEU. Order 1 is unsmoothed; orders 2 to 4 use add-one
/// smoothing. Sequences must already exclude EOS and PAD.
pub fn bleu4<T: Eq + Hash>(reference: &[T], hypothesis: &[T]) -> f64 {
    if hypothesis.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=MAX_ORDER {
        let hyp = ngram_counts(hypothesis, n);
        let refc = ngram_counts(reference, n);
        let matched: usize = hyp.iter().map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0))).sum();
        let total = hypothesis.len().saturating_sub(n - 1);
        let p = if n == 1 {
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let (r, h) = (reference.len() as f64, hypothesis.len() as f64);
    let bp = if h < r { (1.0 - r / h).exp() } else { 1.0 };
    bp * (log_sum / MAX_ORDER as f64).exp()
}

/// Mean over hypotheses of the best BLEU against any reference.
pub fn precision<T: Eq + Hash>(references: &[Vec<T>], hypotheses: &[Vec<T>]) -> f64 {
    if hypotheses.is_empty() {
        return 0.0;
    }
    let best = |h: &Vec<T>| references.iter().map(|r| bleu4(r, h)).fold(0.0, f64::max);
    hypotheses.iter().map(best).sum::<f64>() / hypotheses.len() as f64
}

/// Mean over references of the best match among the hypotheses. Defined as
/// `precision(hypotheses, references)` so the two are exact mirrors.
pub fn recall<T: Eq + Hash>(references: &[Vec<T>], hypotheses: &[Vec<T>]) -> f64 {
    precision(hypotheses, references)
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall <= 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Tokens before the first EOS, without PAD.
pub fn strip_special(seq: &[usize]) -> Vec<usize> {
    seq.iter().copied().take_while(|&t| t != EOS).filter(|&t| t != PAD).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContextScore {
    pub index: usize,
    pub num_refs: usize,
    /// Hypotheses actually produced; the rest were padded as empty.
    pub num_hyps: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub lambda: f64,
    pub mean_hyp_len: f64,
    pub mean_ref_len: f64,
    pub rows: Vec<ContextScore>,
    /// Samples without references that were left out.
    pub skipped: usize,
}

impl EvalReport {
    /// Key=value header with metrics scaled to [0, 100], a blank line, then per-context CSV.
    pub fn to_text(&self) -> String {
        let mut kv = KvBlock::new();
        kv.set("precision", format!("{:.4}", 100.0 * self.precision));
        kv.set("recall", format!("{:.4}", 100.0 * self.recall));
        kv.set("f1", format!("{:.4}", 100.0 * self.f1));
        kv.set("lambda", format!("{:.6}", self.lambda));
        kv.set("mean_len", format!("{:.4}", self.mean_hyp_len));
        kv.set("mean_ref_len", format!("{:.4}", self.mean_ref_len));
        kv.set("contexts", self.rows.len());
        kv.set("skipped", self.skipped);
        let mut out = kv.to_text();
        out.push_str("\ncontext,num_refs,num_hyps,precision,recall\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.4},{:.4}\n",
                r.index,
                r.num_refs,
                r.num_hyps,
                100.0 * r.precision,
                100.0 * r.recall
            ));
        }
        out
    }
}

/// Scores selected hypotheses against the references of each sample. `hypotheses[i]`
/// belongs to the i-th sample that has references; rows shorter than the reference
/// count are padded with empty hypotheses.
pub fn score_selections(samples: &[MultiRefSample], hypotheses: &[Vec<Vec<usize>>], lambda: f64) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut skipped = 0;
    let (mut hyp_len, mut hyp_count, mut ref_len, mut ref_count) = (0usize, 0usize, 0usize, 0usize);
    let mut hyps_iter = hypotheses.iter();
    for (index, s) in samples.iter().enumerate() {
        if s.responses.is_empty() {
            skipped += 1;
            continue;
        }
        let hyps = hyps_iter
            .next()
            .ok_or_else(|| Error::Data(format!("no hypotheses for context {index}")))?;
        let refs: Vec<Vec<usize>> = s.responses.iter().map(|r| strip_special(r)).collect();
        let mut padded: Vec<Vec<usize>> = hyps.iter().take(refs.len()).map(|h| strip_special(h)).collect();
        let produced = padded.len();
        hyp_len += padded.iter().map(Vec::len).sum::<usize>();
        hyp_count += produced;
        ref_len += refs.iter().map(Vec::len).sum::<usize>();
        ref_count += refs.len();
        padded.resize(refs.len(), Vec::new());
        rows.push(ContextScore {
            index,
            num_refs: refs.len(),
            num_hyps: produced,
            precision: precision(&refs, &padded),
            recall: recall(&refs, &padded),
        });
    }
    if rows.is_empty() {
        return Err(Error::Data("evaluation set has no samples with references".into()));
    }
    let n = rows.len() as f64;
    let p = rows.iter().map(|r| r.precision).sum::<f64>() / n;
    let r = rows.iter().map(|r| r.recall).sum::<f64>() / n;
    Ok(EvalReport {
        precision: p,
        recall: r,
        f1: f1(p, r),
        lambda,
        mean_hyp_len: if hyp_count > 0 { hyp_len as f64 / hyp_count as f64 } else { 0.0 },
        mean_ref_len: ref_len as f64 / ref_count as f64,
        rows,
        skipped,
    })
}

/// Generates a pool per context, keeps the top `N_r` at `config.lambda`, and scores them.
pub fn evaluate_corpus(model: &SpaceFusionModel, samples: &[MultiRefSample], config: &RankerConfig, seed: u64) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Data("empty test set".into()));
    }
    let (pools, counts) = pools_for(model, samples, config, seed)?;
    let selections = pools
        .iter()
        .zip(&counts)
        .map(|(pool, &n)| Ok(select_top(pool, n, config.lambda)?.hypotheses.into_iter().map(|h| h.tokens).collect()))
        .collect::<Result<Vec<Vec<Vec<usize>>>>>()?;
    score_selections(samples, &selections, config.lambda)
}
