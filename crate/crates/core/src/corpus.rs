//! Vocabulary, multi-reference samples, the tab-separated corpus format,
//! the synthetic one-to-many generator, and batching.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Longest token sequence kept, EOS included.
pub const MAX_SEQ_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from an ordered token list that follows the reserved ids.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index = HashMap::new();
        index.insert(RESERVED[UNK].to_string(), UNK);
        for tok in tokens {
            let tok = tok.into();
            if RESERVED.contains(&tok.as_str()) {
                continue;
            }
            if tok.is_empty() || tok.chars().any(char::is_whitespace) || index.contains_key(&tok) {
                return Err(Error::Config(format!("invalid or duplicate vocabulary token {tok:?}")));
            }
            index.insert(tok.clone(), all.len());
            all.push(tok);
        }
        Ok(Vocabulary { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn words(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// Lowercased whitespace tokens mapped to ids, unknowns to UNK, with EOS appended.
    /// Sequences are cut to [`MAX_SEQ_LEN`] tokens including the EOS.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        let mut ids: Vec<usize> = text
            .split_whitespace()
            .map(|w| self.id(&w.to_lowercase()).unwrap_or(UNK))
            .take(MAX_SEQ_LEN - 1)
            .collect();
        ids.push(EOS);
        ids
    }

    /// Inverse of [`tokenize`](Self::tokenize) up to the first EOS; PAD and BOS are skipped.
    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// SHA-256 over the token list, used to pair checkpoints with vocabularies.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// One token per line, reserved tokens included.
    pub fn to_text(&self) -> String {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&str> = text.lines().collect();
        if lines.len() < RESERVED.len() || lines[..RESERVED.len()] != RESERVED {
            return Err(Error::Data("vocabulary file must start with the reserved tokens".into()));
        }
        Self::from_tokens(lines[RESERVED.len()..].iter().copied())
    }
}

/// Frequency-ranked vocabulary with a lexicographic tie-break, capped at `max_size`
/// entries including the four reserved ones.
pub fn build_vocab(samples: &[TextSample], max_size: usize) -> Result<Vocabulary> {
    if max_size < RESERVED.len() {
        return Err(Error::Config(format!("max vocabulary size {max_size} is below 4")));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for s in samples {
        for text in std::iter::once(&s.context).chain(&s.responses) {
            for w in text.split_whitespace() {
                let w = w.to_lowercase();
                if !RESERVED.contains(&w.as_str()) {
                    *counts.entry(w).or_default() += 1;
                }
            }
        }
    }
    if counts.is_empty() {
        return Err(Error::Config("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - RESERVED.len());
    Vocabulary::from_tokens(ranked.into_iter().map(|(w, _)| w))
}

/// A context with its reference responses, as text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextSample {
    pub context: String,
    pub responses: Vec<String>,
    pub cluster_labels: Option<Vec<usize>>,
}

impl TextSample {
    pub fn encode(&self, vocab: &Vocabulary) -> MultiRefSample {
        MultiRefSample {
            context: vocab.tokenize(&self.context),
            responses: self.responses.iter().map(|r| vocab.tokenize(r)).collect(),
            cluster_labels: self.cluster_labels.clone(),
        }
    }
}

/// One context paired with its set of reference responses, as token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MultiRefSample {
    pub context: Vec<usize>,
    pub responses: Vec<Vec<usize>>,
    pub cluster_labels: Option<Vec<usize>>,
}

impl MultiRefSample {
    pub fn num_refs(&self) -> usize {
        self.responses.len()
    }

    pub fn decode(&self, vocab: &Vocabulary) -> TextSample {
        TextSample {
            context: vocab.detokenize(&self.context),
            responses: self.responses.iter().map(|r| vocab.detokenize(r)).collect(),
            cluster_labels: self.cluster_labels.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.responses.is_empty() {
            return Err(Error::Data("sample has no responses".into()));
        }
        for seq in std::iter::once(&self.context).chain(&self.responses) {
            validate_sequence(seq)?;
        }
        if let Some(labels) = &self.cluster_labels {
            if labels.len() != self.responses.len() {
                return Err(Error::Data("cluster label count differs from response count".into()));
            }
        }
        Ok(())
    }
}

/// Non-empty, ends with EOS, and carries no PAD or EOS before the end.
pub fn validate_sequence(seq: &[usize]) -> Result<()> {
    match seq.split_last() {
        Some((&EOS, body)) if body.iter().all(|&t| t != PAD && t != EOS) => Ok(()),
        _ => Err(Error::Data(format!("malformed token sequence {seq:?}"))),
    }
}

/// Number of tokens before EOS.
pub fn content_len(seq: &[usize]) -> usize {
    seq.iter().position(|&t| t == EOS).unwrap_or(seq.len())
}

/// Parses the tab-separated corpus format:
/// `context TAB resp_1|...|resp_k [TAB label_1|...|label_k]`.
pub fn parse_corpus(text: &str, path: &Path) -> Result<Vec<TextSample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(err("expected at least 2 tab-separated fields".into()));
        }
        if fields.len() > 3 {
            return Err(err(format!("expected at most 3 fields, found {}", fields.len())));
        }
        let responses: Vec<String> = fields[1].split('|').map(|s| s.trim().to_string()).collect();
        let cluster_labels = match fields.get(2) {
            Some(f) => {
                let labels = f
                    .split('|')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| err(format!("bad cluster label: {e}")))?;
                if labels.len() != responses.len() {
                    return Err(err(format!(
                        "{} labels for {} responses",
                        labels.len(),
                        responses.len()
                    )));
                }
                Some(labels)
            }
            None => None,
        };
        out.push(TextSample {
            context: fields[0].trim().to_string(),
            responses,
            cluster_labels,
        });
    }
    Ok(out)
}

pub fn read_text_corpus(path: impl AsRef<Path>) -> Result<Vec<TextSample>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_corpus(&text, path)
}

/// Reads a corpus file and tokenizes every utterance with `vocab`.
pub fn load_corpus(path: impl AsRef<Path>, vocab: &Vocabulary) -> Result<Vec<MultiRefSample>> {
    Ok(read_text_corpus(path)?.iter().map(|s| s.encode(vocab)).collect())
}

pub fn format_corpus(samples: &[TextSample]) -> Result<String> {
    let mut out = String::new();
    for s in samples {
        for text in std::iter::once(&s.context).chain(&s.responses) {
            if text.contains('|') || text.contains('\t') || text.contains('\n') {
                return Err(Error::Data(format!("utterance {text:?} contains a separator")));
            }
        }
        if s.responses.is_empty() {
            return Err(Error::Data("sample has no responses".into()));
        }
        out.push_str(&s.context);
        out.push('\t');
        out.push_str(&s.responses.join("|"));
        if let Some(labels) = &s.cluster_labels {
            let labels: Vec<String> = labels.iter().map(usize::to_string).collect();
            out.push('\t');
            out.push_str(&labels.join("|"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_corpus(path: impl AsRef<Path>, samples: &[TextSample]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_corpus(samples)?).map_err(|e| Error::io(path, e))
}

const TOPICS: [&str; 40] = [
    "game", "movie", "concert", "party", "match", "show", "dinner", "lecture", "meeting", "picnic",
    "trip", "festival", "hike", "race", "play", "exhibit", "launch", "workshop", "tour", "recital",
    "wedding", "brunch", "seminar", "parade", "market", "fair", "marathon", "debate", "gala",
    "screening", "tournament", "reunion", "barbecue", "opera", "ballet", "museum", "class",
    "session", "meetup", "premiere",
];

const CONTEXT_TEMPLATES: [&str; 4] = [
    "anyone want to come to the {} tonight ?",
    "do you want to join the {} this weekend ?",
    "are you going to the {} tomorrow ?",
    "who is up for the {} later ?",
];

const RESPONSE_TEMPLATES: [&str; 6] = [
    "yes i would love to go to the {}",
    "sorry i can not make it to the {}",
    "what time does the {} start ?",
    "who else is going to the {} ?",
    "maybe , let me check my schedule first",
    "how about we skip the {} and stay home",
];

fn response_skeleton(cluster: usize) -> String {
    match RESPONSE_TEMPLATES.get(cluster) {
        Some(t) => t.to_string(),
        None => format!("i pick option {cluster} for the {{}}"),
    }
}

/// The topic word of every generated sample is the only varying slot.
fn synthesize(num_contexts: usize, clusters: usize, topics: &[&str], rng: &mut ChaCha8Rng) -> Vec<TextSample> {
    let skeletons: Vec<String> = (0..clusters).map(response_skeleton).collect();
    (0..num_contexts)
        .map(|_| {
            let topic = topics[rng.gen_range(0..topics.len())];
            let template = CONTEXT_TEMPLATES[rng.gen_range(0..CONTEXT_TEMPLATES.len())];
            TextSample {
                context: template.replace("{}", topic),
                responses: skeletons.iter().map(|s| s.replace("{}", topic)).collect(),
                cluster_labels: Some((0..clusters).collect()),
            }
        })
        .collect()
}

/// Synthetic one-to-many corpus: each context is a templated invitation about a
/// topic word, and response `k` instantiates the skeleton of semantic cluster `k`
/// (accept, decline, ask-when, ...). Deterministic given `seed`.
pub fn generate_synthetic(num_contexts: usize, clusters: usize, seed: u64) -> Result<Vec<TextSample>> {
    if clusters < 2 {
        return Err(Error::Config(format!("need at least 2 response clusters, got {clusters}")));
    }
    if num_contexts == 0 {
        return Err(Error::Config("need at least one context".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(synthesize(num_contexts, clusters, &TOPICS, &mut rng))
}

/// Train/validation/test corpora whose topic words are pairwise disjoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SyntheticSplits {
    pub train: Vec<TextSample>,
    pub valid: Vec<TextSample>,
    pub test: Vec<TextSample>,
}

/// Splits the topic inventory 80/10/10 (after a seeded shuffle) and generates
/// `num_contexts` contexts in the same proportions.
pub fn generate_synthetic_splits(num_contexts: usize, clusters: usize, seed: u64) -> Result<SyntheticSplits> {
    if clusters < 2 {
        return Err(Error::Config(format!("need at least 2 response clusters, got {clusters}")));
    }
    if num_contexts < 3 {
        return Err(Error::Config("need at least 3 contexts to fill three splits".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut topics: Vec<&str> = TOPICS.to_vec();
    topics.shuffle(&mut rng);
    let n_topic_held = TOPICS.len() / 10;
    let (valid_topics, rest) = topics.split_at(n_topic_held);
    let (test_topics, train_topics) = rest.split_at(n_topic_held);

    let n_valid = (num_contexts / 10).max(1);
    let n_test = (num_contexts / 10).max(1);
    let n_train = num_contexts - n_valid - n_test;
    Ok(SyntheticSplits {
        train: synthesize(n_train.max(1), clusters, train_topics, &mut rng),
        valid: synthesize(n_valid, clusters, valid_topics, &mut rng),
        test: synthesize(n_test, clusters, test_topics, &mut rng),
    })
}

/// Words appearing in a set of samples, for checking split disjointness.
pub fn word_set(samples: &[TextSample]) -> BTreeSet<String> {
    samples
        .iter()
        .flat_map(|s| std::iter::once(&s.context).chain(&s.responses))
        .flat_map(|t| t.split_whitespace().map(str::to_lowercase))
        .collect()
}

/// Rows of (context, response) pairs, PAD-right in both matrices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub contexts: Vec<Vec<usize>>,
    pub responses: Vec<Vec<usize>>,
    pub context_lengths: Vec<usize>,
    pub response_lengths: Vec<usize>,
}

impl Batch {
    pub fn from_pairs(pairs: &[(&[usize], &[usize])]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        for (c, r) in pairs {
            validate_sequence(c)?;
            validate_sequence(r)?;
        }
        let pad = |seqs: Vec<&[usize]>| {
            let width = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
            let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
            let rows = seqs
                .into_iter()
                .map(|s| {
                    let mut row = s.to_vec();
                    row.resize(width, PAD);
                    row
                })
                .collect();
            (rows, lengths)
        };
        let (contexts, context_lengths) = pad(pairs.iter().map(|p| p.0).collect());
        let (responses, response_lengths) = pad(pairs.iter().map(|p| p.1).collect());
        Ok(Batch {
            contexts,
            responses,
            context_lengths,
            response_lengths,
        })
    }

    pub fn size(&self) -> usize {
        self.contexts.len()
    }

    pub fn context(&self, i: usize) -> &[usize] {
        &self.contexts[i][..self.context_lengths[i]]
    }

    pub fn response(&self, i: usize) -> &[usize] {
        &self.responses[i][..self.response_lengths[i]]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Pairing {
    /// Every reference becomes its own row.
    #[default]
    Flatten,
    /// One reference drawn per context.
    SampleOne,
}

/// Shuffled batches of `batch_size` rows; a trailing batch with fewer than 2 rows is dropped.
pub fn make_batches(samples: &[MultiRefSample], batch_size: usize, pairing: Pairing, seed: u64) -> Result<Vec<Batch>> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be at least 2, got {batch_size}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs: Vec<(&[usize], &[usize])> = match pairing {
        Pairing::Flatten => samples
            .iter()
            .flat_map(|s| s.responses.iter().map(move |r| (s.context.as_slice(), r.as_slice())))
            .collect(),
        Pairing::SampleOne => samples
            .iter()
            .filter(|s| !s.responses.is_empty())
            .map(|s| (s.context.as_slice(), s.responses[rng.gen_range(0..s.responses.len())].as_slice()))
            .collect(),
    };
    pairs.shuffle(&mut rng);
    pairs
        .chunks(batch_size)
        .filter(|c| c.len() >= 2)
        .map(Batch::from_pairs)
        .collect()
}
