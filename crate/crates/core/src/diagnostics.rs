//! Latent geometry diagnostics: direction cosines between response offsets,
//! perplexity along the `z_s2s -> z_ae` path, interpolation decode tables,
//! classical MDS scatter and a silhouette statistic for how well the two
//! latent spaces mix.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{MultiRefSample, EOS};
use crate::error::{Error, Result};
use crate::inference::DEFAULT_MAX_DECODE_LEN;
use crate::model::{interpolate, rms_distance, LatentVector, SpaceFusionModel};

pub const COSINE_BIN_WIDTH: f64 = 0.02;
pub const DEFAULT_MAX_CONTEXTS: usize = 1000;
pub const DEFAULT_MAX_PAIRS: usize = 1000;

/// 0, 0.1, ..., 1.0
pub fn default_u_grid() -> Vec<f64> {
    (0..=10).map(|i| i as f64 / 10.0).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Histogram {
    pub bin_width: f64,
    /// Left edge of each bin.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
    /// Pairs dropped because a difference vector had zero norm.
    pub skipped: usize,
}

impl Histogram {
    /// Uniform bins of `bin_width` over [-1, 1]; 1.0 falls in the last bin.
    pub fn of_cosines(values: &[f64], bin_width: f64, skipped: usize) -> Self {
        let bins = (2.0 / bin_width).round() as usize;
        let edges = (0..bins).map(|i| -1.0 + i as f64 * bin_width).collect();
        let mut counts = vec![0; bins];
        for &v in values {
            let b = (((v + 1.0) / bin_width).floor() as isize).clamp(0, bins as isize - 1);
            counts[b as usize] += 1;
        }
        let mean = if values.is_empty() {
            f64::NAN
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        Histogram {
            bin_width,
            edges,
            counts,
            mean,
            skipped,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# bin_width={} pairs={} skipped={} mean={:.6}\nbin_left,count\n",
            self.bin_width,
            self.total(),
            self.skipped,
            self.mean
        );
        for (e, c) in self.edges.iter().zip(&self.counts) {
            out.push_str(&format!("{e:.2},{c}\n"));
        }
        out
    }
}

fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Some((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine between `z_ae(y_i) - z_s2s(x)` and `z_ae(y_j) - z_s2s(x)` for every
/// pair of responses of the first `max_contexts` multi-reference samples.
pub fn direction_cosines(model: &SpaceFusionModel, samples: &[MultiRefSample], max_contexts: usize) -> Result<Histogram> {
    let used: Vec<&MultiRefSample> = samples.iter().filter(|s| s.responses.len() >= 2).take(max_contexts).collect();
    if used.is_empty() {
        return Err(Error::Data("direction cosines need samples with at least 2 references".into()));
    }
    let contexts: Vec<&[usize]> = used.iter().map(|s| s.context.as_slice()).collect();
    let zx = model.encode_contexts(&contexts)?;
    let mut values = Vec::new();
    let mut skipped = 0;
    for (s, z) in used.iter().zip(&zx) {
        let responses: Vec<&[usize]> = s.responses.iter().map(Vec::as_slice).collect();
        let diffs: Vec<LatentVector> = model.encode_responses(&responses)?.iter().map(|y| y.sub(z)).collect();
        for i in 0..diffs.len() {
            for j in i + 1..diffs.len() {
                match cosine(diffs[i].as_slice(), diffs[j].as_slice()) {
                    Some(c) => values.push(c),
                    None => skipped += 1,
                }
            }
        }
    }
    Ok(Histogram::of_cosines(&values, COSINE_BIN_WIDTH, skipped))
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCurve {
    pub grid: Vec<f64>,
    pub mean_perplexity: Vec<f64>,
    /// `raw[g][p]`: perplexity of pair `p` at grid point `g`.
    pub raw: Vec<Vec<f64>>,
}

impl SweepCurve {
    pub fn area(&self) -> f64 {
        trapezoid(&self.grid, &self.mean_perplexity)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("u,mean_perplexity\n");
        for (u, p) in self.grid.iter().zip(&self.mean_perplexity) {
            out.push_str(&format!("{u:.2},{p:.6}\n"));
        }
        out
    }
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2)
        .zip(y.windows(2))
        .map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1]))
        .sum()
}

/// Every (context, response) pair of the samples, in order.
pub fn flatten_pairs(samples: &[MultiRefSample]) -> Vec<(&[usize], &[usize])> {
    samples
        .iter()
        .flat_map(|s| s.responses.iter().map(move |r| (s.context.as_slice(), r.as_slice())))
        .collect()
}

/// Perplexity of each reference decoded from `interpolate(z_s2s(x), z_ae(y), u)`.
pub fn interpolation_perplexity(model: &SpaceFusionModel, samples: &[MultiRefSample], grid: &[f64]) -> Result<SweepCurve> {
    let pairs = flatten_pairs(samples);
    if pairs.is_empty() {
        return Err(Error::Data("perplexity sweep needs at least one pair".into()));
    }
    let contexts: Vec<&[usize]> = pairs.iter().map(|p| p.0).collect();
    let targets: Vec<&[usize]> = pairs.iter().map(|p| p.1).collect();
    let zx = model.encode_contexts(&contexts)?;
    let zy = model.encode_responses(&targets)?;
    let mut raw = Vec::with_capacity(grid.len());
    let mut mean_perplexity = Vec::with_capacity(grid.len());
    for &u in grid {
        let zs = zx.iter().zip(&zy).map(|(a, b)| interpolate(a, b, u)).collect::<Result<Vec<_>>>()?;
        let ppl: Vec<f64> = model.decode_mean_log_probs(&zs, &targets)?.into_iter().map(|lp| (-lp).exp()).collect();
        mean_perplexity.push(ppl.iter().sum::<f64>() / ppl.len() as f64);
        raw.push(ppl);
    }
    Ok(SweepCurve {
        grid: grid.to_vec(),
        mean_perplexity,
        raw,
    })
}

/// Greedy decodes along the interpolation path, keeping only the grid points
/// where the output changes.
pub fn interpolation_table(model: &SpaceFusionModel, context: &[usize], target: &[usize], grid: &[f64]) -> Result<Vec<(f64, Vec<usize>)>> {
    let zx = model.encode_contexts(&[context])?.remove(0);
    let zy = model.encode_responses(&[target])?.remove(0);
    let zs = grid.iter().map(|&u| interpolate(&zx, &zy, u)).collect::<Result<Vec<_>>>()?;
    let decoded = model.greedy_decode_batch(&zs, DEFAULT_MAX_DECODE_LEN)?;
    let mut rows: Vec<(f64, Vec<usize>)> = Vec::new();
    for (&u, mut tokens) in grid.iter().zip(decoded) {
        if let Some(p) = tokens.iter().position(|&t| t == EOS) {
            tokens.truncate(p + 1);
        }
        if rows.last().map(|r| &r.1) != Some(&tokens) {
            rows.push((u, tokens));
        }
    }
    Ok(rows)
}

/// Top `k` eigenpairs (largest first) of a symmetric `n x n` matrix.
fn symmetric_top_eigen(m: &[f64], n: usize, k: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let p = (k + 6).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(0x4d44_53);
    let mut q: Vec<Vec<f64>> = (0..p).map(|_| (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    orthonormalize(&mut q, &mut rng);
    let scale = m.iter().fold(0.0f64, |a, &x| a.max(x.abs())).max(1e-300);
    let mut values = vec![0.0; p];
    for _ in 0..10_000 {
        let mut z: Vec<Vec<f64>> = q.iter().map(|v| matvec(m, n, v)).collect();
        orthonormalize(&mut z, &mut rng);
        // Rayleigh-Ritz on the current subspace
        let mz: Vec<Vec<f64>> = z.iter().map(|v| matvec(m, n, v)).collect();
        let mut h = vec![0.0; p * p];
        for i in 0..p {
            for j in 0..p {
                h[i * p + j] = dot(&z[i], &mz[j]);
            }
        }
        let (theta, w) = jacobi_eigen(&mut h, p);
        let mut order: Vec<usize> = (0..p).collect();
        order.sort_by(|&a, &b| theta[b].partial_cmp(&theta[a]).unwrap_or(std::cmp::Ordering::Equal));
        q = order
            .iter()
            .map(|&c| {
                let mut v = vec![0.0; n];
                for (r, zr) in z.iter().enumerate() {
                    let coef = w[r * p + c];
                    for (vi, zi) in v.iter_mut().zip(zr) {
                        *vi += coef * zi;
                    }
                }
                v
            })
            .collect();
        values = order.iter().map(|&c| theta[c]).collect();
        let converged = (0..k.min(p)).all(|i| {
            let mv = matvec(m, n, &q[i]);
            let res = mv.iter().zip(&q[i]).map(|(a, b)| (a - values[i] * b).powi(2)).sum::<f64>().sqrt();
            res <= 1e-12 * scale * n as f64
        });
        if converged {
            break;
        }
    }
    q.truncate(k);
    values.truncate(k);
    (values, q)
}

fn matvec(m: &[f64], n: usize, v: &[f64]) -> Vec<f64> {
    (0..n).map(|i| dot(&m[i * n..(i + 1) * n], v)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Modified Gram-Schmidt; columns that collapse are replaced by fresh random ones.
fn orthonormalize<R: Rng>(vs: &mut [Vec<f64>], rng: &mut R) {
    for i in 0..vs.len() {
        let norm_in = dot(&vs[i], &vs[i]).sqrt();
        for _attempt in 0..8 {
            for j in 0..i {
                let c = dot(&vs[i], &vs[j]);
                let (head, tail) = vs.split_at_mut(i);
                for (x, y) in tail[0].iter_mut().zip(&head[j]) {
                    *x -= c * y;
                }
            }
            let norm = dot(&vs[i], &vs[i]).sqrt();
            if norm > 1e-10 * norm_in.max(1e-300) && norm > 1e-300 {
                vs[i].iter_mut().for_each(|x| *x /= norm);
                break;
            }
            let n = vs[i].len();
            vs[i] = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        }
    }
}

/// Cyclic Jacobi rotations. Returns eigenvalues and the eigenvector matrix
/// (column `c` is the vector of value `c`), row-major `n x n`.
fn jacobi_eigen(a: &mut [f64], n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| a[i * n + j].powi(2)).sum();
        let diag: f64 = (0..n).map(|i| a[i * n + i].powi(2)).sum();
        if off <= 1e-30 * diag.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i * n + i]).collect(), v)
}

/// Classical (Torgerson) MDS into two dimensions. The first nonzero entry of
/// each eigenvector is made positive; an axis with no positive eigenvalue is all zeros.
pub fn mds_2d(points: &[LatentVector]) -> Result<Vec<[f64; 2]>> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Domain(format!("MDS needs at least 3 points, got {n}")));
    }
    let dim = points[0].dim();
    if points.iter().any(|p| p.dim() != dim) {
        return Err(Error::Dimension("MDS points differ in dimension".into()));
    }
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = points[i].0.iter().zip(&points[j].0).map(|(a, b)| (a - b).powi(2)).sum();
            d2[i * n + j] = v;
            d2[j * n + i] = v;
        }
    }
    let row_means: Vec<f64> = (0..n).map(|i| d2[i * n..(i + 1) * n].iter().sum::<f64>() / n as f64).collect();
    let grand = row_means.iter().sum::<f64>() / n as f64;
    let mut b = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            b[i * n + j] = -0.5 * (d2[i * n + j] - row_means[i] - row_means[j] + grand);
        }
    }
    let (values, vectors) = symmetric_top_eigen(&b, n, 2);
    let top = values.first().copied().unwrap_or(0.0).max(0.0);
    let mut out = vec![[0.0; 2]; n];
    for axis in 0..2 {
        let lambda = values.get(axis).copied().unwrap_or(0.0);
        if !(lambda > 1e-10 * top) || lambda <= 0.0 {
            continue;
        }
        let v = &vectors[axis];
        let sign = v.iter().find(|x| x.abs() > 1e-12).map_or(1.0, |x| x.signum());
        let s = lambda.sqrt() * sign;
        for i in 0..n {
            out[i][axis] = s * v[i];
        }
    }
    Ok(out)
}

/// Mean silhouette of a labeling under Euclidean distance. Points in singleton
/// clusters score 0.
pub fn silhouette(points: &[LatentVector], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() {
        return Err(Error::Dimension(format!("{} points but {} labels", points.len(), labels.len())));
    }
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(Error::Domain("silhouette needs at least two labels".into()));
    }
    let dist = |i: usize, j: usize| -> f64 {
        points[i].0.iter().zip(&points[j].0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let mut total = 0.0;
    for i in 0..points.len() {
        let mut sums = vec![0.0; classes.len()];
        let mut counts = vec![0usize; classes.len()];
        for j in 0..points.len() {
            if j == i {
                continue;
            }
            let c = classes.binary_search(&labels[j]).expect("label listed");
            sums[c] += dist(i, j);
            counts[c] += 1;
        }
        let own = classes.binary_search(&labels[i]).expect("label listed");
        if counts[own] == 0 {
            continue;
        }
        let a = sums[own] / counts[own] as f64;
        let b = (0..classes.len())
            .filter(|&c| c != own && counts[c] > 0)
            .map(|c| sums[c] / counts[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(total / points.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    S2s,
    Ae,
}

impl Source {
    pub fn label(self) -> &'static str {
        match self {
            Source::S2s => "s2s",
            Source::Ae => "ae",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionScatter {
    pub points: Vec<([f64; 2], Source)>,
    pub silhouette: f64,
    /// Mean RMS distance between `z_s2s(x_i)` and `z_ae(y_i)`.
    pub mean_matched_distance: f64,
}

impl FusionScatter {
    pub fn to_csv(&self) -> String {
        let mut out = format!("# silhouette={:.6} mean_matched_distance={:.6}\nx,y,source_label\n", self.silhouette, self.mean_matched_distance);
        for (p, s) in &self.points {
            out.push_str(&format!("{:.6},{:.6},{}\n", p[0], p[1], s.label()));
        }
        out
    }
}

/// Encodes up to `max_pairs` randomly chosen (x, y) pairs with both encoders,
/// embeds the union with MDS and scores how separated the two sources are.
pub fn fusion_scatter(model: &SpaceFusionModel, samples: &[MultiRefSample], max_pairs: usize, seed: u64) -> Result<FusionScatter> {
    let mut pairs = flatten_pairs(samples);
    if pairs.len() < 2 {
        return Err(Error::Data("fusion scatter needs at least 2 pairs".into()));
    }
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    pairs.truncate(max_pairs.max(2));
    let contexts: Vec<&[usize]> = pairs.iter().map(|p| p.0).collect();
    let responses: Vec<&[usize]> = pairs.iter().map(|p| p.1).collect();
    let zx = model.encode_contexts(&contexts)?;
    let zy = model.encode_responses(&responses)?;
    let mean_matched_distance = zx
        .iter()
        .zip(&zy)
        .map(|(a, b)| rms_distance(a, b))
        .sum::<Result<f64>>()?
        / zx.len() as f64;
    let mut all = zx;
    all.extend(zy);
    let n = pairs.len();
    let labels: Vec<usize> = (0..2 * n).map(|i| usize::from(i >= n)).collect();
    let coords = mds_2d(&all)?;
    Ok(FusionScatter {
        points: coords
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c, if i < n { Source::S2s } else { Source::Ae }))
            .collect(),
        silhouette: silhouette(&all, &labels)?,
        mean_matched_distance,
    })
}
