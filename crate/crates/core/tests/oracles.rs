//! Library results checked against the independent implementations in `common`.

mod common;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::{bleu_oracle, fuse_oracle, total_loss_oracle, Oracle};
use spacefusion::corpus::{Batch, EOS};
use spacefusion::diagnostics::{mds_2d, silhouette};
use spacefusion::metrics::bleu4;
use spacefusion::model::{loss_fuse, LatentVector, LossSampler, ModelConfig, SpaceFusionModel};

const WORDS: [&str; 6] = ["a", "b", "c", "d", "e", "f"];

fn random_sentence(rng: &mut ChaCha8Rng, max: usize) -> Vec<&'static str> {
    let n = rng.gen_range(1..=max);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect()
}

#[test]
fn bleu_matches_brute_force_on_random_pairs() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..20 {
        let r = random_sentence(&mut rng, 12);
        let h = random_sentence(&mut rng, 12);
        let (got, want) = (bleu4(&r, &h), bleu_oracle(&r, &h));
        assert!((got - want).abs() < 1e-9, "{r:?} / {h:?}: {got} vs {want}");
    }
    let (r, h) = (["a", "b", "c", "d", "e"], ["a", "b", "c", "d"]);
    assert!((bleu4(&r, &h) - bleu_oracle(&r, &h)).abs() < 1e-9);
}

#[test]
fn fuse_hand_batch() {
    let s = vec![LatentVector(vec![0.0]), LatentVector(vec![10.0])];
    assert_eq!(loss_fuse(&s, &s, 0.3).unwrap(), -0.6);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut cloud = |n: usize| -> Vec<Vec<f64>> { (0..n).map(|_| (0..4).map(|_| rng.gen_range(-0.4..0.4)).collect()).collect() };
    let (a, b) = (cloud(5), cloud(5));
    let wrap = |v: &[Vec<f64>]| v.iter().cloned().map(LatentVector).collect::<Vec<_>>();
    let got = loss_fuse(&wrap(&a), &wrap(&b), 0.3).unwrap();
    assert!((got - fuse_oracle(&a, &b, 0.3)).abs() < 1e-12);
}

fn toy_model(regularized: bool) -> SpaceFusionModel {
    let mut cfg = ModelConfig::desk(20).with_hidden(8);
    cfg.embedding_dim = 8;
    cfg.seed = 3;
    cfg.regularization_enabled = regularized;
    let mut m = SpaceFusionModel::new(cfg).unwrap();
    // larger weights so the loss is not dominated by the uniform-output regime
    let ids: Vec<_> = m.params().ids().collect();
    for id in ids {
        for v in m.params_mut().value_mut(id).data_mut() {
            *v *= 8.0;
        }
    }
    m
}

fn toy_pairs() -> Vec<(Vec<usize>, Vec<usize>)> {
    vec![
        (vec![4, 5, 6, EOS], vec![7, 8, EOS]),
        (vec![9, 10, EOS], vec![11, 12, 13, 14, EOS]),
    ]
}

#[test]
fn total_loss_matches_composed_oracle() {
    for reg in [true, false] {
        let model = toy_model(reg);
        let pairs = toy_pairs();
        let refs: Vec<(&[usize], &[usize])> = pairs.iter().map(|(x, y)| (x.as_slice(), y.as_slice())).collect();
        let batch = Batch::from_pairs(&refs).unwrap();
        let got = model.total_loss(&batch, &mut LossSampler::new(17).without_noise()).unwrap();
        let want = total_loss_oracle(&Oracle::new(&model), &pairs, &got.us);
        assert!((got.total - want).abs() < 1e-8, "reg={reg}: {} vs {want}", got.total);
        assert!((got.weighted_sum(model.config()) - got.total).abs() < 1e-10);
    }
}

#[test]
fn encoders_and_decoder_match_oracle() {
    let model = toy_model(true);
    let o = Oracle::new(&model);
    for (x, y) in toy_pairs() {
        let zx = model.encode_contexts(&[&x]).unwrap().remove(0);
        let zy = model.encode_responses(&[&y]).unwrap().remove(0);
        for (a, b) in zx.0.iter().zip(o.encode("context", &x)) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in zy.0.iter().zip(o.encode("response", &y)) {
            assert!((a - b).abs() < 1e-12);
        }
        let lp = model.decode_mean_log_prob(&zx, &y).unwrap();
        assert!((lp - o.mean_log_prob(&zx.0, &y)).abs() < 1e-12);
    }
}

fn gaussian_cloud(rng: &mut ChaCha8Rng, n: usize, dim: usize, shift: f64) -> Vec<LatentVector> {
    (0..n)
        .map(|_| LatentVector((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal) + shift).collect()))
        .collect()
}

/// Classical MDS through nalgebra's dense symmetric eigensolver, with the same sign convention.
fn mds_reference(points: &[LatentVector]) -> Vec<[f64; 2]> {
    let n = points.len();
    let d2 = DMatrix::from_fn(n, n, |i, j| {
        points[i].0.iter().zip(&points[j].0).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
    });
    let j = DMatrix::identity(n, n) - DMatrix::from_element(n, n, 1.0 / n as f64);
    let b = -0.5 * &j * d2 * &j;
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].partial_cmp(&eig.eigenvalues[a]).unwrap());
    let mut out = vec![[0.0; 2]; n];
    for axis in 0..2 {
        let k = order[axis];
        let lambda = eig.eigenvalues[k];
        let v = eig.eigenvectors.column(k);
        let sign = v.iter().find(|x| x.abs() > 1e-12).map_or(1.0, |x| x.signum());
        for i in 0..n {
            out[i][axis] = sign * lambda.sqrt() * v[i];
        }
    }
    out
}

#[test]
fn mds_matches_dense_eigensolver() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for dim in [3, 6] {
        let pts = gaussian_cloud(&mut rng, 10, dim, 0.0);
        let got = mds_2d(&pts).unwrap();
        let want = mds_reference(&pts);
        for (g, w) in got.iter().zip(&want) {
            assert!((g[0] - w[0]).abs() < 1e-8 && (g[1] - w[1]).abs() < 1e-8, "{g:?} vs {w:?}");
        }
    }
}

#[test]
fn silhouette_of_one_shared_distribution_is_near_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut pts = gaussian_cloud(&mut rng, 400, 8, 0.0);
    pts.extend(gaussian_cloud(&mut rng, 400, 8, 0.0));
    let labels: Vec<usize> = (0..800).map(|i| usize::from(i >= 400)).collect();
    let s = silhouette(&pts, &labels).unwrap();
    assert!(s.abs() < 0.02, "{s}");

    let mut far = gaussian_cloud(&mut rng, 50, 8, 0.0);
    far.extend(gaussian_cloud(&mut rng, 50, 8, 40.0));
    let labels: Vec<usize> = (0..100).map(|i| usize::from(i >= 50)).collect();
    assert!(silhouette(&far, &labels).unwrap() > 0.9);
}
