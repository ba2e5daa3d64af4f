//! Language domain-gap probe: cluster a mixture of two text corpora into two
//! groups and score how well the clusters recover corpus origin with NMI.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DualEncoder;
use crate::tensor::Tensor;
use crate::text::fnv1a;

#[derive(Debug, Clone, PartialEq)]
pub struct TextCorpus {
    pub name: String,
    pub texts: Vec<String>,
}

impl TextCorpus {
    pub fn new(name: impl Into<String>, texts: Vec<String>) -> Result<Self> {
        let name = name.into();
        if texts.is_empty() {
            return Err(Error::Input(format!("corpus {name:?} is empty")));
        }
        Ok(Self { name, texts })
    }

    /// One text per line; blank lines are skipped.
    pub fn from_file(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path)?;
        let texts = raw.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect();
        let name = path.file_stem().map_or_else(|| "corpus".into(), |s| s.to_string_lossy().into_owned());
        Self::new(name, texts)
    }

    fn fingerprint(&self) -> u64 {
        let mut h = 0u64;
        for t in &self.texts {
            h = h.rotate_left(7) ^ fnv1a(t.as_bytes());
        }
        h
    }
}

/// Maps texts to fixed-dimension feature rows.
pub trait FeatureProvider {
    fn name(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, texts: &[&str]) -> Result<Tensor>;
}

/// Unit-normalised bag of hashed lowercase words.
#[derive(Debug, Clone, Copy)]
pub struct HashingBagOfWords {
    pub dim: usize,
}

impl Default for HashingBagOfWords {
    fn default() -> Self {
        Self { dim: 1024 }
    }
}

impl FeatureProvider for HashingBagOfWords {
    fn name(&self) -> String {
        format!("hashing_bow_{}", self.dim)
    }

    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Tensor> {
        let mut data = vec![0.0; texts.len() * self.dim];
        for (r, text) in texts.iter().enumerate() {
            let row = &mut data[r * self.dim..(r + 1) * self.dim];
            for word in text.to_lowercase().split_whitespace() {
                row[(fnv1a(word.as_bytes()) % self.dim as u64) as usize] += 1.0;
            }
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 0.0 {
                row.iter_mut().for_each(|x| *x /= norm);
            }
        }
        Tensor::new(vec![texts.len(), self.dim], data)
    }
}

/// Text-tower embeddings of a (possibly untrained) dual encoder.
pub struct TextEncoderProvider<'a> {
    pub model: &'a DualEncoder,
    pub label: String,
}

impl FeatureProvider for TextEncoderProvider<'_> {
    fn name(&self) -> String {
        format!("text_encoder:{}", self.label)
    }

    fn dim(&self) -> usize {
        self.model.config().text.embed_dim
    }

    fn embed(&self, texts: &[&str]) -> Result<Tensor> {
        let tok = self.model.config().text.tokenizer();
        let ids: Vec<Vec<u32>> = texts.iter().map(|t| tok.tokenize(t)).collect();
        let refs: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
        self.model.encode_texts(&refs)
    }
}

pub fn embed_texts(corpus: &TextCorpus, provider: &dyn FeatureProvider) -> Result<Tensor> {
    if corpus.texts.is_empty() {
        return Err(Error::Input(format!("corpus {:?} is empty", corpus.name)));
    }
    let refs: Vec<&str> = corpus.texts.iter().map(String::as_str).collect();
    provider.embed(&refs)
}

// ---------------------------------------------------------------------------
// k-means

pub const KMEANS_MAX_ITERS: usize = 100;
pub const KMEANS_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(x, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seed(x: &Tensor, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = x.rows();
    let mut centroids = vec![x.row(rng.random_range(0..n)).to_vec()];
    let mut d2: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = n - 1;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = x.row(pick).to_vec();
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), &c));
        }
        centroids.push(c);
    }
    centroids
}

fn lloyd(x: &Tensor, mut centroids: Vec<Vec<f64>>) -> KMeansResult {
    let (n, d) = (x.rows(), x.cols());
    let k = centroids.len();
    let mut labels = vec![0; n];
    let mut iterations = 0;
    for _ in 0..KMEANS_MAX_ITERS {
        iterations += 1;
        let mut dists = vec![0.0; n];
        for i in 0..n {
            let (c, dist) = nearest(x.row(i), &centroids);
            labels[i] = c;
            dists[i] = dist;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(x.row(i)) {
                *s += v;
            }
        }
        let mut next = Vec::with_capacity(k);
        for c in 0..k {
            if counts[c] > 0 {
                next.push(sums[c].iter().map(|s| s / counts[c] as f64).collect::<Vec<_>>());
            } else {
                // Re-seed an empty cluster at the point farthest from its centroid.
                let far = (0..n).max_by(|&a, &b| dists[a].total_cmp(&dists[b])).unwrap_or(0);
                dists[far] = 0.0;
                next.push(x.row(far).to_vec());
            }
        }
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < KMEANS_TOLERANCE {
            break;
        }
    }
    let mut inertia = 0.0;
    for (i, label) in labels.iter_mut().enumerate() {
        let (c, dist) = nearest(x.row(i), &centroids);
        *label = c;
        inertia += dist;
    }
    KMeansResult { labels, centroids, inertia, iterations }
}

/// Lloyd's algorithm with k-means++ seeding; the lowest-inertia labelling
/// over `restarts` runs is returned.
pub fn kmeans(features: &Tensor, k: usize, restarts: usize, seed: u64) -> Result<KMeansResult> {
    let n = features.rows();
    if k == 0 || n < k {
        return Err(Error::Input(format!("k-means needs 1 <= k <= rows (k = {k}, rows = {n})")));
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, r as u64));
        let run = lloyd(features, plus_plus_seed(features, k, &mut rng));
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

pub(crate) fn sub_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 of the pair
    let mut z = seed ^ index.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(0x632b_e59b_d9b4_e019);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

// ---------------------------------------------------------------------------
// NMI

fn entropy(counts: impl Iterator<Item = usize>, n: f64) -> f64 {
    counts
        .filter(|&c| c > 0)
        .map(|c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// `2 I(A;B) / (H(A) + H(B))` in nats; two single-block partitions score 1.
pub fn nmi(labels_a: &[usize], labels_b: &[usize]) -> Result<f64> {
    if labels_a.len() != labels_b.len() {
        return Err(Error::Input(format!("label lengths differ: {} vs {}", labels_a.len(), labels_b.len())));
    }
    if labels_a.is_empty() {
        return Err(Error::Input("labels are empty".into()));
    }
    let n = labels_a.len() as f64;
    let mut joint: HashMap<(usize, usize), usize> = HashMap::new();
    let mut ca: HashMap<usize, usize> = HashMap::new();
    let mut cb: HashMap<usize, usize> = HashMap::new();
    for (&a, &b) in labels_a.iter().zip(labels_b) {
        *joint.entry((a, b)).or_default() += 1;
        *ca.entry(a).or_default() += 1;
        *cb.entry(b).or_default() += 1;
    }
    let ha = entropy(sorted_counts(&ca), n);
    let hb = entropy(sorted_counts(&cb), n);
    if ha + hb == 0.0 {
        return Ok(1.0);
    }
    let mut keys: Vec<_> = joint.keys().copied().collect();
    keys.sort_unstable();
    let mut mi = 0.0;
    for key in keys {
        let pab = joint[&key] as f64 / n;
        let pa = ca[&key.0] as f64 / n;
        let pb = cb[&key.1] as f64 / n;
        mi += pab * (pab / (pa * pb)).ln();
    }
    Ok((2.0 * mi / (ha + hb)).clamp(0.0, 1.0))
}

fn sorted_counts(m: &HashMap<usize, usize>) -> std::vec::IntoIter<usize> {
    let mut keys: Vec<_> = m.keys().copied().collect();
    keys.sort_unstable();
    keys.into_iter().map(|k| m[&k]).collect::<Vec<_>>().into_iter()
}

// ---------------------------------------------------------------------------
// probe

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub sample_size: usize,
    pub repeats: usize,
    pub k: usize,
    pub kmeans_restarts: usize,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { sample_size: 1000, repeats: 10, k: 2, kmeans_restarts: 8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub corpus_a: String,
    pub corpus_b: String,
    pub mean_nmi: f64,
    /// Population standard deviation over repeats.
    pub std_nmi: f64,
    pub repeats: usize,
    pub sample_size: usize,
    pub provider: String,
    /// Set when a corpus was smaller than the sample size.
    pub sampled_with_replacement: bool,
    pub per_repeat: Vec<f64>,
}

fn draw(n: usize, size: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, bool) {
    if size <= n {
        (sample(rng, n, size).into_vec(), false)
    } else {
        ((0..size).map(|_| rng.random_range(0..n)).collect(), true)
    }
}

/// Repeatedly samples both corpora, clusters the pooled features and scores
/// cluster labels against corpus-origin labels.
///
/// Each corpus draws its sample from a stream keyed by its own contents and
/// the pooled order is canonical, so swapping the arguments gives the same
/// scores.
pub fn probe(
    corpus_a: &TextCorpus,
    corpus_b: &TextCorpus,
    config: &ProbeConfig,
    provider: &dyn FeatureProvider,
) -> Result<ProbeReport> {
    if config.sample_size == 0 || config.repeats == 0 || config.k == 0 {
        return Err(Error::Config("sample_size, repeats and k must be positive".into()));
    }
    let feats_a = embed_texts(corpus_a, provider)?;
    let feats_b = embed_texts(corpus_b, provider)?;
    let (fa, fb) = (corpus_a.fingerprint(), corpus_b.fingerprint());
    let (first, second) = if fa <= fb { ((&feats_a, fa), (&feats_b, fb)) } else { ((&feats_b, fb), (&feats_a, fa)) };

    let dim = feats_a.cols();
    let mut per_repeat = Vec::with_capacity(config.repeats);
    let mut replaced = false;
    for r in 0..config.repeats {
        let repeat_seed = sub_seed(config.seed, r as u64);
        let mut pooled = Vec::with_capacity(2 * config.sample_size * dim);
        let mut origin = Vec::with_capacity(2 * config.sample_size);
        for (label, (feats, fp)) in [first, second].into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(repeat_seed, fp ^ (label as u64 * u64::from(fa == fb))));
            let (idx, rep) = draw(feats.rows(), config.sample_size, &mut rng);
            replaced |= rep;
            for i in idx {
                pooled.extend_from_slice(feats.row(i));
                origin.push(label);
            }
        }
        let x = Tensor::new(vec![origin.len(), dim], pooled)?;
        let km = kmeans(&x, config.k, config.kmeans_restarts, repeat_seed)?;
        per_repeat.push(nmi(&km.labels, &origin)?);
    }
    let mean = per_repeat.iter().sum::<f64>() / per_repeat.len() as f64;
    let var = per_repeat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / per_repeat.len() as f64;
    Ok(ProbeReport {
        corpus_a: corpus_a.name.clone(),
        corpus_b: corpus_b.name.clone(),
        mean_nmi: mean,
        std_nmi: var.sqrt(),
        repeats: config.repeats,
        sample_size: config.sample_size,
        provider: provider.name(),
        sampled_with_replacement: replaced,
        per_repeat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nmi_identical_and_swapped() {
        let a = [0, 0, 1, 1, 2];
        assert!((nmi(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert!((nmi(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn nmi_degenerate_partitions() {
        assert_eq!(nmi(&[3, 3, 3], &[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0, 0], &[0, 1, 0, 1]).unwrap(), 0.0);
    }

    #[test]
    fn nmi_length_mismatch() {
        assert!(matches!(nmi(&[0, 1], &[0]), Err(Error::Input(_))));
    }

    #[test]
    fn nmi_hand_value() {
        // A = [0,0,1,1], B = [0,1,1,1]
        let (ha, hb) = (std::f64::consts::LN_2, -(0.25f64 * 0.25f64.ln() + 0.75 * 0.75f64.ln()));
        let mi = 0.25 * (0.25f64 / (0.5 * 0.25)).ln()
            + 0.25 * (0.25f64 / (0.5 * 0.75)).ln()
            + 0.5 * (0.5f64 / (0.5 * 0.75)).ln();
        let want = 2.0 * mi / (ha + hb);
        assert!((nmi(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn kmeans_k1_and_too_few_rows() {
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![5.0]]).unwrap();
        assert_eq!(kmeans(&x, 1, 2, 0).unwrap().labels, vec![0, 0, 0]);
        assert!(kmeans(&x, 4, 2, 0).is_err());
    }

    #[test]
    fn kmeans_identical_rows() {
        let x = Tensor::full(&[6, 3], 0.5);
        let r = kmeans(&x, 2, 3, 1).unwrap();
        assert_eq!(r.labels.len(), 6);
        assert!(r.labels.iter().all(|&l| l < 2));
        assert_eq!(r.inertia, 0.0);
    }

    #[test]
    fn bow_is_order_free() {
        let p = HashingBagOfWords::default();
        let t = p.embed(&["a b", "b a", "A  B"]).unwrap();
        assert_eq!(t.row(0), t.row(1));
        assert_eq!(t.row(0), t.row(2));
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(TextCorpus::new("x", vec![]).is_err());
    }
}
