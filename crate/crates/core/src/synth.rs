//! Deterministic planted-alignment corpora.
//!
//! Every pair belongs to a class. Its video is the class's frame template
//! plus a per-class temporal drift plus Gaussian pixel noise. Its caption
//! samples words from the class vocabulary; its subtitle samples from the
//! same class vocabulary mixed with a shared distractor vocabulary, the
//! mixing weight being `subtitle_noise`.
//!
//! On disk a dataset is a directory with `manifest.json` (spec, per-record
//! class and texts, video shape) and `videos.bin`, the videos as one flat
//! little-endian `f32` array in record order. Pixel values are generated at
//! `f32` precision so loading reproduces them exactly.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{sub_seed, TextCorpus};
use crate::tensor::Tensor;
use crate::text::ToyTokenizer;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub n_pairs: usize,
    pub n_classes: usize,
    pub frames: usize,
    pub patches: usize,
    pub patch_pixels: usize,
    pub subtitle_noise: f64,
    pub caption_noise: f64,
    pub seed: u64,
    pub words_per_class: usize,
    pub distractor_words: usize,
    pub subtitle_len: usize,
    pub caption_len: usize,
    pub pixel_noise: f64,
    pub drift: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_pairs: 640,
            n_classes: 32,
            frames: 4,
            patches: 16,
            patch_pixels: 192,
            subtitle_noise: 0.5,
            caption_noise: 0.0,
            seed: 0,
            words_per_class: 8,
            distractor_words: 256,
            subtitle_len: 8,
            caption_len: 8,
            pixel_noise: 0.5,
            drift: 0.5,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.n_pairs == 0 || self.n_classes == 0 || self.n_classes > self.n_pairs {
            return bad("need 1 <= n_classes <= n_pairs");
        }
        if !(0.0..=1.0).contains(&self.subtitle_noise) || !(0.0..=1.0).contains(&self.caption_noise) {
            return bad("noise fractions must lie in [0, 1]");
        }
        if self.frames == 0 || self.patches == 0 || self.patch_pixels == 0 {
            return bad("frames, patches and patch_pixels must be positive");
        }
        if self.words_per_class == 0 || self.distractor_words == 0 {
            return bad("vocabularies must be non-empty");
        }
        if self.pixel_noise < 0.0 {
            return bad("pixel_noise must be non-negative");
        }
        Ok(())
    }

    pub fn middle_frame_index(&self) -> usize {
        self.frames / 2
    }

    pub fn class_word(class: usize, k: usize) -> String {
        format!("c{class}w{k}")
    }

    pub fn distractor_word(k: usize) -> String {
        format!("d{k}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthRecord {
    pub class: usize,
    /// `[T, N, patch_pixels]`
    pub video: Tensor,
    pub subtitle: String,
    pub caption: String,
}

impl SynthRecord {
    pub fn middle_frame(&self) -> Tensor {
        let (t, n, p) = (self.video.shape()[0], self.video.shape()[1], self.video.shape()[2]);
        let m = t / 2;
        Tensor::new(vec![n, p], self.video.data()[m * n * p..(m + 1) * n * p].to_vec()).expect("shape")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub records: Vec<SynthRecord>,
}

/// Tensors and token ids for a set of records.
#[derive(Debug, Clone)]
pub struct VideoBatch {
    pub videos: Vec<Tensor>,
    pub middle_frames: Vec<Tensor>,
    pub subtitle_ids: Vec<Vec<u32>>,
    pub caption_ids: Vec<Vec<u32>>,
    pub class_labels: Vec<usize>,
}

impl VideoBatch {
    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }
}

fn rounded(x: f64) -> f64 {
    x as f32 as f64
}

struct ClassTemplates {
    base: Vec<Vec<f64>>,
    drift: Vec<Vec<f64>>,
}

fn templates(spec: &SynthSpec) -> ClassTemplates {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, u64::MAX));
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let size = spec.patches * spec.patch_pixels;
    let mut draw = |scale: f64| -> Vec<f64> { (0..size).map(|_| scale * unit.sample(&mut rng)).collect() };
    let base = (0..spec.n_classes).map(|_| draw(1.0)).collect();
    let drift = (0..spec.n_classes).map(|_| draw(spec.drift)).collect();
    ClassTemplates { base, drift }
}

fn sentence(
    rng: &mut ChaCha8Rng,
    len: usize,
    class: usize,
    noise: f64,
    spec: &SynthSpec,
) -> String {
    let words: Vec<String> = (0..len)
        .map(|_| {
            if rng.random::<f64>() < noise {
                SynthSpec::distractor_word(rng.random_range(0..spec.distractor_words))
            } else {
                SynthSpec::class_word(class, rng.random_range(0..spec.words_per_class))
            }
        })
        .collect();
    words.join(" ")
}

fn make_record(spec: &SynthSpec, tpl: &ClassTemplates, index: usize, class: usize) -> SynthRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, index as u64));
    let noise = Normal::new(0.0, spec.pixel_noise.max(f64::MIN_POSITIVE)).expect("noise std");
    let size = spec.patches * spec.patch_pixels;
    let centre = (spec.frames as f64 - 1.0) / 2.0;
    let mut data = Vec::with_capacity(spec.frames * size);
    for t in 0..spec.frames {
        let offset = (t as f64 - centre) / spec.frames as f64;
        for i in 0..size {
            let px = tpl.base[class][i] + offset * tpl.drift[class][i];
            let px = if spec.pixel_noise > 0.0 { px + noise.sample(&mut rng) } else { px };
            data.push(rounded(px));
        }
    }
    let video = Tensor::new(vec![spec.frames, spec.patches, spec.patch_pixels], data).expect("shape");
    let caption = sentence(&mut rng, spec.caption_len, class, spec.caption_noise, spec);
    let subtitle = sentence(&mut rng, spec.subtitle_len, class, spec.subtitle_noise, spec);
    SynthRecord { class, video, subtitle, caption }
}

/// Generates the dataset described by `spec`. Records are a pure function
/// of `(spec, index)`, so any partition of the index space can be generated
/// independently.
pub fn generate(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let tpl = templates(spec);
    let mut classes: Vec<usize> = (0..spec.n_pairs).map(|i| i % spec.n_classes).collect();
    classes.shuffle(&mut ChaCha8Rng::seed_from_u64(sub_seed(spec.seed, u64::MAX - 1)));
    let records = classes
        .iter()
        .enumerate()
        .map(|(i, &c)| make_record(spec, &tpl, i, c))
        .collect();
    Ok(SynthDataset { spec: spec.clone(), records })
}

impl SynthDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn batch(&self, indices: &[usize], tokenizer: &ToyTokenizer) -> VideoBatch {
        let recs: Vec<&SynthRecord> = indices.iter().map(|&i| &self.records[i]).collect();
        VideoBatch {
            videos: recs.iter().map(|r| r.video.clone()).collect(),
            middle_frames: recs.iter().map(|r| r.middle_frame()).collect(),
            subtitle_ids: recs.iter().map(|r| tokenizer.tokenize(&r.subtitle)).collect(),
            caption_ids: recs.iter().map(|r| tokenizer.tokenize(&r.caption)).collect(),
            class_labels: recs.iter().map(|r| r.class).collect(),
        }
    }

    pub fn subtitle_corpus(&self, name: &str) -> Result<TextCorpus> {
        TextCorpus::new(name, self.records.iter().map(|r| r.subtitle.clone()).collect())
    }

    pub fn caption_corpus(&self, name: &str) -> Result<TextCorpus> {
        TextCorpus::new(name, self.records.iter().map(|r| r.caption.clone()).collect())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut bytes = Vec::new();
        for r in &self.records {
            for &v in r.video.data() {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        let manifest = DatasetManifest {
            format: DATASET_FORMAT.into(),
            spec: self.spec.clone(),
            video_shape: vec![self.spec.frames, self.spec.patches, self.spec.patch_pixels],
            records: self
                .records
                .iter()
                .map(|r| RecordEntry { class: r.class, subtitle: r.subtitle.clone(), caption: r.caption.clone() })
                .collect(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        fs::write(dir.join("videos.bin"), bytes)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: DatasetManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
        if manifest.format != DATASET_FORMAT {
            return Err(Error::Input(format!("unknown dataset format {}", manifest.format)));
        }
        let per: usize = manifest.video_shape.iter().product();
        let bytes = fs::read(dir.join("videos.bin"))?;
        if bytes.len() != per * manifest.records.len() * 4 {
            return Err(Error::Input("videos.bin size does not match manifest".into()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        let records = manifest
            .records
            .into_iter()
            .enumerate()
            .map(|(i, e)| {
                let video = Tensor::new(manifest.video_shape.clone(), values[i * per..(i + 1) * per].to_vec())?;
                Ok(SynthRecord { class: e.class, video, subtitle: e.subtitle, caption: e.caption })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { spec: manifest.spec, records })
    }
}

pub const DATASET_FORMAT: &str = "proxyvid-dataset/1";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RecordEntry {
    class: usize,
    subtitle: String,
    caption: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    format: String,
    spec: SynthSpec,
    video_shape: Vec<usize>,
    records: Vec<RecordEntry>,
}
