//! Training loop, optimizer, evaluation and the gradient-check suite.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcheck::{grad_check_with, GradCheckOptions, Stencil};
use crate::model::{DualEncoder, ModelConfig, OclInputs};
use crate::ocl::OclVariant;
use crate::probe::{sub_seed, ProbeConfig};
use crate::retrieval::{dsl_postprocess, RetrievalMetrics, SimilarityMatrix};
use crate::synth::{SynthDataset, SynthSpec};
use crate::tensor::Tensor;
use crate::text::ToyTokenizer;
use crate::vision::EncoderMode;

/// Which text source plays the query role at evaluation time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    Caption,
    Subtitle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub variant: OclVariant,
    pub mode: EncoderMode,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub seed: u64,
    /// Pairs `0..train_pairs` are trained on; the rest are held out.
    pub train_pairs: usize,
    /// Held-out evaluation every this many steps; 0 evaluates only at the end.
    pub eval_every: usize,
    pub query_source: QuerySource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: OclVariant::DVscFc,
            mode: EncoderMode::Vip,
            batch_size: 32,
            steps: 300,
            learning_rate: 1e-3,
            weight_decay: 1e-2,
            warmup_fraction: 0.1,
            seed: 0,
            train_pairs: 512,
            eval_every: 0,
            query_source: QuerySource::Caption,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} < 2 leaves no negatives", self.batch_size));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive".into());
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> usize {
        ((self.warmup_fraction * self.steps as f64).ceil() as usize).clamp(1, self.steps.max(1))
    }

    /// Learning rate used for update `step` (0-based): linear warmup to the
    /// peak, then cosine decay reaching zero on the final update.
    pub fn learning_rate_at(&self, step: usize) -> f64 {
        let warmup = self.warmup_steps();
        if step < warmup {
            return self.learning_rate * (step + 1) as f64 / warmup as f64;
        }
        let span = (self.steps - warmup) as f64;
        let progress = ((step + 1 - warmup) as f64 / span).min(1.0);
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// The full declarative description of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ExperimentConfig {
    pub data: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gradcheck: GradcheckConfig,
    pub probe: ProbeConfig,
}

impl ExperimentConfig {
    /// The model configuration with the run's encoder mode applied.
    pub fn effective_model(&self) -> ModelConfig {
        let mut m = self.model.clone();
        m.vision.mode = self.train.mode;
        m
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.train.validate()?;
        let model = self.effective_model();
        model.validate()?;
        check_compatible(&model, &self.data)?;
        if self.train.train_pairs < self.train.batch_size || self.train.train_pairs >= self.data.n_pairs {
            return Err(Error::Config(format!(
                "train_pairs {} must be in [batch_size, n_pairs)",
                self.train.train_pairs
            )));
        }
        Ok(())
    }
}

fn check_compatible(model: &ModelConfig, spec: &SynthSpec) -> Result<()> {
    let v = &model.vision;
    if v.patches_per_frame() != spec.patches || v.patch_pixels() != spec.patch_pixels {
        return Err(Error::Config(format!(
            "model expects {} patches of {} pixels, data has {} of {}",
            v.patches_per_frame(),
            v.patch_pixels(),
            spec.patches,
            spec.patch_pixels
        )));
    }
    if spec.frames > v.t_max {
        return Err(Error::Config(format!("data has {} frames, model t_max is {}", spec.frames, v.t_max)));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// optimizer

/// Adam with decoupled weight decay. Decay applies to matrices only; norm
/// gains, biases and the temperature are left undecayed.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &[Tensor], weight_decay: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Invariant("optimizer state does not match parameter list".into()));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if p.shape().len() >= 2 { lr * self.weight_decay } else { 0.0 };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let update = (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
                *w -= decay * *w + lr * update;
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// evaluation

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_queries: usize,
    pub query_source: QuerySource,
    pub chance_r1: f64,
    pub metrics: RetrievalMetrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dsl: Option<RetrievalMetrics>,
}

/// Text-to-video retrieval over the records at `indices`.
pub fn evaluate(
    model: &DualEncoder,
    dataset: &SynthDataset,
    indices: &[usize],
    query_source: QuerySource,
    use_dsl: bool,
) -> Result<EvalReport> {
    if indices.is_empty() {
        return Err(Error::Input("no records to evaluate".into()));
    }
    check_compatible(model.config(), &dataset.spec).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let batch = dataset.batch(indices, &model.config().text.tokenizer());
    let videos: Vec<&Tensor> = batch.videos.iter().collect();
    let ids = match query_source {
        QuerySource::Caption => &batch.caption_ids,
        QuerySource::Subtitle => &batch.subtitle_ids,
    };
    let texts: Vec<&[u32]> = ids.iter().map(Vec::as_slice).collect();
    let video_emb = model.encode_videos(&videos)?;
    let text_emb = model.encode_texts(&texts)?;
    let sim = SimilarityMatrix::from_embeddings(&text_emb, &video_emb, (0..indices.len()).collect())?;
    Ok(EvalReport {
        n_queries: indices.len(),
        query_source,
        chance_r1: 100.0 / indices.len() as f64,
        metrics: RetrievalMetrics::compute(&sim),
        dsl: use_dsl.then(|| RetrievalMetrics::compute(&dsl_postprocess(&sim))),
    })
}

pub fn held_out_indices(config: &TrainConfig, dataset: &SynthDataset) -> Vec<usize> {
    (config.train_pairs..dataset.len()).collect()
}

// ---------------------------------------------------------------------------
// training

#[derive(Debug, Clone, Serialize)]
struct StepRecord {
    step: usize,
    loss: f64,
    lr: f64,
    inverse_tau: f64,
}

#[derive(Debug, Clone, Serialize)]
struct EvalRecord<'a> {
    step: usize,
    eval: &'a EvalReport,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: DualEncoder,
    pub final_loss: Option<f64>,
    pub eval: EvalReport,
}

/// Runs `config.train.steps` AdamW updates, writing one JSON line per step
/// and per evaluation to `log`. On a non-finite loss or gradient the
/// parameters from before the failing step are written to `snapshot_dir`
/// (when given) and the run aborts.
pub fn train(
    config: &ExperimentConfig,
    dataset: &SynthDataset,
    log: &mut dyn Write,
    snapshot_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.spec != config.data {
        check_compatible(&config.effective_model(), &dataset.spec)?;
    }
    if config.train.train_pairs >= dataset.len() {
        return Err(Error::Config("dataset has no held-out pairs".into()));
    }
    let tc = &config.train;
    let mut model = DualEncoder::new(config.effective_model(), tc.seed)?;
    let tokenizer: ToyTokenizer = model.config().text.tokenizer();
    let mut opt = AdamW::new(&model.params(), tc.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(tc.seed, 0x7261_696e));
    let mut order: Vec<usize> = Vec::new();
    let held_out = held_out_indices(tc, dataset);
    let mut final_loss = None;

    for step in 0..tc.steps {
        if order.len() < tc.batch_size {
            order = (0..tc.train_pairs).collect();
            order.shuffle(&mut rng);
        }
        let idx: Vec<usize> = order.drain(..tc.batch_size).collect();
        let batch = dataset.batch(&idx, &tokenizer);
        let videos: Vec<&Tensor> = batch.videos.iter().collect();
        let frames: Vec<&Tensor> = batch.middle_frames.iter().collect();
        let subs: Vec<&[u32]> = batch.subtitle_ids.iter().map(Vec::as_slice).collect();
        let caps: Vec<&[u32]> = batch.caption_ids.iter().map(Vec::as_slice).collect();
        let inputs = OclInputs { videos: &videos, frames: &frames, subtitles: &subs, captions: &caps };
        let (loss, grads) = model.loss_and_grads(inputs, tc.variant)?;

        let lr = tc.learning_rate_at(step);
        let bad_grad = grads.iter().position(|g| !g.is_finite());
        if !loss.is_finite() || bad_grad.is_some() {
            let names = model.param_names();
            let detail = serde_json::json!({
                "loss": loss.to_string(),
                "lr": lr,
                "inverse_tau": model.temperature().inverse_tau(),
                "first_bad_gradient": bad_grad.map(|i| names[i].clone()),
                "batch": idx,
            })
            .to_string();
            if let Some(dir) = snapshot_dir {
                model.save(dir)?;
            }
            return Err(Error::NonFinite { step, detail });
        }

        {
            let mut params: Vec<&mut Tensor> = model.store_mut().tensors_mut().collect();
            opt.step(&mut params, &grads, lr)?;
        }
        model.clamp_temperature();
        final_loss = Some(loss);
        let record = StepRecord { step, loss, lr, inverse_tau: model.temperature().inverse_tau() };
        writeln!(log, "{}", serde_json::to_string(&record)?)?;

        let last = step + 1 == tc.steps;
        if tc.eval_every > 0 && (step + 1) % tc.eval_every == 0 && !last {
            let eval = evaluate(&model, dataset, &held_out, tc.query_source, true)?;
            writeln!(log, "{}", serde_json::to_string(&EvalRecord { step: step + 1, eval: &eval })?)?;
        }
    }
    let eval = evaluate(&model, dataset, &held_out, tc.query_source, true)?;
    writeln!(log, "{}", serde_json::to_string(&EvalRecord { step: tc.steps, eval: &eval })?)?;
    log.flush()?;
    Ok(TrainOutcome { model, final_loss, eval })
}

// ---------------------------------------------------------------------------
// gradient-check suite

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckEntry {
    pub variant: OclVariant,
    pub mode: EncoderMode,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub params_checked: usize,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSuiteReport {
    pub tolerance: f64,
    pub batch_size: usize,
    pub entries: Vec<GradcheckEntry>,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub variants: Vec<OclVariant>,
    pub modes: Vec<EncoderMode>,
    pub batch_size: usize,
    pub frames: usize,
    pub tolerance: f64,
    pub step: f64,
    pub stencil: Stencil,
    pub max_probes: usize,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::tiny(),
            variants: OclVariant::ALL.to_vec(),
            modes: vec![EncoderMode::Vip, EncoderMode::MeanPool, EncoderMode::FullAttention],
            batch_size: 4,
            frames: 2,
            tolerance: 1e-4,
            step: 1e-5,
            stencil: Stencil::CentralFourthOrder,
            max_probes: 12,
            seed: 0,
        }
    }
}

/// Random inputs for a gradient check: videos, their middle frames, and
/// short subtitles and captions over a small word list.
pub struct GradcheckBatch {
    pub videos: Vec<Tensor>,
    pub frames: Vec<Tensor>,
    pub subtitles: Vec<Vec<u32>>,
    pub captions: Vec<Vec<u32>>,
}

impl GradcheckBatch {
    pub fn random(model: &ModelConfig, batch: usize, frames: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, p) = (model.vision.patches_per_frame(), model.vision.patch_pixels());
        let mut videos = Vec::with_capacity(batch);
        for _ in 0..batch {
            let data = (0..frames * n * p).map(|_| rng.random_range(-1.0..1.0)).collect();
            videos.push(Tensor::new(vec![frames, n, p], data)?);
        }
        let mid = frames / 2;
        let frames_t = videos
            .iter()
            .map(|v| Tensor::new(vec![n, p], v.data()[mid * n * p..(mid + 1) * n * p].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let tok = model.text.tokenizer();
        let words = ["red", "ball", "green", "tree", "talk", "about", "the", "sky"];
        let max_words = model.text.max_len.saturating_sub(2).max(1);
        let mut sentence = |len: usize| {
            let s: Vec<&str> = (0..len.min(max_words)).map(|_| words[rng.random_range(0..words.len())]).collect();
            tok.tokenize(&s.join(" "))
        };
        let subtitles = (0..batch).map(|i| sentence(2 + i % 3)).collect();
        let captions = (0..batch).map(|i| sentence(1 + i % 4)).collect();
        Ok(Self { videos, frames: frames_t, subtitles, captions })
    }
}

/// Loss-and-gradient closure type accepted by [`gradcheck_suite_with`];
/// lets a test substitute a deliberately broken analytic gradient.
pub type GradientFn<'a> = dyn Fn(&DualEncoder, OclInputs<'_>, OclVariant) -> Result<(f64, Vec<Tensor>)> + 'a;

pub fn gradcheck_suite(config: &GradcheckConfig) -> Result<GradcheckSuiteReport> {
    gradcheck_suite_with(config, &|m, inputs, v| m.loss_and_grads(inputs, v))
}

/// Finite-difference check of the full loss, both towers and the
/// temperature, for every requested variant and encoder mode.
pub fn gradcheck_suite_with(config: &GradcheckConfig, gradient: &GradientFn<'_>) -> Result<GradcheckSuiteReport> {
    if config.batch_size < 2 || config.variants.is_empty() || config.modes.is_empty() {
        return Err(Error::Config("gradcheck needs batch_size >= 2, a variant and a mode".into()));
    }
    let data = GradcheckBatch::random(&config.model, config.batch_size, config.frames, sub_seed(config.seed, 1))?;
    let videos: Vec<&Tensor> = data.videos.iter().collect();
    let frames: Vec<&Tensor> = data.frames.iter().collect();
    let subs: Vec<&[u32]> = data.subtitles.iter().map(Vec::as_slice).collect();
    let caps: Vec<&[u32]> = data.captions.iter().map(Vec::as_slice).collect();
    let inputs = OclInputs { videos: &videos, frames: &frames, subtitles: &subs, captions: &caps };
    let mut entries = Vec::new();
    for &mode in &config.modes {
        let mut mc = config.model.clone();
        mc.vision.mode = mode;
        let model = DualEncoder::new(mc, sub_seed(config.seed, 2))?;
        for &variant in &config.variants {
            let mut work = model.clone();
            let report = grad_check_with(
                |ps: &[Tensor]| {
                    work.set_params(ps)?;
                    gradient(&work, inputs, variant)
                },
                &model.params(),
                &model.param_names(),
                GradCheckOptions {
                    step: config.step,
                    stencil: config.stencil,
                    max_probes: Some(config.max_probes),
                    seed: sub_seed(config.seed, 3),
                },
            )?;
            let max = report.max_rel_error();
            entries.push(GradcheckEntry {
                variant,
                mode,
                max_rel_error: max,
                worst_param: report.worst().map(|w| w.name.clone()).unwrap_or_default(),
                params_checked: report.params.len(),
                passed: max < config.tolerance,
            });
        }
    }
    let passed = entries.iter().all(|e| e.passed);
    Ok(GradcheckSuiteReport { tolerance: config.tolerance, batch_size: config.batch_size, entries, passed })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let c = TrainConfig { steps: 300, warmup_fraction: 0.1, learning_rate: 1e-3, ..Default::default() };
        assert_eq!(c.warmup_steps(), 30);
        assert!((c.learning_rate_at(0) - 1e-3 / 30.0).abs() < 1e-18);
        assert!((c.learning_rate_at(29) - 1e-3).abs() < 1e-15);
        assert!(c.learning_rate_at(299) <= 1e-5);
        for s in 30..299 {
            assert!(c.learning_rate_at(s + 1) <= c.learning_rate_at(s));
        }
    }

    #[test]
    fn adamw_first_step_is_sign_times_lr() {
        let mut p = Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap();
        let g = Tensor::new(vec![1, 3], vec![0.3, -4.0, 1e-3]).unwrap();
        let mut opt = AdamW::new(std::slice::from_ref(&p), 0.0);
        opt.step(&mut [&mut p], &[g], 0.1).unwrap();
        for (got, want) in p.data().iter().zip([0.9, -1.9, 0.4]) {
            assert!((got - want).abs() < 1e-3, "{got} vs {want}");
        }
    }

    #[test]
    fn weight_decay_is_decoupled_and_skips_vectors() {
        let mut w = Tensor::full(&[2, 2], 1.0);
        let mut b = Tensor::full(&[2], 1.0);
        let zeros = [Tensor::zeros(&[2, 2]), Tensor::zeros(&[2])];
        let mut opt = AdamW::new(&[w.clone(), b.clone()], 0.5);
        opt.step(&mut [&mut w, &mut b], &zeros, 0.1).unwrap();
        assert!(w.data().iter().all(|&x| (x - 0.95).abs() < 1e-15));
        assert!(b.data().iter().all(|&x| x == 1.0));
    }

    #[test]
    fn invalid_train_configs() {
        assert!(TrainConfig { batch_size: 1, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { warmup_fraction: 2.0, ..Default::default() }.validate().is_err());
        let mut e = ExperimentConfig::default();
        e.data.patch_pixels = 10;
        assert!(e.validate().is_err());
    }
}
