//! The two towers plus the shared temperature, trained jointly.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::ocl::{ocl_loss_graph, OclNodes, OclVariant, Temperature};
use crate::params::{load_checkpoint, save_checkpoint, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::text::{TextConfig, TextTower};
use crate::vision::{ProxyViT, ProxyViTConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub vision: ProxyViTConfig,
    pub text: TextConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.text.validate()?;
        if self.vision.embed_dim != self.text.embed_dim {
            return Err(Error::Config(format!(
                "vision embed_dim {} != text embed_dim {}",
                self.vision.embed_dim, self.text.embed_dim
            )));
        }
        Ok(())
    }

    /// A very small configuration for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            vision: ProxyViTConfig {
                image_size: 4,
                patch_size: 2,
                channels: 1,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                t_max: 3,
                n_proxies: 2,
                embed_dim: 6,
                mode: crate::vision::EncoderMode::Vip,
            },
            text: TextConfig { vocab_size: 32, max_len: 8, d_model: 8, n_layers: 1, n_heads: 2, embed_dim: 6 },
        }
    }
}

/// One training batch: `B` videos with their middle frames, subtitles and
/// captions.
#[derive(Debug, Clone, Copy)]
pub struct OclInputs<'a> {
    pub videos: &'a [&'a Tensor],
    pub frames: &'a [&'a Tensor],
    pub subtitles: &'a [&'a [u32]],
    pub captions: &'a [&'a [u32]],
}

#[derive(Debug, Clone)]
pub struct DualEncoder {
    config: ModelConfig,
    store: ParamStore,
    vision: ProxyViT,
    text: TextTower,
    log_inverse_tau: ParamId,
}

impl DualEncoder {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let vision = ProxyViT::new(config.vision.clone(), &mut store, &mut rng)?;
        let text = TextTower::new(config.text.clone(), &mut store, &mut rng)?;
        let log_inverse_tau =
            store.add("log_inverse_tau", Tensor::scalar(Temperature::clip_init().log_inverse_tau));
        Ok(Self { config, store, vision, text, log_inverse_tau })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn vision(&self) -> &ProxyViT {
        &self.vision
    }

    pub fn text(&self) -> &TextTower {
        &self.text
    }

    pub fn log_inverse_tau_id(&self) -> ParamId {
        self.log_inverse_tau
    }

    pub fn temperature(&self) -> Temperature {
        Temperature { log_inverse_tau: self.store.get(self.log_inverse_tau).data()[0] }
    }

    pub fn clamp_temperature(&mut self) {
        let t = self.temperature().clamped();
        self.store.get_mut(self.log_inverse_tau).data_mut()[0] = t.log_inverse_tau;
    }

    /// Replaces every parameter tensor; shapes must match the layout.
    pub fn set_params(&mut self, tensors: &[Tensor]) -> Result<()> {
        if tensors.len() != self.store.len() {
            return Err(Error::Input(format!("{} tensors for {} params", tensors.len(), self.store.len())));
        }
        for (id, t) in self.store.ids().collect::<Vec<_>>().into_iter().zip(tensors) {
            if self.store.get(id).shape() != t.shape() {
                return Err(Error::dim("set_params", self.store.name(id).to_string()));
            }
            *self.store.get_mut(id) = t.clone();
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<Tensor> {
        self.store.iter().map(|(_, _, t)| t.clone()).collect()
    }

    pub fn param_names(&self) -> Vec<String> {
        self.store.iter().map(|(_, n, _)| n.to_string()).collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(dir, serde_json::to_value(&self.config)?, &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (config, loaded) = load_checkpoint(dir)?;
        let config: ModelConfig = serde_json::from_value(config)
            .map_err(|e| Error::Checkpoint(format!("model config: {e}")))?;
        config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut model = Self::new(config, 0)?;
        if loaded.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} tensors, layout needs {}",
                loaded.len(),
                model.store.len()
            )));
        }
        for (id, name, t) in loaded.iter() {
            let target = model
                .store
                .find(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor {name}")))?;
            if target != id || model.store.get(target).shape() != t.shape() {
                return Err(Error::Checkpoint(format!("tensor {name} does not fit the layout")));
            }
            *model.store.get_mut(target) = t.clone();
        }
        Ok(model)
    }

    /// Records the variant's loss; returns the scalar loss node.
    pub fn loss_graph(&self, g: &mut Graph, inputs: OclInputs<'_>, variant: OclVariant) -> Result<NodeId> {
        let b = inputs.videos.len();
        if [inputs.subtitles.len(), inputs.frames.len(), inputs.captions.len()]
            .iter()
            .any(|&n| n != b)
        {
            return Err(Error::Input("all sources need the same batch size".into()));
        }
        let videos = self.vision.encode_videos_graph(g, &self.store, inputs.videos)?;
        let frames = if variant.uses_frames() {
            Some(self.vision.encode_images_graph(g, &self.store, inputs.frames)?)
        } else {
            None
        };
        let subtitles = self.text.encode_graph(g, &self.store, inputs.subtitles)?;
        let captions = if variant.uses_captions() {
            Some(self.text.encode_graph(g, &self.store, inputs.captions)?)
        } else {
            None
        };
        let tau = g.param(&self.store, self.log_inverse_tau);
        ocl_loss_graph(g, OclNodes { videos, frames, subtitles, captions }, variant, tau)
    }

    /// Loss and the gradient of every parameter, in store order.
    pub fn loss_and_grads(&self, inputs: OclInputs<'_>, variant: OclVariant) -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let loss = self.loss_graph(&mut g, inputs, variant)?;
        let value = g.value(loss).data()[0];
        let grads = g.backward(loss).for_params(&self.store);
        Ok((value, grads))
    }

    pub fn encode_videos(&self, videos: &[&Tensor]) -> Result<Tensor> {
        self.vision.encode_videos(&self.store, videos, 32)
    }

    pub fn encode_texts(&self, texts: &[&[u32]]) -> Result<Tensor> {
        self.text.encode_texts(&self.store, texts, 64)
    }

    pub fn encode_images(&self, frames: &[&Tensor]) -> Result<Tensor> {
        let mut rows = Vec::new();
        for part in frames.chunks(32) {
            let mut g = Graph::new();
            let id = self.vision.encode_images_graph(&mut g, &self.store, part)?;
            rows.extend_from_slice(g.value(id).data());
        }
        Tensor::new(vec![frames.len(), self.config.vision.embed_dim], rows)
    }
}
