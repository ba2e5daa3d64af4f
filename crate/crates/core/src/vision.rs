//! Vision tower: a ViT over patchified frame sequences with a bank of
//! learnable video proxy tokens.
//!
//! Token order inside one sequence is `[proxy_0 .. proxy_{M-1}, frame 0
//! patches, frame 1 patches, ...]`. Under proxy-guided attention a proxy
//! sees every token, and a patch sees the proxies plus the patches of its
//! own frame. The video embedding is read from `proxy_0`.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId, RowRecipe};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{BoolMask, Tensor};
use crate::transformer::{Block, LayerNormParams, LinearParams, INIT_STD};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Proxy tokens with proxy-guided attention.
    Vip,
    /// Frames encoded independently, embeddings averaged.
    MeanPool,
    /// Proxy tokens, every token attends to every token.
    FullAttention,
}

impl EncoderMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "vip" => Ok(Self::Vip),
            "mean_pool" | "meanpool" => Ok(Self::MeanPool),
            "full_attention" | "full" => Ok(Self::FullAttention),
            _ => Err(Error::Config(format!("unknown encoder mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxyViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub t_max: usize,
    pub n_proxies: usize,
    pub embed_dim: usize,
    pub mode: EncoderMode,
}

impl Default for ProxyViTConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            d_model: 64,
            n_layers: 4,
            n_heads: 4,
            t_max: 12,
            n_proxies: 4,
            embed_dim: 64,
            mode: EncoderMode::Vip,
        }
    }
}

impl ProxyViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.t_max == 0 {
            return bad("t_max must be at least 1".into());
        }
        if self.mode != EncoderMode::MeanPool && self.n_proxies == 0 {
            return bad("proxy modes need at least one proxy token".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!("{} heads do not divide d_model {}", self.n_heads, self.d_model));
        }
        if self.channels == 0 || self.embed_dim == 0 || self.n_layers == 0 {
            return bad("channels, embed_dim and n_layers must be positive".into());
        }
        Ok(())
    }

    pub fn patches_per_frame(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    fn uses_proxies(&self) -> bool {
        self.mode != EncoderMode::MeanPool
    }
}

/// The attention mask of one proxy-token sequence and its dimensions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMaskPlan {
    pub frames: usize,
    pub patches: usize,
    pub proxies: usize,
    pub mask: BoolMask,
}

impl AttentionMaskPlan {
    pub fn len(&self) -> usize {
        self.proxies + self.frames * self.patches
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Proxy-guided mask: `q` may attend `k` iff either is a proxy or both are
/// patches of the same frame.
pub fn build_vip_mask(frames: usize, patches: usize, proxies: usize) -> Result<AttentionMaskPlan> {
    if frames == 0 || patches == 0 || proxies == 0 {
        return Err(Error::Config(format!(
            "vip mask needs T, N, M >= 1 (got {frames}, {patches}, {proxies})"
        )));
    }
    let len = proxies + frames * patches;
    let frame_of = |i: usize| (i - proxies) / patches;
    let mask = BoolMask::from_fn(len, len, |q, k| {
        q < proxies || k < proxies || frame_of(q) == frame_of(k)
    })?;
    Ok(AttentionMaskPlan { frames, patches, proxies, mask })
}

fn full_mask_plan(frames: usize, patches: usize, proxies: usize) -> AttentionMaskPlan {
    let len = proxies + frames * patches;
    AttentionMaskPlan { frames, patches, proxies, mask: BoolMask::all_true(len, len) }
}

/// Temporal positional recipe for a single image: linear interpolation of
/// the temporal table at `(t_max - 1) / 2`.
pub fn middle_temporal_recipe(t_max: usize) -> RowRecipe {
    let pos = (t_max as f64 - 1.0) / 2.0;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    if frac == 0.0 {
        vec![(lo, 1.0)]
    } else {
        vec![(lo, 1.0 - frac), (lo + 1, frac)]
    }
}

#[derive(Debug, Clone)]
pub struct ProxyViT {
    config: ProxyViTConfig,
    patch_projection: LinearParams,
    pos_spatial: ParamId,
    pos_temporal: Option<ParamId>,
    proxy_bank: Option<ParamId>,
    blocks: Vec<Block>,
    output_norm: LayerNormParams,
    output_projection: LinearParams,
}

impl ProxyViT {
    pub fn new(config: ProxyViTConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let p = "vision";
        let patch_projection =
            LinearParams::new(store, &format!("{p}.patch_projection"), config.patch_pixels(), d, true, rng);
        let pos_spatial =
            store.add_normal(format!("{p}.pos_spatial"), &[config.patches_per_frame(), d], INIT_STD, rng);
        let (pos_temporal, proxy_bank) = if config.uses_proxies() {
            (
                Some(store.add_normal(format!("{p}.pos_temporal"), &[config.t_max, d], INIT_STD, rng)),
                Some(store.add_normal(format!("{p}.proxy_bank"), &[config.n_proxies, d], INIT_STD, rng)),
            )
        } else {
            (None, None)
        };
        let blocks = (0..config.n_layers)
            .map(|l| Block::new(store, &format!("{p}.blocks.{l}"), d, config.n_heads, rng))
            .collect();
        let output_norm = LayerNormParams::new(store, &format!("{p}.output_norm"), d);
        let output_projection =
            LinearParams::new(store, &format!("{p}.output_projection"), d, config.embed_dim, false, rng);
        Ok(Self {
            config,
            patch_projection,
            pos_spatial,
            pos_temporal,
            proxy_bank,
            blocks,
            output_norm,
            output_projection,
        })
    }

    pub fn config(&self) -> &ProxyViTConfig {
        &self.config
    }

    pub fn proxy_bank(&self) -> Option<ParamId> {
        self.proxy_bank
    }

    pub fn pos_temporal(&self) -> Option<ParamId> {
        self.pos_temporal
    }

    fn check_video(&self, video: &Tensor) -> Result<usize> {
        let (n, pp) = (self.config.patches_per_frame(), self.config.patch_pixels());
        match *video.shape() {
            [t, vn, vp] if vn == n && vp == pp => {
                if t == 0 {
                    return Err(Error::Input("video has no frames".into()));
                }
                if t > self.config.t_max {
                    return Err(Error::Config(format!(
                        "video has {t} frames, t_max is {}",
                        self.config.t_max
                    )));
                }
                Ok(t)
            }
            _ => Err(Error::dim(
                "vision input",
                format!("expected [T,{n},{pp}], got {:?}", video.shape()),
            )),
        }
    }

    /// Patch tokens `Linear(f) + Pos_s(n) + Pos_t(t)` for a batch of videos
    /// whose frame `t` uses `temporal[t]` as its temporal recipe. Returns a
    /// `[B*T*N, d]` node.
    fn patch_tokens(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        videos: &[&Tensor],
        temporal: &[RowRecipe],
    ) -> Result<NodeId> {
        let n = self.config.patches_per_frame();
        let pp = self.config.patch_pixels();
        let t = temporal.len();
        let mut pixels = Vec::with_capacity(videos.len() * t * n * pp);
        for v in videos {
            pixels.extend_from_slice(v.data());
        }
        let rows = videos.len() * t * n;
        let x = g.input(Tensor::new(vec![rows, pp], pixels)?);
        let mut tok = self.patch_projection.apply(g, store, x)?;

        let spatial = g.param(store, self.pos_spatial);
        let s_idx: Vec<usize> = (0..rows).map(|r| r % n).collect();
        let s = g.gather_rows(spatial, &s_idx)?;
        tok = g.add(tok, s)?;

        if let Some(pt) = self.pos_temporal {
            let table = g.param(store, pt);
            let recipe: Vec<RowRecipe> = (0..rows).map(|r| temporal[(r / n) % t].clone()).collect();
            let tp = g.row_mix(table, recipe)?;
            tok = g.add(tok, tp)?;
        }
        Ok(tok)
    }

    /// Token embeddings of one video, `[T*N, d]`.
    pub fn embed_patches(&self, store: &ParamStore, video: &Tensor) -> Result<Tensor> {
        let t = self.check_video(video)?;
        let mut g = Graph::new();
        let recipe: Vec<RowRecipe> = (0..t).map(|i| vec![(i, 1.0)]).collect();
        let id = self.patch_tokens(&mut g, store, &[video], &recipe)?;
        Ok(g.value(id).clone())
    }

    /// Token embeddings of a single image under the interpolated middle
    /// temporal position, `[N, d]`.
    pub fn embed_image_patches(&self, store: &ParamStore, frame: &Tensor) -> Result<Tensor> {
        let video = as_single_frame(frame)?;
        self.check_video(&video)?;
        let mut g = Graph::new();
        let recipe = vec![middle_temporal_recipe(self.config.t_max)];
        let id = self.patch_tokens(&mut g, store, &[&video], &recipe)?;
        Ok(g.value(id).clone())
    }

    pub fn mask_plan(&self, frames: usize) -> Result<AttentionMaskPlan> {
        let (n, m) = (self.config.patches_per_frame(), self.config.n_proxies);
        match self.config.mode {
            EncoderMode::Vip => build_vip_mask(frames, n, m),
            EncoderMode::FullAttention => Ok(full_mask_plan(frames, n, m)),
            EncoderMode::MeanPool => Ok(full_mask_plan(1, n, 0)),
        }
    }

    /// Records the encoding of a batch of equal-length videos; returns unit
    /// rows `[B, embed_dim]`.
    pub fn encode_videos_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        videos: &[&Tensor],
    ) -> Result<NodeId> {
        let t = self.check_batch(videos)?;
        let recipe: Vec<RowRecipe> = (0..t).map(|i| vec![(i, 1.0)]).collect();
        self.encode_graph(g, store, videos, &recipe)
    }

    /// Records the encoding of a batch of single images `[N, patch_pixels]`.
    pub fn encode_images_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: &[&Tensor],
    ) -> Result<NodeId> {
        let videos = frames.iter().map(|f| as_single_frame(f)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = videos.iter().collect();
        self.check_batch(&refs)?;
        let recipe = vec![middle_temporal_recipe(self.config.t_max)];
        self.encode_graph(g, store, &refs, &recipe)
    }

    fn check_batch(&self, videos: &[&Tensor]) -> Result<usize> {
        let first = videos.first().ok_or_else(|| Error::Input("empty video batch".into()))?;
        let t = self.check_video(first)?;
        for v in &videos[1..] {
            if self.check_video(v)? != t {
                return Err(Error::Input("videos in a batch must share a frame count".into()));
            }
        }
        Ok(t)
    }

    fn encode_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        videos: &[&Tensor],
        temporal: &[RowRecipe],
    ) -> Result<NodeId> {
        let b = videos.len();
        let t = temporal.len();
        let n = self.config.patches_per_frame();
        let tokens = self.patch_tokens(g, store, videos, temporal)?;
        match self.config.mode {
            EncoderMode::MeanPool => {
                let mask = Rc::new(BoolMask::all_true(n, n));
                let mut x = tokens;
                for block in &self.blocks {
                    x = block.forward(g, store, x, &mask, b * t)?;
                }
                let w = 1.0 / n as f64;
                let frame_pool: Vec<RowRecipe> =
                    (0..b * t).map(|f| (0..n).map(|i| (f * n + i, w)).collect()).collect();
                let frames = g.row_mix(x, frame_pool)?;
                let frames = self.head(g, store, frames)?;
                let w = 1.0 / t as f64;
                let video_pool: Vec<RowRecipe> =
                    (0..b).map(|v| (0..t).map(|i| (v * t + i, w)).collect()).collect();
                let pooled = g.row_mix(frames, video_pool)?;
                g.l2_normalize(pooled)
            }
            EncoderMode::Vip | EncoderMode::FullAttention => {
                let m = self.config.n_proxies;
                let plan = self.mask_plan(t)?;
                let len = plan.len();
                let bank = g.param(store, self.proxy_bank.expect("proxy modes own a bank"));
                let pool = g.concat_rows(&[bank, tokens])?;
                let mut order = Vec::with_capacity(b * len);
                for v in 0..b {
                    order.extend(0..m);
                    order.extend((0..t * n).map(|i| m + v * t * n + i));
                }
                let mut x = g.gather_rows(pool, &order)?;
                let mask = Rc::new(plan.mask);
                for block in &self.blocks {
                    x = block.forward(g, store, x, &mask, b)?;
                }
                let first: Vec<usize> = (0..b).map(|v| v * len).collect();
                let cls = g.gather_rows(x, &first)?;
                self.head(g, store, cls)
            }
        }
    }

    fn head(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let x = self.output_norm.apply(g, store, x)?;
        let x = self.output_projection.apply(g, store, x)?;
        g.l2_normalize(x)
    }

    /// Unit-norm embedding of one video `[T, N, patch_pixels]`.
    pub fn encode_video(&self, store: &ParamStore, video: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let id = self.encode_videos_graph(&mut g, store, &[video])?;
        Ok(g.value(id).row(0).to_vec()).and_then(|r| Tensor::new(vec![r.len()], r))
    }

    /// Unit-norm embedding of one image `[N, patch_pixels]`, treated as a
    /// single-frame video at the middle temporal position.
    pub fn encode_image(&self, store: &ParamStore, frame: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let id = self.encode_images_graph(&mut g, store, &[frame])?;
        Ok(g.value(id).row(0).to_vec()).and_then(|r| Tensor::new(vec![r.len()], r))
    }

    /// Unit rows for many videos, encoded in chunks of `chunk`.
    pub fn encode_videos(&self, store: &ParamStore, videos: &[&Tensor], chunk: usize) -> Result<Tensor> {
        let mut rows = Vec::new();
        for part in videos.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let id = self.encode_videos_graph(&mut g, store, part)?;
            rows.extend_from_slice(g.value(id).data());
        }
        Tensor::new(vec![videos.len(), self.config.embed_dim], rows)
    }
}

fn as_single_frame(frame: &Tensor) -> Result<Tensor> {
    match *frame.shape() {
        [n, p] => frame.clone().reshape(vec![1, n, p]),
        _ => Err(Error::dim("image input", format!("expected [N,P], got {:?}", frame.shape()))),
    }
}
