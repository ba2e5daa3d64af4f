//! Omnisource cross-modal contrastive losses.
//!
//! Everything is built from one primitive, a single contrastive *direction*:
//! each query row `q_i` is scored against every positive-set row `p_j` and,
//! optionally, against every extra-negative row `e_j` with `j != i`, and the
//! loss is the mean over `i` of `-log softmax(q_i . p_i / tau)`. The
//! symmetric info-NCE loss, the expanded-negative video-to-text loss and
//! every variant are fixed weighted sums of directions.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::ops::gemm_nt;
use crate::tensor::Tensor;

pub const UNIT_NORM_TOLERANCE: f64 = 1e-5;

/// `ln(1/tau)` with the CLIP initialisation and clamp range.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature {
    pub log_inverse_tau: f64,
}

impl Temperature {
    pub const MIN_INVERSE_TAU: f64 = 1.0;
    pub const MAX_INVERSE_TAU: f64 = 100.0;

    pub fn clip_init() -> Self {
        Self { log_inverse_tau: (1.0f64 / 0.07).ln() }
    }

    pub fn from_tau(tau: f64) -> Self {
        Self { log_inverse_tau: (1.0 / tau).ln() }
    }

    pub fn inverse_tau(&self) -> f64 {
        self.log_inverse_tau.exp()
    }

    pub fn tau(&self) -> f64 {
        1.0 / self.inverse_tau()
    }

    /// Clamps `1/tau` into `[1, 100]`.
    pub fn clamped(self) -> Self {
        let lo = Self::MIN_INVERSE_TAU.ln();
        let hi = Self::MAX_INVERSE_TAU.ln();
        Self { log_inverse_tau: self.log_inverse_tau.clamp(lo, hi) }
    }
}

impl Default for Temperature {
    fn default() -> Self {
        Self::clip_init()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OclVariant {
    /// Video-subtitle only.
    #[serde(rename = "baseline_VS", alias = "baseline_vs", alias = "baseline")]
    BaselineVs,
    /// Video-subtitle plus frame-caption.
    #[serde(rename = "a_VS_FC", alias = "a")]
    AVsFc,
    /// Video-subtitle plus video-caption.
    #[serde(rename = "b_VS_VC", alias = "b")]
    BVsVc,
    /// Video-subtitle, video-caption and frame-caption.
    #[serde(rename = "c_VS_VC_FC", alias = "c")]
    CVsVcFc,
    /// Video against subtitles and captions jointly, plus frame-caption.
    #[serde(rename = "d_VSC_FC", alias = "d")]
    DVscFc,
}

impl OclVariant {
    pub const ALL: [OclVariant; 5] =
        [Self::BaselineVs, Self::AVsFc, Self::BVsVc, Self::CVsVcFc, Self::DVscFc];

    pub fn tag(self) -> &'static str {
        match self {
            Self::BaselineVs => "baseline_VS",
            Self::AVsFc => "a_VS_FC",
            Self::BVsVc => "b_VS_VC",
            Self::CVsVcFc => "c_VS_VC_FC",
            Self::DVscFc => "d_VSC_FC",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.tag().eq_ignore_ascii_case(tag) || v.short().eq_ignore_ascii_case(tag))
            .ok_or_else(|| Error::Config(format!("unknown loss variant {tag:?}")))
    }

    fn short(self) -> &'static str {
        match self {
            Self::BaselineVs => "baseline",
            Self::AVsFc => "a",
            Self::BVsVc => "b",
            Self::CVsVcFc => "c",
            Self::DVscFc => "d",
        }
    }

    /// Whether the frame/caption sources are consumed.
    pub fn uses_frames(self) -> bool {
        matches!(self, Self::AVsFc | Self::CVsVcFc | Self::DVscFc)
    }

    pub fn uses_captions(self) -> bool {
        self != Self::BaselineVs
    }

    /// The weighted directions this variant sums, in evaluation order.
    pub fn terms(self) -> Vec<Term> {
        use Direction::*;
        let pair = |a, b| [Term { weight: 0.5, dir: a }, Term { weight: 0.5, dir: b }];
        let mut out = Vec::new();
        match self {
            Self::BaselineVs => out.extend(pair(VideoToSub, SubToVideo)),
            Self::AVsFc => {
                out.extend(pair(VideoToSub, SubToVideo));
                out.extend(pair(FrameToCap, CapToFrame));
            }
            Self::BVsVc => {
                out.extend(pair(VideoToSub, SubToVideo));
                out.extend(pair(VideoToCap, CapToVideo));
            }
            Self::CVsVcFc => {
                out.extend(pair(VideoToSub, SubToVideo));
                out.extend(pair(VideoToCap, CapToVideo));
                out.extend(pair(FrameToCap, CapToFrame));
            }
            Self::DVscFc => {
                out.extend(pair(VideoToSubExpanded, VideoToCapExpanded));
                out.extend(pair(SubToVideo, CapToVideo));
                out.extend(pair(FrameToCap, CapToFrame));
            }
        }
        out
    }
}

impl std::fmt::Display for OclVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.tag())
    }
}

/// One contrastive direction over the four sources.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    VideoToSub,
    SubToVideo,
    VideoToCap,
    CapToVideo,
    FrameToCap,
    CapToFrame,
    /// Video to subtitle, captions `j != i` as extra negatives.
    VideoToSubExpanded,
    /// Video to caption, subtitles `j != i` as extra negatives.
    VideoToCapExpanded,
}

impl Direction {
    pub fn is_text_to_video(self) -> bool {
        matches!(self, Self::SubToVideo | Self::CapToVideo)
    }

    pub fn is_video_to_text(self) -> bool {
        matches!(
            self,
            Self::VideoToSub | Self::VideoToCap | Self::VideoToSubExpanded | Self::VideoToCapExpanded
        )
    }

    pub fn is_frame(self) -> bool {
        matches!(self, Self::FrameToCap | Self::CapToFrame)
    }

    /// `(query, positive, extra negatives)` as source tags.
    fn operands(self) -> (Source, Source, Option<Source>) {
        use Source::*;
        match self {
            Self::VideoToSub => (Video, Subtitle, None),
            Self::SubToVideo => (Subtitle, Video, None),
            Self::VideoToCap => (Video, Caption, None),
            Self::CapToVideo => (Caption, Video, None),
            Self::FrameToCap => (Frame, Caption, None),
            Self::CapToFrame => (Caption, Frame, None),
            Self::VideoToSubExpanded => (Video, Subtitle, Some(Caption)),
            Self::VideoToCapExpanded => (Video, Caption, Some(Subtitle)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub weight: f64,
    pub dir: Direction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Source {
    Video,
    Frame,
    Subtitle,
    Caption,
}

/// Unit-norm embeddings of the four sources for one batch.
#[derive(Debug, Clone)]
pub struct OclBatchEmbeddings {
    pub videos: Tensor,
    pub frames: Tensor,
    pub subtitles: Tensor,
    pub captions: Tensor,
}

impl OclBatchEmbeddings {
    pub fn new(videos: Tensor, frames: Tensor, subtitles: Tensor, captions: Tensor) -> Result<Self> {
        let shape = videos.shape().to_vec();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::Input(format!("embeddings must be [B>=1, d], got {shape:?}")));
        }
        for t in [&frames, &subtitles, &captions] {
            if t.shape() != shape.as_slice() {
                return Err(Error::dim("OclBatchEmbeddings", format!("{:?} vs {shape:?}", t.shape())));
            }
        }
        for t in [&videos, &frames, &subtitles, &captions] {
            check_unit_rows(t)?;
        }
        Ok(Self { videos, frames, subtitles, captions })
    }

    pub fn batch_size(&self) -> usize {
        self.videos.rows()
    }

    fn source(&self, s: Source) -> &Tensor {
        match s {
            Source::Video => &self.videos,
            Source::Frame => &self.frames,
            Source::Subtitle => &self.subtitles,
            Source::Caption => &self.captions,
        }
    }
}

fn check_unit_rows(t: &Tensor) -> Result<()> {
    for r in 0..t.rows() {
        let norm = t.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
            return Err(Error::Input(format!("row {r} has norm {norm}, expected unit norm")));
        }
    }
    Ok(())
}

fn check_pair(x: &Tensor, y: &Tensor) -> Result<()> {
    let (b, d) = x.expect_2d("info_nce")?;
    if b == 0 {
        return Err(Error::Input("batch size must be at least 1".into()));
    }
    if y.shape() != [b, d] {
        return Err(Error::dim("info_nce", format!("{:?} vs {:?}", x.shape(), y.shape())));
    }
    check_unit_rows(x)?;
    check_unit_rows(y)
}

// ---------------------------------------------------------------------------
// direction kernel

/// Softmax weights per query row over `[positives | extra negatives]`.
#[derive(Debug, Clone)]
pub struct DirectionCache {
    probs: Vec<f64>,
    raw: Vec<f64>,
    width: usize,
}

/// Mean over rows `i` of
/// `-log( e^{s q_i.p_i} / (sum_j e^{s q_i.p_j} + sum_{j!=i} e^{s q_i.e_j}) )`
/// where `s = 1/tau`.
pub fn direction_forward(
    query: &Tensor,
    positive: &Tensor,
    extra: Option<&Tensor>,
    scale: f64,
) -> Result<(f64, DirectionCache)> {
    let (b, d) = query.expect_2d("contrastive")?;
    if b == 0 {
        return Err(Error::Input("batch size must be at least 1".into()));
    }
    if positive.shape() != [b, d] || extra.is_some_and(|e| e.shape() != [b, d]) {
        return Err(Error::dim("contrastive", format!("query {:?}", query.shape())));
    }
    let width = if extra.is_some() { 2 * b } else { b };
    let mut raw = vec![0.0; b * width];
    let mut sims = vec![0.0; b * b];
    gemm_nt(query.data(), positive.data(), &mut sims, b, d, b);
    for i in 0..b {
        raw[i * width..i * width + b].copy_from_slice(&sims[i * b..(i + 1) * b]);
    }
    if let Some(e) = extra {
        sims.iter_mut().for_each(|x| *x = 0.0);
        gemm_nt(query.data(), e.data(), &mut sims, b, d, b);
        for i in 0..b {
            raw[i * width + b..(i + 1) * width].copy_from_slice(&sims[i * b..(i + 1) * b]);
        }
    }
    let admitted = |i: usize, j: usize| j < b || j - b != i;

    let mut probs = vec![0.0; b * width];
    let mut total = 0.0;
    for i in 0..b {
        let row = &raw[i * width..(i + 1) * width];
        let mut max = f64::NEG_INFINITY;
        for (j, &r) in row.iter().enumerate() {
            if admitted(i, j) {
                max = max.max(scale * r);
            }
        }
        let mut sum = 0.0;
        let prow = &mut probs[i * width..(i + 1) * width];
        for (j, &r) in row.iter().enumerate() {
            if admitted(i, j) {
                prow[j] = (scale * r - max).exp();
                sum += prow[j];
            }
        }
        prow.iter_mut().for_each(|p| *p /= sum);
        let log_denominator = max + sum.ln();
        total += log_denominator - scale * row[i];
    }
    let loss = total / b as f64;
    Ok((loss, DirectionCache { probs, raw, width }))
}

pub struct DirectionGrads {
    pub query: Tensor,
    pub positive: Tensor,
    pub extra: Option<Tensor>,
    pub log_scale: f64,
}

/// Backward of [`direction_forward`] for upstream gradient `upstream`.
/// `log_scale` is the gradient with respect to `ln(1/tau)`.
pub fn direction_backward(
    query: &Tensor,
    positive: &Tensor,
    extra: Option<&Tensor>,
    scale: f64,
    cache: &DirectionCache,
    upstream: f64,
) -> DirectionGrads {
    let (b, d) = (query.rows(), query.cols());
    let width = cache.width;
    // dL/d(raw logit) before the temperature factor
    let mut dlogit = vec![0.0; b * width];
    let mut dscale = 0.0;
    let inv_b = upstream / b as f64;
    for i in 0..b {
        for j in 0..width {
            let target = if j == i { 1.0 } else { 0.0 };
            let g = (cache.probs[i * width + j] - target) * inv_b;
            dscale += g * cache.raw[i * width + j];
            dlogit[i * width + j] = g * scale;
        }
    }
    let mut dq = vec![0.0; b * d];
    let mut dp = vec![0.0; b * d];
    let mut de = extra.map(|_| vec![0.0; b * d]);
    for i in 0..b {
        for j in 0..b {
            let g = dlogit[i * width + j];
            for c in 0..d {
                dq[i * d + c] += g * positive.data()[j * d + c];
                dp[j * d + c] += g * query.data()[i * d + c];
            }
        }
        if let (Some(e), Some(de)) = (extra, de.as_mut()) {
            for j in 0..b {
                let g = dlogit[i * width + b + j];
                for c in 0..d {
                    dq[i * d + c] += g * e.data()[j * d + c];
                    de[j * d + c] += g * query.data()[i * d + c];
                }
            }
        }
    }
    DirectionGrads {
        query: Tensor::new(vec![b, d], dq).expect("shape"),
        positive: Tensor::new(vec![b, d], dp).expect("shape"),
        extra: de.map(|v| Tensor::new(vec![b, d], v).expect("shape")),
        log_scale: dscale * scale,
    }
}

// ---------------------------------------------------------------------------
// public loss functions

/// One-directional info-NCE: rows of `x` are queries, rows of `y` candidates.
pub fn info_nce_direction(x: &Tensor, y: &Tensor, temperature: Temperature) -> Result<f64> {
    check_pair(x, y)?;
    direction_forward(x, y, None, temperature.inverse_tau()).map(|(l, _)| l)
}

/// Symmetric info-NCE: the average of the two directions.
pub fn info_nce_pair(x: &Tensor, y: &Tensor, temperature: Temperature) -> Result<f64> {
    check_pair(x, y)?;
    let s = temperature.inverse_tau();
    let (x2y, _) = direction_forward(x, y, None, s)?;
    let (y2x, _) = direction_forward(y, x, None, s)?;
    Ok(weighted_fold(&[(0.5, x2y), (0.5, y2x)]))
}

/// Video-to-text loss with both subtitles and captions as positives, each
/// row's other text source widening the negative set. Averages `2B` terms.
pub fn omnisource_v2t(
    videos: &Tensor,
    subtitles: &Tensor,
    captions: &Tensor,
    temperature: Temperature,
) -> Result<f64> {
    check_pair(videos, subtitles)?;
    check_pair(videos, captions)?;
    let s = temperature.inverse_tau();
    let (with_sub, _) = direction_forward(videos, subtitles, Some(captions), s)?;
    let (with_cap, _) = direction_forward(videos, captions, Some(subtitles), s)?;
    Ok(weighted_fold(&[(0.5, with_sub), (0.5, with_cap)]))
}

fn weighted_fold(terms: &[(f64, f64)]) -> f64 {
    terms.iter().fold(0.0, |acc, &(w, v)| acc + w * v)
}

/// Per-group partial sums of a variant's loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OclBreakdown {
    /// Video-to-text directions.
    pub video_to_text: f64,
    /// Text-to-video directions.
    pub text_to_video: f64,
    /// Both frame-caption directions.
    pub frame_caption: f64,
    pub total: f64,
}

pub fn ocl_breakdown(
    batch: &OclBatchEmbeddings,
    variant: OclVariant,
    temperature: Temperature,
) -> Result<OclBreakdown> {
    let s = temperature.inverse_tau();
    let mut evaluated = Vec::new();
    for term in variant.terms() {
        let (q, p, e) = term.dir.operands();
        let (value, _) =
            direction_forward(batch.source(q), batch.source(p), e.map(|e| batch.source(e)), s)?;
        evaluated.push((term, value));
    }
    let group = |pred: fn(Direction) -> bool| {
        let terms: Vec<(f64, f64)> = evaluated
            .iter()
            .filter(|(t, _)| pred(t.dir))
            .map(|(t, v)| (t.weight, *v))
            .collect();
        weighted_fold(&terms)
    };
    let all: Vec<(f64, f64)> = evaluated.iter().map(|(t, v)| (t.weight, *v)).collect();
    Ok(OclBreakdown {
        video_to_text: group(Direction::is_video_to_text),
        text_to_video: group(Direction::is_text_to_video),
        frame_caption: group(Direction::is_frame),
        total: weighted_fold(&all),
    })
}

/// Sum of the source-wise losses selected by `variant`.
pub fn ocl_loss(
    batch: &OclBatchEmbeddings,
    variant: OclVariant,
    temperature: Temperature,
) -> Result<f64> {
    ocl_breakdown(batch, variant, temperature).map(|b| b.total)
}

/// Graph nodes holding the four embedding sets.
#[derive(Debug, Clone, Copy)]
pub struct OclNodes {
    pub videos: NodeId,
    pub frames: Option<NodeId>,
    pub subtitles: NodeId,
    pub captions: Option<NodeId>,
}

impl OclNodes {
    fn source(&self, s: Source) -> Result<NodeId> {
        let missing = |what: &str| Error::Input(format!("variant needs {what} embeddings"));
        Ok(match s {
            Source::Video => self.videos,
            Source::Subtitle => self.subtitles,
            Source::Frame => self.frames.ok_or_else(|| missing("frame"))?,
            Source::Caption => self.captions.ok_or_else(|| missing("caption"))?,
        })
    }
}

/// Records the loss of `variant` on `graph`; the returned node is a scalar.
pub fn ocl_loss_graph(
    graph: &mut Graph,
    nodes: OclNodes,
    variant: OclVariant,
    log_inverse_tau: NodeId,
) -> Result<NodeId> {
    let mut terms = Vec::new();
    for term in variant.terms() {
        let (q, p, e) = term.dir.operands();
        let e = e.map(|e| nodes.source(e)).transpose()?;
        let node = graph.contrastive(nodes.source(q)?, nodes.source(p)?, e, log_inverse_tau)?;
        terms.push((term.weight, node));
    }
    Ok(graph.weighted_sum(&terms))
}
