//! Four-level U-shaped transformer with prompt blocks ahead of the three
//! upsampling decoder levels, and the two-pass restore / re-prompt / restore
//! forward.

use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Tensor, Var};
use crate::config::Config;
use crate::embedder::Embedder;
use crate::error::{Error, Result};
use crate::layers::{ChannelNorm, Conv2d, DepthwiseConv};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::prompt::{build_cyclic_c2p, build_initial_c2p, build_visual_prompt, PromptEngine, PromptTokens};
use crate::prompt_block::{prompt_block_forward, BlockTrace, Iteration, IterationContext, PromptBlock};
use crate::residual::extract_residual_var;

/// Spatial reduction between the input and the latent.
pub const DOWNSCALE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub channels: [usize; 4],
    pub encoder_blocks: [usize; 4],
    pub decoder_blocks: [usize; 4],
    /// Attention heads of the transformer blocks per level.
    pub heads: [usize; 4],
    pub ffn_expansion: f64,
    /// Decoder levels that host a prompt block, deepest first.
    pub prompt_block_levels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl BackboneConfig {
    pub fn paper() -> Self {
        BackboneConfig {
            channels: [48, 96, 192, 384],
            encoder_blocks: [4, 6, 6, 8],
            decoder_blocks: [2, 3, 3, 4],
            heads: [1, 2, 4, 8],
            ffn_expansion: 2.66,
            prompt_block_levels: vec![3, 2, 1],
        }
    }

    pub fn desk() -> Self {
        BackboneConfig { channels: [16, 32, 64, 128], ..Self::paper() }
    }

    pub fn tiny() -> Self {
        BackboneConfig {
            channels: [8, 16, 32, 64],
            encoder_blocks: [1, 1, 1, 1],
            decoder_blocks: [1, 1, 1, 1],
            ..Self::paper()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channels[0] == 0 {
            return bad("backbone.channels must be positive".into());
        }
        for l in 1..4 {
            if self.channels[l] != 2 * self.channels[l - 1] {
                return bad(format!("backbone.channels must double per level, got {:?}", self.channels));
            }
        }
        for l in 0..4 {
            if self.encoder_blocks[l] == 0 {
                return bad("backbone.encoder_blocks must be positive".into());
            }
            if self.decoder_blocks[l] != self.encoder_blocks[l].div_ceil(2) {
                return bad(format!(
                    "backbone.decoder_blocks must be half the encoder blocks rounded up, got {:?} for {:?}",
                    self.decoder_blocks, self.encoder_blocks
                ));
            }
            if self.heads[l] == 0 || self.channels[l] % self.heads[l] != 0 {
                return bad(format!("backbone.heads {:?} must divide channels {:?}", self.heads, self.channels));
            }
        }
        if !(self.ffn_expansion.is_finite() && self.ffn_expansion > 0.0) {
            return bad("backbone.ffn_expansion must be positive".into());
        }
        let mut levels = self.prompt_block_levels.clone();
        levels.sort_unstable();
        if levels != [1, 2, 3] {
            return bad(format!(
                "backbone.prompt_block_levels must name decoder levels 1, 2 and 3 once each, got {:?}",
                self.prompt_block_levels
            ));
        }
        Ok(())
    }
}

/// Pre-norm channel attention followed by a pre-norm gated feed-forward.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    pub heads: usize,
    pub norm1: ChannelNorm,
    pub temperature: ParamId,
    pub qkv: Conv2d,
    pub qkv_dw: DepthwiseConv,
    pub attn_out: Conv2d,
    pub norm2: ChannelNorm,
    pub ffn_in: Conv2d,
    pub ffn_dw: DepthwiseConv,
    pub ffn_out: Conv2d,
}

impl TransformerBlock {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, c: usize, heads: usize, expansion: f64) -> Self {
        let hidden = ((c as f64) * expansion) as usize;
        init.scope(name, |init| TransformerBlock {
            heads,
            norm1: ChannelNorm::new(init, "norm1", c),
            temperature: init.constant("temperature", &[1, heads, 1, 1], 1.0),
            qkv: Conv2d::new(init, "qkv", c, 3 * c, 1, 1, false),
            qkv_dw: DepthwiseConv::new(init, "qkv_dw", 3 * c, 3, false),
            attn_out: Conv2d::new(init, "attn_out", c, c, 1, 1, false),
            norm2: ChannelNorm::new(init, "norm2", c),
            ffn_in: Conv2d::new(init, "ffn_in", c, 2 * hidden, 1, 1, false),
            ffn_dw: DepthwiseConv::new(init, "ffn_dw", 2 * hidden, 3, false),
            ffn_out: Conv2d::new(init, "ffn_out", hidden, c, 1, 1, false),
        })
    }

    fn attention<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        let s = x.shape();
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        let ch = c / self.heads;
        let qkv = self.qkv_dw.forward(p, &self.qkv.forward(p, x));
        let parts = qkv.split(1, &[c, c, c]);
        let shape = [n, self.heads, ch, h * w];
        let eps = T::lit(1e-12);
        let q = parts[0].reshape(&shape).l2_normalize_last(eps);
        let k = parts[1].reshape(&shape).l2_normalize_last(eps);
        let v = parts[2].reshape(&shape);
        let attn = q.matmul(&k, false, true).mul(p.get(self.temperature)).softmax_last();
        let out = attn.matmul(&v, false, false).reshape(&[n, c, h, w]);
        self.attn_out.forward(p, &out)
    }

    fn feed_forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Var<T> {
        let h = self.ffn_dw.forward(p, &self.ffn_in.forward(p, x));
        let hidden = h.shape()[1] / 2;
        let parts = h.split(1, &[hidden, hidden]);
        self.ffn_out.forward(p, &parts[0].gelu().mul(&parts[1]))
    }

    pub fn forward<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Var<T>> {
        let x = x.add(&self.attention(p, &self.norm1.forward(p, x)));
        let x = x.add(&self.feed_forward(p, &self.norm2.forward(p, &x)));
        if !x.value().all_finite() {
            return Err(Error::NonFinite("transformer block activations".into()));
        }
        Ok(x)
    }
}

fn run_blocks<T: Scalar>(p: &Bound<T>, blocks: &[TransformerBlock], x: Var<T>) -> Result<Var<T>> {
    blocks.iter().try_fold(x, |x, b| b.forward(p, &x))
}

/// One upsampling decoder stage: prompt block, upsample, skip fusion, blocks.
#[derive(Clone, Debug)]
pub struct DecoderStage {
    /// Decoder level this stage produces (2, 1 or 0).
    pub level: usize,
    pub prompt: PromptBlock,
    pub up: Conv2d,
    pub fuse: Conv2d,
    pub blocks: Vec<TransformerBlock>,
}

/// Parameter layout of the whole model.
#[derive(Clone, Debug)]
pub struct Network {
    pub config: BackboneConfig,
    pub patch_embed: Conv2d,
    pub encoder: Vec<Vec<TransformerBlock>>,
    pub down: Vec<Conv2d>,
    /// Decoder blocks on the latent; independent of the iteration.
    pub latent_decoder: Vec<TransformerBlock>,
    /// Stages in execution order, deepest first.
    pub stages: Vec<DecoderStage>,
    pub output: Conv2d,
    pub prompt: PromptEngine,
}

impl Network {
    pub fn new<T: Scalar>(init: &mut Init<T>, cfg: &Config) -> Self {
        let b = &cfg.backbone;
        let c = b.channels;
        let blocks = |init: &mut Init<T>, name: &str, level: usize, count: usize| -> Vec<TransformerBlock> {
            (0..count)
                .map(|i| TransformerBlock::new(init, &format!("{name}{level}.{i}"), c[level], b.heads[level], b.ffn_expansion))
                .collect()
        };
        let patch_embed = Conv2d::new(init, "patch_embed", 3, c[0], 3, 1, false);
        let mut encoder = Vec::new();
        let mut down = Vec::new();
        for l in 0..4 {
            encoder.push(blocks(init, "encoder", l, b.encoder_blocks[l]));
            if l < 3 {
                down.push(Conv2d::new(init, &format!("down{l}"), c[l], c[l + 1], 3, 2, false));
            }
        }
        let latent_decoder = blocks(init, "decoder", 3, b.decoder_blocks[3]);
        let mut stages = Vec::new();
        for &from in &b.prompt_block_levels {
            let to = from - 1;
            let prompt = PromptBlock::new(init, from, c[from], cfg.prompt.d, cfg.attn.scale_mode, &cfg.rpm);
            let up = Conv2d::new(init, &format!("up{from}"), c[from], 2 * c[from], 3, 1, false);
            let fuse = Conv2d::new(init, &format!("fuse{to}"), 2 * c[to], c[to], 1, 1, false);
            let blocks = blocks(init, "decoder", to, b.decoder_blocks[to]);
            stages.push(DecoderStage { level: to, prompt, up, fuse, blocks });
        }
        stages.sort_by(|a, b| b.level.cmp(&a.level));
        let output = Conv2d::new(init, "output", c[0], 3, 3, 1, false);
        let prompt = PromptEngine::new(init, &cfg.prompt, cfg.embedder.dim);
        Network { config: b.clone(), patch_embed, encoder, down, latent_decoder, stages, output, prompt }
    }

    pub fn prompt_blocks(&self) -> impl Iterator<Item = &PromptBlock> {
        self.stages.iter().map(|s| &s.prompt)
    }

    /// Encoder features: the latent `[N, 8 C0, H/8, W/8]` and the three
    /// full-, half- and quarter-resolution skips.
    pub fn encode<T: Scalar>(&self, p: &Bound<T>, x: &Var<T>) -> Result<Encoded<T>> {
        let s = x.shape();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::DimensionMismatch(format!("expected [N, 3, H, W], got {s:?}")));
        }
        if s[2] % DOWNSCALE != 0 || s[3] % DOWNSCALE != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::NotDivisible { h: s[2], w: s[3], multiple: DOWNSCALE });
        }
        let mut f = self.patch_embed.forward(p, x);
        let mut skips = Vec::new();
        for l in 0..4 {
            f = run_blocks(p, &self.encoder[l], f)?;
            if l < 3 {
                skips.push(f.clone());
                f = self.down[l].forward(p, &f);
            }
        }
        let latent = run_blocks(p, &self.latent_decoder, f.clone())?;
        Ok(Encoded { latent: f, decoder_input: latent, skips })
    }

    /// Decodes encoder features into an image `[N, 3, H, W]` clamped to
    /// `[0, 1]`, adding the input `x` as a global skip.
    pub fn decode<T: Scalar>(
        &self,
        p: &Bound<T>,
        enc: &Encoded<T>,
        x: &Var<T>,
        ctx: &IterationContext<T>,
        trace: &mut BlockTrace,
    ) -> Result<Var<T>> {
        let mut f = enc.decoder_input.clone();
        for stage in &self.stages {
            f = prompt_block_forward(p, &stage.prompt, &f, ctx, trace)?;
            let up = stage.up.forward(p, &f).pixel_shuffle(2);
            let skip = &enc.skips[stage.level];
            if up.shape() != skip.shape() {
                return Err(Error::ShapeMismatch(up.shape().to_vec(), skip.shape().to_vec()));
            }
            f = stage.fuse.forward(p, &Var::concat(&[up, skip.clone()], 1));
            f = run_blocks(p, &stage.blocks, f)?;
        }
        let out = self.output.forward(p, &f).add(x);
        Ok(out.clamp(T::zero(), T::one()))
    }
}

pub struct Encoded<T: Scalar> {
    /// Encoder output at the deepest level.
    pub latent: Var<T>,
    /// The latent after the iteration-independent decoder blocks.
    pub decoder_input: Var<T>,
    pub skips: Vec<Var<T>>,
}

/// Frozen embeddings conditioning one batch: image `[N, D_e]` and caption
/// `[N, D_e]`.
#[derive(Clone)]
pub struct Conditioning<T: Scalar> {
    pub image: Var<T>,
    pub text: Var<T>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    pub encode_calls: usize,
    pub blocks: BlockTrace,
}

pub struct CyclicOutput<T: Scalar> {
    /// First-pass restoration.
    pub first: Var<T>,
    /// Second-pass restoration.
    pub second: Var<T>,
    pub initial_prompt: Option<PromptTokens<T>>,
    pub second_prompt: Option<PromptTokens<T>>,
    pub trace: ForwardTrace,
}

impl Network {
    fn initial_prompt<T: Scalar>(&self, cfg: &Config, p: &Bound<T>, cond: &Conditioning<T>) -> Result<Option<(PromptTokens<T>, Option<Var<T>>)>> {
        let ab = &cfg.ablation;
        if !ab.prompts {
            return Ok(None);
        }
        let knowledge = ab.knowledge.then(|| self.prompt.project_knowledge(p, &cond.image)).transpose()?;
        let visual = match (knowledge, ab.input_vectors) {
            (Some(k), true) => Some(build_visual_prompt(&k, self.prompt.input_vectors(p))?),
            (Some(k), false) => Some(k),
            (None, true) => {
                // Broadcast the shared vectors to the batch so they concatenate with per-sample rows.
                let iv = self.prompt.input_vectors(p);
                let s = iv.shape();
                let batch = Var::constant(Tensor::zeros(&[cond.image.shape()[0], 1, s[1]]));
                Some(batch.add(&iv.reshape(&[1, s[0], s[1]])))
            }
            (None, false) => None,
        };
        let text = ab.text.then(|| self.prompt.project_text(p, &cond.text)).transpose()?;
        if visual.is_none() && text.is_none() {
            return Ok(None);
        }
        Ok(Some((build_initial_c2p(visual.as_ref(), text.as_ref())?, text)))
    }

    /// Restores `x: [N, 3, H, W]` twice: once with the initial prompt, then
    /// again with the prompt and prior rebuilt from the first result. The
    /// encoder runs once and its features serve both passes.
    pub fn forward_cyclic<T: Scalar>(
        &self,
        cfg: &Config,
        p: &Bound<T>,
        x: &Var<T>,
        cond: &Conditioning<T>,
        embedder: &Embedder,
    ) -> Result<CyclicOutput<T>> {
        let ab = &cfg.ablation;
        let mut trace = ForwardTrace::default();
        let enc = self.encode(p, x)?;
        trace.encode_calls += 1;

        let initial = self.initial_prompt(cfg, p, cond)?;
        let ctx1 = match &initial {
            Some((c2p, _)) => IterationContext::first(c2p.clone())?,
            None => IterationContext::unprompted(Iteration::First),
        };
        let first = self.decode(p, &enc, x, &ctx1, &mut trace.blocks)?;

        let restored = if ab.stop_gradient { first.detach() } else { first.clone() };
        let ctx2 = match &initial {
            None => IterationContext::unprompted(Iteration::Second),
            Some((c2p, _)) if !ab.epm => IterationContext::second_ablated(Some(c2p.clone()), None),
            Some((_, text)) => {
                let e = embedder.embed_restored(&restored)?;
                let w = self.prompt.project_weather_free(p, &e)?;
                let cyclic = build_cyclic_c2p(Some(&w), text.as_ref())?;
                if ab.rpm {
                    IterationContext::second(cyclic, extract_residual_var(&restored)?)?
                } else {
                    IterationContext::second_ablated(Some(cyclic), None)
                }
            }
        };
        let second = self.decode(p, &enc, x, &ctx2, &mut trace.blocks)?;
        Ok(CyclicOutput {
            first,
            second,
            initial_prompt: initial.map(|(c, _)| c),
            second_prompt: ctx2.prompts().cloned(),
            trace,
        })
    }
}

/// Network layout together with its parameters and configuration.
#[derive(Clone)]
pub struct Model<T: Scalar> {
    pub config: Config,
    pub network: Network,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters seeded from `config.train.seed`.
    pub fn new(config: &Config) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::default();
        let network = Network::new(&mut Init::new(&mut params, config.train.seed), config);
        Ok(Model { config: config.clone(), network, params })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    /// Same model in another element type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model { config: self.config.clone(), network: self.network.clone(), params: self.params.cast() }
    }

    pub fn forward_cyclic(&self, p: &Bound<T>, x: &Var<T>, cond: &Conditioning<T>, embedder: &Embedder) -> Result<CyclicOutput<T>> {
        self.network.forward_cyclic(&self.config, p, x, cond, embedder)
    }

    /// Inference on a batch tensor without recording a graph.
    pub fn infer(&self, x: &Tensor<T>, cond_image: &Tensor<T>, cond_text: &Tensor<T>, embedder: &Embedder) -> Result<(Tensor<T>, Tensor<T>)> {
        let p = self.params.bind(false);
        let cond = Conditioning { image: Var::constant(cond_image.clone()), text: Var::constant(cond_text.clone()) };
        let out = self.forward_cyclic(&p, &Var::constant(x.clone()), &cond, embedder)?;
        Ok((out.first.value().clone(), out.second.value().clone()))
    }
}
