//! Prompt injection into decoder features: cross-attention from spatial
//! positions to prompt tokens, followed in the second iteration by residual
//! prior modulation.

use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Var};
use crate::error::{Error, Result};
use crate::layers::Linear;
use crate::params::{Bound, Init};
use crate::prompt::{PromptIteration, PromptTokens};
use crate::residual::{compute_affine, modulate, Rpm, RpmConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleMode {
    /// Scores divided by the channel count.
    Paper,
    /// Scores divided by the square root of the channel count.
    #[default]
    Sqrt,
}

impl ScaleMode {
    pub fn divisor(self, c: usize) -> f64 {
        match self {
            ScaleMode::Paper => c as f64,
            ScaleMode::Sqrt => (c as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttnConfig {
    pub scale_mode: ScaleMode,
}

/// Bias-free query, key and value projections of one prompt block.
#[derive(Clone, Debug)]
pub struct AttentionParams {
    /// `C -> C` on feature tokens.
    pub wq: Linear,
    /// `D -> C` on prompt tokens.
    pub wk: Linear,
    /// `D -> C` on prompt tokens.
    pub wv: Linear,
    pub channels: usize,
    pub prompt_dim: usize,
    pub scale_mode: ScaleMode,
}

impl AttentionParams {
    pub fn new<T: Scalar>(init: &mut Init<T>, name: &str, c: usize, d: usize, scale_mode: ScaleMode) -> Self {
        init.scope(name, |init| AttentionParams {
            wq: Linear::new(init, "wq", c, c, false),
            wk: Linear::new(init, "wk", d, c, false),
            wv: Linear::new(init, "wv", d, c, false),
            channels: c,
            prompt_dim: d,
            scale_mode,
        })
    }
}

/// Cross-attention output and the attention weights `[N, H*W, M]`.
pub struct Attended<T: Scalar> {
    pub output: Var<T>,
    pub weights: Var<T>,
}

/// `softmax(Q K^T / scale) V` with queries from the `H*W` positions of
/// `x: [N, C, H, W]` and keys/values from the `M` prompt tokens. Returns the
/// attended features in `[N, C, H, W]` layout.
pub fn cross_attend<T: Scalar>(p: &Bound<T>, attn: &AttentionParams, x: &Var<T>, prompts: &PromptTokens<T>) -> Result<Attended<T>> {
    let s = x.shape();
    if s.len() != 4 || s[1] != attn.channels {
        return Err(Error::DimensionMismatch(format!("expected [N, {}, H, W] features, got {s:?}", attn.channels)));
    }
    if prompts.width() != attn.prompt_dim {
        return Err(Error::WidthMismatch { expected: attn.prompt_dim, got: prompts.width() });
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    if prompts.batch() != n && prompts.batch() != 1 {
        return Err(Error::DimensionMismatch(format!("{} prompt sets for a batch of {n}", prompts.batch())));
    }
    if !x.value().all_finite() {
        return Err(Error::NonFinite("cross-attention input".into()));
    }
    let tokens = x.reshape(&[n, c, h * w]);
    // Q^T: [N, C, HW]
    let q_t = p.get(attn.wq.weight).matmul(&tokens, false, false);
    let k = attn.wk.forward(p, prompts.tokens());
    let v = attn.wv.forward(p, prompts.tokens());
    let scores = q_t.matmul(&k, true, true).scale(T::lit(1.0 / attn.scale_mode.divisor(c)));
    let weights = scores.softmax_last();
    // (A V)^T = V^T A^T: [N, C, HW]
    let output = v.matmul(&weights, true, true).reshape(&[n, c, h, w]);
    Ok(Attended { output, weights })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Iteration {
    First,
    Second,
}

/// Which prompt and prior a decoder pass uses.
#[derive(Clone)]
pub struct IterationContext<T: Scalar> {
    iteration: Iteration,
    prompts: Option<PromptTokens<T>>,
    residual: Option<Var<T>>,
}

impl<T: Scalar> IterationContext<T> {
    /// First pass: initial prompt, no prior.
    pub fn first(prompts: PromptTokens<T>) -> Result<Self> {
        if prompts.iteration() != PromptIteration::Initial {
            return Err(Error::ContextMismatch("the first iteration needs the initial prompt".into()));
        }
        Ok(IterationContext { iteration: Iteration::First, prompts: Some(prompts), residual: None })
    }

    /// Second pass: cyclic prompt and the residual map `[N, 1, H, W]` of the
    /// first-pass output.
    pub fn second(prompts: PromptTokens<T>, residual: Var<T>) -> Result<Self> {
        if prompts.iteration() != PromptIteration::Cyclic {
            return Err(Error::ContextMismatch("the second iteration needs the cyclic prompt".into()));
        }
        Ok(IterationContext { iteration: Iteration::Second, prompts: Some(prompts), residual: Some(residual) })
    }

    /// Second pass with some of its inputs switched off by ablation: either
    /// prompt form may be given, and the prior may be absent.
    pub fn second_ablated(prompts: Option<PromptTokens<T>>, residual: Option<Var<T>>) -> Self {
        IterationContext { iteration: Iteration::Second, prompts, residual }
    }

    /// A pass without any prompt conditioning; prompt blocks are skipped.
    pub fn unprompted(iteration: Iteration) -> Self {
        IterationContext { iteration, prompts: None, residual: None }
    }

    pub fn iteration(&self) -> Iteration {
        self.iteration
    }

    pub fn prompts(&self) -> Option<&PromptTokens<T>> {
        self.prompts.as_ref()
    }

    pub fn residual(&self) -> Option<&Var<T>> {
        self.residual.as_ref()
    }
}

/// Records which prompt-block branches ran, for plumbing checks.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BlockTrace {
    /// `(level, iteration)` per prompt-block call.
    pub blocks: Vec<(usize, Iteration)>,
    /// `(level, iteration)` per modulator call.
    pub rpm: Vec<(usize, Iteration)>,
}

/// Cross-attention plus a modulator for one decoder level.
#[derive(Clone, Debug)]
pub struct PromptBlock {
    pub level: usize,
    pub attn: AttentionParams,
    pub rpm: Rpm,
}

impl PromptBlock {
    pub fn new<T: Scalar>(
        init: &mut Init<T>,
        level: usize,
        c: usize,
        d: usize,
        scale_mode: ScaleMode,
        rpm: &RpmConfig,
    ) -> Self {
        init.scope(&format!("prompt_block{level}"), |init| PromptBlock {
            level,
            attn: AttentionParams::new(init, "attn", c, d, scale_mode),
            rpm: Rpm::new(init, "rpm", c, rpm),
        })
    }
}

/// `x + attend(x)` in the first iteration and `x + alpha * attend(x) + beta`
/// in the second, with `(alpha, beta)` derived from the residual prior.
pub fn prompt_block_forward<T: Scalar>(
    p: &Bound<T>,
    block: &PromptBlock,
    x: &Var<T>,
    ctx: &IterationContext<T>,
    trace: &mut BlockTrace,
) -> Result<Var<T>> {
    let Some(prompts) = ctx.prompts() else {
        return Ok(x.clone());
    };
    trace.blocks.push((block.level, ctx.iteration()));
    let attended = cross_attend(p, &block.attn, x, prompts)?.output;
    let branch = match (ctx.iteration(), ctx.residual()) {
        (Iteration::First, None) => attended,
        (Iteration::First, Some(_)) => {
            return Err(Error::ContextMismatch("the first iteration takes no residual prior".into()));
        }
        (Iteration::Second, Some(r)) => {
            trace.rpm.push((block.level, Iteration::Second));
            let s = x.shape();
            let (alpha, beta) = compute_affine(p, std::slice::from_ref(&block.rpm), 0, r, s[2], s[3])?;
            modulate(&attended, &alpha, &beta)?
        }
        (Iteration::Second, None) => attended,
    };
    Ok(x.add(&branch))
}
