//! Composite prompt construction: the initial prompt built from the degraded
//! input and its caption, and the cyclic prompt that replaces the
//! weather-dependent rows after the first restoration pass.

use serde::{Deserialize, Serialize};

use crate::autograd::{Scalar, Var};
use crate::error::{Error, Result};
use crate::layers::{Linear, Mlp};
use crate::params::{Bound, Init, ParamId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    /// Number of input-conditional vectors.
    #[serde(rename = "N")]
    pub n: usize,
    /// Prompt token width.
    #[serde(rename = "D")]
    pub d: usize,
    pub init_std: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        PromptConfig { n: 8, d: 192, init_std: 0.02 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TokenRole {
    Visual,
    Textual,
    WeatherFree,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptIteration {
    Initial,
    Cyclic,
}

/// A batch of prompt token matrices `[B, M, D]` sharing one role layout.
#[derive(Clone)]
pub struct PromptTokens<T: Scalar> {
    tokens: Var<T>,
    roles: Vec<TokenRole>,
    iteration: PromptIteration,
}

impl<T: Scalar> std::fmt::Debug for PromptTokens<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PromptTokens")
            .field("shape", &self.tokens.shape())
            .field("roles", &self.roles)
            .field("iteration", &self.iteration)
            .finish()
    }
}

impl<T: Scalar> PromptTokens<T> {
    /// Validates the role layout against the iteration form and checks that
    /// every entry is finite.
    ///
    /// The initial form is any number of visual rows followed by at most one
    /// textual row; the cyclic form is at most one weather-free row followed by
    /// at most one textual row. The full configuration yields exactly N+1 and 2
    /// rows; the shorter layouts arise only under ablation switches.
    pub fn new(tokens: Var<T>, roles: Vec<TokenRole>, iteration: PromptIteration) -> Result<Self> {
        let s = tokens.shape();
        if s.len() != 3 || s[1] != roles.len() {
            return Err(Error::DimensionMismatch(format!(
                "tokens {s:?} do not match {} roles",
                roles.len()
            )));
        }
        if roles.is_empty() {
            return Err(Error::DimensionMismatch("a prompt needs at least one token".into()));
        }
        let lead = match iteration {
            PromptIteration::Initial => TokenRole::Visual,
            PromptIteration::Cyclic => TokenRole::WeatherFree,
        };
        let leading = roles.iter().take_while(|&&r| r == lead).count();
        let rest = &roles[leading..];
        let layout_ok = rest.is_empty() || rest == [TokenRole::Textual];
        let count_ok = iteration == PromptIteration::Initial || leading <= 1;
        if !layout_ok || !count_ok {
            return Err(Error::ContextMismatch(format!("role layout {roles:?} is not a valid {iteration:?} prompt")));
        }
        if !tokens.value().all_finite() {
            return Err(Error::NonFinite("prompt tokens".into()));
        }
        Ok(PromptTokens { tokens, roles, iteration })
    }

    pub fn tokens(&self) -> &Var<T> {
        &self.tokens
    }

    pub fn roles(&self) -> &[TokenRole] {
        &self.roles
    }

    pub fn iteration(&self) -> PromptIteration {
        self.iteration
    }

    pub fn batch(&self) -> usize {
        self.tokens.shape()[0]
    }

    /// Token count M.
    pub fn len(&self) -> usize {
        self.roles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.roles.is_empty()
    }

    /// Token width D.
    pub fn width(&self) -> usize {
        self.tokens.shape()[2]
    }

    /// Rows `[B, 1, D]` at token index `m`.
    pub fn row(&self, m: usize) -> Var<T> {
        self.tokens.narrow(1, m, 1)
    }

    /// The textual token, if present.
    pub fn textual(&self) -> Option<Var<T>> {
        self.roles.iter().position(|&r| r == TokenRole::Textual).map(|m| self.row(m))
    }
}

fn check_width<T: Scalar>(v: &Var<T>, axis: usize, expected: usize) -> Result<()> {
    let got = v.shape()[axis];
    if got != expected {
        return Err(Error::WidthMismatch { expected, got });
    }
    Ok(())
}

/// Parameter layout of the prompt construction: input-conditional vectors,
/// the knowledge and weather-free projections, and the caption adapter.
#[derive(Clone, Debug)]
pub struct PromptEngine {
    /// `[N, D]`.
    pub input_vectors: ParamId,
    pub knowledge: Mlp,
    pub weather_free: Mlp,
    /// Maps a caption embedding into the prompt width.
    pub text_adapter: Linear,
    pub embed_dim: usize,
    pub n: usize,
    pub d: usize,
}

impl PromptEngine {
    pub fn new<T: Scalar>(init: &mut Init<T>, cfg: &PromptConfig, embed_dim: usize) -> Self {
        init.scope("prompt", |init| PromptEngine {
            input_vectors: init.normal("input_vectors", &[cfg.n, cfg.d], cfg.init_std),
            knowledge: Mlp::new(init, "knowledge", embed_dim, cfg.d, cfg.d),
            weather_free: Mlp::new(init, "weather_free", embed_dim, cfg.d, cfg.d),
            text_adapter: Linear::new(init, "text_adapter", embed_dim, cfg.d, false),
            embed_dim,
            n: cfg.n,
            d: cfg.d,
        })
    }

    fn check_embedding<T: Scalar>(&self, e: &Var<T>) -> Result<()> {
        if e.shape().len() != 2 {
            return Err(Error::DimensionMismatch(format!("expected [B, D_e] embeddings, got {:?}", e.shape())));
        }
        check_width(e, 1, self.embed_dim)
    }

    /// Knowledge token `[B, 1, D]` from image embeddings `[B, D_e]`.
    pub fn project_knowledge<T: Scalar>(&self, p: &Bound<T>, e: &Var<T>) -> Result<Var<T>> {
        self.check_embedding(e)?;
        Ok(self.knowledge.forward(p, e).reshape(&[e.shape()[0], 1, self.d]))
    }

    /// Weather-free token `[B, 1, D]` from restored-image embeddings `[B, D_e]`.
    pub fn project_weather_free<T: Scalar>(&self, p: &Bound<T>, e: &Var<T>) -> Result<Var<T>> {
        self.check_embedding(e)?;
        Ok(self.weather_free.forward(p, e).reshape(&[e.shape()[0], 1, self.d]))
    }

    /// Textual token `[B, 1, D]` from caption embeddings `[B, D_e]`.
    pub fn project_text<T: Scalar>(&self, p: &Bound<T>, e: &Var<T>) -> Result<Var<T>> {
        self.check_embedding(e)?;
        Ok(self.text_adapter.forward(p, e).reshape(&[e.shape()[0], 1, self.d]))
    }

    pub fn input_vectors<'a, T: Scalar>(&self, p: &'a Bound<T>) -> &'a Var<T> {
        p.get(self.input_vectors)
    }
}

/// Visual prompt `[B, N, D]`: the knowledge token replicated N times plus the
/// input-conditional vectors `[N, D]`.
pub fn build_visual_prompt<T: Scalar>(p_k: &Var<T>, p_i: &Var<T>) -> Result<Var<T>> {
    let ks = p_k.shape();
    let is = p_i.shape();
    if ks.len() != 3 || ks[1] != 1 || is.len() != 2 {
        return Err(Error::DimensionMismatch(format!("knowledge {ks:?} / input vectors {is:?}")));
    }
    check_width(p_i, 1, ks[2])?;
    Ok(p_k.add(&p_i.reshape(&[1, is[0], is[1]])))
}

fn concat_tokens<T: Scalar>(parts: &[(&Var<T>, TokenRole)]) -> Result<(Var<T>, Vec<TokenRole>)> {
    let first = parts.first().ok_or_else(|| Error::DimensionMismatch("a prompt needs at least one token".into()))?.0;
    let (b, d) = (first.shape()[0], first.shape()[2]);
    let mut roles = Vec::new();
    for (v, role) in parts {
        let s = v.shape();
        if s.len() != 3 {
            return Err(Error::DimensionMismatch(format!("expected [B, M, D] tokens, got {s:?}")));
        }
        if s[2] != d {
            return Err(Error::WidthMismatch { expected: d, got: s[2] });
        }
        if s[0] != b {
            return Err(Error::ShapeMismatch(first.shape().to_vec(), s.to_vec()));
        }
        roles.extend(std::iter::repeat_n(*role, s[1]));
    }
    let vars: Vec<Var<T>> = parts.iter().map(|(v, _)| (*v).clone()).collect();
    let tokens = if vars.len() == 1 { vars[0].clone() } else { Var::concat(&vars, 1) };
    Ok((tokens, roles))
}

/// Initial prompt: visual rows followed by the textual row. Either part may
/// be absent under ablation.
pub fn build_initial_c2p<T: Scalar>(p_v: Option<&Var<T>>, p_t: Option<&Var<T>>) -> Result<PromptTokens<T>> {
    let mut parts = Vec::new();
    if let Some(v) = p_v {
        parts.push((v, TokenRole::Visual));
    }
    if let Some(t) = p_t {
        parts.push((t, TokenRole::Textual));
    }
    let (tokens, roles) = concat_tokens(&parts)?;
    PromptTokens::new(tokens, roles, PromptIteration::Initial)
}

/// Cyclic prompt: the weather-free row followed by the textual row reused
/// from the initial prompt.
pub fn build_cyclic_c2p<T: Scalar>(p_w: Option<&Var<T>>, p_t: Option<&Var<T>>) -> Result<PromptTokens<T>> {
    let mut parts = Vec::new();
    if let Some(w) = p_w {
        parts.push((w, TokenRole::WeatherFree));
    }
    if let Some(t) = p_t {
        parts.push((t, TokenRole::Textual));
    }
    let (tokens, roles) = concat_tokens(&parts)?;
    PromptTokens::new(tokens, roles, PromptIteration::Cyclic)
}
