//! Central finite-difference gradient checking in `f64`.
//!
//! The scalar objective is a fixed pseudo-random weighted sum of the
//! function output, so that operations whose plain output sum is constant
//! (softmax rows, normalizations) are still probed in every direction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Tensor, Var};
use crate::backbone::TransformerBlock;
use crate::params::{Bound, Init, ParamStore};
use crate::prompt::{build_cyclic_c2p, build_initial_c2p, build_visual_prompt, PromptConfig, PromptEngine, PromptIteration, PromptTokens, TokenRole};
use crate::prompt_block::{prompt_block_forward, BlockTrace, IterationContext, PromptBlock, ScaleMode};
use crate::residual::{Chimb, Rpm, RpmConfig};
use crate::train::loss_total;

/// Step used for the central differences.
pub const FD_STEP: f64 = 1e-5;
/// Gradient magnitudes below this are compared absolutely.
pub const FD_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub input: usize,
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    /// Inputs whose analytic gradient is identically zero.
    pub fn zero_gradient_inputs(&self) -> Vec<&str> {
        self.entries.iter().filter(|e| e.max_abs_grad == 0.0).map(|e| e.name.as_str()).collect()
    }
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FD_FLOOR)
}

/// Compares the autograd gradient of `f` against central differences for
/// every element of every named input.
pub fn check<F>(inputs: &[(&str, Tensor<f64>)], seed: u64, f: F) -> GradCheckReport
where
    F: Fn(&[Var<f64>]) -> Var<f64>,
{
    let vars: Vec<Var<f64>> = inputs.iter().map(|(_, t)| Var::param(t.clone())).collect();
    let out = f(&vars);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..out.value().numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let weights = Tensor::from_vec(out.shape(), weights);
    let grads = out.backward_with(weights.clone());

    let objective = |ts: &[Tensor<f64>]| -> f64 {
        let cs: Vec<Var<f64>> = ts.iter().cloned().map(Var::constant).collect();
        let y = f(&cs);
        y.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum()
    };

    let mut entries = Vec::with_capacity(inputs.len());
    let base: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    for (i, (name, t)) in inputs.iter().enumerate() {
        let analytic = grads.get_or_zeros(&vars[i]);
        let mut worst: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for j in 0..t.numel() {
            let mut probe = base.clone();
            let orig = t.data()[j];
            probe[i].data_mut()[j] = orig + FD_STEP;
            let up = objective(&probe);
            probe[i].data_mut()[j] = orig - FD_STEP;
            let down = objective(&probe);
            let numeric = (up - down) / (2.0 * FD_STEP);
            let a = analytic.data()[j];
            max_abs = max_abs.max(a.abs());
            worst = worst.max(rel_err(a, numeric));
        }
        entries.push(GradCheckEntry { input: i, name: name.to_string(), max_rel_err: worst, max_abs_grad: max_abs });
    }
    GradCheckReport { entries }
}

/// [`check`] over every parameter of `store` followed by the extra `inputs`.
/// `f` receives the parameters bound as leaves and the input variables.
pub fn check_params<F>(store: &ParamStore<f64>, inputs: &[(&str, Tensor<f64>)], seed: u64, f: F) -> GradCheckReport
where
    F: Fn(&Bound<f64>, &[Var<f64>]) -> Var<f64>,
{
    let n = store.len();
    let mut all: Vec<(&str, Tensor<f64>)> = store.iter().map(|(name, t)| (name, t.clone())).collect();
    all.extend(inputs.iter().map(|(name, t)| (*name, t.clone())));
    check(&all, seed, |vars| {
        let bound = Bound::from_vars(vars[..n].to_vec());
        f(&bound, &vars[n..])
    })
}

/// Deterministic uniform tensor in `[lo, hi)`.
pub fn uniform(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect())
}

/// One named finite-difference check of a model component.
#[derive(Debug, Clone)]
pub struct ComponentCheck {
    pub component: &'static str,
    pub report: GradCheckReport,
}

fn build<L>(seed: u64, f: impl FnOnce(&mut Init<f64>) -> L) -> (ParamStore<f64>, L) {
    let mut store = ParamStore::default();
    let layout = f(&mut Init::new(&mut store, seed));
    (store, layout)
}

/// Finite-difference checks of every trainable component on small probes
/// (at most 4x4 spatial, a few channels), covering all parameters and inputs.
pub fn component_suite() -> Vec<ComponentCheck> {
    let mut out = Vec::new();
    let mut push = |component, report| out.push(ComponentCheck { component, report });

    let (store, block) = build(1, |i| TransformerBlock::new(i, "block", 4, 2, 2.66));
    push(
        "transformer_block",
        check_params(&store, &[("x", uniform(&[1, 4, 2, 2], -1.0, 1.0, 11))], 21, |p, v| block.forward(p, &v[0]).unwrap()),
    );

    let rpm_cfg = RpmConfig { kernel: 3, se_ratio: 1 };
    let (store, chimb) = build(2, |i| Chimb::new(i, "chimb", 4, &rpm_cfg));
    push(
        "chimb",
        check_params(&store, &[("x", uniform(&[1, 4, 2, 2], -1.0, 1.0, 12))], 22, |p, v| chimb.forward(p, &v[0])),
    );

    let (store, rpm) = build(3, |i| Rpm::new(i, "rpm", 2, &rpm_cfg));
    push(
        "residual_prior_modulator",
        check_params(&store, &[("r", uniform(&[1, 1, 4, 4], 0.0, 1.0, 13))], 23, |p, v| {
            let (a, b) = rpm.forward(p, &v[0], 2, 2);
            Var::concat(&[a, b], 1)
        }),
    );

    let (store, pb) = build(4, |i| PromptBlock::new(i, 1, 4, 3, ScaleMode::Sqrt, &rpm_cfg));
    let x = uniform(&[1, 4, 2, 2], -1.0, 1.0, 14);
    push(
        "prompt_block_first",
        check_params(&store, &[("x", x.clone()), ("prompt", uniform(&[1, 3, 3], -1.0, 1.0, 15))], 24, |p, v| {
            let roles = vec![TokenRole::Visual, TokenRole::Visual, TokenRole::Textual];
            let tokens = PromptTokens::new(v[1].clone(), roles, PromptIteration::Initial).unwrap();
            let ctx = IterationContext::first(tokens).unwrap();
            prompt_block_forward(p, &pb, &v[0], &ctx, &mut BlockTrace::default()).unwrap()
        }),
    );
    push(
        "prompt_block_second",
        check_params(
            &store,
            &[("x", x), ("prompt", uniform(&[1, 2, 3], -1.0, 1.0, 16)), ("r", uniform(&[1, 1, 4, 4], 0.0, 1.0, 17))],
            25,
            |p, v| {
                let roles = vec![TokenRole::WeatherFree, TokenRole::Textual];
                let tokens = PromptTokens::new(v[1].clone(), roles, PromptIteration::Cyclic).unwrap();
                let ctx = IterationContext::second(tokens, v[2].clone()).unwrap();
                prompt_block_forward(p, &pb, &v[0], &ctx, &mut BlockTrace::default()).unwrap()
            },
        ),
    );

    let cfg = PromptConfig { n: 2, d: 3, init_std: 0.5 };
    let (store, engine) = build(5, |i| PromptEngine::new(i, &cfg, 4));
    push(
        "prompt_engine",
        check_params(
            &store,
            &[
                ("image_embedding", uniform(&[2, 4], -1.0, 1.0, 18)),
                ("text_embedding", uniform(&[2, 4], -1.0, 1.0, 19)),
                ("restored_embedding", uniform(&[2, 4], -1.0, 1.0, 20)),
            ],
            26,
            |p, v| {
                let k = engine.project_knowledge(p, &v[0]).unwrap();
                let t = engine.project_text(p, &v[1]).unwrap();
                let w = engine.project_weather_free(p, &v[2]).unwrap();
                let visual = build_visual_prompt(&k, engine.input_vectors(p)).unwrap();
                let initial = build_initial_c2p(Some(&visual), Some(&t)).unwrap();
                let cyclic = build_cyclic_c2p(Some(&w), Some(&t)).unwrap();
                Var::concat(&[initial.tokens().clone(), cyclic.tokens().clone()], 1)
            },
        ),
    );

    push(
        "loss_total",
        check(
            &[
                ("first", uniform(&[1, 3, 2, 2], 0.0, 1.0, 27)),
                ("second", uniform(&[1, 3, 2, 2], 0.0, 1.0, 28)),
                ("target", uniform(&[1, 3, 2, 2], 0.0, 1.0, 29)),
            ],
            30,
            |v| loss_total(&v[0], &v[1], &v[2]).unwrap(),
        ),
    );
    out
}
