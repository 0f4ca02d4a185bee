//! Persona-direction toolkit: contrastive extraction, runtime steering,
//! activation capping, folding a steering vector into the weights, and
//! per-layer effect sweeps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hooks::{Hook, HookSet, Phase};
use crate::model::{DecodePolicy, Model, TokenId};
use crate::numcore::Vector;
use crate::trace::trace_run;
use crate::transcript::{Transcript, TurnRole, Vocab};

/// A unit vector in residual-stream space with a layer tag: a feature or
/// persona direction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    label: String,
    layer: usize,
    unit: Vector,
}

#[derive(Serialize, Deserialize)]
struct DirectionFile {
    label: String,
    layer: usize,
    dim: usize,
    unit: Vec<f64>,
}

impl Direction {
    /// Normalizes `raw`; errors on (near-)zero norm.
    pub fn new(label: &str, layer: usize, raw: Vector) -> Result<Self> {
        let unit = raw.normalized()?;
        Ok(Direction { label: label.to_string(), layer, unit })
    }

    pub fn unit(&self) -> &Vector {
        &self.unit
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn dim(&self) -> usize {
        self.unit.dim()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = DirectionFile {
            label: self.label.clone(),
            layer: self.layer,
            dim: self.dim(),
            unit: self.unit.as_slice().to_vec(),
        };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: DirectionFile = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        if file.unit.len() != file.dim {
            return Err(Error::DimMismatch { left: file.unit.len(), right: file.dim });
        }
        let v = Vector::new(file.unit);
        if !v.is_finite() {
            return Err(Error::NonFinite("direction file"));
        }
        if (v.norm() - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArg("direction file is not unit-norm".into()));
        }
        Ok(Direction { label: file.label, layer: file.layer, unit: v })
    }
}

/// Plan for adding `alpha · unit` to the residual at the entry of every
/// layer in range, gated by phase.
#[derive(Debug, Clone)]
pub struct SteeringPlan {
    pub direction: Direction,
    /// Inclusive layer range.
    pub layers: (usize, usize),
    pub alpha: f64,
    pub phase: Phase,
}

/// Plan for one-sided clamping: whenever the projection onto the direction
/// drops below `tau` at an in-range layer entry, it is raised to `tau`.
#[derive(Debug, Clone)]
pub struct CapPlan {
    pub direction: Direction,
    pub layers: (usize, usize),
    pub tau: f64,
    pub phase: Phase,
}

/// Hook constructor for runtime steering.
pub fn steering_hook(plan: SteeringPlan) -> Hook {
    Hook::Steer(plan)
}

/// Hook constructor for activation capping.
pub fn cap_hook(plan: CapPlan) -> Hook {
    Hook::Cap(plan)
}

// ---------------------------------------------------------------------------
// Extraction
// ---------------------------------------------------------------------------

/// Response tokens generated per prompt during extraction.
const EXTRACT_RESPONSE_TOKENS: usize = 4;

/// Contrastive extraction: runs each prompt as a user turn, averages the
/// residual at `layer` over the generated response tokens per side, and
/// returns normalize(mean⁺ − mean⁻).
pub fn extract_direction(
    model: &Model,
    vocab: &Vocab,
    positive_prompts: &[&str],
    negative_prompts: &[&str],
    layer: usize,
) -> Result<Direction> {
    if positive_prompts.is_empty() || negative_prompts.is_empty() {
        return Err(Error::EmptyInput("prompt set"));
    }
    if layer > model.spec().n_layers {
        return Err(Error::LayerOutOfRange { layer, n_layers: model.spec().n_layers });
    }
    let mean_pos = side_mean(model, vocab, positive_prompts, layer)?;
    let mean_neg = side_mean(model, vocab, negative_prompts, layer)?;
    let mut diff = mean_pos;
    diff.axpy(-1.0, &mean_neg);
    if diff.norm() < 1e-12 {
        return Err(Error::DegenerateContrast);
    }
    Direction::new("extracted", layer, diff)
}

fn side_mean(model: &Model, vocab: &Vocab, prompts: &[&str], layer: usize) -> Result<Vector> {
    let mut sum = Vector::zeros(model.spec().d_model);
    let mut count = 0usize;
    for prompt in prompts {
        let t = Transcript::from_turns(vocab, &[(TurnRole::User, prompt)])?;
        let prompt_len = t.len_tokens();
        let (_full, trace) = trace_run(
            model,
            vocab,
            &t,
            EXTRACT_RESPONSE_TOKENS,
            DecodePolicy::Greedy,
            HookSet::new(),
        )?;
        for pos in prompt_len..prompt_len + EXTRACT_RESPONSE_TOKENS {
            sum.add_assign(trace.residual_at_boundary(layer, pos)?);
            count += 1;
        }
    }
    Ok(sum.scaled(1.0 / count as f64))
}

// ---------------------------------------------------------------------------
// Bias folding
// ---------------------------------------------------------------------------

/// Returns a model whose weights add `alpha · unit` into the residual at
/// the given layer's entry on every forward pass, unconditionally. The
/// original model is untouched. Running the folded model equals running the
/// original with an always-on steering hook at the same site.
pub fn fold_bias(model: &Model, direction: &Direction, alpha: f64, layer: usize) -> Result<Model> {
    let spec = model.spec();
    if layer >= spec.n_layers {
        return Err(Error::LayerOutOfRange { layer, n_layers: spec.n_layers });
    }
    if direction.dim() != spec.d_model {
        return Err(Error::DimMismatch { left: direction.dim(), right: spec.d_model });
    }
    let mut folded = model.clone();
    folded.weights_mut().layers[layer].resid_bias.axpy(alpha, direction.unit());
    Ok(folded)
}

// ---------------------------------------------------------------------------
// Probe suites and layer sweeps
// ---------------------------------------------------------------------------

/// A set of probe conversations, each answered with a single generated
/// token.
#[derive(Debug, Clone)]
pub struct ProbeSuite {
    pub contexts: Vec<Transcript>,
}

impl ProbeSuite {
    pub fn len(&self) -> usize {
        self.contexts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.contexts.is_empty()
    }
}

/// Greedily answers one probe context with a single token.
pub fn run_probe(
    model: &Model,
    vocab: &Vocab,
    context: &Transcript,
    hooks: HookSet,
) -> Result<TokenId> {
    let mut session = crate::model::Session::with_hooks(model, vocab, hooks)?;
    session.feed_transcript(context)?;
    let toks = session.generate_turn(1, DecodePolicy::Greedy)?;
    Ok(toks[0])
}

/// Answers every probe in the suite.
pub fn run_probe_suite(
    model: &Model,
    vocab: &Vocab,
    suite: &ProbeSuite,
    hooks: &HookSet,
) -> Result<Vec<TokenId>> {
    suite
        .contexts
        .iter()
        .map(|c| run_probe(model, vocab, c, hooks.clone()))
        .collect()
}

/// For each single layer, steers at that layer only and records the probe
/// flip rate against the unsteered baseline. Returns (layer, flip_rate)
/// pairs for every layer.
pub fn layer_sweep(
    model: &Model,
    vocab: &Vocab,
    direction: &Direction,
    alpha: f64,
    suite: &ProbeSuite,
) -> Result<Vec<(usize, f64)>> {
    if suite.is_empty() {
        return Err(Error::EmptyInput("probe suite"));
    }
    let baseline = run_probe_suite(model, vocab, suite, &HookSet::new())?;
    let spec = model.spec();
    let mut curve = Vec::with_capacity(spec.n_layers);
    for layer in 0..spec.n_layers {
        let mut hooks = HookSet::new();
        hooks.attach(
            steering_hook(SteeringPlan {
                direction: direction.clone(),
                layers: (layer, layer),
                alpha,
                phase: Phase::All,
            }),
            spec.n_layers,
            spec.d_model,
        )?;
        let steered = run_probe_suite(model, vocab, suite, &hooks)?;
        let flips = baseline.iter().zip(steered.iter()).filter(|(a, b)| a != b).count();
        curve.push((layer, flips as f64 / suite.len() as f64));
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_random_model, random_transcript, RandomModelOpts};

    #[test]
    fn direction_normalizes_and_rejects_zero() {
        let d = Direction::new("d", 3, Vector::new(vec![3.0, 4.0])).unwrap();
        assert!((d.unit().norm() - 1.0).abs() < 1e-12);
        assert_eq!(d.layer(), 3);
        assert!(Direction::new("z", 0, Vector::zeros(4)).is_err());
    }

    #[test]
    fn direction_file_round_trip() {
        let d = Direction::new("axis", 5, Vector::new(vec![1.0, -2.0, 0.5])).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("axis.json");
        d.save(&path).unwrap();
        let back = Direction::load(&path).unwrap();
        assert_eq!(back.label(), "axis");
        assert_eq!(back.layer(), 5);
        assert_eq!(back.unit().as_slice(), d.unit().as_slice());
    }

    #[test]
    fn zero_alpha_steering_is_bit_neutral() {
        let (model, vocab) = build_random_model(31, RandomModelOpts::default());
        let prompt = random_transcript(&vocab, 310, 5);
        let spec = model.spec();

        let baseline =
            crate::model::generate(&model, &vocab, &prompt, 6, DecodePolicy::Greedy, HookSet::new())
                .unwrap();

        let dir = Direction::new("d", 0, Vector::basis(spec.d_model, 2)).unwrap();
        let mut hooks = HookSet::new();
        hooks
            .attach(
                steering_hook(SteeringPlan {
                    direction: dir,
                    layers: (0, spec.n_layers - 1),
                    alpha: 0.0,
                    phase: Phase::All,
                }),
                spec.n_layers,
                spec.d_model,
            )
            .unwrap();
        let steered =
            crate::model::generate(&model, &vocab, &prompt, 6, DecodePolicy::Greedy, hooks).unwrap();
        let a: Vec<_> = baseline.positions().iter().map(|(t, _, _)| *t).collect();
        let b: Vec<_> = steered.positions().iter().map(|(t, _, _)| *t).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn fold_zero_alpha_is_bit_identical_weights() {
        let (model, _vocab) = build_random_model(32, RandomModelOpts::default());
        let dir = Direction::new("d", 0, Vector::basis(model.spec().d_model, 1)).unwrap();
        let folded = fold_bias(&model, &dir, 0.0, 2).unwrap();
        assert_eq!(model.weights(), folded.weights());
    }

    #[test]
    fn fold_equals_runtime_steering() {
        let (model, vocab) = build_random_model(33, RandomModelOpts::default());
        let prompt = random_transcript(&vocab, 330, 6);
        let spec = model.spec();
        let dir = Direction::new("d", 0, Vector::new(vec![0.3; 16])).unwrap();

        for (alpha, layer) in [(0.8, 1usize), (-1.5, 2), (2.0, 0)] {
            let folded = fold_bias(&model, &dir, alpha, layer).unwrap();
            let mut fold_session = crate::model::Session::new(&folded, &vocab).unwrap();
            fold_session.feed_transcript(&prompt).unwrap();
            fold_session.generate_turn(5, DecodePolicy::Greedy).unwrap();
            let fold_logits = fold_session.next_token_logits().unwrap().clone();

            let mut hooks = HookSet::new();
            hooks
                .attach(
                    steering_hook(SteeringPlan {
                        direction: dir.clone(),
                        layers: (layer, layer),
                        alpha,
                        phase: Phase::All,
                    }),
                    spec.n_layers,
                    spec.d_model,
                )
                .unwrap();
            let mut steer_session = crate::model::Session::with_hooks(&model, &vocab, hooks).unwrap();
            steer_session.feed_transcript(&prompt).unwrap();
            steer_session.generate_turn(5, DecodePolicy::Greedy).unwrap();
            let steer_logits = steer_session.next_token_logits().unwrap().clone();

            for (f, s) in fold_logits.as_slice().iter().zip(steer_logits.as_slice()) {
                let rel = (f - s).abs() / (1.0 + f.abs().max(s.abs()));
                assert!(rel <= 1e-9, "alpha {alpha} layer {layer}: {f} vs {s}");
            }
        }
    }

    #[test]
    fn fold_layer_out_of_range() {
        let (model, _vocab) = build_random_model(34, RandomModelOpts::default());
        let dir = Direction::new("d", 0, Vector::basis(model.spec().d_model, 0)).unwrap();
        assert!(matches!(
            fold_bias(&model, &dir, 1.0, 99),
            Err(Error::LayerOutOfRange { .. })
        ));
    }

    #[test]
    fn extraction_rejects_identical_sides() {
        let (model, vocab) = build_random_model(35, RandomModelOpts::default());
        let prompts = ["t0 t1", "t2 t3"];
        let err = extract_direction(&model, &vocab, &prompts, &prompts, 1).unwrap_err();
        assert!(matches!(err, Error::DegenerateContrast));
    }

    #[test]
    fn extraction_single_prompt_per_side_is_unit() {
        let (model, vocab) = build_random_model(36, RandomModelOpts::default());
        let d = extract_direction(&model, &vocab, &["t0 t1"], &["t4 t5"], 1).unwrap();
        assert!((d.unit().norm() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn layer_sweep_zero_alpha_is_flat_zero() {
        let (model, vocab) = build_random_model(37, RandomModelOpts::default());
        let dir = Direction::new("d", 0, Vector::basis(model.spec().d_model, 3)).unwrap();
        let suite = ProbeSuite {
            contexts: vec![
                Transcript::from_turns(&vocab, &[(TurnRole::User, "t0 t1")]).unwrap(),
                Transcript::from_turns(&vocab, &[(TurnRole::User, "t2")]).unwrap(),
            ],
        };
        let curve = layer_sweep(&model, &vocab, &dir, 0.0, &suite).unwrap();
        assert_eq!(curve.len(), model.spec().n_layers);
        assert!(curve.iter().all(|(_, rate)| *rate == 0.0));
    }

    #[test]
    fn phase_gated_hook_leaves_user_pass_bit_equal() {
        // Gating discipline at the single-pass level: with an identical
        // cache and input, a generation-only hook must not perturb a
        // scripted user token's forward pass at all.
        let (model, vocab) = build_random_model(38, RandomModelOpts::default());
        let spec = model.spec();
        let prompt = random_transcript(&vocab, 380, 4);

        let mut plain = crate::model::Session::new(&model, &vocab).unwrap();
        plain.feed_transcript(&prompt).unwrap();
        let base_logits = plain.next_token_logits().unwrap().clone();
        let (_, base_cache, _) = plain.into_parts();

        let dir = Direction::new("d", 0, Vector::basis(spec.d_model, 1)).unwrap();
        let mut hooks = HookSet::new();
        hooks
            .attach(
                cap_hook(CapPlan {
                    direction: dir,
                    layers: (0, spec.n_layers - 1),
                    tau: 1e6, // would clamp everything if it fired
                    phase: Phase::GenerationOnly,
                }),
                spec.n_layers,
                spec.d_model,
            )
            .unwrap();
        let mut hooked = crate::model::Session::with_hooks(&model, &vocab, hooks).unwrap();
        hooked.feed_transcript(&prompt).unwrap();
        let hooked_logits = hooked.next_token_logits().unwrap().clone();
        let (_, hooked_cache, _) = hooked.into_parts();

        assert_eq!(base_logits, hooked_logits);
        assert_eq!(base_cache, hooked_cache);
    }
}
