//! Synthetic models with known ground-truth structure.
//!
//! A planted model wires up, by explicit weight construction:
//!
//! - marker tokens whose embeddings write a payload along a hidden source
//!   direction, plus a beacon that copy heads key on;
//! - a copy attention head at every layer that attends to past marker
//!   positions and forwards the payload into the gateway direction `v`;
//! - an MLP at the readout layer that transfers sign(proj on v) onto the
//!   decision direction `u`, gated so it only fires at question tokens;
//! - an unembedding that separates the two behavior tokens by their
//!   projection on `u` with a wide logit margin;
//! - optionally a plan head that attends at a fixed positional offset via
//!   rotated sinusoidal keys, so a trigger token forces a payoff token at
//!   an exact delay.
//!
//! Every embedding row is padded to a common norm on a ballast coordinate
//! and keeps the positional block empty, which pins the RMS denominator
//! and keeps attention logits stable across positions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{dot, Vector};
use crate::persona::{Direction, ProbeSuite};
use crate::transcript::{TokenId, Transcript, TurnRole, Vocab};

use super::forward::{positional_coords, POS_FREQS};
use super::{Model, ModelSpec, ModelWeights};

// ---------------------------------------------------------------------------
// Construction constants
// ---------------------------------------------------------------------------

/// Marker beacon magnitude on the beacon direction.
const BEACON_MAG: f64 = 3.0;
/// Copy-head query gain (reads the always-on direction).
const COPY_QUERY_GAIN: f64 = 4.0;
/// Copy-head key gain (reads the beacon).
const COPY_KEY_GAIN: f64 = 4.0;
/// Copy-head value gain on the payload source.
const COPY_VALUE_GAIN: f64 = 1.0;
/// Copy-head output gain into the gateway direction, per layer.
const COPY_OUT_GAIN: f64 = 0.06;
/// Tiny coefficient putting the gateway (resp. plan) direction itself into
/// the value row, so a d_model-space edit direction has a well-defined,
/// correctly oriented per-head image. Small enough to leave dynamics alone.
const IMAGE_COUPLING: f64 = 1e-7;
/// Readout input gain on the gateway direction.
const READ_GAIN: f64 = 8.0;
/// Readout gate margin: without the question beacon the pre-activation sits
/// this far (times READ_GAIN) in the saturated-zero tail of GELU.
const GATE_MARGIN: f64 = 5.0;
/// Readout output gain onto the decision direction.
const READ_OUT_GAIN: f64 = 2.5;
/// Question-beacon magnitude in the ask token's embedding.
const ASK_MAG: f64 = 4.0;
/// Unembedding gain for behavior tokens (on the decision direction).
const BEHAVIOR_LOGIT_GAIN: f64 = 2.0;
/// Unembedding gain for the default token (on the always-on direction).
const DEFAULT_LOGIT_GAIN: f64 = 2.0;
/// Plan-head query/key gain on the positional block.
const PLAN_QK_GAIN: f64 = 20.0;
/// Plan-head value gain on the plan payload source.
const PLAN_VALUE_GAIN: f64 = 1.0;
/// Plan-head output gain into the plan direction, per layer.
const PLAN_OUT_GAIN: f64 = 0.5;
/// Trigger token's payload magnitude (what the plan head forwards).
const TRIGGER_SRC_MAG: f64 = 2.0;
/// Trigger token's measurable component along the plan direction.
const TRIGGER_MEASURE_MAG: f64 = 0.15;
/// Unembedding gain for the payoff token (on the plan direction).
const PAYOFF_LOGIT_GAIN: f64 = 4.0;
/// Common squared norm of every embedding row (ballast-padded).
const EMB_NORM_SQ: f64 = 18.0;
/// Magnitude of the seed-dependent jitter coordinate in filler embeddings.
const JITTER_MAG: f64 = 0.1;
/// Number of sinusoidal pairs the plan head matches on.
const PLAN_PAIRS: usize = 3;

const COPY_HEAD: usize = 0;
const PLAN_HEAD: usize = 1;
/// Copy head: query/key live on head coordinate 0, the payload on 1.
const COPY_QK_COORD: usize = 0;
const COPY_VALUE_COORD: usize = 1;
/// Plan head: rotated pairs on head coordinates 0..6, payload on 6.
const PLAN_VALUE_COORD: usize = 2 * PLAN_PAIRS;

// ---------------------------------------------------------------------------
// Spec types
// ---------------------------------------------------------------------------

/// Preferred output token per sign of the gateway projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BehaviorTable {
    pub on_positive: TokenId,
    pub on_negative: TokenId,
}

impl BehaviorTable {
    pub fn expected(&self, positive: bool) -> TokenId {
        if positive {
            self.on_positive
        } else {
            self.on_negative
        }
    }
}

/// A planted plan: the trigger token writes the plan payload, copy machinery
/// carries it forward, and the payoff token is forced at `delay` positions
/// after the trigger.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanSpec {
    pub trigger: TokenId,
    pub direction: Direction,
    pub payoff: TokenId,
    pub delay: usize,
}

/// Ground-truth structure to plant.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedSpec {
    /// The persona direction `v` markers load and steering targets.
    pub gateway: Direction,
    /// The readout feature `u` the unembedding separates behaviors by.
    pub decision: Direction,
    /// Layer whose MLP transfers sign(proj on gateway) onto the decision.
    pub readout_layer: usize,
    pub behavior: BehaviorTable,
    /// Marker tokens and the payload magnitude each writes (in [-1, 1]).
    pub markers: Vec<(TokenId, f64)>,
    /// Token that gates the readout (the question beacon carrier).
    pub ask_token: TokenId,
    /// Token given a mild always-on logit so undirected generation has a
    /// deterministic filler to emit.
    pub default_token: TokenId,
    pub plan: Option<PlanSpec>,
}

// ---------------------------------------------------------------------------
// Builder
// ---------------------------------------------------------------------------

/// Constructs weights realizing `spec` on the `base` architecture.
///
/// The gateway, decision, and plan directions must be mutually orthogonal
/// unit vectors with no support on the positional block. The seed only
/// perturbs inert spare coordinates of filler embeddings, so differently
/// seeded models share the planted structure but are distinct as weight
/// tensors.
pub fn build_planted_model(
    spec: &PlantedSpec,
    base: &ModelSpec,
    seed: u64,
) -> Result<(ModelSpec, ModelWeights)> {
    base.validate()?;
    let d = base.d_model;
    let pe = positional_coords(d);

    if base.n_heads < 2 || base.d_head < PLAN_VALUE_COORD + 1 {
        return Err(Error::InfeasiblePlanted(format!(
            "need at least 2 heads of width {} (got {} x {})",
            PLAN_VALUE_COORD + 1,
            base.n_heads,
            base.d_head
        )));
    }
    if base.d_mlp < 2 {
        return Err(Error::InfeasiblePlanted("need d_mlp >= 2 for the readout".into()));
    }
    if spec.readout_layer + 1 >= base.n_layers {
        return Err(Error::InfeasiblePlanted(format!(
            "readout layer {} must be below n_layers - 1 = {}",
            spec.readout_layer,
            base.n_layers - 1
        )));
    }

    let mut user_dirs: Vec<&Direction> = vec![&spec.gateway, &spec.decision];
    if let Some(plan) = &spec.plan {
        user_dirs.push(&plan.direction);
        if plan.delay < 1 {
            return Err(Error::InfeasiblePlanted("plan delay must be >= 1".into()));
        }
    }
    for dir in &user_dirs {
        if dir.dim() != d {
            return Err(Error::DimMismatch { left: dir.dim(), right: d });
        }
        for c in 0..pe {
            if dir.unit().get(c).abs() > 1e-9 {
                return Err(Error::InfeasiblePlanted(
                    "planted directions must avoid the positional block".into(),
                ));
            }
        }
    }
    for i in 0..user_dirs.len() {
        for j in (i + 1)..user_dirs.len() {
            let overlap = dot(user_dirs[i].unit(), user_dirs[j].unit())?;
            if overlap.abs() > 1e-8 {
                return Err(Error::InfeasiblePlanted(format!(
                    "planted directions must be orthogonal (|dot| = {:.2e})",
                    overlap.abs()
                )));
            }
        }
    }

    // Internal directions, orthogonal to the planted ones and each other:
    // always-on, beacon, payload source, question beacon, plan source,
    // ballast, jitter.
    let n_internal = if spec.plan.is_some() { 7 } else { 6 };
    let internal = derive_internal(d, pe, &user_dirs, n_internal)?;
    let g = &internal[0];
    let beacon = &internal[1];
    let payload_src = &internal[2];
    let question = &internal[3];
    let (plan_src, ballast, jitter) = if spec.plan.is_some() {
        (Some(&internal[4]), &internal[5], &internal[6])
    } else {
        (None, &internal[4], &internal[5])
    };

    // Token sanity.
    let in_range = |t: TokenId| t.0 < base.vocab_size;
    let mut special =
        vec![spec.ask_token, spec.default_token, spec.behavior.on_positive, spec.behavior.on_negative];
    for (tok, mag) in &spec.markers {
        if mag.abs() > 1.0 || *mag == 0.0 {
            return Err(Error::InfeasiblePlanted(format!(
                "marker magnitude {mag} outside (0, 1]"
            )));
        }
        special.push(*tok);
    }
    if let Some(plan) = &spec.plan {
        special.push(plan.trigger);
        special.push(plan.payoff);
    }
    for t in &special {
        if !in_range(*t) {
            return Err(Error::TokenOutOfRange { id: t.0, vocab: base.vocab_size });
        }
    }

    let mut w = ModelWeights::zeros(base);

    // --- Embeddings -------------------------------------------------------
    let mut rows: Vec<Vector> = vec![Vector::zeros(d); base.vocab_size];
    for (tok, row) in rows.iter_mut().enumerate() {
        row.axpy(1.0, g);
        // Inert seed jitter keeps differently seeded builds distinct.
        let h = splitmix(seed ^ (tok as u64).wrapping_mul(0x9E3779B97F4A7C15));
        let r = (h >> 11) as f64 / (1u64 << 53) as f64; // [0, 1)
        row.axpy(JITTER_MAG * (2.0 * r - 1.0), jitter);
    }
    for (tok, mag) in &spec.markers {
        rows[tok.0].axpy(BEACON_MAG, beacon);
        rows[tok.0].axpy(*mag, payload_src);
    }
    rows[spec.ask_token.0].axpy(ASK_MAG, question);
    if let Some(plan) = &spec.plan {
        let src = plan_src.expect("plan source derived");
        rows[plan.trigger.0].axpy(TRIGGER_SRC_MAG, src);
        rows[plan.trigger.0].axpy(TRIGGER_MEASURE_MAG, plan.direction.unit());
    }
    for row in &mut rows {
        let used = {
            let mut acc = 0.0;
            for &x in row.as_slice() {
                acc += x * x;
            }
            acc
        };
        if used >= EMB_NORM_SQ {
            return Err(Error::InfeasiblePlanted(format!(
                "embedding row norm^2 {used:.2} exceeds the common budget {EMB_NORM_SQ}"
            )));
        }
        row.axpy((EMB_NORM_SQ - used).sqrt(), ballast);
    }
    for (tok, row) in rows.iter().enumerate() {
        for (c, &x) in row.as_slice().iter().enumerate() {
            w.embed.set(tok, c, x);
        }
    }

    // --- Attention heads ---------------------------------------------------
    for layer in &mut w.layers {
        let copy = &mut layer.heads[COPY_HEAD];
        for c in 0..d {
            copy.w_q.set(COPY_QK_COORD, c, COPY_QUERY_GAIN * g.get(c));
            copy.w_k.set(COPY_QK_COORD, c, COPY_KEY_GAIN * beacon.get(c));
            copy.w_v.set(
                COPY_VALUE_COORD,
                c,
                COPY_VALUE_GAIN * payload_src.get(c) + IMAGE_COUPLING * spec.gateway.unit().get(c),
            );
            copy.w_o.set(c, COPY_VALUE_COORD, COPY_OUT_GAIN * spec.gateway.unit().get(c));
        }

        if let Some(plan) = &spec.plan {
            let src = plan_src.expect("plan source derived");
            // The plan head peaks at source offset delay - 1: the pass at
            // position trigger + delay - 1 retrieves the trigger's payload
            // and its logits select the token occupying trigger + delay.
            let offset = (plan.delay - 1) as f64;
            let head = &mut layer.heads[PLAN_HEAD];
            for (pair, &freq) in POS_FREQS.iter().take(PLAN_PAIRS).enumerate() {
                let (sin_c, cos_c) = (2 * pair, 2 * pair + 1);
                head.w_q.set(sin_c, sin_c, PLAN_QK_GAIN);
                head.w_q.set(cos_c, cos_c, PLAN_QK_GAIN);
                let phi = freq * offset;
                let (s, c) = phi.sin_cos();
                head.w_k.set(sin_c, sin_c, PLAN_QK_GAIN * c);
                head.w_k.set(sin_c, cos_c, PLAN_QK_GAIN * s);
                head.w_k.set(cos_c, sin_c, -PLAN_QK_GAIN * s);
                head.w_k.set(cos_c, cos_c, PLAN_QK_GAIN * c);
            }
            for c in 0..d {
                head.w_v.set(
                    PLAN_VALUE_COORD,
                    c,
                    PLAN_VALUE_GAIN * src.get(c) + IMAGE_COUPLING * plan.direction.unit().get(c),
                );
                head.w_o.set(c, PLAN_VALUE_COORD, PLAN_OUT_GAIN * plan.direction.unit().get(c));
            }
        }
    }

    // --- Readout MLP --------------------------------------------------------
    // Antisymmetric GELU pair: with the question beacon present the gate
    // terms cancel and n0 - n1 equals the gateway pre-activation exactly;
    // without it both neurons sit in GELU's saturated-zero tail.
    {
        let expert = &mut w.layers[spec.readout_layer].experts[0];
        let v = spec.gateway.unit();
        let u = spec.decision.unit();
        for c in 0..d {
            let gate = (GATE_MARGIN / ASK_MAG) * question.get(c) - GATE_MARGIN * g.get(c);
            expert.w_in.set(0, c, READ_GAIN * (v.get(c) + gate));
            expert.w_in.set(1, c, READ_GAIN * (-v.get(c) + gate));
            expert.w_out.set(c, 0, READ_OUT_GAIN * u.get(c));
            expert.w_out.set(c, 1, -READ_OUT_GAIN * u.get(c));
        }
    }

    // --- Unembedding ---------------------------------------------------------
    for c in 0..d {
        w.unembed.set(c, spec.behavior.on_positive.0, BEHAVIOR_LOGIT_GAIN * spec.decision.unit().get(c));
        w.unembed.set(c, spec.behavior.on_negative.0, -BEHAVIOR_LOGIT_GAIN * spec.decision.unit().get(c));
        let default_col =
            w.unembed.get(c, spec.default_token.0) + DEFAULT_LOGIT_GAIN * g.get(c);
        w.unembed.set(c, spec.default_token.0, default_col);
        if let Some(plan) = &spec.plan {
            let col = w.unembed.get(c, plan.payoff.0)
                + PAYOFF_LOGIT_GAIN * plan.direction.unit().get(c);
            w.unembed.set(c, plan.payoff.0, col);
        }
    }

    let mut out_spec = base.clone();
    out_spec.model_id = format!("{}-s{seed}", base.model_id);
    Ok((out_spec, w))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Orthonormal internal directions from spare basis coordinates, avoiding
/// the positional block and the caller's planted directions.
fn derive_internal(
    d: usize,
    pe: usize,
    user_dirs: &[&Direction],
    n_needed: usize,
) -> Result<Vec<Vector>> {
    let mut out: Vec<Vector> = Vec::with_capacity(n_needed);
    for coord in pe..d {
        if out.len() == n_needed {
            break;
        }
        let mut cand = Vector::basis(d, coord);
        for dir in user_dirs {
            let c = dot(&cand, dir.unit())?;
            cand.axpy(-c, dir.unit());
        }
        for prev in &out {
            let c = dot(&cand, prev)?;
            cand.axpy(-c, prev);
        }
        if cand.norm() >= 0.5 {
            out.push(cand.normalized()?);
        }
    }
    if out.len() < n_needed {
        return Err(Error::InfeasiblePlanted(format!(
            "model width {d} too small to hold {n_needed} internal directions"
        )));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Standard lab bundle
// ---------------------------------------------------------------------------

const DEFAULT_TOKEN: TokenId = TokenId(0);
const TOKEN_BLUE: TokenId = TokenId(1);
const TOKEN_RED: TokenId = TokenId(2);
const TOKEN_ECHO: TokenId = TokenId(3);
const TOKEN_STONE: TokenId = TokenId(4);
const TOKEN_CUE: TokenId = TokenId(5);
const TOKEN_QUERY: TokenId = TokenId(6);

/// Coordinates of the planted directions in the standard bundle.
const COORD_GATEWAY: usize = 11;
const COORD_DECISION: usize = 12;
const COORD_PLAN: usize = 15;
const COORD_PLAN_VARIANT: usize = 19;
/// A coordinate nothing in the standard model reads or writes.
pub const STANDARD_SPARE_COORD: usize = 21;

const STANDARD_D_MODEL: usize = 32;
const STANDARD_N_LAYERS: usize = 8;
const STANDARD_READOUT_LAYER: usize = 6;
const N_FILLERS: usize = 18;

/// Options for [`standard_planted_bundle`].
#[derive(Debug, Clone)]
pub struct PlantedOptions {
    pub seed: u64,
    /// Use the alternate plan direction and payoff token ("stone" instead
    /// of "echo"), for model-change divergence scenarios.
    pub payoff_variant: bool,
    pub plan_delay: usize,
    pub model_id: Option<String>,
}

impl Default for PlantedOptions {
    fn default() -> Self {
        PlantedOptions { seed: 0, payoff_variant: false, plan_delay: 5, model_id: None }
    }
}

/// Everything the harness needs about a planted model beyond its weights.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantedInfo {
    pub spec: PlantedSpec,
    /// Layer whose boundary residuals projection series monitor by default.
    pub monitor_layer: usize,
    /// Layer contrastive extraction reads by default.
    pub extraction_layer: usize,
}

impl PlantedInfo {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// A planted model, its vocabulary, and its ground-truth metadata.
#[derive(Debug, Clone)]
pub struct PlantedBundle {
    pub model: Model,
    pub vocab: Vocab,
    pub info: PlantedInfo,
}

fn standard_vocab() -> Vocab {
    let mut symbols: Vec<String> = vec![
        "ok".into(),
        "blue".into(),
        "red".into(),
        "echo".into(),
        "stone".into(),
        "cue".into(),
        "query".into(),
        "sys".into(),
        "up-1".into(),
        "up-2".into(),
        "up-3".into(),
        "down-1".into(),
        "down-2".into(),
        "down-3".into(),
    ];
    for i in 0..N_FILLERS {
        symbols.push(format!("f{i}"));
    }
    Vocab::new(symbols).expect("standard symbols are valid")
}

/// Builds the standard desk-scale planted model: 8 layers, 4 heads of width
/// 8, readout at layer 6, six graded marker tokens, and a plan at the given
/// delay.
pub fn standard_planted_bundle(opts: &PlantedOptions) -> PlantedBundle {
    let vocab = standard_vocab();
    let d = STANDARD_D_MODEL;
    let base = ModelSpec {
        d_model: d,
        n_layers: STANDARD_N_LAYERS,
        n_heads: 4,
        d_head: 8,
        d_mlp: 8,
        vocab_size: vocab.len(),
        n_experts: 1,
        model_id: opts.model_id.clone().unwrap_or_else(|| {
            if opts.payoff_variant { "planted-variant".into() } else { "planted".into() }
        }),
    };

    let gateway = Direction::new("gateway", STANDARD_READOUT_LAYER, Vector::basis(d, COORD_GATEWAY))
        .expect("basis vector");
    let decision =
        Direction::new("decision", STANDARD_READOUT_LAYER, Vector::basis(d, COORD_DECISION))
            .expect("basis vector");
    let plan_coord = if opts.payoff_variant { COORD_PLAN_VARIANT } else { COORD_PLAN };
    let payoff = if opts.payoff_variant { TOKEN_STONE } else { TOKEN_ECHO };
    let plan_dir = Direction::new("plan", 1, Vector::basis(d, plan_coord)).expect("basis vector");

    let markers = vec![
        (TokenId(8), 0.2),
        (TokenId(9), 0.6),
        (TokenId(10), 1.0),
        (TokenId(11), -0.2),
        (TokenId(12), -0.6),
        (TokenId(13), -1.0),
    ];

    let spec = PlantedSpec {
        gateway,
        decision,
        readout_layer: STANDARD_READOUT_LAYER,
        behavior: BehaviorTable { on_positive: TOKEN_BLUE, on_negative: TOKEN_RED },
        markers,
        ask_token: TOKEN_QUERY,
        default_token: DEFAULT_TOKEN,
        plan: Some(PlanSpec {
            trigger: TOKEN_CUE,
            direction: plan_dir,
            payoff,
            delay: opts.plan_delay,
        }),
    };

    let (out_spec, weights) =
        build_planted_model(&spec, &base, opts.seed).expect("standard spec is feasible");
    let model = Model::new(out_spec, weights).expect("constructed weights are consistent");
    let info = PlantedInfo { spec, monitor_layer: 4, extraction_layer: 4 };
    PlantedBundle { model, vocab, info }
}

impl PlantedBundle {
    fn filler(&self, i: usize) -> String {
        format!("f{}", i % N_FILLERS)
    }

    fn marker_symbol(&self, positive: bool, strong: bool) -> &'static str {
        match (positive, strong) {
            (true, true) => "up-3",
            (true, false) => "up-2",
            (false, true) => "down-3",
            (false, false) => "down-2",
        }
    }

    /// Behavior token the planted table prefers for a marker polarity.
    pub fn expected_answer(&self, positive: bool) -> TokenId {
        self.info.spec.behavior.expected(positive)
    }

    /// `n` single-polarity probe contexts with varied fillers and lengths,
    /// each one user turn ending in the ask token.
    pub fn probe_suite(&self, n: usize, positive: bool) -> ProbeSuite {
        let mut contexts = Vec::with_capacity(n);
        for i in 0..n {
            let marker = self.marker_symbol(positive, i % 3 != 2);
            let text = match i % 4 {
                0 => format!("{marker} {} query", self.filler(i)),
                1 => format!("{} {marker} {} query", self.filler(i + 5), self.filler(2 * i + 1)),
                2 => format!(
                    "{marker} {} {} {} query",
                    self.filler(i + 2),
                    self.filler(3 * i + 7),
                    self.filler(i + 11)
                ),
                _ => format!("{} {marker} query", self.filler(7 * i + 3)),
            };
            contexts.push(
                Transcript::from_turns(&self.vocab, &[(TurnRole::User, &text)])
                    .expect("probe text uses vocabulary symbols"),
            );
        }
        ProbeSuite { contexts }
    }

    /// Mirrored-shape contrastive prompts: positive and negative sides have
    /// identical filler structure, so everything but the payload cancels.
    pub fn extraction_prompts(&self, per_side: usize) -> (Vec<String>, Vec<String>) {
        let mut pos = Vec::with_capacity(per_side);
        let mut neg = Vec::with_capacity(per_side);
        for i in 0..per_side {
            let shape: Vec<String> = (0..(1 + i % 3)).map(|j| self.filler(i + 2 * j)).collect();
            let tail = shape.join(" ");
            let up = self.marker_symbol(true, i % 2 == 0);
            let down = self.marker_symbol(false, i % 2 == 0);
            pos.push(format!("{up} {tail}"));
            neg.push(format!("{down} {tail}"));
        }
        (pos, neg)
    }

    /// The 12-turn drift conversation skeleton: scripted user turns step the
    /// marker schedule from the positive pole to the negative one; assistant
    /// slots are placeholders a driver regenerates.
    pub fn drift_script(&self) -> Transcript {
        let turns: Vec<(TurnRole, &str)> = vec![
            (TurnRole::System, "sys"),
            (TurnRole::User, "up-3 f0 f1"),
            (TurnRole::Assistant, "ok ok ok"),
            (TurnRole::User, "up-1 f2 f3"),
            (TurnRole::Assistant, "ok ok ok"),
            (TurnRole::User, "down-1 f4 f5"),
            (TurnRole::Assistant, "ok ok ok"),
            (TurnRole::User, "down-2 f6 f7"),
            (TurnRole::Assistant, "ok ok ok"),
            (TurnRole::User, "down-3 f8 f9"),
            (TurnRole::Assistant, "ok ok ok"),
            (TurnRole::User, "down-3 down-3 f10"),
        ];
        Transcript::from_turns(&self.vocab, &turns).expect("drift script is well formed")
    }

    /// A fully scripted conversation whose assistant turns carry negative
    /// markers: the persona content an identity probe retrieves afterwards
    /// sits at assistant positions in the cache.
    pub fn aura_script(&self) -> Transcript {
        let turns: Vec<(TurnRole, &str)> = vec![
            (TurnRole::System, "sys"),
            (TurnRole::User, "f0 f1"),
            (TurnRole::Assistant, "down-3 f2 down-3"),
            (TurnRole::User, "f3 f4"),
            (TurnRole::Assistant, "down-2 down-3 f5"),
            (TurnRole::User, "f6"),
            (TurnRole::Assistant, "down-3 down-3"),
            (TurnRole::User, "f7 f8"),
            (TurnRole::Assistant, "down-2 down-3"),
        ];
        Transcript::from_turns(&self.vocab, &turns).expect("aura script is well formed")
    }

    /// Identity-probe text appended as a user turn after the aura script.
    pub fn identity_probe_text(&self) -> String {
        "f9 query".into()
    }

    /// `n` further probe-turn texts for the post-edit battery.
    pub fn battery_texts(&self, n: usize) -> Vec<String> {
        (0..n)
            .map(|i| match i % 3 {
                0 => format!("{} query", self.filler(i)),
                1 => format!("{} {} query", self.filler(i + 4), self.filler(2 * i + 1)),
                _ => format!("{} {} {} query", self.filler(i), self.filler(i + 6), self.filler(i + 9)),
            })
            .collect()
    }

    /// Prompt whose user turn contains the plan trigger (or not). The
    /// trigger sits at flat position 3.
    pub fn trigger_script(&self, with_trigger: bool) -> Transcript {
        let text = if with_trigger { "f0 f1 cue f2" } else { "f0 f1 f3 f2" };
        Transcript::from_turns(
            &self.vocab,
            &[(TurnRole::System, "sys"), (TurnRole::User, text)],
        )
        .expect("trigger script is well formed")
    }

    /// Flat position of the trigger token in [`Self::trigger_script`].
    pub fn trigger_flat_pos(&self) -> usize {
        3
    }

    /// A unit direction on a coordinate nothing in this model reads or
    /// writes; steering along it must do nothing.
    pub fn inert_direction(&self) -> Direction {
        Direction::new(
            "inert",
            0,
            Vector::basis(self.model.spec().d_model, STANDARD_SPARE_COORD),
        )
        .expect("basis vector")
    }
}

// ---------------------------------------------------------------------------
// Tests
// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hooks::HookSet;
    use crate::model::DecodePolicy;
    use crate::numcore::project;
    use crate::persona::run_probe_suite;
    use crate::trace::trace_run;

    #[test]
    fn plan_positional_selectivity_gap() {
        // The plan head's match score S(delta) = sum of cos(delta * freq)
        // over its pairs must separate the target offset from every
        // competitor in the working range.
        let score = |delta: f64| -> f64 {
            POS_FREQS.iter().take(PLAN_PAIRS).map(|f| (delta * f).cos()).sum()
        };
        let peak = score(0.0);
        let mut worst = f64::NEG_INFINITY;
        for delta in 1..=255 {
            worst = worst.max(score(delta as f64));
        }
        assert!(
            peak - worst > 0.15,
            "selectivity gap {:.3} too small (peak {peak:.3}, worst {worst:.3})",
            peak - worst
        );
    }

    #[test]
    fn probe_behavior_matches_table_both_polarities() {
        let bundle = standard_planted_bundle(&PlantedOptions::default());
        for positive in [true, false] {
            let suite = bundle.probe_suite(20, positive);
            let answers =
                run_probe_suite(&bundle.model, &bundle.vocab, &suite, &HookSet::new()).unwrap();
            let want = bundle.expected_answer(positive);
            for (i, got) in answers.iter().enumerate() {
                assert_eq!(*got, want, "probe {i} (positive = {positive})");
            }
        }
    }

    #[test]
    fn behavior_follows_readout_sign_with_wide_logit_margin() {
        let bundle = standard_planted_bundle(&PlantedOptions::default());
        let spec = &bundle.info.spec;
        for positive in [true, false] {
            for context in bundle.probe_suite(6, positive).contexts {
                let (_t, trace) = trace_run(
                    &bundle.model,
                    &bundle.vocab,
                    &context,
                    1,
                    DecodePolicy::Greedy,
                    HookSet::new(),
                )
                .unwrap();
                let ask_pos = context.len_tokens() - 1;
                let readout_in = trace
                    .residual_at_boundary(spec.readout_layer + 1, ask_pos)
                    .unwrap();
                let sign = project(readout_in, &spec.gateway).unwrap().signum();
                assert_eq!(sign > 0.0, positive, "gateway sign mismatch");

                let logits = trace.logits_at(ask_pos).unwrap();
                let gap = logits.get(spec.behavior.expected(positive).0)
                    - logits.get(spec.behavior.expected(!positive).0);
                assert!(gap >= 4.0, "behavior margin {gap:.2} below 4.0");
            }
        }
    }

    #[test]
    fn copy_head_forwards_marker_payload_dominantly() {
        let bundle = standard_planted_bundle(&PlantedOptions::default());
        let t = Transcript::from_turns(&bundle.vocab, &[(TurnRole::User, "up-3 f0 f1 f2")])
            .unwrap();
        let (_t, trace) = trace_run(
            &bundle.model,
            &bundle.vocab,
            &t,
            0,
            DecodePolicy::Greedy,
            HookSet::new(),
        )
        .unwrap();
        // At any later position the copy head's top source is the marker.
        for dst in 1..4 {
            for layer in 0..bundle.model.spec().n_layers {
                let w: f64 = trace
                    .streams()
                    .iter()
                    .filter(|r| {
                        r.layer == layer && r.head == COPY_HEAD && r.dst_pos == dst && r.src_pos == 0
                    })
                    .map(|r| r.weight)
                    .sum();
                assert!(w >= 0.9, "copy weight {w:.3} at layer {layer}, dst {dst}");
            }
        }
        // And the forwarded payload accumulates along the gateway.
        let resid = trace.residual_at_boundary(4, 3).unwrap();
        let proj = project(resid, &bundle.info.spec.gateway).unwrap();
        assert!(proj > 0.05, "forwarded gateway projection {proj:.4}");
    }

    #[test]
    fn plan_payoff_fires_at_exact_delay() {
        for delay in [2usize, 5] {
            let bundle =
                standard_planted_bundle(&PlantedOptions { plan_delay: delay, ..Default::default() });
            let script = bundle.trigger_script(true);
            let full = crate::model::generate(
                &bundle.model,
                &bundle.vocab,
                &script,
                10,
                DecodePolicy::Greedy,
                HookSet::new(),
            )
            .unwrap();
            let tokens: Vec<TokenId> = full.positions().iter().map(|(t, _, _)| *t).collect();
            let payoff = bundle.info.spec.plan.as_ref().unwrap().payoff;
            let expect_at = bundle.trigger_flat_pos() + delay;
            for (pos, tok) in tokens.iter().enumerate().skip(script.len_tokens()) {
                if pos == expect_at {
                    assert_eq!(*tok, payoff, "delay {delay}: payoff missing at {pos}");
                } else {
                    assert_ne!(*tok, payoff, "delay {delay}: stray payoff at {pos}");
                }
            }
        }
    }

    #[test]
    fn no_trigger_means_no_payoff() {
        let bundle = standard_planted_bundle(&PlantedOptions::default());
        let script = bundle.trigger_script(false);
        let full = crate::model::generate(
            &bundle.model,
            &bundle.vocab,
            &script,
            10,
            DecodePolicy::Greedy,
            HookSet::new(),
        )
        .unwrap();
        let payoff = bundle.info.spec.plan.as_ref().unwrap().payoff;
        assert!(full.positions().iter().all(|(t, _, _)| *t != payoff));
    }

    #[test]
    fn plan_feature_measurable_at_trigger_before_payoff() {
        let bundle = standard_planted_bundle(&PlantedOptions::default());
        let script = bundle.trigger_script(true);
        let (_t, trace) = trace_run(
            &bundle.model,
            &bundle.vocab,
            &script,
            0,
            DecodePolicy::Greedy,
            HookSet::new(),
        )
        .unwrap();
        let plan = bundle.info.spec.plan.as_ref().unwrap();
        let at_trigger = trace.residual_at_boundary(1, bundle.trigger_flat_pos()).unwrap();
        let proj = project(at_trigger, &plan.direction).unwrap();
        assert!(proj > 0.05, "plan projection at trigger {proj:.4}");
        // Elsewhere in the prompt the plan direction is quiet.
        let elsewhere = trace.residual_at_boundary(1, 1).unwrap();
        assert!(project(elsewhere, &plan.direction).unwrap().abs() < 0.01);
    }

    #[test]
    fn infeasible_specs_are_rejected() {
        let bundle = standard_planted_bundle(&PlantedOptions::default());
        let spec = bundle.info.spec.clone();
        let base = bundle.model.spec().clone();

        // Too narrow to host the internal directions.
        let narrow = ModelSpec {
            d_model: 16,
            n_heads: 2,
            d_head: 8,
            ..base.clone()
        };
        let mut spec16 = spec.clone();
        spec16.gateway = Direction::new("g", 0, Vector::basis(16, 11)).unwrap();
        spec16.decision = Direction::new("d", 0, Vector::basis(16, 12)).unwrap();
        if let Some(p) = &mut spec16.plan {
            p.direction = Direction::new("p", 0, Vector::basis(16, 15)).unwrap();
        }
        assert!(matches!(
            build_planted_model(&spec16, &narrow, 0),
            Err(Error::InfeasiblePlanted(_))
        ));

        // Overlapping gateway and decision.
        let mut overlapping = spec.clone();
        overlapping.decision = overlapping.gateway.clone();
        assert!(matches!(
            build_planted_model(&overlapping, &base, 0),
            Err(Error::InfeasiblePlanted(_))
        ));

        // Readout too late.
        let mut late = spec;
        late.readout_layer = base.n_layers - 1;
        assert!(matches!(
            build_planted_model(&late, &base, 0),
            Err(Error::InfeasiblePlanted(_))
        ));
    }

    #[test]
    fn seeded_builds_share_behavior_but_differ_as_tensors() {
        let a = standard_planted_bundle(&PlantedOptions::default());
        let b = standard_planted_bundle(&PlantedOptions { seed: 7, ..Default::default() });
        assert_ne!(a.model.weights(), b.model.weights());
        for positive in [true, false] {
            let suite = a.probe_suite(4, positive);
            let ans_a = run_probe_suite(&a.model, &a.vocab, &suite, &HookSet::new()).unwrap();
            let ans_b = run_probe_suite(&b.model, &b.vocab, &suite, &HookSet::new()).unwrap();
            assert_eq!(ans_a, ans_b);
        }
    }

    #[test]
    fn planted_info_round_trips_as_json() {
        let bundle = standard_planted_bundle(&PlantedOptions::default());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("planted.json");
        bundle.info.save(&path).unwrap();
        let back = PlantedInfo::load(&path).unwrap();
        assert_eq!(back.spec.readout_layer, bundle.info.spec.readout_layer);
        assert_eq!(back.spec.markers, bundle.info.spec.markers);
        assert_eq!(
            back.spec.gateway.unit().as_slice(),
            bundle.info.spec.gateway.unit().as_slice()
        );
    }
}
