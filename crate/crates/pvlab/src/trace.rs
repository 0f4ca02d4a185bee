//! Instrumentation: residual-stream snapshots, attention-stream records,
//! per-turn projection series, stream counting, and top-stream attribution.
//!
//! Recording is strictly observational; a traced run produces bit-identical
//! logits and cache entries to an untraced one.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::hooks::HookSet;
use crate::model::{DecodePolicy, Model, ModelSpec, Session};
use crate::numcore::{project, Vector};
use crate::persona::Direction;
use crate::transcript::{Transcript, TurnRole, Vocab};

/// One attention stream: the link from a source position's cached (k, v) to
/// a destination position's query at one head.
#[derive(Debug, Clone, Serialize)]
pub struct AttentionStreamRecord {
    pub layer: usize,
    pub head: usize,
    pub src_pos: usize,
    pub dst_pos: usize,
    /// Post-softmax attention weight in [0, 1].
    pub weight: f64,
    /// This stream's additive contribution to the destination residual,
    /// after W_O (d_model).
    pub value_contribution: Vector,
}

/// Residual snapshots and stream records for one run.
///
/// Snapshot sites: `boundary[pos][l]` is the residual at the entry of layer
/// `l` after layer-entry hooks fired (so capped values are visible), with
/// `boundary[pos][n_layers]` the state after the final block; `post_attn`
/// is the mid-block state after the attention sublayer.
#[derive(Debug, Clone)]
pub struct Trace {
    n_layers: usize,
    boundary: Vec<Vec<Vector>>,
    post_attn: Vec<Vec<Vector>>,
    streams: Vec<AttentionStreamRecord>,
    logits: Vec<Vector>,
    experts: Vec<Vec<usize>>,
}

impl Trace {
    pub fn n_positions(&self) -> usize {
        self.boundary.len()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    /// Residual at the entry of `layer` (post-hook) for a position;
    /// `layer == n_layers` is the state after the last block.
    pub fn residual_at_boundary(&self, layer: usize, pos: usize) -> Result<&Vector> {
        self.boundary
            .get(pos)
            .and_then(|layers| layers.get(layer))
            .ok_or(Error::InvalidArg(format!("no boundary snapshot at layer {layer}, pos {pos}")))
    }

    pub fn residual_post_attention(&self, layer: usize, pos: usize) -> Result<&Vector> {
        self.post_attn
            .get(pos)
            .and_then(|layers| layers.get(layer))
            .ok_or(Error::InvalidArg(format!("no post-attention snapshot at layer {layer}, pos {pos}")))
    }

    pub fn streams(&self) -> &[AttentionStreamRecord] {
        &self.streams
    }

    pub fn logits_at(&self, pos: usize) -> Option<&Vector> {
        self.logits.get(pos)
    }

    pub fn expert_choice(&self, layer: usize, pos: usize) -> Option<usize> {
        self.experts.get(pos).and_then(|l| l.get(layer)).copied()
    }

    /// JSON export with explicit shape metadata.
    pub fn save_json(&self, path: &Path, model_id: &str, transcript_hash: &str) -> Result<()> {
        #[derive(Serialize)]
        struct TraceFile<'a> {
            schema_version: u32,
            model_id: &'a str,
            transcript_hash: &'a str,
            n_layers: usize,
            n_positions: usize,
            d_model: usize,
            boundary_residuals: &'a [Vec<Vector>],
            post_attention_residuals: &'a [Vec<Vector>],
            streams: &'a [AttentionStreamRecord],
            logits_by_pos: &'a [Vector],
            expert_choices: &'a [Vec<usize>],
        }
        let d_model = self.boundary.first().and_then(|l| l.first()).map_or(0, Vector::dim);
        let file = TraceFile {
            schema_version: 1,
            model_id,
            transcript_hash,
            n_layers: self.n_layers,
            n_positions: self.n_positions(),
            d_model,
            boundary_residuals: &self.boundary,
            post_attention_residuals: &self.post_attn,
            streams: &self.streams,
            logits_by_pos: &self.logits,
            expert_choices: &self.experts,
        };
        std::fs::write(path, serde_json::to_string(&file)?)?;
        Ok(())
    }
}

/// Accumulates trace data during forward passes.
#[derive(Debug)]
pub struct TraceRecorder {
    n_layers: usize,
    boundary: Vec<Vec<Vector>>,
    post_attn: Vec<Vec<Vector>>,
    streams: Vec<AttentionStreamRecord>,
    logits: Vec<Vector>,
    experts: Vec<Vec<usize>>,
}

impl TraceRecorder {
    pub fn new(n_layers: usize) -> Self {
        TraceRecorder {
            n_layers,
            boundary: Vec::new(),
            post_attn: Vec::new(),
            streams: Vec::new(),
            logits: Vec::new(),
            experts: Vec::new(),
        }
    }

    fn slot<'a>(store: &'a mut Vec<Vec<Vector>>, pos: usize) -> &'a mut Vec<Vector> {
        while store.len() <= pos {
            store.push(Vec::new());
        }
        &mut store[pos]
    }

    pub fn record_boundary(&mut self, layer: usize, pos: usize, residual: &Vector) {
        let slot = Self::slot(&mut self.boundary, pos);
        debug_assert_eq!(slot.len(), layer);
        slot.push(residual.clone());
    }

    pub fn record_post_attention(&mut self, layer: usize, pos: usize, residual: &Vector) {
        let slot = Self::slot(&mut self.post_attn, pos);
        debug_assert_eq!(slot.len(), layer);
        slot.push(residual.clone());
    }

    pub fn record_stream(
        &mut self,
        layer: usize,
        head: usize,
        src_pos: usize,
        dst_pos: usize,
        weight: f64,
        value_contribution: Vector,
    ) {
        self.streams.push(AttentionStreamRecord {
            layer,
            head,
            src_pos,
            dst_pos,
            weight,
            value_contribution,
        });
    }

    pub fn record_logits(&mut self, pos: usize, logits: &Vector) {
        debug_assert_eq!(self.logits.len(), pos);
        self.logits.push(logits.clone());
    }

    pub fn record_expert(&mut self, layer: usize, pos: usize, expert: usize) {
        while self.experts.len() <= pos {
            self.experts.push(Vec::new());
        }
        debug_assert_eq!(self.experts[pos].len(), layer);
        self.experts[pos].push(expert);
    }

    pub fn finish(self) -> Trace {
        Trace {
            n_layers: self.n_layers,
            boundary: self.boundary,
            post_attn: self.post_attn,
            streams: self.streams,
            logits: self.logits,
            experts: self.experts,
        }
    }
}

/// Runs the transcript plus `n_new` generated tokens with tracing enabled.
/// Outputs are identical to [`crate::model::generate`]; the trace is a pure
/// observer.
pub fn trace_run(
    model: &Model,
    vocab: &Vocab,
    transcript: &Transcript,
    n_new: usize,
    policy: DecodePolicy,
    hooks: HookSet,
) -> Result<(Transcript, Trace)> {
    let mut session = Session::with_hooks(model, vocab, hooks)?;
    session.enable_tracing();
    session.feed_transcript(transcript)?;
    if n_new > 0 {
        session.generate_turn(n_new, policy)?;
    }
    let (t, _, trace) = session.into_parts();
    Ok((t, trace.expect("tracing enabled")))
}

/// Number of attention streams feeding the forward pass at 1-indexed token
/// position `pos`: one per (head, layer, prior position).
pub fn count_streams(spec: &ModelSpec, pos: usize) -> Result<u64> {
    if pos < 1 {
        return Err(Error::InvalidArg("position must be >= 1".into()));
    }
    Ok(spec.n_heads as u64 * spec.n_layers as u64 * (pos as u64 - 1))
}

// ---------------------------------------------------------------------------
// Projection series
// ---------------------------------------------------------------------------

/// Per-turn mean projection of the residual at a monitored layer onto an
/// axis.
#[derive(Debug, Clone, Serialize)]
pub struct SeriesEntry {
    pub turn: usize,
    pub role: TurnRole,
    pub mean_projection: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ProjectionSeries {
    pub entries: Vec<SeriesEntry>,
}

impl ProjectionSeries {
    /// Entries for one role only, in turn order.
    pub fn for_role(&self, role: TurnRole) -> Vec<&SeriesEntry> {
        self.entries.iter().filter(|e| e.role == role).collect()
    }

    /// CSV export: `turn,role,mean_projection`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("turn,role,mean_projection\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{:.17e}\n", e.turn, e.role, e.mean_projection));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Per-turn means of `project(residual at the monitored layer, axis)`,
/// reported for every turn (user and assistant alike).
pub fn projection_series(
    trace: &Trace,
    axis: &Direction,
    layer: usize,
    transcript: &Transcript,
) -> Result<ProjectionSeries> {
    if layer > trace.n_layers {
        return Err(Error::LayerOutOfRange { layer, n_layers: trace.n_layers });
    }
    let positions = transcript.positions();
    let mut entries = Vec::new();
    let mut pos_cursor = 0usize;
    for (turn_idx, turn) in transcript.turns.iter().enumerate() {
        let n = turn.tokens.len();
        if n == 0 {
            continue;
        }
        let mut sum = 0.0;
        for p in pos_cursor..pos_cursor + n {
            debug_assert_eq!(positions[p].2, turn_idx);
            let resid = trace.residual_at_boundary(layer, p)?;
            sum += project(resid, axis)?;
        }
        entries.push(SeriesEntry {
            turn: turn_idx,
            role: turn.role,
            mean_projection: sum / n as f64,
        });
        pos_cursor += n;
    }
    Ok(ProjectionSeries { entries })
}

/// Top-k stream records into `dst_pos`, ranked by |weight| (or by the
/// absolute projection of the value contribution onto `d` when given),
/// tie-broken by (layer, head, src).
pub fn top_streams(
    trace: &Trace,
    dst_pos: usize,
    k: usize,
    d: Option<&Direction>,
) -> Result<Vec<AttentionStreamRecord>> {
    if dst_pos >= trace.n_positions() {
        return Err(Error::InvalidArg(format!("destination position {dst_pos} not traced")));
    }
    let mut scored: Vec<(f64, &AttentionStreamRecord)> = Vec::new();
    for rec in &trace.streams {
        if rec.dst_pos != dst_pos {
            continue;
        }
        let score = match d {
            Some(dir) => project(&rec.value_contribution, dir)?.abs(),
            None => rec.weight.abs(),
        };
        scored.push((score, rec));
    }
    scored.sort_by(|(sa, ra), (sb, rb)| {
        sb.partial_cmp(sa)
            .unwrap()
            .then(ra.layer.cmp(&rb.layer))
            .then(ra.head.cmp(&rb.head))
            .then(ra.src_pos.cmp(&rb.src_pos))
    });
    Ok(scored.into_iter().take(k).map(|(_, r)| r.clone()).collect())
}
