//! Forward passes, the incremental decoding session, and generation.
//!
//! Arithmetic discipline: every reduction runs left to right over f64 with
//! no fused operations and no data-dependent reordering. Sequential
//! generation, sequential prefill, and layer-synchronous parallel prefill
//! therefore produce bit-identical activations and caches.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::hooks::{HookSet, PassContext, TokenOrigin};
use crate::kvcache::{KVCache, KVEntry};
use crate::numcore::{argmax, rms_norm, softmax, Vector};
use crate::trace::TraceRecorder;
use crate::transcript::{detokenize, TokenId, Transcript, TurnRole, Vocab};

use super::Model;

// ---------------------------------------------------------------------------
// Positional encoding
// ---------------------------------------------------------------------------

/// Sinusoidal pair frequencies. The positional term occupies only the first
/// `2 * POS_FREQS.len()` coordinates of the residual stream, leaving the
/// rest of the space position-free.
pub const POS_FREQS: [f64; 4] = [1.0, 0.319, 0.107, 0.0373];

/// Number of leading coordinates carrying positional information for a
/// given model width.
pub fn positional_coords(d_model: usize) -> usize {
    (2 * POS_FREQS.len()).min(d_model / 2 * 2)
}

/// The sinusoidal positional term for `pos`, confined to the leading
/// coordinates.
pub fn positional_term(d_model: usize, pos: usize) -> Vector {
    let mut v = Vector::zeros(d_model);
    let coords = positional_coords(d_model);
    for (i, &freq) in POS_FREQS.iter().enumerate() {
        let (s, c) = (pos as f64 * freq).sin_cos();
        if 2 * i + 1 < coords {
            v.set(2 * i, s);
            v.set(2 * i + 1, c);
        }
    }
    v
}

// ---------------------------------------------------------------------------
// Core forward operations
// ---------------------------------------------------------------------------

/// Embedding lookup; adds the deterministic sinusoidal positional term when
/// a position is supplied.
pub fn embed(model: &Model, token: TokenId, pos: Option<usize>) -> Result<Vector> {
    let spec = model.spec();
    if token.0 >= spec.vocab_size {
        return Err(Error::TokenOutOfRange { id: token.0, vocab: spec.vocab_size });
    }
    let mut x = Vector::new(model.weights().embed.row(token.0).to_vec());
    if let Some(p) = pos {
        let pe = positional_term(spec.d_model, p);
        x.add_assign(&pe);
    }
    Ok(x)
}

/// tanh-approximation GELU. Exactly antisymmetric up to the library tanh,
/// and exactly zero deep in the negative tail, which planted readouts rely
/// on for gating.
pub fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

/// One attention sublayer at `layer`: normalizes the residual, runs every
/// head over the cached keys/values plus the current token's own pair,
/// appends this token's (k, v) per head to the cache, and returns the
/// residual with the attention output added.
///
/// The cache must hold exactly `ctx.pos` positions at this layer.
pub fn attention_forward(
    model: &Model,
    layer: usize,
    residual: &Vector,
    cache: &mut KVCache,
    ctx: &PassContext,
    mut tracer: Option<&mut TraceRecorder>,
) -> Result<Vector> {
    let spec = model.spec();
    let pos = ctx.pos;
    for head in 0..spec.n_heads {
        let have = cache.len_at(layer, head);
        if have != pos {
            return Err(Error::CacheGap { layer, head, expected: pos, got: have });
        }
    }

    let normed = rms_norm(residual, &model.layer(layer).attn_norm_gain)?;
    let scale = 1.0 / (spec.d_head as f64).sqrt();

    let mut delta = Vector::zeros(spec.d_model);
    for head in 0..spec.n_heads {
        let hw = &model.layer(layer).heads[head];
        let q = hw.w_q.matvec(&normed);
        let k = hw.w_k.matvec(&normed);
        let v = hw.w_v.matvec(&normed);

        // Attention logits over sources 0..=pos (own key last).
        let mut logits = Vec::with_capacity(pos + 1);
        for src in 0..pos {
            let key = cache.key(layer, head, src);
            let mut acc = 0.0;
            for (a, b) in q.as_slice().iter().zip(key.as_slice().iter()) {
                acc += a * b;
            }
            logits.push(acc * scale);
        }
        {
            let mut acc = 0.0;
            for (a, b) in q.as_slice().iter().zip(k.as_slice().iter()) {
                acc += a * b;
            }
            logits.push(acc * scale);
        }
        let weights = softmax(&Vector::new(logits));

        // Weighted value sum, sources in ascending order.
        let mut mixed = Vector::zeros(spec.d_head);
        for src in 0..pos {
            mixed.axpy(weights.get(src), cache.value(layer, head, src));
        }
        mixed.axpy(weights.get(pos), &v);

        let head_out = hw.w_o.matvec(&mixed);
        delta.add_assign(&head_out);

        // Stream records are purely observational: extra arithmetic on the
        // side, nothing fed back into the residual path.
        if let Some(rec) = tracer.as_deref_mut() {
            for src in 0..=pos {
                let val = if src < pos { cache.value(layer, head, src) } else { &v };
                let contribution = hw.w_o.matvec(&val.scaled(weights.get(src)));
                rec.record_stream(layer, head, src, pos, weights.get(src), contribution);
            }
        }

        cache.append(
            layer,
            head,
            KVEntry { key: k, value: v, layer, head, pos, role: ctx.role },
        )?;
    }

    let mut out = residual.clone();
    out.add_assign(&delta);
    Ok(out)
}

/// One MLP sublayer: routed to a single expert when the model is
/// mixture-of-experts (argmax routing, ties to the lowest index), dense
/// otherwise. Returns the updated residual and the expert choice.
pub fn mlp_forward(
    model: &Model,
    layer: usize,
    residual: &Vector,
    forced_expert: Option<usize>,
) -> Result<(Vector, usize)> {
    let lw = model.layer(layer);
    let normed = rms_norm(residual, &lw.mlp_norm_gain)?;

    let expert = match forced_expert {
        Some(e) => {
            if e >= lw.experts.len() {
                return Err(Error::InvalidArg(format!(
                    "forced expert {e} out of range ({} experts)",
                    lw.experts.len()
                )));
            }
            e
        }
        None => match &lw.router {
            Some(router) => argmax(router.matvec(&normed).as_slice()),
            None => 0,
        },
    };

    let ew = &lw.experts[expert];
    let mut hidden = ew.w_in.matvec(&normed);
    for h in hidden.as_mut_slice() {
        *h = gelu(*h);
    }
    let delta = ew.w_out.matvec(&hidden);

    let mut out = residual.clone();
    out.add_assign(&delta);
    Ok((out, expert))
}

/// Full forward pass for one token: embed, then per layer resid-bias →
/// hooks → attention → MLP, then final norm and unembedding. Appends this
/// token's KV entries to the cache and returns the next-token logits.
pub fn forward_pass(
    model: &Model,
    token: TokenId,
    ctx: &PassContext,
    cache: &mut KVCache,
    hooks: &HookSet,
    mut tracer: Option<&mut TraceRecorder>,
) -> Result<Vector> {
    let spec = model.spec();
    let mut x = embed(model, token, Some(ctx.pos))?;

    for layer in 0..spec.n_layers {
        let lw = model.layer(layer);
        if !lw.resid_bias.as_slice().iter().all(|&b| b == 0.0) {
            x.add_assign(&lw.resid_bias);
        }
        hooks.apply_at_layer(layer, &mut x, ctx);
        if let Some(rec) = tracer.as_deref_mut() {
            rec.record_boundary(layer, ctx.pos, &x);
        }
        x = attention_forward(model, layer, &x, cache, ctx, tracer.as_deref_mut())?;
        if let Some(rec) = tracer.as_deref_mut() {
            rec.record_post_attention(layer, ctx.pos, &x);
        }
        let (next, expert) = mlp_forward(model, layer, &x, hooks.expert_override(layer))?;
        x = next;
        if let Some(rec) = tracer.as_deref_mut() {
            rec.record_expert(layer, ctx.pos, expert);
        }
    }

    if let Some(rec) = tracer.as_deref_mut() {
        rec.record_boundary(spec.n_layers, ctx.pos, &x);
    }
    let normed = rms_norm(&x, &model.weights().final_norm_gain)?;
    let logits = model.weights().unembed.tmatvec(&normed);
    if let Some(rec) = tracer.as_deref_mut() {
        rec.record_logits(ctx.pos, &logits);
    }
    Ok(logits)
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

/// Token selection rule for generation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecodePolicy {
    /// Argmax; ties resolve to the lowest token id.
    Greedy,
    /// Seeded categorical sampling from the softmax distribution. The RNG
    /// is freshly seeded per generation call.
    Sample { seed: u64 },
}

fn select_token(logits: &Vector, policy: DecodePolicy, rng: &mut Option<ChaCha8Rng>) -> TokenId {
    match policy {
        DecodePolicy::Greedy => TokenId(argmax(logits.as_slice())),
        DecodePolicy::Sample { .. } => {
            let probs = softmax(logits);
            let u: f64 = rng.as_mut().expect("sampling rng").gen();
            let mut cum = 0.0;
            for (i, &p) in probs.as_slice().iter().enumerate() {
                cum += p;
                if u < cum {
                    return TokenId(i);
                }
            }
            TokenId(probs.dim() - 1)
        }
    }
}

// ---------------------------------------------------------------------------
// Session
// ---------------------------------------------------------------------------

/// Incremental decoding state: a transcript, its KV cache, hooks, and an
/// optional trace. A session is single-writer; hold one per run.
pub struct Session<'m> {
    model: &'m Model,
    vocab: &'m Vocab,
    transcript: Transcript,
    cache: KVCache,
    hooks: HookSet,
    tracer: Option<TraceRecorder>,
    last_logits: Option<Vector>,
    next_pos: usize,
}

impl<'m> Session<'m> {
    pub fn new(model: &'m Model, vocab: &'m Vocab) -> Result<Self> {
        if vocab.len() != model.spec().vocab_size {
            return Err(Error::VocabMismatch(format!(
                "model expects vocabulary of size {}, got {}",
                model.spec().vocab_size,
                vocab.len()
            )));
        }
        Ok(Session {
            model,
            vocab,
            transcript: Transcript::new(vocab),
            cache: KVCache::new(model.spec()),
            hooks: HookSet::new(),
            tracer: None,
            last_logits: None,
            next_pos: 0,
        })
    }

    pub fn with_hooks(model: &'m Model, vocab: &'m Vocab, hooks: HookSet) -> Result<Self> {
        let mut s = Session::new(model, vocab)?;
        s.hooks = hooks;
        Ok(s)
    }

    /// Resumes from a transferred cache. The cache must cover all transcript
    /// tokens or all but the last one; the uncovered tail is re-processed,
    /// which reproduces the original activations exactly.
    pub fn resume(
        model: &'m Model,
        vocab: &'m Vocab,
        transcript: Transcript,
        mut cache: KVCache,
    ) -> Result<Self> {
        if cache.model_id() != model.id() {
            return Err(Error::CacheModelMismatch {
                cache_model: cache.model_id().to_string(),
                model: model.id().to_string(),
            });
        }
        let positions = transcript.positions();
        let n = positions.len();
        let covered = cache.len_positions();
        if covered + 1 < n || covered > n {
            return Err(Error::InvalidArg(format!(
                "cache covers {covered} positions, transcript has {n} tokens"
            )));
        }
        if covered == n && n > 0 {
            // Drop the final position and re-run it below so the session
            // regains the next-token logits deterministically.
            cache.truncate(n - 1);
        }
        let mut s = Session::new(model, vocab)?;
        s.transcript = transcript;
        s.cache = cache;
        s.next_pos = s.cache.len_positions();
        for (tok, role, _) in positions.iter().skip(s.next_pos) {
            let ctx = PassContext { pos: s.next_pos, role: *role, origin: TokenOrigin::Scripted };
            let logits =
                forward_pass(s.model, *tok, &ctx, &mut s.cache, &s.hooks, s.tracer.as_mut())?;
            s.last_logits = Some(logits);
            s.next_pos += 1;
        }
        Ok(s)
    }

    pub fn enable_tracing(&mut self) {
        if self.tracer.is_none() {
            self.tracer = Some(TraceRecorder::new(self.model.spec().n_layers));
        }
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn cache(&self) -> &KVCache {
        &self.cache
    }

    pub fn hooks_mut(&mut self) -> &mut HookSet {
        &mut self.hooks
    }

    /// Appends a scripted turn and runs a forward pass per token.
    pub fn push_turn(&mut self, role: TurnRole, text: &str) -> Result<()> {
        self.transcript.push(self.vocab, role, text)?;
        let turn = self.transcript.turns.last().expect("just pushed");
        let tokens = turn.tokens.clone();
        for tok in tokens {
            let ctx =
                PassContext { pos: self.next_pos, role, origin: TokenOrigin::Scripted };
            let logits = forward_pass(
                self.model,
                tok,
                &ctx,
                &mut self.cache,
                &self.hooks,
                self.tracer.as_mut(),
            )?;
            self.last_logits = Some(logits);
            self.next_pos += 1;
        }
        Ok(())
    }

    /// Feeds a whole transcript turn by turn.
    pub fn feed_transcript(&mut self, t: &Transcript) -> Result<()> {
        for turn in &t.turns {
            self.push_turn(turn.role, &turn.text)?;
        }
        Ok(())
    }

    /// Generates `n_new` assistant tokens and appends them as an assistant
    /// turn. No-op for `n_new == 0`.
    pub fn generate_turn(&mut self, n_new: usize, policy: DecodePolicy) -> Result<Vec<TokenId>> {
        if n_new == 0 {
            return Ok(Vec::new());
        }
        if self.model.spec().vocab_size == 0 {
            return Err(Error::EmptyInput("vocabulary"));
        }
        if self.last_logits.is_none() {
            return Err(Error::EmptyInput("transcript (nothing to continue from)"));
        }
        let mut rng = match policy {
            DecodePolicy::Sample { seed } => Some(ChaCha8Rng::seed_from_u64(seed)),
            DecodePolicy::Greedy => None,
        };
        let mut new_tokens = Vec::with_capacity(n_new);
        for _ in 0..n_new {
            let logits = self.last_logits.as_ref().expect("logits present");
            let tok = select_token(logits, policy, &mut rng);
            new_tokens.push(tok);
            let ctx = PassContext {
                pos: self.next_pos,
                role: TurnRole::Assistant,
                origin: TokenOrigin::Generated,
            };
            let logits = forward_pass(
                self.model,
                tok,
                &ctx,
                &mut self.cache,
                &self.hooks,
                self.tracer.as_mut(),
            )?;
            self.last_logits = Some(logits);
            self.next_pos += 1;
        }
        let text = detokenize(self.vocab, &new_tokens)?;
        // Extend a trailing assistant turn (resumed mid-generation) instead
        // of appending a second one; otherwise push a fresh turn.
        match self.transcript.turns.last_mut() {
            Some(last) if last.role == TurnRole::Assistant => {
                if !last.text.is_empty() {
                    last.text.push(' ');
                }
                last.text.push_str(&text);
                last.tokens.extend_from_slice(&new_tokens);
            }
            _ => self.transcript.turns.push(crate::transcript::Turn {
                role: TurnRole::Assistant,
                text,
                tokens: new_tokens.clone(),
            }),
        }
        Ok(new_tokens)
    }

    /// Logits from the most recent forward pass, i.e. the distribution over
    /// the next token.
    pub fn next_token_logits(&self) -> Option<&Vector> {
        self.last_logits.as_ref()
    }

    pub fn into_parts(self) -> (Transcript, KVCache, Option<crate::trace::Trace>) {
        (self.transcript, self.cache, self.tracer.map(TraceRecorder::finish))
    }
}

/// Runs the transcript and appends `n_new` generated assistant tokens.
pub fn generate(
    model: &Model,
    vocab: &Vocab,
    transcript: &Transcript,
    n_new: usize,
    policy: DecodePolicy,
    hooks: HookSet,
) -> Result<Transcript> {
    let mut session = Session::with_hooks(model, vocab, hooks)?;
    session.feed_transcript(transcript)?;
    session.generate_turn(n_new, policy)?;
    let (t, _, _) = session.into_parts();
    Ok(t)
}
