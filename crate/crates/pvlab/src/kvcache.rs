//! KV-cache lifecycle: append, prefill (sequential and layer-synchronous
//! parallel), binary serialization for transfer, model-change rebuild,
//! divergence measurement, and post-hoc directional editing.

use crate::error::{Error, Result};
use crate::hooks::{HookSet, PassContext, TokenOrigin};
use crate::model::{attention_forward, embed, mlp_forward, Model, ModelSpec};
use crate::numcore::Vector;
use crate::persona::Direction;
use crate::transcript::{Transcript, TurnRole};

/// One cached key/value pair. The key indexes what information is present;
/// the value carries it.
#[derive(Debug, Clone, PartialEq)]
pub struct KVEntry {
    pub key: Vector,
    pub value: Vector,
    pub layer: usize,
    pub head: usize,
    pub pos: usize,
    /// Role of the token that produced this entry.
    pub role: TurnRole,
}

/// Per-layer, per-head, per-position store of KV entries.
///
/// Invariant: for every (layer, head), positions form a gapless prefix
/// 0..len−1, enforced on append.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    model_id: String,
    n_layers: usize,
    n_heads: usize,
    d_head: usize,
    entries: Vec<Vec<Vec<KVEntry>>>,
}

impl KVCache {
    pub fn new(spec: &ModelSpec) -> Self {
        KVCache {
            model_id: spec.model_id.clone(),
            n_layers: spec.n_layers,
            n_heads: spec.n_heads,
            d_head: spec.d_head,
            entries: vec![vec![Vec::new(); spec.n_heads]; spec.n_layers],
        }
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    /// Number of completed positions (the minimum prefix across heads; all
    /// heads stay in lockstep outside of a mid-pass window).
    pub fn len_positions(&self) -> usize {
        self.entries
            .iter()
            .flat_map(|layer| layer.iter().map(Vec::len))
            .min()
            .unwrap_or(0)
    }

    pub fn len_at(&self, layer: usize, head: usize) -> usize {
        self.entries[layer][head].len()
    }

    pub fn append(&mut self, layer: usize, head: usize, entry: KVEntry) -> Result<()> {
        if entry.key.dim() != self.d_head || entry.value.dim() != self.d_head {
            return Err(Error::DimMismatch { left: entry.key.dim(), right: self.d_head });
        }
        let slot = &mut self.entries[layer][head];
        if entry.pos != slot.len() {
            return Err(Error::CacheGap { layer, head, expected: slot.len(), got: entry.pos });
        }
        slot.push(entry);
        Ok(())
    }

    pub fn key(&self, layer: usize, head: usize, pos: usize) -> &Vector {
        &self.entries[layer][head][pos].key
    }

    pub fn value(&self, layer: usize, head: usize, pos: usize) -> &Vector {
        &self.entries[layer][head][pos].value
    }

    pub fn entry(&self, layer: usize, head: usize, pos: usize) -> &KVEntry {
        &self.entries[layer][head][pos]
    }

    pub fn role_at(&self, pos: usize) -> Option<TurnRole> {
        self.entries
            .first()
            .and_then(|l| l.first())
            .and_then(|h| h.get(pos))
            .map(|e| e.role)
    }

    /// Drops all entries at positions >= `len`.
    pub fn truncate(&mut self, len: usize) {
        for layer in &mut self.entries {
            for head in layer {
                head.truncate(len);
            }
        }
    }

    fn iter_mut(&mut self) -> impl Iterator<Item = &mut KVEntry> {
        self.entries.iter_mut().flatten().flatten()
    }
}

// ---------------------------------------------------------------------------
// Prefill
// ---------------------------------------------------------------------------

/// Rebuilds a cache by running forward passes over the whole transcript,
/// discarding logits. Bit-identical to the cache a generation run over the
/// same tokens would have produced.
pub fn prefill(model: &Model, transcript: &Transcript) -> Result<KVCache> {
    let positions = transcript.positions();
    if positions.is_empty() {
        return Err(Error::EmptyInput("transcript"));
    }
    let hooks = HookSet::new();
    let mut cache = KVCache::new(model.spec());
    for (i, (tok, role, _)) in positions.iter().enumerate() {
        let ctx = PassContext { pos: i, role: *role, origin: TokenOrigin::Scripted };
        crate::model::forward_pass(model, *tok, &ctx, &mut cache, &hooks, None)?;
    }
    Ok(cache)
}

/// Layer-synchronous prefill: all positions advance one layer at a time.
/// Per-position arithmetic and reduction order are identical to sequential
/// prefill, so the output is bit-identical.
pub fn prefill_parallel(model: &Model, transcript: &Transcript) -> Result<KVCache> {
    let positions = transcript.positions();
    if positions.is_empty() {
        return Err(Error::EmptyInput("transcript"));
    }
    let spec = model.spec();
    let mut cache = KVCache::new(spec);

    // Embed every position first (the token wavefront entering layer 0).
    let mut residuals: Vec<Vector> = Vec::with_capacity(positions.len());
    for (i, (tok, _, _)) in positions.iter().enumerate() {
        residuals.push(embed(model, *tok, Some(i))?);
    }

    let hooks = HookSet::new();
    for layer in 0..spec.n_layers {
        let lw = model.layer(layer);
        let bias_nonzero = !lw.resid_bias.as_slice().iter().all(|&b| b == 0.0);
        for (i, resid) in residuals.iter_mut().enumerate() {
            if bias_nonzero {
                resid.add_assign(&lw.resid_bias);
            }
            let ctx = PassContext {
                pos: i,
                role: positions[i].1,
                origin: TokenOrigin::Scripted,
            };
            hooks.apply_at_layer(layer, resid, &ctx);
            let after_attn = attention_forward(model, layer, resid, &mut cache, &ctx, None)?;
            let (after_mlp, _expert) = mlp_forward(model, layer, &after_attn, None)?;
            *resid = after_mlp;
        }
    }
    Ok(cache)
}

/// Prefills the transcript under a different model. The models must share
/// the vocabulary symbol table; here that is checked as token-range
/// compatibility.
pub fn rebuild_for_model(transcript: &Transcript, other_model: &Model) -> Result<KVCache> {
    let vocab_size = other_model.spec().vocab_size;
    for (tok, _, _) in transcript.positions() {
        if tok.0 >= vocab_size {
            return Err(Error::VocabMismatch(format!(
                "token id {} outside the model's vocabulary of size {vocab_size}",
                tok.0
            )));
        }
    }
    prefill(other_model, transcript)
}

// ---------------------------------------------------------------------------
// Divergence
// ---------------------------------------------------------------------------

const DIVERGENCE_EPS: f64 = 1e-12;

/// Mean over aligned entries of ‖xₐ − x_b‖ / max(‖xₐ‖, ‖x_b‖, ε), where an
/// entry is the concatenated (key, value) pair. Zero iff the caches are
/// bit-equal.
pub fn cache_divergence(a: &KVCache, b: &KVCache) -> Result<f64> {
    if a.n_layers != b.n_layers || a.n_heads != b.n_heads || a.d_head != b.d_head {
        return Err(Error::IncomparableCaches("shape mismatch".into()));
    }
    let len = a.len_positions();
    if len != b.len_positions() {
        return Err(Error::IncomparableCaches(format!(
            "length mismatch: {len} vs {}",
            b.len_positions()
        )));
    }
    if len == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for layer in 0..a.n_layers {
        for head in 0..a.n_heads {
            for pos in 0..len {
                let ea = a.entry(layer, head, pos);
                let eb = b.entry(layer, head, pos);
                let mut diff = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for (x, y) in ea.key.as_slice().iter().zip(eb.key.as_slice().iter()) {
                    diff += (x - y) * (x - y);
                    na += x * x;
                    nb += y * y;
                }
                for (x, y) in ea.value.as_slice().iter().zip(eb.value.as_slice().iter()) {
                    diff += (x - y) * (x - y);
                    na += x * x;
                    nb += y * y;
                }
                let denom = na.sqrt().max(nb.sqrt()).max(DIVERGENCE_EPS);
                total += diff.sqrt() / denom;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

// ---------------------------------------------------------------------------
// Editing
// ---------------------------------------------------------------------------

/// Which vectors of a cached entry an edit touches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditTarget {
    Keys,
    Values,
    Both,
}

/// Selects cache entries for editing. An empty head set means all heads.
#[derive(Debug, Clone)]
pub struct CacheSelector {
    pub layer_range: (usize, usize),
    pub head_set: Vec<usize>,
    pub role_filter: Option<TurnRole>,
    pub target: EditTarget,
}

impl CacheSelector {
    fn selects_head(&self, head: usize) -> bool {
        self.head_set.is_empty() || self.head_set.contains(&head)
    }
}

/// How the component along the direction is transformed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EditMode {
    /// proj ← proj · factor
    Scale(f64),
    /// proj ← value
    SetTo(f64),
    /// proj ← proj + delta
    Add(f64),
}

/// Summary of an edit: entries touched and the mean |Δproj| over them.
#[derive(Debug, Clone, PartialEq)]
pub struct EditReport {
    pub entries_edited: usize,
    pub mean_abs_delta_proj: f64,
}

/// Transforms the component along `direction` of every selected entry,
/// leaving the orthogonal complement untouched.
///
/// A direction of dimension d_head applies in head space directly. A
/// direction of dimension d_model is mapped into each head's subspace via
/// that head's W_V action (W_K for key edits), normalized per head; heads
/// where the image vanishes are skipped so the edit keeps its downstream
/// meaning through W_O.
pub fn edit_cache(
    model: &Model,
    cache: &mut KVCache,
    selector: &CacheSelector,
    direction: &Direction,
    mode: EditMode,
) -> Result<EditReport> {
    let spec = model.spec();
    let (lo, hi) = selector.layer_range;
    if lo > hi || hi >= spec.n_layers {
        return Err(Error::LayerOutOfRange { layer: hi, n_layers: spec.n_layers });
    }
    for &h in &selector.head_set {
        if h >= spec.n_heads {
            return Err(Error::InvalidArg(format!("head {h} out of range")));
        }
    }
    let dim = direction.unit().dim();
    if dim != spec.d_head && dim != spec.d_model {
        return Err(Error::DimMismatch { left: dim, right: spec.d_model });
    }

    // Resolve the per-(layer, head) edit directions up front.
    let mut key_dirs: Vec<Vec<Option<Vector>>> = Vec::with_capacity(spec.n_layers);
    let mut value_dirs: Vec<Vec<Option<Vector>>> = Vec::with_capacity(spec.n_layers);
    for layer in 0..spec.n_layers {
        let mut krow = Vec::with_capacity(spec.n_heads);
        let mut vrow = Vec::with_capacity(spec.n_heads);
        for head in 0..spec.n_heads {
            if dim == spec.d_head {
                krow.push(Some(direction.unit().clone()));
                vrow.push(Some(direction.unit().clone()));
            } else {
                let hw = &model.layer(layer).heads[head];
                krow.push(head_image(&hw.w_k.matvec(direction.unit())));
                vrow.push(head_image(&hw.w_v.matvec(direction.unit())));
            }
        }
        key_dirs.push(krow);
        value_dirs.push(vrow);
    }

    let mut edited = 0usize;
    let mut delta_sum = 0.0;
    for entry in cache.iter_mut() {
        if entry.layer < lo || entry.layer > hi {
            continue;
        }
        if !selector.selects_head(entry.head) {
            continue;
        }
        if let Some(role) = selector.role_filter {
            if entry.role != role {
                continue;
            }
        }
        let mut touched = false;
        if matches!(selector.target, EditTarget::Keys | EditTarget::Both) {
            if let Some(d) = &key_dirs[entry.layer][entry.head] {
                delta_sum += apply_edit(&mut entry.key, d, mode);
                touched = true;
            }
        }
        if matches!(selector.target, EditTarget::Values | EditTarget::Both) {
            if let Some(d) = &value_dirs[entry.layer][entry.head] {
                delta_sum += apply_edit(&mut entry.value, d, mode);
                touched = true;
            }
        }
        if touched {
            edited += 1;
        }
    }

    let mean = if edited == 0 { 0.0 } else { delta_sum / edited as f64 };
    Ok(EditReport { entries_edited: edited, mean_abs_delta_proj: mean })
}

fn head_image(raw: &Vector) -> Option<Vector> {
    if raw.norm() < 1e-12 {
        None
    } else {
        Some(raw.normalized().expect("norm checked"))
    }
}

/// Applies the mode to the component of `x` along unit `d`; returns |Δproj|.
fn apply_edit(x: &mut Vector, d: &Vector, mode: EditMode) -> f64 {
    let mut proj = 0.0;
    for (a, b) in x.as_slice().iter().zip(d.as_slice().iter()) {
        proj += a * b;
    }
    let shift = match mode {
        EditMode::Scale(f) => (f - 1.0) * proj,
        EditMode::SetTo(v) => v - proj,
        EditMode::Add(delta) => delta,
    };
    if shift != 0.0 {
        x.axpy(shift, d);
    }
    shift.abs()
}

// ---------------------------------------------------------------------------
// Serialization ("PVKC" cache files)
// ---------------------------------------------------------------------------

const CACHE_MAGIC: &[u8; 4] = b"PVKC";
const CACHE_VERSION: u16 = 1;

/// Lossless binary serialization: magic, version, model id, shape, per-
/// position roles, then entries layer-major / head-major / position-major
/// as little-endian f64.
pub fn serialize_cache(cache: &KVCache) -> Vec<u8> {
    let len = cache.len_positions();
    let mut out = Vec::new();
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    let id = cache.model_id.as_bytes();
    out.extend_from_slice(&(id.len() as u32).to_le_bytes());
    out.extend_from_slice(id);
    for dim in [cache.n_layers, cache.n_heads, cache.d_head, len] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for pos in 0..len {
        out.push(cache.role_at(pos).expect("position in range").as_byte());
    }
    for layer in 0..cache.n_layers {
        for head in 0..cache.n_heads {
            for pos in 0..len {
                let e = cache.entry(layer, head, pos);
                for &x in e.key.as_slice() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                for &x in e.value.as_slice() {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.bytes.len() {
            return Err(Error::Truncated { needed: self.at + n - self.bytes.len() });
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Inverse of [`serialize_cache`]; bit-exact round trip.
pub fn deserialize_cache(bytes: &[u8]) -> Result<KVCache> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4)? != CACHE_MAGIC {
        return Err(Error::BadMagic { expected: "PVKC" });
    }
    let version = r.u16()?;
    if version != CACHE_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let id_len = r.u32()? as usize;
    let model_id = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| Error::InvalidArg("model id is not valid utf-8".into()))?;
    let n_layers = r.u32()? as usize;
    let n_heads = r.u32()? as usize;
    let d_head = r.u32()? as usize;
    let len = r.u32()? as usize;

    let mut roles = Vec::with_capacity(len);
    for _ in 0..len {
        roles.push(TurnRole::from_byte(r.take(1)?[0])?);
    }

    let mut entries = vec![vec![Vec::with_capacity(len); n_heads]; n_layers];
    for (layer, layer_slot) in entries.iter_mut().enumerate() {
        for (head, head_slot) in layer_slot.iter_mut().enumerate() {
            for (pos, &role) in roles.iter().enumerate() {
                let mut key = Vec::with_capacity(d_head);
                for _ in 0..d_head {
                    key.push(r.f64()?);
                }
                let mut value = Vec::with_capacity(d_head);
                for _ in 0..d_head {
                    value.push(r.f64()?);
                }
                head_slot.push(KVEntry {
                    key: Vector::new(key),
                    value: Vector::new(value),
                    layer,
                    head,
                    pos,
                    role,
                });
            }
        }
    }
    if r.at != bytes.len() {
        return Err(Error::InvalidArg(format!(
            "{} trailing bytes after cache payload",
            bytes.len() - r.at
        )));
    }
    Ok(KVCache { model_id, n_layers, n_heads, d_head, entries })
}
