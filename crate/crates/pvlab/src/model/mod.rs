//! Decoder-only toy transformer: types, forward passes, builders, and file
//! formats.
//!
//! The architecture is pre-norm with RMS normalization and a GELU MLP
//! (optionally mixture-of-experts with top-1 routing). Every arithmetic path
//! is fixed-order f64, so identical inputs give bit-identical outputs.

mod forward;
mod io;
mod planted;
mod random;

pub use forward::{
    attention_forward, embed, forward_pass, generate, mlp_forward, positional_term, DecodePolicy,
    Session,
};
pub use io::{load_model_binary, load_model_json, save_model_binary, save_model_json};
pub use planted::{
    standard_planted_bundle, BehaviorTable, PlanSpec, PlantedBundle, PlantedInfo, PlantedOptions,
    PlantedSpec,
};
pub use random::{build_random_model, random_transcript, RandomModelOpts};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Mat, Vector};

pub use crate::transcript::TokenId;

// ---------------------------------------------------------------------------
// ModelSpec
// ---------------------------------------------------------------------------

/// Architecture hyperparameters of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    /// 1 means a dense MLP; above 1 the block routes to one of n experts.
    pub n_experts: usize,
    pub model_id: String,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0
            || self.n_layers == 0
            || self.n_heads == 0
            || self.d_head == 0
            || self.d_mlp == 0
            || self.vocab_size == 0
            || self.n_experts == 0
        {
            return Err(Error::InvalidArg("model spec fields must be positive".into()));
        }
        if self.n_heads * self.d_head != self.d_model {
            return Err(Error::InvalidArg(format!(
                "n_heads ({}) * d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Weights
// ---------------------------------------------------------------------------

/// Per-head projection matrices. Q/K/V are `d_head × d_model`, O is
/// `d_model × d_head`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadWeights {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
}

/// One MLP expert: `w_in` is `d_mlp × d_model`, `w_out` is `d_model × d_mlp`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertWeights {
    pub w_in: Mat,
    pub w_out: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub heads: Vec<HeadWeights>,
    pub experts: Vec<ExpertWeights>,
    /// `n_experts × d_model`; present only when n_experts > 1.
    pub router: Option<Mat>,
    pub attn_norm_gain: Vector,
    pub mlp_norm_gain: Vector,
    /// Added to the residual at layer entry on every pass. Zero by default;
    /// folding a steering vector into the weights lands here.
    pub resid_bias: Vector,
}

/// Dense weight tensors of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelWeights {
    /// `vocab_size × d_model`.
    pub embed: Mat,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Vector,
    /// `d_model × vocab_size`.
    pub unembed: Mat,
}

impl ModelWeights {
    /// All-zero weights with unit norm gains, shaped for `spec`.
    pub fn zeros(spec: &ModelSpec) -> Self {
        let layers = (0..spec.n_layers)
            .map(|_| LayerWeights {
                heads: (0..spec.n_heads)
                    .map(|_| HeadWeights {
                        w_q: Mat::zeros(spec.d_head, spec.d_model),
                        w_k: Mat::zeros(spec.d_head, spec.d_model),
                        w_v: Mat::zeros(spec.d_head, spec.d_model),
                        w_o: Mat::zeros(spec.d_model, spec.d_head),
                    })
                    .collect(),
                experts: (0..spec.n_experts)
                    .map(|_| ExpertWeights {
                        w_in: Mat::zeros(spec.d_mlp, spec.d_model),
                        w_out: Mat::zeros(spec.d_model, spec.d_mlp),
                    })
                    .collect(),
                router: (spec.n_experts > 1).then(|| Mat::zeros(spec.n_experts, spec.d_model)),
                attn_norm_gain: Vector::ones(spec.d_model),
                mlp_norm_gain: Vector::ones(spec.d_model),
                resid_bias: Vector::zeros(spec.d_model),
            })
            .collect();
        ModelWeights {
            embed: Mat::zeros(spec.vocab_size, spec.d_model),
            layers,
            final_norm_gain: Vector::ones(spec.d_model),
            unembed: Mat::zeros(spec.d_model, spec.vocab_size),
        }
    }

    fn validate(&self, spec: &ModelSpec) -> Result<()> {
        let check = |ok: bool, what: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidArg(format!("weight shape mismatch: {what}")))
            }
        };
        check(
            self.embed.rows == spec.vocab_size && self.embed.cols == spec.d_model,
            "embed",
        )?;
        check(
            self.unembed.rows == spec.d_model && self.unembed.cols == spec.vocab_size,
            "unembed",
        )?;
        check(self.layers.len() == spec.n_layers, "layer count")?;
        check(self.final_norm_gain.dim() == spec.d_model, "final norm gain")?;
        for (i, layer) in self.layers.iter().enumerate() {
            check(layer.heads.len() == spec.n_heads, "head count")?;
            for h in &layer.heads {
                check(h.w_q.rows == spec.d_head && h.w_q.cols == spec.d_model, "w_q")?;
                check(h.w_k.rows == spec.d_head && h.w_k.cols == spec.d_model, "w_k")?;
                check(h.w_v.rows == spec.d_head && h.w_v.cols == spec.d_model, "w_v")?;
                check(h.w_o.rows == spec.d_model && h.w_o.cols == spec.d_head, "w_o")?;
            }
            check(layer.experts.len() == spec.n_experts, "expert count")?;
            for e in &layer.experts {
                check(e.w_in.rows == spec.d_mlp && e.w_in.cols == spec.d_model, "w_in")?;
                check(e.w_out.rows == spec.d_model && e.w_out.cols == spec.d_mlp, "w_out")?;
            }
            match (&layer.router, spec.n_experts > 1) {
                (Some(r), true) => {
                    check(r.rows == spec.n_experts && r.cols == spec.d_model, "router")?
                }
                (None, false) => {}
                _ => {
                    return Err(Error::InvalidArg(format!(
                        "layer {i}: router presence inconsistent with n_experts"
                    )))
                }
            }
            check(layer.attn_norm_gain.dim() == spec.d_model, "attn norm gain")?;
            check(layer.mlp_norm_gain.dim() == spec.d_model, "mlp norm gain")?;
            check(layer.resid_bias.dim() == spec.d_model, "resid bias")?;
        }
        Ok(())
    }

    fn is_finite(&self) -> bool {
        self.embed.is_finite()
            && self.unembed.is_finite()
            && self.final_norm_gain.is_finite()
            && self.layers.iter().all(|l| {
                l.heads.iter().all(|h| {
                    h.w_q.is_finite() && h.w_k.is_finite() && h.w_v.is_finite() && h.w_o.is_finite()
                }) && l.experts.iter().all(|e| e.w_in.is_finite() && e.w_out.is_finite())
                    && l.router.as_ref().map_or(true, Mat::is_finite)
                    && l.attn_norm_gain.is_finite()
                    && l.mlp_norm_gain.is_finite()
                    && l.resid_bias.is_finite()
            })
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

/// Spec plus weights. Immutable after construction; forward passes over
/// distinct caches may run concurrently.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Model {
    spec: ModelSpec,
    weights: ModelWeights,
}

impl Model {
    pub fn new(spec: ModelSpec, weights: ModelWeights) -> Result<Self> {
        spec.validate()?;
        weights.validate(&spec)?;
        if !weights.is_finite() {
            return Err(Error::NonFinite("model weights"));
        }
        Ok(Model { spec, weights })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn id(&self) -> &str {
        &self.spec.model_id
    }

    /// Clone with a different model id (used when deriving variants).
    pub fn with_id(&self, id: &str) -> Model {
        let mut m = self.clone();
        m.spec.model_id = id.to_string();
        m
    }

    pub(crate) fn layer(&self, layer: usize) -> &LayerWeights {
        &self.weights.layers[layer]
    }

    /// Mutable weights access for builders; revalidation is on the caller.
    pub(crate) fn weights_mut(&mut self) -> &mut ModelWeights {
        &mut self.weights
    }
}
