//! Forward-pass hooks: phase-gated residual interventions and expert forcing.
//!
//! Hooks fire at the entry of each layer in their range, after the previous
//! block's residual update and before normalization. They are immutable once
//! constructed, so one hook instance can be attached to many runs.

use crate::error::{Error, Result};
use crate::numcore::Vector;
use crate::persona::{CapPlan, SteeringPlan};
use crate::transcript::TurnRole;

/// Whether a forward pass consumes a scripted token or one the model just
/// produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenOrigin {
    Scripted,
    Generated,
}

/// Per-pass context given to hooks.
#[derive(Debug, Clone, Copy)]
pub struct PassContext {
    pub pos: usize,
    pub role: TurnRole,
    pub origin: TokenOrigin,
}

/// When a hook is live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// Only while the model produces its own tokens.
    GenerationOnly,
    /// Only while scripted user tokens are processed.
    UserOnly,
    /// Every forward pass.
    All,
}

impl Phase {
    fn matches(self, ctx: &PassContext) -> bool {
        match self {
            Phase::All => true,
            Phase::GenerationOnly => ctx.origin == TokenOrigin::Generated,
            Phase::UserOnly => {
                ctx.origin == TokenOrigin::Scripted && ctx.role == TurnRole::User
            }
        }
    }
}

/// A residual-stream intervention.
#[derive(Debug, Clone)]
pub enum Hook {
    /// Adds `alpha · unit` at the entry of each layer in range.
    Steer(SteeringPlan),
    /// One-sided exact clamp: if the projection onto the direction is below
    /// the threshold, raises it to the threshold exactly.
    Cap(CapPlan),
}

impl Hook {
    fn layer_range(&self) -> (usize, usize) {
        match self {
            Hook::Steer(p) => p.layers,
            Hook::Cap(p) => p.layers,
        }
    }

    fn phase(&self) -> Phase {
        match self {
            Hook::Steer(p) => p.phase,
            Hook::Cap(p) => p.phase,
        }
    }

    fn dim(&self) -> usize {
        match self {
            Hook::Steer(p) => p.direction.unit().dim(),
            Hook::Cap(p) => p.direction.unit().dim(),
        }
    }

    fn apply(&self, residual: &mut Vector) {
        match self {
            Hook::Steer(plan) => {
                residual.axpy(plan.alpha, plan.direction.unit());
            }
            Hook::Cap(plan) => {
                let mut proj = 0.0;
                for (x, u) in residual.as_slice().iter().zip(plan.direction.unit().as_slice()) {
                    proj += x * u;
                }
                if proj < plan.tau {
                    residual.axpy(plan.tau - proj, plan.direction.unit());
                }
            }
        }
    }
}

/// Ordered set of hooks plus an optional forced expert choice.
#[derive(Debug, Clone, Default)]
pub struct HookSet {
    hooks: Vec<Hook>,
    /// Forces the MLP at `(layer, expert)` instead of the routed choice.
    expert_override: Option<(usize, usize)>,
}

impl HookSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Validates the hook's layer range and dimension against the model
    /// shape, then attaches it. Hooks fire in attachment order.
    pub fn attach(&mut self, hook: Hook, n_layers: usize, d_model: usize) -> Result<()> {
        let (lo, hi) = hook.layer_range();
        if lo > hi || hi >= n_layers {
            return Err(Error::LayerOutOfRange { layer: hi, n_layers });
        }
        if hook.dim() != d_model {
            return Err(Error::DimMismatch { left: hook.dim(), right: d_model });
        }
        self.hooks.push(hook);
        Ok(())
    }

    pub fn force_expert(&mut self, layer: usize, expert: usize) {
        self.expert_override = Some((layer, expert));
    }

    pub fn expert_override(&self, layer: usize) -> Option<usize> {
        match self.expert_override {
            Some((l, e)) if l == layer => Some(e),
            _ => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.hooks.is_empty() && self.expert_override.is_none()
    }

    /// Runs every phase-matching hook whose range covers `layer`.
    pub fn apply_at_layer(&self, layer: usize, residual: &mut Vector, ctx: &PassContext) {
        for hook in &self.hooks {
            let (lo, hi) = hook.layer_range();
            if layer >= lo && layer <= hi && hook.phase().matches(ctx) {
                hook.apply(residual);
            }
        }
    }
}
