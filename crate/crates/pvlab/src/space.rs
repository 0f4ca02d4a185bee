//! Persona-space analysis: role-activation clouds, principal components,
//! assistant-axis recovery, and basin diagnostics over projection series.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hooks::HookSet;
use crate::model::{DecodePolicy, Model};
use crate::numcore::{dot, pca, PcaResult, Vector};
use crate::persona::Direction;
use crate::trace::{trace_run, ProjectionSeries};
use crate::transcript::{Transcript, TurnRole, Vocab};

/// Response tokens generated per battery question while building clouds.
const CLOUD_RESPONSE_TOKENS: usize = 3;

/// One mean activation vector per role, all at the same layer.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RoleCloud {
    pub layer: usize,
    pub question_battery_id: String,
    pub roles: Vec<(String, Vector)>,
}

impl RoleCloud {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let cloud: RoleCloud = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let dim = cloud.roles.first().map(|(_, v)| v.dim()).unwrap_or(0);
        for (label, v) in &cloud.roles {
            if v.dim() != dim {
                return Err(Error::DimMismatch { left: v.dim(), right: dim });
            }
            if !v.is_finite() {
                return Err(Error::NonFinite("role cloud vector"));
            }
            if cloud.roles.iter().filter(|(l, _)| l == label).count() > 1 {
                return Err(Error::InvalidArg(format!("duplicate role label {label:?}")));
            }
        }
        Ok(cloud)
    }
}

/// Per role: prompts the role, runs the battery in character, and averages
/// the residual at `layer` over all response tokens into one signature
/// vector.
pub fn build_role_cloud(
    model: &Model,
    vocab: &Vocab,
    roles: &[(&str, &str)],
    battery: &[&str],
    layer: usize,
) -> Result<RoleCloud> {
    if roles.len() < 2 {
        return Err(Error::TooFewPoints { need: 2, got: roles.len() });
    }
    if battery.is_empty() {
        return Err(Error::EmptyInput("question battery"));
    }
    let mut out = Vec::with_capacity(roles.len());
    for (label, role_prompt) in roles {
        let mut sum = Vector::zeros(model.spec().d_model);
        let mut count = 0usize;
        for question in battery {
            let text = format!("{role_prompt} {question}");
            let t = Transcript::from_turns(vocab, &[(TurnRole::User, &text)])?;
            let prompt_len = t.len_tokens();
            let (_full, trace) =
                trace_run(model, vocab, &t, CLOUD_RESPONSE_TOKENS, DecodePolicy::Greedy, HookSet::new())?;
            for pos in prompt_len..prompt_len + CLOUD_RESPONSE_TOKENS {
                sum.add_assign(trace.residual_at_boundary(layer, pos)?);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::EmptyInput("generated responses"));
        }
        out.push((label.to_string(), sum.scaled(1.0 / count as f64)));
    }
    let battery_id = {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for q in battery {
            h.update(q.as_bytes());
            h.update([0]);
        }
        let d = h.finalize();
        d.iter().take(6).map(|b| format!("{b:02x}")).collect::<String>()
    };
    Ok(RoleCloud { layer, question_battery_id: battery_id, roles: out })
}

// ---------------------------------------------------------------------------
// Axis analysis
// ---------------------------------------------------------------------------

/// PCA view of a role cloud plus the recovered assistant axis.
#[derive(Debug, Clone)]
pub struct AxisReport {
    pub pca: PcaResult,
    /// Smallest k whose components explain at least 70% of the variance.
    pub k70: usize,
    /// PC1 as a direction at the cloud's layer.
    pub assistant_axis: Direction,
    /// Signed projection of each centered role vector on PC1.
    pub loadings: Vec<(String, f64)>,
}

impl AxisReport {
    pub fn loadings_csv(&self) -> String {
        let mut out = String::from("role,loading\n");
        for (label, value) in &self.loadings {
            out.push_str(&format!("{label},{value:.12e}\n"));
        }
        out
    }
}

/// PCA of the role vectors: top-k components, k70 over the full spectrum,
/// PC1 as the assistant axis, and per-role loadings.
pub fn analyze_cloud(cloud: &RoleCloud, k: usize) -> Result<AxisReport> {
    let points: Vec<Vector> = cloud.roles.iter().map(|(_, v)| v.clone()).collect();
    if points.len() < 2 {
        return Err(Error::TooFewPoints { need: 2, got: points.len() });
    }
    let distinct = points.iter().any(|p| p != &points[0]);
    if !distinct {
        return Err(Error::InvalidArg("degenerate cloud: all role vectors identical".into()));
    }
    let dim = points[0].dim();
    if k > dim {
        return Err(Error::InvalidArg(format!("k = {k} exceeds dimension {dim}")));
    }

    let full = pca(&points, dim)?;
    let k70 = full.k_for_cumulative(0.70);

    let truncated = PcaResult {
        components: full.components[..k].to_vec(),
        eigenvalues: full.eigenvalues[..k].to_vec(),
        variance_fraction: full.variance_fraction[..k].to_vec(),
        mean: full.mean.clone(),
    };
    let pc1 = truncated.components.first().cloned().unwrap_or_else(|| full.components[0].clone());
    let assistant_axis = Direction::new("assistant-axis", cloud.layer, pc1.clone())?;
    let loadings = cloud
        .roles
        .iter()
        .map(|(label, v)| {
            let mut centered = v.clone();
            centered.axpy(-1.0, &full.mean);
            Ok((label.clone(), dot(&centered, &pc1)?))
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(AxisReport { pca: truncated, k70, assistant_axis, loadings })
}

/// normalize(mean of assistant-labeled vectors − mean of the others):
/// targets the assistant-vs-non-assistant contrast more directly than PC1.
pub fn refine_assistant_axis(
    cloud: &RoleCloud,
    assistant_labels: &[&str],
    other_labels: &[&str],
) -> Result<Direction> {
    if assistant_labels.is_empty() || other_labels.is_empty() {
        return Err(Error::EmptyInput("label set"));
    }
    if assistant_labels.iter().any(|a| other_labels.contains(a)) {
        return Err(Error::InvalidArg("label sets must be disjoint".into()));
    }
    let mean_of = |labels: &[&str]| -> Result<Vector> {
        let mut sum: Option<Vector> = None;
        let mut n = 0usize;
        for label in labels {
            let (_, v) = cloud
                .roles
                .iter()
                .find(|(l, _)| l == label)
                .ok_or_else(|| Error::InvalidArg(format!("unknown role label {label:?}")))?;
            match &mut sum {
                Some(s) => s.add_assign(v),
                None => sum = Some(v.clone()),
            }
            n += 1;
        }
        Ok(sum.expect("nonempty labels").scaled(1.0 / n as f64))
    };
    let mut diff = mean_of(assistant_labels)?;
    diff.axpy(-1.0, &mean_of(other_labels)?);
    if diff.norm() < 1e-12 {
        return Err(Error::DegenerateContrast);
    }
    Direction::new("refined-assistant-axis", cloud.layer, diff)
}

// ---------------------------------------------------------------------------
// Basin diagnostics
// ---------------------------------------------------------------------------

/// Descriptive statistics of a projection series against a region.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasinReport {
    /// Fraction of turns with |proj − center| ≤ radius.
    pub dwell_fraction: f64,
    /// First turn inside the region.
    pub entry_turn: Option<usize>,
    /// First turn strictly outside after having been inside.
    pub exit_turn: Option<usize>,
    /// Whether the series re-entered the region after exiting.
    pub returned_after_exit: bool,
}

/// Purely descriptive region statistics over a series; establishes nothing
/// about causality.
pub fn basin_diagnostics(
    series: &ProjectionSeries,
    center: f64,
    radius: f64,
) -> Result<BasinReport> {
    if series.entries.is_empty() {
        return Err(Error::EmptyInput("projection series"));
    }
    if radius <= 0.0 {
        return Err(Error::InvalidArg("basin radius must be positive".into()));
    }
    let inside: Vec<bool> =
        series.entries.iter().map(|e| (e.mean_projection - center).abs() <= radius).collect();
    let dwell = inside.iter().filter(|&&b| b).count() as f64 / inside.len() as f64;
    let entry = inside.iter().position(|&b| b);
    let exit = entry.and_then(|e| (e..inside.len()).find(|&i| !inside[i]));
    let returned = exit.map_or(false, |x| inside.iter().skip(x).any(|&b| b));
    Ok(BasinReport {
        dwell_fraction: dwell,
        entry_turn: entry.map(|i| series.entries[i].turn),
        exit_turn: exit.map(|i| series.entries[i].turn),
        returned_after_exit: returned,
    })
}

// ---------------------------------------------------------------------------
// Synthetic clouds
// ---------------------------------------------------------------------------

/// A sampled Gaussian cloud with planted dominant directions.
pub struct SyntheticCloud {
    pub points: Vec<Vector>,
    /// The planted orthonormal directions, strongest first.
    pub axes: Vec<Vector>,
    /// The exact population variance fractions, one per planted direction
    /// (the analytic eigendecomposition of the planted covariance).
    pub planted_fractions: Vec<f64>,
}

/// Samples `n` points whose population covariance has the given variance
/// fractions on seeded random orthonormal directions, with the remaining
/// variance isotropic over the rest of the space.
pub fn synthetic_cloud(
    dim: usize,
    n: usize,
    fractions: &[f64],
    seed: u64,
) -> Result<SyntheticCloud> {
    let planted_sum: f64 = fractions.iter().sum();
    if fractions.is_empty() || planted_sum >= 1.0 {
        return Err(Error::InvalidArg("planted fractions must sum below 1".into()));
    }
    if fractions.len() >= dim {
        return Err(Error::InvalidArg("need more dimensions than planted directions".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Random orthonormal planted axes by Gram-Schmidt.
    let mut axes: Vec<Vector> = Vec::with_capacity(fractions.len());
    while axes.len() < fractions.len() {
        let mut cand =
            Vector::new((0..dim).map(|_| StandardNormal.sample(&mut rng)).collect::<Vec<f64>>());
        for a in &axes {
            let c = dot(&cand, a)?;
            cand.axpy(-c, a);
        }
        if cand.norm() > 1e-6 {
            axes.push(cand.normalized()?);
        }
    }

    // Total variance normalized to 1: isotropic noise gets the remainder
    // spread over every coordinate, planted axes get the excess on top.
    let sigma2_iso = (1.0 - planted_sum) / (dim - fractions.len()) as f64;
    let mut excess: Vec<f64> = Vec::with_capacity(fractions.len());
    for f in fractions {
        let lambda = f - sigma2_iso;
        if lambda <= 0.0 {
            return Err(Error::InvalidArg(format!(
                "fraction {f} is below the isotropic noise level {sigma2_iso:.4}"
            )));
        }
        excess.push(lambda);
    }
    let iso_sd = sigma2_iso.sqrt();

    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p =
            Vector::new((0..dim).map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * iso_sd
            }).collect::<Vec<f64>>());
        for (axis, lambda) in axes.iter().zip(excess.iter()) {
            let z: f64 = StandardNormal.sample(&mut rng);
            p.axpy(z * lambda.sqrt(), axis);
        }
        points.push(p);
    }

    Ok(SyntheticCloud { points, axes, planted_fractions: fractions.to_vec() })
}
