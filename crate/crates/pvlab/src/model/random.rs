//! Seeded random models and transcripts for determinism and divergence
//! experiments.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::numcore::Mat;
use crate::transcript::{Transcript, TurnRole, Vocab};

use super::{Model, ModelSpec, ModelWeights};

/// Shape of a random model. The default is the desk-scale test size.
#[derive(Debug, Clone, Copy)]
pub struct RandomModelOpts {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub n_experts: usize,
}

impl Default for RandomModelOpts {
    fn default() -> Self {
        RandomModelOpts {
            d_model: 16,
            n_layers: 4,
            n_heads: 2,
            d_mlp: 12,
            vocab_size: 12,
            n_experts: 1,
        }
    }
}

fn fill_gaussian(m: &mut Mat, rng: &mut ChaCha8Rng, sigma: f64) {
    for x in m.data_mut() {
        let z: f64 = StandardNormal.sample(rng);
        *x = z * sigma;
    }
}

/// Builds a model with seeded Gaussian weights and its matching vocabulary
/// (`t0`, `t1`, ...). The same seed and options always yield bit-identical
/// weights.
pub fn build_random_model(seed: u64, opts: RandomModelOpts) -> (Model, Vocab) {
    let spec = ModelSpec {
        d_model: opts.d_model,
        n_layers: opts.n_layers,
        n_heads: opts.n_heads,
        d_head: opts.d_model / opts.n_heads,
        d_mlp: opts.d_mlp,
        vocab_size: opts.vocab_size,
        n_experts: opts.n_experts,
        model_id: format!("random-{seed}"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = ModelWeights::zeros(&spec);

    let attn_sigma = 0.6 / (spec.d_model as f64).sqrt();
    let mlp_sigma = 0.5 / (spec.d_model as f64).sqrt();
    fill_gaussian(&mut w.embed, &mut rng, 0.4);
    for layer in &mut w.layers {
        for head in &mut layer.heads {
            fill_gaussian(&mut head.w_q, &mut rng, attn_sigma);
            fill_gaussian(&mut head.w_k, &mut rng, attn_sigma);
            fill_gaussian(&mut head.w_v, &mut rng, attn_sigma);
            fill_gaussian(&mut head.w_o, &mut rng, attn_sigma);
        }
        for expert in &mut layer.experts {
            fill_gaussian(&mut expert.w_in, &mut rng, mlp_sigma);
            fill_gaussian(&mut expert.w_out, &mut rng, mlp_sigma);
        }
        if let Some(router) = &mut layer.router {
            fill_gaussian(router, &mut rng, 0.8);
        }
    }
    fill_gaussian(&mut w.unembed, &mut rng, 0.4);

    let symbols = (0..opts.vocab_size).map(|i| format!("t{i}")).collect();
    let vocab = Vocab::new(symbols).expect("generated symbols are valid");
    let model = Model::new(spec, w).expect("constructed shapes are valid");
    (model, vocab)
}

/// One seeded user turn of `n_tokens` random symbols.
pub fn random_transcript(vocab: &Vocab, seed: u64, n_tokens: usize) -> Transcript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(0, vocab.len());
    let text = (0..n_tokens)
        .map(|_| vocab.symbols()[dist.sample(&mut rng)].clone())
        .collect::<Vec<_>>()
        .join(" ");
    Transcript::from_turns(vocab, &[(TurnRole::User, &text)]).expect("single user turn is valid")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let (a, _) = build_random_model(5, RandomModelOpts::default());
        let (b, _) = build_random_model(5, RandomModelOpts::default());
        assert_eq!(a.weights(), b.weights());
        let (c, _) = build_random_model(6, RandomModelOpts::default());
        assert_ne!(a.weights(), c.weights());
    }

    #[test]
    fn random_transcript_is_reproducible() {
        let (_, vocab) = build_random_model(5, RandomModelOpts::default());
        let a = random_transcript(&vocab, 9, 12);
        let b = random_transcript(&vocab, 9, 12);
        assert_eq!(a.turns[0].text, b.turns[0].text);
        assert_eq!(a.len_tokens(), 12);
    }
}
