//! Shared fixtures for the benchmarks: random traces sized like a small
//! model, random embeddings and mock swap cases.

use glab_core::interventions::{sample_cases, SwapCase, SwapMode, SwapPlan};
use glab_core::modelio::{CaptureSpec, LayerAttention, LayerHidden, MockModel, MockSpec, Modality, SequenceLayout, TraceBundle};
use glab_core::scenegen::{RenderConfig, Variant};
use glab_core::tokenmap::PatchGrid;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct TraceShape {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub d_model: usize,
}

impl TraceShape {
    pub const SMALL: TraceShape = TraceShape { layers: 4, heads: 4, tokens: 64, d_model: 16 };
    pub const MEDIUM: TraceShape = TraceShape { layers: 8, heads: 8, tokens: 320, d_model: 64 };
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Hidden states and row-stochastic attention at every position and layer.
pub fn random_trace(rng: &mut ChaCha8Rng, s: TraceShape) -> TraceBundle {
    let p = s.tokens;
    let hidden = (0..s.layers)
        .map(|l| LayerHidden {
            layer: l,
            positions: (0..p).collect(),
            data: (0..p * s.d_model).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        })
        .collect();
    let attention = (0..s.layers)
        .map(|l| {
            let mut data = Vec::with_capacity(s.heads * p * p);
            for _ in 0..s.heads * p {
                let row: Vec<f32> = (0..p).map(|_| rng.gen_range(0.0f32..1.0)).collect();
                let z: f32 = row.iter().sum();
                data.extend(row.into_iter().map(|x| x / z));
            }
            LayerAttention { layer: l, heads: s.heads, queries: (0..p).collect(), key_len: p, data }
        })
        .collect();
    TraceBundle {
        model_id: "bench".into(),
        prompt: String::new(),
        image_ref: None,
        image_hash: String::new(),
        input_ids: vec![0; p],
        input_tokens: vec![String::new(); p],
        modalities: vec![Modality::Image; p],
        generated_ids: Vec::new(),
        generated_tokens: Vec::new(),
        generated_text: String::new(),
        layout: SequenceLayout { visual: 0..p, prompt: p..p, generated: p..p },
        n_layers: s.layers,
        n_heads: s.heads,
        d_model: s.d_model,
        capture: CaptureSpec::default(),
        capture_point: "block_output".into(),
        hidden,
        attention,
        logits: None,
        patch_grid: PatchGrid::new((28, 28), 28, 0).expect("static grid"),
        patch_plan: None,
        timing_ms: None,
    }
}

/// `parts` contiguous position bands covering `0..tokens`.
pub fn bands(tokens: usize, parts: usize) -> Vec<Vec<usize>> {
    (0..parts).map(|i| (i * tokens / parts..(i + 1) * tokens / parts).collect()).collect()
}

/// `n` random embeddings of width `d` with round-robin row labels.
pub fn embeddings(rng: &mut ChaCha8Rng, n: usize, d: usize, rows: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let e = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    (e, (0..n).map(|i| i % rows).collect())
}

pub fn mock() -> MockModel {
    MockModel::new(MockSpec::default()).expect("default mock spec is valid")
}

/// `n` plannable causal pairs at pad 1 on the mock's patch grid.
pub fn swap_cases(n: usize) -> Vec<(SwapCase, SwapPlan)> {
    let grid = mock().patch_grid();
    sample_cases(Variant::CausalRows4, n, 0, &grid, 1, SwapMode::Crosswise, &RenderConfig::default())
        .expect("mock pairs plan")
        .0
}
