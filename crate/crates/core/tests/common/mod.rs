//! Random small traces and brute-force reference implementations of the
//! probe metrics. The references index the raw arrays directly and follow the
//! metric definitions literally, without sharing code with the library.

#![allow(dead_code)]

use glab_core::modelio::{CaptureSpec, LayerAttention, LayerHidden, Modality, SequenceLayout, TraceBundle};
use glab_core::probes::DiffSample;
use glab_core::tokenmap::PatchGrid;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub struct Dims {
    pub layers: usize,
    pub heads: usize,
    pub tokens: usize,
    pub d: usize,
}

pub fn random_dims(rng: &mut ChaCha8Rng) -> Dims {
    Dims { layers: rng.gen_range(1..=4), heads: rng.gen_range(1..=4), tokens: rng.gen_range(4..=64), d: rng.gen_range(2..=16) }
}

/// A trace with hidden states and softmax attention rows at every position
/// and layer.
pub fn random_trace(rng: &mut ChaCha8Rng, dims: &Dims) -> TraceBundle {
    let p = dims.tokens;
    let hidden = (0..dims.layers)
        .map(|l| LayerHidden {
            layer: l,
            positions: (0..p).collect(),
            data: (0..p * dims.d).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        })
        .collect();
    let attention = (0..dims.layers)
        .map(|l| {
            let mut data = Vec::with_capacity(dims.heads * p * p);
            for _ in 0..dims.heads * p {
                let raw: Vec<f32> = (0..p).map(|_| rng.gen_range(-3.0f32..3.0).exp()).collect();
                let z: f32 = raw.iter().sum();
                data.extend(raw.into_iter().map(|x| x / z));
            }
            LayerAttention { layer: l, heads: dims.heads, queries: (0..p).collect(), key_len: p, data }
        })
        .collect();
    TraceBundle {
        model_id: "random".into(),
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
        n_layers: dims.layers,
        n_heads: dims.heads,
        d_model: dims.d,
        capture: CaptureSpec::default(),
        capture_point: "block_output".into(),
        hidden,
        attention,
        logits: None,
        patch_grid: PatchGrid::new((28, 28), 28, 0).unwrap(),
        patch_plan: None,
        timing_ms: None,
    }
}

/// Nonempty random subset of `0..n` with at most `max` elements.
pub fn random_subset(rng: &mut ChaCha8Rng, n: usize, max: usize) -> Vec<usize> {
    let k = rng.gen_range(1..=max.min(n));
    let mut all: Vec<usize> = (0..n).collect();
    for i in 0..k {
        let j = rng.gen_range(i..n);
        all.swap(i, j);
    }
    let mut out = all[..k].to_vec();
    out.sort();
    out
}

/// Random subset that is empty with probability `p_empty`.
pub fn maybe_subset(rng: &mut ChaCha8Rng, n: usize, max: usize, p_empty: f64) -> Vec<usize> {
    if rng.gen_bool(p_empty) {
        Vec::new()
    } else {
        random_subset(rng, n, max)
    }
}

// ---- raw accessors ----

pub fn att(t: &TraceBundle, layer: usize, head: usize, q: usize, k: usize) -> f64 {
    let a = t.attention.iter().find(|a| a.layer == layer).unwrap();
    let slot = a.queries.iter().position(|x| *x == q).unwrap();
    a.data[(head * a.queries.len() + slot) * a.key_len + k] as f64
}

pub fn hid(t: &TraceBundle, layer: usize, pos: usize) -> Vec<f64> {
    let h = t.hidden.iter().find(|h| h.layer == layer).unwrap();
    let slot = h.positions.iter().position(|x| *x == pos).unwrap();
    h.data[slot * t.d_model..(slot + 1) * t.d_model].iter().map(|x| *x as f64).collect()
}

pub fn avg(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub fn cos(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    let c: f64 = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum();
    Some(c.clamp(-1.0, 1.0))
}

fn pool(t: &TraceBundle, layer: usize, positions: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; t.d_model];
    for p in positions {
        for (a, x) in acc.iter_mut().zip(hid(t, layer, *p)) {
            *a += x;
        }
    }
    acc.into_iter().map(|a| a / positions.len() as f64).collect()
}

// ---- reference metrics ----

/// Mean over ordered within-row pairs (per row, then over rows with ≥2
/// members) minus mean over ordered cross-row pairs (per row pair, then over
/// row pairs).
pub fn icg_ref(emb: &[Vec<f64>], rows: &[usize]) -> f64 {
    let mut labels: Vec<usize> = rows.to_vec();
    labels.sort();
    labels.dedup();
    let members = |r: usize| -> Vec<&Vec<f64>> { emb.iter().zip(rows).filter(|(_, x)| **x == r).map(|(e, _)| e).collect() };
    let mut intra = Vec::new();
    for &r in &labels {
        let m = members(r);
        let mut cs = Vec::new();
        for i in 0..m.len() {
            for j in 0..m.len() {
                if i != j {
                    cs.push(cos(m[i], m[j]).unwrap());
                }
            }
        }
        if let Some(v) = avg(&cs) {
            intra.push(v);
        }
    }
    let mut inter = Vec::new();
    for &a in &labels {
        for &b in &labels {
            if a == b {
                continue;
            }
            let mut cs = Vec::new();
            for x in members(a) {
                for y in members(b) {
                    cs.push(cos(x, y).unwrap());
                }
            }
            inter.push(avg(&cs).unwrap());
        }
    }
    avg(&intra).unwrap_or(0.0) - avg(&inter).unwrap()
}

/// `[i][j]`: per sample, mean over (q, k) of mean over layers of max over
/// heads; then mean over samples that have both sets.
pub fn partition_matrix_ref(samples: &[(&TraceBundle, Vec<Vec<usize>>, Vec<Vec<usize>>)], layers: &[usize]) -> Vec<Vec<Option<f64>>> {
    let r = samples[0].1.len();
    let mut out = vec![vec![None; r]; r];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            let mut per_sample = Vec::new();
            for (t, qs, ks) in samples {
                if qs[i].is_empty() || ks[j].is_empty() {
                    continue;
                }
                let mut vals = Vec::new();
                for &q in &qs[i] {
                    for &k in &ks[j] {
                        let per_layer: Vec<f64> = layers
                            .iter()
                            .map(|&l| (0..t.n_heads).map(|h| att(t, l, h, q, k)).fold(f64::MIN, f64::max))
                            .collect();
                        vals.push(avg(&per_layer).unwrap());
                    }
                }
                per_sample.push(avg(&vals).unwrap());
            }
            *cell = avg(&per_sample);
        }
    }
    out
}

/// `(overall, per_partition)` mean cosine between pooled text and pooled
/// visual vectors of each region.
pub fn alignment_ref(
    samples: &[(&TraceBundle, Vec<(usize, Vec<usize>, Vec<usize>)>)],
    layer: usize,
    n_partitions: usize,
) -> (Option<f64>, Vec<Option<f64>>) {
    let mut all = Vec::new();
    let mut per = vec![Vec::new(); n_partitions];
    for (t, regions) in samples {
        for (part, text, vis) in regions {
            if text.is_empty() || vis.is_empty() {
                continue;
            }
            if let Some(c) = cos(&pool(t, layer, text), &pool(t, layer, vis)) {
                all.push(c);
                if *part < n_partitions {
                    per[*part].push(c);
                }
            }
        }
    }
    (avg(&all), per.iter().map(|v| avg(v)).collect())
}

/// Per (layer, head): `mean(d) / max(sd(d), eps) * mean(w)` with the sample
/// standard deviation, capped at ±cap.
pub fn head_snr_ref(
    samples: &[(&TraceBundle, usize, Vec<usize>, Vec<usize>)],
    layers: &[usize],
    eps: f64,
    cap: f64,
) -> Vec<f64> {
    let heads = samples[0].0.n_heads;
    let mut out = Vec::new();
    for &l in layers {
        for h in 0..heads {
            let mut d = Vec::new();
            let mut w = Vec::new();
            for (t, q, g, a) in samples {
                let mg: f64 = g.iter().map(|k| att(t, l, h, *q, *k)).sum();
                let ma: f64 = a.iter().map(|k| att(t, l, h, *q, *k)).sum();
                d.push(mg - ma);
                let n = g.len() + a.len();
                w.push(if n == 0 { 0.0 } else { (mg + ma) / n as f64 });
            }
            let m = avg(&d).unwrap();
            let sd = (d.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (d.len() - 1) as f64).sqrt();
            let s = m / sd.max(eps) * avg(&w).unwrap();
            out.push(if s.abs() > cap { cap * s.signum() } else { s });
        }
    }
    out
}

/// `(starts, values)` of the sliding-window maximum of the per-step image
/// attention, truncated to the shortest sample.
pub fn decay_ref(
    samples: &[(&TraceBundle, Vec<usize>, Vec<usize>)],
    layers: &[usize],
    window: usize,
    stride: usize,
) -> (Vec<usize>, Vec<f64>) {
    let series: Vec<Vec<f64>> = samples
        .iter()
        .map(|(t, steps, vis)| {
            steps
                .iter()
                .map(|&q| {
                    let per_layer: Vec<f64> = layers
                        .iter()
                        .map(|&l| {
                            (0..t.n_heads).map(|h| vis.iter().map(|&k| att(t, l, h, q, k)).sum::<f64>()).fold(f64::MIN, f64::max)
                        })
                        .collect();
                    avg(&per_layer).unwrap()
                })
                .collect()
        })
        .collect();
    let t = series.iter().map(Vec::len).min().unwrap();
    let max_over = |s: &[f64]| s.iter().copied().fold(f64::MIN, f64::max);
    if t > 0 && t < window {
        let v: Vec<f64> = series.iter().map(|s| max_over(&s[..t])).collect();
        return (vec![0], vec![avg(&v).unwrap()]);
    }
    let mut starts = Vec::new();
    let mut values = Vec::new();
    let mut s = 0;
    while s + window <= t {
        let v: Vec<f64> = series.iter().map(|x| max_over(&x[s..s + window])).collect();
        starts.push(s);
        values.push(avg(&v).unwrap());
        s += stride;
    }
    (starts, values)
}

fn mean_diff(vs: &[&Vec<Option<Vec<f64>>>], i: usize, j: usize) -> Option<Vec<f64>> {
    let diffs: Vec<Vec<f64>> = vs
        .iter()
        .filter_map(|v| match (&v[i], &v[j]) {
            (Some(a), Some(b)) => Some(a.iter().zip(b).map(|(x, y)| x - y).collect()),
            _ => None,
        })
        .collect();
    let first = diffs.first()?;
    Some((0..first.len()).map(|k| diffs.iter().map(|d| d[k]).sum::<f64>() / diffs.len() as f64).collect())
}

/// Cosine between the mean symbol difference of pair `a` and the mean object
/// difference of pair `b`, over pairs `i < j`.
pub fn diffvec_ref(samples: &[DiffSample], n: usize) -> Vec<Option<f64>> {
    let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
    let syms: Vec<&Vec<Option<Vec<f64>>>> = samples.iter().map(|s| &s.symbols).collect();
    let objs: Vec<&Vec<Option<Vec<f64>>>> = samples.iter().map(|s| &s.objects).collect();
    let mut out = Vec::new();
    for &(a, b) in &pairs {
        for &(c, d) in &pairs {
            out.push(match (mean_diff(&syms, a, b), mean_diff(&objs, c, d)) {
                (Some(x), Some(y)) => cos(&x, &y),
                _ => None,
            });
        }
    }
    out
}

/// `(r, t)`: mean over samples reaching step `t` of the mean over layers,
/// heads and row keys.
pub fn traversal_ref(samples: &[(&TraceBundle, Vec<Vec<usize>>, Vec<usize>)], layers: &[usize]) -> Vec<Option<f64>> {
    let rows = samples[0].1.len();
    let steps = samples.iter().map(|s| s.2.len()).max().unwrap();
    let mut out = Vec::new();
    for r in 0..rows {
        for t in 0..steps {
            let mut per_sample = Vec::new();
            for (tr, keys, st) in samples {
                if t >= st.len() || keys[r].is_empty() {
                    continue;
                }
                let mut vals = Vec::new();
                for &l in layers {
                    for h in 0..tr.n_heads {
                        for &k in &keys[r] {
                            vals.push(att(tr, l, h, st[t], k));
                        }
                    }
                }
                per_sample.push(avg(&vals).unwrap());
            }
            out.push(avg(&per_sample));
        }
    }
    out
}

pub fn close(a: Option<f64>, b: Option<f64>, tol: f64) -> bool {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs() <= tol,
        (None, None) => true,
        _ => false,
    }
}

// ---- one randomized check per probe, returning the worst error ----

use glab_core::probes::{
    alignment_curve, attention_decay_curve, differential_vector_similarity, head_snr_scores, icg_score,
    partition_attention_matrix, traversal_heatmap, AlignmentSample, AttentionMode, DecaySample, PartitionSets,
    RegionPair, SnrSample, TraversalSample, SNR_CAP, SNR_EPS,
};
use rand::SeedableRng;

pub const INSTANCES: u64 = 100;
pub const TOL: f64 = 1e-6;
pub const COS_TOL: f64 = 1e-9;

fn layers_subset(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    random_subset(rng, n, n)
}

fn max_err(pairs: impl IntoIterator<Item = (Option<f64>, Option<f64>)>) -> f64 {
    pairs
        .into_iter()
        .map(|(a, b)| match (a, b) {
            (Some(x), Some(y)) => (x - y).abs(),
            (None, None) => 0.0,
            _ => f64::INFINITY,
        })
        .fold(0.0, f64::max)
}

pub fn check_icg(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = rng.gen_range(4..=64);
    let d = rng.gen_range(2..=16);
    let n_rows = rng.gen_range(2..=4.min(n));
    let emb: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    // every row label appears at least once
    let rows: Vec<usize> = (0..n).map(|i| if i < n_rows { i } else { rng.gen_range(0..n_rows) }).collect();
    let got = icg_score(&emb, &rows).unwrap().score;
    (got - icg_ref(&emb, &rows)).abs()
}

fn partition_keys(rng: &mut ChaCha8Rng, p: usize, r: usize) -> Vec<Vec<usize>> {
    (0..r).map(|_| maybe_subset(rng, p, 8, 0.15)).collect()
}

pub fn check_partition_matrix(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = random_dims(&mut rng);
    let r = rng.gen_range(1..=4);
    let n = rng.gen_range(1..=3);
    let traces: Vec<TraceBundle> = (0..n).map(|_| random_trace(&mut rng, &dims)).collect();
    let sets: Vec<(&TraceBundle, Vec<Vec<usize>>, Vec<Vec<usize>>)> = traces
        .iter()
        .map(|t| (t, partition_keys(&mut rng, dims.tokens, r), partition_keys(&mut rng, dims.tokens, r)))
        .collect();
    let layers = layers_subset(&mut rng, dims.layers);
    let samples: Vec<PartitionSets<'_>> =
        sets.iter().map(|(t, q, k)| PartitionSets { trace: t, queries: q.clone(), keys: k.clone() }).collect();
    let got = partition_attention_matrix(&samples, &layers, AttentionMode::CrossModal).unwrap();
    let want = partition_matrix_ref(&sets, &layers);
    max_err(got.entries.into_iter().flatten().zip(want.into_iter().flatten()))
}

pub fn check_alignment(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = random_dims(&mut rng);
    let parts = rng.gen_range(1..=4);
    let n = rng.gen_range(1..=3);
    let traces: Vec<TraceBundle> = (0..n).map(|_| random_trace(&mut rng, &dims)).collect();
    let regions: Vec<Vec<(usize, Vec<usize>, Vec<usize>)>> = traces
        .iter()
        .map(|_| {
            (0..rng.gen_range(0..=4))
                .map(|_| (rng.gen_range(0..parts), maybe_subset(&mut rng, dims.tokens, 6, 0.1), maybe_subset(&mut rng, dims.tokens, 6, 0.1)))
                .collect()
        })
        .collect();
    let layers = layers_subset(&mut rng, dims.layers);
    let samples: Vec<AlignmentSample<'_>> = traces
        .iter()
        .zip(&regions)
        .map(|(t, rs)| AlignmentSample {
            trace: t,
            objects: rs
                .iter()
                .map(|(p, tx, v)| RegionPair { partition: *p, text_positions: tx.clone(), visual_positions: v.clone() })
                .collect(),
            symbols: Vec::new(),
        })
        .collect();
    let curve = alignment_curve(&samples, &layers, parts).unwrap();
    let refs: Vec<(&TraceBundle, Vec<(usize, Vec<usize>, Vec<usize>)>)> = traces.iter().zip(regions).collect();
    let mut worst: f64 = 0.0;
    for (pt, &l) in curve.points.iter().zip(&layers) {
        let (all, per) = alignment_ref(&refs, l, parts);
        worst = worst.max(max_err(std::iter::once((pt.objects, all)).chain(pt.per_partition.iter().copied().zip(per))));
    }
    worst
}

pub fn check_head_snr(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = random_dims(&mut rng);
    let n = rng.gen_range(2..=6);
    let traces: Vec<TraceBundle> = (0..n).map(|_| random_trace(&mut rng, &dims)).collect();
    let sets: Vec<(&TraceBundle, usize, Vec<usize>, Vec<usize>)> = traces
        .iter()
        .map(|t| (t, rng.gen_range(0..dims.tokens), random_subset(&mut rng, dims.tokens, 6), random_subset(&mut rng, dims.tokens, 6)))
        .collect();
    let layers = layers_subset(&mut rng, dims.layers);
    let samples: Vec<SnrSample<'_>> = sets
        .iter()
        .map(|(t, q, g, a)| SnrSample { trace: t, query: *q, grounded: g.clone(), adjacent: a.clone() })
        .collect();
    let got = head_snr_scores(&samples, &layers).unwrap();
    let want = head_snr_ref(&sets, &layers, SNR_EPS, SNR_CAP);
    max_err(got.scores.into_iter().map(Some).zip(want.into_iter().map(Some)))
}

pub fn check_decay(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = random_dims(&mut rng);
    let n = rng.gen_range(1..=3);
    let traces: Vec<TraceBundle> = (0..n).map(|_| random_trace(&mut rng, &dims)).collect();
    let sets: Vec<(&TraceBundle, Vec<usize>, Vec<usize>)> = traces
        .iter()
        .map(|t| {
            let len = rng.gen_range(1..=dims.tokens.min(24));
            let steps = (0..len).map(|_| rng.gen_range(0..dims.tokens)).collect();
            (t, steps, random_subset(&mut rng, dims.tokens, 16))
        })
        .collect();
    let layers = layers_subset(&mut rng, dims.layers);
    let window = rng.gen_range(1..=6);
    let stride = rng.gen_range(1..=3);
    let samples: Vec<DecaySample<'_>> =
        sets.iter().map(|(t, s, v)| DecaySample { trace: t, steps: s.clone(), visual: v.clone() }).collect();
    let got = attention_decay_curve(&samples, &layers, window, stride).unwrap();
    let (starts, values) = decay_ref(&sets, &layers, window, stride);
    if got.starts != starts || got.values.len() != values.len() {
        return f64::INFINITY;
    }
    max_err(got.values.into_iter().map(Some).zip(values.into_iter().map(Some)))
}

pub fn check_diffvec(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.gen_range(2..=16);
    let n_sym = rng.gen_range(2..=4);
    let vec_or_none = |rng: &mut ChaCha8Rng| {
        (!rng.gen_bool(0.15)).then(|| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>())
    };
    let samples: Vec<DiffSample> = (0..rng.gen_range(1..=5))
        .map(|_| DiffSample {
            symbols: (0..n_sym).map(|_| vec_or_none(&mut rng)).collect(),
            objects: (0..n_sym).map(|_| vec_or_none(&mut rng)).collect(),
        })
        .collect();
    let got = differential_vector_similarity(&samples, n_sym).unwrap();
    max_err(got.values.into_iter().zip(diffvec_ref(&samples, n_sym)))
}

pub fn check_traversal(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = random_dims(&mut rng);
    let rows = rng.gen_range(1..=4);
    let n = rng.gen_range(1..=3);
    let traces: Vec<TraceBundle> = (0..n).map(|_| random_trace(&mut rng, &dims)).collect();
    let sets: Vec<(&TraceBundle, Vec<Vec<usize>>, Vec<usize>)> = traces
        .iter()
        .map(|t| {
            let keys = partition_keys(&mut rng, dims.tokens, rows);
            let steps = (0..rng.gen_range(1..=12)).map(|_| rng.gen_range(0..dims.tokens)).collect();
            (t, keys, steps)
        })
        .collect();
    let layers = layers_subset(&mut rng, dims.layers);
    let samples: Vec<TraversalSample<'_>> =
        sets.iter().map(|(t, k, s)| TraversalSample { trace: t, row_keys: k.clone(), steps: s.clone() }).collect();
    let got = traversal_heatmap(&samples, &layers).unwrap();
    max_err(got.values.into_iter().zip(traversal_ref(&sets, &layers)))
}

/// `(name, tolerance, check)` for every probe with a reference.
pub fn oracle_suite() -> Vec<(&'static str, f64, fn(u64) -> f64)> {
    vec![
        ("icg_score", COS_TOL, check_icg),
        ("partition_attention_matrix", TOL, check_partition_matrix),
        ("cross_modal_alignment", COS_TOL, check_alignment),
        ("head_snr_scores", TOL, check_head_snr),
        ("attention_decay_curve", TOL, check_decay),
        ("differential_vector_similarity", COS_TOL, check_diffvec),
        ("traversal_heatmap", TOL, check_traversal),
    ]
}
