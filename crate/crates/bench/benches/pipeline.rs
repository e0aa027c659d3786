use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use glab_bench::{mock, swap_cases};
use glab_core::interventions::{execute_swap, swap_queries};
use glab_core::modelio::{Backend, CaptureSpec, DecodeConfig, TokenSelection};
use glab_core::scenegen::{generate_scene, render_scene, RenderConfig, Variant};

fn scene_render(c: &mut Criterion) {
    let cfg = RenderConfig::default();
    c.bench_function("generate_and_render_scene", |b| {
        let mut seed = 0;
        b.iter(|| {
            seed += 1;
            let s = generate_scene(seed, Variant::SymbolsLines, 15).unwrap();
            render_scene(black_box(&s), &cfg).unwrap()
        })
    });
}

fn mock_generate(c: &mut Criterion) {
    let mut m = mock();
    let (case, plan) = swap_cases(1).remove(0);
    let prompt = swap_queries(&case.pair, &plan).unwrap().remove(0).prompt;
    let input = case.host.input(&prompt);
    let decode = DecodeConfig::default();
    let cap = CaptureSpec::default().hidden(TokenSelection::Visual).attention(TokenSelection::Response);
    c.bench_function("mock_generate_text_only", |b| b.iter(|| m.run_generate(black_box(&input), &CaptureSpec::default(), &decode).unwrap()));
    c.bench_function("mock_generate_with_capture", |b| b.iter(|| m.run_generate(black_box(&input), &cap, &decode).unwrap()));
}

fn swap(c: &mut Criterion) {
    let mut m = mock();
    let cases = swap_cases(4);
    let queries: Vec<_> = cases.iter().map(|(c, p)| swap_queries(&c.pair, p).unwrap()).collect();
    c.bench_function("execute_swap_4_pairs", |b| {
        b.iter(|| {
            for ((case, plan), q) in cases.iter().zip(&queries) {
                black_box(execute_swap(&mut m, case, plan, q).unwrap());
            }
        })
    });
}

criterion_group!(benches, scene_render, mock_generate, swap);
criterion_main!(benches);
