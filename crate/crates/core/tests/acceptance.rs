//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails. Run with
//! `cargo test -p glab-core --test acceptance`.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use glab_core::halleval::{
    chair_scores, pope_evaluate, score_scene_description, Caption, CocoAnnotations, PopeSubset, QaRecord, SynonymMap,
};
use glab_core::interventions::{
    disjoint_symbol_experiment, execute_swap, run_swaps, sample_cases, swap_queries, SwapCase, SwapMode, SwapPlan,
    SwapSummary,
};
use glab_core::modelio::{Backend, CaptureSpec, DecodeConfig, MockModel, MockSpec, PatchPlan, TokenSelection};
use glab_core::runner::{run_experiment, ExperimentConfig, ExperimentKind};
use glab_core::scenegen::{
    generate_causal_pair, generate_scene, render_scene, symmetric_mismatch, BBox, Color, LayoutKind, ObjectLabel,
    RenderConfig, Shape, Variant,
};
use glab_core::tokenmap::{object_token_indices, parse_structured_output, OutputFormat, PatchGrid};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn mock() -> MockModel {
    MockModel::new(MockSpec::default()).unwrap()
}

// ---- 1: probe oracles ----

fn probe_oracles() -> Outcome {
    let t0 = Instant::now();
    for (name, tol, check) in common::oracle_suite() {
        let worst = (0..common::INSTANCES).map(check).fold(0.0, f64::max);
        ensure!(worst <= tol, "{name}: max error {worst:e} > {tol:e}");
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1}s");
    Ok(format!("7 probes x {} instances, {secs:.2}s", common::INSTANCES))
}

// ---- 2: swap soundness ----

fn swap_soundness() -> Outcome {
    let mut m = mock();
    let grid = m.patch_grid();
    let (cases, skipped) =
        sample_cases(Variant::CausalRows4, 100, 0, &grid, 1, SwapMode::Crosswise, &RenderConfig::default()).map_err(|e| e.to_string())?;
    ensure!(cases.len() == 100, "only {} pairs", cases.len());
    for (c, _) in &cases {
        ensure!(
            symmetric_mismatch(&c.pair.host, &c.pair.source, &c.pair.targets, &c.pair.correspondence),
            "pair {} violates the symmetric mismatch",
            c.pair.seed
        );
    }
    let results = run_swaps(&mut m, &cases).map_err(|e| e.to_string())?;
    let s = SwapSummary::new(Variant::CausalRows4, 1, SwapMode::Crosswise, &results, skipped);
    ensure!(s.transferred_label.accuracy == Some(1.0), "transferred-label accuracy {:?}", s.transferred_label.accuracy);
    ensure!(s.host_label.accuracy == Some(0.0), "host-label accuracy {:?}", s.host_label.accuracy);

    let cap = CaptureSpec::default().hidden(TokenSelection::All).attention(TokenSelection::Response).logits();
    let decode = DecodeConfig::default();
    for (c, plan) in &cases {
        let queries = swap_queries(&c.pair, plan).map_err(|e| e.to_string())?;
        let res = execute_swap(&mut m, c, &SwapPlan::empty(&c.pair), &queries).map_err(|e| e.to_string())?;
        ensure!(res.records.iter().all(|r| r.pre_answer == r.post_answer), "pair {}: empty plan changed an answer", c.pair.seed);
        let input = c.host.input(&queries[0].prompt);
        let a = m.run_generate(&input, &cap, &decode).map_err(|e| e.to_string())?;
        let b = m.run_with_patch(&input, &PatchPlan::default(), &BTreeMap::new(), &cap, &decode).map_err(|e| e.to_string())?;
        ensure!(a.content_hash() == b.content_hash(), "pair {}: empty-plan trace differs", c.pair.seed);
    }
    Ok(format!("T={:.2} H={:.2} over 100 pairs; empty plan bit-exact", 1.0, 0.0))
}

// ---- 3: disjoint control ----

fn disjoint_control() -> Outcome {
    let mut m = mock();
    let grid = m.patch_grid();
    let cfg = RenderConfig::default();
    let mut cases = Vec::new();
    let mut seed = 0;
    while cases.len() < 100 {
        let c = SwapCase::render(generate_causal_pair(seed, Variant::CausalRows4Disjoint, 2).map_err(|e| e.to_string())?, &cfg)
            .map_err(|e| e.to_string())?;
        seed += 1;
        if c.plan(&grid, 1, SwapMode::Crosswise).is_ok() {
            cases.push(c);
        }
    }
    let (rep, _) = disjoint_symbol_experiment(&mut m, &cases, &|c| c.plan(&grid, 1, SwapMode::Crosswise)).map_err(|e| e.to_string())?;
    ensure!(rep.n_pairs == 100, "{} pairs evaluated", rep.n_pairs);
    ensure!(rep.none_rate == Some(1.0), "none rate {:?}", rep.none_rate);
    ensure!(rep.accuracy == Some(1.0), "subset accuracy {:?}", rep.accuracy);
    Ok(format!("subset accuracy 1.00 on {} queries, none rate 100%", rep.subset_size))
}

// ---- 4: CHAIR / POPE fixtures ----

struct ChairCase {
    caption: &'static str,
    truth: &'static [&'static str],
    mentioned: &'static [&'static str],
    hallucinated: &'static [&'static str],
    sentences: usize,
    bad_sentences: usize,
}

const CHAIR_CASES: &[ChairCase] = &[
    ChairCase { caption: "A dog sits on a couch.", truth: &["dog", "couch"], mentioned: &["couch", "dog"], hallucinated: &[], sentences: 1, bad_sentences: 0 },
    ChairCase { caption: "A cat sleeps.", truth: &["dog"], mentioned: &["cat"], hallucinated: &["cat"], sentences: 1, bad_sentences: 1 },
    ChairCase { caption: "The sky is clear.", truth: &["dog"], mentioned: &[], hallucinated: &[], sentences: 1, bad_sentences: 0 },
    ChairCase { caption: "A puppy and a kitten play.", truth: &["dog"], mentioned: &["cat", "dog"], hallucinated: &["cat"], sentences: 1, bad_sentences: 1 },
    ChairCase { caption: "Two men ride bikes. A bus goes by.", truth: &["person", "bicycle"], mentioned: &["bicycle", "bus", "person"], hallucinated: &["bus"], sentences: 2, bad_sentences: 1 },
    ChairCase { caption: "A giraffe next to an elephant.", truth: &["car"], mentioned: &["elephant", "giraffe"], hallucinated: &["elephant", "giraffe"], sentences: 1, bad_sentences: 1 },
    ChairCase { caption: "A sofa faces a television.", truth: &["couch", "tv"], mentioned: &["couch", "tv"], hallucinated: &[], sentences: 1, bad_sentences: 0 },
    ChairCase { caption: "A woman talks on her cell phone.", truth: &["person"], mentioned: &["cell phone", "person"], hallucinated: &["cell phone"], sentences: 1, bad_sentences: 1 },
    ChairCase { caption: "The dog chases another dog.", truth: &["dog"], mentioned: &["dog"], hallucinated: &[], sentences: 1, bad_sentences: 0 },
    ChairCase { caption: "A man. A horse. A cow.", truth: &["person"], mentioned: &["cow", "horse", "person"], hallucinated: &["cow", "horse"], sentences: 3, bad_sentences: 2 },
    ChairCase { caption: "Pizza on a plate!", truth: &["pizza"], mentioned: &["pizza"], hallucinated: &[], sentences: 1, bad_sentences: 0 },
    ChairCase { caption: "A laptop and a mug. Nothing else?", truth: &["laptop"], mentioned: &["cup", "laptop"], hallucinated: &["cup"], sentences: 2, bad_sentences: 1 },
];

struct PopeCase {
    /// `(gold present, answer)`
    qa: &'static [(bool, &'static str)],
    counts: [usize; 5],
    accuracy: f64,
    precision: f64,
    recall: f64,
    f1: f64,
    yes_rate: f64,
}

const POPE_CASES: &[PopeCase] = &[
    PopeCase { qa: &[(true, "Yes"), (false, "No")], counts: [1, 0, 1, 0, 0], accuracy: 1.0, precision: 1.0, recall: 1.0, f1: 1.0, yes_rate: 0.5 },
    PopeCase { qa: &[(true, "yes"), (true, "yes"), (false, "yes"), (false, "yes")], counts: [2, 2, 0, 0, 0], accuracy: 0.5, precision: 0.5, recall: 1.0, f1: 2.0 / 3.0, yes_rate: 1.0 },
    PopeCase { qa: &[(true, "no"), (false, "no"), (false, "No.")], counts: [0, 0, 2, 1, 0], accuracy: 2.0 / 3.0, precision: 0.0, recall: 0.0, f1: 0.0, yes_rate: 0.0 },
    PopeCase { qa: &[(true, "There is a dog."), (false, "maybe")], counts: [0, 0, 1, 1, 2], accuracy: 0.5, precision: 0.0, recall: 0.0, f1: 0.0, yes_rate: 0.0 },
    PopeCase { qa: &[(true, "Yes, there is."), (true, "No"), (false, "Yes"), (false, "no")], counts: [1, 1, 1, 1, 0], accuracy: 0.5, precision: 0.5, recall: 0.5, f1: 0.5, yes_rate: 0.5 },
    PopeCase { qa: &[(true, "YES"), (true, "yes!"), (true, "yes"), (false, "no")], counts: [3, 0, 1, 0, 0], accuracy: 1.0, precision: 1.0, recall: 1.0, f1: 1.0, yes_rate: 0.75 },
    PopeCase { qa: &[(false, "yes"), (false, "yes"), (false, "no"), (false, "no"), (false, "no")], counts: [0, 2, 3, 0, 0], accuracy: 0.6, precision: 0.0, recall: 0.0, f1: 0.0, yes_rate: 0.4 },
    PopeCase { qa: &[(true, "yes"), (true, "no"), (true, "no"), (false, "no")], counts: [1, 0, 1, 2, 0], accuracy: 0.5, precision: 1.0, recall: 1.0 / 3.0, f1: 0.5, yes_rate: 0.25 },
    PopeCase { qa: &[(true, "yes"), (false, "yes"), (false, "yes"), (false, "no"), (true, "yes")], counts: [2, 2, 1, 0, 0], accuracy: 0.6, precision: 0.5, recall: 1.0, f1: 2.0 / 3.0, yes_rate: 0.8 },
    PopeCase { qa: &[(true, ""), (false, "")], counts: [0, 0, 1, 1, 2], accuracy: 0.5, precision: 0.0, recall: 0.0, f1: 0.0, yes_rate: 0.0 },
];

fn chair_fixtures() -> Result<usize, String> {
    let syn = SynonymMap::default();
    let mut images = BTreeMap::new();
    let mut captions = Vec::new();
    let (mut m_tot, mut h_tot, mut s_tot, mut b_tot, mut caps_h) = (0, 0, 0, 0, 0);
    for (i, c) in CHAIR_CASES.iter().enumerate() {
        let id = i as u64 + 1;
        let truth: BTreeSet<String> = c.truth.iter().map(|s| s.to_string()).collect();
        images.insert(id, truth.clone());
        let ann = CocoAnnotations::from_sets(Vec::new(), BTreeMap::from([(id, truth)]));
        let cap = Caption { image_id: id, text: c.caption.into() };
        let r = chair_scores(std::slice::from_ref(&cap), &ann, &syn);
        let d = &r.details[0];
        ensure!(d.mentioned == c.mentioned, "`{}`: mentioned {:?}", c.caption, d.mentioned);
        ensure!(d.hallucinated == c.hallucinated, "`{}`: hallucinated {:?}", c.caption, d.hallucinated);
        ensure!(d.sentences == c.sentences && d.sentences_hallucinated == c.bad_sentences, "`{}`: sentences {}/{}", c.caption, d.sentences_hallucinated, d.sentences);
        let (m, h) = (c.mentioned.len(), c.hallucinated.len());
        let want_i = if m == 0 { 0.0 } else { h as f64 / m as f64 };
        ensure!(r.chair_i == want_i, "`{}`: CHAIR_i {}", c.caption, r.chair_i);
        ensure!(r.chair_s == if h > 0 { 1.0 } else { 0.0 }, "`{}`: CHAIR_s {}", c.caption, r.chair_s);
        m_tot += m;
        h_tot += h;
        s_tot += c.sentences;
        b_tot += c.bad_sentences;
        caps_h += (h > 0) as usize;
        captions.push(cap);
    }
    let ann = CocoAnnotations::from_sets(Vec::new(), images);
    let r = chair_scores(&captions, &ann, &syn);
    ensure!((r.mentioned, r.hallucinated) == (m_tot, h_tot), "corpus counts {}/{}", r.hallucinated, r.mentioned);
    ensure!(r.chair_i == h_tot as f64 / m_tot as f64, "corpus CHAIR_i {}", r.chair_i);
    ensure!(r.chair_s == caps_h as f64 / CHAIR_CASES.len() as f64, "corpus CHAIR_s {}", r.chair_s);
    ensure!(r.chair_s_sentence == b_tot as f64 / s_tot as f64, "corpus sentence CHAIR_s {}", r.chair_s_sentence);
    Ok(CHAIR_CASES.len() + 1)
}

fn pope_fixtures() -> Result<usize, String> {
    for (i, c) in POPE_CASES.iter().enumerate() {
        let recs: Vec<QaRecord> = c
            .qa
            .iter()
            .enumerate()
            .map(|(j, (label, answer))| QaRecord {
                image_id: j as u64,
                object: "dog".into(),
                subset: PopeSubset::ALL[i % 3],
                label: *label,
                answer: answer.to_string(),
            })
            .collect();
        let r = pope_evaluate(&recs);
        ensure!(r.len() == 1, "case {i}: {} subsets", r.len());
        let r = &r[0];
        ensure!([r.tp, r.fp, r.tn, r.fn_, r.unparsed] == c.counts, "case {i}: counts {:?}", [r.tp, r.fp, r.tn, r.fn_, r.unparsed]);
        let close = |a: f64, b: f64| a == b;
        ensure!(
            close(r.accuracy, c.accuracy) && close(r.precision, c.precision) && close(r.recall, c.recall) && close(r.f1, c.f1) && close(r.yes_rate, c.yes_rate),
            "case {i}: metrics {r:?}"
        );
    }
    Ok(POPE_CASES.len())
}

fn chair_pope_fixtures() -> Outcome {
    let c = chair_fixtures()?;
    let p = pope_fixtures()?;
    ensure!(c + p >= 20, "only {} fixtures", c + p);
    Ok(format!("{c} CHAIR + {p} POPE fixtures exact"))
}

// ---- 5: description round trip ----

fn perfect_text(gt: &glab_core::GroundTruth, format: OutputFormat) -> Vec<(String, Vec<String>)> {
    match format {
        OutputFormat::Flat => vec![(String::new(), gt.objects.iter().map(|o| o.label().to_string()).collect())],
        OutputFormat::Rows => gt
            .labels_by_partition()
            .into_iter()
            .map(|(k, v)| (k, v.iter().map(|l| l.to_string()).collect()))
            .collect(),
    }
}

fn render_text(rows: &[(String, Vec<String>)], format: OutputFormat, prefix: &str) -> String {
    match format {
        OutputFormat::Flat => rows[0].1.join(", "),
        OutputFormat::Rows => rows.iter().map(|(k, v)| format!("{prefix} {k}: {}", v.join(", "))).collect::<Vec<_>>().join("\n"),
    }
}

fn description_round_trip() -> Outcome {
    let counts = [4, 6, 8, 10, 12, 15];
    for i in 0..50u64 {
        let variant = Variant::DESCRIPTION[i as usize % Variant::DESCRIPTION.len()];
        let scene = generate_scene(1000 + i, variant, counts[i as usize % counts.len()]).map_err(|e| e.to_string())?;
        let (_, gt) = render_scene(&scene, &RenderConfig::default()).map_err(|e| e.to_string())?;
        let n = gt.objects.len();
        let format = if gt.has_cues() { OutputFormat::Rows } else { OutputFormat::Flat };
        let prefix = if matches!(gt.layout, LayoutKind::Grid { .. }) { "Cell" } else { "Row" };
        let score = |rows: &[(String, Vec<String>)]| {
            score_scene_description(&parse_structured_output(&render_text(rows, format, prefix), format), &gt, format)
        };

        let rows = perfect_text(&gt, format);
        let s = score(&rows);
        ensure!(
            (s.precision, s.recall, s.f1, s.accuracy) == (1.0, 1.0, 1.0, 1.0),
            "{} seed {}: perfect answer scored {s:?}",
            variant.id(),
            scene.seed
        );

        let mut deleted = rows.clone();
        let row = deleted.iter_mut().find(|(_, v)| !v.is_empty()).unwrap();
        row.1.pop();
        let s = score(&deleted);
        ensure!(s.recall == (n - 1) as f64 / n as f64, "{} seed {}: recall after deletion {}", variant.id(), scene.seed, s.recall);

        let present: BTreeSet<ObjectLabel> = gt.objects.iter().map(|o| o.label()).collect();
        let wrong = Color::PALETTE9
            .iter()
            .flat_map(|c| Shape::ALL.iter().map(move |s| ObjectLabel::new(Some(*c), *s)))
            .find(|l| !present.contains(l))
            .unwrap();
        let mut injected = rows.clone();
        injected[0].1.push(wrong.to_string());
        let s = score(&injected);
        ensure!(s.precision == n as f64 / (n + 1) as f64, "{} seed {}: precision after injection {}", variant.id(), scene.seed, s.precision);
    }
    Ok(format!("50 scenes over {} variants", Variant::DESCRIPTION.len()))
}

// ---- 6: determinism ----

fn small_run(kind: ExperimentKind, out: &Path) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(kind);
    cfg.output_dir = out.to_path_buf();
    cfg.dataset.n_samples = 2;
    cfg.swap.pairs = 3;
    cfg
}

fn determinism() -> Outcome {
    let cfg = RenderConfig::default();
    let mut scenes = 0;
    for variant in Variant::ALL {
        for seed in 0..5 {
            let n = if variant.descriptor().causal { 4 } else { 6 };
            let a = generate_scene(seed, variant, n).map_err(|e| e.to_string())?;
            let b = generate_scene(seed, variant, n).map_err(|e| e.to_string())?;
            let (pa, ga) = render_scene(&a, &cfg).map_err(|e| e.to_string())?;
            let (pb, gb) = render_scene(&b, &cfg).map_err(|e| e.to_string())?;
            ensure!(pa == pb, "{} seed {seed}: image bytes differ", variant.id());
            ensure!(ga.to_json().unwrap() == gb.to_json().unwrap(), "{} seed {seed}: ground truth differs", variant.id());
            scenes += 1;
        }
    }
    let kinds = [ExperimentKind::Icg, ExperimentKind::Swap, ExperimentKind::DescribeEval];
    for kind in kinds {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = run_experiment(&small_run(kind, a.path())).map_err(|e| e.to_string())?;
        let rb = run_experiment(&small_run(kind, b.path())).map_err(|e| e.to_string())?;
        ensure!(ra.manifest.manifest_hash == rb.manifest.manifest_hash, "{kind}: manifest hashes differ");
    }
    Ok(format!("{scenes} scenes byte-identical; {} mock runs reproduce their manifest hash", kinds.len()))
}

// ---- 7: dilation geometry ----

/// Patches whose centre lies in the box (nearest patch when none does),
/// grown by `pad` along each axis and clipped.
fn dilation_ref(b: &BBox, g: &PatchGrid, pad: usize) -> BTreeSet<usize> {
    let p = g.patch_size as f64;
    let inside = |r: usize, c: usize| {
        let (x, y) = ((c as f64 + 0.5) * p, (r as f64 + 0.5) * p);
        x >= b.x0 as f64 && x < b.x1 as f64 && y >= b.y0 as f64 && y < b.y1 as f64
    };
    let mut core: Vec<(usize, usize)> = (0..g.hp).flat_map(|r| (0..g.wp).map(move |c| (r, c))).filter(|(r, c)| inside(*r, *c)).collect();
    if core.is_empty() {
        let (cx, cy) = ((b.x0 + b.x1) as f64 / 2.0, (b.y0 + b.y1) as f64 / 2.0);
        core.push((((cy / p) as usize).min(g.hp - 1), ((cx / p) as usize).min(g.wp - 1)));
    }
    let mut out = BTreeSet::new();
    for r in 0..g.hp {
        for c in 0..g.wp {
            let rs = core.iter().map(|x| x.0);
            let cs = core.iter().map(|x| x.1);
            let (r0, r1) = (rs.clone().min().unwrap(), rs.max().unwrap());
            let (c0, c1) = (cs.clone().min().unwrap(), cs.max().unwrap());
            if r + pad >= r0 && r <= r1 + pad && c + pad >= c0 && c <= c1 + pad {
                out.insert(r * g.wp + c);
            }
        }
    }
    out
}

fn dilation_geometry() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..100 {
        let patch = [14u32, 16, 28, 32][rng.gen_range(0..4)];
        let g = PatchGrid::new((patch * rng.gen_range(2..=16), patch * rng.gen_range(2..=16)), patch, 1).unwrap();
        let (w, h) = g.image_size;
        let x0 = rng.gen_range(0..w - 1);
        let y0 = rng.gen_range(0..h - 1);
        let b = BBox::new(x0, y0, rng.gen_range(x0 + 1..=w), rng.gen_range(y0 + 1..=h));
        let mut prev: Option<BTreeSet<usize>> = None;
        for pad in 0..=3 {
            let got = object_token_indices(&b, &g, pad).map_err(|e| e.to_string())?.indices;
            ensure!(got.iter().all(|i| *i < g.n_tokens()), "case {case}: index outside the grid");
            ensure!(got == dilation_ref(&b, &g, pad), "case {case}: pad {pad} differs from the reference for {b:?}");
            if let Some(p) = &prev {
                ensure!(p.is_subset(&got), "case {case}: pad {pad} is not a superset of pad {}", pad - 1);
            }
            prev = Some(got);
        }
    }
    let g = PatchGrid::new((448, 448), 28, 1).unwrap();
    let single = BBox::new(5 * 28 + 4, 7 * 28 + 4, 5 * 28 + 24, 7 * 28 + 24);
    let n = object_token_indices(&single, &g, 1).map_err(|e| e.to_string())?.indices.len();
    ensure!(n == 9, "interior single-patch box at pad 1 gave {n} indices");
    Ok("100 random cases monotone and clipped; interior pad 1 gives 9".into())
}

fn main() {
    let criteria: Vec<(&str, fn() -> Outcome)> = vec![
        ("probe oracles", probe_oracles),
        ("swap soundness", swap_soundness),
        ("disjoint-symbol control", disjoint_control),
        ("CHAIR/POPE exactness", chair_pope_fixtures),
        ("description round trip", description_round_trip),
        ("determinism", determinism),
        ("dilation geometry", dilation_geometry),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.into_iter().enumerate() {
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_else(|| "panicked".into()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {}: PASS  {name} ({detail}; {secs:.1}s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL  {name}: {why}", i + 1);
            }
        }
    }
    println!("criterion 8: IGNORED  real-model trend check (needs a GPU backend)");
    if failed > 0 {
        std::process::exit(1);
    }
}
