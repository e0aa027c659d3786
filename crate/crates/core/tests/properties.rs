use std::collections::{BTreeMap, BTreeSet};

use glab_core::halleval::{
    chair_scores, multiset_counts, pope_evaluate, Caption, CocoAnnotations, DescriptionScore, PopeSubset, QaRecord,
    SynonymMap,
};
use glab_core::interventions::{
    execute_swap, mirror_pair, plan_swap, score_swap_results, swap_queries, Convention, QueryArm, SwapCase, SwapMode,
};
use glab_core::modelio::{Backend, CaptureSpec, DecodeConfig, MockModel, MockSpec, TokenSelection};
use glab_core::scaffold::{apply_grid_scaffold, LineConfig};
use glab_core::scenegen::{
    generate_causal_pair, generate_scene, render_scene, symmetric_mismatch, BBox, Color, ObjectLabel, RenderConfig, Shape,
    Variant,
};
use glab_core::tokenmap::{object_token_indices, parse_structured_output, OutputFormat, ParsedDescription, ParsedRow, PatchGrid};
use proptest::prelude::*;

fn label() -> impl Strategy<Value = ObjectLabel> {
    (0..Color::PALETTE9.len(), 0..Shape::ALL.len()).prop_map(|(c, s)| ObjectLabel::new(Some(Color::PALETTE9[c]), Shape::ALL[s]))
}

fn description_variant() -> impl Strategy<Value = Variant> {
    (0..Variant::DESCRIPTION.len()).prop_map(|i| Variant::DESCRIPTION[i])
}

fn mock() -> MockModel {
    MockModel::new(MockSpec::default()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scenes_are_deterministic_and_contained(seed in 0u64..10_000, variant in description_variant(), n in 1usize..=15) {
        let a = generate_scene(seed, variant, n).unwrap();
        let (pa, ga) = render_scene(&a, &RenderConfig::default()).unwrap();
        let (pb, gb) = render_scene(&generate_scene(seed, variant, n).unwrap(), &RenderConfig::default()).unwrap();
        prop_assert_eq!(pa, pb);
        prop_assert_eq!(ga.to_json().unwrap(), gb.to_json().unwrap());
        let labels: BTreeSet<ObjectLabel> = ga.objects.iter().map(|o| o.label()).collect();
        prop_assert_eq!(labels.len(), ga.objects.len());
        for o in &ga.objects {
            prop_assert!(ga.partitions[o.partition_index].bbox.contains(&o.bbox));
        }
        let grid = matches!(ga.layout, glab_core::scenegen::LayoutKind::Grid { .. });
        for g in &ga.symbols {
            let inside = ga.partitions[g.partition_index].bbox.contains(&g.bbox);
            prop_assert!(inside || grid);
        }
    }

    #[test]
    fn causal_pairs_satisfy_symmetric_mismatch(seed in 0u64..100_000, disjoint in any::<bool>()) {
        let v = if disjoint { Variant::CausalRows4Disjoint } else { Variant::CausalRows4 };
        let p = generate_causal_pair(seed, v, 2).unwrap();
        prop_assert!(symmetric_mismatch(&p.host, &p.source, &p.targets, &p.correspondence));
        prop_assert_eq!(p.is_disjoint(), disjoint);
    }

    #[test]
    fn grid_cells_partition_every_pixel(w in 60u32..200, h in 60u32..200, rows in 1usize..6, cols in 1usize..6, margin in 0u32..4) {
        let img = image::RgbImage::new(w, h);
        let (_, meta) = apply_grid_scaffold(&img, rows, cols, margin, None, &LineConfig::default()).unwrap();
        let (_, again) = apply_grid_scaffold(&img, rows, cols, margin, None, &LineConfig::default()).unwrap();
        prop_assert_eq!(&meta, &again);
        let mut seen = vec![0usize; meta.cell_count()];
        for y in 0..h {
            for x in 0..w {
                let c = meta.cell_of_pixel(x, y);
                prop_assert!(c.is_some());
                seen[c.unwrap()] += 1;
            }
        }
        prop_assert_eq!(seen.iter().sum::<usize>(), (w * h) as usize);
    }

    #[test]
    fn patch_index_is_a_bijection(hp in 1u32..20, wp in 1u32..20, patch in 1u32..40, offset in 0usize..10) {
        let g = PatchGrid::new((wp * patch, hp * patch), patch, offset).unwrap();
        prop_assert_eq!(g.n_tokens(), (hp * wp) as usize);
        for i in 0..g.n_tokens() {
            let (r, c) = g.rc(i);
            prop_assert_eq!(g.flat(r, c), i);
        }
    }

    #[test]
    fn dilation_is_monotone_and_clipped(
        hp in 2u32..16, wp in 2u32..16, fx in 0.0f64..1.0, fy in 0.0f64..1.0, fw in 0.0f64..1.0, fh in 0.0f64..1.0, a in 0usize..4, b in 0usize..4,
    ) {
        let g = PatchGrid::new((wp * 28, hp * 28), 28, 0).unwrap();
        let (w, h) = g.image_size;
        let x0 = ((w - 1) as f64 * fx) as u32;
        let y0 = ((h - 1) as f64 * fy) as u32;
        let x1 = x0 + 1 + ((w - x0 - 1) as f64 * fw) as u32;
        let y1 = y0 + 1 + ((h - y0 - 1) as f64 * fh) as u32;
        let bbox = BBox::new(x0, y0, x1, y1);
        let (lo, hi) = (a.min(b), a.max(b));
        let small = object_token_indices(&bbox, &g, lo).unwrap().indices;
        let big = object_token_indices(&bbox, &g, hi).unwrap().indices;
        prop_assert!(!small.is_empty());
        prop_assert!(small.is_subset(&big));
        prop_assert!(big.iter().all(|i| *i < g.n_tokens()));
    }

    #[test]
    fn parsed_descriptions_round_trip(rows in prop::collection::vec(prop::collection::vec(label(), 0..5), 1..6), flat in prop::collection::vec(label(), 1..8)) {
        let parsed = ParsedDescription {
            format: OutputFormat::Rows,
            rows: rows.iter().enumerate().map(|(i, l)| ParsedRow { prefix: "Row".into(), key: (i + 1).to_string(), labels: l.clone() }).collect(),
            flat: Vec::new(),
            invalid: Vec::new(),
            raw: String::new(),
            diagnostics: Vec::new(),
        };
        prop_assert!(parse_structured_output(&parsed.to_text(), OutputFormat::Rows).same_content(&parsed));
        let f = ParsedDescription { format: OutputFormat::Flat, rows: Vec::new(), flat, ..parsed };
        prop_assert!(parse_structured_output(&f.to_text(), OutputFormat::Flat).same_content(&f));
    }

    #[test]
    fn description_scores_obey_identities_and_symmetry(pred in prop::collection::vec(label(), 0..12), gt in prop::collection::vec(label(), 0..12)) {
        let (tp, fp, fn_) = multiset_counts(&pred, &gt);
        prop_assert_eq!(tp + fp, pred.len());
        prop_assert_eq!(tp + fn_, gt.len());
        let s = DescriptionScore::from_counts(tp, fp, fn_);
        let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
        prop_assert_eq!(s.precision, ratio(tp, tp + fp));
        prop_assert_eq!(s.recall, ratio(tp, tp + fn_));
        prop_assert_eq!(s.accuracy, ratio(tp, tp + fp + fn_));
        let f1 = if s.precision + s.recall == 0.0 { 0.0 } else { 2.0 * s.precision * s.recall / (s.precision + s.recall) };
        prop_assert_eq!(s.f1, f1);
        let (tp2, fp2, fn2) = multiset_counts(&gt, &pred);
        prop_assert_eq!((tp2, fp2, fn2), (tp, fn_, fp));
        prop_assert_eq!(DescriptionScore::from_counts(tp2, fp2, fn2).accuracy, s.accuracy);
    }

    #[test]
    fn pope_metrics_obey_identities(qa in prop::collection::vec((any::<bool>(), 0usize..4), 1..40)) {
        let answers = ["yes", "No.", "maybe", ""];
        let recs: Vec<QaRecord> = qa
            .iter()
            .enumerate()
            .map(|(i, (label, a))| QaRecord { image_id: i as u64, object: "cat".into(), subset: PopeSubset::Popular, label: *label, answer: answers[*a].into() })
            .collect();
        let r = &pope_evaluate(&recs)[0];
        let n = r.tp + r.fp + r.tn + r.fn_;
        prop_assert_eq!(n, recs.len());
        prop_assert_eq!(r.tp + r.fn_, qa.iter().filter(|(l, _)| *l).count());
        prop_assert_eq!(r.tp + r.fp, qa.iter().filter(|(_, a)| *a == 0).count());
        prop_assert_eq!(r.unparsed, qa.iter().filter(|(_, a)| *a >= 2).count());
        prop_assert_eq!(r.accuracy, (r.tp + r.tn) as f64 / n as f64);
        prop_assert_eq!(r.yes_rate, (r.tp + r.fp) as f64 / n as f64);
        let p = if r.tp + r.fp == 0 { 0.0 } else { r.tp as f64 / (r.tp + r.fp) as f64 };
        let rc = if r.tp + r.fn_ == 0 { 0.0 } else { r.tp as f64 / (r.tp + r.fn_) as f64 };
        prop_assert_eq!(r.precision, p);
        prop_assert_eq!(r.recall, rc);
        prop_assert_eq!(r.f1, if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) });
    }

    #[test]
    fn chair_is_monotone_in_mentions(present in prop::collection::btree_set(0usize..8, 1..5), mention in prop::collection::vec(0usize..8, 1..6), extra in 0usize..8) {
        let cats = ["dog", "cat", "car", "bus", "horse", "cow", "pizza", "laptop"];
        let truth: BTreeSet<String> = present.iter().map(|i| cats[*i].to_string()).collect();
        let ann = CocoAnnotations::from_sets(Vec::new(), BTreeMap::from([(1, truth.clone())]));
        let syn = SynonymMap::default();
        let text = |ids: &[usize]| ids.iter().map(|i| format!("A {}.", cats[*i])).collect::<Vec<_>>().join(" ");
        let score = |ids: &[usize]| chair_scores(&[Caption { image_id: 1, text: text(ids) }], &ann, &syn);
        let base = score(&mention);
        prop_assert!((0.0..=1.0).contains(&base.chair_i) && (0.0..=1.0).contains(&base.chair_s));
        let mut more = mention.clone();
        more.push(extra);
        let after = score(&more);
        if truth.contains(cats[extra]) {
            prop_assert!(after.chair_i <= base.chair_i);
        } else {
            prop_assert!(after.chair_i >= base.chair_i);
        }
        let grounded: Vec<usize> = present.iter().copied().collect();
        let clean = score(&grounded);
        prop_assert_eq!((clean.chair_i, clean.chair_s), (0.0, 0.0));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn swap_results_are_deterministic_and_conventions_exclusive(seed in 0u64..500) {
        let mut m = mock();
        let grid = m.patch_grid();
        let case = SwapCase::render(generate_causal_pair(seed, Variant::CausalRows4, 2).unwrap(), &RenderConfig::default()).unwrap();
        let Ok(plan) = case.plan(&grid, 1, SwapMode::Crosswise) else { return Ok(()) };
        let q = swap_queries(&case.pair, &plan).unwrap();
        let a = execute_swap(&mut m, &case, &plan, &q).unwrap();
        let b = execute_swap(&mut m, &case, &plan, &q).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let t = score_swap_results(std::slice::from_ref(&a), Convention::TransferredLabel);
        let h = score_swap_results(std::slice::from_ref(&a), Convention::HostLabel);
        for (x, y) in t.rows.iter().zip(&h.rows) {
            prop_assert!(!(x.correct && y.correct));
        }
        prop_assert!(t.accuracy.unwrap() + h.accuracy.unwrap() <= 1.0);
        prop_assert!(a.records.iter().all(|r| r.pair_seed == plan.pair_seed));
        prop_assert!(a.records.iter().any(|r| r.arm == QueryArm::Target));
    }

    #[test]
    fn mirrored_pairs_exchange_plan_sets(seed in 0u64..500, pad in 0usize..3) {
        let grid = mock().patch_grid();
        let case = SwapCase::render(generate_causal_pair(seed, Variant::CausalRows4, 2).unwrap(), &RenderConfig::default()).unwrap();
        let Ok(plan) = case.plan(&grid, pad, SwapMode::Crosswise) else { return Ok(()) };
        let back = plan_swap(&mirror_pair(&case.pair), &case.source.gt, &case.host.gt, &grid, pad, SwapMode::Crosswise).unwrap();
        let fwd: BTreeSet<_> = plan.host_sets().into_iter().zip(plan.source_sets()).collect();
        let rev: BTreeSet<_> = back.source_sets().into_iter().zip(back.host_sets()).collect();
        prop_assert_eq!(fwd, rev);
    }

    #[test]
    fn patching_leaves_other_positions_untouched(seed in 0u64..500) {
        let mut m = mock();
        let grid = m.patch_grid();
        let case = SwapCase::render(generate_causal_pair(seed, Variant::CausalRows4, 2).unwrap(), &RenderConfig::default()).unwrap();
        let Ok(plan) = case.plan(&grid, 1, SwapMode::Crosswise) else { return Ok(()) };
        let prompt = &swap_queries(&case.pair, &plan).unwrap()[0].prompt;
        let cap = CaptureSpec::default().hidden(TokenSelection::Visual).attention(TokenSelection::Response);
        let decode = DecodeConfig::default();
        let host = m.run_generate(&case.host.input(prompt), &cap, &decode).unwrap();
        let source = m.run_generate(&case.source.input(prompt), &CaptureSpec::default().hidden(TokenSelection::All), &decode).unwrap();
        let pp = plan.to_patch_plan(&grid);
        let patched_pos: BTreeSet<usize> = pp.entries.iter().flat_map(|e| e.host_positions.iter().copied()).collect();
        let sources = BTreeMap::from([("source".to_string(), source)]);
        let patched = m.run_with_patch(&case.host.input(prompt), &pp, &sources, &cap, &decode).unwrap();
        patched.check_attention_normalized(1e-3).unwrap();
        for (h0, h1) in host.hidden.iter().zip(&patched.hidden) {
            for (slot, p) in h0.positions.iter().enumerate() {
                if patched_pos.contains(p) {
                    continue;
                }
                let d = host.d_model;
                prop_assert_eq!(&h0.data[slot * d..(slot + 1) * d], &h1.data[slot * d..(slot + 1) * d]);
            }
        }
        let mut tampered = patched.clone();
        tampered.hidden[0].data[0] += 1.0;
        prop_assert_ne!(tampered.content_hash(), patched.content_hash());
    }
}
