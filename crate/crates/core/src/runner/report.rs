//! Figures and tables from the probe documents of a finished run. Every PNG
//! gets JSON and CSV siblings holding the plotted numbers.

use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::ExperimentKind;
use super::experiments::*;
use super::manifest::RunDir;
use super::plot::{Heatmap, LinePlot, Series};
use crate::halleval::ChairResult;
use crate::interventions::SwapSummary;
use crate::{GlabError, Result};

fn csv_bytes(headers: &[String], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(headers)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| GlabError::Io(e.into_error()))
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

struct Emitter<'a> {
    run: &'a RunDir,
    written: Vec<PathBuf>,
}

impl Emitter<'_> {
    fn heatmap(&mut self, name: &str, h: &Heatmap) -> Result<()> {
        self.written.push(self.run.write(&format!("reports/{name}.png"), &h.to_png()?)?);
        self.written.push(self.run.write_json(&format!("reports/{name}.json"), h)?);
        let mut headers = vec!["row".to_string()];
        headers.extend(h.col_labels.iter().cloned());
        let rows: Vec<Vec<String>> = h
            .row_labels
            .iter()
            .zip(&h.values)
            .map(|(l, vals)| std::iter::once(l.clone()).chain(vals.iter().map(|v| cell(*v))).collect())
            .collect();
        self.written.push(self.run.write(&format!("reports/{name}.csv"), &csv_bytes(&headers, &rows)?)?);
        Ok(())
    }

    fn lines(&mut self, name: &str, p: &LinePlot) -> Result<()> {
        self.written.push(self.run.write(&format!("reports/{name}.png"), &p.to_png()?)?);
        self.written.push(self.run.write_json(&format!("reports/{name}.json"), p)?);
        let headers = ["series", "x", "y"].map(String::from);
        let rows: Vec<Vec<String>> = p
            .series
            .iter()
            .flat_map(|s| s.x.iter().zip(&s.y).map(|(x, y)| vec![s.name.clone(), x.to_string(), cell(*y)]))
            .collect();
        self.written.push(self.run.write(&format!("reports/{name}.csv"), &csv_bytes(&headers, &rows)?)?);
        Ok(())
    }

    fn table<T: Serialize>(&mut self, name: &str, headers: &[&str], rows: Vec<Vec<String>>, json: &T) -> Result<()> {
        let headers: Vec<String> = headers.iter().map(|h| h.to_string()).collect();
        self.written.push(self.run.write(&format!("reports/{name}.csv"), &csv_bytes(&headers, &rows)?)?);
        self.written.push(self.run.write_json(&format!("reports/{name}.json"), json)?);
        Ok(())
    }
}

fn layer_x(layers: &[usize]) -> Vec<f64> {
    layers.iter().map(|l| *l as f64).collect()
}

/// Renders the report for `kind` from the probe documents in `run_dir`.
/// Returns the written files. A missing probe document is reported by its
/// run-relative path.
pub fn render_report(run_dir: &Path, kind: ExperimentKind) -> Result<Vec<PathBuf>> {
    let run = RunDir::open(run_dir)?;
    let mut out = Emitter { run: &run, written: Vec::new() };
    match kind {
        ExperimentKind::AttentionMatrix => {
            let p: AttentionMatrixProbe = run.read_json(ATTENTION_MATRIX)?;
            for (name, m) in [("within", &p.within), ("cross", &p.cross)] {
                let h = Heatmap {
                    title: format!("{} attention {}", name, p.variant.id()),
                    row_labels: p.partition_symbols.clone(),
                    col_labels: p.partition_symbols.clone(),
                    values: m.entries.clone(),
                    range: None,
                };
                out.heatmap(&format!("attention_matrix_{name}"), &h)?;
            }
        }
        ExperimentKind::Alignment => {
            let p: AlignmentProbe = run.read_json(ALIGNMENT)?;
            let mut series = Vec::new();
            for c in &p.conditions {
                let x: Vec<f64> = c.curve.points.iter().map(|pt| pt.layer as f64).collect();
                series.push(Series {
                    name: format!("{} objects", c.variant.id()),
                    x: x.clone(),
                    y: c.curve.points.iter().map(|pt| pt.objects).collect(),
                });
                series.push(Series {
                    name: format!("{} symbols", c.variant.id()),
                    x,
                    y: c.curve.points.iter().map(|pt| pt.symbols).collect(),
                });
            }
            let plot = LinePlot {
                title: "text-visual alignment".into(),
                x_label: "layer".into(),
                y_label: "cosine".into(),
                series,
                y_range: None,
            };
            out.lines("alignment", &plot)?;
        }
        ExperimentKind::Icg => {
            let p: IcgProbe = run.read_json(ICG)?;
            let series = p
                .conditions
                .iter()
                .map(|c| Series { name: c.variant.id().to_string(), x: layer_x(&p.layers), y: c.mean.clone() })
                .collect();
            let plot = LinePlot {
                title: "clustering gap".into(),
                x_label: "layer".into(),
                y_label: "icg".into(),
                series,
                y_range: None,
            };
            out.lines("icg", &plot)?;
        }
        ExperimentKind::LogitLens => {
            let p: LogitLensProbe = run.read_json(LOGIT_LENS)?;
            let h = Heatmap {
                title: format!("own symbol probability L{}", p.layer),
                row_labels: (0..p.hp).map(|r| r.to_string()).collect(),
                col_labels: (0..p.wp).map(|c| c.to_string()).collect(),
                values: (0..p.hp)
                    .map(|r| (0..p.wp).map(|c| Some(p.mean_own_symbol_prob[r * p.wp + c])).collect())
                    .collect(),
                range: Some((0.0, 1.0)),
            };
            out.heatmap("logit_lens", &h)?;
        }
        ExperimentKind::DecayCurve => {
            let p: DecayProbe = run.read_json(DECAY_CURVE)?;
            let series = p
                .conditions
                .iter()
                .map(|c| Series {
                    name: c.variant.id().to_string(),
                    x: c.curve.starts.iter().map(|s| *s as f64).collect(),
                    y: c.curve.values.iter().map(|v| Some(*v)).collect(),
                })
                .collect();
            let plot = LinePlot {
                title: "attention to image over generation".into(),
                x_label: "window start".into(),
                y_label: "visual attention".into(),
                series,
                y_range: None,
            };
            out.lines("decay_curve", &plot)?;
        }
        ExperimentKind::HeadSnr => {
            let p: HeadSnrProbe = run.read_json(HEAD_SNR)?;
            let s = &p.scores;
            let h = Heatmap {
                title: format!("head snr {}", p.variant.id()),
                row_labels: s.layers.iter().map(|l| format!("L{l}")).collect(),
                col_labels: (0..s.heads).map(|h| format!("H{h}")).collect(),
                values: (0..s.layers.len()).map(|r| (0..s.heads).map(|c| Some(s.get(r, c))).collect()).collect(),
                range: None,
            };
            out.heatmap("head_snr", &h)?;
        }
        ExperimentKind::Diffvec => {
            let p: DiffVecProbe = run.read_json(DIFFVEC)?;
            let labels: Vec<String> =
                p.matrix.pairs.iter().map(|(i, j)| format!("{}-{}", p.symbols[*i], p.symbols[*j])).collect();
            let n = labels.len();
            let h = Heatmap {
                title: format!("difference vectors L{}", p.layer),
                row_labels: labels.clone(),
                col_labels: labels,
                values: (0..n).map(|a| (0..n).map(|b| p.matrix.get(a, b)).collect()).collect(),
                range: Some((-1.0, 1.0)),
            };
            out.heatmap("diffvec", &h)?;
        }
        ExperimentKind::Traversal => {
            let p: TraversalProbe = run.read_json(TRAVERSAL)?;
            let t = &p.heatmap;
            let h = Heatmap {
                title: format!("row attention by step {}", p.variant.id()),
                row_labels: p.row_symbols.clone(),
                col_labels: (0..t.steps).map(|s| s.to_string()).collect(),
                values: (0..t.rows).map(|r| t.values[r * t.steps..(r + 1) * t.steps].to_vec()).collect(),
                range: None,
            };
            out.heatmap("traversal", &h)?;
        }
        ExperimentKind::Swap => {
            let s: SwapSummary = run.read_json(SWAP_SUMMARY)?;
            let mut rows = Vec::new();
            for score in [&s.transferred_label, &s.host_label] {
                rows.push(vec![
                    serde_json::to_value(score.convention)?.as_str().unwrap_or_default().to_string(),
                    score.n.to_string(),
                    score.correct.to_string(),
                    cell(score.accuracy),
                    cell(score.shape_accuracy),
                    cell(score.color_accuracy),
                    cell(score.joint_accuracy),
                ]);
            }
            rows.push(vec![
                "sanity".into(),
                s.sanity_n.to_string(),
                String::new(),
                cell(s.sanity_accuracy),
                String::new(),
                String::new(),
                String::new(),
            ]);
            out.table(
                "swap_summary",
                &["convention", "n", "correct", "accuracy", "shape_accuracy", "color_accuracy", "joint_accuracy"],
                rows,
                &s,
            )?;
            let lp: Vec<Vec<String>> = s
                .logprob_table
                .iter()
                .flat_map(|(row, cols)| cols.iter().map(move |(col, v)| vec![row.clone(), col.clone(), v.to_string()]))
                .collect();
            out.table("swap_logprobs", &["row", "column", "mean_logprob"], lp, &s.logprob_table)?;
            if run.path(SWAP_SWEEP).is_file() {
                let sw: SwapSweepProbe = run.read_json(SWAP_SWEEP)?;
                let x: Vec<f64> = sw.points.iter().map(|p| p.start as f64).collect();
                let plot = LinePlot {
                    title: format!("swap accuracy by layer window {}", sw.window),
                    x_label: "first layer".into(),
                    y_label: "accuracy".into(),
                    series: vec![
                        Series {
                            name: "transferred".into(),
                            x: x.clone(),
                            y: sw.points.iter().map(|p| p.transferred_accuracy).collect(),
                        },
                        Series { name: "host".into(), x, y: sw.points.iter().map(|p| p.host_accuracy).collect() },
                    ],
                    y_range: Some((0.0, 1.0)),
                };
                out.lines("swap_sweep", &plot)?;
            }
        }
        ExperimentKind::DisjointSwap => {
            let p: DisjointProbe = run.read_json(DISJOINT_SUMMARY)?;
            let r = &p.report;
            let rows = vec![vec![
                r.n_pairs.to_string(),
                r.n_queries.to_string(),
                r.subset_size.to_string(),
                cell(r.accuracy),
                cell(r.none_rate),
                cell(r.sanity_accuracy),
                p.skipped.len().to_string(),
            ]];
            out.table(
                "disjoint_summary",
                &["pairs", "queries", "subset", "accuracy", "none_rate", "sanity_accuracy", "skipped_pairs"],
                rows,
                &p,
            )?;
        }
        ExperimentKind::DescribeEval => {
            let p: DescribeEvalProbe = run.read_json(DESCRIBE_EVAL)?;
            let rows = p
                .conditions
                .iter()
                .map(|c| {
                    let s = &c.pooled;
                    vec![
                        c.variant.id().to_string(),
                        c.scenes.len().to_string(),
                        s.tp.to_string(),
                        s.fp.to_string(),
                        s.fn_.to_string(),
                        s.precision.to_string(),
                        s.recall.to_string(),
                        s.f1.to_string(),
                        s.accuracy.to_string(),
                    ]
                })
                .collect();
            out.table(
                "describe_eval",
                &["variant", "scenes", "tp", "fp", "fn", "precision", "recall", "f1", "accuracy"],
                rows,
                &p,
            )?;
        }
        ExperimentKind::Chair => {
            let c: ChairResult = run.read_json(CHAIR)?;
            let rows = vec![vec![
                c.captions.to_string(),
                c.skipped.to_string(),
                c.mentioned.to_string(),
                c.hallucinated.to_string(),
                c.chair_i.to_string(),
                c.chair_s.to_string(),
                c.chair_s_sentence.to_string(),
            ]];
            let headers = ["captions", "skipped", "mentioned", "hallucinated", "chair_i", "chair_s", "chair_s_sentence"];
            out.table("chair", &headers, rows, &c)?;
        }
        ExperimentKind::Pope => {
            let p: PopeProbe = run.read_json(POPE)?;
            let rows = p
                .results
                .iter()
                .map(|r| {
                    vec![
                        r.subset.to_string(),
                        r.tp.to_string(),
                        r.fp.to_string(),
                        r.tn.to_string(),
                        r.fn_.to_string(),
                        r.accuracy.to_string(),
                        r.precision.to_string(),
                        r.recall.to_string(),
                        r.f1.to_string(),
                        r.yes_rate.to_string(),
                        r.unparsed.to_string(),
                    ]
                })
                .collect();
            let headers =
                ["subset", "tp", "fp", "tn", "fn", "accuracy", "precision", "recall", "f1", "yes_rate", "unparsed"];
            out.table("pope", &headers, rows, &p)?;
        }
    }
    Ok(out.written)
}
