//! `glab`: generate scenes, apply scaffolds, run experiments, evaluate
//! outputs and render reports. Prints a JSON summary on success; on failure
//! prints `{"error": {"kind", "message"}}` to stderr and exits nonzero.

use std::collections::BTreeMap;
use std::io::Write;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use glab_core::halleval::{
    chair_scores, pope_evaluate, read_captions, read_qa_records, score_scene_description, CocoAnnotations,
    DescriptionScore, SynonymMap,
};
use glab_core::modelio::{serve_command, MockModel, MockSpec};
use glab_core::runner::{
    render_report, run_experiment_with, BackendKind, ExperimentConfig, ExperimentKind, RunManifest, RunOptions,
    CONFIG_FILE,
};
use glab_core::scaffold::{apply_scaffold, LineConfig, ScaffoldSpec};
use glab_core::scenegen::{encode_png, generate_scene_sized, write_scene_files, RenderConfig};
use glab_core::tokenmap::{parse_structured_output, OutputFormat};
use glab_core::{GlabError, GroundTruth, Variant};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "glab", version, about = "Structured visual cues and VLM internals")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes with ground truth.
    Gen(GenArgs),
    /// Overlay lines, grids or labels on an image.
    Scaffold(ScaffoldArgs),
    /// Run an experiment from a config file.
    Run(RunArgs),
    /// Run the activation-swap experiment.
    Swap(SwapArgs),
    /// Score captions, answers or scene descriptions.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Re-render the figures and tables of a run.
    Report(ReportArgs),
    /// Serve the mock model over the external-backend protocol.
    MockBackend(MockBackendArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    variant: Variant,
    /// Seed range `A..B` (exclusive end) or a single seed.
    #[arg(long, value_parser = parse_seeds)]
    seeds: Range<u64>,
    #[arg(long, default_value_t = 8)]
    objects: usize,
    /// Square image side in pixels.
    #[arg(long, default_value_t = 448)]
    size: u32,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaffoldKind {
    None,
    Rows,
    Grid,
}

#[derive(Args)]
struct ScaffoldArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, value_enum)]
    kind: ScaffoldKind,
    #[arg(long, default_value_t = 3)]
    rows: usize,
    #[arg(long, default_value_t = 3)]
    cols: usize,
    #[arg(long, default_value_t = 0)]
    margin: u32,
    /// Write numbers into grid cells.
    #[arg(long)]
    numbered: bool,
    /// Row labels for `--kind rows`, comma-separated; defaults to A, B, ...
    #[arg(long, value_delimiter = ',')]
    symbols: Vec<String>,
    #[arg(long)]
    out: PathBuf,
    /// Geometry file; defaults to the output path with a .json extension.
    #[arg(long)]
    meta: Option<PathBuf>,
}

#[derive(Args)]
struct Overrides {
    /// Override a config value, e.g. `--set dataset.n_samples=20`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Parent directory for run directories.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Start a new run directory even if one exists for this config.
    #[arg(long)]
    no_resume: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    External,
}

#[derive(Args)]
struct SwapArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    pad: Option<usize>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Program for the external backend.
    #[arg(long)]
    program: Option<PathBuf>,
    /// Control with symbols absent from the source scene.
    #[arg(long)]
    disjoint: bool,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Subcommand)]
enum EvalCommand {
    /// Caption hallucination rates against instance annotations.
    Chair {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        ann: PathBuf,
        #[arg(long)]
        synonyms: Option<PathBuf>,
    },
    /// Yes/no probing metrics per subset.
    Pope {
        #[arg(long)]
        qa: PathBuf,
    },
    /// Scene-description scores: `{stem}.txt` predictions against `{stem}.json` ground truth.
    Describe {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        /// `rows` for row-keyed output, `flat` for a single comma-separated line.
        #[arg(long, default_value = "rows")]
        format: String,
    },
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
    /// Defaults to the kind recorded in the run.
    #[arg(long)]
    kind: Option<ExperimentKind>,
}

#[derive(Args)]
struct MockBackendArgs {
    /// JSON file with mock parameters.
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Protocol command and its flags.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    args: Vec<String>,
}

fn parse_seeds(s: &str) -> std::result::Result<Range<u64>, String> {
    let num = |t: &str| t.trim().parse::<u64>().map_err(|e| format!("bad seed `{t}`: {e}"));
    match s.split_once("..") {
        Some((a, b)) => {
            let (a, b) = (num(a)?, num(b)?);
            if b <= a {
                return Err(format!("empty seed range {s}"));
            }
            Ok(a..b)
        }
        None => {
            let a = num(s)?;
            Ok(a..a + 1)
        }
    }
}

fn gen(a: GenArgs) -> Result<Value> {
    let mut files = Vec::new();
    for seed in a.seeds {
        let scene = generate_scene_sized(seed, a.variant, a.objects, (a.size, a.size))?;
        let (png, gt) = write_scene_files(&a.out, &scene, &RenderConfig::default())?;
        files.push(json!({ "seed": seed, "image": png, "ground_truth": gt }));
    }
    Ok(json!({ "scenes": files }))
}

fn scaffold(a: ScaffoldArgs) -> Result<Value> {
    let img = image::open(&a.input).with_context(|| format!("cannot read image {}", a.input.display()))?.to_rgb8();
    let spec = match a.kind {
        ScaffoldKind::None => ScaffoldSpec::None,
        ScaffoldKind::Rows => {
            let symbols = if a.symbols.is_empty() {
                (0..a.rows).map(|i| char::from(b'A' + (i % 26) as u8).to_string()).collect()
            } else {
                a.symbols
            };
            ScaffoldSpec::Rows { symbols }
        }
        ScaffoldKind::Grid => ScaffoldSpec::Grid { rows: a.rows, cols: a.cols, margin_px: a.margin, numbered: a.numbered },
    };
    let (out, meta) = apply_scaffold(&img, &spec, &LineConfig::default())?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(&a.out, encode_png(&out)?)?;
    let meta_path = a.meta.unwrap_or_else(|| a.out.with_extension("json"));
    std::fs::write(&meta_path, serde_json::to_string_pretty(&meta)?)?;
    Ok(json!({ "image": a.out, "meta": meta_path }))
}

fn apply_overrides(cfg: &mut ExperimentConfig, o: &Overrides) -> Result<RunOptions> {
    for s in &o.set {
        cfg.apply_override(s)?;
    }
    if let Some(dir) = &o.output_dir {
        cfg.output_dir = dir.clone();
    }
    Ok(RunOptions { resume: !o.no_resume, backend: None })
}

fn execute(cfg: &ExperimentConfig, opts: RunOptions) -> Result<Value> {
    let out = run_experiment_with(cfg, opts)?;
    let m = &out.manifest;
    Ok(json!({
        "run_dir": out.run_dir,
        "kind": m.kind,
        "config_hash": m.config_hash,
        "manifest_hash": m.manifest_hash,
        "artifacts": m.artifacts.len(),
        "reused_samples": m.timings.reused_samples,
        "failures": m.failures,
    }))
}

fn run(a: RunArgs) -> Result<Value> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    let opts = apply_overrides(&mut cfg, &a.overrides)?;
    execute(&cfg, opts)
}

fn swap(a: SwapArgs) -> Result<Value> {
    let kind = if a.disjoint { ExperimentKind::DisjointSwap } else { ExperimentKind::Swap };
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(kind),
    };
    if cfg.kind != kind {
        bail!(GlabError::Config(format!("config kind is {}, expected {kind}", cfg.kind)));
    }
    if let Some(v) = a.variant {
        cfg.dataset.variant = v;
    }
    if let Some(n) = a.pairs {
        cfg.swap.pairs = n;
    }
    if let Some(p) = a.pad {
        cfg.swap.pad = p;
    }
    match a.backend {
        Some(BackendArg::Mock) => cfg.backend.kind = BackendKind::Mock,
        Some(BackendArg::External) => cfg.backend.kind = BackendKind::External,
        None => {}
    }
    if a.program.is_some() {
        cfg.backend.program = a.program;
    }
    let opts = apply_overrides(&mut cfg, &a.overrides)?;
    let mut out = execute(&cfg, opts)?;
    let dir = PathBuf::from(out["run_dir"].as_str().unwrap_or_default());
    let summary_file = if a.disjoint { "probes/disjoint_summary.json" } else { "probes/swap_summary.json" };
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(dir.join(summary_file))?)?;
    if a.disjoint {
        out["accuracy"] = summary["report"]["accuracy"].clone();
        out["none_rate"] = summary["report"]["none_rate"].clone();
    } else {
        out["transferred_label_accuracy"] = summary["transferred_label"]["accuracy"].clone();
        out["host_label_accuracy"] = summary["host_label"]["accuracy"].clone();
        out["table"] = json!(dir.join("data/swap_table.csv"));
    }
    Ok(out)
}

fn describe(pred: &Path, gt_dir: &Path, format: &str) -> Result<Value> {
    let format = match format {
        "rows" => OutputFormat::Rows,
        "flat" => OutputFormat::Flat,
        other => bail!(GlabError::Config(format!("unknown description format `{other}` (rows or flat)"))),
    };
    let mut stems: Vec<String> = std::fs::read_dir(pred)
        .with_context(|| format!("cannot list {}", pred.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "txt"))
        .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
        .collect();
    stems.sort();
    if stems.is_empty() {
        bail!(GlabError::MissingArtifact(format!("no .txt predictions in {}", pred.display())));
    }
    let mut scenes = Vec::new();
    for stem in &stems {
        let gt_path = gt_dir.join(format!("{stem}.json"));
        let gt_text = std::fs::read_to_string(&gt_path)
            .map_err(|_| GlabError::MissingArtifact(gt_path.display().to_string()))?;
        let gt = GroundTruth::from_json(&gt_text)?;
        let text = std::fs::read_to_string(pred.join(format!("{stem}.txt")))?;
        let score = score_scene_description(&parse_structured_output(&text, format), &gt, format);
        scenes.push((stem.clone(), score));
    }
    let pooled = DescriptionScore::pooled(scenes.iter().map(|(_, s)| s));
    let per_scene: BTreeMap<String, DescriptionScore> = scenes.into_iter().collect();
    Ok(json!({ "pooled": pooled, "scenes": per_scene }))
}

fn eval(cmd: EvalCommand) -> Result<Value> {
    match cmd {
        EvalCommand::Chair { captions, ann, synonyms } => {
            let captions = read_captions(&captions)?;
            let ann = CocoAnnotations::load(&ann)?;
            let syn = match synonyms {
                Some(p) => SynonymMap::load(&p)?,
                None => SynonymMap::default(),
            };
            Ok(serde_json::to_value(chair_scores(&captions, &ann, &syn))?)
        }
        EvalCommand::Pope { qa } => Ok(json!({ "results": pope_evaluate(&read_qa_records(&qa)?) })),
        EvalCommand::Describe { pred, gt, format } => describe(&pred, &gt, &format),
    }
}

fn report(a: ReportArgs) -> Result<Value> {
    if !a.run.is_dir() {
        bail!(GlabError::MissingArtifact(format!("run directory {}", a.run.display())));
    }
    let kind = match a.kind {
        Some(k) => k,
        None => match RunManifest::load(&a.run) {
            Ok(m) => m.kind.parse()?,
            Err(_) => ExperimentConfig::load(&a.run.join(CONFIG_FILE))?.kind,
        },
    };
    let files = render_report(&a.run, kind)?;
    Ok(json!({ "kind": kind.as_str(), "files": files }))
}

fn mock_backend(a: MockBackendArgs) -> Result<()> {
    let spec: MockSpec = match &a.spec {
        Some(p) => serde_json::from_str(&std::fs::read_to_string(p)?)?,
        None => MockSpec::default(),
    };
    let mut model = MockModel::new(spec)?;
    let out = serve_command(&mut model, &a.args, &mut std::io::stdin())?;
    use std::io::Write;
    std::io::stdout().write_all(&out)?;
    Ok(())
}

fn error_summary(err: &anyhow::Error) -> Value {
    let kind = err.chain().find_map(|e| e.downcast_ref::<GlabError>()).map_or("error", |g| g.kind());
    let message = err.chain().map(|e| e.to_string()).collect::<Vec<_>>().join(": ");
    json!({ "error": { "kind": kind, "message": message } })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => gen(a),
        Command::Scaffold(a) => scaffold(a),
        Command::Run(a) => run(a),
        Command::Swap(a) => swap(a),
        Command::Eval(c) => eval(c),
        Command::Report(a) => report(a),
        Command::MockBackend(a) => return finish(mock_backend(a).map(|_| None)),
    };
    finish(result.map(Some))
}

fn finish(result: Result<Option<Value>>) -> ExitCode {
    match result {
        Ok(Some(v)) => {
            let text = serde_json::to_string_pretty(&v).unwrap_or_else(|_| v.to_string());
            // A closed pipe (e.g. `| head`) is not an error worth reporting.
            let _ = writeln!(std::io::stdout().lock(), "{text}");
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            log::debug!("{e:?}");
            eprintln!("{}", error_summary(&e));
            let config = e.chain().any(|c| matches!(c.downcast_ref::<GlabError>(), Some(GlabError::Config(_))));
            ExitCode::from(if config { 2 } else { 1 })
        }
    }
}
