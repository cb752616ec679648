use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Map, Value};

use context_tracker::backbone::{load_cwb, BackboneArch, BackboneWeights};
use context_tracker::eval::{
    attribute_report, load_otb_sequence, precision_curve, score_run, success_curve, Scores,
    SequenceRecord,
};
use context_tracker::gradcheck::{grad_check_suite, GRADCHECK_TOLERANCE};
use context_tracker::loss::{ce_loss, cs_loss, focal_loss, modulating_factor, CsLossParams};
use context_tracker::synth::{generate, preset, write_sequence, PRESETS};
use context_tracker::tracker::{track_sequence, TrackRun, Tracker, TrackerConfig};

const THREADS_VAR: &str = "CONTEXT_TRACKER_THREADS";

#[derive(Parser)]
#[command(name = "context-tracker", version, about = "Online visual tracker")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Track one OTB-format sequence and score it against its ground truth.
    Track(TrackArgs),
    /// Score run files against sequences; runs and sequences pair up in order.
    Eval(EvalArgs),
    /// Render a synthetic preset sequence in OTB layout.
    Synth(SynthArgs),
    /// Print CE, focal and cost-sensitive losses over a grid of p_t.
    LossTable(LossTableArgs),
    /// Run the finite-difference gradient checks.
    GradCheck(GradCheckArgs),
    /// Report the channel-importance pass on a sequence's first frame.
    DaReport(TrackArgs),
}

#[derive(Args)]
struct TrackArgs {
    /// JSON run config: tracker settings plus optional "weights", "sequence" and "out" paths.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sequence directory (img/ plus groundtruth_rect.txt).
    #[arg(long)]
    sequence: Option<PathBuf>,
    /// CWB backbone weights.
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Use a seeded random backbone with 32/64/128 channels instead of weights.
    #[arg(long)]
    toy_backbone: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// JSONL run files.
    #[arg(long = "run", required = true)]
    runs: Vec<PathBuf>,
    /// Sequence directories, one per run.
    #[arg(long = "sequence", required = true)]
    sequences: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SynthArgs {
    /// One of easy_translation, distractor, occlusion, scale_change.
    preset: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LossTableArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid spacing; the grid runs from `step` to `1 - step`.
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    instances: usize,
}

/// A message plus the process exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

type CliResult<T> = Result<T, Failure>;

const CONFIG: u8 = 1;
const DATA: u8 = 2;
const RUNTIME: u8 = 3;

trait Classify<T> {
    fn or_exit(self, code: u8) -> CliResult<T>;
}

impl<T, E: Display> Classify<T> for Result<T, E> {
    fn or_exit(self, code: u8) -> CliResult<T> {
        self.map_err(|e| Failure {
            code,
            msg: e.to_string(),
        })
    }
}

fn fail<T>(code: u8, msg: impl Into<String>) -> CliResult<T> {
    Err(Failure {
        code,
        msg: msg.into(),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| match cli.command {
        Command::Track(a) => cmd_track(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Synth(a) => cmd_synth(a),
        Command::LossTable(a) => cmd_loss_table(a),
        Command::GradCheck(a) => cmd_grad_check(a),
        Command::DaReport(a) => cmd_da_report(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_VAR) else {
        return Ok(());
    };
    let n: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure {
        code: CONFIG,
        msg: format!("{THREADS_VAR} must be a positive integer, got {v:?}"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .or_exit(RUNTIME)
}

/// Tracker settings and paths resolved from the config file and flags.
struct RunSetup {
    cfg: TrackerConfig,
    backbone: Arc<BackboneWeights>,
    sequence: PathBuf,
    out: Option<PathBuf>,
}

const PATH_KEYS: [&str; 3] = ["weights", "sequence", "out"];

/// Splits a run config into its path entries and tracker settings. Settings
/// overlay `base` key by key; unknown keys are rejected.
fn parse_run_config(
    text: &str,
    base: &TrackerConfig,
) -> Result<(TrackerConfig, BTreeMap<String, PathBuf>), String> {
    let doc: Value = serde_json::from_str(text).map_err(|e| format!("malformed JSON: {e}"))?;
    let Value::Object(mut doc) = doc else {
        return Err("config must be a JSON object".into());
    };
    let mut paths = BTreeMap::new();
    for key in PATH_KEYS {
        match doc.remove(key) {
            None | Some(Value::Null) => {}
            Some(Value::String(s)) => {
                paths.insert(key.to_string(), PathBuf::from(s));
            }
            Some(_) => return Err(format!("key \"{key}\" must be a path string")),
        }
    }
    let Value::Object(mut merged) = serde_json::to_value(base).map_err(|e| e.to_string())? else {
        unreachable!("tracker config serializes to an object")
    };
    let known: Vec<String> = merged.keys().cloned().collect();
    for (k, v) in doc {
        if !merged.contains_key(&k) {
            return Err(format!(
                "unknown key \"{k}\"; expected one of {}, {}",
                PATH_KEYS.join(", "),
                known.join(", ")
            ));
        }
        merged.insert(k, v);
    }
    let cfg: TrackerConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| e.to_string())?;
    cfg.validate().map_err(|e| e.to_string())?;
    Ok((cfg, paths))
}

fn setup(a: &TrackArgs) -> CliResult<RunSetup> {
    let base = if a.toy_backbone {
        TrackerConfig::toy()
    } else {
        TrackerConfig::default()
    };
    let (mut cfg, mut paths) = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).or_exit(CONFIG)?;
            parse_run_config(&text, &base).map_err(|msg| Failure {
                code: CONFIG,
                msg: format!("{}: {msg}", p.display()),
            })?
        }
        None => (base, BTreeMap::new()),
    };
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    for (key, flag) in [
        ("weights", &a.weights),
        ("sequence", &a.sequence),
        ("out", &a.out),
    ] {
        if let Some(p) = flag {
            paths.insert(key.into(), p.clone());
        }
    }
    let backbone = if a.toy_backbone {
        BackboneWeights::random(BackboneArch::TOY, cfg.seed)
    } else {
        match paths.get("weights") {
            Some(p) => load_cwb(p).or_exit(DATA)?,
            None => return fail(CONFIG, "no weights given; pass --weights or --toy-backbone"),
        }
    };
    if cfg.mask_k > backbone.arch().out_channels() {
        return fail(
            CONFIG,
            format!(
                "mask_k {} exceeds the backbone's {} channels",
                cfg.mask_k,
                backbone.arch().out_channels()
            ),
        );
    }
    let Some(sequence) = paths.remove("sequence") else {
        return fail(CONFIG, "no sequence given; pass --sequence");
    };
    Ok(RunSetup {
        cfg,
        backbone: Arc::new(backbone),
        sequence,
        out: paths.remove("out"),
    })
}

fn create_out(out: Option<&Path>) -> CliResult<PathBuf> {
    let Some(out) = out else {
        return fail(CONFIG, "no output directory; pass --out");
    };
    fs::create_dir_all(out).or_exit(DATA)?;
    Ok(out.to_path_buf())
}

fn write_file(path: &Path, f: impl FnOnce(&mut dyn Write) -> io::Result<()>) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path).or_exit(DATA)?);
    f(&mut w).and_then(|()| w.flush()).or_exit(DATA)
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, value)?;
        writeln!(w)
    })
}

fn write_curves(out: &Path, prefix: &str, run: &TrackRun, gt: &SequenceRecord) -> CliResult<()> {
    let boxes = run.boxes();
    let p = precision_curve(&boxes, &gt.gt).or_exit(DATA)?;
    let s = success_curve(&boxes, &gt.gt).or_exit(DATA)?;
    for (name, curve) in [("precision", p), ("success", s)] {
        let path = out.join(format!("{prefix}{name}.csv"));
        let mut w = BufWriter::new(File::create(&path).or_exit(DATA)?);
        curve.write_csv(&mut w).or_exit(DATA)?;
        w.flush().or_exit(DATA)?;
    }
    Ok(())
}

fn cmd_track(a: TrackArgs) -> CliResult<()> {
    let s = setup(&a)?;
    let out = create_out(s.out.as_deref())?;
    let record = load_otb_sequence(&s.sequence).or_exit(DATA)?;
    let run =
        track_sequence(record.frame_iter(), record.gt[0], &s.cfg, s.backbone).or_exit(RUNTIME)?;
    let scores = score_run(&run.boxes(), &record.gt).or_exit(DATA)?;
    write_file(&out.join("results.jsonl"), |w| {
        run.write_jsonl(w).map_err(io::Error::other)
    })?;
    write_json(&out.join("scores.json"), &scores)?;
    write_curves(&out, "", &run, &record)?;
    println!(
        "{}: {} frames, DP@20 {:.4}, AUC {:.4}, mean IoU {:.4}",
        record.name, scores.frames, scores.dp20, scores.auc, scores.mean_iou
    );
    Ok(())
}

#[derive(Serialize)]
struct EvalRow {
    name: String,
    sequence: String,
    #[serde(flatten)]
    scores: Scores,
}

/// Row labels: the run file stems, made unique with a numeric suffix.
fn run_labels(runs: &[PathBuf]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    runs.iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "run".into());
            let n = seen.entry(stem.clone()).or_default();
            *n += 1;
            if *n == 1 {
                stem
            } else {
                format!("{stem}_{n}")
            }
        })
        .collect()
}

fn cmd_eval(a: EvalArgs) -> CliResult<()> {
    if a.runs.len() != a.sequences.len() {
        return fail(
            CONFIG,
            format!(
                "{} run files but {} sequences",
                a.runs.len(),
                a.sequences.len()
            ),
        );
    }
    fs::create_dir_all(&a.out).or_exit(DATA)?;
    let labels = run_labels(&a.runs);
    let loaded: Vec<(String, SequenceRecord, TrackRun, Scores)> = a
        .runs
        .par_iter()
        .zip(&a.sequences)
        .zip(&labels)
        .map(|((run_path, seq), label)| {
            let record = load_otb_sequence(seq).or_exit(DATA)?;
            let file = File::open(run_path).or_exit(DATA)?;
            let run = TrackRun::read_jsonl(BufReader::new(file))
                .map_err(|e| format!("{}: {e}", run_path.display()))
                .or_exit(DATA)?;
            let scores = score_run(&run.boxes(), &record.gt)
                .map_err(|e| format!("{} vs {}: {e}", run_path.display(), seq.display()))
                .or_exit(DATA)?;
            Ok((label.clone(), record, run, scores))
        })
        .collect::<CliResult<_>>()?;

    let mut by_label = BTreeMap::new();
    let mut records = Vec::new();
    let mut rows = Vec::new();
    for (label, record, run, scores) in &loaded {
        write_curves(&a.out, &format!("{label}_"), run, record)?;
        by_label.insert(label.clone(), scores.clone());
        records.push(SequenceRecord {
            name: label.clone(),
            ..record.clone()
        });
        rows.push(EvalRow {
            name: label.clone(),
            sequence: record.name.clone(),
            scores: scores.clone(),
        });
    }
    rows.sort_by(|x, y| y.scores.auc.total_cmp(&x.scores.auc));
    let n = rows.len() as f64;
    let overall = json!({
        "dp20": rows.iter().map(|r| r.scores.dp20).sum::<f64>() / n,
        "auc": rows.iter().map(|r| r.scores.auc).sum::<f64>() / n,
    });
    let attributes: Map<String, Value> = attribute_report(&by_label, &records)
        .or_exit(DATA)?
        .into_iter()
        .map(|(attr, row)| (attr.code().to_string(), json!(row)))
        .collect();
    for r in &rows {
        println!(
            "{:<24} DP@20 {:.4}  AUC {:.4}",
            r.name, r.scores.dp20, r.scores.auc
        );
    }
    write_json(
        &a.out.join("report.json"),
        &json!({ "runs": rows, "overall": overall, "attributes": attributes }),
    )
}

fn cmd_synth(a: SynthArgs) -> CliResult<()> {
    let spec = preset(&a.preset)
        .map_err(|_| {
            format!(
                "unknown preset {:?}; known: {}",
                a.preset,
                PRESETS.join(", ")
            )
        })
        .or_exit(CONFIG)?
        .reseeded(a.seed);
    let seq = generate(&spec).or_exit(RUNTIME)?;
    write_sequence(&seq, &a.out).or_exit(DATA)?;
    println!("wrote {} frames to {}", seq.frames.len(), a.out.display());
    Ok(())
}

fn cmd_loss_table(a: LossTableArgs) -> CliResult<()> {
    let params = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).or_exit(CONFIG)?;
            let params: CsLossParams = serde_json::from_str(&text)
                .map_err(|e| format!("{}: {e}", p.display()))
                .or_exit(CONFIG)?;
            params.validate().or_exit(CONFIG)?;
            params
        }
        None => CsLossParams::default(),
    };
    if !(a.step > 0.0 && a.step <= 0.5) {
        return fail(CONFIG, "--step must lie in (0, 0.5]");
    }
    let n = (1.0 / a.step).round() as usize;
    let mut text = String::from("p_t,ce,focal,cs,cs_over_ce\n");
    for i in 1..n {
        let pt = i as f64 * a.step;
        let ce = ce_loss(pt, true);
        let cs = cs_loss(pt, true, &params);
        text.push_str(&format!(
            "{pt:.4},{ce:.6},{:.6},{cs:.6},{:.6}\n",
            focal_loss(pt, true, params.nu),
            modulating_factor(pt, &params)
        ));
    }
    match &a.out {
        Some(p) => fs::write(p, text).or_exit(DATA),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_grad_check(a: GradCheckArgs) -> CliResult<()> {
    let results = grad_check_suite(a.seed, a.instances).or_exit(RUNTIME)?;
    let mut failed = Vec::new();
    for r in &results {
        let status = if r.passed() { "ok" } else { "FAIL" };
        println!(
            "{:<18} {:>5} instances  max rel err {:.3e}  {status}",
            r.name, r.instances, r.max_rel_error
        );
        if !r.passed() {
            failed.push(r.name.as_str());
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        fail(
            RUNTIME,
            format!(
                "gradient check above {GRADCHECK_TOLERANCE:e}: {}",
                failed.join(", ")
            ),
        )
    }
}

fn cmd_da_report(a: TrackArgs) -> CliResult<()> {
    let s = setup(&a)?;
    let record = load_otb_sequence(&s.sequence).or_exit(DATA)?;
    let first = record.load_frame(0).or_exit(DATA)?;
    let (tracker, _) =
        Tracker::init(&first, record.gt[0], s.cfg.clone(), s.backbone).or_exit(RUNTIME)?;
    let ad = tracker.adaptation();
    let report = json!({
        "sequence": record.name,
        "importance_source": s.cfg.importance_source,
        "ranking": s.cfg.ranking,
        "training": {
            "initial_loss": ad.training.initial_loss,
            "final_loss": ad.training.final_loss,
            "final_accuracy": ad.training.final_accuracy,
            "loss_curve": ad.training.loss_curve,
        },
        "delta": ad.importance.delta,
        "mask": ad.mask.indices(),
    });
    match &s.out {
        Some(out) => {
            fs::create_dir_all(out).or_exit(DATA)?;
            write_json(&out.join("da_report.json"), &report)
        }
        None => {
            println!(
                "{}",
                serde_json::to_string_pretty(&report).or_exit(RUNTIME)?
            );
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_overlays_base_and_extracts_paths() {
        let base = TrackerConfig::toy();
        let (cfg, paths) = parse_run_config(
            r#"{"tau_int": 7, "loss": "ce", "sequence": "seq", "weights": null}"#,
            &base,
        )
        .unwrap();
        assert_eq!(cfg.tau_int, 7);
        assert_eq!(cfg.mask_k, base.mask_k);
        assert_eq!(paths.get("sequence"), Some(&PathBuf::from("seq")));
        assert!(!paths.contains_key("weights"));
    }

    #[test]
    fn config_rejects_unknown_and_invalid() {
        let base = TrackerConfig::default();
        let err = parse_run_config(r#"{"tau_shrot": 3}"#, &base).unwrap_err();
        assert!(err.contains("tau_shrot"), "{err}");
        assert!(parse_run_config(r#"{"tau_short": 200}"#, &base).is_err());
        assert!(parse_run_config("[1]", &base).is_err());
        assert!(parse_run_config(r#"{"out": 3}"#, &base).is_err());
        let err = parse_run_config(r#"{"loss_params": {"alpah": 1}}"#, &base).unwrap_err();
        assert!(err.contains("alpah"), "{err}");
    }

    #[test]
    fn labels_are_unique() {
        let l = run_labels(&["a/x.jsonl".into(), "b/x.jsonl".into(), "y.jsonl".into()]);
        assert_eq!(l, ["x", "x_2", "y"]);
    }
}
