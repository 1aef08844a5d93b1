use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};

use shed_lab::harness::config::{config_hash, parse_overrides, resolve_config};
use shed_lab::harness::format::{
    load_centroid_bank, load_checkpoint, read_json, save_centroid_bank, save_checkpoint, save_dataset,
    save_dataset_binary, save_predictions, save_text_bank, save_trace_csv, write_json, write_text, Checkpoint,
    SCHEMA_VERSION,
};
use shed_lab::harness::pipeline::{fit, predict_and_score, prepare_data, text_bank, zeroshot_reports};
use shed_lab::harness::report::{ablation_csv, ablation_markdown, report_csv, report_markdown, Manifest};
use shed_lab::harness::{
    export_similarity_heatmap, run_ablation_suite, AblationFlags, AblationTable, EvalReport, ExperimentConfig,
    HeatmapMode,
};
use shed_lab::homogenize::compute_domain_centroids;
use shed_lab::synthgen::{generate_benchmark, GenConfig};
use shed_lab::{Result, ShedError};

#[derive(Parser)]
#[command(name = "shed-lab", version, about = "Style-homogenized embedding alignment experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON). Defaults apply to missing fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config overrides as `--dotted.name value` or `--dotted.name=value`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "OVERRIDES")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark (first seed) as dataset files.
    Gen {
        /// Also write the binary f32 sidecar of both datasets.
        #[arg(long)]
        binary: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Train the adapter and build the centroid bank (first seed).
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Raw and style-homogenized zero-shot accuracy on the test set.
    Zeroshot {
        #[command(flatten)]
        common: Common,
    },
    /// Predict the test set, from a `train` output directory or after training.
    Eval {
        /// Directory holding checkpoint.json and centroid_bank.json.
        #[arg(long)]
        from: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Full method plus each configured ablation, over all seeds.
    Ablate {
        /// Run every ablation flag.
        #[arg(long)]
        all: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Class-by-class image/text similarity grid of the training set.
    Heatmap {
        #[arg(long, default_value = "homogenized")]
        mode: HeatmapMode,
        /// `train` output directory; required for post-training mode.
        #[arg(long)]
        from: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Render a saved report.json or ablation.json as CSV and Markdown.
    Report {
        input: PathBuf,
        /// Write report.csv/.md (or ablation.csv/.md) here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Run {
    cfg: ExperimentConfig,
    hash: String,
    out: PathBuf,
}

impl Run {
    fn load(common: &Common) -> Result<Run> {
        let base = match &common.config {
            Some(path) => Some(
                read_json::<Value>(path)
                    .map_err(|e| ShedError::InvalidConfig(format!("{}: {e}", path.display())))?,
            ),
            None => None,
        };
        let mut overrides = parse_overrides(&common.overrides)?;
        if let Some(out) = &common.out {
            overrides.push(("output_dir".into(), json!(out)));
        }
        let cfg: ExperimentConfig = resolve_config(base, &overrides)?;
        cfg.validate()?;
        let hash = config_hash(&cfg)?;
        let out = cfg.output_dir.clone();
        std::fs::create_dir_all(&out)?;
        Ok(Run { cfg, hash, out })
    }

    fn seed(&self) -> u64 {
        self.cfg.seeds[0]
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn manifest(&self, command: &str, seeds: Vec<u64>) -> Result<()> {
        let args = std::env::args().skip(1).collect();
        let m = Manifest::new(command, args, serde_json::to_value(&self.cfg)?, self.hash.clone(), seeds);
        write_json(&self.path(&format!("{command}.manifest.json")), &m)
    }
}

fn write_report(dir: &Path, stem: &str, report: &EvalReport) -> Result<()> {
    write_json(&dir.join(format!("{stem}.json")), report)?;
    write_text(&dir.join(format!("{stem}.csv")), &report_csv(report))?;
    write_text(&dir.join(format!("{stem}.md")), &report_markdown(report))
}

fn cmd_gen(common: &Common, binary: bool) -> Result<()> {
    let run = Run::load(common)?;
    if run.cfg.data.uses_files() {
        return Err(ShedError::InvalidConfig("gen needs a synthetic data config, not file paths".into()));
    }
    let b = generate_benchmark(&GenConfig {
        seed: run.seed(),
        ..run.cfg.data.synthetic.clone()
    })?;
    save_dataset(&run.path("train.ndjson"), &b.train)?;
    save_dataset(&run.path("test.ndjson"), &b.test)?;
    save_text_bank(&run.path("text.ndjson"), &b.text)?;
    if binary {
        save_dataset_binary(&run.path("train.f32"), &b.train)?;
        save_dataset_binary(&run.path("test.f32"), &b.test)?;
    }
    write_json(&run.path("metadata.json"), &b.metadata)?;
    info!("wrote {} train and {} test samples to {}", b.train.len(), b.test.len(), run.out.display());
    run.manifest("gen", vec![run.seed()])
}

fn cmd_train(common: &Common) -> Result<()> {
    let run = Run::load(common)?;
    let flags = run.cfg.ablations;
    let (train_cfg, inf_cfg) = run.cfg.resolved(&flags, run.seed());
    let data = prepare_data(&run.cfg.data, run.seed())?;
    let fitted = fit(&data, &train_cfg, &inf_cfg, flags.text_centering())?;
    let means = fitted.outcome.epoch_mean_align();
    info!("epoch mean alignment loss: {means:?}");
    save_checkpoint(
        &run.path("checkpoint.json"),
        &Checkpoint {
            schema: SCHEMA_VERSION,
            config_hash: run.hash.clone(),
            train_config: train_cfg,
            adapter: fitted.outcome.params,
            source_centroids: fitted.outcome.centroids,
        },
    )?;
    save_centroid_bank(&run.path("centroid_bank.json"), &fitted.bank)?;
    save_trace_csv(&run.path("trace.csv"), &fitted.outcome.trace)?;
    run.manifest("train", vec![run.seed()])
}

fn cmd_zeroshot(common: &Common) -> Result<()> {
    let run = Run::load(common)?;
    let (_, inf_cfg) = run.cfg.resolved(&run.cfg.ablations, run.seed());
    let data = prepare_data(&run.cfg.data, run.seed())?;
    let (raw, sh) = zeroshot_reports(&data, &inf_cfg, run.cfg.ablations.text_centering())?;
    println!("raw zero-shot: {:.2}\nsh zero-shot:  {:.2}", raw.mean_accuracy, sh.mean_accuracy);
    write_report(&run.out, "zeroshot_raw", &raw)?;
    write_report(&run.out, "zeroshot_sh", &sh)?;
    run.manifest("zeroshot", vec![run.seed()])
}

fn cmd_eval(common: &Common, from: Option<&Path>) -> Result<()> {
    let run = Run::load(common)?;
    let flags = run.cfg.ablations;
    let (train_cfg, inf_cfg) = run.cfg.resolved(&flags, run.seed());
    let data = prepare_data(&run.cfg.data, run.seed())?;
    let (adapter, bank, bank_text) = match from {
        Some(dir) => {
            let ckpt = load_checkpoint(&dir.join("checkpoint.json"))?;
            if ckpt.config_hash != run.hash {
                warn!("checkpoint was trained under a different config ({})", ckpt.config_hash);
            }
            let bank = load_centroid_bank(&dir.join("centroid_bank.json"))?;
            (ckpt.adapter, bank, text_bank(&data.text, flags.text_centering())?)
        }
        None => {
            let fitted = fit(&data, &train_cfg, &inf_cfg, flags.text_centering())?;
            (fitted.outcome.params, fitted.bank, fitted.text_bank)
        }
    };
    let (records, report, timing) = predict_and_score(&data.test, &adapter, &bank, &bank_text, &inf_cfg)?;
    println!("{}", report_markdown(&report));
    save_predictions(&run.path("predictions.ndjson"), &records)?;
    write_report(&run.out, "report", &report)?;
    write_json(&run.path("timing.json"), &timing)?;
    run.manifest("eval", vec![run.seed()])
}

fn cmd_ablate(common: &Common, all: bool) -> Result<()> {
    let mut run = Run::load(common)?;
    if all {
        run.cfg.ablations = AblationFlags {
            no_sh_alignment: true,
            no_reg: true,
            no_fusion: true,
            no_additional_centroids: true,
            no_cpm: true,
            no_swm: true,
            ema_centroids: true,
            single_template_centering: true,
        };
        run.hash = config_hash(&run.cfg)?;
    }
    let table = run_ablation_suite(&run.cfg)?;
    let md = ablation_markdown(&table);
    println!("{md}");
    write_json(&run.path("ablation.json"), &table)?;
    write_text(&run.path("ablation.csv"), &ablation_csv(&table))?;
    write_text(&run.path("ablation.md"), &md)?;
    run.manifest("ablate", run.cfg.seeds.clone())
}

fn cmd_heatmap(common: &Common, mode: HeatmapMode, from: Option<&Path>) -> Result<()> {
    let run = Run::load(common)?;
    let data = prepare_data(&run.cfg.data, run.seed())?;
    let bank_text = text_bank(&data.text, run.cfg.ablations.text_centering())?;
    let (centroids, adapter) = match from {
        Some(dir) => {
            let ckpt = load_checkpoint(&dir.join("checkpoint.json"))?;
            (ckpt.source_centroids, Some(ckpt.adapter))
        }
        None => (compute_domain_centroids(&data.train)?, None),
    };
    let h = export_similarity_heatmap(&data.train, &bank_text, mode, &centroids, adapter.as_ref())?;
    let stem = format!("heatmap_{}", serde_json::to_value(mode)?.as_str().unwrap_or("grid"));
    println!("diagonal dominance: {:.4}", h.diagonal_dominance());
    write_text(&run.path(&format!("{stem}.csv")), &h.to_csv())?;
    write_json(
        &run.path(&format!("{stem}.json")),
        &json!({ "diagonal_dominance": h.diagonal_dominance(), "heatmap": h }),
    )?;
    run.manifest("heatmap", vec![run.seed()])
}

fn emit<T: Serialize>(out: Option<&Path>, stem: &str, csv: String, md: String, value: &T) -> Result<()> {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            write_json(&dir.join(format!("{stem}.json")), value)?;
            write_text(&dir.join(format!("{stem}.csv")), &csv)?;
            write_text(&dir.join(format!("{stem}.md")), &md)
        }
        None => {
            println!("{md}\n{csv}");
            Ok(())
        }
    }
}

fn cmd_report(input: &Path, out: Option<&Path>) -> Result<()> {
    let doc: Value = read_json(input)?;
    if doc.get("rows").is_some() {
        let table: AblationTable = serde_json::from_value(doc)?;
        emit(out, "ablation", ablation_csv(&table), ablation_markdown(&table), &table)
    } else {
        let report: EvalReport = serde_json::from_value(doc)?;
        emit(out, "report", report_csv(&report), report_markdown(&report), &report)
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Gen { binary, common } => cmd_gen(&common, binary),
        Command::Train { common } => cmd_train(&common),
        Command::Zeroshot { common } => cmd_zeroshot(&common),
        Command::Eval { from, common } => cmd_eval(&common, from.as_deref()),
        Command::Ablate { all, common } => cmd_ablate(&common, all),
        Command::Heatmap { mode, from, common } => cmd_heatmap(&common, mode, from.as_deref()),
        Command::Report { input, out } => cmd_report(&input, out.as_deref()),
    }
}

fn exit_code(e: &ShedError) -> u8 {
    if e.is_validation() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: [&str; 12] = [
        "--data.synthetic.dim=12",
        "--data.synthetic.num_classes=3",
        "--data.synthetic.samples_per_domain_class=5",
        "--data.synthetic.num_source_templates=3",
        "--data.synthetic.num_additional_templates=3",
        "--train.epochs=2",
        "--train.iterations_per_epoch=5",
        "--train.warmup_iterations=2",
        "--train.batch_size=8",
        "--inference.swm_pool_size=16",
        "--seeds=[0,1]",
        "--ema_momentum=0.9",
    ];

    fn run(cmd: &str, out: &Path, extra: &[&str]) -> Result<()> {
        let mut args = vec!["shed-lab", cmd];
        let out = out.to_str().unwrap();
        args.extend(extra);
        args.extend(["--out", out]);
        args.extend(TINY);
        dispatch(Cli::try_parse_from(args).expect("arguments parse"))
    }

    #[test]
    fn every_subcommand_writes_its_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let gen = dir.path().join("gen");
        run("gen", &gen, &["--binary"]).unwrap();
        for f in ["train.ndjson", "test.ndjson", "text.ndjson", "train.f32", "metadata.json", "gen.manifest.json"] {
            assert!(gen.join(f).exists(), "{f}");
        }

        let cfg = dir.path().join("files.json");
        let doc = json!({ "data": {
            "train": gen.join("train.f32"),
            "test": gen.join("test.ndjson"),
            "text": gen.join("text.ndjson"),
        }});
        std::fs::write(&cfg, doc.to_string()).unwrap();
        let cfg_arg = cfg.to_str().unwrap();

        let t = dir.path().join("train");
        run("train", &t, &["--config", cfg_arg]).unwrap();
        for f in ["checkpoint.json", "centroid_bank.json", "trace.csv", "train.manifest.json"] {
            assert!(t.join(f).exists(), "{f}");
        }
        let from = t.to_str().unwrap();
        run("eval", &t, &["--config", cfg_arg, "--from", from]).unwrap();
        for f in ["predictions.ndjson", "report.json", "report.csv", "report.md", "timing.json"] {
            assert!(t.join(f).exists(), "{f}");
        }
        run("zeroshot", &t, &["--config", cfg_arg]).unwrap();
        assert!(t.join("zeroshot_sh.md").exists());
        run("heatmap", &t, &["--config", cfg_arg, "--mode", "post-training", "--from", from]).unwrap();
        assert!(t.join("heatmap_post-training.csv").exists());

        let rendered = dir.path().join("rendered");
        cmd_report(&t.join("report.json"), Some(&rendered)).unwrap();
        assert_eq!(
            std::fs::read_to_string(rendered.join("report.md")).unwrap(),
            std::fs::read_to_string(t.join("report.md")).unwrap()
        );

        let manifest: Manifest = read_json(&t.join("eval.manifest.json")).unwrap();
        assert_eq!(manifest.command, "eval");
        assert_eq!(manifest.seeds, vec![0]);
        assert_eq!(manifest.config_hash.len(), 64);
    }

    #[test]
    fn ablate_all_covers_every_flag() {
        let dir = tempfile::tempdir().unwrap();
        run("ablate", dir.path(), &["--all"]).unwrap();
        let table: AblationTable = read_json(&dir.path().join("ablation.json")).unwrap();
        assert_eq!(table.rows.len(), 1 + AblationFlags::NAMES.len());
        assert_eq!(table.seeds, vec![0, 1]);
        assert!(table.rows.iter().all(|r| r.summary.is_some()));
        assert!(dir.path().join("ablation.md").exists());
    }

    #[test]
    fn bad_input_maps_to_validation_exit_code() {
        let dir = tempfile::tempdir().unwrap();
        let e = run("train", dir.path(), &["--train.tau", "-1"]).unwrap_err();
        assert_eq!(exit_code(&e), 2);
        let e = run("train", dir.path(), &["--train.no_such_field", "1"]).unwrap_err();
        assert_eq!(exit_code(&e), 2);
        let e = run("eval", dir.path(), &["--from", dir.path().join("missing").to_str().unwrap()]).unwrap_err();
        assert_eq!(exit_code(&e), 3);
    }
}
