mod args;
mod record;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use afcl_core::metrics::{robustness_report, write_robustness_csv, MetricsReport};
use afcl_core::model::{Model, ModelConfig};
use afcl_core::msvg::select_k;
use afcl_core::rng::derive_seed;
use afcl_core::synth::{generate_corpus, read_dataset, write_dataset, CorpusSpec, Distortion, Kind};
use afcl_core::train::ablation::{medians, parse_variants, run_ablation, write_medians_csv, write_rows_csv, Variant};
use afcl_core::train::{evaluate, fit, load_model, TrainConfig};
use anyhow::{Context, Result};
use clap::Parser;

use args::{AblateArgs, Cli, Command, CommonArgs, ConfigArgs, GenDataArgs, RobustnessArgs};
use record::RunRecord;

const CHECKPOINT_FILE: &str = "checkpoint.afcl";
const CONFIG_FILE: &str = "config.txt";

/// A problem with how the command was invoked rather than with the run.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}");
            eprintln!("Run `afcl <command> --help` for the available flags.");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::SelectK(a) => select_k_cmd(&a),
        Command::Train(a) => train(&a),
        Command::Eval(a) => eval(&a),
        Command::Ablate(a) => ablate(&a),
        Command::Robustness(a) => robustness(&a),
        Command::ModelInfo(a) => model_info(&a),
    }
}

/// Preset, then the config file, then flags.
fn resolve(base: &ConfigArgs, overrides: &[(&'static str, String)]) -> Result<TrainConfig> {
    let mut cfg = base.preset.config();
    if let Some(path) = &base.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        cfg.apply_text(&text)
            .map_err(|e| usage(format!("{}: {e}", path.display())))?;
    }
    for (k, v) in overrides {
        cfg.set(k, v)
            .map_err(|e| usage(format!("--{}: {e}", k.replace('_', "-"))))?;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

fn require<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    v.as_ref().ok_or_else(|| {
        usage(format!(
            "missing --{} (or `{key} = ...` in the config file)",
            key.replace('_', "-")
        ))
    })
}

fn prepare_out(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> afcl_core::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

fn record_for(command: &str, cfg: &TrainConfig) -> RunRecord {
    let pairs = cfg.to_pairs().into_iter().map(|(k, v)| (k.to_string(), v));
    RunRecord::new(command, cfg.seed, pairs)
}

fn save_config(cfg: &TrainConfig, out: &Path) -> Result<()> {
    fs::write(out.join(CONFIG_FILE), cfg.to_text()).context("writing config.txt")
}

fn write_metrics(report: &MetricsReport, dir: &Path) -> Result<()> {
    write_with(&dir.join("per_image.csv"), |w| report.write_per_image_csv(w))?;
    write_with(&dir.join("summary.csv"), |w| report.write_summary_csv(w))
}

fn print_report(label: &str, r: &MetricsReport) {
    let auc = r.mean_auc.map_or_else(|| "undefined".into(), |a| format!("{a:.4}"));
    println!("{label}: {} images, mean F1 {:.4}, mean AUC {auc}", r.per_image.len(), r.mean_f1);
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let kinds = a
        .kinds
        .split(',')
        .map(|s| s.trim().parse::<Kind>())
        .collect::<afcl_core::Result<Vec<_>>>()
        .map_err(|e| usage(format!("--kinds: {e}")))?;
    if a.count == 0 {
        return Err(usage("--count must be at least 1"));
    }
    let spec = CorpusSpec {
        kinds: kinds.clone(),
        ..CorpusSpec::new(a.seed, a.count, a.size, &a.prefix)
    };
    let samples = generate_corpus(&spec)?;
    prepare_out(&a.out)?;
    write_dataset(&samples, &a.out)?;
    let kinds_text = kinds.iter().map(|k| k.name()).collect::<Vec<_>>().join(",");
    let config = [
        ("seed", a.seed.to_string()),
        ("count", a.count.to_string()),
        ("size", a.size.to_string()),
        ("prefix", a.prefix.clone()),
        ("kinds", kinds_text),
    ];
    RunRecord::new("gen-data", a.seed, config.map(|(k, v)| (k.to_string(), v))).finish(&a.out)?;
    println!("wrote {} samples to {}", samples.len(), a.out.display());
    Ok(())
}

fn train(a: &CommonArgs) -> Result<()> {
    let cfg = resolve(&a.config, &a.overrides())?;
    let data = require(&cfg.dataset, "dataset")?;
    let out = &a.config.out;
    let samples = read_dataset(data)?;
    let test = cfg.test_dataset.as_deref().map(read_dataset).transpose()?;
    let run = fit(&cfg, &samples)?;
    prepare_out(out)?;
    let mut rec = record_for("train", &cfg);
    rec.input_dataset(data)?;
    save_config(&cfg, out)?;
    run.save_checkpoint(&out.join(CHECKPOINT_FILE))?;
    write_with(&out.join("loss.csv"), |w| run.write_loss_csv(w))?;
    if let (Some(test), Some(dir)) = (&test, &cfg.test_dataset) {
        rec.input_dataset(dir)?;
        let report = evaluate(&run.model, test)?;
        write_metrics(&report, out)?;
        print_report("held-out", &report);
    }
    rec.finish(out)?;
    if let Some(last) = run.log.last() {
        println!(
            "trained {} epochs on {} samples ({} skipped); final total loss {:.5}",
            run.log.len(),
            samples.len() - run.skipped,
            run.skipped,
            last.total
        );
    }
    Ok(())
}

fn load(cfg: &TrainConfig) -> Result<(Model, PathBuf)> {
    let ckpt = require(&cfg.checkpoint, "checkpoint")?;
    let model = load_model(ckpt, cfg.input_size).with_context(|| format!("loading {}", ckpt.display()))?;
    Ok((model, ckpt.clone()))
}

fn eval(a: &CommonArgs) -> Result<()> {
    let cfg = resolve(&a.config, &a.overrides())?;
    let data = require(&cfg.dataset, "dataset")?;
    let (model, ckpt) = load(&cfg)?;
    let samples = read_dataset(data)?;
    let report = evaluate(&model, &samples)?;
    let out = &a.config.out;
    prepare_out(out)?;
    save_config(&cfg, out)?;
    write_metrics(&report, out)?;
    let mut rec = record_for("eval", &cfg);
    rec.input_file(&ckpt)?;
    rec.input_dataset(data)?;
    rec.finish(out)?;
    print_report("eval", &report);
    Ok(())
}

fn select_k_cmd(a: &CommonArgs) -> Result<()> {
    let cfg = resolve(&a.config, &a.overrides())?;
    let data = require(&cfg.dataset, "dataset")?;
    let model = match &cfg.checkpoint {
        Some(_) => load(&cfg)?.0,
        None => Model::new(
            ModelConfig {
                input_size: cfg.input_size,
                trm: cfg.trm,
            },
            derive_seed(cfg.seed, "init"),
        )?,
    };
    let samples = read_dataset(data)?;
    let (report, dump) = select_k(&samples, &model)?;
    let out = &a.config.out;
    prepare_out(out)?;
    save_config(&cfg, out)?;
    write_with(&out.join("k_selection.csv"), |w| report.write_csv(w))?;
    serde_json::to_writer(create(&out.join("embeddings.json"))?, &dump).context("writing embeddings.json")?;
    let mut rec = record_for("select-k", &cfg);
    rec.input_dataset(data)?;
    if let Some(c) = &cfg.checkpoint {
        rec.input_file(c)?;
    }
    rec.finish(out)?;
    println!("chosen k = {}", report.chosen_k);
    Ok(())
}

fn ablate(a: &AblateArgs) -> Result<()> {
    let variants = parse_variants(&a.views).map_err(|e| usage(format!("--views: {e}")))?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let cfg = resolve(&a.config, &a.config.overrides())?;
    let data = require(&cfg.dataset, "dataset")?;
    let test_dir = require(&cfg.test_dataset, "test_dataset")?;
    let train = read_dataset(data)?;
    let test = read_dataset(test_dir)?;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| cfg.seed + i).collect();
    let out = &a.config.out;
    prepare_out(out)?;
    save_config(&cfg, out)?;
    let rows = run_ablation(&cfg, &train, &test, &variants, &seeds, |v, seed, run, report| {
        let dir = out.join("runs").join(format!("{v}-seed{seed}"));
        fs::create_dir_all(&dir)?;
        let io = |e: anyhow::Error| afcl_core::Error::Io(std::io::Error::other(format!("{e:#}")));
        run.save_checkpoint(&dir.join(CHECKPOINT_FILE))?;
        save_config(&TrainConfig { seed, ..v.apply(&cfg) }, &dir).map_err(io)?;
        write_with(&dir.join("loss.csv"), |w| run.write_loss_csv(w)).map_err(io)?;
        write_metrics(report, &dir).map_err(io)?;
        print_report(&format!("{v} seed {seed}"), report);
        Ok(())
    })?;
    let meds = medians(&rows);
    write_with(&out.join("ablation.csv"), |w| write_rows_csv(&rows, w))?;
    write_with(&out.join("ablation_median.csv"), |w| write_medians_csv(&meds, w))?;
    let mut rec = record_for("ablate", &cfg);
    rec.config.insert("variants".into(), variants.iter().map(Variant::name).collect::<Vec<_>>().join(","));
    rec.config.insert("seeds".into(), a.seeds.to_string());
    rec.input_dataset(data)?;
    rec.input_dataset(test_dir)?;
    rec.finish(out)?;
    for m in &meds {
        println!("{:<16} median F1 {:.4} over {} seeds", m.variant, m.f1, m.runs);
    }
    let f1 = |v: Variant| meds.iter().find(|m| m.variant == v.name()).map(|m| m.f1);
    let compare = |a: Variant, b: Variant| {
        if let (Some(x), Some(y)) = (f1(a), f1(b)) {
            let verdict = if x >= y { "holds" } else { "does not hold" };
            println!("F1({a}) >= F1({b}): {verdict} ({x:.4} vs {y:.4})");
        }
    };
    compare(Variant::MSVG, Variant::RANDOM_CROP);
    compare(Variant::MSVG, Variant::MSVG_NO_TRM);
    compare(Variant::MSVG, Variant::COPY_PASTE);
    Ok(())
}

fn robustness(a: &RobustnessArgs) -> Result<()> {
    let distortions = match &a.distortions {
        Some(list) => list
            .split(',')
            .map(|s| s.parse::<Distortion>())
            .collect::<afcl_core::Result<Vec<_>>>()
            .map_err(|e| usage(format!("--distortions: {e}")))?,
        None => Distortion::STANDARD.to_vec(),
    };
    let cfg = resolve(&a.common.config, &a.common.overrides())?;
    let data = require(&cfg.dataset, "dataset")?;
    let (model, ckpt) = load(&cfg)?;
    let samples = read_dataset(data)?;
    let rows = robustness_report(&model, &samples, &distortions, cfg.seed)?;
    let out = &a.common.config.out;
    prepare_out(out)?;
    save_config(&cfg, out)?;
    write_with(&out.join("robustness.csv"), |w| write_robustness_csv(&rows, w))?;
    let mut rec = record_for("robustness", &cfg);
    rec.config.insert(
        "distortions".into(),
        distortions.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
    );
    rec.input_file(&ckpt)?;
    rec.input_dataset(data)?;
    rec.finish(out)?;
    for r in &rows {
        println!("{:<18} F1 {:.4}  ΔF1 {:+.4}", r.distortion, r.f1, r.delta_f1);
    }
    Ok(())
}

fn model_info(a: &CommonArgs) -> Result<()> {
    let cfg = resolve(&a.config, &a.overrides())?;
    let model = match &cfg.checkpoint {
        Some(_) => load(&cfg)?.0,
        None => Model::new(
            ModelConfig {
                input_size: cfg.input_size,
                trm: cfg.trm,
            },
            derive_seed(cfg.seed, "init"),
        )?,
    };
    let mut text = String::new();
    let mut total = 0;
    for (name, shape) in model.describe() {
        let n: usize = shape.iter().product();
        total += n;
        let dims = shape.iter().map(ToString::to_string).collect::<Vec<_>>().join("x");
        text.push_str(&format!("{name}\t{dims}\t{n}\n"));
    }
    text.push_str(&format!("total\t-\t{total}\n"));
    print!("{text}");
    let out = &a.config.out;
    prepare_out(out)?;
    fs::write(out.join("model_info.tsv"), &text)?;
    save_config(&cfg, out)?;
    let mut rec = record_for("model-info", &cfg);
    if let Some(c) = &cfg.checkpoint {
        rec.input_file(c)?;
    }
    rec.finish(out)
}
