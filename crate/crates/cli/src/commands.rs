use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use prosody_core::data::{gen_corpus, load_jsonl, save_jsonl, UtteranceRecord};
use prosody_core::eval::{build_report, EvalReport, HistogramSpec};
use prosody_core::model::{Dataset, Model, ModelKind, Normalizer, Task};
use prosody_core::train::StepLoss;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{check_tau, ExperimentConfig};
use crate::error::{io_err, CliError};

pub const PROVENANCE: &str = "provenance.json";
pub const LOSS_CSV: &str = "loss.csv";
pub const CORPUS_MANIFEST: &str = "manifest.json";

#[derive(Debug, Parser)]
#[command(
    name = "prosody",
    version,
    about = "Train and compare regression, flow and diffusion prosody models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic train/dev/test corpus.
    GenData(GenDataArgs),
    /// Train one decoder head on a corpus.
    Train(TrainArgs),
    /// Draw prosody for every utterance of a split.
    Sample(SampleArgs),
    /// Compare generated prosody against the oracle split.
    Eval(EvalArgs),
    /// Sample and score a generative checkpoint over a grid of temperatures.
    SweepTau(SweepArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// l2, flow or diff; defaults to the config's `model`
    #[arg(long, value_parser = parse_kind)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, allow_negative_numbers = true)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Sample utterances on all cores.
    #[arg(long)]
    pub parallel: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Corpus directory holding the oracle split.
    #[arg(long)]
    pub oracle: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Generated JSONL files; each file stem names its row.
    #[arg(long, num_args = 1.., required = true)]
    pub generated: Vec<PathBuf>,
    /// Report JSON; the text table goes next to it with a `.txt` extension.
    #[arg(long)]
    pub out: PathBuf,
    /// Experiment config supplying the histogram settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub ckpt: Vec<PathBuf>,
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    pub taus: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub parallel: bool,
}

fn parse_kind(s: &str) -> Result<ModelKind, String> {
    s.parse()
        .map_err(|_| format!("unknown model {s:?} (expected l2, flow or diff)"))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data(&a),
        Command::Train(a) => train(&a),
        Command::Sample(a) => sample(&a),
        Command::Eval(a) => eval(&a).map(|_| ()),
        Command::SweepTau(a) => sweep_tau(&a),
    }
}

fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        None => Ok(()),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn split_path(corpus: &Path, split: &str) -> Result<PathBuf, CliError> {
    if !matches!(split, "train" | "dev" | "test") {
        return Err(CliError::Usage(format!(
            "unknown split {split:?} (expected train, dev or test)"
        )));
    }
    Ok(corpus.join(format!("{split}.jsonl")))
}

fn load_split(corpus: &Path, split: &str) -> Result<(Vec<UtteranceRecord>, String), CliError> {
    let path = split_path(corpus, split)?;
    let records = load_jsonl(&path)?;
    Ok((records, sha256_file(&path)?))
}

/// The sidecar that accompanies a generated JSONL file.
pub fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("provenance.json")
}

pub fn gen_data(a: &GenDataArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let corpus = gen_corpus(&cfg.data, cfg.seed)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let mut digests = BTreeMap::new();
    for (name, split) in [("train", &corpus.train), ("dev", &corpus.dev), ("test", &corpus.test)] {
        let path = a.out.join(format!("{name}.jsonl"));
        save_jsonl(split, &path)?;
        digests.insert(name, json!({"records": split.len(), "sha256": sha256_file(&path)?}));
    }
    write_json(
        &a.out.join(CORPUS_MANIFEST),
        &json!({"command": "gen-data", "seed": cfg.seed, "spec": cfg.data, "splits": digests, "config": cfg}),
    )
}

fn write_loss_csv(path: &Path, curve: &[StepLoss], part_names: &[&str]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["step", "loss"];
    header.extend_from_slice(part_names);
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for s in curve {
        let mut row = vec![s.step.to_string(), s.loss.to_string()];
        row.extend(s.parts.iter().map(|p| p.to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    io_err(path, std::io::Error::other(e))
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let mut cfg = ExperimentConfig::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let kind = a
        .model
        .or(cfg.model)
        .ok_or_else(|| CliError::Usage("no model given (use --model l2|flow|diff)".into()))?;
    cfg.model = Some(kind);
    let mut tc = cfg.train_config(kind).clone();
    if let Some(steps) = a.steps {
        tc.steps = steps;
    }
    cfg.training_overrides.insert(kind, tc.clone());

    let (records, train_sha) = load_split(&a.corpus, "train")?;
    let data = Dataset::new(records, cfg.task, cfg.seed)?;
    let norm = Normalizer::fit(&data.targets)?;
    let mut model = Model::new(cfg.model_config(kind), norm, cfg.seed)?;
    let (curve, adam) = model.train(&data, &tc, cfg.seed)?;

    model.save(&a.out, Some(&adam))?;
    write_loss_csv(&a.out.join(LOSS_CSV), &curve, model.part_names())?;
    let first = curve.first().map(|s| s.loss);
    let last = curve.last().map(|s| s.loss);
    write_json(
        &a.out.join(PROVENANCE),
        &json!({
            "command": "train",
            "seed": cfg.seed,
            "model": kind,
            "train_sha256": train_sha,
            "n_train": data.len(),
            "first_loss": first,
            "final_loss": last,
            "config": cfg,
        }),
    )?;
    if let (Some(f), Some(l)) = (first, last) {
        eprintln!("{}: {} steps, loss {f:.4} -> {l:.4}", kind.name(), curve.len());
    }
    Ok(())
}

fn load_checkpoint(dir: &Path) -> Result<(Model, Value), CliError> {
    let model = Model::load(dir)?;
    let prov: Value = read_json(&dir.join(PROVENANCE))?;
    Ok((model, prov))
}

fn config_of(prov: &Value) -> Result<ExperimentConfig, CliError> {
    serde_json::from_value(prov["config"].clone()).map_err(|e| CliError::Usage(format!("checkpoint config: {e}")))
}

/// `draws` independent samples per utterance, draw-major.
fn draw_records(
    model: &Model,
    recs: &[UtteranceRecord],
    tau: f64,
    draws: usize,
    seed: u64,
    parallel: bool,
) -> Result<Vec<UtteranceRecord>, CliError> {
    if model.config.task != Task::Prosody {
        return Err(CliError::Usage(
            "sampling writes prosody records; this checkpoint is a frame model".into(),
        ));
    }
    let mut out = Vec::with_capacity(recs.len() * draws);
    for draw in 0..draws {
        out.extend(model.sample_records(recs, tau, draw, seed, parallel)?);
    }
    Ok(out)
}

pub fn sample(a: &SampleArgs) -> Result<(), CliError> {
    let (model, ckpt_prov) = load_checkpoint(&a.ckpt)?;
    let cfg = config_of(&ckpt_prov)?;
    let kind = model.config.kind;
    let tau = a.tau.unwrap_or_else(|| cfg.tau_for(kind));
    check_tau(tau)?;
    let mut draws = a.draws.unwrap_or(cfg.sampling.draws);
    if draws == 0 {
        return Err(CliError::Usage("draws must be at least 1".into()));
    }
    if !kind.is_generative() && draws > 1 {
        eprintln!("warning: the l2 model is deterministic; writing 1 draw instead of {draws}");
        draws = 1;
    }
    let seed = a.seed.unwrap_or(cfg.seed);
    let parallel = a.parallel || cfg.sampling.parallel;
    let (recs, split_sha) = load_split(&a.corpus, &a.split)?;
    let out = draw_records(&model, &recs, tau, draws, seed, parallel)?;
    ensure_parent(&a.out)?;
    save_jsonl(&out, &a.out)?;
    write_json(
        &sidecar_path(&a.out),
        &json!({
            "command": "sample",
            "seed": seed,
            "model": kind,
            "tau": tau,
            "draws": draws,
            "split": a.split,
            "split_sha256": split_sha,
            "checkpoint": ckpt_prov,
        }),
    )
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub provenance: Value,
    #[serde(flatten)]
    pub report: EvalReport,
}

pub fn eval(a: &EvalArgs) -> Result<EvalOutput, CliError> {
    let hist = match &a.config {
        Some(p) => ExperimentConfig::load(p)?.eval,
        None => HistogramSpec::default(),
    };
    let (oracle, oracle_sha) = load_split(&a.oracle, &a.split)?;
    let mut models = BTreeMap::new();
    let mut sources = BTreeMap::new();
    for path in &a.generated {
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| CliError::Usage(format!("cannot name {}", path.display())))?
            .to_string();
        let side = sidecar_path(path);
        let prov: Value = if side.exists() { read_json(&side)? } else { Value::Null };
        if models
            .insert(name.clone(), load_jsonl::<UtteranceRecord>(path)?)
            .is_some()
        {
            return Err(CliError::Usage(format!("two generated files are both named {name:?}")));
        }
        sources.insert(name, json!({"sha256": sha256_file(path)?, "provenance": prov}));
    }
    let report = build_report(&oracle, &models, &hist)?;
    let out = EvalOutput {
        provenance: json!({
            "command": "eval",
            "split": a.split,
            "oracle_sha256": oracle_sha,
            "generated": sources,
        }),
        report,
    };
    write_json(&a.out, &out)?;
    let table = out.report.table();
    let txt = a.out.with_extension("txt");
    fs::write(&txt, &table).map_err(|e| io_err(&txt, e))?;
    print!("{table}");
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub std_logf0: f64,
    pub std_dur: f64,
    pub jsd_logf0: f64,
    pub jsd_dur: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepModel {
    pub model: ModelKind,
    pub rows: Vec<SweepRow>,
    /// max minus min of `std_logf0` over the grid
    pub std_logf0_range: f64,
}

/// Score one model at each temperature against the oracle records.
pub fn sweep_model(
    model: &Model,
    oracle: &[UtteranceRecord],
    taus: &[f64],
    seed: u64,
    hist: &HistogramSpec,
    parallel: bool,
) -> Result<SweepModel, CliError> {
    let kind = model.config.kind;
    if !kind.is_generative() {
        return Err(CliError::Usage("temperature has no effect on the l2 model".into()));
    }
    let mut rows = Vec::with_capacity(taus.len());
    for &tau in taus {
        check_tau(tau)?;
        let gen = draw_records(model, oracle, tau, 1, seed, parallel)?;
        let mut m = BTreeMap::new();
        m.insert(kind.name().to_string(), gen);
        let rep = build_report(oracle, &m, hist)?;
        let st = &rep.models[kind.name()];
        rows.push(SweepRow {
            tau,
            std_logf0: st.std_logf0,
            std_dur: st.std_dur,
            jsd_logf0: st.jsd_logf0.unwrap_or(0.0),
            jsd_dur: st.jsd_dur.unwrap_or(0.0),
        });
    }
    let stds = rows.iter().map(|r| r.std_logf0);
    let range = stds.clone().fold(f64::NEG_INFINITY, f64::max) - stds.fold(f64::INFINITY, f64::min);
    Ok(SweepModel {
        model: kind,
        rows,
        std_logf0_range: range,
    })
}

pub fn sweep_table(models: &BTreeMap<String, SweepModel>) -> String {
    let mut s = format!(
        "{:<8} {:>5} {:>11} {:>9} {:>11} {:>9}\n",
        "model", "tau", "STD log-f0", "STD dur", "JSD log-f0", "JSD dur"
    );
    for (name, m) in models {
        for r in &m.rows {
            s += &format!(
                "{:<8} {:>5.2} {:>11.4} {:>9.4} {:>11.4} {:>9.4}\n",
                name, r.tau, r.std_logf0, r.std_dur, r.jsd_logf0, r.jsd_dur
            );
        }
    }
    s
}

pub fn sweep_tau(a: &SweepArgs) -> Result<(), CliError> {
    let (oracle, oracle_sha) = load_split(&a.corpus, &a.split)?;
    let mut models = BTreeMap::new();
    let mut provs = BTreeMap::new();
    for dir in &a.ckpt {
        let (model, prov) = load_checkpoint(dir)?;
        let cfg = config_of(&prov)?;
        let taus = a.taus.clone().unwrap_or_else(|| cfg.sampling.taus.clone());
        let seed = a.seed.unwrap_or(cfg.seed);
        let swept = sweep_model(
            &model,
            &oracle,
            &taus,
            seed,
            &cfg.eval,
            a.parallel || cfg.sampling.parallel,
        )?;
        let mut name = model.config.kind.name().to_string();
        let mut k = 2;
        while models.contains_key(&name) {
            name = format!("{}-{k}", model.config.kind.name());
            k += 1;
        }
        provs.insert(name.clone(), json!({"seed": seed, "checkpoint": prov}));
        models.insert(name, swept);
    }
    let table = sweep_table(&models);
    write_json(
        &a.out,
        &json!({
            "provenance": {"command": "sweep-tau", "split": a.split, "oracle_sha256": oracle_sha, "models": provs},
            "models": models,
        }),
    )?;
    let txt = a.out.with_extension("txt");
    fs::write(&txt, &table).map_err(|e| io_err(&txt, e))?;
    print!("{table}");
    Ok(())
}
