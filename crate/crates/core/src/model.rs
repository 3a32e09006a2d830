//! Full models: encoder plus one decoder head, wired for either task.
//!
//! The prosody task predicts per-phoneme `(log-f0, duration)` conditioned on
//! phonemes and style. The frame task predicts [`FRAME_DIM`] features per
//! frame, conditioned on phonemes and speaker with the phoneme-level log-f0
//! appended and upsampled by duration.
//!
//! Heads work on targets standardized per dimension with training-set
//! statistics; predictions are mapped back before leaving the model.

use std::fs;
use std::path::Path;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{frame_targets, round_duration, UtteranceRecord, FRAME_DIM};
use crate::diffusion::{diffusion_loss, prior_mean, reverse_sample_noise, DiffusionConfig, LossNoise};
use crate::encoder::{encode_batch, length_regulate_var, EncoderConfig};
use crate::error::{Error, Result};
use crate::flow::{flow_decode, flow_nll, FlowConfig};
use crate::nn::{load_checkpoint, save_checkpoint, AdamState, Bound, Init, ParameterStore};
use crate::regression::{loss, predict, Loss, RegressionConfig};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::train::{train_loop, Objective, StepLoss, TrainConfig};

pub const MODEL_FILE: &str = "model.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Prosody,
    Frames,
}

/// Decoder family. `L2` is the regression head: L2 loss on prosody, L1 on frames.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    L2,
    Flow,
    Diff,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::L2 => "l2",
            ModelKind::Flow => "flow",
            ModelKind::Diff => "diff",
        }
    }

    pub fn is_generative(self) -> bool {
        self != ModelKind::L2
    }

    /// Sampling temperature used when none is given.
    pub fn default_tau(self) -> f64 {
        match self {
            ModelKind::L2 => 0.0,
            ModelKind::Flow => 0.4,
            ModelKind::Diff => 0.8,
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(ModelKind::L2),
            "flow" => Ok(ModelKind::Flow),
            "diff" => Ok(ModelKind::Diff),
            other => Err(Error::contract(format!(
                "unknown model {other:?} (expected l2, flow or diff)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub task: Task,
    pub kind: ModelKind,
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub regression: RegressionConfig,
    #[serde(default)]
    pub flow: FlowConfig,
    #[serde(default)]
    pub diffusion: DiffusionConfig,
    /// Keys the frame-task targets.
    #[serde(default)]
    pub frame_seed: u64,
    /// Add `U(-½, ½)` to integer durations when training density models.
    #[serde(default = "yes")]
    pub dequantize: bool,
}

fn yes() -> bool {
    true
}

impl ModelConfig {
    pub fn target_dim(&self) -> usize {
        match self.task {
            Task::Prosody => 2,
            Task::Frames => FRAME_DIM,
        }
    }

    pub fn cond_dim(&self) -> usize {
        match self.task {
            Task::Prosody => self.encoder.out_dim,
            Task::Frames => self.encoder.out_dim + 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        match self.kind {
            ModelKind::L2 => Ok(()),
            ModelKind::Flow => self.flow.validate(self.target_dim()),
            ModelKind::Diff => self.diffusion.validate(),
        }
    }
}

/// Per-dimension affine standardization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(rows: &[Tensor]) -> Result<Self> {
        let d = rows
            .first()
            .ok_or_else(|| Error::contract("no targets to fit"))?
            .dims2()?
            .1;
        let mut sum = vec![0.0; d];
        let mut n = 0usize;
        for t in rows {
            for row in t.data().chunks_exact(d) {
                sum.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                n += 1;
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let mut var = vec![0.0; d];
        for t in rows {
            for row in t.data().chunks_exact(d) {
                for j in 0..d {
                    var[j] += (row[j] - mean[j]).powi(2);
                }
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n as f64).sqrt();
                if s > 1e-8 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, std })
    }

    pub fn forward(&self, t: &Tensor) -> Tensor {
        self.apply(t, |v, m, s| (v - m) / s)
    }

    pub fn inverse(&self, t: &Tensor) -> Tensor {
        self.apply(t, |v, m, s| v * s + m)
    }

    fn apply(&self, t: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
        let d = self.mean.len();
        let mut out = t.clone();
        for row in out.data_mut().chunks_exact_mut(d) {
            for ((v, &m), &s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = f(*v, m, s);
            }
        }
        out
    }
}

/// Records with their unnormalized per-row targets.
pub struct Dataset {
    pub records: Vec<UtteranceRecord>,
    pub targets: Vec<Tensor>,
}

/// Raw targets of one record: `[n_phonemes, 2]` or `[frames, FRAME_DIM]`.
pub fn raw_targets(rec: &UtteranceRecord, task: Task, frame_seed: u64) -> Result<Tensor> {
    rec.validate()?;
    match task {
        Task::Prosody => {
            let data = rec
                .log_f0
                .iter()
                .zip(&rec.duration)
                .flat_map(|(&f, &d)| [f, d as f64])
                .collect();
            Tensor::new(vec![rec.len(), 2], data)
        }
        Task::Frames => frame_targets(rec, frame_seed),
    }
}

impl Dataset {
    pub fn new(records: Vec<UtteranceRecord>, task: Task, frame_seed: u64) -> Result<Self> {
        let targets = records
            .iter()
            .map(|r| raw_targets(r, task, frame_seed))
            .collect::<Result<_>>()?;
        Ok(Self { records, targets })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Saved {
    config: ModelConfig,
    norm: Normalizer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub norm: Normalizer,
    pub params: ParameterStore,
}

impl Model {
    pub fn new(config: ModelConfig, norm: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        if norm.mean.len() != config.target_dim() || norm.std.len() != config.target_dim() {
            return Err(Error::contract("normalizer width does not match the task"));
        }
        let mut init = Init::new(seed);
        config.encoder.init(&mut init)?;
        let (cd, d) = (config.cond_dim(), config.target_dim());
        match config.kind {
            ModelKind::L2 => config.regression.init(&mut init, cd, d)?,
            ModelKind::Flow => config.flow.init(&mut init, cd, d)?,
            ModelKind::Diff => config.diffusion.init(&mut init, cd, d)?,
        }
        Ok(Self {
            config,
            norm,
            params: init.finish(),
        })
    }

    /// Conditioning rows for the batch (phonemes or frames) and the row count of each record.
    pub fn condition(&self, tape: &mut Tape, params: &Bound, recs: &[&UtteranceRecord]) -> Result<(Var, Vec<usize>)> {
        match self.config.task {
            Task::Prosody => {
                let inputs: Vec<(&[usize], usize)> = recs.iter().map(|r| (r.phonemes.as_slice(), r.style)).collect();
                let c = encode_batch(tape, params, &self.config.encoder, &inputs)?;
                Ok((c, recs.iter().map(|r| r.len()).collect()))
            }
            Task::Frames => {
                let inputs: Vec<(&[usize], usize)> = recs.iter().map(|r| (r.phonemes.as_slice(), r.speaker)).collect();
                let c = encode_batch(tape, params, &self.config.encoder, &inputs)?;
                let f0: Vec<f64> = recs.iter().flat_map(|r| r.log_f0.iter().copied()).collect();
                let f0 = tape.constant(Tensor::new(vec![f0.len(), 1], f0)?);
                let c = tape.concat(&[c, f0], 1)?;
                let durations: Vec<u32> = recs.iter().flat_map(|r| r.duration.iter().copied()).collect();
                let c = length_regulate_var(tape, c, &durations)?;
                Ok((c, recs.iter().map(|r| r.total_frames()).collect()))
            }
        }
    }

    fn batch_targets(&self, targets: &[&Tensor], rng: &mut Rng) -> Result<Tensor> {
        let mut t = Tensor::concat(targets, 0)?;
        if self.config.task == Task::Prosody && self.config.kind.is_generative() && self.config.dequantize {
            for row in t.data_mut().chunks_exact_mut(2) {
                row[1] += rng.random_range(-0.5..0.5);
            }
        }
        Ok(self.norm.forward(&t))
    }

    /// Training objective on a batch. Diffusion reports `(score_term, l1_term)` as parts.
    pub fn objective(
        &self,
        tape: &mut Tape,
        params: &Bound,
        recs: &[&UtteranceRecord],
        targets: &[&Tensor],
        rng: &mut Rng,
    ) -> Result<Objective> {
        let (c, lengths) = self.condition(tape, params, recs)?;
        let x = self.batch_targets(targets, rng)?;
        let mask = vec![true; x.dims2()?.0];
        match self.config.kind {
            ModelKind::L2 => {
                let kind = match self.config.task {
                    Task::Prosody => Loss::L2,
                    Task::Frames => Loss::L1,
                };
                let pred = predict(tape, params, &self.config.regression, c)?;
                let x = tape.constant(x);
                let total = loss(tape, kind, pred, x, &mask)?;
                Ok(Objective { total, parts: vec![] })
            }
            ModelKind::Flow => {
                let x = tape.constant(x);
                let total = flow_nll(tape, params, &self.config.flow, x, c, &mask)?;
                Ok(Objective { total, parts: vec![] })
            }
            ModelKind::Diff => {
                let noise = LossNoise::draw(&lengths, self.config.target_dim(), &self.config.diffusion.schedule, rng)?;
                let l = diffusion_loss(tape, params, &self.config.diffusion, &x, c, &noise, &mask)?;
                Ok(Objective {
                    total: l.total,
                    parts: vec![l.score_term, l.l1_term],
                })
            }
        }
    }

    /// Names of the objective's parts, for loss logs.
    pub fn part_names(&self) -> &'static [&'static str] {
        match self.config.kind {
            ModelKind::Diff => &["score_term", "l1_term"],
            _ => &[],
        }
    }

    pub fn train(&mut self, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<(Vec<StepLoss>, AdamState)> {
        let model = self.clone();
        train_loop(&mut self.params, data.len(), cfg, seed, |tape, params, idx, rng| {
            let recs: Vec<&UtteranceRecord> = idx.iter().map(|&i| &data.records[i]).collect();
            let targets: Vec<&Tensor> = idx.iter().map(|&i| &data.targets[i]).collect();
            model.objective(tape, params, &recs, &targets, rng)
        })
    }

    /// Objective on the first `n` records with a fixed noise stream, so values
    /// are comparable across parameter settings.
    pub fn eval_loss(&self, data: &Dataset, n: usize, seed: u64) -> Result<f64> {
        let n = n.min(data.len());
        let mut rng = rng::stream(seed, "eval-loss");
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let recs: Vec<&UtteranceRecord> = data.records[..n].iter().collect();
        let targets: Vec<&Tensor> = data.targets[..n].iter().collect();
        let obj = self.objective(&mut tape, &params, &recs, &targets, &mut rng)?;
        tape.value(obj.total).item()
    }

    fn conditioning(&self, recs: &[&UtteranceRecord]) -> Result<(Tensor, Vec<usize>)> {
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape);
        let (c, lengths) = self.condition(&mut tape, &params, recs)?;
        Ok((tape.value(c).clone(), lengths))
    }

    /// Head outputs in native units for a chunk of records, one tensor per record.
    ///
    /// Random draws for record `r` come from the stream `(seed, "sample/{draw}/{utt_id}")`,
    /// so results do not depend on how records are chunked.
    fn generate_chunk(&self, recs: &[&UtteranceRecord], tau: f64, draw: usize, seed: u64) -> Result<Vec<Tensor>> {
        let (c, lengths) = self.conditioning(recs)?;
        let d = self.config.target_dim();
        let mut streams: Vec<Rng> = recs
            .iter()
            .map(|r| rng::stream(seed, &format!("sample/{draw}/{}", r.utt_id)))
            .collect();
        let mut fill = |buf: &mut [f64]| {
            let mut off = 0;
            for (s, &n) in streams.iter_mut().zip(&lengths) {
                for v in &mut buf[off..off + n * d] {
                    *v = rng::normal(s);
                }
                off += n * d;
            }
        };
        let out = match self.config.kind {
            ModelKind::L2 => {
                let mut tape = Tape::new();
                let params = self.params.bind(&mut tape);
                let cv = tape.constant(c.clone());
                let p = predict(&mut tape, &params, &self.config.regression, cv)?;
                tape.value(p).clone()
            }
            ModelKind::Flow => {
                let mut z = vec![0.0; c.dims2()?.0 * d];
                fill(&mut z);
                z.iter_mut().for_each(|v| *v *= tau);
                flow_decode(
                    &self.params,
                    &self.config.flow,
                    &c,
                    Tensor::new(vec![z.len() / d, d], z)?,
                )?
            }
            ModelKind::Diff => {
                let steps = self.config.diffusion.schedule.n_sample_steps;
                reverse_sample_noise(&self.params, &self.config.diffusion, &c, tau, steps, fill)?
            }
        };
        let out = self.norm.inverse(&out);
        out.split(0, &lengths)
    }

    /// Native-unit outputs for every record, in input order.
    pub fn generate(
        &self,
        recs: &[UtteranceRecord],
        tau: f64,
        draw: usize,
        seed: u64,
        parallel: bool,
    ) -> Result<Vec<Tensor>> {
        if !(tau >= 0.0) {
            return Err(Error::contract(format!("tau must be non-negative, got {tau}")));
        }
        const CHUNK: usize = 64;
        let refs: Vec<&UtteranceRecord> = recs.iter().collect();
        let chunks: Vec<&[&UtteranceRecord]> = refs.chunks(CHUNK).collect();
        let run = |ch: &&[&UtteranceRecord]| self.generate_chunk(ch, tau, draw, seed);
        let parts: Vec<Vec<Tensor>> = if parallel {
            chunks.par_iter().map(run).collect::<Result<_>>()?
        } else {
            chunks.iter().map(run).collect::<Result<_>>()?
        };
        Ok(parts.into_iter().flatten().collect())
    }

    /// Prosody samples as records: log-f0 as generated, durations rounded half-up with a minimum of 1.
    pub fn sample_records(
        &self,
        recs: &[UtteranceRecord],
        tau: f64,
        draw: usize,
        seed: u64,
        parallel: bool,
    ) -> Result<Vec<UtteranceRecord>> {
        if self.config.task != Task::Prosody {
            return Err(Error::contract("only prosody models produce utterance records"));
        }
        let outs = self.generate(recs, tau, draw, seed, parallel)?;
        Ok(recs
            .iter()
            .zip(outs)
            .map(|(r, t)| {
                let (log_f0, duration) = t
                    .data()
                    .chunks_exact(2)
                    .map(|row| (row[0], round_duration(row[1])))
                    .unzip();
                UtteranceRecord {
                    log_f0,
                    duration,
                    ..r.clone()
                }
            })
            .collect())
    }

    /// Diffusion prior means in native units, one tensor per record.
    pub fn prior_means(&self, recs: &[UtteranceRecord]) -> Result<Vec<Tensor>> {
        if self.config.kind != ModelKind::Diff {
            return Err(Error::contract("only diffusion models have a prior mean"));
        }
        let refs: Vec<&UtteranceRecord> = recs.iter().collect();
        let (c, lengths) = self.conditioning(&refs)?;
        self.norm.inverse(&prior_mean(&self.params, &c)?).split(0, &lengths)
    }

    /// Checkpoint directory plus `model.json` holding the config and normalizer.
    pub fn save(&self, dir: &Path, adam: Option<&AdamState>) -> Result<()> {
        save_checkpoint(&self.params, adam, dir)?;
        let saved = Saved {
            config: self.config.clone(),
            norm: self.norm.clone(),
        };
        let path = dir.join(MODEL_FILE);
        let text = serde_json::to_string_pretty(&saved).expect("model config serializes");
        fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let saved: Saved = serde_json::from_str(&text).map_err(|e| Error::ParseLine {
            path: path.clone(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        let mut model = Model::new(saved.config, saved.norm, 0)?;
        let (params, _) = load_checkpoint(dir)?;
        model.params.load_from(params)?;
        Ok(model)
    }
}
