//! Synthetic one-to-many prosody corpus with a known conditional law.
//!
//! Every (phoneme, style) cell owns a mixture of diagonal Gaussians over
//! (log-f0, duration). Targets are drawn independently per phoneme given
//! its cell, so the exact conditional distribution of every position is
//! available to tests through [`CellLaw`].

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::data::UtteranceRecord;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    /// (log-f0, duration in frames)
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellLaw {
    pub components: Vec<Component>,
}

/// Half-up rounding to a frame count of at least one.
pub fn round_duration(d: f64) -> u32 {
    let r = (d + 0.5).floor();
    if r < 1.0 {
        1
    } else {
        r as u32
    }
}

impl CellLaw {
    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() {
            return Err(Error::contract("cell law has no components"));
        }
        let total: f64 = self.components.iter().map(|c| c.weight).sum();
        if (total - 1.0).abs() > 1e-9 || self.components.iter().any(|c| c.weight < 0.0) {
            return Err(Error::contract(format!(
                "component weights must be non-negative and sum to 1, got {total}"
            )));
        }
        for c in &self.components {
            if c.std.iter().chain(&c.mean).any(|v| !v.is_finite()) || c.std.iter().any(|&s| s < 0.0) {
                return Err(Error::contract(format!("invalid component {c:?}")));
            }
        }
        Ok(())
    }

    /// Mixture mean of (log-f0, duration) before duration rounding.
    pub fn mean(&self) -> [f64; 2] {
        let mut m = [0.0; 2];
        for c in &self.components {
            for (d, slot) in m.iter_mut().enumerate() {
                *slot += c.weight * c.mean[d];
            }
        }
        m
    }

    /// Mixture standard deviation per dimension (law of total variance).
    pub fn std(&self) -> [f64; 2] {
        let m = self.mean();
        let mut out = [0.0; 2];
        for (d, slot) in out.iter_mut().enumerate() {
            let second: f64 = self
                .components
                .iter()
                .map(|c| c.weight * (c.std[d] * c.std[d] + c.mean[d] * c.mean[d]))
                .sum();
            *slot = (second - m[d] * m[d]).max(0.0).sqrt();
        }
        out
    }

    /// Draw (log-f0, continuous duration).
    pub fn sample_continuous(&self, rng: &mut Rng) -> [f64; 2] {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = self.components.last().expect("validated law");
        for c in &self.components {
            acc += c.weight;
            if u < acc {
                chosen = c;
                break;
            }
        }
        let f = chosen.mean[0] + chosen.std[0] * rng::normal(rng);
        let d = chosen.mean[1] + chosen.std[1] * rng::normal(rng);
        [f, d]
    }

    pub fn sample(&self, rng: &mut Rng) -> (f64, u32) {
        let [f, d] = self.sample_continuous(rng);
        (f, round_duration(d))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_phonemes: usize,
    pub n_styles: usize,
    pub n_speakers: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub len_min: usize,
    pub len_max: usize,
    /// Keys the per-cell laws; independent of the corpus sampling seed.
    pub cell_seed: u64,
    /// Explicit laws, row-major over (phoneme, style). Overrides `cell_seed`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<CellLaw>>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_phonemes: 8,
            n_styles: 4,
            n_speakers: 4,
            n_train: 5000,
            n_dev: 200,
            n_test: 1000,
            len_min: 4,
            len_max: 12,
            cell_seed: 0,
            cells: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub train: Vec<UtteranceRecord>,
    pub dev: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
}

fn u(rng: &mut Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_phonemes == 0 || self.n_styles == 0 || self.n_speakers == 0 {
            return Err(Error::contract("phoneme, style and speaker counts must be positive"));
        }
        if self.len_min == 0 || self.len_min > self.len_max {
            return Err(Error::contract(format!(
                "invalid utterance length range [{}, {}]",
                self.len_min, self.len_max
            )));
        }
        if self.n_train + self.n_dev + self.n_test == 0 {
            return Err(Error::contract("all splits are empty"));
        }
        if let Some(cells) = &self.cells {
            if cells.len() != self.n_phonemes * self.n_styles {
                return Err(Error::contract(format!(
                    "{} explicit cells for {} phonemes x {} styles",
                    cells.len(),
                    self.n_phonemes,
                    self.n_styles
                )));
            }
            for c in cells {
                c.validate()?;
            }
        }
        Ok(())
    }

    /// The law of cell `(p, s)`: explicit if given, otherwise a pure function of `(cell_seed, p, s)`.
    pub fn cell(&self, p: usize, s: usize) -> Result<CellLaw> {
        if p >= self.n_phonemes || s >= self.n_styles {
            return Err(Error::contract(format!(
                "cell ({p}, {s}) outside {} phonemes x {} styles",
                self.n_phonemes, self.n_styles
            )));
        }
        if let Some(cells) = &self.cells {
            return Ok(cells[p * self.n_styles + s].clone());
        }
        let mut r = rng::stream(self.cell_seed, &format!("cell/{p}/{s}"));
        let f_center = u(&mut r, -0.25, 0.25);
        let f_gap = u(&mut r, 0.15, 0.30);
        let d_center = u(&mut r, 5.0, 10.0);
        let d_gap = u(&mut r, 1.5, 3.0);
        let w = u(&mut r, 0.3, 0.7);
        // whether the high-pitch mode is also the long one
        let sign = if r.random::<bool>() { 1.0 } else { -1.0 };
        let mut comp = |side: f64, weight: f64| Component {
            weight,
            mean: [f_center + side * f_gap, d_center + sign * side * d_gap],
            std: [u(&mut r, 0.04, 0.08), u(&mut r, 0.5, 1.0)],
        };
        let a = comp(-1.0, w);
        let b = comp(1.0, 1.0 - w);
        Ok(CellLaw { components: vec![a, b] })
    }

    pub fn cells(&self) -> Result<Vec<CellLaw>> {
        let mut out = Vec::with_capacity(self.n_phonemes * self.n_styles);
        for p in 0..self.n_phonemes {
            for s in 0..self.n_styles {
                out.push(self.cell(p, s)?);
            }
        }
        Ok(out)
    }
}

pub fn oracle_sample(p: usize, s: usize, spec: &SyntheticSpec, rng: &mut Rng) -> Result<(f64, u32)> {
    Ok(spec.cell(p, s)?.sample(rng))
}

pub fn oracle_conditional_mean(p: usize, s: usize, spec: &SyntheticSpec) -> Result<(f64, f64)> {
    let [f, d] = spec.cell(p, s)?.mean();
    Ok((f, d))
}

pub fn oracle_cell_std(p: usize, s: usize, spec: &SyntheticSpec) -> Result<(f64, f64)> {
    let [f, d] = spec.cell(p, s)?.std();
    Ok((f, d))
}

fn gen_split(spec: &SyntheticSpec, cells: &[CellLaw], seed: u64, name: &str, n: usize) -> Vec<UtteranceRecord> {
    (0..n)
        .map(|i| {
            let utt_id = format!("{name}-{i:06}");
            let mut r = rng::stream(seed, &format!("utt/{utt_id}"));
            let len = r.random_range(spec.len_min..=spec.len_max);
            let style = r.random_range(0..spec.n_styles);
            let speaker = r.random_range(0..spec.n_speakers);
            let phonemes: Vec<usize> = (0..len).map(|_| r.random_range(0..spec.n_phonemes)).collect();
            let (log_f0, duration) = phonemes
                .iter()
                .map(|&p| cells[p * spec.n_styles + style].sample(&mut r))
                .unzip();
            UtteranceRecord {
                utt_id,
                phonemes,
                style,
                speaker,
                log_f0,
                duration,
            }
        })
        .collect()
}

/// Train/dev/test splits; ids are `{split}-{index:06}`, so splits never share an id.
pub fn gen_corpus(spec: &SyntheticSpec, seed: u64) -> Result<Corpus> {
    spec.validate()?;
    let cells = spec.cells()?;
    Ok(Corpus {
        train: gen_split(spec, &cells, seed, "train", spec.n_train),
        dev: gen_split(spec, &cells, seed, "dev", spec.n_dev),
        test: gen_split(spec, &cells, seed, "test", spec.n_test),
    })
}
