//! Conditioning encoder and length regulator.
//!
//! Each position sees the embeddings of a centered window of phonemes
//! (zero-padded at utterance edges) together with the style embedding,
//! projected to `out_dim` and refined by a residual MLP.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{linear_named, residual_mlp, Bound, Init, ParameterStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const PREFIX: &str = "enc";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub phone_vocab: usize,
    pub style_vocab: usize,
    pub phone_dim: usize,
    pub style_dim: usize,
    pub context_width: usize,
    pub hidden: usize,
    pub depth: usize,
    pub out_dim: usize,
}

impl EncoderConfig {
    pub fn new(phone_vocab: usize, style_vocab: usize) -> Self {
        Self {
            phone_vocab,
            style_vocab,
            phone_dim: 16,
            style_dim: 8,
            context_width: 5,
            hidden: 64,
            depth: 2,
            out_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.phone_vocab,
            self.style_vocab,
            self.phone_dim,
            self.style_dim,
            self.hidden,
            self.depth,
            self.out_dim,
        ];
        if dims.contains(&0) {
            return Err(Error::contract("encoder sizes must all be at least 1"));
        }
        if self.context_width.is_multiple_of(2) {
            return Err(Error::contract(format!(
                "context_width must be odd, got {}",
                self.context_width
            )));
        }
        Ok(())
    }

    fn input_dim(&self) -> usize {
        self.context_width * self.phone_dim + self.style_dim
    }

    pub fn init(&self, init: &mut Init) -> Result<()> {
        self.validate()?;
        init.embedding(&format!("{PREFIX}.phone"), self.phone_vocab, self.phone_dim)?;
        init.embedding(&format!("{PREFIX}.style"), self.style_vocab, self.style_dim)?;
        init.linear(&format!("{PREFIX}.in"), self.input_dim(), self.out_dim)?;
        init.residual_mlp(&format!("{PREFIX}.mlp"), self.out_dim, self.hidden, self.depth)
    }
}

/// Encoder output for a batch of utterances stacked along rows.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningSequence {
    pub values: Tensor,
    pub lengths: Vec<usize>,
}

fn check_id(id: usize, size: usize) -> Result<()> {
    if id >= size {
        return Err(Error::Index { index: id, size });
    }
    Ok(())
}

/// Encode utterances given as `(phonemes, style)` pairs; rows are stacked in input order.
pub fn encode_batch(tape: &mut Tape, params: &Bound, cfg: &EncoderConfig, batch: &[(&[usize], usize)]) -> Result<Var> {
    cfg.validate()?;
    if batch.is_empty() || batch.iter().any(|(p, _)| p.is_empty()) {
        return Err(Error::contract("encode needs at least one phoneme per utterance"));
    }
    let half = cfg.context_width / 2;
    let mut windows: Vec<Vec<Option<usize>>> = vec![Vec::new(); cfg.context_width];
    let mut styles = Vec::new();
    for &(phonemes, style) in batch {
        check_id(style, cfg.style_vocab)?;
        for &p in phonemes {
            check_id(p, cfg.phone_vocab)?;
        }
        let n = phonemes.len() as isize;
        for i in 0..n {
            for (k, w) in windows.iter_mut().enumerate() {
                let j = i + k as isize - half as isize;
                w.push((0..n).contains(&j).then(|| phonemes[j as usize]));
            }
            styles.push(Some(style));
        }
    }
    let phone_table = params.get(&format!("{PREFIX}.phone.weight"))?;
    let style_table = params.get(&format!("{PREFIX}.style.weight"))?;
    let mut parts = Vec::with_capacity(cfg.context_width + 1);
    for w in &windows {
        parts.push(tape.gather_rows(phone_table, w)?);
    }
    parts.push(tape.gather_rows(style_table, &styles)?);
    let x = tape.concat(&parts, 1)?;
    let h = linear_named(tape, params, &format!("{PREFIX}.in"), x)?;
    residual_mlp(tape, params, &format!("{PREFIX}.mlp"), h, cfg.depth)
}

/// Encode one utterance without recording gradients.
pub fn encode(
    phonemes: &[usize],
    style: usize,
    params: &ParameterStore,
    cfg: &EncoderConfig,
) -> Result<ConditioningSequence> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let c = encode_batch(&mut tape, &bound, cfg, &[(phonemes, style)])?;
    Ok(ConditioningSequence {
        values: tape.value(c).clone(),
        lengths: vec![phonemes.len()],
    })
}

fn regulate_ids(rows: usize, durations: &[u32]) -> Result<Vec<Option<usize>>> {
    if durations.len() != rows {
        return Err(Error::contract(format!(
            "{} durations for {rows} conditioning rows",
            durations.len()
        )));
    }
    if let Some(i) = durations.iter().position(|&d| d == 0) {
        return Err(Error::contract(format!("duration {i} is zero")));
    }
    Ok(durations
        .iter()
        .enumerate()
        .flat_map(|(i, &d)| std::iter::repeat_n(Some(i), d as usize))
        .collect())
}

/// Repeat row `i` of `c` `durations[i]` times.
pub fn length_regulate(c: &ConditioningSequence, durations: &[u32]) -> Result<Tensor> {
    let (rows, _) = c.values.dims2()?;
    c.values.gather_rows(&regulate_ids(rows, durations)?)
}

/// [`length_regulate`] on a tape, for batched training.
pub fn length_regulate_var(tape: &mut Tape, c: Var, durations: &[u32]) -> Result<Var> {
    let (rows, _) = tape.value(c).dims2()?;
    let ids = regulate_ids(rows, durations)?;
    tape.gather_rows(c, &ids)
}
