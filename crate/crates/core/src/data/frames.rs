//! Toy frame-level acoustic targets.
//!
//! Each frame gets an 8-dimensional feature vector built from its phoneme,
//! the phoneme's log-f0, the speaker, the relative position inside the
//! phoneme, and a little frame noise. It stands in for a spectrogram.

use rand::Rng as _;

use crate::data::UtteranceRecord;
use crate::error::Result;
use crate::rng;
use crate::tensor::Tensor;

pub const FRAME_DIM: usize = 8;

const NOISE: f64 = 0.1;

fn table(seed: u64, label: &str, rows: usize) -> Vec<[f64; FRAME_DIM]> {
    let mut r = rng::stream(seed, label);
    (0..rows)
        .map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0)))
        .collect()
}

/// `[total_frames, FRAME_DIM]` targets for one utterance, a pure function of
/// `(seed, record)`.
pub fn frame_targets(rec: &UtteranceRecord, seed: u64) -> Result<Tensor> {
    rec.validate()?;
    let max_phone = rec.phonemes.iter().copied().max().unwrap_or(0);
    let phone = table(seed, "frames/phone", max_phone + 1);
    let speaker = table(seed, "frames/speaker", rec.speaker + 1)[rec.speaker];
    let [pitch, ramp] = {
        let t = table(seed, "frames/shape", 2);
        [t[0], t[1]]
    };
    let mut noise = rng::stream(seed, &format!("frames/noise/{}", rec.utt_id));
    let mut data = Vec::with_capacity(rec.total_frames() * FRAME_DIM);
    for ((&p, &f), &d) in rec.phonemes.iter().zip(&rec.log_f0).zip(&rec.duration) {
        for k in 0..d {
            let pos = (k as f64 + 0.5) / d as f64 - 0.5;
            for j in 0..FRAME_DIM {
                let v = phone[p][j] + 0.5 * speaker[j] + 3.0 * pitch[j] * f + ramp[j] * pos;
                data.push(v + NOISE * rng::normal(&mut noise));
            }
        }
    }
    Tensor::new(vec![rec.total_frames(), FRAME_DIM], data)
}
