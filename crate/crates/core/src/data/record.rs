use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One utterance with per-phoneme prosody targets.
///
/// `log_f0` is speaker-mean-normalized natural-log Hz; `duration` is frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub phonemes: Vec<usize>,
    pub style: usize,
    pub speaker: usize,
    pub log_f0: Vec<f64>,
    pub duration: Vec<u32>,
}

impl UtteranceRecord {
    pub fn len(&self) -> usize {
        self.phonemes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phonemes.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.duration.iter().map(|&d| d as usize).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.phonemes.len();
        if n == 0 {
            return Err(Error::contract(format!("{}: no phonemes", self.utt_id)));
        }
        if self.log_f0.len() != n || self.duration.len() != n {
            return Err(Error::contract(format!(
                "{}: {} phonemes but {} log-f0 values and {} durations",
                self.utt_id,
                n,
                self.log_f0.len(),
                self.duration.len()
            )));
        }
        if self.duration.contains(&0) {
            return Err(Error::contract(format!("{}: zero duration", self.utt_id)));
        }
        if self.log_f0.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("{}: non-finite log-f0", self.utt_id)));
        }
        Ok(())
    }
}

/// Frame-level input to the feature pipeline: raw f0 with voicing and a forced alignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub utt_id: String,
    /// Hz, 0 where unvoiced
    pub frame_f0: Vec<f64>,
    pub voicing: Vec<bool>,
    /// frames per phoneme
    pub alignment: Vec<u32>,
    pub speaker: usize,
    pub style: usize,
    pub phonemes: Vec<usize>,
}

impl FrameRecord {
    pub fn validate(&self) -> Result<()> {
        let frames = self.frame_f0.len();
        if self.voicing.len() != frames {
            return Err(Error::contract(format!(
                "{}: {} f0 frames but {} voicing flags",
                self.utt_id,
                frames,
                self.voicing.len()
            )));
        }
        if self.alignment.len() != self.phonemes.len() {
            return Err(Error::contract(format!(
                "{}: alignment covers {} phonemes, sequence has {}",
                self.utt_id,
                self.alignment.len(),
                self.phonemes.len()
            )));
        }
        let aligned: usize = self.alignment.iter().map(|&a| a as usize).sum();
        if aligned != frames {
            return Err(Error::contract(format!(
                "{}: alignment sums to {aligned} frames, utterance has {frames}",
                self.utt_id
            )));
        }
        for (i, (&f, &v)) in self.frame_f0.iter().zip(&self.voicing).enumerate() {
            if v && !(f > 0.0 && f.is_finite()) {
                return Err(Error::contract(format!("{}: voiced frame {i} has f0 {f}", self.utt_id)));
            }
        }
        Ok(())
    }
}
