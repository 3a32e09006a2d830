//! Frame-level f0 to phoneme-level prosody targets.

use std::collections::BTreeMap;

use crate::data::{FrameRecord, UtteranceRecord};
use crate::error::{Error, Result};

/// Natural-log f0 per frame, linearly interpolated across unvoiced gaps.
/// Leading and trailing gaps hold the nearest voiced value.
pub fn interpolate_log_f0(frame_f0: &[f64], voicing: &[bool]) -> Result<Vec<f64>> {
    if frame_f0.len() != voicing.len() {
        return Err(Error::contract("f0 and voicing lengths differ"));
    }
    let voiced: Vec<usize> = (0..voicing.len()).filter(|&i| voicing[i]).collect();
    let (Some(&first), Some(&last)) = (voiced.first(), voiced.last()) else {
        return Err(Error::Pipeline("utterance has no voiced frames".into()));
    };
    let mut out = vec![0.0; frame_f0.len()];
    for &i in &voiced {
        if !(frame_f0[i] > 0.0) {
            return Err(Error::Pipeline(format!("voiced frame {i} has f0 {}", frame_f0[i])));
        }
        out[i] = frame_f0[i].ln();
    }
    let head = out[first];
    out[..first].fill(head);
    let tail = out[last];
    out[last + 1..].fill(tail);
    for pair in voiced.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (va, vb) = (out[a], out[b]);
        for (k, v) in out[a + 1..b].iter_mut().enumerate() {
            let w = (k + 1) as f64 / (b - a) as f64;
            *v = va + w * (vb - va);
        }
    }
    Ok(out)
}

/// Mean voiced-frame log-f0 per speaker.
pub fn speaker_log_f0_means(records: &[FrameRecord]) -> BTreeMap<usize, f64> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(r.speaker).or_default();
        for (&f, &v) in r.frame_f0.iter().zip(&r.voicing) {
            if v && f > 0.0 {
                e.0 += f.ln();
                e.1 += 1;
            }
        }
    }
    acc.into_iter()
        .filter(|(_, (_, n))| *n > 0)
        .map(|(k, (s, n))| (k, s / n as f64))
        .collect()
}

/// Phoneme-level speaker-normalized log-f0.
///
/// Without `speaker_mean`, the mean is taken over this utterance's voiced frames.
pub fn f0_pipeline(fr: &FrameRecord, speaker_mean: Option<f64>) -> Result<Vec<f64>> {
    fr.validate()?;
    let frames = interpolate_log_f0(&fr.frame_f0, &fr.voicing)?;
    let mean = match speaker_mean {
        Some(m) => m,
        None => speaker_log_f0_means(std::slice::from_ref(fr))[&fr.speaker],
    };
    let mut out = Vec::with_capacity(fr.alignment.len());
    let mut start = 0;
    for &n in &fr.alignment {
        let n = n as usize;
        if n == 0 {
            return Err(Error::contract(format!("{}: phoneme with zero frames", fr.utt_id)));
        }
        let avg = frames[start..start + n].iter().sum::<f64>() / n as f64;
        out.push(avg - mean);
        start += n;
    }
    Ok(out)
}

pub fn duration_from_alignment(fr: &FrameRecord) -> Result<Vec<u32>> {
    fr.validate()?;
    if fr.alignment.contains(&0) {
        return Err(Error::contract(format!("{}: phoneme with zero frames", fr.utt_id)));
    }
    Ok(fr.alignment.clone())
}

/// Convert frame records to prosody records, normalizing with speaker means
/// estimated on `train` only.
pub fn ingest(train: &[FrameRecord], records: &[FrameRecord]) -> Result<Vec<UtteranceRecord>> {
    let means = speaker_log_f0_means(train);
    records
        .iter()
        .map(|fr| {
            let mean = *means.get(&fr.speaker).ok_or_else(|| {
                Error::Pipeline(format!(
                    "{}: speaker {} has no voiced training frames",
                    fr.utt_id, fr.speaker
                ))
            })?;
            Ok(UtteranceRecord {
                utt_id: fr.utt_id.clone(),
                phonemes: fr.phonemes.clone(),
                style: fr.style,
                speaker: fr.speaker,
                log_f0: f0_pipeline(fr, Some(mean))?,
                duration: duration_from_alignment(fr)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn frame_record(f0: Vec<f64>, voicing: Vec<bool>, alignment: Vec<u32>) -> FrameRecord {
        FrameRecord {
            utt_id: "u".into(),
            phonemes: (0..alignment.len()).collect(),
            frame_f0: f0,
            voicing,
            alignment,
            speaker: 0,
            style: 0,
        }
    }

    #[test]
    fn constant_f0_normalizes_to_zero() {
        let fr = frame_record(vec![180.0; 6], vec![true; 6], vec![2, 4]);
        let out = f0_pipeline(&fr, Some(180f64.ln())).unwrap();
        assert_eq!(out, vec![0.0, 0.0]);
        // the estimated mean is a sum of six logs divided by six
        for v in f0_pipeline(&fr, None).unwrap() {
            assert!(v.abs() < 1e-14);
        }
    }

    #[test]
    fn midpoint_interpolation() {
        let f0 = vec![1f64.exp(), 0.0, 2f64.exp()];
        let out = interpolate_log_f0(&f0, &[true, false, true]).unwrap();
        assert_eq!(out[1], 1.5);
    }

    #[test]
    fn edges_hold_nearest_voiced() {
        let f0 = vec![0.0, 0.0, 100.0, 0.0, 200.0, 0.0];
        let out = interpolate_log_f0(&f0, &[false, false, true, false, true, false]).unwrap();
        assert_eq!(out[0], 100f64.ln());
        assert_eq!(out[1], 100f64.ln());
        assert_eq!(out[5], 200f64.ln());
    }

    #[test]
    fn all_unvoiced_is_an_error() {
        let fr = frame_record(vec![0.0; 3], vec![false; 3], vec![3]);
        assert!(matches!(f0_pipeline(&fr, Some(0.0)), Err(Error::Pipeline(_))));
    }

    /// Straightforward second implementation: for each unvoiced frame, scan
    /// outwards for the closest voiced neighbours.
    fn reference_interp(f0: &[f64], voiced: &[bool]) -> Vec<f64> {
        let n = f0.len();
        (0..n)
            .map(|i| {
                if voiced[i] {
                    return f0[i].ln();
                }
                let left = (0..i).rev().find(|&j| voiced[j]);
                let right = (i + 1..n).find(|&j| voiced[j]);
                match (left, right) {
                    (Some(l), Some(r)) => {
                        let t = (i - l) as f64 / (r - l) as f64;
                        f0[l].ln() * (1.0 - t) + f0[r].ln() * t
                    }
                    (Some(l), None) => f0[l].ln(),
                    (None, Some(r)) => f0[r].ln(),
                    (None, None) => unreachable!(),
                }
            })
            .collect()
    }

    #[test]
    fn matches_reference_on_random_voicing() {
        for seed in 0..50 {
            let mut r = rng::stream(seed, "voicing");
            let n = r.random_range(2..40);
            let mut voicing: Vec<bool> = (0..n).map(|_| r.random_bool(0.6)).collect();
            let k = r.random_range(0..n);
            voicing[k] = true;
            let f0: Vec<f64> = voicing
                .iter()
                .map(|&v| if v { r.random_range(80.0..300.0) } else { 0.0 })
                .collect();
            let got = interpolate_log_f0(&f0, &voicing).unwrap();
            let want = reference_interp(&f0, &voicing);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "seed {seed}");
            }
        }
    }

    #[test]
    fn global_scaling_cancels_after_renormalization() {
        let mut r = rng::stream(3, "scale");
        let mut recs = Vec::new();
        for u in 0..5 {
            let align: Vec<u32> = (0..6).map(|_| r.random_range(1..6)).collect();
            let n: usize = align.iter().map(|&a| a as usize).sum();
            let mut voicing: Vec<bool> = (0..n).map(|_| r.random_bool(0.7)).collect();
            voicing[0] = true;
            let f0 = voicing
                .iter()
                .map(|&v| if v { r.random_range(90.0..250.0) } else { 0.0 })
                .collect();
            let mut fr = frame_record(f0, voicing, align);
            fr.utt_id = format!("u{u}");
            fr.speaker = u % 2;
            recs.push(fr);
        }
        let base = ingest(&recs, &recs).unwrap();
        let k = 1.7319;
        let scaled: Vec<FrameRecord> = recs
            .iter()
            .map(|fr| FrameRecord {
                frame_f0: fr.frame_f0.iter().map(|f| f * k).collect(),
                ..fr.clone()
            })
            .collect();
        let moved = ingest(&scaled, &scaled).unwrap();
        for (a, b) in base.iter().zip(&moved) {
            for (x, y) in a.log_f0.iter().zip(&b.log_f0) {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn durations_copy_alignment() {
        let fr = frame_record(vec![100.0; 8], vec![true; 8], vec![3, 5]);
        let d = duration_from_alignment(&fr).unwrap();
        assert_eq!(d, vec![3, 5]);
        assert_eq!(d.iter().sum::<u32>() as usize, fr.frame_f0.len());
        let bad = frame_record(vec![100.0; 3], vec![true; 3], vec![3, 0]);
        assert!(matches!(duration_from_alignment(&bad), Err(Error::Contract(_))));
    }

    #[test]
    fn random_alignments_survive_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("frames.jsonl");
        let mut r = rng::stream(8, "align");
        let recs: Vec<FrameRecord> = (0..20)
            .map(|i| {
                let align: Vec<u32> = (0..r.random_range(1..10)).map(|_| r.random_range(1..9)).collect();
                let n = align.iter().sum::<u32>() as usize;
                let mut fr = frame_record(vec![120.0; n], vec![true; n], align);
                fr.utt_id = format!("f{i}");
                fr
            })
            .collect();
        crate::data::save_jsonl(&recs, &path).unwrap();
        let back: Vec<FrameRecord> = crate::data::load_jsonl(&path).unwrap();
        for (a, b) in recs.iter().zip(&back) {
            assert_eq!(duration_from_alignment(a).unwrap(), duration_from_alignment(b).unwrap());
        }
    }
}
