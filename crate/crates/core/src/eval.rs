//! Objective prosody metrics: pooled standard deviations and histogram
//! Jensen-Shannon divergence against oracle features.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::UtteranceRecord;
use crate::error::{Error, Result};

/// Bin counts reported next to the main JSD so binning effects are visible.
pub const SENSITIVITY_BINS: [usize; 3] = [32, 64, 128];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HistogramSpec {
    pub n_bins: usize,
    /// Total widening of the joint range, split evenly between both ends.
    pub expand: f64,
    /// Mass added to every bin before normalizing.
    pub alpha: f64,
    /// Largest duration with its own bin; longer durations share one overflow bin.
    pub duration_cap: u32,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self {
            n_bins: 64,
            expand: 0.01,
            alpha: 1e-6,
            duration_cap: 40,
        }
    }
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_bins == 0 || self.duration_cap == 0 {
            return Err(Error::contract("n_bins and duration_cap must be positive"));
        }
        if !(self.expand >= 0.0 && self.alpha > 0.0) {
            return Err(Error::contract("expand must be non-negative and alpha positive"));
        }
        Ok(())
    }

    /// Equal-width edges over the joint range of both samples.
    pub fn edges(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        self.validate()?;
        if a.is_empty() || b.is_empty() {
            return Err(Error::contract("histogram needs two non-empty samples"));
        }
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for &v in a.iter().chain(b) {
            if !v.is_finite() {
                return Err(Error::contract(format!("non-finite sample value {v}")));
            }
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let pad = if hi > lo { 0.5 * self.expand * (hi - lo) } else { 0.5 };
        let (lo, hi) = (lo - pad, hi + pad);
        let n = self.n_bins;
        Ok((0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect())
    }
}

/// Population standard deviation of all values.
pub fn pooled_std(values: &[f64]) -> Result<f64> {
    if values.len() < 2 {
        return Err(Error::contract(format!(
            "std needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    Ok((values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt())
}

/// Within-sequence first differences, concatenated.
pub fn delta_series<S: AsRef<[f64]>>(sequences: &[S]) -> Vec<f64> {
    sequences
        .iter()
        .flat_map(|s| s.as_ref().windows(2).map(|w| w[1] - w[0]))
        .collect()
}

/// Counts of `sample` in the bins defined by equal-width `edges`; values outside are clamped to the end bins.
pub fn histogram(sample: &[f64], edges: &[f64]) -> Vec<f64> {
    let n = edges.len() - 1;
    let (lo, hi) = (edges[0], edges[n]);
    let mut counts = vec![0.0; n];
    for &v in sample {
        let i = ((v - lo) / (hi - lo) * n as f64).floor();
        counts[(i.max(0.0) as usize).min(n - 1)] += 1.0;
    }
    counts
}

/// Add `alpha` to every bin and normalize.
fn smooth(counts: &[f64], alpha: f64) -> Vec<f64> {
    let total: f64 = counts.iter().map(|c| c + alpha).sum();
    counts.iter().map(|c| (c + alpha) / total).collect()
}

/// JSD in nats between two probability vectors.
pub fn jsd_probs(p: &[f64], q: &[f64]) -> f64 {
    let kl = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let (mut kp, mut kq) = (0.0, 0.0);
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        kp += kl(a, m);
        kq += kl(b, m);
    }
    (0.5 * kp + 0.5 * kq).clamp(0.0, std::f64::consts::LN_2)
}

fn jsd_counts(a: &[f64], b: &[f64], alpha: f64) -> f64 {
    jsd_probs(&smooth(a, alpha), &smooth(b, alpha))
}

/// Histogram JSD on shared joint-range edges.
pub fn jsd(a: &[f64], b: &[f64], spec: &HistogramSpec) -> Result<f64> {
    let edges = spec.edges(a, b)?;
    Ok(jsd_counts(&histogram(a, &edges), &histogram(b, &edges), spec.alpha))
}

/// Counts per frame count `1..=cap` plus a final overflow bin.
pub fn duration_histogram(durations: &[u32], cap: u32) -> Vec<f64> {
    let mut counts = vec![0.0; cap as usize + 1];
    for &d in durations {
        counts[(d.max(1).min(cap + 1) - 1) as usize] += 1.0;
    }
    counts
}

/// JSD between integer duration samples, one bin per frame count.
pub fn jsd_durations(a: &[u32], b: &[u32], spec: &HistogramSpec) -> Result<f64> {
    spec.validate()?;
    if a.is_empty() || b.is_empty() {
        return Err(Error::contract("histogram needs two non-empty samples"));
    }
    let cap = spec.duration_cap;
    Ok(jsd_counts(
        &duration_histogram(a, cap),
        &duration_histogram(b, cap),
        spec.alpha,
    ))
}

/// Bin edges and normalized (unsmoothed) masses, for plotting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
}

impl Histogram {
    fn from_counts(edges: Vec<f64>, counts: &[f64]) -> Self {
        let total: f64 = counts.iter().sum();
        Self {
            edges,
            mass: counts.iter().map(|c| c / total).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemStats {
    pub n_utterances: usize,
    pub n_phonemes: usize,
    pub std_logf0: f64,
    pub std_dur: f64,
    pub std_delta_logf0: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jsd_logf0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub jsd_dur: Option<f64>,
    /// log-f0 JSD keyed by bin count
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    pub jsd_logf0_by_bins: BTreeMap<usize, f64>,
    /// log-f0 histogram; for models, on the edges shared with the oracle
    pub hist_logf0: Histogram,
    /// duration histogram, bins `1..=cap` then overflow
    pub hist_dur: Histogram,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Divergences are in nats, bounded by ln 2.
    pub jsd_log_base: String,
    pub histogram: HistogramSpec,
    pub oracle: SystemStats,
    pub models: BTreeMap<String, SystemStats>,
}

struct Pooled {
    n_utterances: usize,
    log_f0: Vec<f64>,
    delta: Vec<f64>,
    duration: Vec<u32>,
}

impl Pooled {
    fn new(records: &[&UtteranceRecord]) -> Self {
        let seqs: Vec<&[f64]> = records.iter().map(|r| r.log_f0.as_slice()).collect();
        Self {
            n_utterances: records.len(),
            log_f0: seqs.iter().flat_map(|s| s.iter().copied()).collect(),
            delta: delta_series(&seqs),
            duration: records.iter().flat_map(|r| r.duration.iter().copied()).collect(),
        }
    }

    fn stats(&self, cap: u32) -> Result<SystemStats> {
        let dur: Vec<f64> = self.duration.iter().map(|&d| d as f64).collect();
        Ok(SystemStats {
            n_utterances: self.n_utterances,
            n_phonemes: self.log_f0.len(),
            std_logf0: pooled_std(&self.log_f0)?,
            std_dur: pooled_std(&dur)?,
            std_delta_logf0: pooled_std(&self.delta)?,
            jsd_logf0: None,
            jsd_dur: None,
            jsd_logf0_by_bins: BTreeMap::new(),
            hist_logf0: Histogram {
                edges: vec![],
                mass: vec![],
            },
            hist_dur: Histogram::from_counts(duration_edges(cap), &duration_histogram(&self.duration, cap)),
        })
    }
}

fn duration_edges(cap: u32) -> Vec<f64> {
    (0..=cap + 1).map(|k| k as f64 + 0.5).collect()
}

/// Records sorted by id, stable within an id, after checking they cover exactly the oracle's utterances.
fn canonical<'a>(oracle: &[UtteranceRecord], records: &'a [UtteranceRecord]) -> Result<Vec<&'a UtteranceRecord>> {
    let want: BTreeMap<&str, &UtteranceRecord> = oracle.iter().map(|r| (r.utt_id.as_str(), r)).collect();
    let have: BTreeSet<&str> = records.iter().map(|r| r.utt_id.as_str()).collect();
    let missing: Vec<String> = want
        .keys()
        .filter(|k| !have.contains(*k))
        .map(|k| k.to_string())
        .collect();
    let extra: Vec<String> = have
        .iter()
        .filter(|k| !want.contains_key(*k))
        .map(|k| k.to_string())
        .collect();
    if !missing.is_empty() || !extra.is_empty() {
        return Err(Error::Mismatch { missing, extra });
    }
    for r in records {
        r.validate()?;
        if r.phonemes != want[r.utt_id.as_str()].phonemes {
            return Err(Error::contract(format!(
                "{}: phoneme sequence differs from the oracle",
                r.utt_id
            )));
        }
    }
    let mut sorted: Vec<&UtteranceRecord> = records.iter().collect();
    sorted.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    Ok(sorted)
}

/// Statistics for the oracle and every model, with divergences against the oracle.
///
/// A model's records may repeat utterance ids (several draws); all draws are pooled.
pub fn build_report(
    oracle: &[UtteranceRecord],
    models: &BTreeMap<String, Vec<UtteranceRecord>>,
    spec: &HistogramSpec,
) -> Result<EvalReport> {
    spec.validate()?;
    let ids: BTreeSet<&str> = oracle.iter().map(|r| r.utt_id.as_str()).collect();
    if ids.len() != oracle.len() {
        return Err(Error::contract("oracle repeats an utterance id"));
    }
    let oracle_pool = Pooled::new(&canonical(oracle, oracle)?);
    let mut oracle_stats = oracle_pool.stats(spec.duration_cap)?;
    let own = spec.edges(&oracle_pool.log_f0, &oracle_pool.log_f0)?;
    oracle_stats.hist_logf0 = Histogram::from_counts(own.clone(), &histogram(&oracle_pool.log_f0, &own));

    let mut out = BTreeMap::new();
    for (name, records) in models {
        let pool = Pooled::new(&canonical(oracle, records)?);
        let mut stats = pool.stats(spec.duration_cap)?;
        let edges = spec.edges(&oracle_pool.log_f0, &pool.log_f0)?;
        let counts = histogram(&pool.log_f0, &edges);
        stats.jsd_logf0 = Some(jsd_counts(&histogram(&oracle_pool.log_f0, &edges), &counts, spec.alpha));
        stats.jsd_dur = Some(jsd_durations(&oracle_pool.duration, &pool.duration, spec)?);
        for n_bins in SENSITIVITY_BINS {
            let s = HistogramSpec { n_bins, ..spec.clone() };
            stats
                .jsd_logf0_by_bins
                .insert(n_bins, jsd(&oracle_pool.log_f0, &pool.log_f0, &s)?);
        }
        stats.hist_logf0 = Histogram::from_counts(edges, &counts);
        out.insert(name.clone(), stats);
    }
    Ok(EvalReport {
        jsd_log_base: "e".into(),
        histogram: spec.clone(),
        oracle: oracle_stats,
        models: out,
    })
}

impl EvalReport {
    /// Plain-text table: one row per model then the oracle.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<12} {:>11} {:>9} {:>13} {:>11} {:>9}",
            "system", "STD log-f0", "STD dur", "STD dlog-f0", "JSD log-f0", "JSD dur"
        );
        let opt = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        let rows = self
            .models
            .iter()
            .map(|(k, v)| (k.as_str(), v))
            .chain([("oracle", &self.oracle)]);
        for (name, st) in rows {
            let _ = writeln!(
                s,
                "{:<12} {:>11.4} {:>9.4} {:>13.4} {:>11} {:>9}",
                name,
                st.std_logf0,
                st.std_dur,
                st.std_delta_logf0,
                opt(st.jsd_logf0),
                opt(st.jsd_dur)
            );
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use statrs::distribution::{ContinuousCDF, Normal};
    use std::f64::consts::LN_2;

    #[test]
    fn std_examples() {
        assert_eq!(pooled_std(&[3.0; 5]).unwrap(), 0.0);
        assert_eq!(pooled_std(&[-1.0, 1.0]).unwrap(), 1.0);
        assert!(pooled_std(&[1.0]).is_err());
        let v = rng::normals(&mut rng::stream(0, "std"), 101);
        let m = v.iter().sum::<f64>() / 101.0;
        let mut ss = 0.0;
        for x in &v {
            ss += (x - m) * (x - m);
        }
        assert!((pooled_std(&v).unwrap() - (ss / 101.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn delta_examples() {
        assert_eq!(delta_series(&[vec![1.0, 1.0, 1.0]]), vec![0.0, 0.0]);
        assert_eq!(delta_series(&[vec![0.0, 1.0, 3.0]]), vec![1.0, 2.0]);
        assert_eq!(delta_series(&[vec![1.0, 2.0], vec![10.0, 14.0]]), vec![1.0, 4.0]);
        assert!(delta_series(&[vec![5.0]]).is_empty());
    }

    #[test]
    fn jsd_examples() {
        let spec = HistogramSpec::default();
        let a = rng::normals(&mut rng::stream(1, "a"), 1000);
        assert!(jsd(&a, &a, &spec).unwrap() < 1e-9);
        let far: Vec<f64> = a.iter().map(|v| v + 100.0).collect();
        assert!((jsd(&a, &far, &spec).unwrap() - LN_2).abs() < 1e-4);
        assert!(jsd(&[], &a, &spec).is_err());
        assert!((jsd_durations(&[1, 2], &[7, 8], &spec).unwrap() - LN_2).abs() < 1e-4);
        assert!(jsd_durations(&[3, 50, 4], &[3, 50, 4], &spec).unwrap() < 1e-9);
    }

    #[test]
    fn gaussian_pair_matches_binned_densities() {
        let mut r = rng::stream(2, "gauss-pair");
        let a = rng::normals(&mut r, 100_000);
        let b: Vec<f64> = rng::normals(&mut r, 100_000).iter().map(|v| v + 0.5).collect();
        let spec = HistogramSpec::default();
        let got = jsd(&a, &b, &spec).unwrap();
        let edges = spec.edges(&a, &b).unwrap();
        let mass = |mu: f64| {
            let n = Normal::new(mu, 1.0).unwrap();
            let mut m: Vec<f64> = edges.windows(2).map(|e| n.cdf(e[1]) - n.cdf(e[0])).collect();
            // tails fold into the end bins, as in the histogram
            m[0] += n.cdf(edges[0]);
            *m.last_mut().unwrap() += 1.0 - n.cdf(*edges.last().unwrap());
            m
        };
        let want = jsd_probs(&mass(0.0), &mass(0.5));
        assert!((got - want).abs() < 0.01, "{got} vs {want}");
    }

    fn record(id: &str, f0: Vec<f64>, dur: Vec<u32>) -> UtteranceRecord {
        UtteranceRecord {
            utt_id: id.into(),
            phonemes: vec![0; f0.len()],
            style: 0,
            speaker: 0,
            log_f0: f0,
            duration: dur,
        }
    }

    #[test]
    fn report_self_comparison_and_mismatch() {
        let oracle = vec![
            record("a", vec![0.1, 0.3, -0.2], vec![3, 5, 4]),
            record("b", vec![0.0, 0.4], vec![7, 2]),
        ];
        let mut models = BTreeMap::new();
        models.insert("self".to_string(), oracle.iter().rev().cloned().collect());
        let rep = build_report(&oracle, &models, &HistogramSpec::default()).unwrap();
        let m = &rep.models["self"];
        assert!(m.jsd_logf0.unwrap() < 1e-9 && m.jsd_dur.unwrap() < 1e-9);
        assert_eq!(m.std_logf0, rep.oracle.std_logf0);
        assert_eq!(m.std_delta_logf0, rep.oracle.std_delta_logf0);
        assert_eq!(m.jsd_logf0_by_bins.len(), 3);
        let table = rep.table();
        assert_eq!(table.lines().count(), 3);
        assert!(table.lines().last().unwrap().starts_with("oracle"));

        models.insert(
            "bad".to_string(),
            vec![oracle[0].clone(), record("z", vec![0.0], vec![1])],
        );
        match build_report(&oracle, &models, &HistogramSpec::default()) {
            Err(Error::Mismatch { missing, extra }) => {
                assert_eq!(missing, vec!["b".to_string()]);
                assert_eq!(extra, vec!["z".to_string()]);
            }
            other => panic!("{other:?}"),
        }
    }

    proptest! {
        #[test]
        fn jsd_is_symmetric_and_bounded(
            a in prop::collection::vec(-5.0f64..5.0, 1..200),
            b in prop::collection::vec(-5.0f64..5.0, 1..200),
        ) {
            let spec = HistogramSpec::default();
            let ab = jsd(&a, &b, &spec).unwrap();
            prop_assert_eq!(ab, jsd(&b, &a, &spec).unwrap());
            prop_assert!((0.0..=LN_2).contains(&ab));
            prop_assert!(jsd(&a, &a, &spec).unwrap() < 1e-9);
        }

        #[test]
        fn std_is_affine_equivariant(v in prop::collection::vec(-10.0f64..10.0, 2..100), k in -5.0f64..5.0, c in -50.0f64..50.0) {
            let base = pooled_std(&v).unwrap();
            let moved: Vec<f64> = v.iter().map(|x| k * x + c).collect();
            let got = pooled_std(&moved).unwrap();
            prop_assert!((got - k.abs() * base).abs() < 1e-9 * (1.0 + base * k.abs()) + 1e-9);
        }

        #[test]
        fn deltas_stay_inside_utterances(lens in prop::collection::vec(1usize..6, 1..10)) {
            // each utterance is constant at a distinct sentinel, so any cross-boundary difference is nonzero
            let seqs: Vec<Vec<f64>> = lens.iter().enumerate().map(|(i, &n)| vec![1000.0 * (i + 1) as f64; n]).collect();
            let d = delta_series(&seqs);
            prop_assert_eq!(d.len(), lens.iter().map(|n| n - 1).sum::<usize>());
            prop_assert!(d.iter().all(|&x| x == 0.0));
        }
    }
}
