//! Standardization, fixed-window beat segmentation and lead selection.

use std::fmt;
use std::str::FromStr;

use crate::data::{canonical_lead, EcgRecord};
use crate::error::{Error, Result};

/// Lower bound applied to per-channel standard deviations.
pub const STD_FLOOR: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SegmentationConfig {
    pub window_length: usize,
    pub expected_signal_length: usize,
}

impl SegmentationConfig {
    pub fn new(window_length: usize, expected_signal_length: usize) -> Result<Self> {
        if window_length == 0 || expected_signal_length == 0 {
            return Err(Error::config("window and signal length must be positive"));
        }
        if window_length > expected_signal_length {
            return Err(Error::config(format!(
                "window length {window_length} exceeds signal length {expected_signal_length}"
            )));
        }
        Ok(Self { window_length, expected_signal_length })
    }

    /// Number of whole windows, `floor(T / W)`.
    pub fn num_beats(&self) -> usize {
        self.expected_signal_length / self.window_length
    }
}

/// Non-overlapping windows cut from one channel.
#[derive(Clone, Debug, PartialEq)]
pub struct BeatMatrix<T> {
    pub beats: Vec<Vec<T>>,
    pub channel_index: usize,
}

impl<T: Copy> BeatMatrix<T> {
    pub fn num_beats(&self) -> usize {
        self.beats.len()
    }

    /// Concatenation of all beats, i.e. the segmented prefix of the channel.
    pub fn flatten(&self) -> Vec<T> {
        self.beats.concat()
    }
}

/// Beat `k` (0-based) spans samples `[k·W, (k+1)·W)`; a trailing remainder
/// shorter than `W` is dropped.
pub fn segment_beats<T: Copy>(
    channel_signal: &[T],
    channel_index: usize,
    config: &SegmentationConfig,
) -> Result<BeatMatrix<T>> {
    let w = config.window_length;
    if channel_signal.len() < w {
        return Err(Error::input(format!(
            "channel {channel_index} has {} samples, shorter than window {w}",
            channel_signal.len()
        )));
    }
    let beats = channel_signal.chunks_exact(w).map(<[T]>::to_vec).collect();
    Ok(BeatMatrix { beats, channel_index })
}

#[derive(Clone, Debug, PartialEq)]
pub struct StandardizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Per-channel mean and population standard deviation over every sample of
/// every training record.
pub fn fit_standardization(train_records: &[EcgRecord]) -> Result<StandardizationStats> {
    let first = train_records.first().ok_or_else(|| Error::input("cannot fit standardization on zero records"))?;
    let (m, t) = (first.num_leads(), first.num_samples());
    for r in train_records {
        if r.num_leads() != m || r.num_samples() != t {
            return Err(Error::input(format!(
                "record {} is {}×{}, expected {m}×{t}",
                r.record_id,
                r.num_leads(),
                r.num_samples()
            )));
        }
    }
    let count = (train_records.len() * t) as f64;
    let mut mean = vec![0.0; m];
    for r in train_records {
        for (acc, ch) in mean.iter_mut().zip(&r.signal) {
            *acc += ch.iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|v| *v /= count);
    let mut var = vec![0.0; m];
    for r in train_records {
        for ((acc, ch), mu) in var.iter_mut().zip(&r.signal).zip(&mean) {
            *acc += ch.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
        }
    }
    let std = var.into_iter().map(|v| (v / count).sqrt().max(STD_FLOOR)).collect();
    Ok(StandardizationStats { mean, std })
}

pub fn apply_standardization(record: &EcgRecord, stats: &StandardizationStats) -> Result<EcgRecord> {
    if record.num_leads() != stats.mean.len() {
        return Err(Error::dim(format!(
            "record {} has {} channels, statistics cover {}",
            record.record_id,
            record.num_leads(),
            stats.mean.len()
        )));
    }
    let mut out = record.clone();
    for ((ch, mu), sd) in out.signal.iter_mut().zip(&stats.mean).zip(&stats.std) {
        ch.iter_mut().for_each(|x| *x = (*x - mu) / sd);
    }
    Ok(out)
}

/// Named lead subsets used by the ablation harness.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LeadSet {
    Limb,
    Precordial,
    LeadsIIIIII,
    All12,
}

impl LeadSet {
    /// Fixed reporting order.
    pub const ALL: [LeadSet; 4] = [LeadSet::Limb, LeadSet::Precordial, LeadSet::LeadsIIIIII, LeadSet::All12];

    pub fn name(self) -> &'static str {
        match self {
            LeadSet::Limb => "limb",
            LeadSet::Precordial => "precordial",
            LeadSet::LeadsIIIIII => "I-II-III",
            LeadSet::All12 => "all12",
        }
    }

    pub fn leads(self) -> &'static [&'static str] {
        match self {
            LeadSet::Limb => &["I", "II", "III", "aVR", "aVL", "aVF"],
            LeadSet::Precordial => &["V1", "V2", "V3", "V4", "V5", "V6"],
            LeadSet::LeadsIIIIII => &["I", "II", "III"],
            LeadSet::All12 => &crate::data::STANDARD_LEADS,
        }
    }
}

impl fmt::Display for LeadSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LeadSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LeadSet::ALL
            .into_iter()
            .find(|l| l.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::input(format!("unknown lead set {s:?} (expected limb, precordial, I-II-III or all12)")))
    }
}

/// Keep exactly the requested leads, in the requested order.
pub fn select_leads(record: &EcgRecord, subset: &[&str]) -> Result<EcgRecord> {
    let mut signal = Vec::with_capacity(subset.len());
    let mut names = Vec::with_capacity(subset.len());
    for &lead in subset {
        let idx = record.lead_index(lead).ok_or_else(|| {
            Error::input(format!("record {} has no lead {lead:?} (available: {:?})", record.record_id, record.lead_names))
        })?;
        signal.push(record.signal[idx].clone());
        names.push(record.lead_names[idx].clone());
    }
    Ok(EcgRecord { signal, lead_names: names, ..record.clone() })
}

pub fn select_lead_set(record: &EcgRecord, set: LeadSet) -> Result<EcgRecord> {
    select_leads(record, set.leads())
}

/// Whether two lead names refer to the same lead.
pub fn same_lead(a: &str, b: &str) -> bool {
    canonical_lead(a) == canonical_lead(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{LabelSet, STANDARD_LEADS};
    use proptest::prelude::*;

    fn record(id: &str, signal: Vec<Vec<f64>>) -> EcgRecord {
        let names = (0..signal.len()).map(|i| STANDARD_LEADS[i].to_string()).collect();
        EcgRecord {
            record_id: id.into(),
            signal,
            lead_names: names,
            sampling_rate: 100.0,
            fold: Some(1),
            labels: LabelSet::default(),
        }
    }

    #[test]
    fn segmentation_counts() {
        let sig: Vec<f64> = (0..1000).map(f64::from).collect();
        let cfg = SegmentationConfig::new(50, 1000).unwrap();
        let m = segment_beats(&sig, 0, &cfg).unwrap();
        assert_eq!(m.num_beats(), 20);
        assert!(m.beats.iter().all(|b| b.len() == 50));
        assert_eq!(cfg.num_beats(), 20);

        let m = segment_beats(&sig[..50], 0, &cfg).unwrap();
        assert_eq!(m.beats, vec![sig[..50].to_vec()]);

        let m = segment_beats(&sig[..105], 3, &cfg).unwrap();
        assert_eq!(m.num_beats(), 2);
        assert_eq!(m.flatten(), sig[..100].to_vec());
        assert_eq!(m.channel_index, 3);

        assert!(matches!(segment_beats(&sig[..49], 0, &cfg), Err(Error::Input(_))));
        assert!(SegmentationConfig::new(60, 50).is_err());
    }

    #[test]
    fn standardization_of_constant_channel_clamps_std() {
        let r = record("a", vec![vec![5.0; 10]]);
        let s = fit_standardization(&[r]).unwrap();
        assert_eq!(s.mean, vec![5.0]);
        assert_eq!(s.std, vec![STD_FLOOR]);
        assert!(fit_standardization(&[]).is_err());
        let r = record("b", vec![vec![-1.0, 1.0, -1.0, 1.0]]);
        assert_eq!(fit_standardization(&[r]).unwrap().mean, vec![0.0]);
    }

    #[test]
    fn standardization_matches_two_pass_oracle() {
        let a = record("a", vec![vec![1.0, 2.0, 4.0, 8.0], vec![0.5, -0.5, 0.25, 3.0]]);
        let b = record("b", vec![vec![-3.0, 0.0, 1.0, 2.0], vec![1.5, 1.5, -2.0, 0.0]]);
        let s = fit_standardization(&[a.clone(), b.clone()]).unwrap();
        for c in 0..2 {
            let all: Vec<f64> = a.signal[c].iter().chain(&b.signal[c]).copied().collect();
            let n = all.len() as f64;
            let mu = all.iter().sum::<f64>() / n;
            let sd = (all.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n).sqrt();
            assert!((s.mean[c] - mu).abs() < 1e-12);
            assert!((s.std[c] - sd).abs() < 1e-12);
        }
        // Held-out 2×4 record, by hand: channel 0 mean 1.875, channel 1 mean 0.53125.
        let held = record("h", vec![vec![1.875, 0.0, 10.0, -1.0], vec![0.53125, 1.0, 2.0, 3.0]]);
        let z = apply_standardization(&held, &s).unwrap();
        assert_eq!(z.signal[0][0], 0.0);
        assert_eq!(z.signal[1][0], 0.0);
        assert!((z.signal[0][2] - (10.0 - 1.875) / s.std[0]).abs() < 1e-12);
        assert!((z.signal[1][3] - (3.0 - 0.53125) / s.std[1]).abs() < 1e-12);
        assert_eq!(z.labels, held.labels);
        assert_eq!(z.record_id, held.record_id);
    }

    #[test]
    fn identity_stats_and_self_fit() {
        let r = record("a", vec![vec![0.3, -2.0, 7.0, 1.0], vec![9.0, 9.5, 8.0, 10.0]]);
        let id = StandardizationStats { mean: vec![0.0; 2], std: vec![1.0; 2] };
        assert_eq!(apply_standardization(&r, &id).unwrap(), r);
        let z = apply_standardization(&r, &fit_standardization(std::slice::from_ref(&r)).unwrap()).unwrap();
        for ch in &z.signal {
            let mu = ch.iter().sum::<f64>() / 4.0;
            let var = ch.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / 4.0;
            assert!(mu.abs() < 1e-9 && (var.sqrt() - 1.0).abs() < 1e-9);
        }
        let short = StandardizationStats { mean: vec![0.0], std: vec![1.0] };
        assert!(matches!(apply_standardization(&r, &short), Err(Error::Dimension(_))));
    }

    #[test]
    fn lead_selection() {
        let full = record("a", (0..12).map(|i| vec![i as f64; 3]).collect());
        assert_eq!(select_lead_set(&full, LeadSet::All12).unwrap(), full);
        let limb = select_lead_set(&full, LeadSet::Limb).unwrap();
        assert_eq!(limb.num_leads(), 6);
        assert_eq!(select_lead_set(&full, LeadSet::LeadsIIIIII).unwrap().num_leads(), 3);
        let pre = select_lead_set(&full, LeadSet::Precordial).unwrap();
        assert_eq!(pre.signal[0], vec![6.0; 3]);

        let picked = select_leads(&full, &["AVF", "v2", "I"]).unwrap();
        assert_eq!(picked.lead_names, vec!["aVF", "V2", "I"]);
        assert_eq!(picked.signal[0], vec![5.0; 3]);
        assert!(matches!(select_leads(&full, &["V7"]), Err(Error::Input(_))));
        assert_eq!("i-ii-iii".parse::<LeadSet>().unwrap(), LeadSet::LeadsIIIIII);
        assert!(same_lead("aVL", "AVL"));
    }

    proptest! {
        #[test]
        fn concatenated_beats_reproduce_prefix(sig in proptest::collection::vec(-5.0f64..5.0, 1..300), w in 1usize..60) {
            prop_assume!(sig.len() >= w);
            let cfg = SegmentationConfig::new(w, sig.len()).unwrap();
            let m = segment_beats(&sig, 0, &cfg).unwrap();
            prop_assert_eq!(m.num_beats(), sig.len() / w);
            prop_assert_eq!(m.flatten(), sig[..m.num_beats() * w].to_vec());
        }

        #[test]
        fn selection_commutes_with_segmentation(seed in 0u64..1000, w in 1usize..10) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let full = record("p", (0..12).map(|_| (0..37).map(|_| rng.random::<f64>()).collect()).collect());
            let cfg = SegmentationConfig::new(w, 37).unwrap();
            let sub = select_lead_set(&full, LeadSet::Limb).unwrap();
            for (i, lead) in LeadSet::Limb.leads().iter().enumerate() {
                let a = segment_beats(&sub.signal[i], i, &cfg).unwrap().beats;
                let b = segment_beats(&full.signal[full.lead_index(lead).unwrap()], i, &cfg).unwrap().beats;
                prop_assert_eq!(a, b);
            }
        }

        #[test]
        fn fitted_standardization_centres_training_set(seed in 0u64..1000) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let recs: Vec<_> = (0..3)
                .map(|i| record(&i.to_string(), (0..2).map(|c| (0..20).map(|_| rng.random_range(-3.0..3.0) + c as f64 * 10.0).collect()).collect()))
                .collect();
            let s = fit_standardization(&recs).unwrap();
            let z: Vec<_> = recs.iter().map(|r| apply_standardization(r, &s).unwrap()).collect();
            for c in 0..2 {
                let all: Vec<f64> = z.iter().flat_map(|r| r.signal[c].clone()).collect();
                let mu = all.iter().sum::<f64>() / all.len() as f64;
                let var = all.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / all.len() as f64;
                prop_assert!(mu.abs() < 1e-6);
                prop_assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }
}
