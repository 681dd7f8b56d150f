//! Synthetic ECG-like corpora with lead- and beat-local abnormalities.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal, Uniform};

use crate::config::{KvConfig, KvWriter};
use crate::data::record::{EcgRecord, LabelSet, Superclass, STANDARD_LEADS};
use crate::error::{Error, Result};

/// Where the added waveform sits in the beat.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    /// Extra T-wave amplitude (negative values invert it).
    TWave,
    /// Raised or depressed ST segment.
    StShift,
    /// Extra R-peak amplitude.
    QrsAmplitude,
}

impl Perturbation {
    pub fn name(self) -> &'static str {
        match self {
            Perturbation::TWave => "t_wave",
            Perturbation::StShift => "st_shift",
            Perturbation::QrsAmplitude => "qrs_amplitude",
        }
    }
}

impl std::str::FromStr for Perturbation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "t_wave" | "twave" => Ok(Perturbation::TWave),
            "st_shift" | "st" => Ok(Perturbation::StShift),
            "qrs_amplitude" | "qrs" => Ok(Perturbation::QrsAmplitude),
            _ => Err(Error::config(format!("unknown perturbation {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AbnormalityClass {
    pub label: Superclass,
    pub leads: Vec<usize>,
    /// Half-open range of beat indices that receive the perturbation.
    pub beats: (usize, usize),
    pub kind: Perturbation,
    pub amplitude: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub num_records: usize,
    pub num_leads: usize,
    pub num_samples: usize,
    pub sampling_rate: f64,
    /// Mean beat period in samples; each record jitters it by ±10 %.
    pub beat_period: f64,
    pub noise_std: f64,
    pub classes: Vec<AbnormalityClass>,
    /// Weights for (normal, classes[0], classes[1], ...).
    pub class_priors: Vec<f64>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_records: 100,
            num_leads: 6,
            num_samples: 500,
            sampling_rate: 100.0,
            beat_period: 80.0,
            noise_std: 0.02,
            classes: vec![AbnormalityClass {
                label: Superclass::Mi,
                leads: vec![1, 2],
                beats: (0, usize::MAX),
                kind: Perturbation::TWave,
                amplitude: -0.6,
            }],
            class_priors: vec![0.5, 0.5],
            seed: 42,
        }
    }
}

struct Bump {
    center: f64,
    amplitude: f64,
    width: f64,
}

/// P, Q, R, S, T as fractions of the beat period.
const TEMPLATE: [Bump; 5] = [
    Bump { center: 0.20, amplitude: 0.15, width: 0.025 },
    Bump { center: 0.36, amplitude: -0.10, width: 0.010 },
    Bump { center: 0.40, amplitude: 1.00, width: 0.012 },
    Bump { center: 0.44, amplitude: -0.25, width: 0.010 },
    Bump { center: 0.66, amplitude: 0.30, width: 0.045 },
];

impl Perturbation {
    fn bump(self, amplitude: f64) -> Bump {
        match self {
            Perturbation::TWave => Bump { center: TEMPLATE[4].center, amplitude, width: TEMPLATE[4].width },
            Perturbation::StShift => Bump { center: 0.53, amplitude, width: 0.05 },
            Perturbation::QrsAmplitude => Bump { center: TEMPLATE[2].center, amplitude, width: TEMPLATE[2].width },
        }
    }
}

fn gauss(u: f64, b: &Bump) -> f64 {
    let z = (u - b.center) / b.width;
    b.amplitude * (-0.5 * z * z).exp()
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_leads == 0 || self.num_samples == 0 {
            return Err(Error::config("synthetic records need at least one lead and one sample"));
        }
        if !(self.beat_period > 1.0 && self.sampling_rate > 0.0) {
            return Err(Error::config("beat_period must exceed 1 sample and sampling_rate be positive"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std must be finite and non-negative"));
        }
        for c in &self.classes {
            if let Some(&l) = c.leads.iter().find(|&&l| l >= self.num_leads) {
                return Err(Error::config(format!("affected lead {l} outside 0..{}", self.num_leads)));
            }
            if !c.amplitude.is_finite() {
                return Err(Error::config("perturbation amplitude must be finite"));
            }
            if c.beats.0 > c.beats.1 {
                return Err(Error::config("empty beat range"));
            }
        }
        if self.class_priors.len() != self.classes.len() + 1 {
            return Err(Error::config(format!(
                "{} class priors for {} abnormality classes (+1 normal)",
                self.class_priors.len(),
                self.classes.len()
            )));
        }
        if self.class_priors.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || self.class_priors.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::config("class priors must be non-negative with a positive sum"));
        }
        Ok(())
    }

    /// Read `key = value` settings. Abnormality classes are numbered from 1:
    /// `class1.label`, `class1.leads` (comma list), `class1.beats`
    /// (`start..end` or `all`), `class1.kind`, `class1.amplitude`,
    /// `class1.prior`; `normal_prior` weights the normal class. Giving any
    /// class replaces the default one.
    pub fn take_from(kv: &mut KvConfig) -> Result<Self> {
        let mut c = Self::default();
        kv.take("num_records", &mut c.num_records)?;
        kv.take("num_leads", &mut c.num_leads)?;
        kv.take("num_samples", &mut c.num_samples)?;
        kv.take("sampling_rate", &mut c.sampling_rate)?;
        kv.take("beat_period", &mut c.beat_period)?;
        kv.take("noise_std", &mut c.noise_std)?;
        kv.take("seed", &mut c.seed)?;
        let mut normal_prior = c.class_priors[0];
        kv.take("normal_prior", &mut normal_prior)?;
        if kv.contains("class1.label") {
            c.classes.clear();
            c.class_priors.truncate(1);
            let mut i = 1;
            while let Some(label) = kv.take_raw(&format!("class{i}.label")) {
                let key = |f: &str| format!("class{i}.{f}");
                let leads = match kv.take_raw(&key("leads")) {
                    Some(raw) => raw
                        .split(',')
                        .map(|l| l.trim().parse::<usize>().map_err(|e| Error::config(format!("{}: {e}", key("leads")))))
                        .collect::<Result<Vec<_>>>()?,
                    None => vec![0],
                };
                let beats = match kv.take_raw(&key("beats")).as_deref().map(str::trim) {
                    None | Some("all") => (0, usize::MAX),
                    Some(raw) => {
                        let (a, b) =
                            raw.split_once("..").ok_or_else(|| Error::config(format!("{} must be start..end", key("beats"))))?;
                        let parse = |s: &str| s.trim().parse::<usize>().map_err(|e| Error::config(format!("{}: {e}", key("beats"))));
                        (parse(a)?, parse(b)?)
                    }
                };
                let mut kind = Perturbation::TWave;
                if let Some(raw) = kv.take_raw(&key("kind")) {
                    kind = raw.parse()?;
                }
                let mut amplitude = -0.6;
                kv.take(&key("amplitude"), &mut amplitude)?;
                let mut prior = 0.5;
                kv.take(&key("prior"), &mut prior)?;
                c.classes.push(AbnormalityClass { label: label.parse()?, leads, beats, kind, amplitude });
                c.class_priors.push(prior);
                i += 1;
            }
        }
        c.class_priors[0] = normal_prior;
        c.validate()?;
        Ok(c)
    }

    pub fn write_to(&self, w: &mut KvWriter) {
        w.section("synthetic corpus")
            .kv("num_records", self.num_records)
            .kv("num_leads", self.num_leads)
            .kv("num_samples", self.num_samples)
            .kv("sampling_rate", self.sampling_rate)
            .kv("beat_period", self.beat_period)
            .kv("noise_std", self.noise_std)
            .kv("seed", self.seed)
            .kv("normal_prior", self.class_priors[0]);
        for (i, c) in self.classes.iter().enumerate() {
            let key = |f: &str| format!("class{}.{f}", i + 1);
            let leads: Vec<String> = c.leads.iter().map(usize::to_string).collect();
            let beats = if c.beats == (0, usize::MAX) { "all".to_string() } else { format!("{}..{}", c.beats.0, c.beats.1) };
            w.kv(&key("label"), c.label)
                .kv(&key("leads"), leads.join(","))
                .kv(&key("beats"), beats)
                .kv(&key("kind"), c.kind.name())
                .kv(&key("amplitude"), c.amplitude)
                .kv(&key("prior"), self.class_priors[i + 1]);
        }
    }

    pub fn lead_names(&self) -> Vec<String> {
        (0..self.num_leads)
            .map(|i| STANDARD_LEADS.get(i).map_or_else(|| format!("L{}", i + 1), |s| s.to_string()))
            .collect()
    }
}

/// Everything about a record's waveform that does not depend on its class.
struct Base {
    period: f64,
    phase: f64,
    lead_gain: Vec<f64>,
}

fn render(cfg: &SynthConfig, base: &Base, lead: usize, bumps: &[Bump], beats: (usize, usize), out: &mut [f64]) {
    let t_len = cfg.num_samples as f64;
    let gain = base.lead_gain[lead];
    // beat k starts at phase + (k - 1) * period, so beat 0 may start before t = 0
    let mut k = 0usize;
    loop {
        let start = base.phase + (k as f64 - 1.0) * base.period;
        if start >= t_len {
            break;
        }
        if k >= beats.0 && k < beats.1 {
            let lo = (start - 0.5 * base.period).max(0.0).ceil() as usize;
            let hi = ((start + 1.5 * base.period).min(t_len - 1.0)).floor().max(0.0) as usize;
            for (t, o) in out.iter_mut().enumerate().take(hi + 1).skip(lo) {
                let u = (t as f64 - start) / base.period;
                *o += gain * bumps.iter().map(|b| gauss(u, b)).sum::<f64>();
            }
        }
        k += 1;
    }
}

/// Generate the corpus. Record `i` draws its base waveform and noise from
/// its own stream and its class from another, so records with the same
/// index share everything except the perturbation.
pub fn synth_generate(cfg: &SynthConfig) -> Result<Vec<EcgRecord>> {
    cfg.validate()?;
    let names = cfg.lead_names();
    let class_dist = WeightedIndex::new(&cfg.class_priors).map_err(|e| Error::config(e.to_string()))?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::config(e.to_string()))?;
    let unit = Uniform::new(0.0, 1.0).map_err(|e| Error::config(e.to_string()))?;

    let mut out = Vec::with_capacity(cfg.num_records);
    for i in 0..cfg.num_records {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2 * i as u64);
        let mut class_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        class_rng.set_stream(2 * i as u64 + 1);

        let period = cfg.beat_period * rng.random_range(0.9..1.1);
        let base = Base {
            period,
            phase: rng.random_range(0.0..period),
            lead_gain: (0..cfg.num_leads).map(|_| rng.random_range(0.6..1.4) * if rng.random_bool(0.2) { -1.0 } else { 1.0 }).collect(),
        };
        let wander_freq = rng.random_range(0.1..0.4) / cfg.sampling_rate;
        let mut signal = Vec::with_capacity(cfg.num_leads);
        for lead in 0..cfg.num_leads {
            let wander_amp = 0.05 * unit.sample(&mut rng);
            let wander_phase = std::f64::consts::TAU * unit.sample(&mut rng);
            let mut ch: Vec<f64> = (0..cfg.num_samples)
                .map(|t| {
                    wander_amp * (std::f64::consts::TAU * wander_freq * t as f64 + wander_phase).sin()
                        + noise.sample(&mut rng)
                })
                .collect();
            render(cfg, &base, lead, &TEMPLATE, (0, usize::MAX), &mut ch);
            signal.push(ch);
        }

        let class = class_dist.sample(&mut class_rng);
        let labels = if class == 0 {
            LabelSet::with(&[Superclass::Norm])
        } else {
            let c = &cfg.classes[class - 1];
            let bump = [c.kind.bump(c.amplitude)];
            for &lead in &c.leads {
                render(cfg, &base, lead, &bump, c.beats, &mut signal[lead]);
            }
            LabelSet::with(&[c.label])
        };
        out.push(EcgRecord {
            record_id: format!("synth{i:05}"),
            signal,
            lead_names: names.clone(),
            sampling_rate: cfg.sampling_rate,
            fold: Some((i % 10) as u8 + 1),
            labels,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_and_deterministic() {
        let cfg = SynthConfig { num_records: 0, ..Default::default() };
        assert!(synth_generate(&cfg).unwrap().is_empty());
        let cfg = SynthConfig { num_records: 5, ..Default::default() };
        assert_eq!(synth_generate(&cfg).unwrap(), synth_generate(&cfg).unwrap());
        let other = SynthConfig { seed: 7, ..cfg.clone() };
        assert_ne!(synth_generate(&cfg).unwrap()[0].signal, synth_generate(&other).unwrap()[0].signal);
    }

    #[test]
    fn perturbation_is_lead_local() {
        let normal = SynthConfig { num_records: 6, class_priors: vec![1.0, 0.0], ..Default::default() };
        let abnormal = SynthConfig { class_priors: vec![0.0, 1.0], ..normal.clone() };
        let a = synth_generate(&normal).unwrap();
        let b = synth_generate(&abnormal).unwrap();
        for (n, x) in a.iter().zip(&b) {
            assert!(n.labels.has(Superclass::Norm) && x.labels.has(Superclass::Mi));
            for lead in 0..6 {
                let same = n.signal[lead] == x.signal[lead];
                assert_eq!(same, lead != 1 && lead != 2, "lead {lead}");
            }
        }
    }

    #[test]
    fn beat_range_limits_perturbation() {
        let mut cfg = SynthConfig { num_records: 1, class_priors: vec![0.0, 1.0], ..Default::default() };
        cfg.classes[0].beats = (2, 3);
        let x = synth_generate(&cfg).unwrap();
        let n = synth_generate(&SynthConfig { class_priors: vec![1.0, 0.0], ..cfg.clone() }).unwrap();
        let diff: Vec<usize> =
            (0..cfg.num_samples).filter(|&t| (x[0].signal[1][t] - n[0].signal[1][t]).abs() > 1e-6).collect();
        assert!(!diff.is_empty());
        // a single beat's T wave spans well under one period
        assert!(diff.last().unwrap() - diff[0] < cfg.beat_period as usize);
    }

    #[test]
    fn kv_round_trip() {
        let text = "num_records = 7\nclass1.label = STTC\nclass1.leads = 0, 3\nclass1.beats = 1..4\n\
                    class1.kind = st\nclass1.amplitude = 0.2\nclass1.prior = 0.3\nclass2.label = HYP\n";
        let mut kv = KvConfig::parse(text).unwrap();
        let c = SynthConfig::take_from(&mut kv).unwrap();
        kv.finish().unwrap();
        assert_eq!(c.num_records, 7);
        assert_eq!(c.classes.len(), 2);
        assert_eq!(c.classes[0].leads, vec![0, 3]);
        assert_eq!(c.classes[0].beats, (1, 4));
        assert_eq!(c.classes[0].kind, Perturbation::StShift);
        assert_eq!(c.class_priors, vec![0.5, 0.3, 0.5]);
        let mut w = KvWriter::new();
        c.write_to(&mut w);
        let mut kv = KvConfig::parse(&w.finish()).unwrap();
        assert_eq!(SynthConfig::take_from(&mut kv).unwrap(), c);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = SynthConfig::default();
        cfg.classes[0].leads = vec![6];
        assert!(synth_generate(&cfg).is_err());
        let cfg = SynthConfig { class_priors: vec![1.0], ..Default::default() };
        assert!(synth_generate(&cfg).is_err());
        let mut cfg = SynthConfig::default();
        cfg.classes[0].amplitude = f64::NAN;
        assert!(synth_generate(&cfg).is_err());
    }
}
