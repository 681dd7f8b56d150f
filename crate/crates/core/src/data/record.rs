use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diagnostic superclasses in the canonical column order used everywhere
/// (labels, score tables, reports).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Superclass {
    Norm,
    Mi,
    Sttc,
    Cd,
    Hyp,
}

pub const NUM_SUPERCLASSES: usize = 5;

impl Superclass {
    pub const ALL: [Superclass; NUM_SUPERCLASSES] =
        [Superclass::Norm, Superclass::Mi, Superclass::Sttc, Superclass::Cd, Superclass::Hyp];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Superclass::Norm => "NORM",
            Superclass::Mi => "MI",
            Superclass::Sttc => "STTC",
            Superclass::Cd => "CD",
            Superclass::Hyp => "HYP",
        }
    }
}

impl fmt::Display for Superclass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Superclass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Superclass::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::input(format!("unknown superclass {s:?}")))
    }
}

/// MI subtype flags, present only when subtype annotations were derived.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtypes {
    pub asmi: bool,
    pub imi: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSet {
    pub superclasses: [bool; NUM_SUPERCLASSES],
    pub subtypes: Option<Subtypes>,
}

impl LabelSet {
    pub fn with(classes: &[Superclass]) -> Self {
        let mut l = LabelSet::default();
        for c in classes {
            l.superclasses[c.index()] = true;
        }
        l
    }

    pub fn has(&self, c: Superclass) -> bool {
        self.superclasses[c.index()]
    }

    pub fn set(&mut self, c: Superclass) {
        self.superclasses[c.index()] = true;
    }

    pub fn any(&self) -> bool {
        self.superclasses.iter().any(|&b| b)
    }

    /// Targets as 0/1 floats in canonical class order.
    pub fn targets(&self) -> [f64; NUM_SUPERCLASSES] {
        self.superclasses.map(|b| if b { 1.0 } else { 0.0 })
    }
}

/// One multi-lead recording: `signal[c][t]` in millivolts.
#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    pub signal: Vec<Vec<f64>>,
    pub lead_names: Vec<String>,
    pub sampling_rate: f64,
    pub fold: Option<u8>,
    pub labels: LabelSet,
}

impl EcgRecord {
    pub fn num_leads(&self) -> usize {
        self.signal.len()
    }

    pub fn num_samples(&self) -> usize {
        self.signal.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        if self.signal.is_empty() {
            return Err(Error::input(format!("record {}: no channels", self.record_id)));
        }
        let t = self.num_samples();
        if self.signal.iter().any(|ch| ch.len() != t) {
            return Err(Error::input(format!("record {}: channels differ in length", self.record_id)));
        }
        if self.lead_names.len() != self.signal.len() {
            return Err(Error::input(format!(
                "record {}: {} lead names for {} channels",
                self.record_id,
                self.lead_names.len(),
                self.signal.len()
            )));
        }
        if let Some(f) = self.fold {
            if !(1..=10).contains(&f) {
                return Err(Error::input(format!("record {}: fold {f} outside 1..=10", self.record_id)));
            }
        }
        Ok(())
    }

    /// Index of a lead by case-insensitive name.
    pub fn lead_index(&self, name: &str) -> Option<usize> {
        let want = canonical_lead(name);
        self.lead_names.iter().position(|l| canonical_lead(l) == want)
    }
}

/// Case-folded lead key ("aVF", "AVF" and "avf" compare equal).
pub fn canonical_lead(name: &str) -> String {
    name.trim().to_ascii_uppercase()
}

/// The standard twelve leads in PTB-XL order.
pub const STANDARD_LEADS: [&str; 12] =
    ["I", "II", "III", "aVR", "aVL", "aVF", "V1", "V2", "V3", "V4", "V5", "V6"];
