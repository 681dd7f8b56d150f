//! PTB-XL metadata: the record table and SCP statement definitions.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use crate::data::record::{LabelSet, Subtypes, Superclass};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub record_id: String,
    /// Relative WFDB record path without extension, e.g. `records100/00000/00001_lr`.
    pub path: PathBuf,
    pub fold: u8,
    pub scp_codes: Vec<(String, f64)>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

fn column(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Parse { line: 1, msg: format!("missing column {name:?}") })
}

fn row_line(row: &csv::StringRecord) -> usize {
    row.position().map_or(0, |p| p.line() as usize)
}

/// Parse the `{'CODE': likelihood, ...}` map serialized in the metadata table.
pub fn parse_scp_codes(raw: &str) -> std::result::Result<Vec<(String, f64)>, String> {
    let inner = raw
        .trim()
        .strip_prefix('{')
        .and_then(|s| s.strip_suffix('}'))
        .ok_or_else(|| format!("scp_codes not a braced map: {raw:?}"))?;
    let mut out = Vec::new();
    for item in inner.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (k, v) = item.split_once(':').ok_or_else(|| format!("bad scp entry {item:?}"))?;
        let code = k.trim().trim_matches(|c| c == '\'' || c == '"');
        let likelihood: f64 = v.trim().parse().map_err(|_| format!("bad likelihood in {item:?}"))?;
        out.push((code.to_string(), likelihood));
    }
    Ok(out)
}

impl DatasetManifest {
    /// Read the metadata table (`ecg_id`, `strat_fold`, `scp_codes` and the
    /// `filename_lr` column for 100 Hz records).
    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().flexible(false).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let id_col = column(&headers, "ecg_id")?;
        let fold_col = column(&headers, "strat_fold")?;
        let scp_col = column(&headers, "scp_codes")?;
        let file_col = column(&headers, "filename_lr")?;

        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for row in rdr.records() {
            let row = row?;
            let line = row_line(&row);
            let raw_id = row[id_col].trim();
            let record_id = match raw_id.parse::<f64>() {
                Ok(v) if v.fract() == 0.0 => format!("{}", v as i64),
                _ => raw_id.to_string(),
            };
            if !seen.insert(record_id.clone()) {
                return Err(Error::Parse { line, msg: format!("duplicate record id {record_id}") });
            }
            let fold_f: f64 = row[fold_col]
                .trim()
                .parse()
                .map_err(|_| Error::Parse { line, msg: format!("bad strat_fold {:?}", &row[fold_col]) })?;
            if !(1.0..=10.0).contains(&fold_f) || fold_f.fract() != 0.0 {
                return Err(Error::Parse { line, msg: format!("fold {fold_f} outside 1..=10") });
            }
            let scp_codes = parse_scp_codes(&row[scp_col]).map_err(|msg| Error::Parse { line, msg })?;
            entries.push(ManifestEntry {
                record_id,
                path: PathBuf::from(row[file_col].trim()),
                fold: fold_f as u8,
                scp_codes,
            });
        }
        Ok(Self { entries })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }
}

/// Code → superclass for the diagnostic statements, plus the set of every
/// known code (diagnostic or not).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScpMapping {
    diagnostic: BTreeMap<String, Superclass>,
    known: HashSet<String>,
}

const BUILTIN_DIAGNOSTIC: &[(Superclass, &[&str])] = &[
    (Superclass::Norm, &["NORM"]),
    (
        Superclass::Mi,
        &["IMI", "ASMI", "ILMI", "AMI", "ALMI", "INJAS", "LMI", "INJAL", "IPLMI", "IPMI", "INJIN", "INJLA", "PMI", "INJIL"],
    ),
    (
        Superclass::Sttc,
        &["NDT", "NST_", "DIG", "LNGQT", "ISC_", "ISCAL", "ISCIN", "ISCIL", "ISCAS", "ISCLA", "ANEUR", "EL", "ISCAN"],
    ),
    (Superclass::Cd, &["LAFB", "IRBBB", "1AVB", "IVCD", "CRBBB", "CLBBB", "LPFB", "WPW", "ILBBB", "3AVB", "2AVB"]),
    (Superclass::Hyp, &["LVH", "LAO/LAE", "RVH", "RAO/RAE", "SEHYP"]),
];

impl ScpMapping {
    /// The 44 PTB-XL diagnostic statements, for use without the statements file.
    pub fn builtin() -> Self {
        let mut m = Self::default();
        for (class, codes) in BUILTIN_DIAGNOSTIC {
            for code in *codes {
                m.insert(code, Some(*class));
            }
        }
        m
    }

    pub fn insert(&mut self, code: &str, class: Option<Superclass>) {
        self.known.insert(code.to_string());
        if let Some(c) = class {
            self.diagnostic.insert(code.to_string(), c);
        }
    }

    /// Read the statement-definition table. The first column holds the code;
    /// rows with `diagnostic` = 1 map through `diagnostic_class`.
    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let diag_col = column(&headers, "diagnostic")?;
        let class_col = column(&headers, "diagnostic_class")?;
        let mut m = Self::default();
        for row in rdr.records() {
            let row = row?;
            let line = row_line(&row);
            let code = row[0].trim();
            if code.is_empty() {
                return Err(Error::Parse { line, msg: "empty statement code".into() });
            }
            let diagnostic = row[diag_col].trim().parse::<f64>().is_ok_and(|v| v == 1.0);
            let class = if diagnostic {
                Some(row[class_col].parse::<Superclass>().map_err(|e| Error::Parse { line, msg: e.to_string() })?)
            } else {
                None
            };
            m.insert(code, class);
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn superclass(&self, code: &str) -> Option<Superclass> {
        self.diagnostic.get(code).copied()
    }

    pub fn is_known(&self, code: &str) -> bool {
        self.known.contains(code)
    }

    pub fn num_diagnostic(&self) -> usize {
        self.diagnostic.len()
    }

    /// Labels for one record. Likelihoods are ignored; unknown codes are
    /// logged and skipped; ASMI/IMI also set the subtype flags.
    pub fn map_codes(&self, codes: &[(String, f64)]) -> LabelSet {
        let mut labels = LabelSet { subtypes: Some(Subtypes::default()), ..Default::default() };
        for (code, _) in codes {
            match self.superclass(code) {
                Some(class) => labels.set(class),
                None if !self.is_known(code) => log::warn!("unknown SCP code {code:?} skipped"),
                None => {}
            }
            if let Some(sub) = labels.subtypes.as_mut() {
                match code.as_str() {
                    "ASMI" => sub.asmi = true,
                    "IMI" => sub.imi = true,
                    _ => {}
                }
            }
        }
        labels
    }
}

pub fn map_scp_to_superclass(codes: &[(String, f64)], mapping: &ScpMapping) -> LabelSet {
    mapping.map_codes(codes)
}
