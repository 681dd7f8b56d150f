//! WFDB header + format-16 signal files.

use std::path::{Path, PathBuf};

use crate::data::record::{EcgRecord, LabelSet};
use crate::error::{Error, Result};

/// WFDB's default gain when a header leaves it at zero or absent.
const DEFAULT_GAIN: f64 = 200.0;

#[derive(Clone, Debug, PartialEq)]
pub struct WfdbSignalSpec {
    pub file_name: String,
    pub gain: f64,
    pub baseline: i32,
    pub units: String,
    pub adc_resolution: u32,
    pub adc_zero: i32,
    pub description: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct WfdbHeader {
    pub record_name: String,
    pub sampling_rate: f64,
    pub num_samples: usize,
    pub signals: Vec<WfdbSignalSpec>,
}

/// Raw stored samples, channel-interleaved as on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct WfdbRecord {
    pub header: WfdbHeader,
    pub samples: Vec<i16>,
}

impl WfdbRecord {
    pub fn num_signals(&self) -> usize {
        self.header.signals.len()
    }

    pub fn physical(&self) -> Vec<Vec<f64>> {
        let m = self.num_signals();
        self.header
            .signals
            .iter()
            .enumerate()
            .map(|(c, s)| {
                self.samples
                    .iter()
                    .skip(c)
                    .step_by(m)
                    .map(|&v| (f64::from(v) - f64::from(s.baseline)) / s.gain)
                    .collect()
            })
            .collect()
    }

    pub fn into_ecg_record(self) -> EcgRecord {
        let signal = self.physical();
        EcgRecord {
            record_id: self.header.record_name.clone(),
            signal,
            lead_names: self.header.signals.iter().map(|s| s.description.clone()).collect(),
            sampling_rate: self.header.sampling_rate,
            fold: None,
            labels: LabelSet::default(),
        }
    }
}

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

fn field<'a>(fields: &[&'a str], i: usize, line: usize, what: &str) -> Result<&'a str> {
    fields.get(i).copied().ok_or_else(|| parse_err(line, format!("missing {what}")))
}

fn num<T: std::str::FromStr>(s: &str, line: usize, what: &str) -> Result<T> {
    s.parse().map_err(|_| parse_err(line, format!("bad {what} {s:?}")))
}

pub fn parse_header(text: &str) -> Result<WfdbHeader> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));

    let (ln, record_line) = lines.next().ok_or_else(|| parse_err(1, "empty header"))?;
    let f: Vec<&str> = record_line.split_whitespace().collect();
    let record_name = field(&f, 0, ln, "record name")?.split('/').next().unwrap_or_default().to_string();
    let nsig: usize = num(field(&f, 1, ln, "signal count")?, ln, "signal count")?;
    // "fs", "fs/counter_freq" or "fs(counter_base)"
    let fs_raw = f.get(2).copied().unwrap_or("250");
    let fs_str = fs_raw.split(['/', '(']).next().unwrap_or(fs_raw);
    let sampling_rate: f64 = num(fs_str, ln, "sampling frequency")?;
    let num_samples: usize = num(field(&f, 3, ln, "sample count")?, ln, "sample count")?;

    let mut signals = Vec::with_capacity(nsig);
    let mut last = ln;
    for _ in 0..nsig {
        let (ln, line) = lines.next().ok_or_else(|| parse_err(last + 1, format!("expected {nsig} signal lines")))?;
        signals.push(parse_signal_line(line, ln)?);
        last = ln;
    }
    Ok(WfdbHeader { record_name, sampling_rate, num_samples, signals })
}

fn parse_signal_line(line: &str, ln: usize) -> Result<WfdbSignalSpec> {
    let f: Vec<&str> = line.split_whitespace().collect();
    let file_name = field(&f, 0, ln, "file name")?.to_string();
    let fmt_raw = field(&f, 1, ln, "format")?;
    let fmt_digits: String = fmt_raw.chars().take_while(char::is_ascii_digit).collect();
    let format: u32 = num(&fmt_digits, ln, "format")?;
    if format != 16 {
        return Err(Error::UnsupportedFormat(format));
    }
    if fmt_raw.contains('+') {
        return Err(parse_err(ln, "byte offsets are not supported"));
    }

    let adc_resolution: u32 = match f.get(3) {
        Some(s) => num(s, ln, "ADC resolution")?,
        None => 16,
    };
    let adc_zero: i32 = match f.get(4) {
        Some(s) => num(s, ln, "ADC zero")?,
        None => 0,
    };

    // gain[(baseline)][/units]
    let (mut gain, mut baseline, mut units) = (DEFAULT_GAIN, adc_zero, "mV".to_string());
    if let Some(g) = f.get(2) {
        let (gb, u) = match g.split_once('/') {
            Some((gb, u)) => (gb, Some(u)),
            None => (*g, None),
        };
        let (gs, bs) = match gb.split_once('(') {
            Some((gs, rest)) => {
                let b = rest.strip_suffix(')').ok_or_else(|| parse_err(ln, format!("unclosed baseline in {g:?}")))?;
                (gs, Some(b))
            }
            None => (gb, None),
        };
        gain = num(gs, ln, "gain")?;
        if gain == 0.0 {
            gain = DEFAULT_GAIN;
        }
        if let Some(b) = bs {
            baseline = num(b, ln, "baseline")?;
        }
        if let Some(u) = u {
            units = u.to_string();
        }
    }
    let description = if f.len() > 8 { f[8..].join(" ") } else { String::new() };
    Ok(WfdbSignalSpec { file_name, gain, baseline, units, adc_resolution, adc_zero, description })
}

pub fn format_header(h: &WfdbHeader) -> String {
    let mut out = format!("{} {} {} {}\n", h.record_name, h.signals.len(), h.sampling_rate, h.num_samples);
    for s in &h.signals {
        out.push_str(&format!(
            "{} 16 {}({})/{} {} {} 0 0 0 {}\n",
            s.file_name, s.gain, s.baseline, s.units, s.adc_resolution, s.adc_zero, s.description
        ));
    }
    out
}

fn signal_path(header_path: &Path, h: &WfdbHeader) -> Result<PathBuf> {
    let first = h.signals.first().ok_or_else(|| Error::input("header declares no signals"))?;
    if h.signals.iter().any(|s| s.file_name != first.file_name) {
        return Err(Error::input("signals split across several files are not supported"));
    }
    Ok(header_path.parent().unwrap_or(Path::new(".")).join(&first.file_name))
}

/// Read a record given its `.hea` path (the extension may be omitted).
pub fn read_wfdb(header_path: &Path) -> Result<WfdbRecord> {
    let header_path = if header_path.extension().is_some_and(|e| e == "hea") {
        header_path.to_path_buf()
    } else {
        header_path.with_extension("hea")
    };
    let header = parse_header(&std::fs::read_to_string(&header_path)?)?;
    let bytes = std::fs::read(signal_path(&header_path, &header)?)?;
    let n = header.num_samples * header.signals.len();
    if bytes.len() < 2 * n {
        return Err(std::io::Error::new(
            std::io::ErrorKind::UnexpectedEof,
            format!("signal file holds {} bytes, header needs {}", bytes.len(), 2 * n),
        )
        .into());
    }
    let samples = bytes[..2 * n].chunks_exact(2).map(|b| i16::from_le_bytes([b[0], b[1]])).collect();
    Ok(WfdbRecord { header, samples })
}

pub fn load_wfdb_record(header_path: &Path) -> Result<EcgRecord> {
    Ok(read_wfdb(header_path)?.into_ecg_record())
}

/// Write `<dir>/<record_name>.hea` and the signal file named in the header.
pub fn write_wfdb(dir: &Path, rec: &WfdbRecord) -> Result<PathBuf> {
    let h = &rec.header;
    if rec.samples.len() != h.num_samples * h.signals.len() {
        return Err(Error::dim(format!(
            "{} samples for {} signals x {} samples",
            rec.samples.len(),
            h.signals.len(),
            h.num_samples
        )));
    }
    let header_path = dir.join(format!("{}.hea", h.record_name));
    std::fs::write(&header_path, format_header(h))?;
    let bytes: Vec<u8> = rec.samples.iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(signal_path(&header_path, h)?, bytes)?;
    Ok(header_path)
}

/// Quantize a record with the given per-lead gain (units per mV) and zero
/// baseline. Values outside the i16 range saturate.
pub fn quantize_record(rec: &EcgRecord, gain: f64) -> Result<WfdbRecord> {
    rec.validate()?;
    let m = rec.num_leads();
    let t = rec.num_samples();
    let mut samples = vec![0i16; m * t];
    for (c, ch) in rec.signal.iter().enumerate() {
        for (i, &v) in ch.iter().enumerate() {
            samples[i * m + c] = (v * gain).round().clamp(f64::from(i16::MIN), f64::from(i16::MAX)) as i16;
        }
    }
    let signals = rec
        .lead_names
        .iter()
        .map(|name| WfdbSignalSpec {
            file_name: format!("{}.dat", rec.record_id),
            gain,
            baseline: 0,
            units: "mV".into(),
            adc_resolution: 16,
            adc_zero: 0,
            description: name.clone(),
        })
        .collect();
    let header = WfdbHeader { record_name: rec.record_id.clone(), sampling_rate: rec.sampling_rate, num_samples: t, signals };
    Ok(WfdbRecord { header, samples })
}

/// WFDB export of an in-memory record.
pub fn export_wfdb(dir: &Path, rec: &EcgRecord, gain: f64) -> Result<PathBuf> {
    write_wfdb(dir, &quantize_record(rec, gain)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const PTBXL_STYLE: &str = "00001_lr 2 100 3\n\
        00001_lr.dat 16 1000.0(0)/mV 16 0 -119 1508 0 I\n\
        00001_lr.dat 16 1000.0(0)/mV 16 0 -55 723 0 aVF\n";

    #[test]
    fn parses_ptbxl_style_header() {
        let h = parse_header(PTBXL_STYLE).unwrap();
        assert_eq!(h.record_name, "00001_lr");
        assert_eq!((h.sampling_rate, h.num_samples, h.signals.len()), (100.0, 3, 2));
        assert_eq!(h.signals[1].description, "aVF");
        assert_eq!(h.signals[0].gain, 1000.0);
        assert_eq!(h.signals[0].baseline, 0);
    }

    #[test]
    fn header_errors_carry_line_numbers() {
        let bad = "# comment\nrec 2 100 3\nrec.dat 16 1000(0)/mV 16 0 0 0 0 I\nrec.dat 16 abc/mV 16 0 0 0 0 II\n";
        match parse_header(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_header("rec 2 100 3\nrec.dat 16 1000 16 0 0 0 0 I\n"), Err(Error::Parse { line: 3, .. })));
        assert!(matches!(parse_header("rec x 100 3\n"), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_header("rec 1 100 3\nrec.dat 212 200 12 0 0 0 0 I\n"), Err(Error::UnsupportedFormat(212))));
    }

    #[test]
    fn baseline_defaults_to_adc_zero() {
        let h = parse_header("r 1 100 1\nr.dat 16 500/mV 16 7 0 0 0 V1\n").unwrap();
        assert_eq!((h.signals[0].gain, h.signals[0].baseline), (500.0, 7));
    }

    #[test]
    fn stored_value_to_millivolts() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("r.hea"), "r 1 100 2\nr.dat 16 1000(0)/mV 16 0 0 0 0 I\n").unwrap();
        std::fs::write(dir.path().join("r.dat"), [0x64, 0x00, 0x9c, 0xff]).unwrap();
        let rec = load_wfdb_record(&dir.path().join("r.hea")).unwrap();
        assert_eq!(rec.signal, vec![vec![0.1, -0.1]]);

        std::fs::write(dir.path().join("r.hea"), "r 1 100 2\nr.dat 16 1000(100)/mV 16 0 0 0 0 I\n").unwrap();
        assert_eq!(load_wfdb_record(&dir.path().join("r")).unwrap().signal[0][0], 0.0);
    }

    #[test]
    fn truncated_signal_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("r.hea"), "r 2 100 4\nr.dat 16 200 16 0 0 0 0 I\nr.dat 16 200 16 0 0 0 0 II\n")
            .unwrap();
        std::fs::write(dir.path().join("r.dat"), [0u8; 15]).unwrap();
        assert!(matches!(read_wfdb(&dir.path().join("r.hea")), Err(Error::Io(_))));
    }

    #[test]
    fn two_lead_four_sample_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let rec = EcgRecord {
            record_id: "rt".into(),
            signal: vec![vec![0.1, -0.25, 0.0, 1.5], vec![-3.0, 0.001, 0.002, 0.5]],
            lead_names: vec!["I".into(), "aVF".into()],
            sampling_rate: 100.0,
            fold: None,
            labels: LabelSet::default(),
        };
        let path = export_wfdb(dir.path(), &rec, 1000.0).unwrap();
        let back = load_wfdb_record(&path).unwrap();
        assert_eq!(back.signal, rec.signal);
        assert_eq!(back.lead_names, rec.lead_names);
        assert_eq!(back.sampling_rate, 100.0);
    }
}
