//! `IMLD` record container.
//!
//! Layout (little-endian): magic `IMLD`, u32 version, u32 record count,
//! then per record: id string, u8 fold (0 = none), f64 sampling rate,
//! u8 superclass bitmask, u8 subtype byte (bit 0 present, bit 1 ASMI,
//! bit 2 IMI), u32 leads, u32 samples, lead-name strings, and the signal
//! as lead-major f32. Strings are u32 length + UTF-8.

use std::path::Path;

use crate::data::record::{EcgRecord, LabelSet, Subtypes, NUM_SUPERCLASSES};
use crate::error::{Error, Result};
use crate::numcore::ByteReader;

pub const CONTAINER_MAGIC: [u8; 4] = *b"IMLD";
pub const CONTAINER_VERSION: u32 = 1;

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn encode_records(records: &[EcgRecord]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CONTAINER_MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        r.validate()?;
        put_str(&mut out, &r.record_id);
        out.push(r.fold.unwrap_or(0));
        out.extend_from_slice(&r.sampling_rate.to_le_bytes());
        let mask = r.labels.superclasses.iter().enumerate().fold(0u8, |m, (i, &b)| m | (u8::from(b) << i));
        out.push(mask);
        out.push(r.labels.subtypes.map_or(0, |s| 1 | (u8::from(s.asmi) << 1) | (u8::from(s.imi) << 2)));
        out.extend_from_slice(&(r.num_leads() as u32).to_le_bytes());
        out.extend_from_slice(&(r.num_samples() as u32).to_le_bytes());
        for name in &r.lead_names {
            put_str(&mut out, name);
        }
        for ch in &r.signal {
            for &v in ch {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<EcgRecord>> {
    let mut r = ByteReader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != CONTAINER_MAGIC {
        return Err(Error::BadMagic { expected: CONTAINER_MAGIC, found: magic });
    }
    let version = r.u32("version")?;
    if version != CONTAINER_VERSION {
        return Err(Error::Version { expected: CONTAINER_VERSION, found: version });
    }
    let count = r.u32("record count")? as usize;
    let mut records = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let record_id = r.string("record id")?;
        let fold = match r.u8("fold")? {
            0 => None,
            f => Some(f),
        };
        let sampling_rate = r.f64("sampling rate")?;
        let mask = r.u8("labels")?;
        let mut superclasses = [false; NUM_SUPERCLASSES];
        for (i, s) in superclasses.iter_mut().enumerate() {
            *s = mask & (1 << i) != 0;
        }
        let sub = r.u8("subtypes")?;
        let subtypes = (sub & 1 != 0).then_some(Subtypes { asmi: sub & 2 != 0, imi: sub & 4 != 0 });
        let m = r.u32("lead count")? as usize;
        let t = r.u32("sample count")? as usize;
        let lead_names = (0..m).map(|_| r.string("lead name")).collect::<Result<Vec<_>>>()?;
        let mut signal = Vec::with_capacity(m);
        for _ in 0..m {
            let raw = r.take(t.checked_mul(4).ok_or_else(|| Error::Truncated("signal size".into()))?, "signal")?;
            signal.push(raw.chunks_exact(4).map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap()))).collect());
        }
        let rec = EcgRecord { record_id, signal, lead_names, sampling_rate, fold, labels: LabelSet { superclasses, subtypes } };
        rec.validate()?;
        records.push(rec);
    }
    if r.pos != bytes.len() {
        return Err(Error::input(format!("{} trailing bytes after container", bytes.len() - r.pos)));
    }
    Ok(records)
}

pub fn write_container(path: &Path, records: &[EcgRecord]) -> Result<()> {
    std::fs::write(path, encode_records(records)?)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Vec<EcgRecord>> {
    decode_records(&std::fs::read(path)?)
}
