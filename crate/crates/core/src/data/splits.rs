//! Fold-based splits and the MI-subtype subset.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::ptbxl::{DatasetManifest, ScpMapping};
use crate::data::record::{EcgRecord, Superclass};
use crate::data::wfdb::load_wfdb_record;
use crate::error::{Error, Result};

pub const TRAIN_FOLDS: std::ops::RangeInclusive<u8> = 1..=8;
pub const VALIDATION_FOLD: u8 = 9;
pub const TEST_FOLD: u8 = 10;
/// NORM records drawn per fold for the subtype study.
pub const NORM_PER_FOLD: usize = 100;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<EcgRecord>,
    pub validation: Vec<EcgRecord>,
    pub test: Vec<EcgRecord>,
}

fn fold_of(r: &EcgRecord) -> Result<u8> {
    match r.fold {
        Some(f) if (1..=10).contains(&f) => Ok(f),
        Some(f) => Err(Error::input(format!("record {}: fold {f} outside 1..=10", r.record_id))),
        None => Err(Error::input(format!("record {} has no fold", r.record_id))),
    }
}

/// Folds 1–8 train, 9 validation, 10 test; input order kept within a split.
pub fn split_folds(records: Vec<EcgRecord>) -> Result<Splits> {
    let mut s = Splits::default();
    for r in records {
        match fold_of(&r)? {
            VALIDATION_FOLD => s.validation.push(r),
            TEST_FOLD => s.test.push(r),
            _ => s.train.push(r),
        }
    }
    Ok(s)
}

/// Records counted per fold, index 0 = fold 1.
pub fn fold_histogram(records: &[EcgRecord]) -> Result<[usize; 10]> {
    let mut h = [0; 10];
    for r in records {
        h[fold_of(r)? as usize - 1] += 1;
    }
    Ok(h)
}

fn is_subtype(r: &EcgRecord) -> bool {
    r.labels.subtypes.is_some_and(|s| s.asmi || s.imi)
}

/// Keep ASMI/IMI records plus up to 100 NORM records per fold (chosen with
/// `seed`); everything else is dropped. Input order is preserved.
pub fn filter_mi_subtypes(records: Vec<EcgRecord>, seed: u64) -> Result<Vec<EcgRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; records.len()];
    for fold in 1..=10u8 {
        let mut norms = Vec::new();
        for (i, r) in records.iter().enumerate() {
            if fold_of(r)? != fold {
                continue;
            }
            if is_subtype(r) {
                keep[i] = true;
            } else if r.labels.has(Superclass::Norm) {
                norms.push(i);
            }
        }
        let k = NORM_PER_FOLD.min(norms.len());
        for j in sample(&mut rng, norms.len(), k) {
            keep[norms[j]] = true;
        }
    }
    Ok(records.into_iter().zip(keep).filter_map(|(r, k)| k.then_some(r)).collect())
}

/// Train on folds 1–8, test on folds 9–10. The last `validation_fraction`
/// of the fold-8 records (in input order) is held out for early stopping.
pub fn split_subtype_study(records: Vec<EcgRecord>, validation_fraction: f64) -> Result<Splits> {
    if !(0.0..1.0).contains(&validation_fraction) {
        return Err(Error::config(format!("validation fraction {validation_fraction} outside [0, 1)")));
    }
    let last_train = *TRAIN_FOLDS.end();
    let n_last = records.iter().filter(|r| r.fold == Some(last_train)).count();
    let n_val = (n_last as f64 * validation_fraction).round() as usize;
    let mut seen_last = 0;
    let mut s = Splits::default();
    for r in records {
        let fold = fold_of(&r)?;
        if fold > last_train {
            s.test.push(r);
        } else if fold == last_train {
            seen_last += 1;
            if seen_last > n_last - n_val {
                s.validation.push(r);
            } else {
                s.train.push(r);
            }
        } else {
            s.train.push(r);
        }
    }
    Ok(s)
}

/// Load every manifest record that carries at least one diagnostic
/// superclass. Records without one are outside the diagnostic task.
pub fn load_ptbxl(root: &Path, manifest: &DatasetManifest, mapping: &ScpMapping) -> Result<Vec<EcgRecord>> {
    let mut out = Vec::new();
    for e in &manifest.entries {
        let labels = mapping.map_codes(&e.scp_codes);
        if !labels.any() {
            continue;
        }
        let mut rec = load_wfdb_record(&root.join(&e.path))?;
        rec.record_id = e.record_id.clone();
        rec.fold = Some(e.fold);
        rec.labels = labels;
        out.push(rec);
    }
    Ok(out)
}
