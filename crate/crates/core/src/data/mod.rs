//! Records, labels, PTB-XL ingestion, fold handling, synthetic corpora and
//! the `IMLD` container.

mod container;
mod ptbxl;
mod record;
mod splits;
mod synth;
mod wfdb;

pub use container::{decode_records, encode_records, read_container, write_container, CONTAINER_MAGIC, CONTAINER_VERSION};
pub use ptbxl::{map_scp_to_superclass, parse_scp_codes, DatasetManifest, ManifestEntry, ScpMapping};
pub use record::{canonical_lead, EcgRecord, LabelSet, Subtypes, Superclass, NUM_SUPERCLASSES, STANDARD_LEADS};
pub use splits::{
    filter_mi_subtypes, fold_histogram, load_ptbxl, split_folds, split_subtype_study, Splits, NORM_PER_FOLD, TEST_FOLD,
    TRAIN_FOLDS, VALIDATION_FOLD,
};
pub use synth::{synth_generate, AbnormalityClass, Perturbation, SynthConfig};
pub use wfdb::{
    export_wfdb, format_header, load_wfdb_record, parse_header, quantize_record, read_wfdb, write_wfdb, WfdbHeader,
    WfdbRecord, WfdbSignalSpec,
};
