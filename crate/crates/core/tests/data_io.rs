use std::collections::BTreeSet;
use std::path::PathBuf;

use imlenet::data::*;
use proptest::prelude::*;

fn record(id: usize, fold: u8, labels: LabelSet) -> EcgRecord {
    EcgRecord {
        record_id: format!("r{id}"),
        signal: vec![vec![id as f64; 4]],
        lead_names: vec!["I".into()],
        sampling_rate: 100.0,
        fold: Some(fold),
        labels,
    }
}

fn wfdb_strategy() -> impl Strategy<Value = WfdbRecord> {
    (1usize..=12, 1usize..=300, prop::sample::select(vec![100.0, 200.0, 1000.0]), -50i32..50).prop_flat_map(
        |(m, t, gain, baseline)| {
            prop::collection::vec(any::<i16>(), m * t).prop_map(move |samples| {
                let signals = (0..m)
                    .map(|c| WfdbSignalSpec {
                        file_name: "rec.dat".into(),
                        gain,
                        baseline,
                        units: "mV".into(),
                        adc_resolution: 16,
                        adc_zero: 0,
                        description: STANDARD_LEADS[c].into(),
                    })
                    .collect();
                WfdbRecord {
                    header: WfdbHeader { record_name: "rec".into(), sampling_rate: 100.0, num_samples: t, signals },
                    samples,
                }
            })
        },
    )
}

proptest! {
    #[test]
    fn wfdb_round_trip_is_exact(rec in wfdb_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let hea = write_wfdb(dir.path(), &rec).unwrap();
        let back = read_wfdb(&hea).unwrap();
        prop_assert_eq!(&back, &rec);
        let m = rec.num_signals();
        let phys = back.physical();
        for (c, ch) in phys.iter().enumerate() {
            let s = &rec.header.signals[c];
            for (i, v) in ch.iter().enumerate() {
                let raw = rec.samples[i * m + c];
                prop_assert_eq!(*v, (f64::from(raw) - f64::from(s.baseline)) / s.gain);
            }
        }
    }

    #[test]
    fn container_round_trip(n in 0usize..6, t in 1usize..50, seed in any::<u64>()) {
        let cfg = SynthConfig { num_records: n.max(1), num_leads: 3, num_samples: t.max(2), seed, beat_period: 10.0, ..Default::default() };
        let recs: Vec<EcgRecord> = synth_generate(&cfg).unwrap().into_iter().take(n).collect();
        let back = decode_records(&encode_records(&recs).unwrap()).unwrap();
        prop_assert_eq!(back.len(), recs.len());
        for (a, b) in back.iter().zip(&recs) {
            prop_assert_eq!(&a.record_id, &b.record_id);
            prop_assert_eq!(&a.labels, &b.labels);
            prop_assert_eq!(a.fold, b.fold);
            for (x, y) in a.signal.iter().flatten().zip(b.signal.iter().flatten()) {
                prop_assert_eq!(*x, *y as f32 as f64);
            }
        }
    }

    #[test]
    fn fold_split_partitions_records(extra in prop::collection::vec(1u8..=10, 0..80)) {
        let folds: Vec<u8> = (1..=10).chain(extra).collect();
        let recs: Vec<EcgRecord> = folds.iter().enumerate().map(|(i, &f)| record(i, f, LabelSet::with(&[Superclass::Norm]))).collect();
        let s = split_folds(recs.clone()).unwrap();
        prop_assert!(s.train.iter().all(|r| (1..=8).contains(&r.fold.unwrap())));
        prop_assert!(s.validation.iter().all(|r| r.fold == Some(9)));
        prop_assert!(s.test.iter().all(|r| r.fold == Some(10)));
        let ids: Vec<&str> = [&s.train, &s.validation, &s.test].iter().flat_map(|v| v.iter().map(|r| r.record_id.as_str())).collect();
        let unique: BTreeSet<&str> = ids.iter().copied().collect();
        prop_assert_eq!(ids.len(), recs.len());
        prop_assert_eq!(unique.len(), recs.len());
    }
}

fn subtype_labels(asmi: bool, imi: bool) -> LabelSet {
    let mut l = LabelSet::with(&[Superclass::Mi]);
    l.subtypes = Some(Subtypes { asmi, imi });
    l
}

#[test]
fn subtype_filter_caps_norm_per_fold_and_keeps_all_mi() {
    let mut recs = Vec::new();
    let mut id = 0;
    for fold in 1..=10u8 {
        let norms = if fold == 3 { 40 } else { 150 };
        for _ in 0..norms {
            recs.push(record(id, fold, LabelSet::with(&[Superclass::Norm])));
            id += 1;
        }
        for k in 0..7 {
            recs.push(record(id, fold, subtype_labels(k % 2 == 0, k % 3 == 0)));
            id += 1;
        }
        recs.push(record(id, fold, LabelSet::with(&[Superclass::Cd])));
        id += 1;
    }
    let kept = filter_mi_subtypes(recs.clone(), 11).unwrap();
    let hist = |pred: &dyn Fn(&EcgRecord) -> bool| {
        let mut h = [0usize; 10];
        kept.iter().filter(|r| pred(r)).for_each(|r| h[r.fold.unwrap() as usize - 1] += 1);
        h
    };
    let norm = hist(&|r| r.labels.has(Superclass::Norm));
    assert_eq!(norm, [100, 100, 40, 100, 100, 100, 100, 100, 100, 100]);
    let mi_in = recs.iter().filter(|r| r.labels.subtypes.is_some_and(|s| s.asmi || s.imi)).count();
    let mi_out = kept.iter().filter(|r| r.labels.subtypes.is_some_and(|s| s.asmi || s.imi)).count();
    assert_eq!(mi_in, mi_out);
    assert!(kept.iter().all(|r| !r.labels.has(Superclass::Cd)));
    assert_eq!(kept, filter_mi_subtypes(recs.clone(), 11).unwrap());
    assert_ne!(kept, filter_mi_subtypes(recs, 12).unwrap());
    let ids: Vec<usize> = kept.iter().map(|r| r.record_id[1..].parse().unwrap()).collect();
    assert!(ids.windows(2).all(|w| w[0] < w[1]));
}

#[test]
fn subtype_split_holds_out_tail_of_last_train_fold() {
    let recs: Vec<EcgRecord> = (0..100).map(|i| record(i, (i % 10) as u8 + 1, subtype_labels(true, false))).collect();
    let s = split_subtype_study(recs, 0.25).unwrap();
    assert_eq!(s.test.len(), 20);
    assert!(s.test.iter().all(|r| r.fold.unwrap() >= 9));
    assert_eq!(s.validation.len(), 3);
    assert!(s.validation.iter().all(|r| r.fold == Some(8)));
    assert_eq!(s.train.len(), 77);
    let val_ids: Vec<&str> = s.validation.iter().map(|r| r.record_id.as_str()).collect();
    assert_eq!(val_ids, ["r77", "r87", "r97"]);
}

#[test]
fn exported_synthetic_record_reloads_within_quantization() {
    let rec = synth_generate(&SynthConfig { num_records: 1, num_leads: 12, num_samples: 300, ..Default::default() }).unwrap().remove(0);
    let dir = tempfile::tempdir().unwrap();
    let hea = export_wfdb(dir.path(), &rec, 1000.0).unwrap();
    let back = load_wfdb_record(&hea).unwrap();
    assert_eq!(back.lead_names, rec.lead_names);
    for (a, b) in back.signal.iter().flatten().zip(rec.signal.iter().flatten()) {
        assert!((a - b).abs() <= 0.5e-3 + 1e-12);
    }
}

fn ptbxl_root() -> Option<PathBuf> {
    std::env::var_os("IMLENET_PTBXL_DIR").map(PathBuf::from)
}

#[test]
#[ignore = "needs a PTB-XL download in IMLENET_PTBXL_DIR"]
fn ptbxl_diagnostic_subset_counts() {
    let root = ptbxl_root().expect("IMLENET_PTBXL_DIR");
    let manifest = DatasetManifest::load(&root.join("ptbxl_database.csv")).unwrap();
    let mapping = ScpMapping::load(&root.join("scp_statements.csv")).unwrap();
    let recs = load_ptbxl(&root, &manifest, &mapping).unwrap();
    assert_eq!(fold_histogram(&recs).unwrap().iter().sum::<usize>(), 21430);
    let sub = filter_mi_subtypes(recs, 42).unwrap();
    let asmi = sub.iter().filter(|r| r.labels.subtypes.is_some_and(|s| s.asmi)).count();
    let imi = sub.iter().filter(|r| r.labels.subtypes.is_some_and(|s| s.imi)).count();
    let norm = sub.iter().filter(|r| r.labels.subtypes.is_none_or(|s| !s.asmi && !s.imi)).count();
    assert_eq!((asmi, imi, norm), (1344, 916, 1000));
}
