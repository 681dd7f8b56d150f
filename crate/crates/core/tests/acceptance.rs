//! One test per acceptance criterion. Each prints a single
//! `criterion N: PASS|FAIL ...` line to stderr (bypassing libtest capture,
//! so the lines show up in plain `cargo test` output) and then asserts.

mod common;

use std::io::Write;
use std::path::Path;

use common::{accuracy_oracle, auc_oracle, f1_oracle, random_table};
use imlenet::cli::{run_cli, CHECKPOINT_FILE, HISTORY_FILE};
use imlenet::data::*;
use imlenet::metrics::{classwise_accuracy, max_f1, roc_auc};
use imlenet::model::{ForwardCtx, ImleNet, ModelConfig};
use imlenet::numcore::{Graph, Tensor};
use imlenet::preprocess::{apply_standardization, fit_standardization};
use imlenet::training::{init_model, train, LabelScheme, TrainConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// Criterion 1: max relative error of analytic vs central-difference gradients.
const GRAD_TOL: f64 = 1e-4;
/// Central-difference step.
const GRAD_STEP: f64 = 1e-5;
/// Floor on the relative-error denominator. Central differences carry
/// roundoff of about eps·|L|/h ≈ 1.6e-11 at this step, so gradients below
/// ~1.6e-7 cannot be resolved to GRAD_TOL relative; the floor turns those
/// entries into an absolute check at 1e-10.
const GRAD_DENOM_FLOOR: f64 = 1e-6;
/// Criterion 2: attention vectors sum to one.
const ATTN_SUM_TOL: f64 = 1e-6;
/// Criterion 5 thresholds.
const SYNTH_MIN_AUC: f64 = 0.95;
const SYNTH_MAX_EPOCHS: usize = 20;
const SYNTH_MIN_TOP2: f64 = 0.80;
/// Criterion 6: logits under channel permutation.
const PERM_TOL: f64 = 1e-9;
/// Criterion 8: Table 3 targets and tolerances.
const PTBXL_TARGET_MACRO_AUC: (f64, f64) = (0.9216, 0.02);
const PTBXL_TARGET_MEAN_ACC: (f64, f64) = (0.8885, 0.02);
const PTBXL_TARGET_MAX_F1: (f64, f64) = (0.8057, 0.03);

fn report(n: u32, pass: bool, detail: String) {
    let status = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n}: {status} {detail}");
}

fn normal_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn toy_config() -> ModelConfig {
    ModelConfig {
        window_length: 20,
        cnn_start_filters: 4,
        lstm_hidden: 4,
        attention_hidden: 4,
        dropout_rate: 0.0,
        ..Default::default()
    }
}

fn bce_loss(model: &ImleNet<f64>, x: &Tensor<f64>, y: &[f64]) -> f64 {
    let mut g = Graph::new();
    let vars = model.forward_batch(&mut g, &mut ForwardCtx::eval(), x).unwrap();
    let l = g.bce_with_logits(vars.logits, y).unwrap();
    g.value(l).data()[0]
}

#[test]
fn criterion_1_gradient_check() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = init_model::<f64>(toy_config(), 1).unwrap();
    let x = normal_tensor(&[2, 2, 100], &mut rng);
    let y: Vec<f64> = (0..10).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect();

    let mut g = Graph::new();
    let vars = model.forward_batch(&mut g, &mut ForwardCtx::eval(), &x).unwrap();
    let l = g.bce_with_logits(vars.logits, &y).unwrap();
    let analytic = g.backward(l).unwrap().flatten_trainable(model.params());

    let base = model.params().flatten_trainable();
    let mut worst = (0.0f64, 0usize);
    let (mut floored, mut floored_abs) = (0usize, 0.0f64);
    for i in 0..base.len() {
        let mut p = base.clone();
        p[i] = base[i] + GRAD_STEP;
        model.params_mut().assign_trainable(&p).unwrap();
        let plus = bce_loss(&model, &x, &y);
        p[i] = base[i] - GRAD_STEP;
        model.params_mut().assign_trainable(&p).unwrap();
        let minus = bce_loss(&model, &x, &y);
        let numeric = (plus - minus) / (2.0 * GRAD_STEP);
        let rel = (analytic[i] - numeric).abs() / analytic[i].abs().max(numeric.abs()).max(GRAD_DENOM_FLOOR);
        if rel > worst.0 {
            worst = (rel, i);
        }
        if analytic[i].abs().max(numeric.abs()) < GRAD_DENOM_FLOOR {
            floored += 1;
            floored_abs = floored_abs.max((analytic[i] - numeric).abs());
        }
    }
    model.params_mut().assign_trainable(&base).unwrap();
    let pass = worst.0 < GRAD_TOL;
    report(
        1,
        pass,
        format!(
            "{} parameters, max rel err {:.2e} (tol {GRAD_TOL:.0e}, denominator floor {GRAD_DENOM_FLOOR:.0e}; \
             {floored} entries below the floor, max abs err {floored_abs:.1e})",
            base.len(),
            worst.0
        ),
    );
    assert!(pass, "parameter {} has relative error {}", worst.1, worst.0);
}

#[test]
fn criterion_2_attention_normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for trial in 0..100 {
        let m = rng.random_range(1..=6);
        let w = [20, 32, 50][rng.random_range(0..3)];
        let n = rng.random_range(1..=6);
        let extra = rng.random_range(0..w);
        let cfg = ModelConfig { window_length: w, cnn_start_filters: 2, lstm_hidden: 3, attention_hidden: 3, ..Default::default() };
        let model = init_model::<f64>(cfg, 1000 + trial).unwrap();
        let x = normal_tensor(&[m, n * w + extra], &mut rng).map(|v| 3.0 * v);
        let out = model.forward(&x, &mut ForwardCtx::eval()).unwrap();
        let dev = |v: &[f64]| (v.iter().sum::<f64>() - 1.0).abs();
        worst = worst.max(dev(&out.channel_attention));
        for c in 0..m {
            worst = worst.max(dev(&out.rhythm_attention[c]));
            for a in &out.beat_attention[c] {
                worst = worst.max(dev(a));
            }
        }
    }
    let pass = worst < ATTN_SUM_TOL;
    report(2, pass, format!("100 trials, max |sum - 1| {worst:.2e} (tol {ATTN_SUM_TOL:.0e})"));
    assert!(pass);
}

#[test]
fn criterion_3_shape_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let model = init_model::<f64>(ModelConfig::default(), 3).unwrap();
    let x = normal_tensor(&[12, 1000], &mut rng);
    let out = model.forward(&x, &mut ForwardCtx::eval()).unwrap();
    let alpha = (out.beat_attention.len(), out.beat_attention[0].len(), out.beat_attention[0][0].len());
    let beta = (out.rhythm_attention.len(), out.rhythm_attention[0].len());
    let pass = out.logits.len() == 5
        && alpha == (12, 20, 13)
        && out.beat_attention.iter().all(|c| c.len() == 20 && c.iter().all(|a| a.len() == 13))
        && beta == (12, 20)
        && out.rhythm_attention.iter().all(|b| b.len() == 20)
        && out.channel_attention.len() == 12;
    report(
        3,
        pass,
        format!(
            "logits ({},) alpha {alpha:?} beta {beta:?} gamma ({},)",
            out.logits.len(),
            out.channel_attention.len()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_4_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let b = rng.random_range(1..=200);
        let k = rng.random_range(1..=5);
        let t = random_table(&mut rng, b, k);
        for c in 0..k {
            let (s, y) = t.column(c);
            if roc_auc(&s, &y).ok() != auc_oracle(&s, &y) {
                mismatches += 1;
            }
        }
        let th = rng.random_range(1..100) as f64 / 100.0;
        if classwise_accuracy(&t, th).unwrap() != accuracy_oracle(&t, th) {
            mismatches += 1;
        }
        if max_f1(&t).ok() != f1_oracle(&t) {
            mismatches += 1;
        }
    }
    let pass = mismatches == 0;
    report(4, pass, format!("1000 tables, {mismatches} mismatches (exact equality)"));
    assert!(pass);
}

/// Synthetic corpus for criterion 5: six leads, MI marked by T-wave
/// inversion on leads 1 and 2.
fn synthetic_corpus() -> SynthConfig {
    let mut cfg = SynthConfig { num_records: 2000, num_leads: 6, num_samples: 200, beat_period: 50.0, seed: 5, ..Default::default() };
    cfg.classes[0].leads = vec![1, 2];
    cfg.classes[0].amplitude = -1.0;
    cfg
}

fn synthetic_model() -> ModelConfig {
    ModelConfig { window_length: 50, cnn_start_filters: 8, lstm_hidden: 8, attention_hidden: 8, ..Default::default() }
}

#[test]
fn criterion_5_synthetic_end_to_end() {
    let corpus = synthetic_corpus();
    let abnormal: Vec<usize> = corpus.classes[0].leads.clone();
    let splits = split_folds(synth_generate(&corpus).unwrap()).unwrap();
    let stats = fit_standardization(&splits.train).unwrap();
    let norm = |v: &[EcgRecord]| v.iter().map(|r| apply_standardization(r, &stats).unwrap()).collect::<Vec<_>>();
    let (tr, va, te) = (norm(&splits.train), norm(&splits.validation), norm(&splits.test));

    let tc = TrainConfig { max_epochs: SYNTH_MAX_EPOCHS, seed: 5, ..Default::default() };
    let mut model = init_model::<f64>(synthetic_model(), tc.seed).unwrap();
    let out = train(&mut model, &tr, &va, &tc, LabelScheme::Superclasses).unwrap();
    let best_auc = out.history.epochs.iter().filter_map(|e| e.val_macro_auc).fold(f64::NEG_INFINITY, f64::max);
    let reached = out.history.epochs.iter().find(|e| e.val_macro_auc.is_some_and(|a| a >= SYNTH_MIN_AUC)).map(|e| e.epoch);

    let (mut hits, mut total) = (0usize, 0usize);
    for r in te.iter().filter(|r| r.labels.has(Superclass::Mi)) {
        let x = Tensor::new(vec![r.num_leads(), r.num_samples()], r.signal.concat()).unwrap();
        let gamma = model.forward(&x, &mut ForwardCtx::eval()).unwrap().channel_attention;
        let mut order: Vec<usize> = (0..gamma.len()).collect();
        order.sort_by(|&a, &b| gamma[b].total_cmp(&gamma[a]));
        let mut top2 = order[..2].to_vec();
        top2.sort_unstable();
        total += 1;
        hits += (top2 == abnormal) as usize;
    }
    let top2_rate = hits as f64 / total.max(1) as f64;
    let pass = reached.is_some() && top2_rate >= SYNTH_MIN_TOP2;
    report(
        5,
        pass,
        format!(
            "best val macro AUC {best_auc:.4} (>= {SYNTH_MIN_AUC} at epoch {}), top-2 gamma = abnormal leads on {hits}/{total} = {top2_rate:.3} (>= {SYNTH_MIN_TOP2})",
            reached.map_or_else(|| "never".to_string(), |e| e.to_string())
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_6_channel_permutation() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut worst_logit, mut worst_gamma) = (0.0f64, 0.0f64);
    for trial in 0..50 {
        let m = rng.random_range(2..=6);
        let cfg = ModelConfig { window_length: 20, cnn_start_filters: 2, lstm_hidden: 3, attention_hidden: 3, ..Default::default() };
        let model = init_model::<f64>(cfg, 600 + trial).unwrap();
        let t = 20 * rng.random_range(1..=4);
        let x = normal_tensor(&[m, t], &mut rng);
        let mut perm: Vec<usize> = (0..m).collect();
        perm.shuffle(&mut rng);
        let px = Tensor::new(vec![m, t], perm.iter().flat_map(|&c| x.data()[c * t..(c + 1) * t].to_vec()).collect()).unwrap();
        let a = model.forward(&x, &mut ForwardCtx::eval()).unwrap();
        let b = model.forward(&px, &mut ForwardCtx::eval()).unwrap();
        for (p, q) in a.logits.iter().zip(&b.logits) {
            worst_logit = worst_logit.max((p - q).abs());
        }
        for (j, &c) in perm.iter().enumerate() {
            worst_gamma = worst_gamma.max((b.channel_attention[j] - a.channel_attention[c]).abs());
        }
    }
    let pass = worst_logit < PERM_TOL && worst_gamma < PERM_TOL;
    report(6, pass, format!("50 trials, max logit diff {worst_logit:.2e}, max gamma diff {worst_gamma:.2e} (tol {PERM_TOL:.0e})"));
    assert!(pass);
}

fn cli(args: &[&str]) -> i32 {
    let mut full = vec!["imlenet"];
    full.extend_from_slice(args);
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = run_cli(full, &mut out, &mut err);
    assert_eq!(code, 0, "{}", String::from_utf8_lossy(&err));
    code
}

#[test]
fn criterion_7_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let synth_cfg = dir.path().join("synth.txt");
    std::fs::write(&synth_cfg, "num_records = 80\nnum_leads = 3\nnum_samples = 100\nbeat_period = 40\n").unwrap();
    let data = dir.path().join("toy.imld");
    cli(&["synth", "--config", synth_cfg.to_str().unwrap(), "--out", data.to_str().unwrap()]);
    let train_once = |name: &str| {
        let out = dir.path().join(name);
        cli(&[
            "train", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "7",
            "--set", "window_length=20", "--set", "cnn_start_filters=4", "--set", "lstm_hidden=4",
            "--set", "attention_hidden=4", "--set", "max_epochs=3", "--set", "batch_size=16",
        ]);
        let read = |f: &str| std::fs::read(out.join(f)).unwrap();
        (read(CHECKPOINT_FILE), read(HISTORY_FILE))
    };
    let (a, b) = (train_once("a"), train_once("b"));
    let pass = a == b;
    report(7, pass, format!("checkpoint {} bytes, history {} bytes, identical: {pass}", a.0.len(), a.1.len()));
    assert!(pass);
}

#[test]
#[ignore = "full-scale run: needs PTB-XL at 100 Hz in IMLENET_PTBXL_DIR and days of CPU time"]
fn criterion_8_ptbxl_full_scale() {
    let root = std::env::var_os("IMLENET_PTBXL_DIR").expect("IMLENET_PTBXL_DIR");
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("ptbxl.imld");
    cli(&["convert", "--ptbxl-dir", Path::new(&root).to_str().unwrap(), "--out", data.to_str().unwrap()]);
    let out = dir.path().join("ablate");
    cli(&["ablate", "--data", data.to_str().unwrap(), "--out", out.to_str().unwrap(), "--seed", "42"]);
    let table = std::fs::read_to_string(out.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<String>> = table.lines().skip(1).map(|l| l.split(',').map(String::from).collect()).collect();
    let get = |set: &str, col: usize| -> f64 { rows.iter().find(|r| r[0] == set).unwrap()[col].parse().unwrap() };
    let (auc, acc, f1) = (get("all12", 2), get("all12", 3), get("all12", 4));
    let within = |v: f64, (target, tol): (f64, f64)| (v - target).abs() <= tol;
    let ordering = get("all12", 2) > get("precordial", 2)
        && get("precordial", 2) > get("limb", 2)
        && get("precordial", 2) > get("I-II-III", 2);
    let pass = within(auc, PTBXL_TARGET_MACRO_AUC) && within(acc, PTBXL_TARGET_MEAN_ACC) && within(f1, PTBXL_TARGET_MAX_F1) && ordering;
    report(8, pass, format!("macro AUC {auc:.4}, mean acc {acc:.4}, max F1 {f1:.4}, ablation ordering {ordering}"));
    assert!(pass);
}

#[test]
fn criterion_8_status() {
    if std::env::var_os("IMLENET_PTBXL_DIR").is_none() {
        let _ = writeln!(
            std::io::stderr(),
            "criterion 8: SKIP full PTB-XL run not executed (set IMLENET_PTBXL_DIR and run with --ignored)"
        );
    }
}

#[test]
fn criterion_9_wfdb_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let dir = tempfile::tempdir().unwrap();
    let mut failures = 0;
    for i in 0..100 {
        let m = rng.random_range(1..=12);
        let t = rng.random_range(1..=1000);
        let gain = [100.0, 200.0, 1000.0][rng.random_range(0..3)];
        let baseline = rng.random_range(-100..=100);
        let name = format!("rec{i:03}");
        let signals = (0..m)
            .map(|c| WfdbSignalSpec {
                file_name: format!("{name}.dat"),
                gain,
                baseline,
                units: "mV".into(),
                adc_resolution: 16,
                adc_zero: 0,
                description: STANDARD_LEADS[c].into(),
            })
            .collect();
        let rec = WfdbRecord {
            header: WfdbHeader { record_name: name, sampling_rate: 100.0, num_samples: t, signals },
            samples: (0..m * t).map(|_| rng.random()).collect(),
        };
        let back = read_wfdb(&write_wfdb(dir.path(), &rec).unwrap()).unwrap();
        failures += (back != rec) as usize;
    }
    let pass = failures == 0;
    report(9, pass, format!("100 random format-16 files, {failures} mismatches"));
    assert!(pass);
}
