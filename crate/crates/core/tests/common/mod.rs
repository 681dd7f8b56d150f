//! Quadratic reference implementations shared by the integration tests.
#![allow(dead_code)]

use imlenet::metrics::ScoreTable;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Pair counting: correctly ordered (pos, neg) pairs plus half the ties.
pub fn auc_oracle(scores: &[f64], targets: &[bool]) -> Option<f64> {
    let mut num = 0.0;
    let (mut p, mut n) = (0usize, 0usize);
    for (i, &ti) in targets.iter().enumerate() {
        if ti {
            p += 1;
        } else {
            n += 1;
        }
        if !ti {
            continue;
        }
        for (j, &tj) in targets.iter().enumerate() {
            if tj {
                continue;
            }
            if scores[i] > scores[j] {
                num += 1.0;
            } else if scores[i] == scores[j] {
                num += 0.5;
            }
        }
    }
    (p > 0 && n > 0).then(|| num / (p as f64 * n as f64))
}

pub fn accuracy_oracle(t: &ScoreTable, th: f64) -> Vec<f64> {
    (0..t.num_classes())
        .map(|c| {
            let mut hits = 0;
            for r in 0..t.num_records() {
                let pred = t.scores[r][c] >= th;
                if pred == t.targets[r][c] {
                    hits += 1;
                }
            }
            hits as f64 / t.num_records() as f64
        })
        .collect()
}

pub fn f1_oracle(t: &ScoreTable) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for i in 0..=100 {
        let th = i as f64 / 100.0;
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for r in 0..t.num_records() {
            for c in 0..t.num_classes() {
                let pred = t.scores[r][c] >= th;
                let truth = t.targets[r][c];
                tp += (pred && truth) as usize;
                fp += (pred && !truth) as usize;
                fn_ += (!pred && truth) as usize;
            }
        }
        let f1 = if 2 * tp + fp + fn_ == 0 { 0.0 } else { (2 * tp) as f64 / (2 * tp + fp + fn_) as f64 };
        if best.is_none_or(|(b, _)| f1 > b) {
            best = Some((f1, th));
        }
    }
    let any_pos = t.targets.iter().flatten().any(|&x| x);
    best.filter(|_| any_pos)
}

/// Scores drawn from a coarse grid so ties are common.
pub fn random_table(rng: &mut ChaCha8Rng, b: usize, k: usize) -> ScoreTable {
    let scores = (0..b).map(|_| (0..k).map(|_| rng.random_range(0..=40) as f64 / 40.0).collect()).collect();
    let targets = (0..b).map(|_| (0..k).map(|_| rng.random_bool(0.4)).collect()).collect();
    ScoreTable::new((0..k).map(|c| format!("c{c}")).collect(), scores, targets).unwrap()
}
