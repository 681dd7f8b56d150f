//! Multi-label classification metrics: ROC-AUC, class-wise accuracy and
//! maximum micro-F1 over a shared threshold.

use std::fmt::Write as _;

use crate::data::Superclass;
use crate::error::{Error, Result};

/// Default decision threshold for class-wise accuracy.
pub const DEFAULT_THRESHOLD: f64 = 0.5;
/// Thresholds swept by [`max_f1`]: 0.00, 0.01, ..., 1.00.
pub const F1_GRID_STEPS: usize = 100;

/// Post-sigmoid scores and binary targets, one row per record.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub class_names: Vec<String>,
    pub scores: Vec<Vec<f64>>,
    pub targets: Vec<Vec<bool>>,
}

impl ScoreTable {
    pub fn new(class_names: Vec<String>, scores: Vec<Vec<f64>>, targets: Vec<Vec<bool>>) -> Result<Self> {
        let k = class_names.len();
        if scores.is_empty() {
            return Err(Error::input("score table needs at least one record"));
        }
        if scores.len() != targets.len() {
            return Err(Error::dim(format!("{} score rows vs {} target rows", scores.len(), targets.len())));
        }
        if scores.iter().any(|r| r.len() != k) || targets.iter().any(|r| r.len() != k) {
            return Err(Error::dim(format!("every row must have {k} classes")));
        }
        if scores.iter().flatten().any(|s| !s.is_finite()) {
            return Err(Error::input("scores must be finite"));
        }
        Ok(Self { class_names, scores, targets })
    }

    /// Table with the five superclass columns.
    pub fn superclasses(scores: Vec<Vec<f64>>, targets: Vec<Vec<bool>>) -> Result<Self> {
        Self::new(Superclass::ALL.iter().map(|c| c.name().to_string()).collect(), scores, targets)
    }

    pub fn num_records(&self) -> usize {
        self.scores.len()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn column(&self, c: usize) -> (Vec<f64>, Vec<bool>) {
        (self.scores.iter().map(|r| r[c]).collect(), self.targets.iter().map(|r| r[c]).collect())
    }
}

/// Mann–Whitney AUC via average ranks. Ties between a positive and a
/// negative count one half.
pub fn roc_auc(scores: &[f64], targets: &[bool]) -> Result<f64> {
    if scores.len() != targets.len() {
        return Err(Error::dim(format!("{} scores vs {} targets", scores.len(), targets.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::input("NaN score"));
    }
    let pos = targets.iter().filter(|&&t| t).count();
    let neg = targets.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC-AUC needs both positive and negative targets".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // sum of (1-based) ranks of the positives, ties sharing their mean rank
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let mean_rank = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| targets[k]).count();
        rank_sum += mean_rank * pos_in_group as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(Error::input(format!("threshold {threshold} outside (0, 1)")))
    }
}

/// Per class: fraction of records whose decision `score >= threshold`
/// matches the target.
pub fn classwise_accuracy(table: &ScoreTable, threshold: f64) -> Result<Vec<f64>> {
    check_threshold(threshold)?;
    let b = table.num_records() as f64;
    Ok((0..table.num_classes())
        .map(|c| {
            let hits = table.scores.iter().zip(&table.targets).filter(|(s, t)| (s[c] >= threshold) == t[c]).count();
            hits as f64 / b
        })
        .collect())
}

/// Micro-F1 over every (record, class) decision at one threshold.
pub fn micro_f1(table: &ScoreTable, threshold: f64) -> f64 {
    let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
    for (s, t) in table.scores.iter().flatten().zip(table.targets.iter().flatten()) {
        match (*s >= threshold, *t) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fnn += 1,
            (false, false) => {}
        }
    }
    let denom = 2 * tp + fp + fnn;
    if denom == 0 {
        0.0
    } else {
        (2 * tp) as f64 / denom as f64
    }
}

/// Best micro-F1 on the 0.01 threshold grid and the smallest threshold
/// reaching it.
pub fn max_f1(table: &ScoreTable) -> Result<(f64, f64)> {
    if !table.targets.iter().flatten().any(|&t| t) {
        return Err(Error::UndefinedMetric("max F1 needs at least one positive target".into()));
    }
    let mut best = (f64::NEG_INFINITY, 0.0);
    for i in 0..=F1_GRID_STEPS {
        let th = i as f64 / F1_GRID_STEPS as f64;
        let f1 = micro_f1(table, th);
        if f1 > best.0 {
            best = (f1, th);
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    /// `None` where the class lacks positives or negatives.
    pub auc: Vec<Option<f64>>,
    pub accuracy: Vec<f64>,
    /// Mean over classes with a defined AUC; `None` if there are none.
    pub macro_auc: Option<f64>,
    pub auc_excluded: Vec<String>,
    pub mean_accuracy: f64,
    pub max_f1: Option<f64>,
    pub f1_threshold: Option<f64>,
    pub threshold: f64,
    pub num_records: usize,
}

pub fn aggregate(table: &ScoreTable, threshold: f64) -> Result<MetricsReport> {
    let mut auc = Vec::with_capacity(table.num_classes());
    let mut excluded = Vec::new();
    for c in 0..table.num_classes() {
        let (s, t) = table.column(c);
        match roc_auc(&s, &t) {
            Ok(a) => auc.push(Some(a)),
            Err(Error::UndefinedMetric(_)) => {
                auc.push(None);
                excluded.push(table.class_names[c].clone());
            }
            Err(e) => return Err(e),
        }
    }
    let defined: Vec<f64> = auc.iter().flatten().copied().collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    let accuracy = classwise_accuracy(table, threshold)?;
    let mean_accuracy = accuracy.iter().sum::<f64>() / accuracy.len() as f64;
    let (max_f1, f1_threshold) = match max_f1(table) {
        Ok((f, t)) => (Some(f), Some(t)),
        Err(Error::UndefinedMetric(_)) => (None, None),
        Err(e) => return Err(e),
    };
    Ok(MetricsReport {
        class_names: table.class_names.clone(),
        auc,
        accuracy,
        macro_auc,
        auc_excluded: excluded,
        mean_accuracy,
        max_f1,
        f1_threshold,
        threshold,
        num_records: table.num_records(),
    })
}

fn num4(x: Option<f64>) -> String {
    x.map_or_else(|| "null".to_string(), |v| format!("{v:.4}"))
}

fn json_str(s: &str) -> String {
    serde_json::to_string(s).expect("string serialization cannot fail")
}

impl MetricsReport {
    /// JSON with fixed field names, canonical class order and every number
    /// printed with four decimals.
    pub fn to_json(&self) -> String {
        let mut out = String::from("{\n  \"classes\": [\n");
        for (i, name) in self.class_names.iter().enumerate() {
            let sep = if i + 1 < self.class_names.len() { "," } else { "" };
            let _ = writeln!(
                out,
                "    {{\"class\": {}, \"auc\": {}, \"accuracy\": {}}}{sep}",
                json_str(name),
                num4(self.auc[i]),
                num4(Some(self.accuracy[i]))
            );
        }
        let excluded: Vec<String> = self.auc_excluded.iter().map(|s| json_str(s)).collect();
        let _ = write!(
            out,
            "  ],\n  \"macro_auc\": {},\n  \"auc_excluded\": [{}],\n  \"mean_accuracy\": {},\n  \"max_f1\": {},\n  \
             \"f1_threshold\": {},\n  \"threshold\": {},\n  \"num_records\": {}\n}}\n",
            num4(self.macro_auc),
            excluded.join(", "),
            num4(Some(self.mean_accuracy)),
            num4(self.max_f1),
            num4(self.f1_threshold),
            num4(Some(self.threshold)),
            self.num_records
        );
        out
    }

    /// Plain-text table: one row per class plus the aggregate lines.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<8} {:>8} {:>9}\n", "class", "auc", "accuracy");
        for (i, name) in self.class_names.iter().enumerate() {
            let auc = self.auc[i].map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
            let _ = writeln!(out, "{name:<8} {auc:>8} {:>9.2}", 100.0 * self.accuracy[i]);
        }
        let _ = writeln!(out, "macro ROC-AUC   {}", num4(self.macro_auc));
        let _ = writeln!(out, "mean accuracy   {:.2}", 100.0 * self.mean_accuracy);
        let _ = writeln!(out, "max F1          {} (threshold {})", num4(self.max_f1), num4(self.f1_threshold));
        if !self.auc_excluded.is_empty() {
            let _ = writeln!(out, "AUC undefined for: {}", self.auc_excluded.join(", "));
        }
        out
    }
}
