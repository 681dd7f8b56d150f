//! Multi-label loss, the Adam training loop with plateau learning-rate
//! decay and early stopping, and evaluation.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{KvConfig, KvWriter};
use crate::data::{EcgRecord, Superclass};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, MetricsReport, ScoreTable};
use crate::model::{ForwardCtx, ImleNet, ModelConfig};
use crate::numcore::{adam_step, AdamState, Checkpoint, Graph, ParamKind, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_patience_epochs: usize,
    pub l2_coefficient: f64,
    pub early_stop_patience: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 60,
            batch_size: 32,
            initial_lr: 1e-3,
            lr_decay_factor: 10.0,
            lr_patience_epochs: 10,
            l2_coefficient: 2e-5,
            early_stop_patience: 12,
            seed: 42,
            adam_beta1: 0.9,
            adam_beta2: 0.99,
            adam_epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.lr_patience_epochs == 0 || self.early_stop_patience == 0 {
            return Err(Error::config("batch_size and patience values must be positive"));
        }
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::config("initial_lr must be positive"));
        }
        if !(self.lr_decay_factor > 1.0 && self.lr_decay_factor.is_finite()) {
            return Err(Error::config("lr_decay_factor must exceed 1"));
        }
        if !(self.l2_coefficient >= 0.0 && self.l2_coefficient.is_finite()) {
            return Err(Error::config("l2_coefficient must be non-negative"));
        }
        AdamState::<f64>::new(0, self.initial_lr, self.adam_beta1, self.adam_beta2, self.adam_epsilon)?;
        Ok(())
    }

    pub fn take_from(kv: &mut KvConfig) -> Result<Self> {
        let mut c = Self::default();
        kv.take("max_epochs", &mut c.max_epochs)?;
        kv.take("batch_size", &mut c.batch_size)?;
        kv.take("initial_lr", &mut c.initial_lr)?;
        kv.take("lr_decay_factor", &mut c.lr_decay_factor)?;
        kv.take("lr_patience_epochs", &mut c.lr_patience_epochs)?;
        kv.take("l2_coefficient", &mut c.l2_coefficient)?;
        kv.take("early_stop_patience", &mut c.early_stop_patience)?;
        kv.take("seed", &mut c.seed)?;
        kv.take("adam_beta1", &mut c.adam_beta1)?;
        kv.take("adam_beta2", &mut c.adam_beta2)?;
        kv.take("adam_epsilon", &mut c.adam_epsilon)?;
        c.validate()?;
        Ok(c)
    }

    pub fn write_to(&self, w: &mut KvWriter) {
        w.section("training")
            .kv("max_epochs", self.max_epochs)
            .kv("batch_size", self.batch_size)
            .kv("initial_lr", self.initial_lr)
            .kv("lr_decay_factor", self.lr_decay_factor)
            .kv("lr_patience_epochs", self.lr_patience_epochs)
            .kv("l2_coefficient", self.l2_coefficient)
            .kv("early_stop_patience", self.early_stop_patience)
            .kv("seed", self.seed)
            .kv("adam_beta1", self.adam_beta1)
            .kv("adam_beta2", self.adam_beta2)
            .kv("adam_epsilon", self.adam_epsilon);
    }
}

/// Which label columns a model predicts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LabelScheme {
    /// NORM, MI, STTC, CD, HYP.
    #[default]
    Superclasses,
    /// NORM, ASMI, IMI.
    MiSubtypes,
}

impl LabelScheme {
    pub fn class_names(self) -> Vec<String> {
        match self {
            LabelScheme::Superclasses => Superclass::ALL.iter().map(|c| c.name().to_string()).collect(),
            LabelScheme::MiSubtypes => ["NORM", "ASMI", "IMI"].map(String::from).to_vec(),
        }
    }

    pub fn num_classes(self) -> usize {
        self.class_names().len()
    }

    pub fn name(self) -> &'static str {
        match self {
            LabelScheme::Superclasses => "superclasses",
            LabelScheme::MiSubtypes => "mi_subtypes",
        }
    }

    pub fn targets(self, rec: &EcgRecord) -> Vec<bool> {
        match self {
            LabelScheme::Superclasses => rec.labels.superclasses.to_vec(),
            LabelScheme::MiSubtypes => {
                let sub = rec.labels.subtypes.unwrap_or_default();
                vec![rec.labels.has(Superclass::Norm), sub.asmi, sub.imi]
            }
        }
    }
}

impl FromStr for LabelScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "superclasses" => Ok(LabelScheme::Superclasses),
            "mi_subtypes" => Ok(LabelScheme::MiSubtypes),
            _ => Err(Error::config(format!("unknown label scheme {s:?}"))),
        }
    }
}

impl std::fmt::Display for LabelScheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Stack records into a `[R, M, T]` model input.
pub fn batch_tensor<T: Scalar>(records: &[&EcgRecord]) -> Result<Tensor<T>> {
    let first = records.first().ok_or_else(|| Error::input("empty batch"))?;
    let (m, t) = (first.num_leads(), first.num_samples());
    let mut data = Vec::with_capacity(records.len() * m * t);
    for r in records {
        r.validate()?;
        if r.num_leads() != m || r.num_samples() != t {
            return Err(Error::dim(format!(
                "record {} is {}x{}, batch expects {m}x{t}",
                r.record_id,
                r.num_leads(),
                r.num_samples()
            )));
        }
        data.extend(r.signal.iter().flatten().map(|&v| T::lit(v)));
    }
    Tensor::new(vec![records.len(), m, t], data)
}

fn batch_targets<T: Scalar>(records: &[&EcgRecord], scheme: LabelScheme) -> Vec<T> {
    records
        .iter()
        .flat_map(|r| scheme.targets(r))
        .map(|b| if b { T::one() } else { T::zero() })
        .collect()
}

/// `mean BCE(logits, targets) + l2 · Σ w²` over weight tensors only.
pub fn loss<T: Scalar>(
    g: &mut Graph<T>,
    model: &ImleNet<T>,
    logits: Var,
    targets: &[T],
    l2_coefficient: f64,
) -> Result<Var> {
    let bce = g.bce_with_logits(logits, targets)?;
    if l2_coefficient == 0.0 {
        return Ok(bce);
    }
    let store = model.params();
    let weights: Vec<_> = store.iter().filter(|(_, p)| p.kind == ParamKind::Weight).map(|(id, _)| id).collect();
    let mut penalty: Option<Var> = None;
    for id in weights {
        let w = g.param(store, id);
        let sq = g.sum_squares(w);
        penalty = Some(match penalty {
            Some(p) => g.add(p, sq)?,
            None => sq,
        });
    }
    match penalty {
        Some(p) => {
            let scaled = g.scale(p, T::lit(l2_coefficient));
            g.add(bce, scaled)
        }
        None => Ok(bce),
    }
}

/// `Σ w²` over the weight tensors (the unscaled L2 penalty).
pub fn l2_penalty<T: Scalar>(model: &ImleNet<T>) -> f64 {
    model
        .params()
        .iter()
        .filter(|(_, p)| p.kind == ParamKind::Weight)
        .flat_map(|(_, p)| p.value.data().iter().map(|v| v.as_f64() * v.as_f64()))
        .sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_macro_auc: Option<f64>,
    pub learning_rate: f64,
}

impl EpochRecord {
    /// Quantity maximized for model selection: macro AUC when defined,
    /// otherwise the negated validation loss.
    pub fn monitor(&self) -> f64 {
        self.val_macro_auc.unwrap_or(-self.val_loss)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_macro_auc,lr\n");
        for e in &self.epochs {
            let auc = e.val_macro_auc.map_or_else(String::new, |a| a.to_string());
            let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.train_loss, e.val_loss, auc, e.learning_rate);
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.epochs.iter().fold(None, |best: Option<&EpochRecord>, e| match best {
            Some(b) if b.monitor() >= e.monitor() => Some(b),
            _ => Some(e),
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters (and optimizer state) from the best validation epoch, or
    /// the initial parameters if no epoch ran.
    pub best: Checkpoint,
    pub best_epoch: Option<usize>,
    pub history: TrainHistory,
}

/// Seeded model initialization; training uses a separate stream of the
/// same seed.
pub fn init_model<T: Scalar>(config: ModelConfig, seed: u64) -> Result<ImleNet<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImleNet::new(config, &mut rng)
}

fn check_dataset<T: Scalar>(model: &ImleNet<T>, scheme: LabelScheme, what: &str, records: &[EcgRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::input(format!("{what} set is empty")));
    }
    if model.config().num_classes != scheme.num_classes() {
        return Err(Error::config(format!(
            "model predicts {} classes, label scheme {scheme} has {}",
            model.config().num_classes,
            scheme.num_classes()
        )));
    }
    Ok(())
}

/// Train in place. On return the model holds the best-epoch parameters.
pub fn train<T: Scalar>(
    model: &mut ImleNet<T>,
    train_set: &[EcgRecord],
    val_set: &[EcgRecord],
    config: &TrainConfig,
    scheme: LabelScheme,
) -> Result<TrainOutcome> {
    config.validate()?;
    check_dataset(model, scheme, "training", train_set)?;
    check_dataset(model, scheme, "validation", val_set)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let n = model.num_trainable();
    let mut adam = AdamState::new(
        n,
        T::lit(config.initial_lr),
        T::lit(config.adam_beta1),
        T::lit(config.adam_beta2),
        T::lit(config.adam_epsilon),
    )?;
    let mut lr = config.initial_lr;
    let mut best = Checkpoint::from_store(model.params(), Some(&adam));
    let mut best_epoch = None;
    let mut best_monitor = f64::NEG_INFINITY;
    let mut since_improvement = 0;
    let mut since_decay = 0;
    let mut history = TrainHistory::default();
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&EcgRecord> = chunk.iter().map(|&i| &train_set[i]).collect();
            let x = batch_tensor::<T>(&batch)?;
            let y = batch_targets::<T>(&batch, scheme);
            let mut g = Graph::new();
            let mut ctx = ForwardCtx::train(&mut rng);
            let vars = model.forward_batch(&mut g, &mut ctx, &x)?;
            let l = loss(&mut g, model, vars.logits, &y, config.l2_coefficient)?;
            let lv = g.value(l).data()[0].as_f64();
            if !lv.is_finite() {
                return Err(Error::NonFinite { epoch, batch: b, loss: lv });
            }
            let grads = g.backward(l)?.flatten_trainable(model.params());
            let mut flat = model.params().flatten_trainable();
            adam.learning_rate = T::lit(lr);
            adam_step(&mut flat, &grads, &mut adam)?;
            model.params_mut().assign_trainable(&flat)?;
            model.apply_bn_updates(&mut ctx);
            loss_sum += lv * batch.len() as f64;
        }
        let (val_scores, val_loss) = predict_with_loss(model, val_set, config.batch_size, scheme)?;
        let table = ScoreTable::new(scheme.class_names(), val_scores, val_set.iter().map(|r| scheme.targets(r)).collect())?;
        let val_macro_auc = aggregate(&table, crate::metrics::DEFAULT_THRESHOLD)?.macro_auc;
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            val_loss,
            val_macro_auc,
            learning_rate: lr,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.5} val_loss {:.5} val_auc {} lr {lr}",
            rec.train_loss,
            rec.val_loss,
            val_macro_auc.map_or_else(|| "-".into(), |a| format!("{a:.4}"))
        );
        let monitor = rec.monitor();
        history.epochs.push(rec);

        if monitor > best_monitor {
            best_monitor = monitor;
            best_epoch = Some(epoch);
            best = Checkpoint::from_store(model.params(), Some(&adam));
            since_improvement = 0;
            since_decay = 0;
        } else {
            since_improvement += 1;
            since_decay += 1;
            if since_improvement >= config.early_stop_patience {
                break;
            }
            if since_decay >= config.lr_patience_epochs {
                lr /= config.lr_decay_factor;
                since_decay = 0;
            }
        }
    }
    best.restore_store(model.params_mut())?;
    Ok(TrainOutcome { best, best_epoch, history })
}

/// Eval-mode sigmoid scores for every record, in input order.
pub fn predict<T: Scalar>(model: &ImleNet<T>, records: &[EcgRecord], batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let k = model.config().num_classes;
    let mut out = Vec::with_capacity(records.len());
    for chunk in records.chunks(batch_size.max(1)) {
        let batch: Vec<&EcgRecord> = chunk.iter().collect();
        let x = batch_tensor::<T>(&batch)?;
        let mut g = Graph::new();
        let vars = model.forward_batch(&mut g, &mut ForwardCtx::eval(), &x)?;
        let probs = g.sigmoid(vars.logits);
        out.extend(g.value(probs).data().chunks(k).map(|r| r.iter().map(|v| v.as_f64()).collect()));
    }
    Ok(out)
}

fn predict_with_loss<T: Scalar>(
    model: &ImleNet<T>,
    records: &[EcgRecord],
    batch_size: usize,
    scheme: LabelScheme,
) -> Result<(Vec<Vec<f64>>, f64)> {
    let k = model.config().num_classes;
    let mut scores = Vec::with_capacity(records.len());
    let mut loss_sum = 0.0;
    for chunk in records.chunks(batch_size.max(1)) {
        let batch: Vec<&EcgRecord> = chunk.iter().collect();
        let x = batch_tensor::<T>(&batch)?;
        let y = batch_targets::<T>(&batch, scheme);
        let mut g = Graph::new();
        let vars = model.forward_batch(&mut g, &mut ForwardCtx::eval(), &x)?;
        let bce = g.bce_with_logits(vars.logits, &y)?;
        loss_sum += g.value(bce).data()[0].as_f64() * batch.len() as f64;
        let probs = g.sigmoid(vars.logits);
        scores.extend(g.value(probs).data().chunks(k).map(|r| r.iter().map(|v| v.as_f64()).collect::<Vec<_>>()));
    }
    Ok((scores, loss_sum / records.len() as f64))
}

/// Score table of eval-mode predictions on `records`.
pub fn score_table<T: Scalar>(
    model: &ImleNet<T>,
    records: &[EcgRecord],
    scheme: LabelScheme,
    batch_size: usize,
) -> Result<ScoreTable> {
    check_dataset(model, scheme, "evaluation", records)?;
    let scores = predict(model, records, batch_size)?;
    ScoreTable::new(scheme.class_names(), scores, records.iter().map(|r| scheme.targets(r)).collect())
}

pub fn evaluate<T: Scalar>(
    model: &ImleNet<T>,
    records: &[EcgRecord],
    threshold: f64,
    scheme: LabelScheme,
) -> Result<MetricsReport> {
    aggregate(&score_table(model, records, scheme, 32)?, threshold)
}

/// Rebuild a model from a checkpoint written by [`train`].
pub fn load_model<T: Scalar>(config: ModelConfig, checkpoint: &Checkpoint) -> Result<ImleNet<T>> {
    let mut model = init_model(config, 0)?;
    checkpoint.restore_store(model.params_mut())?;
    Ok(model)
}

pub fn evaluate_checkpoint(
    checkpoint: &Checkpoint,
    config: ModelConfig,
    records: &[EcgRecord],
    threshold: f64,
    scheme: LabelScheme,
) -> Result<MetricsReport> {
    let model = load_model::<f64>(config, checkpoint)?;
    evaluate(&model, records, threshold, scheme)
}
