use rand::{Rng, RngCore};

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::numcore::{glorot_uniform, BatchStats, Graph, LstmVars, ParamId, ParamKind, ParamStore, Scalar, Tensor, Var};
use crate::preprocess::{segment_beats, SegmentationConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub struct ConvParams {
    /// `[K, C_in, C_out]`
    pub kernel: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct ResidualBlockParams {
    pub conv1: ConvParams,
    pub bn1: BatchNormParams,
    pub conv2: ConvParams,
    pub bn2: BatchNormParams,
    /// 1-tap stride-matched projection, present when the block changes the
    /// channel count or the length.
    pub projection: Option<ConvParams>,
    pub stride: usize,
}

/// Two-layer additive attention: `softmax(v · tanh(x·W + b))` over a
/// sequence axis. `weight` is stored input-major as `[D, A]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub weight: ParamId,
    pub bias: ParamId,
    /// `[A, 1]`
    pub score: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct LstmParams {
    pub input_weight: ParamId,
    pub hidden_weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Debug)]
pub struct BeatBlockParams {
    pub blocks: Vec<ResidualBlockParams>,
    pub attention: AttentionParams,
}

#[derive(Clone, Copy, Debug)]
pub struct RhythmBlockParams {
    pub forward: LstmParams,
    pub backward: LstmParams,
    pub attention: AttentionParams,
}

#[derive(Clone, Copy, Debug)]
pub struct ChannelBlockParams {
    pub attention: AttentionParams,
    /// `[2H, num_classes]`
    pub classifier_weight: ParamId,
    pub classifier_bias: ParamId,
}

/// Per-forward state: mode, the dropout generator, and batch-norm statistics
/// gathered in train mode.
pub struct ForwardCtx<'r, T> {
    pub mode: Mode,
    rng: Option<&'r mut dyn RngCore>,
    bn_updates: Vec<(BatchNormParams, BatchStats<T>)>,
}

impl<'r, T> ForwardCtx<'r, T> {
    pub fn eval() -> Self {
        Self { mode: Mode::Eval, rng: None, bn_updates: Vec::new() }
    }

    pub fn train(rng: &'r mut dyn RngCore) -> Self {
        Self { mode: Mode::Train, rng: Some(rng), bn_updates: Vec::new() }
    }

    fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }
}

/// Graph handles produced by one batched forward pass over `R` records of
/// `M` channels each, `N` beats per channel.
#[derive(Clone, Copy, Debug)]
pub struct BatchVars {
    /// `[R, num_classes]`
    pub logits: Var,
    /// `[R·M·N, W̄]`
    pub beat_attention: Var,
    /// `[R·M, N]`
    pub rhythm_attention: Var,
    /// `[R, M]`
    pub channel_attention: Var,
    /// `[R·M, 2H]`
    pub encodings: Var,
    pub records: usize,
    pub channels: usize,
    pub beats: usize,
}

/// Plain-array result of a single-record forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelOutput<T> {
    pub logits: Vec<T>,
    /// `α[c][k][i]`
    pub beat_attention: Vec<Vec<Vec<T>>>,
    /// `β[c][k]`
    pub rhythm_attention: Vec<Vec<T>>,
    /// `γ[c]`
    pub channel_attention: Vec<T>,
    /// `R[c]`
    pub channel_encodings: Vec<Vec<T>>,
}

/// The network: residual-CNN beat encoder with beat attention, Bi-LSTM
/// rhythm encoder with rhythm attention, channel attention and a linear
/// classifier. One parameter set is shared by every beat and channel.
#[derive(Clone, Debug)]
pub struct ImleNet<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    beat: BeatBlockParams,
    rhythm: RhythmBlockParams,
    channel: ChannelBlockParams,
}

struct Builder<'a, T, R: ?Sized> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<T: Scalar, R: Rng + ?Sized> Builder<'_, T, R> {
    fn conv(&mut self, name: &str, k: usize, c_in: usize, c_out: usize) -> ConvParams {
        let w = glorot_uniform(&[k, c_in, c_out], k * c_in, k * c_out, self.rng);
        ConvParams {
            kernel: self.store.add(format!("{name}.kernel"), ParamKind::Weight, w),
            bias: self.store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[c_out])),
        }
    }

    fn batchnorm(&mut self, name: &str, c: usize) -> BatchNormParams {
        BatchNormParams {
            gamma: self.store.add(format!("{name}.gamma"), ParamKind::Bias, Tensor::full(&[c], T::one())),
            beta: self.store.add(format!("{name}.beta"), ParamKind::Bias, Tensor::zeros(&[c])),
            running_mean: self.store.add(format!("{name}.running_mean"), ParamKind::Buffer, Tensor::zeros(&[c])),
            running_var: self.store.add(format!("{name}.running_var"), ParamKind::Buffer, Tensor::full(&[c], T::one())),
        }
    }

    fn dense(&mut self, name: &str, d_in: usize, d_out: usize) -> ParamId {
        let w = glorot_uniform(&[d_in, d_out], d_in, d_out, self.rng);
        self.store.add(name, ParamKind::Weight, w)
    }

    fn attention(&mut self, name: &str, d: usize, a: usize) -> AttentionParams {
        AttentionParams {
            weight: self.dense(&format!("{name}.weight"), d, a),
            bias: self.store.add(format!("{name}.bias"), ParamKind::Bias, Tensor::zeros(&[a])),
            score: self.dense(&format!("{name}.score"), a, 1),
        }
    }

    fn lstm(&mut self, name: &str, d: usize, h: usize) -> LstmParams {
        let mut bias = Tensor::zeros(&[4 * h]);
        bias.data_mut()[h..2 * h].iter_mut().for_each(|b| *b = T::one());
        LstmParams {
            input_weight: self.dense(&format!("{name}.input_weight"), d, 4 * h),
            hidden_weight: self.dense(&format!("{name}.hidden_weight"), h, 4 * h),
            bias: self.store.add(format!("{name}.bias"), ParamKind::Bias, bias),
        }
    }
}

impl<T: Scalar> ImleNet<T> {
    /// Fresh model with Glorot-uniform weights, zero biases and forget-gate
    /// bias 1.
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut b = Builder { store: &mut store, rng };
        let k = config.cnn_kernel_length;
        let blocks = config
            .block_layout()
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let name = format!("beat.block{}", i + 1);
                ResidualBlockParams {
                    conv1: b.conv(&format!("{name}.conv1"), k, spec.in_channels, spec.out_channels),
                    bn1: b.batchnorm(&format!("{name}.bn1"), spec.out_channels),
                    conv2: b.conv(&format!("{name}.conv2"), k, spec.out_channels, spec.out_channels),
                    bn2: b.batchnorm(&format!("{name}.bn2"), spec.out_channels),
                    projection: spec
                        .needs_projection()
                        .then(|| b.conv(&format!("{name}.projection"), 1, spec.in_channels, spec.out_channels)),
                    stride: spec.stride,
                }
            })
            .collect();
        let (f, h, a) = (config.feature_dim(), config.lstm_hidden, config.attention_hidden);
        let beat = BeatBlockParams { blocks, attention: b.attention("beat.attention", f, a) };
        let rhythm = RhythmBlockParams {
            forward: b.lstm("rhythm.lstm_forward", f, h),
            backward: b.lstm("rhythm.lstm_backward", f, h),
            attention: b.attention("rhythm.attention", 2 * h, a),
        };
        let channel = ChannelBlockParams {
            attention: b.attention("channel.attention", 2 * h, a),
            classifier_weight: b.dense("channel.classifier.weight", 2 * h, config.num_classes),
            classifier_bias: b.store.add(
                "channel.classifier.bias",
                ParamKind::Bias,
                Tensor::zeros(&[config.num_classes]),
            ),
        };
        Ok(Self { config, store, beat, rhythm, channel })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn beat_params(&self) -> &BeatBlockParams {
        &self.beat
    }

    pub fn rhythm_params(&self) -> &RhythmBlockParams {
        &self.rhythm
    }

    pub fn channel_params(&self) -> &ChannelBlockParams {
        &self.channel
    }

    pub fn num_trainable(&self) -> usize {
        self.store.num_trainable()
    }

    fn p(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(&self.store, id)
    }

    fn conv(&self, g: &mut Graph<T>, x: Var, c: &ConvParams, stride: usize, pad: (usize, usize)) -> Result<Var> {
        let (k, b) = (self.p(g, c.kernel), self.p(g, c.bias));
        g.conv1d(x, k, b, stride, pad)
    }

    fn bn(&self, g: &mut Graph<T>, ctx: &mut ForwardCtx<'_, T>, x: Var, p: &BatchNormParams) -> Result<Var> {
        let (gamma, beta) = (self.p(g, p.gamma), self.p(g, p.beta));
        let (y, stats) = g.batchnorm(
            x,
            gamma,
            beta,
            self.store.value(p.running_mean).data(),
            self.store.value(p.running_var).data(),
            ctx.is_train(),
            T::lit(self.config.bn_eps),
        )?;
        if let Some(s) = stats {
            ctx.bn_updates.push((*p, s));
        }
        Ok(y)
    }

    /// Residual CNN over a batch of beats `[B, W, 1]` → `[B, W̄, F]`.
    pub fn beat_cnn(&self, g: &mut Graph<T>, ctx: &mut ForwardCtx<'_, T>, beats: Var) -> Result<Var> {
        let w = self.config.window_length;
        match g.shape(beats) {
            [_, len, 1] if *len == w => {}
            s => return Err(Error::dim(format!("beat batch must be [B, {w}, 1], got {s:?}"))),
        }
        let pad = self.config.padding();
        let mut x = beats;
        for block in &self.beat.blocks {
            let y = self.conv(g, x, &block.conv1, block.stride, pad)?;
            let y = self.bn(g, ctx, y, &block.bn1)?;
            let y = g.relu(y);
            let y = match ctx.rng.as_deref_mut() {
                Some(rng) if ctx.mode == Mode::Train => g.dropout(y, self.config.dropout_rate, true, rng)?,
                _ => y,
            };
            let y = self.conv(g, y, &block.conv2, 1, pad)?;
            let y = self.bn(g, ctx, y, &block.bn2)?;
            let skip = match &block.projection {
                Some(proj) => self.conv(g, x, proj, block.stride, (0, 0))?,
                None => x,
            };
            let sum = g.add(y, skip)?;
            x = g.relu(sum);
        }
        Ok(x)
    }

    /// Additive attention pooling over the middle axis of `[G, n, D]`.
    /// Returns the context `[G, D]` and the scores `[G, n]`.
    pub fn attend(&self, g: &mut Graph<T>, p: &AttentionParams, values: Var) -> Result<(Var, Var)> {
        let [groups, n, _] = g.shape(values)[..] else {
            return Err(Error::dim(format!("attention input must be rank 3, got {:?}", g.shape(values))));
        };
        let (w, b, v) = (self.p(g, p.weight), self.p(g, p.bias), self.p(g, p.score));
        let hidden = g.dense(values, w, Some(b))?;
        let hidden = g.tanh(hidden);
        let energy = g.dense(hidden, v, None)?;
        let energy = g.reshape(energy, &[groups, n])?;
        let scores = g.softmax(energy);
        let context = g.weighted_sum(scores, values)?;
        Ok((context, scores))
    }

    /// Beat attention over CNN features `[G, W̄, F]` → (`B [G, F]`, `α [G, W̄]`).
    pub fn beat_attention(&self, g: &mut Graph<T>, features: Var) -> Result<(Var, Var)> {
        self.attend(g, &self.beat.attention, features)
    }

    /// Bi-LSTM plus rhythm attention over beat contexts `[S, N, F]` →
    /// (`R [S, 2H]`, `β [S, N]`).
    pub fn rhythm_block(&self, g: &mut Graph<T>, beat_contexts: Var) -> Result<(Var, Var)> {
        let [s, n, _] = g.shape(beat_contexts)[..] else {
            return Err(Error::dim("rhythm block input must be [S, N, F]"));
        };
        let h = self.config.lstm_hidden;
        let steps = (0..n).map(|k| g.select_step(beat_contexts, k)).collect::<Result<Vec<_>>>()?;
        let lstm_vars = |g: &mut Graph<T>, p: &LstmParams| LstmVars {
            input_weight: self.p(g, p.input_weight),
            hidden_weight: self.p(g, p.hidden_weight),
            bias: self.p(g, p.bias),
        };
        let fwd = lstm_vars(g, &self.rhythm.forward);
        let bwd = lstm_vars(g, &self.rhythm.backward);

        let run = |g: &mut Graph<T>, vars: LstmVars, order: &mut dyn Iterator<Item = usize>| -> Result<Vec<Var>> {
            let mut hs = vec![None; n];
            let mut state = (g.constant(Tensor::zeros(&[s, h])), g.constant(Tensor::zeros(&[s, h])));
            for k in order {
                state = g.lstm_step(steps[k], state.0, state.1, vars)?;
                hs[k] = Some(state.0);
            }
            Ok(hs.into_iter().map(Option::unwrap).collect())
        };
        let h_fwd = run(g, fwd, &mut (0..n))?;
        let h_bwd = run(g, bwd, &mut (0..n).rev())?;
        let h_fwd = g.stack(&h_fwd)?;
        let h_bwd = g.stack(&h_bwd)?;
        let r = g.concat_last(h_fwd, h_bwd)?;
        self.attend(g, &self.rhythm.attention, r)
    }

    /// Channel attention and classifier over encodings `[R, M, 2H]` →
    /// (logits `[R, K]`, `γ [R, M]`, `C [R, 2H]`).
    pub fn channel_block(&self, g: &mut Graph<T>, encodings: Var) -> Result<(Var, Var, Var)> {
        let (context, gamma) = self.attend(g, &self.channel.attention, encodings)?;
        let (w, b) = (self.p(g, self.channel.classifier_weight), self.p(g, self.channel.classifier_bias));
        let logits = g.dense(context, w, Some(b))?;
        Ok((logits, gamma, context))
    }

    /// Batched forward over `x [R, M, T]`.
    pub fn forward_batch(&self, g: &mut Graph<T>, ctx: &mut ForwardCtx<'_, T>, x: &Tensor<T>) -> Result<BatchVars> {
        let [records, channels, len] = x.shape()[..] else {
            return Err(Error::dim(format!("model input must be [R, M, T], got {:?}", x.shape())));
        };
        let w = self.config.window_length;
        let seg = SegmentationConfig::new(w, len).map_err(|_| {
            Error::input(format!("signal length {len} shorter than window length {w}"))
        })?;
        let n = seg.num_beats();
        let mut beats = Vec::with_capacity(records * channels * n * w);
        for ch in x.data().chunks(len) {
            for beat in segment_beats(ch, 0, &seg)?.beats {
                beats.extend(beat);
            }
        }
        let beats = g.constant(Tensor::new(vec![records * channels * n, w, 1], beats)?);
        let features = self.beat_cnn(g, ctx, beats)?;
        let (beat_ctx, alpha) = self.beat_attention(g, features)?;
        let f = self.config.feature_dim();
        let beat_ctx = g.reshape(beat_ctx, &[records * channels, n, f])?;
        let (enc, beta) = self.rhythm_block(g, beat_ctx)?;
        let enc3 = g.reshape(enc, &[records, channels, self.config.encoding_dim()])?;
        let (logits, gamma, _) = self.channel_block(g, enc3)?;
        Ok(BatchVars {
            logits,
            beat_attention: alpha,
            rhythm_attention: beta,
            channel_attention: gamma,
            encodings: enc,
            records,
            channels,
            beats: n,
        })
    }

    /// Single-record forward over `x [M, T]`.
    pub fn forward(&self, x: &Tensor<T>, ctx: &mut ForwardCtx<'_, T>) -> Result<ModelOutput<T>> {
        let [m, t] = x.shape()[..] else {
            return Err(Error::dim(format!("record must be [M, T], got {:?}", x.shape())));
        };
        let batch = x.clone().reshape(&[1, m, t])?;
        let mut g = Graph::new();
        let vars = self.forward_batch(&mut g, ctx, &batch)?;
        Ok(self.collect_output(&g, &vars, 0))
    }

    /// Copy record `r` of a batched pass out of the graph.
    pub fn collect_output(&self, g: &Graph<T>, vars: &BatchVars, r: usize) -> ModelOutput<T> {
        let (m, n) = (vars.channels, vars.beats);
        let wb = self.config.reduced_length();
        let k = self.config.num_classes;
        let e = self.config.encoding_dim();
        let alpha = g.value(vars.beat_attention).data();
        let beta = g.value(vars.rhythm_attention).data();
        let gamma = g.value(vars.channel_attention).data();
        let enc = g.value(vars.encodings).data();
        ModelOutput {
            logits: g.value(vars.logits).data()[r * k..(r + 1) * k].to_vec(),
            beat_attention: (0..m)
                .map(|c| {
                    (0..n)
                        .map(|b| {
                            let row = ((r * m + c) * n + b) * wb;
                            alpha[row..row + wb].to_vec()
                        })
                        .collect()
                })
                .collect(),
            rhythm_attention: (0..m).map(|c| beta[(r * m + c) * n..(r * m + c + 1) * n].to_vec()).collect(),
            channel_attention: gamma[r * m..(r + 1) * m].to_vec(),
            channel_encodings: (0..m).map(|c| enc[(r * m + c) * e..(r * m + c + 1) * e].to_vec()).collect(),
        }
    }

    /// Fold train-mode batch statistics into the running averages:
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn apply_bn_updates(&mut self, ctx: &mut ForwardCtx<'_, T>) {
        let mom = T::lit(self.config.bn_momentum);
        let keep = T::one() - mom;
        for (p, stats) in ctx.bn_updates.drain(..) {
            for (id, batch) in [(p.running_mean, &stats.mean), (p.running_var, &stats.var)] {
                for (r, &b) in self.store.value_mut(id).data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + mom * b;
                }
            }
        }
    }
}
