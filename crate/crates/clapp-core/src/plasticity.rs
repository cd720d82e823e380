//! The layer-local plasticity rules.
//!
//! Each trainable layer carries a predictor head scoring how well the
//! layer's current activity matches a dendritic prediction formed from
//! context activity `delta_t` steps in the past. A hinge on that score,
//! labelled by the fixation/saccade broadcast, yields three local updates:
//! one for the predicted layer's feedforward weights, one for the context
//! layer's feedforward weights (routed through the retrodiction matrix to
//! avoid weight transport), and a plain Hebbian rule for the predictor pair
//! itself. Every update factorizes into broadcast scalars, a dendritic term,
//! and pre/post activity of the connected units only.
//!
//! Synchronous variants score one fixation against several saccade samples
//! at once, and a softmax-contrastive reference path provides the
//! gradient-isolated comparison gradients.

use crate::encoder::{Encoder, EncoderState, TraceBuffer};
use crate::error::{ClappError, Result};
use crate::stream::StreamEvent;
use crate::tensor::{layer_adjoint, matvec, LayerGrads, LayerRecord, Scalar, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Prediction/retrodiction weight pair bound to a (predicted, context) layer
/// pair at one temporal offset.
#[derive(Clone, Debug)]
pub struct PredictorHead<T = f32> {
    /// [dim_z x dim_c]; rows index the predicted layer.
    pub w_pred: Tensor<T>,
    /// [dim_c x dim_z]; the unidirectional stand-in for the transpose.
    pub w_retro: Tensor<T>,
    /// Index of the predicted layer (z).
    pub z_layer: usize,
    /// Index of the context layer (c); equals `z_layer` for lateral heads.
    pub c_layer: usize,
    /// Prediction offset in steps.
    pub delta_t: usize,
}

impl<T: Scalar> PredictorHead<T> {
    pub fn init(
        dim_z: usize,
        dim_c: usize,
        z_layer: usize,
        c_layer: usize,
        delta_t: usize,
        tied: bool,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dim_c as f64).sqrt();
        let n = dim_z * dim_c;
        let pred_data: Vec<T> = (0..n)
            .map(|_| T::of(rng.gen_range(-bound..bound)))
            .collect();
        let w_pred = Tensor::new(vec![dim_z, dim_c], pred_data).expect("consistent dims");
        let w_retro = if tied {
            w_pred.transposed().expect("matrix")
        } else {
            let retro_data: Vec<T> = (0..n)
                .map(|_| T::of(rng.gen_range(-bound..bound)))
                .collect();
            Tensor::new(vec![dim_c, dim_z], retro_data).expect("consistent dims")
        };
        Self {
            w_pred,
            w_retro,
            z_layer,
            c_layer,
            delta_t,
        }
    }

    pub fn cast<U: Scalar>(&self) -> PredictorHead<U> {
        PredictorHead {
            w_pred: self.w_pred.cast(),
            w_retro: self.w_retro.cast(),
            z_layer: self.z_layer,
            c_layer: self.c_layer,
            delta_t: self.delta_t,
        }
    }
}

/// Where the context vector comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextSource {
    /// Lateral prediction: the layer predicts its own future activity.
    SameLayer,
    /// The dendritic prediction onto layer l comes from layer l+1.
    LayerAbove,
}

/// Training rule family.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Temporal stream, one event at a time, local rule updates.
    Clapp,
    /// Synchronous: one fixation plus N saccade samples per step, rule path.
    ClappS,
    /// Synchronous hinge trained through the split-loss gradient path.
    HingeCpc,
    /// Softmax-contrastive reference gradients per gradient-isolated layer.
    CpcGim,
}

impl Mode {
    pub fn is_synchronous(self) -> bool {
        !matches!(self, Mode::Clapp)
    }
}

/// Rule hyper-parameters.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HyperParams {
    /// Learning rate folded into the hinge gate H (SGD path); the optimizer
    /// path sets this to 1 and keeps the rate in the optimizer.
    pub eta: f64,
    pub delta_t: usize,
    /// Negatives per step in synchronous modes.
    pub n_negatives: usize,
    pub mode: Mode,
    pub context_source: ContextSource,
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.eta <= 0.0 {
            return Err(ClappError::config("hyperparams.eta", "must be > 0"));
        }
        if self.delta_t < 1 {
            return Err(ClappError::config("hyperparams.delta_t", "must be >= 1"));
        }
        if self.mode.is_synchronous() && self.mode != Mode::Clapp && self.n_negatives < 1 {
            return Err(ClappError::config(
                "hyperparams.n_negatives",
                "must be >= 1 in synchronous modes",
            ));
        }
        Ok(())
    }

    pub fn with_eta(&self, eta: f64) -> Self {
        Self {
            eta,
            ..self.clone()
        }
    }
}

/// Broadcast factors governing one update: the saccade sign `y`, the hinge
/// gate `H in {0, eta}`, and their product `gamma = y * H`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Modulator<T = f32> {
    pub y: T,
    pub h: T,
    pub gamma: T,
}

impl<T: Scalar> Modulator<T> {
    pub fn inactive(&self) -> bool {
        self.h == T::zero()
    }
}

/// Score u = z^T W_pred c. Summation runs (j, k) row-major so that the tied
/// retrodiction score is bit-identical.
pub fn score<T: Scalar>(z: &Tensor<T>, c: &Tensor<T>, head: &PredictorHead<T>) -> Result<T> {
    score_forward(z, c, &head.w_pred)
}

fn score_forward<T: Scalar>(z: &Tensor<T>, c: &Tensor<T>, w_pred: &Tensor<T>) -> Result<T> {
    let (dz, dc) = match w_pred.shape()[..] {
        [a, b] => (a, b),
        _ => return Err(ClappError::dimension("w_pred must be a matrix".into())),
    };
    if z.len() != dz || c.len() != dc {
        return Err(ClappError::dimension(format!(
            "score dims: z {} c {} vs head [{} x {}]",
            z.len(),
            c.len(),
            dz,
            dc
        )));
    }
    let mut acc = T::zero();
    for j in 0..dz {
        for k in 0..dc {
            acc = acc + z.data()[j] * w_pred.data()[j * dc + k] * c.data()[k];
        }
    }
    Ok(acc)
}

/// Score routed through the retrodiction weights: u_c = (W_retro z)^T c,
/// accumulated in the same (j, k) order as [`score`] so tied heads agree
/// exactly.
pub fn score_retro<T: Scalar>(z: &Tensor<T>, c: &Tensor<T>, head: &PredictorHead<T>) -> Result<T> {
    let (dc, dz) = match head.w_retro.shape()[..] {
        [a, b] => (a, b),
        _ => return Err(ClappError::dimension("w_retro must be a matrix".into())),
    };
    if z.len() != dz || c.len() != dc {
        return Err(ClappError::dimension(format!(
            "retro score dims: z {} c {} vs head [{} x {}]",
            z.len(),
            c.len(),
            dc,
            dz
        )));
    }
    let mut acc = T::zero();
    for j in 0..dz {
        for k in 0..dc {
            acc = acc + z.data()[j] * head.w_retro.data()[k * dz + j] * c.data()[k];
        }
    }
    Ok(acc)
}

/// Both split-loss scores: `u_z` flows gradients into the predicted side
/// only, `u_c` into the context side only. They coincide exactly when
/// W_retro = W_pred^T.
pub fn split_score_pair<T: Scalar>(
    z: &Tensor<T>,
    c: &Tensor<T>,
    head: &PredictorHead<T>,
) -> Result<(T, T)> {
    Ok((score(z, c, head)?, score_retro(z, c, head)?))
}

/// Hinge loss max(0, 1 - y*u).
pub fn clapp_loss<T: Scalar>(u: T, y: i8) -> T {
    let margin = T::one() - T::of(y as f64) * u;
    if margin > T::zero() {
        margin
    } else {
        T::zero()
    }
}

/// Broadcast modulator: H = eta iff the margin is strictly violated
/// (y*u < 1); at y*u == 1 exactly there is no update.
pub fn modulator<T: Scalar>(u: T, y: i8, eta: T) -> Modulator<T> {
    let ys = T::of(y as f64);
    let h = if ys * u < T::one() { eta } else { T::zero() };
    Modulator {
        y: ys,
        h,
        gamma: ys * h,
    }
}

/// Map a score-space gradient back to the layer's output tensor: identity
/// for dense outputs, spatial-mean adjoint (divide by cell count) for conv
/// maps.
fn broadcast_to_output<T: Scalar>(vec: &Tensor<T>, output_shape: &[usize]) -> Result<Tensor<T>> {
    match output_shape {
        [n] => {
            if vec.len() != *n {
                return Err(ClappError::dimension("score-space dim mismatch".into()));
            }
            Ok(vec.clone())
        }
        [c, h, w] => {
            if vec.len() != *c {
                return Err(ClappError::dimension("score-space channel mismatch".into()));
            }
            let inv = T::of(1.0 / ((h * w) as f64));
            let mut out = Tensor::zeros(&[*c, *h, *w]);
            for ch in 0..*c {
                let v = vec.data()[ch] * inv;
                for i in 0..h * w {
                    out.data_mut()[ch * h * w + i] = v;
                }
            }
            Ok(out)
        }
        other => Err(ClappError::dimension(format!(
            "unsupported layer output shape {:?}",
            other
        ))),
    }
}

/// Update for the predicted layer's feedforward weights:
/// dW_ji = gamma * (W_pred c^{t-dt})_j * rho'(a_j^t) * x_i^t,
/// generalized through conv/pool by the within-layer adjoint.
pub fn update_predicted_layer<T: Scalar>(
    state_now: &EncoderState<T>,
    c_past: &Tensor<T>,
    head: &PredictorHead<T>,
    m: &Modulator<T>,
) -> Result<LayerGrads<T>> {
    let record = state_now
        .layers
        .get(head.z_layer)
        .ok_or_else(|| ClappError::input(format!("no layer {}", head.z_layer)))?;
    if m.inactive() {
        return Ok(zero_grads(record));
    }
    let dendritic = matvec(&head.w_pred, c_past)?;
    let upstream = broadcast_to_output(&dendritic.scale(m.gamma), record.output.shape())?;
    layer_adjoint(&upstream, record)
}

/// Update for the context layer's feedforward weights:
/// dW_kl = gamma * (W_retro z^t)_k * rho'(a_k^{c,t-dt}) * x_l^{c,t-dt}.
pub fn update_context_layer<T: Scalar>(
    state_past: &EncoderState<T>,
    z_now: &Tensor<T>,
    head: &PredictorHead<T>,
    m: &Modulator<T>,
) -> Result<LayerGrads<T>> {
    let record = state_past
        .layers
        .get(head.c_layer)
        .ok_or_else(|| ClappError::input(format!("no layer {}", head.c_layer)))?;
    if m.inactive() {
        return Ok(zero_grads(record));
    }
    let retrodiction = matvec(&head.w_retro, z_now)?;
    let upstream = broadcast_to_output(&retrodiction.scale(m.gamma), record.output.shape())?;
    layer_adjoint(&upstream, record)
}

/// Hebbian update of the predictor pair:
/// dW_pred[j][k] = dW_retro[k][j] = gamma * z_j^t * c_k^{t-dt}.
/// Both matrices receive the same products, so reciprocity is exact.
pub fn update_predictor<T: Scalar>(
    z_now: &Tensor<T>,
    c_past: &Tensor<T>,
    m: &Modulator<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (dz, dc) = (z_now.len(), c_past.len());
    let mut d_pred = Tensor::zeros(&[dz, dc]);
    let mut d_retro = Tensor::zeros(&[dc, dz]);
    if !m.inactive() {
        for j in 0..dz {
            for k in 0..dc {
                let v = m.gamma * z_now.data()[j] * c_past.data()[k];
                d_pred.data_mut()[j * dc + k] = v;
                d_retro.data_mut()[k * dz + j] = v;
            }
        }
    }
    Ok((d_pred, d_retro))
}

fn zero_grads<T: Scalar>(record: &LayerRecord<T>) -> LayerGrads<T> {
    match record.wiring {
        crate::tensor::LayerWiring::Dense => LayerGrads {
            weights: Tensor::zeros(&[record.pre_activation.len(), record.input.len()]),
            bias: None,
        },
        crate::tensor::LayerWiring::Conv2d { kh, kw, .. } => {
            let cout = record.pre_activation.shape()[0];
            let cin = record.input.shape()[0];
            LayerGrads {
                weights: Tensor::zeros(&[cout, cin, kh, kw]),
                bias: Some(Tensor::zeros(&[cout])),
            }
        }
    }
}

/// Accumulated parameter deltas for one batch.
#[derive(Clone, Debug)]
pub struct LayerUpdate<T = f32> {
    pub weights: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct HeadUpdate<T = f32> {
    pub w_pred: Tensor<T>,
    pub w_retro: Tensor<T>,
}

/// Per-batch accumulator: one slot per encoder layer and per head. Slots are
/// summed event by event and averaged at apply time.
#[derive(Clone, Debug)]
pub struct UpdateBuffer<T = f32> {
    pub layers: Vec<LayerUpdate<T>>,
    pub heads: Vec<HeadUpdate<T>>,
    pub events: usize,
}

impl<T: Scalar> UpdateBuffer<T> {
    pub fn zeros_like(encoder: &Encoder<T>, heads: &[PredictorHead<T>]) -> Self {
        let layers = encoder
            .layers()
            .iter()
            .map(|l| LayerUpdate {
                weights: Tensor::zeros(l.weights.shape()),
                bias: l.bias.as_ref().map(|b| Tensor::zeros(b.shape())),
            })
            .collect();
        let heads = heads
            .iter()
            .map(|h| HeadUpdate {
                w_pred: Tensor::zeros(h.w_pred.shape()),
                w_retro: Tensor::zeros(h.w_retro.shape()),
            })
            .collect();
        Self {
            layers,
            heads,
            events: 0,
        }
    }

    pub fn clear(&mut self) {
        for l in &mut self.layers {
            l.weights = Tensor::zeros(l.weights.shape());
            if let Some(b) = &mut l.bias {
                *b = Tensor::zeros(b.shape());
            }
        }
        for h in &mut self.heads {
            h.w_pred = Tensor::zeros(h.w_pred.shape());
            h.w_retro = Tensor::zeros(h.w_retro.shape());
        }
        self.events = 0;
    }

    /// Merge another worker's buffer (deterministic: callers merge in worker
    /// index order).
    pub fn merge(&mut self, other: &Self) -> Result<()> {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights.add_scaled(&b.weights, T::one())?;
            if let (Some(ab), Some(bb)) = (&mut a.bias, &b.bias) {
                ab.add_scaled(bb, T::one())?;
            }
        }
        for (a, b) in self.heads.iter_mut().zip(&other.heads) {
            a.w_pred.add_scaled(&b.w_pred, T::one())?;
            a.w_retro.add_scaled(&b.w_retro, T::one())?;
        }
        self.events += other.events;
        Ok(())
    }

    fn add_layer(&mut self, layer: usize, grads: &LayerGrads<T>, scale: T) -> Result<()> {
        let slot = &mut self.layers[layer];
        slot.weights.add_scaled(&grads.weights, scale)?;
        if let (Some(sb), Some(gb)) = (&mut slot.bias, &grads.bias) {
            sb.add_scaled(gb, scale)?;
        }
        Ok(())
    }

    fn add_head(
        &mut self,
        head: usize,
        d_pred: &Tensor<T>,
        d_retro: &Tensor<T>,
        scale: T,
    ) -> Result<()> {
        let slot = &mut self.heads[head];
        slot.w_pred.add_scaled(d_pred, scale)?;
        slot.w_retro.add_scaled(d_retro, scale)?;
        Ok(())
    }
}

/// Per-head outcome of one step.
#[derive(Clone, Debug)]
pub struct LayerStepReport {
    pub head_index: usize,
    pub layer: usize,
    pub loss: f64,
    /// Fraction of hinge terms with an active margin this step.
    pub margin_violation_rate: f64,
    /// Retro-branch margin rate when the gradient path gates branches
    /// independently (untied heads under the split loss).
    pub retro_margin_violation_rate: Option<f64>,
    pub score: f64,
}

/// What one stream event produced.
#[derive(Clone, Debug, Default)]
pub struct StepOutcome {
    pub reports: Vec<LayerStepReport>,
    /// Heads skipped for lack of recorded history.
    pub skipped_heads: usize,
}

/// One temporally-local step: forward the event, record the trace, and for
/// every head score the current activity against the context from
/// `delta_t` steps ago, gating the three local updates on the hinge.
///
/// Layers are independent: no gradient crosses a layer boundary. Early
/// events without enough history skip their heads and are counted.
pub fn clapp_step<T: Scalar>(
    event: &StreamEvent,
    encoder: &Encoder<T>,
    trace: &mut TraceBuffer<T>,
    heads: &[PredictorHead<T>],
    hp: &HyperParams,
    buffer: &mut UpdateBuffer<T>,
) -> Result<StepOutcome> {
    let x = event.x.cast::<T>();
    let state = encoder.forward(&x)?;
    trace.record(state, event.source_id);
    let mut outcome = StepOutcome::default();
    let eta = T::of(hp.eta);
    for (hi, head) in heads.iter().enumerate() {
        let delta = head.delta_t;
        let past = match trace.at(delta) {
            Ok(p) => p,
            Err(_) => {
                outcome.skipped_heads += 1;
                continue;
            }
        };
        let now = trace.at(0).expect("just recorded");
        // The broadcast label compares the sources at t and t - delta; for
        // delta_t = 1 this is exactly the event's y.
        let y: i8 = if past.source_id == event.source_id {
            1
        } else {
            -1
        };
        let z_now = &now.state.pooled[head.z_layer];
        let c_past = &past.state.pooled[head.c_layer];
        let u = score(z_now, c_past, head)?;
        let m = modulator(u, y, eta);
        let loss = clapp_loss(u, y);
        if !m.inactive() {
            let d_z = update_predicted_layer(&now.state, c_past, head, &m)?;
            buffer.add_layer(head.z_layer, &d_z, T::one())?;
            let d_c = update_context_layer(&past.state, z_now, head, &m)?;
            buffer.add_layer(head.c_layer, &d_c, T::one())?;
            let (d_pred, d_retro) = update_predictor(z_now, c_past, &m)?;
            buffer.add_head(hi, &d_pred, &d_retro, T::one())?;
        }
        outcome.reports.push(LayerStepReport {
            head_index: hi,
            layer: head.z_layer,
            loss: loss.as_f64(),
            margin_violation_rate: if m.inactive() { 0.0 } else { 1.0 },
            retro_margin_violation_rate: None,
            score: u.as_f64(),
        });
    }
    buffer.events += 1;
    Ok(outcome)
}

/// How synchronous steps gate the two split-loss branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchGating {
    /// One gate from the prediction-side score, as the local rule states.
    Shared,
    /// Each branch gates on its own margin (the split-loss gradient path).
    PerBranch,
}

/// Synchronous step: one fixation plus `negatives.len()` saccade samples
/// share the context from `delta_t` steps back. The loss averages the N+1
/// hinge terms and the buffered update is the matching gamma-weighted
/// average of the per-term local updates.
pub fn clapp_s_step<T: Scalar>(
    event: &StreamEvent,
    negatives: &[Tensor<f32>],
    encoder: &Encoder<T>,
    trace: &mut TraceBuffer<T>,
    heads: &[PredictorHead<T>],
    hp: &HyperParams,
    gating: BranchGating,
    buffer: &mut UpdateBuffer<T>,
) -> Result<StepOutcome> {
    let x = event.x.cast::<T>();
    let state = encoder.forward(&x)?;
    trace.record(state, event.source_id);
    let neg_states: Vec<EncoderState<T>> = negatives
        .iter()
        .map(|n| encoder.forward(&n.cast::<T>()))
        .collect::<Result<_>>()?;
    let mut outcome = StepOutcome::default();
    let eta = T::of(hp.eta);
    let scale = T::of(1.0 / (negatives.len() + 1) as f64);
    for (hi, head) in heads.iter().enumerate() {
        let past = match trace.at(head.delta_t) {
            Ok(p) => p,
            Err(_) => {
                outcome.skipped_heads += 1;
                continue;
            }
        };
        let now = trace.at(0).expect("just recorded");
        let c_past = &past.state.pooled[head.c_layer];

        let mut loss_acc = 0.0f64;
        let mut violations = 0usize;
        let mut retro_violations = 0usize;
        let mut score_pos = 0.0f64;
        // Terms: the fixation (y = +1) then each synchronous saccade (y = -1).
        let terms: Vec<(&EncoderState<T>, i8)> = std::iter::once((&now.state, 1i8))
            .chain(neg_states.iter().map(|s| (s, -1i8)))
            .collect();
        for (ti, (term_state, y)) in terms.iter().enumerate() {
            let z = &term_state.pooled[head.z_layer];
            let (u_z, u_c) = split_score_pair(z, c_past, head)?;
            let m_z = modulator(u_z, *y, eta);
            let m_c = match gating {
                BranchGating::Shared => m_z,
                BranchGating::PerBranch => modulator(u_c, *y, eta),
            };
            loss_acc += clapp_loss(u_z, *y).as_f64();
            if ti == 0 {
                score_pos = u_z.as_f64();
            }
            if !m_z.inactive() {
                violations += 1;
                let d_z = update_predicted_layer(term_state, c_past, head, &m_z)?;
                buffer.add_layer(head.z_layer, &d_z, scale)?;
                let (d_pred, _) = update_predictor(z, c_past, &m_z)?;
                buffer.add_head(hi, &d_pred, &Tensor::zeros(head.w_retro.shape()), scale)?;
            }
            if !m_c.inactive() {
                retro_violations += 1;
                let d_c = update_context_layer(&past.state, z, head, &m_c)?;
                buffer.add_layer(head.c_layer, &d_c, scale)?;
                let (_, d_retro) = update_predictor(z, c_past, &m_c)?;
                buffer.add_head(hi, &Tensor::zeros(head.w_pred.shape()), &d_retro, scale)?;
            }
        }
        let n_terms = terms.len() as f64;
        outcome.reports.push(LayerStepReport {
            head_index: hi,
            layer: head.z_layer,
            loss: loss_acc / n_terms,
            margin_violation_rate: violations as f64 / n_terms,
            retro_margin_violation_rate: match gating {
                BranchGating::Shared => None,
                BranchGating::PerBranch => Some(retro_violations as f64 / n_terms),
            },
            score: score_pos,
        });
    }
    buffer.events += 1;
    Ok(outcome)
}

/// One element of the softmax-contrastive comparison set.
pub struct CpcSample<'a, T> {
    pub record: &'a LayerRecord<T>,
    pub pooled: &'a Tensor<T>,
}

/// Inputs of the softmax-contrastive reference gradient at one layer.
pub struct CpcInstance<'a, T> {
    pub context: CpcSample<'a, T>,
    pub positive: CpcSample<'a, T>,
    pub negatives: Vec<CpcSample<'a, T>>,
}

/// Reference gradients (of the loss) for the softmax-contrastive objective.
#[derive(Clone, Debug)]
pub struct CpcGrads<T = f32> {
    pub w_pred: Tensor<T>,
    pub w_z: LayerGrads<T>,
    pub w_c: LayerGrads<T>,
    /// Softmax over {positive, negatives}; sums to 1.
    pub probabilities: Vec<T>,
    /// -log pi(positive).
    pub loss: T,
}

/// Analytic gradients of the softmax cross-entropy contrastive loss at a
/// single gradient-isolated layer, with respect to the predictor matrix and
/// the two layers' feedforward weights.
///
/// Softmax is computed with max subtraction. Gradients are of the loss, so
/// descent steps subtract them.
pub fn cpc_reference_grads<T: Scalar>(
    instance: &CpcInstance<'_, T>,
    w_pred: &Tensor<T>,
) -> Result<CpcGrads<T>> {
    if instance.negatives.is_empty() {
        return Err(ClappError::input("need at least one negative sample"));
    }
    let c = instance.context.pooled;
    let mut zs: Vec<&Tensor<T>> = Vec::with_capacity(1 + instance.negatives.len());
    zs.push(instance.positive.pooled);
    for n in &instance.negatives {
        zs.push(n.pooled);
    }
    // Scores and stable softmax.
    let scores: Vec<T> = zs
        .iter()
        .map(|z| score_forward(z, c, w_pred))
        .collect::<Result<_>>()?;
    let max = scores
        .iter()
        .fold(T::neg_infinity(), |m, &s| if s > m { s } else { m });
    let exps: Vec<T> = scores.iter().map(|&s| (s - max).exp()).collect();
    let norm = exps.iter().fold(T::zero(), |a, &e| a + e);
    let probs: Vec<T> = exps.iter().map(|&e| e / norm).collect();
    let loss = -(probs[0].ln());

    // dL/du_tau = pi_tau - [tau == positive].
    let coeffs: Vec<T> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| if i == 0 { p - T::one() } else { p })
        .collect();

    // dL/dW_pred = sum_tau coeff_tau * z_tau c^T.
    let dim_c = c.len();
    let dim_z = zs[0].len();
    let mut d_pred = Tensor::zeros(&[dim_z, dim_c]);
    for (coef, z) in coeffs.iter().zip(&zs) {
        for j in 0..dim_z {
            for k in 0..dim_c {
                d_pred.data_mut()[j * dim_c + k] =
                    d_pred.data()[j * dim_c + k] + *coef * z.data()[j] * c.data()[k];
            }
        }
    }

    // dL/dW_z: route coeff_tau * (W_pred c) through each sample's record.
    let dendritic = matvec(w_pred, c)?;
    let mut d_wz: Option<LayerGrads<T>> = None;
    let samples: Vec<&CpcSample<'_, T>> = std::iter::once(&instance.positive)
        .chain(instance.negatives.iter())
        .collect();
    for (coef, sample) in coeffs.iter().zip(&samples) {
        let upstream =
            broadcast_to_output(&dendritic.scale(*coef), sample.record.output.shape())?;
        let g = layer_adjoint(&upstream, sample.record)?;
        match &mut d_wz {
            None => d_wz = Some(g),
            Some(acc) => {
                acc.weights.add_scaled(&g.weights, T::one())?;
                if let (Some(ab), Some(gb)) = (&mut acc.bias, &g.bias) {
                    ab.add_scaled(gb, T::one())?;
                }
            }
        }
    }

    // dL/dW_c: W_pred^T (sum_tau coeff_tau z_tau) through the context record.
    let mut z_mix = Tensor::zeros(&[dim_z]);
    for (coef, z) in coeffs.iter().zip(&zs) {
        z_mix.add_scaled(z, *coef)?;
    }
    let back = crate::tensor::matvec_transposed(w_pred, &z_mix)?;
    let upstream_c = broadcast_to_output(&back, instance.context.record.output.shape())?;
    let d_wc = layer_adjoint(&upstream_c, instance.context.record)?;

    Ok(CpcGrads {
        w_pred: d_pred,
        w_z: d_wz.expect("at least the positive sample"),
        w_c: d_wc,
        probabilities: probs,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{Encoder, LayerSpec, TraceBuffer};
    use crate::tensor::Activation;

    fn head_from(w_pred: Tensor<f64>, tied: bool) -> PredictorHead<f64> {
        let w_retro = if tied {
            w_pred.transposed().unwrap()
        } else {
            w_pred.map(|v| v * 0.7 + 0.01).transposed().unwrap()
        };
        PredictorHead {
            w_pred,
            w_retro,
            z_layer: 0,
            c_layer: 0,
            delta_t: 1,
        }
    }

    #[test]
    fn score_permutation_case() {
        let head = head_from(
            Tensor::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap(),
            true,
        );
        let z = Tensor::from_vec(vec![1.0, 0.0]);
        let c = Tensor::from_vec(vec![0.0, 1.0]);
        assert_eq!(score(&z, &c, &head).unwrap(), 1.0);
    }

    #[test]
    fn score_identity_case() {
        let head = head_from(
            Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap(),
            true,
        );
        let z = Tensor::from_vec(vec![1.0, 1.0]);
        assert_eq!(score(&z, &z, &head).unwrap(), 2.0);
        let zo = Tensor::from_vec(vec![1.0, 0.0]);
        let co = Tensor::from_vec(vec![0.0, 1.0]);
        assert_eq!(score(&zo, &co, &head).unwrap(), 0.0);
    }

    #[test]
    fn clapp_loss_cases() {
        assert_eq!(clapp_loss(2.0f64, 1), 0.0);
        assert_eq!(clapp_loss(0.0f64, 1), 1.0);
        assert_eq!(clapp_loss(0.5f64, -1), 1.5);
    }

    #[test]
    fn modulator_cases() {
        let m = modulator(1.2f64, 1, 0.1);
        assert_eq!(m.gamma, 0.0);
        let m = modulator(-1.5f64, -1, 0.1);
        assert_eq!(m.gamma, 0.0);
        let m = modulator(0.0f64, -1, 0.1);
        assert_eq!(m.h, 0.1);
        assert_eq!(m.gamma, -0.1);
        // Strict inequality: y*u == 1 exactly triggers no update.
        let m = modulator(1.0f64, 1, 0.1);
        assert_eq!(m.h, 0.0);
        // gamma == y * H by construction.
        let m = modulator(0.3f64, 1, 0.05);
        assert_eq!(m.gamma, m.y * m.h);
    }

    /// Hand-built dense record without bias augmentation, for rule-level
    /// arithmetic checks.
    fn raw_dense_record(x: Vec<f64>, a: Vec<f64>, activation: Activation) -> EncoderState<f64> {
        let z = activation.apply(&Tensor::from_vec(a.clone()));
        let record = LayerRecord {
            wiring: crate::tensor::LayerWiring::Dense,
            activation,
            input: Tensor::from_vec(x),
            pre_activation: Tensor::from_vec(a),
            post_activation: z.clone(),
            pool: None,
            output: z.clone(),
        };
        EncoderState {
            pooled: vec![z],
            layers: vec![record],
        }
    }

    #[test]
    fn predicted_layer_update_hand_case() {
        // gamma=0.1, W_pred c = [0.5, -0.5], rho'=[1,1], x=[2,0]
        // -> dW = [[0.1, 0], [-0.1, 0]].
        let state = raw_dense_record(vec![2.0, 0.0], vec![0.4, -0.2], Activation::Linear);
        let head = PredictorHead {
            w_pred: Tensor::from_rows(&[vec![0.5], vec![-0.5]]).unwrap(),
            w_retro: Tensor::from_rows(&[vec![0.5, -0.5]]).unwrap(),
            z_layer: 0,
            c_layer: 0,
            delta_t: 1,
        };
        let c = Tensor::from_vec(vec![1.0]);
        let m = Modulator {
            y: 1.0,
            h: 0.1,
            gamma: 0.1,
        };
        let d = update_predicted_layer(&state, &c, &head, &m).unwrap();
        let got = d.weights.data();
        assert!((got[0] - 0.1).abs() < 1e-15);
        assert_eq!(got[1], 0.0);
        assert!((got[2] + 0.1).abs() < 1e-15);
        assert_eq!(got[3], 0.0);
    }

    #[test]
    fn inactive_gate_means_zero_update() {
        let state = raw_dense_record(vec![1.0, 2.0], vec![0.5, 0.5], Activation::Relu);
        let head = head_from(
            Tensor::from_rows(&[vec![0.3, 0.1], vec![0.2, 0.4]]).unwrap(),
            true,
        );
        let c = Tensor::from_vec(vec![0.7, -0.7]);
        let m = Modulator {
            y: 1.0,
            h: 0.0,
            gamma: 0.0,
        };
        let d = update_predicted_layer(&state, &c, &head, &m).unwrap();
        assert!(d.weights.data().iter().all(|&v| v == 0.0));
        let d = update_context_layer(&state, &c, &head, &m).unwrap();
        assert!(d.weights.data().iter().all(|&v| v == 0.0));
        let (dp, dr) = update_predictor(&c, &c, &m).unwrap();
        assert!(dp.data().iter().all(|&v| v == 0.0));
        assert!(dr.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_retro_weights_zero_context_update() {
        let state = raw_dense_record(vec![1.0, -1.0], vec![0.8, 0.6], Activation::Relu);
        let head = PredictorHead {
            w_pred: Tensor::from_rows(&[vec![0.2, 0.2], vec![0.1, 0.3]]).unwrap(),
            w_retro: Tensor::zeros(&[2, 2]),
            z_layer: 0,
            c_layer: 0,
            delta_t: 1,
        };
        let z = Tensor::from_vec(vec![1.0, 1.0]);
        let m = Modulator {
            y: -1.0,
            h: 0.1,
            gamma: -0.1,
        };
        let d = update_context_layer(&state, &z, &head, &m).unwrap();
        assert!(d.weights.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predictor_update_hand_case() {
        let z = Tensor::from_vec(vec![1.0, 2.0]);
        let c = Tensor::from_vec(vec![3.0, 0.0]);
        let m = Modulator {
            y: 1.0,
            h: 0.1,
            gamma: 0.1,
        };
        let (dp, dr) = update_predictor(&z, &c, &m).unwrap();
        assert_eq!(dp.data(), &[0.30000000000000004, 0.0, 0.6000000000000001, 0.0]);
        assert_eq!(dr, dp.transposed().unwrap());
        // Zero presynaptic activity kills both.
        let z0 = Tensor::zeros(&[2]);
        let (dp, dr) = update_predictor(&z0, &c, &m).unwrap();
        assert!(dp.data().iter().all(|&v| v == 0.0));
        assert!(dr.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predictor_reciprocity_is_exact() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(3);
        use rand::Rng;
        for _ in 0..20 {
            let z = Tensor::from_vec((0..5).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let c = Tensor::from_vec((0..7).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let m = Modulator {
                y: -1.0,
                h: 0.05,
                gamma: -0.05,
            };
            let (dp, dr) = update_predictor(&z, &c, &m).unwrap();
            assert_eq!(dr, dp.transposed().unwrap());
        }
    }

    #[test]
    fn split_scores_agree_exactly_when_tied() {
        let mut rng = rand::rngs::StdRng::seed_from_u64(5);
        use rand::Rng;
        for _ in 0..50 {
            let w = Tensor::new(
                vec![4, 3],
                (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let head = head_from(w, true);
            let z = Tensor::from_vec((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let c = Tensor::from_vec((0..3).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let (uz, uc) = split_score_pair(&z, &c, &head).unwrap();
            assert_eq!(uz, uc);
        }
    }

    #[test]
    fn split_scores_differ_when_untied() {
        let w = Tensor::from_rows(&[vec![0.5, 0.1], vec![-0.2, 0.4]]).unwrap();
        let head = head_from(w, false);
        let z = Tensor::from_vec(vec![0.3, -0.9]);
        let c = Tensor::from_vec(vec![1.1, 0.2]);
        let (uz, uc) = split_score_pair(&z, &c, &head).unwrap();
        assert!(uz.is_finite() && uc.is_finite());
        assert_ne!(uz, uc);
    }

    fn single_dense_setup(seed: u64) -> (Encoder<f64>, Vec<PredictorHead<f64>>) {
        let specs = vec![LayerSpec::Dense {
            in_dim: 3,
            out_dim: 4,
            activation: Activation::Relu,
        }];
        let enc = Encoder::<f64>::init(&specs, seed).unwrap();
        let head = PredictorHead::<f64>::init(4, 4, 0, 0, 1, false, seed + 1);
        (enc, vec![head])
    }

    fn event(x: Vec<f32>, t: usize, source_id: u32, y: i8) -> StreamEvent {
        StreamEvent {
            x: Tensor::from_vec(x),
            t,
            source_id,
            y,
        }
    }

    fn hp(mode: Mode) -> HyperParams {
        HyperParams {
            eta: 0.1,
            delta_t: 1,
            n_negatives: 2,
            mode,
            context_source: ContextSource::SameLayer,
        }
    }

    #[test]
    fn clapp_step_skips_without_history() {
        let (enc, heads) = single_dense_setup(11);
        let mut trace = TraceBuffer::new(2);
        let mut buf = UpdateBuffer::zeros_like(&enc, &heads);
        let out = clapp_step(
            &event(vec![0.5, -0.5, 1.0], 0, 0, 1),
            &enc,
            &mut trace,
            &heads,
            &hp(Mode::Clapp),
            &mut buf,
        )
        .unwrap();
        assert_eq!(out.skipped_heads, 1);
        assert!(out.reports.is_empty());
        assert!(buf.layers[0].weights.data().iter().all(|&v| v == 0.0));
        assert_eq!(buf.events, 1);
    }

    #[test]
    fn clapp_step_matches_composed_updates() {
        let (enc, heads) = single_dense_setup(13);
        let params = hp(Mode::Clapp);
        let mut trace = TraceBuffer::new(2);
        let mut buf = UpdateBuffer::zeros_like(&enc, &heads);
        let e0 = event(vec![0.4, 0.9, -0.3], 0, 7, 1);
        let e1 = event(vec![0.6, 0.2, 0.8], 1, 7, 1);
        clapp_step(&e0, &enc, &mut trace, &heads, &params, &mut buf).unwrap();
        let out = clapp_step(&e1, &enc, &mut trace, &heads, &params, &mut buf).unwrap();
        assert_eq!(out.reports.len(), 1);

        // Recompute by composing the three rule primitives directly.
        let s0 = enc.forward(&Tensor::from_vec(vec![0.4, 0.9, -0.3])).unwrap();
        let s1 = enc.forward(&Tensor::from_vec(vec![0.6, 0.2, 0.8])).unwrap();
        let z = &s1.pooled[0];
        let c = &s0.pooled[0];
        let u = score(z, c, &heads[0]).unwrap();
        let m = modulator(u, 1, 0.1);
        let d_z = update_predicted_layer(&s1, c, &heads[0], &m).unwrap();
        let d_c = update_context_layer(&s0, z, &heads[0], &m).unwrap();
        let mut expect = d_z.weights.clone();
        expect.add_scaled(&d_c.weights, 1.0).unwrap();
        assert_eq!(buf.layers[0].weights.data(), expect.data());
        let (dp, dr) = update_predictor(z, c, &m).unwrap();
        assert_eq!(buf.heads[0].w_pred.data(), dp.data());
        assert_eq!(buf.heads[0].w_retro.data(), dr.data());
    }

    #[test]
    fn satisfied_margins_buffer_nothing() {
        let (enc, mut heads) = single_dense_setup(17);
        // A huge prediction weight makes y=+1 margins comfortably satisfied.
        heads[0].w_pred = Tensor::filled(&[4, 4], 50.0);
        heads[0].w_retro = Tensor::filled(&[4, 4], 50.0);
        let params = hp(Mode::Clapp);
        let mut trace = TraceBuffer::new(2);
        let mut buf = UpdateBuffer::zeros_like(&enc, &heads);
        clapp_step(
            &event(vec![1.0, 1.0, 1.0], 0, 1, 1),
            &enc,
            &mut trace,
            &heads,
            &params,
            &mut buf,
        )
        .unwrap();
        let out = clapp_step(
            &event(vec![1.0, 1.0, 1.0], 1, 1, 1),
            &enc,
            &mut trace,
            &heads,
            &params,
            &mut buf,
        )
        .unwrap();
        assert_eq!(out.reports[0].margin_violation_rate, 0.0);
        assert_eq!(out.reports[0].loss, 0.0);
        assert!(buf.layers[0].weights.data().iter().all(|&v| v == 0.0));
        assert!(buf.heads[0].w_pred.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn clapp_s_identical_negative_cancels_predictor_update() {
        let (enc, heads) = single_dense_setup(19);
        let params = hp(Mode::ClappS);
        let mut trace = TraceBuffer::new(2);
        let mut buf = UpdateBuffer::zeros_like(&enc, &heads);
        let x = vec![0.2f32, 0.3, 0.4];
        clapp_step(
            &event(x.clone(), 0, 1, 1),
            &enc,
            &mut trace,
            &heads,
            &params,
            &mut buf,
        )
        .unwrap();
        buf.clear();
        // Negative identical to the positive: when both margins are violated
        // the Hebbian terms cancel exactly.
        let pos = event(x.clone(), 1, 1, 1);
        let negs = vec![Tensor::from_vec(x)];
        let out = clapp_s_step(
            &pos,
            &negs,
            &enc,
            &mut trace,
            &heads,
            &params,
            BranchGating::Shared,
            &mut buf,
        )
        .unwrap();
        assert_eq!(out.reports[0].margin_violation_rate, 1.0);
        assert!(buf.heads[0].w_pred.data().iter().all(|&v| v.abs() < 1e-15));
        assert!(buf.heads[0]
            .w_retro
            .data()
            .iter()
            .all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn clapp_s_equals_average_of_independent_steps() {
        let (enc, heads) = single_dense_setup(23);
        let params = hp(Mode::ClappS);
        let x0 = vec![0.5f32, -0.2, 0.8];
        let x_pos = vec![0.4f32, 0.1, 0.6];
        let n1 = vec![-0.7f32, 0.9, 0.2];
        let n2 = vec![0.3f32, 0.3, -0.9];

        let mut trace = TraceBuffer::new(2);
        let mut buf = UpdateBuffer::zeros_like(&enc, &heads);
        clapp_step(
            &event(x0.clone(), 0, 1, 1),
            &enc,
            &mut trace,
            &heads,
            &params,
            &mut buf,
        )
        .unwrap();
        buf.clear();
        clapp_s_step(
            &event(x_pos.clone(), 1, 1, 1),
            &[
                Tensor::from_vec(n1.clone()),
                Tensor::from_vec(n2.clone()),
            ],
            &enc,
            &mut trace,
            &heads,
            &params,
            BranchGating::Shared,
            &mut buf,
        )
        .unwrap();

        // The synchronous update equals the average over three independent
        // temporal steps that share the same context state.
        let shared_context = enc
            .forward(&Tensor::from_vec(vec![0.5, -0.2, 0.8]))
            .unwrap();
        let mut expect = UpdateBuffer::zeros_like(&enc, &heads);
        for (xi, y) in [(&x_pos, 1i8), (&n1, -1), (&n2, -1)] {
            let s = enc
                .forward(&Tensor::from_vec(xi.iter().map(|&v| v as f64).collect()))
                .unwrap();
            let z = &s.pooled[0];
            let c = &shared_context.pooled[0];
            let u = score(z, c, &heads[0]).unwrap();
            let m = modulator(u, y, 0.1);
            if !m.inactive() {
                let d_z = update_predicted_layer(&s, c, &heads[0], &m).unwrap();
                expect.add_layer(0, &d_z, 1.0 / 3.0).unwrap();
                let d_c = update_context_layer(&shared_context, z, &heads[0], &m).unwrap();
                expect.add_layer(0, &d_c, 1.0 / 3.0).unwrap();
                let (dp, dr) = update_predictor(z, c, &m).unwrap();
                expect.add_head(0, &dp, &dr, 1.0 / 3.0).unwrap();
            }
        }
        for (got, want) in buf.layers[0]
            .weights
            .data()
            .iter()
            .zip(expect.layers[0].weights.data())
        {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        for (got, want) in buf.heads[0]
            .w_pred
            .data()
            .iter()
            .zip(expect.heads[0].w_pred.data())
        {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn cpc_uniform_softmax_case() {
        // Zero prediction weights make all scores equal, so pi is uniform and
        // the loss gradient for W_pred is (mean(z) - z_pos) c^T.
        let (enc, _) = single_dense_setup(29);
        let sc = enc.forward(&Tensor::from_vec(vec![0.1, 0.2, 0.3])).unwrap();
        let sp = enc.forward(&Tensor::from_vec(vec![0.4, -0.1, 0.2])).unwrap();
        let sn1 = enc.forward(&Tensor::from_vec(vec![-0.5, 0.3, 0.6])).unwrap();
        let sn2 = enc.forward(&Tensor::from_vec(vec![0.9, 0.8, -0.2])).unwrap();
        let w_pred = Tensor::<f64>::zeros(&[4, 4]);
        let inst = CpcInstance {
            context: CpcSample {
                record: &sc.layers[0],
                pooled: &sc.pooled[0],
            },
            positive: CpcSample {
                record: &sp.layers[0],
                pooled: &sp.pooled[0],
            },
            negatives: vec![
                CpcSample {
                    record: &sn1.layers[0],
                    pooled: &sn1.pooled[0],
                },
                CpcSample {
                    record: &sn2.layers[0],
                    pooled: &sn2.pooled[0],
                },
            ],
        };
        let g = cpc_reference_grads(&inst, &w_pred).unwrap();
        for &p in &g.probabilities {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
        let sum: f64 = g.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        // Expected: (mean z - z_pos) outer c.
        let mut mean_z = Tensor::<f64>::zeros(&[4]);
        for s in [&sp, &sn1, &sn2] {
            mean_z.add_scaled(&s.pooled[0], 1.0 / 3.0).unwrap();
        }
        let mut diff = mean_z.clone();
        diff.add_scaled(&sp.pooled[0], -1.0).unwrap();
        let expect = crate::tensor::outer(&diff, &sc.pooled[0]).unwrap();
        for (a, b) in g.w_pred.data().iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn cpc_extreme_negative_score_concentrates_probability() {
        let (enc, _) = single_dense_setup(31);
        let sc = enc.forward(&Tensor::from_vec(vec![0.1, 0.2, 0.3])).unwrap();
        let sp = enc.forward(&Tensor::from_vec(vec![0.4, -0.1, 0.2])).unwrap();
        let sn = enc.forward(&Tensor::from_vec(vec![-0.5, 0.3, 0.6])).unwrap();
        let w_pred = Tensor::<f64>::filled(&[4, 4], 0.1);
        // A proxy for a -inf score: an enormous negative pooled vector.
        let huge = Tensor::<f64>::filled(&[4], -1e9);
        let mut neg_state = sn.clone();
        neg_state.pooled[0] = huge;
        let inst = CpcInstance {
            context: CpcSample {
                record: &sc.layers[0],
                pooled: &sc.pooled[0],
            },
            positive: CpcSample {
                record: &sp.layers[0],
                pooled: &sp.pooled[0],
            },
            negatives: vec![CpcSample {
                record: &neg_state.layers[0],
                pooled: &neg_state.pooled[0],
            }],
        };
        let g = cpc_reference_grads(&inst, &w_pred).unwrap();
        assert!(g.probabilities[1] < 1e-12);
        assert!((g.probabilities[0] - 1.0).abs() < 1e-9);
        let sum: f64 = g.probabilities.iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hyperparams_validation() {
        let mut p = hp(Mode::ClappS);
        assert!(p.validate().is_ok());
        p.eta = 0.0;
        assert!(matches!(p.validate(), Err(ClappError::Config { .. })));
        let mut p = hp(Mode::ClappS);
        p.n_negatives = 0;
        assert!(p.validate().is_err());
        let mut p = hp(Mode::Clapp);
        p.delta_t = 0;
        assert!(p.validate().is_err());
    }
}
