//! Discrete state-space scan over per-timestep sampled features.
//!
//! Each step consumes the observed tokens `x_t` together with the model's own
//! prediction of them from the previous step, and emits an enhanced copy of
//! the tokens plus a prediction for the next step:
//!
//! ```text
//! h_t      = A ⊙ h_{t-1} + [x_t, x̃_t] · B
//! x̂_t     = h_t · C
//! x̃_{t+1} = h_t · P
//! ```
//!
//! `A` is diagonal, squashed to `0.999·tanh(a_raw)` so every eigenvalue has
//! magnitude below one. The fed-back prediction is soft-clipped to
//! `c·tanh(x̃/c)` before it re-enters, otherwise `P·B` closes a loop around
//! `A` that can push the effective transition past one. Projection matrices are stored `[in × out]`, i.e. the
//! transposes of the usual `B: N × 2d`, `C: d × N` layout.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{Graph, ParamId, ParamStore, Tape, Tensor, Var};
use crate::nn::normal_tensor;

pub const STABILITY_SCALE: f64 = 0.999;
/// Magnitude bound on the prediction fed back into the next step.
pub const FEEDBACK_CLIP: f64 = 4.0;

/// Feature-axis transform applied around a scan.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    Identity,
    Fft,
}

impl TransformKind {
    /// Token width inside the transformed domain.
    pub fn width(self, channels: usize) -> usize {
        match self {
            TransformKind::Identity => channels,
            TransformKind::Fft => 2 * channels,
        }
    }

    pub fn forward<'t>(self, x: &Var<'t>) -> Var<'t> {
        match self {
            TransformKind::Identity => x.clone(),
            TransformKind::Fft => x.fft_packed(),
        }
    }

    pub fn inverse<'t>(self, y: &Var<'t>) -> Result<Var<'t>> {
        match self {
            TransformKind::Identity => Ok(y.clone()),
            TransformKind::Fft => y.ifft_packed_real(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::Fft => "fft",
        }
    }
}

/// Parameter handles for one SSM block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SsmParams {
    pub kind: TransformKind,
    pub channels: usize,
    pub state_dim: usize,
    pub a_raw: ParamId,
    pub input_proj: ParamId,
    pub output_proj: ParamId,
    pub pred_proj: ParamId,
    /// Maps the final hidden state to query-feature width for mixing.
    pub state_proj: ParamId,
    pub mask_embed: ParamId,
}

impl SsmParams {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: TransformKind,
        channels: usize,
        state_dim: usize,
        query_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(state_dim >= 1, "state_dim must be positive");
        let w = kind.width(channels);
        // Decay rates spread over tanh⁻¹ of roughly [0.3, 0.9].
        let a_raw = Tensor::from_fn(&[state_dim], |_| rng.gen_range(0.3..1.5));
        let input_proj = normal_tensor(&[2 * w, state_dim], 0.5 / ((2 * w) as f64).sqrt(), rng);
        let output_proj = normal_tensor(&[state_dim, w], 0.5 / (state_dim as f64).sqrt(), rng);
        let pred_proj = normal_tensor(&[state_dim, w], 0.5 / (state_dim as f64).sqrt(), rng);
        let state_proj = normal_tensor(&[state_dim, query_dim], 1.0 / (state_dim as f64).sqrt(), rng);
        let mask_embed = normal_tensor(&[channels], 0.02, rng);
        Self {
            kind,
            channels,
            state_dim,
            a_raw: store.add(format!("{name}.a_raw"), a_raw),
            input_proj: store.add(format!("{name}.input_proj"), input_proj),
            output_proj: store.add(format!("{name}.output_proj"), output_proj),
            pred_proj: store.add(format!("{name}.pred_proj"), pred_proj),
            state_proj: store.add(format!("{name}.state_proj"), state_proj),
            mask_embed: store.add(format!("{name}.mask_embed"), mask_embed),
        }
    }

    pub fn bind<'g>(&self, g: &'g Graph<'_>) -> SsmWeights<'g> {
        SsmWeights {
            a: g.param(self.a_raw).tanh().scale(STABILITY_SCALE),
            input: g.param(self.input_proj),
            output: g.param(self.output_proj),
            pred: g.param(self.pred_proj),
        }
    }

    pub fn params(&self) -> [ParamId; 6] {
        [
            self.a_raw,
            self.input_proj,
            self.output_proj,
            self.pred_proj,
            self.state_proj,
            self.mask_embed,
        ]
    }
}

/// Bound weights of one scan: diagonal `a` `[N]`, `input` `[2w × N]`,
/// `output` and `pred` `[N × w]`.
#[derive(Clone, Debug)]
pub struct SsmWeights<'t> {
    pub a: Var<'t>,
    pub input: Var<'t>,
    pub output: Var<'t>,
    pub pred: Var<'t>,
}

impl SsmWeights<'_> {
    pub fn state_dim(&self) -> usize {
        self.a.value().len()
    }

    pub fn width(&self) -> usize {
        self.output.shape()[1]
    }
}

/// Hidden state `h` `[tokens × N]` after `t` steps of decoder layer `layer`.
#[derive(Clone, Debug)]
pub struct SsmState<'t> {
    pub h: Var<'t>,
    pub t: usize,
    pub layer: usize,
}

impl<'t> SsmState<'t> {
    pub fn zeros(tape: &'t Tape, tokens: usize, state_dim: usize, layer: usize) -> Self {
        Self {
            h: tape.constant(Tensor::zeros(&[tokens, state_dim])),
            t: 0,
            layer,
        }
    }

    pub fn tokens(&self) -> usize {
        self.h.shape()[0]
    }
}

/// One recurrence step; returns the new state, the enhanced tokens and the
/// prediction for the next step (all in the transformed domain).
pub fn ssm_step<'t>(
    w: &SsmWeights<'t>,
    state: &SsmState<'t>,
    x_t: &Var<'t>,
    x_pred: &Var<'t>,
) -> Result<(SsmState<'t>, Var<'t>, Var<'t>)> {
    let tokens = state.tokens();
    if x_t.shape()[0] != tokens || x_pred.shape() != x_t.shape() {
        return Err(Error::contract(format!(
            "ssm_step: state holds {tokens} tokens, inputs are {:?} and {:?}",
            x_t.shape(),
            x_pred.shape()
        )));
    }
    let u = Var::concat_last(&[x_t, x_pred])?;
    let h = state.h.mul_row(&w.a)?.add(&u.matmul(&w.input)?)?;
    let y = h.matmul(&w.output)?;
    let y_next = h.matmul(&w.pred)?;
    Ok((
        SsmState {
            h,
            t: state.t + 1,
            layer: state.layer,
        },
        y,
        y_next,
    ))
}

/// Soft clip applied to a prediction before it is fed back as input.
pub fn feedback<'t>(y_next: &Var<'t>) -> Var<'t> {
    y_next.scale(1.0 / FEEDBACK_CLIP).tanh().scale(FEEDBACK_CLIP)
}

/// Token masking for the reconstruction task.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskConfig {
    pub ratio: f64,
    pub seed: u64,
}

/// Replaces each token (row) independently with probability `ratio` by the
/// learned `embed`. Deterministic in `seed`.
pub fn mask_features<'t>(
    f: &Var<'t>,
    ratio: f64,
    seed: u64,
    embed: &Var<'t>,
) -> Result<(Var<'t>, Vec<bool>)> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(Error::contract(format!("mask ratio {ratio} outside [0, 1)")));
    }
    let rows = f.value().rows();
    if ratio == 0.0 {
        return Ok((f.clone(), vec![false; rows]));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mask: Vec<bool> = (0..rows).map(|_| rng.gen_bool(ratio)).collect();
    Ok((f.mask_rows(&mask, embed)?, mask))
}

/// Outputs of one scan. `predicted[i]` is the prediction of step `i + 1`
/// emitted at step `i`; the last one points past the clip.
#[derive(Clone)]
pub struct FeatureBundle<'t> {
    /// Unmasked sampled features, one `[tokens × C]` tensor per step. They
    /// enter the auxiliary losses as fixed targets.
    pub target: Vec<Tensor>,
    pub enhanced: Vec<Var<'t>>,
    pub predicted: Vec<Var<'t>>,
    /// Per step, which tokens were masked.
    pub mask: Vec<Vec<bool>>,
}

impl FeatureBundle<'_> {
    pub fn steps(&self) -> usize {
        self.target.len()
    }
}

/// Runs the recurrence over `inputs` (one `[tokens × C]` var per step).
///
/// Inputs are masked first when `mask` is given (training), then transformed,
/// scanned with each step's prediction fed back (through [`feedback`]) as the
/// next step's second input (zeros at the first step), and transformed back.
pub fn ssm_scan<'t>(
    w: &SsmWeights<'t>,
    inputs: &[Var<'t>],
    kind: TransformKind,
    mask: Option<(MaskConfig, &Var<'t>)>,
    layer: usize,
) -> Result<(FeatureBundle<'t>, SsmState<'t>)> {
    let first = inputs
        .first()
        .ok_or_else(|| Error::contract("ssm_scan needs at least one step"))?;
    let tape = first.tape();
    let tokens = first.shape()[0];
    let width = kind.width(first.value().last_dim());
    if width != w.width() {
        return Err(Error::shape("ssm_scan", first.shape(), w.output.shape()));
    }
    let mut state = SsmState::zeros(tape, tokens, w.state_dim(), layer);
    let mut x_pred = tape.constant(Tensor::zeros(&[tokens, width]));
    let mut bundle = FeatureBundle {
        target: Vec::with_capacity(inputs.len()),
        enhanced: Vec::with_capacity(inputs.len()),
        predicted: Vec::with_capacity(inputs.len()),
        mask: Vec::with_capacity(inputs.len()),
    };
    for (t, x) in inputs.iter().enumerate() {
        bundle.target.push(x.value().clone());
        let x_in = match mask {
            Some((cfg, embed)) => {
                let step_seed = cfg.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
                let (m, flags) = mask_features(x, cfg.ratio, step_seed, embed)?;
                bundle.mask.push(flags);
                m
            }
            None => {
                bundle.mask.push(vec![false; tokens]);
                x.clone()
            }
        };
        let xf = kind.forward(&x_in);
        let (next, y, y_next) = ssm_step(w, &state, &xf, &x_pred)?;
        bundle.enhanced.push(kind.inverse(&y)?);
        bundle.predicted.push(kind.inverse(&y_next)?);
        state = next;
        x_pred = feedback(&y_next);
    }
    Ok((bundle, state))
}

/// Reconstruction and future-prediction losses of one bundle.
pub struct AuxLosses<'t> {
    pub recon: Var<'t>,
    pub future: Var<'t>,
    /// Set when the clip has a single step and the prediction loss is 0 by
    /// definition.
    pub future_undefined: bool,
}

/// Mean squared error per element, averaged over steps:
/// `L_r = 1/T Σ_i mse(x̂_i, x_i)` and `L_f = 1/(T-1) Σ_i mse(x̃_{i+1}, x_{i+1})`.
pub fn aux_losses<'t>(bundle: &FeatureBundle<'t>) -> Result<AuxLosses<'t>> {
    let steps = bundle.steps();
    if steps == 0 || bundle.enhanced.len() != steps || bundle.predicted.len() != steps {
        return Err(Error::contract("aux_losses: inconsistent bundle"));
    }
    let tape = bundle.enhanced[0].tape();
    let mut recon: Option<Var<'t>> = None;
    for (y, f) in bundle.enhanced.iter().zip(&bundle.target) {
        let l = y.mse_to(f)?;
        recon = Some(match recon {
            Some(acc) => acc.add(&l)?,
            None => l,
        });
    }
    let recon = recon.unwrap().scale(1.0 / steps as f64);
    if steps == 1 {
        log::warn!("future-prediction loss undefined for a single-step clip; using 0");
        return Ok(AuxLosses {
            recon,
            future: tape.constant(Tensor::scalar(0.0)),
            future_undefined: true,
        });
    }
    let mut future: Option<Var<'t>> = None;
    for i in 0..steps - 1 {
        let l = bundle.predicted[i].mse_to(&bundle.target[i + 1])?;
        future = Some(match future {
            Some(acc) => acc.add(&l)?,
            None => l,
        });
    }
    Ok(AuxLosses {
        recon,
        future: future.unwrap().scale(1.0 / (steps - 1) as f64),
        future_undefined: false,
    })
}
