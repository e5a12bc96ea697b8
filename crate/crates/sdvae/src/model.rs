//! SDVAE networks and objectives.
//!
//! A shared encoder trunk feeds two heads: a Gaussian head for the
//! non-interpretable variable u and a categorical head for the disentangled
//! variable v. The decoder reconstructs pixels from u‖v. Four objectives
//! are provided: the two-latent ELBO, SDVAE-I (cross-entropy equality
//! constraint), SDVAE-II (score-function constraint with entropy bonus),
//! and the all-unlabeled objective.
//!
//! Notes on choices the source model leaves open: the categorical prior
//! p(v) is uniform over K classes; the decoder likelihood is Bernoulli on
//! binarized pixels by default with a unit-variance Gaussian option;
//! SDVAE-I decodes from the expected v (simplex row) while SDVAE-II
//! decodes from the sampled one-hot, so each objective's gradient
//! estimator is well-defined.

use crate::autodiff::{AdError, ConvMeta, NodeId, Tape};
use crate::distributions::{
    bernoulli_recon_loglik, categorical_entropy, categorical_kl_uniform, gaussian_kl_standard,
    gaussian_recon_loglik, one_hot, sample_categorical_rows, CategoricalPosterior, DistError,
    GaussianPosterior, NoiseSample, NoiseSource,
};
use crate::flow::{flow_init, flow_kl_u, flow_step, FlowError, FlowStep};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("usage error: {0}")]
    Usage(String),
}

impl ModelError {
    /// True for errors caused by non-finite numbers rather than misuse;
    /// the trainer treats these as divergence, not hard failures.
    pub fn is_numeric(&self) -> bool {
        match self {
            ModelError::Ad(_) => true,
            ModelError::Dist(DistError::Ad(_) | DistError::NonPositiveSigma { .. }) => true,
            ModelError::Flow(FlowError::Ad(_)) => true,
            ModelError::Flow(FlowError::Dist(d)) => {
                matches!(d, DistError::Ad(_) | DistError::NonPositiveSigma { .. })
            }
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Mlp,
    Conv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReconKind {
    Bernoulli,
    Gaussian,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    /// (out channels, kernel, stride) per layer.
    pub layers: Vec<(usize, usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Arch {
    pub dim_x: usize,
    pub dim_u: usize,
    pub k: usize,
    pub enc_hidden: Vec<usize>,
    pub dec_hidden: Vec<usize>,
    pub flow_length: usize,
    pub encoder: EncoderKind,
    pub conv: Option<ConvSpec>,
    pub dropout: f64,
    pub recon: ReconKind,
}

impl Arch {
    pub fn mlp(dim_x: usize, dim_u: usize, k: usize) -> Self {
        Arch {
            dim_x,
            dim_u,
            k,
            enc_hidden: vec![256, 128],
            dec_hidden: vec![128],
            flow_length: 1,
            encoder: EncoderKind::Mlp,
            conv: None,
            dropout: 0.1,
            recon: ReconKind::Bernoulli,
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.dim_x == 0 || self.dim_u == 0 || self.k == 0 {
            return Err(ModelError::Config(
                "dim_x, dim_u and k must be positive".into(),
            ));
        }
        if self.enc_hidden.is_empty() {
            return Err(ModelError::Config("enc_hidden must be non-empty".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!(
                "dropout rate {} outside [0,1)",
                self.dropout
            )));
        }
        if self.encoder == EncoderKind::Conv {
            let spec = self
                .conv
                .as_ref()
                .ok_or_else(|| ModelError::Config("conv encoder needs a conv spec".into()))?;
            if spec.in_ch * spec.in_h * spec.in_w != self.dim_x {
                return Err(ModelError::Config(format!(
                    "conv input {}x{}x{} does not match dim_x {}",
                    spec.in_ch, spec.in_h, spec.in_w, self.dim_x
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    pub tensors: Vec<ParamTensor>,
}

impl ParamStore {
    fn add(&mut self, name: String, shape: Vec<usize>, values: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.tensors.push(ParamTensor {
            name,
            shape,
            values,
        });
        self.tensors.len() - 1
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .iter()
            .all(|t| t.values.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: usize,
    b: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvLayer {
    w: usize,
    b: usize,
    meta: ConvMeta,
}

#[derive(Debug, Clone, Copy)]
struct FlowIdx {
    w_delta: usize,
    b_delta: usize,
    w_pi: usize,
    b_pi: usize,
}

#[derive(Debug, Clone, Default)]
struct Layout {
    conv: Vec<ConvLayer>,
    trunk: Vec<Lin>,
    u_head: Option<Lin>,
    v_head: Option<Lin>,
    dec: Vec<Lin>,
    dec_out: Option<Lin>,
    flow: Vec<FlowIdx>,
}

#[derive(Debug, Clone)]
pub struct ModelParams {
    pub arch: Arch,
    pub store: ParamStore,
    layout: Layout,
}

impl ModelParams {
    pub fn new(arch: Arch, seed: u64) -> Result<Self, ModelError> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let mut layout = Layout::default();

        let normal = |rng: &mut ChaCha8Rng, len: usize, std: f64| -> Vec<f64> {
            (0..len)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z * std
                })
                .collect()
        };

        let mut trunk_in = arch.dim_x;
        if arch.encoder == EncoderKind::Conv {
            let spec = arch.conv.as_ref().unwrap();
            let (mut ch, mut h, mut w) = (spec.in_ch, spec.in_h, spec.in_w);
            for (li, &(out_ch, kernel, stride)) in spec.layers.iter().enumerate() {
                let meta = ConvMeta {
                    in_ch: ch,
                    out_ch,
                    in_h: h,
                    in_w: w,
                    kernel,
                    stride,
                };
                let fan_in = ch * kernel * kernel;
                let wlen = out_ch * fan_in;
                let wv = normal(&mut rng, wlen, 1.0 / (fan_in as f64).sqrt());
                let widx = store.add(format!("enc.conv.{li}.w"), vec![out_ch, fan_in], wv);
                let out_len = out_ch * meta.out_h() * meta.out_w();
                let bidx = store.add(
                    format!("enc.conv.{li}.b"),
                    vec![1, out_len],
                    vec![0.0; out_len],
                );
                layout.conv.push(ConvLayer {
                    w: widx,
                    b: bidx,
                    meta,
                });
                ch = out_ch;
                h = meta.out_h();
                w = meta.out_w();
            }
            trunk_in = ch * h * w;
        }

        let lin = |store: &mut ParamStore,
                       rng: &mut ChaCha8Rng,
                       name: &str,
                       din: usize,
                       dout: usize|
         -> Lin {
            let wv = (0..din * dout)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    z / (din as f64).sqrt()
                })
                .collect();
            let w = store.add(format!("{name}.w"), vec![din, dout], wv);
            let b = store.add(format!("{name}.b"), vec![1, dout], vec![0.0; dout]);
            Lin { w, b }
        };

        let mut d = trunk_in;
        for (i, &hdim) in arch.enc_hidden.iter().enumerate() {
            layout
                .trunk
                .push(lin(&mut store, &mut rng, &format!("enc.trunk.{i}"), d, hdim));
            d = hdim;
        }
        layout.u_head = Some(lin(&mut store, &mut rng, "enc.u_head", d, 2 * arch.dim_u));
        layout.v_head = Some(lin(&mut store, &mut rng, "enc.v_head", d, arch.k));

        let mut dd = arch.dim_u + arch.k;
        for (i, &hdim) in arch.dec_hidden.iter().enumerate() {
            layout
                .dec
                .push(lin(&mut store, &mut rng, &format!("dec.{i}"), dd, hdim));
            dd = hdim;
        }
        layout.dec_out = Some(lin(&mut store, &mut rng, "dec.out", dd, arch.dim_x));

        for t in 0..arch.flow_length {
            let du = arch.dim_u;
            let wd = normal(&mut rng, du * du, 1.0 / (du as f64).sqrt());
            let w_delta = store.add(format!("flow.{t}.w_delta"), vec![du, du], wd);
            // bias +1 so delta starts near sigmoid(1) ~ 0.73
            let b_delta = store.add(format!("flow.{t}.b_delta"), vec![1, du], vec![1.0; du]);
            let wp = normal(&mut rng, du * du, 1.0 / (du as f64).sqrt());
            let w_pi = store.add(format!("flow.{t}.w_pi"), vec![du, du], wp);
            let b_pi = store.add(format!("flow.{t}.b_pi"), vec![1, du], vec![0.0; du]);
            layout.flow.push(FlowIdx {
                w_delta,
                b_delta,
                w_pi,
                b_pi,
            });
        }

        Ok(ModelParams {
            arch,
            store,
            layout,
        })
    }

    pub fn num_params(&self) -> usize {
        self.store.tensors.iter().map(|t| t.values.len()).sum()
    }

    /// Places every parameter tensor on the tape as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        let ids = self
            .store
            .tensors
            .iter()
            .map(|t| tape.leaf(t.values.clone(), t.shape.clone()))
            .collect();
        Bound { ids }
    }

    /// Copies gradients out of the tape in store order.
    pub fn collect_grads(&self, tape: &Tape, bound: &Bound) -> Vec<Vec<f64>> {
        bound.ids.iter().map(|&id| tape.grad(id).to_vec()).collect()
    }

    /// Overwrites parameter values from a flat vector (gradcheck plumbing).
    pub fn set_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for t in &mut self.store.tensors {
            let len = t.values.len();
            t.values.copy_from_slice(&flat[off..off + len]);
            off += t.values.len();
        }
        assert_eq!(off, flat.len());
    }

    pub fn get_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for t in &self.store.tensors {
            out.extend_from_slice(&t.values);
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Bound {
    pub ids: Vec<NodeId>,
}

impl Bound {
    fn id(&self, idx: usize) -> NodeId {
        self.ids[idx]
    }
}

/// One minibatch; unlabeled rows carry no label at all, which is what keeps
/// hidden labels out of every loss path.
#[derive(Debug, Clone)]
pub struct Batch {
    pub x: Vec<f64>,
    pub n: usize,
    pub dim_x: usize,
    pub labels: Vec<Option<usize>>,
}

impl Batch {
    pub fn new(x: Vec<f64>, n: usize, dim_x: usize, labels: Vec<Option<usize>>) -> Self {
        assert_eq!(x.len(), n * dim_x);
        assert_eq!(labels.len(), n);
        Batch {
            x,
            n,
            dim_x,
            labels,
        }
    }

    pub fn unlabeled(x: Vec<f64>, n: usize, dim_x: usize) -> Self {
        let labels = vec![None; n];
        Batch::new(x, n, dim_x, labels)
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.iter().filter(|l| l.is_some()).count()
    }

    /// One-hot label matrix with all-zero rows for unlabeled examples.
    pub fn y_matrix(&self, k: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.n * k];
        for (i, l) in self.labels.iter().enumerate() {
            if let Some(c) = l {
                y[i * k + c] = 1.0;
            }
        }
        y
    }

    pub fn concat(a: &Batch, b: &Batch) -> Batch {
        assert_eq!(a.dim_x, b.dim_x);
        let mut x = a.x.clone();
        x.extend_from_slice(&b.x);
        let mut labels = a.labels.clone();
        labels.extend_from_slice(&b.labels);
        Batch::new(x, a.n + b.n, a.dim_x, labels)
    }
}

/// All stochastic inputs to one loss evaluation, drawn up front so every
/// objective is a deterministic function of (params, batch, noise).
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    pub eps: NoiseSample,
    pub v_uniform: Vec<f64>,
    /// One mask per trunk FC layer, entries in {0, 1/(1-rate)}.
    pub dropout_masks: Option<Vec<Vec<f64>>>,
    /// Pins the categorical sample instead of drawing it from v_uniform;
    /// used by gradient checks that must hold the sample fixed.
    pub v_forced: Option<Vec<usize>>,
}

impl NoiseBundle {
    pub fn draw(src: &mut NoiseSource, arch: &Arch, n: usize, train: bool) -> Self {
        let eps = src.standard_normal(n, arch.dim_u);
        let v_uniform = src.uniform(n);
        let dropout_masks = if train && arch.dropout > 0.0 {
            let keep = 1.0 - arch.dropout;
            Some(
                arch.enc_hidden
                    .iter()
                    .map(|&h| {
                        src.uniform(n * h)
                            .into_iter()
                            .map(|u| if u < keep { 1.0 / keep } else { 0.0 })
                            .collect()
                    })
                    .collect(),
            )
        } else {
            None
        };
        NoiseBundle {
            eps,
            v_uniform,
            dropout_masks,
            v_forced: None,
        }
    }

    /// Deterministic bundle for evaluation paths: zero noise, no dropout.
    pub fn deterministic(arch: &Arch, n: usize) -> Self {
        NoiseBundle {
            eps: NoiseSample::zeros(n, arch.dim_u),
            v_uniform: vec![0.0; n],
            dropout_masks: None,
            v_forced: None,
        }
    }
}

/// Shared trunk, then the two posterior heads.
pub fn encode(
    tape: &mut Tape,
    model: &ModelParams,
    bound: &Bound,
    x: NodeId,
    dropout_masks: Option<&Vec<Vec<f64>>>,
) -> Result<(GaussianPosterior, CategoricalPosterior), ModelError> {
    let n = tape.shape(x)[0];
    if tape.shape(x)[1] != model.arch.dim_x {
        return Err(ModelError::Config(format!(
            "input has {} columns, config says dim_x={}",
            tape.shape(x)[1],
            model.arch.dim_x
        )));
    }
    let mut h = x;
    for layer in &model.layout.conv {
        let c = tape.conv2d(h, bound.id(layer.w), layer.meta)?;
        let c = tape.add(c, bound.id(layer.b))?;
        h = tape.relu(c)?;
    }
    for (i, layer) in model.layout.trunk.iter().enumerate() {
        let z = tape.matmul(h, bound.id(layer.w))?;
        let z = tape.add(z, bound.id(layer.b))?;
        h = tape.tanh(z)?;
        if let Some(masks) = dropout_masks {
            let shape = tape.shape(h).to_vec();
            let m = tape.leaf(masks[i].clone(), shape);
            h = tape.mul(h, m)?;
        }
        let _ = n;
    }
    let uh = model.layout.u_head.unwrap();
    let uo = tape.matmul(h, bound.id(uh.w))?;
    let uo = tape.add(uo, bound.id(uh.b))?;
    let mu = tape.slice_cols(uo, 0, model.arch.dim_u)?;
    let log_var = tape.slice_cols(uo, model.arch.dim_u, 2 * model.arch.dim_u)?;
    let gauss = GaussianPosterior::from_raw(tape, mu, log_var)?;

    let vh = model.layout.v_head.unwrap();
    let vo = tape.matmul(h, bound.id(vh.w))?;
    let logits = tape.add(vo, bound.id(vh.b))?;
    let cat = CategoricalPosterior::from_logits(tape, logits)?;
    Ok((gauss, cat))
}

/// Pixel logits from the column-concatenation u‖v.
pub fn decode(
    tape: &mut Tape,
    model: &ModelParams,
    bound: &Bound,
    u: NodeId,
    v: NodeId,
) -> Result<NodeId, ModelError> {
    let mut h = tape.concat_cols(u, v)?;
    for layer in &model.layout.dec {
        let z = tape.matmul(h, bound.id(layer.w))?;
        let z = tape.add(z, bound.id(layer.b))?;
        h = tape.tanh(z)?;
    }
    let out = model.layout.dec_out.unwrap();
    let z = tape.matmul(h, bound.id(out.w))?;
    Ok(tape.add(z, bound.id(out.b))?)
}

fn bound_flow_step(bound: &Bound, idx: &FlowIdx) -> FlowStep {
    FlowStep {
        w_delta: bound.id(idx.w_delta),
        b_delta: bound.id(idx.b_delta),
        w_pi: bound.id(idx.w_pi),
        b_pi: bound.id(idx.b_pi),
    }
}

/// Everything the objectives share: posteriors, flow, sampling, decode,
/// and the three ELBO ingredients as per-example [n,1] nodes.
pub struct Core {
    pub gauss: GaussianPosterior,
    pub cat: CategoricalPosterior,
    pub u: NodeId,
    pub kl_u: NodeId,
    pub kl_v: NodeId,
    pub re: NodeId,
    pub v_sample: Vec<usize>,
    pub decode_sampled: bool,
}

pub fn forward_core(
    tape: &mut Tape,
    model: &ModelParams,
    bound: &Bound,
    batch: &Batch,
    noise: &NoiseBundle,
    decode_sampled: bool,
) -> Result<Core, ModelError> {
    let x = tape.leaf(batch.x.clone(), vec![batch.n, batch.dim_x]);
    let (gauss, cat) = encode(tape, model, bound, x, noise.dropout_masks.as_ref())?;

    // flow over u; T = 0 degenerates to the plain reparameterized sample
    // with the closed-form KL
    let mut state = flow_init(tape, &gauss, &noise.eps, model.arch.flow_length)?;
    for idx in &model.layout.flow {
        let step = bound_flow_step(bound, idx);
        state = flow_step(tape, state, &step)?;
    }
    let kl_u = if model.arch.flow_length == 0 {
        gaussian_kl_standard(tape, &gauss)?
    } else {
        flow_kl_u(tape, &state)?
    };
    let u = state.u;
    let kl_v = categorical_kl_uniform(tape, &cat)?;

    let k = model.arch.k;
    let v_sample = match &noise.v_forced {
        Some(forced) => forced.clone(),
        None => sample_categorical_rows(tape.values(cat.probs), batch.n, k, &noise.v_uniform),
    };
    let v_dec = if decode_sampled {
        tape.leaf(one_hot(&v_sample, k), vec![batch.n, k])
    } else {
        cat.probs
    };
    let logits = decode(tape, model, bound, u, v_dec)?;
    let re = match model.arch.recon {
        ReconKind::Bernoulli => bernoulli_recon_loglik(tape, logits, x)?,
        ReconKind::Gaussian => gaussian_recon_loglik(tape, logits, x)?,
    };
    Ok(Core {
        gauss,
        cat,
        u,
        kl_u,
        kl_v,
        re,
        v_sample,
        decode_sampled,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineMode {
    /// Per-row mean of the v_probs entries; exactly 1/K for simplex rows.
    ProbsMean,
    /// Mean reward over the minibatch.
    BatchRewardMean,
}

#[derive(Debug, Clone, Copy)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    pub mu: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub baseline: BaselineMode,
    /// Overrides the per-variant default decode path.
    pub decode_sampled: Option<bool>,
}

impl ObjectiveConfig {
    fn validate(&self) -> Result<(), ModelError> {
        if self.lambda < 0.0 {
            return Err(ModelError::Config("lambda must be >= 0".into()));
        }
        if self.mu < 0.0 {
            return Err(ModelError::Config("mu must be >= 0".into()));
        }
        if self.beta1 < 0.0 || self.beta2 < 0.0 {
            return Err(ModelError::Config("beta1 and beta2 must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct LossBreakdown {
    pub total: NodeId,
    pub total_value: f64,
    pub re: Vec<f64>,
    pub kl_u: Vec<f64>,
    pub kl_v: Vec<f64>,
    pub entropy: Vec<f64>,
    pub constraint: Vec<f64>,
    pub reward: Vec<f64>,
    pub baseline: Vec<f64>,
    pub v_sample: Vec<usize>,
}

/// Per-row Eq.-10 value re − λ(kl_u + kl_v), plus the core it came from.
pub fn elbo_terms(
    tape: &mut Tape,
    model: &ModelParams,
    bound: &Bound,
    batch: &Batch,
    noise: &NoiseBundle,
    lambda: f64,
    decode_sampled: bool,
) -> Result<(Core, NodeId), ModelError> {
    let core = forward_core(tape, model, bound, batch, noise, decode_sampled)?;
    let kl_sum = tape.add(core.kl_u, core.kl_v)?;
    let penal = tape.scale(kl_sum, lambda)?;
    let per_row = tape.sub(core.re, penal)?;
    Ok((core, per_row))
}

fn reward_values(tape: &Tape, core: &Core, n: usize) -> Vec<f64> {
    let re = tape.values(core.re);
    let ku = tape.values(core.kl_u);
    let kv = tape.values(core.kl_v);
    (0..n).map(|i| re[i] - (ku[i] + kv[i])).collect()
}

/// SDVAE-I: total = −mean[re − λ(kl_u+kl_v) + μ·U], U the label
/// cross-entropy on labeled rows and 0 on unlabeled rows.
pub fn sdvae1_loss(
    tape: &mut Tape,
    model: &ModelParams,
    bound: &Bound,
    batch: &Batch,
    noise: &NoiseBundle,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown, ModelError> {
    cfg.validate()?;
    let decode_sampled = cfg.decode_sampled.unwrap_or(false);
    let (core, per_row) = elbo_terms(tape, model, bound, batch, noise, cfg.lambda, decode_sampled)?;
    let h = categorical_entropy(tape, &core.cat)?;

    let mut obj = per_row;
    let mut constraint = vec![0.0; batch.n];
    if batch.labeled_count() > 0 && cfg.mu > 0.0 {
        let y = tape.leaf(batch.y_matrix(model.arch.k), vec![batch.n, model.arch.k]);
        let sel = tape.mul(y, core.cat.log_probs)?;
        let u_term = tape.row_sum(sel)?;
        constraint = tape.values(u_term).to_vec();
        let scaled = tape.scale(u_term, cfg.mu)?;
        obj = tape.add(obj, scaled)?;
    }
    let m = tape.mean(obj)?;
    let total = tape.scale(m, -1.0)?;
    Ok(LossBreakdown {
        total_value: tape.values(total)[0],
        re: tape.values(core.re).to_vec(),
        kl_u: tape.values(core.kl_u).to_vec(),
        kl_v: tape.values(core.kl_v).to_vec(),
        entropy: tape.values(h).to_vec(),
        constraint,
        reward: reward_values(tape, &core, batch.n),
        baseline: Vec::new(),
        v_sample: core.v_sample,
        total,
    })
}

fn sdvae2_inner(
    tape: &mut Tape,
    model: &ModelParams,
    bound: &Bound,
    batch: &Batch,
    noise: &NoiseBundle,
    cfg: &ObjectiveConfig,
    frozen_coeff: Option<&[f64]>,
) -> Result<LossBreakdown, ModelError> {
    cfg.validate()?;
    let decode_sampled = cfg.decode_sampled.unwrap_or(true);
    let (core, per_row) = elbo_terms(tape, model, bound, batch, noise, cfg.lambda, decode_sampled)?;
    let h = categorical_entropy(tape, &core.cat)?;
    let k = model.arch.k;

    // R = re − (kl_u + kl_v), unweighted by λ by definition
    let reward = reward_values(tape, &core, batch.n);
    let baseline: Vec<f64> = match cfg.baseline {
        BaselineMode::ProbsMean => {
            let p = tape.values(core.cat.probs);
            (0..batch.n)
                .map(|i| p[i * k..(i + 1) * k].iter().sum::<f64>() / k as f64)
                .collect()
        }
        BaselineMode::BatchRewardMean => {
            let mean = reward.iter().sum::<f64>() / batch.n as f64;
            vec![mean; batch.n]
        }
    };

    let mut obj = per_row;
    let mut constraint = vec![0.0; batch.n];
    if cfg.beta1 > 0.0 {
        // score-function surrogate: coefficient is a constant in the graph
        // so the gradient matches (β1 R − c)∇log q; labeled rows select the
        // true class, unlabeled rows the sampled one
        let coeff: Vec<f64> = match frozen_coeff {
            Some(c) => c.to_vec(),
            None => (0..batch.n)
                .map(|i| cfg.beta1 * reward[i] - baseline[i])
                .collect(),
        };
        let mut sel = vec![0.0; batch.n * k];
        for i in 0..batch.n {
            let class = match batch.labels[i] {
                Some(c) => c,
                None => core.v_sample[i],
            };
            sel[i * k + class] = 1.0;
        }
        let sel_leaf = tape.leaf(sel, vec![batch.n, k]);
        let picked = tape.mul(sel_leaf, core.cat.log_probs)?;
        let log_q_sel = tape.row_sum(picked)?;
        let coeff_leaf = tape.leaf(coeff, vec![batch.n, 1]);
        let surrogate = tape.mul(coeff_leaf, log_q_sel)?;
        constraint = tape.values(surrogate).to_vec();
        obj = tape.add(obj, surrogate)?;
    }
    if cfg.beta2 > 0.0 {
        let hb = tape.scale(h, cfg.beta2)?;
        obj = tape.add(obj, hb)?;
    }
    let m = tape.mean(obj)?;
    let total = tape.scale(m, -1.0)?;
    Ok(LossBreakdown {
        total_value: tape.values(total)[0],
        re: tape.values(core.re).to_vec(),
        kl_u: tape.values(core.kl_u).to_vec(),
        kl_v: tape.values(core.kl_v).to_vec(),
        entropy: tape.values(h).to_vec(),
        constraint,
        reward,
        baseline,
        v_sample: core.v_sample,
        total,
    })
}

/// SDVAE-II: ELBO plus the reinforced label constraint and entropy bonus.
pub fn sdvae2_loss(
    tape: &mut Tape,
    model: &ModelParams,
    bound: &Bound,
    batch: &Batch,
    noise: &NoiseBundle,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown, ModelError> {
    sdvae2_inner(tape, model, bound, batch, noise, cfg, None)
}

/// SDVAE-II with the score-function coefficient pinned to the supplied
/// per-row values. Gradient checks need this: the coefficient is a
/// stopped-gradient factor, so differentiating through its recomputation
/// would compare against the wrong target.
pub fn sdvae2_loss_frozen(
    tape: &mut Tape,
    model: &ModelParams,
    bound: &Bound,
    batch: &Batch,
    noise: &NoiseBundle,
    cfg: &ObjectiveConfig,
    coeff: &[f64],
) -> Result<LossBreakdown, ModelError> {
    sdvae2_inner(tape, model, bound, batch, noise, cfg, Some(coeff))
}

/// All-unlabeled objective: total = −mean[re − λ(kl_u+kl_v) + β2·H].
pub fn unlabeled_loss(
    tape: &mut Tape,
    model: &ModelParams,
    bound: &Bound,
    batch: &Batch,
    noise: &NoiseBundle,
    cfg: &ObjectiveConfig,
) -> Result<LossBreakdown, ModelError> {
    if batch.labeled_count() > 0 {
        return Err(ModelError::Usage(
            "unlabeled_loss called with labeled rows present".into(),
        ));
    }
    let cfg2 = ObjectiveConfig {
        beta1: 0.0,
        ..*cfg
    };
    sdvae2_inner(tape, model, bound, batch, noise, &cfg2, None)
}

/// Argmax over q(v|x) rows; ties break toward the lowest index.
pub fn predict(model: &ModelParams, x: &[f64], n: usize) -> Result<Vec<usize>, ModelError> {
    let probs = predict_probs(model, x, n)?;
    let k = model.arch.k;
    Ok((0..n).map(|i| argmax(&probs[i * k..(i + 1) * k])).collect())
}

pub fn predict_probs(model: &ModelParams, x: &[f64], n: usize) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xl = tape.leaf(x.to_vec(), vec![n, model.arch.dim_x]);
    let (_, cat) = encode(&mut tape, model, &bound, xl, None)?;
    Ok(tape.values(cat.probs).to_vec())
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentMask {
    None,
    MaskU,
    MaskV,
}

/// Deterministic reconstruction used by evaluation and the exporters:
/// eps = 0 (u₀ = μ), flow applied, expected v; the chosen latent is zeroed.
/// Returns (pixel means, per-example reconstruction log-likelihood).
pub fn reconstruct(
    model: &ModelParams,
    x: &[f64],
    n: usize,
    mask: LatentMask,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xl = tape.leaf(x.to_vec(), vec![n, model.arch.dim_x]);
    let (gauss, cat) = encode(&mut tape, model, &bound, xl, None)?;
    let noise = NoiseSample::zeros(n, model.arch.dim_u);
    let mut state = flow_init(&mut tape, &gauss, &noise, model.arch.flow_length)?;
    for idx in &model.layout.flow {
        let step = bound_flow_step(&bound, idx);
        state = flow_step(&mut tape, state, &step)?;
    }
    let u = match mask {
        LatentMask::MaskU => tape.leaf(vec![0.0; n * model.arch.dim_u], vec![n, model.arch.dim_u]),
        _ => state.u,
    };
    let v = match mask {
        LatentMask::MaskV => tape.leaf(vec![0.0; n * model.arch.k], vec![n, model.arch.k]),
        _ => cat.probs,
    };
    let logits = decode(&mut tape, model, &bound, u, v)?;
    let re = match model.arch.recon {
        ReconKind::Bernoulli => bernoulli_recon_loglik(&mut tape, logits, xl)?,
        ReconKind::Gaussian => gaussian_recon_loglik(&mut tape, logits, xl)?,
    };
    let means: Vec<f64> = match model.arch.recon {
        ReconKind::Bernoulli => tape
            .values(logits)
            .iter()
            .map(|&l| crate::autodiff::sigmoid(l))
            .collect(),
        ReconKind::Gaussian => tape.values(logits).to_vec(),
    };
    Ok((means, tape.values(re).to_vec()))
}

/// Posterior summaries for export: (v_probs rows, u mean rows).
pub fn encode_latents(
    model: &ModelParams,
    x: &[f64],
    n: usize,
) -> Result<(Vec<f64>, Vec<f64>), ModelError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xl = tape.leaf(x.to_vec(), vec![n, model.arch.dim_x]);
    let (gauss, cat) = encode(&mut tape, model, &bound, xl, None)?;
    Ok((
        tape.values(cat.probs).to_vec(),
        tape.values(gauss.mu).to_vec(),
    ))
}

// ── checkpoint format ──────────────────────────────────────────────────
// magic, version, JSON arch header, then per tensor: name, shape, f64 LE
// values. Round-trips bit-exactly.

const CKPT_MAGIC: &[u8; 8] = b"SDVAECP\x01";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

impl ModelParams {
    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&1u32.to_be_bytes());
        let arch = serde_json::to_vec(&self.arch)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        buf.extend_from_slice(&(arch.len() as u32).to_be_bytes());
        buf.extend_from_slice(&arch);
        buf.extend_from_slice(&(self.store.tensors.len() as u32).to_be_bytes());
        for t in &self.store.tensors {
            let name = t.name.as_bytes();
            buf.extend_from_slice(&(name.len() as u32).to_be_bytes());
            buf.extend_from_slice(name);
            buf.extend_from_slice(&(t.shape.len() as u32).to_be_bytes());
            for &d in &t.shape {
                buf.extend_from_slice(&(d as u32).to_be_bytes());
            }
            for &v in &t.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut off = 0usize;
        let take = |off: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
            if *off + n > bytes.len() {
                return Err(CheckpointError::Malformed(format!(
                    "truncated at byte {off}"
                )));
            }
            let s = &bytes[*off..*off + n];
            *off += n;
            Ok(s)
        };
        if take(&mut off, 8)? != CKPT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let ver = u32::from_be_bytes(take(&mut off, 4)?.try_into().unwrap());
        if ver != 1 {
            return Err(CheckpointError::BadVersion(ver));
        }
        let alen = u32::from_be_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let arch: Arch = serde_json::from_slice(take(&mut off, alen)?)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        let count = u32::from_be_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        // rebuild structure from the arch, then overwrite values
        let mut model = ModelParams::new(arch, 0)
            .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        if model.store.tensors.len() != count {
            return Err(CheckpointError::Malformed(format!(
                "tensor count {} does not match arch ({})",
                count,
                model.store.tensors.len()
            )));
        }
        for t in &mut model.store.tensors {
            let nlen = u32::from_be_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut off, nlen)?)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?
                .to_string();
            if name != t.name {
                return Err(CheckpointError::Malformed(format!(
                    "tensor name {name} does not match expected {}",
                    t.name
                )));
            }
            let ndim = u32::from_be_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u32::from_be_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize);
            }
            if shape != t.shape {
                return Err(CheckpointError::Malformed(format!(
                    "tensor {name} shape {shape:?} does not match expected {:?}",
                    t.shape
                )));
            }
            let len: usize = shape.iter().product();
            let mut values = Vec::with_capacity(len);
            for _ in 0..len {
                values.push(f64::from_le_bytes(take(&mut off, 8)?.try_into().unwrap()));
            }
            t.values = values;
        }
        if off != bytes.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                bytes.len() - off
            )));
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_difference_check;

    fn tiny_arch() -> Arch {
        Arch {
            dim_x: 4,
            dim_u: 2,
            k: 2,
            enc_hidden: vec![5],
            dec_hidden: vec![4],
            flow_length: 1,
            encoder: EncoderKind::Mlp,
            conv: None,
            dropout: 0.0,
            recon: ReconKind::Bernoulli,
        }
    }

    fn tiny_batch(n: usize, labels: Vec<Option<usize>>) -> Batch {
        let x: Vec<f64> = (0..n * 4).map(|i| ((i * 7) % 2) as f64).collect();
        Batch::new(x, n, 4, labels)
    }

    fn cfg() -> ObjectiveConfig {
        ObjectiveConfig {
            lambda: 0.1,
            mu: 1.0,
            beta1: 0.1,
            beta2: 1.0,
            baseline: BaselineMode::ProbsMean,
            decode_sampled: None,
        }
    }

    #[test]
    fn zero_weight_heads_give_flat_posteriors() {
        let mut model = ModelParams::new(tiny_arch(), 3).unwrap();
        for t in &mut model.store.tensors {
            if t.name.starts_with("enc.u_head") || t.name.starts_with("enc.v_head") {
                t.values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.leaf(vec![0.5; 8], vec![2, 4]);
        let (g, c) = encode(&mut tape, &model, &bound, x, None).unwrap();
        assert!(tape.values(g.mu).iter().all(|&v| v == 0.0));
        assert!(tape.values(g.sigma).iter().all(|&v| v == 1.0));
        assert!(tape.values(c.probs).iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn identical_inputs_give_identical_posteriors() {
        let model = ModelParams::new(tiny_arch(), 3).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let row = vec![1.0, 0.0, 1.0, 1.0];
        let mut x = row.clone();
        x.extend_from_slice(&row);
        let xl = tape.leaf(x, vec![2, 4]);
        let (g, c) = encode(&mut tape, &model, &bound, xl, None).unwrap();
        let mu = tape.values(g.mu);
        assert_eq!(&mu[..2], &mu[2..]);
        let p = tape.values(c.probs);
        assert_eq!(&p[..2], &p[2..]);
    }

    #[test]
    fn perturbing_a_pixel_moves_both_heads() {
        let model = ModelParams::new(tiny_arch(), 5).unwrap();
        let x0 = vec![0.5, 0.5, 0.5, 0.5];
        let mut x1 = x0.clone();
        x1[2] += 0.25;
        let get = |x: &[f64]| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape);
            let xl = tape.leaf(x.to_vec(), vec![1, 4]);
            let (g, c) = encode(&mut tape, &model, &bound, xl, None).unwrap();
            (tape.values(g.mu).to_vec(), tape.values(c.probs).to_vec())
        };
        let (mu0, p0) = get(&x0);
        let (mu1, p1) = get(&x1);
        assert!(mu0.iter().zip(&mu1).any(|(a, b)| a != b));
        assert!(p0.iter().zip(&p1).any(|(a, b)| a != b));
    }

    #[test]
    fn decode_is_deterministic_and_shapes_check() {
        let model = ModelParams::new(tiny_arch(), 5).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let u = tape.leaf(vec![0.1, -0.4], vec![1, 2]);
        let v = tape.leaf(vec![0.7, 0.3], vec![1, 2]);
        let l1 = decode(&mut tape, &model, &bound, u, v).unwrap();
        let l2 = decode(&mut tape, &model, &bound, u, v).unwrap();
        assert_eq!(tape.values(l1), tape.values(l2));
        assert_eq!(tape.shape(l1), &[1, 4]);
    }

    #[test]
    fn zero_decoder_weights_give_bias_logits() {
        let mut model = ModelParams::new(tiny_arch(), 5).unwrap();
        for t in &mut model.store.tensors {
            if t.name.starts_with("dec.") && t.name.ends_with(".w") {
                t.values.iter_mut().for_each(|v| *v = 0.0);
            }
            if t.name == "dec.out.b" {
                t.values.iter_mut().for_each(|v| *v = 0.25);
            }
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let u = tape.leaf(vec![1.0, 2.0], vec![1, 2]);
        let v = tape.leaf(vec![0.0, 1.0], vec![1, 2]);
        let l = decode(&mut tape, &model, &bound, u, v).unwrap();
        assert!(tape.values(l).iter().all(|&x| (x - 0.25).abs() < 1e-12));
    }

    #[test]
    fn sdvae1_unlabeled_is_negated_elbo_mean_bitwise() {
        let model = ModelParams::new(tiny_arch(), 9).unwrap();
        let batch = tiny_batch(3, vec![None, None, None]);
        let mut src = NoiseSource::new(4);
        let noise = NoiseBundle::draw(&mut src, &model.arch, 3, true);
        let c = cfg();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let loss = sdvae1_loss(&mut tape, &model, &bound, &batch, &noise, &c).unwrap();

        let mut tape2 = Tape::new();
        let bound2 = model.bind(&mut tape2);
        let (_, per_row) =
            elbo_terms(&mut tape2, &model, &bound2, &batch, &noise, c.lambda, false).unwrap();
        let m = tape2.mean(per_row).unwrap();
        let neg = tape2.scale(m, -1.0).unwrap();
        assert_eq!(
            loss.total_value.to_bits(),
            tape2.values(neg)[0].to_bits()
        );
    }

    #[test]
    fn sdvae1_mu_zero_matches_no_label_case() {
        let model = ModelParams::new(tiny_arch(), 9).unwrap();
        let mut src = NoiseSource::new(4);
        let noise = NoiseBundle::draw(&mut src, &model.arch, 2, true);
        let c0 = ObjectiveConfig { mu: 0.0, ..cfg() };
        let labeled = tiny_batch(2, vec![Some(0), Some(1)]);
        let unlabeled = tiny_batch(2, vec![None, None]);

        let mut t1 = Tape::new();
        let b1 = model.bind(&mut t1);
        let l1 = sdvae1_loss(&mut t1, &model, &b1, &labeled, &noise, &c0).unwrap();
        let mut t2 = Tape::new();
        let b2 = model.bind(&mut t2);
        let l2 = sdvae1_loss(&mut t2, &model, &b2, &unlabeled, &noise, &c0).unwrap();
        assert_eq!(l1.total_value.to_bits(), l2.total_value.to_bits());
    }

    #[test]
    fn sdvae1_uniform_posterior_label_shifts_total_by_log_k_over_n() {
        // uniform v_probs: U = log(1/K); with mu=1 the total moves by
        // exactly -U/n versus mu=0
        let mut model = ModelParams::new(tiny_arch(), 9).unwrap();
        for t in &mut model.store.tensors {
            if t.name.starts_with("enc.v_head") {
                t.values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let n = 4;
        let mut labels = vec![None; n];
        labels[1] = Some(1);
        let batch = tiny_batch(n, labels);
        let mut src = NoiseSource::new(4);
        let noise = NoiseBundle::draw(&mut src, &model.arch, n, true);

        let run = |mu: f64| {
            let c = ObjectiveConfig { mu, ..cfg() };
            let mut t = Tape::new();
            let b = model.bind(&mut t);
            sdvae1_loss(&mut t, &model, &b, &batch, &noise, &c)
                .unwrap()
                .total_value
        };
        let diff = run(1.0) - run(0.0);
        let expected = (2f64).ln() / n as f64; // K = 2 here
        assert!((diff - expected).abs() < 1e-12, "diff {diff}");
    }

    #[test]
    fn reward_is_independent_of_lambda() {
        let model = ModelParams::new(tiny_arch(), 9).unwrap();
        let batch = tiny_batch(3, vec![Some(0), None, None]);
        let mut src = NoiseSource::new(4);
        let noise = NoiseBundle::draw(&mut src, &model.arch, 3, true);
        let run = |lambda: f64| {
            let c = ObjectiveConfig { lambda, ..cfg() };
            let mut t = Tape::new();
            let b = model.bind(&mut t);
            sdvae2_loss(&mut t, &model, &b, &batch, &noise, &c).unwrap()
        };
        let a = run(0.1);
        let b = run(1.0);
        assert_eq!(a.reward, b.reward);
        assert_ne!(a.total_value.to_bits(), b.total_value.to_bits());
    }

    #[test]
    fn sdvae2_all_unlabeled_beta1_zero_equals_unlabeled_loss_bitwise() {
        let model = ModelParams::new(tiny_arch(), 9).unwrap();
        let batch = tiny_batch(3, vec![None, None, None]);
        let mut src = NoiseSource::new(4);
        let noise = NoiseBundle::draw(&mut src, &model.arch, 3, true);
        let c = ObjectiveConfig {
            beta1: 0.0,
            ..cfg()
        };
        let mut t1 = Tape::new();
        let b1 = model.bind(&mut t1);
        let l1 = sdvae2_loss(&mut t1, &model, &b1, &batch, &noise, &c).unwrap();
        let mut t2 = Tape::new();
        let b2 = model.bind(&mut t2);
        let l2 = unlabeled_loss(&mut t2, &model, &b2, &batch, &noise, &c).unwrap();
        assert_eq!(l1.total_value.to_bits(), l2.total_value.to_bits());
    }

    #[test]
    fn unlabeled_loss_rejects_labeled_rows() {
        let model = ModelParams::new(tiny_arch(), 9).unwrap();
        let batch = tiny_batch(2, vec![Some(1), None]);
        let mut src = NoiseSource::new(4);
        let noise = NoiseBundle::draw(&mut src, &model.arch, 2, true);
        let mut t = Tape::new();
        let b = model.bind(&mut t);
        assert!(matches!(
            unlabeled_loss(&mut t, &model, &b, &batch, &noise, &cfg()),
            Err(ModelError::Usage(_))
        ));
    }

    #[test]
    fn entropy_bonus_shifts_unlabeled_total_by_log_k_over_n() {
        let mut model = ModelParams::new(tiny_arch(), 9).unwrap();
        for t in &mut model.store.tensors {
            if t.name.starts_with("enc.v_head") {
                t.values.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let n = 4;
        let batch = tiny_batch(n, vec![None; 4]);
        let mut src = NoiseSource::new(4);
        let noise = NoiseBundle::draw(&mut src, &model.arch, n, true);
        let run = |beta2: f64| {
            let c = ObjectiveConfig {
                beta2,
                beta1: 0.0,
                ..cfg()
            };
            let mut t = Tape::new();
            let b = model.bind(&mut t);
            unlabeled_loss(&mut t, &model, &b, &batch, &noise, &c)
                .unwrap()
                .total_value
        };
        // entropy is log K per row; total decreases by beta2 * log K / n...
        // mean over rows keeps it log K, so the shift is just beta2 * log K
        let diff = run(0.0) - run(1.0);
        assert!((diff - (2f64).ln()).abs() < 1e-12, "diff {diff}");
    }

    #[test]
    fn predict_tie_breaks_low_and_follows_argmax() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.8, 0.1]), 1);
    }

    #[test]
    fn predict_invariant_under_monotone_logit_shift() {
        let model = ModelParams::new(tiny_arch(), 21).unwrap();
        let x: Vec<f64> = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0];
        let p = predict_probs(&model, &x, 2).unwrap();
        let k = model.arch.k;
        for i in 0..2 {
            let row = &p[i * k..(i + 1) * k];
            let base = argmax(row);
            // monotone transforms of a row
            let shifted: Vec<f64> = row.iter().map(|v| 3.0 * v + 7.0).collect();
            let exped: Vec<f64> = row.iter().map(|v| v.exp()).collect();
            assert_eq!(argmax(&shifted), base);
            assert_eq!(argmax(&exped), base);
        }
    }

    #[test]
    fn kl_v_gradient_wrt_u_head_is_exactly_zero() {
        let model = ModelParams::new(tiny_arch(), 33).unwrap();
        let batch = tiny_batch(2, vec![None, None]);
        let mut src = NoiseSource::new(4);
        let noise = NoiseBundle::draw(&mut src, &model.arch, 2, true);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let core = forward_core(&mut tape, &model, &bound, &batch, &noise, false).unwrap();
        let m = tape.mean(core.kl_v).unwrap();
        tape.backward(m).unwrap();
        for (i, t) in model.store.tensors.iter().enumerate() {
            if t.name.starts_with("enc.u_head") {
                assert!(tape.grad(bound.ids[i]).iter().all(|&g| g == 0.0));
            }
        }
    }

    #[test]
    fn full_objective_gradients_match_finite_differences() {
        // 4-pixel, K=2, dim_u=2 instance; frozen noise and v samples
        let model0 = ModelParams::new(tiny_arch(), 17).unwrap();
        let batch = tiny_batch(3, vec![Some(1), None, None]);
        let mut src = NoiseSource::new(8);
        let mut noise = NoiseBundle::draw(&mut src, &model0.arch, 3, true);
        let point = model0.get_flat();
        // pin the categorical sample and the surrogate coefficient at the
        // base point; both are stopped-gradient quantities
        {
            let mut tape = Tape::new();
            let bound = model0.bind(&mut tape);
            let base =
                sdvae2_loss(&mut tape, &model0, &bound, &batch, &noise, &cfg()).unwrap();
            noise.v_forced = Some(base.v_sample.clone());
        }
        let frozen_coeff: Vec<f64> = {
            let mut tape = Tape::new();
            let bound = model0.bind(&mut tape);
            let base =
                sdvae2_loss(&mut tape, &model0, &bound, &batch, &noise, &cfg()).unwrap();
            base.reward
                .iter()
                .zip(&base.baseline)
                .map(|(r, b)| cfg().beta1 * r - b)
                .collect()
        };
        for variant in ["sdvae1", "sdvae2", "unlabeled"] {
            let batch = if variant == "unlabeled" {
                tiny_batch(3, vec![None, None, None])
            } else {
                batch.clone()
            };
            let report = finite_difference_check(
                |p| {
                    let mut m = model0.clone();
                    m.set_flat(p);
                    let mut tape = Tape::new();
                    let bound = m.bind(&mut tape);
                    let c = cfg();
                    let loss = match variant {
                        "sdvae1" => sdvae1_loss(&mut tape, &m, &bound, &batch, &noise, &c),
                        "sdvae2" => sdvae2_loss_frozen(
                            &mut tape,
                            &m,
                            &bound,
                            &batch,
                            &noise,
                            &c,
                            &frozen_coeff,
                        ),
                        _ => unlabeled_loss(&mut tape, &m, &bound, &batch, &noise, &c),
                    }
                    .map_err(|_| AdError::NonDeterministic)?;
                    tape.backward(loss.total)?;
                    let grads = m.collect_grads(&tape, &bound);
                    Ok((loss.total_value, grads.concat()))
                },
                &point,
                1e-5 * 0.1, // 1e-6
            )
            .unwrap();
            assert!(
                report.max_rel_err < 1e-5,
                "{variant} rel err {}",
                report.max_rel_err
            );
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = ModelParams::new(tiny_arch(), 55).unwrap();
        let dir = std::env::temp_dir().join("sdvae_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("m.ckpt");
        model.save(&path).unwrap();
        let loaded = ModelParams::load(&path).unwrap();
        assert_eq!(model.store.tensors.len(), loaded.store.tensors.len());
        for (a, b) in model.store.tensors.iter().zip(&loaded.store.tensors) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.shape, b.shape);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // corrupted magic
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad = dir.join("bad.ckpt");
        std::fs::write(&bad, &bytes).unwrap();
        assert!(matches!(
            ModelParams::load(&bad),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn conv_encoder_forward_and_gradcheck() {
        let arch = Arch {
            dim_x: 36,
            dim_u: 2,
            k: 2,
            enc_hidden: vec![6],
            dec_hidden: vec![5],
            flow_length: 0,
            encoder: EncoderKind::Conv,
            conv: Some(ConvSpec {
                in_ch: 1,
                in_h: 6,
                in_w: 6,
                layers: vec![(2, 3, 1), (3, 2, 2)],
            }),
            dropout: 0.0,
            recon: ReconKind::Bernoulli,
        };
        let model0 = ModelParams::new(arch, 2).unwrap();
        let x: Vec<f64> = (0..2 * 36).map(|i| ((i * 5) % 3 == 0) as u8 as f64).collect();
        let batch = Batch::new(x, 2, 36, vec![Some(0), None]);
        let mut src = NoiseSource::new(8);
        let noise = NoiseBundle::draw(&mut src, &model0.arch, 2, true);
        let point = model0.get_flat();
        let report = finite_difference_check(
            |p| {
                let mut m = model0.clone();
                m.set_flat(p);
                let mut tape = Tape::new();
                let bound = m.bind(&mut tape);
                let loss = sdvae1_loss(&mut tape, &m, &bound, &batch, &noise, &cfg())
                    .map_err(|_| AdError::NonDeterministic)?;
                tape.backward(loss.total)?;
                Ok((loss.total_value, m.collect_grads(&tape, &bound).concat()))
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-5, "rel err {}", report.max_rel_err);
    }
}
