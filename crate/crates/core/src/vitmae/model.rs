use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::ndgrad::{Scalar, Tape, Tensor, Var};
use crate::train::DropPath;

use super::config::{ModelConfig, Task, LN_EPS};
use super::mask::MaskPlan;
use super::params::{layout, BlockParams, Group, ParamKind, ParamSpec, Params};
use super::patch::pos_embed_sincos;
use super::ModelError;

/// Parameter set of the masked autoencoder plus its task head.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: Params<Tensor<T>>,
}

/// A model whose parameters are recorded on a tape.
pub type BoundParams = Params<Var>;

/// Xavier-uniform half-width for a `[fan_in, fan_out]` map.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

const MASK_TOKEN_STD: f64 = 0.02;

impl ModelWeights<f32> {
    /// Fresh weights: Xavier-uniform linear maps, zero biases, unit norm
    /// gains, truncated-normal mask token and fixed sin-cos tables.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self, ModelError> {
        config.validate()?;
        let specs = layout(config);
        let normal = Normal::new(0.0, MASK_TOKEN_STD).expect("valid std");
        let mut err = None;
        let params = specs.map(|s| {
            let shape = s.shape.clone();
            match s.kind {
                ParamKind::Linear => {
                    let b = xavier_bound(s.shape[0], s.shape[1]);
                    Tensor::from_fn(shape, |_| rng.random_range(-b..=b) as f32)
                }
                ParamKind::Bias | ParamKind::NormShift => Tensor::zeros(shape),
                ParamKind::NormGain => Tensor::ones(shape),
                ParamKind::MaskToken => Tensor::from_fn(shape, |_| loop {
                    let v: f64 = normal.sample(rng);
                    if v.abs() <= 2.0 * MASK_TOKEN_STD {
                        break v as f32;
                    }
                }),
                ParamKind::Position => pos_embed_sincos(s.shape[0], s.shape[1]).unwrap_or_else(|e| {
                    err = Some(e);
                    Tensor::zeros(shape)
                }),
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
        Ok(Self { config: config.clone(), params })
    }
}

impl<T: Scalar> ModelWeights<T> {
    pub fn layout(&self) -> Params<ParamSpec> {
        layout(&self.config)
    }

    pub fn cast<U: Scalar>(&self) -> ModelWeights<U> {
        ModelWeights { config: self.config.clone(), params: self.params.map(|t| t.cast()) }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.refs().iter().map(|t| t.numel()).sum()
    }

    /// Records the parameters on `tape`; those rejected by `trainable` become constants.
    pub fn bind(&self, tape: &mut Tape<T>, mut trainable: impl FnMut(&ParamSpec) -> bool) -> BoundParams {
        let specs = self.layout();
        specs.zip_map(&self.params, |s, t| {
            if s.trainable() && trainable(s) {
                tape.param(t)
            } else {
                tape.constant(t.clone())
            }
        })
    }

    /// Encoder over the visible patches of `plan`.
    pub fn encoder_forward(&self, patches: &Tensor<T>, plan: &MaskPlan) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| false);
        let x = tape.constant(patches.clone());
        let out = encode(&mut tape, &self.config, &vars, x, plan, None)?;
        Ok(tape.tensor(out))
    }

    /// Decoder predictions for all patches, in original patch order.
    pub fn decoder_forward(&self, latent: &Tensor<T>, plan: &MaskPlan) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| false);
        let z = tape.constant(latent.clone());
        let out = decode(&mut tape, &self.config, &vars, z, plan, None)?;
        Ok(tape.tensor(out))
    }

    /// Task-head output over all patches: logits (detect) or raw values (intensity).
    pub fn classifier_forward(&self, patches: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, |_| false);
        let x = tape.constant(patches.clone());
        let out = classify(&mut tape, &self.config, &vars, x, None)?;
        Ok(tape.tensor(out))
    }
}

fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var, ModelError> {
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

/// `x + branch`, with the branch dropped or rescaled per stochastic depth.
fn residual<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    branch: Var,
    drop: &mut Option<&mut DropPath>,
) -> Result<Var, ModelError> {
    let branch = match drop {
        Some(dp) => match dp.sample_scale() {
            None => return Ok(x),
            Some(s) if s == 1.0 => branch,
            Some(s) => tape.scale(branch, T::lit(s))?,
        },
        None => branch,
    };
    Ok(tape.add(x, branch)?)
}

fn attention<T: Scalar>(tape: &mut Tape<T>, qkv: Var, width: usize, heads: usize) -> Result<Var, ModelError> {
    let dh = width / heads;
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let q = tape.slice_cols(qkv, h * dh, dh)?;
        let k = tape.slice_cols(qkv, width + h * dh, dh)?;
        let v = tape.slice_cols(qkv, 2 * width + h * dh, dh)?;
        let q = tape.scale(q, scale)?;
        let scores = tape.matmul_t(q, k)?;
        let attn = tape.softmax(scores)?;
        outs.push(tape.matmul(attn, v)?);
    }
    if outs.len() == 1 {
        return Ok(outs[0]);
    }
    Ok(tape.concat_cols(&outs)?)
}

/// Pre-norm block: `x + attn(norm(x))`, then `x + mlp(norm(x))`.
pub fn block_forward<T: Scalar>(
    tape: &mut Tape<T>,
    b: &BlockParams<Var>,
    x: Var,
    heads: usize,
    drop: &mut Option<&mut DropPath>,
) -> Result<Var, ModelError> {
    let eps = T::lit(LN_EPS);
    let width = tape.shape(x)[1];
    let h = tape.layer_norm(x, b.norm1_gamma, b.norm1_beta, eps)?;
    let qkv = linear(tape, h, b.qkv_w, b.qkv_b)?;
    let a = attention(tape, qkv, width, heads)?;
    let a = linear(tape, a, b.proj_w, b.proj_b)?;
    let x = residual(tape, x, a, drop)?;
    let h = tape.layer_norm(x, b.norm2_gamma, b.norm2_beta, eps)?;
    let m = linear(tape, h, b.fc1_w, b.fc1_b)?;
    let m = tape.gelu(m)?;
    let m = linear(tape, m, b.fc2_w, b.fc2_b)?;
    residual(tape, x, m, drop)
}

fn check_patches<T: Scalar>(tape: &Tape<T>, cfg: &ModelConfig, patches: Var) -> Result<(), ModelError> {
    let want = [cfg.num_patches(), cfg.patch_dim()];
    if tape.shape(patches) != want {
        return Err(ModelError::Shape(format!(
            "expected patches {want:?}, got {:?}",
            tape.shape(patches)
        )));
    }
    Ok(())
}

/// Patch projection, position add, visible-token gather, blocks, final norm.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    patches: Var,
    plan: &MaskPlan,
    mut drop: Option<&mut DropPath>,
) -> Result<Var, ModelError> {
    check_patches(tape, cfg, patches)?;
    if plan.len() != cfg.num_patches() {
        return Err(ModelError::Shape(format!(
            "mask plan covers {} patches, model has {}",
            plan.len(),
            cfg.num_patches()
        )));
    }
    let e = &p.encoder;
    let x = linear(tape, patches, e.patch_w, e.patch_b)?;
    let x = tape.add(x, e.pos)?;
    let mut x = if plan.num_masked() == 0 && plan.visible().iter().enumerate().all(|(i, &v)| i == v) {
        x
    } else {
        tape.index_select(x, plan.visible())?
    };
    for b in &e.blocks {
        x = block_forward(tape, b, x, cfg.enc_heads, &mut drop)?;
    }
    Ok(tape.layer_norm(x, e.norm_gamma, e.norm_beta, T::lit(LN_EPS))?)
}

/// Decoder: embed, insert mask tokens, un-shuffle, add positions, blocks, norm, pixel head.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    latent: Var,
    plan: &MaskPlan,
    mut drop: Option<&mut DropPath>,
) -> Result<Var, ModelError> {
    let want = [plan.num_visible(), cfg.enc_width];
    if tape.shape(latent) != want {
        return Err(ModelError::Shape(format!("expected latent {want:?}, got {:?}", tape.shape(latent))));
    }
    let d = &p.decoder;
    let y = linear(tape, latent, d.embed_w, d.embed_b)?;
    let shuffled = if plan.num_masked() > 0 {
        let tokens = tape.index_select(d.mask_token, &vec![0; plan.num_masked()])?;
        tape.concat_rows(&[y, tokens])?
    } else {
        y
    };
    let mut x = tape.index_select(shuffled, &plan.inverse())?;
    x = tape.add(x, d.pos)?;
    for b in &d.blocks {
        x = block_forward(tape, b, x, cfg.dec_heads, &mut drop)?;
    }
    let x = tape.layer_norm(x, d.norm_gamma, d.norm_beta, T::lit(LN_EPS))?;
    linear(tape, x, d.pred_w, d.pred_b)
}

/// Encoder over all patches, token mean, norm, linear head to `num_aus` outputs.
pub fn classify<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    p: &BoundParams,
    patches: Var,
    drop: Option<&mut DropPath>,
) -> Result<Var, ModelError> {
    if !cfg.task.is_finetune() {
        return Err(ModelError::TaskMismatch { expected: "detect or intensity", found: cfg.task });
    }
    let plan = MaskPlan::full(cfg.num_patches());
    let x = encode(tape, cfg, p, patches, &plan, drop)?;
    let pooled = tape.reduce(crate::ndgrad::ReduceKind::Mean, x, Some(0))?;
    let h = &p.head;
    let normed = tape.layer_norm(pooled, h.norm_gamma, h.norm_beta, T::lit(LN_EPS))?;
    let row = tape.reshape(normed, vec![1, cfg.enc_width])?;
    let out = linear(tape, row, h.w, h.b)?;
    Ok(tape.reshape(out, vec![cfg.num_aus])?)
}

/// Parameters that a task updates: encoder+decoder for pre-training, encoder+head otherwise.
pub fn used_by_task(task: Task, group: Group) -> bool {
    match task {
        Task::Pretrain => group != Group::Head,
        Task::Detect | Task::Intensity => group != Group::Decoder,
    }
}
