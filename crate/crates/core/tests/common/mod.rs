#![allow(dead_code)]

use maeface::data::{synth_corpus, SynthParams};
use maeface::losses::{loss_detection, loss_intensity, loss_pretrain, patch_normalize, AULabels, LossFlavor, Reduction, PATCH_NORM_EPS};
use maeface::ndgrad::{grad_check_fn, GradCheckReport, GradError, Tape, Tensor, Var};
use maeface::rng::{stream, Concern, RunRng};
use maeface::train::DropPath;
use maeface::vitmae::{
    classify, decode, encode, patchify, sample_mask, used_by_task, ModelConfig, ModelWeights, Task,
};
use rand::Rng;

pub const H: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

/// Central differences over every coordinate of several inputs.
pub fn check_inputs<F>(inputs: &[Tensor<f64>], f: F) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, GradError>,
{
    let sizes: Vec<usize> = inputs.iter().map(|t| t.numel()).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let rebuild = |x: &[f64]| -> Vec<Tensor<f64>> {
        let mut off = 0;
        inputs
            .iter()
            .zip(&sizes)
            .map(|(t, &n)| {
                let out = Tensor::new(t.shape().to_vec(), x[off..off + n].to_vec()).unwrap();
                off += n;
                out
            })
            .collect()
    };
    let value = |x: &[f64]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = rebuild(x).iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.scalar_value(out)
    };
    let grad = |x: &[f64]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = rebuild(x).iter().map(|t| tape.leaf(&t.clone().with_grad())).collect();
        let out = f(&mut tape, &vars).unwrap();
        tape.backward(out).unwrap();
        vars.iter()
            .zip(&sizes)
            .flat_map(|(&v, &n)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]))
            .collect()
    };
    let coords: Vec<usize> = (0..flat.len()).collect();
    grad_check_fn(value, grad, &flat, &coords, H, TOL)
}

pub fn uniform(rng: &mut RunRng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero (for `abs`).
pub fn away_from_zero(rng: &mut RunRng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m: f64 = rng.random_range(0.1..1.5);
        if rng.random::<bool>() { m } else { -m }
    })
}

/// Weighted sum with fixed pseudo-random coefficients, so each output element
/// gets a distinct upstream gradient.
pub fn probe(tape: &mut Tape<f64>, x: Var) -> Result<Var, GradError> {
    let n = tape.value(x).len();
    let shape = tape.shape(x).to_vec();
    let w = tape.constant(Tensor::from_fn(shape, |i| 0.3 + ((i * 7919) % 13) as f64 / 10.0 - 0.6 * (i % 2) as f64));
    debug_assert_eq!(tape.value(w).len(), n);
    let y = tape.mul(x, w)?;
    tape.sum(y)
}

/// One gradient check per differentiable tape operation.
pub fn op_checks(seed: u64) -> Vec<(&'static str, GradCheckReport)> {
    let mut rng = stream(seed, Concern::Synth, 1, 0);
    let mut out = Vec::new();
    let a = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let b = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    let c = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let row = uniform(&mut rng, &[4], -1.0, 1.0);
    let s = uniform(&mut rng, &[1], -1.0, 1.0);
    let bt = uniform(&mut rng, &[5, 4], -1.0, 1.0);

    out.push(("matmul", check_inputs(&[a.clone(), b.clone()], |t, v| {
        let y = t.matmul(v[0], v[1])?;
        probe(t, y)
    })));
    out.push(("matmul_t", check_inputs(&[a.clone(), bt], |t, v| {
        let y = t.matmul_t(v[0], v[1])?;
        probe(t, y)
    })));
    out.push(("add", check_inputs(&[a.clone(), c.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        probe(t, y)
    })));
    out.push(("add_rows", check_inputs(&[a.clone(), row.clone()], |t, v| {
        let y = t.add(v[0], v[1])?;
        probe(t, y)
    })));
    out.push(("sub_scalar", check_inputs(&[a.clone(), s.clone()], |t, v| {
        let y = t.sub(v[0], v[1])?;
        probe(t, y)
    })));
    out.push(("mul", check_inputs(&[a.clone(), c.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        probe(t, y)
    })));
    out.push(("mul_rows", check_inputs(&[a.clone(), row.clone()], |t, v| {
        let y = t.mul(v[0], v[1])?;
        probe(t, y)
    })));
    out.push(("scale", check_inputs(&[a.clone()], |t, v| {
        let y = t.scale(v[0], -1.7)?;
        probe(t, y)
    })));
    out.push(("gelu", check_inputs(&[uniform(&mut rng, &[3, 4], -3.0, 3.0)], |t, v| {
        let y = t.gelu(v[0])?;
        probe(t, y)
    })));
    out.push(("sigmoid", check_inputs(&[uniform(&mut rng, &[3, 4], -4.0, 4.0)], |t, v| {
        let y = t.sigmoid(v[0])?;
        probe(t, y)
    })));
    out.push(("exp", check_inputs(&[a.clone()], |t, v| {
        let y = t.exp(v[0])?;
        probe(t, y)
    })));
    out.push(("log", check_inputs(&[uniform(&mut rng, &[3, 4], 0.2, 3.0)], |t, v| {
        let y = t.log(v[0])?;
        probe(t, y)
    })));
    out.push(("abs", check_inputs(&[away_from_zero(&mut rng, &[3, 4])], |t, v| {
        let y = t.abs(v[0])?;
        probe(t, y)
    })));
    out.push(("square", check_inputs(&[a.clone()], |t, v| {
        let y = t.square(v[0])?;
        probe(t, y)
    })));
    out.push(("sum", check_inputs(&[a.clone()], |t, v| {
        let y = t.square(v[0])?;
        t.sum(y)
    })));
    out.push(("mean", check_inputs(&[a.clone()], |t, v| {
        let y = t.square(v[0])?;
        t.mean(y)
    })));
    for axis in [0, 1] {
        out.push((if axis == 0 { "mean_axis0" } else { "sum_axis1" }, check_inputs(&[a.clone()], |t, v| {
            let kind = if axis == 0 { maeface::ndgrad::ReduceKind::Mean } else { maeface::ndgrad::ReduceKind::Sum };
            let y = t.reduce(kind, v[0], Some(axis))?;
            probe(t, y)
        })));
    }
    let g = uniform(&mut rng, &[4], 0.5, 1.5);
    out.push(("layer_norm", check_inputs(&[a.clone(), g, row.clone()], |t, v| {
        let y = t.layer_norm(v[0], v[1], v[2], 1e-6)?;
        probe(t, y)
    })));
    out.push(("softmax", check_inputs(&[uniform(&mut rng, &[3, 4], -2.0, 2.0)], |t, v| {
        let y = t.softmax(v[0])?;
        probe(t, y)
    })));
    out.push(("index_select", check_inputs(&[a.clone()], |t, v| {
        let y = t.index_select(v[0], &[2, 0, 2, 1])?;
        probe(t, y)
    })));
    out.push(("slice_cols", check_inputs(&[a.clone()], |t, v| {
        let y = t.slice_cols(v[0], 1, 2)?;
        probe(t, y)
    })));
    out.push(("concat_cols", check_inputs(&[a.clone(), c.clone()], |t, v| {
        let y = t.concat_cols(&[v[0], v[1]])?;
        probe(t, y)
    })));
    out.push(("concat_rows", check_inputs(&[a.clone(), c.clone()], |t, v| {
        let y = t.concat_rows(&[v[0], v[1]])?;
        probe(t, y)
    })));
    out.push(("reshape", check_inputs(&[a.clone()], |t, v| {
        let y = t.reshape(v[0], vec![2, 6])?;
        probe(t, y)
    })));
    let targets: Vec<f64> = (0..4).map(|_| rng.random_range(0.0..1.0)).collect();
    out.push(("bce_with_logits", check_inputs(&[uniform(&mut rng, &[4], -3.0, 3.0)], |t, v| {
        t.bce_with_logits(v[0], &targets, &[1.0, 0.5, 0.0, 2.0])
    })));
    let dp_rng = stream(seed, Concern::DropPath, 0, 0);
    out.push(("drop_path", check_inputs(&[uniform(&mut rng, &[6, 4], -1.0, 1.0)], |t, v| {
        let y = maeface::train::drop_path(t, v[0], 0.5, &mut dp_rng.clone(), true)?;
        probe(t, y)
    })));
    out
}

/// Which end-to-end objective a model-level check differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Pretrain,
    Detect,
    Intensity,
}

impl Objective {
    pub const ALL: [Objective; 3] = [Objective::Pretrain, Objective::Detect, Objective::Intensity];

    pub fn task(self) -> Task {
        match self {
            Objective::Pretrain => Task::Pretrain,
            Objective::Detect => Task::Detect,
            Objective::Intensity => Task::Intensity,
        }
    }
}

/// Finite-difference check of one objective through a full model, probing
/// `per_tensor` random coordinates of every trainable parameter the task uses.
pub fn model_check(cfg: &ModelConfig, objective: Objective, seed: u64, per_tensor: usize) -> GradCheckReport {
    let cfg = cfg.clone().with_task(objective.task());
    let weights: ModelWeights<f64> =
        ModelWeights::<f32>::init(&cfg, &mut stream(seed, Concern::Init, 0, 0)).unwrap().cast();
    let mut sp = SynthParams::new(seed, 1, cfg.image_size);
    sp.num_aus = cfg.num_aus.min(4);
    let corpus = synth_corpus(&sp).unwrap();
    let img = corpus.images[0].to_tensor().cast::<f64>();
    let patches = patchify(&img, cfg.patch_size).unwrap();
    let mut rng = stream(seed, Concern::Synth, 2, 0);
    let plan = sample_mask(cfg.num_patches(), cfg.mask_ratio, &mut rng).unwrap();
    let targets = patch_normalize(&patches, PATCH_NORM_EPS);
    let occ: Vec<u8> = (0..cfg.num_aus).map(|_| rng.random_range(0..2)).collect();
    let lev: Vec<u8> = (0..cfg.num_aus).map(|_| rng.random_range(0..6)).collect();
    let drop_rng = stream(seed, Concern::DropPath, 0, 0);

    let layout = weights.layout();
    let specs = layout.refs();
    let sizes: Vec<usize> = weights.params.refs().iter().map(|t| t.numel()).collect();
    let flat: Vec<f64> = weights.params.refs().iter().flat_map(|t| t.data().to_vec()).collect();
    let mut coords = Vec::new();
    let mut off = 0;
    for (spec, &n) in specs.iter().zip(&sizes) {
        if spec.trainable() && used_by_task(cfg.task, spec.group) {
            for _ in 0..per_tensor {
                coords.push(off + rng.random_range(0..n));
            }
        }
        off += n;
    }

    let with_flat = |x: &[f64]| {
        let mut w = weights.clone();
        let mut off = 0;
        for t in w.params.refs_mut() {
            let n = t.numel();
            t.data_mut().copy_from_slice(&x[off..off + n]);
            off += n;
        }
        w
    };
    let forward = |tape: &mut Tape<f64>, w: &ModelWeights<f64>| -> (Var, Vec<Var>) {
        let bound = w.bind(tape, |s| used_by_task(cfg.task, s.group));
        let vars: Vec<Var> = bound.refs().into_iter().copied().collect();
        let x = tape.constant(patches.clone());
        let mut dp = DropPath::new(0.1, drop_rng.clone()).unwrap();
        let loss = match objective {
            Objective::Pretrain => {
                let latent = encode(tape, &cfg, &bound, x, &plan, Some(&mut dp)).unwrap();
                let pred = decode(tape, &cfg, &bound, latent, &plan, Some(&mut dp)).unwrap();
                loss_pretrain(tape, pred, &targets, &plan, LossFlavor::L2, Reduction::Mean).unwrap()
            }
            Objective::Detect => {
                let logits = classify(tape, &cfg, &bound, x, Some(&mut dp)).unwrap();
                loss_detection(tape, logits, &AULabels::from_occurrence(&occ).unwrap()).unwrap()
            }
            Objective::Intensity => {
                let raw = classify(tape, &cfg, &bound, x, Some(&mut dp)).unwrap();
                let pred = tape.sigmoid(raw).unwrap();
                loss_intensity(tape, pred, &AULabels::from_intensity(&lev).unwrap()).unwrap()
            }
        };
        (loss, vars)
    };
    let value = |x: &[f64]| {
        let mut tape = Tape::new();
        let (loss, _) = forward(&mut tape, &with_flat(x));
        tape.scalar_value(loss)
    };
    let grad = |x: &[f64]| {
        let mut tape = Tape::new();
        let (loss, vars) = forward(&mut tape, &with_flat(x));
        tape.backward(loss).unwrap();
        vars.iter()
            .zip(&sizes)
            .flat_map(|(&v, &n)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]))
            .collect()
    };
    grad_check_fn(value, grad, &flat, &coords, H, TOL)
}
