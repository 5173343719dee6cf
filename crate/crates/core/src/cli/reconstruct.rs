use std::path::PathBuf;

use clap::Args;

use crate::data::{read_image, to_model_input, DataError, Image};
use crate::losses::{patch_normalize, PATCH_NORM_EPS};
use crate::ndgrad::Tensor;
use crate::rng::{stream, Concern};
use crate::vitmae::{load_weights, patchify, sample_mask, unpatchify, MaskPlan, ModelError, ModelWeights, Task};

use super::{load_manifest, prepare_out, write_file, write_snapshot, CliError, Flags};

/// Gray level of hidden patches in the left panel.
pub const MASK_GRAY: u8 = 128;

/// Three `S × S` panels side by side: masked input, reconstruction, original.
#[derive(Clone, Debug)]
pub struct Triptych {
    pub image: Image,
    pub masked: usize,
}

/// Renders one triptych. Visible patches of the middle panel come from the
/// original; hidden ones from the decoder (de-normalized when the model
/// predicts normalized patches).
pub fn triptych(weights: &ModelWeights, image: &Tensor<f32>, plan: &MaskPlan) -> Result<Triptych, ModelError> {
    let cfg = &weights.config;
    if cfg.task != Task::Pretrain {
        return Err(ModelError::TaskMismatch { expected: "pretrain", found: cfg.task });
    }
    let patches = patchify(image, cfg.patch_size)?;
    let latent = weights.encoder_forward(&patches, plan)?;
    let pred = weights.decoder_forward(&latent, plan)?;
    let pred = if cfg.norm_pix_target { patch_normalize(&patches, PATCH_NORM_EPS).denormalize(&pred) } else { pred };
    let d = cfg.patch_dim();
    let gray = MASK_GRAY as f32 / 255.0;
    let mut masked = patches.clone();
    let mut recon = patches.clone();
    for &i in plan.masked() {
        masked.data_mut()[i * d..(i + 1) * d].fill(gray);
        for (dst, &src) in recon.data_mut()[i * d..(i + 1) * d].iter_mut().zip(&pred.data()[i * d..(i + 1) * d]) {
            *dst = src.clamp(0.0, 1.0);
        }
    }
    let s = cfg.image_size;
    let to_img = |p: &Tensor<f32>| -> Result<Image, ModelError> {
        let t = unpatchify(p, cfg.channels, cfg.patch_size)?;
        Image::from_tensor(&t).map_err(|e| ModelError::Shape(e.to_string()))
    };
    let panels = [to_img(&masked)?, to_img(&recon)?, to_img(&patches)?];
    let mut out = Image::zeros(3, s, 3 * s);
    for (k, panel) in panels.iter().enumerate() {
        let rgb = panel.with_channels(3).map_err(|e| ModelError::Shape(e.to_string()))?;
        for y in 0..s {
            for x in 0..s {
                for c in 0..3 {
                    out.set(y, k * s + x, c, rgb.get(y, x, c));
                }
            }
        }
    }
    Ok(Triptych { image: out, masked: plan.num_masked() })
}

/// Number of patches in the left panel whose pixels are all mask gray.
pub fn mask_census(triptych: &Image, patch: usize) -> usize {
    let s = triptych.height();
    let g = s / patch;
    let mut count = 0;
    for py in 0..g {
        for px in 0..g {
            let all_gray = (0..patch).all(|dy| {
                (0..patch).all(|dx| {
                    (0..triptych.channels()).all(|c| triptych.get(py * patch + dy, px * patch + dx, c) == MASK_GRAY)
                })
            });
            count += all_gray as usize;
        }
    }
    count
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    /// Pre-training checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (PGM/PPM); alternatively use --manifest with --index.
    #[arg(long, conflicts_with = "manifest")]
    pub image: Option<PathBuf>,
    #[arg(long, requires = "index")]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<usize>,
    /// Mask ratios, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0.75")]
    pub ratio: Vec<f64>,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn reconstruct(a: ReconstructArgs) -> Result<(), CliError> {
    if let Some(r) = a.ratio.iter().find(|r| !(0.0..1.0).contains(*r)) {
        return Err(CliError::Usage(format!("mask ratio {r} outside [0, 1)")));
    }
    let (img, source) = match (&a.image, &a.manifest, a.index) {
        (Some(p), _, _) => (read_image(p)?, p.display().to_string()),
        (None, Some(m), Some(i)) => {
            let man = load_manifest(m)?;
            let rec = man
                .records
                .get(i)
                .ok_or_else(|| CliError::Usage(format!("--index {i} out of range ({} records)", man.len())))?;
            (read_image(&crate::data::image_path(m, rec))?, rec.image.clone())
        }
        _ => return Err(CliError::Usage("give --image, or --manifest with --index".into())),
    };
    let weights = load_weights(&a.checkpoint)?;
    prepare_out(&a.out)?;
    let mut flags: Flags = vec![("checkpoint", a.checkpoint.display().to_string())];
    if let Some(p) = &a.image {
        flags.push(("image", p.display().to_string()));
    }
    if let (Some(m), Some(i)) = (&a.manifest, a.index) {
        flags.push(("manifest", m.display().to_string()));
        flags.push(("index", i.to_string()));
    }
    let ratios: Vec<String> = a.ratio.iter().map(|r| r.to_string()).collect();
    flags.push(("ratio", ratios.join(",")));
    flags.push(("seed", a.seed.to_string()));
    write_snapshot(&a.out, "reconstruct", &flags, None)?;

    let cfg = &weights.config;
    let input = to_model_input(&img, cfg.image_size, cfg.channels).map_err(|e: DataError| CliError::Data(e.to_string()))?;
    for &ratio in &a.ratio {
        let plan = sample_mask(cfg.num_patches(), ratio, &mut stream(a.seed, Concern::Mask, 0, 0))?;
        let t = triptych(&weights, &input, &plan)?;
        let name = format!("triptych_r{ratio}.ppm");
        write_file(&a.out.join(&name), &crate::data::encode_pnm(&t.image))?;
        println!("{name}: {source}, ratio {ratio}, {} of {} patches masked", t.masked, plan.len());
    }
    Ok(())
}
