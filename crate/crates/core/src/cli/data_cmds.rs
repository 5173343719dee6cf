use std::path::PathBuf;

use clap::Args;

use crate::data::{
    clean_filter, drop_report_csv, image_path, preprocess, read_image, subsample_every_n, synth_corpus, write_image,
    SynthParams, MIN_SIDE,
};
use crate::metrics::{kfold_by_subject, label_stats};

use super::{absolute_images, load_manifest, prepare_out, write_file, write_snapshot, CliError, Flags};

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: u64,
    /// Number of images.
    #[arg(long)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Image side in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Number of AUs (1 to 4).
    #[arg(long, default_value_t = 4)]
    pub aus: usize,
    #[arg(long, default_value_t = 20)]
    pub subjects: usize,
    /// First subject number (use disjoint ranges for disjoint identities).
    #[arg(long, default_value_t = 0)]
    pub subject_offset: usize,
    /// Probability that an AU is inactive.
    #[arg(long, default_value_t = 0.55)]
    pub p_zero: f64,
    /// Ratio between successive nonzero intensity levels.
    #[arg(long, default_value_t = 0.5)]
    pub tail_q: f64,
}

pub fn synth(a: SynthArgs) -> Result<(), CliError> {
    let params = SynthParams {
        seed: a.seed,
        count: a.count,
        image_size: a.size,
        num_aus: a.aus,
        p_zero: a.p_zero,
        tail_q: a.tail_q,
        subjects: a.subjects,
        subject_offset: a.subject_offset,
    };
    params.validate().map_err(CliError::Usage)?;
    prepare_out(&a.out)?;
    let flags: Flags = vec![
        ("seed", a.seed.to_string()),
        ("count", a.count.to_string()),
        ("size", a.size.to_string()),
        ("aus", a.aus.to_string()),
        ("subjects", a.subjects.to_string()),
        ("subject-offset", a.subject_offset.to_string()),
        ("p-zero", a.p_zero.to_string()),
        ("tail-q", a.tail_q.to_string()),
    ];
    write_snapshot(&a.out, "synth", &flags, None)?;
    let corpus = synth_corpus(&params).map_err(CliError::Usage)?;
    for (r, img) in corpus.manifest.records.iter().zip(&corpus.images) {
        write_image(img, &a.out.join(&r.image))?;
    }
    write_file(&a.out.join("manifest.jsonl"), corpus.manifest.to_jsonl()?.as_bytes())?;
    eprintln!("wrote {} images and manifest.jsonl to {}", corpus.images.len(), a.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct SubsampleArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Keep every N-th frame per subject.
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn subsample(a: SubsampleArgs) -> Result<(), CliError> {
    let m = load_manifest(&a.manifest)?;
    if a.n < 1 {
        return Err(CliError::Usage("--n must be at least 1".into()));
    }
    prepare_out(&a.out)?;
    let flags: Flags = vec![("manifest", a.manifest.display().to_string()), ("n", a.n.to_string())];
    write_snapshot(&a.out, "subsample", &flags, None)?;
    let sub = subsample_every_n(&absolute_images(&m, &a.manifest)?, a.n)?;
    write_file(&a.out.join("manifest.jsonl"), sub.to_jsonl()?.as_bytes())?;
    eprintln!("kept {} of {} records (every {}-th frame per subject)", sub.len(), m.len(), a.n);
    Ok(())
}

#[derive(Args, Debug)]
pub struct AlignArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Output side in pixels.
    #[arg(long, default_value_t = 112)]
    pub size: usize,
    /// Extra border around the face box, as a fraction of its side.
    #[arg(long, default_value_t = 0.0)]
    pub margin: f64,
    /// Images with a shorter side are dropped.
    #[arg(long, default_value_t = MIN_SIDE)]
    pub min_side: usize,
}

pub fn align(a: AlignArgs) -> Result<(), CliError> {
    let m = load_manifest(&a.manifest)?;
    if a.size < 1 || !(a.margin >= 0.0) {
        return Err(CliError::Usage("--size must be positive and --margin non-negative".into()));
    }
    prepare_out(&a.out)?;
    let flags: Flags = vec![
        ("manifest", a.manifest.display().to_string()),
        ("size", a.size.to_string()),
        ("margin", a.margin.to_string()),
        ("min-side", a.min_side.to_string()),
    ];
    write_snapshot(&a.out, "align", &flags, None)?;
    let (kept, dropped) = clean_filter(&m, &a.manifest, a.min_side);
    write_file(&a.out.join("dropped.csv"), drop_report_csv(&dropped).as_bytes())?;
    let img_dir = a.out.join("images");
    std::fs::create_dir_all(&img_dir).map_err(|e| CliError::Data(format!("{}: {e}", img_dir.display())))?;
    let mut records = Vec::with_capacity(kept.len());
    for (i, r) in kept.records.iter().enumerate() {
        let img = read_image(&image_path(&a.manifest, r))?;
        let face = preprocess(&img, r, a.margin, a.size)?;
        let ext = if face.channels() == 3 { "ppm" } else { "pgm" };
        let name = format!("images/face_{i:06}.{ext}");
        write_image(&face, &a.out.join(&name))?;
        let mut rec = r.clone();
        rec.image = name;
        rec.landmarks = None;
        rec.bbox = None;
        records.push(rec);
    }
    let mut out = kept.with_records(records);
    out.image_size = Some([a.size, a.size]);
    write_file(&a.out.join("manifest.jsonl"), out.to_jsonl()?.as_bytes())?;
    eprintln!("aligned {} images, dropped {} (see dropped.csv)", out.len(), dropped.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct KfoldArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub k: usize,
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn kfold(a: KfoldArgs) -> Result<(), CliError> {
    let m = load_manifest(&a.manifest)?;
    let folds = kfold_by_subject(&m, a.k, a.seed)?;
    prepare_out(&a.out)?;
    let flags: Flags =
        vec![("manifest", a.manifest.display().to_string()), ("k", a.k.to_string()), ("seed", a.seed.to_string())];
    write_snapshot(&a.out, "kfold", &flags, None)?;
    write_file(&a.out.join("folds.csv"), folds.to_csv().as_bytes())?;
    let sizes: Vec<String> = folds.folds.iter().map(|f| f.len().to_string()).collect();
    println!("subjects per fold: {}", sizes.join("/"));
    Ok(())
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn stats(a: StatsArgs) -> Result<(), CliError> {
    let m = load_manifest(&a.manifest)?;
    prepare_out(&a.out)?;
    write_snapshot(&a.out, "stats", &vec![("manifest", a.manifest.display().to_string())], None)?;
    let s = label_stats(&m);
    write_file(&a.out.join("au_rates.csv"), s.rates_csv().as_bytes())?;
    write_file(&a.out.join("combinations.csv"), s.histogram_csv().as_bytes())?;
    let table = s.to_table();
    write_file(&a.out.join("stats.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(())
}
