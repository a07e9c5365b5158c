use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use bitemporal_core::cd_eval::{real_toy_dataset, transfer_experiment, TransferReport};
use bitemporal_core::change::generate_toy_semantic_mask;
use bitemporal_core::dataset::{
    read_all, read_dataset, render_montage, AffineMap, DatasetWriter, MANIFEST_FILE, MONTAGE_GUTTER,
};
use bitemporal_core::denoiser::{
    make_toy_scene, train_denoiser, DenoiserModel, EpsModel, OracleDenoiser, TrainingLog,
};
use bitemporal_core::generator::{generate_dataset, sample_seed, MaskSource, SamplePair};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{CliError, RunConfig, RESOLVED_CONFIG_FILE};

pub const CHECKPOINT_FILE: &str = "denoiser.ckpt";
pub const TRAIN_LOG_FILE: &str = "train_log.csv";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const REPORT_TABLE_FILE: &str = "report.txt";
pub const MONTAGE_DIR: &str = "montages";
/// Montages are rendered for this many leading samples.
pub const MONTAGE_COUNT: usize = 8;

/// Mixed into the base seed of benchmark draws so a benchmark and a
/// synthetic set resolved from one config never share mask layouts.
const REAL_SEED_SALT: u64 = 0x5245_414c_5f54_4f59;

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn prepare_out_dir(out_dir: &Path, cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(out_dir).map_err(|e| CliError::io(out_dir, e))?;
    write_file(&out_dir.join(RESOLVED_CONFIG_FILE), cfg.to_text())
}

fn pool(workers: usize) -> Result<rayon::ThreadPool, CliError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Config(format!("cannot start {workers} workers: {e}")))
}

/// Trains the denoiser on procedural toy scenes and writes the checkpoint,
/// the per-step loss CSV and the resolved config.
pub fn cmd_train_denoiser(cfg: &RunConfig, out_dir: &Path) -> Result<TrainingLog, CliError> {
    prepare_out_dir(out_dir, cfg)?;
    let seed = cfg.seed()?;
    let masks = cfg.mask_params()?;
    let spec = cfg.scene_spec()?;
    let count: usize = cfg.get("train.scenes")?;
    if count == 0 {
        return Err(CliError::Config("train.scenes must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scenes = (0..count)
        .map(|i| {
            let y = generate_toy_semantic_mask(sample_seed(seed, i), &masks);
            Ok((make_toy_scene(&spec, &y, &mut rng)?, y))
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let mut model = DenoiserModel::new(cfg.denoiser_config()?, seed);
    let log = train_denoiser(
        &mut model,
        &scenes,
        &cfg.codec()?,
        &cfg.schedule()?,
        &cfg.train_config()?,
        &mut rng,
    )?;
    if let Some((head, tail)) = log.head_tail_means(100) {
        info!("training loss {head:.4} -> {tail:.4}");
    }
    let ckpt = out_dir.join(CHECKPOINT_FILE);
    let file = fs::File::create(&ckpt).map_err(|e| CliError::io(&ckpt, e))?;
    model.save(BufWriter::new(file))?;
    write_file(&out_dir.join(TRAIN_LOG_FILE), log.to_csv())?;
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum GenerateMode {
    /// Sample with a trained checkpoint.
    Model(PathBuf),
    /// Sample with the analytic class-Gaussian denoiser; no checkpoint.
    Oracle,
    /// Draw the procedural benchmark with a seasonal shift and no sampler.
    Real,
}

/// Loads a checkpoint and checks it against the configured architecture.
pub fn load_checkpoint(cfg: &RunConfig, path: &Path) -> Result<DenoiserModel, CliError> {
    let expected = cfg.denoiser_config()?;
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let model = DenoiserModel::load(std::io::BufReader::new(file), expected.num_classes)
        .map_err(|e| CliError::Arch(format!("{}: {e}", path.display())))?;
    if *model.config() != expected {
        return Err(CliError::Arch(format!(
            "{}: checkpoint architecture {:?} does not match config {:?}",
            path.display(),
            model.config(),
            expected
        )));
    }
    Ok(model)
}

/// Writes a dataset of `generate.count` pairs (or `real.count` benchmark
/// pairs) with montages for the first few, and returns the pairs.
pub fn cmd_generate(
    cfg: &RunConfig,
    mode: &GenerateMode,
    out_dir: &Path,
    workers: usize,
) -> Result<Vec<SamplePair>, CliError> {
    let seed = cfg.seed()?;
    let schedule = cfg.schedule()?;
    let codec = cfg.codec()?;
    let model: Option<Box<dyn EpsModel>> = match mode {
        GenerateMode::Model(path) => Some(Box::new(load_checkpoint(cfg, path)?)),
        GenerateMode::Oracle => Some(Box::new(OracleDenoiser::new(
            cfg.scene_spec()?,
            schedule.clone(),
        ))),
        GenerateMode::Real => None,
    };
    prepare_out_dir(out_dir, cfg)?;
    let pairs = match &model {
        Some(model) => {
            let count: usize = cfg.get("generate.count")?;
            generate_dataset(
                &MaskSource::Toy(cfg.mask_params()?),
                model.as_ref(),
                &codec,
                &schedule,
                &cfg.dataset_config(&schedule)?,
                count,
                seed,
                workers,
            )?
        }
        None => {
            let count: usize = cfg.get("real.count")?;
            let real = cfg.real_config()?;
            pool(workers)?.install(|| real_toy_dataset(count, seed ^ REAL_SEED_SALT, &real))?
        }
    };
    let affine = AffineMap::calibrate(pairs.iter().flat_map(|p| [&p.x_t1, &p.x_t2]));
    let palette = cfg.palette()?;
    let mut writer = DatasetWriter::create(out_dir, affine, &cfg.hash(), &palette)?;
    let montages = out_dir.join(MONTAGE_DIR);
    fs::create_dir_all(&montages).map_err(|e| CliError::io(&montages, e))?;
    let mut clamped = 0;
    for (i, pair) in pairs.iter().enumerate() {
        clamped += writer.write_sample(pair)?.clamped;
        if i < MONTAGE_COUNT {
            let img = render_montage(pair, &palette, &affine, MONTAGE_GUTTER)?;
            write_file(&montages.join(format!("{}.ppm", pair.id)), img.to_bytes())?;
        }
    }
    writer.finish()?;
    if clamped > 0 {
        warn!("{clamped} pixel values clamped to the byte range");
    }
    Ok(pairs)
}

/// Runs the transfer protocol and writes the CSV report, a text table and
/// the resolved config.
pub fn cmd_eval(
    cfg: &RunConfig,
    synthetic_manifest: &Path,
    real_manifest: &Path,
    out_dir: &Path,
    workers: usize,
) -> Result<TransferReport, CliError> {
    let transfer = cfg.transfer_config()?;
    let synthetic = read_all(synthetic_manifest)?;
    let real = read_all(real_manifest)?;
    let real_ids: HashSet<&str> = real.iter().map(|p| p.id.as_str()).collect();
    if let Some(p) = synthetic.iter().find(|p| real_ids.contains(p.id.as_str())) {
        return Err(CliError::Data(format!(
            "sample id `{}` appears in both the synthetic and the real dataset",
            p.id
        )));
    }
    prepare_out_dir(out_dir, cfg)?;
    let report = pool(workers)?.install(|| transfer_experiment(&synthetic, &real, &transfer))?;
    write_file(&out_dir.join(REPORT_CSV_FILE), report.to_csv())?;
    write_file(&out_dir.join(REPORT_TABLE_FILE), report.to_table())?;
    Ok(report)
}

/// Validates every record of a dataset and summarises it. Montages of the
/// first `montages` samples go to `montage_dir` when given.
pub fn cmd_inspect(
    manifest: &Path,
    montage_dir: Option<&Path>,
    montages: usize,
) -> Result<String, CliError> {
    let mut count = 0;
    let mut kinds: BTreeMap<String, usize> = BTreeMap::new();
    let mut changed = 0usize;
    let mut pixels = 0usize;
    let mut shape = None;
    if let Some(dir) = montage_dir {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let first = fs::read_to_string(manifest)
        .map_err(|e| CliError::io(manifest, e))?
        .lines()
        .find(|l| !l.trim().is_empty())
        .map(serde_json::from_str::<serde_json::Value>)
        .transpose()
        .map_err(|e| CliError::Data(format!("{}: {e}", manifest.display())))?;
    let (hash, affine) = match &first {
        Some(v) => (
            v["config_hash"].as_str().unwrap_or("-").to_string(),
            serde_json::from_value::<AffineMap>(v["affine"].clone())
                .map_err(|e| CliError::Data(e.to_string()))?,
        ),
        None => (
            "-".to_string(),
            AffineMap::new(0.0, 1.0).expect("valid range"),
        ),
    };
    for pair in read_dataset(manifest)? {
        let pair = pair?;
        let kind = pair
            .event
            .as_ref()
            .map_or("none".to_string(), |e| e.kind.as_str().to_string());
        *kinds.entry(kind).or_default() += 1;
        changed += pair.change.count_changed();
        pixels += pair.y1.total_pixels();
        shape.get_or_insert((pair.y1.width(), pair.y1.height(), pair.y1.num_classes()));
        if let Some(out) = montage_dir {
            if count < montages {
                let img = render_montage(&pair, pair.y1.palette(), &affine, MONTAGE_GUTTER)?;
                write_file(&out.join(format!("{}.ppm", pair.id)), img.to_bytes())?;
            }
        }
        count += 1;
    }
    let mut out = format!("dataset     {}\n", dir.display());
    out.push_str(&format!("records     {count}\n"));
    out.push_str(&format!("config_hash {hash}\n"));
    if let Some((w, h, c)) = shape {
        out.push_str(&format!("size        {w}x{h}, {c} classes\n"));
        out.push_str(&format!(
            "changed     {:.4} of pixels\n",
            changed as f64 / pixels.max(1) as f64
        ));
        out.push_str(&format!(
            "byte_range  [{:.6}, {:.6}]\n",
            affine.lo, affine.hi
        ));
    }
    for (k, n) in &kinds {
        out.push_str(&format!("event       {k}: {n}\n"));
    }
    Ok(out)
}

/// Path of the manifest inside a dataset directory.
pub fn manifest_in(dir: &Path) -> PathBuf {
    dir.join(MANIFEST_FILE)
}
