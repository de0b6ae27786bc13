//! The five `hgnet` subcommands.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::Args;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hgnet_core::data::phantom::synthesize_phantom;
use hgnet_core::data::{
    assign_splits, denormalize_landmarks, load_manifest, mask_to_input, normalize_landmarks, pgm,
    write_landmarks, Dataset, Image, ManifestEntry, Split,
};
use hgnet_core::graph::Topology;
use hgnet_core::metrics::{
    compute_ctr, ctr_is_normal, evaluate_sample, occlusion_sweep, sweep_to_csv, MetricReport,
    CTR_NORMAL_RANGE,
};
use hgnet_core::model::pca::pca_fit;
use hgnet_core::model::{Mode, Model, ModelKind};
use hgnet_core::tensor::{gradcheck, Tape};
use hgnet_core::train::checkpoint::{load_checkpoint, save_checkpoint};
use hgnet_core::train::{train, LOG_CSV_HEADER};
use hgnet_core::{Error, Result};

use crate::config::{resolve_seed, Overrides, RunConfig};

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// hybrid | hybrid-noigsc | hybrid-1igsc | pca | fc.
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Run directory to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Feed rasterized masks to the encoder instead of images.
    #[arg(long)]
    pub mask_input: bool,
    /// Component count for the pca baseline.
    #[arg(long)]
    pub pca_components: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = RunConfig::resolve(
        args.config.as_deref(),
        &Overrides {
            model: args.model,
            dataset: args.dataset.clone(),
            mask_input: args.mask_input,
            pca_components: args.pca_components,
            epochs: args.epochs,
            seed: args.seed,
        },
    )?;
    let topology = Topology::chest();
    let mut dataset = load_manifest(&cfg.dataset, &topology)?;
    if cfg.mask_input {
        dataset = masked_dataset(dataset)?;
    }

    let mut model = Model::new(
        cfg.model,
        cfg.model_config.clone(),
        &topology,
        cfg.pca_components,
        cfg.train_config.seed,
    )?;
    if cfg.model == ModelKind::Pca {
        install_fitted_basis(&mut model, &dataset)?;
    }

    let out = &args.out;
    fs::create_dir_all(out.join("checkpoints"))?;
    fs::create_dir_all(out.join("reports"))?;
    let encoded = serde_json::to_string_pretty(&cfg)
        .map_err(|e| Error::invalid(format!("config encode: {e}")))?;
    fs::write(out.join("config.json"), encoded)?;

    // Stream rows for tailing; the file is rewritten whole afterwards so a
    // finished run always has a consistent log.
    let log_path = out.join("log.csv");
    let mut stream = fs::File::create(&log_path)?;
    let _ = writeln!(stream, "{LOG_CSV_HEADER}");
    let outcome = train(&mut model, &dataset, &cfg.train_config, |row| {
        let _ = writeln!(stream, "{}", row.csv_row());
        let _ = stream.flush();
    })?;
    drop(stream);
    let mut csv = String::from(LOG_CSV_HEADER);
    csv.push('\n');
    for row in &outcome.log {
        csv.push_str(&row.csv_row());
        csv.push('\n');
    }
    fs::write(&log_path, csv)?;

    save_checkpoint(&outcome.best, &out.join("checkpoints").join("best"))?;
    println!(
        "run {}: {} epochs, best val_loss {:.6} at epoch {}",
        out.display(),
        outcome.log.len(),
        outcome.best.val_loss,
        outcome.best.epoch,
    );
    if outcome.diverged {
        return Err(Error::Numeric(format!(
            "training diverged after epoch {}; last good checkpoint kept",
            outcome.log.len()
        )));
    }
    Ok(())
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint directory (manifest.json + params.bin).
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub dataset: PathBuf,
    /// Split to score: train | val | test.
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Comma-separated occlusion box fractions, e.g. 0,0.25,0.5.
    #[arg(long, value_delimiter = ',')]
    pub occlusion_fracs: Vec<f64>,
    /// Metrics CSV output path.
    #[arg(long, default_value = "metrics.csv")]
    pub report: PathBuf,
    /// Evaluate with rasterized masks as the model input.
    #[arg(long)]
    pub mask_input: bool,
    /// Seed for the occlusion boxes.
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?.to_model()?;
    let mut dataset = load_manifest(&args.dataset, model.topology())?;
    if args.mask_input {
        dataset = masked_dataset(dataset)?;
    }
    let samples = dataset.split(args.split);
    if samples.is_empty() {
        return Err(Error::invalid(format!("no samples in split {}", args.split)));
    }

    let mut report = MetricReport::default();
    for s in &samples {
        let pred = predict_landmarks(&model, &s.image)?;
        report.rows.push(evaluate_sample(&pred, s, model.topology())?);
    }
    report.write_csv(&args.report)?;
    let m = report.mean();
    println!(
        "{} {} samples: mse {:.4} dice lungs/heart {:.4}/{:.4} hd lungs/heart {:.4}/{:.4} mm",
        samples.len(),
        args.split,
        m.mse,
        m.dice_lungs,
        m.dice_heart,
        m.hd_lungs,
        m.hd_heart,
    );

    if !args.occlusion_fracs.is_empty() {
        let seed = resolve_seed(args.seed, 0)?;
        let predict = |img: &Image| predict_landmarks(&model, img);
        let rows = occlusion_sweep(
            &predict,
            &samples,
            model.topology(),
            &args.occlusion_fracs,
            seed,
        )?;
        let path = suffixed(&args.report, "_occlusion");
        fs::write(&path, sweep_to_csv(&rows))?;
        println!("occlusion sweep -> {}", path.display());
    }
    Ok(())
}

#[derive(Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Input image (binary PGM).
    #[arg(long)]
    pub image: PathBuf,
    /// Landmark output file: one `x y` line per node.
    #[arg(long)]
    pub out: PathBuf,
    /// Also print the cardiothoracic ratio.
    #[arg(long)]
    pub ctr: bool,
}

pub fn cmd_infer(args: &InferArgs) -> Result<()> {
    let model = load_checkpoint(&args.checkpoint)?.to_model()?;
    let raw = pgm::read_pgm(&args.image)?;
    let image = Image::new(raw.width, raw.height, raw.to_unit_interval())?;
    let pred = predict_landmarks(&model, &image)?;
    write_landmarks(&args.out, &pred)?;
    println!("wrote {} landmarks to {}", pred.len() / 2, args.out.display());
    if args.ctr {
        let ctr = compute_ctr(&pred, model.topology())?;
        let (lo, hi) = CTR_NORMAL_RANGE;
        let verdict = if ctr_is_normal(ctr) {
            "within"
        } else if ctr < lo {
            "below"
        } else {
            "above"
        };
        println!("CTR {ctr:.6} ({verdict} normal range {lo}-{hi})");
    }
    Ok(())
}

#[derive(Args)]
pub struct SynthArgs {
    /// Number of phantoms.
    #[arg(long)]
    pub count: usize,
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    if args.count == 0 {
        return Err(Error::invalid("--count must be positive"));
    }
    let seed = resolve_seed(args.seed, 0)?;
    let out = &args.out;
    fs::create_dir_all(out.join("images"))?;
    fs::create_dir_all(out.join("landmarks"))?;
    fs::create_dir_all(out.join("masks"))?;

    let splits = assign_splits(args.count);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::with_capacity(args.count);
    for (i, &split) in splits.iter().enumerate() {
        let sample = synthesize_phantom(&mut rng);
        let image_rel = format!("images/sample_{i:03}.pgm");
        let lm_rel = format!("landmarks/sample_{i:03}.txt");
        let mask_rel = format!("masks/sample_{i:03}.pgm");

        let img = pgm::pgm_from_unit_image(
            sample.image.width,
            sample.image.height,
            &sample.image.data,
        )?;
        pgm::write_pgm(&out.join(&image_rel), &img)?;
        write_landmarks(&out.join(&lm_rel), &sample.landmarks)?;
        let mask = sample.mask.as_ref().expect("phantoms carry masks");
        let labels = mask.labels.iter().map(|&l| l as u16).collect();
        pgm::write_pgm(&out.join(&mask_rel), &pgm::Pgm::new(mask.width, mask.height, 2, labels)?)?;

        entries.push(ManifestEntry {
            image: image_rel,
            landmarks: lm_rel,
            mask: Some(mask_rel),
            spacing_mm: sample.spacing_mm,
            split: split.to_string(),
        });
    }
    let manifest = out.join("manifest.json");
    let encoded = serde_json::to_string_pretty(&entries)
        .map_err(|e| Error::invalid(format!("manifest encode: {e}")))?;
    fs::write(&manifest, encoded)?;

    // The freshly written dataset must load back cleanly.
    let ds = load_manifest(&manifest, &Topology::chest())?;
    let (tr, va, te) = ds.split_counts();
    println!(
        "wrote {} phantoms to {} (train {tr} / val {va} / test {te})",
        args.count,
        out.display()
    );
    Ok(())
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Base seed for the input draws.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Random input redraws per operation.
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
}

pub fn cmd_gradcheck(args: &GradcheckArgs) -> Result<()> {
    let seed = resolve_seed(args.seed, 0)?;
    let mut worst: Vec<gradcheck::SuiteEntry> = Vec::new();
    for t in 0..args.trials.max(1) {
        let suite = gradcheck::op_suite_seeded(seed.wrapping_add(t as u64))?;
        if worst.is_empty() {
            worst = suite;
        } else {
            for (w, s) in worst.iter_mut().zip(suite) {
                if s.max_rel_err > w.max_rel_err {
                    w.max_rel_err = s.max_rel_err;
                }
                w.elements += s.elements;
            }
        }
    }

    println!("{:<26} {:>12} {:>8} {:>9} {:>6}", "op", "max_rel_err", "tol", "elements", "status");
    let mut failed = 0;
    for e in &worst {
        let status = if e.pass() { "pass" } else { "FAIL" };
        if !e.pass() {
            failed += 1;
        }
        println!(
            "{:<26} {:>12.3e} {:>8.0e} {:>9} {:>6}",
            e.name, e.max_rel_err, e.tol, e.elements, status
        );
    }
    if failed > 0 {
        return Err(Error::Numeric(format!(
            "{failed} op(s) failed the gradient check"
        )));
    }
    Ok(())
}

/// Infer-mode prediction in pixel coordinates.
fn predict_landmarks(model: &Model, image: &Image) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0); // unused: infer decodes the mean
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, image, Mode::Infer, &mut rng)?;
    let pred = tape.value(pass.outputs.pos_final).data.clone();
    Ok(denormalize_landmarks(&pred, model.config.image_size))
}

/// Replace every sample's image with its rasterized mask.
fn masked_dataset(dataset: Dataset) -> Result<Dataset> {
    let samples = dataset
        .samples
        .into_iter()
        .map(|mut s| {
            let mask = s.mask.as_ref().ok_or_else(|| {
                Error::invalid(format!("sample {}: mask-input mode needs a mask", s.id))
            })?;
            s.image = mask_to_input(mask);
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { samples })
}

/// Fit the shape basis on the train split and freeze it into the model.
fn install_fitted_basis(model: &mut Model, dataset: &Dataset) -> Result<()> {
    let train_samples = dataset.split(Split::Train);
    if train_samples.is_empty() {
        return Err(Error::invalid("pca fit needs a nonempty train split"));
    }
    let size = model.config.image_size;
    let d = 2 * model.topology().total_nodes();
    let mut rows = Vec::with_capacity(train_samples.len() * d);
    for s in &train_samples {
        rows.extend(normalize_landmarks(&s.landmarks, size));
    }
    let nc = model.pca_components.expect("pca model carries a component count");
    let basis = pca_fit(&rows, train_samples.len(), d, nc)?;
    model.install_pca_basis(&basis)
}

/// `metrics.csv` -> `metrics_occlusion.csv`.
fn suffixed(path: &Path, tag: &str) -> PathBuf {
    let stem = path.file_stem().unwrap_or_default().to_string_lossy();
    let ext = path.extension().map(|e| e.to_string_lossy().into_owned());
    let name = match ext {
        Some(e) => format!("{stem}{tag}.{e}"),
        None => format!("{stem}{tag}"),
    };
    path.with_file_name(name)
}
