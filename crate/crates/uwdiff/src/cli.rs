//! Command-line interface: one binary, six subcommands covering labeling,
//! training, enhancement, evaluation, and the ablation grids.
//!
//! Every run is reproducible from `(config file, --set overrides, seed)`;
//! the effective configuration is echoed next to each command's outputs.

use crate::checkpoint::{self, DiffusionCheckpoint, EstimatorCheckpoint};
use crate::config::{load_config, AppConfig};
use crate::data;
use crate::denoiser::Denoiser;
use crate::estimator::{train_estimator, Estimator, LabeledPair};
use crate::metrics::{self, LabelRange};
use crate::trainer::{
    self, run_ablation, train_range, DegradationSource, RunManifest, TrainState,
};
use crate::{Error, Result};
use clap::{Parser, Subcommand};
use std::path::{Path, PathBuf};

/// Environment variable naming a directory searched for checkpoints given
/// by bare relative paths.
pub const CKPT_CACHE_ENV: &str = "UWDIFF_CKPT_CACHE";

#[derive(Parser)]
#[command(
    name = "uwdiff",
    version,
    about = "Degradation-aware conditional diffusion for underwater image enhancement"
)]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Dotted-path override applied after the file, e.g. `train.lr=5e-4`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Write PSNR-derived degradation labels for the paired corpus.
    Label {
        /// Corpus root (defaults to the configured data.root).
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Output CSV path; the label range lands beside it as JSON.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the degradation regressor on the configured corpus.
    TrainEstimator {
        /// Run directory for the checkpoint, history, and config echo.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the conditional diffusion model.
    TrainDiffusion {
        /// Run directory for checkpoints, manifest, and metric logs.
        #[arg(long)]
        out: PathBuf,
        /// Estimator checkpoint for degradation scores; omitted, labels are
        /// teacher-forced from the paired corpus.
        #[arg(long)]
        estimator: Option<PathBuf>,
        /// Continue from the run directory's saved state.
        #[arg(long)]
        resume: bool,
    },
    /// Run the reverse chain on every image in a directory.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Directory of raw input images.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Chain start timestep (defaults to the checkpoint's full schedule).
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 1)]
        stride: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Estimator checkpoint scoring each input's degradation.
        #[arg(long)]
        estimator: Option<PathBuf>,
        /// Fixed degradation score used without an estimator.
        #[arg(long, default_value_t = 0.5)]
        degradation: f64,
        /// Also write raw|enhanced comparison panels under `grid/`.
        #[arg(long)]
        grid: bool,
    },
    /// Score a directory of images with full- and no-reference metrics.
    Eval {
        /// Directory of predictions.
        #[arg(long)]
        pred: PathBuf,
        /// Directory of references with matching filenames; omitted, only
        /// the no-reference columns are produced.
        #[arg(long)]
        reference: Option<PathBuf>,
        /// CSV output path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional JSON copy of the same rows.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Train the module and loss ablation grids and tabulate the results.
    Ablate {
        /// Run directory for both comparison tables.
        #[arg(long)]
        out: PathBuf,
        /// Estimator checkpoint for degradation scores (else teacher-forced).
        #[arg(long)]
        estimator: Option<PathBuf>,
    },
}

/// Resolves a checkpoint path, falling back to `$UWDIFF_CKPT_CACHE/<path>`
/// for bare names that do not exist locally.
pub fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.exists() || path.is_absolute() {
        return path.to_path_buf();
    }
    if let Ok(cache) = std::env::var(CKPT_CACHE_ENV) {
        let cached = Path::new(&cache).join(path);
        if cached.exists() {
            return cached;
        }
    }
    path.to_path_buf()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Echoes the effective configuration next to a command's outputs.
fn echo_config(cfg: &AppConfig, dir: &Path) -> Result<()> {
    checkpoint::atomic_write(&dir.join("config.toml"), cfg.to_toml()?.as_bytes())
}

fn write_csv_rows<T: serde::Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row)
            .map_err(|e| Error::Config(format!("csv encode: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv encode: {e}")))?;
    checkpoint::atomic_write(path, &bytes)
}

/// Sorted image files (by name) directly under `dir`. Non-image entries are
/// skipped with a warning so stray files never abort a batch.
fn image_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let ok = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| {
                matches!(
                    e.to_ascii_lowercase().as_str(),
                    "png" | "jpg" | "jpeg"
                )
            })
            .unwrap_or(false);
        if ok {
            files.push(path);
        } else {
            log::warn!("skipping non-image file {}", path.display());
        }
    }
    files.sort();
    Ok(files)
}

fn file_stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(serde::Serialize)]
struct LabelRow {
    id: String,
    psnr: f64,
    degradation: f64,
}

fn cmd_label(cfg: &AppConfig, corpus: Option<&Path>, out: &Path) -> Result<()> {
    let root = corpus.unwrap_or(&cfg.data.root);
    let pairs = data::load_corpus(root, cfg.data.side)?;
    let range = LabelRange::from_pairs(&pairs)?;
    let rows: Vec<LabelRow> = pairs
        .iter()
        .map(|p| {
            let psnr = metrics::psnr(
                &p.raw.view().into_dyn(),
                &p.reference.view().into_dyn(),
                1.0,
            )?;
            Ok(LabelRow {
                id: p.id.clone(),
                psnr,
                degradation: metrics::degradation_label(p, &range)?,
            })
        })
        .collect::<Result<_>>()?;
    write_csv_rows(out, &rows)?;
    let range_path = out.with_extension("range.json");
    checkpoint::atomic_write(
        &range_path,
        serde_json::to_vec_pretty(&range)
            .map_err(|e| Error::Config(format!("range encode: {e}")))?
            .as_slice(),
    )?;
    if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        echo_config(cfg, dir)?;
    }
    println!(
        "labeled {} pairs from {} -> {}",
        rows.len(),
        root.display(),
        out.display()
    );
    Ok(())
}

fn cmd_train_estimator(cfg: &AppConfig, out: &Path) -> Result<()> {
    ensure_dir(out)?;
    let split = cfg.load_split()?;
    let range = LabelRange::from_pairs(&split.train)?;
    let labeled = |pairs: &[data::ImagePair]| -> Result<Vec<LabeledPair>> {
        pairs
            .iter()
            .map(|p| Ok(LabeledPair::from_pair(p, metrics::degradation_label(p, &range)?)))
            .collect()
    };
    let train = labeled(&split.train)?;
    let val = labeled(&split.val)?;
    let est = Estimator::new(cfg.estimator.clone())?;
    let (params, history) = train_estimator(&train, &val, &est, &cfg.estimator_train)?;

    let ckpt = EstimatorCheckpoint {
        config: cfg.estimator.clone(),
        label_range: range,
        params,
    };
    let ckpt_path = out.join("estimator.uwdf");
    ckpt.save(&ckpt_path)?;
    write_csv_rows(&out.join("history.csv"), &history)?;
    echo_config(cfg, out)?;
    if let Some(last) = history.last() {
        println!(
            "estimator: {} epochs, val mse {:.6}, val pearson {:.4} -> {}",
            history.len(),
            last.val_mse,
            last.val_pearson,
            ckpt_path.display()
        );
    } else {
        println!("estimator: 0 epochs (initialization saved) -> {}", ckpt_path.display());
    }
    Ok(())
}

fn load_estimator(path: Option<&Path>) -> Result<Option<EstimatorCheckpoint>> {
    path.map(|p| EstimatorCheckpoint::load(&resolve_checkpoint(p)))
        .transpose()
}

fn degradation_source(est: Option<EstimatorCheckpoint>) -> DegradationSource {
    match est {
        Some(ckpt) => DegradationSource::Estimator(ckpt),
        None => DegradationSource::TeacherForcing,
    }
}

fn cmd_train_diffusion(
    cfg: &AppConfig,
    out: &Path,
    estimator: Option<&Path>,
    resume: bool,
) -> Result<()> {
    ensure_dir(out)?;
    let split = cfg.load_split()?;
    let source = degradation_source(load_estimator(estimator)?);
    let tcfg = &cfg.train;
    tcfg.validate()?;

    let den = Denoiser::new(tcfg.effective_denoiser())?;
    let base = crate::schedule::make_base(tcfg.t_steps, tcfg.beta_start, tcfg.beta_end)?;
    let range = source.label_range(&split.train)?;
    let train_ds = source.scores(&split.train, &range)?;
    let val_ds = source.scores(&split.val, &range)?;

    let state_path = out.join("state.uwdf");
    let manifest_path = out.join("manifest.json");
    let (mut state, mut manifest) = if resume && state_path.exists() {
        let mut manifest = RunManifest::load_json(&manifest_path)?;
        // extending `epochs` is the point of resuming; everything else in the
        // configuration must match the original run
        let mut stored_cfg = manifest.config.clone();
        stored_cfg.epochs = tcfg.epochs;
        let stored = serde_json::to_string(&stored_cfg)
            .map_err(|e| Error::Config(format!("manifest config encode: {e}")))?;
        let current = serde_json::to_string(tcfg)
            .map_err(|e| Error::Config(format!("config encode: {e}")))?;
        if stored != current {
            return Err(Error::Config(
                "resume refused: configuration differs from the original run".into(),
            ));
        }
        let expect = trainer::corpus_fingerprint(split.train.iter().chain(&split.val));
        if manifest.corpus_fingerprint != expect {
            return Err(Error::Config(
                "resume refused: corpus content changed since the original run".into(),
            ));
        }
        manifest.config = tcfg.clone();
        (TrainState::load(&state_path, tcfg)?, manifest)
    } else {
        (
            TrainState::new(tcfg, &den),
            RunManifest::new(tcfg, &split, range),
        )
    };

    // state and manifest land after every epoch so a killed run resumes
    // from its last completed epoch
    while state.next_epoch < tcfg.epochs {
        let next = state.next_epoch + 1;
        train_range(
            &split,
            &train_ds,
            &val_ds,
            tcfg,
            &den,
            &base,
            &mut state,
            next,
            &mut manifest,
        )?;
        state.save(&state_path)?;
        manifest.save_json(&manifest_path)?;
    }

    let best = trainer::export_checkpoint(tcfg, &base, &state.best_params);
    let final_ckpt = trainer::export_checkpoint(tcfg, &base, &state.params);
    let best_path = out.join("ckpt_best.uwdf");
    let final_path = out.join("ckpt_final.uwdf");
    best.save(&best_path)?;
    final_ckpt.save(&final_path)?;
    state.save(&state_path)?;
    manifest.checkpoints = vec![
        best_path.display().to_string(),
        final_path.display().to_string(),
    ];
    manifest.save_json(&manifest_path)?;
    manifest.save_csv(&out.join("metrics.csv"))?;
    echo_config(cfg, out)?;
    match manifest.rows.last() {
        Some(row) => println!(
            "diffusion: epoch {} train {:.6} val {:.6} alpha {:.4} (best val {:.6} @ {}) -> {}",
            row.epoch,
            row.train_loss,
            row.val_loss,
            row.alpha_coeff,
            state.best_val,
            state.best_epoch,
            out.display()
        ),
        None => println!("diffusion: 0 epochs (initialization saved) -> {}", out.display()),
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_enhance(
    cfg: &AppConfig,
    checkpoint: &Path,
    input: &Path,
    out: &Path,
    steps: Option<usize>,
    stride: usize,
    seed: u64,
    estimator: Option<&Path>,
    degradation: f64,
    grid: bool,
) -> Result<()> {
    let ckpt = DiffusionCheckpoint::load(&resolve_checkpoint(checkpoint))?;
    let den = Denoiser::new(ckpt.denoiser.clone())?;
    let est = load_estimator(estimator)?;
    let est_model = est
        .as_ref()
        .map(|c| Estimator::new(c.config.clone()))
        .transpose()?;
    let t_start = steps.unwrap_or(ckpt.base.steps);
    let side = ckpt.denoiser.input_side;

    ensure_dir(out)?;
    if grid {
        ensure_dir(&out.join("grid"))?;
    }
    let files = image_files(input)?;
    for (i, path) in files.iter().enumerate() {
        let raw_hwc = data::load_image(path, side)?;
        let raw_chw = data::to_chw(&raw_hwc.view()).into_dyn();
        let d = match (&est, &est_model) {
            (Some(c), Some(m)) => {
                let er = data::load_image(path, c.config.input_side)?;
                m.predict_score(&c.params, &data::to_chw(&er.view()).into_dyn(), None)?
            }
            _ => degradation,
        };
        let enhanced = trainer::enhance_image(
            &ckpt,
            &den,
            &raw_chw,
            d,
            t_start,
            stride,
            seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        )?;
        let hwc = data::to_hwc(
            &enhanced
                .view()
                .into_shape_with_order((3, side, side))
                .unwrap(),
        );

        let name = {
            let n = path.file_name().unwrap().to_string_lossy().into_owned();
            if n.to_ascii_lowercase().ends_with(".png") {
                n
            } else {
                format!("{}.png", file_stem(path))
            }
        };
        save_png_atomic(&out.join(&name), &hwc)?;
        if grid {
            let panel = comparison_panel(&raw_hwc, &hwc);
            save_png_atomic(&out.join("grid").join(&name), &panel)?;
        }
        log::info!("enhanced {} (D={d:.3})", path.display());
    }
    echo_config(cfg, out)?;
    println!("enhanced {} image(s) -> {}", files.len(), out.display());
    Ok(())
}

/// PNG write through a temp file so readers never observe a partial image.
fn save_png_atomic(path: &Path, img: &ndarray::Array3<f64>) -> Result<()> {
    let tmp = path.with_extension("tmp.png");
    data::save_png(&tmp, &img.view())?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// `[H, W+gap+W, 3]` side-by-side panel: input left, enhancement right.
fn comparison_panel(
    raw: &ndarray::Array3<f64>,
    enhanced: &ndarray::Array3<f64>,
) -> ndarray::Array3<f64> {
    let (h, w, _) = raw.dim();
    let gap = 4;
    let mut panel = ndarray::Array3::from_elem((h, 2 * w + gap, 3), 1.0);
    panel
        .slice_mut(ndarray::s![.., ..w, ..])
        .assign(raw);
    panel
        .slice_mut(ndarray::s![.., w + gap.., ..])
        .assign(enhanced);
    panel
}

#[derive(serde::Serialize)]
struct EvalRow {
    id: String,
    psnr: Option<f64>,
    ssim: Option<f64>,
    uiqm: f64,
    uciqe: f64,
}

fn cmd_eval(
    pred: &Path,
    reference: Option<&Path>,
    out: Option<&Path>,
    json: Option<&Path>,
) -> Result<()> {
    let pred_files = image_files(pred)?;
    let ref_files = reference.map(image_files).transpose()?;

    // matching ids are a hard pre-condition with a reference directory
    let ref_by_id: Option<std::collections::BTreeMap<String, PathBuf>> =
        ref_files.map(|files| files.into_iter().map(|p| (file_stem(&p), p)).collect());
    if let Some(refs) = &ref_by_id {
        let pred_ids: std::collections::BTreeSet<String> =
            pred_files.iter().map(|p| file_stem(p)).collect();
        let ref_ids: std::collections::BTreeSet<String> = refs.keys().cloned().collect();
        let mismatched: Vec<String> = pred_ids
            .symmetric_difference(&ref_ids)
            .cloned()
            .collect();
        if !mismatched.is_empty() {
            return Err(Error::IdMismatch(mismatched));
        }
    }

    let mut rows = Vec::with_capacity(pred_files.len());
    for path in &pred_files {
        let id = file_stem(path);
        let img = data::load_image_native(path)?;
        let report = match &ref_by_id {
            Some(refs) => {
                let r = data::load_image_native(&refs[&id])?;
                if r.dim() != img.dim() {
                    return Err(Error::Contract(format!(
                        "{id}: prediction {:?} and reference {:?} differ in shape",
                        img.dim(),
                        r.dim()
                    )));
                }
                metrics::quality_report(&img.view(), Some(&r.view()))?
            }
            None => metrics::quality_report(&img.view(), None)?,
        };
        rows.push(EvalRow {
            id,
            psnr: report.psnr,
            ssim: report.ssim,
            uiqm: report.uiqm,
            uciqe: report.uciqe,
        });
    }

    let mean = |take: &dyn Fn(&EvalRow) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = rows.iter().filter_map(take).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    let summary = EvalRow {
        id: "mean".into(),
        psnr: mean(&|r| r.psnr),
        ssim: mean(&|r| r.ssim),
        uiqm: mean(&|r| Some(r.uiqm)).unwrap_or(f64::NAN),
        uciqe: mean(&|r| Some(r.uciqe)).unwrap_or(f64::NAN),
    };
    rows.push(summary);

    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row)
            .map_err(|e| Error::Config(format!("csv encode: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::Config(format!("csv encode: {e}")))?;
    match out {
        Some(p) => checkpoint::atomic_write(p, &bytes)?,
        None => print!("{}", String::from_utf8_lossy(&bytes)),
    }
    if let Some(p) = json {
        let payload = serde_json::to_vec_pretty(&rows)
            .map_err(|e| Error::Config(format!("json encode: {e}")))?;
        checkpoint::atomic_write(p, &payload)?;
    }
    Ok(())
}

fn cmd_ablate(cfg: &AppConfig, out: &Path, estimator: Option<&Path>) -> Result<()> {
    ensure_dir(out)?;
    let split = cfg.load_split()?;
    let source = degradation_source(load_estimator(estimator)?);

    let all_on = {
        let mut c = cfg.train.clone();
        c.use_pgfm = true;
        c.use_adagn = true;
        c.use_hist = true;
        c.use_perc = true;
        c.use_contra = true;
        c
    };
    let module_grid: Vec<_> = [(false, false), (true, false), (false, true), (true, true)]
        .into_iter()
        .map(|(pgfm, adagn)| {
            let mut c = all_on.clone();
            c.use_pgfm = pgfm;
            c.use_adagn = adagn;
            c
        })
        .collect();
    let loss_grid: Vec<_> = [
        (false, false, false),
        (true, false, false),
        (false, true, false),
        (false, false, true),
        (true, true, true),
    ]
    .into_iter()
    .map(|(hist, perc, contra)| {
        let mut c = all_on.clone();
        c.use_hist = hist;
        c.use_perc = perc;
        c.use_contra = contra;
        c
    })
    .collect();

    println!("module grid ({} cells):", module_grid.len());
    let modules = run_ablation(&module_grid, &split, &source)?;
    for cell in &modules {
        println!(
            "  pgfm={} adagn={} -> psnr {:.3} ssim {:.4}",
            cell.use_pgfm as u8, cell.use_adagn as u8, cell.val_psnr, cell.val_ssim
        );
    }
    write_csv_rows(&out.join("ablation_modules.csv"), &modules)?;

    println!("loss grid ({} cells):", loss_grid.len());
    let lossc = run_ablation(&loss_grid, &split, &source)?;
    for cell in &lossc {
        println!(
            "  hist={} perc={} contra={} -> psnr {:.3} ssim {:.4}",
            cell.use_hist as u8, cell.use_perc as u8, cell.use_contra as u8,
            cell.val_psnr, cell.val_ssim
        );
    }
    write_csv_rows(&out.join("ablation_losses.csv"), &lossc)?;
    echo_config(cfg, out)?;
    Ok(())
}

/// Dispatches a parsed invocation. Errors bubble to `main` for the exit
/// code; partial-failure variants carry the offending ids in their message.
pub fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), &cli.overrides)?;
    match &cli.command {
        Command::Label { corpus, out } => cmd_label(&cfg, corpus.as_deref(), out),
        Command::TrainEstimator { out } => cmd_train_estimator(&cfg, out),
        Command::TrainDiffusion {
            out,
            estimator,
            resume,
        } => cmd_train_diffusion(&cfg, out, estimator.as_deref(), *resume),
        Command::Enhance {
            checkpoint,
            input,
            out,
            steps,
            stride,
            seed,
            estimator,
            degradation,
            grid,
        } => cmd_enhance(
            &cfg,
            checkpoint,
            input,
            out,
            *steps,
            *stride,
            *seed,
            estimator.as_deref(),
            *degradation,
            *grid,
        ),
        Command::Eval {
            pred,
            reference,
            out,
            json,
        } => cmd_eval(pred, reference.as_deref(), out.as_deref(), json.as_deref()),
        Command::Ablate { out, estimator } => cmd_ablate(&cfg, out, estimator.as_deref()),
    }
}
