//! Temporary diagnostic: ablation-grid dry run for tuning the toy setup.
//! Not part of the suite; delete when tuning is done.

use uwdiff::data::DatasetSplit;
use uwdiff::denoiser::DenoiserConfig;
use uwdiff::synth::{make_corpus, DegradeKind};
use uwdiff::trainer::{run_ablation, DegradationSource, TrainConfig};

fn interleaved_split(n: usize, side: usize, seed: u64, every: usize) -> DatasetSplit {
    let pairs = make_corpus(n, side, seed, DegradeKind::Underwater);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (i, p) in pairs.into_iter().enumerate() {
        if (i + every / 2) % every == 0 {
            val.push(p);
        } else {
            train.push(p);
        }
    }
    DatasetSplit {
        train,
        val,
        seed: 0,
    }
}

#[test]
#[ignore]
fn ablation_dry_run() {
    let split = interleaved_split(16, 32, 907, 4);
    let full = TrainConfig {
        epochs: 60,
        batch_size: 4,
        lr: 1e-2,
        seed: 0,
        image_side: 32,
        t_steps: 10,
        beta_start: 0.05,
        beta_end: 0.5,
        sample_t_start: 3,
        sample_stride: 3,
        use_ema: false,
        denoiser: DenoiserConfig {
            input_side: 32,
            patch: 2,
            ..DenoiserConfig::tiny()
        },
        ..TrainConfig::base()
    };
    let cell = |pgfm: bool, adagn: bool, hist: bool, perc: bool, contra: bool| TrainConfig {
        use_pgfm: pgfm,
        use_adagn: adagn,
        use_hist: hist,
        use_perc: perc,
        use_contra: contra,
        ..full.clone()
    };
    let grid = vec![
        cell(true, false, true, true, true),
        cell(false, true, true, true, true),
        cell(true, true, true, true, true),
        cell(true, true, false, false, false),
        cell(true, true, true, false, false),
        cell(true, true, false, true, false),
        cell(true, true, false, false, true),
        cell(true, true, true, true, false),
        cell(true, true, true, false, true),
        cell(true, true, false, true, true),
    ];
    let cells = run_ablation(&grid, &split, &DegradationSource::TeacherForcing).unwrap();
    println!("pgfm adagn hist perc contra | val_psnr val_ssim final_loss");
    for c in &cells {
        println!(
            "{:5} {:5} {:5} {:5} {:6} | {:8.3} {:8.4} {:10.4}",
            c.use_pgfm, c.use_adagn, c.use_hist, c.use_perc, c.use_contra,
            c.val_psnr, c.val_ssim, c.final_train_loss
        );
    }
}
