//! Trains a small arm model halfway, checkpoints, resumes from disk, then
//! exports the viewer bundle and reads it back.
//!
//! cargo run --release --example checkpoint_and_bundle -- [out dir]

use bags::io::{export_viewer_bundle, load_checkpoint, load_dataset, read_bundle, save_checkpoint, Checkpoint};
use bags::synthetic::{ArmConfig, ArmScene};
use bags::trainer::{TrainConfig, Trainer};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("bags_checkpoint_example"));
    let scene = ArmScene::new(ArmConfig {
        size: 48,
        splats: 600,
        frames: 8,
        ..ArmConfig::default()
    })?;
    let dataset = load_dataset(&scene.write_dataset(&out.join("data"))?)?;
    let oracle = scene.oracle();

    let mut config = TrainConfig {
        warmup_iterations: 40,
        joint_iterations: 40,
        ..TrainConfig::default()
    };
    config.rig.bones = 4;
    let mut trainer = Trainer::new(config, &dataset, &oracle)?;
    while trainer.global_iteration() < 60 {
        trainer.step()?;
    }
    let path = out.join("checkpoint.bags");
    save_checkpoint(&Checkpoint::from_trainer(&trainer), &path)?;
    println!(
        "saved {} at iteration {} ({} bytes)",
        path.display(),
        trainer.global_iteration(),
        std::fs::metadata(&path)?.len()
    );

    let ck = load_checkpoint(&path)?;
    let mut resumed = Trainer::resume(ck.config, &dataset, &oracle, ck.model, ck.state)?;
    let report = resumed.run(&mut |_, _| Ok(()))?;
    println!("resumed to the end: psnr {:.2} iou {:.3}", report.psnr, report.iou);

    let bundle_path = out.join("model.bundle");
    let meta = export_viewer_bundle(&resumed.model, &bundle_path)?;
    println!("{}", serde_json::to_string_pretty(&meta).expect("metadata serializes"));
    let bundle = read_bundle(&bundle_path)?;
    let worst = bundle
        .weights
        .chunks(bundle.bones)
        .map(|w| (w.iter().sum::<f32>() - 1.0).abs())
        .fold(0.0f32, f32::max);
    println!("{} splats, {} bones, max |Σw - 1| = {worst:.1e}", bundle.splats, bundle.bones);
    Ok(())
}
