//! Trains on the synthetic arm and prints evaluation lines.
//!
//! cargo run --release --example train_arm -- [warmup] [joint] [oracle|zero] [rigid weight] [bones]

use std::time::Instant;

use bags::losses::{PriorProvider, ZeroProvider};
use bags::synthetic::{ArmConfig, ArmScene};
use bags::trainer::{Event, TrainConfig, Trainer};

fn main() -> bags::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let warmup = args.first().and_then(|a| a.parse().ok()).unwrap_or(300);
    let joint = args.get(1).and_then(|a| a.parse().ok()).unwrap_or(1200);
    let prior = args.get(2).map(String::as_str).unwrap_or("oracle");
    let rigid = args.get(3).and_then(|a| a.parse().ok()).unwrap_or(0.1);
    let bones = args.get(4).and_then(|a| a.parse().ok()).unwrap_or(16);

    let scene = ArmScene::new(ArmConfig::default())?;
    let dir = std::env::temp_dir().join("bags_train_arm");
    let dataset = bags::io::load_dataset(&scene.write_dataset(&dir)?)?;
    let oracle = scene.oracle();
    let provider: &dyn PriorProvider = if prior == "zero" { &ZeroProvider } else { &oracle };

    let mut config = TrainConfig {
        warmup_iterations: warmup,
        joint_iterations: joint,
        eval_interval: 100,
        ..TrainConfig::default()
    };
    config.weights.rigid = rigid;
    config.rig.bones = bones;
    let mut trainer = Trainer::new(config, &dataset, provider)?;
    let start = Instant::now();
    let report = trainer.run(&mut |_, ev| {
        match ev {
            Event::Step(m) if m.iteration % 50 == 0 => println!(
                "{:>6} {:>4} loss {:.5} l1 {:.4} mask {:.4} ssim {:.4} rigid {:.4} splats {} frames {}  {:.0}s",
                m.stage.name(),
                m.iteration,
                m.loss,
                m.terms.l1,
                m.terms.mask,
                m.terms.perceptual,
                m.terms.rigid,
                m.splats,
                m.active_frames,
                start.elapsed().as_secs_f64()
            ),
            Event::Eval(r) => println!(
                "eval @{}: psnr {:.2} iou {:.4} rigid {:.3e} heldout {:.2}",
                r.iteration,
                r.psnr,
                r.iou,
                r.rigid_loss,
                r.heldout_psnr.unwrap_or(f64::NAN)
            ),
            _ => {}
        }
        Ok(())
    })?;
    println!("{}", serde_json::to_string(&report).unwrap());
    println!("{:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
