//! Reposes a trained model from a keyframed pose file and writes one PNG per
//! output frame. Without a checkpoint a small model is trained first.
//!
//! cargo run --release --example animate_pose -- [out dir] [checkpoint.bags]

use bags::io::{load_checkpoint, load_dataset, Checkpoint, PoseFile};
use bags::render::{render_forward, Camera, Intrinsics};
use bags::synthetic::{ArmConfig, ArmScene};
use bags::trainer::{TrainConfig, Trainer};

fn trained(dir: &std::path::Path) -> bags::Result<Checkpoint> {
    let scene = ArmScene::new(ArmConfig {
        size: 48,
        splats: 600,
        frames: 8,
        ..ArmConfig::default()
    })?;
    let dataset = load_dataset(&scene.write_dataset(&dir.join("data"))?)?;
    let oracle = scene.oracle();
    let mut config = TrainConfig {
        warmup_iterations: 100,
        joint_iterations: 100,
        ..TrainConfig::default()
    };
    config.rig.bones = 4;
    let mut trainer = Trainer::new(config, &dataset, &oracle)?;
    trainer.run(&mut |_, _| Ok(()))?;
    Ok(Checkpoint::from_trainer(&trainer))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out: std::path::PathBuf = args
        .first()
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("bags_animate_example"));
    let ck = match args.get(1) {
        Some(p) => load_checkpoint(p.as_ref())?,
        None => trained(&out)?,
    };
    let model = &ck.model;
    let canonical = model.rig.canonical_pose()?;

    // bone 0 swings 40° about z and back, the others stay put
    let half = (20f64).to_radians();
    let pose = PoseFile::from_json(&format!(
        r#"{{"bone_count": {b}, "frames": 13, "keyframes": [
            {{"frame": 0, "bones": []}},
            {{"frame": 6, "bones": [{{"bone": 0, "rotation": [{c}, 0, 0, {s}]}}]}},
            {{"frame": 12, "bones": []}}
        ]}}"#,
        b = canonical.len(),
        c = half.cos(),
        s = half.sin()
    ))?;

    let cam = Camera::orbit(nalgebra::Vector3::zeros(), 3.0 * model.extent, 0.0, 15.0, Intrinsics::from_fov(45.0, 128, 128));
    std::fs::create_dir_all(&out)?;
    let reference = ck.state.reference;
    for f in 0..pose.frames {
        let splats = model.posed_splats(&pose.deltas_at(f, &canonical)?, reference)?;
        let img = render_forward(&splats, &cam, model.background, &model.settings).color;
        let path = out.join(format!("frame_{f:03}.png"));
        std::fs::write(&path, img.to_png()?)?;
        println!("{}", path.display());
    }
    Ok(())
}
