//! Forward/backward render timing on a random cloud.
//!
//! cargo run --release --example render_bench -- [splats] [size] [iters]

use std::time::Instant;

use bags::gaussian::{logit, Gaussian, GaussianCloud};
use bags::numeric::quat;
use bags::render::{cloud_splats, render_backward, render_forward, Camera, Image, RenderSettings};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let n = args.first().copied().unwrap_or(10_000);
    let size = args.get(1).copied().unwrap_or(256);
    let iters = args.get(2).copied().unwrap_or(10);

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let gs: Vec<Gaussian> = (0..n)
        .map(|_| Gaussian {
            position: Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
            rotation: quat::normalize(&std::array::from_fn(|_| rng.gen_range(-1.0..1.0))),
            log_scale: Vector3::from_fn(|_, _| rng.gen_range(-4.0..-2.5)),
            opacity_logit: logit(rng.gen_range(0.3..0.9)),
            color: std::array::from_fn(|_| rng.gen()),
        })
        .collect();
    let cloud = GaussianCloud::from_gaussians(&gs);
    let splats = cloud_splats(&cloud);
    let cam = Camera::look_at(Vector3::new(0.0, 0.0, -3.5), Vector3::zeros(), Vector3::y(), 45.0, size, size);
    let settings = RenderSettings::default();

    let t = Instant::now();
    let mut out = render_forward(&splats, &cam, [0.0; 3], &settings);
    for _ in 1..iters {
        out = render_forward(&splats, &cam, [0.0; 3], &settings);
    }
    let fwd = t.elapsed().as_secs_f64() / iters as f64;

    let dc = Image::filled(size, size, &[1.0, 1.0, 1.0]);
    let da = Image::filled(size, size, &[1.0]);
    let t = Instant::now();
    for _ in 0..iters {
        render_backward(&out, &splats, &dc, &da).unwrap();
    }
    let bwd = t.elapsed().as_secs_f64() / iters as f64;
    println!(
        "{n} splats {size}x{size}: forward {:.1} ms ({:.1} FPS), backward {:.1} ms, threads {}",
        fwd * 1e3,
        1.0 / fwd,
        bwd * 1e3,
        rayon::current_num_threads()
    );
}
