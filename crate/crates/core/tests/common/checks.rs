//! Shared checks behind the integration tests and the acceptance report.

use std::path::Path;

use bags::gaussian::{GaussianCloud, Gaussian, logit};
use bags::io::load_dataset;
use bags::losses::{l1_loss, mask_loss, rigid_loss, MsSsim, PerceptualMetric, PriorProvider, ZeroProvider};
use bags::numeric::{quat, svd3, Activation, Mlp};
use bags::render::{
    cloud_splats, render_cloud_backward, render_forward, render_reference, Image, RenderSettings, SplatGrads,
    WorldSplat,
};
use bags::rig::{bone_delta_transforms, skinning_weights, warp_backward, warp_cloud, warp_gaussian, BoneDelta, BonePose, BoneRig, BoneRigConfig, PoseGrad};
use bags::synthetic::{ArmConfig, ArmScene};
use bags::trainer::{apply_root, apply_root_backward, EvalReport, TrainConfig, Trainer};
use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{camera, grad_close, random_cloud};

pub const REL_TOL: f64 = 1e-3;
pub const ABS_FLOOR: f64 = 1e-6;

/// One pass/fail line.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(name: &str, pass: bool, detail: String) -> Self {
        Self { name: name.into(), pass, detail }
    }

    pub fn line(&self) -> String {
        format!("[{}] {}: {}", if self.pass { "PASS" } else { "FAIL" }, self.name, self.detail)
    }
}

/// Tally of analytic-vs-central-difference comparisons for one operation.
#[derive(Clone, Debug, Default)]
pub struct GradStats {
    pub instances: usize,
    pub checked: usize,
    pub failures: Vec<String>,
    pub worst_abs: f64,
    pub largest: f64,
    /// Over partials whose error exceeds the absolute floor.
    pub worst_rel: f64,
}

impl GradStats {
    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, fd: f64) {
        self.checked += 1;
        let err = (analytic - fd).abs();
        self.worst_abs = self.worst_abs.max(err);
        self.largest = self.largest.max(analytic.abs());
        if err > ABS_FLOOR {
            self.worst_rel = self.worst_rel.max(err / analytic.abs().max(fd.abs()));
        }
        if !grad_close(analytic, fd, REL_TOL, ABS_FLOOR) {
            self.failures.push(format!("{}: analytic {analytic:.6e}, fd {fd:.6e}", what()));
        }
    }

    pub fn passed(&self, min_instances: usize) -> bool {
        self.failures.is_empty() && self.instances >= min_instances && self.largest > 0.0
    }

    pub fn summary(&self) -> String {
        format!(
            "{} instances, {} partials (largest {:.1e}), {} failures, worst abs err {:.1e}, worst rel err {:.1e}",
            self.instances,
            self.checked,
            self.largest,
            self.failures.len(),
            self.worst_abs,
            self.worst_rel
        )
    }
}

fn central<F: Fn(f64) -> f64>(f: F, h: f64) -> f64 {
    (f(h) - f(-h)) / (2.0 * h)
}

fn random_image<R: Rng>(rng: &mut R, w: usize, h: usize, c: usize, range: (f64, f64)) -> Image {
    Image::from_data(w, h, c, (0..w * h * c).map(|_| rng.gen_range(range.0..range.1)).collect()).unwrap()
}

fn dot(a: &Image, b: &Image) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

pub fn random_quat<R: Rng>(rng: &mut R) -> quat::Quat {
    quat::normalize(&std::array::from_fn(|_| rng.gen_range(-1.0..1.0)))
}

pub fn random_pose<R: Rng>(rng: &mut R, bones: usize) -> BonePose {
    BonePose::from_parts(
        (0..bones).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect(),
        (0..bones).map(|_| Vector3::from_fn(|_, _| rng.gen_range(0.5..3.0))).collect(),
        (0..bones).map(|_| random_quat(rng)).collect(),
    )
    .unwrap()
}

/// Renderer backward: cloud parameters through projection, covariance and
/// compositing, against a random linear functional of color and alpha.
pub fn renderer_gradients(instances: usize, seed: u64) -> GradStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let size = 32;
    let cam = camera(size);
    let settings = RenderSettings::exact();
    let h = 1e-5;
    let mut stats = GradStats::default();
    for inst in 0..instances {
        let n = rng.gen_range(1..=4);
        let cloud = random_cloud(&mut rng, n, 0.8, (-2.2, -1.4));
        let wc = random_image(&mut rng, size, size, 3, (0.0, 1.0));
        let wa = random_image(&mut rng, size, size, 1, (-1.0, 1.0));
        let bg = [rng.gen(), rng.gen(), rng.gen()];
        let loss = |c: &GaussianCloud| {
            let out = render_forward(&cloud_splats(c), &cam, bg, &settings);
            dot(&out.color, &wc) + dot(&out.alpha, &wa)
        };
        let out = render_forward(&cloud_splats(&cloud), &cam, bg, &settings);
        let g = render_cloud_backward(&cloud, &out, &wc, &wa).unwrap();
        let analytic: [Vec<f64>; 5] = [
            g.position.iter().flatten().copied().collect(),
            g.rotation.iter().flatten().copied().collect(),
            g.log_scale.iter().flatten().copied().collect(),
            g.opacity_logit.clone(),
            g.color.iter().flatten().copied().collect(),
        ];
        for (group, a) in analytic.iter().enumerate() {
            for (idx, &a) in a.iter().enumerate() {
                let fd = central(
                    |d| {
                        let mut c = cloud.clone();
                        c.params_mut()[group].values_mut()[idx] += d;
                        loss(&c)
                    },
                    h,
                );
                stats.record(|| format!("scene {inst} group {group} idx {idx}"), a, fd);
            }
        }
        stats.instances += 1;
    }
    stats
}

/// Warp backward: Gaussian parameters and both bone poses through the
/// warped means, covariances and Jacobians.
pub fn warp_gradients(instances: usize, seed: u64) -> GradStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut stats = GradStats::default();
    for inst in 0..instances {
        let bones = rng.gen_range(1..=4);
        let n = 3;
        let c = random_pose(&mut rng, bones);
        let t = random_pose(&mut rng, bones);
        let gs: Vec<Gaussian> = (0..n)
            .map(|_| Gaussian {
                position: Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                rotation: random_quat(&mut rng),
                log_scale: Vector3::from_fn(|_, _| rng.gen_range(-2.0..-0.5)),
                opacity_logit: logit(rng.gen_range(0.2..0.9)),
                color: [0.5; 3],
            })
            .collect();
        let cloud = GaussianCloud::from_gaussians(&gs);
        let pm: Vec<Vector3<f64>> = (0..n).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
        let pc: Vec<Matrix3<f64>> = (0..n).map(|_| Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
        let pj: Vec<Matrix3<f64>> = (0..n).map(|_| Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
        let probe = |cl: &GaussianCloud, c: &BonePose, t: &BonePose| {
            let w = warp_cloud(cl, c, t).unwrap();
            (0..n)
                .map(|i| w.splats[i].mean.dot(&pm[i]) + w.splats[i].cov.dot(&pc[i]) + w.jacobians[i].dot(&pj[i]))
                .sum::<f64>()
        };
        let warp = warp_cloud(&cloud, &c, &t).unwrap();
        let mut sg = SplatGrads::zeros(n);
        sg.mean = pm.clone();
        sg.cov = pc.clone();
        let g = warp_backward(&warp, &cloud, &sg, Some(&pj)).unwrap();

        for group in 0..3 {
            let width = cloud.params()[group].row_width();
            for idx in 0..n * width {
                let a = match group {
                    0 => g.cloud.position[idx / 3][idx % 3],
                    1 => g.cloud.rotation[idx / 4][idx % 4],
                    _ => g.cloud.log_scale[idx / 3][idx % 3],
                };
                let fd = central(
                    |d| {
                        let mut cl = cloud.clone();
                        cl.params_mut()[group].values_mut()[idx] += d;
                        probe(&cl, &c, &t)
                    },
                    h,
                );
                stats.record(|| format!("instance {inst} cloud group {group} idx {idx}"), a, fd);
            }
        }
        for which in 0..2 {
            let pg = if which == 0 { &g.canonical } else { &g.target };
            for b in 0..bones {
                for k in 0..15 {
                    let a = match k {
                        0..=2 => pg.centers[b][k],
                        3..=5 => pg.precisions[b][k - 3],
                        _ => pg.rotations[b][k - 6],
                    };
                    let fd = central(
                        |d| {
                            let (mut cc, mut tt) = (c.clone(), t.clone());
                            let p = if which == 0 { &mut cc } else { &mut tt };
                            match k {
                                0..=2 => p.centers[b][k] += d,
                                3..=5 => p.precisions[b][k - 3] += d,
                                _ => p.rotations[b][k - 6] += d,
                            }
                            probe(&cloud, &cc, &tt)
                        },
                        h,
                    );
                    stats.record(|| format!("instance {inst} pose {which} bone {b} param {k}"), a, fd);
                }
            }
        }
        stats.instances += 1;
    }
    stats
}

/// Plain MLP backward: every weight, bias and input.
pub fn mlp_gradients(instances: usize, seed: u64) -> GradStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut stats = GradStats::default();
    for inst in 0..instances {
        let depth = rng.gen_range(1..=3);
        let mut dims = vec![rng.gen_range(1..=6)];
        for _ in 0..depth {
            dims.push(rng.gen_range(2..=8));
        }
        dims.push(rng.gen_range(1..=4));
        let act = if inst % 2 == 0 { Activation::Softplus } else { Activation::Tanh };
        let mut net = Mlp::new(&dims, act, 1.0, &mut rng).unwrap();
        for p in net.params_mut() {
            for v in p.values_mut() {
                *v += rng.gen_range(-0.2..0.2);
            }
        }
        let x: Vec<f64> = (0..dims[0]).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let w: Vec<f64> = (0..*dims.last().unwrap()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let probe = |net: &Mlp, x: &[f64]| -> f64 {
            net.forward_taped(x).unwrap().0.iter().zip(&w).map(|(a, b)| a * b).sum()
        };
        net.zero_grad();
        let (_, tape) = net.forward_taped(&x).unwrap();
        let dx = net.backward_taped(&tape, &w).unwrap();
        let analytic: Vec<Vec<f64>> = net.params().map(|p| p.grad().unwrap().to_vec()).collect();
        for (pi, a) in analytic.iter().enumerate() {
            for (k, &a) in a.iter().enumerate() {
                let fd = central(
                    |d| {
                        let mut nn = net.clone();
                        nn.params_mut().nth(pi).unwrap().values_mut()[k] += d;
                        probe(&nn, &x)
                    },
                    h,
                );
                stats.record(|| format!("net {inst} param {pi}[{k}]"), a, fd);
            }
        }
        for (k, &a) in dx.iter().enumerate() {
            let fd = central(
                |d| {
                    let mut xx = x.clone();
                    xx[k] += d;
                    probe(&net, &xx)
                },
                h,
            );
            stats.record(|| format!("net {inst} input {k}"), a, fd);
        }
        stats.instances += 1;
    }
    stats
}

fn pose_probe(p: &BonePose, w: &PoseGrad) -> f64 {
    (0..p.len())
        .map(|b| p.centers[b].dot(&w.centers[b]) + p.precisions[b].dot(&w.precisions[b]) + p.rotations[b].dot(&w.rotations[b]))
        .sum()
}

/// Bone rig: MLP parameters and the canonical embedding through the
/// predicted pose (centers, softplus precisions, quaternion rotations).
pub fn rig_gradients(instances: usize, seed: u64) -> GradStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut stats = GradStats::default();
    for inst in 0..instances {
        let bones = rng.gen_range(1..=3);
        let config = BoneRigConfig {
            bones,
            frequencies: 2,
            hidden_layers: 2,
            hidden_width: 6,
            final_layer_scale: 1.0,
            ..BoneRigConfig::default()
        };
        let centers: Vec<Vector3<f64>> = (0..bones).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
        let mut rig = BoneRig::new(config, &centers, 2.0, rng.gen(), &mut rng).unwrap();
        for p in rig.params_mut() {
            for v in p.values_mut() {
                *v += rng.gen_range(-0.3..0.3);
            }
        }
        let w = PoseGrad {
            centers: (0..bones).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect(),
            precisions: (0..bones).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect(),
            rotations: (0..bones).map(|_| Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect(),
        };
        rig.zero_grad();
        let (_, tape) = rig.canonical_pose_taped().unwrap();
        rig.canonical_backward(&tape, &w).unwrap();
        let analytic: Vec<Vec<f64>> = rig.params().map(|p| p.grad().unwrap().to_vec()).collect();
        for (pi, a) in analytic.iter().enumerate() {
            for (k, &a) in a.iter().enumerate() {
                let fd = central(
                    |d| {
                        let mut r = rig.clone();
                        r.params_mut().nth(pi).unwrap().values_mut()[k] += d;
                        pose_probe(&r.canonical_pose().unwrap(), &w)
                    },
                    h,
                );
                stats.record(|| format!("rig {inst} param {pi}[{k}]"), a, fd);
            }
        }
        stats.instances += 1;
    }
    stats
}

/// Per-frame root transform: input splats and the `[q, t]` row.
pub fn root_gradients(instances: usize, seed: u64) -> GradStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut stats = GradStats::default();
    for inst in 0..instances {
        let n = 3;
        let splats: Vec<WorldSplat> = (0..n)
            .map(|_| {
                let a = Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0));
                WorldSplat {
                    mean: Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0)),
                    cov: a * a.transpose(),
                    opacity: 0.5,
                    color: [0.5; 3],
                }
            })
            .collect();
        let row: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut dout = SplatGrads::zeros(n);
        dout.mean = (0..n).map(|_| Vector3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
        dout.cov = (0..n).map(|_| Matrix3::from_fn(|_, _| rng.gen_range(-1.0..1.0))).collect();
        let probe = |s: &[WorldSplat], row: &[f64]| {
            let q = [row[0], row[1], row[2], row[3]];
            let out = apply_root(s, &quat::to_matrix(&q), &Vector3::new(row[4], row[5], row[6]));
            (0..n).map(|i| out[i].mean.dot(&dout.mean[i]) + out[i].cov.dot(&dout.cov[i])).sum::<f64>()
        };
        let (din, drow) = apply_root_backward(&splats, &row, &dout);
        for (k, &a) in drow.iter().enumerate() {
            let fd = central(
                |d| {
                    let mut r = row.clone();
                    r[k] += d;
                    probe(&splats, &r)
                },
                h,
            );
            stats.record(|| format!("root {inst} row {k}"), a, fd);
        }
        for i in 0..n {
            for k in 0..3 {
                let fd = central(
                    |d| {
                        let mut s = splats.clone();
                        s[i].mean[k] += d;
                        probe(&s, &row)
                    },
                    h,
                );
                stats.record(|| format!("root {inst} mean {i}.{k}"), din.mean[i][k], fd);
            }
            // symmetric perturbation: the adjoint is defined on symmetric inputs
            for (r, c) in [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)] {
                let fd = central(
                    |d| {
                        let mut s = splats.clone();
                        s[i].cov[(r, c)] += d;
                        if r != c {
                            s[i].cov[(c, r)] += d;
                        }
                        probe(&s, &row)
                    },
                    h,
                );
                let g = &din.cov[i];
                let a = if r == c { g[(r, c)] } else { g[(r, c)] + g[(c, r)] };
                stats.record(|| format!("root {inst} cov {i}.({r},{c})"), a, fd);
            }
        }
        stats.instances += 1;
    }
    stats
}

fn image_loss_gradients(
    instances: usize,
    seed: u64,
    coords: usize,
    mut make: impl FnMut(&mut ChaCha8Rng, usize) -> (Image, Box<dyn Fn(&Image) -> (f64, Image)>),
) -> GradStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut stats = GradStats::default();
    for inst in 0..instances {
        let (x, f) = make(&mut rng, inst);
        let (_, g) = f(&x);
        let picks: Vec<usize> = if x.data.len() <= coords {
            (0..x.data.len()).collect()
        } else {
            (0..coords).map(|_| rng.gen_range(0..x.data.len())).collect()
        };
        for k in picks {
            let fd = central(
                |d| {
                    let mut xx = x.clone();
                    xx.data[k] += d;
                    f(&xx).0
                },
                h,
            );
            stats.record(|| format!("instance {inst} pixel value {k}"), g.data[k], fd);
        }
        stats.instances += 1;
    }
    stats
}

pub fn l1_gradients(instances: usize, seed: u64) -> GradStats {
    image_loss_gradients(instances, seed, usize::MAX, |rng, _| {
        let (w, hgt) = (rng.gen_range(2..10), rng.gen_range(2..10));
        let x = random_image(rng, w, hgt, 3, (0.0, 1.0));
        let target = random_image(rng, w, hgt, 3, (0.0, 1.0));
        let mask = Image::from_data(w, hgt, 1, (0..w * hgt).map(|_| if rng.gen_bool(0.7) { 1.0 } else { 0.0 }).collect())
            .unwrap();
        let mut mask = mask;
        mask.data[0] = 1.0;
        (x, Box::new(move |r: &Image| l1_loss(r, &target, &mask).unwrap()))
    })
}

pub fn mask_gradients(instances: usize, seed: u64) -> GradStats {
    image_loss_gradients(instances, seed, usize::MAX, |rng, _| {
        let (w, hgt) = (rng.gen_range(2..10), rng.gen_range(2..10));
        let x = random_image(rng, w, hgt, 1, (0.0, 1.0));
        let mask = Image::from_data(w, hgt, 1, (0..w * hgt).map(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }).collect())
            .unwrap();
        (x, Box::new(move |a: &Image| mask_loss(a, &mask).unwrap()))
    })
}

/// Alternates the default three-scale metric on 28×28 with a two-scale one
/// on 20×20; 60 random partials per instance.
pub fn perceptual_gradients(instances: usize, seed: u64) -> GradStats {
    image_loss_gradients(instances, seed, 60, |rng, inst| {
        let (metric, size) = if inst % 2 == 0 {
            (MsSsim::default(), 28)
        } else {
            (MsSsim { scales: 2, window: 5 }, 20)
        };
        let x = random_image(rng, size, size, 3, (0.0, 1.0));
        let target = random_image(rng, size, size, 3, (0.0, 1.0));
        (x, Box::new(move |r: &Image| metric.loss(r, &target).unwrap()))
    })
}

/// Rigid loss with the nearest rotation held fixed, as the gradient defines it.
pub fn rigid_gradients(instances: usize, seed: u64) -> GradStats {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-7;
    let mut stats = GradStats::default();
    for inst in 0..instances {
        let n = rng.gen_range(1..=5);
        let js: Vec<Matrix3<f64>> = (0..n).map(|_| Matrix3::from_fn(|_, _| rng.gen_range(-2.0..2.0))).collect();
        let fixed: Vec<Matrix3<f64>> = js.iter().map(|j| svd3(j).unwrap().nearest_rotation()).collect();
        let (_, g) = rigid_loss(&js).unwrap();
        for i in 0..n {
            for k in 0..9 {
                let fd = central(
                    |d| {
                        let mut jj = js.clone();
                        jj[i][k] += d;
                        jj.iter().zip(&fixed).map(|(a, b)| (a - b).abs().sum()).sum::<f64>() / n as f64
                    },
                    h,
                );
                stats.record(|| format!("instance {inst} matrix {i} entry {k}"), g[i][k], fd);
            }
        }
        stats.instances += 1;
    }
    stats
}

/// Every differentiable operation with its tally.
pub fn gradient_suite(instances: usize) -> Vec<(&'static str, GradStats)> {
    vec![
        ("renderer", renderer_gradients(instances, 101)),
        ("warp", warp_gradients(instances, 102)),
        ("mlp", mlp_gradients(instances, 103)),
        ("bone rig", rig_gradients(instances, 104)),
        ("root transform", root_gradients(instances, 105)),
        ("l1 loss", l1_gradients(instances, 106)),
        ("mask loss", mask_gradients(instances, 107)),
        ("perceptual loss", perceptual_gradients(instances, 108)),
        ("rigid loss", rigid_gradients(instances, 109)),
    ]
}

/// Tiled forward against the per-pixel reference with thresholds zeroed.
/// Returns the largest per-channel difference over color and alpha.
pub fn renderer_oracle(scenes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = camera(64);
    let settings = RenderSettings::exact();
    let mut worst: f64 = 0.0;
    for _ in 0..scenes {
        let n = rng.gen_range(1..=100);
        let cloud = random_cloud(&mut rng, n, 1.0, (-3.5, -1.5));
        let splats = cloud_splats(&cloud);
        let bg = [rng.gen(), rng.gen(), rng.gen()];
        let a = render_forward(&splats, &cam, bg, &settings);
        let b = render_reference(&splats, &cam, bg, &settings);
        worst = worst.max(a.color.max_abs_diff(&b.color)).max(a.alpha.max_abs_diff(&b.alpha));
    }
    worst
}

/// Single-bone warp followed by rendering, against rendering the rigidly
/// moved canonical splats. Returns the largest pixel difference.
pub fn single_bone_render_gap(scenes: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = camera(48);
    let settings = RenderSettings::exact();
    let mut worst: f64 = 0.0;
    for _ in 0..scenes {
        let cloud = random_cloud(&mut rng, 40, 0.6, (-3.0, -1.8));
        let c = random_pose(&mut rng, 1);
        let mut t = random_pose(&mut rng, 1);
        t.centers[0] *= 0.3;
        let warped = warp_cloud(&cloud, &c, &t).unwrap();
        let d = &warped.deltas[0];
        let rigid = apply_root(&cloud_splats(&cloud), &d.rotation, &d.translation);
        let a = render_forward(&warped.splats, &cam, [0.1, 0.2, 0.3], &settings);
        let b = render_forward(&rigid, &cam, [0.1, 0.2, 0.3], &settings);
        worst = worst.max(a.color.max_abs_diff(&b.color)).max(a.alpha.max_abs_diff(&b.alpha));
    }
    worst
}

/// Largest rigid loss over random proper rotations (should be exactly 0)
/// and the loss on `2 I`.
pub fn rigid_loss_cases(samples: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rotations: Vec<Matrix3<f64>> = (0..samples).map(|_| quat::to_matrix(&random_quat(&mut rng))).collect();
    let on_rotations = rotations
        .iter()
        .map(|r| rigid_loss(&[*r]).unwrap().0)
        .fold(0.0, f64::max);
    let (two_i, _) = rigid_loss(&[Matrix3::identity() * 2.0]).unwrap();
    (on_rotations, two_i)
}

fn warp_map(x: &Vector3<f64>, canonical: &BonePose, deltas: &[BoneDelta]) -> Vector3<f64> {
    let w = skinning_weights(x, canonical);
    deltas.iter().zip(&w).map(|(d, w)| *w * d.apply(x)).sum()
}

/// Analytic warp Jacobian against central differences of the warp map,
/// `points` random points for each bone count. Returns the max abs error.
pub fn warp_jacobian_error(bone_counts: &[usize], points: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for &b in bone_counts {
        let c = random_pose(&mut rng, b);
        let t = random_pose(&mut rng, b);
        let deltas = bone_delta_transforms(&c, &t).unwrap();
        for _ in 0..points {
            let g = Gaussian {
                position: Vector3::from_fn(|_, _| rng.gen_range(-1.2..1.2)),
                rotation: random_quat(&mut rng),
                log_scale: Vector3::repeat(-2.0),
                opacity_logit: 0.0,
                color: [0.5; 3],
            };
            let w = warp_gaussian(&g, &c, &deltas).unwrap();
            for k in 0..3 {
                let mut e = Vector3::zeros();
                e[k] = h;
                let fd = (warp_map(&(g.position + e), &c, &deltas) - warp_map(&(g.position - e), &c, &deltas)) / (2.0 * h);
                worst = worst.max((w.jacobian.column(k) - fd).abs().max());
            }
        }
    }
    worst
}

/// Budget for the synthetic recovery runs.
pub const RECOVERY_WARMUP: usize = 400;
pub const RECOVERY_JOINT: usize = 1600;

pub struct Recovery {
    pub scene: ArmScene,
    pub dir: tempfile::TempDir,
}

impl Recovery {
    pub fn new() -> Self {
        let scene = ArmScene::new(ArmConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        scene.write_dataset(dir.path()).unwrap();
        Self { scene, dir }
    }

    pub fn manifest(&self) -> std::path::PathBuf {
        self.dir.path().join("manifest.json")
    }

    /// Trains with the oracle (or zero) provider and the given rigid weight.
    pub fn run(&self, oracle: bool, rigid: f64) -> EvalReport {
        let dataset = load_dataset(&self.manifest()).unwrap();
        let o = self.scene.oracle();
        let provider: &dyn PriorProvider = if oracle { &o } else { &ZeroProvider };
        let mut config = TrainConfig {
            warmup_iterations: RECOVERY_WARMUP,
            joint_iterations: RECOVERY_JOINT,
            ..TrainConfig::default()
        };
        config.weights.rigid = rigid;
        let mut trainer = Trainer::new(config, &dataset, provider).unwrap();
        trainer.run(&mut |_, _| Ok(())).unwrap()
    }
}

/// Checkpoint holding a small trained arm model whose cloud is replaced by
/// `splats` random Gaussians spread over the arm's extent.
pub fn bench_checkpoint(path: &Path, splats: usize, seed: u64) {
    let scene = ArmScene::new(ArmConfig {
        size: 32,
        splats: 200,
        frames: 3,
        ..ArmConfig::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let dataset = load_dataset(&scene.write_dataset(dir.path()).unwrap()).unwrap();
    let mut config = TrainConfig {
        warmup_iterations: 1,
        joint_iterations: 1,
        ..TrainConfig::default()
    };
    config.rig.bones = 4;
    let mut trainer = Trainer::new(config, &dataset, &ZeroProvider).unwrap();
    trainer.run(&mut |_, _| Ok(())).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = trainer.model.extent;
    trainer.model.cloud = random_cloud(&mut rng, splats, 0.6 * extent, (-4.5, -3.2));
    bags::io::save_checkpoint(&bags::io::Checkpoint::from_trainer(&trainer), path).unwrap();
}
