//! Two-stage optimization: warm-up of the canonical cloud on a reference
//! frame (with densification), then joint training of cloud, bone rig and
//! per-frame root transforms over a growing window of frames.

mod config;
mod eval;
mod model;
mod schedule;

pub use config::{CurriculumConfig, DensifyConfig, InitConfig, LearningRates, SdsCameraConfig, TrainConfig};
pub use eval::{evaluate, mask_iou, psnr, EvalReport, FrameMetrics, PSNR_CAP};
pub use model::{apply_root, apply_root_backward, identity_roots, Model};
pub use schedule::{curriculum_frames, sample_sds_camera, tau_schedule, Stage};

use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::{densify_and_prune, init_from_mask, DensifyThresholds};
use crate::io::Dataset;
use crate::losses::{
    reconstruction_loss, rigid_loss, sds_step, total_loss, LossTerms, MsSsim, PerceptualMetric, PriorProvider,
    PriorRequest,
};
use crate::numeric::{adam_step, AdamState};
use crate::render::{cloud_grads, render_backward, render_forward, Image, SplatGrads, WorldSplat};
use crate::rig::{farthest_point_centers, warp_backward, warp_cloud, BoneRig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Optimizers {
    /// positions, rotations, log-scales, opacity logits, colors
    pub cloud: Vec<AdamState>,
    pub rig: Vec<AdamState>,
    pub roots: AdamState,
}

/// Serializable position of a ChaCha8 stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: [u64; 2],
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let w = rng.get_word_pos();
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: [w as u64, (w >> 64) as u64],
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos[0] as u128 | (self.word_pos[1] as u128) << 64);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    /// Iteration within the current stage.
    pub iteration: usize,
    pub reference: usize,
    pub optim: Optimizers,
    pub history: Vec<EvalReport>,
    pub rng: RngState,
}

impl TrainState {
    /// Iterations completed over both stages.
    pub fn global_iteration(&self, config: &TrainConfig) -> usize {
        match self.stage {
            Stage::Warmup => self.iteration,
            Stage::Joint => config.warmup_iterations + self.iteration,
            Stage::Done => config.warmup_iterations + config.joint_iterations,
        }
    }
}

/// One optimizer step's numbers, written as a JSON line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: Stage,
    pub iteration: usize,
    pub frame: usize,
    pub loss: f64,
    pub terms: LossTerms,
    pub tau: f64,
    pub sds_skipped: bool,
    pub splats: usize,
    pub active_frames: usize,
}

pub enum Event<'a> {
    Step(&'a StepMetrics),
    Eval(&'a EvalReport),
}

pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub dataset: &'a Dataset,
    pub model: Model,
    pub state: TrainState,
    provider: &'a dyn PriorProvider,
    perceptual: Box<dyn PerceptualMetric>,
    rng: ChaCha8Rng,
}

fn cloud_optimizers(model: &Model, lr: &config::LearningRates) -> Vec<AdamState> {
    let rates = [
        lr.position * model.extent,
        lr.rotation,
        lr.log_scale,
        lr.opacity,
        lr.color,
    ];
    model
        .cloud
        .params()
        .iter()
        .zip(rates)
        .map(|(p, r)| AdamState::for_param(p, r))
        .collect()
}

fn rig_optimizers(rig: &BoneRig, lr: f64) -> Vec<AdamState> {
    rig.params().map(|p| AdamState::for_param(p, lr)).collect()
}

fn new_rig<R: Rng>(config: &TrainConfig, model_cloud: &crate::gaussian::GaussianCloud, extent: f64, t_ref: f64, rng: &mut R) -> Result<BoneRig> {
    let points: Vec<_> = (0..model_cloud.len()).map(|i| model_cloud.position(i)).collect();
    let centers = farthest_point_centers(&points, config.rig.bones, rng)?;
    BoneRig::new(config.rig.clone(), &centers, extent, t_ref, rng)
}

fn divergence(stage: Stage, iteration: usize, message: impl Into<String>) -> Error {
    Error::Divergence {
        stage: stage.name(),
        iteration,
        message: message.into(),
    }
}

impl<'a> Trainer<'a> {
    /// Fresh model: cloud back-projected from the reference frame's mask,
    /// bones spread over it, identity roots.
    pub fn new(config: TrainConfig, dataset: &'a Dataset, provider: &'a dyn PriorProvider) -> Result<Self> {
        config.validate()?;
        let frames = dataset.frames.len();
        let reference = config.reference_frame.unwrap_or(frames / 2);
        if reference >= frames {
            return Err(Error::Config(format!("reference frame {reference} of {frames}")));
        }
        let extent = dataset.scene_extent.unwrap_or(config.init.fallback_extent);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let f = &dataset.frames[reference];
        let cloud = init_from_mask(
            &f.image,
            &f.mask,
            &f.camera,
            config.init.splats,
            config.init.depth_half_range * extent,
            &mut rng,
        )?;
        let rig = new_rig(&config, &cloud, extent, f.t_norm, &mut rng)?;
        let model = Model {
            cloud,
            rig,
            roots: identity_roots(frames),
            frame_times: dataset.frames.iter().map(|f| f.t_norm).collect(),
            extent,
            background: dataset.background,
            settings: config.render,
        };
        let optim = Optimizers {
            cloud: cloud_optimizers(&model, &config.lr),
            rig: rig_optimizers(&model.rig, config.lr.rig),
            roots: AdamState::for_param(&model.roots, config.lr.root),
        };
        let stage = if config.warmup_iterations == 0 {
            Stage::Joint
        } else {
            Stage::Warmup
        };
        let state = TrainState {
            stage,
            iteration: 0,
            reference,
            optim,
            history: Vec::new(),
            rng: RngState::capture(&rng),
        };
        Ok(Self {
            config,
            dataset,
            model,
            state,
            provider,
            perceptual: Box::new(MsSsim::default()),
            rng,
        })
    }

    /// Continues from saved model and state.
    pub fn resume(
        config: TrainConfig,
        dataset: &'a Dataset,
        provider: &'a dyn PriorProvider,
        model: Model,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        if model.frame_times.len() != dataset.frames.len() {
            return Err(Error::Dimension(format!(
                "model has {} frames, dataset {}",
                model.frame_times.len(),
                dataset.frames.len()
            )));
        }
        let rng = state.rng.restore();
        Ok(Self {
            config,
            dataset,
            model,
            state,
            provider,
            perceptual: Box::new(MsSsim::default()),
            rng,
        })
    }

    pub fn set_perceptual(&mut self, metric: Box<dyn PerceptualMetric>) {
        self.perceptual = metric;
    }

    pub fn is_done(&self) -> bool {
        self.state.stage == Stage::Done
    }

    /// Iterations completed over both stages.
    pub fn global_iteration(&self) -> usize {
        self.state.global_iteration(&self.config)
    }

    /// Syncs the stored RNG position; call before serializing `state`.
    pub fn snapshot_rng(&mut self) {
        self.state.rng = RngState::capture(&self.rng);
    }

    pub fn evaluate(&self) -> Result<EvalReport> {
        let mut r = evaluate(&self.model, self.dataset)?;
        r.stage = self.state.stage;
        r.iteration = self.global_iteration();
        Ok(r)
    }

    pub fn active_frames(&self) -> Vec<usize> {
        match self.state.stage {
            Stage::Warmup => vec![self.state.reference],
            Stage::Joint => curriculum_frames(
                &self.config.curriculum,
                self.dataset.frames.len(),
                self.state.reference,
                self.state.iteration,
            ),
            Stage::Done => (0..self.dataset.frames.len()).collect(),
        }
    }

    /// One optimizer step of the current stage.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let m = match self.state.stage {
            Stage::Warmup => self.warmup_step()?,
            Stage::Joint => self.joint_step()?,
            Stage::Done => return Err(Error::InvalidInput("training already finished".into())),
        };
        self.state.iteration += 1;
        match self.state.stage {
            Stage::Warmup if self.state.iteration >= self.config.warmup_iterations => self.begin_joint()?,
            Stage::Joint if self.state.iteration >= self.config.joint_iterations => {
                self.state.stage = Stage::Done;
                self.state.iteration = 0;
            }
            _ => {}
        }
        self.snapshot_rng();
        Ok(m)
    }

    /// Steps to the end, reporting every step and evaluation to `hook`.
    /// Returns the final evaluation.
    pub fn run(&mut self, hook: &mut dyn FnMut(&Trainer, Event) -> Result<()>) -> Result<EvalReport> {
        while !self.is_done() {
            let stage = self.state.stage;
            let m = self.step()?;
            hook(self, Event::Step(&m))?;
            let it = self.global_iteration();
            let stage_end = self.state.stage != stage;
            let due = self.config.eval_interval > 0 && it.is_multiple_of(self.config.eval_interval);
            if (due || stage_end) && !self.is_done() {
                let r = self.evaluate()?;
                self.state.history.push(r.clone());
                hook(self, Event::Eval(&r))?;
            }
        }
        let r = self.evaluate()?;
        self.state.history.push(r.clone());
        hook(self, Event::Eval(&r))?;
        Ok(r)
    }

    /// Re-seats the bones on the warmed-up cloud.
    fn begin_joint(&mut self) -> Result<()> {
        let t_ref = self.dataset.frames[self.state.reference].t_norm;
        self.model.rig = new_rig(&self.config, &self.model.cloud, self.model.extent, t_ref, &mut self.rng)?;
        self.state.optim.rig = rig_optimizers(&self.model.rig, self.config.lr.rig);
        self.state.stage = Stage::Joint;
        self.state.iteration = 0;
        Ok(())
    }

    /// Reconstruction losses on frame `f` plus the score-distillation step,
    /// both backpropagated to world splats. Also returns the frame render's
    /// view-space gradient norms and visibility for densification.
    fn image_terms(
        &mut self,
        world: &[WorldSplat],
        f: usize,
        tau: f64,
    ) -> Result<(LossTerms, SplatGrads, bool)> {
        let frame = &self.dataset.frames[f];
        let out = render_forward(world, &frame.camera, self.model.background, &self.model.settings);
        let rec = reconstruction_loss(
            &out.color,
            &out.alpha,
            &frame.image,
            &frame.mask,
            &self.config.weights,
            self.perceptual.as_ref(),
        )?;
        let mut grads = render_backward(&out, world, &rec.d_color, &rec.d_alpha)?;
        let mut skipped = true;
        let seed: u64 = self.rng.gen();
        if self.config.weights.sds > 0.0 && !self.provider.abstains() {
            let n = world.len().max(1) as f64;
            let center = world.iter().map(|s| s.mean).sum::<nalgebra::Vector3<f64>>() / n;
            let cam = sample_sds_camera(
                &mut self.rng,
                &self.config.sds_camera,
                center,
                self.model.extent,
                self.dataset.intrinsics,
            );
            let sds_out = render_forward(world, &cam, self.model.background, &self.model.settings);
            let req = PriorRequest {
                render: &sds_out.color,
                reference: &frame.image,
                camera: &cam,
                time: frame.t_norm,
                tau,
                seed,
            };
            let s = sds_step(self.provider, &req, self.config.weights.sds)?;
            skipped = s.skipped;
            if !s.skipped {
                let zero_alpha = Image::new(cam.width, cam.height, 1);
                let mut g = render_backward(&sds_out, world, &s.grad, &zero_alpha)?;
                // densification statistics come from the frame render only
                g.view_grad_norm.iter_mut().for_each(|v| *v = 0.0);
                g.visible.iter_mut().for_each(|v| *v = false);
                grads.add(&g);
            }
        }
        Ok((rec.terms, grads, skipped))
    }

    fn check_grads(&self, loss: f64, what: &str) -> Result<()> {
        if !loss.is_finite() {
            return Err(divergence(self.state.stage, self.state.iteration, format!("loss is {loss}")));
        }
        let bad = self.model.cloud.params().iter().any(|p| p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
            || self.model.rig.params().any(|p| p.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite())))
            || self.model.roots.grad().is_some_and(|g| g.iter().any(|v| !v.is_finite()));
        if bad {
            return Err(divergence(self.state.stage, self.state.iteration, format!("non-finite {what} gradient")));
        }
        Ok(())
    }

    /// Sets position and rig learning rates for the current joint iteration.
    fn decay_rates(&mut self) {
        let lr = &self.config.lr;
        let n = self.config.joint_iterations.max(2) - 1;
        let f = lr.joint_decay.powf(self.state.iteration.min(n) as f64 / n as f64);
        let ramp = ((self.state.iteration + 1) as f64 / lr.rig_ramp.max(1) as f64).min(1.0);
        self.state.optim.cloud[0].lr = lr.position * self.model.extent * f;
        for s in &mut self.state.optim.rig {
            s.lr = lr.rig * f * ramp;
        }
    }

    fn apply_updates(&mut self, rig: bool) -> Result<()> {
        for (p, s) in self.model.cloud.params_mut().into_iter().zip(self.state.optim.cloud.iter_mut()) {
            adam_step(p, s)?;
        }
        if rig {
            for (p, s) in self.model.rig.params_mut().zip(self.state.optim.rig.iter_mut()) {
                adam_step(p, s)?;
            }
        }
        adam_step(&mut self.model.roots, &mut self.state.optim.roots)?;
        for f in 0..self.model.roots.rows() {
            let r = self.model.roots.row_mut(f);
            let q = crate::numeric::quat::normalize(&[r[0], r[1], r[2], r[3]]);
            r[..4].copy_from_slice(&q);
        }
        self.model.cloud.enforce_invariants(self.model.extent);
        self.model
            .check_finite()
            .map_err(|e| divergence(self.state.stage, self.state.iteration, e.to_string()))
    }

    fn add_root_grad(&mut self, f: usize, g: &[f64; 7]) {
        let grad = self.model.roots.grad_mut();
        for k in 0..7 {
            grad[f * 7 + k] += g[k];
        }
    }

    fn warmup_step(&mut self) -> Result<StepMetrics> {
        let f = self.state.reference;
        let it = self.state.iteration;
        let tau = tau_schedule(&self.config, Stage::Warmup, it);
        let canonical = crate::render::cloud_splats(&self.model.cloud);
        let (r, t) = self.model.root(f);
        let world = apply_root(&canonical, &r, &t);
        let (terms, g_world, skipped) = self.image_terms(&world, f, tau)?;
        let loss = total_loss(&terms, &self.config.weights);
        let (g_canon, g_root) = apply_root_backward(&canonical, self.model.roots.row(f), &g_world);
        let rg = cloud_grads(&self.model.cloud, &g_canon);
        self.model.cloud.zero_grad();
        self.model.roots.zero_grad();
        rg.accumulate_into(&mut self.model.cloud);
        self.add_root_grad(f, &g_root);
        self.check_grads(loss, "warm-up")?;
        self.model
            .cloud
            .accumulate_view_grads(&rg.view_grad_norm, &rg.position, &rg.visible);
        self.apply_updates(false)?;
        self.maybe_densify(it)?;
        Ok(StepMetrics {
            stage: Stage::Warmup,
            iteration: it,
            frame: f,
            loss,
            terms,
            tau,
            sds_skipped: skipped,
            splats: self.model.cloud.len(),
            active_frames: 1,
        })
    }

    fn maybe_densify(&mut self, it: usize) -> Result<()> {
        let d = self.config.densify;
        let done = it + 1;
        if !d.enabled
            || done < d.start
            || !done.is_multiple_of(d.interval)
            || done + d.stop_before_end > self.config.warmup_iterations
        {
            return Ok(());
        }
        let thresholds = DensifyThresholds {
            grad_threshold: if self.model.cloud.len() >= d.max_splats {
                f64::INFINITY
            } else {
                d.grad_threshold
            },
            percent_dense: d.percent_dense,
            scene_extent: self.model.extent,
            min_opacity: d.min_opacity,
            ..DensifyThresholds::default()
        };
        let outcome = densify_and_prune(&mut self.model.cloud, &thresholds, &mut self.rng)?;
        let widths = [3, 4, 3, 1, 3];
        for (s, w) in self.state.optim.cloud.iter_mut().zip(widths) {
            s.remap_rows(w, &outcome.sources);
        }
        log::debug!(
            "densify at {done}: cloned {}, split {}, pruned {}, now {}",
            outcome.cloned,
            outcome.split,
            outcome.pruned,
            self.model.cloud.len()
        );
        Ok(())
    }

    fn joint_step(&mut self) -> Result<StepMetrics> {
        let it = self.state.iteration;
        let tau = tau_schedule(&self.config, Stage::Joint, it);
        let active = self.active_frames();
        let f = active[self.rng.gen_range(0..active.len())];
        let t = self.dataset.frames[f].t_norm;
        let (canonical, c_tape) = self.model.rig.canonical_pose_taped()?;
        let (target, t_tape) = self.model.rig.pose_at_taped(t)?;
        let warp = warp_cloud(&self.model.cloud, &canonical, &target)?;
        let (r, tr) = self.model.root(f);
        let world = apply_root(&warp.splats, &r, &tr);
        let (mut terms, g_world, skipped) = self.image_terms(&world, f, tau)?;
        let (g_warped, g_root) = apply_root_backward(&warp.splats, self.model.roots.row(f), &g_world);
        let d_jac: Option<Vec<Matrix3<f64>>> = if self.config.weights.rigid > 0.0 {
            let (v, g) = rigid_loss(&warp.jacobians)?;
            terms.rigid = v;
            Some(g.into_iter().map(|m| m * self.config.weights.rigid).collect())
        } else {
            None
        };
        let loss = total_loss(&terms, &self.config.weights);
        let wg = warp_backward(&warp, &self.model.cloud, &g_warped, d_jac.as_deref())?;
        self.model.cloud.zero_grad();
        self.model.rig.zero_grad();
        self.model.roots.zero_grad();
        wg.cloud.accumulate_into(&mut self.model.cloud);
        self.model.rig.pose_backward(&t_tape, &wg.target)?;
        self.model.rig.canonical_backward(&c_tape, &wg.canonical)?;
        self.add_root_grad(f, &g_root);
        self.check_grads(loss, "joint")?;
        self.decay_rates();
        self.apply_updates(true)?;
        Ok(StepMetrics {
            stage: Stage::Joint,
            iteration: it,
            frame: f,
            loss,
            terms,
            tau,
            sds_skipped: skipped,
            splats: self.model.cloud.len(),
            active_frames: active.len(),
        })
    }
}

/// Runs the warm-up stage to completion.
pub fn warmup_stage(trainer: &mut Trainer) -> Result<()> {
    while trainer.state.stage == Stage::Warmup {
        trainer.step()?;
    }
    Ok(())
}

/// Runs the joint stage to completion.
pub fn joint_stage(trainer: &mut Trainer) -> Result<()> {
    while trainer.state.stage == Stage::Joint {
        trainer.step()?;
    }
    Ok(())
}
