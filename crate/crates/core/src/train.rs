//! Training loop: config, per-iteration step, evaluation and checkpoints.

use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::container::{self, find_array, NamedArray};
use crate::encoding::InputLayout;
use crate::error::{Error, Result};
use crate::losses::{total_loss, GroundNeighbors, LossInputs, LossReport};
use crate::metrics::{masked_mse, psnr, psnr_of_mse, ssim_value};
use crate::mlp::{init_net, DeformationNet, InitScheme};
use crate::optim::{Adam, LearningRates};
use crate::raster::{BufferGrads, RenderBuffers};
use crate::render::{render, render_backward, RenderState};
use crate::scenegen::{init_scene_from_dataset, Dataset, InitOptions};
use crate::semantics::{refresh_partitions, RefreshSchedule};
use crate::types::{FrameSample, LossWeights, Scene};

/// Environment variable that overrides the configured seed.
pub const SEED_ENV: &str = "U4D_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Disabling the deformation network renders every Gaussian statically.
    pub deformation: bool,
    pub sh_degree: usize,
    pub time_embed_dim: usize,
    pub bands: usize,
    pub encode_mu: bool,
    pub raw_t: bool,
    pub knn_k: usize,
    /// Ground neighborhoods are rebuilt at this cadence and on every refresh.
    pub knn_rebuild_every: usize,
    pub eval_every: usize,
    pub holdout: Vec<usize>,
    pub refresh: RefreshSchedule,
    pub lr: LearningRates,
    pub weights: LossWeights,
    pub init: InitOptions,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            seed: 0,
            deformation: true,
            sh_degree: 0,
            time_embed_dim: 8,
            bands: 8,
            encode_mu: false,
            raw_t: true,
            knn_k: 16,
            knn_rebuild_every: 500,
            eval_every: 500,
            holdout: vec![3, 9, 15, 21],
            refresh: RefreshSchedule::default(),
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            init: InitOptions::default(),
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::config(format!("train config: {e}")))?;
        c.check()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn layout(&self) -> InputLayout {
        InputLayout {
            bands: self.bands,
            embed_dim: self.time_embed_dim,
            encode_mu: self.encode_mu,
            raw_t: self.raw_t,
        }
    }

    pub fn check(&self) -> Result<()> {
        let mut v = self.lr.validate();
        v.extend(self.weights.validate());
        if self.sh_degree > 1 {
            v.push(format!("sh_degree {} unsupported (0 or 1)", self.sh_degree));
        }
        if self.init.opacity < 0.0 || self.init.opacity > 1.0 {
            v.push(format!("initial opacity {} outside [0, 1]", self.init.opacity));
        }
        if let Err(e) = self.layout().validate() {
            v.push(e.to_string());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::config(v.join("; ")))
        }
    }

    /// Applies `U4D_SEED` if it is set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| Error::config(format!("{SEED_ENV}={s} is not an unsigned integer")))?;
        }
        Ok(self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub iter: usize,
    pub frame: usize,
    pub report: LossReport,
    pub psnr: f64,
}

pub const LOG_HEADER: &str = "iter,frame,l1,ssim,sem,ground,depth,sky,total,psnr";

impl LogRow {
    pub fn csv(&self) -> String {
        let r = &self.report;
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.iter, self.frame, r.l1, r.ssim, r.sem, r.ground, r.depth, r.sky, r.total, self.psnr
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub index: usize,
    pub psnr: f64,
    pub ssim: f64,
    /// Squared error summed over dynamic pixels (all channels) and their count.
    pub dynamic_sq_err: f64,
    pub dynamic_pixels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub iter: usize,
    pub frames: Vec<FrameMetrics>,
}

impl Evaluation {
    pub fn mean_psnr(&self) -> f64 {
        self.frames.iter().map(|f| f.psnr).sum::<f64>() / self.frames.len().max(1) as f64
    }

    pub fn mean_ssim(&self) -> f64 {
        self.frames.iter().map(|f| f.ssim).sum::<f64>() / self.frames.len().max(1) as f64
    }

    /// PSNR of the error pooled over every dynamic pixel of every frame.
    pub fn dynamic_psnr(&self) -> Option<f64> {
        let n: usize = self.frames.iter().map(|f| f.dynamic_pixels).sum();
        if n == 0 {
            return None;
        }
        let sq: f64 = self.frames.iter().map(|f| f.dynamic_sq_err).sum();
        Some(psnr_of_mse(sq / (3 * n) as f64))
    }
}

/// What an observer sees after each step: the render the step was computed
/// from, and the trainer after the update.
pub struct StepView<'a> {
    pub row: &'a LogRow,
    pub buffers: &'a RenderBuffers,
    pub state: &'a RenderState,
}

pub struct Trainer {
    pub config: TrainConfig,
    pub scene: Scene,
    pub net: Option<DeformationNet>,
    pub optim: Adam,
    pub iter: usize,
    /// Scene extent multiplying the position learning rate.
    pub extent: f64,
    pub ground: GroundNeighbors,
    pub log: Vec<LogRow>,
    pub evals: Vec<Evaluation>,
}

/// 1.1 times the largest distance of a camera center from their mean.
pub fn camera_extent(frames: &[&FrameSample]) -> f64 {
    if frames.is_empty() {
        return 1.0;
    }
    let centers: Vec<_> = frames.iter().map(|f| f.camera.center()).collect();
    let mean = centers.iter().sum::<nalgebra::Vector3<f64>>() / centers.len() as f64;
    let r = centers.iter().map(|c| (c - mean).norm()).fold(0.0, f64::max);
    (1.1 * r).max(1.0)
}

fn split_frames<'a>(data: &'a Dataset, holdout: &[usize]) -> Result<(Vec<&'a FrameSample>, Vec<&'a FrameSample>)> {
    for &h in holdout {
        if !data.frames.iter().any(|f| f.index == h) {
            return Err(Error::config(format!("holdout frame {h} is not in the dataset")));
        }
    }
    let (test, train): (Vec<_>, Vec<_>) = data.frames.iter().partition(|f| holdout.contains(&f.index));
    if train.is_empty() {
        return Err(Error::config("no training frames left after the holdout split"));
    }
    Ok((train, test))
}

impl Trainer {
    pub fn new(config: TrainConfig, data: &Dataset) -> Result<Self> {
        config.check()?;
        let problems = data.validate();
        if !problems.is_empty() {
            return Err(Error::config(problems.join("; ")));
        }
        let (train, _) = split_frames(data, &config.holdout)?;
        let init = InitOptions {
            seed: config.seed,
            ..config.init.clone()
        };
        let scene = init_scene_from_dataset(data, &config.holdout, &init, config.sh_degree, config.time_embed_dim)?;
        let net = config
            .deformation
            .then(|| init_net(config.seed, config.layout(), InitScheme::default()));
        let optim = Adam::new(&scene, net.as_ref());
        let ground = GroundNeighbors::build(&scene, config.knn_k, 0);
        info!("initialized {}", scene.summary());
        Ok(Self {
            extent: camera_extent(&train),
            config,
            scene,
            net,
            optim,
            iter: 0,
            ground,
            log: Vec::new(),
            evals: Vec::new(),
        })
    }

    /// One optimization step on `frame`.
    pub fn step(&mut self, frame: &FrameSample) -> Result<(LogRow, RenderBuffers, RenderState)> {
        let cam = &frame.camera;
        let (buf, state) = render(&self.scene, self.net.as_ref(), cam, frame.t)?;
        let inputs = LossInputs {
            width: cam.width,
            height: cam.height,
            num_classes: self.scene.class_table.len(),
            color: &buf.color,
            depth: &buf.depth,
            semantic: &buf.semantic,
            alpha: &buf.alpha,
            gt_color: &frame.image.data,
            gt_semantic: &frame.semantic,
            gt_depth: &frame.depth,
            sky_class: self.scene.class_table.sky_class(),
            scene: &self.scene,
            ground: Some(&self.ground),
        };
        let (report, lg) = total_loss(&inputs, &self.config.weights)?;
        if !report.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss at iteration {} (frame {}): {:?}",
                self.iter,
                frame.index,
                report.terms()
            )));
        }
        let upstream = BufferGrads {
            color: lg.color,
            depth: lg.depth,
            semantic: lg.semantic,
            alpha: lg.alpha,
        };
        let mut grads = render_backward(&self.scene, self.net.as_ref(), cam, &state, &upstream)?;
        for (i, g) in lg.opacity {
            grads.gaussians[i].opacity += g;
        }
        for (i, g) in lg.scale {
            grads.gaussians[i].scale += g;
        }
        if let Some(i) = grads.gaussians.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of gaussian {i} at iteration {}", self.iter)));
        }
        let lrs = self.config.lr.resolve(self.extent, self.iter, self.config.iterations);
        self.optim.apply(&mut self.scene, self.net.as_mut(), &grads, &lrs)?;

        let row = LogRow {
            iter: self.iter,
            frame: frame.index,
            report,
            psnr: psnr(&buf.color, &frame.image.data),
        };
        self.iter += 1;
        let refreshed = self.config.refresh.due(self.iter);
        if refreshed {
            let promoted = refresh_partitions(&mut self.scene);
            if !promoted.is_empty() {
                info!("iteration {}: {} gaussians became dynamic", self.iter, promoted.len());
            }
        }
        let every = self.config.knn_rebuild_every;
        if refreshed || (every > 0 && self.iter % every == 0) {
            self.ground = GroundNeighbors::build(&self.scene, self.config.knn_k, self.iter);
        }
        Ok((row, buf, state))
    }

    /// Runs until `config.iterations`, cycling through the training frames.
    /// `observe` is called after every step.
    pub fn run(&mut self, data: &Dataset, observe: impl FnMut(&Trainer, &StepView<'_>)) -> Result<()> {
        self.run_until(data, self.config.iterations, observe)
    }

    /// Like `run` but stops after iteration `stop`; the schedules still
    /// span the full configured length.
    pub fn run_until(
        &mut self,
        data: &Dataset,
        stop: usize,
        mut observe: impl FnMut(&Trainer, &StepView<'_>),
    ) -> Result<()> {
        let (train, test) = split_frames(data, &self.config.holdout)?;
        while self.iter < stop.min(self.config.iterations) {
            let frame = train[self.iter % train.len()];
            let (row, buf, state) = self.step(frame)?;
            observe(
                self,
                &StepView {
                    row: &row,
                    buffers: &buf,
                    state: &state,
                },
            );
            self.log.push(row);
            let every = self.config.eval_every;
            if !test.is_empty() && every > 0 && (self.iter % every == 0 || self.iter == self.config.iterations) {
                let e = self.evaluate(&test)?;
                info!(
                    "iteration {}: holdout PSNR {:.3} dB, SSIM {:.4}",
                    self.iter,
                    e.mean_psnr(),
                    e.mean_ssim()
                );
                self.evals.push(e);
            }
        }
        Ok(())
    }

    pub fn evaluate(&self, frames: &[&FrameSample]) -> Result<Evaluation> {
        evaluate(&self.scene, self.net.as_ref(), frames, self.iter)
    }

    pub fn log_csv(&self) -> String {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for r in &self.log {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    pub fn checkpoint_arrays(&self) -> Vec<NamedArray> {
        let mut out = Vec::new();
        if let Some(net) = &self.net {
            out.extend(net.to_arrays());
        }
        out.extend(self.optim.to_arrays());
        out.push(NamedArray::scalar("train.iter", self.iter as f64));
        out.push(NamedArray::scalar("train.extent", self.extent));
        let cfg = self.config.to_toml().into_bytes();
        out.push(NamedArray::new("train.config", vec![cfg.len()], cfg.iter().map(|&b| b as f64).collect()));
        let g = &self.ground;
        out.push(NamedArray::new(
            "train.ground.ids",
            vec![g.ids.len()],
            g.ids.iter().map(|&i| i as f64).collect(),
        ));
        let width = g.neighbors.first().map_or(0, Vec::len);
        out.push(NamedArray::new(
            "train.ground.neighbors",
            vec![g.neighbors.len(), width],
            g.neighbors.iter().flatten().map(|&i| i as f64).collect(),
        ));
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        container::write_file(path, &self.scene, &self.checkpoint_arrays())
    }

    /// Restores a trainer so that continuing reproduces an uninterrupted run.
    pub fn load_checkpoint(path: &Path) -> Result<Self> {
        let (scene, arrays) = container::read_file(path)?;
        let need = |name: &str| {
            find_array(&arrays, name).ok_or_else(|| Error::format(path, format!("checkpoint lacks array {name}")))
        };
        let cfg_bytes: Vec<u8> = need("train.config")?.data.iter().map(|&b| b as u8).collect();
        let text = String::from_utf8(cfg_bytes).map_err(|_| Error::format(path, "stored config is not utf-8"))?;
        let config = TrainConfig::from_toml(&text)?;
        let net = if config.deformation {
            Some(DeformationNet::from_arrays(&arrays)?)
        } else {
            None
        };
        let optim = Adam::from_arrays(&arrays)?;
        let ids: Vec<usize> = need("train.ground.ids")?.data.iter().map(|&v| v as usize).collect();
        let nb = need("train.ground.neighbors")?;
        let width = nb.shape.get(1).copied().unwrap_or(0);
        let neighbors: Vec<Vec<usize>> = if width == 0 {
            Vec::new()
        } else {
            nb.data.chunks(width).map(|c| c.iter().map(|&v| v as usize).collect()).collect()
        };
        if ids.iter().any(|&i| i >= scene.len()) {
            warn!("checkpoint ground ids exceed the scene size; rebuilding neighborhoods");
        }
        Ok(Self {
            iter: need("train.iter")?.data[0] as usize,
            extent: need("train.extent")?.data[0],
            ground: GroundNeighbors {
                ids,
                neighbors,
                k: config.knn_k,
            },
            config,
            scene,
            net,
            optim,
            log: Vec::new(),
            evals: Vec::new(),
        })
    }
}

/// Renders each frame at its own time and scores it; dynamic pixels are the
/// ones whose ground-truth class is dynamic.
pub fn evaluate(
    scene: &Scene,
    net: Option<&DeformationNet>,
    frames: &[&FrameSample],
    iter: usize,
) -> Result<Evaluation> {
    let mut out = Vec::with_capacity(frames.len());
    for f in frames {
        let (buf, _) = render(scene, net, &f.camera, f.t)?;
        let mask: Vec<bool> = f.semantic.iter().map(|&c| scene.class_table.is_dynamic(c as usize)).collect();
        let (mse, n) = masked_mse(&buf.color, &f.image.data, &mask);
        out.push(FrameMetrics {
            index: f.index,
            psnr: psnr(&buf.color, &f.image.data),
            ssim: ssim_value(f.camera.width, f.camera.height, &buf.color, &f.image.data)?,
            dynamic_sq_err: mse * (3 * n) as f64,
            dynamic_pixels: n,
        });
    }
    Ok(Evaluation { iter, frames: out })
}

/// Holdout frames of `data` under `config`.
pub fn holdout_frames<'a>(data: &'a Dataset, config: &TrainConfig) -> Result<Vec<&'a FrameSample>> {
    Ok(split_frames(data, &config.holdout)?.1)
}
