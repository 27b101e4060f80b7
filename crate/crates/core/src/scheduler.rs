//! Diffusion schedule, forward noising, the ε objective and the two samplers.
//!
//! Timesteps run `1..=T`; index 0 denotes clean data with `ᾱ_0 = 1`.

use serde::{Deserialize, Serialize};

use crate::attention::{EpipolarConfig, Neighborhood};
use crate::camera::CameraRig;
use crate::error::{invalid, Error, Result};
use crate::geometry::{depth_average, depth_filter, DepthMapSet, DepthNormalization, FusionThresholds, VisibilityMask};
use crate::rng::{fill_normal, normal_vec, purpose, substream};
use rand::Rng;

/// Upper bound applied to every derived β.
pub const MAX_BETA: f64 = 0.999;

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub steps: usize,
    pub s: f64,
    /// `beta[t - 1]` is β_t.
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    /// `alpha_bar[t]` for `t = 0..=T`.
    pub alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(invalid(format!("timestep {t} outside 1..={}", self.steps)));
        }
        Ok(())
    }
}

/// Cosine schedule: `f(t) = cos²(((t/T + s)/(1 + s))·π/2)`, `β_t = 1 − f(t)/f(t−1)` clipped to [`MAX_BETA`];
/// `ᾱ` is the running product of the clipped `1 − β`.
pub fn cosine_schedule(steps: usize, s: f64) -> Result<NoiseSchedule> {
    if steps == 0 {
        return Err(invalid("schedule needs at least one step"));
    }
    if !(s > 0.0) {
        return Err(invalid("cosine offset s must be positive"));
    }
    let f = |t: usize| {
        let x = ((t as f64 / steps as f64 + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let mut beta = Vec::with_capacity(steps);
    let mut alpha_bar = vec![1.0];
    for t in 1..=steps {
        let b = (1.0 - f(t) / f(t - 1)).clamp(0.0, MAX_BETA);
        beta.push(b);
        alpha_bar.push(alpha_bar[t - 1] * (1.0 - b));
    }
    let alpha = beta.iter().map(|b| 1.0 - b).collect();
    Ok(NoiseSchedule {
        steps,
        s,
        beta,
        alpha,
        alpha_bar,
    })
}

/// `√ᾱ_t x0 + √(1−ᾱ_t) ε`, unclipped.
pub fn q_sample_values(schedule: &NoiseSchedule, x0: &[f64], t: usize, eps: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if x0.len() != eps.len() {
        return Err(Error::ShapeMismatch("noise and data lengths differ".into()));
    }
    let ab = schedule.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

pub fn q_sample(schedule: &NoiseSchedule, x0: &DepthMapSet, t: usize, eps: &[f64]) -> Result<DepthMapSet> {
    let values = q_sample_values(schedule, &x0.values, t, eps)?;
    Ok(DepthMapSet {
        values,
        ..x0.clone()
    })
}

/// `(x_t − (1−α_t)/√(1−ᾱ_t)·ε)/√α_t`.
pub fn posterior_mean(schedule: &NoiseSchedule, x_t: &[f64], eps: &[f64], t: usize) -> Vec<f64> {
    let (a, ab) = (schedule.alpha(t), schedule.alpha_bar(t));
    let c = (1.0 - a) / (1.0 - ab).sqrt();
    let inv = 1.0 / a.sqrt();
    x_t.iter().zip(eps).map(|(x, e)| (x - c * e) * inv).collect()
}

/// Posterior mean of `q(x_{t−1} | x_t, x̂_0)` with the implied clean estimate
/// `x̂_0 = (x_t − √(1−ᾱ_t)·ε)/√ᾱ_t` clamped to the depth range `[−1, 1]`.
/// Equal to [`posterior_mean`] whenever `x̂_0` is already in range; the clamp
/// keeps the `1/√α_t` blow-up of the first steps from amplifying ε errors.
pub fn posterior_mean_clipped(schedule: &NoiseSchedule, x_t: &[f64], eps: &[f64], t: usize) -> Vec<f64> {
    let (a, ab, beta) = (schedule.alpha(t), schedule.alpha_bar(t), schedule.beta(t));
    let ab_prev = schedule.alpha_bar(t - 1);
    let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
    let ct = a.sqrt() * (1.0 - ab_prev) / (1.0 - ab);
    let (root, noise) = (ab.sqrt(), (1.0 - ab).sqrt());
    x_t.iter()
        .zip(eps)
        .map(|(x, e)| c0 * ((x - noise * e) / root).clamp(-1.0, 1.0) + ct * x)
        .collect()
}

fn reverse_mean(schedule: &NoiseSchedule, x_t: &[f64], eps: &[f64], t: usize, config: &SamplerConfig) -> Vec<f64> {
    if config.clip_denoised {
        posterior_mean_clipped(schedule, x_t, eps, t)
    } else {
        posterior_mean(schedule, x_t, eps, t)
    }
}

/// One ancestral step; `z` is ignored at `t = 1`.
pub fn ddpm_step(schedule: &NoiseSchedule, x_t: &[f64], eps_pred: &[f64], t: usize, z: &[f64]) -> Result<Vec<f64>> {
    schedule.check_step(t)?;
    if x_t.len() != eps_pred.len() || x_t.len() != z.len() {
        return Err(Error::ShapeMismatch("ddpm_step inputs differ in length".into()));
    }
    let mut mean = posterior_mean(schedule, x_t, eps_pred, t);
    if t > 1 {
        let sigma = schedule.beta(t).sqrt();
        for (m, zi) in mean.iter_mut().zip(z) {
            *m += sigma * zi;
        }
    }
    Ok(mean)
}

/// A network predicting the noise in `x_t` at noise level `ᾱ_t`.
pub trait EpsilonModel {
    /// `neighbors` lists, per view, the views it may attend to.
    fn predict(&self, x_t: &DepthMapSet, alpha_bar: f64, neighbors: &Neighborhood) -> Result<Vec<f64>>;

    /// Neighbor count used when every view attends to its nearest cameras.
    fn neighbor_count(&self) -> usize {
        0
    }
}

/// Default attention lists for a rig.
pub fn default_neighbors<M: EpsilonModel + ?Sized>(model: &M, rig: &CameraRig) -> Result<Neighborhood> {
    let r = model.neighbor_count().min(rig.len().saturating_sub(1));
    if r == 0 {
        return Ok(Neighborhood::isolated(rig.len()));
    }
    Neighborhood::nearest(rig, r)
}

/// Timestep and noise for training item `item` of step `step`.
pub fn training_draw(schedule: &NoiseSchedule, len: usize, seed: u64, step: u64, item: u64) -> (usize, Vec<f64>) {
    let t = substream(seed, &[purpose::TRAIN_TIMESTEP, step, item]).gen_range(1..=schedule.steps);
    let eps = normal_vec(&mut substream(seed, &[purpose::TRAIN_NOISE, step, item]), len);
    (t, eps)
}

/// Mean squared ε error over every element of every batch item.
pub fn training_loss<M: EpsilonModel + ?Sized>(
    model: &M,
    schedule: &NoiseSchedule,
    batch: &[DepthMapSet],
    seed: u64,
    step: u64,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(invalid("training batch is empty"));
    }
    let (mut total, mut count) = (0.0, 0usize);
    for (i, x0) in batch.iter().enumerate() {
        let (t, eps) = training_draw(schedule, x0.values.len(), seed, step, i as u64);
        let x_t = q_sample(schedule, x0, t, &eps)?;
        let nb = default_neighbors(model, &x0.rig)?;
        let pred = model.predict(&x_t, schedule.alpha_bar(t), &nb)?;
        total += pred.iter().zip(&eps).map(|(p, e)| (p - e).powi(2)).sum::<f64>();
        count += eps.len();
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Number of final reverse steps that apply depth averaging.
    pub fusion_window: usize,
    pub thresholds: FusionThresholds,
    /// Supporting views required by the final filter.
    pub min_views: usize,
    pub seed: u64,
    /// Clamp the implied clean estimate to `[−1, 1]` in every reverse step.
    #[serde(default = "default_clip")]
    pub clip_denoised: bool,
}

fn default_clip() -> bool {
    true
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            fusion_window: 20,
            thresholds: FusionThresholds::default(),
            min_views: 2,
            seed: 0,
            clip_denoised: true,
        }
    }
}

/// Final depth maps in normalized units and the filter mask (all true without fusion).
#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub depth: DepthMapSet,
    pub mask: VisibilityMask,
}

fn validate_window(schedule: &NoiseSchedule, config: &SamplerConfig) -> Result<()> {
    if config.fusion_window > schedule.steps {
        return Err(invalid(format!(
            "fusion window {} exceeds {} steps",
            config.fusion_window, schedule.steps
        )));
    }
    Ok(())
}

fn view_noise(seed: u64, tag: u64, view: usize, step: usize, out: &mut [f64]) {
    fill_normal(&mut substream(seed, &[tag, view as u64, step as u64]), out);
}

fn fuse_mean(mean: Vec<f64>, template: &DepthMapSet, thresholds: &FusionThresholds) -> Vec<f64> {
    let set = DepthMapSet {
        values: mean,
        ..template.clone()
    };
    depth_average(&set, thresholds).values
}

fn finish(x: DepthMapSet, config: &SamplerConfig) -> SampleOutput {
    let depth = x.clipped();
    let mask = if config.fusion_window > 0 {
        depth_filter(&depth, &config.thresholds, config.min_views)
    } else {
        VisibilityMask::all(&depth, true)
    };
    SampleOutput { depth, mask }
}

/// Ancestral sampling from pure noise, with depth averaging of the
/// posterior mean in the last `fusion_window` steps.
pub fn sample_unconditional<M: EpsilonModel + ?Sized>(
    model: &M,
    rig: &CameraRig,
    normalization: DepthNormalization,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<SampleOutput> {
    validate_window(schedule, config)?;
    let mut x = DepthMapSet::filled(rig.clone(), normalization, 0.0);
    let px = x.pixels();
    for v in 0..x.views {
        view_noise(config.seed, purpose::INIT_NOISE, v, 0, x.view_mut(v));
    }
    let neighbors = default_neighbors(model, rig)?;
    let mut z = vec![0.0; x.values.len()];
    for t in (1..=schedule.steps).rev() {
        let eps = model.predict(&x, schedule.alpha_bar(t), &neighbors)?;
        let mut mean = reverse_mean(schedule, &x.values, &eps, t, config);
        if t <= config.fusion_window {
            mean = fuse_mean(mean, &x, &config.thresholds);
        }
        if t > 1 {
            for v in 0..x.views {
                view_noise(config.seed, purpose::STEP_NOISE, v, t, &mut z[v * px..(v + 1) * px]);
            }
            let sigma = schedule.beta(t).sqrt();
            for (m, zi) in mean.iter_mut().zip(&z) {
                *m += sigma * zi;
            }
        }
        x.values = mean;
    }
    Ok(finish(x, config))
}

/// Generates every view other than `index` conditioned on the clean map
/// `input` (normalized, `H·W` values) using a cross-view pass followed by a
/// pass that attends only to the input view. The input is returned verbatim.
pub fn sample_completion<M: EpsilonModel + ?Sized>(
    model: &M,
    input: &[f64],
    index: usize,
    rig: &CameraRig,
    normalization: DepthNormalization,
    schedule: &NoiseSchedule,
    config: &SamplerConfig,
) -> Result<SampleOutput> {
    validate_window(schedule, config)?;
    if index >= rig.len() {
        return Err(invalid(format!("input view {index} out of range for {} views", rig.len())));
    }
    let mut x = DepthMapSet::filled(rig.clone(), normalization, 0.0);
    let px = x.pixels();
    if input.len() != px {
        return Err(Error::ShapeMismatch(format!("input view has {} values, rig expects {px}", input.len())));
    }
    if input.iter().any(|v| !v.is_finite()) {
        return Err(invalid("input depth must be finite"));
    }
    let views = x.views;
    let seed = config.seed;
    let noisy_input = |ab: f64, step: usize| -> Vec<f64> {
        let mut e = vec![0.0; px];
        fill_normal(&mut substream(seed, &[purpose::INPUT_NOISE, step as u64]), &mut e);
        input
            .iter()
            .zip(&e)
            .map(|(x0, e)| ab.sqrt() * x0 + (1.0 - ab).sqrt() * e)
            .collect()
    };
    for v in (0..views).filter(|&v| v != index) {
        view_noise(seed, purpose::INIT_NOISE, v, 0, x.view_mut(v));
    }
    x.view_mut(index)
        .copy_from_slice(&noisy_input(schedule.alpha_bar(schedule.steps), schedule.steps + 1));
    let full = default_neighbors(model, rig)?;
    let only_input = Neighborhood::only(&full, index)?;
    let mut z = vec![0.0; px];
    for t in (1..=schedule.steps).rev() {
        let (beta, ab) = (schedule.beta(t), schedule.alpha_bar(t));
        let sigma = if t > 1 { beta.sqrt() } else { 0.0 };

        // First pass: every view attends to its neighbors at the current state.
        let eps = model.predict(&x, ab, &full)?;
        let mean = reverse_mean(schedule, &x.values, &eps, t, config);
        let mut staged = x.clone();
        let shrink = (1.0 - beta).sqrt();
        for v in (0..views).filter(|&v| v != index) {
            view_noise(seed, purpose::FIRST_PASS_NOISE, v, t, &mut z);
            for (p, dst) in staged.view_mut(v).iter_mut().enumerate() {
                *dst = shrink * mean[v * px + p] + sigma * z[p];
            }
        }
        staged.view_mut(index).copy_from_slice(input);

        // Second pass: the other views attend only to the clean input view.
        let eps = model.predict(&staged, ab, &only_input)?;
        let mut mean = reverse_mean(schedule, &staged.values, &eps, t, config);
        if t <= config.fusion_window {
            mean[index * px..(index + 1) * px].copy_from_slice(input);
            mean = fuse_mean(mean, &x, &config.thresholds);
        }
        for v in (0..views).filter(|&v| v != index) {
            view_noise(seed, purpose::STEP_NOISE, v, t, &mut z);
            for (p, dst) in x.view_mut(v).iter_mut().enumerate() {
                *dst = mean[v * px + p] + sigma * z[p];
            }
        }
        x.view_mut(index).copy_from_slice(&noisy_input(ab, t));
    }
    let mut out = finish(x, config);
    out.depth.view_mut(index).copy_from_slice(input);
    if config.fusion_window > 0 {
        out.mask = depth_filter(&out.depth, &config.thresholds, config.min_views);
    }
    Ok(out)
}

/// Serialized sampling configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(rename = "T")]
    pub steps: usize,
    pub s: f64,
    pub fusion_window: usize,
    pub psi_max: f64,
    pub epsilon_rel: f64,
    pub tau: f64,
    pub k: usize,
    #[serde(rename = "R")]
    pub r: usize,
    pub delta: f64,
    pub seed: u64,
    #[serde(default = "default_min_views")]
    pub min_views: usize,
    #[serde(default = "default_clip")]
    pub clip_denoised: bool,
}

fn default_min_views() -> usize {
    2
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = EpipolarConfig::default();
        let f = FusionThresholds::default();
        Self {
            steps: 1000,
            s: 0.008,
            fusion_window: 20,
            psi_max: f.psi_max,
            epsilon_rel: f.epsilon_rel,
            tau: e.tau,
            k: e.k,
            r: e.r,
            delta: e.delta,
            seed: 0,
            min_views: 2,
            clip_denoised: true,
        }
    }
}

impl RunConfig {
    pub fn schedule(&self) -> Result<NoiseSchedule> {
        cosine_schedule(self.steps, self.s)
    }

    pub fn sampler(&self) -> SamplerConfig {
        SamplerConfig {
            fusion_window: self.fusion_window,
            thresholds: FusionThresholds {
                psi_max: self.psi_max,
                epsilon_rel: self.epsilon_rel,
            },
            min_views: self.min_views,
            seed: self.seed,
            clip_denoised: self.clip_denoised,
        }
    }

    pub fn epipolar(&self) -> EpipolarConfig {
        EpipolarConfig {
            k: self.k,
            r: self.r,
            delta: self.delta,
            tau: self.tau,
        }
    }
}
