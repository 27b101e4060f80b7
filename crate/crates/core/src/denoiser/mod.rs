//! The ε-prediction U-Net over multi-view depth maps.
//!
//! Every view shares the same weights. Views interact only through the
//! epipolar attention blocks, and each view is conditioned on the noise
//! level and its own camera through AdaGN scale/shift in every residual
//! block.

mod params;
mod tape;

pub use params::{read_checkpoint, write_checkpoint, Adam, AdamConfig, ParamStore, Tensor, CHECKPOINT_VERSION};
pub use tape::{Shape, Tape, Var};

use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{plan_epipolar, pool_depth, EpipolarConfig, Neighborhood};
use crate::camera::{flatten_extrinsics, CameraRig, RigFile};
use crate::error::{invalid, Error, Result};
use crate::geometry::{DepthMapSet, DepthNormalization};
use crate::rng::{purpose, substream};
use crate::scheduler::{default_neighbors, q_sample, training_draw, EpsilonModel, NoiseSchedule};

/// Width of the flattened camera row fed to the camera embedding.
pub const CAMERA_ROW: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub groups: usize,
    pub heads: usize,
    /// Square map side.
    pub resolution: usize,
    pub views: usize,
    pub attention_levels: Vec<usize>,
    pub epipolar: EpipolarConfig,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            levels: 3,
            base_channels: 32,
            channel_multipliers: vec![1, 2, 4],
            groups: 8,
            heads: 2,
            resolution: 16,
            views: 4,
            attention_levels: vec![1, 2],
            epipolar: EpipolarConfig::default(),
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.channel_multipliers.len() != self.levels {
            return Err(invalid("channel_multipliers must list one entry per level"));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(1 << (self.levels - 1)) {
            return Err(invalid(format!(
                "resolution {} is not divisible by 2^{}",
                self.resolution,
                self.levels - 1
            )));
        }
        if self.base_channels < 2 || self.views == 0 || self.groups == 0 || self.heads == 0 {
            return Err(invalid("channels, views, groups and heads must be positive"));
        }
        for l in 0..self.levels {
            let c = self.channels(l);
            if !c.is_multiple_of(self.groups) || !c.is_multiple_of(self.heads) {
                return Err(invalid(format!("{c} channels at level {l} must divide into groups and heads")));
            }
        }
        if !self.base_channels.is_multiple_of(2) || !self.base_channels.is_multiple_of(self.groups) {
            return Err(invalid("base channels must be even and divisible by groups"));
        }
        if self.attention_levels.iter().any(|&l| l >= self.levels) {
            return Err(invalid("attention level out of range"));
        }
        if !self.attention_levels.is_empty() && (self.epipolar.k == 0 || self.epipolar.r == 0) {
            return Err(invalid("attention needs k ≥ 1 and R ≥ 1"));
        }
        Ok(())
    }

    pub fn channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_multipliers[level]
    }

    pub fn embed_dim(&self) -> usize {
        4 * self.base_channels
    }

    fn has_attention(&self, level: usize) -> bool {
        self.attention_levels.contains(&level)
    }
}

/// `[sin(x / 10000^{i/(d−1)})]_i ++ [cos(x / 10000^{i/(d−1)})]_i` for `i < d`; output width `2d`.
pub fn pos_enc(x: f64, d: usize) -> Vec<f64> {
    let denom = |i: usize| 10000f64.powf(i as f64 / (d.max(2) - 1) as f64);
    let sin = (0..d).map(|i| (x / denom(i)).sin());
    let cos = (0..d).map(|i| (x / denom(i)).cos());
    sin.chain(cos).collect()
}

#[derive(Clone, Copy)]
enum Init {
    FanIn,
    Zero,
    One,
}

fn add_tensor(store: &mut ParamStore, rng: &mut impl Rng, name: String, shape: Vec<usize>, init: Init) -> Result<()> {
    let len: usize = shape.iter().product();
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    let bound = 1.0 / (fan_in as f64).sqrt();
    let value = match init {
        Init::FanIn => (0..len).map(|_| rng.gen_range(-bound..bound)).collect(),
        Init::Zero => vec![0.0; len],
        Init::One => vec![1.0; len],
    };
    store.insert(Tensor { name, shape, value })
}

struct Builder<'r, R: Rng> {
    store: ParamStore,
    rng: &'r mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn conv(&mut self, name: &str, ci: usize, co: usize, k: usize, bias: bool, init: Init) -> Result<()> {
        add_tensor(&mut self.store, self.rng, format!("{name}.w"), vec![co, ci, k, k], init)?;
        if bias {
            add_tensor(&mut self.store, self.rng, format!("{name}.b"), vec![co], Init::Zero)?;
        }
        Ok(())
    }

    fn norm(&mut self, name: &str, c: usize) -> Result<()> {
        add_tensor(&mut self.store, self.rng, format!("{name}.g"), vec![c], Init::One)?;
        add_tensor(&mut self.store, self.rng, format!("{name}.b"), vec![c], Init::Zero)
    }

    fn resblock(&mut self, name: &str, ci: usize, co: usize, embed: usize) -> Result<()> {
        self.norm(&format!("{name}.gn1"), ci)?;
        self.conv(&format!("{name}.conv1"), ci, co, 3, true, Init::FanIn)?;
        self.conv(&format!("{name}.scale"), embed, co, 1, true, Init::FanIn)?;
        self.conv(&format!("{name}.shift"), embed, co, 1, true, Init::FanIn)?;
        self.norm(&format!("{name}.gn2"), co)?;
        self.conv(&format!("{name}.conv2"), co, co, 3, true, Init::FanIn)?;
        if ci != co {
            self.conv(&format!("{name}.skip"), ci, co, 1, true, Init::FanIn)?;
        }
        Ok(())
    }

    fn attention(&mut self, name: &str, c: usize, heads: usize) -> Result<()> {
        self.norm(&format!("{name}.gn"), c)?;
        for p in ["q", "k", "v"] {
            self.conv(&format!("{name}.{p}"), c, c, 1, true, Init::FanIn)?;
        }
        self.conv(&format!("{name}.fold"), c + heads, c, 1, false, Init::Zero)
    }
}

/// Parameters plus the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    pub params: ParamStore,
}

/// Per-forward geometry: one plan per attention level.
struct Context {
    plans: Vec<Option<Rc<crate::attention::EpipolarPlan>>>,
}

impl Denoiser {
    /// Fan-in uniform initialization; the output convolution and attention folds start at zero.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(seed, &[purpose::PARAM_INIT]);
        let mut b = Builder {
            store: ParamStore::default(),
            rng: &mut rng,
        };
        let e = config.embed_dim();
        let base = config.base_channels;
        b.conv("time.l1", base, e, 1, true, Init::FanIn)?;
        b.conv("time.l2", e, e, 1, true, Init::FanIn)?;
        b.conv("cam.embed", CAMERA_ROW, e, 1, true, Init::FanIn)?;
        b.conv("cam.l1", e, e, 1, true, Init::FanIn)?;
        b.conv("cam.l2", e, e, 1, true, Init::FanIn)?;
        b.conv("in", 1, base, 3, true, Init::FanIn)?;
        let mut prev = base;
        for l in 0..config.levels {
            let c = config.channels(l);
            b.resblock(&format!("enc{l}.res"), prev, c, e)?;
            if config.has_attention(l) {
                b.attention(&format!("enc{l}.attn"), c, config.heads)?;
            }
            if l + 1 < config.levels {
                b.conv(&format!("enc{l}.down"), c, c, 3, true, Init::FanIn)?;
            }
            prev = c;
        }
        for l in (0..config.levels).rev() {
            let c = config.channels(l);
            b.resblock(&format!("dec{l}.res"), prev + c, c, e)?;
            if config.has_attention(l) {
                b.attention(&format!("dec{l}.attn"), c, config.heads)?;
            }
            prev = c;
            if l > 0 {
                let next = config.channels(l - 1);
                b.conv(&format!("dec{l}.up"), c, next, 3, true, Init::FanIn)?;
                prev = next;
            }
        }
        b.norm("out.gn", base)?;
        b.conv("out.conv", base, 1, 3, true, Init::Zero)?;
        let params = b.store;
        Ok(Self { config, params })
    }

    /// Every parameter redrawn from nonzero distributions (used to exercise all paths in gradient checks).
    pub fn randomized(config: DenoiserConfig, seed: u64) -> Result<Self> {
        let mut model = Self::new(config, seed)?;
        let mut rng = substream(seed, &[purpose::PARAM_INIT, 1]);
        for t in &mut model.params.tensors {
            let fan_in: usize = t.shape[1..].iter().product::<usize>().max(1);
            let is_gain = t.name.ends_with(".g");
            let bound = if t.shape.len() == 1 { 0.2 } else { 1.0 / (fan_in as f64).sqrt() };
            for v in &mut t.value {
                *v = if is_gain { 1.0 } else { 0.0 } + rng.gen_range(-bound..bound);
            }
        }
        Ok(model)
    }

    pub fn check_input(&self, x: &DepthMapSet) -> Result<()> {
        let c = &self.config;
        if (x.views, x.height, x.width) != (c.views, c.resolution, c.resolution) {
            return Err(Error::ShapeMismatch(format!(
                "model expects {}×{}×{} maps, got {}×{}×{}",
                c.views, c.resolution, c.resolution, x.views, x.height, x.width
            )));
        }
        Ok(())
    }

    fn context(&self, x_t: &DepthMapSet, neighbors: &Neighborhood) -> Result<Context> {
        let e = &self.config.epipolar;
        let mut plans = vec![None; self.config.levels];
        for &l in &self.config.attention_levels {
            let pooled = pool_depth(x_t, 1 << l)?;
            plans[l] = Some(Rc::new(plan_epipolar(&pooled, neighbors, e.k, e.delta, e.tau)?));
        }
        Ok(Context { plans })
    }

    fn linear(&self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let w = tape.param(&format!("{name}.w"))?;
        let b = tape.param(&format!("{name}.b")).ok();
        tape.conv(x, w, b, 1, 0)
    }

    fn conv3(&self, tape: &mut Tape, name: &str, x: Var, stride: usize) -> Result<Var> {
        let w = tape.param(&format!("{name}.w"))?;
        let b = tape.param(&format!("{name}.b"))?;
        tape.conv(x, w, Some(b), stride, 1)
    }

    fn norm(&self, tape: &mut Tape, name: &str, x: Var) -> Result<Var> {
        let g = tape.param(&format!("{name}.g"))?;
        let b = tape.param(&format!("{name}.b"))?;
        tape.group_norm(x, g, b, self.config.groups)
    }

    /// Conditioning vectors `z` as a `[views, E, 1, 1]` tensor.
    fn embedding(&self, tape: &mut Tape, alpha_bar: f64, rig: &CameraRig) -> Result<Var> {
        let n = rig.len();
        let width = self.config.base_channels;
        let enc = pos_enc(alpha_bar.sqrt(), width / 2);
        let pe = tape.input(enc.repeat(n), [n, width, 1, 1]);
        let rows: Vec<f64> = flatten_extrinsics(rig).into_iter().flatten().collect();
        let cam = tape.input(rows, [n, CAMERA_ROW, 1, 1]);
        let h = self.linear(tape, "time.l1", pe)?;
        let h = tape.silu(h);
        let tz = self.linear(tape, "time.l2", h)?;
        let h = self.linear(tape, "cam.embed", cam)?;
        let h = self.linear(tape, "cam.l1", h)?;
        let h = tape.silu(h);
        let cz = self.linear(tape, "cam.l2", h)?;
        tape.add(tz, cz)
    }

    fn resblock(&self, tape: &mut Tape, name: &str, x: Var, cond: Var) -> Result<Var> {
        let h = self.norm(tape, &format!("{name}.gn1"), x)?;
        let h = tape.silu(h);
        let h = self.conv3(tape, &format!("{name}.conv1"), h, 1)?;
        let h = self.norm(tape, &format!("{name}.gn2"), h)?;
        let s = self.linear(tape, &format!("{name}.scale"), cond)?;
        let b = self.linear(tape, &format!("{name}.shift"), cond)?;
        let h = tape.scale_shift(h, s, b)?;
        let h = tape.silu(h);
        let h = self.conv3(tape, &format!("{name}.conv2"), h, 1)?;
        let skip = if self.params.index(&format!("{name}.skip.w")).is_ok() {
            self.linear(tape, &format!("{name}.skip"), x)?
        } else {
            x
        };
        tape.add(skip, h)
    }

    fn attention(&self, tape: &mut Tape, name: &str, x: Var, plan: &Rc<crate::attention::EpipolarPlan>) -> Result<Var> {
        let h = self.norm(tape, &format!("{name}.gn"), x)?;
        let q = self.linear(tape, &format!("{name}.q"), h)?;
        let k = self.linear(tape, &format!("{name}.k"), h)?;
        let v = self.linear(tape, &format!("{name}.v"), h)?;
        let a = tape.epipolar(q, k, v, Rc::clone(plan), self.config.heads)?;
        let o = self.linear(tape, &format!("{name}.fold"), a)?;
        tape.add(x, o)
    }

    /// Records the forward pass and returns the `[views, 1, H, W]` prediction.
    pub fn forward(&self, tape: &mut Tape, x_t: &DepthMapSet, alpha_bar: f64, neighbors: &Neighborhood) -> Result<Var> {
        self.check_input(x_t)?;
        if !(0.0..=1.0).contains(&alpha_bar) {
            return Err(invalid(format!("alpha_bar {alpha_bar} outside [0, 1]")));
        }
        let ctx = self.context(x_t, neighbors)?;
        let c = &self.config;
        let z = self.embedding(tape, alpha_bar, &x_t.rig)?;
        let cond = tape.silu(z);
        let x = tape.input(x_t.values.clone(), [x_t.views, 1, x_t.height, x_t.width]);
        let mut h = self.conv3(tape, "in", x, 1)?;
        let mut skips = Vec::with_capacity(c.levels);
        for l in 0..c.levels {
            h = self.resblock(tape, &format!("enc{l}.res"), h, cond)?;
            if let Some(plan) = &ctx.plans[l] {
                h = self.attention(tape, &format!("enc{l}.attn"), h, plan)?;
            }
            skips.push(h);
            if l + 1 < c.levels {
                h = self.conv3(tape, &format!("enc{l}.down"), h, 2)?;
            }
        }
        for l in (0..c.levels).rev() {
            h = tape.concat(h, skips[l])?;
            h = self.resblock(tape, &format!("dec{l}.res"), h, cond)?;
            if let Some(plan) = &ctx.plans[l] {
                h = self.attention(tape, &format!("dec{l}.attn"), h, plan)?;
            }
            if l > 0 {
                h = tape.upsample(h);
                h = self.conv3(tape, &format!("dec{l}.up"), h, 1)?;
            }
        }
        let h = self.norm(tape, "out.gn", h)?;
        let h = tape.silu(h);
        self.conv3(tape, "out.conv", h, 1)
    }

    /// ε prediction for every element of `x_t`.
    pub fn denoise_forward(&self, x_t: &DepthMapSet, alpha_bar: f64, neighbors: &Neighborhood) -> Result<Vec<f64>> {
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, x_t, alpha_bar, neighbors)?;
        Ok(tape.value(out).to_vec())
    }

    /// `z = MLP(PosEnc(√ᾱ)) + MLP(Linear(c))` for one camera row.
    pub fn time_camera_embedding(&self, alpha_bar: f64, camera_row: &[f64; CAMERA_ROW]) -> Result<Vec<f64>> {
        if !(0.0..=1.0).contains(&alpha_bar) {
            return Err(invalid(format!("alpha_bar {alpha_bar} outside [0, 1]")));
        }
        let mut tape = Tape::new(&self.params);
        let width = self.config.base_channels;
        let pe = tape.input(pos_enc(alpha_bar.sqrt(), width / 2), [1, width, 1, 1]);
        let cam = tape.input(camera_row.to_vec(), [1, CAMERA_ROW, 1, 1]);
        let h = self.linear(&mut tape, "time.l1", pe)?;
        let h = tape.silu(h);
        let tz = self.linear(&mut tape, "time.l2", h)?;
        let h = self.linear(&mut tape, "cam.embed", cam)?;
        let h = self.linear(&mut tape, "cam.l1", h)?;
        let h = tape.silu(h);
        let cz = self.linear(&mut tape, "cam.l2", h)?;
        let z = tape.add(tz, cz)?;
        Ok(tape.value(z).to_vec())
    }

    /// Loss and parameter gradients for one clean sample, timestep and noise draw.
    pub fn loss_and_grads(
        &self,
        schedule: &NoiseSchedule,
        x0: &DepthMapSet,
        t: usize,
        eps: &[f64],
        neighbors: &Neighborhood,
    ) -> Result<(f64, Vec<Option<Vec<f64>>>)> {
        let x_t = q_sample(schedule, x0, t, eps)?;
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, &x_t, schedule.alpha_bar(t), neighbors)?;
        let loss = tape.mse(out, eps)?;
        let value = tape.value(loss)[0];
        Ok((value, tape.backward(loss)))
    }

    pub fn loss(&self, schedule: &NoiseSchedule, x0: &DepthMapSet, t: usize, eps: &[f64], neighbors: &Neighborhood) -> Result<f64> {
        let x_t = q_sample(schedule, x0, t, eps)?;
        let pred = self.denoise_forward(&x_t, schedule.alpha_bar(t), neighbors)?;
        Ok(pred.iter().zip(eps).map(|(p, e)| (p - e).powi(2)).sum::<f64>() / eps.len() as f64)
    }
}

impl EpsilonModel for Denoiser {
    fn predict(&self, x_t: &DepthMapSet, alpha_bar: f64, neighbors: &Neighborhood) -> Result<Vec<f64>> {
        self.denoise_forward(x_t, alpha_bar, neighbors)
    }

    fn neighbor_count(&self) -> usize {
        if self.config.attention_levels.is_empty() {
            0
        } else {
            self.config.epipolar.r
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            epochs: 30,
            batch_size: 4,
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            seed: 0,
        }
    }
}

/// Adam over shuffled mini-batches; returns the mean loss of each epoch.
///
/// Samples are processed one after another and their gradients summed in
/// batch order, so the curve is reproducible for a fixed seed.
pub fn train(
    model: &mut Denoiser,
    data: &[DepthMapSet],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(invalid("training data is empty"));
    }
    if config.batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    for x in data {
        model.check_input(x)?;
    }
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.lr,
            beta1: config.beta1,
            beta2: config.beta2,
            ..AdamConfig::default()
        },
        &model.params,
    );
    let mut curve = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut substream(config.seed, &[purpose::TRAIN_SHUFFLE, epoch as u64]));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let mut sum: Vec<Option<Vec<f64>>> = vec![None; model.params.len()];
            for &i in batch {
                let x0 = &data[i];
                let (t, eps) = training_draw(schedule, x0.values.len(), config.seed, epoch as u64, i as u64);
                let neighbors = default_neighbors(model, &x0.rig)?;
                let (loss, grads) = model.loss_and_grads(schedule, x0, t, &eps, &neighbors)?;
                epoch_loss += loss;
                for (s, g) in sum.iter_mut().zip(grads) {
                    let Some(g) = g else { continue };
                    match s {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *s = Some(g),
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for g in sum.iter_mut().flatten() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            adam.update(&mut model.params, &sum);
        }
        let mean = epoch_loss / data.len() as f64;
        log::info!("epoch {} loss {mean:.6}", epoch + 1);
        on_epoch(epoch + 1, mean);
        curve.push(mean);
    }
    Ok(curve)
}

/// One compared coordinate of a finite-difference check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCoordinate {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub coordinates: Vec<GradCoordinate>,
}

/// `|a − n| / max(|a|, |n|, 1e−8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `grads` with central differences of `loss` on `count` coordinates.
/// Every tensor contributes at least one coordinate; the rest are drawn uniformly.
pub fn finite_difference_check(
    params: &ParamStore,
    grads: &[Option<Vec<f64>>],
    count: usize,
    h: f64,
    seed: u64,
    loss: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<GradCheck> {
    let mut rng = substream(seed, &[purpose::SUBSAMPLE, 0x6772_6164]);
    let mut picks: Vec<(usize, usize)> = params
        .tensors
        .iter()
        .enumerate()
        .map(|(i, t)| (i, rng.gen_range(0..t.value.len())))
        .collect();
    let total = params.scalar_count();
    while picks.len() < count.max(params.len()) {
        let mut flat = rng.gen_range(0..total);
        let mut ti = 0;
        while flat >= params.tensors[ti].value.len() {
            flat -= params.tensors[ti].value.len();
            ti += 1;
        }
        picks.push((ti, flat));
    }
    let mut work = params.clone();
    let mut coordinates = Vec::with_capacity(picks.len());
    for (ti, j) in picks {
        let orig = work.tensors[ti].value[j];
        work.tensors[ti].value[j] = orig + h;
        let plus = loss(&work)?;
        work.tensors[ti].value[j] = orig - h;
        let minus = loss(&work)?;
        work.tensors[ti].value[j] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads[ti].as_ref().map_or(0.0, |g| g[j]);
        coordinates.push(GradCoordinate {
            param: params.tensors[ti].name.clone(),
            index: j,
            analytic,
            numeric,
            rel_error: relative_error(analytic, numeric),
        });
    }
    let max_rel_error = coordinates.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradCheck {
        max_rel_error,
        coordinates,
    })
}

/// Finite-difference check of the training loss gradient at timestep `t`
/// with noise drawn from `seed`.
pub fn gradient_check(
    model: &Denoiser,
    schedule: &NoiseSchedule,
    x0: &DepthMapSet,
    t: usize,
    seed: u64,
    count: usize,
    h: f64,
) -> Result<GradCheck> {
    let eps = crate::rng::normal_vec(&mut substream(seed, &[purpose::TRAIN_NOISE, u64::MAX]), x0.values.len());
    let neighbors = default_neighbors(model, &x0.rig)?;
    let (_, grads) = model.loss_and_grads(schedule, x0, t, &eps, &neighbors)?;
    finite_difference_check(&model.params, &grads, count, h, seed, |p| {
        let probe = Denoiser {
            config: model.config.clone(),
            params: p.clone(),
        };
        probe.loss(schedule, x0, t, &eps, &neighbors)
    })
}

/// Everything a checkpoint needs besides the weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub model: DenoiserConfig,
    #[serde(rename = "T")]
    pub steps: usize,
    pub s: f64,
    pub near: f64,
    pub far: f64,
    pub rig: RigFile,
}

impl CheckpointConfig {
    pub fn normalization(&self) -> Result<DepthNormalization> {
        DepthNormalization::new(self.near, self.far)
    }
}
