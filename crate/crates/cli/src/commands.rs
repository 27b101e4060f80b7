use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use mvdd::attention::EpipolarConfig;
use mvdd::camera::{rig_layouts, CameraRig, Intrinsics, RigFile, RigParams};
use mvdd::dataset::{generate, read_container, write_container, DepthContainer, ALL_KINDS};
use mvdd::denoiser::{read_checkpoint, train as train_model, write_checkpoint, CheckpointConfig, Denoiser, DenoiserConfig, TrainConfig};
use mvdd::geometry::{
    depth_average, depth_filter, fuse_to_pointcloud, read_pfm, read_ply, write_pfm, write_ply, DepthMapSet, FusionThresholds,
    PfmImage, PointCloud, VisibilityMask,
};
use mvdd::metrics::{distances, evaluate_sets, oracle, subsample, SetMetrics};
use mvdd::scheduler::{cosine_schedule, sample_completion, sample_unconditional, SampleOutput, SamplerConfig};

use crate::config::{resolve, write_sidecar};
use crate::{CliError, ExportPlyArgs, ExtractViewArgs, FuseArgs, FusionArgs, GenDataArgs, SampleArgs, TrainArgs};
use crate::{CompleteArgs, EvalArgs};

type CliResult<T = ()> = Result<T, CliError>;

fn open(path: &Path) -> CliResult<BufReader<File>> {
    if !path.exists() {
        return Err(CliError::usage(format!("{} does not exist", path.display())));
    }
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

/// Runs a writer and attaches the path to any failure.
fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> mvdd::Result<()>) -> CliResult {
    let mut out = create(path)?;
    f(&mut out).map_err(|e| with_path(path, e))?;
    out.flush().map_err(|e| CliError::io(format!("{}: {e}", path.display())))
}

fn with_path(path: &Path, e: mvdd::Error) -> CliError {
    let mut err = CliError::from(e);
    err.message = format!("{}: {}", path.display(), err.message);
    err
}

fn load_container(path: &Path) -> CliResult<DepthContainer> {
    read_container(open(path)?).map_err(|e| with_path(path, e))
}

fn sample_at(c: &DepthContainer, index: usize) -> CliResult<(&DepthMapSet, Option<&VisibilityMask>)> {
    let set = c.samples.get(index).ok_or_else(|| {
        CliError::usage(format!("sample {index} out of range (container holds {})", c.samples.len()))
    })?;
    Ok((set, c.masks.as_ref().map(|m| &m[index])))
}

fn thresholds(psi_max: f64, epsilon_rel: f64) -> FusionThresholds {
    FusionThresholds { psi_max, epsilon_rel }
}

fn fusion_flags(f: &FusionArgs) -> Value {
    json!({
        "fusion_window": f.fusion_window,
        "psi_max": f.psi_max,
        "epsilon_rel": f.epsilon_rel,
        "min_views": f.min_views,
        "clip_denoised": f.no_clip.then_some(false),
    })
}

fn merge(a: Value, b: Value) -> Value {
    match (a, b) {
        (Value::Object(mut a), Value::Object(b)) => {
            a.extend(b);
            Value::Object(a)
        }
        (a, _) => a,
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct GenDataConfig {
    out: PathBuf,
    count: usize,
    views: usize,
    res: usize,
    rig: String,
    first_camera: Option<[f64; 3]>,
    kinds: Vec<String>,
    seed: u64,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::new(),
            count: 64,
            views: 4,
            res: 16,
            rig: "fixed".into(),
            first_camera: None,
            kinds: ALL_KINDS.iter().map(|s| s.to_string()).collect(),
            seed: 0,
        }
    }
}

fn build_rig(layout: &str, views: usize, res: usize, first_camera: Option<[f64; 3]>) -> CliResult<CameraRig> {
    let params = RigParams {
        intrinsics: Intrinsics::centered(res, res),
        first_center: first_camera.map(|c| c.into()),
    };
    let rig = rig_layouts().get(layout)?.build(&params)?;
    Ok(rig.truncated(views)?)
}

pub fn gen_data(a: GenDataArgs, file: Option<&Path>) -> CliResult {
    let cfg: GenDataConfig = resolve(
        file,
        json!({
            "out": a.out, "count": a.count, "views": a.views, "res": a.res, "rig": a.rig,
            "first_camera": a.first_camera, "kinds": a.kinds, "seed": a.seed,
        }),
    )?;
    let rig = build_rig(&cfg.rig, cfg.views, cfg.res, cfg.first_camera)?;
    let kinds: Vec<&str> = cfg.kinds.iter().map(String::as_str).collect();
    let container = generate(cfg.count, &rig, cfg.seed, &kinds)?;
    write_file(&cfg.out, |w| write_container(&container, w))?;
    write_sidecar(&cfg.out, &cfg)?;
    let m = &container.manifest;
    let mut tally = BTreeMap::new();
    for k in &m.kinds {
        *tally.entry(k.as_str()).or_insert(0usize) += 1;
    }
    println!(
        "wrote {} samples ({} views, {}x{}, depth [{:.4}, {:.4}]) to {}",
        m.count,
        m.views,
        m.height,
        m.width,
        m.near,
        m.far,
        cfg.out.display()
    );
    let kinds: Vec<String> = tally.iter().map(|(k, n)| format!("{k}={n}")).collect();
    println!("kinds: {}", kinds.join(" "));
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct TrainRun {
    data: PathBuf,
    out: PathBuf,
    loss_csv: Option<PathBuf>,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    beta1: f64,
    beta2: f64,
    seed: u64,
    #[serde(rename = "T")]
    steps: usize,
    s: f64,
    levels: usize,
    base_channels: usize,
    channel_multipliers: Vec<usize>,
    groups: usize,
    heads: usize,
    attention_levels: Option<Vec<usize>>,
    k: usize,
    #[serde(rename = "R")]
    r: usize,
    delta: f64,
    tau: f64,
    views: Option<usize>,
    res: Option<usize>,
}

impl Default for TrainRun {
    fn default() -> Self {
        let t = TrainConfig::default();
        let m = DenoiserConfig::default();
        let e = EpipolarConfig::default();
        Self {
            data: PathBuf::new(),
            out: PathBuf::new(),
            loss_csv: None,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            beta1: t.beta1,
            beta2: t.beta2,
            seed: 0,
            steps: 1000,
            s: 0.008,
            levels: m.levels,
            base_channels: m.base_channels,
            channel_multipliers: m.channel_multipliers,
            groups: m.groups,
            heads: m.heads,
            attention_levels: None,
            k: e.k,
            r: e.r,
            delta: e.delta,
            tau: e.tau,
            views: None,
            res: None,
        }
    }
}

fn loss_csv_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".loss.csv");
    PathBuf::from(s)
}

pub fn train(a: TrainArgs, file: Option<&Path>) -> CliResult {
    let mut cfg: TrainRun = resolve(
        file,
        json!({
            "data": a.data, "out": a.out, "loss_csv": a.loss_csv, "epochs": a.epochs,
            "batch_size": a.batch_size, "lr": a.lr, "seed": a.seed, "T": a.steps,
            "levels": a.levels, "base_channels": a.base_channels,
            "channel_multipliers": a.channel_multipliers, "groups": a.groups, "heads": a.heads,
            "attention_levels": a.attention_levels, "k": a.k, "R": a.r, "delta": a.delta,
            "tau": a.tau, "views": a.views, "res": a.res,
        }),
    )?;
    let data = load_container(&cfg.data)?;
    let m = &data.manifest;
    if m.height != m.width {
        return Err(CliError::mismatch(format!("dataset maps are {}x{}; the denoiser needs square maps", m.height, m.width)));
    }
    if cfg.views.is_some_and(|v| v != m.views) || cfg.res.is_some_and(|r| r != m.height) {
        return Err(CliError::mismatch(format!(
            "config expects {} views at {} px, dataset has {} views at {}x{}",
            cfg.views.map_or("any".into(), |v| v.to_string()),
            cfg.res.map_or("any".into(), |r| r.to_string()),
            m.views,
            m.height,
            m.width
        )));
    }
    cfg.views = Some(m.views);
    cfg.res = Some(m.height);
    let levels = cfg.levels;
    let attention = cfg
        .attention_levels
        .get_or_insert_with(|| (levels.saturating_sub(2)..levels).collect())
        .clone();
    let model_cfg = DenoiserConfig {
        levels,
        base_channels: cfg.base_channels,
        channel_multipliers: cfg.channel_multipliers.clone(),
        groups: cfg.groups,
        heads: cfg.heads,
        resolution: m.height,
        views: m.views,
        attention_levels: attention,
        epipolar: EpipolarConfig {
            k: cfg.k,
            r: cfg.r,
            delta: cfg.delta,
            tau: cfg.tau,
        },
    };
    let schedule = cosine_schedule(cfg.steps, cfg.s)?;
    let mut model = Denoiser::new(model_cfg, cfg.seed)?;
    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        seed: cfg.seed,
    };
    let curve = train_model(&mut model, &data.samples, &schedule, &train_cfg, |epoch, loss| {
        eprintln!("epoch {epoch}/{} loss {loss:.6}", train_cfg.epochs);
    })?;
    let ckpt = CheckpointConfig {
        model: model.config.clone(),
        steps: cfg.steps,
        s: cfg.s,
        near: m.near,
        far: m.far,
        rig: m.rig.clone(),
    };
    write_file(&cfg.out, |w| write_checkpoint(&ckpt, &model.params, w))?;
    let csv_path = cfg.loss_csv.get_or_insert_with(|| loss_csv_path(&cfg.out)).clone();
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in curve.iter().enumerate() {
        csv.push_str(&format!("{},{l:e}\n", i + 1));
    }
    std::fs::write(&csv_path, csv).map_err(|e| CliError::io(format!("{}: {e}", csv_path.display())))?;
    write_sidecar(&cfg.out, &cfg)?;
    println!(
        "trained {} parameters for {} epochs; checkpoint {}, loss curve {}",
        model.params.scalar_count(),
        curve.len(),
        cfg.out.display(),
        csv_path.display()
    );
    Ok(())
}

/// Model, training rig and schedule parameters stored in a checkpoint.
fn load_model(path: &Path) -> CliResult<(Denoiser, CheckpointConfig)> {
    let (cfg, params): (CheckpointConfig, _) = read_checkpoint(open(path)?).map_err(|e| with_path(path, e))?;
    let reference = Denoiser::new(cfg.model.clone(), 0).map_err(|e| with_path(path, e))?;
    let layout = |p: &mvdd::denoiser::ParamStore| -> Vec<(String, Vec<usize>)> {
        p.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect()
    };
    if layout(&reference.params) != layout(&params) {
        return Err(CliError::mismatch(format!(
            "{}: parameters do not match the stored architecture",
            path.display()
        )));
    }
    Ok((
        Denoiser {
            config: cfg.model.clone(),
            params,
        },
        cfg,
    ))
}

fn sampling_rig(model: &Denoiser, ckpt: &CheckpointConfig, override_path: Option<&Path>) -> CliResult<CameraRig> {
    let rig = match override_path {
        Some(p) => {
            let file: RigFile = serde_json::from_reader(open(p)?)
                .map_err(|e| CliError::mismatch(format!("{}: {e}", p.display())))?;
            CameraRig::from_json(&file).map_err(|e| with_path(p, e))?
        }
        None => CameraRig::from_json(&ckpt.rig)?,
    };
    let k = rig.intrinsics();
    let c = &model.config;
    if rig.len() != c.views || k.width != c.resolution || k.height != c.resolution {
        return Err(CliError::mismatch(format!(
            "rig has {} views at {}x{}, checkpoint expects {} views at {}x{}",
            rig.len(),
            k.height,
            k.width,
            c.views,
            c.resolution,
            c.resolution
        )));
    }
    Ok(rig)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct SamplingRun {
    ckpt: PathBuf,
    out: PathBuf,
    ply: Option<PathBuf>,
    input: Option<PathBuf>,
    view: Option<usize>,
    count: usize,
    seed: u64,
    rig: Option<PathBuf>,
    fusion_window: usize,
    psi_max: f64,
    epsilon_rel: f64,
    min_views: usize,
    clip_denoised: bool,
}

impl Default for SamplingRun {
    fn default() -> Self {
        let s = SamplerConfig::default();
        Self {
            ckpt: PathBuf::new(),
            out: PathBuf::new(),
            ply: None,
            input: None,
            view: None,
            count: 1,
            seed: 0,
            rig: None,
            fusion_window: s.fusion_window,
            psi_max: s.thresholds.psi_max,
            epsilon_rel: s.thresholds.epsilon_rel,
            min_views: s.min_views,
            clip_denoised: s.clip_denoised,
        }
    }
}

impl SamplingRun {
    fn sampler(&self, seed: u64) -> SamplerConfig {
        SamplerConfig {
            fusion_window: self.fusion_window,
            thresholds: thresholds(self.psi_max, self.epsilon_rel),
            min_views: self.min_views,
            seed,
            clip_denoised: self.clip_denoised,
        }
    }
}

/// `a/b.ply` → `a/b_3.ply`.
fn indexed_path(path: &Path, index: usize) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}_{index}.{}", ext.to_string_lossy()),
        None => format!("{stem}_{index}"),
    };
    path.with_file_name(name)
}

fn write_outputs(run: &SamplingRun, outputs: Vec<SampleOutput>) -> CliResult {
    if let Some(ply) = &run.ply {
        for (i, o) in outputs.iter().enumerate() {
            let path = if outputs.len() == 1 { ply.clone() } else { indexed_path(ply, i) };
            let cloud = fuse_to_pointcloud(&o.depth, &o.mask)?;
            write_file(&path, |w| write_ply(&cloud, w))?;
            println!("sample {i}: {} fused points -> {}", cloud.len(), path.display());
        }
    }
    let (depths, masks): (Vec<_>, Vec<_>) = outputs.into_iter().map(|o| (o.depth, o.mask)).unzip();
    let mut container = DepthContainer::from_sets(depths, Some(masks))?;
    container.manifest.seed = Some(run.seed);
    write_file(&run.out, |w| write_container(&container, w))?;
    write_sidecar(&run.out, run)?;
    println!("wrote {} sample(s) to {}", container.samples.len(), run.out.display());
    Ok(())
}

pub fn sample(a: SampleArgs, file: Option<&Path>) -> CliResult {
    let flags = json!({
        "ckpt": a.ckpt, "out": a.out, "ply": a.ply, "count": a.count, "seed": a.seed, "rig": a.rig,
    });
    let run: SamplingRun = resolve(file, merge(flags, fusion_flags(&a.fusion)))?;
    if run.count == 0 {
        return Err(CliError::usage("--count must be at least 1"));
    }
    let (model, ckpt) = load_model(&run.ckpt)?;
    let rig = sampling_rig(&model, &ckpt, run.rig.as_deref())?;
    let schedule = cosine_schedule(ckpt.steps, ckpt.s)?;
    let norm = ckpt.normalization()?;
    let outputs = (0..run.count)
        .map(|i| sample_unconditional(&model, &rig, norm, &schedule, &run.sampler(run.seed.wrapping_add(i as u64))))
        .collect::<mvdd::Result<Vec<_>>>()?;
    write_outputs(&run, outputs)
}

pub fn complete(a: CompleteArgs, file: Option<&Path>) -> CliResult {
    let flags = json!({
        "ckpt": a.ckpt, "out": a.out, "ply": a.ply, "input": a.input, "view": a.view,
        "seed": a.seed, "rig": a.rig,
    });
    let mut run: SamplingRun = resolve(file, merge(flags, fusion_flags(&a.fusion)))?;
    run.count = 1;
    let input_path = run.input.clone().unwrap_or_default();
    let input = read_pfm(open(&input_path)?).map_err(|e| with_path(&input_path, e))?;
    let (model, ckpt) = load_model(&run.ckpt)?;
    let rig = sampling_rig(&model, &ckpt, run.rig.as_deref())?;
    let view = run.view.unwrap_or(0);
    if view >= rig.len() {
        return Err(CliError::usage(format!("--view {view} out of range for {} views", rig.len())));
    }
    let k = rig.intrinsics();
    if (input.width, input.height) != (k.width, k.height) {
        return Err(CliError::mismatch(format!(
            "input map is {}x{}, rig expects {}x{}",
            input.height, input.width, k.height, k.width
        )));
    }
    let schedule = cosine_schedule(ckpt.steps, ckpt.s)?;
    let out = sample_completion(
        &model,
        &input.values,
        view,
        &rig,
        ckpt.normalization()?,
        &schedule,
        &run.sampler(run.seed),
    )?;
    write_outputs(&run, vec![out])
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct EvalRun {
    generated: PathBuf,
    reference: PathBuf,
    metrics: Vec<String>,
    subsample: Option<usize>,
    seed: u64,
    oracle: bool,
    out: Option<PathBuf>,
}

impl Default for EvalRun {
    fn default() -> Self {
        Self {
            generated: PathBuf::new(),
            reference: PathBuf::new(),
            metrics: vec!["cd".into(), "emd".into()],
            subsample: None,
            seed: 0,
            oracle: false,
            out: None,
        }
    }
}

fn is_ply(path: &Path) -> CliResult<bool> {
    let mut head = [0u8; 3];
    let n = open(path)?
        .read(&mut head)
        .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    Ok(&head[..n] == b"ply")
}

/// Clouds from a directory of PLY files (sorted by name), one PLY file, or a
/// depth container (each sample back-projected through its stored mask).
fn load_clouds(path: &Path) -> CliResult<Vec<PointCloud>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)
            .map_err(|e| CliError::io(format!("{}: {e}", path.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ply"))
            .collect();
        files.sort();
        return files
            .iter()
            .map(|f| read_ply(open(f)?).map_err(|e| with_path(f, e)))
            .collect();
    }
    if is_ply(path)? {
        return Ok(vec![read_ply(open(path)?).map_err(|e| with_path(path, e))?]);
    }
    let c = load_container(path)?;
    (0..c.samples.len())
        .map(|i| {
            let set = &c.samples[i];
            let mask = c.masks.as_ref().map_or_else(|| VisibilityMask::all(set, true), |m| m[i].clone());
            Ok(fuse_to_pointcloud(set, &mask)?)
        })
        .collect()
}

fn metrics_json(m: &SetMetrics) -> Value {
    json!({"mmd": m.mmd, "cov": m.cov, "one_nna": m.one_nna})
}

pub fn eval(a: EvalArgs, file: Option<&Path>) -> CliResult {
    let run: EvalRun = resolve(
        file,
        json!({
            "generated": a.generated, "reference": a.reference, "metrics": a.metrics,
            "subsample": a.subsample, "seed": a.seed, "oracle": a.oracle.then_some(true), "out": a.out,
        }),
    )?;
    let mut generated = load_clouds(&run.generated)?;
    let mut reference = load_clouds(&run.reference)?;
    if generated.is_empty() || reference.is_empty() {
        return Err(CliError::mismatch("both cloud sets must be nonempty"));
    }
    if generated.iter().chain(&reference).any(|c| c.is_empty()) {
        return Err(CliError::mismatch("every cloud needs at least one point"));
    }
    if let Some(n) = run.subsample {
        if n == 0 {
            return Err(CliError::usage("--subsample must be at least 1"));
        }
        // Streams follow the cloud index only, so a set compared with
        // itself is subsampled identically on both sides.
        for (i, c) in generated.iter_mut().enumerate() {
            *c = subsample(c, n, run.seed, i as u64);
        }
        for (i, c) in reference.iter_mut().enumerate() {
            *c = subsample(c, n, run.seed, i as u64);
        }
    }
    let mut report = serde_json::Map::new();
    report.insert("generated".into(), json!(generated.len()));
    report.insert("reference".into(), json!(reference.len()));
    let mut rows = Vec::new();
    let mut worst_oracle_gap: f64 = 0.0;
    for name in &run.metrics {
        let dist = distances().get(name)?;
        let counts: Vec<usize> = generated.iter().chain(&reference).map(PointCloud::len).collect();
        if name == "emd" && counts.iter().any(|&n| n != counts[0]) {
            return Err(CliError::mismatch(
                "EMD needs equal point counts in every cloud; pass --subsample",
            ));
        }
        let m = evaluate_sets(&generated, &reference, dist.as_ref())?;
        report.insert(name.clone(), metrics_json(&m));
        rows.push((name.clone(), m));
        if run.oracle {
            if name == "emd" && counts[0] > oracle::MAX_PERMUTATION_POINTS {
                return Err(CliError::usage(format!(
                    "--oracle with emd needs at most {} points per cloud",
                    oracle::MAX_PERMUTATION_POINTS
                )));
            }
            let o = oracle::set_metrics(&generated, &reference, name);
            let gap = (o.mmd - m.mmd).abs().max((o.cov - m.cov).abs()).max((o.one_nna - m.one_nna).abs());
            worst_oracle_gap = worst_oracle_gap.max(gap);
            report.insert(format!("{name}_oracle"), metrics_json(&o));
        }
    }
    if run.oracle {
        report.insert("oracle_max_abs_diff".into(), json!(worst_oracle_gap));
    }
    let text = serde_json::to_string_pretty(&Value::Object(report)).map_err(CliError::usage)? + "\n";
    if let Some(out) = &run.out {
        std::fs::write(out, &text).map_err(|e| CliError::io(format!("{}: {e}", out.display())))?;
        write_sidecar(out, &run)?;
    }
    println!("{:<8}{:>14}{:>10}{:>10}", "metric", "MMD", "COV", "1-NNA");
    for (name, m) in &rows {
        println!("{:<8}{:>14.6e}{:>10.4}{:>10.4}", name, m.mmd, m.cov, m.one_nna);
    }
    print!("{text}");
    if worst_oracle_gap > 1e-9 {
        return Err(CliError::mismatch(format!(
            "oracle disagreement {worst_oracle_gap:e} exceeds 1e-9"
        )));
    }
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default)]
struct FuseRun {
    input: PathBuf,
    out: PathBuf,
    sample: usize,
    average: bool,
    psi_max: f64,
    epsilon_rel: f64,
    min_views: usize,
}

impl Default for FuseRun {
    fn default() -> Self {
        let t = FusionThresholds::default();
        Self {
            input: PathBuf::new(),
            out: PathBuf::new(),
            sample: 0,
            average: false,
            psi_max: t.psi_max,
            epsilon_rel: t.epsilon_rel,
            min_views: 2,
        }
    }
}

pub fn fuse(a: FuseArgs, file: Option<&Path>) -> CliResult {
    let flags = json!({
        "input": a.input, "out": a.out, "sample": a.sample, "average": a.average.then_some(true),
    });
    let mut fusion = fusion_flags(&a.fusion);
    if let Value::Object(m) = &mut fusion {
        m.remove("fusion_window");
    }
    let run: FuseRun = resolve(file, merge(flags, fusion))?;
    let c = load_container(&run.input)?;
    let (set, _) = sample_at(&c, run.sample)?;
    let th = thresholds(run.psi_max, run.epsilon_rel);
    let set = if run.average { depth_average(set, &th) } else { set.clone() };
    let mask = depth_filter(&set, &th, run.min_views);
    let cloud = fuse_to_pointcloud(&set, &mask)?;
    write_file(&run.out, |w| write_ply(&cloud, w))?;
    write_sidecar(&run.out, &run)?;
    println!("{} of {} pixels kept; {} points -> {}", mask.count(), mask.flags.len(), cloud.len(), run.out.display());
    Ok(())
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct ExportRun {
    input: PathBuf,
    out: PathBuf,
    sample: usize,
    view: usize,
    masked: bool,
}

pub fn export_ply(a: ExportPlyArgs, file: Option<&Path>) -> CliResult {
    let run: ExportRun = resolve(
        file,
        json!({"input": a.input, "out": a.out, "sample": a.sample, "masked": a.masked.then_some(true)}),
    )?;
    let c = load_container(&run.input)?;
    let (set, stored) = sample_at(&c, run.sample)?;
    let mask = match (run.masked, stored) {
        (true, Some(m)) => m.clone(),
        (true, None) => return Err(CliError::mismatch(format!("{} has no stored masks", run.input.display()))),
        (false, _) => VisibilityMask::all(set, true),
    };
    let cloud = fuse_to_pointcloud(set, &mask)?;
    write_file(&run.out, |w| write_ply(&cloud, w))?;
    write_sidecar(&run.out, &run)?;
    println!("{} points -> {}", cloud.len(), run.out.display());
    Ok(())
}

pub fn extract_view(a: ExtractViewArgs, file: Option<&Path>) -> CliResult {
    let run: ExportRun = resolve(
        file,
        json!({"input": a.input, "out": a.out, "sample": a.sample, "view": a.view}),
    )?;
    let c = load_container(&run.input)?;
    let (set, _) = sample_at(&c, run.sample)?;
    if run.view >= set.views {
        return Err(CliError::usage(format!("--view {} out of range for {} views", run.view, set.views)));
    }
    let image = PfmImage {
        width: set.width,
        height: set.height,
        values: set.view(run.view).to_vec(),
    };
    write_file(&run.out, |w| write_pfm(&image, w))?;
    write_sidecar(&run.out, &run)?;
    println!("view {} of sample {} -> {}", run.view, run.sample, run.out.display());
    Ok(())
}
