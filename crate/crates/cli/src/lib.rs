//! The `g4ds` command line.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use g4ds::io::{self, load_model, ppm, report, save_model, RunConfig};
use g4ds::metrics::flow::FlowField;
use g4ds::model::Model;
use g4ds::nets::encoder::FrozenEncoder;
use g4ds::pipeline::{
    baseline_frames, clamp01, eval_protocol, fit_style, stylized_frames, summarize, ConsistencyReport, EncodedStyle,
    Range, STYLE_SIZE,
};
use g4ds::scene::{flow_oracle, generate_scene, render_ground_truth, SceneSpec};
use g4ds::tensor::Tensor;
use g4ds::train::{gradcheck, train_stage1_with, train_stage2_with, TrainError};
use g4ds::wct::{interpolate_styles, StyleTransform};

#[derive(Parser, Debug)]
#[command(name = "g4ds", version, about = "Dynamic Gaussian splatting with consistent style transfer")]
struct Cli {
    /// Seed for every random choice; overrides the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a procedural scene and its ground-truth images.
    GenScene(GenScene),
    /// Stage 1: fit embedded Gaussians to a scene.
    TrainEmbed(TrainEmbed),
    /// Stage 2: train the style networks on a stage-1 checkpoint.
    TrainStyle(TrainStyle),
    /// Render the color branch (or the decoded feature branch) of a view.
    Render(Render),
    /// Stylize one view.
    Stylize(Stylize),
    /// Blend several styles and render a sweep of views.
    Interpolate(Interpolate),
    /// Warped-consistency metrics over view pairs.
    EvalConsistency(EvalConsistency),
    /// Finite-difference checks of the analytic gradients.
    Gradcheck(Gradcheck),
}

#[derive(Args, Debug)]
struct GenScene {
    /// TOML scene spec; missing keys take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    gaussians: Option<usize>,
    #[arg(long)]
    cameras: Option<usize>,
    #[arg(long)]
    timesteps: Option<usize>,
    /// Scene JSON; images go to `images/` beside it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainEmbed {
    #[arg(long)]
    scene: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainStyle {
    #[arg(long)]
    ckpt: PathBuf,
    /// Directory of `.ppm` style images (at least two).
    #[arg(long)]
    styles_dir: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Scene JSON for the ground truth; without it the views are re-rendered
    /// from the checkpoint's analytic scene.
    #[arg(long)]
    scene: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    supersample: usize,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Branch {
    Color,
    Feature,
}

#[derive(Args, Debug)]
struct Render {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    camera: usize,
    #[arg(long)]
    t: f64,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Branch::Color)]
    branch: Branch,
    /// Also write the raw feature map as a checkpoint-format file.
    #[arg(long)]
    features: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct StyleArgs {
    /// Directory caching `(T_s, μ_s)` per style image and model.
    #[arg(long)]
    style_cache: Option<PathBuf>,
    /// Side of the square the style image is fitted to.
    #[arg(long, default_value_t = STYLE_SIZE)]
    style_size: usize,
    /// Emit the transformed image without propagation.
    #[arg(long)]
    no_propagation: bool,
}

#[derive(Args, Debug)]
struct Stylize {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[arg(long)]
    camera: usize,
    #[arg(long)]
    t: f64,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    style_args: StyleArgs,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sweep {
    /// Every camera at `--t`.
    Cameras,
    /// Every timestamp from `--camera`.
    Time,
}

#[derive(Args, Debug)]
struct Interpolate {
    #[arg(long)]
    ckpt: PathBuf,
    /// Style images, in the order of `--weights`.
    #[arg(long = "style", required = true)]
    styles: Vec<PathBuf>,
    /// Comma-separated non-negative weights summing to one.
    #[arg(long, value_delimiter = ',', required = true)]
    weights: Vec<f64>,
    #[arg(long, value_enum, default_value_t = Sweep::Cameras)]
    sweep: Sweep,
    #[arg(long, default_value_t = 0)]
    camera: usize,
    #[arg(long, default_value_t = 0.0)]
    t: f64,
    #[arg(long)]
    out_dir: PathBuf,
    #[command(flatten)]
    style_args: StyleArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum RangeArg {
    Short,
    Long,
    Same,
    All,
}

impl RangeArg {
    fn ranges(self) -> Vec<Range> {
        match self {
            Self::Short => vec![Range::Short],
            Self::Long => vec![Range::Long],
            Self::Same => vec![Range::Same],
            Self::All => vec![Range::Short, Range::Long, Range::Same],
        }
    }
}

#[derive(Args, Debug)]
struct EvalConsistency {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    style: PathBuf,
    #[arg(long, value_enum, default_value_t = RangeArg::All)]
    range: RangeArg,
    /// Per-pair CSV; the summary goes to the same path with `.json`.
    #[arg(long)]
    out: PathBuf,
    /// Also evaluate the per-frame 2D baseline.
    #[arg(long)]
    baseline: bool,
    /// Write the oracle flow of every pair here.
    #[arg(long)]
    flows_dir: Option<PathBuf>,
    #[command(flatten)]
    style_args: StyleArgs,
}

#[derive(Args, Debug)]
struct Gradcheck {
    /// A component name or `all`.
    #[arg(long, default_value = "all")]
    component: String,
    #[arg(long, default_value_t = 20)]
    trials: usize,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Runtime(String),
}

impl<E: std::fmt::Display> From<E> for CliError
where
    E: std::error::Error,
{
    fn from(e: E) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

/// Runs the CLI on `argv` (program name first) and returns the exit code:
/// 0 on success, 1 on usage errors, 2 on runtime failures.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            1
        }
        Err(CliError::Runtime(m)) => {
            eprintln!("error: {m}");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::GenScene(a) => gen_scene(a, seed.unwrap_or(0)),
        Command::TrainEmbed(a) => train_embed(a, seed),
        Command::TrainStyle(a) => train_style(a, seed),
        Command::Render(a) => render(a),
        Command::Stylize(a) => stylize(a),
        Command::Interpolate(a) => interpolate(a),
        Command::EvalConsistency(a) => eval_consistency(a),
        Command::Gradcheck(a) => run_gradcheck(a, seed.unwrap_or(0)),
    }
}

fn gen_scene(a: GenScene, seed: u64) -> Result<(), CliError> {
    let mut spec = match &a.spec {
        Some(p) => io::config::load_scene_spec(p)?,
        None => SceneSpec::default(),
    };
    let set = |field: &mut usize, v: Option<usize>| {
        if let Some(v) = v {
            *field = v;
        }
    };
    set(&mut spec.width, a.width);
    set(&mut spec.height, a.height);
    set(&mut spec.gaussians, a.gaussians);
    set(&mut spec.cameras, a.cameras);
    set(&mut spec.timesteps, a.timesteps);
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let bundle = generate_scene(&spec, seed)?;
    io::scene_file::save_scene(&a.out, &bundle)?;
    log::info!("scene {:016x} written to {}", bundle.meta.id, a.out.display());
    Ok(())
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

/// `dir/name.ext` → `dir/name.step000500.ext`.
fn step_path(out: &Path, step: usize) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match out.extension() {
        Some(ext) => format!("{stem}.step{step:06}.{}", ext.to_string_lossy()),
        None => format!("{stem}.step{step:06}"),
    };
    out.with_file_name(name)
}

fn checkpoint_hook(out: &Path, every: usize) -> impl FnMut(usize, &Model) -> Result<(), TrainError> + '_ {
    move |step, model| {
        if every > 0 && step % every == 0 {
            save_model(&step_path(out, step), model).map_err(|e| TrainError::Hook(e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct Stage1Metrics {
    step: usize,
    phase: &'static str,
    camera: usize,
    timestep: usize,
    loss: f64,
    loss_color: f64,
    loss_feat: f64,
    psnr_color: Option<f64>,
    psnr_feat: Option<f64>,
}

fn train_embed(a: TrainEmbed, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref(), seed)?;
    let bundle = io::scene_file::load_scene(&a.scene)?;
    let mut model = Model::from_scene(&bundle, cfg.model.clone(), cfg.seed);
    let mut hook = checkpoint_hook(&a.out, cfg.output.checkpoint_every);
    let rep = train_stage1_with(&mut model, &bundle.ground_truth, &cfg.stage1, cfg.seed.wrapping_add(1), &mut hook)?;
    save_model(&a.out, &model)?;
    if let Some(csv) = &cfg.output.metrics_csv {
        let rows: Vec<_> = rep
            .rows
            .iter()
            .map(|r| {
                let v = rep.validations.iter().find(|v| v.step == r.step + 1);
                Stage1Metrics {
                    step: r.step,
                    phase: r.phase,
                    camera: r.camera,
                    timestep: r.timestep,
                    loss: r.loss,
                    loss_color: r.loss_color,
                    loss_feat: r.loss_feat,
                    psnr_color: v.map(|v| v.psnr_color),
                    psnr_feat: v.map(|v| v.psnr_feat),
                }
            })
            .collect();
        report::write_csv(Path::new(csv), &rows)?;
    }
    if let Some(v) = rep.final_validation() {
        println!("holdout PSNR: color {:.2} dB, feature {:.2} dB", v.psnr_color, v.psnr_feat);
    }
    Ok(())
}

fn read_styles(dir: &Path) -> Result<Vec<Tensor>, CliError> {
    let entries = std::fs::read_dir(dir).map_err(|e| runtime(format!("{}: {e}", dir.display())))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")))
        .collect();
    paths.sort();
    if paths.len() < 2 {
        return Err(runtime(format!("{} holds {} .ppm style images; need at least 2", dir.display(), paths.len())));
    }
    paths.iter().map(|p| ppm::read(p).map_err(|e| runtime(format!("{}: {e}", p.display())))).collect()
}

fn train_style(a: TrainStyle, seed: Option<u64>) -> Result<(), CliError> {
    let cfg = load_config(a.config.as_deref(), seed)?;
    let mut model = load_model(&a.ckpt)?;
    let gt = match &a.scene {
        Some(p) => {
            let b = io::scene_file::load_scene(p)?;
            if b.meta.id != model.meta.id {
                return Err(runtime(format!("{} is not the scene of {}", p.display(), a.ckpt.display())));
            }
            b.ground_truth
        }
        None => render_ground_truth(&model.meta, a.supersample),
    };
    let styles = read_styles(&a.styles_dir)?;
    let mut hook = checkpoint_hook(&a.out, cfg.output.checkpoint_every);
    let rep = train_stage2_with(&mut model, &gt, &styles, &cfg.stage2, cfg.seed.wrapping_add(2), &mut hook)?;
    save_model(&a.out, &model)?;
    if let Some(csv) = &cfg.output.metrics_csv {
        report::write_csv(Path::new(csv), &rep.rows)?;
    }
    Ok(())
}

fn check_view(model: &Model, camera: usize, t: f64) -> Result<(), CliError> {
    if camera >= model.meta.cameras.len() {
        return Err(usage(format!("camera {camera} out of range (scene has {})", model.meta.cameras.len())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(usage(format!("t = {t} outside [0, 1]")));
    }
    Ok(())
}

fn render(a: Render) -> Result<(), CliError> {
    let model = load_model(&a.ckpt)?;
    check_view(&model, a.camera, a.t)?;
    let out = model.renderer(g4ds::render::RasterMode::Tiled).render(&model.store, &model.meta.cameras[a.camera], a.t);
    let img = match a.branch {
        Branch::Color => out.color.clone(),
        Branch::Feature => model.decode_features(&out.feature),
    };
    ppm::write(&a.out, &clamp01(&img))?;
    if let Some(p) = &a.features {
        io::checkpoint::save(p, &[io::Entry::f64("feature", out.feature)])?;
    }
    Ok(())
}

fn style_transform(model: &Model, path: &Path, s: &StyleArgs) -> Result<StyleTransform, CliError> {
    if s.style_size < g4ds::nets::extractors::MIN_STYLE_SIZE {
        return Err(usage(format!("--style-size {} below {}", s.style_size, g4ds::nets::extractors::MIN_STYLE_SIZE)));
    }
    let img = ppm::read(path).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    let img = fit_style(&img, s.style_size);
    let t = match &s.style_cache {
        Some(dir) => io::style_cache::StyleCache::new(dir).transform(model, &img)?,
        None => model.style_transform(&EncodedStyle::new(model, &img))?,
    };
    if !t.is_finite() {
        return Err(runtime("style transform is not finite"));
    }
    Ok(t)
}

fn stylize(a: Stylize) -> Result<(), CliError> {
    let model = load_model(&a.ckpt)?;
    check_view(&model, a.camera, a.t)?;
    let tr = style_transform(&model, &a.style, &a.style_args)?;
    let out = model.stylize_view(a.camera, a.t, &tr, !a.style_args.no_propagation);
    ppm::write(&a.out, &clamp01(out.output()))?;
    Ok(())
}

fn interpolate(a: Interpolate) -> Result<(), CliError> {
    if a.styles.len() != a.weights.len() {
        return Err(usage(format!("{} styles but {} weights", a.styles.len(), a.weights.len())));
    }
    let model = load_model(&a.ckpt)?;
    check_view(&model, a.camera, a.t)?;
    let mut parts = Vec::new();
    for (p, &w) in a.styles.iter().zip(&a.weights) {
        parts.push((style_transform(&model, p, &a.style_args)?, w));
    }
    let blended = interpolate_styles(&parts).map_err(|e| usage(e.to_string()))?;
    let views: Vec<(usize, f64)> = match a.sweep {
        Sweep::Cameras => (0..model.meta.cameras.len()).map(|c| (c, a.t)).collect(),
        Sweep::Time => model.meta.timestamps.iter().map(|&t| (a.camera, t)).collect(),
    };
    for (i, (c, t)) in views.into_iter().enumerate() {
        let out = model.stylize_view(c, t, &blended, !a.style_args.no_propagation);
        ppm::write(&a.out_dir.join(format!("frame_{i:03}.ppm")), &clamp01(out.output()))?;
    }
    Ok(())
}

#[derive(Serialize)]
struct SummaryRow {
    method: String,
    range: Range,
    pairs: usize,
    mean_rmse: f64,
    mean_feat_dist: f64,
}

fn eval_consistency(a: EvalConsistency) -> Result<(), CliError> {
    let model = load_model(&a.ckpt)?;
    let tr = style_transform(&model, &a.style, &a.style_args)?;
    let encoder = FrozenEncoder::new();
    let mut methods = vec![("ours".to_string(), stylized_frames(&model, &tr, !a.style_args.no_propagation))];
    if a.baseline {
        let img = fit_style(&ppm::read(&a.style)?, a.style_args.style_size);
        methods.push(("baseline".to_string(), baseline_frames(&model, &EncodedStyle::new(&model, &img))?));
    }
    let mut rows: Vec<ConsistencyReport> = Vec::new();
    let mut summary = Vec::new();
    for range in a.range.ranges() {
        for (name, frames) in &methods {
            let r = eval_protocol(&model, &encoder, name, frames, range)?;
            let (mean_rmse, mean_feat_dist) = summarize(&r);
            println!("{name:>8} {:>5}: RMSE {mean_rmse:.5}, feature distance {mean_feat_dist:.5}", range.as_str());
            summary.push(SummaryRow { method: name.clone(), range, pairs: r.len(), mean_rmse, mean_feat_dist });
            rows.extend(r);
        }
    }
    report::write_csv(&a.out, &rows)?;
    report::write_json(&a.out.with_extension("json"), &summary)?;
    if let Some(dir) = &a.flows_dir {
        write_flows(&model, dir, &a.range.ranges())?;
    }
    Ok(())
}

fn write_flows(model: &Model, dir: &Path, ranges: &[Range]) -> Result<(), CliError> {
    let meta = &model.meta;
    let nt = meta.timestamps.len();
    for &range in ranges {
        for ((ca, ka), (cb, kb)) in g4ds::pipeline::protocol_pairs(range, meta.cameras.len(), nt) {
            let flow: FlowField =
                flow_oracle(meta, meta.view(cb, meta.timestamps[kb]), meta.view(ca, meta.timestamps[ka]))?;
            let name = format!("flow_c{cb:02}t{kb:02}_to_c{ca:02}t{ka:02}.g4df");
            io::flowfile::write(&dir.join(name), &flow)?;
        }
    }
    Ok(())
}

fn run_gradcheck(a: Gradcheck, seed: u64) -> Result<(), CliError> {
    if a.trials == 0 {
        return Err(usage("--trials must be positive"));
    }
    let reports = gradcheck::run(&a.component, a.trials, seed).ok_or_else(|| {
        usage(format!(
            "unknown component `{}`; expected `all` or one of {}",
            a.component,
            gradcheck::COMPONENTS.join(", ")
        ))
    })?;
    let mut failed = 0;
    for r in &reports {
        println!(
            "[{}] {:<16} max rel error {:.2e} over {} entries ({} skipped), {} trials",
            if r.passed { "PASS" } else { "FAIL" },
            r.component,
            r.max_rel_error,
            r.entries,
            r.skipped,
            r.trials
        );
        failed += usize::from(!r.passed);
    }
    if failed > 0 {
        return Err(runtime(format!("{failed} component(s) failed the gradient check")));
    }
    Ok(())
}
