use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use crowding::checks::{self, Check};
use crowding::datasets::layout::{prepare, DataLayout, PrepareSources};
use crowding::datasets::sha256_file;
use crowding::experiments::{SweepKind, DEFAULT_SAMPLES};
use crowding::lab::{desk_config, figure_grids, intensity_figure, stimulus_examples, EvalConfig, Lab, PanelSpec};
use crowding::models::{parse_schedule, Family, ModelConfig, SpatialPooling};
use crowding::pyramid::{extract_stack, Interpolation};
use crowding::stimulus::{export, generate, sweep, Condition, Sources, StimulusSpec, SweepMode, ECC_GRID, SPACING_GRID};
use crowding::trainer::{Regime, TrainConfig};
use crowding::Error;

#[derive(Parser)]
#[command(name = "crowd", version, about = "Crowding experiments for DCNNs and the eccentricity model")]
struct Cli {
    /// TOML config file for the subcommand; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for generation, training and evaluation.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Where trained runs are cached.
    #[arg(long, global = true, default_value = "runs")]
    runs_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

/// Model and training overrides shared by `train` and `eval`.
#[derive(Args, Clone, Default)]
struct ModelFlags {
    /// `dcnn-no_total`, `dcnn-progressive`, `dcnn-at_end` or `ecc`.
    #[arg(long)]
    model: Option<String>,
    /// Scale-pooling schedule such as 11-7-5-3-1.
    #[arg(long)]
    schedule: Option<String>,
    #[arg(long)]
    contrast_norm: Option<bool>,
    #[arg(long)]
    interpolation: Option<Interpolation>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// `isolated` or `with_flankers_xax120`.
    #[arg(long)]
    regime: Option<Regime>,
    #[arg(long)]
    max_train_items: Option<usize>,
    /// Start from the reduced desk-scale budget instead of the full one.
    #[arg(long)]
    desk: bool,
}

#[derive(Args, Clone)]
struct SweepFlags {
    /// `constant_spacing` or `constant_target_ecc`.
    #[arg(long)]
    sweep: Option<SweepMode>,
    /// Spacing of a constant-spacing sweep.
    #[arg(long)]
    spacing: Option<i64>,
    /// Target eccentricity of a constant-target-eccentricity sweep.
    #[arg(long)]
    ecc: Option<i64>,
    /// Flanker set: mnist, notmnist or omniglot.
    #[arg(long)]
    flankers: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Populate and validate the data root.
    Data {
        #[arg(long)]
        mnist: Option<PathBuf>,
        #[arg(long, num_args = 1..)]
        fonts: Vec<PathBuf>,
        #[arg(long, default_value_t = 0)]
        strokes: usize,
        #[arg(long, num_args = 1..)]
        backgrounds: Vec<PathBuf>,
    },
    /// Render stimuli (PNG + JSON provenance) for a spec file or a sweep.
    Stim {
        #[command(flatten)]
        sweep: SweepFlags,
        #[arg(long)]
        interpolation: Option<Interpolation>,
        /// Embed into a natural scene.
        #[arg(long)]
        background: bool,
        /// Also write the 11-scale crop strip of every stimulus.
        #[arg(long)]
        scales: bool,
    },
    /// Train one model into the run cache.
    Train {
        #[command(flatten)]
        model: ModelFlags,
    },
    /// Evaluate a grid config, or a single panel described by flags.
    Eval {
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        sweep: SweepFlags,
        /// Stimuli per curve point and condition.
        #[arg(long)]
        n: Option<usize>,
        /// Fail instead of training models that are not cached.
        #[arg(long)]
        no_train: bool,
    },
    /// Regenerate every figure grid plus stimulus examples and histograms.
    Figures {
        #[arg(long, default_value_t = DEFAULT_SAMPLES)]
        n: usize,
        /// Only these figures.
        #[arg(long, num_args = 1..)]
        only: Vec<String>,
        #[arg(long)]
        no_train: bool,
    },
    /// Finite-difference gradient checks.
    Gradcheck,
    /// Shape-schedule, parameter-parity and crop-geometry checks.
    Selftest,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Data { .. } => "data",
            Command::Stim { .. } => "stim",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Figures { .. } => "figures",
            Command::Gradcheck => "gradcheck",
            Command::Selftest => "selftest",
        }
    }
}

/// Why a run failed: bad configuration (exit 2) or failed validation (exit 1).
enum Failure {
    Config(String),
    Validation(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Io { .. } => Failure::Config(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

/// Everything needed to reproduce a run.
#[derive(Serialize, Default)]
struct RunManifest {
    subcommand: String,
    config: Value,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
    wall_seconds: f64,
    passed: bool,
}

struct Ctx {
    config: Option<PathBuf>,
    seed: Option<u64>,
    out_dir: PathBuf,
    runs_dir: PathBuf,
    layout: DataLayout,
    manifest: RunManifest,
}

impl Ctx {
    fn read_config(&mut self) -> Outcome<Option<String>> {
        let Some(path) = self.config.clone() else {
            return Ok(None);
        };
        let text = fs::read_to_string(&path)
            .map_err(|e| Failure::Config(format!("--config {}: {e}", path.display())))?;
        self.input(&path)?;
        Ok(Some(text))
    }

    fn input(&mut self, path: &Path) -> Outcome<()> {
        let h = sha256_file(path)?;
        self.manifest.inputs.insert(path.display().to_string(), h);
        Ok(())
    }

    fn lab(&mut self, train_missing: bool) -> Outcome<Lab> {
        let mut lab = Lab::open(self.layout.clone(), &self.runs_dir)?;
        lab.train_missing = train_missing;
        self.manifest
            .inputs
            .insert(self.layout.manifest_path().display().to_string(), lab.data_digest().to_string());
        Ok(lab)
    }

    fn seed(&mut self, name: &str, file_value: u64) -> u64 {
        let s = self.seed.unwrap_or(file_value);
        self.manifest.seeds.insert(name.to_string(), s);
        s
    }

    fn out_dir(&self) -> Outcome<&Path> {
        fs::create_dir_all(&self.out_dir)
            .map_err(|e| Failure::Config(format!("--out-dir {}: {e}", self.out_dir.display())))?;
        Ok(&self.out_dir)
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

/// Parses `dcnn-<pooling>`, `dcnn` or `ecc`.
fn parse_model(s: &str) -> Outcome<ModelConfig> {
    let (family, rest) = s.split_once(['-', '/']).unwrap_or((s, ""));
    match family.parse::<Family>()? {
        Family::Dcnn => {
            let p = if rest.is_empty() {
                SpatialPooling::AtEnd
            } else {
                rest.parse()?
            };
            Ok(ModelConfig::dcnn(p))
        }
        Family::Eccentricity => {
            let schedule = if rest.is_empty() {
                vec![11, 11, 11, 11, 1]
            } else {
                parse_schedule(rest)?
            };
            Ok(ModelConfig::eccentricity(&schedule, false))
        }
    }
}

fn apply_model_flags(mut cfg: TrainConfig, f: &ModelFlags) -> Outcome<TrainConfig> {
    if let Some(m) = &f.model {
        let seed = cfg.model.seed;
        cfg.model = parse_model(m)?;
        cfg.model.seed = seed;
    }
    if let Some(s) = &f.schedule {
        cfg.model.scale_schedule = parse_schedule(s)?;
    }
    if let Some(c) = f.contrast_norm {
        cfg.model.contrast_norm = c;
    }
    if let Some(i) = f.interpolation {
        cfg.model.interpolation = i;
    }
    if let Some(r) = f.regime {
        cfg.regime = r;
    }
    if f.desk {
        let seed = cfg.seed;
        cfg = desk_config(cfg.model, cfg.regime);
        cfg.seed = seed;
    }
    if let Some(lr) = f.lr {
        cfg.lr = Some(lr);
    }
    if let Some(e) = f.epochs {
        cfg.epochs = e;
    }
    if let Some(m) = f.max_train_items {
        cfg.max_train_items = Some(m);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn report(checks: &[Check]) -> bool {
    for c in checks {
        println!("{} {:<40} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    checks.iter().all(|c| c.passed)
}

fn sweep_kind(f: &SweepFlags) -> SweepKind {
    match f.sweep.unwrap_or(SweepMode::ConstantSpacing) {
        SweepMode::ConstantSpacing => SweepKind::ConstantSpacing(f.spacing.unwrap_or(120)),
        SweepMode::ConstantTargetEcc => SweepKind::ConstantTargetEcc(f.ecc.unwrap_or(0)),
    }
}

fn run(cli: Cli, ctx: &mut Ctx) -> Outcome<bool> {
    match cli.command {
        Command::Data {
            mnist,
            fonts,
            strokes,
            backgrounds,
        } => {
            let seed = ctx.seed("data", 0);
            let sources = PrepareSources {
                mnist,
                fonts,
                strokes,
                backgrounds,
                seed,
            };
            ctx.manifest.config = json!({
                "root": ctx.layout.root,
                "mnist": sources.mnist,
                "fonts": sources.fonts,
                "strokes": sources.strokes,
                "backgrounds": sources.backgrounds,
            });
            let r = prepare(&ctx.layout, &sources)?;
            println!("{}", serde_json::to_string_pretty(&r).expect("report serializes"));
            ctx.manifest.outputs.push(ctx.layout.manifest_path());
            Ok(true)
        }
        Command::Stim {
            sweep: flags,
            interpolation,
            background,
            scales,
        } => {
            let mut template = match ctx.read_config()? {
                Some(t) => toml::from_str::<StimulusSpec>(&t).map_err(|e| config_err(e.to_string()))?,
                None => StimulusSpec::new(0, Condition::A, flags.spacing.unwrap_or(120)),
            };
            template.seed = ctx.seed("stimulus", template.seed);
            if let Some(f) = &flags.flankers {
                template.flanker_source = Some(f.clone());
            }
            if background {
                template.background = Some("backgrounds".into());
            }
            let specs = match flags.sweep {
                None => vec![template.clone()],
                Some(mode) => {
                    let values: &[i64] = match mode {
                        SweepMode::ConstantSpacing => {
                            template.spacing = flags.spacing.unwrap_or(template.spacing);
                            &ECC_GRID
                        }
                        SweepMode::ConstantTargetEcc => {
                            template.target_ecc = flags.ecc.unwrap_or(template.target_ecc);
                            &SPACING_GRID
                        }
                    };
                    let s = sweep(&template, mode, values)?;
                    for (spec, why) in &s.dropped {
                        log::info!("skipping {}: {why}", spec.file_stem());
                    }
                    s.specs
                }
            };
            ctx.manifest.config = json!({"template": template, "sweep": flags.sweep, "specs": specs.len()});
            let lab = ctx.lab(false)?;
            let targets = lab.even_test()?;
            let flankers = match template.flanker_source.as_deref() {
                Some(name) => Some(lab.test_flankers(name)?),
                None if specs.iter().any(|s| s.condition != Condition::A) => Some(lab.test_flankers("mnist")?),
                None => None,
            };
            let backgrounds = if background { Some(lab.backgrounds()?) } else { None };
            let out = ctx.out_dir()?.join("stim");
            let mut outputs = Vec::new();
            for spec in &specs {
                let canvas = generate(
                    spec,
                    Sources {
                        targets: &targets,
                        flankers: flankers.as_deref(),
                        backgrounds: backgrounds.as_deref(),
                    },
                )?;
                let png = export(&canvas, &out)?;
                if scales {
                    let strip = png.with_extension("scales.png");
                    extract_stack(&canvas, interpolation.unwrap_or_default())?.save_strip(&strip)?;
                    outputs.push(strip);
                }
                outputs.push(png.with_extension("json"));
                outputs.push(png);
            }
            println!("wrote {} stimuli to {}", specs.len(), out.display());
            ctx.manifest.outputs = outputs;
            Ok(true)
        }
        Command::Train { model } => {
            let base = match ctx.read_config()? {
                Some(t) => TrainConfig::from_toml(&t)?,
                None => TrainConfig::new(ModelConfig::dcnn(SpatialPooling::AtEnd), Regime::Isolated),
            };
            let mut cfg = apply_model_flags(base, &model)?;
            cfg.seed = ctx.seed("train", cfg.seed);
            ctx.manifest.seeds.insert("model_init".into(), cfg.model.seed);
            ctx.manifest.config = serde_json::to_value(&cfg).expect("config serializes");
            let lab = ctx.lab(true)?;
            let files = lab.run_files(&cfg);
            let files = if files.exist() {
                println!("already trained: {}", files.checkpoint.display());
                files
            } else {
                lab.train(&cfg)?.1
            };
            let log = fs::read_to_string(&files.log).map_err(|e| config_err(e.to_string()))?;
            print!("{log}");
            println!("checkpoint {}", files.checkpoint.display());
            ctx.manifest.outputs = vec![files.checkpoint, files.config, files.log];
            Ok(true)
        }
        Command::Eval {
            model,
            sweep: flags,
            n,
            no_train,
        } => {
            let mut cfg = match ctx.read_config()? {
                Some(t) => EvalConfig::from_toml(&t)?,
                None => {
                    let train = apply_model_flags(
                        TrainConfig::new(ModelConfig::dcnn(SpatialPooling::AtEnd), Regime::Isolated),
                        &ModelFlags {
                            desk: true,
                            model: Some(model.model.clone().unwrap_or_else(|| "dcnn-at_end".into())),
                            ..model.clone()
                        },
                    )?;
                    let kind = sweep_kind(&flags);
                    let flankers = flags.flankers.clone().unwrap_or_else(|| "mnist".into());
                    EvalConfig {
                        name: format!("eval-{}-{}-{flankers}", train.model.label(), kind.name()),
                        title: format!("{}, {flankers} flankers", train.model.label()),
                        n: DEFAULT_SAMPLES,
                        seed: 0,
                        cols: 1,
                        panels: vec![PanelSpec {
                            title: kind.name(),
                            train,
                            sweep: kind,
                            flankers: Some(flankers),
                            backgrounds: false,
                            conditions: None,
                        }],
                    }
                }
            };
            if let Some(n) = n {
                cfg.n = n;
            }
            cfg.seed = ctx.seed("eval", cfg.seed);
            cfg.validate()?;
            ctx.manifest.config = serde_json::to_value(&cfg).expect("config serializes");
            let lab = ctx.lab(!no_train)?;
            let out = ctx.out_dir()?.to_path_buf();
            let r = lab.run_eval(&cfg, &out)?;
            record_checkpoints(ctx, &lab, cfg.panels.iter().map(|p| &p.train))?;
            for (title, why) in &r.missing {
                eprintln!("missing panel '{title}': {why}");
            }
            println!("wrote {} and {}", r.csv.display(), r.svg.display());
            ctx.manifest.outputs = vec![r.csv, r.svg, out.join(format!("{}.toml", cfg.name))];
            Ok(r.missing.is_empty())
        }
        Command::Figures { n, only, no_train } => {
            let seed = ctx.seed("figures", 0);
            let grids = figure_grids(n, seed);
            let extra = ["stimulus_examples", "intensity_histogram"];
            for o in &only {
                if !extra.contains(&o.as_str()) && !grids.iter().any(|g| &g.name == o) {
                    return Err(config_err(format!("--only: unknown figure '{o}'")));
                }
            }
            let wanted = |name: &str| only.is_empty() || only.iter().any(|o| o == name);
            ctx.manifest.config = json!({"n": n, "only": only});
            let lab = ctx.lab(!no_train)?;
            let out = ctx.out_dir()?.to_path_buf();
            let mut complete = true;
            if wanted("stimulus_examples") {
                let files = stimulus_examples(&lab, &out.join("stimulus_examples"), seed)?;
                ctx.manifest.outputs.extend(files);
            }
            if wanted("intensity_histogram") {
                let (hist, files) = intensity_figure(&lab, &out, seed)?;
                for h in &hist {
                    println!("{:<10} mean white fraction {:.3} over {} images", h.dataset, h.mean, h.images);
                }
                ctx.manifest.outputs.extend(files);
            }
            for g in grids.iter().filter(|g| wanted(&g.name)) {
                let r = lab.run_eval(g, &out)?;
                for (title, why) in &r.missing {
                    eprintln!("{}: missing panel '{title}': {why}", g.name);
                }
                complete &= r.missing.is_empty();
                println!("wrote {}", r.svg.display());
                record_checkpoints(ctx, &lab, g.panels.iter().map(|p| &p.train))?;
                ctx.manifest
                    .outputs
                    .extend([r.csv, r.svg, out.join(format!("{}.toml", g.name))]);
            }
            Ok(complete)
        }
        Command::Gradcheck => {
            let seed = ctx.seed("gradcheck", 0);
            Ok(report(&checks::gradcheck(seed)?))
        }
        Command::Selftest => Ok(report(&checks::selftest()?)),
    }
}

fn record_checkpoints<'a>(ctx: &mut Ctx, lab: &Lab, cfgs: impl Iterator<Item = &'a TrainConfig>) -> Outcome<()> {
    for cfg in cfgs {
        let files = lab.run_files(cfg);
        if files.checkpoint.exists() {
            ctx.input(&files.checkpoint)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j).build_global() {
            eprintln!("error: --jobs: {e}");
            return ExitCode::from(2);
        }
    }
    let start = Instant::now();
    let mut ctx = Ctx {
        config: cli.config.clone(),
        seed: cli.seed,
        out_dir: cli.out_dir.clone(),
        runs_dir: cli.runs_dir.clone(),
        layout: DataLayout::from_env_or("data"),
        manifest: RunManifest {
            subcommand: cli.command.name().to_string(),
            ..Default::default()
        },
    };
    let result = run(cli, &mut ctx);
    ctx.manifest.wall_seconds = start.elapsed().as_secs_f64();
    let code = match &result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    };
    ctx.manifest.passed = code == 0;
    if !matches!(result, Err(Failure::Config(_))) {
        let path = ctx.out_dir.join(format!("manifest-{}.json", ctx.manifest.subcommand));
        let text = serde_json::to_string_pretty(&ctx.manifest).expect("manifest serializes");
        if let Err(e) = fs::create_dir_all(&ctx.out_dir).and_then(|_| fs::write(&path, text)) {
            eprintln!("error: writing {}: {e}", path.display());
            return ExitCode::from(2);
        }
    }
    ExitCode::from(code)
}
