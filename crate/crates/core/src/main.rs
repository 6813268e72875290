use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use tactile_servo::correspondence::{correspond, select_matches, CorrespondOpts, Match};
use tactile_servo::descriptor::file::{load_descriptor_file, save_descriptor_file};
use tactile_servo::descriptor::{extract, DescriptorMap, DescriptorParams};
use tactile_servo::displacement::{estimate_displacement, Displacement, EstimationMode};
use tactile_servo::gel_sim::{render, ActuationNoise, ContactScene, PlantState};
use tactile_servo::goal::GoalSpec;
use tactile_servo::harness::{
    run_perturbation_experiment, run_task_scenario, summarize, write_report, write_trials_csv,
    ExperimentConfig, Report, Scenario, ScenarioConfig, SceneRef,
};
use tactile_servo::imageio::{read_image, write_image};
use tactile_servo::sensor::{
    resize_to_working, KeypointSet, ResizeOptions, SensorCalibration, TactileImage,
};
use tactile_servo::servo::{run_servo, ServoConfig, SimPlant};

#[derive(Parser)]
#[command(
    name = "tactile",
    version,
    about = "Tactile keypoint correspondence and grasp servoing"
)]
struct Cli {
    /// JSON config for the subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; results go to stdout when omitted.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Subcommand)]
enum Command {
    /// Render a scene to an image.
    Render {
        /// Preset name (gear, block, wide_block) or scene JSON path.
        #[arg(long)]
        scene: String,
        /// Object offset as dx_mm,dz_mm,dtheta_rad.
        #[arg(long, value_parser = parse_offset, allow_hyphen_values = true)]
        offset: Option<Displacement>,
        #[arg(long)]
        noise: Option<f64>,
        /// Output image path (.png, .ppm, .pgm).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compute a descriptor map and write it as a TDSC file.
    Extract {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Match goal keypoints into a current image or descriptor file.
    Match {
        #[arg(long)]
        goal: PathBuf,
        #[arg(long)]
        current: PathBuf,
        /// JSON list of [u, v] pixel keypoints.
        #[arg(long)]
        keypoints: PathBuf,
    },
    /// Fit the planar displacement from a match list.
    Estimate {
        #[arg(long)]
        matches: PathBuf,
    },
    /// Run the servo loop on a simulated plant.
    Servo {
        /// Goal spec JSON.
        #[arg(long)]
        goal: PathBuf,
        #[arg(long)]
        scene: String,
        #[arg(long, value_parser = parse_offset, allow_hyphen_values = true)]
        offset: Displacement,
        /// Write each captured image into --out.
        #[arg(long)]
        dump_images: bool,
    },
    /// Single-shot perturbation experiment.
    Experiment,
    /// Servo task scenario (gear_insertion or block_alignment).
    Scenario { name: String },
    /// Pool report files or directories of reports.
    Summarize {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
}

/// Shared options of the single-step subcommands.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct PipelineConfig {
    calibration: Option<SensorCalibration>,
    resize: ResizeOptions,
    descriptor: DescriptorParams,
    correspondence: CorrespondOpts,
    mode: EstimationMode,
}

impl PipelineConfig {
    fn calibration(&self) -> SensorCalibration {
        self.calibration.unwrap_or_else(SensorCalibration::working)
    }
}

#[derive(Serialize)]
struct EstimateOutput {
    dx_mm: f64,
    dz_mm: f64,
    dtheta_rad: f64,
    degenerate: bool,
}

/// Exit-code classes.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Usage<T> {
    fn usage(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Usage<T> for Result<T, E> {
    fn usage(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Usage(e.into()))
    }
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure::Runtime(e.into())
    }
}

fn parse_offset(s: &str) -> Result<Displacement, String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    let d = match parts[..] {
        [x, z] => Displacement::new(x, z, 0.0),
        [x, z, t] => Displacement::new(x, z, t),
        _ => return Err("expected dx,dz[,dtheta]".into()),
    };
    if d.is_finite() {
        Ok(d)
    } else {
        Err("offset must be finite".into())
    }
}

fn load_json<T: DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn config_or_default<T: DeserializeOwned + Default>(path: &Option<PathBuf>) -> Result<T, Failure> {
    match path {
        Some(p) => load_json(p).usage(),
        None => Ok(T::default()),
    }
}

fn scene_ref(arg: &str) -> SceneRef {
    if arg.ends_with(".json") || Path::new(arg).exists() {
        SceneRef::Path(PathBuf::from(arg))
    } else {
        SceneRef::Preset(arg.to_string())
    }
}

fn load_scene(arg: &str, cal: &SensorCalibration) -> Result<ContactScene, Failure> {
    Ok(scene_ref(arg).resolve(cal).usage()?.0)
}

fn emit_json<T: Serialize>(value: &T, out: &Option<PathBuf>, name: &str) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(name), text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn load_working_image(path: &Path, cfg: &PipelineConfig) -> Result<TactileImage, Failure> {
    let cal = cfg.calibration();
    let img = read_image(path, cal)
        .with_context(|| format!("reading {}", path.display()))
        .usage()?;
    if img.width() == cal.working_width_px && img.height() == cal.working_height_px {
        return Ok(img);
    }
    Ok(resize_to_working(
        &img,
        cal.working_width_px,
        cal.working_height_px,
        &cfg.resize,
    )?)
}

fn load_map(path: &Path, cfg: &PipelineConfig) -> Result<DescriptorMap, Failure> {
    let is_tdsc = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("tdsc"));
    if is_tdsc {
        return load_descriptor_file(path)
            .with_context(|| format!("loading {}", path.display()))
            .usage();
    }
    let img = load_working_image(path, cfg)?;
    Ok(extract(&img, &cfg.descriptor)?)
}

fn run(cli: Cli) -> Result<(), Failure> {
    let seed = cli.seed.unwrap_or(0);
    match cli.command {
        Command::Render {
            scene,
            offset,
            noise,
            output,
        } => {
            let cfg: PipelineConfig = config_or_default(&cli.config)?;
            let cal = cfg.calibration();
            let mut scene = load_scene(&scene, &cal)?;
            if let Some(n) = noise {
                scene.noise_sigma = n;
            }
            let img = render(
                &scene,
                &offset.unwrap_or(Displacement::IDENTITY),
                &cal,
                seed,
            )?;
            let path = match (output, &cli.out) {
                (Some(p), _) => p,
                (None, Some(dir)) => {
                    std::fs::create_dir_all(dir)?;
                    dir.join("render.png")
                }
                (None, None) => {
                    return Err(Failure::Usage(anyhow!("render needs --output or --out")))
                }
            };
            write_image(&img, &path)?;
        }
        Command::Extract { image, output } => {
            let cfg: PipelineConfig = config_or_default(&cli.config)?;
            cfg.descriptor.validate().usage()?;
            let img = load_working_image(&image, &cfg)?;
            let map = extract(&img, &cfg.descriptor)?;
            let path = match (output, &cli.out) {
                (Some(p), _) => p,
                (None, Some(dir)) => {
                    std::fs::create_dir_all(dir)?;
                    let stem = image.file_stem().unwrap_or_default().to_string_lossy();
                    dir.join(format!("{stem}.tdsc"))
                }
                (None, None) => {
                    return Err(Failure::Usage(anyhow!("extract needs --output or --out")))
                }
            };
            save_descriptor_file(&map, &path)?;
        }
        Command::Match {
            goal,
            current,
            keypoints,
        } => {
            let cfg: PipelineConfig = config_or_default(&cli.config)?;
            let points: Vec<(f64, f64)> = load_json(&keypoints).usage()?;
            let kps = KeypointSet::new(points).usage()?;
            let goal_map = load_map(&goal, &cfg)?;
            let cur_map = load_map(&current, &cfg)?;
            kps.check_bounds(goal_map.source_w, goal_map.source_h)
                .usage()?;
            let matches = correspond(&goal_map, &cur_map, &kps, &cfg.correspondence)?;
            match cli.format {
                Format::Json => emit_json(&matches, &cli.out, "matches.json")?,
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(std::io::stdout());
                    w.write_record([
                        "goal_u",
                        "goal_v",
                        "found_u",
                        "found_v",
                        "similarity",
                        "ratio",
                        "confident",
                    ])?;
                    for m in &matches {
                        w.write_record([
                            m.goal_point.0.to_string(),
                            m.goal_point.1.to_string(),
                            m.found_point.0.to_string(),
                            m.found_point.1.to_string(),
                            m.similarity.to_string(),
                            m.ratio.to_string(),
                            m.confident.to_string(),
                        ])?;
                    }
                    w.flush()?;
                }
            }
        }
        Command::Estimate { matches } => {
            let cfg: PipelineConfig = config_or_default(&cli.config)?;
            let matches: Vec<Match> = load_json(&matches).usage()?;
            let sel = select_matches(
                &matches,
                cfg.correspondence.exclude_low_confidence,
                cfg.mode.min_keypoints(),
            )
            .ok_or_else(|| anyhow!("match list is empty"))
            .usage()?;
            let est = estimate_displacement(&sel.goal, &sel.current, &cfg.calibration(), cfg.mode)
                .usage()?;
            let d = est.displacement;
            emit_json(
                &EstimateOutput {
                    dx_mm: d.dx_mm,
                    dz_mm: d.dz_mm,
                    dtheta_rad: d.dtheta_rad,
                    degenerate: est.degenerate,
                },
                &cli.out,
                "displacement.json",
            )?;
        }
        Command::Servo {
            goal,
            scene,
            offset,
            dump_images,
        } => {
            let mut cfg: ServoConfig = config_or_default(&cli.config)?;
            cfg.validate().usage()?;
            cfg.keep_images |= dump_images;
            let goal = GoalSpec::load(&goal).usage()?;
            let cal = *goal.calibration();
            let scene = load_scene(&scene, &cal)?;
            let state = PlantState::new(scene, offset, ActuationNoise::default(), seed).usage()?;
            let mut plant = SimPlant::new(state, cal);
            let result = run_servo(&goal, &mut plant, &cfg)?;
            if dump_images {
                let dir = cli
                    .out
                    .as_ref()
                    .ok_or_else(|| anyhow!("--dump-images needs --out"))
                    .usage()?;
                std::fs::create_dir_all(dir)?;
                for (i, img) in result.images.iter().enumerate() {
                    write_image(img, &dir.join(format!("iter_{}.png", i + 1)))?;
                }
            }
            emit_json(&result, &cli.out, "servo_result.json")?;
        }
        Command::Experiment => {
            let mut cfg: ExperimentConfig = config_or_default(&cli.config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            cfg.validate().usage()?;
            let rep = run_perturbation_experiment(&cfg).map_err(|e| {
                if e.is_config_error() {
                    Failure::Usage(e.into())
                } else {
                    Failure::Runtime(e.into())
                }
            })?;
            let report = Report::Perturbation(rep.summary);
            emit_report(&cli.out, cli.format, &rep.trials, &report)?;
        }
        Command::Scenario { name } => {
            let scenario = Scenario::parse(&name).usage()?;
            let mut cfg: ScenarioConfig = config_or_default(&cli.config)?;
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            cfg.validate().usage()?;
            let rep = run_task_scenario(scenario, &cfg)?;
            let report = Report::Scenario(rep.summary);
            emit_report(&cli.out, cli.format, &rep.trials, &report)?;
        }
        Command::Summarize { inputs } => {
            let pooled = summarize(&inputs).usage()?;
            if let Some(dir) = &cli.out {
                emit_json(&pooled, &Some(dir.clone()), "pooled.json")?;
            }
            match cli.format {
                Format::Json if cli.out.is_none() => emit_json(&pooled, &None, "")?,
                Format::Csv => {
                    let mut w = csv::Writer::from_writer(std::io::stdout());
                    w.write_record([
                        "reports",
                        "trials",
                        "ok",
                        "mean_mm",
                        "std_mm",
                        "min_mm",
                        "max_mm",
                        "success_rate",
                    ])?;
                    let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                    w.write_record([
                        pooled.reports.to_string(),
                        pooled.trial_count.to_string(),
                        pooled.n_ok.to_string(),
                        o(pooled.d_error),
                        o(pooled.std_dev),
                        o(pooled.min_mm),
                        o(pooled.max_mm),
                        o(pooled.success_rate),
                    ])?;
                    w.flush()?;
                }
                _ => println!("{pooled}"),
            }
        }
    }
    Ok(())
}

fn emit_report(
    out: &Option<PathBuf>,
    format: Format,
    trials: &[tactile_servo::harness::TrialResult],
    report: &Report,
) -> Result<(), Failure> {
    match (out, format) {
        (Some(dir), _) => write_report(dir, trials, report)?,
        (None, Format::Csv) => write_trials_csv(trials, std::io::stdout())?,
        (None, Format::Json) => emit_json(report, &None, "")?,
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
