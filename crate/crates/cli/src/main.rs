use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;

use splat4d_core::gradcheck::{self, MIN_CASES, MODULES};
use splat4d_core::imageio::{encode_png_rgb, write_bytes};
use splat4d_core::render::render;
use splat4d_core::scenegen::{self, SceneSpec};
use splat4d_core::train::{holdout_frames, Trainer, TrainConfig, SEED_ENV};
use splat4d_core::types::{Camera, FrameSample};
use splat4d_core::Error;

#[derive(Parser, Debug)]
#[command(name = "splat4d", version, about = "Differentiable 4D Gaussian splatting on the CPU")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic street dataset from a scene spec.
    Generate {
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a scene and write a checkpoint plus a per-iteration log.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Loss log path; defaults to `<out>.log.csv`.
        #[arg(long)]
        log: Option<PathBuf>,
        /// Print a progress line every this many iterations (0 disables).
        #[arg(long, default_value_t = 100)]
        progress: usize,
    },
    /// Render a checkpoint at time `t` from a camera pose.
    Render {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = parse_time)]
        t: f64,
        /// Camera pose TOML file, or a frame index when `--data` is given.
        #[arg(long)]
        pose: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Holdout)]
        split: Split,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(MODULES))]
        module: Option<String>,
        #[arg(long, default_value_t = MIN_CASES)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Holdout,
    Train,
    All,
}

fn parse_time(s: &str) -> Result<f64, String> {
    let t: f64 = s.parse().map_err(|_| format!("{s} is not a number"))?;
    if (0.0..=1.0).contains(&t) {
        Ok(t)
    } else {
        Err(format!("t out of [0,1]: got {s}"))
    }
}

/// Camera pose file for `render`; rotation maps world to camera, row-major.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PoseFile {
    width: usize,
    height: usize,
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    rotation: [f64; 9],
    translation: [f64; 3],
    #[serde(default = "default_near")]
    near: f64,
    #[serde(default = "default_far")]
    far: f64,
}

fn default_near() -> f64 {
    0.1
}

fn default_far() -> f64 {
    1000.0
}

impl PoseFile {
    fn camera(&self) -> Camera {
        Camera {
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            rotation: Matrix3::from_row_slice(&self.rotation),
            translation: Vector3::from(self.translation),
            width: self.width,
            height: self.height,
            near: self.near,
            far: self.far,
        }
    }
}

enum Failure {
    Validation(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_validation() {
            Failure::Validation(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn env_seed() -> Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| invalid(format!("{SEED_ENV}={s} is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e).into())
}

fn print_resolved(kind: &str, toml_text: &str, seed: u64) {
    println!("# resolved {kind}");
    print!("{toml_text}");
    if !toml_text.ends_with('\n') {
        println!();
    }
    println!("# seed {seed}");
}

fn generate(spec: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let mut spec = match spec {
        Some(p) => SceneSpec::from_toml(&read_text(p)?)?,
        None => SceneSpec::default(),
    };
    if let Some(seed) = env_seed()? {
        spec.seed = seed;
    }
    print_resolved("scene spec", &spec.to_toml(), spec.seed);
    let data = scenegen::generate(&spec)?;
    let manifest = scenegen::save(&data, out)?;
    println!("wrote {} frames to {}", data.frames.len(), manifest.display());
    Ok(())
}

fn train(data: &Path, config: Option<&Path>, out: &Path, log: Option<&Path>, progress: usize) -> Result<(), Failure> {
    let config = match config {
        Some(p) => TrainConfig::from_toml(&read_text(p)?)?,
        None => TrainConfig::default(),
    }
    .with_env_seed()?;
    print_resolved("train config", &config.to_toml(), config.seed);
    let data = scenegen::load(data)?;
    let start = Instant::now();
    let mut trainer = Trainer::new(config, &data)?;
    trainer.run(&data, |t, view| {
        let it = view.row.iter;
        if progress > 0 && (it % progress == 0 || it + 1 == t.config.iterations) {
            println!(
                "iter {it:5} frame {:2} loss {:.5} ({:.1}s)",
                view.row.frame,
                view.row.report.total,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    trainer.save_checkpoint(out)?;
    let log_path = log.map(Path::to_path_buf).unwrap_or_else(|| {
        let mut s = out.as_os_str().to_owned();
        s.push(".log.csv");
        PathBuf::from(s)
    });
    write_bytes(&log_path, trainer.log_csv().as_bytes())?;
    if let Some(e) = trainer.evals.last() {
        print!("holdout psnr {:.3} ssim {:.4}", e.mean_psnr(), e.mean_ssim());
        match e.dynamic_psnr() {
            Some(d) => println!(" dynamic psnr {d:.3}"),
            None => println!(),
        }
    }
    println!("wrote {} and {}", out.display(), log_path.display());
    Ok(())
}

fn render_cmd(ckpt: &Path, t: f64, pose: &str, data: Option<&Path>, out: &Path) -> Result<(), Failure> {
    let trainer = Trainer::load_checkpoint(ckpt)?;
    print_resolved("train config", &trainer.config.to_toml(), trainer.config.seed);
    let camera = match (pose.parse::<usize>(), data) {
        (Ok(index), Some(dir)) => {
            let data = scenegen::load(dir)?;
            data.frames
                .iter()
                .find(|f| f.index == index)
                .map(|f| f.camera.clone())
                .ok_or_else(|| invalid(format!("frame {index} is not in the dataset")))?
        }
        (Ok(_), None) => return Err(invalid("a frame-index pose needs --data")),
        (Err(_), _) => {
            let text = read_text(Path::new(pose))?;
            let p: PoseFile = toml::from_str(&text).map_err(|e| invalid(format!("{pose}: {e}")))?;
            p.camera()
        }
    };
    let problems = camera.validate();
    if !problems.is_empty() {
        return Err(invalid(problems.join("; ")));
    }
    let (buffers, _) = render(&trainer.scene, trainer.net.as_ref(), &camera, t)?;
    let image = splat4d_core::types::Image {
        width: camera.width,
        height: camera.height,
        data: buffers.color,
    };
    write_bytes(out, &encode_png_rgb(&image))?;
    println!("wrote {}x{} render at t={t} to {}", camera.width, camera.height, out.display());
    Ok(())
}

fn eval(ckpt: &Path, data: &Path, split: Split) -> Result<(), Failure> {
    let trainer = Trainer::load_checkpoint(ckpt)?;
    print_resolved("train config", &trainer.config.to_toml(), trainer.config.seed);
    let data = scenegen::load(data)?;
    let holdout = holdout_frames(&data, &trainer.config)?;
    let frames: Vec<&FrameSample> = match split {
        Split::Holdout => holdout,
        Split::Train => data.frames.iter().filter(|f| !holdout.iter().any(|h| h.index == f.index)).collect(),
        Split::All => data.frames.iter().collect(),
    };
    let e = trainer.evaluate(&frames)?;
    println!("frame,psnr,ssim,dynamic_pixels");
    for f in &e.frames {
        println!("{},{:.4},{:.5},{}", f.index, f.psnr, f.ssim, f.dynamic_pixels);
    }
    print!("mean psnr {:.4} ssim {:.5}", e.mean_psnr(), e.mean_ssim());
    match e.dynamic_psnr() {
        Some(d) => println!(" dynamic psnr {d:.4}"),
        None => println!(),
    }
    Ok(())
}

fn gradcheck_cmd(module: Option<&str>, cases: usize, seed: u64) -> Result<(), Failure> {
    let seed = env_seed()?.unwrap_or(seed);
    println!("# gradcheck cases {cases}");
    println!("# seed {seed}");
    let reports = match module {
        Some(m) => vec![gradcheck::run_suite(m, cases, seed)?],
        None => gradcheck::run_all(cases, seed)?,
    };
    for r in &reports {
        println!("{}", r.line());
    }
    if reports.iter().all(|r| r.passed()) {
        Ok(())
    } else {
        Err(Failure::Runtime("gradient check failed".into()))
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(invalid("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Failure::Runtime(e.to_string()))?;
    }
    match cli.command {
        Command::Generate { spec, out } => generate(spec.as_deref(), &out),
        Command::Train {
            data,
            config,
            out,
            log,
            progress,
        } => train(&data, config.as_deref(), &out, log.as_deref(), progress),
        Command::Render {
            ckpt,
            t,
            pose,
            data,
            out,
        } => render_cmd(&ckpt, t, &pose, data.as_deref(), &out),
        Command::Eval { ckpt, data, split } => eval(&ckpt, &data, split),
        Command::Gradcheck { module, cases, seed } => gradcheck_cmd(module.as_deref(), cases, seed),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
