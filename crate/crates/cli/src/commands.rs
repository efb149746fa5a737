use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, ensure, Context, Result};
use clap::Parser;
use panolab::adapter::AdapterConfig;
use panolab::diffusion::NoiseSchedule;
use panolab::enhance::{duplicate_side_by_side, sample_with_enhancements, seam_metric, EnhancementConfig};
use panolab::geom::{erp_to_perspective, SphereCamera};
use panolab::io;
use panolab::synth::{flow_to_condition, render_flow, render_video, SceneSpec};
use panolab::train::{train_phase, window_means, Dataset, Phase, TrainConfig};
use panolab::unet::{DenoiserConfig, PanoModel};
use panolab::{Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::manifest::{self, Manifest};
use crate::{Cli, Command, EvalAction, EvalArgs, GenDataArgs, PhaseArg, SampleArgs, TrainArgs};

const VIDEO_SUFFIX: &str = ".video.p360";
const FLOW_SUFFIX: &str = ".flow.p360";
const DEFAULT_HEIGHT: usize = 32;

/// Runs one parsed command; `args` is the argument vector echoed into the
/// manifest.
pub fn run(cli: Cli, args: &[String]) -> Result<()> {
    match cli.command {
        Command::GenData(a) => gen_data(&a, args),
        Command::Train(a) => train(&a, args),
        Command::Sample(a) => sample(&a, args),
        Command::Eval(a) => eval(&a, args),
        Command::Replay(a) => {
            let recorded = manifest::read_args(&a.manifest)?;
            let cli = Cli::try_parse_from(std::iter::once("panolab".to_string()).chain(recorded.iter().cloned()))
                .map_err(|e| anyhow!("{}: recorded arguments do not parse: {}", a.manifest.display(), first_line(&e.to_string())))?;
            if matches!(cli.command, Command::Replay(_)) {
                bail!("{}: a manifest cannot replay another replay", a.manifest.display());
            }
            run(cli, &recorded)
        }
    }
}

fn first_line(s: &str) -> &str {
    s.lines().next().unwrap_or_default()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn gen_data(a: &GenDataArgs, args: &[String]) -> Result<()> {
    ensure!(a.height > 0 && a.height % 2 == 0, "--height must be a positive even number, got {}", a.height);
    ensure!(a.scenes > 0, "--scenes must be at least 1");
    ensure!(a.frames > 0, "--frames must be at least 1");
    create_dir(&a.out)?;
    let factor = AdapterConfig::default().unshuffle_factor;
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut m = Manifest::new("gen-data", args);
    m.set("seed", a.seed);
    m.set("scenes", a.scenes);
    m.set("frames", a.frames);
    m.set("height", a.height);
    m.set("width", 2 * a.height);
    m.set("flow_factor", factor);
    for i in 0..a.scenes {
        let spec = SceneSpec::random(rng.random(), a.frames, a.height)?;
        let stem = format!("scene_{i:04}");
        io::save_tensor(&a.out.join(format!("{stem}{VIDEO_SUFFIX}")), "video", &render_video(&spec)?)?;
        io::save_tensor(&a.out.join(format!("{stem}{FLOW_SUFFIX}")), "flow", &render_flow(&spec, factor)?)?;
        let spec_path = a.out.join(format!("{stem}.spec.txt"));
        fs::write(&spec_path, spec.to_text()).with_context(|| format!("writing {}", spec_path.display()))?;
        m.set(&format!("scene.{i}"), stem);
    }
    m.write(&a.out.join(manifest::FILE_NAME))?;
    println!("wrote {} scenes to {}", a.scenes, a.out.display());
    Ok(())
}

fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mut stems: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading data directory {}", dir.display()))?
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter_map(|n| n.strip_suffix(VIDEO_SUFFIX).map(str::to_string))
        .collect();
    stems.sort();
    ensure!(!stems.is_empty(), "{}: no *{VIDEO_SUFFIX} files", dir.display());
    let mut data = Dataset::default();
    for stem in stems {
        data.videos.push(io::load_tensor(&dir.join(format!("{stem}{VIDEO_SUFFIX}")), Some("video"))?);
        let flow = io::load_tensor(&dir.join(format!("{stem}{FLOW_SUFFIX}")), Some("flow"))?;
        data.flows.push(flow_to_condition(&flow));
    }
    Ok(data)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_stem().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

fn train(a: &TrainArgs, args: &[String]) -> Result<()> {
    let phase = match a.phase {
        PhaseArg::Backbone => Phase::Backbone,
        PhaseArg::Adapter => Phase::Adapter,
    };
    let mut model = match (&a.ckpt_in, phase) {
        (Some(p), _) => io::load_model(p)?,
        (None, Phase::Backbone) => PanoModel::new(DenoiserConfig::default(), a.seed)?,
        (None, Phase::Adapter) => bail!("the adapter phase needs --ckpt-in with a trained backbone"),
    };
    let cfg = TrainConfig {
        steps: a.steps,
        p_zero: a.p_zero,
        latitude_loss: a.latitude_loss.on(),
        rotation_augment: a.rotate_augment.on(),
        seed: a.seed,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    let data = load_dataset(&a.data)?;
    let sched = NoiseSchedule::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let losses = train_phase(&mut model, &data, &sched, &cfg, phase, &mut rng, |_, _| {})?;

    if let Some(dir) = a.ckpt_out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    io::save_model(&a.ckpt_out, &model)?;
    let log_path = with_suffix(&a.ckpt_out, ".loss.txt");
    let log: String = losses.iter().enumerate().map(|(i, l)| format!("{i} {l}\n")).collect();
    fs::write(&log_path, log).with_context(|| format!("writing {}", log_path.display()))?;

    let mut m = Manifest::new("train", args);
    m.set("phase", format!("{:?}", a.phase).to_lowercase());
    m.set("steps", cfg.steps);
    m.set("batch", cfg.batch);
    m.set("lr", cfg.lr);
    m.set("p_zero", cfg.p_zero);
    m.set("latitude_loss", cfg.latitude_loss);
    m.set("rotate_augment", cfg.rotation_augment);
    m.set("seed", cfg.seed);
    m.set("ckpt_in", a.ckpt_in.as_ref().map_or("none".into(), |p| p.display().to_string()));
    m.set("ckpt_out", a.ckpt_out.display());
    m.set("loss_log", log_path.display());
    m.set("checksum.unet", format!("{:016x}", model.params.checksum("unet")));
    m.set("checksum.adapter", format!("{:016x}", model.params.checksum("adapter")));
    if let Some((first, last)) = window_means(&losses, (losses.len() / 2).min(100)) {
        m.set("loss.first_window", first);
        m.set("loss.last_window", last);
        println!("loss first window {first} last window {last}");
    }
    m.write(&with_suffix(&a.ckpt_out, ".manifest.txt"))?;
    Ok(())
}

fn sample(a: &SampleArgs, args: &[String]) -> Result<()> {
    let model = io::load_model(&a.ckpt)?;
    let factor = model.adapter.unshuffle_factor;
    let condition = match &a.flow {
        Some(p) => {
            let flow = io::load_tensor(p, Some("flow")).or_else(|_| io::load_tensor(p, None))?;
            let s = flow.shape();
            ensure!(
                s.batch == 1 && s.channels == 2 && s.height % factor == 0 && s.width % factor == 0,
                "flow {s} does not fit the checkpoint: need (1, 2, F, H, W) with H and W divisible by {factor}"
            );
            Some(flow_to_condition(&flow))
        }
        None => None,
    };
    let shape = match &condition {
        Some(c) => {
            let s = c.shape();
            let latent = Shape::new(1, model.denoiser.in_channels, s.frames, s.height / factor, s.width / factor);
            if a.height.is_some_and(|h| h != latent.height) || a.frames.is_some_and(|f| f != latent.frames) {
                bail!("--height/--frames disagree with the flow, which implies {latent}");
            }
            latent
        }
        None => {
            let h = a.height.unwrap_or(DEFAULT_HEIGHT);
            Shape::new(1, model.denoiser.in_channels, a.frames.unwrap_or(model.denoiser.frames), h, 2 * h)
        }
    };
    model.denoiser.check_input(shape)?;
    let z = Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(a.seed));
    let cfg = EnhancementConfig::new(a.theta, a.rotate.on(), a.circular_late.on(), a.adapter_weight);
    let sched = NoiseSchedule::standard();
    let x = sample_with_enhancements(&mut model.denoiser(a.adapter_weight), condition, z, &sched, a.steps, &cfg)?;
    let video = x.map(|v| (v + 1.0) / 2.0);
    let report = seam_metric(&video)?;

    create_dir(&a.out)?;
    io::write_frames_ppm(&video, &a.out.join("frames"))?;
    io::save_tensor(&a.out.join("video.p360"), "video", &video)?;
    fs::write(a.out.join("seam.txt"), format!("{report}\n")).context("writing seam.txt")?;
    let mut m = Manifest::new("sample", args);
    m.set("ckpt", a.ckpt.display());
    m.set("flow", a.flow.as_ref().map_or("none".into(), |p| p.display().to_string()));
    m.set("steps", a.steps);
    m.set("theta", cfg.theta);
    m.set("rotate", cfg.rotate_latents);
    m.set("circular_late", cfg.circular_late_half);
    m.set("adapter_weight", cfg.adapter_weight);
    m.set("seed", a.seed);
    m.set("shape", shape);
    m.set("seam_gap", report.seam_gap);
    m.set("interior_gap", report.interior_gap);
    m.set("ratio", report.ratio);
    m.write(&a.out.join(manifest::FILE_NAME))?;
    println!("{report}");
    Ok(())
}

fn load_video(path: &Path) -> Result<Tensor> {
    if path.is_dir() {
        return Ok(io::read_frames_ppm(path)?);
    }
    Ok(io::load_tensor(path, Some("video")).or_else(|_| io::load_tensor(path, None))?)
}

fn eval(a: &EvalArgs, args: &[String]) -> Result<()> {
    let video = load_video(&a.input)?;
    let mut m = Manifest::new("eval", args);
    m.set("input", a.input.display());
    match &a.action {
        EvalAction::Seam { out } => {
            let report = seam_metric(&video)?;
            println!("{report}");
            if let Some(dir) = out {
                create_dir(dir)?;
                fs::write(dir.join("seam.txt"), format!("{report}\n")).context("writing seam.txt")?;
                m.set("action", "seam");
                m.set("seam_gap", report.seam_gap);
                m.set("interior_gap", report.interior_gap);
                m.set("ratio", report.ratio);
                m.write(&dir.join(manifest::FILE_NAME))?;
            }
        }
        EvalAction::Project { yaw, pitch, fov, size, out } => {
            let cam = SphereCamera::new(*yaw, *pitch, *fov, *size)?;
            let view = erp_to_perspective(&video, &cam)?;
            let n = io::write_frames_ppm(&view, out)?.len();
            m.set("action", "project");
            m.set("yaw", yaw);
            m.set("pitch", pitch);
            m.set("fov", fov);
            m.set("size", size);
            m.write(&out.join(manifest::FILE_NAME))?;
            println!("wrote {n} views to {}", out.display());
        }
        EvalAction::Duplicate { out } => {
            let n = io::write_frames_ppm(&duplicate_side_by_side(&video), out)?.len();
            m.set("action", "duplicate");
            m.write(&out.join(manifest::FILE_NAME))?;
            println!("wrote {n} frames to {}", out.display());
        }
    }
    Ok(())
}
