use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use scenelat::container::{read_container, write_atomic, write_container, Array};
use scenelat::datapipe::make_sample;
use scenelat::dit::encode_condition;
use scenelat::eval::{
    dit_gradcheck, rae_gradcheck, run_benchmark, DiffusionGenerator, GradCheckConfig, OracleGenerator, ViewGenerator,
};
use scenelat::rae::{LatentMode, Provenance};
use scenelat::scenegen::{generate_scene, read_cameras, read_scene, write_cameras, write_scene};
use scenelat::trainer::{append_metrics, calibrate_rae, train_dit, train_rae, DitTrainState, RaeTrainState};
use scenelat::{
    Archive, BatchSampler, Dataset, Dit, Error, Image, LatentTokens, MultiViewSample, Rae, RunConfig, Stage,
};

const PRESETS: &[(&str, &str)] = &[("tiny", include_str!("../presets/tiny.toml")), ("desk", "")];
const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "scenelat", version, about = "3D latent scene autoencoder and latent diffusion")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file, or a built-in preset name (tiny, desk).
    #[arg(long, global = true)]
    config: Option<String>,
    /// Dotted override, e.g. `dit.cfg_scale=2.0`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Base seed for every random draw (replaces all seeds in the config).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads; 0 uses every core. 1 is bit-reproducible.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
}

#[derive(Args)]
struct SceneArgs {
    /// Dataset root written by gen-data.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 0)]
    scene: usize,
    /// Comma-separated view indices (default: all).
    #[arg(long)]
    views: Option<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic multi-view dataset.
    GenData,
    /// Train the autoencoder, then calibrate its latent statistics.
    TrainRae {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this step (default: the configured total).
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Train the latent diffusion model against a frozen autoencoder.
    TrainDit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        rae: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        steps: Option<u64>,
    },
    /// Encode views of one scene into standardized latents.
    Encode {
        #[arg(long)]
        rae: PathBuf,
        #[command(flatten)]
        scene: SceneArgs,
        /// Comma-separated positions (within --views) that are visible.
        #[arg(long)]
        visible: Option<String>,
    },
    /// Decode latents at the cameras written by encode or sample.
    Decode {
        #[arg(long)]
        rae: PathBuf,
        #[arg(long)]
        latents: PathBuf,
        #[arg(long)]
        cameras: PathBuf,
    },
    /// Sample a scene conditioned on some of its views.
    Sample {
        #[arg(long)]
        rae: PathBuf,
        #[arg(long)]
        dit: PathBuf,
        #[command(flatten)]
        scene: SceneArgs,
        /// Conditioning positions within --views; `none` for trajectory only.
        #[arg(long, default_value = "0")]
        cond: String,
    },
    /// Benchmark a generator over a dataset.
    Eval {
        #[arg(long)]
        rae: PathBuf,
        /// Diffusion checkpoint; without it the autoencoder reconstructs all views.
        #[arg(long)]
        dit: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference check of both losses on tiny models.
    Gradcheck,
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    scene: Option<usize>,
    views: Vec<usize>,
    visible: Vec<usize>,
    tag: Option<String>,
    config: &'a RunConfig,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            let numeric = e.chain().any(|c| c.downcast_ref::<Error>().is_some_and(Error::is_numeric));
            ExitCode::from(if numeric { 2 } else { 1 })
        }
    }
}

fn load_config(c: &Common) -> anyhow::Result<RunConfig> {
    let text = match &c.config {
        None => String::new(),
        Some(name) => {
            let path = Path::new(name);
            match PRESETS.iter().find(|(n, _)| n == name) {
                Some((_, t)) if !path.exists() => t.to_string(),
                _ => fs::read_to_string(path).with_context(|| format!("reading config {name}"))?,
            }
        }
    };
    let mut cfg = RunConfig::parse(&text, &c.set)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
        cfg.rae.init_seed = s;
        cfg.dit.init_seed = s;
        cfg.train_rae.seed = s;
        cfg.train_dit.seed = s;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = load_config(&cli.common)?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(cli.common.threads)
        .build_global()
        .context("starting the worker pool")?;
    let out = &cli.common.out;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write_atomic(&out.join("config.toml"), cfg.to_toml()?.as_bytes())?;
    match cli.cmd {
        Cmd::GenData => gen_data(&cfg, out)?,
        Cmd::TrainRae { data, resume, steps } => train_rae_cmd(&cfg, out, &data, resume.as_deref(), steps)?,
        Cmd::TrainDit {
            data,
            rae,
            resume,
            steps,
        } => train_dit_cmd(&cfg, out, &data, &rae, resume.as_deref(), steps)?,
        Cmd::Encode { rae, scene, visible } => encode_cmd(&cfg, out, &rae, &scene, visible.as_deref())?,
        Cmd::Decode { rae, latents, cameras } => decode_cmd(out, &rae, &latents, &cameras)?,
        Cmd::Sample { rae, dit, scene, cond } => sample_cmd(&cfg, out, &rae, &dit, &scene, &cond)?,
        Cmd::Eval { rae, dit, data } => eval_cmd(&cfg, out, &rae, dit.as_deref(), &data)?,
        Cmd::Gradcheck => return gradcheck_cmd(&cfg, out),
    }
    Ok(ExitCode::SUCCESS)
}

fn read_archive(path: &Path) -> anyhow::Result<Archive> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Archive::decode(&bytes)?)
}

fn write_archive(path: &Path, ar: &Archive) -> anyhow::Result<()> {
    write_atomic(path, &ar.encode()?)?;
    Ok(())
}

fn load_rae(path: &Path) -> anyhow::Result<Rae<f32>> {
    Ok(Rae::load_from(&read_archive(path)?, None)?)
}

/// Weights used for sampling: the EMA shadow.
fn load_dit(path: &Path) -> anyhow::Result<Dit<f32>> {
    let ar = read_archive(path)?;
    Ok(Dit::load_from(&ar, "dit/", "ema")?)
}

fn parse_list(s: &str) -> anyhow::Result<Vec<usize>> {
    if s.trim().is_empty() || s.trim() == "none" {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|x| x.trim().parse().with_context(|| format!("bad index {x:?} in {s:?}")))
        .collect()
}

fn load_sample(cfg: &RunConfig, a: &SceneArgs) -> anyhow::Result<MultiViewSample> {
    let rec = read_scene(&a.data, a.scene)?;
    let views = match &a.views {
        Some(v) => parse_list(v)?,
        None => (0..rec.views.len()).collect(),
    };
    if views.is_empty() {
        bail!(Error::Validation("no views selected".into()));
    }
    Ok(make_sample(&rec, a.scene, &views, cfg.eval.height, cfg.eval.width)?)
}

fn positions(list: &[usize], n: usize) -> anyhow::Result<Vec<bool>> {
    let mut vis = vec![false; n];
    for &i in list {
        if i >= n {
            bail!(Error::Validation(format!("position {i} out of range for {n} views")));
        }
        vis[i] = true;
    }
    Ok(vis)
}

fn write_views(out: &Path, images: &[Image], points: Option<&[Image]>) -> anyhow::Result<()> {
    for (i, img) in images.iter().enumerate() {
        write_container(&out.join(format!("view_{i:03}.ten")), &img.to_array())?;
        img.write_ppm(&out.join(format!("view_{i:03}.ppm")))?;
    }
    for (i, p) in points.unwrap_or_default().iter().enumerate() {
        write_container(&out.join(format!("pmap_{i:03}.ten")), &p.to_array())?;
    }
    Ok(())
}

fn write_manifest(out: &Path, m: &Manifest) -> anyhow::Result<()> {
    let text = toml::to_string(m).context("serializing manifest")?;
    write_atomic(&out.join("manifest.toml"), text.as_bytes())?;
    Ok(())
}

fn gen_data(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let d = &cfg.data;
    for id in 0..d.scenes {
        let rec = generate_scene(cfg.seed, id, d.views, d.motion_min_deg, &d.scene)?;
        write_scene(out, id, &rec)?;
    }
    log::info!("wrote {} scenes to {}", d.scenes, out.display());
    Ok(())
}

fn sampler(cfg: &RunConfig, data: &Path) -> anyhow::Result<BatchSampler> {
    let ds = Arc::new(Dataset::load(data)?);
    Ok(BatchSampler::new(ds, cfg.sampler.clone(), cfg.seed)?)
}

/// Train in chunks so a checkpoint is on disk at regular intervals.
const CHECKPOINT_EVERY: u64 = 1000;

fn train_rae_cmd(cfg: &RunConfig, out: &Path, data: &Path, resume: Option<&Path>, steps: Option<u64>) -> anyhow::Result<()> {
    let tc = &cfg.train_rae;
    let smp = sampler(cfg, data)?;
    let mut st = match resume {
        Some(p) => RaeTrainState::from_archive(&read_archive(p)?, tc)?,
        None => RaeTrainState::new(Rae::with_default_encoder(cfg.rae.clone())?, tc),
    };
    let until = steps.unwrap_or(tc.schedule.total).min(tc.schedule.total);
    let ckpt = out.join("rae.ckpt");
    while st.step < until {
        let stop = (st.step + CHECKPOINT_EVERY).min(until);
        let mut log = Vec::new();
        train_rae(tc, &mut st, &smp, stop, &mut log)?;
        append_metrics(&out.join("metrics.tsv"), &log)?;
        if let Some(r) = log.last() {
            log::info!("rae step {}: {}", r.step, r.line());
        }
        if st.step < until {
            write_archive(&ckpt, &st.to_archive(tc)?)?;
        }
    }
    calibrate_rae(&mut st.rae, &smp)?;
    write_archive(&ckpt, &st.to_archive(tc)?)?;
    log::info!("autoencoder checkpoint at {}", ckpt.display());
    Ok(())
}

fn train_dit_cmd(
    cfg: &RunConfig,
    out: &Path,
    data: &Path,
    rae_path: &Path,
    resume: Option<&Path>,
    steps: Option<u64>,
) -> anyhow::Result<()> {
    let tc = &cfg.train_dit;
    if tc.stage == Stage::Rae {
        bail!(Error::Config("train_dit.stage must be dit_stage1 or dit_stage2".into()));
    }
    let rae = load_rae(rae_path)?;
    let smp = sampler(cfg, data)?;
    let mut st = match resume {
        Some(p) => DitTrainState::from_archive(&read_archive(p)?, tc)?,
        None => DitTrainState::new(Dit::new(cfg.dit.clone(), rae.cfg.m, rae.cfg.d)?, tc),
    };
    let until = steps.unwrap_or(tc.schedule.total).min(tc.schedule.total);
    let ckpt = out.join("dit.ckpt");
    let fp = rae.params.fingerprint();
    loop {
        let stop = (st.step + CHECKPOINT_EVERY).min(until);
        let mut log = Vec::new();
        train_dit(tc, &mut st, &rae, &smp, stop, &mut log)?;
        append_metrics(&out.join("metrics.tsv"), &log)?;
        if let Some(r) = log.last() {
            log::info!("dit step {}: {}", r.step, r.line());
        }
        write_archive(&ckpt, &st.to_archive(tc, fp)?)?;
        if st.step >= until {
            break;
        }
    }
    log::info!("diffusion checkpoint at {}", ckpt.display());
    Ok(())
}

fn encode_cmd(cfg: &RunConfig, out: &Path, rae_path: &Path, a: &SceneArgs, visible: Option<&str>) -> anyhow::Result<()> {
    let rae = load_rae(rae_path)?;
    let s = load_sample(cfg, a)?;
    let vis = match visible {
        Some(v) => positions(&parse_list(v)?, s.n_views())?,
        None => vec![true; s.n_views()],
    };
    let z = rae.encode(&s.images, &s.cameras, &vis, LatentMode::Standardized)?;
    write_container(&out.join("latents.ten"), &Array::from_tensor(&z.z))?;
    write_cameras(&out.join("cameras.cfg"), &s.cameras)?;
    write_manifest(
        out,
        &Manifest {
            command: "encode",
            scene: Some(a.scene),
            views: s.view_ids.clone(),
            visible: (0..vis.len()).filter(|&i| vis[i]).collect(),
            tag: None,
            config: cfg,
        },
    )
}

fn decode_cmd(out: &Path, rae_path: &Path, latents: &Path, cameras: &Path) -> anyhow::Result<()> {
    let rae = load_rae(rae_path)?;
    let z = LatentTokens {
        z: read_container(latents)?.to_tensor()?,
        standardized: true,
        provenance: Provenance::Encoded,
    };
    let cams = read_cameras(cameras)?;
    let images = rae.decode_images(&z, &cams)?;
    let points: Vec<Image> = rae.decode_pointmaps(&z, &cams)?.into_iter().map(|p| p.points).collect();
    write_views(out, &images, Some(&points))
}

fn sample_cmd(cfg: &RunConfig, out: &Path, rae_path: &Path, dit_path: &Path, a: &SceneArgs, cond: &str) -> anyhow::Result<()> {
    let rae = load_rae(rae_path)?;
    let dit = load_dit(dit_path)?;
    let s = load_sample(cfg, a)?;
    let vis = positions(&parse_list(cond)?, s.n_views())?;
    let c = encode_condition(&rae, &s.images, &s.cameras, &vis, None)?;
    let z = dit.sample(&c, cfg.dit.sample_steps, cfg.dit.cfg_scale, cfg.seed)?;
    write_container(&out.join("latents.ten"), &Array::from_tensor(&z.z))?;
    write_cameras(&out.join("cameras.cfg"), &s.cameras)?;
    let images = rae.decode_images(&z, &s.cameras)?;
    let points: Vec<Image> = rae.decode_pointmaps(&z, &s.cameras)?.into_iter().map(|p| p.points).collect();
    write_views(out, &images, Some(&points))?;
    write_manifest(
        out,
        &Manifest {
            command: "sample",
            scene: Some(a.scene),
            views: s.view_ids.clone(),
            visible: (0..vis.len()).filter(|&i| vis[i]).collect(),
            tag: Some(format!("{:?}", c.tag)),
            config: cfg,
        },
    )
}

fn eval_cmd(cfg: &RunConfig, out: &Path, rae_path: &Path, dit_path: Option<&Path>, data: &Path) -> anyhow::Result<()> {
    let rae = load_rae(rae_path)?;
    let ds = Dataset::load(data)?;
    let dit = dit_path.map(load_dit).transpose()?;
    let generator: Box<dyn ViewGenerator + '_> = match &dit {
        Some(d) => Box::new(DiffusionGenerator {
            rae: &rae,
            dit: d,
            steps: cfg.dit.sample_steps,
            cfg_scale: cfg.dit.cfg_scale,
            seed: cfg.seed,
        }),
        None => Box::new(OracleGenerator { rae: &rae }),
    };
    let report = run_benchmark(generator.as_ref(), &ds.scenes, &cfg.eval, rae.encoder.as_ref(), rae.cfg.patch)?;
    write_atomic(&out.join("report.txt"), report.to_text().as_bytes())?;
    write_atomic(&out.join("report.tsv"), report.to_tsv().as_bytes())?;
    println!(
        "psnr {:.3} dB  frechet {:.4}  ate_r {:.3} deg  ate_t {:.4}  ({} scenes, {} skipped)",
        report.psnr,
        report.frechet,
        report.ate_r,
        report.ate_t,
        report.scenes.len(),
        report.skipped
    );
    Ok(())
}

fn gradcheck_cmd(cfg: &RunConfig, out: &Path) -> anyhow::Result<ExitCode> {
    let gc = GradCheckConfig {
        seed: cfg.seed,
        ..GradCheckConfig::default()
    };
    let mut text = String::new();
    let mut ok = true;
    for (name, r) in [("rae", rae_gradcheck(&gc)?), ("dit", dit_gradcheck(&gc)?)] {
        let line = format!(
            "{name} max_rel_err {:.3e} over {} coordinates (worst index {})",
            r.max_rel_err, r.checked, r.worst_index
        );
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
        ok &= r.max_rel_err < GRADCHECK_TOL;
    }
    write_atomic(&out.join("gradcheck.txt"), text.as_bytes())?;
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::from(2) })
}
