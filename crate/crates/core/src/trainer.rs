//! Training loops for the autoencoder and the diffusion transformer, with
//! checkpointing and an append-only metrics log.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::container::{Archive, Array};
use crate::datapipe::{BatchSampler, MaskPolicy, MultiViewSample};
use crate::error::{Error, Result};
use crate::dit::{encode_condition, ConditionTokens, Dit};
use crate::geometry::{Camera, Mat3, Vec3};
use crate::optim::{clip_grad_norm, lr_schedule, AdamW, ScheduleConfig};
use crate::params::ParamStore;
use crate::rae::{hinge_losses, loss_graph, LatentMode, PatchDiscriminator, PmapTarget, Rae};
use crate::seed::{self, stream};
use crate::tensor::Tensor;

pub use crate::optim::ema_update;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Rae,
    DitStage1,
    DitStage2,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub schedule: ScheduleConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub disc_start: u64,
    pub adv_start: u64,
    pub disc_hidden: usize,
    pub mask: MaskPolicy,
    /// Visible views re-decoded per sample on top of the hidden ones.
    pub visible_targets: usize,
    /// Probability of dropping the class label (single-image stage).
    pub cond_drop: f64,
    pub seed: u64,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage: Stage::Rae,
            schedule: ScheduleConfig {
                total: 20_000,
                ..ScheduleConfig::default()
            },
            beta1: 0.9,
            beta2: 0.95,
            weight_decay: 0.0,
            grad_clip: 1.0,
            disc_start: 50_000,
            adv_start: 60_000,
            disc_hidden: 64,
            mask: MaskPolicy::rae(),
            visible_targets: 1,
            cond_drop: 0.1,
            seed: 0,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn dit(stage: Stage) -> Self {
        Self {
            stage,
            schedule: ScheduleConfig {
                total: 10_000,
                ..ScheduleConfig::default()
            },
            mask: if stage == Stage::DitStage2 { MaskPolicy::dit() } else { MaskPolicy::none() },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule.warmup >= self.schedule.total {
            return Err(Error::config("warmup must be shorter than the run"));
        }
        if self.adv_start < self.disc_start {
            return Err(Error::config("adversarial start must not precede discriminator start"));
        }
        let p = |x: f64| (0.0..=1.0).contains(&x);
        if !p(self.cond_drop) || !p(self.beta1) || !p(self.beta2) {
            return Err(Error::config("probabilities, decay and betas must lie in [0, 1]"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(Error::config("gradient clip must be positive"));
        }
        self.mask.validate()
    }
}

/// One metrics row: step, wall time, learning rate and loss components.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub wall: f64,
    pub lr: f64,
    pub values: Vec<(String, f64)>,
}

impl MetricsRow {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.values.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }

    fn header(&self) -> String {
        let mut h = vec!["step".to_string(), "wall".into(), "lr".into()];
        h.extend(self.values.iter().map(|(k, _)| k.clone()));
        h.join("\t")
    }

    pub fn line(&self) -> String {
        let mut f = vec![self.step.to_string(), format!("{:.3}", self.wall), format!("{:e}", self.lr)];
        f.extend(self.values.iter().map(|(_, v)| format!("{v:.6e}")));
        f.join("\t")
    }
}

/// Append rows to `path`, writing the header when the file is new.
pub fn append_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let Some(first) = rows.first() else { return Ok(()) };
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{}", first.header())?;
    }
    for r in rows {
        writeln!(f, "{}", r.line())?;
    }
    Ok(())
}

/// Targets for one sample: every hidden view plus `n_visible` random
/// visible views (fewer if the sample has fewer).
pub fn supervision_targets(vis: &[bool], n_visible: usize, rng: &mut impl Rng) -> Vec<usize> {
    let visible: Vec<usize> = (0..vis.len()).filter(|&i| vis[i]).collect();
    let mut t: Vec<usize> = (0..vis.len()).filter(|&i| !vis[i]).collect();
    t.extend(rand::seq::index::sample(rng, visible.len(), n_visible.min(visible.len())).iter().map(|k| visible[k]));
    t.sort_unstable();
    t
}

pub struct RaeTrainState {
    pub rae: Rae<f32>,
    pub opt: AdamW,
    pub disc: PatchDiscriminator<f32>,
    pub disc_opt: AdamW,
    pub step: u64,
}

impl RaeTrainState {
    pub fn new(rae: Rae<f32>, cfg: &TrainConfig) -> Self {
        let opt = AdamW::new(&rae.params, cfg.beta1, cfg.beta2, cfg.weight_decay);
        let disc = PatchDiscriminator::new(cfg.disc_hidden, cfg.seed);
        let disc_opt = AdamW::new(&disc.params, cfg.beta1, cfg.beta2, cfg.weight_decay);
        Self {
            rae,
            opt,
            disc,
            disc_opt,
            step: 0,
        }
    }

    pub fn to_archive(&self, cfg: &TrainConfig) -> Result<Archive> {
        let mut ar = Archive::new();
        ar.push("train/stage", Array::text("rae"));
        ar.push("train/step", Array::text(&self.step.to_string()));
        ar.push("train/config", Array::text(&toml::to_string(cfg).map_err(|e| Error::config(e.to_string()))?));
        self.rae.save_into(&mut ar)?;
        self.opt.save_into(&mut ar, "opt/", &self.rae.params);
        self.disc.params.save_into(&mut ar, "disc/param/");
        self.disc_opt.save_into(&mut ar, "disc_opt/", &self.disc.params);
        Ok(ar)
    }

    pub fn from_archive(ar: &Archive, cfg: &TrainConfig) -> Result<Self> {
        let rae = Rae::load_from(ar, None)?;
        let mut st = Self::new(rae, cfg);
        st.step = parse_step(ar)?;
        st.opt.load_from(ar, "opt/", &st.rae.params)?;
        st.disc = PatchDiscriminator::from_params(ParamStore::from_archive(ar, "disc/param/")?)?;
        st.disc_opt.load_from(ar, "disc_opt/", &st.disc.params)?;
        Ok(st)
    }
}

fn parse_step(ar: &Archive) -> Result<u64> {
    ar.require("train/step")?
        .as_text()?
        .parse()
        .map_err(|_| Error::State("bad step counter in checkpoint".into()))
}

fn image_var(g: &mut Graph<f32>, img: &crate::image::Image) -> Var {
    g.constant(Tensor::from_vec(&[img.height, img.width, img.channels], img.data.clone()).expect("image shape"))
}

/// Reconstruction loss of one sample on the tape. Returns the loss, the
/// component values and the decoded target images (for the discriminator).
fn rae_sample_loss(
    g: &mut Graph<f32>,
    rae: &Rae<f32>,
    smp: &MultiViewSample,
    targets: &[usize],
    noise: Option<Tensor<f32>>,
    disc: Option<(&PatchDiscriminator<f32>, &[Var])>,
    adv_gate: f64,
) -> Result<(Var, [f64; 4], Vec<Var>)> {
    let views = rae.prepare(&smp.images, &smp.cameras, &smp.visibility)?;
    let mut z = rae.encode_graph(g, &views);
    if let Some(n) = noise {
        let n = g.constant(n);
        z = g.add(z, n);
    }
    let cams: Vec<_> = targets.iter().map(|&i| smp.cameras[i].clone()).collect();
    let dec = rae.decode_graph(g, z, &cams, smp.pointmaps.is_some())?;
    let w = rae.cfg.weights();
    let mut total: Option<Var> = None;
    let mut parts = [0.0; 4];
    for (k, &i) in targets.iter().enumerate() {
        let gt = image_var(g, &smp.images[i]);
        let pm = match (&smp.pointmaps, &smp.valid) {
            (Some(p), Some(v)) => Some(PmapTarget {
                pred: dec.points[k],
                conf_raw: dec.conf_raw[k],
                gt: image_var(g, &p[i]),
                valid: v[i].clone(),
            }),
            _ => None,
        };
        let adv = match disc {
            Some((d, wv)) if adv_gate != 0.0 => {
                let logits = d.logits(g, dec.images[k], wv);
                Some(hinge_losses(g, None, logits).1)
            }
            _ => None,
        };
        let t = loss_graph(g, dec.images[k], gt, pm.as_ref(), adv, adv_gate, &w);
        parts[0] += g.value(t.mse).item() as f64;
        parts[1] += g.value(t.perceptual).item() as f64;
        parts[2] += t.pmap.map_or(0.0, |v| g.value(v).item() as f64);
        parts[3] += t.adv.map_or(0.0, |v| g.value(v).item() as f64);
        total = Some(match total {
            Some(a) => g.add(a, t.total),
            None => t.total,
        });
    }
    let n = targets.len() as f64;
    parts.iter_mut().for_each(|p| *p /= n);
    let total = total.ok_or_else(|| Error::validation("sample has no supervision targets"))?;
    Ok((g.scale(total, 1.0 / n as f32), parts, dec.images))
}

/// Advance an autoencoder run from `state.step` to `until`. Every random
/// draw is keyed by `(seed, step)`, so stopping and resuming reproduces an
/// uninterrupted run exactly.
pub fn train_rae(
    cfg: &TrainConfig,
    state: &mut RaeTrainState,
    sampler: &BatchSampler,
    until: u64,
    log: &mut Vec<MetricsRow>,
) -> Result<()> {
    cfg.validate()?;
    if cfg.stage != Stage::Rae {
        return Err(Error::config("train_rae needs stage = rae"));
    }
    let start = Instant::now();
    let until = until.min(cfg.schedule.total);
    while state.step < until {
        let step = state.step;
        let step_seed = seed::derive(cfg.seed, &[stream::STEP, step]);
        let mut rng = seed::rng(step_seed, &[stream::MASK]);
        let batch = sampler.batch(step)?;
        let lr = lr_schedule(step, &cfg.schedule);
        let adv_gate = if step >= cfg.adv_start { 1.0 } else { 0.0 };
        let disc_on = step >= cfg.disc_start;

        let mut g = Graph::new(&state.rae.params);
        let disc_w = if adv_gate != 0.0 { Some(state.disc.constants(&mut g)) } else { None };
        let mut total: Option<Var> = None;
        let mut parts = [0.0; 4];
        let mut fakes = Vec::new();
        for smp in &batch.samples {
            let mut smp = smp.clone();
            smp.visibility = cfg.mask.draw(smp.n_views(), &mut rng);
            let targets = supervision_targets(&smp.visibility, cfg.visible_targets, &mut rng);
            let noise = (state.rae.cfg.tau > 0.0).then(|| {
                let z = Tensor::zeros(&[state.rae.cfg.m, state.rae.cfg.d]);
                crate::rae::perturb_tensor(&z, state.rae.cfg.tau, &mut rng)
            });
            let disc = disc_w.as_deref().map(|w| (&state.disc, w));
            let (l, p, imgs) = rae_sample_loss(&mut g, &state.rae, &smp, &targets, noise, disc, adv_gate)?;
            for (a, b) in parts.iter_mut().zip(p) {
                *a += b / batch.samples.len() as f64;
            }
            if disc_on {
                for (k, &i) in targets.iter().enumerate() {
                    fakes.push((smp.images[i].clone(), g.value(imgs[k]).clone()));
                }
            }
            total = Some(match total {
                Some(a) => g.add(a, l),
                None => l,
            });
        }
        let total = total.expect("batch has samples");
        let total = g.scale(total, 1.0 / batch.samples.len() as f32);
        let loss = g.value(total).item() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite autoencoder loss at step {step} (batch seed {step_seed:#x})"
            )));
        }
        let mut grads = g.backward(total).into_param_grads(&state.rae.params);
        drop(g);
        let gnorm = clip_grad_norm(&mut grads, cfg.grad_clip);
        state.opt.update(&mut state.rae.params, &grads, lr)?;

        let mut d_loss = 0.0;
        if disc_on && !fakes.is_empty() {
            let mut dg = Graph::new(&state.disc.params);
            let w = state.disc.leaves(&mut dg);
            let mut acc: Option<Var> = None;
            for (real, fake) in &fakes {
                let rv = image_var(&mut dg, real);
                let fv = dg.constant(fake.clone());
                let rl = state.disc.logits(&mut dg, rv, &w);
                let fl = state.disc.logits(&mut dg, fv, &w);
                let d = hinge_losses(&mut dg, Some(rl), fl).0.expect("real logits given");
                acc = Some(match acc {
                    Some(a) => dg.add(a, d),
                    None => d,
                });
            }
            let d = dg.scale(acc.expect("fakes"), 1.0 / fakes.len() as f32);
            d_loss = dg.value(d).item() as f64;
            let mut dgrads = dg.backward(d).into_param_grads(&state.disc.params);
            drop(dg);
            clip_grad_norm(&mut dgrads, cfg.grad_clip);
            state.disc_opt.update(&mut state.disc.params, &dgrads, lr)?;
        }
        state.step += 1;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || state.step == until) {
            log.push(MetricsRow {
                step,
                wall: start.elapsed().as_secs_f64(),
                lr,
                values: vec![
                    ("total".into(), loss),
                    ("mse".into(), parts[0]),
                    ("perceptual".into(), parts[1]),
                    ("pmap".into(), parts[2]),
                    ("adv".into(), parts[3]),
                    ("disc".into(), d_loss),
                    ("grad_norm".into(), gnorm),
                ],
            });
        }
    }
    Ok(())
}

/// Calibrate latent statistics on fully visible training samples.
pub fn calibrate_rae(rae: &mut Rae<f32>, sampler: &BatchSampler) -> Result<()> {
    let mut samples = Vec::new();
    let mut rows = 0;
    let mut step = 0u64;
    while rows < rae.cfg.calib_tokens {
        // a stream disjoint from training steps
        let b = sampler.batch(u64::MAX / 2 + step)?;
        for s in b.samples {
            rows += rae.cfg.m;
            samples.push(s);
        }
        step += 1;
    }
    rae.calibrate(samples.iter().map(|s| (&s.images[..], &s.cameras[..])))
}

/// Optimizer, EMA shadow and step counter of a diffusion run.
pub struct DitTrainState {
    pub dit: Dit<f32>,
    pub ema: ParamStore<f32>,
    pub opt: AdamW,
    pub step: u64,
}

impl DitTrainState {
    pub fn new(dit: Dit<f32>, cfg: &TrainConfig) -> Self {
        let opt = AdamW::new(&dit.params, cfg.beta1, cfg.beta2, cfg.weight_decay);
        Self {
            ema: dit.params.clone(),
            dit,
            opt,
            step: 0,
        }
    }

    /// Drop the class-label table from the model, the shadow and the
    /// optimizer moments. Returns whether there was one.
    pub fn remove_label_table(&mut self) -> bool {
        if !self.dit.drop_label_table() {
            return false;
        }
        // the table is the last parameter, so moments stay aligned
        self.ema.remove_prefix("dit.label");
        let n = self.dit.params.len();
        self.opt.m.truncate(n);
        self.opt.v.truncate(n);
        true
    }

    /// Start the multi-view stage from a single-image run: EMA weights carry
    /// over, the label table goes, optimizer and step restart.
    pub fn next_stage(self, cfg: &TrainConfig) -> Self {
        let mut dit = self.dit;
        dit.params = self.ema;
        if dit.drop_label_table() {
            log::info!("dropped the class-label table for the multi-view stage");
        }
        Self::new(dit, cfg)
    }

    /// EMA weights in a model ready for sampling.
    pub fn ema_model(&self) -> Dit<f32> {
        let mut d = self.dit.clone();
        d.params = self.ema.clone();
        d
    }

    pub fn to_archive(&self, cfg: &TrainConfig, rae_fingerprint: u64) -> Result<Archive> {
        let mut ar = Archive::new();
        ar.push("train/stage", Array::text(stage_name(cfg.stage)));
        ar.push("train/step", Array::text(&self.step.to_string()));
        ar.push("train/config", Array::text(&toml::to_string(cfg).map_err(|e| Error::config(e.to_string()))?));
        ar.push("train/rae_fingerprint", Array::text(&format!("{rae_fingerprint:016x}")));
        self.dit.save_into(&mut ar, "dit/", &self.dit.params)?;
        self.ema.save_into(&mut ar, "dit/ema/");
        self.opt.save_into(&mut ar, "opt/", &self.dit.params);
        Ok(ar)
    }

    /// Restore a run. A multi-view config loading a checkpoint that still
    /// carries the label table drops it (and restarts the optimizer).
    pub fn from_archive(ar: &Archive, cfg: &TrainConfig) -> Result<Self> {
        let mut dit = Dit::load_from(ar, "dit/", "param")?;
        let mut ema = dit.params.clone();
        ema.load_from(&ParamStore::from_archive(ar, "dit/ema/")?)?;
        let saved = ar.require("train/stage")?.as_text()?;
        if cfg.stage == Stage::DitStage2 && saved != stage_name(Stage::DitStage2) {
            if dit.has_label_table() {
                log::warn!("checkpoint from stage {saved} still has a class-label table; removing it");
            }
            dit.params = ema;
            dit.drop_label_table();
            return Ok(Self::new(dit, cfg));
        }
        let mut st = Self::new(dit, cfg);
        st.ema = ema;
        st.step = parse_step(ar)?;
        st.opt.load_from(ar, "opt/", &st.dit.params)?;
        Ok(st)
    }
}

pub fn stage_name(s: Stage) -> &'static str {
    match s {
        Stage::Rae => "rae",
        Stage::DitStage1 => "dit_stage1",
        Stage::DitStage2 => "dit_stage2",
    }
}

/// The identity-pose camera a lone image gets in the single-image stage.
pub fn identity_camera(cam: &Camera) -> Camera {
    cam.clone().with_pose(Mat3::identity(), Vec3::zeros())
}

/// Clean latents and condition tokens for one sample of a diffusion run.
pub fn dit_example(
    cfg: &TrainConfig,
    rae: &Rae<f32>,
    smp: &MultiViewSample,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, ConditionTokens<f32>)> {
    match cfg.stage {
        Stage::DitStage1 => {
            let v = rng.random_range(0..smp.n_views());
            let img = [smp.images[v].clone()];
            let cam = [identity_camera(&smp.cameras[v])];
            let z0 = rae.encode(&img, &cam, &[true], LatentMode::Standardized)?.z;
            let keep = rng.random::<f64>() >= cfg.cond_drop;
            let label = smp.category.filter(|_| keep);
            let cond = encode_condition(rae, &img, &cam, &[false], label)?;
            Ok((z0, cond))
        }
        Stage::DitStage2 => {
            let n = smp.n_views();
            let z0 = rae.encode(&smp.images, &smp.cameras, &vec![true; n], LatentMode::Standardized)?.z;
            let vis = cfg.mask.draw(n, rng);
            let cond = encode_condition(rae, &smp.images, &smp.cameras, &vis, None)?;
            Ok((z0, cond))
        }
        Stage::Rae => Err(Error::config("not a diffusion stage")),
    }
}

/// Advance a diffusion run to `until` on latents from the frozen
/// autoencoder.
pub fn train_dit(
    cfg: &TrainConfig,
    state: &mut DitTrainState,
    rae: &Rae<f32>,
    sampler: &BatchSampler,
    until: u64,
    log: &mut Vec<MetricsRow>,
) -> Result<()> {
    cfg.validate()?;
    if cfg.stage == Stage::Rae {
        return Err(Error::config("train_dit needs a diffusion stage"));
    }
    rae.calibration()?;
    if cfg.stage == Stage::DitStage2 && state.remove_label_table() {
        if state.step > 0 {
            log::warn!("removed the class-label table before the multi-view stage");
        } else {
            log::info!("no class labels in the multi-view stage; label table removed");
        }
    }
    if (state.dit.m, state.dit.d) != (rae.cfg.m, rae.cfg.d) {
        return Err(Error::config(format!(
            "diffusion model expects [{}, {}] latents, autoencoder gives [{}, {}]",
            state.dit.m, state.dit.d, rae.cfg.m, rae.cfg.d
        )));
    }
    let frozen = rae.params.fingerprint();
    let decay = state.dit.cfg.ema_decay;
    let start = Instant::now();
    let until = until.min(cfg.schedule.total);
    while state.step < until {
        let step = state.step;
        let step_seed = seed::derive(cfg.seed, &[stream::STEP, step]);
        let mut rng = seed::rng(step_seed, &[stream::MASK]);
        let batch = sampler.batch(step)?;
        let lr = lr_schedule(step, &cfg.schedule);
        let mut g = Graph::new(&state.dit.params);
        let mut total: Option<Var> = None;
        for (k, smp) in batch.samples.iter().enumerate() {
            let (z0, cond) = dit_example(cfg, rae, smp, &mut rng)?;
            let l = state.dit.fm_loss_graph(&mut g, &z0, &cond, seed::derive(step_seed, &[k as u64]))?;
            total = Some(match total {
                Some(a) => g.add(a, l),
                None => l,
            });
        }
        let total = g.scale(total.expect("batch has samples"), 1.0 / batch.samples.len() as f32);
        let loss = g.value(total).item() as f64;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite flow-matching loss at step {step} (batch seed {step_seed:#x})"
            )));
        }
        let mut grads = g.backward(total).into_param_grads(&state.dit.params);
        drop(g);
        let gnorm = clip_grad_norm(&mut grads, cfg.grad_clip);
        state.opt.update(&mut state.dit.params, &grads, lr)?;
        ema_update(&mut state.ema, &state.dit.params, decay)?;
        state.step += 1;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || state.step == until) {
            log.push(MetricsRow {
                step,
                wall: start.elapsed().as_secs_f64(),
                lr,
                values: vec![("fm".into(), loss), ("grad_norm".into(), gnorm)],
            });
        }
    }
    if rae.params.fingerprint() != frozen {
        return Err(Error::State("autoencoder parameters changed during diffusion training".into()));
    }
    Ok(())
}
