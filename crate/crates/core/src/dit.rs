//! Flow-matching diffusion transformer over latent tokens.
//!
//! Condition tokens and noisy latents are concatenated (condition first) and
//! run through an adaLN backbone followed by a wider head. Time and the
//! optional class label enter through a per-block modulation vector.

use std::rc::Rc;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::container::{Archive, Array};
use crate::error::{Error, Result};
use crate::geometry::Camera;
use crate::image::Image;
use crate::nn::{self, Attention, Linear, SwiGlu};
use crate::params::{ParamId, ParamStore};
use crate::rae::{LatentMode, LatentTokens, Provenance, Rae};
use crate::seed::{self, stream};
use crate::tensor::{Real, Tensor};

const CKPT_FORMAT: &str = "scenelat-dit-1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DitConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub head_depth: usize,
    pub head_width: usize,
    pub head_heads: usize,
    pub mlp_ratio: usize,
    /// Base dimension of the timestep shift.
    pub base_dim: f64,
    pub cfg_scale: f64,
    pub sample_steps: usize,
    pub ema_decay: f64,
    /// Class count for the label table; 0 means no table.
    pub classes: usize,
    /// Standard deviation of the frozen Fourier frequencies.
    pub fourier_std: f64,
    pub init_seed: u64,
}

impl Default for DitConfig {
    fn default() -> Self {
        Self {
            depth: 4,
            width: 128,
            heads: 4,
            head_depth: 2,
            head_width: 256,
            head_heads: 4,
            mlp_ratio: 4,
            base_dim: 4096.0,
            cfg_scale: 2.0,
            sample_steps: 50,
            ema_decay: 0.9995,
            classes: 10,
            fourier_std: 4.0,
            init_seed: 0,
        }
    }
}

impl DitConfig {
    /// Small configuration for gradient checks and fast tests.
    pub fn tiny() -> DitConfig {
        DitConfig {
            depth: 1,
            width: 8,
            heads: 2,
            head_depth: 1,
            head_width: 12,
            head_heads: 2,
            mlp_ratio: 2,
            classes: 3,
            ..DitConfig::default()
        }
    }

    /// Published backbone sizes `S`, `B` and `XL` with the 2048-wide head.
    pub fn preset(size: &str) -> Result<Self> {
        let (depth, width, heads) = match size {
            "S" => (12, 384, 6),
            "B" => (12, 768, 12),
            "XL" => (28, 1152, 16),
            _ => return Err(Error::config(format!("unknown model size {size:?}"))),
        };
        Ok(Self {
            depth,
            width,
            heads,
            head_depth: 2,
            head_width: 2048,
            head_heads: 16,
            ..Self::default()
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::config(format!("width {} not divisible by {} heads", self.width, self.heads)));
        }
        if self.head_width == 0 || self.head_heads == 0 || self.head_width % self.head_heads != 0 {
            return Err(Error::config(format!(
                "head width {} not divisible by {} heads",
                self.head_width, self.head_heads
            )));
        }
        if self.width % 2 != 0 {
            return Err(Error::config("width must be even for the Fourier embedding"));
        }
        if self.mlp_ratio == 0 || self.sample_steps == 0 {
            return Err(Error::config("mlp_ratio and sample_steps must be positive"));
        }
        if !(self.base_dim > 0.0) || !(self.fourier_std > 0.0) {
            return Err(Error::config("base_dim and fourier_std must be positive"));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(Error::config("ema_decay must lie in [0, 1]"));
        }
        if !self.cfg_scale.is_finite() {
            return Err(Error::config("cfg_scale must be finite"));
        }
        Ok(())
    }
}

pub fn shift_alpha(n: usize, m: usize, base: f64) -> f64 {
    (n as f64 * m as f64 / base).sqrt()
}

fn check_unit(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::validation(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

fn check_dims(n: usize, m: usize, base: f64) -> Result<()> {
    if n == 0 || m == 0 || !(base > 0.0) {
        return Err(Error::validation("shift dimensions must be positive"));
    }
    Ok(())
}

/// `t_m = α t / (1 + (α − 1) t)` with `α = sqrt(n m / base)`.
pub fn timestep_shift(t: f64, n: usize, m: usize, base: f64) -> Result<f64> {
    check_unit(t)?;
    check_dims(n, m, base)?;
    let a = shift_alpha(n, m, base);
    // written so the endpoints map exactly
    Ok(a * t / (a * t + (1.0 - t)))
}

pub fn timestep_unshift(t: f64, n: usize, m: usize, base: f64) -> Result<f64> {
    check_unit(t)?;
    check_dims(n, m, base)?;
    let a = shift_alpha(n, m, base);
    Ok(t / (a * (1.0 - t) + t))
}

/// `Z_t = (1 − t) Z0 + t ε`.
pub fn fm_interpolate<F: Real>(z0: &Tensor<F>, eps: &Tensor<F>, t: f64) -> Result<Tensor<F>> {
    check_unit(t)?;
    if z0.shape() != eps.shape() {
        return Err(Error::validation(format!("shapes {:?} and {:?} differ", z0.shape(), eps.shape())));
    }
    if t == 0.0 {
        return Ok(z0.clone());
    }
    if t == 1.0 {
        return Ok(eps.clone());
    }
    let (a, b) = (F::c(1.0 - t), F::c(t));
    let data = z0.data().iter().zip(eps.data()).map(|(&z, &e)| a * z + b * e).collect();
    Tensor::from_vec(z0.shape(), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CondTag {
    Uncond,
    SingleView,
    SparseView,
}

impl CondTag {
    pub fn from_visible(n: usize) -> Self {
        match n {
            0 => Self::Uncond,
            1 => Self::SingleView,
            _ => Self::SparseView,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConditionTokens<F = f32> {
    /// Standardized `[m, d]` latents of the masked observations.
    pub tokens: Tensor<F>,
    /// The same cameras with every image dropped, for the guidance branch.
    pub pose_only: Tensor<F>,
    pub tag: CondTag,
    pub label: Option<usize>,
}

impl<F: Real> ConditionTokens<F> {
    pub fn cast<G: Real>(&self) -> ConditionTokens<G> {
        ConditionTokens {
            tokens: self.tokens.cast(),
            pose_only: self.pose_only.cast(),
            tag: self.tag,
            label: self.label,
        }
    }

    /// The guidance branch: poses kept, images and label dropped.
    pub fn unconditional(&self) -> Self {
        Self {
            tokens: self.pose_only.clone(),
            pose_only: self.pose_only.clone(),
            tag: CondTag::Uncond,
            label: None,
        }
    }
}

/// Encode the visible views (and the poses of all views) into standardized
/// condition tokens.
pub fn encode_condition<F: Real>(
    rae: &Rae<F>,
    images: &[Image],
    cameras: &[Camera],
    visibility: &[bool],
    label: Option<usize>,
) -> Result<ConditionTokens<F>> {
    if visibility.len() > cameras.len() {
        return Err(Error::validation(format!(
            "{} visibility flags for {} cameras",
            visibility.len(),
            cameras.len()
        )));
    }
    let mut vis = visibility.to_vec();
    vis.resize(cameras.len(), false);
    let visible = vis.iter().filter(|&&v| v).count();
    let tokens = rae.encode(images, cameras, &vis, LatentMode::Standardized)?.z;
    let pose_only = if visible == 0 {
        tokens.clone()
    } else {
        rae.encode_poses(cameras, LatentMode::Standardized)?.z
    };
    Ok(ConditionTokens {
        tokens,
        pose_only,
        tag: CondTag::from_visible(visible),
        label,
    })
}

#[derive(Clone, Debug)]
struct DitBlock {
    attn: Attention,
    mlp: SwiGlu,
    ada: Linear,
    width: usize,
}

impl DitBlock {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, cond: usize, width: usize, heads: usize, ratio: usize, rng: &mut impl Rng) -> Self {
        let std = 0.02;
        let attn = Attention::new(store, &format!("{name}.attn"), width, heads, std, rng);
        let mlp = SwiGlu::new(store, &format!("{name}.mlp"), width, width * ratio, std, rng);
        let ada = Linear::new(store, &format!("{name}.ada"), cond, 6 * width, true, Some(0.0), rng);
        Self { attn, mlp, ada, width }
    }

    fn forward<F: Real>(&self, g: &mut Graph<F>, x: Var, c: Var) -> Var {
        let mods = chunks(g, &self.ada, c, 6, self.width);
        let h = modulate(g, x, mods[0], mods[1]);
        let h = self.attn.forward(g, h, None);
        let h = g.mul_bcast(h, mods[2]);
        let x = g.add(x, h);
        let h = modulate(g, x, mods[3], mods[4]);
        let h = self.mlp.forward(g, h);
        let h = g.mul_bcast(h, mods[5]);
        g.add(x, h)
    }
}

/// Project `c: [1, k]` and split into `n` vectors of length `w`.
fn chunks<F: Real>(g: &mut Graph<F>, lin: &Linear, c: Var, n: usize, w: usize) -> Vec<Var> {
    let m = lin.forward(g, c);
    let m = g.reshape(m, &[n, w]);
    (0..n)
        .map(|i| {
            let r = g.narrow(m, i, 1);
            g.reshape(r, &[w])
        })
        .collect()
}

/// `rms(x) · (1 + scale) + shift`
fn modulate<F: Real>(g: &mut Graph<F>, x: Var, shift: Var, scale: Var) -> Var {
    let h = g.rms_norm(x, nn::LN_EPS);
    let s = g.add_scalar(scale, F::one());
    let h = g.mul_bcast(h, s);
    g.add_bcast(h, shift)
}

#[derive(Clone, Debug)]
struct DitNet {
    cond_in: Linear,
    x_in: Linear,
    pos: ParamId,
    type_cond: ParamId,
    type_x: ParamId,
    t_fc1: Linear,
    t_fc2: Linear,
    blocks: Vec<DitBlock>,
    head_in: Linear,
    head: Vec<DitBlock>,
    final_ada: Linear,
    final_out: Linear,
    label: Option<ParamId>,
}

impl DitNet {
    fn build<F: Real>(cfg: &DitConfig, m: usize, d: usize, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Self {
        let w = cfg.width;
        let hw = cfg.head_width;
        let cond_in = Linear::new(store, "dit.cond_in", d, w, true, None, rng);
        let x_in = Linear::new(store, "dit.x_in", d, w, true, None, rng);
        let pos = store.normal("dit.pos", &[m, w], 0.02, rng);
        let type_cond = store.normal("dit.type_cond", &[w], 0.02, rng);
        let type_x = store.normal("dit.type_x", &[w], 0.02, rng);
        let t_fc1 = Linear::new(store, "dit.t_fc1", w, w, true, None, rng);
        let t_fc2 = Linear::new(store, "dit.t_fc2", w, w, true, None, rng);
        let blocks = (0..cfg.depth)
            .map(|i| DitBlock::new(store, &format!("dit.block.{i}"), w, w, cfg.heads, cfg.mlp_ratio, rng))
            .collect();
        let head_in = Linear::new(store, "dit.head_in", w, hw, true, None, rng);
        let head = (0..cfg.head_depth)
            .map(|i| DitBlock::new(store, &format!("dit.head.{i}"), w, hw, cfg.head_heads, cfg.mlp_ratio, rng))
            .collect();
        let final_ada = Linear::new(store, "dit.final_ada", w, 2 * hw, true, Some(0.0), rng);
        let final_out = Linear::new(store, "dit.final_out", hw, d, true, Some(0.0), rng);
        // kept last so that dropping it leaves every other id valid
        let label = (cfg.classes > 0).then(|| store.normal("dit.label", &[cfg.classes + 1, w], 0.02, rng));
        Self {
            cond_in,
            x_in,
            pos,
            type_cond,
            type_x,
            t_fc1,
            t_fc2,
            blocks,
            head_in,
            head,
            final_ada,
            final_out,
            label,
        }
    }
}

pub struct Dit<F: Real = f32> {
    pub cfg: DitConfig,
    /// Latent token count.
    pub m: usize,
    /// Latent width.
    pub d: usize,
    pub params: ParamStore<F>,
    /// Frozen Fourier frequencies, `width / 2` of them.
    pub fourier: Vec<f64>,
    net: DitNet,
}

impl<F: Real> Clone for Dit<F> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            m: self.m,
            d: self.d,
            params: self.params.clone(),
            fourier: self.fourier.clone(),
            net: self.net.clone(),
        }
    }
}

impl<F: Real> Dit<F> {
    pub fn new(cfg: DitConfig, m: usize, d: usize) -> Result<Self> {
        cfg.validate()?;
        if m == 0 || d == 0 {
            return Err(Error::config("latent shape must be positive"));
        }
        let mut rng = seed::rng(cfg.init_seed, &[stream::INIT, 1]);
        let fourier = (0..cfg.width / 2)
            .map(|_| (cfg.fourier_std * rng.sample::<f64, _>(StandardNormal)) as f32 as f64)
            .collect();
        let mut params = ParamStore::new();
        let net = DitNet::build(&cfg, m, d, &mut params, &mut rng);
        Ok(Self {
            cfg,
            m,
            d,
            params,
            fourier,
            net,
        })
    }

    pub fn cast<G: Real>(&self) -> Dit<G> {
        Dit {
            cfg: self.cfg.clone(),
            m: self.m,
            d: self.d,
            params: self.params.cast(),
            fourier: self.fourier.clone(),
            net: self.net.clone(),
        }
    }

    pub fn has_label_table(&self) -> bool {
        self.net.label.is_some()
    }

    /// Remove the class-label table. Returns whether one was present.
    pub fn drop_label_table(&mut self) -> bool {
        if self.net.label.take().is_none() {
            return false;
        }
        self.params.remove_prefix("dit.label");
        self.cfg.classes = 0;
        true
    }

    fn shift(&self, t: f64) -> Result<f64> {
        timestep_shift(t, self.m, self.d, self.cfg.base_dim)
    }

    fn fourier_features(&self, t: f64) -> Tensor<F> {
        let tau = std::f64::consts::TAU;
        let mut v: Vec<F> = self.fourier.iter().map(|&f| F::c((tau * f * t).sin())).collect();
        v.extend(self.fourier.iter().map(|&f| F::c((tau * f * t).cos())));
        Tensor::from_vec(&[1, v.len()], v).expect("fourier length")
    }

    fn check_tokens(&self, t: &Tensor<F>, what: &str) -> Result<()> {
        if t.shape() != [self.m, self.d] {
            return Err(Error::validation(format!(
                "{what} shaped {:?}, expected [{}, {}]",
                t.shape(),
                self.m,
                self.d
            )));
        }
        Ok(())
    }

    /// Modulation vector `[1, width]` from the (shifted) time and label.
    fn conditioning(&self, g: &mut Graph<F>, t: f64, label: Option<usize>) -> Result<Var> {
        let f = g.constant(self.fourier_features(t));
        let h = self.net.t_fc1.forward(g, f);
        let h = g.silu(h);
        let mut c = self.net.t_fc2.forward(g, h);
        if let Some(table) = self.net.label {
            let classes = self.cfg.classes;
            let row = match label {
                Some(l) if l < classes => l,
                Some(l) => return Err(Error::validation(format!("label {l} outside {classes} classes"))),
                None => classes,
            };
            let w = self.cfg.width;
            let tv = g.param(table);
            let e = g.gather(tv, Rc::new((row * w..(row + 1) * w).collect()), &[1, w]);
            c = g.add(c, e);
        }
        Ok(g.silu(c))
    }

    /// Velocity `[m, d]` for noisy latents `zt` at noise level `t` (already
    /// shifted), conditioned on `cond: [m, d]`.
    pub fn velocity_graph(&self, g: &mut Graph<F>, zt: Var, t: f64, cond: Var, label: Option<usize>) -> Result<Var> {
        check_unit(t)?;
        for (v, what) in [(zt, "noisy latents"), (cond, "condition tokens")] {
            if g.shape(v) != [self.m, self.d] {
                return Err(Error::validation(format!("{what} shaped {:?}", g.shape(v))));
            }
        }
        let n = &self.net;
        let c = self.conditioning(g, t, label)?;
        let pos = g.param(n.pos);
        let ct = n.cond_in.forward(g, cond);
        let ct = g.add(ct, pos);
        let ty = g.param(n.type_cond);
        let ct = g.add_bcast(ct, ty);
        let xt = n.x_in.forward(g, zt);
        let xt = g.add(xt, pos);
        let ty = g.param(n.type_x);
        let xt = g.add_bcast(xt, ty);
        let mut x = g.concat(&[ct, xt]);
        for b in &n.blocks {
            x = b.forward(g, x, c);
        }
        x = n.head_in.forward(g, x);
        for b in &n.head {
            x = b.forward(g, x, c);
        }
        let mods = chunks(g, &n.final_ada, c, 2, self.cfg.head_width);
        let x = modulate(g, x, mods[0], mods[1]);
        let out = n.final_out.forward(g, x);
        Ok(g.narrow(out, self.m, self.m))
    }

    pub fn predict_velocity(&self, zt: &Tensor<F>, t: f64, cond: &ConditionTokens<F>) -> Result<Tensor<F>> {
        self.check_tokens(zt, "noisy latents")?;
        self.check_tokens(&cond.tokens, "condition tokens")?;
        let mut g = Graph::frozen(&self.params);
        let z = g.constant(zt.clone());
        let c = g.constant(cond.tokens.clone());
        let v = self.velocity_graph(&mut g, z, t, c, cond.label)?;
        Ok(g.value(v).clone())
    }

    /// Mean squared velocity error at a random shifted time, as a graph node.
    pub fn fm_loss_graph(&self, g: &mut Graph<F>, z0: &Tensor<F>, cond: &ConditionTokens<F>, seed: u64) -> Result<Var> {
        self.check_tokens(z0, "clean latents")?;
        self.check_tokens(&cond.tokens, "condition tokens")?;
        let mut rng = seed::rng(seed, &[stream::NOISE]);
        let t = self.shift(rng.random::<f64>())?;
        let eps = Tensor::from_fn(z0.shape(), |_| F::c(rng.sample::<f64, _>(StandardNormal)));
        let zt = fm_interpolate(z0, &eps, t)?;
        let target: Vec<F> = eps.data().iter().zip(z0.data()).map(|(&e, &z)| e - z).collect();
        let target = g.constant(Tensor::from_vec(z0.shape(), target)?);
        let zt = g.constant(zt);
        let c = g.constant(cond.tokens.clone());
        let v = self.velocity_graph(g, zt, t, c, cond.label)?;
        Ok(nn::mse(g, v, target))
    }

    pub fn fm_loss(&self, z0: &Tensor<F>, cond: &ConditionTokens<F>, seed: u64) -> Result<f64> {
        let mut g = Graph::frozen(&self.params);
        let l = self.fm_loss_graph(&mut g, z0, cond, seed)?;
        Ok(g.value(l).item().f64())
    }

    /// Shifted Euler grid from 1 down to 0.
    pub fn schedule(&self, steps: usize) -> Result<Vec<f64>> {
        if steps == 0 {
            return Err(Error::validation("sampling needs at least one step"));
        }
        (0..=steps).map(|i| self.shift(1.0 - i as f64 / steps as f64)).collect()
    }

    /// Euler integration of the probability-flow ODE from pure noise with
    /// classifier-free guidance against the pose-only branch.
    pub fn sample(&self, cond: &ConditionTokens<F>, steps: usize, cfg_scale: f64, seed: u64) -> Result<LatentTokens<F>> {
        let grid = self.schedule(steps)?;
        self.check_tokens(&cond.tokens, "condition tokens")?;
        let mut rng = seed::rng(seed, &[stream::SAMPLE]);
        let mut z = Tensor::from_fn(&[self.m, self.d], |_| F::c(rng.sample::<f64, _>(StandardNormal)));
        let unc = cond.unconditional();
        let guided = cfg_scale != 1.0 && unc != *cond;
        let w = F::c(cfg_scale);
        for pair in grid.windows(2) {
            let (t, dt) = (pair[0], F::c(pair[0] - pair[1]));
            let vc = self.predict_velocity(&z, t, cond)?;
            let v = if guided {
                let vu = self.predict_velocity(&z, t, &unc)?;
                let data = vu.data().iter().zip(vc.data()).map(|(&u, &c)| u + w * (c - u)).collect();
                Tensor::from_vec(vc.shape(), data)?
            } else {
                vc
            };
            for (x, &v) in z.data_mut().iter_mut().zip(v.data()) {
                *x -= dt * v;
            }
        }
        if !z.is_finite() {
            return Err(Error::numeric("sampler diverged"));
        }
        Ok(LatentTokens {
            z,
            standardized: true,
            provenance: Provenance::Sampled,
        })
    }
}

impl Dit<f32> {
    pub fn save_into(&self, ar: &mut Archive, prefix: &str, params: &ParamStore<f32>) -> Result<()> {
        ar.push(format!("{prefix}format"), Array::text(CKPT_FORMAT));
        let cfg = toml::to_string(&self.cfg).map_err(|e| Error::config(e.to_string()))?;
        ar.push(format!("{prefix}config"), Array::text(&cfg));
        ar.push(format!("{prefix}latent"), Array::text(&format!("{} {}", self.m, self.d)));
        ar.push(
            format!("{prefix}fourier"),
            Array::F32 {
                shape: vec![self.fourier.len()],
                data: self.fourier.iter().map(|&x| x as f32).collect(),
            },
        );
        params.save_into(ar, &format!("{prefix}param/"));
        Ok(())
    }

    /// Rebuild from an archive written by [`Dit::save_into`], taking the
    /// parameters stored under `{prefix}{param_dir}/`.
    pub fn load_from(ar: &Archive, prefix: &str, param_dir: &str) -> Result<Self> {
        let fmt = ar.require(&format!("{prefix}format"))?.as_text()?;
        if fmt != CKPT_FORMAT {
            return Err(Error::State(format!("unsupported diffusion checkpoint {fmt:?}")));
        }
        let cfg: DitConfig = toml::from_str(&ar.require(&format!("{prefix}config"))?.as_text()?)
            .map_err(|e| Error::config(e.to_string()))?;
        let lat = ar.require(&format!("{prefix}latent"))?.as_text()?;
        let dims: Vec<usize> = lat.split_whitespace().filter_map(|s| s.parse().ok()).collect();
        if dims.len() != 2 {
            return Err(Error::State(format!("bad latent shape {lat:?}")));
        }
        let mut dit = Self::new(cfg, dims[0], dims[1])?;
        let fourier = ar.require(&format!("{prefix}fourier"))?.to_tensor()?;
        if fourier.numel() != dit.fourier.len() {
            return Err(Error::State("Fourier table has the wrong length".into()));
        }
        dit.fourier = fourier.data().iter().map(|&x| x as f64).collect();
        dit.params.load_from(&ParamStore::from_archive(ar, &format!("{prefix}{param_dir}/"))?)?;
        Ok(dit)
    }
}

#[cfg(test)]
mod tests {
    use super::*;


    fn randomize<F: Real>(dit: &mut Dit<F>, seed: u64) {
        let mut rng = seed::rng(seed, &[99]);
        for t in dit.params.tensors_mut() {
            for x in t.data_mut() {
                *x += F::c(0.2 * rng.sample::<f64, _>(StandardNormal));
            }
        }
    }

    fn cond<F: Real>(m: usize, d: usize, seed: u64, label: Option<usize>) -> ConditionTokens<F> {
        let mut rng = seed::rng(seed, &[5]);
        let mut r = || Tensor::from_fn(&[m, d], |_| F::c(rng.sample::<f64, _>(StandardNormal)));
        ConditionTokens {
            tokens: r(),
            pose_only: r(),
            tag: CondTag::SingleView,
            label,
        }
    }

    #[test]
    fn shift_examples() {
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(timestep_shift(t, 64, 64, 4096.0).unwrap(), t);
        }
        assert_eq!(timestep_shift(0.0, 1024, 768, 4096.0).unwrap(), 0.0);
        assert_eq!(timestep_shift(1.0, 1024, 768, 4096.0).unwrap(), 1.0);
        let v = timestep_shift(0.5, 1024, 768, 4096.0).unwrap();
        assert!((v - 0.932_688_971_4).abs() < 1e-9, "{v}");
        assert!(matches!(timestep_shift(1.5, 4, 4, 1.0), Err(Error::Validation(_))));
        assert!(matches!(timestep_unshift(-0.1, 4, 4, 1.0), Err(Error::Validation(_))));
    }

    #[test]
    fn interpolation_examples() {
        let z0 = Tensor::<f64>::zeros(&[2, 3]);
        let e = Tensor::full(&[2, 3], 2.0);
        assert_eq!(fm_interpolate(&z0, &e, 0.5).unwrap().data(), &[1.0; 6]);
        assert_eq!(fm_interpolate(&z0, &e, 0.0).unwrap(), z0);
        assert_eq!(fm_interpolate(&z0, &e, 1.0).unwrap(), e);
        assert!(fm_interpolate(&z0, &Tensor::zeros(&[3, 2]), 0.5).is_err());
    }

    #[test]
    fn presets_validate() {
        for s in ["S", "B", "XL"] {
            let c = DitConfig::preset(s).unwrap();
            c.validate().unwrap();
            assert_eq!(c.head_width, 2048);
        }
        assert!(DitConfig::preset("M").is_err());
    }

    #[test]
    fn zero_init_predicts_zero() {
        let dit = Dit::<f64>::new(DitConfig::tiny(), 3, 4).unwrap();
        let c = cond(3, 4, 1, Some(0));
        let v = dit.predict_velocity(&c.tokens, 0.4, &c).unwrap();
        assert_eq!(v.shape(), &[3, 4]);
        assert!(v.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn velocity_is_deterministic_and_label_sensitive() {
        let mut dit = Dit::<f64>::new(DitConfig::tiny(), 3, 4).unwrap();
        randomize(&mut dit, 2);
        let c = cond(3, 4, 1, Some(1));
        let z = cond::<f64>(3, 4, 7, None).tokens;
        let a = dit.predict_velocity(&z, 0.4, &c).unwrap();
        assert_eq!(a, dit.predict_velocity(&z, 0.4, &c).unwrap());
        let other = ConditionTokens { label: Some(2), ..c.clone() };
        assert_ne!(a, dit.predict_velocity(&z, 0.4, &other).unwrap());
        let bad = ConditionTokens { label: Some(3), ..c };
        assert!(dit.predict_velocity(&z, 0.4, &bad).is_err());
        assert!(dit.predict_velocity(&Tensor::zeros(&[2, 4]), 0.4, &other).is_err());
    }

    #[test]
    fn zero_model_loss_matches_expectation() {
        // v = 0 gives E[(ε − Z0)²] = mean(Z0²) + 1
        let dit = Dit::<f64>::new(DitConfig::tiny(), 8, 16).unwrap();
        let c = cond(8, 16, 1, None);
        let z0 = Tensor::full(&[8, 16], 0.5);
        let n = 400;
        let avg: f64 = (0..n).map(|s| dit.fm_loss(&z0, &c, s).unwrap()).sum::<f64>() / n as f64;
        assert!((avg - 1.25).abs() < 0.03, "{avg}");
        assert_eq!(dit.fm_loss(&z0, &c, 3).unwrap(), dit.fm_loss(&z0, &c, 3).unwrap());
    }

    #[test]
    fn single_step_sampler_is_one_euler_step() {
        let mut dit = Dit::<f64>::new(DitConfig::tiny(), 3, 4).unwrap();
        randomize(&mut dit, 3);
        let c = cond(3, 4, 1, Some(0));
        let out = dit.sample(&c, 1, 1.0, 11).unwrap();
        let mut rng = seed::rng(11, &[stream::SAMPLE]);
        let eps = Tensor::from_fn(&[3, 4], |_| rng.sample::<f64, _>(StandardNormal));
        let v = dit.predict_velocity(&eps, 1.0, &c).unwrap();
        let expect: Vec<f64> = eps.data().iter().zip(v.data()).map(|(e, v)| e - v).collect();
        assert_eq!(out.z.data(), &expect[..]);
        assert_eq!(out.provenance, Provenance::Sampled);
        assert!(matches!(dit.sample(&c, 0, 1.0, 0), Err(Error::Validation(_))));
    }

    #[test]
    fn guidance_scale_one_and_uncond_are_exact() {
        let mut dit = Dit::<f64>::new(DitConfig::tiny(), 3, 4).unwrap();
        randomize(&mut dit, 4);
        let c = cond(3, 4, 1, Some(2));
        let a = dit.sample(&c, 4, 1.0, 5).unwrap();
        // conditional-only integration by hand
        let grid = dit.schedule(4).unwrap();
        let mut rng = seed::rng(5, &[stream::SAMPLE]);
        let mut z = Tensor::from_fn(&[3, 4], |_| rng.sample::<f64, _>(StandardNormal));
        for p in grid.windows(2) {
            let v = dit.predict_velocity(&z, p[0], &c).unwrap();
            for (x, v) in z.data_mut().iter_mut().zip(v.data()) {
                *x -= (p[0] - p[1]) * v;
            }
        }
        assert_eq!(a.z, z);
        let u = c.unconditional();
        assert_eq!(dit.sample(&u, 4, 2.0, 5).unwrap(), dit.sample(&u, 4, 1.0, 5).unwrap());
        assert_ne!(dit.sample(&c, 4, 2.0, 5).unwrap(), a);
    }

    #[test]
    fn label_table_removal() {
        let mut dit = Dit::<f32>::new(DitConfig::tiny(), 3, 4).unwrap();
        let n = dit.params.len();
        assert!(dit.drop_label_table());
        assert!(!dit.drop_label_table());
        assert_eq!(dit.params.len(), n - 1);
        assert!(dit.params.iter().all(|(_, name, _)| !name.starts_with("dit.label")));
        let c = cond(3, 4, 1, Some(1));
        dit.predict_velocity(&c.tokens, 0.5, &c).unwrap();
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut dit = Dit::<f32>::new(DitConfig::tiny(), 3, 4).unwrap();
        randomize(&mut dit, 6);
        let mut ar = Archive::new();
        dit.save_into(&mut ar, "dit/", &dit.params).unwrap();
        let back = Dit::load_from(&Archive::decode(&ar.encode().unwrap()).unwrap(), "dit/", "param").unwrap();
        assert_eq!(back.params.fingerprint(), dit.params.fingerprint());
        assert_eq!(back.fourier, dit.fourier);
    }
}
