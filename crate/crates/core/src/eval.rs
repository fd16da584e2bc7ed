//! Metrics, finite-difference gradient checks and the novel-view benchmark.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datapipe::{make_sample, MultiViewSample};
use crate::autograd::{Graph, Var};
use crate::dit::{encode_condition, CondTag, ConditionTokens, Dit, DitConfig};
use crate::error::{Error, Result};
use crate::geometry::{ate, umeyama_align, Camera, Mat3, Vec3};
use crate::image::Image;
use crate::params::ParamStore;
use crate::rae::{hinge_losses, loss_graph, FrozenEncoder, LatentMode, PatchDiscriminator, PmapTarget, Rae, RaeConfig};
use crate::scenegen::{generate_scene, SceneConfig, SceneRecord};
use crate::tensor::Tensor;
use crate::seed;

pub const PSNR_CAP: f64 = 99.0;

/// `10 log10(peak² / MSE)`, capped for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    psnr_with(a, b, 1.0, PSNR_CAP)
}

pub fn psnr_with(a: &Image, b: &Image, peak: f64, cap: f64) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::validation(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    let mse = mse(a, b);
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(cap))
}

pub fn mse(a: &Image, b: &Image) -> f64 {
    let s: f64 = a.data.iter().zip(&b.data).map(|(&x, &y)| ((x - y) as f64).powi(2)).sum();
    s / a.data.len().max(1) as f64
}

const FRECHET_EPS: f64 = 1e-6;

fn moments(rows: &[f64], k: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = rows.len() / k;
    let mut mu = vec![0.0; k];
    for r in rows.chunks(k) {
        mu.iter_mut().zip(r).for_each(|(m, &x)| *m += x / n as f64);
    }
    let mut cov = DMatrix::zeros(k, k);
    for r in rows.chunks(k) {
        let c = DMatrix::from_iterator(k, 1, r.iter().zip(&mu).map(|(x, m)| x - m));
        cov += &c * c.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    for i in 0..k {
        cov[(i, i)] += FRECHET_EPS;
    }
    (mu, cov)
}

fn sym_eigen(m: &DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let s = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(s);
    if let Some(&bad) = e.eigenvalues.iter().find(|&&l| l < -FRECHET_EPS) {
        return Err(Error::numeric(format!("covariance eigenvalue {bad} is negative")));
    }
    Ok(e)
}

/// Fréchet distance between Gaussians fitted to two feature sets of
/// row-major `[n, k]` rows.
pub fn frechet_feature_distance(a: &[f64], b: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::validation("feature width must be positive"));
    }
    if a.is_empty() || b.is_empty() || a.len() % k != 0 || b.len() % k != 0 {
        return Err(Error::validation(format!("feature sets are not [n, {k}] with n > 0")));
    }
    let (ma, ca) = moments(a, k);
    let (mb, cb) = moments(b, k);
    let ea = sym_eigen(&ca)?;
    let sqrt_l = DMatrix::from_diagonal(&ea.eigenvalues.map(|l| l.max(0.0).sqrt()));
    let ca_half = &ea.eigenvectors * sqrt_l * ea.eigenvectors.transpose();
    let inner = &ca_half * &cb * &ca_half;
    let tr_sqrt: f64 = sym_eigen(&inner)?.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    let dmu: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((dmu + ca.trace() + cb.trace() - 2.0 * tr_sqrt).max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Coordinates to probe; all of them when `None`.
    pub samples: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-5,
            samples: Some(256),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|a − n| / (|a| + |n| + 1e-12)` over the probed coordinates.
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// Compare the analytic gradient returned by `f` at `x` against central
/// differences on sampled coordinates.
pub fn finite_diff_check(
    mut f: impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
    x: &[f64],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let (l0, grad) = f(x)?;
    if !l0.is_finite() {
        return Err(Error::numeric("loss is not finite"));
    }
    if grad.len() != x.len() {
        return Err(Error::validation(format!("gradient has {} entries for {} inputs", grad.len(), x.len())));
    }
    let coords: Vec<usize> = match cfg.samples {
        Some(s) if s < x.len() => {
            let mut rng = seed::rng(cfg.seed, &[seed::stream::EVAL]);
            let mut c = index::sample(&mut rng, x.len(), s).into_vec();
            c.sort_unstable();
            c
        }
        _ => (0..x.len()).collect(),
    };
    let mut rep = GradCheckReport {
        checked: coords.len(),
        ..Default::default()
    };
    let mut xp = x.to_vec();
    for i in coords {
        xp[i] = x[i] + cfg.h;
        let lp = f(&xp)?.0;
        xp[i] = x[i] - cfg.h;
        let lm = f(&xp)?.0;
        xp[i] = x[i];
        if !lp.is_finite() || !lm.is_finite() {
            return Err(Error::numeric(format!("loss is not finite around coordinate {i}")));
        }
        let n = (lp - lm) / (2.0 * cfg.h);
        let a = grad[i];
        let rel = (a - n).abs() / (a.abs() + n.abs() + 1e-12);
        if rel > rep.max_rel_err {
            rep = GradCheckReport {
                max_rel_err: rel,
                worst_index: i,
                analytic: a,
                numeric: n,
                ..rep
            };
        }
    }
    Ok(rep)
}

fn flatten(store: &ParamStore<f64>) -> Vec<f64> {
    store.tensors().iter().flat_map(|t| t.data().iter().copied()).collect()
}

fn unflatten(store: &mut ParamStore<f64>, x: &[f64]) {
    let mut off = 0;
    for t in store.tensors_mut() {
        let n = t.numel();
        t.data_mut().copy_from_slice(&x[off..off + n]);
        off += n;
    }
}

fn loss_and_grads(store: &ParamStore<f64>, f: impl Fn(&mut Graph<f64>) -> Result<Var>) -> Result<(f64, Vec<f64>)> {
    let mut g = Graph::new(store);
    let l = f(&mut g)?;
    let loss = g.value(l).item();
    let grads = g.backward(l).into_param_grads(store);
    Ok((loss, grads.iter().flat_map(|t| t.data().iter().copied()).collect()))
}

/// Move the weights off their initialization scale so that no probed
/// gradient is vanishingly small.
fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let mut rng = seed::rng(seed, &[seed::stream::EVAL, 1]);
    for t in store.tensors_mut() {
        t.data_mut().iter_mut().for_each(|x| *x += 0.2 * rng.sample::<f64, _>(StandardNormal));
    }
}

fn to_f64_var(g: &mut Graph<f64>, img: &Image) -> Var {
    let t = Tensor::from_vec(&[img.height, img.width, img.channels], img.data.iter().map(|&x| x as f64).collect());
    g.constant(t.expect("image shape"))
}

/// Gradient check of the full autoencoder objective (pixel, perceptual,
/// point-map and adversarial generator terms) on the tiny configuration.
pub fn rae_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let mut rae = Rae::<f64>::with_default_encoder(RaeConfig::tiny())?;
    jitter(&mut rae.params, cfg.seed);
    let rec = generate_scene(cfg.seed, 0, 3, 20.0, &SceneConfig::default())?;
    let s = make_sample(&rec, 0, &[0, 1, 2], 28, 28)?;
    let vis = [true, false, true];
    let views = rae.prepare(&s.images, &s.cameras, &vis)?;
    let targets = [1usize, 2];
    let cams: Vec<Camera> = targets.iter().map(|&i| s.cameras[i].clone()).collect();
    let disc = PatchDiscriminator::<f64>::new(8, cfg.seed);
    let w = rae.cfg.weights();
    let pm = s.pointmaps.clone().ok_or_else(|| Error::State("scene without point maps".into()))?;
    let valid = s.valid.clone().ok_or_else(|| Error::State("scene without validity".into()))?;
    let loss = |g: &mut Graph<f64>| -> Result<Var> {
        let z = rae.encode_graph(g, &views);
        let dec = rae.decode_graph(g, z, &cams, true)?;
        let dw = disc.constants(g);
        let mut total: Option<Var> = None;
        for (k, &i) in targets.iter().enumerate() {
            let gt = to_f64_var(g, &s.images[i]);
            let pt = to_f64_var(g, &pm[i]);
            let target = PmapTarget {
                pred: dec.points[k],
                conf_raw: dec.conf_raw[k],
                gt: pt,
                valid: valid[i].clone(),
            };
            let logits = disc.logits(g, dec.images[k], &dw);
            let adv = hinge_losses(g, None, logits).1;
            let t = loss_graph(g, dec.images[k], gt, Some(&target), Some(adv), 1.0, &w);
            total = Some(match total {
                Some(a) => g.add(a, t.total),
                None => t.total,
            });
        }
        Ok(total.expect("targets"))
    };
    let mut store = rae.params.clone();
    let x = flatten(&store);
    finite_diff_check(
        |x| {
            unflatten(&mut store, x);
            loss_and_grads(&store, &loss)
        },
        &x,
        cfg,
    )
}

/// Gradient check of the flow-matching loss on the tiny configuration with
/// perturbed (non-zero) initial weights.
pub fn dit_gradcheck(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (m, d) = (4, 8);
    let mut dit = Dit::<f64>::new(DitConfig::tiny(), m, d)?;
    jitter(&mut dit.params, cfg.seed);
    let mut rng = seed::rng(cfg.seed, &[seed::stream::EVAL, 2]);
    let mut normal = || rng.sample::<f64, _>(StandardNormal);
    let z0 = Tensor::from_fn(&[m, d], |_| normal());
    let tokens = Tensor::from_fn(&[m, d], |_| normal());
    let cond = ConditionTokens {
        pose_only: tokens.clone(),
        tokens,
        tag: CondTag::SingleView,
        label: Some(1),
    };
    let mut store = dit.params.clone();
    let x = flatten(&store);
    finite_diff_check(
        |x| {
            unflatten(&mut store, x);
            loss_and_grads(&store, |g| dit.fm_loss_graph(g, &z0, &cond, cfg.seed))
        },
        &x,
        cfg,
    )
}

/// Camera pose that maps a world-frame point map onto the pixel rays of a
/// camera with known intrinsics, by orthogonal iteration (alternating
/// Procrustes fits and line-of-sight projections) from `init`.
pub fn recover_pose(points: &Image, valid: Option<&[bool]>, intrinsics: &Camera, init: &Camera, iters: usize) -> Result<Camera> {
    let (w, h) = (intrinsics.width, intrinsics.height);
    if points.height != h || points.width != w || points.channels != 3 {
        return Err(Error::validation("point map does not match the camera"));
    }
    let mut world = Vec::new();
    let mut los = Vec::new();
    for v in 0..h {
        for u in 0..w {
            let i = v * w + u;
            if valid.is_some_and(|m| !m[i]) {
                continue;
            }
            let p = points.pixel(u, v);
            world.push(Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64));
            let d = Vec3::new(
                (u as f64 + 0.5 - intrinsics.cx) / intrinsics.fx,
                (v as f64 + 0.5 - intrinsics.cy) / intrinsics.fy,
                1.0,
            );
            los.push(d * d.transpose() / d.norm_squared());
        }
    }
    let n = world.len();
    if n < 3 {
        return Err(Error::Degenerate(format!("{n} usable points for pose recovery")));
    }
    let nf = n as f64;
    let mean_v = los.iter().fold(Mat3::zeros(), |a, v| a + v) / nf;
    let t_factor = (Mat3::identity() - mean_v)
        .try_inverse()
        .ok_or_else(|| Error::Degenerate("rays are degenerate".into()))?
        / nf;
    // world-to-camera rotation
    let mut r = init.rotation.transpose();
    for _ in 0..iters.max(1) {
        let t = t_factor * world.iter().zip(&los).fold(Vec3::zeros(), |a, (p, v)| a + (v - Mat3::identity()) * (r * p));
        let q: Vec<Vec3> = world.iter().zip(&los).map(|(p, v)| v * (r * p + t)).collect();
        r = umeyama_align(&world, &q)?.rotation;
    }
    let t = t_factor * world.iter().zip(&los).fold(Vec3::zeros(), |a, (p, v)| a + (v - Mat3::identity()) * (r * p));
    let rot = r.transpose();
    Ok(intrinsics.clone().with_pose(rot, -(rot * t)))
}

/// A predicted view: image, and optionally a world-frame point map.
pub struct GeneratedView {
    pub image: Image,
    pub points: Option<Image>,
}

/// Produces all views of a benchmark sample from its conditioning views.
pub trait ViewGenerator {
    fn generate(&self, sample: &MultiViewSample, cond: &[usize]) -> Result<Vec<GeneratedView>>;
}

/// Returns the ground truth, for harness checks.
pub struct IdentityGenerator;

impl ViewGenerator for IdentityGenerator {
    fn generate(&self, s: &MultiViewSample, _cond: &[usize]) -> Result<Vec<GeneratedView>> {
        Ok((0..s.n_views())
            .map(|i| GeneratedView {
                image: s.images[i].clone(),
                points: s.pointmaps.as_ref().map(|p| p[i].clone()),
            })
            .collect())
    }
}

/// Autoencoder round trip with every view visible.
pub struct OracleGenerator<'a> {
    pub rae: &'a Rae<f32>,
}

impl ViewGenerator for OracleGenerator<'_> {
    fn generate(&self, s: &MultiViewSample, _cond: &[usize]) -> Result<Vec<GeneratedView>> {
        let z = self.rae.encode(&s.images, &s.cameras, &vec![true; s.n_views()], LatentMode::Raw)?;
        decode_all(self.rae, &z, &s.cameras)
    }
}

/// Diffusion sampling from the conditioning views, decoded by the
/// autoencoder.
pub struct DiffusionGenerator<'a> {
    pub rae: &'a Rae<f32>,
    pub dit: &'a Dit<f32>,
    pub steps: usize,
    pub cfg_scale: f64,
    pub seed: u64,
}

impl ViewGenerator for DiffusionGenerator<'_> {
    fn generate(&self, s: &MultiViewSample, cond: &[usize]) -> Result<Vec<GeneratedView>> {
        let mut vis = vec![false; s.n_views()];
        cond.iter().for_each(|&i| vis[i] = true);
        let c = encode_condition(self.rae, &s.images, &s.cameras, &vis, None)?;
        let seed = seed::derive(self.seed, &[s.scene_id as u64]);
        let z = self.dit.sample(&c, self.steps, self.cfg_scale, seed)?;
        decode_all(self.rae, &z, &s.cameras)
    }
}

fn decode_all(rae: &Rae<f32>, z: &crate::rae::LatentTokens<f32>, cams: &[Camera]) -> Result<Vec<GeneratedView>> {
    let imgs = rae.decode_images(z, cams)?;
    let pts = rae.decode_pointmaps(z, cams)?;
    Ok(imgs
        .into_iter()
        .zip(pts)
        .map(|(image, p)| GeneratedView {
            image,
            points: Some(p.points),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub views: usize,
    pub n_cond: usize,
    pub height: usize,
    pub width: usize,
    pub pose_iters: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            views: 16,
            n_cond: 1,
            height: 56,
            width: 56,
            pose_iters: 50,
        }
    }
}

/// Conditioning views: the first one, or an even spread over the
/// trajectory.
pub fn condition_views(n_views: usize, n_cond: usize) -> Result<Vec<usize>> {
    if n_cond == 0 || n_cond > n_views {
        return Err(Error::validation(format!("cannot condition on {n_cond} of {n_views} views")));
    }
    if n_cond == 1 {
        return Ok(vec![0]);
    }
    let mut v: Vec<usize> = (0..n_cond)
        .map(|i| ((i * (n_views - 1)) as f64 / (n_cond - 1) as f64).round() as usize)
        .collect();
    v.dedup();
    Ok(v)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneEval {
    pub scene: usize,
    pub views: usize,
    pub psnr: f64,
    pub ate_r: f64,
    pub ate_t: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub scenes: Vec<SceneEval>,
    pub psnr: f64,
    pub frechet: f64,
    pub ate_r: f64,
    pub ate_t: f64,
    pub skipped: usize,
    pub config: String,
}

pub const TSV_HEADER: &str = "scene\tviews\tpsnr_db\tate_r_deg\tate_t";

impl EvalReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("scenes = {}\nskipped = {}\n", self.scenes.len(), self.skipped));
        s.push_str(&format!("psnr_db = {:.6}\nfrechet = {:.6}\n", self.psnr, self.frechet));
        s.push_str(&format!("ate_r_deg = {:.6}\nate_t = {:.6}\n", self.ate_r, self.ate_t));
        s.push_str("\n[config]\n");
        s.push_str(&self.config);
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!("{TSV_HEADER}\n");
        for r in &self.scenes {
            s.push_str(&format!("{}\t{}\t{:.6}\t{:.6}\t{:.6}\n", r.scene, r.views, r.psnr, r.ate_r, r.ate_t));
        }
        s
    }
}

fn features(enc: &dyn FrozenEncoder, img: &Image, patch: usize, out: &mut Vec<f64>) -> Result<()> {
    out.extend(enc.embed(img, patch)?.into_iter().map(f64::from));
    Ok(())
}

/// Score generated non-conditioning views against ground truth: PSNR,
/// self-featured Fréchet distance and the trajectory error of poses
/// recovered from the generated point maps.
pub fn run_benchmark(
    generator: &dyn ViewGenerator,
    scenes: &[(usize, SceneRecord)],
    cfg: &BenchConfig,
    features_from: &dyn FrozenEncoder,
    patch: usize,
) -> Result<EvalReport> {
    let mut rows = Vec::new();
    let mut skipped = 0;
    let (mut fa, mut fb) = (Vec::new(), Vec::new());
    let mut poses_used = true;
    for (id, rec) in scenes {
        if rec.views.len() != cfg.views {
            log::warn!("scene {id} has {} views, expected {}; skipped", rec.views.len(), cfg.views);
            skipped += 1;
            continue;
        }
        let ids: Vec<usize> = (0..cfg.views).collect();
        let s = make_sample(rec, *id, &ids, cfg.height, cfg.width)?;
        let cond = condition_views(cfg.views, cfg.n_cond)?;
        let out = generator.generate(&s, &cond)?;
        if out.len() != s.n_views() {
            return Err(Error::validation("generator returned the wrong number of views"));
        }
        let scored: Vec<usize> = if cond.len() == cfg.views {
            ids.clone()
        } else {
            ids.iter().copied().filter(|i| !cond.contains(i)).collect()
        };
        let mut p = 0.0;
        for &i in &scored {
            p += psnr(&out[i].image, &s.images[i])?;
            features(features_from, &out[i].image, patch, &mut fa)?;
            features(features_from, &s.images[i], patch, &mut fb)?;
        }
        let (mut ate_r, mut ate_t) = (f64::NAN, f64::NAN);
        if scored.len() >= 3 && scored.iter().all(|&i| out[i].points.is_some()) {
            let init = &s.cameras[cond[0]];
            let mut est = Vec::new();
            for &i in &scored {
                let valid = s.valid.as_ref().map(|v| &v[i][..]);
                let pts = out[i].points.as_ref().expect("checked");
                est.push(recover_pose(pts, valid, &s.cameras[i], init, cfg.pose_iters)?);
            }
            let gt: Vec<Camera> = scored.iter().map(|&i| s.cameras[i].clone()).collect();
            (ate_r, ate_t) = ate(&est, &gt)?;
        } else {
            poses_used = false;
        }
        rows.push(SceneEval {
            scene: *id,
            views: scored.len(),
            psnr: p / scored.len() as f64,
            ate_r,
            ate_t,
        });
    }
    if rows.is_empty() {
        return Err(Error::validation("no benchmark scene has the expected view count"));
    }
    let n = rows.len() as f64;
    let mean = |f: fn(&SceneEval) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let k = features_from.width();
    let frechet = frechet_feature_distance(&fa, &fb, k)?;
    let config = toml::to_string(cfg).map_err(|e| Error::config(e.to_string()))?;
    Ok(EvalReport {
        psnr: mean(|r| r.psnr),
        frechet,
        ate_r: if poses_used { mean(|r| r.ate_r) } else { f64::NAN },
        ate_t: if poses_used { mean(|r| r.ate_t) } else { f64::NAN },
        scenes: rows,
        skipped,
        config,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;
    use crate::rae::DctEncoder;

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, &[0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(4, 4, &[0.6; 3]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-5);
        let z = Image::filled(4, 4, &[0.0; 3]);
        let o = Image::filled(4, 4, &[1.0; 3]);
        assert_eq!(psnr(&z, &o).unwrap(), 0.0);
        assert!(psnr(&a, &Image::filled(4, 5, &[0.5; 3])).is_err());
    }

    fn gaussian(n: usize, k: usize, scale: f64, shift: f64, seed: u64) -> Vec<f64> {
        let mut rng = seed::rng(seed, &[]);
        (0..n * k).map(|_| scale * rng.sample::<f64, _>(StandardNormal) + shift).collect()
    }

    #[test]
    fn frechet_closed_forms() {
        let a = gaussian(500, 3, 1.0, 0.0, 1);
        assert!(frechet_feature_distance(&a, &a, 3).unwrap().abs() < 1e-6);
        let b: Vec<f64> = a.iter().enumerate().map(|(i, x)| x + [1.0, -2.0, 0.5][i % 3]).collect();
        assert!((frechet_feature_distance(&a, &b, 3).unwrap() - 5.25).abs() < 1e-6);
        let x = gaussian(100_000, 1, 1.0, 0.0, 2);
        let y = gaussian(100_000, 1, 2.0, 0.0, 3);
        assert!((frechet_feature_distance(&x, &y, 1).unwrap() - 1.0).abs() < 0.05);
        let c = gaussian(300, 3, 1.5, 0.2, 4);
        let d1 = frechet_feature_distance(&a, &c, 3).unwrap();
        let d2 = frechet_feature_distance(&c, &a, 3).unwrap();
        assert!((d1 - d2).abs() < 1e-8);
        assert!(frechet_feature_distance(&a, &a, 0).is_err());
    }

    #[test]
    fn gradcheck_quadratic_and_mutant() {
        let quad = |x: &[f64]| Ok((x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.0 * v).collect()));
        let cfg = GradCheckConfig::default();
        assert!(finite_diff_check(quad, &[1.0; 5], &cfg).unwrap().max_rel_err < 1e-9);
        let broken = |x: &[f64]| Ok((x.iter().map(|v| v * v).sum(), x.iter().map(|v| 2.1 * v).collect()));
        assert!(finite_diff_check(broken, &[1.0; 5], &cfg).unwrap().max_rel_err > 1e-2);
        let nan = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        assert!(matches!(finite_diff_check(nan, &[1.0], &cfg), Err(Error::Numeric(_))));
    }

    #[test]
    fn module_gradients_match_finite_differences() {
        let cfg = GradCheckConfig::default();
        let r = rae_gradcheck(&cfg).unwrap();
        assert!(r.max_rel_err < 1e-4, "autoencoder {r:?}");
        let d = dit_gradcheck(&cfg).unwrap();
        assert!(d.max_rel_err < 1e-4, "diffusion {d:?}");
    }

    #[test]
    fn pose_recovery_is_exact_on_true_geometry() {
        let rec = generate_scene(3, 0, 16, 30.0, &SceneConfig::default()).unwrap();
        let s = make_sample(&rec, 0, &(0..16).collect::<Vec<_>>(), 56, 56).unwrap();
        let pm = s.pointmaps.as_ref().unwrap();
        let valid = s.valid.as_ref().unwrap();
        for i in [3, 9, 15] {
            let est = recover_pose(&pm[i], Some(&valid[i]), &s.cameras[i], &s.cameras[0], 100).unwrap();
            assert!((est.translation - s.cameras[i].translation).norm() < 1e-4);
            let d = est.rotation.transpose() * s.cameras[i].rotation;
            assert!(crate::geometry::rotation_angle(&d, &Mat3::identity()) < 1e-4);
        }
        let _ = axis_angle;
    }

    #[test]
    fn identity_generator_scores_perfectly() {
        let sc = SceneConfig::default();
        let scenes: Vec<_> = (0..2).map(|i| (i, generate_scene(5, i, 16, 30.0, &sc).unwrap())).collect();
        let mut short = scenes.clone();
        short.push((9, generate_scene(5, 9, 4, 30.0, &sc).unwrap()));
        let enc = DctEncoder::new(16, 14);
        let r = run_benchmark(&IdentityGenerator, &short, &BenchConfig::default(), &enc, 14).unwrap();
        assert_eq!(r.skipped, 1);
        assert_eq!(r.psnr, PSNR_CAP);
        assert!(r.frechet.abs() < 1e-6);
        assert!(r.ate_r < 1e-3 && r.ate_t < 1e-4, "{} {}", r.ate_r, r.ate_t);
        let mean = r.scenes.iter().map(|s| s.psnr).sum::<f64>() / r.scenes.len() as f64;
        assert!((mean - r.psnr).abs() < 1e-9);
        assert_eq!(r.to_tsv().lines().count(), 3);
        assert!(r.to_text().contains("n_cond = 1"));
    }

    #[test]
    fn condition_view_spreads() {
        assert_eq!(condition_views(16, 1).unwrap(), vec![0]);
        assert_eq!(condition_views(16, 2).unwrap(), vec![0, 15]);
        assert_eq!(condition_views(16, 6).unwrap(), vec![0, 3, 6, 9, 12, 15]);
        assert!(condition_views(16, 0).is_err());
    }
}
