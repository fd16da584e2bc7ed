//! Shape sampling under a token budget, dataset mixtures, view masking and
//! assembly of pose-normalized multi-view batches.

use std::path::Path;
use std::sync::mpsc::{sync_channel, Receiver};
use std::sync::Arc;
use std::thread;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize_poses_with_transform, Camera, PoseNormalization, Vec3};
use crate::image::Image;
use crate::scenegen::{list_scenes, read_scene, RenderedView, SceneRecord};
use crate::seed::{self, stream};

pub const PATCH: usize = 14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetConfig {
    pub pixel_min: usize,
    pub pixel_max: usize,
    /// Width over height.
    pub aspect_min: f64,
    pub aspect_max: f64,
    pub views_min: usize,
    pub views_max: usize,
    pub token_budget: usize,
    pub patch: usize,
}

impl Default for BudgetConfig {
    fn default() -> Self {
        Self {
            pixel_min: 2500,
            pixel_max: 6500,
            aspect_min: 0.7,
            aspect_max: 1.8,
            views_min: 2,
            views_max: 8,
            token_budget: 1024,
            patch: PATCH,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShapeSample {
    pub height: usize,
    pub width: usize,
    pub n_views: usize,
    pub batch_size: usize,
}

impl ShapeSample {
    pub fn tokens_per_view(&self, patch: usize) -> usize {
        (self.height / patch) * (self.width / patch)
    }
}

impl BudgetConfig {
    /// Every `(H, W)` on the patch grid inside the pixel and aspect bands.
    pub fn valid_shapes(&self) -> Vec<(usize, usize)> {
        let p = self.patch.max(1);
        let mut out = Vec::new();
        let mut h = p;
        while h * p <= self.pixel_max {
            let mut w = p;
            while h * w <= self.pixel_max {
                let a = w as f64 / h as f64;
                if h * w >= self.pixel_min && a >= self.aspect_min - 1e-12 && a <= self.aspect_max + 1e-12 {
                    out.push((h, w));
                }
                w += p;
            }
            h += p;
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 {
            return Err(Error::config("patch size must be positive"));
        }
        if self.views_min == 0 || self.views_min > self.views_max {
            return Err(Error::config("view range is empty"));
        }
        if self.pixel_min > self.pixel_max || !(self.aspect_min <= self.aspect_max) || self.aspect_min <= 0.0 {
            return Err(Error::config("pixel or aspect range is empty"));
        }
        if self.valid_shapes().is_empty() {
            return Err(Error::config(format!(
                "no {}-divisible shape has {}..={} pixels and aspect {}..={}",
                self.patch, self.pixel_min, self.pixel_max, self.aspect_min, self.aspect_max
            )));
        }
        Ok(())
    }
}

/// Draw a resolution, view count and the batch size that fits the token
/// budget. Aspect and pixel count are drawn uniformly, then snapped to the
/// nearest valid shape on the patch grid.
pub fn sample_shape(cfg: &BudgetConfig, seed: u64) -> Result<ShapeSample> {
    cfg.validate()?;
    let shapes = cfg.valid_shapes();
    let mut rng = seed::rng(seed, &[stream::SHAPE]);
    let aspect = rng.random_range(cfg.aspect_min..=cfg.aspect_max);
    let pixels = rng.random_range(cfg.pixel_min as f64..=cfg.pixel_max as f64);
    let n_views = rng.random_range(cfg.views_min..=cfg.views_max);
    let dist = |&(h, w): &(usize, usize)| {
        let da = ((w as f64 / h as f64) / aspect).ln();
        let dp = ((h * w) as f64 / pixels).ln();
        da * da + dp * dp
    };
    let (height, width) = *shapes
        .iter()
        .min_by(|a, b| dist(a).total_cmp(&dist(b)))
        .expect("validated non-empty");
    let shape = ShapeSample {
        height,
        width,
        n_views,
        batch_size: 1,
    };
    let per_step = n_views * shape.tokens_per_view(cfg.patch);
    Ok(ShapeSample {
        batch_size: (cfg.token_budget / per_step).max(1),
        ..shape
    })
}

/// Index drawn with probability proportional to its weight.
pub fn mixture_sample(weights: &[f64], seed: u64) -> Result<usize> {
    let mut rng = seed::rng(seed, &[stream::MIXTURE]);
    mixture_sample_with(weights, &mut rng)
}

pub fn mixture_sample_with(weights: &[f64], rng: &mut impl Rng) -> Result<usize> {
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::config("mixture weights must be finite and nonnegative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::config("mixture weights sum to zero"));
    }
    let mut x = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if x < w {
            return Ok(i);
        }
        x -= w;
    }
    Ok(weights.iter().rposition(|&w| w > 0.0).expect("positive weight"))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskPolicy {
    pub mask_probability: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub drop_all_probability: f64,
}

impl Default for MaskPolicy {
    fn default() -> Self {
        Self::rae()
    }
}

impl MaskPolicy {
    pub const fn none() -> Self {
        Self {
            mask_probability: 0.0,
            ratio_min: 0.0,
            ratio_max: 0.0,
            drop_all_probability: 0.0,
        }
    }

    /// Autoencoder stage.
    pub const fn rae() -> Self {
        Self {
            mask_probability: 0.1,
            ratio_min: 0.1,
            ratio_max: 0.6,
            drop_all_probability: 0.0,
        }
    }

    /// Multi-view diffusion stage: always mask, sometimes drop everything.
    pub const fn dit() -> Self {
        Self {
            mask_probability: 1.0,
            ratio_min: 0.6,
            ratio_max: 0.9,
            drop_all_probability: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = |x: f64| (0.0..=1.0).contains(&x);
        if !(p(self.mask_probability) && p(self.drop_all_probability) && p(self.ratio_min) && p(self.ratio_max)) {
            return Err(Error::config("mask probabilities and ratios must lie in [0, 1]"));
        }
        if self.ratio_min > self.ratio_max {
            return Err(Error::config("mask ratio range is empty"));
        }
        Ok(())
    }

    /// Visibility for `n` views. Outside drop-all, at least one view stays
    /// visible.
    pub fn draw(&self, n: usize, rng: &mut impl Rng) -> Vec<bool> {
        let mut vis = vec![true; n];
        if n == 0 {
            return vis;
        }
        // draw both coins every time so the stream layout is policy-independent
        let drop_all = rng.random::<f64>() < self.drop_all_probability;
        let masked = rng.random::<f64>() < self.mask_probability;
        let ratio = self.ratio_min + (self.ratio_max - self.ratio_min) * rng.random::<f64>();
        if drop_all {
            vis.iter_mut().for_each(|v| *v = false);
            return vis;
        }
        if !masked {
            return vis;
        }
        let k = mask_count(n, ratio, self.ratio_min, self.ratio_max);
        for i in sample_indices(rng, n, k) {
            vis[i] = false;
        }
        vis
    }
}

/// Number of views to hide: `round(ratio * n)`, kept inside the policy's
/// fraction band and inside `[1, n - 1]`.
pub fn mask_count(n: usize, ratio: f64, lo: f64, hi: f64) -> usize {
    if n < 2 {
        return 0;
    }
    let nf = n as f64;
    let band_lo = ((lo * nf - 1e-9).ceil() as usize).max(1);
    let band_hi = ((hi * nf + 1e-9).floor() as usize).min(n - 1);
    let k = (ratio * nf).round() as usize;
    if band_lo <= band_hi {
        k.clamp(band_lo, band_hi)
    } else {
        // the band holds no integer count; take the closest legal one
        k.clamp(1, n - 1)
    }
}

/// One scene sample: views resampled to a common shape, poses normalized to
/// the first view, point maps expressed in that same frame.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSample {
    pub images: Vec<Image>,
    pub pointmaps: Option<Vec<Image>>,
    pub valid: Option<Vec<Vec<bool>>>,
    pub cameras: Vec<Camera>,
    pub visibility: Vec<bool>,
    pub category: Option<usize>,
    pub scene_id: usize,
    /// Source view index for each entry.
    pub view_ids: Vec<usize>,
    pub normalization: PoseNormalization,
}

impl MultiViewSample {
    pub fn n_views(&self) -> usize {
        self.images.len()
    }

    pub fn visible_count(&self) -> usize {
        self.visibility.iter().filter(|&&v| v).count()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.images.len();
        if self.cameras.len() != n || self.visibility.len() != n || self.view_ids.len() != n {
            return Err(Error::validation("sample fields disagree on view count"));
        }
        let (h, w) = match self.images.first() {
            Some(i) => (i.height, i.width),
            None => return Ok(()),
        };
        for (i, c) in self.images.iter().zip(&self.cameras) {
            if i.height != h || i.width != w || c.height != h || c.width != w || i.channels != 3 {
                return Err(Error::validation("views in a sample must share one H x W x 3 shape"));
            }
        }
        if let (Some(p), Some(v)) = (&self.pointmaps, &self.valid) {
            if p.len() != n || v.len() != n {
                return Err(Error::validation("point maps disagree on view count"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewBatch {
    pub samples: Vec<MultiViewSample>,
}

/// Hide views according to `policy`.
pub fn apply_view_mask(batch: &MultiViewBatch, policy: &MaskPolicy, seed: u64) -> Result<MultiViewBatch> {
    policy.validate()?;
    let mut rng = seed::rng(seed, &[stream::MASK]);
    let mut out = batch.clone();
    for s in &mut out.samples {
        let drawn = policy.draw(s.n_views(), &mut rng);
        for (v, d) in s.visibility.iter_mut().zip(drawn) {
            *v = *v && d;
        }
    }
    Ok(out)
}

/// Largest centered crop with aspect `w/h` followed by resampling; the
/// camera intrinsics follow the same crop and scale.
pub fn crop_resize_view(view: &RenderedView, h: usize, w: usize) -> (Image, Image, Vec<bool>, Camera) {
    let (h0, w0) = (view.image.height, view.image.width);
    let target = w as f64 / h as f64;
    let (ch, cw) = if w0 as f64 / h0 as f64 > target {
        (h0, ((h0 as f64 * target).round() as usize).clamp(1, w0))
    } else {
        (((w0 as f64 / target).round() as usize).clamp(1, h0), w0)
    };
    let (v0, u0) = ((h0 - ch) / 2, (w0 - cw) / 2);
    let mut cam = view.camera.clone();
    cam.cx -= u0 as f64;
    cam.cy -= v0 as f64;
    cam.width = cw;
    cam.height = ch;
    let cam = cam.resized(w, h);
    let image = view.image.center_crop(ch, cw).resize_bilinear(h, w);
    let pointmap = view.pointmap.center_crop(ch, cw).resize_nearest(h, w);
    let valid_img = Image::from_vec(
        h0,
        w0,
        1,
        view.valid.iter().map(|&b| b as u8 as f32).collect(),
    )
    .expect("valid mask shape");
    let valid = valid_img
        .center_crop(ch, cw)
        .resize_nearest(h, w)
        .data
        .iter()
        .map(|&x| x > 0.5)
        .collect();
    (image, pointmap, valid, cam)
}

/// Build a normalized sample from chosen views of a scene record.
pub fn make_sample(rec: &SceneRecord, scene_id: usize, view_ids: &[usize], h: usize, w: usize) -> Result<MultiViewSample> {
    if view_ids.is_empty() {
        return Err(Error::validation("a sample needs at least one view"));
    }
    let mut images = Vec::new();
    let mut pmaps = Vec::new();
    let mut valids = Vec::new();
    let mut cams = Vec::new();
    for &i in view_ids {
        let v = rec
            .views
            .get(i)
            .ok_or_else(|| Error::validation(format!("scene {scene_id} has no view {i}")))?;
        let (img, pm, valid, cam) = crop_resize_view(v, h, w);
        images.push(img);
        pmaps.push(pm);
        valids.push(valid);
        cams.push(cam);
    }
    let (cameras, norm) = normalize_poses_with_transform(&cams)?;
    for (pm, valid) in pmaps.iter_mut().zip(&valids) {
        for (px, &ok) in pm.data.chunks_mut(3).zip(valid) {
            if ok {
                let q = norm.apply_point(&Vec3::new(px[0] as f64, px[1] as f64, px[2] as f64));
                px.copy_from_slice(&[q.x as f32, q.y as f32, q.z as f32]);
            } else {
                px.fill(0.0);
            }
        }
    }
    let n = view_ids.len();
    Ok(MultiViewSample {
        images,
        pointmaps: rec.has_pointmaps.then_some(pmaps),
        valid: rec.has_pointmaps.then_some(valids),
        cameras,
        visibility: vec![true; n],
        category: Some(rec.category),
        scene_id,
        view_ids: view_ids.to_vec(),
        normalization: norm,
    })
}

/// Views of one scene brought into the frame of an existing sample (used to
/// score views that were held out of training).
pub fn views_in_frame(
    rec: &SceneRecord,
    view_ids: &[usize],
    h: usize,
    w: usize,
    norm: &PoseNormalization,
) -> Result<Vec<(Image, Image, Vec<bool>, Camera)>> {
    view_ids
        .iter()
        .map(|&i| {
            let v = rec
                .views
                .get(i)
                .ok_or_else(|| Error::validation(format!("no view {i}")))?;
            let (img, mut pm, valid, cam) = crop_resize_view(v, h, w);
            for (px, &ok) in pm.data.chunks_mut(3).zip(&valid) {
                let q = if ok {
                    norm.apply_point(&Vec3::new(px[0] as f64, px[1] as f64, px[2] as f64))
                } else {
                    Vec3::zeros()
                };
                px.copy_from_slice(&[q.x as f32, q.y as f32, q.z as f32]);
            }
            Ok((img, pm, valid, norm.apply_camera(&cam)))
        })
        .collect()
}

/// Scenes held in memory, each optionally tagged with a source index for
/// mixture sampling.
#[derive(Clone, Debug, Default)]
pub struct Dataset {
    pub scenes: Vec<(usize, SceneRecord)>,
}

impl Dataset {
    pub fn load(root: &Path) -> Result<Self> {
        let ids = list_scenes(root)?;
        if ids.is_empty() {
            return Err(Error::validation(format!("no scenes under {}", root.display())));
        }
        let scenes = ids
            .into_iter()
            .map(|id| Ok((id, read_scene(root, id)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { scenes })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub budget: BudgetConfig,
    /// View indices never used as training views.
    pub holdout: Vec<usize>,
    /// Keep views in trajectory order (otherwise a random order).
    pub ordered: bool,
    /// Mixture weights over datasets; empty means one uniform source.
    pub mixture: Vec<f64>,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            budget: BudgetConfig::default(),
            holdout: Vec::new(),
            ordered: true,
            mixture: Vec::new(),
        }
    }
}

/// Deterministic batch source: batch `step` depends only on `(seed, step)`.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    pub sources: Vec<Arc<Dataset>>,
    pub cfg: SamplerConfig,
    pub seed: u64,
}

impl BatchSampler {
    pub fn new(data: Arc<Dataset>, cfg: SamplerConfig, seed: u64) -> Result<Self> {
        Self::with_sources(vec![data], cfg, seed)
    }

    pub fn with_sources(sources: Vec<Arc<Dataset>>, cfg: SamplerConfig, seed: u64) -> Result<Self> {
        cfg.budget.validate()?;
        if sources.is_empty() || sources.iter().any(|d| d.is_empty()) {
            return Err(Error::validation("every data source needs at least one scene"));
        }
        if !cfg.mixture.is_empty() && cfg.mixture.len() != sources.len() {
            return Err(Error::config("one mixture weight per data source"));
        }
        Ok(Self { sources, cfg, seed })
    }

    pub fn batch(&self, step: u64) -> Result<MultiViewBatch> {
        let step_seed = seed::derive(self.seed, &[stream::STEP, step]);
        let shape = sample_shape(&self.cfg.budget, step_seed)?;
        let mut rng = seed::rng(step_seed, &[stream::SCENE]);
        let mut samples = Vec::with_capacity(shape.batch_size);
        for _ in 0..shape.batch_size {
            let src = if self.sources.len() == 1 {
                0
            } else if self.cfg.mixture.is_empty() {
                rng.random_range(0..self.sources.len())
            } else {
                mixture_sample_with(&self.cfg.mixture, &mut rng)?
            };
            let data = &self.sources[src];
            let (id, rec) = &data.scenes[rng.random_range(0..data.len())];
            let pool: Vec<usize> = (0..rec.views.len())
                .filter(|i| !self.cfg.holdout.contains(i))
                .collect();
            if pool.is_empty() {
                return Err(Error::validation(format!("scene {id} has no trainable views")));
            }
            let n = shape.n_views.min(pool.len());
            let mut pick: Vec<usize> = sample_indices(&mut rng, pool.len(), n)
                .into_iter()
                .map(|i| pool[i])
                .collect();
            if self.cfg.ordered {
                pick.sort_unstable();
            }
            samples.push(make_sample(rec, *id, &pick, shape.height, shape.width)?);
        }
        Ok(MultiViewBatch { samples })
    }

    /// Batches `start..end` produced on a worker thread and handed over
    /// through a bounded queue of `depth` slots.
    pub fn prefetch(&self, start: u64, end: u64, depth: usize) -> Receiver<Result<MultiViewBatch>> {
        let (tx, rx) = sync_channel(depth.max(1));
        let me = self.clone();
        thread::spawn(move || {
            for step in start..end {
                if tx.send(me.batch(step)).is_err() {
                    break;
                }
            }
        });
        rx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, SceneConfig};
    use proptest::prelude::*;

    #[test]
    fn budget_example_56() {
        let cfg = BudgetConfig {
            pixel_min: 56 * 56,
            pixel_max: 56 * 56,
            aspect_min: 1.0,
            aspect_max: 1.0,
            views_min: 4,
            views_max: 4,
            token_budget: 512,
            patch: 14,
        };
        let s = sample_shape(&cfg, 0).unwrap();
        assert_eq!((s.height, s.width), (56, 56));
        assert_eq!(s.tokens_per_view(14), 16);
        assert_eq!(s.batch_size, 8);
    }

    #[test]
    fn tokens_336_by_296() {
        let s = ShapeSample {
            height: 336,
            width: 296,
            n_views: 1,
            batch_size: 1,
        };
        // 296 is not a multiple of 14; partial patches are dropped
        assert_eq!(s.tokens_per_view(14), 504);
    }

    #[test]
    fn impossible_band_is_config_error() {
        let cfg = BudgetConfig {
            pixel_min: 200,
            pixel_max: 300,
            ..BudgetConfig::default()
        };
        assert!(matches!(sample_shape(&cfg, 1), Err(Error::Config(_))));
    }

    proptest! {
        #[test]
        fn shapes_satisfy_invariants(seed in any::<u64>()) {
            let cfg = BudgetConfig::default();
            let s = sample_shape(&cfg, seed).unwrap();
            prop_assert_eq!(s.height % 14, 0);
            prop_assert_eq!(s.width % 14, 0);
            prop_assert!((cfg.pixel_min..=cfg.pixel_max).contains(&(s.height * s.width)));
            let a = s.width as f64 / s.height as f64;
            prop_assert!(a >= cfg.aspect_min && a <= cfg.aspect_max);
            prop_assert!((cfg.views_min..=cfg.views_max).contains(&s.n_views));
            let expect = (cfg.token_budget / (s.n_views * s.tokens_per_view(14))).max(1);
            prop_assert_eq!(s.batch_size, expect);
            prop_assert_eq!(s, sample_shape(&cfg, seed).unwrap());
        }
    }

    #[test]
    fn mixture_edge_cases() {
        for s in 0..100 {
            assert_eq!(mixture_sample(&[1.0, 0.0], s).unwrap(), 0);
        }
        assert!(matches!(mixture_sample(&[0.0, 0.0], 0), Err(Error::Config(_))));
        let mut rng = seed::rng(3, &[]);
        let n = 100_000;
        let ones = (0..n)
            .filter(|_| mixture_sample_with(&[1.0, 1.0], &mut rng).unwrap() == 1)
            .count();
        assert!((ones as f64 / n as f64 - 0.5).abs() < 0.01);
    }

    #[test]
    fn mixture_matches_weight_proportions() {
        let w = [7.1, 5.1, 3.0, 1.2];
        let total: f64 = w.iter().sum();
        let mut rng = seed::rng(9, &[]);
        let n = 100_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[mixture_sample_with(&w, &mut rng).unwrap()] += 1;
        }
        for i in 0..4 {
            let p = w[i] / total;
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((counts[i] as f64 / n as f64 - p).abs() < 4.0 * se);
        }
    }

    #[test]
    fn mask_policies() {
        let mut rng = seed::rng(0, &[]);
        assert!(MaskPolicy::none().draw(8, &mut rng).iter().all(|&v| v));
        let half = MaskPolicy {
            mask_probability: 1.0,
            ratio_min: 0.5,
            ratio_max: 0.5,
            drop_all_probability: 0.0,
        };
        for _ in 0..100 {
            assert_eq!(half.draw(8, &mut rng).iter().filter(|&&v| !v).count(), 4);
        }
        // single views are never masked outside drop-all
        assert_eq!(half.draw(1, &mut rng), vec![true]);
    }

    #[test]
    fn rae_mask_statistics() {
        let p = MaskPolicy::rae();
        let mut rng = seed::rng(1, &[]);
        let n = 10_000;
        let mut hit = 0;
        for _ in 0..n {
            let v = p.draw(10, &mut rng);
            let k = v.iter().filter(|&&x| !x).count();
            if k > 0 {
                hit += 1;
                assert!((1..=6).contains(&k));
            }
        }
        let se = (0.1 * 0.9 / n as f64).sqrt();
        assert!((hit as f64 / n as f64 - 0.1).abs() < 3.0 * se);
    }

    #[test]
    fn dit_policy_covers_all_configurations() {
        let p = MaskPolicy::dit();
        let mut rng = seed::rng(2, &[]);
        let mut seen = [0usize; 3];
        for _ in 0..2000 {
            let vis = p.draw(8, &mut rng).iter().filter(|&&x| x).count();
            seen[vis.min(2)] += 1;
        }
        assert!(seen.iter().all(|&c| c > 50), "{seen:?}");
    }

    fn tiny_dataset() -> Arc<Dataset> {
        let cfg = SceneConfig::default();
        let scenes = (0..3)
            .map(|i| (i, generate_scene(4, i, 5, 20.0, &cfg).unwrap()))
            .collect();
        Arc::new(Dataset { scenes })
    }

    #[test]
    fn sampler_is_deterministic_and_normalized() {
        let data = tiny_dataset();
        let cfg = SamplerConfig {
            holdout: vec![2],
            ..SamplerConfig::default()
        };
        let s = BatchSampler::new(data, cfg, 11).unwrap();
        let a = s.batch(3).unwrap();
        assert_eq!(a, s.batch(3).unwrap());
        for smp in &a.samples {
            smp.validate().unwrap();
            assert!(!smp.view_ids.contains(&2));
            assert_eq!(smp.cameras[0].rotation, crate::geometry::Mat3::identity());
            let far = smp
                .cameras
                .iter()
                .map(|c| c.translation.norm())
                .fold(0.0, f64::max);
            assert!(smp.n_views() == 1 || (far - 1.0).abs() < 1e-9);
            // point maps still reproject into their own pixels after resizing
            let (pm, valid, cam) = (&smp.pointmaps.as_ref().unwrap()[0], &smp.valid.as_ref().unwrap()[0], &smp.cameras[0]);
            for y in 0..cam.height {
                for x in 0..cam.width {
                    if valid[y * cam.width + x] {
                        let p = pm.pixel(x, y);
                        let (u, v, _) = cam.project(&Vec3::new(p[0] as f64, p[1] as f64, p[2] as f64)).unwrap();
                        assert!((u - x as f64 - 0.5).abs() < 1.0 && (v - y as f64 - 0.5).abs() < 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn prefetch_matches_direct() {
        let s = BatchSampler::new(tiny_dataset(), SamplerConfig::default(), 5).unwrap();
        let rx = s.prefetch(0, 3, 1);
        for step in 0..3 {
            assert_eq!(rx.recv().unwrap().unwrap(), s.batch(step).unwrap());
        }
    }

    #[test]
    fn apply_view_mask_keeps_cameras() {
        let s = BatchSampler::new(tiny_dataset(), SamplerConfig::default(), 5).unwrap();
        let b = s.batch(0).unwrap();
        let m = apply_view_mask(&b, &MaskPolicy::dit(), 1).unwrap();
        for (x, y) in b.samples.iter().zip(&m.samples) {
            assert_eq!(x.cameras, y.cameras);
            assert_eq!(x.images, y.images);
        }
        assert_eq!(apply_view_mask(&b, &MaskPolicy::none(), 1).unwrap(), b);
    }
}
