//! Multi-view representation autoencoder. Any number of posed views (some of
//! them possibly hidden) are fused with a fixed set of learnable queries into
//! `m × d` latent tokens; ray tokens of arbitrary target cameras then query
//! those latents to decode images and point maps.

use std::collections::HashMap;
use std::rc::Rc;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::container::{Archive, Array};
use crate::datapipe::PATCH;
use crate::error::{Error, Result};
use crate::geometry::{plucker_ray_map, Camera, RAY_CHANNELS};
use crate::image::Image;
use crate::nn::{self, grid_positions, rope_2d, Block, Linear, LN_EPS};
use crate::params::ParamStore;
use crate::seed::{self, stream};
use crate::tensor::{gemm_batched, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RaeConfig {
    pub patch: usize,
    pub d: usize,
    pub m: usize,
    pub fuse_depth: usize,
    pub dec_depth: usize,
    /// Depth of the separate point-map decoder.
    pub pmap_depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Point-map decoder layers whose ray tokens feed the point-map head.
    pub pmap_layers: Vec<usize>,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_c: f64,
    pub tau: f64,
    pub rope_base: f64,
    pub calib_tokens: usize,
    pub init_seed: u64,
}

impl Default for RaeConfig {
    fn default() -> Self {
        Self {
            patch: PATCH,
            d: 128,
            m: 64,
            fuse_depth: 4,
            dec_depth: 4,
            pmap_depth: 4,
            heads: 4,
            mlp_ratio: 4,
            pmap_layers: vec![0, 1, 2, 3],
            lambda1: 1.0,
            lambda2: 0.75,
            lambda3: 1.0,
            lambda_c: 0.2,
            tau: 0.8,
            rope_base: 100.0,
            calib_tokens: 4096,
            init_seed: 0,
        }
    }
}

impl RaeConfig {
    /// Small configuration for gradient checks and fast tests.
    pub fn tiny() -> RaeConfig {
        RaeConfig {
            d: 16,
            m: 4,
            fuse_depth: 1,
            dec_depth: 2,
            pmap_depth: 2,
            heads: 2,
            mlp_ratio: 2,
            pmap_layers: vec![0, 1],
            calib_tokens: 64,
            ..RaeConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.d == 0 || self.patch == 0 || self.heads == 0 {
            return Err(Error::config("rae: m, d, patch and heads must be positive"));
        }
        if self.d % self.heads != 0 || (self.d / self.heads) % 4 != 0 {
            return Err(Error::config(format!(
                "rae: head width {}/{} must be a multiple of 4",
                self.d, self.heads
            )));
        }
        if self.pmap_layers.is_empty() || self.pmap_layers.iter().any(|&l| l >= self.pmap_depth) {
            return Err(Error::config(format!(
                "rae: point-map layers {:?} must be non-empty and below point-map decoder depth {}",
                self.pmap_layers, self.pmap_depth
            )));
        }
        if !(self.tau >= 0.0) || !(self.lambda_c > 0.0) {
            return Err(Error::config("rae: tau must be >= 0 and lambda_c > 0"));
        }
        Ok(())
    }

    pub fn ray_patch(&self) -> usize {
        self.patch * self.patch * RAY_CHANNELS
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
            lambda_c: self.lambda_c,
        }
    }
}

/// Frozen per-patch image features. Implementations never see gradients.
pub trait FrozenEncoder: Send + Sync {
    fn id(&self) -> String;
    fn width(&self) -> usize;
    fn native_patch(&self) -> usize {
        PATCH
    }
    /// Row-major `[(H/p)·(W/p), width]` features of an image whose sides are
    /// multiples of the native patch size.
    fn encode_native(&self, image: &Image) -> Result<Vec<f32>>;

    /// Features on the `patch` grid; images are resampled when the native
    /// patch size differs.
    fn embed(&self, image: &Image, patch: usize) -> Result<Vec<f32>> {
        if image.height % patch != 0 || image.width % patch != 0 {
            return Err(Error::validation(format!(
                "image {}x{} is not divisible by patch {patch}",
                image.height, image.width
            )));
        }
        let (rows, cols) = (image.height / patch, image.width / patch);
        let native = self.native_patch();
        let out = if native == patch {
            self.encode_native(image)?
        } else {
            self.encode_native(&image.resize_bilinear(rows * native, cols * native))?
        };
        if out.len() != rows * cols * self.width() {
            return Err(Error::validation(format!(
                "encoder {} returned {} values for {} tokens of width {}",
                self.id(),
                out.len(),
                rows * cols,
                self.width()
            )));
        }
        Ok(out)
    }
}

/// Raw-pixel embedder: each patch (centred at 0.5) projected onto its
/// lowest-frequency orthonormal 2-D DCT coefficients, zero-padded when the
/// width exceeds the patch size.
#[derive(Clone, Debug)]
pub struct DctEncoder {
    width: usize,
    patch: usize,
    /// `[patch·patch·3, width]`
    basis: Vec<f32>,
}

impl DctEncoder {
    pub fn new(width: usize, patch: usize) -> Self {
        let p = patch;
        let mut freqs: Vec<(usize, usize)> = (0..p).flat_map(|u| (0..p).map(move |v| (u, v))).collect();
        freqs.sort_by_key(|&(u, v)| (u + v, u));
        let a = |k: usize| if k == 0 { (1.0 / p as f64).sqrt() } else { (2.0 / p as f64).sqrt() };
        let n_in = p * p * 3;
        let mut basis = vec![0f32; n_in * width];
        for k in 0..width.min(n_in) {
            let (u, v) = freqs[k / 3];
            let ch = k % 3;
            for y in 0..p {
                for x in 0..p {
                    let cu = (std::f64::consts::PI * (2 * x + 1) as f64 * u as f64 / (2 * p) as f64).cos();
                    let cv = (std::f64::consts::PI * (2 * y + 1) as f64 * v as f64 / (2 * p) as f64).cos();
                    basis[((y * p + x) * 3 + ch) * width + k] = (a(u) * a(v) * cu * cv) as f32;
                }
            }
        }
        Self { width, patch, basis }
    }
}

impl FrozenEncoder for DctEncoder {
    fn id(&self) -> String {
        format!("imgonly-dct-{}x{}", self.patch, self.width)
    }

    fn width(&self) -> usize {
        self.width
    }

    fn native_patch(&self) -> usize {
        self.patch
    }

    fn encode_native(&self, image: &Image) -> Result<Vec<f32>> {
        if image.channels != 3 {
            return Err(Error::validation("encoder expects 3-channel images"));
        }
        let p = self.patch;
        let tokens = (image.height / p) * (image.width / p);
        let centred: Vec<f32> = image.data.iter().map(|&x| x - 0.5).collect();
        let patches = nn::patchify(&centred, image.height, image.width, p, 3);
        let mut out = vec![0f32; tokens * self.width];
        gemm_batched(1, tokens, p * p * 3, self.width, &patches, false, &self.basis, false, false, &mut out, false);
        Ok(out)
    }
}

/// Features exported by an external model, looked up by image content.
#[derive(Clone, Debug, Default)]
pub struct PrecomputedEncoder {
    pub name: String,
    pub width: usize,
    pub table: HashMap<u64, Vec<f32>>,
}

pub fn image_key(image: &Image) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let dims = [image.height as u64, image.width as u64, image.channels as u64];
    for b in dims.iter().flat_map(|d| d.to_le_bytes()).chain(image.data.iter().flat_map(|x| x.to_bits().to_le_bytes())) {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

impl PrecomputedEncoder {
    pub fn insert(&mut self, image: &Image, features: Vec<f32>) {
        self.table.insert(image_key(image), features);
    }

    /// Archive with entries `image/<i>` and `feat/<i>` (`[tokens, width]`).
    pub fn from_archive(name: &str, ar: &Archive) -> Result<Self> {
        let mut enc = Self {
            name: name.to_string(),
            ..Self::default()
        };
        for i in 0.. {
            let Some(img) = ar.get(&format!("image/{i}")) else { break };
            let feat = ar.require(&format!("feat/{i}"))?;
            let shape = feat.shape().to_vec();
            if shape.len() != 2 || (enc.width != 0 && enc.width != shape[1]) {
                return Err(Error::validation("feature arrays must be [tokens, width] with one width"));
            }
            enc.width = shape[1];
            let Array::F32 { data, .. } = feat else {
                return Err(Error::validation("features must be f32"));
            };
            enc.insert(&Image::from_array(img)?, data.clone());
        }
        Ok(enc)
    }
}

impl FrozenEncoder for PrecomputedEncoder {
    fn id(&self) -> String {
        format!("precomputed-{}", self.name)
    }

    fn width(&self) -> usize {
        self.width
    }

    fn encode_native(&self, image: &Image) -> Result<Vec<f32>> {
        self.table
            .get(&image_key(image))
            .cloned()
            .ok_or_else(|| Error::State(format!("no precomputed features for this image in {}", self.name)))
    }
}

/// Per-dimension statistics that standardize latents.
#[derive(Clone, Debug, PartialEq)]
pub struct Calibration {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Calibration {
    /// Statistics over rows of `[n, d]` latents.
    pub fn from_rows(rows: &[f32], d: usize) -> Result<Self> {
        let n = rows.len() / d;
        if n < 2 {
            return Err(Error::validation("calibration needs at least two latent rows"));
        }
        let mut mean = vec![0.0; d];
        for r in rows.chunks(d) {
            for (m, &x) in mean.iter_mut().zip(r) {
                *m += x as f64;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in rows.chunks(d) {
            for ((v, &x), m) in var.iter_mut().zip(r).zip(&mean) {
                *v += (x as f64 - m).powi(2);
            }
        }
        // rounded to f32 so checkpoints reproduce them exactly
        let std = var.iter().map(|v| (v / n as f64).sqrt().max(1e-6) as f32 as f64).collect();
        let mean = mean.into_iter().map(|m| m as f32 as f64).collect();
        Ok(Self { mean, std })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentMode {
    /// Layer-normalized neck output.
    Raw,
    /// Raw latents mapped through the frozen calibration statistics.
    Standardized,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Provenance {
    Encoded,
    Sampled,
    Condition,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentTokens<F = f32> {
    /// `[m, d]`
    pub z: Tensor<F>,
    pub standardized: bool,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointMapPrediction {
    /// `H × W × 3`
    pub points: Image,
    /// `H × W × 1`, strictly positive.
    pub confidence: Image,
}

/// A view ready for the encoder: ray patches, and frozen features when the
/// view is visible.
#[derive(Clone, Debug)]
pub struct PreparedView<F> {
    pub rows: usize,
    pub cols: usize,
    /// `[tokens, patch·patch·7]`
    pub rays: Tensor<F>,
    /// `[tokens, d]`, None for hidden views.
    pub features: Option<Tensor<F>>,
    key: Vec<u64>,
}

/// One latent query decoder: ray tokens of each target view attend to the
/// latents and to their own view.
#[derive(Clone, Debug)]
struct QueryDecoder {
    z_in: Linear,
    ray_in: Linear,
    blocks: Vec<Block>,
}

impl QueryDecoder {
    fn build<F: Real>(cfg: &RaeConfig, name: &str, depth: usize, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Self {
        let d = cfg.d;
        Self {
            z_in: Linear::new(store, &format!("{name}_in"), d, d, true, None, rng),
            ray_in: Linear::new(store, &format!("{name}_ray"), cfg.ray_patch(), d, true, None, rng),
            blocks: (0..depth)
                .map(|i| Block::new(store, &format!("{name}.{i}"), d, cfg.heads, cfg.mlp_ratio, depth, rng))
                .collect(),
        }
    }

    /// Final ray tokens, plus the ray-token states after each layer listed
    /// in `taps` (in that order). `rays` is `[nv·tokens, ray_patch]`.
    fn forward<F: Real>(
        &self,
        g: &mut Graph<F>,
        z: Var,
        rays: Var,
        nv: usize,
        (rows, cols): (usize, usize),
        rope_base: f64,
        taps: &[usize],
    ) -> (Var, Vec<Var>) {
        let (m, d) = (g.shape(z)[0], g.shape(z)[1]);
        let tokens = rows * cols;
        let r = self.ray_in.forward(g, rays);
        let zi = self.z_in.forward(g, z);
        let mut x = g.concat(&[zi, r]);
        let heads = self.blocks.first().map_or(1, |b| b.attn.heads);
        let mut positions = vec![None; m];
        positions.extend(grid_positions(nv, rows, cols));
        let rope = Rc::new(rope_2d::<F>(&positions, d / heads, rope_base));
        let mut tapped = vec![None; taps.len()];
        for (li, b) in self.blocks.iter().enumerate() {
            let hn = g.layer_norm(x, LN_EPS);
            let qkv = b.attn.project(g, hn, Some(&rope));
            let kz = g.narrow(qkv.k, 0, m);
            let vz = g.narrow(qkv.v, 0, m);
            let qz = g.narrow(qkv.q, 0, m);
            let mut outs = vec![b.attn.attend(g, qz, kz, vz)];
            for v in 0..nv {
                let s = m + v * tokens;
                let qv = g.narrow(qkv.q, s, tokens);
                let kv = g.narrow(qkv.k, s, tokens);
                let vv = g.narrow(qkv.v, s, tokens);
                let k = g.concat(&[kz, kv]);
                let vals = g.concat(&[vz, vv]);
                outs.push(b.attn.attend(g, qv, k, vals));
            }
            let o = g.concat(&outs);
            let o = b.attn.out.forward(g, o);
            x = g.add(x, o);
            x = b.mlp_residual(g, x);
            for (k, _) in taps.iter().enumerate().filter(|(_, &l)| l == li) {
                tapped[k] = Some(g.narrow(x, m, nv * tokens));
            }
        }
        let tapped = tapped.into_iter().map(|t| t.expect("tap below depth")).collect();
        (g.narrow(x, m, nv * tokens), tapped)
    }
}

#[derive(Clone, Debug)]
struct RaeNet {
    queries: crate::params::ParamId,
    enc_ray: Linear,
    fuse: Vec<Block>,
    dec: QueryDecoder,
    img_head: Linear,
    pdec: QueryDecoder,
    pmap_proj: Vec<Linear>,
    pmap_out: Linear,
}

impl RaeNet {
    fn build<F: Real>(cfg: &RaeConfig, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Self {
        let (d, p) = (cfg.d, cfg.patch);
        let queries = store.normal("rae.queries", &[cfg.m, d], 1.0, rng);
        let enc_ray = Linear::new(store, "rae.enc_ray", cfg.ray_patch(), d, true, None, rng);
        let fuse = (0..cfg.fuse_depth)
            .map(|i| Block::new(store, &format!("rae.fuse.{i}"), d, cfg.heads, cfg.mlp_ratio, cfg.fuse_depth, rng))
            .collect();
        let dec = QueryDecoder::build(cfg, "rae.dec", cfg.dec_depth, store, rng);
        let img_head = Linear::new(store, "rae.img_head", d, p * p * 3, true, Some(0.02), rng);
        let pdec = QueryDecoder::build(cfg, "rae.pdec", cfg.pmap_depth, store, rng);
        let pmap_proj = cfg
            .pmap_layers
            .iter()
            .map(|l| Linear::new(store, &format!("rae.pmap_proj.{l}"), d, d, true, None, rng))
            .collect();
        let pmap_out = Linear::new(store, "rae.pmap_out", d, p * p * 4, true, Some(0.02), rng);
        Self {
            queries,
            enc_ray,
            fuse,
            dec,
            img_head,
            pdec,
            pmap_proj,
            pmap_out,
        }
    }
}

/// Graph outputs of one decoder pass over several target views.
pub struct Decoded {
    /// `[H, W, 3]` per view, unclamped.
    pub images: Vec<Var>,
    /// `[H, W, 3]` per view.
    pub points: Vec<Var>,
    /// `[H·W]` raw log-confidence per view.
    pub conf_raw: Vec<Var>,
}

pub struct Rae<F: Real = f32> {
    pub cfg: RaeConfig,
    pub params: ParamStore<F>,
    net: RaeNet,
    pub calibration: Option<Calibration>,
    pub encoder: Arc<dyn FrozenEncoder>,
}

impl<F: Real> Clone for Rae<F> {
    fn clone(&self) -> Self {
        Self {
            cfg: self.cfg.clone(),
            params: self.params.clone(),
            net: self.net.clone(),
            calibration: self.calibration.clone(),
            encoder: self.encoder.clone(),
        }
    }
}

fn canonical_key(cam: &Camera, visible: bool, image: &Image) -> Vec<u64> {
    let mut k: Vec<u64> = cam.rotation.iter().chain(cam.translation.iter()).map(|x| x.to_bits()).collect();
    k.extend([cam.fx, cam.fy, cam.cx, cam.cy].map(f64::to_bits));
    k.extend([cam.width as u64, cam.height as u64, visible as u64]);
    if visible {
        k.push(image_key(image));
    }
    k
}

impl<F: Real> Rae<F> {
    pub fn new(cfg: RaeConfig, encoder: Arc<dyn FrozenEncoder>) -> Result<Self> {
        cfg.validate()?;
        if encoder.width() != cfg.d {
            return Err(Error::config(format!(
                "encoder width {} does not match latent width {}",
                encoder.width(),
                cfg.d
            )));
        }
        let mut params = ParamStore::new();
        let mut rng = seed::rng(cfg.init_seed, &[stream::INIT]);
        let net = RaeNet::build(&cfg, &mut params, &mut rng);
        Ok(Self {
            cfg,
            params,
            net,
            calibration: None,
            encoder,
        })
    }

    /// Default ImgOnly embedder.
    pub fn with_default_encoder(cfg: RaeConfig) -> Result<Self> {
        let enc = Arc::new(DctEncoder::new(cfg.d, cfg.patch));
        Self::new(cfg, enc)
    }

    pub fn cast<G: Real>(&self) -> Rae<G> {
        Rae {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            net: self.net.clone(),
            calibration: self.calibration.clone(),
            encoder: self.encoder.clone(),
        }
    }

    fn check_shape(&self, h: usize, w: usize) -> Result<()> {
        let p = self.cfg.patch;
        if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::validation(format!("{h}x{w} is not a positive multiple of patch {p}")));
        }
        Ok(())
    }

    fn ray_patches(&self, cam: &Camera, visible: bool) -> Result<Tensor<F>> {
        self.check_shape(cam.height, cam.width)?;
        let rm = plucker_ray_map(cam, visible)?;
        let p = self.cfg.patch;
        let data: Vec<F> = nn::patchify(&rm.data, cam.height, cam.width, p, RAY_CHANNELS)
            .into_iter()
            .map(F::c)
            .collect();
        let tokens = (cam.height / p) * (cam.width / p);
        Tensor::from_vec(&[tokens, self.cfg.ray_patch()], data)
    }

    /// Validate and canonically order the input views. Hidden views never
    /// touch their pixels.
    pub fn prepare(&self, images: &[Image], cameras: &[Camera], visibility: &[bool]) -> Result<Vec<PreparedView<F>>> {
        if images.len() != cameras.len() || visibility.len() != cameras.len() {
            return Err(Error::validation(format!(
                "{} images, {} cameras and {} visibility flags",
                images.len(),
                cameras.len(),
                visibility.len()
            )));
        }
        let p = self.cfg.patch;
        let mut views = Vec::with_capacity(cameras.len());
        for ((img, cam), &vis) in images.iter().zip(cameras).zip(visibility) {
            let rays = self.ray_patches(cam, vis)?;
            let features = if vis {
                if img.height != cam.height || img.width != cam.width || img.channels != 3 {
                    return Err(Error::validation(format!(
                        "image {}x{}x{} does not match camera {}x{}",
                        img.height, img.width, img.channels, cam.height, cam.width
                    )));
                }
                let f = self.encoder.embed(img, p)?;
                Some(nn::tensor_from_f32(&[rays.shape()[0], self.cfg.d], &f))
            } else {
                None
            };
            views.push(PreparedView {
                rows: cam.height / p,
                cols: cam.width / p,
                rays,
                features,
                key: canonical_key(cam, vis, img),
            });
        }
        views.sort_by(|a, b| a.key.cmp(&b.key));
        Ok(views)
    }

    /// Per-view tokens: frozen features (zeros when hidden) plus the ray-map
    /// embedding. Returns `[Σ tokens, d]`.
    pub fn embed_views(&self, g: &mut Graph<F>, views: &[PreparedView<F>]) -> Option<Var> {
        if views.is_empty() {
            return None;
        }
        let rays: Vec<&Tensor<F>> = views.iter().map(|v| &v.rays).collect();
        let rays = g.constant(Tensor::concat_rows(&rays).expect("ray widths agree"));
        let t = self.net.enc_ray.forward(g, rays);
        let d = self.cfg.d;
        let mut feats = Vec::with_capacity(g.value(t).numel());
        for v in views {
            match &v.features {
                Some(f) => feats.extend_from_slice(f.data()),
                None => feats.extend(std::iter::repeat_n(F::zero(), v.rows * v.cols * d)),
            }
        }
        let n = feats.len() / d;
        let f = g.constant(Tensor::from_vec(&[n, d], feats).expect("feature rows"));
        Some(g.add(f, t))
    }

    /// Raw latents `[m, d]`: fuse queries with view tokens, keep the query
    /// positions and apply a non-affine layer norm.
    pub fn encode_graph(&self, g: &mut Graph<F>, views: &[PreparedView<F>]) -> Var {
        let m = self.cfg.m;
        let q = g.param(self.net.queries);
        let (x, positions) = match self.embed_views(g, views) {
            Some(t) => {
                let mut pos = vec![None; m];
                for v in views {
                    pos.extend(grid_positions(1, v.rows, v.cols));
                }
                (g.concat(&[q, t]), pos)
            }
            None => (q, vec![None; m]),
        };
        let head_dim = self.cfg.d / self.cfg.heads;
        let rope = Rc::new(rope_2d::<F>(&positions, head_dim, self.cfg.rope_base));
        let mut x = x;
        for b in &self.net.fuse {
            x = b.forward(g, x, Some(&rope));
        }
        let z = g.narrow(x, 0, m);
        g.layer_norm(z, LN_EPS)
    }

    pub fn standardize_graph(&self, g: &mut Graph<F>, z: Var) -> Result<Var> {
        let c = self.calibration()?;
        let inv: Vec<F> = c.std.iter().map(|s| F::c(1.0 / s)).collect();
        let neg_mean: Vec<F> = c.mean.iter().map(|m| F::c(-m)).collect();
        let d = self.cfg.d;
        let b = g.constant(Tensor::from_vec(&[d], neg_mean)?);
        let s = g.constant(Tensor::from_vec(&[d], inv)?);
        let z = g.add_bcast(z, b);
        Ok(g.mul_bcast(z, s))
    }

    pub fn destandardize_graph(&self, g: &mut Graph<F>, z: Var) -> Result<Var> {
        let c = self.calibration()?;
        let d = self.cfg.d;
        let s = g.constant(Tensor::from_vec(&[d], c.std.iter().map(|&x| F::c(x)).collect())?);
        let b = g.constant(Tensor::from_vec(&[d], c.mean.iter().map(|&x| F::c(x)).collect())?);
        let z = g.mul_bcast(z, s);
        Ok(g.add_bcast(z, b))
    }

    pub fn calibration(&self) -> Result<&Calibration> {
        self.calibration
            .as_ref()
            .ok_or_else(|| Error::State("latent calibration statistics are not set".into()))
    }

    /// Decode target cameras from raw latents. Target ray tokens attend to
    /// the latents and to their own view only; the latent stream attends to
    /// itself.
    pub fn decode_graph(&self, g: &mut Graph<F>, z: Var, targets: &[Camera], with_pmap: bool) -> Result<Decoded> {
        let (m, d, p) = (self.cfg.m, self.cfg.d, self.cfg.patch);
        if g.shape(z) != [m, d] {
            return Err(Error::validation(format!("latents shaped {:?}, expected [{m}, {d}]", g.shape(z))));
        }
        let Some(first) = targets.first() else {
            return Ok(Decoded {
                images: vec![],
                points: vec![],
                conf_raw: vec![],
            });
        };
        let (h, w) = (first.height, first.width);
        if targets.iter().any(|c| c.height != h || c.width != w) {
            return Err(Error::validation("all target views in one decode call must share a shape"));
        }
        let rays = targets
            .iter()
            .map(|c| self.ray_patches(c, true))
            .collect::<Result<Vec<_>>>()?;
        let (rows, cols) = (h / p, w / p);
        let tokens = rows * cols;
        let nv = targets.len();
        let rays: Vec<&Tensor<F>> = rays.iter().collect();
        let rays = g.constant(Tensor::concat_rows(&rays)?);
        let base = self.cfg.rope_base;
        let (rt, _) = self.net.dec.forward(g, z, rays, nv, (rows, cols), base, &[]);
        let rt = g.layer_norm(rt, LN_EPS);
        let pix = self.net.img_head.forward(g, rt);
        let img_idx = Rc::new(nn::unpatchify_index(h, w, p, 3));
        let mut images = Vec::with_capacity(nv);
        for v in 0..nv {
            let pv = g.narrow(pix, v * tokens, tokens);
            images.push(g.gather(pv, img_idx.clone(), &[h, w, 3]));
        }
        let (mut points, mut conf_raw) = (Vec::new(), Vec::new());
        if with_pmap {
            let (_, taps) = self.net.pdec.forward(g, z, rays, nv, (rows, cols), base, &self.cfg.pmap_layers);
            let mut acc: Option<Var> = None;
            for (k, t) in taps.into_iter().enumerate() {
                let tn = g.layer_norm(t, LN_EPS);
                let y = self.net.pmap_proj[k].forward(g, tn);
                acc = Some(match acc {
                    Some(a) => g.add(a, y),
                    None => y,
                });
            }
            let hdn = g.gelu(acc.expect("at least one point-map layer"));
            let out = self.net.pmap_out.forward(g, hdn);
            let full = nn::unpatchify_index(h, w, p, 4);
            let pt_idx: Rc<Vec<usize>> = Rc::new(full.iter().enumerate().filter(|(i, _)| i % 4 < 3).map(|(_, &s)| s).collect());
            let cf_idx: Rc<Vec<usize>> = Rc::new(full.iter().enumerate().filter(|(i, _)| i % 4 == 3).map(|(_, &s)| s).collect());
            for v in 0..nv {
                let ov = g.narrow(out, v * tokens, tokens);
                points.push(g.gather(ov, pt_idx.clone(), &[h, w, 3]));
                conf_raw.push(g.gather(ov, cf_idx.clone(), &[h * w]));
            }
        }
        Ok(Decoded {
            images,
            points,
            conf_raw,
        })
    }

    pub fn encode(&self, images: &[Image], cameras: &[Camera], visibility: &[bool], mode: LatentMode) -> Result<LatentTokens<F>> {
        let views = self.prepare(images, cameras, visibility)?;
        let mut g = Graph::frozen(&self.params);
        let mut z = self.encode_graph(&mut g, &views);
        if mode == LatentMode::Standardized {
            z = self.standardize_graph(&mut g, z)?;
        }
        let z = g.value(z).clone();
        if !z.is_finite() {
            return Err(Error::numeric("encoder produced non-finite latents"));
        }
        Ok(LatentTokens {
            z,
            standardized: mode == LatentMode::Standardized,
            provenance: Provenance::Encoded,
        })
    }

    /// Pose-only latents (every view hidden).
    pub fn encode_poses(&self, cameras: &[Camera], mode: LatentMode) -> Result<LatentTokens<F>> {
        let blank: Vec<Image> = cameras.iter().map(|c| Image::new(c.height, c.width, 3)).collect();
        self.encode(&blank, cameras, &vec![false; cameras.len()], mode)
    }

    fn raw_latent_var(&self, g: &mut Graph<F>, z: &LatentTokens<F>) -> Result<Var> {
        let v = g.constant(z.z.clone());
        if z.standardized {
            self.destandardize_graph(g, v)
        } else {
            Ok(v)
        }
    }

    /// Images for the target cameras, clamped to [0, 1].
    pub fn decode_images(&self, z: &LatentTokens<F>, cameras: &[Camera]) -> Result<Vec<Image>> {
        let mut g = Graph::frozen(&self.params);
        let zv = self.raw_latent_var(&mut g, z)?;
        let out = self.decode_graph(&mut g, zv, cameras, false)?;
        out.images
            .iter()
            .zip(cameras)
            .map(|(&v, c)| {
                let data = g.value(v).data().iter().map(|x| x.f64().clamp(0.0, 1.0) as f32).collect();
                Image::from_vec(c.height, c.width, 3, data)
            })
            .collect()
    }

    pub fn decode_pointmaps(&self, z: &LatentTokens<F>, cameras: &[Camera]) -> Result<Vec<PointMapPrediction>> {
        let mut g = Graph::frozen(&self.params);
        let zv = self.raw_latent_var(&mut g, z)?;
        let out = self.decode_graph(&mut g, zv, cameras, true)?;
        out.points
            .iter()
            .zip(&out.conf_raw)
            .zip(cameras)
            .map(|((&p, &c), cam)| {
                let pts = g.value(p).data().iter().map(|x| x.f64() as f32).collect();
                let conf = g.value(c).data().iter().map(|x| x.f64().exp() as f32).collect();
                Ok(PointMapPrediction {
                    points: Image::from_vec(cam.height, cam.width, 3, pts)?,
                    confidence: Image::from_vec(cam.height, cam.width, 1, conf)?,
                })
            })
            .collect()
    }
}

/// `Z + σ ε` with `σ ~ U[0, τ]` and `ε ~ N(0, I)`.
pub fn perturb_latents<F: Real>(z: &LatentTokens<F>, tau: f64, seed: u64) -> LatentTokens<F> {
    LatentTokens {
        z: perturb_tensor(&z.z, tau, &mut seed::rng(seed, &[stream::NOISE])),
        ..z.clone()
    }
}

pub fn perturb_tensor<F: Real>(z: &Tensor<F>, tau: f64, rng: &mut impl Rng) -> Tensor<F> {
    if tau == 0.0 {
        return z.clone();
    }
    let sigma = rng.random::<f64>() * tau;
    let mut out = z.clone();
    for x in out.data_mut() {
        let e: f64 = StandardNormal.sample(rng);
        *x += F::c(sigma * e);
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub lambda_c: f64,
}

/// Point-map supervision for one view.
pub struct PmapTarget {
    pub pred: Var,
    pub conf_raw: Var,
    /// `[H, W, 3]` constant.
    pub gt: Var,
    pub valid: Vec<bool>,
}

pub struct LossTerms {
    pub total: Var,
    pub mse: Var,
    pub perceptual: Var,
    pub pmap: Option<Var>,
    pub adv: Option<Var>,
}

/// MSE of 2x and 4x average-pooled images.
pub fn perceptual_proxy<F: Real>(g: &mut Graph<F>, pred: Var, gt: Var) -> Var {
    let p2 = g.avg_pool(pred, 2);
    let g2 = g.avg_pool(gt, 2);
    let p4 = g.avg_pool(pred, 4);
    let g4 = g.avg_pool(gt, 4);
    let a = nn::mse(g, p2, g2);
    let b = nn::mse(g, p4, g4);
    g.add(a, b)
}

/// Confidence-weighted L1 with a log-confidence penalty, averaged over valid
/// pixels: `mean[C·|P̂ − P|₁ − λ_c log C]`, `C = exp(raw)`. None when no
/// pixel is valid.
pub fn pmap_loss<F: Real>(g: &mut Graph<F>, t: &PmapTarget, lambda_c: f64) -> Option<Var> {
    let count = t.valid.iter().filter(|&&v| v).count();
    if count == 0 {
        return None;
    }
    let hw = t.valid.len();
    let diff = g.sub(t.pred, t.gt);
    let l1 = g.abs(diff);
    let l1 = g.sum_last(l1);
    let l1 = g.reshape(l1, &[hw]);
    let c = g.exp(t.conf_raw);
    let weighted = g.mul(c, l1);
    let reg = g.scale(t.conf_raw, F::c(-lambda_c));
    let per = g.add(weighted, reg);
    let mask = g.constant(Tensor::from_vec(&[hw], t.valid.iter().map(|&v| if v { F::one() } else { F::zero() }).collect()).expect("mask"));
    let masked = g.mul(per, mask);
    let s = g.sum(masked);
    Some(g.scale(s, F::c(1.0 / count as f64)))
}

/// Full reconstruction objective for one target view.
pub fn loss_graph<F: Real>(
    g: &mut Graph<F>,
    pred: Var,
    gt: Var,
    pmap: Option<&PmapTarget>,
    adv: Option<Var>,
    adv_gate: f64,
    w: &LossWeights,
) -> LossTerms {
    let mse = nn::mse(g, pred, gt);
    let perceptual = perceptual_proxy(g, pred, gt);
    let mut total = g.scale(perceptual, F::c(w.lambda1));
    total = g.add(mse, total);
    let pmap = pmap.and_then(|t| pmap_loss(g, t, w.lambda_c));
    if let Some(l) = pmap {
        let s = g.scale(l, F::c(w.lambda3));
        total = g.add(total, s);
    }
    if let Some(a) = adv {
        if adv_gate != 0.0 {
            let s = g.scale(a, F::c(w.lambda2 * adv_gate));
            total = g.add(total, s);
        }
    }
    LossTerms {
        total,
        mse,
        perceptual,
        pmap,
        adv,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub mse: f64,
    pub perceptual: f64,
    pub pmap: f64,
    pub adv: f64,
}

fn image_tensor<F: Real>(img: &Image) -> Tensor<F> {
    nn::tensor_from_f32(&[img.height, img.width, img.channels], &img.data)
}

/// Loss values for decoded outputs against ground truth, averaged over
/// views. `adv_term` is the generator adversarial value, already gated.
pub fn rae_loss(
    pred_imgs: &[Image],
    gt_imgs: &[Image],
    pred_pmaps: Option<&[PointMapPrediction]>,
    gt_pmaps: Option<(&[Image], &[Vec<bool>])>,
    w: &LossWeights,
    adv_term: f64,
) -> Result<LossBreakdown> {
    if pred_imgs.len() != gt_imgs.len() || pred_imgs.is_empty() {
        return Err(Error::validation("prediction and ground-truth view counts differ"));
    }
    let finite = |i: &Image| i.data.iter().all(|x| x.is_finite());
    if !pred_imgs.iter().chain(gt_imgs).all(finite) || !adv_term.is_finite() {
        return Err(Error::numeric("non-finite value in loss inputs"));
    }
    let mut out = LossBreakdown::default();
    for (i, (p, t)) in pred_imgs.iter().zip(gt_imgs).enumerate() {
        if !p.same_shape(t) {
            return Err(Error::validation("image shapes differ"));
        }
        let mut g = Graph::<f64>::detached();
        let pv = g.constant(image_tensor(p));
        let tv = g.constant(image_tensor(t));
        let target = match (pred_pmaps, gt_pmaps) {
            (Some(pp), Some((gp, valid))) => {
                let (pp, gp, valid) = (&pp[i], &gp[i], &valid[i]);
                if !pp.points.same_shape(gp) || valid.len() != gp.height * gp.width {
                    return Err(Error::validation("point map shapes differ"));
                }
                if !finite(&pp.points) || !finite(&pp.confidence) || !finite(gp) {
                    return Err(Error::numeric("non-finite value in point maps"));
                }
                if pp.confidence.data.iter().any(|&c| !(c > 0.0)) {
                    return Err(Error::numeric("confidence must be positive"));
                }
                let raw: Vec<f64> = pp.confidence.data.iter().map(|&c| (c as f64).ln()).collect();
                Some(PmapTarget {
                    pred: g.constant(image_tensor(&pp.points)),
                    conf_raw: g.constant(Tensor::from_vec(&[raw.len()], raw)?),
                    gt: g.constant(image_tensor(gp)),
                    valid: valid.clone(),
                })
            }
            _ => None,
        };
        let adv = g.constant(Tensor::scalar(adv_term));
        let terms = loss_graph(&mut g, pv, tv, target.as_ref(), Some(adv), 1.0, w);
        out.total += g.value(terms.total).item();
        out.mse += g.value(terms.mse).item();
        out.perceptual += g.value(terms.perceptual).item();
        out.pmap += terms.pmap.map_or(0.0, |v| g.value(v).item());
        out.adv += adv_term;
    }
    let n = pred_imgs.len() as f64;
    for v in [&mut out.total, &mut out.mse, &mut out.perceptual, &mut out.pmap, &mut out.adv] {
        *v /= n;
    }
    if !out.total.is_finite() {
        return Err(Error::numeric("loss is not finite"));
    }
    Ok(out)
}

pub const DISC_PATCH: usize = 7;

/// Small patch discriminator: non-overlapping 7×7 patches through a
/// three-layer MLP, one logit per patch.
pub struct PatchDiscriminator<F: Real = f32> {
    pub params: ParamStore<F>,
    layers: [Linear; 3],
}

impl<F: Real> Clone for PatchDiscriminator<F> {
    fn clone(&self) -> Self {
        Self {
            params: self.params.clone(),
            layers: self.layers.clone(),
        }
    }
}

impl<F: Real> PatchDiscriminator<F> {
    pub fn new(hidden: usize, seed: u64) -> Self {
        let mut params = ParamStore::new();
        let mut rng = seed::rng(seed, &[stream::DISC]);
        let n_in = DISC_PATCH * DISC_PATCH * 3;
        let layers = [
            Linear::new(&mut params, "disc.l0", n_in, hidden, true, None, &mut rng),
            Linear::new(&mut params, "disc.l1", hidden, hidden, true, None, &mut rng),
            Linear::new(&mut params, "disc.l2", hidden, 1, true, None, &mut rng),
        ];
        Self { params, layers }
    }

    pub fn cast<G: Real>(&self) -> PatchDiscriminator<G> {
        PatchDiscriminator {
            params: self.params.cast(),
            layers: self.layers.clone(),
        }
    }

    pub fn from_params(params: ParamStore<F>) -> Result<Self> {
        let find = |n: &str| Linear::find(&params, n).ok_or_else(|| Error::State(format!("discriminator is missing {n}")));
        let layers = [find("disc.l0")?, find("disc.l1")?, find("disc.l2")?];
        Ok(Self { params, layers })
    }

    /// Parameter values as graph constants, for use inside another model's
    /// graph.
    pub fn constants(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.params.tensors().iter().map(|t| g.constant(t.clone())).collect()
    }

    /// Parameters as trainable leaves of a graph built on `self.params`.
    pub fn leaves(&self, g: &mut Graph<F>) -> Vec<Var> {
        self.params.iter().map(|(id, _, _)| g.param(id)).collect()
    }

    /// Patch logits for an `[H, W, 3]` image, with weights from
    /// [`Self::constants`] or [`Self::leaves`].
    pub fn logits(&self, g: &mut Graph<F>, img: Var, weights: &[Var]) -> Var {
        let s = g.shape(img).to_vec();
        let (h, w) = (s[0] - s[0] % DISC_PATCH, s[1] - s[1] % DISC_PATCH);
        let full = nn::patchify_index(h, w, DISC_PATCH, 3);
        // patchify_index addresses an h×w image; remap into the source width
        let idx: Vec<usize> = full
            .iter()
            .map(|&i| {
                let (px, c) = (i / 3, i % 3);
                ((px / w) * s[1] + px % w) * 3 + c
            })
            .collect();
        let tokens = (h / DISC_PATCH) * (w / DISC_PATCH);
        let x = g.gather(img, Rc::new(idx), &[tokens, DISC_PATCH * DISC_PATCH * 3]);
        let mut x = x;
        for (k, l) in self.layers.iter().enumerate() {
            let b = l.b.map(|b| weights[b.index()]);
            x = g.linear(x, weights[l.w.index()], b);
            if k < 2 {
                x = g.gelu(x);
            }
        }
        g.reshape(x, &[tokens])
    }
}

/// Hinge losses: `d = E[max(0, 1 − D(real))] + E[max(0, 1 + D(fake))]`,
/// `g = −E[D(fake)]`.
pub fn hinge_losses<F: Real>(g: &mut Graph<F>, real_logits: Option<Var>, fake_logits: Var) -> (Option<Var>, Var) {
    let d = real_logits.map(|r| {
        let nr = g.neg(r);
        let a = g.add_scalar(nr, F::one());
        let a = g.relu(a);
        let a = g.mean(a);
        let b = g.add_scalar(fake_logits, F::one());
        let b = g.relu(b);
        let b = g.mean(b);
        g.add(a, b)
    });
    let m = g.mean(fake_logits);
    (d, g.neg(m))
}

/// Discriminator and generator hinge losses averaged over image pairs.
pub fn discriminator_loss<F: Real>(real: &[Image], fake: &[Image], disc: &PatchDiscriminator<F>) -> Result<(f64, f64)> {
    if real.len() != fake.len() || real.is_empty() {
        return Err(Error::validation("need matching non-empty real and fake sets"));
    }
    let mut g = Graph::frozen(&disc.params);
    let w = disc.leaves(&mut g);
    let (mut dl, mut gl) = (0.0, 0.0);
    for (r, f) in real.iter().zip(fake) {
        if !r.same_shape(f) {
            return Err(Error::validation("real and fake images differ in shape"));
        }
        let rv = g.constant(image_tensor(r));
        let fv = g.constant(image_tensor(f));
        let rl = disc.logits(&mut g, rv, &w);
        let fl = disc.logits(&mut g, fv, &w);
        let (d, gen) = hinge_losses(&mut g, Some(rl), fl);
        dl += g.value(d.expect("real given")).item().f64();
        gl += g.value(gen).item().f64();
    }
    Ok((dl / real.len() as f64, gl / real.len() as f64))
}

const CKPT_FORMAT: &str = "scenelat-rae-1";

impl Rae<f32> {
    /// Fit standardization statistics on raw latents of the given samples,
    /// stopping after `calib_tokens` rows.
    pub fn calibrate<'a>(&mut self, samples: impl IntoIterator<Item = (&'a [Image], &'a [Camera])>) -> Result<()> {
        let mut rows = Vec::new();
        for (imgs, cams) in samples {
            let z = self.encode(imgs, cams, &vec![true; cams.len()], LatentMode::Raw)?;
            rows.extend_from_slice(z.z.data());
            if rows.len() / self.cfg.d >= self.cfg.calib_tokens {
                break;
            }
        }
        rows.truncate(self.cfg.calib_tokens * self.cfg.d);
        self.calibration = Some(Calibration::from_rows(&rows, self.cfg.d)?);
        Ok(())
    }

    pub fn save_into(&self, ar: &mut Archive) -> Result<()> {
        ar.push("rae/format", Array::text(CKPT_FORMAT));
        ar.push("rae/encoder", Array::text(&self.encoder.id()));
        let cfg = toml::to_string(&self.cfg).map_err(|e| Error::config(e.to_string()))?;
        ar.push("rae/config", Array::text(&cfg));
        if let Some(c) = &self.calibration {
            let f = |v: &[f64]| Array::F32 {
                shape: vec![v.len()],
                data: v.iter().map(|&x| x as f32).collect(),
            };
            ar.push("rae/calib/mean", f(&c.mean));
            ar.push("rae/calib/std", f(&c.std));
        }
        self.params.save_into(ar, "rae/param/");
        Ok(())
    }

    pub fn load_from(ar: &Archive, encoder: Option<Arc<dyn FrozenEncoder>>) -> Result<Self> {
        let fmt = ar.require("rae/format")?.as_text()?;
        if fmt != CKPT_FORMAT {
            return Err(Error::State(format!("unsupported autoencoder checkpoint {fmt:?}")));
        }
        let cfg: RaeConfig =
            toml::from_str(&ar.require("rae/config")?.as_text()?).map_err(|e| Error::config(e.to_string()))?;
        let encoder = match encoder {
            Some(e) => e,
            None => Arc::new(DctEncoder::new(cfg.d, cfg.patch)),
        };
        let mut rae = Self::new(cfg, encoder)?;
        rae.params.load_from(&ParamStore::from_archive(ar, "rae/param/")?)?;
        if let (Some(m), Some(s)) = (ar.get("rae/calib/mean"), ar.get("rae/calib/std")) {
            let v = |a: &Array| -> Result<Vec<f64>> { Ok(a.to_tensor()?.data().iter().map(|&x| x as f64).collect()) };
            rae.calibration = Some(Calibration { mean: v(m)?, std: v(s)? });
        }
        Ok(rae)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{axis_angle, Vec3};


    fn cams(n: usize, h: usize, w: usize) -> Vec<Camera> {
        (0..n)
            .map(|i| {
                let r = axis_angle(&Vec3::new(0.0, 1.0, 0.0), 0.2 * i as f64);
                Camera::with_fov(w, h, 60.0).with_pose(r, Vec3::new(0.3 * i as f64, 0.0, 0.0))
            })
            .collect()
    }

    fn noise_img(h: usize, w: usize, s: u64) -> Image {
        let mut rng = seed::rng(s, &[]);
        Image::from_vec(h, w, 3, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn dct_encoder_is_orthonormal_and_sized() {
        let enc = DctEncoder::new(588, 14);
        let img = noise_img(28, 42, 1);
        let f = enc.embed(&img, 14).unwrap();
        assert_eq!(f.len(), 6 * 588);
        // orthonormal basis preserves the patch energy
        let patches = nn::patchify(&img.data, 28, 42, 14, 3);
        let e_in: f32 = patches[..588].iter().map(|x| (x - 0.5).powi(2)).sum();
        let e_out: f32 = f[..588].iter().map(|x| x * x).sum();
        assert!((e_in - e_out).abs() < 1e-3 * e_in);
        // 336x294 input gives a 24x21 token grid
        let big = DctEncoder::new(8, 14).embed(&Image::new(336, 294, 3), 14).unwrap();
        assert_eq!(big.len() / 8, 24 * 21);
    }

    #[test]
    fn non_native_patch_is_resampled() {
        let enc = DctEncoder::new(8, 16);
        let f = enc.embed(&noise_img(28, 56, 2), 14).unwrap();
        assert_eq!(f.len(), 2 * 4 * 8);
    }

    #[test]
    fn fixed_length_latents() {
        let rae = Rae::<f32>::with_default_encoder(RaeConfig::tiny()).unwrap();
        for n in [0, 1, 3] {
            for (h, w) in [(14, 14), (28, 42)] {
                let c = cams(n, h, w);
                let imgs: Vec<Image> = (0..n).map(|i| noise_img(h, w, i as u64)).collect();
                let z = rae.encode(&imgs, &c, &vec![true; n], LatentMode::Raw).unwrap();
                assert_eq!(z.z.shape(), &[4, 16]);
                // non-affine layer norm per token
                for row in z.z.data().chunks(16) {
                    let mean: f32 = row.iter().sum::<f32>() / 16.0;
                    let var: f32 = row.iter().map(|x| (x - mean).powi(2)).sum::<f32>() / 16.0;
                    assert!(mean.abs() < 1e-4 && (var - 1.0).abs() < 1e-3);
                }
            }
        }
    }

    #[test]
    fn hidden_views_ignore_pixels_and_order_is_irrelevant() {
        let rae = Rae::<f32>::with_default_encoder(RaeConfig::tiny()).unwrap();
        let c = cams(3, 28, 28);
        let a = vec![noise_img(28, 28, 1), noise_img(28, 28, 2), noise_img(28, 28, 3)];
        let mut b = a.clone();
        b[1] = noise_img(28, 28, 99);
        let vis = [true, false, true];
        let za = rae.encode(&a, &c, &vis, LatentMode::Raw).unwrap();
        let zb = rae.encode(&b, &c, &vis, LatentMode::Raw).unwrap();
        assert_eq!(za, zb);
        let perm = [2, 0, 1];
        let ap: Vec<Image> = perm.iter().map(|&i| a[i].clone()).collect();
        let cp: Vec<Camera> = perm.iter().map(|&i| c[i].clone()).collect();
        let vp: Vec<bool> = perm.iter().map(|&i| vis[i]).collect();
        assert_eq!(rae.encode(&ap, &cp, &vp, LatentMode::Raw).unwrap(), za);
        assert!(rae.encode(&a, &c, &vis, LatentMode::Standardized).is_err());
    }

    #[test]
    fn zero_ray_embedding_passes_features_through() {
        let mut rae = Rae::<f64>::with_default_encoder(RaeConfig::tiny()).unwrap();
        for name in ["rae.enc_ray.w", "rae.enc_ray.b"] {
            let id = rae.params.id(name).unwrap();
            rae.params.get_mut(id).data_mut().fill(0.0);
        }
        let img = noise_img(14, 28, 5);
        let views = rae.prepare(std::slice::from_ref(&img), &cams(1, 14, 28), &[true]).unwrap();
        let mut g = Graph::frozen(&rae.params);
        let t = rae.embed_views(&mut g, &views).unwrap();
        let f = rae.encoder.embed(&img, 14).unwrap();
        for (a, b) in g.value(t).data().iter().zip(&f) {
            assert_eq!(*a, *b as f64);
        }
    }

    #[test]
    fn decode_shapes_and_view_independence() {
        let rae = Rae::<f32>::with_default_encoder(RaeConfig::tiny()).unwrap();
        let c = cams(3, 28, 14);
        let z = rae.encode_poses(&c, LatentMode::Raw).unwrap();
        let joint = rae.decode_images(&z, &c).unwrap();
        assert_eq!(joint.len(), 3);
        for (i, cam) in c.iter().enumerate() {
            let solo = rae.decode_images(&z, std::slice::from_ref(cam)).unwrap();
            for (a, b) in solo[0].data.iter().zip(&joint[i].data) {
                assert!((a - b).abs() < 1e-6);
            }
            assert!(joint[i].data.iter().all(|x| (0.0..=1.0).contains(x)));
        }
        let pm = rae.decode_pointmaps(&z, &c[..1]).unwrap();
        assert_eq!((pm[0].points.height, pm[0].points.width, pm[0].points.channels), (28, 14, 3));
        assert!(pm[0].confidence.data.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn loss_examples() {
        let w = RaeConfig::default().weights();
        let img = noise_img(28, 28, 3);
        let gt_p = noise_img(28, 28, 4);
        let valid = vec![true; 28 * 28];
        let pred = PointMapPrediction {
            points: gt_p.clone(),
            confidence: Image::filled(28, 28, &[1.0]),
        };
        let l = rae_loss(
            std::slice::from_ref(&img),
            std::slice::from_ref(&img),
            Some(std::slice::from_ref(&pred)),
            Some((std::slice::from_ref(&gt_p), std::slice::from_ref(&valid))),
            &w,
            0.0,
        )
        .unwrap();
        assert_eq!((l.mse, l.pmap), (0.0, 0.0));
        // unit confidence: loss is the mean L1 error
        let mut off = gt_p.clone();
        off.data.iter_mut().for_each(|x| *x += 0.25);
        let l = rae_loss(
            std::slice::from_ref(&img),
            std::slice::from_ref(&img),
            Some(&[PointMapPrediction { points: off, confidence: Image::filled(28, 28, &[1.0]) }]),
            Some((std::slice::from_ref(&gt_p), std::slice::from_ref(&valid))),
            &w,
            0.0,
        )
        .unwrap();
        assert!((l.pmap - 0.75).abs() < 1e-6);
        let mut bad = img.clone();
        bad.data[0] = f32::NAN;
        let e = rae_loss(&[bad], &[img], None, None, &w, 0.0).unwrap_err();
        assert!(e.is_numeric());
    }

    #[test]
    fn optimal_confidence_is_lambda_over_error() {
        // minimize c·e − λ log c over raw = log c by gradient descent
        let (e, lam) = (0.4, 0.2);
        let mut raw = 0.0f64;
        for _ in 0..2000 {
            let mut g = Graph::<f64>::detached();
            let r = g.input(Tensor::from_vec(&[1], vec![raw]).unwrap());
            let t = PmapTarget {
                pred: g.constant(Tensor::from_vec(&[1, 1, 3], vec![e, 0.0, 0.0]).unwrap()),
                conf_raw: r,
                gt: g.constant(Tensor::zeros(&[1, 1, 3])),
                valid: vec![true],
            };
            let l = pmap_loss(&mut g, &t, lam).unwrap();
            raw -= 0.5 * g.backward(l).wrt(r).unwrap().data()[0];
        }
        assert!((raw.exp() - lam / e).abs() < 1e-6);
    }

    #[test]
    fn zero_discriminator_hinge_values() {
        let mut d = PatchDiscriminator::<f64>::new(8, 0);
        d.params.tensors_mut().iter_mut().for_each(|t| t.data_mut().fill(0.0));
        let a = noise_img(14, 14, 1);
        let (dl, gl) = discriminator_loss(std::slice::from_ref(&a), std::slice::from_ref(&a), &d).unwrap();
        assert_eq!((dl, gl), (2.0, 0.0));
    }

    #[test]
    fn perturbation_properties() {
        let z = LatentTokens {
            z: Tensor::<f64>::from_fn(&[4, 8], |i| i as f64 * 0.1),
            standardized: false,
            provenance: Provenance::Encoded,
        };
        assert_eq!(perturb_latents(&z, 0.0, 3), z);
        assert_eq!(perturb_latents(&z, 0.8, 3), perturb_latents(&z, 0.8, 3));
        let n = 10_000;
        let mut acc = vec![0.0; 32];
        let mut acc2 = vec![0.0; 32];
        for s in 0..n {
            let p = perturb_latents(&z, 0.8, s);
            for (i, (x, z0)) in p.z.data().iter().zip(z.z.data()).enumerate() {
                acc[i] += x - z0;
                acc2[i] += (x - z0).powi(2);
            }
        }
        for i in 0..32 {
            let mean = acc[i] / n as f64;
            let se = (acc2[i] / n as f64 - mean * mean).sqrt() / (n as f64).sqrt();
            assert!(mean.abs() < 3.5 * se, "coord {i}: {mean} vs se {se}");
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rae = Rae::<f32>::with_default_encoder(RaeConfig::tiny()).unwrap();
        let c = cams(2, 14, 14);
        let imgs = vec![noise_img(14, 14, 1), noise_img(14, 14, 2)];
        rae.calibrate([(&imgs[..], &c[..]); 20]).unwrap();
        let mut ar = Archive::new();
        rae.save_into(&mut ar).unwrap();
        let back = Rae::load_from(&Archive::decode(&ar.encode().unwrap()).unwrap(), None).unwrap();
        assert_eq!(back.params.fingerprint(), rae.params.fingerprint());
        let za = rae.encode(&imgs, &c, &[true, true], LatentMode::Standardized).unwrap();
        let zb = back.encode(&imgs, &c, &[true, true], LatentMode::Standardized).unwrap();
        assert_eq!(za, zb);
    }
}
