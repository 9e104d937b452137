//! Feature extractors: the pluggable interface, a tiny ViT-style reference
//! encoder, multi-block taps and positional-grid resampling.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{NodeId, Tape};
use crate::datamodel::Image;
use crate::digest::stream;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::params::{Binder, ParamRole, ParamTable};
use crate::resample::{Kernel, Resample2d};

const LN_EPS: f64 = 1e-6;

/// Anything that maps an image to per-block patch features on a uniform grid.
pub trait FeatureExtractor {
    fn name(&self) -> &str;
    fn patch_size(&self) -> usize;
    fn embed_dim(&self) -> usize;
    fn n_blocks(&self) -> usize;
    fn native_resolution(&self) -> (usize, usize);
    fn params(&self) -> &ParamTable;
    fn params_mut(&mut self) -> &mut ParamTable;

    /// Record the forward pass on `tape` and return the normalized outputs of
    /// the last `n_taps` blocks, each `(Gh·Gw) × embed_dim` in row-major grid order.
    fn forward_taps(&self, tape: &mut Tape, binder: &mut Binder, image: &Image, n_taps: usize) -> Result<Vec<NodeId>>;

    fn grid_dims(&self, image_dims: (usize, usize)) -> Result<(usize, usize)> {
        let p = self.patch_size();
        let (h, w) = image_dims;
        if h == 0 || w == 0 || h % p != 0 || w % p != 0 {
            return Err(Error::IndivisibleResolution { height: h, width: w, patch: p });
        }
        Ok((h / p, w / p))
    }
}

/// A `Gh×Gw×D` feature map stored as a `(Gh·Gw) × D` matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeatureMap {
    pub gh: usize,
    pub gw: usize,
    pub data: Matrix,
}

impl FeatureMap {
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.gh, self.gw, self.data.cols)
    }
}

pub type FeatureStack = Vec<FeatureMap>;

/// Final-block features with all parameters treated as constants.
pub fn extract<E: FeatureExtractor + ?Sized>(encoder: &E, image: &Image) -> Result<FeatureMap> {
    Ok(extract_taps(encoder, image, 1)?.pop().expect("one tap"))
}

/// Outputs of the last `n_taps` blocks in block order.
pub fn extract_taps<E: FeatureExtractor + ?Sized>(encoder: &E, image: &Image, n_taps: usize) -> Result<FeatureStack> {
    let (gh, gw) = encoder.grid_dims(image.dims())?;
    let mut tape = Tape::new();
    let mut binder = Binder::new(encoder.params(), false);
    let taps = encoder.forward_taps(&mut tape, &mut binder, image, n_taps)?;
    Ok(taps.into_iter().map(|id| FeatureMap { gh, gw, data: tape.value(id).clone() }).collect())
}

/// A learned positional grid plus an optional class-token embedding.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PosEmbedGrid {
    pub gh: usize,
    pub gw: usize,
    /// `(gh·gw) × D`, row-major over the grid.
    pub grid: Matrix,
    pub cls: Option<Vec<f64>>,
}

/// Bicubic resampling of the positional grid to `new_dims`; the class token is copied through.
pub fn interpolate_pos_embed(grid: &PosEmbedGrid, new_dims: (usize, usize)) -> PosEmbedGrid {
    let out = if new_dims == (grid.gh, grid.gw) {
        grid.grid.clone()
    } else {
        Resample2d::new((grid.gh, grid.gw), new_dims, Kernel::Bicubic).apply(&grid.grid)
    };
    PosEmbedGrid { gh: new_dims.0, gw: new_dims.1, grid: out, cls: grid.cls.clone() }
}

/// Shape and role of one parameter, independent of its values.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub role: ParamRole,
}

impl ParamSpec {
    fn new(name: String, rows: usize, cols: usize, role: ParamRole) -> Self {
        ParamSpec { name, rows, cols, role }
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TinyEncoderConfig {
    pub embed_dim: usize,
    pub n_blocks: usize,
    pub patch_size: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub in_channels: usize,
    pub native_resolution: (usize, usize),
    pub pixel_mean: Vec<f64>,
    pub pixel_std: Vec<f64>,
    pub seed: u64,
}

impl Default for TinyEncoderConfig {
    fn default() -> Self {
        TinyEncoderConfig {
            embed_dim: 32,
            n_blocks: 2,
            patch_size: 8,
            heads: 4,
            mlp_ratio: 4,
            in_channels: 3,
            native_resolution: (64, 64),
            pixel_mean: vec![0.485, 0.456, 0.406],
            pixel_std: vec![0.229, 0.224, 0.225],
            seed: 0,
        }
    }
}

impl TinyEncoderConfig {
    /// ViT-B/16 at 224×224: the shape used for parameter-budget accounting.
    pub fn vit_base() -> Self {
        TinyEncoderConfig { embed_dim: 768, n_blocks: 12, patch_size: 16, heads: 12, native_resolution: (224, 224), ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("encoder: {m}")));
        if self.embed_dim == 0 || self.n_blocks == 0 || self.patch_size == 0 || self.mlp_ratio == 0 {
            return bad("dimensions must be positive");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("embed_dim must be a multiple of heads");
        }
        let (h, w) = self.native_resolution;
        if h == 0 || w == 0 || h % self.patch_size != 0 || w % self.patch_size != 0 {
            return Err(Error::IndivisibleResolution { height: h, width: w, patch: self.patch_size });
        }
        if self.pixel_mean.len() != self.in_channels || self.pixel_std.len() != self.in_channels || self.pixel_std.iter().any(|s| *s <= 0.0) {
            return bad("pixel_mean/pixel_std must have one positive entry per channel");
        }
        Ok(())
    }

    pub fn native_grid(&self) -> (usize, usize) {
        (self.native_resolution.0 / self.patch_size, self.native_resolution.1 / self.patch_size)
    }

    /// Every parameter of the encoder in registration order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let d = self.embed_dim;
        let hidden = d * self.mlp_ratio;
        let (gh, gw) = self.native_grid();
        let mut specs = Vec::new();
        let linear = |specs: &mut Vec<ParamSpec>, prefix: &str, out: usize, inp: usize| {
            specs.push(ParamSpec::new(format!("{prefix}.weight"), out, inp, ParamRole::Weight));
            specs.push(ParamSpec::new(format!("{prefix}.bias"), 1, out, ParamRole::Bias));
        };
        let norm = |specs: &mut Vec<ParamSpec>, prefix: &str| {
            specs.push(ParamSpec::new(format!("{prefix}.weight"), 1, d, ParamRole::NormWeight));
            specs.push(ParamSpec::new(format!("{prefix}.bias"), 1, d, ParamRole::NormBias));
        };
        linear(&mut specs, "patch_embed", d, self.patch_size * self.patch_size * self.in_channels);
        specs.push(ParamSpec::new("pos_embed".into(), gh * gw, d, ParamRole::PosEmbed));
        for i in 0..self.n_blocks {
            let b = format!("blocks.{i}");
            norm(&mut specs, &format!("{b}.norm1"));
            for m in ["q", "k", "v", "proj"] {
                linear(&mut specs, &format!("{b}.attn.{m}"), d, d);
            }
            norm(&mut specs, &format!("{b}.norm2"));
            linear(&mut specs, &format!("{b}.mlp.fc1"), hidden, d);
            linear(&mut specs, &format!("{b}.mlp.fc2"), d, hidden);
        }
        norm(&mut specs, "norm");
        specs
    }
}

/// A small pre-norm transformer with learned positional grid and no class token.
#[derive(Clone, Debug)]
pub struct TinyEncoder {
    cfg: TinyEncoderConfig,
    params: ParamTable,
}

impl TinyEncoder {
    pub fn new(cfg: TinyEncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = stream(cfg.seed, &["tiny_encoder"]);
        let mut params = ParamTable::new();
        let patch_fan_in = (cfg.patch_size * cfg.patch_size * cfg.in_channels) as f64;
        for spec in cfg.param_specs() {
            let mut sample = |std: f64| {
                let dist = Normal::new(0.0, std).expect("positive std");
                Matrix::from_vec(spec.rows, spec.cols, (0..spec.numel()).map(|_| dist.sample(&mut rng)).collect())
            };
            let value = match spec.role {
                ParamRole::Weight if spec.name.starts_with("patch_embed") => sample(1.0 / libm::sqrt(patch_fan_in)),
                ParamRole::Weight | ParamRole::PosEmbed => sample(0.02),
                ParamRole::NormWeight => Matrix::filled(spec.rows, spec.cols, 1.0),
                _ => Matrix::zeros(spec.rows, spec.cols),
            };
            params.insert(spec.name.clone(), value, spec.role, true);
            if let Some(prefix) = spec.name.strip_suffix(".weight") {
                if spec.role == ParamRole::Weight {
                    params.set_linear_form(prefix, crate::params::LinearForm::Dense);
                }
            }
        }
        Ok(TinyEncoder { cfg, params })
    }

    pub fn config(&self) -> &TinyEncoderConfig {
        &self.cfg
    }

    pub fn pos_embed(&self) -> Result<PosEmbedGrid> {
        let (gh, gw) = self.cfg.native_grid();
        Ok(PosEmbedGrid { gh, gw, grid: self.params.get("pos_embed")?.value.clone(), cls: None })
    }

    /// Normalized non-overlapping patches, one row per grid cell, `(py, px, c)` inside a row.
    fn patchify(&self, img: &Image, grid: (usize, usize)) -> Result<Matrix> {
        let (p, c) = (self.cfg.patch_size, self.cfg.in_channels);
        if img.channels != c {
            return Err(Error::Shape(format!("encoder expects {c} channels, image has {}", img.channels)));
        }
        let mut m = Matrix::zeros(grid.0 * grid.1, p * p * c);
        for gy in 0..grid.0 {
            for gx in 0..grid.1 {
                let row = &mut m.data[(gy * grid.1 + gx) * p * p * c..][..p * p * c];
                for py in 0..p {
                    for px in 0..p {
                        let src = img.pixel(gy * p + py, gx * p + px);
                        for ch in 0..c {
                            row[(py * p + px) * c + ch] = (src[ch] as f64 - self.cfg.pixel_mean[ch]) / self.cfg.pixel_std[ch];
                        }
                    }
                }
            }
        }
        Ok(m)
    }
}

impl FeatureExtractor for TinyEncoder {
    fn name(&self) -> &str {
        "tiny-vit"
    }

    fn patch_size(&self) -> usize {
        self.cfg.patch_size
    }

    fn embed_dim(&self) -> usize {
        self.cfg.embed_dim
    }

    fn n_blocks(&self) -> usize {
        self.cfg.n_blocks
    }

    fn native_resolution(&self) -> (usize, usize) {
        self.cfg.native_resolution
    }

    fn params(&self) -> &ParamTable {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamTable {
        &mut self.params
    }

    fn forward_taps(&self, tape: &mut Tape, binder: &mut Binder, image: &Image, n_taps: usize) -> Result<Vec<NodeId>> {
        let nb = self.cfg.n_blocks;
        if n_taps == 0 || n_taps > nb {
            return Err(Error::TooManyTaps { requested: n_taps, available: nb });
        }
        let grid = self.grid_dims(image.dims())?;
        let t = &self.params;
        let patches = tape.constant(self.patchify(image, grid)?);
        let mut x = binder.linear(tape, t, patches, "patch_embed")?;
        let mut pos = binder.get(tape, t, "pos_embed")?;
        let native = self.cfg.native_grid();
        if grid != native {
            pos = tape.resample(pos, Arc::new(Resample2d::new(native, grid, Kernel::Bicubic)));
        }
        x = tape.add(x, pos);
        let norm = |tape: &mut Tape, binder: &mut Binder, x: NodeId, prefix: &str| -> Result<NodeId> {
            let g = binder.get(tape, t, &format!("{prefix}.weight"))?;
            let b = binder.get(tape, t, &format!("{prefix}.bias"))?;
            Ok(tape.layer_norm(x, g, b, LN_EPS))
        };
        let mut taps = Vec::with_capacity(n_taps);
        for i in 0..nb {
            let b = format!("blocks.{i}");
            let h = norm(tape, binder, x, &format!("{b}.norm1"))?;
            let q = binder.linear(tape, t, h, &format!("{b}.attn.q"))?;
            let k = binder.linear(tape, t, h, &format!("{b}.attn.k"))?;
            let v = binder.linear(tape, t, h, &format!("{b}.attn.v"))?;
            let a = tape.attention(q, k, v, self.cfg.heads);
            let a = binder.linear(tape, t, a, &format!("{b}.attn.proj"))?;
            x = tape.add(x, a);
            let h = norm(tape, binder, x, &format!("{b}.norm2"))?;
            let h = binder.linear(tape, t, h, &format!("{b}.mlp.fc1"))?;
            let h = tape.gelu(h);
            let h = binder.linear(tape, t, h, &format!("{b}.mlp.fc2"))?;
            x = tape.add(x, h);
            if i + n_taps >= nb {
                taps.push(norm(tape, binder, x, "norm")?);
            }
        }
        Ok(taps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image(h: usize, w: usize, seed: u64) -> Image {
        use rand::Rng;
        let mut rng = stream(seed, &["img"]);
        Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn grid_shape_follows_patch_size() {
        let enc = TinyEncoder::new(TinyEncoderConfig::default()).unwrap();
        let f = extract(&enc, &test_image(64, 64, 1)).unwrap();
        assert_eq!(f.dims(), (8, 8, 32));
        let f = extract(&enc, &test_image(32, 48, 1)).unwrap();
        assert_eq!(f.dims(), (4, 6, 32));
        assert!(f.data.is_finite());
    }

    #[test]
    fn grid_dims_for_large_models() {
        let enc = TinyEncoder::new(TinyEncoderConfig { patch_size: 16, native_resolution: (224, 224), ..Default::default() }).unwrap();
        assert_eq!(enc.grid_dims((224, 224)).unwrap(), (14, 14));
        assert_eq!(enc.grid_dims((1024, 1024)).unwrap(), (64, 64));
        assert_eq!(enc.grid_dims((100, 224)), Err(Error::IndivisibleResolution { height: 100, width: 224, patch: 16 }));
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = TinyEncoder::new(TinyEncoderConfig { seed: 3, ..Default::default() }).unwrap();
        let b = TinyEncoder::new(TinyEncoderConfig { seed: 3, ..Default::default() }).unwrap();
        let c = TinyEncoder::new(TinyEncoderConfig { seed: 4, ..Default::default() }).unwrap();
        assert_eq!(a.params().digests(), b.params().digests());
        assert_ne!(a.params().digests(), c.params().digests());
        let img = test_image(64, 64, 2);
        assert_eq!(extract(&a, &img).unwrap(), extract(&a, &img).unwrap());
    }

    #[test]
    fn table_lists_attention_mlp_and_biases() {
        let enc = TinyEncoder::new(TinyEncoderConfig::default()).unwrap();
        let t = enc.params();
        for i in 0..2 {
            for m in ["attn.q", "attn.k", "attn.v", "attn.proj", "mlp.fc1", "mlp.fc2"] {
                assert!(t.contains(&format!("blocks.{i}.{m}.weight")));
                assert!(t.contains(&format!("blocks.{i}.{m}.bias")));
            }
        }
        let specs = enc.config().param_specs();
        assert_eq!(t.len(), specs.len());
        assert_eq!(t.total_count(), specs.iter().map(ParamSpec::numel).sum::<usize>());
        let names: alloc::collections::BTreeSet<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        assert_eq!(names.len(), specs.len());
    }

    #[test]
    fn vit_base_has_about_86m_parameters() {
        let total: usize = TinyEncoderConfig::vit_base().param_specs().iter().map(ParamSpec::numel).sum();
        // (768·768 + 768) + 196·768 + 12·7 087 872 + 1536
        assert_eq!(total, 590_592 + 150_528 + 85_054_464 + 1536);
        assert_eq!(total, 85_797_120);
    }

    #[test]
    fn last_tap_is_extract_output() {
        let enc = TinyEncoder::new(TinyEncoderConfig { n_blocks: 3, ..Default::default() }).unwrap();
        let img = test_image(64, 64, 5);
        let taps = extract_taps(&enc, &img, 3).unwrap();
        assert_eq!(taps.len(), 3);
        assert_eq!(taps[2], extract(&enc, &img).unwrap());
        assert_ne!(taps[0], taps[2]);
        assert!(taps.iter().all(|t| t.dims() == (8, 8, 32)));
        assert_eq!(extract_taps(&enc, &img, 4).unwrap_err(), Error::TooManyTaps { requested: 4, available: 3 });
    }

    #[test]
    fn interpolation_identity_and_constants() {
        let enc = TinyEncoder::new(TinyEncoderConfig::default()).unwrap();
        let pe = enc.pos_embed().unwrap();
        assert_eq!(interpolate_pos_embed(&pe, (8, 8)), pe);
        let constant = PosEmbedGrid { gh: 14, gw: 14, grid: Matrix::filled(196, 4, 0.37), cls: Some(vec![1.0, 2.0]) };
        let up = interpolate_pos_embed(&constant, (64, 64));
        assert_eq!(up.grid.shape(), (4096, 4));
        assert!(up.grid.data.iter().all(|&v| v == 0.37));
        assert_eq!(up.cls, constant.cls);
    }

    #[test]
    fn smooth_grid_mass_is_stable_under_upsampling() {
        let mut g = Matrix::zeros(14 * 14, 2);
        for r in 0..14 {
            for c in 0..14 {
                g.set(r * 14 + c, 0, libm::sin(r as f64 / 3.0) + 2.0);
                g.set(r * 14 + c, 1, libm::cos((r + c) as f64 / 5.0));
            }
        }
        let up = interpolate_pos_embed(&PosEmbedGrid { gh: 14, gw: 14, grid: g.clone(), cls: None }, (28, 28));
        let mass = |m: &Matrix| m.data.iter().map(|v| v.abs()).sum::<f64>() / m.rows as f64;
        assert!((mass(&up.grid) - mass(&g)).abs() / mass(&g) < 0.01);
    }

    #[test]
    fn non_native_input_resamples_the_positional_grid() {
        let enc = TinyEncoder::new(TinyEncoderConfig::default()).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(enc.params(), true);
        let taps = enc.forward_taps(&mut tape, &mut binder, &test_image(96, 128, 4), 1).unwrap();
        assert_eq!(tape.value(taps[0]).shape(), (12 * 16, 32));
        let loss = tape.cross_entropy_sum(taps[0], Arc::new(vec![Some(0); 192]));
        let grads = tape.backward(loss);
        let g = binder.gradients(&grads);
        let pos = enc.params().position("pos_embed").unwrap();
        assert!(g.iter().any(|(i, m)| *i == pos && m.shape() == (64, 32)));
    }
}
