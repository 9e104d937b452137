//! Dataset access, deterministic splits, the synthetic blob dataset, and augmentation.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datamodel::{ensure_valid_mask, ClassCatalog, ClassId, Image, LabelMask, SegSample};
use crate::digest::{stream, Hasher};
use crate::error::{Error, Result};
use crate::imageops;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Read access to an indexed segmentation dataset with a train/val split table.
pub trait Dataset {
    fn name(&self) -> &str;
    fn catalog(&self) -> &ClassCatalog;
    /// Image ids of a split in a deterministic order.
    fn ids(&self, split: Split) -> Vec<String>;
    fn load(&self, id: &str) -> Result<SegSample>;

    fn load_mask(&self, id: &str) -> Result<LabelMask> {
        Ok(self.load(id)?.mask)
    }

    /// Content digest over the catalog, the split table and every sample.
    fn digest(&self) -> Result<String> {
        let mut h = Hasher::new();
        for c in &self.catalog().classes {
            h.u64(c.id as u64).str(&c.name);
        }
        h.u64(self.catalog().ignore_id as u64).u64(self.catalog().background_is_class as u64);
        for split in [Split::Train, Split::Val] {
            h.str(split.name());
            for id in self.ids(split) {
                let s = self.load(&id)?;
                h.str(&id).u64(s.image.height as u64).u64(s.image.width as u64).f32s(&s.image.data).bytes(&s.mask.data);
            }
        }
        Ok(h.finish_hex())
    }
}

/// Samples held in memory with an explicit split table.
#[derive(Clone, Debug)]
pub struct InMemoryDataset {
    pub name: String,
    pub catalog: ClassCatalog,
    samples: Vec<SegSample>,
    splits: BTreeMap<String, Split>,
}

impl InMemoryDataset {
    /// All samples start in the train split.
    pub fn new(name: impl Into<String>, catalog: ClassCatalog, samples: Vec<SegSample>) -> Result<Self> {
        catalog.check()?;
        let mut splits = BTreeMap::new();
        for s in &samples {
            ensure_valid_mask(&s.mask, &catalog)?;
            if splits.insert(s.image_id.clone(), Split::Train).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate image id `{}`", s.image_id)));
            }
        }
        Ok(InMemoryDataset { name: name.into(), catalog, samples, splits })
    }

    pub fn set_split(&mut self, table: &SplitTable) -> Result<()> {
        for id in table.train.iter().chain(&table.val) {
            if !self.splits.contains_key(id) {
                return Err(Error::UnknownImage(id.clone()));
            }
        }
        for id in &table.train {
            self.splits.insert(id.clone(), Split::Train);
        }
        for id in &table.val {
            self.splits.insert(id.clone(), Split::Val);
        }
        Ok(())
    }

    pub fn samples(&self) -> &[SegSample] {
        &self.samples
    }

    pub fn all_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.image_id.clone()).collect()
    }

    pub fn split_of(&self, id: &str) -> Option<Split> {
        self.splits.get(id).copied()
    }

    /// The samples of one split as their own dataset (all in its train split).
    pub fn subset(&self, split: Split) -> InMemoryDataset {
        let samples = self.samples.iter().filter(|s| self.splits[&s.image_id] == split).cloned().collect::<Vec<_>>();
        let splits = samples.iter().map(|s: &SegSample| (s.image_id.clone(), Split::Train)).collect();
        InMemoryDataset { name: format!("{}:{}", self.name, split.name()), catalog: self.catalog.clone(), samples, splits }
    }
}

impl Dataset for InMemoryDataset {
    fn name(&self) -> &str {
        &self.name
    }

    fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    fn ids(&self, split: Split) -> Vec<String> {
        self.samples.iter().filter(|s| self.splits[&s.image_id] == split).map(|s| s.image_id.clone()).collect()
    }

    fn load(&self, id: &str) -> Result<SegSample> {
        self.samples.iter().find(|s| s.image_id == id).cloned().ok_or_else(|| Error::UnknownImage(id.into()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitTable {
    pub train: Vec<String>,
    pub val: Vec<String>,
}

/// Deterministic split: sort ids, shuffle with a seeded stream, take `round(n·fraction)` for train.
pub fn split_fixed(ids: &[String], fraction: f64, seed: u64) -> Result<SplitTable> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut ids = ids.to_vec();
    ids.sort();
    ids.dedup();
    ids.shuffle(&mut stream(seed, &["split_fixed"]));
    let n_train = libm::floor(ids.len() as f64 * fraction + 0.5) as usize;
    let val = ids.split_off(n_train);
    Ok(SplitTable { train: ids, val })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticBlobConfig {
    /// Total classes including background (class 0).
    pub n_classes: usize,
    pub images: usize,
    pub image_size: (usize, usize),
    pub blobs_per_image: (usize, usize),
    /// Blob radius range in pixels.
    pub radius: (f64, f64),
    /// When true a blob's colour is a fixed function of its class.
    pub color_correspondence: bool,
    /// Standard deviation of per-pixel Gaussian noise.
    pub noise: f32,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticBlobConfig {
    fn default() -> Self {
        SyntheticBlobConfig {
            n_classes: 3,
            images: 40,
            image_size: (64, 64),
            blobs_per_image: (1, 3),
            radius: (10.0, 22.0),
            color_correspondence: true,
            noise: 0.03,
            train_fraction: 0.5,
            seed: 7,
        }
    }
}

const PALETTE: [[f32; 3]; 8] = [
    [0.15, 0.15, 0.15],
    [0.90, 0.15, 0.15],
    [0.15, 0.85, 0.20],
    [0.20, 0.30, 0.95],
    [0.95, 0.90, 0.15],
    [0.85, 0.20, 0.85],
    [0.15, 0.85, 0.90],
    [0.95, 0.55, 0.10],
];

/// Class colour for the synthetic dataset; classes beyond the fixed palette get hashed colours.
pub fn class_color(class: usize) -> [f32; 3] {
    if class < PALETTE.len() {
        return PALETTE[class];
    }
    let mut rng = stream(class as u64, &["palette"]);
    [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)]
}

fn normal(rng: &mut impl Rng) -> f32 {
    rng.sample(StandardNormal)
}

/// Images of coloured elliptical blobs on a background; class 0 is background and a class.
pub fn synth_blobs(cfg: &SyntheticBlobConfig) -> Result<InMemoryDataset> {
    if cfg.n_classes < 2 {
        return Err(Error::InvalidConfig("synthetic dataset needs at least 2 classes".into()));
    }
    let (h, w) = cfg.image_size;
    if h == 0 || w == 0 || cfg.images == 0 {
        return Err(Error::InvalidConfig("synthetic dataset needs positive size and image count".into()));
    }
    let catalog = ClassCatalog::numbered(cfg.n_classes, true)?;
    let mut samples = Vec::with_capacity(cfg.images);
    for i in 0..cfg.images {
        let id = format!("synth_{i:05}");
        let mut rng = stream(cfg.seed, &["synth_blobs", &id]);
        let mut mask = LabelMask::filled(h, w, 0);
        let lo = cfg.blobs_per_image.0.max(1);
        let n_blobs = rng.random_range(lo..=cfg.blobs_per_image.1.max(lo));
        for _ in 0..n_blobs {
            let class = rng.random_range(1..cfg.n_classes);
            let cy = rng.random_range(0.0..h as f64);
            let cx = rng.random_range(0.0..w as f64);
            let ry = rng.random_range(cfg.radius.0..=cfg.radius.1);
            let rx = rng.random_range(cfg.radius.0..=cfg.radius.1);
            let angle = rng.random_range(0.0..core::f64::consts::PI);
            let (sa, ca) = (libm::sin(angle), libm::cos(angle));
            for r in 0..h {
                for c in 0..w {
                    let (dy, dx) = (r as f64 + 0.5 - cy, c as f64 + 0.5 - cx);
                    let u = (ca * dx + sa * dy) / rx;
                    let v = (-sa * dx + ca * dy) / ry;
                    if u * u + v * v <= 1.0 {
                        mask.set(r, c, class as ClassId);
                    }
                }
            }
        }
        let image = paint(&mask, cfg, &mut rng);
        samples.push(SegSample::new(id, image, mask)?);
    }
    let mut ds = InMemoryDataset::new(format!("synthetic-blobs-{}c-s{}", cfg.n_classes, cfg.seed), catalog, samples)?;
    let table = split_fixed(&ds.all_ids(), cfg.train_fraction, cfg.seed)?;
    ds.set_split(&table)?;
    Ok(ds)
}

fn paint(mask: &LabelMask, cfg: &SyntheticBlobConfig, rng: &mut impl Rng) -> Image {
    let (h, w) = mask.dims();
    let mut img = Image::zeros(h, w, 3);
    // Without correspondence each class gets an image-specific random colour.
    let per_image: Vec<[f32; 3]> = (0..cfg.n_classes)
        .map(|c| {
            if cfg.color_correspondence {
                class_color(c)
            } else {
                [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]
            }
        })
        .collect();
    for r in 0..h {
        for c in 0..w {
            let base = per_image[mask.get(r, c) as usize];
            let p = img.pixel_mut(r, c);
            for k in 0..3 {
                p[k] = (base[k] + cfg.noise * normal(rng)).clamp(0.0, 1.0);
            }
        }
    }
    img
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RandAugOp {
    AutoContrast,
    Equalize,
    Rotate,
    Color,
    Contrast,
    Brightness,
    Sharpness,
}

impl RandAugOp {
    pub const ALL: [RandAugOp; 7] = [
        RandAugOp::AutoContrast,
        RandAugOp::Equalize,
        RandAugOp::Rotate,
        RandAugOp::Color,
        RandAugOp::Contrast,
        RandAugOp::Brightness,
        RandAugOp::Sharpness,
    ];
}

/// Magnitude levels are expressed on a 0..=10 scale.
const MAGNITUDE_DENOM: f64 = 10.0;
const MAX_ROTATE_DEG: f64 = 30.0;
const MAX_ENHANCE: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationConfig {
    pub hflip_prob: f64,
    /// Range of the shorter side after rescaling, in pixels.
    pub scale_range: (usize, usize),
    pub crop_size: (usize, usize),
    pub randaug_ops: Vec<RandAugOp>,
    pub randaug_n: usize,
    pub randaug_magnitude: u32,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            hflip_prob: 0.5,
            scale_range: (400, 1600),
            crop_size: (1024, 1024),
            randaug_ops: RandAugOp::ALL.to_vec(),
            randaug_n: 2,
            randaug_magnitude: 9,
            seed: 0,
        }
    }
}

impl AugmentationConfig {
    /// Desk-scale preset: same pipeline with sizes relative to a `size×size` image.
    pub fn desk(size: usize) -> Self {
        AugmentationConfig {
            scale_range: (size * 3 / 4, size * 3 / 2),
            crop_size: (size, size),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scale_range.0 == 0 || self.scale_range.0 > self.scale_range.1 {
            return Err(Error::InvalidConfig(format!("bad scale range {:?}", self.scale_range)));
        }
        if self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            return Err(Error::InvalidConfig("crop size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::InvalidConfig("hflip_prob outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Dimensions after scaling the shorter side to `short` with the aspect ratio preserved.
pub fn scaled_dims(dims: (usize, usize), short: usize) -> (usize, usize) {
    let (h, w) = dims;
    if h <= w {
        (short, (libm::round(w as f64 * short as f64 / h as f64) as usize).max(1))
    } else {
        ((libm::round(h as f64 * short as f64 / w as f64) as usize).max(1), short)
    }
}

/// Flip, rescale, crop/pad, then RandAug; geometry applies to image and mask jointly.
pub fn augment(sample: &SegSample, cfg: &AugmentationConfig, ignore_id: ClassId, rng: &mut impl Rng) -> SegSample {
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if rng.random_bool(cfg.hflip_prob) {
        image = imageops::hflip_image(&image);
        mask = imageops::hflip_mask(&mask);
    }
    let short = rng.random_range(cfg.scale_range.0..=cfg.scale_range.1);
    let dims = scaled_dims(image.dims(), short);
    image = imageops::resize_image(&image, dims);
    mask = imageops::resize_mask(&mask, dims);

    let (ch, cw) = cfg.crop_size;
    let mut offset = |src: usize, dst: usize| -> isize {
        if src > dst {
            rng.random_range(0..=src - dst) as isize
        } else {
            -(((dst - src) / 2) as isize)
        }
    };
    let off = (offset(dims.0, ch), offset(dims.1, cw));
    let (mut image, mut mask) = imageops::window(&image, &mask, off, (ch, cw), ignore_id);

    if !cfg.randaug_ops.is_empty() {
        let level = cfg.randaug_magnitude as f64 / MAGNITUDE_DENOM;
        for _ in 0..cfg.randaug_n {
            let op = cfg.randaug_ops[rng.random_range(0..cfg.randaug_ops.len())];
            let sign = if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let factor = (1.0 + sign * MAX_ENHANCE * level) as f32;
            match op {
                RandAugOp::AutoContrast => image = imageops::auto_contrast(&image),
                RandAugOp::Equalize => image = imageops::equalize(&image),
                RandAugOp::Rotate => {
                    let (i, m) = imageops::rotate(&image, &mask, sign * MAX_ROTATE_DEG * level, ignore_id);
                    image = i;
                    mask = m;
                }
                RandAugOp::Color => image = imageops::color(&image, factor),
                RandAugOp::Contrast => image = imageops::contrast(&image, factor),
                RandAugOp::Brightness => image = imageops::brightness(&image, factor),
                RandAugOp::Sharpness => image = imageops::sharpness(&image, factor),
            }
        }
    }
    SegSample { image_id: sample.image_id.clone(), image, mask }
}

/// Resize image (bilinear) and mask (nearest) to `resolution`.
pub fn resize_to(sample: &SegSample, resolution: (usize, usize)) -> Result<SegSample> {
    if resolution.0 == 0 || resolution.1 == 0 {
        return Err(Error::InvalidConfig(format!("non-positive resolution {resolution:?}")));
    }
    Ok(SegSample {
        image_id: sample.image_id.clone(),
        image: imageops::resize_image(&sample.image, resolution),
        mask: imageops::resize_mask(&sample.mask, resolution),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{class_presence, validate_mask};
    use crate::digest::StreamRng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn small_cfg() -> SyntheticBlobConfig {
        SyntheticBlobConfig { images: 12, image_size: (24, 24), radius: (4.0, 9.0), ..Default::default() }
    }

    #[test]
    fn synthetic_generation_is_deterministic() {
        let cfg = SyntheticBlobConfig { n_classes: 3, images: 40, seed: 7, ..small_cfg() };
        let a = synth_blobs(&cfg).unwrap();
        let b = synth_blobs(&cfg).unwrap();
        assert_eq!(a.samples(), b.samples());
        assert_eq!(a.digest().unwrap(), b.digest().unwrap());
        let c = synth_blobs(&SyntheticBlobConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.digest().unwrap(), c.digest().unwrap());
    }

    #[test]
    fn synthetic_masks_validate() {
        let ds = synth_blobs(&SyntheticBlobConfig { n_classes: 5, ..small_cfg() }).unwrap();
        for s in ds.samples() {
            assert!(validate_mask(&s.mask, &ds.catalog).unwrap().is_ok());
        }
        assert!(ds.catalog.background_is_class);
    }

    #[test]
    fn split_fixed_sizes_and_partition() {
        let ids: Vec<String> = (0..783).map(|i| format!("img{i}")).collect();
        let t = split_fixed(&ids, 0.5, 3).unwrap();
        assert_eq!((t.train.len(), t.val.len()), (392, 391));
        assert_eq!(t, split_fixed(&ids, 0.5, 3).unwrap());
        let mut all: Vec<String> = t.train.iter().chain(&t.val).cloned().collect();
        all.sort();
        let mut expected = ids.clone();
        expected.sort();
        assert_eq!(all, expected);
        assert!(split_fixed(&ids, 1.0, 3).is_err());
        assert!(split_fixed(&ids, 0.0, 3).is_err());
    }

    #[test]
    fn aspect_preserving_rescale() {
        assert_eq!(scaled_dims((500, 1000), 800), (800, 1600));
        assert_eq!(scaled_dims((1000, 500), 800), (1600, 800));
    }

    #[test]
    fn augment_rescale_then_crop() {
        let img = Image::zeros(500, 1000, 3);
        let s = SegSample::new("a", img, LabelMask::filled(500, 1000, 1)).unwrap();
        let cfg = AugmentationConfig { scale_range: (800, 800), randaug_n: 0, hflip_prob: 0.0, ..Default::default() };
        let out = augment(&s, &cfg, 255, &mut StreamRng::seed_from_u64(0));
        // 800×1600 cropped to 1024×1024: rows padded (112 top), columns cropped.
        assert_eq!(out.mask.dims(), (1024, 1024));
        assert_eq!(out.mask.get(0, 0), 255);
        assert_eq!(out.mask.get(112, 0), 1);
        assert_eq!(out.mask.get(111, 0), 255);
        assert_eq!(out.mask.get(911, 500), 1);
        assert_eq!(out.mask.get(912, 500), 255);
    }

    #[test]
    fn forced_flip_reverses_mask_columns() {
        let mut mask = LabelMask::filled(8, 8, 0);
        mask.set(3, 1, 1);
        let s = SegSample::new("d", Image::zeros(8, 8, 3), mask).unwrap();
        let cfg = AugmentationConfig { hflip_prob: 1.0, scale_range: (8, 8), crop_size: (8, 8), randaug_n: 0, ..Default::default() };
        let out = augment(&s, &cfg, 255, &mut StreamRng::seed_from_u64(1));
        assert_eq!(out.mask.get(3, 6), 1);
        assert_eq!(out.mask.data.iter().filter(|&&v| v == 1).count(), 1);
    }

    #[test]
    fn resize_examples() {
        let ds = synth_blobs(&small_cfg()).unwrap();
        let s = &ds.samples()[0];
        assert_eq!(resize_to(s, s.mask.dims()).unwrap().mask, s.mask);
        assert_eq!(resize_to(s, (40, 32)).unwrap().image.dims(), (40, 32));
        assert!(resize_to(s, (0, 3)).is_err());
    }

    #[test]
    fn downsampling_keeps_classes_covering_five_percent() {
        // Oracle: any class covering >= 5% of a 1024² blob mask survives nearest 1024 -> 224.
        let cfg = SyntheticBlobConfig { n_classes: 4, images: 4, image_size: (1024, 1024), radius: (120.0, 400.0), ..Default::default() };
        let ds = synth_blobs(&cfg).unwrap();
        for s in ds.samples() {
            let total = (1024 * 1024) as f64;
            let big: Vec<ClassId> = class_presence(&s.mask, 255, 1)
                .into_iter()
                .filter(|&c| s.mask.data.iter().filter(|&&v| v == c).count() as f64 >= 0.05 * total)
                .collect();
            let small = resize_to(s, (224, 224)).unwrap();
            let kept = class_presence(&small.mask, 255, 1);
            for c in big {
                assert!(kept.contains(&c), "class {c} lost");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn augmentation_never_invents_labels(seed in 0u64..1000, flip in 0.0f64..=1.0, lo in 8usize..40, span in 0usize..40, ch in 4usize..48, cw in 4usize..48, n in 0usize..4) {
            let ds = synth_blobs(&SyntheticBlobConfig { images: 2, image_size: (20, 28), radius: (3.0, 8.0), seed, ..Default::default() }).unwrap();
            let s = &ds.samples()[0];
            let cfg = AugmentationConfig { hflip_prob: flip, scale_range: (lo, lo + span), crop_size: (ch, cw), randaug_n: n, ..Default::default() };
            let mut rng = StreamRng::seed_from_u64(seed);
            let out = augment(s, &cfg, 255, &mut rng);
            let mut allowed = s.mask.distinct_values();
            allowed.insert(255);
            prop_assert!(out.mask.distinct_values().is_subset(&allowed));
            prop_assert_eq!(out.mask.dims(), (ch, cw));
            prop_assert_eq!(out.image.dims(), (ch, cw));
        }
    }
}
