//! Segmentation value types: class catalogs, index masks, images and samples.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_IGNORE_ID: u8 = 255;

/// A class label stored in an index mask.
pub type ClassId = u8;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: ClassId,
    pub name: String,
}

/// Ordered set of classes with the ignore sentinel and background convention.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    pub classes: Vec<ClassEntry>,
    #[serde(default = "default_ignore")]
    pub ignore_id: ClassId,
    /// PPD convention: class 0 is background and is sampled over like any other class.
    #[serde(default)]
    pub background_is_class: bool,
}

fn default_ignore() -> ClassId {
    DEFAULT_IGNORE_ID
}

impl ClassCatalog {
    pub fn new(classes: Vec<(ClassId, String)>, ignore_id: ClassId, background_is_class: bool) -> Result<Self> {
        let cat = ClassCatalog {
            classes: classes.into_iter().map(|(id, name)| ClassEntry { id, name }).collect(),
            ignore_id,
            background_is_class,
        };
        cat.check()?;
        Ok(cat)
    }

    /// Catalog with ids `0..n` named `class_<i>`.
    pub fn numbered(n: usize, background_is_class: bool) -> Result<Self> {
        if n >= DEFAULT_IGNORE_ID as usize {
            return Err(Error::InvalidCatalog(format!("{n} classes do not fit below the ignore id")));
        }
        let classes = (0..n)
            .map(|i| {
                let name = if i == 0 && background_is_class { String::from("background") } else { format!("class_{i}") };
                (i as ClassId, name)
            })
            .collect();
        Self::new(classes, DEFAULT_IGNORE_ID, background_is_class)
    }

    pub fn check(&self) -> Result<()> {
        if self.classes.is_empty() {
            return Err(Error::InvalidCatalog("catalog has no classes".into()));
        }
        let mut seen = BTreeSet::new();
        for c in &self.classes {
            if c.id == self.ignore_id {
                return Err(Error::InvalidCatalog(format!("class `{}` uses the ignore id {}", c.name, c.id)));
            }
            if !seen.insert(c.id) {
                return Err(Error::InvalidCatalog(format!("duplicate class id {}", c.id)));
            }
        }
        if self.background_is_class && !seen.contains(&0) {
            return Err(Error::InvalidCatalog("background_is_class requires class id 0".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ClassId> + '_ {
        self.classes.iter().map(|c| c.id)
    }

    /// Position of `id` in catalog order; this is the confusion-matrix and logit index.
    pub fn index_of(&self, id: ClassId) -> Option<usize> {
        self.classes.iter().position(|c| c.id == id)
    }

    pub fn contains(&self, id: ClassId) -> bool {
        self.index_of(id).is_some()
    }

    /// Lookup table from raw label value to catalog index; `None` for ignore and unknown values.
    pub fn index_lut(&self) -> [Option<u16>; 256] {
        let mut lut = [None; 256];
        for (i, c) in self.classes.iter().enumerate() {
            lut[c.id as usize] = Some(i as u16);
        }
        lut
    }

    /// Classes the sampler iterates over: background (id 0) is excluded unless it is a class.
    pub fn sampled_classes(&self) -> Vec<ClassId> {
        // A catalog without a background class has no background id to drop: background
        // pixels carry the ignore id in that convention.
        let mut ids: Vec<ClassId> = self.ids().collect();
        ids.sort_unstable();
        ids
    }
}

/// Single-channel class-index mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<ClassId>,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, data: Vec<ClassId>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("mask data has {} values for {height}x{width}", data.len())));
        }
        Ok(LabelMask { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: ClassId) -> Self {
        LabelMask { height, width, data: vec![value; height * width] }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> ClassId {
        self.data[r * self.width + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: ClassId) {
        self.data[r * self.width + c] = v;
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn distinct_values(&self) -> BTreeSet<ClassId> {
        self.data.iter().copied().collect()
    }
}

/// An `H×W×C` image in HWC order with values in `[0, 1]`.
///
/// Encoder-specific normalization is applied by the encoder at input time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Shape(format!(
                "image data has {} values for {height}x{width}x{channels}",
                data.len()
            )));
        }
        Ok(Image { height, width, channels, data })
    }

    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Image { height, width, channels, data: vec![0.0; height * width * channels] }
    }

    #[inline]
    pub fn pixel(&self, r: usize, c: usize) -> &[f32] {
        let o = (r * self.width + c) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, r: usize, c: usize) -> &mut [f32] {
        let o = (r * self.width + c) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegSample {
    pub image_id: String,
    pub image: Image,
    pub mask: LabelMask,
}

impl SegSample {
    pub fn new(image_id: impl Into<String>, image: Image, mask: LabelMask) -> Result<Self> {
        if image.dims() != mask.dims() {
            return Err(Error::Shape(format!(
                "image {:?} and mask {:?} dimensions differ",
                image.dims(),
                mask.dims()
            )));
        }
        Ok(SegSample { image_id: image_id.into(), image, mask })
    }
}

/// A k-shot task: support images for adaptation and the untouched query split.
#[derive(Clone, Debug)]
pub struct FewShotTask {
    pub support: Vec<SegSample>,
    pub query: Vec<SegSample>,
    pub k: usize,
    pub catalog: ClassCatalog,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub value: ClassId,
    pub count: usize,
    /// First offending location as (row, col).
    pub first_at: (usize, usize),
}

impl core::fmt::Display for Violation {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        write!(
            f,
            "unknown class {} ({} pixels, first at row {}, col {})",
            self.value, self.count, self.first_at.0, self.first_at.1
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Validation {
    pub violations: Vec<Violation>,
}

impl Validation {
    pub fn is_ok(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check mask values against the catalog. A zero-area mask is a structural error.
pub fn validate_mask(mask: &LabelMask, catalog: &ClassCatalog) -> Result<Validation> {
    if mask.height == 0 || mask.width == 0 {
        return Err(Error::InvalidMask(format!("degenerate {}x{} mask", mask.height, mask.width)));
    }
    if mask.data.len() != mask.height * mask.width {
        return Err(Error::InvalidMask("data length does not match dimensions".into()));
    }
    let lut = catalog.index_lut();
    let mut bad: [Option<(usize, usize)>; 256] = [None; 256];
    let mut counts = [0usize; 256];
    for (i, &v) in mask.data.iter().enumerate() {
        if v == catalog.ignore_id || lut[v as usize].is_some() {
            continue;
        }
        counts[v as usize] += 1;
        if bad[v as usize].is_none() {
            bad[v as usize] = Some((i / mask.width, i % mask.width));
        }
    }
    let violations = (0..256)
        .filter_map(|v| bad[v].map(|at| Violation { value: v as ClassId, count: counts[v], first_at: at }))
        .collect();
    Ok(Validation { violations })
}

/// Validate and turn violations into an error.
pub fn ensure_valid_mask(mask: &LabelMask, catalog: &ClassCatalog) -> Result<()> {
    let v = validate_mask(mask, catalog)?;
    match v.violations.first() {
        None => Ok(()),
        Some(first) => Err(Error::InvalidMask(format!("{first}"))),
    }
}

/// Classes with at least `min_pixels` labeled pixels; ignore pixels never count.
pub fn class_presence(mask: &LabelMask, ignore_id: ClassId, min_pixels: usize) -> BTreeSet<ClassId> {
    let mut counts = [0usize; 256];
    for &v in &mask.data {
        counts[v as usize] += 1;
    }
    let min_pixels = min_pixels.max(1);
    (0..256usize)
        .filter(|&v| v != ignore_id as usize && counts[v] >= min_pixels)
        .map(|v| v as ClassId)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cat01() -> ClassCatalog {
        ClassCatalog::numbered(2, false).unwrap()
    }

    #[test]
    fn legal_values_validate() {
        let m = LabelMask::new(1, 3, vec![0, 1, 255]).unwrap();
        assert!(validate_mask(&m, &cat01()).unwrap().is_ok());
    }

    #[test]
    fn unknown_class_is_reported() {
        let m = LabelMask::new(2, 2, vec![0, 7, 1, 7]).unwrap();
        let v = validate_mask(&m, &cat01()).unwrap();
        assert_eq!(v.violations.len(), 1);
        assert_eq!(v.violations[0].value, 7);
        assert_eq!(v.violations[0].count, 2);
        assert_eq!(v.violations[0].first_at, (0, 1));
        assert!(alloc::format!("{}", v.violations[0]).starts_with("unknown class 7"));
        assert!(ensure_valid_mask(&m, &cat01()).is_err());
    }

    #[test]
    fn empty_mask_is_structural_error() {
        let m = LabelMask { height: 0, width: 0, data: vec![] };
        assert!(matches!(validate_mask(&m, &cat01()), Err(Error::InvalidMask(_))));
    }

    #[test]
    fn presence_examples() {
        let zeros = LabelMask::filled(4, 4, 0);
        assert_eq!(class_presence(&zeros, 255, 1), [0].into_iter().collect());

        let mut m = LabelMask::filled(4, 4, 0);
        for i in 0..3 {
            m.data[i] = 2;
        }
        assert!(!class_presence(&m, 255, 5).contains(&2));
        assert!(class_presence(&m, 255, 3).contains(&2));

        let ign = LabelMask::filled(3, 3, 255);
        assert!(class_presence(&ign, 255, 1).is_empty());
    }

    #[test]
    fn catalog_rejects_bad_ids() {
        assert!(ClassCatalog::new(vec![(0, "a".into()), (0, "b".into())], 255, false).is_err());
        assert!(ClassCatalog::new(vec![(255, "a".into())], 255, false).is_err());
        assert!(ClassCatalog::new(vec![(1, "a".into())], 255, true).is_err());
    }

    #[test]
    fn sample_requires_matching_dims() {
        let img = Image::zeros(2, 3, 3);
        assert!(SegSample::new("x", img.clone(), LabelMask::filled(3, 2, 0)).is_err());
        assert!(SegSample::new("x", img, LabelMask::filled(2, 3, 0)).is_ok());
    }

    fn arb_mask() -> impl Strategy<Value = LabelMask> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            proptest::collection::vec(prop_oneof![0u8..6, Just(255u8)], h * w)
                .prop_map(move |d| LabelMask::new(h, w, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn presence_at_one_is_distinct_non_ignore(m in arb_mask()) {
            let mut expected = m.distinct_values();
            expected.remove(&255);
            prop_assert_eq!(class_presence(&m, 255, 1), expected);
        }

        #[test]
        fn presence_is_monotone_in_min_pixels(m in arb_mask(), a in 1usize..20, b in 1usize..20) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(class_presence(&m, 255, hi).is_subset(&class_presence(&m, 255, lo)));
        }
    }
}
