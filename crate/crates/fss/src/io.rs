//! On-disk datasets: PNG images, single-channel index masks, split lists and catalogs.
//!
//! Layout under a dataset root:
//!
//! ```text
//! catalog.toml          classes, ignore id, background convention (generic datasets)
//! images/<id>.png       8-bit RGB (or grayscale, expanded to RGB)
//! masks/<id>.png        8-bit single-channel index map
//! splits/train.txt      one image id per line
//! splits/val.txt
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use fss_core::datamodel::{validate_mask, ClassCatalog, ClassId, Image, LabelMask, SegSample, DEFAULT_IGNORE_ID};
use fss_core::datasets::{split_fixed, Dataset, Split, SplitTable};
use image::{DynamicImage, GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How raw mask values map onto catalog ids.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Convention {
    /// Mask values are catalog ids already; the catalog comes from `catalog.toml`.
    #[default]
    Generic,
    /// Masks hold Cityscapes `labelIds`; they are mapped onto the 19 evaluation classes.
    Cityscapes,
    /// Binary plant masks: zero is background (a class), anything else is plant.
    Ppd,
}

impl Convention {
    pub fn builtin_catalog(self) -> Option<ClassCatalog> {
        match self {
            Convention::Generic => None,
            Convention::Cityscapes => {
                let classes = CITYSCAPES.iter().enumerate().map(|(i, (_, n))| (i as ClassId, n.to_string())).collect();
                Some(ClassCatalog::new(classes, DEFAULT_IGNORE_ID, false).expect("static catalog"))
            }
            Convention::Ppd => Some(ClassCatalog::new(vec![(0, "background".into()), (1, "plant".into())], DEFAULT_IGNORE_ID, true).expect("static catalog")),
        }
    }

    /// Lookup from raw mask value to catalog id.
    pub fn lut(self, ignore_id: ClassId) -> [ClassId; 256] {
        let mut lut = [0u8; 256];
        match self {
            Convention::Generic => lut.iter_mut().enumerate().for_each(|(i, v)| *v = i as u8),
            Convention::Cityscapes => {
                lut.fill(ignore_id);
                for (train_id, (label_id, _)) in CITYSCAPES.iter().enumerate() {
                    lut[*label_id as usize] = train_id as u8;
                }
            }
            Convention::Ppd => {
                lut.fill(1);
                lut[0] = 0;
            }
        }
        lut
    }
}

/// (labelId, name) of the evaluated Cityscapes classes, in train-id order.
const CITYSCAPES: [(u8, &str); 19] = [
    (7, "road"),
    (8, "sidewalk"),
    (11, "building"),
    (12, "wall"),
    (13, "fence"),
    (17, "pole"),
    (19, "traffic light"),
    (20, "traffic sign"),
    (21, "vegetation"),
    (22, "terrain"),
    (23, "sky"),
    (24, "person"),
    (25, "rider"),
    (26, "car"),
    (27, "truck"),
    (28, "bus"),
    (31, "train"),
    (32, "motorcycle"),
    (33, "bicycle"),
];

pub fn read_image(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok(Image::new(h as usize, w as usize, 3, data)?)
}

pub fn write_image(path: &Path, img: &Image) -> Result<()> {
    if img.channels != 3 {
        return Err(Error::Format(format!("{}: only 3-channel images can be written", path.display())));
    }
    let data = img.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    let buf = RgbImage::from_raw(img.width as u32, img.height as u32, data).expect("buffer size matches dims");
    buf.save(path).map_err(|e| Error::image(path, e))
}

/// Read a single-channel index mask without remapping.
pub fn read_mask(path: &Path) -> Result<LabelMask> {
    match image::open(path).map_err(|e| Error::image(path, e))? {
        DynamicImage::ImageLuma8(m) => {
            let (w, h) = m.dimensions();
            Ok(LabelMask::new(h as usize, w as usize, m.into_raw())?)
        }
        other => Err(Error::Format(format!("{}: mask must be 8-bit single-channel, got {:?}", path.display(), other.color()))),
    }
}

pub fn write_mask(path: &Path, mask: &LabelMask) -> Result<()> {
    let buf = GrayImage::from_raw(mask.width as u32, mask.height as u32, mask.data.clone()).expect("buffer size matches dims");
    buf.save(path).map_err(|e| Error::image(path, e))
}

pub fn read_catalog(path: &Path) -> Result<ClassCatalog> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cat: ClassCatalog = toml::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    cat.check()?;
    Ok(cat)
}

pub fn write_catalog(path: &Path, catalog: &ClassCatalog) -> Result<()> {
    let text = toml::to_string(catalog).map_err(|e| Error::Format(e.to_string()))?;
    write_atomic(path, text.as_bytes())
}

fn read_id_list(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')).map(String::from).collect())
}

/// Write through a temporary file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// A dataset read lazily from disk.
#[derive(Clone, Debug)]
pub struct DiskDataset {
    pub name: String,
    pub root: PathBuf,
    pub convention: Convention,
    catalog: ClassCatalog,
    splits: BTreeMap<String, Split>,
    lut: [ClassId; 256],
}

impl DiskDataset {
    /// Open a dataset root. Without `splits/`, ids are split 50/50 with `split_seed`.
    pub fn open(root: impl Into<PathBuf>, convention: Convention, split_seed: u64) -> Result<Self> {
        let root = root.into();
        let catalog = match convention.builtin_catalog() {
            Some(c) => c,
            None => read_catalog(&root.join("catalog.toml"))?,
        };
        let image_dir = root.join("images");
        let mut ids = Vec::new();
        for entry in fs::read_dir(&image_dir).map_err(|e| Error::io(&image_dir, e))? {
            let path = entry.map_err(|e| Error::io(&image_dir, e))?.path();
            if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")) {
                if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        if ids.is_empty() {
            return Err(Error::Format(format!("{}: no images", image_dir.display())));
        }
        let split_dir = root.join("splits");
        let table = if split_dir.is_dir() {
            SplitTable { train: read_id_list(&split_dir.join("train.txt"))?, val: read_id_list(&split_dir.join("val.txt"))? }
        } else {
            split_fixed(&ids, 0.5, split_seed)?
        };
        let mut splits = BTreeMap::new();
        for (list, split) in [(&table.train, Split::Train), (&table.val, Split::Val)] {
            for id in list {
                if ids.binary_search(id).is_err() {
                    return Err(Error::Format(format!("split lists unknown image {id:?}")));
                }
                if splits.insert(id.clone(), split).is_some() {
                    return Err(Error::Format(format!("image {id:?} is listed in both splits")));
                }
            }
        }
        if splits.len() != ids.len() {
            return Err(Error::Format(format!("{} images are in neither split", ids.len() - splits.len())));
        }
        let name = root.file_name().and_then(|n| n.to_str()).unwrap_or("dataset").to_string();
        let lut = convention.lut(catalog.ignore_id);
        Ok(DiskDataset { name, root, convention, catalog, splits, lut })
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn load_sample(&self, id: &str) -> Result<SegSample> {
        if !self.splits.contains_key(id) {
            return Err(fss_core::Error::UnknownImage(id.into()).into());
        }
        let image = read_image(&self.root.join("images").join(format!("{id}.png")))?;
        let mask = self.read_mapped_mask(id)?;
        Ok(SegSample::new(id, image, mask)?)
    }

    fn read_mapped_mask(&self, id: &str) -> Result<LabelMask> {
        let path = self.root.join("masks").join(format!("{id}.png"));
        let mut mask = read_mask(&path)?;
        mask.data.iter_mut().for_each(|v| *v = self.lut[*v as usize]);
        let report = validate_mask(&mask, &self.catalog)?;
        if !report.is_ok() {
            return Err(Error::Format(format!("{}: {}", path.display(), report.violations[0])));
        }
        Ok(mask)
    }
}

fn core_err(e: Error) -> fss_core::Error {
    match e {
        Error::Core(c) => c,
        other => fss_core::Error::Load(other.to_string()),
    }
}

impl Dataset for DiskDataset {
    fn name(&self) -> &str {
        &self.name
    }

    fn catalog(&self) -> &ClassCatalog {
        &self.catalog
    }

    fn ids(&self, split: Split) -> Vec<String> {
        self.splits.iter().filter(|(_, s)| **s == split).map(|(id, _)| id.clone()).collect()
    }

    fn load(&self, id: &str) -> fss_core::Result<SegSample> {
        self.load_sample(id).map_err(core_err)
    }

    fn load_mask(&self, id: &str) -> fss_core::Result<LabelMask> {
        if !self.splits.contains_key(id) {
            return Err(fss_core::Error::UnknownImage(id.into()));
        }
        self.read_mapped_mask(id).map_err(core_err)
    }
}

/// Write any dataset in the generic on-disk layout.
pub fn export_dataset<D: Dataset + ?Sized>(dataset: &D, root: &Path) -> Result<()> {
    fs::create_dir_all(root.join("images")).map_err(|e| Error::io(root, e))?;
    fs::create_dir_all(root.join("masks")).map_err(|e| Error::io(root, e))?;
    write_catalog(&root.join("catalog.toml"), dataset.catalog())?;
    for split in [Split::Train, Split::Val] {
        let ids = dataset.ids(split);
        let mut list = ids.join("\n");
        list.push('\n');
        write_atomic(&root.join("splits").join(format!("{}.txt", split.name())), list.as_bytes())?;
        for id in ids {
            let s = dataset.load(&id)?;
            write_image(&root.join("images").join(format!("{id}.png")), &s.image)?;
            write_mask(&root.join("masks").join(format!("{id}.png")), &s.mask)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cityscapes_lut_maps_label_ids() {
        let lut = Convention::Cityscapes.lut(255);
        assert_eq!(lut[7], 0);
        assert_eq!(lut[33], 18);
        assert_eq!(lut[0], 255);
        assert_eq!(lut[255], 255);
        assert_eq!(Convention::Cityscapes.builtin_catalog().unwrap().len(), 19);
    }

    #[test]
    fn ppd_lut_is_binary() {
        let lut = Convention::Ppd.lut(255);
        assert_eq!(lut[0], 0);
        assert!(lut[1..].iter().all(|&v| v == 1));
        let cat = Convention::Ppd.builtin_catalog().unwrap();
        assert!(cat.background_is_class);
        assert_eq!(cat.len(), 2);
    }
}
