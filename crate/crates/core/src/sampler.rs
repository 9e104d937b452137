//! k-shot task construction from an indexed dataset.
//!
//! For each class in a fixed order, `k` images are drawn uniformly without
//! replacement from the training images containing that class and not yet
//! in the support set. If a class runs out of candidates the whole draw
//! restarts from an empty support set, up to `max_restarts` times.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::datamodel::{class_presence, ensure_valid_mask, ClassId, FewShotTask};
use crate::datasets::{Dataset, Split};
use crate::digest::{stream, Hasher, PRNG_ID};
use crate::error::{Error, Result};

pub const DEFAULT_MAX_RESTARTS: usize = 1000;

/// Per-class lists of training images whose mask contains the class.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PresenceIndex {
    pub per_class: BTreeMap<ClassId, Vec<String>>,
    pub min_pixels: usize,
}

impl PresenceIndex {
    pub fn images_with(&self, class: ClassId) -> &[String] {
        self.per_class.get(&class).map(|v| v.as_slice()).unwrap_or(&[])
    }
}

/// Scan the training split and record, for every sampled-over class, the images containing it.
pub fn build_index<D: Dataset + ?Sized>(dataset: &D, min_pixels: usize) -> Result<PresenceIndex> {
    let catalog = dataset.catalog();
    let classes = catalog.sampled_classes();
    let mut per_class: BTreeMap<ClassId, Vec<String>> = classes.iter().map(|&c| (c, Vec::new())).collect();
    for id in dataset.ids(Split::Train) {
        let mask = dataset.load_mask(&id)?;
        ensure_valid_mask(&mask, catalog)?;
        for c in class_presence(&mask, catalog.ignore_id, min_pixels) {
            if let Some(list) = per_class.get_mut(&c) {
                list.push(id.clone());
            }
        }
    }
    for (c, list) in per_class.iter_mut() {
        if list.is_empty() {
            return Err(Error::ClassUnsatisfiable(*c as u32));
        }
        list.sort();
    }
    Ok(PresenceIndex { per_class, min_pixels })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub k: usize,
    pub seed: u64,
    pub class_order: Vec<ClassId>,
    pub max_restarts: usize,
}

impl SamplerConfig {
    /// Ascending class order over the index's classes.
    pub fn new(index: &PresenceIndex, k: usize, seed: u64) -> Self {
        SamplerConfig { k, seed, class_order: index.per_class.keys().copied().collect(), max_restarts: DEFAULT_MAX_RESTARTS }
    }

    fn validate(&self, index: &PresenceIndex) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        if self.max_restarts == 0 {
            return Err(Error::InvalidConfig("max_restarts must be positive".into()));
        }
        let order: BTreeSet<ClassId> = self.class_order.iter().copied().collect();
        let classes: BTreeSet<ClassId> = index.per_class.keys().copied().collect();
        if order.len() != self.class_order.len() || order != classes {
            return Err(Error::InvalidConfig(format!(
                "class_order {:?} is not a permutation of the indexed classes {:?}",
                self.class_order, classes
            )));
        }
        Ok(())
    }
}

/// Support image ids plus the number of restarts the draw needed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportDraw {
    pub ids: Vec<String>,
    pub restarts: usize,
}

pub fn sample_support(index: &PresenceIndex, cfg: &SamplerConfig) -> Result<SupportDraw> {
    cfg.validate(index)?;
    // A class with fewer than k candidates can never be satisfied.
    if cfg.class_order.iter().any(|c| index.images_with(*c).len() < cfg.k) {
        return Err(Error::InfeasibleTask { restarts: 0 });
    }
    let mut rng = stream(cfg.seed, &["sample_support"]);
    'attempt: for attempt in 0..=cfg.max_restarts {
        let mut support: Vec<String> = Vec::with_capacity(cfg.k * cfg.class_order.len());
        let mut taken: BTreeSet<&str> = BTreeSet::new();
        for class in &cfg.class_order {
            let available: Vec<&String> = index.images_with(*class).iter().filter(|id| !taken.contains(id.as_str())).collect();
            if available.len() < cfg.k {
                continue 'attempt;
            }
            for i in rand::seq::index::sample(&mut rng, available.len(), cfg.k) {
                let id = available[i];
                taken.insert(id.as_str());
                support.push(id.clone());
            }
        }
        return Ok(SupportDraw { ids: support, restarts: attempt });
    }
    Err(Error::InfeasibleTask { restarts: cfg.max_restarts })
}

/// Reproducible description of a sampled task.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskManifest {
    pub dataset: String,
    pub dataset_digest: String,
    pub seed: u64,
    pub k: usize,
    pub class_order: Vec<ClassId>,
    pub min_pixels: usize,
    pub prng: String,
    pub restarts: usize,
    pub support: Vec<String>,
    pub query_split: String,
}

impl TaskManifest {
    pub fn digest(&self) -> String {
        let mut h = Hasher::new();
        h.str(&self.dataset).str(&self.dataset_digest).u64(self.seed).u64(self.k as u64);
        h.bytes(&self.class_order).u64(self.min_pixels as u64).str(&self.prng).u64(self.restarts as u64);
        for id in &self.support {
            h.str(id);
        }
        h.str(&self.query_split);
        h.finish_hex()
    }
}

/// Caches the presence index and dataset digest for repeated task draws.
pub struct TaskSampler<'d, D: Dataset + ?Sized> {
    dataset: &'d D,
    index: PresenceIndex,
    digest: String,
}

impl<'d, D: Dataset + ?Sized> TaskSampler<'d, D> {
    pub fn new(dataset: &'d D, min_pixels: usize) -> Result<Self> {
        let index = build_index(dataset, min_pixels)?;
        let digest = dataset.digest()?;
        Ok(TaskSampler { dataset, index, digest })
    }

    pub fn index(&self) -> &PresenceIndex {
        &self.index
    }

    pub fn dataset_digest(&self) -> &str {
        &self.digest
    }

    pub fn manifest(&self, cfg: &SamplerConfig) -> Result<TaskManifest> {
        let draw = sample_support(&self.index, cfg)?;
        let query: BTreeSet<String> = self.dataset.ids(Split::Val).into_iter().collect();
        if let Some(dup) = draw.ids.iter().find(|id| query.contains(*id)) {
            return Err(Error::SupportQueryOverlap(dup.clone()));
        }
        Ok(TaskManifest {
            dataset: self.dataset.name().into(),
            dataset_digest: self.digest.clone(),
            seed: cfg.seed,
            k: cfg.k,
            class_order: cfg.class_order.clone(),
            min_pixels: self.index.min_pixels,
            prng: PRNG_ID.into(),
            restarts: draw.restarts,
            support: draw.ids,
            query_split: Split::Val.name().into(),
        })
    }

    /// Load the support images named by a manifest and the full evaluation split.
    pub fn materialize(&self, manifest: &TaskManifest) -> Result<FewShotTask> {
        if manifest.dataset_digest != self.digest {
            return Err(Error::InvalidConfig("manifest was drawn from a different dataset".into()));
        }
        let support = manifest.support.iter().map(|id| self.dataset.load(id)).collect::<Result<Vec<_>>>()?;
        let query_ids = self.dataset.ids(Split::Val);
        if let Some(dup) = manifest.support.iter().find(|id| query_ids.contains(id)) {
            return Err(Error::SupportQueryOverlap(dup.clone()));
        }
        let query = query_ids.iter().map(|id| self.dataset.load(id)).collect::<Result<Vec<_>>>()?;
        Ok(FewShotTask { support, query, k: manifest.k, catalog: self.dataset.catalog().clone(), seed: manifest.seed })
    }

    pub fn make_task(&self, k: usize, seed: u64) -> Result<(FewShotTask, TaskManifest)> {
        let cfg = SamplerConfig::new(&self.index, k, seed);
        let manifest = self.manifest(&cfg)?;
        Ok((self.materialize(&manifest)?, manifest))
    }
}

/// One-shot convenience: index the dataset and draw a task with default options.
pub fn make_task<D: Dataset + ?Sized>(dataset: &D, k: usize, seed: u64) -> Result<(FewShotTask, TaskManifest)> {
    TaskSampler::new(dataset, 1)?.make_task(k, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{ClassCatalog, Image, LabelMask, SegSample};
    use crate::datasets::{synth_blobs, InMemoryDataset, SplitTable, SyntheticBlobConfig};
    use alloc::string::ToString;
    use alloc::vec;

    /// 10 images; class 3 only in images 2 and 5; classes 1 and 2 everywhere.
    fn fixture() -> InMemoryDataset {
        let cat = ClassCatalog::numbered(4, false).unwrap();
        let samples = (0..10)
            .map(|i| {
                let mut m = LabelMask::filled(2, 2, 1);
                m.set(0, 1, 2);
                if i == 2 || i == 5 {
                    m.set(1, 1, 3);
                }
                if i % 2 == 0 {
                    m.set(1, 0, 0);
                }
                SegSample::new(format!("{i}"), Image::zeros(2, 2, 3), m).unwrap()
            })
            .collect();
        InMemoryDataset::new("fixture", cat, samples).unwrap()
    }

    #[test]
    fn index_matches_brute_force_presence() {
        let idx = build_index(&fixture(), 1).unwrap();
        assert_eq!(idx.images_with(3), &["2".to_string(), "5".to_string()]);
        assert_eq!(idx.images_with(1).len(), 10);
        assert_eq!(idx.images_with(0), &["0", "2", "4", "6", "8"].map(String::from));
    }

    #[test]
    fn universal_presence_lists_every_image() {
        let cat = ClassCatalog::numbered(5, false).unwrap();
        let samples = (0..6)
            .map(|i| SegSample::new(format!("{i}"), Image::zeros(1, 5, 3), LabelMask::new(1, 5, vec![0, 1, 2, 3, 4]).unwrap()).unwrap())
            .collect();
        let ds = InMemoryDataset::new("u", cat, samples).unwrap();
        let idx = build_index(&ds, 1).unwrap();
        assert!(idx.per_class.values().all(|v| v.len() == 6));
    }

    #[test]
    fn absent_class_is_unsatisfiable() {
        let cat = ClassCatalog::numbered(3, false).unwrap();
        let ds = InMemoryDataset::new("x", cat, vec![SegSample::new("a", Image::zeros(1, 2, 3), LabelMask::new(1, 2, vec![0, 1]).unwrap()).unwrap()]).unwrap();
        assert_eq!(build_index(&ds, 1), Err(Error::ClassUnsatisfiable(2)));
    }

    #[test]
    fn support_has_nk_distinct_images() {
        let ds = synth_blobs(&SyntheticBlobConfig { n_classes: 5, images: 80, image_size: (24, 24), radius: (4.0, 8.0), ..Default::default() }).unwrap();
        let s = TaskSampler::new(&ds, 1).unwrap();
        let (task, m) = s.make_task(2, 9).unwrap();
        assert_eq!(task.support.len(), 10);
        let distinct: BTreeSet<&String> = m.support.iter().collect();
        assert_eq!(distinct.len(), 10);
        assert_eq!(s.make_task(2, 9).unwrap().1, m);
    }

    #[test]
    fn background_as_class_one_shot_gives_two_images() {
        // Two-class foreground/background catalog with background counted as a class.
        let cat = ClassCatalog::new(vec![(0, "background".into()), (1, "plant".into())], 255, true).unwrap();
        let samples = (0..8)
            .map(|i| SegSample::new(format!("p{i}"), Image::zeros(2, 2, 3), LabelMask::new(2, 2, vec![0, 0, 1, 1]).unwrap()).unwrap())
            .collect();
        let mut ds = InMemoryDataset::new("ppd-like", cat, samples).unwrap();
        let table = crate::datasets::split_fixed(&ds.all_ids(), 0.5, 1).unwrap();
        ds.set_split(&table).unwrap();
        let (task, _) = make_task(&ds, 1, 3).unwrap();
        assert_eq!(task.support.len(), 2);
        assert_eq!(task.query.len(), 4);
    }

    #[test]
    fn k_beyond_any_list_is_infeasible() {
        let ds = fixture();
        assert!(matches!(make_task(&ds, 3, 1), Err(Error::InfeasibleTask { .. })));
    }

    #[test]
    fn restarts_are_bounded() {
        // Class 1 is only in {a, b}; class 2 only in {a, b}, k = 1 → always feasible in some order,
        // but with class 1 and 2 each needing 2 from the same 2 images it never is.
        let mut per_class = BTreeMap::new();
        per_class.insert(1u8, vec!["a".to_string(), "b".to_string()]);
        per_class.insert(2u8, vec!["a".to_string(), "b".to_string()]);
        let idx = PresenceIndex { per_class, min_pixels: 1 };
        let cfg = SamplerConfig { k: 2, seed: 0, class_order: vec![1, 2], max_restarts: 5 };
        assert_eq!(sample_support(&idx, &cfg), Err(Error::InfeasibleTask { restarts: 5 }));
        // k = 1: the second class always has one image left.
        let cfg = SamplerConfig { k: 1, ..cfg };
        assert_eq!(sample_support(&idx, &cfg).unwrap().ids.len(), 2);
    }

    #[test]
    fn restart_recovers_from_unlucky_draws() {
        // Class 1 ∈ {a, b, c}, class 2 ∈ {a}: drawing `a` for class 1 forces a restart.
        let mut per_class = BTreeMap::new();
        per_class.insert(1u8, vec!["a".to_string(), "b".to_string(), "c".to_string()]);
        per_class.insert(2u8, vec!["a".to_string()]);
        let idx = PresenceIndex { per_class, min_pixels: 1 };
        let mut saw_restart = false;
        for seed in 0..50 {
            let d = sample_support(&idx, &SamplerConfig { k: 1, seed, class_order: vec![1, 2], max_restarts: 1000 }).unwrap();
            assert_eq!(d.ids[1], "a");
            assert_ne!(d.ids[0], "a");
            saw_restart |= d.restarts > 0;
        }
        assert!(saw_restart);
    }

    #[test]
    fn class_order_must_be_a_permutation() {
        let idx = build_index(&fixture(), 1).unwrap();
        let cfg = SamplerConfig { k: 1, seed: 0, class_order: vec![0, 1, 1, 3], max_restarts: 10 };
        assert!(matches!(sample_support(&idx, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn overlapping_split_is_rejected() {
        let mut ds = fixture();
        ds.set_split(&SplitTable { train: vec![], val: vec!["2".into()] }).unwrap();
        // Image 2 is now in val only, so it can no longer be drawn; support stays disjoint.
        let s = TaskSampler::new(&ds, 1).unwrap();
        let m = s.manifest(&SamplerConfig::new(s.index(), 1, 0)).unwrap();
        assert!(!m.support.contains(&"2".to_string()));
        let mut bad = m.clone();
        bad.support.push("2".into());
        assert_eq!(s.materialize(&bad).unwrap_err(), Error::SupportQueryOverlap("2".into()));
    }
}
