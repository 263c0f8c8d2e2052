//! Synthetic place datasets: clusters of feature vectors standing in for
//! images of real-world places.
//!
//! Places are grouped under archetypes — shared centers that make some
//! places mutually confusable, the structure that makes hard mining
//! matter. Each place center is its archetype center plus Gaussian noise
//! (`sigma_archetype`), each image is the place center plus smaller noise
//! (`sigma_within`).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::l2_normalize;
use crate::sampler::PlaceId;

const DATASET_MAGIC: &[u8; 8] = b"GPMDATA\x01";

/// Parameters of the synthetic generator.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct GeneratorConfig {
    pub n_places: usize,
    pub images_per_place_min: usize,
    pub images_per_place_max: usize,
    pub feature_dim: usize,
    /// Number of archetype centers; fewer archetypes means more places
    /// sharing a neighborhood and a harder dataset.
    pub n_archetypes: usize,
    pub sigma_within: f64,
    pub sigma_archetype: f64,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_places == 0 {
            return Err(Error::Config("n_places must be >= 1".into()));
        }
        if self.images_per_place_min < 2 {
            return Err(Error::Config(
                "images_per_place_min must be >= 2 so places have positive pairs".into(),
            ));
        }
        if self.images_per_place_max < self.images_per_place_min {
            return Err(Error::Config(
                "images_per_place_max must be >= images_per_place_min".into(),
            ));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if self.n_archetypes == 0 || self.n_archetypes > self.n_places {
            return Err(Error::Config(format!(
                "n_archetypes must be in [1, n_places], got {}",
                self.n_archetypes
            )));
        }
        if self.sigma_within < 0.0 || !self.sigma_within.is_finite() {
            return Err(Error::Config("sigma_within must be non-negative".into()));
        }
        if !self.sigma_archetype.is_finite() || self.sigma_within >= self.sigma_archetype {
            return Err(Error::Config(format!(
                "sigma_within ({}) must be smaller than sigma_archetype ({}) \
                 or places are indistinguishable",
                self.sigma_within, self.sigma_archetype
            )));
        }
        Ok(())
    }
}

/// One labeled place: a set of feature vectors sharing an identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Place {
    pub id: PlaceId,
    pub images: Vec<Vec<f64>>,
}

/// An immutable collection of places plus the generator metadata that
/// produced it (when synthetic).
#[derive(Clone, Debug)]
pub struct PlaceDataset {
    feature_dim: usize,
    places: Vec<Place>,
    by_id: HashMap<PlaceId, usize>,
    pub generator: Option<GeneratorConfig>,
}

impl PartialEq for PlaceDataset {
    fn eq(&self, other: &Self) -> bool {
        self.feature_dim == other.feature_dim
            && self.places == other.places
            && self.generator == other.generator
    }
}

impl PlaceDataset {
    /// Validates structure: unique ids, non-empty finite images of the
    /// right dimension. (File loading additionally requires two or more
    /// images per place; internal views such as a train split may hold
    /// fewer.)
    pub fn new(
        places: Vec<Place>,
        feature_dim: usize,
        generator: Option<GeneratorConfig>,
    ) -> Result<Self> {
        if places.is_empty() {
            return Err(Error::Empty("dataset with no places".into()));
        }
        let mut by_id = HashMap::with_capacity(places.len());
        for (idx, place) in places.iter().enumerate() {
            if by_id.insert(place.id, idx).is_some() {
                return Err(Error::Validation(format!(
                    "duplicate place_id {}",
                    place.id
                )));
            }
            if place.images.is_empty() {
                return Err(Error::Validation(format!(
                    "place {} has no images",
                    place.id
                )));
            }
            for img in &place.images {
                if img.len() != feature_dim {
                    return Err(Error::Validation(format!(
                        "place {} has an image of dim {}, expected {}",
                        place.id,
                        img.len(),
                        feature_dim
                    )));
                }
                if img.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "place {} contains non-finite features",
                        place.id
                    )));
                }
            }
        }
        Ok(PlaceDataset {
            feature_dim,
            places,
            by_id,
            generator,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn n_places(&self) -> usize {
        self.places.len()
    }

    pub fn n_images(&self) -> usize {
        self.places.iter().map(|p| p.images.len()).sum()
    }

    pub fn places(&self) -> &[Place] {
        &self.places
    }

    pub fn place_by_id(&self, id: PlaceId) -> Option<&Place> {
        self.by_id.get(&id).map(|&idx| &self.places[idx])
    }

    pub fn place_ids(&self) -> impl Iterator<Item = PlaceId> + '_ {
        self.places.iter().map(|p| p.id)
    }
}

fn standard_normal(rng: &mut StdRng) -> f64 {
    rng.sample(StandardNormal)
}

fn random_unit_vector(rng: &mut StdRng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| standard_normal(rng)).collect();
        if let Ok(u) = l2_normalize(&v) {
            return u;
        }
    }
}

/// Generates a synthetic dataset: archetype centers on the unit sphere,
/// place centers scattered around them, images scattered around place
/// centers. Deterministic per seed.
pub fn generate(cfg: &GeneratorConfig) -> Result<PlaceDataset> {
    cfg.validate()?;
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let centers: Vec<Vec<f64>> = (0..cfg.n_archetypes)
        .map(|_| random_unit_vector(&mut rng, cfg.feature_dim))
        .collect();

    let mut places = Vec::with_capacity(cfg.n_places);
    for i in 0..cfg.n_places {
        let archetype = &centers[i % cfg.n_archetypes];
        let place_center: Vec<f64> = archetype
            .iter()
            .map(|c| c + cfg.sigma_archetype * standard_normal(&mut rng))
            .collect();
        let n_images = rng.random_range(cfg.images_per_place_min..=cfg.images_per_place_max);
        let images = (0..n_images)
            .map(|_| {
                place_center
                    .iter()
                    .map(|c| c + cfg.sigma_within * standard_normal(&mut rng))
                    .collect()
            })
            .collect();
        places.push(Place {
            id: i as PlaceId,
            images,
        });
    }
    PlaceDataset::new(places, cfg.feature_dim, Some(cfg.clone()))
}

/// Archetype index of a generated place (assignment is round-robin).
pub fn archetype_of(cfg: &GeneratorConfig, place_id: PlaceId) -> usize {
    place_id as usize % cfg.n_archetypes
}

#[derive(Serialize, Deserialize)]
struct DatasetHeader {
    feature_dim: usize,
    n_places: usize,
    generator: Option<GeneratorConfig>,
}

/// Writes the self-describing binary format: magic, JSON header, then per
/// place `id, n_images` and a row-major f64 payload. Round-trips
/// bit-exactly.
pub fn save(ds: &PlaceDataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    let header = serde_json::to_vec(&DatasetHeader {
        feature_dim: ds.feature_dim,
        n_places: ds.places.len(),
        generator: ds.generator.clone(),
    })
    .map_err(|e| Error::Validation(format!("encoding dataset header: {e}")))?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;
    for place in &ds.places {
        w.write_all(&place.id.to_le_bytes())?;
        w.write_all(&(place.images.len() as u32).to_le_bytes())?;
        for img in &place.images {
            for v in img {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        self.inner.read_exact(buf).map_err(|e| Error::Parse {
            location: format!("offset {}", self.offset),
            msg: format!("reading {what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.read_exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn read_f64(&mut self, what: &str) -> Result<f64> {
        let mut b = [0u8; 8];
        self.read_exact(&mut b, what)?;
        Ok(f64::from_le_bytes(b))
    }
}

/// Loads and validates a dataset file. Beyond structural validation this
/// enforces the dataset-file invariant that every place has at least two
/// images.
pub fn load(path: &Path) -> Result<PlaceDataset> {
    let mut r = Cursor {
        inner: BufReader::new(File::open(path)?),
        offset: 0,
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic, "magic")?;
    if &magic != DATASET_MAGIC {
        return Err(Error::Parse {
            location: "offset 0".into(),
            msg: "not a dataset file (bad magic)".into(),
        });
    }
    let header_len = r.read_u32("header length")? as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes, "header")?;
    let header: DatasetHeader = serde_json::from_slice(&header_bytes).map_err(|e| Error::Parse {
        location: "header".into(),
        msg: e.to_string(),
    })?;

    let mut places = Vec::with_capacity(header.n_places);
    for _ in 0..header.n_places {
        let id = r.read_u32("place id")?;
        let n_images = r.read_u32("image count")? as usize;
        if n_images < 2 {
            return Err(Error::Validation(format!(
                "place {id} has {n_images} image(s); dataset files require at least 2"
            )));
        }
        let mut images = Vec::with_capacity(n_images);
        for _ in 0..n_images {
            let mut img = Vec::with_capacity(header.feature_dim);
            for _ in 0..header.feature_dim {
                img.push(r.read_f64("feature")?);
            }
            images.push(img);
        }
        places.push(Place { id, images });
    }
    PlaceDataset::new(places, header.feature_dim, header.generator)
}

/// Debug export: one CSV row per image.
pub fn export_csv(ds: &PlaceDataset, w: &mut impl Write) -> Result<()> {
    let cols: Vec<String> = (0..ds.feature_dim).map(|d| format!("f{d}")).collect();
    writeln!(w, "place_id,image_index,{}", cols.join(","))?;
    for place in &ds.places {
        for (i, img) in place.images.iter().enumerate() {
            let vals: Vec<String> = img.iter().map(|v| v.to_string()).collect();
            writeln!(w, "{},{},{}", place.id, i, vals.join(","))?;
        }
    }
    Ok(())
}

/// Held-out queries and retrieval references, disjoint per place.
#[derive(Clone, Debug)]
pub struct EvalSplit {
    pub queries: Vec<(Vec<f64>, PlaceId)>,
    pub references: Vec<(Vec<f64>, PlaceId)>,
}

/// Holds out `floor(holdout_fraction * n_images)` images of each place as
/// queries; the rest become references. Places too small to yield a query
/// contribute references only.
pub fn make_eval_split(ds: &PlaceDataset, holdout_fraction: f64, seed: u64) -> Result<EvalSplit> {
    if !(0.0..1.0).contains(&holdout_fraction) {
        return Err(Error::Config(format!(
            "holdout_fraction must be in [0,1), got {holdout_fraction}"
        )));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut queries = Vec::new();
    let mut references = Vec::new();
    for place in ds.places() {
        let n = place.images.len();
        let n_queries = (holdout_fraction * n as f64).floor() as usize;
        if holdout_fraction > 0.0 && n_queries == 0 {
            log::warn!(
                "place {} has only {n} images; skipped from queries",
                place.id
            );
        }
        let mut order: Vec<usize> = (0..n).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for (rank, &img_idx) in order.iter().enumerate() {
            let item = (place.images[img_idx].clone(), place.id);
            if rank < n_queries {
                queries.push(item);
            } else {
                references.push(item);
            }
        }
    }
    Ok(EvalSplit { queries, references })
}

/// Regroups the reference side of a split into a dataset for training,
/// so held-out queries never influence the model.
pub fn train_view(split: &EvalSplit, feature_dim: usize) -> Result<PlaceDataset> {
    let mut grouped: std::collections::BTreeMap<PlaceId, Vec<Vec<f64>>> =
        std::collections::BTreeMap::new();
    for (feat, id) in &split.references {
        grouped.entry(*id).or_default().push(feat.clone());
    }
    let places = grouped
        .into_iter()
        .map(|(id, images)| Place { id, images })
        .collect();
    PlaceDataset::new(places, feature_dim, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::dot;

    fn base_cfg() -> GeneratorConfig {
        GeneratorConfig {
            n_places: 30,
            images_per_place_min: 4,
            images_per_place_max: 4,
            feature_dim: 8,
            n_archetypes: 5,
            sigma_within: 0.02,
            sigma_archetype: 0.1,
            seed: 42,
        }
    }

    #[test]
    fn zero_within_noise_gives_identical_images() {
        let mut cfg = base_cfg();
        cfg.sigma_within = 0.0;
        let ds = generate(&cfg).unwrap();
        for place in ds.places() {
            for img in &place.images {
                assert_eq!(img, &place.images[0]);
            }
        }
    }

    #[test]
    fn one_archetype_per_place_is_valid() {
        let mut cfg = base_cfg();
        cfg.n_archetypes = cfg.n_places;
        let ds = generate(&cfg).unwrap();
        assert_eq!(ds.n_places(), cfg.n_places);
        // every place draws from its own archetype
        for p in ds.places() {
            assert_eq!(archetype_of(&cfg, p.id), p.id as usize);
        }
    }

    fn place_center(place: &Place) -> Vec<f64> {
        let d = place.images[0].len();
        (0..d)
            .map(|i| place.images.iter().map(|img| img[i]).sum::<f64>() / place.images.len() as f64)
            .collect()
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        dot(a, b) / (dot(a, a).sqrt() * dot(b, b).sqrt())
    }

    #[test]
    fn archetypes_make_places_confusable() {
        let mut cfg = base_cfg();
        cfg.n_places = 200;
        cfg.n_archetypes = 10;
        cfg.feature_dim = 16;
        let ds = generate(&cfg).unwrap();
        let centers: Vec<(usize, Vec<f64>)> = ds
            .places()
            .iter()
            .map(|p| (archetype_of(&cfg, p.id), place_center(p)))
            .collect();

        let mut within = (0.0, 0u64);
        let mut across = (0.0, 0u64);
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                let s = cosine(&centers[i].1, &centers[j].1);
                if centers[i].0 == centers[j].0 {
                    within = (within.0 + s, within.1 + 1);
                } else {
                    across = (across.0 + s, across.1 + 1);
                }
            }
        }
        let mean_within = within.0 / within.1 as f64;
        let mean_across = across.0 / across.1 as f64;
        assert!(
            mean_within > mean_across + 0.1,
            "within {mean_within} vs across {mean_across}"
        );
    }

    #[test]
    fn difficulty_knob_is_monotone() {
        // nearest-neighbor retrieval on raw features degrades as the
        // archetype gap shrinks
        fn raw_recall(cfg: &GeneratorConfig) -> f64 {
            let ds = generate(cfg).unwrap();
            let split = make_eval_split(&ds, 0.25, 9).unwrap();
            let mut hits = 0usize;
            for (q, qid) in &split.queries {
                let best = split
                    .references
                    .iter()
                    .enumerate()
                    .min_by(|(_, (a, _)), (_, (b, _))| {
                        let da: f64 = a.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum();
                        let db: f64 = b.iter().zip(q).map(|(x, y)| (x - y) * (x - y)).sum();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                if split.references[best.0].1 == *qid {
                    hits += 1;
                }
            }
            hits as f64 / split.queries.len() as f64
        }

        let mut easy = base_cfg();
        easy.n_places = 100;
        easy.sigma_archetype = 0.5;
        easy.sigma_within = 0.02;
        let mut hard = easy.clone();
        hard.sigma_archetype = 0.03;
        assert!(raw_recall(&easy) > raw_recall(&hard));
    }

    #[test]
    fn generation_is_deterministic_per_seed() {
        let cfg = base_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        let mut cfg2 = cfg;
        cfg2.seed = 43;
        assert_ne!(generate(&cfg2).unwrap(), a);
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = generate(&base_cfg()).unwrap();
        save(&ds, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded, ds);
        // byte-identical on re-save
        let path2 = dir.path().join("ds2.bin");
        save(&loaded, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn truncated_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let ds = generate(&base_cfg()).unwrap();
        save(&ds, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 11]).unwrap();
        assert!(matches!(load(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn duplicate_place_id_is_a_validation_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ds.bin");
        let mut cfg = base_cfg();
        cfg.n_places = 2;
        cfg.n_archetypes = 2;
        let ds = generate(&cfg).unwrap();
        save(&ds, &path).unwrap();

        // rewrite the second place's id to collide with the first
        let mut bytes = std::fs::read(&path).unwrap();
        let header_len =
            u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let first_place = 12 + header_len;
        let n_images =
            u32::from_le_bytes(bytes[first_place + 4..first_place + 8].try_into().unwrap())
                as usize;
        let second_place = first_place + 8 + n_images * 8 * 8;
        bytes[second_place..second_place + 4].copy_from_slice(&0u32.to_le_bytes());
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load(&path), Err(Error::Validation(_))));
    }

    #[test]
    fn invalid_sigma_ordering_is_rejected() {
        let mut cfg = base_cfg();
        cfg.sigma_within = 0.5;
        cfg.sigma_archetype = 0.1;
        assert!(matches!(generate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn holdout_zero_gives_no_queries() {
        let ds = generate(&base_cfg()).unwrap();
        let split = make_eval_split(&ds, 0.0, 1).unwrap();
        assert!(split.queries.is_empty());
        assert_eq!(split.references.len(), ds.n_images());
    }

    #[test]
    fn quarter_holdout_of_four_images() {
        let ds = generate(&base_cfg()).unwrap(); // 4 images per place
        let split = make_eval_split(&ds, 0.25, 2).unwrap();
        assert_eq!(split.queries.len(), ds.n_places());
        assert_eq!(split.references.len(), 3 * ds.n_places());
    }

    #[test]
    fn split_is_deterministic_per_seed() {
        let ds = generate(&base_cfg()).unwrap();
        let a = make_eval_split(&ds, 0.25, 5).unwrap();
        let b = make_eval_split(&ds, 0.25, 5).unwrap();
        assert_eq!(a.queries, b.queries);
        assert_eq!(a.references, b.references);
    }

    #[test]
    fn bad_holdout_fraction_is_rejected() {
        let ds = generate(&base_cfg()).unwrap();
        assert!(make_eval_split(&ds, 1.0, 0).is_err());
        assert!(make_eval_split(&ds, -0.1, 0).is_err());
    }

    #[test]
    fn train_view_regroups_references() {
        let ds = generate(&base_cfg()).unwrap();
        let split = make_eval_split(&ds, 0.25, 3).unwrap();
        let view = train_view(&split, ds.feature_dim()).unwrap();
        assert_eq!(view.n_places(), ds.n_places());
        assert_eq!(view.n_images(), split.references.len());
        for p in view.places() {
            assert_eq!(p.images.len(), 3);
        }
    }

    #[test]
    fn export_csv_has_header_and_rows() {
        let mut cfg = base_cfg();
        cfg.n_places = 2;
        cfg.n_archetypes = 2;
        let ds = generate(&cfg).unwrap();
        let mut buf = Vec::new();
        export_csv(&ds, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("place_id,image_index,f0"));
        assert_eq!(lines.len(), 1 + ds.n_images());
    }
}
