//! Global proxy-based hard mining: per-place proxy averaging, the detached
//! proxy memory bank, epoch-boundary plan construction via k-NN over the
//! bank, and the mini-batch sampler consuming the plan (plus the random
//! baseline).
//!
//! A batch plan partitions the place set: every place appears in exactly
//! one tuple, tuples have length M except possibly the last. Plans for an
//! epoch are built greedily — pick a random remaining place, gather its M
//! most similar remaining places (itself included, being its own nearest
//! neighbor), emit the tuple, remove them, repeat.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::dataset::PlaceDataset;
use crate::error::{Error, Result};
use crate::numerics::{dot, norm, Matrix, DEGENERATE_NORM};

/// Identity of a place; doubles as its label in batches.
pub type PlaceId = u32;

const BANK_FORMAT_LINE: &str = "gpm-bank,v1";

/// A unit-norm compact place descriptor, detached from any computation
/// graph (it owns its values).
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyVector {
    data: Vec<f64>,
}

impl ProxyVector {
    /// Wraps an already-normalized vector; rejects non-finite or
    /// non-unit input.
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Empty("proxy vector".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Validation("proxy contains non-finite values".into()));
        }
        let n = norm(&data);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "proxy norm {n} is not 1 within 1e-9"
            )));
        }
        Ok(ProxyVector { data })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }
}

/// Average of one place's unit-norm proxy projections, re-normalized to
/// unit length so that inner-product search equals cosine search.
///
/// An averaged vector that collapses to (near-)zero is an error: the
/// caller keeps the previous proxy rather than caching noise.
pub fn compute_place_proxy(z_rows: &Matrix) -> Result<ProxyVector> {
    if z_rows.rows() == 0 {
        return Err(Error::Empty("no rows to average into a proxy".into()));
    }
    let k = z_rows.rows() as f64;
    let mut mean = vec![0.0; z_rows.cols()];
    for i in 0..z_rows.rows() {
        for (m, v) in mean.iter_mut().zip(z_rows.row(i)) {
            *m += v / k;
        }
    }
    let n = norm(&mean);
    if n < DEGENERATE_NORM {
        return Err(Error::Degenerate(format!(
            "proxy mean has norm {n:.3e}; projections cancel out"
        )));
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    ProxyVector::new(mean)
}

/// One cached proxy and the epoch it was last refreshed.
#[derive(Clone, Debug, PartialEq)]
pub struct BankEntry {
    pub proxy: ProxyVector,
    pub last_update_epoch: usize,
}

/// The proxy memory bank: one detached descriptor per place.
#[derive(Clone, Debug)]
pub struct MemoryBank {
    proxy_dim: usize,
    entries: BTreeMap<PlaceId, BankEntry>,
}

impl MemoryBank {
    pub fn new(proxy_dim: usize) -> Self {
        MemoryBank {
            proxy_dim,
            entries: BTreeMap::new(),
        }
    }

    pub fn proxy_dim(&self) -> usize {
        self.proxy_dim
    }

    /// Upserts a place's proxy.
    pub fn update(&mut self, place_id: PlaceId, proxy: ProxyVector, epoch: usize) -> Result<()> {
        if proxy.dim() != self.proxy_dim {
            return Err(Error::Shape(format!(
                "proxy of dim {} in bank of dim {}",
                proxy.dim(),
                self.proxy_dim
            )));
        }
        self.entries.insert(
            place_id,
            BankEntry {
                proxy,
                last_update_epoch: epoch,
            },
        );
        Ok(())
    }

    pub fn get(&self, place_id: PlaceId) -> Option<&BankEntry> {
        self.entries.get(&place_id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Iterates entries in ascending place id.
    pub fn iter(&self) -> impl Iterator<Item = (PlaceId, &BankEntry)> {
        self.entries.iter().map(|(id, e)| (*id, e))
    }

    /// True when every given place has a cached proxy.
    pub fn covers(&self, place_ids: &[PlaceId]) -> bool {
        place_ids.iter().all(|id| self.entries.contains_key(id))
    }

    /// Exhaustive k-NN over the whole bank.
    pub fn knn(&self, query: &[f64], k: usize) -> Result<Vec<PlaceId>> {
        knn_search(self.iter().map(|(id, e)| (id, e.proxy.as_slice())), query, k)
    }

    /// Plain-text dump: one row per place, floats printed with enough
    /// precision to parse back bit-exactly.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{BANK_FORMAT_LINE},dim={}", self.proxy_dim)?;
        writeln!(w, "place_id,last_update_epoch,values")?;
        for (id, entry) in self.iter() {
            write!(w, "{id},{}", entry.last_update_epoch)?;
            for v in entry.proxy.as_slice() {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let parse_err = |line_no: usize, msg: String| Error::Parse {
            location: format!("line {line_no}"),
            msg,
        };
        let reader = BufReader::new(File::open(path)?);
        let mut lines = reader.lines().enumerate();

        let (_, first) = lines
            .next()
            .ok_or_else(|| parse_err(1, "empty bank file".into()))?;
        let first = first?;
        let dim = first
            .strip_prefix(&format!("{BANK_FORMAT_LINE},dim="))
            .and_then(|d| d.parse::<usize>().ok())
            .ok_or_else(|| parse_err(1, format!("bad bank header '{first}'")))?;
        lines
            .next()
            .ok_or_else(|| parse_err(2, "missing column header".into()))?
            .1?;

        let mut bank = MemoryBank::new(dim);
        for (idx, line) in lines {
            let line_no = idx + 1;
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split(',');
            let id: PlaceId = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| parse_err(line_no, "bad place_id".into()))?;
            let epoch: usize = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| parse_err(line_no, "bad epoch".into()))?;
            let values = fields
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<f64>, _>>()
                .map_err(|e| parse_err(line_no, format!("bad float: {e}")))?;
            if values.len() != dim {
                return Err(parse_err(
                    line_no,
                    format!("expected {dim} values, found {}", values.len()),
                ));
            }
            if bank.entries.contains_key(&id) {
                return Err(parse_err(line_no, format!("duplicate place_id {id}")));
            }
            bank.update(id, ProxyVector::new(values)?, epoch)?;
        }
        Ok(bank)
    }
}

/// Exhaustive-scan k-nearest-neighbor search by inner product.
/// Ties break toward the smaller place id.
pub fn knn_search<'a>(
    references: impl IntoIterator<Item = (PlaceId, &'a [f64])>,
    query: &[f64],
    k: usize,
) -> Result<Vec<PlaceId>> {
    let mut scored: Vec<(PlaceId, f64)> = references
        .into_iter()
        .map(|(id, p)| (id, dot(p, query)))
        .collect();
    if k > scored.len() {
        return Err(Error::Validation(format!(
            "k = {k} exceeds {} references",
            scored.len()
        )));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(k).map(|(id, _)| id).collect())
}

/// The per-epoch list of place tuples, consumed one per iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPlan {
    pub tuples: Vec<Vec<PlaceId>>,
    pub epoch_built_for: usize,
}

impl BatchPlan {
    pub fn n_places(&self) -> usize {
        self.tuples.iter().map(Vec::len).sum()
    }

    /// Checks the partition invariant against the expected place set.
    pub fn verify_partition(&self, expected: &[PlaceId]) -> Result<()> {
        let mut seen = HashSet::new();
        for tuple in &self.tuples {
            for id in tuple {
                if !seen.insert(*id) {
                    return Err(Error::Validation(format!(
                        "place {id} appears in more than one tuple"
                    )));
                }
            }
        }
        let expected_set: HashSet<PlaceId> = expected.iter().copied().collect();
        if seen != expected_set {
            return Err(Error::Validation(format!(
                "plan covers {} places, dataset has {}",
                seen.len(),
                expected_set.len()
            )));
        }
        Ok(())
    }

    /// One line per tuple, space-separated place ids.
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        for tuple in &self.tuples {
            let line: Vec<String> = tuple.iter().map(|id| id.to_string()).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

/// Greedy index-based plan construction: repeatedly pick a random
/// remaining place and tuple it with its M most similar remaining places
/// by proxy inner product. Deterministic given the seed and bank contents.
pub fn build_batch_plan(
    bank: &MemoryBank,
    m: usize,
    rng_seed: u64,
    epoch: usize,
) -> Result<BatchPlan> {
    if bank.is_empty() {
        return Err(Error::Empty("cannot build a plan from an empty bank".into()));
    }
    let mut rng = StdRng::seed_from_u64(rng_seed);
    let mut remaining: Vec<(PlaceId, &[f64])> =
        bank.iter().map(|(id, e)| (id, e.proxy.as_slice())).collect();
    let mut tuples = Vec::with_capacity(bank.len().div_ceil(m));

    while !remaining.is_empty() {
        let pick = rng.random_range(0..remaining.len());
        let query = remaining[pick].1;
        let k = m.min(remaining.len());
        let tuple = knn_search(remaining.iter().copied(), query, k)?;
        let members: HashSet<PlaceId> = tuple.iter().copied().collect();
        remaining.retain(|(id, _)| !members.contains(id));
        tuples.push(tuple);
    }

    Ok(BatchPlan {
        tuples,
        epoch_built_for: epoch,
    })
}

/// Shuffle-and-chunk plan: the standard random epoch over places.
pub fn random_plan(
    place_ids: &[PlaceId],
    m: usize,
    rng_seed: u64,
    epoch: usize,
) -> Result<BatchPlan> {
    if place_ids.is_empty() {
        return Err(Error::Empty("no places to plan over".into()));
    }
    let mut ids: Vec<PlaceId> = place_ids.to_vec();
    ids.sort_unstable();
    let mut rng = StdRng::seed_from_u64(rng_seed);
    use rand::seq::SliceRandom;
    ids.shuffle(&mut rng);
    let tuples = ids.chunks(m).map(|c| c.to_vec()).collect();
    Ok(BatchPlan {
        tuples,
        epoch_built_for: epoch,
    })
}

/// How mini-batches are assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerMode {
    Random,
    Gpm,
}

impl fmt::Display for SamplerMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerMode::Random => "random",
            SamplerMode::Gpm => "gpm",
        })
    }
}

impl FromStr for SamplerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SamplerMode::Random),
            "gpm" => Ok(SamplerMode::Gpm),
            other => Err(Error::Config(format!(
                "unknown sampler mode '{other}' (expected random | gpm)"
            ))),
        }
    }
}

/// Mini-batch geometry and mode: M places per batch, K images per place.
#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub m: usize,
    pub k: usize,
    pub mode: SamplerMode,
    pub seed: u64,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m < 2 {
            return Err(Error::Config(
                "M must be >= 2: a batch needs negative pairs".into(),
            ));
        }
        if self.k < 2 {
            return Err(Error::Config(
                "K must be >= 2: a place needs positive pairs".into(),
            ));
        }
        Ok(())
    }
}

/// Deterministic sub-seed for (base seed, epoch, stream) via splitmix64.
pub fn derive_seed(base: u64, epoch: u64, stream: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E3779B97F4A7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        z ^ (z >> 31)
    }
    mix(base ^ mix(epoch ^ mix(stream)))
}

/// Builds the plan for an epoch. Random mode always shuffles; GPM mode
/// bootstraps with a random plan until the bank covers every place
/// (epoch 0 by construction), then switches to index-based plans.
pub fn epoch_boundary(
    bank: &MemoryBank,
    place_ids: &[PlaceId],
    epoch: usize,
    cfg: &SamplerConfig,
) -> Result<BatchPlan> {
    cfg.validate()?;
    let seed = derive_seed(cfg.seed, epoch as u64, 0);
    let use_gpm = cfg.mode == SamplerMode::Gpm
        && epoch > 0
        && bank.len() == place_ids.len()
        && bank.covers(place_ids);
    if use_gpm {
        build_batch_plan(bank, cfg.m, seed, epoch)
    } else {
        random_plan(place_ids, cfg.m, seed, epoch)
    }
}

/// One assembled mini-batch: per place, the chosen image indices.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchSpec {
    pub places: Vec<(PlaceId, Vec<usize>)>,
}

impl BatchSpec {
    pub fn n_rows(&self) -> usize {
        self.places.iter().map(|(_, idx)| idx.len()).sum()
    }
}

/// Walks a plan tuple by tuple, drawing K images per place: distinct
/// indices when the place has at least K images, otherwise every image
/// plus uniform redraws to fill up.
pub struct EpochSampler {
    plan: BatchPlan,
    cursor: usize,
    k: usize,
    rng: StdRng,
}

impl EpochSampler {
    pub fn new(plan: BatchPlan, k: usize, image_seed: u64) -> Self {
        EpochSampler {
            plan,
            cursor: 0,
            k,
            rng: StdRng::seed_from_u64(image_seed),
        }
    }

    pub fn plan(&self) -> &BatchPlan {
        &self.plan
    }

    /// Next mini-batch, or `None` once the plan is exhausted (epoch end).
    pub fn next_batch(&mut self, dataset: &PlaceDataset) -> Option<Result<BatchSpec>> {
        if self.cursor >= self.plan.tuples.len() {
            return None;
        }
        let tuple = &self.plan.tuples[self.cursor];
        self.cursor += 1;

        let mut places = Vec::with_capacity(tuple.len());
        for &id in tuple {
            let place = match dataset.place_by_id(id) {
                Some(p) => p,
                None => {
                    return Some(Err(Error::Validation(format!(
                        "plan references place {id} absent from the dataset"
                    ))))
                }
            };
            let n = place.images.len();
            let indices = if n >= self.k {
                rand::seq::index::sample(&mut self.rng, n, self.k).into_vec()
            } else {
                let mut idx: Vec<usize> = (0..n).collect();
                while idx.len() < self.k {
                    idx.push(self.rng.random_range(0..n));
                }
                idx
            };
            places.push((id, indices));
        }
        Some(Ok(BatchSpec { places }))
    }
}
