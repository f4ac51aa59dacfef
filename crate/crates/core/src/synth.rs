//! Synthetic grid-structured bags with spatially clustered positive evidence.
//!
//! Each bag lives on a coarse `H × W` grid; the stored tokens are the
//! half-stride overlapping positions over it. Positive bags carry a signal
//! direction added to every tissue cell within radius `ρ` of a random
//! centre; the instance labels mark those cells and are never shown to a
//! model.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{put_f64, put_u16, put_u32, Reader};
use crate::error::{ensure, Error, Result};
use crate::scanning::{overlap_positions, overlapped_coarse, GridIndex};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagSpec {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub tissue_fraction: f64,
    pub radius: f64,
    pub signal: f64,
    pub noise: f64,
    pub classes: usize,
    pub seed: u64,
}

impl Default for BagSpec {
    fn default() -> Self {
        BagSpec {
            height: 16,
            width: 16,
            dim: 32,
            tissue_fraction: 0.6,
            radius: 2.0,
            signal: 1.5,
            noise: 0.5,
            classes: 2,
            seed: 0,
        }
    }
}

impl BagSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.height >= 1 && self.width >= 1, "bag grid must be at least 1×1");
        ensure!(2 * self.height - 1 <= u16::MAX as usize && 2 * self.width - 1 <= u16::MAX as usize, "bag grid too large");
        ensure!(self.dim >= 1 && self.dim <= u16::MAX as usize, "feature dim {} out of range", self.dim);
        ensure!(
            self.tissue_fraction > 0.0 && self.tissue_fraction <= 1.0,
            "tissue fraction {} outside (0, 1]",
            self.tissue_fraction
        );
        ensure!(self.radius >= 0.0, "cluster radius must be ≥ 0");
        ensure!(self.noise > 0.0 && self.noise.is_finite(), "noise scale must be positive");
        ensure!(self.signal.is_finite(), "signal strength must be finite");
        ensure!(self.classes >= 2 && self.classes <= u8::MAX as usize, "class count {} out of range", self.classes);
        Ok(())
    }

    /// Reads a flat `key = value` spec file; unspecified keys keep defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = BagSpec::default();
        for (key, value) in crate::config::pairs(text)? {
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("bad value `{value}` for `{key}`: {e}"));
            match key.as_str() {
                "height" => spec.height = value.parse().map_err(|e| bad(&e))?,
                "width" => spec.width = value.parse().map_err(|e| bad(&e))?,
                "dim" => spec.dim = value.parse().map_err(|e| bad(&e))?,
                "tissue_fraction" => spec.tissue_fraction = value.parse().map_err(|e| bad(&e))?,
                "radius" => spec.radius = value.parse().map_err(|e| bad(&e))?,
                "signal" => spec.signal = value.parse().map_err(|e| bad(&e))?,
                "noise" => spec.noise = value.parse().map_err(|e| bad(&e))?,
                "classes" => spec.classes = value.parse().map_err(|e| bad(&e))?,
                "seed" => spec.seed = value.parse().map_err(|e| bad(&e))?,
                other => return Err(Error::Config(format!("unknown spec key `{other}`"))),
            }
        }
        spec.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(spec)
    }
}

/// One bag: fine-grid tokens, hidden instance labels and the bag label.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub id: String,
    pub label: usize,
    /// Fine (overlapping) grid.
    pub index: GridIndex,
    /// `[index.len() × D]`
    pub features: Tensor<f64>,
    pub instance_labels: Vec<u8>,
}

impl Bag {
    pub fn dim(&self) -> usize {
        self.features.shape()[1]
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

/// Mixes two words into one; SplitMix64 finalizer.
pub fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Stable 64-bit hash of `(seed, id)`: SplitMix64 folded over the seed and
/// then each UTF-8 byte of the id.
pub fn bag_hash(seed: u64, id: &str) -> u64 {
    id.bytes().fold(splitmix64(seed), |h, b| splitmix64(h ^ b as u64))
}

/// Unit signal direction for each positive class (row 0 is unused zeros).
pub fn class_directions(seed: u64, classes: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0xd1ec_7105));
    let mut out = vec![vec![0.0; dim]];
    for _ in 1..classes {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        out.push(v.iter().map(|x| x / norm).collect());
    }
    out
}

/// Connected tissue blob of `round(f·H·W)` cells grown by a random walk from
/// the grid centre.
fn tissue_mask<R: Rng>(spec: &BagSpec, rng: &mut R) -> Vec<bool> {
    let (h, w) = (spec.height, spec.width);
    let target = ((spec.tissue_fraction * (h * w) as f64).round() as usize).clamp(1, h * w);
    let mut valid = vec![false; h * w];
    let (mut r, mut c) = (h / 2, w / 2);
    valid[r * w + c] = true;
    let mut count = 1;
    while count < target {
        match rng.random_range(0..4) {
            0 if r > 0 => r -= 1,
            1 if r + 1 < h => r += 1,
            2 if c > 0 => c -= 1,
            3 if c + 1 < w => c += 1,
            _ => continue,
        }
        if !valid[r * w + c] {
            valid[r * w + c] = true;
            count += 1;
        }
    }
    valid
}

/// Gaussian field averaged over each cell's in-grid 3×3 neighbourhood.
fn smooth_field<R: Rng>(h: usize, w: usize, d: usize, rng: &mut R) -> Vec<f64> {
    let raw: Vec<f64> = (0..h * w * d).map(|_| StandardNormal.sample(rng)).collect();
    let mut out = vec![0.0; h * w * d];
    for r in 0..h {
        for c in 0..w {
            let mut n = 0.0;
            let cell = &mut out[(r * w + c) * d..(r * w + c + 1) * d];
            for rr in r.saturating_sub(1)..(r + 2).min(h) {
                for cc in c.saturating_sub(1)..(c + 2).min(w) {
                    n += 1.0;
                    let src = &raw[(rr * w + cc) * d..(rr * w + cc + 1) * d];
                    cell.iter_mut().zip(src).for_each(|(o, v)| *o += v);
                }
            }
            cell.iter_mut().for_each(|o| *o /= n);
        }
    }
    out
}

/// Coarse-grid content of one bag before the overlapping view is taken.
#[derive(Clone, Debug)]
pub struct CoarseBag {
    pub index: GridIndex,
    /// `[H·W × D]`, including blank cells.
    pub features: Vec<f64>,
    /// Per coarse cell, row-major.
    pub labels: Vec<u8>,
    pub centre: Option<(usize, usize)>,
}

pub fn generate_coarse<R: Rng>(spec: &BagSpec, class: usize, directions: &[Vec<f64>], rng: &mut R) -> Result<CoarseBag> {
    spec.validate()?;
    ensure!(class < spec.classes, "class {class} outside 0..{}", spec.classes);
    let (h, w, d) = (spec.height, spec.width, spec.dim);
    let index = GridIndex::new(h, w, tissue_mask(spec, rng))?;
    ensure!(!index.is_empty(), "no tissue cell available");
    let mut features = smooth_field(h, w, d, rng);
    let mut labels = vec![0u8; h * w];
    let mut centre = None;
    if class > 0 {
        let (cr, cc) = index.coords()[rng.random_range(0..index.len())];
        centre = Some((cr, cc));
        for &(r, c) in index.coords() {
            let dist = ((r as f64 - cr as f64).powi(2) + (c as f64 - cc as f64).powi(2)).sqrt();
            if dist <= spec.radius {
                labels[r * w + c] = class as u8;
                let cell = &mut features[(r * w + c) * d..(r * w + c + 1) * d];
                cell.iter_mut().zip(&directions[class]).for_each(|(f, u)| *f += spec.signal * u);
            }
        }
    }
    Ok(CoarseBag { index, features, labels, centre })
}

/// Overlapping view of a coarse bag: each fine token averages the tissue
/// cells it overlaps, plus fresh `N(0, σ²)` noise; its instance label is
/// the positive class if any overlapped cell is positive.
pub fn overlap_view<R: Rng>(coarse: &CoarseBag, dim: usize, noise: f64, rng: &mut R) -> Result<(GridIndex, Tensor<f64>, Vec<u8>)> {
    let fine = overlap_positions(&coarse.index);
    let w = coarse.index.width();
    let normal = Normal::new(0.0, noise).map_err(|e| Error::Contract(format!("noise scale: {e}")))?;
    let mut data = Vec::with_capacity(fine.len() * dim);
    let mut labels = Vec::with_capacity(fine.len());
    for &(r, c) in fine.coords() {
        let cells: Vec<usize> = overlapped_coarse(r, c)
            .filter(|&(cr, cc)| coarse.index.is_valid(cr, cc))
            .map(|(cr, cc)| cr * w + cc)
            .collect();
        let n = cells.len() as f64;
        for k in 0..dim {
            let mean = cells.iter().map(|&cell| coarse.features[cell * dim + k]).sum::<f64>() / n;
            data.push(mean + normal.sample(rng));
        }
        labels.push(cells.iter().map(|&cell| coarse.labels[cell]).max().unwrap_or(0));
    }
    let features = Tensor::new(vec![fine.len(), dim], data)?;
    Ok((fine, features, labels))
}

/// One bag of class `class`. Class 0 is negative.
pub fn generate_bag<R: Rng>(spec: &BagSpec, class: usize, id: &str, directions: &[Vec<f64>], rng: &mut R) -> Result<Bag> {
    let coarse = generate_coarse(spec, class, directions, rng)?;
    let (index, features, instance_labels) = overlap_view(&coarse, spec.dim, spec.noise, rng)?;
    let positives = instance_labels.iter().filter(|&&y| y != 0).count();
    ensure!((positives == 0) == (class == 0), "bag {id}: label {class} with {positives} positive instances");
    Ok(Bag { id: id.to_string(), label: class, index, features, instance_labels })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BagEntry {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: BagSpec,
    pub seed: u64,
    pub per_class: usize,
    pub test_fraction: f64,
    pub bags: Vec<BagEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    /// Same order as `manifest.bags`.
    pub bags: Vec<Bag>,
}

pub const DEFAULT_TEST_FRACTION: f64 = 1.0 / 3.0;

/// Per class, bags sorted by [`bag_hash`]; the first `round(n·fraction)` go
/// to the test split.
pub fn assign_splits(seed: u64, entries: &mut [BagEntry], classes: usize, test_fraction: f64) {
    for class in 0..classes {
        let mut members: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].label == class).collect();
        members.sort_by_key(|&i| (bag_hash(seed, &entries[i].id), i));
        let n_test = (members.len() as f64 * test_fraction).round() as usize;
        for (rank, &i) in members.iter().enumerate() {
            entries[i].split = if rank < n_test { Split::Test } else { Split::Train };
        }
    }
}

/// `per_class` bags of every class, deterministic in `seed`.
pub fn generate_dataset(spec: &BagSpec, per_class: usize, seed: u64, test_fraction: f64) -> Result<Dataset> {
    spec.validate()?;
    ensure!(per_class >= 1, "need at least one bag per class");
    ensure!((0.0..=1.0).contains(&test_fraction), "test fraction {test_fraction} outside [0, 1]");
    let spec = BagSpec { seed, ..spec.clone() };
    let directions = class_directions(seed, spec.classes, spec.dim);
    let mut bags = Vec::with_capacity(per_class * spec.classes);
    let mut entries = Vec::with_capacity(per_class * spec.classes);
    for class in 0..spec.classes {
        for i in 0..per_class {
            let id = format!("bag-{class}-{i:05}");
            let mut rng = ChaCha8Rng::seed_from_u64(bag_hash(seed, &id));
            bags.push(generate_bag(&spec, class, &id, &directions, &mut rng)?);
            entries.push(BagEntry { file: format!("{id}.ssmb"), id, label: class, split: Split::Train });
        }
    }
    assign_splits(seed, &mut entries, spec.classes, test_fraction);
    let manifest = Manifest { spec, seed, per_class, test_fraction, bags: entries };
    Ok(Dataset { manifest, bags })
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<&Bag> {
        self.manifest.bags.iter().zip(&self.bags).filter(|(e, _)| e.split == split).map(|(_, b)| b).collect()
    }

    pub fn bag(&self, id: &str) -> Option<&Bag> {
        self.bags.iter().find(|b| b.id == id)
    }

    pub fn classes(&self) -> usize {
        self.manifest.spec.classes
    }

    pub fn dim(&self) -> usize {
        self.manifest.spec.dim
    }

    pub fn manifest_json(&self) -> Result<String> {
        let mut text = serde_json::to_string_pretty(&self.manifest)?;
        text.push('\n');
        Ok(text)
    }

    /// Writes `manifest.json` and one `.ssmb` file per bag into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (entry, bag) in self.manifest.bags.iter().zip(&self.bags) {
            fs::write(dir.join(&entry.file), encode_bag(bag)?)?;
        }
        fs::write(dir.join("manifest.json"), self.manifest_json()?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        manifest.spec.validate().map_err(|e| Error::Config(format!("manifest spec: {e}")))?;
        let mut seen = HashSet::new();
        let mut bags = Vec::with_capacity(manifest.bags.len());
        for entry in &manifest.bags {
            if !seen.insert(entry.id.as_str()) {
                return Err(Error::Config(format!("duplicate bag id `{}` in manifest", entry.id)));
            }
            if entry.file.contains(['/', '\\']) || entry.file.starts_with('.') {
                return Err(Error::Config(format!("bag file name `{}` must be a plain file name", entry.file)));
            }
            let bytes = fs::read(dir.join(&entry.file))?;
            let bag = decode_bag(&bytes, &entry.id, entry.label)
                .map_err(|e| match e {
                    Error::Parse { offset, message } => Error::Parse { offset, message: format!("{}: {message}", entry.file) },
                    other => other,
                })?;
            if bag.dim() != manifest.spec.dim {
                return Err(Error::Config(format!("bag {} has dim {}, manifest says {}", entry.id, bag.dim(), manifest.spec.dim)));
            }
            if entry.label >= manifest.spec.classes {
                return Err(Error::Config(format!("bag {} label {} outside 0..{}", entry.id, entry.label, manifest.spec.classes)));
            }
            bags.push(bag);
        }
        Ok(Dataset { manifest, bags })
    }
}

/// Binary bag record: magic `SSMB`, version 1, fine `H`, `W`, `D` (u16),
/// valid count (u32), `(row, col)` pairs (u16), features (f64,
/// row-major), instance labels (u8). All little-endian.
pub fn encode_bag(bag: &Bag) -> Result<Vec<u8>> {
    let (n, d) = bag.features.dims2()?;
    let idx = &bag.index;
    ensure!(n == idx.len() && bag.instance_labels.len() == n, "bag {} has inconsistent token counts", bag.id);
    let fits = |v: usize| v <= u16::MAX as usize;
    ensure!(fits(idx.height()) && fits(idx.width()) && fits(d), "bag {} extents exceed u16", bag.id);
    let mut out = Vec::with_capacity(15 + n * (4 + 8 * d + 1));
    out.extend_from_slice(b"SSMB");
    out.push(1);
    put_u16(&mut out, idx.height() as u16);
    put_u16(&mut out, idx.width() as u16);
    put_u16(&mut out, d as u16);
    put_u32(&mut out, n as u32);
    for &(r, c) in idx.coords() {
        put_u16(&mut out, r as u16);
        put_u16(&mut out, c as u16);
    }
    for &v in bag.features.data() {
        put_f64(&mut out, v);
    }
    out.extend_from_slice(&bag.instance_labels);
    Ok(out)
}

pub fn decode_bag(bytes: &[u8], id: &str, label: usize) -> Result<Bag> {
    let mut r = Reader::new(bytes);
    r.magic(b"SSMB", 1)?;
    let at = r.offset();
    let (h, w, d) = (r.u16("height")? as usize, r.u16("width")? as usize, r.u16("dim")? as usize);
    if h == 0 || w == 0 || d == 0 {
        return Err(Error::parse(at, format!("zero extent {h}×{w}×{d}")));
    }
    let at = r.offset();
    let n = r.u32("valid count")? as usize;
    if n > h * w {
        return Err(Error::parse(at, format!("valid count {n} exceeds {h}×{w} cells")));
    }
    let mut valid = vec![false; h * w];
    let mut last = None;
    for _ in 0..n {
        let at = r.offset();
        let (row, col) = (r.u16("row")? as usize, r.u16("col")? as usize);
        if row >= h || col >= w {
            return Err(Error::parse(at, format!("cell ({row},{col}) outside {h}×{w}")));
        }
        let t = row * w + col;
        if last.is_some_and(|l| t <= l) {
            return Err(Error::parse(at, format!("cell ({row},{col}) out of row-major order")));
        }
        last = Some(t);
        valid[t] = true;
    }
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n * d {
        data.push(r.f64("features")?);
    }
    let labels = r.bytes(n, "instance labels")?.to_vec();
    if !r.at_end() {
        return Err(Error::parse(r.offset(), "trailing bytes after bag record"));
    }
    Ok(Bag {
        id: id.to_string(),
        label,
        index: GridIndex::new(h, w, valid)?,
        features: Tensor::new(vec![n, d], data)?,
        instance_labels: labels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> BagSpec {
        BagSpec { height: 5, width: 4, dim: 3, ..BagSpec::default() }
    }

    #[test]
    fn negative_and_positive_bags() {
        let spec = small();
        let dirs = class_directions(1, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let neg = generate_bag(&spec, 0, "n", &dirs, &mut rng).unwrap();
        assert!(neg.instance_labels.iter().all(|&y| y == 0));
        let pos = generate_bag(&spec, 1, "p", &dirs, &mut rng).unwrap();
        assert!(pos.instance_labels.contains(&1));
        assert_eq!(pos.index.height(), 9);
    }

    #[test]
    fn tissue_fraction_is_met() {
        let spec = BagSpec { tissue_fraction: 0.5, ..BagSpec::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mask = tissue_mask(&spec, &mut rng);
        assert_eq!(mask.iter().filter(|&&v| v).count(), 128);
    }

    #[test]
    fn directions_are_unit() {
        let dirs = class_directions(5, 4, 16);
        assert_eq!(dirs.len(), 4);
        for u in &dirs[1..] {
            assert!((u.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bag_settings_parse() {
        let spec = BagSpec::parse("# test\nheight = 8\nsignal=3.0\n").unwrap();
        assert_eq!((spec.height, spec.width, spec.signal), (8, 16, 3.0));
        assert!(BagSpec::parse("colour = red").is_err());
        assert!(BagSpec::parse("height = x").is_err());
    }

    #[test]
    fn split_sizes_per_class() {
        let ds = generate_dataset(&small(), 6, 2, 1.0 / 3.0).unwrap();
        assert_eq!(ds.bags.len(), 12);
        for class in 0..2 {
            let test = ds.manifest.bags.iter().filter(|e| e.label == class && e.split == Split::Test).count();
            assert_eq!(test, 2);
        }
    }
}
