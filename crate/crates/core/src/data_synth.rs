//! Synthetic product catalog with an index set, a query set, exact-match
//! groups, same-category distractors and a long-tailed category taxonomy.
//!
//! Every leaf category owns a per-patch-cell image prototype and a pair of
//! category words. A product adds a colour and a style (each visible in the
//! image and named in the title), a per-cell brightness signature and a few
//! descriptor words. Records of one match group render the same product and
//! differ only by pixel noise and title word-order jitter.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, RgbImage};
use crate::rng::{stream, Rng as ChaRng};

/// Side length of one prototype cell; matches the model's patch size.
pub const CELL: usize = 16;
pub const ZIPF_EXPONENT: f64 = 1.2;
/// Category sizes are clipped at this multiple of the median size.
pub const CAP_MULTIPLE: f64 = 5.0;
/// Words every title carries regardless of product: meta word + two leaf words.
const CATEGORY_WORDS: usize = 3;
/// Colour word + style word.
const FIXED_ATTRIBUTE_WORDS: usize = 2;
const N_COLORS: usize = 12;
/// Per-channel spread of a leaf's cell colours around its base colour.
const CELL_SPREAD: f64 = 20.0;
/// Per-channel range of a product's per-cell brightness offsets.
const PRODUCT_OFFSET: f64 = 12.0;
const N_STYLES: usize = 8;
const N_DESCRIPTORS: usize = 240;
/// Probability of swapping each adjacent word pair when a record is listed.
const WORD_SWAP_PROB: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_meta: usize,
    pub n_leaf: usize,
    pub n_index_products: usize,
    pub n_queries: usize,
    /// Inclusive `[min, max]` index matches per query.
    pub matches_per_query: (usize, usize),
    pub image_side: usize,
    /// Inclusive `[min, max]` title length in words.
    pub title_len: (usize, usize),
    pub noise_level: f64,
    /// Queries are drawn from this many leaf categories; 0 means all.
    pub query_leaf_subset: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_meta: 5,
            n_leaf: 40,
            n_index_products: 5000,
            n_queries: 100,
            matches_per_query: (2, 5),
            image_side: 64,
            title_len: (6, 9),
            noise_level: 0.1,
            query_leaf_subset: 0,
            seed: 7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_meta == 0 || self.n_leaf < self.n_meta {
            return bad(format!(
                "need n_leaf >= n_meta >= 1 (got {} / {})",
                self.n_leaf, self.n_meta
            ));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return bad(format!("noise_level {} outside [0, 1]", self.noise_level));
        }
        let (lo, hi) = self.matches_per_query;
        if lo == 0 || lo > hi {
            return bad(format!("matches_per_query [{lo}, {hi}] must satisfy 1 <= min <= max"));
        }
        let (tlo, thi) = self.title_len;
        if tlo < CATEGORY_WORDS + FIXED_ATTRIBUTE_WORDS || tlo > thi {
            return bad(format!(
                "title_len [{tlo}, {thi}] must satisfy {} <= min <= max",
                CATEGORY_WORDS + FIXED_ATTRIBUTE_WORDS
            ));
        }
        if self.image_side == 0 || !self.image_side.is_multiple_of(CELL) {
            return bad(format!("image_side {} must be a positive multiple of {CELL}", self.image_side));
        }
        if self.n_index_products == 0 {
            return bad("n_index_products must be positive".into());
        }
        if self.query_leaf_subset > self.n_leaf {
            return bad(format!("query_leaf_subset {} exceeds n_leaf", self.query_leaf_subset));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ProductRecord {
    pub id: String,
    pub image: RgbImage,
    pub title: String,
    pub meta_category: u32,
    pub leaf_category: u32,
    pub match_group: Option<u32>,
}

/// Leaf sizes: Zipf weights over a random rank order, clipped at
/// `CAP_MULTIPLE × median` with the excess water-filled into the uncapped
/// leaves, then rounded by largest remainder. Returns `(counts, cap)`.
pub fn leaf_sizes(n_items: usize, n_leaf: usize, rank_of_leaf: &[usize]) -> (Vec<usize>, usize) {
    let weights: Vec<f64> = rank_of_leaf
        .iter()
        .map(|&r| ((r + 1) as f64).powf(-ZIPF_EXPONENT))
        .collect();
    let total_w: f64 = weights.iter().sum();
    let raw: Vec<f64> = weights.iter().map(|w| n_items as f64 * w / total_w).collect();
    let mut sorted = raw.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n_leaf % 2 == 1 {
        sorted[n_leaf / 2]
    } else {
        0.5 * (sorted[n_leaf / 2 - 1] + sorted[n_leaf / 2])
    };
    let cap = ((CAP_MULTIPLE * median).floor() as usize).max(n_items.div_ceil(n_leaf));

    let mut real = raw;
    let mut capped = vec![false; n_leaf];
    loop {
        let mut excess = 0.0;
        for (x, c) in real.iter_mut().zip(capped.iter_mut()) {
            if *x > cap as f64 {
                excess += *x - cap as f64;
                *x = cap as f64;
                *c = true;
            }
        }
        if excess <= 1e-9 {
            break;
        }
        let free_w: f64 = (0..n_leaf).filter(|&i| !capped[i]).map(|i| weights[i]).sum();
        for i in (0..n_leaf).filter(|&i| !capped[i]) {
            real[i] += excess * weights[i] / free_w;
        }
    }
    let mut counts: Vec<usize> = real.iter().map(|x| x.floor() as usize).collect();
    let short = n_items - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..n_leaf).collect();
    order.sort_by(|&a, &b| {
        let fa = real[a] - real[a].floor();
        let fb = real[b] - real[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let eligible: Vec<usize> = order.into_iter().filter(|&i| counts[i] < cap).take(short).collect();
    for i in eligible {
        counts[i] += 1;
    }
    (counts, cap)
}

#[derive(Clone, Copy, Debug)]
enum Texture {
    Solid,
    HStripes(usize),
    VStripes(usize),
    Checker(usize),
    Diagonal(usize),
}

#[derive(Clone, Debug)]
struct LeafProto {
    cells: Vec<([f64; 3], Texture)>,
    words: [String; 2],
}

#[derive(Clone, Debug)]
struct Product {
    leaf: usize,
    color: usize,
    style: usize,
    cell_offsets: Vec<f64>,
    words: Vec<String>,
    group: Option<u32>,
}

struct World {
    grid: usize,
    side: usize,
    meta_words: Vec<String>,
    leaves: Vec<LeafProto>,
    colors: Vec<(String, [f64; 3])>,
    styles: Vec<String>,
    descriptors: Vec<String>,
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

fn word_pool(rng: &mut ChaRng, n: usize, taken: &mut BTreeSet<String>) -> Vec<String> {
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let syllables = rng.random_range(2..=3);
        let w: String = (0..syllables)
            .flat_map(|_| {
                [
                    CONSONANTS[rng.random_range(0..CONSONANTS.len())] as char,
                    VOWELS[rng.random_range(0..VOWELS.len())] as char,
                ]
            })
            .collect();
        if taken.insert(w.clone()) {
            out.push(w);
        }
    }
    out
}

fn texture_value(t: Texture, x: usize, y: usize) -> f64 {
    let on = match t {
        Texture::Solid => false,
        Texture::HStripes(p) => (y / p) % 2 == 1,
        Texture::VStripes(p) => (x / p) % 2 == 1,
        Texture::Checker(p) => ((x / p) + (y / p)) % 2 == 1,
        Texture::Diagonal(p) => ((x + y) / p) % 2 == 1,
    };
    if on {
        0.6
    } else {
        1.0
    }
}

/// Style overlays, in normalized coordinates `u, v ∈ [0, 1)`.
fn style_mask(style: usize, u: f64, v: f64) -> bool {
    let (du, dv) = (u - 0.5, v - 0.5);
    match style % N_STYLES {
        0 => du * du + dv * dv < 0.09,
        1 => du.abs().max(dv.abs()) > 0.38,
        2 => du.abs() < 0.1 || dv.abs() < 0.1,
        3 => (u - v).abs() < 0.15,
        4 => v < 0.35,
        5 => {
            let r = (du * du + dv * dv).sqrt();
            (0.22..0.34).contains(&r)
        }
        6 => ((u * 4.0) as usize + (v * 4.0) as usize).is_multiple_of(2) && du.abs().max(dv.abs()) < 0.3,
        _ => v > u && v > 1.0 - u,
    }
}

impl World {
    fn new(cfg: &SynthConfig, rng: &mut ChaRng) -> Self {
        let grid = cfg.image_side / CELL;
        let mut taken = BTreeSet::new();
        let meta_words = word_pool(rng, cfg.n_meta, &mut taken);
        let leaf_words = word_pool(rng, 2 * cfg.n_leaf, &mut taken);
        let color_words = word_pool(rng, N_COLORS, &mut taken);
        let styles = word_pool(rng, N_STYLES, &mut taken);
        let descriptors = word_pool(rng, N_DESCRIPTORS, &mut taken);
        let colors = color_words
            .into_iter()
            .enumerate()
            .map(|(i, w)| {
                // evenly spaced hues, alternating brightness
                let h = i as f64 / N_COLORS as f64;
                let rgb = [0.0, 1.0 / 3.0, 2.0 / 3.0].map(|o| {
                    let t = ((h + o) * std::f64::consts::TAU).cos();
                    (0.5 + 0.5 * t) * if i % 2 == 0 { 255.0 } else { 190.0 }
                });
                (w, rgb)
            })
            .collect();
        let leaves = (0..cfg.n_leaf)
            .map(|l| {
                // one base colour and texture kind per leaf, varied per cell
                let hue = [0; 3].map(|_| rng.random_range(30.0..225.0));
                let kind = rng.random_range(0..5);
                let cells = (0..grid * grid)
                    .map(|_| {
                        let base = hue.map(|h| h + rng.random_range(-CELL_SPREAD..CELL_SPREAD));
                        let p = [2, 4, 8][rng.random_range(0..3)];
                        let t = match kind {
                            0 => Texture::Solid,
                            1 => Texture::HStripes(p),
                            2 => Texture::VStripes(p),
                            3 => Texture::Checker(p),
                            _ => Texture::Diagonal(p),
                        };
                        (base, t)
                    })
                    .collect();
                LeafProto {
                    cells,
                    words: [leaf_words[2 * l].clone(), leaf_words[2 * l + 1].clone()],
                }
            })
            .collect();
        Self {
            grid,
            side: cfg.image_side,
            meta_words,
            leaves,
            colors,
            styles,
            descriptors,
        }
    }

    fn product(&self, cfg: &SynthConfig, leaf: usize, group: Option<u32>, rng: &mut ChaRng) -> Product {
        let color = rng.random_range(0..N_COLORS);
        let style = rng.random_range(0..N_STYLES);
        let cell_offsets = (0..self.grid * self.grid)
            .map(|_| rng.random_range(-PRODUCT_OFFSET..PRODUCT_OFFSET))
            .collect();
        let n_words = rng.random_range(cfg.title_len.0..=cfg.title_len.1);
        let meta = leaf % cfg.n_meta;
        let mut words = vec![
            self.meta_words[meta].clone(),
            self.leaves[leaf].words[0].clone(),
            self.leaves[leaf].words[1].clone(),
            self.colors[color].0.clone(),
            self.styles[style].clone(),
        ];
        let n_desc = n_words - words.len();
        words.extend(
            self.descriptors
                .choose_multiple(rng, n_desc)
                .cloned(),
        );
        words.shuffle(rng);
        Product {
            leaf,
            color,
            style,
            cell_offsets,
            words,
            group,
        }
    }

    fn render(&self, p: &Product, noise_sd: f64, rng: &mut ChaRng) -> RgbImage {
        let proto = &self.leaves[p.leaf];
        let tint = self.colors[p.color].1;
        let noise = Normal::new(0.0, noise_sd.max(1e-12)).expect("finite sd");
        let mut img = RgbImage::new(self.side, self.side);
        for y in 0..self.side {
            for x in 0..self.side {
                let cell = (y / CELL) * self.grid + x / CELL;
                let (base, tex) = proto.cells[cell];
                let shade = texture_value(tex, x, y);
                let u = (x as f64 + 0.5) / self.side as f64;
                let v = (y as f64 + 0.5) / self.side as f64;
                let overlay = style_mask(p.style, u, v);
                let mut rgb = [0u8; 3];
                for c in 0..3 {
                    let mut val = base[c] * shade + p.cell_offsets[cell];
                    if overlay {
                        val = 0.7 * tint[c] + 0.3 * val;
                    }
                    if noise_sd > 0.0 {
                        val += noise.sample(rng);
                    }
                    rgb[c] = val.round().clamp(0.0, 255.0) as u8;
                }
                img.set_pixel(x, y, rgb);
            }
        }
        img
    }

    fn listing(&self, p: &Product, cfg: &SynthConfig, id: String, rng: &mut ChaRng) -> ProductRecord {
        let image = self.render(p, cfg.noise_level * 100.0, rng);
        let mut words = p.words.clone();
        for i in 0..words.len().saturating_sub(1) {
            if rng.random_bool(WORD_SWAP_PROB) {
                words.swap(i, i + 1);
            }
        }
        ProductRecord {
            id,
            image,
            title: words.join(" "),
            meta_category: (p.leaf % cfg.n_meta) as u32,
            leaf_category: p.leaf as u32,
            match_group: p.group,
        }
    }
}

/// Meta category owning `leaf`.
pub fn meta_of_leaf(leaf: usize, n_meta: usize) -> usize {
    leaf % n_meta
}

/// Generates `(index records, query records)`, deterministic in `config.seed`.
pub fn generate_catalog(cfg: &SynthConfig) -> Result<(Vec<ProductRecord>, Vec<ProductRecord>)> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, "synth");
    let world = World::new(cfg, &mut rng);

    let mut rank_of_leaf: Vec<usize> = (0..cfg.n_leaf).collect();
    rank_of_leaf.shuffle(&mut rng);
    let (sizes, _cap) = leaf_sizes(cfg.n_index_products, cfg.n_leaf, &rank_of_leaf);

    let mut query_leaves: Vec<usize> = (0..cfg.n_leaf).collect();
    query_leaves.shuffle(&mut rng);
    if cfg.query_leaf_subset > 0 {
        query_leaves.truncate(cfg.query_leaf_subset);
    }
    query_leaves.sort_unstable();

    let mut remaining = sizes.clone();
    let mut groups: Vec<(usize, usize)> = Vec::with_capacity(cfg.n_queries); // (leaf, members)
    for g in 0..cfg.n_queries {
        let m = rng.random_range(cfg.matches_per_query.0..=cfg.matches_per_query.1);
        let fits: Vec<usize> = query_leaves.iter().copied().filter(|&l| remaining[l] >= m).collect();
        let total: usize = fits.iter().map(|&l| remaining[l]).sum();
        if total == 0 {
            return Err(Error::InvalidConfig(format!(
                "matches_per_query exceeds group capacity: query {g} needs {m} index matches \
                 but no eligible leaf has room"
            )));
        }
        let mut pick = rng.random_range(0..total);
        let leaf = *fits
            .iter()
            .find(|&&l| {
                if pick < remaining[l] {
                    true
                } else {
                    pick -= remaining[l];
                    false
                }
            })
            .expect("pick within total");
        remaining[leaf] -= m;
        groups.push((leaf, m));
    }

    let mut index_products: Vec<Product> = Vec::with_capacity(cfg.n_index_products);
    let mut query_products: Vec<Product> = Vec::with_capacity(cfg.n_queries);
    for (g, &(leaf, m)) in groups.iter().enumerate() {
        let p = world.product(cfg, leaf, Some(g as u32), &mut rng);
        for _ in 0..m {
            index_products.push(p.clone());
        }
        query_products.push(p);
    }
    for (leaf, &n) in remaining.iter().enumerate() {
        for _ in 0..n {
            index_products.push(world.product(cfg, leaf, None, &mut rng));
        }
    }
    index_products.shuffle(&mut rng);

    let index = index_products
        .iter()
        .enumerate()
        .map(|(i, p)| world.listing(p, cfg, format!("idx-{i:07}"), &mut rng))
        .collect();
    let queries = query_products
        .iter()
        .enumerate()
        .map(|(i, p)| world.listing(p, cfg, format!("qry-{i:05}"), &mut rng))
        .collect();
    Ok((index, queries))
}

/// Train / valid / test partition of the index plus dev / test queries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CatalogSplit {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
    pub query_dev: Vec<String>,
    pub query_test: Vec<String>,
}

fn shuffled_ids(records: &[ProductRecord], rng: &mut ChaRng) -> Vec<String> {
    let mut ids: Vec<String> = records.iter().map(|r| r.id.clone()).collect();
    ids.sort_unstable();
    ids.shuffle(rng);
    ids
}

/// 0.9 / 0.05 / 0.05 random partition (valid and test sizes rounded down).
pub fn split_index(records: &[ProductRecord], seed: u64) -> Result<(Vec<String>, Vec<String>, Vec<String>)> {
    if records.len() < 20 {
        return Err(Error::InvalidConfig(format!(
            "index split needs at least 20 records, got {}",
            records.len()
        )));
    }
    let mut ids = shuffled_ids(records, &mut stream(seed, "split-index"));
    let n_hold = records.len() / 20;
    let test = ids.split_off(ids.len() - n_hold);
    let valid = ids.split_off(ids.len() - n_hold);
    Ok((ids, valid, test))
}

/// 2 : 3 dev / test partition of the queries (dev size rounded down).
pub fn split_queries(records: &[ProductRecord], seed: u64) -> (Vec<String>, Vec<String>) {
    let mut ids = shuffled_ids(records, &mut stream(seed, "split-queries"));
    let n_dev = records.len() * 2 / 5;
    let test = ids.split_off(n_dev);
    (ids, test)
}

pub fn make_split(index: &[ProductRecord], queries: &[ProductRecord], seed: u64) -> Result<CatalogSplit> {
    let (train, valid, test) = split_index(index, seed)?;
    let (query_dev, query_test) = split_queries(queries, seed);
    Ok(CatalogSplit {
        train,
        valid,
        test,
        query_dev,
        query_test,
    })
}

/// One manifest line. Field order is part of the file format.
#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub title: String,
    pub meta_category: u32,
    pub leaf_category: u32,
    pub match_group: Option<String>,
    pub image_path: String,
}

/// Records whose ids appear in `ids`, in the order of `ids`.
pub fn select_records(records: &[ProductRecord], ids: &[String]) -> Result<Vec<ProductRecord>> {
    let by_id: BTreeMap<&str, &ProductRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    ids.iter()
        .map(|id| {
            by_id
                .get(id.as_str())
                .map(|r| (*r).clone())
                .ok_or_else(|| Error::InvalidConfig(format!("unknown record id {id}")))
        })
        .collect()
}

pub fn group_label(g: u32) -> String {
    format!("g{g:05}")
}

fn parse_group_label(s: &str) -> Option<u32> {
    s.strip_prefix('g')?.parse().ok()
}

/// Writes `manifest.jsonl` and `images/<id>.ppm` under `dir`; returns the
/// manifest path. The manifest carries a `.partial` suffix until complete.
pub fn write_catalog(records: &[ProductRecord], dir: &Path) -> Result<PathBuf> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let manifest = dir.join("manifest.jsonl");
    let partial = dir.join("manifest.jsonl.partial");
    let file = File::create(&partial).map_err(|e| Error::io(&partial, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        let rel = format!("images/{}.ppm", r.id);
        let img_path = dir.join(&rel);
        fs::write(&img_path, r.image.to_ppm()).map_err(|e| Error::io(&img_path, e))?;
        let entry = ManifestEntry {
            id: r.id.clone(),
            title: r.title.clone(),
            meta_category: r.meta_category,
            leaf_category: r.leaf_category,
            match_group: r.match_group.map(group_label),
            image_path: rel,
        };
        let line = serde_json::to_string(&entry).expect("manifest entry serializes");
        writeln!(out, "{line}").map_err(|e| Error::io(&partial, e))?;
    }
    out.flush().map_err(|e| Error::io(&partial, e))?;
    drop(out);
    fs::rename(&partial, &manifest).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

/// Reads a manifest written by [`write_catalog`], loading every image.
pub fn read_catalog(manifest: &Path) -> Result<Vec<ProductRecord>> {
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let file = File::open(manifest).map_err(|e| Error::io(manifest, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(manifest, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::format("manifest", format!("line {}: {e}", n + 1)))?;
        let match_group = match &entry.match_group {
            None => None,
            Some(s) => Some(
                parse_group_label(s)
                    .ok_or_else(|| Error::format("manifest", format!("line {}: bad group {s:?}", n + 1)))?,
            ),
        };
        let image = load_image(&dir.join(&entry.image_path))?;
        records.push(ProductRecord {
            id: entry.id,
            image,
            title: entry.title,
            meta_category: entry.meta_category,
            leaf_category: entry.leaf_category,
            match_group,
        });
    }
    Ok(records)
}

/// Index ids per match group.
pub fn group_members(index: &[ProductRecord]) -> BTreeMap<u32, BTreeSet<String>> {
    let mut out: BTreeMap<u32, BTreeSet<String>> = BTreeMap::new();
    for r in index {
        if let Some(g) = r.match_group {
            out.entry(g).or_default().insert(r.id.clone());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            n_meta: 3,
            n_leaf: 10,
            n_index_products: 1000,
            n_queries: 20,
            matches_per_query: (2, 5),
            image_side: 32,
            seed,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn sizes_and_match_counts_hold() {
        let (index, queries) = generate_catalog(&small(7)).unwrap();
        assert_eq!(index.len(), 1000);
        assert_eq!(queries.len(), 20);
        let groups = group_members(&index);
        for q in &queries {
            let n = groups[&q.match_group.unwrap()].len();
            assert!((2..=5).contains(&n), "query {} has {n} matches", q.id);
        }
        let ids: BTreeSet<_> = index.iter().chain(&queries).map(|r| &r.id).collect();
        assert_eq!(ids.len(), 1020);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_catalog(&small(7)).unwrap();
        let b = generate_catalog(&small(7)).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.0[0].title, generate_catalog(&small(8)).unwrap().0[0].title);
    }

    #[test]
    fn leaf_determines_meta() {
        let (index, _) = generate_catalog(&small(3)).unwrap();
        let mut seen = BTreeMap::new();
        for r in &index {
            assert_eq!(*seen.entry(r.leaf_category).or_insert(r.meta_category), r.meta_category);
        }
    }

    #[test]
    fn desk_histogram_is_long_tailed_and_capped() {
        let cfg = SynthConfig::default();
        let (index, _) = generate_catalog(&cfg).unwrap();
        let mut hist = vec![0usize; cfg.n_leaf];
        for r in &index {
            hist[r.leaf_category as usize] += 1;
        }
        // independent cap: 5 x median of the unclipped Zipf(1.2) sizes
        let z: f64 = (1..=40).map(|r| (r as f64).powf(-1.2)).sum();
        let mut raw: Vec<f64> = (1..=40).map(|r| 5000.0 * (r as f64).powf(-1.2) / z).collect();
        raw.sort_by(f64::total_cmp);
        let cap = (5.0 * (raw[19] + raw[20]) / 2.0).floor() as usize;
        let max = *hist.iter().max().unwrap();
        let min = *hist.iter().min().unwrap();
        assert_eq!(hist.iter().sum::<usize>(), 5000);
        assert!(max <= cap, "max {max} above cap {cap}");
        assert!(hist.iter().filter(|&&c| c == max).count() >= 2, "cap never binds: {hist:?}");
        assert!(max >= 4 * min, "tail not long: {hist:?}");
    }

    #[test]
    fn over_capacity_config_is_rejected() {
        let cfg = SynthConfig {
            n_leaf: 4,
            n_meta: 2,
            n_index_products: 40,
            n_queries: 20,
            matches_per_query: (5, 5),
            image_side: 16,
            ..SynthConfig::default()
        };
        assert!(matches!(generate_catalog(&cfg), Err(Error::InvalidConfig(_))));
        let bad = SynthConfig {
            noise_level: 1.5,
            ..SynthConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn query_leaf_subset_restricts_query_categories() {
        let cfg = SynthConfig {
            query_leaf_subset: 3,
            ..small(11)
        };
        let (_, queries) = generate_catalog(&cfg).unwrap();
        let leaves: BTreeSet<_> = queries.iter().map(|q| q.leaf_category).collect();
        assert!(leaves.len() <= 3);
    }

    fn mse(a: &RgbImage, b: &RgbImage) -> f64 {
        a.data
            .iter()
            .zip(&b.data)
            .map(|(&x, &y)| (f64::from(x) - f64::from(y)).powi(2))
            .sum::<f64>()
            / a.data.len() as f64
    }

    #[test]
    fn match_groups_are_visually_tighter_than_same_leaf_distractors() {
        let (index, _) = generate_catalog(&small(5)).unwrap();
        let groups = group_members(&index);
        let by_id: BTreeMap<_, _> = index.iter().map(|r| (r.id.clone(), r)).collect();
        let (mut same, mut diff, mut n) = (0.0, 0.0, 0);
        for members in groups.values() {
            let m: Vec<_> = members.iter().map(|id| by_id[id]).collect();
            for pair in m.windows(2) {
                let other = index
                    .iter()
                    .find(|r| r.leaf_category == pair[0].leaf_category && r.match_group != pair[0].match_group)
                    .unwrap();
                same += mse(&pair[0].image, &pair[1].image);
                diff += mse(&pair[0].image, &other.image);
                n += 1;
            }
        }
        assert!(n >= 20);
        assert!(same / (n as f64) < diff / (n as f64));
    }

    #[test]
    fn splits_have_expected_proportions() {
        let (index, queries) = generate_catalog(&small(1)).unwrap();
        let (tr, va, te) = split_index(&index, 3).unwrap();
        assert_eq!((tr.len(), va.len(), te.len()), (900, 50, 50));
        let all: BTreeSet<_> = tr.iter().chain(&va).chain(&te).collect();
        assert_eq!(all.len(), 1000);

        assert_eq!(split_index(&index[..20], 3).unwrap().1.len(), 1);
        assert_eq!(split_index(&index[..20], 3).unwrap().0.len(), 18);
        assert!(split_index(&index[..19], 3).is_err());

        let mut reversed = index.clone();
        reversed.reverse();
        assert_eq!(split_index(&reversed, 3).unwrap(), split_index(&index, 3).unwrap());

        let (dev, test) = split_queries(&queries[..5], 2);
        assert_eq!((dev.len(), test.len()), (2, 3));
    }

    #[test]
    fn hundred_queries_split_forty_sixty() {
        let cfg = SynthConfig {
            n_queries: 100,
            ..small(2)
        };
        let (_, queries) = generate_catalog(&cfg).unwrap();
        let (dev, test) = split_queries(&queries, 9);
        assert_eq!((dev.len(), test.len()), (40, 60));
        let d: BTreeSet<_> = dev.iter().collect();
        assert!(test.iter().all(|t| !d.contains(t)));
    }

    #[test]
    fn catalog_files_round_trip() {
        let (index, _) = generate_catalog(&small(4)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_catalog(&index[..30], dir.path()).unwrap();
        let first = fs::read_to_string(&manifest).unwrap();
        let line = first.lines().next().unwrap();
        let keys: Vec<_> = ["\"id\"", "\"title\"", "\"meta_category\"", "\"leaf_category\"", "\"match_group\"", "\"image_path\""]
            .iter()
            .map(|k| line.find(k).unwrap())
            .collect();
        assert!(keys.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(read_catalog(&manifest).unwrap(), index[..30].to_vec());
        assert!(!dir.path().join("manifest.jsonl.partial").exists());
    }

    #[test]
    fn unwritable_directory_names_the_path() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        match write_catalog(&[], &blocker.join("sub")) {
            Err(Error::Io { path, .. }) => assert!(path.starts_with(&blocker)),
            other => panic!("{other:?}"),
        }
    }
}
