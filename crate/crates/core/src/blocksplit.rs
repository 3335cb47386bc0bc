//! Block-wise train/validation/test splitting.
//!
//! Each AOI's bounding box is cut into square blocks anchored at its
//! `(min_x, min_y)` corner; blocks that do not overlap the AOI are dropped.
//! Blocks (not patches) are shuffled and apportioned to the splits, and each
//! patch inherits the split of the block holding its center, so no block
//! contributes patches to two splits.
//!
//! Shuffling is a Fisher-Yates pass driven by ChaCha8 (`rand_chacha`, seeded
//! with `seed_from_u64`) with rejection-sampled bounded integers, which pins
//! the permutation for a given seed independent of `rand`'s helpers.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patching::PatchSet;
use crate::raster::{intersection_bounds, RasterGrid, VectorLayer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Block {
    pub id: String,
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Block {
    /// Half-open containment `[min, max)` on both axes.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x < self.max_x && y >= self.min_y && y < self.max_y
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockGrid {
    pub aoi_id: String,
    pub block_size: f64,
    pub origin_x: f64,
    pub origin_y: f64,
    pub cols: usize,
    pub rows: usize,
    pub blocks: Vec<Block>,
}

impl BlockGrid {
    /// Block holding `(x, y)`, if it was kept.
    pub fn locate(&self, x: f64, y: f64) -> Option<&Block> {
        let i = ((x - self.origin_x) / self.block_size).floor();
        let j = ((y - self.origin_y) / self.block_size).floor();
        if i < 0.0 || j < 0.0 || i >= self.cols as f64 || j >= self.rows as f64 {
            return None;
        }
        let id = block_id(&self.aoi_id, j as usize, i as usize);
        self.blocks.iter().find(|b| b.id == id && b.contains(x, y))
    }
}

fn block_id(aoi_id: &str, row: usize, col: usize) -> String {
    format!("{aoi_id}/r{row:03}c{col:03}")
}

pub fn build_block_grid(aoi: &VectorLayer, aoi_id: &str, block_size: f64) -> Result<BlockGrid> {
    if !(block_size > 0.0 && block_size.is_finite()) {
        return Err(Error::BadConfig(format!(
            "block size must be positive, got {block_size}"
        )));
    }
    let coords = aoi.polygons.iter().flat_map(|p| p.exterior().coords());
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for c in coords {
        x0 = x0.min(c.x);
        y0 = y0.min(c.y);
        x1 = x1.max(c.x);
        y1 = y1.max(c.y);
    }
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::EmptyAoi);
    }
    let cols = ((x1 - x0) / block_size).ceil() as usize;
    let rows = ((y1 - y0) / block_size).ceil() as usize;
    let mut blocks = Vec::new();
    for row in 0..rows {
        for col in 0..cols {
            let b = Block {
                id: block_id(aoi_id, row, col),
                min_x: x0 + col as f64 * block_size,
                min_y: y0 + row as f64 * block_size,
                max_x: x0 + (col + 1) as f64 * block_size,
                max_y: y0 + (row + 1) as f64 * block_size,
            };
            if intersection_bounds(&aoi.polygons, (b.min_x, b.min_y, b.max_x, b.max_y)).is_some() {
                blocks.push(b);
            }
        }
    }
    if blocks.is_empty() {
        return Err(Error::EmptyAoi);
    }
    Ok(BlockGrid {
        aoi_id: aoi_id.to_string(),
        block_size,
        origin_x: x0,
        origin_y: y0,
        cols,
        rows,
        blocks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = SplitFractions { train, val, test };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.train, self.val, self.test];
        if all.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::BadFractions(format!("{all:?} outside [0, 1]")));
        }
        if (all.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::BadFractions(format!("{all:?} do not sum to 1")));
        }
        Ok(())
    }

    fn get(&self, s: Split) -> f64 {
        match s {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        }
    }

    /// Largest-remainder apportionment of `n` items. Equal remainders go to
    /// the earlier split (train, then val, then test).
    pub fn apportion(&self, n: usize) -> [usize; 3] {
        let quotas = Split::ALL.map(|s| self.get(s) * n as f64);
        let mut counts = quotas.map(|q| q.floor() as usize);
        let assigned: usize = counts.iter().sum();
        let mut order = [0usize, 1, 2];
        order.sort_by(|&a, &b| {
            let ra = quotas[a] - quotas[a].floor();
            let rb = quotas[b] - quotas[b].floor();
            rb.total_cmp(&ra).then(a.cmp(&b))
        });
        for &k in order.iter().take(n.saturating_sub(assigned)) {
            counts[k] += 1;
        }
        counts
    }
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.7,
            val: 0.2,
            test: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub fractions: SplitFractions,
    pub seed: u64,
    pub block_to_split: BTreeMap<String, Split>,
    pub patch_to_split: BTreeMap<usize, Split>,
    /// Patches whose center lies in no kept block.
    pub excluded_patches: Vec<usize>,
}

/// Uniform integer in `0..bound` by rejection sampling.
fn bounded(rng: &mut ChaCha8Rng, bound: u64) -> u64 {
    let zone = u64::MAX - (u64::MAX % bound);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return x % bound;
        }
    }
}

fn shuffle<T>(items: &mut [T], seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..items.len()).rev() {
        let j = bounded(&mut rng, i as u64 + 1) as usize;
        items.swap(i, j);
    }
}

pub fn assign_splits(grid: &BlockGrid, fractions: SplitFractions, seed: u64) -> Result<SplitAssignment> {
    assign_splits_pooled(std::slice::from_ref(grid), fractions, seed)
}

/// Splits the blocks of several AOIs as one pool.
pub fn assign_splits_pooled(grids: &[BlockGrid], fractions: SplitFractions, seed: u64) -> Result<SplitAssignment> {
    fractions.validate()?;
    let mut ids: Vec<&str> = grids
        .iter()
        .flat_map(|g| g.blocks.iter().map(|b| b.id.as_str()))
        .collect();
    shuffle(&mut ids, seed);
    let counts = fractions.apportion(ids.len());
    let mut block_to_split = BTreeMap::new();
    let mut it = ids.into_iter();
    for (split, count) in Split::ALL.into_iter().zip(counts) {
        for id in it.by_ref().take(count) {
            block_to_split.insert(id.to_string(), split);
        }
    }
    Ok(SplitAssignment {
        fractions,
        seed,
        block_to_split,
        patch_to_split: BTreeMap::new(),
        excluded_patches: Vec::new(),
    })
}

/// Maps each patch to the split of the block containing its center.
pub fn assign_patches(patchset: &PatchSet, grid: &BlockGrid, assignment: &SplitAssignment) -> SplitAssignment {
    let mut out = assignment.clone();
    out.patch_to_split.clear();
    out.excluded_patches.clear();
    for i in 0..patchset.len() {
        let (x, y) = patchset.patch_center(i);
        match grid.locate(x, y).and_then(|b| assignment.block_to_split.get(&b.id)) {
            Some(&split) => {
                out.patch_to_split.insert(i, split);
            }
            None => out.excluded_patches.push(i),
        }
    }
    out
}

/// Burned and valid pixel counts per split, from binary-mask patches.
pub fn burned_balance(masks: &PatchSet, assignment: &SplitAssignment) -> BTreeMap<Split, (u64, u64)> {
    let mut out = BTreeMap::new();
    for (&i, &split) in &assignment.patch_to_split {
        let patch: &RasterGrid = &masks.patches[i];
        let entry = out.entry(split).or_insert((0u64, 0u64));
        for &v in patch.band(0) {
            if v == 0.0 || v == 1.0 {
                entry.1 += 1;
                if v == 1.0 {
                    entry.0 += 1;
                }
            }
        }
    }
    out
}

const SPLIT_FORMAT: &str = "scarseg-split";
const SPLIT_VERSION: u32 = 1;

/// On-disk split description covering any number of AOIs (events).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitFile {
    pub format: String,
    pub version: u32,
    pub seed: u64,
    pub fractions: SplitFractions,
    pub block_size: f64,
    pub blocks: Vec<BlockRecord>,
    pub events: Vec<EventSplit>,
    pub balance: Vec<BalanceRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub block_id: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRecord {
    pub index: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSplit {
    pub event: String,
    pub patches: Vec<PatchRecord>,
    pub excluded: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRecord {
    pub split: Split,
    pub burned_pixels: u64,
    pub valid_pixels: u64,
    pub burned_fraction: f64,
}

impl SplitFile {
    pub fn new(
        assignment: &SplitAssignment,
        block_size: f64,
        events: Vec<EventSplit>,
        balance: &BTreeMap<Split, (u64, u64)>,
    ) -> Self {
        SplitFile {
            format: SPLIT_FORMAT.into(),
            version: SPLIT_VERSION,
            seed: assignment.seed,
            fractions: assignment.fractions,
            block_size,
            blocks: assignment
                .block_to_split
                .iter()
                .map(|(id, &split)| BlockRecord {
                    block_id: id.clone(),
                    split,
                })
                .collect(),
            events,
            balance: Split::ALL
                .iter()
                .map(|&split| {
                    let (burned, valid) = balance.get(&split).copied().unwrap_or((0, 0));
                    BalanceRecord {
                        split,
                        burned_pixels: burned,
                        valid_pixels: valid,
                        burned_fraction: if valid == 0 { 0.0 } else { burned as f64 / valid as f64 },
                    }
                })
                .collect(),
        }
    }

    /// Patch indices of `event` assigned to `split`.
    pub fn patches_of(&self, event: &str, split: Split) -> Vec<usize> {
        self.events
            .iter()
            .filter(|e| e.event == event)
            .flat_map(|e| e.patches.iter())
            .filter(|p| p.split == split)
            .map(|p| p.index)
            .collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("split file serializes");
        std::fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<SplitFile> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: SplitFile =
            serde_json::from_str(&text).map_err(|e| Error::UnsupportedFormat(format!("{}: {e}", path.display())))?;
        if file.format != SPLIT_FORMAT || file.version != SPLIT_VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "{}: expected {SPLIT_FORMAT} v{SPLIT_VERSION}",
                path.display()
            )));
        }
        Ok(file)
    }
}
