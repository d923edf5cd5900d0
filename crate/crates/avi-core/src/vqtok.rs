//! Discrete shape tokenizer: 64³ voxel grid ↔ 8192 codebook tokens.
//!
//! The grid is partitioned into 4×4×2-voxel patches (16×16×32 = 8192 of
//! them); each patch's 32 occupancy bits form a vector that is quantized to
//! its nearest codebook entry (squared Euclidean, ties to the lowest index).
//! Entries 0 and 1 are reserved for the all-empty and all-full patches so
//! empty and full grids round-trip exactly.
//!
//! Training runs weighted k-means (k = K−2, k-means++ seeding, deterministic
//! for a fixed seed) over the distinct non-trivial patch vectors, then
//! binarizes the centroids at 0.5. Binarization does not change what any
//! token decodes to (decoding thresholds at 0.5 regardless) but makes
//! encode∘decode a projection: re-encoding a decoded grid provably returns
//! the same tokens, instead of that idempotence holding only by luck.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::VoxelGrid;

/// Default codebook size.
pub const DEFAULT_K: u32 = 512;

/// How a voxel grid is partitioned into patches.
///
/// The default layout — 64³ grid, (4,4,2) patches — yields exactly 8192
/// patches of 32 voxels. Patches are indexed x-major over the patch grid:
/// `p = (px·gy + py)·gz + pz`; within a patch, components are x-major too:
/// `c = (dx·sy + dy)·sz + dz`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "PatchLayoutRaw", into = "PatchLayoutRaw")]
pub struct PatchLayout {
    grid_resolution: u32,
    patch_shape: (u32, u32, u32),
}

#[derive(Serialize, Deserialize)]
struct PatchLayoutRaw {
    grid_resolution: u32,
    patch_shape: (u32, u32, u32),
}

impl TryFrom<PatchLayoutRaw> for PatchLayout {
    type Error = Error;
    fn try_from(raw: PatchLayoutRaw) -> Result<Self> {
        PatchLayout::new(raw.grid_resolution, raw.patch_shape)
    }
}

impl From<PatchLayout> for PatchLayoutRaw {
    fn from(l: PatchLayout) -> Self {
        PatchLayoutRaw { grid_resolution: l.grid_resolution, patch_shape: l.patch_shape }
    }
}

impl PatchLayout {
    /// Patch dimensions must divide the grid resolution and a patch must fit
    /// in 64 voxels (patch vectors double as `u64` bitmasks).
    pub fn new(grid_resolution: u32, patch_shape: (u32, u32, u32)) -> Result<Self> {
        let (sx, sy, sz) = patch_shape;
        if sx == 0 || sy == 0 || sz == 0 {
            return Err(Error::BadPatchLayout("patch dimensions must be nonzero".into()));
        }
        if grid_resolution % sx != 0 || grid_resolution % sy != 0 || grid_resolution % sz != 0 {
            return Err(Error::BadPatchLayout(format!(
                "patch shape ({sx},{sy},{sz}) does not divide resolution {grid_resolution}"
            )));
        }
        if sx * sy * sz > 64 {
            return Err(Error::BadPatchLayout(format!(
                "patch of {} voxels exceeds the 64-voxel limit",
                sx * sy * sz
            )));
        }
        Ok(PatchLayout { grid_resolution, patch_shape })
    }

    pub fn grid_resolution(&self) -> u32 {
        self.grid_resolution
    }

    pub fn patch_shape(&self) -> (u32, u32, u32) {
        self.patch_shape
    }

    /// Patches along each axis.
    pub fn patch_grid(&self) -> (u32, u32, u32) {
        (
            self.grid_resolution / self.patch_shape.0,
            self.grid_resolution / self.patch_shape.1,
            self.grid_resolution / self.patch_shape.2,
        )
    }

    pub fn patches_total(&self) -> usize {
        let (gx, gy, gz) = self.patch_grid();
        gx as usize * gy as usize * gz as usize
    }

    pub fn voxels_per_patch(&self) -> usize {
        let (sx, sy, sz) = self.patch_shape;
        (sx * sy * sz) as usize
    }

    /// Patch-grid coordinates of a patch index.
    fn patch_coords(&self, p: usize) -> (u32, u32, u32) {
        let (_, gy, gz) = self.patch_grid();
        let gz = gz as usize;
        let gy = gy as usize;
        ((p / (gy * gz)) as u32, ((p / gz) % gy) as u32, (p % gz) as u32)
    }

    /// Voxel coordinates of component `c` of patch `p`.
    fn voxel_coords(&self, p: usize, c: usize) -> (u32, u32, u32) {
        let (px, py, pz) = self.patch_coords(p);
        let (sx, sy, sz) = self.patch_shape;
        let dz = (c as u32) % sz;
        let dy = (c as u32 / sz) % sy;
        let dx = c as u32 / (sy * sz);
        debug_assert!(dx < sx);
        let _ = sx;
        (px * sx + dx, py * sy + dy, pz * sz + dz)
    }

    fn check_grid(&self, grid: &VoxelGrid) -> Result<()> {
        if grid.resolution() != self.grid_resolution {
            return Err(Error::GridResolutionMismatch {
                actual: grid.resolution(),
                expected: self.grid_resolution,
            });
        }
        Ok(())
    }
}

impl Default for PatchLayout {
    fn default() -> Self {
        PatchLayout::new(64, (4, 4, 2)).unwrap()
    }
}

/// A patch's occupancy bits packed into a `u64`, component `c` at bit `c`.
fn patch_mask(grid: &VoxelGrid, p: usize, layout: &PatchLayout) -> u64 {
    let mut mask = 0u64;
    for c in 0..layout.voxels_per_patch() {
        let (x, y, z) = layout.voxel_coords(p, c);
        if grid.get(x, y, z) {
            mask |= 1 << c;
        }
    }
    mask
}

/// The patch's occupancy bits flattened x-major into `{0,1}` components.
pub fn patch_vector(grid: &VoxelGrid, patch_index: usize, layout: &PatchLayout) -> Result<Vec<f64>> {
    layout.check_grid(grid)?;
    if patch_index >= layout.patches_total() {
        return Err(Error::PatchOutOfRange { index: patch_index, count: layout.patches_total() });
    }
    let mask = patch_mask(grid, patch_index, layout);
    Ok((0..layout.voxels_per_patch())
        .map(|c| if mask >> c & 1 == 1 { 1.0 } else { 0.0 })
        .collect())
}

/// Nearest-codeword quantizer over patch vectors.
///
/// Entry 0 is all-zeros, entry 1 all-ones; components are finite in `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CodebookRaw", into = "CodebookRaw")]
pub struct Codebook {
    dim: usize,
    entries: Vec<Vec<f64>>,
    /// Bitmask form of every entry when all are binary; enables the exact
    /// popcount distance path.
    #[serde(skip)]
    masks: Option<Vec<u64>>,
}

#[derive(Serialize, Deserialize)]
struct CodebookRaw {
    k: u32,
    dim: u32,
    entries: Vec<Vec<f64>>,
}

impl TryFrom<CodebookRaw> for Codebook {
    type Error = Error;
    fn try_from(raw: CodebookRaw) -> Result<Self> {
        if raw.entries.len() != raw.k as usize {
            return Err(Error::BadCodebook(format!(
                "k = {} but {} entries present",
                raw.k,
                raw.entries.len()
            )));
        }
        Codebook::new(raw.entries, raw.dim as usize)
    }
}

impl From<Codebook> for CodebookRaw {
    fn from(cb: Codebook) -> Self {
        CodebookRaw { k: cb.entries.len() as u32, dim: cb.dim as u32, entries: cb.entries }
    }
}

impl Codebook {
    pub fn new(entries: Vec<Vec<f64>>, dim: usize) -> Result<Self> {
        if entries.len() < 2 {
            return Err(Error::BadCodebook(format!("need ≥ 2 entries, got {}", entries.len())));
        }
        if dim == 0 || dim > 64 {
            return Err(Error::BadCodebook(format!("dim {dim} outside 1..=64")));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.len() != dim {
                return Err(Error::BadCodebook(format!(
                    "entry {i} has {} components, expected {dim}",
                    e.len()
                )));
            }
            if e.iter().any(|v| !v.is_finite() || !(0.0..=1.0).contains(v)) {
                return Err(Error::BadCodebook(format!("entry {i} has components outside [0,1]")));
            }
        }
        if entries[0].iter().any(|&v| v != 0.0) {
            return Err(Error::BadCodebook("entry 0 must be all-zeros".into()));
        }
        if entries[1].iter().any(|&v| v != 1.0) {
            return Err(Error::BadCodebook("entry 1 must be all-ones".into()));
        }
        let masks = entry_masks(&entries);
        Ok(Codebook { dim, entries, masks })
    }

    pub fn k(&self) -> u32 {
        self.entries.len() as u32
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[Vec<f64>] {
        &self.entries
    }

    fn check_layout(&self, layout: &PatchLayout) -> Result<()> {
        if self.dim != layout.voxels_per_patch() {
            return Err(Error::BadCodebook(format!(
                "codebook dim {} does not match layout's {} voxels per patch",
                self.dim,
                layout.voxels_per_patch()
            )));
        }
        Ok(())
    }
}

/// Bitmasks for the entries if every component is exactly 0 or 1.
fn entry_masks(entries: &[Vec<f64>]) -> Option<Vec<u64>> {
    let mut masks = Vec::with_capacity(entries.len());
    for e in entries {
        let mut mask = 0u64;
        for (c, &v) in e.iter().enumerate() {
            if v == 1.0 {
                mask |= 1 << c;
            } else if v != 0.0 {
                return None;
            }
        }
        masks.push(mask);
    }
    Some(masks)
}

/// Training output: the codebook plus diagnostics about padding.
#[derive(Debug, Clone)]
pub struct TrainedCodebook {
    pub codebook: Codebook,
    /// True when fewer distinct codewords than `K` existed and the tail was
    /// padded with copies of entry 0.
    pub padded: bool,
    /// Distinct non-trivial patch vectors seen in the training set.
    pub distinct_vectors: usize,
    /// Lloyd iterations actually run.
    pub iterations: u32,
}

/// Trains a codebook of size `k` on every patch of every grid.
///
/// All-zero and all-one patches are excluded (they own reserved entries 0
/// and 1); the rest are deduplicated into weighted vectors and clustered
/// with k-means (k−2 clusters, k-means++ seeding from `seed`, ≤100
/// iterations or relative inertia change < 1e−6). Centroids are binarized
/// at 0.5 and deduplicated; if fewer than `k` entries result, the codebook
/// is padded with copies of entry 0 and flagged. Single-threaded on purpose:
/// the result is bitwise deterministic for a fixed seed.
pub fn train_codebook(
    grids: &[VoxelGrid],
    k: u32,
    seed: u64,
    layout: &PatchLayout,
) -> Result<TrainedCodebook> {
    if k < 2 {
        return Err(Error::BadCodebook(format!("k must be ≥ 2, got {k}")));
    }
    let dim = layout.voxels_per_patch();
    let full: u64 = if dim == 64 { !0 } else { (1u64 << dim) - 1 };

    // Deduplicate non-trivial patches, weighting by multiplicity. Sorting by
    // bitmask fixes the k-means input order independent of grid order.
    let mut counts: HashMap<u64, u64> = HashMap::new();
    for grid in grids {
        layout.check_grid(grid)?;
        for p in 0..layout.patches_total() {
            let mask = patch_mask(grid, p, layout);
            if mask != 0 && mask != full {
                *counts.entry(mask).or_insert(0) += 1;
            }
        }
    }
    let mut distinct: Vec<(u64, u64)> = counts.into_iter().collect();
    distinct.sort_unstable();
    let distinct_vectors = distinct.len();

    let target = (k - 2) as usize;
    let (mut centroids, iterations) = if distinct.len() <= target {
        // Fewer vectors than clusters: the vectors are their own centroids.
        (distinct.iter().map(|&(m, _)| mask_to_vec(m, dim)).collect::<Vec<_>>(), 0)
    } else {
        kmeans(&distinct, target, dim, seed)
    };

    // Binarize (decode thresholds at 0.5 anyway; see module docs) and drop
    // duplicates and collisions with the reserved entries.
    let mut seen: Vec<u64> = vec![0, full];
    let mut entries: Vec<Vec<f64>> = vec![vec![0.0; dim], vec![1.0; dim]];
    for c in centroids.drain(..) {
        let mask = binarize_mask(&c);
        if !seen.contains(&mask) {
            seen.push(mask);
            entries.push(mask_to_vec(mask, dim));
        }
    }
    let padded = entries.len() < k as usize;
    while entries.len() < k as usize {
        entries.push(vec![0.0; dim]);
    }

    Ok(TrainedCodebook {
        codebook: Codebook::new(entries, dim)?,
        padded,
        distinct_vectors,
        iterations,
    })
}

fn mask_to_vec(mask: u64, dim: usize) -> Vec<f64> {
    (0..dim).map(|c| if mask >> c & 1 == 1 { 1.0 } else { 0.0 }).collect()
}

fn binarize_mask(v: &[f64]) -> u64 {
    let mut mask = 0u64;
    for (c, &x) in v.iter().enumerate() {
        if x >= 0.5 {
            mask |= 1 << c;
        }
    }
    mask
}

/// Squared distance from a binary point (as bitmask) to a real centroid:
/// `Σc² − 2·Σ_{set bits} c + popcount`.
fn dist2_mask_centroid(mask: u64, centroid: &[f64], c2: f64) -> f64 {
    let mut dot = 0.0;
    let mut bits = mask;
    while bits != 0 {
        let c = bits.trailing_zeros() as usize;
        dot += centroid[c];
        bits &= bits - 1;
    }
    c2 - 2.0 * dot + mask.count_ones() as f64
}

/// Weighted Lloyd's algorithm with k-means++ seeding. `points` are distinct
/// binary vectors with multiplicities, pre-sorted for determinism.
fn kmeans(points: &[(u64, u64)], k: usize, dim: usize, seed: u64) -> (Vec<Vec<f64>>, u32) {
    use rand::distributions::{Distribution, WeightedIndex};
    use rand::SeedableRng;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);

    // k-means++: first centroid by weight, the rest by weight·D².
    let weights: Vec<f64> = points.iter().map(|&(_, w)| w as f64).collect();
    let first = WeightedIndex::new(&weights).unwrap().sample(&mut rng);
    let mut chosen = vec![first];
    let mut d2: Vec<f64> = points
        .iter()
        .map(|&(m, _)| (m ^ points[first].0).count_ones() as f64)
        .collect();
    while chosen.len() < k {
        let scores: Vec<f64> = d2.iter().zip(&weights).map(|(d, w)| d * w).collect();
        let next = match WeightedIndex::new(&scores) {
            Ok(dist) => dist.sample(&mut rng),
            // All remaining mass at distance 0 (can't happen with distinct
            // points and k ≤ |points|, but stay total): first unchosen index.
            Err(_) => (0..points.len()).find(|i| !chosen.contains(i)).unwrap(),
        };
        chosen.push(next);
        for (i, &(m, _)) in points.iter().enumerate() {
            d2[i] = d2[i].min((m ^ points[next].0).count_ones() as f64);
        }
    }
    let mut centroids: Vec<Vec<f64>> =
        chosen.iter().map(|&i| mask_to_vec(points[i].0, dim)).collect();

    let mut assignment = vec![0usize; points.len()];
    let mut prev_inertia = f64::INFINITY;
    let mut iterations = 0;
    for _ in 0..100 {
        iterations += 1;
        // Assign (ties to the lowest centroid index).
        let c2: Vec<f64> = centroids.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
        let mut inertia = 0.0;
        for (i, &(m, w)) in points.iter().enumerate() {
            let mut best = (0usize, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let d = dist2_mask_centroid(m, c, c2[j]);
                if d < best.1 {
                    best = (j, d);
                }
            }
            assignment[i] = best.0;
            inertia += w as f64 * best.1;
        }
        // Update: weighted means; empty clusters keep their centroid.
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut mass = vec![0.0f64; k];
        for (i, &(m, w)) in points.iter().enumerate() {
            let j = assignment[i];
            mass[j] += w as f64;
            let mut bits = m;
            while bits != 0 {
                let c = bits.trailing_zeros() as usize;
                sums[j][c] += w as f64;
                bits &= bits - 1;
            }
        }
        for j in 0..k {
            if mass[j] > 0.0 {
                for c in 0..dim {
                    centroids[j][c] = sums[j][c] / mass[j];
                }
            }
        }
        if prev_inertia.is_finite() {
            let change = (prev_inertia - inertia).abs() / prev_inertia.max(f64::MIN_POSITIVE);
            if change < 1e-6 {
                break;
            }
        }
        prev_inertia = inertia;
    }
    (centroids, iterations)
}

/// Quantizes every patch to its nearest codebook entry (squared Euclidean,
/// ties to the lowest index). Always emits exactly `patches_total` tokens.
pub fn encode_grid(grid: &VoxelGrid, codebook: &Codebook, layout: &PatchLayout) -> Result<Vec<u32>> {
    layout.check_grid(grid)?;
    codebook.check_layout(layout)?;
    let dim = layout.voxels_per_patch();
    let full: u64 = if dim == 64 { !0 } else { (1u64 << dim) - 1 };

    let c2: Vec<f64> =
        codebook.entries.iter().map(|c| c.iter().map(|v| v * v).sum()).collect();
    let mut memo: HashMap<u64, u32> = HashMap::new();

    let mut tokens = Vec::with_capacity(layout.patches_total());
    for p in 0..layout.patches_total() {
        let mask = patch_mask(grid, p, layout);
        // Reserved entries win their own patches exactly: distance 0, and no
        // lower-indexed entry can match (entries 0/1 are unique as vectors).
        let token = if mask == 0 {
            0
        } else if mask == full {
            1
        } else if let Some(masks) = &codebook.masks {
            // Binary codebook: squared Euclidean distance is the Hamming
            // distance, so argmin is an exact popcount scan.
            let mut best = (0u32, u32::MAX);
            for (j, &em) in masks.iter().enumerate() {
                let d = (mask ^ em).count_ones();
                if d < best.1 {
                    best = (j as u32, d);
                }
            }
            best.0
        } else if let Some(&t) = memo.get(&mask) {
            t
        } else {
            let mut best = (0u32, f64::INFINITY);
            for (j, c) in codebook.entries.iter().enumerate() {
                let d = dist2_mask_centroid(mask, c, c2[j]);
                if d < best.1 {
                    best = (j as u32, d);
                }
            }
            memo.insert(mask, best.0);
            best.0
        };
        tokens.push(token);
    }
    Ok(tokens)
}

/// Rebuilds a grid by stamping each token's entry, thresholded at 0.5.
pub fn decode_grid(tokens: &[u32], codebook: &Codebook, layout: &PatchLayout) -> Result<VoxelGrid> {
    codebook.check_layout(layout)?;
    if tokens.len() != layout.patches_total() {
        return Err(Error::TokenCountMismatch {
            actual: tokens.len(),
            expected: layout.patches_total(),
        });
    }
    let mut grid = VoxelGrid::empty(layout.grid_resolution)?;
    for (p, &t) in tokens.iter().enumerate() {
        if t >= codebook.k() {
            return Err(Error::TokenOutOfRange { token: t, k: codebook.k() });
        }
        let entry = &codebook.entries[t as usize];
        for (c, &v) in entry.iter().enumerate() {
            if v >= 0.5 {
                let (x, y, z) = layout.voxel_coords(p, c);
                grid.set(x, y, z, true);
            }
        }
    }
    Ok(grid)
}
