//! Location quantization: object centroid and scale as discrete tokens.
//!
//! An object's placement is coded as four 1-indexed bins — x, y, z over the
//! workspace (`B` bins per axis) and an isotropic scale bin (largest
//! bounding-box edge as a fraction of the largest workspace edge). The
//! vocabulary reserves a fixed 896-id location extension after the text
//! segment (3 × 256 position slots + 128 scale slots; configs with smaller
//! `B` use a prefix of each slot range), followed by one id per shape
//! codeword.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bounding_box, devoxelize, Aabb, Point3, PointCloud, VoxelGrid};

/// Width of each per-axis position token segment.
pub const POSITION_SLOTS: u16 = 256;
/// Width of the scale token segment.
pub const SCALE_SLOTS: u16 = 128;
/// Total location ids appended to the base vocabulary.
pub const LOCATION_EXTENSION: u32 = 3 * POSITION_SLOTS as u32 + SCALE_SLOTS as u32;

/// Minimum edge used when voxelizing a degenerate (e.g. single-point) object
/// so its normalization cube always has volume.
pub const MIN_OBJECT_EDGE: f64 = 1e-9;

/// Quantization parameters: workspace box, bin counts, and whether the
/// effective-resolution law treats location quantization as enabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "QuantConfigRaw", into = "QuantConfigRaw")]
pub struct QuantConfig {
    workspace: Aabb,
    position_bins: u16,
    scale_bins: u16,
    lq_enabled: bool,
}

#[derive(Serialize, Deserialize)]
struct QuantConfigRaw {
    position_bins: u16,
    scale_bins: u16,
    workspace: Aabb,
    lq_enabled: bool,
}

impl TryFrom<QuantConfigRaw> for QuantConfig {
    type Error = Error;
    fn try_from(raw: QuantConfigRaw) -> Result<Self> {
        QuantConfig::new(raw.workspace, raw.position_bins, raw.scale_bins, raw.lq_enabled)
    }
}

impl From<QuantConfig> for QuantConfigRaw {
    fn from(cfg: QuantConfig) -> Self {
        QuantConfigRaw {
            position_bins: cfg.position_bins,
            scale_bins: cfg.scale_bins,
            workspace: cfg.workspace,
            lq_enabled: cfg.lq_enabled,
        }
    }
}

impl QuantConfig {
    pub fn new(
        workspace: Aabb,
        position_bins: u16,
        scale_bins: u16,
        lq_enabled: bool,
    ) -> Result<Self> {
        if !(2..=POSITION_SLOTS).contains(&position_bins) {
            return Err(Error::BadQuantConfig(format!(
                "position_bins {position_bins} outside 2..=256"
            )));
        }
        if !(2..=SCALE_SLOTS).contains(&scale_bins) {
            return Err(Error::BadQuantConfig(format!("scale_bins {scale_bins} outside 2..=128")));
        }
        if !workspace.has_volume() {
            return Err(Error::BadQuantConfig("workspace must have volume".into()));
        }
        Ok(QuantConfig { workspace, position_bins, scale_bins, lq_enabled })
    }

    pub fn workspace(&self) -> &Aabb {
        &self.workspace
    }

    pub fn position_bins(&self) -> u16 {
        self.position_bins
    }

    pub fn scale_bins(&self) -> u16 {
        self.scale_bins
    }

    pub fn lq_enabled(&self) -> bool {
        self.lq_enabled
    }
}

impl Default for QuantConfig {
    /// Unit-cube workspace, 256 position bins, 128 scale bins, LQ enabled.
    fn default() -> Self {
        let workspace = Aabb::new(Point3::origin(), Point3::new(1.0, 1.0, 1.0)).unwrap();
        QuantConfig::new(workspace, 256, 128, true).unwrap()
    }
}

/// Quantized object placement: per-axis centroid bins plus a scale bin,
/// all 1-indexed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LocationDescriptor {
    pub x_bin: u16,
    pub y_bin: u16,
    pub z_bin: u16,
    pub s_bin: u16,
}

impl LocationDescriptor {
    pub fn new(x_bin: u16, y_bin: u16, z_bin: u16, s_bin: u16) -> Self {
        LocationDescriptor { x_bin, y_bin, z_bin, s_bin }
    }

    /// Checks bins against a config's active ranges.
    pub fn validate(&self, cfg: &QuantConfig) -> Result<()> {
        let axes: [(&'static str, u16, u16); 4] = [
            ("position-x", self.x_bin, cfg.position_bins),
            ("position-y", self.y_bin, cfg.position_bins),
            ("position-z", self.z_bin, cfg.position_bins),
            ("scale", self.s_bin, cfg.scale_bins),
        ];
        for (what, bin, max) in axes {
            if bin < 1 || bin > max {
                return Err(Error::BinOutOfRange { what, bin, max });
            }
        }
        Ok(())
    }
}

fn quantize_axis(value: f64, min: f64, extent: f64, bins: u16) -> u16 {
    let raw = ((value - min) / extent * bins as f64).floor();
    (raw.clamp(0.0, bins as f64 - 1.0) as u16) + 1
}

/// Quantizes an object's placement. The "centroid" is the bounding-box
/// center (the same anchor [`object_cube`] normalizes around), and scale is
/// the largest bounding-box edge over the largest workspace edge, clamped
/// into the last bin if the object outgrows the workspace.
pub fn quantize_location(cloud: &PointCloud, cfg: &QuantConfig) -> Result<LocationDescriptor> {
    let bbox = bounding_box(cloud)?;
    let centroid = bbox.center();
    if !cfg.workspace.contains(&centroid) {
        return Err(Error::CentroidOutsideWorkspace { centroid: centroid.coords.into() });
    }
    let (min, extent) = (cfg.workspace.min(), cfg.workspace.extent());
    let s = bbox.largest_edge() / cfg.workspace.largest_edge();
    let s_raw = (s * cfg.scale_bins as f64).floor();
    Ok(LocationDescriptor {
        x_bin: quantize_axis(centroid.x, min.x, extent.x, cfg.position_bins),
        y_bin: quantize_axis(centroid.y, min.y, extent.y, cfg.position_bins),
        z_bin: quantize_axis(centroid.z, min.z, extent.z, cfg.position_bins),
        s_bin: (s_raw.clamp(0.0, cfg.scale_bins as f64 - 1.0) as u16) + 1,
    })
}

/// Decodes a descriptor to its bin centers: centroid coordinate
/// `min + (bin − ½)/B · extent` per axis and scale fraction
/// `(s_bin − ½)/scale_bins`.
pub fn dequantize_location(desc: &LocationDescriptor, cfg: &QuantConfig) -> Result<(Point3, f64)> {
    desc.validate(cfg)?;
    let (min, extent) = (cfg.workspace.min(), cfg.workspace.extent());
    let b = cfg.position_bins as f64;
    let centroid = Point3::new(
        min.x + (desc.x_bin as f64 - 0.5) / b * extent.x,
        min.y + (desc.y_bin as f64 - 0.5) / b * extent.y,
        min.z + (desc.z_bin as f64 - 0.5) / b * extent.z,
    );
    let scale = (desc.s_bin as f64 - 0.5) / cfg.scale_bins as f64;
    Ok((centroid, scale))
}

/// The world-frame cube a descriptor decodes into: centered at the decoded
/// centroid with edge `scale_fraction · largest workspace edge`.
pub fn decoded_cube(desc: &LocationDescriptor, cfg: &QuantConfig) -> Result<Aabb> {
    let (centroid, scale) = dequantize_location(desc, cfg)?;
    Aabb::cube(centroid, scale * cfg.workspace.largest_edge())
}

/// The object-normalization cube shapes are voxelized in: centered on the
/// bounding-box center with edge equal to the largest bounding-box edge
/// (floored at [`MIN_OBJECT_EDGE`] so degenerate objects still get volume).
pub fn object_cube(cloud: &PointCloud) -> Result<Aabb> {
    let bbox = bounding_box(cloud)?;
    let cube = Aabb::cube(bbox.center(), bbox.largest_edge().max(MIN_OBJECT_EDGE))?;
    // center ± edge/2 can round a hair inside the bounding box, which would
    // let voxelize drop the extreme points; widen to the exact envelope.
    let lo = cube.min().inf(&bbox.min());
    let hi = cube.max().sup(&bbox.max());
    Aabb::new(lo, hi)
}

/// Token-id layout over text, location, and shape segments.
///
/// Ids are assigned contiguously: text `[0, base)`, position-x
/// `[base, base+256)`, position-y and position-z in the next two 256-wide
/// segments, scale `[base+768, base+896)`, shape `[base+896,
/// base+896+codebook_size)`. Two ids past the end are reserved as
/// separators for sequence framing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRaw", into = "VocabularyRaw")]
pub struct Vocabulary {
    base_size: u32,
    codebook_size: u32,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRaw {
    base_size: u32,
    codebook_size: u32,
}

impl TryFrom<VocabularyRaw> for Vocabulary {
    type Error = Error;
    fn try_from(raw: VocabularyRaw) -> Result<Self> {
        extend_vocabulary(raw.base_size, raw.codebook_size)
    }
}

impl From<Vocabulary> for VocabularyRaw {
    fn from(v: Vocabulary) -> Self {
        VocabularyRaw { base_size: v.base_size, codebook_size: v.codebook_size }
    }
}

/// Lays out a vocabulary: exactly [`LOCATION_EXTENSION`] location ids after
/// the base segment, then one id per shape codeword.
pub fn extend_vocabulary(base_size: u32, codebook_size: u32) -> Result<Vocabulary> {
    if base_size < 1 {
        return Err(Error::BadQuantConfig("vocabulary base_size must be ≥ 1".into()));
    }
    if codebook_size < 1 {
        return Err(Error::BadQuantConfig("vocabulary codebook_size must be ≥ 1".into()));
    }
    Ok(Vocabulary { base_size, codebook_size })
}

/// What a single token id denotes. Bins and codes are already shifted back
/// into their local ranges (bins 1-indexed, shape codes 0-indexed).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Text(u32),
    PosX(u16),
    PosY(u16),
    PosZ(u16),
    Scale(u16),
    Shape(u32),
    Separator,
    PairSeparator,
}

impl Vocabulary {
    pub fn base_size(&self) -> u32 {
        self.base_size
    }

    pub fn codebook_size(&self) -> u32 {
        self.codebook_size
    }

    pub fn pos_x_offset(&self) -> u32 {
        self.base_size
    }

    pub fn pos_y_offset(&self) -> u32 {
        self.base_size + POSITION_SLOTS as u32
    }

    pub fn pos_z_offset(&self) -> u32 {
        self.base_size + 2 * POSITION_SLOTS as u32
    }

    pub fn scale_offset(&self) -> u32 {
        self.base_size + 3 * POSITION_SLOTS as u32
    }

    pub fn shape_offset(&self) -> u32 {
        self.base_size + LOCATION_EXTENSION
    }

    /// Total assigned ids: `base + 896 + codebook_size`.
    pub fn total(&self) -> u32 {
        self.shape_offset() + self.codebook_size
    }

    /// Sequence separator between instruction text and object blocks.
    pub fn separator(&self) -> u32 {
        self.total()
    }

    /// Separator between the input and output halves of a training pair.
    pub fn pair_separator(&self) -> u32 {
        self.total() + 1
    }

    /// Token id for a shape code in `[0, codebook_size)`.
    pub fn shape_token(&self, code: u32) -> Result<u32> {
        if code >= self.codebook_size {
            return Err(Error::TokenOutOfRange { token: code, k: self.codebook_size });
        }
        Ok(self.shape_offset() + code)
    }

    /// Inverse of [`Vocabulary::shape_token`].
    pub fn shape_code(&self, token: u32) -> Result<u32> {
        match self.classify(token) {
            Some(TokenKind::Shape(code)) => Ok(code),
            _ => Err(Error::TokenOutOfSegment { token, expected: "shape" }),
        }
    }

    /// Classifies a token id; `None` if it lies past the reserved range.
    pub fn classify(&self, token: u32) -> Option<TokenKind> {
        let seg = |offset: u32| token - offset;
        Some(if token < self.base_size {
            TokenKind::Text(token)
        } else if token < self.pos_y_offset() {
            TokenKind::PosX(seg(self.pos_x_offset()) as u16 + 1)
        } else if token < self.pos_z_offset() {
            TokenKind::PosY(seg(self.pos_y_offset()) as u16 + 1)
        } else if token < self.scale_offset() {
            TokenKind::PosZ(seg(self.pos_z_offset()) as u16 + 1)
        } else if token < self.shape_offset() {
            TokenKind::Scale(seg(self.scale_offset()) as u16 + 1)
        } else if token < self.total() {
            TokenKind::Shape(seg(self.shape_offset()))
        } else if token == self.separator() {
            TokenKind::Separator
        } else if token == self.pair_separator() {
            TokenKind::PairSeparator
        } else {
            return None;
        })
    }
}

/// Maps a descriptor to its four token ids in x, y, z, scale order.
/// Bins are checked against the segment widths (256/256/256/128).
pub fn tokens_of(desc: &LocationDescriptor, vocab: &Vocabulary) -> Result<[u32; 4]> {
    let axes: [(&'static str, u16, u16, u32); 4] = [
        ("position-x", desc.x_bin, POSITION_SLOTS, vocab.pos_x_offset()),
        ("position-y", desc.y_bin, POSITION_SLOTS, vocab.pos_y_offset()),
        ("position-z", desc.z_bin, POSITION_SLOTS, vocab.pos_z_offset()),
        ("scale", desc.s_bin, SCALE_SLOTS, vocab.scale_offset()),
    ];
    let mut out = [0u32; 4];
    for (i, (what, bin, max, offset)) in axes.into_iter().enumerate() {
        if bin < 1 || bin > max {
            return Err(Error::BinOutOfRange { what, bin, max });
        }
        out[i] = offset + (bin - 1) as u32;
    }
    Ok(out)
}

/// Inverse of [`tokens_of`]: expects exactly four tokens from the x, y, z,
/// scale segments in that order.
pub fn descriptor_of(tokens: &[u32], vocab: &Vocabulary) -> Result<LocationDescriptor> {
    if tokens.len() != 4 {
        return Err(Error::MalformedSequence(format!(
            "location descriptor needs 4 tokens, got {}",
            tokens.len()
        )));
    }
    let x = match vocab.classify(tokens[0]) {
        Some(TokenKind::PosX(b)) => b,
        _ => return Err(Error::TokenOutOfSegment { token: tokens[0], expected: "position-x" }),
    };
    let y = match vocab.classify(tokens[1]) {
        Some(TokenKind::PosY(b)) => b,
        _ => return Err(Error::TokenOutOfSegment { token: tokens[1], expected: "position-y" }),
    };
    let z = match vocab.classify(tokens[2]) {
        Some(TokenKind::PosZ(b)) => b,
        _ => return Err(Error::TokenOutOfSegment { token: tokens[2], expected: "position-z" }),
    };
    let s = match vocab.classify(tokens[3]) {
        Some(TokenKind::Scale(b)) => b,
        _ => return Err(Error::TokenOutOfSegment { token: tokens[3], expected: "scale" }),
    };
    Ok(LocationDescriptor::new(x, y, z, s))
}

/// World-space perceived resolution `R_eff`: `max(B, ceil(V/s))` with
/// location quantization enabled, `ceil(V/s)` without. Requires `V ≥ 2` and
/// `0 < s ≤ 1`.
pub fn effective_resolution(cfg: &QuantConfig, base_resolution: u32, scale: f64) -> Result<u32> {
    if base_resolution < 2 {
        return Err(Error::BadResolution(base_resolution));
    }
    if !(scale > 0.0 && scale <= 1.0) {
        return Err(Error::BadScaleFraction(scale));
    }
    let lifted = (base_resolution as f64 / scale).ceil() as u32;
    Ok(if cfg.lq_enabled { lifted.max(cfg.position_bins as u32) } else { lifted })
}

/// A scene re-assembled from per-object (shape grid, location) pairs.
#[derive(Debug, Clone)]
pub struct ComposedScene {
    /// Union of all decoded object clouds, clipped to the workspace.
    pub cloud: PointCloud,
    /// Index range of each object's points within `cloud`, in input order.
    pub object_ranges: Vec<std::ops::Range<usize>>,
    /// Number of decoded points discarded for falling outside the workspace.
    pub clipped_points: usize,
}

/// Decodes each (grid, descriptor) pair — devoxelize in the descriptor's
/// decoded cube — and unions the results in input order, dropping (and
/// counting) points outside the workspace.
pub fn compose_scene(
    parts: &[(&VoxelGrid, &LocationDescriptor)],
    cfg: &QuantConfig,
) -> Result<ComposedScene> {
    let mut cloud = PointCloud::default();
    let mut object_ranges = Vec::with_capacity(parts.len());
    let mut clipped_points = 0;
    for (grid, desc) in parts {
        let cube = decoded_cube(desc, cfg)?;
        let start = cloud.len();
        for p in devoxelize(grid, &cube)?.points {
            if cfg.workspace.contains(&p) {
                cloud.points.push(p);
            } else {
                clipped_points += 1;
            }
        }
        object_ranges.push(start..cloud.len());
    }
    Ok(ComposedScene { cloud, object_ranges, clipped_points })
}
