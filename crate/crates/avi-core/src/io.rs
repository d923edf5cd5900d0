//! On-disk formats and atomic file I/O.
//!
//! Binary formats share a 16-byte header: a 4-byte ASCII magic, then three
//! little-endian `u32` fields (meaning per format, unused fields written as
//! zero and ignored on read):
//!
//! * `AVIV` — voxel grid: resolution, reserved, reserved; payload is
//!   `ceil(V³/8)` bytes, bit `i` (LSB-first within each byte) is the voxel
//!   with linear index `i` (see [`VoxelGrid`] for the index order).
//! * `AVID` — depth image: width, height, reserved; payload is `w·h` `f32`
//!   LE values in row-major order, `0` meaning "no return".
//! * `AVIM` — segmentation mask: width, height, reserved; payload is `w·h`
//!   `u16` LE labels in row-major order, `0` meaning background.
//!
//! Point clouds are plain text, one `x y z` triple per line; `#` starts a
//! comment. Token streams are whitespace-separated unsigned integers.
//!
//! All `save_*` helpers write atomically: a temp file in the destination
//! directory is renamed over the target, so readers never observe a
//! partially written file.

use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud, VoxelGrid};

// ---------------------------------------------------------------------------
// Atomic writes
// ---------------------------------------------------------------------------

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

/// Writes `bytes` to `path` via a same-directory temp file and rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::format("path", format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp-{}-{}",
        name.to_string_lossy(),
        std::process::id(),
        TEMP_COUNTER.fetch_add(1, Ordering::Relaxed),
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Binary header helpers
// ---------------------------------------------------------------------------

fn take<'a>(rest: &mut &'a [u8], n: usize, format: &'static str) -> Result<&'a [u8]> {
    if rest.len() < n {
        return Err(Error::format(format, "truncated header"));
    }
    let (head, tail) = rest.split_at(n);
    *rest = tail;
    Ok(head)
}

fn take_u32(rest: &mut &[u8], format: &'static str) -> Result<u32> {
    let b = take(rest, 4, format)?;
    Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
}

fn expect_magic(rest: &mut &[u8], magic: &[u8; 4], format: &'static str) -> Result<()> {
    let got = take(rest, 4, format)?;
    if got != magic {
        return Err(Error::format(format, format!("bad magic {got:02x?}")));
    }
    Ok(())
}

fn header(magic: &[u8; 4], a: u32, b: u32, c: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(16);
    out.extend_from_slice(magic);
    out.extend_from_slice(&a.to_le_bytes());
    out.extend_from_slice(&b.to_le_bytes());
    out.extend_from_slice(&c.to_le_bytes());
    out
}

// ---------------------------------------------------------------------------
// AVIV — voxel grids
// ---------------------------------------------------------------------------

pub fn grid_to_aviv(grid: &VoxelGrid) -> Vec<u8> {
    let mut out = header(b"AVIV", grid.resolution(), 0, 0);
    out.extend_from_slice(grid.as_bytes());
    out
}

pub fn grid_from_aviv(bytes: &[u8]) -> Result<VoxelGrid> {
    let mut rest = bytes;
    expect_magic(&mut rest, b"AVIV", "AVIV")?;
    let resolution = take_u32(&mut rest, "AVIV")?;
    take_u32(&mut rest, "AVIV")?;
    take_u32(&mut rest, "AVIV")?;
    VoxelGrid::from_bytes(resolution, rest.to_vec())
}

pub fn load_grid(path: &Path) -> Result<VoxelGrid> {
    grid_from_aviv(&std::fs::read(path)?)
}

pub fn save_grid(path: &Path, grid: &VoxelGrid) -> Result<()> {
    write_atomic(path, &grid_to_aviv(grid))
}

// ---------------------------------------------------------------------------
// Depth images (AVID)
// ---------------------------------------------------------------------------

/// Row-major depth image; sample `(x, y)` sits at index `y·width + x`.
/// Depths are finite and non-negative by construction; `0` means the sensor
/// had no return at that pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    width: u32,
    height: u32,
    data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        check_dims("depth image", width, height, data.len())?;
        for (index, &value) in data.iter().enumerate() {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::BadDepthValue { index, value });
            }
        }
        Ok(DepthImage { width, height, data })
    }

    /// All-zero ("no return everywhere") image.
    pub fn zeros(width: u32, height: u32) -> Result<Self> {
        let len = width as usize * height as usize;
        DepthImage::new(width, height, vec![0.0; len])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> f32 {
        self.data[(y * self.width + x) as usize]
    }

    /// Sets one sample; the value must be finite and non-negative.
    pub fn set(&mut self, x: u32, y: u32, value: f32) -> Result<()> {
        let index = (y * self.width + x) as usize;
        if !value.is_finite() || value < 0.0 {
            return Err(Error::BadDepthValue { index, value });
        }
        self.data[index] = value;
        Ok(())
    }
}

fn check_dims(what: &'static str, width: u32, height: u32, len: usize) -> Result<()> {
    if width == 0 || height == 0 {
        return Err(Error::format(what, format!("dimensions {width}x{height} must be nonzero")));
    }
    let expected = width as usize * height as usize;
    if len != expected {
        return Err(Error::format(
            what,
            format!("{len} samples do not fill {width}x{height} = {expected}"),
        ));
    }
    Ok(())
}

pub fn depth_to_avid(image: &DepthImage) -> Vec<u8> {
    let mut out = header(b"AVID", image.width(), image.height(), 0);
    out.reserve(image.data().len() * 4);
    for v in image.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn depth_from_avid(bytes: &[u8]) -> Result<DepthImage> {
    let mut rest = bytes;
    expect_magic(&mut rest, b"AVID", "AVID")?;
    let width = take_u32(&mut rest, "AVID")?;
    let height = take_u32(&mut rest, "AVID")?;
    take_u32(&mut rest, "AVID")?;
    let expected = width as u64 * height as u64 * 4;
    if rest.len() as u64 != expected {
        return Err(Error::format(
            "AVID",
            format!("payload is {} bytes, expected {expected}", rest.len()),
        ));
    }
    let data = rest
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    DepthImage::new(width, height, data)
}

pub fn load_depth(path: &Path) -> Result<DepthImage> {
    depth_from_avid(&std::fs::read(path)?)
}

pub fn save_depth(path: &Path, image: &DepthImage) -> Result<()> {
    write_atomic(path, &depth_to_avid(image))
}

// ---------------------------------------------------------------------------
// Segmentation masks (AVIM)
// ---------------------------------------------------------------------------

/// Row-major label image; `0` is background, any other `u16` is an object id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskImage {
    width: u32,
    height: u32,
    labels: Vec<u16>,
}

impl MaskImage {
    pub fn new(width: u32, height: u32, labels: Vec<u16>) -> Result<Self> {
        check_dims("mask image", width, height, labels.len())?;
        Ok(MaskImage { width, height, labels })
    }

    /// All-background mask.
    pub fn zeros(width: u32, height: u32) -> Result<Self> {
        let len = width as usize * height as usize;
        MaskImage::new(width, height, vec![0; len])
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> u16 {
        self.labels[(y * self.width + x) as usize]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, label: u16) {
        self.labels[(y * self.width + x) as usize] = label;
    }
}

pub fn mask_to_avim(mask: &MaskImage) -> Vec<u8> {
    let mut out = header(b"AVIM", mask.width(), mask.height(), 0);
    out.reserve(mask.labels().len() * 2);
    for v in mask.labels() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn mask_from_avim(bytes: &[u8]) -> Result<MaskImage> {
    let mut rest = bytes;
    expect_magic(&mut rest, b"AVIM", "AVIM")?;
    let width = take_u32(&mut rest, "AVIM")?;
    let height = take_u32(&mut rest, "AVIM")?;
    take_u32(&mut rest, "AVIM")?;
    let expected = width as u64 * height as u64 * 2;
    if rest.len() as u64 != expected {
        return Err(Error::format(
            "AVIM",
            format!("payload is {} bytes, expected {expected}", rest.len()),
        ));
    }
    let labels = rest
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    MaskImage::new(width, height, labels)
}

pub fn load_mask(path: &Path) -> Result<MaskImage> {
    mask_from_avim(&std::fs::read(path)?)
}

pub fn save_mask(path: &Path, mask: &MaskImage) -> Result<()> {
    write_atomic(path, &mask_to_avim(mask))
}

// ---------------------------------------------------------------------------
// XYZ point cloud text
// ---------------------------------------------------------------------------

/// Renders one `x y z` line per point. Coordinates use the shortest decimal
/// form that round-trips through `f64`.
pub fn cloud_to_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for p in &cloud.points {
        out.push_str(&format!("{} {} {}\n", p.x, p.y, p.z));
    }
    out
}

/// Parses XYZ text. Blank lines are skipped and `#` starts a comment; every
/// remaining line must hold exactly three finite floats.
pub fn cloud_from_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let mut coords = [0.0f64; 3];
        let mut fields = line.split_whitespace();
        for c in &mut coords {
            let field = fields.next().ok_or_else(|| Error::Parse {
                line: i + 1,
                message: "expected three coordinates".into(),
            })?;
            *c = field.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad float {field:?}"),
            })?;
            if !c.is_finite() {
                return Err(Error::Parse {
                    line: i + 1,
                    message: format!("non-finite coordinate {field:?}"),
                });
            }
        }
        if fields.next().is_some() {
            return Err(Error::Parse {
                line: i + 1,
                message: "expected exactly three coordinates".into(),
            });
        }
        points.push(Point3::new(coords[0], coords[1], coords[2]));
    }
    Ok(PointCloud { points })
}

pub fn load_cloud(path: &Path) -> Result<PointCloud> {
    cloud_from_xyz(&std::fs::read_to_string(path)?)
}

pub fn save_cloud(path: &Path, cloud: &PointCloud) -> Result<()> {
    write_atomic(path, cloud_to_xyz(cloud).as_bytes())
}

// ---------------------------------------------------------------------------
// Token streams
// ---------------------------------------------------------------------------

/// Renders tokens space-separated, sixteen per line.
pub fn tokens_to_text(tokens: &[u32]) -> String {
    let mut out = String::new();
    for chunk in tokens.chunks(16) {
        let line: Vec<String> = chunk.iter().map(u32::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}

/// Parses whitespace-separated unsigned tokens; blank lines are ignored and
/// `#` starts a comment.
pub fn tokens_from_text(text: &str) -> Result<Vec<u32>> {
    let mut tokens = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        for field in line.split_whitespace() {
            tokens.push(field.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad token {field:?}"),
            })?);
        }
    }
    Ok(tokens)
}

/// Splits text into blocks separated by one or more blank lines and parses
/// each block as a token stream. Used for prediction corpora, where blocks
/// alternate input/output sequences. Comment-only lines are skipped without
/// acting as separators.
pub fn token_blocks_from_text(text: &str) -> Result<Vec<Vec<u32>>> {
    let mut blocks = Vec::new();
    let mut current = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        if raw.trim().is_empty() {
            if !current.is_empty() {
                blocks.push(std::mem::take(&mut current));
            }
            continue;
        }
        for field in line.split_whitespace() {
            current.push(field.parse().map_err(|_| Error::Parse {
                line: i + 1,
                message: format!("bad token {field:?}"),
            })?);
        }
    }
    if !current.is_empty() {
        blocks.push(current);
    }
    Ok(blocks)
}

pub fn load_tokens(path: &Path) -> Result<Vec<u32>> {
    tokens_from_text(&std::fs::read_to_string(path)?)
}

pub fn save_tokens(path: &Path, tokens: &[u32]) -> Result<()> {
    write_atomic(path, tokens_to_text(tokens).as_bytes())
}

// ---------------------------------------------------------------------------
// JSON
// ---------------------------------------------------------------------------

pub fn load_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

/// Pretty-prints with a trailing newline and writes atomically.
pub fn save_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}
