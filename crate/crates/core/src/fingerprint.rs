//! Tile-average fingerprints and their on-disk cache.
//!
//! An image is reduced to a 15x15 grid of tiles spanning the whole picture.
//! Tile column `i` covers pixel columns `i*W/15 .. (i+1)*W/15` (floor
//! division), rows likewise, so tile sizes differ by at most one pixel and
//! every pixel lands in exactly one tile. Each tile stores its mean R, G and
//! B rounded half-up to an integer.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::warn;
use rayon::prelude::*;
use sha2::{Digest as _, Sha256};

use crate::dataset::{DatasetIndex, ImageEntry};
use crate::error::{Error, Result};

pub const GRID: usize = 15;
pub const TILE_COUNT: usize = GRID * GRID;
pub const CHANNEL_COUNT: usize = TILE_COUNT * 3;
pub const MIN_SIDE: u32 = GRID as u32;

/// 225 RGB tile means, row-major, flattened to 675 channel values.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct TileGrid([u8; CHANNEL_COUNT]);

impl TileGrid {
    pub fn from_channels(channels: &[u8]) -> Result<Self> {
        let arr: [u8; CHANNEL_COUNT] = channels
            .try_into()
            .map_err(|_| Error::MalformedFingerprint(channels.len()))?;
        Ok(TileGrid(arr))
    }

    pub fn uniform(rgb: [u8; 3]) -> Self {
        let mut out = [0u8; CHANNEL_COUNT];
        for tile in out.chunks_exact_mut(3) {
            tile.copy_from_slice(&rgb);
        }
        TileGrid(out)
    }

    pub fn channels(&self) -> &[u8; CHANNEL_COUNT] {
        &self.0
    }

    pub fn tile(&self, col: usize, row: usize) -> [u8; 3] {
        let at = (row * GRID + col) * 3;
        [self.0[at], self.0[at + 1], self.0[at + 2]]
    }

    pub fn tiles(&self) -> impl Iterator<Item = [u8; 3]> + '_ {
        self.0.chunks_exact(3).map(|t| [t[0], t[1], t[2]])
    }
}

impl fmt::Debug for TileGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TileGrid({:?}..)", &self.0[..6])
    }
}

/// SHA-256 of the raw file bytes.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContentDigest(pub [u8; 32]);

impl ContentDigest {
    pub fn to_hex(&self) -> String {
        self.0.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        if s.len() != 64 || !s.is_ascii() {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).ok()?;
        }
        Some(ContentDigest(out))
    }
}

impl fmt::Debug for ContentDigest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ContentDigest({})", &self.to_hex()[..12])
    }
}

pub fn content_digest(bytes: &[u8]) -> ContentDigest {
    ContentDigest(Sha256::digest(bytes).into())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageFingerprint {
    pub entry_id: usize,
    pub width: u32,
    pub height: u32,
    pub tiles: TileGrid,
    pub digest: ContentDigest,
}

/// Pixel range `[start, end)` covered by tile `k` along a side of length `n`.
pub fn tile_bounds(n: u32, k: usize) -> (u32, u32) {
    let n = n as u64;
    let k = k as u64;
    ((k * n / GRID as u64) as u32, ((k + 1) * n / GRID as u64) as u32)
}

fn tile_lookup(n: u32) -> Vec<usize> {
    let mut map = vec![0usize; n as usize];
    for k in 0..GRID {
        let (lo, hi) = tile_bounds(n, k);
        map[lo as usize..hi as usize].fill(k);
    }
    map
}

/// Reduce a packed RGB raster (`width * height * 3` bytes) to its tile grid.
pub fn compute_tiles(rgb: &[u8], width: u32, height: u32) -> Result<TileGrid> {
    if width < MIN_SIDE || height < MIN_SIDE {
        return Err(Error::ImageTooSmall {
            path: PathBuf::new(),
            width,
            height,
        });
    }
    assert_eq!(
        rgb.len(),
        width as usize * height as usize * 3,
        "raster length does not match dimensions"
    );
    let cols = tile_lookup(width);
    let rows = tile_lookup(height);
    let mut sums = [0u64; CHANNEL_COUNT];
    for (y, line) in rgb.chunks_exact(width as usize * 3).enumerate() {
        let base = rows[y] * GRID;
        for (x, px) in line.chunks_exact(3).enumerate() {
            let at = (base + cols[x]) * 3;
            sums[at] += px[0] as u64;
            sums[at + 1] += px[1] as u64;
            sums[at + 2] += px[2] as u64;
        }
    }
    let mut out = [0u8; CHANNEL_COUNT];
    for row in 0..GRID {
        let (y0, y1) = tile_bounds(height, row);
        for col in 0..GRID {
            let (x0, x1) = tile_bounds(width, col);
            let count = (x1 - x0) as u64 * (y1 - y0) as u64;
            let at = (row * GRID + col) * 3;
            for c in 0..3 {
                // floor(sum / count + 1/2)
                out[at + c] = ((2 * sums[at + c] + count) / (2 * count)) as u8;
            }
        }
    }
    Ok(TileGrid(out))
}

/// Tile grid of a decoded image; alpha is dropped before averaging.
pub fn compute_fingerprint(image: &image::DynamicImage) -> Result<TileGrid> {
    let rgb = image.to_rgb8();
    compute_tiles(rgb.as_raw(), rgb.width(), rgb.height())
}

/// Decode `bytes` and fingerprint them. `path` is only used in errors.
pub fn fingerprint_bytes(entry_id: usize, path: &Path, bytes: &[u8]) -> Result<ImageFingerprint> {
    let decoded = image::load_from_memory(bytes).map_err(|e| Error::DecodeFailure {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let tiles = compute_fingerprint(&decoded).map_err(|e| match e {
        Error::ImageTooSmall { width, height, .. } => Error::ImageTooSmall {
            path: path.to_path_buf(),
            width,
            height,
        },
        other => other,
    })?;
    Ok(ImageFingerprint {
        entry_id,
        width: decoded.width(),
        height: decoded.height(),
        tiles,
        digest: content_digest(bytes),
    })
}

pub fn fingerprint_file(entry: &ImageEntry) -> Result<ImageFingerprint> {
    let bytes = fs::read(&entry.path).map_err(|e| Error::read(&entry.path, e))?;
    fingerprint_bytes(entry.id, &entry.path, &bytes)
}

pub const CACHE_HEADER: &str = "simcull-cache v1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheRecord {
    pub byte_size: u64,
    pub mtime: i64,
    pub width: u32,
    pub height: u32,
    pub digest: ContentDigest,
    pub tiles: TileGrid,
}

/// Fingerprints keyed by `(path, byte_size, mtime)`.
///
/// One record per path; a record only answers a lookup when the size and
/// mtime still agree with the scanned entry.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FingerprintCache {
    records: BTreeMap<PathBuf, CacheRecord>,
}

impl FingerprintCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lookup(&self, entry: &ImageEntry) -> Option<&CacheRecord> {
        self.records
            .get(&entry.path)
            .filter(|r| r.byte_size == entry.byte_size && r.mtime == entry.mtime)
    }

    pub fn insert(&mut self, path: PathBuf, record: CacheRecord) {
        self.records.insert(path, record);
    }

    /// Load a cache file. A missing file yields an empty cache, and so does
    /// an unrecognised version header (with a warning). Corrupt lines are
    /// dropped individually.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = match fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Self::new()),
            Err(e) => return Err(Error::read(path, e)),
        };
        match bytes.split(|&b| b == b'\n').next() {
            Some(header) if header == CACHE_HEADER.as_bytes() => {}
            None | Some(b"") => return Ok(Self::new()),
            Some(header) => {
                warn!(
                    "{}: unsupported cache header {:?}, recomputing everything",
                    path.display(),
                    String::from_utf8_lossy(header)
                );
                return Ok(Self::new());
            }
        }
        let body = bytes.get(CACHE_HEADER.len() + 1..).unwrap_or_default();
        // outer None: blank line; inner None: corrupt record
        let parsed: Vec<Option<Option<(PathBuf, CacheRecord)>>> = body
            .par_split(|&b| b == b'\n')
            .map(|line| (!line.is_empty()).then(|| parse_record(line)))
            .collect();
        let mut cache = Self::new();
        for (n, record) in parsed.into_iter().enumerate() {
            match record {
                Some(Some((key, record))) => cache.insert(key, record),
                Some(None) => warn!("{}:{}: dropping corrupt cache line", path.display(), n + 2),
                None => {}
            }
        }
        Ok(cache)
    }

    /// Write the cache atomically (temp file then rename), records sorted by path.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut out = BufWriter::new(fs::File::create(&tmp)?);
            writeln!(out, "{CACHE_HEADER}")?;
            for (key, r) in &self.records {
                let Some(key) = key.to_str().filter(|k| !k.contains(['\t', '\n', '\r'])) else {
                    continue;
                };
                write!(
                    out,
                    "{key}\t{}\t{}\t{}\t{}\t{}\t",
                    r.byte_size,
                    r.mtime,
                    r.width,
                    r.height,
                    r.digest.to_hex()
                )?;
                let mut first = true;
                for v in r.tiles.channels() {
                    if !first {
                        out.write_all(b" ")?;
                    }
                    first = false;
                    write!(out, "{v}")?;
                }
                out.write_all(b"\n")?;
            }
            out.flush()
        };
        write().map_err(|e| Error::write(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::write(path, e))
    }
}

fn parse_int<T: std::str::FromStr>(field: &[u8]) -> Option<T> {
    std::str::from_utf8(field).ok()?.parse().ok()
}

/// Space-separated decimal channel values, exactly [`CHANNEL_COUNT`] of them.
fn parse_channels(field: &[u8]) -> Option<[u8; CHANNEL_COUNT]> {
    let mut out = [0u8; CHANNEL_COUNT];
    let mut count = 0;
    let (mut value, mut digits) = (0u16, 0);
    for &b in field.iter().chain(b" ") {
        match b {
            b'0'..=b'9' if digits < 3 => {
                value = value * 10 + (b - b'0') as u16;
                digits += 1;
            }
            b' ' if digits > 0 => {
                *out.get_mut(count)? = u8::try_from(value).ok()?;
                count += 1;
                (value, digits) = (0, 0);
            }
            _ => return None,
        }
    }
    (count == CHANNEL_COUNT).then_some(out)
}

fn parse_record(line: &[u8]) -> Option<(PathBuf, CacheRecord)> {
    let mut rest = line;
    let mut field = || {
        let at = rest.iter().position(|&b| b == b'\t')?;
        let (head, tail) = rest.split_at(at);
        rest = &tail[1..];
        Some(head)
    };
    let key = PathBuf::from(std::str::from_utf8(field()?).ok()?);
    let byte_size = parse_int(field()?)?;
    let mtime = parse_int(field()?)?;
    let width = parse_int(field()?)?;
    let height = parse_int(field()?)?;
    let digest = ContentDigest::from_hex(std::str::from_utf8(field()?).ok()?)?;
    let channels = parse_channels(rest)?;
    let tiles = TileGrid(channels);
    Some((
        key,
        CacheRecord {
            byte_size,
            mtime,
            width,
            height,
            digest,
            tiles,
        },
    ))
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FingerprintStats {
    pub hits: usize,
    pub misses: usize,
    pub decode_failures: Vec<(PathBuf, String)>,
}

enum Outcome {
    Hit(ImageFingerprint),
    Miss(ImageFingerprint),
    Failed(PathBuf, String),
}

/// Fingerprint every entry, serving unchanged files from `cache` and adding
/// fresh results to it. Output is in canonical (id) order.
pub fn fingerprint_all(
    index: &DatasetIndex,
    cache: &mut FingerprintCache,
) -> Result<(Vec<ImageFingerprint>, FingerprintStats)> {
    let outcomes: Vec<Outcome> = {
        let cache = &*cache;
        index
            .entries()
            .par_iter()
            .map(|entry| {
                if let Some(r) = cache.lookup(entry) {
                    return Outcome::Hit(ImageFingerprint {
                        entry_id: entry.id,
                        width: r.width,
                        height: r.height,
                        tiles: r.tiles.clone(),
                        digest: r.digest,
                    });
                }
                match fingerprint_file(entry) {
                    Ok(fp) => Outcome::Miss(fp),
                    Err(e) => Outcome::Failed(entry.path.clone(), e.to_string()),
                }
            })
            .collect()
    };

    let mut stats = FingerprintStats::default();
    let mut fps = Vec::with_capacity(outcomes.len());
    for outcome in outcomes {
        match outcome {
            Outcome::Hit(fp) => {
                stats.hits += 1;
                fps.push(fp);
            }
            Outcome::Miss(fp) => {
                stats.misses += 1;
                let entry = &index.entries()[fp.entry_id];
                cache.insert(
                    entry.path.clone(),
                    CacheRecord {
                        byte_size: entry.byte_size,
                        mtime: entry.mtime,
                        width: fp.width,
                        height: fp.height,
                        digest: fp.digest,
                        tiles: fp.tiles.clone(),
                    },
                );
                fps.push(fp);
            }
            Outcome::Failed(path, message) => {
                warn!("{}: {message}", path.display());
                stats.decode_failures.push((path, message));
            }
        }
    }
    if fps.is_empty() {
        return Err(Error::NoFingerprints);
    }
    Ok((fps, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{scan_images, SetTag};
    use image::{ImageBuffer, Rgb, RgbImage, Rgba, RgbaImage};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct per-pixel average over each tile rectangle, computed in f64.
    fn oracle_tiles(img: &RgbImage) -> Vec<[u8; 3]> {
        let (w, h) = img.dimensions();
        let mut out = Vec::with_capacity(TILE_COUNT);
        for j in 0..GRID as u64 {
            for i in 0..GRID as u64 {
                let (x0, x1) = ((i * w as u64 / 15) as u32, ((i + 1) * w as u64 / 15) as u32);
                let (y0, y1) = ((j * h as u64 / 15) as u32, ((j + 1) * h as u64 / 15) as u32);
                let mut acc = [0f64; 3];
                let mut n = 0f64;
                for y in y0..y1 {
                    for x in x0..x1 {
                        let p = img.get_pixel(x, y);
                        for c in 0..3 {
                            acc[c] += p[c] as f64;
                        }
                        n += 1.0;
                    }
                }
                out.push(acc.map(|s| (s / n + 0.5).floor() as u8));
            }
        }
        out
    }

    fn random_image(rng: &mut ChaCha8Rng, w: u32, h: u32) -> RgbImage {
        ImageBuffer::from_fn(w, h, |_, _| Rgb([rng.gen(), rng.gen(), rng.gen()]))
    }

    #[test]
    fn uniform_gray_gives_uniform_tiles() {
        let img = RgbImage::from_pixel(224, 224, Rgb([128, 128, 128]));
        let tiles = compute_tiles(img.as_raw(), 224, 224).unwrap();
        assert_eq!(tiles, TileGrid::uniform([128, 128, 128]));
    }

    #[test]
    fn minimal_black_image() {
        let img = RgbImage::new(15, 15);
        let tiles = compute_tiles(img.as_raw(), 15, 15).unwrap();
        assert_eq!(tiles, TileGrid::uniform([0, 0, 0]));
        for k in 0..GRID {
            let (lo, hi) = tile_bounds(15, k);
            assert_eq!(hi - lo, 1);
        }
    }

    #[test]
    fn half_black_half_white() {
        let img = RgbImage::from_fn(224, 224, |x, _| {
            if x < 112 {
                Rgb([0, 0, 0])
            } else {
                Rgb([255, 255, 255])
            }
        });
        let tiles = compute_tiles(img.as_raw(), 224, 224).unwrap();
        let oracle = oracle_tiles(&img);
        assert_eq!(tiles.tiles().collect::<Vec<_>>(), oracle);
        // column 7 spans x in [104, 119): 8 black + 7 white pixels per row
        assert_eq!(tile_bounds(224, 7), (104, 119));
        let straddle = (255.0 * 7.0 / 15.0 + 0.5f64).floor() as u8;
        assert_eq!(straddle, 119);
        for row in 0..GRID {
            for col in 0..7 {
                assert_eq!(tiles.tile(col, row), [0, 0, 0]);
            }
            assert_eq!(tiles.tile(7, row), [straddle; 3]);
            for col in 8..GRID {
                assert_eq!(tiles.tile(col, row), [255, 255, 255]);
            }
        }
    }

    #[test]
    fn rounding_matches_oracle_on_random_images() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (w, h) = (rng.gen_range(15..80), rng.gen_range(15..80));
            let img = random_image(&mut rng, w, h);
            let tiles = compute_tiles(img.as_raw(), w, h).unwrap();
            assert_eq!(tiles.tiles().collect::<Vec<_>>(), oracle_tiles(&img), "{w}x{h}");
        }
    }

    #[test]
    fn half_way_means_round_up() {
        // 30x15 image: every tile is 2x1 pixels, (0, 1) averages to 0.5
        let img = RgbImage::from_fn(30, 15, |x, _| Rgb([(x % 2) as u8, 2 * (x % 2) as u8, 3]));
        let tiles = compute_tiles(img.as_raw(), 30, 15).unwrap();
        assert_eq!(tiles.tile(0, 0), [1, 1, 3]);
    }

    #[test]
    fn too_small_is_rejected() {
        let img = RgbImage::new(14, 200);
        assert!(matches!(
            compute_tiles(img.as_raw(), 14, 200),
            Err(Error::ImageTooSmall { width: 14, .. })
        ));
    }

    #[test]
    fn alpha_is_dropped() {
        let rgba = RgbaImage::from_pixel(20, 20, Rgba([10, 20, 30, 0]));
        let tiles = compute_fingerprint(&image::DynamicImage::ImageRgba8(rgba)).unwrap();
        assert_eq!(tiles, TileGrid::uniform([10, 20, 30]));
    }

    proptest! {
        #[test]
        fn partition_covers_every_pixel(w in 15u32..4000, h in 15u32..4000) {
            let mut total = 0u64;
            for j in 0..GRID {
                let (y0, y1) = tile_bounds(h, j);
                prop_assert!(y1 > y0);
                for i in 0..GRID {
                    let (x0, x1) = tile_bounds(w, i);
                    prop_assert!(x1 > x0);
                    total += (x1 - x0) as u64 * (y1 - y0) as u64;
                }
            }
            prop_assert_eq!(total, w as u64 * h as u64);
            prop_assert_eq!(tile_bounds(w, 0).0, 0);
            prop_assert_eq!(tile_bounds(w, GRID - 1).1, w);
        }
    }

    #[test]
    fn digest_is_over_bytes() {
        let empty = content_digest(b"");
        assert_eq!(
            empty.to_hex(),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(content_digest(b"abc"), content_digest(b"abc"));
        assert_ne!(content_digest(b"abc"), content_digest(b"abd"));
        assert_eq!(ContentDigest::from_hex(&empty.to_hex()), Some(empty));
        assert_eq!(ContentDigest::from_hex("zz"), None);
    }

    #[test]
    fn reencoding_changes_digest_not_tiles() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, 40, 30);
        img.save(dir.path().join("a.png")).unwrap();
        img.save(dir.path().join("a.bmp")).unwrap();
        let a = fs::read(dir.path().join("a.png")).unwrap();
        let b = fs::read(dir.path().join("a.bmp")).unwrap();
        let fa = fingerprint_bytes(0, Path::new("a.png"), &a).unwrap();
        let fb = fingerprint_bytes(1, Path::new("a.bmp"), &b).unwrap();
        assert_eq!(fa.tiles, fb.tiles);
        assert_ne!(fa.digest, fb.digest);
    }

    #[test]
    fn corrupt_file_is_a_decode_failure() {
        let err = fingerprint_bytes(0, Path::new("x.png"), b"not a png").unwrap_err();
        assert!(matches!(err, Error::DecodeFailure { .. }));
    }

    fn write_corpus(dir: &Path, n: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for i in 0..n {
            random_image(&mut rng, 32, 32)
                .save(dir.join(format!("img{i}.png")))
                .unwrap();
        }
    }

    #[test]
    fn cache_round_trip_and_hit_accounting() {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        fs::create_dir(&data).unwrap();
        write_corpus(&data, 10);
        let cache_path = dir.path().join("c.v1");

        let index = DatasetIndex::from_scans([scan_images(&data, SetTag::Train).unwrap()]);
        let mut cache = FingerprintCache::load(&cache_path).unwrap();
        let (cold, stats) = fingerprint_all(&index, &mut cache).unwrap();
        assert_eq!((stats.hits, stats.misses), (0, 10));
        assert_eq!(cache.len(), 10);
        cache.save(&cache_path).unwrap();

        let mut reloaded = FingerprintCache::load(&cache_path).unwrap();
        assert_eq!(reloaded, cache);
        let (warm, stats) = fingerprint_all(&index, &mut reloaded).unwrap();
        assert_eq!((stats.hits, stats.misses), (10, 0));
        assert_eq!(cold, warm);

        // touch one file: same bytes, new mtime
        let victim = &index.entries()[3];
        let f = fs::File::options().write(true).open(&victim.path).unwrap();
        f.set_modified(std::time::SystemTime::UNIX_EPOCH + std::time::Duration::from_secs(1_000))
            .unwrap();
        drop(f);
        let index = DatasetIndex::from_scans([scan_images(&data, SetTag::Train).unwrap()]);
        let (again, stats) = fingerprint_all(&index, &mut reloaded).unwrap();
        assert_eq!((stats.hits, stats.misses), (9, 1));
        assert_eq!(again[3].tiles, cold[3].tiles);
        assert_eq!(again, cold);
    }

    #[test]
    fn unknown_cache_version_fails_closed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        fs::write(&path, "simcull-cache v9\nwhatever\n").unwrap();
        assert!(FingerprintCache::load(&path).unwrap().is_empty());
        fs::write(&path, CACHE_HEADER).unwrap();
        assert!(FingerprintCache::load(&path).unwrap().is_empty());
    }

    #[test]
    fn corrupt_cache_lines_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c");
        let good_tiles = vec!["7"; CHANNEL_COUNT].join(" ");
        let digest = content_digest(b"x").to_hex();
        let overflow = format!("256 {}", vec!["7"; CHANNEL_COUNT - 1].join(" "));
        let body = format!(
            "{CACHE_HEADER}\n/a.png\t10\t5\t20\t20\t{digest}\t{good_tiles}\n/b.png\t10\tbad\n/c.png\t1\t1\t1\t1\t{digest}\t1 2 3\n\
             /d.png\t1\t1\t1\t1\t{digest}\t{good_tiles} 7\n/e.png\t1\t1\t1\t1\t{digest}\t{overflow}\n\
             /f.png\t1\t1\t1\t1\t{digest}\t{good_tiles}  \n"
        );
        fs::write(&path, body).unwrap();
        let cache = FingerprintCache::load(&path).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(
            cache.records[Path::new("/a.png")].tiles,
            TileGrid::uniform([7, 7, 7])
        );
    }

    #[test]
    fn decode_failures_are_collected() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 2);
        fs::write(dir.path().join("broken.png"), b"nope").unwrap();
        let index = DatasetIndex::from_scans([scan_images(dir.path(), SetTag::Train).unwrap()]);
        let (fps, stats) = fingerprint_all(&index, &mut FingerprintCache::new()).unwrap();
        assert_eq!(fps.len(), 2);
        assert_eq!(stats.decode_failures.len(), 1);
    }

    #[test]
    fn all_failures_is_fatal() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("broken.png"), b"nope").unwrap();
        let index = DatasetIndex::from_scans([scan_images(dir.path(), SetTag::Train).unwrap()]);
        assert!(matches!(
            fingerprint_all(&index, &mut FingerprintCache::new()),
            Err(Error::NoFingerprints)
        ));
    }

    #[test]
    fn fingerprinting_is_independent_of_thread_count() {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(dir.path(), 12);
        let index = DatasetIndex::from_scans([scan_images(dir.path(), SetTag::Train).unwrap()]);
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| fingerprint_all(&index, &mut FingerprintCache::new()).unwrap().0)
        };
        assert_eq!(run(1), run(4));
    }
}
