//! Synthetic corpora with planted near-duplicates of known difference.
//!
//! Base images are blocky noise: every fingerprint tile has, per channel, a
//! value near 0 or near 255 (a random bit) plus a little per-pixel jitter.
//! Offset duplicates move every pixel channel by an integer `δ_c` towards
//! mid-range (subtract when the pixel is >= 128, add otherwise). Nothing
//! clips, every tile mean moves by exactly `δ_c`, and half-up rounding
//! commutes with an integer shift, so the measured difference score of a
//! base/offset pair is exactly `δ_r + δ_g + δ_b`.
//!
//! Generation re-draws base images until every pair from different families
//! has a difference score above [`SEPARATION`].

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, ImageFormat, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::dataset::{ClassLabel, SetTag};
use crate::error::{Error, Result};
use crate::fingerprint::{compute_tiles, tile_bounds, TileGrid, GRID, TILE_COUNT};

/// Minimum difference score between images of different families.
pub const SEPARATION: u32 = 300;
/// Largest per-channel offset; keeps jittered extremes inside `0..=255`.
pub const MAX_CHANNEL_OFFSET: u32 = 127;
const JITTER: u8 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PlantKind {
    /// Per-channel offsets summing to `target_d`.
    Offset,
    /// Byte-for-byte copy of the base file.
    ExactCopy,
    /// Same pixels, different encoding (BMP instead of PNG).
    Reencoded,
    /// Centre crop rescaled to full size; difference is not analytic.
    ZoomCrop,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DupSpec {
    pub base_index: usize,
    pub target_d: f64,
    pub set_tag: SetTag,
    pub class_label: ClassLabel,
    pub kind: PlantKind,
}

impl DupSpec {
    pub fn offset(base_index: usize, target_d: f64, set_tag: SetTag, class_label: ClassLabel) -> Self {
        DupSpec {
            base_index,
            target_d,
            set_tag,
            class_label,
            kind: PlantKind::Offset,
        }
    }

    pub fn of_kind(base_index: usize, kind: PlantKind, set_tag: SetTag, class_label: ClassLabel) -> Self {
        DupSpec {
            base_index,
            target_d: 0.0,
            set_tag,
            class_label,
            kind,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantSpec {
    pub base_count: usize,
    /// The last `test_base_count` bases go to the test set, the rest to train.
    pub test_base_count: usize,
    /// Cycled over the bases; empty leaves bases unlabelled.
    pub base_classes: Vec<ClassLabel>,
    pub dup_specs: Vec<DupSpec>,
    pub image_size: (u32, u32),
    pub seed: u64,
    /// Place files under `<set>/<class>/` instead of `<set>/`.
    pub class_dirs: bool,
}

impl PlantSpec {
    pub fn new(base_count: usize, seed: u64) -> Self {
        PlantSpec {
            base_count,
            test_base_count: 0,
            base_classes: Vec::new(),
            dup_specs: Vec::new(),
            image_size: (64, 64),
            seed,
            class_dirs: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorpusFile {
    /// Relative to the corpus root, `/`-separated.
    pub rel_path: String,
    pub set_tag: SetTag,
    pub class_label: ClassLabel,
    pub family: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedPair {
    pub first: String,
    pub second: String,
    pub analytic_d: u32,
    /// Inclusive threshold range in which the pair must match; empty when
    /// `match_max_t < match_min_t`.
    pub match_min_t: u8,
    pub match_max_t: u8,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Corpus {
    pub root: PathBuf,
    pub files: Vec<CorpusFile>,
    pub truth: Vec<PlantedPair>,
    /// Non-analytic (zoom/crop) pairs, for smoke tests only.
    pub smoke: Vec<(String, String)>,
}

impl Corpus {
    pub fn train_root(&self) -> PathBuf {
        self.root.join("train")
    }

    pub fn test_root(&self) -> PathBuf {
        self.root.join("test")
    }

    pub fn labels_path(&self) -> PathBuf {
        self.root.join("labels.csv")
    }

    pub fn truth_path(&self) -> PathBuf {
        self.root.join("truth.csv")
    }
}

/// Per-channel offsets summing to `target`.
pub fn split_offset(target: f64) -> Result<[u32; 3]> {
    let max = 3 * MAX_CHANNEL_OFFSET;
    if !target.is_finite() || target.fract() != 0.0 || target < 0.0 || target > max as f64 {
        return Err(Error::UnachievableTarget(target));
    }
    let d = target as u32;
    let (q, r) = (d / 3, d % 3);
    Ok([q + u32::from(r > 0), q + u32::from(r > 1), q])
}

fn base_raster(spec: &PlantSpec, index: usize, attempt: u32) -> RgbImage {
    let (w, h) = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(((index as u64) << 16) | attempt as u64);
    let bits: Vec<[bool; 3]> = (0..TILE_COUNT).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
    let col_of: Vec<usize> = (0..w).map(|x| tile_of(w, x)).collect();
    let row_of: Vec<usize> = (0..h).map(|y| tile_of(h, y)).collect();
    RgbImage::from_fn(w, h, |x, y| {
        let tile = bits[row_of[y as usize] * GRID + col_of[x as usize]];
        image::Rgb(tile.map(|high| {
            let j = rng.gen_range(0..=JITTER);
            if high {
                255 - j
            } else {
                j
            }
        }))
    })
}

fn tile_of(n: u32, p: u32) -> usize {
    (0..GRID)
        .find(|&k| {
            let (lo, hi) = tile_bounds(n, k);
            (lo..hi).contains(&p)
        })
        .expect("partition covers the side")
}

fn apply_offset(base: &RgbImage, delta: [u32; 3]) -> RgbImage {
    let mut out = base.clone();
    for px in out.pixels_mut() {
        for c in 0..3 {
            let d = delta[c] as u8;
            px[c] = if px[c] >= 128 { px[c] - d } else { px[c] + d };
        }
    }
    out
}

fn zoom_crop(base: &RgbImage) -> RgbImage {
    let (w, h) = base.dimensions();
    let (cw, ch) = ((w * 9 / 10).max(1), (h * 9 / 10).max(1));
    let crop = imageops::crop_imm(base, (w - cw) / 2, (h - ch) / 2, cw, ch).to_image();
    imageops::resize(&crop, w, h, imageops::FilterType::Triangle)
}

/// One planted or base image before it is written.
struct Member {
    rel_path: String,
    set_tag: SetTag,
    class_label: ClassLabel,
    kind: Option<PlantKind>,
    delta: [u32; 3],
    raster: RgbImage,
    tiles: TileGrid,
}

fn diff_exceeds(a: &TileGrid, b: &TileGrid, limit: u32) -> bool {
    let mut sum = 0u32;
    for (x, y) in a.channels().chunks_exact(45).zip(b.channels().chunks_exact(45)) {
        sum += x.iter().zip(y).map(|(p, q)| p.abs_diff(*q) as u32).sum::<u32>();
        if sum > limit {
            return true;
        }
    }
    false
}

fn place(spec: &PlantSpec, set_tag: SetTag, class: ClassLabel, name: &str) -> String {
    if spec.class_dirs {
        format!("{set_tag}/{class}/{name}")
    } else {
        format!("{set_tag}/{name}")
    }
}

fn build_family(spec: &PlantSpec, base: usize, attempt: u32, dups: &[(usize, &DupSpec)]) -> Result<Vec<Member>> {
    let raster = base_raster(spec, base, attempt);
    let (w, h) = spec.image_size;
    let class = if spec.base_classes.is_empty() {
        ClassLabel::Unlabelled
    } else {
        spec.base_classes[base % spec.base_classes.len()]
    };
    let set_tag = if base + spec.test_base_count >= spec.base_count {
        SetTag::Test
    } else {
        SetTag::Train
    };
    let tiles = compute_tiles(raster.as_raw(), w, h)?;
    let mut out = vec![Member {
        rel_path: place(spec, set_tag, class, &format!("img_{base:05}.png")),
        set_tag,
        class_label: class,
        kind: None,
        delta: [0; 3],
        raster,
        tiles,
    }];
    for &(k, dup) in dups {
        let (delta, raster, ext) = match dup.kind {
            PlantKind::Offset => {
                let delta = split_offset(dup.target_d)?;
                (delta, apply_offset(&out[0].raster, delta), "png")
            }
            PlantKind::ExactCopy => ([0; 3], out[0].raster.clone(), "png"),
            PlantKind::Reencoded => ([0; 3], out[0].raster.clone(), "bmp"),
            PlantKind::ZoomCrop => ([0; 3], zoom_crop(&out[0].raster), "png"),
        };
        let tiles = compute_tiles(raster.as_raw(), w, h)?;
        out.push(Member {
            rel_path: place(spec, dup.set_tag, dup.class_label, &format!("dup_{k:04}_of_{base:05}.{ext}")),
            set_tag: dup.set_tag,
            class_label: dup.class_label,
            kind: Some(dup.kind),
            delta,
            raster,
            tiles,
        });
    }
    Ok(out)
}

/// Byte-identity class within a family: base PNG and exact copies share one,
/// BMP re-encodes share another, everything else is unique.
fn byte_class(kind: Option<PlantKind>, pos: usize) -> usize {
    match kind {
        None | Some(PlantKind::ExactCopy) => 0,
        Some(PlantKind::Reencoded) => 1,
        _ => 2 + pos,
    }
}

fn family_truth(family: &[Member]) -> Vec<PlantedPair> {
    let analytic: Vec<(usize, &Member)> = family
        .iter()
        .enumerate()
        .filter(|(_, m)| m.kind != Some(PlantKind::ZoomCrop))
        .collect();
    let mut out = Vec::new();
    for (i, &(pa, a)) in analytic.iter().enumerate() {
        for &(pb, b) in &analytic[i + 1..] {
            let d: u32 = (0..3).map(|c| a.delta[c].abs_diff(b.delta[c])).sum();
            let identical = byte_class(a.kind, pa) == byte_class(b.kind, pb);
            let max_t = if d == 0 {
                if identical {
                    100
                } else {
                    99
                }
            } else {
                100u32.saturating_sub(d)
            };
            let (first, second) = if a.rel_path.as_bytes() < b.rel_path.as_bytes() {
                (a, b)
            } else {
                (b, a)
            };
            out.push(PlantedPair {
                first: first.rel_path.clone(),
                second: second.rel_path.clone(),
                analytic_d: d,
                match_min_t: 1,
                match_max_t: max_t as u8,
            });
        }
    }
    out
}

/// Cross-family pairs that fall at or below [`SEPARATION`]. Returns the
/// families to redraw (the later family of each offending pair).
fn separation_violations(families: &[Vec<Member>], changed: &[usize]) -> Vec<usize> {
    let limit = SEPARATION * TILE_COUNT as u32;
    let checked = |f: usize| -> Vec<&TileGrid> {
        families[f]
            .iter()
            .filter(|m| m.kind != Some(PlantKind::ZoomCrop))
            .map(|m| &m.tiles)
            .collect()
    };
    let mut bad: Vec<usize> = changed
        .par_iter()
        .flat_map_iter(|&f| {
            let mine = checked(f);
            (0..families.len())
                .filter(move |&g| g != f)
                .filter(move |&g| {
                    let theirs = checked(g);
                    mine.iter().any(|a| theirs.iter().any(|b| !diff_exceeds(a, b, limit)))
                })
                .map(move |g| f.max(g))
                .collect::<Vec<_>>()
        })
        .collect();
    bad.sort_unstable();
    bad.dedup();
    bad
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let run = || -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(&r)?;
        }
        w.flush()?;
        Ok(())
    };
    run().map_err(|e| Error::csv(path, e))
}

/// Generate the corpus described by `spec` under `out_dir`.
///
/// Writes `train/`, `test/`, `labels.csv` (`image,class`, labelled files
/// only), `truth.csv` and, when zoom/crop plants exist, `smoke.csv`.
pub fn generate(spec: &PlantSpec, out_dir: &Path) -> Result<Corpus> {
    let (w, h) = spec.image_size;
    if w < 15 || h < 15 {
        return Err(Error::ImageTooSmall {
            path: out_dir.to_path_buf(),
            width: w,
            height: h,
        });
    }
    if spec.test_base_count > spec.base_count {
        return Err(Error::InvalidPlant("test_base_count exceeds base_count".into()));
    }
    let mut by_base: BTreeMap<usize, Vec<(usize, &DupSpec)>> = BTreeMap::new();
    for (k, d) in spec.dup_specs.iter().enumerate() {
        if d.base_index >= spec.base_count {
            return Err(Error::InvalidPlant(format!("dup {k} refers to base {}", d.base_index)));
        }
        if d.kind == PlantKind::Offset {
            split_offset(d.target_d)?;
        }
        by_base.entry(d.base_index).or_default().push((k, d));
    }
    let dups_of = |b: usize| by_base.get(&b).map_or(&[][..], Vec::as_slice);

    let mut attempts = vec![0u32; spec.base_count];
    let mut families: Vec<Vec<Member>> = (0..spec.base_count)
        .into_par_iter()
        .map(|b| build_family(spec, b, 0, dups_of(b)))
        .collect::<Result<_>>()?;
    let mut changed: Vec<usize> = (0..spec.base_count).collect();
    loop {
        let bad = separation_violations(&families, &changed);
        if bad.is_empty() {
            break;
        }
        for &f in &bad {
            attempts[f] += 1;
            if attempts[f] > 1000 {
                return Err(Error::InvalidPlant(format!(
                    "cannot separate base {f} from the rest; image too small or corpus too large"
                )));
            }
            families[f] = build_family(spec, f, attempts[f], dups_of(f))?;
        }
        changed = bad;
    }

    let members: Vec<(usize, &Member)> = families
        .iter()
        .enumerate()
        .flat_map(|(f, fam)| fam.iter().map(move |m| (f, m)))
        .collect();
    members.par_iter().try_for_each(|(_, m)| {
        let path = out_dir.join(&m.rel_path);
        let parent = path.parent().expect("file has a parent");
        fs::create_dir_all(parent).map_err(|e| Error::write(parent, e))?;
        let format = if m.rel_path.ends_with(".bmp") {
            ImageFormat::Bmp
        } else {
            ImageFormat::Png
        };
        m.raster
            .save_with_format(&path, format)
            .map_err(|e| Error::write(&path, std::io::Error::other(e)))
    })?;

    let mut files: Vec<CorpusFile> = members
        .iter()
        .map(|(f, m)| CorpusFile {
            rel_path: m.rel_path.clone(),
            set_tag: m.set_tag,
            class_label: m.class_label,
            family: *f,
        })
        .collect();
    files.sort_by(|a, b| a.rel_path.as_bytes().cmp(b.rel_path.as_bytes()));
    let mut truth: Vec<PlantedPair> = families.iter().flat_map(|f| family_truth(f)).collect();
    truth.sort_by(|a, b| (&a.first, &a.second).cmp(&(&b.first, &b.second)));
    let smoke: Vec<(String, String)> = families
        .iter()
        .flat_map(|f| {
            f.iter()
                .filter(|m| m.kind == Some(PlantKind::ZoomCrop))
                .map(|m| (f[0].rel_path.clone(), m.rel_path.clone()))
                .collect::<Vec<_>>()
        })
        .collect();

    let corpus = Corpus {
        root: out_dir.to_path_buf(),
        files,
        truth,
        smoke,
    };
    write_csv(
        &corpus.labels_path(),
        &["image", "class"],
        corpus
            .files
            .iter()
            .filter(|f| f.class_label.is_known())
            .map(|f| vec![crate::dataset::base_name(&f.rel_path).to_string(), f.class_label.to_string()]),
    )?;
    write_csv(
        &corpus.truth_path(),
        &["first", "second", "analytic_D", "match_min_T", "match_max_T"],
        corpus.truth.iter().map(|p| {
            vec![
                p.first.clone(),
                p.second.clone(),
                p.analytic_d.to_string(),
                p.match_min_t.to_string(),
                p.match_max_t.to_string(),
            ]
        }),
    )?;
    if !corpus.smoke.is_empty() {
        write_csv(
            &out_dir.join("smoke.csv"),
            &["first", "second"],
            corpus.smoke.iter().map(|(a, b)| vec![a.clone(), b.clone()]),
        )?;
    }
    Ok(corpus)
}
