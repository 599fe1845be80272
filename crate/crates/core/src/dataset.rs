//! Image discovery, set tags and ground-truth labels.
//!
//! Every downstream stage refers to images by the dense `id` assigned here.
//! Ids follow the canonical order: ascending byte order of the full path, so
//! two runs over the same tree agree on ids, "first image in a group" and
//! every output row order.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::UNIX_EPOCH;

use log::{info, warn};
use walkdir::WalkDir;

use crate::error::{Error, Result};

/// Raster extensions picked up by [`scan_images`], compared case-insensitively.
pub const IMAGE_EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SetTag {
    Train,
    Test,
    Untagged,
}

impl SetTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SetTag::Train => "train",
            SetTag::Test => "test",
            SetTag::Untagged => "untagged",
        }
    }
}

impl fmt::Display for SetTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Wound class carried by the ground-truth file.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ClassLabel {
    None,
    Infection,
    Ischaemia,
    Both,
    Unlabelled,
}

impl ClassLabel {
    /// The four classes a label file can assign.
    pub const KNOWN: [ClassLabel; 4] = [
        ClassLabel::None,
        ClassLabel::Infection,
        ClassLabel::Ischaemia,
        ClassLabel::Both,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ClassLabel::None => "none",
            ClassLabel::Infection => "infection",
            ClassLabel::Ischaemia => "ischaemia",
            ClassLabel::Both => "both",
            ClassLabel::Unlabelled => "unlabelled",
        }
    }

    pub fn is_known(self) -> bool {
        self != ClassLabel::Unlabelled
    }
}

impl fmt::Display for ClassLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(ClassLabel::None),
            "infection" => Ok(ClassLabel::Infection),
            "ischaemia" | "ischemia" => Ok(ClassLabel::Ischaemia),
            "both" => Ok(ClassLabel::Both),
            "unlabelled" | "unlabeled" => Ok(ClassLabel::Unlabelled),
            _ => Err(Error::UnknownClass(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageEntry {
    pub id: usize,
    pub path: PathBuf,
    /// Path below the scan root, `/`-separated.
    pub rel_path: String,
    pub set_tag: SetTag,
    pub class_label: ClassLabel,
    pub byte_size: u64,
    /// Whole seconds since the Unix epoch.
    pub mtime: i64,
}

impl ImageEntry {
    pub fn file_name(&self) -> &str {
        base_name(&self.rel_path)
    }
}

/// Result of walking one root.
#[derive(Debug, Clone, Default)]
pub struct Scan {
    pub entries: Vec<ImageEntry>,
    /// Non-image files, symlinks and unreadable entries.
    pub skipped: Vec<PathBuf>,
}

/// Walk `root` and return every regular raster file in canonical order.
///
/// Symlinks are never followed; they land in the skip report with any other
/// non-image file. An empty result is logged as a warning, not an error.
pub fn scan_images(root: &Path, set_tag: SetTag) -> Result<Scan> {
    if !root.exists() {
        return Err(Error::MissingRoot(root.to_path_buf()));
    }
    let mut scan = Scan::default();
    for item in WalkDir::new(root).follow_links(false) {
        let item = match item {
            Ok(item) => item,
            Err(err) => {
                let path = err.path().map(Path::to_path_buf).unwrap_or_default();
                warn!("skipping unreadable entry {}: {err}", path.display());
                scan.skipped.push(path);
                continue;
            }
        };
        let file_type = item.file_type();
        if file_type.is_dir() {
            continue;
        }
        if file_type.is_symlink() || !file_type.is_file() || !has_image_extension(item.path()) {
            info!("skipped {}", item.path().display());
            scan.skipped.push(item.into_path());
            continue;
        }
        let meta = item.metadata().map_err(|e| {
            Error::read(
                item.path(),
                e.into_io_error()
                    .unwrap_or_else(|| std::io::Error::other("metadata unavailable")),
            )
        })?;
        let mtime = meta
            .modified()
            .ok()
            .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
            .map_or(0, |d| d.as_secs() as i64);
        let rel_path = relative_display(root, item.path());
        scan.entries.push(ImageEntry {
            id: 0,
            path: item.into_path(),
            rel_path,
            set_tag,
            class_label: ClassLabel::Unlabelled,
            byte_size: meta.len(),
            mtime,
        });
    }
    sort_canonical(&mut scan.entries);
    scan.skipped.sort_by(|a, b| path_bytes(a).cmp(path_bytes(b)));
    if scan.entries.is_empty() {
        warn!("no images found under {}", root.display());
    }
    Ok(scan)
}

fn has_image_extension(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
}

fn relative_display(root: &Path, path: &Path) -> String {
    let rel = path.strip_prefix(root).unwrap_or(path);
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

pub(crate) fn path_bytes(path: &Path) -> &[u8] {
    path.as_os_str().as_encoded_bytes()
}

pub(crate) fn base_name(rel: &str) -> &str {
    rel.rsplit(['/', '\\']).next().unwrap_or(rel)
}

fn sort_canonical(entries: &mut [ImageEntry]) {
    entries.sort_by(|a, b| path_bytes(&a.path).cmp(path_bytes(&b.path)));
    for (id, entry) in entries.iter_mut().enumerate() {
        entry.id = id;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DatasetIndex {
    entries: Vec<ImageEntry>,
    pub label_source: Option<PathBuf>,
}

impl DatasetIndex {
    /// Build an index from entries gathered in any order. Ids are reassigned
    /// canonically and repeated paths keep their first occurrence.
    pub fn from_entries(mut entries: Vec<ImageEntry>) -> Self {
        entries.sort_by(|a, b| path_bytes(&a.path).cmp(path_bytes(&b.path)));
        entries.dedup_by(|b, a| a.path == b.path);
        sort_canonical(&mut entries);
        DatasetIndex {
            entries,
            label_source: None,
        }
    }

    pub fn from_scans(scans: impl IntoIterator<Item = Scan>) -> Self {
        Self::from_entries(scans.into_iter().flat_map(|s| s.entries).collect())
    }

    pub fn entries(&self) -> &[ImageEntry] {
        &self.entries
    }

    pub fn get(&self, id: usize) -> Option<&ImageEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, ImageEntry> {
        self.entries.iter()
    }

    pub fn labelled_count(&self) -> usize {
        self.entries.iter().filter(|e| e.class_label.is_known()).count()
    }
}

impl<'a> IntoIterator for &'a DatasetIndex {
    type Item = &'a ImageEntry;
    type IntoIter = std::slice::Iter<'a, ImageEntry>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

/// Ground truth keyed by bare file name.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMap {
    pub source: Option<PathBuf>,
    pub labels: BTreeMap<String, ClassLabel>,
}

impl LabelMap {
    pub fn get(&self, file_name: &str) -> ClassLabel {
        self.labels
            .get(base_name(file_name))
            .copied()
            .unwrap_or(ClassLabel::Unlabelled)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl FromIterator<(String, ClassLabel)> for LabelMap {
    fn from_iter<I: IntoIterator<Item = (String, ClassLabel)>>(iter: I) -> Self {
        LabelMap {
            source: None,
            labels: iter.into_iter().collect(),
        }
    }
}

enum Schema {
    OneHot {
        image: usize,
        columns: [(usize, ClassLabel); 4],
    },
    Single {
        image: usize,
        class: usize,
    },
}

fn detect_schema(header: &[String]) -> Option<Schema> {
    let find = |names: &[&str]| header.iter().position(|h| names.contains(&h.as_str()));
    let image = find(&["image", "filename", "file"])?;
    if header.len() == 2 {
        let class = find(&["class", "label"])?;
        return Some(Schema::Single { image, class });
    }
    if header.len() == 5 {
        let columns = [
            (find(&["none"])?, ClassLabel::None),
            (find(&["infection"])?, ClassLabel::Infection),
            (find(&["ischaemia", "ischemia"])?, ClassLabel::Ischaemia),
            (find(&["both"])?, ClassLabel::Both),
        ];
        return Some(Schema::OneHot { image, columns });
    }
    None
}

/// Read a ground-truth CSV in either the one-hot
/// (`image,none,infection,ischaemia,both`) or the two-column
/// (`image,class`) layout.
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::csv(path, e))?
        .iter()
        .map(|h| h.to_ascii_lowercase())
        .collect();
    let schema = detect_schema(&header).ok_or_else(|| Error::UnknownSchema {
        path: path.to_path_buf(),
        header: header.join(","),
    })?;

    let mut labels = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let field = |i: usize| record.get(i).unwrap_or("");
        let (image, label) = match &schema {
            Schema::Single { image, class } => {
                (field(*image), field(*class).parse::<ClassLabel>()?)
            }
            Schema::OneHot { image, columns } => {
                let set: Vec<ClassLabel> = columns
                    .iter()
                    .filter(|(i, _)| is_one(field(*i)))
                    .map(|(_, c)| *c)
                    .collect();
                let sum: f64 = columns
                    .iter()
                    .map(|(i, _)| field(*i).parse::<f64>().unwrap_or(f64::NAN))
                    .sum();
                if set.len() != 1 || sum != 1.0 {
                    return Err(Error::AmbiguousLabel {
                        path: path.to_path_buf(),
                        image: field(*image).to_string(),
                        ones: set.len(),
                    });
                }
                (field(*image), set[0])
            }
        };
        let name = base_name(image).to_string();
        match labels.insert(name.clone(), label) {
            Some(previous) if previous != label => {
                return Err(Error::DuplicateLabelRow {
                    path: path.to_path_buf(),
                    image: name,
                });
            }
            _ => {}
        }
    }
    Ok(LabelMap {
        source: Some(path.to_path_buf()),
        labels,
    })
}

fn is_one(cell: &str) -> bool {
    cell.parse::<f64>().is_ok_and(|v| v == 1.0)
}

/// Label rows that matched no file in the index.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct JoinReport {
    pub unmatched: Vec<String>,
}

/// Join labels onto the index by base file name. Entries without a label
/// become [`ClassLabel::Unlabelled`].
pub fn attach_labels(index: &DatasetIndex, labels: &LabelMap) -> (DatasetIndex, JoinReport) {
    let mut used = BTreeSet::new();
    let entries = index
        .entries
        .iter()
        .map(|e| {
            let label = labels.get(e.file_name());
            if label.is_known() {
                used.insert(e.file_name().to_string());
            }
            ImageEntry {
                class_label: label,
                ..e.clone()
            }
        })
        .collect();
    let unmatched: Vec<String> = labels
        .labels
        .keys()
        .filter(|k| !used.contains(*k))
        .cloned()
        .collect();
    for name in &unmatched {
        info!("label row {name} matched no image");
    }
    let out = DatasetIndex {
        entries,
        label_source: labels.source.clone().or_else(|| index.label_source.clone()),
    };
    (out, JoinReport { unmatched })
}
