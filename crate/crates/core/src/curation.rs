//! Keep-first curation: plan, apply, label merge and verification.
//!
//! The representative of every group is kept and all other members are
//! removed. Images outside any group are kept implicitly and never appear in
//! the manifest. Sources are never modified; curated sets are built by
//! copying (or hard-linking) into a fresh destination.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use walkdir::WalkDir;

use crate::dataset::{scan_images, ClassLabel, DatasetIndex, LabelMap, SetTag};
use crate::error::{Error, Result};
use crate::grouping::{GroupRow, SimilarityGroup};
use crate::matcher::Threshold;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Action {
    Keep,
    Remove,
}

impl Action {
    pub fn as_str(self) -> &'static str {
        match self {
            Action::Keep => "keep",
            Action::Remove => "remove",
        }
    }
}

impl FromStr for Action {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "keep" => Ok(Action::Keep),
            "remove" => Ok(Action::Remove),
            other => Err(format!("unknown action {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub group_id: usize,
    /// Path relative to the source root, `/`-separated.
    pub filename: String,
    pub class_label: ClassLabel,
    pub action: Action,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationTotals {
    pub total_images: usize,
    pub removed: usize,
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurationManifest {
    pub threshold: Threshold,
    pub decisions: Vec<Decision>,
    pub totals: CurationTotals,
}

impl CurationManifest {
    /// Rebuild totals from the decisions and the source image count.
    pub fn from_decisions(threshold: Threshold, decisions: Vec<Decision>, total_images: usize) -> Self {
        let removed = decisions.iter().filter(|d| d.action == Action::Remove).count();
        CurationManifest {
            threshold,
            decisions,
            totals: CurationTotals {
                total_images,
                removed,
                remaining: total_images.saturating_sub(removed),
            },
        }
    }

    pub fn kept(&self) -> impl Iterator<Item = &Decision> {
        self.decisions.iter().filter(|d| d.action == Action::Keep)
    }

    pub fn removed(&self) -> impl Iterator<Item = &Decision> {
        self.decisions.iter().filter(|d| d.action == Action::Remove)
    }
}

pub fn plan_curation(
    groups: &[SimilarityGroup],
    index: &DatasetIndex,
    threshold: Threshold,
) -> Result<CurationManifest> {
    let mut decisions = Vec::new();
    for group in groups {
        for (pos, &id) in group.members.iter().enumerate() {
            let entry = index.get(id).ok_or(Error::IndexMismatch(id))?;
            decisions.push(Decision {
                group_id: group.group_id,
                filename: entry.rel_path.clone(),
                class_label: entry.class_label,
                action: if pos == 0 { Action::Keep } else { Action::Remove },
            });
        }
    }
    let manifest = CurationManifest::from_decisions(threshold, decisions, index.len());
    let t = manifest.totals;
    let expected: usize = groups.iter().map(|g| g.len() - 1).sum();
    assert_eq!(t.removed, expected, "removed must equal Σ(|g|-1)");
    assert_eq!(t.removed + t.remaining, t.total_images);
    Ok(manifest)
}

pub const MANIFEST_CSV_HEADER: &str = "threshold,group_id,filename,class,action";

pub fn save_manifest_csv(path: &Path, manifest: &CurationManifest) -> Result<()> {
    let write = || -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(MANIFEST_CSV_HEADER.split(','))?;
        let t = manifest.threshold.to_string();
        for d in &manifest.decisions {
            w.write_record([
                t.as_str(),
                &d.group_id.to_string(),
                &d.filename,
                d.class_label.as_str(),
                d.action.as_str(),
            ])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| Error::csv(path, e))
}

/// Read the decisions of a manifest CSV. Totals need the source image count
/// and are rebuilt by the caller via [`CurationManifest::from_decisions`].
pub fn load_manifest_csv(path: &Path) -> Result<(Threshold, Vec<Decision>)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header = reader.headers().map_err(|e| Error::csv(path, e))?;
    if header.iter().collect::<Vec<_>>().join(",") != MANIFEST_CSV_HEADER {
        return Err(Error::format(path, format!("expected header {MANIFEST_CSV_HEADER}")));
    }
    let mut threshold = None;
    let mut decisions = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let bad = |what: &str| Error::format(path, format!("bad {what} in row {:?}", record.as_slice()));
        let t: Threshold = record[0].parse().map_err(|_| bad("threshold"))?;
        if *threshold.get_or_insert(t) != t {
            return Err(Error::format(path, "manifest mixes thresholds"));
        }
        decisions.push(Decision {
            group_id: record[1].parse().map_err(|_| bad("group_id"))?,
            filename: record[2].to_string(),
            class_label: record[3].parse().map_err(|_| bad("class"))?,
            action: record[4].parse().map_err(|_| bad("action"))?,
        });
    }
    let threshold =
        threshold.ok_or_else(|| Error::format(path, "manifest has no rows; threshold unknown"))?;
    Ok((threshold, decisions))
}

/// Sidecar written next to a manifest so verification can find the source.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub threshold: u8,
    pub source_root: PathBuf,
    #[serde(flatten)]
    pub totals: CurationTotals,
}

pub fn summary_path(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("summary.json")
}

pub fn save_summary(path: &Path, summary: &ManifestSummary) -> Result<()> {
    let mut body = serde_json::to_string_pretty(summary).expect("summary serialises");
    body.push('\n');
    fs::write(path, body).map_err(|e| Error::write(path, e))
}

pub fn load_summary(path: &Path) -> Result<ManifestSummary> {
    let body = fs::read_to_string(path).map_err(|e| Error::read(path, e))?;
    serde_json::from_str(&body).map_err(|e| Error::format(path, e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ApplyMode {
    Copy,
    Link,
}

impl FromStr for ApplyMode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "copy" => Ok(ApplyMode::Copy),
            "link" => Ok(ApplyMode::Link),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ApplyReport {
    /// File count per top-level class directory; `.` for files at the root.
    pub per_class: BTreeMap<String, usize>,
    pub files: usize,
}

fn class_dir(rel: &str) -> &str {
    rel.split_once('/').map_or(".", |(dir, _)| dir)
}

/// Relative paths of every regular file under `root`, byte-ordered.
pub fn list_files(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    for item in WalkDir::new(root).follow_links(false) {
        let item = item.map_err(|e| {
            let path = e.path().map(Path::to_path_buf).unwrap_or_else(|| root.to_path_buf());
            Error::read(path, e.into_io_error().unwrap_or_else(|| std::io::Error::other("walk failed")))
        })?;
        if item.file_type().is_dir() {
            continue;
        }
        let rel = item.path().strip_prefix(root).unwrap_or(item.path());
        let rel: Vec<_> = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect();
        out.push(rel.join("/"));
    }
    out.sort_by(|a, b| a.as_bytes().cmp(b.as_bytes()));
    Ok(out)
}

fn is_empty_dir(path: &Path) -> Result<bool> {
    match fs::read_dir(path) {
        Ok(mut it) => Ok(it.next().is_none()),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(true),
        Err(e) => Err(Error::read(path, e)),
    }
}

/// Files a manifest keeps: every image under `source_root` not marked Remove.
pub fn kept_files(manifest: &CurationManifest, source_root: &Path) -> Result<Vec<String>> {
    let removed: BTreeSet<&str> = manifest.removed().map(|d| d.filename.as_str()).collect();
    let scan = scan_images(source_root, SetTag::Untagged)?;
    let present: BTreeSet<&str> = scan.entries.iter().map(|e| e.rel_path.as_str()).collect();
    if let Some(missing) = manifest.kept().find(|d| !present.contains(d.filename.as_str())) {
        return Err(Error::MissingSource(source_root.join(&missing.filename)));
    }
    Ok(scan
        .entries
        .iter()
        .filter(|e| !removed.contains(e.rel_path.as_str()))
        .map(|e| e.rel_path.clone())
        .collect())
}

/// Materialise the curated set under `dest_root`.
///
/// Fails before touching the destination if it is not empty or a kept file
/// is missing from the source.
pub fn apply_curation(
    manifest: &CurationManifest,
    source_root: &Path,
    dest_root: &Path,
    mode: ApplyMode,
) -> Result<ApplyReport> {
    if !is_empty_dir(dest_root)? {
        return Err(Error::DestNotEmpty(dest_root.to_path_buf()));
    }
    let kept = kept_files(manifest, source_root)?;
    fs::create_dir_all(dest_root).map_err(|e| Error::write(dest_root, e))?;

    let dirs: BTreeSet<PathBuf> = kept
        .iter()
        .filter_map(|rel| Path::new(rel).parent().map(|p| dest_root.join(p)))
        .collect();
    for dir in &dirs {
        fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
    }
    kept.par_iter().try_for_each(|rel| {
        let from = source_root.join(rel);
        let to = dest_root.join(rel);
        let done = match mode {
            ApplyMode::Copy => fs::copy(&from, &to).map(|_| ()),
            ApplyMode::Link => fs::hard_link(&from, &to),
        };
        done.map_err(|e| Error::write(&to, e))
    })?;

    let mut report = ApplyReport {
        files: kept.len(),
        ..Default::default()
    };
    for rel in &kept {
        *report.per_class.entry(class_dir(rel).to_string()).or_default() += 1;
    }
    for (class, n) in &report.per_class {
        info!("{class}: {n} files");
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelledGroupRow {
    pub group_id: usize,
    pub filename: String,
    pub class_label: ClassLabel,
}

pub const LABELLED_GROUP_CSV_HEADER: &str = "group_id,filename,class";

/// Join group rows to ground truth by base file name. Returns the rows and
/// the filenames that had no label.
pub fn merge_labels(rows: &[GroupRow], labels: &LabelMap) -> (Vec<LabelledGroupRow>, Vec<String>) {
    let mut unmatched = Vec::new();
    let merged = rows
        .iter()
        .map(|r| {
            let class_label = labels.get(&r.filename);
            if !class_label.is_known() {
                unmatched.push(r.filename.clone());
            }
            LabelledGroupRow {
                group_id: r.group_id,
                filename: r.filename.clone(),
                class_label,
            }
        })
        .collect();
    (merged, unmatched)
}

pub fn save_labelled_groups_csv(path: &Path, rows: &[LabelledGroupRow]) -> Result<()> {
    let write = || -> std::result::Result<(), csv::Error> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(LABELLED_GROUP_CSV_HEADER.split(','))?;
        for r in rows {
            w.write_record([r.group_id.to_string().as_str(), &r.filename, r.class_label.as_str()])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| Error::csv(path, e))
}

/// Read a group CSV and write its labelled counterpart.
pub fn merge_labels_csv(group_csv: &Path, labels: &LabelMap, out: &Path) -> Result<Vec<String>> {
    let rows = crate::grouping::load_groups_csv(group_csv)?;
    let (merged, unmatched) = merge_labels(&rows, labels);
    save_labelled_groups_csv(out, &merged)?;
    for name in &unmatched {
        info!("no label for {name}");
    }
    Ok(unmatched)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ViolationKind {
    KeptFileMissing,
    RemovedFilePresent,
    LabelMismatch,
    ClassCountMismatch,
    TotalMismatch,
    UnexpectedFile,
}

impl ViolationKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ViolationKind::KeptFileMissing => "kept file missing",
            ViolationKind::RemovedFilePresent => "removed file present",
            ViolationKind::LabelMismatch => "label mismatch",
            ViolationKind::ClassCountMismatch => "class count mismatch",
            ViolationKind::TotalMismatch => "total mismatch",
            ViolationKind::UnexpectedFile => "unexpected file",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationReport {
    pub kept: usize,
    pub removed: usize,
    pub per_class: BTreeMap<ClassLabel, usize>,
    pub violations: Vec<Violation>,
}

impl VerificationReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn has(&self, kind: ViolationKind) -> bool {
        self.violations.iter().any(|v| v.kind == kind)
    }

    /// `VERIFY PASS|FAIL kept=<n> removed=<n> violations=<n>`
    pub fn summary_line(&self) -> String {
        format!(
            "VERIFY {} kept={} removed={} violations={}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.kept,
            self.removed,
            self.violations.len()
        )
    }
}

impl fmt::Display for VerificationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (class, n) in &self.per_class {
            writeln!(f, "class {class}: {n}")?;
        }
        for v in &self.violations {
            writeln!(f, "violation: {}: {}", v.kind.as_str(), v.detail)?;
        }
        writeln!(f, "{}", self.summary_line())
    }
}

/// Check a curated destination against its manifest and the ground truth.
///
/// The expected file set is every image under `source_root` minus the
/// manifest's Remove rows.
pub fn verify_curation(
    manifest: &CurationManifest,
    source_root: &Path,
    dest_root: &Path,
    labels: &LabelMap,
) -> Result<VerificationReport> {
    let removed: BTreeSet<&str> = manifest.removed().map(|d| d.filename.as_str()).collect();
    let expected: BTreeSet<String> = scan_images(source_root, SetTag::Untagged)?
        .entries
        .into_iter()
        .map(|e| e.rel_path)
        .filter(|rel| !removed.contains(rel.as_str()))
        .collect();
    let present: BTreeSet<String> = if dest_root.exists() {
        list_files(dest_root)?.into_iter().collect()
    } else {
        BTreeSet::new()
    };

    let mut violations = Vec::new();
    let mut flag = |kind, detail: String| violations.push(Violation { kind, detail });

    for d in manifest.kept() {
        if !present.contains(&d.filename) {
            flag(ViolationKind::KeptFileMissing, format!("group {} keeps {}", d.group_id, d.filename));
        }
    }
    let listed: BTreeSet<&str> = manifest.decisions.iter().map(|d| d.filename.as_str()).collect();
    for rel in &expected {
        if !listed.contains(rel.as_str()) && !present.contains(rel) {
            flag(ViolationKind::KeptFileMissing, format!("ungrouped {rel}"));
        }
    }
    for d in manifest.removed() {
        if present.contains(&d.filename) {
            flag(ViolationKind::RemovedFilePresent, format!("group {} removes {}", d.group_id, d.filename));
        }
    }
    for rel in &present {
        if !expected.contains(rel) && !removed.contains(rel.as_str()) {
            flag(ViolationKind::UnexpectedFile, rel.clone());
        }
    }
    for d in &manifest.decisions {
        let truth = labels.get(&d.filename);
        if truth != d.class_label {
            flag(
                ViolationKind::LabelMismatch,
                format!("{} is {} in the manifest but {} in the labels", d.filename, d.class_label, truth),
            );
        }
    }

    let count_by_label = |files: &mut dyn Iterator<Item = &String>| {
        let mut out: BTreeMap<ClassLabel, usize> = BTreeMap::new();
        for rel in files {
            *out.entry(labels.get(rel)).or_default() += 1;
        }
        out
    };
    let want = count_by_label(&mut expected.iter());
    let got = count_by_label(&mut present.iter());
    for class in want.keys().chain(got.keys()).collect::<BTreeSet<_>>() {
        let (w, g) = (want.get(class).copied().unwrap_or(0), got.get(class).copied().unwrap_or(0));
        if w != g {
            flag(ViolationKind::ClassCountMismatch, format!("{class}: expected {w}, found {g}"));
        }
    }
    if manifest.totals.remaining != expected.len() {
        flag(
            ViolationKind::TotalMismatch,
            format!(
                "manifest remaining {} but source yields {}",
                manifest.totals.remaining,
                expected.len()
            ),
        );
    }

    Ok(VerificationReport {
        kept: expected.len(),
        removed: removed.len(),
        per_class: got,
        violations,
    })
}

/// Reproducible uniform sample (without replacement) of files under `dest_root`.
pub fn sample_spotcheck(dest_root: &Path, n: usize, seed: u64) -> Result<Vec<String>> {
    let files = list_files(dest_root)?;
    if n > files.len() {
        return Err(Error::SampleTooLarge {
            requested: n,
            available: files.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, files.len(), n)
        .into_iter()
        .map(|i| files[i].clone())
        .collect())
}
