//! Threshold sweeps, removal tables and inter-class breakdowns.
//!
//! Counts use "duplicates beyond the first" semantics: Σ(|g| − 1) over the
//! similarity groups, i.e. the number of images a keep-first pass removes.
//! Each sweep pass scores pairs once at the lowest requested threshold and
//! derives the higher thresholds by filtering, which is exact because match
//! sets are nested.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::dataset::{ClassLabel, DatasetIndex, SetTag};
use crate::error::{Error, Result};
use crate::fingerprint::ImageFingerprint;
use crate::grouping::{build_groups, group_stats, GroupStats};
use crate::matcher::{filter_matches, match_subset, MatchRecord, Scope, Threshold};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SweepRow {
    pub threshold: Threshold,
    pub train: GroupStats,
    pub test: GroupStats,
    pub combined: GroupStats,
}

impl SweepRow {
    pub fn train_count(&self) -> usize {
        self.train.similar_image_count
    }

    pub fn test_count(&self) -> usize {
        self.test.similar_image_count
    }

    pub fn combined_count(&self) -> usize {
        self.combined.similar_image_count
    }
}

/// Rows ordered from the highest threshold down.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SweepSummary {
    pub rows: Vec<SweepRow>,
}

fn sorted_desc(thresholds: &[Threshold]) -> Vec<Threshold> {
    let mut t = thresholds.to_vec();
    t.sort_by(|a, b| b.cmp(a));
    t.dedup();
    t
}

/// Stats at every threshold (descending) for one candidate match list.
fn ladder_stats(candidates: &[MatchRecord], ladder: &[Threshold]) -> Vec<GroupStats> {
    ladder
        .iter()
        .map(|t| group_stats(&build_groups(&filter_matches(candidates, *t))))
        .collect()
}

fn candidates(
    fps: &[&ImageFingerprint],
    lowest: Threshold,
    scope: Scope,
    index: &DatasetIndex,
) -> Vec<MatchRecord> {
    match_subset(fps.to_vec(), lowest, scope, index)
}

/// Train-only, test-only and combined passes over one set of fingerprints.
pub fn threshold_sweep(
    index: &DatasetIndex,
    fps: &[ImageFingerprint],
    thresholds: &[Threshold],
) -> SweepSummary {
    let ladder = sorted_desc(thresholds);
    let Some(&lowest) = ladder.last() else {
        return SweepSummary::default();
    };
    let tagged = |tag: SetTag| -> Vec<&ImageFingerprint> {
        fps.iter()
            .filter(|f| index.entries()[f.entry_id].set_tag == tag)
            .collect()
    };
    let all: Vec<&ImageFingerprint> = fps.iter().collect();
    let train = ladder_stats(&candidates(&tagged(SetTag::Train), lowest, Scope::All, index), &ladder);
    let test = ladder_stats(&candidates(&tagged(SetTag::Test), lowest, Scope::All, index), &ladder);
    let combined = ladder_stats(&candidates(&all, lowest, Scope::All, index), &ladder);
    SweepSummary {
        rows: ladder
            .iter()
            .enumerate()
            .map(|(i, &threshold)| SweepRow {
                threshold,
                train: train[i],
                test: test[i],
                combined: combined[i],
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RemovalRow {
    pub threshold: Threshold,
    pub removed: usize,
    pub remaining: usize,
}

pub fn removal_table(sweep: &SweepSummary, total_train: usize) -> Vec<RemovalRow> {
    sweep
        .rows
        .iter()
        .map(|r| {
            let removed = r.train_count();
            RemovalRow {
                threshold: r.threshold,
                removed,
                remaining: total_train
                    .checked_sub(removed)
                    .expect("more removals than training images"),
            }
        })
        .collect()
}

/// Two distinct known classes, written `a:b` on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ClassPair(pub ClassLabel, pub ClassLabel);

impl ClassPair {
    pub fn new(a: ClassLabel, b: ClassLabel) -> Result<Self> {
        if !a.is_known() {
            return Err(Error::UnknownClass(a.to_string()));
        }
        if !b.is_known() || a == b {
            return Err(Error::UnknownClass(b.to_string()));
        }
        Ok(ClassPair(a, b))
    }

    /// Every unordered pair of the four known classes.
    pub fn all() -> Vec<ClassPair> {
        let k = ClassLabel::KNOWN;
        let mut out = Vec::new();
        for i in 0..k.len() {
            for j in i + 1..k.len() {
                out.push(ClassPair(k[i], k[j]));
            }
        }
        out
    }
}

impl FromStr for ClassPair {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once(':')
            .ok_or_else(|| Error::UnknownClass(s.to_string()))?;
        ClassPair::new(a.parse()?, b.parse()?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InterClassRow {
    pub pair: ClassPair,
    pub threshold: Threshold,
    pub pair_count: usize,
    pub images_involved: usize,
    pub similar_image_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct InterClassSummary {
    pub rows: Vec<InterClassRow>,
}

/// Matches with one endpoint in each class of every requested pair.
pub fn interclass_analysis(
    index: &DatasetIndex,
    fps: &[ImageFingerprint],
    thresholds: &[Threshold],
    class_pairs: &[ClassPair],
) -> Result<InterClassSummary> {
    for p in class_pairs {
        ClassPair::new(p.0, p.1)?;
    }
    let ladder = sorted_desc(thresholds);
    let Some(&lowest) = ladder.last() else {
        return Ok(InterClassSummary::default());
    };
    let mut rows = Vec::new();
    for &pair in class_pairs {
        let members: Vec<&ImageFingerprint> = fps
            .iter()
            .filter(|f| {
                let c = index.entries()[f.entry_id].class_label;
                c == pair.0 || c == pair.1
            })
            .collect();
        let cands = candidates(&members, lowest, Scope::CrossClassOnly, index);
        for &t in &ladder {
            let matched = filter_matches(&cands, t);
            let stats = group_stats(&build_groups(&matched));
            rows.push(InterClassRow {
                pair,
                threshold: t,
                pair_count: matched.len(),
                images_involved: stats.images_involved,
                similar_image_count: stats.similar_image_count,
            });
        }
    }
    Ok(InterClassSummary { rows })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Markdown => "md",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown format {other:?}")),
        }
    }
}

/// A rectangular table of already-formatted cells.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Table {
            header: header.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 cells")
    }

    pub fn to_markdown(&self) -> String {
        let line = |cells: &[String]| format!("| {} |\n", cells.join(" | "));
        let mut out = line(&self.header);
        out.push_str(&format!("|{}\n", "---|".repeat(self.header.len())));
        for r in &self.rows {
            out.push_str(&line(r));
        }
        out
    }

    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Markdown => self.to_markdown(),
        }
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let header = reader
            .headers()
            .map_err(|e| Error::csv(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = reader
            .records()
            .map(|r| r.map(|r| r.iter().map(str::to_string).collect()))
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::csv(path, e))?;
        Ok(Table { header, rows })
    }
}

pub fn sweep_table(sweep: &SweepSummary) -> Table {
    let mut t = Table::new(&["threshold", "train", "test", "combined"]);
    for r in &sweep.rows {
        t.push(vec![
            r.threshold.to_string(),
            r.train_count().to_string(),
            r.test_count().to_string(),
            r.combined_count().to_string(),
        ]);
    }
    t
}

/// Same layout as [`sweep_table`] but counting every image in a group.
pub fn sweep_involved_table(sweep: &SweepSummary) -> Table {
    let mut t = Table::new(&["threshold", "train", "test", "combined"]);
    for r in &sweep.rows {
        t.push(vec![
            r.threshold.to_string(),
            r.train.images_involved.to_string(),
            r.test.images_involved.to_string(),
            r.combined.images_involved.to_string(),
        ]);
    }
    t
}

pub fn removal_csv_table(rows: &[RemovalRow]) -> Table {
    let mut t = Table::new(&["threshold", "removed", "remaining"]);
    for r in rows {
        t.push(vec![r.threshold.to_string(), r.removed.to_string(), r.remaining.to_string()]);
    }
    t
}

pub fn interclass_table(summary: &InterClassSummary) -> Table {
    let mut t = Table::new(&[
        "class_a",
        "class_b",
        "threshold",
        "pair_count",
        "images_involved",
        "similar_images",
    ]);
    for r in &summary.rows {
        t.push(vec![
            r.pair.0.to_string(),
            r.pair.1.to_string(),
            r.threshold.to_string(),
            r.pair_count.to_string(),
            r.images_involved.to_string(),
            r.similar_image_count.to_string(),
        ]);
    }
    t
}

/// Inputs for [`render_report`]; absent parts are skipped.
#[derive(Debug, Clone, Copy, Default)]
pub struct Report<'a> {
    pub sweep: Option<&'a SweepSummary>,
    pub removal: Option<&'a [RemovalRow]>,
    pub interclass: Option<&'a InterClassSummary>,
}

impl Report<'_> {
    pub fn tables(&self) -> Vec<(&'static str, Table)> {
        let mut out = Vec::new();
        if let Some(s) = self.sweep {
            out.push(("sweep", sweep_table(s)));
            out.push(("sweep_involved", sweep_involved_table(s)));
        }
        if let Some(r) = self.removal {
            out.push(("removal", removal_csv_table(r)));
        }
        if let Some(i) = self.interclass {
            out.push(("interclass", interclass_table(i)));
        }
        out
    }
}

/// Write each table of `report` in every requested format into `out_dir`.
pub fn render_report(out_dir: &Path, report: &Report<'_>, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).map_err(|e| Error::write(out_dir, e))?;
    let mut written = Vec::new();
    for (name, table) in report.tables() {
        for &format in formats {
            let path = out_dir.join(format!("{name}.{}", format.extension()));
            fs::write(&path, table.render(format)).map_err(|e| Error::write(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ImageEntry;
    use crate::fingerprint::{content_digest, TileGrid};

    fn t(v: i64) -> Threshold {
        Threshold::new(v).unwrap()
    }

    fn setup(specs: &[(SetTag, ClassLabel, [u8; 3])]) -> (DatasetIndex, Vec<ImageFingerprint>) {
        let index = DatasetIndex::from_entries(
            specs
                .iter()
                .enumerate()
                .map(|(i, (tag, class, _))| ImageEntry {
                    id: i,
                    path: PathBuf::from(format!("/d/{i:03}.png")),
                    rel_path: format!("{i:03}.png"),
                    set_tag: *tag,
                    class_label: *class,
                    byte_size: 1,
                    mtime: 0,
                })
                .collect(),
        );
        let fps = specs
            .iter()
            .enumerate()
            .map(|(i, (_, _, rgb))| ImageFingerprint {
                entry_id: i,
                width: 64,
                height: 64,
                tiles: TileGrid::uniform(*rgb),
                digest: content_digest(&[i as u8]),
            })
            .collect();
        (index, fps)
    }

    #[test]
    fn no_duplicates_no_counts() {
        use SetTag::*;
        let (index, fps) = setup(&[
            (Train, ClassLabel::None, [0, 0, 0]),
            (Train, ClassLabel::None, [255, 255, 255]),
            (Test, ClassLabel::None, [0, 255, 0]),
        ]);
        let sweep = threshold_sweep(&index, &fps, &Threshold::DEFAULT_LADDER);
        assert_eq!(sweep.rows.len(), 9);
        assert_eq!(sweep.rows[0].threshold, Threshold::MAX);
        assert!(sweep.rows.iter().all(|r| r.train_count() + r.test_count() + r.combined_count() == 0));
    }

    #[test]
    fn planted_pair_at_83() {
        use SetTag::*;
        // per-channel offsets (6, 6, 5): D = 17, S = 83
        let (index, fps) = setup(&[
            (Train, ClassLabel::None, [10, 10, 10]),
            (Train, ClassLabel::None, [16, 16, 15]),
            (Train, ClassLabel::None, [250, 250, 250]),
            (Test, ClassLabel::None, [120, 0, 240]),
        ]);
        let sweep = threshold_sweep(&index, &fps, &Threshold::DEFAULT_LADDER);
        for r in &sweep.rows {
            let want = usize::from(r.threshold.value() <= 83);
            assert_eq!(r.train_count(), want, "T={}", r.threshold);
            assert_eq!(r.test_count(), 0);
            assert_eq!(r.combined_count(), want);
        }
        let removal = removal_table(&sweep, 3);
        assert!(removal.iter().all(|r| r.removed + r.remaining == 3));
        let at80 = removal.iter().find(|r| r.threshold == t(80)).unwrap();
        assert_eq!((at80.removed, at80.remaining), (1, 2));
    }

    #[test]
    fn cross_set_matches_raise_combined_count() {
        use SetTag::*;
        let (index, fps) = setup(&[
            (Train, ClassLabel::None, [10, 10, 10]),
            (Train, ClassLabel::None, [11, 10, 10]),
            (Test, ClassLabel::None, [12, 10, 10]),
            (Test, ClassLabel::None, [200, 10, 10]),
        ]);
        let sweep = threshold_sweep(&index, &fps, &[t(90)]);
        let r = sweep.rows[0];
        assert_eq!((r.train_count(), r.test_count(), r.combined_count()), (1, 0, 2));
    }

    #[test]
    fn removal_table_identity() {
        let sweep = SweepSummary {
            rows: vec![SweepRow {
                threshold: t(80),
                train: GroupStats { group_count: 300, similar_image_count: 317, images_involved: 617 },
                test: GroupStats::default(),
                combined: GroupStats::default(),
            }],
        };
        let rows = removal_table(&sweep, 9949);
        assert_eq!((rows[0].removed, rows[0].remaining), (317, 9632));
        let empty = SweepSummary {
            rows: vec![SweepRow { threshold: t(60), train: GroupStats::default(), ..sweep.rows[0] }],
        };
        let zero = removal_table(&empty, 100);
        assert_eq!((zero[0].removed, zero[0].remaining), (0, 100));
    }

    #[test]
    fn interclass_counts_only_cross_pairs() {
        use SetTag::*;
        // infection/none planted at D = 28 (S = 72); a same-class pair at D = 0
        let (index, fps) = setup(&[
            (Train, ClassLabel::Infection, [40, 40, 40]),
            (Train, ClassLabel::None, [50, 49, 49]),
            (Train, ClassLabel::Infection, [200, 200, 200]),
            (Train, ClassLabel::Infection, [200, 200, 200]),
            (Train, ClassLabel::Both, [0, 250, 0]),
        ]);
        let pairs = [
            ClassPair::new(ClassLabel::Infection, ClassLabel::None).unwrap(),
            ClassPair::new(ClassLabel::Both, ClassLabel::None).unwrap(),
        ];
        let s = interclass_analysis(&index, &fps, &[t(70), t(75)], &pairs).unwrap();
        let row = |pair: ClassPair, th: i64| {
            *s.rows.iter().find(|r| r.pair == pair && r.threshold == t(th)).unwrap()
        };
        let r70 = row(pairs[0], 70);
        assert_eq!((r70.pair_count, r70.images_involved, r70.similar_image_count), (1, 2, 1));
        assert_eq!(row(pairs[0], 75).pair_count, 0);
        assert!(s.rows.iter().filter(|r| r.pair == pairs[1]).all(|r| r.pair_count == 0));
    }

    #[test]
    fn class_pairs_validate() {
        assert!("infection:none".parse::<ClassPair>().is_ok());
        assert!(matches!("infection:infection".parse::<ClassPair>(), Err(Error::UnknownClass(_))));
        assert!(matches!("infection:unlabelled".parse::<ClassPair>(), Err(Error::UnknownClass(_))));
        assert!(matches!("infection:fungus".parse::<ClassPair>(), Err(Error::UnknownClass(_))));
        assert_eq!(ClassPair::all().len(), 6);
    }

    #[test]
    fn empty_sweep_renders_headers_only() {
        let table = sweep_table(&SweepSummary::default());
        assert_eq!(table.to_csv(), "threshold,train,test,combined\n");
        assert_eq!(table.to_markdown(), "| threshold | train | test | combined |\n|---|---|---|---|\n");
    }

    #[test]
    fn formats_agree_row_for_row() {
        let sweep = SweepSummary {
            rows: vec![SweepRow {
                threshold: t(90),
                train: GroupStats { group_count: 10, similar_image_count: 19, images_involved: 29 },
                test: GroupStats { group_count: 20, similar_image_count: 23, images_involved: 43 },
                combined: GroupStats { group_count: 40, similar_image_count: 48, images_involved: 88 },
            }],
        };
        let table = sweep_table(&sweep);
        assert_eq!(table.to_csv(), "threshold,train,test,combined\n90,19,23,48\n");
        assert!(table.to_markdown().ends_with("| 90 | 19 | 23 | 48 |\n"));

        let dir = tempfile::tempdir().unwrap();
        let report = Report { sweep: Some(&sweep), ..Default::default() };
        let a = render_report(dir.path(), &report, &[ReportFormat::Csv, ReportFormat::Markdown]).unwrap();
        let first: Vec<_> = a.iter().map(|p| fs::read(p).unwrap()).collect();
        render_report(dir.path(), &report, &[ReportFormat::Csv, ReportFormat::Markdown]).unwrap();
        let second: Vec<_> = a.iter().map(|p| fs::read(p).unwrap()).collect();
        assert_eq!(first, second);
        assert_eq!(Table::read_csv(&dir.path().join("sweep.csv")).unwrap(), table);
    }
}
