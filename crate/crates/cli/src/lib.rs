//! `simcull` command line: one subcommand per pipeline stage, plus `curate`
//! which chains match, group, plan, apply and verify.
//!
//! Exit status: 0 success, 1 operational failure, 2 usage error,
//! 3 verification FAIL.

use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, Parser, Subcommand};
use log::{info, warn};

use simcull_core::analysis::{
    interclass_analysis, removal_table, render_report, threshold_sweep, ClassPair, Report, ReportFormat,
};
use simcull_core::curation::{
    apply_curation, load_manifest_csv, load_summary, merge_labels, plan_curation, sample_spotcheck,
    save_labelled_groups_csv, save_manifest_csv, save_summary, summary_path, verify_curation, ApplyMode,
    CurationManifest, ManifestSummary,
};
use simcull_core::dataset::{attach_labels, load_labels, scan_images, DatasetIndex, LabelMap, SetTag};
use simcull_core::fingerprint::{fingerprint_all, FingerprintCache, ImageFingerprint};
use simcull_core::grouping::{build_groups, group_rows, save_groups_csv, write_groups_csv, SimilarityGroup};
use simcull_core::matcher::{match_pairs, save_matches_csv, write_matches_csv, MatchRecord, Scope, Threshold};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VERIFY_FAIL: i32 = 3;

const DEFAULT_LADDER: &str = "60,65,70,75,80,85,90,95,100";

/// Find and remove near-duplicate images from an image dataset.
#[derive(Parser, Debug)]
#[command(name = "simcull", version)]
struct Cli {
    /// Worker threads; defaults to one per core
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,

    /// Compute and report, but write nothing to disk
    #[arg(long, global = true)]
    dry_run: bool,

    /// Log progress to stderr
    #[arg(short, long, global = true)]
    verbose: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Source {
    /// Training image directory
    #[arg(long, value_name = "DIR")]
    train: PathBuf,

    /// Ground-truth CSV, one-hot or `image,class`
    #[arg(long, value_name = "CSV")]
    labels: Option<PathBuf>,

    /// Fingerprint cache file, created if absent
    #[arg(long, value_name = "FILE")]
    cache: Option<PathBuf>,

    /// Ignore images that have no ground-truth label
    #[arg(long)]
    exclude_unlabelled: bool,
}

#[derive(Args, Debug, Clone)]
struct Inputs {
    #[command(flatten)]
    source: Source,

    /// Test image directory
    #[arg(long, value_name = "DIR")]
    test: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
struct Ladder {
    /// Comma-separated similarity thresholds
    #[arg(long, value_delimiter = ',', default_value = DEFAULT_LADDER, value_name = "T,..")]
    thresholds: Vec<Threshold>,
}

#[derive(Args, Debug, Clone)]
struct Rendering {
    /// Output directory for tables
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Table formats to write
    #[arg(long, value_delimiter = ',', default_value = "csv,markdown")]
    format: Vec<ReportFormat>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fingerprint every image and refresh the cache
    Fingerprint {
        #[command(flatten)]
        inputs: Inputs,
    },
    /// List matching pairs at one threshold
    Match {
        #[command(flatten)]
        inputs: Inputs,
        /// Minimum similarity percentage, 1..=100
        #[arg(long, default_value = "80")]
        threshold: Threshold,
        /// Which pairs to compare
        #[arg(long, default_value = "all", value_name = "all|cross-set|cross-class")]
        scope: Scope,
        /// Match CSV path; stdout if omitted
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Group matching images into similarity groups
    Group {
        #[command(flatten)]
        inputs: Inputs,
        /// Minimum similarity percentage, 1..=100
        #[arg(long, default_value = "80")]
        threshold: Threshold,
        /// Which pairs to compare
        #[arg(long, default_value = "all", value_name = "all|cross-set|cross-class")]
        scope: Scope,
        /// Group CSV path; stdout if omitted
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Match, group, plan, apply and verify in one pass
    Curate {
        #[command(flatten)]
        source: Source,
        /// Minimum similarity percentage, 1..=100
        #[arg(long, default_value = "80")]
        threshold: Threshold,
        /// Which pairs to compare
        #[arg(long, default_value = "all", value_name = "all|cross-set|cross-class")]
        scope: Scope,
        /// Curated output directory; must be empty or absent
        #[arg(long, value_name = "DIR")]
        dest: PathBuf,
        /// Directory for manifest, group CSVs and verification report;
        /// defaults to `<dest>-reports` next to the destination
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
        /// Copy kept files or hard-link them
        #[arg(long, default_value = "copy", value_name = "copy|link")]
        mode: ApplyMode,
    },
    /// Check a curated directory against its manifest
    Verify {
        /// Manifest written by `curate`
        #[arg(long, value_name = "CSV")]
        manifest: PathBuf,
        /// Curated directory to check
        #[arg(long, value_name = "DIR")]
        dest: PathBuf,
        /// Ground-truth CSV; the manifest's own classes if omitted
        #[arg(long, value_name = "CSV")]
        labels: Option<PathBuf>,
        /// Source directory; read from the manifest summary if omitted
        #[arg(long, value_name = "DIR")]
        train: Option<PathBuf>,
        /// Also write the report to this file
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Duplicate counts for train, test and both across a threshold ladder
    Sweep {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        ladder: Ladder,
        #[command(flatten)]
        rendering: Rendering,
    },
    /// Near-duplicates whose members carry different class labels
    Interclass {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        ladder: Ladder,
        /// Class pairs such as `infection:ischaemia`; all six if omitted
        #[arg(long, value_delimiter = ',', value_name = "A:B,..")]
        pairs: Vec<ClassPair>,
        #[command(flatten)]
        rendering: Rendering,
    },
    /// Sweep, removal and (with labels) inter-class tables together
    Report {
        #[command(flatten)]
        inputs: Inputs,
        #[command(flatten)]
        ladder: Ladder,
        /// Class pairs for the inter-class table; all six if omitted
        #[arg(long, value_delimiter = ',', value_name = "A:B,..")]
        pairs: Vec<ClassPair>,
        #[command(flatten)]
        rendering: Rendering,
    },
    /// Reproducible random sample of curated files for manual review
    Sample {
        /// Curated directory to sample from
        #[arg(long, value_name = "DIR")]
        dest: PathBuf,
        /// Number of files
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(simcull_core::Error),
    Io(io::Error),
    VerifyFail,
}

impl From<simcull_core::Error> for Failure {
    fn from(e: simcull_core::Error) -> Self {
        Failure::Core(e)
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => f.write_str(m),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::Io(e) => write!(f, "{e}"),
            Failure::VerifyFail => f.write_str("verification failed"),
        }
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

/// Parse `argv` (program name first), run one subcommand and return the
/// process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let _ = env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .parse_default_env()
        .try_init();

    let outcome = validate(&cli).and_then(|()| {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.jobs.unwrap_or(0))
            .build()
            .map_err(|e| Failure::Usage(format!("cannot start {} workers: {e}", cli.jobs.unwrap_or(0))))?;
        pool.install(|| dispatch(&cli))
    });
    match outcome {
        Ok(()) => EXIT_OK,
        Err(Failure::VerifyFail) => EXIT_VERIFY_FAIL,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}\n\n{}", Cli::command().render_usage());
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_FAILURE
        }
    }
}

fn need_dir(flag: &str, path: &Path) -> Outcome {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("--{flag} {}: not a directory", path.display())))
    }
}

fn need_file(flag: &str, path: &Path) -> Outcome {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("--{flag} {}: no such file", path.display())))
    }
}

fn need_parent(flag: &str, path: &Path) -> Outcome {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() && !p.is_dir() => Err(Failure::Usage(format!(
            "--{flag} {}: parent directory does not exist",
            path.display()
        ))),
        _ if path.is_dir() => Err(Failure::Usage(format!("--{flag} {}: is a directory", path.display()))),
        _ => Ok(()),
    }
}

fn need_empty(flag: &str, path: &Path) -> Outcome {
    match fs::read_dir(path).map(|mut it| it.next().is_some()) {
        Ok(true) => Err(Failure::Usage(format!(
            "--{flag} {}: directory is not empty",
            path.display()
        ))),
        Ok(_) => Ok(()),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(()),
        Err(e) => Err(Failure::Usage(format!("--{flag} {}: {e}", path.display()))),
    }
}

fn need_out_dir(flag: &str, path: &Path) -> Outcome {
    if path.exists() && !path.is_dir() {
        return Err(Failure::Usage(format!("--{flag} {}: not a directory", path.display())));
    }
    Ok(())
}

fn validate_source(s: &Source) -> Outcome {
    need_dir("train", &s.train)?;
    if let Some(l) = &s.labels {
        need_file("labels", l)?;
    }
    if let Some(c) = &s.cache {
        need_parent("cache", c)?;
    }
    if s.exclude_unlabelled && s.labels.is_none() {
        return Err(Failure::Usage("--exclude-unlabelled needs --labels".into()));
    }
    Ok(())
}

fn validate_inputs(i: &Inputs) -> Outcome {
    validate_source(&i.source)?;
    if let Some(t) = &i.test {
        need_dir("test", t)?;
    }
    Ok(())
}

fn validate_ladder(l: &Ladder) -> Outcome {
    if l.thresholds.is_empty() {
        return Err(Failure::Usage("--thresholds is empty".into()));
    }
    Ok(())
}

fn validate(cli: &Cli) -> Outcome {
    match &cli.command {
        Command::Fingerprint { inputs } => validate_inputs(inputs),
        Command::Match { inputs, out, .. } | Command::Group { inputs, out, .. } => {
            validate_inputs(inputs)?;
            match out {
                Some(o) => need_parent("out", o),
                None => Ok(()),
            }
        }
        Command::Curate { source, dest, out, .. } => {
            validate_source(source)?;
            need_empty("dest", dest)?;
            if let Some(o) = out {
                need_out_dir("out", o)?;
            }
            curate_out_dir(dest, out.as_deref()).map(|_| ())
        }
        Command::Verify {
            manifest,
            dest,
            labels,
            train,
            out,
        } => {
            need_file("manifest", manifest)?;
            need_dir("dest", dest)?;
            if let Some(l) = labels {
                need_file("labels", l)?;
            }
            if let Some(t) = train {
                need_dir("train", t)?;
            } else if !summary_path(manifest).is_file() {
                return Err(Failure::Usage(format!(
                    "no {} next to the manifest; pass --train",
                    summary_path(manifest).display()
                )));
            }
            match out {
                Some(o) => need_parent("out", o),
                None => Ok(()),
            }
        }
        Command::Sweep {
            inputs,
            ladder,
            rendering,
        } => {
            validate_inputs(inputs)?;
            validate_ladder(ladder)?;
            need_out_dir("out", &rendering.out)
        }
        Command::Interclass {
            inputs,
            ladder,
            rendering,
            ..
        } => {
            validate_inputs(inputs)?;
            validate_ladder(ladder)?;
            if inputs.source.labels.is_none() {
                return Err(Failure::Usage("interclass needs --labels".into()));
            }
            need_out_dir("out", &rendering.out)
        }
        Command::Report {
            inputs,
            ladder,
            rendering,
            ..
        } => {
            validate_inputs(inputs)?;
            validate_ladder(ladder)?;
            need_out_dir("out", &rendering.out)
        }
        Command::Sample { dest, .. } => need_dir("dest", dest),
    }
}

fn curate_out_dir(dest: &Path, out: Option<&Path>) -> Outcome<PathBuf> {
    if let Some(o) = out {
        return Ok(o.to_path_buf());
    }
    let name = dest
        .file_name()
        .ok_or_else(|| Failure::Usage(format!("--dest {}: cannot derive a report directory; pass --out", dest.display())))?;
    let mut name = name.to_os_string();
    name.push("-reports");
    Ok(dest.with_file_name(name))
}

fn dispatch(cli: &Cli) -> Outcome {
    let dry = cli.dry_run;
    match &cli.command {
        Command::Fingerprint { inputs } => {
            let loaded = load(&inputs.source, inputs.test.as_deref(), dry)?;
            println!(
                "images={} fingerprinted={} cache_hits={} cache_misses={} failures={}",
                loaded.index.len(),
                loaded.fps.len(),
                loaded.hits,
                loaded.misses,
                loaded.failures
            );
            Ok(())
        }
        Command::Match {
            inputs,
            threshold,
            scope,
            out,
        } => {
            let loaded = load(&inputs.source, inputs.test.as_deref(), dry)?;
            let matches = match_pairs(&loaded.fps, *threshold, *scope, &loaded.index);
            info!("{} pairs match at {threshold}", matches.len());
            match out {
                Some(path) if !dry => save_matches_csv(path, &matches, &loaded.index)?,
                Some(_) => println!("pairs={}", matches.len()),
                None => write_matches_csv(io::stdout().lock(), &matches, &loaded.index)?,
            }
            Ok(())
        }
        Command::Group {
            inputs,
            threshold,
            scope,
            out,
        } => {
            let loaded = load(&inputs.source, inputs.test.as_deref(), dry)?;
            let groups = build_groups(&match_pairs(&loaded.fps, *threshold, *scope, &loaded.index));
            let rows = group_rows(&groups, &loaded.index)?;
            match out {
                Some(path) if !dry => save_groups_csv(path, &rows)?,
                Some(_) => println!("groups={}", groups.len()),
                None => write_groups_csv(io::stdout().lock(), &rows)?,
            }
            Ok(())
        }
        Command::Curate {
            source,
            threshold,
            scope,
            dest,
            out,
            mode,
        } => curate(source, *threshold, *scope, dest, &curate_out_dir(dest, out.as_deref())?, *mode, dry),
        Command::Verify {
            manifest,
            dest,
            labels,
            train,
            out,
        } => verify(manifest, dest, labels.as_deref(), train.as_deref(), out.as_deref(), dry),
        Command::Sweep {
            inputs,
            ladder,
            rendering,
        } => {
            let loaded = load(&inputs.source, inputs.test.as_deref(), dry)?;
            let sweep = threshold_sweep(&loaded.index, &loaded.fps, &ladder.thresholds);
            let removal = removal_table(&sweep, train_count(&loaded.index));
            let report = Report {
                sweep: Some(&sweep),
                removal: Some(&removal),
                interclass: None,
            };
            emit(&report, rendering, dry)
        }
        Command::Interclass {
            inputs,
            ladder,
            pairs,
            rendering,
        } => {
            let loaded = load(&inputs.source, inputs.test.as_deref(), dry)?;
            let pairs = if pairs.is_empty() { ClassPair::all() } else { pairs.clone() };
            let inter = interclass_analysis(&loaded.index, &loaded.fps, &ladder.thresholds, &pairs)?;
            let report = Report {
                interclass: Some(&inter),
                ..Default::default()
            };
            emit(&report, rendering, dry)
        }
        Command::Report {
            inputs,
            ladder,
            pairs,
            rendering,
        } => {
            let loaded = load(&inputs.source, inputs.test.as_deref(), dry)?;
            let sweep = threshold_sweep(&loaded.index, &loaded.fps, &ladder.thresholds);
            let removal = removal_table(&sweep, train_count(&loaded.index));
            let inter = match &inputs.source.labels {
                Some(_) => {
                    let pairs = if pairs.is_empty() { ClassPair::all() } else { pairs.clone() };
                    Some(interclass_analysis(&loaded.index, &loaded.fps, &ladder.thresholds, &pairs)?)
                }
                None => None,
            };
            let report = Report {
                sweep: Some(&sweep),
                removal: Some(&removal),
                interclass: inter.as_ref(),
            };
            emit(&report, rendering, dry)
        }
        Command::Sample { dest, n, seed } => {
            for rel in sample_spotcheck(dest, *n, *seed)? {
                println!("{rel}");
            }
            Ok(())
        }
    }
}

struct Loaded {
    index: DatasetIndex,
    labels: LabelMap,
    fps: Vec<ImageFingerprint>,
    hits: usize,
    misses: usize,
    failures: usize,
}

fn load(source: &Source, test: Option<&Path>, dry: bool) -> Outcome<Loaded> {
    let mut scans = vec![scan_images(&source.train, SetTag::Train)?];
    if let Some(t) = test {
        scans.push(scan_images(t, SetTag::Test)?);
    }
    for s in &scans {
        if !s.skipped.is_empty() {
            info!("skipped {} non-image entries", s.skipped.len());
        }
    }
    let mut index = DatasetIndex::from_scans(scans);
    let labels = match &source.labels {
        Some(path) => {
            let labels = load_labels(path)?;
            let (joined, report) = attach_labels(&index, &labels);
            if !report.unmatched.is_empty() {
                info!("{} label rows match no image", report.unmatched.len());
            }
            index = joined;
            labels
        }
        None => LabelMap::default(),
    };
    if source.exclude_unlabelled {
        let before = index.len();
        index = DatasetIndex::from_entries(index.iter().filter(|e| e.class_label.is_known()).cloned().collect());
        info!("excluded {} unlabelled images", before - index.len());
    }

    let mut cache = match &source.cache {
        Some(path) => FingerprintCache::load(path)?,
        None => FingerprintCache::new(),
    };
    let (fps, stats) = fingerprint_all(&index, &mut cache)?;
    info!(
        "{} fingerprints: {} cached, {} computed, {} failed",
        fps.len(),
        stats.hits,
        stats.misses,
        stats.decode_failures.len()
    );
    if let (Some(path), false) = (&source.cache, dry) {
        cache.save(path)?;
    }
    Ok(Loaded {
        index,
        labels,
        fps,
        hits: stats.hits,
        misses: stats.misses,
        failures: stats.decode_failures.len(),
    })
}

fn train_count(index: &DatasetIndex) -> usize {
    index.iter().filter(|e| e.set_tag == SetTag::Train).count()
}

fn emit(report: &Report<'_>, rendering: &Rendering, dry: bool) -> Outcome {
    if dry {
        for (name, table) in report.tables() {
            println!("## {name}\n\n{}", table.to_markdown());
        }
        return Ok(());
    }
    for path in render_report(&rendering.out, report, &rendering.format)? {
        println!("{}", path.display());
    }
    Ok(())
}

/// Labels implied by the manifest itself, for verification without a CSV.
fn manifest_labels(manifest: &CurationManifest) -> LabelMap {
    manifest
        .decisions
        .iter()
        .map(|d| {
            let name = d.filename.rsplit('/').next().unwrap_or(&d.filename);
            (name.to_string(), d.class_label)
        })
        .collect()
}

fn curate(
    source: &Source,
    threshold: Threshold,
    scope: Scope,
    dest: &Path,
    out: &Path,
    mode: ApplyMode,
    dry: bool,
) -> Outcome {
    let loaded = load(source, None, dry)?;
    let matches: Vec<MatchRecord> = match_pairs(&loaded.fps, threshold, scope, &loaded.index);
    let groups: Vec<SimilarityGroup> = build_groups(&matches);
    let manifest = plan_curation(&groups, &loaded.index, threshold)?;
    let t = manifest.totals;
    println!(
        "threshold={threshold} groups={} total={} removed={} remaining={}",
        groups.len(),
        t.total_images,
        t.removed,
        t.remaining
    );
    if dry {
        return Ok(());
    }

    fs::create_dir_all(out)?;
    save_matches_csv(&out.join("matches.csv"), &matches, &loaded.index)?;
    let rows = group_rows(&groups, &loaded.index)?;
    save_groups_csv(&out.join("groups.csv"), &rows)?;
    if source.labels.is_some() {
        let (labelled, unmatched) = merge_labels(&rows, &loaded.labels);
        if !unmatched.is_empty() {
            warn!("{} grouped files have no label", unmatched.len());
        }
        save_labelled_groups_csv(&out.join("groups_labelled.csv"), &labelled)?;
    }
    let manifest_path = out.join("manifest.csv");
    save_manifest_csv(&manifest_path, &manifest)?;
    save_summary(
        &summary_path(&manifest_path),
        &ManifestSummary {
            threshold: threshold.value(),
            source_root: source.train.clone(),
            totals: t,
        },
    )?;

    let applied = apply_curation(&manifest, &source.train, dest, mode)?;
    info!("wrote {} files to {}", applied.files, dest.display());

    let labels = if source.labels.is_some() {
        loaded.labels
    } else {
        manifest_labels(&manifest)
    };
    let report = verify_curation(&manifest, &source.train, dest, &labels)?;
    fs::write(out.join("verify.txt"), report.to_string())?;
    print!("{report}");
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::VerifyFail)
    }
}

fn verify(
    manifest_path: &Path,
    dest: &Path,
    labels: Option<&Path>,
    train: Option<&Path>,
    out: Option<&Path>,
    dry: bool,
) -> Outcome {
    let (threshold, decisions) = load_manifest_csv(manifest_path)?;
    let summary_file = summary_path(manifest_path);
    let summary = if summary_file.is_file() {
        Some(load_summary(&summary_file)?)
    } else {
        None
    };
    let source_root = match (train, &summary) {
        (Some(t), _) => t.to_path_buf(),
        (None, Some(s)) => s.source_root.clone(),
        (None, None) => unreachable!("checked during validation"),
    };
    let total = match &summary {
        Some(s) if train.is_none() => s.totals.total_images,
        _ => scan_images(&source_root, SetTag::Untagged)?.entries.len(),
    };
    let manifest = CurationManifest::from_decisions(threshold, decisions, total);
    let labels = match labels {
        Some(path) => load_labels(path)?,
        None => manifest_labels(&manifest),
    };
    let report = verify_curation(&manifest, &source_root, dest, &labels)?;
    print!("{report}");
    if let (Some(path), false) = (out, dry) {
        fs::write(path, report.to_string())?;
    }
    if report.passed() {
        Ok(())
    } else {
        Err(Failure::VerifyFail)
    }
}

