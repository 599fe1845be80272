//! Pair scoring and thresholded matching.
//!
//! The difference score `D` of two fingerprints is the mean, over the 225
//! tile pairs, of `|dR| + |dG| + |dB|`, so `D` lies in `[0, 765]`. The
//! user-facing similarity is `S = max(0, 100 - D)` and a pair matches at
//! threshold `T` when `S >= T`. Internally the score is kept as the integer
//! channel-difference sum `225 * D`, which makes the match test exact:
//! `sum <= 225 * (100 - T)`.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::dataset::DatasetIndex;
use crate::error::{Error, Result};
use crate::fingerprint::{ImageFingerprint, TILE_COUNT};

/// Similarity threshold in whole percent, `1..=100`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Threshold(u8);

impl Threshold {
    pub const MAX: Threshold = Threshold(100);

    /// The nine default hardness levels, ascending.
    pub const DEFAULT_LADDER: [Threshold; 9] = [
        Threshold(60),
        Threshold(65),
        Threshold(70),
        Threshold(75),
        Threshold(80),
        Threshold(85),
        Threshold(90),
        Threshold(95),
        Threshold(100),
    ];

    pub fn new(value: i64) -> Result<Self> {
        if (1..=100).contains(&value) {
            Ok(Threshold(value as u8))
        } else {
            Err(Error::InvalidThreshold(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    /// Largest channel-difference sum that still matches.
    pub fn budget(self) -> u32 {
        TILE_COUNT as u32 * (100 - self.0 as u32)
    }

    /// Binary identity is additionally required at 100.
    pub fn requires_identical_bytes(self) -> bool {
        self.0 == 100
    }
}

impl fmt::Display for Threshold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl FromStr for Threshold {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().trim_end_matches('%');
        let v: i64 = s.parse().map_err(|_| Error::InvalidThreshold(-1))?;
        Threshold::new(v)
    }
}

/// Parse a comma-separated threshold list, e.g. `60,65,70`.
pub fn parse_thresholds(list: &str) -> Result<Vec<Threshold>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SimilarityScore {
    diff_sum: u32,
}

impl SimilarityScore {
    pub const IDENTICAL: SimilarityScore = SimilarityScore { diff_sum: 0 };

    pub fn from_diff_sum(diff_sum: u32) -> Self {
        SimilarityScore { diff_sum }
    }

    /// Sum of absolute channel differences over all tiles, `225 * D`.
    pub fn diff_sum(self) -> u32 {
        self.diff_sum
    }

    /// Mean per-tile difference `D`, in `[0, 765]`.
    pub fn difference(self) -> f64 {
        self.diff_sum as f64 / TILE_COUNT as f64
    }

    /// Similarity percent `S`, in `[0, 100]`.
    pub fn percent(self) -> f64 {
        (100.0 - self.difference()).max(0.0)
    }

    /// `S >= T`, evaluated exactly.
    pub fn meets(self, threshold: Threshold) -> bool {
        self.diff_sum <= threshold.budget()
    }
}

pub fn tile_score(a: &ImageFingerprint, b: &ImageFingerprint) -> SimilarityScore {
    let sum = a
        .tiles
        .channels()
        .iter()
        .zip(b.tiles.channels())
        .map(|(x, y)| x.abs_diff(*y) as u32)
        .sum();
    SimilarityScore::from_diff_sum(sum)
}

/// Like [`tile_score`] followed by the threshold test, but stops as soon as
/// the running sum exceeds the threshold budget. Also returns how many tiles
/// were visited.
pub fn early_bail_trace(
    a: &ImageFingerprint,
    b: &ImageFingerprint,
    threshold: Threshold,
) -> (Option<SimilarityScore>, usize) {
    let budget = threshold.budget();
    let mut running = 0u32;
    let tiles = a
        .tiles
        .channels()
        .chunks_exact(3)
        .zip(b.tiles.channels().chunks_exact(3));
    for (n, (x, y)) in tiles.enumerate() {
        running += x[0].abs_diff(y[0]) as u32 + x[1].abs_diff(y[1]) as u32 + x[2].abs_diff(y[2]) as u32;
        if running > budget {
            return (None, n + 1);
        }
    }
    (Some(SimilarityScore::from_diff_sum(running)), TILE_COUNT)
}

pub fn early_bail_score(
    a: &ImageFingerprint,
    b: &ImageFingerprint,
    threshold: Threshold,
) -> Option<SimilarityScore> {
    early_bail_trace(a, b, threshold).0
}

/// Full match rule: score test plus byte identity at `T = 100`.
pub fn pair_matches(
    a: &ImageFingerprint,
    b: &ImageFingerprint,
    threshold: Threshold,
) -> Option<SimilarityScore> {
    if threshold.requires_identical_bytes() && a.digest != b.digest {
        return None;
    }
    early_bail_score(a, b, threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scope {
    All,
    CrossSetOnly,
    CrossClassOnly,
}

impl FromStr for Scope {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "all" => Ok(Scope::All),
            "cross-set" => Ok(Scope::CrossSetOnly),
            "cross-class" => Ok(Scope::CrossClassOnly),
            other => Err(format!("unknown scope {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MatchRecord {
    pub first: usize,
    pub second: usize,
    pub score: SimilarityScore,
    pub cross_set: bool,
    pub cross_class: bool,
    /// Content digests are equal.
    pub same_bytes: bool,
}

impl MatchRecord {
    /// Whether this pair would also be produced at `threshold`.
    pub fn holds_at(&self, threshold: Threshold) -> bool {
        self.score.meets(threshold) && (!threshold.requires_identical_bytes() || self.same_bytes)
    }
}

/// Tags for a pair of entries: (cross_set, cross_class). Pairs involving an
/// unlabelled image are never cross-class.
fn pair_tags(index: &DatasetIndex, a: usize, b: usize) -> (bool, bool) {
    let (ea, eb) = (&index.entries()[a], &index.entries()[b]);
    let cross_set = ea.set_tag != eb.set_tag;
    let cross_class =
        ea.class_label.is_known() && eb.class_label.is_known() && ea.class_label != eb.class_label;
    (cross_set, cross_class)
}

/// Exhaustively match every canonical pair of `fps` at `threshold`.
///
/// Output is sorted by `(first, second)` and independent of thread count.
pub fn match_pairs(
    fps: &[ImageFingerprint],
    threshold: Threshold,
    scope: Scope,
    index: &DatasetIndex,
) -> Vec<MatchRecord> {
    match_subset(fps.iter().collect(), threshold, scope, index)
}

/// [`match_pairs`] over a borrowed subset of fingerprints.
pub fn match_subset(
    mut order: Vec<&ImageFingerprint>,
    threshold: Threshold,
    scope: Scope,
    index: &DatasetIndex,
) -> Vec<MatchRecord> {
    order.sort_by_key(|fp| fp.entry_id);
    order.dedup_by_key(|fp| fp.entry_id);
    assert!(
        order.iter().all(|fp| fp.entry_id < index.len()),
        "fingerprint id outside the index"
    );
    let order = &order;
    let mut out: Vec<MatchRecord> = (0..order.len())
        .into_par_iter()
        .flat_map_iter(|i| {
            let a = order[i];
            order[i + 1..].iter().filter_map(move |b| {
                let (cross_set, cross_class) = pair_tags(index, a.entry_id, b.entry_id);
                let in_scope = match scope {
                    Scope::All => true,
                    Scope::CrossSetOnly => cross_set,
                    Scope::CrossClassOnly => cross_class,
                };
                if !in_scope {
                    return None;
                }
                pair_matches(a, b, threshold).map(|score| MatchRecord {
                    first: a.entry_id,
                    second: b.entry_id,
                    score,
                    cross_set,
                    cross_class,
                    same_bytes: a.digest == b.digest,
                })
            })
        })
        .collect();
    out.sort_by_key(|r| (r.first, r.second));
    out
}

/// Records from a lower-threshold run that survive at `threshold`.
pub fn filter_matches(records: &[MatchRecord], threshold: Threshold) -> Vec<MatchRecord> {
    records
        .iter()
        .filter(|r| r.holds_at(threshold))
        .copied()
        .collect()
}

pub const MATCH_CSV_HEADER: &str = "first,second,score,cross_set,cross_class";

/// Match list as CSV; endpoints are written as dataset-relative paths.
pub fn write_matches_csv<W: Write>(
    out: W,
    records: &[MatchRecord],
    index: &DatasetIndex,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(MATCH_CSV_HEADER.split(','))?;
    for r in records {
        w.write_record([
            index.entries()[r.first].rel_path.as_str(),
            index.entries()[r.second].rel_path.as_str(),
            &format!("{:.3}", r.score.percent()),
            if r.cross_set { "true" } else { "false" },
            if r.cross_class { "true" } else { "false" },
        ])?;
    }
    w.flush()
}

pub fn save_matches_csv(path: &Path, records: &[MatchRecord], index: &DatasetIndex) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::write(path, e))?;
    write_matches_csv(std::io::BufWriter::new(file), records, index).map_err(|e| Error::write(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{ClassLabel, ImageEntry, SetTag};
    use crate::fingerprint::{content_digest, ContentDigest, TileGrid, CHANNEL_COUNT};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn fp(id: usize, tiles: TileGrid, digest: ContentDigest) -> ImageFingerprint {
        ImageFingerprint {
            entry_id: id,
            width: 224,
            height: 224,
            tiles,
            digest,
        }
    }

    fn uniform(id: usize, v: u8) -> ImageFingerprint {
        fp(id, TileGrid::uniform([v; 3]), content_digest(&[v, id as u8]))
    }

    fn random_fp(rng: &mut ChaCha8Rng, id: usize) -> ImageFingerprint {
        let mut ch = [0u8; CHANNEL_COUNT];
        rng.fill(&mut ch[..]);
        fp(id, TileGrid::from_channels(&ch).unwrap(), content_digest(&ch))
    }

    /// Hand computation of S for two uniform-colour fingerprints.
    fn scalar_oracle(a: [u8; 3], b: [u8; 3]) -> f64 {
        let per_tile: f64 = (0..3).map(|c| (a[c] as f64 - b[c] as f64).abs()).sum();
        (100.0 - per_tile).max(0.0)
    }

    fn index_of(n: usize, tag: impl Fn(usize) -> (SetTag, ClassLabel)) -> DatasetIndex {
        DatasetIndex::from_entries(
            (0..n)
                .map(|i| {
                    let (set_tag, class_label) = tag(i);
                    ImageEntry {
                        id: i,
                        path: PathBuf::from(format!("/d/{i:04}.png")),
                        rel_path: format!("{i:04}.png"),
                        set_tag,
                        class_label,
                        byte_size: 1,
                        mtime: 0,
                    }
                })
                .collect(),
        )
    }

    #[test]
    fn identical_scores_100() {
        let a = uniform(0, 77);
        let s = tile_score(&a, &a);
        assert_eq!(s.diff_sum(), 0);
        assert_eq!(s.percent(), 100.0);
    }

    #[test]
    fn black_white_clamps_to_zero() {
        let s = tile_score(&uniform(0, 0), &uniform(1, 255));
        assert_eq!(s.difference(), 765.0);
        assert_eq!(s.percent(), 0.0);
    }

    #[test]
    fn uniform_offset_of_thirty() {
        let s = tile_score(&uniform(0, 100), &uniform(1, 130));
        assert_eq!(s.difference(), 90.0);
        assert_eq!(s.percent(), scalar_oracle([100; 3], [130; 3]));
        assert_eq!(s.percent(), 10.0);
    }

    #[test]
    fn threshold_bounds() {
        assert!(Threshold::new(0).is_err());
        assert!(Threshold::new(101).is_err());
        assert_eq!(Threshold::new(1).unwrap().budget(), 225 * 99);
        assert_eq!(Threshold::MAX.budget(), 0);
        assert_eq!("80%".parse::<Threshold>().unwrap().value(), 80);
        assert_eq!(parse_thresholds("60, 65,100").unwrap().len(), 3);
        assert!(parse_thresholds("60,abc").is_err());
    }

    #[test]
    fn meets_is_exact_at_the_boundary() {
        // D = 17 exactly -> S = 83
        let s = SimilarityScore::from_diff_sum(17 * 225);
        assert!(s.meets(Threshold::new(83).unwrap()));
        assert!(!s.meets(Threshold::new(84).unwrap()));
        let s = SimilarityScore::from_diff_sum(17 * 225 + 1);
        assert!(!s.meets(Threshold::new(83).unwrap()));
    }

    #[test]
    fn byte_identity_required_at_100() {
        let a = uniform(0, 50);
        let copy = fp(1, a.tiles.clone(), a.digest);
        let reencoded = fp(1, a.tiles.clone(), content_digest(b"other bytes"));
        let index = index_of(2, |_| (SetTag::Train, ClassLabel::Unlabelled));
        let t100 = Threshold::MAX;
        let t99 = Threshold::new(99).unwrap();
        assert_eq!(match_pairs(&[a.clone(), copy], t100, Scope::All, &index).len(), 1);
        assert_eq!(tile_score(&a, &reencoded).diff_sum(), 0);
        assert!(match_pairs(&[a.clone(), reencoded.clone()], t100, Scope::All, &index).is_empty());
        assert_eq!(match_pairs(&[a, reencoded], t99, Scope::All, &index).len(), 1);
    }

    #[test]
    fn black_white_bails_within_twelve_tiles() {
        // oracle: count tiles until the running sum exceeds 225 * 40 = 9000
        let mut running = 0;
        let mut oracle = 0;
        while running <= 9000 {
            running += 765;
            oracle += 1;
        }
        assert_eq!(oracle, 12);
        let (score, visited) =
            early_bail_trace(&uniform(0, 0), &uniform(1, 255), Threshold::new(60).unwrap());
        assert_eq!(score, None);
        assert_eq!(visited, oracle);
    }

    #[test]
    fn identical_never_bails() {
        let a = uniform(0, 9);
        for t in Threshold::DEFAULT_LADDER {
            assert_eq!(early_bail_score(&a, &a, t), Some(SimilarityScore::IDENTICAL));
        }
    }

    #[test]
    fn early_bail_agrees_with_exhaustive_scoring() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let base: Vec<_> = (0..20).map(|i| random_fp(&mut rng, i)).collect();
        // small perturbations so that matches actually occur
        let mut pairs = Vec::new();
        for i in 0..300 {
            let a = &base[i % base.len()];
            let mut ch = *a.tiles.channels();
            let spread = rng.gen_range(0..60u8);
            for v in ch.iter_mut() {
                *v = v.saturating_add(rng.gen_range(0..=spread));
            }
            pairs.push((a.clone(), fp(1, TileGrid::from_channels(&ch).unwrap(), a.digest)));
        }
        for (a, b) in &pairs {
            for t in 1..=100 {
                let t = Threshold::new(t).unwrap();
                let full = tile_score(a, b);
                let bail = early_bail_score(a, b, t);
                assert_eq!(bail.is_some(), full.meets(t));
                if let Some(s) = bail {
                    assert_eq!(s, full);
                }
            }
        }
    }

    #[test]
    fn scopes_filter_pairs() {
        let tiles = TileGrid::uniform([10; 3]);
        let fps: Vec<_> = (0..4)
            .map(|i| fp(i, tiles.clone(), content_digest(&[i as u8])))
            .collect();
        let index = index_of(4, |i| match i {
            0 => (SetTag::Train, ClassLabel::Infection),
            1 => (SetTag::Train, ClassLabel::None),
            2 => (SetTag::Test, ClassLabel::Infection),
            _ => (SetTag::Test, ClassLabel::Unlabelled),
        });
        let t = Threshold::new(90).unwrap();
        let all = match_pairs(&fps, t, Scope::All, &index);
        assert_eq!(all.len(), 6);
        let cross_set = match_pairs(&fps, t, Scope::CrossSetOnly, &index);
        let pairs: Vec<_> = cross_set.iter().map(|r| (r.first, r.second)).collect();
        assert_eq!(pairs, [(0, 2), (0, 3), (1, 2), (1, 3)]);
        assert!(cross_set.iter().all(|r| r.cross_set));
        let cross_class = match_pairs(&fps, t, Scope::CrossClassOnly, &index);
        let pairs: Vec<_> = cross_class.iter().map(|r| (r.first, r.second)).collect();
        assert_eq!(pairs, [(0, 1), (1, 2)]);
        assert!(cross_class.iter().all(|r| r.cross_class));
    }

    #[test]
    fn match_csv_format() {
        let index = index_of(2, |_| (SetTag::Train, ClassLabel::Unlabelled));
        let recs = match_pairs(
            &[uniform(0, 100), uniform(1, 104)],
            Threshold::new(60).unwrap(),
            Scope::All,
            &index,
        );
        let mut buf = Vec::new();
        write_matches_csv(&mut buf, &recs, &index).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "first,second,score,cross_set,cross_class\n0000.png,0001.png,88.000,false,false\n"
        );
    }

    fn arb_fp() -> impl Strategy<Value = ImageFingerprint> {
        proptest::collection::vec(any::<u8>(), CHANNEL_COUNT).prop_map(|ch| {
            fp(0, TileGrid::from_channels(&ch).unwrap(), content_digest(&ch))
        })
    }

    proptest! {
        #[test]
        fn score_is_symmetric_with_exact_identity(a in arb_fp(), b in arb_fp()) {
            prop_assert_eq!(tile_score(&a, &b), tile_score(&b, &a));
            prop_assert_eq!(tile_score(&a, &a).percent(), 100.0);
            let p = tile_score(&a, &b).percent();
            prop_assert!((0.0..=100.0).contains(&p));
        }

        #[test]
        fn match_sets_are_nested(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = random_fp(&mut rng, 0);
            let fps: Vec<_> = (0..25).map(|i| {
                let mut ch = *base.tiles.channels();
                let spread = rng.gen_range(0..80u8);
                for v in ch.iter_mut() { *v = v.saturating_add(rng.gen_range(0..=spread)); }
                fp(i, TileGrid::from_channels(&ch).unwrap(), content_digest(&[i as u8]))
            }).collect();
            let index = index_of(25, |_| (SetTag::Train, ClassLabel::Unlabelled));
            let ladder = Threshold::DEFAULT_LADDER;
            let sets: Vec<Vec<(usize, usize)>> = ladder.iter().map(|t| {
                match_pairs(&fps, *t, Scope::All, &index).iter().map(|r| (r.first, r.second)).collect()
            }).collect();
            for w in sets.windows(2) {
                prop_assert!(w[1].iter().all(|p| w[0].contains(p)));
            }
            for (t, set) in ladder.iter().zip(&sets) {
                let lowest = match_pairs(&fps, ladder[0], Scope::All, &index);
                let filtered: Vec<_> = filter_matches(&lowest, *t).iter().map(|r| (r.first, r.second)).collect();
                prop_assert_eq!(&filtered, set);
            }
        }
    }
}
