//! Similarity groups: connected components of the match graph.
//!
//! Grouping is transitive. If A~B and B~C match, A and C share a group even
//! when A and C score below the threshold themselves.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use crate::dataset::DatasetIndex;
use crate::error::{Error, Result};
use crate::matcher::MatchRecord;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimilarityGroup {
    /// Sequential from 1, ordered by representative.
    pub group_id: usize,
    /// Entry ids, ascending.
    pub members: Vec<usize>,
}

impl SimilarityGroup {
    /// The canonically smallest member, kept by curation.
    pub fn representative(&self) -> usize {
        self.members[0]
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

struct DisjointSet {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

pub fn build_groups(matches: &[MatchRecord]) -> Vec<SimilarityGroup> {
    let mut slots: BTreeMap<usize, usize> = BTreeMap::new();
    for m in matches {
        for id in [m.first, m.second] {
            let next = slots.len();
            slots.entry(id).or_insert(next);
        }
    }
    let mut set = DisjointSet::new(slots.len());
    for m in matches {
        set.union(slots[&m.first], slots[&m.second]);
    }
    // BTreeMap iteration is ascending by id, so members come out sorted and
    // components are first seen at their representative.
    let mut by_root: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut order = Vec::new();
    for (&id, &slot) in &slots {
        let root = set.find(slot);
        let members = by_root.entry(root).or_default();
        if members.is_empty() {
            order.push(root);
        }
        members.push(id);
    }
    order
        .into_iter()
        .enumerate()
        .map(|(i, root)| SimilarityGroup {
            group_id: i + 1,
            members: by_root.remove(&root).unwrap_or_default(),
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct GroupStats {
    pub group_count: usize,
    /// Σ(|g| − 1): images a keep-first pass removes.
    pub similar_image_count: usize,
    /// Σ|g|.
    pub images_involved: usize,
}

pub fn group_stats(groups: &[SimilarityGroup]) -> GroupStats {
    let images_involved: usize = groups.iter().map(SimilarityGroup::len).sum();
    GroupStats {
        group_count: groups.len(),
        similar_image_count: images_involved - groups.len(),
        images_involved,
    }
}

pub const GROUP_CSV_HEADER: &str = "group_id,filename";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupRow {
    pub group_id: usize,
    pub filename: String,
}

pub fn group_rows(groups: &[SimilarityGroup], index: &DatasetIndex) -> Result<Vec<GroupRow>> {
    let mut rows = Vec::new();
    for g in groups {
        for &id in &g.members {
            let entry = index.get(id).ok_or(Error::IndexMismatch(id))?;
            rows.push(GroupRow {
                group_id: g.group_id,
                filename: entry.rel_path.clone(),
            });
        }
    }
    Ok(rows)
}

pub fn write_groups_csv<W: Write>(out: W, rows: &[GroupRow]) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(GROUP_CSV_HEADER.split(','))?;
    for r in rows {
        w.write_record([r.group_id.to_string().as_str(), &r.filename])?;
    }
    w.flush()
}

pub fn save_groups_csv(path: &Path, rows: &[GroupRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::write(path, e))?;
    write_groups_csv(std::io::BufWriter::new(file), rows).map_err(|e| Error::write(path, e))
}

pub fn load_groups_csv(path: &Path) -> Result<Vec<GroupRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let header = reader.headers().map_err(|e| Error::csv(path, e))?;
    if header.iter().collect::<Vec<_>>() != ["group_id", "filename"] {
        return Err(Error::format(path, "expected header group_id,filename"));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| Error::csv(path, e))?;
        let group_id = record[0]
            .parse()
            .map_err(|_| Error::format(path, format!("bad group id {:?}", &record[0])))?;
        rows.push(GroupRow {
            group_id,
            filename: record[1].to_string(),
        });
    }
    Ok(rows)
}
