//! Interaction logs, chronological splits, fixed-capacity histories and
//! negative sampling.

mod negatives;
mod storage;
mod synthetic;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::PADDING;

pub use negatives::sample_negatives;
pub use storage::{load_split, save_split};
pub use synthetic::{generate_synthetic, PlantedStructure, SyntheticConfig};

/// Default history capacity.
pub const DEFAULT_CAPACITY: usize = 20;

#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub user_id: String,
    pub item_id: String,
    pub timestamp: i64,
    pub rating: Option<f64>,
}

/// A target item with the history that precedes it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InteractionSequence {
    pub user_index: u32,
    /// Exactly `capacity` entries; positions at and after `valid_length`
    /// hold the padding index.
    pub item_indices: Vec<u32>,
    pub valid_length: u32,
    pub target_item: u32,
    /// Not serialised; present for splits built in memory.
    pub target_timestamp: Option<i64>,
}

impl InteractionSequence {
    pub fn history(&self) -> &[u32] {
        &self.item_indices[..self.valid_length as usize]
    }
}

/// Bijective maps between raw ids and dense indices. Item index 0 is the
/// padding index and has no raw id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocabulary {
    pub users: Vec<String>,
    /// `items[i]` is the raw id of item index `i + 1`.
    pub items: Vec<String>,
}

impl Vocabulary {
    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn item_id(&self, index: u32) -> Option<&str> {
        (index != PADDING).then(|| self.items.get(index as usize - 1).map(String::as_str))?
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<InteractionSequence>,
    pub validation: Vec<InteractionSequence>,
    pub test: Vec<InteractionSequence>,
    pub vocab: Vocabulary,
    pub capacity: usize,
    pub padding_index: u32,
    /// Ground truth of a synthetic corpus.
    pub planted: Option<PlantedStructure>,
}

impl DatasetSplit {
    /// Every item each user interacted with, sorted and deduplicated. Built
    /// from the targets and histories of all three segments, which together
    /// cover a user's full log.
    pub fn user_items(&self) -> Vec<Vec<u32>> {
        let mut out = vec![Vec::new(); self.vocab.num_users()];
        for s in self.train.iter().chain(&self.validation).chain(&self.test) {
            let items = &mut out[s.user_index as usize];
            items.extend_from_slice(s.history());
            items.push(s.target_item);
        }
        for items in &mut out {
            items.sort_unstable();
            items.dedup();
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    Csv,
    Tsv,
}

impl Format {
    fn delimiter(self) -> u8 {
        match self {
            Format::Csv => b',',
            Format::Tsv => b'\t',
        }
    }

    /// Guesses from the file extension, defaulting to CSV.
    pub fn from_path(path: &Path) -> Format {
        match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("tab") => Format::Tsv,
            _ => Format::Csv,
        }
    }
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "tsv" => Ok(Format::Tsv),
            other => Err(Error::Config(format!("unknown format `{other}`"))),
        }
    }
}

impl fmt::Display for Format {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Format::Csv => "csv",
            Format::Tsv => "tsv",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Column {
    User,
    Item,
    Timestamp,
    Rating,
}

impl Column {
    fn from_header(name: &str) -> Option<Column> {
        match name.trim() {
            "user_id" => Some(Column::User),
            "item_id" => Some(Column::Item),
            "timestamp" => Some(Column::Timestamp),
            "rating" => Some(Column::Rating),
            _ => None,
        }
    }
}

/// Reads a log whose first row is a header naming the columns `user_id`,
/// `item_id`, `timestamp` and optionally `rating`.
pub fn load_interactions(path: &Path, format: Format) -> Result<Vec<Interaction>> {
    read_log(path, format, None)
}

/// Reads a log without a header, with columns in the given order.
pub fn load_interactions_with_columns(path: &Path, format: Format, columns: &[Column]) -> Result<Vec<Interaction>> {
    read_log(path, format, Some(columns))
}

fn read_log(path: &Path, format: Format, columns: Option<&[Column]>) -> Result<Vec<Interaction>> {
    let display = path.display().to_string();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .delimiter(format.delimiter())
        .has_headers(false)
        .flexible(true)
        .from_reader(std::io::BufReader::new(file));
    let parse_err = |line: usize, column: usize, message: String| Error::Parse {
        path: display.clone(),
        line,
        column,
        message,
    };
    let mut records = reader.records();
    let layout: Vec<Option<Column>> = match columns {
        Some(c) => c.iter().copied().map(Some).collect(),
        None => match records.next() {
            None => return Ok(Vec::new()),
            Some(header) => {
                let header = header.map_err(|e| parse_err(1, 1, e.to_string()))?;
                header.iter().map(Column::from_header).collect()
            }
        },
    };
    let find = |c: Column| layout.iter().position(|&x| x == Some(c));
    let (Some(user), Some(item), Some(ts)) = (find(Column::User), find(Column::Item), find(Column::Timestamp)) else {
        return Err(parse_err(1, 1, "header must name user_id, item_id and timestamp".into()));
    };
    let rating = find(Column::Rating);
    let mut out = Vec::new();
    for record in records {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, 1, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() == 1 && record[0].trim().is_empty() {
            continue;
        }
        if record.len() < layout.len() {
            return Err(parse_err(
                line,
                record.len() + 1,
                format!("expected {} fields, found {}", layout.len(), record.len()),
            ));
        }
        let timestamp: i64 = record[ts]
            .trim()
            .parse()
            .map_err(|_| parse_err(line, ts + 1, format!("invalid timestamp `{}`", &record[ts])))?;
        if timestamp < 0 {
            return Err(parse_err(line, ts + 1, "timestamp must be non-negative".into()));
        }
        let rating = match rating {
            None => None,
            Some(col) => {
                let r: f64 = record[col]
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(line, col + 1, format!("invalid rating `{}`", &record[col])))?;
                if !(1.0..=5.0).contains(&r) {
                    return Err(parse_err(line, col + 1, format!("rating {r} outside [1, 5]")));
                }
                Some(r)
            }
        };
        out.push(Interaction {
            user_id: record[user].to_string(),
            item_id: record[item].to_string(),
            timestamp,
            rating,
        });
    }
    Ok(out)
}

/// Filters, indexes and splits a log.
///
/// Interactions rated at or below `min_rating` are dropped (unrated ones are
/// kept), then users with fewer than two interactions. Each user's log is
/// sorted by timestamp with ties in input order and cut at the `ratios`
/// boundaries. Every interaction after the first becomes a target paired
/// with the most recent `capacity` items before it; the segment holding the
/// target decides the split.
pub fn filter_and_split(
    raw: &[Interaction],
    min_rating: f64,
    ratios: (u32, u32, u32),
    capacity: usize,
) -> Result<DatasetSplit> {
    let total = ratios.0 as u64 + ratios.1 as u64 + ratios.2 as u64;
    if ratios.0 == 0 || ratios.1 == 0 || ratios.2 == 0 {
        return Err(Error::Config("split ratios must be positive".into()));
    }
    if capacity == 0 {
        return Err(Error::Config("capacity must be positive".into()));
    }
    let kept = raw.iter().filter(|r| r.rating.is_none_or(|v| v > min_rating));

    let mut user_order: Vec<&str> = Vec::new();
    let mut by_user: HashMap<&str, Vec<&Interaction>> = HashMap::new();
    for r in kept {
        let entry = by_user.entry(r.user_id.as_str()).or_default();
        if entry.is_empty() {
            user_order.push(r.user_id.as_str());
        }
        entry.push(r);
    }
    user_order.retain(|u| by_user[u].len() >= 2);
    if user_order.is_empty() {
        return Err(Error::NoUsers);
    }

    let mut vocab = Vocabulary::default();
    let mut item_index: HashMap<&str, u32> = HashMap::new();
    for r in raw {
        if by_user.get(r.user_id.as_str()).is_some_and(|v| v.len() >= 2)
            && r.rating.is_none_or(|v| v > min_rating)
            && !item_index.contains_key(r.item_id.as_str())
        {
            vocab.items.push(r.item_id.clone());
            item_index.insert(r.item_id.as_str(), vocab.items.len() as u32);
        }
    }

    let mut split = DatasetSplit {
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
        vocab,
        capacity,
        padding_index: PADDING,
        planted: None,
    };
    for (u, user) in user_order.iter().enumerate() {
        split.vocab.users.push(user.to_string());
        let mut log = by_user[user].clone();
        log.sort_by_key(|r| r.timestamp);
        let items: Vec<u32> = log.iter().map(|r| item_index[r.item_id.as_str()]).collect();
        let stamps: Vec<i64> = log.iter().map(|r| r.timestamp).collect();
        push_user(&mut split, u as u32, &items, Some(&stamps), ratios, total);
    }
    Ok(split)
}

/// Appends the targets of one chronologically ordered log.
pub(crate) fn push_user(
    split: &mut DatasetSplit,
    user: u32,
    items: &[u32],
    stamps: Option<&[i64]>,
    ratios: (u32, u32, u32),
    total: u64,
) {
    let n = items.len() as u64;
    let train_end = (n * ratios.0 as u64 / total) as usize;
    let valid_end = (n * (ratios.0 + ratios.1) as u64 / total) as usize;
    let m = split.capacity;
    for t in 1..items.len() {
        let start = t.saturating_sub(m);
        let mut window = items[start..t].to_vec();
        let valid = window.len();
        window.resize(m, PADDING);
        let seq = InteractionSequence {
            user_index: user,
            item_indices: window,
            valid_length: valid as u32,
            target_item: items[t],
            target_timestamp: stamps.map(|s| s[t]),
        };
        if t < train_end {
            split.train.push(seq);
        } else if t < valid_end {
            split.validation.push(seq);
        } else {
            split.test.push(seq);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn interaction(user: &str, item: &str, ts: i64, rating: Option<f64>) -> Interaction {
        Interaction {
            user_id: user.into(),
            item_id: item.into(),
            timestamp: ts,
            rating,
        }
    }

    fn write(contents: &str, suffix: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::Builder::new().suffix(suffix).tempfile().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn loads_well_formed_rows() {
        let f = write("user_id,item_id,timestamp,rating\nu1,a,10,5\nu1,b,11,4\nu2,a,12,3\n", ".csv");
        let rows = load_interactions(f.path(), Format::Csv).unwrap();
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[2], interaction("u2", "a", 12, Some(3.0)));
    }

    #[test]
    fn loads_tsv_without_rating() {
        let f = write("item_id\tuser_id\ttimestamp\nx\tu\t5\n", ".tsv");
        let rows = load_interactions(f.path(), Format::from_path(f.path())).unwrap();
        assert_eq!(rows, vec![interaction("u", "x", 5, None)]);
    }

    #[test]
    fn bad_rating_names_line_and_column() {
        let f = write("user_id,item_id,timestamp,rating\nu1,a,10,5\nu1,b,11,abc\n", ".csv");
        let err = load_interactions(f.path(), Format::Csv).unwrap_err();
        match err {
            Error::Parse { line, column, .. } => assert_eq!((line, column), (3, 4)),
            other => panic!("unexpected {other}"),
        }
        assert!(load_interactions(f.path(), Format::Csv)
            .unwrap_err()
            .to_string()
            .contains(":3:4:"));
    }

    #[test]
    fn empty_file_is_empty() {
        let f = write("", ".csv");
        assert!(load_interactions(f.path(), Format::Csv).unwrap().is_empty());
    }

    #[test]
    fn headerless_columns() {
        let f = write("u1,i1,4.0,100\nu1,i2,2.0,101\n", ".csv");
        let cols = [Column::User, Column::Item, Column::Rating, Column::Timestamp];
        let rows = load_interactions_with_columns(f.path(), Format::Csv, &cols).unwrap();
        assert_eq!(rows[1], interaction("u1", "i2", 101, Some(2.0)));
    }

    #[test]
    fn rating_filter_keeps_ratings_above_threshold() {
        let raw: Vec<_> = [1.0, 5.0, 5.0, 2.0, 4.0]
            .iter()
            .enumerate()
            .map(|(i, &r)| interaction("u", &format!("i{i}"), i as i64, Some(r)))
            .collect();
        let split = filter_and_split(&raw, 2.0, (7, 1, 2), 20).unwrap();
        assert_eq!(split.vocab.num_items(), 3);
        assert_eq!(split.user_items()[0], vec![1, 2, 3]);
    }

    #[test]
    fn single_interaction_users_are_removed() {
        let raw = vec![
            interaction("solo", "a", 1, None),
            interaction("pair", "a", 1, None),
            interaction("pair", "b", 2, None),
        ];
        let split = filter_and_split(&raw, 2.0, (7, 1, 2), 20).unwrap();
        assert_eq!(split.vocab.users, vec!["pair".to_string()]);
        assert!(matches!(
            filter_and_split(&raw[..1], 2.0, (7, 1, 2), 20),
            Err(Error::NoUsers)
        ));
    }

    #[test]
    fn ten_interactions_split_seven_one_two() {
        let raw: Vec<_> = (0..10).map(|i| interaction("u", &format!("i{i}"), 100 + i, None)).collect();
        let split = filter_and_split(&raw, 2.0, (7, 1, 2), 20).unwrap();
        // The first interaction has no history, so the train segment of
        // seven interactions yields six targets.
        assert_eq!((split.train.len(), split.validation.len(), split.test.len()), (6, 1, 2));
        assert_eq!(split.validation[0].target_item, 8);
        assert_eq!(split.test[0].history(), &[1, 2, 3, 4, 5, 6, 7, 8]);
    }

    #[test]
    fn ties_keep_input_order_and_capacity_keeps_last() {
        let raw: Vec<_> = (0..30).map(|i| interaction("u", &format!("i{i}"), i / 3, None)).collect();
        let split = filter_and_split(&raw, 2.0, (7, 1, 2), 4).unwrap();
        let last = split.test.last().unwrap();
        assert_eq!(last.item_indices, vec![26, 27, 28, 29]);
        assert_eq!(last.target_item, 30);
        let first = &split.train[0];
        assert_eq!(first.item_indices, vec![1, 0, 0, 0]);
        assert_eq!(first.valid_length, 1);
    }

    #[test]
    fn splits_never_leak() {
        let mut raw = Vec::new();
        for u in 0..20 {
            for k in 0..(3 + u % 11) {
                raw.push(interaction(&format!("u{u}"), &format!("i{}", (u * 7 + k * 3) % 17), ((k * 37) % 13) as i64, None));
            }
        }
        let split = filter_and_split(&raw, 2.0, (7, 1, 2), 5).unwrap();
        for u in 0..split.vocab.num_users() as u32 {
            let ts = |segment: &[InteractionSequence]| -> Vec<i64> {
                segment.iter().filter(|s| s.user_index == u).map(|s| s.target_timestamp.unwrap()).collect()
            };
            let (tr, va, te) = (ts(&split.train), ts(&split.validation), ts(&split.test));
            let max_tr = tr.iter().max().copied().unwrap_or(i64::MIN);
            let min_va = va.iter().min().copied().unwrap_or(i64::MAX);
            let max_va = va.iter().max().copied().unwrap_or(max_tr);
            let min_te = te.iter().min().copied().unwrap_or(i64::MAX);
            assert!(max_tr <= min_va && max_tr <= min_te && max_va <= min_te);
        }
        for s in split.train.iter().chain(&split.validation).chain(&split.test) {
            assert!(s.valid_length >= 1 && s.valid_length as usize <= 5);
            assert!(s.item_indices[s.valid_length as usize..].iter().all(|&i| i == PADDING));
            assert_ne!(s.target_item, PADDING);
        }
    }
}
