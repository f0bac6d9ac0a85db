//! On-disk split layout: `vocab.tsv` plus little-endian `train.bin`,
//! `valid.bin` and `test.bin`.

use std::fs;
use std::path::Path;

use super::{DatasetSplit, InteractionSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::model::PADDING;

const SEGMENTS: [&str; 3] = ["train.bin", "valid.bin", "test.bin"];

pub fn save_split(split: &DatasetSplit, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let vocab_path = dir.join("vocab.tsv");
    let mut out = String::new();
    out.push_str(&format!("#capacity\t{}\n#padding\t{}\n", split.capacity, split.padding_index));
    let check = |id: &str| {
        if id.contains(['\t', '\n', '\r']) {
            Err(Error::InvalidArgument(format!("id {id:?} contains a tab or newline")))
        } else {
            Ok(())
        }
    };
    for (i, u) in split.vocab.users.iter().enumerate() {
        check(u)?;
        out.push_str(&format!("user\t{i}\t{u}\n"));
    }
    for (i, it) in split.vocab.items.iter().enumerate() {
        check(it)?;
        out.push_str(&format!("item\t{}\t{it}\n", i + 1));
    }
    fs::write(&vocab_path, out).map_err(|e| Error::io(&vocab_path, e))?;

    for (name, segment) in SEGMENTS.iter().zip([&split.train, &split.validation, &split.test]) {
        let path = dir.join(name);
        let mut bytes = Vec::with_capacity(4 + segment.len() * 4 * (split.capacity + 3));
        let mut put = |v: u32| bytes.extend_from_slice(&v.to_le_bytes());
        put(segment.len() as u32);
        for s in segment.iter() {
            put(s.user_index);
            put(s.valid_length);
            for &i in &s.item_indices {
                put(i);
            }
            put(s.target_item);
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    }
    Ok(())
}

fn bad(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        column: 1,
        message: message.into(),
    }
}

pub fn load_split(dir: &Path) -> Result<DatasetSplit> {
    let vocab_path = dir.join("vocab.tsv");
    let text = fs::read_to_string(&vocab_path).map_err(|e| Error::io(&vocab_path, e))?;
    let mut capacity = None;
    let mut padding = PADDING;
    let mut vocab = Vocabulary::default();
    for (n, line) in text.lines().enumerate() {
        let fields: Vec<&str> = line.splitn(3, '\t').collect();
        let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&vocab_path, n + 1, format!("bad number `{s}`")));
        match fields.as_slice() {
            ["#capacity", v] => capacity = Some(num(v)?),
            ["#padding", v] => padding = num(v)? as u32,
            ["user", i, id] => {
                if num(i)? != vocab.users.len() {
                    return Err(bad(&vocab_path, n + 1, "user indices must be dense and ordered"));
                }
                vocab.users.push(id.to_string());
            }
            ["item", i, id] => {
                if num(i)? != vocab.items.len() + 1 {
                    return Err(bad(&vocab_path, n + 1, "item indices must be dense and ordered"));
                }
                vocab.items.push(id.to_string());
            }
            [""] => {}
            _ => return Err(bad(&vocab_path, n + 1, format!("unrecognised line `{line}`"))),
        }
    }
    let capacity = capacity.ok_or_else(|| bad(&vocab_path, 1, "missing #capacity"))?;
    if padding != PADDING {
        return Err(bad(&vocab_path, 2, format!("padding index {padding} unsupported")));
    }

    let mut segments = Vec::with_capacity(3);
    for name in SEGMENTS {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        if bytes.len() % 4 != 0 || bytes.is_empty() {
            return Err(Error::InvalidArgument(format!("{}: truncated", path.display())));
        }
        let words: Vec<u32> = bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let count = words[0] as usize;
        let stride = capacity + 3;
        if words.len() != 1 + count * stride {
            return Err(Error::InvalidArgument(format!(
                "{}: expected {count} records of {stride} words",
                path.display()
            )));
        }
        let mut seqs = Vec::with_capacity(count);
        for rec in words[1..].chunks_exact(stride) {
            let seq = InteractionSequence {
                user_index: rec[0],
                valid_length: rec[1],
                item_indices: rec[2..2 + capacity].to_vec(),
                target_item: rec[2 + capacity],
                target_timestamp: None,
            };
            let valid = seq.valid_length as usize;
            let in_range = |i: u32| i as usize <= vocab.items.len();
            if seq.user_index as usize >= vocab.users.len()
                || valid == 0
                || valid > capacity
                || seq.target_item == PADDING
                || !in_range(seq.target_item)
                || !seq.item_indices.iter().all(|&i| in_range(i))
                || seq.item_indices[valid..].iter().any(|&i| i != PADDING)
            {
                return Err(Error::InvalidArgument(format!("{}: malformed record", path.display())));
            }
            seqs.push(seq);
        }
        segments.push(seqs);
    }
    let test = segments.pop().expect("three segments");
    let validation = segments.pop().expect("three segments");
    let train = segments.pop().expect("three segments");
    Ok(DatasetSplit {
        train,
        validation,
        test,
        vocab,
        capacity,
        padding_index: PADDING,
        planted: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{filter_and_split, Interaction};

    fn sample_split() -> DatasetSplit {
        let raw: Vec<Interaction> = (0..40)
            .map(|k| Interaction {
                user_id: format!("user{}", k % 4),
                item_id: format!("item{}", (k * 7) % 11),
                timestamp: k as i64,
                rating: None,
            })
            .collect();
        filter_and_split(&raw, 2.0, (7, 1, 2), 4).unwrap()
    }

    fn strip(mut s: DatasetSplit) -> DatasetSplit {
        for seq in s.train.iter_mut().chain(&mut s.validation).chain(&mut s.test) {
            seq.target_timestamp = None;
        }
        s
    }

    #[test]
    fn round_trip_and_byte_identical_rerun() {
        let split = sample_split();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        save_split(&split, a.path()).unwrap();
        save_split(&sample_split(), b.path()).unwrap();
        for name in ["vocab.tsv", "train.bin", "valid.bin", "test.bin"] {
            assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap());
        }
        assert_eq!(load_split(a.path()).unwrap(), strip(split));
    }

    #[test]
    fn record_layout() {
        let split = sample_split();
        let dir = tempfile::tempdir().unwrap();
        save_split(&split, dir.path()).unwrap();
        let bytes = fs::read(dir.path().join("test.bin")).unwrap();
        assert_eq!(bytes.len(), 4 + split.test.len() * 4 * (4 + 3));
        assert_eq!(u32::from_le_bytes(bytes[..4].try_into().unwrap()) as usize, split.test.len());
        let first = &split.test[0];
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), first.user_index);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), first.valid_length);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_split(&sample_split(), dir.path()).unwrap();
        let path = dir.path().join("valid.bin");
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        fs::write(&path, bytes).unwrap();
        assert!(load_split(dir.path()).is_err());
    }
}
