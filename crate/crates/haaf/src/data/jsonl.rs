//! JSONL bag storage: one JSON object per line, value-exact round trips.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::DataError;
use crate::models::Bag;

pub fn write_bags(bags: &[Bag], path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    for bag in bags {
        serde_json::to_writer(&mut w, bag)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_bags(path: &Path) -> Result<Vec<Bag>, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut bags = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bag: Bag = serde_json::from_str(&line).map_err(|source| DataError::MalformedLine {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        bag.validate().map_err(|source| DataError::InvalidBag {
            path: path.display().to_string(),
            line: i + 1,
            source,
        })?;
        bags.push(bag);
    }
    Ok(bags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_bags, GenConfig};

    fn sample_bags() -> Vec<Bag> {
        generate_bags(&GenConfig {
            n_bags: 100,
            bag_size_min: 1,
            bag_size_max: 6,
            patch: 4,
            k_tabular: 3,
            distractor_dims: 2,
            ..GenConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn round_trip_is_value_exact() {
        let bags = sample_bags();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bags.jsonl");
        write_bags(&bags, &path).unwrap();
        let loaded = read_bags(&path).unwrap();
        assert_eq!(bags, loaded);
    }

    #[test]
    fn double_write_is_byte_identical() {
        let bags = sample_bags();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_bags(&bags, &p1).unwrap();
        write_bags(&bags, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_line_reports_line_number() {
        let bags = sample_bags();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bags.jsonl");
        write_bags(&bags[..3], &path).unwrap();
        let mut content = std::fs::read_to_string(&path).unwrap();
        content.truncate(content.len() - 10);
        std::fs::write(&path, content).unwrap();
        match read_bags(&path) {
            Err(DataError::MalformedLine { line: 3, .. }) => {}
            other => panic!("expected malformed line 3, got {other:?}"),
        }
    }

    #[test]
    fn empty_instance_list_is_rejected_on_read() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(
            &path,
            "{\"bag_id\":\"x\",\"label\":0,\"tabular\":[0.0],\"instances\":[]}\n",
        )
        .unwrap();
        match read_bags(&path) {
            Err(DataError::InvalidBag { line: 1, .. }) => {}
            other => panic!("expected invalid bag on line 1, got {other:?}"),
        }
    }

    #[test]
    fn inconsistent_instance_lengths_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ragged.jsonl");
        std::fs::write(
            &path,
            "{\"bag_id\":\"x\",\"label\":1,\"tabular\":[0.5],\"instances\":[[0.1,0.2],[0.3]]}\n",
        )
        .unwrap();
        assert!(matches!(read_bags(&path), Err(DataError::InvalidBag { line: 1, .. })));
    }
}
