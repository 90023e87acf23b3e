//! JSON-lines dataset snapshots, one sample per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, ModalSample, Standardizer};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Serialize)]
struct LineOut<'a> {
    split: Split,
    sample: &'a ModalSample,
}

#[derive(Deserialize)]
struct LineIn {
    split: Split,
    sample: ModalSample,
}

#[derive(Serialize, Deserialize)]
struct Header {
    target_mean: f64,
    target_std: f64,
    n_train: usize,
    n_test: usize,
}

pub fn write(dataset: &Dataset, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    let header = Header {
        target_mean: dataset.target_scale.mean,
        target_std: dataset.target_scale.std,
        n_train: dataset.train.len(),
        n_test: dataset.test.len(),
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    let lines = dataset
        .train
        .iter()
        .map(|s| (Split::Train, s))
        .chain(dataset.test.iter().map(|s| (Split::Test, s)));
    for (split, s) in lines {
        let line = LineOut { split, sample: s };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn read(path: &Path) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::Validation("empty snapshot".into()))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first)?;
    let mut ds = Dataset {
        train: Vec::with_capacity(header.n_train),
        test: Vec::with_capacity(header.n_test),
        target_scale: Standardizer {
            mean: header.target_mean,
            std: header.target_std,
        },
    };
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let parsed: LineIn = serde_json::from_str(&line)?;
        match parsed.split {
            Split::Train => ds.train.push(parsed.sample),
            Split::Test => ds.test.push(parsed.sample),
        }
    }
    if ds.train.len() != header.n_train || ds.test.len() != header.n_test {
        return Err(Error::Validation("snapshot sample counts disagree with header".into()));
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, Link, SyntheticConfig};

    #[test]
    fn snapshot_roundtrip() {
        let cfg = SyntheticConfig {
            n_train: 4,
            n_test: 2,
            ..SyntheticConfig::new(Link::Sech, 1)
        };
        let ds = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        write(&ds, &p).unwrap();
        assert_eq!(read(&p).unwrap(), ds);
    }
}
