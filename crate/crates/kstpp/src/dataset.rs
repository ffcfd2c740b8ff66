//! Dataset persistence.
//!
//! Datasets are JSON-lines files: the first line is a manifest, every
//! following line is one event sequence. The manifest pins the format
//! version, the domain, and (for synthetic data) the generator
//! configuration, so a fit can be reproduced from the file alone.

use crate::error::{Error, Result};
use crate::model::{Domain, EventSequence};
use crate::simulate::SynthConfig;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const DATA_FORMAT: &str = "kstpp-data-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: String,
    pub domain: Domain,
    /// Present when the file was produced by the bundled simulator.
    pub generator: Option<SynthConfig>,
    pub split: String,
    pub count: usize,
    pub seed: Option<u64>,
}

impl DatasetManifest {
    pub fn new(domain: Domain, split: &str, count: usize) -> Self {
        DatasetManifest {
            format_version: DATA_FORMAT.to_string(),
            domain,
            generator: None,
            split: split.to_string(),
            count,
            seed: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct SeqRecord {
    t: Vec<f64>,
    x: Vec<f64>,
    y: Vec<f64>,
}

fn record_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::InvalidRecord { path: path.display().to_string(), line, msg: msg.into() }
}

pub fn save_dataset(
    path: &Path,
    manifest: &DatasetManifest,
    seqs: &[EventSequence],
) -> Result<()> {
    if manifest.count != seqs.len() {
        return Err(Error::InvalidInput(format!(
            "manifest count {} does not match {} sequences",
            manifest.count,
            seqs.len()
        )));
    }
    if manifest.format_version != DATA_FORMAT {
        return Err(Error::UnsupportedFormat(manifest.format_version.clone()));
    }
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, manifest)?;
    w.write_all(b"\n")?;
    for seq in seqs {
        let rec = SeqRecord { t: seq.times().to_vec(), x: seq.xs().to_vec(), y: seq.ys().to_vec() };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<(DatasetManifest, Vec<EventSequence>)> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let first = match lines.next() {
        Some(l) => l?,
        None => return Err(record_err(path, 1, "empty file, expected a manifest line")),
    };
    let manifest: DatasetManifest = serde_json::from_str(&first)
        .map_err(|e| record_err(path, 1, format!("bad manifest: {}", e)))?;
    if manifest.format_version != DATA_FORMAT {
        return Err(Error::UnsupportedFormat(manifest.format_version.clone()));
    }
    manifest
        .domain
        .validate()
        .map_err(|e| record_err(path, 1, format!("bad domain: {}", e)))?;
    let mut seqs = Vec::with_capacity(manifest.count);
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SeqRecord = serde_json::from_str(&line)
            .map_err(|e| record_err(path, lineno, e.to_string()))?;
        let seq = EventSequence::new(rec.t, rec.x, rec.y, &manifest.domain)
            .map_err(|e| record_err(path, lineno, e.to_string()))?;
        seqs.push(seq);
    }
    if seqs.len() != manifest.count {
        return Err(record_err(
            path,
            1,
            format!("manifest promises {} sequences, file has {}", manifest.count, seqs.len()),
        ));
    }
    Ok((manifest, seqs))
}

#[derive(Debug, Clone)]
pub struct CsvImport {
    pub ids: Vec<String>,
    pub seqs: Vec<EventSequence>,
    pub domain: Domain,
}

const CSV_HEADER: &str = "seq_id,t,x,y";

/// Import event rows from a CSV file with header `seq_id,t,x,y`. Rows are
/// grouped by sequence id (first-appearance order) and sorted by time within
/// each group. When no domain is given, one is inferred from the data
/// extent.
pub fn import_csv(path: &Path, domain: Option<Domain>) -> Result<CsvImport> {
    let reader = BufReader::new(File::open(path)?);
    let mut ids: Vec<String> = Vec::new();
    let mut groups: Vec<Vec<(f64, f64, f64)>> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut saw_header = false;
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if !saw_header {
            if trimmed != CSV_HEADER {
                return Err(record_err(
                    path,
                    lineno,
                    format!("expected header '{}', found '{}'", CSV_HEADER, trimmed),
                ));
            }
            saw_header = true;
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').collect();
        if fields.len() != 4 {
            return Err(record_err(path, lineno, format!("expected 4 fields, found {}", fields.len())));
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .map_err(|_| record_err(path, lineno, format!("bad {} value '{}'", what, s.trim())))
        };
        let t = parse(fields[1], "t")?;
        let x = parse(fields[2], "x")?;
        let y = parse(fields[3], "y")?;
        let id = fields[0].trim().to_string();
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            ids.push(id);
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[slot].push((t, x, y));
    }
    if !saw_header {
        return Err(record_err(path, 1, "file has no header line"));
    }
    if groups.is_empty() {
        return Err(record_err(path, 1, "file has no event rows"));
    }
    for g in &mut groups {
        g.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    let domain = match domain {
        Some(d) => {
            d.validate()?;
            d
        }
        None => infer_domain(&groups)?,
    };
    let mut seqs = Vec::with_capacity(groups.len());
    for (id, g) in ids.iter().zip(&groups) {
        let t: Vec<f64> = g.iter().map(|r| r.0).collect();
        let x: Vec<f64> = g.iter().map(|r| r.1).collect();
        let y: Vec<f64> = g.iter().map(|r| r.2).collect();
        let seq = EventSequence::new(t, x, y, &domain).map_err(|e| {
            Error::InvalidInput(format!("sequence '{}' in {}: {}", id, path.display(), e))
        })?;
        seqs.push(seq);
    }
    Ok(CsvImport { ids, seqs, domain })
}

/// Tightest domain containing every row; degenerate spatial extents are
/// padded so the domain keeps positive area.
fn infer_domain(groups: &[Vec<(f64, f64, f64)>]) -> Result<Domain> {
    let mut t_max = f64::NEG_INFINITY;
    let mut x = (f64::INFINITY, f64::NEG_INFINITY);
    let mut y = (f64::INFINITY, f64::NEG_INFINITY);
    for g in groups {
        for &(t, px, py) in g {
            t_max = t_max.max(t);
            x = (x.0.min(px), x.1.max(px));
            y = (y.0.min(py), y.1.max(py));
        }
    }
    let pad = |(lo, hi): (f64, f64)| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
    Domain::new(t_max, pad(x), pad(y))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::{make_dataset, SynthConfig};
    use std::io::Write;

    fn sample() -> (DatasetManifest, Vec<EventSequence>) {
        let config = SynthConfig::syn1();
        let (seqs, _) = make_dataset(&config, 3, "test", 99).unwrap();
        let mut manifest = DatasetManifest::new(config.domain, "test", 3);
        manifest.generator = Some(config);
        manifest.seed = Some(99);
        (manifest, seqs)
    }

    #[test]
    fn round_trip_is_exact() {
        let (manifest, seqs) = sample();
        let file = tempfile::NamedTempFile::new().unwrap();
        save_dataset(file.path(), &manifest, &seqs).unwrap();
        let (m2, s2) = load_dataset(file.path()).unwrap();
        assert_eq!(manifest, m2);
        assert_eq!(seqs, s2);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let (mut manifest, seqs) = sample();
        let file = tempfile::NamedTempFile::new().unwrap();
        manifest.format_version = "kstpp-data-v0".into();
        assert!(matches!(
            save_dataset(file.path(), &manifest, &seqs),
            Err(Error::UnsupportedFormat(_))
        ));
        manifest.format_version = DATA_FORMAT.into();
        save_dataset(file.path(), &manifest, &seqs).unwrap();
        let text = std::fs::read_to_string(file.path()).unwrap();
        let tampered = text.replace("kstpp-data-v1", "kstpp-data-v9");
        std::fs::write(file.path(), tampered).unwrap();
        assert!(matches!(load_dataset(file.path()), Err(Error::UnsupportedFormat(v)) if v == "kstpp-data-v9"));
    }

    #[test]
    fn bad_record_reports_line_number() {
        let (manifest, seqs) = sample();
        let file = tempfile::NamedTempFile::new().unwrap();
        save_dataset(file.path(), &manifest, &seqs).unwrap();
        let mut text = std::fs::read_to_string(file.path()).unwrap();
        let second_start = text.find('\n').unwrap() + 1;
        let second_end = second_start + text[second_start..].find('\n').unwrap();
        text.replace_range(second_start..second_end, "{\"t\": [1.0], \"x\": [0.0]}");
        std::fs::write(file.path(), text).unwrap();
        match load_dataset(file.path()) {
            Err(Error::InvalidRecord { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected record error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn count_mismatch_is_rejected() {
        let (manifest, seqs) = sample();
        let file = tempfile::NamedTempFile::new().unwrap();
        save_dataset(file.path(), &manifest, &seqs).unwrap();
        let text = std::fs::read_to_string(file.path()).unwrap();
        let keep: Vec<&str> = text.lines().take(3).collect();
        std::fs::write(file.path(), keep.join("\n")).unwrap();
        assert!(matches!(load_dataset(file.path()), Err(Error::InvalidRecord { .. })));
    }

    #[test]
    fn csv_import_groups_sorts_and_infers() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "seq_id,t,x,y").unwrap();
        writeln!(file, "a,2.0,0.5,-0.25").unwrap();
        writeln!(file, "b,1.0,-1.0,0.0").unwrap();
        writeln!(file, "a,1.5,0.0,0.25").unwrap();
        writeln!(file, "b,3.0,1.0,0.5").unwrap();
        file.flush().unwrap();
        let imp = import_csv(file.path(), None).unwrap();
        assert_eq!(imp.ids, vec!["a", "b"]);
        assert_eq!(imp.seqs[0].times(), &[1.5, 2.0]);
        assert_eq!(imp.seqs[0].xs(), &[0.0, 0.5]);
        assert_eq!(imp.seqs[1].times(), &[1.0, 3.0]);
        assert_eq!(imp.domain.t_max, 3.0);
        assert_eq!(imp.domain.x_range, (-1.0, 1.0));
        assert_eq!(imp.domain.y_range, (-0.25, 0.5));
    }

    #[test]
    fn csv_rejects_bad_header_and_values() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "id,time,x,y").unwrap();
        file.flush().unwrap();
        assert!(matches!(
            import_csv(file.path(), None),
            Err(Error::InvalidRecord { line: 1, .. })
        ));

        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "seq_id,t,x,y").unwrap();
        writeln!(file, "a,1.0,0.0,0.0").unwrap();
        writeln!(file, "a,oops,0.0,0.0").unwrap();
        file.flush().unwrap();
        assert!(matches!(
            import_csv(file.path(), None),
            Err(Error::InvalidRecord { line: 3, .. })
        ));
    }

    #[test]
    fn csv_respects_explicit_domain() {
        let mut file = tempfile::NamedTempFile::new().unwrap();
        writeln!(file, "seq_id,t,x,y").unwrap();
        writeln!(file, "a,1.0,0.0,0.0").unwrap();
        file.flush().unwrap();
        let d = Domain::new(10.0, (-2.0, 2.0), (-2.0, 2.0)).unwrap();
        let imp = import_csv(file.path(), Some(d)).unwrap();
        assert_eq!(imp.domain, d);
        // events outside the stated domain are an error, not silently kept
        let tight = Domain::new(0.5, (-2.0, 2.0), (-2.0, 2.0)).unwrap();
        assert!(import_csv(file.path(), Some(tight)).is_err());
    }
}
