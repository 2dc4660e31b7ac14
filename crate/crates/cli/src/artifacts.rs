//! CSV tables, JSON metric records and checkpoint headers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use ddlab_core::models::Checkpoint;
use serde::Serialize;

use crate::error::{CliError, CliResult};

/// Version written in every CSV header comment.
pub const CSV_VERSION: u32 = 1;

/// Formats an optional float; `None` becomes an empty cell.
pub fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// A CSV file whose first line is `# ddlab <kind> v<N> config_hash=<h> seed=<s>`.
pub struct CsvTable {
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvTable {
    pub fn create(path: &Path, kind: &str, hash: &str, seed: u64, columns: &[&str]) -> CliResult<Self> {
        let mut file = BufWriter::new(File::create(path)?);
        writeln!(file, "{}", header_comment(kind, hash, seed))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(columns)?;
        Ok(Self { writer })
    }

    /// Reopens `path` and keeps only the rows `keep` accepts.
    pub fn reopen(
        path: &Path,
        kind: &str,
        hash: &str,
        seed: u64,
        columns: &[&str],
        keep: impl Fn(&csv::StringRecord) -> bool,
    ) -> CliResult<Self> {
        let text = std::fs::read_to_string(path)?;
        if text.lines().next() != Some(header_comment(kind, hash, seed).as_str()) {
            return Err(CliError::Incompatible(format!(
                "{} was written by a different config",
                path.display()
            )));
        }
        let mut reader = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let rows: Vec<csv::StringRecord> = reader.records().collect::<Result<_, _>>()?;
        let mut table = Self::create(path, kind, hash, seed, columns)?;
        for row in rows.iter().filter(|r| keep(r)) {
            table.writer.write_record(row)?;
        }
        Ok(table)
    }

    pub fn row<I, S>(&mut self, cells: I) -> CliResult<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(cells)?;
        Ok(())
    }

    pub fn finish(mut self) -> CliResult<()> {
        self.writer.flush()?;
        Ok(())
    }
}

pub fn header_comment(kind: &str, hash: &str, seed: u64) -> String {
    format!("# ddlab {kind} v{CSV_VERSION} config_hash={hash} seed={seed}")
}

/// One evaluated metric; keys serialize in declaration order.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
pub struct MetricRecord {
    pub metric: String,
    pub value: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub stderr: Option<f64>,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metric record serializes")
    }
}

/// Stamps a checkpoint with the config that produced it.
pub fn stamp(ck: &mut Checkpoint, hash: &str, seed: u64) -> CliResult<()> {
    ck.set("config_hash", hash)?;
    ck.set("seed", seed)?;
    Ok(())
}

/// SHA-256 of a file's bytes.
pub fn file_digest(path: &Path) -> CliResult<String> {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metric_keys_are_ordered() {
        let r = MetricRecord {
            metric: "gm".into(),
            value: 0.5,
            stderr: Some(0.1),
            config_hash: "ab".into(),
            seed: 7,
        };
        assert_eq!(
            r.to_json(),
            r#"{"metric":"gm","value":0.5,"stderr":0.1,"config_hash":"ab","seed":7}"#
        );
        let r = MetricRecord { stderr: None, ..r };
        assert_eq!(
            r.to_json(),
            r#"{"metric":"gm","value":0.5,"config_hash":"ab","seed":7}"#
        );
    }

    #[test]
    fn tables_carry_a_versioned_header() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let mut t = CsvTable::create(&path, "demo", "h", 1, &["a", "b"]).unwrap();
        t.row(["1", &cell(None)]).unwrap();
        t.row(["2", &cell(Some(0.25))]).unwrap();
        t.finish().unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "# ddlab demo v1 config_hash=h seed=1\na,b\n1,\n2,0.25\n");
        let t = CsvTable::reopen(&path, "demo", "h", 1, &["a", "b"], |r| &r[0] == "1").unwrap();
        t.finish().unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "# ddlab demo v1 config_hash=h seed=1\na,b\n1,\n"
        );
        assert!(CsvTable::reopen(&path, "demo", "other", 1, &["a", "b"], |_| true).is_err());
    }
}
