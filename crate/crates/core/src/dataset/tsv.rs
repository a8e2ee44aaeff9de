use std::io::{BufRead, Write};

use super::{InteractionDataset, RawInteraction};
use crate::error::{Error, Result};

/// Parses one `user \t item \t behavior \t timestamp` line. Returns `None`
/// for blank and `#` comment lines.
pub fn parse_tsv_line(line: &str, line_no: usize) -> Result<Option<RawInteraction>> {
    let line = line.trim_end_matches(['\r', '\n']);
    if line.trim().is_empty() || line.starts_with('#') {
        return Ok(None);
    }
    let cols: Vec<&str> = line.split('\t').collect();
    if cols.len() != 4 {
        return Err(Error::Parse {
            line: line_no,
            message: format!("expected 4 tab-separated columns, found {}", cols.len()),
        });
    }
    let timestamp: i64 = cols[3].trim().parse().map_err(|_| Error::Parse {
        line: line_no,
        message: format!("invalid timestamp `{}`", cols[3]),
    })?;
    if timestamp < 0 {
        return Err(Error::Parse {
            line: line_no,
            message: format!("negative timestamp {timestamp}"),
        });
    }
    if cols[..3].iter().any(|c| c.is_empty()) {
        return Err(Error::Parse {
            line: line_no,
            message: "empty key".into(),
        });
    }
    Ok(Some(RawInteraction {
        user_key: cols[0].to_string(),
        item_key: cols[1].to_string(),
        behavior: cols[2].to_string(),
        timestamp: timestamp as u64,
    }))
}

/// Reads a whole TSV log; line numbers in errors are 1-based.
pub fn parse_tsv<R: BufRead>(reader: R) -> Result<Vec<RawInteraction>> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        if let Some(rec) = parse_tsv_line(&line?, k + 1)? {
            out.push(rec);
        }
    }
    Ok(out)
}

/// Writes every deduplicated record in first-occurrence order, so that
/// re-ingesting the output reproduces the same dataset.
pub fn write_tsv<W: Write>(ds: &InteractionDataset, w: &mut W) -> Result<()> {
    for r in ds.records() {
        writeln!(
            w,
            "{}\t{}\t{}\t{}",
            ds.user_keys()[r.user],
            ds.item_keys()[r.item],
            ds.behaviors()[r.behavior],
            r.timestamp
        )?;
    }
    Ok(())
}
