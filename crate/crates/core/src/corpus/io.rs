//! Line-delimited dataset files.
//!
//! One record per line, four tab-separated fields: source tokens
//! (space-joined), target tokens (space-joined), source domain id, target
//! domain id.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::{KeywordPair, Vocabulary};
use crate::error::{Error, Result};

/// A dataset record in token-string form.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TextRecord {
    pub source: Vec<String>,
    pub target: Vec<String>,
    pub source_domain: usize,
    pub target_domain: usize,
}

fn check_token(tok: &str) -> Result<()> {
    if tok.is_empty() || tok.contains(['\t', '\n', '\r', ' ']) {
        return Err(Error::Invalid(format!(
            "token {tok:?} cannot be written: empty or contains a separator"
        )));
    }
    Ok(())
}

pub fn format_record(r: &TextRecord) -> Result<String> {
    for t in r.source.iter().chain(&r.target) {
        check_token(t)?;
    }
    Ok(format!(
        "{}\t{}\t{}\t{}",
        r.source.join(" "),
        r.target.join(" "),
        r.source_domain,
        r.target_domain
    ))
}

pub fn parse_record(line: &str, path: &str, lineno: usize) -> Result<TextRecord> {
    let err = |msg: String| Error::Format {
        path: path.to_string(),
        line: lineno,
        msg,
    };
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 4 {
        return Err(err(format!("expected 4 tab-separated fields, found {}", fields.len())));
    }
    let tokens = |s: &str| -> Vec<String> { s.split(' ').filter(|t| !t.is_empty()).map(String::from).collect() };
    let source = tokens(fields[0]);
    let target = tokens(fields[1]);
    if source.is_empty() || target.is_empty() {
        return Err(err("empty keyword".into()));
    }
    let domain = |s: &str| -> Result<usize> { s.trim().parse().map_err(|_| err(format!("invalid domain id {s:?}"))) };
    Ok(TextRecord {
        source,
        target,
        source_domain: domain(fields[2])?,
        target_domain: domain(fields[3])?,
    })
}

pub fn write_records(path: &Path, records: &[TextRecord]) -> Result<()> {
    let lines = records.iter().map(format_record).collect::<Result<Vec<_>>>()?;
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for line in lines {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<TextRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        out.push(parse_record(&line, &name, i + 1)?);
    }
    Ok(out)
}

pub fn to_record(vocab: &Vocabulary, p: &KeywordPair) -> TextRecord {
    let strs = |ids: &[usize]| ids.iter().map(|&i| vocab.token(i).to_string()).collect();
    TextRecord {
        source: strs(&p.source),
        target: strs(&p.target),
        source_domain: p.source_domain,
        target_domain: p.target_domain,
    }
}

pub fn write_pairs(path: &Path, vocab: &Vocabulary, pairs: &[KeywordPair]) -> Result<()> {
    let records: Vec<_> = pairs.iter().map(|p| to_record(vocab, p)).collect();
    write_records(path, &records)
}

/// Read pairs, resolving tokens against `vocab`. Unknown or reserved
/// tokens and out-of-range domains are errors naming the line.
pub fn read_pairs(path: &Path, vocab: &Vocabulary) -> Result<Vec<KeywordPair>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let name = path.display().to_string();
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let r = parse_record(&line, &name, lineno)?;
        let err = |msg: String| Error::Format {
            path: name.clone(),
            line: lineno,
            msg,
        };
        let ids = |toks: &[String]| -> Result<Vec<usize>> {
            toks.iter()
                .map(|t| match vocab.id(t) {
                    Some(id) if !vocab.is_reserved(id) => Ok(id),
                    _ => Err(err(format!("unknown token {t:?}"))),
                })
                .collect()
        };
        let k = vocab.num_domains();
        if r.source_domain >= k || r.target_domain >= k {
            return Err(err(format!("domain id out of range for k = {k}")));
        }
        out.push(KeywordPair {
            source: ids(&r.source)?,
            target: ids(&r.target)?,
            source_domain: r.source_domain,
            target_domain: r.target_domain,
        });
    }
    Ok(out)
}

/// Source keywords, one per line; only the first tab field is used, so a
/// dataset file works as well. Unknown tokens map to `UNK`.
pub fn read_sources(path: &Path, vocab: &Vocabulary) -> Result<Vec<Vec<usize>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let first = line.split('\t').next().unwrap_or("");
        let toks: Vec<&str> = first.split_whitespace().collect();
        if toks.is_empty() {
            if line.trim().is_empty() {
                continue;
            }
            return Err(Error::Format {
                path: path.display().to_string(),
                line: i + 1,
                msg: "empty source keyword".into(),
            });
        }
        out.push(vocab.encode(&toks));
    }
    Ok(out)
}
