//! Tab-separated item lists:
//! `utt_id  speaker_id  path  channel  visit  condition`.
//!
//! `path` is relative to the manifest's directory unless absolute. `channel`
//! is a channel index or `*` for every channel. Blank lines and lines
//! starting with `#` are skipped.

use std::collections::HashSet;
use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ffsv_core::audio_io::{self, Waveform};
use ffsv_core::eval::channel_id;

use crate::config::UsageError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    All,
    Index(usize),
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Channel::All => f.write_str("*"),
            Channel::Index(k) => write!(f, "{k}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub utt_id: String,
    pub speaker_id: String,
    /// Path as written in the manifest.
    pub rel_path: String,
    /// Path resolved against the manifest directory.
    pub path: PathBuf,
    pub channel: Channel,
    pub visit: String,
    pub condition: String,
}

impl Row {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.utt_id, self.speaker_id, self.rel_path, self.channel, self.visit, self.condition
        )
    }
}

pub fn parse(text: &str, base: &Path, origin: &str) -> Result<Vec<Row>, UsageError> {
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let bad = |msg: String| UsageError(format!("{origin}:{}: {msg}", i + 1));
        let cols: Vec<&str> = trimmed.split('\t').map(str::trim).collect();
        if cols.len() != 6 {
            return Err(bad(format!("expected 6 tab-separated columns, found {}", cols.len())));
        }
        if cols.iter().any(|c| c.is_empty()) {
            return Err(bad("empty column".into()));
        }
        let channel = match cols[3] {
            "*" => Channel::All,
            k => Channel::Index(
                k.parse()
                    .map_err(|_| bad(format!("channel must be an index or '*', got {k:?}")))?,
            ),
        };
        if !seen.insert(cols[0].to_string()) {
            return Err(bad(format!("duplicate utt_id {:?}", cols[0])));
        }
        let rel = cols[2];
        let path = if Path::new(rel).is_absolute() {
            PathBuf::from(rel)
        } else {
            base.join(rel)
        };
        rows.push(Row {
            utt_id: cols[0].to_string(),
            speaker_id: cols[1].to_string(),
            rel_path: rel.to_string(),
            path,
            channel,
            visit: cols[4].to_string(),
            condition: cols[5].to_string(),
        });
    }
    Ok(rows)
}

pub fn load(path: &Path) -> Result<Vec<Row>, UsageError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read manifest {}: {e}", path.display())))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse(&text, base, &path.display().to_string())
}

/// Loads several manifests; utt ids must stay unique across all of them.
pub fn load_all(paths: &[PathBuf]) -> Result<Vec<Row>, UsageError> {
    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for p in paths {
        for r in load(p)? {
            if !seen.insert(r.utt_id.clone()) {
                return Err(UsageError(format!(
                    "utt_id {:?} appears in more than one manifest",
                    r.utt_id
                )));
            }
            rows.push(r);
        }
    }
    Ok(rows)
}

pub fn format(rows: &[Row]) -> String {
    let mut s = String::from("#utt_id\tspeaker_id\tpath\tchannel\tvisit\tcondition\n");
    for r in rows {
        s.push_str(&r.to_line());
        s.push('\n');
    }
    s
}

/// Audio of a row as `(id, waveform)` pairs at `rate`.
///
/// A single selected channel keeps the utt id; `*` on a multichannel file
/// yields `<utt>/ch<k>` ids.
pub fn load_audio(row: &Row, rate: u32) -> Result<Vec<(String, Waveform)>> {
    let chans = audio_io::read_wav(&row.path)
        .with_context(|| format!("reading {}", row.path.display()))?;
    let pick = |w: &Waveform| audio_io::resample(w, rate).map_err(anyhow::Error::from);
    match row.channel {
        Channel::Index(k) => {
            let w = chans.get(k).with_context(|| {
                format!("channel {k} requested but {} has {}", row.path.display(), chans.len())
            })?;
            Ok(vec![(row.utt_id.clone(), pick(w)?)])
        }
        Channel::All if chans.len() == 1 => Ok(vec![(row.utt_id.clone(), pick(&chans[0])?)]),
        Channel::All => chans
            .iter()
            .enumerate()
            .map(|(k, w)| Ok((channel_id(&row.utt_id, k), pick(w)?)))
            .collect(),
    }
}

/// The row's reference channel: the selected one, or channel 0 for `*`.
pub fn load_primary(row: &Row, rate: u32) -> Result<Waveform> {
    let chans = audio_io::read_wav(&row.path)
        .with_context(|| format!("reading {}", row.path.display()))?;
    let k = match row.channel {
        Channel::Index(k) => k,
        Channel::All => 0,
    };
    let w = chans
        .get(k)
        .with_context(|| format!("channel {k} requested but {} has {}", row.path.display(), chans.len()))?;
    Ok(audio_io::resample(w, rate)?)
}

/// Strips a `/ch<k>` suffix.
pub fn base_id(id: &str) -> &str {
    match id.rsplit_once("/ch") {
        Some((base, k)) if k.parse::<usize>().is_ok() => base,
        _ => id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_rows_and_comments() {
        let text = "# header\n\nu1\ts1\ta/u1.wav\t0\tv1\tclean\nu2\ts1\t/abs/u2.wav\t*\tv1\tfar\n";
        let rows = parse(text, Path::new("/data"), "m").unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].path, PathBuf::from("/data/a/u1.wav"));
        assert_eq!(rows[1].path, PathBuf::from("/abs/u2.wav"));
        assert_eq!(rows[1].channel, Channel::All);
        assert_eq!(format(&rows).lines().nth(1).unwrap(), text.lines().nth(2).unwrap());
    }

    #[test]
    fn rejects_bad_rows() {
        let base = Path::new(".");
        assert!(parse("u1\ts1\tx.wav\t0\tv\n", base, "m").is_err());
        assert!(parse("u1\ts1\tx.wav\tleft\tv\tc\n", base, "m").is_err());
        let dup = "u1\ts1\tx.wav\t0\tv\tc\nu1\ts2\ty.wav\t0\tv\tc\n";
        let e = parse(dup, base, "m").unwrap_err();
        assert!(e.0.contains("m:2"), "{e}");
    }

    #[test]
    fn base_ids() {
        assert_eq!(base_id("u1/ch3"), "u1");
        assert_eq!(base_id("u1"), "u1");
        assert_eq!(base_id("a/chx"), "a/chx");
    }
}
