//! On-disk formats.
//!
//! Binary embeddings: magic `SVE1`, u32 dim, u32 count, then per record a
//! u16 id byte length, the UTF-8 id, and dim little-endian f32 values.
//! All integers little-endian. Values are widened to f64 on load and rounded
//! to the nearest f32 on save.
//!
//! Text formats are line-based. TSV embeddings: `id<TAB>v0 v1 ...`.
//! Manifest TSV columns: id, speaker (`-` if unlabeled), duration, tempo
//! factor, comma-separated tags (`-` if none). Trial lines: `label enroll
//! test` with label in {1,0,-}. Score lines: `enroll test score`. Lines
//! starting with `#` and blank lines are skipped in every text format.
//!
//! Every writer goes through a temp file in the destination directory and a
//! rename, so a failed write never leaves a partial file behind.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::data::{
    AugTag, Embedding, EmbeddingSet, Manifest, ManifestRecord, ScoreSet, Trial, TrialLabel,
    TrialList, TrialScore,
};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"SVE1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingFormat {
    Binary,
    Tsv,
}

/// Sniffs the format from the leading magic bytes.
pub fn detect_embedding_format(path: &Path) -> Result<EmbeddingFormat> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() >= 4 && &bytes[..4] == MAGIC {
        Ok(EmbeddingFormat::Binary)
    } else {
        Ok(EmbeddingFormat::Tsv)
    }
}

pub fn load_embeddings(path: &Path, format: EmbeddingFormat) -> Result<EmbeddingSet> {
    match format {
        EmbeddingFormat::Binary => load_embeddings_binary(path),
        EmbeddingFormat::Tsv => load_embeddings_tsv(path),
    }
}

pub fn save_embeddings(path: &Path, set: &EmbeddingSet, format: EmbeddingFormat) -> Result<()> {
    match format {
        EmbeddingFormat::Binary => save_embeddings_binary(path, set),
        EmbeddingFormat::Tsv => save_embeddings_tsv(path, set),
    }
}

fn load_embeddings_binary(path: &Path) -> Result<EmbeddingSet> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::MalformedHeader {
        path: path.into(),
        msg: msg.into(),
    };
    if bytes.len() < 12 {
        return Err(bad("file shorter than the 12-byte header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("missing SVE1 magic"));
    }
    let dim = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if dim == 0 {
        return Err(bad("dimension 0"));
    }

    let mut set = EmbeddingSet::with_dim(dim)?;
    let mut off = 12;
    for rec in 0..count {
        let truncated = || Error::MalformedHeader {
            path: path.into(),
            msg: format!("unexpected end of file in record {rec}"),
        };
        if off + 2 > bytes.len() {
            return Err(truncated());
        }
        let id_len = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
        off += 2;
        if off + id_len + 4 * dim > bytes.len() {
            return Err(truncated());
        }
        let id = std::str::from_utf8(&bytes[off..off + id_len])
            .map_err(|_| Error::MalformedHeader {
                path: path.into(),
                msg: format!("record {rec}: id is not valid UTF-8"),
            })?
            .to_string();
        off += id_len;
        let mut vector = Vec::with_capacity(dim);
        for _ in 0..dim {
            let v = f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap());
            vector.push(v as f64);
            off += 4;
        }
        set.push(Embedding::new(id, vector))?;
    }
    if off != bytes.len() {
        return Err(bad("trailing bytes after the last record"));
    }
    Ok(set)
}

fn save_embeddings_binary(path: &Path, set: &EmbeddingSet) -> Result<()> {
    let dim = set.dim();
    if set.len() > u32::MAX as usize {
        return Err(Error::InvalidParameter("too many records for u32 count".into()));
    }
    let mut out = Vec::with_capacity(12 + set.len() * (2 + 16 + 4 * dim));
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(set.len() as u32).to_le_bytes());
    for e in set.iter() {
        if e.id.len() > u16::MAX as usize {
            return Err(Error::InvalidParameter(format!(
                "id '{}...' exceeds the u16 length field",
                &e.id[..32.min(e.id.len())]
            )));
        }
        out.extend_from_slice(&(e.id.len() as u16).to_le_bytes());
        out.extend_from_slice(e.id.as_bytes());
        for &v in &e.vector {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

fn load_embeddings_tsv(path: &Path) -> Result<EmbeddingSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut set = EmbeddingSet::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if skip_line(line) {
            continue;
        }
        let (id, rest) = line
            .split_once('\t')
            .ok_or_else(|| Error::parse(path, lineno, "expected id<TAB>values"))?;
        if id.is_empty() {
            return Err(Error::parse(path, lineno, "empty id"));
        }
        let mut vector = Vec::new();
        for tok in rest.split_whitespace() {
            let v: f64 = tok
                .parse()
                .map_err(|_| Error::parse(path, lineno, format!("bad float '{tok}'")))?;
            vector.push(v);
        }
        if vector.is_empty() {
            return Err(Error::parse(path, lineno, "no vector values"));
        }
        set.push(Embedding::new(id, vector))
            .map_err(|e| attach_line(e, path, lineno))?;
    }
    Ok(set)
}

fn save_embeddings_tsv(path: &Path, set: &EmbeddingSet) -> Result<()> {
    let mut out = String::new();
    for e in set.iter() {
        check_text_id(&e.id, true)?;
        out.push_str(&e.id);
        out.push('\t');
        for (i, v) in e.vector.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&format!("{v:.6}"));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut m = Manifest::new();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if skip_line(line) {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 5 tab-separated columns, got {}", cols.len()),
            ));
        }
        if cols[0].is_empty() {
            return Err(Error::parse(path, lineno, "empty id"));
        }
        let speaker = match cols[1] {
            "-" => None,
            "" => return Err(Error::parse(path, lineno, "empty speaker; use '-'")),
            s => Some(s.to_string()),
        };
        let duration: f64 = cols[2]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad duration '{}'", cols[2])))?;
        let tempo_factor: f64 = cols[3]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad tempo factor '{}'", cols[3])))?;
        let mut tags = Vec::new();
        if cols[4] != "-" {
            for t in cols[4].split(',') {
                let tag: AugTag = t
                    .parse()
                    .map_err(|e: String| Error::parse(path, lineno, e))?;
                tags.push(tag);
            }
        }
        m.push(ManifestRecord {
            id: cols[0].to_string(),
            speaker,
            duration,
            tempo_factor,
            tags,
        })
        .map_err(|e| attach_line(e, path, lineno))?;
    }
    Ok(m)
}

pub fn save_manifest(path: &Path, m: &Manifest) -> Result<()> {
    let mut out = String::new();
    for r in m.iter() {
        check_text_id(&r.id, true)?;
        if let Some(s) = &r.speaker {
            check_text_id(s, true)?;
        }
        let speaker = r.speaker.as_deref().unwrap_or("-");
        let tags = if r.tags.is_empty() {
            "-".to_string()
        } else {
            r.tags
                .iter()
                .map(|t| t.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        out.push_str(&format!(
            "{}\t{}\t{:.6}\t{}\t{}\n",
            r.id, speaker, r.duration, r.tempo_factor, tags
        ));
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_trials(path: &Path) -> Result<TrialList> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut list = TrialList::default();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if skip_line(line) {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 'label enroll test', got {} fields", fields.len()),
            ));
        }
        let label: TrialLabel = fields[0]
            .parse()
            .map_err(|e: String| Error::parse(path, lineno, e))?;
        list.push(Trial {
            label,
            enroll: fields[1].to_string(),
            test: fields[2].to_string(),
        });
    }
    Ok(list)
}

pub fn save_trials(path: &Path, trials: &TrialList) -> Result<()> {
    let mut out = String::new();
    for t in trials.iter() {
        check_text_id(&t.enroll, false)?;
        check_text_id(&t.test, false)?;
        out.push_str(&format!("{} {} {}\n", t.label, t.enroll, t.test));
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_scores(path: &Path) -> Result<ScoreSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut set = ScoreSet::default();
    for (lineno, line) in text.lines().enumerate() {
        let lineno = lineno + 1;
        if skip_line(line) {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected 'enroll test score', got {} fields", fields.len()),
            ));
        }
        let score: f64 = fields[2]
            .parse()
            .map_err(|_| Error::parse(path, lineno, format!("bad score '{}'", fields[2])))?;
        if !score.is_finite() {
            return Err(Error::parse(path, lineno, "non-finite score"));
        }
        set.push(TrialScore {
            enroll: fields[0].to_string(),
            test: fields[1].to_string(),
            score,
        });
    }
    Ok(set)
}

pub fn save_scores(path: &Path, scores: &ScoreSet) -> Result<()> {
    let mut out = String::new();
    for s in scores.iter() {
        check_text_id(&s.enroll, false)?;
        check_text_id(&s.test, false)?;
        if !s.score.is_finite() {
            return Err(Error::NonFinite {
                context: format!("score for ({}, {})", s.enroll, s.test),
            });
        }
        out.push_str(&format!("{} {} {:.6}\n", s.enroll, s.test, s.score));
    }
    write_atomic(path, out.as_bytes())
}

/// Writes via a temp file in the destination directory plus a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::io(path, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.flush().map_err(|e| Error::io(path, e))?;
    tmp.persist(path)
        .map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn skip_line(line: &str) -> bool {
    line.is_empty() || line.starts_with('#')
}

/// Tab and newline break every text format; space additionally breaks the
/// whitespace-separated ones. The binary format has no such limits.
fn check_text_id(id: &str, allow_space: bool) -> Result<()> {
    let bad = id
        .chars()
        .any(|c| c == '\t' || c == '\n' || c == '\r' || (!allow_space && c == ' '));
    if bad || id.is_empty() || id.starts_with('#') {
        return Err(Error::InvalidParameter(format!(
            "id '{id}' cannot be written to this text format"
        )));
    }
    Ok(())
}

fn attach_line(e: Error, path: &Path, lineno: usize) -> Error {
    match e {
        Error::Parse { .. } => e,
        other => Error::parse(path, lineno, other.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn f32_round(v: &[f64]) -> Vec<f64> {
        v.iter().map(|&x| x as f32 as f64).collect()
    }

    #[test]
    fn binary_round_trip_is_exact_for_f32_values() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.bin");
        let set = EmbeddingSet::from_entries(vec![
            Embedding::new("utt a", f32_round(&[0.25, -1.5, 3.0e-3])),
            Embedding::new("идентификатор", f32_round(&[1.0, 2.0, -0.125])),
        ])
        .unwrap();
        save_embeddings(&path, &set, EmbeddingFormat::Binary).unwrap();
        let loaded = load_embeddings(&path, EmbeddingFormat::Binary).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.dim(), 3);
        for (a, b) in set.iter().zip(loaded.iter()) {
            assert_eq!(a, b);
        }
        // Saving the loaded set reproduces the file byte for byte.
        let path2 = dir.path().join("emb2.bin");
        save_embeddings(&path2, &loaded, EmbeddingFormat::Binary).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn binary_rejects_bad_magic_and_truncation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.bin");

        fs::write(&path, b"NOPE\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        assert!(matches!(
            load_embeddings(&path, EmbeddingFormat::Binary),
            Err(Error::MalformedHeader { .. })
        ));

        let set =
            EmbeddingSet::from_entries(vec![Embedding::new("a", vec![1.0, 2.0])]).unwrap();
        save_embeddings(&path, &set, EmbeddingFormat::Binary).unwrap();
        let full = fs::read(&path).unwrap();
        fs::write(&path, &full[..full.len() - 3]).unwrap();
        assert!(matches!(
            load_embeddings(&path, EmbeddingFormat::Binary),
            Err(Error::MalformedHeader { .. })
        ));

        let mut extra = full.clone();
        extra.push(0);
        fs::write(&path, &extra).unwrap();
        assert!(matches!(
            load_embeddings(&path, EmbeddingFormat::Binary),
            Err(Error::MalformedHeader { .. })
        ));
    }

    #[test]
    fn binary_empty_set_keeps_declared_dimension() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        let set = EmbeddingSet::with_dim(16).unwrap();
        save_embeddings(&path, &set, EmbeddingFormat::Binary).unwrap();
        let loaded = load_embeddings(&path, EmbeddingFormat::Binary).unwrap();
        assert_eq!(loaded.len(), 0);
        assert_eq!(loaded.dim(), 16);
    }

    #[test]
    fn tsv_round_trip_within_write_precision() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        let set = EmbeddingSet::from_entries(vec![
            Embedding::new("a", vec![0.123456789, -2.5]),
            Embedding::new("b c", vec![1.0, 0.000001]),
        ])
        .unwrap();
        save_embeddings(&path, &set, EmbeddingFormat::Tsv).unwrap();
        let loaded = load_embeddings(&path, EmbeddingFormat::Tsv).unwrap();
        assert_eq!(loaded.len(), 2);
        for (a, b) in set.iter().zip(loaded.iter()) {
            assert_eq!(a.id, b.id);
            for (x, y) in a.vector.iter().zip(&b.vector) {
                assert!((x - y).abs() <= 1e-6);
            }
        }
    }

    #[test]
    fn tsv_with_only_a_comment_header_is_empty() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        fs::write(&path, "# id\tvector\n").unwrap();
        let loaded = load_embeddings(&path, EmbeddingFormat::Tsv).unwrap();
        assert_eq!(loaded.len(), 0);
        assert_eq!(loaded.dim(), 0);
    }

    #[test]
    fn tsv_reports_mid_file_dimension_mismatch_with_line() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("emb.tsv");
        fs::write(&path, "a\t1 2 3\nb\t1 2\n").unwrap();
        match load_embeddings(&path, EmbeddingFormat::Tsv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn format_detection_sniffs_magic() {
        let dir = tempdir().unwrap();
        let bin = dir.path().join("e.bin");
        let tsv = dir.path().join("e.tsv");
        let set = EmbeddingSet::from_entries(vec![Embedding::new("a", vec![1.0])]).unwrap();
        save_embeddings(&bin, &set, EmbeddingFormat::Binary).unwrap();
        save_embeddings(&tsv, &set, EmbeddingFormat::Tsv).unwrap();
        assert_eq!(detect_embedding_format(&bin).unwrap(), EmbeddingFormat::Binary);
        assert_eq!(detect_embedding_format(&tsv).unwrap(), EmbeddingFormat::Tsv);
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        let mut m = Manifest::new();
        m.push(ManifestRecord {
            id: "utt1".into(),
            speaker: Some("spk1".into()),
            duration: 4.25,
            tempo_factor: 1.0,
            tags: vec![AugTag::Noise, AugTag::Rir],
        })
        .unwrap();
        m.push(ManifestRecord {
            id: "utt2#sp0.9".into(),
            speaker: None,
            duration: 5.0,
            tempo_factor: 0.9,
            tags: vec![AugTag::Tempo],
        })
        .unwrap();
        save_manifest(&path, &m).unwrap();
        let loaded = load_manifest(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.records()[0].tags, vec![AugTag::Noise, AugTag::Rir]);
        assert_eq!(loaded.records()[1].speaker, None);
        assert_eq!(loaded.records()[1].tempo_factor, 0.9);
        assert!((loaded.records()[0].duration - 4.25).abs() < 1e-9);
    }

    #[test]
    fn manifest_rejects_unknown_tag_and_wrong_columns() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "utt1\tspk1\t3.0\t1.0\tbogus\n").unwrap();
        assert!(load_manifest(&path).is_err());
        fs::write(&path, "utt1\tspk1\t3.0\n").unwrap();
        assert!(load_manifest(&path).is_err());
    }

    #[test]
    fn trials_and_scores_round_trip() {
        let dir = tempdir().unwrap();
        let tpath = dir.path().join("trials.txt");
        let spath = dir.path().join("scores.txt");
        fs::write(&tpath, "1 e1 t1\n0 e1 t2\n- e2 t1\n").unwrap();
        let trials = load_trials(&tpath).unwrap();
        assert_eq!(trials.len(), 3);
        assert_eq!(trials.trials()[2].label, TrialLabel::Unknown);
        save_trials(&spath, &trials).unwrap();
        let again = load_trials(&spath).unwrap();
        assert_eq!(trials.trials(), again.trials());

        let scores = ScoreSet::new(vec![TrialScore {
            enroll: "e1".into(),
            test: "t1".into(),
            score: 0.1234567,
        }]);
        save_scores(&spath, &scores).unwrap();
        let loaded = load_scores(&spath).unwrap();
        assert!((loaded.entries()[0].score - 0.123457).abs() < 1e-9);
    }

    #[test]
    fn trials_reject_bad_label() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trials.txt");
        fs::write(&path, "2 e1 t1\n").unwrap();
        assert!(load_trials(&path).is_err());
    }

    #[test]
    fn ids_with_whitespace_are_rejected_by_space_separated_formats() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("scores.txt");
        let scores = ScoreSet::new(vec![TrialScore {
            enroll: "has space".into(),
            test: "t".into(),
            score: 0.5,
        }]);
        assert!(save_scores(&path, &scores).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn failed_write_leaves_no_output_file() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("missing_dir").join("out.txt");
        assert!(write_atomic(&path, b"x").is_err());
        assert!(!path.exists());
        assert!(!dir.path().join("missing_dir").exists());
    }
}
