//! ASVspoof-style CM protocol files and on-disk dataset dumps.
//!
//! Protocol lines are whitespace-separated 5-column records
//! `speaker utt - attack key` with `attack = "-"` and `key = "bonafide"` for
//! genuine speech. Dumped datasets (WAV files plus per-split protocols) are
//! path-compatible with real corpora organized the same way.

use std::fs;
use std::path::Path;

use crate::data::{TaskData, Utterance};
use crate::error::{Error, Result};
use crate::frontend::{load_wav, write_wav};
use crate::metrics::Label;

const DUMMY_COLUMN: &str = "-";
const SPEAKER: &str = "SYNTH";

/// One protocol line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolEntry {
    pub speaker_id: String,
    pub utt_id: String,
    /// Attack id; `None` for bonafide rows (serialized as `-`).
    pub attack_id: Option<String>,
    pub label: Label,
}

/// Parse a protocol file, enforcing label/attack consistency.
pub fn parse_protocol(path: impl AsRef<Path>) -> Result<Vec<ProtocolEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path)?;
    let mut entries = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fail = |reason: String| Error::MalformedLine {
            path: path.display().to_string(),
            line: i + 1,
            reason,
        };
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 5 {
            return Err(fail(format!("expected 5 columns, found {}", cols.len())));
        }
        let label = match cols[4] {
            "bonafide" => Label::Genuine,
            "spoof" => Label::Spoof,
            other => return Err(fail(format!("unknown key {other:?}"))),
        };
        let attack_id = if cols[3] == DUMMY_COLUMN {
            None
        } else {
            Some(cols[3].to_string())
        };
        match (&attack_id, label) {
            (None, Label::Spoof) => {
                return Err(fail("spoof row without an attack id".into()));
            }
            (Some(a), Label::Genuine) => {
                return Err(fail(format!("bonafide row carries attack id {a:?}")));
            }
            _ => {}
        }
        entries.push(ProtocolEntry {
            speaker_id: cols[0].to_string(),
            utt_id: cols[1].to_string(),
            attack_id,
            label,
        });
    }
    Ok(entries)
}

/// Serialize entries back to protocol text (single-space separated).
pub fn serialize_protocol(entries: &[ProtocolEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        let attack = e.attack_id.as_deref().unwrap_or(DUMMY_COLUMN);
        let key = match e.label {
            Label::Genuine => "bonafide",
            Label::Spoof => "spoof",
        };
        s.push_str(&format!(
            "{} {} {} {} {}\n",
            e.speaker_id, e.utt_id, DUMMY_COLUMN, attack, key
        ));
    }
    s
}

/// Write a benchmark to disk: `wav/<utt_id>.wav` plus one protocol file per
/// task and split under `protocols/`.
pub fn dump_dataset(dir: impl AsRef<Path>, tasks: &[TaskData]) -> Result<()> {
    let dir = dir.as_ref();
    let wav_dir = dir.join("wav");
    let proto_dir = dir.join("protocols");
    fs::create_dir_all(&wav_dir)?;
    fs::create_dir_all(&proto_dir)?;
    for task in tasks {
        for (split_name, utts) in [
            ("train", &task.split.train),
            ("dev", &task.split.dev),
            ("eval", &task.split.eval),
        ] {
            let mut entries = Vec::with_capacity(utts.len());
            for u in utts {
                write_wav(wav_dir.join(format!("{}.wav", u.utt_id)), &u.wave)?;
                entries.push(ProtocolEntry {
                    speaker_id: SPEAKER.to_string(),
                    utt_id: u.utt_id.clone(),
                    attack_id: (u.label == Label::Spoof).then(|| u.type_id.clone()),
                    label: u.label,
                });
            }
            fs::write(
                proto_dir.join(format!("{}.{split_name}.txt", task.task_id)),
                serialize_protocol(&entries),
            )?;
        }
    }
    Ok(())
}

/// Load the utterances named by a protocol file from a WAV directory.
pub fn load_protocol_dataset(
    protocol_path: impl AsRef<Path>,
    wav_dir: impl AsRef<Path>,
) -> Result<Vec<Utterance>> {
    let entries = parse_protocol(&protocol_path)?;
    let wav_dir = wav_dir.as_ref();
    entries
        .into_iter()
        .map(|e| {
            let wave = load_wav(wav_dir.join(format!("{}.wav", e.utt_id)))?;
            Ok(Utterance {
                utt_id: e.utt_id,
                label: e.label,
                type_id: e.attack_id.unwrap_or_else(|| DUMMY_COLUMN.to_string()),
                wave,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_spoof_and_bonafide_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cm.txt");
        fs::write(&p, "LA_0001 LA_E_1000 - A10 spoof\nLA_0002 LA_E_2000 - - bonafide\n").unwrap();
        let entries = parse_protocol(&p).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].attack_id.as_deref(), Some("A10"));
        assert_eq!(entries[0].label, Label::Spoof);
        assert_eq!(entries[1].attack_id, None);
        assert_eq!(entries[1].label, Label::Genuine);
    }

    #[test]
    fn wrong_column_count_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cm.txt");
        fs::write(&p, "LA_0001 LA_E_1000 - A10 spoof\nonly three cols\n").unwrap();
        match parse_protocol(&p) {
            Err(Error::MalformedLine { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected MalformedLine, got {other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cm.txt");
        fs::write(&p, "LA_0001 LA_E_1000 - A10 real\n").unwrap();
        assert!(matches!(parse_protocol(&p), Err(Error::MalformedLine { .. })));
    }

    #[test]
    fn inconsistent_label_attack_pairs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cm.txt");
        fs::write(&p, "LA_0001 LA_E_1000 - - spoof\n").unwrap();
        assert!(parse_protocol(&p).is_err());
        fs::write(&p, "LA_0001 LA_E_1000 - A10 bonafide\n").unwrap();
        assert!(parse_protocol(&p).is_err());
    }

    #[test]
    fn round_trip_is_byte_identical_after_normalization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cm.txt");
        let entries: Vec<ProtocolEntry> = (0..200)
            .map(|i| ProtocolEntry {
                speaker_id: format!("SPK{:03}", i % 7),
                utt_id: format!("U{i:05}"),
                attack_id: (i % 3 != 0).then(|| format!("A{:02}", i % 20)),
                label: if i % 3 == 0 { Label::Genuine } else { Label::Spoof },
            })
            .collect();
        let text = serialize_protocol(&entries);
        fs::write(&p, &text).unwrap();
        let parsed = parse_protocol(&p).unwrap();
        assert_eq!(parsed, entries);
        assert_eq!(serialize_protocol(&parsed), text);
    }
}
