//! On-disk dataset layout: `manifest.json` beside `histories.bin`.
//!
//! Each record in the payload file is: header-JSON length (LE u64), header
//! JSON (task + provenance), transition count (LE u64), then packed
//! transitions — observation dims as LE i16, action LE i16, reward LE f32,
//! flags byte (bit 0 = episode_start). The manifest indexes records by byte
//! offset and CRC32, so corruption is pinned to a record.

use std::fs;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::env::TaskSpec;
use crate::error::{contract, CoreError, Result};
use crate::history::{
    obs_from, DatasetManifest, HistoryDataset, HistoryMeta, LearningHistory, RecordInfo, Transition,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PAYLOAD_FILE: &str = "histories.bin";

#[derive(Serialize, Deserialize)]
struct RecordHeader {
    task: TaskSpec,
    #[serde(flatten)]
    meta: HistoryMeta,
}

fn obs_width(task: &TaskSpec) -> usize {
    match task.env_id() {
        crate::env::EnvId::AdversarialBandit => 1,
        _ => 2,
    }
}

fn encode_record(h: &LearningHistory) -> Result<Vec<u8>> {
    let header = serde_json::to_vec(&RecordHeader {
        task: h.task.clone(),
        meta: h.meta.clone(),
    })?;
    let width = obs_width(&h.task);
    let mut buf = Vec::with_capacity(16 + header.len() + h.len() * (width * 2 + 7));
    buf.extend_from_slice(&(header.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&(h.len() as u64).to_le_bytes());
    for t in &h.transitions {
        if t.observation.len() != width {
            return Err(contract(format!(
                "observation width {} != {width} for env",
                t.observation.len()
            )));
        }
        for &o in &t.observation {
            buf.extend_from_slice(&o.to_le_bytes());
        }
        buf.extend_from_slice(&(t.action as i16).to_le_bytes());
        buf.extend_from_slice(&t.reward.to_le_bytes());
        buf.push(u8::from(t.episode_start));
    }
    Ok(buf)
}

fn decode_record(buf: &[u8], record: usize) -> Result<LearningHistory> {
    let truncated = |detail: &str| CoreError::TruncatedRecord {
        record,
        detail: detail.to_string(),
    };
    let mut at = 0usize;
    let mut take = |n: usize, what: &str| -> Result<&[u8]> {
        if at + n > buf.len() {
            return Err(truncated(what));
        }
        let s = &buf[at..at + n];
        at += n;
        Ok(s)
    };
    let header_len = u64::from_le_bytes(take(8, "header length")?.try_into().unwrap()) as usize;
    let header: RecordHeader = serde_json::from_slice(take(header_len, "header json")?)?;
    let count = u64::from_le_bytes(take(8, "transition count")?.try_into().unwrap()) as usize;
    let width = obs_width(&header.task);
    let mut transitions = Vec::with_capacity(count);
    for _ in 0..count {
        let mut obs = [0i16; 2];
        for slot in obs.iter_mut().take(width) {
            *slot = i16::from_le_bytes(take(2, "observation")?.try_into().unwrap());
        }
        let action = i16::from_le_bytes(take(2, "action")?.try_into().unwrap());
        let reward = f32::from_le_bytes(take(4, "reward")?.try_into().unwrap());
        let flags = take(1, "flags")?[0];
        transitions.push(Transition {
            observation: obs_from(&obs[..width]),
            action: action as u16,
            reward,
            episode_start: flags & 1 != 0,
        });
    }
    if at != buf.len() {
        return Err(contract(format!("record {record} carries {} trailing bytes", buf.len() - at)));
    }
    Ok(LearningHistory {
        task: header.task,
        transitions,
        meta: header.meta,
    })
}

/// Write `dataset` as a directory; fills in the manifest's record index.
pub fn write_dataset(path: &Path, dataset: &HistoryDataset) -> Result<()> {
    fs::create_dir_all(path)?;
    let mut payload = BufWriter::new(fs::File::create(path.join(PAYLOAD_FILE))?);
    let mut records = Vec::with_capacity(dataset.histories.len());
    let mut offset = 0u64;
    for h in &dataset.histories {
        let buf = encode_record(h)?;
        payload.write_all(&buf)?;
        records.push(RecordInfo {
            offset,
            len: buf.len() as u64,
            crc32: crc32fast::hash(&buf),
        });
        offset += buf.len() as u64;
    }
    payload.flush()?;

    let manifest = DatasetManifest {
        env_id: dataset.manifest.env_id,
        split: dataset.manifest.split.clone(),
        gen_config: dataset.manifest.gen_config.clone(),
        record_count: dataset.histories.len(),
        records,
    };
    fs::write(
        path.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Load a dataset directory, checking record counts and per-record CRCs.
pub fn read_dataset(path: &Path) -> Result<HistoryDataset> {
    let manifest: DatasetManifest =
        serde_json::from_slice(&fs::read(path.join(MANIFEST_FILE))?)?;
    if manifest.records.len() != manifest.record_count {
        return Err(CoreError::RecordCountMismatch {
            manifest: manifest.record_count,
            found: manifest.records.len(),
        });
    }
    let mut payload = fs::File::open(path.join(PAYLOAD_FILE))?;
    let file_len = payload.seek(SeekFrom::End(0))?;
    let mut histories = Vec::with_capacity(manifest.record_count);
    for (i, info) in manifest.records.iter().enumerate() {
        if info.offset + info.len > file_len {
            return Err(CoreError::TruncatedRecord {
                record: i,
                detail: format!(
                    "record spans bytes {}..{} but payload is {file_len} bytes",
                    info.offset,
                    info.offset + info.len
                ),
            });
        }
        payload.seek(SeekFrom::Start(info.offset))?;
        let mut buf = vec![0u8; info.len as usize];
        payload.read_exact(&mut buf)?;
        let computed = crc32fast::hash(&buf);
        if computed != info.crc32 {
            return Err(CoreError::ChecksumMismatch {
                record: i,
                stored: info.crc32,
                computed,
            });
        }
        histories.push(decode_record(&buf, i)?);
    }
    Ok(HistoryDataset { manifest, histories })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{EnvId, TaskSplit};
    use crate::history::split_tasks;
    use crate::rng::stream_rng;

    fn sample_dataset() -> HistoryDataset {
        let split = split_tasks(EnvId::DarkRoom, 0.2, &mut stream_rng(0, 0)).unwrap();
        let task = split.train[0].clone();
        let mut transitions = Vec::new();
        for e in 0..3u16 {
            for t in 0..20u16 {
                transitions.push(Transition {
                    observation: obs_from(&[(t % 9) as i16, (e % 9) as i16]),
                    action: t % 5,
                    reward: f32::from(u8::from(t == 7)),
                    episode_start: t == 0,
                });
            }
        }
        let histories = vec![LearningHistory {
            task,
            transitions,
            meta: HistoryMeta {
                algorithm: "a3c".into(),
                actor_id: 3,
                seed: 17,
                subsample_k: 1,
                expert: false,
            },
        }];
        HistoryDataset::new(
            EnvId::DarkRoom,
            split,
            serde_json::json!({"actors": 1}),
            histories,
        )
    }

    #[test]
    fn round_trip_is_structurally_equal() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_dataset();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.histories, ds.histories);
        assert_eq!(back.manifest.gen_config, ds.manifest.gen_config);
        back.validate().unwrap();
    }

    #[test]
    fn payload_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let ds = sample_dataset();
        write_dataset(dir.path(), &ds).unwrap();
        let bytes_a = fs::read(dir.path().join(PAYLOAD_FILE)).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        let dir2 = tempfile::tempdir().unwrap();
        write_dataset(dir2.path(), &back).unwrap();
        let bytes_b = fs::read(dir2.path().join(PAYLOAD_FILE)).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }

    #[test]
    fn corrupt_byte_names_the_record() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &sample_dataset()).unwrap();
        let p = dir.path().join(PAYLOAD_FILE);
        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0xff;
        fs::write(&p, bytes).unwrap();
        match read_dataset(dir.path()) {
            Err(CoreError::ChecksumMismatch { record, .. }) => assert_eq!(record, 0),
            other => panic!("expected checksum error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &sample_dataset()).unwrap();
        let p = dir.path().join(PAYLOAD_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        match read_dataset(dir.path()) {
            Err(CoreError::TruncatedRecord { record, .. }) => assert_eq!(record, 0),
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn manifest_count_mismatch_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &sample_dataset()).unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        let mut manifest: DatasetManifest =
            serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        manifest.record_count = 5;
        fs::write(&p, serde_json::to_vec(&manifest).unwrap()).unwrap();
        assert!(matches!(
            read_dataset(dir.path()),
            Err(CoreError::RecordCountMismatch { manifest: 5, found: 1 })
        ));
    }

    #[test]
    fn empty_dataset_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let split = TaskSplit {
            env_id: EnvId::AdversarialBandit,
            train: vec![],
            test: vec![],
        };
        let ds = HistoryDataset::new(
            EnvId::AdversarialBandit,
            split,
            serde_json::json!({}),
            vec![],
        );
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert!(back.histories.is_empty());
        assert_eq!(back.manifest.record_count, 0);
    }
}
