//! Binary checkpoint format: magic, version, JSON header, then raw
//! little-endian f64 tensors in parameter-store order, followed by the
//! optimizer moments. Loading reconstructs a resumable training system.

use crate::conditioning::Vocabulary;
use crate::error::{Error, Result};
use crate::train::{TrainConfig, TrainableSystem};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"DGCK";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    vocab_labels: Vec<String>,
    trained_combos: Vec<(String, String)>,
    step: u64,
    tensors: Vec<TensorMeta>,
    adam_t: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

fn write_tensor(out: &mut impl Write, t: &ArrayD<f64>) -> Result<()> {
    let mut buf = Vec::with_capacity(t.len() * 8);
    for &v in t.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

fn read_tensor(data: &[u8], offset: &mut usize, shape: &[usize]) -> Result<ArrayD<f64>> {
    let count: usize = shape.iter().product();
    let bytes = count * 8;
    let end = offset
        .checked_add(bytes)
        .filter(|&e| e <= data.len())
        .ok_or_else(|| Error::CheckpointFormat("tensor data truncated".into()))?;
    let mut values = Vec::with_capacity(count);
    for chunk in data[*offset..end].chunks_exact(8) {
        values.push(f64::from_le_bytes(chunk.try_into().expect("8-byte chunk")));
    }
    *offset = end;
    ArrayD::from_shape_vec(IxDyn(shape), values)
        .map_err(|e| Error::CheckpointFormat(format!("tensor shape: {e}")))
}

/// Write the full training state: parameters, optimizer moments, config,
/// vocabulary, bookkeeping.
pub fn save(sys: &TrainableSystem, path: &Path) -> Result<()> {
    let (m, v, adam_t) = sys.optimizer().state();
    let header = Header {
        config: sys.cfg().clone(),
        vocab_labels: sys.encoder().vocab().labels().to_vec(),
        trained_combos: sys.trained_combos().iter().cloned().collect(),
        step: sys.step(),
        tensors: sys
            .store()
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        adam_t,
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    // body order: parameters, then adam m, then adam v
    let mut body = Vec::new();
    for (_, t) in sys.store().iter() {
        write_tensor(&mut body, t)?;
    }
    for t in m {
        write_tensor(&mut body, t)?;
    }
    for t in v {
        write_tensor(&mut body, t)?;
    }
    out.extend_from_slice(&body);
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a checkpoint back into a training system, optimizer state
/// included, so fitting may continue bit-identically.
pub fn load(path: &Path) -> Result<TrainableSystem> {
    let mut data = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::CheckpointFormat(format!("{}: {e}", path.display())))?
        .read_to_end(&mut data)?;
    if data.len() < 16 || &data[..4] != MAGIC {
        return Err(Error::CheckpointFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(data[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::CheckpointFormat(format!(
            "unsupported version {version}"
        )));
    }
    let hlen = u64::from_le_bytes(data[8..16].try_into().expect("8 bytes")) as usize;
    let hend = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= data.len())
        .ok_or_else(|| Error::CheckpointFormat("header truncated".into()))?;
    let header: Header = serde_json::from_slice(&data[16..hend])
        .map_err(|e| Error::CheckpointFormat(format!("header: {e}")))?;

    let mut offset = hend;
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        let t = read_tensor(&data, &mut offset, &meta.shape)?;
        tensors.push((meta.name.clone(), t));
    }
    let mut adam_m = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        adam_m.push(read_tensor(&data, &mut offset, &meta.shape)?);
    }
    let mut adam_v = Vec::with_capacity(header.tensors.len());
    for meta in &header.tensors {
        adam_v.push(read_tensor(&data, &mut offset, &meta.shape)?);
    }
    if offset != data.len() {
        return Err(Error::CheckpointFormat(format!(
            "{} trailing bytes",
            data.len() - offset
        )));
    }

    let vocab = Vocabulary::from_labels(&header.vocab_labels)?;
    let combos: BTreeSet<(String, String)> = header.trained_combos.into_iter().collect();
    TrainableSystem::from_parts(
        header.config,
        vocab,
        tensors,
        header.step,
        combos,
        Some((adam_m, adam_v, header.adam_t)),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_sample;
    use crate::model::TdiaConfig;
    use crate::GOOD_LABEL;

    fn micro_cfg() -> TrainConfig {
        TrainConfig {
            model: TdiaConfig {
                n_background: 1,
                m_defect: 1,
                k_fusion: 1,
                width: 8,
                heads: 2,
                patch: 2,
                image_size: 8,
                channels: 3,
                cond_width: 8,
                defect_prompt_len: 4,
                fused_prompt_only: false,
            },
            steps: 4,
            batch: 2,
            t_total: 20,
            ..TrainConfig::default()
        }
    }

    fn micro_data() -> Vec<crate::DefectSample> {
        vec![
            generate_sample("striped", "spot", 8, 1).unwrap(),
            generate_sample("striped", GOOD_LABEL, 8, 2).unwrap(),
        ]
    }

    #[test]
    fn save_load_round_trip_is_exact() {
        let data = micro_data();
        let mut sys = TrainableSystem::from_dataset(micro_cfg(), &data).unwrap();
        sys.fit_to(&data, 2, |_, _| Ok(())).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&sys, &path).unwrap();
        let loaded = load(&path).unwrap();

        assert_eq!(loaded.step(), sys.step());
        assert_eq!(loaded.cfg(), sys.cfg());
        assert_eq!(loaded.trained_combos(), sys.trained_combos());
        assert_eq!(
            loaded.encoder().vocab().labels(),
            sys.encoder().vocab().labels()
        );
        for ((na, va), (nb, vb)) in sys.store().iter().zip(loaded.store().iter()) {
            assert_eq!(na, nb);
            assert_eq!(va, vb, "parameter {na} changed in round trip");
        }
        let (m1, v1, t1) = sys.optimizer().state();
        let (m2, v2, t2) = loaded.optimizer().state();
        assert_eq!(t1, t2);
        assert_eq!(m1, m2);
        assert_eq!(v1, v2);
    }

    #[test]
    fn resume_through_checkpoint_matches_uninterrupted() {
        let data = micro_data();
        let mut all = TrainableSystem::from_dataset(micro_cfg(), &data).unwrap();
        all.fit_to(&data, 4, |_, _| Ok(())).unwrap();

        let mut first = TrainableSystem::from_dataset(micro_cfg(), &data).unwrap();
        first.fit_to(&data, 2, |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&first, &path).unwrap();
        let mut resumed = load(&path).unwrap();
        resumed.fit_to(&data, 4, |_, _| Ok(())).unwrap();

        for ((na, va), (nb, vb)) in all.store().iter().zip(resumed.store().iter()) {
            assert_eq!(na, nb);
            assert_eq!(va, vb, "parameter {na} diverged after resume");
        }
    }

    #[test]
    fn rejects_corrupt_files() {
        let data = micro_data();
        let sys = TrainableSystem::from_dataset(micro_cfg(), &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&sys, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        // bad magic
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load(&path), Err(Error::CheckpointFormat(_))));

        // unsupported version
        let mut bad = bytes.clone();
        bad[4] = 99;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load(&path), Err(Error::CheckpointFormat(_))));

        // truncated body
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(matches!(load(&path), Err(Error::CheckpointFormat(_))));

        // trailing garbage
        let mut bad = bytes.clone();
        bad.extend_from_slice(&[0u8; 3]);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(load(&path), Err(Error::CheckpointFormat(_))));

        std::fs::remove_file(&path).unwrap();
        assert!(matches!(load(&path), Err(Error::CheckpointFormat(_))));
    }

    #[test]
    fn ablation_config_survives_round_trip() {
        let cfg = TrainConfig {
            no_fusion: true,
            fixed_r: Some(3.0),
            ..micro_cfg()
        };
        let data = micro_data();
        let sys = TrainableSystem::from_dataset(cfg, &data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save(&sys, &path).unwrap();
        let loaded = load(&path).unwrap();
        assert!(loaded.cfg().no_fusion);
        assert_eq!(loaded.cfg().fixed_r, Some(3.0));
        assert_eq!(loaded.model().cfg().k_fusion, 0);
    }
}
