//! Key-value config files for corpus specs and training runs.

use crate::CmdError;
use defectgen_core::kvconfig::KvConfig;
use defectgen_core::losses::LossNorm;
use defectgen_core::{CorpusSpec, TrainConfig};
use std::path::Path;

const CORPUS_KEYS: &[&str] = &[
    "products",
    "defects",
    "per_combo",
    "good_per_product",
    "image_size",
    "seed",
    "excluded",
];

const TRAIN_KEYS: &[&str] = &[
    "lambda_mask",
    "p1",
    "p2",
    "alpha",
    "fixed_r",
    "fused_prompt_only",
    "no_fusion",
    "steps",
    "batch",
    "lr",
    "seed",
    "t_total",
    "beta_start",
    "beta_end",
    "grad_clip",
    "loss_norm",
    "image_size",
    "channels",
    "width",
    "heads",
    "patch",
    "cond_width",
    "n_background",
    "m_defect",
    "k_fusion",
];

/// Corpus spec from a key-value file; unset keys keep the desk defaults.
pub fn corpus_spec(path: &Path) -> Result<CorpusSpec, CmdError> {
    let kv = KvConfig::from_file(path)?;
    kv.require_known(CORPUS_KEYS)?;
    let mut spec = CorpusSpec::default_desk();
    if kv.contains("products") {
        spec.products = kv.get_list("products");
    }
    if kv.contains("defects") {
        spec.defects = kv.get_list("defects");
    }
    if let Some(v) = kv.get_usize("per_combo")? {
        spec.per_combo = v;
    }
    if let Some(v) = kv.get_usize("good_per_product")? {
        spec.good_per_product = v;
    }
    if let Some(v) = kv.get_usize("image_size")? {
        spec.image_size = v;
    }
    if let Some(v) = kv.get_u64("seed")? {
        spec.seed = v;
    }
    if kv.contains("excluded") {
        spec.excluded = kv
            .get_list("excluded")
            .iter()
            .map(|pair| {
                pair.split_once(':')
                    .map(|(p, d)| (p.trim().to_string(), d.trim().to_string()))
                    .ok_or_else(|| {
                        CmdError::Usage(format!(
                            "key \"excluded\": entry {pair:?} is not product:defect"
                        ))
                    })
            })
            .collect::<Result<_, _>>()?;
    }
    Ok(spec)
}

/// Training config from a key-value file; unset keys keep the defaults.
pub fn train_config(path: &Path) -> Result<TrainConfig, CmdError> {
    let kv = KvConfig::from_file(path)?;
    kv.require_known(TRAIN_KEYS)?;
    let mut cfg = TrainConfig::default();
    if let Some(v) = kv.get_f64("lambda_mask")? {
        cfg.lambda_mask = v;
    }
    if let Some(v) = kv.get_f64("p1")? {
        cfg.p1 = v;
    }
    if let Some(v) = kv.get_f64("p2")? {
        cfg.p2 = v;
    }
    if let Some(v) = kv.get_f64("alpha")? {
        cfg.alpha = v;
    }
    if let Some(v) = kv.get_f64("fixed_r")? {
        cfg.fixed_r = Some(v);
    }
    if let Some(v) = kv.get_bool("fused_prompt_only")? {
        cfg.fused_prompt_only = v;
    }
    if let Some(v) = kv.get_bool("no_fusion")? {
        cfg.no_fusion = v;
    }
    if let Some(v) = kv.get_u64("steps")? {
        cfg.steps = v;
    }
    if let Some(v) = kv.get_usize("batch")? {
        cfg.batch = v;
    }
    if let Some(v) = kv.get_f64("lr")? {
        cfg.lr = v;
    }
    if let Some(v) = kv.get_u64("seed")? {
        cfg.seed = v;
    }
    if let Some(v) = kv.get_usize("t_total")? {
        cfg.t_total = v;
    }
    if let Some(v) = kv.get_f64("beta_start")? {
        cfg.beta_start = v;
    }
    if let Some(v) = kv.get_f64("beta_end")? {
        cfg.beta_end = v;
    }
    if let Some(v) = kv.get_f64("grad_clip")? {
        cfg.grad_clip = v;
    }
    if let Some(v) = kv.get_str("loss_norm") {
        cfg.loss_norm = match v {
            "mean" => LossNorm::Mean,
            "sum" => LossNorm::Sum,
            other => {
                return Err(CmdError::Usage(format!(
                    "key \"loss_norm\": expected mean or sum, got {other:?}"
                )))
            }
        };
    }
    if let Some(v) = kv.get_usize("image_size")? {
        cfg.model.image_size = v;
    }
    if let Some(v) = kv.get_usize("channels")? {
        cfg.model.channels = v;
    }
    if let Some(v) = kv.get_usize("width")? {
        cfg.model.width = v;
    }
    if let Some(v) = kv.get_usize("heads")? {
        cfg.model.heads = v;
    }
    if let Some(v) = kv.get_usize("patch")? {
        cfg.model.patch = v;
    }
    if let Some(v) = kv.get_usize("cond_width")? {
        cfg.model.cond_width = v;
    }
    if let Some(v) = kv.get_usize("n_background")? {
        cfg.model.n_background = v;
    }
    if let Some(v) = kv.get_usize("m_defect")? {
        cfg.model.m_defect = v;
    }
    if let Some(v) = kv.get_usize("k_fusion")? {
        cfg.model.k_fusion = v;
    }
    Ok(cfg)
}
