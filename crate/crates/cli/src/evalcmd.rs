//! Real-versus-generated comparison: quality proxy, diversity proxy,
//! and the downstream segmentation harness, reported per defect category.

use crate::CmdError;
use defectgen_core::conditioning::GOOD_LABEL;
use defectgen_core::data::{load_dataset, load_gray, load_image};
use defectgen_core::eval::{
    extract_features, frechet_distance, pairwise_diversity, run_downstream, DownstreamConfig,
    FeatureStats,
};
use defectgen_core::{DefectSample, Image, Mask};
use serde_json::{json, Map, Value};
use std::collections::BTreeSet;
use std::path::Path;

/// A generated sample; the mask is optional because image-only sets
/// still support the quality and diversity proxies.
pub struct GenSample {
    pub image: Image,
    pub mask: Option<Mask>,
    pub product: String,
    pub defect: String,
}

pub struct EvalOptions {
    pub extractor_seed: u64,
    pub downstream: DownstreamConfig,
}

/// Load a generated set: either a corpus-layout tree or a flat directory
/// of {product}_{defect}_{wd}_{seed}.png files with optional _mask siblings.
pub fn load_generated(root: &Path) -> Result<Vec<GenSample>, CmdError> {
    if !root.is_dir() {
        return Err(CmdError::Usage(format!(
            "generated root {} is not a directory",
            root.display()
        )));
    }
    let has_subdirs = std::fs::read_dir(root)
        .map_err(defectgen_core::Error::from)?
        .filter_map(|e| e.ok())
        .any(|e| e.path().is_dir());
    if has_subdirs {
        let samples = load_dataset(root)?;
        return Ok(samples
            .into_iter()
            .map(|s| GenSample {
                image: s.image,
                mask: Some(s.mask),
                product: s.product,
                defect: s.defect,
            })
            .collect());
    }
    let mut names: Vec<String> = std::fs::read_dir(root)
        .map_err(defectgen_core::Error::from)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".png") && !n.ends_with("_mask.png"))
        .collect();
    names.sort();
    let mut out = Vec::new();
    for name in names {
        let stem = name.trim_end_matches(".png");
        let mut parts = stem.split('_');
        let (Some(product), Some(defect)) = (parts.next(), parts.next()) else {
            eprintln!("warning: skipping {name}: cannot parse product_defect prefix");
            continue;
        };
        if product.is_empty() || defect.is_empty() {
            eprintln!("warning: skipping {name}: cannot parse product_defect prefix");
            continue;
        }
        let image = load_image(&root.join(&name))?;
        let mask_path = root.join(format!("{stem}_mask.png"));
        let mask = if mask_path.is_file() {
            Some(load_gray(&mask_path)?.mapv(|v| if v >= 128 { 1.0 } else { 0.0 }))
        } else {
            None
        };
        out.push(GenSample {
            image,
            mask,
            product: product.to_string(),
            defect: defect.to_string(),
        });
    }
    if out.is_empty() {
        return Err(CmdError::Usage(format!(
            "no generated images found in {}",
            root.display()
        )));
    }
    Ok(out)
}

fn stats_of(images: &[Image], seed: u64) -> Result<FeatureStats, defectgen_core::Error> {
    FeatureStats::from_features(&extract_features(images, seed)?)
}

/// Oldest quarter of each category held out for testing, with a tail split
/// as fallback so tiny categories still yield a nonempty test set.
fn split_real(real_cat: &[DefectSample]) -> (Vec<DefectSample>, Vec<DefectSample>) {
    if real_cat.len() < 4 {
        let (train, test) = real_cat.split_at(real_cat.len() - 1);
        return (train.to_vec(), test.to_vec());
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (i, s) in real_cat.iter().enumerate() {
        if i % 4 == 3 {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, test)
}

/// Per-category metrics document: {"schema": 1, category: {fid_proxy,
/// diversity_proxy, baseline, augmented}}. Downstream entries are omitted
/// with a warning when the generated category carries no masks.
pub fn metrics_report(
    real: &[DefectSample],
    generated: &[GenSample],
    opts: &EvalOptions,
) -> Result<Value, CmdError> {
    let real_defects: BTreeSet<&str> = real.iter().map(|s| s.defect.as_str()).collect();
    let categories: BTreeSet<&str> = generated
        .iter()
        .map(|s| s.defect.as_str())
        .filter(|d| *d != GOOD_LABEL && real_defects.contains(d))
        .collect();
    if categories.is_empty() {
        return Err(CmdError::Usage(
            "no defect category appears in both the real and generated sets".to_string(),
        ));
    }
    let mut doc = Map::new();
    doc.insert("schema".to_string(), json!(1));
    for cat in categories {
        let real_cat: Vec<DefectSample> = real
            .iter()
            .filter(|s| s.defect == cat)
            .cloned()
            .collect();
        let gen_imgs: Vec<Image> = generated
            .iter()
            .filter(|s| s.defect == cat)
            .map(|s| s.image.clone())
            .collect();
        if real_cat.len() < 2 || gen_imgs.len() < 2 {
            eprintln!("warning: skipping category {cat}: needs at least 2 real and 2 generated images");
            continue;
        }
        let real_imgs: Vec<Image> = real_cat.iter().map(|s| s.image.clone()).collect();
        let fid = frechet_distance(
            &stats_of(&real_imgs, opts.extractor_seed)?,
            &stats_of(&gen_imgs, opts.extractor_seed)?,
        )?;
        let diversity = pairwise_diversity(&gen_imgs, opts.extractor_seed)?;
        let mut entry = Map::new();
        entry.insert("fid_proxy".to_string(), json!(fid));
        entry.insert("diversity_proxy".to_string(), json!(diversity));

        let gen_masked: Vec<DefectSample> = generated
            .iter()
            .filter(|s| s.defect == cat)
            .filter_map(|s| {
                s.mask.as_ref().map(|m| DefectSample {
                    image: s.image.clone(),
                    mask: m.clone(),
                    product: s.product.clone(),
                    defect: s.defect.clone(),
                })
            })
            .collect();
        if gen_masked.is_empty() {
            eprintln!("warning: category {cat}: generated masks missing, downstream section omitted");
        } else {
            let (train, test) = split_real(&real_cat);
            let (baseline, augmented) =
                run_downstream(&train, &gen_masked, &test, &opts.downstream)?;
            entry.insert(
                "baseline".to_string(),
                serde_json::to_value(baseline).map_err(defectgen_core::Error::from)?,
            );
            entry.insert(
                "augmented".to_string(),
                serde_json::to_value(augmented).map_err(defectgen_core::Error::from)?,
            );
        }
        doc.insert(cat.to_string(), Value::Object(entry));
    }
    Ok(Value::Object(doc))
}
