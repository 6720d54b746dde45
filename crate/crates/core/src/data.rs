//! Procedural multi-product defect corpus with exact masks, plus loading
//! of image/mask directory trees in the same layout.

use crate::conditioning::GOOD_LABEL;
use crate::error::{Error, Result};
use crate::{Image, Mask};
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Products with registered background generators.
pub const PRODUCTS: [&str; 3] = ["striped", "checker", "disc"];
/// Defect types with registered morphology generators.
pub const DEFECTS: [&str; 3] = ["scratch", "spot", "crack"];

/// One training tuple: image, exact mask, and labels.
#[derive(Debug, Clone)]
pub struct DefectSample {
    pub image: Image,
    pub mask: Mask,
    pub product: String,
    pub defect: String,
}

impl DefectSample {
    pub fn is_good(&self) -> bool {
        self.defect == GOOD_LABEL
    }

    pub fn mask_fraction(&self) -> f64 {
        self.mask.sum() / self.mask.len() as f64
    }
}

/// Corpus geometry and composition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub products: Vec<String>,
    pub defects: Vec<String>,
    /// Defect images per (product, defect) combination.
    pub per_combo: usize,
    /// Normal images per product.
    pub good_per_product: usize,
    pub image_size: usize,
    pub seed: u64,
    /// (product, defect) combinations left out of the corpus.
    pub excluded: Vec<(String, String)>,
}

impl CorpusSpec {
    pub fn default_desk() -> Self {
        Self {
            products: PRODUCTS.iter().map(|s| s.to_string()).collect(),
            defects: DEFECTS.iter().map(|s| s.to_string()).collect(),
            per_combo: 10,
            good_per_product: 10,
            image_size: 32,
            seed: 0,
            excluded: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.products.is_empty() || self.defects.is_empty() {
            return Err(Error::InvalidConfig("products and defects must be nonempty".into()));
        }
        if self.per_combo == 0 && self.good_per_product == 0 {
            return Err(Error::InvalidConfig("corpus would be empty".into()));
        }
        if self.image_size < 8 {
            return Err(Error::InvalidConfig("image size must be at least 8".into()));
        }
        for p in &self.products {
            if !PRODUCTS.contains(&p.as_str()) {
                return Err(Error::UnknownLabel(p.clone()));
            }
        }
        for d in &self.defects {
            if d == GOOD_LABEL || !DEFECTS.contains(&d.as_str()) {
                return Err(Error::UnknownLabel(d.clone()));
            }
        }
        Ok(())
    }

    fn is_excluded(&self, product: &str, defect: &str) -> bool {
        self.excluded
            .iter()
            .any(|(p, d)| p == product && d == defect)
    }
}

/// One manifest record: path relative to the corpus root plus labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub path: String,
    pub product: String,
    pub defect: String,
}

type EncodedSample = (ManifestEntry, Vec<u8>, Vec<u8>);

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

/// Render a product background with zero jitter; the reference pattern
/// the per-sample jitter stays close to.
pub fn product_template(product: &str, size: usize) -> Result<Image> {
    render_background(product, size, 0.0, 0.0, 0.0, 1.0)
}

fn render_background(
    product: &str,
    size: usize,
    j1: f64,
    j2: f64,
    j3: f64,
    amp_scale: f64,
) -> Result<Image> {
    let s = size as f64;
    let mut img = Image::zeros((3, size, size));
    match product {
        "striped" => {
            let tint = [0.72, 0.55, 0.40];
            let amp = 0.22 * amp_scale;
            let phase = j1 * 0.08; // fraction of a period
            for y in 0..size {
                let v = (std::f64::consts::TAU * (3.0 * y as f64 / s + phase)).sin();
                for x in 0..size {
                    for c in 0..3 {
                        img[[c, y, x]] = tint[c] + amp * v;
                    }
                }
            }
        }
        "checker" => {
            let tint = [0.35, 0.60, 0.45];
            let amp = 0.18 * amp_scale;
            let cell = s / 4.0;
            let (ox, oy) = (j1 * cell / 10.0, j2 * cell / 10.0);
            for y in 0..size {
                for x in 0..size {
                    let par = (((x as f64 + ox) / cell).floor() + ((y as f64 + oy) / cell).floor())
                        as i64;
                    let v = if par.rem_euclid(2) == 0 { 1.0 } else { -1.0 };
                    for c in 0..3 {
                        img[[c, y, x]] = tint[c] + amp * v;
                    }
                }
            }
        }
        "disc" => {
            let tint = [0.28, 0.38, 0.62];
            let lift = 0.30 * amp_scale;
            let (cx, cy) = (s / 2.0 + j1 * s / 16.0, s / 2.0 + j2 * s / 16.0);
            let radius = s / 3.0 * (1.0 + j3 * 0.08);
            let edge = s / 16.0;
            for y in 0..size {
                for x in 0..size {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    let inside = smoothstep((radius - d) / edge + 0.5);
                    for c in 0..3 {
                        img[[c, y, x]] = tint[c] + lift * inside;
                    }
                }
            }
        }
        other => return Err(Error::UnknownLabel(other.to_string())),
    }
    Ok(img)
}

/// Deterministic-per-rng product texture with limited jitter, so samples
/// of one product stay strongly correlated with its template.
pub fn generate_background<R: Rng>(product: &str, size: usize, rng: &mut R) -> Result<Image> {
    let j1 = rng.random::<f64>() * 2.0 - 1.0;
    let j2 = rng.random::<f64>() * 2.0 - 1.0;
    let j3 = rng.random::<f64>() * 2.0 - 1.0;
    let amp_scale = 1.0 + 0.15 * (rng.random::<f64>() * 2.0 - 1.0);
    let mut img = render_background(product, size, j1, j2, j3, amp_scale)?;
    for v in img.iter_mut() {
        *v = (*v + 0.015 * (rng.random::<f64>() * 2.0 - 1.0)).clamp(0.0, 1.0);
    }
    Ok(img)
}

/// Pearson correlation after removing each channel's mean, so tints do
/// not contribute and only spatial structure is compared.
pub fn template_correlation(a: &Image, b: &Image) -> f64 {
    assert_eq!(a.shape(), b.shape(), "correlation needs equal shapes");
    let c = a.dim().0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for ci in 0..c {
        let ac = a.index_axis(ndarray::Axis(0), ci);
        let bc = b.index_axis(ndarray::Axis(0), ci);
        let ma = ac.sum() / ac.len() as f64;
        let mb = bc.sum() / bc.len() as f64;
        for (&x, &y) in ac.iter().zip(bc.iter()) {
            num += (x - ma) * (y - mb);
            da += (x - ma) * (x - ma);
            db += (y - mb) * (y - mb);
        }
    }
    if da == 0.0 || db == 0.0 {
        return 0.0;
    }
    num / (da.sqrt() * db.sqrt())
}

fn stamp(canvas: &mut Vec<(usize, usize)>, size: usize, x: i64, y: i64) {
    if x >= 0 && y >= 0 && (x as usize) < size && (y as usize) < size {
        canvas.push((y as usize, x as usize));
    }
}

fn stamp_round(canvas: &mut Vec<(usize, usize)>, size: usize, x: i64, y: i64, r: i64) {
    for dy in -r..=r {
        for dx in -r..=r {
            if dx * dx + dy * dy <= r * r {
                stamp(canvas, size, x + dx, y + dy);
            }
        }
    }
}

/// Stroke radius so line defects stay visible at coarse resolutions.
fn stroke_radius(size: usize) -> i64 {
    ((size / 32) as i64).clamp(1, 3)
}

fn draw_segment(canvas: &mut Vec<(usize, usize)>, size: usize, a: (f64, f64), b: (f64, f64)) {
    let steps = ((b.0 - a.0).abs().max((b.1 - a.1).abs()).ceil() as usize).max(1);
    let r = stroke_radius(size);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = a.0 + (b.0 - a.0) * t;
        let y = a.1 + (b.1 - a.1) * t;
        stamp_round(canvas, size, x.round() as i64, y.round() as i64, r);
    }
}

/// Pixel sets for each defect morphology; independent of the product.
fn defect_pixels<R: Rng>(defect: &str, size: usize, rng: &mut R) -> Result<Vec<(usize, usize)>> {
    let s = size as f64;
    let margin = s * 0.15;
    let span = s - 2.0 * margin;
    let mut px = Vec::new();
    match defect {
        "scratch" => {
            let mut p = (
                margin + rng.random::<f64>() * span,
                margin + rng.random::<f64>() * span,
            );
            let mut angle = rng.random::<f64>() * std::f64::consts::TAU;
            let segments = 3 + (rng.random::<f64>() * 2.0) as usize;
            for _ in 0..segments {
                let len = s / 6.0 + rng.random::<f64>() * s / 8.0;
                let q = (p.0 + angle.cos() * len, p.1 + angle.sin() * len);
                draw_segment(&mut px, size, p, q);
                p = q;
                angle += (rng.random::<f64>() - 0.5) * 1.0;
            }
        }
        "spot" => {
            let cx = margin + rng.random::<f64>() * span;
            let cy = margin + rng.random::<f64>() * span;
            let rx = s / 16.0 + rng.random::<f64>() * s / 12.0;
            let ry = s / 16.0 + rng.random::<f64>() * s / 12.0;
            for y in 0..size {
                for x in 0..size {
                    let dx = (x as f64 - cx) / rx;
                    let dy = (y as f64 - cy) / ry;
                    if dx * dx + dy * dy <= 1.0 {
                        px.push((y, x));
                    }
                }
            }
        }
        "crack" => {
            let mut x = margin + rng.random::<f64>() * span;
            let mut y = margin;
            let mut trunk = Vec::new();
            let r = stroke_radius(size);
            while y < s - margin {
                stamp_round(&mut px, size, x.round() as i64, y.round() as i64, r);
                trunk.push((x, y));
                x += (rng.random::<f64>() - 0.5) * 2.4;
                y += 1.0;
            }
            let branches = 1 + (rng.random::<f64>() * 2.0) as usize;
            for _ in 0..branches {
                if trunk.is_empty() {
                    break;
                }
                let start = trunk[rng.random_range(0..trunk.len())];
                let dir = if rng.random::<f64>() < 0.5 { -1.0 } else { 1.0 };
                let len = s / 8.0 + rng.random::<f64>() * s / 8.0;
                let end = (start.0 + dir * len, start.1 + len * 0.6);
                draw_segment(&mut px, size, start, end);
            }
        }
        other => return Err(Error::UnknownLabel(other.to_string())),
    }
    px.sort_unstable();
    px.dedup();
    Ok(px)
}

/// Overwrite defect pixels with a dark appearance, guaranteeing every
/// mask pixel actually changes, and return the exact altered-pixel mask.
pub fn apply_defect<R: Rng>(image: &Image, defect: &str, rng: &mut R) -> Result<(Image, Mask)> {
    let (_, h, w) = image.dim();
    if h != w {
        return Err(Error::InvalidConfig("defect drawing expects square images".into()));
    }
    let size = h;
    let lo = 0.001;
    let hi = 0.2;
    for _attempt in 0..16 {
        let px = defect_pixels(defect, size, rng)?;
        let fraction = px.len() as f64 / (size * size) as f64;
        if fraction <= lo || fraction >= hi {
            continue;
        }
        let mut out = image.clone();
        let mut mask = Mask::zeros((size, size));
        let base = [0.10, 0.09, 0.08];
        for &(y, x) in &px {
            mask[[y, x]] = 1.0;
            let shade = 0.8 + 0.4 * rng.random::<f64>();
            for c in 0..3 {
                let mut v = (base[c] * shade).clamp(0.0, 1.0);
                let orig = image[[c, y, x]];
                // guarantee a visible change at every masked pixel
                if (v - orig).abs() < 1.0 / 255.0 {
                    v = if orig >= 0.5 { orig - 0.02 } else { orig + 0.02 };
                }
                out[[c, y, x]] = v;
            }
        }
        return Ok((out, mask));
    }
    Err(Error::Degenerate(format!(
        "could not draw {defect} within area bounds after 16 attempts"
    )))
}

/// Order-independent per-sample seed (FNV-1a over the identifying tuple).
pub fn sample_seed(corpus_seed: u64, product: &str, defect: &str, index: usize) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    eat(&corpus_seed.to_le_bytes());
    eat(product.as_bytes());
    eat(&[0xff]);
    eat(defect.as_bytes());
    eat(&[0xff]);
    eat(&(index as u64).to_le_bytes());
    h
}

/// Generate one sample from its derived seed.
pub fn generate_sample(
    product: &str,
    defect: &str,
    size: usize,
    seed: u64,
) -> Result<DefectSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bg = generate_background(product, size, &mut rng)?;
    if defect == GOOD_LABEL {
        return Ok(DefectSample {
            image: bg,
            mask: Mask::zeros((size, size)),
            product: product.to_string(),
            defect: GOOD_LABEL.to_string(),
        });
    }
    let (image, mask) = apply_defect(&bg, defect, &mut rng)?;
    Ok(DefectSample {
        image,
        mask,
        product: product.to_string(),
        defect: defect.to_string(),
    })
}

/// Encode a [0,1] image as 8-bit RGB PNG bytes.
fn encode_image_png(img: &Image) -> Result<Vec<u8>> {
    let (c, h, w) = img.dim();
    if c != 3 {
        return Err(Error::InvalidConfig(format!("expected 3 channels, got {c}")));
    }
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (img[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (img[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut bytes = Vec::new();
    buf.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )?;
    Ok(bytes)
}

fn encode_mask_png(mask: &Array2<u8>) -> Result<Vec<u8>> {
    let (h, w) = mask.dim();
    let mut buf = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            buf.put_pixel(x as u32, y as u32, image::Luma([mask[[y, x]]]));
        }
    }
    let mut bytes = Vec::new();
    buf.write_to(
        &mut std::io::Cursor::new(&mut bytes),
        image::ImageFormat::Png,
    )?;
    Ok(bytes)
}

/// Write a [0,1] image to an 8-bit RGB PNG file.
pub fn save_image(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_image_png(img)?)?;
    Ok(())
}

/// Write a {0,255} mask to an 8-bit grayscale PNG file.
pub fn save_mask(path: &Path, mask: &Array2<u8>) -> Result<()> {
    std::fs::write(path, encode_mask_png(mask)?)?;
    Ok(())
}

/// Read an RGB PNG into a [0,1] image.
pub fn load_image(path: &Path) -> Result<Image> {
    let img = image::open(path)?.into_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Image::zeros((3, h as usize, w as usize));
    for y in 0..h {
        for x in 0..w {
            let px = img.get_pixel(x, y);
            for c in 0..3 {
                out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
            }
        }
    }
    Ok(out)
}

/// Read a grayscale PNG as raw 8-bit values.
pub fn load_gray(path: &Path) -> Result<Array2<u8>> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = img.dimensions();
    Ok(Array2::from_shape_fn((h as usize, w as usize), |(y, x)| {
        img.get_pixel(x as u32, y as u32).0[0]
    }))
}

fn mask_to_u8(mask: &Mask) -> Array2<u8> {
    mask.mapv(|v| if v >= 0.5 { 255u8 } else { 0u8 })
}

/// Generate and write the corpus tree plus a manifest; returns the
/// manifest entries in on-disk order.
pub fn build_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    // describe every sample first so generation can run in parallel
    let mut plan: Vec<(String, String, usize)> = Vec::new();
    for product in &spec.products {
        for defect in &spec.defects {
            if spec.is_excluded(product, defect) {
                continue;
            }
            for i in 0..spec.per_combo {
                plan.push((product.clone(), defect.clone(), i));
            }
        }
        for i in 0..spec.good_per_product {
            plan.push((product.clone(), GOOD_LABEL.to_string(), i));
        }
    }
    let generated: Vec<Result<EncodedSample>> = plan
        .par_iter()
        .map(|(product, defect, i)| {
            let seed = sample_seed(spec.seed, product, defect, *i);
            let sample = generate_sample(product, defect, spec.image_size, seed)?;
            let rel = format!("{product}/{defect}/img_{i:04}.png");
            let entry = ManifestEntry {
                path: rel,
                product: product.clone(),
                defect: defect.clone(),
            };
            let img_png = encode_image_png(&sample.image)?;
            let mask_png = encode_mask_png(&mask_to_u8(&sample.mask))?;
            Ok((entry, img_png, mask_png))
        })
        .collect();

    let mut manifest = Vec::with_capacity(plan.len());
    for item in generated {
        let (entry, img_png, mask_png) = item?;
        let img_path = out_dir.join(&entry.path);
        std::fs::create_dir_all(img_path.parent().expect("sample paths have parents"))?;
        std::fs::write(&img_path, img_png)?;
        let mask_path = out_dir.join(entry.path.replace("img_", "mask_"));
        std::fs::write(&mask_path, mask_png)?;
        manifest.push(entry);
    }
    let mut lines = String::new();
    for e in &manifest {
        lines.push_str(&format!("{}\t{}\t{}\n", e.path, e.product, e.defect));
    }
    std::fs::write(out_dir.join("manifest.tsv"), lines)?;
    Ok(manifest)
}

fn sorted_dirs(path: &Path) -> Result<Vec<PathBuf>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(path)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Load every sample under `root/{product}/{defect}/img_*.png`. Masks
/// binarize at 128 (warning on non-binary values); the good-class
/// zero-mask invariant is enforced with the offending path reported.
pub fn load_dataset(root: &Path) -> Result<Vec<DefectSample>> {
    let mut out = Vec::new();
    for product_dir in sorted_dirs(root)? {
        let product = product_dir
            .file_name()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        for defect_dir in sorted_dirs(&product_dir)? {
            let defect = defect_dir
                .file_name()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            let mut images: Vec<PathBuf> = std::fs::read_dir(&defect_dir)?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    p.file_name()
                        .and_then(|s| s.to_str())
                        .is_some_and(|n| n.starts_with("img_") && n.ends_with(".png"))
                })
                .collect();
            images.sort();
            for img_path in images {
                let name = img_path
                    .file_name()
                    .and_then(|s| s.to_str())
                    .unwrap_or_default();
                let mask_path = defect_dir.join(name.replace("img_", "mask_"));
                if !mask_path.exists() {
                    return Err(Error::Dataset {
                        path: img_path.display().to_string(),
                        message: "missing sibling mask file".into(),
                    });
                }
                let image = load_image(&img_path)?;
                let raw = load_gray(&mask_path)?;
                if raw.iter().any(|&v| v != 0 && v != 255) {
                    eprintln!(
                        "warning: non-binary mask values in {}; binarizing at 128",
                        mask_path.display()
                    );
                }
                let mask = raw.mapv(|v| if v >= 128 { 1.0 } else { 0.0 });
                let is_zero = mask.iter().all(|&v| v == 0.0);
                if (defect == GOOD_LABEL) != is_zero {
                    return Err(Error::Dataset {
                        path: mask_path.display().to_string(),
                        message: format!(
                            "label {defect:?} conflicts with {} mask",
                            if is_zero { "an empty" } else { "a nonempty" }
                        ),
                    });
                }
                out.push(DefectSample {
                    image,
                    mask,
                    product: product.clone(),
                    defect: defect.clone(),
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyInput(format!(
            "no samples under {}",
            root.display()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn background_determinism() {
        for p in PRODUCTS {
            let mut r1 = ChaCha8Rng::seed_from_u64(33);
            let mut r2 = ChaCha8Rng::seed_from_u64(33);
            let a = generate_background(p, 32, &mut r1).unwrap();
            let b = generate_background(p, 32, &mut r2).unwrap();
            assert_eq!(a, b);
        }
        assert!(generate_background("plaid", 32, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn same_product_correlates_with_template() {
        for p in PRODUCTS {
            let template = product_template(p, 32).unwrap();
            for seed in 0..20 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let img = generate_background(p, 32, &mut rng).unwrap();
                let corr = template_correlation(&template, &img);
                assert!(corr > 0.5, "{p} seed {seed}: corr {corr}");
            }
        }
    }

    #[test]
    fn cross_product_correlation_is_low() {
        for a in PRODUCTS {
            let ta = product_template(a, 32).unwrap();
            for b in PRODUCTS {
                if a == b {
                    continue;
                }
                for seed in 0..10 {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    let img = generate_background(b, 32, &mut rng).unwrap();
                    let corr = template_correlation(&ta, &img).abs();
                    assert!(corr < 0.3, "{a} vs {b} seed {seed}: corr {corr}");
                }
            }
        }
    }

    #[test]
    fn defect_fraction_bounds_hold() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bg = generate_background("striped", 32, &mut rng).unwrap();
        for d in DEFECTS {
            for seed in 0..333 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (_, mask) = apply_defect(&bg, d, &mut rng).unwrap();
                let frac = mask.sum() / mask.len() as f64;
                assert!(frac > 0.001 && frac < 0.2, "{d} seed {seed}: {frac}");
            }
        }
    }

    #[test]
    fn defect_changes_exactly_mask_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bg = generate_background("checker", 32, &mut rng).unwrap();
        for d in DEFECTS {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let (img, mask) = apply_defect(&bg, d, &mut rng).unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    let changed = (0..3).any(|c| img[[c, y, x]] != bg[[c, y, x]]);
                    assert_eq!(
                        changed,
                        mask[[y, x]] == 1.0,
                        "{d} at ({y},{x}): changed={changed}"
                    );
                }
            }
        }
        assert!(apply_defect(&bg, "dent", &mut rng).is_err());
    }

    #[test]
    fn defect_area_consistent_across_products() {
        for d in DEFECTS {
            let mut means = Vec::new();
            for p in PRODUCTS {
                let mut total = 0.0;
                let n = 64;
                for i in 0..n {
                    let s =
                        generate_sample(p, d, 32, sample_seed(99, p, d, i)).unwrap();
                    total += s.mask.sum();
                }
                means.push(total / n as f64);
            }
            let lo = means.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(hi / lo < 2.0, "{d}: mean areas {means:?}");
        }
    }

    #[test]
    fn corpus_build_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            per_combo: 2,
            good_per_product: 2,
            seed: 3,
            ..CorpusSpec::default_desk()
        };
        let manifest = build_corpus(&spec, dir.path()).unwrap();
        // 3 products x (3 defects x 2 + 2 good) = 24 images
        assert_eq!(manifest.len(), 24);
        let pngs: Vec<_> = walk_pngs(dir.path());
        assert_eq!(pngs.len(), 48); // images plus masks

        let samples = load_dataset(dir.path()).unwrap();
        assert_eq!(samples.len(), 24);
        for s in &samples {
            assert_eq!(s.is_good(), s.mask.sum() == 0.0);
            if !s.is_good() {
                let f = s.mask_fraction();
                assert!(f > 0.001 && f < 0.5);
            }
        }
        let goods = samples.iter().filter(|s| s.is_good()).count();
        assert_eq!(goods, 6);
    }

    fn walk_pngs(root: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(p) = stack.pop() {
            for e in std::fs::read_dir(&p).unwrap().filter_map(|e| e.ok()) {
                let path = e.path();
                if path.is_dir() {
                    stack.push(path);
                } else if path.extension().is_some_and(|x| x == "png") {
                    out.push(path);
                }
            }
        }
        out.sort();
        out
    }

    #[test]
    fn corpus_rebuild_is_byte_identical() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            per_combo: 1,
            good_per_product: 1,
            seed: 8,
            ..CorpusSpec::default_desk()
        };
        build_corpus(&spec, d1.path()).unwrap();
        build_corpus(&spec, d2.path()).unwrap();
        let a = walk_pngs(d1.path());
        let b = walk_pngs(d2.path());
        assert_eq!(a.len(), b.len());
        for (pa, pb) in a.iter().zip(&b) {
            assert_eq!(
                pa.strip_prefix(d1.path()).unwrap(),
                pb.strip_prefix(d2.path()).unwrap()
            );
            assert_eq!(
                std::fs::read(pa).unwrap(),
                std::fs::read(pb).unwrap(),
                "{pa:?} differs"
            );
        }
    }

    #[test]
    fn excluded_combo_is_absent() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            per_combo: 1,
            good_per_product: 1,
            excluded: vec![("disc".into(), "crack".into())],
            ..CorpusSpec::default_desk()
        };
        build_corpus(&spec, dir.path()).unwrap();
        assert!(!dir.path().join("disc/crack").exists());
        assert!(dir.path().join("disc/spot").exists());
    }

    #[test]
    fn loader_rejects_missing_mask_and_bad_invariant() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            per_combo: 1,
            good_per_product: 1,
            ..CorpusSpec::default_desk()
        };
        build_corpus(&spec, dir.path()).unwrap();
        let victim = dir.path().join("striped/scratch/mask_0000.png");
        std::fs::remove_file(&victim).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Dataset { .. }), "{err}");

        // restore an all-zero mask: violates the defect-nonzero invariant
        save_mask(&victim, &Array2::zeros((32, 32))).unwrap();
        let err = load_dataset(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Dataset { .. }), "{err}");
    }

    #[test]
    fn loader_binarizes_gray_masks() {
        let dir = tempfile::tempdir().unwrap();
        let spec = CorpusSpec {
            products: vec!["striped".into()],
            defects: vec!["spot".into()],
            per_combo: 1,
            good_per_product: 0,
            ..CorpusSpec::default_desk()
        };
        build_corpus(&spec, dir.path()).unwrap();
        let mask_path = dir.path().join("striped/spot/mask_0000.png");
        let mut gray = Array2::<u8>::zeros((32, 32));
        gray[[4, 4]] = 200; // above 128: kept
        gray[[5, 5]] = 90; // below 128: dropped
        save_mask(&mask_path, &gray).unwrap();
        let samples = load_dataset(dir.path()).unwrap();
        assert_eq!(samples[0].mask[[4, 4]], 1.0);
        assert_eq!(samples[0].mask[[5, 5]], 0.0);
    }

    #[test]
    fn image_round_trip_quantizes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = generate_background("disc", 16, &mut rng).unwrap();
        save_image(&path, &img).unwrap();
        let back = load_image(&path).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }
}
