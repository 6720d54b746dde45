//! Checkpoint-backed sampling shared by sample, sweep, and zero-shot.

use crate::manifest::RunManifest;
use crate::CmdError;
use defectgen_core::data::{save_image, save_mask};
use defectgen_core::guidance::sample;
use defectgen_core::maskgen::binarize;
use defectgen_core::{BinaryMask, GuidanceConfig, Image, TrainableSystem};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

/// One generated cell: guidance strength, its own seed, image, binarized mask.
pub struct Cell {
    pub w_d: f64,
    pub seed: u64,
    pub image: Image,
    pub mask: BinaryMask,
}

impl Cell {
    pub fn mask_fraction(&self) -> f64 {
        self.mask.defect_fraction()
    }
}

/// Reject labels the checkpoint vocabulary has never seen.
pub fn check_label(sys: &TrainableSystem, label: &str, role: &str) -> Result<(), CmdError> {
    if sys.encoder().vocab().labels().iter().any(|l| l == label) {
        Ok(())
    } else {
        Err(CmdError::Usage(format!("unknown {role} label {label:?}")))
    }
}

/// Generate one cell per (w_d, seed) pair, each from its own stream.
pub fn sample_cells(
    sys: &TrainableSystem,
    product: &str,
    defect: &str,
    w_p: f64,
    steps: usize,
    cells: &[(f64, u64)],
) -> Result<Vec<Cell>, CmdError> {
    let outs: Vec<Result<Cell, defectgen_core::Error>> = cells
        .par_iter()
        .map(|&(w_d, seed)| {
            let g = GuidanceConfig::new(w_p, w_d, steps);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = sample(sys, defect, product, &g, sys.schedule(), &mut rng)?;
            Ok(Cell {
                w_d,
                seed,
                image: out.image,
                mask: binarize(&out.mask),
            })
        })
        .collect();
    let mut done = Vec::with_capacity(outs.len());
    for o in outs {
        done.push(o?);
    }
    Ok(done)
}

/// Minimal decimal rendering of a guidance weight for filenames.
pub fn fmt_weight(w: f64) -> String {
    format!("{w}")
}

/// Write a cell's image and mask as {product}_{defect}_{wd}_{seed}.png pair.
pub fn write_cell(
    dir: &Path,
    product: &str,
    defect: &str,
    cell: &Cell,
    man: &mut RunManifest,
) -> Result<(), CmdError> {
    let stem = format!("{product}_{defect}_{}_{}", fmt_weight(cell.w_d), cell.seed);
    let img_path = dir.join(format!("{stem}.png"));
    let mask_path = dir.join(format!("{stem}_mask.png"));
    save_image(&img_path, &cell.image)?;
    save_mask(&mask_path, &cell.mask.0)?;
    man.record_output(&img_path);
    man.record_output(&mask_path);
    Ok(())
}

/// Tile row-major cells into one image: rows are seeds, columns are strengths.
pub fn grid_image(cells: &[Cell], rows: usize, cols: usize) -> Image {
    assert_eq!(cells.len(), rows * cols, "grid cell count");
    let (c, h, w) = cells[0].image.dim();
    let mut grid = Image::zeros((c, rows * h, cols * w));
    for (i, cell) in cells.iter().enumerate() {
        let (r, col) = (i / cols, i % cols);
        grid.slice_mut(ndarray::s![
            ..,
            r * h..(r + 1) * h,
            col * w..(col + 1) * w
        ])
        .assign(&cell.image);
    }
    grid
}
