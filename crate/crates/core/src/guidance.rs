//! Two-scale guided denoising and the sampling loop producing image and
//! mask pairs. The guided prediction combines three conditional passes:
//! unconditional, product-only, and defect-only.

use crate::conditioning::ConditionPair;
use crate::error::{Error, Result};
use crate::maskgen::{accumulate, GrayMask};
use crate::model::Denoiser;
use crate::schedule::NoiseSchedule;
use crate::Image;
use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Guidance scales and sampling geometry.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GuidanceConfig {
    /// Background perturbation scale.
    pub w_p: f64,
    /// Defect strength scale.
    pub w_d: f64,
    /// Reverse steps to run; at most the schedule length.
    pub steps: usize,
    /// Number of final steps whose decoded masks are averaged.
    pub mask_window: usize,
}

impl GuidanceConfig {
    pub fn new(w_p: f64, w_d: f64, steps: usize) -> Self {
        Self {
            w_p,
            w_d,
            steps,
            mask_window: Self::default_mask_window(steps),
        }
    }

    /// Average the last tenth of the trajectory, capped at 100 steps.
    pub fn default_mask_window(steps: usize) -> usize {
        100.min(steps.div_ceil(10)).max(1)
    }

    pub fn validate(&self, schedule_len: usize) -> Result<()> {
        if self.w_p < 0.0 || self.w_d < 0.0 {
            return Err(Error::InvalidConfig("guidance scales must be >= 0".into()));
        }
        if self.steps == 0 || self.steps > schedule_len {
            return Err(Error::InvalidConfig(format!(
                "steps {} outside [1, {schedule_len}]",
                self.steps
            )));
        }
        if self.mask_window == 0 || self.mask_window > self.steps {
            return Err(Error::InvalidConfig(format!(
                "mask window {} outside [1, {}]",
                self.mask_window, self.steps
            )));
        }
        Ok(())
    }
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::new(1.0, 1.0, 50)
    }
}

/// A generated image with its averaged grayscale mask.
pub struct SampleOutput {
    pub image: Image,
    pub mask: GrayMask,
}

fn combine(u: &Image, p: &Image, d: &Image, w_p: f64, w_d: f64) -> Image {
    u + &((p - u) * w_p) + ((d - u) * w_d)
}

/// The three condition pairs evaluated for a guided step, in eval order.
fn guidance_conditions(defect_cond: &str, product_cond: &str) -> [ConditionPair; 3] {
    [
        ConditionPair::unconditional(),
        ConditionPair::new(crate::conditioning::GOOD_LABEL, product_cond),
        ConditionPair::new(defect_cond, crate::conditioning::NULL_TOKEN),
    ]
}

/// Guided noise prediction from exactly three denoiser evaluations:
/// unconditional + w_p * background direction + w_d * defect direction.
pub fn double_free_eps<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_t: &Image,
    t: usize,
    defect_cond: &str,
    product_cond: &str,
    g: &GuidanceConfig,
) -> Result<Image> {
    let outs = denoiser.eval_many(x_t, t, &guidance_conditions(defect_cond, product_cond))?;
    Ok(combine(
        &outs[0].eps_hat,
        &outs[1].eps_hat,
        &outs[2].eps_hat,
        g.w_p,
        g.w_d,
    ))
}

/// Zero-shot transfer: identical arithmetic with a defect learned on
/// other products applied to a target product's background.
pub fn zero_shot_eps<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_t: &Image,
    t: usize,
    source_defect: &str,
    target_product: &str,
    g: &GuidanceConfig,
) -> Result<Image> {
    double_free_eps(denoiser, x_t, t, source_defect, target_product, g)
}

/// Defect perturbation direction: defect-conditional minus unconditional.
pub fn defect_direction<D: Denoiser + ?Sized>(
    denoiser: &D,
    x_t: &Image,
    t: usize,
    defect_cond: &str,
) -> Result<Image> {
    let conds = [
        ConditionPair::new(defect_cond, crate::conditioning::NULL_TOKEN),
        ConditionPair::unconditional(),
    ];
    let outs = denoiser.eval_many(x_t, t, &conds)?;
    Ok(&outs[0].eps_hat - &outs[1].eps_hat)
}

/// Full ancestral sampling loop. Starts from standard normal noise,
/// applies the guided prediction at every step, collects the decoded
/// mask feature of the defect-conditional pass, and averages the final
/// `mask_window` masks into a grayscale mask. GOOD requests generate no
/// defect, so their mask is empty.
pub fn sample<D: Denoiser + ?Sized, R: Rng>(
    denoiser: &D,
    defect_cond: &str,
    product_cond: &str,
    g: &GuidanceConfig,
    sched: &NoiseSchedule,
    rng: &mut R,
) -> Result<SampleOutput> {
    g.validate(sched.t_total)?;
    let (sub, t_map) = sched.respace(g.steps)?;
    let (c, h, w) = denoiser.image_shape();
    let mut x = Image::from_shape_fn((c, h, w), |_| rng.sample::<f64, _>(StandardNormal));
    let conds = guidance_conditions(defect_cond, product_cond);
    // a GOOD request asks for no defect, so no mask is collected
    let wants_mask = defect_cond != crate::conditioning::GOOD_LABEL;
    let mut step_masks: Vec<Array2<f64>> = Vec::with_capacity(g.steps);
    for i in (0..g.steps).rev() {
        let outs = denoiser.eval_many(&x, t_map[i], &conds)?;
        if wants_mask {
            if let Some(mf) = &outs[2].mask_feature {
                step_masks.push(mf.clone());
            }
        }
        let eps = combine(
            &outs[0].eps_hat,
            &outs[1].eps_hat,
            &outs[2].eps_hat,
            g.w_p,
            g.w_d,
        );
        x = sub.reverse_step(&x, &eps, i, rng)?;
    }
    let mask = if step_masks.is_empty() {
        GrayMask(Array2::zeros((h, w)))
    } else {
        accumulate(&step_masks, g.mask_window.min(step_masks.len()))?
    };
    Ok(SampleOutput { image: x, mask })
}
