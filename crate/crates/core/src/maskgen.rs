//! Mask feature head over concatenated cross-attention maps, step-mask
//! accumulation, and iterative-threshold binarization.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use ndarray::Array2;
use rand::Rng;

/// Grayscale mask with values in [0, 255].
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMask(pub Array2<f64>);

/// Binary mask with values in {0, 255}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask(pub Array2<u8>);

impl BinaryMask {
    pub fn defect_fraction(&self) -> f64 {
        let on = self.0.iter().filter(|&&v| v == 255).count();
        on as f64 / self.0.len() as f64
    }
}

/// Two-layer convolutional head mapping stacked attention maps at patch
/// resolution to a pixel-resolution mask feature.
pub struct MaskHead {
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
    pub in_channels: usize,
    pub hidden: usize,
    pub patch: usize,
}

impl MaskHead {
    pub fn new<R: Rng>(
        prefix: &str,
        in_channels: usize,
        patch: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let hidden = 32;
        let std1 = (1.0 / (in_channels * 9) as f64).sqrt();
        let std2 = (1.0 / (hidden * 9) as f64).sqrt();
        let conv1_w = store.add_normal(
            &format!("{prefix}.conv1.w"),
            &[hidden, in_channels * 9],
            std1,
            rng,
        );
        let conv1_b = store.add_zeros(&format!("{prefix}.conv1.b"), &[1, hidden]);
        let conv2_w = store.add_normal(
            &format!("{prefix}.conv2.w"),
            &[patch * patch, hidden * 9],
            std2,
            rng,
        );
        let conv2_b = store.add_zeros(&format!("{prefix}.conv2.b"), &[1, patch * patch]);
        Self {
            conv1_w,
            conv1_b,
            conv2_w,
            conv2_b,
            in_channels,
            hidden,
            patch,
        }
    }

    /// Rebind to existing parameters (checkpoint reload path).
    pub fn from_store(
        prefix: &str,
        in_channels: usize,
        patch: usize,
        store: &ParamStore,
    ) -> Result<Self> {
        let find = |suffix: &str| {
            store
                .lookup(&format!("{prefix}.{suffix}"))
                .ok_or_else(|| Error::CheckpointFormat(format!("missing tensor {prefix}.{suffix}")))
        };
        Ok(Self {
            conv1_w: find("conv1.w")?,
            conv1_b: find("conv1.b")?,
            conv2_w: find("conv2.w")?,
            conv2_b: find("conv2.b")?,
            in_channels,
            hidden: 32,
            patch,
        })
    }

    /// 3x3 conv with replicate padding, bias, expressed over graph ops.
    fn conv(g: &mut Graph, x: Var, w: Var, b: Var, h: usize, wdt: usize, out_ch: usize) -> Var {
        let cols = g.im2col(x, 3, 1);
        let o = g.matmul(w, cols); // (out_ch, h*w)
        let ot = g.permute(o, &[1, 0]);
        let ot = g.add_row(ot, b);
        let o = g.permute(ot, &[1, 0]);
        g.reshape(o, &[out_ch, h, wdt])
    }

    /// Maps `(in_channels, H', W')` stacked attention maps to an
    /// `(H'*patch, W'*patch)` mask feature.
    pub fn forward(&self, g: &mut Graph, params: &[Var], maps: Var) -> Result<Var> {
        let shape = g.value(maps).shape().to_vec();
        if shape.len() != 3 || shape[0] != self.in_channels {
            return Err(Error::shape([self.in_channels], shape));
        }
        let (hp, wp) = (shape[1], shape[2]);
        let h1 = Self::conv(
            g,
            maps,
            params[self.conv1_w.0],
            params[self.conv1_b.0],
            hp,
            wp,
            self.hidden,
        );
        let h1 = g.silu(h1);
        let h2 = Self::conv(
            g,
            h1,
            params[self.conv2_w.0],
            params[self.conv2_b.0],
            hp,
            wp,
            self.patch * self.patch,
        );
        let px = g.depth_to_space(h2, self.patch);
        Ok(g.reshape(px, &[hp * self.patch, wp * self.patch]))
    }
}

/// Elementwise mean of the final `window` masks, min-max scaled to
/// [0, 255]. A constant mean (no contrast) scales to all zeros.
pub fn accumulate(masks: &[Array2<f64>], window: usize) -> Result<GrayMask> {
    if masks.is_empty() {
        return Err(Error::EmptyInput("no step masks to accumulate".into()));
    }
    if window == 0 || window > masks.len() {
        return Err(Error::InvalidConfig(format!(
            "window {window} outside [1, {}]",
            masks.len()
        )));
    }
    let tail = &masks[masks.len() - window..];
    let mut mean = Array2::<f64>::zeros(tail[0].raw_dim());
    for m in tail {
        if m.raw_dim() != mean.raw_dim() {
            return Err(Error::shape(mean.shape(), m.shape()));
        }
        mean += m;
    }
    mean /= window as f64;
    let lo = mean.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_finite() || hi - lo == 0.0 {
        return Ok(GrayMask(Array2::zeros(mean.raw_dim())));
    }
    Ok(GrayMask(mean.mapv(|v| (v - lo) / (hi - lo) * 255.0)))
}

/// Ridler-Calvard mean-split fixed point. Errors on constant input.
pub fn iterative_threshold(gray: &GrayMask) -> Result<f64> {
    let g = &gray.0;
    if g.is_empty() {
        return Err(Error::EmptyInput("empty mask".into()));
    }
    let lo = g.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo == 0.0 {
        return Err(Error::Degenerate("constant image has no threshold".into()));
    }
    let mut t = g.sum() / g.len() as f64;
    for _ in 0..50 {
        let (mut lo_sum, mut lo_n, mut hi_sum, mut hi_n) = (0.0, 0usize, 0.0, 0usize);
        for &v in g.iter() {
            if v < t {
                lo_sum += v;
                lo_n += 1;
            } else {
                hi_sum += v;
                hi_n += 1;
            }
        }
        // one side empty: threshold sits outside the data range; recenter
        let next = if lo_n == 0 || hi_n == 0 {
            (lo + hi) / 2.0
        } else {
            (lo_sum / lo_n as f64 + hi_sum / hi_n as f64) / 2.0
        };
        if (next - t).abs() < 0.5 {
            return Ok(next);
        }
        t = next;
    }
    Ok(t)
}

/// Threshold a gray mask: pixels at or above the iterative threshold map
/// to 255. Constant inputs fold to the empty mask.
pub fn binarize(gray: &GrayMask) -> BinaryMask {
    match iterative_threshold(gray) {
        Ok(t) => BinaryMask(gray.0.mapv(|v| if v >= t { 255u8 } else { 0u8 })),
        Err(_) => BinaryMask(Array2::zeros(gray.0.raw_dim())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bimodal() -> GrayMask {
        let mut m = Array2::zeros((4, 5));
        for (i, v) in m.iter_mut().enumerate() {
            *v = if i < 10 { 50.0 } else { 200.0 };
        }
        GrayMask(m)
    }

    #[test]
    fn bimodal_threshold_is_midpoint() {
        let t = iterative_threshold(&bimodal()).unwrap();
        assert!((t - 125.0).abs() < 1e-9);
    }

    #[test]
    fn bimodal_binarize_splits_evenly() {
        let b = binarize(&bimodal());
        let on = b.0.iter().filter(|&&v| v == 255).count();
        let off = b.0.iter().filter(|&&v| v == 0).count();
        assert_eq!((on, off), (10, 10));
    }

    #[test]
    fn symmetric_histogram_threshold() {
        let mut m = Array2::zeros((2, 8));
        for (i, v) in m.iter_mut().enumerate() {
            *v = if i % 2 == 0 { 96.0 } else { 160.0 };
        }
        let t = iterative_threshold(&GrayMask(m)).unwrap();
        assert!((t - 128.0).abs() < 1.0);
    }

    #[test]
    fn constant_image_degenerates() {
        let g = GrayMask(Array2::from_elem((3, 3), 7.0));
        assert!(iterative_threshold(&g).is_err());
        let b = binarize(&g);
        assert!(b.0.iter().all(|&v| v == 0));
    }

    #[test]
    fn accumulate_window_arithmetic() {
        let a = Array2::from_elem((2, 2), 0.0);
        let mut b = Array2::from_elem((2, 2), 100.0);
        b[[0, 0]] = 0.0; // keep contrast so scaling is well defined
        let out = accumulate(&[a.clone(), b.clone()], 2).unwrap();
        // mean is 0 at (0,0) and 50 elsewhere; scaled to 0 / 255
        assert_eq!(out.0[[0, 0]], 0.0);
        assert_eq!(out.0[[1, 1]], 255.0);

        let last_only = accumulate(&[a, b.clone()], 1).unwrap();
        let direct = accumulate(&[b], 1).unwrap();
        assert_eq!(last_only, direct);
    }

    #[test]
    fn accumulate_two_constant_masks() {
        let a = Array2::from_elem((2, 2), 0.0);
        let b = Array2::from_elem((2, 2), 100.0);
        // mean is all-50: constant, so scaling degenerates to zeros
        let out = accumulate(&[a, b], 2).unwrap();
        assert!(out.0.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn accumulate_ignores_masks_outside_window() {
        let junk = Array2::from_elem((2, 2), 123.0);
        let mut real = Array2::zeros((2, 2));
        real[[0, 0]] = 1.0;
        let with_junk = accumulate(&[junk, real.clone()], 1).unwrap();
        let alone = accumulate(&[real], 1).unwrap();
        assert_eq!(with_junk, alone);
    }

    #[test]
    fn accumulate_rejects_bad_window() {
        let a = Array2::zeros((2, 2));
        assert!(accumulate(std::slice::from_ref(&a), 0).is_err());
        assert!(accumulate(&[a], 2).is_err());
        assert!(accumulate(&[], 1).is_err());
    }

    #[test]
    fn head_constant_input_gives_constant_output() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let head = MaskHead::new("mh", 8, 2, &mut store, &mut rng);
        let mut g = Graph::new();
        let params = store.register_all(&mut g);
        let maps = g.constant(ndarray::ArrayD::zeros(ndarray::IxDyn(&[8, 4, 4])));
        let out = head.forward(&mut g, &params, maps).unwrap();
        let v = g.value(out);
        assert_eq!(v.shape(), &[8, 8]);
        let first = v.iter().next().cloned().unwrap();
        // replicate padding keeps a constant input constant through convs
        for &x in v.iter() {
            assert!((x - first).abs() < 1e-12);
        }
    }

    #[test]
    fn head_gradient_reaches_parameters() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let head = MaskHead::new("mh", 4, 2, &mut store, &mut rng);
        let w1 = store.lookup("mh.conv1.w").unwrap();

        let maps_val = ndarray::ArrayD::from_shape_fn(ndarray::IxDyn(&[4, 3, 3]), |ix| {
            (ix[0] + ix[1] * 2 + ix[2]) as f64 * 0.1
        });
        let target = ndarray::ArrayD::from_elem(ndarray::IxDyn(&[6, 6]), 0.5);

        let loss_for = |store: &ParamStore| -> f64 {
            let mut g = Graph::new();
            let params = store.register_all(&mut g);
            let maps = g.constant(maps_val.clone());
            let out = head.forward(&mut g, &params, maps).unwrap();
            let tgt = g.constant(target.clone());
            let d = g.sub(out, tgt);
            let sq = g.square(d);
            let l = g.mean_all(sq);
            g.scalar_value(l)
        };

        let mut g = Graph::new();
        let params = store.register_all(&mut g);
        let maps = g.constant(maps_val.clone());
        let out = head.forward(&mut g, &params, maps).unwrap();
        let tgt = g.constant(target.clone());
        let d = g.sub(out, tgt);
        let sq = g.square(d);
        let l = g.mean_all(sq);
        let grads = g.backward(l);
        let gw = grads.get(params[w1.0]).unwrap().clone();
        assert!(gw.iter().any(|&v| v != 0.0), "gradient must reach conv1.w");

        // finite-difference spot check on one weight
        let h = 1e-5;
        let mut plus = ParamStore::new();
        let mut minus = ParamStore::new();
        for (name, val) in store.iter() {
            plus.add(name, val.clone());
            minus.add(name, val.clone());
        }
        plus.get_mut(w1).as_slice_mut().unwrap()[0] += h;
        minus.get_mut(w1).as_slice_mut().unwrap()[0] -= h;
        let fd = (loss_for(&plus) - loss_for(&minus)) / (2.0 * h);
        let ad = gw.as_slice().unwrap()[0];
        assert!((ad - fd).abs() < 1e-6, "ad={ad} fd={fd}");
    }

    proptest! {
        #[test]
        fn binarize_codomain_and_idempotence(vals in proptest::collection::vec(0.0f64..255.0, 12)) {
            let g = GrayMask(Array2::from_shape_vec((3, 4), vals).unwrap());
            let b = binarize(&g);
            prop_assert!(b.0.iter().all(|&v| v == 0 || v == 255));
            let again = binarize(&GrayMask(b.0.mapv(f64::from)));
            prop_assert_eq!(b, again);
        }

        #[test]
        fn threshold_within_range(vals in proptest::collection::vec(0.0f64..255.0, 16)) {
            let g = GrayMask(Array2::from_shape_vec((4, 4), vals).unwrap());
            if let Ok(t) = iterative_threshold(&g) {
                let lo = g.0.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = g.0.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(t >= lo && t <= hi);
            }
        }
    }
}
