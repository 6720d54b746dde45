//! Training loop tying schedule, conditioning, model, and losses
//! together: condition dropout, attention-weighted defect losses, and
//! ablation switches, with bit-reproducible per-step randomness.

use crate::autodiff::Graph;
use crate::conditioning::{double_free_dropout, ConditionPair, TextEncoder, Vocabulary, GOOD_LABEL};
use crate::data::DefectSample;
use crate::error::{Error, Result};
use crate::losses::{
    attention_ratio, average_attention, clamp_ratio, resize_mask_to_grid, LossBreakdown, LossNorm,
};
use crate::model::{embed_conditions, Denoiser, DenoiserOutput, Tdia, TdiaConfig};
use crate::params::{Adam, ParamStore};
use crate::schedule::NoiseSchedule;
use crate::{Image, Mask};
use ndarray::{Array3, ArrayD, Ix3, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Position of the defect-name token inside the routed prompt; the
/// template words occupy positions 0..3.
const DEFECT_TOKEN_INDEX: usize = 3;

/// Optimizer moments plus step counter, in store order.
pub type AdamState = (Vec<ArrayD<f64>>, Vec<ArrayD<f64>>, u64);

type SamplePass = (Vec<Option<ArrayD<f64>>>, LossBreakdown);

/// Everything the training loop needs to know, including the model
/// geometry and the ablation switches.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub model: TdiaConfig,
    /// Mask-loss weight in the total objective.
    pub lambda_mask: f64,
    /// Product-condition dropout probability.
    pub p1: f64,
    /// Defect-condition dropout probability.
    pub p2: f64,
    /// Attention-ratio stabilizer.
    pub alpha: f64,
    /// Bypass the adaptive ratio with a constant weight.
    pub fixed_r: Option<f64>,
    /// Route the fusion prompt to all three block groups.
    pub fused_prompt_only: bool,
    /// Drop the fusion block group entirely.
    pub no_fusion: bool,
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub t_total: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub grad_clip: f64,
    pub loss_norm: LossNorm,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: TdiaConfig::default(),
            lambda_mask: 0.2,
            p1: 0.2,
            p2: 0.2,
            alpha: 0.001,
            fixed_r: None,
            fused_prompt_only: false,
            no_fusion: false,
            steps: 500,
            batch: 8,
            lr: 3e-3,
            seed: 0,
            t_total: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            grad_clip: 1.0,
            loss_norm: LossNorm::Mean,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p1) || !(0.0..=1.0).contains(&self.p2) {
            return Err(Error::InvalidConfig("p1 and p2 must lie in [0,1]".into()));
        }
        if self.alpha <= 0.0 {
            return Err(Error::InvalidConfig("alpha must be positive".into()));
        }
        if let Some(r) = self.fixed_r {
            if !(1.0..=16.0).contains(&r) {
                return Err(Error::InvalidConfig(format!(
                    "fixed_r {r} outside [1,16]"
                )));
            }
        }
        if self.lambda_mask < 0.0 {
            return Err(Error::InvalidConfig("lambda_mask must be non-negative".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be at least 1".into()));
        }
        if self.lr <= 0.0 {
            return Err(Error::InvalidConfig("learning rate must be positive".into()));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::InvalidConfig("grad_clip must be positive".into()));
        }
        self.effective_model().validate()
    }

    /// Model geometry with the ablation flags applied.
    pub fn effective_model(&self) -> TdiaConfig {
        let mut m = self.model.clone();
        if self.no_fusion {
            m.k_fusion = 0;
        }
        if self.fused_prompt_only {
            m.fused_prompt_only = true;
            // fusion prompt is padded to template + defect + product
            m.defect_prompt_len = 5;
        }
        m
    }
}

/// Per-step RNG stream: every draw at a given (seed, step) is identical
/// whether the run was interrupted or not.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mixed = seed ^ (step.wrapping_add(1)).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// Standard-normal image drawn in row-major element order.
pub fn draw_noise<R: Rng>(shape: (usize, usize, usize), rng: &mut R) -> Image {
    Image::from_shape_fn(shape, |_| rng.sample::<f64, _>(rand_distr::StandardNormal))
}

struct Draw {
    pair: ConditionPair,
    t: usize,
    noise: Image,
}

/// Model, encoder, optimizer, and schedule under one training state.
pub struct TrainableSystem {
    cfg: TrainConfig,
    store: ParamStore,
    encoder: TextEncoder,
    model: Tdia,
    schedule: NoiseSchedule,
    opt: Adam,
    step: u64,
    trained_combos: BTreeSet<(String, String)>,
}

impl TrainableSystem {
    /// Fresh system with seeded initialization. The vocabulary must
    /// already contain every product and defect label.
    pub fn new(cfg: TrainConfig, vocab: Vocabulary) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let encoder = TextEncoder::new(vocab, cfg.model.cond_width, &mut store, &mut rng);
        let model = Tdia::new(cfg.effective_model(), &mut store, &mut rng)?;
        let schedule = NoiseSchedule::linear(cfg.t_total, cfg.beta_start, cfg.beta_end)?;
        let opt = Adam::new(&store, cfg.lr);
        Ok(Self {
            cfg,
            store,
            encoder,
            model,
            schedule,
            opt,
            step: 0,
            trained_combos: BTreeSet::new(),
        })
    }

    /// Build the vocabulary from the dataset's labels, then construct.
    pub fn from_dataset(cfg: TrainConfig, data: &[DefectSample]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("training dataset is empty".into()));
        }
        let mut labels: Vec<String> = data
            .iter()
            .flat_map(|s| [s.product.clone(), s.defect.clone()])
            .collect();
        labels.sort();
        labels.dedup();
        let vocab = Vocabulary::from_labels(&labels)?;
        let mut sys = Self::new(cfg, vocab)?;
        sys.observe_combos(data);
        Ok(sys)
    }

    /// Reassemble from checkpoint parts: reconstruct the layout from the
    /// config, then overwrite every tensor by name. The tensor list must
    /// cover the store exactly.
    pub fn from_parts(
        cfg: TrainConfig,
        vocab: Vocabulary,
        tensors: Vec<(String, ArrayD<f64>)>,
        step: u64,
        trained_combos: BTreeSet<(String, String)>,
        adam_state: Option<AdamState>,
    ) -> Result<Self> {
        let mut sys = Self::new(cfg, vocab)?;
        if tensors.len() != sys.store.len() {
            return Err(Error::CheckpointFormat(format!(
                "expected {} tensors, got {}",
                sys.store.len(),
                tensors.len()
            )));
        }
        for (name, value) in tensors {
            let id = sys.store.lookup(&name).ok_or_else(|| {
                Error::CheckpointFormat(format!("unexpected parameter {name:?}"))
            })?;
            if sys.store.get(id).shape() != value.shape() {
                return Err(Error::CheckpointFormat(format!(
                    "parameter {name:?}: shape {:?} does not match {:?}",
                    value.shape(),
                    sys.store.get(id).shape()
                )));
            }
            *sys.store.get_mut(id) = value;
        }
        if let Some((m, v, t)) = adam_state {
            sys.opt.restore(m, v, t);
        }
        sys.step = step;
        sys.trained_combos = trained_combos;
        Ok(sys)
    }

    pub fn cfg(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &TextEncoder {
        &self.encoder
    }

    pub fn model(&self) -> &Tdia {
        &self.model
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn optimizer(&self) -> &Adam {
        &self.opt
    }

    pub fn trained_combos(&self) -> &BTreeSet<(String, String)> {
        &self.trained_combos
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Record every defect (product, defect) pair present in the data.
    pub fn observe_combos(&mut self, data: &[DefectSample]) {
        for s in data {
            if !s.is_good() {
                self.trained_combos
                    .insert((s.product.clone(), s.defect.clone()));
            }
        }
    }

    /// One optimizer update from a batch. Dropout, timestep, and noise
    /// draws happen sequentially in batch order; gradients of the
    /// per-sample graphs are averaged in index order, so the result is
    /// independent of thread scheduling.
    pub fn train_step<R: Rng>(
        &mut self,
        batch: &[&DefectSample],
        rng: &mut R,
    ) -> Result<LossBreakdown> {
        if batch.is_empty() {
            return Err(Error::EmptyInput("training batch is empty".into()));
        }
        let shape = self.model.cfg().image_shape();
        let draws: Vec<Draw> = batch
            .iter()
            .map(|s| {
                let pair =
                    double_free_dropout(&s.defect, &s.product, self.cfg.p1, self.cfg.p2, rng);
                let t = rng.random_range(0..self.schedule.t_total);
                let noise = draw_noise(shape, rng);
                Draw { pair, t, noise }
            })
            .collect();

        let passes: Vec<Result<SamplePass>> = batch
            .par_iter()
            .zip(&draws)
            .map(|(s, d)| self.sample_pass(s, d))
            .collect();

        let n = self.store.len();
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; n];
        let mut sum = LossBreakdown {
            recon: 0.0,
            defect: 0.0,
            mask: 0.0,
            total: 0.0,
            ratio_r: 0.0,
        };
        let mut r_count = 0usize;
        for pass in passes {
            let (g, lb) = pass?;
            for (slot, grad) in grads.iter_mut().zip(g) {
                if let Some(grad) = grad {
                    match slot {
                        Some(acc) => *acc += &grad,
                        None => *slot = Some(grad),
                    }
                }
            }
            sum.recon += lb.recon;
            sum.defect += lb.defect;
            sum.mask += lb.mask;
            sum.total += lb.total;
            if lb.ratio_r != 0.0 {
                sum.ratio_r += lb.ratio_r;
                r_count += 1;
            }
        }
        let b = batch.len() as f64;
        for slot in grads.iter_mut().flatten() {
            slot.mapv_inplace(|v| v / b);
        }
        let breakdown = LossBreakdown {
            recon: sum.recon / b,
            defect: sum.defect / b,
            mask: sum.mask / b,
            total: sum.total / b,
            ratio_r: if r_count == 0 { 0.0 } else { sum.ratio_r / r_count as f64 },
        };
        for (value, component) in [
            (breakdown.recon, "recon"),
            (breakdown.defect, "defect"),
            (breakdown.mask, "mask"),
            (breakdown.total, "total"),
        ] {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: self.step,
                    component: component.into(),
                });
            }
        }
        self.opt.step(&mut self.store, &grads, Some(self.cfg.grad_clip));
        Ok(breakdown)
    }

    /// Loss graph and gradients for one sample. The ratio weight R is
    /// computed from detached attention values and enters as a constant.
    fn sample_pass(&self, sample: &DefectSample, draw: &Draw) -> Result<SamplePass> {
        let mut g = Graph::new();
        let params = self.store.register_all(&mut g);
        let emb = embed_conditions(
            &mut g,
            &params,
            &self.encoder,
            &draw.pair,
            self.cfg.fused_prompt_only,
        )?;
        let x_t = self.schedule.q_sample(&sample.image, draw.t, &draw.noise)?;
        let x = g.constant(x_t.into_dyn());
        let fw = self.model.forward_graph(&mut g, &params, x, draw.t, &emb)?;

        let eps = g.constant(draw.noise.clone().into_dyn());
        let diff = g.sub(fw.eps_hat, eps);
        let sq = g.square(diff);
        let recon = g.mean_all(sq);

        let with_defect = !sample.is_good() && draw.pair.defect != GOOD_LABEL;
        let (loss, defect_v, mask_v, r) = if with_defect {
            let r = match self.cfg.fixed_r {
                Some(r) => r,
                None => {
                    let maps: Vec<Array3<f64>> = fw
                        .attn_maps
                        .iter()
                        .map(|&m| {
                            g.value(m)
                                .clone()
                                .into_dimensionality::<Ix3>()
                                .expect("attention maps are rank 3")
                        })
                        .collect();
                    let avg = average_attention(&maps, &[DEFECT_TOKEN_INDEX])?;
                    let grid_mask = resize_mask_to_grid(&sample.mask, avg.nrows())?;
                    clamp_ratio(attention_ratio(&avg, &grid_mask, self.cfg.alpha)?)
                }
            };
            let dloss = self.defect_term(&mut g, sq, &sample.mask, r);
            let mloss = fw.mask_feature.map(|feat| self.mask_term(&mut g, feat, &sample.mask));
            let mut total = g.add(recon, dloss);
            if let Some(m) = mloss {
                let weighted = g.mul_scalar(m, self.cfg.lambda_mask);
                total = g.add(total, weighted);
            }
            let dv = scalar(&g, dloss);
            let mv = mloss.map(|m| scalar(&g, m)).unwrap_or(0.0);
            (total, dv, mv, r)
        } else {
            (recon, 0.0, 0.0, 0.0)
        };
        let recon_v = scalar(&g, recon);
        let total_v = scalar(&g, loss);
        let grads = g.backward(loss);
        let per_param: Vec<Option<ArrayD<f64>>> =
            params.iter().map(|v| grads.get(*v).cloned()).collect();
        Ok((
            per_param,
            LossBreakdown {
                recon: recon_v,
                defect: defect_v,
                mask: mask_v,
                total: total_v,
                ratio_r: r,
            },
        ))
    }

    /// R-weighted squared error restricted to mask pixels, broadcast
    /// over channels; value matches the plain defect-loss oracle.
    fn defect_term(&self, g: &mut Graph, sq: crate::autodiff::Var, mask: &Mask, r: f64) -> crate::autodiff::Var {
        let (c, h, w) = self.model.cfg().image_shape();
        let mut m3 = ArrayD::zeros(IxDyn(&[c, h, w]));
        for ci in 0..c {
            for y in 0..h {
                for x in 0..w {
                    m3[[ci, y, x]] = mask[[y, x]];
                }
            }
        }
        let m3 = g.constant(m3);
        let masked = g.mul(sq, m3);
        // normalize before the R weighting so values bit-match the
        // plain defect-loss oracle
        let base = match self.cfg.loss_norm {
            LossNorm::Mean => g.mean_all(masked),
            LossNorm::Sum => g.sum_all(masked),
        };
        g.mul_scalar(base, r)
    }

    /// Squared error between the predicted mask feature and the truth.
    fn mask_term(&self, g: &mut Graph, feat: crate::autodiff::Var, mask: &Mask) -> crate::autodiff::Var {
        let m = g.constant(mask.clone().into_dyn());
        let d = g.sub(feat, m);
        let sq = g.square(d);
        match self.cfg.loss_norm {
            LossNorm::Mean => g.mean_all(sq),
            LossNorm::Sum => g.sum_all(sq),
        }
    }

    /// Run training up to `target` total steps, invoking the callback
    /// after each step with the step number and averaged losses.
    pub fn fit_to(
        &mut self,
        data: &[DefectSample],
        target: u64,
        mut on_step: impl FnMut(u64, &LossBreakdown) -> Result<()>,
    ) -> Result<()> {
        if data.is_empty() {
            return Err(Error::EmptyInput("training dataset is empty".into()));
        }
        self.observe_combos(data);
        while self.step < target {
            let mut rng = step_rng(self.cfg.seed, self.step);
            let batch: Vec<&DefectSample> = (0..self.cfg.batch)
                .map(|_| &data[rng.random_range(0..data.len())])
                .collect();
            let lb = self.train_step(&batch, &mut rng)?;
            self.step += 1;
            on_step(self.step, &lb)?;
        }
        Ok(())
    }

    /// Train to the configured step budget.
    pub fn fit(
        &mut self,
        data: &[DefectSample],
        on_step: impl FnMut(u64, &LossBreakdown) -> Result<()>,
    ) -> Result<()> {
        let target = self.cfg.steps;
        self.fit_to(data, target, on_step)
    }
}

fn scalar(g: &Graph, v: crate::autodiff::Var) -> f64 {
    *g.value(v).first().expect("scalar node")
}

impl Denoiser for TrainableSystem {
    fn image_shape(&self) -> (usize, usize, usize) {
        self.model.cfg().image_shape()
    }

    fn eval(&self, x_t: &Image, t: usize, cond: &ConditionPair) -> Result<DenoiserOutput> {
        self.model
            .forward_eval(&self.store, &self.encoder, x_t, t, cond)
    }

    fn eval_many(
        &self,
        x_t: &Image,
        t: usize,
        conds: &[ConditionPair],
    ) -> Result<Vec<DenoiserOutput>> {
        self.model
            .forward_eval_many(&self.store, &self.encoder, x_t, t, conds)
    }
}

/// Serialize one log record: step, recon, defect, mask, total, R.
pub fn format_log_line(step: u64, lb: &LossBreakdown) -> String {
    format!(
        "{step}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.10e}\t{:.6}\n",
        lb.recon, lb.defect, lb.mask, lb.total, lb.ratio_r
    )
}
