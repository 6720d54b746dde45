//! Patch-transformer denoiser split into background, defect, and fusion
//! block groups. Background and fusion blocks are modulated by adaptive
//! layer norm from the timestep plus a pooled prompt embedding; defect
//! blocks cross-attend over the defect prompt and expose their attention
//! maps for mask prediction.

use crate::autodiff::{Graph, Var};
use crate::conditioning::{build_prompts, sinusoid, ConditionPair, TextEncoder};
use crate::error::{Error, Result};
use crate::maskgen::MaskHead;
use crate::params::{ParamId, ParamStore};
use crate::Image;
use ndarray::{Array2, Array3, ArrayD, Ix2, Ix3};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Geometry and capacity of the denoiser.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TdiaConfig {
    pub n_background: usize,
    pub m_defect: usize,
    pub k_fusion: usize,
    pub width: usize,
    pub heads: usize,
    pub patch: usize,
    pub image_size: usize,
    pub channels: usize,
    pub cond_width: usize,
    /// Token count of the prompt the defect blocks cross-attend over;
    /// 4 for the defect template, 5 when the fusion prompt is routed.
    pub defect_prompt_len: usize,
    /// Route the fusion prompt embedding to all three parts.
    pub fused_prompt_only: bool,
}

impl Default for TdiaConfig {
    fn default() -> Self {
        Self {
            n_background: 2,
            m_defect: 2,
            k_fusion: 2,
            width: 64,
            heads: 4,
            patch: 4,
            image_size: 32,
            channels: 3,
            cond_width: 64,
            defect_prompt_len: 4,
            fused_prompt_only: false,
        }
    }
}

impl TdiaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.patch == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch) {
            return Err(Error::InvalidConfig(format!(
                "image size {} must be a positive multiple of patch {}",
                self.image_size, self.patch
            )));
        }
        if self.channels == 0 {
            return Err(Error::InvalidConfig("channels must be positive".into()));
        }
        if self.defect_prompt_len == 0 {
            return Err(Error::InvalidConfig("prompt length must be positive".into()));
        }
        if self.fused_prompt_only && self.defect_prompt_len != 5 {
            return Err(Error::InvalidConfig(
                "fused prompt routing requires defect_prompt_len 5".into(),
            ));
        }
        Ok(())
    }

    /// Tokens per image side and total token count.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn image_shape(&self) -> (usize, usize, usize) {
        (self.channels, self.image_size, self.image_size)
    }
}

/// Prediction plus the cross-attention maps harvested from defect blocks.
pub struct DenoiserOutput {
    pub eps_hat: Image,
    /// One map per defect block, shaped (heads, tokens, prompt_len).
    pub attn_maps: Vec<Array3<f64>>,
    /// Pixel-resolution mask feature; absent when the model has no
    /// defect blocks.
    pub mask_feature: Option<Array2<f64>>,
}

/// Anything that can predict noise for a condition pair. `eval_many`
/// exists so implementations can share work across the guidance passes.
pub trait Denoiser {
    fn image_shape(&self) -> (usize, usize, usize);
    fn eval(&self, x_t: &Image, t: usize, cond: &ConditionPair) -> Result<DenoiserOutput>;
    fn eval_many(
        &self,
        x_t: &Image,
        t: usize,
        conds: &[ConditionPair],
    ) -> Result<Vec<DenoiserOutput>> {
        conds.iter().map(|c| self.eval(x_t, t, c)).collect()
    }
}

/// Graph-side forward result.
pub struct TdiaGraphOut {
    pub eps_hat: Var,
    pub attn_maps: Vec<Var>,
    pub mask_feature: Option<Var>,
}

/// The three prompt embeddings as graph nodes.
#[derive(Clone, Copy)]
pub struct ConditionEmbeddings {
    pub background: Var,
    pub defect: Var,
    pub fusion: Var,
}

/// Encode the prompts for a condition pair into graph embeddings,
/// honoring the fused-prompt routing ablation.
pub fn embed_conditions(
    g: &mut Graph,
    params: &[Var],
    encoder: &TextEncoder,
    cond: &ConditionPair,
    fused_prompt_only: bool,
) -> Result<ConditionEmbeddings> {
    let prompts = build_prompts(encoder.vocab(), &cond.product, &cond.defect)?;
    if fused_prompt_only {
        let f = encoder.embed(g, params, &prompts.padded_fusion())?;
        return Ok(ConditionEmbeddings {
            background: f,
            defect: f,
            fusion: f,
        });
    }
    Ok(ConditionEmbeddings {
        background: encoder.embed(g, params, &prompts.background)?,
        defect: encoder.embed(g, params, &prompts.defect)?,
        fusion: encoder.embed(g, params, &prompts.fusion)?,
    })
}

struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn new<R: Rng>(
        name: &str,
        in_dim: usize,
        out_dim: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = store.add_normal(&format!("{name}.w"), &[in_dim, out_dim], std, rng);
        let b = store.add_zeros(&format!("{name}.b"), &[1, out_dim]);
        Self { w, b }
    }

    fn apply(&self, g: &mut Graph, params: &[Var], x: Var) -> Var {
        let y = g.matmul(x, params[self.w.0]);
        g.add_row(y, params[self.b.0])
    }
}

/// Multi-head self-attention over (S, width) tokens.
struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
    width: usize,
}

impl SelfAttention {
    fn new<R: Rng>(
        name: &str,
        width: usize,
        heads: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        Self {
            qkv: Linear::new(&format!("{name}.qkv"), width, 3 * width, store, rng),
            proj: Linear::new(&format!("{name}.proj"), width, width, store, rng),
            heads,
            width,
        }
    }

    fn apply(&self, g: &mut Graph, params: &[Var], x: Var) -> Var {
        let w = self.width;
        let d = w / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let qkv = self.qkv.apply(g, params, x);
        let q = g.slice_cols(qkv, 0, w);
        let k = g.slice_cols(qkv, w, 2 * w);
        let v = g.slice_cols(qkv, 2 * w, 3 * w);
        let mut heads_out = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * d, (h + 1) * d);
            let qh = g.slice_cols(q, a, b);
            let kh = g.slice_cols(k, a, b);
            let vh = g.slice_cols(v, a, b);
            let logits = g.matmul_nt(qh, kh);
            let logits = g.mul_scalar(logits, scale);
            let attn = g.softmax_rows(logits);
            heads_out.push(g.matmul(attn, vh));
        }
        let cat = g.concat_cols(&heads_out);
        self.proj.apply(g, params, cat)
    }
}

/// Cross-attention from image tokens to a prompt embedding; returns the
/// output and the per-head attention maps stacked as (heads, S, l).
struct CrossAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    proj: Linear,
    heads: usize,
    width: usize,
}

impl CrossAttention {
    fn new<R: Rng>(
        name: &str,
        width: usize,
        cond_width: usize,
        heads: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        Self {
            q: Linear::new(&format!("{name}.q"), width, width, store, rng),
            k: Linear::new(&format!("{name}.k"), cond_width, width, store, rng),
            v: Linear::new(&format!("{name}.v"), cond_width, width, store, rng),
            proj: Linear::new(&format!("{name}.proj"), width, width, store, rng),
            heads,
            width,
        }
    }

    fn apply(&self, g: &mut Graph, params: &[Var], x: Var, emb: Var) -> (Var, Var) {
        let w = self.width;
        let d = w / self.heads;
        let scale = 1.0 / (d as f64).sqrt();
        let s = g.value(x).shape()[0];
        let l = g.value(emb).shape()[0];
        let q = self.q.apply(g, params, x);
        let k = self.k.apply(g, params, emb);
        let v = self.v.apply(g, params, emb);
        let mut heads_out = Vec::with_capacity(self.heads);
        let mut maps = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (a, b) = (h * d, (h + 1) * d);
            let qh = g.slice_cols(q, a, b);
            let kh = g.slice_cols(k, a, b);
            let vh = g.slice_cols(v, a, b);
            let logits = g.matmul_nt(qh, kh);
            let logits = g.mul_scalar(logits, scale);
            let attn = g.softmax_rows(logits); // (S, l)
            maps.push(g.reshape(attn, &[1, s, l]));
            heads_out.push(g.matmul(attn, vh));
        }
        let cat = g.concat_cols(&heads_out);
        let out = self.proj.apply(g, params, cat);
        let map = g.concat_first(&maps); // (heads, S, l)
        (out, map)
    }
}

struct Mlp {
    lin1: Linear,
    lin2: Linear,
}

impl Mlp {
    fn new<R: Rng>(name: &str, width: usize, store: &mut ParamStore, rng: &mut R) -> Self {
        Self {
            lin1: Linear::new(&format!("{name}.lin1"), width, 2 * width, store, rng),
            lin2: Linear::new(&format!("{name}.lin2"), 2 * width, width, store, rng),
        }
    }

    fn apply(&self, g: &mut Graph, params: &[Var], x: Var) -> Var {
        let h = self.lin1.apply(g, params, x);
        let h = g.silu(h);
        self.lin2.apply(g, params, h)
    }
}

/// shift/scale/gate modulation rows sliced from one conditioning vector.
fn modulate(g: &mut Graph, x: Var, scale: Var, shift: Var) -> Var {
    let one_plus = g.add_scalar(scale, 1.0);
    let scaled = g.mul_row(x, one_plus);
    g.add_row(scaled, shift)
}

/// Transformer block with adaptive layer norm conditioning: the
/// conditioning vector produces per-sublayer shift, scale, and gate rows.
struct AdaBlock {
    modulation: Linear,
    attn: SelfAttention,
    mlp: Mlp,
    width: usize,
}

impl AdaBlock {
    fn new<R: Rng>(
        name: &str,
        width: usize,
        heads: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        Self {
            modulation: Linear::new(&format!("{name}.mod"), width, 6 * width, store, rng),
            attn: SelfAttention::new(&format!("{name}.attn"), width, heads, store, rng),
            mlp: Mlp::new(&format!("{name}.mlp"), width, store, rng),
            width,
        }
    }

    fn apply(&self, g: &mut Graph, params: &[Var], x: Var, cond: Var) -> Var {
        let w = self.width;
        let c = g.silu(cond);
        let m = self.modulation.apply(g, params, c); // (1, 6w)
        let s1 = g.slice_cols(m, 0, w);
        let b1 = g.slice_cols(m, w, 2 * w);
        let g1 = g.slice_cols(m, 2 * w, 3 * w);
        let s2 = g.slice_cols(m, 3 * w, 4 * w);
        let b2 = g.slice_cols(m, 4 * w, 5 * w);
        let g2 = g.slice_cols(m, 5 * w, 6 * w);

        let ln = g.layernorm_rows(x, 1e-5);
        let h = modulate(g, ln, s1, b1);
        let h = self.attn.apply(g, params, h);
        let h = g.mul_row(h, g1);
        let x = g.add(x, h);

        let ln = g.layernorm_rows(x, 1e-5);
        let h = modulate(g, ln, s2, b2);
        let h = self.mlp.apply(g, params, h);
        let h = g.mul_row(h, g2);
        g.add(x, h)
    }
}

/// Defect block: self-attention, cross-attention over the defect prompt,
/// and an MLP, each preceded by timestep-modulated layer norm.
struct DefectBlock {
    modulation: Linear,
    attn: SelfAttention,
    cross: CrossAttention,
    mlp: Mlp,
    width: usize,
}

impl DefectBlock {
    fn new<R: Rng>(
        name: &str,
        width: usize,
        cond_width: usize,
        heads: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        Self {
            modulation: Linear::new(&format!("{name}.mod"), width, 6 * width, store, rng),
            attn: SelfAttention::new(&format!("{name}.attn"), width, heads, store, rng),
            cross: CrossAttention::new(&format!("{name}.cross"), width, cond_width, heads, store, rng),
            mlp: Mlp::new(&format!("{name}.mlp"), width, store, rng),
            width,
        }
    }

    fn apply(&self, g: &mut Graph, params: &[Var], x: Var, t_cond: Var, emb: Var) -> (Var, Var) {
        let w = self.width;
        let c = g.silu(t_cond);
        let m = self.modulation.apply(g, params, c);
        let s1 = g.slice_cols(m, 0, w);
        let b1 = g.slice_cols(m, w, 2 * w);
        let s2 = g.slice_cols(m, 2 * w, 3 * w);
        let b2 = g.slice_cols(m, 3 * w, 4 * w);
        let s3 = g.slice_cols(m, 4 * w, 5 * w);
        let b3 = g.slice_cols(m, 5 * w, 6 * w);

        let ln = g.layernorm_rows(x, 1e-5);
        let h = modulate(g, ln, s1, b1);
        let h = self.attn.apply(g, params, h);
        let x = g.add(x, h);

        let ln = g.layernorm_rows(x, 1e-5);
        let h = modulate(g, ln, s2, b2);
        let (h, map) = self.cross.apply(g, params, h, emb);
        let x = g.add(x, h);

        let ln = g.layernorm_rows(x, 1e-5);
        let h = modulate(g, ln, s3, b3);
        let h = self.mlp.apply(g, params, h);
        (g.add(x, h), map)
    }
}

/// The full denoiser. Parameters live in an external store under the
/// `tdia.` prefix; construction order fixes the checkpoint layout.
pub struct Tdia {
    pub cfg: TdiaConfig,
    patch_embed: Linear,
    bg_pool: Option<Linear>,
    background: Vec<AdaBlock>,
    defect: Vec<DefectBlock>,
    mask_head: Option<MaskHead>,
    fu_pool: Option<Linear>,
    fusion: Vec<AdaBlock>,
    unpatch: Linear,
}

impl Tdia {
    pub fn new<R: Rng>(cfg: TdiaConfig, store: &mut ParamStore, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let w = cfg.width;
        let patch_dim = cfg.patch * cfg.patch * cfg.channels;
        let patch_embed = Linear::new("tdia.patch_embed", patch_dim, w, store, rng);
        let bg_pool = (cfg.n_background > 0)
            .then(|| Linear::new("tdia.bg_pool", cfg.cond_width, w, store, rng));
        let background = (0..cfg.n_background)
            .map(|i| AdaBlock::new(&format!("tdia.bg{i}"), w, cfg.heads, store, rng))
            .collect();
        let defect = (0..cfg.m_defect)
            .map(|i| {
                DefectBlock::new(&format!("tdia.def{i}"), w, cfg.cond_width, cfg.heads, store, rng)
            })
            .collect();
        let mask_head = (cfg.m_defect > 0).then(|| {
            MaskHead::new(
                "tdia.mask_head",
                cfg.m_defect * cfg.heads * cfg.defect_prompt_len,
                cfg.patch,
                store,
                rng,
            )
        });
        let fu_pool = (cfg.k_fusion > 0)
            .then(|| Linear::new("tdia.fu_pool", cfg.cond_width, w, store, rng));
        let fusion = (0..cfg.k_fusion)
            .map(|i| AdaBlock::new(&format!("tdia.fus{i}"), w, cfg.heads, store, rng))
            .collect();
        let unpatch = Linear::new("tdia.unpatch", w, patch_dim, store, rng);
        Ok(Self {
            cfg,
            patch_embed,
            bg_pool,
            background,
            defect,
            mask_head,
            fu_pool,
            fusion,
            unpatch,
        })
    }

    pub fn cfg(&self) -> &TdiaConfig {
        &self.cfg
    }

    /// Trainable parameter total for a config.
    pub fn parameter_count_for(cfg: TdiaConfig) -> Result<usize> {
        let mut store = ParamStore::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        use rand::SeedableRng;
        let _model = Tdia::new(cfg, &mut store, &mut rng)?;
        Ok(store.scalar_count_prefix("tdia."))
    }

    pub fn parameter_count(&self, store: &ParamStore) -> usize {
        store.scalar_count_prefix("tdia.")
    }

    fn patchify(&self, g: &mut Graph, x: Var) -> Var {
        let (c, p, gr) = (self.cfg.channels, self.cfg.patch, self.cfg.grid());
        let r = g.reshape(x, &[c, gr, p, gr, p]);
        let perm = g.permute(r, &[1, 3, 0, 2, 4]); // (gy, gx, c, py, px)
        g.reshape(perm, &[gr * gr, c * p * p])
    }

    fn unpatchify(&self, g: &mut Graph, tokens: Var) -> Var {
        let (c, p, gr) = (self.cfg.channels, self.cfg.patch, self.cfg.grid());
        let r = g.reshape(tokens, &[gr, gr, c, p, p]);
        let perm = g.permute(r, &[2, 0, 3, 1, 4]); // (c, gy, py, gx, px)
        g.reshape(perm, &[c, gr * p, gr * p])
    }

    /// Full forward pass over graph nodes.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        params: &[Var],
        x_t: Var,
        t: usize,
        emb: &ConditionEmbeddings,
    ) -> Result<TdiaGraphOut> {
        let shape = g.value(x_t).shape().to_vec();
        let want = [self.cfg.channels, self.cfg.image_size, self.cfg.image_size];
        if shape != want {
            return Err(Error::shape(want, shape));
        }
        let l_def = g.value(emb.defect).shape()[0];
        if l_def != self.cfg.defect_prompt_len {
            return Err(Error::shape([self.cfg.defect_prompt_len], [l_def]));
        }

        let w = self.cfg.width;
        let t_row = sinusoid(t as f64, w)
            .into_shape_with_order((1, w))
            .expect("row shape");
        let t_emb = g.constant(t_row.into_dyn());

        let mut x = self.patchify(g, x_t);
        x = self.patch_embed.apply(g, params, x);

        if let Some(pool) = &self.bg_pool {
            let pooled = g.mean_rows(emb.background);
            let pooled = pool.apply(g, params, pooled);
            let cond = g.add(t_emb, pooled);
            for block in &self.background {
                x = block.apply(g, params, x, cond);
            }
        }

        let mut attn_maps = Vec::with_capacity(self.defect.len());
        for block in &self.defect {
            let (nx, map) = block.apply(g, params, x, t_emb, emb.defect);
            x = nx;
            attn_maps.push(map);
        }

        let mask_feature = match &self.mask_head {
            Some(head) if !attn_maps.is_empty() => {
                let gr = self.cfg.grid();
                let stacked: Vec<Var> = attn_maps
                    .iter()
                    .map(|&m| {
                        let p = g.permute(m, &[0, 2, 1]); // (heads, l, S)
                        g.reshape(p, &[self.cfg.heads * l_def, gr, gr])
                    })
                    .collect();
                let cat = g.concat_first(&stacked);
                Some(head.forward(g, params, cat)?)
            }
            _ => None,
        };

        if let Some(pool) = &self.fu_pool {
            let pooled = g.mean_rows(emb.fusion);
            let pooled = pool.apply(g, params, pooled);
            let cond = g.add(t_emb, pooled);
            for block in &self.fusion {
                x = block.apply(g, params, x, cond);
            }
        }

        let x = g.layernorm_rows(x, 1e-5);
        let x = self.unpatch.apply(g, params, x);
        let eps_hat = self.unpatchify(g, x);
        Ok(TdiaGraphOut {
            eps_hat,
            attn_maps,
            mask_feature,
        })
    }

    /// Evaluation forward pass producing plain arrays.
    pub fn forward_eval(
        &self,
        store: &ParamStore,
        encoder: &TextEncoder,
        x_t: &Image,
        t: usize,
        cond: &ConditionPair,
    ) -> Result<DenoiserOutput> {
        let mut out = self.forward_eval_many(store, encoder, x_t, t, std::slice::from_ref(cond))?;
        Ok(out.remove(0))
    }

    /// Evaluate several condition pairs against one parameter
    /// registration; used by guidance to batch its three passes.
    pub fn forward_eval_many(
        &self,
        store: &ParamStore,
        encoder: &TextEncoder,
        x_t: &Image,
        t: usize,
        conds: &[ConditionPair],
    ) -> Result<Vec<DenoiserOutput>> {
        let mut g = Graph::new();
        let params = store.register_all(&mut g);
        let x = g.constant(x_t.clone().into_dyn());
        let mut outs = Vec::with_capacity(conds.len());
        for cond in conds {
            let emb = embed_conditions(&mut g, &params, encoder, cond, self.cfg.fused_prompt_only)?;
            let fw = self.forward_graph(&mut g, &params, x, t, &emb)?;
            let eps_hat = g
                .value(fw.eps_hat)
                .clone()
                .into_dimensionality::<Ix3>()
                .expect("eps rank 3");
            let attn_maps = fw
                .attn_maps
                .iter()
                .map(|&m| {
                    g.value(m)
                        .clone()
                        .into_dimensionality::<Ix3>()
                        .expect("map rank 3")
                })
                .collect();
            let mask_feature = fw.mask_feature.map(|m| {
                g.value(m)
                    .clone()
                    .into_dimensionality::<Ix2>()
                    .expect("mask rank 2")
            });
            outs.push(DenoiserOutput {
                eps_hat,
                attn_maps,
                mask_feature,
            });
        }
        Ok(outs)
    }
}

/// Sanity bound used by tests: attention rows are probability vectors.
pub fn assert_rows_normalized(map: &Array3<f64>, tol: f64) -> bool {
    let (heads, s, _) = map.dim();
    for h in 0..heads {
        for r in 0..s {
            let sum: f64 = map.slice(ndarray::s![h, r, ..]).sum();
            if (sum - 1.0).abs() > tol {
                return false;
            }
        }
    }
    true
}

/// Convenience wrapper for a graph input of an image.
pub fn image_input(g: &mut Graph, img: &Image) -> Var {
    g.constant(ArrayD::from(img.clone().into_dyn()))
}
