//! Prompt templates, the label vocabulary, a deterministic learned text
//! encoder, and the condition dropout applied during training.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use ndarray::{Array1, Array2};
use rand::Rng;
use std::collections::HashSet;
use std::path::Path;

/// Reserved defect label for normal samples.
pub const GOOD_LABEL: &str = "good";
/// Reserved token standing for the empty product condition.
pub const NULL_TOKEN: &str = "<null>";

/// Fixed template words shared by every prompt.
const TEMPLATE_WORDS: [&str; 3] = ["a", "photo", "of"];

/// Ordered label set. The reserved labels always occupy the first two
/// slots so token ids are stable across rebuilds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    labels: Vec<String>,
}

impl Vocabulary {
    /// Build from arbitrary labels; reserved labels are normalized to the
    /// front and duplicates dropped while preserving the remaining order.
    pub fn from_labels<I, S>(labels: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut out = vec![GOOD_LABEL.to_string(), NULL_TOKEN.to_string()];
        let mut seen: HashSet<String> = out.iter().cloned().collect();
        for l in labels {
            let l = l.as_ref().trim().to_lowercase();
            if l.is_empty() {
                continue;
            }
            if l.chars().any(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!(
                    "label {l:?} must not contain whitespace"
                )));
            }
            if TEMPLATE_WORDS.contains(&l.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "label {l:?} collides with a template word"
                )));
            }
            if seen.insert(l.clone()) {
                out.push(l);
            }
        }
        Ok(Self { labels: out })
    }

    /// Read one label per line; blank lines and `#` comments ignored.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_labels(
            text.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#')),
        )
    }

    /// Write one label per line, reserved labels first.
    pub fn write_file(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.labels.join("\n") + "\n")?;
        Ok(())
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn contains_label(&self, label: &str) -> bool {
        self.labels.iter().any(|l| l == label)
    }

    /// Total token count: template words plus labels.
    pub fn token_count(&self) -> usize {
        TEMPLATE_WORDS.len() + self.labels.len()
    }

    pub fn token_id(&self, token: &str) -> Result<usize> {
        if let Some(i) = TEMPLATE_WORDS.iter().position(|w| *w == token) {
            return Ok(i);
        }
        self.labels
            .iter()
            .position(|l| l == token)
            .map(|i| TEMPLATE_WORDS.len() + i)
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }
}

/// The three prompts conditioning the background, defect, and fusion parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTriple {
    pub background: Vec<String>,
    pub defect: Vec<String>,
    pub fusion: Vec<String>,
}

impl PromptTriple {
    /// Fusion prompt padded to fixed length 5 with the null token, for
    /// configurations that cross-attend over the fusion prompt.
    pub fn padded_fusion(&self) -> Vec<String> {
        let mut f = self.fusion.clone();
        while f.len() < 5 {
            f.push(NULL_TOKEN.to_string());
        }
        f
    }
}

fn template_prefix() -> Vec<String> {
    TEMPLATE_WORDS.iter().map(|w| w.to_string()).collect()
}

/// Build the three prompts for a condition pair. `product` may be the
/// null token and `defect` may be the good label; both sentinels are
/// handled so guidance can request every condition combination.
pub fn build_prompts(vocab: &Vocabulary, product: &str, defect: &str) -> Result<PromptTriple> {
    if product != NULL_TOKEN && (!vocab.contains_label(product) || product == GOOD_LABEL) {
        return Err(Error::UnknownLabel(product.to_string()));
    }
    if defect == NULL_TOKEN || !vocab.contains_label(defect) {
        return Err(Error::UnknownLabel(defect.to_string()));
    }
    let background = if product == NULL_TOKEN {
        vec![NULL_TOKEN.to_string()]
    } else {
        let mut p = template_prefix();
        p.push(product.to_string());
        p
    };
    let mut defect_prompt = template_prefix();
    defect_prompt.push(defect.to_string());
    let mut fusion = template_prefix();
    fusion.push(defect.to_string());
    if product != NULL_TOKEN {
        fusion.push(product.to_string());
    }
    Ok(PromptTriple {
        background,
        defect: defect_prompt,
        fusion,
    })
}

/// Condition pair after dropout: the labels actually fed to the denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConditionPair {
    pub defect: String,
    pub product: String,
}

impl ConditionPair {
    pub fn new(defect: &str, product: &str) -> Self {
        Self {
            defect: defect.to_string(),
            product: product.to_string(),
        }
    }

    pub fn unconditional() -> Self {
        Self::new(GOOD_LABEL, NULL_TOKEN)
    }
}

/// Training-time condition dropout: the product condition drops to null
/// with probability `p1`; a non-good defect condition drops to good with
/// probability `p2`. The two draws are independent.
pub fn double_free_dropout<R: Rng>(
    sample_defect: &str,
    sample_product: &str,
    p1: f64,
    p2: f64,
    rng: &mut R,
) -> ConditionPair {
    debug_assert!((0.0..=1.0).contains(&p1) && (0.0..=1.0).contains(&p2));
    let product = if rng.random::<f64>() < p1 {
        NULL_TOKEN.to_string()
    } else {
        sample_product.to_string()
    };
    let defect = if sample_defect != GOOD_LABEL && rng.random::<f64>() < p2 {
        GOOD_LABEL.to_string()
    } else {
        sample_defect.to_string()
    };
    ConditionPair { defect, product }
}

/// Interleaved sinusoidal embedding of a scalar position.
pub fn sinusoid(pos: f64, dim: usize) -> Array1<f64> {
    let mut out = Array1::zeros(dim);
    for i in 0..dim / 2 {
        let freq = 1.0 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
    if dim % 2 == 1 {
        let freq = 1.0 / 10_000f64.powf((dim - 1) as f64 / dim as f64);
        out[dim - 1] = (pos * freq).sin();
    }
    out
}

fn is_null_prompt(tokens: &[String]) -> bool {
    tokens.len() == 1 && tokens[0] == NULL_TOKEN
}

/// Learned token table plus fixed sinusoidal positions. Deterministic for
/// a given parameter state; the single-token null prompt maps to the bare
/// null embedding row.
pub struct TextEncoder {
    vocab: Vocabulary,
    width: usize,
    table: ParamId,
}

impl TextEncoder {
    pub fn new<R: Rng>(
        vocab: Vocabulary,
        width: usize,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Self {
        let table = store.add_normal("encoder.table", &[vocab.token_count(), width], 0.02, rng);
        Self {
            vocab,
            width,
            table,
        }
    }

    /// Rebind to an existing table parameter (checkpoint reload path).
    pub fn from_existing(vocab: Vocabulary, width: usize, table: ParamId) -> Self {
        Self {
            vocab,
            width,
            table,
        }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn table_param(&self) -> ParamId {
        self.table
    }

    pub fn token_ids(&self, tokens: &[String]) -> Result<Vec<usize>> {
        tokens.iter().map(|t| self.vocab.token_id(t)).collect()
    }

    /// Graph-side encoding: token rows gathered from the table parameter,
    /// plus positional sinusoids for multi-token prompts.
    pub fn embed(&self, g: &mut Graph, params: &[Var], tokens: &[String]) -> Result<Var> {
        let ids = self.token_ids(tokens)?;
        let rows = g.embedding(params[self.table.0], &ids);
        if is_null_prompt(tokens) {
            return Ok(rows);
        }
        let mut pos = Array2::zeros((tokens.len(), self.width));
        for (p, mut row) in pos.outer_iter_mut().enumerate() {
            row.assign(&sinusoid(p as f64, self.width));
        }
        let pos = g.constant(pos.into_dyn());
        Ok(g.add(rows, pos))
    }

    /// Evaluation-only encoding into a plain matrix.
    pub fn encode(&self, store: &ParamStore, tokens: &[String]) -> Result<Array2<f64>> {
        let mut g = Graph::new();
        let table = g.input(store.get(self.table).clone());
        let params = vec![table; self.table.0 + 1];
        let out = self.embed(&mut g, &params, tokens)?;
        Ok(g.value(out)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("embedding is rank 2"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vocab() -> Vocabulary {
        Vocabulary::from_labels(["bottle", "carpet", "crack", "hole"]).unwrap()
    }

    #[test]
    fn reserved_labels_lead() {
        let v = vocab();
        assert_eq!(v.labels()[0], GOOD_LABEL);
        assert_eq!(v.labels()[1], NULL_TOKEN);
        assert!(v.contains_label("bottle"));
        assert_eq!(v.token_count(), 3 + 6);
    }

    #[test]
    fn fusion_prompt_tokens() {
        let p = build_prompts(&vocab(), "bottle", "crack").unwrap();
        assert_eq!(p.fusion, ["a", "photo", "of", "crack", "bottle"]);
    }

    #[test]
    fn good_defect_prompt() {
        let p = build_prompts(&vocab(), "bottle", GOOD_LABEL).unwrap();
        assert_eq!(p.defect.join(" "), "a photo of good");
    }

    #[test]
    fn background_prompt_separation() {
        let p = build_prompts(&vocab(), "carpet", "hole").unwrap();
        assert!(p.background.contains(&"carpet".to_string()));
        assert!(!p.background.contains(&"hole".to_string()));
    }

    #[test]
    fn null_product_prompts() {
        let p = build_prompts(&vocab(), NULL_TOKEN, "crack").unwrap();
        assert_eq!(p.background, [NULL_TOKEN]);
        assert_eq!(p.fusion, ["a", "photo", "of", "crack"]);
        assert_eq!(p.padded_fusion().len(), 5);
    }

    #[test]
    fn unknown_labels_rejected() {
        assert!(build_prompts(&vocab(), "widget", "crack").is_err());
        assert!(build_prompts(&vocab(), "bottle", "dent").is_err());
        assert!(build_prompts(&vocab(), "bottle", NULL_TOKEN).is_err());
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = vocab();
        v.write_file(&path).unwrap();
        let back = Vocabulary::from_file(&path).unwrap();
        assert_eq!(v, back);
    }

    fn encoder() -> (TextEncoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = TextEncoder::new(vocab(), 16, &mut store, &mut rng);
        (enc, store)
    }

    #[test]
    fn encode_is_deterministic() {
        let (enc, store) = encoder();
        let p: Vec<String> = ["a", "photo", "of", "crack"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        assert_eq!(enc.encode(&store, &p).unwrap(), enc.encode(&store, &p).unwrap());
    }

    #[test]
    fn one_token_difference_changes_row() {
        let (enc, store) = encoder();
        let p1: Vec<String> = ["a", "photo", "of", "crack"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let mut p2 = p1.clone();
        p2[3] = "hole".to_string();
        let e1 = enc.encode(&store, &p1).unwrap();
        let e2 = enc.encode(&store, &p2).unwrap();
        assert_eq!(e1.row(0), e2.row(0));
        let diff: f64 = (&e1.row(3) - &e2.row(3)).mapv(f64::abs).sum();
        assert!(diff > 0.0);
    }

    #[test]
    fn null_prompt_is_bare_table_row() {
        let (enc, store) = encoder();
        let p = vec![NULL_TOKEN.to_string()];
        let e = enc.encode(&store, &p).unwrap();
        let id = enc.vocab().token_id(NULL_TOKEN).unwrap();
        let table = store.get(enc.table_param());
        for c in 0..enc.width() {
            assert_eq!(e[[0, c]], table[[id, c]]);
        }
    }

    #[test]
    fn out_of_vocabulary_token_rejected() {
        let (enc, store) = encoder();
        let p = vec!["banana".to_string()];
        assert!(enc.encode(&store, &p).is_err());
    }

    #[test]
    fn dropout_passthrough_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let c = double_free_dropout("crack", "bottle", 0.0, 0.0, &mut rng);
            assert_eq!(c, ConditionPair::new("crack", "bottle"));
            let c = double_free_dropout(GOOD_LABEL, "bottle", 0.0, 1.0, &mut rng);
            assert_eq!(c.defect, GOOD_LABEL);
            assert_eq!(c.product, "bottle");
        }
    }

    #[test]
    fn dropout_combo_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let n = 10_000usize;
        let mut counts = [0usize; 4]; // (d,p), (good,p), (d,null), (good,null)
        let mut prod_drops = Vec::with_capacity(n);
        let mut def_drops = Vec::with_capacity(n);
        for _ in 0..n {
            let c = double_free_dropout("crack", "bottle", 0.2, 0.2, &mut rng);
            let pd = c.product == NULL_TOKEN;
            let dd = c.defect == GOOD_LABEL;
            prod_drops.push(pd as u8 as f64);
            def_drops.push(dd as u8 as f64);
            counts[match (dd, pd) {
                (false, false) => 0,
                (true, false) => 1,
                (false, true) => 2,
                (true, true) => 3,
            }] += 1;
        }
        let expected = [0.64, 0.16, 0.16, 0.04];
        for (i, &e) in expected.iter().enumerate() {
            let got = counts[i] as f64 / n as f64;
            let sigma = (e * (1.0 - e) / n as f64).sqrt();
            assert!(
                (got - e).abs() < 3.0 * sigma,
                "combo {i}: got {got}, expected {e} +- {}",
                3.0 * sigma
            );
        }
        // independence: sample correlation of the two indicator streams
        let mean_p: f64 = prod_drops.iter().sum::<f64>() / n as f64;
        let mean_d: f64 = def_drops.iter().sum::<f64>() / n as f64;
        let mut cov = 0.0;
        let mut var_p = 0.0;
        let mut var_d = 0.0;
        for i in 0..n {
            cov += (prod_drops[i] - mean_p) * (def_drops[i] - mean_d);
            var_p += (prod_drops[i] - mean_p).powi(2);
            var_d += (def_drops[i] - mean_d).powi(2);
        }
        let corr = cov / (var_p.sqrt() * var_d.sqrt());
        assert!(corr.abs() < 3.0 / (n as f64).sqrt(), "corr {corr}");
    }

    #[test]
    fn sinusoid_basic_shape() {
        let e = sinusoid(0.0, 8);
        assert_eq!(e.len(), 8);
        assert_eq!(e[0], 0.0);
        assert_eq!(e[1], 1.0);
        let e2 = sinusoid(3.0, 7);
        assert_eq!(e2.len(), 7);
        assert!(e2.iter().all(|v| v.is_finite()));
    }
}
