//! Text-perceived compressor: a small query transformer per frame, then
//! attention fusion keyed by the frame's memory token.

use crate::config::TextConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{FusionParams, QFormerLayerParams, QFormerParams};
use crate::tensor::{Graph, Real, Var};

/// Token ids of an instruction, validated against the toy vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TextPrompt {
    ids: Vec<usize>,
}

impl TextPrompt {
    pub fn new(ids: Vec<usize>, cfg: &TextConfig) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::Input("prompt is empty".into()));
        }
        if ids.len() > cfg.max_prompt_len {
            return Err(Error::Input(format!(
                "prompt has {} tokens, the limit is {}",
                ids.len(),
                cfg.max_prompt_len
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        Ok(Self { ids })
    }

    /// Whitespace tokenisation, each word hashed into the vocabulary.
    pub fn from_text(text: &str, cfg: &TextConfig) -> Result<Self> {
        let ids = text
            .split_whitespace()
            .map(|w| (fnv1a(w.as_bytes()) % cfg.vocab_size as u64) as usize)
            .collect();
        Self::new(ids, cfg)
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

fn layer<T: Real>(
    g: &mut Graph<T>,
    p: &QFormerLayerParams<Var>,
    queries: Var,
    text: Var,
    frame: Var,
) -> Result<(Var, Var)> {
    let n_q = g.value(queries).shape()[0];
    let n_t = g.value(text).shape()[0];

    // joint self-attention: text and queries see each other
    let h = g.concat_rows(&[queries, text])?;
    let hn = g.layer_norm(h, p.sa_ln_g, p.sa_ln_b)?;
    let q = g.matmul(hn, p.sa_q)?;
    let k = g.matmul(hn, p.sa_k)?;
    let v = g.matmul(hn, p.sa_v)?;
    let (a, _) = nn::attend(g, q, k, v, 1)?;
    let a = g.matmul(a, p.sa_o)?;
    let h = g.add(h, a)?;
    let queries = g.slice_rows(h, 0, n_q)?;
    let text = g.slice_rows(h, n_q, n_t)?;

    // only queries look at the frame
    let qn = g.layer_norm(queries, p.ca_ln_g, p.ca_ln_b)?;
    let q = g.matmul(qn, p.ca_q)?;
    let k = g.matmul(frame, p.ca_k)?;
    let v = g.matmul(frame, p.ca_v)?;
    let v = g.add_bias(v, p.ca_v_bias)?;
    let (c, _) = nn::attend(g, q, k, v, 1)?;
    let c = g.matmul(c, p.ca_o)?;
    let queries = g.add(queries, c)?;

    let qn = g.layer_norm(queries, p.mlp_ln_g, p.mlp_ln_b)?;
    let m = nn::mlp(g, qn, p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2)?;
    let queries = g.add(queries, m)?;
    Ok((queries, text))
}

/// Prompt embeddings, (L, d).
pub fn embed_prompt<T: Real>(
    g: &mut Graph<T>,
    p: &QFormerParams<Var>,
    prompt: &TextPrompt,
) -> Result<Var> {
    g.embedding(p.text_embed, prompt.ids())
}

/// Q-Former-lite over one frame with pre-embedded text; returns (N_q, d).
pub fn qformer_with_text<T: Real>(
    g: &mut Graph<T>,
    p: &QFormerParams<Var>,
    frame: Var,
    text: Var,
) -> Result<Var> {
    let fd = g.value(frame).shape().to_vec();
    let qd = g.value(p.queries).shape()[1];
    if fd.len() != 2 || fd[1] != qd {
        return Err(Error::shape(
            "qformer_lite",
            format!("frame {fd:?} must be (N, {qd})"),
        ));
    }
    let mut queries = p.queries;
    let mut text = text;
    for lp in &p.layers {
        (queries, text) = layer(g, lp, queries, text, frame)?;
    }
    Ok(queries)
}

/// Compresses one (N, d) frame into N_q prompt-conditioned query tokens.
pub fn qformer_lite<T: Real>(
    g: &mut Graph<T>,
    p: &QFormerParams<Var>,
    frame: Var,
    prompt: &TextPrompt,
) -> Result<Var> {
    let text = embed_prompt(g, p, prompt)?;
    qformer_with_text(g, p, frame, text)
}

/// softmax(m qᵀ / √d) q: the memory token picks a convex combination of the
/// frame's query tokens. With `fusion` set, m and q go through learned
/// projections first.
pub fn cross_attn_fuse<T: Real>(
    g: &mut Graph<T>,
    mem_token: Var,
    q: Var,
    fusion: Option<&FusionParams<Var>>,
) -> Result<Var> {
    let ms = g.value(mem_token).shape();
    let qs = g.value(q).shape();
    if ms.len() != 2 || ms[0] != 1 || qs.len() != 2 || ms[1] != qs[1] {
        return Err(Error::shape(
            "cross_attn_fuse",
            format!("memory token {ms:?} vs queries {qs:?}"),
        ));
    }
    let (m, k, v) = match fusion {
        Some(f) => (
            g.matmul(mem_token, f.w_q)?,
            g.matmul(q, f.w_k)?,
            g.matmul(q, f.w_v)?,
        ),
        None => (mem_token, q, q),
    };
    Ok(nn::attend(g, m, k, v, 1)?.0)
}

/// Per-frame perceived tokens for a (T, N, d) stack of frames.
///
/// With memory tokens `f_m` (T, d) each frame's queries are fused under its
/// memory token; without them the queries are average-pooled.
pub fn compress_frames<T: Real>(
    g: &mut Graph<T>,
    p: &QFormerParams<Var>,
    fusion: Option<&FusionParams<Var>>,
    frames: Var,
    f_m: Option<Var>,
    prompt: &TextPrompt,
) -> Result<Var> {
    let text = embed_prompt(g, p, prompt)?;
    let shape = g.value(frames).shape().to_vec();
    let &[t, n, d] = shape.as_slice() else {
        return Err(Error::shape("compress_frames", format!("frames {shape:?} must be (T, N, d)")));
    };
    let mut queries = Vec::with_capacity(t);
    for i in 0..t {
        let frame = g.slice_rows(frames, i, 1)?;
        let frame = g.reshape(frame, &[n, d])?;
        queries.push(qformer_with_text(g, p, frame, text)?);
    }
    perceive(g, fusion, &queries, f_m)
}

/// Reduces per-frame query tokens to one perceived token per frame.
pub fn perceive<T: Real>(
    g: &mut Graph<T>,
    fusion: Option<&FusionParams<Var>>,
    queries: &[Var],
    f_m: Option<Var>,
) -> Result<Var> {
    if let Some(fm) = f_m {
        let rows = g.value(fm).rows_cols().0;
        if rows != queries.len() {
            return Err(Error::Contract(format!(
                "{} memory tokens for {} frames",
                rows,
                queries.len()
            )));
        }
    }
    let mut out = Vec::with_capacity(queries.len());
    for (i, &q) in queries.iter().enumerate() {
        out.push(match f_m {
            Some(fm) => {
                let m = g.slice_rows(fm, i, 1)?;
                let d = g.value(m).numel();
                let m = g.reshape(m, &[1, d])?;
                cross_attn_fuse(g, m, q, fusion)?
            }
            None => g.mean_rows(q)?,
        });
    }
    g.concat_rows(&out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::params::ModelParams;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(n_q: usize, d: usize, seed: u64) -> (ModelConfig, ModelParams<Tensor<f64>>) {
        let mut cfg = ModelConfig::default();
        cfg.compressor.dim = d;
        cfg.text.n_q = n_q;
        let p = ModelParams::init(&cfg, seed);
        (cfg, p)
    }

    #[test]
    fn prompt_validation() {
        let cfg = TextConfig::default();
        assert!(TextPrompt::from_text("   ", &cfg).is_err());
        assert!(TextPrompt::new(vec![256], &cfg).is_err());
        assert!(TextPrompt::new(vec![0; 65], &cfg).is_err());
        let p = TextPrompt::from_text("what happened first", &cfg).unwrap();
        assert_eq!(p.len(), 3);
        assert_eq!(p, TextPrompt::from_text("what  happened\tfirst", &cfg).unwrap());
    }

    #[test]
    fn output_shape_ignores_prompt_length() {
        let (cfg, p) = setup(5, 8, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for words in ["a", "a b c d e f g h i j"] {
            let mut g = Graph::new();
            let qp = p.qformer.map("qformer", |_, t| g.constant(t.clone()));
            let frame = g.constant(Tensor::rand_uniform(&[256, 8], -1.0, 1.0, &mut rng));
            let prompt = TextPrompt::from_text(words, &cfg.text).unwrap();
            let q = qformer_lite(&mut g, &qp, frame, &prompt).unwrap();
            assert_eq!(g.value(q).shape(), &[5, 8]);
        }
    }

    #[test]
    fn zero_frame_contributes_nothing() {
        let (cfg, p) = setup(4, 8, 2);
        let prompt = TextPrompt::from_text("is there a red ball", &cfg.text).unwrap();
        let mut g = Graph::new();
        let qp = p.qformer.map("qformer", |_, t| g.constant(t.clone()));
        let zero = g.constant(Tensor::zeros(&[256, 8]));
        let with_frame = qformer_lite(&mut g, &qp, zero, &prompt).unwrap();

        // oracle: the same layers with the cross-attention step removed
        let mut queries = qp.queries;
        let mut text = g.embedding(qp.text_embed, prompt.ids()).unwrap();
        for lp in &qp.layers {
            let n_q = g.value(queries).shape()[0];
            let n_t = g.value(text).shape()[0];
            let h = g.concat_rows(&[queries, text]).unwrap();
            let hn = g.layer_norm(h, lp.sa_ln_g, lp.sa_ln_b).unwrap();
            let q = g.matmul(hn, lp.sa_q).unwrap();
            let k = g.matmul(hn, lp.sa_k).unwrap();
            let v = g.matmul(hn, lp.sa_v).unwrap();
            let (a, _) = nn::attend(&mut g, q, k, v, 1).unwrap();
            let a = g.matmul(a, lp.sa_o).unwrap();
            let h = g.add(h, a).unwrap();
            queries = g.slice_rows(h, 0, n_q).unwrap();
            text = g.slice_rows(h, n_q, n_t).unwrap();
            let qn = g.layer_norm(queries, lp.mlp_ln_g, lp.mlp_ln_b).unwrap();
            let m = nn::mlp(&mut g, qn, lp.mlp_w1, lp.mlp_b1, lp.mlp_w2, lp.mlp_b2).unwrap();
            queries = g.add(queries, m).unwrap();
        }
        assert!(g.value(with_frame).bit_eq(g.value(queries)));
    }

    #[test]
    fn prompt_changes_queries() {
        let (cfg, p) = setup(4, 8, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let frame_t = Tensor::rand_uniform(&[256, 8], -1.0, 1.0, &mut rng);
        let mut g = Graph::new();
        let qp = p.qformer.map("qformer", |_, t| g.constant(t.clone()));
        let frame = g.constant(frame_t);
        let a = TextPrompt::new(vec![1, 2, 3], &cfg.text).unwrap();
        let b = TextPrompt::new(vec![1, 2, 4], &cfg.text).unwrap();
        let qa = qformer_lite(&mut g, &qp, frame, &a).unwrap();
        let qb = qformer_lite(&mut g, &qp, frame, &b).unwrap();
        assert!(g.value(qa).max_abs_diff(g.value(qb)) > 1e-6);
    }

    fn fuse(m: &[f64], q: &Tensor<f64>) -> Tensor<f64> {
        let mut g = Graph::new();
        let mv = g.constant(Tensor::from_f64(&[1, m.len()], m).unwrap());
        let qv = g.constant(q.clone());
        let out = cross_attn_fuse(&mut g, mv, qv, None).unwrap();
        g.value(out).clone()
    }

    #[test]
    fn single_query_is_returned_exactly() {
        let q = Tensor::from_f64(&[1, 3], &[0.25, -1.5, 7.0]).unwrap();
        assert_eq!(fuse(&[9.0, -3.0, 1.0], &q).data(), q.data());
    }

    #[test]
    fn identical_rows_are_returned() {
        let q = Tensor::from_f64(&[3, 2], &[0.5, 2.0, 0.5, 2.0, 0.5, 2.0]).unwrap();
        let out = fuse(&[1.0, 4.0], &q);
        for (a, b) in out.data().iter().zip([0.5, 2.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_memory_token_averages() {
        let q = Tensor::from_f64(&[2, 2], &[1.0, 2.0, 3.0, 6.0]).unwrap();
        let out = fuse(&[0.0, 0.0], &q);
        assert_eq!(out.data(), &[2.0, 4.0]);
    }

    #[test]
    fn frame_count_mismatch_is_contract_error() {
        let mut g = Graph::<f64>::new();
        let q = g.constant(Tensor::ones(&[2, 3]));
        let fm = g.constant(Tensor::ones(&[3, 3]));
        assert!(matches!(
            perceive(&mut g, None, &[q, q], Some(fm)),
            Err(Error::Contract(_))
        ));
    }
}
