//! Memory-enhanced multiscale compressor.
//!
//! Each block pools Q/K/V with a strided depthwise 3D convolution and lets the
//! pooled queries attend over the clip's own keys/values concatenated with
//! that block's FIFO cache of the previous `M` clips. Four blocks take a
//! 16×16 patch grid down to one token per frame.
//!
//! Cache entries are the block's pooled K/V for a clip as produced during that
//! clip's own (memory-augmented) pass. Block `b` of clip `t` therefore depends
//! on block `b−1` outputs of clips `t−M..t`, and the receptive field of the
//! final tokens spans `num_blocks·M` previous clips.

use std::collections::VecDeque;

use crate::config::CompressorConfig;
use crate::error::{Error, Result};
use crate::nn;
use crate::params::{BlockParams, MemParams};
use crate::tensor::{Graph, PoolConfig, Real, Tensor, Var};

#[derive(Clone, Debug)]
pub struct CacheEntry<T> {
    /// Index of the clip that produced this entry (0-based).
    pub clip: usize,
    pub k: Tensor<T>,
    pub v: Tensor<T>,
    /// Live graph handles, kept only when the cache is not detached.
    link: Option<(u64, Var, Var)>,
}

/// Per-block FIFO queues of pooled keys and values.
#[derive(Clone, Debug)]
pub struct MemCacheState<T> {
    capacity: usize,
    blocks: Vec<VecDeque<CacheEntry<T>>>,
    clips_processed: usize,
}

impl<T: Real> MemCacheState<T> {
    pub fn new(num_blocks: usize, capacity: usize) -> Self {
        Self {
            capacity,
            blocks: (0..num_blocks)
                .map(|_| VecDeque::with_capacity(capacity + 1))
                .collect(),
            clips_processed: 0,
        }
    }

    pub fn for_config(cfg: &CompressorConfig) -> Self {
        Self::new(cfg.num_blocks, cfg.memory_size)
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn clips_processed(&self) -> usize {
        self.clips_processed
    }

    pub fn len(&self, block: usize) -> usize {
        self.blocks[block].len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.iter().all(VecDeque::is_empty)
    }

    /// Entries of one block, oldest first.
    pub fn entries(&self, block: usize) -> impl Iterator<Item = &CacheEntry<T>> {
        self.blocks[block].iter()
    }

    pub fn clip_indices(&self, block: usize) -> Vec<usize> {
        self.entries(block).map(|e| e.clip).collect()
    }

    /// Empties every queue and zeroes the clip counter.
    pub fn reset(&mut self) {
        for q in &mut self.blocks {
            q.clear();
        }
        self.clips_processed = 0;
    }

    fn push(&mut self, block: usize, entry: CacheEntry<T>) {
        if self.capacity == 0 {
            return;
        }
        let queue = &mut self.blocks[block];
        queue.push_back(entry);
        while queue.len() > self.capacity {
            queue.pop_front();
        }
    }

    /// Flattens the cache to named tensors (`cache.block{b}.{slot}.k|v`) plus
    /// the clip index of each slot, for inspection through the checkpoint
    /// format.
    pub fn to_named(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for (b, queue) in self.blocks.iter().enumerate() {
            for (slot, e) in queue.iter().enumerate() {
                let prefix = format!("cache.block{b}.{slot}");
                out.push((format!("{prefix}.k"), e.k.clone()));
                out.push((format!("{prefix}.v"), e.v.clone()));
                out.push((
                    format!("{prefix}.clip"),
                    Tensor::scalar(T::lit(e.clip as f64)),
                ));
            }
        }
        out
    }

    /// Inverse of [`to_named`](Self::to_named); links are never restored.
    pub fn from_named(
        num_blocks: usize,
        capacity: usize,
        clips_processed: usize,
        tensors: &[(String, Tensor<T>)],
    ) -> Result<Self> {
        let mut state = Self::new(num_blocks, capacity);
        state.clips_processed = clips_processed;
        let find = |name: &str| {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t.clone())
        };
        for b in 0..num_blocks {
            for slot in 0.. {
                let prefix = format!("cache.block{b}.{slot}");
                let (Some(k), Some(v), Some(clip)) = (
                    find(&format!("{prefix}.k")),
                    find(&format!("{prefix}.v")),
                    find(&format!("{prefix}.clip")),
                ) else {
                    break;
                };
                if slot >= capacity {
                    return Err(Error::CacheCorruption {
                        block: b,
                        detail: format!("more than {capacity} entries"),
                    });
                }
                let clip = clip.item()?.to_usize().ok_or_else(|| Error::CacheCorruption {
                    block: b,
                    detail: "invalid clip index".into(),
                })?;
                state.blocks[b].push_back(CacheEntry {
                    clip,
                    k,
                    v,
                    link: None,
                });
            }
        }
        Ok(state)
    }
}

/// Pooled projections of one block input, flattened to (tokens, d).
#[derive(Clone, Copy, Debug)]
pub struct PooledQkv {
    pub q: Var,
    pub k: Var,
    pub v: Var,
    /// (T', H', W') after pooling.
    pub grid: [usize; 3],
}

/// Projects `x` (T, H, W, d) with W_Q/K/V and pools each path.
pub fn pool_qkv<T: Real>(
    g: &mut Graph<T>,
    p: &BlockParams<Var>,
    x: Var,
    pool: PoolConfig,
) -> Result<PooledQkv> {
    let &[t, h, w, d] = g.value(x).shape() else {
        return Err(Error::shape(
            "pool_qkv",
            format!("input must be (T, H, W, d), got {:?}", g.value(x).shape()),
        ));
    };
    if h != w {
        return Err(Error::shape("pool_qkv", format!("grid {h}x{w} is not square")));
    }
    let grid = pool.out_shape(t, h, w)?;
    let tokens = grid.iter().product::<usize>();
    let mut path = |wp: Var, kernel: Var| -> Result<Var> {
        let y = g.matmul(x, wp)?;
        let y = g.conv3d_pool(y, kernel, pool)?;
        g.reshape(y, &[tokens, d])
    };
    Ok(PooledQkv {
        q: path(p.w_q, p.pool_q)?,
        k: path(p.w_k, p.pool_k)?,
        v: path(p.w_v, p.pool_v)?,
        grid,
    })
}

/// Prepends the block's cached K/V (oldest first) to the current clip's.
pub fn augment_with_cache<T: Real>(
    g: &mut Graph<T>,
    k: Var,
    v: Var,
    cache: &MemCacheState<T>,
    block: usize,
) -> Result<(Var, Var)> {
    if block >= cache.num_blocks() {
        return Err(Error::CacheCorruption {
            block,
            detail: format!("cache has only {} blocks", cache.num_blocks()),
        });
    }
    if cache.len(block) == 0 {
        return Ok((k, v));
    }
    let shape = g.value(k).shape().to_vec();
    let mut ks = Vec::with_capacity(cache.len(block) + 1);
    let mut vs = Vec::with_capacity(cache.len(block) + 1);
    for e in cache.entries(block) {
        if e.k.shape() != shape.as_slice() || e.v.shape() != shape.as_slice() {
            return Err(Error::CacheCorruption {
                block,
                detail: format!(
                    "entry from clip {} has K {:?} / V {:?}, current clip has {:?}",
                    e.clip,
                    e.k.shape(),
                    e.v.shape(),
                    shape
                ),
            });
        }
        match e.link {
            Some((graph, ek, ev)) if graph == g.id() => {
                ks.push(ek);
                vs.push(ev);
            }
            _ => {
                ks.push(g.constant(e.k.clone()));
                vs.push(g.constant(e.v.clone()));
            }
        }
    }
    ks.push(k);
    vs.push(v);
    Ok((g.concat_rows(&ks)?, g.concat_rows(&vs)?))
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    /// Attention output before W_out, (queries, d).
    pub z: Var,
    /// One (queries, keys) weight matrix per head.
    pub weights: Vec<Var>,
}

/// softmax(f_Q(Q) f_K(K̄)ᵀ / √d_head) f_V(V̄).
pub fn memory_attention<T: Real>(
    g: &mut Graph<T>,
    p: &BlockParams<Var>,
    q: Var,
    k_bar: Var,
    v_bar: Var,
    num_heads: usize,
) -> Result<AttentionOutput> {
    let qf = g.matmul(q, p.lin_q)?;
    let kf = g.matmul(k_bar, p.lin_k)?;
    let vf = g.matmul(v_bar, p.lin_v)?;
    let (z, weights) = nn::attend(g, qf, kf, vf, num_heads)?;
    Ok(AttentionOutput { z, weights })
}

/// Everything after the cache lookup: attention, residual from the pooled
/// queries, pre-norm MLP with residual. Returns (T', H', W', d).
pub(crate) fn block_tail<T: Real>(
    g: &mut Graph<T>,
    p: &BlockParams<Var>,
    pooled: &PooledQkv,
    k_bar: Var,
    v_bar: Var,
    num_heads: usize,
) -> Result<Var> {
    let att = memory_attention(g, p, pooled.q, k_bar, v_bar, num_heads)?;
    let proj = g.matmul(att.z, p.w_out)?;
    let h = g.add(pooled.q, proj)?;
    let hn = g.layer_norm(h, p.ln2_g, p.ln2_b)?;
    let m = nn::mlp(g, hn, p.mlp_w1, p.mlp_b1, p.mlp_w2, p.mlp_b2)?;
    let out = g.add(h, m)?;
    let d = g.value(out).rows_cols().1;
    let [t, hh, ww] = pooled.grid;
    g.reshape(out, &[t, hh, ww, d])
}

pub(crate) fn block_head<T: Real>(
    g: &mut Graph<T>,
    p: &BlockParams<Var>,
    x: Var,
    pool: PoolConfig,
) -> Result<PooledQkv> {
    let xn = g.layer_norm(x, p.ln1_g, p.ln1_b)?;
    pool_qkv(g, p, xn, pool)
}

/// Output of one block plus the K/V it contributes to the cache.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub k: Var,
    pub v: Var,
}

/// One block over one clip. The cache is read, not written; the caller
/// pushes [`BlockOutput::k`]/[`v`](BlockOutput::v) once the clip is done.
pub fn block_forward<T: Real>(
    g: &mut Graph<T>,
    p: &BlockParams<Var>,
    x: Var,
    cache: &MemCacheState<T>,
    block: usize,
    cfg: &CompressorConfig,
) -> Result<BlockOutput> {
    let pooled = block_head(g, p, x, cfg.pool())?;
    let (k_bar, v_bar) = augment_with_cache(g, pooled.k, pooled.v, cache, block)?;
    let out = block_tail(g, p, &pooled, k_bar, v_bar, cfg.num_heads)?;
    Ok(BlockOutput {
        out,
        k: pooled.k,
        v: pooled.v,
    })
}

#[derive(Clone, Debug)]
pub struct ClipCompression {
    /// One token per frame, (T_c, d).
    pub tokens: Var,
    /// (T, H, W, d) of the input and of every block output.
    pub stage_shapes: Vec<Vec<usize>>,
}

/// Runs all blocks over a (T_c, N, d) clip and advances the cache by one clip.
pub fn compress_clip<T: Real>(
    g: &mut Graph<T>,
    p: &MemParams<Var>,
    clip: Var,
    cache: &mut MemCacheState<T>,
    cfg: &CompressorConfig,
) -> Result<ClipCompression> {
    let &[tc, n, d] = g.value(clip).shape() else {
        return Err(Error::Input(format!(
            "clip must be (T_c, N, d), got {:?}",
            g.value(clip).shape()
        )));
    };
    if tc != cfg.clip_size || d != cfg.dim {
        return Err(Error::Input(format!(
            "clip {:?} does not match T_c = {}, d = {}",
            g.value(clip).shape(),
            cfg.clip_size,
            cfg.dim
        )));
    }
    if n != cfg.patches() {
        return Err(Error::Input(format!(
            "{n} patches cannot be arranged as the configured {0}x{0} grid",
            cfg.grid
        )));
    }
    if cache.num_blocks() != cfg.num_blocks || p.blocks.len() != cfg.num_blocks {
        return Err(Error::CacheCorruption {
            block: cache.num_blocks().min(p.blocks.len()),
            detail: format!(
                "{} cache queues / {} parameter blocks for {} blocks",
                cache.num_blocks(),
                p.blocks.len(),
                cfg.num_blocks
            ),
        });
    }

    let mut x = g.reshape(clip, &[tc, cfg.grid, cfg.grid, d])?;
    let mut stage_shapes = vec![g.value(x).shape().to_vec()];
    let mut pending = Vec::with_capacity(cfg.num_blocks);
    for (b, bp) in p.blocks.iter().enumerate() {
        let o = block_forward(g, bp, x, cache, b, cfg)?;
        stage_shapes.push(g.value(o.out).shape().to_vec());
        pending.push((o.k, o.v));
        x = o.out;
    }
    if stage_shapes.last().map(|s| s[1] * s[2]) != Some(1) {
        return Err(Error::Config(format!(
            "blocks end at {:?}, not one token per frame",
            stage_shapes.last()
        )));
    }
    let tokens = g.reshape(x, &[tc, d])?;

    let clip_index = cache.clips_processed;
    for (b, (k, v)) in pending.into_iter().enumerate() {
        let link = (!cfg.cache_detached).then(|| (g.id(), k, v));
        cache.push(
            b,
            CacheEntry {
                clip: clip_index,
                k: g.value(k).clone(),
                v: g.value(v).clone(),
                link,
            },
        );
    }
    cache.clips_processed += 1;
    Ok(ClipCompression {
        tokens,
        stage_shapes,
    })
}
