//! Parameter trees shared by initialisation, graph binding, training and
//! checkpoints.
//!
//! Every struct is generic over its leaf type: `Tensor<T>` for stored
//! weights, [`Var`](crate::Var) once bound to a graph, [`ParamSpec`] for
//! shapes and initialisers. Leaf names are dotted paths such as
//! `mem.blocks.0.w_q`.

use std::collections::BTreeMap;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Stage};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

macro_rules! param_struct {
    (@map sub $e:expr, $prefix:expr, $f:ident) => { $e.try_map(&$prefix, $f)? };
    (@map vec $e:expr, $prefix:expr, $f:ident) => {{
        let mut out = Vec::with_capacity($e.len());
        for (i, x) in $e.iter().enumerate() {
            out.push(x.try_map(&join(&$prefix, &i.to_string()), $f)?);
        }
        out
    }};
    (@map opt $e:expr, $prefix:expr, $f:ident) => {
        match &$e {
            Some(x) => Some(x.try_map(&$prefix, $f)?),
            None => None,
        }
    };

    (@visit sub $e:expr, $prefix:expr, $f:ident, $method:ident) => { $e.$method(&$prefix, $f) };
    (@visit vec $e:expr, $prefix:expr, $f:ident, $method:ident) => {
        for (i, x) in param_struct!(@iter $method $e).enumerate() {
            x.$method(&join(&$prefix, &i.to_string()), $f);
        }
    };
    (@visit opt $e:expr, $prefix:expr, $f:ident, $method:ident) => {
        if let Some(x) = param_struct!(@as_opt $method $e) {
            x.$method(&$prefix, $f);
        }
    };
    (@iter visit $e:expr) => { $e.iter() };
    (@iter visit_mut $e:expr) => { $e.iter_mut() };
    (@as_opt visit $e:expr) => { $e.as_ref() };
    (@as_opt visit_mut $e:expr) => { $e.as_mut() };

    (
        $(#[$meta:meta])*
        pub struct $name:ident {
            $( $leaf:ident ),* $(,)?
            $( ; $( $kind:ident $sub:ident : $subty:ty ),+ $(,)? )?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<P> {
            $( pub $leaf: P, )*
            $($( pub $sub: $subty, )+)?
        }

        impl<P> $name<P> {
            pub fn try_map<Q, E>(
                &self,
                prefix: &str,
                f: &mut dyn FnMut(&str, &P) -> Result<Q, E>,
            ) -> Result<$name<Q>, E> {
                Ok($name {
                    $( $leaf: f(&join(prefix, stringify!($leaf)), &self.$leaf)?, )*
                    $($( $sub: param_struct!(@map $kind self.$sub, join(prefix, stringify!($sub)), f), )+)?
                })
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
                $( f(&join(prefix, stringify!($leaf)), &self.$leaf); )*
                $($( param_struct!(@visit $kind self.$sub, join(prefix, stringify!($sub)), f, visit); )+)?
            }

            pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
                $( f(&join(prefix, stringify!($leaf)), &mut self.$leaf); )*
                $($( param_struct!(@visit $kind self.$sub, join(prefix, stringify!($sub)), f, visit_mut); )+)?
            }

            pub fn map<Q>(&self, prefix: &str, mut f: impl FnMut(&str, &P) -> Q) -> $name<Q> {
                let mut g = |name: &str, p: &P| Ok::<Q, std::convert::Infallible>(f(name, p));
                match self.try_map(prefix, &mut g) {
                    Ok(v) => v,
                    Err(never) => match never {},
                }
            }

            /// `(name, leaf)` pairs in declaration order.
            pub fn named(&self, prefix: &str) -> Vec<(String, &P)> {
                let mut out = Vec::new();
                self.visit(prefix, &mut |name, p| out.push((name.to_string(), p)));
                out
            }
        }
    };
}

param_struct! {
    /// One multiscale block of the memory compressor.
    pub struct BlockParams {
        ln1_g, ln1_b,
        w_q, w_k, w_v,
        pool_q, pool_k, pool_v,
        lin_q, lin_k, lin_v,
        w_out,
        ln2_g, ln2_b,
        mlp_w1, mlp_b1, mlp_w2, mlp_b2,
    }
}

param_struct! {
    pub struct MemParams {
        ; vec blocks: Vec<BlockParams<P>>
    }
}

param_struct! {
    /// One Q-Former-lite layer: joint self-attention, query-only
    /// cross-attention to the frame, query-only MLP.
    pub struct QFormerLayerParams {
        sa_ln_g, sa_ln_b, sa_q, sa_k, sa_v, sa_o,
        ca_ln_g, ca_ln_b, ca_q, ca_k, ca_v, ca_v_bias, ca_o,
        mlp_ln_g, mlp_ln_b, mlp_w1, mlp_b1, mlp_w2, mlp_b2,
    }
}

param_struct! {
    pub struct QFormerParams {
        queries, text_embed;
        vec layers: Vec<QFormerLayerParams<P>>
    }
}

param_struct! {
    /// Optional learned projections for the fusion attention.
    pub struct FusionParams {
        w_q, w_k, w_v,
    }
}

param_struct! {
    pub struct AdapterParams {
        proj_mem, proj_perc,
    }
}

param_struct! {
    /// Mean-pool + linear classifier standing in for the language model.
    pub struct HeadParams {
        w, b,
    }
}

param_struct! {
    pub struct ModelParams {
        ;
        sub mem: MemParams<P>,
        sub qformer: QFormerParams<P>,
        opt fusion: Option<FusionParams<P>>,
        sub adapter: AdapterParams<P>,
        sub head: HeadParams<P>,
    }
}

/// Parameter group used by freeze masks and gradient-check reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Mem,
    QFormer,
    Fusion,
    Adapter,
    Head,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Mem,
        Group::QFormer,
        Group::Fusion,
        Group::Adapter,
        Group::Head,
    ];

    pub fn of(name: &str) -> Option<Group> {
        match name.split('.').next()? {
            "mem" => Some(Group::Mem),
            "qformer" => Some(Group::QFormer),
            "fusion" => Some(Group::Fusion),
            "adapter" => Some(Group::Adapter),
            "head" => Some(Group::Head),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Group::Mem => "mem",
            Group::QFormer => "qformer",
            Group::Fusion => "fusion",
            Group::Adapter => "adapter",
            Group::Head => "head",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Stage {
    /// Groups updated during this stage; everything else is frozen.
    pub fn trainable_groups(self) -> &'static [Group] {
        match self {
            Stage::Align => &[Group::Mem, Group::Fusion, Group::Adapter],
            Stage::Instruct => &Group::ALL,
        }
    }

    pub fn trains(self, name: &str) -> bool {
        Group::of(name).is_some_and(|g| self.trainable_groups().contains(&g))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    XavierUniform { fan_in: usize, fan_out: usize },
    Normal { std: f64 },
    /// Uniform averaging kernel plus ±`jitter`·mean noise.
    PoolAverage { jitter: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    fn new(shape: &[usize], init: Init) -> Self {
        Self {
            shape: shape.to_vec(),
            init,
        }
    }

    fn matrix(rows: usize, cols: usize) -> Self {
        Self::new(
            &[rows, cols],
            Init::XavierUniform {
                fan_in: rows,
                fan_out: cols,
            },
        )
    }

    fn zeros(n: usize) -> Self {
        Self::new(&[n], Init::Zeros)
    }

    fn ones(n: usize) -> Self {
        Self::new(&[n], Init::Ones)
    }

    pub fn sample<T: Real>(&self, rng: &mut impl Rng) -> Tensor<T> {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::XavierUniform { fan_in, fan_out } => {
                let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::rand_uniform(&self.shape, -bound, bound, rng)
            }
            Init::Normal { std } => Tensor::rand_normal(&self.shape, std, rng),
            Init::PoolAverage { jitter } => {
                let taps: usize = self.shape[..3].iter().product();
                let mean = 1.0 / taps as f64;
                let noise = Tensor::<f64>::rand_uniform(&self.shape, -jitter, jitter, rng);
                noise.map(|u| mean * (1.0 + u)).cast()
            }
        }
    }
}

const POOL_JITTER: f64 = 0.1;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Independent per-tensor stream: adding or reordering tensors never changes
/// the values of the others.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()))
}

impl ModelParams<ParamSpec> {
    pub fn spec(cfg: &ModelConfig) -> Self {
        let d = cfg.dim();
        let pool = cfg.compressor.pool();
        let kernel = [pool.kernel[0], pool.kernel[1], pool.kernel[2], d];
        let pool_spec = || ParamSpec::new(&kernel, Init::PoolAverage { jitter: POOL_JITTER });
        let block = || BlockParams {
            ln1_g: ParamSpec::ones(d),
            ln1_b: ParamSpec::zeros(d),
            w_q: ParamSpec::matrix(d, d),
            w_k: ParamSpec::matrix(d, d),
            w_v: ParamSpec::matrix(d, d),
            pool_q: pool_spec(),
            pool_k: pool_spec(),
            pool_v: pool_spec(),
            lin_q: ParamSpec::matrix(d, d),
            lin_k: ParamSpec::matrix(d, d),
            lin_v: ParamSpec::matrix(d, d),
            w_out: ParamSpec::matrix(d, d),
            ln2_g: ParamSpec::ones(d),
            ln2_b: ParamSpec::zeros(d),
            mlp_w1: ParamSpec::matrix(d, 4 * d),
            mlp_b1: ParamSpec::zeros(4 * d),
            mlp_w2: ParamSpec::matrix(4 * d, d),
            mlp_b2: ParamSpec::zeros(d),
        };
        let layer = || QFormerLayerParams {
            sa_ln_g: ParamSpec::ones(d),
            sa_ln_b: ParamSpec::zeros(d),
            sa_q: ParamSpec::matrix(d, d),
            sa_k: ParamSpec::matrix(d, d),
            sa_v: ParamSpec::matrix(d, d),
            sa_o: ParamSpec::matrix(d, d),
            ca_ln_g: ParamSpec::ones(d),
            ca_ln_b: ParamSpec::zeros(d),
            ca_q: ParamSpec::matrix(d, d),
            ca_k: ParamSpec::matrix(d, d),
            ca_v: ParamSpec::matrix(d, d),
            ca_v_bias: ParamSpec::zeros(d),
            ca_o: ParamSpec::matrix(d, d),
            mlp_ln_g: ParamSpec::ones(d),
            mlp_ln_b: ParamSpec::zeros(d),
            mlp_w1: ParamSpec::matrix(d, 4 * d),
            mlp_b1: ParamSpec::zeros(4 * d),
            mlp_w2: ParamSpec::matrix(4 * d, d),
            mlp_b2: ParamSpec::zeros(d),
        };
        ModelParams {
            mem: MemParams {
                blocks: (0..cfg.compressor.num_blocks).map(|_| block()).collect(),
            },
            qformer: QFormerParams {
                queries: ParamSpec::new(&[cfg.text.n_q, d], Init::Normal { std: 1.0 }),
                text_embed: ParamSpec::new(&[cfg.text.vocab_size, d], Init::Normal { std: 1.0 }),
                layers: (0..cfg.text.layers).map(|_| layer()).collect(),
            },
            fusion: cfg.text.learned_fusion.then(|| FusionParams {
                w_q: ParamSpec::matrix(d, d),
                w_k: ParamSpec::matrix(d, d),
                w_v: ParamSpec::matrix(d, d),
            }),
            adapter: AdapterParams {
                proj_mem: ParamSpec::matrix(d, cfg.d_out),
                proj_perc: ParamSpec::matrix(d, cfg.d_out),
            },
            head: HeadParams {
                w: ParamSpec::matrix(cfg.d_out, cfg.num_classes),
                b: ParamSpec::zeros(cfg.num_classes),
            },
        }
    }
}

impl<T: Real> ModelParams<Tensor<T>> {
    /// Seeded initialisation; each tensor draws from its own named stream.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Self {
        ModelParams::spec(cfg).map("", |name, spec| spec.sample(&mut param_rng(seed, name)))
    }

    /// Rebuilds a parameter tree from named tensors, checking names and shapes
    /// against `cfg`.
    pub fn from_named(cfg: &ModelConfig, mut tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        let spec = ModelParams::spec(cfg);
        let expected: Vec<String> = spec.named("").into_iter().map(|(n, _)| n).collect();
        let missing: Vec<String> = expected
            .iter()
            .filter(|n| !tensors.contains_key(*n))
            .cloned()
            .collect();
        let unexpected: Vec<String> = tensors
            .keys()
            .filter(|n| !expected.contains(n))
            .cloned()
            .collect();
        if !missing.is_empty() || !unexpected.is_empty() {
            return Err(Error::TensorNames {
                missing,
                unexpected,
            });
        }
        spec.try_map("", &mut |name, s| {
            let t = tensors.remove(name).expect("presence checked above");
            if t.shape() != s.shape.as_slice() {
                return Err(Error::TensorShape {
                    name: name.to_string(),
                    expected: s.shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
            Ok(t)
        })
    }

    pub fn cast<U: Real>(&self) -> ModelParams<Tensor<U>> {
        self.map("", |_, t| t.cast())
    }

    pub fn num_scalars(&self) -> usize {
        self.named("").iter().map(|(_, t)| t.numel()).sum()
    }
}
