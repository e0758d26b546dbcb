use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, PoolConfig};

macro_rules! string_enum {
    ($(#[$meta:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
        #[serde(rename_all = "lowercase")]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }

        impl FromStr for $name {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " `{}` (expected one of: {})"),
                        s,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

string_enum! {
    /// Which compressor outputs reach the token sequence.
    Branch { Mem => "mem", Txt => "txt", Full => "full" }
}

string_enum! {
    /// Order of memory and perceived tokens in the assembled sequence.
    Layout { Interleaved => "interleaved", Blocked => "blocked" }
}

string_enum! {
    /// Training stage; selects the freeze mask.
    Stage { Align => "align", Instruct => "instruct" }
}

string_enum! {
    TaskKind { Order => "order", Gap => "gap", Presence => "presence" }
}

impl Branch {
    pub fn uses_memory(self) -> bool {
        matches!(self, Branch::Mem | Branch::Full)
    }

    pub fn uses_text(self) -> bool {
        matches!(self, Branch::Txt | Branch::Full)
    }

    pub fn tokens_per_frame(self) -> usize {
        match self {
            Branch::Full => 2,
            Branch::Mem | Branch::Txt => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompressorConfig {
    pub clip_size: usize,
    pub memory_size: usize,
    pub num_blocks: usize,
    pub dim: usize,
    pub num_heads: usize,
    /// Patch grid side of the input frames.
    pub grid: usize,
    pub cache_detached: bool,
}

impl Default for CompressorConfig {
    fn default() -> Self {
        Self {
            clip_size: 8,
            memory_size: 3,
            num_blocks: 4,
            dim: 64,
            num_heads: 1,
            grid: 16,
            cache_detached: true,
        }
    }
}

impl CompressorConfig {
    pub fn pool(&self) -> PoolConfig {
        PoolConfig::HALVE_SPATIAL
    }

    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    /// (T, H, W) after each block, starting with the input grid.
    pub fn stage_grids(&self) -> Result<Vec<[usize; 3]>> {
        let mut grids = vec![[self.clip_size, self.grid, self.grid]];
        for _ in 0..self.num_blocks {
            let [t, h, w] = *grids.last().unwrap();
            grids.push(self.pool().out_shape(t, h, w)?);
        }
        Ok(grids)
    }

    pub fn validate(&self) -> Result<()> {
        if self.clip_size == 0 {
            return Err(Error::Config("clip_size must be at least 1".into()));
        }
        if self.dim == 0 || self.num_heads == 0 || self.dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "d = {} must be a positive multiple of num_heads = {}",
                self.dim, self.num_heads
            )));
        }
        if self.num_blocks == 0 {
            return Err(Error::Config("num_blocks must be at least 1".into()));
        }
        let grids = self.stage_grids()?;
        if grids.iter().any(|g| g[0] != self.clip_size) {
            return Err(Error::Config("pooling must preserve the clip length".into()));
        }
        let last = grids.last().unwrap();
        if last[1] != 1 || last[2] != 1 {
            return Err(Error::Config(format!(
                "a {0}x{0} grid does not reach 1x1 after exactly {1} halvings",
                self.grid, self.num_blocks
            )));
        }
        if grids[grids.len() - 2][1] == 1 {
            return Err(Error::Config(format!(
                "a {0}x{0} grid reaches 1x1 before block {1}",
                self.grid, self.num_blocks
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub n_q: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub max_prompt_len: usize,
    /// Learned Q/K/V projections inside the fusion attention.
    pub learned_fusion: bool,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            n_q: 32,
            layers: 2,
            vocab_size: 256,
            max_prompt_len: 64,
            learned_fusion: false,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_q == 0 || self.layers == 0 || self.vocab_size == 0 || self.max_prompt_len == 0 {
            return Err(Error::Config(
                "n_q, Q-Former layers, vocabulary size and prompt length must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub compressor: CompressorConfig,
    pub text: TextConfig,
    pub d_out: usize,
    pub branch: Branch,
    pub layout: Layout,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            compressor: CompressorConfig::default(),
            text: TextConfig::default(),
            d_out: 128,
            branch: Branch::Full,
            layout: Layout::Interleaved,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    pub fn dim(&self) -> usize {
        self.compressor.dim
    }

    pub fn validate(&self) -> Result<()> {
        self.compressor.validate()?;
        self.text.validate()?;
        if self.d_out == 0 || self.num_classes < 2 {
            return Err(Error::Config("d_out ≥ 1 and num_classes ≥ 2 required".into()));
        }
        Ok(())
    }
}

/// Flat run configuration: every key of the JSON config file maps to one field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub clip_size: usize,
    pub memory_size: usize,
    pub n_q: usize,
    pub d: usize,
    pub d_out: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    /// Patch grid side; must reach 1x1 after `num_blocks` halvings.
    pub grid: usize,
    pub seed: u64,
    pub precision: DType,
    pub branch: Branch,
    pub layout: Layout,
    pub cache_detached: bool,
    pub stage: Stage,
    pub learned_fusion: bool,
    pub qformer_layers: usize,

    pub task: TaskKind,
    /// Frames per toy video.
    pub frames: usize,
    /// Window for the gap task, in frames.
    pub gap: usize,
    /// Patches covered by one toy event; unset means the whole frame.
    pub event_patches: Option<usize>,
    pub noise_scale: f64,
    pub signal_scale: f64,
    pub train_examples: usize,
    pub test_examples: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub warmup_ratio: f64,
    pub log_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        Self {
            clip_size: model.compressor.clip_size,
            memory_size: model.compressor.memory_size,
            n_q: model.text.n_q,
            d: model.compressor.dim,
            d_out: model.d_out,
            num_blocks: model.compressor.num_blocks,
            num_heads: model.compressor.num_heads,
            grid: model.compressor.grid,
            seed: 0,
            precision: DType::F32,
            branch: model.branch,
            layout: model.layout,
            cache_detached: model.compressor.cache_detached,
            stage: Stage::Instruct,
            learned_fusion: false,
            qformer_layers: model.text.layers,
            task: TaskKind::Order,
            frames: 32,
            gap: 8,
            event_patches: None,
            noise_scale: 0.5,
            signal_scale: 4.0,
            train_examples: 4000,
            test_examples: 256,
            steps: 600,
            lr: 0.2,
            batch_size: 8,
            warmup_ratio: 0.03,
            log_every: 10,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            compressor: CompressorConfig {
                clip_size: self.clip_size,
                memory_size: self.memory_size,
                num_blocks: self.num_blocks,
                dim: self.d,
                num_heads: self.num_heads,
                grid: self.grid,
                cache_detached: self.cache_detached,
            },
            text: TextConfig {
                n_q: self.n_q,
                layers: self.qformer_layers,
                learned_fusion: self.learned_fusion,
                ..TextConfig::default()
            },
            d_out: self.d_out,
            branch: self.branch,
            layout: self.layout,
            num_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        if self.frames == 0 || self.batch_size == 0 {
            return Err(Error::Config("frames and batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio {} outside [0, 1)",
                self.warmup_ratio
            )));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }
}
