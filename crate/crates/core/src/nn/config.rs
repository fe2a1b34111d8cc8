use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How token positions are embedded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PositionalKind {
    /// One learned `D`-vector per position.
    Full,
    /// Position `i` sits at `(i / cols, i % cols)` on a `rows x cols` grid
    /// and receives the sum of a row vector and a column vector.
    Axial { rows: usize, cols: usize },
    /// A `K x D` table indexed by the token's category rather than its
    /// position.
    Category,
}

/// Where the positional and time embeddings are added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeInjection {
    /// Before every block, each block with its own time MLP.
    #[default]
    PerLayer,
    /// Once, before the first block.
    InputOnly,
}

/// Output head layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// One `D -> K` affine map shared by every position.
    #[default]
    Shared,
    /// An independent `D -> K` map per position.
    PerToken,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub n_tokens: usize,
    #[serde(default = "default_categories")]
    pub categories: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    /// Length the keys and values are projected down to.
    pub proj_dim: usize,
    /// Hidden width of the position-wise feed-forward block.
    pub ffn_width: usize,
    pub positional: PositionalKind,
    #[serde(default)]
    pub time_injection: TimeInjection,
    #[serde(default)]
    pub head: HeadKind,
    #[serde(default = "default_ln_eps")]
    pub ln_eps: f64,
}

fn default_categories() -> usize {
    2
}

fn default_ln_eps() -> f64 {
    1e-5
}

/// Full positional table up to this many tokens, axial beyond.
const FULL_POSITIONAL_LIMIT: usize = 1024;

impl DenoiserConfig {
    /// Binary-token config with the default positional layout for `n_tokens`.
    pub fn new(n_tokens: usize, width: usize, layers: usize, heads: usize, proj_dim: usize) -> Self {
        Self {
            n_tokens,
            categories: 2,
            width,
            layers,
            heads,
            proj_dim,
            ffn_width: 2 * width,
            positional: default_positional(n_tokens),
            time_injection: TimeInjection::PerLayer,
            head: HeadKind::Shared,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_tokens == 0 {
            return bad("n_tokens must be positive".into());
        }
        if self.categories < 2 {
            return bad(format!("need at least 2 categories, got {}", self.categories));
        }
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            ));
        }
        if self.layers == 0 {
            return bad("layers must be >= 1".into());
        }
        if self.proj_dim == 0 || self.proj_dim > self.n_tokens {
            return bad(format!(
                "proj_dim {} must lie in [1, n_tokens = {}]",
                self.proj_dim, self.n_tokens
            ));
        }
        if self.ffn_width == 0 {
            return bad("ffn_width must be positive".into());
        }
        if let PositionalKind::Axial { rows, cols } = self.positional {
            if rows * cols < self.n_tokens {
                return bad(format!(
                    "axial grid {rows}x{cols} does not cover {} tokens",
                    self.n_tokens
                ));
            }
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    /// Number of time MLPs.
    pub fn time_mlps(&self) -> usize {
        match self.time_injection {
            TimeInjection::PerLayer => self.layers,
            TimeInjection::InputOnly => 1,
        }
    }
}

pub fn default_positional(n_tokens: usize) -> PositionalKind {
    if n_tokens <= FULL_POSITIONAL_LIMIT {
        PositionalKind::Full
    } else {
        let rows = (n_tokens as f64).sqrt().ceil() as usize;
        PositionalKind::Axial {
            rows,
            cols: n_tokens.div_ceil(rows),
        }
    }
}
