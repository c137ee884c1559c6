//! Model configuration: architecture, per-site norm choice, alpha policy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::norm::{NormKind, Squasher};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    TransformerClassifier,
    TransformerLm,
    MlpClassifier,
}

/// Normalization sites of a model. In transformer blocks the position before
/// attention forms the "attention" group; pre-FFN, the final layer before the
/// output head, and MLP hidden sites are "other". The groups carry different
/// alpha initialization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SitePos {
    PreAttn,
    PreFfn,
    Final,
    Hidden,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormSite {
    pub block: usize,
    pub pos: SitePos,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SiteGroup {
    Attention,
    Other,
}

impl NormSite {
    pub fn group(&self) -> SiteGroup {
        match self.pos {
            SitePos::PreAttn => SiteGroup::Attention,
            SitePos::PreFfn | SitePos::Final | SitePos::Hidden => SiteGroup::Other,
        }
    }
}

impl std::fmt::Display for NormSite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.pos {
            SitePos::PreAttn => write!(f, "b{}.attn", self.block),
            SitePos::PreFfn => write!(f, "b{}.ffn", self.block),
            SitePos::Final => write!(f, "final"),
            SitePos::Hidden => write!(f, "h{}", self.block),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    pub depth: usize,
    pub width: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: f64,
    pub norm: NormKind,
    #[serde(default)]
    pub squasher: Squasher,
    #[serde(default = "default_alpha0")]
    pub alpha0_attention: f64,
    #[serde(default = "default_alpha0")]
    pub alpha0_other: f64,
    #[serde(default = "default_true")]
    pub learnable_alpha: bool,
    /// Learnable scalar after the embedding, init sqrt(width); LM only.
    #[serde(default)]
    pub embedding_scalar: bool,
    #[serde(default)]
    pub vocab: usize,
    /// Tokens for the LM, patches for the classifier (class token excluded).
    #[serde(default)]
    pub seq_len: usize,
    /// Per-patch input dim (classifier) or flat input dim (MLP).
    #[serde(default)]
    pub input_dim: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub dropout: f64,
    /// Per-site overrides of the global norm kind, keyed by the site's
    /// display name (`b0.attn`, `b1.ffn`, `final`, `h0`).
    #[serde(default)]
    pub site_overrides: BTreeMap<String, NormKind>,
}

fn default_heads() -> usize {
    4
}
fn default_ffn_mult() -> f64 {
    4.0
}
fn default_alpha0() -> f64 {
    crate::norm::DEFAULT_ALPHA0
}
fn default_true() -> bool {
    true
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.width == 0 || self.alpha0_attention <= 0.0 || self.alpha0_other <= 0.0 {
            return Err("width must be > 0 and alpha0 values must be > 0".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        match self.arch {
            Arch::TransformerClassifier => {
                if self.width % self.heads != 0 || self.heads == 0 {
                    return Err(format!("width {} not divisible by heads {}", self.width, self.heads));
                }
                if self.seq_len == 0 || self.input_dim == 0 || self.num_classes == 0 {
                    return Err("classifier needs seq_len, input_dim and num_classes".into());
                }
                if self.embedding_scalar {
                    return Err("embedding_scalar is only meaningful for transformer_lm".into());
                }
            }
            Arch::TransformerLm => {
                if self.width % self.heads != 0 || self.heads == 0 {
                    return Err(format!("width {} not divisible by heads {}", self.width, self.heads));
                }
                if self.seq_len == 0 || self.vocab == 0 {
                    return Err("lm needs seq_len and vocab".into());
                }
            }
            Arch::MlpClassifier => {
                if self.input_dim == 0 || self.num_classes == 0 {
                    return Err("mlp needs input_dim and num_classes".into());
                }
                if self.embedding_scalar {
                    return Err("embedding_scalar is only meaningful for transformer_lm".into());
                }
            }
        }
        for key in self.site_overrides.keys() {
            if parse_site(key).is_none() {
                return Err(format!("unknown site override key '{key}'"));
            }
        }
        Ok(())
    }

    /// Norm kind at a site, honoring overrides.
    pub fn site_kind(&self, site: NormSite) -> NormKind {
        self.site_overrides.get(&site.to_string()).copied().unwrap_or(self.norm)
    }

    /// Alpha initialization for a site, grouped attention vs other.
    pub fn site_alpha0(&self, site: NormSite) -> f64 {
        match site.group() {
            SiteGroup::Attention => self.alpha0_attention,
            SiteGroup::Other => self.alpha0_other,
        }
    }
}

pub fn parse_site(s: &str) -> Option<NormSite> {
    if s == "final" {
        return Some(NormSite { block: 0, pos: SitePos::Final });
    }
    if let Some(rest) = s.strip_prefix('h') {
        return rest.parse().ok().map(|block| NormSite { block, pos: SitePos::Hidden });
    }
    let rest = s.strip_prefix('b')?;
    if let Some(idx) = rest.strip_suffix(".attn") {
        return idx.parse().ok().map(|block| NormSite { block, pos: SitePos::PreAttn });
    }
    if let Some(idx) = rest.strip_suffix(".ffn") {
        return idx.parse().ok().map(|block| NormSite { block, pos: SitePos::PreFfn });
    }
    None
}

/// Width-keyed alpha initialization pairs (attention, other). Wider networks
/// take smaller values; depth does not enter the policy. Widths between the
/// documented rows snap to the nearest row in log-width, ties toward the
/// wider (more conservative) row.
pub fn alpha0_policy(width: usize) -> (f64, f64) {
    const TABLE: [(usize, f64, f64); 4] = [
        (1024, 1.0, 1.0),
        (2048, 1.0, 0.5),
        (4096, 0.8, 0.2),
        (8192, 0.2, 0.05),
    ];
    let lw = (width.max(1) as f64).ln();
    let mut best = TABLE[0];
    let mut best_d = f64::INFINITY;
    for row in TABLE {
        let d = (lw - (row.0 as f64).ln()).abs();
        if d < best_d || (d == best_d && row.0 > best.0) {
            best = row;
            best_d = d;
        }
    }
    (best.1, best.2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn alpha0_policy_matches_documented_rows() {
        assert_eq!(alpha0_policy(1024), (1.0, 1.0));
        assert_eq!(alpha0_policy(2048), (1.0, 0.5));
        assert_eq!(alpha0_policy(4096), (0.8, 0.2));
        assert_eq!(alpha0_policy(8192), (0.2, 0.05));
    }

    #[test]
    fn alpha0_policy_snaps_other_widths_to_nearest_row() {
        assert_eq!(alpha0_policy(64), (1.0, 1.0));
        assert_eq!(alpha0_policy(3000), (1.0, 0.5));
        assert_eq!(alpha0_policy(100_000), (0.2, 0.05));
    }

    #[test]
    fn site_groups_follow_position() {
        let attn = NormSite { block: 3, pos: SitePos::PreAttn };
        let ffn = NormSite { block: 3, pos: SitePos::PreFfn };
        let fin = NormSite { block: 0, pos: SitePos::Final };
        assert_eq!(attn.group(), SiteGroup::Attention);
        assert_eq!(ffn.group(), SiteGroup::Other);
        assert_eq!(fin.group(), SiteGroup::Other);
    }

    #[test]
    fn site_names_round_trip() {
        for site in [
            NormSite { block: 0, pos: SitePos::PreAttn },
            NormSite { block: 12, pos: SitePos::PreFfn },
            NormSite { block: 0, pos: SitePos::Final },
            NormSite { block: 2, pos: SitePos::Hidden },
        ] {
            assert_eq!(parse_site(&site.to_string()), Some(site));
        }
        assert_eq!(parse_site("bogus"), None);
    }
}
