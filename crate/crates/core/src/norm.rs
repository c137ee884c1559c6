//! Normalization layers and the Dynamic Tanh (DyT) family.
//!
//! All kinds share one affine convention: the layer produces a pre-affine
//! output `xhat` and returns `y = gamma * xhat + beta` with per-channel
//! `gamma` (init ones) and `beta` (init zeros). The pre-affine tensor is
//! returned alongside `y` so activation-mapping analyses can read the value
//! before the learnable affine transformation without layer surgery.
//!
//! - LayerNorm: `xhat = (x - mean) / sqrt(var + eps)` per token over channels.
//! - RMSNorm: same with the mean-centering removed.
//! - BatchNorm: statistics per channel over batch x tokens; train mode
//!   updates running statistics, eval mode consumes them.
//! - DyT: `xhat = squash(alpha * x)` elementwise with a learnable scalar
//!   `alpha`; squashers are tanh, hardtanh (clamp to [-1,1]), sigmoid, and
//!   identity (ablation baseline only).

use serde::{Deserialize, Serialize};

use crate::params::{Bindings, ParamId, ParamSet};
use crate::tensor::{Graph, Result, Tensor, UnaryKind, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const RMS_NORM_EPS: f64 = 1e-6;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;
pub const DEFAULT_ALPHA0: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Configuration-level layer choice.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
    BatchNorm,
    Dyt,
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            NormKind::LayerNorm => "layer_norm",
            NormKind::RmsNorm => "rms_norm",
            NormKind::BatchNorm => "batch_norm",
            NormKind::Dyt => "dyt",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Squasher {
    #[default]
    Tanh,
    Hardtanh,
    Sigmoid,
    Identity,
}

impl Squasher {
    pub fn unary(self) -> UnaryKind {
        match self {
            Squasher::Tanh => UnaryKind::Tanh,
            Squasher::Hardtanh => UnaryKind::HardTanh,
            Squasher::Sigmoid => UnaryKind::Sigmoid,
            Squasher::Identity => UnaryKind::Identity,
        }
    }

    pub const ALL: [Squasher; 4] =
        [Squasher::Tanh, Squasher::Hardtanh, Squasher::Sigmoid, Squasher::Identity];
}

impl std::fmt::Display for Squasher {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Squasher::Tanh => "tanh",
            Squasher::Hardtanh => "hardtanh",
            Squasher::Sigmoid => "sigmoid",
            Squasher::Identity => "identity",
        };
        f.write_str(s)
    }
}

/// Per-channel scale and shift, gamma init ones, beta init zeros.
#[derive(Clone, Debug)]
pub struct AffineParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl AffineParams {
    pub fn create(set: &mut ParamSet, prefix: &str, c: usize) -> Self {
        AffineParams {
            gamma: set.insert(format!("{prefix}.gamma"), Tensor::ones(vec![c])),
            beta: set.insert(format!("{prefix}.beta"), Tensor::zeros(vec![c])),
        }
    }
}

/// BatchNorm running statistics, init mean 0 / var 1 so eval before any
/// train step standardizes against the unit Gaussian.
#[derive(Clone, Debug)]
pub struct RunningStats {
    pub mean: ParamId,
    pub var: ParamId,
}

#[derive(Clone, Debug)]
pub enum LayerKind {
    LayerNorm { eps: f64 },
    RmsNorm { eps: f64 },
    BatchNorm { eps: f64, momentum: f64, running: RunningStats },
    Dyt { squasher: Squasher, alpha: AlphaParam },
}

/// DyT's scalar: a length-1 trainable tensor, or a fixed constant for the
/// "without alpha" ablation.
#[derive(Clone, Debug)]
pub enum AlphaParam {
    Learnable(ParamId),
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct NormLayer {
    pub kind: LayerKind,
    pub affine: AffineParams,
}

/// Forward result: traced output plus the pre-affine value for capture.
pub struct NormOut {
    pub y: Var,
    pub pre_affine: Tensor,
}

impl NormLayer {
    pub fn layer_norm(set: &mut ParamSet, prefix: &str, c: usize) -> Self {
        NormLayer {
            kind: LayerKind::LayerNorm { eps: LAYER_NORM_EPS },
            affine: AffineParams::create(set, prefix, c),
        }
    }

    pub fn rms_norm(set: &mut ParamSet, prefix: &str, c: usize) -> Self {
        NormLayer {
            kind: LayerKind::RmsNorm { eps: RMS_NORM_EPS },
            affine: AffineParams::create(set, prefix, c),
        }
    }

    pub fn batch_norm(set: &mut ParamSet, prefix: &str, c: usize) -> Self {
        let running = RunningStats {
            mean: set.insert_state(format!("{prefix}.running_mean"), Tensor::zeros(vec![c])),
            var: set.insert_state(format!("{prefix}.running_var"), Tensor::ones(vec![c])),
        };
        NormLayer {
            kind: LayerKind::BatchNorm { eps: BATCH_NORM_EPS, momentum: BATCH_NORM_MOMENTUM, running },
            affine: AffineParams::create(set, prefix, c),
        }
    }

    pub fn dyt(
        set: &mut ParamSet,
        prefix: &str,
        c: usize,
        squasher: Squasher,
        alpha0: f64,
        learnable_alpha: bool,
    ) -> Self {
        let alpha = if learnable_alpha {
            AlphaParam::Learnable(set.insert(format!("{prefix}.alpha"), Tensor::scalar(alpha0)))
        } else {
            AlphaParam::Fixed(1.0)
        };
        NormLayer {
            kind: LayerKind::Dyt { squasher, alpha },
            affine: AffineParams::create(set, prefix, c),
        }
    }

    /// Build a layer of the given config kind; `alpha0` and the DyT options
    /// are ignored for the normalization kinds.
    pub fn create(
        set: &mut ParamSet,
        prefix: &str,
        c: usize,
        kind: NormKind,
        squasher: Squasher,
        alpha0: f64,
        learnable_alpha: bool,
    ) -> Self {
        match kind {
            NormKind::LayerNorm => Self::layer_norm(set, prefix, c),
            NormKind::RmsNorm => Self::rms_norm(set, prefix, c),
            NormKind::BatchNorm => Self::batch_norm(set, prefix, c),
            NormKind::Dyt => Self::dyt(set, prefix, c, squasher, alpha0, learnable_alpha),
        }
    }

    /// Run the layer on `x`, binding its parameters onto the graph. BatchNorm
    /// in train mode updates the running statistics in `set`, which is the
    /// only mutation; all other kinds leave the set untouched.
    pub fn forward(
        &self,
        g: &mut Graph,
        set: &mut ParamSet,
        binds: &mut Bindings,
        x: Var,
        mode: Mode,
    ) -> Result<NormOut> {
        let gamma = binds.bind(g, set, self.affine.gamma);
        let beta = binds.bind(g, set, self.affine.beta);
        match &self.kind {
            LayerKind::LayerNorm { eps } => {
                let (y, pre) = g.layer_norm(x, gamma, beta, *eps)?;
                Ok(NormOut { y, pre_affine: pre })
            }
            LayerKind::RmsNorm { eps } => {
                let (y, pre) = g.rms_norm(x, gamma, beta, *eps)?;
                Ok(NormOut { y, pre_affine: pre })
            }
            LayerKind::BatchNorm { eps, momentum, running } => match mode {
                Mode::Train => {
                    let (y, pre, batch_mean, batch_var) = g.batch_norm_train(x, gamma, beta, *eps)?;
                    // running <- (1-m)*running + m*batch
                    let m = *momentum;
                    for (id, batch) in [(running.mean, &batch_mean), (running.var, &batch_var)] {
                        let r = set.get_mut(id);
                        for (rv, &bv) in r.data_mut().iter_mut().zip(batch.data()) {
                            *rv = (1.0 - m) * *rv + m * bv;
                        }
                    }
                    Ok(NormOut { y, pre_affine: pre })
                }
                Mode::Eval => {
                    let mean = set.get(running.mean).clone();
                    let var = set.get(running.var).clone();
                    let (y, pre) = g.batch_norm_eval(x, gamma, beta, *eps, &mean, &var)?;
                    Ok(NormOut { y, pre_affine: pre })
                }
            },
            LayerKind::Dyt { squasher, alpha } => {
                let alpha_var = match alpha {
                    AlphaParam::Learnable(id) => binds.bind(g, set, *id),
                    AlphaParam::Fixed(v) => g.leaf(&Tensor::scalar(*v)),
                };
                let (y, pre) = g.dyt(x, alpha_var, gamma, beta, squasher.unary())?;
                Ok(NormOut { y, pre_affine: pre })
            }
        }
    }

    /// Current alpha value, `None` for non-DyT layers.
    pub fn alpha_value(&self, set: &ParamSet) -> Option<f64> {
        match &self.kind {
            LayerKind::Dyt { alpha: AlphaParam::Learnable(id), .. } => Some(set.get(*id).item()),
            LayerKind::Dyt { alpha: AlphaParam::Fixed(v), .. } => Some(*v),
            _ => None,
        }
    }

    pub fn is_dyt(&self) -> bool {
        matches!(self.kind, LayerKind::Dyt { .. })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_diff_check_multi;

    fn run_layer(layer: &NormLayer, set: &mut ParamSet, x: &Tensor, mode: Mode) -> (Tensor, Tensor) {
        let mut g = Graph::new();
        let mut binds = Bindings::new();
        let xv = g.leaf(x);
        let out = layer.forward(&mut g, set, &mut binds, xv, mode).unwrap();
        (g.value(out.y).clone(), out.pre_affine)
    }

    fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
        assert_eq!(actual.len(), expected.len());
        for (a, e) in actual.iter().zip(expected) {
            assert!((a - e).abs() <= tol, "{a} vs {e} (tol {tol})");
        }
    }

    #[test]
    fn layer_norm_hand_computed_token() {
        // token [1,2,3,4]: mu=2.5, var=1.25 (population)
        let mut set = ParamSet::new();
        let mut layer = NormLayer::layer_norm(&mut set, "ln", 4);
        // eps=0 for the exact closed form
        layer.kind = LayerKind::LayerNorm { eps: 0.0 };
        let x = Tensor::new(vec![1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (_, pre) = run_layer(&layer, &mut set, &x, Mode::Eval);
        let s = 1.25f64.sqrt();
        let expected = [-1.5 / s, -0.5 / s, 0.5 / s, 1.5 / s];
        assert_close(pre.data(), &expected, 1e-12);
    }

    #[test]
    fn layer_norm_zero_variance_token() {
        let mut set = ParamSet::new();
        let layer = NormLayer::layer_norm(&mut set, "ln", 4);
        let x = Tensor::new(vec![1, 1, 4], vec![1.0; 4]).unwrap();
        let (_, pre) = run_layer(&layer, &mut set, &x, Mode::Eval);
        assert_close(pre.data(), &[0.0; 4], 1e-9);
    }

    #[test]
    fn layer_norm_affine_of_zero_variance_token() {
        let mut set = ParamSet::new();
        let layer = NormLayer::layer_norm(&mut set, "ln", 4);
        *set.get_mut(layer.affine.gamma) = Tensor::full(vec![4], 2.0);
        *set.get_mut(layer.affine.beta) = Tensor::full(vec![4], 1.0);
        let x = Tensor::new(vec![1, 1, 4], vec![1.0; 4]).unwrap();
        let (y, _) = run_layer(&layer, &mut set, &x, Mode::Eval);
        assert_close(y.data(), &[1.0; 4], 1e-9);
    }

    #[test]
    fn rms_norm_hand_computed_token() {
        let mut set = ParamSet::new();
        let mut layer = NormLayer::rms_norm(&mut set, "rms", 2);
        layer.kind = LayerKind::RmsNorm { eps: 0.0 };
        let x = Tensor::new(vec![1, 1, 2], vec![3.0, 4.0]).unwrap();
        let (_, pre) = run_layer(&layer, &mut set, &x, Mode::Eval);
        let r = 12.5f64.sqrt();
        assert_close(pre.data(), &[3.0 / r, 4.0 / r], 1e-12);
    }

    #[test]
    fn rms_norm_of_zero_token_is_zero() {
        let mut set = ParamSet::new();
        let layer = NormLayer::rms_norm(&mut set, "rms", 3);
        let x = Tensor::new(vec![1, 1, 3], vec![0.0; 3]).unwrap();
        let (_, pre) = run_layer(&layer, &mut set, &x, Mode::Eval);
        assert_close(pre.data(), &[0.0; 3], 1e-15);
    }

    #[test]
    fn rms_matches_layer_norm_on_zero_mean_tokens() {
        let mut set = ParamSet::new();
        let mut ln = NormLayer::layer_norm(&mut set, "ln", 4);
        ln.kind = LayerKind::LayerNorm { eps: 1e-6 };
        let rms = NormLayer::rms_norm(&mut set, "rms", 4);
        let x = Tensor::new(vec![1, 2, 4], vec![-3.0, 1.0, 2.0, 0.0, -1.5, 0.5, 0.25, 0.75])
            .unwrap();
        // center each token exactly
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(4) {
            let mu = row.iter().sum::<f64>() / 4.0;
            for v in row.iter_mut() {
                *v -= mu;
            }
        }
        let x = Tensor::new(vec![1, 2, 4], data).unwrap();
        let (_, pre_ln) = run_layer(&ln, &mut set, &x, Mode::Eval);
        let (_, pre_rms) = run_layer(&rms, &mut set, &x, Mode::Eval);
        assert_close(pre_ln.data(), pre_rms.data(), 1e-12);
    }

    #[test]
    fn batch_norm_two_sample_batch() {
        // channel values {0, 2}: batch mean 1, batch var 1
        let mut set = ParamSet::new();
        let layer = NormLayer::batch_norm(&mut set, "bn", 1);
        let x = Tensor::new(vec![2, 1, 1], vec![0.0, 2.0]).unwrap();
        let (_, pre) = run_layer(&layer, &mut set, &x, Mode::Train);
        let inv = 1.0 / (1.0 + BATCH_NORM_EPS).sqrt();
        assert_close(pre.data(), &[-inv, inv], 1e-12);
        // running stats after one step: (1-m)*init + m*batch
        let LayerKind::BatchNorm { running, .. } = &layer.kind else { unreachable!() };
        assert_close(set.get(running.mean).data(), &[0.1], 1e-15);
        assert_close(set.get(running.var).data(), &[0.9 + 0.1], 1e-15);
    }

    #[test]
    fn batch_norm_single_element_batch_is_centered() {
        let mut set = ParamSet::new();
        let layer = NormLayer::batch_norm(&mut set, "bn", 3);
        let x = Tensor::new(vec![1, 1, 3], vec![5.0, -2.0, 0.3]).unwrap();
        let (_, pre) = run_layer(&layer, &mut set, &x, Mode::Train);
        assert_close(pre.data(), &[0.0; 3], 1e-9);
    }

    #[test]
    fn batch_norm_eval_uses_initial_running_stats() {
        let mut set = ParamSet::new();
        let layer = NormLayer::batch_norm(&mut set, "bn", 2);
        let x = Tensor::new(vec![1, 1, 2], vec![1.0, -1.0]).unwrap();
        let (_, pre) = run_layer(&layer, &mut set, &x, Mode::Eval);
        let inv = 1.0 / (1.0 + BATCH_NORM_EPS).sqrt();
        assert_close(pre.data(), &[inv, -inv], 1e-12);
    }

    #[test]
    fn dyt_at_zero_returns_beta() {
        let mut set = ParamSet::new();
        let layer = NormLayer::dyt(&mut set, "dyt", 2, Squasher::Tanh, 0.7, true);
        *set.get_mut(layer.affine.beta) = Tensor::new(vec![2], vec![0.25, -0.5]).unwrap();
        let x = Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap();
        let (y, _) = run_layer(&layer, &mut set, &x, Mode::Eval);
        assert_close(y.data(), &[0.25, -0.5], 1e-15);
    }

    #[test]
    fn dyt_saturates_for_large_inputs() {
        let mut set = ParamSet::new();
        let layer = NormLayer::dyt(&mut set, "dyt", 1, Squasher::Tanh, DEFAULT_ALPHA0, true);
        let x = Tensor::new(vec![1, 1, 1], vec![100.0]).unwrap();
        let (_, pre) = run_layer(&layer, &mut set, &x, Mode::Eval);
        assert!((pre.data()[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn dyt_identity_with_unit_params_is_identity_map() {
        let mut set = ParamSet::new();
        let layer = NormLayer::dyt(&mut set, "dyt", 3, Squasher::Identity, 1.0, true);
        let x = Tensor::new(vec![1, 2, 3], vec![0.5, -1.0, 2.0, 3.0, -0.25, 0.0]).unwrap();
        let (y, _) = run_layer(&layer, &mut set, &x, Mode::Eval);
        assert_close(y.data(), x.data(), 1e-15);
    }

    #[test]
    fn dyt_output_bound_holds() {
        let mut set = ParamSet::new();
        for squasher in [Squasher::Tanh, Squasher::Hardtanh, Squasher::Sigmoid] {
            let layer = NormLayer::dyt(&mut set, &format!("d{squasher}"), 2, squasher, 0.5, true);
            *set.get_mut(layer.affine.gamma) = Tensor::new(vec![2], vec![2.0, -3.0]).unwrap();
            *set.get_mut(layer.affine.beta) = Tensor::new(vec![2], vec![0.5, 1.0]).unwrap();
            let x = Tensor::new(vec![1, 2, 2], vec![50.0, -75.0, 1e6, -1e6]).unwrap();
            let (y, _) = run_layer(&layer, &mut set, &x, Mode::Eval);
            for (i, v) in y.data().iter().enumerate() {
                let k = i % 2;
                let bound = [2.0f64, 3.0][k] + [0.5f64, 1.0][k];
                assert!(v.abs() <= bound + 1e-12, "|{v}| > {bound}");
            }
        }
    }

    #[test]
    fn dyt_without_alpha_uses_fixed_unit_scale() {
        let mut set = ParamSet::new();
        let layer = NormLayer::dyt(&mut set, "dyt", 1, Squasher::Tanh, 0.9, false);
        assert_eq!(layer.alpha_value(&set), Some(1.0));
        let x = Tensor::new(vec![1, 1, 1], vec![0.7]).unwrap();
        let (_, pre) = run_layer(&layer, &mut set, &x, Mode::Eval);
        assert!((pre.data()[0] - 0.7f64.tanh()).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        // one representative per kind; the exhaustive sweep lives in the
        // integration gradcheck suite
        let mut set = ParamSet::new();
        let layers = vec![
            NormLayer::layer_norm(&mut set, "ln", 3),
            NormLayer::rms_norm(&mut set, "rms", 3),
            NormLayer::batch_norm(&mut set, "bn", 3),
            NormLayer::dyt(&mut set, "dyt", 3, Squasher::Tanh, 0.5, true),
        ];
        let x = Tensor::new(vec![2, 2, 3], (0..12).map(|i| (i as f64) * 0.3 - 1.7).collect())
            .unwrap();
        // project with fixed weights so no gradient is identically zero
        let w = Tensor::new(vec![2, 2, 3], (0..12).map(|i| ((i * 7 % 5) as f64) - 1.8).collect())
            .unwrap();
        for layer in &layers {
            let err = finite_diff_check_multi(
                |g, vars| {
                    // clone the set per eval so BN running-stat updates stay pure
                    let mut scratch = set.clone();
                    let mut binds = Bindings::new();
                    let out = layer.forward(g, &mut scratch, &mut binds, vars[0], Mode::Train)?;
                    let wv = g.leaf(&w);
                    let prod = g.mul(out.y, wv)?;
                    g.sum_all(prod)
                },
                std::slice::from_ref(&x),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-5, "layer grad err {err}");
        }
    }

    #[test]
    fn ln_pre_affine_token_statistics() {
        let mut set = ParamSet::new();
        let layer = NormLayer::layer_norm(&mut set, "ln", 8);
        let data: Vec<f64> = (0..2 * 4 * 8).map(|i| ((i * 37 % 23) as f64) * 0.71 - 6.0).collect();
        let x = Tensor::new(vec![2, 4, 8], data).unwrap();
        let (_, pre) = run_layer(&layer, &mut set, &x, Mode::Eval);
        for row in pre.data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-10, "token mean {mean}");
        }
        // with eps=0 and var>0 the variance is exactly 1
        let mut layer0 = NormLayer::layer_norm(&mut set, "ln0", 8);
        layer0.kind = LayerKind::LayerNorm { eps: 0.0 };
        let (_, pre0) = run_layer(&layer0, &mut set, &x, Mode::Eval);
        for row in pre0.data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
            assert!((var - 1.0).abs() < 1e-8, "token var {var}");
        }
    }
}
