//! Inception, residual, dense and transition blocks as subgraph builders.
//!
//! Ordering conventions: inception and residual blocks use
//! conv → batch-norm → ReLU; dense and transition blocks use the
//! pre-activation order batch-norm → ReLU → conv. Every block convolution
//! is stride 1 with `same` padding; spatial downsampling only happens in
//! explicit 2×2/2 average pools.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::graph::{GraphBuilder, NodeId};
use crate::linalg::Real;
use crate::ops::{Padding, PoolKind};

/// Dense-block bottleneck width as a multiple of the growth rate.
pub const BOTTLENECK_FACTOR: usize = 4;

/// Filter counts of an inception block: a 1×1 reduction feeding a 3×3
/// conv, a 1×1 reduction feeding a 5×5 conv, and the 1×1 conv after the
/// 3×3 max-pool.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InceptionFilters {
    pub reduce3: usize,
    pub out3: usize,
    pub reduce5: usize,
    pub out5: usize,
    pub pool_out: usize,
}

impl InceptionFilters {
    pub fn output_channels(&self) -> usize {
        self.out3 + self.out5 + self.pool_out
    }
}

impl Default for InceptionFilters {
    fn default() -> Self {
        Self {
            reduce3: 16,
            out3: 32,
            reduce5: 16,
            out5: 32,
            pool_out: 16,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "block", rename_all = "lowercase")]
pub enum BlockSpec {
    Inception(InceptionFilters),
    Residual {
        filters: usize,
        dropout: f64,
        downsample: bool,
    },
    Dense {
        growth_rate: usize,
    },
    Transition {
        compression: f64,
    },
}

impl BlockSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BlockSpec::Inception(f) => {
                let all = [f.reduce3, f.out3, f.reduce5, f.out5, f.pool_out];
                if all.contains(&0) {
                    return Err(invalid(format!("inception filter counts must be positive: {f:?}")));
                }
            }
            BlockSpec::Residual { filters, dropout, .. } => {
                if filters == 0 {
                    return Err(invalid("residual block needs a positive filter count"));
                }
                if !(0.0..1.0).contains(&dropout) {
                    return Err(invalid(format!("residual dropout {dropout} outside [0, 1)")));
                }
            }
            BlockSpec::Dense { growth_rate } => {
                if growth_rate == 0 {
                    return Err(invalid("growth rate must be positive"));
                }
            }
            BlockSpec::Transition { compression } => {
                if !(compression > 0.0 && compression <= 1.0) {
                    return Err(invalid(format!("compression {compression} outside (0, 1]")));
                }
            }
        }
        Ok(())
    }

    /// Appends this block after `input`.
    pub fn build<T: Real, R: Rng + ?Sized>(
        &self,
        b: &mut GraphBuilder<'_, T, R>,
        input: NodeId,
        prefix: &str,
    ) -> Result<NodeId> {
        match *self {
            BlockSpec::Inception(f) => build_inception(b, input, prefix, &f),
            BlockSpec::Residual {
                filters,
                dropout,
                downsample,
            } => build_residual(b, input, prefix, filters, dropout, downsample),
            BlockSpec::Dense { growth_rate } => build_dense_block(b, input, prefix, growth_rate),
            BlockSpec::Transition { compression } => build_transition(b, input, prefix, compression),
        }
    }
}

/// Three parallel branches, channel-concatenated in this order:
/// 1×1 → 3×3, 1×1 → 5×5, and 3×3 max-pool (stride 1) → 1×1.
pub fn build_inception<T: Real, R: Rng + ?Sized>(
    b: &mut GraphBuilder<'_, T, R>,
    input: NodeId,
    prefix: &str,
    f: &InceptionFilters,
) -> Result<NodeId> {
    BlockSpec::Inception(*f).validate()?;
    let r3 = b.conv_bn_relu(&format!("{prefix}.b3.reduce"), input, f.reduce3, 1)?;
    let o3 = b.conv_bn_relu(&format!("{prefix}.b3.conv"), r3, f.out3, 3)?;
    let r5 = b.conv_bn_relu(&format!("{prefix}.b5.reduce"), input, f.reduce5, 1)?;
    let o5 = b.conv_bn_relu(&format!("{prefix}.b5.conv"), r5, f.out5, 5)?;
    let pool = b.pool(format!("{prefix}.bp.pool"), input, PoolKind::Max, 3, 1, Padding::Same)?;
    let op = b.conv_bn_relu(&format!("{prefix}.bp.proj"), pool, f.pool_out, 1)?;
    b.concat(&[o3, o5, op])
}

/// Three 3×3 conv stages with an additive shortcut from the block input to
/// the last stage, before its ReLU. A 1×1 projection aligns the shortcut
/// when channel counts differ; `downsample` inserts a 2×2 average pool
/// (stride 2) in front of the block. Dropout follows the two inner ReLUs.
pub fn build_residual<T: Real, R: Rng + ?Sized>(
    b: &mut GraphBuilder<'_, T, R>,
    input: NodeId,
    prefix: &str,
    filters: usize,
    dropout: f64,
    downsample: bool,
) -> Result<NodeId> {
    BlockSpec::Residual {
        filters,
        dropout,
        downsample,
    }
    .validate()?;
    let x = if downsample {
        b.pool(format!("{prefix}.pool"), input, PoolKind::Avg, 2, 2, Padding::Valid)?
    } else {
        input
    };
    let mut h = x;
    for stage in 1..=2 {
        h = b.conv_bn_relu(&format!("{prefix}.stage{stage}"), h, filters, 3)?;
        if dropout > 0.0 {
            h = b.dropout(format!("{prefix}.stage{stage}.dropout"), h, dropout)?;
        }
    }
    let c3 = b.conv(format!("{prefix}.stage3.conv"), h, filters, 3, 1, Padding::Same, false)?;
    let n3 = b.batch_norm(format!("{prefix}.stage3.bn"), c3)?;
    let shortcut = if b.channels(x) != filters {
        b.conv(format!("{prefix}.shortcut"), x, filters, 1, 1, Padding::Same, true)?
    } else {
        x
    };
    let sum = b.add(n3, shortcut)?;
    b.relu(format!("{prefix}.out"), sum)
}

/// One composite dense unit: BN → ReLU → 1×1 conv (4k) → BN → ReLU → 3×3
/// conv (k), concatenated after the input. Output has `in + k` channels.
pub fn build_dense_block<T: Real, R: Rng + ?Sized>(
    b: &mut GraphBuilder<'_, T, R>,
    input: NodeId,
    prefix: &str,
    growth_rate: usize,
) -> Result<NodeId> {
    BlockSpec::Dense { growth_rate }.validate()?;
    let n1 = b.batch_norm(format!("{prefix}.bn1"), input)?;
    let r1 = b.relu(format!("{prefix}.relu1"), n1)?;
    let c1 = b.conv(
        format!("{prefix}.bottleneck"),
        r1,
        BOTTLENECK_FACTOR * growth_rate,
        1,
        1,
        Padding::Same,
        false,
    )?;
    let n2 = b.batch_norm(format!("{prefix}.bn2"), c1)?;
    let r2 = b.relu(format!("{prefix}.relu2"), n2)?;
    let c2 = b.conv(format!("{prefix}.conv"), r2, growth_rate, 3, 1, Padding::Same, false)?;
    b.concat(&[input, c2])
}

/// BN → ReLU → 1×1 conv to `floor(in · compression)` channels → 2×2
/// average pool, stride 2.
pub fn build_transition<T: Real, R: Rng + ?Sized>(
    b: &mut GraphBuilder<'_, T, R>,
    input: NodeId,
    prefix: &str,
    compression: f64,
) -> Result<NodeId> {
    BlockSpec::Transition { compression }.validate()?;
    let cin = b.channels(input);
    let out = transition_channels(cin, compression)?;
    let n = b.batch_norm(format!("{prefix}.bn"), input)?;
    let r = b.relu(format!("{prefix}.relu"), n)?;
    let c = b.conv(format!("{prefix}.conv"), r, out, 1, 1, Padding::Same, false)?;
    b.pool(format!("{prefix}.pool"), c, PoolKind::Avg, 2, 2, Padding::Valid)
}

pub fn transition_channels(in_channels: usize, compression: f64) -> Result<usize> {
    let out = (in_channels as f64 * compression).floor() as usize;
    if out == 0 {
        return Err(invalid(format!(
            "transition from {in_channels} channels with compression {compression} leaves no channels"
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::Graph;
    use crate::layers::{ForwardCtx, LayerKind, Mode};
    use crate::tape::Tape;
    use crate::tensor::Tensor;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_input(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut r = rng(seed);
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(graph: &Graph<f64>, input: &Tensor<f64>, mode: Mode) -> Tensor<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let mut r = rng(99);
        let mut ctx = ForwardCtx { mode, rng: &mut r };
        let (y, _) = graph.forward(&mut tape, x, &mut ctx).unwrap();
        tape.value(y).unwrap().clone()
    }

    #[test]
    fn inception_shapes() {
        let f = InceptionFilters {
            reduce3: 4,
            out3: 32,
            reduce5: 4,
            out5: 32,
            pool_out: 16,
        };
        let g = Graph::<f64>::build(&[8, 12, 12], &mut rng(1), |b, x| build_inception(b, x, "inc", &f)).unwrap();
        assert_eq!(g.output_shape(), &[80, 12, 12]);
        assert_eq!(f.output_channels(), 80);
        let y = run(&g, &random_input(&[1, 8, 12, 12], 2), Mode::Infer);
        assert_eq!(y.shape(), &[1, 80, 12, 12]);

        let bad = InceptionFilters { out5: 0, ..f };
        assert!(Graph::<f64>::build(&[8, 12, 12], &mut rng(1), |b, x| build_inception(b, x, "inc", &bad)).is_err());
    }

    #[test]
    fn inception_has_no_standalone_pointwise_branch() {
        let g = Graph::<f64>::build(&[4, 6, 6], &mut rng(1), |b, x| {
            build_inception(b, x, "inc", &InceptionFilters::default())
        })
        .unwrap();
        let concat = g.nodes().last().unwrap();
        assert_eq!(concat.inputs.len(), 3);
    }

    #[test]
    fn residual_zero_path_is_relu_of_input() {
        let g = Graph::<f64>::build(&[6, 5, 5], &mut rng(3), |b, x| {
            build_residual(b, x, "res", 6, 0.2, false)
        })
        .unwrap();
        assert!(g.layer("res.shortcut").is_none());
        let mut g = g;
        for l in g.layers_mut() {
            if let LayerKind::Conv2d(c) = &mut l.kind {
                c.weight = c.weight.zeros_like();
            }
        }
        for seed in 0..5 {
            let x = random_input(&[2, 6, 5, 5], seed);
            let y = run(&g, &x, Mode::Infer);
            let expect = x.map(|v| v.max(0.0));
            assert_eq!(y, expect);
        }
    }

    #[test]
    fn residual_downsample_and_projection() {
        let g = Graph::<f64>::build(&[3, 28, 28], &mut rng(4), |b, x| {
            build_residual(b, x, "r", 3, 0.0, true)
        })
        .unwrap();
        assert_eq!(g.output_shape(), &[3, 14, 14]);

        let g = Graph::<f64>::build(&[32, 8, 8], &mut rng(4), |b, x| {
            build_residual(b, x, "r", 64, 0.1, false)
        })
        .unwrap();
        assert_eq!(g.output_shape()[0], 64);
        let proj = g.layer("r.shortcut").expect("projection exists");
        match &proj.kind {
            LayerKind::Conv2d(c) => {
                assert_eq!(c.out_channels(), 64);
                assert_eq!(c.kernel_size(), 1);
            }
            _ => panic!("shortcut is not a conv"),
        }
        // dropout after both inner ReLUs only
        let drops = g
            .layers()
            .filter(|l| matches!(l.kind, LayerKind::Dropout { .. }))
            .count();
        assert_eq!(drops, 2);
    }

    #[test]
    fn dense_block_channel_recurrence() {
        let g = Graph::<f64>::build(&[64, 4, 4], &mut rng(5), |b, x| build_dense_block(b, x, "d", 32)).unwrap();
        assert_eq!(g.output_shape(), &[96, 4, 4]);
        for n in [1usize, 3, 6] {
            let g = Graph::<f64>::build(&[64, 3, 3], &mut rng(5), |b, x| {
                let mut h = x;
                for i in 0..n {
                    h = build_dense_block(b, h, &format!("d{i}"), 32)?;
                }
                Ok(h)
            })
            .unwrap();
            assert_eq!(g.output_shape(), &[64 + n * 32, 3, 3]);
        }
        let bottleneck = Graph::<f64>::build(&[8, 3, 3], &mut rng(5), |b, x| build_dense_block(b, x, "d", 5)).unwrap();
        match &bottleneck.layer("d.bottleneck").unwrap().kind {
            LayerKind::Conv2d(c) => assert_eq!(c.out_channels(), 20),
            _ => unreachable!(),
        }
        assert!(Graph::<f64>::build(&[8, 3, 3], &mut rng(5), |b, x| build_dense_block(b, x, "d", 0)).is_err());
    }

    #[test]
    fn dense_block_passes_input_through() {
        let g = Graph::<f64>::build(&[3, 4, 4], &mut rng(6), |b, x| build_dense_block(b, x, "d", 2)).unwrap();
        let x = random_input(&[2, 3, 4, 4], 7);
        let y = run(&g, &x, Mode::Train);
        assert_eq!(y.slice_channels(0, 3).unwrap(), x);
    }

    #[test]
    fn transition_channels_and_spatial() {
        let g = Graph::<f64>::build(&[256, 8, 8], &mut rng(7), |b, x| build_transition(b, x, "t", 0.5)).unwrap();
        assert_eq!(g.output_shape(), &[128, 4, 4]);
        let g = Graph::<f64>::build(&[10, 8, 8], &mut rng(7), |b, x| build_transition(b, x, "t", 1.0)).unwrap();
        assert_eq!(g.output_shape(), &[10, 4, 4]);
        assert_eq!(transition_channels(250, 0.5).unwrap(), 125);
        assert!(transition_channels(1, 0.5).is_err());
        assert!(BlockSpec::Transition { compression: 0.0 }.validate().is_err());
        assert!(BlockSpec::Transition { compression: 1.5 }.validate().is_err());
    }

    #[test]
    fn inception_branches_are_independent() {
        let f = InceptionFilters {
            reduce3: 2,
            out3: 3,
            reduce5: 2,
            out5: 4,
            pool_out: 5,
        };
        let base = Graph::<f64>::build(&[3, 6, 6], &mut rng(8), |b, x| build_inception(b, x, "i", &f)).unwrap();
        let x = random_input(&[2, 3, 6, 6], 9);
        let y0 = run(&base, &x, Mode::Infer);
        let slices = [
            ("i.b3.conv.conv", 0..3),
            ("i.b5.conv.conv", 3..7),
            ("i.bp.proj.conv", 7..12),
        ];
        for (name, range) in slices {
            let mut g = base.clone();
            if let LayerKind::Conv2d(c) = &mut g.layer_mut(name).unwrap().kind {
                c.weight = c.weight.zeros_like();
            }
            let y = run(&g, &x, Mode::Infer);
            assert_ne!(
                y0.slice_channels(range.start, range.end).unwrap(),
                y.slice_channels(range.start, range.end).unwrap(),
                "{name} should change its branch"
            );
            for ch in 0..12 {
                let a = y0.slice_channels(ch, ch + 1).unwrap();
                let b = y.slice_channels(ch, ch + 1).unwrap();
                if range.contains(&ch) {
                    assert!(b.data().iter().all(|&v| v == 0.0));
                } else {
                    assert_eq!(a, b, "{name} changed channel {ch}");
                }
            }
        }
    }

    fn assert_all_params_get_gradient(g: &Graph<f64>, in_shape: &[usize]) {
        let x = random_input(in_shape, 21);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let mut r = rng(5);
        let mut ctx = ForwardCtx {
            mode: Mode::Train,
            rng: &mut r,
        };
        let (y, _) = g.forward(&mut tape, xv, &mut ctx).unwrap();
        let shape = tape.value(y).unwrap().shape().to_vec();
        let weights = tape.constant(random_input(&shape, 22));
        let prod = tape.mul(y, weights).unwrap();
        let loss = tape.sum(prod).unwrap();
        let grads = tape.backward(loss).unwrap();
        for (name, _) in g.params() {
            let gr = grads.param(&name).unwrap();
            assert!(gr.data().iter().any(|&v| v != 0.0), "{name} has a zero gradient");
        }
    }

    #[test]
    fn no_dead_parameters() {
        let f = InceptionFilters {
            reduce3: 2,
            out3: 3,
            reduce5: 2,
            out5: 3,
            pool_out: 2,
        };
        let g = Graph::<f64>::build(&[3, 5, 5], &mut rng(1), |b, x| build_inception(b, x, "i", &f)).unwrap();
        assert_all_params_get_gradient(&g, &[3, 3, 5, 5]);
        let g = Graph::<f64>::build(&[2, 6, 6], &mut rng(2), |b, x| build_residual(b, x, "r", 4, 0.0, true)).unwrap();
        assert!(g.layer("r.shortcut").is_some());
        assert_all_params_get_gradient(&g, &[3, 2, 6, 6]);
        let g = Graph::<f64>::build(&[4, 4, 4], &mut rng(3), |b, x| build_residual(b, x, "r", 4, 0.0, false)).unwrap();
        assert_all_params_get_gradient(&g, &[3, 4, 4, 4]);
        let g = Graph::<f64>::build(&[3, 4, 4], &mut rng(4), |b, x| build_dense_block(b, x, "d", 2)).unwrap();
        assert_all_params_get_gradient(&g, &[3, 3, 4, 4]);
        let g = Graph::<f64>::build(&[6, 4, 4], &mut rng(5), |b, x| build_transition(b, x, "t", 0.5)).unwrap();
        assert_all_params_get_gradient(&g, &[3, 6, 4, 4]);
    }
}
