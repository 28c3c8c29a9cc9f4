//! Central finite-difference checks of the autodiff tape, in f64.
//!
//! Each op's output is reduced as `sum(op(inputs) * w)` with a fixed random
//! `w`, so every output element receives a distinct upstream gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::canvas::{compose, patchify, CanvasLayout, Image, Point};
use crate::error::Result;
use crate::glyphfont::GlyphFont;
use crate::mae::{MaeModel, ModelConfig, PosEmbedding};
use crate::nn::{Graph, LossScope, Tensor, Var};

/// Step for central differences.
pub const STEP: f64 = 1e-5;

type OpFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync>;

/// A differentiable op applied to random inputs of fixed shapes.
pub struct OpCase {
    pub name: &'static str,
    pub shapes: Vec<Vec<usize>>,
    pub op: OpFn,
}

fn case(
    name: &'static str,
    shapes: &[&[usize]],
    op: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + Send + Sync + 'static,
) -> OpCase {
    OpCase { name, shapes: shapes.iter().map(|s| s.to_vec()).collect(), op: Box::new(op) }
}

/// Every differentiable op on the tape, including broadcasting variants.
pub fn op_cases() -> Vec<OpCase> {
    vec![
        case("add", &[&[3, 4], &[3, 4]], |g, v| g.add(v[0], v[1])),
        case("add_broadcast", &[&[2, 3, 4], &[4]], |g, v| g.add(v[0], v[1])),
        case("mul", &[&[3, 5], &[3, 5]], |g, v| g.mul(v[0], v[1])),
        case("mul_broadcast", &[&[4, 5], &[5]], |g, v| g.mul(v[0], v[1])),
        case("scale", &[&[6]], |g, v| Ok(g.scale(v[0], -1.7))),
        case("matmul", &[&[3, 4], &[4, 5]], |g, v| g.matmul(v[0], v[1])),
        case("transpose", &[&[2, 3, 4]], |g, v| g.transpose(v[0])),
        case("reshape", &[&[2, 6]], |g, v| g.reshape(v[0], &[3, 4])),
        case("slice", &[&[4, 5]], |g, v| g.slice(v[0], 1, 1, 4)),
        case("concat_rows", &[&[2, 3], &[1, 3], &[3, 3]], |g, v| g.concat(&v[..3], 0)),
        case("concat_cols", &[&[2, 3], &[2, 2]], |g, v| g.concat(&v[..2], 1)),
        case("gather_rows", &[&[4, 3]], |g, v| g.gather_rows(v[0], &[2, 0, 2, 3, 1])),
        case("mean", &[&[3, 4]], |g, v| g.mean(v[0])),
        case("sum", &[&[3, 4]], |g, v| Ok(g.sum(v[0]))),
        case("gelu", &[&[10]], |g, v| Ok(g.gelu(v[0]))),
        case("softmax_last", &[&[3, 5]], |g, v| g.softmax(v[0], 1)),
        case("softmax_first", &[&[4, 3]], |g, v| g.softmax(v[0], 0)),
        case("layer_norm", &[&[4, 6], &[6], &[6]], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-6)),
        case("linear_bias", &[&[5, 4], &[4, 3], &[3]], |g, v| g.linear(v[0], v[1], Some(v[2]))),
        case("linear_no_bias", &[&[5, 4], &[4, 3]], |g, v| g.linear(v[0], v[1], None)),
        case("attention", &[&[6, 4], &[6, 4], &[6, 4]], |g, v| g.attention(v[0], v[1], v[2], 2, 3)),
        case("masked_mse", &[&[5, 3], &[5, 3]], |g, v| g.masked_mse(v[0], v[1], &[0, 3, 4])),
    ]
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// `|a - n| / max(|a|, |n|)` with Euclidean norms; the absolute difference when both vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale < 1e-12 {
        norm(&diff)
    } else {
        norm(&diff) / scale
    }
}

fn weighted_sum(op: &OpCase, inputs: &[Tensor<f64>], w: &Tensor<f64>) -> Result<(Graph<f64>, Var, Vec<Var>)> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = (op.op)(&mut g, &vars)?;
    let w = g.constant(w.clone());
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    Ok((g, loss, vars))
}

/// Worst relative error over the inputs of `op` for one seeded trial.
pub fn op_error(op: &OpCase, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor<f64>> = op.shapes.iter().map(|s| random(s, &mut rng)).collect();
    let out_shape = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = (op.op)(&mut g, &vars)?;
        g.shape(out).to_vec()
    };
    let w = random(&out_shape, &mut rng);
    let (g, loss, vars) = weighted_sum(op, &inputs, &w)?;
    let grads = g.backward(loss)?;
    let mut worst = 0.0f64;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).map_or_else(|| vec![0.0; inputs[i].numel()], |t| t.data().to_vec());
        let mut numeric = Vec::with_capacity(analytic.len());
        for j in 0..inputs[i].numel() {
            let eval = |delta: f64| -> Result<f64> {
                let mut xs = inputs.clone();
                xs[i].data_mut()[j] += delta;
                let (g, l, _) = weighted_sum(op, &xs, &w)?;
                g.value(l).item()
            };
            numeric.push((eval(STEP)? - eval(-STEP)?) / (2.0 * STEP));
        }
        worst = worst.max(relative_error(&analytic, &numeric));
    }
    Ok(worst)
}

/// 64-pixel canvas with a two-cell label, small enough for exhaustive checks.
pub fn tiny_layout() -> CanvasLayout {
    CanvasLayout {
        canvas_side: 64,
        patch_size: 16,
        image_size: 32,
        image_origin: Point { x: 16, y: 0 },
        label_origin: Point { x: 0, y: 32 },
        label_cells: 2,
        label_height: 32,
        channels: 1,
    }
}

pub fn tiny_model(layout: &CanvasLayout, pos_embedding: PosEmbedding) -> ModelConfig {
    ModelConfig {
        patch_dim: layout.patch_dim(),
        seq_len: layout.num_patches(),
        encoder_dim: 8,
        encoder_depth: 1,
        encoder_heads: 2,
        decoder_dim: 8,
        decoder_depth: 1,
        decoder_heads: 2,
        mlp_ratio: 2,
        pos_embedding,
    }
}

/// Outcome of one full-model gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCheck {
    pub relative_error: f64,
    /// Names of parameters the backward pass left without a gradient.
    pub missing: Vec<String>,
    pub grad_norm: f64,
}

/// Compares the accumulated parameter gradient of a two-sample batched loss
/// against central differences on one coordinate of every parameter plus
/// `extra` random coordinates. Alternates positional-embedding kinds and loss
/// scopes with the seed.
pub fn mae_loss_check(seed: u64, extra: usize) -> Result<ModelCheck> {
    let font = GlyphFont::builtin();
    let layout = tiny_layout();
    let pos = if seed % 2 == 0 { PosEmbedding::Sinusoidal } else { PosEmbedding::Learned };
    let scope = if seed % 3 == 0 { LossScope::Full } else { LossScope::Masked };
    let mut model = MaeModel::<f64>::new(tiny_model(&layout, pos), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(100));
    let (mut inputs, mut targets, mut masked) = (Vec::new(), Vec::new(), Vec::new());
    for label in ["ab", "z"] {
        let img = Image::new(8, 8, 1, (0..64).map(|_| rng.gen_range(0.0..1.0)).collect())?;
        let s = compose(&img, label, &layout, font)?;
        inputs.push(patchify(&s.canvas, &layout)?);
        targets.push(patchify(&s.target, &layout)?);
        masked = s.masked_patch_ids;
    }
    let loss_of = |m: &MaeModel<f64>| -> Result<(f64, Graph<f64>, Var)> {
        let mut g = Graph::new();
        let l = m.loss_graph(&mut g, &inputs, &targets, &masked, scope)?;
        Ok((g.value(l).item()?, g, l))
    };
    let (_, g, l) = loss_of(&model)?;
    let grads = g.backward(l)?;
    model.params_mut().zero_grads();
    model.params_mut().accumulate(&g, &grads);
    let missing = model.params().iter().filter(|p| p.grad.is_none()).map(|p| p.name.clone()).collect();
    let grad_norm = model.params().grad_norm();

    let sizes: Vec<usize> = model.params().iter().map(|p| p.value.numel()).collect();
    let total: usize = sizes.iter().sum();
    let mut coords: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(i, &n)| (i, rng.gen_range(0..n))).collect();
    for _ in 0..extra {
        let (mut k, mut i) = (rng.gen_range(0..total), 0);
        while k >= sizes[i] {
            k -= sizes[i];
            i += 1;
        }
        coords.push((i, k));
    }
    let ids: Vec<_> = model.params().iter().map(|p| model.params().find(&p.name).expect("registered")).collect();
    let (mut analytic, mut numeric) = (Vec::new(), Vec::new());
    for (pi, j) in coords {
        let id = ids[pi];
        let p = model.params().get(id);
        analytic.push(p.grad.as_ref().map_or(0.0, |g| g.data()[j]));
        let orig = p.value.data()[j];
        let mut eval = |x: f64| -> Result<f64> {
            model.params_mut().get_mut(id).value.data_mut()[j] = x;
            Ok(loss_of(&model)?.0)
        };
        let d = (eval(orig + STEP)? - eval(orig - STEP)?) / (2.0 * STEP);
        eval(orig)?;
        numeric.push(d);
    }
    Ok(ModelCheck { relative_error: relative_error(&analytic, &numeric), missing, grad_norm })
}
