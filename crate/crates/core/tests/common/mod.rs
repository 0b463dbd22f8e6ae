//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use mdr_core::autodiff::{Tape, Var};
use mdr_core::data::{generate, Modality, Objective, SyntheticGenConfig};
use mdr_core::encoders::{Dims, ImageGeometry, ImageResponse};
use mdr_core::params::{ParamId, ParamStore};
use mdr_core::regimes::{build_model, objective_loss, ModelConfig, Regime};
use mdr_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so entries whose true gradient is
/// ~0 are judged on absolute error.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn random_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Nonlinear scalar readout touching every entry of `y` with its own weight:
/// row-wise cross-entropy of `y · W` against fixed targets.
pub fn readout(tape: &mut Tape, y: Var, seed: u64) -> Var {
    let y = if tape.value(y).rank() == 1 {
        tape.stack_rows(&[y]).unwrap()
    } else {
        y
    };
    let (m, n) = tape.value(y).matrix_dims().unwrap();
    let mut r = rng(seed ^ 0xFEED);
    let w = tape.leaf(random_tensor(&mut r, &[n, 3]));
    let z = tape.matmul(y, w).unwrap();
    let targets: Vec<usize> = (0..m).map(|i| i % 3).collect();
    tape.softmax_cross_entropy_rows(z, &targets).unwrap()
}

/// Max relative error between backward gradients of the leaves and central
/// differences of `build`.
pub fn fd_check_leaves(inputs: &[Tensor], build: &dyn Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Tensor]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf(x.clone())).collect();
        let loss = build(&mut tape, &vars);
        (tape, vars, loss)
    };
    let (tape, vars, loss) = eval(inputs);
    let grads = tape.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (k, x) in inputs.iter().enumerate() {
        let analytic = grads.wrt(vars[k]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);
        for i in 0..x.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= FD_STEP;
            let (tp, _, lp) = eval(&plus);
            let (tm, _, lm) = eval(&minus);
            let numeric = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

/// Same check for parameters in `store`; at most `per_tensor` coordinates per
/// parameter are probed, chosen by `seed`.
pub fn fd_check_params(
    store: &ParamStore,
    ids: &[ParamId],
    per_tensor: usize,
    seed: u64,
    build: &dyn Fn(&mut Tape, &ParamStore) -> Var,
) -> f64 {
    let mut tape = Tape::new();
    let loss = build(&mut tape, store);
    let grads: std::collections::BTreeMap<ParamId, Vec<f64>> =
        tape.backward(loss).unwrap().param_grads().into_iter().collect();
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for &id in ids {
        let len = store.get(id).len();
        let analytic = grads.get(&id).cloned().unwrap_or_else(|| vec![0.0; len]);
        let coords: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| r.random_range(0..len)).collect()
        };
        for i in coords {
            let at = |delta: f64| {
                let mut s = store.clone();
                s.get_mut(id).data_mut()[i] += delta;
                let mut t = Tape::new();
                let l = build(&mut t, &s);
                t.value(l).item()
            };
            let numeric = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            worst = worst.max(rel_err(analytic[i], numeric));
        }
    }
    worst
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn normalize(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

/// Both directions of the in-batch loss by explicit enumeration over (i, j).
pub fn brute_contrastive(c: &[Vec<f64>], r: &[Vec<f64>], tau: f64) -> f64 {
    let b = c.len();
    let s = |i: usize, j: usize| dot(&c[i], &r[j]) / tau;
    let mut forward = 0.0;
    let mut backward = 0.0;
    for i in 0..b {
        let row: Vec<f64> = (0..b).map(|j| s(i, j)).collect();
        forward += -(s(i, i) - log_sum_exp(&row));
        let col: Vec<f64> = (0..b).map(|j| s(j, i)).collect();
        backward += -(s(i, i) - log_sum_exp(&col));
    }
    forward / b as f64 + backward / b as f64
}

pub fn brute_bce(logits: &[f64], labels: &[f64]) -> f64 {
    let n = logits.len() as f64;
    logits
        .iter()
        .zip(labels)
        .map(|(&z, &y)| {
            let p = 1.0 / (1.0 + (-z).exp());
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

fn affine(x: &[f64], w: &Tensor, b: Option<&Tensor>) -> Vec<f64> {
    let (rows, cols) = (w.shape()[0], w.shape()[1]);
    assert_eq!(rows, x.len());
    (0..cols)
        .map(|j| {
            let mut acc = b.map_or(0.0, |b| b.data()[j]);
            for i in 0..rows {
                acc += x[i] * w.data()[i * cols + j];
            }
            acc
        })
        .collect()
}

/// Straight-line text-encoder features (pre-normalization) for one sequence.
pub fn text_features_oracle(store: &ParamStore, prefix: &str, tokens: &[u32]) -> Vec<f64> {
    let p = |n: &str| store.get(store.find(&format!("{prefix}.{n}")).unwrap());
    let emb = p("embedding");
    let d = emb.shape()[1];
    let mut pooled = vec![0.0; d];
    for &t in tokens {
        for j in 0..d {
            pooled[j] += emb.data()[t as usize * d + j];
        }
    }
    pooled.iter_mut().for_each(|v| *v /= tokens.len() as f64);
    let h: Vec<f64> = affine(&pooled, p("w1"), Some(p("b1"))).iter().map(|v| v.tanh()).collect();
    affine(&h, p("w2"), Some(p("b2")))
}

/// Straight-line image encoder: patches in row-major patch order, each
/// flattened row by row then channel.
pub fn image_oracle(store: &ParamStore, prefix: &str, geometry: ImageGeometry, img: &ImageResponse) -> Vec<f64> {
    let p = |n: &str| store.get(store.find(&format!("{prefix}.{n}")).unwrap());
    let pp = geometry.patch;
    let (h, w, c) = (img.height, img.width, img.channels);
    let d_hidden = p("patch_proj").shape()[1];
    let mut pooled = vec![0.0; d_hidden];
    let mut n_patches = 0.0;
    for py in 0..h / pp {
        for px in 0..w / pp {
            let mut patch = Vec::with_capacity(pp * pp * c);
            for dy in 0..pp {
                for dx in 0..pp {
                    for ch in 0..c {
                        patch.push(img.grid[((py * pp + dy) * w + (px * pp + dx)) * c + ch]);
                    }
                }
            }
            let e = affine(&patch, p("patch_proj"), Some(p("patch_bias")));
            pooled.iter_mut().zip(&e).for_each(|(a, b)| *a += b);
            n_patches += 1.0;
        }
    }
    pooled.iter_mut().for_each(|v| *v /= n_patches);
    let hidden: Vec<f64> = affine(&pooled, p("mlp_w1"), Some(p("mlp_b1"))).iter().map(|v| v.tanh()).collect();
    let visual = affine(&hidden, p("mlp_w2"), Some(p("mlp_b2")));
    let label = text_features_oracle(store, &format!("{prefix}.label"), &img.labels);
    let fused: Vec<f64> = visual.into_iter().chain(label).collect();
    normalize(&affine(&fused, p("fusion_proj"), None))
}

/// Scalars in one text encoder: embedding, two weight matrices, two biases.
pub fn text_encoder_count(vocab: usize, d_tok: usize, d_hidden: usize, d_out: usize) -> usize {
    vocab * d_tok + d_tok * d_hidden + d_hidden + d_hidden * d_out + d_out
}

pub fn image_encoder_count(vocab: usize, dims: Dims, geometry: ImageGeometry) -> usize {
    let patch = geometry.patch * geometry.patch * geometry.channels;
    let visual = patch * dims.d_hidden + dims.d_hidden + dims.d_hidden * dims.d_hidden + dims.d_hidden
        + dims.d_hidden * dims.d_vis
        + dims.d_vis;
    let label = text_encoder_count(vocab, dims.d_tok, dims.d_hidden, dims.d_lab);
    visual + label + (dims.d_vis + dims.d_lab) * dims.d_joint
}

pub fn intent_head_count(dims: Dims) -> usize {
    dims.d_joint + 1
}

fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut r = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

pub type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;

/// One finite-difference case: named op, random inputs, scalar graph.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn case(name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

/// Every tape op once, with dims in `1..=5` drawn from `seed`.
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
    let s = seed;
    let mut t = |shape: &[usize]| random_tensor(&mut r, shape);
    let mut cases = vec![
        case("matmul", vec![t(&[m, k]), t(&[k, n])], move |tp, v| {
            let y = tp.matmul(v[0], v[1]).unwrap();
            readout(tp, y, s)
        }),
        case("matmul_nt", vec![t(&[m, k]), t(&[n, k])], move |tp, v| {
            let y = tp.matmul_nt(v[0], v[1]).unwrap();
            readout(tp, y, s)
        }),
        case("cosine_sim_matrix", vec![t(&[m, k]), t(&[n, k])], move |tp, v| {
            let a = tp.l2_normalize(v[0]).unwrap();
            let b = tp.l2_normalize(v[1]).unwrap();
            let y = tp.cosine_sim_matrix(a, b).unwrap();
            readout(tp, y, s)
        }),
        case("transpose+add", vec![t(&[m, n]), t(&[n, m])], move |tp, v| {
            let tr = tp.transpose(v[1]).unwrap();
            let y = tp.add(v[0], tr).unwrap();
            readout(tp, y, s)
        }),
        case("add_row_bias", vec![t(&[m, n]), t(&[n])], move |tp, v| {
            let y = tp.add_row_bias(v[0], v[1]).unwrap();
            readout(tp, y, s)
        }),
        case("scale", vec![t(&[m, n])], move |tp, v| {
            let y = tp.scale(v[0], 1.7);
            readout(tp, y, s)
        }),
        case("div_scalar", vec![t(&[m, n])], move |tp, v| {
            let y = tp.div_scalar(v[0], 0.6).unwrap();
            readout(tp, y, s)
        }),
        case("tanh", vec![t(&[m, n])], move |tp, v| {
            let y = tp.tanh(v[0]);
            readout(tp, y, s)
        }),
        case("concat_cols", vec![t(&[m, k]), t(&[m, n])], move |tp, v| {
            let y = tp.concat_cols(v[0], v[1]).unwrap();
            readout(tp, y, s)
        }),
        case("concat_rows", vec![t(&[k, m]), t(&[n, m])], move |tp, v| {
            let y = tp.concat_rows(v[0], v[1]).unwrap();
            readout(tp, y, s)
        }),
        case("mean_rows", vec![t(&[m, n])], move |tp, v| {
            let y = tp.mean_rows(v[0]).unwrap();
            readout(tp, y, s)
        }),
        case("stack_rows", (0..k).map(|_| t(&[n])).collect(), move |tp, v| {
            let y = tp.stack_rows(v).unwrap();
            readout(tp, y, s)
        }),
        case("l2_normalize", vec![t(&[m, n + 1])], move |tp, v| {
            let y = tp.l2_normalize(v[0]).unwrap();
            readout(tp, y, s)
        }),
        case("dropout", vec![t(&[m, n])], move |tp, v| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(s);
            let y = tp.dropout(v[0], 0.3, Some(&mut mask_rng)).unwrap();
            readout(tp, y, s)
        }),
    ];
    // repeated ids exercise the scatter-add
    let len = r.random_range(1..7);
    let ids: Vec<usize> = (0..len).map(|_| r.random_range(0..m)).collect();
    let mut mask: Vec<bool> = (0..len).map(|_| r.random_bool(0.6)).collect();
    mask[0] = true;
    let table = random_tensor(&mut r, &[m, n]);
    let lookup_ids = ids.clone();
    cases.push(case("embedding_lookup", vec![table.clone()], move |tp, v| {
        let y = tp.embedding_lookup(v[0], &lookup_ids).unwrap();
        readout(tp, y, s)
    }));
    cases.push(case("mean_pool_masked", vec![table], move |tp, v| {
        let rows = tp.embedding_lookup(v[0], &ids).unwrap();
        let y = tp.mean_pool_masked(rows, &mask).unwrap();
        readout(tp, y, s)
    }));
    let targets: Vec<usize> = (0..m).map(|_| r.random_range(0..n)).collect();
    cases.push(case("softmax_cross_entropy_rows", vec![random_tensor(&mut r, &[m, n])], move |tp, v| {
        let y = tp.scale(v[0], 3.0);
        tp.softmax_cross_entropy_rows(y, &targets).unwrap()
    }));
    let labels: Vec<f64> = (0..m * n).map(|_| f64::from(u8::from(r.random_bool(0.5)))).collect();
    cases.push(case("bce_with_logits", vec![random_tensor(&mut r, &[m, n])], move |tp, v| {
        let y = tp.scale(v[0], 4.0);
        tp.bce_with_logits(y, &labels).unwrap()
    }));
    cases
}

/// Worst relative error of one training loss over a sample of every
/// parameter, dropout masks replayed per probe.
pub fn pipeline_fd_error(regime: Regime, objective: Objective, temperature: f64, seed: u64) -> f64 {
    let gen = SyntheticGenConfig {
        train_dialogues: 24,
        dev_dialogues: 4,
        test_dialogues: 4,
        seed,
        ..Default::default()
    };
    let data = generate(&gen).unwrap().train;
    let config = ModelConfig {
        vocab_size: gen.vocab_size,
        temperature,
        ..Default::default()
    };
    let bundle = build_model(regime, &config, seed).unwrap();
    let pool: Vec<usize> = match objective {
        Objective::Text => data.indices_of(Modality::Text),
        Objective::Image => data.indices_of(Modality::Image),
        _ => (0..data.len()).collect(),
    };
    let batch: Vec<usize> = pool.into_iter().take(4).collect();
    let ids: Vec<ParamId> = bundle.store.ids().collect();
    fd_check_params(&bundle.store, &ids, 4, seed, &|tape, store| {
        let mut b = bundle.clone();
        b.store = store.clone();
        let mut drop_rng = ChaCha8Rng::seed_from_u64(100 + seed);
        objective_loss(tape, &b, &data, objective, &batch, false, &mut drop_rng).unwrap()
    })
}

/// Gradient pipelines: the loss of each training objective.
pub const PIPELINES: [(Regime, Objective); 4] = [
    (Regime::Dr, Objective::Intent),
    (Regime::Dr, Objective::Text),
    (Regime::Dr, Objective::Image),
    (Regime::Mdr, Objective::Joint),
];
