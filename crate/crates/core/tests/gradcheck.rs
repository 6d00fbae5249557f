//! Central finite differences against reverse-mode gradients.
#![allow(clippy::needless_range_loop)]

use nts_core::autodiff::{Graph, Var};
use nts_core::seq2seq::{self, ModelConfig, ModelParams};
use nts_core::{Result, SentencePair};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-5;

/// `|a − n| / max(|a|, |n|)`, with components where both sides are below
/// `floor` compared by absolute difference instead.
fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        (analytic - numeric).abs() / floor
    } else {
        (analytic - numeric).abs() / scale
    }
}

type Build = dyn Fn(&mut Graph<'_>, &[Var]) -> Result<Var>;

fn evaluate(build: &Build, inputs: &[(Vec<usize>, Vec<f64>)]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, d)| g.input(s.clone(), d.clone(), true).unwrap())
        .collect();
    let out = build(&mut g, &vars).unwrap();
    g.scalar(out)
}

/// Returns the worst relative error over every input component.
fn check(build: &Build, inputs: &[(Vec<usize>, Vec<f64>)]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|(s, d)| g.input(s.clone(), d.clone(), true).unwrap())
        .collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[k].1.len()]);
        for i in 0..inputs[k].1.len() {
            let mut plus = inputs.to_vec();
            plus[k].1[i] += EPS;
            let mut minus = inputs.to_vec();
            minus[k].1[i] -= EPS;
            let numeric = (evaluate(build, &plus) - evaluate(build, &minus)) / (2.0 * EPS);
            worst = worst.max(rel_err(analytic[i], numeric, 1e-6));
        }
    }
    worst
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

/// Reduces a tensor to a scalar through fixed random weights so every
/// output component influences the loss differently.
fn project(g: &mut Graph<'_>, v: Var, seed: u64) -> Result<Var> {
    let n = g.value(v).len();
    let shape = g.shape(v).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = g.input(shape, rand_vec(&mut rng, n), false)?;
    let m = g.mul(v, w)?;
    Ok(g.sum(m))
}

fn run(name: &str, build: &Build, shapes: &[Vec<usize>]) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    let inputs: Vec<(Vec<usize>, Vec<f64>)> = shapes
        .iter()
        .map(|s| (s.clone(), rand_vec(&mut rng, s.iter().product())))
        .collect();
    let worst = check(build, &inputs);
    assert!(worst < 1e-6, "{name}: relative error {worst:e}");
}

#[test]
fn matmul() {
    run(
        "matmul",
        &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            project(g, y, 1)
        },
        &[vec![3, 4], vec![4, 2]],
    );
}

#[test]
fn matvec() {
    run(
        "matvec",
        &|g, v| {
            let y = g.matvec(v[0], v[1])?;
            project(g, y, 2)
        },
        &[vec![3, 5], vec![5]],
    );
}

#[test]
fn elementwise_binary() {
    run(
        "add",
        &|g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y, 3)
        },
        &[vec![2, 3], vec![2, 3]],
    );
    run(
        "sub",
        &|g, v| {
            let y = g.sub(v[0], v[1])?;
            project(g, y, 4)
        },
        &[vec![4], vec![4]],
    );
    run(
        "mul",
        &|g, v| {
            let y = g.mul(v[0], v[1])?;
            project(g, y, 5)
        },
        &[vec![4], vec![4]],
    );
    run(
        "mul_self",
        &|g, v| {
            let y = g.mul(v[0], v[0])?;
            project(g, y, 6)
        },
        &[vec![5]],
    );
}

#[test]
fn add_n_and_scale() {
    run(
        "add_n",
        &|g, v| {
            let y = g.add_n(&[v[0], v[1], v[0]])?;
            project(g, y, 7)
        },
        &[vec![3], vec![3]],
    );
    run(
        "scale",
        &|g, v| {
            let y = g.scale(v[0], -2.5);
            project(g, y, 8)
        },
        &[vec![3]],
    );
}

#[test]
fn activations() {
    run(
        "tanh",
        &|g, v| {
            let y = g.tanh(v[0]);
            project(g, y, 9)
        },
        &[vec![6]],
    );
    run(
        "sigmoid",
        &|g, v| {
            let y = g.sigmoid(v[0]);
            project(g, y, 10)
        },
        &[vec![6]],
    );
    run(
        "softmax",
        &|g, v| {
            let y = g.softmax(v[0])?;
            project(g, y, 11)
        },
        &[vec![5]],
    );
}

#[test]
fn structural() {
    run(
        "concat",
        &|g, v| {
            let y = g.concat(&[v[0], v[1]])?;
            project(g, y, 12)
        },
        &[vec![2], vec![3]],
    );
    run(
        "slice",
        &|g, v| {
            let y = g.slice(v[0], 1, 4)?;
            project(g, y, 13)
        },
        &[vec![5]],
    );
    run(
        "stack_rows",
        &|g, v| {
            let y = g.stack_rows(&[v[0], v[1], v[0]])?;
            project(g, y, 14)
        },
        &[vec![3], vec![3]],
    );
    run(
        "row",
        &|g, v| {
            let y = g.row(v[0], 1)?;
            project(g, y, 15)
        },
        &[vec![3, 4]],
    );
    run(
        "transpose",
        &|g, v| {
            let y = g.transpose(v[0])?;
            project(g, y, 16)
        },
        &[vec![2, 3]],
    );
    run(
        "tile_rows",
        &|g, v| {
            let y = g.tile_rows(v[0], 3)?;
            project(g, y, 17)
        },
        &[vec![4]],
    );
    run(
        "gather_rows",
        &|g, v| {
            let y = g.gather_rows(v[0], &[2, 0, 2])?;
            project(g, y, 18)
        },
        &[vec![4, 3]],
    );
}

#[test]
fn dropout_in_training_mode() {
    run(
        "dropout",
        &|g, v| {
            let y = g.dropout(v[0], 0.4, true, 77)?;
            project(g, y, 19)
        },
        &[vec![8]],
    );
}

#[test]
fn reductions_and_loss() {
    run("sum", &|g, v| Ok(g.sum(v[0])), &[vec![2, 2]]);
    run("dot", &|g, v| g.dot(v[0], v[1]), &[vec![4], vec![4]]);
    run(
        "cross_entropy",
        &|g, v| {
            let p = g.softmax(v[0])?;
            g.cross_entropy(p, 2)
        },
        &[vec![5]],
    );
}

#[test]
fn composite_expression() {
    run(
        "composite",
        &|g, v| {
            let h = g.matvec(v[0], v[1])?;
            let h = g.tanh(h);
            let z = g.sigmoid(h);
            let m = g.mul(z, h)?;
            let c = g.concat(&[m, v[1]])?;
            let p = g.softmax(c)?;
            g.cross_entropy(p, 1)
        },
        &[vec![3, 4], vec![4]],
    );
}

fn tiny_model_worst_error(cfg: &ModelConfig, pair: &SentencePair, seed: u64) -> (f64, usize) {
    let mut params = ModelParams::init(cfg, seed);
    // larger weights than the default init so every path carries signal
    for (_, t) in params.named_mut() {
        t.data_mut().iter_mut().for_each(|w| *w *= 4.0);
    }
    let (_, grads) = seq2seq::loss_and_grads(&params, cfg, pair, false, 0).unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
    for (k, name) in names.iter().enumerate() {
        let analytic = grads[k]
            .clone()
            .unwrap_or_else(|| vec![0.0; params.named()[k].1.numel()]);
        for i in 0..analytic.len() {
            let orig = params.named()[k].1.data()[i];
            let set = |v: f64, p: &mut ModelParams| p.named_mut()[k].1.data_mut()[i] = v;
            set(orig + EPS, &mut params);
            let up = seq2seq::loss_value(&params, cfg, pair, false, 0).unwrap();
            set(orig - EPS, &mut params);
            let down = seq2seq::loss_value(&params, cfg, pair, false, 0).unwrap();
            set(orig, &mut params);
            let numeric = (up - down) / (2.0 * EPS);
            let e = rel_err(analytic[i], numeric, 1e-6);
            assert!(
                e < 1e-4,
                "{name}[{i}]: analytic {} numeric {numeric} ({e:e})",
                analytic[i]
            );
            worst = worst.max(e);
            checked += 1;
        }
    }
    (worst, checked)
}

#[test]
fn full_model_gradients() {
    let cfg = ModelConfig {
        src_vocab_size: 12,
        tgt_vocab_size: 12,
        embed_dim: 6,
        hidden_dim: 8,
        attention_dim: 8,
        dropout_rate: 0.0,
    };
    let pair = SentencePair::original(vec![4, 7, 9, 11], vec![5, 6, 10, 4]).unwrap();
    let (worst, checked) = tiny_model_worst_error(&cfg, &pair, 42);
    assert!(checked > 1000);
    assert!(worst < 1e-4, "{worst:e}");
}
