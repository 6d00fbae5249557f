//! A loop-only implementation of the model, compared against the graph
//! version on random parameters.

use nts_core::autodiff::{Graph, Tensor};
use nts_core::seq2seq::{self, GruVars, GruWeights, ModelConfig, ModelParams};
use nts_core::textpipe::{BOS, EOS};
use nts_core::SentencePair;
use proptest::prelude::*;

fn mv(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = m.shape()[1];
    assert_eq!(cols, x.len());
    m.data()
        .chunks(cols)
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gru(w: &GruWeights, x: &[f64], h: &[f64]) -> Vec<f64> {
    let (wz, uz) = (mv(&w.w_z, x), mv(&w.u_z, h));
    let (wr, ur) = (mv(&w.w_r, x), mv(&w.u_r, h));
    let n = h.len();
    let z: Vec<f64> = (0..n).map(|i| sigmoid(wz[i] + uz[i] + w.b_z.data()[i])).collect();
    let r: Vec<f64> = (0..n).map(|i| sigmoid(wr[i] + ur[i] + w.b_r.data()[i])).collect();
    let rh: Vec<f64> = (0..n).map(|i| r[i] * h[i]).collect();
    let (wh, uh) = (mv(&w.w_h, x), mv(&w.u_h, &rh));
    (0..n)
        .map(|i| {
            let cand = (wh[i] + uh[i] + w.b_h.data()[i]).tanh();
            (1.0 - z[i]) * h[i] + z[i] * cand
        })
        .collect()
}

fn embed(table: &Tensor, id: usize) -> Vec<f64> {
    let e = table.shape()[1];
    table.data()[id * e..(id + 1) * e].to_vec()
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn reference_loss(p: &ModelParams, src: &[usize], tgt: &[usize]) -> f64 {
    let hd = p.bridge.shape()[0];
    let xs: Vec<Vec<f64>> = src.iter().map(|&id| embed(&p.src_embed, id)).collect();
    let mut fwd = Vec::new();
    let mut h = vec![0.0; hd];
    for x in &xs {
        h = gru(&p.encoder_fwd, x, &h);
        fwd.push(h.clone());
    }
    let mut bwd = vec![Vec::new(); xs.len()];
    let mut h = vec![0.0; hd];
    for j in (0..xs.len()).rev() {
        h = gru(&p.encoder_bwd, &xs[j], &h);
        bwd[j] = h.clone();
    }
    let ann: Vec<Vec<f64>> = fwd.iter().zip(&bwd).map(|(f, b)| [f.clone(), b.clone()].concat()).collect();
    let mut s: Vec<f64> = mv(&p.bridge, &bwd[0]).iter().map(|v| v.tanh()).collect();

    let inputs: Vec<usize> = std::iter::once(BOS).chain(tgt.iter().copied()).collect();
    let targets: Vec<usize> = tgt.iter().copied().chain(std::iter::once(EOS)).collect();
    let mut total = 0.0;
    for (&y, &target) in inputs.iter().zip(&targets) {
        let ws = mv(&p.attn_w, &s);
        let scores: Vec<f64> = ann
            .iter()
            .map(|hj| {
                let uh = mv(&p.attn_u, hj);
                let hidden: Vec<f64> = ws.iter().zip(&uh).map(|(a, b)| (a + b).tanh()).collect();
                hidden.iter().zip(p.attn_v.data()).map(|(a, b)| a * b).sum()
            })
            .collect();
        let alpha = softmax(&scores);
        let mut ctx = vec![0.0; 2 * hd];
        for (a, hj) in alpha.iter().zip(&ann) {
            for (c, v) in ctx.iter_mut().zip(hj) {
                *c += a * v;
            }
        }
        let emb = embed(&p.tgt_embed, y);
        s = gru(&p.decoder, &[emb.clone(), ctx.clone()].concat(), &s);
        let features = [s.clone(), ctx, emb].concat();
        let logits: Vec<f64> = mv(&p.out_proj, &features)
            .iter()
            .zip(p.out_bias.data())
            .map(|(a, b)| a + b)
            .collect();
        total -= softmax(&logits)[target].ln();
    }
    total / targets.len() as f64
}

fn cfg() -> ModelConfig {
    ModelConfig {
        src_vocab_size: 11,
        tgt_vocab_size: 9,
        embed_dim: 4,
        hidden_dim: 5,
        attention_dim: 3,
        dropout_rate: 0.0,
    }
}

fn randomized(seed: u64) -> ModelParams {
    let mut p = ModelParams::init(&cfg(), seed);
    // the default init leaves biases at zero; give them values too
    let mut k = seed;
    for (_, t) in p.named_mut() {
        for w in t.data_mut() {
            k = nts_core::seeds::mix64(k);
            *w = *w * 6.0 + ((k >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.2;
        }
    }
    p
}

#[test]
fn gru_cell_matches_loops() {
    let p = randomized(3);
    let x: Vec<f64> = (0..14).map(|i| ((i * 7 % 11) as f64 - 5.0) / 6.0).collect();
    let h = vec![0.5, -0.1, 0.2, -0.9, 0.4];
    let mut g = Graph::new();
    let gv = GruVars::register(&mut g, &p.decoder);
    let xv = g.constant(x.clone());
    let hv = g.constant(h.clone());
    let out = seq2seq::gru_cell(&mut g, xv, hv, &gv).unwrap();
    let expected = gru(&p.decoder, &x, &h);
    for (a, b) in g.value(out).iter().zip(&expected) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn forward_loss_matches_loops(
        seed in 0u64..1000,
        src in prop::collection::vec(0usize..11, 1..7),
        tgt in prop::collection::vec(0usize..9, 1..6),
    ) {
        let p = randomized(seed);
        let pair = SentencePair::original(src.clone(), tgt.clone()).unwrap();
        let graph = seq2seq::loss_value(&p, &cfg(), &pair, false, 0).unwrap();
        let loops = reference_loss(&p, &src, &tgt);
        prop_assert!((graph - loops).abs() < 1e-10, "{} vs {}", graph, loops);
    }
}
