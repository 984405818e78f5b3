//! A plain nested-Vec re-implementation of one encoder layer, compared with
//! the tape-based backbone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rgpt_core::backbone::{Backbone, BackboneConfig, LayerWeights};
use rgpt_core::numerics::{Tape, Tensor};
use rgpt_core::prompter::PromptSet;

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows())
        .map(|r| (0..t.cols()).map(|c| t.get(r, c)).collect())
        .collect()
}

fn row(t: &Tensor) -> Vec<f64> {
    t.data().to_vec()
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|r| {
            (0..b[0].len())
                .map(|j| r.iter().zip(b).map(|(x, br)| x * br[j]).sum())
                .collect()
        })
        .collect()
}

fn affine(x: &Mat, w: &Tensor, b: &Tensor) -> Mat {
    let bias = row(b);
    mm(x, &mat(w))
        .into_iter()
        .map(|r| r.iter().zip(&bias).map(|(v, c)| v + c).collect())
        .collect()
}

fn ln(x: &Mat, g: &Tensor, b: &Tensor, eps: f64) -> Mat {
    let (g, b) = (row(g), row(b));
    x.iter()
        .map(|r| {
            let mu = r.iter().sum::<f64>() / r.len() as f64;
            let var = r.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / r.len() as f64;
            r.iter()
                .enumerate()
                .map(|(i, v)| (v - mu) / (var + eps).sqrt() * g[i] + b[i])
                .collect()
        })
        .collect()
}

fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

fn layer(h: &Mat, w: &LayerWeights, heads: usize, eps: f64) -> Mat {
    let d = h[0].len();
    let dh = d / heads;
    let x = ln(h, &w.ln1_gamma, &w.ln1_beta, eps);
    let (q, k, v) = (
        affine(&x, &w.wq, &w.bq),
        affine(&x, &w.wk, &w.bk),
        affine(&x, &w.wv, &w.bv),
    );
    let mut o = vec![vec![0.0; d]; h.len()];
    for hd in 0..heads {
        let cols = hd * dh..(hd + 1) * dh;
        for i in 0..h.len() {
            let scores: Vec<f64> = (0..h.len())
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                o[i][c] = (0..h.len()).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    let h = add(h, &affine(&o, &w.wo, &w.bo));
    let x = ln(&h, &w.ln2_gamma, &w.ln2_beta, eps);
    let f: Mat = affine(&x, &w.w1, &w.b1)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    add(&h, &affine(&f, &w.w2, &w.b2))
}

fn reference(bb: &Backbone, input: &Mat, prefix: Option<&Mat>) -> Mat {
    let mut h = add(input, &mat(&bb.input_bias()));
    for (i, w) in bb.layers.iter().enumerate() {
        if i + 1 == bb.config.insert_layer {
            if let Some(p) = prefix {
                h = p.iter().cloned().chain(h).collect();
            }
        }
        h = layer(&h, w, bb.config.heads, bb.ln_eps);
    }
    ln(&h, &bb.final_gamma, &bb.final_beta, bb.ln_eps)
}

fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn max_diff(a: &Tensor, b: &Mat) -> f64 {
    mat(a)
        .iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn check(layers: usize, heads: usize, insert_layer: usize, with_prompts: bool) {
    let cfg = BackboneConfig {
        layers,
        d: 4,
        heads,
        n: 3,
        m: 2,
        insert_layer,
        ffn_mult: 2,
        seed: 21,
    };
    let bb = Backbone::new(cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(layers as u64 * 10 + heads as u64);
    let (text, image) = (random(&mut rng, 3, 4), random(&mut rng, 2, 4));
    let (pt, pv, pl) = (random(&mut rng, 2, 4), random(&mut rng, 2, 4), random(&mut rng, 1, 4));

    let mut tape = Tape::new();
    let t = tape.constant(text.clone());
    let i = tape.constant(image.clone());
    let h1 = bb.assemble_input(&mut tape, t, i).unwrap();
    let prompts = PromptSet {
        text: tape.constant(pt.clone()),
        vision: tape.constant(pv.clone()),
        label: tape.constant(pl.clone()),
    };
    let hn = bb
        .forward_with_prompts(&mut tape, h1, with_prompts.then_some(&prompts))
        .unwrap();

    let input: Mat = mat(&text).into_iter().chain(mat(&image)).collect();
    let prefix: Mat = [mat(&pt), mat(&pv), mat(&pl)].concat();
    let want = reference(&bb, &input, with_prompts.then_some(&prefix));
    assert_eq!(tape.value(hn).rows(), want.len());
    let err = max_diff(tape.value(hn), &want);
    assert!(
        err < 1e-12,
        "layers={layers} heads={heads} b={insert_layer} err={err:e}"
    );
}

#[test]
fn single_layer_single_head_matches_reference() {
    check(1, 1, 1, false);
    check(1, 1, 1, true);
}

#[test]
fn multi_head_and_deeper_insertion_match_reference() {
    check(1, 2, 1, true);
    check(3, 2, 2, true);
    check(3, 4, 3, true);
    check(2, 2, 2, false);
}
