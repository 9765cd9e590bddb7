//! Attention variants against plain nested-loop reimplementations.

mod oracles;

use oracles::attention::{cg_error, fixture, mat, max_diff, mm, msa_errors, rg_error};
use plada_core::attention::{prompt_msa, PromptChoice};
use plada_core::tensor::{Tape, Tensor};

#[test]
fn plain_and_prompt_attention_match_oracle() {
    for (dim, heads) in [(4, 1), (8, 2)] {
        let (plain, prompted) = msa_errors(dim, heads, 10 + heads as u64);
        assert!(plain < 1e-10 && prompted < 1e-10, "D={dim} H={heads}: {plain:e} {prompted:e}");
    }
}

#[test]
fn residual_guidance_matches_two_attention_sum() {
    for (dim, heads, tokens) in [(4, 1, 3), (8, 2, 7)] {
        let err = rg_error(dim, heads, tokens, 20 + heads as u64);
        assert!(err < 1e-10, "D={dim} H={heads}: {err:e}");
    }
}

#[test]
fn coordination_guidance_matches_stepwise_oracle() {
    for (dim, heads, tokens, lp) in [(4, 1, 5, 2), (8, 2, 9, 4), (8, 4, 7, 3)] {
        let err = cg_error(dim, heads, tokens, lp, 30 + heads as u64);
        assert!(err < 1e-10, "D={dim} H={heads}: {err:e}");
    }
}

#[test]
fn zero_prompts_only_add_softmax_mass() {
    let mut f = fixture(4, 1, 5, 3, 40);
    for id in f.pool.keys.clone().iter().chain(&f.pool.values.clone()) {
        *f.store.get_mut(*id) = Tensor::zeros(&[3, 4]);
    }
    let mut tape = Tape::new();
    let b = f.store.bind(&mut tape, false);
    let x = tape.constant(f.x.clone());
    let prompt = f.pool.materialize(&mut tape, &b, &PromptChoice::Entry(0)).unwrap();
    let out = prompt_msa(&mut tape, x, &prompt, &f.attn.vars(&b)).unwrap();
    // zero keys score 0 and zero values contribute nothing: only the normaliser grows
    let xm = mat(&f.x);
    let (q, k, v) = f.qkv(&xm);
    let mut expect = vec![vec![0.0; 4]; 5];
    for i in 0..5 {
        let s: Vec<f64> = k.iter().map(|kj| (0..4).map(|c| q[i][c] * kj[c]).sum::<f64>() / 2.0).collect();
        let z: f64 = s.iter().map(|x| x.exp()).sum::<f64>() + 3.0;
        for c in 0..4 {
            expect[i][c] = (0..5).map(|j| s[j].exp() / z * v[j][c]).sum();
        }
    }
    let expect = mm(&expect, &f.p(f.attn.wo));
    assert!(max_diff(&expect, tape.value(out)) < 1e-12);
}
