mod common;

use common::*;
use rand::Rng;
use tssm_core::gradcheck::finite_diff_check;
use tssm_core::model::WorldModel;
use tssm_core::rssm::{Rssm, RssmConfig};
use tssm_core::world_model::Context;
use tssm_core::{Graph, ParamSet};

fn model(seed: u64) -> Rssm {
    Rssm::new(RssmConfig::miniature(), &mut rng(seed, "init")).unwrap()
}

fn param<'a>(ps: &'a ParamSet, name: &str) -> &'a [f64] {
    ps.get(ps.lookup(name).unwrap()).data()
}

/// `x · W (+ b)` with `W` stored `[d_in, d_out]`.
fn affine(x: &[f64], w: &[f64], b: Option<&[f64]>, d_out: usize) -> Vec<f64> {
    (0..d_out)
        .map(|j| x.iter().enumerate().map(|(i, v)| v * w[i * d_out + j]).sum::<f64>() + b.map_or(0.0, |b| b[j]))
        .collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn gru_oracle(ps: &ParamSet, d: usize, h: &[f64], z: &[f64], action: usize, n_actions: usize) -> Vec<f64> {
    let mut x: Vec<f64> = z.to_vec();
    x.extend((0..n_actions).map(|i| if i == action { 1.0 } else { 0.0 }));
    let x: Vec<f64> = affine(&x, param(ps, "img_in.w"), Some(param(ps, "img_in.b")), d).into_iter().map(elu).collect();
    let gx = affine(&x, param(ps, "gru_x.w"), Some(param(ps, "gru_x.b")), 3 * d);
    let gh = affine(h, param(ps, "gru_h.w"), None, 3 * d);
    (0..d)
        .map(|i| {
            let r = sigmoid(gx[i] + gh[i]);
            let u = sigmoid(gx[d + i] + gh[d + i]);
            let c = (gx[2 * d + i] + r * gh[2 * d + i]).tanh();
            u * h[i] + (1.0 - u) * c
        })
        .collect()
}

fn one_hot(seed: u64) -> Vec<f64> {
    let mut r = rng(seed, "z");
    let mut z = vec![0.0; 16];
    for g in 0..4 {
        z[g * 4 + r.random_range(0..4)] = 1.0;
    }
    z
}

#[test]
fn three_steps_match_a_hand_written_gru() {
    let m = model(0);
    let mut h = vec![0.0; 16];
    let mut h_ref = h.clone();
    for (k, a) in [2usize, 0, 1].into_iter().enumerate() {
        let z = one_hot(k as u64);
        h = m.gru_step(&h, &z, a).unwrap();
        h_ref = gru_oracle(m.params(), 16, &h_ref, &z, a, 3);
        assert!(max_abs_diff(&h, &h_ref) < 1e-12, "step {k}");
    }
    assert!(h.iter().any(|v| v.abs() > 1e-3));
}

#[test]
fn state_carries_history() {
    let m = model(1);
    let run = |first: Vec<f64>| {
        let mut h = vec![0.0; 16];
        h = m.gru_step(&h, &first, 0).unwrap();
        for k in 0..4 {
            h = m.gru_step(&h, &one_hot(10 + k), 1).unwrap();
        }
        h
    };
    assert!(max_abs_diff(&run(one_hot(1)), &run(one_hot(2))) > 1e-6);
}

#[test]
fn posterior_sees_state_and_frame() {
    let m = model(2);
    let img = tssm_core::Tensor::from_fn([8, 8, 3], |i| (i % 5) as f64 / 5.0);
    let a = m.rssm_posterior(&vec![0.0; 16], &img).unwrap();
    let b = m.rssm_posterior(&vec![0.5; 16], &img).unwrap();
    assert!(max_abs_diff(a.logits().data(), b.logits().data()) > 1e-6);
    assert_eq!(a.logits().shape(), &[4, 4]);
}

#[test]
fn gradients_match_finite_differences() {
    let m = model(3);
    let b = random_batch(8, 4, &[4, 3], 3, 3);
    // Reconstruction terms only; the balanced KL stops gradients by design.
    let r = finite_diff_check(m.params(), 1e-5, |g, p, _| {
        let l = m.world_model_loss(g, p, &b, &mut rng(3, "fd"))?;
        let s = g.add(l.image, l.reward);
        Ok(g.add(s, l.discount))
    })
    .unwrap();
    assert!(r.max_rel_error <= 1e-3, "{r:?}");
}

#[test]
fn observe_matches_online_filter() {
    let m = model(4);
    let b = random_batch(8, 6, &[6], 3, 4);
    let states = m.observe_filter(&b, &mut rng(1, "obs")).unwrap().remove(0);
    let mut f = m.filter_begin();
    let mut r = rng(1, "obs");
    for (t, s) in states.iter().enumerate() {
        let img = b.frames(0, t, 1).reshape([8, 8, 3]);
        let online = m.filter_step(&mut f, &img, b.actions[t], &mut r).unwrap();
        assert_eq!(online.z, s.z);
        assert!(max_abs_diff(&online.h, &s.h) < 1e-5);
    }
}

#[test]
fn teacher_forced_imagination_reproduces_observed_states() {
    let m = model(5);
    let t = 7;
    let b = random_batch(8, t, &[t], 3, 5);
    let states = m.observe_filter(&b, &mut rng(2, "obs")).unwrap().remove(0);
    let start = 2;
    let ctx = Context::from_states(&states, &b.actions, start);
    let forced: Vec<Vec<f64>> = states[start + 1..].iter().map(|s| s.z.clone()).collect();
    let mut g = Graph::new();
    let p = g.bind(m.params());
    let mut pol = ScriptedPolicy { actions: b.actions[start + 1..].to_vec(), n_actions: 3, next: 0 };
    let im = m.imagine_rollout(&mut g, &p, &ctx, &mut pol, t - 1 - start, Some(&forced), &mut rng(0, "im")).unwrap();
    for k in 0..t - start {
        assert!(max_abs_diff(g.value(im.hs[k]).data(), &states[start + k].h) < 1e-9);
    }
}

#[test]
fn open_loop_lengths() {
    let m = model(6);
    let b = random_batch(8, 9, &[9], 3, 6);
    let out = m.open_loop_generate(&b.frames(0, 0, 4), &b.actions, &mut rng(0, "ol")).unwrap();
    assert_eq!(out.images.shape(), &[5, 8, 8, 3]);
    assert_eq!(out.continues.len(), 5);
}

#[test]
fn elbo_decreases_on_fixed_dataset() {
    let mut wm = WorldModel::Rssm(model(7));
    let data = block_world(8, 10, 16, 7);
    let losses = train(&mut wm, &data, 200, 1e-3, 0);
    let (early, late) = (mean(&losses[..10]), mean(&losses[190..]));
    assert!(late <= 0.7 * early, "early {early} late {late}");
}
