mod common;

use common::*;
use rand::Rng;
use tssm_core::gradcheck::finite_diff_check;
use tssm_core::graph::Graph;
use tssm_core::model::WorldModel;
use tssm_core::tssm::{Tssm, TssmConfig};
use tssm_core::world_model::{Context, EpisodeBatch, LossBreakdown, LossConfig, NULL_ACTION};
use tssm_core::Tensor;

fn model(seed: u64) -> Tssm {
    Tssm::new(TssmConfig::miniature(), &mut rng(seed, "init")).unwrap()
}

fn one_hot_latents(b: usize, t: usize, g: usize, c: usize, seed: u64) -> Tensor {
    let mut r = rng(seed, "z");
    let mut data = vec![0.0; b * t * g * c];
    for row in data.chunks_mut(c) {
        row[r.random_range(0..c)] = 1.0;
    }
    Tensor::new([b, t, g * c], data)
}

fn random_actions(n: usize, t: usize, seed: u64) -> Vec<usize> {
    let mut r = rng(seed, "a");
    (0..n * t).map(|i| if i % t == 0 { NULL_ACTION } else { r.random_range(0..3) }).collect()
}

#[test]
fn encoder_is_deterministic_and_sized() {
    let m = model(0);
    let img = Tensor::from_fn([8, 8, 3], |i| (i % 7) as f64 / 7.0);
    let a = m.encode_obs(&img).unwrap();
    assert_eq!(a, m.encode_obs(&img).unwrap());
    assert_eq!(a.len(), 16);
    let zero = m.encode_obs(&Tensor::zeros([8, 8, 3])).unwrap();
    assert!(zero.iter().all(|v| v.is_finite()));
    assert!(m.encode_obs(&Tensor::zeros([16, 16, 3])).is_err());
}

#[test]
fn posterior_is_myopic() {
    let m = model(1);
    let batch = random_batch(8, 6, &[6], 3, 2);
    let frames = batch.frames(0, 0, 6);
    let all = m.posterior_logits_frames(&frames).unwrap();
    let per = 16;
    for t in 0..6 {
        let alone = m.posterior_logits(&frames.slice_rows(t, 1).reshape([8, 8, 3])).unwrap();
        let a: Vec<u64> = alone.logits().data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = all.data()[t * per..(t + 1) * per].iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b, "frame {t}");
    }
    let mut other = frames.clone();
    for v in &mut other.data_mut()[..5 * 192] {
        *v = 1.0 - *v;
    }
    let again = m.posterior_logits_frames(&other).unwrap();
    assert_eq!(&all.data()[5 * per..], &again.data()[5 * per..]);
}

#[test]
fn default_latent_is_32_by_32() {
    let cfg = TssmConfig::default();
    let mut small = cfg;
    // Smaller networks keep the test quick; the latent shape is what matters here.
    small.transformer.n_layers = 1;
    small.net.cnn_depth = 4;
    small.net.embed_dim = 16;
    let m = Tssm::new(small, &mut rng(0, "init")).unwrap();
    let l = m.posterior_logits(&Tensor::zeros([64, 64, 3])).unwrap();
    assert_eq!(l.logits().shape(), &[32, 32]);
}

#[test]
fn first_state_comes_from_start_token_only() {
    let m = model(2);
    let z1 = one_hot_latents(1, 1, 4, 4, 1);
    let z2 = one_hot_latents(1, 1, 4, 4, 2);
    let h1 = m.deterministic_states(&z1, &[NULL_ACTION], &[1.0]).unwrap();
    let h2 = m.deterministic_states(&z2, &[2], &[1.0]).unwrap();
    assert_eq!(h1, h2);
}

#[test]
fn states_ignore_later_latents() {
    let m = model(3);
    let t = 8;
    let z = one_hot_latents(1, t, 4, 4, 3);
    let a = random_actions(1, t, 4);
    let h = m.deterministic_states(&z, &a, &[1.0; 8]).unwrap();
    let hd = m.h_dim();
    for k in 0..t {
        let mut z2 = z.clone();
        let row = &mut z2.data_mut()[k * 16..(k + 1) * 16];
        row.iter_mut().for_each(|v| *v = 1.0 - *v);
        let mut a2 = a.clone();
        a2[k] = (a2[k].wrapping_add(1)) % 3;
        let h2 = m.deterministic_states(&z2, &a2, &[1.0; 8]).unwrap();
        // h_k depends on z_{<k} and a_{<=k}; perturbing z_k leaves h_{<=k} fixed.
        let z_only = m.deterministic_states(&z2, &a, &[1.0; 8]).unwrap();
        assert_eq!(&h.data()[..(k + 1) * hd], &z_only.data()[..(k + 1) * hd], "z perturbation at {k}");
        assert_eq!(&h.data()[..k * hd], &h2.data()[..k * hd], "action perturbation at {k}");
    }
}

#[test]
fn parallel_pass_matches_cached_steps() {
    for seed in 0..5 {
        let m = model(10 + seed);
        let z = one_hot_latents(2, 10, 4, 4, seed);
        let a = random_actions(2, 10, seed);
        let par = m.deterministic_states(&z, &a, &[1.0; 20]).unwrap();
        let seq = m.deterministic_states_sequential(&z, &a).unwrap();
        assert!(max_abs_diff(par.data(), seq.data()) < 1e-5);
    }
}

#[test]
fn absolute_positions_reject_long_sequences() {
    let m = model(0);
    let t = m.config.max_context() + 1;
    let z = one_hot_latents(1, t, 4, 4, 0);
    assert!(m.deterministic_states(&z, &random_actions(1, t, 0), &vec![1.0; t]).is_err());
}

#[test]
fn heads_are_pure_and_bounded() {
    let m = model(4);
    let mut r = rng(0, "h");
    for _ in 0..10 {
        let h: Vec<f64> = (0..m.h_dim()).map(|_| r.random_range(-3.0..3.0)).collect();
        let z = one_hot_latents(1, 1, 4, 4, r.random()).into_data();
        let (img, rew, cont) = m.predict_heads(&h, &z).unwrap();
        assert_eq!(img.shape(), &[8, 8, 3]);
        assert!(cont > 0.0 && cont < 1.0);
        assert_eq!(m.predict_heads(&h, &z).unwrap(), (img, rew, cont));
        let p1 = m.prior_logits(&h).unwrap();
        assert_eq!(p1.logits(), m.prior_logits(&h).unwrap().logits());
        assert_eq!(p1.logits().shape(), &[4, 4]);
    }
}

fn loss_of(m: &Tssm, batch: &EpisodeBatch, seed: u64) -> LossBreakdown {
    let mut g = Graph::new();
    let p = g.bind(m.params());
    let l = m.world_model_loss(&mut g, &p, batch, &mut rng(seed, "loss")).unwrap();
    LossBreakdown::read(&g, &l)
}

#[test]
fn zero_scales_leave_only_kl() {
    let mut cfg = TssmConfig::miniature();
    cfg.loss = LossConfig { eta_image: 0.0, eta_reward: 0.0, eta_discount: 0.0, ..LossConfig::default() };
    let m = Tssm::new(cfg, &mut rng(5, "init")).unwrap();
    let b = random_batch(8, 5, &[5, 3], 3, 5);
    let l = loss_of(&m, &b, 1);
    assert!((l.total - l.kl).abs() < 1e-12);
    assert!(l.image > 0.0);
}

#[test]
fn padding_does_not_contribute() {
    let m = model(6);
    let b = random_batch(8, 6, &[6, 3], 3, 6);
    let mut b2 = b.clone();
    let f = b.frame_len();
    for step in 3..6 {
        let off = (6 + step) * f;
        for v in &mut b2.images.data_mut()[off..off + f] {
            *v = 1.0 - *v;
        }
        b2.rewards[6 + step] = 17.0;
        b2.actions[6 + step] = 0;
    }
    let (l1, l2) = (loss_of(&m, &b, 2), loss_of(&m, &b2, 2));
    assert_eq!(l1, l2);
}

#[test]
fn empty_mask_is_rejected() {
    let m = model(0);
    let b = random_batch(8, 3, &[0], 3, 0);
    let mut g = Graph::new();
    let p = g.bind(m.params());
    assert!(m.world_model_loss(&mut g, &p, &b, &mut rng(0, "l")).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let m = model(7);
    let b = random_batch(8, 4, &[4, 3], 3, 7);
    // The balanced KL stops gradients on purpose, so its analytic gradient is not the
    // derivative of its value; check the reconstruction terms through the whole network.
    let r = finite_diff_check(m.params(), 1e-5, |g, p, _| {
        let l = m.world_model_loss(g, p, &b, &mut rng(3, "fd"))?;
        let s = g.add(l.image, l.reward);
        Ok(g.add(s, l.discount))
    })
    .unwrap();
    assert!(r.max_rel_error <= 1e-3, "{r:?}");
}

#[test]
fn observe_filter_is_causal_and_matches_online_filtering() {
    let m = model(8);
    let b = random_batch(8, 7, &[7], 3, 8);
    let states = m.observe_filter(&b, &mut rng(1, "obs")).unwrap().remove(0);
    assert_eq!(states.len(), 7);
    assert_eq!(states, m.observe_filter(&b, &mut rng(1, "obs")).unwrap().remove(0));

    let mut f = m.filter_begin();
    let mut r = rng(1, "obs");
    for (t, s) in states.iter().enumerate() {
        let img = b.frames(0, t, 1).reshape([8, 8, 3]);
        let online = m.filter_step(&mut f, &img, b.actions[t], &mut r).unwrap();
        assert_eq!(online.z, s.z);
        assert!(max_abs_diff(&online.h, &s.h) < 1e-5);
    }

    // Frames after t never influence the state at t.
    let mut b2 = b.clone();
    let f_len = b.frame_len();
    for v in &mut b2.images.data_mut()[4 * f_len..] {
        *v = 1.0 - *v;
    }
    let s2 = m.observe_filter(&b2, &mut rng(1, "obs")).unwrap().remove(0);
    for t in 0..4 {
        assert_eq!(s2[t].h, states[t].h);
        assert_eq!(s2[t].z, states[t].z);
    }
}

#[test]
fn imagination_basics() {
    let m = model(9);
    let b = random_batch(8, 5, &[5], 3, 9);
    let states = m.observe_filter(&b, &mut rng(1, "obs")).unwrap().remove(0);
    let ctx = Context::from_states(&states, &b.actions, 0);
    let run = |h: usize, seed: u64| {
        let mut g = Graph::new();
        let p = g.bind(m.params());
        let mut pol = ScriptedPolicy { actions: vec![1], n_actions: 3, next: 0 };
        let im = m.imagine_rollout(&mut g, &p, &ctx, &mut pol, h, None, &mut rng(seed, "im")).unwrap();
        im.features.iter().map(|&f| g.value(f).data().to_vec()).collect::<Vec<_>>()
    };
    assert_eq!(run(0, 0).len(), 1);
    assert_eq!(run(6, 3), run(6, 3));
}

#[test]
fn teacher_forced_imagination_reproduces_observed_states() {
    let m = model(10);
    let t = 9;
    let b = random_batch(8, t, &[t], 3, 10);
    let states = m.observe_filter(&b, &mut rng(2, "obs")).unwrap().remove(0);
    for start in [0, 3, 7] {
        let ctx = Context::from_states(&states, &b.actions, start);
        let horizon = t - 1 - start;
        let forced: Vec<Vec<f64>> = states[start + 1..].iter().map(|s| s.z.clone()).collect();
        let mut g = Graph::new();
        let p = g.bind(m.params());
        let mut pol = ScriptedPolicy { actions: b.actions[start + 1..].to_vec(), n_actions: 3, next: 0 };
        let im = m.imagine_rollout(&mut g, &p, &ctx, &mut pol, horizon, Some(&forced), &mut rng(0, "im")).unwrap();
        for k in 0..=horizon {
            let h = g.value(im.hs[k]).data();
            assert!(max_abs_diff(h, &states[start + k].h) < 1e-5, "start {start} step {k}");
        }
    }
}

#[test]
fn imagination_truncates_context_to_fit() {
    let m = model(11);
    let t = 20;
    let b = random_batch(8, t, &[t], 3, 11);
    let states = m.observe_filter(&b, &mut rng(2, "obs")).unwrap().remove(0);
    let ctx = Context::from_states(&states, &b.actions, t - 1);
    let mut g = Graph::new();
    let p = g.bind(m.params());
    let mut pol = ScriptedPolicy { actions: vec![0], n_actions: 3, next: 0 };
    // 20 context steps + 25 imagined exceed the 32-step window.
    let im = m.imagine_rollout(&mut g, &p, &ctx, &mut pol, 25, None, &mut rng(0, "im")).unwrap();
    assert_eq!(im.horizon(), 25);
    assert!(m.imagine_rollout(&mut g, &p, &ctx, &mut pol, 32, None, &mut rng(0, "im")).is_err());
}

#[test]
fn open_loop_reads_only_the_context() {
    let m = model(12);
    let t = 8;
    let b = random_batch(8, t, &[t], 3, 12);
    let c = 5;
    let ctx = b.frames(0, 0, c);
    let out = m.open_loop_generate(&ctx, &b.actions, &mut rng(0, "ol")).unwrap();
    assert_eq!(out.images.shape(), &[t - c, 8, 8, 3]);
    assert_eq!(out.rewards.len(), t - c);
    let single = m.open_loop_generate(&b.frames(0, 0, t - 1), &b.actions, &mut rng(0, "ol")).unwrap();
    assert_eq!(single.rewards.len(), 1);
    assert!(m.open_loop_generate(&b.frames(0, 0, t), &b.actions, &mut rng(0, "ol")).is_err());
}

#[test]
fn elbo_decreases_on_fixed_dataset() {
    let mut wm = WorldModel::Tssm(model(13));
    let data = block_world(8, 10, 16, 13);
    let losses = train(&mut wm, &data, 200, 1e-3, 0);
    let early = mean(&losses[..10]);
    let late = mean(&losses[190..]);
    assert!(late <= 0.7 * early, "early {early} late {late}");
}

#[test]
fn overfits_a_short_trajectory() {
    let mut wm = WorldModel::Tssm(model(14));
    let data = block_world(8, 10, 1, 14);
    train(&mut wm, &data, 1500, 2e-3, 1);
    let WorldModel::Tssm(m) = &wm else { unreachable!() };
    let states = m.observe_filter(&data, &mut rng(5, "obs")).unwrap().remove(0);
    let mut recon = 0.0;
    for (t, s) in states.iter().enumerate().take(5) {
        let (img, r, _) = m.predict_heads(&s.h, &s.z).unwrap();
        let truth = data.frames(0, t, 1);
        let mse = mse(img.data(), truth.data());
        recon += mse / 5.0;
        assert!(mse < 1e-3, "step {t}: mse {mse}");
        assert!((r - data.rewards[t]).abs() < 0.05, "step {t}: reward {r} vs {}", data.rewards[t]);
    }
    let c = 5;
    let gen = m.open_loop_generate(&data.frames(0, 0, c), &data.actions, &mut rng(6, "ol")).unwrap();
    let truth = data.frames(0, c, 10 - c);
    let gen_mse = mse(gen.images.data(), truth.data());
    assert!(gen_mse < 5.0 * recon.max(1e-4), "generation {gen_mse} vs reconstruction {recon}");
}

#[test]
fn prior_matches_posterior_on_constant_images() {
    let mut wm = WorldModel::Tssm(model(15));
    let mut data = block_world(8, 6, 4, 15);
    let first = data.frames(0, 0, 1);
    let f = data.frame_len();
    for i in 0..data.batch * data.steps {
        data.images.data_mut()[i * f..(i + 1) * f].copy_from_slice(first.data());
    }
    train(&mut wm, &data, 300, 2e-3, 2);
    let mut g = Graph::new();
    let WorldModel::Tssm(m) = &wm else { unreachable!() };
    let p = g.bind(m.params());
    let l = m.world_model_loss(&mut g, &p, &data, &mut rng(0, "l")).unwrap();
    let kl = g.value(l.kl).item();
    assert!(kl < 0.1, "kl {kl}");
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

#[test]
fn loss_matches_term_by_term_oracle() {
    let mut cfg = TssmConfig::miniature();
    cfg.loss = LossConfig { eta_image: 0.7, eta_reward: 1.3, eta_discount: 0.4, kl_balance: 0.8, kl_free_nats: 0.05 };
    let m = Tssm::new(cfg, &mut rng(16, "init")).unwrap();
    let (bsz, t) = (2, 5);
    let batch = random_batch(8, t, &[5, 3], 3, 16);
    let l = loss_of(&m, &batch, 4);

    // Posterior logits per row, sampled in the same row-major order as the loss.
    let mut post = Vec::new();
    for b in 0..bsz {
        post.extend_from_slice(m.posterior_logits_frames(&batch.frames(b, 0, t)).unwrap().data());
    }
    let (g, c) = (4, 4);
    let probs: Vec<f64> = post.chunks(c).flat_map(softmax).collect();
    let z = tssm_core::categorical::sample_one_hot(&Tensor::new([bsz * t, g, c], probs.clone()), &mut rng(4, "loss"));
    let z = z.reshape([bsz, t, g * c]);
    let h = m.deterministic_states(&z, &batch.actions, &batch.mask).unwrap();

    let (mut img, mut rew, mut disc, mut kl, mut kl_free) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let valid = batch.mask.iter().sum::<f64>();
    for i in 0..bsz * t {
        if batch.mask[i] == 0.0 {
            continue;
        }
        let hi = &h.data()[i * m.h_dim()..(i + 1) * m.h_dim()];
        let zi = &z.data()[i * 16..(i + 1) * 16];
        let (x_hat, r_hat, cont) = m.predict_heads(hi, zi).unwrap();
        let truth = &batch.images.data()[i * 192..(i + 1) * 192];
        img += 0.5 * x_hat.data().iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        rew += 0.5 * (r_hat - batch.rewards[i]).powi(2);
        let y = batch.continues[i];
        disc -= y * cont.ln() + (1.0 - y) * (1.0 - cont).ln();
        let prior = m.prior_logits(hi).unwrap();
        let pp: Vec<f64> = prior.logits().data().chunks(c).flat_map(softmax).collect();
        let q = &probs[i * 16..(i + 1) * 16];
        let k: f64 = q.iter().zip(&pp).map(|(a, b)| a * (a.ln() - b.ln())).sum();
        kl += k;
        kl_free += k.max(0.05);
    }
    let (img, rew, disc, kl, kl_free) = (img / valid, rew / valid, disc / valid, kl / valid, kl_free / valid);
    let total = 0.7 * img + 1.3 * rew + 0.4 * disc + kl_free;
    for (name, got, want) in [
        ("image", l.image, img),
        ("reward", l.reward, rew),
        ("discount", l.discount, disc),
        ("kl", l.kl, kl),
        ("total", l.total, total),
    ] {
        assert!((got - want).abs() <= 1e-6 * want.abs().max(1.0), "{name}: {got} vs {want}");
    }
}
