//! Acceptance checks, one printed line per criterion.
//!
//! `ACCEPTANCE_ONLY=3,8` restricts the run to the listed criteria.
//! `ACCEPTANCE_FULL=1` adds the long reduced-environment agent run to criterion 9.

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use hidden_order::{random_episode, replay_record, step_towards, Event, GridConfig, HiddenOrderEnv, RandomPolicy};
use lab::config::RunConfig;
use lab::eval::{
    evaluate_agent, evaluate_context, evaluate_policy, reconstruction_mse, reward_correct, scripted_eval_episodes,
    EvalEpisode, ModelPredictor, Prediction, Predictor,
};
use lab::trainer::{Collector, Trainer, METRICS_FILE};
use rand::Rng;
use tssm_core::agent::{lambda_returns, Agent, AgentBound, AgentConfig, ImaginationPolicy, ImaginedTrajectory};
use tssm_core::categorical::{kl_balanced, kl_categorical, CategoricalLatent};
use tssm_core::gradcheck::finite_diff_check;
use tssm_core::graph::{Graph, Var};
use tssm_core::model::WorldModel;
use tssm_core::optim::{AdamW, AdamWConfig};
use tssm_core::replay::{batch_of, Episode, ReplayConfig, TrajectoryStore};
use tssm_core::rng::{RngStreams, StreamRng};
use tssm_core::rssm::{Rssm, RssmConfig};
use tssm_core::tssm::{Tssm, TssmConfig};
use tssm_core::world_model::{
    action_one_hot, Context, EpisodeBatch, Imagined, LatentPolicy, LossBreakdown, LossConfig, NULL_ACTION,
};
use tssm_core::Tensor;

type Check = anyhow::Result<(bool, String)>;

fn rng(seed: u64, name: &str) -> StreamRng {
    RngStreams::new(seed).stream(name)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Uniform-noise frames, random actions, sparse rewards; one full-length row per entry of `lens`.
fn random_batch(size: usize, t: usize, lens: &[usize], seed: u64) -> EpisodeBatch {
    let mut r = rng(seed, "batch");
    let images = Tensor::from_fn([lens.len(), t, size, size, 3], |_| r.random());
    let (mut actions, mut rewards, mut continues, mut mask) = (vec![], vec![], vec![], vec![]);
    for &len in lens {
        for step in 0..t {
            actions.push(if step == 0 { NULL_ACTION } else { r.random_range(0..3) });
            rewards.push(if r.random::<f64>() < 0.3 { 3.0 } else { 0.0 });
            continues.push(if step + 1 == len { 0.0 } else { 1.0 });
            mask.push(if step < len { 1.0 } else { 0.0 });
        }
    }
    EpisodeBatch::new(images, actions, rewards, continues, mask).unwrap()
}

fn one_hot_latents(t: usize, gc: usize, classes: usize, r: &mut StreamRng) -> Tensor {
    let mut data = vec![0.0; t * gc];
    for row in data.chunks_mut(classes) {
        row[r.random_range(0..classes)] = 1.0;
    }
    Tensor::new([1, t, gc], data)
}

/// Plays a fixed action list during imagination.
struct Scripted {
    actions: Vec<usize>,
    next: usize,
}

impl LatentPolicy for Scripted {
    fn act(&mut self, g: &mut Graph, _: Var, _: &mut StreamRng) -> tssm_core::Result<Var> {
        let a = self.actions[self.next % self.actions.len()];
        self.next += 1;
        Ok(g.constant(action_one_hot(&[a], 3)))
    }
}

fn mini_tssm(seed: u64) -> Tssm {
    Tssm::new(TssmConfig::miniature(), &mut rng(seed, "init")).unwrap()
}

fn mini_rssm(seed: u64) -> Rssm {
    Rssm::new(RssmConfig::miniature(), &mut rng(seed, "init")).unwrap()
}

fn smoke_config() -> RunConfig {
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.cfg")).unwrap()
}

// ---- 1 ----

fn gradients() -> Check {
    const TOL: f64 = 1e-3;
    let batch = random_batch(8, 4, &[4, 3], 1);
    // The balanced KL hands each side a `kl_balance` share of the true KL gradient.
    // Subtracting the detached complementary share gives a scalar whose value
    // derivative equals the loss's tape gradient, so the full loss is checked.
    let wm_check = |wm: &WorldModel| {
        finite_diff_check(wm.params(), 1e-5, |g, p, _| {
            let l = wm.world_model_loss(g, p, &batch, &mut rng(3, "fd"))?;
            let share = g.scale(l.kl, 0.5);
            let share = g.detach(share);
            Ok(g.sub(l.total, share))
        })
    };
    let half = LossConfig { kl_balance: 0.5, ..LossConfig::default() };
    let tssm = WorldModel::Tssm(Tssm::new(TssmConfig { loss: half, ..TssmConfig::miniature() }, &mut rng(1, "i"))?);
    let rssm = WorldModel::Rssm(Rssm::new(RssmConfig { loss: half, ..RssmConfig::miniature() }, &mut rng(2, "i"))?);
    let mut errs = vec![("tssm", wm_check(&tssm)?.max_rel_error), ("rssm", wm_check(&rssm)?.max_rel_error)];

    let mut wm = WorldModel::Tssm(mini_tssm(4));
    // A constant discount head keeps the stop-gradient weights fixed under perturbation.
    let ps = wm.params_mut();
    let w = ps.get(ps.lookup("discount.out.w").unwrap()).clone();
    ps.assign("discount.out.w", Tensor::zeros(w.shape().to_vec()))?;
    ps.set_frozen(true);
    let ctx_batch = random_batch(8, 3, &[3], 5);
    let states = wm.observe_filter(&ctx_batch, &mut rng(5, "obs"))?.remove(0);
    let ctx = Context::from_states(&states, &ctx_batch.actions, 2);
    for rho in [0.0, 1.0] {
        let cfg = AgentConfig { rho, eta_ent: 0.1, horizon: 3, hidden: 16, n_hidden: 1, ..Default::default() };
        let agent = Agent::new(cfg, wm.feature_dim(), 3, &mut rng(6, "agent"))?;
        let r = finite_diff_check(&agent.actor_params, 1e-5, |g, p, _| {
            let ab = AgentBound {
                actor: p.clone(),
                critic: g.bind(&agent.critic_params),
                slow: g.bind(&agent.slow_critic_params),
            };
            let wb = g.bind(wm.params());
            let traj = agent.imagine(g, &wm, &wb, &ab, &ctx, 3, &mut rng(7, "im"))?;
            let targets = agent.targets(g, &ab, &traj)?;
            agent.actor_loss(g, &traj, &targets)
        })?;
        errs.push((if rho == 0.0 { "actor rho=0" } else { "actor rho=1" }, r.max_rel_error));
    }
    let cfg = AgentConfig { horizon: 3, hidden: 16, n_hidden: 1, ..Default::default() };
    let agent = Agent::new(cfg, wm.feature_dim(), 3, &mut rng(8, "agent"))?;
    let r = finite_diff_check(&agent.critic_params, 1e-5, |g, p, _| {
        let ab = AgentBound {
            actor: g.bind(&agent.actor_params),
            critic: p.clone(),
            slow: g.bind(&agent.slow_critic_params),
        };
        let wb = g.bind(wm.params());
        let traj = agent.imagine(g, &wm, &wb, &ab, &ctx, 3, &mut rng(9, "im"))?;
        let targets = agent.targets(g, &ab, &traj)?;
        agent.critic_loss(g, &ab, &traj, &targets)
    })?;
    errs.push(("critic", r.max_rel_error));
    let pass = errs.iter().all(|(_, e)| *e <= TOL);
    let detail = errs.iter().map(|(n, e)| format!("{n} {e:.2e}")).collect::<Vec<_>>().join(", ");
    Ok((pass, format!("max relative error {detail} (limit {TOL:e})")))
}

// ---- 2 ----

fn causality() -> Check {
    const TOL: f64 = 1e-6;
    let m = mini_tssm(20);
    let (gc, classes, hd) = (m.config.latent.flat(), m.config.latent.classes, m.h_dim());
    let mut r = rng(21, "trials");
    let mut violations = [0usize; 3];
    for trial in 0..100 {
        // (a) h_k depends on z before k and actions up to k only.
        let t = r.random_range(2..=20);
        let k = r.random_range(0..t);
        let z = one_hot_latents(t, gc, classes, &mut r);
        let a: Vec<usize> = (0..t).map(|i| if i == 0 { NULL_ACTION } else { r.random_range(0..3) }).collect();
        let mut z2 = z.clone();
        for v in &mut z2.data_mut()[k * gc..] {
            *v = 0.0;
        }
        for row in z2.data_mut()[k * gc..].chunks_mut(classes) {
            row[r.random_range(0..classes)] = 1.0;
        }
        let mut a2 = a.clone();
        for x in a2.iter_mut().skip(k + 1) {
            *x = r.random_range(0..3);
        }
        let ones = vec![1.0; t];
        let h = m.deterministic_states(&z, &a, &ones)?;
        let h2 = m.deterministic_states(&z2, &a2, &ones)?;
        if max_abs_diff(&h.data()[..(k + 1) * hd], &h2.data()[..(k + 1) * hd]) > TOL {
            violations[0] += 1;
        }

        // (b) the posterior of frame k reads frame k only.
        let frames = Tensor::from_fn([t, 8, 8, 3], |_| r.random());
        let mut other = Tensor::from_fn([t, 8, 8, 3], |_| r.random());
        let f = 8 * 8 * 3;
        other.data_mut()[k * f..(k + 1) * f].copy_from_slice(&frames.data()[k * f..(k + 1) * f]);
        let l1 = m.posterior_logits_frames(&frames)?;
        let l2 = m.posterior_logits_frames(&other)?;
        if max_abs_diff(&l1.data()[k * gc..(k + 1) * gc], &l2.data()[k * gc..(k + 1) * gc]) > TOL {
            violations[1] += 1;
        }

        // (c) generation reads frames up to the context only.
        let wm = WorldModel::Tssm(m.clone());
        let ep = random_episode_tensor(t.max(3), &mut r);
        let c = r.random_range(1..ep.num_frames());
        let mut ep2 = ep.clone();
        let fl = ep.frame_len();
        for v in &mut ep2.frames[c * fl..] {
            *v = r.random();
        }
        let p1 = ModelPredictor { model: &wm, rng: rng(trial, "gen") }.predict(&ep, c)?;
        let p2 = ModelPredictor { model: &wm, rng: rng(trial, "gen") }.predict(&ep2, c)?;
        if max_abs_diff(p1.images.data(), p2.images.data()) > TOL || max_abs_diff(&p1.rewards, &p2.rewards) > TOL {
            violations[2] += 1;
        }
    }
    let pass = violations.iter().all(|&v| v == 0);
    Ok((
        pass,
        format!(
            "violations over 100 trials each: state causality {}, posterior myopia {}, generation {} (tol {TOL:e})",
            violations[0], violations[1], violations[2]
        ),
    ))
}

fn random_episode_tensor(t: usize, r: &mut StreamRng) -> Episode {
    let frame = |r: &mut StreamRng| (0..8 * 8 * 3).map(|_| r.random::<u8>() as f64 / 255.0).collect::<Vec<_>>();
    let mut ep = Episode::begin(8, &frame(r)).unwrap();
    for i in 1..t {
        let f = frame(r);
        ep.push_frame(&f, r.random_range(0..3), if r.random::<f64>() < 0.3 { 3.0 } else { 0.0 }, i + 1 < t).unwrap();
    }
    ep
}

// ---- 3 ----

fn equivalence() -> Check {
    const TOL: f64 = 1e-5;
    let mut r = rng(30, "seq");
    let mut worst_par: f64 = 0.0;
    for seed in 0..50 {
        let m = mini_tssm(100 + seed);
        let (gc, classes) = (m.config.latent.flat(), m.config.latent.classes);
        let z = one_hot_latents(20, gc, classes, &mut r);
        let a: Vec<usize> = (0..20).map(|i| if i == 0 { NULL_ACTION } else { r.random_range(0..3) }).collect();
        let par = m.deterministic_states(&z, &a, &[1.0; 20])?;
        let seq = m.deterministic_states_sequential(&z, &a)?;
        worst_par = worst_par.max(max_abs_diff(par.data(), seq.data()));
    }
    let mut worst_tf: f64 = 0.0;
    for seed in 0..50u64 {
        let wm = if seed % 2 == 0 {
            WorldModel::Tssm(mini_tssm(200 + seed))
        } else {
            WorldModel::Rssm(mini_rssm(200 + seed))
        };
        let t = 20;
        let b = random_batch(8, t, &[t], 300 + seed);
        let states = wm.observe_filter(&b, &mut rng(seed, "obs"))?.remove(0);
        let start = r.random_range(0..t - 1);
        let ctx = Context::from_states(&states, &b.actions, start);
        let horizon = t - 1 - start;
        let forced: Vec<Vec<f64>> = states[start + 1..].iter().map(|s| s.z.clone()).collect();
        let mut g = Graph::new();
        let p = g.bind(wm.params());
        let mut pol = Scripted { actions: b.actions[start + 1..].to_vec(), next: 0 };
        let im = wm.imagine_rollout(&mut g, &p, &ctx, &mut pol, horizon, Some(&forced), &mut rng(0, "im"))?;
        for k in 0..=horizon {
            worst_tf = worst_tf.max(max_abs_diff(g.value(im.hs[k]).data(), &states[start + k].h));
            worst_tf = worst_tf.max(max_abs_diff(g.value(im.zs[k]).data(), &states[start + k].z));
        }
    }
    Ok((
        worst_par <= TOL && worst_tf <= TOL,
        format!("max |parallel - cached| {worst_par:.2e} over 50 sequences, teacher-forced imagination vs filter {worst_tf:.2e} over 50 (tol {TOL:e})"),
    ))
}

// ---- 4 ----

/// The negative ELBO summed from the model's value-level pieces.
fn elbo_oracle(wm: &WorldModel, batch: &EpisodeBatch, seed: u64) -> anyhow::Result<f64> {
    let states = wm.observe_filter(batch, &mut rng(seed, "loss"))?.remove(0);
    let cfg = wm.loss_config();
    let (mut img, mut rew, mut disc, mut kl) = (0.0, 0.0, 0.0, 0.0);
    for (t, s) in states.iter().enumerate() {
        let frame = batch.frames(0, t, 1).reshape([batch.image_size, batch.image_size, 3]);
        let (x_hat, r_hat, c_hat) = wm.predict_heads(&s.h, &s.z)?;
        img += 0.5 * x_hat.data().iter().zip(frame.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        rew += 0.5 * (r_hat - batch.rewards[t]).powi(2);
        let y = batch.continues[t];
        disc -= y * c_hat.ln() + (1.0 - y) * (1.0 - c_hat).ln();
        let (post, prior) = match wm {
            WorldModel::Tssm(m) => (m.posterior_logits(&frame)?, m.prior_logits(&s.h)?),
            WorldModel::Rssm(m) => (m.rssm_posterior(&s.h, &frame)?, m.prior_logits(&s.h)?),
        };
        kl += kl_categorical(&post, &prior)?;
    }
    let n = states.len() as f64;
    Ok((cfg.eta_image * img + cfg.eta_reward * rew + cfg.eta_discount * disc + kl) / n)
}

fn elbo() -> Check {
    let mut r = rng(40, "elbo");
    let mut worst: f64 = 0.0;
    for i in 0..20u64 {
        let loss = LossConfig {
            eta_image: r.random_range(0.1..2.0),
            eta_reward: r.random_range(0.1..2.0),
            eta_discount: r.random_range(0.1..2.0),
            kl_balance: r.random_range(0.0..1.0),
            kl_free_nats: 0.0,
        };
        let wm = if i % 2 == 0 {
            WorldModel::Tssm(Tssm::new(TssmConfig { loss, ..TssmConfig::miniature() }, &mut rng(i, "i"))?)
        } else {
            WorldModel::Rssm(Rssm::new(RssmConfig { loss, ..RssmConfig::miniature() }, &mut rng(i, "i"))?)
        };
        let batch = random_batch(8, 2, &[2], 400 + i);
        let mut g = Graph::new();
        let p = g.bind(wm.params());
        let l = wm.world_model_loss(&mut g, &p, &batch, &mut rng(i, "loss"))?;
        let got = LossBreakdown::read(&g, &l).total;
        worst = worst.max((got - elbo_oracle(&wm, &batch, i)?).abs());
    }
    let mut worst_kl: f64 = 0.0;
    for _ in 0..1000 {
        let (gs, cs) = (r.random_range(1..5), r.random_range(2..6));
        let q = Tensor::from_fn([gs, cs], |_| r.random_range(-4.0..4.0));
        let p = Tensor::from_fn([gs, cs], |_| r.random_range(-4.0..4.0));
        let beta = r.random_range(0.0..=1.0);
        let mut g = Graph::new();
        let (qv, pv) = (g.input(q.clone()), g.input(p.clone()));
        let k = kl_balanced(&mut g, qv, pv, beta)?;
        let got = g.value(k).sum();
        let want = kl_categorical(&CategoricalLatent::from_logits(q)?, &CategoricalLatent::from_logits(p)?)?;
        worst_kl = worst_kl.max((got - want).abs());
    }
    Ok((
        worst <= 1e-6 && worst_kl <= 1e-8,
        format!("max |loss - oracle| {worst:.2e} over 20 instances (tol 1e-6); balanced vs plain KL {worst_kl:.2e} over 1000 (tol 1e-8)"),
    ))
}

// ---- 5 ----

/// Every weighted mixture of n-step returns, summed term by term.
fn lambda_oracle(r: &[f64], v: &[f64], c: &[f64], gamma: f64, lambda: f64) -> Vec<f64> {
    let h = r.len();
    (0..h)
        .map(|t| {
            let n_step = |n: usize| {
                let (mut acc, mut disc) = (0.0, 1.0);
                for k in t..t + n {
                    acc += disc * r[k];
                    disc *= gamma * c[k];
                }
                acc + disc * v[t + n]
            };
            let m = h - t;
            let mixed: f64 = (1..m).map(|n| (1.0 - lambda) * lambda.powi(n as i32 - 1) * n_step(n)).sum();
            mixed + lambda.powi(m as i32 - 1) * n_step(m)
        })
        .collect()
}

fn lambda() -> Check {
    let mut rg = rng(50, "lambda");
    let (mut worst, mut worst_one): (f64, f64) = (0.0, 0.0);
    let mut zero_exact = true;
    for _ in 0..100 {
        let h = rg.random_range(1..=6);
        let r: Vec<f64> = (0..h).map(|_| rg.random_range(-3.0..3.0)).collect();
        let v: Vec<f64> = (0..=h).map(|_| rg.random_range(-3.0..3.0)).collect();
        let c: Vec<f64> = (0..h).map(|_| rg.random_range(0.0..=1.0)).collect();
        let (gamma, lam) = (rg.random_range(0.5..1.0), rg.random_range(0.0..1.0));
        worst =
            worst.max(max_abs_diff(&lambda_returns(&r, &v, &c, gamma, lam)?, &lambda_oracle(&r, &v, &c, gamma, lam)));
        let one_step = lambda_returns(&r, &v, &c, gamma, 0.0)?;
        zero_exact &= (0..h).all(|t| one_step[t] == r[t] + gamma * c[t] * v[t + 1]);
        let mc = lambda_returns(&r, &v, &c, gamma, 1.0)?;
        for t in 0..h {
            let (mut acc, mut disc) = (0.0, 1.0);
            for k in t..h {
                acc += disc * r[k];
                disc *= gamma * c[k];
            }
            worst_one = worst_one.max((mc[t] - (acc + disc * v[h])).abs());
        }
    }
    Ok((
        worst <= 1e-12 && zero_exact && worst_one <= 1e-12,
        format!("max |recursion - n-step mixture| {worst:.2e} over 100 (tol 1e-12); lambda=0 exact: {zero_exact}; lambda=1 vs discounted sum {worst_one:.2e}"),
    ))
}

// ---- 6 ----

fn walk_into(e: &mut HiddenOrderEnv, ball: usize) -> anyhow::Result<(f64, Event)> {
    let target = e.state()?.ball_home[ball];
    for _ in 0..400 {
        let a =
            step_towards(e.config(), e.state()?, target, true).ok_or_else(|| anyhow::anyhow!("ball unreachable"))?;
        let out = e.step(a)?;
        if out.event != Event::None && out.event != Event::Blocked {
            return Ok((out.reward, out.event));
        }
    }
    anyhow::bail!("ball {ball} not reached")
}

fn environment() -> Check {
    let long = GridConfig { max_steps: 1000, ..GridConfig::default() };
    let fresh = |seed: u64| -> anyhow::Result<HiddenOrderEnv> {
        let mut e = HiddenOrderEnv::new(long.clone())?;
        e.reset(seed)?;
        Ok(e)
    };
    let mut e = fresh(7)?;
    let order = e.state()?.hidden_order.clone();
    let mut first_round = 0.0;
    for &b in &order {
        first_round += walk_into(&mut e, b)?.0;
    }
    let twelve = first_round == 12.0;

    let mut e = fresh(8)?;
    let order = e.state()?.hidden_order.clone();
    let first = walk_into(&mut e, order[0])?.0;
    let wrong = walk_into(&mut e, order[2])?.0;
    let again = walk_into(&mut e, order[0])?.0;
    let reset_pays_nothing = first == 3.0 && wrong == 0.0 && again == 0.0;

    let mut e = fresh(9)?;
    let order = e.state()?.hidden_order.clone();
    for &b in &order {
        walk_into(&mut e, b)?;
    }
    let restored = walk_into(&mut e, order[0])?.0 == 3.0;

    let cfg = GridConfig::default();
    let mut env = HiddenOrderEnv::new(cfg.clone())?;
    let mut min_dist = usize::MAX;
    for seed in 0..1000 {
        env.reset(seed)?;
        let s = env.state()?;
        for i in 0..s.ball_home.len() {
            for j in 0..i {
                let (a, b) = (s.ball_home[i], s.ball_home[j]);
                min_dist = min_dist.min(a.0.abs_diff(b.0) + a.1.abs_diff(b.1));
            }
        }
    }

    let mut replay_ok = true;
    for seed in 0..20 {
        let a = random_episode(&cfg, seed, seed + 100)?;
        let b = random_episode(&cfg, seed, seed + 100)?;
        let (ra, rb) = (replay_record(&cfg, &a)?, replay_record(&cfg, &b)?);
        replay_ok &= a == b
            && ra
                .observations
                .iter()
                .zip(&rb.observations)
                .all(|(x, y)| x.pixels.iter().zip(&y.pixels).all(|(p, q)| p.to_bits() == q.to_bits()))
            && ra.states == rb.states;
    }
    let pass = twelve && reset_pays_nothing && restored && min_dist >= 2 && replay_ok;
    Ok((
        pass,
        format!(
            "first round pays {first_round}; after wrong ball {first}/{wrong}/{again}; restored after completion: {restored}; min pair distance {min_dist} over 1000 resets; bitwise replay: {replay_ok}"
        ),
    ))
}

// ---- 7 ----

fn store_with(alpha: f64, returns: &[f64]) -> anyhow::Result<TrajectoryStore> {
    let mut s = TrajectoryStore::new(ReplayConfig { capacity: 10_000, alpha })?;
    for &ret in returns {
        let mut ep = Episode::begin(1, &[0.0; 3])?;
        ep.push_frame(&[0.0; 3], 0, ret, false)?;
        s.add_episode(ep)?;
    }
    Ok(s)
}

fn sampling() -> Check {
    const DRAWS: usize = 100_000;
    let within = |count: usize, p: f64| {
        let sigma = (DRAWS as f64 * p * (1.0 - p)).sqrt();
        (count as f64 - DRAWS as f64 * p).abs() <= 3.0 * sigma
    };
    let returns = [3.0, 6.0, 9.0, 0.0];
    let s = store_with(1.0, &returns)?;
    let idx = s.sample_indices(DRAWS, &mut rng(70, "draws"))?;
    let mut counts = [0usize; 4];
    idx.iter().for_each(|&i| counts[i] += 1);
    let expected = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0, 0.0];
    let ratio_ok = (0..4).all(|i| if expected[i] == 0.0 { counts[i] == 0 } else { within(counts[i], expected[i]) });

    let returns = [0.0, 0.0, 3.0, 0.0, 6.0, 0.0, 0.0, 3.0, 0.0, 12.0];
    let s = store_with(0.5, &returns)?;
    let nonzero = s.sample_indices(DRAWS, &mut rng(71, "draws"))?.iter().filter(|&&i| returns[i] > 0.0).count();
    let p = 0.5 + 0.5 * 4.0 / 10.0;
    let rate_ok = within(nonzero, p);
    Ok((
        ratio_ok && rate_ok,
        format!(
            "alpha=1 counts {counts:?} for returns 3:6:9:0; alpha=0.5 nonzero rate {:.4} vs {p} (3 sigma, 1e5 draws)",
            nonzero as f64 / DRAWS as f64
        ),
    ))
}

// ---- 8 ----

/// Returns the same all-black frames and zero rewards for any context.
struct Black;

impl Predictor for Black {
    fn predict(&mut self, e: &Episode, c: usize) -> lab::Result<Prediction> {
        let n = e.num_frames() - c;
        Ok(Prediction { images: Tensor::zeros([n, e.image_size, e.image_size, 3]), rewards: vec![0.0; n] })
    }
}

const OVERFIT_STEPS: usize = 2000;
const OVERFIT_BATCH: usize = 4;
const OVERFIT_LR: f64 = 1e-3;

fn overfit_net(size: usize) -> tssm_core::world_model::NetConfig {
    tssm_core::world_model::NetConfig { image_size: size, n_actions: 3, cnn_depth: 8, embed_dim: 32, mlp_hidden: 32 }
}

fn overfit_one(mut wm: WorldModel, eps: &[EvalEpisode]) -> anyhow::Result<(bool, String)> {
    let mut opt = AdamW::new(AdamWConfig { clip: Some(100.0), ..AdamWConfig::with_lr(OVERFIT_LR) }, wm.params());
    let (mut pick, mut sample) = (rng(80, "pick"), rng(80, "latents"));
    let mut losses = Vec::with_capacity(OVERFIT_STEPS);
    for _ in 0..OVERFIT_STEPS {
        let rows: Vec<&Episode> = (0..OVERFIT_BATCH).map(|_| &eps[pick.random_range(0..eps.len())].episode).collect();
        let (l, grads) = wm.loss_and_grads(&batch_of(&rows)?, &mut sample)?;
        losses.push(l.total);
        opt.step(wm.params_mut(), grads)?;
    }
    let (early, late) = (mean(&losses[..10]), mean(&losses[OVERFIT_STEPS - 10..]));
    let drop = 1.0 - late / early;
    let all: Vec<&Episode> = eps.iter().map(|e| &e.episode).collect();
    let recon = reconstruction_mse(&wm, &all, &mut rng(81, "recon"))?;
    let generated = evaluate_context(&mut ModelPredictor { model: &wm, rng: rng(82, "gen") }, eps, 60)?.row.overall_mse;
    let black = evaluate_context(&mut Black, eps, 60)?.row.overall_mse;
    let pass = drop >= 0.30 && recon < 150.0 && generated <= 0.5 * black;
    Ok((
        pass,
        format!(
            "{}: loss {early:.1} -> {late:.1} ({:.0}% drop, need 30%), recon MSE {recon:.1} (need < 150), generation MSE at 60 {generated:.1} vs black {black:.1} (need <= {:.1})",
            wm.kind().as_str(),
            100.0 * drop,
            0.5 * black
        ),
    ))
}

fn overfit() -> Check {
    let grid = GridConfig { render_size: 16, ..GridConfig::default() };
    let eps = scripted_eval_episodes(&grid, 16, 8000)?;
    let net = overfit_net(16);
    let mut tcfg = TssmConfig::miniature();
    tcfg.net = net;
    tcfg.transformer.max_len = 101;
    let tssm = WorldModel::Tssm(Tssm::new(tcfg, &mut rng(83, "init"))?);
    let rssm = WorldModel::Rssm(Rssm::new(RssmConfig { net, ..RssmConfig::miniature() }, &mut rng(83, "init"))?);
    let (a, da) = overfit_one(tssm, &eps)?;
    let (b, db) = overfit_one(rssm, &eps)?;
    Ok((a && b, format!("{da}; {db}")))
}

// ---- 9 ----

fn bandit_trajectory(agent: &Agent, g: &mut Graph, ab: &AgentBound, r: &mut StreamRng) -> ImaginedTrajectory {
    let f0 = g.constant(Tensor::new([1, 2], vec![1.0, 0.0]));
    let mut policy = ImaginationPolicy::new(agent, ab);
    let a = policy.act(g, f0, r).unwrap();
    let payout = g.mul_const(a, Tensor::new([2], vec![1.0, 0.0]));
    let reward = g.sum_last(payout);
    let f1 = g.constant(Tensor::new([1, 2], vec![0.0, 1.0]));
    let cont = g.constant(Tensor::new([1], vec![0.0]));
    let im = Imagined {
        features: vec![f0, f1],
        hs: vec![],
        zs: vec![],
        actions: vec![a],
        rewards: vec![reward],
        continues: vec![cont],
    };
    policy.finish(g, im)
}

fn agent_smoke() -> Check {
    let mut probs = Vec::new();
    for rho in [0.0, 1.0] {
        let cfg = AgentConfig {
            rho,
            horizon: 1,
            actor_lr: 1e-2,
            critic_lr: 1e-2,
            slow_critic_update: 1,
            hidden: 16,
            n_hidden: 1,
            ..Default::default()
        };
        let mut agent = Agent::new(cfg, 2, 2, &mut rng(90, "agent"))?;
        let mut r = rng(91, "bandit");
        for _ in 0..500 {
            agent.update_with(&mut r, |a, g, ab, rng| Ok(vec![bandit_trajectory(a, g, ab, rng)]))?;
        }
        probs.push(agent.action_probs(&[1.0, 0.0])?[0]);
    }
    let bandit = probs.iter().all(|&p| p > 0.95);
    let mut detail =
        format!("bandit paying-arm probability rho=0 {:.3}, rho=1 {:.3} (need > 0.95)", probs[0], probs[1]);
    if std::env::var_os("ACCEPTANCE_FULL").is_none() {
        detail.push_str("; reduced-environment run is advisory and skipped (set ACCEPTANCE_FULL=1)");
        return Ok((bandit, detail));
    }
    let (ok, run) = reduced_environment_run()?;
    detail.push_str(&format!("; advisory {run}: {}", if ok { "met" } else { "not met" }));
    Ok((bandit, detail))
}

/// Train on the reduced task with the pinned config and compare against random play.
fn reduced_environment_run() -> anyhow::Result<(bool, String)> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reduced_2ball.cfg");
    let mut cfg = RunConfig::load(&path)?;
    cfg.seed = 1;
    let logdir = std::env::temp_dir().join("acceptance_reduced_run");
    let _ = std::fs::remove_dir_all(&logdir);
    let mut trainer = Trainer::new(cfg.clone(), &logdir)?;
    trainer.run()?;
    let grid = cfg.grid();
    let (agent_row, _) = evaluate_agent(&grid, &trainer.world_model, &trainer.agent, 100, 1_000_000_007)?;
    let mut random = RandomPolicy::new(5);
    let (random_row, _) = evaluate_policy(&grid, &mut random, 100, 1_000_000_007, "random")?;
    let ok = agent_row.mean_return >= 3.0 && agent_row.mean_return >= 2.0 * random_row.mean_return;
    Ok((
        ok,
        format!(
            "{} steps on 5x5 2-ball: eval return {:.2} +- {:.2} vs random {:.2} (need >= 3.0 and >= 2x random), logs in {}",
            cfg.total_steps,
            agent_row.mean_return,
            agent_row.return_stderr,
            random_row.mean_return,
            logdir.display()
        ),
    ))
}

// ---- 10 ----

struct Oracle;

impl Predictor for Oracle {
    fn predict(&mut self, e: &Episode, c: usize) -> lab::Result<Prediction> {
        let n = e.num_frames() - c;
        Ok(Prediction { images: e.frames_tensor(c, n), rewards: e.rewards[c..].to_vec() })
    }
}

fn eval_protocol() -> Check {
    let grid = GridConfig { render_size: 16, ..GridConfig::default() };
    let eps = scripted_eval_episodes(&grid, 4, 9000)?;
    let o = evaluate_context(&mut Oracle, &eps, 60)?.row;
    let oracle_ok = o.overall_mse == 0.0
        && o.foreground_mse == Some(0.0)
        && o.zero_acc_pct == Some(100.0)
        && o.nonzero_acc_pct == Some(100.0);
    let b = evaluate_context(&mut Black, &eps, 60)?.row;
    let (mut sum, mut n) = (0.0, 0.0);
    for e in &eps {
        for t in 60..e.episode.num_frames() {
            let f = e.episode.frame(t);
            sum += f.data().iter().map(|v| (255.0 * v).powi(2)).sum::<f64>() / f.numel() as f64;
            n += 1.0;
        }
    }
    let black_ok = (b.overall_mse - sum / n).abs() <= 1e-9 * b.overall_mse
        && b.zero_acc_pct == Some(100.0)
        && b.nonzero_acc_pct == Some(0.0);
    let edges = reward_correct(3.0, 2.7)
        && !reward_correct(3.0, 2.65)
        && reward_correct(3.0, 3.3)
        && reward_correct(0.0, 0.01)
        && reward_correct(0.0, -0.01)
        && !reward_correct(0.0, 0.0101);
    Ok((
        oracle_ok && black_ok && edges,
        format!(
            "oracle mse {} acc {:?}/{:?}; black mse {:.2} vs pixel average {:.2}; 2.7 correct and 2.65 incorrect: {edges}",
            o.overall_mse,
            o.zero_acc_pct,
            o.nonzero_acc_pct,
            b.overall_mse,
            sum / n
        ),
    ))
}

// ---- 11 ----

fn freeze_and_determinism() -> Check {
    let dir = tempfile::tempdir()?;
    let mut tr = Trainer::new(smoke_config(), &dir.path().join("freeze"))?;
    tr.collect_experience(Collector::Random, 100)?;
    let before = tr.world_model.params().clone();
    for _ in 0..100 {
        tr.agent_update()?;
    }
    let frozen = tr.world_model.params().bitwise_eq(&before);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    Trainer::new(smoke_config(), &a)?.run()?;
    Trainer::new(smoke_config(), &b)?.run()?;
    let same = std::fs::read(a.join(METRICS_FILE))? == std::fs::read(b.join(METRICS_FILE))?;
    Ok((
        frozen && same,
        format!("world model bitwise unchanged over 100 agent updates: {frozen}; identical metrics CSVs: {same}"),
    ))
}

fn main() -> ExitCode {
    let checks: [(u32, fn() -> Check); 11] = [
        (1, gradients),
        (2, causality),
        (3, equivalence),
        (4, elbo),
        (5, lambda),
        (6, environment),
        (7, sampling),
        (8, overfit),
        (9, agent_smoke),
        (10, eval_protocol),
        (11, freeze_and_determinism),
    ];
    let only: Option<Vec<u32>> =
        std::env::var("ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (n, check) in checks {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = check().unwrap_or_else(|e| (false, format!("error: {e:#}")));
        failed += !pass as usize;
        println!(
            "criterion {n}: {} {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
