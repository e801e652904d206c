mod common;

use common::{random_batch, rng};
use tssm_core::agent::{Agent, AgentConfig};
use tssm_core::checkpoint::*;
use tssm_core::model::WorldModel;
use tssm_core::optim::{AdamW, AdamWConfig};
use tssm_core::rssm::{Rssm, RssmConfig};
use tssm_core::tssm::{Tssm, TssmConfig};
use tssm_core::world_model::LatentDims;
use tssm_core::Error;

fn tssm(cfg: TssmConfig, seed: u64) -> WorldModel {
    WorldModel::Tssm(Tssm::new(cfg, &mut rng(seed, "init")).unwrap())
}

/// A few optimizer steps so the moments are nonzero.
fn trained(mut wm: WorldModel) -> (WorldModel, AdamW) {
    let mut opt = AdamW::new(AdamWConfig::with_lr(1e-3), wm.params());
    let batch = random_batch(8, 4, &[4, 3], 3, 1);
    let mut r = rng(2, "train");
    for _ in 0..3 {
        let (_, g) = wm.loss_and_grads(&batch, &mut r).unwrap();
        opt.step(wm.params_mut(), g).unwrap();
    }
    (wm, opt)
}

fn round_trip(c: &Checkpoint) -> Checkpoint {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    c.save(&path).unwrap();
    Checkpoint::load(&path).unwrap()
}

fn check_world_model(wm: WorldModel, fresh: WorldModel) {
    let (wm, opt) = trained(wm);
    let mut c = Checkpoint::new(7);
    c.sections.push(world_model_section(&wm, Some(&opt)));
    let back = round_trip(&c);
    assert_eq!(back.sections[0].kind, wm.kind().as_str());
    let mut loaded = fresh;
    let mut loaded_opt = AdamW::new(opt.config, loaded.params());
    restore_world_model(&back, &mut loaded, Some(&mut loaded_opt)).unwrap();
    assert!(loaded.params().bitwise_eq(wm.params()));
    let (s1, m1, v1) = opt.state();
    let (s2, m2, v2) = loaded_opt.state();
    assert_eq!(s1, s2);
    assert_eq!(m1, m2);
    assert_eq!(v1, v2);
}

#[test]
fn tssm_round_trips_bitwise() {
    check_world_model(tssm(TssmConfig::miniature(), 1), tssm(TssmConfig::miniature(), 99));
}

#[test]
fn rssm_round_trips_bitwise() {
    let mk = |s| WorldModel::Rssm(Rssm::new(RssmConfig::miniature(), &mut rng(s, "init")).unwrap());
    check_world_model(mk(1), mk(99));
}

#[test]
fn mismatched_latent_sizes_are_refused() {
    let wm = tssm(TssmConfig::miniature(), 1);
    let mut c = Checkpoint::new(0);
    c.sections.push(world_model_section(&wm, None));
    let cfg = TssmConfig { latent: LatentDims { groups: 4, classes: 8 }, ..TssmConfig::miniature() };
    let mut other = tssm(cfg, 2);
    let before = other.params().clone();
    let err = restore_world_model(&c, &mut other, None).unwrap_err();
    assert!(matches!(err, Error::Incompatible(_)), "{err}");
    assert!(other.params().bitwise_eq(&before));
}

#[test]
fn model_kind_is_checked() {
    let wm = tssm(TssmConfig::miniature(), 1);
    let mut c = Checkpoint::new(0);
    c.sections.push(world_model_section(&wm, None));
    let mut rssm = WorldModel::Rssm(Rssm::new(RssmConfig::miniature(), &mut rng(1, "init")).unwrap());
    assert!(matches!(restore_world_model(&c, &mut rssm, None), Err(Error::Incompatible(_))));
}

#[test]
fn agent_round_trips_with_optimizer_state() {
    let cfg = AgentConfig { hidden: 16, n_hidden: 1, slow_critic_update: 2, ..Default::default() };
    let (wm, _) = trained(tssm(TssmConfig::miniature(), 3));
    let mut frozen = wm.clone();
    frozen.params_mut().set_frozen(true);
    let mut agent = Agent::new(cfg, wm.feature_dim(), 3, &mut rng(4, "agent")).unwrap();
    let batch = random_batch(8, 4, &[4], 3, 5);
    let states = frozen.observe_filter(&batch, &mut rng(6, "filter")).unwrap();
    let ctx = tssm_core::world_model::Context::from_states(&states[0], &batch.actions[..4], 1);
    let mut r = rng(7, "update");
    for _ in 0..3 {
        agent.update(&frozen, &[(ctx.clone(), 2)], &mut r).unwrap();
    }
    agent.set_epsilon_calls(11);
    let mut c = Checkpoint::new(1);
    c.sections.push(agent_section(&agent));
    let back = round_trip(&c);
    let mut fresh = Agent::new(cfg, wm.feature_dim(), 3, &mut rng(8, "agent")).unwrap();
    restore_agent(&back, &mut fresh).unwrap();
    assert!(fresh.actor_params.bitwise_eq(&agent.actor_params));
    assert!(fresh.critic_params.bitwise_eq(&agent.critic_params));
    assert!(fresh.slow_critic_params.bitwise_eq(&agent.slow_critic_params));
    assert_eq!(fresh.actor_opt.state().0, 3);
    assert_eq!(fresh.actor_opt.state().1, agent.actor_opt.state().1);
    assert_eq!(fresh.critic_opt.state().2, agent.critic_opt.state().2);
    assert_eq!((fresh.updates, fresh.epsilon_calls()), (3, 11));
    let wider = Agent::new(AgentConfig { hidden: 8, ..cfg }, wm.feature_dim(), 3, &mut rng(8, "agent"));
    assert!(restore_agent(&back, &mut wider.unwrap()).is_err());
}
