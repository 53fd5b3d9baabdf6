//! Central finite-difference oracle for the hand-written gradients.
#![allow(dead_code)]

use mec_core::{rng_stream, Config, MecEnv};
use mec_rl::marl::{chunk_gradients, collect_rollouts, Dims, Learner, TrainConfig};
use mec_rl::neural::{
    entropy, entropy_grad, log_prob_grad, masked_log_softmax, Linear, NetShape, RecurrentNet,
};
use rand::seq::index::sample;
use rand::Rng;

pub const STEP: f64 = 1e-5;

/// Relative error with a floor on the denominator. A central difference of a
/// loss of size `|L|` carries roughly `1e-16 * |L| / STEP` of rounding noise,
/// so coordinates below `1e-6 * max(1, |L|)` are compared absolutely.
pub fn rel_err(a: f64, n: f64, loss: f64) -> f64 {
    let floor = 1e-6 * loss.abs().max(1.0);
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Largest relative error between `analytic` and central differences of `f`
/// over up to `max_checks` coordinates of `x`.
pub fn check<F: FnMut(&[f64]) -> f64>(x: &[f64], analytic: &[f64], max_checks: usize, seed: u64, mut f: F) -> f64 {
    let mut rng = rng_stream(seed, "fd-coords");
    let idx: Vec<usize> = if x.len() <= max_checks {
        (0..x.len()).collect()
    } else {
        sample(&mut rng, x.len(), max_checks).into_vec()
    };
    let mut worst = 0.0f64;
    let mut p = x.to_vec();
    let base = f(&p);
    for i in idx {
        let orig = p[i];
        p[i] = orig + STEP;
        let up = f(&p);
        p[i] = orig - STEP;
        let down = f(&p);
        p[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic[i], numeric, base));
    }
    worst
}

fn rand_vec<R: Rng>(rng: &mut R, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

pub fn linear_case(seed: u64) -> f64 {
    let mut rng = rng_stream(seed, "fd-linear");
    let (inp, out) = (rng.gen_range(1..12), rng.gen_range(1..12));
    let l = Linear { inp, out, offset: 0 };
    let p = rand_vec(&mut rng, l.len(), 1.0);
    let x = rand_vec(&mut rng, inp, 1.0);
    let c = rand_vec(&mut rng, out, 1.0);
    let loss = |p: &[f64], x: &[f64]| {
        let mut y = vec![0.0; out];
        l.forward(p, x, &mut y);
        y.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut g = vec![0.0; l.len()];
    let mut dx = vec![0.0; inp];
    l.backward(&p, &x, &c, &mut g, Some(&mut dx));
    let e1 = check(&p, &g, 1000, seed, |q| loss(q, &x));
    let e2 = check(&x, &dx, 1000, seed, |q| loss(&p, q));
    e1.max(e2)
}

pub fn gru_case(seed: u64) -> f64 {
    let mut rng = rng_stream(seed, "fd-gru");
    let (input, hidden) = (rng.gen_range(1..8), rng.gen_range(1..10));
    let net = RecurrentNet::new(NetShape {
        input,
        hidden,
        heads: vec![1],
    });
    let p = rand_vec(&mut rng, net.num_params, 0.8);
    let x = rand_vec(&mut rng, hidden, 1.0);
    let h = rand_vec(&mut rng, hidden, 0.9);
    let c = rand_vec(&mut rng, hidden, 1.0);
    let gru = net.gru;
    let loss = |p: &[f64], x: &[f64], h: &[f64]| {
        let mut gi = vec![0.0; 3 * hidden];
        let mut gh = vec![0.0; 3 * hidden];
        let (hn, _) = gru.forward(p, x, h, &mut gi, &mut gh);
        hn.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut gi = vec![0.0; 3 * hidden];
    let mut gh = vec![0.0; 3 * hidden];
    let (_, step) = gru.forward(&p, &x, &h, &mut gi, &mut gh);
    let mut g = vec![0.0; net.num_params];
    let mut dx = vec![0.0; hidden];
    let dh = gru.backward(&p, &x, &h, &step, &c, &mut g, &mut dx);
    let e1 = check(&p, &g, 1000, seed, |q| loss(q, &x, &h));
    let e2 = check(&x, &dx, 1000, seed, |q| loss(&p, q, &h));
    let e3 = check(&h, &dh, 1000, seed, |q| loss(&p, &x, q));
    e1.max(e2).max(e3)
}

/// Whole recurrent net (tanh dense, GRU, several heads) over a sequence.
pub fn sequence_case(seed: u64) -> f64 {
    let mut rng = rng_stream(seed, "fd-seq");
    let input = rng.gen_range(1..10);
    let hidden = rng.gen_range(2..12);
    let heads: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..6)).collect();
    let len = rng.gen_range(1..7);
    let net = RecurrentNet::new(NetShape {
        input,
        hidden,
        heads: heads.clone(),
    });
    let p = net.init(&mut rng, 1.0);
    let xs: Vec<Vec<f64>> = (0..len).map(|_| rand_vec(&mut rng, input, 1.0)).collect();
    let h0 = rand_vec(&mut rng, hidden, 0.5);
    let c: Vec<Vec<Vec<f64>>> = (0..len)
        .map(|_| heads.iter().map(|&o| rand_vec(&mut rng, o, 1.0)).collect())
        .collect();
    let refs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
    let loss = |p: &[f64]| {
        let out = net.forward_seq(p, &refs, &h0);
        let mut s = 0.0;
        for (ot, ct) in out.outputs.iter().zip(&c) {
            for (oh, ch) in ot.iter().zip(ct) {
                s += oh.iter().zip(ch).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        s
    };
    let out = net.forward_seq(&p, &refs, &h0);
    let mut g = vec![0.0; net.num_params];
    net.backward_seq(&p, &out.cache, &c, &mut g);
    check(&p, &g, 1000, seed, loss)
}

/// Masked categorical: gradients of a log-probability and of the entropy.
pub fn categorical_case(seed: u64) -> f64 {
    let mut rng = rng_stream(seed, "fd-cat");
    let n = rng.gen_range(2..9);
    let logits = rand_vec(&mut rng, n, 2.0);
    let mut mask: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.7)).collect();
    let a = rng.gen_range(0..n);
    mask[a] = true;
    let lp = masked_log_softmax(&logits, Some(&mask));
    let mut g = vec![0.0; n];
    log_prob_grad(&lp, a, 1.0, &mut g);
    let e1 = check(&logits, &g, n, seed, |z| masked_log_softmax(z, Some(&mask))[a]);
    let mut gh = vec![0.0; n];
    entropy_grad(&lp, 1.0, &mut gh);
    let e2 = check(&logits, &gh, n, seed, |z| entropy(&masked_log_softmax(z, Some(&mask))));
    e1.max(e2)
}

/// The full per-chunk PPO loss (clipped surrogate, entropy bonus, clipped
/// value regression) on real rollout data, after perturbing the parameters so
/// ratios move away from one.
pub fn ppo_loss_case(seed: u64) -> f64 {
    let mut cfg = Config::default();
    cfg.sim.num_mds = 2;
    cfg.sim.num_eds = 1;
    cfg.sim.episode_slots = 12;
    let mut env = MecEnv::new(cfg, 0);
    let mut rng = rng_stream(seed, "fd-ppo");
    let tc = TrainConfig {
        seed,
        batch_episodes: 1,
        chunk_len: rng.gen_range(3..8),
        hidden: rng.gen_range(3..10),
        ..TrainConfig::default()
    };
    let mut learner = Learner::new(Dims::of(&env), &tc);
    let buffer = collect_rollouts(&mut env, &learner, &tc, 0, false).unwrap();
    let head = learner.critic_net.heads[0];
    learner.popart.update(&buffer.returns(), &head, &mut learner.critic);
    for v in learner.actor.iter_mut().chain(learner.critic.iter_mut()) {
        *v += rng.gen_range(-0.05..0.05);
    }
    let chunk = &buffer.chunks[rng.gen_range(0..buffer.chunks.len())];
    let adv: Vec<f64> = chunk.advantages.iter().map(|a| a / 3.0).collect();
    let n_active = chunk.active.iter().filter(|a| **a).count().max(1);
    let (sa, sc) = (1.0 / n_active as f64, 1.0 / chunk.len() as f64);
    let mut ga = vec![0.0; learner.actor.len()];
    let mut gc = vec![0.0; learner.critic.len()];
    chunk_gradients(&learner, chunk, &adv, &tc, sa, sc, &mut ga, &mut gc);
    let eval = |l: &Learner| {
        let mut a = vec![0.0; l.actor.len()];
        let mut c = vec![0.0; l.critic.len()];
        chunk_gradients(l, chunk, &adv, &tc, sa, sc, &mut a, &mut c).total(&tc)
    };
    let mut probe = learner.clone();
    let e1 = check(&learner.actor, &ga, 1000, seed, |q| {
        probe.actor.copy_from_slice(q);
        eval(&probe)
    });
    let mut probe = learner.clone();
    let e2 = check(&learner.critic, &gc, 1000, seed, |q| {
        probe.critic.copy_from_slice(q);
        eval(&probe)
    });
    e1.max(e2)
}

/// Every differentiable block at one random shape; returns `(block, max rel err)`.
pub fn all_blocks(seed: u64) -> Vec<(&'static str, f64)> {
    vec![
        ("linear", linear_case(seed)),
        ("gru", gru_case(seed)),
        ("sequence", sequence_case(seed)),
        ("categorical", categorical_case(seed)),
        ("ppo_loss", ppo_loss_case(seed)),
    ]
}

/// Direct-sum oracle: `A_t = sum_k (gamma lambda)^k delta_{t+k}` with no
/// recursion, truncated at terminal transitions.
pub fn gae_oracle(r: &[f64], v: &[f64], done: &[bool], next: f64, g: f64, l: f64) -> Vec<f64> {
    let n = r.len();
    let value_after = |t: usize| -> f64 {
        if done[t] {
            0.0
        } else if t + 1 < n {
            v[t + 1]
        } else {
            next
        }
    };
    (0..n)
        .map(|t| {
            let mut sum = 0.0;
            let mut w = 1.0;
            for k in t..n {
                sum += w * (r[k] + g * value_after(k) - v[k]);
                if done[k] {
                    break;
                }
                w *= g * l;
            }
            sum
        })
        .collect()
}
