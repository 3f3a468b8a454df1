//! Randomized checks run by `imel selftest`.

use rand::Rng;

use crate::improve::{gae, improved_mean, mc_returns, step_size_eta, ValueNet};
use crate::memory::ContextPoint;
use crate::mki::{MkiConfig, MkiModel};
use crate::np::{NpConfig, NpModel};
use crate::policy::kl_equal_sigma;
use crate::rng::{seeded, standard_normal, StreamRng};

fn normals(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| standard_normal(rng)).collect()
}

fn kl_budget(cases: usize) -> Result<(), String> {
    let mut rng = seeded(11);
    let eps = 0.05;
    for c in 0..cases {
        let d = rng.random_range(1..=6);
        let t = rng.random_range(1..=64);
        let adv = normals(&mut rng, t);
        let means: Vec<Vec<f64>> = (0..t).map(|_| normals(&mut rng, d)).collect();
        let stds: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..d).map(|_| rng.random_range(0.05..2.0)).collect())
            .collect();
        let actions: Vec<Vec<f64>> = (0..t).map(|_| normals(&mut rng, d)).collect();
        let eta = step_size_eta(&adv, &actions, &means, &stds, eps).map_err(|e| e.to_string())?;
        let kl: f64 = (0..t)
            .map(|i| {
                let m = improved_mean(&means[i], &stds[i], &actions[i], adv[i], eta);
                kl_equal_sigma(&m, &means[i], &stds[i])
            })
            .sum::<f64>()
            / t as f64;
        if ((kl - eps) / eps).abs() >= 1e-9 {
            return Err(format!("case {c}: mean KL {kl}"));
        }
    }
    Ok(())
}

fn gae_identity(cases: usize) -> Result<(), String> {
    let mut rng = seeded(12);
    for c in 0..cases {
        let t = rng.random_range(1..=32);
        let r = normals(&mut rng, t);
        let v = normals(&mut rng, t);
        let q = mc_returns(&r, 0.97);
        let a = gae(&r, &v, 0.97, 1.0);
        for i in 0..t {
            if (a[i] - (q[i] - v[i])).abs() >= 1e-10 {
                return Err(format!("case {c}, step {i}"));
            }
        }
    }
    Ok(())
}

fn percentile_example() -> Result<(), String> {
    let v = [0.0, 10.0];
    let (p20, p80) = (super::percentile(&v, 0.2), super::percentile(&v, 0.8));
    if p20 == 2.0 && p80 == 8.0 {
        Ok(())
    } else {
        Err(format!("p20 {p20}, p80 {p80}"))
    }
}

fn mki_single_point(cases: usize) -> Result<(), String> {
    let mut rng = seeded(13);
    let cfg = MkiConfig {
        hidden: vec![8],
        ..Default::default()
    };
    let model = MkiModel::new(3, &cfg, 1).map_err(|e| e.to_string())?;
    for c in 0..cases {
        let s = normals(&mut rng, 3);
        let y = normals(&mut rng, 2);
        let q = normals(&mut rng, 3);
        let ctx = [ContextPoint {
            state: &s,
            target: &y,
        }];
        let out = model.predict(&q, &ctx).map_err(|e| e.to_string())?;
        if out != y {
            return Err(format!("case {c}: {out:?} != {y:?}"));
        }
    }
    Ok(())
}

fn np_invariance(cases: usize) -> Result<(), String> {
    let mut rng = seeded(14);
    let cfg = NpConfig {
        hidden: vec![16],
        latent_hidden: vec![8],
        r_dim: 8,
        z_dim: 4,
    };
    let model = NpModel::new(2, 1, &cfg, 2).map_err(|e| e.to_string())?;
    for c in 0..cases {
        let n = rng.random_range(1..=12);
        let xs: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, 2)).collect();
        let ys: Vec<Vec<f64>> = (0..n).map(|_| normals(&mut rng, 1)).collect();
        let ctx: Vec<ContextPoint> = xs
            .iter()
            .zip(&ys)
            .map(|(x, y)| ContextPoint {
                state: x,
                target: y,
            })
            .collect();
        let mut shuffled = ctx.clone();
        shuffled.reverse();
        shuffled.rotate_left(n / 2);
        let mut doubled = ctx.clone();
        doubled.extend(ctx.iter().copied());
        let a = model.encode(&ctx).map_err(|e| e.to_string())?;
        let b = model.encode(&shuffled).map_err(|e| e.to_string())?;
        let d = model.encode(&doubled).map_err(|e| e.to_string())?;
        if a != b || a != d {
            return Err(format!("case {c}: encoding changed"));
        }
    }
    Ok(())
}

fn value_gradient(cases: usize) -> Result<(), String> {
    use crate::nn::Trainable;
    let mut rng = seeded(15);
    for c in 0..cases {
        let mut net = ValueNet::new(3, &[5], c as u64);
        net.renormalize(0.3, 1.7);
        let states: Vec<Vec<f64>> = (0..4).map(|_| normals(&mut rng, 3)).collect();
        let refs: Vec<&[f64]> = states.iter().map(|s| s.as_slice()).collect();
        let targets = normals(&mut rng, 4);
        let (_, g) = net
            .loss_and_grad(&refs, &targets)
            .map_err(|e| e.to_string())?;
        let p = net.flat_params();
        let h = 1e-6;
        let mut fd = vec![0.0; p.len()];
        for i in 0..p.len() {
            let mut q = p.clone();
            q[i] = p[i] + h;
            net.set_flat_params(&q).map_err(|e| e.to_string())?;
            let up = net
                .loss_and_grad(&refs, &targets)
                .map_err(|e| e.to_string())?
                .0;
            q[i] = p[i] - h;
            net.set_flat_params(&q).map_err(|e| e.to_string())?;
            let down = net
                .loss_and_grad(&refs, &targets)
                .map_err(|e| e.to_string())?
                .0;
            fd[i] = (up - down) / (2.0 * h);
        }
        net.set_flat_params(&p).map_err(|e| e.to_string())?;
        let diff: f64 = g
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = diff / norm(&g).max(norm(&fd)).max(1e-300);
        if rel >= 1e-4 {
            return Err(format!("case {c}: relative error {rel:e}"));
        }
    }
    Ok(())
}

/// Runs every check, prints one line each and returns the failure count.
pub fn run(cases: usize) -> usize {
    let cases = cases.max(1);
    let checks: Vec<(&str, Result<(), String>)> = vec![
        ("kl budget", kl_budget(cases)),
        ("gae lambda=1 identity", gae_identity(cases)),
        ("percentile example", percentile_example()),
        ("mki single point", mki_single_point(cases)),
        ("np permutation invariance", np_invariance(cases)),
        ("value gradient", value_gradient(cases.min(20))),
    ];
    let mut failures = 0;
    for (name, res) in checks {
        match res {
            Ok(()) => println!("PASS {name}"),
            Err(e) => {
                failures += 1;
                println!("FAIL {name}: {e}");
            }
        }
    }
    failures
}
