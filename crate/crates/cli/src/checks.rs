use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use ppa_core::linalg::{rank, DEFAULT_PINV_TOL};
use ppa_core::probe::{ce_loss, gla_loss, la_loss, train, Gradient, TrainView};
use ppa_core::theory::{
    reference_world, verify_lemma1, verify_prop1, verify_prop2, Coefficients, DiscreteGroupWorld, RegressionScenario,
};
use ppa_core::{GroupPrior, LinearScorer, LossKind, Matrix, ProjectionOperator, TargetSpace, TrainConfig};

use crate::{VerifyArgs, Which};

#[derive(Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub instances: u64,
    pub detail: String,
}

pub fn run(a: &VerifyArgs) -> Result<bool> {
    let all = [
        Which::Projection,
        Which::Prop1,
        Which::Lemma1,
        Which::Prop2,
        Which::Gradients,
        Which::Aggregation,
    ];
    let selected: Vec<Which> = if a.which == Which::All {
        all.to_vec()
    } else {
        vec![a.which]
    };
    let mut results = Vec::new();
    for w in selected {
        results.push(match w {
            Which::Projection => projection(a.seeds.unwrap_or(100)),
            Which::Prop1 => prop1(a.seeds.unwrap_or(100))?,
            Which::Lemma1 => lemma1(a.seeds.unwrap_or(50))?,
            Which::Prop2 => prop2(a.seeds.unwrap_or(10))?,
            Which::Gradients => gradients(a.seeds.unwrap_or(50))?,
            Which::Aggregation => aggregation(a.seeds.unwrap_or(5))?,
            Which::All => unreachable!(),
        });
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&results)?);
    } else {
        for r in &results {
            println!(
                "{:<12} {:<4} n={:<4} {}",
                r.name,
                if r.passed { "PASS" } else { "FAIL" },
                r.instances,
                r.detail
            );
        }
    }
    Ok(results.iter().all(|r| r.passed))
}

fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix<f64> {
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

fn projection(seeds: u64) -> CheckResult {
    let mut worst_inv: f64 = 0.0;
    let mut worst_trace: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..=32);
        let k = rng.random_range(1..=d);
        let mut z = normal_matrix(&mut rng, k, d);
        if k >= 2 && seed % 3 == 0 {
            let first = z.row(0).to_vec();
            z.row_mut(k - 1).iter_mut().zip(&first).for_each(|(v, f)| *v = 2.0 * f);
        }
        let op = ProjectionOperator::from_proxies(&z, DEFAULT_PINV_TOL);
        let (s, i, n) = op.invariant_errors(&z);
        worst_inv = worst_inv.max(s).max(i).max(n);
        let expected = (d - rank(&z, DEFAULT_PINV_TOL)) as f64;
        worst_trace = worst_trace.max((op.matrix().trace() - expected).abs());
    }
    CheckResult {
        name: "projection",
        passed: worst_inv <= 1e-9 && worst_trace <= 1e-8,
        instances: seeds,
        detail: format!("max invariant error {worst_inv:.2e}, max trace error {worst_trace:.2e}"),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 0 {
        0.5 * (v[m - 1] + v[m])
    } else {
        v[m]
    }
}

fn prop1(seeds: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let scn = RegressionScenario::random(50, 3, 1, 0.0, seed);
        worst = worst.max(verify_prop1(&scn, Coefficients::Fitted)?.residual);
    }
    let mut medians = Vec::new();
    for n in [100, 1000, 10_000] {
        let res = (0..20)
            .map(|seed| {
                let scn = RegressionScenario::random(n, 3, 1, 0.1, 1000 + seed);
                verify_prop1(&scn, Coefficients::True).map(|r| r.residual)
            })
            .collect::<ppa_core::Result<Vec<_>>>()?;
        medians.push(median(res));
    }
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    Ok(CheckResult {
        name: "prop1",
        passed: worst <= 1e-8 && decreasing,
        instances: seeds,
        detail: format!(
            "max noise-free residual {worst:.2e}; noisy medians {:.2e} > {:.2e} > {:.2e}",
            medians[0], medians[1], medians[2]
        ),
    })
}

fn lemma1(seeds: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let points = 1 + (seed % 8) as usize;
        let world = DiscreteGroupWorld::random(points, 2, 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let f: Vec<usize> = (0..points).map(|_| rng.random_range(0..2)).collect();
        worst = worst.max(verify_lemma1(&world, &f)?);
    }
    Ok(CheckResult {
        name: "lemma1",
        passed: worst <= 1e-12,
        instances: seeds,
        detail: format!("max |direct − pointwise| {worst:.2e}"),
    })
}

const TAU_GRID: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];

fn prop2(seeds: u64) -> Result<CheckResult> {
    let mut worlds = vec![reference_world()];
    worlds.extend((0..seeds).map(|s| DiscreteGroupWorld::random(4, 2, 2, s)));
    let (mut optimal, mut tau_best, mut logit_sum) = (0, 0, 0);
    for w in &worlds {
        let r = verify_prop2(w, &TAU_GRID)?;
        optimal += usize::from(r.rule_is_optimal(1e-12));
        tau_best += usize::from(r.tau_one_is_best(1e-12));
        logit_sum += usize::from(r.logit_sum_is_optimal(1e-12));
    }
    let n = worlds.len();
    Ok(CheckResult {
        name: "prop2",
        passed: optimal == n && tau_best == n,
        instances: n as u64,
        detail: format!(
            "adjusted rule optimal {optimal}/{n}, tau=1 best on grid {tau_best}/{n} (summed-logit rule optimal {logit_sum}/{n})"
        ),
    })
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

fn flatten(g: &Gradient<f64>) -> Vec<f64> {
    let mut v = g.weights.as_slice().to_vec();
    if let Some(b) = &g.bias {
        v.extend_from_slice(b);
    }
    v
}

fn numeric_gradient(scorer: &LinearScorer<f64>, loss: &dyn Fn(&LinearScorer<f64>) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let mut out = Vec::new();
    let (c, d) = scorer.weights().shape();
    for i in 0..c {
        for j in 0..d {
            let mut plus = scorer.clone();
            let w = plus.weights().get(i, j);
            plus.weights_mut().set(i, j, w + h);
            let mut minus = scorer.clone();
            minus.weights_mut().set(i, j, w - h);
            out.push((loss(&plus) - loss(&minus)) / (2.0 * h));
        }
    }
    if let Some(b) = scorer.bias() {
        for k in 0..b.len() {
            let mut plus = scorer.clone();
            plus.bias_mut().expect("bias")[k] += h;
            let mut minus = scorer.clone();
            minus.bias_mut().expect("bias")[k] -= h;
            out.push((loss(&plus) - loss(&minus)) / (2.0 * h));
        }
    }
    out
}

fn random_prior(rng: &mut ChaCha8Rng, n: usize, tau: f64) -> ppa_core::Result<GroupPrior> {
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut p: Vec<f64> = raw.iter().map(|v| v / s).collect();
    let rest: f64 = p[1..].iter().sum();
    p[0] = 1.0 - rest;
    GroupPrior::new(p, tau)
}

fn gradients(seeds: u64) -> Result<CheckResult> {
    let mut worst = [0f64; 3];
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(2..=6);
        let d = rng.random_range(1..=8);
        let w = normal_matrix(&mut rng, c, d);
        let bias = rng
            .random_bool(0.5)
            .then(|| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect());
        let scorer = LinearScorer::new(w, bias, TargetSpace::Class)?;
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = rng.random_range(0..c);
        let tau = rng.random_range(0.0..2.0);
        let prior = random_prior(&mut rng, c, tau)?;

        let ce = |s: &LinearScorer<f64>| ce_loss(s, &x, t).expect("valid").0;
        let la = |s: &LinearScorer<f64>| la_loss(s, &x, t, &prior).expect("valid").0;
        let gla = |s: &LinearScorer<f64>| gla_loss(s, &x, t, &prior).expect("valid").0;
        let analytic = [
            flatten(&ce_loss(&scorer, &x, t)?.1),
            flatten(&la_loss(&scorer, &x, t, &prior)?.1),
            flatten(&gla_loss(&scorer, &x, t, &prior)?.1),
        ];
        let losses: [&dyn Fn(&LinearScorer<f64>) -> f64; 3] = [&ce, &la, &gla];
        for k in 0..3 {
            let numeric = numeric_gradient(&scorer, losses[k]);
            worst[k] = worst[k].max(relative_error(&analytic[k], &numeric));
        }
    }
    Ok(CheckResult {
        name: "gradients",
        passed: worst.iter().all(|&e| e <= 1e-5),
        instances: seeds,
        detail: format!(
            "max relative error ce {:.2e}, la {:.2e}, gla {:.2e}",
            worst[0], worst[1], worst[2]
        ),
    })
}

fn aggregation(heads: u64) -> Result<CheckResult> {
    let attrs = 2;
    let mut worst: f64 = 0.0;
    for seed in 0..heads {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, d, classes) = (256, 8, 2 + (seed % 3) as usize);
        let groups = classes * attrs;
        let x = normal_matrix(&mut rng, n, d);
        let targets: Vec<usize> = (0..n).map(|_| rng.random_range(0..groups)).collect();
        let init = LinearScorer::new(
            normal_matrix(&mut rng, groups, d),
            Some(vec![0.0; groups]),
            TargetSpace::Group,
        )?;
        let prior = GroupPrior::uniform(groups, 1.0)?;
        let cfg = TrainConfig {
            epochs: 3,
            learning_rate: 0.1,
            seed,
            bias: true,
            ..TrainConfig::default()
        };
        let head = train(TrainView::new(&x, &targets), LossKind::Gla, Some(&prior), &cfg, init)?.scorer;
        let merged = head.aggregate_groups(attrs)?;
        for _ in 0..1000 {
            let v: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let h = head.logits(&v);
            let f = merged.logits(&v);
            for (y, fy) in f.iter().enumerate() {
                let summed: f64 = h[y * attrs..(y + 1) * attrs].iter().sum();
                worst = worst.max((summed - fy).abs());
            }
        }
    }
    Ok(CheckResult {
        name: "aggregation",
        passed: worst <= 1e-9,
        instances: heads,
        detail: format!("max |Σ_g h_g(x) − f_y(x)| {worst:.2e} over 1000 inputs per head"),
    })
}
