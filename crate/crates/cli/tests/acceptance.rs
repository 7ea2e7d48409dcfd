//! Acceptance checks, one PASS/FAIL line per criterion.
//!
//! Training runs are cached by their resolved configuration, so criteria
//! sharing a run train it once; each criterion's reported runtime still
//! counts the full cost of every run it relies on. `ADVST_CRITERIA=1,2,10`
//! restricts the set.

use std::collections::HashMap;
use std::fs;
use std::process::Command;
use std::time::{Duration, Instant};

use advst::autodiff::{Graph, Tensor, PRIMITIVES};
use advst::classifier::ModelParams;
use advst::data::Dataset;
use advst::gradcheck;
use advst::losses::{contrastive, cross_entropy, entropy, feature_distance};
use advst::trainer::{generate_domain, sample_rng, TrainConfig};
use advst::transforms::{clamp_params, transform_images, BaseOpKind, ChainDistribution, TransformChain, TransformParams};
use advst_cli::{train, Mode, RunConfig, TrainOutcome, ABLATIONS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SEEDS: [u64; 3] = [0, 1, 2];

struct Verdict {
    pass: bool,
    detail: String,
    /// Runtime limit for the criterion, if it has one.
    budget: Option<Duration>,
}

impl Verdict {
    fn new(pass: bool, detail: String, budget_secs: Option<u64>) -> Self {
        Verdict { pass, detail, budget: budget_secs.map(Duration::from_secs) }
    }
}

/// Finished training runs keyed by their resolved config text.
#[derive(Default)]
struct Runs {
    done: HashMap<String, (TrainOutcome, Duration)>,
}

impl Runs {
    fn get(&mut self, cfg: &RunConfig) -> (&TrainOutcome, Duration) {
        let key = cfg.to_string();
        if !self.done.contains_key(&key) {
            let t = Instant::now();
            let outcome = train(cfg, None).unwrap_or_else(|e| panic!("training failed: {e:#}\n{cfg}"));
            let took = t.elapsed();
            eprintln!(
                "  trained {} seed {} ({:.0} s): test {:.3}, target {:.3}",
                describe(cfg),
                cfg.train.seed,
                took.as_secs_f64(),
                outcome.test_accuracy(),
                outcome.target_accuracy()
            );
            self.done.insert(key.clone(), (outcome, took));
        }
        let (o, d) = &self.done[&key];
        (o, *d)
    }
}

fn describe(cfg: &RunConfig) -> String {
    format!("{} (lambda {}, eta {}, eps {}, contrastive {})", cfg.mode, cfg.train.lambda, cfg.train.eta, cfg.train.epsilon, cfg.train.contrastive)
}

/// 1,000 synthetic source digits, E=10, T_max=5, K=2, B=32, alpha=1e-4,
/// eta=10, epsilon=0; one inverted and translated target.
fn base(mode: Mode, seed: u64) -> RunConfig {
    let text = format!(
        "mode = {mode}\n\
         source = synth(100, 1000)\n\
         test = synth(50, 9999)\n\
         target.inverted = invert+translate(0.15,0)\n\
         epochs = 10\nbatch_size = 32\nt_max = 5\npool_size = 2\nalpha = 1e-4\nlambda = 100\nbeta = 0.2\n\
         seed = {seed}\nrecord_time = false\n"
    );
    let mut cfg = RunConfig::parse(&text).expect("acceptance config");
    if mode == Mode::AdvSt {
        assert_eq!((cfg.train.eta, cfg.train.epsilon), (10.0, 0.0));
    }
    if mode == Mode::PixelAda {
        // the pixel baseline is also ablation configuration 1
        cfg = ABLATIONS[0].apply(&cfg);
    }
    cfg
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn pts(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

// ---------------------------------------------------------------- 1

fn gradients() -> Verdict {
    let report = gradcheck::run_all(None, 0).expect("gradcheck runs");
    let prim: Vec<&str> = report.cases.iter().filter(|c| c.suite == "primitives").map(|c| c.name.as_str()).collect();
    let coverage = prim.len() == PRIMITIVES.len() && PRIMITIVES.iter().all(|p| prim.iter().filter(|n| *n == p).count() == 1);
    let suites: Vec<&str> = gradcheck::SUITES.iter().copied().filter(|s| !report.cases.iter().any(|c| c.suite == *s)).collect();
    let worst = report.cases.iter().map(|c| c.max_rel_error / c.tolerance).fold(0.0, f64::max);
    let mutant = gradcheck::run_all(Some("grid_sample"), 0).expect("gradcheck runs");
    let pass = report.passed() && coverage && suites.is_empty() && !mutant.passed();
    let failed: Vec<String> = report.failures().iter().map(|c| format!("{}/{}", c.suite, c.name)).collect();
    Verdict::new(
        pass,
        format!(
            "{} cases, worst error/tolerance {worst:.1e}, failures {failed:?}, primitives covered once: {coverage}, missing suites {suites:?}, injected fault detected: {}",
            report.cases.len(),
            !mutant.passed()
        ),
        Some(300),
    )
}

// ---------------------------------------------------------------- 2

fn image(rng: &mut ChaCha8Rng, n: usize) -> Tensor<f64> {
    Tensor::from_fn(&[n, 3, 32, 32], |_| rng.gen_range(0.0..=1.0))
}

fn neutrality() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let ops: Vec<BaseOpKind> = BaseOpKind::ALL.iter().copied().filter(|k| k.is_learnable() && k.is_differentiable()).collect();
    let x = image(&mut rng, 4);
    let mut worst_single: f64 = 0.0;
    for &k in &ops {
        let chain = TransformChain::new(vec![k]).unwrap();
        let out = transform_images(&chain, &TransformParams::neutral(&chain), &x).unwrap();
        worst_single = worst_single.max(out.max_abs_diff(&x));
    }
    // every ordered chain of up to three neutral ops
    let dist = ChainDistribution::new(ops.clone(), 3).unwrap();
    let chains = dist.enumerate();
    let x1 = image(&mut rng, 1);
    let mut worst_chain: f64 = 0.0;
    for chain in &chains {
        let out = transform_images(chain, &TransformParams::neutral(chain), &x1).unwrap();
        worst_chain = worst_chain.max(out.max_abs_diff(&x1));
    }
    let full = ChainDistribution::default();
    let mut idempotent = true;
    for _ in 0..10_000 {
        let chain = full.sample_chain(&mut rng);
        let p = TransformParams::init(&chain, &mut rng);
        let wild: Vec<f64> = p.values().iter().map(|v| v + rng.gen_range(-3.0..3.0)).collect();
        let once = clamp_params(&chain, &p.with_values(wild));
        idempotent &= once.is_valid(&chain) && clamp_params(&chain, &once) == once;
    }
    Verdict::new(
        worst_single <= 1e-5 && worst_chain <= 1e-5 && idempotent,
        format!(
            "{} ops, max deviation {worst_single:.1e}; {} neutral chains, max deviation {worst_chain:.1e}; clamp idempotent on 10000 draws: {idempotent}",
            ops.len(),
            chains.len()
        ),
        Some(60),
    )
}

// ---------------------------------------------------------------- 3

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

fn oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 4];
    for _ in 0..100 {
        let (b, c, d) = (rng.gen_range(2..8), rng.gen_range(2..11), rng.gen_range(1..9));
        let logits: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-5.0..5.0)).collect();
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c.min(3))).collect();
        let mut u: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for row in u.chunks_mut(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.iter_mut().for_each(|v| *v /= n);
        }
        let v: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-2.0..2.0)).collect();

        let ce: f64 = logits.chunks(c).zip(&labels).map(|(r, &y)| -log_softmax_row(r)[y]).sum::<f64>() / b as f64;
        let ent: f64 = logits
            .chunks(c)
            .map(|r| log_softmax_row(r).iter().map(|lp| -lp.exp().max(1e-12) * lp.exp().max(1e-12).ln()).sum::<f64>())
            .sum::<f64>()
            / b as f64;
        let dot = |i: usize, j: usize| (0..d).map(|k| u[i * d + k] * u[j * d + k]).sum::<f64>();
        let mut con = 0.0;
        for i in 0..b {
            let pos: Vec<usize> = (0..b).filter(|&p| p != i && labels[p] == labels[i]).collect();
            if pos.is_empty() {
                continue;
            }
            let denom: f64 = (0..b).filter(|&a| a != i).map(|a| dot(i, a).exp()).sum();
            con -= pos.iter().map(|&p| (dot(i, p).exp() / denom).ln()).sum::<f64>() / pos.len() as f64;
        }
        let dist: Vec<f64> = (0..b).map(|i| (0..d).map(|k| (u[i * d + k] - v[i * d + k]).powi(2)).sum()).collect();

        let g = Graph::new();
        let l = g.constant(Tensor::new(vec![b, c], logits.clone()).unwrap());
        let uv = g.constant(Tensor::new(vec![b, d], u.clone()).unwrap());
        let vv = g.constant(Tensor::new(vec![b, d], v.clone()).unwrap());
        worst[0] = worst[0].max((g.item(cross_entropy(&g, l, &labels).unwrap()) - ce).abs());
        worst[1] = worst[1].max((g.item(entropy(&g, l).unwrap()) - ent).abs());
        worst[2] = worst[2].max((g.item(contrastive(&g, uv, &labels).unwrap()) - con).abs());
        let got = g.value(feature_distance(&g, uv, vv).unwrap()).data().to_vec();
        for (a, e) in got.iter().zip(&dist) {
            worst[3] = worst[3].max((a - e).abs());
        }
    }
    Verdict::new(
        worst.iter().all(|&w| w <= 1e-8),
        format!(
            "max |diff| over 100 instances: cross-entropy {:.1e}, entropy {:.1e}, contrastive {:.1e}, feature distance {:.1e}",
            worst[0], worst[1], worst[2], worst[3]
        ),
        Some(60),
    )
}

// ---------------------------------------------------------------- 4

fn chain_statistics() -> Verdict {
    let dist = ChainDistribution::with_l_max(3).unwrap();
    let n = 100_000u64;
    let mut counts: HashMap<TransformChain, u64> = HashMap::new();
    for i in 0..n {
        let mut rng = sample_rng(4, 0, i);
        *counts.entry(dist.sample_chain(&mut rng)).or_insert(0) += 1;
    }
    let p_value = |obs: &[f64], exp: &[f64]| {
        let stat: f64 = obs.iter().zip(exp).map(|(o, e)| (o - e).powi(2) / e).sum();
        ChiSquared::new((obs.len() - 1) as f64).unwrap().sf(stat)
    };
    let mut by_len = [0.0; 3];
    for (c, &k) in &counts {
        by_len[c.len() - 1] += k as f64;
    }
    let p_len = p_value(&by_len, &[n as f64 / 3.0; 3]);
    let support = dist.enumerate();
    let obs: Vec<f64> = support.iter().map(|c| *counts.get(c).unwrap_or(&0) as f64).collect();
    let exp: Vec<f64> = support.iter().map(|c| n as f64 * dist.chain_probability(c).unwrap()).collect();
    let p_chain = p_value(&obs, &exp);
    let outside = counts.keys().filter(|c| !support.contains(c)).count();
    Verdict::new(
        p_len > 0.01 && p_chain > 0.01 && outside == 0,
        format!(
            "length frequencies {:.4}/{:.4}/{:.4} (p = {p_len:.3}); {} chains (p = {p_chain:.3}); draws outside support: {outside}",
            by_len[0] / n as f64,
            by_len[1] / n as f64,
            by_len[2] / n as f64,
            support.len()
        ),
        Some(60),
    )
}

// ---------------------------------------------------------------- 5

fn ascent_property(runs: &mut Runs) -> Verdict {
    let (erm, took) = runs.get(&base(Mode::Erm, 0));
    let model = erm.model.clone();
    let suite = base(Mode::AdvSt, 0).load_source().unwrap().take(256);
    let cfg = TrainConfig { t_max: 20, beta: 0.2, lambda: 100.0, epsilon: 0.0, ..TrainConfig::default() };
    let gen = generate_domain(&model, &suite, &ChainDistribution::default(), &cfg, 1).unwrap();
    let s = &gen.stats;
    let improved = s.start.iter().zip(&s.end).filter(|(a, b)| b > a).count();
    let frac = improved as f64 / s.start.len() as f64;
    let (m0, m1) = (s.mean_start(), s.mean_end());
    Verdict::new(
        frac >= 0.8 && m1 > m0,
        format!(
            "model: ERM seed 0; {improved}/{} samples end above their start ({:.1}%), mean objective {m0:.4} -> {m1:.4}, non-finite {} \
             [runtime counts the {:.0} s model training]",
            s.start.len(),
            100.0 * frac,
            s.non_finite,
            took.as_secs_f64()
        ),
        Some(300),
    )
}

// ---------------------------------------------------------------- 6

fn lambda_monotonicity(runs: &mut Runs) -> (Verdict, Duration) {
    let mut cost = Duration::ZERO;
    let (advst, took) = runs.get(&base(Mode::AdvSt, 0));
    cost += took;
    let model: ModelParams<f32> = advst.model.clone();
    let source: Dataset = base(Mode::AdvSt, 0).load_source().unwrap();
    let t = Instant::now();
    let mut dists = Vec::new();
    for lambda in [0.0, 10.0, 100.0, 1e4] {
        let cfg = TrainConfig { lambda, ..base(Mode::AdvSt, 0).train };
        let gen = generate_domain(&model, &source, &ChainDistribution::default(), &cfg, 1).unwrap();
        dists.push(gen.stats.mean_feature_distance());
    }
    cost += t.elapsed();
    let monotone = dists.windows(2).all(|w| w[1] < w[0]);
    let mut accs = Vec::new();
    for lambda in [1.0, 10.0, 100.0] {
        let cfg = base(Mode::AdvSt, 0).with_override("lambda", &lambda.to_string()).unwrap();
        let (o, took) = runs.get(&cfg);
        cost += took;
        accs.push(o.target_accuracy());
    }
    let spread = accs.iter().cloned().fold(f64::MIN, f64::max) - accs.iter().cloned().fold(f64::MAX, f64::min);
    (
        Verdict::new(
            monotone && spread <= 0.05,
            format!(
                "mean feature distance at lambda 0/10/100/1e4: {:.4e}/{:.4e}/{:.4e}/{:.4e} (strictly decreasing: {monotone}); \
                 target accuracy at lambda 1/10/100: {}/{}/{} (spread {} points)",
                dists[0],
                dists[1],
                dists[2],
                dists[3],
                pts(accs[0]),
                pts(accs[1]),
                pts(accs[2]),
                pts(spread)
            ),
            Some(1800),
        ),
        cost,
    )
}

// ---------------------------------------------------------------- 7, 8

struct Comparison {
    advst: Vec<(f64, f64)>,
    erm: Vec<(f64, f64)>,
    pixel: Vec<(f64, f64)>,
    cost: Duration,
}

fn comparison(runs: &mut Runs) -> Comparison {
    let mut c = Comparison { advst: Vec::new(), erm: Vec::new(), pixel: Vec::new(), cost: Duration::ZERO };
    for seed in SEEDS {
        for (mode, out) in [(Mode::AdvSt, &mut c.advst), (Mode::Erm, &mut c.erm), (Mode::PixelAda, &mut c.pixel)] {
            let (o, took) = runs.get(&base(mode, seed));
            out.push((o.test_accuracy(), o.target_accuracy()));
            c.cost += took;
        }
    }
    c
}

fn column(v: &[(f64, f64)], target: bool) -> Vec<f64> {
    v.iter().map(|&(t, g)| if target { g } else { t }).collect()
}

fn sdg_gain(c: &Comparison) -> Verdict {
    let (a, e, p) = (mean(&column(&c.advst, true)), mean(&column(&c.erm, true)), mean(&column(&c.pixel, true)));
    let fmt = |v: &[(f64, f64)]| column(v, true).iter().map(|&x| pts(x)).collect::<Vec<_>>().join("/");
    Verdict::new(
        a - e >= 0.05 && a - p >= 0.02,
        format!(
            "target accuracy over seeds 0/1/2: AdvST {} (mean {}), ERM {} (mean {}), pixel {} (mean {}); gain over ERM {} points, over pixel {} points",
            fmt(&c.advst),
            pts(a),
            fmt(&c.erm),
            pts(e),
            fmt(&c.pixel),
            pts(p),
            pts(a - e),
            pts(a - p)
        ),
        Some(1800),
    )
}

fn in_domain(c: &Comparison) -> Verdict {
    let (a, e) = (mean(&column(&c.advst, false)), mean(&column(&c.erm, false)));
    Verdict::new(
        (a - e).abs() <= 0.02,
        format!(
            "in-domain test accuracy, mean over seeds: AdvST {}, ERM {} (difference {} points)",
            pts(a),
            pts(e),
            pts(a - e)
        ),
        None,
    )
}

// ---------------------------------------------------------------- 9

fn ablation(runs: &mut Runs) -> (Verdict, Duration) {
    let mut cost = Duration::ZERO;
    let mut means = Vec::new();
    let mut rows = Vec::new();
    for ab in ABLATIONS {
        let mut accs = Vec::new();
        for seed in SEEDS {
            let cfg = ab.apply(&base(Mode::AdvSt, seed));
            let (o, took) = runs.get(&cfg);
            cost += took;
            accs.push(o.target_accuracy());
        }
        means.push(mean(&accs));
        rows.push(format!("c{}={}", ab.id, pts(mean(&accs))));
    }
    let tie = 0.01;
    let ordered = means[4] >= means[3] - tie && means[3] >= means[1] - tie && means[1] >= means[0] - tie;
    let gap = means[1] - means[0];
    (
        Verdict::new(
            ordered && gap >= 0.05,
            format!(
                "mean target accuracy {} (5 >= 4 >= 2 >= 1 within 1 point: {ordered}); config 2 - config 1 = {} points",
                rows.join(", "),
                pts(gap)
            ),
            Some(3600),
        ),
        cost,
    )
}

// ---------------------------------------------------------------- 10

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.cfg");
    fs::write(
        &cfg_path,
        "mode = advst\nsource = synth(20, 3)\ntest = synth(10, 4)\ntarget.inverted = invert+translate(0.15,0)\n\
         epochs = 2\nt_max = 3\nrecord_time = false\n",
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_advst");
    let run = |name: &str| {
        let out = dir.path().join(name);
        let status = Command::new(bin)
            .args(["train", "--config"])
            .arg(&cfg_path)
            .args(["--seed", "7", "--out"])
            .arg(&out)
            .output()
            .expect("spawn advst");
        assert!(status.status.success(), "{}", String::from_utf8_lossy(&status.stderr));
        (fs::read(out.join("checkpoint.bin")).unwrap(), fs::read(out.join("log.csv")).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    let same = a == b;
    let model = ModelParams::<f32>::from_bytes(&a.0).unwrap();
    let reload = dir.path().join("again.bin");
    model.save(&reload).unwrap();
    let round_trip = fs::read(&reload).unwrap() == a.0;
    // a changed seed must change the result, or the comparison proves nothing
    let other = {
        let out = dir.path().join("c");
        let s = Command::new(bin).args(["train", "--config"]).arg(&cfg_path).args(["--seed", "8", "--out"]).arg(&out).output().unwrap();
        assert!(s.status.success());
        fs::read(out.join("checkpoint.bin")).unwrap()
    };
    Verdict::new(
        same && round_trip && other != a.0,
        format!(
            "two CLI runs: checkpoint ({} bytes) and log identical: {same}; checkpoint reload/save bit-exact: {round_trip}; different seed differs: {}",
            a.0.len(),
            other != a.0
        ),
        None,
    )
}

fn main() {
    let wanted: Option<Vec<usize>> =
        std::env::var("ADVST_CRITERIA").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let on = |n: usize| wanted.as_ref().map_or(true, |w| w.contains(&n));
    let mut runs = Runs::default();
    let mut comparison_cache: Option<Comparison> = None;
    let mut results = Vec::new();
    for n in 1..=10 {
        if !on(n) {
            continue;
        }
        eprintln!("criterion {n} ...");
        let t = Instant::now();
        let (v, extra) = match n {
            1 => (gradients(), Duration::ZERO),
            2 => (neutrality(), Duration::ZERO),
            3 => (oracles(), Duration::ZERO),
            4 => (chain_statistics(), Duration::ZERO),
            5 => {
                let before: Duration = runs.done.values().map(|(_, d)| *d).sum();
                let v = ascent_property(&mut runs);
                let after: Duration = runs.done.values().map(|(_, d)| *d).sum();
                // charge the model's training even when another criterion trained it first
                let (_, took) = runs.get(&base(Mode::Erm, 0));
                (v, took.saturating_sub(after - before))
            }
            6 => {
                let before: Duration = runs.done.values().map(|(_, d)| *d).sum();
                let (v, cost) = lambda_monotonicity(&mut runs);
                let new = runs.done.values().map(|(_, d)| *d).sum::<Duration>() - before;
                (v, cost.saturating_sub(new))
            }
            7 | 8 => {
                let before: Duration = runs.done.values().map(|(_, d)| *d).sum();
                if comparison_cache.is_none() {
                    comparison_cache = Some(comparison(&mut runs));
                }
                let c = comparison_cache.as_ref().unwrap();
                let new = runs.done.values().map(|(_, d)| *d).sum::<Duration>() - before;
                let v = if n == 7 { sdg_gain(c) } else { in_domain(c) };
                (v, c.cost.saturating_sub(new))
            }
            9 => {
                let before: Duration = runs.done.values().map(|(_, d)| *d).sum();
                let (v, cost) = ablation(&mut runs);
                let new = runs.done.values().map(|(_, d)| *d).sum::<Duration>() - before;
                (v, cost.saturating_sub(new))
            }
            _ => (determinism(), Duration::ZERO),
        };
        // wall time of this criterion plus training it reused from earlier criteria
        let runtime = t.elapsed() + extra;
        let over = v.budget.filter(|b| runtime > *b);
        let pass = v.pass && over.is_none();
        let budget = match (v.budget, over) {
            (Some(b), Some(_)) => format!("; runtime {:.1} min EXCEEDS the {:.0} min budget", runtime.as_secs_f64() / 60.0, b.as_secs_f64() / 60.0),
            (Some(b), None) => format!("; runtime {:.1} min (budget {:.0} min)", runtime.as_secs_f64() / 60.0, b.as_secs_f64() / 60.0),
            (None, _) => format!("; runtime {:.1} min", runtime.as_secs_f64() / 60.0),
        };
        let line = format!("criterion {n}: {} - {}{budget}", if pass { "PASS" } else { "FAIL" }, v.detail);
        println!("{line}");
        results.push((n, pass, v.pass));
    }
    let passed = results.iter().filter(|r| r.1).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    for (n, pass, property) in &results {
        if !pass && *property {
            println!("note: criterion {n} met its property but not its runtime budget");
        }
    }
}
