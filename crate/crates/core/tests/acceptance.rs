//! Acceptance suite. Every criterion prints one PASS/FAIL line to stderr.
//! Criteria share a lock so that timing measurements run alone.

mod common;

use std::io::Write as _;
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::Instant;

use common::*;
use pgm_core::bench::linear_fit;
use pgm_core::data::{synth_markov, MarkovChain, TokenSequence};
use pgm_core::distill::{distill, DistillConfig};
use pgm_core::eval::{generative_perplexity, nelbo_perplexity, rank_continuations, NgramScorer};
use pgm_core::halton::{halton_schedule, radical_inverse};
use pgm_core::mdlm::{count_token_positions, ModelKind};
use pgm_core::model::{Model, ModelConfig};
use pgm_core::partition::{PartitionTransformer, QueryMode};
use pgm_core::checkpoint::CheckpointMeta;
use pgm_core::sampling::{
    cfg_combine, mdlm_ancestral_sample, nucleus_filter, pgm_sample_mdlm_equivalent, pgm_sample_simple,
    posterior_probs, SampleOptions, SampleTrace,
};
use pgm_core::schedule::{GroupAssignment, NoiseSchedule};
use pgm_core::tensor::Matrix;
use pgm_core::training::{gradient_variance_probe, train, Estimator, Objective, TrainConfig, TrainOutputs};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, Discrete, DiscreteCDF};

static LOCK: Mutex<()> = Mutex::new(());

fn exclusive() -> MutexGuard<'static, ()> {
    LOCK.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(n: usize, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "criterion {n:>2} {verdict} {name}: {detail}");
    assert!(pass, "criterion {n} ({name}) failed: {detail}");
}

fn random_pgm(rng: &mut ChaCha8Rng, len: usize, vocab: usize) -> PartitionTransformer {
    let mode = [QueryMode::DataIndependent, QueryMode::LogSumExp, QueryMode::Mean][rng.gen_range(0..3)];
    let cfg = pgm_config(
        rng.gen_range(1..3),
        rng.gen_range(1..3),
        [8, 16, 24][rng.gen_range(0..3)],
        [2, 4][rng.gen_range(0..2)],
        vocab,
        len + rng.gen_range(0..3),
        mode,
    );
    PartitionTransformer::new(cfg, rng.gen()).unwrap()
}

#[test]
fn criterion_01_group_isolation() {
    let _g = exclusive();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let len = rng.gen_range(2..16);
        let vocab = rng.gen_range(3..12);
        let m = random_pgm(&mut rng, len, vocab);
        let x = random_tokens(&mut rng, len, vocab);
        let g = GroupAssignment::new((0..len).map(|_| rng.gen_range(0..2u8)).collect()).unwrap();
        let side = rng.gen_range(0..2u8);
        let mut y = x.clone();
        for (i, t) in y.iter_mut().enumerate() {
            if g.as_slice()[i] == side && rng.gen_bool(0.7) {
                *t = rng.gen_range(0..vocab as u32);
            }
        }
        let a = m.forward_train(&x, &g).unwrap();
        let b = m.forward_train(&y, &g).unwrap();
        for i in (0..len).filter(|&i| g.as_slice()[i] == side) {
            for (u, v) in a.row(i).iter().zip(b.row(i)) {
                worst = worst.max((u - v).abs());
            }
        }
    }
    report(1, "group isolation", worst <= 1e-6, &format!("100 cases, max deviation {worst:.3e} (bound 1e-6)"));
}

#[test]
fn criterion_02_inference_path_equivalence() {
    let _g = exclusive();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst = 0.0f64;
    let mut extremes = [false, false];
    for case in 0..50 {
        let len = rng.gen_range(3..16);
        let vocab = rng.gen_range(3..12);
        let m = random_pgm(&mut rng, len, vocab);
        let x = random_tokens(&mut rng, len, vocab);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        let (n_clean, n_decode) = match case {
            0 => (len - 1, 1),
            1 => (1, len - 1),
            _ => {
                let c = rng.gen_range(1..len);
                (c, rng.gen_range(1..=len - c))
            }
        };
        extremes[0] |= n_decode == 1;
        extremes[1] |= n_decode == len - 1;
        let clean = &order[..n_clean];
        let decode = &order[n_clean..n_clean + n_decode];
        let tokens: Vec<u32> = clean.iter().map(|&i| x[i]).collect();
        let pred = m.predict(&tokens, clean, decode).unwrap();
        let mut filled = x.clone();
        for &i in &order[n_clean..] {
            filled[i] = rng.gen_range(0..vocab as u32);
        }
        let g = GroupAssignment::new((0..len).map(|i| u8::from(!clean.contains(&i))).collect()).unwrap();
        let full = m.forward_train(&filled, &g).unwrap();
        for (r, &p) in decode.iter().enumerate() {
            for (u, v) in pred.row(r).iter().zip(full.row(p)) {
                worst = worst.max((u - v).abs() / v.abs().max(1.0));
            }
        }
    }
    let pass = worst <= 1e-5 && extremes == [true, true];
    report(
        2,
        "inference-path equivalence",
        pass,
        &format!("50 cases incl. |decode| in {{1, L-1}}, max relative difference {worst:.3e} (bound 1e-5)"),
    );
}

#[test]
fn criterion_03_gradient_correctness() {
    let _g = exclusive();
    let (mut pgm, mut mdlm) = tiny_fd_models();
    let a = finite_difference_check(&mut pgm, Estimator::Pgm, &fd_batch(31), 20, 1e-3, 3);
    let b = finite_difference_check(&mut mdlm, Estimator::Mgm, &fd_batch(32), 20, 1e-3, 4);
    let worst = |r: &[FdResult]| r.iter().map(FdResult::rel_error).fold(0.0, f64::max);
    let (wa, wb) = (worst(&a), worst(&b));
    report(
        3,
        "gradient correctness",
        wa <= 1e-4 && wb <= 1e-4,
        &format!("20 parameters each, max relative error pgm {wa:.3e}, mdlm {wb:.3e} (bound 1e-4)"),
    );
}

/// Digit reversal with exact integer arithmetic.
fn radical_inverse_oracle(i: u64, b: u64) -> f64 {
    let mut digits = Vec::new();
    let mut n = i;
    while n > 0 {
        digits.push(n % b);
        n /= b;
    }
    let (mut num, mut den) = (0u64, 1u64);
    for d in digits {
        num = num * b + d;
        den *= b;
    }
    num as f64 / den as f64
}

#[test]
fn criterion_04_halton_oracle() {
    let _g = exclusive();
    let mut worst = 0.0f64;
    for b in [2, 3] {
        for i in 1..=10_000u64 {
            worst = worst.max((radical_inverse(i, b).unwrap() - radical_inverse_oracle(i, b)).abs());
        }
    }
    let mut perms = true;
    for h in [1, 2, 4, 16] {
        let mut s = halton_schedule(h).unwrap();
        s.sort_unstable();
        let all: Vec<(usize, usize)> = (0..h).flat_map(|r| (0..h).map(move |c| (r, c))).collect();
        perms &= s == all;
    }
    let traced = halton_schedule(2).unwrap() == vec![(1, 0), (0, 1), (0, 0), (1, 1)];
    report(
        4,
        "halton oracle",
        worst <= 1e-15 && perms && traced,
        &format!("max radical-inverse error {worst:.1e}; permutations {perms}; H=2 trace {traced}"),
    );
}

/// Pools bins from both tails until every expected count is at least 5.
fn chi_square(observed: &[f64], expected: &[f64]) -> (f64, usize) {
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for (&o, &e) in observed.iter().zip(expected) {
        acc = (acc.0 + o, acc.1 + e);
        if acc.1 >= 5.0 {
            bins.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if let Some(last) = bins.last_mut() {
        last.0 += acc.0;
        last.1 += acc.1;
    }
    let stat = bins.iter().map(|(o, e)| (o - e).powi(2) / e).sum();
    (stat, bins.len() - 1)
}

fn p_value(stat: f64, dof: usize) -> f64 {
    1.0 - ChiSquared::new(dof as f64).unwrap().cdf(stat)
}

#[test]
fn criterion_05_posterior_and_sampler_correctness() {
    let _g = exclusive();
    let schedule = NoiseSchedule::linear();
    let mut rng = ChaCha8Rng::seed_from_u64(505);

    let mut worst_sum = 0.0f64;
    let mut carried = true;
    for j in 1..=10 {
        let t = j as f64 / 10.0;
        for i in 0..10 {
            let s = t * i as f64 / 10.0;
            let mut x: Vec<f64> = (0..7).map(|_| rng.gen::<f64>()).collect();
            let total: f64 = x.iter().sum();
            x.iter_mut().for_each(|v| *v /= total);
            let masked = posterior_probs(&x, 7, 7, s, t, &schedule).unwrap();
            worst_sum = worst_sum.max((masked.iter().sum::<f64>() - 1.0).abs());
            let clean = posterior_probs(&x, 3, 7, s, t, &schedule).unwrap();
            worst_sum = worst_sum.max((clean.iter().sum::<f64>() - 1.0).abs());
            carried &= clean.iter().enumerate().all(|(k, &p)| p == if k == 3 { 1.0 } else { 0.0 });
        }
    }

    let mdlm = Model::new(&ModelConfig::Mdlm(mdlm_config(1, 8, 2, 6, 16)), 5).unwrap();
    let opts = SampleOptions {
        bos: Some(5),
        ..SampleOptions::default()
    };
    let mut untouched = true;
    for trace in mdlm_ancestral_sample(mdlm.denoiser(), 16, 10, 20, &opts, &mut rng).unwrap() {
        untouched &= trace.validate(6).is_ok() && trace.tokens[0] == 5;
        for step in &trace.steps {
            for (&p, &tok) in step.positions.iter().zip(&step.tokens) {
                untouched &= trace.tokens[p] == tok;
            }
        }
    }

    let len = 16;
    let steps = 8;
    let pgm = Model::new(
        &ModelConfig::Pgm(pgm_config(1, 1, 8, 2, 6, len, QueryMode::DataIndependent)),
        6,
    )
    .unwrap();
    let mut traces: Vec<SampleTrace> = Vec::new();
    for _ in 0..10 {
        traces.extend(pgm_sample_mdlm_equivalent(pgm.denoiser(), len, steps, 50, &opts, &mut rng).unwrap());
    }
    let first_p = schedule
        .unmask_prob((steps - 1) as f64 / steps as f64, 1.0)
        .unwrap();
    let first = Binomial::new(first_p, (len - 1) as u64).unwrap();
    let mut observed = vec![0.0; len];
    for t in &traces {
        observed[t.steps[0].positions.len()] += 1.0;
    }
    let expected: Vec<f64> = (0..len as u64).map(|k| first.pmf(k) * traces.len() as f64).collect();
    let (stat, dof) = chi_square(&observed, &expected);
    let p_first = p_value(stat, dof);

    // Randomised probability integral transform of every step's count.
    let mut pit = ChaCha8Rng::seed_from_u64(55);
    let mut deciles = [0.0; 10];
    for t in &traces {
        let mut remaining = (len - 1) as u64;
        for (k, step) in t.steps.iter().enumerate() {
            let tt = (steps - k) as f64 / steps as f64;
            let ss = (steps - k - 1) as f64 / steps as f64;
            let p = schedule.unmask_prob(ss, tt).unwrap();
            let c = step.positions.len() as u64;
            let (lo, hi) = if remaining == 0 {
                (0.0, 1.0)
            } else {
                let d = Binomial::new(p, remaining).unwrap();
                let lo = if c == 0 { 0.0 } else { d.cdf(c - 1) };
                (lo, d.cdf(c))
            };
            let u = lo + pit.gen::<f64>() * (hi - lo);
            deciles[((u * 10.0) as usize).min(9)] += 1.0;
            remaining -= c;
        }
    }
    let n_pit: f64 = deciles.iter().sum();
    let (stat, dof) = chi_square(&deciles, &[n_pit / 10.0; 10]);
    let p_pit = p_value(stat, dof);

    report(
        5,
        "posterior and sampler correctness",
        worst_sum <= 1e-12 && carried && untouched && p_first > 1e-3 && p_pit > 1e-3,
        &format!(
            "posterior max |sum-1| {worst_sum:.1e}; carry-over {carried}; ancestral keeps tokens {untouched}; \
             500 runs: first-step chi-square p={p_first:.3}, all-step PIT p={p_pit:.3} (need > 0.001)"
        ),
    );
}

#[test]
fn criterion_06_variance_reduction() {
    let _g = exclusive();
    let model = Model::new(&ModelConfig::Mdlm(mdlm_config(1, 16, 2, 8, 16)), 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let batch: Vec<TokenSequence> = (0..8).map(|_| TokenSequence::new(random_tokens(&mut rng, 16, 8))).collect();
    let schedule = NoiseSchedule::linear();
    let comp = gradient_variance_probe(&model, &batch, Estimator::MgmComplementary, 100, &schedule, 66).unwrap();
    let indep = gradient_variance_probe(&model, &batch, Estimator::MgmIndependentPair, 100, &schedule, 66).unwrap();
    report(
        6,
        "variance reduction",
        comp.total <= indep.total,
        &format!(
            "100 paired draws: complementary {:.4e} vs independent pair {:.4e} (ratio {:.3})",
            comp.total,
            indep.total,
            comp.total / indep.total
        ),
    );
}

const MARKOV_STATES: usize = 16;
const MARKOV_LEN: usize = 32;
const MARKOV_WIDTH: usize = 32;
const MARKOV_STEPS: usize = 10_000;

struct MarkovRun {
    train: Vec<TokenSequence>,
    val: Vec<TokenSequence>,
    chain: MarkovChain,
    pgm: Model,
    mdlm: Model,
    train_seconds: (f64, f64),
}

fn train_markov(cfg: ModelConfig, objective: Objective, data: &[TokenSequence]) -> (Model, f64) {
    let mut model = Model::new(&cfg, 7).unwrap();
    let tc = TrainConfig {
        batch_size: 32,
        steps: MARKOV_STEPS,
        learning_rate: 1e-3,
        warmup_steps: 200,
        grad_clip_norm: 1.0,
        ema_decay: 0.999,
        objective,
        seed: 7,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(&tc, &NoiseSchedule::linear(), &mut model, data, &[], &TrainOutputs::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    (out.checkpoint(&model).eval_model().unwrap(), secs)
}

fn markov_run() -> &'static MarkovRun {
    static RUN: OnceLock<MarkovRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let (corpus, chain) = synth_markov(MARKOV_STATES, 2024, 8192 + 512, MARKOV_LEN).unwrap();
        let (train_c, val_c) = corpus.split(512.0 / (8192.0 + 512.0)).unwrap();
        let pcfg = pgm_config(2, 2, MARKOV_WIDTH, 4, MARKOV_STATES + 2, MARKOV_LEN, QueryMode::DataIndependent);
        let mcfg = mdlm_config(4, MARKOV_WIDTH, 4, MARKOV_STATES + 2, MARKOV_LEN);
        let (pgm, tp) = train_markov(ModelConfig::Pgm(pcfg), Objective::Pgm, &train_c.sequences);
        let (mdlm, tm) = train_markov(ModelConfig::Mdlm(mcfg), Objective::Mgm, &train_c.sequences);
        MarkovRun {
            train: train_c.sequences,
            val: val_c.sequences,
            chain,
            pgm,
            mdlm,
            train_seconds: (tp, tm),
        }
    })
}

#[test]
fn criterion_07_learning_parity() {
    let _g = exclusive();
    let run = markov_run();
    let schedule = NoiseSchedule::linear();
    let p = nelbo_perplexity(&run.pgm, &run.val, &schedule, 16, 77).unwrap();
    let m = nelbo_perplexity(&run.mdlm, &run.val, &schedule, 16, 77).unwrap();
    let target = run.chain.entropy_rate().exp();
    let within = |v: f64| (v / target - 1.0).abs() <= 0.15;
    let gap = (p.perplexity - m.perplexity).abs() / p.perplexity.min(m.perplexity);
    report(
        7,
        "learning parity",
        within(p.perplexity) && within(m.perplexity) && gap <= 0.10,
        &format!(
            "exp(entropy rate) {target:.3}; pgm {:.3} ± {:.3}, mdlm {:.3} ± {:.3} (15% band); gap {:.1}% (bound 10%); \
             {} steps in {:.0}s / {:.0}s",
            p.perplexity,
            p.perplexity * p.std_error,
            m.perplexity,
            m.perplexity * m.std_error,
            gap * 100.0,
            MARKOV_STEPS,
            run.train_seconds.0,
            run.train_seconds.1,
        ),
    );
}

#[test]
fn criterion_08_throughput_scaling() {
    let _g = exclusive();
    let (len, steps, batch, width, vocab) = (512, 64, 16, 32, 18);
    let pgm = Model::new(
        &ModelConfig::Pgm(pgm_config(1, 1, width, 4, vocab, len, QueryMode::DataIndependent)),
        8,
    )
    .unwrap();
    let mdlm = Model::new(&ModelConfig::Mdlm(mdlm_config(3, width, 4, vocab, len)), 8).unwrap();
    let (np, nm) = (pgm.params().numel(), mdlm.params().numel());
    let opts = SampleOptions {
        bos: Some(0),
        ..SampleOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    pgm_sample_simple(pgm.denoiser(), len, 4, batch, &opts, &mut rng).unwrap();
    mdlm_ancestral_sample(mdlm.denoiser(), len, 4, batch, &opts, &mut rng).unwrap();

    let mut time = |model: &Model, f: &dyn Fn(&Model, &mut ChaCha8Rng) -> Vec<SampleTrace>| {
        let mut secs = Vec::new();
        let mut last = Vec::new();
        let mut counted = true;
        for _ in 0..2 {
            model.denoiser().reset_counter();
            let start = Instant::now();
            last = f(model, &mut rng);
            secs.push(start.elapsed().as_secs_f64());
            let traced: u64 = last.iter().map(SampleTrace::positions_processed).sum();
            counted &= traced == model.denoiser().positions_processed();
        }
        (secs.iter().sum::<f64>() / secs.len() as f64, last, counted)
    };
    let (t_pgm, tr_pgm, c_pgm) = time(&pgm, &|m, r| pgm_sample_simple(m.denoiser(), len, steps, batch, &opts, r).unwrap());
    let (t_mdlm, tr_mdlm, c_mdlm) =
        time(&mdlm, &|m, r| mdlm_ancestral_sample(m.denoiser(), len, steps, batch, &opts, r).unwrap());

    let k = (len - 1).div_ceil(steps);
    let pgm_closed: u64 = (0..steps).map(|tau| 1 + (k * tau) as u64).sum::<u64>() + (len - 1) as u64;
    let mut exact = c_pgm && c_mdlm;
    for t in &tr_pgm {
        exact &= t.positions_processed() == pgm_closed;
        exact &= count_token_positions(ModelKind::Pgm, len, &t.clean_sizes(), &t.decode_sizes()).unwrap() == pgm_closed;
    }
    for t in &tr_mdlm {
        exact &= t.positions_processed() == (steps * len) as u64;
        exact &= count_token_positions(ModelKind::Mdlm, len, &t.clean_sizes(), &t.decode_sizes()).unwrap()
            == (steps * len) as u64;
    }
    let steps0 = &tr_pgm[0].steps;
    let xs: Vec<f64> = steps0.iter().map(|s| s.n_clean as f64).collect();
    let ys: Vec<f64> = steps0.iter().map(|s| s.ms).collect();
    let fit = linear_fit(&xs, &ys).unwrap();
    let ratio = t_pgm / t_mdlm;
    report(
        8,
        "throughput scaling",
        ratio <= 0.5 && fit.r_squared >= 0.8 && exact,
        &format!(
            "L={len} T={steps} batch={batch}; params pgm {np} / mdlm {nm}; wall time pgm {t_pgm:.2}s vs mdlm {t_mdlm:.2}s \
             (ratio {ratio:.3}, bound 0.5); latency~clean R^2 {:.3} (bound 0.8); exact counts {exact} (pgm {pgm_closed}/seq)",
            fit.r_squared
        ),
    );
}

#[test]
fn criterion_09_cfg_and_nucleus_identities() {
    let _g = exclusive();
    let cond = Matrix::from_rows(&[vec![-0.3, -1.7, -2.2], vec![-1.0, -0.5, -3.0]]);
    let uncond = Matrix::from_rows(&[vec![-1.1, -0.9, -1.4], vec![-0.2, -2.5, -1.9]]);
    let omega_zero = cfg_combine(&cond, &uncond, 0.0).unwrap() == cond;
    let cancel = [0.5, 1.0, 3.0].iter().all(|&w| cfg_combine(&cond, &cond, w).unwrap() == cond);
    let probs = [0.1, 0.25, 0.4, 0.25];
    let p_one = nucleus_filter(&probs, 1.0).unwrap() == probs;
    let case = nucleus_filter(&[0.5, 0.3, 0.2], 0.8).unwrap() == vec![0.625, 0.375, 0.0];
    report(
        9,
        "cfg and nucleus identities",
        omega_zero && cancel && p_one && case,
        &format!("omega=0 {omega_zero}; equal-logit cancellation {cancel}; p=1 {p_one}; [0.5,0.3,0.2]@0.8 {case}"),
    );
}

const TEACHER_STEPS: usize = 16;

#[test]
fn criterion_10_sdtt_round_efficacy() {
    let _g = exclusive();
    let run = markov_run();
    let schedule = NoiseSchedule::linear();
    let cfg = DistillConfig {
        rounds: 1,
        steps_per_round: 1000,
        batch_size: 32,
        learning_rate: 1e-4,
        grad_clip_norm: 1.0,
        ema_decay: 0.0,
        teacher_steps: TEACHER_STEPS,
        divergence: Default::default(),
        seed: 10,
    };
    let start = Instant::now();
    let out = distill(&run.pgm, &CheckpointMeta::default(), &run.train, &cfg, &schedule).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let scorer = NgramScorer::fit(&run.train, 3, MARKOV_STATES + 2).unwrap();
    let opts = SampleOptions {
        bos: Some(MARKOV_STATES as u32),
        ..SampleOptions::default()
    };
    let gen = |m: &Model| {
        let mut rng = ChaCha8Rng::seed_from_u64(1010);
        let samples: Vec<Vec<u32>> =
            pgm_sample_mdlm_equivalent(m.denoiser(), MARKOV_LEN, TEACHER_STEPS / 2, 128, &opts, &mut rng)
                .unwrap()
                .into_iter()
                .map(|t| t.tokens)
                .collect();
        generative_perplexity(&scorer, &samples).unwrap()
    };
    let (student, teacher) = (gen(&out.student), gen(&run.pgm));
    report(
        10,
        "sdtt round efficacy",
        student <= teacher && out.metadata.step_ratio == 2,
        &format!(
            "128 samples at {} steps: student gen-ppl {student:.3} vs teacher {teacher:.3}; distillation {secs:.0}s",
            TEACHER_STEPS / 2
        ),
    );
}

#[test]
fn criterion_11_continuation_ranking() {
    let _g = exclusive();
    let (len, prefix_len, vocab) = (8, 4, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let dists: Vec<Vec<f64>> = (0..len)
        .map(|_| {
            let w: Vec<f64> = (0..vocab).map(|_| (2.5 * rng.gen::<f64>()).exp()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect()
        })
        .collect();
    let draw = |rng: &mut ChaCha8Rng, i: usize| {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, &p) in dists[i].iter().enumerate() {
            acc += p;
            if u < acc {
                return k as u32;
            }
        }
        (vocab - 1) as u32
    };
    let data: Vec<TokenSequence> = (0..4096)
        .map(|_| TokenSequence::new((0..len).map(|i| draw(&mut rng, i)).collect()))
        .collect();
    let mut model = Model::new(
        &ModelConfig::Pgm(pgm_config(1, 1, 32, 4, vocab, len, QueryMode::DataIndependent)),
        11,
    )
    .unwrap();
    let tc = TrainConfig {
        batch_size: 32,
        steps: 2000,
        learning_rate: 2e-3,
        warmup_steps: 100,
        ema_decay: 0.99,
        objective: Objective::Pgm,
        seed: 11,
        eval_every: 0,
        ..TrainConfig::default()
    };
    let out = train(&tc, &NoiseSchedule::linear(), &mut model, &data, &[], &TrainOutputs::default()).unwrap();
    let model = out.checkpoint(&model).eval_model().unwrap();

    let log_joint = |s: &[u32], offset: usize| -> f64 { s.iter().enumerate().map(|(i, &t)| dists[offset + i][t as usize].ln()).sum() };
    let mut correct = 0;
    for trial in 0..200 {
        let prefix: Vec<u32> = (0..prefix_len).map(|i| draw(&mut rng, i)).collect();
        let likely: Vec<u32> = (prefix_len..len).map(|i| draw(&mut rng, i)).collect();
        let uniform: Vec<u32> = (prefix_len..len).map(|_| rng.gen_range(0..vocab as u32)).collect();
        let mut candidates = vec![likely, uniform];
        if rng.gen_bool(0.5) {
            candidates.swap(0, 1);
        }
        let truth: Vec<f64> = candidates.iter().map(|c| log_joint(c, prefix_len)).collect();
        let best_true = usize::from(truth[1] > truth[0]);
        let r = rank_continuations(&model, &prefix, &candidates, &NoiseSchedule::linear(), 32, 9000 + trial).unwrap();
        correct += usize::from(r.best == best_true);
    }
    let rate = correct as f64 / 200.0;
    report(
        11,
        "continuation ranking",
        rate >= 0.95,
        &format!("{correct}/200 trials pick the higher true joint ({:.1}%, bound 95%)", rate * 100.0),
    );
}
