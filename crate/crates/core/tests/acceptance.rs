//! Acceptance gate: every criterion runs at its stated tolerance and prints
//! one PASS/FAIL line. The test fails if any criterion fails.
//!
//! Run with `cargo test --release -p dcl-core --test acceptance -- --nocapture`.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use dcl_core::cl::{
    agem_project, examples_for, scheduler_step, scoped_surgery, should_validate, train_step, EmbeddingStrategy,
    Method, OptimizerState, SchedulerConfig, SchedulerState, StepContext, TrainerConfig,
};
use dcl_core::decoding::{greedy_decode, greedy_decode_with, DecodeOptions, SuppressionTarget};
use dcl_core::harness::{
    build_lab, evaluate_language, pretrain_base_model, run_variants, ExperimentConfig, Protocol, Split, Variant,
};
use dcl_core::metrics::{awer, wer, EvalMode, LanguageRole, ResultsTable};
use dcl_core::model::{Example, ModelConfig, ToyMASRModel};
use dcl_core::numerics::params::LayoutEntry;
use dcl_core::numerics::{finite_difference_check, flatten_grads, GradientVector, GroupSet, Tensor};
use dcl_core::tasks::{build_replay_buffer, TaskDataset};
use dcl_core::vocab::{TokenId, Vocab};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn reference_config() -> ExperimentConfig {
    ExperimentConfig::load(&workspace_root().join("configs/reference.json")).expect("reference config")
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

// ---------------------------------------------------------------- 1

fn gradient_correctness() -> Outcome {
    let t0 = Instant::now();
    let mut vocab = Vocab::build(&['a', 'b', 'c', 'd', 'e'], &["L1", "L2"]).map_err(|e| e.to_string())?;
    let cfg = ModelConfig {
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        feat_dim: 4,
        max_len: 8,
        vocab_size: vocab.len(),
        seed: 17,
    };
    let mut model = ToyMASRModel::new(cfg).unwrap();
    model.extend_for_language(&mut vocab, "L3").unwrap();
    assert_eq!(vocab.len(), 12);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut example = |lang: &str, text: &[TokenId], frames: usize| {
        let lid = vocab.lid_id(lang).unwrap();
        let feats: Vec<f64> = (0..frames * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut input = vec![vocab.bos_id(), lid];
        input.extend_from_slice(text);
        let mut target = vec![lid];
        target.extend_from_slice(text);
        target.push(vocab.eos_id());
        Example {
            features: Tensor::new(vec![frames, 4], feats).unwrap(),
            input,
            target,
            language: lang.into(),
        }
    };
    let exs = [example("L1", &[0, 5, 3, 1], 3), example("L3", &[2, 4], 2)];
    let batch: Vec<&Example> = exs.iter().collect();
    let pad = vocab.pad_id();
    model.loss_and_grads(&batch, pad).unwrap();
    let template = model.clone();
    let mut params = model.params().to_vec();
    let report = finite_difference_check(
        &mut params,
        |ps| {
            let mut m = template.clone();
            m.params_mut().clone_from_slice(ps);
            m.mean_loss(&batch, pad)
        },
        1e-5,
        1e-4,
    )
    .unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let encoder_zero = model.encoder_param().grad.data().iter().all(|&g| g == 0.0);
    check(
        report.passed() && report.max_rel_error() < 1e-4 && secs < 30.0 && encoder_zero,
        format!(
            "max rel error {:.2e} over {} parameters, {secs:.1}s",
            report.max_rel_error(),
            report.params.len()
        ),
    )
}

// ---------------------------------------------------------------- 2

fn vector(data: Vec<f64>) -> GradientVector {
    let len = data.len();
    GradientVector {
        scope: GroupSet::decoder_layers(),
        data,
        layout: vec![LayoutEntry {
            name: "g".into(),
            offset: 0,
            len,
        }],
    }
}

/// Solves `m x = b` by Gaussian elimination with partial pivoting.
fn solve(mut m: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| m[i][c].abs().total_cmp(&m[j][c].abs())).unwrap();
        m.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = m[r][c] / m[c][c];
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|k| m[r][k] * x[k]).sum();
        x[r] = (b[r] - s) / m[r][r];
    }
    x
}

/// `argmin ||x - g||^2  s.t. <x, a> >= 0`: the unconstrained optimum when
/// feasible, otherwise the equality-constrained KKT solution.
fn qp_oracle(g: &[f64], a: &[f64]) -> Vec<f64> {
    let d: f64 = g.iter().zip(a).map(|(x, y)| x * y).sum();
    if d >= 0.0 {
        return g.to_vec();
    }
    let n = g.len();
    let mut m = vec![vec![0.0; n + 1]; n + 1];
    for i in 0..n {
        m[i][i] = 1.0;
        m[i][n] = a[i];
        m[n][i] = a[i];
    }
    let mut rhs = g.to_vec();
    rhs.push(0.0);
    solve(m, rhs)[..n].to_vec()
}

fn agem_projection_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut worst_dev, mut worst_dot) = (0.0f64, f64::INFINITY);
    let mut identical = true;
    let mut conflicts = 0;
    let mut trials = 0;
    for &dim in &[2usize, 5, 10] {
        for _ in 0..1000 {
            let mut draw = || -> Vec<f64> { (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect() };
            let (g, a) = (draw(), draw());
            let out = agem_project(&vector(g.clone()), &vector(a.clone())).unwrap();
            let want = qp_oracle(&g, &a);
            let dev = out.data.iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            worst_dev = worst_dev.max(dev);
            let dot: f64 = out.data.iter().zip(&a).map(|(x, y)| x * y).sum();
            worst_dot = worst_dot.min(dot);
            let before: f64 = g.iter().zip(&a).map(|(x, y)| x * y).sum();
            if before >= 0.0 {
                identical &= out.data.iter().zip(&g).all(|(x, y)| x.to_bits() == y.to_bits());
            } else {
                conflicts += 1;
            }
            trials += 1;
        }
    }
    check(
        worst_dev <= 1e-10 && worst_dot >= -1e-12 && identical && conflicts > 0,
        format!(
            "{trials} pairs, max deviation {worst_dev:.1e}, min <g',a> {worst_dot:.1e}, {conflicts} conflicts, feasible bit-identical {identical}"
        ),
    )
}

// ---------------------------------------------------------------- shared small setup

struct Small {
    cfg: ExperimentConfig,
    model: ToyMASRModel,
    vocab: Vocab,
    new_train: Vec<Example>,
    old: Vec<TaskDataset>,
    new_ds: TaskDataset,
}

fn small_setup(seed: u64) -> Small {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.data.n_train = 60;
    cfg.data.n_val = 8;
    cfg.data.n_test = 8;
    cfg.model.d_model = 16;
    cfg.model.d_ff = 32;
    let lab = build_lab(&cfg).unwrap();
    let mut vocab = lab.vocab.clone();
    let mut model = ToyMASRModel::new(cfg.model_config(vocab.len())).unwrap();
    model.extend_for_language(&mut vocab, "N1").unwrap();
    let new_ds = lab.dataset("N1").unwrap().clone();
    Small {
        new_train: examples_for(&new_ds.train, &vocab).unwrap(),
        old: vec![lab.dataset("L1").unwrap().clone(), lab.dataset("L2").unwrap().clone()],
        new_ds,
        cfg,
        model,
        vocab,
    }
}

// ---------------------------------------------------------------- 3

fn scoped_surgery_contract() -> Outcome {
    let Small {
        mut model,
        vocab,
        new_train,
        old,
        ..
    } = small_setup(3);
    let replay_pool: Vec<Example> = old.iter().flat_map(|d| examples_for(&d.train, &vocab).unwrap()).collect();
    let scope = GroupSet::decoder_layers();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let pad = vocab.pad_id();
    let (mut projected, mut mismatches) = (0, 0);
    let (te, pe) = (model.token_embedding_index(), 2usize);
    assert_eq!(model.params()[pe].name(), model.positional_embedding().name());
    for _ in 0..100 {
        let pick = |pool: &[Example], rng: &mut ChaCha8Rng| -> Vec<usize> {
            (0..4).map(|_| rng.random_range(0..pool.len())).collect()
        };
        let ri = pick(&replay_pool, &mut rng);
        let ni = pick(&new_train, &mut rng);
        let replay: Vec<&Example> = ri.iter().map(|&i| &replay_pool[i]).collect();
        let batch: Vec<&Example> = ni.iter().map(|&i| &new_train[i]).collect();
        model.zero_grads();
        model.accumulate_group(&replay, pad, 1.0).unwrap();
        let reference = flatten_grads(model.params(), scope).unwrap();
        model.zero_grads();
        model.accumulate_group(&batch, pad, 1.0).unwrap();
        let before: Vec<Vec<u64>> = [te, pe]
            .iter()
            .map(|&i| model.params()[i].grad.data().iter().map(|x| x.to_bits()).collect())
            .collect();
        let report = scoped_surgery(&mut model, &reference, scope).unwrap();
        projected += report.projected as usize;
        for (k, &i) in [te, pe].iter().enumerate() {
            let after: Vec<u64> = model.params()[i].grad.data().iter().map(|x| x.to_bits()).collect();
            mismatches += (after != before[k]) as usize;
        }
        model.sgd_step(0.05);
    }
    check(
        mismatches == 0 && projected > 0,
        format!("100 steps, {projected} projected, {mismatches} embedding gradient mismatches"),
    )
}

// ---------------------------------------------------------------- 4

fn partial_embedding_freeze() -> Outcome {
    let mut details = Vec::new();
    let mut ok = true;
    for method in [Method::AgemM, Method::ErM] {
        let Small {
            mut model,
            vocab,
            new_train,
            old,
            new_ds,
            cfg,
        } = small_setup(4);
        let trainer = TrainerConfig {
            lr0: 0.1,
            ..cfg.trainer_for(method)
        };
        assert_eq!(trainer.embedding_strategy, EmbeddingStrategy::PartialUpdate);
        let olds: Vec<&TaskDataset> = old.iter().collect();
        let buffer = build_replay_buffer(&olds, 0.5, 1).unwrap();
        let used = vocab.used_token_set(&new_ds.train_targets()).unwrap();
        let frozen: Vec<TokenId> = (0..vocab.len()).filter(|t| !used.contains(*t)).collect();
        let before = model.token_embedding().value.clone();
        let ctx = StepContext {
            pad_id: vocab.pad_id(),
            embedding: model.token_embedding_index(),
            used_tokens: &used,
        };
        let mut opt = OptimizerState::new(trainer.optimizer);
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..100 {
            let batch: Vec<&Example> = (0..4).map(|_| &new_train[rng.random_range(0..new_train.len())]).collect();
            let samples: Vec<_> = buffer.sample_batch(4, &mut rng).unwrap().into_iter().cloned().collect();
            let replay = examples_for(&samples, &vocab).unwrap();
            let refs: Vec<&Example> = replay.iter().collect();
            train_step(&mut model, &batch, Some(&refs), &trainer, ctx, trainer.lr0, &mut opt).unwrap();
        }
        let after = &model.token_embedding().value;
        let changed_frozen = frozen
            .iter()
            .filter(|&&t| {
                after.row(t).iter().zip(before.row(t)).any(|(a, b)| a.to_bits() != b.to_bits())
            })
            .count();
        let moved_used = (0..vocab.len()).filter(|&t| used.contains(t) && after.row(t) != before.row(t)).count();
        ok &= changed_frozen == 0 && !frozen.is_empty() && moved_used > 0;
        details.push(format!(
            "{method}: {} frozen rows, {changed_frozen} changed, {moved_used} used rows moved",
            frozen.len()
        ));
    }
    check(ok, details.join("; "))
}

// ---------------------------------------------------------------- 5a, 5b

fn suppression_property_and_crafted() -> Outcome {
    // a random model whose LID rows are inflated so that LIDs win often
    let Small { mut model, vocab, .. } = small_setup(5);
    let te = model.token_embedding_index();
    let lids: Vec<TokenId> = vocab.lid_ids().map(|(_, i)| i).collect();
    for &l in &lids {
        model.params_mut()[te].value.row_mut(l).iter_mut().for_each(|x| *x *= 6.0);
    }
    let feat_dim = model.config().feat_dim;
    let max_len = model.config().max_len + 1;
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let (mut violations, mut unsuppressed_lids) = (0, 0);
    for i in 0..1000 {
        let frames = rng.random_range(3..=8);
        let feats: Vec<f64> = (0..frames * feat_dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let x = Tensor::new(vec![frames, feat_dim], feats).unwrap();
        let h = greedy_decode(&model, &x, &DecodeOptions::agnostic(true, max_len), &vocab).unwrap();
        violations += h.tokens.iter().skip(2).filter(|&&t| vocab.is_lid(t)).count();
        if i < 200 {
            let raw = greedy_decode(&model, &x, &DecodeOptions::agnostic(false, max_len), &vocab).unwrap();
            unsuppressed_lids += raw.tokens.iter().skip(2).filter(|&&t| vocab.is_lid(t)).count();
        }
    }

    // crafted decoder: prefers the new LID over "b", then degenerates
    let mut v = Vocab::build(&['a', 'b', 'c'], &["L1"]).unwrap();
    v.add_language_token("L2").unwrap();
    let (a, b, c, sp) = (
        v.char_id('a').unwrap(),
        v.char_id('b').unwrap(),
        v.char_id('c').unwrap(),
        v.space_id(),
    );
    let l2 = v.lid_id("L2").unwrap();
    let n = v.len();
    let eos = v.eos_id();
    let row = |hot: TokenId, lid: bool| {
        let mut r = vec![0.0; n];
        r[hot] = 5.0;
        if lid {
            r[l2] = 9.0;
        }
        r
    };
    let mut scripted = |prefix: &[TokenId], _: Option<&str>| -> dcl_core::Result<Vec<f64>> {
        let t = &prefix[2..];
        Ok(if t.contains(&l2) {
            row(if t.len() >= 6 { eos } else { c }, false)
        } else {
            match t.len() {
                0 => row(a, false),
                1 => row(sp, false),
                2 => row(b, true),
                3 => row(sp, false),
                4 => row(a, false),
                _ => row(eos, false),
            }
        })
    };
    let reference = "a b a";
    let off = greedy_decode_with(&mut scripted, &v, &DecodeOptions::aware("L1", false, 12)).unwrap();
    let on = greedy_decode_with(&mut scripted, &v, &DecodeOptions::aware("L1", true, 12)).unwrap();
    let mid_lid = off.tokens[2..].contains(&l2);
    let clean = on.tokens[2..].iter().all(|&t| !v.is_lid(t)) && on.text == reference;
    check(
        violations == 0 && unsuppressed_lids > 0 && mid_lid && clean,
        format!(
            "(a) 1000 agnostic decodes, {violations} LIDs at position >= 2 (unsuppressed control: {unsuppressed_lids}); \
             (b) without: {:?}, with: {:?}",
            off.text, on.text
        ),
    )
}

// ---------------------------------------------------------------- 6a

fn plateau_schedule() -> Outcome {
    let lr0 = 0.1;
    let spe = 320;
    let mut parts = Vec::new();
    let mut ok = true;
    for n in [1usize, 4, 32] {
        let mut s = SchedulerState::new(lr0, &SchedulerConfig::default());
        for k in 0..spe {
            if should_validate(k, spe, n).unwrap() {
                scheduler_step(&mut s, 1.0).unwrap();
            }
        }
        let want = lr0 * 0.5f64.powi(n as i32 - 1);
        ok &= s.current_lr.to_bits() == want.to_bits() && s.validations_seen == n;
        parts.push(format!("split-{n}: {:e} (expected {:e})", s.current_lr, want));
    }
    check(ok, parts.join(", "))
}

// ---------------------------------------------------------------- 9

/// Minimum edits over every edit script, by exhaustive recursion.
fn brute_edits(r: &[u8], h: &[u8]) -> usize {
    match (r.split_first(), h.split_first()) {
        (None, _) => h.len(),
        (_, None) => r.len(),
        (Some((x, rr)), Some((y, hh))) => {
            let keep = brute_edits(rr, hh) + (x != y) as usize;
            let del = brute_edits(rr, h) + 1;
            let ins = brute_edits(r, hh) + 1;
            keep.min(del).min(ins)
        }
    }
}

fn metrics_arithmetic() -> Outcome {
    let mut seqs: Vec<Vec<u8>> = vec![vec![]];
    let mut frontier = seqs.clone();
    for _ in 0..4 {
        frontier = frontier
            .iter()
            .flat_map(|s| (0..3u8).map(move |w| [s.clone(), vec![w]].concat()))
            .collect();
        seqs.extend(frontier.clone());
    }
    const WORDS: [&str; 3] = ["x", "y", "z"];
    let words = |s: &[u8]| -> Vec<&str> { s.iter().map(|&w| WORDS[w as usize]).collect() };
    let mut mismatches = 0;
    let mut pairs = 0;
    for r in seqs.iter().filter(|s| !s.is_empty()) {
        for h in &seqs {
            let rec = wer(&words(r), &words(h)).unwrap();
            // deletions and insertions must account for the length difference
            let consistent = rec.ref_words == r.len() && rec.ref_words + rec.insertions - rec.deletions == h.len();
            mismatches += (rec.errors() != brute_edits(r, h) || !consistent) as usize;
            pairs += 1;
        }
    }
    let row: BTreeMap<&str, f64> = [("en", 14.56), ("eo", 14.96), ("de", 14.12), ("ia", 19.88)].into_iter().collect();
    let a = awer(&row).unwrap();
    check(
        mismatches == 0 && (a - 15.9).abs() <= 0.05,
        format!("{pairs} word pairs, {mismatches} mismatches; ER-M aware AWER {a:.2} vs printed 15.9"),
    )
}

// ---------------------------------------------------------------- 10

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.data.n_train = 128;
    cfg.data.n_val = 8;
    cfg.data.n_test = 8;
    cfg.model.d_model = 16;
    cfg.model.d_ff = 32;
    cfg.pretrain.epochs = 3;
    cfg.adapt.trainer.epochs = 1;
    cfg.adapt.methods = vec![Method::Ft, Method::Er, Method::AgemM];
    let mut sequential = cfg.clone();
    sequential.adapt.new_languages = vec!["N1".into(), "N2".into()];
    let mut details = Vec::new();
    let mut ok = true;
    for (cmd, run_cfg, files) in [
        ("run-sequential", &sequential, vec!["results.csv", "summary.csv", "stages.csv"]),
        ("ablate", &cfg, vec!["results.csv", "summary.csv", "ablation.csv"]),
    ] {
        let cfg_path = tmp.path().join(format!("{cmd}.json"));
        std::fs::write(&cfg_path, run_cfg.to_json().unwrap()).unwrap();
        let mut runs = Vec::new();
        for i in 0..2 {
            let out = tmp.path().join(format!("{cmd}-{i}"));
            let status = Command::new(env!("CARGO_BIN_EXE_dcl"))
                .arg(cmd)
                .arg("--config")
                .arg(&cfg_path)
                .args(["--seed", "7", "--out"])
                .arg(&out)
                .output()
                .unwrap();
            if !status.status.success() {
                return Err(format!("{cmd} failed: {}", String::from_utf8_lossy(&status.stderr)));
            }
            runs.push(out);
        }
        for f in files {
            let a = std::fs::read(runs[0].join(f)).unwrap();
            let b = std::fs::read(runs[1].join(f)).unwrap();
            let same = a == b && !a.is_empty();
            ok &= same;
            details.push(format!("{cmd}/{f} {}", if same { "identical" } else { "DIFFERS" }));
        }
    }
    check(ok, details.join(", "))
}

// ---------------------------------------------------------------- 5c, 6b, 7, 8

#[derive(Default)]
struct SeedNumbers {
    aware: BTreeMap<String, (f64, f64)>,
    agnostic: BTreeMap<String, (f64, f64)>,
}

struct ReferenceRuns {
    seeds: Vec<SeedNumbers>,
    suppression_equal: Vec<(u64, bool, String)>,
    lr_monotone: bool,
    lr_traces: usize,
    secs: f64,
}

const ER_SPLIT_1: &str = "ER split-1";

fn reference_runs() -> ReferenceRuns {
    let t0 = Instant::now();
    let base_cfg = reference_config();
    let mut seeds = Vec::new();
    let mut suppression_equal = Vec::new();
    let mut lr_monotone = true;
    let mut lr_traces = 0;
    for seed in 0..5u64 {
        let mut cfg = base_cfg.clone();
        cfg.seed = seed;
        let lab = build_lab(&cfg).unwrap();
        let base = pretrain_base_model(&cfg, &lab).unwrap();
        lr_monotone &= base.summary.history.windows(2).all(|w| w[1].lr <= w[0].lr);
        lr_traces += 1;
        let protocol = Protocol::pair(&cfg).unwrap();

        // unadapted checkpoint with and without suppression
        let mut none_model = base.model.clone();
        let mut none_vocab = base.vocab.clone();
        for (l, _) in &protocol.eval {
            if none_vocab.lid_id(l).is_none() {
                none_model.extend_for_language(&mut none_vocab, l).unwrap();
            }
        }
        for l in &cfg.pretrain.languages {
            for mode in [EvalMode::Aware, EvalMode::Agnostic] {
                let ds = lab.dataset(l).unwrap();
                let run = |s| {
                    evaluate_language(&none_model, &none_vocab, ds, Split::Test, mode, s, SuppressionTarget::AllLid, None)
                        .unwrap()
                };
                let (off, on) = (run(false), run(true));
                suppression_equal.push((
                    seed,
                    off == on,
                    format!("{l}/{mode}: {:.2} vs {:.2}", 100.0 * off.wer(), 100.0 * on.wer()),
                ));
            }
        }

        let mut variants = vec![Variant::none("None", false)];
        for m in Method::ALL {
            let t = cfg.trainer_for(m);
            let s = t.suppression_enabled;
            variants.push(Variant::trained(m.as_str(), t, s));
        }
        let er1 = TrainerConfig {
            val_split_n: 1,
            ..cfg.trainer_for(Method::Er)
        };
        variants.push(Variant::trained(ER_SPLIT_1, er1, false));
        let outcomes = run_variants(&cfg, &lab, &base, &protocol, &variants).unwrap();
        let mut table = ResultsTable::new();
        for (l, r) in &protocol.eval {
            table.set_role(l, *r);
        }
        let mut nums = SeedNumbers::default();
        for o in &outcomes {
            for r in &o.rows {
                table.insert(r.clone());
            }
            if !o.history.is_empty() {
                lr_monotone &= o.history.windows(2).all(|w| w[1].lr <= w[0].lr);
                lr_traces += 1;
            }
        }
        for v in &variants {
            for (mode, slot) in [(EvalMode::Aware, &mut nums.aware), (EvalMode::Agnostic, &mut nums.agnostic)] {
                let old = table.awer_for(&v.label, mode, LanguageRole::Old).unwrap();
                let new = table.awer_for(&v.label, mode, LanguageRole::New).unwrap();
                slot.insert(v.label.clone(), (old, new));
            }
        }
        let fmt = |m: &BTreeMap<String, (f64, f64)>| {
            m.iter()
                .map(|(k, (o, n))| format!("{k} {:.1}/{:.1}", 100.0 * o, 100.0 * n))
                .collect::<Vec<_>>()
                .join(", ")
        };
        eprintln!("  seed {seed} old/new aware: {}", fmt(&nums.aware));
        eprintln!("  seed {seed} old/new agnostic: {}", fmt(&nums.agnostic));
        seeds.push(nums);
    }
    ReferenceRuns {
        seeds,
        suppression_equal,
        lr_monotone,
        lr_traces,
        secs: t0.elapsed().as_secs_f64(),
    }
}

impl ReferenceRuns {
    fn med(&self, label: &str, new: bool) -> f64 {
        median(
            self.seeds
                .iter()
                .map(|s| {
                    let (o, n) = s.aware[label];
                    if new {
                        n
                    } else {
                        o
                    }
                })
                .collect(),
        )
    }
}

fn null_suppression_effect(r: &ReferenceRuns) -> Outcome {
    let bad: Vec<String> = r
        .suppression_equal
        .iter()
        .filter(|(_, eq, _)| !eq)
        .map(|(s, _, d)| format!("seed {s} {d}"))
        .collect();
    let sample = &r.suppression_equal[0].2;
    check(
        bad.is_empty(),
        if bad.is_empty() {
            format!("{} language/mode/seed cells identical, e.g. {sample}", r.suppression_equal.len())
        } else {
            format!("differs: {}", bad.join("; "))
        },
    )
}

fn forgetting_reproduction(r: &ReferenceRuns) -> Outcome {
    let pct = |x: f64| 100.0 * x;
    let none = r.med("None", false);
    let (ft, ft_new) = (r.med("FT", false), r.med("FT", true));
    let er = r.med("ER", false);
    let agem = r.med("AGEM", false);
    let er_m = r.med("ER_M", false);
    let (agem_m, agem_m_new) = (r.med("AGEM_M", false), r.med("AGEM_M", true));
    let checks = [
        (ft - none >= 0.10, format!("FT-None {:.1} pts", pct(ft - none))),
        (er <= 0.5 * ft, format!("ER cuts FT by {:.0}%", 100.0 * (1.0 - er / ft))),
        (agem <= 0.5 * ft, format!("AGEM cuts FT by {:.0}%", 100.0 * (1.0 - agem / ft))),
        (agem_m <= agem, format!("AGEM_M {:.1} <= AGEM {:.1}", pct(agem_m), pct(agem))),
        (er_m <= er, format!("ER_M {:.1} <= ER {:.1}", pct(er_m), pct(er))),
        (
            (agem_m_new - ft_new).abs() <= 0.2 * ft_new,
            format!("AGEM_M new {:.1} vs FT new {:.1}", pct(agem_m_new), pct(ft_new)),
        ),
    ];
    let ok = checks.iter().all(|(b, _)| *b);
    let detail = checks
        .iter()
        .map(|(b, d)| format!("{}{d}", if *b { "" } else { "[x] " }))
        .collect::<Vec<_>>()
        .join("; ");
    check(ok, format!("{detail}; {:.0}s", r.secs))
}

fn validation_interval(r: &ReferenceRuns) -> Outcome {
    let (o1, n1) = (r.med(ER_SPLIT_1, false), r.med(ER_SPLIT_1, true));
    let (o32, n32) = (r.med("ER", false), r.med("ER", true));
    check(
        o32 < o1 && (n32 - n1).abs() <= 0.1 * n1,
        format!(
            "old {:.2} (split-32) vs {:.2} (split-1); new {:.2} vs {:.2}",
            100.0 * o32,
            100.0 * o1,
            100.0 * n32,
            100.0 * n1
        ),
    )
}

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    })
}

#[test]
fn acceptance() {
    let t0 = Instant::now();
    let mut lines: Vec<(String, Outcome)> = Vec::new();
    lines.push(("1 gradient correctness".into(), guarded(gradient_correctness)));
    lines.push(("2 A-GEM projection oracle".into(), guarded(agem_projection_oracle)));
    lines.push(("3 scoped surgery".into(), guarded(scoped_surgery_contract)));
    lines.push(("4 partial embedding freeze".into(), guarded(partial_embedding_freeze)));
    let five_ab = guarded(suppression_property_and_crafted);
    let six_a = guarded(plateau_schedule);
    let reference = catch_unwind(reference_runs);
    let (five_c, six_b, seven, eight) = match &reference {
        Ok(r) => (
            null_suppression_effect(r),
            check(r.lr_monotone, format!("{} real LR traces non-increasing", r.lr_traces)),
            forgetting_reproduction(r),
            validation_interval(r),
        ),
        Err(_) => {
            let e = || Err("reference runs panicked".to_string());
            (e(), e(), e(), e())
        }
    };
    let joined = |a: &Outcome, b: &Outcome| -> Outcome {
        let text = |o: &Outcome| match o {
            Ok(s) | Err(s) => s.clone(),
        };
        let s = format!("{} | {}", text(a), text(b));
        if a.is_ok() && b.is_ok() {
            Ok(s)
        } else {
            Err(s)
        }
    };
    lines.push(("5 suppression".into(), joined(&five_ab, &five_c)));
    lines.push(("6 scheduler".into(), joined(&six_a, &six_b)));
    lines.push(("7 forgetting reproduction".into(), seven));
    lines.push(("8 validation-interval ablation".into(), eight));
    lines.push(("9 metrics arithmetic".into(), guarded(metrics_arithmetic)));
    lines.push(("10 CLI determinism".into(), guarded(cli_determinism)));

    println!();
    for (name, o) in &lines {
        match o {
            Ok(d) => println!("PASS [{name}] {d}"),
            Err(d) => println!("FAIL [{name}] {d}"),
        }
    }
    println!("acceptance wall clock {:.0}s", t0.elapsed().as_secs_f64());
    let failed: Vec<&str> = lines.iter().filter(|(_, o)| o.is_err()).map(|(n, _)| n.as_str()).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
