//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero if any fails.
//!
//! `ACCEPTANCE_ONLY=1,5` restricts the run to the listed criteria.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use seqvpr::aggregation::{netvlad_aggregate, soft_assign};
use seqvpr::attention::{encoder_layer, temporal_encode, window_partition, EncoderLayerParams, WindowPlan, WindowSpec};
use seqvpr::autodiff::{grad_check, Graph, Tensor};
use seqvpr::config::{ModelConfig, RunConfig, TemporalPos, TrainConfig};
use seqvpr::dataset::{generate_world, synthetic_split, Condition, RenderOptions};
use seqvpr::eval::{
    ablation_csv, ablation_variants, count_flops, recall_at_k, render_scenario, retrieve_topk, run_ablation,
    score_apply_macs, split_recall, train_and_evaluate, AblationAxis, RetrievalResult, SeqTag, SplitSequences,
    Threshold, METRICS_HEADER,
};
use seqvpr::model::SequenceModel;
use seqvpr::params::{ParamGroup, ParamStore};
use seqvpr::training::{sequence_triplet_loss, train};

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-scale..scale))
}

// 1: every parameter gradient of the triplet loss against central differences.
fn gradient_correctness() -> Outcome {
    let cfg = ModelConfig::tiny();
    let mut model = SequenceModel::new(&cfg, 7).map_err(|e| e.to_string())?;
    // a generic parameter point: at init the attention is nearly uniform and
    // many gradients sit at the finite-difference noise floor
    let mut prng = ChaCha8Rng::seed_from_u64(70);
    for id in model.store.ids().collect::<Vec<_>>() {
        let n = model.store.get(id).len();
        let v: Vec<f64> = (0..n).map(|_| prng.random_range(-0.3..0.3)).collect();
        model.store.assign(id, &v).map_err(|e| e.to_string())?;
    }
    // continuous random frames: rendered frames are blocky and quantized, which
    // puts exact max-pool ties (non-differentiable points) under the probe
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut seq = || -> Vec<Tensor> {
        (0..cfg.seq_len)
            .map(|_| rand_tensor(&mut rng, &[3, cfg.image_height, cfg.image_width], 1.0))
            .collect()
    };
    let anchor = seq();
    let positive = seq();
    let negatives: Vec<Vec<Tensor>> = (0..5).map(|_| seq()).collect();
    // smallest margin keeping every hinge at least 0.05 inside its active side:
    // away from the kink, and a small loss keeps finite-difference roundoff low
    let desc = |f: &[Tensor]| model.describe(f).map_err(|e| e.to_string());
    let a = desc(&anchor)?;
    let dist = |v: &[f64]| a.iter().zip(v).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let dap = dist(&desc(&positive)?);
    let mut margin = 0.1f64;
    for n in &negatives {
        margin = margin.max(dist(&desc(n)?) - dap + 0.05);
    }

    let mut params = model.store.tensors().to_vec();
    let report = grad_check(&mut params, 1e-5, 1e-6, |g, _vars| {
        sequence_triplet_loss(g, &model, &anchor, &positive, &negatives, margin)
    })
    .map_err(|e| e.to_string())?;
    let msg = format!(
        "margin {margin:.3}, max relative error {:.3e} over {} parameters (worst: {} element {}, analytic {:.3e}, numeric {:.3e})",
        report.max_rel_err,
        report.checked,
        model.store.name(model.store.ids().nth(report.worst.0).unwrap()),
        report.worst.1,
        report.analytic,
        report.numeric
    );
    check(
        report.checked == model.store.num_scalars(),
        "not every parameter was checked",
    )?;
    check(report.max_rel_err < 1e-4, msg.clone())?;
    Ok(msg)
}

// 2: window partition against an exhaustive enumerator, with coverage.
fn window_oracle() -> Outcome {
    let frames = 2;
    let mut cases = 0;
    for grid in 4..=24usize {
        for m in [2usize, 4, 6, 8] {
            if m > grid {
                continue;
            }
            for s in 1..=m {
                let spec = WindowSpec {
                    m,
                    stride: s,
                    rows: grid,
                    cols: grid,
                    frames,
                };
                let got = window_partition(&spec).map_err(|e| e.to_string())?;
                // every start in 0..=grid-m that is a stride multiple or the last one
                let starts: Vec<usize> = (0..=grid - m).filter(|&p| p % s == 0 || p == grid - m).collect();
                let n = grid * grid;
                let mut want = Vec::new();
                for &r0 in &starts {
                    for &c0 in &starts {
                        let mut w = Vec::new();
                        for t in 0..frames {
                            for r in r0..r0 + m {
                                for c in c0..c0 + m {
                                    w.push(t * n + r * grid + c);
                                }
                            }
                        }
                        want.push(w);
                    }
                }
                check(got == want, format!("grid {grid} m {m} s {s}: partition differs"))?;
                let mut covered = vec![false; n * frames];
                got.iter().flatten().for_each(|&i| covered[i] = true);
                check(
                    covered.iter().all(|&c| c),
                    format!("grid {grid} m {m} s {s}: uncovered token"),
                )?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} (grid, m, s) cases match and cover every token"))
}

// 3: one full-grid window with zero relative tables is full attention.
fn degenerate_equivalence() -> Outcome {
    let (grid, frames, dim, heads) = (4usize, 3usize, 8usize, 2usize);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let layers: Vec<EncoderLayerParams> = (0..2)
        .map(|i| EncoderLayerParams::init(&mut store, &mut rng, &format!("t{i}"), ParamGroup::Temporal, dim, 4))
        .collect();
    for t in store.tensors_mut() {
        let shape = t.shape().to_vec();
        *t = rand_tensor(&mut rng, &shape, 0.5);
    }
    let n = grid * grid * frames;
    let x = rand_tensor(&mut rng, &[n, dim], 1.0);
    let spec = WindowSpec {
        m: grid,
        stride: grid,
        rows: grid,
        cols: grid,
        frames,
    };
    let plan = WindowPlan::temporal(&spec, dim, heads).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let xv = g.input(&x);
    let lvs: Vec<_> = layers.iter().map(|l| l.bind(&store, &mut g)).collect();
    let zh = g.input(&Tensor::zeros([2 * grid - 1, dim]));
    let zt = g.input(&Tensor::zeros([2 * frames - 1, dim]));
    let rel = vec![(zh, zh, zt); 2];
    let windowed = temporal_encode(&mut g, xv, &lvs, &rel, &plan, 1e-5).map_err(|e| e.to_string())?;
    let mut full = xv;
    for lv in &lvs {
        full = encoder_layer(&mut g, full, lv, heads, 1e-5, &[]).map_err(|e| e.to_string())?;
    }
    let err = g
        .value(windowed)
        .iter()
        .zip(g.value(full))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let msg = format!("max |windowed - full| = {err:.3e} over {n} tokens, 2 layers");
    check(err < 1e-8, msg.clone())?;
    Ok(msg)
}

// 4: NetVLAD soft-assignment, permutation invariance, unit norm, scalar oracle.
fn netvlad_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (m, d, k) = (30usize, 6usize, 5usize);
    let x = rand_tensor(&mut rng, &[m, d], 1.0);
    let c = rand_tensor(&mut rng, &[k, d], 0.5);
    let w = rand_tensor(&mut rng, &[k, d], 2.0);
    let b = rand_tensor(&mut rng, &[k], 1.0);

    let mut worst_sum = 0.0f64;
    for i in 0..m {
        let a = soft_assign(&x.data()[i * d..(i + 1) * d], &w, &b).map_err(|e| e.to_string())?;
        worst_sum = worst_sum.max((a.iter().sum::<f64>() - 1.0).abs());
    }
    check(worst_sum < 1e-12, format!("soft-assignment sum off by {worst_sum:e}"))?;

    let describe = |x: &Tensor| -> Vec<f64> {
        let mut g = Graph::new();
        let (xv, cv, wv, bv) = (g.input(x), g.input(&c), g.input(&w), g.input(&b));
        let out = netvlad_aggregate(&mut g, xv, cv, wv, bv).unwrap();
        g.value(out).to_vec()
    };
    let v = describe(&x);
    let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
    check((norm - 1.0).abs() < 1e-6, format!("descriptor norm {norm}"))?;

    let mut perm: Vec<usize> = (0..m).collect();
    let mut worst_perm = 0.0f64;
    for _ in 0..10 {
        for i in (1..m).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let xp = Tensor::from_fn([m, d], |j| x.data()[perm[j / d] * d + j % d]);
        let vp = describe(&xp);
        worst_perm = v.iter().zip(&vp).map(|(a, b)| (a - b).abs()).fold(worst_perm, f64::max);
    }
    check(
        worst_perm < 1e-9,
        format!("permutation changes descriptor by {worst_perm:e}"),
    )?;

    // scalar oracle on a 3-row, 2-cluster, 2-dim case
    let xs: [[f64; 2]; 3] = [[0.3, -1.2], [0.8, 0.1], [-0.5, 0.4]];
    let cs = [[0.1, 0.2], [-0.3, 0.5]];
    let ws: [[f64; 2]; 2] = [[1.0, -0.5], [0.2, 0.7]];
    let bs: [f64; 2] = [0.1, -0.2];
    let mut vlad = [[0.0f64; 2]; 2];
    for xi in &xs {
        let l0 = ws[0][0] * xi[0] + ws[0][1] * xi[1] + bs[0];
        let l1 = ws[1][0] * xi[0] + ws[1][1] * xi[1] + bs[1];
        let a0 = l0.exp() / (l0.exp() + l1.exp());
        let a = [a0, 1.0 - a0];
        for kk in 0..2 {
            for j in 0..2 {
                vlad[kk][j] += a[kk] * (xi[j] - cs[kk][j]);
            }
        }
    }
    let mut flat = Vec::new();
    for row in &vlad {
        let n = (row[0] * row[0] + row[1] * row[1]).sqrt();
        flat.extend(row.iter().map(|v| v / n));
    }
    let n = flat.iter().map(|v| v * v).sum::<f64>().sqrt();
    let oracle: Vec<f64> = flat.iter().map(|v| v / n).collect();
    let mut g = Graph::new();
    let t = |rows: &[[f64; 2]]| Tensor::new([rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap();
    let (xv, cv, wv) = (g.input(&t(&xs)), g.input(&t(&cs)), g.input(&t(&ws)));
    let bv = g.input(&Tensor::new([2], bs.to_vec()).unwrap());
    let out = netvlad_aggregate(&mut g, xv, cv, wv, bv).map_err(|e| e.to_string())?;
    let err = g
        .value(out)
        .iter()
        .zip(&oracle)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(err < 1e-12, format!("scalar oracle mismatch {err:e}"))?;
    Ok(format!(
        "sum err {worst_sum:.1e}, permutation err {worst_perm:.1e}, norm err {:.1e}, oracle err {err:.1e}",
        (norm - 1.0).abs()
    ))
}

// 5: memorize 8 places seen under the same condition.
fn overfit_trainability() -> Outcome {
    let cfg = ModelConfig::desk();
    // 20 m spacing puts places two steps apart beyond the 25 m negative radius
    let world = generate_world(0, 8, 20.0).map_err(|e| e.to_string())?;
    let day = Condition::preset("day").unwrap();
    let split = synthetic_split(&world, &day, &day, 0.0, 0, &RenderOptions::default()).map_err(|e| e.to_string())?;
    let seqs = SplitSequences::new(&split, &cfg, 1);
    let mut model = SequenceModel::new(&cfg, 0).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        max_epochs: 10_000,
        max_iterations: 500,
        patience: 0,
        loss_target: 0.01,
        ..TrainConfig::default()
    };
    let h = train(&mut model, &seqs, None, &tc).map_err(|e| e.to_string())?;
    let loss = h.epochs.last().map_or(f64::NAN, |e| e.mean_loss);
    let r1 = split_recall(&model, &seqs, 1, Threshold::Radius(10.0)).map_err(|e| e.to_string())?;
    let msg = format!("epoch loss {loss:.5} after {} iterations, Recall@1 {r1}", h.iterations);
    check(h.iterations <= 500 && loss < 0.01 && r1 == 1.0, msg.clone())?;
    Ok(msg)
}

fn desk_run() -> RunConfig {
    let mut run = RunConfig {
        model: ModelConfig::desk(),
        ..RunConfig::default()
    };
    run.train.lr_tokenizer = 1e-3;
    run.train.lr_spatial = 1e-3;
    run.train.lr_netvlad = 1e-3;
    run.train.batch_size = 1;
    run.train.max_epochs = 30;
    run.train.patience = 10;
    run
}

// 6: full relative model beats spatial-only and position-free temporal.
fn generalization_direction() -> Outcome {
    let run = desk_run();
    let variants = ablation_variants(AblationAxis::Pos, &run);
    let seeds = 3u64;
    let data: Vec<_> = (0..seeds)
        .map(|s| render_scenario(&run.scenario, s))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let mean = |name: &str| -> Result<f64, String> {
        let cfg = &variants.iter().find(|(n, _)| n == name).unwrap().1;
        let mut sum = 0.0;
        for (s, d) in data.iter().enumerate() {
            let (r, _, _) = train_and_evaluate(cfg, &run, d, s as u64).map_err(|e| e.to_string())?;
            eprintln!("  {name} seed {s}: R@1 {:.4}", r[0]);
            sum += r[0];
        }
        Ok(sum / seeds as f64)
    };
    let full = mean("full-relative")?;
    let spatial = mean("spatial-only")?;
    let none = mean("temporal-none")?;
    let msg = format!("mean Recall@1 full-relative {full:.4}, spatial-only {spatial:.4}, temporal-none {none:.4}");
    check(full > spatial && full > none, msg.clone())?;
    Ok(msg)
}

// 7: window/stride sweep emits a well-formed CSV.
fn stride_ablation() -> Outcome {
    let run = desk_run();
    let rows = run_ablation(AblationAxis::Window, &run).map_err(|e| e.to_string())?;
    let csv = ablation_csv(&rows);
    let mut lines = csv.lines();
    check(lines.next() == Some(METRICS_HEADER), "bad header")?;
    let body: Vec<&str> = lines.collect();
    check(body.len() == 3, format!("{} rows", body.len()))?;
    let mut best = (String::new(), -1.0);
    for (line, want) in body
        .iter()
        .zip(["window-4x4-stride-2", "window-6x6-stride-3", "window-8x8-stride-4"])
    {
        let f: Vec<&str> = line.split(',').collect();
        check(f.len() == 6 && f[0] == want, format!("malformed row '{line}'"))?;
        let r: Vec<f64> = f[1..4].iter().map(|v| v.parse().unwrap_or(f64::NAN)).collect();
        check(
            r.iter().all(|v| (0.0..=1.0).contains(v)) && r[0] <= r[1] && r[1] <= r[2],
            format!("bad recalls in '{line}'"),
        )?;
        check(
            f[4].parse::<usize>().is_ok() && f[5].parse::<usize>().is_ok(),
            "bad counts",
        )?;
        if r[0] > best.1 {
            best = (want.to_string(), r[0]);
        }
    }
    eprintln!("{csv}");
    Ok(format!(
        "3 well-formed rows; best Recall@1 here: {} ({:.4})",
        best.0, best.1
    ))
}

// 8: closed-form FLOP counts, windowed-vs-full inequality, 384x384 config.
fn flop_accounting() -> Outcome {
    let wide = ModelConfig {
        window: 6,
        window_stride: 3,
        ..ModelConfig::desk()
    };
    let hand: [(ModelConfig, usize, usize, [u64; 4]); 3] = [
        (ModelConfig::tiny(), 16, 16, [94_208, 32_768, 33_792, 2_048]),
        (ModelConfig::desk(), 32, 32, [8_437_760, 5_242_880, 7_618_560, 327_680]),
        (wide, 48, 40, [15_820_800, 11_980_800, 26_035_200, 614_400]),
    ];
    for (cfg, h, w, want) in &hand {
        let r = count_flops(cfg, *h, *w).map_err(|e| e.to_string())?;
        let got = [r.tokenizer, r.spatial, r.temporal, r.aggregation];
        check(got == *want, format!("{h}x{w}: got {got:?}, want {want:?}"))?;
    }

    // windowed (s = m) vs dense attention over all L*N tokens, on the token grid
    let (d, l) = (32usize, 5usize);
    let mut violations = Vec::new();
    let mut checked = 0;
    for grid in 4..=24usize {
        for m in [2usize, 4, 6, 8] {
            if m >= grid {
                continue;
            }
            let starts = (0..=grid - m).filter(|&p| p % m == 0 || p == grid - m).count();
            let windowed = (starts * starts) as u64 * score_apply_macs(m * m * l, d);
            let full = score_apply_macs(grid * grid * l, d);
            checked += 1;
            if windowed >= full {
                violations.push(format!("grid {grid} m {m}: {windowed} >= {full}"));
            }
        }
    }

    let full = count_flops(&ModelConfig::full384(), 384, 384).map_err(|e| e.to_string())?;
    let gmacs = full.total_macs() as f64 / 1e9;
    let rel = (gmacs - 63.74).abs() / 63.74;
    check(
        rel <= 0.15,
        format!("384x384 config {gmacs:.2} GMACs is {:.1}% from 63.74", 100.0 * rel),
    )?;
    check(
        violations.is_empty(),
        format!(
            "windowed >= full in {} of {checked} (grid, m) cases with clamped border windows: {}",
            violations.len(),
            violations.join("; ")
        ),
    )?;
    Ok(format!(
        "3 hand configs exact; windowed < full in all {checked} cases; 384x384 config {gmacs:.2} GMACs ({:.1}% from 63.74)",
        100.0 * rel
    ))
}

// 9: Recall@K against hand counts, and monotone in K.
fn recall_metric() -> Outcome {
    let tag = |x: f64, c: usize| SeqTag {
        tag: seqvpr::dataset::GeoTag::planar(x, 0.0),
        traversal: 0,
        center_index: c,
    };
    let db: Vec<SeqTag> = (0..10).map(|i| tag(10.0 * i as f64, i)).collect();
    let q: Vec<SeqTag> = (0..10).map(|i| tag(10.0 * i as f64 + 4.0, i)).collect();
    let res = |ranked: Vec<Vec<usize>>| RetrievalResult {
        scores: ranked.iter().map(|r| vec![0.0; r.len()]).collect(),
        indices: ranked,
    };
    // query i sits 4 m past db i and 6 m before db i+1
    let ranked = res(vec![
        vec![0, 1, 2],
        vec![2, 1, 0],
        vec![3, 4, 5],
        vec![0, 1, 4],
        vec![5, 6, 7],
        vec![5, 2, 3],
        vec![9, 8, 7],
        vec![1, 2, 3],
        vec![8, 9, 0],
        vec![8, 7, 6],
    ]);
    // hand counts, query by query (q_i matches db_i within 5 m, also db_i+1 within 6 m)
    let plan: [(usize, Threshold, f64); 10] = [
        (1, Threshold::Radius(5.0), 0.3), // q0 q5 q8
        (2, Threshold::Radius(5.0), 0.4), // + q1
        (3, Threshold::Radius(5.0), 0.4), // no further rank-3 hit
        (1, Threshold::Radius(6.0), 0.6), // q0 q1 q2 q4 q5 q8
        (3, Threshold::Radius(6.0), 0.8), // + q3 (db 4), q6 (db 7)
        (1, Threshold::Radius(0.0), 0.0), // every query is 4 m off
        (1, Threshold::Frames(0), 0.3),   // q0 q5 q8
        (1, Threshold::Frames(1), 0.7),   // q0 q1 q2 q4 q5 q8 q9
        (3, Threshold::Frames(0), 0.4),   // + q1
        (3, Threshold::Frames(2), 0.9),   // all but q7
    ];
    for (k, thr, want) in plan {
        let got = recall_at_k(&ranked, &q, &db, k, thr).map_err(|e| e.to_string())?;
        check(
            (got - want).abs() < 1e-12,
            format!("K={k} {thr:?}: got {got}, hand count {want}"),
        )?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for inst in 0..100 {
        let nd = rng.random_range(1..30);
        let nq = rng.random_range(1..10);
        let dim = rng.random_range(2..6);
        let mut rows = |n: usize| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect()
        };
        let dbv = rows(nd);
        let qv = rows(nq);
        let dt: Vec<SeqTag> = (0..nd).map(|i| tag(rng.random_range(0.0..100.0), i)).collect();
        let qt: Vec<SeqTag> = (0..nq).map(|i| tag(rng.random_range(0.0..100.0), i)).collect();
        let r = retrieve_topk(&qv, &dbv, nd).map_err(|e| e.to_string())?;
        let mut last = 0.0;
        for k in 1..=nd {
            let v = recall_at_k(&r, &qt, &dt, k, Threshold::Radius(10.0)).map_err(|e| e.to_string())?;
            check(v >= last, format!("instance {inst}: Recall@{k} {v} < {last}"))?;
            last = v;
        }
    }
    Ok("10 crafted cases match hand counts; monotone in K on 100 random instances".into())
}

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_seqvpr"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "seqvpr {}: {}",
            args.join(" "),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn pipeline(root: &Path, config: &Path) -> Result<Vec<u8>, String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let cfg = config.to_string_lossy().into_owned();
    cli(&[
        "gen",
        "--seed",
        "11",
        "--places",
        "16",
        "--out",
        &p("data"),
        "--condition",
        "dusk",
        "--config",
        &cfg,
    ])?;
    cli(&[
        "train",
        "--data",
        &p("data/train"),
        "--val",
        &p("data/val"),
        "--config",
        &cfg,
        "--out",
        &p("model.ckpt"),
        "--seed",
        "11",
    ])?;
    for side in ["db", "query"] {
        cli(&[
            "extract",
            "--ckpt",
            &p("model.ckpt"),
            "--data",
            &p(&format!("data/test/{side}")),
            "--out",
            &p(&format!("{side}.stvd")),
        ])?;
    }
    cli(&[
        "eval",
        "--query",
        &p("query.stvd"),
        "--db",
        &p("db.stvd"),
        "--radius",
        "10",
        "--k",
        "1,5,10",
        "--out",
        &p("metrics.csv"),
    ])?;
    std::fs::read(root.join("metrics.csv")).map_err(|e| e.to_string())
}

// 10: the CLI pipeline is byte-reproducible.
fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = dir.path().join("run.conf");
    let mut run = RunConfig {
        model: ModelConfig::desk(),
        ..RunConfig::default()
    };
    run.model.temporal_pos = TemporalPos::Relative;
    run.train.max_epochs = 2;
    run.scenario.spacing = 8.0;
    run.scenario.render_height = 32;
    run.scenario.render_width = 32;
    std::fs::write(&config, run.to_text()).map_err(|e| e.to_string())?;
    let a = pipeline(&dir.path().join("a"), &config)?;
    let b = pipeline(&dir.path().join("b"), &config)?;
    let text = String::from_utf8_lossy(&a).into_owned();
    check(text.starts_with(METRICS_HEADER), format!("unexpected metrics '{text}'"))?;
    check(a == b, "metrics CSV bytes differ between runs")?;
    Ok(format!(
        "identical metrics ({} bytes): {}",
        a.len(),
        text.lines().nth(1).unwrap_or("")
    ))
}

fn main() -> ExitCode {
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradient correctness", gradient_correctness),
        (2, "window oracle", window_oracle),
        (3, "degenerate equivalence", degenerate_equivalence),
        (4, "NetVLAD properties", netvlad_properties),
        (5, "overfit trainability", overfit_trainability),
        (6, "generalization direction", generalization_direction),
        (7, "stride ablation sanity", stride_ablation),
        (8, "FLOP accounting", flop_accounting),
        (9, "Recall@K metric", recall_metric),
        (10, "reproducibility", reproducibility),
    ];
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    // libtest flags such as --nocapture are accepted and ignored
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() {
        // `cargo test <filter>` for unrelated names: nothing to run here
        return ExitCode::SUCCESS;
    }
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, f) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(msg) => println!("criterion {id} ({name}): PASS in {secs:.1}s: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("criterion {id} ({name}): FAIL in {secs:.1}s: {msg}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
