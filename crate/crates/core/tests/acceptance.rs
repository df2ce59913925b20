//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::process::Command;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mtdnet::autodiff::gradcheck::{check_against, finite_diff_check, CheckOptions, GradCheckReport};
use mtdnet::autodiff::ParamStore;
use mtdnet::checkpoint::Checkpoint;
use mtdnet::evaluation::{self, ScoreMatrix};
use mtdnet::experiment::{self, AblationSetup, CrossSetup};
use mtdnet::losses::{self, PairLabel};
use mtdnet::network::{self, init_params, ForwardMode, NetConfig, Network, Variant};
use mtdnet::tensor::{numel, Tensor};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_image(cfg: &NetConfig, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = numel(&cfg.input_shape);
    Tensor::new(cfg.input_shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn train_net(cfg: &NetConfig, seed: u64) -> Network<f64> {
    let mut net = Network::build(cfg, ForwardMode::TrainTriplet, init_params(cfg, seed).unwrap()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let imgs: Vec<_> = (0..3).map(|_| random_image(cfg, &mut rng)).collect();
    net.forward_triplet(&imgs[0], &imgs[1], &imgs[2]).unwrap();
    net
}

fn summarize(name: &str, r: &GradCheckReport) -> Result<String, String> {
    let kinks: usize = r.params.iter().map(|p| p.kink_skipped).sum();
    let checked: usize = r.params.iter().map(|p| p.checked).sum();
    ensure(
        r.passed() && r.max_rel_err() < 1e-4,
        format!("{name}: max rel err {:.3e}, flagged {:?}", r.max_rel_err(), r.flagged()),
    )?;
    Ok(format!("{name} {:.1e} ({checked} probes, {kinks} kinks)", r.max_rel_err()))
}

fn gradients() -> Outcome {
    let t0 = Instant::now();
    let opts = CheckOptions::default();
    let mut cfg = NetConfig::desk();
    // Margin large enough that the triplet hinge is open, so both losses
    // carry gradient.
    cfg.loss.alpha = 10.0;
    let mut parts = Vec::new();

    let (full, terms) = network::gradcheck_network(&cfg, 0, &opts).map_err(|e| e.to_string())?;
    ensure(terms.triplet > Some(0.0) && terms.classification > Some(0.0), "a loss term is inactive")?;
    parts.push(summarize("combined", &full)?);

    let mut net = train_net(&cfg, 2);
    let h = net.handles().clone();
    ensure(net.graph().scalar(h.triplet.unwrap()) > 0.0, "triplet hinge inactive")?;
    for (name, node) in [("triplet", h.triplet.unwrap()), ("classification", h.cls_total.unwrap())] {
        let g = net.graph().backward(node).map_err(|e| e.to_string())?;
        let r = check_against(net.graph_mut(), node, &g, &opts).map_err(|e| e.to_string())?;
        parts.push(summarize(name, &r)?);
    }

    // Contrastive loss on the FC2 response against a fixed partner, for
    // both pair labels (the negative one inside the margin).
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (y, margin) in [(PairLabel::Positive, 1.0), (PairLabel::Negative, 1e3)] {
        let mut net = Network::<f64>::build(&cfg, ForwardMode::TestPair, init_params(&cfg, 3).unwrap()).unwrap();
        let (a, b) = (random_image(&cfg, &mut rng), random_image(&cfg, &mut rng));
        net.joint_feature_fc2(&a, &b).unwrap();
        let fc2 = net.handles().fc2[0];
        let d = net.graph().shape(fc2).to_vec();
        let g = net.graph_mut();
        let other = g.input("partner", &d).unwrap();
        let partner = Tensor::new(d.clone(), (0..d[0]).map(|_| rng.random_range(0.0..0.5)).collect()).unwrap();
        g.set_input(other, &partner).unwrap();
        let loss = losses::contrastive_node(g, fc2, other, y, margin).unwrap();
        let r = finite_diff_check(g, loss, &opts).map_err(|e| e.to_string())?;
        parts.push(summarize(&format!("contrastive(y={})", y.as_u8()), &r)?);
    }

    let out = Command::new(env!("CARGO_BIN_EXE_mtdnet"))
        .args(["gradcheck", "--preset", "desk"])
        .output()
        .map_err(|e| e.to_string())?;
    let stdout = String::from_utf8_lossy(&out.stdout);
    ensure(
        out.status.success() && stdout.contains("max rel err < 1e-4"),
        format!("cli gradcheck: {stdout}"),
    )?;
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    Ok(format!("{}; cli exit 0; {secs:.1}s", parts.join(", ")))
}

fn loss_suite() -> Outcome {
    let t = |v: &[f64]| Tensor::<f64>::new(vec![v.len()], v.to_vec()).unwrap();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9;
    let a = t(&[0.0, 0.0]);
    // Zero: negative far away. Active: positive farther than negative.
    ensure(close(losses::triplet_loss(&a, &t(&[0.1, 0.0]), &t(&[2.0, 0.0]), 1.0).unwrap(), 0.0), "triplet zero case")?;
    ensure(close(losses::triplet_loss(&a, &t(&[1.0, 1.0]), &t(&[0.5, 0.0]), 1.0).unwrap(), 2.75), "triplet active case")?;
    let p = t(&[0.3, -0.7]);
    for alpha in [0.0, 0.25, 1.0, 3.5] {
        ensure(close(losses::triplet_loss(&a, &p, &p, alpha).unwrap(), alpha), "alpha offset identity")?;
    }
    let mut xnor = 0;
    for (x, y, want) in [(0u8, 0u8, 1u8), (0, 1, 0), (1, 0, 0), (1, 1, 1)] {
        let got = losses::xnor_label(PairLabel::from_u8(x).unwrap(), PairLabel::from_u8(y).unwrap());
        xnor += usize::from(got.as_u8() == want);
    }
    ensure(xnor == 4, format!("xnor {xnor}/4"))?;
    let c = |x: &[f64], y: PairLabel| losses::contrastive_loss(&t(&[0.0, 0.0]), &t(x), y, 1.0).unwrap();
    ensure(close(c(&[0.0, 0.0], PairLabel::Positive), 0.0), "contrastive y=1 d=0")?;
    ensure(close(c(&[1.2, 0.0], PairLabel::Negative), 0.0), "contrastive y=0 beyond margin")?;
    let v = c(&[0.4, 0.0], PairLabel::Negative);
    ensure(close(v, 0.18), format!("contrastive y=0 m=1 d=0.4: {v}"))?;
    let ce = losses::classification_loss(&t(&[0.5, 0.5]), PairLabel::Positive).unwrap();
    ensure(close(ce, std::f64::consts::LN_2), format!("cross-entropy at uniform {ce}"))?;
    Ok(format!("triplet zero/active/alpha, xnor 4/4, contrastive 0/0/{v:.12}, ce {ce:.12}"))
}

fn shapes() -> Outcome {
    let cfg = NetConfig::paper();
    let mut zero = ParamStore::new();
    for (name, shape) in cfg.param_shapes().map_err(|e| e.to_string())? {
        zero.insert(name, Tensor::<f32>::zeros(&shape)).unwrap();
    }
    let mut net = Network::build(&cfg, ForwardMode::TrainTriplet, zero).map_err(|e| e.to_string())?;
    let img = Tensor::<f32>::full(&cfg.input_shape, 0.5);
    net.forward_triplet(&img, &img, &img).map_err(|e| e.to_string())?;
    let h = net.handles().clone();
    let g = net.graph();
    let all = |ids: &[usize], want: &[usize]| ids.iter().all(|&i| g.shape(i) == want && g.value(i).shape() == want);
    ensure(all(&h.trunk, &[256, 13, 13]), "trunk output")?;
    ensure(all(&h.joint, &[512, 13, 13]), "joint maps")?;
    ensure(all(&h.embeddings, &[512]), "embedding")?;
    ensure(all(&h.probs, &[2]), "softmax")?;
    Ok("trunk [256,13,13], joint [512,13,13], embedding 512, softmax 2".into())
}

/// Sort-based oracle with the match placed after every tied gallery item.
fn oracle_cmc(scores: &[Vec<f64>], matches: &[usize]) -> Vec<f64> {
    let g = scores[0].len();
    let mut hits = vec![0usize; g];
    for (row, &m) in scores.iter().zip(matches) {
        let mut order: Vec<usize> = (0..g).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap()
                .then_with(|| (a == m).cmp(&(b == m)))
        });
        let rank = order.iter().position(|&i| i == m).unwrap();
        for h in &mut hits[rank..] {
            *h += 1;
        }
    }
    hits.iter().map(|&h| h as f64 / scores.len() as f64).collect()
}

fn cmc_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut with_ties = 0;
    for case in 0..200 {
        let q = rng.random_range(1..=30);
        let g = rng.random_range(q..=40);
        let levels = [2, 3, 5, 50, 1_000_000][case % 5];
        let scores: Vec<Vec<f64>> = (0..q)
            .map(|_| (0..g).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect())
            .collect();
        let mut matches: Vec<usize> = (0..g).collect();
        for i in 0..q {
            let j = rng.random_range(i..g);
            matches.swap(i, j);
        }
        matches.truncate(q);
        let tied = scores.iter().zip(&matches).any(|(r, &m)| r.iter().enumerate().any(|(i, &s)| i != m && s == r[m]));
        with_ties += usize::from(tied);
        let got = evaluation::cmc(&ScoreMatrix::new(scores.clone(), matches.clone()).map_err(|e| e.to_string())?);
        ensure(got.accuracies == oracle_cmc(&scores, &matches), format!("matrix {case} ({q}x{g}) differs"))?;
    }
    Ok(format!("200/200 exact ({with_ties} with ties on the match)"))
}

fn case_study() -> Outcome {
    let t0 = Instant::now();
    let cs = evaluation::threshold_ranking_case_study().map_err(|e| e.to_string())?;
    let lib = t0.elapsed().as_secs_f64();
    ensure(cs.case1.rank1 == 1.0, format!("rank-1(case 1) = {}", cs.case1.rank1))?;
    ensure(cs.case2.rank1 < 1.0, format!("rank-1(case 2) = {}", cs.case2.rank1))?;
    ensure(cs.case2.min_loss < cs.case1.min_loss, "loss(case 2) >= loss(case 1)")?;
    let t1 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_mtdnet")).arg("case-study").output().map_err(|e| e.to_string())?;
    let cli = t1.elapsed().as_secs_f64();
    ensure(out.status.success(), "cli case-study failed")?;
    ensure(lib < 1.0 && cli < 1.0, format!("runtime {lib:.3}s / {cli:.3}s"))?;
    Ok(format!(
        "rank-1 {:.3} / {:.3}, loss {:.4} > {:.4}; {:.0} ms",
        cs.case1.rank1,
        cs.case2.rank1,
        cs.case1.min_loss,
        cs.case2.min_loss,
        cli * 1e3
    ))
}

fn ablation() -> Outcome {
    let t0 = Instant::now();
    let setup = AblationSetup::desk(5, 20);
    let table = experiment::run_ablation(&setup, &[Variant::ClsOnly, Variant::RnkOnly, Variant::Full])
        .map_err(|e| e.to_string())?;
    let r = |v| table.row(v).unwrap().mean_rank1();
    let (cls, rnk, full) = (r(Variant::ClsOnly), r(Variant::RnkOnly), r(Variant::Full));
    let secs = t0.elapsed().as_secs_f64();
    let summary = format!("full {full:.4}, cls {cls:.4}, rnk {rnk:.4}; {secs:.0}s");
    eprint!("{}", table.render());
    let chance = 1.0 / table.gallery_size as f64;
    ensure(table.gallery_size == 16, format!("gallery {}", table.gallery_size))?;
    ensure(full >= cls && full >= rnk, format!("full below a single-task variant: {summary}"))?;
    ensure([cls, rnk, full].iter().all(|&v| v >= 3.0 * chance), format!("below 3x chance: {summary}"))?;
    ensure(secs < 1800.0, format!("over budget: {summary}"))?;
    Ok(summary)
}

fn cross_domain() -> Outcome {
    let t0 = Instant::now();
    let setup = CrossSetup::desk(5, 20, 20);
    let report = experiment::run_cross(&setup, false).map_err(|e| e.to_string())?;
    eprint!("{}", report.render());
    let (ft, cr) = (report.mean_fine_tune(), report.mean_cross());
    let secs = t0.elapsed().as_secs_f64();
    let summary = format!("cross {cr:.4} vs fine-tune {ft:.4}; {secs:.0}s");
    ensure(report.seeds.iter().all(|s| s.zero_weight_matches), "zero-weight run diverged from fine-tuning")?;
    ensure(cr >= ft - 0.02, format!("cross below fine-tune - 0.02: {summary}"))?;
    ensure(secs < 1800.0, format!("over budget: {summary}"))?;
    Ok(format!("{summary}; zero weight bitwise equal on 5/5"))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let p = |n: &str| dir.path().join(n);
    let run = |args: &[&std::ffi::OsStr]| -> Result<(), String> {
        let out = Command::new(env!("CARGO_BIN_EXE_mtdnet")).args(args).output().map_err(|e| e.to_string())?;
        ensure(out.status.success(), String::from_utf8_lossy(&out.stderr).to_string())
    };
    let os = |s: &str| std::ffi::OsString::from(s);
    std::fs::write(p("c.toml"), "preset = \"desk\"\ntrain.epochs = 2\n").map_err(|e| e.to_string())?;
    run(&[&os("gen-data"), &os("--out"), p("ds").as_os_str(), &os("--identities"), &os("12"), &os("--test-identities"), &os("4"), &os("--seed"), &os("5")])?;
    for name in ["a.ckpt", "b.ckpt"] {
        run(&[&os("train"), &os("--config"), p("c.toml").as_os_str(), &os("--data"), p("ds/train").as_os_str(), &os("--out"), p(name).as_os_str(), &os("--seed"), &os("9")])?;
    }
    let read = |n: &str| std::fs::read(p(n)).map_err(|e| e.to_string());
    ensure(read("a.ckpt")? == read("b.ckpt")?, "seeded train runs differ")?;
    ensure(read("a.ckpt.loss.csv")? == read("b.ckpt.loss.csv")?, "loss histories differ")?;

    let ck = Checkpoint::load(&p("a.ckpt")).map_err(|e| e.to_string())?;
    ck.save(&p("c.ckpt")).map_err(|e| e.to_string())?;
    ensure(read("a.ckpt")? == read("c.ckpt")?, "checkpoint round trip not bit-exact")?;

    for (ckpt, out) in [("a.ckpt", "a.csv"), ("c.ckpt", "c.csv")] {
        run(&[&os("eval"), &os("--checkpoint"), p(ckpt).as_os_str(), &os("--data"), p("ds/test").as_os_str(), &os("--out"), p(out).as_os_str(), &os("--trials"), &os("3")])?;
    }
    ensure(read("a.csv")? == read("c.csv")?, "CMC CSV differs after reload")?;
    Ok(format!("checkpoints identical ({} bytes), round trip bit-exact, CMC CSV identical", read("a.ckpt")?.len()))
}

fn confluence() -> Outcome {
    let mut cfg = NetConfig::desk();
    cfg.loss.alpha = 1e3;
    let net = train_net(&cfg, 8);
    let h = net.handles();
    let g = net.graph();
    let total = g.backward(h.loss.unwrap()).map_err(|e| e.to_string())?;
    let trp = g.backward(h.triplet.unwrap()).map_err(|e| e.to_string())?;
    let cls = g.backward(h.cls_total.unwrap()).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    let names: Vec<String> = net.params().names().map(str::to_string).collect();
    for name in names.iter().filter(|n| n.starts_with("trunk.")) {
        let (t, r, c) = (total.get(name).unwrap().data(), trp.get(name).unwrap().data(), cls.get(name).unwrap().data());
        let scale = t.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-12);
        for i in 0..t.len() {
            worst = worst.max((t[i] - (r[i] + c[i])).abs() / scale);
        }
    }
    ensure(worst <= 1e-6, format!("trunk max rel deviation {worst:.3e}"))?;
    let cls_names: Vec<&String> = names.iter().filter(|n| n.starts_with("cls.")).collect();
    ensure(!cls_names.is_empty(), "no cls parameters")?;
    for name in &cls_names {
        ensure(trp.get(name).unwrap().data().iter().all(|&v| v == 0.0), format!("{name} gets triplet gradient"))?;
    }
    Ok(format!("trunk max rel deviation {worst:.1e}; {} cls tensors with zero triplet gradient", cls_names.len()))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("1 gradient correctness", gradients),
        ("2 loss formula suite", loss_suite),
        ("3 paper shape fidelity", shapes),
        ("4 CMC oracle equivalence", cmc_oracle),
        ("5 threshold vs ranking case study", case_study),
        ("6 multi-task ablation", ablation),
        ("7 cross-domain direction", cross_domain),
        ("8 determinism and persistence", determinism),
        ("9 gradient confluence", confluence),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !only.is_empty() && !only.iter().any(|o| name.starts_with(o.as_str())) {
            continue;
        }
        match f() {
            Ok(msg) => println!("PASS criterion {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL criterion {name}: {msg}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
