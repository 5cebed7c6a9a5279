//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit when any
//! criterion fails. `NEUROLRP_ACCEPTANCE=1,4,9` runs a subset.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use neurolrp::eval::{percent_half_up, Confusion};
use neurolrp::explain::{relevance_layers, sensitivity};
use neurolrp::nn::{loss, Mode, Padding, Shape, Tensor};
use neurolrp::rng::seeded;
use neurolrp::{ArchConfig, LayerSpec, Network, Regime, Volume};
use neurolrp_cli::commands::{cmd_evaluate, cmd_explain, cmd_fill_lesions, cmd_synth, cmd_train};
use neurolrp_cli::config::{RunConfig, SplitSel};
use rand::Rng;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: String) -> Verdict {
    Verdict { pass, detail }
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn close(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    (a - b).abs() <= (rel * a.abs().max(b.abs())).max(floor)
}

/// Random sequential classifier: conv blocks, flatten, optional hidden
/// dense layer, scalar logit.
fn random_net<R: Rng>(rng: &mut R, max_dim: usize, biases: bool, dropout: bool) -> (Network<f64>, Volume) {
    let dims = [(); 3].map(|_| rng.random_range(2..=max_dim));
    let mut shape = Shape { channels: 1, dims };
    let mut layers = vec![];
    let push = |layers: &mut Vec<LayerSpec>, shape: &mut Shape, l: LayerSpec| {
        *shape = l.output_shape(*shape).unwrap();
        layers.push(l);
    };
    for _ in 0..rng.random_range(0..=2) {
        let padding = if rng.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        let kernel = [0, 1, 2].map(|a| {
            let k = rng.random_range(1..=3);
            if padding == Padding::Valid { k.min(shape.dims[a]) } else { k }
        });
        let conv = LayerSpec::Conv3d {
            in_channels: shape.channels,
            out_channels: rng.random_range(1..=3),
            kernel,
            padding,
        };
        push(&mut layers, &mut shape, conv);
        if rng.random_bool(0.7) {
            push(&mut layers, &mut shape, LayerSpec::Elu { alpha: rng.random_range(0.5..1.5) });
        }
        if rng.random_bool(0.5) && shape.dims.iter().all(|&d| d >= 2) {
            push(&mut layers, &mut shape, LayerSpec::MaxPool3d { window: [2, 2, 2] });
        }
        if dropout && rng.random_bool(0.5) {
            push(&mut layers, &mut shape, LayerSpec::Dropout { rate: 0.3 });
        }
    }
    push(&mut layers, &mut shape, LayerSpec::Flatten);
    if rng.random_bool(0.5) {
        let hidden = rng.random_range(1..=4);
        let features = shape.len();
        push(&mut layers, &mut shape, LayerSpec::dense(features, hidden));
        push(&mut layers, &mut shape, LayerSpec::Elu { alpha: 1.0 });
    }
    let features = shape.len();
    push(&mut layers, &mut shape, LayerSpec::dense(features, 1));
    push(&mut layers, &mut shape, LayerSpec::SigmoidOutput);
    let l2: Vec<f64> = layers.iter().map(|_| if biases { rng.random_range(0.0..0.05) } else { 0.0 }).collect();
    let mut net = Network::<f64>::new(dims, layers, l2, rng.random()).unwrap();
    if biases {
        for p in net.params_mut() {
            p.bias.iter_mut().for_each(|b| *b = rng.random_range(-0.3..0.3));
        }
    }
    let x = Volume::from_fn(dims, |_, _, _| rng.random_range(-1.0f32..1.0)).unwrap();
    (net, x)
}

fn conservation() -> Verdict {
    let mut rng = seeded(101);
    let mut worst: f64 = 0.0;
    let mut fails = 0;
    for _ in 0..50 {
        let (net, x) = random_net(&mut rng, 8, false, false);
        let logit = net.forward_eval(&x).unwrap().logit();
        let input = relevance_layers(&net, Tensor::from_volume(&x), 0.0).unwrap();
        let total: f64 = input[0].iter().sum();
        let err = (total - logit).abs() / logit.abs().max(f64::MIN_POSITIVE);
        worst = worst.max(err);
        fails += (err > 1e-5) as usize;
    }
    verdict(fails == 0, format!("50 networks, worst relative error {worst:.2e}, bound 1e-5"))
}

fn elu(x: f64, alpha: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        alpha * x.exp_m1()
    }
}

fn stab(z: f64, eps: f64) -> f64 {
    z + if z >= 0.0 { eps } else { -eps }
}

fn brute_force() -> Verdict {
    let mut rng = seeded(202);
    let mut worst: f64 = 0.0;
    let mut cases = 0;
    for n_in in 1..=4 {
        for n_hidden in 1..=3 {
            for &eps in &[0.0, 0.001, 0.1] {
                for _ in 0..10 {
                    let layers = vec![
                        LayerSpec::dense(n_in, n_hidden),
                        LayerSpec::Elu { alpha: 1.0 },
                        LayerSpec::dense(n_hidden, 1),
                        LayerSpec::SigmoidOutput,
                    ];
                    let net = Network::<f64>::new([n_in, 1, 1], layers, vec![0.0; 4], rng.random()).unwrap();
                    let x: Vec<f32> = (0..n_in).map(|_| rng.random_range(-2.0f32..2.0)).collect();
                    let w = &net.params()[0].weights;
                    let v = &net.params()[2].weights;
                    let xs: Vec<f64> = x.iter().map(|&a| a as f64).collect();
                    let z: Vec<f64> = (0..n_hidden).map(|j| (0..n_in).map(|i| xs[i] * w[j * n_in + i]).sum()).collect();
                    let a: Vec<f64> = z.iter().map(|&zj| elu(zj, 1.0)).collect();
                    let out: f64 = (0..n_hidden).map(|j| a[j] * v[j]).sum();
                    // every input -> hidden -> logit path contributes its two ratio factors times the logit
                    let oracle: Vec<f64> = (0..n_in)
                        .map(|i| {
                            (0..n_hidden)
                                .map(|j| xs[i] * w[j * n_in + i] / stab(z[j], eps) * (a[j] * v[j] / stab(out, eps)) * out)
                                .sum()
                        })
                        .collect();
                    let vol = Volume::new([n_in, 1, 1], x).unwrap();
                    let layer_rel = relevance_layers(&net, Tensor::from_volume(&vol), eps).unwrap();
                    for i in 0..n_in {
                        worst = worst.max((layer_rel[0][i] - oracle[i]).abs());
                    }
                    cases += 1;
                }
            }
        }
    }
    verdict(worst <= 1e-8, format!("{cases} dense networks, worst absolute deviation {worst:.2e}, bound 1e-8"))
}

fn logit_of(net: &Network<f64>, x: &Tensor<f64>) -> f64 {
    net.forward_tensor(x.clone(), Mode::Eval, &mut seeded(0)).unwrap().logit()
}

fn gradients() -> Verdict {
    let mut rng = seeded(303);
    let h = 1e-6;
    let (mut checked, mut bad) = (0usize, 0usize);
    let mut worst: f64 = 0.0;
    let mut note = |a: f64, fd: f64, checked: &mut usize, bad: &mut usize| {
        *checked += 1;
        if !close(a, fd, 1e-4, 1e-6) {
            *bad += 1;
        }
        worst = worst.max((a - fd).abs() / fd.abs().max(1e-6));
    };
    for _ in 0..20 {
        let (net, x) = random_net(&mut rng, 5, true, true);
        let label = rng.random_range(0..=1u8);
        let input = Tensor::from_volume(&x);
        let trace = net.forward_tensor(input.clone(), Mode::Eval, &mut seeded(0)).unwrap();
        let grads = net.backward(&trace, label, true).unwrap();
        let loss_at = |n: &Network<f64>, t: &Tensor<f64>| loss(logit_of(n, t), label, n);
        for l in 0..net.params().len() {
            let (nw, nb) = (net.params()[l].weights.len(), net.params()[l].bias.len());
            for k in 0..nw + nb {
                let bump = |d: f64| {
                    let mut n = net.clone();
                    let p = &mut n.params_mut()[l];
                    if k < nw {
                        p.weights[k] += d;
                    } else {
                        p.bias[k - nw] += d;
                    }
                    loss_at(&n, &input)
                };
                let fd = (bump(h) - bump(-h)) / (2.0 * h);
                let g = &grads.params[l];
                let a = if k < nw { g.weights[k] } else { g.bias[k - nw] };
                note(a, fd, &mut checked, &mut bad);
            }
        }
        let gin = grads.input.as_ref().expect("input gradient");
        let sens = sensitivity(&net, &x).unwrap();
        for i in 0..input.data.len() {
            let shifted = |d: f64| {
                let mut t = input.clone();
                t.data[i] += d;
                t
            };
            let fd_loss = (loss_at(&net, &shifted(h)) - loss_at(&net, &shifted(-h))) / (2.0 * h);
            note(gin.data[i], fd_loss, &mut checked, &mut bad);
            let fd_logit = (logit_of(&net, &shifted(h)) - logit_of(&net, &shifted(-h))) / (2.0 * h);
            // sensitivity maps are stored in f32
            let s = sens.data()[i] as f64;
            checked += 1;
            if !close(s, fd_logit.abs(), 1e-4, 1e-6) {
                bad += 1;
            }
        }
    }
    verdict(
        bad == 0,
        format!("20 networks, {checked} derivatives, {bad} outside 1e-4 relative / 1e-6 absolute, worst {worst:.2e}"),
    )
}

fn table_rows() -> Verdict {
    // holdout of 13 patients and 20 controls; aggregated rows pool 10 trials
    let rows: [((usize, usize, usize, usize), (f64, f64, f64)); 5] = [
        ((10, 13, 20, 20), (76.92, 100.00, 88.46)),
        ((121, 130, 162, 200), (93.08, 81.00, 87.04)),
        ((89, 130, 148, 200), (68.46, 74.00, 71.23)),
        ((120, 130, 96, 200), (92.31, 48.00, 70.15)),
        ((7, 13, 16, 20), (53.85, 80.00, 66.92)),
    ];
    let mut out = vec![];
    let mut pass = true;
    for ((tp, p, tn, n), want) in rows {
        let m = Confusion { tp, fn_: p - tp, tn, fp: n - tn }.metrics();
        let got = (
            percent_half_up(m.sensitivity.unwrap(), 2),
            percent_half_up(m.specificity.unwrap(), 2),
            percent_half_up(m.balanced_accuracy.unwrap(), 2),
        );
        pass &= got == want;
        out.push(format!("({:.2},{:.2})->{:.2}", got.0, got.1, got.2));
    }
    verdict(pass, out.join(" "))
}

fn param_counts() -> Verdict {
    let paper = ArchConfig::paper([96, 114, 96]);
    let conv = paper.conv_param_count().unwrap();
    let mut pass = conv == 333_760;
    let mut checked = 0;
    for mask in 0..16u32 {
        let arch = ArchConfig {
            pool_after: (0..4).map(|b| mask >> b & 1 == 1).collect(),
            ..paper.clone()
        };
        let (layers, l2) = arch.layers().unwrap();
        let net = Network::<f32>::zeroed(arch.input_dims, layers, l2).unwrap();
        let expected = 333_760 + arch.flatten_dim().unwrap() + 1;
        pass &= net.count_params() == expected && net.allocated_params() == expected;
        checked += 1;
    }
    verdict(pass, format!("conv parameters {conv}; {checked} pooling configurations match 333760 + flatten + 1"))
}

struct SeedRun {
    bacc: f64,
    auc: f64,
    lesion_share: Vec<f64>,
    lesion_fraction: Vec<f64>,
}

fn run_protocol(cfg: &RunConfig, data: &Path, work: &Path) -> SeedRun {
    let mut c = cfg.clone();
    c.paths.dataset = Some(data.join("manifest.json"));
    cmd_train(&c, &work.join("train")).unwrap();
    c.paths.model = Some(work.join("train/model.vnet"));
    let report = cmd_evaluate(&c, &work.join("eval")).unwrap();
    let rows = cmd_explain(&c, &work.join("explain")).unwrap();
    let patients: Vec<_> = rows.iter().filter(|r| r.label == 1).collect();
    SeedRun {
        bacc: report.metrics.balanced_accuracy.unwrap(),
        auc: report.auc.unwrap(),
        lesion_share: patients.iter().map(|r| r.lesion_share.unwrap_or(0.0)).collect(),
        lesion_fraction: patients.iter().map(|r| r.lesion_fraction.unwrap_or(0.0)).collect(),
    }
}

struct LesionRuns {
    plain: Vec<SeedRun>,
    filled: Vec<SeedRun>,
    minutes: f64,
}

fn lesion_runs(root: &Path) -> LesionRuns {
    let start = Instant::now();
    let (mut plain, mut filled) = (vec![], vec![]);
    for seed in 0..5u64 {
        let cfg = RunConfig { seed, ..RunConfig::default() };
        let dir = root.join(format!("seed{seed}"));
        cmd_synth(&cfg, &dir.join("data")).unwrap();
        plain.push(run_protocol(&cfg, &dir.join("data"), &dir.join("plain")));
        eprintln!("  seed {seed}: unfilled balanced accuracy {:.3} auc {:.3}", plain[seed as usize].bacc, plain[seed as usize].auc);
        let mut fc = cfg.clone();
        fc.paths.dataset = Some(dir.join("data/manifest.json"));
        cmd_fill_lesions(&fc, &dir.join("filled_data")).unwrap();
        filled.push(run_protocol(&cfg, &dir.join("filled_data"), &dir.join("filled")));
        eprintln!("  seed {seed}: filled balanced accuracy {:.3}", filled[seed as usize].bacc);
    }
    LesionRuns {
        plain,
        filled,
        minutes: start.elapsed().as_secs_f64() / 60.0,
    }
}

fn classification(r: &LesionRuns) -> Verdict {
    let bacc: Vec<f64> = r.plain.iter().map(|s| s.bacc).collect();
    let auc: Vec<f64> = r.plain.iter().map(|s| s.auc).collect();
    let (mb, ma) = (median(&bacc), median(&auc));
    verdict(
        mb >= 0.90 && ma >= 0.95,
        format!(
            "median balanced accuracy {mb:.3} (>= 0.90), median AUC {ma:.3} (>= 0.95); per seed {bacc:.3?}; protocol incl. filled runs {:.1} min",
            r.minutes
        ),
    )
}

fn concentration(r: &LesionRuns) -> Verdict {
    let share: Vec<f64> = r.plain.iter().flat_map(|s| s.lesion_share.iter().copied()).collect();
    let frac: Vec<f64> = r.plain.iter().flat_map(|s| s.lesion_fraction.iter().copied()).collect();
    let (ms, mf) = (mean(&share), mean(&frac));
    verdict(
        ms >= 5.0 * mf,
        format!("mean positive relevance share in lesions {:.2}% vs lesion fraction {:.3}% ({:.1}x, need 5x)", 100.0 * ms, 100.0 * mf, ms / mf),
    )
}

fn filling(r: &LesionRuns) -> Verdict {
    let plain: Vec<f64> = r.plain.iter().map(|s| s.bacc).collect();
    let filled: Vec<f64> = r.filled.iter().map(|s| s.bacc).collect();
    let share = |runs: &[SeedRun]| mean(&runs.iter().flat_map(|s| s.lesion_share.iter().copied()).collect::<Vec<_>>());
    let (sp, sf) = (share(&r.plain), share(&r.filled));
    verdict(
        median(&filled) < median(&plain) && sf < sp,
        format!(
            "median balanced accuracy filled {:.3} < unfilled {:.3}; lesion relevance share filled {:.2}% < unfilled {:.2}%",
            median(&filled),
            median(&plain),
            100.0 * sf,
            100.0 * sp
        ),
    )
}

fn transfer(root: &Path) -> Verdict {
    let start = Instant::now();
    let base = RunConfig::default();
    let pre = RunConfig {
        seed: 1000,
        dataset: neurolrp_cli::config::DatasetConfig { n_per_class: 100, regime: Regime::Atrophy, holdout_fraction: 0.15 },
        ..base.clone()
    };
    cmd_synth(&pre, &root.join("atrophy")).unwrap();
    let mut pc = pre.clone();
    pc.paths.dataset = Some(root.join("atrophy/manifest.json"));
    cmd_train(&pc, &root.join("pretrain")).unwrap();
    let test = RunConfig {
        seed: 5000,
        dataset: neurolrp_cli::config::DatasetConfig { n_per_class: 30, regime: Regime::Lesion, holdout_fraction: 0.0 },
        ..base.clone()
    };
    cmd_synth(&test, &root.join("lesion_test")).unwrap();
    let (mut ft, mut sc) = (vec![], vec![]);
    for seed in 0..5u64 {
        let small = RunConfig {
            seed: 2000 + seed,
            dataset: neurolrp_cli::config::DatasetConfig { n_per_class: 15, regime: Regime::Lesion, holdout_fraction: 0.0 },
            ..base.clone()
        };
        let dir = root.join(format!("small{seed}"));
        cmd_synth(&small, &dir.join("data")).unwrap();
        let score = |init: Option<PathBuf>, name: &str| {
            let mut c = RunConfig { seed, evaluate_split: SplitSel::All, ..base.clone() };
            c.paths.dataset = Some(dir.join("data/manifest.json"));
            c.paths.init = init;
            cmd_train(&c, &dir.join(name)).unwrap();
            c.paths.model = Some(dir.join(name).join("model.vnet"));
            c.paths.dataset = Some(root.join("lesion_test/manifest.json"));
            cmd_evaluate(&c, &dir.join(format!("{name}_eval"))).unwrap().metrics.balanced_accuracy.unwrap()
        };
        ft.push(score(Some(root.join("pretrain/model.vnet")), "finetuned"));
        sc.push(score(None, "scratch"));
        eprintln!("  seed {seed}: fine-tuned {:.3} scratch {:.3}", ft[seed as usize], sc[seed as usize]);
    }
    let wins = ft.iter().zip(&sc).filter(|(a, b)| a >= b).count();
    verdict(
        mean(&ft) >= mean(&sc) && wins >= 4,
        format!(
            "mean balanced accuracy pretrained {:.3} vs scratch {:.3}; pretrained >= scratch in {wins}/5 seeds; {:.1} min",
            mean(&ft),
            mean(&sc),
            start.elapsed().as_secs_f64() / 60.0
        ),
    )
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = vec![];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn determinism(root: &Path) -> Verdict {
    let bin = env!("CARGO_BIN_EXE_neurolrp");
    fs::create_dir_all(root).unwrap();
    let config = root.join("config.json");
    fs::write(&config, r#"{"seed": 11, "dataset": {"n_per_class": 6}, "train": {"max_epochs": 2}}"#).unwrap();
    let run = |out: &Path, args: &[&str]| {
        let status = Command::new(bin)
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(out)
            .args(args)
            .stdout(std::process::Stdio::null())
            .status()
            .unwrap();
        assert!(status.success(), "{args:?}");
    };
    let a = root.join("a");
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    let manifest = s(a.join("synth/manifest.json"));
    let model = s(a.join("train/model.vnet"));
    let steps: Vec<(&str, Vec<String>)> = vec![
        ("synth", vec!["synth".into()]),
        ("train", vec!["train".into(), "--dataset".into(), manifest.clone()]),
        ("evaluate", vec!["evaluate".into(), "--model".into(), model.clone(), "--dataset".into(), manifest.clone()]),
        ("explain", vec!["explain".into(), "--model".into(), model.clone(), "--dataset".into(), manifest.clone(), "--split".into(), "all".into()]),
        ("fill", vec!["fill-lesions".into(), "--dataset".into(), manifest.clone()]),
        (
            "regions",
            vec!["regions".into(), "--heatmaps".into(), s(a.join("explain")), "--parcellation".into(), s(a.join("synth/atlas.vvol"))],
        ),
        (
            "render",
            vec![
                "render".into(),
                "--volume".into(),
                s(a.join("synth/images/patient_0000.vvol")),
                "--heatmap".into(),
                s(a.join("explain/heatmaps/patient_0000.vvol")),
            ],
        ),
    ];
    let mut compared = 0;
    let mut mismatched = vec![];
    for (name, args) in &steps {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        run(&a.join(name), &args);
        run(&root.join("b").join(name), &args);
        let (ta, tb) = (tree(&a.join(name)), tree(&root.join("b").join(name)));
        compared += ta.len();
        if ta != tb {
            mismatched.push(*name);
        }
    }
    verdict(
        mismatched.is_empty(),
        format!("7 commands run twice, {compared} files compared, mismatches in {mismatched:?}"),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("NEUROLRP_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |n: u32| only.as_ref().is_none_or(|o| o.contains(&n));
    let work = tempfile::tempdir().unwrap();
    let mut results: Vec<(u32, &str, Verdict)> = vec![];
    let mut record = |n: u32, name: &'static str, f: &mut dyn FnMut() -> Verdict| {
        if wanted(n) {
            let t = Instant::now();
            let v = f();
            eprintln!("  [{n}] finished in {:.1}s", t.elapsed().as_secs_f64());
            results.push((n, name, v));
        }
    };
    record(1, "LRP conservation", &mut conservation);
    record(2, "brute-force LRP oracle", &mut brute_force);
    record(3, "gradient oracle", &mut gradients);
    record(4, "metric arithmetic", &mut table_rows);
    if [5, 6, 8].into_iter().any(wanted) {
        let runs = lesion_runs(&work.path().join("lesion"));
        record(5, "end-to-end classification", &mut || classification(&runs));
        record(6, "relevance concentration", &mut || concentration(&runs));
        record(8, "lesion filling", &mut || filling(&runs));
    }
    record(7, "transfer learning", &mut || transfer(&work.path().join("transfer")));
    record(9, "parameter counts", &mut param_counts);
    record(10, "determinism", &mut || determinism(&work.path().join("determinism")));
    results.sort_by_key(|r| r.0);
    println!();
    for (n, name, v) in &results {
        println!("criterion {n:>2} {:<4} {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
    }
    let failed = results.iter().filter(|r| !r.2.pass).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
