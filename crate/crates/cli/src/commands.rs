use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use neurolrp::eval::{
    class_relevance_summary, classification_metrics, lesion_load_baseline, lesion_volumes, ranking_csv, region_csv,
    region_relevance, roc_auc, top_regions, RankedRegion,
};
use neurolrp::explain::{average_heatmap, lrp, relevance_share_in_mask, relevance_sum, sensitivity, Heatmap};
use neurolrp::nn::{load_model, model_bytes, train_trials, HistorySummary, Sample};
use neurolrp::preprocess::{fill_lesions, load_manifest, save_manifest};
use neurolrp::rng::child_seed;
use neurolrp::synth::{generate_dataset, generate_parcellation};
use neurolrp::volume::{load_volume, minmax_scale, save_volume};
use neurolrp::{ClassificationMetrics, DatasetManifest, Network, Parcellation, Split, TrainHistory};

use crate::config::{Method, RunConfig};
use crate::provenance::{RunDir, RunRecord};
use crate::render::render_slice;

pub const ATLAS_STEM: &str = "atlas";

fn require<'a>(p: &'a Option<std::path::PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| anyhow!("missing --{what}"))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

fn record_tree(run: &mut RunDir, rel: &str) -> Result<()> {
    let dir = run.path(rel);
    let mut names: Vec<String> = fs::read_dir(&dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .map(|e| Ok(e?.file_name().to_string_lossy().into_owned()))
        .collect::<std::io::Result<_>>()?;
    names.sort();
    for n in names {
        run.artifact(&format!("{rel}/{n}"))?;
    }
    Ok(())
}

fn record_manifest_tree(run: &mut RunDir, m: &DatasetManifest) -> Result<()> {
    for s in &m.subjects {
        run.artifact(&s.image_path)?;
        for p in [&s.lesion_mask_path, &s.wm_mask_path].into_iter().flatten() {
            run.artifact(p)?;
        }
    }
    run.artifact("manifest.json")
}

/// Phantom dataset, its manifest and the parcellation in `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<(DatasetManifest, RunRecord)> {
    let mut run = RunDir::create(out, "synth", cfg)?;
    let d = &cfg.dataset;
    let m = generate_dataset(d.n_per_class, d.regime, &cfg.phantom, d.holdout_fraction, cfg.seed, out)?;
    let parc = generate_parcellation(&cfg.phantom)?;
    parc.save(out, ATLAS_STEM)?;
    record_manifest_tree(&mut run, &m)?;
    run.artifact(&format!("{ATLAS_STEM}.vvol"))?;
    run.artifact(&format!("{ATLAS_STEM}.json"))?;
    Ok((m, run.finish()?))
}

pub struct TrainOutcome {
    pub network: Network,
    pub history: TrainHistory,
    pub trial: usize,
    pub record: RunRecord,
}

/// Trains on the manifest's train split; `paths.init` starts from a checkpoint.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<TrainOutcome> {
    let mut run = RunDir::create(out, "train", cfg)?;
    let dataset = require(&cfg.paths.dataset, "dataset")?;
    run.input(dataset)?;
    let m = load_manifest(dataset)?;
    let samples = m.load_samples(Some(Split::Train))?;
    let mut arch = cfg.arch.clone();
    arch.input_dims = m.metadata.dims;
    let init = match &cfg.paths.init {
        Some(p) => {
            run.input(p)?;
            Some(load_model(p)?.network)
        }
        None => None,
    };
    let train_cfg = neurolrp::TrainConfig {
        rng_seed: cfg.seed,
        ..cfg.train.clone()
    };
    let (network, history, trial) = train_trials(&arch, init.as_ref(), &samples, &train_cfg, cfg.trials)?;
    run.write("model.vnet", model_bytes(&network, &HistorySummary::from(&history), cfg.seed))?;
    run.write("history.csv", history.to_csv())?;
    let best = history.best();
    run.write(
        "validation.csv",
        format!(
            "trial,best_epoch,epochs_run,val_loss,val_balanced_accuracy\n{},{},{},{},{}\n",
            trial,
            history.best_epoch,
            history.epochs.len(),
            fmt_opt(best.map(|b| b.val_loss)),
            fmt_opt(best.and_then(|b| b.val_balanced_accuracy))
        ),
    )?;
    Ok(TrainOutcome {
        network,
        history,
        trial,
        record: run.finish()?,
    })
}

pub struct Prediction {
    pub id: String,
    pub label: u8,
    pub logit: f32,
    pub probability: f32,
}

pub struct EvalReport {
    pub predictions: Vec<Prediction>,
    pub metrics: ClassificationMetrics,
    pub auc: Option<f64>,
    pub baseline: Option<(ClassificationMetrics, f64)>,
}

fn metrics_row(name: &str, n: usize, m: &ClassificationMetrics, auc: Option<f64>) -> String {
    format!(
        "{name},{n},{},{},{},{:.6},{}\n",
        fmt_opt(m.sensitivity),
        fmt_opt(m.specificity),
        fmt_opt(m.balanced_accuracy),
        m.accuracy,
        fmt_opt(auc)
    )
}

pub fn predict_samples(net: &Network, samples: &[Sample]) -> Result<Vec<Prediction>> {
    samples
        .iter()
        .map(|s| {
            let (logit, probability) = net.predict(&s.volume)?;
            Ok(Prediction {
                id: s.id.clone(),
                label: s.label,
                logit,
                probability,
            })
        })
        .collect()
}

/// Metrics, ROC and predictions of a model on one split, plus the
/// lesion-load baseline when every subject has a lesion mask.
pub fn cmd_evaluate(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let mut run = RunDir::create(out, "evaluate", cfg)?;
    let model = require(&cfg.paths.model, "model")?;
    let dataset = require(&cfg.paths.dataset, "dataset")?;
    run.input(model)?;
    run.input(dataset)?;
    let net = load_model(model)?.network;
    let m = load_manifest(dataset)?;
    let split = cfg.evaluate_split.split();
    let samples = m.load_samples(split)?;
    if samples.is_empty() {
        bail!("no subjects in the {:?} split", cfg.evaluate_split);
    }
    let predictions = predict_samples(&net, &samples)?;
    let scores: Vec<f64> = predictions.iter().map(|p| p.probability as f64).collect();
    let labels: Vec<u8> = predictions.iter().map(|p| p.label).collect();
    let metrics = classification_metrics(&scores, &labels)?;
    let roc = roc_auc(&scores, &labels).ok();
    let mut csv = String::from("model,n,sensitivity,specificity,balanced_accuracy,accuracy,auc\n");
    csv += &metrics_row("cnn", samples.len(), &metrics, roc.as_ref().map(|r| r.auc));
    let baseline = if m.subjects.iter().all(|s| s.lesion_mask_path.is_some()) {
        let train = lesion_volumes(&m, Split::Train, 1.0)?;
        let test: Vec<(f64, u8)> = match split {
            Some(sp) => lesion_volumes(&m, sp, 1.0)?,
            None => [lesion_volumes(&m, Split::Train, 1.0)?, lesion_volumes(&m, Split::Holdout, 1.0)?].concat(),
        };
        match lesion_load_baseline(&train, &test) {
            Ok(r) => {
                csv += &metrics_row("lesion_load_baseline", test.len(), &r.metrics, Some(r.auc));
                Some((r.metrics, r.auc))
            }
            Err(_) => None,
        }
    } else {
        None
    };
    run.write("metrics.csv", csv)?;
    if let Some(r) = &roc {
        run.write("roc.csv", r.to_csv())?;
    }
    let mut pred = String::from("id,label,logit,probability\n");
    for p in &predictions {
        pred += &format!("{},{},{:.9e},{:.9e}\n", p.id, p.label, p.logit, p.probability);
    }
    run.write("predictions.csv", pred)?;
    run.finish()?;
    Ok(EvalReport {
        predictions,
        metrics,
        auc: roc.map(|r| r.auc),
        baseline,
    })
}

pub struct Explained {
    pub id: String,
    pub label: u8,
    pub logit: f32,
    pub probability: f32,
    pub relevance_sum: f64,
    /// Relevance share inside the subject's lesion mask, when it has one.
    pub lesion_share: Option<f64>,
    pub lesion_fraction: Option<f64>,
}

/// Heatmaps for the selected split, class averages and a summary table.
pub fn cmd_explain(cfg: &RunConfig, out: &Path) -> Result<Vec<Explained>> {
    let mut run = RunDir::create(out, "explain", cfg)?;
    let model = require(&cfg.paths.model, "model")?;
    let dataset = require(&cfg.paths.dataset, "dataset")?;
    run.input(model)?;
    run.input(dataset)?;
    let net = load_model(model)?.network;
    let wide: Network<f64> = net.cast();
    let m = load_manifest(dataset)?;
    let e = &cfg.explain;
    fs::create_dir_all(run.path("heatmaps"))?;
    let mut rows = vec![];
    let mut by_class: [Vec<Heatmap>; 2] = [vec![], vec![]];
    for s in m.subjects_in(e.split.split()) {
        let volume = load_volume(m.resolve(&s.image_path))?;
        let (logit, probability) = net.predict(&volume)?;
        if e.only_correct && (probability >= 0.5) != (s.label == 1) {
            continue;
        }
        let h = match e.method {
            Method::Lrp => lrp(&wide, &volume, e.epsilon)?,
            Method::Sensitivity => sensitivity(&wide, &volume)?,
        };
        let lesions = m.load_lesion_mask(s)?;
        let lesion_share = match &lesions {
            Some(mask) if !mask.is_empty() => Some(relevance_share_in_mask(&h, mask, e.share_mode)?),
            _ => None,
        };
        save_volume(&h.to_volume(), run.path(&format!("heatmaps/{}.vvol", s.id)))?;
        rows.push(Explained {
            id: s.id.clone(),
            label: s.label,
            logit,
            probability,
            relevance_sum: relevance_sum(&h),
            lesion_share,
            lesion_fraction: lesions.map(|l| l.count() as f64 / l.data().len() as f64),
        });
        by_class[(s.label == 1) as usize].push(h);
    }
    record_tree(&mut run, "heatmaps")?;
    let mut groups: Vec<(&str, &[Heatmap])> = vec![];
    for (name, hs) in [("patient", &by_class[1]), ("control", &by_class[0])] {
        if !hs.is_empty() {
            let rel = format!("average_{name}.vvol");
            save_volume(&average_heatmap(hs)?.to_volume(), run.path(&rel))?;
            run.artifact(&rel)?;
            groups.push((name, hs));
        }
    }
    let mut summary = String::from("id,label,logit,probability,relevance_sum,lesion_share,lesion_fraction\n");
    for r in &rows {
        summary += &format!(
            "{},{},{:.9e},{:.9e},{:.9e},{},{}\n",
            r.id,
            r.label,
            r.logit,
            r.probability,
            r.relevance_sum,
            r.lesion_share.map(|v| format!("{v:.9e}")).unwrap_or_default(),
            r.lesion_fraction.map(|v| format!("{v:.9e}")).unwrap_or_default()
        );
    }
    run.write("summary.csv", summary)?;
    let mut classes = String::from("class,n,mean_relevance_sum,std_relevance_sum\n");
    if !groups.is_empty() {
        for (name, st) in class_relevance_summary(&groups)? {
            classes += &format!("{name},{},{:.9e},{:.9e}\n", st.n, st.mean, st.std);
        }
    }
    run.write("class_summary.csv", classes)?;
    run.finish()?;
    Ok(rows)
}

/// Copies a dataset with every lesion replaced by local white-matter
/// intensities; filled images are min-max rescaled. Subjects without both
/// masks are copied unchanged.
pub fn cmd_fill_lesions(cfg: &RunConfig, out: &Path) -> Result<DatasetManifest> {
    let mut run = RunDir::create(out, "fill-lesions", cfg)?;
    let dataset = require(&cfg.paths.dataset, "dataset")?;
    run.input(dataset)?;
    let m = load_manifest(dataset)?;
    let mut filled = m.clone();
    filled.root = out.to_path_buf();
    filled.metadata.name = format!("{}_filled", m.metadata.name);
    for (k, s) in m.subjects.iter().enumerate() {
        let mut rels = vec![s.image_path.clone()];
        rels.extend(s.lesion_mask_path.iter().cloned());
        rels.extend(s.wm_mask_path.iter().cloned());
        for rel in &rels {
            if let Some(parent) = out.join(rel).parent() {
                fs::create_dir_all(parent)?;
            }
        }
        for rel in &rels[1..] {
            fs::copy(m.resolve(rel), out.join(rel)).with_context(|| format!("copying {rel}"))?;
        }
        let image = load_volume(m.resolve(&s.image_path))?;
        let image = match (m.load_lesion_mask(s)?, m.load_wm_mask(s)?) {
            (Some(lesions), Some(wm)) if !lesions.is_empty() => {
                minmax_scale(&fill_lesions(&image, &lesions, &wm, &cfg.fill, child_seed(cfg.seed, k as u64))?)
            }
            _ => image,
        };
        save_volume(&image, out.join(&s.image_path))?;
    }
    save_manifest(&filled, out.join("manifest.json"))?;
    record_manifest_tree(&mut run, &filled)?;
    run.finish()?;
    Ok(filled)
}

pub struct RegionsOutcome {
    pub ranked: Vec<RankedRegion>,
}

fn read_summary(dir: &Path) -> Result<Vec<(String, u8)>> {
    let path = dir.join("summary.csv");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let mut f = l.split(',');
            let id = f.next().unwrap_or_default().to_string();
            let label = f
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| anyhow!("bad summary row {l:?} in {}", path.display()))?;
            Ok((id, label))
        })
        .collect()
}

/// Region tables of the class-average heatmaps from an explain run and the
/// top-k ranking.
pub fn cmd_regions(cfg: &RunConfig, out: &Path) -> Result<RegionsOutcome> {
    let mut run = RunDir::create(out, "regions", cfg)?;
    let dir = require(&cfg.paths.heatmaps, "heatmaps")?;
    let atlas = require(&cfg.paths.parcellation, "parcellation")?;
    run.input(atlas)?;
    let parc = Parcellation::load(atlas)?;
    let rows = read_summary(dir)?;
    let mut by_class: [Vec<Heatmap>; 2] = [vec![], vec![]];
    for (id, label) in &rows {
        let path = dir.join(format!("heatmaps/{id}.vvol"));
        run.input(&path)?;
        by_class[(*label == 1) as usize].push(Heatmap::from(load_volume(&path)?));
    }
    if by_class.iter().any(|c| c.is_empty()) {
        bail!("regions needs heatmaps of both classes in {}", dir.display());
    }
    let patients = region_relevance(&average_heatmap(&by_class[1])?, &parc)?;
    let controls = region_relevance(&average_heatmap(&by_class[0])?, &parc)?;
    let ranked = top_regions(&patients, &controls, cfg.top_k)?;
    run.write("regions.csv", region_csv(&[("patient", &patients), ("control", &controls)]))?;
    run.write("top_regions.csv", ranking_csv(&ranked))?;
    run.finish()?;
    Ok(RegionsOutcome { ranked })
}

pub fn cmd_render(cfg: &RunConfig, out: &Path) -> Result<Vec<u8>> {
    let mut run = RunDir::create(out, "render", cfg)?;
    let volume_path = require(&cfg.paths.volume, "volume")?;
    run.input(volume_path)?;
    let volume = load_volume(volume_path)?;
    let heatmap = match &cfg.paths.heatmap {
        Some(p) => {
            run.input(p)?;
            Some(Heatmap::from(load_volume(p)?))
        }
        None => None,
    };
    let bytes = render_slice(&volume, heatmap.as_ref(), cfg.render.slice.parse()?, cfg.render.range)?;
    run.write(&cfg.render.output, &bytes)?;
    run.finish()?;
    Ok(bytes)
}
