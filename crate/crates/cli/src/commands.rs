use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use anyhow::{bail, Context, Result};
use stereoqa_core::datakit::{load_manifest, synth_dataset, Distortion, StereoSample, SynthSpec};
use stereoqa_core::derive_seed;
use stereoqa_core::evalmetrics::{aggregate_runs, evaluate_run, EvalReport};
use stereoqa_core::imagepipe::load_gray;
use stereoqa_core::network::{load_checkpoint, save_checkpoint, InitScheme};
use stereoqa_core::nss::{extract_nss_features, read_feature_file, write_feature_file, NssFeatureVector};
use stereoqa_core::tensor::Real;
use stereoqa_core::training::{
    load_splits, log_to_csv, make_splits, predict_image, save_splits, train as train_run, SplitManifest, Subset,
    TrainConfig, TrainItem,
};

use crate::{EvaluateArgs, ExtractArgs, InitArg, PrecisionArg, PredictArgs, SubsetArg, SynthArgs, TrainArgs};

pub const SPLITS_FILE: &str = "splits.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "report.csv";

pub fn run_dir(root: &Path, run: usize) -> PathBuf {
    root.join(format!("run{run:02}"))
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let distortions = if a.distortions.is_empty() {
        Distortion::SYNTHETIC.to_vec()
    } else {
        a.distortions.iter().map(|d| d.parse()).collect::<stereoqa_core::Result<Vec<Distortion>>>()?
    };
    let spec = SynthSpec {
        contents: a.contents,
        distortions,
        levels: a.levels,
        seed: a.seed,
        height: a.height,
        width: a.width,
        asymmetric: a.asymmetric,
    };
    let manifest = synth_dataset(&spec, &a.out, a.overwrite)?;
    log::info!("wrote {}", manifest.display());
    Ok(())
}

pub fn extract_nss(a: ExtractArgs) -> Result<()> {
    let samples = load_manifest(&a.manifest)?;
    let mut done: BTreeMap<String, NssFeatureVector> = BTreeMap::new();
    if a.out.exists() && !a.force {
        done = read_feature_file(&a.out)
            .with_context(|| format!("reading existing features {}", a.out.display()))?
            .into_iter()
            .collect();
    }
    let todo: Vec<&StereoSample> = samples.iter().filter(|s| !done.contains_key(&s.id)).collect();
    log::info!("{} samples, {} already extracted, {} to do", samples.len(), samples.len() - todo.len(), todo.len());

    if !todo.is_empty() {
        // results are appended as they finish so an interrupted run can resume
        let mut journal = if a.force || !a.out.exists() {
            std::fs::File::create(&a.out)
        } else {
            OpenOptions::new().append(true).open(&a.out)
        }
        .with_context(|| format!("opening {}", a.out.display()))?;
        if a.force {
            done.clear();
        }
        let next = AtomicUsize::new(0);
        let sink = Mutex::new((&mut journal, &mut done, 0usize));
        std::thread::scope(|scope| {
            for _ in 0..a.workers.max(1) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(s) = todo.get(i) else { break };
                    let result = load_gray(&s.left_path)
                        .and_then(|l| Ok((l, load_gray(&s.right_path)?)))
                        .and_then(|(l, r)| extract_nss_features(&l, &r));
                    let mut guard = sink.lock().expect("worker panicked");
                    match result {
                        Ok(f) => {
                            let line = std::iter::once(s.id.clone())
                                .chain(f.values().iter().map(|v| v.to_string()))
                                .collect::<Vec<_>>()
                                .join(",");
                            if let Err(e) = writeln!(guard.0, "{line}") {
                                log::error!("{}: cannot append features: {e}", s.id);
                                guard.2 += 1;
                            }
                            guard.1.insert(s.id.clone(), f);
                            log::debug!("{} done", s.id);
                        }
                        Err(e) => {
                            log::error!("{}: {e}", s.id);
                            guard.2 += 1;
                        }
                    }
                });
            }
        });
        let failures = sink.into_inner().expect("worker panicked").2;
        let records: Vec<(String, NssFeatureVector)> =
            samples.iter().filter_map(|s| done.get(&s.id).map(|f| (s.id.clone(), f.clone()))).collect();
        write_feature_file(&a.out, &records)?;
        if failures > 0 {
            bail!("{failures} of {} samples failed", todo.len());
        }
    }
    log::info!("{} feature vectors in {}", done.len(), a.out.display());
    Ok(())
}

fn load_features(path: &Path) -> Result<BTreeMap<String, NssFeatureVector>> {
    Ok(read_feature_file(path).with_context(|| format!("reading {}", path.display()))?.into_iter().collect())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let samples = load_manifest(&a.manifest)?;
    let features = match (&a.features, a.no_aux) {
        (Some(p), _) => Some(load_features(p)?),
        (None, true) => None,
        (None, false) => bail!("--features is required unless --no-aux is given"),
    };
    let splits = match &a.splits {
        Some(p) => load_splits(p)?,
        None => make_splits(&samples, a.runs, a.seed)?,
    };
    std::fs::create_dir_all(&a.out)?;
    save_splits(&a.out.join(SPLITS_FILE), &splits)?;
    let init = match a.init {
        InitArg::Uniform => InitScheme::Uniform { gain: a.init_gain },
        InitArg::Normal => InitScheme::Normal { gain: a.init_gain },
    };
    for split in &splits {
        let dir = run_dir(&a.out, split.run);
        if dir.join(CHECKPOINT_FILE).exists() && !a.overwrite {
            bail!("{} already holds a checkpoint (use --overwrite)", dir.display());
        }
        std::fs::create_dir_all(&dir)?;
        let config = TrainConfig {
            lambda: a.lambda,
            learning_rate: a.lr,
            momentum: a.momentum,
            weight_decay: a.weight_decay,
            batch_size: a.batch_size,
            epochs: a.epochs,
            seed: derive_seed(a.seed, &[split.run as u64]),
            auxiliary_enabled: !a.no_aux,
            init,
        };
        let items = load_items(&samples, split, features.as_ref())?;
        match a.precision {
            PrecisionArg::Single => train_one::<f32>(&config, split, &items, &dir)?,
            PrecisionArg::Double => train_one::<f64>(&config, split, &items, &dir)?,
        }
    }
    Ok(())
}

fn load_items(
    samples: &[StereoSample],
    split: &SplitManifest,
    features: Option<&BTreeMap<String, NssFeatureVector>>,
) -> Result<Vec<TrainItem>> {
    samples
        .iter()
        .filter(|s| matches!(split.subset_of(&s.ref_id), Some(Subset::Train | Subset::Val)))
        .map(|s| {
            let nss = match features {
                Some(map) => Some(map.get(&s.id).cloned().with_context(|| format!("no features for sample {}", s.id))?),
                None => None,
            };
            Ok(TrainItem {
                id: s.id.clone(),
                ref_id: s.ref_id.clone(),
                dmos: s.dmos,
                left: load_gray(&s.left_path)?,
                right: load_gray(&s.right_path)?,
                nss,
            })
        })
        .collect()
}

fn train_one<T: Real>(config: &TrainConfig, split: &SplitManifest, items: &[TrainItem], dir: &Path) -> Result<()> {
    let outcome = train_run::<T>(config, split, items).with_context(|| format!("training run {}", split.run))?;
    std::fs::write(dir.join(LOG_FILE), log_to_csv(&outcome.log))?;
    save_checkpoint(&outcome.params, &dir.join(CHECKPOINT_FILE))?;
    log::info!("run {}: kept epoch {}, wrote {}", split.run, outcome.selected_epoch, dir.display());
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let samples = load_manifest(&a.manifest)?;
    let splits = load_splits(&a.train_dir.join(SPLITS_FILE))?;
    let features = a.features.as_deref().map(load_features).transpose()?;
    let subset = match a.subset {
        SubsetArg::Train => Subset::Train,
        SubsetArg::Val => Subset::Val,
        SubsetArg::Test => Subset::Test,
    };
    let mut reports = Vec::with_capacity(splits.len());
    for split in &splits {
        let path = run_dir(&a.train_dir, split.run).join(CHECKPOINT_FILE);
        if !path.is_file() {
            bail!("missing checkpoint {}", path.display());
        }
        let params = load_checkpoint(&path).with_context(|| format!("loading {}", path.display()))?;
        reports.push(evaluate_run(&params, split, &samples, features.as_ref(), subset, a.logistic)?);
    }
    let report = aggregate_runs(&reports);
    for w in &report.warnings {
        log::warn!("{w}");
    }
    let out = a.out.unwrap_or_else(|| a.train_dir.join(REPORT_FILE));
    report.save_csv(&out)?;
    std::fs::write(out.with_extension("txt"), report.to_text())?;
    summarize(&report);
    Ok(())
}

fn summarize(report: &EvalReport) {
    let fmt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
    for row in report.rows.iter().filter(|r| r.run == "mean") {
        log::info!(
            "mean {:<14} n={:<4} PLCC {} SROCC {} RMSE {}",
            row.group,
            row.n,
            fmt(row.plcc),
            fmt(row.srocc),
            fmt(row.rmse)
        );
    }
}

pub fn predict(a: PredictArgs) -> Result<()> {
    let params = load_checkpoint(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let left = load_gray(&a.left)?;
    let right = load_gray(&a.right)?;
    let score = predict_image(&params, &left, &right)?;
    println!("{score}");
    Ok(())
}
