use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use mfmasc_core::dataset::label_index;
use mfmasc_core::synth::{self, SynthConfig};
use mfmasc_core::train::{self, Control};
use mfmasc_core::{DatasetIndex, Entry, EpochLog, Example, FeatureCache, Lcnn, RunConfig, Split};

use crate::{Cli, Command, EvaluateArgs, FeaturesArgs, Failure, IngestArgs, PredictArgs, SynthArgs, TrainArgs};

pub const CACHE_ENV: &str = "MFMASC_CACHE";

type Result<T> = std::result::Result<T, Failure>;

struct Ctx {
    cfg: RunConfig,
    threads: usize,
}

impl Ctx {
    fn new(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()) {
            cfg.paths.cache_dir = dir.into();
        }
        cfg.validate()?;
        let threads = match cli.threads {
            Some(0) => return Err(Failure::new("config", "--threads must be at least 1")),
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, |n| n.get()),
        };
        Ok(Ctx { cfg, threads })
    }

    fn cache(&self, dir: &Option<PathBuf>) -> Result<FeatureCache> {
        let dir = dir.as_ref().unwrap_or(&self.cfg.paths.cache_dir);
        Ok(FeatureCache::new(dir, &self.cfg.features)?)
    }

    fn index(&self, path: &Option<PathBuf>) -> Result<DatasetIndex> {
        let path = path.as_ref().unwrap_or(&self.cfg.paths.index);
        DatasetIndex::load(path).map_err(|e| Failure::new(e.class(), format!("index {}: {e}", path.display())))
    }

    fn model(&self, path: &Option<PathBuf>) -> Result<Lcnn<f32>> {
        let path = path.as_ref().unwrap_or(&self.cfg.paths.model);
        let model =
            Lcnn::load(path).map_err(|e| Failure::new(e.class(), format!("model {}: {e}", path.display())))?;
        let (bins, mels) = (model.config().input_bins, self.cfg.features.n_mels);
        if bins != mels {
            return Err(Failure::new(
                "config",
                format!("model expects {bins} mel bins but the feature configuration produces {mels}"),
            ));
        }
        if model.config().num_classes != self.cfg.labels.len() {
            return Err(Failure::new(
                "config",
                format!("model has {} classes but data.labels lists {}", model.config().num_classes, self.cfg.labels.len()),
            ));
        }
        Ok(model)
    }

    /// Features for `entries` in order, extracting missing cache entries.
    fn examples(&self, entries: &[&Entry], cache: &FeatureCache) -> Result<Vec<Example>> {
        let results = par_map(entries, self.threads, |e| {
            let label = label_index(&self.cfg.labels, &e.label)?;
            Ok(Example { spec: cache.get(&e.path)?.0, label })
        });
        collect_all(results)
    }
}

/// Applies `f` to every item on up to `threads` scoped workers; results
/// keep the input order.
fn par_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if threads <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

/// All values, or one failure summarizing every error.
fn collect_all<T>(results: Vec<mfmasc_core::Result<T>>) -> Result<Vec<T>> {
    let mut ok = Vec::with_capacity(results.len());
    let mut errors = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => errors.push(e),
        }
    }
    match errors.len() {
        0 => Ok(ok),
        1 => Err(errors.remove(0).into()),
        n => {
            let list: Vec<String> = errors.iter().map(|e| e.to_string()).collect();
            Err(Failure::new(errors[0].class(), format!("{n} clips failed: {}", list.join("; "))))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let ctx = Ctx::new(&cli)?;
    match &cli.command {
        Command::Ingest(a) => ingest(&ctx, a),
        Command::Features(a) => features(&ctx, a),
        Command::Train(a) => train_cmd(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Predict(a) => predict(&ctx, a),
        Command::Synth(a) => synth_cmd(&ctx, a),
    }
}

fn ingest(ctx: &Ctx, a: &IngestArgs) -> Result<()> {
    let text = fs::read_to_string(&a.meta)
        .map_err(|e| Failure::new("io", format!("cannot read {}: {e}", a.meta.display())))?;
    let root = match &a.audio_root {
        Some(r) => r.clone(),
        None => a.meta.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    let root = if root.as_os_str().is_empty() { PathBuf::from(".") } else { root };
    let root = fs::canonicalize(&root)
        .map_err(|e| Failure::new("io", format!("audio root {}: {e}", root.display())))?;
    let index = DatasetIndex::from_metadata(&text, &root, &ctx.cfg.labels, a.split)?;
    let out = a.out.as_ref().unwrap_or(&ctx.cfg.paths.index);
    index.save(out)?;
    println!("label\ttrain\ttest");
    let train = index.class_counts(&ctx.cfg.labels, Split::Train);
    let test = index.class_counts(&ctx.cfg.labels, Split::Test);
    for ((label, tr), te) in ctx.cfg.labels.iter().zip(train).zip(test) {
        println!("{label}\t{tr}\t{te}");
    }
    println!("wrote {} entries to {}", index.entries.len(), out.display());
    Ok(())
}

fn features(ctx: &Ctx, a: &FeaturesArgs) -> Result<()> {
    let index = ctx.index(&a.index)?;
    let cache = ctx.cache(&a.cache)?;
    let results = par_map(&index.entries, ctx.threads, |e| cache.get(&e.path).map(|(_, fresh)| fresh));
    let fresh = collect_all(results)?;
    let extracted = fresh.iter().filter(|f| **f).count();
    println!("{extracted} extracted, {} already cached", fresh.len() - extracted);
    Ok(())
}

fn cycle_snapshot(model: &Path, cycle: usize) -> PathBuf {
    let mut s = model.as_os_str().to_owned();
    s.push(format!(".cycle{cycle}"));
    s.into()
}

fn train_cmd(ctx: &Ctx, a: &TrainArgs) -> Result<()> {
    let cfg = &ctx.cfg;
    let index = ctx.index(&a.index)?;
    let cache = ctx.cache(&a.cache)?;
    let train_entries: Vec<&Entry> = index.split(Split::Train).collect();
    if train_entries.is_empty() {
        return Err(Failure::new("data", "the index has no train entries"));
    }
    let val_entries: Vec<&Entry> = index.split(Split::Test).collect();
    let train_set = ctx.examples(&train_entries, &cache)?;
    let val_set = ctx.examples(&val_entries, &cache)?;
    info!("training on {} clips, validating on {}", train_set.len(), val_set.len());

    let model_path = a.model.as_ref().unwrap_or(&cfg.paths.model);
    let log_path = a.log.as_ref().unwrap_or(&cfg.paths.log);
    let mut log = fs::File::create(log_path)
        .map_err(|e| Failure::new("io", format!("cannot create log {}: {e}", log_path.display())))?;
    writeln!(log, "{}", EpochLog::HEADER)?;
    println!("{}", EpochLog::HEADER);

    let mut model = Lcnn::build(cfg.model.clone(), cfg.seed)?;
    let schedule = cfg.train.schedule;
    let (mut best, mut cycle) = (f64::NEG_INFINITY, 0);
    let mut io_error = None;
    train::train(&mut model, &train_set, &val_set, &cfg.train, cfg.seed, |entry, m| {
        println!("{entry}");
        let mut step = || -> mfmasc_core::Result<()> {
            writeln!(log, "{entry}")?;
            log.flush()?;
            if schedule.is_cycle_end(entry.epoch) {
                cycle += 1;
                m.save(&cycle_snapshot(model_path, cycle))?;
            }
            if entry.val_acc > best {
                best = entry.val_acc;
                m.save(model_path)?;
            }
            Ok(())
        };
        match step() {
            Ok(()) => Ok(Control::Continue),
            Err(e) => {
                io_error = Some(e);
                Ok(Control::Stop)
            }
        }
    })?;
    if let Some(e) = io_error {
        return Err(e.into());
    }
    if val_set.is_empty() {
        model.save(model_path)?;
        println!("saved final model to {}", model_path.display());
    } else {
        println!("saved best model (val_acc {best:.4}) to {}", model_path.display());
    }
    Ok(())
}

fn evaluate(ctx: &Ctx, a: &EvaluateArgs) -> Result<()> {
    let model = ctx.model(&a.model)?;
    let index = ctx.index(&a.index)?;
    let entries: Vec<&Entry> = index.split(a.split).collect();
    if entries.is_empty() {
        return Err(Failure::new("data", format!("the index has no {} entries", a.split)));
    }
    if a.top_k > 45 {
        return Err(Failure::new("config", "--top-k must be at most 45"));
    }
    let cache = ctx.cache(&a.cache)?;
    let data = ctx.examples(&entries, &cache)?;
    let average = ctx.cfg.train.average;
    let preds = par_map(&data, ctx.threads, |e| train::predict(&model, &e.spec, average));
    let preds = collect_all(preds)?;
    let mut metrics = mfmasc_core::Metrics::new(model.config().num_classes);
    for (e, p) in data.iter().zip(&preds) {
        metrics.record(e.label, mfmasc_core::metrics::argmax(p));
    }
    print!("{}", metrics.report(&ctx.cfg.labels, a.top_k));
    Ok(())
}

fn predict(ctx: &Ctx, a: &PredictArgs) -> Result<()> {
    let model = ctx.model(&a.model)?;
    let extractor = mfmasc_core::Extractor::new(&ctx.cfg.features)?;
    let spec = extractor
        .from_file(&a.wav)
        .map_err(|e| Failure::new(e.class(), format!("{}: {e}", a.wav.display())))?;
    let p = train::predict(&model, &spec, ctx.cfg.train.average)?;
    let label = &ctx.cfg.labels[mfmasc_core::metrics::argmax(&p)];
    let probs: Vec<String> = p.iter().map(|v| v.to_string()).collect();
    println!("{label}\t{}", probs.join(","));
    Ok(())
}

fn synth_cmd(ctx: &Ctx, a: &SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        train_per_class: a.per_class,
        test_per_class: a.test_per_class,
        seed: ctx.cfg.seed,
        duration_s: a.duration,
    };
    let meta = synth::generate(&a.out, &cfg)
        .map_err(|e| Failure::new(e.class(), format!("{}: {e}", a.out.display())))?;
    println!("wrote {} clips and {}", 10 * (a.per_class + a.test_per_class), meta.display());
    Ok(())
}
