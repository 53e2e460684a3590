use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};

use serde_json::json;
use sfuda_core::data::{
    make_benchmark, read_dataset, read_meta, write_dataset, Benchmark, BenchmarkSpec, DomainShiftSpec, SceneSpec,
    SplitKind,
};
use sfuda_core::metrics::{probe_table_csv, StabilityReport};
use sfuda_core::model::{read_checkpoint, write_checkpoint, BnMode, Checkpoint, SegModel};
use sfuda_core::pseudolabel::{dtpl_pseudo_label, label_coverage_stats, ld_pseudo_label};
use sfuda_core::trainer::{
    adapt_into_run_dir, ablation_csv, evaluate_dice, history_csv, images_to_tensor, train_source, AblationCell,
    AblationGroup, AdaptationConfig, RunDir,
};
use sfuda_core::{Error, Result};

use crate::args::{
    AblationArgs, AdaptArgs, AdaptFlags, Common, EvaluateArgs, GenDataArgs, PseudoLabelArgs, TrainSourceArgs,
};
use crate::config::{output_dir, start_run, FileConfig, DEFAULT_SEED};
use crate::render;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(value).expect("value serializes") + "\n"))
}

fn master_seed(common: &Common, file: &FileConfig) -> u64 {
    common.seed.or(file.seed).unwrap_or(DEFAULT_SEED)
}

fn parse_split(s: &str) -> Result<SplitKind> {
    SplitKind::ALL
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| Error::Config(format!("unknown split {s:?} (expected source-train, source-val, target-train or target-val)")))
}

fn parse_ratio(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("split ratio {s:?} must look like 4:1"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok((a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?))
}

fn load_source(data: &Path, snapshot: &Path) -> Result<(Benchmark, SegModel<f32>)> {
    let bench = read_dataset(data)?;
    let model = read_checkpoint(snapshot)?.to_model()?;
    if model.classes() != bench.spec.scene.num_classes {
        return Err(Error::Config(format!(
            "snapshot predicts {} classes but the dataset has {}",
            model.classes(),
            bench.spec.scene.num_classes
        )));
    }
    Ok((bench, model))
}

pub fn gen_data(a: &GenDataArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let seed = master_seed(&a.common, &file);
    let mut spec = match (a.preset.as_deref(), file.data) {
        (None, Some(spec)) => spec,
        (None | Some("default"), _) => BenchmarkSpec::default(),
        (Some("small"), _) => BenchmarkSpec {
            scene: SceneSpec {
                image_size: 32,
                ..SceneSpec::default()
            },
            per_domain: 25,
            ..BenchmarkSpec::default()
        },
        (Some(other), _) => return Err(Error::Config(format!("unknown preset {other:?} (expected default or small)"))),
    };
    spec.seed = seed;
    if let Some(r) = &a.split {
        spec.split_ratio = parse_ratio(r)?;
    }
    if let Some(n) = a.per_domain {
        spec.per_domain = n;
    }
    if let Some(s) = &a.shift {
        spec.target_shift = s
            .split(',')
            .filter(|t| !t.trim().is_empty())
            .map(|t| DomainShiftSpec::parse(t.trim()))
            .collect::<Result<_>>()?;
    }
    spec.validate()?;
    let out = output_dir(a.common.out.as_deref(), &format!("data-seed{seed}"));
    start_run(&out, a.common.force, "gen-data", a.common.config.as_deref(), seed)?;
    let bench = make_benchmark(&spec)?;
    write_dataset(&bench, &out)?;
    read_meta(&out)?;
    let (train, val) = spec.counts()?;
    let shift: Vec<String> = spec.target_shift.iter().map(|s| format!("{}:{}", s.kind, s.magnitude)).collect();
    println!("dataset: {}", out.display());
    println!(
        "per domain: {train} train / {val} val ({}x{}, {} classes)",
        spec.scene.image_size, spec.scene.image_size, spec.scene.num_classes
    );
    println!("target shift: {}", if shift.is_empty() { "identity".into() } else { shift.join(", ") });
    Ok(())
}

pub fn train_source_cmd(a: &TrainSourceArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let seed = master_seed(&a.common, &file);
    let bench = read_dataset(&a.data)?;
    let mut descriptor = file.model.unwrap_or_default();
    if let Some(c) = &a.channels {
        descriptor.channels = c.clone();
    }
    descriptor.classes = bench.spec.scene.num_classes;
    descriptor.seed = seed;
    let mut cfg = file.source.unwrap_or_default();
    cfg.seed = seed;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.wd {
        cfg.weight_decay = v;
    }
    if a.no_augment {
        cfg.augment = false;
    }
    cfg.validate()?;
    descriptor.validate()?;

    let out = output_dir(a.common.out.as_deref(), &format!("source-seed{seed}"));
    start_run(&out, a.common.force, "train-source", a.common.config.as_deref(), seed)?;
    write_json(&out.join("source_config.json"), &json!({ "model": descriptor, "source": cfg }))?;
    let model = SegModel::new(descriptor)?;
    let outcome = train_source(&model, &bench.source_train, &bench.source_val, &cfg)?;
    write_checkpoint(&out.join("source.snap"), &Checkpoint::from_model(&outcome.model))?;
    write_file(&out.join("history.csv"), &history_csv(&outcome.history))?;
    write_json(
        &out.join("summary.json"),
        &json!({ "best_epoch": outcome.best_epoch, "best_val_dice": outcome.best_val_dice }),
    )?;
    println!("snapshot: {}", out.join("source.snap").display());
    match outcome.best_val_dice {
        Some(d) => println!("best source-val Dice {d:.4} at epoch {}", outcome.best_epoch),
        None => println!("no training epochs; wrote the initialized model"),
    }
    Ok(())
}

fn apply_flags(cfg: &mut AdaptationConfig, f: &AdaptFlags) -> Result<()> {
    if let Some(m) = &f.method {
        cfg.method = m.parse()?;
    }
    cfg.use_wc |= f.wc;
    if let Some(v) = f.wc_coef {
        cfg.wc_coefficient = v;
    }
    cfg.wc_normalized |= f.wc_normalized;
    cfg.use_ei |= f.ei;
    if let Some(e) = &f.entropy {
        cfg.entropy_mode = e.parse()?;
    }
    if let Some(v) = f.entropy_coef {
        cfg.entropy_coefficient = v;
    }
    if let Some(v) = f.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = f.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = f.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = f.wd {
        cfg.weight_decay = v;
    }
    if let Some(v) = f.alpha {
        cfg.threshold.alpha = v;
    }
    if let Some(v) = f.lambda {
        cfg.threshold.lambda = v;
    }
    if let Some(r) = &f.refresh {
        cfg.pseudo_label_refresh = r.parse()?;
    }
    if f.no_augment {
        cfg.augment = false;
    }
    cfg.bn_train_mode |= f.bn_train;
    if let Some(p) = &f.probe {
        cfg.probe_epochs = p.clone();
    }
    if let Some(s) = &f.snapshot_epochs {
        cfg.snapshot_epochs = s.clone();
    }
    cfg.validate()
}

fn print_report(report: Option<&StabilityReport>, probes: &[usize]) {
    match report {
        Some(r) => {
            print!("{}", probe_table_csv(probes, &[("dice".into(), Some(r))]));
            if !r.omitted_probes.is_empty() {
                println!("probe epochs beyond the run: {:?}", r.omitted_probes);
            }
        }
        None => println!("no epochs run; the model is unchanged"),
    }
}

pub fn adapt(a: &AdaptArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let mut cfg = match &a.config_json {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(io_err(p))?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => file.adapt.clone().unwrap_or_default(),
    };
    match a.common.seed.or(file.seed) {
        Some(s) => cfg.seed = s,
        None if a.config_json.is_none() => cfg.seed = DEFAULT_SEED,
        None => {}
    }
    apply_flags(&mut cfg, &a.flags)?;
    let (bench, model) = load_source(&a.data, &a.snapshot)?;
    let theta_star = model.snapshot();

    let out = output_dir(a.common.out.as_deref(), &format!("adapt-{}-seed{}", cfg.method, cfg.seed));
    start_run(&out, a.common.force, "adapt", a.common.config.as_deref(), cfg.seed)?;
    let dir = RunDir::create(&out)?;
    let outcome = adapt_into_run_dir(&model, &theta_star, &bench.target_train, &bench.target_val, &cfg, &dir)?;
    if a.plot {
        if let Some(r) = &outcome.report {
            render::dice_curve(&r.per_epoch_dice, &out.join("dice_curve.png"))?;
        }
    }
    println!("run: {}", out.display());
    print_report(outcome.report.as_ref(), &cfg.probe_epochs);
    Ok(())
}

fn exit_error(code: Option<i32>, dir: &Path, log: &Path) -> Error {
    let reason = format!("run failed (see {})", log.display());
    match code {
        Some(2) => Error::Config(reason),
        Some(4) => Error::Numerical(reason),
        _ => Error::Format {
            path: dir.to_path_buf(),
            reason,
        },
    }
}

pub fn ablation(a: &AblationArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let seed = master_seed(&a.common, &file);
    let mut base = file.adapt.clone().unwrap_or_default();
    base.seed = seed;
    // group switches are applied per cell; validate the rest here
    apply_flags(&mut base, &AdaptFlags { ei: false, wc: false, entropy: None, ..a.flags.clone() })?;
    let groups = AblationGroup::parse_list(&a.groups)?;
    if groups.is_empty() {
        return Err(Error::Config("--groups selects no cells".into()));
    }
    if a.jobs == 0 {
        return Err(Error::Config("--jobs must be at least 1".into()));
    }
    let (bench, model) = load_source(&a.data, &a.snapshot)?;
    let theta_star = model.snapshot();

    let out = output_dir(a.common.out.as_deref(), &format!("ablation-seed{seed}"));
    start_run(&out, a.common.force, "ablation", a.common.config.as_deref(), seed)?;
    let cells_dir = out.join("cells");
    fs::create_dir_all(&cells_dir).map_err(io_err(&cells_dir))?;

    let mut cells: Vec<AblationCell> = Vec::new();
    let mut errors: Vec<Error> = Vec::new();
    if a.jobs == 1 {
        for g in &groups {
            let cfg = g.configure(&base);
            let result = cfg.validate().and_then(|_| {
                let dir = RunDir::create(&cells_dir.join(g.to_string()))?;
                adapt_into_run_dir(&model, &theta_star, &bench.target_train, &bench.target_val, &cfg, &dir)?
                    .report
                    .ok_or_else(|| Error::Config("cell ran no epochs".into()))
            });
            let result = result.map_err(|e| {
                let msg = e.to_string();
                errors.push(e);
                msg
            });
            cells.push(AblationCell {
                name: g.to_string(),
                config: cfg,
                result,
            });
        }
    } else {
        let exe = std::env::current_exe().map_err(|e| Error::Io {
            path: PathBuf::from("current executable"),
            source: e,
        })?;
        let mut pending: Vec<(AblationGroup, AdaptationConfig, PathBuf, PathBuf)> = Vec::new();
        for g in &groups {
            let cfg = g.configure(&base);
            let cfg_path = cells_dir.join(format!("{g}.config.json"));
            write_json(&cfg_path, &cfg)?;
            pending.push((*g, cfg, cfg_path, cells_dir.join(g.to_string())));
        }
        let mut running: Vec<(usize, Child)> = Vec::new();
        let mut codes: Vec<Option<i32>> = vec![None; pending.len()];
        for (i, (g, _, cfg_path, dir)) in pending.iter().enumerate() {
            if running.len() == a.jobs {
                let (j, mut child) = running.remove(0);
                codes[j] = child.wait().map_err(io_err(&exe))?.code();
            }
            let log_path = cells_dir.join(format!("{g}.log"));
            let log = fs::File::create(&log_path).map_err(io_err(&log_path))?;
            let err_log = log.try_clone().map_err(io_err(&log_path))?;
            let child = Command::new(&exe)
                .arg("adapt")
                .arg("--data")
                .arg(&a.data)
                .arg("--snapshot")
                .arg(&a.snapshot)
                .arg("--out")
                .arg(dir)
                .arg("--config-json")
                .arg(cfg_path)
                .stdout(Stdio::from(log))
                .stderr(Stdio::from(err_log))
                .spawn()
                .map_err(io_err(&exe))?;
            running.push((i, child));
        }
        for (j, mut child) in running {
            codes[j] = child.wait().map_err(io_err(&exe))?.code();
        }
        for ((g, cfg, _, dir), code) in pending.into_iter().zip(codes) {
            let log = cells_dir.join(format!("{g}.log"));
            let report: Option<StabilityReport> = (code == Some(0))
                .then(|| fs::read_to_string(dir.join("report.json")).ok())
                .flatten()
                .and_then(|t| serde_json::from_str(&t).ok())
                .flatten();
            let result = match report {
                Some(r) => Ok(r),
                None => {
                    let e = exit_error(code, &dir, &log);
                    let msg = e.to_string();
                    errors.push(e);
                    Err(msg)
                }
            };
            cells.push(AblationCell {
                name: g.to_string(),
                config: cfg,
                result,
            });
        }
    }

    let csv = ablation_csv(&cells, &base.probe_epochs);
    write_file(&out.join("ablation.csv"), &csv)?;
    print!("{csv}");
    for c in &cells {
        if let Err(e) = &c.result {
            eprintln!("cell {} failed: {e}", c.name);
        }
    }
    if errors.len() == cells.len() {
        return Err(errors.swap_remove(0));
    }
    Ok(())
}

pub fn evaluate(a: &EvaluateArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let seed = master_seed(&a.common, &file);
    let split = parse_split(&a.split)?;
    let (bench, model) = load_source(&a.data, &a.snapshot)?;
    let dice = evaluate_dice(&model, &bench.labeled(split))?;
    let result = json!({
        "snapshot": a.snapshot.display().to_string(),
        "split": split.name(),
        "images": bench.len(split),
        "mean_dice": dice,
    });
    if let Some(out) = &a.common.out {
        start_run(out, a.common.force, "evaluate", a.common.config.as_deref(), seed)?;
        write_json(&out.join("evaluation.json"), &result)?;
    }
    println!("{}", serde_json::to_string_pretty(&result).expect("json"));
    Ok(())
}

pub fn pseudo_labels(a: &PseudoLabelArgs) -> Result<()> {
    let file = FileConfig::load(a.common.config.as_deref())?;
    let seed = master_seed(&a.common, &file);
    let mut threshold = file.adapt.map(|c| c.threshold).unwrap_or_default();
    if let Some(v) = a.alpha {
        threshold.alpha = v;
    }
    if let Some(v) = a.lambda {
        threshold.lambda = v;
    }
    threshold.validate()?;
    let split = parse_split(&a.split)?;
    let (bench, model) = load_source(&a.data, &a.snapshot)?;
    let samples: Vec<_> = bench.labeled(split).into_iter().take(a.count).collect();

    let out = output_dir(a.common.out.as_deref(), &format!("pseudo-labels-seed{seed}"));
    start_run(&out, a.common.force, "pseudo-labels", a.common.config.as_deref(), seed)?;
    let overlays = out.join("overlays");
    fs::create_dir_all(&overlays).map_err(io_err(&overlays))?;
    let mut coverage = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        let p = model
            .predict(&images_to_tensor(&[&s.image]), BnMode::Running)?
            .pop()
            .expect("one image in, one map out");
        let ld = ld_pseudo_label(&p, threshold.alpha)?;
        let dtpl = dtpl_pseudo_label(&p, &threshold)?;
        render::overlay_panel(&s.image, &[&ld, &dtpl], &s.mask, &overlays.join(format!("{i:04}.png")))?;
        coverage.push(json!({
            "id": s.id,
            "ld": label_coverage_stats(&ld),
            "dtpl": label_coverage_stats(&dtpl),
        }));
    }
    write_json(&out.join("coverage.json"), &json!({ "threshold": threshold, "images": coverage }))?;
    println!("wrote {} panels (image | LD | DTPL | truth) to {}", samples.len(), overlays.display());
    Ok(())
}
