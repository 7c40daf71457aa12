use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use alt_core::airspace::{AirspaceGeometry, LatLon, RunwayLayout};
use alt_core::dataset::ArrivalSample;
use alt_core::eval::{analysis_report, ape_cdf, compare, metrics, svg_lines, write_cdf_csv, write_metrics_csv, EvalReport};
use alt_core::ingest::Trajectory;
use alt_core::pipeline::{
    build_dataset, create, ingest_points, load_dataset, load_points, load_runways, load_tables, prepare_split,
    train_and_evaluate, write_dataset, PipelineConfig, Precision,
};
use alt_core::raster::{encode_png, render};
use alt_core::simgen::{generate, inject_gaps};
use alt_core::train::{save_checkpoint, write_history, Checkpoint, EpochStats, TensorSet};
use alt_core::{CoreError, Result};
use altnn::Scalar;
use serde::Serialize;

use crate::{Cli, Command, Global, Inputs};

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CoreError + '_ {
    move |e| CoreError::io(path, e)
}

/// Config file (or defaults) with the global flags applied.
fn base_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(p) => PipelineConfig::load(p).map_err(|e| CoreError::Config(format!("cannot use config: {e}")))?,
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(t) = g.threads {
        cfg.threads = t;
    }
    if let Some(d) = &g.out_dir {
        cfg.paths.out_dir = d.clone();
    }
    Ok(cfg)
}

fn apply_inputs(cfg: &mut PipelineConfig, i: &Inputs) {
    let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if v.is_some() {
            slot.clone_from(v);
        }
    };
    set(&mut cfg.paths.adsb, &i.adsb);
    set(&mut cfg.paths.metar, &i.metar);
    set(&mut cfg.paths.fpl, &i.fpl);
    set(&mut cfg.paths.recat, &i.recat);
    set(&mut cfg.paths.runways, &i.runways);
    if let Some((lat, lon)) = i.center {
        cfg.geometry.center = LatLon::new(lat, lon);
    }
    if let Some(v) = i.trc_nm {
        cfg.geometry.trc_radius_nm = v;
    }
    if let Some(v) = i.tbx_nm {
        cfg.geometry.tbx_radius_nm = v;
    }
    if let Some(v) = i.max_gap {
        cfg.max_gap_s = v;
    }
    if let Some(v) = i.holding_window_s {
        cfg.holding.window_s = v;
    }
    if let Some(v) = i.holding_deg {
        cfg.holding.min_turn_deg = v;
    }
}

/// Creates the output directory and records the resolved config in it.
fn start_output(cfg: &PipelineConfig) -> Result<PathBuf> {
    let dir = cfg.paths.out_dir.clone();
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    let p = dir.join("config.resolved.json");
    fs::write(&p, serde_json::to_string_pretty(cfg)?).map_err(io_err(&p))?;
    log::info!("resolved config written to {}", p.display());
    Ok(dir)
}

pub fn run(cli: &Cli) -> Result<()> {
    let mut cfg = base_config(&cli.global)?;
    match &cli.command {
        Command::Simulate { hours, rate, gap_rate } => {
            if let Some(h) = hours {
                cfg.scenario.duration_hours = *h;
            }
            if let Some(r) = rate {
                cfg.scenario.arrival_rate_per_hour = *r;
            }
            simulate(cfg.resolve()?, *gap_rate)
        }
        Command::Ingest { inputs, keep_outliers } => {
            apply_inputs(&mut cfg, inputs);
            cfg.remove_outliers = !keep_outliers;
            ingest(cfg.resolve()?)
        }
        Command::BuildDataset { inputs, tau_s, delta_min, img_size } => {
            apply_inputs(&mut cfg, inputs);
            cfg.tau_s = tau_s.unwrap_or(cfg.tau_s);
            cfg.delta_min = delta_min.unwrap_or(cfg.delta_min);
            cfg.image_size = img_size.unwrap_or(cfg.image_size);
            build(cfg.resolve()?)
        }
        Command::Rasterize { inputs, id, t_ref, tau, img_size } => {
            apply_inputs(&mut cfg, inputs);
            cfg.tau_s = tau.unwrap_or(cfg.tau_s);
            cfg.image_size = img_size.unwrap_or(cfg.image_size);
            rasterize(cfg.resolve()?, id.as_deref(), *t_ref)
        }
        Command::Train { dataset, epochs, batch_size, lr, ablate_holding, precision } => {
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            cfg.train.batch_size = batch_size.unwrap_or(cfg.train.batch_size);
            cfg.train.adam.lr = lr.unwrap_or(cfg.train.adam.lr);
            if *ablate_holding {
                cfg.model = cfg.model.ablated();
            }
            if let Some(p) = precision {
                cfg.precision = parse_precision(p)?;
            }
            let cfg = cfg.resolve()?;
            match cfg.precision {
                Precision::F32 => train::<f32>(&cfg, dataset),
                Precision::F64 => train::<f64>(&cfg, dataset),
            }
        }
        Command::Evaluate { pred, truth, gamma } => {
            cfg.gamma = gamma.unwrap_or(cfg.gamma);
            evaluate(cfg.resolve()?, pred, truth)
        }
        Command::Report { dataset, run, baseline, gamma } => {
            cfg.gamma = gamma.unwrap_or(cfg.gamma);
            report(cfg.resolve()?, dataset, run, baseline.as_deref())
        }
        Command::Grid { inputs, taus, deltas, epochs, ablate_holding } => {
            apply_inputs(&mut cfg, inputs);
            cfg.train.epochs = epochs.unwrap_or(cfg.train.epochs);
            if *ablate_holding {
                cfg.model = cfg.model.ablated();
            }
            grid(cfg.resolve()?, taus, deltas)
        }
    }
}

fn parse_precision(s: &str) -> Result<Precision> {
    match s.to_ascii_lowercase().as_str() {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        other => Err(CoreError::Config(format!("precision must be f32 or f64, got '{other}'"))),
    }
}

fn simulate(cfg: PipelineConfig, gap_rate: f64) -> Result<()> {
    let runways = load_runways(&cfg.paths)?;
    let sim = generate(&cfg.scenario, &cfg.geometry, &runways)?;
    let dir = start_output(&cfg)?;
    sim.write_dir(&dir, &runways)?;
    if gap_rate > 0.0 {
        let full = dir.join("adsb.csv");
        let gappy = dir.join("adsb.gaps.csv");
        let dropped = inject_gaps(fs::File::open(&full).map_err(io_err(&full))?, create(&gappy)?, gap_rate, cfg.seed)?;
        fs::rename(&gappy, &full).map_err(io_err(&full))?;
        log::info!("dropped {dropped} ADS-B rows");
    }
    log::info!("{} aircraft, {} ADS-B points in {}", sim.truth.len(), sim.points.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct IngestSummary {
    points: usize,
    rows_skipped: usize,
    trajectories: usize,
    arrivals: usize,
    linear_fallbacks: usize,
    outliers_removed: usize,
}

fn ingest(cfg: PipelineConfig) -> Result<()> {
    let runways = load_runways(&cfg.paths)?;
    let parsed = load_points(&cfg.paths)?;
    let n_points = parsed.points.len();
    let ing = ingest_points(parsed.points, &cfg.geometry, &runways, cfg.max_gap_s, cfg.remove_outliers)?;
    let dir = start_output(&cfg)?;
    let p = dir.join("arrivals.csv");
    let mut w = csv::Writer::from_writer(create(&p)?);
    for a in &ing.arrivals {
        w.serialize(a)?;
    }
    w.flush().map_err(io_err(&p))?;
    let summary = IngestSummary {
        points: n_points,
        rows_skipped: parsed.skipped,
        trajectories: ing.trajectories.len(),
        arrivals: ing.arrivals.len(),
        linear_fallbacks: ing.linear_fallbacks,
        outliers_removed: ing.outliers_removed,
    };
    let p = dir.join("ingest_summary.json");
    fs::write(&p, serde_json::to_string_pretty(&summary)?).map_err(io_err(&p))?;
    log::info!("{} arrivals from {} trajectories", summary.arrivals, summary.trajectories);
    Ok(())
}

fn build(cfg: PipelineConfig) -> Result<()> {
    let runways = load_runways(&cfg.paths)?;
    let tables = load_tables(&cfg.paths)?;
    let parsed = load_points(&cfg.paths)?;
    let ing = ingest_points(parsed.points, &cfg.geometry, &runways, cfg.max_gap_s, cfg.remove_outliers)?;
    let out = build_dataset(&ing, &tables, &cfg.geometry, &runways, &cfg.build_params());
    if out.samples.is_empty() {
        return Err(CoreError::Data("no usable arrivals in the input".into()));
    }
    let dir = start_output(&cfg)?;
    write_dataset(&dir, &out)?;
    log::info!("{} samples ({} skipped) in {}", out.samples.len(), out.skipped.len(), dir.display());
    Ok(())
}

fn overlapping<'a>(all: &'a [Trajectory], target: &str, from: i64, to: i64) -> Vec<&'a Trajectory> {
    all.iter().filter(|t| t.aircraft_id != target && t.start() <= to && t.end() >= from).collect()
}

fn rasterize(cfg: PipelineConfig, id: Option<&str>, t_ref: Option<i64>) -> Result<()> {
    let runways = load_runways(&cfg.paths)?;
    let parsed = load_points(&cfg.paths)?;
    let ing = ingest_points(parsed.points, &cfg.geometry, &runways, cfg.max_gap_s, false)?;
    let by_id: BTreeMap<&str, &Trajectory> = ing.trajectories.iter().map(|t| (t.aircraft_id.as_str(), t)).collect();
    let trc: BTreeMap<&str, i64> = ing.arrivals.iter().map(|a| (a.aircraft_id.as_str(), a.t_trc)).collect();
    let targets: Vec<(&str, i64)> = match id {
        Some(id) => {
            if !by_id.contains_key(id) {
                return Err(CoreError::Data(format!("no trajectory for {id}")));
            }
            let t = match t_ref.or_else(|| trc.get(id).copied()) {
                Some(t) => t,
                None => return Err(CoreError::Data(format!("{id} never reaches the research circle; pass --t-ref"))),
            };
            vec![(id, t)]
        }
        None => trc.iter().map(|(k, v)| (*k, *v)).collect(),
    };
    if targets.is_empty() {
        return Err(CoreError::Data("no arrivals to render".into()));
    }
    let mut rendered = Vec::with_capacity(targets.len());
    for (tid, t) in targets {
        let others = overlapping(&ing.trajectories, tid, t - cfg.tau_s, t);
        rendered.push(render(by_id[tid], &others, &cfg.geometry, t, cfg.tau_s, cfg.image_size, cfg.image_size)?);
    }
    let dir = start_output(&cfg)?;
    let mut hashes = String::from("file,pixel_sha256\n");
    for img in &rendered {
        encode_png(img, &dir.join(img.file_name()))?;
        hashes.push_str(&format!("{},{}\n", img.file_name(), img.pixel_hash()));
    }
    let p = dir.join("hashes.csv");
    fs::write(&p, hashes).map_err(io_err(&p))?;
    log::info!("rendered {} images", rendered.len());
    Ok(())
}

fn train<T: Scalar + Serialize>(cfg: &PipelineConfig, dataset: &Path) -> Result<()> {
    let (samples, _) = load_dataset(dataset)?;
    if samples.len() < 10 {
        return Err(CoreError::Data(format!("dataset has {} samples; at least 10 are needed", samples.len())));
    }
    let prepared = prepare_split(&samples, cfg.split_ratios(), cfg.seed)?;
    let size = cfg.image_size as usize;
    let sets = (
        TensorSet::<T>::load(&prepared.train, dataset, size)?,
        TensorSet::<T>::load(&prepared.val, dataset, size)?,
        TensorSet::<T>::load(&prepared.test, dataset, size)?,
    );
    let result = train_and_evaluate(&sets, &cfg.model, &cfg.train, cfg.gamma)?;
    let dir = start_output(cfg)?;
    let ckpt = Checkpoint {
        version: alt_core::train::CHECKPOINT_VERSION,
        train: cfg.train.clone(),
        best_epoch: result.outcome.best_epoch,
        best_val_mae: result.outcome.best_val_mae,
        model: result.outcome.best,
    };
    save_checkpoint(&dir.join("checkpoint.json"), &ckpt)?;
    write_history(create(&dir.join("history.csv"))?, &result.outcome.history)?;
    write_predictions(&dir.join("predictions.csv"), &sets.2.ids, &sets.2.labels, &result.test_pred)?;
    write_metrics_csv(&dir.join("metrics.csv"), &result.report)?;
    let p = dir.join("normalizer.json");
    fs::write(&p, serde_json::to_string_pretty(&prepared.normalizer)?).map_err(io_err(&p))?;
    let p = dir.join("split.json");
    fs::write(&p, serde_json::to_string(&prepared.indices)?).map_err(io_err(&p))?;
    log::info!(
        "best epoch {} (val MAE {:.2}); test MAE {:.2}, RMSE {:.2}",
        ckpt.best_epoch,
        ckpt.best_val_mae,
        result.report.mae,
        result.report.rmse
    );
    Ok(())
}

fn write_predictions(path: &Path, ids: &[String], labels: &[f64], pred: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    w.write_record(["id", "label_s", "pred_s"])?;
    for ((id, y), p) in ids.iter().zip(labels).zip(pred) {
        w.write_record([id.clone(), format!("{y}"), format!("{p:.6}")])?;
    }
    w.flush().map_err(io_err(path))
}

/// Reads `(id, value)` pairs from the first matching id and value columns.
fn read_column(path: &Path, id_cols: &[&str], value_cols: &[&str]) -> Result<Vec<(String, f64)>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let find = |names: &[&str]| {
        headers.iter().position(|h| names.contains(&h.trim())).ok_or_else(|| {
            CoreError::Schema(format!("{}: needs one of the columns {}", path.display(), names.join("/")))
        })
    };
    let (ic, vc) = (find(id_cols)?, find(value_cols)?);
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let v: f64 = rec
            .get(vc)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| CoreError::Data(format!("{}: bad value in row {:?}", path.display(), rec)))?;
        out.push((rec.get(ic).unwrap_or_default().trim().to_string(), v));
    }
    Ok(out)
}

fn joined(pred: &Path, truth: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let preds = read_column(pred, &["id", "aircraft_id"], &["pred_s", "pred"])?;
    let labels: BTreeMap<String, f64> =
        read_column(truth, &["id", "aircraft_id"], &["label_s", "label"])?.into_iter().collect();
    let mut y = Vec::with_capacity(preds.len());
    let mut yhat = Vec::with_capacity(preds.len());
    for (id, p) in preds {
        match labels.get(&id) {
            Some(&l) => {
                y.push(l);
                yhat.push(p);
            }
            None => return Err(CoreError::Data(format!("no truth for prediction id {id}"))),
        }
    }
    Ok((y, yhat))
}

fn print_report(r: &EvalReport) {
    println!(
        "n={} rmse={:.3} mae={:.3} mape={:.4} bad_ratio(gamma={})={:.4}",
        r.n, r.rmse, r.mae, r.mape, r.gamma, r.bad_ratio
    );
}

fn evaluate(cfg: PipelineConfig, pred: &Path, truth: &Path) -> Result<()> {
    let (y, yhat) = joined(pred, truth)?;
    let report = metrics(&y, &yhat, cfg.gamma)?;
    let dir = start_output(&cfg)?;
    write_metrics_csv(&dir.join("metrics.csv"), &report)?;
    write_cdf_csv(&dir.join("ape_cdf.csv"), &ape_cdf(&report))?;
    print_report(&report);
    Ok(())
}

fn read_history(path: &Path) -> Result<Vec<EpochStats>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|x| x.map_err(CoreError::from)).collect()
}

fn run_report(run: &Path, gamma: f64) -> Result<(EvalReport, Vec<EpochStats>)> {
    let p = run.join("predictions.csv");
    let (y, yhat) = joined(&p, &p)?;
    Ok((metrics(&y, &yhat, gamma)?, read_history(&run.join("history.csv"))?))
}

fn report(cfg: PipelineConfig, dataset: &Path, run: &Path, baseline: Option<&Path>) -> Result<()> {
    // Everything is loaded and checked before the output directory exists,
    // so a failure leaves no partial report behind.
    let (samples, holdings): (Vec<ArrivalSample>, _) = load_dataset(dataset)?;
    if samples.is_empty() {
        return Err(CoreError::Data(format!("dataset {} is empty", dataset.display())));
    }
    let analysis = analysis_report(&samples, &holdings)?;
    let (main, history) = run_report(run, cfg.gamma)?;
    let base = baseline.map(|b| run_report(b, cfg.gamma)).transpose()?;
    let comparison = base.as_ref().map(|(b, _)| compare(b, &main)).transpose()?;

    let dir = start_output(&cfg)?;
    write_metrics_csv(&dir.join("metrics.csv"), &main)?;
    write_cdf_csv(&dir.join("ape_cdf.csv"), &ape_cdf(&main))?;
    analysis.write_csv(&dir)?;
    let curve = |h: &[EpochStats], f: fn(&EpochStats) -> f64| h.iter().map(|e| (e.epoch as f64, f(e))).collect::<Vec<_>>();
    let (tr, va) = (curve(&history, |e| e.train_mae), curve(&history, |e| e.val_mae));
    let svg = svg_lines("MAE per epoch (s)", &[("train", &tr), ("val", &va)]);
    let p = dir.join("training.svg");
    fs::write(&p, svg).map_err(io_err(&p))?;
    let cdf = ape_cdf(&main);
    let mut series: Vec<(&str, &[(f64, f64)])> = vec![("model", &cdf)];
    let base_cdf = base.as_ref().map(|(b, _)| ape_cdf(b));
    if let Some(c) = &base_cdf {
        series.push(("baseline", c));
    }
    let p = dir.join("ape_cdf.svg");
    fs::write(&p, svg_lines("APE CDF", &series)).map_err(io_err(&p))?;
    if let Some(c) = comparison {
        let p = dir.join("comparison.csv");
        fs::write(&p, c.to_table()).map_err(io_err(&p))?;
        print!("{}", c.to_table());
    }
    print_report(&main);
    Ok(())
}

fn grid(cfg: PipelineConfig, taus: &[i64], deltas: &[i64]) -> Result<()> {
    if taus.is_empty() || deltas.is_empty() {
        return Err(CoreError::Config("grid needs at least one tau and one delta".into()));
    }
    let runways: RunwayLayout = load_runways(&cfg.paths)?;
    let tables = load_tables(&cfg.paths)?;
    let parsed = load_points(&cfg.paths)?;
    let geometry: AirspaceGeometry = cfg.geometry;
    let ing = ingest_points(parsed.points, &geometry, &runways, cfg.max_gap_s, cfg.remove_outliers)?;
    let mut cells = Vec::new();
    for &tau in taus {
        for &delta in deltas {
            let mut c = cfg.clone();
            c.tau_s = tau;
            c.delta_min = delta;
            let c = c.resolve()?;
            let out = build_dataset(&ing, &tables, &geometry, &runways, &c.build_params());
            if out.samples.len() < 10 {
                return Err(CoreError::Data(format!("tau {tau} delta {delta}: only {} samples", out.samples.len())));
            }
            let prepared = prepare_split(&out.samples, c.split_ratios(), c.seed)?;
            let r = match c.precision {
                Precision::F32 => cell::<f32>(&c, &out, &prepared)?,
                Precision::F64 => cell::<f64>(&c, &out, &prepared)?,
            };
            log::info!("tau {tau} s, delta {delta} min: test MAE {:.2}", r.mae);
            cells.push((tau, delta, r));
        }
    }
    let dir = start_output(&cfg)?;
    let mut m = String::from("tau_s\\delta_min");
    for d in deltas {
        m.push_str(&format!(",{d}"));
    }
    m.push('\n');
    for &tau in taus {
        m.push_str(&tau.to_string());
        for &d in deltas {
            let r = &cells.iter().find(|(t, dd, _)| *t == tau && *dd == d).expect("every cell was run").2;
            m.push_str(&format!(",{:.4}", r.mae));
        }
        m.push('\n');
    }
    let p = dir.join("grid_mae.csv");
    fs::write(&p, &m).map_err(io_err(&p))?;
    let p = dir.join("grid_metrics.csv");
    let mut f = create(&p)?;
    writeln!(f, "tau_s,delta_min,n,rmse,mae,mape,bad_ratio").map_err(io_err(&p))?;
    for (t, d, r) in &cells {
        writeln!(f, "{t},{d},{},{:.6},{:.6},{:.6},{:.6}", r.n, r.rmse, r.mae, r.mape, r.bad_ratio).map_err(io_err(&p))?;
    }
    f.flush().map_err(io_err(&p))?;
    print!("{m}");
    Ok(())
}

fn cell<T: Scalar>(
    cfg: &PipelineConfig,
    out: &alt_core::dataset::BuildOutput,
    prepared: &alt_core::pipeline::PreparedSplit,
) -> Result<EvalReport> {
    let sets = alt_core::pipeline::tensor_sets::<T>(out, prepared, cfg.image_size as usize)?;
    Ok(train_and_evaluate(&sets, &cfg.model, &cfg.train, cfg.gamma)?.report)
}

