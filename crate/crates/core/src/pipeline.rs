//! End-to-end wiring shared by the command line and the tests: one config
//! with a single seed, and the steps from raw points to test metrics.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use altnn::Scalar;
use serde::{Deserialize, Serialize};

use crate::airspace::{AirspaceGeometry, RunwayLayout};
use crate::dataset::{
    build_samples, manifest_path, read_fpl, read_manifest, read_metar, read_recat_map, split, write_manifest,
    ArrivalSample, BuildInputs, BuildOutput, BuildParams, MetarRow, Normalizer, SplitIndices,
};
use crate::error::{CoreError, Result};
use crate::eval::{metrics, EvalReport};
use crate::holding::HoldingParams;
use crate::ingest::{
    assemble_trajectories, extract_arrivals, parse_adsb, remove_outliers, AdsbPoint, ArrivalRecord, ColumnMap,
    ParsedAdsb, Trajectory, DEFAULT_MAX_GAP,
};
use crate::raster::encode_png;
use crate::model::{Model, ModelConfig};
use crate::simgen::{ScenarioConfig, SimOutput};
use crate::train::{fit_output_scaling, predict, train, TensorSet, TrainConfig, TrainOutcome};

/// Element type used for training and inference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Paths {
    pub adsb: Option<PathBuf>,
    pub metar: Option<PathBuf>,
    pub fpl: Option<PathBuf>,
    pub recat: Option<PathBuf>,
    pub runways: Option<PathBuf>,
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Governs the simulator, split, weight init, shuffling and dropout.
    pub seed: u64,
    pub threads: usize,
    pub paths: Paths,
    pub tau_s: i64,
    pub delta_min: i64,
    pub image_size: u32,
    pub tz_offset_hours: i32,
    pub max_gap_s: i64,
    pub remove_outliers: bool,
    pub split: [f64; 3],
    pub gamma: f64,
    pub precision: Precision,
    pub geometry: AirspaceGeometry,
    pub holding: HoldingParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scenario: ScenarioConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            threads: 1,
            paths: Paths { out_dir: PathBuf::from("out"), ..Paths::default() },
            tau_s: 60,
            delta_min: 10,
            image_size: 64,
            tz_offset_hours: 8,
            max_gap_s: DEFAULT_MAX_GAP,
            remove_outliers: true,
            split: [0.7, 0.15, 0.15],
            gamma: 0.3,
            precision: Precision::F64,
            geometry: AirspaceGeometry::default(),
            holding: HoldingParams::default(),
            model: ModelConfig::desk(),
            train: TrainConfig::default(),
            scenario: ScenarioConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CoreError::Config(format!("{}: {e}", path.display())))
    }

    /// Pushes the top-level seed and image size into the nested configs
    /// and checks ranges.
    pub fn resolve(mut self) -> Result<Self> {
        self.scenario.seed = self.seed;
        self.train.seed = self.seed;
        self.model.init_seed = self.seed;
        self.model.image_size = self.image_size as usize;
        self.threads = self.threads.max(1);
        if self.tau_s <= 0 || self.delta_min <= 0 {
            return Err(CoreError::Config(format!(
                "tau ({}) and delta ({}) must be positive",
                self.tau_s, self.delta_min
            )));
        }
        if !(self.gamma > 0.0) {
            return Err(CoreError::Config(format!("gamma must be positive, got {}", self.gamma)));
        }
        self.geometry.validate()?;
        self.model.validate()?;
        Ok(self)
    }

    pub fn build_params(&self) -> BuildParams {
        BuildParams {
            tau_s: self.tau_s,
            delta_s: self.delta_min * 60,
            img_size: self.image_size,
            tz_offset_hours: self.tz_offset_hours,
            holding: self.holding,
            threads: self.threads,
        }
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        (self.split[0], self.split[1], self.split[2])
    }
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub trajectories: Vec<Trajectory>,
    pub arrivals: Vec<ArrivalRecord>,
    pub linear_fallbacks: usize,
    pub outliers_removed: usize,
}

/// Imputes and splits tracks, extracts arrivals and optionally drops label
/// outliers.
pub fn ingest_points(
    points: Vec<AdsbPoint>,
    geometry: &AirspaceGeometry,
    runways: &RunwayLayout,
    max_gap: i64,
    drop_outliers: bool,
) -> Result<Ingested> {
    let asm = assemble_trajectories(points, max_gap)?;
    let arrivals = extract_arrivals(&asm.trajectories, geometry, runways);
    let before = arrivals.len();
    let arrivals = if drop_outliers { remove_outliers(arrivals) } else { arrivals };
    Ok(Ingested {
        outliers_removed: before - arrivals.len(),
        trajectories: asm.trajectories,
        arrivals,
        linear_fallbacks: asm.linear_fallbacks,
    })
}

/// Weather, flight plans and the type-to-RECAT map.
#[derive(Debug, Clone, Default)]
pub struct Tables {
    pub metar: Vec<MetarRow>,
    pub fpl: BTreeMap<String, String>,
    pub recat_map: BTreeMap<String, u8>,
}

impl Tables {
    pub fn from_sim(sim: &SimOutput) -> Self {
        Self {
            metar: sim.metar.clone(),
            fpl: sim.flight_plans.iter().map(|f| (f.aircraft_id.clone(), f.actype.clone())).collect(),
            recat_map: sim.recat_map.iter().cloned().collect(),
        }
    }
}

pub fn build_dataset(
    ingested: &Ingested,
    tables: &Tables,
    geometry: &AirspaceGeometry,
    runways: &RunwayLayout,
    params: &BuildParams,
) -> BuildOutput {
    let inputs = BuildInputs {
        arrivals: &ingested.arrivals,
        trajectories: &ingested.trajectories,
        metar: &tables.metar,
        fpl: &tables.fpl,
        recat_map: &tables.recat_map,
        geometry,
        runways,
    };
    build_samples(&inputs, params)
}

/// Split indices plus normalized copies of each part.
#[derive(Debug, Clone)]
pub struct PreparedSplit {
    pub indices: SplitIndices,
    pub normalizer: Normalizer,
    pub train: Vec<ArrivalSample>,
    pub val: Vec<ArrivalSample>,
    pub test: Vec<ArrivalSample>,
}

pub fn prepare_split(samples: &[ArrivalSample], ratios: (f64, f64, f64), seed: u64) -> Result<PreparedSplit> {
    let indices = split(samples.len(), ratios, seed)?;
    let take = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    let (mut tr, mut va, mut te) = (take(&indices.train), take(&indices.val), take(&indices.test));
    let normalizer = Normalizer::fit(&tr)?;
    for part in [&mut tr, &mut va, &mut te] {
        normalizer.apply(part);
    }
    Ok(PreparedSplit { indices, normalizer, train: tr, val: va, test: te })
}

/// Tensor sets for one split, pairing samples with in-memory rasters.
pub fn tensor_sets<T: Scalar>(
    output: &BuildOutput,
    prepared: &PreparedSplit,
    size: usize,
) -> Result<(TensorSet<T>, TensorSet<T>, TensorSet<T>)> {
    let px = |idx: &[usize]| idx.iter().map(|&i| output.images[i].pixels.as_slice()).collect::<Vec<_>>();
    Ok((
        TensorSet::from_pixels(&prepared.train, px(&prepared.indices.train), size)?,
        TensorSet::from_pixels(&prepared.val, px(&prepared.indices.val), size)?,
        TensorSet::from_pixels(&prepared.test, px(&prepared.indices.test), size)?,
    ))
}

#[derive(Debug, Clone)]
pub struct RunResult<T> {
    pub outcome: TrainOutcome<T>,
    pub test_pred: Vec<f64>,
    pub report: EvalReport,
}

/// Fits output scaling on the training labels, trains, and scores the
/// best-validation snapshot on the test set.
pub fn train_and_evaluate<T: Scalar>(
    sets: &(TensorSet<T>, TensorSet<T>, TensorSet<T>),
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    gamma: f64,
) -> Result<RunResult<T>> {
    let (tr, va, te) = sets;
    let mut model = Model::<T>::new(model_cfg.clone())?;
    fit_output_scaling(&mut model, &tr.labels);
    let outcome = train(&mut model, tr, va, train_cfg)?;
    let test_pred = predict(&outcome.best, te, train_cfg.batch_size);
    let report = metrics(&te.labels, &test_pred, gamma)?;
    Ok(RunResult { outcome, test_pred, report })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| CoreError::io(path, e))
}

pub fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CoreError::io(path, e))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().ok_or_else(|| CoreError::Config(format!("missing input path: {flag}")))
}

pub fn load_points(paths: &Paths) -> Result<ParsedAdsb> {
    parse_adsb(open(required(&paths.adsb, "--adsb")?)?, &ColumnMap::default())
}

/// The configured runway file, or the built-in Changi layout.
pub fn load_runways(paths: &Paths) -> Result<RunwayLayout> {
    match &paths.runways {
        Some(p) => RunwayLayout::load(p),
        None => Ok(RunwayLayout::changi()),
    }
}

pub fn load_tables(paths: &Paths) -> Result<Tables> {
    Ok(Tables {
        metar: read_metar(open(required(&paths.metar, "--metar")?)?)?,
        fpl: read_fpl(open(required(&paths.fpl, "--fpl")?)?)?,
        recat_map: read_recat_map(open(required(&paths.recat, "--recat")?)?)?,
    })
}

/// Writes `manifest.jsonl`, `images/*.png`, `holdings.csv` and
/// `skipped.csv` into `dir`.
pub fn write_dataset(dir: &Path, out: &BuildOutput) -> Result<()> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| CoreError::io(&images, e))?;
    for img in &out.images {
        encode_png(img, &images.join(img.file_name()))?;
    }
    write_manifest(create(&manifest_path(dir))?, &out.samples)?;
    let mut w = csv::Writer::from_writer(create(&dir.join("holdings.csv"))?);
    w.write_record(["id", "holding"])?;
    for (id, h) in &out.holdings {
        w.write_record([id.as_str(), if *h { "1" } else { "0" }])?;
    }
    w.flush().map_err(|e| CoreError::io(dir.join("holdings.csv"), e))?;
    let mut w = csv::Writer::from_writer(create(&dir.join("skipped.csv"))?);
    w.write_record(["id", "reason"])?;
    for (id, why) in &out.skipped {
        w.write_record([id, why])?;
    }
    w.flush().map_err(|e| CoreError::io(dir.join("skipped.csv"), e))?;
    Ok(())
}

/// Manifest samples and per-aircraft holding flags of a dataset directory.
pub fn load_dataset(dir: &Path) -> Result<(Vec<ArrivalSample>, BTreeMap<String, bool>)> {
    let samples = read_manifest(open(&manifest_path(dir))?)?;
    let mut holdings = BTreeMap::new();
    let hp = dir.join("holdings.csv");
    if hp.exists() {
        let mut r = csv::Reader::from_reader(open(&hp)?);
        for rec in r.records() {
            let rec = rec?;
            let id = rec.get(0).unwrap_or_default().to_string();
            holdings.insert(id, rec.get(1) == Some("1"));
        }
    }
    Ok((samples, holdings))
}
