use std::collections::BTreeMap;

use alt_core::airspace::*;
use alt_core::dataset::*;
use alt_core::holding::*;
use alt_core::ingest::*;
use alt_core::pipeline::*;
use alt_core::raster::*;
use alt_core::simgen::*;
use proptest::prelude::*;
use sha2::{Digest, Sha256};

fn scenario(hours: f64, seed: u64) -> SimOutput {
    let cfg = ScenarioConfig { seed, duration_hours: hours, ..Default::default() };
    generate(&cfg, &AirspaceGeometry::default(), &RunwayLayout::changi()).unwrap()
}

fn build(sim: &SimOutput, threads: usize) -> BuildOutput {
    let (g, r) = (AirspaceGeometry::default(), RunwayLayout::changi());
    let ing = ingest_points(sim.points.clone(), &g, &r, DEFAULT_MAX_GAP, false).unwrap();
    let params = BuildParams { threads, ..BuildParams::default() };
    build_dataset(&ing, &Tables::from_sim(sim), &g, &r, &params)
}

#[test]
fn labels_survive_five_percent_gaps() {
    let sim = scenario(6.0, 11);
    let mut csv = Vec::new();
    write_adsb(&mut csv, &sim.points).unwrap();
    let mut gapped = Vec::new();
    let dropped = inject_gaps(&csv[..], &mut gapped, 0.05, 3).unwrap();
    assert!(dropped as f64 > 0.04 * sim.points.len() as f64);
    let parsed = parse_adsb(&gapped[..], &ColumnMap::default()).unwrap();
    assert_eq!(parsed.skipped, 0);
    let (g, r) = (AirspaceGeometry::default(), RunwayLayout::changi());
    let ing = ingest_points(parsed.points, &g, &r, DEFAULT_MAX_GAP, false).unwrap();
    let got: BTreeMap<&str, i64> = ing.arrivals.iter().map(|a| (a.aircraft_id.as_str(), a.label_seconds)).collect();
    let within = sim.truth.iter().filter(|t| got.get(t.aircraft_id.as_str()).is_some_and(|l| (l - t.label).abs() <= 2)).count();
    let frac = within as f64 / sim.truth.len() as f64;
    assert!(frac >= 0.99, "{within} of {} labels within 2 s", sim.truth.len());
}

#[test]
fn quadratic_tracks_are_imputed_exactly() {
    let lat = |t: f64| 1.2 + 2e-4 * t - 3e-7 * t * t;
    let lon = |t: f64| 103.5 - 1e-4 * t + 5e-7 * t * t;
    let keep = |t: i64| !(5..9).contains(&t) && !(20..29).contains(&t) && t != 41;
    let points: Vec<AdsbPoint> = (0..60)
        .filter(|&t| keep(t))
        .map(|t| AdsbPoint {
            aircraft_id: "Q1".into(),
            timestamp: 1_000 + t,
            lat: lat(t as f64),
            lon: lon(t as f64),
            alt: 9000.0,
            ground_speed: 250.0,
            heading: 90.0,
            imputed: false,
        })
        .collect();
    let asm = assemble_trajectories(points, DEFAULT_MAX_GAP).unwrap();
    assert_eq!(asm.trajectories.len(), 1);
    assert_eq!(asm.linear_fallbacks, 0);
    let tr = &asm.trajectories[0];
    assert_eq!(tr.points.len(), 60);
    for p in &tr.points {
        let t = (p.timestamp - 1_000) as f64;
        assert_eq!(p.imputed, !keep(p.timestamp - 1_000));
        assert!((p.lat - lat(t)).abs() <= 1e-9 && (p.lon - lon(t)).abs() <= 1e-9, "t={t}");
    }
}

#[test]
fn long_gaps_split_tracks() {
    let pts = |ts: &[i64]| -> Vec<AdsbPoint> {
        ts.iter()
            .map(|&t| AdsbPoint {
                aircraft_id: "S1".into(),
                timestamp: t,
                lat: 1.0,
                lon: 104.0,
                alt: 0.0,
                ground_speed: 0.0,
                heading: 0.0,
                imputed: false,
            })
            .collect()
    };
    let asm = assemble_trajectories(pts(&[0, 1, 2, 12, 13, 30, 31]), 10).unwrap();
    let names: Vec<_> = asm.trajectories.iter().map(|t| t.aircraft_id.as_str()).collect();
    assert_eq!(names, ["S1", "S1#1"]);
    assert_eq!(asm.trajectories[0].points.len(), 14);
}

fn image_digest(out: &BuildOutput) -> String {
    let mut h = Sha256::new();
    for img in &out.images {
        h.update(img.pixel_hash().as_bytes());
    }
    format!("{:x}", h.finalize())
}

#[test]
fn images_match_across_thread_counts() {
    let sim = scenario(3.0, 5);
    let one = build(&sim, 1);
    let four = build(&sim, 4);
    assert!(!one.images.is_empty());
    assert_eq!(one.samples, four.samples);
    let a: Vec<String> = one.images.iter().map(|i| i.pixel_hash()).collect();
    let b: Vec<String> = four.images.iter().map(|i| i.pixel_hash()).collect();
    assert_eq!(a, b);
    assert_eq!(image_digest(&one), GOLDEN_SCENARIO_DIGEST);
}

const GOLDEN_SCENARIO_DIGEST: &str = "ffe362265cc0ee7474fd65f14c8276d325f7db65c13b6573b15925ccb8765313";
const GOLDEN_FIXTURE_HASH: &str = "a6713706d3d22e2505debc26f4daa3461d7d09ad766e2113fc059ebc33d53d85";

fn straight_inbound(id: &str, bearing: f64, start_nm: f64, speed_kt: f64, t0: i64, secs: i64) -> Trajectory {
    let g = AirspaceGeometry::default();
    let points = (0..=secs)
        .map(|k| {
            let d = start_nm - speed_kt * k as f64 / 3600.0;
            TrackPoint::new(t0 + k, destination(g.center, bearing, d), 9000.0, speed_kt, normalize_deg(bearing + 180.0))
        })
        .collect();
    Trajectory { aircraft_id: id.into(), points }
}

#[test]
fn fixture_image_is_golden() {
    let g = AirspaceGeometry::default();
    let target = straight_inbound("T", 40.0, 58.0, 280.0, 0, 900);
    let other = straight_inbound("O", 200.0, 45.0, 240.0, 0, 900);
    let img = render(&target, &[&other], &g, 600, 300, 64, 64).unwrap();
    assert!(img.count([255, 0, 0]) > 0 && img.count([0, 0, 255]) > 0);
    assert_eq!(img.count([255, 0, 0]) + img.count([0, 0, 255]) + img.count([255, 255, 255]), 64 * 64);
    assert_eq!(img.pixel_hash(), GOLDEN_FIXTURE_HASH);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn stroke_length_tracks_speed(bearing in 0.0..360.0f64, v1 in 150.0..350.0f64, v2 in 150.0..350.0f64) {
        let g = AirspaceGeometry::default();
        let red = |v: f64| {
            let t = straight_inbound("T", bearing, 55.0, v, 0, 600);
            render(&t, &[], &g, 600, 600, 256, 256).unwrap().count([255, 0, 0]) as f64
        };
        let ratio = red(v1) / red(v2);
        let expected = v1 / v2;
        prop_assert!((ratio / expected - 1.0).abs() <= 0.15, "pixels {ratio} vs speeds {expected}");
    }
}

#[test]
fn holding_detector_matches_truth_on_200_aircraft() {
    let sim = scenario(8.0, 21);
    assert!(sim.truth.len() >= 200, "only {} aircraft", sim.truth.len());
    let g = AirspaceGeometry::default();
    let asm = assemble_trajectories(sim.points.clone(), DEFAULT_MAX_GAP).unwrap();
    let by_id: BTreeMap<&str, &Trajectory> = asm.trajectories.iter().map(|t| (t.aircraft_id.as_str(), t)).collect();
    let (mut tp, mut fp, mut fneg) = (0, 0, 0);
    for t in &sim.truth[..200] {
        let held = detect_holding(by_id[t.aircraft_id.as_str()], &g, &HoldingParams::default()).holding;
        match (t.holds > 0, held) {
            (true, true) => tp += 1,
            (false, true) => fp += 1,
            (true, false) => fneg += 1,
            _ => {}
        }
    }
    assert!(tp > 0, "scenario has no holds");
    assert_eq!((fp, fneg), (0, 0), "{tp} true positives");
}

#[test]
fn split_sizes_are_exact() {
    let s = split(100, (0.7, 0.15, 0.15), 9).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
    let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
    all.sort_unstable();
    assert_eq!(all, (0..100).collect::<Vec<_>>());
    assert_eq!(s, split(100, (0.7, 0.15, 0.15), 9).unwrap());
    assert_ne!(s, split(100, (0.7, 0.15, 0.15), 10).unwrap());
}

#[test]
fn normalized_training_columns_are_standard() {
    let sim = scenario(4.0, 2);
    let out = build(&sim, 2);
    let prep = prepare_split(&out.samples, (0.7, 0.15, 0.15), 1).unwrap();
    let n = prep.train.len() as f64;
    let check = |col: &dyn Fn(&ArrivalSample) -> f64| {
        let mean = prep.train.iter().map(col).sum::<f64>() / n;
        let var = prep.train.iter().map(|s| (col(s) - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() <= 1e-9, "mean {mean}");
        // constant columns stay at zero spread
        assert!((var.sqrt() - 1.0).abs() <= 1e-9 || var == 0.0, "std {}", var.sqrt());
    };
    for i in 0..TABULAR_DIM {
        check(&|s: &ArrivalSample| s.tabular[i]);
    }
    for i in 0..HOLDING_DIM {
        check(&|s: &ArrivalSample| s.holding[i]);
    }
}

#[test]
fn dataset_build_is_deterministic() {
    let a = build(&scenario(2.0, 8), 1);
    let b = build(&scenario(2.0, 8), 3);
    assert_eq!(a.samples, b.samples);
    assert_eq!(a.holdings, b.holdings);
    assert_eq!(image_digest(&a), image_digest(&b));
}
