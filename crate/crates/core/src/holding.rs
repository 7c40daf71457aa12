//! Holding-pattern detection and the holding feature vector.

use std::collections::{BTreeMap, VecDeque};

use serde::{Deserialize, Serialize};

use crate::airspace::{heading_delta, AirspaceGeometry};
use crate::error::{CoreError, Result};
use crate::ingest::{ArrivalRecord, Trajectory};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HoldingParams {
    pub window_s: i64,
    pub min_turn_deg: f64,
    /// Inner edge of the detection band; the outer edge is the TBX radius.
    pub inner_nm: f64,
    pub min_track_s: i64,
}

impl Default for HoldingParams {
    fn default() -> Self {
        Self { window_s: 600, min_turn_deg: 360.0, inner_nm: 20.0, min_track_s: 60 }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct HoldingDetection {
    pub holding: bool,
    /// Merged `[start, end]` spans of every qualifying window.
    pub intervals: Vec<(i64, i64)>,
}

/// Flags a trajectory whose summed signed heading change over some window of
/// at most `window_s` seconds reaches the turn threshold while inside the
/// detection band.
pub fn detect_holding(traj: &Trajectory, geometry: &AirspaceGeometry, params: &HoldingParams) -> HoldingDetection {
    if traj.end() - traj.start() < params.min_track_s {
        return HoldingDetection::default();
    }
    let in_band: Vec<bool> = traj
        .points
        .iter()
        .map(|p| {
            let d = geometry.distance_nm(p.position());
            d >= params.inner_nm && d <= geometry.tbx_radius_nm
        })
        .collect();
    // (time of later point, signed heading change) for consecutive in-band pairs
    let turns: Vec<(i64, f64)> = (1..traj.points.len())
        .filter(|&k| in_band[k] && in_band[k - 1])
        .map(|k| (traj.points[k].timestamp, heading_delta(traj.points[k - 1].heading, traj.points[k].heading)))
        .collect();
    let mut prefix = Vec::with_capacity(turns.len() + 1);
    prefix.push(0.0);
    for (_, d) in &turns {
        prefix.push(prefix[prefix.len() - 1] + d);
    }
    let threshold = params.min_turn_deg - 1e-6;
    let mut intervals: Vec<(i64, i64)> = Vec::new();
    // sliding extrema of prefix[j] over window starts j in [lo, hi]
    let mut lows: VecDeque<usize> = VecDeque::new();
    let mut highs: VecDeque<usize> = VecDeque::new();
    let mut lo = 0;
    for hi in 0..turns.len() {
        while lows.back().is_some_and(|&j| prefix[j] >= prefix[hi]) {
            lows.pop_back();
        }
        lows.push_back(hi);
        while highs.back().is_some_and(|&j| prefix[j] <= prefix[hi]) {
            highs.pop_back();
        }
        highs.push_back(hi);
        // each turn covers (t - 1, t], so a window of W seconds spans W turns
        while turns[hi].0 - turns[lo].0 >= params.window_s {
            lo += 1;
        }
        while lows.front().is_some_and(|&j| j < lo) {
            lows.pop_front();
        }
        while highs.front().is_some_and(|&j| j < lo) {
            highs.pop_front();
        }
        let end = prefix[hi + 1];
        let (j_min, j_max) = (lows[0], highs[0]);
        let start = if end - prefix[j_min] >= threshold {
            Some(j_min)
        } else if prefix[j_max] - end >= threshold {
            Some(j_max)
        } else {
            None
        };
        if let Some(j) = start {
            let span = (turns[j].0 - 1, turns[hi].0);
            match intervals.last_mut() {
                Some(last) if span.0 <= last.1 => last.1 = last.1.max(span.1),
                _ => intervals.push(span),
            }
        }
    }
    HoldingDetection { holding: !intervals.is_empty(), intervals }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TbeSpeed {
    pub aircraft_id: String,
    pub v_e: f64,
}

/// Mean ground speed over the points in the TRC-to-TBX annulus.
pub fn tbe_mean_speed(traj: &Trajectory, geometry: &AirspaceGeometry) -> Result<TbeSpeed> {
    let (sum, n) = traj
        .points
        .iter()
        .filter(|p| geometry.in_tbe(p.position()))
        .fold((0.0, 0usize), |(s, n), p| (s + p.ground_speed, n + 1));
    if n == 0 {
        return Err(CoreError::Data(format!("{} has no points inside the TBE annulus", traj.aircraft_id)));
    }
    Ok(TbeSpeed { aircraft_id: traj.aircraft_id.clone(), v_e: sum / n as f64 })
}

/// The most recent earlier TRC arrival that is still airborne when the target
/// crosses; ties on `t_trc` go to the smaller id.
pub fn leading_aircraft<'a>(target: &ArrivalRecord, all: &'a [ArrivalRecord]) -> Option<&'a ArrivalRecord> {
    all.iter()
        .filter(|a| a.aircraft_id != target.aircraft_id && a.t_trc < target.t_trc && a.t_thr > target.t_trc)
        .min_by(|a, b| b.t_trc.cmp(&a.t_trc).then_with(|| a.aircraft_id.cmp(&b.aircraft_id)))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct HoldingFeatures {
    pub leading_id: Option<String>,
    pub dt_trc: f64,
    pub dv_avg: f64,
    pub dv_lead: f64,
    pub lead_holding: u8,
    pub total_arrivals: u32,
}

impl HoldingFeatures {
    /// `[total_arrivals, dt_trc, dv_avg, dv_lead, lead_holding]`.
    pub fn to_vec(&self) -> [f64; 5] {
        [self.total_arrivals as f64, self.dt_trc, self.dv_avg, self.dv_lead, self.lead_holding as f64]
    }
}

/// Holding features of `target` relative to the traffic in `all`. The fleet
/// mean TBE speed averages every aircraft that reached the TRC in
/// `[t_trc - delta, t_trc]`; a missing speed falls back to that mean.
pub fn holding_features(
    target: &ArrivalRecord,
    all: &[ArrivalRecord],
    speeds: &BTreeMap<String, f64>,
    holdings: &BTreeMap<String, bool>,
    delta: i64,
) -> HoldingFeatures {
    let t_ref = target.t_trc;
    let window: Vec<f64> = all
        .iter()
        .filter(|a| a.t_trc >= t_ref - delta && a.t_trc <= t_ref)
        .filter_map(|a| speeds.get(&a.aircraft_id).copied())
        .collect();
    let own = speeds.get(&target.aircraft_id).copied();
    let fleet = if window.is_empty() {
        own.unwrap_or(0.0)
    } else {
        window.iter().sum::<f64>() / window.len() as f64
    };
    let v_j = own.unwrap_or(fleet);
    let total_arrivals = all.iter().filter(|a| a.t_thr >= t_ref - delta && a.t_thr <= t_ref).count() as u32;
    let mut out = HoldingFeatures { dv_avg: v_j - fleet, total_arrivals, ..HoldingFeatures::default() };
    if let Some(lead) = leading_aircraft(target, all) {
        let v_lead = speeds.get(&lead.aircraft_id).copied().unwrap_or(fleet);
        out.leading_id = Some(lead.aircraft_id.clone());
        out.dt_trc = (t_ref - lead.t_trc) as f64;
        out.dv_lead = v_j - v_lead;
        out.lead_holding = u8::from(holdings.get(&lead.aircraft_id).copied().unwrap_or(false));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airspace::{destination, normalize_deg, EntryZone, LatLon};
    use crate::ingest::TrackPoint;

    fn rec(id: &str, t_trc: i64, t_thr: i64) -> ArrivalRecord {
        ArrivalRecord {
            aircraft_id: id.into(),
            runway: "02L20R".into(),
            threshold: "02L".into(),
            t_trc,
            t_thr,
            label_seconds: t_thr - t_trc,
            entry_zone: EntryZone::N,
            recat: 2,
            recat_resolved: false,
        }
    }

    /// Flat-earth flight path from a start point, one heading per second.
    fn fly(start: LatLon, headings: &[f64], speed: f64) -> Trajectory {
        let mut pos = start;
        let points = headings
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let p = TrackPoint::new(i as i64, pos, 8000.0, speed, normalize_deg(h));
                pos = destination(pos, h, speed / 3600.0);
                p
            })
            .collect();
        Trajectory { aircraft_id: "H".into(), points }
    }

    fn racetrack(offset: f64) -> Vec<f64> {
        let mut h = vec![offset; 120];
        for _ in 0..2 {
            for _ in 0..60 {
                let last = *h.last().unwrap();
                h.push(last + 3.0);
            }
            let last = *h.last().unwrap();
            h.extend(std::iter::repeat_n(last, 60));
        }
        h.extend(std::iter::repeat_n(*h.last().unwrap(), 120));
        h
    }

    #[test]
    fn racetrack_detected_and_rotation_invariant() {
        let g = AirspaceGeometry::default();
        let p = HoldingParams::default();
        for bearing in [0.0, 77.0, 200.0] {
            let start = destination(g.center, bearing, 40.0);
            let tr = fly(start, &racetrack(bearing + 180.0), 220.0);
            let d = detect_holding(&tr, &g, &p);
            assert!(d.holding, "bearing {bearing}");
            assert_eq!(d.intervals.len(), 1);
        }
    }

    #[test]
    fn straight_and_single_turn_are_not_holds() {
        let g = AirspaceGeometry::default();
        let p = HoldingParams::default();
        let start = destination(g.center, 90.0, 45.0);
        let straight = fly(start, &[270.0; 600], 250.0);
        assert!(!detect_holding(&straight, &g, &p).holding);
        let mut turn = vec![270.0; 200];
        turn.extend((1..=30).map(|i| 270.0 - 3.0 * i as f64));
        turn.extend(vec![180.0; 200]);
        assert!(!detect_holding(&fly(start, &turn, 250.0), &g, &p).holding);
    }

    #[test]
    fn short_track_never_holds() {
        let g = AirspaceGeometry::default();
        let start = destination(g.center, 0.0, 40.0);
        let spin: Vec<f64> = (0..50).map(|i| i as f64 * 10.0).collect();
        assert!(!detect_holding(&fly(start, &spin, 200.0), &g, &HoldingParams::default()).holding);
    }

    #[test]
    fn tbe_speed_mean() {
        let g = AirspaceGeometry::default();
        let pts = [(55.0, 240.0), (54.0, 260.0), (45.0, 100.0)]
            .iter()
            .enumerate()
            .map(|(i, &(d, v))| TrackPoint::new(i as i64, destination(g.center, 10.0, d), 9000.0, v, 190.0))
            .collect();
        let tr = Trajectory { aircraft_id: "S".into(), points: pts };
        assert_eq!(tbe_mean_speed(&tr, &g).unwrap().v_e, 250.0);
        let inside = Trajectory { aircraft_id: "I".into(), points: tr.points[2..].to_vec() };
        assert!(tbe_mean_speed(&inside, &g).is_err());
    }

    #[test]
    fn leading_rules() {
        let target = rec("T", 300, 900);
        assert!(leading_aircraft(&target, std::slice::from_ref(&target)).is_none());
        let all = vec![rec("a", 100, 700), rec("b", 200, 800), rec("c", 250, 850), target.clone()];
        assert_eq!(leading_aircraft(&target, &all).unwrap().aircraft_id, "c");
        let landed = vec![rec("a", 100, 700), rec("c", 250, 280), target.clone()];
        assert_eq!(leading_aircraft(&target, &landed).unwrap().aircraft_id, "a");
        let tie = vec![rec("z", 250, 700), rec("y", 250, 700), target.clone()];
        assert_eq!(leading_aircraft(&target, &tie).unwrap().aircraft_id, "y");
    }

    #[test]
    fn feature_fixtures() {
        let target = rec("T", 1000, 1800);
        let lone = holding_features(
            &target,
            std::slice::from_ref(&target),
            &BTreeMap::from([("T".to_string(), 240.0)]),
            &BTreeMap::new(),
            600,
        );
        assert_eq!(lone.to_vec(), [0.0; 5]);
        assert!(lone.leading_id.is_none());

        // fleet mean over {T, L, O} = 250 with T = 230 and L = 245
        let all = vec![rec("L", 900, 1500), rec("O", 950, 1600), target.clone()];
        let speeds = BTreeMap::from([("T".into(), 230.0), ("L".into(), 245.0), ("O".into(), 275.0)]);
        let holds = BTreeMap::from([("L".to_string(), true)]);
        let f = holding_features(&target, &all, &speeds, &holds, 600);
        assert_eq!(f.leading_id.as_deref(), Some("O"));
        assert!((f.dv_avg - (-20.0)).abs() < 1e-12);
        assert_eq!(f.dt_trc, 50.0);
        assert_eq!(f.lead_holding, 0);
        let g = holding_features(&target, &all[..1].iter().chain([&target]).cloned().collect::<Vec<_>>(), &speeds, &holds, 600);
        assert_eq!(g.leading_id.as_deref(), Some("L"));
        assert!((g.dv_lead - (-15.0)).abs() < 1e-12);
        assert_eq!(g.lead_holding, 1);
    }
}
