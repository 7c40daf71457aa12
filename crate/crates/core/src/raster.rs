//! Trajectory images: the target's recent track in red over the other
//! airborne tracks in blue, on an equirectangular grid.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::airspace::{AirspaceGeometry, BBox, LatLon};
use crate::error::{CoreError, Result};
use crate::ingest::{TrackPoint, Trajectory};

pub const WHITE: [u8; 3] = [255, 255, 255];
pub const RED: [u8; 3] = [255, 0, 0];
pub const BLUE: [u8; 3] = [0, 0, 255];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrajectoryImage {
    pub width: u32,
    pub height: u32,
    pub pixels: Vec<u8>,
    pub target_id: String,
    pub t_ref: i64,
    pub tau: i64,
}

impl TrajectoryImage {
    pub fn blank(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            pixels: WHITE.repeat((width * height) as usize),
            target_id: String::new(),
            t_ref: 0,
            tau: 0,
        }
    }

    pub fn pixel(&self, x: u32, y: u32) -> [u8; 3] {
        let i = 3 * (y * self.width + x) as usize;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    fn put(&mut self, x: i64, y: i64, c: [u8; 3]) {
        if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
            return;
        }
        let i = 3 * (y as usize * self.width as usize + x as usize);
        self.pixels[i..i + 3].copy_from_slice(&c);
    }

    pub fn count(&self, c: [u8; 3]) -> usize {
        self.pixels.chunks_exact(3).filter(|p| *p == c).count()
    }

    /// Hex SHA-256 of the pixel buffer.
    pub fn pixel_hash(&self) -> String {
        let digest = Sha256::digest(&self.pixels);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `<aircraft_id>_<t_ref>.png`, with path separators in the id replaced.
    pub fn file_name(&self) -> String {
        image_file_name(&self.target_id, self.t_ref)
    }
}

pub fn image_file_name(aircraft_id: &str, t_ref: i64) -> String {
    let safe: String = aircraft_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '#' { c } else { '_' })
        .collect();
    format!("{safe}_{t_ref}.png")
}

/// Equirectangular pixel of a position, north up, clamped to the image.
pub fn project(lat: f64, lon: f64, bbox: &BBox, width: u32, height: u32) -> (u32, u32) {
    let fx = ((lon - bbox.lon_min) / (bbox.lon_max - bbox.lon_min) * width as f64).floor();
    let fy = ((bbox.lat_max - lat) / (bbox.lat_max - bbox.lat_min) * height as f64).floor();
    let clamp = |v: f64, n: u32| v.max(0.0).min((n - 1) as f64) as u32;
    (clamp(fx, width), clamp(fy, height))
}

fn lerp(a: LatLon, b: LatLon, f: f64) -> LatLon {
    LatLon::new(a.lat + f * (b.lat - a.lat), a.lon + f * (b.lon - a.lon))
}

/// Point where the chord from `inside` to `outside` leaves the disc.
fn boundary_point(geometry: &AirspaceGeometry, radius: f64, inside: LatLon, outside: LatLon) -> LatLon {
    let (mut lo, mut hi) = (0.0, 1.0);
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if geometry.distance_nm(lerp(inside, outside, mid)) <= radius {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lerp(inside, outside, lo)
}

/// Splits consecutive points into polylines inside the disc of `radius`,
/// cutting straddling segments at the circle.
pub fn clip_to_disc(points: &[TrackPoint], geometry: &AirspaceGeometry, radius: f64) -> Vec<Vec<LatLon>> {
    let mut lines: Vec<Vec<LatLon>> = Vec::new();
    let mut current: Vec<LatLon> = Vec::new();
    let mut prev: Option<(LatLon, bool)> = None;
    for p in points {
        let pos = p.position();
        let inside = geometry.distance_nm(pos) <= radius;
        match (prev, inside) {
            (Some((q, true)), false) => {
                current.push(boundary_point(geometry, radius, q, pos));
                lines.push(std::mem::take(&mut current));
            }
            (Some((q, false)), true) => {
                current.push(boundary_point(geometry, radius, pos, q));
                current.push(pos);
            }
            (_, true) => current.push(pos),
            _ => {}
        }
        prev = Some((pos, inside));
    }
    if !current.is_empty() {
        lines.push(current);
    }
    lines
}

/// Integer line walk including both endpoints.
fn draw_line(img: &mut TrajectoryImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: [u8; 3]) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        img.put(x, y, c);
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_polylines(img: &mut TrajectoryImage, lines: &[Vec<LatLon>], bbox: &BBox, c: [u8; 3]) {
    let (w, h) = (img.width, img.height);
    for line in lines {
        let px: Vec<(i64, i64)> = line
            .iter()
            .map(|p| {
                let (x, y) = project(p.lat, p.lon, bbox, w, h);
                (x as i64, y as i64)
            })
            .collect();
        if px.len() == 1 {
            img.put(px[0].0, px[0].1, c);
        }
        for seg in px.windows(2) {
            draw_line(img, seg[0], seg[1], c);
        }
    }
}

/// Renders the window `[t_ref - tau, t_ref]`. Background tracks are clipped
/// to the TRC disc; the target, which reaches the TRC at `t_ref`, is clipped
/// to the TBX disc so its approach streak is visible.
pub fn render(
    target: &Trajectory,
    others: &[&Trajectory],
    geometry: &AirspaceGeometry,
    t_ref: i64,
    tau: i64,
    width: u32,
    height: u32,
) -> Result<TrajectoryImage> {
    if tau <= 0 {
        return Err(CoreError::Config(format!("tau must be positive, got {tau}")));
    }
    if width < 2 || height < 2 {
        return Err(CoreError::Config(format!("image must be at least 2x2, got {width}x{height}")));
    }
    let from = t_ref - tau;
    let bbox = &geometry.raster_bbox;
    let mut img = TrajectoryImage { target_id: target.aircraft_id.clone(), t_ref, tau, ..TrajectoryImage::blank(width, height) };
    for other in others {
        let lines = clip_to_disc(other.window(from, t_ref), geometry, geometry.trc_radius_nm);
        draw_polylines(&mut img, &lines, bbox, BLUE);
    }
    let lines = clip_to_disc(target.window(from, t_ref), geometry, geometry.tbx_radius_nm);
    if lines.is_empty() {
        return Err(CoreError::Data(format!(
            "target {} has no points in [{from}, {t_ref}]",
            target.aircraft_id
        )));
    }
    draw_polylines(&mut img, &lines, bbox, RED);
    Ok(img)
}

/// 8-bit RGB, non-interlaced, default compression.
pub fn encode_png(img: &TrajectoryImage, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| CoreError::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width, img.height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.set_compression(png::Compression::Default);
    let mut w = enc.write_header().map_err(|e| CoreError::Png(e.to_string()))?;
    w.write_image_data(&img.pixels).map_err(|e| CoreError::Png(e.to_string()))?;
    w.finish().map_err(|e| CoreError::Png(e.to_string()))
}

/// Decodes an 8-bit RGB PNG into `(width, height, pixels)`.
pub fn decode_png(path: &Path) -> Result<(u32, u32, Vec<u8>)> {
    let file = File::open(path).map_err(|e| CoreError::io(path, e))?;
    let mut reader = png::Decoder::new(file).read_info().map_err(|e| CoreError::Png(e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| CoreError::Png(e.to_string()))?;
    if info.color_type != png::ColorType::Rgb || info.bit_depth != png::BitDepth::Eight {
        return Err(CoreError::Png(format!("{} is not 8-bit RGB", path.display())));
    }
    buf.truncate(info.buffer_size());
    Ok((info.width, info.height, buf))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_fixtures() {
        let g = AirspaceGeometry::default();
        let b = &g.raster_bbox;
        assert_eq!(project(b.lat_max, b.lon_min, b, 224, 224), (0, 0));
        assert_eq!(project(b.lat_min, b.lon_max, b, 224, 224), (223, 223));
        let (cx, cy) = project((b.lat_min + b.lat_max) / 2.0, (b.lon_min + b.lon_max) / 2.0, b, 224, 224);
        assert!((cx as i64 - 112).abs() <= 1 && (cy as i64 - 112).abs() <= 1);
        assert_eq!(project(1.3644, 103.9915, b, 224, 224), (111, 113));
        assert_eq!(project(-10.0, 200.0, b, 64, 64), (63, 63));
    }

    #[test]
    fn line_walk_covers_endpoints() {
        let mut img = TrajectoryImage::blank(10, 10);
        draw_line(&mut img, (1, 1), (8, 4), RED);
        assert_eq!(img.count(RED), 8);
        assert_eq!(img.pixel(1, 1), RED);
        assert_eq!(img.pixel(8, 4), RED);
    }

    #[test]
    fn clip_cuts_at_circle() {
        use crate::airspace::destination;
        let g = AirspaceGeometry::default();
        let pts: Vec<TrackPoint> = [55.0, 45.0]
            .iter()
            .enumerate()
            .map(|(i, &d)| TrackPoint::new(i as i64, destination(g.center, 30.0, d), 9000.0, 250.0, 210.0))
            .collect();
        let lines = clip_to_disc(&pts, &g, 50.0);
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].len(), 2);
        assert!((g.distance_nm(lines[0][0]) - 50.0).abs() < 1e-6);
        assert!(clip_to_disc(&pts[..1], &g, 50.0).is_empty());
    }
}
