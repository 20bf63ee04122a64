//! AS-OCT quantification: anterior chamber boundary endpoints, calibrated
//! regions of interest, threshold cell detection with connected-component
//! merging, and the aqueous-to-air relative intensity (ARI).

use std::collections::VecDeque;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Physical extent of the anterior segment scan mode.
pub const SCAN_WIDTH_MM: f64 = 16.0;
pub const SCAN_HEIGHT_MM: f64 = 6.0;

/// Cell-search rectangle: long side along the chord, short side into the chamber.
pub const AREA1_LONG_MM: f64 = 4.0;
pub const AREA1_SHORT_MM: f64 = 2.0;
/// Air reference rectangle at the top-left corner.
pub const AREA2_HEIGHT_MM: f64 = 1.0;
pub const AREA2_WIDTH_MM: f64 = 2.0;

const RASTER_EPS: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("mask is empty")]
    EmptyMask,
    #[error("mask spans {0} column(s); at least 2 are needed for a boundary chord")]
    NarrowMask(usize),
    #[error("boundary endpoints coincide at ({0}, {1})")]
    DegenerateChord(usize, usize),
    #[error("{region} exceeds the image by {overflow_px:.2} px")]
    RoiOutOfBounds { region: &'static str, overflow_px: f64 },
    #[error("area1 and area2 overlap")]
    RoiOverlap,
    #[error("area2 is empty")]
    EmptyAirRegion,
    #[error("all of Area1 classified as cells")]
    AllCells,
    #[error("zero air intensity in area2")]
    ZeroAirIntensity,
    #[error("invalid image: {0}")]
    InvalidImage(String),
    #[error("threshold must be finite, got {0}")]
    BadThreshold(f64),
    #[error("image {index}: {source}")]
    InImage {
        index: usize,
        #[source]
        source: Box<QuantError>,
    },
    #[error("expected 3 images per eye, got {0}")]
    WrongImageCount(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Pixel {
    pub y: usize,
    pub x: usize,
}

impl Pixel {
    pub fn new(x: usize, y: usize) -> Self {
        Self { y, x }
    }
}

/// Calibrated grayscale cross-section with values in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AsOctImage {
    width: usize,
    height: usize,
    pixels: Vec<f64>,
    mm_per_px_x: f64,
    mm_per_px_y: f64,
}

impl AsOctImage {
    pub fn new(
        width: usize,
        height: usize,
        pixels: Vec<f64>,
        mm_per_px_x: f64,
        mm_per_px_y: f64,
    ) -> Result<Self, QuantError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(QuantError::InvalidImage(format!(
                "{} pixels for {width}x{height}",
                pixels.len()
            )));
        }
        if !(mm_per_px_x > 0.0 && mm_per_px_y > 0.0 && mm_per_px_x.is_finite() && mm_per_px_y.is_finite()) {
            return Err(QuantError::InvalidImage("calibration factors must be positive".into()));
        }
        if pixels.iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(QuantError::InvalidImage("pixel values must lie in [0, 255]".into()));
        }
        Ok(Self {
            width,
            height,
            pixels,
            mm_per_px_x,
            mm_per_px_y,
        })
    }

    /// Calibration derived from the 16 mm x 6 mm scan field.
    pub fn with_scan_calibration(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self, QuantError> {
        Self::new(
            width,
            height,
            pixels,
            SCAN_WIDTH_MM / width as f64,
            SCAN_HEIGHT_MM / height as f64,
        )
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn get(&self, p: Pixel) -> f64 {
        self.pixels[p.y * self.width + p.x]
    }

    pub fn calibration(&self) -> Calibration {
        Calibration {
            width: self.width,
            height: self.height,
            mm_per_px_x: self.mm_per_px_x,
            mm_per_px_y: self.mm_per_px_y,
        }
    }

    pub fn pixel_area_mm2(&self) -> f64 {
        self.mm_per_px_x * self.mm_per_px_y
    }

    /// Same image with every pixel multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self, QuantError> {
        Self::new(
            self.width,
            self.height,
            self.pixels.iter().map(|v| v * factor).collect(),
            self.mm_per_px_x,
            self.mm_per_px_y,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Calibration {
    pub width: usize,
    pub height: usize,
    pub mm_per_px_x: f64,
    pub mm_per_px_y: f64,
}

/// Binary anterior chamber mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AcMask {
    width: usize,
    height: usize,
    mask: Vec<bool>,
}

impl AcMask {
    pub fn new(width: usize, height: usize, mask: Vec<bool>) -> Result<Self, QuantError> {
        if mask.len() != width * height {
            return Err(QuantError::InvalidImage(format!(
                "mask has {} entries for {width}x{height}",
                mask.len()
            )));
        }
        Ok(Self { width, height, mask })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mask = (0..height)
            .flat_map(|y| (0..width).map(move |x| (x, y)))
            .map(|(x, y)| f(x, y))
            .collect();
        Self { width, height, mask }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.mask[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.mask
    }
}

/// Leftmost and rightmost points of the AC-cornea boundary, taken as the
/// topmost mask pixel of the outermost occupied columns.
pub fn extract_boundary(mask: &AcMask) -> Result<[Pixel; 2], QuantError> {
    let top = |x: usize| (0..mask.height).find(|&y| mask.get(x, y));
    let columns: Vec<usize> = (0..mask.width).filter(|&x| top(x).is_some()).collect();
    match columns.as_slice() {
        [] => Err(QuantError::EmptyMask),
        [_] => Err(QuantError::NarrowMask(1)),
        [first, .., last] => Ok([
            Pixel::new(*first, top(*first).expect("occupied column")),
            Pixel::new(*last, top(*last).expect("occupied column")),
        ]),
    }
}

/// Cell search region (area1, oriented) and air reference region (area2).
#[derive(Clone, Debug, PartialEq)]
pub struct RoiGeometry {
    pub endpoints: [Pixel; 2],
    /// Unit vector along the chord, in mm space.
    pub along: (f64, f64),
    /// Unit normal pointing into the chamber, in mm space.
    pub inward: (f64, f64),
    /// Midpoint of area1's chord-side long edge, in mm.
    pub anchor_mm: (f64, f64),
    pub area1_long_mm: f64,
    pub area1_short_mm: f64,
    /// Area2 as (x0, y0, width_px, height_px).
    pub area2_rect: (usize, usize, usize, usize),
    pub area1: Vec<Pixel>,
    pub area2: Vec<Pixel>,
    pub calibration: Calibration,
}

impl RoiGeometry {
    /// Corners of area1 in pixel coordinates.
    pub fn area1_corners_px(&self) -> [(f64, f64); 4] {
        let c = &self.calibration;
        let (ax, ay) = self.anchor_mm;
        let (ux, uy) = self.along;
        let (nx, ny) = self.inward;
        let half = self.area1_long_mm / 2.0;
        let w = self.area1_short_mm;
        [(-half, 0.0), (half, 0.0), (half, w), (-half, w)].map(|(a, b)| {
            (
                (ax + a * ux + b * nx) / c.mm_per_px_x,
                (ay + a * uy + b * ny) / c.mm_per_px_y,
            )
        })
    }

    pub fn contains_area1(&self, p: Pixel) -> bool {
        self.area1.binary_search(&p).is_ok()
    }
}

/// Places area1 (4 mm x 2 mm) centred on the chord midpoint, long side parallel
/// to the chord and one pixel inside the chamber, and area2 (1 mm x 2 mm) at the
/// top-left corner.
pub fn place_rois(endpoints: [Pixel; 2], calibration: Calibration) -> Result<RoiGeometry, QuantError> {
    let [p, q] = endpoints;
    if p == q {
        return Err(QuantError::DegenerateChord(p.x, p.y));
    }
    let c = calibration;
    let to_mm = |x: f64, y: f64| (x * c.mm_per_px_x, y * c.mm_per_px_y);
    let (px, py) = to_mm(p.x as f64, p.y as f64);
    let (qx, qy) = to_mm(q.x as f64, q.y as f64);
    let len = (qx - px).hypot(qy - py);
    let along = ((qx - px) / len, (qy - py) / len);
    // the chamber lies below the boundary chord (increasing image y)
    let mut inward = (-along.1, along.0);
    if inward.1 < 0.0 || (inward.1 == 0.0 && inward.0 < 0.0) {
        inward = (-inward.0, -inward.1);
    }
    // one pixel along the inward normal, measured in pixel units
    let step_px = (inward.0 / c.mm_per_px_x).hypot(inward.1 / c.mm_per_px_y);
    let offset_mm = 1.0 / step_px;
    let anchor_mm = (
        (px + qx) / 2.0 + offset_mm * inward.0,
        (py + qy) / 2.0 + offset_mm * inward.1,
    );

    let mut geo = RoiGeometry {
        endpoints,
        along,
        inward,
        anchor_mm,
        area1_long_mm: AREA1_LONG_MM,
        area1_short_mm: AREA1_SHORT_MM,
        area2_rect: (
            0,
            0,
            (AREA2_WIDTH_MM / c.mm_per_px_x).round() as usize,
            (AREA2_HEIGHT_MM / c.mm_per_px_y).round() as usize,
        ),
        area1: Vec::new(),
        area2: Vec::new(),
        calibration,
    };

    let corners = geo.area1_corners_px();
    let max_x = (c.width - 1) as f64;
    let max_y = (c.height - 1) as f64;
    let overflow = corners
        .iter()
        .map(|&(x, y)| (-x).max(x - max_x).max(-y).max(y - max_y))
        .fold(f64::NEG_INFINITY, f64::max);
    if overflow > 0.5 {
        return Err(QuantError::RoiOutOfBounds {
            region: "area1",
            overflow_px: overflow,
        });
    }
    let (_, _, w2, h2) = geo.area2_rect;
    if w2 > c.width || h2 > c.height {
        return Err(QuantError::RoiOutOfBounds {
            region: "area2",
            overflow_px: (w2 as f64 - c.width as f64).max(h2 as f64 - c.height as f64),
        });
    }

    let x_lo = corners.iter().map(|c| c.0).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let x_hi = corners.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max).ceil().min(max_x) as usize;
    let y_lo = corners.iter().map(|c| c.1).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
    let y_hi = corners.iter().map(|c| c.1).fold(f64::NEG_INFINITY, f64::max).ceil().min(max_y) as usize;
    let half = AREA1_LONG_MM / 2.0;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let (mx, my) = to_mm(x as f64, y as f64);
            let (rx, ry) = (mx - anchor_mm.0, my - anchor_mm.1);
            let a = rx * along.0 + ry * along.1;
            let b = rx * inward.0 + ry * inward.1;
            if a >= -half - RASTER_EPS
                && a < half - RASTER_EPS
                && b >= -RASTER_EPS
                && b < AREA1_SHORT_MM - RASTER_EPS
            {
                geo.area1.push(Pixel::new(x, y));
            }
        }
    }
    geo.area2 = (0..h2)
        .flat_map(|y| (0..w2).map(move |x| Pixel::new(x, y)))
        .collect();
    if geo.area1.iter().any(|p| p.x < w2 && p.y < h2) {
        return Err(QuantError::RoiOverlap);
    }
    Ok(geo)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Connectivity {
    Four,
    #[default]
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (0, -1),
                (1, -1),
                (-1, 0),
                (1, 0),
                (-1, 1),
                (0, 1),
                (1, 1),
            ],
        }
    }
}

/// How the cell threshold is chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdRule {
    Absolute { value: f64 },
    /// `max(mean + k * std, floor_ratio * mean)` of the area2 (air) pixels.
    AirRelative { k: f64, floor_ratio: f64 },
}

impl Default for ThresholdRule {
    fn default() -> Self {
        ThresholdRule::AirRelative {
            k: 5.0,
            floor_ratio: 2.5,
        }
    }
}

impl ThresholdRule {
    pub fn resolve(&self, image: &AsOctImage, rois: &RoiGeometry) -> Result<f64, QuantError> {
        let t = match *self {
            ThresholdRule::Absolute { value } => value,
            ThresholdRule::AirRelative { k, floor_ratio } => {
                if rois.area2.is_empty() {
                    return Err(QuantError::EmptyAirRegion);
                }
                let n = rois.area2.len() as f64;
                let mean = rois.area2.iter().map(|&p| image.get(p)).sum::<f64>() / n;
                let var = rois.area2.iter().map(|&p| (image.get(p) - mean).powi(2)).sum::<f64>() / n;
                (mean + k * var.sqrt()).max(floor_ratio * mean)
            }
        };
        if !t.is_finite() {
            return Err(QuantError::BadThreshold(t));
        }
        Ok(t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellDetection {
    pub threshold: f64,
    /// Sorted row-major.
    pub candidate_pixels: Vec<Pixel>,
    /// Each component sorted row-major; components ordered by first pixel.
    pub components: Vec<Vec<Pixel>>,
    pub count: usize,
    pub total_cell_area_mm2: f64,
}

/// Labels connected components of `field` (row-major `width x height`).
/// Components are returned in scan order of their first pixel.
pub fn label_components(field: &[bool], width: usize, height: usize, connectivity: Connectivity) -> Vec<Vec<Pixel>> {
    let mut seen = vec![false; field.len()];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..field.len() {
        if !field[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            let (x, y) = (i % width, i / width);
            comp.push(Pixel::new(x, y));
            for &(dx, dy) in connectivity.offsets() {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                if nx < 0 || ny < 0 || nx >= width as isize || ny >= height as isize {
                    continue;
                }
                let j = ny as usize * width + nx as usize;
                if field[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        comp.sort();
        out.push(comp);
    }
    out
}

/// Candidates are area1 pixels strictly brighter than `threshold`; touching
/// candidates form one cell.
pub fn detect_cells(
    image: &AsOctImage,
    rois: &RoiGeometry,
    threshold: f64,
    connectivity: Connectivity,
) -> Result<CellDetection, QuantError> {
    if !threshold.is_finite() {
        return Err(QuantError::BadThreshold(threshold));
    }
    let (w, h) = (image.width(), image.height());
    let mut field = vec![false; w * h];
    let mut candidates = Vec::new();
    for &p in &rois.area1 {
        if image.get(p) > threshold {
            field[p.y * w + p.x] = true;
            candidates.push(p);
        }
    }
    candidates.sort();
    let components = label_components(&field, w, h, connectivity);
    Ok(CellDetection {
        threshold,
        count: components.len(),
        total_cell_area_mm2: candidates.len() as f64 * image.pixel_area_mm2(),
        candidate_pixels: candidates,
        components,
    })
}

/// Mean area1 intensity with cell pixels excluded, over mean area2 intensity.
pub fn compute_ari(image: &AsOctImage, rois: &RoiGeometry, detection: &CellDetection) -> Result<f64, QuantError> {
    if rois.area2.is_empty() {
        return Err(QuantError::EmptyAirRegion);
    }
    let n_aqueous = rois.area1.len() - detection.candidate_pixels.len();
    if n_aqueous == 0 {
        return Err(QuantError::AllCells);
    }
    let cell_sum: f64 = detection.candidate_pixels.iter().map(|&p| image.get(p)).sum();
    let area1_sum: f64 = rois.area1.iter().map(|&p| image.get(p)).sum();
    let aqueous_mean = (area1_sum - cell_sum) / n_aqueous as f64;
    let air_mean = rois.area2.iter().map(|&p| image.get(p)).sum::<f64>() / rois.area2.len() as f64;
    if air_mean <= 0.0 {
        return Err(QuantError::ZeroAirIntensity);
    }
    Ok(aqueous_mean / air_mean)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantResult {
    pub cell_count: u32,
    pub total_cell_area_mm2: f64,
    pub ari: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct QuantConfig {
    #[serde(default)]
    pub threshold: ThresholdRule,
    #[serde(default)]
    pub connectivity: Connectivity,
}

/// Full per-image pipeline: boundary, ROIs, threshold, cells, ARI.
pub fn quantify_image(image: &AsOctImage, mask: &AcMask, config: &QuantConfig) -> Result<QuantResult, QuantError> {
    if (mask.width(), mask.height()) != (image.width(), image.height()) {
        return Err(QuantError::InvalidImage(format!(
            "mask {}x{} does not match image {}x{}",
            mask.width(),
            mask.height(),
            image.width(),
            image.height()
        )));
    }
    let endpoints = extract_boundary(mask)?;
    let rois = place_rois(endpoints, image.calibration())?;
    let threshold = config.threshold.resolve(image, &rois)?;
    let det = detect_cells(image, &rois, threshold, config.connectivity)?;
    let ari = compute_ari(image, &rois, &det)?;
    Ok(QuantResult {
        cell_count: det.count as u32,
        total_cell_area_mm2: det.total_cell_area_mm2,
        ari,
    })
}

/// Quantifies the three cross-sections of one eye and averages them; the
/// cell count mean is rounded half-up.
pub fn quantify_eye(scans: &[(AsOctImage, AcMask)], config: &QuantConfig) -> Result<QuantResult, QuantError> {
    if scans.len() != 3 {
        return Err(QuantError::WrongImageCount(scans.len()));
    }
    let results = scans
        .iter()
        .enumerate()
        .map(|(index, (img, mask))| {
            quantify_image(img, mask, config).map_err(|e| QuantError::InImage {
                index,
                source: Box::new(e),
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(aggregate(&results))
}

pub fn aggregate(results: &[QuantResult]) -> QuantResult {
    let n = results.len() as f64;
    let count_sum: u32 = results.iter().map(|r| r.cell_count).sum();
    // half-up rounding of count_sum / n in integer arithmetic
    let n_int = results.len() as u32;
    let cell_count = (2 * count_sum + n_int) / (2 * n_int);
    QuantResult {
        cell_count,
        total_cell_area_mm2: results.iter().map(|r| r.total_cell_area_mm2).sum::<f64>() / n,
        ari: results.iter().map(|r| r.ari).sum::<f64>() / n,
    }
}

/// Produces AC masks from raw images.
pub trait Segmenter {
    fn segment(&self, image: &AsOctImage) -> Result<AcMask, QuantError>;
}

/// Heuristic for synthetic renders only: keeps the largest connected region
/// whose intensity lies within `[low, high]`, then fills cell holes column-wise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntensityBandSegmenter {
    pub low: f64,
    pub high: f64,
}

impl Segmenter for IntensityBandSegmenter {
    fn segment(&self, image: &AsOctImage) -> Result<AcMask, QuantError> {
        let (w, h) = (image.width(), image.height());
        let band: Vec<bool> = image
            .pixels()
            .iter()
            .map(|&v| v >= self.low && v <= self.high)
            .collect();
        let comps = label_components(&band, w, h, Connectivity::Four);
        let largest = comps.into_iter().max_by_key(|c| c.len()).ok_or(QuantError::EmptyMask)?;
        let mut mask = vec![false; w * h];
        for p in &largest {
            mask[p.y * w + p.x] = true;
        }
        // close vertical gaps left by bright cells inside the chamber
        for x in 0..w {
            let ys: Vec<usize> = (0..h).filter(|&y| mask[y * w + x]).collect();
            if let (Some(&top), Some(&bottom)) = (ys.first(), ys.last()) {
                for y in top..=bottom {
                    mask[y * w + x] = true;
                }
            }
        }
        AcMask::new(w, h, mask)
    }
}
