//! Rasters (PGM P5, PNG), the tabular CSV and the on-disk dataset layout.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{ImageKind, SlitLampPair};
use crate::model::Sample;
use crate::quantifier::{quantify_eye, AcMask, AsOctImage, QuantConfig, QuantResult};
use crate::synthgen::{gen_samples, GeneratorSpec, GroundTruth, SyntheticSample};
use crate::tabular::ClinicalRecord;
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MANIFEST: &str = "manifest.json";
pub const TABULAR: &str = "tabular.csv";
pub const TABULAR_HEADER: &str = "id,gender,age,bcva,iop,kp_grade,flare_grade,cell_area_mm2,cell_count,ari,label";

/// 8-bit grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Gray {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Gray {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::Data(format!("{} bytes for a {width}x{height} raster", data.len())));
        }
        Ok(Self { width, height, data })
    }

    /// Values scaled to `[0, 1]` as a `(1, H, W)` tensor.
    pub fn to_unit_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&v| f64::from(v) / 255.0).collect();
        Tensor::new(vec![1, self.height, self.width], data).expect("shape matches")
    }

    /// Inverse of [`Gray::to_unit_tensor`]; values are clamped and rounded.
    pub fn from_unit_tensor(t: &Tensor) -> Result<Self> {
        let (h, w) = match *t.shape() {
            [1, h, w] | [h, w] => (h, w),
            _ => return Err(Error::Data(format!("expected a (1, H, W) image, got {:?}", t.shape()))),
        };
        let data = t.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        Self::new(w, h, data)
    }
}

pub fn encode_pgm(img: &Gray) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

fn pgm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Data("truncated PGM header".into()));
    }
    Ok(&bytes[start..*pos])
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Gray> {
    let mut pos = 0;
    if pgm_token(bytes, &mut pos)? != b"P5" {
        return Err(Error::Data("not a binary PGM (P5)".into()));
    }
    let mut num = |name: &str| -> Result<usize> {
        let tok = pgm_token(bytes, &mut pos)?;
        std::str::from_utf8(tok)
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Data(format!("bad PGM {name}")))
    };
    let width = num("width")?;
    let height = num("height")?;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::Data(format!("unsupported PGM maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = width * height;
    if bytes.len() < pos + need {
        return Err(Error::Data(format!("PGM raster has {} of {need} bytes", bytes.len().saturating_sub(pos))));
    }
    let raw = &bytes[pos..pos + need];
    let data = if maxval == 255 {
        raw.to_vec()
    } else {
        raw.iter()
            .map(|&v| ((f64::from(v.min(maxval as u8)) * 255.0 / maxval as f64).round()) as u8)
            .collect()
    };
    Gray::new(width, height, data)
}

pub fn write_pgm(path: &Path, img: &Gray) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_png(path: &Path, img: &Gray) -> Result<()> {
    let buf = image::GrayImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
        .ok_or_else(|| Error::Data("raster size mismatch".into()))?;
    buf.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

/// Reads a PGM or PNG raster, chosen by extension.
pub fn read_gray(path: &Path) -> Result<Gray> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if ext == "png" {
        let img = image::open(path).map_err(|e| Error::Data(format!("reading {}: {e}", path.display())))?;
        let luma = img.into_luma8();
        let (w, h) = luma.dimensions();
        return Gray::new(w as usize, h as usize, luma.into_raw());
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(&bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

fn mask_raster(mask: &AcMask) -> Gray {
    let data = mask.as_slice().iter().map(|&m| if m { 255 } else { 0 }).collect();
    Gray::new(mask.width(), mask.height(), data).expect("mask is non-empty")
}

fn oct_raster(img: &AsOctImage) -> Gray {
    let data = img.pixels().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect();
    Gray::new(img.width(), img.height(), data).expect("image is non-empty")
}

/// One row of the tabular CSV. The three image-derived columns may be blank.
#[derive(Clone, Debug, PartialEq)]
pub struct TabularRow {
    pub id: String,
    pub gender: u8,
    pub age: f64,
    pub bcva: f64,
    pub iop: f64,
    pub kp_grade: f64,
    pub flare_grade: f64,
    pub cell_area_mm2: Option<f64>,
    pub cell_count: Option<u32>,
    pub ari: Option<f64>,
    pub label: usize,
}

impl TabularRow {
    pub fn from_record(id: &str, record: &ClinicalRecord, label: usize) -> Self {
        Self {
            id: id.to_string(),
            gender: record.gender,
            age: record.age,
            bcva: record.bcva,
            iop: record.iop,
            kp_grade: record.kp_grade,
            flare_grade: record.flare_grade,
            cell_area_mm2: Some(record.cell_area_mm2),
            cell_count: Some(record.cell_count),
            ari: Some(record.ari),
            label,
        }
    }

    pub fn is_complete(&self) -> bool {
        self.cell_area_mm2.is_some() && self.cell_count.is_some() && self.ari.is_some()
    }

    /// Fills only the blank image-derived columns.
    pub fn backfill(&mut self, q: &QuantResult) {
        self.cell_area_mm2.get_or_insert(q.total_cell_area_mm2);
        self.cell_count.get_or_insert(q.cell_count);
        self.ari.get_or_insert(q.ari);
    }

    pub fn record(&self) -> Result<ClinicalRecord> {
        let missing = || Error::Data(format!("{}: image-derived columns are blank; run quantify", self.id));
        let r = ClinicalRecord {
            gender: self.gender,
            age: self.age,
            bcva: self.bcva,
            iop: self.iop,
            kp_grade: self.kp_grade,
            flare_grade: self.flare_grade,
            cell_area_mm2: self.cell_area_mm2.ok_or_else(missing)?,
            cell_count: self.cell_count.ok_or_else(missing)?,
            ari: self.ari.ok_or_else(missing)?,
        };
        r.validate()?;
        Ok(r)
    }
}

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

pub fn format_tabular(rows: &[TabularRow]) -> String {
    let mut s = format!("{TABULAR_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.id,
            r.gender,
            r.age,
            r.bcva,
            r.iop,
            r.kp_grade,
            r.flare_grade,
            opt(r.cell_area_mm2),
            opt(r.cell_count),
            opt(r.ari),
            r.label
        );
    }
    s
}

pub fn parse_tabular(text: &str) -> Result<Vec<TabularRow>> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    match lines.next() {
        Some((_, h)) if h.trim() == TABULAR_HEADER => {}
        _ => return Err(Error::Data(format!("tabular CSV must start with `{TABULAR_HEADER}`"))),
    }
    lines
        .map(|(n, line)| {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 11 {
                return Err(Error::Data(format!("line {}: expected 11 fields, got {}", n + 1, f.len())));
            }
            let bad = |col: &str| Error::Data(format!("line {}: bad {col} {:?}", n + 1, line));
            let num = |i: usize, col: &str| f[i].parse::<f64>().map_err(|_| bad(col));
            let blank_or = |i: usize, col: &str| -> Result<Option<f64>> {
                if f[i].is_empty() {
                    Ok(None)
                } else {
                    num(i, col).map(Some)
                }
            };
            Ok(TabularRow {
                id: f[0].to_string(),
                gender: f[1].parse().map_err(|_| bad("gender"))?,
                age: num(2, "age")?,
                bcva: num(3, "bcva")?,
                iop: num(4, "iop")?,
                kp_grade: num(5, "kp_grade")?,
                flare_grade: num(6, "flare_grade")?,
                cell_area_mm2: blank_or(7, "cell_area_mm2")?,
                cell_count: if f[8].is_empty() {
                    None
                } else {
                    Some(f[8].parse().map_err(|_| bad("cell_count"))?)
                },
                ari: blank_or(9, "ari")?,
                label: f[10].parse().map_err(|_| bad("label"))?,
            })
        })
        .collect()
}

pub fn read_tabular(path: &Path) -> Result<Vec<TabularRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_tabular(&text)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub label: usize,
    pub overall: [String; 2],
    pub ac: [String; 2],
    pub oct: [String; 3],
    pub masks: [String; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<GroundTruth>,
}

impl ManifestEntry {
    pub fn for_id(id: &str, label: usize) -> Self {
        Self {
            id: id.to_string(),
            label,
            overall: [1, 2].map(|i| format!("images/{id}_overall{i}.pgm")),
            ac: [1, 2].map(|i| format!("images/{id}_ac{i}.pgm")),
            oct: [1, 2, 3].map(|i| format!("oct/{id}_{i}.pgm")),
            masks: [1, 2, 3].map(|i| format!("masks/{id}_{i}.pgm")),
            truth: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GeneratorSpec>,
    pub samples: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        write_json(&dir.join(MANIFEST), self)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes generated eyes in the dataset layout under `dir`.
pub fn write_dataset(dir: &Path, spec: &GeneratorSpec, samples: &[SyntheticSample]) -> Result<()> {
    for sub in ["images", "oct", "masks"] {
        create_dir(&dir.join(sub))?;
    }
    let mut entries = Vec::with_capacity(samples.len());
    let mut rows = Vec::with_capacity(samples.len());
    for s in samples {
        let mut e = ManifestEntry::for_id(&s.id, s.label);
        for (path, t) in e.overall.iter().zip(&s.overall).chain(e.ac.iter().zip(&s.ac)) {
            write_pgm(&dir.join(path), &Gray::from_unit_tensor(t)?)?;
        }
        for (i, (img, mask)) in s.scans.iter().enumerate() {
            write_pgm(&dir.join(&e.oct[i]), &oct_raster(img))?;
            write_pgm(&dir.join(&e.masks[i]), &mask_raster(mask))?;
        }
        e.truth = Some(s.truth.clone());
        rows.push(TabularRow::from_record(&s.id, &s.record, s.label));
        entries.push(e);
    }
    let tab = dir.join(TABULAR);
    fs::write(&tab, format_tabular(&rows)).map_err(|e| Error::io(&tab, e))?;
    Manifest {
        generator: Some(spec.clone()),
        samples: entries,
    }
    .save(dir)
}

/// Generates `n` eyes from `spec` and writes them to `dir`.
pub fn gen_dataset(dir: &Path, spec: &GeneratorSpec, n: usize) -> Result<Vec<SyntheticSample>> {
    let samples = gen_samples(spec, n)?;
    write_dataset(dir, spec, &samples)?;
    Ok(samples)
}

/// The three cross-sections of one eye with their masks.
pub fn load_scans(dir: &Path, entry: &ManifestEntry) -> Result<Vec<(AsOctImage, AcMask)>> {
    entry
        .oct
        .iter()
        .zip(&entry.masks)
        .map(|(o, m)| {
            let img = read_gray(&dir.join(o))?;
            let mask = read_gray(&dir.join(m))?;
            let pixels = img.data.iter().map(|&v| f64::from(v)).collect();
            let image = AsOctImage::with_scan_calibration(img.width, img.height, pixels)?;
            let mask = AcMask::new(mask.width, mask.height, mask.data.iter().map(|&v| v != 0).collect())?;
            Ok((image, mask))
        })
        .collect()
}

/// Quantifies every eye and fills blank image-derived CSV columns. Returns
/// the per-eye results in manifest order.
pub fn quantify_dataset(dir: &Path, config: &QuantConfig) -> Result<Vec<(String, QuantResult)>> {
    let manifest = Manifest::load(dir)?;
    let tab = dir.join(TABULAR);
    let mut rows = read_tabular(&tab)?;
    let mut out = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let scans = load_scans(dir, e)?;
        let q = quantify_eye(&scans, config).map_err(|err| Error::Data(format!("{}: {err}", e.id)))?;
        if let Some(row) = rows.iter_mut().find(|r| r.id == e.id) {
            row.backfill(&q);
        }
        out.push((e.id.clone(), q));
    }
    fs::write(&tab, format_tabular(&rows)).map_err(|e| Error::io(&tab, e))?;
    Ok(out)
}

pub fn quant_csv(results: &[(String, QuantResult)]) -> String {
    let mut s = String::from("id,cell_count,total_cell_area_mm2,ari\n");
    for (id, q) in results {
        let _ = writeln!(s, "{id},{},{},{}", q.cell_count, q.total_cell_area_mm2, q.ari);
    }
    s
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn find(&self, id: &str) -> Option<(usize, &Sample)> {
        self.samples.iter().enumerate().find(|(_, s)| s.id == id)
    }
}

/// Loads every eye. Blank image-derived columns are quantified on the fly.
pub fn load_dataset(dir: &Path, config: &QuantConfig) -> Result<Dataset> {
    let manifest = Manifest::load(dir)?;
    let rows = read_tabular(&dir.join(TABULAR))?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let mut row = rows
            .iter()
            .find(|r| r.id == e.id)
            .cloned()
            .ok_or_else(|| Error::Data(format!("{} missing from {TABULAR}", e.id)))?;
        if row.label != e.label {
            return Err(Error::Data(format!("{}: label differs between manifest and {TABULAR}", e.id)));
        }
        if !row.is_complete() {
            let q = quantify_eye(&load_scans(dir, e)?, config)?;
            row.backfill(&q);
        }
        let load = |paths: &[String; 2]| -> Result<[Tensor; 2]> {
            Ok([read_gray(&dir.join(&paths[0]))?.to_unit_tensor(), read_gray(&dir.join(&paths[1]))?.to_unit_tensor()])
        };
        let [o1, o2] = load(&e.overall)?;
        let [a1, a2] = load(&e.ac)?;
        samples.push(Sample {
            id: e.id.clone(),
            overall: SlitLampPair::new(ImageKind::Overall, o1, o2)?,
            ac: SlitLampPair::new(ImageKind::AcObservation, a1, a2)?,
            record: row.record()?,
            label: e.label,
        });
    }
    Ok(Dataset {
        root: dir.to_path_buf(),
        manifest,
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_roundtrip_with_comment() {
        let img = Gray::new(3, 2, vec![0, 1, 2, 250, 254, 255]).unwrap();
        let bytes = encode_pgm(&img);
        assert_eq!(decode_pgm(&bytes).unwrap(), img);
        let commented = b"P5\n# made by hand\n3 2\n255\n\x00\x01\x02\xfa\xfe\xff";
        assert_eq!(decode_pgm(commented).unwrap(), img);
    }

    #[test]
    fn pgm_rejects_ascii_and_short_raster() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pgm(b"P5\n2 2\n255\n\x00").is_err());
    }

    #[test]
    fn low_maxval_rescales() {
        let g = decode_pgm(b"P5 2 1 15 \x00\x0f").unwrap();
        assert_eq!(g.data, vec![0, 255]);
    }

    #[test]
    fn unit_tensor_roundtrip_is_exact() {
        let img = Gray::new(2, 2, vec![0, 17, 128, 255]).unwrap();
        let t = img.to_unit_tensor();
        assert_eq!(t.shape(), &[1, 2, 2]);
        assert_eq!(Gray::from_unit_tensor(&t).unwrap(), img);
    }

    #[test]
    fn tabular_blank_columns() {
        let text = format!("{TABULAR_HEADER}\neye1,1,40,0.5,12,1,0.5,,,,1\n");
        let mut rows = parse_tabular(&text).unwrap();
        assert!(!rows[0].is_complete());
        assert!(rows[0].record().is_err());
        rows[0].backfill(&QuantResult {
            cell_count: 4,
            total_cell_area_mm2: 0.01,
            ari: 1.5,
        });
        let r = rows[0].record().unwrap();
        assert_eq!((r.cell_count, r.ari), (4, 1.5));
        assert_eq!(parse_tabular(&format_tabular(&rows)).unwrap(), rows);
    }

    #[test]
    fn backfill_keeps_present_values() {
        let text = format!("{TABULAR_HEADER}\neye1,0,40,0.5,12,1,0.5,0.2,,3.0,0\n");
        let mut rows = parse_tabular(&text).unwrap();
        rows[0].backfill(&QuantResult {
            cell_count: 4,
            total_cell_area_mm2: 0.01,
            ari: 1.5,
        });
        assert_eq!((rows[0].cell_area_mm2, rows[0].cell_count, rows[0].ari), (Some(0.2), Some(4), Some(3.0)));
    }

    #[test]
    fn bad_header_and_field_count() {
        assert!(parse_tabular("id,label\n").is_err());
        assert!(parse_tabular(&format!("{TABULAR_HEADER}\neye1,1,40\n")).is_err());
    }
}
