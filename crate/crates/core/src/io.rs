//! On-disk formats.
//!
//! Images and sinograms: one line of JSON header, then a little-endian `f32`
//! payload. Checkpoints: one line of JSON header, then little-endian `f64`
//! parameters. Loss curves and metric tables are CSV.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::{Architecture, DenoiserModel, ScheduleSpec};
use crate::error::{ensure, Error, Result};
use crate::geometry::FanBeamGeometry;
use crate::image::{Image, Sinogram};

pub const IMAGE_FORMAT: &str = "latent-ct/raster-f32";
pub const CHECKPOINT_FORMAT: &str = "latent-ct/checkpoint-f64";

/// HU interval that maps onto normalized `[−1, 1]`.
pub const HU_RANGE: (f64, f64) = (-500.0, 200.0);

/// Display window used for viewing exports.
pub const DISPLAY_WINDOW_HU: (f64, f64) = (-150.0, 200.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RasterKind {
    Image,
    Sinogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RasterHeader {
    pub format: String,
    pub kind: RasterKind,
    /// Columns: pixels for images, detectors for sinograms.
    pub width: usize,
    /// Rows: pixels for images, views for sinograms.
    pub height: usize,
    /// HU values corresponding to normalized −1 and 1.
    pub value_range: (f64, f64),
    #[serde(default)]
    pub geometry: Option<FanBeamGeometry>,
}

fn encode_raster(header: &RasterHeader, data: &[f64]) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec(header)?;
    out.push(b'\n');
    out.reserve(data.len() * 4);
    for &v in data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    Ok(out)
}

fn split_header<R: Read>(reader: R) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut reader = BufReader::new(reader);
    let mut header = Vec::new();
    reader.read_until(b'\n', &mut header)?;
    if header.last() != Some(&b'\n') {
        return Err(Error::Format("missing header line".into()));
    }
    header.pop();
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    Ok((header, payload))
}

fn decode_raster(bytes: &[u8]) -> Result<(RasterHeader, Vec<f64>)> {
    let (header, payload) = split_header(bytes)?;
    let header: RasterHeader = serde_json::from_slice(&header)?;
    if header.format != IMAGE_FORMAT {
        return Err(Error::Format(format!("unexpected format {:?}", header.format)));
    }
    let expected = header.width * header.height * 4;
    if payload.len() != expected {
        return Err(Error::Format(format!(
            "header says {}x{} but the payload holds {} bytes",
            header.width,
            header.height,
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
        .collect();
    Ok((header, data))
}

pub fn encode_image(image: &Image, geometry: Option<&FanBeamGeometry>) -> Result<Vec<u8>> {
    let header = RasterHeader {
        format: IMAGE_FORMAT.into(),
        kind: RasterKind::Image,
        width: image.size(),
        height: image.size(),
        value_range: HU_RANGE,
        geometry: geometry.copied(),
    };
    encode_raster(&header, image.data())
}

pub fn decode_image(bytes: &[u8]) -> Result<(Image, RasterHeader)> {
    let (header, data) = decode_raster(bytes)?;
    if header.kind != RasterKind::Image || header.width != header.height {
        return Err(Error::Format("file does not hold a square image".into()));
    }
    Ok((Image::new(header.width, data)?, header))
}

pub fn encode_sinogram(sino: &Sinogram, geometry: Option<&FanBeamGeometry>) -> Result<Vec<u8>> {
    let header = RasterHeader {
        format: IMAGE_FORMAT.into(),
        kind: RasterKind::Sinogram,
        width: sino.n_detectors(),
        height: sino.n_views(),
        value_range: HU_RANGE,
        geometry: geometry.copied(),
    };
    encode_raster(&header, sino.data())
}

pub fn decode_sinogram(bytes: &[u8]) -> Result<(Sinogram, RasterHeader)> {
    let (header, data) = decode_raster(bytes)?;
    if header.kind != RasterKind::Sinogram {
        return Err(Error::Format("file does not hold a sinogram".into()));
    }
    Ok((Sinogram::new(header.height, header.width, data)?, header))
}

pub fn write_image(path: &Path, image: &Image, geometry: Option<&FanBeamGeometry>) -> Result<()> {
    Ok(fs::write(path, encode_image(image, geometry)?)?)
}

pub fn read_image(path: &Path) -> Result<(Image, RasterHeader)> {
    decode_image(&fs::read(path)?)
}

pub fn write_sinogram(path: &Path, sino: &Sinogram, geometry: Option<&FanBeamGeometry>) -> Result<()> {
    Ok(fs::write(path, encode_sinogram(sino, geometry)?)?)
}

pub fn read_sinogram(path: &Path) -> Result<(Sinogram, RasterHeader)> {
    decode_sinogram(&fs::read(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointHeader {
    pub format: String,
    pub architecture: Architecture,
    pub t_max: usize,
    pub schedule: ScheduleSpec,
    pub seed: u64,
    pub param_count: usize,
}

pub fn encode_checkpoint(model: &DenoiserModel, schedule: &ScheduleSpec, seed: u64) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        architecture: *model.architecture(),
        t_max: model.t_max(),
        schedule: schedule.clone(),
        seed,
        param_count: model.param_count(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for &p in model.params() {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(DenoiserModel, CheckpointHeader)> {
    let (header, payload) = split_header(bytes)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unexpected format {:?}", header.format)));
    }
    if payload.len() != header.param_count * 8 {
        return Err(Error::Format(format!(
            "header declares {} parameters but the payload holds {} bytes",
            header.param_count,
            payload.len()
        )));
    }
    let params = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
        .collect();
    let model = DenoiserModel::from_params(header.architecture, header.t_max, params)?;
    Ok((model, header))
}

pub fn save_checkpoint(path: &Path, model: &DenoiserModel, schedule: &ScheduleSpec, seed: u64) -> Result<()> {
    Ok(fs::write(path, encode_checkpoint(model, schedule, seed)?)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(DenoiserModel, CheckpointHeader)> {
    decode_checkpoint(&fs::read(path)?)
}

/// Writes a two-column curve, one row per entry, indexed from 0.
pub fn write_curve_csv(path: &Path, index_name: &str, value_name: &str, values: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([index_name, value_name])?;
    for (i, v) in values.iter().enumerate() {
        w.write_record([i.to_string(), format_float(*v)])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back the value column of [`write_curve_csv`].
pub fn read_curve_csv(path: &Path) -> Result<Vec<f64>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records()
        .map(|rec| {
            let rec = rec?;
            let field = rec.get(1).ok_or_else(|| Error::Format("curve row has no value".into()))?;
            parse_float(field)
        })
        .collect()
}

/// One row of a metric table.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub slice_id: String,
    pub method: String,
    pub t: Option<usize>,
    pub ssim: f64,
    pub psnr_db: f64,
    /// Extra trailing columns shared by every row of one table.
    pub extra: Vec<(String, f64)>,
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["slice_id".to_string(), "method".into(), "T".into(), "ssim".into(), "psnr_db".into()];
    if let Some(first) = rows.first() {
        header.extend(first.extra.iter().map(|(k, _)| k.clone()));
        ensure!(
            rows.iter().all(|r| r.extra.iter().map(|(k, _)| k).eq(first.extra.iter().map(|(k, _)| k))),
            "metric rows disagree on their extra columns"
        );
    }
    w.write_record(&header)?;
    for row in rows {
        let mut rec = vec![
            row.slice_id.clone(),
            row.method.clone(),
            row.t.map(|t| t.to_string()).unwrap_or_default(),
            format_float(row.ssim),
            format_float(row.psnr_db),
        ];
        rec.extend(row.extra.iter().map(|(_, v)| format_float(*v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    ensure!(header.len() >= 5, "metric table needs at least five columns");
    let extra_names: Vec<String> = header.iter().skip(5).map(str::to_string).collect();
    r.records()
        .map(|rec| {
            let rec = rec?;
            let t = match &rec[2] {
                "" => None,
                s => Some(s.parse().map_err(|_| Error::Format(format!("bad T value {s:?}")))?),
            };
            let extra = extra_names
                .iter()
                .zip(rec.iter().skip(5))
                .map(|(k, v)| Ok((k.clone(), parse_float(v)?)))
                .collect::<Result<_>>()?;
            Ok(MetricRow {
                slice_id: rec[0].to_string(),
                method: rec[1].to_string(),
                t,
                ssim: parse_float(&rec[3])?,
                psnr_db: parse_float(&rec[4])?,
                extra,
            })
        })
        .collect()
}

/// Shortest round-tripping decimal; infinities as `inf`/`-inf`.
fn format_float(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

fn parse_float(s: &str) -> Result<f64> {
    s.trim().parse::<f64>().map_err(|_| Error::Format(format!("bad number {s:?}")))
}

/// Normalized value to HU under [`HU_RANGE`].
pub fn to_hu(v: f64) -> f64 {
    HU_RANGE.0 + (v + 1.0) / 2.0 * (HU_RANGE.1 - HU_RANGE.0)
}

/// 8-bit binary PGM of a normalized image under an HU display window.
pub fn encode_pgm(image: &Image, window_hu: (f64, f64)) -> Result<Vec<u8>> {
    let (lo, hi) = window_hu;
    ensure!(hi > lo, "display window must be increasing");
    let n = image.size();
    let mut out = format!("P5\n{n} {n}\n255\n").into_bytes();
    out.extend(image.data().iter().map(|&v| {
        let level = ((to_hu(v) - lo) / (hi - lo)).clamp(0.0, 1.0);
        (level * 255.0).round() as u8
    }));
    Ok(out)
}

/// Writes `<dir>/<stem>_w<lo>_<hi>.pgm` and returns its path.
pub fn export_pgm(dir: &Path, stem: &str, image: &Image, window_hu: (f64, f64)) -> Result<PathBuf> {
    let path = dir.join(format!("{stem}_w{}_{}.pgm", window_hu.0, window_hu.1));
    let mut file = fs::File::create(&path)?;
    file.write_all(&encode_pgm(image, window_hu)?)?;
    Ok(path)
}
