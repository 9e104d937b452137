//! Report files: summary tables, record dumps, object-size scatter data and shot-scaling plots.
//!
//! Output depends only on the set of input records, so re-emitting unchanged
//! records reproduces every file byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use fss_core::adaptation::Method;
use fss_core::digest::to_hex;
use fss_core::report::{lr_scores_from_records, lr_transfer, summarize, DropEntry, ReportTable, RunRecord};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::write_atomic;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Format {
    /// `summary.csv` (mean ± std per cell) and `runs.csv` (one line per run).
    Csv,
    /// `records.json`: every record in full.
    Json,
    /// `records.jsonl`: one record per line.
    Jsonl,
    /// `object_sizes.csv`: per-image class area against IoU.
    Sizes,
    /// `shots_<encoder>.svg`: mIoU against shots, one series per method.
    Plot,
    /// `lr_transfer_<encoder>_<method>_<k>shot.csv` for multi-dataset learning-rate grids.
    LrTransfer,
}

impl Format {
    pub const ALL: [Format; 6] = [Format::Csv, Format::Json, Format::Jsonl, Format::Sizes, Format::Plot, Format::LrTransfer];
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "csv" => Format::Csv,
            "json" => Format::Json,
            "jsonl" => Format::Jsonl,
            "sizes" => Format::Sizes,
            "plot" | "svg" => Format::Plot,
            "lr-transfer" => Format::LrTransfer,
            other => return Err(Error::Format(format!("unknown report format {other:?}"))),
        })
    }
}

fn lr_key(r: &RunRecord) -> (f64, f64) {
    (r.lr, r.stage2_lr.unwrap_or(f64::NAN))
}

/// The rate a grid varies: stage 2 when present, else the head rate.
fn tuned_lr(key: (f64, f64)) -> f64 {
    if key.1.is_nan() {
        key.0
    } else {
        key.1
    }
}

fn sort_records(records: &[RunRecord]) -> Vec<RunRecord> {
    let mut v = records.to_vec();
    v.sort_by(|a, b| {
        (&a.dataset, &a.encoder, a.method, a.shots, a.seed)
            .cmp(&(&b.dataset, &b.encoder, b.method, b.shots, b.seed))
            .then(a.lr.total_cmp(&b.lr))
            .then(lr_key(a).1.total_cmp(&lr_key(b).1))
            .then(a.spec_hash.cmp(&b.spec_hash))
    });
    v
}

/// Keep, per (dataset, encoder, method, shots), the learning rates with the best mean mIoU over seeds.
/// Ties go to the larger rate. Cells run at a single rate pass through unchanged.
pub fn select_best_lr(records: &[RunRecord]) -> Vec<RunRecord> {
    type Cell<'a> = (&'a str, &'a str, Method, usize);
    let mut means: BTreeMap<Cell, Vec<((f64, f64), f64, usize)>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.succeeded()) {
        let list = means.entry((&r.dataset, &r.encoder, r.method, r.shots)).or_default();
        let key = lr_key(r);
        let m = r.miou.expect("succeeded");
        match list.iter_mut().find(|(k, _, _)| k.0 == key.0 && k.1.total_cmp(&key.1).is_eq()) {
            Some(e) => {
                e.1 += m;
                e.2 += 1;
            }
            None => list.push((key, m, 1)),
        }
    }
    let best: BTreeMap<Cell, (f64, f64)> = means
        .into_iter()
        .map(|(cell, list)| {
            let pick = list
                .iter()
                .map(|(k, s, n)| (*k, s / *n as f64))
                .reduce(|a, b| {
                    if b.1 > a.1 || (b.1 == a.1 && tuned_lr(b.0) > tuned_lr(a.0)) {
                        b
                    } else {
                        a
                    }
                })
                .expect("non-empty");
            (cell, pick.0)
        })
        .collect();
    records
        .iter()
        .filter(|r| {
            r.succeeded()
                && best.get(&(r.dataset.as_str(), r.encoder.as_str(), r.method, r.shots)).is_some_and(|k| k.0 == r.lr && k.1.total_cmp(&lr_key(r).1).is_eq())
        })
        .cloned()
        .collect()
}

fn csv_bytes(header: &[&str], rows: Vec<Vec<String>>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Format(e.to_string()))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn summary_csv(table: &ReportTable) -> Result<Vec<u8>> {
    let rows = table
        .cells
        .iter()
        .map(|c| {
            vec![
                c.encoder.clone(),
                c.method.name().into(),
                c.shots.to_string(),
                c.datasets.join(";"),
                c.per_seed.len().to_string(),
                c.mean.to_string(),
                opt(c.std),
                c.display(4),
            ]
        })
        .collect();
    csv_bytes(&["encoder", "method", "shots", "datasets", "seeds", "mean_miou", "std_miou", "cell"], rows)
}

fn runs_csv(records: &[RunRecord]) -> Result<Vec<u8>> {
    let rows = records
        .iter()
        .map(|r| {
            let status = serde_json::to_value(r.status).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
            vec![
                r.dataset.clone(),
                r.encoder.clone(),
                r.method.name().into(),
                r.shots.to_string(),
                r.seed.to_string(),
                r.lr.to_string(),
                opt(r.stage2_lr),
                status,
                opt(r.miou),
                r.trainable.as_ref().map(|t| t.trainable.to_string()).unwrap_or_default(),
                r.trainable.as_ref().map(|t| t.fraction.to_string()).unwrap_or_default(),
                r.manifest_digest.clone().unwrap_or_default(),
                r.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    csv_bytes(
        &["dataset", "encoder", "method", "shots", "seed", "lr", "stage2_lr", "status", "miou", "trainable", "trainable_fraction", "manifest", "error"],
        rows,
    )
}

fn sizes_csv(records: &[RunRecord]) -> Result<Vec<u8>> {
    let mut rows = Vec::new();
    for r in records.iter().filter(|r| r.succeeded()) {
        for (class, points) in &r.object_sizes {
            for p in points {
                rows.push(vec![
                    r.dataset.clone(),
                    r.encoder.clone(),
                    r.method.name().into(),
                    r.shots.to_string(),
                    r.seed.to_string(),
                    class.clone(),
                    p.area.to_string(),
                    p.iou.to_string(),
                ]);
            }
        }
    }
    csv_bytes(&["dataset", "encoder", "method", "shots", "seed", "class", "area", "iou"], rows)
}

const SERIES_COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// mIoU against shots for one encoder; shots are placed evenly in sorted order.
pub fn shot_scaling_svg(table: &ReportTable, encoder: &str) -> String {
    let cells: Vec<_> = table.cells.iter().filter(|c| c.encoder == encoder).collect();
    let shots: Vec<usize> = cells.iter().map(|c| c.shots).collect::<BTreeSet<_>>().into_iter().collect();
    let methods: Vec<Method> = cells.iter().map(|c| c.method).collect::<BTreeSet<_>>().into_iter().collect();
    let (w, h, left, right, top, bottom) = (640.0, 420.0, 60.0, 150.0, 30.0, 50.0);
    let pw = w - left - right;
    let ph = h - top - bottom;
    let x_of = |i: usize| if shots.len() < 2 { left + pw / 2.0 } else { left + pw * i as f64 / (shots.len() - 1) as f64 };
    let y_of = |v: f64| top + ph * (1.0 - v.clamp(0.0, 1.0));
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">{} : mIoU vs shots</text>"#, left + pw / 2.0, xml_escape(encoder));
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let y = y_of(v);
        let _ = writeln!(s, r##"<line x1="{left}" y1="{y}" x2="{}" y2="{y}" stroke="#dddddd"/>"##, left + pw);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{v:.1}</text>"#, left - 6.0, y + 4.0);
    }
    for (i, k) in shots.iter().enumerate() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{k}</text>"#, x_of(i), top + ph + 18.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">shots</text>"#, left + pw / 2.0, h - 8.0);
    let _ = writeln!(s, r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#);
    for (mi, m) in methods.iter().enumerate() {
        let color = SERIES_COLORS[mi % SERIES_COLORS.len()];
        let pts: Vec<(f64, f64, Option<f64>)> = shots
            .iter()
            .enumerate()
            .filter_map(|(i, k)| cells.iter().find(|c| c.method == *m && c.shots == *k).map(|c| (x_of(i), c.mean, c.std)))
            .collect();
        let poly: Vec<String> = pts.iter().map(|(x, v, _)| format!("{x},{}", y_of(*v))).collect();
        let _ = writeln!(s, r#"<polyline class="series" data-method="{}" points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, m.name(), poly.join(" "));
        for (x, v, sd) in &pts {
            if let Some(sd) = sd {
                let _ = writeln!(s, r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="{color}"/>"#, y_of(v - sd), y_of(v + sd));
            }
            let _ = writeln!(s, r#"<circle cx="{x}" cy="{}" r="3" fill="{color}"/>"#, y_of(*v));
        }
        let ly = top + 10.0 + 18.0 * mi as f64;
        let lx = left + pw + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, m.name());
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn drop_csv(records: &[RunRecord], encoder: &str, method: Method, shots: usize) -> Result<Option<Vec<u8>>> {
    let scores = lr_scores_from_records(records, encoder, method, shots);
    if scores.len() < 2 {
        return Ok(None);
    }
    let m = lr_transfer(&scores);
    let mut header = vec!["source", "best_lr"];
    header.extend(m.datasets.iter().map(String::as_str));
    let rows = m
        .entries
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut out = vec![m.datasets[i].clone(), opt(m.best_lr[i])];
            out.extend(row.iter().map(|e| match e {
                DropEntry::Diagonal => "-".to_string(),
                DropEntry::Unavailable => "n/a".to_string(),
                DropEntry::Drop(d) => d.to_string(),
            }));
            out
        })
        .collect();
    csv_bytes(&header, rows).map(Some)
}

#[derive(Serialize)]
struct ManifestFile {
    name: String,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct ReportManifest {
    version: &'static str,
    records: usize,
    succeeded: usize,
    files: Vec<ManifestFile>,
}

fn json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

/// Write the requested report files plus `manifest.json` into `out`; returns the written paths.
pub fn emit_report(records: &[RunRecord], formats: &[Format], out: &Path) -> Result<Vec<PathBuf>> {
    let records = sort_records(records);
    let selected = select_best_lr(&records);
    let table = summarize(&selected)?;
    let formats: BTreeSet<Format> = formats.iter().copied().collect();
    let mut files: Vec<(String, Vec<u8>)> = Vec::new();
    for f in &formats {
        match f {
            Format::Csv => {
                files.push(("summary.csv".into(), summary_csv(&table)?));
                files.push(("runs.csv".into(), runs_csv(&records)?));
            }
            Format::Json => files.push(("records.json".into(), json_bytes(&records)?)),
            Format::Jsonl => {
                let mut buf = Vec::new();
                for r in &records {
                    buf.extend(serde_json::to_vec(r)?);
                    buf.push(b'\n');
                }
                files.push(("records.jsonl".into(), buf));
            }
            Format::Sizes => files.push(("object_sizes.csv".into(), sizes_csv(&selected)?)),
            Format::Plot => {
                let encoders: BTreeSet<&str> = table.cells.iter().map(|c| c.encoder.as_str()).collect();
                for e in encoders {
                    files.push((format!("shots_{}.svg", e), shot_scaling_svg(&table, e).into_bytes()));
                }
            }
            Format::LrTransfer => {
                let cells: BTreeSet<(&str, Method, usize)> = records.iter().map(|r| (r.encoder.as_str(), r.method, r.shots)).collect();
                for (e, m, k) in cells {
                    if let Some(bytes) = drop_csv(&records, e, m, k)? {
                        files.push((format!("lr_transfer_{e}_{}_{k}shot.csv", m.name()), bytes));
                    }
                }
            }
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut written = Vec::with_capacity(files.len() + 1);
    let mut listing = Vec::with_capacity(files.len());
    for (name, bytes) in &files {
        let path = out.join(name);
        write_atomic(&path, bytes)?;
        listing.push(ManifestFile { name: name.clone(), bytes: bytes.len(), sha256: to_hex(Sha256::digest(bytes).as_slice()) });
        written.push(path);
    }
    listing.sort_by(|a, b| a.name.cmp(&b.name));
    let manifest = ReportManifest { version: crate::VERSION, records: records.len(), succeeded: records.iter().filter(|r| r.succeeded()).count(), files: listing };
    let path = out.join("manifest.json");
    write_atomic(&path, &json_bytes(&manifest)?)?;
    written.push(path);
    Ok(written)
}
