//! Manifest + CSV ingestion.
//!
//! Wide layout: one row per (sample, channel):
//! `sample_id,channel_id,<label>,v_1,...,v_T`. Trailing empty cells are
//! trimmed, so series of different lengths can share a file.
//!
//! Long layout: one row per observation:
//! `sample_id,<time>,channel_id,value,<label>`. Channels missing at a time
//! point become masked entries.
//!
//! In both layouts an empty cell or `NaN` inside a series is read as a
//! missing (masked) value.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, Result, TimeSeriesSample};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    Wide,
    Long,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub name: Option<String>,
    /// CSV path, relative to the manifest's directory.
    pub csv: String,
    pub layout: Layout,
    pub d: usize,
    #[serde(rename = "C")]
    pub classes: usize,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default)]
    pub time_column: Option<String>,
}

fn default_label_column() -> String {
    "label".to_string()
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn csv_err(row: usize) -> impl FnOnce(csv::Error) -> DataError {
    move |e| DataError::Csv {
        row,
        message: e.to_string(),
    }
}

pub fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<Dataset> {
    let manifest_path = manifest_path.as_ref();
    let manifest = read_manifest(manifest_path)?;
    let csv_path: PathBuf = manifest_path
        .parent()
        .unwrap_or_else(|| Path::new("."))
        .join(&manifest.csv);
    let text = fs::read_to_string(&csv_path).map_err(io_err(&csv_path))?;
    let (ids, samples) = match manifest.layout {
        Layout::Wide => parse_wide(&text, &manifest)?,
        Layout::Long => parse_long(&text, &manifest)?,
    };
    if samples.is_empty() {
        return Err(DataError::NoSamples);
    }
    let name = manifest.name.clone().unwrap_or_else(|| {
        manifest_path
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".into())
    });
    let mut ds = Dataset::new(name, samples, manifest.classes, csv_path.display().to_string())?;
    ds.ids = ids;
    Ok(ds)
}

fn column_index(headers: &csv::StringRecord, name: &str) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| DataError::Csv {
            row: 1,
            message: format!("missing column {name:?}"),
        })
}

fn parse_label(raw: &str, row: usize, classes: usize) -> Result<usize> {
    match raw.trim().parse::<usize>() {
        Ok(l) if (1..=classes).contains(&l) => Ok(l),
        _ => Err(DataError::UnknownLabel {
            row,
            label: raw.to_string(),
            classes,
        }),
    }
}

/// `None` marks a missing value.
fn parse_cell(raw: &str, row: usize, column: usize) -> Result<Option<f64>> {
    let s = raw.trim();
    if s.is_empty() || s.eq_ignore_ascii_case("nan") {
        return Ok(None);
    }
    s.parse::<f64>()
        .ok()
        .filter(|v| v.is_finite())
        .map(Some)
        .ok_or_else(|| DataError::ParseFloat {
            row,
            column,
            value: raw.to_string(),
        })
}

fn reader(text: &str) -> csv::Reader<&[u8]> {
    csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(text.as_bytes())
}

/// Sample order follows first appearance.
struct Grouper<T> {
    index: HashMap<String, usize>,
    ids: Vec<String>,
    items: Vec<T>,
}

impl<T> Grouper<T> {
    fn new() -> Self {
        Self {
            index: HashMap::new(),
            ids: Vec::new(),
            items: Vec::new(),
        }
    }

    fn entry(&mut self, id: &str, make: impl FnOnce() -> T) -> &mut T {
        let i = *self.index.entry(id.to_string()).or_insert_with(|| {
            self.ids.push(id.to_string());
            self.items.push(make());
            self.ids.len() - 1
        });
        &mut self.items[i]
    }
}

struct WideSample {
    label: usize,
    first_row: usize,
    channels: Vec<Option<Vec<Option<f64>>>>,
}

fn parse_wide(text: &str, m: &Manifest) -> Result<(Vec<String>, Vec<TimeSeriesSample>)> {
    let mut rdr = reader(text);
    let headers = rdr.headers().map_err(csv_err(1))?.clone();
    let sid = column_index(&headers, "sample_id")?;
    let cid = column_index(&headers, "channel_id")?;
    let lab = column_index(&headers, &m.label_column)?;
    let value_cols: Vec<usize> = (0..headers.len()).filter(|&i| i != sid && i != cid && i != lab).collect();

    let mut groups: Grouper<WideSample> = Grouper::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(csv_err(row))?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let id = get(sid).trim().to_string();
        let channel: usize = get(cid).trim().parse().map_err(|_| DataError::Csv {
            row,
            message: format!("bad channel_id {:?}", get(cid)),
        })?;
        if channel >= m.d {
            return Err(DataError::Ragged {
                sample: id,
                message: format!("channel_id {channel} outside 0..{}", m.d),
            });
        }
        let label = parse_label(get(lab), row, m.classes)?;
        let mut cells: Vec<&str> = value_cols.iter().map(|&i| get(i)).collect();
        while cells.last().is_some_and(|c| c.trim().is_empty()) {
            cells.pop();
        }
        let values = cells
            .iter()
            .zip(&value_cols)
            .map(|(c, &col)| parse_cell(c, row, col + 1))
            .collect::<Result<Vec<_>>>()?;

        let d = m.d;
        let entry = groups.entry(&id, || WideSample {
            label,
            first_row: row,
            channels: vec![None; d],
        });
        if entry.label != label {
            return Err(DataError::Ragged {
                sample: id,
                message: format!("rows {} and {row} disagree on the label", entry.first_row),
            });
        }
        if entry.channels[channel].replace(values).is_some() {
            return Err(DataError::Ragged {
                sample: id,
                message: format!("channel {channel} appears twice"),
            });
        }
    }

    let mut samples = Vec::with_capacity(groups.items.len());
    for (id, ws) in groups.ids.iter().zip(groups.items) {
        let mut chans = Vec::with_capacity(m.d);
        for (c, ch) in ws.channels.into_iter().enumerate() {
            chans.push(ch.ok_or_else(|| DataError::Ragged {
                sample: id.clone(),
                message: format!("channel {c} missing"),
            })?);
        }
        let len = chans[0].len();
        if len == 0 || chans.iter().any(|c| c.len() != len) {
            return Err(DataError::Ragged {
                sample: id.clone(),
                message: format!(
                    "channel lengths differ or are empty: {:?}",
                    chans.iter().map(Vec::len).collect::<Vec<_>>()
                ),
            });
        }
        let times = uniform_times(len);
        let mut values = Vec::with_capacity(len * m.d);
        let mut mask = Vec::with_capacity(len * m.d);
        for t in 0..len {
            for ch in &chans {
                values.push(ch[t].unwrap_or(0.0));
                mask.push(ch[t].is_some());
            }
        }
        samples.push(TimeSeriesSample::new(times, values, mask, m.d, ws.label)?);
    }
    Ok((groups.ids, samples))
}

pub(crate) fn uniform_times(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![0.0];
    }
    (0..len).map(|k| k as f64 / (len - 1) as f64).collect()
}

struct LongSample {
    label: usize,
    first_row: usize,
    obs: Vec<(f64, usize, Option<f64>, usize)>,
}

fn parse_long(text: &str, m: &Manifest) -> Result<(Vec<String>, Vec<TimeSeriesSample>)> {
    let mut rdr = reader(text);
    let headers = rdr.headers().map_err(csv_err(1))?.clone();
    let sid = column_index(&headers, "sample_id")?;
    let tcol = column_index(&headers, m.time_column.as_deref().unwrap_or("time"))?;
    let cid = column_index(&headers, "channel_id")?;
    let vcol = column_index(&headers, "value")?;
    let lab = column_index(&headers, &m.label_column)?;

    let mut groups: Grouper<LongSample> = Grouper::new();
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(csv_err(row))?;
        let get = |i: usize| rec.get(i).unwrap_or("");
        let id = get(sid).trim().to_string();
        let time = parse_cell(get(tcol), row, tcol + 1)?.ok_or_else(|| DataError::Csv {
            row,
            message: "missing time".into(),
        })?;
        let channel: usize = get(cid).trim().parse().map_err(|_| DataError::Csv {
            row,
            message: format!("bad channel_id {:?}", get(cid)),
        })?;
        if channel >= m.d {
            return Err(DataError::Ragged {
                sample: id,
                message: format!("channel_id {channel} outside 0..{}", m.d),
            });
        }
        let value = parse_cell(get(vcol), row, vcol + 1)?;
        let label = parse_label(get(lab), row, m.classes)?;
        let entry = groups.entry(&id, || LongSample {
            label,
            first_row: row,
            obs: Vec::new(),
        });
        if entry.label != label {
            return Err(DataError::Ragged {
                sample: id,
                message: format!("rows {} and {row} disagree on the label", entry.first_row),
            });
        }
        entry.obs.push((time, channel, value, row));
    }

    let mut samples = Vec::with_capacity(groups.items.len());
    for (id, ls) in groups.ids.iter().zip(groups.items) {
        let mut raw_times: Vec<f64> = ls.obs.iter().map(|o| o.0).collect();
        raw_times.sort_by(f64::total_cmp);
        raw_times.dedup();
        let len = raw_times.len();
        let mut values = vec![0.0; len * m.d];
        let mut mask = vec![false; len * m.d];
        let mut seen = vec![false; len * m.d];
        for &(time, c, v, row) in &ls.obs {
            let t = raw_times.partition_point(|&x| x < time);
            let k = t * m.d + c;
            if seen[k] {
                return Err(DataError::Csv {
                    row,
                    message: format!("duplicate observation for sample {id}, time {time}, channel {c}"),
                });
            }
            seen[k] = true;
            if let Some(v) = v {
                values[k] = v;
                mask[k] = true;
            }
        }
        let (t0, t1) = (raw_times[0], raw_times[len - 1]);
        let times = if len == 1 {
            vec![0.0]
        } else {
            raw_times.iter().map(|t| (t - t0) / (t1 - t0)).collect()
        };
        samples.push(TimeSeriesSample::new(times, values, mask, m.d, ls.label)?);
    }
    Ok((groups.ids, samples))
}

fn fmt_value(v: f64, observed: bool) -> String {
    if observed {
        format!("{v}")
    } else {
        String::new()
    }
}

/// Write `dataset` as CSV plus a sibling `manifest.json`. Masked entries are
/// written as empty cells. Long-layout times are the normalized times.
pub fn write_dataset(dataset: &Dataset, dir: impl AsRef<Path>, layout: Layout) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let csv_name = "data.csv";
    let csv_path = dir.join(csv_name);
    let mut out = String::new();
    match layout {
        Layout::Wide => {
            let max_len = dataset.samples.iter().map(TimeSeriesSample::len).max().unwrap_or(0);
            out.push_str("sample_id,channel_id,label");
            for k in 1..=max_len {
                out.push_str(&format!(",v_{k}"));
            }
            out.push('\n');
            for (id, s) in dataset.ids.iter().zip(&dataset.samples) {
                for c in 0..s.channels() {
                    out.push_str(&format!("{id},{c},{}", s.label()));
                    for t in 0..s.len() {
                        out.push(',');
                        out.push_str(&fmt_value(s.value(t, c), s.is_observed(t, c)));
                    }
                    out.push('\n');
                }
            }
        }
        Layout::Long => {
            out.push_str("sample_id,time,channel_id,value,label\n");
            for (id, s) in dataset.ids.iter().zip(&dataset.samples) {
                for t in 0..s.len() {
                    for c in 0..s.channels() {
                        out.push_str(&format!(
                            "{id},{},{c},{},{}\n",
                            s.times()[t],
                            fmt_value(s.value(t, c), s.is_observed(t, c)),
                            s.label()
                        ));
                    }
                }
            }
        }
    }
    fs::write(&csv_path, out).map_err(io_err(&csv_path))?;
    let manifest = Manifest {
        name: Some(dataset.name.clone()),
        csv: csv_name.into(),
        layout,
        d: dataset.channels,
        classes: dataset.classes,
        label_column: default_label_column(),
        time_column: None,
    };
    let mpath = dir.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&mpath, json + "\n").map_err(io_err(&mpath))?;
    Ok(mpath)
}

/// Mask file mirroring the value layout with 0/1 entries.
pub fn write_mask_file(dataset: &Dataset, path: impl AsRef<Path>, layout: Layout) -> Result<()> {
    let path = path.as_ref();
    let bit = |b: bool| if b { '1' } else { '0' };
    let mut out = String::new();
    match layout {
        Layout::Wide => {
            let max_len = dataset.samples.iter().map(TimeSeriesSample::len).max().unwrap_or(0);
            out.push_str("sample_id,channel_id,label");
            for k in 1..=max_len {
                out.push_str(&format!(",m_{k}"));
            }
            out.push('\n');
            for (id, s) in dataset.ids.iter().zip(&dataset.samples) {
                for c in 0..s.channels() {
                    out.push_str(&format!("{id},{c},{}", s.label()));
                    for t in 0..s.len() {
                        out.push(',');
                        out.push(bit(s.is_observed(t, c)));
                    }
                    out.push('\n');
                }
            }
        }
        Layout::Long => {
            out.push_str("sample_id,time,channel_id,mask,label\n");
            for (id, s) in dataset.ids.iter().zip(&dataset.samples) {
                for t in 0..s.len() {
                    for c in 0..s.channels() {
                        out.push_str(&format!("{id},{},{c},{},{}\n", s.times()[t], bit(s.is_observed(t, c)), s.label()));
                    }
                }
            }
        }
    }
    fs::write(path, out).map_err(io_err(path))
}

/// Apply a mask file written by [`write_mask_file`] to `dataset`.
pub fn read_mask_file(dataset: &Dataset, path: impl AsRef<Path>, layout: Layout) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let mut rdr = reader(&text);
    let mut masks: Vec<Vec<bool>> = dataset.samples.iter().map(|s| vec![false; s.values().len()]).collect();
    let index: HashMap<&str, usize> = dataset.ids.iter().enumerate().map(|(i, id)| (id.as_str(), i)).collect();
    let lookup = |id: &str, row: usize| {
        index.get(id.trim()).copied().ok_or_else(|| DataError::Csv {
            row,
            message: format!("unknown sample id {id:?} in mask file"),
        })
    };
    let parse_bit = |s: &str, row: usize| match s.trim() {
        "1" => Ok(true),
        "0" => Ok(false),
        other => Err(DataError::Csv {
            row,
            message: format!("mask entry {other:?} is not 0/1"),
        }),
    };
    for (k, rec) in rdr.records().enumerate() {
        let row = k + 2;
        let rec = rec.map_err(csv_err(row))?;
        let i = lookup(rec.get(0).unwrap_or(""), row)?;
        let s = &dataset.samples[i];
        match layout {
            Layout::Wide => {
                let c: usize = rec.get(1).unwrap_or("").trim().parse().map_err(|_| DataError::Csv {
                    row,
                    message: "bad channel_id".into(),
                })?;
                for t in 0..s.len() {
                    if c < s.channels() {
                        masks[i][t * s.channels() + c] = parse_bit(rec.get(3 + t).unwrap_or(""), row)?;
                    }
                }
            }
            Layout::Long => {
                let time: f64 = rec.get(1).unwrap_or("").trim().parse().map_err(|_| DataError::Csv {
                    row,
                    message: "bad time".into(),
                })?;
                let c: usize = rec.get(2).unwrap_or("").trim().parse().map_err(|_| DataError::Csv {
                    row,
                    message: "bad channel_id".into(),
                })?;
                let t = s.times().partition_point(|&x| x < time);
                if t < s.len() && c < s.channels() {
                    masks[i][t * s.channels() + c] = parse_bit(rec.get(3).unwrap_or(""), row)?;
                }
            }
        }
    }
    let samples = dataset
        .samples
        .iter()
        .zip(masks)
        .map(|(s, m)| s.with_mask(m))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        samples,
        ..dataset.clone()
    })
}
