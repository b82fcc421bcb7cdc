//! Asynchronous polarity events: parsing, voxelization and patch accumulation.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One polarity event. Timestamps are integer microseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t: i64,
    pub x: u32,
    pub y: u32,
    /// +1 or -1.
    pub p: i8,
}

impl Event {
    pub fn new(t: i64, x: u32, y: u32, p: i8) -> Self {
        Self { t, x, y, p }
    }
}

/// How polarity values in an event file are to be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolarityConvention {
    /// Accept -1, 0 and 1; 0 is read as -1.
    #[default]
    Auto,
    /// Only -1 and +1.
    Signed,
    /// Only 0 and 1; 0 is read as -1.
    Binary,
}

/// Time-sorted event stream from a sensor of known size.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EventStream {
    events: Vec<Event>,
    width: u32,
    height: u32,
}

impl EventStream {
    /// Builds a stream, sorting by timestamp (stable) and checking bounds and polarity.
    pub fn new(mut events: Vec<Event>, width: u32, height: u32) -> Result<Self> {
        for (i, e) in events.iter().enumerate() {
            if e.x >= width || e.y >= height {
                return Err(Error::invalid(format!(
                    "event {i} at ({}, {}) outside {width}x{height} sensor",
                    e.x, e.y
                )));
            }
            if e.p != 1 && e.p != -1 {
                return Err(Error::invalid(format!("event {i} has polarity {}", e.p)));
            }
        }
        events.sort_by_key(|e| e.t);
        Ok(Self {
            events,
            width,
            height,
        })
    }

    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            events: Vec::new(),
            width,
            height,
        }
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Events with `t0 <= t < t1`.
    pub fn window(&self, t0: i64, t1: i64) -> &[Event] {
        let lo = self.events.partition_point(|e| e.t < t0);
        let hi = self.events.partition_point(|e| e.t < t1);
        if hi <= lo {
            &[]
        } else {
            &self.events[lo..hi]
        }
    }

    /// Sub-stream over `[t0, t1)`.
    pub fn slice(&self, t0: i64, t1: i64) -> EventStream {
        EventStream {
            events: self.window(t0, t1).to_vec(),
            width: self.width,
            height: self.height,
        }
    }

    pub fn polarity_sum(&self) -> i64 {
        self.events.iter().map(|e| e.p as i64).sum()
    }
}

/// Reads `t_us,x,y,p` lines, accepting both polarity conventions.
pub fn parse_events(path: impl AsRef<Path>, width: u32, height: u32) -> Result<EventStream> {
    parse_events_with(path, width, height, PolarityConvention::Auto)
}

pub fn parse_events_with(
    path: impl AsRef<Path>,
    width: u32,
    height: u32,
    convention: PolarityConvention,
) -> Result<EventStream> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut events = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(parse_err(
                line_no,
                format!("expected 4 fields `t_us,x,y,p`, found {}", fields.len()),
            ));
        }
        let t: i64 = fields[0]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad timestamp `{}`", fields[0])))?;
        let x: u32 = fields[1]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad x `{}`", fields[1])))?;
        let y: u32 = fields[2]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad y `{}`", fields[2])))?;
        let raw_p: i32 = fields[3]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad polarity `{}`", fields[3])))?;
        let p = match (convention, raw_p) {
            (PolarityConvention::Auto | PolarityConvention::Signed, 1) => 1,
            (PolarityConvention::Auto | PolarityConvention::Signed, -1) => -1,
            (PolarityConvention::Auto | PolarityConvention::Binary, 0) => -1,
            (PolarityConvention::Binary, 1) => 1,
            _ => {
                return Err(parse_err(
                    line_no,
                    format!("polarity {raw_p} not allowed under {convention:?} convention"),
                ))
            }
        };
        if x >= width || y >= height {
            return Err(parse_err(
                line_no,
                format!("event at ({x}, {y}) outside {width}x{height} sensor"),
            ));
        }
        events.push(Event { t, x, y, p });
    }
    EventStream::new(events, width, height)
}

/// Inverse of [`parse_events`]: one `t,x,y,p` line per event with p in {-1, 1}.
pub fn serialize_events(stream: &EventStream) -> String {
    let mut out = String::with_capacity(stream.len() * 16);
    for e in stream.events() {
        let _ = writeln!(out, "{},{},{},{}", e.t, e.x, e.y, e.p);
    }
    out
}

pub fn write_events(path: impl AsRef<Path>, stream: &EventStream) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, serialize_events(stream)).map_err(|e| Error::io(path, e))
}

/// B x H x W spatiotemporal histogram of polarities.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    bins: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
    pub t_start: i64,
    pub t_end: i64,
}

impl VoxelGrid {
    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, bin: usize, x: usize, y: usize) -> f64 {
        self.data[(bin * self.height + y) * self.width + x]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// Splats each event in `[t0, t1)` linearly between its two temporally adjacent bins.
pub fn voxelize(stream: &EventStream, t0: i64, t1: i64, bins: usize) -> Result<VoxelGrid> {
    if bins == 0 {
        return Err(Error::invalid("voxel grid needs at least one bin"));
    }
    if t0 >= t1 {
        return Err(Error::invalid(format!("empty interval [{t0}, {t1})")));
    }
    let (w, h) = (stream.width() as usize, stream.height() as usize);
    let mut data = vec![0.0; bins * w * h];
    let span = (t1 - t0) as f64;
    let last = (bins - 1) as f64;
    for e in stream.window(t0, t1) {
        let pos = last * (e.t - t0) as f64 / span;
        let lower = pos.floor();
        let frac = pos - lower;
        let b0 = lower as usize;
        let pixel = e.y as usize * w + e.x as usize;
        let p = e.p as f64;
        data[b0 * w * h + pixel] += p * (1.0 - frac);
        if frac > 0.0 && b0 + 1 < bins {
            data[(b0 + 1) * w * h + pixel] += p * frac;
        }
    }
    Ok(VoxelGrid {
        bins,
        width: w,
        height: h,
        data,
        t_start: t0,
        t_end: t1,
    })
}

/// Square `(2h+1) x (2h+1)` per-pixel polarity sum over `[t, t_prime)`.
///
/// Row-major, local offset `(dx, dy)` stored at `(dy + h) * (2h+1) + (dx + h)`.
pub fn accumulate_patch(
    stream: &EventStream,
    center: (u32, u32),
    half_width: u32,
    t: i64,
    t_prime: i64,
) -> Result<Vec<f64>> {
    if t >= t_prime {
        return Err(Error::invalid(format!("empty interval [{t}, {t_prime})")));
    }
    let (cx, cy) = (center.0 as i64, center.1 as i64);
    let h = half_width as i64;
    if cx - h < 0 || cy - h < 0 || cx + h >= stream.width() as i64 || cy + h >= stream.height() as i64
    {
        return Err(Error::invalid(format!(
            "patch at ({cx}, {cy}) with half-width {h} exceeds {}x{} sensor",
            stream.width(),
            stream.height()
        )));
    }
    let side = (2 * h + 1) as usize;
    let mut out = vec![0.0; side * side];
    for e in stream.window(t, t_prime) {
        let dx = e.x as i64 - cx;
        let dy = e.y as i64 - cy;
        if dx.abs() <= h && dy.abs() <= h {
            out[(dy + h) as usize * side + (dx + h) as usize] += e.p as f64;
        }
    }
    Ok(out)
}
