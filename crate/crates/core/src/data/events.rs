use std::io::BufRead;

use ndarray::{Array2, Zip};

use crate::error::{Result, TpError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Event {
    pub t_us: u64,
    pub unit: u32,
    /// `+1` or `-1`.
    pub polarity: i8,
}

/// Events of one recording, ordered by timestamp.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub duration_us: u64,
    pub num_units: usize,
}

impl EventStream {
    pub fn new(events: Vec<Event>, duration_us: u64, num_units: usize) -> Result<Self> {
        let s = EventStream {
            events,
            duration_us,
            num_units,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.events.windows(2).any(|w| w[1].t_us < w[0].t_us) {
            return Err(TpError::Input("event timestamps must be non-decreasing".into()));
        }
        if let Some(e) = self.events.iter().find(|e| e.unit as usize >= self.num_units) {
            return Err(TpError::Input(format!("event unit {} >= {}", e.unit, self.num_units)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BinMode {
    #[default]
    Count,
    Binary,
}

impl std::str::FromStr for BinMode {
    type Err = TpError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "count" => Ok(BinMode::Count),
            "binary" => Ok(BinMode::Binary),
            other => Err(TpError::Config(format!("unknown binning mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BinOptions {
    pub window_us: u64,
    pub max_steps: usize,
    pub mode: BinMode,
    /// Give each polarity its own channel: feature `unit` for `+1`, `num_units + unit` for `-1`.
    pub split_polarity: bool,
}

/// Accumulates events into `[max_steps, features]` frames; frame `t` covers
/// `[t*window, (t+1)*window)`. Later events are dropped, missing frames stay zero.
pub fn bin_events(stream: &EventStream, opts: &BinOptions) -> Result<Array2<f32>> {
    if opts.window_us == 0 {
        return Err(TpError::Config("binning window must be positive".into()));
    }
    stream.validate()?;
    let features = if opts.split_polarity { 2 * stream.num_units } else { stream.num_units };
    let mut frames = Array2::<f32>::zeros((opts.max_steps, features));
    for e in &stream.events {
        let t = (e.t_us / opts.window_us) as usize;
        if t >= opts.max_steps {
            break;
        }
        let f = if opts.split_polarity && e.polarity < 0 {
            stream.num_units + e.unit as usize
        } else {
            e.unit as usize
        };
        let cell = &mut frames[[t, f]];
        *cell = match opts.mode {
            BinMode::Count => *cell + 1.0,
            BinMode::Binary => 1.0,
        };
    }
    Ok(frames)
}

/// Clips counts at `clip` and rescales to `[0, 1]`.
pub fn normalize_counts(frames: &mut Array2<f32>, clip: f32) {
    Zip::from(frames).for_each(|x| *x = x.min(clip) / clip);
}

/// Parses `sample,label,t_us,unit,polarity` lines. A header line and `#`
/// comments are skipped. Returns recordings in order of first appearance.
pub fn read_event_csv<R: BufRead>(
    reader: R,
    num_units: usize,
    duration_us: Option<u64>,
) -> Result<Vec<(usize, EventStream)>> {
    let mut order: Vec<u64> = Vec::new();
    let mut records: Vec<(usize, Vec<Event>)> = Vec::new();
    let mut offset = 0u64;
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        let start = offset;
        offset += line.len() as u64 + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || (n == 0 && trimmed.starts_with("sample")) {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 5 {
            return Err(TpError::format(start, format!("line {}: expected 5 fields", n + 1)));
        }
        let bad = |what: &str| TpError::format(start, format!("line {}: bad {what}", n + 1));
        let sample: u64 = fields[0].parse().map_err(|_| bad("sample id"))?;
        let label: usize = fields[1].parse().map_err(|_| bad("label"))?;
        let t_us: u64 = fields[2].parse().map_err(|_| bad("timestamp"))?;
        let unit: u32 = fields[3].parse().map_err(|_| bad("unit"))?;
        let polarity: i8 = fields[4].parse().map_err(|_| bad("polarity"))?;
        if polarity != 1 && polarity != -1 {
            return Err(bad("polarity"));
        }
        let pos = match order.iter().position(|&s| s == sample) {
            Some(p) => p,
            None => {
                order.push(sample);
                records.push((label, Vec::new()));
                order.len() - 1
            }
        };
        if records[pos].0 != label {
            return Err(TpError::format(start, format!("line {}: sample {sample} changes label", n + 1)));
        }
        records[pos].1.push(Event { t_us, unit, polarity });
    }
    records
        .into_iter()
        .map(|(label, mut events)| {
            events.sort_by_key(|e| e.t_us);
            let duration = duration_us.unwrap_or_else(|| events.last().map_or(0, |e| e.t_us + 1));
            Ok((label, EventStream::new(events, duration, num_units)?))
        })
        .collect()
}
