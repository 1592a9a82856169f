//! Dataset loading, validation, normalization, windowing, and synthesis.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

/// A multivariate metric series: N observations of M metrics at a fixed
/// interval, with optional point labels and per-segment culprit sets.
#[derive(Debug, Clone)]
pub struct MetricMatrix {
    /// N x M value matrix, no missing entries.
    pub values: Array2<f64>,
    pub metric_names: Vec<String>,
    /// Optional 0/1 point labels, length N.
    pub labels: Option<Vec<u8>>,
    /// Optional culprit-metric sets per anomaly segment.
    pub culprits: Vec<CulpritSegment>,
}

/// Ground-truth culprit metrics for one anomaly segment `[start, end]`
/// (inclusive, 0-based).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CulpritSegment {
    pub start: usize,
    pub end: usize,
    pub metrics: BTreeSet<usize>,
}

impl MetricMatrix {
    pub fn n(&self) -> usize {
        self.values.nrows()
    }

    pub fn m(&self) -> usize {
        self.values.ncols()
    }

    /// Checks the structural invariants; called by the loaders.
    pub fn validate(&self) -> Result<()> {
        let (n, m) = self.values.dim();
        if n == 0 || m == 0 {
            return Err(Error::data("empty metric matrix"));
        }
        if self.metric_names.len() != m {
            return Err(Error::data(format!(
                "{} metric names for {} metrics",
                self.metric_names.len(),
                m
            )));
        }
        if !self.values.iter().all(|v| v.is_finite()) {
            return Err(Error::data("non-finite value after fill"));
        }
        if let Some(l) = &self.labels {
            if l.len() != n {
                return Err(Error::data(format!("label length {} != N={}", l.len(), n)));
            }
        }
        for c in &self.culprits {
            if c.start > c.end || c.end >= n {
                return Err(Error::data(format!(
                    "culprit segment {}-{} outside 0..{}",
                    c.start, c.end, n
                )));
            }
            if c.metrics.iter().any(|&k| k >= m) {
                return Err(Error::data(format!(
                    "culprit metric index out of range in segment {}-{}",
                    c.start, c.end
                )));
            }
        }
        Ok(())
    }

    /// Splits at row `t`: `[0, t)` and `[t, N)`. Labels are carried over;
    /// culprit segments are clipped to their side and re-based.
    pub fn split_at(&self, t: usize) -> (MetricMatrix, MetricMatrix) {
        assert!(t > 0 && t < self.n(), "split point inside the series");
        let head = MetricMatrix {
            values: self.values.slice(ndarray::s![..t, ..]).to_owned(),
            metric_names: self.metric_names.clone(),
            labels: self.labels.as_ref().map(|l| l[..t].to_vec()),
            culprits: self
                .culprits
                .iter()
                .filter(|c| c.start < t)
                .map(|c| CulpritSegment {
                    start: c.start,
                    end: c.end.min(t - 1),
                    metrics: c.metrics.clone(),
                })
                .collect(),
        };
        let tail = MetricMatrix {
            values: self.values.slice(ndarray::s![t.., ..]).to_owned(),
            metric_names: self.metric_names.clone(),
            labels: self.labels.as_ref().map(|l| l[t..].to_vec()),
            culprits: self
                .culprits
                .iter()
                .filter(|c| c.end >= t)
                .map(|c| CulpritSegment {
                    start: c.start.max(t) - t,
                    end: c.end - t,
                    metrics: c.metrics.clone(),
                })
                .collect(),
        };
        (head, tail)
    }
}

/// Stacked sliding windows with per-window labels.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    /// S x M x w, metric-major windows.
    pub windows: Array3<f64>,
    /// 0/1 label of the window-end timestamp.
    pub y: Vec<u8>,
    /// Last timestamp covered by each window; strictly increasing.
    pub end_index: Vec<usize>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.windows.len_of(Axis(0))
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn window(&self, s: usize) -> Array2<f64> {
        self.windows.index_axis(Axis(0), s).to_owned()
    }

    /// Subset by window indices (keeps order given).
    pub fn select(&self, idx: &[usize]) -> WindowBatch {
        let m = self.windows.len_of(Axis(1));
        let w = self.windows.len_of(Axis(2));
        let mut windows = Array3::zeros((idx.len(), m, w));
        for (r, &i) in idx.iter().enumerate() {
            windows
                .index_axis_mut(Axis(0), r)
                .assign(&self.windows.index_axis(Axis(0), i));
        }
        WindowBatch {
            windows,
            y: idx.iter().map(|&i| self.y[i]).collect(),
            end_index: idx.iter().map(|&i| self.end_index[i]).collect(),
        }
    }
}

// ── loading ───────────────────────────────────────────────────────────────

/// Input file format for [`load_metric_matrix`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Format {
    /// Server-machine layout: one comma-separated float row per timestamp,
    /// no header.
    Smd,
    /// Comma-separated with a header row of metric names.
    Csv,
}

impl std::str::FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "smd" => Ok(Format::Smd),
            "csv" => Ok(Format::Csv),
            other => Err(Error::config(format!("unknown format '{other}' (expected smd|csv)"))),
        }
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_field(tok: &str, line_no: usize) -> Result<Option<f64>> {
    let t = tok.trim();
    if t.is_empty() || t.eq_ignore_ascii_case("nan") {
        return Ok(None); // missing; forward-filled later
    }
    t.parse::<f64>()
        .map(Some)
        .map_err(|_| Error::data(format!("line {line_no}: invalid float '{t}'")))
}

/// Loads a value matrix. Missing entries are forward-filled per metric,
/// leading missing entries become 0.
pub fn load_metric_matrix(path: &Path, format: Format) -> Result<MetricMatrix> {
    let text = read_to_string(path)?;
    let mut lines = text.lines().enumerate().peekable();

    let names: Option<Vec<String>> = match format {
        Format::Csv => {
            let (_, header) = lines
                .next()
                .ok_or_else(|| Error::data(format!("{}: empty file", path.display())))?;
            Some(header.split(',').map(|s| s.trim().to_string()).collect())
        }
        Format::Smd => None,
    };

    let mut rows: Vec<Vec<Option<f64>>> = Vec::new();
    let mut width = names.as_ref().map(|n| n.len());
    for (i, line) in lines {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        match width {
            None => width = Some(fields.len()),
            Some(wd) if wd != fields.len() => {
                return Err(Error::data(format!(
                    "line {line_no}: expected {wd} fields, got {}",
                    fields.len()
                )));
            }
            _ => {}
        }
        let mut row = Vec::with_capacity(fields.len());
        for f in fields {
            row.push(parse_field(f, line_no)?);
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::data(format!("{}: no data rows", path.display())));
    }

    let m = width.unwrap();
    let n = rows.len();
    let mut values = Array2::zeros((n, m));
    for k in 0..m {
        let mut last = 0.0;
        for (t, row) in rows.iter().enumerate() {
            if let Some(v) = row[k] {
                last = v;
            }
            values[[t, k]] = last;
        }
    }

    let matrix = MetricMatrix {
        values,
        metric_names: names.unwrap_or_else(|| (0..m).map(|k| format!("metric_{k}")).collect()),
        labels: None,
        culprits: Vec::new(),
    };
    matrix.validate()?;
    Ok(matrix)
}

/// Loads point labels (one 0/1 per line) and attaches them.
pub fn attach_labels(m: &mut MetricMatrix, path: &Path) -> Result<()> {
    let text = read_to_string(path)?;
    let mut labels = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t == "label" {
            continue; // tolerate a header line
        }
        let v: f64 = t
            .parse()
            .map_err(|_| Error::data(format!("label line {}: invalid value '{t}'", i + 1)))?;
        labels.push(if v != 0.0 { 1 } else { 0 });
    }
    if labels.len() != m.n() {
        return Err(Error::data(format!(
            "label length {} != N={}",
            labels.len(),
            m.n()
        )));
    }
    m.labels = Some(labels);
    Ok(())
}

/// Loads an interpretation file with lines `start-end:k1,k2,...` where the
/// metric indices are 1-based in the file and converted to 0-based here.
pub fn attach_culprits(m: &mut MetricMatrix, path: &Path) -> Result<()> {
    let text = read_to_string(path)?;
    let mut culprits = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        let (range, idxs) = t
            .split_once(':')
            .ok_or_else(|| Error::data(format!("interpretation line {line_no}: missing ':'")))?;
        let (a, b) = range
            .split_once('-')
            .ok_or_else(|| Error::data(format!("interpretation line {line_no}: missing '-'")))?;
        let start: usize = a
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("interpretation line {line_no}: bad start '{a}'")))?;
        let end: usize = b
            .trim()
            .parse()
            .map_err(|_| Error::data(format!("interpretation line {line_no}: bad end '{b}'")))?;
        let mut metrics = BTreeSet::new();
        for k in idxs.split(',') {
            let one_based: usize = k.trim().parse().map_err(|_| {
                Error::data(format!("interpretation line {line_no}: bad metric index '{k}'"))
            })?;
            if one_based == 0 {
                return Err(Error::data(format!(
                    "interpretation line {line_no}: metric indices are 1-based"
                )));
            }
            metrics.insert(one_based - 1);
        }
        culprits.push(CulpritSegment { start, end, metrics });
    }
    m.culprits = culprits;
    m.validate()?;
    Ok(())
}

// ── writing ───────────────────────────────────────────────────────────────

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

/// Writes values as csv with a header row of metric names. Floats use the
/// shortest round-trip representation, so reloading is bit-exact.
pub fn write_values_csv(m: &MetricMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str(&m.metric_names.join(","));
    out.push('\n');
    for row in m.values.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            let _ = write!(out, "{v}");
            first = false;
        }
        out.push('\n');
    }
    write_file(path, &out)
}

/// Writes point labels, one per line.
pub fn write_labels_csv(m: &MetricMatrix, path: &Path) -> Result<()> {
    let labels = m
        .labels
        .as_ref()
        .ok_or_else(|| Error::state("matrix has no labels to write"))?;
    let mut out = String::new();
    for l in labels {
        let _ = writeln!(out, "{l}");
    }
    write_file(path, &out)
}

/// Writes culprit segments in the interpretation syntax (1-based indices).
pub fn write_culprits(m: &MetricMatrix, path: &Path) -> Result<()> {
    let mut out = String::new();
    for c in &m.culprits {
        let idx: Vec<String> = c.metrics.iter().map(|k| (k + 1).to_string()).collect();
        let _ = writeln!(out, "{}-{}:{}", c.start, c.end, idx.join(","));
    }
    write_file(path, &out)
}

// ── normalization ─────────────────────────────────────────────────────────

/// Per-metric min/max used for scaling.
pub type MinMaxStats = Vec<(f64, f64)>;

/// Min-max scales each metric using `stats` when given (training-set stats
/// applied to test data) or stats computed from `m` otherwise. Scaled values
/// are clipped to `[-1, 2]` to bound out-of-range test values. A constant
/// metric scales with `max - min := 1`, mapping to 0.
pub fn minmax_normalize(m: &MetricMatrix, stats: Option<&MinMaxStats>) -> Result<(MetricMatrix, MinMaxStats)> {
    let cols = m.m();
    if let Some(s) = stats {
        if s.len() != cols {
            return Err(Error::data(format!("{} stats for {} metrics", s.len(), cols)));
        }
    }
    let stats: MinMaxStats = match stats {
        Some(s) => s.clone(),
        None => (0..cols)
            .map(|k| {
                let col = m.values.column(k);
                let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
                let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                (lo, hi)
            })
            .collect(),
    };
    let mut values = m.values.clone();
    for (k, &(lo, hi)) in stats.iter().enumerate() {
        let denom = if hi > lo { hi - lo } else { 1.0 };
        for v in values.column_mut(k) {
            *v = ((*v - lo) / denom).clamp(-1.0, 2.0);
        }
    }
    let out = MetricMatrix { values, ..m.clone() };
    Ok((out, stats))
}

/// Per-metric mean and standard deviation (population), used by the
/// per-metric z-score localization baseline.
pub fn mean_std_stats(m: &MetricMatrix) -> Vec<(f64, f64)> {
    (0..m.m())
        .map(|k| {
            let col = m.values.column(k);
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let var = col.fold(0.0, |acc, &v| acc + (v - mean) * (v - mean)) / n;
            (mean, var.sqrt())
        })
        .collect()
}

// ── windowing ─────────────────────────────────────────────────────────────

/// Cuts sliding windows of length `w` at the given stride. Window `s` covers
/// timestamps `end-w+1 ..= end` with `end = w-1 + s*stride` and carries the
/// label of its end timestamp.
pub fn make_windows(m: &MetricMatrix, w: usize, stride: usize) -> Result<WindowBatch> {
    let n = m.n();
    if w == 0 || stride == 0 {
        return Err(Error::config("window length and stride must be positive"));
    }
    if w > n {
        return Err(Error::data(format!("window length {w} exceeds series length {n}")));
    }
    let count = (n - w) / stride + 1;
    let cols = m.m();
    let mut windows = Array3::zeros((count, cols, w));
    let mut y = Vec::with_capacity(count);
    let mut end_index = Vec::with_capacity(count);
    for s in 0..count {
        let end = w - 1 + s * stride;
        let slab = m.values.slice(ndarray::s![end + 1 - w..=end, ..]);
        windows.index_axis_mut(Axis(0), s).assign(&slab.t());
        end_index.push(end);
        y.push(m.labels.as_ref().map_or(0, |l| l[end]));
    }
    Ok(WindowBatch { windows, y, end_index })
}

// ── synthesis ─────────────────────────────────────────────────────────────

/// Per-metric base oscillation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct BasePattern {
    pub period: f64,
    pub amplitude: f64,
}

/// `target` follows `source` with the given lag and gain.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Coupling {
    pub source: usize,
    pub target: usize,
    pub lag: usize,
    pub gain: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// Level shift of at least five noise standard deviations.
    Spike,
    /// Replaces the target with an independent series of similar range,
    /// destroying its coupling.
    CorrelationBreak,
}

impl std::str::FromStr for FaultKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spike" => Ok(FaultKind::Spike),
            "correlation_break" => Ok(FaultKind::CorrelationBreak),
            other => Err(Error::config(format!("unknown fault kind '{other}'"))),
        }
    }
}

/// Planted fault over `[start, end]` inclusive.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Fault {
    pub start: usize,
    pub end: usize,
    pub kind: FaultKind,
    pub targets: Vec<usize>,
}

/// Configuration for [`generate_synthetic`].
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SynthConfig {
    pub metrics: usize,
    pub length: usize,
    pub seed: u64,
    pub base: Vec<BasePattern>,
    pub coupling: Vec<Coupling>,
    pub noise_std: f64,
    pub faults: Vec<Fault>,
}

impl SynthConfig {
    /// Topological order of metrics under the coupling graph, or an error
    /// if the graph has a cycle.
    fn topo_order(&self) -> Result<Vec<usize>> {
        let m = self.metrics;
        let mut indeg = vec![0usize; m];
        for c in &self.coupling {
            indeg[c.target] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..m).filter(|&i| indeg[i] == 0).collect();
        let mut order = Vec::with_capacity(m);
        while let Some(&i) = ready.iter().next() {
            ready.remove(&i);
            order.push(i);
            for c in self.coupling.iter().filter(|c| c.source == i) {
                indeg[c.target] -= 1;
                if indeg[c.target] == 0 {
                    ready.insert(c.target);
                }
            }
        }
        if order.len() != m {
            return Err(Error::config("coupling graph has a cycle"));
        }
        Ok(order)
    }

    pub fn validate(&self) -> Result<()> {
        if self.metrics == 0 || self.length == 0 {
            return Err(Error::config("metrics and length must be positive"));
        }
        if self.base.len() != self.metrics {
            return Err(Error::config(format!(
                "{} base patterns for {} metrics",
                self.base.len(),
                self.metrics
            )));
        }
        if self.base.iter().any(|b| b.period <= 0.0 || !b.amplitude.is_finite()) {
            return Err(Error::config("base patterns need positive period and finite amplitude"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be non-negative"));
        }
        let mut seen_target = BTreeSet::new();
        for c in &self.coupling {
            if c.source >= self.metrics || c.target >= self.metrics || c.source == c.target {
                return Err(Error::config(format!(
                    "coupling {}->{} out of range",
                    c.source, c.target
                )));
            }
            if !seen_target.insert(c.target) {
                return Err(Error::config(format!("metric {} follows two sources", c.target)));
            }
        }
        self.topo_order()?;
        let mut segs: Vec<(usize, usize)> = Vec::new();
        for f in &self.faults {
            if f.start > f.end || f.end >= self.length {
                return Err(Error::config(format!(
                    "fault {}-{} outside [0, {})",
                    f.start, f.end, self.length
                )));
            }
            if f.targets.is_empty() || f.targets.iter().any(|&k| k >= self.metrics) {
                return Err(Error::config(format!("fault {}-{}: bad target set", f.start, f.end)));
            }
            segs.push((f.start, f.end));
        }
        segs.sort_unstable();
        for pair in segs.windows(2) {
            if pair[1].0 <= pair[0].1 {
                return Err(Error::config(format!(
                    "fault segments {}-{} and {}-{} overlap",
                    pair[0].0, pair[0].1, pair[1].0, pair[1].1
                )));
            }
        }
        Ok(())
    }

    /// A ready-made config: paired driver/follower metrics, modest noise,
    /// and alternating spike / correlation-break faults placed clear of the
    /// midpoint so the series can be split into train and test halves.
    /// Roughly 5% of points fall inside fault segments.
    pub fn demo(metrics: usize, length: usize, seed: u64) -> SynthConfig {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_cafe);
        let base = (0..metrics)
            .map(|i| BasePattern { period: 53.0 + 17.0 * i as f64, amplitude: 1.0 })
            .collect();
        let mut coupling = Vec::new();
        for i in (0..metrics).step_by(2) {
            if i + 1 < metrics {
                coupling.push(Coupling {
                    source: i,
                    target: i + 1,
                    lag: 2 + i / 2,
                    gain: 0.8 + 0.1 * ((i / 2) % 3) as f64,
                });
            }
        }
        let followers: Vec<usize> = coupling.iter().map(|c| c.target).collect();

        // Per half: ~5% anomalous points in segments of 18..=28 points.
        let half = length / 2;
        let margin = 260usize.min(half / 6);
        let mut faults = Vec::new();
        let mut kind_flip = false;
        let mut spike_cycle = 0usize;
        let mut break_cycle = 0usize;
        for h in 0..2 {
            let lo = h * half + margin;
            let hi = (h * half + half).min(length).saturating_sub(margin);
            if hi <= lo + 40 {
                continue;
            }
            let budget = (half as f64 * 0.05) as usize;
            let count = (budget / 23).max(1);
            let stride = ((hi - lo) / count).max(40);
            for i in 0..count {
                let len = rng.gen_range(18..=28);
                let jitter = rng.gen_range(0..stride.saturating_sub(len + 40).max(1));
                let start = lo + i * stride + jitter;
                if start + len + 1 >= hi {
                    continue;
                }
                let end = start + len - 1;
                let (kind, targets) = if kind_flip && !followers.is_empty() {
                    let t = followers[break_cycle % followers.len()];
                    break_cycle += 1;
                    (FaultKind::CorrelationBreak, vec![t])
                } else {
                    let t = spike_cycle % metrics;
                    spike_cycle += 1;
                    (FaultKind::Spike, vec![t])
                };
                kind_flip = !kind_flip;
                faults.push(Fault { start, end, kind, targets });
            }
        }
        faults.sort_by_key(|f| f.start);

        SynthConfig {
            metrics,
            length,
            seed,
            base,
            coupling,
            noise_std: 0.05,
            faults,
        }
    }
}

/// Generates a synthetic metric matrix. Deterministic for a fixed seed.
/// Outside fault segments every coupled pair satisfies
/// `value[target][t] = gain * value[source][t - lag] + noise`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<MetricMatrix> {
    cfg.validate()?;
    let (n, m) = (cfg.length, cfg.metrics);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let phases: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
    let mut noise = Array2::zeros((n, m));
    for v in noise.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v = e * cfg.noise_std;
    }

    let follows: Vec<Option<&Coupling>> = (0..m)
        .map(|k| cfg.coupling.iter().find(|c| c.target == k))
        .collect();

    let mut values = Array2::zeros((n, m));
    for &k in cfg.topo_order()?.iter() {
        match follows[k] {
            Some(c) => {
                for t in 0..n {
                    let src = values[[t.saturating_sub(c.lag), c.source]];
                    values[[t, k]] = c.gain * src + noise[[t, k]];
                }
            }
            None => {
                let b = &cfg.base[k];
                for t in 0..n {
                    values[[t, k]] = b.amplitude
                        * (std::f64::consts::TAU * t as f64 / b.period + phases[k]).sin()
                        + noise[[t, k]];
                }
            }
        }
    }

    // Clean per-metric spread, used to scale fault magnitudes.
    let spread: Vec<f64> = (0..m)
        .map(|k| {
            let col = values.column(k);
            let mean = col.sum() / n as f64;
            (col.fold(0.0, |a, &v| a + (v - mean) * (v - mean)) / n as f64).sqrt()
        })
        .collect();
    let means: Vec<f64> = (0..m).map(|k| values.column(k).sum() / n as f64).collect();

    let mut labels = vec![0u8; n];
    let mut culprits = Vec::new();
    for f in &cfg.faults {
        for t in f.start..=f.end {
            labels[t] = 1;
        }
        match f.kind {
            FaultKind::Spike => {
                for &k in &f.targets {
                    let shift = 5.0 * cfg.noise_std + 0.5 * spread[k] * std::f64::consts::SQRT_2;
                    for t in f.start..=f.end {
                        values[[t, k]] += shift;
                    }
                }
            }
            FaultKind::CorrelationBreak => {
                for &k in &f.targets {
                    // Independent oscillation with matched mean and spread.
                    let period = cfg.base[k].period * 0.37;
                    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
                    let amp = spread[k] * std::f64::consts::SQRT_2;
                    for t in f.start..=f.end {
                        let e: f64 = rng.sample(StandardNormal);
                        values[[t, k]] = means[k]
                            + amp * (std::f64::consts::TAU * t as f64 / period + phase).sin()
                            + e * cfg.noise_std;
                    }
                }
            }
        }
        culprits.push(CulpritSegment {
            start: f.start,
            end: f.end,
            metrics: f.targets.iter().copied().collect(),
        });
    }

    let out = MetricMatrix {
        values,
        metric_names: (0..m).map(|k| format!("metric_{k}")).collect(),
        labels: Some(labels),
        culprits,
    };
    out.validate()?;
    Ok(out)
}
