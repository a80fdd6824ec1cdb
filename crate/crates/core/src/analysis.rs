//! Rank statistics, divergence curves, perturbation sweeps, ablations and
//! the CSV/SVG reports they produce.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::config::Config;
use crate::encoders::{
    evaluate_classifier, group_parallel, utterance_divergence, ClassifierHead, DomainEncoder, LabeledPatch,
};
use crate::enhance::{adapt_downstream, AdaptSettings, EvalItem, Hooks, SeModel};
use crate::error::{Error, Result};
use crate::generator::{FusionStrategy, Generator};
use crate::layers::derive_seed;
use crate::pipeline::{simulate_dataset, EmbeddingUse};
use crate::scenario::{self, Encoders, SyntheticTask};
use crate::spectral::{self, SpectroPatch, Stft};

// ---------------------------------------------------------------------------
// rank statistics

/// Per-item scores of competing systems; higher is better.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreTable {
    pub systems: Vec<String>,
    pub items: Vec<String>,
    /// `scores[i][j]`: item `i`, system `j`.
    pub scores: Vec<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScoreRow {
    item: String,
    system: String,
    score: f64,
}

impl ScoreTable {
    pub fn new(systems: Vec<String>, items: Vec<String>, scores: Vec<Vec<f64>>) -> Result<Self> {
        if systems.len() < 2 {
            return Err(Error::DegenerateTable(format!("{} systems", systems.len())));
        }
        if items.len() < 2 {
            return Err(Error::DegenerateTable(format!("{} items", items.len())));
        }
        if scores.len() != items.len() {
            return Err(Error::DegenerateTable(format!("{} rows for {} items", scores.len(), items.len())));
        }
        for (item, row) in items.iter().zip(&scores) {
            if row.len() != systems.len() {
                return Err(Error::DegenerateTable(format!("item {item} has {} scores", row.len())));
            }
            if let Some(v) = row.iter().find(|v| !v.is_finite()) {
                return Err(Error::DegenerateTable(format!("item {item} has score {v}")));
            }
        }
        Ok(Self { systems, items, scores })
    }

    pub fn k(&self) -> usize {
        self.systems.len()
    }

    pub fn n(&self) -> usize {
        self.items.len()
    }

    /// Negate every score, for metrics where lower is better.
    pub fn flipped(&self) -> Self {
        Self {
            scores: self.scores.iter().map(|r| r.iter().map(|v| -v).collect()).collect(),
            ..self.clone()
        }
    }

    /// Parse long-format CSV with header `item,system,score`. Systems and
    /// items keep first-appearance order; an item missing any system is
    /// rejected.
    pub fn from_csv(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        if headers.iter().collect::<Vec<_>>() != ["item", "system", "score"] {
            return Err(Error::DegenerateTable(format!("expected header item,system,score, got {headers:?}")));
        }
        let mut systems: Vec<String> = Vec::new();
        let mut items: Vec<String> = Vec::new();
        let mut cells: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for row in rdr.deserialize::<ScoreRow>() {
            let row = row.map_err(csv_err)?;
            let j = index_of(&mut systems, row.system);
            let i = index_of(&mut items, row.item);
            if cells.insert((i, j), row.score).is_some() {
                return Err(Error::DegenerateTable(format!(
                    "duplicate score for item {} system {}",
                    items[i], systems[j]
                )));
            }
        }
        let mut scores = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            let row = (0..systems.len())
                .map(|j| {
                    cells
                        .get(&(i, j))
                        .copied()
                        .ok_or_else(|| Error::DegenerateTable(format!("item {item} lacks system {}", systems[j])))
                })
                .collect::<Result<Vec<f64>>>()?;
            scores.push(row);
        }
        Self::new(systems, items, scores)
    }

    pub fn to_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        for (item, row) in self.items.iter().zip(&self.scores) {
            for (system, &score) in self.systems.iter().zip(row) {
                w.serialize(ScoreRow {
                    item: item.clone(),
                    system: system.clone(),
                    score,
                })
                .map_err(csv_err)?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

fn index_of(list: &mut Vec<String>, name: String) -> usize {
    match list.iter().position(|s| *s == name) {
        Some(i) => i,
        None => {
            list.push(name);
            list.len() - 1
        }
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::DegenerateTable(e.to_string())
}

/// Midranks of `row`, rank 1 for the largest value.
pub fn rank_descending(row: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]));
    let mut ranks = vec![0.0; row.len()];
    let mut start = 0;
    while start < idx.len() {
        let mut end = start + 1;
        while end < idx.len() && row[idx[end]] == row[idx[start]] {
            end += 1;
        }
        // positions start..end share ranks start+1..=end
        let mid = (start + 1 + end) as f64 / 2.0;
        for &i in &idx[start..end] {
            ranks[i] = mid;
        }
        start = end;
    }
    ranks
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FriedmanResult {
    pub chi2: f64,
    pub df: usize,
    /// Mean rank per system, in table order.
    pub ranks: Vec<f64>,
    pub n: usize,
    pub k: usize,
}

pub fn friedman_test(table: &ScoreTable) -> Result<FriedmanResult> {
    let (n, k) = (table.n(), table.k());
    if k < 2 || n < 2 {
        return Err(Error::DegenerateTable(format!("{n} items x {k} systems")));
    }
    let mut sums = vec![0.0; k];
    for row in &table.scores {
        for (s, r) in sums.iter_mut().zip(rank_descending(row)) {
            *s += r;
        }
    }
    let ranks: Vec<f64> = sums.iter().map(|s| s / n as f64).collect();
    let (nf, kf) = (n as f64, k as f64);
    let sum_sq: f64 = ranks.iter().map(|r| r * r).sum();
    let chi2 = 12.0 * nf / (kf * (kf + 1.0)) * sum_sq - 3.0 * nf * (kf + 1.0);
    Ok(FriedmanResult {
        chi2,
        df: k - 1,
        ranks,
        n,
        k,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Alpha {
    #[serde(rename = "0.05")]
    P05,
    #[serde(rename = "0.10")]
    P10,
}

impl Alpha {
    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "0.05" | ".05" => Ok(Alpha::P05),
            "0.1" | "0.10" | ".1" => Ok(Alpha::P10),
            _ => Err(Error::InvalidConfig(format!("alpha must be 0.05 or 0.10, got `{s}`"))),
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Alpha::P05 => 0.05,
            Alpha::P10 => 0.10,
        }
    }
}

/// Studentized range statistic divided by √2, k = 2..=10.
const Q_05: [f64; 9] = [1.960, 2.343, 2.569, 2.728, 2.850, 2.949, 3.031, 3.102, 3.164];
const Q_10: [f64; 9] = [1.645, 2.052, 2.291, 2.459, 2.589, 2.693, 2.780, 2.855, 2.920];

pub fn nemenyi_q(k: usize, alpha: Alpha) -> Result<f64> {
    if !(2..=10).contains(&k) {
        return Err(Error::KOutOfTabulatedRange(k));
    }
    Ok(match alpha {
        Alpha::P05 => Q_05[k - 2],
        Alpha::P10 => Q_10[k - 2],
    })
}

/// Critical difference of mean ranks.
pub fn nemenyi_cd(k: usize, n: usize, alpha: Alpha) -> Result<f64> {
    let q = nemenyi_q(k, alpha)?;
    if n < 2 {
        return Err(Error::DegenerateTable(format!("{n} items")));
    }
    Ok(q * ((k * (k + 1)) as f64 / (6.0 * n as f64)).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairwiseComparison {
    pub a: String,
    pub b: String,
    pub rank_difference: f64,
    pub significant: bool,
}

pub fn nemenyi_pairs(systems: &[String], ranks: &[f64], cd: f64) -> Vec<PairwiseComparison> {
    let mut out = Vec::new();
    for i in 0..systems.len() {
        for j in i + 1..systems.len() {
            let d = (ranks[i] - ranks[j]).abs();
            out.push(PairwiseComparison {
                a: systems[i].clone(),
                b: systems[j].clone(),
                rank_difference: d,
                significant: d > cd,
            });
        }
    }
    out
}

// ---------------------------------------------------------------------------
// plots

/// One named series of (x, y) points.
#[derive(Clone, Debug)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

const COLORS: [&str; 6] = ["#c0392b", "#2c7fb8", "#27ae60", "#8e44ad", "#d35400", "#555555"];

/// Line chart; each series gets its own y range, scaled into the shared
/// plot area, so curves with different units can share one figure.
pub fn line_chart_svg(title: &str, x_label: &str, series: &[Series]) -> String {
    let (w, h, m) = (640.0, 360.0, 48.0);
    let xs: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
    let (x0, x1) = bounds(&xs);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    let _ = writeln!(
        svg,
        r#"<line x1="{m}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#,
        h - m,
        w - m,
        h - m
    );
    let _ = writeln!(svg, r#"<line x1="{m}" y1="{m}" x2="{m}" y2="{}" stroke="black"/>"#, h - m);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        w / 2.0,
        h - 12.0,
        escape(x_label)
    );
    let _ = writeln!(svg, r#"<text x="{m}" y="{}">{}</text>"#, h - m + 16.0, fmt_tick(x0));
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
        w - m,
        h - m + 16.0,
        fmt_tick(x1)
    );
    for (i, s) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let ys: Vec<f64> = s.points.iter().map(|p| p.1).filter(|v| v.is_finite()).collect();
        let (y0, y1) = bounds(&ys);
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.1.is_finite())
            .map(|&(x, y)| {
                let px = m + (x - x0) / (x1 - x0) * (w - 2.0 * m);
                let py = h - m - (y - y0) / (y1 - y0) * (h - 2.0 * m);
                format!("{px:.2},{py:.2}")
            })
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" fill="{color}">{} [{} .. {}]</text>"#,
            m + 8.0,
            m + 14.0 * i as f64,
            escape(&s.name),
            fmt_tick(y0),
            fmt_tick(y1)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Horizontal bar chart of one value per label.
pub fn bar_chart_svg(title: &str, bars: &[(String, f64)]) -> String {
    let row = 22.0;
    let (w, m, label_w) = (640.0, 40.0, 200.0);
    let h = 2.0 * m + row * bars.len() as f64;
    let vals: Vec<f64> = bars.iter().map(|b| b.1).filter(|v| v.is_finite()).collect();
    let (_, hi) = bounds(&vals);
    let hi = hi.max(0.0);
    let scale = if hi > 0.0 { (w - label_w - 2.0 * m) / hi } else { 0.0 };
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, w / 2.0, escape(title));
    for (i, (label, v)) in bars.iter().enumerate() {
        let y = m + row * i as f64;
        let len = if v.is_finite() { (v.max(0.0) * scale).max(0.0) } else { 0.0 };
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
            m + label_w - 6.0,
            y + 14.0,
            escape(label)
        );
        let _ = writeln!(
            svg,
            r##"<rect x="{}" y="{}" width="{len:.2}" height="{}" fill="#2c7fb8"/>"##,
            m + label_w,
            y + 3.0,
            row - 6.0
        );
        let _ = writeln!(svg, r#"<text x="{}" y="{}">{}</text>"#, m + label_w + len + 4.0, y + 14.0, fmt_tick(*v));
    }
    svg.push_str("</svg>\n");
    svg
}

fn bounds(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn fmt_tick(v: f64) -> String {
    format!("{v:.4}")
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Plain CSV with a header row.
pub fn write_rows_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

// ---------------------------------------------------------------------------
// divergence curve

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub val_loss: f64,
    pub divergence: f64,
}

/// Epoch number from a directory named `epoch_NNN`.
pub fn checkpoint_epoch(dir: &Path) -> Option<usize> {
    dir.file_name()?.to_str()?.strip_prefix("epoch_")?.parse().ok()
}

/// `epoch_*` subdirectories of `dir`, in epoch order.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut found: Vec<(usize, PathBuf)> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .filter_map(|p| checkpoint_epoch(&p).map(|e| (e, p)))
        .collect();
    found.sort();
    Ok(found.into_iter().map(|(_, p)| p).collect())
}

/// Validation loss and embedding divergence of each channel-encoder
/// checkpoint on a parallel set. The loss covers channels the checkpoint's
/// head knows; the divergence covers all channels.
pub fn divergence_curve(checkpoints: &[PathBuf], validation: &[AudioClip]) -> Result<Vec<CurvePoint>> {
    if checkpoints.len() < 2 {
        return Err(Error::MissingCheckpoints);
    }
    let set = group_parallel(validation);
    if set.is_empty() {
        return Err(Error::NoParallelData);
    }
    let stft = Stft::default();
    let mut patches: BTreeMap<String, BTreeMap<String, Vec<SpectroPatch>>> = BTreeMap::new();
    for (utt, chans) in &set {
        for (ch, clip) in chans {
            let spec = stft.analyze(clip)?;
            patches
                .entry(utt.clone())
                .or_default()
                .insert(ch.clone(), spectral::segment_patches(&spec, stft.floor())?);
        }
    }
    let mut out = Vec::with_capacity(checkpoints.len());
    for (i, dir) in checkpoints.iter().enumerate() {
        let encoder = DomainEncoder::load(dir)?;
        let head = ClassifierHead::load(dir, encoder.dim())?;
        let mut labelled = Vec::new();
        for chans in patches.values() {
            for (ch, ps) in chans {
                if let Some(label) = head.labels.iter().position(|l| l == ch) {
                    labelled.extend(ps.iter().map(|p| LabeledPatch {
                        patch: p.clone(),
                        label,
                    }));
                }
            }
        }
        let val_loss = if labelled.is_empty() {
            f64::NAN
        } else {
            evaluate_classifier(&encoder, &head, &labelled)?.0
        };
        out.push(CurvePoint {
            epoch: checkpoint_epoch(dir).unwrap_or(i + 1),
            val_loss,
            divergence: utterance_divergence(&encoder, &patches)?,
        });
    }
    Ok(out)
}

pub fn curve_svg(points: &[CurvePoint]) -> String {
    line_chart_svg(
        "channel encoder training",
        "epoch",
        &[
            Series {
                name: "validation loss".into(),
                points: points.iter().map(|p| (p.epoch as f64, p.val_loss)).collect(),
            },
            Series {
                name: "embedding divergence".into(),
                points: points.iter().map(|p| (p.epoch as f64, p.divergence)).collect(),
            },
        ],
    )
}

/// Utterance-level embeddings as CSV rows `utterance,channel,e0,e1,...`.
pub fn write_embeddings_csv(path: &Path, encoder: &DomainEncoder, clips: &[AudioClip]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let stft = Stft::default();
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["utterance".to_string(), "channel".to_string()];
    header.extend((0..encoder.dim()).map(|i| format!("e{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for clip in clips {
        let spec = stft.analyze(clip)?;
        let e = encoder.embed_utterance(&spectral::segment_patches(&spec, stft.floor())?)?;
        let mut rec = vec![clip.utterance_id.clone(), clip.channel_id.clone().unwrap_or_default()];
        rec.extend(e.vector.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Pearson correlation; NaN when either side is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len().min(y.len()) as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Trailing moving average; the first `window - 1` entries average what
/// is available.
pub fn moving_average(x: &[f64], window: usize) -> Vec<f64> {
    let w = window.max(1);
    (0..x.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            x[lo..=i].iter().sum::<f64>() / (i + 1 - lo) as f64
        })
        .collect()
}

// ---------------------------------------------------------------------------
// perturbation sweep

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma: f64,
    pub lsd_unadapted: f64,
    pub lsd: f64,
    pub si_sdr: f64,
}

/// Inputs shared by every simulate-then-adapt run.
pub struct SweepInputs<'a> {
    pub generator: &'a Generator,
    pub encoders: &'a Encoders,
    pub sources: &'a [AudioClip],
    pub targets: &'a [AudioClip],
    pub eval: &'a [EvalItem],
}

/// Simulate and adapt once per sigma, all with the same seed.
pub fn perturbation_sweep(inputs: &SweepInputs, cfg: &Config, sigmas: &[f64], seed: u64) -> Result<Vec<SweepRow>> {
    if sigmas.is_empty() {
        return Err(Error::InvalidConfig("no sigma values given".into()));
    }
    if let Some(&s) = sigmas.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::NegativeSigma(s));
    }
    let model = SeModel::new(cfg.adapt.base_channels, derive_seed(seed, "se_model"));
    let settings = AdaptSettings {
        epochs: cfg.adapt.epochs,
        lr: cfg.adapt.lr,
        batch_size: 4,
        log_floor: cfg.log_floor,
        seed: derive_seed(seed, "adapt"),
    };
    let use_embeddings = EmbeddingUse {
        noise: cfg.use_noise_embedding,
        channel: cfg.use_channel_embedding,
    };
    let mut rows = Vec::with_capacity(sigmas.len());
    for &sigma in sigmas {
        let mut sim = cfg.sim.clone();
        sim.sigma = sigma;
        let pairs = simulate_dataset(
            inputs.generator,
            &inputs.encoders.noise,
            &inputs.encoders.channel,
            inputs.sources,
            inputs.targets,
            &sim,
            use_embeddings,
            cfg.log_floor,
            derive_seed(seed, "simulate"),
        )?;
        let (_, report) = adapt_downstream(&model, &pairs, inputs.eval, &settings, &Hooks::default())?;
        rows.push(SweepRow {
            sigma,
            lsd_unadapted: report.pre.lsd,
            lsd: report.post.lsd,
            si_sdr: report.post.si_sdr,
        });
    }
    Ok(rows)
}

pub fn sweep_svg(rows: &[SweepRow]) -> String {
    line_chart_svg(
        "perturbation sweep",
        "sigma",
        &[Series {
            name: "log-spectral distance".into(),
            points: rows.iter().map(|r| (r.sigma, r.lsd)).collect(),
        }],
    )
}

// ---------------------------------------------------------------------------
// ablations

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Full,
    NoChannelConsistency,
    NoChannelEmbedding,
    NoNoiseReconstruction,
    NoNoiseEmbedding,
    NoPerturbation,
    Fusion(FusionStrategy),
}

impl Variant {
    /// The six standard ablations; the fusion entry expands to every
    /// strategy other than the configured one.
    pub const STANDARD: [&'static str; 6] = [
        "lambda_cc=0",
        "no_channel_embedding",
        "lambda_nr=0",
        "no_noise_embedding",
        "sigma=0",
        "fusion",
    ];

    pub fn name(&self) -> String {
        match self {
            Variant::Full => "full".into(),
            Variant::NoChannelConsistency => "lambda_cc=0".into(),
            Variant::NoChannelEmbedding => "no_channel_embedding".into(),
            Variant::NoNoiseReconstruction => "lambda_nr=0".into(),
            Variant::NoNoiseEmbedding => "no_noise_embedding".into(),
            Variant::NoPerturbation => "sigma=0".into(),
            Variant::Fusion(f) => format!("fusion={}", f.name()),
        }
    }

    /// Parse one name; `fusion` alone yields every strategy but `current`.
    pub fn parse(name: &str, current: FusionStrategy) -> Result<Vec<Variant>> {
        let v = match name.trim() {
            "full" => Variant::Full,
            "lambda_cc=0" | "no_cc" => Variant::NoChannelConsistency,
            "no_channel_embedding" => Variant::NoChannelEmbedding,
            "lambda_nr=0" | "no_nr" => Variant::NoNoiseReconstruction,
            "no_noise_embedding" => Variant::NoNoiseEmbedding,
            "sigma=0" | "no_perturbation" => Variant::NoPerturbation,
            "fusion" => {
                return Ok(FusionStrategy::ALL
                    .into_iter()
                    .filter(|f| *f != current)
                    .map(Variant::Fusion)
                    .collect())
            }
            other => match other.strip_prefix("fusion=") {
                Some(f) => Variant::Fusion(FusionStrategy::parse(f).map_err(|_| Error::UnknownVariant(other.into()))?),
                None => return Err(Error::UnknownVariant(other.into())),
            },
        };
        Ok(vec![v])
    }

    pub fn parse_list(names: &[&str], current: FusionStrategy) -> Result<Vec<Variant>> {
        let mut out = Vec::new();
        for n in names {
            for v in Self::parse(n, current)? {
                if !out.contains(&v) {
                    out.push(v);
                }
            }
        }
        Ok(out)
    }

    pub fn apply(&self, base: &Config) -> Config {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::NoChannelConsistency => c.loss.lambda_cc = 0.0,
            Variant::NoChannelEmbedding => c.use_channel_embedding = false,
            Variant::NoNoiseReconstruction => c.loss.lambda_nr = 0.0,
            Variant::NoNoiseEmbedding => c.use_noise_embedding = false,
            Variant::NoPerturbation => c.sim.sigma = 0.0,
            Variant::Fusion(f) => c.generator.fusion_strategy = *f,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub lsd_unadapted: f64,
    pub lsd: f64,
    pub si_sdr: f64,
    pub relative_gain: f64,
    /// Mean generator objective over the last training epoch.
    pub final_total_g: f64,
    /// Largest channel-consistency contribution to any logged total.
    pub max_cc_contribution: f64,
}

/// Train, simulate and adapt once per variant on the synthetic task with a
/// shared seed and shared encoders. `Full` is always run first as the
/// reference row.
pub fn ablation_driver(
    variants: &[Variant],
    task: &SyntheticTask,
    encoders: &Encoders,
    base: &Config,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    let mut list = vec![Variant::Full];
    list.extend(variants.iter().copied().filter(|v| *v != Variant::Full));
    let mut rows = Vec::with_capacity(list.len());
    for v in list {
        let cfg = v.apply(base);
        cfg.validate()?;
        let result = scenario::run(task, encoders, &cfg, seed, None)?;
        let reports = &result.training.reports;
        let per_epoch = reports.len() / cfg.train.epochs.max(1);
        let last = &reports[reports.len() - per_epoch.max(1)..];
        let pre = result.adapt.pre.lsd;
        let post = result.adapt.post.lsd;
        rows.push(AblationRow {
            variant: v.name(),
            lsd_unadapted: pre,
            lsd: post,
            si_sdr: result.adapt.post.si_sdr,
            relative_gain: (pre - post) / pre,
            final_total_g: last.iter().map(|r| r.total_g).sum::<f64>() / last.len() as f64,
            max_cc_contribution: reports
                .iter()
                .map(|r| cfg.loss.lambda_cc * r.cc)
                .fold(0.0, f64::max),
        });
    }
    Ok(rows)
}

/// Fixed-width text table for terminals and logs.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!(
        "{:<28} {:>10} {:>10} {:>9} {:>9}\n",
        "variant", "lsd_pre", "lsd_post", "gain", "si_sdr"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<28} {:>10.4} {:>10.4} {:>8.2}% {:>9.3}",
            r.variant,
            r.lsd_unadapted,
            r.lsd,
            100.0 * r.relative_gain,
            r.si_sdr
        );
    }
    s
}

pub fn ablation_svg(rows: &[AblationRow]) -> String {
    bar_chart_svg(
        "relative log-spectral distance reduction",
        &rows.iter().map(|r| (r.variant.clone(), r.relative_gain)).collect::<Vec<_>>(),
    )
}

/// Channels present in every utterance of a parallel set.
pub fn common_channels(clips: &[AudioClip]) -> BTreeSet<String> {
    let set = group_parallel(clips);
    let mut iter = set.values();
    let Some(first) = iter.next() else {
        return BTreeSet::new();
    };
    let mut common: BTreeSet<String> = first.keys().cloned().collect();
    for m in iter {
        common.retain(|c| m.contains_key(c));
    }
    common
}
