//! Distance-correlation analysis of token, value and embedding spaces.

use crate::error::{ArithError, Result};
use crate::model::{Family, Model};
use crate::tasks::{hamming, make_sample, Sample, TaskSpec, Token};
use crate::tensor::Scalar;
use serde::Serialize;
use std::fmt;
use std::io::Write;

/// Diagonal samples `(A, A)` and their unordered index pairs `X < Y`.
#[derive(Clone, Debug)]
pub struct DiagonalPairSet {
    pub task: TaskSpec,
    pub samples: Vec<Sample>,
    /// Lexicographic `(x, y)` with `x < y`, indexing `samples`.
    pub pairs: Vec<(usize, usize)>,
}

impl DiagonalPairSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Same set with samples reordered by `perm`; pairs are rebuilt so the
    /// canonical ordering still follows operand values.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.samples.len() {
            return Err(ArithError::Contract("permutation length differs from sample count".into()));
        }
        let samples: Vec<Sample> = perm.iter().map(|&i| self.samples[i].clone()).collect();
        Ok(Self {
            task: self.task,
            pairs: canonical_pairs(&samples),
            samples,
        })
    }
}

fn canonical_pairs(samples: &[Sample]) -> Vec<(usize, usize)> {
    let mut by_value: Vec<usize> = (0..samples.len()).collect();
    by_value.sort_by_key(|&i| samples[i].a);
    let mut pairs = Vec::with_capacity(samples.len() * samples.len().saturating_sub(1) / 2);
    for (i, &x) in by_value.iter().enumerate() {
        for &y in &by_value[i + 1..] {
            pairs.push((x, y));
        }
    }
    pairs
}

pub fn build_s(task: &TaskSpec) -> Result<DiagonalPairSet> {
    task.validate()?;
    let samples = (0..task.operand_limit()).map(|a| make_sample(task, a, a)).collect::<Result<Vec<_>>>()?;
    Ok(DiagonalPairSet {
        task: *task,
        pairs: canonical_pairs(&samples),
        samples,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(into = "String")]
pub enum Level {
    InT,
    InV,
    OutT,
    OutV,
    /// Encoder layer, 1-based.
    Enc(usize),
    /// Decoder layer, 1-based.
    Dec(usize),
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Level::InT => write!(f, "in_t"),
            Level::InV => write!(f, "in_v"),
            Level::OutT => write!(f, "out_t"),
            Level::OutV => write!(f, "out_v"),
            Level::Enc(i) => write!(f, "enc_{i}"),
            Level::Dec(i) => write!(f, "dec_{i}"),
        }
    }
}

impl From<Level> for String {
    fn from(l: Level) -> String {
        l.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DistanceSet {
    pub level: Level,
    pub values: Vec<f64>,
}

fn token_distances(s: &DiagonalPairSet, f: impl Fn(&Sample) -> &[Token]) -> Result<Vec<f64>> {
    s.pairs
        .iter()
        .map(|&(x, y)| Ok(hamming(f(&s.samples[x]), f(&s.samples[y]))? as f64))
        .collect()
}

fn value_distances(s: &DiagonalPairSet, f: impl Fn(&Sample) -> u64) -> Vec<f64> {
    s.pairs
        .iter()
        .map(|&(x, y)| f(&s.samples[x]).abs_diff(f(&s.samples[y])) as f64)
        .collect()
}

/// Hamming distances between prompts and absolute operand differences.
pub fn input_distances(s: &DiagonalPairSet) -> Result<(DistanceSet, DistanceSet)> {
    Ok((
        DistanceSet {
            level: Level::InT,
            values: token_distances(s, |x| &x.prompt)?,
        },
        DistanceSet {
            level: Level::InV,
            values: value_distances(s, |x| x.a),
        },
    ))
}

/// Hamming distances between target completions and absolute result differences.
pub fn output_distances(s: &DiagonalPairSet) -> Result<(DistanceSet, DistanceSet)> {
    Ok((
        DistanceSet {
            level: Level::OutT,
            values: token_distances(s, |x| &x.completion)?,
        },
        DistanceSet {
            level: Level::OutV,
            values: value_distances(s, |x| x.result),
        },
    ))
}

fn euclidean<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x.f64() - y.f64()).powi(2)).sum::<f64>().sqrt()
}

/// Embedding distances for every layer, from one teacher-forced pass over `s`.
pub fn layer_distances<T: Scalar>(model: &Model<T>, s: &DiagonalPairSet) -> Result<Vec<DistanceSet>> {
    let prompts: Vec<&[Token]> = s.samples.iter().map(|x| x.prompt.as_slice()).collect();
    let targets: Vec<&[Token]> = s.samples.iter().map(|x| x.completion.as_slice()).collect();
    let acts = model
        .teacher_forced_batch(&prompts, &targets, true)?
        .activations
        .unwrap_or_default();
    let mut out = Vec::with_capacity(acts.enc.len() + acts.dec.len());
    for i in 1..=acts.enc.len() {
        let values = s
            .pairs
            .iter()
            .map(|&(x, y)| Ok(euclidean(acts.enc_vector(i, x)?, acts.enc_vector(i, y)?)))
            .collect::<Result<Vec<_>>>()?;
        out.push(DistanceSet { level: Level::Enc(i), values });
    }
    for i in 1..=acts.dec.len() {
        let values = s
            .pairs
            .iter()
            .map(|&(x, y)| Ok(euclidean(acts.dec_vector(i, x)?, acts.dec_vector(i, y)?)))
            .collect::<Result<Vec<_>>>()?;
        out.push(DistanceSet { level: Level::Dec(i), values });
    }
    Ok(out)
}

/// Distances for a single `Enc(i)` or `Dec(i)` level.
pub fn embedding_distances<T: Scalar>(model: &Model<T>, s: &DiagonalPairSet, level: Level) -> Result<DistanceSet> {
    let config = model.config();
    let (index, count) = match level {
        Level::Enc(i) => (i, if config.family == Family::EncoderDecoder { config.encoder_layers } else { 0 }),
        Level::Dec(i) => (i, config.decoder_layers),
        other => {
            return Err(ArithError::Contract(format!("{other} is not an embedding level")));
        }
    };
    if index == 0 || index > count {
        return Err(ArithError::LayerRange { index, count });
    }
    layer_distances(model, s)?
        .into_iter()
        .find(|d| d.level == level)
        .ok_or(ArithError::LayerRange { index, count })
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(ArithError::Shape {
            op: "pearson",
            left: vec![x.len()],
            right: vec![y.len()],
        });
    }
    if x.len() < 2 {
        return Err(ArithError::UndefinedCorrelation("fewer than two points"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(ArithError::UndefinedCorrelation("first argument"));
    }
    if syy == 0.0 {
        return Err(ArithError::UndefinedCorrelation("second argument"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based fractional ranks; ties share their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Pearson correlation of average ranks.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(ArithError::Shape {
            op: "spearman",
            left: vec![x.len()],
            right: vec![y.len()],
        });
    }
    pearson(&average_ranks(x), &average_ranks(y))
}

/// Correlation of each layer level against one reference set.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerSeries {
    pub reference: Level,
    pub layers: Vec<Level>,
    pub pearson: Vec<f64>,
}

impl LayerSeries {
    pub fn spread(&self) -> f64 {
        let max = self.pearson.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min = self.pearson.iter().cloned().fold(f64::INFINITY, f64::min);
        max - min
    }

    /// 1-based layer of the largest coefficient (first on ties).
    pub fn argmax_layer(&self) -> Option<usize> {
        self.extreme(|a, b| a > b)
    }

    /// 1-based layer of the smallest coefficient (first on ties).
    pub fn argmin_layer(&self) -> Option<usize> {
        self.extreme(|a, b| a < b)
    }

    fn extreme(&self, better: impl Fn(f64, f64) -> bool) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, &v) in self.pearson.iter().enumerate() {
            if best.is_none_or(|(_, b)| better(v, b)) {
                best = Some((i, v));
            }
        }
        best.map(|(i, _)| i + 1)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CorrelationReport {
    pub operation: char,
    pub pairs: usize,
    /// Where decoder activations come from.
    pub activation_source: &'static str,
    pub levels: Vec<Level>,
    pub pearson: Vec<Vec<f64>>,
    pub spearman: Vec<Vec<f64>>,
    pub encoder_token: Option<LayerSeries>,
    pub encoder_value: Option<LayerSeries>,
    pub decoder_token: LayerSeries,
    pub decoder_value: LayerSeries,
}

fn series(sets: &[DistanceSet], reference: &DistanceSet, pick: impl Fn(Level) -> bool) -> Result<LayerSeries> {
    let chosen: Vec<&DistanceSet> = sets.iter().filter(|d| pick(d.level)).collect();
    Ok(LayerSeries {
        reference: reference.level,
        layers: chosen.iter().map(|d| d.level).collect(),
        pearson: chosen
            .iter()
            .map(|d| pearson(&d.values, &reference.values))
            .collect::<Result<_>>()?,
    })
}

impl CorrelationReport {
    pub fn index(&self, level: Level) -> Option<usize> {
        self.levels.iter().position(|&l| l == level)
    }

    pub fn pearson_between(&self, a: Level, b: Level) -> Option<f64> {
        Some(self.pearson[self.index(a)?][self.index(b)?])
    }

    /// Larger spread of the two encoder series (0 without an encoder).
    pub fn encoder_spread(&self) -> f64 {
        [&self.encoder_token, &self.encoder_value]
            .into_iter()
            .flatten()
            .map(LayerSeries::spread)
            .fold(0.0, f64::max)
    }

    pub fn decoder_spread(&self) -> f64 {
        self.decoder_token.spread().max(self.decoder_value.spread())
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<()> {
        serde_json::to_writer_pretty(w, self)?;
        Ok(())
    }

    /// One row per unordered level pair, diagonal included.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "set_a,set_b,pearson,spearman")?;
        for i in 0..self.levels.len() {
            for j in i..self.levels.len() {
                writeln!(
                    w,
                    "{},{},{},{}",
                    self.levels[i], self.levels[j], self.pearson[i][j], self.spearman[i][j]
                )?;
            }
        }
        Ok(())
    }

    /// Line chart of the layer series.
    pub fn write_svg<W: Write>(&self, mut w: W) -> Result<()> {
        let mut lines: Vec<(&LayerSeries, &str, &str)> = vec![
            (&self.decoder_token, "#d62728", "dec vs out_t"),
            (&self.decoder_value, "#1f77b4", "dec vs out_v"),
        ];
        if let Some(s) = &self.encoder_token {
            lines.push((s, "#ff7f0e", "enc vs in_t"));
        }
        if let Some(s) = &self.encoder_value {
            lines.push((s, "#2ca02c", "enc vs in_v"));
        }
        let (width, height, pad) = (480.0, 320.0, 40.0);
        let layers = lines.iter().map(|l| l.0.pearson.len()).max().unwrap_or(1).max(2);
        let px = |i: usize| pad + (width - 2.0 * pad) * i as f64 / (layers - 1) as f64;
        let py = |v: f64| height - pad - (height - 2.0 * pad) * (v + 1.0) / 2.0;
        writeln!(w, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">"#)?;
        writeln!(w, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
        for v in [-1.0, 0.0, 1.0] {
            writeln!(
                w,
                r##"<line x1="{pad}" x2="{}" y1="{y}" y2="{y}" stroke="#ccc"/><text x="4" y="{y}" font-size="10">{v}</text>"##,
                width - pad,
                y = py(v)
            )?;
        }
        for i in 0..layers {
            writeln!(w, r#"<text x="{}" y="{}" font-size="10">{}</text>"#, px(i) - 3.0, height - pad + 14.0, i + 1)?;
        }
        for (k, (s, color, label)) in lines.iter().enumerate() {
            let points: Vec<String> = s.pearson.iter().enumerate().map(|(i, &v)| format!("{:.2},{:.2}", px(i), py(v))).collect();
            writeln!(w, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, points.join(" "))?;
            writeln!(w, r#"<text x="{}" y="{}" font-size="11" fill="{color}">{label}</text>"#, pad + 4.0, 14.0 + 13.0 * k as f64)?;
        }
        writeln!(w, "</svg>")?;
        Ok(())
    }
}

/// Full correlation matrix over input, output and layer distance sets.
pub fn correlation_report<T: Scalar>(model: &Model<T>, task: &TaskSpec) -> Result<CorrelationReport> {
    let s = build_s(task)?;
    report_for(model, &s)
}

pub fn report_for<T: Scalar>(model: &Model<T>, s: &DiagonalPairSet) -> Result<CorrelationReport> {
    let (in_t, in_v) = input_distances(s)?;
    let (out_t, out_v) = output_distances(s)?;
    let mut sets = vec![in_t, in_v, out_t, out_v];
    sets.extend(layer_distances(model, s)?);
    let n = sets.len();
    let mut p = vec![vec![1.0; n]; n];
    let mut r = vec![vec![1.0; n]; n];
    let ranks: Vec<Vec<f64>> = sets.iter().map(|d| average_ranks(&d.values)).collect();
    for i in 0..n {
        for j in i + 1..n {
            p[i][j] = pearson(&sets[i].values, &sets[j].values)?;
            p[j][i] = p[i][j];
            r[i][j] = pearson(&ranks[i], &ranks[j])?;
            r[j][i] = r[i][j];
        }
    }
    let is_enc = |l: Level| matches!(l, Level::Enc(_));
    let is_dec = |l: Level| matches!(l, Level::Dec(_));
    let has_enc = sets.iter().any(|d| is_enc(d.level));
    Ok(CorrelationReport {
        operation: s.task.operation.symbol(),
        pairs: s.len(),
        activation_source: "teacher-forced",
        levels: sets.iter().map(|d| d.level).collect(),
        encoder_token: has_enc.then(|| series(&sets, &sets[0], is_enc)).transpose()?,
        encoder_value: has_enc.then(|| series(&sets, &sets[1], is_enc)).transpose()?,
        decoder_token: series(&sets, &sets[2], is_dec)?,
        decoder_value: series(&sets, &sets[3], is_dec)?,
        pearson: p,
        spearman: r,
    })
}
