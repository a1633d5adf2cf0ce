//! Integrated-gradients attribution of forecasts to numerical input factors,
//! percentage reports grouped by recency, and the Top-5 MFC / SIC summary.

use std::ops::Range;

use ndarray::{s, Array2, Array3, Array4, ArrayD, Axis, Ix3, Ix5};
use serde::{Deserialize, Serialize};
use vnnet_autograd::Tape;
use vnnet_ingest::SplitName;

use crate::data::PreparedData;
use crate::error::{Error, Result};
use crate::graph_core::CalendarIndex;
use crate::model::{Inputs, Model};

pub const DEFAULT_M_STEPS: usize = 64;
pub const TOP_FACTORS: usize = 5;

/// Which forecast outputs make up the differentiated scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputSelection {
    /// Sum over every step and station.
    All,
    /// One forecast step at one station.
    Single { step: usize, station: usize },
}

/// Axes the L1 norm runs over before the `1/(T_p·N²)` scaling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionNorm {
    /// Gradients of the summed output, L1 over stations.
    Nodes,
    /// One gradient per forecast step, L1 over stations and steps.
    NodesAndSteps,
}

/// A differentiable forecaster of one window.
///
/// `x : T_h × N × D`, `i : T_h × H × W × C_s`.
pub trait Attributable {
    fn horizon(&self) -> usize;
    fn nodes(&self) -> usize;

    /// Forecast `T_p × N`.
    fn forecast(&self, x: &Array3<f64>, i: Option<&Array4<f64>>) -> Result<Array2<f64>>;

    /// Sum of `forecast ⊙ weights` and its gradients with respect to both inputs.
    fn weighted_gradient(
        &self,
        x: &Array3<f64>,
        i: Option<&Array4<f64>>,
        weights: &Array2<f64>,
    ) -> Result<(f64, Array3<f64>, Option<Array4<f64>>)>;
}

/// `f(X, I) = Σ_s Σ_n Σ w_{s,n} ⊙ X + Σ v_s ⊙ I`: each output step and station
/// receives the same linear map scaled by `1 + s + n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearSurrogate {
    pub w: Array3<f64>,
    pub v: Option<Array4<f64>>,
    pub horizon: usize,
    pub nodes: usize,
}

impl LinearSurrogate {
    fn scale(s: usize, n: usize) -> f64 {
        1.0 + s as f64 + n as f64
    }

    fn base(&self, x: &Array3<f64>, i: Option<&Array4<f64>>) -> f64 {
        let mut f = (&self.w * x).sum();
        if let (Some(v), Some(i)) = (&self.v, i) {
            f += (v * i).sum();
        }
        f
    }
}

impl Attributable for LinearSurrogate {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn nodes(&self) -> usize {
        self.nodes
    }

    fn forecast(&self, x: &Array3<f64>, i: Option<&Array4<f64>>) -> Result<Array2<f64>> {
        let b = self.base(x, i);
        Ok(Array2::from_shape_fn((self.horizon, self.nodes), |(s, n)| Self::scale(s, n) * b))
    }

    fn weighted_gradient(
        &self,
        x: &Array3<f64>,
        i: Option<&Array4<f64>>,
        weights: &Array2<f64>,
    ) -> Result<(f64, Array3<f64>, Option<Array4<f64>>)> {
        let c: f64 = weights.indexed_iter().map(|((s, n), w)| w * Self::scale(s, n)).sum();
        let gi = match (&self.v, i) {
            (Some(v), Some(_)) => Some(v * c),
            _ => None,
        };
        Ok((c * self.base(x, i), &self.w * c, gi))
    }
}

/// A trained model applied to a single window with fixed calendar stamps.
pub struct ModelAttribution<'m> {
    pub model: &'m Model,
    pub stamps: Vec<CalendarIndex>,
}

impl ModelAttribution<'_> {
    fn run(
        &self,
        x: &Array3<f64>,
        i: Option<&Array4<f64>>,
        weights: Option<&Array2<f64>>,
    ) -> Result<(Array2<f64>, Option<(f64, Array3<f64>, Option<Array4<f64>>)>)> {
        let c = &self.model.config;
        if self.model.config.has_vision() != i.is_some() {
            return Err(Error::UnsupportedModel("vision input must be given exactly when the model has a vision branch".into()));
        }
        let tape = Tape::new();
        let (_bound, params) = self.model.params_on(&tape, false);
        let numerical = tape.leaf(x.clone().insert_axis(Axis(0)).into_dyn());
        let vision = i.map(|i| {
            // T × H × W × C  →  1 × T × C × H × W
            let v = i.view().permuted_axes([0, 3, 1, 2]).as_standard_layout().into_owned();
            tape.leaf(v.insert_axis(Axis(0)).into_dyn())
        });
        let inputs = Inputs {
            numerical,
            stamps: self.stamps.iter().map(|s| vec![*s]).collect(),
            vision,
            teacher: None,
        };
        let mut feed = vec![false; c.t_p];
        feed[0] = true;
        let out = self.model.forward(&params, &inputs, &feed)?;
        let forecast = out
            .to_tensor()
            .into_shape_with_order((c.t_p, c.nodes))
            .map_err(|e| Error::Invariant(e.to_string()))?;
        let Some(weights) = weights else {
            return Ok((forecast, None));
        };
        let w = tape.constant(weights.clone().into_shape_with_order((1, c.t_p, c.nodes, 1)).expect("sized").into_dyn());
        let scalar = out.mul(w).sum();
        let value = scalar.scalar();
        let grads = tape.backward(scalar).map_err(|e| Error::UnsupportedModel(e.to_string()))?;
        let gx = grads
            .get(numerical)
            .ok_or_else(|| Error::UnsupportedModel("forecast does not depend on the numerical input".into()))?
            .clone()
            .index_axis_move(Axis(0), 0)
            .into_dimensionality::<Ix3>()
            .expect("rank 3");
        let gi = match vision {
            None => None,
            Some(v) => {
                let g = grads.get_or_zeros(v).index_axis_move(Axis(0), 0);
                let g = g.into_dimensionality::<ndarray::Ix4>().expect("rank 4");
                Some(g.permuted_axes([0, 2, 3, 1]).as_standard_layout().into_owned())
            }
        };
        if !gx.iter().all(|v| v.is_finite()) {
            return Err(Error::UnsupportedModel("non-finite input gradient".into()));
        }
        Ok((forecast, Some((value, gx, gi))))
    }
}

impl Attributable for ModelAttribution<'_> {
    fn horizon(&self) -> usize {
        self.model.config.t_p
    }

    fn nodes(&self) -> usize {
        self.model.config.nodes
    }

    fn forecast(&self, x: &Array3<f64>, i: Option<&Array4<f64>>) -> Result<Array2<f64>> {
        Ok(self.run(x, i, None)?.0)
    }

    fn weighted_gradient(
        &self,
        x: &Array3<f64>,
        i: Option<&Array4<f64>>,
        weights: &Array2<f64>,
    ) -> Result<(f64, Array3<f64>, Option<Array4<f64>>)> {
        Ok(self.run(x, i, Some(weights))?.1.expect("weights given"))
    }
}

/// Neutral inputs the attribution path starts from.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineInputs {
    /// `T_h × N × D`: per-factor training mean, tiled.
    pub numerical: Array3<f64>,
    /// `T_h × H × W × C_s`: per-band training minimum, tiled.
    pub vision: Option<Array4<f64>>,
}

impl BaselineInputs {
    /// Baselines in the model's input space (normalized values, scaled frames).
    pub fn from_training(data: &PreparedData) -> Result<Self> {
        let range = data.numerical.split.range(SplitName::Train);
        let (t_h, n, d) = (data.t_h(), data.nodes(), data.channels());
        let values = data.numerical.normalized.slice(s![range.clone(), .., ..]);
        let mut mean = vec![0.0; d];
        for (c, m) in mean.iter_mut().enumerate() {
            let finite: Vec<f64> = values.slice(s![.., .., c]).iter().copied().filter(|v| v.is_finite()).collect();
            if finite.is_empty() {
                return Err(Error::Config(format!("channel {c} has no training values")));
            }
            *m = finite.iter().sum::<f64>() / finite.len() as f64;
        }
        let numerical = Array3::from_shape_fn((t_h, n, d), |(_, _, c)| mean[c]);
        let vision = match &data.vision {
            None => None,
            Some(v) => {
                let f = &v.frames;
                let mut min = vec![f64::INFINITY; f.bands];
                for t in range {
                    if let Some(frame) = f.get(t) {
                        let scaled = v.stats.normalize(frame);
                        for (c, plane) in scaled.axis_iter(Axis(2)).enumerate() {
                            min[c] = plane.iter().copied().fold(min[c], f64::min);
                        }
                    }
                }
                if min.iter().any(|m| !m.is_finite()) {
                    return Err(Error::Config("no training frames for the vision baseline".into()));
                }
                Some(Array4::from_shape_fn((t_h, f.height, f.width, f.bands), |(_, _, _, c)| min[c]))
            }
        };
        Ok(Self { numerical, vision })
    }
}

/// Integrated gradients of one window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IgResult {
    /// `T_h × D`, non-negative, scaled by `1/(T_p·N²)`.
    pub per_step: Array2<f64>,
    /// Signed, unscaled path integral over every numerical input.
    pub numerical_total: f64,
    /// Signed, unscaled path integral over every vision input.
    pub vision_total: f64,
    /// Differentiated scalar at the input and at the baseline.
    pub value_input: f64,
    pub value_baseline: f64,
}

impl IgResult {
    /// `|Σ attributions − (f(x) − f(x_b))| / |f(x) − f(x_b)|`.
    pub fn completeness_residual(&self) -> f64 {
        let delta = self.value_input - self.value_baseline;
        (self.numerical_total + self.vision_total - delta).abs() / delta.abs()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IgOptions {
    pub m_steps: usize,
    pub selection: OutputSelection,
    pub norm: AttributionNorm,
}

impl Default for IgOptions {
    fn default() -> Self {
        Self {
            m_steps: DEFAULT_M_STEPS,
            selection: OutputSelection::All,
            norm: AttributionNorm::Nodes,
        }
    }
}

fn selection_weights(sel: OutputSelection, t_p: usize, n: usize) -> Result<Array2<f64>> {
    match sel {
        OutputSelection::All => Ok(Array2::ones((t_p, n))),
        OutputSelection::Single { step, station } => {
            if step >= t_p || station >= n {
                return Err(Error::Config(format!("output ({step}, {station}) outside {t_p} x {n}")));
            }
            let mut w = Array2::zeros((t_p, n));
            w[[step, station]] = 1.0;
            Ok(w)
        }
    }
}

/// Midpoint Riemann average of the weighted-output gradient along the
/// straight path from the baselines to the inputs.
fn path_average<M: Attributable + ?Sized>(
    model: &M,
    x: &Array3<f64>,
    i: Option<&Array4<f64>>,
    base: &BaselineInputs,
    weights: &Array2<f64>,
    m_steps: usize,
) -> Result<(Array3<f64>, Option<Array4<f64>>)> {
    let dx = x - &base.numerical;
    let di = match (i, &base.vision) {
        (Some(i), Some(b)) => Some(i - b),
        _ => None,
    };
    let mut gx = Array3::<f64>::zeros(x.raw_dim());
    let mut gi = di.as_ref().map(|d| Array4::<f64>::zeros(d.raw_dim()));
    for j in 0..m_steps {
        let alpha = (j as f64 + 0.5) / m_steps as f64;
        let xa = &base.numerical + &(&dx * alpha);
        let ia = match (&base.vision, &di) {
            (Some(b), Some(d)) => Some(b + &(d * alpha)),
            _ => None,
        };
        let (_, g, g_i) = model.weighted_gradient(&xa, ia.as_ref(), weights)?;
        gx += &g;
        if let (Some(acc), Some(g_i)) = (gi.as_mut(), g_i) {
            *acc += &g_i;
        }
    }
    gx /= m_steps as f64;
    if let Some(g) = gi.as_mut() {
        *g /= m_steps as f64;
    }
    Ok((gx, gi))
}

/// `T_h × D` attribution of the numerical input `x` (with frames `i`).
pub fn integrated_gradients<M: Attributable + ?Sized>(
    model: &M,
    x: &Array3<f64>,
    i: Option<&Array4<f64>>,
    baselines: &BaselineInputs,
    options: IgOptions,
) -> Result<IgResult> {
    if options.m_steps == 0 {
        return Err(Error::Config("m_steps must be at least 1".into()));
    }
    if x.dim() != baselines.numerical.dim() {
        return Err(Error::Config(format!("input {:?} and baseline {:?} differ", x.dim(), baselines.numerical.dim())));
    }
    match (i, &baselines.vision) {
        (Some(i), Some(b)) if i.dim() != b.dim() => {
            return Err(Error::Config(format!("frames {:?} and baseline {:?} differ", i.dim(), b.dim())));
        }
        (Some(_), None) | (None, Some(_)) => {
            return Err(Error::Config("frames and vision baseline must both be present or both absent".into()));
        }
        _ => {}
    }
    let (t_p, n) = (model.horizon(), model.nodes());
    let (t_h, nx, d) = x.dim();
    if nx != n {
        return Err(Error::Config(format!("input has {nx} stations, model {n}")));
    }
    let weights = selection_weights(options.selection, t_p, n)?;
    let dx = x - &baselines.numerical;
    let scale = 1.0 / (t_p as f64 * (n * n) as f64);

    let (gx, gi) = path_average(model, x, i, baselines, &weights, options.m_steps)?;
    let signed = &gx * &dx;
    let numerical_total = signed.sum();
    let vision_total = match (gi, i, &baselines.vision) {
        (Some(g), Some(i), Some(b)) => (&g * &(i - b)).sum(),
        _ => 0.0,
    };

    let per_step = match options.norm {
        AttributionNorm::Nodes => signed.mapv(f64::abs).sum_axis(Axis(1)) * scale,
        AttributionNorm::NodesAndSteps => {
            let mut acc = Array2::<f64>::zeros((t_h, d));
            for step in 0..t_p {
                let mut w = Array2::zeros((t_p, n));
                w.row_mut(step).assign(&weights.row(step));
                if w.iter().all(|v| *v == 0.0) {
                    continue;
                }
                let (g, _) = path_average(model, x, i, baselines, &w, options.m_steps)?;
                acc += &(&g * &dx).mapv(f64::abs).sum_axis(Axis(1));
            }
            acc * scale
        }
    };

    let value_input = (model.forecast(x, i)? * &weights).sum();
    let value_baseline = (model.forecast(&baselines.numerical, baselines.vision.as_ref())? * &weights).sum();
    Ok(IgResult {
        per_step,
        numerical_total,
        vision_total,
        value_input,
        value_baseline,
    })
}

/// Contribution of a block of input hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayGroup {
    pub label: String,
    pub rows: Range<usize>,
    /// Percent per channel.
    pub percent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub factors: Vec<String>,
    pub static_channels: Vec<usize>,
    /// `T_h × D` percent, summing to 100.
    pub percentages: Array2<f64>,
    /// Percent per channel summed over time.
    pub totals: Vec<f64>,
    pub groups: Vec<DayGroup>,
    pub top5_factors: Vec<String>,
    pub top5_mfc: f64,
    pub sic: f64,
}

/// Row ranges of the recency groups for a history of `t_h` hours.
///
/// Up to a day of history splits into the latest hour, the four before it
/// and the rest; longer histories split into whole days counted back from
/// the forecast start.
pub fn day_groups(t_h: usize) -> Vec<(String, Range<usize>)> {
    if t_h == 0 {
        return Vec::new();
    }
    if t_h <= 24 {
        let mut out = Vec::new();
        let prev = (t_h - 1).min(4);
        let first = t_h - 1 - prev;
        if first > 0 {
            out.push((format!("first-{first}h"), 0..first));
        }
        if prev > 0 {
            out.push((format!("previous-{prev}h"), first..first + prev));
        }
        out.push(("latest-1h".to_string(), t_h - 1..t_h));
        return out;
    }
    let days = t_h.div_ceil(24);
    (1..=days)
        .rev()
        .map(|i| {
            let end = t_h - (i - 1) * 24;
            let start = end.saturating_sub(24);
            (format!("-{i}D"), start..end)
        })
        .collect()
}

pub fn contribution_report(ig: &Array2<f64>, factors: &[String], static_channels: &[usize]) -> Result<AttributionReport> {
    let (t_h, d) = ig.dim();
    if factors.len() != d {
        return Err(Error::Config(format!("{} factor names for {d} channels", factors.len())));
    }
    if let Some(&c) = static_channels.iter().find(|&&c| c >= d) {
        return Err(Error::Config(format!("static channel {c} outside {d} channels")));
    }
    if ig.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::Invariant("attribution must be finite and non-negative".into()));
    }
    let total = ig.sum();
    if total <= 0.0 {
        return Err(Error::DegenerateAttribution);
    }
    let percentages = ig.mapv(|v| v / total * 100.0);
    let totals: Vec<f64> = percentages.sum_axis(Axis(0)).to_vec();
    let groups = day_groups(t_h)
        .into_iter()
        .map(|(label, rows)| DayGroup {
            percent: percentages.slice(s![rows.clone(), ..]).sum_axis(Axis(0)).to_vec(),
            label,
            rows,
        })
        .collect();
    let mut meteo: Vec<usize> = (0..d).filter(|c| !static_channels.contains(c)).collect();
    meteo.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
    let top: Vec<usize> = meteo.into_iter().take(TOP_FACTORS).collect();
    Ok(AttributionReport {
        factors: factors.to_vec(),
        static_channels: static_channels.to_vec(),
        top5_factors: top.iter().map(|&c| factors[c].clone()).collect(),
        top5_mfc: top.iter().map(|&c| totals[c]).sum(),
        sic: static_channels.iter().map(|&c| totals[c]).sum(),
        percentages,
        totals,
        groups,
    })
}

/// `(ΔTop-5 MFC, ΔSIC)` of `multi` relative to `uni`, in percentage points.
pub fn modal_delta(uni: &AttributionReport, multi: &AttributionReport) -> Result<(f64, f64)> {
    if uni.factors != multi.factors || uni.static_channels != multi.static_channels {
        return Err(Error::Comparison("reports cover different factor sets".into()));
    }
    Ok((multi.top5_mfc - uni.top5_mfc, multi.sic - uni.sic))
}

impl AttributionReport {
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// One row per channel: the percent of each recency group, then the total.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["factor".to_string()];
        header.extend(self.groups.iter().map(|g| g.label.clone()));
        header.push("total".into());
        w.write_record(&header).map_err(|e| Error::Config(e.to_string()))?;
        for (c, name) in self.factors.iter().enumerate() {
            let mut row = vec![name.clone()];
            row.extend(self.groups.iter().map(|g| g.percent[c].to_string()));
            row.push(self.totals[c].to_string());
            w.write_record(&row).map_err(|e| Error::Config(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Inputs of window `start` in the layout [`Attributable`] expects.
pub fn window_inputs(data: &PreparedData, start: usize) -> Result<(Array3<f64>, Option<Array4<f64>>, Vec<CalendarIndex>)> {
    let batch = data.batch(&[start])?;
    let x = batch
        .numerical
        .index_axis_move(Axis(0), 0)
        .into_dimensionality::<Ix3>()
        .expect("rank 3");
    let i = batch.vision.map(|v: ArrayD<f64>| {
        let v = v.into_dimensionality::<Ix5>().expect("rank 5").index_axis_move(Axis(0), 0);
        v.permuted_axes([0, 2, 3, 1]).as_standard_layout().into_owned()
    });
    let stamps = batch.stamps.iter().map(|row| row[0]).collect();
    Ok((x, i, stamps))
}
