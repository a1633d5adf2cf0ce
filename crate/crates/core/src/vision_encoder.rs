//! Convolutional LSTM stack over satellite frames, with the multi-scale
//! channel/spatial attention block on the gate path.
//!
//! Tape tensors are `[B, C, H, W]`; the single-sample wrappers at the bottom
//! take and return `H × W × C` arrays.

use ndarray::{Array3, ArrayD, ArrayView3, ArrayView4, Axis, Ix3};
use vnnet_autograd::{Conv2dSpec, Tape, Var};

use crate::error::{Error, Result};
use crate::params::{ParamBuilder, ParamId};

pub const FPM_DILATIONS: [usize; 3] = [1, 2, 4];
pub const CHANNEL_REDUCTION: usize = 8;
pub const SPATIAL_KERNEL: usize = 7;
pub const GATE_KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<P> {
    /// `[out, in, kh, kw]`
    pub kernel: P,
    /// `[out]`
    pub bias: P,
}

impl<P> ConvParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> ConvParams<Q> {
        ConvParams {
            kernel: f(&self.kernel),
            bias: f(&self.bias),
        }
    }
}

impl<'t> ConvParams<Var<'t>> {
    fn apply(&self, x: Var<'t>, spec: Conv2dSpec) -> Var<'t> {
        x.conv2d_bias(self.kernel, self.bias, spec)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams<P> {
    /// `[in, out]`
    pub weight: P,
    /// `[out]`
    pub bias: P,
}

impl<P> DenseParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> DenseParams<Q> {
        DenseParams {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MscsmParams<P> {
    /// 1×1 branch followed by the dilated 3×3 branches, each `c/4` wide.
    pub fpm: [ConvParams<P>; 4],
    pub mlp_hidden: DenseParams<P>,
    pub mlp_out: DenseParams<P>,
    /// `[1, 2, 7, 7]` kernel over the stacked average and max maps.
    pub spatial: ConvParams<P>,
}

impl<P> MscsmParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> MscsmParams<Q> {
        MscsmParams {
            fpm: [
                self.fpm[0].map(&mut f),
                self.fpm[1].map(&mut f),
                self.fpm[2].map(&mut f),
                self.fpm[3].map(&mut f),
            ],
            mlp_hidden: self.mlp_hidden.map(&mut f),
            mlp_out: self.mlp_out.map(&mut f),
            spatial: self.spatial.map(&mut f),
        }
    }

    pub fn channels(&self) -> usize
    where
        P: Shaped,
    {
        self.fpm[0].kernel.dims()[1]
    }
}

/// One recurrent layer. Without `mscsm` the gates read the concatenated
/// input directly (plain ConvLSTM).
#[derive(Debug, Clone, PartialEq)]
pub struct VlstmParams<P> {
    pub mscsm: Option<MscsmParams<P>>,
    pub input_gate: ConvParams<P>,
    pub forget_gate: ConvParams<P>,
    pub cell_gate: ConvParams<P>,
    pub output_gate: ConvParams<P>,
}

impl<P> VlstmParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> VlstmParams<Q> {
        VlstmParams {
            mscsm: self.mscsm.as_ref().map(|m| m.map(&mut f)),
            input_gate: self.input_gate.map(&mut f),
            forget_gate: self.forget_gate.map(&mut f),
            cell_gate: self.cell_gate.map(&mut f),
            output_gate: self.output_gate.map(&mut f),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoderParams<P> {
    pub layers: Vec<VlstmParams<P>>,
    /// Stride-2 3×3 convolutions between consecutive layers.
    pub downsample: Vec<ConvParams<P>>,
    /// 1×1 convolution from the last hidden width to `F`.
    pub projection: ConvParams<P>,
}

impl<P> VisionEncoderParams<P> {
    pub fn map<Q>(&self, mut f: impl FnMut(&P) -> Q) -> VisionEncoderParams<Q> {
        VisionEncoderParams {
            layers: self.layers.iter().map(|l| l.map(&mut f)).collect(),
            downsample: self.downsample.iter().map(|d| d.map(&mut f)).collect(),
            projection: self.projection.map(&mut f),
        }
    }
}

/// Anything with a shape; lets shape queries run on both arrays and tape vars.
pub trait Shaped {
    fn dims(&self) -> Vec<usize>;
}

impl Shaped for ArrayD<f64> {
    fn dims(&self) -> Vec<usize> {
        self.shape().to_vec()
    }
}

impl Shaped for Var<'_> {
    fn dims(&self) -> Vec<usize> {
        self.shape()
    }
}

/// Smallest multiple of 4 that holds `channels`.
pub fn padded_channels(channels: usize) -> usize {
    channels.div_ceil(4) * 4
}

pub fn channel_hidden_width(channels: usize) -> usize {
    (channels / CHANNEL_REDUCTION).max(1)
}

fn init_conv(b: &mut ParamBuilder<'_>, name: &str, out: usize, input: usize, kernel: usize) -> ConvParams<ParamId> {
    let mut b = b.scope(name);
    let fan_in = input * kernel * kernel;
    ConvParams {
        kernel: b.uniform("kernel", &[out, input, kernel, kernel], fan_in),
        bias: b.uniform("bias", &[out], fan_in),
    }
}

fn init_dense(b: &mut ParamBuilder<'_>, name: &str, input: usize, out: usize) -> DenseParams<ParamId> {
    let mut b = b.scope(name);
    DenseParams {
        weight: b.uniform("weight", &[input, out], input),
        bias: b.uniform("bias", &[out], input),
    }
}

pub fn init_mscsm(b: &mut ParamBuilder<'_>, channels: usize) -> Result<MscsmParams<ParamId>> {
    if channels == 0 || channels % 4 != 0 {
        return Err(Error::Config(format!("pyramid needs a channel count divisible by 4, got {channels}")));
    }
    let quarter = channels / 4;
    let hidden = channel_hidden_width(channels);
    Ok(MscsmParams {
        fpm: [
            init_conv(b, "fpm_point", quarter, channels, 1),
            init_conv(b, "fpm_d1", quarter, channels, 3),
            init_conv(b, "fpm_d2", quarter, channels, 3),
            init_conv(b, "fpm_d4", quarter, channels, 3),
        ],
        mlp_hidden: init_dense(b, "mlp_hidden", channels, hidden),
        mlp_out: init_dense(b, "mlp_out", hidden, channels),
        spatial: init_conv(b, "spatial", 1, 2, SPATIAL_KERNEL),
    })
}

/// `input` is the frame channel count of this layer, `hidden` its `F_v`.
pub fn init_vlstm(b: &mut ParamBuilder<'_>, input: usize, hidden: usize, attention: bool) -> Result<VlstmParams<ParamId>> {
    let width = padded_channels(input + hidden);
    Ok(VlstmParams {
        mscsm: if attention {
            Some(init_mscsm(&mut b.scope("mscsm"), width)?)
        } else {
            None
        },
        input_gate: init_conv(b, "input_gate", hidden, width, GATE_KERNEL),
        forget_gate: init_conv(b, "forget_gate", hidden, width, GATE_KERNEL),
        cell_gate: init_conv(b, "cell_gate", hidden, width, GATE_KERNEL),
        output_gate: init_conv(b, "output_gate", hidden, width, GATE_KERNEL),
    })
}

pub fn init_vision_encoder(
    b: &mut ParamBuilder<'_>,
    bands: usize,
    hidden: &[usize],
    out: usize,
    attention: bool,
) -> Result<VisionEncoderParams<ParamId>> {
    if hidden.is_empty() {
        return Err(Error::Config("vision encoder needs at least one layer".into()));
    }
    let mut layers = Vec::with_capacity(hidden.len());
    let mut downsample = Vec::new();
    let mut input = bands;
    for (l, &h) in hidden.iter().enumerate() {
        if l > 0 {
            downsample.push(init_conv(b, &format!("downsample.{}", l - 1), input, input, 3));
        }
        layers.push(init_vlstm(&mut b.scope(&format!("layer.{l}")), input, h, attention)?);
        input = h;
    }
    Ok(VisionEncoderParams {
        layers,
        downsample,
        projection: init_conv(b, "projection", out, input, 1),
    })
}

/// Four-branch pyramid; output width equals input width.
pub fn fpm<'t>(x: Var<'t>, params: &[ConvParams<Var<'t>>; 4]) -> Var<'t> {
    let tape = x.tape();
    let point = params[0].apply(x, Conv2dSpec::same(1, 1));
    let mut branches = vec![point];
    for (p, &d) in params[1..].iter().zip(FPM_DILATIONS.iter()) {
        branches.push(p.apply(x, Conv2dSpec::same(3, d)));
    }
    tape.concat(&branches, 1)
}

fn dense<'t>(x: Var<'t>, p: &DenseParams<Var<'t>>) -> Var<'t> {
    x.matmul(p.weight).add(p.bias)
}

/// `M_c`, shape `[B, c, 1, 1]`, before any sigmoid.
pub fn channel_attention<'t>(f_m: Var<'t>, hidden: &DenseParams<Var<'t>>, out: &DenseParams<Var<'t>>) -> Var<'t> {
    let shape = f_m.shape();
    let (b, c) = (shape[0], shape[1]);
    let mlp = |v: Var<'t>| dense(dense(v.reshape(&[b, c]), hidden).relu(), out);
    mlp(f_m.mean_axes(&[2, 3])).add(mlp(f_m.max_axes(&[2, 3]))).reshape(&[b, c, 1, 1])
}

/// `M_s`, shape `[B, 1, H, W]`, before any sigmoid.
pub fn spatial_attention<'t>(f_m: Var<'t>, conv: &ConvParams<Var<'t>>) -> Var<'t> {
    let pooled = f_m.tape().concat(&[f_m.mean_axes(&[1]), f_m.max_axes(&[1])], 1);
    conv.apply(pooled, Conv2dSpec::same(SPATIAL_KERNEL, 1))
}

pub fn mscsm<'t>(x: Var<'t>, params: &MscsmParams<Var<'t>>) -> Var<'t> {
    let f_m = fpm(x, &params.fpm);
    let m_c = channel_attention(f_m, &params.mlp_hidden, &params.mlp_out);
    let m_s = spatial_attention(f_m, &params.spatial);
    f_m.mul(m_c.mul(m_s).sigmoid())
}

/// Hidden and cell maps, `[B, F_v, H, W]` each.
#[derive(Clone, Copy)]
pub struct CellState<'t> {
    pub hidden: Var<'t>,
    pub cell: Var<'t>,
}

impl<'t> CellState<'t> {
    pub fn zeros(tape: &'t Tape, batch: usize, hidden: usize, height: usize, width: usize) -> Self {
        Self {
            hidden: tape.zeros(&[batch, hidden, height, width]),
            cell: tape.zeros(&[batch, hidden, height, width]),
        }
    }
}

/// Concatenates frame and hidden state, zero-padding the channel axis up to
/// the width the layer was built for.
fn gate_input<'t>(frame: Var<'t>, hidden: Var<'t>, width: usize) -> Var<'t> {
    let tape = frame.tape();
    let fs = frame.shape();
    let used = fs[1] + hidden.shape()[1];
    assert!(used <= width, "layer built for {width} channels but got {used}");
    if used == width {
        tape.concat(&[frame, hidden], 1)
    } else {
        let pad = tape.zeros(&[fs[0], width - used, fs[2], fs[3]]);
        tape.concat(&[frame, hidden, pad], 1)
    }
}

pub fn vlstm_cell<'t>(frame: Var<'t>, state: CellState<'t>, params: &VlstmParams<Var<'t>>) -> CellState<'t> {
    let tape = frame.tape();
    let width = params.input_gate.kernel.shape()[1];
    let hidden = params.input_gate.kernel.shape()[0];
    let mut features = gate_input(frame, state.hidden, width);
    if let Some(m) = &params.mscsm {
        features = mscsm(features, m);
    }
    let gates = [&params.input_gate, &params.forget_gate, &params.cell_gate, &params.output_gate];
    let kernel = tape.concat(&gates.map(|g| g.kernel), 0);
    let bias = tape.concat(&gates.map(|g| g.bias), 0);
    let pre = features.conv2d_bias(kernel, bias, Conv2dSpec::same(GATE_KERNEL, 1));
    let i = pre.narrow(1, 0, hidden).sigmoid();
    let f = pre.narrow(1, hidden, hidden).sigmoid();
    let g = pre.narrow(1, 2 * hidden, hidden).tanh();
    let o = pre.narrow(1, 3 * hidden, hidden).sigmoid();
    let cell = f.mul(state.cell).add(i.mul(g));
    CellState {
        hidden: o.mul(cell.tanh()),
        cell,
    }
}

/// Checks that `H × W` survives `layers − 1` halvings.
pub fn check_spatial(height: usize, width: usize, layers: usize) -> Result<()> {
    let div = 1usize << layers.saturating_sub(1);
    if height == 0 || width == 0 || height % div != 0 || width % div != 0 {
        return Err(Error::Config(format!(
            "vision size {height}x{width} is not divisible by {div} for {layers} layers"
        )));
    }
    Ok(())
}

/// Encodes frames `[B, C_s, H, W]` per step into `Z_v : [B, F, H', W']`.
pub fn encode_frames<'t>(frames: &[Var<'t>], params: &VisionEncoderParams<Var<'t>>) -> Result<Var<'t>> {
    if frames.is_empty() {
        return Err(Error::EmptyWindow);
    }
    let tape = frames[0].tape();
    let shape = frames[0].shape();
    check_spatial(shape[2], shape[3], params.layers.len())?;
    let mut sequence = frames.to_vec();
    let mut last = None;
    for (l, layer) in params.layers.iter().enumerate() {
        if l > 0 {
            let down = &params.downsample[l - 1];
            let spec = Conv2dSpec {
                stride: 2,
                padding: 1,
                dilation: 1,
            };
            // all steps go through the strided convolution as one batch
            let b = sequence[0].shape()[0];
            let stacked = down.apply(tape.concat(&sequence, 0), spec);
            sequence = (0..sequence.len()).map(|t| stacked.narrow(0, t * b, b)).collect();
        }
        let s = sequence[0].shape();
        let hidden = layer.input_gate.kernel.shape()[0];
        let mut state = CellState::zeros(tape, s[0], hidden, s[2], s[3]);
        let mut outputs = Vec::with_capacity(sequence.len());
        for frame in &sequence {
            state = vlstm_cell(*frame, state, layer);
            outputs.push(state.hidden);
        }
        last = Some(state.hidden);
        sequence = outputs;
    }
    let z = params.projection.apply(last.expect("at least one layer"), Conv2dSpec::same(1, 1));
    if !z.value().iter().all(|v| v.is_finite()) {
        return Err(Error::Divergence("vision encoder state".into()));
    }
    Ok(z)
}

fn hwc_to_nchw(x: ArrayView3<'_, f64>) -> ArrayD<f64> {
    x.permuted_axes([2, 0, 1]).as_standard_layout().into_owned().insert_axis(Axis(0)).into_dyn()
}

fn nchw_to_hwc(x: ArrayD<f64>) -> Array3<f64> {
    x.index_axis_move(Axis(0), 0)
        .into_dimensionality::<Ix3>()
        .expect("rank 3")
        .permuted_axes([1, 2, 0])
        .as_standard_layout()
        .into_owned()
}

fn require_quarters(c: usize) -> Result<()> {
    if c == 0 || c % 4 != 0 {
        return Err(Error::Config(format!("channel count {c} is not divisible by 4")));
    }
    Ok(())
}

fn require_width(c: usize, expected: usize, what: &str) -> Result<()> {
    if c != expected {
        return Err(Error::Config(format!("{what} expects {expected} channels, got {c}")));
    }
    Ok(())
}

/// Feature pyramid on one `h × w × c` map.
pub fn fpm_apply(f_in: ArrayView3<'_, f64>, params: &[ConvParams<ArrayD<f64>>; 4]) -> Result<Array3<f64>> {
    let c = f_in.dim().2;
    require_quarters(c)?;
    require_width(c, params[0].kernel.shape()[1], "pyramid")?;
    let tape = Tape::new();
    let p = params.each_ref().map(|q| q.map(|a| tape.constant(a.clone())));
    Ok(nchw_to_hwc(fpm(tape.constant(hwc_to_nchw(f_in)), &p).to_tensor()))
}

/// `1 × 1 × c` channel map.
pub fn channel_attention_apply(
    f_m: ArrayView3<'_, f64>,
    hidden: &DenseParams<ArrayD<f64>>,
    out: &DenseParams<ArrayD<f64>>,
) -> Result<Array3<f64>> {
    require_width(f_m.dim().2, hidden.weight.shape()[0], "channel attention")?;
    let tape = Tape::new();
    let h = hidden.map(|a| tape.constant(a.clone()));
    let o = out.map(|a| tape.constant(a.clone()));
    Ok(nchw_to_hwc(channel_attention(tape.constant(hwc_to_nchw(f_m)), &h, &o).to_tensor()))
}

/// `h × w × 1` spatial map.
pub fn spatial_attention_apply(f_m: ArrayView3<'_, f64>, conv: &ConvParams<ArrayD<f64>>) -> Result<Array3<f64>> {
    let tape = Tape::new();
    let c = conv.map(|a| tape.constant(a.clone()));
    Ok(nchw_to_hwc(spatial_attention(tape.constant(hwc_to_nchw(f_m)), &c).to_tensor()))
}

pub fn mscsm_apply(f_in: ArrayView3<'_, f64>, params: &MscsmParams<ArrayD<f64>>) -> Result<Array3<f64>> {
    let c = f_in.dim().2;
    require_quarters(c)?;
    require_width(c, params.channels(), "attention block")?;
    let tape = Tape::new();
    let p = params.map(|a| tape.constant(a.clone()));
    Ok(nchw_to_hwc(mscsm(tape.constant(hwc_to_nchw(f_in)), &p).to_tensor()))
}

/// Hidden and cell maps of one sample, `h × w × F_v` each.
#[derive(Debug, Clone, PartialEq)]
pub struct VlstmState {
    pub hidden: Array3<f64>,
    pub cell: Array3<f64>,
}

impl VlstmState {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self {
            hidden: Array3::zeros((height, width, channels)),
            cell: Array3::zeros((height, width, channels)),
        }
    }
}

pub fn vlstm_step(i_t: ArrayView3<'_, f64>, state: &VlstmState, params: &VlstmParams<ArrayD<f64>>) -> Result<VlstmState> {
    let (h, w, c) = i_t.dim();
    if state.hidden.dim() != state.cell.dim() || state.hidden.dim().0 != h || state.hidden.dim().1 != w {
        return Err(Error::Config("cell state does not match the frame size".into()));
    }
    let width = params.input_gate.kernel.shape()[1];
    let hidden = params.input_gate.kernel.shape()[0];
    if state.hidden.dim().2 != hidden || c + hidden > width {
        return Err(Error::Config(format!(
            "layer built for {width} gate channels cannot take {c} input and {} hidden",
            state.hidden.dim().2
        )));
    }
    let tape = Tape::new();
    let p = params.map(|a| tape.constant(a.clone()));
    let s = CellState {
        hidden: tape.constant(hwc_to_nchw(state.hidden.view())),
        cell: tape.constant(hwc_to_nchw(state.cell.view())),
    };
    let next = vlstm_cell(tape.constant(hwc_to_nchw(i_t)), s, &p);
    let out = VlstmState {
        hidden: nchw_to_hwc(next.hidden.to_tensor()),
        cell: nchw_to_hwc(next.cell.to_tensor()),
    };
    if !out.cell.iter().chain(out.hidden.iter()).all(|v| v.is_finite()) {
        return Err(Error::Divergence("vision cell state".into()));
    }
    Ok(out)
}

/// Encoder output for one sample, `H' × W' × F`.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionFeatures {
    pub values: Array3<f64>,
}

/// Encodes one window `T × H × W × C_s`.
pub fn encode_vision(window: ArrayView4<'_, f64>, params: &VisionEncoderParams<ArrayD<f64>>) -> Result<VisionFeatures> {
    let first = params
        .layers
        .first()
        .ok_or_else(|| Error::Config("vision encoder needs at least one layer".into()))?;
    let (t, h, w, c) = window.dim();
    if t == 0 {
        return Err(Error::EmptyWindow);
    }
    check_spatial(h, w, params.layers.len())?;
    let hidden = first.input_gate.kernel.shape()[0];
    if c + hidden > first.input_gate.kernel.shape()[1] {
        return Err(Error::Config(format!("first layer cannot take {c} bands")));
    }
    let tape = Tape::new();
    let p = params.map(|a| tape.constant(a.clone()));
    let frames: Vec<Var<'_>> = window.outer_iter().map(|f| tape.constant(hwc_to_nchw(f))).collect();
    Ok(VisionFeatures {
        values: nchw_to_hwc(encode_frames(&frames, &p)?.to_tensor()),
    })
}
