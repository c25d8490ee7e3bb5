//! VSS-Net, the plain U-shaped backbone it feeds, and the DR adapters that
//! turn ordinary 2D and 3D networks into sequence-to-map segmenters.
//!
//! Sequences inside a graph are stored time-major: a `[T * N, C, H, W]`
//! node whose rows `t * N .. (t + 1) * N` hold frame `t` of every sample.
//! Per-frame (weight-shared) convolutions therefore run as one batched
//! convolution over the whole stack.

use dias_tensor::{Graph, ParamId, ParamStore, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{DsaSequence, ProbabilityMap};

/// A convolution bound to parameters in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let weight = store.conv_kernel(format!("{name}.weight"), out_c, in_c, k, rng);
        let bias = bias.then(|| store.zeros(format!("{name}.bias"), &[out_c]));
        Self {
            weight,
            bias,
            stride,
            pad: k / 2,
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, w, b, self.stride, self.pad)
    }

    pub fn out_channels(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }
}

/// Convolutional GRU cell. Gates and candidate use `k x k` kernels over `C`
/// channels; the hidden state has the same shape as the input.
#[derive(Clone, Debug)]
pub struct ConvGruCell {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub biases: Option<[ParamId; 3]>,
    pub channels: usize,
    pub kernel: usize,
}

impl ConvGruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        kernel: usize,
        bias: bool,
        rng: &mut R,
    ) -> Self {
        let mut k = |n: &str| store.conv_kernel(format!("{name}.{n}"), channels, channels, kernel, rng);
        let (w_z, u_z, w_r, u_r, w_h, u_h) = (k("w_z"), k("u_z"), k("w_r"), k("u_r"), k("w_h"), k("u_h"));
        let biases = bias.then(|| {
            [
                store.zeros(format!("{name}.b_z"), &[channels]),
                store.zeros(format!("{name}.b_r"), &[channels]),
                store.zeros(format!("{name}.b_h"), &[channels]),
            ]
        });
        Self {
            w_z,
            u_z,
            w_r,
            u_r,
            w_h,
            u_h,
            biases,
            channels,
            kernel,
        }
    }

    fn pad(&self) -> usize {
        self.kernel / 2
    }

    /// Input-side pre-activations `[W_z*x, W_r*x, W_h*x]` stacked on the
    /// channel axis, computed for every row of `x` in one convolution.
    fn input_terms(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let ws: Vec<Var> = [self.w_z, self.w_r, self.w_h].iter().map(|&p| g.param(store, p)).collect();
        let w = g.concat_batch(&ws);
        let b = self.biases.map(|bs| {
            let parts: Vec<Var> = bs.iter().map(|&p| g.param(store, p)).collect();
            g.concat_batch(&parts)
        });
        g.conv2d(x, w, b, 1, self.pad())
    }

    /// One update from precomputed input terms. `h_prev = None` is the zero
    /// initial state, for which every `U * h` term vanishes.
    fn step_from_terms(&self, g: &mut Graph, store: &ParamStore, xt: Var, h_prev: Option<Var>) -> Var {
        let c = self.channels;
        let (xz, xr, xh) = (
            g.narrow_channels(xt, 0, c),
            g.narrow_channels(xt, c, c),
            g.narrow_channels(xt, 2 * c, c),
        );
        let Some(h) = h_prev else {
            let z = g.sigmoid(xz);
            let cand = g.tanh(xh);
            return g.mul(z, cand);
        };
        let uz = g.param(store, self.u_z);
        let ur = g.param(store, self.u_r);
        let uzr = g.concat_batch(&[uz, ur]);
        let hzr = g.conv2d(h, uzr, None, 1, self.pad());
        let hz = g.narrow_channels(hzr, 0, c);
        let hr = g.narrow_channels(hzr, c, c);
        let z_pre = g.add(xz, hz);
        let z = g.sigmoid(z_pre);
        let r_pre = g.add(xr, hr);
        let r = g.sigmoid(r_pre);
        let rh = g.mul(r, h);
        let uh = g.param(store, self.u_h);
        let hh = g.conv2d(rh, uh, None, 1, self.pad());
        let cand_pre = g.add(xh, hh);
        let cand = g.tanh(cand_pre);
        // (1 - z) * h + z * cand == h + z * (cand - h)
        let diff = g.sub(cand, h);
        let step = g.mul(z, diff);
        g.add(h, step)
    }

    /// `h_t` from `x_t` and `h_{t-1}`, both `[N, C, H, W]`.
    pub fn step(&self, g: &mut Graph, store: &ParamStore, x_t: Var, h_prev: Option<Var>) -> Var {
        let terms = self.input_terms(g, store, x_t);
        self.step_from_terms(g, store, terms, h_prev)
    }

    /// Runs over a time-major stack of `t` frames with `n` samples each,
    /// forwards or backwards, from a zero state. Returns the hidden states in
    /// frame order.
    pub fn run(&self, g: &mut Graph, store: &ParamStore, xs: Var, t: usize, n: usize, reverse: bool) -> Vec<Var> {
        let terms = self.input_terms(g, store, xs);
        let mut out: Vec<Option<Var>> = vec![None; t];
        let mut h = None;
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..t).rev())
        } else {
            Box::new(0..t)
        };
        for i in order {
            let xt = g.narrow_batch(terms, i * n, n);
            let next = self.step_from_terms(g, store, xt, h);
            out[i] = Some(next);
            h = Some(next);
        }
        out.into_iter().map(|v| v.expect("every frame visited")).collect()
    }
}

/// `[N, F, H, W]` to the time-major `[F * N, 1, H, W]` layout.
pub fn to_time_major(seq: &Tensor) -> Tensor {
    let (n, f, h, w) = seq.dims4();
    let hw = h * w;
    let mut data = Vec::with_capacity(seq.numel());
    for t in 0..f {
        for s in 0..n {
            data.extend_from_slice(&seq.data()[(s * f + t) * hw..(s * f + t + 1) * hw]);
        }
    }
    Tensor::from_vec(&[f * n, 1, h, w], data)
}

/// Time-major `[T * N, C, H, W]` back to `[N, T * C, H, W]`.
pub fn frames_to_channels(g: &mut Graph, xs: Var, t: usize, n: usize) -> Var {
    let parts: Vec<Var> = (0..t).map(|i| g.narrow_batch(xs, i * n, n)).collect();
    g.concat_channels(&parts)
}

/// Weight-shared fusion: per-frame concatenation of the resized frames and
/// the incoming features, then one 1x1 convolution shared by all frames.
pub fn wsc_fuse(g: &mut Graph, store: &ParamStore, wsc: &Conv, frames: Var, feats: Var) -> Result<Var> {
    let (fs, ts) = (g.shape(frames).to_vec(), g.shape(feats).to_vec());
    if fs.len() != 4 || ts.len() != 4 || fs[0] != ts[0] || fs[2..] != ts[2..] || fs[1] != 1 {
        return Err(Error::shape(("T", 1, "H", "W"), (fs, ts)));
    }
    let cat = g.concat_channels(&[frames, feats]);
    Ok(wsc.apply(g, store, cat))
}

/// One SFEM scale.
#[derive(Clone, Debug)]
pub struct SfemStage {
    /// Absent at the first scale, which consumes the raw frames directly.
    pub wsc: Option<Conv>,
    pub fwd_gru: ConvGruCell,
    pub bwd_gru: ConvGruCell,
    pub w_f: ParamId,
    pub w_b: ParamId,
    /// Absent at the last scale.
    pub wsd: Option<Conv>,
    pub hidden: usize,
}

/// Output of one SFEM scale.
pub struct SfemOutput {
    /// Downsampled features for the next scale, time-major.
    pub feats_next: Option<Var>,
    /// Sequence max pool of the fused hidden states, `[N, C', H, W]`.
    pub map2d: Var,
}

impl SfemStage {
    /// `in_feats` is the channel count arriving from the previous scale and
    /// `None` at the first scale.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_feats: Option<usize>,
        next_feats: Option<usize>,
        kernel: usize,
        gru_bias: bool,
        rng: &mut R,
    ) -> Self {
        let (wsc, hidden) = match in_feats {
            None => (None, 1),
            Some(c) => {
                let h = c.div_ceil(2);
                (Some(Conv::new(store, &format!("{name}.wsc"), c + 1, h, 1, 1, true, rng)), h)
            }
        };
        let fwd_gru = ConvGruCell::new(store, &format!("{name}.fwd"), hidden, kernel, gru_bias, rng);
        let bwd_gru = ConvGruCell::new(store, &format!("{name}.bwd"), hidden, kernel, gru_bias, rng);
        let w_f = store.conv_kernel(format!("{name}.w_f"), hidden, hidden, kernel, rng);
        let w_b = store.conv_kernel(format!("{name}.w_b"), hidden, hidden, kernel, rng);
        let wsd = next_feats.map(|c| Conv::new(store, &format!("{name}.wsd"), hidden, c, 3, 2, true, rng));
        Self {
            wsc,
            fwd_gru,
            bwd_gru,
            w_f,
            w_b,
            wsd,
            hidden,
        }
    }

    /// Forward and backward ConvGRU passes fused by
    /// `tanh(W_f * h_fwd + W_b * h_bwd)`, per frame.
    pub fn bidirectional_fuse(&self, g: &mut Graph, store: &ParamStore, xs: Var, t: usize, n: usize) -> Var {
        let hf = self.fwd_gru.run(g, store, xs, t, n, false);
        let hb = self.bwd_gru.run(g, store, xs, t, n, true);
        let hf = g.concat_batch(&hf);
        let hb = g.concat_batch(&hb);
        let both = g.concat_channels(&[hf, hb]);
        let wf = g.param(store, self.w_f);
        let wb = g.param(store, self.w_b);
        let w = g.concat_channels(&[wf, wb]);
        let pre = g.conv2d(both, w, None, 1, self.fwd_gru.kernel / 2);
        g.tanh(pre)
    }

    /// `frames` are the raw frames resized to this scale, time-major
    /// `[T * N, 1, H, W]`; `feats` the previous scale's output.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        frames: Var,
        feats: Option<Var>,
        t: usize,
        n: usize,
    ) -> Result<SfemOutput> {
        let xs = match (&self.wsc, feats) {
            (None, None) => frames,
            (Some(wsc), Some(f)) => wsc_fuse(g, store, wsc, frames, f)?,
            _ => return Err(Error::InvalidArgument("SFEM stage wiring mismatch".into())),
        };
        let fused = self.bidirectional_fuse(g, store, xs, t, n);
        let per_frame: Vec<Var> = (0..t).map(|i| g.narrow_batch(fused, i * n, n)).collect();
        let map2d = g.elem_max(&per_frame);
        let feats_next = self.wsd.as_ref().map(|wsd| wsd.apply(g, store, fused));
        Ok(SfemOutput { feats_next, map2d })
    }
}

/// Plain U-shaped encoder-decoder. Each encoder stage may receive extra
/// channels concatenated in front of its convolutions.
#[derive(Clone, Debug)]
pub struct UNet {
    enc: Vec<[Conv; 2]>,
    dec: Vec<[Conv; 3]>,
    head: Conv,
}

impl UNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        channels: &[usize],
        inject: &[usize],
        num_classes: usize,
        rng: &mut R,
    ) -> Self {
        assert!(!channels.is_empty());
        let mut enc = Vec::new();
        let mut prev = in_channels;
        for (s, &c) in channels.iter().enumerate() {
            let extra = inject.get(s).copied().unwrap_or(0);
            enc.push([
                Conv::new(store, &format!("{name}.enc{s}.conv0"), prev + extra, c, 3, 1, true, rng),
                Conv::new(store, &format!("{name}.enc{s}.conv1"), c, c, 3, 1, true, rng),
            ]);
            prev = c;
        }
        let mut dec = Vec::new();
        for s in (0..channels.len() - 1).rev() {
            let c = channels[s];
            dec.push([
                Conv::new(store, &format!("{name}.dec{s}.up"), channels[s + 1], c, 3, 1, true, rng),
                Conv::new(store, &format!("{name}.dec{s}.conv0"), 2 * c, c, 3, 1, true, rng),
                Conv::new(store, &format!("{name}.dec{s}.conv1"), c, c, 3, 1, true, rng),
            ]);
        }
        let head = Conv::new(store, &format!("{name}.head"), channels[0], num_classes, 1, 1, true, rng);
        Self { enc, dec, head }
    }

    pub fn stages(&self) -> usize {
        self.enc.len()
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, inject: &[Var]) -> Var {
        let mut skips = Vec::with_capacity(self.enc.len());
        let mut cur = x;
        for (s, [c0, c1]) in self.enc.iter().enumerate() {
            if s > 0 {
                cur = g.max_pool2(cur);
            }
            if let Some(&extra) = inject.get(s) {
                cur = g.concat_channels(&[cur, extra]);
            }
            let a = c0.apply(g, store, cur);
            let a = g.relu(a);
            let b = c1.apply(g, store, a);
            cur = g.relu(b);
            skips.push(cur);
        }
        skips.pop();
        for [up, c0, c1] in &self.dec {
            let u = g.upsample2(cur);
            let u = up.apply(g, store, u);
            let u = g.relu(u);
            let skip = skips.pop().expect("one skip per decoder stage");
            let cat = g.concat_channels(&[u, skip]);
            let a = c0.apply(g, store, cat);
            let a = g.relu(a);
            let b = c1.apply(g, store, a);
            cur = g.relu(b);
        }
        self.head.apply(g, store, cur)
    }
}

/// 3x3x3 convolution over a time-major stack, built as a sum of three 2D
/// convolutions over temporal offsets with zero temporal padding.
#[derive(Clone, Debug)]
pub struct Conv3 {
    taps: [ParamId; 3],
    bias: ParamId,
}

impl Conv3 {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_c: usize, out_c: usize, rng: &mut R) -> Self {
        let fan_in = (in_c * 27) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let mut tap = |i: usize| store.insert(format!("{name}.tap{i}"), Tensor::uniform(&[out_c, in_c, 3, 3], bound, rng));
        let taps = [tap(0), tap(1), tap(2)];
        let bias = store.zeros(format!("{name}.bias"), &[out_c]);
        Self { taps, bias }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, xs: Var, t: usize, n: usize) -> Var {
        let shape = g.shape(xs).to_vec();
        let zero = g.input(Tensor::zeros(&[n, shape[1], shape[2], shape[3]]));
        let padded = g.concat_batch(&[zero, xs, zero]);
        let mut acc: Option<Var> = None;
        for (d, &tap) in self.taps.iter().enumerate() {
            let window = g.narrow_batch(padded, d * n, t * n);
            let w = g.param(store, tap);
            let b = (d == 0).then(|| g.param(store, self.bias));
            let y = g.conv2d(window, w, b, 1, 1);
            acc = Some(match acc {
                None => y,
                Some(a) => g.add(a, y),
            });
        }
        acc.expect("three taps")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    VssNet,
    Dr2d,
    Dr3d,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub seq_len: usize,
    /// Backbone channels per stage; also the SFEM stage count.
    pub channels: Vec<usize>,
    pub gru_kernel: usize,
    pub gru_bias: bool,
    /// Width of the 3D network behind the 3D adapter.
    pub conv3d_channels: usize,
    pub num_classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            architecture: Architecture::VssNet,
            seq_len: 8,
            channels: vec![16, 32, 64, 128],
            gru_kernel: 3,
            gru_bias: false,
            conv3d_channels: 8,
            num_classes: 2,
        }
    }
}

impl ModelConfig {
    /// Spatial sizes must be multiples of this.
    pub fn divisor(&self) -> usize {
        match self.architecture {
            Architecture::Dr3d => 1,
            _ => 1 << (self.channels.len().max(1) - 1),
        }
    }

    /// SFEM feature channels arriving at each stage after the first.
    pub fn sfem_feats(&self) -> Vec<usize> {
        self.channels[1..].iter().map(|&c| (c / 2).max(1)).collect()
    }

    fn validate(&self) -> Result<()> {
        if self.seq_len == 0 {
            return Err(Error::InvalidArgument("seq_len must be positive".into()));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(Error::InvalidArgument("channels must be a nonempty list of positive widths".into()));
        }
        if self.gru_kernel.is_multiple_of(2) {
            return Err(Error::InvalidArgument("gru_kernel must be odd".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("num_classes must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct VssNet {
    pub sfem: Vec<SfemStage>,
    pub backbone: UNet,
}

#[derive(Clone, Debug)]
pub struct Dr3d {
    pub layers: Vec<Conv3>,
    pub head: Conv,
}

#[derive(Clone, Debug)]
enum Net {
    VssNet(VssNet),
    Dr2d(UNet),
    Dr3d(Dr3d),
}

/// A segmentation network together with its parameters.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    net: Net,
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let f = config.seq_len;
        let k = config.num_classes;
        let net = match config.architecture {
            Architecture::VssNet => {
                let feats = config.sfem_feats();
                let stages = config.channels.len();
                let mut sfem = Vec::with_capacity(stages);
                for s in 0..stages {
                    let in_feats = (s > 0).then(|| feats[s - 1]);
                    let next = feats.get(s).copied();
                    sfem.push(SfemStage::new(
                        &mut store,
                        &format!("sfem{s}"),
                        in_feats,
                        next,
                        config.gru_kernel,
                        config.gru_bias,
                        rng,
                    ));
                }
                let inject: Vec<usize> = sfem.iter().map(|st| st.hidden).collect();
                let backbone = UNet::new(&mut store, "backbone", f, &config.channels, &inject, k, rng);
                Net::VssNet(VssNet { sfem, backbone })
            }
            Architecture::Dr2d => Net::Dr2d(UNet::new(&mut store, "backbone", f, &config.channels, &[], k, rng)),
            Architecture::Dr3d => {
                let c = config.conv3d_channels;
                let layers = vec![
                    Conv3::new(&mut store, "net3d.conv0", 1, c, rng),
                    Conv3::new(&mut store, "net3d.conv1", c, c, rng),
                    Conv3::new(&mut store, "net3d.conv2", c, c, rng),
                    Conv3::new(&mut store, "net3d.out", c, 1, rng),
                ];
                let head = Conv::new(&mut store, "dr.head", f, k, 1, 1, true, rng);
                Net::Dr3d(Dr3d { layers, head })
            }
        };
        Ok(Self { config, store, net })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn vssnet(&self) -> Option<&VssNet> {
        match &self.net {
            Net::VssNet(v) => Some(v),
            _ => None,
        }
    }

    fn check_input(&self, seq: &Tensor) -> Result<(usize, usize, usize, usize)> {
        if seq.ndim() != 4 {
            return Err(Error::shape(("N", self.config.seq_len, "H", "W"), seq.shape()));
        }
        let (n, f, h, w) = seq.dims4();
        let d = self.config.divisor();
        if f != self.config.seq_len || h % d != 0 || w % d != 0 || n == 0 {
            return Err(Error::shape(
                format!("[N, {}, H, W] with H, W multiples of {d}", self.config.seq_len),
                seq.shape(),
            ));
        }
        Ok((n, f, h, w))
    }

    /// SFEM 2D maps, one per scale, for a `[N, F, H, W]` batch. VSS-Net only.
    pub fn sfem_maps(&self, g: &mut Graph, seq: &Tensor) -> Result<Vec<Var>> {
        let Net::VssNet(v) = &self.net else {
            return Err(Error::InvalidArgument("sfem_maps needs a VSS-Net".into()));
        };
        let (n, f, h, w) = self.check_input(seq)?;
        Self::run_sfem(v, &self.store, g, seq, n, f, h, w)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_sfem(
        v: &VssNet,
        store: &ParamStore,
        g: &mut Graph,
        seq: &Tensor,
        n: usize,
        f: usize,
        h: usize,
        w: usize,
    ) -> Result<Vec<Var>> {
        let raw = to_time_major(seq);
        let mut maps = Vec::with_capacity(v.sfem.len());
        let mut feats = None;
        for (s, stage) in v.sfem.iter().enumerate() {
            let frames = g.input(raw.resize_bilinear(h >> s, w >> s));
            let out = stage.forward(g, store, frames, feats, f, n)?;
            maps.push(out.map2d);
            feats = out.feats_next;
        }
        Ok(maps)
    }

    /// Logits `[N, num_classes, H, W]` for a `[N, F, H, W]` batch.
    pub fn forward(&self, g: &mut Graph, seq: &Tensor) -> Result<Var> {
        let (n, f, h, w) = self.check_input(seq)?;
        let store = &self.store;
        Ok(match &self.net {
            Net::VssNet(v) => {
                let maps = Self::run_sfem(v, store, g, seq, n, f, h, w)?;
                // the backbone sees the squeezed sequence plus each scale's map
                let x = g.input(seq.clone());
                v.backbone.forward(g, store, x, &maps)
            }
            Net::Dr2d(unet) => {
                let x = g.input(seq.clone());
                unet.forward(g, store, x, &[])
            }
            Net::Dr3d(d) => {
                let reduced = self.dr3d_reduced(d, g, seq, n, f);
                d.head.apply(g, store, reduced)
            }
        })
    }

    fn dr3d_reduced(&self, d: &Dr3d, g: &mut Graph, seq: &Tensor, n: usize, f: usize) -> Var {
        let mut x = g.input(to_time_major(seq));
        let last = d.layers.len() - 1;
        for (i, layer) in d.layers.iter().enumerate() {
            x = layer.apply(g, &self.store, x, f, n);
            if i < last {
                x = g.relu(x);
            }
        }
        // single output channel squeezed, F becomes the channel axis
        frames_to_channels(g, x, f, n)
    }

    /// Output of the 3D network after the channel squeeze, `[N, F, H, W]`.
    pub fn dr3d_intermediate(&self, g: &mut Graph, seq: &Tensor) -> Result<Var> {
        let Net::Dr3d(d) = &self.net else {
            return Err(Error::InvalidArgument("dr3d_intermediate needs a 3D adapter".into()));
        };
        let (n, f, _, _) = self.check_input(seq)?;
        Ok(self.dr3d_reduced(d, g, seq, n, f))
    }

    pub fn dr3d_head(&self) -> Option<&Conv> {
        match &self.net {
            Net::Dr3d(d) => Some(&d.head),
            _ => None,
        }
    }

    /// Vessel probabilities `[N, H, W]` (softmax channel 1).
    pub fn probabilities(&self, seq: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let logits = self.forward(&mut g, seq)?;
        Ok(vessel_channel(&g.value(logits).clone()))
    }

    /// Full-resolution vessel probability map for one sequence. Images are
    /// edge-padded up to the tile size and the divisor, then covered by
    /// `tile x tile` windows at half-tile stride with averaged overlaps.
    pub fn predict(&self, seq: &DsaSequence, tile: usize) -> Result<ProbabilityMap> {
        let d = self.config.divisor();
        if tile == 0 || !tile.is_multiple_of(d) {
            return Err(Error::InvalidArgument(format!("tile {tile} must be a positive multiple of {d}")));
        }
        let (f, h, w) = (seq.num_frames(), seq.height(), seq.width());
        let ph = h.max(tile).div_ceil(d) * d;
        let pw = w.max(tile).div_ceil(d) * d;
        let padded = edge_pad(seq.frames(), ph, pw);
        let ys = tile_starts(ph, tile);
        let xs = tile_starts(pw, tile);
        let mut acc = vec![0.0; ph * pw];
        let mut cnt = vec![0u32; ph * pw];
        let windows: Vec<(usize, usize)> = ys.iter().flat_map(|&y| xs.iter().map(move |&x| (y, x))).collect();
        for chunk in windows.chunks(16) {
            let mut batch = Vec::with_capacity(chunk.len() * f * tile * tile);
            for &(y0, x0) in chunk {
                for t in 0..f {
                    let plane = padded.slab(t);
                    for y in y0..y0 + tile {
                        batch.extend_from_slice(&plane[y * pw + x0..y * pw + x0 + tile]);
                    }
                }
            }
            let probs = self.probabilities(&Tensor::from_vec(&[chunk.len(), f, tile, tile], batch))?;
            for (i, &(y0, x0)) in chunk.iter().enumerate() {
                let p = probs.slab(i);
                for y in 0..tile {
                    for x in 0..tile {
                        let k = (y0 + y) * pw + x0 + x;
                        acc[k] += p[y * tile + x];
                        cnt[k] += 1;
                    }
                }
            }
        }
        let mut out = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let k = y * pw + x;
                out.push((acc[k] / cnt[k] as f64).clamp(0.0, 1.0));
            }
        }
        ProbabilityMap::new(h, w, out)
    }
}

/// Softmax channel 1 of `[N, C, H, W]` logits, as `[N, H, W]`.
pub fn vessel_channel(logits: &Tensor) -> Tensor {
    let probs = dias_tensor::log_softmax_channels(logits).map(f64::exp);
    let (n, c, h, w) = probs.dims4();
    let hw = h * w;
    let mut data = Vec::with_capacity(n * hw);
    for s in 0..n {
        data.extend_from_slice(&probs.data()[(s * c + 1) * hw..(s * c + 2) * hw]);
    }
    Tensor::from_vec(&[n, h, w], data)
}

fn tile_starts(len: usize, tile: usize) -> Vec<usize> {
    let stride = (tile / 2).max(1);
    let mut starts: Vec<usize> = (0..=len - tile).step_by(stride).collect();
    if *starts.last().expect("len >= tile") != len - tile {
        starts.push(len - tile);
    }
    starts
}

fn edge_pad(frames: &Tensor, ph: usize, pw: usize) -> Tensor {
    let (f, h, w) = (frames.shape()[0], frames.shape()[1], frames.shape()[2]);
    if (h, w) == (ph, pw) {
        return frames.clone();
    }
    let mut data = Vec::with_capacity(f * ph * pw);
    for t in 0..f {
        let plane = frames.slab(t);
        for y in 0..ph {
            let sy = y.min(h - 1);
            for x in 0..pw {
                data.push(plane[sy * w + x.min(w - 1)]);
            }
        }
    }
    Tensor::from_vec(&[f, ph, pw], data)
}

/// VSS-Net inference on a single `[1, F, H, W]` sequence.
pub fn vssnet_forward(model: &Model, seq: &Tensor) -> Result<ProbabilityMap> {
    if model.config.architecture != Architecture::VssNet {
        return Err(Error::InvalidArgument("not a VSS-Net".into()));
    }
    single_map(model, seq)
}

/// 2D adapter: the unit channel axis is squeezed so the frames become the
/// input channels of the 2D network.
pub fn dr_wrap_2d(model: &Model, seq: &Tensor) -> Result<ProbabilityMap> {
    if model.config.architecture != Architecture::Dr2d {
        return Err(Error::InvalidArgument("not a 2D adapter".into()));
    }
    single_map(model, seq)
}

/// 3D adapter: the 3D network's single output channel is squeezed and a
/// 1x1 convolution maps the frame axis to the class logits.
pub fn dr_wrap_3d(model: &Model, seq: &Tensor) -> Result<ProbabilityMap> {
    if model.config.architecture != Architecture::Dr3d {
        return Err(Error::InvalidArgument("not a 3D adapter".into()));
    }
    single_map(model, seq)
}

fn single_map(model: &Model, seq: &Tensor) -> Result<ProbabilityMap> {
    if seq.ndim() != 4 || seq.shape()[0] != 1 {
        return Err(Error::shape([1, model.config.seq_len, 0, 0], seq.shape()));
    }
    let p = model.probabilities(seq)?;
    let (h, w) = (seq.shape()[2], seq.shape()[3]);
    ProbabilityMap::new(h, w, p.into_data())
}
