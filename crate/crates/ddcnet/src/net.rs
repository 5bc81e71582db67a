//! Network descriptions and whole-net forward/backward.
//!
//! A [`NetworkSpec`] describes a two-frame dense-prediction net: an
//! optional *branch* of layers applied to each input frame with shared
//! weights, a channel concat, and a *trunk* ending in a 1x1 linear head
//! with two output channels (u, v). Parameters live separately in a
//! [`ParamStore`] keyed by layer id, so the same spec can be run at f32
//! or f64 and checkpoints are just the store serialized.
//!
//! Builders are provided for the two reference architectures (DDCNet-B0
//! and DDCNet-B1) and for generic dilation schedules used by the
//! receptive-field design loop.

use std::collections::BTreeMap;
use std::io::Read as _;
use std::path::Path;

use crate::tensor::{
    concat_channels, conv2d, conv2d_backward, relu_backward, relu_in_place, split_channels,
    upsample_nearest, upsample_nearest_backward, ConvKernel, Scalar, Tensor4,
};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Specs
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        /// `(kh, kw)`, both odd.
        kernel: (usize, usize),
        filters: usize,
        /// `(dy, dx)`.
        dilation: (usize, usize),
        /// `(sy, sx)`.
        stride: (usize, usize),
        activation: Activation,
    },
    Upsample {
        factor: usize,
    },
}

/// One layer of a network: what it does, its stable id (used as the
/// parameter key and in error messages), and an optional share-group
/// label recorded for documentation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub id: u32,
    pub kind: LayerKind,
    pub share_group: Option<String>,
}

impl LayerSpec {
    /// Square-kernel convolution layer with equal dilation and stride on
    /// both axes.
    pub fn conv(
        id: u32,
        k: usize,
        filters: usize,
        d: usize,
        s: usize,
        activation: Activation,
        share_group: Option<&str>,
    ) -> Self {
        LayerSpec {
            id,
            kind: LayerKind::Conv {
                kernel: (k, k),
                filters,
                dilation: (d, d),
                stride: (s, s),
                activation,
            },
            share_group: share_group.map(str::to_owned),
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self.kind, LayerKind::Conv { .. })
    }
}

/// A two-frame dense-prediction network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkSpec {
    pub name: String,
    /// Channels per input frame (the net itself always takes two frames).
    pub input_channels: usize,
    /// Per-frame feature extractor, weights shared between frames.
    /// Empty means the frames are concatenated raw.
    pub branch: Vec<LayerSpec>,
    /// Layers applied after the channel concat.
    pub trunk: Vec<LayerSpec>,
}

impl NetworkSpec {
    /// Checks structural invariants: ids unique and dense from 1, trunk
    /// non-empty, the last conv is a 1x1 linear head with 2 filters, and
    /// only trailing upsamples may follow it.
    pub fn validate(&self) -> Result<()> {
        if self.input_channels == 0 {
            return Err(Error::shape("input_channels must be >= 1"));
        }
        if self.trunk.is_empty() {
            return Err(Error::shape("network has no trunk layers"));
        }
        let mut next_id = 1u32;
        for layer in self.layers() {
            if layer.id != next_id {
                return Err(Error::shape(format!(
                    "layer ids must be dense from 1; expected {next_id}, found {}",
                    layer.id
                )));
            }
            next_id += 1;
            match layer.kind {
                LayerKind::Conv {
                    kernel,
                    filters,
                    dilation,
                    stride,
                    ..
                } => {
                    if kernel.0 % 2 == 0 || kernel.1 % 2 == 0 {
                        return Err(Error::shape(format!(
                            "layer {}: kernel sides must be odd",
                            layer.id
                        )));
                    }
                    if filters == 0 || dilation.0 == 0 || dilation.1 == 0 || stride.0 == 0 || stride.1 == 0 {
                        return Err(Error::shape(format!(
                            "layer {}: filters, dilation and stride must be >= 1",
                            layer.id
                        )));
                    }
                }
                LayerKind::Upsample { factor } => {
                    if factor == 0 {
                        return Err(Error::shape(format!(
                            "layer {}: upsample factor must be >= 1",
                            layer.id
                        )));
                    }
                }
            }
        }
        for layer in &self.branch {
            if !layer.is_conv() {
                return Err(Error::shape("branch layers must be convolutions"));
            }
        }
        // Find the last conv; it is the flow head.
        let last_conv = self
            .trunk
            .iter()
            .rev()
            .find(|l| l.is_conv())
            .ok_or_else(|| Error::shape("trunk has no convolution layers"))?;
        match last_conv.kind {
            LayerKind::Conv {
                filters,
                activation,
                ..
            } => {
                if filters != 2 || activation != Activation::Linear {
                    return Err(Error::shape(format!(
                        "layer {}: the final convolution must be a linear head with 2 filters",
                        last_conv.id
                    )));
                }
            }
            LayerKind::Upsample { .. } => unreachable!(),
        }
        Ok(())
    }

    /// All layers, branch first.
    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.branch.iter().chain(self.trunk.iter())
    }

    /// Number of convolution layers (shared branch counted once).
    pub fn conv_layer_count(&self) -> usize {
        self.layers().filter(|l| l.is_conv()).count()
    }

    /// Total number of layer entries including upsamples.
    pub fn spec_len(&self) -> usize {
        self.branch.len() + self.trunk.len()
    }

    /// Input channel count of every conv layer, keyed by layer id.
    /// Shared branch layers are listed once.
    pub fn conv_inputs(&self) -> Vec<(u32, usize)> {
        let mut out = Vec::new();
        let mut c = self.input_channels;
        for layer in &self.branch {
            if let LayerKind::Conv { filters, .. } = layer.kind {
                out.push((layer.id, c));
                c = filters;
            }
        }
        let mut c = 2 * c; // concat of the two frames' features
        for layer in &self.trunk {
            if let LayerKind::Conv { filters, .. } = layer.kind {
                out.push((layer.id, c));
                c = filters;
            }
        }
        out
    }

    /// Channel count entering the concat, per frame.
    pub fn branch_out_channels(&self) -> usize {
        self.branch
            .iter()
            .rev()
            .find_map(|l| match l.kind {
                LayerKind::Conv { filters, .. } => Some(filters),
                _ => None,
            })
            .unwrap_or(self.input_channels)
    }

    /// Total learnable parameter count (weights + biases, shared layers
    /// counted once).
    pub fn param_count(&self) -> u64 {
        let inputs: BTreeMap<u32, usize> = self.conv_inputs().into_iter().collect();
        let mut total = 0u64;
        for layer in self.layers() {
            if let LayerKind::Conv {
                kernel, filters, ..
            } = layer.kind
            {
                let cin = inputs[&layer.id] as u64;
                total += (kernel.0 * kernel.1) as u64 * cin * filters as u64 + filters as u64;
            }
        }
        total
    }

    /// Theoretical receptive-field side length of one output unit, from
    /// the standard recursion: r += (k-1)*d*jump, jump *= stride (and
    /// shrinks through upsampling).
    pub fn theoretical_rf(&self) -> u64 {
        // jump tracked as an exact fraction so upsamples divide cleanly
        let (mut jn, mut jd) = (1u64, 1u64);
        let (mut rn, mut rd) = (1u64, 1u64);
        let gcd = |mut a: u64, mut b: u64| {
            while b != 0 {
                (a, b) = (b, a % b);
            }
            a
        };
        let mut add = |num: u64, den: u64| {
            rn = rn * den + num * rd;
            rd *= den;
            let g = gcd(rn, rd);
            rn /= g;
            rd /= g;
        };
        for layer in self.layers() {
            match layer.kind {
                LayerKind::Conv {
                    kernel,
                    dilation,
                    stride,
                    ..
                } => {
                    // square geometry assumed for the summary number
                    add((kernel.0 as u64 - 1) * dilation.0 as u64 * jn, jd);
                    jn *= stride.0 as u64;
                    let g = gcd(jn, jd);
                    jn /= g;
                    jd /= g;
                }
                LayerKind::Upsample { factor } => {
                    jd *= factor as u64;
                    let g = gcd(jn, jd);
                    jn /= g;
                    jd /= g;
                }
            }
        }
        debug_assert_eq!(rd, 1, "receptive field should come out integral");
        rn / rd
    }

    /// The spatial dims every input must be divisible by (product of all
    /// conv strides) so that the head's upsamples restore full resolution.
    pub fn required_divisor(&self) -> usize {
        self.layers()
            .map(|l| match l.kind {
                LayerKind::Conv { stride, .. } => stride.0.max(stride.1),
                _ => 1,
            })
            .product()
    }

    /// `(h, w, c)` after every layer for a given input size, branch
    /// stages first (per frame), then trunk stages including the concat
    /// input. Useful for inspecting where strides shrink the map.
    pub fn layer_dims(&self, h: usize, w: usize) -> Vec<(u32, usize, usize, usize)> {
        let mut out = Vec::new();
        let (mut ch, mut cw, mut cc) = (h, w, self.input_channels);
        for layer in &self.branch {
            if let LayerKind::Conv {
                filters, stride, ..
            } = layer.kind
            {
                ch = ch.div_ceil(stride.0);
                cw = cw.div_ceil(stride.1);
                cc = filters;
            }
            out.push((layer.id, ch, cw, cc));
        }
        cc *= 2;
        for layer in &self.trunk {
            match layer.kind {
                LayerKind::Conv {
                    filters, stride, ..
                } => {
                    ch = ch.div_ceil(stride.0);
                    cw = cw.div_ceil(stride.1);
                    cc = filters;
                }
                LayerKind::Upsample { factor } => {
                    ch *= factor;
                    cw *= factor;
                }
            }
            out.push((layer.id, ch, cw, cc));
        }
        out
    }

    /// Dilation of every conv layer in order, keyed by layer id.
    pub fn dilations(&self) -> Vec<(u32, usize)> {
        self.layers()
            .filter_map(|l| match l.kind {
                LayerKind::Conv { dilation, .. } => Some((l.id, dilation.0)),
                _ => None,
            })
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Builders
// ---------------------------------------------------------------------------

/// DDCNet-B0: both frames concatenated raw, 25 3x3/64 ReLU layers with
/// dilation growing 1..25, a decreasing-dilation tail (12, 6, 3, 1), and
/// a 1x1 linear head. All strides 1, full resolution throughout.
pub fn ddcnet_b0() -> NetworkSpec {
    let mut trunk = Vec::new();
    let mut id = 1u32;
    for d in 1..=25 {
        trunk.push(LayerSpec::conv(id, 3, 64, d, 1, Activation::Relu, None));
        id += 1;
    }
    for d in [12, 6, 3, 1] {
        trunk.push(LayerSpec::conv(id, 3, 64, d, 1, Activation::Relu, None));
        id += 1;
    }
    trunk.push(LayerSpec::conv(id, 1, 2, 1, 1, Activation::Linear, None));
    NetworkSpec {
        name: "ddcnet-b0".into(),
        input_channels: 3,
        branch: Vec::new(),
        trunk,
    }
}

/// DDCNet-B1: a shared 3-layer spatial feature extractor per frame
/// (3x3/64, d = 1, 2, 3), concat to 128 channels, a 15-layer flow
/// feature extractor at 128 filters whose first two layers have stride 2
/// (so it runs at quarter resolution; dilations 1, 2, 4, 6, ..., 28),
/// 2x upsampling, a 10-layer flow refiner (3x3/64, d = 1..10) at half
/// resolution, the 1x1 linear head, and a final 2x upsample back to full
/// resolution.
pub fn ddcnet_b1() -> NetworkSpec {
    let mut id = 1u32;
    let mut branch = Vec::new();
    for d in 1..=3 {
        branch.push(LayerSpec::conv(id, 3, 64, d, 1, Activation::Relu, Some("spatial")));
        id += 1;
    }
    let mut trunk = Vec::new();
    for i in 0..15 {
        let d = if i == 0 { 1 } else { 2 * i };
        let s = if i < 2 { 2 } else { 1 };
        trunk.push(LayerSpec::conv(id, 3, 128, d, s, Activation::Relu, Some("flow")));
        id += 1;
    }
    trunk.push(LayerSpec {
        id,
        kind: LayerKind::Upsample { factor: 2 },
        share_group: None,
    });
    id += 1;
    for d in 1..=10 {
        trunk.push(LayerSpec::conv(id, 3, 64, d, 1, Activation::Relu, Some("refine")));
        id += 1;
    }
    trunk.push(LayerSpec::conv(id, 1, 2, 1, 1, Activation::Linear, None));
    id += 1;
    trunk.push(LayerSpec {
        id,
        kind: LayerKind::Upsample { factor: 2 },
        share_group: None,
    });
    NetworkSpec {
        name: "ddcnet-b1".into(),
        input_channels: 3,
        branch: Vec::new(),
        trunk,
    }
    .with_branch(branch)
}

impl NetworkSpec {
    fn with_branch(mut self, branch: Vec<LayerSpec>) -> Self {
        self.branch = branch;
        self
    }
}

/// A bare trunk over raw concatenated frames with an arbitrary dilation
/// schedule: one 3x3 ReLU layer per entry, then the 1x1 linear head.
pub fn schedule_net(
    dilations: &[usize],
    filters: usize,
    input_channels: usize,
    name: &str,
) -> NetworkSpec {
    let mut trunk = Vec::new();
    let mut id = 1u32;
    for &d in dilations {
        trunk.push(LayerSpec::conv(id, 3, filters, d, 1, Activation::Relu, None));
        id += 1;
    }
    trunk.push(LayerSpec::conv(id, 1, 2, 1, 1, Activation::Linear, None));
    NetworkSpec {
        name: name.into(),
        input_channels,
        branch: Vec::new(),
        trunk,
    }
}

/// Linear dilation schedule of the given depth: layer l has dilation
/// `1 + (l-1)*step` (step 0 gives a conventional undilated stack).
pub fn linear_schedule(depth: usize, step: usize, filters: usize, input_channels: usize) -> NetworkSpec {
    let dil: Vec<usize> = (0..depth).map(|l| 1 + l * step).collect();
    schedule_net(
        &dil,
        filters,
        input_channels,
        &format!("linear-step{step}-L{depth}"),
    )
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

/// All learnable parameters of a net: one [`ConvKernel`] per conv layer
/// id. Shared branch layers appear once and are applied to both frames.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<S> {
    pub kernels: BTreeMap<u32, ConvKernel<S>>,
}

impl<S: Scalar> ParamStore<S> {
    /// Zero-initialized parameters with the geometry the spec demands.
    pub fn zeros_for(net: &NetworkSpec) -> Result<Self> {
        net.validate()?;
        let inputs: BTreeMap<u32, usize> = net.conv_inputs().into_iter().collect();
        let mut kernels = BTreeMap::new();
        for layer in net.layers() {
            if let LayerKind::Conv {
                kernel,
                filters,
                dilation,
                stride,
                ..
            } = layer.kind
            {
                kernels.insert(
                    layer.id,
                    ConvKernel::zeros(kernel.0, kernel.1, inputs[&layer.id], filters, dilation, stride)?,
                );
            }
        }
        Ok(ParamStore { kernels })
    }

    pub fn total_count(&self) -> u64 {
        self.kernels.values().map(|k| k.param_count()).sum()
    }

    /// Checks that the store carries exactly the kernels `net` needs,
    /// with matching geometry.
    pub fn validate_for(&self, net: &NetworkSpec) -> Result<()> {
        let reference = ParamStore::<S>::zeros_for(net)?;
        if self.kernels.len() != reference.kernels.len() {
            return Err(Error::shape(format!(
                "store has {} kernels, net {} wants {}",
                self.kernels.len(),
                net.name,
                reference.kernels.len()
            )));
        }
        for (id, want) in &reference.kernels {
            let got = self
                .kernels
                .get(id)
                .ok_or_else(|| Error::shape(format!("store is missing layer {id}")))?;
            if (got.kh, got.kw, got.c_in, got.c_out) != (want.kh, want.kw, want.c_in, want.c_out)
                || got.dilation != want.dilation
                || got.stride != want.stride
            {
                return Err(Error::shape(format!(
                    "layer {id}: stored kernel geometry does not match the spec"
                )));
            }
        }
        Ok(())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            kernels: self
                .kernels
                .iter()
                .map(|(&id, k)| {
                    (
                        id,
                        ConvKernel {
                            kh: k.kh,
                            kw: k.kw,
                            c_in: k.c_in,
                            c_out: k.c_out,
                            weights: k.weights.iter().map(|&v| T::from_f64_lossy(v.to_f64_lossy())).collect(),
                            bias: k.bias.iter().map(|&v| T::from_f64_lossy(v.to_f64_lossy())).collect(),
                            dilation: k.dilation,
                            stride: k.stride,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Parameter gradients, keyed like the store they were computed for.
#[derive(Debug, Clone)]
pub struct GradStore<S> {
    pub grads: BTreeMap<u32, (Vec<S>, Vec<S>)>, // (d weights, d bias)
}

impl<S: Scalar> GradStore<S> {
    pub fn zeros_like(params: &ParamStore<S>) -> Self {
        GradStore {
            grads: params
                .kernels
                .iter()
                .map(|(&id, k)| (id, (vec![S::zero(); k.weights.len()], vec![S::zero(); k.bias.len()])))
                .collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Forward / backward
// ---------------------------------------------------------------------------

/// Intermediate activations kept by [`forward`] for the backward pass:
/// the input to every layer (the ReLU masks come from the next layer's
/// input, which is the post-activation output).
#[derive(Debug)]
pub struct ActivationCache<S> {
    /// Inputs to each branch layer, per frame. Empty when no cache kept.
    branch_in: [Vec<Tensor4<S>>; 2],
    /// Input to each trunk layer; `trunk_in[0]` is the concat result.
    trunk_in: Vec<Tensor4<S>>,
    /// Final network output (post-head).
    output: Option<Tensor4<S>>,
    kept: bool,
}

impl<S: Scalar> ActivationCache<S> {
    fn empty() -> Self {
        ActivationCache {
            branch_in: [Vec::new(), Vec::new()],
            trunk_in: Vec::new(),
            output: None,
            kept: false,
        }
    }

    pub fn kept(&self) -> bool {
        self.kept
    }
}

fn apply_conv<S: Scalar>(
    params: &ParamStore<S>,
    layer: &LayerSpec,
    x: &Tensor4<S>,
    activation: Activation,
) -> Result<Tensor4<S>> {
    let kernel = params
        .kernels
        .get(&layer.id)
        .ok_or_else(|| Error::usage(format!("no parameters for layer {}", layer.id)))?;
    let mut y = conv2d(x, kernel).map_err(|e| match e {
        Error::Shape(m) => Error::shape(format!("layer {}: {m}", layer.id)),
        other => other,
    })?;
    if activation == Activation::Relu {
        relu_in_place(&mut y);
    }
    Ok(y)
}

/// Runs the network on a batch of frame pairs (NHWC, channels =
/// `input_channels` each). Returns the `(n, h, w, 2)` flow tensor and,
/// when `keep_cache` is set, the activations needed by [`backward`].
pub fn forward<S: Scalar>(
    net: &NetworkSpec,
    params: &ParamStore<S>,
    frame1: &Tensor4<S>,
    frame2: &Tensor4<S>,
    keep_cache: bool,
) -> Result<(Tensor4<S>, ActivationCache<S>)> {
    net.validate()?;
    if frame1.shape() != frame2.shape() {
        return Err(Error::shape(format!(
            "frame shapes differ: {:?} vs {:?}",
            frame1.shape(),
            frame2.shape()
        )));
    }
    let (_, h, w, c) = frame1.shape();
    if c != net.input_channels {
        return Err(Error::shape(format!(
            "net {} expects {} channels per frame, frames have {c}",
            net.name, net.input_channels
        )));
    }
    let div = net.required_divisor();
    if h % div != 0 || w % div != 0 {
        return Err(Error::shape(format!(
            "net {} needs input dims divisible by {div}, got {h}x{w}",
            net.name
        )));
    }

    let mut cache = ActivationCache::empty();
    cache.kept = keep_cache;

    let run_branch = |frame: &Tensor4<S>, slot: usize, cache: &mut ActivationCache<S>| -> Result<Tensor4<S>> {
        let mut x = frame.clone();
        for layer in &net.branch {
            if let LayerKind::Conv { activation, .. } = layer.kind {
                let y = apply_conv(params, layer, &x, activation)?;
                if keep_cache {
                    cache.branch_in[slot].push(std::mem::replace(&mut x, y));
                } else {
                    x = y;
                }
            }
        }
        Ok(x)
    };

    let b1 = run_branch(frame1, 0, &mut cache)?;
    let b2 = run_branch(frame2, 1, &mut cache)?;
    let mut x = concat_channels(&b1, &b2)?;
    drop((b1, b2));

    for layer in &net.trunk {
        let y = match layer.kind {
            LayerKind::Conv { activation, .. } => apply_conv(params, layer, &x, activation)?,
            LayerKind::Upsample { factor } => upsample_nearest(&x, factor)?,
        };
        if keep_cache {
            cache.trunk_in.push(std::mem::replace(&mut x, y));
        } else {
            x = y;
        }
    }
    if keep_cache {
        cache.output = Some(x.clone());
    }
    Ok((x, cache))
}

/// Reverse-mode pass over the whole net. `grad_out` is d loss / d output
/// with the output's shape. Returns parameter gradients (shared branch
/// layers accumulate both frames' contributions) and the gradients with
/// respect to the two input frames.
pub fn backward<S: Scalar>(
    net: &NetworkSpec,
    params: &ParamStore<S>,
    cache: &ActivationCache<S>,
    grad_out: &Tensor4<S>,
) -> Result<(GradStore<S>, Tensor4<S>, Tensor4<S>)> {
    if !cache.kept {
        return Err(Error::usage(
            "backward needs a cache from forward(.., keep_cache = true)",
        ));
    }
    if cache.trunk_in.len() != net.trunk.len()
        || cache.branch_in[0].len() != net.branch.len()
        || cache.branch_in[1].len() != net.branch.len()
    {
        return Err(Error::usage("cache does not belong to this network"));
    }
    let output = cache.output.as_ref().expect("kept cache always has the output");
    if grad_out.shape() != output.shape() {
        return Err(Error::shape(format!(
            "grad_out shape {:?} does not match network output {:?}",
            grad_out.shape(),
            output.shape()
        )));
    }

    let mut grads = GradStore::zeros_like(params);
    let mut g = grad_out.clone();

    // trunk, in reverse
    for (li, layer) in net.trunk.iter().enumerate().rev() {
        match layer.kind {
            LayerKind::Upsample { factor } => {
                g = upsample_nearest_backward(&g, factor)?;
            }
            LayerKind::Conv { activation, .. } => {
                if activation == Activation::Relu {
                    let out = if li + 1 < net.trunk.len() {
                        &cache.trunk_in[li + 1]
                    } else {
                        output
                    };
                    g = relu_backward(out, &g)?;
                }
                let kernel = &params.kernels[&layer.id];
                let cg = conv2d_backward(&cache.trunk_in[li], kernel, &g)?;
                let slot = grads.grads.get_mut(&layer.id).expect("grads cover all layers");
                for (a, b) in slot.0.iter_mut().zip(&cg.weights) {
                    *a += *b;
                }
                for (a, b) in slot.1.iter_mut().zip(&cg.bias) {
                    *a += *b;
                }
                g = cg.input;
            }
        }
    }

    // split the concat gradient back into the two frame paths
    let cb = net.branch_out_channels();
    let (mut g1, mut g2) = split_channels(&g, cb)?;

    // branch, per frame, accumulating into the shared parameter slots
    for (slot_idx, g_frame) in [(0usize, &mut g1), (1usize, &mut g2)] {
        for (li, layer) in net.branch.iter().enumerate().rev() {
            if let LayerKind::Conv { activation, .. } = layer.kind {
                if activation == Activation::Relu {
                    // post-activation output: the next layer's input, or —
                    // for the last branch layer — its half of the concat
                    let last_out;
                    let out = if li + 1 < net.branch.len() {
                        &cache.branch_in[slot_idx][li + 1]
                    } else {
                        let halves = split_channels(&cache.trunk_in[0], cb)?;
                        last_out = if slot_idx == 0 { halves.0 } else { halves.1 };
                        &last_out
                    };
                    *g_frame = relu_backward(out, g_frame)?;
                }
                let kernel = &params.kernels[&layer.id];
                let cg = conv2d_backward(&cache.branch_in[slot_idx][li], kernel, g_frame)?;
                let slot = grads.grads.get_mut(&layer.id).expect("grads cover all layers");
                for (a, b) in slot.0.iter_mut().zip(&cg.weights) {
                    *a += *b;
                }
                for (a, b) in slot.1.iter_mut().zip(&cg.bias) {
                    *a += *b;
                }
                *g_frame = cg.input;
            }
        }
    }

    Ok((grads, g1, g2))
}

// ---------------------------------------------------------------------------
// Text spec format
// ---------------------------------------------------------------------------

/// Parses the plain-text network description format.
///
/// One directive per line; `#` starts a comment; blank lines ignored.
///
/// ```text
/// name my-net
/// input channels=3
/// branch                            # optional shared per-frame section
/// conv k=3 f=64 d=1 s=1 act=relu share=spatial
/// merge concat                      # always required
/// conv k=3 f=64 d=7 s=1 act=relu
/// upsample f=2
/// conv k=1 f=2 act=linear
/// ```
///
/// `k`, `d` and `s` accept `3` or `3x3`; `d` and `s` default to 1 and
/// `act` to `relu`.
pub fn parse_spec_text(text: &str) -> Result<NetworkSpec> {
    let mut name = String::from("custom");
    let mut input_channels: Option<usize> = None;
    let mut in_branch = false;
    let mut merged = false;
    let mut branch = Vec::new();
    let mut trunk = Vec::new();
    let mut next_id = 1u32;

    let perr = |line: usize, msg: String| Error::Parse { line, msg };

    for (lineno, raw) in text.lines().enumerate() {
        let line = lineno + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let mut tokens = content.split_whitespace();
        let directive = tokens.next().unwrap();
        match directive {
            "name" => {
                name = tokens
                    .next()
                    .ok_or_else(|| perr(line, "name needs a value".into()))?
                    .to_string();
            }
            "input" => {
                let kv = tokens
                    .next()
                    .ok_or_else(|| perr(line, "expected channels=N".into()))?;
                let v = kv
                    .strip_prefix("channels=")
                    .ok_or_else(|| perr(line, format!("unknown input attribute '{kv}'")))?;
                input_channels = Some(
                    v.parse::<usize>()
                        .map_err(|_| perr(line, format!("bad channel count '{v}'")))?,
                );
            }
            "branch" => {
                if merged || !trunk.is_empty() || !branch.is_empty() {
                    return Err(perr(line, "branch must come before any layers".into()));
                }
                in_branch = true;
            }
            "merge" => {
                match tokens.next() {
                    Some("concat") => {}
                    other => {
                        return Err(perr(
                            line,
                            format!("only 'merge concat' is supported, got '{}'", other.unwrap_or("")),
                        ))
                    }
                }
                if merged {
                    return Err(perr(line, "duplicate merge directive".into()));
                }
                merged = true;
                in_branch = false;
            }
            "conv" => {
                let mut k = None;
                let mut f = None;
                let mut d = (1usize, 1usize);
                let mut s = (1usize, 1usize);
                let mut act = Activation::Relu;
                let mut share = None;
                for tok in tokens {
                    let (key, val) = tok
                        .split_once('=')
                        .ok_or_else(|| perr(line, format!("expected key=value, got '{tok}'")))?;
                    match key {
                        "k" => k = Some(parse_pair(val).map_err(|m| perr(line, m))?),
                        "d" => d = parse_pair(val).map_err(|m| perr(line, m))?,
                        "s" => s = parse_pair(val).map_err(|m| perr(line, m))?,
                        "f" => {
                            f = Some(val.parse::<usize>().map_err(|_| {
                                perr(line, format!("bad filter count '{val}'"))
                            })?)
                        }
                        "act" => {
                            act = match val {
                                "relu" => Activation::Relu,
                                "linear" => Activation::Linear,
                                other => {
                                    return Err(perr(line, format!("unknown activation '{other}'")))
                                }
                            }
                        }
                        "share" => share = Some(val.to_string()),
                        other => return Err(perr(line, format!("unknown conv attribute '{other}'"))),
                    }
                }
                let k = k.ok_or_else(|| perr(line, "conv needs k=".into()))?;
                let f = f.ok_or_else(|| perr(line, "conv needs f=".into()))?;
                let layer = LayerSpec {
                    id: next_id,
                    kind: LayerKind::Conv {
                        kernel: k,
                        filters: f,
                        dilation: d,
                        stride: s,
                        activation: act,
                    },
                    share_group: share,
                };
                next_id += 1;
                if in_branch {
                    branch.push(layer);
                } else if merged {
                    trunk.push(layer);
                } else {
                    return Err(perr(line, "layers must follow 'merge concat' (or a 'branch' section)".into()));
                }
            }
            "upsample" => {
                let kv = tokens
                    .next()
                    .ok_or_else(|| perr(line, "upsample needs f=N".into()))?;
                let v = kv
                    .strip_prefix("f=")
                    .ok_or_else(|| perr(line, format!("unknown upsample attribute '{kv}'")))?;
                let factor = v
                    .parse::<usize>()
                    .map_err(|_| perr(line, format!("bad upsample factor '{v}'")))?;
                if in_branch {
                    return Err(perr(line, "upsample is not allowed in the branch".into()));
                }
                if !merged {
                    return Err(perr(line, "layers must follow 'merge concat'".into()));
                }
                trunk.push(LayerSpec {
                    id: next_id,
                    kind: LayerKind::Upsample { factor },
                    share_group: None,
                });
                next_id += 1;
            }
            other => return Err(perr(line, format!("unknown directive '{other}'"))),
        }
    }

    let input_channels =
        input_channels.ok_or_else(|| perr(0, "missing 'input channels=N' line".into()))?;
    if !merged {
        return Err(perr(0, "missing 'merge concat' line".into()));
    }
    let net = NetworkSpec {
        name,
        input_channels,
        branch,
        trunk,
    };
    net.validate()?;
    Ok(net)
}

fn parse_pair(val: &str) -> std::result::Result<(usize, usize), String> {
    if let Some((a, b)) = val.split_once('x') {
        let a = a.parse::<usize>().map_err(|_| format!("bad value '{val}'"))?;
        let b = b.parse::<usize>().map_err(|_| format!("bad value '{val}'"))?;
        Ok((a, b))
    } else {
        let v = val.parse::<usize>().map_err(|_| format!("bad value '{val}'"))?;
        Ok((v, v))
    }
}

/// Writes a spec in the format [`parse_spec_text`] reads.
pub fn spec_to_text(net: &NetworkSpec) -> String {
    let mut out = String::new();
    let fmt_pair = |(a, b): (usize, usize)| {
        if a == b {
            format!("{a}")
        } else {
            format!("{a}x{b}")
        }
    };
    out.push_str(&format!("name {}\n", net.name));
    out.push_str(&format!("input channels={}\n", net.input_channels));
    let emit = |layer: &LayerSpec, out: &mut String| match &layer.kind {
        LayerKind::Conv {
            kernel,
            filters,
            dilation,
            stride,
            activation,
        } => {
            out.push_str(&format!(
                "conv k={} f={} d={} s={} act={}",
                fmt_pair(*kernel),
                filters,
                fmt_pair(*dilation),
                fmt_pair(*stride),
                match activation {
                    Activation::Relu => "relu",
                    Activation::Linear => "linear",
                }
            ));
            if let Some(sh) = &layer.share_group {
                out.push_str(&format!(" share={sh}"));
            }
            out.push('\n');
        }
        LayerKind::Upsample { factor } => {
            out.push_str(&format!("upsample f={factor}\n"));
        }
    };
    if !net.branch.is_empty() {
        out.push_str("branch\n");
        for layer in &net.branch {
            emit(layer, &mut out);
        }
    }
    out.push_str("merge concat\n");
    for layer in &net.trunk {
        emit(layer, &mut out);
    }
    out
}

/// Reads and validates a spec file; `b0`, `b1` and `linear:<L>:<step>`
/// are accepted as built-in names by the CLI rather than here.
pub fn load_spec_file(path: &Path) -> Result<NetworkSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_spec_text(&text)
}

pub fn save_spec_file(net: &NetworkSpec, path: &Path) -> Result<()> {
    crate::io::atomic_write(path, spec_to_text(net).as_bytes())
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"DDCP";
const CKPT_VERSION: u32 = 1;

impl<S: Scalar> ParamStore<S> {
    /// Serializes the store: magic `DDCP`, format version, a kernel
    /// table (id + geometry), then all weights and biases as f32
    /// little-endian in table order.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CKPT_MAGIC);
        buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.kernels.len() as u32).to_le_bytes());
        for (&id, k) in &self.kernels {
            for v in [
                id,
                k.kh as u32,
                k.kw as u32,
                k.c_in as u32,
                k.c_out as u32,
                k.dilation.0 as u32,
                k.dilation.1 as u32,
                k.stride.0 as u32,
                k.stride.1 as u32,
            ] {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for k in self.kernels.values() {
            for v in &k.weights {
                buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
            for v in &k.bias {
                buf.extend_from_slice(&(v.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        crate::io::atomic_write(path, &buf)
    }

    /// Reads a checkpoint written by [`ParamStore::save`]. Malformed
    /// data is reported with the byte offset it was found at.
    pub fn load(path: &Path) -> Result<Self> {
        let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut buf = Vec::new();
        file.read_to_end(&mut buf).map_err(|e| Error::io(path, e))?;
        let bad = |offset: usize, msg: &str| Error::BadData {
            path: path.to_path_buf(),
            offset: offset as u64,
            msg: msg.to_string(),
        };
        let take = |off: &mut usize, n: usize| -> Result<&[u8]> {
            if *off + n > buf.len() {
                return Err(bad(buf.len(), "file truncated"));
            }
            let s = &buf[*off..*off + n];
            *off += n;
            Ok(s)
        };
        let mut off = 0usize;
        if take(&mut off, 4)? != CKPT_MAGIC {
            return Err(bad(0, "bad magic, not a checkpoint file"));
        }
        let ver = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
        if ver != CKPT_VERSION {
            return Err(bad(4, "unsupported checkpoint version"));
        }
        let count = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap()) as usize;
        let mut table = Vec::with_capacity(count);
        for _ in 0..count {
            let entry_off = off;
            let mut vals = [0u32; 9];
            for v in vals.iter_mut() {
                *v = u32::from_le_bytes(take(&mut off, 4)?.try_into().unwrap());
            }
            let [id, kh, kw, cin, cout, dy, dx, sy, sx] = vals;
            if kh % 2 == 0 || kw % 2 == 0 || kh == 0 || cin == 0 || cout == 0 || dy == 0 || sy == 0 || dx == 0 || sx == 0 {
                return Err(bad(entry_off, "invalid kernel geometry in table"));
            }
            table.push((id, kh as usize, kw as usize, cin as usize, cout as usize, (dy as usize, dx as usize), (sy as usize, sx as usize)));
        }
        let mut kernels = BTreeMap::new();
        for (id, kh, kw, cin, cout, dil, stride) in table {
            let wlen = kh * kw * cin * cout;
            let mut kernel = ConvKernel::<S>::zeros(kh, kw, cin, cout, dil, stride)?;
            for i in 0..wlen {
                let b = take(&mut off, 4)?;
                kernel.weights[i] = S::from_f64_lossy(f32::from_le_bytes(b.try_into().unwrap()) as f64);
            }
            for i in 0..cout {
                let b = take(&mut off, 4)?;
                kernel.bias[i] = S::from_f64_lossy(f32::from_le_bytes(b.try_into().unwrap()) as f64);
            }
            if kernels.insert(id, kernel).is_some() {
                return Err(bad(off, "duplicate layer id in checkpoint"));
            }
        }
        if off != buf.len() {
            return Err(bad(off, "trailing bytes after checkpoint payload"));
        }
        Ok(ParamStore { kernels })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn b0_has_the_documented_size() {
        let net = ddcnet_b0();
        net.validate().unwrap();
        assert_eq!(net.conv_layer_count(), 30);
        assert_eq!(net.spec_len(), 30);
        // 3*3*6*64+64 for the first layer, 28 inner 64->64 layers, 1x1 head
        assert_eq!(net.param_count(), 1_037_634);
        assert_eq!(net.theoretical_rf(), 695);
        assert_eq!(net.required_divisor(), 1);
        let dil: Vec<usize> = net.dilations().iter().map(|&(_, d)| d).collect();
        let mut want: Vec<usize> = (1..=25).collect();
        want.extend_from_slice(&[12, 6, 3, 1, 1]);
        assert_eq!(dil, want);
    }

    #[test]
    fn b1_has_the_documented_size() {
        let net = ddcnet_b1();
        net.validate().unwrap();
        assert_eq!(net.conv_layer_count(), 29);
        assert_eq!(net.spec_len(), 31);
        assert_eq!(net.param_count(), 2_695_682);
        assert_eq!(net.required_divisor(), 4);
        // receptive field by the jump recursion:
        // branch 12, stride-2 pair 2+8, 13 layers at jump 4 with
        // d = 4,6,..,28 -> 8*208, refiner at jump 2 -> 4*55
        assert_eq!(net.theoretical_rf(), 1907);
    }

    #[test]
    fn b1_runs_at_quarter_resolution_then_restores() {
        let net = ddcnet_b1();
        let dims = net.layer_dims(64, 64);
        // after the 15-layer flow extractor (last id 18): 16x16
        let at = |id: u32| dims.iter().find(|d| d.0 == id).copied().unwrap();
        assert_eq!(at(18), (18, 16, 16, 128));
        assert_eq!(at(19), (19, 32, 32, 128)); // upsample
        let last = dims.last().unwrap();
        assert_eq!((last.1, last.2, last.3), (64, 64, 2));
    }

    #[test]
    fn linear_schedule_dilations_and_rf() {
        let net = linear_schedule(30, 1, 64, 3);
        let dil: Vec<usize> = net.dilations().iter().map(|&(_, d)| d).collect();
        let mut want: Vec<usize> = (1..=30).collect();
        want.push(1); // head
        assert_eq!(dil, want);
        // closed form: 1 + 2*sum(1..L) = 1 + L(L+1)
        assert_eq!(net.theoretical_rf(), 1 + 30 * 31);
        let undilated = linear_schedule(30, 0, 64, 3);
        assert_eq!(undilated.theoretical_rf(), 61); // 2L+1
        let single = linear_schedule(1, 1, 8, 3);
        assert_eq!(single.theoretical_rf(), 3);
    }

    #[test]
    fn exponential_rf_closed_form() {
        let dil: Vec<usize> = (0..5).map(|i| 1usize << i).collect();
        let net = schedule_net(&dil, 8, 3, "exp");
        assert_eq!(net.theoretical_rf(), 1 + 2 * (32 - 1)); // 1+2(2^L-1)
    }

    #[test]
    fn param_count_doubles_quadratically_with_filters() {
        // interior layers dominate; doubling filters must roughly 4x them
        let small = linear_schedule(10, 1, 32, 3).param_count();
        let big = linear_schedule(10, 1, 64, 3).param_count();
        assert!(big > 3 * small && big < 4 * small + 10_000);
        // strictly monotone
        assert!(
            linear_schedule(10, 1, 33, 3).param_count() > small,
            "param count must grow with filters"
        );
    }

    #[test]
    fn forward_zero_params_outputs_zero_flow() {
        let net = linear_schedule(3, 1, 4, 3);
        let params = ParamStore::<f32>::zeros_for(&net).unwrap();
        let f1 = Tensor4::filled(1, 12, 10, 3, 0.7).unwrap();
        let f2 = Tensor4::filled(1, 12, 10, 3, 0.4).unwrap();
        let (y, cache) = forward(&net, &params, &f1, &f2, false).unwrap();
        assert_eq!(y.shape(), (1, 12, 10, 2));
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(!cache.kept());
    }

    #[test]
    fn forward_rejects_wrong_channels_and_indivisible_dims() {
        let net = ddcnet_b1();
        let params = ParamStore::<f32>::zeros_for(&net).unwrap();
        let f = Tensor4::<f32>::zeros(1, 66, 64, 3).unwrap(); // 66 % 4 != 0
        let err = forward(&net, &params, &f, &f, false).unwrap_err();
        assert!(err.to_string().contains("divisible by 4"), "got: {err}");

        let small = linear_schedule(2, 1, 4, 3);
        let p = ParamStore::<f32>::zeros_for(&small).unwrap();
        let bad = Tensor4::<f32>::zeros(1, 8, 8, 5).unwrap();
        assert!(forward(&small, &p, &bad, &bad, false).is_err());
    }

    #[test]
    fn backward_without_cache_is_a_usage_error() {
        let net = linear_schedule(2, 1, 4, 3);
        let params = ParamStore::<f32>::zeros_for(&net).unwrap();
        let f = Tensor4::<f32>::zeros(1, 8, 8, 3).unwrap();
        let (y, cache) = forward(&net, &params, &f, &f, false).unwrap();
        let g = Tensor4::<f32>::zeros(1, 8, 8, 2).unwrap();
        let err = backward(&net, &params, &cache, &g).unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
        drop(y);
    }

    #[test]
    fn spec_text_round_trips() {
        for net in [ddcnet_b0(), ddcnet_b1(), linear_schedule(4, 2, 8, 3)] {
            let text = spec_to_text(&net);
            let back = parse_spec_text(&text).unwrap();
            assert_eq!(back, net, "round trip failed for {}", net.name);
        }
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "input channels=3\nmerge concat\nconv k=3 f=64 d=zero\nconv k=1 f=2 act=linear\n";
        match parse_spec_text(text) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 3);
                assert!(msg.contains("zero"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn parse_rejects_missing_head() {
        let text = "input channels=3\nmerge concat\nconv k=3 f=64\n";
        assert!(parse_spec_text(text).is_err());
    }

    #[test]
    fn checkpoint_round_trips_and_rejects_corruption() {
        use rand::{Rng, SeedableRng};
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ddcp");
        let net = linear_schedule(3, 1, 4, 3);
        let mut params = ParamStore::<f32>::zeros_for(&net).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for k in params.kernels.values_mut() {
            for v in k.weights.iter_mut() {
                *v = rng.gen_range(-1.0f32..1.0);
            }
            for v in k.bias.iter_mut() {
                *v = rng.gen_range(-1.0f32..1.0);
            }
        }
        params.save(&path).unwrap();
        let back = ParamStore::<f32>::load(&path).unwrap();
        assert_eq!(back, params, "checkpoints must round-trip bitwise at f32");
        back.validate_for(&net).unwrap();

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        let bad_path = dir.path().join("bad.ddcp");
        std::fs::write(&bad_path, &bytes).unwrap();
        match ParamStore::<f32>::load(&bad_path) {
            Err(Error::BadData { offset, msg, .. }) => {
                assert_eq!(offset, 0);
                assert!(msg.contains("magic"));
            }
            other => panic!("expected BadData, got {other:?}"),
        }

        let truncated = std::fs::read(&path).unwrap();
        let trunc_path = dir.path().join("trunc.ddcp");
        std::fs::write(&trunc_path, &truncated[..truncated.len() - 3]).unwrap();
        assert!(matches!(
            ParamStore::<f32>::load(&trunc_path),
            Err(Error::BadData { .. })
        ));
    }
}
