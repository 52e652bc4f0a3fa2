//! The conversion networks: encoder-decoder generator with self-attention
//! and skip connections, spectrally normalized discriminator, and the Siamese
//! encoder used by the transformation-vector constraint.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::TensorError;
use crate::tensorcore::{Element, Padding, Param, Tape, TensorData, Var};

pub const SEGMENT_BANDS: usize = 128;
pub const SEGMENT_FRAMES: usize = 12;
pub const ATTN_POSITIONS: usize = SEGMENT_BANDS * SEGMENT_FRAMES; // 1536
pub const EMBEDDING_DIM: usize = 128;
pub const LEAKY_ALPHA: f64 = 0.2;
pub const WEIGHT_INIT_STD: f64 = 0.02;

fn init_tensor<T: Element, R: Rng>(rng: &mut R, shape: Vec<usize>) -> TensorData<T> {
    let normal = Normal::new(0.0f64, WEIGHT_INIT_STD).unwrap();
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::cast_from(normal.sample(rng))).collect();
    TensorData::new(shape, data)
}

#[derive(Clone, Debug)]
pub struct ConvLayer<T> {
    pub w: Param<T>,
    pub b: Param<T>,
}

impl<T: Element> ConvLayer<T> {
    fn init<R: Rng>(rng: &mut R, name: &str, shape: [usize; 4], bias_ch: usize) -> Self {
        ConvLayer {
            w: Param::new(format!("{name}.w"), init_tensor(rng, shape.to_vec())),
            b: Param::new(format!("{name}.b"), TensorData::zeros(vec![bias_ch])),
        }
    }
}

#[derive(Clone, Copy)]
pub struct BoundConv {
    pub w: Var,
    pub b: Var,
}

fn bind<T: Element>(tape: &Tape<T>, layer: &ConvLayer<T>) -> BoundConv {
    BoundConv {
        w: tape.leaf(layer.w.value.clone()),
        b: tape.leaf(layer.b.value.clone()),
    }
}

fn conv_block<T: Element>(
    tape: &Tape<T>,
    x: Var,
    layer: BoundConv,
    stride: (usize, usize),
    padding: Padding,
    stage: &str,
) -> Result<Var, TensorError> {
    let y = tape
        .conv2d(x, layer.w, stride, padding)
        .map_err(|e| TensorError::Shape(format!("{stage}: {e}")))?;
    tape.add_bias_channel(y, layer.b)
}

// ---------------------------------------------------------------------------
// Self-attention
// ---------------------------------------------------------------------------

/// 1x1-conv attention over the full 1536-position grid of a segment.
#[derive(Clone, Debug)]
pub struct AttentionParams<T> {
    pub w_f: Param<T>,
    pub w_g: Param<T>,
    pub w_h: Param<T>,
    pub w_o: Param<T>,
    pub gamma: Param<T>,
}

impl<T: Element> AttentionParams<T> {
    pub fn init<R: Rng>(rng: &mut R, prefix: &str) -> Self {
        AttentionParams {
            w_f: Param::new(format!("{prefix}.w_f"), init_tensor(rng, vec![16, 64, 1, 1])),
            w_g: Param::new(format!("{prefix}.w_g"), init_tensor(rng, vec![16, 64, 1, 1])),
            w_h: Param::new(format!("{prefix}.w_h"), init_tensor(rng, vec![128, 64, 1, 1])),
            w_o: Param::new(format!("{prefix}.w_o"), init_tensor(rng, vec![64, 128, 1, 1])),
            // Residual gate starts closed: attention fades in as gamma learns.
            gamma: Param::new(format!("{prefix}.gamma"), TensorData::zeros(vec![1])),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![&self.w_f, &self.w_g, &self.w_h, &self.w_o, &self.gamma]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.w_f,
            &mut self.w_g,
            &mut self.w_h,
            &mut self.w_o,
            &mut self.gamma,
        ]
    }
}

pub struct BoundAttention {
    w_f: Var,
    w_g: Var,
    w_h: Var,
    w_o: Var,
    gamma: Var,
}

/// Forward pass; optionally returns the attention map `(N, 1536, 1536)`.
pub fn attention_forward<T: Element>(
    tape: &Tape<T>,
    vars: &BoundAttention,
    x: Var,
    keep_map: bool,
) -> Result<(Var, Option<Var>), TensorError> {
    let shape = tape.shape(x);
    if shape.len() != 4 || shape[1] != 64 || shape[2] != SEGMENT_BANDS || shape[3] != SEGMENT_FRAMES
    {
        return Err(TensorError::Shape(format!(
            "attention expects (N, 64, {SEGMENT_BANDS}, {SEGMENT_FRAMES}), got {shape:?}"
        )));
    }
    let n = shape[0];
    let one = (1, 1);
    let f = tape.conv2d(x, vars.w_f, one, Padding::Same)?;
    let g = tape.conv2d(x, vars.w_g, one, Padding::Same)?;
    let h = tape.conv2d(x, vars.w_h, one, Padding::Same)?;
    let f = tape.reshape(f, vec![n, 16, ATTN_POSITIONS])?;
    let g = tape.reshape(g, vec![n, 16, ATTN_POSITIONS])?;
    let h = tape.reshape(h, vec![n, 128, ATTN_POSITIONS])?;
    // beta[i, j] = softmax_j(f^T g); rows are queries.
    let beta = tape.bmm_softmax(f, g, true, false)?;
    // o[c, i] = sum_j h[c, j] beta[i, j], kept channel-major for the 1x1 conv.
    let o = tape.bmm(h, beta, false, true)?;
    let o = tape.reshape(o, vec![n, 128, SEGMENT_BANDS, SEGMENT_FRAMES])?;
    let o = tape.conv2d(o, vars.w_o, one, Padding::Same)?;
    let out = tape.add(x, tape.scale_by(o, vars.gamma));
    Ok((out, keep_map.then_some(beta)))
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct GeneratorParams<T> {
    pub enc_conv1: ConvLayer<T>,
    pub attention: AttentionParams<T>,
    pub down1: ConvLayer<T>,
    pub down2: ConvLayer<T>,
    pub down3: ConvLayer<T>,
    pub up1: ConvLayer<T>,
    pub up2: ConvLayer<T>,
    pub up3: ConvLayer<T>,
}

impl<T: Element> GeneratorParams<T> {
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        GeneratorParams {
            enc_conv1: ConvLayer::init(rng, "g.enc_conv1", [64, 1, 3, 3], 64),
            attention: AttentionParams::init(rng, "g.attn"),
            down1: ConvLayer::init(rng, "g.down1", [256, 64, 128, 3], 256),
            down2: ConvLayer::init(rng, "g.down2", [256, 256, 1, 9], 256),
            down3: ConvLayer::init(rng, "g.down3", [256, 256, 1, 7], 256),
            // Transposed weights are (c_in, c_out, kh, kw).
            up1: ConvLayer::init(rng, "g.up1", [256, 256, 1, 7], 256),
            up2: ConvLayer::init(rng, "g.up2", [512, 256, 1, 9], 256),
            up3: ConvLayer::init(rng, "g.up3", [512, 1, 128, 1], 1),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut out = vec![&self.enc_conv1.w, &self.enc_conv1.b];
        out.extend(self.attention.params());
        for l in [&self.down1, &self.down2, &self.down3, &self.up1, &self.up2, &self.up3] {
            out.push(&l.w);
            out.push(&l.b);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut out = vec![&mut self.enc_conv1.w, &mut self.enc_conv1.b];
        out.extend(self.attention.params_mut());
        for l in [
            &mut self.down1,
            &mut self.down2,
            &mut self.down3,
            &mut self.up1,
            &mut self.up2,
            &mut self.up3,
        ] {
            out.push(&mut l.w);
            out.push(&mut l.b);
        }
        out
    }

    /// Create the tape leaves once; repeated forwards on the same tape reuse
    /// them so gradients accumulate on a single set of parameter nodes.
    pub fn bind(&self, tape: &Tape<T>) -> BoundGenerator {
        BoundGenerator {
            enc_conv1: bind(tape, &self.enc_conv1),
            attention: BoundAttention {
                w_f: tape.leaf(self.attention.w_f.value.clone()),
                w_g: tape.leaf(self.attention.w_g.value.clone()),
                w_h: tape.leaf(self.attention.w_h.value.clone()),
                w_o: tape.leaf(self.attention.w_o.value.clone()),
                gamma: tape.leaf(self.attention.gamma.value.clone()),
            },
            down1: bind(tape, &self.down1),
            down2: bind(tape, &self.down2),
            down3: bind(tape, &self.down3),
            up1: bind(tape, &self.up1),
            up2: bind(tape, &self.up2),
            up3: bind(tape, &self.up3),
        }
    }

    /// Leaf vars in the same order as `params()`.
    pub fn leaf_vars(bound: &BoundGenerator) -> Vec<Var> {
        let a = &bound.attention;
        let mut out = vec![bound.enc_conv1.w, bound.enc_conv1.b];
        out.extend([a.w_f, a.w_g, a.w_h, a.w_o, a.gamma]);
        for l in [bound.down1, bound.down2, bound.down3, bound.up1, bound.up2, bound.up3] {
            out.push(l.w);
            out.push(l.b);
        }
        out
    }
}

pub struct BoundGenerator {
    pub enc_conv1: BoundConv,
    pub attention: BoundAttention,
    pub down1: BoundConv,
    pub down2: BoundConv,
    pub down3: BoundConv,
    pub up1: BoundConv,
    pub up2: BoundConv,
    pub up3: BoundConv,
}

/// Per-layer activation shapes of a traced generator forward.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratorTrace {
    pub rows: Vec<(&'static str, Vec<usize>)>,
}

pub fn generator_forward<T: Element>(
    tape: &Tape<T>,
    vars: &BoundGenerator,
    x: Var,
) -> Result<Var, TensorError> {
    Ok(generator_forward_traced(tape, vars, x)?.0)
}

/// Forward pass recording every intermediate shape.
pub fn generator_forward_traced<T: Element>(
    tape: &Tape<T>,
    vars: &BoundGenerator,
    x: Var,
) -> Result<(Var, GeneratorTrace), TensorError> {
    let shape = tape.shape(x);
    if shape.len() != 4 || shape[1] != 1 || shape[2] != SEGMENT_BANDS || shape[3] != SEGMENT_FRAMES
    {
        return Err(TensorError::Shape(format!(
            "generator input must be (N, 1, {SEGMENT_BANDS}, {SEGMENT_FRAMES}), got {shape:?}"
        )));
    }
    let alpha = T::cast_from(LEAKY_ALPHA);
    let mut rows: Vec<(&'static str, Vec<usize>)> = vec![("input", shape)];

    let c1 = conv_block(tape, x, vars.enc_conv1, (1, 1), Padding::Same, "enc_conv1")?;
    let c1 = tape.leaky_relu(c1, alpha);
    rows.push(("enc_conv1", tape.shape(c1)));

    let (attn, _) = attention_forward(tape, &vars.attention, c1, false)?;
    rows.push(("enc_self_attention", tape.shape(attn)));

    let padded = tape.pad2d(attn, (0, 0, 1, 1))?;
    rows.push(("enc_padding", tape.shape(padded)));

    let d1 = conv_block(tape, padded, vars.down1, (1, 1), Padding::Valid, "down1")?;
    let d1 = tape.leaky_relu(d1, alpha);
    rows.push(("enc_down1", tape.shape(d1)));

    let d2 = conv_block(tape, d1, vars.down2, (1, 2), Padding::Same, "down2")?;
    let d2 = tape.leaky_relu(d2, alpha);
    rows.push(("enc_down2", tape.shape(d2)));

    let d3 = conv_block(tape, d2, vars.down3, (1, 2), Padding::Same, "down3")?;
    let d3 = tape.leaky_relu(d3, alpha);
    rows.push(("enc_down3", tape.shape(d3)));

    // Decoder: each upsample output is concatenated with the matching
    // encoder activation on the channel axis (skip connection).
    let u1 = tape
        .conv2d_transpose(d3, vars.up1.w, (1, 2))
        .map_err(|e| TensorError::Shape(format!("up1: {e}")))?;
    let u1 = tape.add_bias_channel(u1, vars.up1.b)?;
    let u1 = tape.leaky_relu(u1, alpha);
    let u1 = tape.concat_channels(u1, d2)?;
    rows.push(("dec_up1", tape.shape(u1)));

    let u2 = tape
        .conv2d_transpose(u1, vars.up2.w, (1, 2))
        .map_err(|e| TensorError::Shape(format!("up2: {e}")))?;
    let u2 = tape.add_bias_channel(u2, vars.up2.b)?;
    let u2 = tape.leaky_relu(u2, alpha);
    let u2 = tape.concat_channels(u2, d1)?;
    rows.push(("dec_up2", tape.shape(u2)));

    let u3 = tape
        .conv2d_transpose(u2, vars.up3.w, (128, 1))
        .map_err(|e| TensorError::Shape(format!("up3: {e}")))?;
    let u3 = tape.add_bias_channel(u3, vars.up3.b)?;
    let out = tape.tanh(u3);
    rows.push(("dec_up3", tape.shape(out)));

    Ok((out, GeneratorTrace { rows }))
}

// ---------------------------------------------------------------------------
// Discriminator
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DiscriminatorParams<T> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    pub conv3: ConvLayer<T>,
    pub conv4: ConvLayer<T>,
    pub fc_w: Param<T>,
    pub fc_b: Param<T>,
}

impl<T: Element> DiscriminatorParams<T> {
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        DiscriminatorParams {
            conv1: ConvLayer::init(rng, "d.conv1", [64, 1, 3, 3], 64),
            conv2: ConvLayer::init(rng, "d.conv2", [128, 64, 3, 3], 128),
            conv3: ConvLayer::init(rng, "d.conv3", [256, 128, 3, 3], 256),
            conv4: ConvLayer::init(rng, "d.conv4", [512, 256, 3, 3], 512),
            fc_w: Param::new("d.fc.w", init_tensor(rng, vec![512 * 8, 1])),
            fc_b: Param::new("d.fc.b", TensorData::zeros(vec![1])),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.conv1.w,
            &self.conv1.b,
            &self.conv2.w,
            &self.conv2.b,
            &self.conv3.w,
            &self.conv3.b,
            &self.conv4.w,
            &self.conv4.b,
            &self.fc_w,
            &self.fc_b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.conv1.w,
            &mut self.conv1.b,
            &mut self.conv2.w,
            &mut self.conv2.b,
            &mut self.conv3.w,
            &mut self.conv3.b,
            &mut self.conv4.w,
            &mut self.conv4.b,
            &mut self.fc_w,
            &mut self.fc_b,
        ]
    }

    /// Bind leaves and apply spectral normalization to the conv weights.
    /// The persisted `u` estimates advance only when `update_u` is set.
    pub fn bind(&mut self, tape: &Tape<T>, power_iters: usize, update_u: bool) -> BoundDiscriminator {
        let norm_conv = |layer: &mut ConvLayer<T>| {
            let raw = tape.leaf(layer.w.value.clone());
            let u = layer.sn_u_mut();
            let w = tape.spectral_normalize(raw, u, power_iters, update_u);
            (
                BoundConv {
                    w,
                    b: tape.leaf(layer.b.value.clone()),
                },
                raw,
            )
        };
        let (conv1, r1) = norm_conv(&mut self.conv1);
        let (conv2, r2) = norm_conv(&mut self.conv2);
        let (conv3, r3) = norm_conv(&mut self.conv3);
        let (conv4, r4) = norm_conv(&mut self.conv4);
        BoundDiscriminator {
            conv1,
            conv2,
            conv3,
            conv4,
            raw_weights: [r1, r2, r3, r4],
            fc_w: tape.leaf(self.fc_w.value.clone()),
            fc_b: tape.leaf(self.fc_b.value.clone()),
        }
    }

    /// Leaf vars in the same order as `params()` (raw, pre-normalization).
    pub fn leaf_vars(bound: &BoundDiscriminator) -> Vec<Var> {
        vec![
            bound.raw_weights[0],
            bound.conv1.b,
            bound.raw_weights[1],
            bound.conv2.b,
            bound.raw_weights[2],
            bound.conv3.b,
            bound.raw_weights[3],
            bound.conv4.b,
            bound.fc_w,
            bound.fc_b,
        ]
    }
}

impl<T: Element> ConvLayer<T> {
    fn sn_u_mut(&mut self) -> &mut Vec<T> {
        self.w.sn_u.get_or_insert_with(Vec::new)
    }
}

pub struct BoundDiscriminator {
    pub conv1: BoundConv,
    pub conv2: BoundConv,
    pub conv3: BoundConv,
    pub conv4: BoundConv,
    raw_weights: [Var; 4],
    pub fc_w: Var,
    pub fc_b: Var,
}

/// Score per segment: `(N,)` reals, higher means "more real".
pub fn discriminator_forward<T: Element>(
    tape: &Tape<T>,
    vars: &BoundDiscriminator,
    x: Var,
) -> Result<Var, TensorError> {
    let shape = tape.shape(x);
    if shape.len() != 4 || shape[1] != 1 || shape[2] != SEGMENT_BANDS || shape[3] != SEGMENT_FRAMES
    {
        return Err(TensorError::Shape(format!(
            "discriminator input must be (N, 1, {SEGMENT_BANDS}, {SEGMENT_FRAMES}), got {shape:?}"
        )));
    }
    let n = shape[0];
    let alpha = T::cast_from(LEAKY_ALPHA);
    let s2 = (2, 2);
    let mut h = x;
    for (layer, stage) in [
        (vars.conv1, "d.conv1"),
        (vars.conv2, "d.conv2"),
        (vars.conv3, "d.conv3"),
        (vars.conv4, "d.conv4"),
    ] {
        h = conv_block(tape, h, layer, s2, Padding::Same, stage)?;
        h = tape.leaky_relu(h, alpha);
    }
    let flat = tape.reshape(h, vec![n, 512 * 8])?;
    let score = tape.matmul(flat, vars.fc_w)?;
    let score = tape.add_bias_last(score, vars.fc_b)?;
    tape.reshape(score, vec![n])
}

// ---------------------------------------------------------------------------
// Siamese encoder
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SiameseParams<T> {
    pub conv1: ConvLayer<T>,
    pub conv2: ConvLayer<T>,
    pub conv3: ConvLayer<T>,
    pub fc_w: Param<T>,
    pub fc_b: Param<T>,
}

impl<T: Element> SiameseParams<T> {
    pub fn init<R: Rng>(rng: &mut R) -> Self {
        SiameseParams {
            conv1: ConvLayer::init(rng, "s.conv1", [32, 1, 3, 3], 32),
            conv2: ConvLayer::init(rng, "s.conv2", [64, 32, 3, 3], 64),
            conv3: ConvLayer::init(rng, "s.conv3", [128, 64, 3, 3], 128),
            fc_w: Param::new("s.fc.w", init_tensor(rng, vec![128 * 16 * 2, EMBEDDING_DIM])),
            fc_b: Param::new("s.fc.b", TensorData::zeros(vec![EMBEDDING_DIM])),
        }
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        vec![
            &self.conv1.w,
            &self.conv1.b,
            &self.conv2.w,
            &self.conv2.b,
            &self.conv3.w,
            &self.conv3.b,
            &self.fc_w,
            &self.fc_b,
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        vec![
            &mut self.conv1.w,
            &mut self.conv1.b,
            &mut self.conv2.w,
            &mut self.conv2.b,
            &mut self.conv3.w,
            &mut self.conv3.b,
            &mut self.fc_w,
            &mut self.fc_b,
        ]
    }

    pub fn bind(&self, tape: &Tape<T>) -> BoundSiamese {
        BoundSiamese {
            conv1: bind(tape, &self.conv1),
            conv2: bind(tape, &self.conv2),
            conv3: bind(tape, &self.conv3),
            fc_w: tape.leaf(self.fc_w.value.clone()),
            fc_b: tape.leaf(self.fc_b.value.clone()),
        }
    }

    pub fn leaf_vars(bound: &BoundSiamese) -> Vec<Var> {
        vec![
            bound.conv1.w,
            bound.conv1.b,
            bound.conv2.w,
            bound.conv2.b,
            bound.conv3.w,
            bound.conv3.b,
            bound.fc_w,
            bound.fc_b,
        ]
    }
}

pub struct BoundSiamese {
    pub conv1: BoundConv,
    pub conv2: BoundConv,
    pub conv3: BoundConv,
    pub fc_w: Var,
    pub fc_b: Var,
}

/// Embed each segment into a 128-dimensional vector: `(N, 128)`.
pub fn siamese_forward<T: Element>(
    tape: &Tape<T>,
    vars: &BoundSiamese,
    x: Var,
) -> Result<Var, TensorError> {
    let shape = tape.shape(x);
    if shape.len() != 4 || shape[1] != 1 || shape[2] != SEGMENT_BANDS || shape[3] != SEGMENT_FRAMES
    {
        return Err(TensorError::Shape(format!(
            "siamese input must be (N, 1, {SEGMENT_BANDS}, {SEGMENT_FRAMES}), got {shape:?}"
        )));
    }
    let n = shape[0];
    let alpha = T::cast_from(LEAKY_ALPHA);
    let s2 = (2, 2);
    let mut h = x;
    for (layer, stage) in [
        (vars.conv1, "s.conv1"),
        (vars.conv2, "s.conv2"),
        (vars.conv3, "s.conv3"),
    ] {
        h = conv_block(tape, h, layer, s2, Padding::Same, stage)?;
        h = tape.leaky_relu(h, alpha);
    }
    let flat = tape.reshape(h, vec![n, 128 * 16 * 2])?;
    let emb = tape.matmul(flat, vars.fc_w)?;
    tape.add_bias_last(emb, vars.fc_b)
}

/// Stack `(128 x 12)` segments into an `(N, 1, 128, 12)` input tensor.
pub fn segments_to_tensor<T: Element>(segments: &[Vec<T>]) -> TensorData<T> {
    let n = segments.len();
    let mut data = Vec::with_capacity(n * ATTN_POSITIONS);
    for s in segments {
        assert_eq!(s.len(), ATTN_POSITIONS, "segment must be 128x12");
        data.extend_from_slice(s);
    }
    TensorData::new(vec![n, 1, SEGMENT_BANDS, SEGMENT_FRAMES], data)
}
