//! The MuSED network: a shared audio-visual trunk (frontends, fusion,
//! dual-path extraction encoder) with two detachable heads. The speech
//! backend reconstructs the target waveform for pre-training; the speaker
//! backend emits per-frame speaking probabilities.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{s, ArrayD, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::float::Float;
use crate::media::{FaceTrack, ScoreSequence, FACE_SIZE};
use crate::nn::{Init, LstmParams, ParamId, ParamStore, Tape, Var};
use crate::signal::{Waveform, SAMPLE_RATE, VIDEO_FPS};

/// Parameter-name prefixes that make up the shared trunk.
pub const TRUNK_PREFIXES: [&str; 4] = ["audio.", "visual.", "fusion.", "encoder."];

pub fn is_trunk_param(name: &str) -> bool {
    TRUNK_PREFIXES.iter().any(|p| name.starts_with(p))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// Feature dimension of every trunk embedding.
    pub d: usize,
    pub audio_kernel: usize,
    pub audio_stride: usize,
    /// Chunk length in audio frames.
    pub k: usize,
    pub num_extraction_blocks: usize,
    pub vtcn_blocks: usize,
    pub attn_heads: usize,
    pub attn_dim: usize,
    pub upsample_factor: usize,
    /// Hidden size of each BLSTM direction.
    pub rnn_hidden: usize,
    /// Channel count of the first ResNet stage.
    pub visual_width: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            d: 128,
            audio_kernel: 40,
            audio_stride: 20,
            k: 160,
            num_extraction_blocks: 6,
            vtcn_blocks: 5,
            attn_heads: 8,
            attn_dim: 128,
            upsample_factor: 32,
            rnn_hidden: 64,
            visual_width: 8,
        }
    }

    /// Full-scale preset, about 16 M parameters.
    pub fn full() -> Self {
        Self { d: 256, rnn_hidden: 128, visual_width: 64, ..Self::desk() }
    }

    /// Smallest useful configuration, for gradient checks.
    pub fn tiny() -> Self {
        Self {
            d: 8,
            k: 8,
            num_extraction_blocks: 2,
            vtcn_blocks: 2,
            attn_heads: 2,
            attn_dim: 8,
            rnn_hidden: 4,
            visual_width: 2,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.audio_kernel != 2 * self.audio_stride {
            return bad(format!(
                "audio_kernel ({}) must be twice audio_stride ({})",
                self.audio_kernel, self.audio_stride
            ));
        }
        if self.audio_stride == 0
            || SAMPLE_RATE as usize != self.audio_stride * VIDEO_FPS as usize * self.upsample_factor
        {
            return bad(format!(
                "sample rate / audio_stride must equal 25 * upsample_factor (stride {}, factor {})",
                self.audio_stride, self.upsample_factor
            ));
        }
        if self.upsample_factor != 32 {
            return bad("upsample_factor must be 32 (decimation is 8 x 4)".into());
        }
        if self.k < 2 || self.k % 2 != 0 {
            return bad(format!("chunk length k must be even and >= 2, got {}", self.k));
        }
        for (name, v) in [
            ("d", self.d),
            ("num_extraction_blocks", self.num_extraction_blocks),
            ("attn_heads", self.attn_heads),
            ("attn_dim", self.attn_dim),
            ("rnn_hidden", self.rnn_hidden),
            ("visual_width", self.visual_width),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.attn_dim % self.attn_heads != 0 {
            return bad(format!(
                "attn_dim ({}) must be divisible by attn_heads ({})",
                self.attn_dim, self.attn_heads
            ));
        }
        Ok(())
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, usize)> {
        vec![
            ("d", self.d),
            ("audio_kernel", self.audio_kernel),
            ("audio_stride", self.audio_stride),
            ("k", self.k),
            ("num_extraction_blocks", self.num_extraction_blocks),
            ("vtcn_blocks", self.vtcn_blocks),
            ("attn_heads", self.attn_heads),
            ("attn_dim", self.attn_dim),
            ("upsample_factor", self.upsample_factor),
            ("rnn_hidden", self.rnn_hidden),
            ("visual_width", self.visual_width),
        ]
    }

    /// Overrides fields from `key -> value` pairs; unknown keys are errors.
    pub fn apply(&mut self, pairs: &BTreeMap<String, usize>) -> Result<()> {
        for (key, &v) in pairs {
            let slot = match key.as_str() {
                "d" => &mut self.d,
                "audio_kernel" => &mut self.audio_kernel,
                "audio_stride" => &mut self.audio_stride,
                "k" => &mut self.k,
                "num_extraction_blocks" => &mut self.num_extraction_blocks,
                "vtcn_blocks" => &mut self.vtcn_blocks,
                "attn_heads" => &mut self.attn_heads,
                "attn_dim" => &mut self.attn_dim,
                "upsample_factor" => &mut self.upsample_factor,
                "rnn_hidden" => &mut self.rnn_hidden,
                "visual_width" => &mut self.visual_width,
                other => return Err(Error::invalid(format!("unknown model key `{other}`"))),
            };
            *slot = v;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Trunk + speech backend.
    Pretrain,
    /// Trunk + speaker backend.
    Finetune,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Pretrain => "pretrain",
            Stage::Finetune => "finetune",
        })
    }
}

impl std::str::FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Stage::Pretrain),
            "finetune" => Ok(Stage::Finetune),
            other => Err(Error::invalid(format!("unknown stage `{other}`"))),
        }
    }
}

// ---- layer handles ----

#[derive(Debug, Clone, Copy)]
struct Lin {
    w: ParamId,
    b: Option<ParamId>,
}

#[derive(Debug, Clone, Copy)]
struct Ln {
    g: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    g: ParamId,
    b: ParamId,
    mean: ParamId,
    var: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct Bilstm {
    fwd: LstmParams,
    bwd: LstmParams,
}

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: ParamId,
    bn1: Bn,
    conv2: ParamId,
    bn2: Bn,
    down: Option<(ParamId, Bn)>,
    stride: usize,
}

#[derive(Debug, Clone)]
struct TcnBlock {
    pw1: Lin,
    ln1: Ln,
    dw_w: ParamId,
    dw_b: ParamId,
    ln2: Ln,
    pw2: Lin,
}

#[derive(Debug, Clone)]
struct Visual {
    stem: ParamId,
    stem_bn: Bn,
    blocks: Vec<BasicBlock>,
    proj: Lin,
    tcn: Vec<TcnBlock>,
}

#[derive(Debug, Clone)]
struct Fusion {
    norm: Ln,
    proj_x: Lin,
    mix: Lin,
}

#[derive(Debug, Clone)]
struct DualPath {
    intra: Bilstm,
    intra_lin: Lin,
    intra_ln: Ln,
    inter: Bilstm,
    inter_lin: Lin,
    inter_ln: Ln,
}

#[derive(Debug, Clone)]
struct Encoder {
    blocks: Vec<DualPath>,
    prelu: ParamId,
    out: Lin,
}

#[derive(Debug, Clone)]
struct Speaker {
    down1: Lin,
    bn1: Bn,
    down2: Lin,
    bn2: Bn,
    q: Lin,
    k: Lin,
    v: Lin,
    o: Lin,
    attn_ln: Ln,
    conv: Lin,
    bn3: Bn,
    fc: Lin,
}

#[derive(Debug, Clone)]
enum Head {
    Speech(Lin),
    Speaker(Box<Speaker>),
}

#[derive(Debug, Clone)]
struct Net {
    audio: Lin,
    visual: Visual,
    fusion: Fusion,
    encoder: Encoder,
    head: Head,
}

fn lin<F: Float>(init: &mut Init<'_, F>, name: &str, inp: usize, out: usize, bias: bool) -> Lin {
    let mut sc = init.scope(name);
    let w = sc.uniform("weight", &[out, inp], inp);
    let b = bias.then(|| sc.uniform("bias", &[out], inp));
    Lin { w, b }
}

fn ln<F: Float>(init: &mut Init<'_, F>, name: &str, dim: usize) -> Ln {
    let mut sc = init.scope(name);
    Ln { g: sc.constant("gamma", &[dim], 1.0), b: sc.constant("beta", &[dim], 0.0) }
}

fn bn<F: Float>(init: &mut Init<'_, F>, name: &str, dim: usize) -> Bn {
    let mut sc = init.scope(name);
    Bn {
        g: sc.constant("gamma", &[dim], 1.0),
        b: sc.constant("beta", &[dim], 0.0),
        mean: sc.buffer("running_mean", &[dim], 0.0),
        var: sc.buffer("running_var", &[dim], 1.0),
    }
}

fn conv<F: Float>(init: &mut Init<'_, F>, name: &str, cin: usize, cout: usize, k: usize) -> ParamId {
    init.uniform(name, &[cout, cin, k, k], cin * k * k)
}

fn lstm_dir<F: Float>(init: &mut Init<'_, F>, name: &str, inp: usize, hid: usize) -> LstmParams {
    let mut sc = init.scope(name);
    let w_ih = sc.uniform("w_ih", &[4 * hid, inp], inp);
    let w_hh = sc.uniform("w_hh", &[4 * hid, hid], hid);
    let bias = sc.constant("bias", &[4 * hid], 0.0);
    sc.store().value_mut(bias).slice_mut(s![hid..2 * hid]).fill(F::one());
    LstmParams { w_ih, w_hh, bias }
}

fn bilstm<F: Float>(init: &mut Init<'_, F>, name: &str, inp: usize, hid: usize) -> Bilstm {
    let mut sc = init.scope(name);
    Bilstm { fwd: lstm_dir(&mut sc, "fwd", inp, hid), bwd: lstm_dir(&mut sc, "bwd", inp, hid) }
}

fn build_visual<F: Float>(init: &mut Init<'_, F>, cfg: &ModelConfig) -> Visual {
    let w0 = cfg.visual_width;
    let stem = conv(init, "stem.weight", 5, w0, 7);
    let stem_bn = bn(init, "stem.bn", w0);
    let mut blocks = Vec::new();
    let mut cin = w0;
    for (stage, mult) in [1usize, 2, 4, 8].into_iter().enumerate() {
        let cout = w0 * mult;
        for b in 0..2 {
            let stride = if stage > 0 && b == 0 { 2 } else { 1 };
            let mut sc = init.scope(&format!("resnet.layer{}.{}", stage + 1, b));
            let conv1 = conv(&mut sc, "conv1", cin, cout, 3);
            let bn1 = bn(&mut sc, "bn1", cout);
            let conv2 = conv(&mut sc, "conv2", cout, cout, 3);
            let bn2 = bn(&mut sc, "bn2", cout);
            let down = (stride != 1 || cin != cout)
                .then(|| (conv(&mut sc, "down.conv", cin, cout, 1), bn(&mut sc, "down.bn", cout)));
            blocks.push(BasicBlock { conv1, bn1, conv2, bn2, down, stride });
            cin = cout;
        }
    }
    let proj = lin(init, "proj", cin, cfg.d, true);
    let tcn = (0..cfg.vtcn_blocks)
        .map(|i| {
            let mut sc = init.scope(&format!("vtcn.{i}"));
            let d = cfg.d;
            TcnBlock {
                pw1: lin(&mut sc, "pw1", d, d, true),
                ln1: ln(&mut sc, "ln1", d),
                dw_w: sc.uniform("dw.weight", &[d, 3], 3),
                dw_b: sc.constant("dw.bias", &[d], 0.0),
                ln2: ln(&mut sc, "ln2", d),
                pw2: lin(&mut sc, "pw2", d, d, true),
            }
        })
        .collect();
    Visual { stem, stem_bn, blocks, proj, tcn }
}

fn build_net<F: Float>(init: &mut Init<'_, F>, cfg: &ModelConfig, stage: Stage) -> Net {
    let d = cfg.d;
    let h = cfg.rnn_hidden;
    let audio = {
        let mut sc = init.scope("audio.encoder");
        let w = sc.uniform("weight", &[d, cfg.audio_kernel], cfg.audio_kernel);
        let b = sc.constant("bias", &[d], 0.0);
        Lin { w, b: Some(b) }
    };
    let visual = build_visual(&mut init.scope("visual"), cfg);
    let fusion = {
        let mut sc = init.scope("fusion");
        Fusion {
            norm: ln(&mut sc, "norm", d),
            proj_x: lin(&mut sc, "proj_x", d, d, true),
            mix: lin(&mut sc, "mix", 2 * d, d, true),
        }
    };
    let encoder = {
        let mut sc = init.scope("encoder");
        let blocks = (0..cfg.num_extraction_blocks)
            .map(|i| {
                let mut b = sc.scope(&format!("block{i}"));
                DualPath {
                    intra: bilstm(&mut b, "intra.rnn", d, h),
                    intra_lin: lin(&mut b, "intra.proj", 2 * h, d, true),
                    intra_ln: ln(&mut b, "intra.norm", d),
                    inter: bilstm(&mut b, "inter.rnn", d, h),
                    inter_lin: lin(&mut b, "inter.proj", 2 * h, d, true),
                    inter_ln: ln(&mut b, "inter.norm", d),
                }
            })
            .collect();
        let prelu = sc.constant("aggregate.prelu", &[d], 0.25);
        let out = lin(&mut sc, "aggregate.proj", d, d, true);
        Encoder { blocks, prelu, out }
    };
    let head = match stage {
        Stage::Pretrain => {
            Head::Speech(lin(&mut init.scope("speech"), "decoder", d, cfg.audio_kernel, false))
        }
        Stage::Finetune => {
            let mut sc = init.scope("speaker");
            let a = cfg.attn_dim;
            Head::Speaker(Box::new(Speaker {
                down1: lin(&mut sc, "down1", 8 * 3 * d, d, true),
                bn1: bn(&mut sc, "bn1", d),
                down2: lin(&mut sc, "down2", 4 * d, a, true),
                bn2: bn(&mut sc, "bn2", a),
                q: lin(&mut sc, "attn.q", a, a, true),
                k: lin(&mut sc, "attn.k", a, a, true),
                v: lin(&mut sc, "attn.v", a, a, true),
                o: lin(&mut sc, "attn.o", a, a, true),
                attn_ln: ln(&mut sc, "attn.norm", a),
                conv: lin(&mut sc, "conv", 3 * a, a, true),
                bn3: bn(&mut sc, "bn3", a),
                fc: lin(&mut sc, "fc", a, 2, true),
            }))
        }
    };
    Net { audio, visual, fusion, encoder, head }
}

/// Intermediate trunk outputs for one item.
#[derive(Debug, Clone, Copy)]
pub struct TrunkOut {
    /// Audio embedding aligned to `32 * frames` rows.
    pub x: Var,
    pub x_prime: Var,
    pub v_prime: Var,
    pub m: Var,
    /// Visual frame count.
    pub frames: usize,
}

#[derive(Debug, Clone)]
pub struct Model<F: Float> {
    cfg: ModelConfig,
    stage: Stage,
    store: ParamStore<F>,
    net: Net,
    attention: bool,
}

impl<F: Float> Model<F> {
    pub fn new(cfg: ModelConfig, stage: Stage, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = build_net(&mut Init::new(&mut store, &mut rng), &cfg, stage);
        Ok(Self { cfg, stage, store, net, attention: true })
    }

    /// Rebuilds a model around an existing parameter table, which must
    /// match the layout implied by `cfg` and `stage` name for name.
    pub fn from_store(cfg: ModelConfig, stage: Stage, store: ParamStore<F>) -> Result<Self> {
        let mut model = Self::new(cfg, stage, 0)?;
        if store.len() != model.store.len() {
            return Err(Error::ParamMismatch {
                name: "<table>".into(),
                detail: format!("expected {} parameters, found {}", model.store.len(), store.len()),
            });
        }
        for ((_, want), (_, got)) in model.store.iter().zip(store.iter()) {
            if want.name != got.name || want.value.shape() != got.value.shape() {
                return Err(Error::ParamMismatch {
                    name: want.name.clone(),
                    detail: format!(
                        "expected {:?} {:?}, found {} {:?}",
                        want.name,
                        want.value.shape(),
                        got.name,
                        got.value.shape()
                    ),
                });
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn stage(&self) -> Stage {
        self.stage
    }

    pub fn store(&self) -> &ParamStore<F> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.store
    }

    pub fn cast<G: Float>(&self) -> Model<G> {
        Model {
            cfg: self.cfg.clone(),
            stage: self.stage,
            store: self.store.cast(),
            net: self.net.clone(),
            attention: self.attention,
        }
    }

    /// Disables the self-attention block of the speaker backend. Only used
    /// to contrast global against local temporal context.
    #[doc(hidden)]
    pub fn without_attention(mut self) -> Self {
        self.attention = false;
        self
    }

    /// Number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.store.iter().filter(|(_, p)| p.trainable).map(|(_, p)| p.value.len()).sum()
    }

    /// Copies every trunk parameter (including normalization buffers) from
    /// `src` by name. Head parameters are left untouched.
    pub fn load_trunk(&mut self, src: &ParamStore<F>) -> Result<()> {
        let names: Vec<String> =
            self.store.iter().filter(|(_, p)| is_trunk_param(&p.name)).map(|(_, p)| p.name.clone()).collect();
        for name in names {
            let p = src.by_name(&name).ok_or_else(|| Error::ParamMismatch {
                name: name.clone(),
                detail: "missing from source".into(),
            })?;
            let want = self.store.by_name(&name).expect("own name").value.shape().to_vec();
            if p.value.shape() != want.as_slice() {
                return Err(Error::ParamMismatch {
                    name,
                    detail: format!("shape {:?} vs expected {:?}", p.value.shape(), want),
                });
            }
            self.store.set(&name, p.value.clone())?;
        }
        Ok(())
    }

    fn lin(&self, t: &mut Tape<'_, F>, x: Var, l: Lin) -> Var {
        t.linear(x, l.w, l.b)
    }

    fn bn_rows(&self, t: &mut Tape<'_, F>, x: Var, b: Bn) -> Var {
        let sh = t.shape(x).to_vec();
        let r = t.reshape(x, &[sh[0], sh[1], 1]);
        let y = t.batch_norm(r, b.g, b.b, b.mean, b.var);
        t.reshape(y, &sh)
    }

    fn bn_maps(&self, t: &mut Tape<'_, F>, x: Var, b: Bn) -> Var {
        let sh = t.shape(x).to_vec();
        let r = t.reshape(x, &[sh[0], sh[1], sh[2] * sh[3]]);
        let y = t.batch_norm(r, b.g, b.b, b.mean, b.var);
        t.reshape(y, &sh)
    }

    /// Learned 1-D convolution (kernel 40, stride 20) and ReLU over a
    /// signal whose length is a multiple of the stride: `[S] -> [S/20, D]`.
    pub fn audio_frontend(&self, t: &mut Tape<'_, F>, audio: Var) -> Var {
        let frames = t.frame_signal(audio, self.cfg.audio_kernel, self.cfg.audio_stride);
        let x = self.lin(t, frames, self.net.audio);
        t.relu(x)
    }

    /// Faces `[T, 112, 112]` to `[T, D]`.
    pub fn visual_frontend(&self, t: &mut Tape<'_, F>, faces: Var) -> Var {
        let vis = &self.net.visual;
        let n = t.shape(faces)[0];
        let x = t.reshape(faces, &[n, 1, FACE_SIZE * FACE_SIZE]);
        let x = t.temporal_stack(x, 5);
        let x = t.reshape(x, &[n, 5, FACE_SIZE, FACE_SIZE]);
        let x = t.conv2d(x, vis.stem, 2, 3);
        let x = self.bn_maps(t, x, vis.stem_bn);
        let x = t.relu(x);
        let mut x = t.max_pool2d(x, 3, 2, 1);
        for b in &vis.blocks {
            let y = t.conv2d(x, b.conv1, b.stride, 1);
            let y = self.bn_maps(t, y, b.bn1);
            let y = t.relu(y);
            let y = t.conv2d(y, b.conv2, 1, 1);
            let y = self.bn_maps(t, y, b.bn2);
            let short = match b.down {
                Some((w, bnp)) => {
                    let s = t.conv2d(x, w, b.stride, 0);
                    self.bn_maps(t, s, bnp)
                }
                None => x,
            };
            let y = t.add(y, short);
            x = t.relu(y);
        }
        let pooled = t.global_avg_pool(x);
        let mut v = self.lin(t, pooled, vis.proj);
        for blk in &vis.tcn {
            let y = self.lin(t, v, blk.pw1);
            let y = t.relu(y);
            let y = t.layer_norm(y, blk.ln1.g, blk.ln1.b);
            let y = t.depthwise_conv1d(y, blk.dw_w, blk.dw_b);
            let y = t.relu(y);
            let y = t.layer_norm(y, blk.ln2.g, blk.ln2.b);
            let y = self.lin(t, y, blk.pw2);
            v = t.add(v, y);
        }
        v
    }

    /// Aligns `x [L, D]` to `32 * frames` rows, trimming or zero-padding a
    /// tail shorter than one visual frame.
    pub fn align_audio(&self, t: &mut Tape<'_, F>, x: Var, frames: usize) -> Result<Var> {
        let l = t.shape(x)[0];
        let want = frames * self.cfg.upsample_factor;
        if l.abs_diff(want) >= self.cfg.upsample_factor {
            return Err(Error::shape(format!(
                "audio gives {l} frames but {frames} visual frames need {want}"
            )));
        }
        Ok(match l.cmp(&want) {
            std::cmp::Ordering::Greater => t.slice_rows(x, 0, want),
            std::cmp::Ordering::Less => t.pad_rows(x, want),
            std::cmp::Ordering::Equal => x,
        })
    }

    /// Returns `(X', V', Y)` with `Y` laid out `[K, Q, D]`.
    pub fn fuse(&self, t: &mut Tape<'_, F>, x: Var, v: Var) -> (Var, Var, Var) {
        let f = &self.net.fusion;
        let xn = t.layer_norm(x, f.norm.g, f.norm.b);
        let xp = self.lin(t, xn, f.proj_x);
        let vp = t.repeat_rows(v, self.cfg.upsample_factor);
        let cat = t.concat_cols(&[xp, vp]);
        let z = self.lin(t, cat, f.mix);
        let y = t.segment(z, self.cfg.k);
        (xp, vp, y)
    }

    fn bilstm(&self, t: &mut Tape<'_, F>, x: Var, p: Bilstm) -> Var {
        let sh = t.shape(x).to_vec();
        let h = self.cfg.rnn_hidden;
        let f = t.lstm(x, p.fwd, false);
        let b = t.lstm(x, p.bwd, true);
        let f = t.reshape(f, &[sh[0] * sh[1], h]);
        let b = t.reshape(b, &[sh[0] * sh[1], h]);
        t.concat_cols(&[f, b])
    }

    /// Dual-path BLSTM blocks followed by the aggregation block:
    /// `Y [K, Q, D] -> M [orig, D]`.
    pub fn extraction_encoder(&self, t: &mut Tape<'_, F>, y: Var, orig: usize) -> Var {
        let enc = &self.net.encoder;
        let sh = t.shape(y).to_vec();
        let (k, q, d) = (sh[0], sh[1], sh[2]);
        let mut y = y;
        for blk in &enc.blocks {
            let h = self.bilstm(t, y, blk.intra);
            let h = self.lin(t, h, blk.intra_lin);
            let h = t.layer_norm(h, blk.intra_ln.g, blk.intra_ln.b);
            let h = t.reshape(h, &[k, q, d]);
            y = t.add(y, h);

            let yt = t.swap01(y);
            let h = self.bilstm(t, yt, blk.inter);
            let h = self.lin(t, h, blk.inter_lin);
            let h = t.layer_norm(h, blk.inter_ln.g, blk.inter_ln.b);
            let h = t.reshape(h, &[q, k, d]);
            let yt = t.add(yt, h);
            y = t.swap01(yt);
        }
        let m = t.overlap_add_chunks(y, orig);
        let m = t.prelu(m, enc.prelu);
        let m = self.lin(t, m, enc.out);
        t.relu(m)
    }

    /// Masked decoding of `M ⊙ X` back to `out_len` samples.
    pub fn speech_backend(&self, t: &mut Tape<'_, F>, m: Var, x: Var, out_len: usize) -> Result<Var> {
        let Head::Speech(dec) = self.net.head else {
            return Err(Error::invalid("model has no speech backend"));
        };
        if t.shape(m) != t.shape(x) {
            return Err(Error::shape(format!("mask {:?} vs audio embedding {:?}", t.shape(m), t.shape(x))));
        }
        let s = t.mul(m, x);
        let frames = self.lin(t, s, dec);
        Ok(t.overlap_add_frames(frames, self.cfg.audio_stride, out_len))
    }

    /// Per-visual-frame speaking probabilities `[frames]` from the aligned
    /// `X'`, `V'` and `M`.
    pub fn speaker_backend(
        &self,
        t: &mut Tape<'_, F>,
        xp: Var,
        vp: Var,
        m: Var,
        frames: usize,
    ) -> Result<Var> {
        let Head::Speaker(sp) = &self.net.head else {
            return Err(Error::invalid("model has no speaker backend"));
        };
        let d = self.cfg.d;
        let a = self.cfg.attn_dim;
        let cat = t.concat_cols(&[xp, vp, m]);
        let l = t.shape(cat)[0];
        let padded = l.div_ceil(32).max(1) * 32;
        let cat = if padded != l { t.pad_rows(cat, padded) } else { cat };

        let z = t.reshape(cat, &[padded / 8, 8 * 3 * d]);
        let z = self.lin(t, z, sp.down1);
        let z = self.bn_rows(t, z, sp.bn1);
        let z = t.relu(z);
        let n = padded / 32;
        let z = t.reshape(z, &[n, 4 * d]);
        let z = self.lin(t, z, sp.down2);
        let z = self.bn_rows(t, z, sp.bn2);
        let mut z = t.relu(z);

        if self.attention {
            let q = self.lin(t, z, sp.q);
            let k = self.lin(t, z, sp.k);
            let v = self.lin(t, z, sp.v);
            let dh = a / self.cfg.attn_heads;
            let heads: Vec<Var> = (0..self.cfg.attn_heads)
                .map(|i| {
                    let qh = t.slice_cols(q, i * dh, (i + 1) * dh);
                    let kh = t.slice_cols(k, i * dh, (i + 1) * dh);
                    let vh = t.slice_cols(v, i * dh, (i + 1) * dh);
                    let sc = t.matmul_nt(qh, kh);
                    let sc = t.scale(sc, 1.0 / (dh as f64).sqrt());
                    let p = t.softmax_rows(sc);
                    t.matmul(p, vh)
                })
                .collect();
            let att = t.concat_cols(&heads);
            let att = self.lin(t, att, sp.o);
            let r = t.add(z, att);
            z = t.layer_norm(r, sp.attn_ln.g, sp.attn_ln.b);
        }

        let c = t.reshape(z, &[n, a, 1]);
        let c = t.temporal_stack(c, 3);
        let c = t.reshape(c, &[n, 3 * a]);
        let c = self.lin(t, c, sp.conv);
        let c = self.bn_rows(t, c, sp.bn3);
        let logits = self.lin(t, c, sp.fc);
        let probs = t.softmax_rows(logits);
        let probs = if frames < n { t.slice_rows(probs, 0, frames) } else { probs };
        Ok(t.select_col(probs, 1))
    }

    /// Frontends, fusion and encoder for one item. `audio` is a signal var
    /// whose length is a multiple of the audio stride; `faces` is
    /// `[T, 112, 112]`.
    pub fn trunk(&self, t: &mut Tape<'_, F>, audio: Var, faces: Var) -> Result<TrunkOut> {
        let frames = t.shape(faces)[0];
        if frames == 0 {
            return Err(Error::shape("face track is empty"));
        }
        let x = self.audio_frontend(t, audio);
        let x = self.align_audio(t, x, frames)?;
        let v = self.visual_frontend(t, faces);
        let (xp, vp, y) = self.fuse(t, x, v);
        let m = self.extraction_encoder(t, y, frames * self.cfg.upsample_factor);
        Ok(TrunkOut { x, x_prime: xp, v_prime: vp, m, frames })
    }

    /// Places one item's inputs on the tape as constants.
    pub fn inputs(&self, t: &mut Tape<'_, F>, audio: &[f64], faces: &FaceTrack) -> Result<(Var, Var)> {
        if audio.is_empty() {
            return Err(Error::invalid("audio is empty"));
        }
        let stride = self.cfg.audio_stride;
        let padded = audio.len().div_ceil(stride) * stride;
        let mut a: Vec<F> = audio.iter().map(|&v| F::of(v)).collect();
        a.resize(padded, F::zero());
        let a = t.constant(ArrayD::from_shape_vec(IxDyn(&[padded]), a).expect("audio"));
        let fv = faces.frames().mapv(|v| F::of(v as f64)).into_dyn();
        let f = t.constant(fv);
        Ok((a, f))
    }

    /// Estimated target waveform var `[mixture.len()]`.
    pub fn pretrain_graph(&self, t: &mut Tape<'_, F>, mixture: &[f64], faces: &FaceTrack) -> Result<Var> {
        let (a, f) = self.inputs(t, mixture, faces)?;
        let tr = self.trunk(t, a, f)?;
        self.speech_backend(t, tr.m, tr.x, mixture.len())
    }

    /// Speaking probabilities var `[faces.num_frames()]`.
    pub fn asd_graph(&self, t: &mut Tape<'_, F>, audio: &[f64], faces: &FaceTrack) -> Result<Var> {
        let (a, f) = self.inputs(t, audio, faces)?;
        let tr = self.trunk(t, a, f)?;
        self.speaker_backend(t, tr.x_prime, tr.v_prime, tr.m, tr.frames)
    }

    /// Evaluation-mode target speech estimate.
    pub fn forward_pretrain(&self, mixture: &Waveform, faces: &FaceTrack) -> Result<Waveform> {
        let mut t = Tape::new(&self.store, false);
        let out = self.pretrain_graph(&mut t, mixture.samples(), faces)?;
        let samples: Vec<f64> = t.value(out).iter().map(|v| v.as_f64()).collect();
        Waveform::new(samples, mixture.sample_rate())
    }

    /// Evaluation-mode speaking probabilities, one per face frame.
    pub fn forward_asd(&self, audio: &Waveform, faces: &FaceTrack) -> Result<ScoreSequence> {
        let mut t = Tape::new(&self.store, false);
        let out = self.asd_graph(&mut t, audio.samples(), faces)?;
        let probs: Vec<f64> = t.value(out).iter().map(|v| v.as_f64().clamp(0.0, 1.0)).collect();
        ScoreSequence::new(probs)
    }

    /// Maps [`Model::forward_asd`] over a batch of items.
    pub fn forward_asd_batch(&self, items: &[(Waveform, FaceTrack)]) -> Result<Vec<ScoreSequence>> {
        items.iter().map(|(a, f)| self.forward_asd(a, f)).collect()
    }
}
