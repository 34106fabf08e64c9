//! The segmentation network: patch embedding, four encoder stages of VSS
//! blocks with patch merging, a mirrored decoder with patch expanding and
//! additive skip connections, and a final 4x expansion + class projection.
//!
//! Parameters live in a flat named table so the same architecture walk serves
//! construction, counting, checkpointing, and the optimizer.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::{softplus_inv, Scalar};
use crate::ss2d::{ss2d_forward, NUM_DIRECTIONS};
use crate::ssm::{dt_rank, SsmVars};
use crate::tape::{TapeBase, Var};
use crate::tensor::TensorBase;

pub const LN_EPS: f64 = 1e-5;
/// Patch embedding downsamples 4x, then three 2x merges: 32 total.
pub const SIZE_DIVISOR: usize = 32;
pub const STAGES: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub base_channels: usize,
    pub encoder_depths: [usize; STAGES],
    pub decoder_depths: [usize; STAGES],
    pub state_dim: usize,
    pub ssm_expand_ratio: usize,
    pub dw_kernel: usize,
    pub dropout_p: f64,
    pub num_classes: usize,
    /// Square input extent; inference accepts any extent divisible by 32.
    pub input_size: usize,
    pub skip_connections: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            base_channels: 96,
            encoder_depths: [2, 2, 2, 2],
            decoder_depths: [2, 2, 2, 1],
            state_dim: 16,
            ssm_expand_ratio: 2,
            dw_kernel: 3,
            dropout_p: 0.0,
            num_classes: 1,
            input_size: 256,
            skip_connections: true,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || !self.input_size.is_multiple_of(SIZE_DIVISOR) {
            return Err(Error::shape(format!(
                "input_size {} must be a positive multiple of {SIZE_DIVISOR}",
                self.input_size
            )));
        }
        if self.encoder_depths.iter().chain(&self.decoder_depths).any(|&d| d == 0) {
            return Err(Error::shape("stage depths must all be >= 1".to_string()));
        }
        if self.base_channels == 0 || self.state_dim == 0 || self.ssm_expand_ratio == 0 {
            return Err(Error::shape("channel/state/expand sizes must be >= 1".to_string()));
        }
        if self.dw_kernel.is_multiple_of(2) {
            return Err(Error::shape(format!(
                "dw_kernel {} must be odd",
                self.dw_kernel
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Numeric(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        if self.num_classes == 0 {
            return Err(Error::shape("num_classes must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Channel count of encoder stage `i` (decoder mirrors it).
    pub fn stage_channels(&self, i: usize) -> usize {
        self.base_channels << i
    }
}

// ── parameter table ─────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in +-sqrt(1/fan_in).
    FanIn(usize),
    /// `a[d][n] = -(n + 1)` over the last dimension.
    StateRamp,
    /// Pre-softplus bias giving step sizes log-uniform in [1e-3, 1e-1].
    DeltaBias,
}

#[derive(Clone, Debug)]
pub struct ParamDef {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamDef {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamTable {
    defs: Vec<ParamDef>,
}

impl ParamTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, init: Init) -> ParamId {
        self.defs.push(ParamDef { name: name.into(), shape, init });
        ParamId(self.defs.len() - 1)
    }

    pub fn defs(&self) -> &[ParamDef] {
        &self.defs
    }

    pub fn total(&self) -> u64 {
        self.defs.iter().map(|d| d.numel() as u64).sum()
    }

    pub fn materialize<S: Scalar>(&self, rng: &mut Rng) -> Vec<TensorBase<S>> {
        self.defs
            .iter()
            .map(|def| match def.init {
                Init::Zeros => TensorBase::zeros(def.shape.clone()),
                Init::Ones => TensorBase::ones(def.shape.clone()),
                Init::FanIn(fan) => {
                    let lim = (1.0 / fan as f64).sqrt();
                    TensorBase::uniform(def.shape.clone(), -lim, lim, rng)
                }
                Init::StateRamp => {
                    let n = *def.shape.last().expect("ramp needs a state dim");
                    TensorBase::from_fn(def.shape.clone(), |i| {
                        S::of_f64(-((i % n) as f64 + 1.0))
                    })
                }
                Init::DeltaBias => TensorBase::from_fn(def.shape.clone(), |_| {
                    let dt0 = rng.uniform((1e-3f64).ln(), (1e-1f64).ln()).exp();
                    S::of_f64(softplus_inv(dt0))
                }),
            })
            .collect()
    }
}

// ── forward context ─────────────────────────────────────────────────────

/// Everything a layer needs while tracing one forward pass.
pub struct Fwd<'a, S: Scalar> {
    pub tape: &'a mut TapeBase<S>,
    pub params: &'a [Var],
    pub train: bool,
    pub dropout_p: f64,
    pub rng: &'a mut Rng,
}

impl<'a, S: Scalar> Fwd<'a, S> {
    fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }
}

// ── layers ──────────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new(t: &mut ParamTable, name: &str, din: usize, dout: usize, bias: bool) -> Self {
        Linear {
            w: t.add(format!("{name}.w"), vec![din, dout], Init::FanIn(din)),
            b: bias.then(|| t.add(format!("{name}.b"), vec![dout], Init::Zeros)),
        }
    }

    pub fn apply<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> Result<Var> {
        let y = f.tape.matmul(x, f.p(self.w))?;
        match self.b {
            Some(b) => f.tape.add_bias(y, f.p(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    gamma: ParamId,
    beta: ParamId,
}

impl Norm {
    pub fn new(t: &mut ParamTable, name: &str, dim: usize) -> Self {
        Norm {
            gamma: t.add(format!("{name}.g"), vec![dim], Init::Ones),
            beta: t.add(format!("{name}.b"), vec![dim], Init::Zeros),
        }
    }

    pub fn apply<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> Result<Var> {
        f.tape.layer_norm(x, f.p(self.gamma), f.p(self.beta), LN_EPS)
    }
}

/// One selective-scan direction's parameters inside a VSS block.
#[derive(Clone, Debug)]
pub struct ScanHead {
    a: ParamId,
    d_skip: ParamId,
    dt_down: ParamId,
    dt_up: ParamId,
    dt_bias: ParamId,
    w_b: ParamId,
    b_bias: ParamId,
    w_c: ParamId,
    c_bias: ParamId,
}

impl ScanHead {
    pub fn new(t: &mut ParamTable, name: &str, d: usize, n: usize) -> Self {
        let r = dt_rank(d);
        ScanHead {
            a: t.add(format!("{name}.a"), vec![d, n], Init::StateRamp),
            d_skip: t.add(format!("{name}.dskip"), vec![d], Init::Ones),
            dt_down: t.add(format!("{name}.dt_down"), vec![d, r], Init::FanIn(d)),
            dt_up: t.add(format!("{name}.dt_up"), vec![r, d], Init::FanIn(r)),
            dt_bias: t.add(format!("{name}.dt_bias"), vec![d], Init::DeltaBias),
            w_b: t.add(format!("{name}.b_w"), vec![d, n], Init::FanIn(d)),
            b_bias: t.add(format!("{name}.b_bias"), vec![n], Init::Zeros),
            w_c: t.add(format!("{name}.c_w"), vec![d, n], Init::FanIn(d)),
            c_bias: t.add(format!("{name}.c_bias"), vec![n], Init::Zeros),
        }
    }

    fn vars<S: Scalar>(&self, f: &Fwd<S>) -> SsmVars {
        SsmVars {
            a: f.p(self.a),
            d_skip: f.p(self.d_skip),
            w_dt_down: f.p(self.dt_down),
            w_dt_up: f.p(self.dt_up),
            dt_bias: f.p(self.dt_bias),
            w_b: f.p(self.w_b),
            b_bias: f.p(self.b_bias),
            w_c: f.p(self.w_c),
            c_bias: f.p(self.c_bias),
        }
    }
}

/// Two-branch visual state-space block with residual connection.
///
/// Branch 1 gates; branch 2 runs depthwise conv + the 2D selective scan.
/// The branches fuse by elementwise product, then project back to `d`.
#[derive(Clone, Debug)]
pub struct VssBlock {
    ln: Norm,
    gate: Linear,
    inp: Linear,
    conv_k: ParamId,
    conv_b: ParamId,
    heads: [ScanHead; NUM_DIRECTIONS],
    out_ln: Norm,
    proj: Linear,
}

impl VssBlock {
    pub fn new(t: &mut ParamTable, name: &str, cfg: &NetworkConfig, d: usize) -> Self {
        let inner = d * cfg.ssm_expand_ratio;
        let k = cfg.dw_kernel;
        let heads = [0, 1, 2, 3]
            .map(|i| ScanHead::new(t, &format!("{name}.ssm.dir{i}"), inner, cfg.state_dim));
        VssBlock {
            ln: Norm::new(t, &format!("{name}.ln"), d),
            gate: Linear::new(t, &format!("{name}.gate"), d, inner, false),
            inp: Linear::new(t, &format!("{name}.inp"), d, inner, false),
            conv_k: t.add(format!("{name}.conv.k"), vec![k, k, inner], Init::FanIn(k * k)),
            conv_b: t.add(format!("{name}.conv.b"), vec![inner], Init::Zeros),
            heads,
            out_ln: Norm::new(t, &format!("{name}.out_ln"), inner),
            proj: Linear::new(t, &format!("{name}.proj"), inner, d, false),
        }
    }

    pub fn apply<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> Result<Var> {
        let (h, w, d) = match f.tape.shape(x) {
            [h, w, d] => (*h, *w, *d),
            s => return Err(Error::shape(format!("vss block expects [H,W,D], got {s:?}"))),
        };
        let l = h * w;

        let xn = self.ln.apply(f, x)?;
        let flat = f.tape.reshape(xn, vec![l, d])?;

        let gate_lin = self.gate.apply(f, flat)?;
        let gate = f.tape.silu(gate_lin);

        let inp = self.inp.apply(f, flat)?;
        let inner = f.tape.shape(inp)[1];
        let grid = f.tape.reshape(inp, vec![h, w, inner])?;
        let conv = f.tape.depthwise_conv2d(grid, f.p(self.conv_k))?;
        let conv = f.tape.add_bias(conv, f.p(self.conv_b))?;
        let act = f.tape.silu(conv);

        let heads = [0, 1, 2, 3].map(|i| self.heads[i].vars(f));
        let scanned = ss2d_forward(f.tape, act, &heads)?;
        let normed = self.out_ln.apply(f, scanned)?;

        let seq = f.tape.reshape(normed, vec![l, inner])?;
        let fused = f.tape.mul(gate, seq)?;
        let out = self.proj.apply(f, fused)?;
        let out = f.tape.dropout(out, f.dropout_p, f.train, f.rng)?;
        let out_grid = f.tape.reshape(out, vec![h, w, d])?;
        f.tape.add(x, out_grid)
    }
}

// ── patch rearrangement index builders ──────────────────────────────────

/// Flatten non-overlapping `p x p` patches: `[H,W,C] -> [(H/p)*(W/p), p*p*C]`.
/// Within a row the order is (row-in-patch, col-in-patch, channel), i.e.
/// (TL, TR, BL, BR) for `p = 2`.
pub fn patch_flatten_indices(h: usize, w: usize, c: usize, p: usize) -> Vec<usize> {
    let (hp, wp) = (h / p, w / p);
    let mut idx = Vec::with_capacity(h * w * c);
    for pi in 0..hp {
        for pj in 0..wp {
            for di in 0..p {
                for dj in 0..p {
                    let base = ((pi * p + di) * w + (pj * p + dj)) * c;
                    for ch in 0..c {
                        idx.push(base + ch);
                    }
                }
            }
        }
    }
    idx
}

/// Inverse rearrangement: `[h,w,p*p*c] -> [h*p, w*p, c]`, mirroring
/// [`patch_flatten_indices`] ordering.
pub fn patch_unflatten_indices(h: usize, w: usize, c: usize, p: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * p * w * p * c);
    for oi in 0..h * p {
        for oj in 0..w * p {
            let (i, di) = (oi / p, oi % p);
            let (j, dj) = (oj / p, oj % p);
            let base = (i * w + j) * (p * p * c) + (di * p + dj) * c;
            for ch in 0..c {
                idx.push(base + ch);
            }
        }
    }
    idx
}

/// 4x4 patch projection to `C` channels, then layer norm.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    proj: Linear,
    ln: Norm,
}

pub const PATCH: usize = 4;
pub const IN_CHANNELS: usize = 3;

impl PatchEmbed {
    pub fn new(t: &mut ParamTable, name: &str, c: usize) -> Self {
        PatchEmbed {
            proj: Linear::new(t, &format!("{name}.proj"), PATCH * PATCH * IN_CHANNELS, c, true),
            ln: Norm::new(t, &format!("{name}.ln"), c),
        }
    }

    pub fn apply<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> Result<Var> {
        let (h, w, c) = match f.tape.shape(x) {
            [h, w, c] if *c == IN_CHANNELS => (*h, *w, *c),
            s => {
                return Err(Error::shape(format!(
                    "patch_embed expects [H,W,{IN_CHANNELS}], got {s:?}"
                )))
            }
        };
        if h % PATCH != 0 || w % PATCH != 0 {
            return Err(Error::shape(format!(
                "patch_embed: extents {h}x{w} not divisible by {PATCH}"
            )));
        }
        let (hp, wp) = (h / PATCH, w / PATCH);
        let idx = patch_flatten_indices(h, w, c, PATCH);
        let patches = f
            .tape
            .gather(x, vec![hp * wp, PATCH * PATCH * c], std::sync::Arc::new(idx))?;
        let proj = self.proj.apply(f, patches)?;
        let normed = self.ln.apply(f, proj)?;
        let cout = f.tape.shape(normed)[1];
        f.tape.reshape(normed, vec![hp, wp, cout])
    }
}

/// 2x2 neighborhood concat (TL,TR,BL,BR), layer norm, then 4D -> 2D.
#[derive(Clone, Debug)]
pub struct PatchMerge {
    ln: Norm,
    reduce: Linear,
}

impl PatchMerge {
    pub fn new(t: &mut ParamTable, name: &str, d: usize) -> Self {
        PatchMerge {
            ln: Norm::new(t, &format!("{name}.ln"), 4 * d),
            reduce: Linear::new(t, &format!("{name}.reduce"), 4 * d, 2 * d, false),
        }
    }

    pub fn apply<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> Result<Var> {
        let (h, w, d) = match f.tape.shape(x) {
            [h, w, d] => (*h, *w, *d),
            s => return Err(Error::shape(format!("patch_merge expects [H,W,D], got {s:?}"))),
        };
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!(
                "patch_merge: extents {h}x{w} must be even"
            )));
        }
        let (h2, w2) = (h / 2, w / 2);
        let idx = patch_flatten_indices(h, w, d, 2);
        let grouped = f.tape.gather(x, vec![h2 * w2, 4 * d], std::sync::Arc::new(idx))?;
        let normed = self.ln.apply(f, grouped)?;
        let reduced = self.reduce.apply(f, normed)?;
        f.tape.reshape(reduced, vec![h2, w2, 2 * d])
    }
}

/// Linear D -> 2D, rearranged into 2x2 spatial blocks of D/2 channels,
/// then layer norm.
#[derive(Clone, Debug)]
pub struct PatchExpand {
    expand: Linear,
    ln: Norm,
}

impl PatchExpand {
    pub fn new(t: &mut ParamTable, name: &str, d: usize) -> Self {
        PatchExpand {
            expand: Linear::new(t, &format!("{name}.expand"), d, 2 * d, false),
            ln: Norm::new(t, &format!("{name}.ln"), d / 2),
        }
    }

    pub fn apply<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> Result<Var> {
        let (h, w, d) = match f.tape.shape(x) {
            [h, w, d] => (*h, *w, *d),
            s => return Err(Error::shape(format!("patch_expand expects [H,W,D], got {s:?}"))),
        };
        if d % 2 != 0 {
            return Err(Error::shape(format!(
                "patch_expand: channel count {d} must be even"
            )));
        }
        let flat = f.tape.reshape(x, vec![h * w, d])?;
        let expanded = self.expand.apply(f, flat)?;
        let grid = f.tape.reshape(expanded, vec![h, w, 2 * d])?;
        let cout = d / 2;
        let idx = patch_unflatten_indices(h, w, cout, 2);
        let up = f
            .tape
            .gather(grid, vec![2 * h, 2 * w, cout], std::sync::Arc::new(idx))?;
        self.ln.apply(f, up)
    }
}

/// One-shot 4x spatial expansion keeping the channel count, then the class
/// projection. Emits logits; activations live in the losses.
#[derive(Clone, Debug)]
pub struct FinalProjection {
    expand: Linear,
    ln: Norm,
    head: Linear,
}

impl FinalProjection {
    pub fn new(t: &mut ParamTable, name: &str, c: usize, num_classes: usize) -> Self {
        FinalProjection {
            expand: Linear::new(t, &format!("{name}.expand"), c, 16 * c, false),
            ln: Norm::new(t, &format!("{name}.ln"), c),
            head: Linear::new(t, &format!("{name}.head"), c, num_classes, true),
        }
    }

    pub fn apply<S: Scalar>(&self, f: &mut Fwd<S>, x: Var) -> Result<Var> {
        let (h, w, c) = match f.tape.shape(x) {
            [h, w, c] => (*h, *w, *c),
            s => {
                return Err(Error::shape(format!(
                    "final_projection expects [H,W,C], got {s:?}"
                )))
            }
        };
        let flat = f.tape.reshape(x, vec![h * w, c])?;
        let expanded = self.expand.apply(f, flat)?;
        let grid = f.tape.reshape(expanded, vec![h, w, 16 * c])?;
        let idx = patch_unflatten_indices(h, w, c, PATCH);
        let up = f
            .tape
            .gather(grid, vec![PATCH * h, PATCH * w, c], std::sync::Arc::new(idx))?;
        let normed = self.ln.apply(f, up)?;
        let flat_up = f.tape.reshape(normed, vec![PATCH * h * PATCH * w, c])?;
        let logits = self.head.apply(f, flat_up)?;
        let k = f.tape.shape(logits)[1];
        f.tape.reshape(logits, vec![PATCH * h, PATCH * w, k])
    }
}

// ── the full network ────────────────────────────────────────────────────

struct Arch {
    table: ParamTable,
    patch_embed: PatchEmbed,
    enc_stages: Vec<Vec<VssBlock>>,
    merges: Vec<PatchMerge>,
    dec_stages: Vec<Vec<VssBlock>>,
    expands: Vec<PatchExpand>,
    final_proj: FinalProjection,
}

fn build_arch(cfg: &NetworkConfig) -> Result<Arch> {
    cfg.validate()?;
    let mut t = ParamTable::new();
    let patch_embed = PatchEmbed::new(&mut t, "patch_embed", cfg.base_channels);

    let mut enc_stages = Vec::with_capacity(STAGES);
    let mut merges = Vec::with_capacity(STAGES - 1);
    for i in 0..STAGES {
        let d = cfg.stage_channels(i);
        let blocks = (0..cfg.encoder_depths[i])
            .map(|j| VssBlock::new(&mut t, &format!("enc{i}.blk{j}"), cfg, d))
            .collect();
        enc_stages.push(blocks);
        if i < STAGES - 1 {
            merges.push(PatchMerge::new(&mut t, &format!("merge{i}"), d));
        }
    }

    let mut dec_stages = Vec::with_capacity(STAGES);
    let mut expands = Vec::with_capacity(STAGES - 1);
    for i in 0..STAGES {
        let d = cfg.stage_channels(STAGES - 1 - i);
        if i > 0 {
            expands.push(PatchExpand::new(&mut t, &format!("expand{i}"), 2 * d));
        }
        let blocks = (0..cfg.decoder_depths[i])
            .map(|j| VssBlock::new(&mut t, &format!("dec{i}.blk{j}"), cfg, d))
            .collect();
        dec_stages.push(blocks);
    }

    let final_proj =
        FinalProjection::new(&mut t, "final", cfg.base_channels, cfg.num_classes);

    Ok(Arch { table: t, patch_embed, enc_stages, merges, dec_stages, expands, final_proj })
}

/// Exact number of learnable scalars for a configuration.
pub fn count_params(cfg: &NetworkConfig) -> Result<u64> {
    Ok(build_arch(cfg)?.table.total())
}

pub struct ForwardOut {
    pub logits: Var,
    /// Tape handles of every parameter, in table order.
    pub param_vars: Vec<Var>,
}

pub struct VmUnetBase<S> {
    pub config: NetworkConfig,
    arch: Arch,
    values: Vec<TensorBase<S>>,
}

impl<S: Scalar> VmUnetBase<S> {
    pub fn new(config: NetworkConfig, init_rng: &mut Rng) -> Result<Self> {
        let arch = build_arch(&config)?;
        let values = arch.table.materialize(init_rng);
        Ok(VmUnetBase { config, arch, values })
    }

    pub fn param_defs(&self) -> &[ParamDef] {
        self.arch.table.defs()
    }

    pub fn param_values(&self) -> &[TensorBase<S>] {
        &self.values
    }

    pub fn param_values_mut(&mut self) -> &mut [TensorBase<S>] {
        &mut self.values
    }

    pub fn num_params(&self) -> u64 {
        self.arch.table.total()
    }

    /// Named tensors sorted by name (checkpoint order).
    pub fn named_tensors(&self) -> BTreeMap<String, TensorBase<S>> {
        self.arch
            .table
            .defs()
            .iter()
            .zip(&self.values)
            .map(|(d, v)| (d.name.clone(), v.clone()))
            .collect()
    }

    /// Replace parameter values from a name -> tensor map; the first missing
    /// or mis-shaped name aborts the load.
    pub fn load_named_tensors(&mut self, mut map: BTreeMap<String, TensorBase<S>>) -> Result<()> {
        for (def, slot) in self.arch.table.defs().iter().zip(self.values.iter_mut()) {
            let tensor = map.remove(&def.name).ok_or_else(|| {
                Error::Data(format!("checkpoint is missing tensor `{}`", def.name))
            })?;
            if tensor.shape() != def.shape.as_slice() {
                return Err(Error::Data(format!(
                    "tensor `{}` has shape {:?}, expected {:?}",
                    def.name,
                    tensor.shape(),
                    def.shape
                )));
            }
            *slot = tensor;
        }
        if let Some(extra) = map.keys().next() {
            return Err(Error::Data(format!("checkpoint has unknown tensor `{extra}`")));
        }
        Ok(())
    }

    /// Trace one forward pass on `tape`. In training mode the parameters are
    /// registered as gradient leaves and dropout is active.
    pub fn forward(
        &self,
        tape: &mut TapeBase<S>,
        image: &TensorBase<S>,
        train: bool,
        rng: &mut Rng,
    ) -> Result<ForwardOut> {
        let param_vars: Vec<Var> = self
            .values
            .iter()
            .map(|t| tape.leaf(t.clone(), train))
            .collect();
        let logits = self.forward_with_params(tape, &param_vars, image, train, rng)?;
        Ok(ForwardOut { logits, param_vars })
    }

    /// Forward pass over caller-supplied parameter vars (table order).
    pub fn forward_with_params(
        &self,
        tape: &mut TapeBase<S>,
        param_vars: &[Var],
        image: &TensorBase<S>,
        train: bool,
        rng: &mut Rng,
    ) -> Result<Var> {
        let (h, w) = match image.shape() {
            [h, w, c] if *c == IN_CHANNELS => (*h, *w),
            s => {
                return Err(Error::shape(format!(
                    "forward expects [H,W,{IN_CHANNELS}] input, got {s:?}"
                )))
            }
        };
        if h == 0 || w == 0 || h % SIZE_DIVISOR != 0 || w % SIZE_DIVISOR != 0 {
            return Err(Error::shape(format!(
                "input extents {h}x{w} must be positive multiples of {SIZE_DIVISOR}"
            )));
        }
        if param_vars.len() != self.values.len() {
            return Err(Error::shape(format!(
                "expected {} parameter vars, got {}",
                self.values.len(),
                param_vars.len()
            )));
        }

        let x = tape.constant(image.clone());
        let mut f = Fwd {
            tape,
            params: param_vars,
            train,
            dropout_p: self.config.dropout_p,
            rng,
        };

        let mut cur = self.arch.patch_embed.apply(&mut f, x)?;
        let mut skips = Vec::with_capacity(STAGES - 1);
        for i in 0..STAGES {
            for blk in &self.arch.enc_stages[i] {
                cur = blk.apply(&mut f, cur)?;
            }
            if i < STAGES - 1 {
                skips.push(cur);
                cur = self.arch.merges[i].apply(&mut f, cur)?;
            }
        }

        for i in 0..STAGES {
            if i > 0 {
                cur = self.arch.expands[i - 1].apply(&mut f, cur)?;
                if self.config.skip_connections {
                    let skip = skips[STAGES - 1 - i];
                    if f.tape.shape(skip) != f.tape.shape(cur) {
                        return Err(Error::shape(format!(
                            "skip connection shape mismatch: {:?} vs {:?}",
                            f.tape.shape(skip),
                            f.tape.shape(cur)
                        )));
                    }
                    cur = f.tape.add(cur, skip)?;
                }
            }
            for blk in &self.arch.dec_stages[i] {
                cur = blk.apply(&mut f, cur)?;
            }
        }

        self.arch.final_proj.apply(&mut f, cur)
    }

    /// Convenience: forward in evaluation mode, returning the logits tensor.
    pub fn infer(&self, image: &TensorBase<S>) -> Result<TensorBase<S>> {
        let mut tape = TapeBase::new();
        let mut rng = Rng::seed_from(0);
        let out = self.forward(&mut tape, image, false, &mut rng)?;
        Ok(tape.value(out.logits).clone())
    }
}
