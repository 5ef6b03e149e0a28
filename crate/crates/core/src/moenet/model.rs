//! Gate, experts and regression head of the velocity network.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{MoeConfig, INPUT_ROWS};
use super::routing::{topk_route, Capacity, GateDecision};
use crate::diffkernel::{Binder, ParamId, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A `9 × L` network input, row-major: gyro (rad/s), specific force
/// (m/s²) and the body-frame gravity direction, one column per epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct ImuWindow {
    data: Vec<f64>,
    len: usize,
}

impl ImuWindow {
    pub fn new(data: Vec<f64>, len: usize) -> Result<Self> {
        if len == 0 || data.len() != INPUT_ROWS * len {
            return Err(Error::Shape {
                op: "imu_window",
                lhs: vec![data.len()],
                rhs: vec![INPUT_ROWS, len],
            });
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("imu window"));
        }
        Ok(ImuWindow { data, len })
    }

    /// Builds a window from per-epoch `(gyro, accel, gravity_dir)` columns.
    pub fn from_columns(cols: &[[Vector3<f64>; 3]]) -> Result<Self> {
        let len = cols.len();
        let mut data = vec![0.0; INPUT_ROWS * len];
        for (t, c) in cols.iter().enumerate() {
            for (g, v) in c.iter().enumerate() {
                for a in 0..3 {
                    data[(g * 3 + a) * len + t] = v[a];
                }
            }
        }
        ImuWindow::new(data, len)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, row: usize, t: usize) -> f64 {
        self.data[row * self.len + t]
    }

    /// Splits into `n_patch` patches of `l_feature` epochs, each flattened
    /// time-major: element `t·9 + row` of patch `p` is `x[row, p·l_feature + t]`.
    pub fn patchify(&self, n_patch: usize, l_feature: usize) -> Result<Vec<f64>> {
        if n_patch * l_feature != self.len {
            return Err(Error::Shape {
                op: "patchify",
                lhs: vec![INPUT_ROWS, self.len],
                rhs: vec![n_patch, l_feature],
            });
        }
        let mut out = Vec::with_capacity(self.data.len());
        for p in 0..n_patch {
            for t in 0..l_feature {
                for row in 0..INPUT_ROWS {
                    out.push(self.at(row, p * l_feature + t));
                }
            }
        }
        Ok(out)
    }
}

/// Body-frame velocity with diagonal variance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VelocityEstimate {
    pub v_b: Vector3<f64>,
    pub sigma_diag: Vector3<f64>,
}

impl VelocityEstimate {
    pub fn new(v_b: Vector3<f64>, sigma_diag: Vector3<f64>) -> Result<Self> {
        if !v_b.iter().chain(sigma_diag.iter()).all(|x| x.is_finite()) {
            return Err(Error::NonFinite("velocity estimate"));
        }
        if sigma_diag.iter().any(|&s| s <= 0.0) {
            return Err(Error::Contract(format!(
                "velocity variance must be positive, got {:?}",
                sigma_diag.as_slice()
            )));
        }
        Ok(VelocityEstimate { v_b, sigma_diag })
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, inp: usize, out: usize) -> Self {
        Linear {
            w: store.register_uniform(format!("{name}.weight"), vec![inp, out], inp, rng),
            b: store.register(format!("{name}.bias"), Tensor::zeros(vec![out])),
        }
    }

    /// Kernel-size-1 convolution weights are stored `[C_out, C_in]`.
    fn conv(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        Linear {
            w: store.register_uniform(format!("{name}.weight"), vec![c_out, c_in], c_in, rng),
            b: store.register(format!("{name}.bias"), Tensor::zeros(vec![c_out])),
        }
    }

    fn apply(&self, tape: &mut Tape, bind: &mut Binder<'_>, x: Var) -> Result<Var> {
        let (w, b) = (bind.var(tape, self.w), bind.var(tape, self.b));
        tape.linear(x, w, b)
    }

    fn apply_conv(&self, tape: &mut Tape, bind: &mut Binder<'_>, x: Var) -> Result<Var> {
        let (w, b) = (bind.var(tape, self.w), bind.var(tape, self.b));
        tape.conv1d_k1(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Affine {
    pub alpha: ParamId,
    pub beta: ParamId,
}

impl Affine {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Affine {
            alpha: store.register(format!("{name}.alpha"), Tensor::filled(vec![dim], 1.0)),
            beta: store.register(format!("{name}.beta"), Tensor::zeros(vec![dim])),
        }
    }

    fn apply(&self, tape: &mut Tape, bind: &mut Binder<'_>, x: Var) -> Result<Var> {
        let (a, b) = (bind.var(tape, self.alpha), bind.var(tape, self.beta));
        tape.affine(x, a, b)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct ResMlpBlock {
    pub pre: Affine,
    pub patch_mix: Linear,
    pub channel: Linear,
    pub post: Affine,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Expert {
    pub embed: Linear,
    pub blocks: Vec<ResMlpBlock>,
    pub project: Linear,
}

impl Expert {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &MoeConfig) -> Self {
        let d = cfg.l_inner;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let p = format!("{name}.block{i}");
                ResMlpBlock {
                    pre: Affine::new(store, &format!("{p}.patch.pre"), d),
                    patch_mix: Linear::conv(store, rng, &format!("{p}.patch.conv"), cfg.n_patch, cfg.n_patch),
                    channel: Linear::new(store, rng, &format!("{p}.patch.linear"), d, d),
                    post: Affine::new(store, &format!("{p}.patch.post"), d),
                    mlp_in: Linear::new(store, rng, &format!("{p}.channel.fc1"), d, d),
                    mlp_out: Linear::new(store, rng, &format!("{p}.channel.fc2"), d, d),
                }
            })
            .collect();
        Expert {
            embed: Linear::new(store, rng, &format!("{name}.embed"), cfg.patch_dim(), d),
            blocks,
            project: Linear::new(store, rng, &format!("{name}.project"), d, cfg.l_out),
        }
    }

    /// `[n, N_patch, 9·L_feature] → [n, N_patch, L_out]`.
    fn forward(&self, tape: &mut Tape, bind: &mut Binder<'_>, patches: Var) -> Result<Var> {
        let mut h = self.embed.apply(tape, bind, patches)?;
        for blk in &self.blocks {
            // cross-patch: mixes the N_patch rows at every feature position
            let a = blk.pre.apply(tape, bind, h)?;
            let a = blk.patch_mix.apply_conv(tape, bind, a)?;
            let a = blk.channel.apply(tape, bind, a)?;
            let a = blk.post.apply(tape, bind, a)?;
            h = tape.add(h, a)?;
            // cross-channel
            let m = blk.mlp_in.apply(tape, bind, h)?;
            let m = tape.gelu(m);
            let m = blk.mlp_out.apply(tape, bind, m)?;
            h = tape.add(h, m)?;
        }
        self.project.apply(tape, bind, h)
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Gate {
    pub conv: Linear,
    pub out: Linear,
}

#[derive(Clone, Debug)]
pub(crate) struct Head {
    pub fuse: Linear,
    pub hidden: Linear,
    pub velocity: Linear,
    pub log_var: Linear,
}

/// The mixture-of-experts velocity regressor.
#[derive(Clone, Debug)]
pub struct MoeModel {
    cfg: MoeConfig,
    params: ParamStore,
    pub(crate) gate: Gate,
    /// Routed experts `0..N`, then the shared expert.
    pub(crate) experts: Vec<Expert>,
    pub(crate) head: Head,
}

/// Tape handles produced by [`MoeModel::forward`].
#[derive(Debug)]
pub struct MoeForward {
    /// `[B, 3]` body-frame velocity.
    pub velocity: Var,
    /// `[B, 3]` log-variance.
    pub log_var: Var,
    /// `[B, N]` gate probabilities.
    pub probs: Var,
    pub decision: GateDecision,
}

impl MoeModel {
    /// Fresh model with seeded uniform initialization.
    pub fn new(cfg: MoeConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let gate = Gate {
            conv: Linear::conv(&mut params, &mut rng, "gate.conv", INPUT_ROWS, cfg.gate_channels),
            out: Linear::new(&mut params, &mut rng, "gate.out", cfg.gate_channels, cfg.n_experts),
        };
        let mut experts: Vec<Expert> = (0..cfg.n_experts)
            .map(|i| Expert::new(&mut params, &mut rng, &format!("expert{i}"), &cfg))
            .collect();
        experts.push(Expert::new(&mut params, &mut rng, "shared", &cfg));
        let o = cfg.l_out;
        let head = Head {
            fuse: Linear::new(&mut params, &mut rng, "head.fuse", 2 * o, o),
            hidden: Linear::new(&mut params, &mut rng, "head.hidden", o, o),
            velocity: Linear::new(&mut params, &mut rng, "head.velocity", o, 3),
            log_var: Linear::new(&mut params, &mut rng, "head.log_var", o, 3),
        };
        Ok(MoeModel {
            cfg,
            params,
            gate,
            experts,
            head,
        })
    }

    pub fn config(&self) -> &MoeConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn shared_index(&self) -> usize {
        self.cfg.n_experts
    }

    fn check_batch(&self, batch: &[ImuWindow]) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Shape {
                op: "moe_forward",
                lhs: vec![0],
                rhs: vec![INPUT_ROWS, self.cfg.window_len],
            });
        }
        if let Some(w) = batch.iter().find(|w| w.len() != self.cfg.window_len) {
            return Err(Error::Shape {
                op: "moe_forward",
                lhs: vec![INPUT_ROWS, w.len()],
                rhs: vec![INPUT_ROWS, self.cfg.window_len],
            });
        }
        Ok(())
    }

    /// Records the raw `[B, 9, L]` input on the tape.
    pub fn input(&self, tape: &mut Tape, batch: &[ImuWindow]) -> Result<Var> {
        self.check_batch(batch)?;
        let data = batch.iter().flat_map(|w| w.data().iter().copied()).collect();
        tape.constant(vec![batch.len(), INPUT_ROWS, self.cfg.window_len], data)
    }

    /// Records the patchified `[B, N_patch, 9·L_feature]` input on the tape.
    pub fn patches(&self, tape: &mut Tape, batch: &[ImuWindow]) -> Result<Var> {
        self.check_batch(batch)?;
        let mut data = Vec::with_capacity(batch.len() * INPUT_ROWS * self.cfg.window_len);
        for w in batch {
            data.extend(w.patchify(self.cfg.n_patch, self.cfg.l_feature)?);
        }
        tape.constant(vec![batch.len(), self.cfg.n_patch, self.cfg.patch_dim()], data)
    }

    /// Gate probabilities `[B, N]` for a `[B, 9, L]` input.
    pub fn gate_forward(&self, tape: &mut Tape, bind: &mut Binder<'_>, input: Var) -> Result<Var> {
        let h = self.gate.conv.apply_conv(tape, bind, input)?;
        let h = tape.gelu(h);
        let h = tape.global_avg_pool(h)?;
        let logits = self.gate.out.apply(tape, bind, h)?;
        Ok(tape.softmax(logits))
    }

    /// Features `[n, N_patch, L_out]` of expert `id` (`N` is the shared expert).
    pub fn expert_forward(&self, tape: &mut Tape, bind: &mut Binder<'_>, id: usize, patches: Var) -> Result<Var> {
        let e = self.experts.get(id).ok_or_else(|| {
            Error::Contract(format!("expert {id} out of range (N = {})", self.cfg.n_experts))
        })?;
        e.forward(tape, bind, patches)
    }

    /// Full forward pass on the tape.
    pub fn forward(&self, tape: &mut Tape, bind: &mut Binder<'_>, batch: &[ImuWindow], capacity: Capacity) -> Result<MoeForward> {
        let b = batch.len();
        let n = self.cfg.n_experts;
        let input = self.input(tape, batch)?;
        let patches = self.patches(tape, batch)?;

        let probs = self.gate_forward(tape, bind, input)?;
        let decision = topk_route(tape.value(probs), b, &self.cfg, capacity)?;
        let weights = tape.masked_renorm(probs, &decision.mask())?;

        let mut routed: Option<Var> = None;
        for e in 0..n {
            let rows = decision.samples_for(e);
            if rows.is_empty() {
                continue;
            }
            let x = tape.gather_rows(patches, &rows)?;
            let f = self.expert_forward(tape, bind, e, x)?;
            let flat: Vec<usize> = rows.iter().map(|&r| r * n + e).collect();
            let w = tape.gather_flat(weights, &flat)?;
            let f = tape.scale_rows(f, w)?;
            let f = tape.scatter_rows(f, &rows, b)?;
            routed = Some(match routed {
                Some(acc) => tape.add(acc, f)?,
                None => f,
            });
        }
        let shared = self.expert_forward(tape, bind, self.shared_index(), patches)?;
        let routed = match routed {
            Some(r) => r,
            None => tape.constant(tape.shape(shared).to_vec(), vec![0.0; tape.value(shared).len()])?,
        };

        let h = tape.concat_last(routed, shared)?;
        let h = self.head.fuse.apply(tape, bind, h)?;
        let h = tape.transpose_last2(h)?;
        let h = tape.global_avg_pool(h)?;
        let h = self.head.hidden.apply(tape, bind, h)?;
        let h = tape.gelu(h);
        let velocity = self.head.velocity.apply(tape, bind, h)?;
        let log_var = self.head.log_var.apply(tape, bind, h)?;
        Ok(MoeForward {
            velocity,
            log_var,
            probs,
            decision,
        })
    }

    /// Inference without gradients.
    pub fn predict(&self, batch: &[ImuWindow], capacity: Capacity) -> Result<(Vec<VelocityEstimate>, GateDecision)> {
        let mut tape = Tape::new();
        let mut bind = Binder::new(&self.params);
        let out = self.forward(&mut tape, &mut bind, batch, capacity)?;
        let v = tape.value(out.velocity);
        let s = tape.value(out.log_var);
        let est = v
            .chunks(3)
            .zip(s.chunks(3))
            .map(|(v, s)| {
                VelocityEstimate::new(
                    Vector3::from_column_slice(v),
                    Vector3::new(s[0].exp(), s[1].exp(), s[2].exp()),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((est, out.decision))
    }

    /// Replaces all parameter values; names and shapes must match this model.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        let same = self.params.len() == other.len()
            && self
                .params
                .iter()
                .zip(other.iter())
                .all(|((_, a, ta), (_, b, tb))| a == b && ta.shape() == tb.shape());
        if !same {
            return Err(Error::Checkpoint("parameter layout does not match the configuration".into()));
        }
        self.params.copy_values_from(other);
        Ok(())
    }
}
