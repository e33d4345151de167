//! Policy networks: the mixture-of-experts teacher encoder with
//! terrain-conditioned gating, the depth-driven recurrent student encoder,
//! the shared Gaussian action head, and the value network.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, GruCell, Mlp, ParameterStore, Tape, Var};
use crate::sim::observe::{OBS_DIM, PRIVILEGED_DIM};
use crate::sim::{DEPTH_OUT_H, DEPTH_OUT_W};
use crate::tensor::Tensor;
use crate::terrain::SCAN_LEN;

pub const ACTION_DIM: usize = 6;
pub const LATENT_DIM: usize = 64;
pub const NUM_EXPERTS: usize = 4;
pub const GATE_HEADS: usize = 4;
pub const TERRAIN_ONE_HOT: usize = 4;
/// Teacher state: proprioception + privileged + height scan.
pub const TEACHER_STATE_DIM: usize = OBS_DIM + PRIVILEGED_DIM + SCAN_LEN;
pub const HISTORY_LEN: usize = 5;
pub const STUDENT_HISTORY_DIM: usize = HISTORY_LEN * OBS_DIM;
pub const STUDENT_HIDDEN_DIM: usize = 128;

pub const LOG_STD_MIN: f32 = -4.0;
pub const LOG_STD_MAX: f32 = 1.0;

/// Diagonal Gaussian policy output.
pub struct ActionDistribution {
    /// (B x 6) mean.
    pub mean: Var,
    /// (1 x 6) log std, clamped.
    pub log_std: Var,
}

fn head_mlp(prefix: &str) -> Mlp {
    Mlp::new(
        &format!("{prefix}.head"),
        &[LATENT_DIM + OBS_DIM, 128, 64, ACTION_DIM],
    )
    .with_out_gain(0.01)
}

fn register_log_std(store: &mut ParameterStore, prefix: &str) -> Result<()> {
    store.add(
        &format!("{prefix}.log_std"),
        Tensor::new(vec![1, ACTION_DIM], vec![0.0; ACTION_DIM])?,
    )
}

/// Shared Gaussian head: latent + current proprioception -> action mean.
fn action_head(
    tape: &mut Tape,
    store: &ParameterStore,
    head: &Mlp,
    prefix: &str,
    latent: Var,
    obs: Var,
) -> Result<ActionDistribution> {
    let x = tape.concat_cols(&[latent, obs])?;
    let mean = head.forward(tape, store, x)?;
    let raw = tape.param(store, &format!("{prefix}.log_std"));
    let log_std = tape.clamp(raw, LOG_STD_MIN, LOG_STD_MAX);
    Ok(ActionDistribution { mean, log_std })
}

/// Mixture-of-experts teacher with terrain-aware gating and privileged value
/// network. With `use_moe` off, a single expert encodes the state and the
/// gate is skipped (ablation).
pub struct TeacherPolicy {
    pub use_moe: bool,
    experts: Vec<Mlp>,
    gate: Mlp,
    head: Mlp,
    value: Mlp,
}

impl TeacherPolicy {
    pub fn new(use_moe: bool) -> Self {
        let expert_count = if use_moe { NUM_EXPERTS } else { 1 };
        let experts = (0..expert_count)
            .map(|i| Mlp::new(&format!("teacher.expert{i}"), &[TEACHER_STATE_DIM, 256, 128, LATENT_DIM]))
            .collect();
        TeacherPolicy {
            use_moe,
            experts,
            gate: Mlp::new(
                "teacher.gate",
                &[TEACHER_STATE_DIM + TERRAIN_ONE_HOT, 256, 128, LATENT_DIM],
            ),
            head: head_mlp("teacher"),
            value: Mlp::new(
                "teacher.value",
                &[TEACHER_STATE_DIM + TERRAIN_ONE_HOT, 256, 128, 1],
            ),
        }
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        for e in &self.experts {
            e.register(store, rng)?;
        }
        if self.use_moe {
            self.gate.register(store, rng)?;
            store.add(
                "teacher.expert_keys",
                crate::nn::orthogonal(NUM_EXPERTS, LATENT_DIM, 1.0, rng),
            )?;
        }
        self.head.register(store, rng)?;
        register_log_std(store, "teacher")?;
        self.value.register(store, rng)?;
        Ok(())
    }

    /// Gating weights: a 3-layer query network over (s_t, t_p), multi-head
    /// scaled dot products against learned expert keys summed per expert,
    /// then softmax. Heads are contiguous 16-wide slices of the query/key.
    pub fn gate_weights(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        state: Var,
        terrain: Var,
    ) -> Result<Var> {
        let x = tape.concat_cols(&[state, terrain])?;
        let query = self.gate.forward(tape, store, x)?;
        let keys = tape.param(store, "teacher.expert_keys");
        let keys_t = tape.transpose(keys);
        // per-head scaled dots summed over heads = full dot / sqrt(head_dim)
        let head_dim = (LATENT_DIM / GATE_HEADS) as f32;
        let scores = tape.matmul(query, keys_t)?;
        let scaled = tape.scale(scores, 1.0 / head_dim.sqrt());
        Ok(tape.softmax(scaled))
    }

    /// Teacher latent: gated convex combination of the expert encodings.
    /// Returns (latent, gate weights or None when MoE is off).
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        state: Var,
        terrain: Var,
    ) -> Result<(Var, Option<Var>)> {
        if !self.use_moe {
            let z = self.experts[0].forward(tape, store, state)?;
            return Ok((z, None));
        }
        let weights = self.gate_weights(tape, store, state, terrain)?;
        let mut z: Option<Var> = None;
        for (i, expert) in self.experts.iter().enumerate() {
            let zi = expert.forward(tape, store, state)?;
            let wi = tape.slice_cols(weights, i, i + 1)?;
            let weighted = tape.mul_col(zi, wi)?;
            z = Some(match z {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
        Ok((z.expect("experts nonempty"), Some(weights)))
    }

    pub fn action_dist(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        latent: Var,
        obs: Var,
    ) -> Result<ActionDistribution> {
        action_head(tape, store, &self.head, "teacher", latent, obs)
    }

    pub fn value(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        state: Var,
        terrain: Var,
    ) -> Result<Var> {
        let x = tape.concat_cols(&[state, terrain])?;
        self.value.forward(tape, store, x)
    }
}

/// Proprioception-only PPO policy (the Blind baseline).
pub struct BlindPolicy {
    encoder: Mlp,
    head: Mlp,
    value: Mlp,
}

impl Default for BlindPolicy {
    fn default() -> Self {
        Self::new()
    }
}

impl BlindPolicy {
    pub fn new() -> Self {
        BlindPolicy {
            encoder: Mlp::new("blind.encoder", &[OBS_DIM, 256, 128, LATENT_DIM]),
            head: head_mlp("blind"),
            value: Mlp::new("blind.value", &[OBS_DIM, 256, 128, 1]),
        }
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        self.encoder.register(store, rng)?;
        self.head.register(store, rng)?;
        register_log_std(store, "blind")?;
        self.value.register(store, rng)
    }

    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, obs: Var) -> Result<Var> {
        self.encoder.forward(tape, store, obs)
    }

    pub fn action_dist(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        latent: Var,
        obs: Var,
    ) -> Result<ActionDistribution> {
        action_head(tape, store, &self.head, "blind", latent, obs)
    }

    pub fn value(&self, tape: &mut Tape, store: &ParameterStore, obs: Var) -> Result<Var> {
        self.value.forward(tape, store, obs)
    }
}

/// Depth + proprioceptive-history student with a recurrent core.
pub struct StudentPolicy {
    conv1: Conv2d,
    conv2: Conv2d,
    depth_fc: Mlp,
    proprio: Mlp,
    gru: GruCell,
    latent_fc: Mlp,
    head: Mlp,
    /// Blind-student ablation: depth path replaced by zeros.
    pub use_depth: bool,
}

impl StudentPolicy {
    pub fn new(use_depth: bool) -> Self {
        let conv_flat = 32 * (DEPTH_OUT_H / 4) * (DEPTH_OUT_W / 4);
        StudentPolicy {
            conv1: Conv2d::new("student.conv1", 1, 16, 3, 2, 1),
            conv2: Conv2d::new("student.conv2", 16, 32, 3, 2, 1),
            depth_fc: {
                let mut m = Mlp::new("student.depth_fc", &[conv_flat, 128]);
                m.out_act = crate::nn::Activation::Elu;
                m
            },
            proprio: {
                let mut m = Mlp::new("student.proprio", &[STUDENT_HISTORY_DIM, 128]);
                m.out_act = crate::nn::Activation::Elu;
                m
            },
            gru: GruCell::new("student.gru", 256, STUDENT_HIDDEN_DIM),
            latent_fc: Mlp::new("student.latent", &[STUDENT_HIDDEN_DIM, LATENT_DIM]),
            head: head_mlp("student"),
            use_depth,
        }
    }

    pub fn register(&self, store: &mut ParameterStore, rng: &mut impl Rng) -> Result<()> {
        self.conv1.register(store, rng)?;
        self.conv2.register(store, rng)?;
        self.depth_fc.register(store, rng)?;
        self.proprio.register(store, rng)?;
        self.gru.register(store, rng)?;
        self.latent_fc.register(store, rng)?;
        self.head.register(store, rng)?;
        register_log_std(store, "student")
    }

    /// Copy the trained teacher head (and exploration std) into the student.
    pub fn init_head_from_teacher(
        &self,
        store: &mut ParameterStore,
        teacher: &ParameterStore,
    ) -> Result<()> {
        for layer in 0..3 {
            for part in ["w", "b"] {
                let src = format!("teacher.head.{part}{layer}");
                let dst = format!("student.head.{part}{layer}");
                if !teacher.contains(&src) {
                    return Err(Error::Checkpoint(format!(
                        "teacher checkpoint missing `{src}`"
                    )));
                }
                store.copy_value(&dst, teacher.value(&src))?;
            }
        }
        store.copy_value("student.log_std", teacher.value("teacher.log_std"))?;
        Ok(())
    }

    /// Encode one step: (history, depth, hidden) -> (latent, hidden').
    /// `depth` is (B x 48 x 64 x 1) channels-last; pass zeros when
    /// `use_depth` is off.
    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        history: Var,
        depth: Var,
        hidden: Var,
    ) -> Result<(Var, Var)> {
        let b = tape.value(history).rows();
        let depth_feat = if self.use_depth {
            let c1 = self.conv1.forward(tape, store, depth)?;
            let a1 = tape.elu(c1);
            let c2 = self.conv2.forward(tape, store, a1)?;
            let a2 = tape.elu(c2);
            let flat_dim = 32 * (DEPTH_OUT_H / 4) * (DEPTH_OUT_W / 4);
            let flat = tape.reshape(a2, vec![b, flat_dim])?;
            self.depth_fc.forward(tape, store, flat)?
        } else {
            // depth ablation feeds a zero feature so dimensions stay fixed
            tape.input(Tensor::zeros(&[b, 128]))
        };
        let prop = self.proprio.forward(tape, store, history)?;
        let x = tape.concat_cols(&[depth_feat, prop])?;
        let hidden_next = self.gru.forward(tape, store, x, hidden)?;
        let z = self.latent_fc.forward(tape, store, hidden_next)?;
        Ok((z, hidden_next))
    }

    pub fn action_dist(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        latent: Var,
        obs: Var,
    ) -> Result<ActionDistribution> {
        action_head(tape, store, &self.head, "student", latent, obs)
    }
}

/// Which policy family a checkpoint holds, by parameter prefix.
pub fn checkpoint_kind(store: &ParameterStore) -> Option<&'static str> {
    if store.contains("student.gru.wx") {
        Some("student")
    } else if store.contains("teacher.expert0.w0") {
        Some("teacher")
    } else if store.contains("blind.encoder.w0") {
        Some("blind")
    } else {
        None
    }
}
