//! Cross-correlation identities, Barlow-loss modes, the frozen-teacher
//! guarantee, and the synthetic linear-teacher distillation experiment.

use pointfoot_core::distill::{
    barlow_loss, collect_student_rollouts, cross_correlation, AlignmentBatch, BarlowMode,
    DistillConfig, DistillStats, StudentCarry,
};
use pointfoot_core::nn::{ParameterStore, Tape};
use pointfoot_core::policy::{
    StudentPolicy, TeacherPolicy, ACTION_DIM, LATENT_DIM, STUDENT_HIDDEN_DIM, STUDENT_HISTORY_DIM,
};
use pointfoot_core::sim::{EnvConfig, EnvPool, DEPTH_OUT_H, DEPTH_OUT_W};
use pointfoot_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_latents(batch: usize, dim: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch * dim).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

#[test]
fn identical_latents_give_identity_correlation() {
    let b = 4096;
    let z = random_latents(b, LATENT_DIM, 0);
    let cc = cross_correlation(&z, &z, b, LATENT_DIM).unwrap();
    for i in 0..LATENT_DIM {
        let d = cc.c[i * LATENT_DIM + i];
        assert!((d - 1.0).abs() < 1e-6, "diag {i} = {d}");
        for j in 0..LATENT_DIM {
            if i != j {
                assert!(
                    cc.c[i * LATENT_DIM + j].abs() < 0.1,
                    "off-diag ({i},{j}) = {}",
                    cc.c[i * LATENT_DIM + j]
                );
            }
        }
    }
}

#[test]
fn negated_latents_give_minus_one_diagonal() {
    let b = 512;
    let z = random_latents(b, LATENT_DIM, 1);
    let neg: Vec<f32> = z.iter().map(|v| -v).collect();
    let cc = cross_correlation(&z, &neg, b, LATENT_DIM).unwrap();
    for i in 0..LATENT_DIM {
        assert!((cc.c[i * LATENT_DIM + i] + 1.0).abs() < 1e-6);
    }
}

#[test]
fn column_permuted_copy_yields_permutation_matrix() {
    let b = 256;
    let dim = 8;
    let z = random_latents(b, dim, 2);
    // rotate columns by one
    let mut zp = vec![0.0f32; b * dim];
    for r in 0..b {
        for c in 0..dim {
            zp[r * dim + (c + 1) % dim] = z[r * dim + c];
        }
    }
    let cc = cross_correlation(&z, &zp, b, dim).unwrap();
    for i in 0..dim {
        for j in 0..dim {
            let v = cc.c[i * dim + j];
            if j == (i + 1) % dim {
                assert!((v - 1.0).abs() < 1e-6, "({i},{j}) = {v}");
            } else {
                assert!(v.abs() < 0.2, "({i},{j}) = {v}");
            }
        }
    }
}

#[test]
fn degenerate_columns_are_excluded() {
    let b = 128;
    let dim = 4;
    let mut z = random_latents(b, dim, 3);
    for r in 0..b {
        z[r * dim + 2] = 0.7; // constant column
    }
    let zb = random_latents(b, dim, 4);
    let cc = cross_correlation(&z, &zb, b, dim).unwrap();
    assert_eq!(cc.degenerate_columns, 1);
    assert!(!cc.valid_a[2]);
    for j in 0..dim {
        assert_eq!(cc.c[2 * dim + j], 0.0, "excluded row must stay zero");
    }
    // excluded from the loss too: a degenerate diagonal contributes nothing
    let (_, diag, _) = barlow_loss(&cc, 0.005, BarlowMode::Standard);
    assert!(diag.is_finite());
}

#[test]
fn rejects_tiny_batches() {
    let z = random_latents(1, 4, 5);
    assert!(cross_correlation(&z, &z, 1, 4).is_err());
}

fn identity_cc(dim: usize) -> pointfoot_core::distill::CrossCorrelation {
    let mut c = vec![0.0f64; dim * dim];
    for i in 0..dim {
        c[i * dim + i] = 1.0;
    }
    pointfoot_core::distill::CrossCorrelation {
        c,
        dim,
        valid_a: vec![true; dim],
        valid_b: vec![true; dim],
        degenerate_columns: 0,
    }
}

#[test]
fn barlow_identities_at_c_equals_identity() {
    let cc = identity_cc(64);
    let (standard, diag, off) = barlow_loss(&cc, 0.005, BarlowMode::Standard);
    assert_eq!(standard, 0.0);
    assert_eq!(diag, 0.0);
    assert_eq!(off, 0.0);
    // literal mode: every off-diagonal contributes (1 - 0)^2
    let (literal, _, off_l) = barlow_loss(&cc, 0.005, BarlowMode::Literal);
    assert!((off_l - (64.0 * 63.0)).abs() < 1e-9);
    assert!((literal - 0.005 * 64.0 * 63.0).abs() < 1e-9, "{literal}");
    assert!((literal - 20.16).abs() < 1e-9);
}

#[test]
fn barlow_zero_matrix_costs_the_full_diagonal() {
    let mut cc = identity_cc(64);
    cc.c.iter_mut().for_each(|v| *v = 0.0);
    let (standard, diag, off) = barlow_loss(&cc, 0.005, BarlowMode::Standard);
    assert_eq!(diag, 64.0);
    assert_eq!(off, 0.0);
    assert_eq!(standard, 64.0);
}

#[test]
fn standard_loss_nonnegative_and_zero_only_at_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for _ in 0..50 {
        let mut cc = identity_cc(16);
        for v in cc.c.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        let (loss, _, _) = barlow_loss(&cc, 0.005, BarlowMode::Standard);
        assert!(loss >= 0.0);
    }
    let (zero, _, _) = barlow_loss(&identity_cc(16), 0.005, BarlowMode::Standard);
    assert_eq!(zero, 0.0);
}

#[test]
fn standardization_is_invariant_to_column_affine_rescale() {
    let b = 512;
    let dim = 16;
    let za = random_latents(b, dim, 7);
    let zb = random_latents(b, dim, 8);
    let mut za_scaled = za.clone();
    for r in 0..b {
        for c in 0..dim {
            za_scaled[r * dim + c] = za[r * dim + c] * (c as f32 + 0.5) - 3.0 * c as f32;
        }
    }
    let c1 = cross_correlation(&za, &zb, b, dim).unwrap();
    let c2 = cross_correlation(&za_scaled, &zb, b, dim).unwrap();
    // rescaled latents are stored back as f32, which bounds the agreement
    for (a, b) in c1.c.iter().zip(&c2.c) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn loss_invariant_under_simultaneous_column_permutation() {
    let b = 256;
    let dim = 8;
    let za = random_latents(b, dim, 9);
    let zb = random_latents(b, dim, 10);
    let perm: Vec<usize> = vec![3, 1, 4, 0, 7, 6, 2, 5];
    let permute = |z: &[f32]| {
        let mut out = vec![0.0f32; z.len()];
        for r in 0..b {
            for c in 0..dim {
                out[r * dim + perm[c]] = z[r * dim + c];
            }
        }
        out
    };
    let cc = cross_correlation(&za, &zb, b, dim).unwrap();
    let cc_p = cross_correlation(&permute(&za), &permute(&zb), b, dim).unwrap();
    for mode in [BarlowMode::Standard, BarlowMode::Literal] {
        let (l1, d1, o1) = barlow_loss(&cc, 0.005, mode);
        let (l2, d2, o2) = barlow_loss(&cc_p, 0.005, mode);
        assert!((l1 - l2).abs() < 1e-9);
        assert!((d1 - d2).abs() < 1e-9);
        assert!((o1 - o2).abs() < 1e-9);
    }
}

// ---------------------------------------------------------------------------
// distill_step behavior
// ---------------------------------------------------------------------------

fn student_setup(seed: u64, use_depth: bool) -> (StudentPolicy, ParameterStore) {
    let student = StudentPolicy::new(use_depth);
    let mut store = ParameterStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    student.register(&mut store, &mut rng).unwrap();
    (student, store)
}

/// Batch whose imitation targets are the student's own outputs.
fn self_distillation_batch(
    student: &StudentPolicy,
    store: &ParameterStore,
    b: usize,
    seed: u64,
) -> AlignmentBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let history: Vec<f32> = (0..b * STUDENT_HISTORY_DIM)
        .map(|_| rng.gen_range(-1.0..1.0))
        .collect();
    let depth = vec![0.0f32; b * DEPTH_OUT_H * DEPTH_OUT_W];
    let hidden = vec![0.0f32; b * STUDENT_HIDDEN_DIM];
    let obs: Vec<f32> = (0..b * 29).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut tape = Tape::new();
    let h = tape.input(Tensor::new(vec![b, STUDENT_HISTORY_DIM], history.clone()).unwrap());
    let d = tape.input(Tensor::new(vec![b, DEPTH_OUT_H, DEPTH_OUT_W, 1], depth.clone()).unwrap());
    let hid = tape.input(Tensor::new(vec![b, STUDENT_HIDDEN_DIM], hidden.clone()).unwrap());
    let o = tape.input(Tensor::new(vec![b, 29], obs.clone()).unwrap());
    let (z, _) = student.encode(&mut tape, store, h, d, hid).unwrap();
    let dist = student.action_dist(&mut tape, store, z, o).unwrap();
    let z_v = tape.value(z).data().to_vec();
    let mean_v = tape.value(dist.mean).data().to_vec();
    AlignmentBatch {
        batch: b,
        history: Tensor::new(vec![b, STUDENT_HISTORY_DIM], history).unwrap(),
        depth: Tensor::new(vec![b, DEPTH_OUT_H, DEPTH_OUT_W, 1], depth).unwrap(),
        hidden: Tensor::new(vec![b, STUDENT_HIDDEN_DIM], hidden).unwrap(),
        obs: Tensor::new(vec![b, 29], obs).unwrap(),
        teacher_latent: Tensor::new(vec![b, LATENT_DIM], z_v.clone()).unwrap(),
        teacher_mean: Tensor::new(vec![b, ACTION_DIM], mean_v.clone()).unwrap(),
        student_mean: Tensor::new(vec![b, ACTION_DIM], mean_v).unwrap(),
        applied_actions: Tensor::new(vec![b, ACTION_DIM], vec![0.0; b * ACTION_DIM]).unwrap(),
    }
}

#[test]
fn self_distillation_is_a_fixed_point() {
    let (student, mut store) = student_setup(11, false);
    let batch = self_distillation_batch(&student, &store, 128, 12);
    let cfg = DistillConfig {
        lr: 0.0,
        ..Default::default()
    };
    let stats: DistillStats = pointfoot_core::distill::distill_step(
        &batch, &student, &mut store, &cfg,
    )
    .unwrap();
    assert!(stats.mse < 1e-10, "self-distillation MSE {}", stats.mse);
    // same latents on both sides: C ~ I up to batch-statistical noise
    assert!(
        stats.bt_diag < 1e-6,
        "diagonal alignment at the floor, got {}",
        stats.bt_diag
    );
}

#[test]
fn batch_below_64_is_rejected() {
    let (student, mut store) = student_setup(13, false);
    let batch = self_distillation_batch(&student, &store, 32, 14);
    let cfg = DistillConfig::default();
    assert!(pointfoot_core::distill::distill_step(&batch, &student, &mut store, &cfg).is_err());
}

#[test]
fn synthetic_linear_teacher_mse_drops_tenfold() {
    // teacher: fixed linear map of an 8-dim state (weights fade on the
    // unobserved half); student sees a noisy 4-dim projection embedded in
    // its history input
    let (student, mut store) = student_setup(15, false);
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let mut w = [[0.0f64; 8]; ACTION_DIM];
    for row in w.iter_mut() {
        for (c, v) in row.iter_mut().enumerate() {
            *v = rng.gen_range(-1.0..1.0) * if c < 4 { 1.0 } else { 0.05 };
        }
    }
    // frozen "teacher" parameters live in their own store; nothing below
    // ever hands it to the optimizer
    let mut teacher_store = ParameterStore::new();
    teacher_store
        .add(
            "teacher.linear",
            Tensor::new(vec![ACTION_DIM, 8], w.iter().flatten().map(|v| *v as f32).collect())
                .unwrap(),
        )
        .unwrap();
    let teacher_print = teacher_store.fingerprint();

    let cfg = DistillConfig {
        lr: 1e-3,
        ..Default::default()
    };
    let b = 64;
    let mut first = None;
    let mut best = f64::MAX;
    for step in 0..2000 {
        let mut history = vec![0.0f32; b * STUDENT_HISTORY_DIM];
        let mut targets = vec![0.0f32; b * ACTION_DIM];
        let mut latents = vec![0.0f32; b * LATENT_DIM];
        for i in 0..b {
            let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            for j in 0..4 {
                history[i * STUDENT_HISTORY_DIM + j] =
                    (x[j] + rng.gen_range(-0.05..0.05)) as f32;
            }
            for (a, row) in w.iter().enumerate() {
                let y: f64 = row.iter().zip(&x).map(|(wv, xv)| wv * xv).sum();
                targets[i * ACTION_DIM + a] = y as f32;
            }
            // teacher latent: fixed linear embed of the state
            for k in 0..LATENT_DIM {
                latents[i * LATENT_DIM + k] = (x[k % 8] * ((k / 8 + 1) as f64 * 0.25)) as f32;
            }
        }
        let batch = AlignmentBatch {
            batch: b,
            history: Tensor::new(vec![b, STUDENT_HISTORY_DIM], history).unwrap(),
            depth: Tensor::zeros(&[b, DEPTH_OUT_H, DEPTH_OUT_W, 1]),
            hidden: Tensor::zeros(&[b, STUDENT_HIDDEN_DIM]),
            obs: Tensor::zeros(&[b, 29]),
            teacher_latent: Tensor::new(vec![b, LATENT_DIM], latents).unwrap(),
            teacher_mean: Tensor::new(vec![b, ACTION_DIM], targets.clone()).unwrap(),
            student_mean: Tensor::zeros(&[b, ACTION_DIM]),
            applied_actions: Tensor::zeros(&[b, ACTION_DIM]),
        };
        let stats =
            pointfoot_core::distill::distill_step(&batch, &student, &mut store, &cfg).unwrap();
        if step == 0 {
            first = Some(stats.mse);
        }
        if step >= 1900 {
            best = best.min(stats.mse);
        }
    }
    let first = first.unwrap();
    assert!(
        best * 10.0 <= first,
        "MSE {first} -> {best}: less than 10x improvement"
    );
    assert_eq!(
        teacher_store.fingerprint(),
        teacher_print,
        "teacher parameters must stay bit-identical"
    );
}

// ---------------------------------------------------------------------------
// student-driven collection
// ---------------------------------------------------------------------------

#[test]
fn collection_uses_student_actions_and_keeps_teacher_frozen() {
    let cfg = EnvConfig::default();
    let mut pool = EnvPool::new(4, 31, cfg).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(32);

    let teacher = TeacherPolicy::new(true);
    let mut teacher_store = ParameterStore::new();
    teacher.register(&mut teacher_store, &mut rng).unwrap();
    let teacher_print = teacher_store.fingerprint();

    let (student, student_store) = student_setup(33, true);
    let mut carry = StudentCarry::new(4);
    let dcfg = DistillConfig {
        horizon: 16,
        action_noise: false, // deterministic: applied action == student mean
        ..Default::default()
    };
    let (batch, metrics) = collect_student_rollouts(
        &mut pool,
        &student,
        &student_store,
        &teacher,
        &teacher_store,
        &mut carry,
        &dcfg,
        &mut rng,
    )
    .unwrap();

    assert_eq!(batch.batch, 64);
    assert_eq!(batch.teacher_latent.shape(), &[64, LATENT_DIM]);
    assert_eq!(batch.teacher_mean.shape(), &[64, ACTION_DIM]);
    assert!(metrics.mean_reward.is_finite());

    // provenance: without exploration noise the applied actions are exactly
    // the student means
    assert_eq!(batch.applied_actions.data(), batch.student_mean.data());

    // and the student means are reproducible from the stored inputs
    let mut tape = Tape::new();
    let h = tape.input(batch.history.clone());
    let d = tape.input(batch.depth.clone());
    let hid = tape.input(batch.hidden.clone());
    let o = tape.input(batch.obs.clone());
    let (z, _) = student.encode(&mut tape, &student_store, h, d, hid).unwrap();
    let dist = student.action_dist(&mut tape, &student_store, z, o).unwrap();
    assert_eq!(
        tape.value(dist.mean).data(),
        batch.student_mean.data(),
        "stored means must reproduce from stored inputs"
    );

    assert_eq!(teacher_store.fingerprint(), teacher_print);
}

#[test]
fn hidden_state_resets_on_episode_boundary() {
    let mut carry = StudentCarry::new(2);
    carry.push_obs(0, &[1.0; 29]);
    carry.push_obs(0, &[2.0; 29]);
    carry.hidden[0] = 7.0;
    carry.reset_env(0);
    assert!(carry.hidden[..STUDENT_HIDDEN_DIM].iter().all(|v| *v == 0.0));
    assert!(carry.history[..STUDENT_HISTORY_DIM].iter().all(|v| *v == 0.0));
    // fresh episode: first obs fills the whole window
    carry.push_obs(0, &[3.0; 29]);
    assert!(carry.history[..STUDENT_HISTORY_DIM].iter().all(|v| *v == 3.0));
}
