//! Train loop: one combined backward pass per generator step, discriminator
//! hinge update interleaved at a fixed ratio.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::TrainError;
use crate::losses::{
    loss_d_hinge, loss_g_adv, loss_identity, loss_siamese_margin, loss_siamese_transform,
    total_generator_loss, GeneratorLossParts, LossWeights,
};
use crate::networks::{
    discriminator_forward, generator_forward, siamese_forward, DiscriminatorParams,
    GeneratorParams, SiameseParams,
};
use crate::tensorcore::AdamState;
use crate::tensorcore::Tape;
use crate::tensorcore::{Param, TensorData};

use super::checkpoint::Checkpoint;
use super::segment::Batch;

pub struct TrainState {
    pub gen: GeneratorParams<f32>,
    pub disc: DiscriminatorParams<f32>,
    pub siam: SiameseParams<f32>,
    pub adam_g: AdamState<f32>,
    pub adam_d: AdamState<f32>,
    pub adam_s: AdamState<f32>,
    pub step: u64,
    pub config: RunConfig,
}

/// Per-step scalars; `d_loss` is present only on discriminator steps.
#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    pub step: u64,
    pub d_loss: Option<f32>,
    pub parts: GeneratorLossParts<f32>,
    pub degenerate_pairs: usize,
}

impl TrainState {
    pub fn new(config: RunConfig) -> Self {
        // Init draws come from a stream disjoint from every per-step stream.
        let mut rng = ChaCha8Rng::seed_from_u64(config.train_seed);
        rng.set_stream(u64::MAX);
        TrainState {
            gen: GeneratorParams::init(&mut rng),
            disc: DiscriminatorParams::init(&mut rng),
            siam: SiameseParams::init(&mut rng),
            adam_g: AdamState::new(config.train_adam_beta1, config.train_adam_beta2),
            adam_d: AdamState::new(config.train_adam_beta1, config.train_adam_beta2),
            adam_s: AdamState::new(config.train_adam_beta1, config.train_adam_beta2),
            step: 0,
            config,
        }
    }

    /// Sampling at step k reads only (seed, k), so a resumed run draws the
    /// same batches as an uninterrupted one.
    pub fn rng_for_step(&self, step: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.train_seed);
        rng.set_stream(step);
        rng
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::new(self.step);
        ckpt.set_config(&self.config);
        let mut put_params = |ps: Vec<&Param<f32>>| {
            for p in ps {
                ckpt.put(&format!("param:{}", p.name), p.value.clone());
                if let Some(u) = &p.sn_u {
                    ckpt.put_vec(&format!("sn_u:{}", p.name), u);
                }
            }
        };
        put_params(self.gen.params());
        put_params(self.disc.params());
        put_params(self.siam.params());
        ckpt.set_adam("opt.g", &self.adam_g);
        ckpt.set_adam("opt.d", &self.adam_d);
        ckpt.set_adam("opt.s", &self.adam_s);
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, TrainError> {
        let config = ckpt.config()?;
        let mut state = TrainState::new(config.clone());
        let fill = |ps: Vec<&mut Param<f32>>| -> Result<(), TrainError> {
            for p in ps {
                let t = ckpt.get(&format!("param:{}", p.name))?;
                if t.shape != p.value.shape {
                    return Err(TrainError::Checkpoint(format!(
                        "shape mismatch for {}: file {:?}, model {:?}",
                        p.name, t.shape, p.value.shape
                    )));
                }
                p.value = t.clone();
                if let Ok(u) = ckpt.get(&format!("sn_u:{}", p.name)) {
                    p.sn_u = Some(u.data.clone());
                }
            }
            Ok(())
        };
        fill(state.gen.params_mut())?;
        fill(state.disc.params_mut())?;
        fill(state.siam.params_mut())?;
        state.adam_g = ckpt.adam("opt.g", config.train_adam_beta1, config.train_adam_beta2)?;
        state.adam_d = ckpt.adam("opt.d", config.train_adam_beta1, config.train_adam_beta2)?;
        state.adam_s = ckpt.adam("opt.s", config.train_adam_beta1, config.train_adam_beta2)?;
        state.step = ckpt.step;
        Ok(state)
    }
}

fn check_finite(value: f32, term: &'static str, step: u64) -> Result<(), TrainError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(TrainError::NonFiniteLoss { term, step })
    }
}

pub fn train_step(state: &mut TrainState, batch: &Batch) -> Result<StepReport, TrainError> {
    let cfg = state.config.clone();
    let step = state.step;
    let weights = LossWeights {
        lambda_s: cfg.losses_lambda_s,
        lambda_id: cfg.losses_lambda_id,
        delta: cfg.losses_delta,
        eq1_literal: cfg.losses_eq1_literal,
    };

    // Generator + Siamese phase: one tape, one backward pass.
    let tape: Tape<f32> = Tape::new();
    let whisper = tape.constant(batch.whisper.clone());
    let normal = tape.constant(batch.normal.clone());
    let g_bound = state.gen.bind(&tape);
    let d_bound = state
        .disc
        .bind(&tape, cfg.train_sn_power_iters, true);
    let s_bound = state.siam.bind(&tape);

    let fake = generator_forward(&tape, &g_bound, whisper)?;
    let d_fake = discriminator_forward(&tape, &d_bound, fake)?;
    let adv = loss_g_adv(&tape, d_fake);

    let e_a = siamese_forward(&tape, &s_bound, whisper)?;
    let e_ga = siamese_forward(&tape, &s_bound, fake)?;
    let idx1: Vec<usize> = batch.pairs.iter().map(|&(a, _)| a).collect();
    let idx2: Vec<usize> = batch.pairs.iter().map(|&(_, b)| b).collect();
    let e_a1 = tape.gather_rows(e_a, &idx1)?;
    let e_a2 = tape.gather_rows(e_a, &idx2)?;
    let e_ga1 = tape.gather_rows(e_ga, &idx1)?;
    let e_ga2 = tape.gather_rows(e_ga, &idx2)?;
    let st = loss_siamese_transform(&tape, e_a1, e_a2, e_ga1, e_ga2, weights.eq1_literal)?;
    let margin = loss_siamese_margin(&tape, e_a1, e_a2, cfg.losses_delta as f32)?;

    let id_out = generator_forward(&tape, &g_bound, normal)?;
    let identity = loss_identity(&tape, id_out, normal)?;

    let (combined, parts) = total_generator_loss(&tape, adv, st.loss, margin, identity, &weights);
    check_finite(parts.adv, "adversarial", step)?;
    check_finite(parts.siamese_transform, "siamese_transform", step)?;
    check_finite(parts.siamese_margin, "siamese_margin", step)?;
    check_finite(parts.identity, "identity", step)?;

    // Detach the fake batch now; the discriminator phase reuses it after the
    // generator update.
    let fake_data = tape.value_clone(fake);
    tape.backward(combined)?;

    let g_grads: Vec<Option<Vec<f32>>> = GeneratorParams::<f32>::leaf_vars(&g_bound)
        .into_iter()
        .map(|v| tape.grad_clone(v))
        .collect();
    state
        .adam_g
        .step(&mut state.gen.params_mut(), &g_grads, cfg.train_lr_g as f32);
    let s_grads: Vec<Option<Vec<f32>>> = SiameseParams::<f32>::leaf_vars(&s_bound)
        .into_iter()
        .map(|v| tape.grad_clone(v))
        .collect();
    state
        .adam_s
        .step(&mut state.siam.params_mut(), &s_grads, cfg.train_lr_g as f32);
    drop(tape);

    // Discriminator phase on every k-th generator step.
    let mut d_loss = None;
    if (step + 1) % cfg.train_g_steps_per_d_step == 0 {
        let tape: Tape<f32> = Tape::new();
        let real = tape.constant(batch.normal.clone());
        let fake = tape.constant(fake_data);
        let d_bound = state.disc.bind(&tape, cfg.train_sn_power_iters, true);
        let d_real_s = discriminator_forward(&tape, &d_bound, real)?;
        let d_fake_s = discriminator_forward(&tape, &d_bound, fake)?;
        let loss = loss_d_hinge(&tape, d_real_s, d_fake_s);
        let loss_val = tape.scalar_value(loss);
        check_finite(loss_val, "discriminator_hinge", step)?;
        tape.backward(loss)?;
        let d_grads: Vec<Option<Vec<f32>>> = DiscriminatorParams::<f32>::leaf_vars(&d_bound)
            .into_iter()
            .map(|v| tape.grad_clone(v))
            .collect();
        state
            .adam_d
            .step(&mut state.disc.params_mut(), &d_grads, cfg.train_lr_d as f32);
        d_loss = Some(loss_val);
    }

    state.step += 1;
    Ok(StepReport {
        step,
        d_loss,
        parts,
        degenerate_pairs: st.degenerate_pairs,
    })
}

/// Run a whole utterance through the generator with frozen weights.
pub fn convert_utterance(
    gen: &GeneratorParams<f32>,
    mel: &crate::signal::MelSpectrogram,
) -> Result<crate::signal::MelSpectrogram, TrainError> {
    use super::segment::{reassemble_segments, segment_utterance, Segment, SegmentMode};
    let original_t = mel.n_frames();
    let segments = segment_utterance(mel, 0, SegmentMode::Convert)?;
    let tape: Tape<f32> = Tape::new();
    let values: Vec<Vec<f32>> = segments.iter().map(|s| s.values.clone()).collect();
    let x = tape.constant(crate::networks::segments_to_tensor(&values));
    let bound = gen.bind(&tape);
    let out = generator_forward(&tape, &bound, x)?;
    let out_data: TensorData<f32> = tape.value_clone(out);
    let n = segments.len();
    let per = out_data.data.len() / n;
    let converted: Vec<Segment> = (0..n)
        .map(|i| Segment {
            values: out_data.data[i * per..(i + 1) * per].to_vec(),
            origin: segments[i].origin,
        })
        .collect();
    Ok(reassemble_segments(&converted, original_t, mel.norm_stats))
}
