mod common;

use common::tiny;
use stp_cli::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use stp_cli::config::TrainConfig;
use stp_cli::train::{Trainer, DATA_STREAM, INIT_STREAM};
use stp_core::autodiff::{adam_step, AdamConfig, AdamState};
use stp_core::curriculum::{epsilon_at, eta_at, RssMode, SamplingMask, Strategy};
use stp_core::data::{gen_batch, gen_sequence, save_dataset};
use stp_core::network::{init_model, rollout, Model, Variant};
use stp_core::{Error, Rng, Tape};

fn params_of(m: &Model) -> Vec<(String, Vec<f32>)> {
    m.store.iter().map(|(_, p)| (p.name.clone(), p.value.data().to_vec())).collect()
}

#[test]
fn one_iteration_of_a_one_layer_model_is_finite() {
    for v in [Variant::ConvLstmStack, Variant::MFlow, Variant::StLstm, Variant::StLstmAction] {
        let cfg = TrainConfig { layers: 1, iters: 1, ..tiny(v) };
        let mut t = Trainer::new(cfg).unwrap();
        let logs = t.run().unwrap();
        assert_eq!(logs.len(), 1);
        assert!(logs[0].total.is_finite() && logs[0].total > 0.0, "{v}");
        assert_eq!(t.k, 1);
    }
}

#[test]
fn standard_curriculum_without_decoupling_is_plain_teacher_forcing() {
    let cfg = TrainConfig {
        lambda_dec: 0.0,
        rss_strategy: Strategy::Standard,
        ss_decay: f64::INFINITY,
        iters: 5,
        ..tiny(Variant::StLstm)
    };
    let mut trainer = Trainer::new(cfg.clone()).unwrap();
    let traced: Vec<f64> = trainer.run().unwrap().iter().map(|l| l.total).collect();
    assert!(trainer.curriculum.probabilities(4) == (1.0, 1.0));

    // the same optimization written out by hand
    let master = Rng::new(cfg.seed);
    let mut model: Model = init_model(&cfg.network(1), &mut master.split(INIT_STREAM)).unwrap();
    let mut adam = AdamState::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() }, &model.store);
    let mut reference = Vec::new();
    for k in 0..cfg.iters {
        let seq = gen_batch(&cfg.dataset(), cfg.batch, &mut master.split(DATA_STREAM).split(k)).unwrap();
        let positions = cfg.t_in + cfg.k_out - 1;
        let mask = SamplingMask::all_true(cfg.batch, positions).unwrap();
        let mut tape = Tape::new();
        let r = rollout(&mut tape, &model, &seq, cfg.t_in, cfg.k_out, &mask).unwrap();
        let mut sum = tape.mse_sum(r.predictions[0], r.targets[1]).unwrap();
        for i in 1..positions {
            let l = tape.mse_sum(r.predictions[i], r.targets[i + 1]).unwrap();
            sum = tape.add(sum, l).unwrap();
        }
        let loss = tape.scale(sum, 1.0 / cfg.batch as f32);
        reference.push(tape.value(loss).data()[0] as f64);
        model.store.zero_grad();
        tape.backward(loss, &mut model.store).unwrap();
        model.store.clip_grad_norm(cfg.clip as f32);
        adam_step(&mut model.store, &mut adam).unwrap();
    }
    assert_eq!(traced, reference);
    assert_eq!(params_of(&trainer.model), params_of(&model));
}

#[test]
fn identical_configs_give_identical_traces() {
    let cfg = TrainConfig { rss_strategy: Strategy::Rss2, ..tiny(Variant::StLstm) };
    let a = Trainer::new(cfg.clone()).unwrap().run().unwrap();
    let b = Trainer::new(cfg.clone()).unwrap().run().unwrap();
    assert_eq!(a, b);
    let c = Trainer::new(TrainConfig { seed: 1, ..cfg }).unwrap().run().unwrap();
    assert_ne!(a, c);
}

#[test]
fn loss_components_add_up_and_schedules_are_logged_exactly() {
    for mode in [RssMode::Linear, RssMode::Exponential, RssMode::Sigmoid] {
        let cfg = TrainConfig {
            lambda_dec: 0.7,
            rss_strategy: Strategy::Rss1,
            rss_mode: mode,
            iters: 8,
            ..tiny(Variant::StLstm)
        };
        let mut t = Trainer::new(cfg).unwrap();
        let cur = t.curriculum;
        for log in t.run().unwrap() {
            let sum = log.recon + 0.7 * log.decouple;
            assert!((sum - log.total).abs() <= 1e-6 * log.total.abs(), "{log:?}");
            assert!(log.decouple > 0.0);
            assert_eq!(log.epsilon, epsilon_at(&cur.rss, log.k));
            assert_eq!(log.eta, eta_at(&cur.ss, log.k));
        }
    }
    // no decoupling term for the single-memory variants
    let mut t = Trainer::new(tiny(Variant::ConvLstmStack)).unwrap();
    for log in t.run().unwrap() {
        assert_eq!(log.decouple, 0.0);
        assert_eq!(log.recon, log.total);
    }
}

#[test]
fn resuming_from_a_checkpoint_is_bit_exact() {
    for v in [Variant::StLstm, Variant::StLstmAction, Variant::MFlow] {
        let cfg = TrainConfig {
            rss_strategy: Strategy::Rss2,
            iters: 6,
            ..tiny(v)
        };
        let mut whole = Trainer::new(cfg.clone()).unwrap();
        let full_logs = whole.run().unwrap();

        let mut first = Trainer::new(cfg).unwrap();
        first.run_until(3, |_| {}).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("half.stpc");
        save_checkpoint(&path, &first.checkpoint()).unwrap();
        let mut second = Trainer::from_checkpoint(load_checkpoint(&path).unwrap()).unwrap();
        assert_eq!(second.k, 3);
        let rest = second.run().unwrap();

        // the schedule continues from k = 3 rather than restarting
        assert_eq!(rest[0].k, 3);
        assert_eq!(rest[0].epsilon, epsilon_at(&second.curriculum.rss, 3));
        assert_eq!(&full_logs[3..], &rest[..]);
        assert_eq!(params_of(&whole.model), params_of(&second.model), "{v}");
        assert_eq!(whole.adam.step, second.adam.step);
    }
}

#[test]
fn fixed_dataset_training_and_non_finite_abort() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.stpd");
    let base = tiny(Variant::StLstm);
    let mut rng = Rng::new(3);
    let mut seqs: Vec<_> = (0..5).map(|_| gen_sequence(&base.dataset(), &mut rng).unwrap()).collect();
    save_dataset(&path, &seqs).unwrap();
    let cfg = TrainConfig { data: Some(path.clone()), iters: 3, ..base.clone() };
    let logs = Trainer::new(cfg.clone()).unwrap().run().unwrap();
    assert!(logs.iter().all(|l| l.total.is_finite()));

    for s in &mut seqs {
        s.frames[1].data_mut()[0] = f32::NAN;
    }
    save_dataset(&path, &seqs).unwrap();
    let err = Trainer::new(cfg).unwrap().step().unwrap_err();
    assert!(matches!(&err, Error::Numeric(m) if m.contains("iteration 0")), "{err}");

    let short = TrainConfig { t_in: 4, k_out: 4, data: Some(path), ..base };
    assert!(matches!(Trainer::new(short), Err(Error::Config(_))));
}

#[test]
fn checkpoint_bytes_round_trip() {
    let mut t = Trainer::new(tiny(Variant::StLstm)).unwrap();
    t.run_until(2, |_| {}).unwrap();
    let bytes = encode(&t.checkpoint()).unwrap();
    let back = decode(&bytes).unwrap();
    assert_eq!(back.iteration, 2);
    assert_eq!(back.config, t.cfg);
    assert_eq!(params_of(&back.model), params_of(&t.model));
    assert_eq!(encode(&back).unwrap(), bytes);
}
