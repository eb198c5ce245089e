use super::*;
use crate::model::tests::tiny_config;
use crate::model::NeuronId;
use proptest::prelude::*;

fn toy_data() -> Vec<Vec<Sequence>> {
    let mk = |toks: &[usize], start| Sequence::new(toks.to_vec(), start).unwrap();
    vec![
        vec![mk(&[1, 4, 5, 2, 6, 7, 3], 4), mk(&[1, 5, 2, 8, 3], 3)],
        vec![mk(&[1, 9, 10, 4, 2, 4, 10, 9, 3], 5)],
    ]
}

fn quick(steps: u64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_size: 3,
        lr: 1e-2,
        ..TrainConfig::default()
    }
}

fn sample_mask(space: crate::model::NeuronSpace) -> SelectionMask {
    let ids = [
        NeuronId::new(0, FfnModule::Gate, 3),
        NeuronId::new(1, FfnModule::Up, 0),
        NeuronId::new(1, FfnModule::Down, 7),
    ];
    SelectionMask::build(&ids, space).unwrap()
}

/// Every entry outside the mask equals its initial value bit for bit.
fn assert_frozen_outside(initial: &Model, trained: &Model, mask: &SelectionMask) {
    for (i, (a, b)) in initial.params().iter().zip(trained.params()).enumerate() {
        let cols = column_mask(initial, mask, i);
        for (k, (x, y)) in a.tensor.data().iter().zip(b.tensor.data()).enumerate() {
            let free = cols.is_some_and(|c| c[k % c.len()]);
            if !free {
                assert_eq!(x.to_bits(), y.to_bits(), "{} entry {k} moved", a.name);
            }
        }
    }
}

#[test]
fn masked_training_freezes_everything_else() {
    let initial = Model::new(tiny_config()).unwrap();
    let mut m = initial.clone();
    let mask = sample_mask(m.space());
    let log = finetune(&mut m, &toy_data(), &mask, &quick(40)).unwrap();
    assert_eq!(log.rows.len(), 40);
    assert_frozen_outside(&initial, &m, &mask);
    for id in mask.selected() {
        let lp = initial.layout().layers[id.layer];
        let w = lp.ffn_weight(id.module);
        let cols = initial.params()[w].tensor.cols();
        let before = initial.params()[w].tensor.data();
        let after = m.params()[w].tensor.data();
        let moved = (0..before.len() / cols).any(|r| before[r * cols + id.index] != after[r * cols + id.index]);
        assert!(moved, "{id} did not train");
    }
    assert_eq!(m.step(), 40);
    assert_eq!(log.rows[0].masked_param_count, mask.entry_count());
}

#[test]
fn empty_mask_and_zero_lr_change_nothing() {
    let initial = Model::new(tiny_config()).unwrap();
    let mut m = initial.clone();
    let empty = SelectionMask::empty(m.space());
    finetune(&mut m, &toy_data(), &empty, &quick(5)).unwrap();
    assert_eq!(m.checksum(), initial.checksum());
    let mut m = initial.clone();
    let cfg = TrainConfig { lr: 0.0, ..quick(5) };
    let full = SelectionMask::full(m.space());
    finetune(&mut m, &toy_data(), &full, &cfg).unwrap();
    assert_eq!(m.checksum(), initial.checksum());
}

#[test]
fn full_mask_matches_reference_trainer_bitwise() {
    let initial = Model::new(tiny_config()).unwrap();
    let mut a = initial.clone();
    let mut b = initial.clone();
    let full = SelectionMask::full(a.space());
    let la = finetune(&mut a, &toy_data(), &full, &quick(25)).unwrap();
    let lb = finetune_ffn_reference(&mut b, &toy_data(), &quick(25)).unwrap();
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(la.losses(), lb.losses());
}

#[test]
fn gradient_mask_commutes_with_delta_mask() {
    let initial = Model::new(tiny_config()).unwrap();
    let mask = sample_mask(initial.space());
    let cfg = TrainConfig {
        grad_clip: 0.0,
        ..quick(20)
    };
    let mut a = initial.clone();
    let mut b = initial.clone();
    finetune(&mut a, &toy_data(), &mask, &cfg).unwrap();
    let cfg_b = TrainConfig {
        mask_gradients: false,
        ..cfg
    };
    finetune(&mut b, &toy_data(), &mask, &cfg_b).unwrap();
    assert_eq!(a.checksum(), b.checksum());
}

#[test]
fn overfitting_one_pair_drives_loss_down() {
    let mut m = Model::new(tiny_config()).unwrap();
    let seq = Sequence::new(vec![1, 4, 5, 6, 2, 6, 5, 4, 3], 5).unwrap();
    let data = vec![vec![seq.clone()]];
    let cfg = TrainConfig {
        steps: 500,
        batch_size: 1,
        lr: 3e-3,
        ..TrainConfig::default()
    };
    train_full(&mut m, &data, &cfg).unwrap();
    let loss = m.sequence_loss(&seq).unwrap();
    assert!(loss < 0.05, "loss {loss}");
}

#[test]
fn weight_decay_is_rejected() {
    let cfg = TrainConfig {
        weight_decay: 0.01,
        ..TrainConfig::default()
    };
    assert!(matches!(cfg.validate(), Err(Error::Config(_))));
}

#[test]
fn warmup_cosine_schedule() {
    let cfg = TrainConfig {
        steps: 110,
        lr: 1.0,
        schedule: LrSchedule::WarmupCosine { warmup: 10 },
        ..TrainConfig::default()
    };
    assert_eq!(cfg.lr_at(0), 0.1);
    assert_eq!(cfg.lr_at(10), 1.0);
    assert!((cfg.lr_at(110) - 0.1).abs() < 1e-12);
}

#[test]
fn layer_thirds() {
    let g = LayerGroups::thirds(4);
    assert_eq!((0..4).map(|l| g.group(l)).collect::<Vec<_>>(), vec![0, 1, 1, 2]);
    let g = LayerGroups::thirds(32);
    assert_eq!((g.lower_end, g.middle_end), (11, 21));
}

#[test]
fn mixer_is_uniform_over_domains() {
    let data = toy_data();
    let mut mixer = DomainMixer::new(&data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let batch = mixer.next_batch(&mut rng, 2000);
    let from_second = batch.iter().filter(|s| s.len() == 9).count();
    assert!((900..1100).contains(&from_second), "{from_second}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]
    #[test]
    fn freeze_holds_for_random_masks(bits in proptest::collection::vec(any::<bool>(), 64), steps in 1u64..6) {
        let initial = Model::new(tiny_config()).unwrap();
        let space = initial.space();
        let ids: Vec<NeuronId> = space.iter().zip(bits.iter().cycle()).filter(|(_, &b)| b).map(|(id, _)| id).collect();
        let mask = SelectionMask::build(&ids, space).unwrap();
        let mut m = initial.clone();
        finetune(&mut m, &toy_data(), &mask, &quick(steps)).unwrap();
        assert_frozen_outside(&initial, &m, &mask);
    }
}
