use curlm::curriculum::{
    CurriculumConfig, DataConfig, DataCurriculum, DataInit, DataMode, ObjectiveMode, ObjectiveSchedule, PoolItem,
    TrainConfig, Trainer, UnigramModel, VocabStrategy, VocabularyCurriculum,
};
use curlm::model::{Model, ModelConfig, OptimizerConfig, Task};
use curlm::tokenizer::NUM_SPECIALS;
use curlm::wordclass::Tag;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn items(levels: &[u8]) -> Vec<PoolItem> {
    levels
        .iter()
        .enumerate()
        .map(|(i, &level)| PoolItem {
            instance_id: i as u64,
            level,
            tokens: vec![NUM_SPECIALS as u32 + (i % 20) as u32; 3],
        })
        .collect()
}

proptest! {
    #[test]
    fn token_id_prefix_is_ceil_and_monotone(v in 6usize..400, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let c = VocabularyCurriculum::from_tags(VocabStrategy::TokenId, v, None).unwrap();
        let n = v - NUM_SPECIALS;
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(c.prefix_len(lo) <= c.prefix_len(hi));
        prop_assert_eq!(c.prefix_len(hi), ((hi * n as f64) - 1e-9).ceil() as usize);
    }

    #[test]
    fn word_class_prefix_ends_on_group_boundary(tags in prop::collection::vec(0usize..4, 10..60), p in 0.01f64..1.0) {
        let v = NUM_SPECIALS + tags.len();
        let mut full = vec![Tag::Other; NUM_SPECIALS];
        full.extend(tags.iter().map(|&t| Tag::UNIVERSAL[t]));
        let c = VocabularyCurriculum::from_tags(VocabStrategy::WordClass, v, Some(full.clone())).unwrap();
        let n = c.prefix_len(p);
        let order = c.order();
        prop_assert!(n >= ((p * tags.len() as f64) - 1e-9).ceil() as usize);
        if n < order.len() {
            prop_assert_ne!(full[order[n - 1] as usize], full[order[n] as usize]);
        }
    }

    #[test]
    fn allowed_set_never_shrinks(ps in prop::collection::vec(0.0f64..1.0, 1..30)) {
        let mut c = VocabularyCurriculum::from_tags(VocabStrategy::TokenId, 100, None).unwrap();
        let mut prev = 0;
        for p in ps {
            c.update(p);
            prop_assert!(c.allowed_count() >= prev);
            prev = c.allowed_count();
        }
    }

    #[test]
    fn samples_come_from_the_easiest_window(
        levels in prop::collection::vec(1u8..=6, 20..200),
        competence in 0.0f64..=1.0,
        batch in 1usize..16,
        seed in 0u64..1000,
    ) {
        let mut data = DataCurriculum::new(items(&levels), Some(DataConfig::new(DataMode::Source))).unwrap();
        data.score_initial(None, 0).unwrap();
        let window = data.window(competence, batch);
        let n = levels.len();
        prop_assert_eq!(window, (((competence * n as f64) - 1e-9).ceil() as usize).max(batch).min(n));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let picked = data.competence_sample(competence, batch, &mut rng);
        prop_assert_eq!(picked.len(), batch.min(n));
        let mut sorted = levels.clone();
        sorted.sort();
        let hardest_allowed = sorted[window - 1];
        for i in &picked {
            prop_assert!(levels[*i] <= hardest_allowed);
        }
        let mut dedup = picked.clone();
        dedup.sort();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), picked.len());
    }

    #[test]
    fn rescore_count_matches_step_scan(first in 1u64..200, interval in 1u64..100, max in 1u64..2000) {
        let cfg = DataConfig {
            mode: DataMode::ModelPpx,
            init: Some(DataInit::Random),
            rescore_interval: interval,
            first_switch: first,
        };
        let data = DataCurriculum::new(items(&[1, 2]), Some(cfg)).unwrap();
        let scanned = (1..=max).filter(|&s| data.is_rescore_step(s)).count() as u64;
        let first_event = first.div_ceil(interval) * interval;
        let oracle = if max < first_event { 0 } else { (max - first_event) / interval + 1 };
        prop_assert_eq!(scanned, oracle);
        if first % interval == 0 {
            prop_assert_eq!(cfg.expected_rescores(max), oracle);
        }
    }

    #[test]
    fn sequential_presets_run_one_task_at_a_time(step in 1u64..=10_000) {
        for s in [ObjectiveSchedule::sequential_two_task(), ObjectiveSchedule::sequential_three_task()] {
            prop_assert_eq!(s.active_tasks(step, 10_000).len(), 1);
        }
        for (_, s) in ObjectiveSchedule::presets() {
            prop_assert!(!s.active_tasks(step, 10_000).is_empty());
        }
    }

    #[test]
    fn unigram_perplexity_is_bounded(corpus in prop::collection::vec(prop::collection::vec(0u32..8, 1..10), 1..10), probe in prop::collection::vec(0u32..8, 1..10)) {
        let um = UnigramModel::train(&corpus, 8).unwrap();
        let ppx = um.perplexity(&probe).unwrap();
        prop_assert!(ppx >= 1.0);
        let pmin = (0..8).map(|t| um.prob(t).unwrap()).fold(1.0, f64::min);
        prop_assert!(ppx <= 1.0 / pmin + 1e-9);
    }
}

#[test]
fn multitask_presets_cover_the_whole_run() {
    let (_, mt) = ObjectiveSchedule::presets()
        .into_iter()
        .find(|(_, s)| s.mode == ObjectiveMode::Multitask)
        .unwrap();
    assert!(mt.active_tasks(1, 1000).contains(&Task::Pos10));
    assert!(mt.active_tasks(1000, 1000).contains(&Task::Mlm));
}

fn small_trainer(data_cfg: Option<DataConfig>, seed: u64) -> Trainer {
    let cfg = ModelConfig {
        layers: 1,
        hidden: 16,
        intermediate: 32,
        vocab_size: 40,
        max_len: 16,
        ..ModelConfig::desk()
    };
    let pool: Vec<PoolItem> = (0..30)
        .map(|i| PoolItem {
            instance_id: i,
            level: 1 + (i % 6) as u8,
            tokens: (0..6).map(|j| 5 + ((i * 7 + j * 3) % 35) as u32).collect(),
        })
        .collect();
    let curriculum = CurriculumConfig {
        data: data_cfg,
        ..Default::default()
    };
    let mut data = DataCurriculum::new(pool, data_cfg).unwrap();
    data.score_initial(None, seed).unwrap();
    let tcfg = TrainConfig {
        optimizer: OptimizerConfig {
            max_steps: 60,
            warmup_steps: 10,
            batch_size: 4,
            ..Default::default()
        },
        curriculum,
        mask_prob: 0.3,
        seed,
    };
    Trainer::new(Model::new(cfg, &[Task::Mlm], seed).unwrap(), tcfg, data, None, None).unwrap()
}

#[test]
fn restored_trainer_continues_identically() {
    let cfg = Some(DataConfig {
        mode: DataMode::ModelPpx,
        init: Some(DataInit::Random),
        rescore_interval: 10,
        first_switch: 10,
    });
    let mut a = small_trainer(cfg, 4);
    while a.step_index() < 25 {
        a.step().unwrap();
    }
    let bytes = a.checkpoint().unwrap().to_bytes().unwrap();
    let mut b = small_trainer(cfg, 4);
    b.restore(&curlm::model::Checkpoint::from_bytes(&bytes).unwrap())
        .unwrap();
    while !a.is_done() {
        let (ra, rb) = (a.step().unwrap(), b.step().unwrap());
        assert_eq!(ra.sampled, rb.sampled);
        assert_eq!(ra.losses, rb.losses);
    }
    assert_eq!(a.model().digest(), b.model().digest());
    assert_eq!(a.data().difficulties(), b.data().difficulties());
    assert_eq!(a.data().rescores(), 6);
}

#[test]
fn restore_rejects_another_seed() {
    let a = small_trainer(None, 1);
    let mut b = small_trainer(None, 2);
    assert!(b.restore(&a.checkpoint().unwrap()).is_err());
}
