//! End-to-end behaviour of the round loop.

mod common;

use common::{cluster_splits, config, max_abs_diff, shard_splits, simulation, synth};
use hbfl_core::data::{synth_generate, ClientSplit, LabeledDataset, SynthSpec};
use hbfl_core::nn::{self, MlpArch};
use hbfl_core::optim::{self, LocalSchedule, StepRule};
use hbfl_core::rng::{self, purpose};
use hbfl_core::runtime::{self, FederatedConfig, LrSchedule, ServerState, Simulation, Strategy, WarmStart};

const ALL: [Strategy; 5] = [
    Strategy::Niw,
    Strategy::Mixture,
    Strategy::FedAvg,
    Strategy::FedProx,
    Strategy::FedBabu,
];

fn run(sim: &mut Simulation) {
    sim.run(|_| Ok(())).unwrap();
}

#[test]
fn same_seed_gives_identical_records() {
    let data = synth(2, 1.0, 30, 1);
    for s in ALL {
        let mut a = simulation(config(s, 6), &data, shard_splits(&data, 6, 2, 1));
        let mut b = simulation(config(s, 6), &data, shard_splits(&data, 6, 2, 1));
        run(&mut a);
        run(&mut b);
        assert_eq!(a.records(), b.records(), "{s:?}");
        assert_eq!(a.server(), b.server(), "{s:?}");
        let mut c = simulation(FederatedConfig { seed: 12, ..config(s, 6) }, &data, shard_splits(&data, 6, 2, 1));
        run(&mut c);
        assert_ne!(a.server(), c.server(), "{s:?}: seed had no effect");
    }
}

#[test]
fn resume_equals_uninterrupted_run() {
    let data = synth(2, 1.0, 30, 2);
    for s in ALL {
        for warm in [WarmStart::FromServer, WarmStart::Retained] {
            let cfg = FederatedConfig { warm_start: warm, ..config(s, 6) };
            let mut full = simulation(cfg.clone(), &data, cluster_splits(&data, 6, 2));
            run(&mut full);

            let mut first = simulation(cfg.clone(), &data, cluster_splits(&data, 6, 2));
            for _ in 0..3 {
                first.run_round().unwrap();
            }
            let saved = first.state().clone();
            drop(first);
            let arch = common::small_arch(&data, 6);
            let mut resumed = Simulation::resume(cfg, arch, data.dataset.clone(), cluster_splits(&data, 6, 2), None, saved).unwrap();
            run(&mut resumed);
            assert_eq!(full.state(), resumed.state(), "{s:?} {warm:?}");
        }
    }
}

#[test]
fn body_update_keeps_head_bit_identical() {
    let data = synth(2, 1.0, 30, 3);
    for s in ALL {
        let mut sim = simulation(FederatedConfig { body_update: true, ..config(s, 6) }, &data, shard_splits(&data, 6, 2, 3));
        let head = nn::head_freeze_mask(sim.arch());
        let heads = |sim: &Simulation| -> Vec<Vec<f64>> {
            match sim.server() {
                ServerState::Niw { global } => vec![global.m0[head.clone()].to_vec(), global.v0_diag[head.clone()].to_vec()],
                ServerState::Average { params } => vec![params[head.clone()].to_vec()],
                ServerState::Mixture { global } => global.prototypes.iter().map(|r| r[head.clone()].to_vec()).collect(),
            }
        };
        let before = heads(&sim);
        let body_before = sim.server_start();
        run(&mut sim);
        assert_eq!(heads(&sim), before, "{s:?}");
        assert_ne!(sim.server_start()[..head.start], body_before[..head.start], "{s:?}: body frozen too");
        let init = nn::init_params(sim.arch(), &mut rng::stream(sim.config().seed, &[purpose::INIT]));
        assert_eq!(sim.server_start()[head.clone()], init[head.clone()], "{s:?}: head is not the random init");
    }
}

#[test]
fn fedavg_single_client_single_batch_is_one_sgd_step() {
    let data = synth(1, 0.0, 10, 4);
    let splits = vec![ClientSplit {
        train: (0..data.dataset.len()).collect(),
        test: vec![],
    }];
    let test = data.dataset.clone();
    let cfg = FederatedConfig {
        strategy: Strategy::FedAvg,
        num_clients: 1,
        fraction: 1.0,
        rounds: 1,
        batch_size: 1000,
        lr: 0.1,
        body_update: false,
        lr_schedule: LrSchedule::Constant,
        ..Default::default()
    };
    let arch = common::small_arch(&data, 5);
    let mut sim = Simulation::new(cfg.clone(), arch.clone(), data.dataset.clone(), splits, Some(test)).unwrap();
    let old = sim.server_start();
    sim.run_round().unwrap();
    let all: Vec<usize> = (0..data.dataset.len()).collect();
    let (_, g) = nn::loss_and_grad(&old, &arch, &data.dataset.batch(&all), None).unwrap();
    let expected: Vec<f64> = old.iter().zip(g.iter()).map(|(o, g)| o - 0.1 * g).collect();
    assert!(max_abs_diff(&sim.server_start(), &expected) < 1e-12);
}

fn balanced(classes: usize, per_class: usize, sep: f64, seed: u64) -> LabeledDataset {
    let spec = SynthSpec {
        num_clusters: 1,
        classes,
        dims: 8,
        per_class,
        shift_scale: 0.0,
        class_sep: sep,
        permute_labels: false,
    };
    synth_generate(&spec, &mut rng::stream(seed, &[])).unwrap().dataset
}

#[test]
fn untrained_model_is_near_chance() {
    // No class structure: any fixed predictor is right with probability 0.1.
    let data = balanced(10, 200, 0.0, 5);
    let arch = MlpArch::new(vec![8, 32, 10]).unwrap();
    let all: Vec<usize> = (0..data.len()).collect();
    for seed in 0..5 {
        let params = nn::init_params(&arch, &mut rng::stream(seed, &[purpose::INIT]));
        let acc = runtime::accuracy(&params, &arch, &data, &all).unwrap();
        // 2000 rows: the binomial sd is about 0.007, so the band is > 7 sd.
        assert!((0.05..=0.2).contains(&acc), "seed {seed}: {acc}");
    }
}

#[test]
fn separable_toy_set_is_memorized() {
    let inputs: Vec<f64> = (0..40)
        .flat_map(|i| {
            let x = if i % 2 == 0 { 1.0 + 0.05 * i as f64 } else { -1.0 - 0.05 * i as f64 };
            [x, 0.1 * (i % 5) as f64]
        })
        .collect();
    let labels: Vec<usize> = (0..40).map(|i| i % 2).collect();
    let data = LabeledDataset::new(inputs, labels, 2, 2).unwrap();
    let arch = MlpArch::new(vec![2, 4, 2]).unwrap();
    let mut params = nn::init_params(&arch, &mut rng::stream(6, &[]));
    let all: Vec<usize> = (0..40).collect();
    let schedule = LocalSchedule {
        epochs: 300,
        batch_size: 10,
        lr: 0.1,
        rule: StepRule::Explicit,
    };
    optim::run_epochs(&mut params, &data, &all, &schedule, None, &mut rng::stream(6, &[1]), |m, b, _| {
        runtime::fedprox_client_objective(m, b, &[], 0.0, &arch)
    })
    .unwrap();
    assert_eq!(runtime::accuracy(&params, &arch, &data, &all).unwrap(), 1.0);
    let mut shuffled = all.clone();
    shuffled.reverse();
    shuffled.swap(3, 17);
    assert_eq!(
        runtime::accuracy(&params, &arch, &data, &shuffled).unwrap(),
        runtime::accuracy(&params, &arch, &data, &all).unwrap()
    );
}

#[test]
fn global_accuracy_invariant_to_test_order() {
    let data = synth(2, 1.0, 30, 7);
    let mut sim = simulation(config(Strategy::FedAvg, 6), &data, shard_splits(&data, 6, 2, 7));
    run(&mut sim);
    let p = sim.predictor(sim.completed_rounds()).unwrap();
    let test = sim.test_data();
    let fwd: Vec<usize> = (0..test.len()).collect();
    let rev: Vec<usize> = fwd.iter().rev().copied().collect();
    assert_eq!(p.accuracy(test, &fwd).unwrap(), p.accuracy(test, &rev).unwrap());
}

#[test]
fn zero_personalization_epochs_reproduce_global_accuracy() {
    let data = synth(2, 1.0, 30, 8);
    for s in [Strategy::FedAvg, Strategy::FedProx, Strategy::FedBabu] {
        let mut sim = simulation(config(s, 6), &data, shard_splits(&data, 6, 2, 8));
        run(&mut sim);
        let rep = sim.evaluate_personalized(0).unwrap();
        for (id, personal, global) in &rep.clients {
            assert_eq!(personal, global, "{s:?} client {id}");
        }
    }
}

fn long_config(strategy: Strategy, clients: usize) -> FederatedConfig {
    FederatedConfig {
        strategy,
        num_clients: clients,
        fraction: 1.0,
        rounds: 40,
        batch_size: 10,
        lr: 0.05,
        lr_schedule: LrSchedule::Constant,
        eval_every: 0,
        seed: 9,
        ..Default::default()
    }
}

#[test]
fn personalization_helps_heterogeneous_clients() {
    // Every cluster relabels the classes, so no single model fits all.
    let spec = SynthSpec {
        num_clusters: 3,
        classes: 3,
        dims: 4,
        per_class: 60,
        shift_scale: 0.5,
        class_sep: 3.0,
        permute_labels: true,
    };
    let data = synth_generate(&spec, &mut rng::stream(10, &[])).unwrap();
    for s in [Strategy::FedAvg, Strategy::Niw] {
        let mut sim = simulation(long_config(s, 6), &data, cluster_splits(&data, 6, 10));
        run(&mut sim);
        let rep = sim.evaluate_personalized(5).unwrap();
        assert!(rep.mean >= rep.global_mean, "{s:?}: {} < {}", rep.mean, rep.global_mean);
        assert!(rep.mean - rep.global_mean > 0.1, "{s:?}: gain {}", rep.mean - rep.global_mean);
    }
}

#[test]
fn personalization_gain_vanishes_for_identical_clients() {
    let data = synth(3, 0.0, 80, 11);
    let mut sim = simulation(long_config(Strategy::FedAvg, 6), &data, cluster_splits(&data, 6, 11));
    run(&mut sim);
    let rep = sim.evaluate_personalized(5).unwrap();
    assert!((rep.mean - rep.global_mean).abs() < 0.02, "{} vs {}", rep.mean, rep.global_mean);
}

#[test]
fn participation_frequency_matches_fraction() {
    let data = synth(2, 1.0, 20, 12);
    let cfg = FederatedConfig {
        rounds: 400,
        fraction: 0.25,
        eval_every: 0,
        ..config(Strategy::FedAvg, 8)
    };
    let mut sim = simulation(cfg, &data, shard_splits(&data, 8, 1, 12));
    run(&mut sim);
    let mut counts = [0usize; 8];
    for r in &sim.records()[1..] {
        assert_eq!(r.participants.len(), 2);
        assert!(r.participants.windows(2).all(|w| w[0] < w[1]));
        for &id in &r.participants {
            counts[id] += 1;
        }
    }
    let sd = (400.0f64 * 0.25 * 0.75).sqrt();
    for c in counts {
        assert!((c as f64 - 100.0).abs() < 4.0 * sd, "{counts:?}");
    }
}

#[test]
fn records_carry_metrics() {
    let data = synth(2, 1.0, 30, 13);
    let mut sim = simulation(FederatedConfig { eval_every: 2, ..config(Strategy::Mixture, 6) }, &data, shard_splits(&data, 6, 2, 13));
    run(&mut sim);
    let recs = sim.records();
    assert_eq!(recs.len(), 7);
    assert!(recs[0].global_acc.is_some() && recs[0].objective.is_none() && recs[0].participants.is_empty());
    for r in &recs[1..] {
        assert_eq!(r.global_acc.is_some(), r.round % 2 == 0 || r.round == 6);
        assert!(r.global_acc.is_none_or(|a| (0.0..=1.0).contains(&a)));
        assert!(r.server_objective.unwrap().is_finite() && r.objective.unwrap().is_finite());
        assert_eq!(r.wall_ms, 0);
    }
}

#[test]
fn zero_rounds_keeps_only_initial_evaluation() {
    let data = synth(2, 1.0, 30, 14);
    let mut sim = simulation(FederatedConfig { rounds: 0, ..config(Strategy::Niw, 6) }, &data, shard_splits(&data, 6, 2, 14));
    run(&mut sim);
    assert_eq!(sim.records().len(), 1);
    assert!(sim.records()[0].global_acc.is_some());
}
