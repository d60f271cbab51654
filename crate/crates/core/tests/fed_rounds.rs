use mpota::data::{Dataset, SyntheticSpec, generate_synthetic, shard_uniform};
use mpota::fed::{
    ClientState, FederationConfig, FederationData, Link, PhyConfig, SchemeConfig, TrainConfig,
    digital_fedavg, downlink_update, initial_clients, local_round, run_federation,
    run_federation_observed, sample_links, server_update, uplink_aggregate,
};
use mpota::model::{Architecture, ModelParams, QuantizedParams, init_params, loss};
use mpota::par::{Parallelism, with_workers};
use mpota::phy::{ChannelEstimate, ChannelState, NoiseReference, NoiseSpec};
use mpota::quant::{QuantSpec, make_spec};
use mpota::seed::{Purpose, RunSeeds, SHARED};
use mpota::Error;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_data() -> (Dataset, Dataset) {
    let spec = SyntheticSpec {
        n_train: 300,
        n_test: 120,
        classes: 4,
        dim: 8,
        sigma: 0.15,
    };
    generate_synthetic(11, &spec).unwrap()
}

fn small_arch() -> Architecture {
    Architecture::new(vec![8, 16, 4]).unwrap()
}

fn scheme(s: &str) -> SchemeConfig {
    SchemeConfig::new(s.parse().unwrap(), 2, false).unwrap()
}

fn cfg(phy: PhyConfig) -> FederationConfig {
    FederationConfig {
        train: TrainConfig::default(),
        phy,
        parallelism: Parallelism::Sequential,
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let norm = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    diff / norm
}

fn random_client(id: usize, spec: QuantSpec, arch: &Architecture, rng: &mut ChaCha8Rng) -> ClientState {
    let flat: Vec<f64> = (0..arch.param_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    ClientState {
        id,
        spec,
        params: QuantizedParams::from_flat(arch, &flat, &spec).unwrap(),
        shard: vec![0],
        weight: 1.0,
    }
}

fn perfect_links(n: usize, rng: &mut ChaCha8Rng) -> Vec<Link> {
    (0..n)
        .map(|_| {
            let channel = mpota::phy::sample_channel(rng);
            Link {
                channel,
                estimate: ChannelEstimate::exact(&channel),
            }
        })
        .collect()
}

#[test]
fn ota_global_equals_digital_fedavg_every_round() {
    let (train, test) = small_data();
    let arch = small_arch();
    for s in ["[16,4,4]", "[4,4,4]", "[32,8,6]"] {
        let mut rounds = 0;
        run_federation_observed(
            &scheme(s),
            6,
            &arch,
            FederationData { train: &train, test: &test },
            &cfg(PhyConfig::ideal()),
            &RunSeeds::new(3, SHARED, 0),
            |view| {
                let digital = digital_fedavg(view.uplinked);
                let err = rel_err(view.global.flat(), &digital);
                assert!(err <= 1e-6, "{s} round {}: {err}", view.round);
                rounds += 1;
            },
        )
        .unwrap();
        assert_eq!(rounds, 6);
    }
}

#[test]
fn single_client_uplink_is_identity() {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = random_client(0, QuantSpec::fixed(8).unwrap(), &arch, &mut rng);
    let links = perfect_links(1, &mut rng);
    let phy = PhyConfig::ideal();
    let up = uplink_aggregate(std::slice::from_ref(&c), &links, &phy, &mut rng).unwrap();
    assert!(rel_err(&up.signal.real(), &c.params.to_flat()) < 1e-12);
    assert_eq!(up.clip_events, 0);
}

#[test]
fn identical_clients_give_their_common_value() {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = random_client(0, QuantSpec::fixed(6).unwrap(), &arch, &mut rng);
    let clients: Vec<ClientState> = (0..5).map(|id| ClientState { id, ..c.clone() }).collect();
    let links = perfect_links(5, &mut rng);
    let up = uplink_aggregate(&clients, &links, &PhyConfig::ideal(), &mut rng).unwrap();
    let global = server_update(&up.signal.real(), 5, &arch).unwrap();
    assert!(rel_err(global.flat(), &c.params.to_flat()) < 1e-12);
}

#[test]
fn permuting_clients_leaves_global_unchanged() {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let clients: Vec<ClientState> = [16, 16, 4, 4, 4, 8]
        .iter()
        .enumerate()
        .map(|(id, &b)| random_client(id, QuantSpec::fixed(b).unwrap(), &arch, &mut rng))
        .collect();
    let links = perfect_links(clients.len(), &mut rng);
    let phy = PhyConfig::ideal();
    let forward = uplink_aggregate(&clients, &links, &phy, &mut rng).unwrap().signal.real();
    let mut rev_clients = clients.clone();
    rev_clients.reverse();
    let mut rev_links = links.clone();
    rev_links.reverse();
    let backward = uplink_aggregate(&rev_clients, &rev_links, &phy, &mut rng).unwrap().signal.real();
    for (a, b) in forward.iter().zip(&backward) {
        assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }
}

#[test]
fn downlink_requantizes_to_each_client_spec() {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let specs = [make_spec(32, false).unwrap(), QuantSpec::fixed(4).unwrap(), QuantSpec::fixed(4).unwrap()];
    let clients: Vec<ClientState> = specs
        .iter()
        .enumerate()
        .map(|(id, s)| random_client(id, *s, &arch, &mut rng))
        .collect();
    let links = perfect_links(3, &mut rng);
    let phy = PhyConfig::ideal();
    let up = uplink_aggregate(&clients, &links, &phy, &mut rng).unwrap();
    let global = server_update(&up.signal.real(), 3, &arch).unwrap();
    let seeds = RunSeeds::new(0, 0, 0);
    let down = downlink_update(&up.signal, &clients, &links, &phy, 1, &seeds, Parallelism::Sequential).unwrap();
    assert_eq!(down.clip_events, 0);

    let c32 = &down.clients[0];
    assert_eq!(c32.params.spec(), &specs[0]);
    assert!(rel_err(&c32.params.to_flat(), global.flat()) <= 2f64.powi(-20));

    // Recovery is exact up to round-off, so the codes match a direct
    // re-quantization of the global model and scales agree to round-off.
    let direct = QuantizedParams::quantize(&global, &specs[1]).unwrap();
    for (got, want) in down.clients[1].params.tensors().iter().zip(direct.tensors()) {
        assert_eq!(got.codes(), want.codes());
        assert!((got.scale() / want.scale() - 1.0).abs() < 1e-12);
    }
    // Same spec, different channels: same codes.
    for (a, b) in down.clients[1].params.tensors().iter().zip(down.clients[2].params.tensors()) {
        assert_eq!(a.codes(), b.codes());
    }
}

#[test]
fn downlink_rejects_non_finite_broadcast() {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let c = random_client(0, QuantSpec::fixed(8).unwrap(), &arch, &mut rng);
    let links = perfect_links(1, &mut rng);
    let phy = PhyConfig::ideal();
    let mut up = uplink_aggregate(std::slice::from_ref(&c), &links, &phy, &mut rng).unwrap();
    up.signal.samples[3].re = f64::NAN;
    let err = downlink_update(&up.signal, &[c], &links, &phy, 1, &RunSeeds::new(0, 0, 0), Parallelism::Sequential)
        .unwrap_err();
    assert!(matches!(err, Error::Protocol(_)), "{err}");
}

#[test]
fn zero_learning_rate_round_averages_initial_clients() {
    let (train, test) = small_data();
    let arch = small_arch();
    let sc = scheme("[16,4,4]");
    let seeds = RunSeeds::new(9, SHARED, 0);
    let mut config = cfg(PhyConfig::ideal());
    config.train.lr = 0.0;

    let shards = shard_uniform(&train, sc.n_clients(), &mut seeds.rng(SHARED, 0, Purpose::Shard)).unwrap();
    let initial = initial_clients(&sc, &arch, &shards, &seeds).unwrap();
    let expected = digital_fedavg(&initial);

    let run = run_federation_observed(
        &sc,
        1,
        &arch,
        FederationData { train: &train, test: &test },
        &config,
        &seeds,
        |view| assert_eq!(view.uplinked, initial.as_slice()),
    )
    .unwrap();
    assert_eq!(run.records.len(), 1);
    assert!(rel_err(run.global.flat(), &expected) <= 1e-12);
}

#[test]
fn clients_stay_on_their_grid_every_round() {
    let (train, test) = small_data();
    let arch = small_arch();
    let sc = SchemeConfig::new("[16,8,4]".parse().unwrap(), 2, true).unwrap();
    let specs = sc.client_specs().unwrap();
    let phy = PhyConfig::new(NoiseSpec::new(10.0, NoiseReference::MeasuredSignal).unwrap());
    run_federation_observed(
        &sc,
        4,
        &arch,
        FederationData { train: &train, test: &test },
        &cfg(phy),
        &RunSeeds::new(4, SHARED, 0),
        |view| {
            for (c, spec) in view.clients.iter().zip(&specs) {
                assert_eq!(c.params.spec(), spec);
                assert!(c.params.is_valid());
            }
        },
    )
    .unwrap();
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let (train, test) = small_data();
    let arch = small_arch();
    let sc = scheme("[16,4,4]");
    let phy = PhyConfig::new(NoiseSpec::new(20.0, NoiseReference::MeasuredSignal).unwrap());
    let seeds = RunSeeds::new(21, SHARED, 1);
    let run = |par: Parallelism, workers: usize| {
        let mut c = cfg(phy.clone());
        c.parallelism = par;
        with_workers(workers, || {
            run_federation(&sc, 4, &arch, FederationData { train: &train, test: &test }, &c, &seeds).unwrap()
        })
    };
    let seq = run(Parallelism::Sequential, 1);
    for workers in [1, 2, 5] {
        let par = run(Parallelism::Parallel, workers);
        assert_eq!(par.global, seq.global);
        assert_eq!(par.clients, seq.clients);
        for (a, b) in par.records.iter().zip(&seq.records) {
            assert_eq!(a.server_accuracy, b.server_accuracy);
            assert_eq!(a.per_client_accuracy, b.per_client_accuracy);
            assert_eq!(a.clip_events, b.clip_events);
        }
    }
}

#[test]
fn records_cover_every_round_and_client() {
    let (train, test) = small_data();
    let arch = small_arch();
    let phy = PhyConfig::new(NoiseSpec::new(30.0, NoiseReference::MeasuredSignal).unwrap());
    let run = run_federation(
        &scheme("[12,6,4]"),
        3,
        &arch,
        FederationData { train: &train, test: &test },
        &cfg(phy),
        &RunSeeds::new(1, SHARED, 0),
    )
    .unwrap();
    assert_eq!(run.records.len(), 3);
    for (k, r) in run.records.iter().enumerate() {
        assert_eq!(r.round, k + 1);
        assert_eq!(r.per_client_accuracy.len(), 6);
        assert_eq!(r.snr_db, 30.0);
        assert!((0.0..=1.0).contains(&r.server_accuracy));
    }
}

#[test]
fn noise_error_shrinks_with_snr() {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let clients: Vec<ClientState> = (0..15)
        .map(|id| random_client(id, QuantSpec::fixed(16).unwrap(), &arch, &mut rng))
        .collect();
    let digital = digital_fedavg(&clients);
    let seeds = RunSeeds::new(6, SHARED, 0);
    let err_at = |snr: f64| {
        let phy = PhyConfig::new(NoiseSpec::new(snr, NoiseReference::MeasuredSignal).unwrap());
        let mut total = 0.0;
        for round in 1..=20 {
            let links = sample_links(15, round, &seeds, &phy);
            let mut r = seeds.rng(SHARED, round as u64, Purpose::UplinkNoise);
            let up = uplink_aggregate(&clients, &links, &phy, &mut r).unwrap();
            let g = server_update(&up.signal.real(), 15, &arch).unwrap();
            total += rel_err(g.flat(), &digital);
        }
        total / 20.0
    };
    let (e5, e30) = (err_at(5.0), err_at(30.0));
    assert!(e30 < 0.1, "{e30}");
    assert!(e30 < e5, "{e30} vs {e5}");
}

#[test]
fn deep_fades_are_counted_as_clips() {
    let arch = small_arch();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let clients: Vec<ClientState> = (0..3)
        .map(|id| random_client(id, QuantSpec::fixed(8).unwrap(), &arch, &mut rng))
        .collect();
    let mut links = perfect_links(3, &mut rng);
    let faded = ChannelState::new(num_complex::Complex64::new(0.01, 0.0));
    links[1] = Link {
        channel: faded,
        estimate: ChannelEstimate::exact(&faded),
    };
    let mut phy = PhyConfig::ideal();
    phy.gain_cap = 10.0;
    let up = uplink_aggregate(&clients, &links, &phy, &mut rng).unwrap();
    assert_eq!(up.clip_events, 1);
}

#[test]
fn local_round_reduces_shard_loss_at_full_precision() {
    let (train, _) = small_data();
    let arch = small_arch();
    let spec = make_spec(32, false).unwrap();
    let mut decreased = 0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let init = init_params(&arch, &mut rng);
        let shards = shard_uniform(&train, 15, &mut rng).unwrap();
        let client = ClientState {
            id: 0,
            spec,
            params: QuantizedParams::quantize(&init, &spec).unwrap(),
            shard: shards.shard(0).to_vec(),
            weight: 1.0,
        };
        let (x, y) = train.gather(&client.shard);
        let before = loss(&client.params.dequantize(), &x, &y).unwrap();
        let after_state = local_round(&client, &train, &TrainConfig::default(), 1, &RunSeeds::new(seed, 0, 0)).unwrap();
        let after = loss(&after_state.params.dequantize(), &x, &y).unwrap();
        decreased += usize::from(after < before);
    }
    assert!(decreased >= 19, "{decreased}/20");
}

#[test]
fn divergence_names_round_and_client() {
    let (train, _) = small_data();
    let arch = small_arch();
    let spec = make_spec(32, true).unwrap();
    let init = init_params(&arch, &mut ChaCha8Rng::seed_from_u64(0));
    let client = ClientState {
        id: 7,
        spec,
        params: QuantizedParams::quantize(&init, &spec).unwrap(),
        shard: (0..64).collect(),
        weight: 1.0,
    };
    let train_cfg = TrainConfig {
        lr: 1e300,
        ..TrainConfig::default()
    };
    let err = local_round(&client, &train, &train_cfg, 3, &RunSeeds::new(0, 0, 0)).unwrap_err();
    assert!(matches!(err, Error::Divergence { round: 3, client: 7 }), "{err}");
}

#[test]
fn mismatched_clients_are_a_protocol_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let a = random_client(0, QuantSpec::fixed(8).unwrap(), &small_arch(), &mut rng);
    let b = random_client(1, QuantSpec::fixed(8).unwrap(), &Architecture::new(vec![8, 4]).unwrap(), &mut rng);
    let links = perfect_links(2, &mut rng);
    let err = uplink_aggregate(&[a, b], &links, &PhyConfig::ideal(), &mut rng).unwrap_err();
    assert!(matches!(err, Error::Protocol(ref m) if m.contains("client 1")), "{err}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn ideal_uplink_is_linear(seed in 0u64..10_000, n in 1usize..6) {
        let arch = Architecture::new(vec![3, 2]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let clients: Vec<ClientState> = (0..n)
            .map(|id| random_client(id, QuantSpec::fixed(12).unwrap(), &arch, &mut rng))
            .collect();
        let links = perfect_links(n, &mut rng);
        let up = uplink_aggregate(&clients, &links, &PhyConfig::ideal(), &mut rng).unwrap();
        let mut sum = vec![0.0; arch.param_count()];
        for c in &clients {
            for (s, v) in sum.iter_mut().zip(c.params.to_flat()) {
                *s += v;
            }
        }
        for (a, b) in up.signal.real().iter().zip(&sum) {
            prop_assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0));
        }
    }
}

#[test]
fn server_model_is_full_precision() {
    let arch = Architecture::new(vec![1, 1]).unwrap();
    let g: ModelParams = server_update(&[1.0, 2.0], 3, &arch).unwrap();
    assert_eq!(g.flat(), &[1.0 / 3.0, 2.0 / 3.0]);
}
