//! Federation rounds over the analog channel.
//!
//! A round is: local training at each client's precision, channel
//! estimation from pilots, channel-inverted uplink superposition, the server
//! average `Re(r_s)/N`, the downlink broadcast of `r_s`, and re-quantization
//! of the recovered model to each client's own spec.
//!
//! Client ids are assigned level by level in scheme order, so for `[16,4,4]`
//! with five clients per level ids 0..5 run at 16 bits and 5..15 at 4 bits.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rand::Rng;
use rand::seq::SliceRandom;

use crate::data::{Dataset, ShardPlan, shard_uniform};
use crate::error::{Error, Result};
use crate::model::{self, Architecture, ModelParams, QuantizedParams, init_params};
use crate::par::Parallelism;
use crate::phy::{
    self, ChannelEstimate, ChannelState, DEFAULT_GAIN_CAP, DEFAULT_PILOT_LEN, NoiseSpec,
    PilotSequence, ReceivedSignal,
};
use crate::quant::{LEVELS, QuantSpec, make_spec};
use crate::seed::{Purpose, RunSeeds, SHARED};

/// Widths a scheme draws its single high-precision level from.
pub const HIGHER: [u32; 4] = [32, 24, 16, 12];
/// Widths a scheme draws its two low-precision levels from.
pub const LOWER: [u32; 3] = [8, 6, 4];

/// Three precision levels, stored in descending order. Either one level
/// from [`HIGHER`] and two from [`LOWER`], or one width repeated three
/// times (a uniform baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Scheme {
    levels: [u32; 3],
}

impl Scheme {
    pub fn new(mut levels: [u32; 3]) -> Result<Self> {
        if let Some(bad) = levels.iter().find(|b| !LEVELS.contains(b)) {
            return Err(Error::Config(format!(
                "level {bad} is not an allowed width; levels are {LEVELS:?}"
            )));
        }
        levels.sort_unstable_by(|a, b| b.cmp(a));
        let uniform = levels[0] == levels[1] && levels[1] == levels[2];
        let mixed = HIGHER.contains(&levels[0]) && LOWER.contains(&levels[1]) && LOWER.contains(&levels[2]);
        if !(uniform || mixed) {
            return Err(Error::Config(format!(
                "scheme {levels:?} needs one level from {HIGHER:?} and two from {LOWER:?}, \
                 or three equal levels"
            )));
        }
        Ok(Self { levels })
    }

    pub fn levels(&self) -> [u32; 3] {
        self.levels
    }

    pub fn is_uniform(&self) -> bool {
        self.levels[0] == self.levels[2]
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [a, b, c] = self.levels;
        write!(f, "[{a},{b},{c}]")
    }
}

impl FromStr for Scheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let body = s.trim();
        let body = body
            .strip_prefix('[')
            .and_then(|b| b.strip_suffix(']'))
            .unwrap_or(body);
        let parts: Vec<&str> = body.split(',').map(str::trim).collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!(
                "scheme {s:?} must list three levels from {LEVELS:?}"
            )));
        }
        let mut levels = [0u32; 3];
        for (slot, p) in levels.iter_mut().zip(&parts) {
            *slot = p.parse().map_err(|_| {
                Error::Config(format!("scheme {s:?}: {p:?} is not a level from {LEVELS:?}"))
            })?;
        }
        Scheme::new(levels)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SchemeConfig {
    pub scheme: Scheme,
    pub clients_per_level: usize,
    pub prefer_float: bool,
}

impl SchemeConfig {
    pub fn new(scheme: Scheme, clients_per_level: usize, prefer_float: bool) -> Result<Self> {
        if clients_per_level == 0 {
            return Err(Error::Config("clients_per_level must be at least 1".into()));
        }
        Ok(Self {
            scheme,
            clients_per_level,
            prefer_float,
        })
    }

    pub fn n_clients(&self) -> usize {
        3 * self.clients_per_level
    }

    pub fn client_bits(&self, id: usize) -> u32 {
        self.scheme.levels[id / self.clients_per_level]
    }

    pub fn client_specs(&self) -> Result<Vec<QuantSpec>> {
        (0..self.n_clients())
            .map(|id| make_spec(self.client_bits(id), self.prefer_float))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub id: usize,
    pub spec: QuantSpec,
    pub params: QuantizedParams,
    pub shard: Vec<usize>,
    /// FedAvg weight; uniform `1/N`, folded into the server's division.
    pub weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 0.05,
            batch: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhyConfig {
    pub noise: NoiseSpec,
    pub gain_cap: f64,
    pub pilot: PilotSequence,
    /// Skip pilot estimation and use the true channel.
    pub perfect_csi: bool,
}

impl PhyConfig {
    pub fn new(noise: NoiseSpec) -> Self {
        Self {
            noise,
            gain_cap: DEFAULT_GAIN_CAP,
            pilot: PilotSequence::unit(DEFAULT_PILOT_LEN).expect("non-empty pilot"),
            perfect_csi: false,
        }
    }

    /// Noise-free, perfect CSI, no gain cap: the channel computes an exact sum.
    pub fn ideal() -> Self {
        Self {
            noise: NoiseSpec::noiseless(),
            gain_cap: f64::INFINITY,
            pilot: PilotSequence::unit(1).expect("non-empty pilot"),
            perfect_csi: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub train: TrainConfig,
    pub phy: PhyConfig,
    pub parallelism: Parallelism,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub server_accuracy: f64,
    pub per_client_accuracy: Vec<f64>,
    pub clip_events: usize,
    pub snr_db: f64,
    pub wall_time: Duration,
}

/// One client's link for one round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Link {
    pub channel: ChannelState,
    pub estimate: ChannelEstimate,
}

/// Draws each client's block-fading channel and pilot estimate for a round.
pub fn sample_links(n_clients: usize, round: usize, seeds: &RunSeeds, phy: &PhyConfig) -> Vec<Link> {
    (0..n_clients)
        .map(|id| {
            let channel = phy::sample_channel(&mut seeds.rng(id as u64, round as u64, Purpose::Channel));
            let estimate = if phy.perfect_csi {
                ChannelEstimate::exact(&channel)
            } else {
                let mut rng = seeds.rng(id as u64, round as u64, Purpose::Pilot);
                phy::estimate_channel(&channel, &phy.pilot, &phy.noise, &mut rng)
            };
            Link { channel, estimate }
        })
        .collect()
}

/// `epochs` passes of quantized-weight SGD over the client's shard.
pub fn local_round(
    client: &ClientState,
    data: &Dataset,
    train: &TrainConfig,
    round: usize,
    seeds: &RunSeeds,
) -> Result<ClientState> {
    if train.epochs == 0 || train.batch == 0 {
        return Err(Error::Config("epochs and batch must be at least 1".into()));
    }
    if client.shard.is_empty() {
        return Err(Error::Protocol(format!("client {} has an empty shard", client.id)));
    }
    let diverged = |e: Error| match e {
        Error::NonFinite(_) => Error::Divergence {
            round,
            client: client.id,
        },
        other => other,
    };
    let mut rng = seeds.rng(client.id as u64, round as u64, Purpose::Shuffle);
    let mut order = client.shard.clone();
    let mut params = client.params.clone();
    for _ in 0..train.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(train.batch) {
            let (x, y) = data.gather(batch);
            params = model::train_step(&params.dequantize(), &x, &y, train.lr, &client.spec)
                .map_err(diverged)?;
        }
    }
    Ok(ClientState {
        params,
        ..client.clone()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Uplink {
    pub signal: ReceivedSignal,
    pub clip_events: usize,
}

/// Every client modulates its dequantized parameters, pre-inverts its
/// estimated channel, and transmits at once; the server receives the
/// noisy superposition.
pub fn uplink_aggregate<R: Rng + ?Sized>(
    clients: &[ClientState],
    links: &[Link],
    phy: &PhyConfig,
    rng: &mut R,
) -> Result<Uplink> {
    if clients.is_empty() {
        return Err(Error::Protocol("uplink needs at least one client".into()));
    }
    if clients.len() != links.len() {
        return Err(Error::Protocol(format!(
            "{} clients but {} links",
            clients.len(),
            links.len()
        )));
    }
    let len = clients[0].params.param_count();
    if let Some(c) = clients.iter().find(|c| c.params.param_count() != len) {
        return Err(Error::Protocol(format!(
            "client {} holds {} parameters, expected {len}",
            c.id,
            c.params.param_count()
        )));
    }
    let mut clip_events = 0;
    let mut precoded = Vec::with_capacity(clients.len());
    for (c, link) in clients.iter().zip(links) {
        let p = phy::precode(&c.params.to_flat(), &link.estimate, phy.gain_cap)?;
        clip_events += usize::from(p.clipped);
        precoded.push(p.samples);
    }
    let channels: Vec<ChannelState> = links.iter().map(|l| l.channel).collect();
    let signal = phy::ota_superpose(&precoded, &channels, &phy.noise, rng)?;
    Ok(Uplink {
        signal,
        clip_events,
    })
}

/// Server model `received / N`, held at full precision.
pub fn server_update(received: &[f64], n_clients: usize, arch: &Architecture) -> Result<ModelParams> {
    if n_clients == 0 {
        return Err(Error::Protocol("server update needs at least one client".into()));
    }
    let inv = 1.0 / n_clients as f64;
    ModelParams::new(arch.clone(), received.iter().map(|v| v * inv).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Downlink {
    pub clients: Vec<ClientState>,
    pub clip_events: usize,
}

/// Broadcasts `r_s`; each client recovers `r_s / N` through its own channel
/// and re-quantizes it to its spec, one tensor at a time.
pub fn downlink_update(
    broadcast: &ReceivedSignal,
    clients: &[ClientState],
    links: &[Link],
    phy: &PhyConfig,
    round: usize,
    seeds: &RunSeeds,
    parallelism: Parallelism,
) -> Result<Downlink> {
    if broadcast.samples.iter().any(|s| !(s.re.is_finite() && s.im.is_finite())) {
        return Err(Error::Protocol("broadcast signal is not finite".into()));
    }
    let n = clients.len();
    let updated = parallelism.try_map(n, |i| {
        let c = &clients[i];
        let mut rng = seeds.rng(c.id as u64, round as u64, Purpose::DownlinkNoise);
        let rx = phy::downlink_recover(
            broadcast,
            n,
            &links[i].channel,
            &links[i].estimate,
            &phy.noise,
            phy.gain_cap,
            &mut rng,
        )?;
        let params = QuantizedParams::from_flat(c.params.arch(), &rx.values, &c.spec)?;
        Ok::<_, Error>((
            ClientState {
                params,
                ..c.clone()
            },
            rx.clipped,
        ))
    })?;
    let clip_events = updated.iter().filter(|(_, clipped)| *clipped).count();
    Ok(Downlink {
        clients: updated.into_iter().map(|(c, _)| c).collect(),
        clip_events,
    })
}

/// Train/test data and the client shards drawn from the training set.
#[derive(Debug, Clone)]
pub struct FederationData<'a> {
    pub train: &'a Dataset,
    pub test: &'a Dataset,
}

/// State handed to a round observer after the server update.
pub struct RoundView<'a> {
    pub round: usize,
    /// Client models as transmitted on the uplink this round.
    pub uplinked: &'a [ClientState],
    pub global: &'a ModelParams,
    /// Client models after the downlink and re-quantization.
    pub clients: &'a [ClientState],
}

#[derive(Debug, Clone)]
pub struct FederationRun {
    pub records: Vec<RoundRecord>,
    pub global: ModelParams,
    pub clients: Vec<ClientState>,
}

/// Initial clients: one shared initialization quantized to each spec.
pub fn initial_clients(
    scheme: &SchemeConfig,
    arch: &Architecture,
    shards: &ShardPlan,
    seeds: &RunSeeds,
) -> Result<Vec<ClientState>> {
    let init = init_params(arch, &mut seeds.rng(SHARED, 0, Purpose::Init));
    let n = scheme.n_clients();
    scheme
        .client_specs()?
        .into_iter()
        .enumerate()
        .map(|(id, spec)| {
            Ok(ClientState {
                id,
                spec,
                params: QuantizedParams::quantize(&init, &spec)?,
                shard: shards.shard(id).to_vec(),
                weight: 1.0 / n as f64,
            })
        })
        .collect()
}

pub fn run_federation(
    scheme: &SchemeConfig,
    rounds: usize,
    arch: &Architecture,
    data: FederationData<'_>,
    cfg: &FederationConfig,
    seeds: &RunSeeds,
) -> Result<FederationRun> {
    run_federation_observed(scheme, rounds, arch, data, cfg, seeds, |_| {})
}

/// [`run_federation`] with a callback after every round.
pub fn run_federation_observed(
    scheme: &SchemeConfig,
    rounds: usize,
    arch: &Architecture,
    data: FederationData<'_>,
    cfg: &FederationConfig,
    seeds: &RunSeeds,
    mut observe: impl FnMut(&RoundView<'_>),
) -> Result<FederationRun> {
    if rounds == 0 {
        return Err(Error::Config("rounds must be at least 1".into()));
    }
    if data.train.dim() != arch.input_dim() || data.train.classes() != arch.classes() {
        return Err(Error::Config(format!(
            "architecture {:?} does not fit data with {} features and {} classes",
            arch.layer_dims(),
            data.train.dim(),
            data.train.classes()
        )));
    }
    let n = scheme.n_clients();
    let shards = shard_uniform(data.train, n, &mut seeds.rng(SHARED, 0, Purpose::Shard))?;
    let mut clients = initial_clients(scheme, arch, &shards, seeds)?;
    let par = cfg.parallelism;
    let test_x = data.test.features();
    let test_y = data.test.labels();
    let mut records = Vec::with_capacity(rounds);
    let mut global = ModelParams::zeros(arch.clone());

    for round in 1..=rounds {
        let at_round = |e: Error| e.context(format!("round {round}"));
        let started = Instant::now();

        let trained = par
            .try_map(n, |i| local_round(&clients[i], data.train, &cfg.train, round, seeds))
            .map_err(at_round)?;
        let links = sample_links(n, round, seeds, &cfg.phy);
        let mut noise_rng = seeds.rng(SHARED, round as u64, Purpose::UplinkNoise);
        let uplink = uplink_aggregate(&trained, &links, &cfg.phy, &mut noise_rng).map_err(at_round)?;
        global = server_update(&uplink.signal.real(), n, arch).map_err(at_round)?;
        let downlink = downlink_update(&uplink.signal, &trained, &links, &cfg.phy, round, seeds, par)
            .map_err(at_round)?;

        let server_accuracy = model::evaluate(&global, test_x, test_y).map_err(at_round)?;
        let per_client_accuracy = par
            .try_map(n, |i| {
                model::evaluate(&downlink.clients[i].params.dequantize(), test_x, test_y)
            })
            .map_err(at_round)?;

        observe(&RoundView {
            round,
            uplinked: &trained,
            global: &global,
            clients: &downlink.clients,
        });
        clients = downlink.clients;
        records.push(RoundRecord {
            round,
            server_accuracy,
            per_client_accuracy,
            clip_events: uplink.clip_events + downlink.clip_events,
            snr_db: cfg.phy.noise.snr_db(),
            wall_time: started.elapsed(),
        });
    }
    Ok(FederationRun {
        records,
        global,
        clients,
    })
}

/// First round (1-based) whose trailing `window`-round mean accuracy reaches
/// `fraction` of the final trailing mean. `None` if the trace is shorter than
/// the window or never gets there.
pub fn convergence_round(accuracy: &[f64], window: usize, fraction: f64) -> Option<usize> {
    if window == 0 || accuracy.len() < window || !(fraction > 0.0 && fraction <= 1.0) {
        return None;
    }
    let means: Vec<f64> = accuracy
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect();
    let target = fraction * means.last().copied()?;
    means.iter().position(|&m| m >= target).map(|i| i + window)
}

pub fn detect_convergence(records: &[RoundRecord], window: usize, fraction: f64) -> Option<usize> {
    let acc: Vec<f64> = records.iter().map(|r| r.server_accuracy).collect();
    convergence_round(&acc, window, fraction)
}

/// Standard deviation of round-to-round accuracy changes from `from`
/// (1-based round) on. `None` with fewer than two differences.
pub fn post_convergence_jitter(accuracy: &[f64], from: usize) -> Option<f64> {
    let start = from.max(1) - 1;
    let diffs: Vec<f64> = accuracy.get(start..)?.windows(2).map(|w| w[1] - w[0]).collect();
    if diffs.len() < 2 {
        return None;
    }
    let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
    Some(var.sqrt())
}

/// Plain digital FedAvg of the clients' dequantized parameters.
pub fn digital_fedavg(clients: &[ClientState]) -> Vec<f64> {
    let n = clients.len() as f64;
    let mut sum = vec![0.0; clients.first().map_or(0, |c| c.params.param_count())];
    for c in clients {
        for (s, v) in sum.iter_mut().zip(c.params.to_flat()) {
            *s += v;
        }
    }
    sum.into_iter().map(|s| s / n).collect()
}
