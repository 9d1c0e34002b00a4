//! The platform world: one struct composing the registry, links, brokers,
//! file stores, controller and every simulated client. Actors are logically
//! concurrent but execute sequentially on the single event loop; they
//! interact only through messages, timers and the service APIs on [`Ctx`].

use std::collections::BTreeMap;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::controller::ControllerState;
use crate::fileservice::FileState;
use crate::ids::HierarchicalId;
use crate::inapp::InAppState;
use crate::infrastructure::Registry;
use crate::messaging::{Message, MessagingState};
use crate::simnet::rng::derive_seed;
use crate::simnet::{self, EventQueue, LinkTable, Micros, SimTime, SimWorld};
use crate::tracelog::TrafficLog;

pub type ClientId = String;

/// Identity and environment handed to a behavior factory when the node agent
/// starts an instance.
pub struct SpawnInfo<'a> {
    pub app: &'a str,
    pub instance_id: &'a str,
    pub component: &'a str,
    pub node: &'a HierarchicalId,
    pub params: &'a BTreeMap<String, String>,
}

pub type Factory = Box<dyn Fn(&SpawnInfo<'_>) -> Box<dyn Actor>>;

/// A simulated client: a node agent, an application component instance, or a
/// platform service endpoint. Callbacks run on the event loop and must not
/// block; anything long-running is expressed as timers and messages.
pub trait Actor {
    fn on_start(&mut self, _ctx: &mut Ctx<'_>) {}
    fn on_message(&mut self, _ctx: &mut Ctx<'_>, _msg: &Message) {}
    fn on_timer(&mut self, _ctx: &mut Ctx<'_>, _tag: u64) {}
    fn on_stop(&mut self, _ctx: &mut Ctx<'_>) {}
}

/// Inert stand-in for images without a registered behavior: starts, reports
/// healthy, does nothing.
pub struct InertActor;
impl Actor for InertActor {}

pub(crate) struct ClientSlot {
    pub node: HierarchicalId,
    pub behavior: Option<Box<dyn Actor>>,
    pub rng: ChaCha8Rng,
    pub alive: bool,
}

#[derive(Debug, Clone)]
pub struct PlatformConfig {
    pub msg_cap_bytes: u64,
    pub agent_start_delay_us: Micros,
    pub heartbeat_every_us: Micros,
    pub ack_deadline_us: Micros,
    pub retry_every_us: Micros,
    pub stale_after_us: Micros,
    pub file_chunk_bytes: u64,
    pub site_quota_bytes: u64,
    pub restart_limit: u32,
}

impl Default for PlatformConfig {
    fn default() -> Self {
        PlatformConfig {
            msg_cap_bytes: 16 * 1024 * 1024,
            agent_start_delay_us: simnet::ms(200),
            heartbeat_every_us: simnet::secs(1),
            ack_deadline_us: simnet::secs(3),
            retry_every_us: simnet::secs(2),
            stale_after_us: simnet::ms(2500),
            file_chunk_bytes: 256 * 1024,
            site_quota_bytes: 8 * 1024 * 1024 * 1024,
            restart_limit: 3,
        }
    }
}

pub struct Platform {
    pub events: EventQueue<Platform>,
    pub links: LinkTable<Platform>,
    pub registry: Registry,
    pub messaging: MessagingState,
    pub files: FileState,
    pub control: ControllerState,
    pub inapp: InAppState,
    pub traffic: TrafficLog,
    pub config: PlatformConfig,
    pub(crate) clients: BTreeMap<ClientId, ClientSlot>,
    pub(crate) factories: BTreeMap<String, Factory>,
    root_seed: u64,
    pub(crate) msg_seq: u64,
}

impl SimWorld for Platform {
    fn events(&mut self) -> &mut EventQueue<Platform> {
        &mut self.events
    }
    fn links(&mut self) -> &mut LinkTable<Platform> {
        &mut self.links
    }
}

impl Platform {
    pub fn new(seed: u64) -> Self {
        Self::with_config(seed, PlatformConfig::default())
    }

    pub fn with_config(seed: u64, config: PlatformConfig) -> Self {
        Platform {
            events: EventQueue::new(),
            links: LinkTable::new(),
            registry: Registry::new(),
            messaging: MessagingState::default(),
            files: FileState::default(),
            control: ControllerState::default(),
            inapp: InAppState::default(),
            traffic: TrafficLog::default(),
            config,
            clients: BTreeMap::new(),
            factories: BTreeMap::new(),
            root_seed: seed,
            msg_seq: 0,
        }
    }

    pub fn now(&self) -> SimTime {
        self.events.now()
    }

    pub fn seed(&self) -> u64 {
        self.root_seed
    }

    /// Execute all events due by `t` (inclusive); the clock ends at `t`.
    pub fn run_until(&mut self, t: SimTime) -> u64 {
        simnet::run_until(self, |p| &mut p.events, t)
    }

    /// Execute until the event queue drains or `cap` is reached. Heartbeats
    /// and retry timers re-arm themselves, so callers quiesce by running to a
    /// horizon rather than to emptiness.
    pub fn run_until_idle(&mut self, cap: SimTime) -> u64 {
        simnet::run_until_idle(self, |p| &mut p.events, cap)
    }

    /// Register a behavior factory for an image reference. The factory map is
    /// the desk-scale stand-in for an image registry: opaque image names are
    /// resolved to behaviors at instance start; unknown images start inert.
    pub fn register_image(&mut self, image: &str, factory: Factory) {
        self.factories.insert(image.to_string(), factory);
    }

    pub(crate) fn make_behavior(&self, image: &str, info: &SpawnInfo<'_>) -> Box<dyn Actor> {
        match self.factories.get(image) {
            Some(f) => f(info),
            None => Box::new(InertActor),
        }
    }

    /// Attach a client at `node` (node-level for real instances, cluster-level
    /// for service endpoints) and invoke its `on_start`.
    pub fn attach_client(&mut self, client: &str, node: HierarchicalId, behavior: Box<dyn Actor>) {
        let rng = ChaCha8Rng::seed_from_u64(derive_seed(self.root_seed, client));
        self.clients.insert(
            client.to_string(),
            ClientSlot {
                node,
                behavior: Some(behavior),
                rng,
                alive: true,
            },
        );
        self.with_behavior(&client.to_string(), |beh, ctx| beh.on_start(ctx));
    }

    /// Detach a client: `on_stop`, drop the behavior, remove subscriptions.
    pub fn detach_client(&mut self, client: &ClientId) {
        if self.clients.contains_key(client) {
            self.with_behavior(client, |beh, ctx| beh.on_stop(ctx));
            self.clients.remove(client);
            self.messaging.remove_client(client);
        }
    }

    pub fn client_exists(&self, client: &ClientId) -> bool {
        self.clients.contains_key(client)
    }

    pub fn client_node(&self, client: &ClientId) -> Option<&HierarchicalId> {
        self.clients.get(client).map(|s| &s.node)
    }

    /// Cluster scope of a client: its node's cluster, or the node itself when
    /// the client is a cluster-level service endpoint.
    pub fn client_cluster(&self, client: &ClientId) -> Option<HierarchicalId> {
        let node = &self.clients.get(client)?.node;
        if node.is_node() {
            node.cluster_id()
        } else if node.is_cluster() {
            Some(node.clone())
        } else {
            None
        }
    }

    /// Run `f` against a client's behavior with a context over the rest of the
    /// platform. The behavior is taken out of its slot for the duration, so a
    /// callback never aliases itself through the world.
    pub(crate) fn with_behavior(
        &mut self,
        client: &ClientId,
        f: impl FnOnce(&mut Box<dyn Actor>, &mut Ctx<'_>),
    ) {
        let Some(slot) = self.clients.get_mut(client) else {
            return;
        };
        if !slot.alive {
            return;
        }
        let Some(mut beh) = slot.behavior.take() else {
            return;
        };
        let mut rng = std::mem::replace(&mut slot.rng, ChaCha8Rng::seed_from_u64(0));
        let node = slot.node.clone();
        let crashed;
        {
            let mut ctx = Ctx {
                platform: self,
                client: client.clone(),
                node,
                rng: &mut rng,
                crash_requested: false,
            };
            f(&mut beh, &mut ctx);
            crashed = ctx.crash_requested;
        }
        if let Some(slot) = self.clients.get_mut(client) {
            slot.behavior = Some(beh);
            slot.rng = rng;
        }
        if crashed {
            self.handle_instance_crash(client);
        }
    }

    pub(crate) fn fire_timer(&mut self, client: ClientId, tag: u64) {
        self.with_behavior(&client, |beh, ctx| beh.on_timer(ctx, tag));
    }

    pub(crate) fn next_msg_id(&mut self) -> String {
        self.msg_seq += 1;
        format!("m{:08}", self.msg_seq)
    }
}

/// Execution context handed to actor callbacks: identity plus the platform
/// services the SDK exposes.
pub struct Ctx<'a> {
    pub platform: &'a mut Platform,
    pub client: ClientId,
    pub node: HierarchicalId,
    rng: &'a mut ChaCha8Rng,
    crash_requested: bool,
}

impl<'a> Ctx<'a> {
    pub fn now(&self) -> SimTime {
        self.platform.events.now()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        self.rng
    }

    pub fn set_timer(&mut self, delay: Micros, tag: u64) {
        let client = self.client.clone();
        self.platform
            .events
            .schedule_after(delay, move |p| p.fire_timer(client, tag));
    }

    /// Simulate an instance crash; the node agent applies the restart policy.
    pub fn request_crash(&mut self) {
        self.crash_requested = true;
    }
}
