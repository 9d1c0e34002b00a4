//! Workspace-backed command implementations. The workspace directory holds
//! the registry snapshot, per-application topology/plan/record files, the
//! per-node manifests from the latest lifecycle command, and experiment
//! outputs. One command runs at a time per workspace (lock file).

use std::fs;
use std::path::{Path, PathBuf};

use ace_core::controller::UpdateMode;
use ace_core::infrastructure::Registry;
use ace_core::messaging::BridgeDirection;
use ace_core::orchestrator::{orchestrate, Commitments};
use ace_core::scenario::Scenario;
use ace_core::simnet::SimTime;
use ace_core::topology::{parse_topology, DeploymentPlan, TopologyError};
use ace_core::{HierarchicalId, Platform};
use ace_videoquery::experiment::{check_trends, run_experiment_with, RunOptions, RunParams};
use ace_videoquery::metrics::{parse_csv, to_csv, MetricsReport};
use ace_videoquery::Paradigm;

#[derive(Debug)]
pub enum CliError {
    User(String),
    Internal(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Internal(e.to_string())
    }
}

fn user<E: std::fmt::Display>(e: E) -> CliError {
    CliError::User(e.to_string())
}

pub struct Workspace {
    dir: PathBuf,
    seed: u64,
}

pub struct LockGuard {
    path: PathBuf,
}

impl Drop for LockGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl Workspace {
    pub fn open(dir: &Path, seed: u64) -> Result<Workspace, CliError> {
        fs::create_dir_all(dir)?;
        Ok(Workspace {
            dir: dir.to_path_buf(),
            seed,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// One command at a time per workspace.
    pub fn lock(&self) -> Result<LockGuard, CliError> {
        let path = self.dir.join(".lock");
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(LockGuard { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::User(
                format!("workspace is locked ({} exists)", path.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }

    fn registry_path(&self) -> PathBuf {
        self.dir.join("registry.json")
    }

    fn load_registry(&self) -> Result<Registry, CliError> {
        let path = self.registry_path();
        if !path.exists() {
            return Err(CliError::User(
                "no infrastructure registered; run `ace infra register <infra.yaml>` first".into(),
            ));
        }
        Registry::from_snapshot_json(&fs::read_to_string(path)?)
            .map_err(|e| CliError::Internal(format!("corrupt registry snapshot: {e}")))
    }

    fn save_registry(&self, reg: &Registry) -> Result<(), CliError> {
        fs::write(self.registry_path(), reg.snapshot_json())?;
        Ok(())
    }

    fn app_dir(&self, name: &str) -> PathBuf {
        self.dir.join("apps").join(name)
    }

    // -----------------------------------------------------------------------
    // infra register
    // -----------------------------------------------------------------------

    pub fn infra_register(&self, file: &Path) -> Result<String, CliError> {
        let text = crate::read_text(file)?;
        let fingerprint = format!("{:016x}", ace_core::simnet::rng::fnv1a64(text.as_bytes()));
        let fp_path = self.dir.join("infra.fingerprint");
        if self.registry_path().exists() && fp_path.exists() {
            let prior = fs::read_to_string(&fp_path)?;
            if prior.trim() == fingerprint {
                // Same declaration replayed: same IDs, nothing to do.
                let reg = self.load_registry()?;
                let rec = reg.infras().next().expect("registry non-empty");
                return Ok(serde_json::to_string_pretty(rec).expect("record serializes"));
            }
        }
        let mut reg = if self.registry_path().exists() {
            self.load_registry()?
        } else {
            Registry::new()
        };
        let infra = reg.register_from_yaml("operator", &text).map_err(user)?;
        self.save_registry(&reg)?;
        fs::write(fp_path, &fingerprint)?;
        let rec = reg.infra(&infra).expect("just registered");
        Ok(serde_json::to_string_pretty(rec).expect("record serializes"))
    }

    // -----------------------------------------------------------------------
    // platform assembly for lifecycle commands
    // -----------------------------------------------------------------------

    /// Scenario from `<workspace>/scenario.yaml` when present, else defaults.
    fn load_scenario(&self) -> Result<Scenario, CliError> {
        let path = self.dir.join("scenario.yaml");
        if path.exists() {
            Scenario::from_yaml(&fs::read_to_string(path)?).map_err(user)
        } else {
            Ok(Scenario::default())
        }
    }

    fn build_platform(&self, reg: &Registry) -> Result<(Platform, HierarchicalId), CliError> {
        let infra = reg
            .infras()
            .next()
            .ok_or_else(|| CliError::User("registry holds no infrastructure".into()))?
            .id
            .clone();
        let scenario = self.load_scenario()?;
        let mut p = Platform::new(self.seed);
        p.registry = reg.clone();
        p.adopt_infra(&infra, &scenario.net);
        p.apply_partitions(&infra, &scenario.partitions);
        // Behaviors for the bundled video-query images; anything else starts
        // as an inert container stand-in.
        let cfg = std::rc::Rc::new(ace_videoquery::experiment::default_config(
            Paradigm::Ace,
            500_000,
            self.seed,
        ));
        ace_videoquery::paradigm::register_images(
            &mut p,
            cfg,
            ace_videoquery::crop::new_trace(),
            std::rc::Rc::new(std::cell::RefCell::new(0)),
        );
        Ok((p, infra))
    }

    fn commitments_of_others(&self, except: &str) -> Result<Commitments, CliError> {
        let mut out = Commitments::new();
        let apps_dir = self.dir.join("apps");
        if !apps_dir.exists() {
            return Ok(out);
        }
        for entry in fs::read_dir(apps_dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().to_string();
            if name == except {
                continue;
            }
            let record_path = entry.path().join("record.json");
            if !record_path.exists() {
                continue;
            }
            let record: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(&record_path)?)
                    .map_err(|e| CliError::Internal(e.to_string()))?;
            if record["status"] == "removed" {
                continue;
            }
            let plan_path = entry.path().join("plan.json");
            if let Ok(text) = fs::read_to_string(&plan_path) {
                if let Ok(plan) = DeploymentPlan::from_json(&text) {
                    for c in &plan.topology.components {
                        if let Some(bindings) = plan.instances.get(&c.name) {
                            for node in bindings {
                                let e = out
                                    .entry(node.clone())
                                    .or_insert(ace_core::topology::Resources { cpu: 0, mem: 0 });
                                e.cpu += c.resources.cpu;
                                e.mem += c.resources.mem;
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    // -----------------------------------------------------------------------
    // app lifecycle
    // -----------------------------------------------------------------------

    pub fn app_submit(&self, file: &Path) -> Result<String, CliError> {
        let text = crate::read_text(file)?;
        let topo = parse_topology(&text).map_err(|e| match &e {
            TopologyError::Syntax { .. } | TopologyError::UnknownField { .. } => user(e),
            other => user(other),
        })?;
        let reg = self.load_registry()?;
        let infra = reg
            .infras()
            .next()
            .ok_or_else(|| CliError::User("registry holds no infrastructure".into()))?;
        let violations = ace_core::topology::validate(&topo, infra);
        if !violations.is_empty() {
            return Err(CliError::User(format!(
                "topology fails validation: {violations:?}"
            )));
        }
        let commitments = self.commitments_of_others(&topo.app_name)?;
        let plan = orchestrate(&topo, infra, &commitments).map_err(user)?;
        let app_dir = self.app_dir(&topo.app_name);
        fs::create_dir_all(&app_dir)?;
        fs::write(app_dir.join("topology.yaml"), topo.to_canonical_yaml())?;
        fs::write(app_dir.join("plan.json"), plan.to_canonical_json())?;
        Ok(format!(
            "submitted {} v{}: {} components bound to {} nodes; plan at {}",
            topo.app_name,
            topo.version,
            topo.components.len(),
            plan.hosting_nodes().len(),
            app_dir.join("plan.json").display()
        ))
    }

    fn load_plan(&self, name: &str) -> Result<DeploymentPlan, CliError> {
        let path = self.app_dir(name).join("plan.json");
        if !path.exists() {
            return Err(CliError::User(format!(
                "no plan for {name}; run `ace app submit` first"
            )));
        }
        DeploymentPlan::from_json(&fs::read_to_string(path)?)
            .map_err(|e| CliError::Internal(format!("corrupt plan: {e}")))
    }

    fn persist_outcome(&self, p: &Platform, name: &str) -> Result<String, CliError> {
        let record = p
            .control
            .records
            .get(name)
            .ok_or_else(|| CliError::Internal("record missing after lifecycle".into()))?;
        let snapshot = p.collect_status();
        let app_dir = self.app_dir(name);
        fs::create_dir_all(&app_dir)?;
        fs::write(
            app_dir.join("record.json"),
            serde_json::to_string_pretty(record).expect("record serializes"),
        )?;
        fs::write(app_dir.join("status.json"), snapshot.to_json())?;
        fs::write(app_dir.join("plan.json"), record.plan.to_canonical_json())?;
        let manifests_dir = self.dir.join("manifests");
        fs::create_dir_all(&manifests_dir)?;
        for manifest in p.control.desired.values() {
            fs::write(
                manifests_dir.join(format!("{}.yaml", manifest.node)),
                manifest.to_compose_yaml(),
            )?;
        }
        Ok(format!(
            "{name}: {:?} (instances: {}, snapshot at {})",
            record.status,
            snapshot.instances.len(),
            app_dir.join("status.json").display()
        ))
    }

    /// Bridge the app's workload topics when its name matches a bundled
    /// paradigm wiring; other apps get control/telemetry bridging from the
    /// deployment itself.
    fn bridge_app_data(&self, p: &mut Platform, infra: &HierarchicalId) {
        let up = ["app/+/crop/up/#", "app/+/crop/direct/#", "app/+/result/#"];
        let rec = p.registry.infra(infra).expect("infra").clone();
        for ec in rec.ecs() {
            let _ = p.configure_bridge(&ec.id, &up, BridgeDirection::Up);
        }
    }

    pub fn app_deploy(&self, name: &str) -> Result<String, CliError> {
        let record_path = self.app_dir(name).join("record.json");
        if record_path.exists() {
            let record: serde_json::Value =
                serde_json::from_str(&fs::read_to_string(&record_path)?)
                    .map_err(|e| CliError::Internal(e.to_string()))?;
            if record["status"] != "removed" {
                return Err(CliError::User(format!("{name} is already deployed")));
            }
        }
        let plan = self.load_plan(name)?;
        let reg = self.load_registry()?;
        let (mut p, infra) = self.build_platform(&reg)?;
        self.bridge_app_data(&mut p, &infra);
        p.deploy(&plan).map_err(user)?;
        p.run_until(SimTime::from_secs(10));
        self.persist_outcome(&p, name)
    }

    /// Rebuild the platform with the app running, ready for update/remove.
    fn replay_running(&self, name: &str) -> Result<Platform, CliError> {
        let record_path = self.app_dir(name).join("record.json");
        if !record_path.exists() {
            return Err(CliError::User(format!("{name} is not deployed")));
        }
        let record: serde_json::Value = serde_json::from_str(&fs::read_to_string(record_path)?)
            .map_err(|e| CliError::Internal(e.to_string()))?;
        if record["status"] == "removed" {
            return Err(CliError::User(format!("{name} was removed")));
        }
        let plan = self.load_plan(name)?;
        let reg = self.load_registry()?;
        let (mut p, infra) = self.build_platform(&reg)?;
        self.bridge_app_data(&mut p, &infra);
        p.deploy(&plan).map_err(user)?;
        p.run_until(SimTime::from_secs(10));
        Ok(p)
    }

    pub fn app_update(&self, name: &str, file: &Path, mode: &str) -> Result<String, CliError> {
        let text = crate::read_text(file)?;
        let topo = parse_topology(&text).map_err(user)?;
        if topo.app_name != name {
            return Err(CliError::User(format!(
                "file declares app {:?}, expected {name:?}",
                topo.app_name
            )));
        }
        let mode = match mode {
            "thorough" => UpdateMode::Thorough,
            _ => UpdateMode::Incremental,
        };
        let mut p = self.replay_running(name)?;
        let before = p.control.records[name].plan.topology.version;
        p.update(name, &topo, mode).map_err(user)?;
        p.run_until(SimTime::from_secs(25));
        let after = p.control.records[name].plan.topology.clone();
        fs::write(
            self.app_dir(name).join("topology.yaml"),
            after.to_canonical_yaml(),
        )?;
        let summary = self.persist_outcome(&p, name)?;
        if before == topo.version {
            Ok(format!("{summary} (no-op: version unchanged)"))
        } else {
            Ok(summary)
        }
    }

    pub fn app_remove(&self, name: &str) -> Result<String, CliError> {
        let mut p = self.replay_running(name)?;
        p.remove(name).map_err(user)?;
        p.run_until(SimTime::from_secs(20));
        self.persist_outcome(&p, name)
    }

    pub fn app_status(&self, name: &str) -> Result<String, CliError> {
        let path = self.app_dir(name).join("status.json");
        if !path.exists() {
            return Err(CliError::User(format!("{name} has no recorded status")));
        }
        let record = fs::read_to_string(self.app_dir(name).join("record.json"))?;
        let record: serde_json::Value =
            serde_json::from_str(&record).map_err(|e| CliError::Internal(e.to_string()))?;
        let status = fs::read_to_string(path)?;
        Ok(format!(
            "app: {name}\nstatus: {}\nversion: {}\n{status}",
            record["status"], record["version"]
        ))
    }

    // -----------------------------------------------------------------------
    // experiments
    // -----------------------------------------------------------------------

    pub fn exp_run(
        &self,
        file: Option<&Path>,
        out_dir: &Path,
        traces: bool,
    ) -> Result<bool, CliError> {
        let spec = match file {
            Some(path) => ExpFile::load(path)?,
            None => ExpFile::default(),
        };
        let matrix = spec.to_matrix()?;
        fs::create_dir_all(out_dir)?;
        let trace_dir = out_dir.join("traces");
        if traces {
            fs::create_dir_all(&trace_dir)?;
        }
        let mut rows: Vec<MetricsReport> = Vec::new();
        let mut digests = Vec::new();
        let total = matrix.cells().len();
        for (i, cell) in matrix.cells().into_iter().enumerate() {
            let out = run_experiment_with(cell, RunOptions::default());
            eprintln!(
                "[{}/{}] {} i={}ms d={}ms seed={} f1={:.3} bwc={:.3} eil={:.1}ms",
                i + 1,
                total,
                out.report.paradigm,
                out.report.interval_ms,
                out.report.delay_ms,
                out.report.seed,
                out.report.f1,
                out.report.bwc_mbps,
                out.report.eil_mean_ms
            );
            if traces {
                let name = format!(
                    "{}-{}ms-{}ms-s{}.jsonl",
                    out.report.paradigm.replace('+', "plus"),
                    out.report.interval_ms,
                    out.report.delay_ms,
                    out.report.seed
                );
                fs::write(trace_dir.join(name), out.trace.borrow().to_jsonl())?;
            }
            digests.push(out.traffic_digest);
            rows.push(out.report);
        }
        fs::write(out_dir.join("results.csv"), to_csv(&rows))?;
        let digest_lines: String = digests.iter().map(|d| format!("{d:016x}\n")).collect();
        fs::write(out_dir.join("traffic.digests"), digest_lines)?;
        let trends = check_trends(&rows);
        let summary = trends.render();
        fs::write(out_dir.join("summary.txt"), &summary)?;
        println!("{summary}");
        println!(
            "wrote {} rows to {}",
            rows.len(),
            out_dir.join("results.csv").display()
        );
        Ok(trends.all_pass())
    }

    pub fn exp_report(&self, out_dir: &Path) -> Result<bool, CliError> {
        let path = out_dir.join("results.csv");
        if !path.exists() {
            return Err(CliError::User(format!(
                "no results at {}; run `ace exp run` first",
                path.display()
            )));
        }
        let rows = parse_csv(&fs::read_to_string(path)?).map_err(CliError::User)?;
        let trends = check_trends(&rows);
        println!("{}", trends.render());
        Ok(trends.all_pass())
    }
}

// ---------------------------------------------------------------------------
// exp.yaml schema
// ---------------------------------------------------------------------------

#[derive(Debug, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
struct ExpFile {
    paradigms: Vec<String>,
    intervals_ms: Vec<u64>,
    delays_ms: Vec<u64>,
    seeds: Vec<u64>,
    duration_s: u64,
}

impl Default for ExpFile {
    fn default() -> Self {
        ExpFile {
            paradigms: vec!["CI".into(), "EI".into(), "ACE".into(), "ACE+".into()],
            intervals_ms: vec![500, 400, 300, 200, 100],
            delays_ms: vec![0, 50],
            seeds: vec![1, 2, 3],
            duration_s: 300,
        }
    }
}

impl ExpFile {
    fn load(path: &Path) -> Result<ExpFile, CliError> {
        let text = crate::read_text(path)?;
        serde_yaml::from_str(&text).map_err(user)
    }

    fn to_matrix(&self) -> Result<ace_videoquery::ExperimentMatrix, CliError> {
        let paradigms: Result<Vec<Paradigm>, CliError> = self
            .paradigms
            .iter()
            .map(|s| {
                Paradigm::parse(s).ok_or_else(|| CliError::User(format!("unknown paradigm {s:?}")))
            })
            .collect();
        for &i in &self.intervals_ms {
            if !(100..=500).contains(&i) {
                return Err(CliError::User(format!(
                    "sampling interval {i}ms outside [100, 500]"
                )));
            }
        }
        if self.duration_s > 300 {
            return Err(CliError::User(
                "duration exceeds the 300 s clip length".into(),
            ));
        }
        Ok(ace_videoquery::ExperimentMatrix {
            paradigms: paradigms?,
            intervals_ms: self.intervals_ms.clone(),
            delays_ms: self.delays_ms.clone(),
            seeds: self.seeds.clone(),
            duration_s: self.duration_s,
        })
    }
}

// Re-exported for RunParams construction in tests.
#[allow(unused)]
pub fn run_params(paradigm: Paradigm, interval_ms: u64, delay_ms: u64, seed: u64) -> RunParams {
    RunParams::new(paradigm, interval_ms, delay_ms, seed)
}
