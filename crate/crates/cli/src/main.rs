use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mtp_core::checkpoint::{load_params, save_params};
use mtp_core::config::{digest_of, ExperimentConfig};
use mtp_core::metrics::{dcr, write_scene_rows, EpisodeOutcome, OfflineAccumulator, OfflineReport, OnlineReport, SceneMetricsRow};
use mtp_core::net::MtpNetwork;
use mtp_core::scene::{read_dataset, write_dataset, Scene};
use mtp_core::sim::closed_loop::closed_loop_eval;
use mtp_core::sim::episode::{rollout_expert, run_expert_episode, scenes_from_log, EpisodeLog};
use mtp_core::sim::map::IntersectionMap;
use mtp_core::sim::scenario::ScenarioConfig;
use mtp_core::train::{train, write_history};

/// Configuration problems: reported with exit code 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

#[derive(Parser)]
#[command(name = "mtp", version, about = "Intention-conditioned multi-vehicle trajectory prediction and control")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the seed of the subcommand.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Roll out the expert and slice its episodes into a scene dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Train a network on a scene dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory (or scenes file).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        no_aggregation: bool,
        #[arg(long)]
        collision_weight: Option<f64>,
        #[arg(long)]
        no_augmentation: bool,
        /// Also keep a checkpoint every this many epochs.
        #[arg(long, default_value_t = 0)]
        checkpoint_every: usize,
    },
    /// Offline metrics of a checkpoint on a scene dataset.
    EvalOffline {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "oracle")]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Score the ground truth itself instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        oracle: bool,
    },
    /// Closed-loop evaluation: predict, track with the MPC, count collisions.
    EvalOnline {
        #[command(flatten)]
        common: Common,
        #[arg(long, required_unless_present = "expert")]
        checkpoint: Option<PathBuf>,
        /// Drive with the rule-based expert instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        expert: bool,
        #[arg(long)]
        episodes: Option<usize>,
        /// Scenario file (TOML, scenario section fields) replacing the
        /// random scenarios; runs a single episode.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Also write every pose as CSV.
        #[arg(long)]
        export_traj: bool,
    },
    /// Convert episode logs to per-tick CSV.
    ExportTraj {
        /// Episode log files (JSONL).
        #[arg(long = "log", required = true)]
        logs: Vec<PathBuf>,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Serialize)]
struct RunManifest {
    subcommand: String,
    command_line: Vec<String>,
    config_path: Option<PathBuf>,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    tool_version: String,
    config_digest: String,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_usage_error(&e) {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn is_usage_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        c.downcast_ref::<UsageError>().is_some()
            || matches!(c.downcast_ref::<mtp_core::Error>(), Some(mtp_core::Error::Config(_)))
    })
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, episodes } => gen_data(&common, episodes),
        Command::Train {
            common,
            data,
            epochs,
            no_aggregation,
            collision_weight,
            no_augmentation,
            checkpoint_every,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = common.seed {
                cfg.train.seed = s;
            }
            if let Some(w) = collision_weight {
                cfg.train.loss.collision_weight = w;
            }
            cfg.train.disable_aggregation |= no_aggregation;
            if no_augmentation {
                cfg.train.augmentation.enabled = false;
            }
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            train_cmd(&common, &cfg, &data, checkpoint_every)
        }
        Command::EvalOffline {
            common,
            checkpoint,
            data,
            oracle,
        } => {
            let cfg = load_config(&common)?;
            eval_offline(&common, &cfg, checkpoint.as_deref(), &data, oracle)
        }
        Command::EvalOnline {
            common,
            checkpoint,
            expert,
            episodes,
            scenario,
            export_traj,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(n) = episodes {
                cfg.eval.episodes = n;
            }
            if let Some(s) = common.seed {
                cfg.eval.seed = s;
            }
            if let Some(path) = &scenario {
                let text = fs::read_to_string(path).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                cfg.scenario = toml::from_str::<ScenarioConfig>(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                if cfg.scenario.scripted.is_none() {
                    return Err(usage(format!("{}: no `scripted` vehicle list", path.display())));
                }
                cfg.eval.episodes = 1;
            }
            cfg.validate().map_err(|e| usage(e.to_string()))?;
            let inputs: Vec<PathBuf> = checkpoint.iter().chain(scenario.iter()).cloned().collect();
            eval_online(&common, &cfg, checkpoint.as_deref(), expert, export_traj, inputs)
        }
        Command::ExportTraj { logs, out } => {
            let loaded = logs
                .iter()
                .map(|p| EpisodeLog::load(p).with_context(|| format!("reading {}", p.display())))
                .collect::<Result<Vec<_>>>()?;
            write_atomic(&out, &trajectory_csv(&loaded)?)
        }
    }
}

fn load_config(common: &Common) -> Result<ExperimentConfig> {
    let cfg = match &common.config {
        Some(p) => {
            if !p.exists() {
                return Err(usage(format!("config file {} not found", p.display())));
            }
            ExperimentConfig::load(p).map_err(|e| usage(e.to_string()))?
        }
        None => ExperimentConfig::default(),
    };
    Ok(cfg)
}

/// Writes `bytes` to a sibling temporary file and renames it into place.
fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    {
        let mut f = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).with_context(|| format!("writing {}", path.display()))
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_manifest(
    common: &Common,
    subcommand: &str,
    cfg: &ExperimentConfig,
    seed: u64,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
) -> Result<()> {
    let m = RunManifest {
        subcommand: subcommand.into(),
        command_line: std::env::args().collect(),
        config_path: common.config.clone(),
        seed,
        inputs,
        outputs,
        tool_version: env!("CARGO_PKG_VERSION").into(),
        config_digest: cfg.digest(),
    };
    let mut json = serde_json::to_vec_pretty(&m)?;
    json.push(b'\n');
    write_atomic(&common.out.join("manifest.json"), &json)?;
    // the effective configuration, so the run can be repeated without the original file
    write_atomic(&common.out.join("config.toml"), cfg.to_toml()?.as_bytes())
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

fn episode_file(dir: &Path, e: usize) -> PathBuf {
    dir.join(format!("episode_{e:05}.jsonl"))
}

fn save_logs(dir: &Path, logs: &[EpisodeLog]) -> Result<()> {
    create_out(dir)?;
    for l in logs {
        l.save(&episode_file(dir, l.header.episode))?;
    }
    Ok(())
}

fn gen_data(common: &Common, episodes: Option<usize>) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(n) = episodes {
        cfg.data.episodes = n;
    }
    if let Some(s) = common.seed {
        cfg.scenario.seed = s;
    }
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    create_out(&common.out)?;

    let map = Arc::new(IntersectionMap::new(cfg.map.clone())?);
    let ro = rollout_expert(&map, &cfg.scenario, &cfg.expert, cfg.mpc.limits, cfg.data.episodes, common.workers)?;
    let opts = cfg.slice_options();
    let mut scenes = Vec::new();
    for l in &ro.logs {
        scenes.extend(scenes_from_log(l, &opts)?);
    }
    let scenes_path = common.out.join("scenes.jsonl");
    write_dataset(&scenes_path, &scenes, cfg.net.horizon, cfg.net.dt)?;
    save_logs(&common.out.join("episodes"), &ro.logs)?;
    write_atomic(&common.out.join("scenarios.json"), &json_bytes(&ro.scenarios)?)?;
    write_manifest(
        common,
        "gen-data",
        &cfg,
        cfg.scenario.seed,
        vec![],
        vec![scenes_path, common.out.join("episodes"), common.out.join("scenarios.json")],
    )?;
    println!(
        "{} episodes ({} regenerated after expert contact), {} scenes -> {}",
        ro.logs.len(),
        ro.rejected,
        scenes.len(),
        common.out.display()
    );
    Ok(())
}

fn dataset_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("scenes.jsonl")
    } else {
        data.to_path_buf()
    }
}

fn load_scenes(data: &Path, cfg: &ExperimentConfig) -> Result<(PathBuf, Vec<Scene>)> {
    let path = dataset_path(data);
    let (header, scenes) = read_dataset(&path).with_context(|| format!("reading dataset {}", path.display()))?;
    if header.horizon != cfg.net.horizon {
        bail!(
            "horizon mismatch: dataset horizon {} differs from the network horizon {}",
            header.horizon,
            cfg.net.horizon
        );
    }
    if (header.dt - cfg.net.dt).abs() > 1e-9 {
        bail!("dataset step {} s does not match the network step {} s", header.dt, cfg.net.dt);
    }
    Ok((path, scenes))
}

fn train_cmd(common: &Common, cfg: &ExperimentConfig, data: &Path, checkpoint_every: usize) -> Result<()> {
    let (path, scenes) = load_scenes(data, cfg)?;
    create_out(&common.out)?;
    let digest = digest_of(&cfg.train);
    let out = &common.out;
    let mut kept = Vec::new();
    let outcome = train(&scenes, &cfg.net, &cfg.train, &cfg.mpc, common.workers, |log, net| {
        eprintln!(
            "epoch {:4}  loss {:.4}  val ade {:.3}  mr {:.3}  cr {:.3}",
            log.epoch, log.train_loss, log.val_ade, log.val_mr, log.val_cr
        );
        if checkpoint_every > 0 && log.epoch % checkpoint_every == 0 {
            let p = out.join(format!("epoch_{:05}.ckpt", log.epoch));
            save_params(net, &p, Some(&digest))?;
            kept.push(p);
        }
        Ok(())
    })?;
    let final_path = out.join("final.ckpt");
    save_params(&outcome.net, &final_path, Some(&digest))?;
    let mut csv = Vec::new();
    write_history(&mut csv, &outcome.history)?;
    let history_path = out.join("history.csv");
    write_atomic(&history_path, &csv)?;
    let mut outputs = vec![final_path, history_path];
    outputs.extend(kept);
    write_manifest(common, "train", cfg, cfg.train.seed, vec![path], outputs)?;
    println!(
        "trained on {} scenes ({} held out), {} relabellings dropped -> {}",
        outcome.train_scenes,
        outcome.val_scenes,
        outcome.dropped_augmentations,
        out.display()
    );
    Ok(())
}

fn load_checkpoint(path: &Path, cfg: &ExperimentConfig) -> Result<MtpNetwork> {
    let (_, net) = load_params(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let c = net.config();
    if c.horizon != cfg.net.horizon || (c.dt - cfg.net.dt).abs() > 1e-9 {
        bail!(
            "horizon mismatch: checkpoint predicts {} points every {} s but the configuration expects {} every {} s",
            c.horizon,
            c.dt,
            cfg.net.horizon,
            cfg.net.dt
        );
    }
    Ok(net)
}

#[derive(Serialize)]
struct OfflineSummary {
    n_scenes: usize,
    #[serde(flatten)]
    report: OfflineReport,
}

fn eval_offline(common: &Common, cfg: &ExperimentConfig, checkpoint: Option<&Path>, data: &Path, oracle: bool) -> Result<()> {
    let (path, scenes) = load_scenes(data, cfg)?;
    if scenes.is_empty() {
        bail!("no scenes in {}", path.display());
    }
    let net = match checkpoint {
        Some(p) => Some(load_checkpoint(p, cfg)?),
        None if oracle => None,
        None => return Err(usage("either --checkpoint or --oracle is required")),
    };
    create_out(&common.out)?;
    let (miss, lambda) = (cfg.train.miss_threshold, cfg.train.loss.lambda);
    let mut acc = OfflineAccumulator::new();
    let mut rows = Vec::with_capacity(scenes.len());
    for (i, s) in scenes.iter().enumerate() {
        let gt = s.futures().ok_or_else(|| anyhow!("scene {i} has no ground truth"))?;
        let pred = match &net {
            Some(n) => n.predict(s)?,
            None => gt.to_vec(),
        };
        let r = acc.add_scene(&pred, gt, miss, lambda)?;
        rows.push(SceneMetricsRow {
            scene: i,
            episode: s.episode(),
            frame: s.frame(),
            n_vehicles: s.len(),
            ade: r.ade,
            fde: r.fde,
            mr: r.mr,
            cr: r.cr,
        });
    }
    let summary = OfflineSummary {
        n_scenes: scenes.len(),
        report: acc.report(),
    };
    let report_path = common.out.join("offline_report.json");
    write_atomic(&report_path, &json_bytes(&summary)?)?;
    let mut csv = Vec::new();
    write_scene_rows(&mut csv, &rows)?;
    let rows_path = common.out.join("offline_scenes.csv");
    write_atomic(&rows_path, &csv)?;
    let mut inputs = vec![path];
    inputs.extend(checkpoint.map(Path::to_path_buf));
    write_manifest(common, "eval-offline", cfg, 0, inputs, vec![report_path, rows_path])?;
    let r = &summary.report;
    println!(
        "ADE {:.3}  FDE {:.3}  MR {:.3}  CR {:.3}  MR+CR {:.3}  ({} vehicles)",
        r.ade, r.fde, r.mr, r.cr, r.mr_plus_cr, r.n_vehicles
    );
    Ok(())
}

#[derive(Serialize)]
struct OnlineSummary {
    driver: String,
    #[serde(flatten)]
    report: OnlineReport,
    aborted_episodes: usize,
}

/// The closed-loop scenarios of an evaluation run, independent of the data seed.
fn eval_online(
    common: &Common,
    cfg: &ExperimentConfig,
    checkpoint: Option<&Path>,
    expert: bool,
    export_traj: bool,
    inputs: Vec<PathBuf>,
) -> Result<()> {
    let map = Arc::new(IntersectionMap::new(cfg.map.clone())?);
    let scenarios = cfg.eval_scenarios()?;
    let (logs, aborted, driver) = if expert {
        let logs: Vec<EpisodeLog> = scenarios
            .iter()
            .enumerate()
            .map(|(e, s)| run_expert_episode(&map, s, e, &cfg.scenario, &cfg.expert, cfg.mpc.limits))
            .collect();
        (logs, 0, "expert".to_string())
    } else {
        let path = checkpoint.ok_or_else(|| usage("either --checkpoint or --expert is required"))?;
        let net = load_checkpoint(path, cfg)?;
        let r = closed_loop_eval(&map, &scenarios, &cfg.scenario, &cfg.mpc, &net, common.workers)?;
        (r.logs, r.aborted, path.display().to_string())
    };
    create_out(&common.out)?;
    let outcomes: Vec<EpisodeOutcome> = logs.iter().map(EpisodeLog::outcome).collect();
    let summary = OnlineSummary {
        driver,
        report: dcr(&outcomes),
        aborted_episodes: aborted,
    };
    let report_path = common.out.join("online_report.json");
    write_atomic(&report_path, &json_bytes(&summary)?)?;
    let episodes_dir = common.out.join("episodes");
    save_logs(&episodes_dir, &logs)?;
    let mut outputs = vec![report_path, episodes_dir];
    if export_traj {
        let p = common.out.join("trajectories.csv");
        write_atomic(&p, &trajectory_csv(&logs)?)?;
        outputs.push(p);
    }
    write_manifest(common, "eval-online", cfg, cfg.eval.seed, inputs, outputs)?;
    let r = &summary.report;
    println!(
        "{} episodes, {:.0} m driven, V2V {} (DCR {:.1}), V2B {} (DCR {:.1}), {} aborted",
        r.episodes, r.total_distance, r.v2v_collisions, r.dcr_v2v, r.v2b_collisions, r.dcr_v2b, summary.aborted_episodes
    );
    Ok(())
}

#[derive(Serialize)]
struct TrajRow {
    episode: usize,
    tick: u64,
    time: f64,
    vehicle: u64,
    x: f64,
    y: f64,
    theta: f64,
    v: f64,
}

fn trajectory_csv(logs: &[EpisodeLog]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for l in logs {
        for t in &l.ticks {
            for p in &t.vehicles {
                w.serialize(TrajRow {
                    episode: l.header.episode,
                    tick: t.tick,
                    time: t.time,
                    vehicle: p.id,
                    x: p.x,
                    y: p.y,
                    theta: p.theta,
                    v: p.v,
                })?;
            }
        }
    }
    w.into_inner().map_err(|e| anyhow!("{e}"))
}
