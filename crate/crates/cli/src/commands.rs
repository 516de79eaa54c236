use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};

use flapsim::aero::FluidCoefficients;
use flapsim::analysis::{
    collect_io_pairs, fit_lti, phase_portrait, poles_zeros_classify, spectral_analysis, success_sweep, write_sweep_csv,
    FitOptions, IoData, SweepPoint, SweepSpec,
};
use flapsim::control::{config_hash, Policy, PolicyCheckpoint};
use flapsim::logging::{episode_table, rollout_table, training_table, LogTable, SCHEMA_VERSION};
use flapsim::model::NUM_JOINTS;
use flapsim::training::{run_episode, Controller, PolicyController, Rollout, Trainer, ZeroController};
use flapsim::trajectory::POLICY_DT;
use nalgebra::Vector3;
use serde::Serialize;
use serde_json::json;

use crate::config::{RunConfig, OUT_DIR_ENV};
use crate::{Cli, CliError, Command, Format};

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

/// First Ctrl-C asks long loops to stop at the next safe point so that
/// artifacts are written whole; a second one exits at once.
pub fn install_interrupt_handler() {
    let _ = ctrlc::set_handler(|| {
        if INTERRUPTED.swap(true, Ordering::SeqCst) {
            std::process::exit(CliError::INTERRUPTED as i32);
        }
        eprintln!("interrupt: finishing the current step and flushing outputs");
    });
}

fn interrupted() -> bool {
    INTERRUPTED.load(Ordering::SeqCst)
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Simulate => "simulate",
        Command::Train => "train",
        Command::Evaluate => "evaluate",
        Command::Sysid { .. } => "sysid",
        Command::Sweep => "sweep",
        Command::Analyze { .. } => "analyze",
        Command::Export { .. } => "export",
    }
}

/// Output directory with its metadata helpers.
struct Artifacts {
    dir: PathBuf,
}

impl Artifacts {
    fn create(dir: PathBuf) -> Result<Self, CliError> {
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(format!("{}: {e}", dir.display())))?;
        Ok(Self { dir })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn writer(&self, name: &str) -> Result<BufWriter<File>, CliError> {
        let p = self.path(name);
        File::create(&p).map(BufWriter::new).map_err(|e| CliError::io(format!("{}: {e}", p.display())))
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<(), CliError> {
        let mut w = self.writer(name)?;
        serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::io(e.to_string()))?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn table(&self, name: &str, table: &LogTable) -> Result<(), CliError> {
        table.write_csv(self.writer(name)?)?;
        Ok(())
    }

    fn text(&self, name: &str, text: &str) -> Result<(), CliError> {
        let mut w = self.writer(name)?;
        w.write_all(text.as_bytes())?;
        w.flush()?;
        Ok(())
    }
}

struct Context {
    cfg: RunConfig,
    cfg_text: String,
    hash: String,
    out: Artifacts,
    command: &'static str,
}

impl Context {
    /// Snapshot of the resolved configuration plus the stamp that makes an
    /// artifact directory reproducible.
    fn write_meta(&self, extra: serde_json::Value) -> Result<(), CliError> {
        self.out.text("config.toml", &self.cfg_text)?;
        let mut meta = json!({
            "command": self.command,
            "flapsim_version": env!("CARGO_PKG_VERSION"),
            "log_schema_version": SCHEMA_VERSION,
            "seed": self.cfg.seed,
            "stage": self.cfg.stage,
            "config_hash": self.hash,
        });
        if let (Some(m), serde_json::Value::Object(e)) = (meta.as_object_mut(), extra) {
            m.extend(e);
        }
        self.out.json("meta.json", &meta)
    }
}

fn resolve(cli: &Cli) -> Result<Context, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = cli.stage {
        cfg.stage = s;
    }
    if let Some(n) = cli.episodes {
        cfg.simulate.episodes = n;
        cfg.evaluate.episodes = n;
        cfg.sweep.episodes = n;
    }
    cfg.validate()?;
    let command = command_name(&cli.command);
    let dir = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("runs").join(command));
    cfg.output_dir = None;
    let cfg_text = cfg.to_toml();
    let hash = config_hash(&cfg_text);
    Ok(Context { cfg, cfg_text, hash, out: Artifacts::create(dir)?, command })
}

fn load_policy(path: Option<&Path>) -> Result<Policy, CliError> {
    let path = path.ok_or_else(|| CliError::checkpoint("this command needs --policy <checkpoint>"))?;
    if !path.exists() {
        return Err(CliError::checkpoint(format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = PolicyCheckpoint::load(path).map_err(|e| CliError::checkpoint(format!("{}: {e}", path.display())))?;
    ckpt.to_policy().map_err(|e| CliError::checkpoint(format!("{}: {e}", path.display())))
}

pub fn execute(cli: &Cli) -> Result<(), CliError> {
    // Export only converts files; it needs no run configuration.
    if let Command::Export { input, format } = &cli.command {
        return export(cli, input, *format);
    }
    let ctx = resolve(cli)?;
    match &cli.command {
        Command::Simulate => simulate(cli, &ctx),
        Command::Train => train(cli, &ctx),
        Command::Evaluate => evaluate(cli, &ctx),
        Command::Sysid { data } => sysid(cli, &ctx, data.as_deref()),
        Command::Sweep => sweep(cli, &ctx),
        Command::Analyze { input, skip_s } => analyze(&ctx, input, *skip_s),
        Command::Export { .. } => unreachable!("handled above"),
    }
}

#[derive(Serialize)]
struct EpisodeSummary {
    seed: u64,
    steps: usize,
    duration_s: f64,
    termination: &'static str,
    episode_return: f64,
    mean_tracking_error_m: f64,
    rms_tracking_error_m: f64,
    final_position_error_m: f64,
}

impl EpisodeSummary {
    fn of(r: &Rollout) -> Self {
        let errs: Vec<f64> = (0..r.steps()).map(|k| (r.states[k + 1].base_position - r.targets[k]).norm()).collect();
        let n = errs.len().max(1) as f64;
        Self {
            seed: r.seed,
            steps: r.steps(),
            duration_s: r.duration(),
            termination: r.termination.name(),
            episode_return: r.total_return(),
            mean_tracking_error_m: errs.iter().sum::<f64>() / n,
            rms_tracking_error_m: (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt(),
            final_position_error_m: r.final_position_error(),
        }
    }
}

/// Runs `episodes` episodes with seeds `seed, seed + 1, ...`.
fn run_episodes(
    ctx: &Context,
    policy: Option<&Policy>,
    section: &crate::config::EpisodeSection,
) -> Result<Vec<Rollout>, CliError> {
    let cfg = &ctx.cfg;
    let model = cfg.model()?;
    let randomization = cfg.episode_randomization(section);
    let episode = cfg.episode_config(section.duration_s);
    let mut out = Vec::with_capacity(section.episodes);
    for i in 0..section.episodes {
        if interrupted() {
            break;
        }
        let seed = cfg.seed + i as u64;
        let traj = cfg.trajectory(section.duration_s, seed)?;
        let mut controller: Box<dyn Controller> = match policy {
            Some(p) => Box::new(PolicyController::deterministic(p)),
            None => Box::new(ZeroController),
        };
        out.push(run_episode(controller.as_mut(), &model, &cfg.environment, &traj, &episode, &randomization, seed)?);
    }
    Ok(out)
}

fn simulate(cli: &Cli, ctx: &Context) -> Result<(), CliError> {
    let policy = match &cli.policy {
        Some(p) => Some(load_policy(Some(p))?),
        None => None,
    };
    let rollouts = run_episodes(ctx, policy.as_ref(), &ctx.cfg.simulate)?;
    let mut summaries = Vec::new();
    for (i, r) in rollouts.iter().enumerate() {
        ctx.out.table(&format!("rollout_{i:03}.csv"), &rollout_table(r))?;
        let s = EpisodeSummary::of(r);
        println!("episode {i}: {} steps, {}, return {:.2}", s.steps, s.termination, s.episode_return);
        summaries.push(s);
    }
    ctx.out.json("summary.json", &summaries)?;
    ctx.write_meta(json!({
        "controller": if policy.is_some() { "policy" } else { "zero" },
        "policy": cli.policy,
        "interrupted": interrupted(),
    }))?;
    finish()
}

fn finish() -> Result<(), CliError> {
    if interrupted() {
        Err(CliError { code: CliError::INTERRUPTED, message: "interrupted; partial outputs were written".into() })
    } else {
        Ok(())
    }
}

fn train(cli: &Cli, ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let mut ppo = cfg.ppo.clone();
    ppo.seed = cfg.seed;
    if cli.stage.is_some() {
        ppo.start_stage = cfg.stage;
        ppo.final_stage = cfg.stage;
    }
    let mut trainer = Trainer::new(ppo, cfg.episode.clone(), cfg.randomization.clone(), cfg.model()?, cfg.environment.clone())?;
    let mut metrics = Vec::new();
    while trainer.env_steps() < cfg.train.total_steps && !interrupted() {
        let m = trainer.run_update()?;
        if cfg.train.report_every > 0 && m.update % cfg.train.report_every == 0 {
            eprintln!(
                "update {:5} steps {:8} stage {} return {:8.2} length {:7.1}",
                m.update, m.env_steps, m.stage, m.mean_return, m.mean_length
            );
        }
        metrics.push(m);
    }
    let stage = trainer.stage().index();
    for (s, p) in trainer.stage_policies() {
        PolicyCheckpoint::from_policy(p, &ctx.hash, cfg.seed, s.index())
            .save(&ctx.out.path(&format!("stage_{}.json", s.index())))?;
    }
    PolicyCheckpoint::from_policy(trainer.policy(), &ctx.hash, cfg.seed, stage).save(&ctx.out.path("policy.json"))?;
    ctx.out.table("training.csv", &training_table(&metrics))?;
    ctx.out.table("episodes.csv", &episode_table(trainer.episodes()))?;
    ctx.write_meta(json!({
        "env_steps": trainer.env_steps(),
        "updates": metrics.len(),
        "final_stage": stage,
        "interrupted": interrupted(),
    }))?;
    println!("trained {} steps; final stage {stage}; checkpoint {}", trainer.env_steps(), ctx.out.path("policy.json").display());
    finish()
}

fn evaluate(cli: &Cli, ctx: &Context) -> Result<(), CliError> {
    let policy = load_policy(cli.policy.as_deref())?;
    let rollouts = run_episodes(ctx, Some(&policy), &ctx.cfg.evaluate)?;
    let summaries: Vec<EpisodeSummary> = rollouts.iter().map(EpisodeSummary::of).collect();
    let mut table = LogTable::new(
        "evaluation",
        [
            "seed",
            "steps",
            "duration_s",
            "episode_return",
            "mean_tracking_error_m",
            "rms_tracking_error_m",
            "final_position_error_m",
        ]
        .map(String::from)
        .to_vec(),
    );
    for s in &summaries {
        table.push(vec![
            s.seed as f64,
            s.steps as f64,
            s.duration_s,
            s.episode_return,
            s.mean_tracking_error_m,
            s.rms_tracking_error_m,
            s.final_position_error_m,
        ])?;
    }
    let n = summaries.len().max(1) as f64;
    let mean_err = summaries.iter().map(|s| s.mean_tracking_error_m).sum::<f64>() / n;
    let survived_10s = summaries.iter().filter(|s| s.duration_s >= 10.0 - 1e-9).count();
    let completed = summaries.iter().filter(|s| s.termination == "timeout").count();
    ctx.out.table("evaluation.csv", &table)?;
    ctx.out.json(
        "evaluation.json",
        &json!({
            "episodes": summaries,
            "mean_tracking_error_m": mean_err,
            "survived_10s": survived_10s,
            "completed": completed,
        }),
    )?;
    ctx.write_meta(json!({ "policy": cli.policy, "interrupted": interrupted() }))?;
    println!(
        "{} episodes: mean tracking error {mean_err:.3} m, {survived_10s} survived 10 s, {completed} completed",
        summaries.len()
    );
    finish()
}

fn sysid(cli: &Cli, ctx: &Context, data: Option<&Path>) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let (io, discarded) = match (data, &cli.policy) {
        (Some(path), _) => {
            let f = File::open(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
            let io = IoData::read_csv(f).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
            (io, Vec::new())
        }
        (None, Some(_)) => {
            let policy = load_policy(cli.policy.as_deref())?;
            let spec = flapsim::analysis::ExcitationSpec { seed: cfg.seed, ..cfg.sysid.excitation.clone() };
            let c = collect_io_pairs(&policy, &cfg.model()?, &cfg.environment, &cfg.episode, &spec)?;
            for d in &c.discarded {
                eprintln!("discarded segment seed {}: {} after {} steps", d.seed, d.termination.name(), d.steps);
            }
            c.data.write_csv(ctx.out.writer("io.csv")?)?;
            (c.data, c.discarded)
        }
        (None, None) => return Err(CliError::usage("sysid needs --data <io.csv> or --policy <checkpoint>")),
    };
    let fit = fit_lti(&io, &FitOptions { shared_denominator: cfg.sysid.shared_denominator, ..FitOptions::default() })?;
    let report = poles_zeros_classify(&fit)?;
    ctx.out.json("sysid.json", &json!({ "fit": fit, "pole_zero": report, "discarded_segments": discarded }))?;
    ctx.write_meta(json!({ "data": data, "policy": cli.policy }))?;
    println!(
        "denominator {:?}; bibo_stable {}; minimum_phase {:?}; held-out mse {:.3e} (normalized {:.3e}){}",
        fit.axes[0].denominator,
        report.bibo_stable,
        report.minimum_phase,
        fit.heldout_mse,
        fit.heldout_mse_normalized,
        if fit.poor_fit { "; poor fit" } else { "" }
    );
    Ok(())
}

fn sweep(cli: &Cli, ctx: &Context) -> Result<(), CliError> {
    let cfg = &ctx.cfg;
    let policy = load_policy(cli.policy.as_deref())?;
    let s = &cfg.sweep;
    let mut points = Vec::new();
    if !s.coefficient.is_empty() {
        let index = FluidCoefficients::NAMES.iter().position(|n| *n == s.coefficient).ok_or_else(|| {
            CliError::config(format!("unknown coefficient {:?}; expected one of {:?}", s.coefficient, FluidCoefficients::NAMES))
        })?;
        points.extend(s.scales.iter().map(|v| SweepPoint::coefficient(index, *v)));
    }
    points.extend(s.winds_m_s.iter().map(|w| SweepPoint::wind(Vector3::from(*w))));
    let spec = SweepSpec {
        points,
        episodes: s.episodes,
        duration_s: s.duration_s,
        seed: cfg.seed,
        randomization: cfg.episode_randomization(&cfg.evaluate),
        parallel: cfg.ppo.parallel,
        ..SweepSpec::default()
    };
    let rows = success_sweep(&policy, &cfg.model()?, &cfg.environment, &cfg.episode_config(s.duration_s), &spec)?;
    write_sweep_csv(&rows, ctx.out.writer("sweep.csv")?)?;
    ctx.out.json("sweep.json", &rows)?;
    ctx.write_meta(json!({ "policy": cli.policy }))?;
    for r in &rows {
        println!(
            "scales {:?} wind {:?}: {}/{} succeeded",
            r.point.coefficient_scale,
            r.point.wind_m_s.as_slice(),
            r.successes,
            r.episodes
        );
    }
    Ok(())
}

fn read_table(path: &Path) -> Result<LogTable, CliError> {
    let mut bytes = Vec::new();
    File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let parsed = if bytes.starts_with(b"FLAPLOG") {
        LogTable::read_binary(bytes.as_slice())
    } else if bytes.first() == Some(&b'{') {
        serde_json::from_slice(&bytes).map_err(flapsim::Error::from)
    } else {
        LogTable::read_csv(bytes.as_slice())
    };
    parsed.map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

fn analyze(ctx: &Context, input: &Path, skip_s: f64) -> Result<(), CliError> {
    let table = read_table(input)?;
    let skip = (skip_s / POLICY_DT).round() as usize;
    let fs = 1.0 / POLICY_DT;
    let mut spectra = Vec::new();
    let mut portraits = serde_json::Map::new();
    let mut phase = LogTable::new("phase", vec!["t_s".to_string()]);
    let t = table.column("t_s").ok_or_else(|| CliError::config("log has no t_s column"))?;
    let mut phase_cols = vec![t.get(skip..).unwrap_or(&[]).to_vec()];
    for j in 0..NUM_JOINTS {
        let (Some(q), Some(qd)) = (table.column(&format!("q{j}_rad")), table.column(&format!("qd{j}_rad_s"))) else {
            return Err(CliError::config(format!("log has no q{j}_rad / qd{j}_rad_s columns")));
        };
        let q = q.get(skip..).unwrap_or(&[]).to_vec();
        let qd = qd.get(skip..).unwrap_or(&[]).to_vec();
        let key = format!("joint_{j}");
        let entry = match (spectral_analysis(&q, fs), phase_portrait(&q, &qd, fs)) {
            (Ok(s), p) => {
                let v = json!({
                    "fundamental_hz": s.fundamental_hz,
                    "energy_fraction": s.energy_fraction,
                    "dominant_mode": s.dominant_mode,
                    "orbit": p.as_ref().ok(),
                    "orbit_error": p.as_ref().err().map(|e| e.to_string()),
                });
                spectra.push((j, s));
                v
            }
            (Err(e), _) => json!({ "error": e.to_string() }),
        };
        portraits.insert(key, entry);
        phase.columns.push(format!("q{j}_rad"));
        phase.columns.push(format!("qd{j}_rad_s"));
        phase_cols.push(q);
        phase_cols.push(qd);
    }
    let rows = phase_cols[0].len();
    for k in 0..rows {
        phase.rows.push(phase_cols.iter().map(|c| c[k]).collect());
    }
    if let Some((_, first)) = spectra.first() {
        let mut spec = LogTable::new("spectrum", vec!["frequency_hz".to_string()]);
        spec.columns.extend(spectra.iter().map(|(j, _)| format!("power_q{j}")));
        for (k, f) in first.frequencies_hz.iter().enumerate() {
            let mut row = vec![*f];
            row.extend(spectra.iter().map(|(_, s)| s.power[k]));
            spec.rows.push(row);
        }
        ctx.out.table("spectrum.csv", &spec)?;
    }
    ctx.out.table("phase.csv", &phase)?;
    ctx.out.json("analysis.json", &portraits)?;
    ctx.write_meta(json!({ "input": input, "skip_s": skip_s }))?;
    for (j, s) in &spectra {
        println!("joint {j}: fundamental {:.2} Hz, energy fraction {:.1}%", s.fundamental_hz, 100.0 * s.energy_fraction);
    }
    Ok(())
}

fn export(cli: &Cli, input: &Path, format: Format) -> Result<(), CliError> {
    let table = read_table(input)?;
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("table");
    let dir = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| input.parent().map(Path::to_path_buf).unwrap_or_default());
    let out = Artifacts::create(dir)?;
    let name = match format {
        Format::Csv => format!("{stem}.csv"),
        Format::Bin => format!("{stem}.bin"),
        Format::Json => format!("{stem}.json"),
    };
    if out.path(&name) == input {
        return Err(CliError::usage(format!("export would overwrite its input {}", input.display())));
    }
    match format {
        Format::Csv => table.write_csv(out.writer(&name)?)?,
        Format::Bin => table.write_binary(out.writer(&name)?)?,
        Format::Json => out.json(&name, &table)?,
    }
    println!("wrote {}", out.path(&name).display());
    Ok(())
}
