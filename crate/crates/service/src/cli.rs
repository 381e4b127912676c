//! Command-line interface.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Duration, Utc};
use clap::{Args, Parser, Subcommand, ValueEnum};
use doorwatch_core::change_gate::evaluate_gate;
use doorwatch_core::face_geometry::FaceBox;
use doorwatch_core::store::{NewPerson, Period, Relationship, ViewImage};

use crate::api;
use crate::app::{App, AppParts};
use crate::clock::{Clock, SteppingClock, SystemClock};
use crate::config::Config;
use crate::fixtures::JohnAtEntrance;
use crate::pipeline::load_frame;

#[derive(Debug, Parser)]
#[command(name = "doorwatch", version, about = "Home camera monitoring and door control")]
pub struct Cli {
    /// Configuration file (TOML).
    #[arg(long, global = true, env = "DOORWATCH_CONFIG")]
    pub config: Option<PathBuf>,
    /// Directory holding profiles, events, scenes and the outbox.
    #[arg(long, global = true, env = "DOORWATCH_DATA", default_value = "data")]
    pub data_dir: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Serve the API and ingest every camera that has a frame directory.
    Run,
    /// Serve the API only.
    Serve,
    /// Process one directory of numbered frames and exit.
    Ingest(IngestArgs),
    /// Score the change gate against a labelled frame list.
    EvaluateGate(EvaluateGateArgs),
    #[command(subcommand)]
    Profile(ProfileCommand),
    /// Command a running service's door.
    Door(DoorArgs),
    /// Print an activity report.
    Summary(SummaryArgs),
    /// Write the john_at_entrance demo stream.
    Fixtures { out: PathBuf },
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    pub dir: PathBuf,
    #[arg(long)]
    pub camera: String,
    /// Stamp frames from this instant instead of the wall clock.
    #[arg(long)]
    pub start: Option<DateTime<Utc>>,
    /// Time between frames when `--start` is given.
    #[arg(long, default_value_t = 1000)]
    pub step_ms: i64,
}

#[derive(Debug, Args)]
pub struct EvaluateGateArgs {
    /// Lines of `path<TAB>label`, label 1 for activity and 0 otherwise.
    pub manifest: PathBuf,
    /// Also write per-frame `index,score,active,label` rows.
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub global_threshold: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum RelationshipArg {
    Family,
    Friend,
    Caregiver,
}

impl From<RelationshipArg> for Relationship {
    fn from(r: RelationshipArg) -> Self {
        match r {
            RelationshipArg::Family => Relationship::Family,
            RelationshipArg::Friend => Relationship::Friend,
            RelationshipArg::Caregiver => Relationship::Caregiver,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum ProfileCommand {
    Add {
        #[arg(long)]
        name: String,
        #[arg(long, default_value = "")]
        email: String,
        #[arg(long, default_value = "")]
        contact: String,
        #[arg(long, default_value = "")]
        address: String,
        #[arg(long, value_enum, default_value = "family")]
        relationship: RelationshipArg,
        /// `image.png@x,y,w,h`; repeat for more views.
        #[arg(long = "view", required = true)]
        views: Vec<String>,
        #[arg(long)]
        allow_duplicate: bool,
    },
    AddViews {
        subject_id: u64,
        #[arg(long = "view", required = true)]
        views: Vec<String>,
    },
    Delete {
        subject_id: u64,
    },
    List,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DoorAction {
    Open,
    Close,
    Status,
}

#[derive(Debug, Args)]
pub struct DoorArgs {
    pub action: DoorAction,
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    pub url: String,
    #[arg(long, env = "DOORWATCH_TOKEN")]
    pub token: Option<String>,
    /// Event the command responds to.
    #[arg(long)]
    pub correlation: Option<u64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PeriodArg {
    Daily,
    Weekly,
    Monthly,
}

#[derive(Debug, Args)]
pub struct SummaryArgs {
    pub period: PeriodArg,
    /// End of the report window; defaults to now.
    #[arg(long)]
    pub anchor: Option<DateTime<Utc>>,
}

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).with_context(|| format!("loading {}", p.display())),
        None => Ok(Config::default()),
    }
}

/// Parses `path@x,y,w,h`.
pub fn parse_view(spec: &str) -> Result<ViewImage> {
    let (path, bx) = spec
        .rsplit_once('@')
        .with_context(|| format!("view {spec:?} must look like image.png@x,y,w,h"))?;
    let nums: Vec<usize> = bx
        .split(',')
        .map(|n| n.trim().parse())
        .collect::<Result<_, _>>()
        .with_context(|| format!("bad face box in {spec:?}"))?;
    let [x, y, w, h] = nums[..] else {
        bail!("face box in {spec:?} needs four numbers");
    };
    Ok(ViewImage {
        frame: load_frame(Path::new(path))?,
        face: Some(FaceBox::new(x, y, w, h)?),
        pose: None,
    })
}

pub fn read_gate_manifest(path: &Path) -> Result<Vec<(PathBuf, bool)>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (p, label) = line
            .split_once('\t')
            .with_context(|| format!("line {}: expected path<TAB>label", i + 1))?;
        let label = match label.trim() {
            "1" | "true" => true,
            "0" | "false" => false,
            other => bail!("line {}: label must be 0 or 1, got {other:?}", i + 1),
        };
        out.push((base.join(p), label));
    }
    Ok(out)
}

pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    let config = load_config(cli.config.as_deref())?;
    match cli.command {
        Command::Run => serve(config, &cli.data_dir, true),
        Command::Serve => serve(config, &cli.data_dir, false),
        Command::Ingest(a) => {
            let app = App::open(config, &cli.data_dir, AppParts::default())?;
            let clock: Box<dyn Clock> = match a.start {
                Some(t) => Box::new(SteppingClock::new(t, Duration::milliseconds(a.step_ms))),
                None => Box::new(SystemClock),
            };
            let report = app.run_directory(&a.camera, &a.dir, clock.as_ref())?;
            writeln!(out, "{}", serde_json::to_string(&report)?)?;
            Ok(())
        }
        Command::EvaluateGate(a) => {
            let mut gate = config.gate.clone();
            if let Some(t) = a.global_threshold {
                gate.global_threshold = t;
            }
            let stream = read_gate_manifest(&a.manifest)?
                .into_iter()
                .map(|(p, l)| Ok((load_frame(&p)?, l)))
                .collect::<Result<Vec<_>>>()?;
            let eval = evaluate_gate(&stream, &gate)?;
            if let Some(csv) = a.csv {
                let mut text = String::from("index,score,active,label\n");
                for r in &eval.rows {
                    text.push_str(&format!("{},{},{},{}\n", r.index, r.score, r.active as u8, r.label as u8));
                }
                std::fs::write(&csv, text).with_context(|| format!("writing {}", csv.display()))?;
            }
            writeln!(out, "precision={:.4} recall={:.4}", eval.precision, eval.recall)?;
            Ok(())
        }
        Command::Profile(p) => profile(config, &cli.data_dir, p, out),
        Command::Door(d) => door(d, out),
        Command::Summary(s) => {
            let app = App::open(config, &cli.data_dir, AppParts::default())?;
            let period = match s.period {
                PeriodArg::Daily => Period::Daily,
                PeriodArg::Weekly => Period::Weekly,
                PeriodArg::Monthly => Period::Monthly,
            };
            let report = app.store().query_summary(period, s.anchor.unwrap_or_else(Utc::now));
            writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?;
            Ok(())
        }
        Command::Fixtures { out: dir } => {
            let paths = JohnAtEntrance::generate().write(&dir)?;
            writeln!(out, "wrote {}", paths.config.display())?;
            for p in &paths.enrollment {
                let b = JohnAtEntrance::face_box().rect();
                writeln!(out, "enroll with --view {}@{},{},{},{}", p.display(), b.x, b.y, b.width, b.height)?;
            }
            Ok(())
        }
    }
}

fn profile(config: Config, data_dir: &Path, cmd: ProfileCommand, out: &mut dyn Write) -> Result<()> {
    let app = App::open(config, data_dir, AppParts::default())?;
    match cmd {
        ProfileCommand::Add {
            name,
            email,
            contact,
            address,
            relationship,
            views,
            allow_duplicate,
        } => {
            let views = views.iter().map(|v| parse_view(v)).collect::<Result<Vec<_>>>()?;
            let person = NewPerson {
                name,
                email,
                contact,
                address,
                relationship: relationship.into(),
            };
            let added = app.add_person(person, views, allow_duplicate)?;
            writeln!(out, "{}", serde_json::to_string(&added)?)?;
        }
        ProfileCommand::AddViews { subject_id, views } => {
            let views = views.iter().map(|v| parse_view(v)).collect::<Result<Vec<_>>>()?;
            let added = app.add_views(subject_id, views)?;
            writeln!(out, "{}", serde_json::to_string(&added)?)?;
        }
        ProfileCommand::Delete { subject_id } => {
            let n = app.delete_person(subject_id)?;
            writeln!(out, "deleted subject {subject_id} ({n} views)")?;
        }
        ProfileCommand::List => {
            for p in app.persons() {
                writeln!(out, "{}\t{}\t{}\t{} views", p.subject_id, p.name, p.contact, p.views.len())?;
            }
        }
    }
    Ok(())
}

fn door(d: DoorArgs, out: &mut dyn Write) -> Result<()> {
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(std::time::Duration::from_secs(10)))
        .http_status_as_error(false)
        .build()
        .into();
    let base = d.url.trim_end_matches('/');
    let mut resp = match d.action {
        DoorAction::Status => agent.get(&format!("{base}/door")).call()?,
        DoorAction::Open | DoorAction::Close => {
            let verb = if d.action == DoorAction::Open { "open" } else { "close" };
            let token = d.token.context("--token is required to command the door")?;
            agent
                .post(&format!("{base}/door/{verb}"))
                .header(api::TOKEN_HEADER, &token)
                .send_json(serde_json::json!({"correlation": d.correlation}))?
        }
    };
    let status = resp.status();
    let body = resp.body_mut().read_to_string()?;
    if !status.is_success() {
        bail!("service answered {status}: {body}");
    }
    writeln!(out, "{body}")?;
    Ok(())
}

fn serve(config: Config, data_dir: &Path, ingest: bool) -> Result<()> {
    let listen = config.listen.clone();
    let app = Arc::new(App::open(config, data_dir, AppParts::default())?);
    if ingest {
        for (camera, dir) in app.camera_dirs() {
            let Some(dir) = dir else { continue };
            let app = app.clone();
            std::thread::Builder::new()
                .name(format!("ingest-{camera}"))
                .spawn(move || match app.run_directory(&camera, &dir, &SystemClock) {
                    Ok(r) => tracing::info!(camera, events = r.events, "ingestion finished"),
                    Err(e) => tracing::error!(camera, error = %e, "ingestion stopped"),
                })?;
        }
    }
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&listen)
            .await
            .with_context(|| format!("binding {listen}"))?;
        tracing::info!(addr = %listen, "serving");
        axum::serve(listener, api::router(app))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_verbs() {
        let cli = Cli::try_parse_from([
            "doorwatch", "--data-dir", "/tmp/x", "profile", "add", "--name", "John",
            "--view", "a.png@1,2,3,4", "--view", "b.png@5,6,7,8",
        ])
        .unwrap();
        match cli.command {
            Command::Profile(ProfileCommand::Add { views, .. }) => assert_eq!(views.len(), 2),
            other => panic!("{other:?}"),
        }
        for args in [
            vec!["doorwatch", "door", "status"],
            vec!["doorwatch", "summary", "weekly"],
            vec!["doorwatch", "ingest", "frames", "--camera", "cam1"],
            vec!["doorwatch", "evaluate-gate", "m.tsv", "--csv", "o.csv"],
        ] {
            Cli::try_parse_from(args).unwrap();
        }
        assert!(Cli::try_parse_from(["doorwatch", "summary", "yearly"]).is_err());
    }

    #[test]
    fn view_spec_errors() {
        assert!(parse_view("face.png").is_err());
        assert!(parse_view("face.png@1,2,3").is_err());
    }

    #[test]
    fn gate_manifest_paths_are_relative() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.tsv");
        std::fs::write(&m, "# frames\na.png\t0\nb.png\t1\n").unwrap();
        let rows = read_gate_manifest(&m).unwrap();
        assert_eq!(rows, vec![(dir.path().join("a.png"), false), (dir.path().join("b.png"), true)]);
        std::fs::write(&m, "a.png\tmaybe\n").unwrap();
        assert!(read_gate_manifest(&m).is_err());
    }
}
