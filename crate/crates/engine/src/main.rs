use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use scene4d_core::parser::{parse, PlanBackend};
use scene4d_engine::backend::{HttpPlanBackend, DEFAULT_TIMEOUT};
use scene4d_engine::script::run_script;
use scene4d_engine::server::{serve, AppState, SharedBackend};
use scene4d_engine::session::{frame_file_stem, write_render};
use scene4d_engine::{CameraSpec, EngineConfig, EngineError, Session};

#[derive(Parser)]
#[command(name = "engine", version, about = "Language-guided 4D Gaussian scene engine")]
struct Cli {
    /// Optional remote plan backend; the grammar parser is the fallback.
    #[arg(long, env = "ENGINE_LLM_URL", global = true)]
    llm_url: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    #[arg(long, default_value_t = 8)]
    frames: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Render width and height in pixels.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 100)]
    gaussians_per_object: usize,
    #[arg(long)]
    distill_steps: Option<usize>,
    /// Skip the guided latent sampler on GEN.
    #[arg(long)]
    no_guidance: bool,
    /// Write PFM and PNG renders of every frame on each commit.
    #[arg(long)]
    render: bool,
}

impl ConfigArgs {
    fn config(&self) -> EngineConfig {
        let mut cfg = EngineConfig {
            width: self.size,
            height: self.size,
            frames: self.frames,
            seed: self.seed,
            gaussians_per_object: self.gaussians_per_object,
            run_guidance: !self.no_guidance,
            render_on_commit: self.render,
            ..EngineConfig::default()
        };
        if let Some(steps) = self.distill_steps {
            cfg.distill.steps = steps;
        }
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a scene from a prompt into a new session directory.
    Gen {
        prompt: String,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Apply a command to the session in DIR.
    Edit { dir: PathBuf, command: String },
    /// Render one frame of the current scene in DIR.
    Render {
        dir: PathBuf,
        /// `fixed`, `orbit`, or `azimuth,elevation,radius`.
        #[arg(long, default_value = "fixed")]
        camera: String,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        /// Output directory (default DIR/renders).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pop the newest version of the session in DIR.
    Undo { dir: PathBuf },
    /// Print the applied commands of the session in DIR.
    History { dir: PathBuf },
    /// Run a newline-delimited command file in a fresh session.
    Script {
        file: PathBuf,
        /// Session directory (default FILE with a `.session` suffix).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Start the HTTP API.
    Serve {
        #[arg(long, env = "ENGINE_PORT", default_value_t = 8080)]
        port: u16,
        #[arg(long, env = "ENGINE_DATA_DIR", default_value = "sessions")]
        data_dir: PathBuf,
        #[arg(long, default_value = "127.0.0.1")]
        host: std::net::IpAddr,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn backend(url: &Option<String>) -> Result<Option<HttpPlanBackend>, EngineError> {
    url.as_deref()
        .filter(|u| !u.trim().is_empty())
        .map(|u| {
            HttpPlanBackend::new(u, DEFAULT_TIMEOUT)
                .map_err(|e| EngineError::BadRequest(format!("plan backend: {e}")))
        })
        .transpose()
}

fn print_json<T: serde::Serialize>(value: &T) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn run(cli: Cli) -> Result<(), EngineError> {
    let http = backend(&cli.llm_url)?;
    let plan_backend = http.as_ref().map(|b| b as &dyn PlanBackend);
    match cli.command {
        Command::Gen { prompt, out, config } => {
            // Reject edit commands before creating anything on disk.
            if let Ok(plan) = parse(&prompt) {
                if plan.as_gen().is_none() {
                    return Err(EngineError::BadRequest(format!("{prompt:?} is an edit command, not a generation prompt")));
                }
            }
            let id = out.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            let mut session = Session::create(&out, id, config.config())?;
            print_json(&session.run_command(&prompt, plan_backend)?);
        }
        Command::Edit { dir, command } => {
            let mut session = Session::open(&dir)?;
            print_json(&session.run_command(&command, plan_backend)?);
        }
        Command::Render {
            dir,
            camera,
            frame,
            out,
        } => {
            let session = Session::open(&dir)?;
            let spec: CameraSpec = camera.parse()?;
            let r = session.render(frame, spec)?;
            let out = out.unwrap_or_else(|| dir.join("renders"));
            std::fs::create_dir_all(&out).map_err(|e| EngineError::io(&out, e))?;
            let label = match spec {
                CameraSpec::Fixed => "fixed",
                CameraSpec::Orbit => "orbit",
                CameraSpec::Custom { .. } => "custom",
            };
            let stem = format!("{label}_{}", frame_file_stem(frame));
            let files: Vec<PathBuf> = write_render(&out, &stem, &r)?.into_iter().map(|f| out.join(f)).collect();
            print_json(&serde_json::json!({ "version": session.current_version(), "files": files }));
        }
        Command::Undo { dir } => print_json(&Session::open(&dir)?.undo()?),
        Command::History { dir } => print_json(&Session::open(&dir)?.history()),
        Command::Script { file, out, config } => {
            let text = std::fs::read_to_string(&file).map_err(|e| EngineError::io(&file, e))?;
            let out = out.unwrap_or_else(|| default_script_dir(&file));
            print_json(&run_script(&text, &out, config.config(), plan_backend)?);
        }
        Command::Serve { .. } => unreachable!("handled by serve_command"),
    }
    Ok(())
}

fn default_script_dir(file: &Path) -> PathBuf {
    let mut name = file.file_name().unwrap_or_default().to_os_string();
    name.push(".session");
    file.with_file_name(name)
}

fn serve_command(port: u16, host: std::net::IpAddr, data_dir: PathBuf, config: EngineConfig, llm: Option<String>) -> anyhow::Result<()> {
    config.validate()?;
    std::fs::create_dir_all(&data_dir).with_context(|| format!("creating {}", data_dir.display()))?;
    let backend: Option<SharedBackend> = backend(&llm)?.map(|b| Arc::new(b) as SharedBackend);
    let state = Arc::new(AppState::new(data_dir, config, backend));
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let addr = SocketAddr::new(host, port);
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        log::info!("listening on {}", listener.local_addr()?);
        serve(listener, state).await?;
        Ok(())
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if let Command::Serve {
        port,
        data_dir,
        host,
        config,
    } = &cli.command
    {
        return match serve_command(*port, *host, data_dir.clone(), config.config(), cli.llm_url.clone()) {
            Ok(()) => ExitCode::SUCCESS,
            Err(e) => {
                eprintln!("error: {e:#}");
                ExitCode::FAILURE
            }
        };
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", serde_json::to_string(&e.body()).expect("error body serializes"));
            ExitCode::FAILURE
        }
    }
}
