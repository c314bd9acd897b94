//! `fidunav`: simulate rigs, run evaluation studies, solve recorded
//! observations and serve live guidance.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fidunav::evaluation::{emit_report, run_localization_study, run_precision_study, Format};
use fidunav::pipeline::{assemble_frames, GuidanceState, ObservationFrame, Tracker};
use fidunav::protocol::{to_line, StateRecord};
use fidunav::rig::RigConfig;
use fidunav::server::{serve, ServerConfig};
use fidunav::simulator::{
    preset_localization_study, preset_precision_study, read_records, write_frame, write_header, RecordLine, Scenario,
};
use fidunav::{simulate, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "fidunav", version, about = "Multi-camera fiducial tracking for coil navigation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for every random draw; overrides the scenario's own seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Rig TOML; overrides the scenario's rig.
    #[arg(long)]
    rig: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write simulated frames (with ground truth) as NDJSON records.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Scenario TOML (default: the localization study).
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Output file (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Frame count override; required for endless scenarios.
        #[arg(long)]
        frames: Option<u64>,
    },
    /// Run a study and write its CSV table and text report.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        study: Study,
        #[arg(long)]
        out: PathBuf,
        /// Write only the CSV table or only the text report.
        #[arg(long, value_enum)]
        format: Option<OutputFormat>,
        /// Scenario TOML for the localization study.
        #[arg(long)]
        scenario: Option<PathBuf>,
    },
    /// Serve live guidance states over TCP and accept steering commands.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 7878)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        bind: String,
        /// Stop after this many frames.
        #[arg(long)]
        max_frames: Option<u64>,
        /// Hold the first frame until a client connects.
        #[arg(long)]
        wait_for_client: bool,
        /// Do not pace frames to the scenario frame rate.
        #[arg(long)]
        fast: bool,
    },
    /// Read observation records and print one fused state per frame.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Record file (default: stdin).
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = OutputFormat::Txt)]
        format: OutputFormat,
    },
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Study {
    Precision,
    Localization,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum OutputFormat {
    Csv,
    Txt,
}

impl From<OutputFormat> for Format {
    fn from(f: OutputFormat) -> Self {
        match f {
            OutputFormat::Csv => Format::Csv,
            OutputFormat::Txt => Format::Txt,
        }
    }
}

fn with_path(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |e| Error::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(with_path(path))
}

fn load_rig(path: &Option<PathBuf>) -> Result<Option<RigConfig>> {
    path.as_deref().map(|p| RigConfig::from_toml_str(&read_text(p)?)).transpose()
}

fn load_scenario(path: &Option<PathBuf>, common: &Common, default: impl FnOnce() -> Scenario) -> Result<Scenario> {
    let mut scenario = match path {
        Some(p) => Scenario::from_toml_str(&read_text(p)?)?,
        None => default(),
    };
    if let Some(rig) = load_rig(&common.rig)? {
        scenario.rig = rig;
    }
    if let Some(seed) = common.seed {
        scenario.seed = seed;
    }
    scenario.validate()?;
    Ok(scenario)
}

fn output(path: &Option<PathBuf>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(with_path(p))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_simulate(common: Common, scenario: Option<PathBuf>, out: Option<PathBuf>, frames: Option<u64>) -> Result<()> {
    let mut scenario = load_scenario(&scenario, &common, preset_localization_study)?;
    if frames.is_some() {
        scenario.frames = frames;
    }
    if scenario.frames.is_none() {
        return Err(Error::Config { path: "frames".into(), message: "endless scenario; pass --frames".into() });
    }
    let mut out = output(&out)?;
    write_header(&mut out, &scenario)?;
    for frame in simulate(scenario)? {
        write_frame(&mut out, &frame)?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_evaluate(
    common: Common,
    study: Study,
    out: PathBuf,
    format: Option<OutputFormat>,
    scenario: Option<PathBuf>,
) -> Result<()> {
    fs::create_dir_all(&out).map_err(with_path(&out))?;
    let seed = common.seed.unwrap_or(0);
    let rig = load_rig(&common.rig)?;
    let (csv_name, csv, text) = match study {
        Study::Precision => {
            let scenarios: Vec<Scenario> = preset_precision_study()
                .into_iter()
                .map(|s| {
                    let s = s.with_seed(seed);
                    match &rig {
                        Some(r) => Scenario { rig: r.clone(), ..s },
                        None => s,
                    }
                })
                .collect();
            let report = run_precision_study(&scenarios)?;
            ("precision.csv", emit_report(&report, Format::Csv), emit_report(&report, Format::Txt))
        }
        Study::Localization => {
            let scenario = load_scenario(&scenario, &Common { seed: Some(seed), ..common }, preset_localization_study)?;
            let report = run_localization_study(&scenario)?;
            ("localization.csv", emit_report(&report, Format::Csv), emit_report(&report, Format::Txt))
        }
    };
    if format != Some(OutputFormat::Txt) {
        fs::write(out.join(csv_name), csv)?;
    }
    if format != Some(OutputFormat::Csv) {
        fs::write(out.join("report.txt"), format!("seed = {seed}\n{text}"))?;
    }
    Ok(())
}

fn cmd_serve(
    common: Common,
    scenario: Option<PathBuf>,
    bind: String,
    port: u16,
    config: ServerConfig,
) -> Result<()> {
    let scenario = load_scenario(&scenario, &common, fidunav::simulator::preset_guidance_demo)?;
    let seed = scenario.seed;
    let server = serve(simulate(scenario)?, (bind.as_str(), port), config)?;
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "listening on {} (seed {seed})", server.local_addr())?;
    stdout.flush()?;
    drop(stdout);
    let frames = server.join();
    eprintln!("served {frames} frames");
    Ok(())
}

pub const SOLVE_CSV_HEADER: &str = "t_us,head_qw,head_qx,head_qy,head_qz,head_tx,head_ty,head_tz,head_stale,coil_qw,coil_qx,coil_qy,coil_qz,coil_tx,coil_ty,coil_tz,coil_stale,target_x,target_y,target_z";

fn csv_row(state: &GuidanceState) -> String {
    let mut fields = vec![state.timestamp_us.to_string()];
    for body in [&state.head, &state.coil] {
        match body {
            Some(b) => {
                fields.extend(b.pose.rotation.wxyz().iter().map(|x| format!("{x:.9}")));
                fields.extend(b.pose.translation.iter().map(|x| format!("{x:.6}")));
                fields.push(b.stale.to_string());
            }
            None => fields.extend(std::iter::repeat_n(String::new(), 8)),
        }
    }
    match state.target_head {
        Some(t) => fields.extend([t.x, t.y, t.z].iter().map(|x| format!("{x:.6}"))),
        None => fields.extend(std::iter::repeat_n(String::new(), 3)),
    }
    fields.join(",")
}

fn cmd_solve(common: Common, input: Option<PathBuf>, format: OutputFormat) -> Result<()> {
    let lines = match &input {
        Some(p) => read_records(BufReader::new(File::open(p).map_err(with_path(p))?))?,
        None => read_records(io::stdin().lock())?,
    };
    let mut frames: Vec<ObservationFrame> = Vec::new();
    let mut loose = Vec::new();
    for line in lines {
        match line {
            RecordLine::Frame(f) => frames.push(f.into()),
            RecordLine::Observation(o) => loose.push(o),
        }
    }
    frames.extend(assemble_frames(loose));
    frames.sort_by_key(|f| f.timestamp_us);

    let rig = load_rig(&common.rig)?.unwrap_or_else(RigConfig::paper_default);
    let mut tracker = Tracker::new(rig);
    let mut out = output(&None)?;
    if format == OutputFormat::Csv {
        writeln!(out, "{SOLVE_CSV_HEADER}")?;
    }
    for frame in &frames {
        let state = tracker.process(frame);
        match format {
            OutputFormat::Csv => writeln!(out, "{}", csv_row(&state))?,
            OutputFormat::Txt => out.write_all(to_line(&StateRecord::from(&state)).as_bytes())?,
        }
    }
    out.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { common, scenario, out, frames } => cmd_simulate(common, scenario, out, frames),
        Command::Evaluate { common, study, out, format, scenario } => cmd_evaluate(common, study, out, format, scenario),
        Command::Serve { common, scenario, port, bind, max_frames, wait_for_client, fast } => {
            let config = ServerConfig { realtime: !fast, max_frames, wait_for_client, ..Default::default() };
            cmd_serve(common, scenario, bind, port, config)
        }
        Command::Solve { common, input, format } => cmd_solve(common, input, format),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
