use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sgsim::fields::eval_total;
use sgsim::interferometry::FreeParameter;
use sgsim::output::{self, Manifest};
use sgsim::scenario::{self, load_scenario, Grid, Scenario, Spacing, TuningSpec};
use sgsim::units::{parse_quantity, Dimension};
use sgsim::{Error, Result};

/// Stern-Gerlach trap interferometer simulator.
#[derive(Parser)]
#[command(name = "sgsim", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Source {
    /// Scenario TOML file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset used as the base for omitted keys.
    #[arg(long)]
    preset: Option<String>,
}

impl Source {
    fn load(&self) -> Result<Scenario> {
        match &self.config {
            Some(path) => load_scenario(path, self.preset.as_deref()),
            None => Scenario::preset(self.preset.as_deref().unwrap_or("paper-default")),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the whole pipeline and write every artifact.
    Simulate {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the pipeline with closure tuned over the given parameter.
    Tune {
        #[command(flatten)]
        source: Source,
        /// t_T, a3 or eta.
        #[arg(long)]
        free: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entanglement phases against interferometer separation.
    SweepDistance {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value = "2um")]
        d_min: String,
        #[arg(long, default_value = "50um")]
        d_max: String,
        #[arg(long, default_value_t = 64)]
        points: usize,
        /// log or linear.
        #[arg(long, default_value = "log")]
        spacing: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Entanglement witness against total decoherence.
    SweepGamma {
        #[command(flatten)]
        source: Source,
        #[arg(long, default_value_t = 2.0)]
        gamma_max: f64,
        #[arg(long, default_value_t = 128)]
        points: usize,
        /// Separation; defaults to the scenario's pair distance.
        #[arg(long)]
        d: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Field evaluation utilities.
    Fields {
        #[command(subcommand)]
        command: FieldsCommand,
    },
}

#[derive(Subcommand)]
enum FieldsCommand {
    /// Evaluate B, B^2 and grad B^2 at points read from a CSV (x,y,z[,t] in SI).
    Probe {
        #[command(flatten)]
        source: Source,
        #[arg(long)]
        points: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn output_dir(flag: Option<PathBuf>, s: &Scenario) -> PathBuf {
    flag.unwrap_or_else(|| s.resolved_output_dir())
}

fn quantity(flag: &str, raw: &str, dim: Dimension) -> Result<f64> {
    parse_quantity(raw, dim).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("--{flag}: {m}")),
        other => other,
    })
}

fn simulate(s: &Scenario, out: &Path) -> Result<()> {
    let run = scenario::run_pipeline(s, out)?;
    print!("{}", run.summary.render());
    println!("manifest = {}", run.manifest.dir.join(output::MANIFEST_NAME).display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { source, out } => {
            let s = source.load()?;
            simulate(&s, &output_dir(out, &s))
        }
        Command::Tune { source, free, out } => {
            let mut s = source.load()?;
            let free = FreeParameter::parse(&free)?;
            let keep = s.tuning.filter(|t| t.free == free);
            s.tuning = Some(keep.unwrap_or_else(|| TuningSpec::new(free)));
            simulate(&s, &output_dir(out, &s))
        }
        Command::SweepDistance {
            source,
            d_min,
            d_max,
            points,
            spacing,
            out,
        } => {
            let mut s = source.load()?;
            s.distance_grid = Grid {
                min: quantity("d-min", &d_min, Dimension::Length)?,
                max: quantity("d-max", &d_max, Dimension::Length)?,
                points,
                spacing: match spacing.as_str() {
                    "log" => Spacing::Log,
                    "linear" => Spacing::Linear,
                    other => return Err(Error::Parse(format!("--spacing: `{other}` is not log or linear"))),
                },
            };
            s.validate()?;
            let dir = output_dir(out, &s);
            let prepared = scenario::prepare(&s)?;
            let solved = scenario::solve(&s, &prepared)?;
            let sweep = scenario::run_distance_sweep(&s, &solved.interferometer)?;
            let mut manifest = Manifest::new(&dir)?;
            let path = manifest.emit_with("sweep_distance.csv", |b| output::write_distance_sweep(b, &sweep))?;
            manifest.finalize()?;
            println!("d_star = {}", sweep.crossover.map_or("none".into(), |d| d.to_string()));
            println!("csv = {}", path.display());
            Ok(())
        }
        Command::SweepGamma {
            source,
            gamma_max,
            points,
            d,
            out,
        } => {
            let mut s = source.load()?;
            s.gamma_grid = Grid {
                min: 0.0,
                max: gamma_max,
                points,
                spacing: Spacing::Linear,
            };
            if let Some(d) = d {
                s.pair_distance = quantity("d", &d, Dimension::Length)?;
            }
            s.validate()?;
            let dir = output_dir(out, &s);
            let prepared = scenario::prepare(&s)?;
            let solved = scenario::solve(&s, &prepared)?;
            let phases = scenario::pair_phases(&solved.interferometer, s.pair_distance, s.dd_field)?;
            let (interaction, sweep) = scenario::run_gamma_sweep(&s, &phases)?;
            let mut manifest = Manifest::new(&dir)?;
            let path = manifest.emit_with("sweep_gamma.csv", |b| output::write_gamma_sweep(b, &sweep))?;
            manifest.finalize()?;
            println!("interaction = {}", interaction.label());
            println!("dphi = {}", sweep.delta_phi);
            println!(
                "gamma_star = {}",
                sweep.threshold.map_or("none".into(), |g| g.to_string())
            );
            println!("csv = {}", path.display());
            Ok(())
        }
        Command::Fields {
            command: FieldsCommand::Probe { source, points, out },
        } => {
            let s = source.load()?;
            let prepared = scenario::prepare(&s)?;
            let model = prepared.config.force_model()?;
            let pts = output::read_probe_points(File::open(&points)?)?;
            let rows: Vec<_> = pts
                .into_iter()
                .map(|p| (p, eval_total(&p.position, &model.trap, &model.pulse, p.t)))
                .collect();
            match out {
                Some(path) => output::write_field_probe(BufWriter::new(File::create(path)?), &rows),
                None => {
                    let stdout = io::stdout();
                    let mut lock = stdout.lock();
                    output::write_field_probe(&mut lock, &rows)?;
                    lock.flush()?;
                    Ok(())
                }
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
