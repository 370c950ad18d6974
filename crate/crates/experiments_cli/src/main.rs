use clap::{Args, Parser, Subcommand};
use experiments_cli::{
    pipeline, CliError, ExperimentConfig, SolverKind,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "experiments_cli",
    about = "Optimal measure-control of the 1D heat equation: target generation, \
             semismooth Newton solves, optimality verification, and the canonical \
             experiment suite"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON configuration file (defaults apply for absent fields).
    #[arg(long)]
    config: Option<PathBuf>,
    /// TV budget α.
    #[arg(long)]
    alpha: Option<f64>,
    /// Positivity-constrained or signed-measure solver.
    #[arg(long, value_enum)]
    solver: Option<SolverKind>,
    /// Fixed penalty parameter γ of the general solver.
    #[arg(long)]
    gamma: Option<f64>,
    /// Use the γ-homotopy instead of a fixed γ.
    #[arg(long)]
    homotopy: bool,
    /// NCP scaling κ.
    #[arg(long)]
    kappa: Option<f64>,
    /// Newton tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Coarse grid: N elements and N time steps.
    #[arg(long, value_name = "N")]
    grid: Option<usize>,
    /// Project the target onto the reachable set before solving.
    #[arg(long)]
    reachable: bool,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the desired state on the fine grid and write it as CSV.
    Generate(ConfigArgs),
    /// Run a single experiment and write report + artifacts.
    Solve(ConfigArgs),
    /// Solve, then print the optimality verification verdict.
    Verify(ConfigArgs),
    /// Run the canonical experiment suite and print the comparison table.
    Reproduce {
        /// Output directory for the per-run artifacts.
        #[arg(long, default_value = "reproduce_out")]
        out: PathBuf,
    },
}

impl ConfigArgs {
    fn build(&self) -> Result<ExperimentConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::InvalidInput(format!("{}: {e}", path.display())))?
            }
            None => ExperimentConfig::default(),
        };
        if let Some(a) = self.alpha {
            cfg.alpha = a;
        }
        if let Some(s) = self.solver {
            cfg.solver = s;
        }
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        if self.homotopy {
            cfg.homotopy = true;
        }
        if let Some(k) = self.kappa {
            cfg.kappa = Some(k);
        }
        if let Some(t) = self.tol {
            cfg.tol = t;
        }
        if let Some(n) = self.grid {
            cfg.coarse.n_elements = n;
            cfg.coarse.n_steps = n;
        }
        if self.reachable {
            cfg.reachable_target = true;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = Some(out.clone());
        }
        cfg.validate().map_err(CliError::InvalidInput)?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &ExperimentConfig) -> PathBuf {
        cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from(&cfg.name))
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Generate(args) => {
            let cfg = args.build()?;
            let sys = pipeline::coarse_system(&cfg)?;
            let y_d = pipeline::desired_state(&cfg, &sys)?;
            let dir = args.out_dir(&cfg);
            std::fs::create_dir_all(&dir)?;
            let mut w = csv::Writer::from_path(dir.join("target.csv"))?;
            w.write_record(["x", "y_d"])?;
            for j in 0..y_d.len() {
                w.write_record([
                    format!("{}", sys.grid().node(j)),
                    format!("{:.17e}", y_d[j]),
                ])?;
            }
            w.flush()?;
            println!("wrote {}", dir.join("target.csv").display());
        }
        Command::Solve(args) => {
            let cfg = args.build()?;
            let dir = args.out_dir(&cfg);
            let report = pipeline::run_and_write(&cfg, &dir)?;
            println!(
                "{}: tv+ = {:.6}, tv- = {:.6}, misfit = {:.3e}, steps = {}, method = {}",
                report.name,
                report.tv_plus,
                report.tv_minus,
                report.final_misfit,
                report.newton_steps,
                report.method
            );
            println!("artifacts in {}", dir.display());
        }
        Command::Verify(args) => {
            let cfg = args.build()?;
            let (report, _) = pipeline::run_experiment(&cfg)?;
            println!(
                "{}: optimality {} (lambda_bar = {:.6}, adjoint max = {:.3e})",
                report.name,
                if report.optimality_ok { "VERIFIED" } else { "VIOLATED" },
                report.lambda_bar,
                report.adjoint_max
            );
            if !report.optimality_ok {
                return Err(CliError::NonConvergence(format!(
                    "optimality verification failed for {}",
                    report.name
                )));
            }
        }
        Command::Reproduce { out } => {
            let (_, table) = pipeline::reproduce_paper(&out)?;
            print!("{table}");
            println!("artifacts in {}", out.display());
        }
    }
    Ok(())
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
