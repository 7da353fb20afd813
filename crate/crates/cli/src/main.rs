use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod io;
mod suite;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Core(#[from] roughman::Error),
    #[error("validation failed: {0}")]
    Validation(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse(_) => 2,
            CliError::Io(_) => 2,
            CliError::Core(e) => e.exit_code() as u8,
            CliError::Validation(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "parse",
            4 => "numeric",
            _ => "validation",
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "roughman", version, about = "Rough paths, rough integrals and RDEs on Euclidean spaces and manifolds")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Variation exponent of the input lift.
    #[arg(long = "p", global = true, default_value_t = 1.0)]
    pub p: f64,
    /// Regularity of fields and connections (default: p + 1).
    #[arg(long, global = true)]
    pub gamma: Option<f64>,
    /// Truncation level of the lift.
    #[arg(long, global = true, default_value_t = 2)]
    pub level: usize,
    /// Fixed-point / verification tolerance.
    #[arg(long, global = true)]
    pub tol: Option<f64>,
    /// Output directory for artifacts.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Also write a gnuplot script next to each trace.
    #[arg(long, global = true)]
    pub emit_gnuplot: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Signature and p-variation of a sampled path.
    Sig { path: PathBuf },
    /// Rough integral of a one-form along a sampled path.
    Integrate {
        path: PathBuf,
        /// JSON {"vars": [...], "exprs": [...], "dim_out": e}, exprs row-major e×d.
        #[arg(long)]
        form: PathBuf,
    },
    /// Solve dY = g(Y) dX.
    Rde {
        path: PathBuf,
        /// JSON {"vars": [...], "exprs": [...]} over the state, exprs row-major d_y×d_x.
        #[arg(long)]
        field: PathBuf,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        y0: Vec<f64>,
    },
    /// Solve an RDE on a manifold through a connection.
    ManifoldRde {
        /// Ambient samples of the signal on N.
        path: PathBuf,
        #[arg(long)]
        connection: PathBuf,
        #[arg(long, value_delimiter = ',', allow_negative_numbers = true, required = true)]
        y0: Vec<f64>,
    },
    /// Run the invariant suite and print a JSON verdict.
    Check,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            let report = serde_json::json!({ "error": e.kind(), "exit_code": e.exit_code(), "message": e.to_string() });
            eprintln!("{report}");
            ExitCode::from(e.exit_code())
        }
    }
}
