use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nfdistill_cli::commands::{self, Common};

#[derive(Parser)]
#[command(
    name = "nfdistill",
    version,
    about = "Distil a flow vocoder into a feed-forward student"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Shared {
    /// Run configuration (JSON); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train, validation and held-out splits.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Train the flow teacher by maximum likelihood.
    TrainTeacher {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Distil a student from a trained teacher.
    Distill {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Distil the three capacity-matched student variants.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Apply inference-time fusion to a teacher checkpoint.
    Fuse {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Compare a student against its teacher on held-out conditions.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
    /// Measure synthesis throughput.
    Bench {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        shared: Shared,
    },
}

impl Shared {
    fn common(&self) -> Common {
        Common {
            config: self.config.clone(),
            seed: self.seed,
        }
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::GenData { out, shared } => commands::gen_data(&shared.common().resolve()?, &out),
        Command::TrainTeacher { data, out, shared } => {
            commands::train_teacher(&shared.common().resolve()?, &data, &out)
        }
        Command::Distill {
            data,
            teacher,
            out,
            shared,
        } => commands::distill(&shared.common().resolve()?, &data, &teacher, &out),
        Command::Ablate {
            data,
            teacher,
            out,
            shared,
        } => commands::ablate(&shared.common().resolve()?, &data, &teacher, &out),
        Command::Fuse {
            checkpoint,
            out,
            shared,
        } => commands::fuse(&shared.common().resolve()?, &checkpoint, &out),
        Command::Eval {
            data,
            teacher,
            student,
            out,
            shared,
        } => commands::eval(&shared.common().resolve()?, &data, &teacher, &student, &out),
        Command::Bench {
            teacher,
            student,
            out,
            shared,
        } => commands::bench(
            &shared.common().resolve()?,
            &teacher,
            student.as_deref(),
            &out,
        ),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
