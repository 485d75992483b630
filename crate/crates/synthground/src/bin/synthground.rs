use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "synthground", about = "Synthetic referring-expression grounding data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory.
    Gen(synthground::GenArgs),
    /// Recompute and check every digest in manifest.sha.
    Verify { dir: std::path::PathBuf },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(args) => args.run().map(|_| ()),
        Command::Verify { dir } => synthground::verify_manifest(&dir).map(|n| println!("{n} files ok")),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
