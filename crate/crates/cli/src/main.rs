use std::process::ExitCode;

use clap::Parser;
use diffgda_cli::{dispatch, Cli};

const USAGE_ERROR: u8 = 1;
const RUNTIME_ERROR: u8 = 2;

fn threads() -> anyhow::Result<()> {
    let Ok(v) = std::env::var("DIFFGDA_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| anyhow::anyhow!("DIFFGDA_THREADS must be a non-negative integer, got '{v}'"))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { USAGE_ERROR } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let cfg = match threads().and_then(|_| cli.run_config()) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: config: {e:#}");
            return ExitCode::from(USAGE_ERROR);
        }
    };
    match dispatch(cli.command, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e:#}", cli.command.name());
            ExitCode::from(RUNTIME_ERROR)
        }
    }
}
