//! `advforge` — train, attack, and evaluate small image classifiers from
//! the command line. Every command writes a run manifest next to its
//! outputs so results can be reproduced bit-for-bit.

mod commands;
mod manifest;

use clap::Parser;

fn main() {
    reexec_for_blas_if_needed();
    let cli = commands::Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("warning: could not size the worker pool: {e}");
        }
    }
    if let Err(e) = commands::dispatch(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(commands::exit_code_for(&e));
    }
}

/// OpenBLAS reads `OPENBLAS_CORETYPE` once, when the library is first
/// loaded, and its runtime CPU detection falls back to a generic kernel on
/// some machines where that costs 3-4x throughput. When that combination is
/// detected, re-exec ourselves with the right core type pinned in the
/// environment; the child sees the variable from the start and the check
/// below returns false there, so this cannot loop.
fn reexec_for_blas_if_needed() {
    if !advforge_core::blas::wants_coretype_override() {
        return;
    }
    let exe = match std::env::current_exe() {
        Ok(p) => p,
        Err(_) => return,
    };
    use std::os::unix::process::CommandExt;
    let err = std::process::Command::new(exe)
        .args(std::env::args_os().skip(1))
        .env("OPENBLAS_CORETYPE", "SKYLAKEX")
        .exec();
    // exec only returns on failure; run un-pinned rather than dying.
    eprintln!("warning: could not re-exec to pin the BLAS kernel: {err}");
}
