//! Command-line entry point for the speaker-naming engine.
//!
//! Subcommands mirror the experimental sequence: synthesize a dataset, train
//! the face model, fine-tune the fused face-audio model, train the pair
//! rejection classifier, evaluate, and name speakers in annotated frames.
//! `gradcheck` and `params` are self-verification commands.

mod commands;
mod config;
mod gradcheck;

use config::parse_args;
use sn_core::error::Error;

pub const TOOL_VERSION: &str = concat!("sn ", env!("CARGO_PKG_VERSION"));

const USAGE: &str = "\
usage: sn <command> [--flag value ...]

commands:
  synth            generate the synthetic dataset into data-dir
  train-face       train the face-alone model on data-dir/train.tsv
  finetune-fused   warm-start and fine-tune the face-audio model
  train-reject     train the pair rejection margin classifier
  eval-face        evaluate a model on data-dir/test.tsv
  eval-reject      evaluate the rejection classifier on test pairs
  name             name speakers in data-dir/frames.tsv
  gradcheck        run the finite-difference gradient suite
  params           print the per-layer parameter table

flags: --config FILE, --seed N, --out-dir DIR, --model PATH,
       --face-model PATH, --fused-model PATH, --reject-model PATH,
       --variant {A,B,C}, --threshold X, --epochs N, --lr X, --batch N,
       plus any configuration key as --key value";

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let code = run(&args);
    std::process::exit(code);
}

fn run(args: &[String]) -> i32 {
    let (command, config) = match parse_args(args) {
        Ok(parsed) => parsed,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("{USAGE}");
            return 2;
        }
    };
    let result = match command.as_str() {
        "synth" => commands::synth(&config),
        "train-face" => commands::train_face(&config),
        "finetune-fused" => commands::finetune_fused(&config),
        "train-reject" => commands::train_reject(&config),
        "eval-face" => commands::eval_face(&config),
        "eval-reject" => commands::eval_reject(&config),
        "name" => commands::name(&config),
        "gradcheck" => gradcheck::run(&config),
        "params" => commands::params(&config),
        "help" | "--help" | "-h" => {
            println!("{USAGE}");
            return 0;
        }
        other => {
            eprintln!("error: unknown command {other:?}");
            eprintln!("{USAGE}");
            return 2;
        }
    };
    match result {
        Ok(()) => 0,
        Err(e @ Error::Usage(_)) => {
            eprintln!("error: {e}");
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
