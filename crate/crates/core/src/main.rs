use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Arg, ArgAction, ArgMatches, Command};
use xattnres::experiment::{
    inspect_routing, run_ablation, run_experiment, run_gradcheck_suite, ExperimentConfig, Suite, KEYS,
};

const USAGE_ERROR: u8 = 2;

fn with_config_flags(cmd: Command) -> Command {
    let cmd = cmd.arg(Arg::new("config").long("config").value_name("FILE").help("key = value config file"));
    KEYS.iter().fold(cmd, |cmd, &key| {
        cmd.arg(Arg::new(key).long(key).value_name("VALUE").action(ArgAction::Append).help_heading("Config overrides"))
    })
}

fn cli() -> Command {
    Command::new("xattnres")
        .about("Cross-stage attention residuals for a mini U-Net: training, ablations and diagnostics")
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(with_config_flags(Command::new("run").about("Train one model, evaluate it on the test split")))
        .subcommand(with_config_flags(
            Command::new("ablate").about("Run an ablation suite over all seeds").arg(
                Arg::new("suite")
                    .required(true)
                    .value_parser(["skip", "position", "init"])
                    .help("skip: routing variants; position: site placement; init: pseudo-query init"),
            ),
        ))
        .subcommand(Command::new("gradcheck").about("Finite-difference check of every differentiable operation"))
        .subcommand(with_config_flags(
            Command::new("inspect-routing").about("Export attention traces of a saved checkpoint").arg(
                Arg::new("checkpoint").long("checkpoint").value_name("FILE").required(true),
            ),
        ))
}

/// Config file first, then overrides in command-line order.
fn build_config(m: &ArgMatches) -> xattnres::Result<ExperimentConfig> {
    let mut cfg = match m.get_one::<String>("config") {
        Some(path) => ExperimentConfig::load(&PathBuf::from(path))?,
        None => ExperimentConfig::default(),
    };
    let mut overrides: Vec<(usize, &str, &String)> = Vec::new();
    for &key in KEYS {
        if let (Some(idx), Some(vals)) = (m.indices_of(key), m.get_many::<String>(key)) {
            overrides.extend(idx.zip(vals).map(|(i, v)| (i, key, v)));
        }
    }
    overrides.sort_by_key(|o| o.0);
    for (_, key, value) in overrides {
        cfg.set(key, value)?;
    }
    Ok(cfg)
}

fn dispatch(m: &ArgMatches) -> xattnres::Result<bool> {
    let mut log = std::io::stderr();
    match m.subcommand() {
        Some(("run", sub)) => {
            let cfg = build_config(sub)?;
            run_experiment(&cfg, &mut log)?;
        }
        Some(("ablate", sub)) => {
            let cfg = build_config(sub)?;
            let suite: Suite = sub.get_one::<String>("suite").expect("required").parse()?;
            let result = run_ablation(suite, &cfg, &mut log)?;
            print!("{}", result.render());
        }
        Some(("gradcheck", _)) => {
            let report = run_gradcheck_suite()?;
            print!("{}", report.render());
            return Ok(report.passed());
        }
        Some(("inspect-routing", sub)) => {
            let cfg = build_config(sub)?;
            let ckpt = PathBuf::from(sub.get_one::<String>("checkpoint").expect("required"));
            let inspection = inspect_routing(&ckpt, &cfg.data, &cfg.out_dir)?;
            print!("{}", inspection.render());
        }
        _ => unreachable!("subcommand is required"),
    }
    Ok(true)
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { USAGE_ERROR } else { 0 });
        }
    };
    let code = match dispatch(&matches) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    };
    let _ = std::io::stdout().flush();
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_is_well_formed() {
        cli().debug_assert();
    }

    #[test]
    fn overrides_apply_in_order() {
        let m = cli().try_get_matches_from(["xattnres", "run", "--epochs", "3", "--routing=both", "--epochs=5"]).unwrap();
        let cfg = build_config(m.subcommand_matches("run").unwrap()).unwrap();
        assert_eq!(cfg.train.epochs, 5);
        assert_eq!(cfg.model.routing, xattnres::backbone::Routing::Both);
    }
}
