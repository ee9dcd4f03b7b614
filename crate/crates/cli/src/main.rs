use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{value_parser, Arg, ArgAction, ArgMatches, Command};

use sacnn_core::cost::{compute_cost_map, cost_contrast, ParameterTriple};
use sacnn_core::embed::{amplify_diff, embed};
use sacnn_core::harness::{assistant_file, Experiment, ExperimentConfig, DETECTOR_A_FILE};
use sacnn_core::media_io::{load_pgm, save_pgm};

const PHASES: &[(&str, &str)] = &[
    ("train-detector", "Train detector A on baseline pairs and save its checkpoint"),
    ("train-assistant", "Train the configured assistant head against detector A"),
    ("precompute-grid", "Embed and score every cover under every grid cell"),
    ("baseline", "Default-triple confusion matrix against detector A"),
    ("assisted", "Per-cover parameter selection against detector A"),
    ("cross-detector", "Assisted stegos against a re-seeded second detector"),
    ("transfer", "Frozen models on an out-of-distribution dataset"),
    ("compare-discrete", "Continuous and discrete heads: storage, epoch time, error"),
    ("report", "Run every phase and write the full report"),
];

fn triple_args(cmd: Command) -> Command {
    cmd.arg(Arg::new("sigma").long("sigma").value_parser(value_parser!(f64)).default_value("1"))
        .arg(Arg::new("epsilon").long("epsilon").value_parser(value_parser!(f64)).default_value("1"))
        .arg(Arg::new("wetcost").long("wetcost").value_parser(value_parser!(f64)).default_value("1"))
}

fn path_arg(name: &'static str, help: &'static str) -> Arg {
    Arg::new(name).long(name).required(true).value_parser(value_parser!(PathBuf)).help(help)
}

fn cli() -> Command {
    let mut cmd = Command::new("sacnn")
        .about("Parametric S-UNIWARD embedding and assisted-parameter experiments")
        .subcommand_required(true)
        .arg(
            Arg::new("config")
                .long("config")
                .global(true)
                .value_parser(value_parser!(PathBuf))
                .help("key = value configuration file"),
        );
    for key in ExperimentConfig::KEYS {
        cmd = cmd.arg(Arg::new(*key).long(*key).global(true).value_name("VALUE").hide_short_help(true));
    }
    cmd = cmd
        .subcommand(triple_args(
            Command::new("embed")
                .about("Embed one cover at the configured rate")
                .arg(path_arg("input", "cover PGM"))
                .arg(path_arg("output", "stego PGM"))
                .arg(Arg::new("seed").long("seed").value_parser(value_parser!(u64)))
                .arg(Arg::new("sidecar").long("sidecar").value_parser(value_parser!(PathBuf)))
                .arg(Arg::new("diff").long("diff").value_parser(value_parser!(PathBuf))),
        ))
        .subcommand(triple_args(
            Command::new("cost-map")
                .about("Write the cost map of one cover as a binary dump")
                .arg(path_arg("input", "cover PGM"))
                .arg(path_arg("output", "cost dump")),
        ));
    for (name, about) in PHASES {
        cmd = cmd.subcommand(Command::new(*name).about(*about));
    }
    cmd.arg(Arg::new("quiet").long("quiet").global(true).action(ArgAction::SetTrue))
}

fn load_config(m: &ArgMatches) -> Result<ExperimentConfig> {
    let mut c = match m.get_one::<PathBuf>("config") {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    for key in ExperimentConfig::KEYS {
        if let Some(v) = m.get_one::<String>(key) {
            c.set(key, v)?;
        }
    }
    c.validate()?;
    Ok(c)
}

fn triple(m: &ArgMatches) -> Result<ParameterTriple> {
    let g = |k: &str| *m.get_one::<f64>(k).expect("defaulted");
    Ok(ParameterTriple::new(g("sigma"), g("epsilon"), g("wetcost"))?)
}

fn run_phase(name: &str, config: ExperimentConfig, quiet: bool) -> Result<()> {
    let mut ex = Experiment::prepare(config)?;
    match name {
        "train-detector" => {
            ex.run_baseline()?;
        }
        "train-assistant" => {
            ex.assistant()?;
        }
        "precompute-grid" => {
            let cache = ex.cache()?;
            let csv = cache.manifest_csv();
            let s = cache.storage();
            let path = ex.output_path("grid_manifest.csv");
            std::fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
            println!(
                "{} covers x {} cells, {} bytes stored, {} bytes if materialized",
                s.covers, s.cells, s.stored_bytes, s.materialized_bytes
            );
        }
        "baseline" => {
            ex.run_baseline()?;
        }
        "assisted" => {
            ex.run_assisted()?;
        }
        "cross-detector" => {
            ex.run_cross_detector()?;
        }
        "transfer" => {
            ex.run_transfer()?;
        }
        "compare-discrete" => {
            ex.run_discrete_comparison()?;
        }
        "report" => {
            ex.run_all()?;
        }
        other => bail!("unknown subcommand {other}"),
    }
    if name == "train-assistant" && ex.config().assistant_checkpoint.is_none() {
        println!("{}", ex.output_path(&assistant_file(ex.config().assistant_head)).display());
    }
    if name == "train-detector" && ex.config().detector_checkpoint.is_none() {
        println!("{}", ex.output_path(DETECTOR_A_FILE).display());
    }
    if !ex.report().is_empty() {
        let files = ex.emit_report()?;
        if !quiet {
            for (matrix, m, _) in ex.report().matrices() {
                println!("{matrix}: error {:.1}%", m.error_rate_percent()?);
            }
            println!("wrote {} files to {}", files.len(), ex.config().output_dir.display());
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let m = cli().get_matches();
    let (name, sub) = m.subcommand().expect("subcommand required");
    let config = load_config(sub)?;
    let quiet = sub.get_flag("quiet");
    match name {
        "embed" => {
            let input = sub.get_one::<PathBuf>("input").expect("required");
            let cover = load_pgm(input)?;
            let seed = sub.get_one::<u64>("seed").copied().unwrap_or(config.embed_seed);
            let st = embed(&cover, &triple(sub)?, config.rate, seed)?;
            save_pgm(sub.get_one::<PathBuf>("output").expect("required"), &st.pixels)?;
            if let Some(p) = sub.get_one::<PathBuf>("sidecar") {
                std::fs::write(p, st.sidecar_line(config.rate))?;
            }
            if let Some(p) = sub.get_one::<PathBuf>("diff") {
                save_pgm(p, &amplify_diff(&cover, &st.pixels, config.diff_factor)?)?;
            }
            if !quiet {
                println!("{} changes", st.change_count);
            }
        }
        "cost-map" => {
            let cover = load_pgm(sub.get_one::<PathBuf>("input").expect("required"))?;
            let costs = compute_cost_map(&cover, &triple(sub)?)?;
            let out = sub.get_one::<PathBuf>("output").expect("required");
            costs.write_dump(BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?))?;
            if !quiet {
                println!("contrast {:.6}", cost_contrast(&costs)?);
            }
        }
        phase => run_phase(phase, config, quiet)?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_config_key_is_a_flag() {
        let m = cli()
            .try_get_matches_from(["sacnn", "baseline", "--rate", "0.2", "--ablation", "sigma"])
            .unwrap();
        let c = load_config(m.subcommand().unwrap().1).unwrap();
        assert_eq!(c.rate, 0.2);
        for key in ExperimentConfig::KEYS {
            assert!(cli().get_arguments().any(|a| a.get_long() == Some(*key)), "{key}");
        }
        assert!(cli().try_get_matches_from(["sacnn", "report", "--bogus", "1"]).is_err());
    }

    #[test]
    fn bad_values_are_reported() {
        let m = cli().try_get_matches_from(["sacnn", "baseline", "--rate", "3"]).unwrap();
        assert!(load_config(m.subcommand().unwrap().1).is_err());
    }
}
