//! Command-line front end for the panel-data causal pipeline.
//!
//! Every subcommand reads one TOML study configuration and overrides it
//! with `--seed`, `--threads`, and `--out` where given. `pipeline` runs the
//! whole study and writes the report files; `report` prints the full
//! markdown report; the per-stage subcommands run a trimmed study with just
//! their stage forced on and print that stage's tables. Exit codes separate
//! failure classes: 2 for configuration problems, 3 for data problems, 4
//! for estimation failures.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use panelcausal_core::pipeline::{
    emit_report, load_raw, prepare, run_pipeline, EmitFormats, PipelineConfig, ReportBundle,
};
use panelcausal_core::panel::screen;
use panelcausal_core::report::to_canonical_json;
use panelcausal_core::synth::generate_panel;
use panelcausal_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "panelcausal",
    version,
    about = "Panel-data causal pipeline: residual-based treatment construction, \
             difference-in-differences estimation, and a robustness battery"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand.
#[derive(Args)]
struct Common {
    /// Study configuration (TOML).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured worker count (0 = library default).
    /// The PANELCAUSAL_THREADS environment variable beats both.
    #[arg(long)]
    threads: Option<usize>,
    /// Override the configured output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the configured synthetic panel and its ground truth.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Load and screen the input panel.
    Clean {
        #[command(flatten)]
        common: Common,
    },
    /// Construct decoupling residuals and the treatment assignment.
    Wash {
        #[command(flatten)]
        common: Common,
    },
    /// Estimate the baseline design.
    Did {
        #[command(flatten)]
        common: Common,
    },
    /// Decompose the effect into per-event-time estimates.
    Event {
        #[command(flatten)]
        common: Common,
    },
    /// Permutation-based placebo inference on the baseline.
    Placebo {
        #[command(flatten)]
        common: Common,
        /// Permutation draws (default: the configured count, or 199).
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Re-estimate on a propensity-score-matched sample.
    Match {
        #[command(flatten)]
        common: Common,
    },
    /// Re-estimate under entropy-balancing weights.
    Balance {
        #[command(flatten)]
        common: Common,
    },
    /// Re-estimate with a two-stage selection correction.
    Heckman {
        #[command(flatten)]
        common: Common,
    },
    /// Interact the treatment effect with moderators.
    Moderate {
        #[command(flatten)]
        common: Common,
        /// Moderator column (repeatable; adds to the configured list).
        #[arg(long = "moderator", value_name = "COLUMN")]
        moderators: Vec<String>,
    },
    /// Compare the effect across median-split subsamples.
    Split {
        #[command(flatten)]
        common: Common,
        /// Split column (repeatable; adds to the configured list).
        #[arg(long = "split", value_name = "COLUMN")]
        splits: Vec<String>,
        /// Permutation draws for the gap test.
        #[arg(long)]
        draws: Option<usize>,
    },
    /// Jointly estimate the configured outcome system.
    Sur {
        #[command(flatten)]
        common: Common,
    },
    /// Run the whole study and print the markdown report.
    Report {
        #[command(flatten)]
        common: Common,
    },
    /// Run the whole study and write the report files.
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) => 2,
                Error::Data(_) => 3,
                Error::Estimation(_) => 4,
            })
        }
    }
}

/// Load the configuration and apply command-line overrides.
fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::from_path(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    if let Some(out) = &common.out {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

/// Turn every optional stage off; per-stage subcommands then force just
/// their own back on, keeping runs fast and isolated.
fn strip_optional_stages(cfg: &mut PipelineConfig) {
    let r = &mut cfg.robustness;
    r.psm = false;
    r.eb = false;
    r.heckman = false;
    r.placebo = 0;
    r.event_study = false;
    r.intensity = false;
    r.quantile = false;
    r.z_difference = false;
    r.strict = false;
    r.exclude_years.clear();
    r.policy_controls.clear();
    cfg.moderation.moderators.clear();
    cfg.heterogeneity.splits.clear();
    cfg.sur.enabled = false;
}

/// Print the selected tables as markdown; with `--out`, also write one CSV
/// per selected table.
fn print_stage_tables(
    bundle: &ReportBundle,
    names: &[&str],
    csv_dir: Option<&Path>,
) -> Result<()> {
    if let Some(dir) = csv_dir {
        std::fs::create_dir_all(dir).map_err(|e| {
            Error::data(format!("cannot create output directory `{}`: {e}", dir.display()))
        })?;
    }
    for table in bundle.tables() {
        if !names.contains(&table.name.as_str()) {
            continue;
        }
        println!("## {}\n", table.name.replace('_', " "));
        println!("{}", table.to_markdown());
        if let Some(dir) = csv_dir {
            let path = dir.join(format!("{}.csv", table.name));
            std::fs::write(&path, table.to_csv()?)
                .map_err(|e| Error::data(format!("cannot write `{}`: {e}", path.display())))?;
            eprintln!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content)
        .map_err(|e| Error::data(format!("cannot write `{}`: {e}", path.display())))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| {
        Error::data(format!("cannot create output directory `{}`: {e}", dir.display()))
    })
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { common } => {
            let cfg = load_config(&common)?;
            let dgp = cfg.to_dgp()?;
            let (panel, truth) = generate_panel(&dgp)?;
            ensure_dir(&cfg.output)?;
            let panel_path = cfg.output.join("panel.csv");
            panel.write_csv(&panel_path, &cfg.schema())?;
            let truth_path = cfg.output.join("truth.json");
            write_text(&truth_path, &truth.to_json()?)?;
            println!("{}", panel_path.display());
            println!("{}", truth_path.display());
            Ok(())
        }
        Command::Clean { common } => {
            let cfg = load_config(&common)?;
            let (raw, label) = load_raw(&cfg)?;
            let (screened, report) = screen(&raw, &cfg.screening.to_config())?;
            ensure_dir(&cfg.output)?;
            let csv_path = cfg.output.join("screened.csv");
            screened.write_csv(&csv_path, &cfg.schema())?;
            let json_path = cfg.output.join("screening.json");
            let mut json = to_canonical_json(&report)?;
            json.push('\n');
            write_text(&json_path, &json)?;
            println!("input: {label}");
            println!("rows before: {}", report.n_before);
            println!("dropped by sector exclusion: {}", report.dropped_sector);
            println!("dropped by status flag: {}", report.dropped_flag);
            println!("dropped by required columns: {}", report.dropped_required);
            println!("cells imputed: {}", report.imputed_cells);
            println!("cells winsorized: {}", report.winsorized_cells);
            println!("rows after: {}", report.n_after);
            println!("{}", csv_path.display());
            println!("{}", json_path.display());
            Ok(())
        }
        Command::Wash { common } => {
            let cfg = load_config(&common)?;
            let prep = prepare(&cfg)?;
            ensure_dir(&cfg.output)?;
            let csv_path = cfg.output.join("washed.csv");
            prep.panel.write_csv(&csv_path, &cfg.schema())?;
            let json_path = cfg.output.join("assignment.json");
            let mut json = to_canonical_json(&prep.assignment)?;
            json.push('\n');
            write_text(&json_path, &json)?;
            let a = &prep.assignment_summary;
            println!("window: {:?}", a.pre_years);
            println!("assignable firms: {}", a.n_firms);
            println!("treated: {}", a.treated);
            println!("control: {}", a.control);
            println!("unlabeled: {}", a.unlabeled);
            println!("firms without residuals: {}", a.no_residual_firms);
            if let Some(p) = &prep.persistence {
                println!("residual rank persistence (spearman): {:.4}", p.spearman);
            }
            println!("{}", csv_path.display());
            println!("{}", json_path.display());
            Ok(())
        }
        Command::Did { common } => {
            let mut cfg = load_config(&common)?;
            strip_optional_stages(&mut cfg);
            let bundle = run_pipeline(&cfg)?;
            print_stage_tables(&bundle, &["baseline"], common.out.as_deref())
        }
        Command::Event { common } => {
            let mut cfg = load_config(&common)?;
            strip_optional_stages(&mut cfg);
            cfg.robustness.event_study = true;
            let bundle = run_pipeline(&cfg)?;
            print_stage_tables(&bundle, &["event_study"], common.out.as_deref())
        }
        Command::Placebo { common, draws } => {
            let mut cfg = load_config(&common)?;
            let configured = cfg.robustness.placebo;
            strip_optional_stages(&mut cfg);
            cfg.robustness.placebo =
                draws.unwrap_or(if configured > 0 { configured } else { 199 });
            let bundle = run_pipeline(&cfg)?;
            print_stage_tables(
                &bundle,
                &["placebo_summary", "placebo_draws"],
                common.out.as_deref(),
            )
        }
        Command::Match { common } => {
            let mut cfg = load_config(&common)?;
            strip_optional_stages(&mut cfg);
            cfg.robustness.psm = true;
            let bundle = run_pipeline(&cfg)?;
            print_stage_tables(&bundle, &["robustness", "psm_balance"], common.out.as_deref())
        }
        Command::Balance { common } => {
            let mut cfg = load_config(&common)?;
            strip_optional_stages(&mut cfg);
            cfg.robustness.eb = true;
            let bundle = run_pipeline(&cfg)?;
            print_stage_tables(&bundle, &["robustness", "eb_balance"], common.out.as_deref())
        }
        Command::Heckman { common } => {
            let mut cfg = load_config(&common)?;
            strip_optional_stages(&mut cfg);
            cfg.robustness.heckman = true;
            let bundle = run_pipeline(&cfg)?;
            print_stage_tables(
                &bundle,
                &["robustness", "heckman_selection", "heckman_outcome"],
                common.out.as_deref(),
            )
        }
        Command::Moderate { common, moderators } => {
            let mut cfg = load_config(&common)?;
            let mut all = cfg.moderation.moderators.clone();
            strip_optional_stages(&mut cfg);
            for m in moderators {
                if !all.contains(&m) {
                    all.push(m);
                }
            }
            if all.is_empty() {
                return Err(Error::config(
                    "no moderators: set [moderation] moderators or pass --moderator".to_string(),
                ));
            }
            cfg.moderation.moderators = all;
            let bundle = run_pipeline(&cfg)?;
            print_stage_tables(&bundle, &["moderation"], common.out.as_deref())
        }
        Command::Split { common, splits, draws } => {
            let mut cfg = load_config(&common)?;
            let mut all = cfg.heterogeneity.splits.clone();
            strip_optional_stages(&mut cfg);
            for s in splits {
                if !all.contains(&s) {
                    all.push(s);
                }
            }
            if all.is_empty() {
                return Err(Error::config(
                    "no split variables: set [heterogeneity] splits or pass --split".to_string(),
                ));
            }
            cfg.heterogeneity.splits = all;
            if let Some(d) = draws {
                cfg.heterogeneity.n_perm = d;
            }
            let bundle = run_pipeline(&cfg)?;
            print_stage_tables(&bundle, &["heterogeneity"], common.out.as_deref())
        }
        Command::Sur { common } => {
            let mut cfg = load_config(&common)?;
            strip_optional_stages(&mut cfg);
            cfg.sur.enabled = true;
            cfg.validate()?;
            let bundle = run_pipeline(&cfg)?;
            print_stage_tables(
                &bundle,
                &["sur_coefficients", "sur_residual_correlations", "sur_tests"],
                common.out.as_deref(),
            )
        }
        Command::Report { common } => {
            let cfg = load_config(&common)?;
            let bundle = run_pipeline(&cfg)?;
            println!("{}", bundle.to_markdown());
            Ok(())
        }
        Command::Pipeline { common } => {
            let cfg = load_config(&common)?;
            let bundle = run_pipeline(&cfg)?;
            let written = emit_report(&bundle, &cfg.output, EmitFormats::default())?;
            for path in written {
                println!("{}", path.display());
            }
            Ok(())
        }
    }
}
