use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use uhfsegkit::ensemble::ensemble_from_manifest;
use uhfsegkit::labels::{
    evaluation_label_set, extract_cortex, relabel_unassigned_to_csf, EvaluationMode, ExclusionSet,
};
use uhfsegkit::metrics::{evaluate_pair, write_metrics_csv};
use uhfsegkit::nifti::{load_nifti, save_nifti, save_nifti_described, wants_gzip};
use uhfsegkit::pipeline::{run_pipeline, PipelineManifest};
use uhfsegkit::resample::{resample_image, resample_labels, ImageOrder, LabelMode, ResampleSpec, Target, RESAMPLED_DESCRIP};
use uhfsegkit::stats::{group_comparisons, read_observations, write_comparisons_csv, Bonferroni};
use uhfsegkit::synth::{case_stem, generate_corpus, write_case, SynthConfig};
use uhfsegkit::volumetry::{
    comparison_svg, normalize_by_tiv, read_tiv_csv, structure_volumes, tiv_compare_grouped, write_comparison_csv,
    write_tiv_csv, write_volumes_csv,
};
use uhfsegkit::{Error, LabelConvention, LabelMap};

const EXIT_USAGE: u8 = 1;
const EXIT_PARTIAL: u8 = 2;
const EXIT_IO: u8 = 3;

#[derive(Parser)]
#[command(name = "uhfsegkit", version, about = "Brain MRI label-map preparation, synthesis, evaluation and volumetry")]
struct Cli {
    /// Log more (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Commands,
}

#[derive(Args, Clone, Copy)]
struct Jobs {
    /// Worker threads.
    #[arg(long, env = "UHFSEGKIT_JOBS", default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Commands {
    /// Relabel unassigned voxels inside the brain mask as CSF.
    PrepLabels {
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Built-in convention of the input map (fs35, dkt62, dk68, fs35+dkt62).
        #[arg(long, default_value = "fs35+dkt62")]
        convention: String,
        /// Convention table (id,name,hemisphere) overriding --convention.
        #[arg(long)]
        convention_file: Option<PathBuf>,
    },
    /// Split a whole-brain map into a two-label cortex map and its DKT parcellation.
    ExtractCortex {
        #[arg(long)]
        labels: PathBuf,
        /// Output directory (cortex.nii.gz, parcellation.nii.gz).
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a domain-randomized corpus from a directory of label maps.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        inputs: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = SynthMode::Image)]
        mode: SynthMode,
        /// Overrides the seed in the config file.
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        jobs: Jobs,
    },
    /// Resample an image or label map to a new spacing or onto a reference grid.
    Resample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Target spacing in mm, e.g. 0.8,0.8,0.8.
        #[arg(long, value_parser = parse_spacing, conflicts_with = "like", required_unless_present = "like")]
        target_spacing: Option<[f64; 3]>,
        /// Reference volume whose grid is the target.
        #[arg(long)]
        like: Option<PathBuf>,
        /// Treat the input as a label map.
        #[arg(long)]
        labels: bool,
        #[arg(long, value_enum, default_value_t = LabelModeArg::Onehot)]
        label_mode: LabelModeArg,
        #[arg(long, value_enum, default_value_t = OrderArg::Cubic)]
        order: OrderArg,
        #[command(flatten)]
        jobs: Jobs,
    },
    /// Average fold probability maps and write the argmax labeling.
    Ensemble {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-label DSC and ASD of a prediction against a reference.
    Eval {
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// CSV destination; standard output when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "subject")]
        subject: String,
        /// Replace the default exclusion list (comma-separated ids; empty for none).
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        exclude: Option<Vec<u32>>,
        #[command(flatten)]
        jobs: Jobs,
    },
    /// Structure volumes and TIV of one or more label maps.
    Volumetry {
        #[arg(long, num_args = 1.., required = true)]
        labels: Vec<PathBuf>,
        /// Output directory (volumes.csv, tiv.csv).
        #[arg(long)]
        out: PathBuf,
        /// External TIV per subject (subject_id,tiv_mm3) used for normalization.
        #[arg(long)]
        tiv_override: Option<PathBuf>,
    },
    /// Correlate our TIV estimates with a reference method.
    TivCompare {
        #[arg(long)]
        ours: PathBuf,
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Also write a scatter plot.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
    /// Mann-Whitney U tests between two groups with Bonferroni correction.
    GroupStats {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        group_a: String,
        #[arg(long)]
        group_b: String,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Number of comparisons in the correction family.
        #[arg(long)]
        m: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a manifest over all subjects.
    Pipeline {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, env = "UHFSEGKIT_JOBS")]
        jobs: Option<usize>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthMode {
    Image,
    LabelsOnly,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelModeArg {
    Onehot,
    Nearest,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderArg {
    Cubic,
    Linear,
    Nearest,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    WholeBrain,
    Cortex,
}

fn parse_spacing(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()?;
    match parts.as_slice() {
        [v] if *v > 0.0 => Ok([*v; 3]),
        [a, b, c] if *a > 0.0 && *b > 0.0 && *c > 0.0 => Ok([*a, *b, *c]),
        _ => Err("expected one or three positive numbers".into()),
    }
}

/// Outcome of a subcommand that can partially fail.
enum Outcome {
    Done,
    Partial(String),
}

fn exit_code_for(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::Manifest(_) => EXIT_USAGE,
        _ if e.is_io_or_format() => EXIT_IO,
        Error::GridMismatch(_) | Error::InvalidLabels(_) | Error::NonFinite(_) | Error::DegenerateAffine(_) => EXIT_IO,
        _ => EXIT_PARTIAL,
    }
}

fn install_pool(jobs: usize) {
    // only fails when a global pool already exists, which is fine
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
}

fn stem(path: &Path) -> String {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

fn ensure_parent(path: &Path) -> uhfsegkit::Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => fs::create_dir_all(p).map_err(|e| io_err(p, e)),
        _ => Ok(()),
    }
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source: e }
}

fn write_file(path: &Path, bytes: &[u8]) -> uhfsegkit::Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn save(grid: &uhfsegkit::VoxelGrid, path: &Path) -> uhfsegkit::Result<()> {
    ensure_parent(path)?;
    save_nifti(grid, path, wants_gzip(path))
}

fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

fn run(cli: Cli) -> uhfsegkit::Result<Outcome> {
    match cli.command {
        Commands::PrepLabels { labels, mask, out, convention, convention_file } => {
            let conv = match &convention_file {
                Some(p) => LabelConvention::from_csv("custom", p)?,
                None => LabelConvention::builtin(&convention)?,
            };
            let map = LabelMap::from_grid(&load_nifti(&labels)?, Arc::new(conv))?;
            let mask = load_nifti(&mask)?;
            let relabeled = relabel_unassigned_to_csf(&map, &mask)?;
            save(&relabeled.to_grid(), &out)?;
        }
        Commands::ExtractCortex { labels, out } => {
            let map = LabelMap::from_grid_inferred(&load_nifti(&labels)?)?;
            let ex = extract_cortex(&map)?;
            save(&ex.cortex.to_grid(), &out.join("cortex.nii.gz"))?;
            save(&ex.parcellation.to_grid(), &out.join("parcellation.nii.gz"))?;
            if ex.unparcellated_voxels > 0 {
                eprintln!("warning: {} cortex voxels have no parcel in their hemisphere", ex.unparcellated_voxels);
            }
        }
        Commands::Synth { config, inputs, out, mode, seed, jobs } => {
            let mut cfg = match &config {
                Some(p) => SynthConfig::read(p)?,
                None => SynthConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if matches!(mode, SynthMode::LabelsOnly) {
                cfg = cfg.labels_only();
            }
            cfg.validate()?;
            let mut files: Vec<PathBuf> = fs::read_dir(&inputs)
                .map_err(|e| io_err(&inputs, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_nifti(p))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::InvalidArgument(format!("no NIfTI label maps in {}", inputs.display())));
            }
            let maps = files
                .iter()
                .map(|p| LabelMap::from_grid_inferred(&load_nifti(p)?))
                .collect::<uhfsegkit::Result<Vec<_>>>()?;
            let corpus = generate_corpus(&maps, &cfg, jobs.jobs)?;
            let mut failures = Vec::new();
            for outcome in corpus {
                let input_stem = stem(&files[outcome.key.input]);
                match outcome.result {
                    Ok(case) => {
                        write_case(&case, &out, &case_stem(&input_stem, &outcome.key))?;
                    }
                    Err(e) => failures.push(format!("{input_stem} replica {}: {e}", outcome.key.replica)),
                }
            }
            let cfg_path = out.join("config.json");
            write_file(&cfg_path, (serde_json::to_string_pretty(&cfg)? + "\n").as_bytes())?;
            if !failures.is_empty() {
                return Ok(Outcome::Partial(failures.join("\n")));
            }
        }
        Commands::Resample { input, out, target_spacing, like, labels, label_mode, order, jobs } => {
            install_pool(jobs.jobs);
            let target = match (target_spacing, &like) {
                (Some(s), _) => Target::Spacing(s),
                (None, Some(r)) => Target::Grid(load_nifti(r)?.geometry().clone()),
                (None, None) => return Err(Error::InvalidArgument("--target-spacing or --like is required".into())),
            };
            let spec = ResampleSpec {
                target,
                image_order: match order {
                    OrderArg::Cubic => ImageOrder::Cubic,
                    OrderArg::Linear => ImageOrder::Linear,
                    OrderArg::Nearest => ImageOrder::Nearest,
                },
                label_mode: match label_mode {
                    LabelModeArg::Onehot => LabelMode::OnehotLinear,
                    LabelModeArg::Nearest => LabelMode::Nearest,
                },
            };
            let grid = load_nifti(&input)?;
            let result = if labels {
                resample_labels(&LabelMap::from_grid_inferred(&grid)?, &spec)?.to_grid()
            } else {
                resample_image(&grid, &spec)?
            };
            ensure_parent(&out)?;
            save_nifti_described(&result, &out, wants_gzip(&out), RESAMPLED_DESCRIP)?;
        }
        Commands::Ensemble { manifest, out } => {
            let labels = ensemble_from_manifest(&manifest)?;
            save(&labels.to_grid(), &out)?;
        }
        Commands::Eval { gt, pred, mode, out, subject, exclude, jobs } => {
            install_pool(jobs.jobs);
            let mode = match mode {
                ModeArg::WholeBrain => EvaluationMode::WholeBrain,
                ModeArg::Cortex => EvaluationMode::Cortex,
            };
            let conv = Arc::new(mode.convention());
            let excl = match exclude {
                Some(ids) => ExclusionSet::from_ids(ids, "user override", &conv)?,
                None => evaluation_label_set(mode),
            };
            eprintln!("excluded labels ({}): {:?}", excl.reason, excl.excluded_ids);
            let g = LabelMap::from_grid(&load_nifti(&gt)?, conv.clone())?;
            let p = LabelMap::from_grid(&load_nifti(&pred)?, conv)?;
            let report = evaluate_pair(&g, &p, &excl)?;
            let mut buf = Vec::new();
            write_metrics_csv(&mut buf, &subject, &report, true)?;
            match out {
                Some(path) => write_file(&path, &buf)?,
                None => std::io::stdout().write_all(&buf).map_err(|e| io_err(Path::new("<stdout>"), e))?,
            }
        }
        Commands::Volumetry { labels, out, tiv_override } => {
            let overrides = match &tiv_override {
                Some(p) => read_tiv_csv(p)?,
                None => Vec::new(),
            };
            let mut reports = Vec::new();
            for path in &labels {
                let id = stem(path);
                let map = LabelMap::from_grid_inferred(&load_nifti(path)?)?;
                let tiv = overrides.iter().find(|r| r.subject_id == id).map(|r| r.tiv_mm3);
                reports.push(normalize_by_tiv(&structure_volumes(&id, &map), tiv)?);
            }
            let mut vol = Vec::new();
            write_volumes_csv(&mut vol, &reports)?;
            let mut tiv = Vec::new();
            write_tiv_csv(&mut tiv, &reports)?;
            write_file(&out.join("volumes.csv"), &vol)?;
            write_file(&out.join("tiv.csv"), &tiv)?;
        }
        Commands::TivCompare { ours, reference, out, svg } => {
            let groups = tiv_compare_grouped(&read_tiv_csv(&ours)?, &read_tiv_csv(&reference)?)?;
            let mut buf = Vec::new();
            write_comparison_csv(&mut buf, &groups)?;
            write_file(&out, &buf)?;
            if let Some(svg) = svg {
                write_file(&svg, comparison_svg(&groups, "reference TIV (mm³)", "TIV (mm³)").as_bytes())?;
            }
        }
        Commands::GroupStats { input, group_a, group_b, alpha, m, out } => {
            let b = Bonferroni::new(alpha, m)?;
            eprintln!("significance threshold: p < {} (alpha {alpha} / m {m})", b.display_threshold());
            let rows = group_comparisons(&read_observations(&input)?, &group_a, &group_b, alpha, m)?;
            let mut buf = Vec::new();
            write_comparisons_csv(&mut buf, &rows)?;
            write_file(&out, &buf)?;
        }
        Commands::Pipeline { manifest, jobs } => {
            let m = PipelineManifest::read(&manifest)?;
            let jobs = jobs.or(m.jobs).unwrap_or(1);
            let report = run_pipeline(&m, jobs)?;
            if report.exit_code() != 0 {
                let mut msg = format!("failed subjects: {}", report.failed_subjects.join(", "));
                if let Some(e) = &report.group_stats_error {
                    msg.push_str(&format!("; group statistics: {e}"));
                }
                return Ok(Outcome::Partial(msg));
            }
        }
    }
    Ok(Outcome::Done)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::Partial(msg)) => {
            eprintln!("error: partial failure\n{msg}");
            ExitCode::from(EXIT_PARTIAL)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
