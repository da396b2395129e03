//! `avimesh` command-line front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use avimesh::annotations::{load_annotations, save_annotations, save_mask};
use avimesh::camera::{aviary_rig, load_rig, save_rig};
use avimesh::metrics::PckNormalizer;
use avimesh::pipeline::{evaluate_records, run_pipeline, PipelineMode, PipelineOptions, PipelineResources, ResultFile};
use avimesh::prior::{fit_gaussian, stack_params, PRIOR_ALPHA};
use avimesh::regressor::{load_checkpoint, save_checkpoint, train, TrainConfig};
use avimesh::rig::procedural_template_set;
use avimesh::synth::{generate_scenes, generate_synthetic, scene_annotation, PoseSampler, SynthOptions, SyntheticFile};
use avimesh::template::save_obj;
use avimesh::{CameraView, FitConfig, PosePrior, PoseState, TemplateModel, TemplateSet, Variant};

const EXIT_USAGE: u8 = 1;
const EXIT_NO_FITS: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum VariantChoice {
    Folded,
    Outstretched,
    Both,
}

#[derive(Debug, Parser)]
#[command(name = "avimesh", version, about = "Fit an articulated bird mesh to keypoint and silhouette annotations")]
struct Cli {
    /// Seed for every random stage.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// TOML file with fit settings (flat keys, as in the fit configuration).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Worker threads; 0 uses every core.
    #[arg(long, global = true, env = "AVIMESH_JOBS", default_value_t = 0)]
    jobs: usize,
    /// Which template variant(s) to fit.
    #[arg(long, global = true, value_enum, default_value_t = VariantChoice::Folded)]
    template_variant: VariantChoice,
    /// Template set file; the built-in procedural bird when absent.
    #[arg(long, global = true)]
    template: Option<PathBuf>,
    /// Camera rig file; the built-in eight-camera aviary when absent.
    #[arg(long, global = true)]
    rig: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Multi-view fitting of every annotated instance.
    FitMulti(FitMultiArgs),
    /// Single-view regression, optionally refined by optimization.
    FitSingle(FitSingleArgs),
    /// Fit the pose prior to multi-view results and sample a synthetic training set.
    Synth(SynthArgs),
    /// Train the pose regressor on a synthetic set.
    TrainReg(TrainRegArgs),
    /// Re-score a results file against annotations.
    Eval(EvalArgs),
    /// Write one OBJ mesh per fitted instance.
    ExportObj(ExportObjArgs),
    /// Write the built-in template set and camera rig.
    InitTemplate(InitTemplateArgs),
    /// Render a synthetic annotation bundle with full-resolution masks.
    MakeFixture(MakeFixtureArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    /// Annotation file.
    #[arg(long)]
    annotations: PathBuf,
    /// Directory that mask paths resolve against; the annotation file's directory by default.
    #[arg(long)]
    mask_root: Option<PathBuf>,
    /// Normalize PCK thresholds by box width instead of the largest side.
    #[arg(long)]
    pck_by_width: bool,
}

#[derive(Debug, Args)]
struct FitMultiArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Optional pose prior added to the objective.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Skip OBJ export.
    #[arg(long)]
    no_obj: bool,
}

#[derive(Debug, Args)]
struct FitSingleArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Regressor checkpoint.
    #[arg(long)]
    regressor: PathBuf,
    /// Pose prior; required for refinement, also supplies decoding bone lengths.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Report the raw regressor decode without optimization.
    #[arg(long)]
    no_refine: bool,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    no_obj: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    /// Multi-view results whose parameters define the prior.
    #[arg(long)]
    fits: PathBuf,
    /// Use this prior instead of fitting one.
    #[arg(long)]
    prior: Option<PathBuf>,
    /// Where to write the fitted prior.
    #[arg(long)]
    prior_out: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    per_instance: usize,
    #[arg(long, default_value_t = 0.05)]
    bone_noise: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainRegArgs {
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    /// Share of source instances held out for validation.
    #[arg(long, default_value_t = 0.1)]
    validation_fraction: f64,
    /// Samples with fewer visible keypoints are skipped.
    #[arg(long, default_value_t = 4)]
    min_visible: usize,
    /// Optional JSON training report.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long)]
    results: PathBuf,
    /// Per-instance TSV output.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ExportObjArgs {
    #[arg(long)]
    results: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct InitTemplateArgs {
    #[arg(long)]
    out: PathBuf,
    /// Also write the camera rig here.
    #[arg(long)]
    rig_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MakeFixtureArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    count: usize,
    #[arg(long, default_value_t = 4)]
    views: usize,
    /// Gaussian keypoint noise in pixels.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long)]
    no_masks: bool,
}

struct Session {
    templates: TemplateSet,
    rig: Vec<CameraView>,
    fit: FitConfig,
    variants: Vec<Variant>,
    seed: u64,
}

impl Session {
    fn load(cli: &Cli) -> Result<Self> {
        let templates = match &cli.template {
            Some(p) => TemplateSet::load(p).with_context(|| format!("loading template {}", p.display()))?,
            None => procedural_template_set().clone(),
        };
        let rig = match &cli.rig {
            Some(p) => load_rig(p).with_context(|| format!("loading rig {}", p.display()))?,
            None => aviary_rig(),
        };
        let mut fit = match &cli.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                toml::from_str::<FitConfig>(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => FitConfig::default(),
        };
        fit.seed = cli.seed;
        fit.validate().context("invalid fit configuration")?;
        let variants = match cli.template_variant {
            VariantChoice::Folded => vec![Variant::WingsFolded],
            VariantChoice::Outstretched => vec![Variant::WingsOutstretched],
            VariantChoice::Both => Variant::ALL.to_vec(),
        };
        Ok(Self { templates, rig, fit, variants, seed: cli.seed })
    }

    fn template_list(&self) -> Vec<(Variant, &TemplateModel)> {
        self.variants.iter().map(|v| (*v, self.templates.get(*v))).collect()
    }
}

fn mask_root(input: &InputArgs) -> PathBuf {
    input
        .mask_root
        .clone()
        .unwrap_or_else(|| input.annotations.parent().map(Path::to_path_buf).unwrap_or_default())
}

fn normalizer(input: &InputArgs) -> PckNormalizer {
    if input.pck_by_width {
        PckNormalizer::Width
    } else {
        PckNormalizer::LargestSide
    }
}

fn load_prior(path: &Path) -> Result<PosePrior> {
    PosePrior::load(path).with_context(|| format!("loading prior {}", path.display()))
}

fn export_objs(ctx: &Session, file: &ResultFile, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for r in &file.records {
        let template = ctx.templates.get(r.variant);
        let mesh = PoseState::new(template, &r.params).with_context(|| format!("posing {}", r.id))?.mesh();
        let name = r.id.replace(['/', '\\', '@'], "_");
        save_obj(dir.join(format!("{name}.obj")), &mesh, &template.faces)?;
    }
    Ok(())
}

/// Returns `Ok(false)` when nothing was fitted.
fn run_fit(ctx: &Session, input: &InputArgs, mode: PipelineMode, refine: bool, prior: Option<PosePrior>, regressor: Option<PathBuf>, out: &Path, obj: bool) -> Result<bool> {
    let instances = load_annotations(&input.annotations, &ctx.rig).with_context(|| format!("loading {}", input.annotations.display()))?;
    let net = regressor.map(|p| load_checkpoint(&p).with_context(|| format!("loading regressor {}", p.display()))).transpose()?;
    let bones: Option<Vec<f64>> = prior.as_ref().map(|p| p.mean.rows(PRIOR_ALPHA.start, PRIOR_ALPHA.len()).iter().copied().collect());
    let templates = ctx.template_list();
    let root = mask_root(input);
    let res = PipelineResources {
        templates: &templates,
        rig: &ctx.rig,
        prior: prior.as_ref(),
        regressor: net.as_ref(),
        mean_bone_lengths: bones.as_deref(),
        mask_root: &root,
    };
    let opts = PipelineOptions { mode, refine, fit: ctx.fit.clone(), pck_normalizer: normalizer(input) };
    let output = run_pipeline(&instances, &res, &opts)?;
    std::fs::create_dir_all(out)?;
    let file = ResultFile::new(mode, refine, ctx.seed, &output);
    file.save(out.join("results.json"))?;
    std::fs::write(out.join("report.tsv"), output.report.to_tsv())?;
    std::fs::write(out.join("summary.txt"), format!("{}\n", output.report.summary_line()))?;
    if obj {
        export_objs(ctx, &file, &out.join("obj"))?;
    }
    println!("{}", output.report.summary_line());
    Ok(!output.records.is_empty())
}

fn run(cli: Cli) -> Result<u8> {
    let ctx = Session::load(&cli)?;
    match cli.command {
        Command::FitMulti(a) => {
            let prior = a.prior.as_deref().map(load_prior).transpose()?;
            let ok = run_fit(&ctx, &a.input, PipelineMode::MultiView, true, prior, None, &a.out, !a.no_obj)?;
            return Ok(if ok { 0 } else { EXIT_NO_FITS });
        }
        Command::FitSingle(a) => {
            if !a.no_refine && a.prior.is_none() {
                bail!("single-view refinement needs --prior");
            }
            let prior = a.prior.as_deref().map(load_prior).transpose()?;
            let ok = run_fit(&ctx, &a.input, PipelineMode::SingleView, !a.no_refine, prior, Some(a.regressor), &a.out, !a.no_obj)?;
            return Ok(if ok { 0 } else { EXIT_NO_FITS });
        }
        Command::Synth(a) => {
            let fits = ResultFile::load(&a.fits).with_context(|| format!("loading {}", a.fits.display()))?;
            if fits.records.is_empty() {
                bail!("{} holds no fitted instances", a.fits.display());
            }
            let prior = match &a.prior {
                Some(p) => load_prior(p)?,
                None => fit_gaussian(&fits.records.iter().map(|r| stack_params(&r.params)).collect::<Vec<_>>(), None, None)?,
            };
            if let Some(p) = &a.prior_out {
                prior.save(p)?;
            }
            let opts = SynthOptions { per_instance: a.per_instance, bone_noise_std: a.bone_noise, seed: ctx.seed, ..SynthOptions::default() };
            let sources: Vec<(String, avimesh::PoseParams)> = fits.records.iter().map(|r| (r.id.clone(), r.params.clone())).collect();
            let template = ctx.templates.get(ctx.variants[0]);
            let instances = generate_synthetic(template, &sources, &prior, &ctx.rig, &opts)?;
            std::fs::write(&a.out, SyntheticFile::new(opts, &instances, &ctx.rig).to_json())?;
            println!("{} synthetic instances from {} fits", instances.len(), sources.len());
        }
        Command::TrainReg(a) => {
            let text = std::fs::read_to_string(&a.synthetic).with_context(|| format!("reading {}", a.synthetic.display()))?;
            let file = SyntheticFile::from_json(&text).map_err(anyhow::Error::msg)?;
            let samples: Vec<_> = file.records.iter().filter_map(|r| r.training_sample(&ctx.rig, a.min_visible)).collect();
            info!("{} of {} synthetic instances usable", samples.len(), file.records.len());
            let cfg = TrainConfig {
                hidden: a.hidden,
                epochs: a.epochs,
                batch_size: a.batch_size,
                learning_rate: a.learning_rate,
                validation_fraction: a.validation_fraction,
                seed: ctx.seed,
            };
            let (net, report) = train(&samples, &cfg)?;
            save_checkpoint(&a.out, &net, ctx.seed, a.epochs)?;
            if let Some(p) = &a.report {
                std::fs::write(p, serde_json::to_string_pretty(&report)? + "\n")?;
            }
            let last = |v: &[f64]| v.last().map(|x| format!("{x:.6}")).unwrap_or_else(|| "-".into());
            println!("trained on {} samples: train loss {} validation loss {}", samples.len(), last(&report.train_loss), last(&report.validation_loss));
        }
        Command::Eval(a) => {
            let file = ResultFile::load(&a.results).with_context(|| format!("loading {}", a.results.display()))?;
            let instances = load_annotations(&a.input.annotations, &ctx.rig)?;
            let templates: Vec<(Variant, &TemplateModel)> = Variant::ALL.iter().map(|v| (*v, ctx.templates.get(*v))).collect();
            let root = mask_root(&a.input);
            let res = PipelineResources { templates: &templates, rig: &ctx.rig, prior: None, regressor: None, mean_bone_lengths: None, mask_root: &root };
            let opts = PipelineOptions { mode: file.mode, refine: file.refine, fit: ctx.fit.clone(), pck_normalizer: normalizer(&a.input) };
            let split = match (file.mode, file.refine) {
                (PipelineMode::MultiView, _) => "multi_view",
                (PipelineMode::SingleView, true) => "single_view_refined",
                (PipelineMode::SingleView, false) => "single_view_regression",
            };
            let report = evaluate_records(&file.records, &instances, &res, &opts, split);
            if let Some(p) = &a.out {
                std::fs::write(p, report.to_tsv())?;
            }
            println!("{}", report.summary_line());
            if report.n_instances == 0 {
                return Ok(EXIT_NO_FITS);
            }
        }
        Command::ExportObj(a) => {
            let file = ResultFile::load(&a.results).with_context(|| format!("loading {}", a.results.display()))?;
            export_objs(&ctx, &file, &a.out)?;
            println!("wrote {} meshes", file.records.len());
        }
        Command::InitTemplate(a) => {
            ctx.templates.save(&a.out)?;
            if let Some(p) = &a.rig_out {
                save_rig(p, &ctx.rig)?;
            }
        }
        Command::MakeFixture(a) => make_fixture(&ctx, &a)?,
    }
    Ok(0)
}

fn make_fixture(ctx: &Session, a: &MakeFixtureArgs) -> Result<()> {
    if a.views > ctx.rig.len() {
        bail!("--views {} exceeds the {} cameras in the rig", a.views, ctx.rig.len());
    }
    let template = ctx.templates.get(ctx.variants[0]);
    let scenes = generate_scenes(template, &ctx.rig, a.count, a.views, &PoseSampler::default(), ctx.seed, ctx.fit.render_size, ctx.fit.mask_padding)?;
    std::fs::create_dir_all(a.out.join("masks"))?;
    let mut instances = Vec::new();
    let mut truth = BTreeMap::new();
    for (i, scene) in scenes.iter().enumerate() {
        let mut scene = scene.clone();
        if a.noise > 0.0 {
            let mut rng = avimesh::synth::item_rng(ctx.seed ^ 0x6e6f697365, i as u64);
            for (_, v) in &mut scene.views {
                v.keypoints = avimesh::synth::perturb_keypoints(&v.keypoints, a.noise, &mut rng);
            }
        }
        let (inst, masks) = scene_annotation(&scene, template, &ctx.rig, (!a.no_masks).then_some("masks"))?;
        for (path, mask) in masks {
            save_mask(a.out.join(path), &mask)?;
        }
        instances.push(inst);
        truth.insert(scene.id.clone(), scene.params.clone());
    }
    save_annotations(a.out.join("annotations.json"), &instances)?;
    save_rig(a.out.join("rig.json"), &ctx.rig)?;
    std::fs::write(a.out.join("ground_truth.json"), serde_json::to_string_pretty(&truth)? + "\n")?;
    println!("wrote {} instances to {}", instances.len(), a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { EXIT_USAGE } else { 0 });
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.jobs).build_global() {
        eprintln!("error: {e}");
        return ExitCode::from(EXIT_USAGE);
    }
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
