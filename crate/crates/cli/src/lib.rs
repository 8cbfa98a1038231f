//! Command-line pipeline: IDIF extraction, mask derivation, curve and
//! voxelwise fitting, cohort statistics and synthetic test data.
//!
//! Every command writes `provenance.json` next to its outputs (config echo,
//! input digests, tool version). Outputs depend only on config and inputs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Map, Value};

use multidif::fitting::{
    fit_tac, fit_voxelwise, fit_voxelwise_chain, warm_start_chain, FitConfig, FitMode, Organ, OrganPreset,
    ParametricMaps, PreparedInputs, TacFit, WeightScaling,
};
use multidif::input::{extract_idif, mix_input, InputFunctionSet, IDIF_NAMES};
use multidif::io::{self as mio, TacColumns};
use multidif::model::{FineGrid, FrameGrid, KineticParams, Tac, DEFAULT_FINE_STEP_S};
use multidif::morphology::{center_of_mass, nearest_component, renal_pelvis_surrogate_report};
use multidif::stats::{format_table, summarize_records};
use multidif::synth::{synth_bolus_idifs, synth_tac_with, two_region_phantom, NoiseModel, TruthSidecar};
use multidif::volume::{LabelVolume, ScalarVolume};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Parser)]
#[command(name = "multidif", version, about = "Kinetic modelling of dynamic FDG PET with multiple image-derived input functions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Mean activity per frame inside mask labels, one CSV per label.
    ExtractIdif(ExtractIdifArgs),
    /// Renal-pelvis surrogate mask from a kidney mask.
    RenalPelvis(RenalPelvisArgs),
    /// Keep the connected component closest to a reference.
    NearestComponent(NearestComponentArgs),
    /// Fit one TAC with the aorta input and with multiple inputs.
    Fit(FitArgs),
    /// Voxelwise parametric maps.
    Paramap(ParamapArgs),
    /// Cohort table: mean ± sd, relative change and exact Wilcoxon p.
    Cohort(CohortArgs),
    /// Synthetic IDIFs, a TAC with known parameters and a two-region phantom.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum PresetArg {
    Liver,
    Lung,
    Kidney,
    Generic,
}

impl PresetArg {
    fn preset(self) -> OrganPreset {
        OrganPreset::for_organ(match self {
            PresetArg::Liver => Organ::Liver,
            PresetArg::Lung => Organ::Lung,
            PresetArg::Kidney => Organ::Kidney,
            PresetArg::Generic => Organ::Generic,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeArg {
    Baseline,
    Multi,
    Both,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsArg {
    /// alpha = 1 - sum(|other weights|)
    UnitSum,
    /// every weight box-bounded and free
    Free,
}

impl From<WeightsArg> for WeightScaling {
    fn from(w: WeightsArg) -> Self {
        match w {
            WeightsArg::UnitSum => WeightScaling::UnitSum,
            WeightsArg::Free => WeightScaling::Free,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum VolumeFormat {
    Raw,
    Nii,
    NiiGz,
}

impl VolumeFormat {
    fn of(path: &Path) -> Self {
        let name = path.to_string_lossy();
        if name.ends_with(".nii.gz") {
            VolumeFormat::NiiGz
        } else if name.ends_with(".nii") {
            VolumeFormat::Nii
        } else {
            VolumeFormat::Raw
        }
    }

    fn file(self, dir: &Path, stem: &str) -> PathBuf {
        match self {
            VolumeFormat::Raw => dir.join(format!("{stem}.json")),
            VolumeFormat::Nii => dir.join(format!("{stem}.nii")),
            VolumeFormat::NiiGz => dir.join(format!("{stem}.nii.gz")),
        }
    }
}

/// Column names of TAC/IDIF CSV files.
#[derive(Clone, Debug, Args, Serialize)]
pub struct CsvColumnArgs {
    #[arg(long, default_value = "frame_start_s")]
    pub start_column: String,
    #[arg(long, default_value = "frame_duration_s")]
    pub duration_column: String,
    #[arg(long, default_value = "value_kbq_ml")]
    pub value_column: String,
}

impl CsvColumnArgs {
    fn columns(&self) -> TacColumns {
        TacColumns {
            start: self.start_column.clone(),
            duration: self.duration_column.clone(),
            value: self.value_column.clone(),
        }
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct IdifArgs {
    #[arg(long)]
    pub idif_aorta: PathBuf,
    #[arg(long)]
    pub idif_pv: Option<PathBuf>,
    #[arg(long)]
    pub idif_pa: Option<PathBuf>,
    #[arg(long)]
    pub idif_ureter: Option<PathBuf>,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, value_enum, default_value = "liver")]
    pub preset: PresetArg,
    #[arg(long, value_enum, default_value = "both")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = DEFAULT_FINE_STEP_S)]
    pub fine_step_s: f64,
    #[arg(long, value_enum, default_value = "unit-sum")]
    pub weights: WeightsArg,
    /// Extra seeded random starts per fit (0 = single start).
    #[arg(long, default_value_t = 0)]
    pub multi_start: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ModelArgs {
    fn config(&self) -> FitConfig {
        let mut config = FitConfig {
            scaling: self.weights.into(),
            ..FitConfig::default()
        };
        config.solver.multi_start = self.multi_start;
        config.solver.seed = self.seed;
        config
    }
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ExtractIdifArgs {
    #[arg(long)]
    pub pet_dir: PathBuf,
    /// Frame timing JSON; defaults to timing.json in the PET directory.
    #[arg(long)]
    pub timing: Option<PathBuf>,
    #[arg(long)]
    pub mask: PathBuf,
    /// Labels to extract, as `N` or `NAME=N`; repeatable.
    #[arg(long, required = true)]
    pub label: Vec<String>,
    #[command(flatten)]
    pub columns: CsvColumnArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct RenalPelvisArgs {
    /// Kidney mask; several labels are treated as separate kidneys.
    #[arg(long)]
    pub mask: PathBuf,
    /// Restrict to these kidney labels; repeatable.
    #[arg(long)]
    pub label: Vec<u16>,
    /// Ellipsoid radii in mm.
    #[arg(long, value_parser = parse_triplet_f64, default_value = "40,40,40")]
    pub radii: [f64; 3],
    #[arg(long, value_enum)]
    pub format: Option<VolumeFormat>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct NearestComponentArgs {
    /// Mask holding the structure to clean up.
    #[arg(long)]
    pub mask: PathBuf,
    /// Label of the structure in --mask; all non-zero voxels when omitted.
    #[arg(long)]
    pub label: Option<u16>,
    /// Mask holding the reference organ; defaults to --mask.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Label of the reference organ.
    #[arg(long, conflicts_with = "reference_point")]
    pub reference_label: Option<u16>,
    /// Reference point in mm (voxel centers at (i + 0.5) * spacing).
    #[arg(long, value_parser = parse_triplet_f64)]
    pub reference_point: Option<[f64; 3]>,
    #[arg(long, value_enum)]
    pub format: Option<VolumeFormat>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct FitArgs {
    #[arg(long)]
    pub tac: PathBuf,
    #[command(flatten)]
    pub idifs: IdifArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub columns: CsvColumnArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct ParamapArgs {
    #[arg(long)]
    pub pet_dir: PathBuf,
    #[arg(long)]
    pub timing: Option<PathBuf>,
    #[arg(long)]
    pub mask: PathBuf,
    /// Organ labels to fit; all non-zero voxels when omitted.
    #[arg(long)]
    pub label: Vec<u16>,
    #[command(flatten)]
    pub idifs: IdifArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub columns: CsvColumnArgs,
    /// Worker threads; 0 uses the available parallelism.
    #[arg(long, default_value_t = 0)]
    pub threads: usize,
    #[arg(long, value_enum)]
    pub format: Option<VolumeFormat>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct CohortArgs {
    /// CSV with columns subject_id,organ,mse_baseline,mse_multi.
    #[arg(long)]
    pub cohort: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, value_enum, default_value = "liver")]
    pub preset: PresetArg,
    /// Region-1 parameters, e.g. `K1=0.6,k2=0.5,k3=0.04,V_B=0.1,beta=0.3`.
    /// Unlisted weights are zero and alpha defaults to 1 - sum(|weights|).
    #[arg(long)]
    pub params: Option<String>,
    /// Region-2 parameters of the phantom, same syntax.
    #[arg(long)]
    pub params2: Option<String>,
    /// Gaussian noise standard deviation in kBq/ml.
    #[arg(long, default_value_t = 0.0)]
    pub noise_sd: f64,
    /// Scale the noise by sqrt(mean duration / frame duration).
    #[arg(long)]
    pub duration_scaled_noise: bool,
    #[arg(long, value_parser = parse_triplet_usize, default_value = "10,10,10")]
    pub phantom_dims: [usize; 3],
    #[arg(long, value_parser = parse_triplet_f64, default_value = "2,2,2")]
    pub spacing: [f64; 3],
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "raw")]
    pub format: VolumeFormat,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_triplet<T: std::str::FromStr>(s: &str) -> std::result::Result<[T; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated values, got {s:?}"));
    }
    let parse = |p: &str| p.parse::<T>().map_err(|_| format!("cannot parse {p:?}"));
    Ok([parse(parts[0])?, parse(parts[1])?, parse(parts[2])?])
}

fn parse_triplet_f64(s: &str) -> std::result::Result<[f64; 3], String> {
    parse_triplet(s)
}

fn parse_triplet_usize(s: &str) -> std::result::Result<[usize; 3], String> {
    parse_triplet(s)
}

/// Parses `name=value` pairs into kinetic parameters.
pub fn parse_params(s: &str) -> Result<KineticParams> {
    let mut p = KineticParams::with_aorta_input(f64::NAN, f64::NAN, f64::NAN, f64::NAN);
    p.alpha = f64::NAN;
    for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| anyhow!("parameter {item:?} is not NAME=VALUE"))?;
        let v: f64 = value.trim().parse().with_context(|| format!("parameter {key}"))?;
        match key.trim() {
            "K1" | "k1" => p.k1 = v,
            "k2" => p.k2 = v,
            "k3" => p.k3 = v,
            "V_B" | "v_b" | "vb" => p.v_b = v,
            "alpha" => p.alpha = v,
            "beta" => p.beta = v,
            "gamma" => p.gamma = v,
            "delta" => p.delta = v,
            other => bail!("unknown parameter {other:?}"),
        }
    }
    for (name, v) in [("K1", p.k1), ("k2", p.k2), ("k3", p.k3), ("V_B", p.v_b)] {
        if v.is_nan() {
            bail!("parameter {name} is missing from {s:?}");
        }
    }
    if p.alpha.is_nan() {
        p.alpha = 1.0 - p.beta.abs() - p.gamma.abs() - p.delta.abs();
    }
    Ok(p)
}

// ------------------------------------------------------------- provenance

struct Provenance {
    command: &'static str,
    config: Value,
    inputs: Vec<(PathBuf, String)>,
    outputs: Vec<String>,
}

impl Provenance {
    fn new<T: Serialize>(command: &'static str, config: &T) -> Result<Self> {
        Ok(Provenance {
            command,
            config: serde_json::to_value(config)?,
            inputs: Vec::new(),
            outputs: Vec::new(),
        })
    }

    fn input(&mut self, path: &Path) -> Result<()> {
        if path.is_dir() {
            let mut entries: Vec<PathBuf> = fs::read_dir(path)
                .with_context(|| format!("reading {}", path.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file())
                .collect();
            entries.sort();
            for e in entries {
                self.input(&e)?;
            }
            return Ok(());
        }
        let digest = mio::sha256_file(path)?;
        self.inputs.push((path.to_path_buf(), digest));
        Ok(())
    }

    fn output(&mut self, path: &Path) {
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.outputs.push(name);
    }

    fn write(mut self, out: &Path) -> Result<()> {
        self.outputs.sort();
        self.outputs.dedup();
        let inputs: Vec<Value> = self
            .inputs
            .iter()
            .map(|(p, d)| json!({ "path": p.display().to_string(), "digest": d }))
            .collect();
        let doc = json!({
            "tool": "multidif",
            "version": VERSION,
            "command": self.command,
            "config": self.config,
            "inputs": inputs,
            "outputs": self.outputs,
        });
        mio::write_json(&out.join("provenance.json"), &doc)?;
        Ok(())
    }
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

// ------------------------------------------------------------ commands

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::ExtractIdif(a) => cmd_extract_idif(&a),
        Command::RenalPelvis(a) => cmd_renal_pelvis(&a),
        Command::NearestComponent(a) => cmd_nearest_component(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Paramap(a) => cmd_paramap(&a),
        Command::Cohort(a) => cmd_cohort(&a),
        Command::Synth(a) => cmd_synth(&a),
    }
}

fn parse_label_spec(spec: &str) -> Result<(String, u16)> {
    let (name, label) = match spec.split_once('=') {
        Some((n, l)) => (n.trim().to_string(), l.trim()),
        None => (format!("label_{}", spec.trim()), spec.trim()),
    };
    let label: u16 = label.parse().with_context(|| format!("label {spec:?}"))?;
    if label == 0 {
        bail!("label 0 is background");
    }
    Ok((name, label))
}

fn read_series(pet_dir: &Path, timing: Option<&Path>) -> Result<(Vec<ScalarVolume>, FrameGrid)> {
    mio::read_dynamic_series(pet_dir, timing).with_context(|| format!("reading PET series from {}", pet_dir.display()))
}

fn read_mask(path: &Path) -> Result<LabelVolume> {
    mio::read_label_volume(path).with_context(|| format!("reading mask {}", path.display()))
}

pub fn cmd_extract_idif(a: &ExtractIdifArgs) -> Result<()> {
    let labels = a.label.iter().map(|s| parse_label_spec(s)).collect::<Result<Vec<_>>>()?;
    let (frames, grid) = read_series(&a.pet_dir, a.timing.as_deref())?;
    let mask = read_mask(&a.mask)?;
    create_out(&a.out)?;
    let mut prov = Provenance::new("extract-idif", a)?;
    prov.input(&a.pet_dir)?;
    if let Some(t) = &a.timing {
        prov.input(t)?;
    }
    prov.input(&a.mask)?;
    for (name, label) in labels {
        let region = mask.select(label).with_context(|| format!("mask {}", a.mask.display()))?;
        let tac = extract_idif(&frames, &region, &grid)?;
        let path = a.out.join(format!("{name}.csv"));
        mio::write_tac_csv(&path, &tac, &a.columns.columns())?;
        log::info!("label {label}: {} voxels -> {}", region.count_nonzero(), path.display());
        prov.output(&path);
    }
    prov.write(&a.out)
}

fn output_format(explicit: Option<VolumeFormat>, like: &Path) -> VolumeFormat {
    explicit.unwrap_or_else(|| VolumeFormat::of(like))
}

fn write_label_like(path: &Path, volume: &LabelVolume, template: &Path) -> Result<()> {
    let orientation = mio::read_nifti_orientation(template)?;
    mio::write_label_volume_with(path, volume, orientation.as_ref())?;
    Ok(())
}

pub fn cmd_renal_pelvis(a: &RenalPelvisArgs) -> Result<()> {
    let mut mask = read_mask(&a.mask)?;
    if !a.label.is_empty() {
        for l in mask.labels_mut() {
            if !a.label.contains(l) {
                *l = 0;
            }
        }
    }
    let (surrogate, report) =
        renal_pelvis_surrogate_report(&mask, a.radii).with_context(|| format!("kidney mask {}", a.mask.display()))?;
    create_out(&a.out)?;
    let mut prov = Provenance::new("renal-pelvis", a)?;
    prov.input(&a.mask)?;
    let path = output_format(a.format, &a.mask).file(&a.out, "renal_pelvis");
    write_label_like(&path, &surrogate, &a.mask)?;
    prov.output(&path);
    let report_path = a.out.join("renal_pelvis_report.json");
    mio::write_json(&report_path, &report)?;
    prov.output(&report_path);
    log::info!("renal pelvis surrogate: {} voxels", report.surrogate_voxels);
    prov.write(&a.out)
}

pub fn cmd_nearest_component(a: &NearestComponentArgs) -> Result<()> {
    let mask = read_mask(&a.mask)?;
    let structure = match a.label {
        Some(l) => mask.select(l)?,
        None => mask.binarize(),
    };
    let reference_mm = match (a.reference_point, a.reference_label) {
        (Some(p), _) => p,
        (None, Some(l)) => {
            let reference = match &a.reference {
                Some(p) => read_mask(p)?,
                None => mask.clone(),
            };
            center_of_mass(&reference, l)?
        }
        (None, None) => bail!("give --reference-label (with optional --reference) or --reference-point"),
    };
    let kept = nearest_component(&structure, reference_mm)?;
    create_out(&a.out)?;
    let mut prov = Provenance::new("nearest-component", a)?;
    prov.input(&a.mask)?;
    if let Some(r) = &a.reference {
        prov.input(r)?;
    }
    let path = output_format(a.format, &a.mask).file(&a.out, "nearest_component");
    write_label_like(&path, &kept, &a.mask)?;
    prov.output(&path);
    let report = json!({
        "reference_mm": reference_mm,
        "input_voxels": structure.count_nonzero(),
        "kept_voxels": kept.count_nonzero(),
        "components": multidif::morphology::connected_components(&structure).len(),
    });
    let report_path = a.out.join("nearest_component_report.json");
    mio::write_json(&report_path, &report)?;
    prov.output(&report_path);
    prov.write(&a.out)
}

/// Reads the IDIFs the preset needs; unused inputs become zero curves.
fn load_idifs(args: &IdifArgs, preset: &OrganPreset, columns: &TacColumns, prov: &mut Provenance) -> Result<InputFunctionSet> {
    let read = |path: &Path| -> Result<Tac> {
        mio::read_tac_csv(path, columns).with_context(|| format!("reading IDIF {}", path.display()))
    };
    let aorta = read(&args.idif_aorta)?;
    prov.input(&args.idif_aorta)?;
    let zero = Tac::new(aorta.grid().clone(), vec![0.0; aorta.len()])?;
    let optional = [(&args.idif_pv, 1usize), (&args.idif_pa, 2), (&args.idif_ureter, 3)];
    let mut curves = Vec::with_capacity(3);
    for (path, slot) in optional {
        let needed = preset.weights[slot].is_some();
        curves.push(match path {
            Some(p) => {
                let tac = read(p)?;
                prov.input(p)?;
                tac
            }
            None if needed => bail!(
                "the {} preset uses the {} input: pass --idif-{}",
                preset.organ.name(),
                IDIF_NAMES[slot],
                IDIF_NAMES[slot]
            ),
            None => zero.clone(),
        });
    }
    let mut it = curves.into_iter();
    let (pv, pa, ureter) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
    Ok(InputFunctionSet::new(aorta, pv, pa, ureter)?)
}

fn fit_json(fit: &TacFit) -> Value {
    let mut params = Map::new();
    for (name, v) in fit.reported() {
        params.insert(name, json!(v));
    }
    let mut bounds = Map::new();
    for ((name, l), u) in fit.names.iter().zip(&fit.lower).zip(&fit.upper) {
        bounds.insert(name.clone(), json!([l, u]));
    }
    json!({
        "mode": fit.mode.name(),
        "params": params,
        "bounds": bounds,
        "mse": fit.result.mse,
        "iterations": fit.result.iterations,
        "evaluations": fit.result.evaluations,
        "converged": fit.result.converged,
        "termination": format!("{:?}", fit.result.termination),
    })
}

pub fn cmd_fit(a: &FitArgs) -> Result<()> {
    let preset = a.model.preset.preset();
    let columns = a.columns.columns();
    let mut prov = Provenance::new("fit", a)?;
    let tac = mio::read_tac_csv(&a.tac, &columns).with_context(|| format!("reading TAC {}", a.tac.display()))?;
    prov.input(&a.tac)?;
    let idifs = load_idifs(&a.idifs, &preset, &columns, &mut prov)?;
    let fine = FineGrid::covering(tac.grid(), a.model.fine_step_s)?;
    let config = a.model.config();

    let (baseline, multi, retained) = match a.model.mode {
        ModeArg::Baseline => (Some(fit_tac(&tac, &idifs, &preset, FitMode::Baseline, &fine, &config)?), None, false),
        ModeArg::Multi => (None, Some(fit_tac(&tac, &idifs, &preset, FitMode::Multi, &fine, &config)?), false),
        ModeArg::Both => {
            let chain = warm_start_chain(&tac, &idifs, &preset, &fine, &config)?;
            (Some(chain.baseline), Some(chain.multi), chain.retained_baseline)
        }
    };

    create_out(&a.out)?;
    let mut report = json!({
        "preset": preset.organ.name(),
        "weights": a.model.weights,
        "fine_step_s": a.model.fine_step_s,
        "frames": tac.len(),
    });
    let prepared = PreparedInputs::new(&idifs, &fine, config.rule)?;
    let grid = tac.grid().clone();
    let mut curves: Vec<(String, Vec<f64>)> = vec![("measured".into(), tac.values().to_vec())];
    for fit in baseline.iter().chain(multi.iter()) {
        report[fit.mode.name()] = fit_json(fit);
        curves.push((format!("fit_{}", fit.mode.name()), prepared.predict(&fit.params)?));
        curves.push((
            format!("input_{}", fit.mode.name()),
            mix_input(&idifs, fit.params.weights())?.into_values(),
        ));
    }
    if let (Some(b), Some(m)) = (&baseline, &multi) {
        report["retained_baseline"] = json!(retained);
        report["relative_mse_change_pct"] = json!(multidif::stats::relative_change(b.result.mse, m.result.mse).ok());
        log::info!("mse baseline {:.6} -> multi {:.6}", b.result.mse, m.result.mse);
    }
    for (name, t) in IDIF_NAMES.iter().zip(idifs.curves()) {
        curves.push((format!("idif_{name}"), t.values().to_vec()));
    }

    let report_path = a.out.join("fit_report.json");
    mio::write_json(&report_path, &report)?;
    prov.output(&report_path);
    let curves_path = a.out.join("fitted_curves.csv");
    let refs: Vec<(&str, &[f64])> = curves.iter().map(|(n, v)| (n.as_str(), v.as_slice())).collect();
    mio::write_curves_csv(&curves_path, &grid, &refs, (&columns.start, &columns.duration))?;
    prov.output(&curves_path);
    prov.write(&a.out)
}

fn write_maps(
    maps: &ParametricMaps,
    prefix: &str,
    format: VolumeFormat,
    out: &Path,
    orientation: Option<&mio::NiftiOrientation>,
    prov: &mut Provenance,
) -> Result<()> {
    for (name, vol) in &maps.maps {
        let path = format.file(out, &format!("{prefix}_{name}"));
        mio::write_scalar_volume_with(&path, vol, None, orientation)?;
        prov.output(&path);
    }
    Ok(())
}

const DIFFERENCE_MAPS: [&str; 5] = ["K1", "k2", "k3", "V_B", "mse"];

pub fn cmd_paramap(a: &ParamapArgs) -> Result<()> {
    let preset = a.model.preset.preset();
    let columns = a.columns.columns();
    let mut prov = Provenance::new("paramap", a)?;
    let (frames, grid) = read_series(&a.pet_dir, a.timing.as_deref())?;
    prov.input(&a.pet_dir)?;
    if let Some(t) = &a.timing {
        prov.input(t)?;
    }
    let mut mask = read_mask(&a.mask)?;
    prov.input(&a.mask)?;
    if !a.label.is_empty() {
        for l in mask.labels_mut() {
            if !a.label.contains(l) {
                *l = 0;
            }
        }
    }
    let idifs = load_idifs(&a.idifs, &preset, &columns, &mut prov)?;
    if idifs.grid() != &grid {
        bail!("IDIF frames differ from the PET frame timing");
    }
    let fine = FineGrid::covering(&grid, a.model.fine_step_s)?;
    let config = a.model.config();
    let format = output_format(a.format, &a.mask);
    let orientation = mio::read_nifti_orientation(&a.mask)?;
    create_out(&a.out)?;

    let mut failures = Map::new();
    let mut fitted = Map::new();
    let mut record = |name: &str, maps: &ParametricMaps| {
        fitted.insert(name.to_string(), json!(maps.fitted));
        failures.insert(name.to_string(), json!(maps.failures));
    };
    match a.model.mode {
        ModeArg::Baseline | ModeArg::Multi => {
            let mode = if a.model.mode == ModeArg::Baseline {
                FitMode::Baseline
            } else {
                FitMode::Multi
            };
            let maps = fit_voxelwise(&frames, &mask, &idifs, &preset, mode, &fine, &config, a.threads)?;
            write_maps(&maps, mode.name(), format, &a.out, orientation.as_ref(), &mut prov)?;
            record(mode.name(), &maps);
        }
        ModeArg::Both => {
            let chain = fit_voxelwise_chain(&frames, &mask, &idifs, &preset, &fine, &config, a.threads)?;
            write_maps(&chain.baseline, "baseline", format, &a.out, orientation.as_ref(), &mut prov)?;
            write_maps(&chain.multi, "multi", format, &a.out, orientation.as_ref(), &mut prov)?;
            for name in DIFFERENCE_MAPS {
                let (Some(b), Some(m)) = (chain.baseline.get(name), chain.multi.get(name)) else {
                    continue;
                };
                let data: Vec<f32> = b.data().iter().zip(m.data()).map(|(b, m)| m - b).collect();
                let diff = ScalarVolume::new(b.dims(), b.spacing(), data)?.with_origin(b.origin());
                let path = format.file(&a.out, &format!("diff_{name}"));
                mio::write_scalar_volume_with(&path, &diff, None, orientation.as_ref())?;
                prov.output(&path);
            }
            record("baseline", &chain.baseline);
            record("multi", &chain.multi);
        }
    }
    let summary_path = a.out.join("paramap_summary.json");
    mio::write_json(
        &summary_path,
        &json!({ "voxels": mask.count_nonzero(), "fitted": fitted, "failures": failures }),
    )?;
    prov.output(&summary_path);
    prov.write(&a.out)
}

pub fn cmd_cohort(a: &CohortArgs) -> Result<()> {
    let records = mio::read_cohort_csv(&a.cohort)?;
    if records.is_empty() {
        bail!("cohort file {} has no subjects", a.cohort.display());
    }
    let rows = summarize_records(&records)?;
    for r in &rows {
        if r.n < 2 {
            log::warn!("{}: one subject, standard deviations omitted", r.organ);
        }
    }
    let table = format_table(&rows);
    print!("{table}");
    create_out(&a.out)?;
    let mut prov = Provenance::new("cohort", a)?;
    prov.input(&a.cohort)?;
    let json_path = a.out.join("cohort_summary.json");
    mio::write_json(&json_path, &rows)?;
    prov.output(&json_path);
    let txt_path = a.out.join("cohort_summary.txt");
    fs::write(&txt_path, &table).with_context(|| format!("writing {}", txt_path.display()))?;
    prov.output(&txt_path);
    prov.write(&a.out)
}

/// Default truths for the two phantom regions of each preset.
pub fn default_truths(preset: PresetArg) -> [KineticParams; 2] {
    let base = |k1, k2, k3, v_b| KineticParams::with_aorta_input(k1, k2, k3, v_b);
    let (mut r1, mut r2) = (base(0.6, 0.5, 0.04, 0.1), base(0.3, 0.4, 0.01, 0.05));
    match preset {
        PresetArg::Liver => {
            (r1.alpha, r1.beta) = (0.7, 0.3);
            (r2.alpha, r2.beta) = (0.4, 0.6);
        }
        PresetArg::Lung => {
            (r1.alpha, r1.gamma) = (0.6, 0.4);
            (r2.alpha, r2.gamma) = (0.8, 0.2);
        }
        PresetArg::Kidney => {
            (r1.alpha, r1.delta) = (0.8, 0.2);
            (r2.alpha, r2.delta) = (0.9, -0.1);
        }
        PresetArg::Generic => {}
    }
    [r1, r2]
}

pub fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let preset = a.preset.preset();
    let defaults = default_truths(a.preset);
    let truths = [
        a.params.as_deref().map(parse_params).transpose()?.unwrap_or(defaults[0]),
        a.params2.as_deref().map(parse_params).transpose()?.unwrap_or(defaults[1]),
    ];
    let grid = FrameGrid::protocol();
    let idifs = synth_bolus_idifs(&grid, a.seed);
    let noise_model = if a.duration_scaled_noise {
        NoiseModel::DurationScaled
    } else {
        NoiseModel::Additive
    };
    let tac = synth_tac_with(&truths[0], &idifs, &preset, a.noise_sd, noise_model, a.seed)?;
    let phantom = two_region_phantom(a.phantom_dims, a.spacing, &idifs, &preset, truths, a.noise_sd, a.seed)?;

    create_out(&a.out)?;
    let mut prov = Provenance::new("synth", a)?;
    let columns = TacColumns::default();
    for (name, t) in IDIF_NAMES.iter().zip(idifs.curves()) {
        let p = a.out.join(format!("idif_{name}.csv"));
        mio::write_tac_csv(&p, t, &columns)?;
        prov.output(&p);
    }
    let tac_path = a.out.join("tac.csv");
    mio::write_tac_csv(&tac_path, &tac.tac, &columns)?;
    prov.output(&tac_path);
    let sidecar = TruthSidecar {
        truth: truths[0],
        organ: preset.organ,
        noise_sd: a.noise_sd,
        noise_model,
        seed: a.seed,
    };
    let truth_path = a.out.join("tac_truth.json");
    mio::write_json(&truth_path, &sidecar)?;
    prov.output(&truth_path);

    let pet_dir = a.out.join("pet");
    mio::write_dynamic_series(&pet_dir, &phantom.frames, &grid)?;
    prov.output(&pet_dir);
    let mask_path = a.format.file(&a.out, "phantom_mask");
    mio::write_label_volume(&mask_path, &phantom.mask)?;
    prov.output(&mask_path);
    let phantom_truth = a.out.join("phantom_truth.json");
    mio::write_json(
        &phantom_truth,
        &json!({ "regions": [
            { "label": 1, "params": truths[0] },
            { "label": 2, "params": truths[1] },
        ]}),
    )?;
    prov.output(&phantom_truth);
    prov.write(&a.out)
}
