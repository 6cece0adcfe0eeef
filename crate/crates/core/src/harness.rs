//! Run configuration and the end-to-end pipelines behind the command line.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint, RngState, TrainingMetadata};
use crate::data::{load_dataset, DatasetDescriptor, DatasetKind, Splits};
use crate::engine::{aofp_search, write_moves_json, write_trajectory_csv, AofpConfig};
use crate::error::{Error, Result};
use crate::graph::{
    build_small_resnet, build_three_conv, build_vgg_cifar, flops_of, layer_flops, reconstruct, scale_widths,
    vgg_small, ModelParams, Network, NetworkSpec, ResNetConfig, VGG16_CIFAR_WIDTHS, VGG_SMALL_WIDTHS,
};
use crate::metrics::{pruning_curve, write_curves_csv, CurveConfig, CurveData, Method};
use crate::train::{evaluate, finetune, train, write_step_csv, EvalReport, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Pipeline {
    Train,
    Prune,
    PruneBaseline,
    Redesign,
    Flops,
    Eval,
}

impl Pipeline {
    pub fn name(self) -> &'static str {
        match self {
            Pipeline::Train => "train",
            Pipeline::Prune => "prune",
            Pipeline::PruneBaseline => "prune-baseline",
            Pipeline::Redesign => "redesign",
            Pipeline::Flops => "flops",
            Pipeline::Eval => "eval",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    VggSmall,
    Vgg16Cifar,
    SmallResnet,
    ThreeConv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub preset: Preset,
    /// Conv widths (stage widths for the residual preset); preset defaults
    /// when absent.
    pub widths: Option<Vec<usize>>,
    pub blocks_per_stage: usize,
    /// A spec JSON file to use instead of the preset.
    pub spec_path: Option<PathBuf>,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { preset: Preset::VggSmall, widths: None, blocks_per_stage: 1, spec_path: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Conv layer whose filters are pruned; the first prunable one if absent.
    pub layer: Option<usize>,
    /// Filters to prune; all but one if absent.
    pub q: Option<usize>,
    pub methods: Vec<Method>,
    pub aofp_batch: usize,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { layer: None, q: None, methods: Method::ALL.to_vec(), aofp_batch: 25 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RedesignConfig {
    pub scale: f64,
    /// Allowed shortfall below the original FLOPs, as a fraction of them.
    pub tolerance: f64,
    /// Also train the original architecture with the same schedule and
    /// report its accuracy.
    pub compare_baseline: bool,
}

impl Default for RedesignConfig {
    fn default() -> Self {
        Self { scale: 1.5, tolerance: 0.02, compare_baseline: true }
    }
}

/// A single JSON document describing one pipeline run. `seed` is applied to
/// the data split, training and pruning.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub pipeline: Pipeline,
    pub dataset: DatasetDescriptor,
    pub architecture: Architecture,
    pub train: TrainConfig,
    pub aofp: AofpConfig,
    pub baseline: BaselineConfig,
    pub redesign: RedesignConfig,
    /// Model directory to start from; a fresh model is trained when absent.
    pub checkpoint: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            pipeline: Pipeline::Train,
            dataset: DatasetDescriptor::default(),
            architecture: Architecture::default(),
            train: TrainConfig::default(),
            aofp: AofpConfig::default(),
            baseline: BaselineConfig::default(),
            redesign: RedesignConfig::default(),
            checkpoint: None,
            output_dir: PathBuf::from("aofp-out"),
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Copies the run seed into every stage.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.dataset.seed = c.seed;
        c.train.seed = c.seed;
        c.aofp.seed = c.seed;
        if let Some(ft) = c.aofp.finetune.as_mut() {
            ft.seed = c.seed;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.assessment_size == 0 {
            return Err(Error::Config("the assessment set must not be empty".into()));
        }
        self.train.validate()?;
        self.aofp.validate()?;
        if !(self.redesign.scale > 0.0 && self.redesign.tolerance >= 0.0) {
            return Err(Error::Config("redesign scale must be positive and tolerance non-negative".into()));
        }
        Ok(())
    }
}

/// Sets a field from a `--key value` flag. Dashes in the key become
/// underscores; dotted keys address nested fields, plain keys match a
/// top-level field first and otherwise the unique nested field of that
/// name. The value is read as JSON, falling back to a plain string.
pub fn apply_override(config: &mut Value, key: &str, raw: &str) -> Result<()> {
    let key = key.trim_start_matches('-').replace('-', "_");
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let path: Vec<String> = if key.contains('.') {
        key.split('.').map(str::to_string).collect()
    } else if config.get(&key).is_some() {
        vec![key.clone()]
    } else {
        let mut found = Vec::new();
        find_key(config, &key, &mut Vec::new(), &mut found);
        match found.len() {
            1 => found.pop().expect("one match"),
            0 => return Err(Error::Config(format!("unknown option --{key}"))),
            _ => return Err(Error::Config(format!("option --{key} is ambiguous; use a dotted path"))),
        }
    };
    let mut slot = config;
    for (i, part) in path.iter().enumerate() {
        let obj = slot
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("--{key}: {part} is not inside an object")))?;
        if i + 1 == path.len() {
            obj.insert(part.clone(), value);
            return Ok(());
        }
        slot = obj.entry(part.clone()).or_insert_with(|| json!({}));
        if slot.is_null() {
            *slot = json!({});
        }
    }
    Ok(())
}

fn find_key(v: &Value, key: &str, prefix: &mut Vec<String>, found: &mut Vec<Vec<String>>) {
    if let Value::Object(map) = v {
        for (k, child) in map {
            prefix.push(k.clone());
            if k == key {
                found.push(prefix.clone());
            }
            find_key(child, key, prefix, found);
            prefix.pop();
        }
    }
}

/// Single-example shape and class count the dataset will produce.
pub fn dataset_geometry(desc: &DatasetDescriptor) -> ([usize; 3], usize) {
    let ds = desc.downsample.max(1);
    match desc.kind {
        DatasetKind::Synthetic => {
            let s = &desc.synthetic;
            ([s.height / ds, s.width / ds, s.channels], s.classes)
        }
        DatasetKind::CifarBin => ([32 / ds, 32 / ds, 3], 10),
        DatasetKind::Idx => ([28 / ds, 28 / ds, 1], 10),
    }
}

pub fn build_spec(arch: &Architecture, input_shape: [usize; 3], classes: usize) -> Result<NetworkSpec> {
    if let Some(path) = &arch.spec_path {
        let spec = NetworkSpec::from_json(&std::fs::read_to_string(path)?)?;
        spec.topology()?;
        return Ok(spec);
    }
    let w = arch.widths.as_deref();
    match arch.preset {
        Preset::VggSmall => vgg_small(input_shape, classes, w.unwrap_or(&VGG_SMALL_WIDTHS)),
        Preset::Vgg16Cifar => build_vgg_cifar(w.unwrap_or(&VGG16_CIFAR_WIDTHS)),
        Preset::ThreeConv => build_three_conv(input_shape, classes, w.unwrap_or(&[16, 32, 32])),
        Preset::SmallResnet => build_small_resnet(&ResNetConfig {
            input_shape,
            classes,
            stage_widths: w.map_or_else(|| vec![16, 32, 64], <[usize]>::to_vec),
            blocks_per_stage: arch.blocks_per_stage,
        }),
    }
}

fn write_json(path: &Path, v: &impl Serialize) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(v)?.as_bytes())
}

fn write_with(path: &Path, f: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
    let mut buf = Vec::new();
    f(&mut buf)?;
    write_atomic(path, &buf)
}

struct Model {
    net: Network,
    params: ModelParams,
    /// Steps taken when the model was trained in this run.
    trained_steps: Option<usize>,
}

/// Loads `cfg.checkpoint` or trains a fresh model (saving it under
/// `out/base`).
fn base_model(cfg: &RunConfig, splits: &Splits, out: &Path) -> Result<Model> {
    if let Some(dir) = &cfg.checkpoint {
        let ck = load_checkpoint(dir)?;
        return Ok(Model { net: Network::new(ck.spec)?, params: ck.params, trained_steps: None });
    }
    let spec = build_spec(&cfg.architecture, splits.train.example_shape(), splits.train.classes())?;
    let net = Network::new(spec)?;
    let o = train(&net, None, &splits.train, &cfg.train)?;
    write_with(&out.join("train_log.csv"), |b| write_step_csv(&o.log, b))?;
    let ck = Checkpoint {
        spec: net.spec().clone(),
        params: o.params.clone(),
        metadata: TrainingMetadata { step: o.steps, rng: Some(RngState::capture(&o.rng)) },
    };
    save_checkpoint(&out.join("base"), &ck)?;
    Ok(Model { net, params: o.params, trained_steps: Some(o.steps) })
}

fn report(e: &EvalReport) -> Value {
    json!({ "top1": e.top1, "loss": e.loss, "count": e.count })
}

/// Runs the configured pipeline, writing artifacts under `output_dir`, and
/// returns a JSON summary (also stored as `report.json`).
pub fn run_pipeline(cfg: &RunConfig) -> Result<Value> {
    let cfg = cfg.resolved();
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    std::fs::create_dir_all(&out)?;
    write_json(&out.join("config.json"), &cfg)?;
    let result = match cfg.pipeline {
        Pipeline::Flops => flops_pipeline(&cfg),
        Pipeline::Train => train_pipeline(&cfg, &out),
        Pipeline::Eval => eval_pipeline(&cfg),
        Pipeline::Prune => prune_pipeline(&cfg, &out),
        Pipeline::PruneBaseline => baseline_pipeline(&cfg, &out),
        Pipeline::Redesign => redesign_pipeline(&cfg, &out),
    };
    match result {
        Ok(mut summary) => {
            summary["pipeline"] = json!(cfg.pipeline.name());
            summary["status"] = json!("complete");
            write_json(&out.join("report.json"), &summary)?;
            Ok(summary)
        }
        Err(e) => {
            // flag whatever was written so far as partial
            let _ = write_json(
                &out.join("report.json"),
                &json!({ "pipeline": cfg.pipeline.name(), "status": "failed", "error": e.to_string() }),
            );
            Err(e)
        }
    }
}

fn flops_pipeline(cfg: &RunConfig) -> Result<Value> {
    let (shape, classes) = match cfg.architecture.preset {
        Preset::Vgg16Cifar => ([32, 32, 3], 10),
        _ => dataset_geometry(&cfg.dataset),
    };
    let spec = build_spec(&cfg.architecture, shape, classes)?;
    let per_layer: Vec<Value> = layer_flops(&spec)?
        .into_iter()
        .enumerate()
        .filter(|&(_, f)| f > 0)
        .map(|(id, f)| json!({ "layer": id, "width": spec.layers[id].width, "flops": f }))
        .collect();
    Ok(json!({ "flops": flops_of(&spec)?, "layers": per_layer }))
}

fn train_pipeline(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let splits = load_dataset(&cfg.dataset)?;
    let spec = build_spec(&cfg.architecture, splits.train.example_shape(), splits.train.classes())?;
    let net = Network::new(spec)?;
    let o = match &cfg.checkpoint {
        Some(dir) => finetune(&net, load_checkpoint(dir)?.params, &splits.train, &cfg.train)?,
        None => train(&net, None, &splits.train, &cfg.train)?,
    };
    write_with(&out.join("train_log.csv"), |b| write_step_csv(&o.log, b))?;
    let ev = evaluate(&net, &o.params, &splits.eval, None)?;
    save_checkpoint(
        &out.join("model"),
        &Checkpoint {
            spec: net.spec().clone(),
            params: o.params,
            metadata: TrainingMetadata { step: o.steps, rng: Some(RngState::capture(&o.rng)) },
        },
    )?;
    Ok(json!({ "steps": o.steps, "flops": flops_of(net.spec())?, "eval": report(&ev) }))
}

fn eval_pipeline(cfg: &RunConfig) -> Result<Value> {
    let dir = cfg
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("eval needs a checkpoint".into()))?;
    let ck = load_checkpoint(dir)?;
    let splits = load_dataset(&cfg.dataset)?;
    let net = Network::new(ck.spec)?;
    Ok(json!({ "eval": report(&evaluate(&net, &ck.params, &splits.eval, None)?) }))
}

/// Search, equivalence check, reconstruction and finetuning for `model`.
fn prune_model(model: &Model, splits: &Splits, aofp: &AofpConfig, out: &Path) -> Result<(NetworkSpec, ModelParams, Value)> {
    let base_eval = evaluate(&model.net, &model.params, &splits.eval, None)?;
    let search = aofp_search(&model.net, model.params.clone(), &splits.train, aofp)?;
    write_with(&out.join("trajectory.csv"), |b| write_trajectory_csv(&search.trajectory, b))?;
    write_with(&out.join("moves.json"), |b| write_moves_json(&search.trajectory, b))?;
    let (spec, pruned) = reconstruct(&model.net, &search.params, &search.masks)?;
    let pruned_net = Network::new(spec.clone())?;
    let masked_eval = evaluate(&model.net, &search.params, &splits.eval, Some(&search.masks))?;
    let mut max_logit_diff = 0.0f64;
    for chunk in splits.eval.chunks(256) {
        let (images, _) = chunk?;
        let a = model.net.predict(&search.params, &images, Some(&search.masks))?;
        let b = pruned_net.predict(&pruned, &images, None)?;
        max_logit_diff = max_logit_diff.max(a.max_abs_diff(&b));
    }
    let (params, finetune_steps) = match &aofp.finetune {
        Some(ft) => {
            let o = finetune(&pruned_net, pruned, &splits.train, ft)?;
            write_with(&out.join("finetune_log.csv"), |b| write_step_csv(&o.log, b))?;
            (o.params, o.steps)
        }
        None => (pruned, 0),
    };
    let final_eval = evaluate(&pruned_net, &params, &splits.eval, None)?;
    let last_move_flops = match search.trajectory.rows.iter().rev().filter(|r| r.move_granularity > 0).nth(1) {
        Some(prev) => prev.flops_effective - search.final_flops,
        None => search.base_flops - search.final_flops,
    };
    save_checkpoint(
        &out.join("pruned"),
        &Checkpoint {
            spec: spec.clone(),
            params: params.clone(),
            metadata: TrainingMetadata { step: search.steps + finetune_steps, rng: None },
        },
    )?;
    write_atomic(&out.join("pruned_spec.json"), spec.to_json()?.as_bytes())?;
    let summary = json!({
        "base_flops": search.base_flops,
        "final_flops": search.final_flops,
        "reduction": search.reduction,
        "target": aofp.target_flops_drop,
        "reached_target": search.reached_target,
        "last_move_flops": last_move_flops,
        "search_steps": search.steps,
        "moves": search.trajectory.moves.len(),
        "widths": spec.conv_layers().map(|l| l.width).collect::<Vec<_>>(),
        "masked_reconstructed_max_logit_diff": max_logit_diff,
        "base_eval": report(&base_eval),
        "masked_eval": report(&masked_eval),
        "final_eval": report(&final_eval),
    });
    Ok((spec, params, summary))
}

fn prune_pipeline(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let splits = load_dataset(&cfg.dataset)?;
    let model = base_model(cfg, &splits, out)?;
    let (_, _, mut summary) = prune_model(&model, &splits, &cfg.aofp, out)?;
    summary["base_trained_steps"] = json!(model.trained_steps);
    Ok(summary)
}

fn baseline_pipeline(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let splits = load_dataset(&cfg.dataset)?;
    let model = base_model(cfg, &splits, out)?;
    let layer = match cfg.baseline.layer {
        Some(l) => l,
        None => *model
            .net
            .spec()
            .prunable_layers()
            .first()
            .ok_or_else(|| Error::InvalidSpec("network has no prunable layer".into()))?,
    };
    let q = cfg.baseline.q.unwrap_or(model.net.width(layer).saturating_sub(1));
    let gamma = splits.assessment.len();
    let needs_10x = cfg.baseline.methods.contains(&Method::Oracle10x);
    // the regular assessment set is the first tenth of the large one
    let (small, big) = if needs_10x {
        if gamma < 10 {
            return Err(Error::Config("oracle_10x needs an assessment set of at least 10 examples".into()));
        }
        (splits.assessment.subset(&(0..gamma / 10).collect::<Vec<_>>())?, Some(&splits.assessment))
    } else {
        (splits.assessment.clone(), None)
    };
    let data = CurveData { assessment: &small, assessment_10x: big, eval: &splits.eval };
    let ccfg = CurveConfig { q, aofp_batch: cfg.baseline.aofp_batch, seed: cfg.seed };
    let curves = cfg
        .baseline
        .methods
        .iter()
        .map(|&m| pruning_curve(&model.net, &model.params, layer, m, data, ccfg))
        .collect::<Result<Vec<_>>>()?;
    write_with(&out.join("curves.csv"), |b| write_curves_csv(&curves, b))?;
    let auc: serde_json::Map<String, Value> = curves.iter().map(|c| (c.method.name().to_string(), json!(c.auc()))).collect();
    Ok(json!({ "layer": layer, "q": q, "assessment_size": small.len(), "auc": auc }))
}

fn redesign_pipeline(cfg: &RunConfig, out: &Path) -> Result<Value> {
    let splits = load_dataset(&cfg.dataset)?;
    let original = build_spec(&cfg.architecture, splits.train.example_shape(), splits.train.classes())?;
    let scaled = scale_widths(&original, cfg.redesign.scale)?;
    let (f_orig, f_scaled) = (flops_of(&original)? as f64, flops_of(&scaled)? as f64);
    let net = Network::new(scaled)?;
    let o = train(&net, None, &splits.train, &cfg.train)?;
    write_with(&out.join("train_log.csv"), |b| write_step_csv(&o.log, b))?;
    let model = Model { net, params: o.params, trained_steps: Some(o.steps) };
    let mut aofp = cfg.aofp.clone();
    if f_scaled <= f_orig {
        return Err(Error::Config(format!("scale {} does not enlarge the network", cfg.redesign.scale)));
    }
    aofp.target_flops_drop = 1.0 - f_orig / f_scaled;
    aofp.max_overshoot = Some(cfg.redesign.tolerance * f_orig / f_scaled);
    let (spec, _, mut summary) = prune_model(&model, &splits, &aofp, out)?;
    let f_final = flops_of(&spec)? as f64;
    summary["original_flops"] = json!(f_orig as u64);
    summary["scaled_flops"] = json!(f_scaled as u64);
    summary["flops_ratio_to_original"] = json!(f_final / f_orig);
    summary["scale"] = json!(cfg.redesign.scale);
    if cfg.redesign.compare_baseline {
        let base_net = Network::new(original)?;
        let o = train(&base_net, None, &splits.train, &cfg.train)?;
        write_with(&out.join("baseline_train_log.csv"), |b| write_step_csv(&o.log, b))?;
        summary["baseline_eval"] = report(&evaluate(&base_net, &o.params, &splits.eval, None)?);
    }
    Ok(summary)
}
