use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::ops::ControlFlow;
use std::path::Path;
use std::time::Instant;

use igpn::data::{fuse_scores, load_dataset, save_dataset, synth_generate, Dataset, ScoreFile, ScoreRow, Split, Stream, SynthSpec};
use igpn::gradcheck::{run_suite, TOLERANCE};
use igpn::model::{build_model, count_flops, load_checkpoint, save_checkpoint, Model, ModelConfig};
use igpn::skeleton::{builtin, TopologyDoc, TopologyRef, BUILTIN_TOPOLOGIES};
use igpn::train::{predict_scores, train_loop, write_metrics_csv, TrainConfig};
use igpn::{Error, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{DumpArgs, EvalArgs, ExportArgs, FlopsArgs, FuseArgs, GradcheckArgs, ModelArgs, SynthArgs, TrainArgs};

/// Everything `train` needs besides the data; written back as `config.json`.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub stream: Stream,
    pub half_frames: bool,
}

fn parse<T: std::str::FromStr<Err = Error>>(value: &Option<String>) -> Result<Option<T>> {
    value.as_deref().map(str::parse).transpose()
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

/// A built-in name, or else a path to a topology JSON document.
fn topology_ref(arg: &str) -> Result<TopologyRef> {
    if BUILTIN_TOPOLOGIES.contains(&arg) {
        return Ok(TopologyRef::Name(arg.to_string()));
    }
    let path = Path::new(arg);
    if !path.exists() {
        return Err(Error::Config(format!(
            "`{arg}` is neither a built-in topology ({}) nor an existing file",
            BUILTIN_TOPOLOGIES.join(", ")
        )));
    }
    let doc: TopologyDoc = read_json(path)?;
    Ok(TopologyRef::Inline(doc))
}

fn apply_model_args(config: &mut ModelConfig, args: &ModelArgs) -> Result<()> {
    if let Some(v) = parse(&args.variant)? {
        config.variant = v;
    }
    if let Some(t) = &args.topology {
        config.topology = topology_ref(t)?;
    }
    if let Some(c) = &args.channels {
        config.channels = c.clone();
    }
    if let Some(p) = &args.pooling {
        config.pooling_locations = p.clone();
    }
    if args.no_pooling {
        config.pooling_locations.clear();
    }
    if let Some(r) = args.reduction {
        config.reduction = r;
    }
    if let Some(s) = parse(&args.sigma)? {
        config.sigma = s;
    }
    if args.no_adaptive {
        config.adaptive = false;
    }
    if args.no_residual {
        config.residual = false;
    }
    if let Some(s) = args.fusion_weight {
        config.fusion_weight = s;
    }
    if let Some(m) = parse(&args.fusion_mode)? {
        config.fusion_mode = m;
    }
    if let Some(k) = args.kernel {
        config.temporal_kernel = k;
    }
    if let Some(k) = args.classes {
        config.classes = k;
    }
    if let Some(t) = args.frames {
        config.frames = t;
    }
    if args.no_ism {
        config.ism = false;
    }
    if let Some(w) = args.ism_width {
        config.ism_width = w;
    }
    if args.no_ism_norm {
        config.ism_norm = false;
    }
    config.validate()
}

pub fn synth(args: SynthArgs) -> Result<()> {
    let mut spec: SynthSpec = match &args.config {
        Some(path) => read_json(path)?,
        None => SynthSpec::default(),
    };
    if let Some(v) = args.classes {
        spec.classes = v;
    }
    if let Some(v) = args.per_class {
        spec.per_class = v;
    }
    if let Some(v) = args.frames {
        spec.frames = v;
    }
    if let Some(t) = &args.topology {
        spec.topology = topology_ref(t)?;
    }
    if let Some(v) = args.noise {
        spec.noise = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    if let Some(s) = &args.split {
        spec.split = match s.as_str() {
            "train" => Split::Train,
            "test" => Split::Test,
            other => return Err(Error::Config(format!("unknown split `{other}` (expected train or test)"))),
        };
    }
    let dataset = synth_generate(&spec)?;
    save_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} samples ({} classes, {} frames, {}) to {}",
        dataset.samples.len(),
        dataset.classes.len(),
        spec.frames,
        spec.topology.label(),
        args.out.display()
    );
    Ok(())
}

/// Resolves defaults < config file < flags. Class count and topology follow
/// the training data unless set explicitly.
fn resolve_run(args: &TrainArgs, data: &Dataset) -> Result<RunConfig> {
    let (mut run, file) = match &args.config {
        Some(path) => {
            let value: serde_json::Value = read_json(path)?;
            (serde_json::from_value::<RunConfig>(value.clone())?, Some(value))
        }
        None => (RunConfig::default(), None),
    };
    let file_sets = |key: &str| file.as_ref().and_then(|v| v.get("model")).and_then(|m| m.get(key)).is_some();
    if !file_sets("classes") {
        run.model.classes = data.classes.len();
    }
    if !file_sets("topology") {
        run.model.topology = data.topology.clone();
    }
    if let Some(s) = parse(&args.stream)? {
        run.stream = s;
    }
    if args.half_frames {
        run.half_frames = true;
    }
    apply_model_args(&mut run.model, &args.model)?;
    if run.half_frames {
        run.model.frames = (run.model.frames / 2).max(1);
        run.half_frames = false;
    }
    let t = &mut run.train;
    if let Some(v) = args.epochs {
        t.epochs = v;
    }
    if let Some(v) = args.lr {
        t.base_lr = v;
    }
    if let Some(v) = args.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = args.warmup {
        t.warmup_epochs = v;
    }
    if let Some(v) = &args.decay_steps {
        t.decay_steps = v.clone();
    }
    if let Some(v) = args.weight_decay {
        t.weight_decay = v;
    }
    if let Some(v) = args.max_rotation {
        t.max_rotation = v;
    }
    if let Some(v) = args.seed {
        t.seed = v;
    }
    run.model.validate()?;
    run.train.validate()?;
    if run.model.classes != data.classes.len() {
        return Err(Error::Config(format!(
            "model has {} classes but the dataset has {}",
            run.model.classes,
            data.classes.len()
        )));
    }
    Ok(run)
}

fn score_file<T: igpn::Scalar>(model: &Model<T>, data: &Dataset, stream: Stream, batch: usize) -> Result<ScoreFile> {
    data.validate()?;
    let set = data.to_train_set::<T>(stream, model.config().frames)?;
    let scores = predict_scores(model, &set, batch)?;
    let rows = data
        .samples
        .iter()
        .zip(scores)
        .map(|(s, scores)| ScoreRow { id: s.id.clone(), label: s.label, scores })
        .collect();
    ScoreFile::new(model.config().classes, rows)
}

pub fn train(args: TrainArgs) -> Result<()> {
    let data = load_dataset(&args.data)?;
    data.validate()?;
    let eval_data = args.eval.as_deref().map(load_dataset).transpose()?;
    let run = resolve_run(&args, &data)?;
    if let Some(e) = &eval_data {
        e.validate()?;
        if e.classes.len() != data.classes.len() {
            return Err(Error::Data("evaluation and training datasets have different class counts".into()));
        }
    }
    fs::create_dir_all(&args.out)?;
    write_json(&args.out.join("config.json"), &run)?;

    let frames = run.model.frames;
    let train_set = data.to_train_set::<f32>(run.stream, frames)?;
    let eval_set = eval_data.as_ref().map(|e| e.to_train_set::<f32>(run.stream, frames)).transpose()?;
    let mut model = build_model::<f32>(&run.model, run.train.seed)?;
    let started = Instant::now();
    let metrics = train_loop(&mut model, &train_set, eval_set.as_ref(), &run.train, |m, _| {
        let eval = m.eval_acc.map_or_else(String::new, |a| format!(" eval_acc {a:.4}"));
        println!(
            "epoch {:>3} lr {:.5} loss {:.4} train_acc {:.4}{eval} ({:.1}s)",
            m.epoch + 1,
            m.lr,
            m.train_loss,
            m.train_acc,
            started.elapsed().as_secs_f64()
        );
        ControlFlow::Continue(())
    })?;

    let mut w = BufWriter::new(File::create(args.out.join("metrics.csv"))?);
    write_metrics_csv(&mut w, &metrics)?;
    w.flush()?;
    save_checkpoint(&args.out.join("model.ckpt"), &model)?;
    if let Some(e) = &eval_data {
        let scores = score_file(&model, e, run.stream, run.train.batch_size)?;
        scores.save(&args.out.join("scores.csv"))?;
        println!("eval accuracy {:.4}", scores.accuracy());
    }
    println!("wrote {}", args.out.display());
    Ok(())
}

pub fn eval(args: EvalArgs) -> Result<()> {
    if args.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let stream: Stream = args.stream.parse()?;
    let model: Model<f32> = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    if data.classes.len() != model.config().classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, checkpoint expects {}",
            data.classes.len(),
            model.config().classes
        )));
    }
    let scores = score_file(&model, &data, stream, args.batch_size)?;
    scores.save(&args.out)?;
    println!("accuracy {:.4} over {} samples", scores.accuracy(), scores.rows.len());
    Ok(())
}

pub fn flops(args: FlopsArgs) -> Result<()> {
    let mut config: ModelConfig = match &args.config {
        Some(path) => read_json(path)?,
        None => ModelConfig::default(),
    };
    apply_model_args(&mut config, &args.model)?;
    let report = count_flops(&config)?;
    let control = count_flops(&config.no_pooling_control())?;
    for (stage, macs) in report.stage_totals() {
        println!("{stage:<8} {macs:>14}");
    }
    let ratio = report.total() as f64 / control.total() as f64;
    println!("total    {:>14}", report.total());
    println!("control  {:>14}", control.total());
    println!("ratio    {ratio:>14.4}");
    if let Some(out) = &args.out {
        write_json(out, &report)?;
    }
    Ok(())
}

/// Prints one line per check; `Ok(false)` when any check exceeds the tolerance.
pub fn gradcheck(args: GradcheckArgs) -> Result<bool> {
    if args.precision != "f64" {
        return Err(Error::Config(format!("gradient checks run in f64 only, got `{}`", args.precision)));
    }
    if args.seeds == 0 {
        return Err(Error::InvalidArgument("at least one seed is required".into()));
    }
    let started = Instant::now();
    let results = run_suite(args.seeds)?;
    for r in &results {
        println!(
            "{} {:<28} max_rel_error {:.3e} ({} seeds, {:.2}s)",
            if r.passed() { "PASS" } else { "FAIL" },
            r.name,
            r.max_rel_error,
            r.seeds,
            r.elapsed.as_secs_f64()
        );
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!(
        "{} checks, {failed} failed, tolerance {TOLERANCE:e}, {:.1}s",
        results.len(),
        started.elapsed().as_secs_f64()
    );
    Ok(failed == 0)
}

pub fn fuse(args: FuseArgs) -> Result<()> {
    let files = args.scores.iter().map(|p| ScoreFile::load(p)).collect::<Result<Vec<_>>>()?;
    let weights = args.weights.unwrap_or_else(|| vec![1.0; files.len()]);
    let (accuracy, fused) = fuse_scores(&files, &weights)?;
    for (path, f) in args.scores.iter().zip(&files) {
        println!("{:<40} {:.4}", path.display(), f.accuracy());
    }
    println!("fused accuracy {accuracy:.4}");
    fused.save(&args.out)?;
    Ok(())
}

pub fn export_topology(args: ExportArgs) -> Result<()> {
    let topology = builtin(&args.topology)?;
    write_json(&args.out, &topology.to_doc())?;
    println!("wrote {} ({} joints) to {}", args.topology, topology.node_count, args.out.display());
    Ok(())
}

pub fn dump_attention(args: DumpArgs) -> Result<()> {
    let stream: Stream = args.stream.parse()?;
    let model: Model<f64> = load_checkpoint(&args.checkpoint)?;
    let data = load_dataset(&args.data)?;
    data.validate()?;
    let set = data.to_train_set::<f64>(stream, model.config().frames)?;
    let mut w = BufWriter::new(File::create(&args.out)?);
    writeln!(w, "id,site,frame,node,value")?;
    let mut rows = 0usize;
    for (sample, input) in data.samples.iter().zip(&set.inputs).take(args.limit) {
        let mut shape = vec![1];
        shape.extend_from_slice(input.shape());
        let x = input.reshape(&shape)?;
        let (_, records) = model.attention(&x)?;
        for record in records {
            let (t, n) = (record.values.shape()[1], record.values.shape()[2]);
            for (k, v) in record.values.data().iter().enumerate() {
                writeln!(w, "{},{},{},{},{}", sample.id, record.label, k / n % t, k % n, v)?;
                rows += 1;
            }
        }
    }
    w.flush()?;
    println!("wrote {rows} rows to {}", args.out.display());
    Ok(())
}
