//! Command-line driver: dataset generation, training, streaming inference,
//! evaluation and the self-test suites, glued together so every experiment
//! in the ablation matrix is a shell one-liner.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mamo_core::config::KvMap;
use mamo_core::flow::{load_flo, FlowDirection, FlowField};
use mamo_core::metrics::{depth_metrics, format_pairs, temporal_consistency};
use mamo_core::model::{ArchConfig, ModelParams};
use mamo_core::pipeline::{
    infer_stream, load_checkpoint, save_checkpoint, train, Checkpoint, StreamOptions, TrainConfig,
};
use mamo_core::synthdata::{
    benchmark_scenes, read_blob_file, read_dataset, write_blob_file, write_dataset, write_pgm16,
    ClipSource,
};
use mamo_core::Tensor;

#[derive(Parser)]
#[command(
    name = "mamo",
    version,
    about = "Streaming video depth with a gradient-refined token memory"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render a synthetic benchmark dataset with exact depth and flow.
    GenData(GenDataArgs),
    /// Train a model on a generated dataset; writes checkpoint + loss trace.
    Train(TrainArgs),
    /// Run streaming inference over one sequence directory.
    Infer(InferArgs),
    /// Score predicted depth against ground truth.
    Eval(EvalArgs),
    /// Run the oracle-equivalence and gradient-check suites.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Base RNG seed; every scene derives from it deterministically.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scene-family config file (keys: scenes, width, height, frames, strides).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Number of sequences.
    #[arg(long)]
    scenes: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Frames per sequence.
    #[arg(long)]
    frames: Option<usize>,
    /// Extra backward-flow strides to materialize, comma separated (for
    /// strided subsampling at train time), e.g. "2,3,4".
    #[arg(long)]
    strides: Option<String>,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory written by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint output path; the loss trace lands next to it.
    #[arg(long)]
    out: PathBuf,
    /// Config file; any training or architecture key. Flags win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Clip length T (a clip spans T+1 frames).
    #[arg(long)]
    seq_len: Option<usize>,
    #[arg(long)]
    lr_start: Option<f64>,
    #[arg(long)]
    lr_end: Option<f64>,
    /// Largest frame stride drawn when subsampling clips.
    #[arg(long)]
    drop_rate_max: Option<usize>,
    /// Leading epochs trained with the memory path disabled.
    #[arg(long)]
    warmup_epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Memory length L (token pairs kept).
    #[arg(long)]
    mem_length: Option<usize>,
    /// Channels per visual token.
    #[arg(long)]
    token_channels: Option<usize>,
    /// Step size of the test-time memory refinement.
    #[arg(long)]
    mem_lr: Option<f64>,
    /// Attention heads in the memory blocks.
    #[arg(long)]
    heads: Option<usize>,
    /// Decoder upsampling stages.
    #[arg(long)]
    decoder_scales: Option<usize>,
    /// Train without the token memory (pure monocular network).
    #[arg(long)]
    no_memory: bool,
    /// Drop the previous-frame feature carry.
    #[arg(long)]
    no_carry: bool,
    /// Drop the displacement-token pathway.
    #[arg(long)]
    no_flow_decoder: bool,
    /// Slide the memory without gradient refinement.
    #[arg(long)]
    sliding_window: bool,
}

#[derive(Args)]
struct InferArgs {
    /// Checkpoint produced by train.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Sequence directory (img_{t}.f32 plus flow_bw_{t}.flo for t >= 1).
    #[arg(long)]
    seq: PathBuf,
    /// Output directory for depth maps and the event log.
    #[arg(long)]
    out: PathBuf,
    /// Override the refinement step size stored in the checkpoint.
    #[arg(long)]
    mem_lr: Option<f64>,
    #[arg(long)]
    no_memory: bool,
    #[arg(long)]
    no_carry: bool,
    #[arg(long)]
    no_flow_decoder: bool,
    #[arg(long)]
    sliding_window: bool,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of predicted depth_{t}.f32 maps (infer output).
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth sequence directory (depth_{t}.f32, optional flows).
    #[arg(long)]
    gt: PathBuf,
    /// Report file; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Depth cap: ground truth beyond it is skipped, predictions clipped.
    #[arg(long)]
    cap: Option<f64>,
    /// Ratio threshold of the temporal consistency and delta metrics.
    #[arg(long, default_value_t = 1.25)]
    thr: f64,
}

#[derive(Args)]
struct SelftestArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seeds per gradient-check case.
    #[arg(long, default_value_t = 3)]
    gradcheck_seeds: usize,
    /// Coordinates probed per gradient-check case and seed.
    #[arg(long, default_value_t = 12)]
    gradcheck_coords: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let r = match cli.cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Train(a) => run_train(a),
        Cmd::Infer(a) => run_infer(a),
        Cmd::Eval(a) => run_eval(a),
        Cmd::Selftest(a) => run_selftest(a),
    };
    match r {
        Ok(code) => code,
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn read_config(path: &Option<PathBuf>) -> Result<KvMap, String> {
    match path {
        None => Ok(KvMap::new()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| format!("cannot read config {}: {e}", p.display()))?;
            KvMap::parse(&text).map_err(|e| format!("config {}: {e}", p.display()))
        }
    }
}

fn gen_data(a: GenDataArgs) -> Result<ExitCode, String> {
    let file = read_config(&a.config)?;
    file.reject_unknown(&["scenes", "width", "height", "frames", "strides"])
        .map_err(|e| e.to_string())?;
    let get = |key: &str, flag: Option<usize>, dflt: usize| -> Result<usize, String> {
        if let Some(v) = flag {
            return Ok(v);
        }
        file.get_parsed(key, "integer")
            .map_err(|e| e.to_string())
            .map(|v| v.unwrap_or(dflt))
    };
    let scenes = get("scenes", a.scenes, 8)?;
    let width = get("width", a.width, 64)?;
    let height = get("height", a.height, 64)?;
    let frames = get("frames", a.frames, 9)?;
    let strides_text = a
        .strides
        .or_else(|| file.get("strides").map(str::to_string))
        .unwrap_or_else(|| "2,3,4".to_string());
    let mut strides = Vec::new();
    for part in strides_text.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let r: usize = part
            .parse()
            .map_err(|_| format!("bad stride {part:?} in {strides_text:?}"))?;
        if r < 2 {
            return Err(format!("stride {r} must be at least 2"));
        }
        strides.push(r);
    }
    let built = benchmark_scenes(scenes, width, height, frames, a.seed)
        .map_err(|e| format!("scene generation: {e}"))?;
    let mut records = Vec::with_capacity(built.len());
    for sc in &built {
        records.push(
            sc.records(&strides)
                .map_err(|e| format!("scene rendering: {e}"))?,
        );
    }
    write_dataset(&records, &a.out).map_err(|e| format!("writing dataset: {e}"))?;
    println!(
        "wrote {scenes} sequences of {frames} frames at {width}x{height} to {}",
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Folds config file plus command-line flags into (arch, train config),
/// flags winning over file keys.
fn resolve_train_config(a: &TrainArgs) -> Result<(ArchConfig, TrainConfig), String> {
    let mut kv = read_config(&a.config)?;

    let mut flags = KvMap::new();
    macro_rules! put {
        ($key:literal, $val:expr) => {
            if let Some(v) = $val {
                flags.set($key, v);
            }
        };
    }
    put!("seed", a.seed);
    put!("epochs", a.epochs);
    put!("seq_len", a.seq_len);
    put!("lr_start", a.lr_start);
    put!("lr_end", a.lr_end);
    put!("subsample_max", a.drop_rate_max);
    put!("warmup_epochs", a.warmup_epochs);
    put!("batch_size", a.batch_size);
    put!("memory_length", a.mem_length);
    put!("token_channels", a.token_channels);
    put!("memory_lr", a.mem_lr);
    put!("heads", a.heads);
    put!("decoder_scales", a.decoder_scales);
    if a.no_memory {
        flags.set("no_memory", true);
    }
    if a.no_carry {
        flags.set("no_carry", true);
    }
    if a.no_flow_decoder {
        flags.set("no_flow_decoder", true);
    }
    if a.sliding_window {
        flags.set("sliding_window", true);
    }
    kv.merge_from(&flags);

    let mut cfg = TrainConfig::default();
    cfg.apply_kv(&kv).map_err(|e| e.to_string())?;
    let mut arch_kv = KvMap::new();
    for key in mamo_core::model::ARCH_KEYS {
        if let Some(v) = kv.get(key) {
            arch_kv.set(key, v);
        }
    }
    let mut arch = ArchConfig::default();
    arch.apply_kv(&arch_kv).map_err(|e| e.to_string())?;
    Ok((arch, cfg))
}

fn run_train(a: TrainArgs) -> Result<ExitCode, String> {
    let (arch, cfg) = resolve_train_config(&a)?;
    let sequences = read_dataset(&a.data).map_err(|e| format!("reading dataset: {e}"))?;
    if sequences.is_empty() {
        return Err(format!("dataset {} holds no sequences", a.data.display()));
    }
    let sources: Vec<&dyn ClipSource> = sequences.iter().map(|s| s as &dyn ClipSource).collect();
    let result = train::<f32>(&sources, &arch, &cfg).map_err(|e| format!("training: {e}"))?;
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| format!("creating {}: {e}", dir.display()))?;
        }
    }
    save_checkpoint(&a.out, &result.checkpoint).map_err(|e| format!("saving checkpoint: {e}"))?;
    let mut trace = String::new();
    for (i, loss) in result.trace.epoch_loss.iter().enumerate() {
        writeln!(trace, "epoch={i} loss={loss:.12e}").expect("string write");
    }
    let trace_path = a.out.with_extension("trace.txt");
    fs::write(&trace_path, trace).map_err(|e| format!("writing {}: {e}", trace_path.display()))?;
    println!(
        "trained {} epochs; checkpoint {} trace {}",
        cfg.epochs,
        a.out.display(),
        trace_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

/// Reads img_{t}.f32 for t = 0.. and flow_bw_{t}.flo for t >= 1 until the
/// next image is missing.
fn read_sequence_dir(dir: &Path) -> Result<(Vec<Tensor<f32>>, Vec<FlowField<f32>>), String> {
    let mut frames = Vec::new();
    let mut flows = Vec::new();
    loop {
        let t = frames.len();
        let img = dir.join(format!("img_{t}.f32"));
        if !img.exists() {
            break;
        }
        frames.push(read_blob_file(&img).map_err(|e| format!("reading {}: {e}", img.display()))?);
        if t >= 1 {
            let fp = dir.join(format!("flow_bw_{t}.flo"));
            flows.push(
                load_flo(&fp, FlowDirection::Backward)
                    .map_err(|e| format!("reading {}: {e}", fp.display()))?,
            );
        }
    }
    if frames.is_empty() {
        return Err(format!("no img_0.f32 under {}", dir.display()));
    }
    Ok((frames, flows))
}

/// Rebuilds the parameter set under an adjusted refinement step size.
fn override_mem_lr(params: &ModelParams<f32>, lr: f64) -> Result<ModelParams<f32>, String> {
    let mut arch = params.arch().clone();
    arch.memory_lr = lr;
    let mut next = ModelParams::init(arch, 0).map_err(|e| e.to_string())?;
    for (name, tensor) in params.iter() {
        next.set(name, tensor.clone()).map_err(|e| e.to_string())?;
    }
    Ok(next)
}

fn run_infer(a: InferArgs) -> Result<ExitCode, String> {
    let ck: Checkpoint<f32> =
        load_checkpoint(&a.checkpoint).map_err(|e| format!("loading checkpoint: {e}"))?;
    let mut params = ck.params;
    if let Some(lr) = a.mem_lr {
        params = override_mem_lr(&params, lr)?;
    }
    let (frames, flows) = read_sequence_dir(&a.seq)?;
    let mut opts = StreamOptions::default();
    opts.switches.use_memory = !a.no_memory;
    opts.switches.use_carry = !a.no_carry;
    opts.switches.use_flow = !a.no_flow_decoder;
    opts.sliding_window = a.sliding_window;
    let out = infer_stream(&params, &frames, &flows, opts).map_err(|e| format!("inference: {e}"))?;
    fs::create_dir_all(&a.out).map_err(|e| format!("creating {}: {e}", a.out.display()))?;
    for (t, d) in out.depths.iter().enumerate() {
        let (h, w) = (d.shape()[2], d.shape()[3]);
        let flat = Tensor::new(vec![h, w], d.data().to_vec()).expect("depth reshape");
        write_blob_file(&a.out.join(format!("depth_{t}.f32")), "depth", &flat)
            .map_err(|e| format!("writing depth blob: {e}"))?;
        let peak = flat.data().iter().cloned().fold(0.0f32, f32::max).max(1e-6);
        write_pgm16(&a.out.join(format!("depth_{t}.pgm")), flat.data(), w, h, peak)
            .map_err(|e| format!("writing depth preview: {e}"))?;
    }
    let log_path = a.out.join("events.log");
    let mut text = out.events.lines().join("\n");
    text.push('\n');
    fs::write(&log_path, text).map_err(|e| format!("writing {}: {e}", log_path.display()))?;
    println!(
        "wrote {} depth maps and {} to {}",
        out.depths.len(),
        log_path.display(),
        a.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn run_eval(a: EvalArgs) -> Result<ExitCode, String> {
    if let Some(cap) = a.cap {
        if !(cap > 0.0) {
            return Err(format!("cap must be positive, got {cap}"));
        }
    }
    if !(a.thr > 1.0) {
        return Err(format!("thr must exceed 1, got {}", a.thr));
    }
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    loop {
        let t = preds.len();
        let pp = a.pred.join(format!("depth_{t}.f32"));
        if !pp.exists() {
            break;
        }
        let p = read_blob_file(&pp).map_err(|e| format!("reading {}: {e}", pp.display()))?;
        let gp = a.gt.join(format!("depth_{t}.f32"));
        let g = read_blob_file(&gp).map_err(|e| format!("reading {}: {e}", gp.display()))?;
        if p.shape() != g.shape() {
            return Err(format!(
                "frame {t}: prediction shape {:?} vs ground truth {:?}",
                p.shape(),
                g.shape()
            ));
        }
        preds.push(p);
        gts.push(g);
    }
    if preds.is_empty() {
        return Err(format!("no depth_0.f32 under {}", a.pred.display()));
    }
    let n = preds.len();
    let (h, w) = (gts[0].shape()[0], gts[0].shape()[1]);

    // pool every frame's pixels and score once, so the report does not
    // depend on how pixels were split across frames
    let to64 = |ts: &[Tensor<f32>]| -> Tensor<f64> {
        let data: Vec<f64> = ts
            .iter()
            .flat_map(|t| t.data().iter().map(|&v| v as f64))
            .collect();
        Tensor::new(vec![data.len()], data).expect("pooled depth")
    };
    let dm = depth_metrics(&to64(&preds), &to64(&gts), None, 1e-6, a.cap)
        .map_err(|e| format!("depth metrics: {e}"))?;

    let mut report = String::new();
    writeln!(report, "DepthEvalReport").expect("string write");
    writeln!(report, "frames = {n}").expect("string write");
    writeln!(report, "pixels = {}", dm.count).expect("string write");
    match a.cap {
        Some(c) => writeln!(report, "cap = {c:.6}").expect("string write"),
        None => writeln!(report, "cap = none").expect("string write"),
    }
    report.push_str(&format_pairs(&dm.to_pairs()));

    // temporal consistency needs the ground-truth flows; skip the section
    // when the directory does not carry them (e.g. single frames)
    let mut flows = Vec::new();
    for t in 1..n {
        let fp = a.gt.join(format!("flow_bw_{t}.flo"));
        if !fp.exists() {
            flows.clear();
            break;
        }
        flows.push(
            load_flo(&fp, FlowDirection::Backward)
                .map_err(|e| format!("reading {}: {e}", fp.display()))?
                .cast::<f64>(),
        );
    }
    if n >= 2 && !flows.is_empty() {
        let depths64: Vec<Tensor<f64>> = preds
            .iter()
            .map(|p| {
                Tensor::new(vec![1, h, w], p.data().iter().map(|&v| v as f64).collect())
                    .expect("depth reshape")
            })
            .collect();
        let tc = temporal_consistency(&depths64, &flows, None, a.thr)
            .map_err(|e| format!("temporal consistency: {e}"))?;
        writeln!(report, "TemporalConsistencyReport").expect("string write");
        writeln!(report, "thr = {:.6}", a.thr).expect("string write");
        writeln!(report, "frames = {}", tc.frames).expect("string write");
        writeln!(report, "atc = {:.6}", tc.atc).expect("string write");
        writeln!(report, "rtc = {:.6}", tc.rtc).expect("string write");
    }

    match &a.out {
        Some(p) => {
            fs::write(p, &report).map_err(|e| format!("writing {}: {e}", p.display()))?
        }
        None => print!("{report}"),
    }
    Ok(ExitCode::SUCCESS)
}

fn run_selftest(a: SelftestArgs) -> Result<ExitCode, String> {
    use mamo_core::verify::{all_passed, render_report, run_gradcheck_suite, run_oracle_suite};
    let oracle = run_oracle_suite(a.seed);
    print!("{}", render_report("oracle equivalence", &oracle));
    let grad = run_gradcheck_suite(a.seed, a.gradcheck_seeds, a.gradcheck_coords);
    print!("{}", render_report("gradient checks", &grad));
    if all_passed(&oracle) && all_passed(&grad) {
        println!("selftest passed");
        Ok(ExitCode::SUCCESS)
    } else {
        Err("selftest failed (see report above)".to_string())
    }
}
