//! Throwaway tuning probe (not part of the suite).

use std::path::Path;
use std::time::Instant;

use mamo_core::metrics::{depth_metrics, temporal_consistency};
use mamo_core::model::{ArchConfig, ModelParams};
use mamo_core::pipeline::{
    infer_stream, load_checkpoint, save_checkpoint, train, StreamOptions, TrainConfig,
};
use mamo_core::synthdata::{benchmark_scenes, ClipSource, Scene};
use mamo_core::Tensor;

fn to64(t: &Tensor<f32>, shape: Vec<usize>) -> Tensor<f64> {
    Tensor::new(shape, t.data().iter().map(|&v| v as f64).collect()).unwrap()
}

fn eval_model(
    params: &ModelParams<f32>,
    scenes: &[Scene],
    opts: &StreamOptions,
    verbose: bool,
) -> (f64, f64, f64) {
    let (mut rmse_acc, mut n) = (0.0, 0);
    let (mut atc_acc, mut rtc_acc, mut seqs) = (0.0, 0.0, 0);
    for sc in scenes {
        let (h, w) = (sc.height(), sc.width());
        let frames: Vec<Tensor<f32>> = (0..sc.frames()).map(|t| sc.image(t).unwrap()).collect();
        let flows: Vec<_> = (0..sc.frames() - 1)
            .map(|t| sc.flow(t + 1, t).unwrap())
            .collect();
        let out = infer_stream(params, &frames, &flows, opts.clone()).unwrap();
        if verbose && seqs == 0 {
            let ls: Vec<String> = out
                .updates
                .iter()
                .map(|(t, s)| format!("t{t}:{:.3e}", s.loss))
                .collect();
            println!("  update losses: {}", ls.join(" "));
        }
        let mut depths64 = Vec::new();
        for (t, d) in out.depths.iter().enumerate() {
            let pred = to64(d, vec![h * w]);
            let gt = to64(&sc.depth(t).unwrap(), vec![h * w]);
            rmse_acc += depth_metrics(&pred, &gt, None, 1e-6, None).unwrap().rmse;
            n += 1;
            depths64.push(to64(d, vec![1, h, w]));
        }
        let flows64: Vec<_> = flows.iter().map(|f| f.cast::<f64>()).collect();
        let tc = temporal_consistency(&depths64, &flows64, None, 1.25).unwrap();
        atc_acc += tc.atc;
        rtc_acc += tc.rtc;
        seqs += 1;
    }
    (
        rmse_acc / n as f64,
        atc_acc / seqs as f64,
        rtc_acc / seqs as f64,
    )
}

fn with_memory_lr(p: &ModelParams<f32>, lr: f64) -> ModelParams<f32> {
    let mut arch = p.arch().clone();
    arch.memory_lr = lr;
    let mut q = ModelParams::init(arch, 0).unwrap();
    for (n, t) in p.iter() {
        q.set(n, t.clone()).unwrap();
    }
    q
}

fn train_or_load(
    tag: &str,
    sources: &[&dyn ClipSource],
    arch: &ArchConfig,
    cfg: &TrainConfig,
) -> ModelParams<f32> {
    let path = format!("/tmp/probe_{tag}.ckpt");
    if Path::new(&path).exists() {
        return load_checkpoint::<f32>(Path::new(&path)).unwrap().params;
    }
    let t0 = Instant::now();
    let r = train::<f32>(sources, arch, cfg).unwrap();
    println!(
        "{tag} train {:.0}s losses {:?}",
        t0.elapsed().as_secs_f64(),
        r.trace
            .epoch_loss
            .iter()
            .map(|l| (l * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );
    save_checkpoint(Path::new(&path), &r.checkpoint).unwrap();
    r.checkpoint.params
}

#[test]
#[ignore]
fn memlr_sweep() {
    let arch = ArchConfig::default();
    let train_scenes = benchmark_scenes(8, 64, 64, 9, 0xBEEF).unwrap();
    let test_scenes = benchmark_scenes(3, 64, 64, 9, 0xFEED).unwrap();
    let sources: Vec<&dyn ClipSource> =
        train_scenes.iter().map(|s| s as &dyn ClipSource).collect();

    let mut base = TrainConfig::default();
    base.epochs = 16;
    base.seq_len = 8;
    base.warmup_epochs = Some(2);
    base.lr_start = 1e-2;
    base.lr_end = 1e-3;
    base.seed = 42;

    let mut cfg_nm = base.clone();
    cfg_nm.options.switches.use_memory = false;
    let nm = train_or_load("nm", &sources, &arch, &cfg_nm);
    let mut arch_full = arch.clone();
    arch_full.memory_lr = 150.0;
    let full = train_or_load("full", &sources, &arch_full, &base);

    let mut opts_nm = StreamOptions::default();
    opts_nm.switches.use_memory = false;
    let r = eval_model(&nm, &test_scenes, &opts_nm, false);
    println!("no-mem eval: rmse {:.4} atc {:.4} rtc {:.4}", r.0, r.1, r.2);

    let opts_full = StreamOptions::default();
    for lr in [0.0, 50.0, 150.0, 500.0, 1500.0] {
        let p = with_memory_lr(&full, lr);
        let r = eval_model(&p, &test_scenes, &opts_full, lr == 150.0);
        println!(
            "full mem_lr {lr}: rmse {:.4} atc {:.4} rtc {:.4}",
            r.0, r.1, r.2
        );
    }
    let mut opts_slide = StreamOptions::default();
    opts_slide.sliding_window = true;
    let r = eval_model(&full, &test_scenes, &opts_slide, false);
    println!("full sliding: rmse {:.4} atc {:.4} rtc {:.4}", r.0, r.1, r.2);
}
