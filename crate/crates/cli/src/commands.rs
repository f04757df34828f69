//! The `m2m` subcommands. Each validates its inputs before reading or
//! writing anything and writes its outputs atomically under the run's
//! output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use m2m_core::analysis::{
    bins_to_csv, difficulty_binning, nonlocality_conv, nonlocality_conv_closed_form,
    refiner_nonlocality, ConvSpec, DifficultyBin, NonlocalityReport, CONV_CSV_HEADER,
    DEFAULT_PAIRWISE_CEILING, LAYER_CSV_HEADER,
};
use m2m_core::attention::{
    additive_attention_head, checkpoint, vanilla_attention_head, HeadParams, Refiner,
    DEFAULT_VANILLA_CEILING,
};
use m2m_core::correlation::MultiChannelCorrelation;
use m2m_core::datasets::{
    grid_to_pixel, load_annotations, provide_pairs, save_dataset, EncoderParams,
    FeatureProviderConfig, PairData,
};
use m2m_core::evaluation::{load_predictions, predictions_to_json, AggregationScheme, ThresholdMode};
use m2m_core::tensor::io::{encode, write_atomic};
use m2m_core::{Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{Preset, RunConfig};
use crate::error::{CliError, Result};
use crate::eval::score_predictions;
use crate::pipeline::{correlation_var, refined_grid, PreparedPair};
use crate::train::{self, load_encoder, prepare, CHECKPOINT_DIR, ENCODER_DIR};

pub const REPORT_VERSION: u32 = 1;
pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const FLOWS_DIR: &str = "flows";
pub const PCK_CSV_FILE: &str = "pck_report.csv";
pub const PCK_JSON_FILE: &str = "pck_report.json";
pub const BENCH_CSV_FILE: &str = "bench_attn.csv";
pub const BENCH_JSON_FILE: &str = "bench_attn.json";
pub const BENCH_CSV_HEADER: &str = "kind,t,median_seconds,status,log_log_slope";
pub const NONLOCALITY_LAYERS_FILE: &str = "nonlocality_layers.csv";
pub const NONLOCALITY_BINS_FILE: &str = "nonlocality_bins.csv";
pub const NONLOCALITY_CONV_FILE: &str = "nonlocality_conv.csv";
pub const NONLOCALITY_JSON_FILE: &str = "nonlocality.json";
pub const CONV_KERNELS: [usize; 5] = [3, 5, 7, 9, 11];
pub const CONV_DIMS: [usize; 3] = [2, 4, 6];
/// Fast kernels are repeated within a trial until it lasts this long, so
/// timer resolution does not dominate the median.
pub const MIN_SAMPLE_SECONDS: f64 = 0.02;

/// Flags shared by every subcommand.
#[derive(Clone, Debug, Default)]
pub struct GlobalArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub preset: Option<Preset>,
}

impl GlobalArgs {
    /// Preset, then config file, then flags; validated, no I/O beyond
    /// reading the config file.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.preset.unwrap_or(Preset::Desk), self.config.as_deref())?;
        if let Some(seed) = self.seed {
            cfg.optim.seed = seed;
        }
        if let Some(dir) = &self.out_dir {
            cfg.out_dir = dir.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut json = serde_json::to_vec_pretty(value)?;
    json.push(b'\n');
    write_atomic(path, &json)?;
    Ok(())
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

pub fn cmd_train(cfg: &RunConfig) -> Result<Value> {
    let out = train::train(cfg)?;
    let m = &out.record.final_metrics;
    Ok(json!({
        "checkpoint": out.record.checkpoint,
        "steps": out.record.loss_curve.len(),
        "initial_loss": m.initial_loss,
        "final_loss": m.final_loss,
        "holdout_pck": m.holdout_pck,
    }))
}

/// A loaded checkpoint with its optional encoder.
pub struct LoadedModel {
    pub refiner: Refiner,
    pub encoder: Option<EncoderParams<Tensor>>,
}

impl LoadedModel {
    pub fn load(dir: &Path) -> Result<Self> {
        let refiner = checkpoint::load(dir)?;
        let enc_dir = dir.join(ENCODER_DIR);
        let encoder = if enc_dir.join("manifest.json").exists() {
            let (cfg, params) = load_encoder(&enc_dir)?;
            if cfg.widths.len() != refiner.config().channels {
                return Err(m2m_core::Error::Checkpoint(format!(
                    "encoder yields {} layers, refiner expects {} channels",
                    cfg.widths.len(),
                    refiner.config().channels
                ))
                .into());
            }
            Some(params)
        } else {
            None
        };
        Ok(LoadedModel { refiner, encoder })
    }

    /// Prepares pairs for this model, checking channel counts and depths
    /// against the checkpoint.
    pub fn prepare(&self, pairs: Vec<PairData>) -> Result<Vec<PreparedPair>> {
        let grid = self.refiner.config().grid;
        let prepared = prepare(pairs, grid, self.encoder.is_none())?;
        let want = self.refiner.config().channels;
        for p in &prepared {
            let got = match &self.encoder {
                Some(e) => {
                    let depth = p.data.source.maps()[0].depth();
                    if e.weights[0].shape()[0] != depth {
                        return Err(m2m_core::Error::shape("encoder input depth", e.weights[0].shape(), &[depth]).into());
                    }
                    want
                }
                None => p.channels(),
            };
            if got != want {
                return Err(m2m_core::Error::shape("checkpoint channels", &[want], &[got]).into());
            }
        }
        Ok(prepared)
    }

    pub fn correlation(&self, pair: &PreparedPair) -> Result<MultiChannelCorrelation> {
        let enc = self.encoder.as_ref().map(EncoderParams::to_constants);
        let c = correlation_var(pair, enc.as_ref(), self.refiner.config().grid)?;
        Ok(MultiChannelCorrelation::new(c.value().clone())?)
    }
}

/// Pairs from `--data-dir`, else the configured holdout, else the training provider.
fn inference_pairs(cfg: &RunConfig, data_dir: Option<&Path>) -> Result<Vec<PairData>> {
    let provider = match data_dir {
        Some(d) => FeatureProviderConfig::File { data_dir: d.to_path_buf() },
        None => cfg.holdout.clone().unwrap_or_else(|| cfg.provider.clone()),
    };
    let base = match provider {
        FeatureProviderConfig::Encoder { input, .. } => *input,
        p => p,
    };
    Ok(provide_pairs(&base)?)
}

#[derive(Clone, Debug)]
pub struct MatchArgs {
    pub checkpoint: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
}

fn checkpoint_dir(cfg: &RunConfig, given: Option<&Path>) -> PathBuf {
    given.map(Path::to_path_buf).unwrap_or_else(|| cfg.out_dir.join(CHECKPOINT_DIR))
}

/// Writes `predictions.json` (target pixels) and one (H̄, W̄, 2) flow per
/// pair, also in target pixels.
pub fn cmd_match(cfg: &RunConfig, args: &MatchArgs) -> Result<Value> {
    let model = LoadedModel::load(&checkpoint_dir(cfg, args.checkpoint.as_deref()))?;
    let pairs = model.prepare(inference_pairs(cfg, args.data_dir.as_deref())?)?;
    let fine = refined_grid(model.refiner.config().grid);
    let mut preds = Vec::with_capacity(pairs.len());
    let mut flows = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let (pred, flow) = crate::pipeline::predict(&model.refiner, model.encoder.as_ref(), pair, &cfg.flow)?;
        let [w, h] = pair.data.pair.tgt_img_size;
        let pixels: Vec<f64> = flow
            .data()
            .chunks(2)
            .flat_map(|g| {
                let (x, y) = grid_to_pixel((g[0], g[1]), (w, h), fine);
                [x, y]
            })
            .collect();
        flows.push((pred.pair_id.clone(), Tensor::new(flow.shape(), pixels)?));
        preds.push(pred);
    }
    let flow_dir = cfg.out_dir.join(FLOWS_DIR);
    create_dir(&flow_dir)?;
    for (id, flow) in &flows {
        write_atomic(&flow_dir.join(format!("{id}.tfmf")), &encode(flow))?;
    }
    let path = cfg.out_dir.join(PREDICTIONS_FILE);
    write_atomic(&path, &predictions_to_json(&preds)?)?;
    let fallbacks: usize = preds.iter().map(|p| p.fallback.len()).sum();
    Ok(json!({ "predictions": path, "pairs": preds.len(), "fallback_keypoints": fallbacks }))
}

#[derive(Clone, Debug)]
pub struct EvalArgs {
    pub predictions: PathBuf,
    pub annotations: PathBuf,
    pub mode: Option<ThresholdMode>,
    pub alpha: Option<f64>,
    pub scheme: Option<AggregationScheme>,
}

pub fn cmd_eval(cfg: &RunConfig, args: &EvalArgs) -> Result<Value> {
    let mut settings = cfg.eval.clone();
    settings.mode = args.mode.unwrap_or(settings.mode);
    settings.alpha = args.alpha.unwrap_or(settings.alpha);
    settings.scheme = args.scheme.unwrap_or(settings.scheme);
    if !(settings.alpha > 0.0 && settings.alpha.is_finite()) {
        return Err(CliError::config("alpha must be positive"));
    }
    let preds = load_predictions(&args.predictions)?;
    let anns = load_annotations(&args.annotations)?;
    let report = score_predictions(&preds, &anns, &settings)?;
    create_dir(&cfg.out_dir)?;
    write_atomic(&cfg.out_dir.join(PCK_CSV_FILE), report.to_csv().as_bytes())?;
    let body = json!({
        "format_version": REPORT_VERSION,
        "mode": settings.mode,
        "alpha": settings.alpha,
        "report": report,
    });
    write_json(&cfg.out_dir.join(PCK_JSON_FILE), &body)?;
    let all = report.overall();
    Ok(json!({ "category": all.category, "n_pairs": all.n_pairs, "n_keypoints": all.n_keypoints, "pck": all.pck }))
}

#[derive(Clone, Debug)]
pub struct BenchArgs {
    pub t_list: Vec<usize>,
    pub d_head: usize,
    pub d_in: usize,
    pub trials: usize,
    pub vanilla_ceiling: usize,
    pub seed: u64,
}

impl Default for BenchArgs {
    fn default() -> Self {
        BenchArgs {
            t_list: vec![1024, 2048, 4096, 8192],
            d_head: 4,
            d_in: 32,
            trials: 5,
            vanilla_ceiling: DEFAULT_VANILLA_CEILING,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionKind {
    Additive,
    Vanilla,
}

impl AttentionKind {
    pub fn name(self) -> &'static str {
        match self {
            AttentionKind::Additive => "additive",
            AttentionKind::Vanilla => "vanilla",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchRow {
    pub kind: AttentionKind,
    pub t: usize,
    /// None when the kind refused this length.
    pub median_seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BenchReport {
    pub format_version: u32,
    pub d_head: usize,
    pub d_in: usize,
    pub trials: usize,
    pub rows: Vec<BenchRow>,
    /// Least-squares slope of log(median) on log(T), per kind.
    pub slopes: Vec<(AttentionKind, Option<f64>)>,
}

impl BenchReport {
    pub fn slope(&self, kind: AttentionKind) -> Option<f64> {
        self.slopes.iter().find(|(k, _)| *k == kind).and_then(|(_, s)| *s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{BENCH_CSV_HEADER}\n");
        for r in &self.rows {
            match r.median_seconds {
                Some(s) => out.push_str(&format!("{},{},{s:e},ok,\n", r.kind.name(), r.t)),
                None => out.push_str(&format!("{},{},,refused,\n", r.kind.name(), r.t)),
            }
        }
        for (kind, slope) in &self.slopes {
            let s = slope.map(|s| s.to_string()).unwrap_or_default();
            out.push_str(&format!("{},,,fit,{s}\n", kind.name()));
        }
        out
    }
}

/// Slope of the least-squares line through (ln x, ln y).
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let lx: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ly: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

pub fn random_head(d_in: usize, d_head: usize, rng: &mut ChaCha8Rng) -> HeadParams<Var> {
    let s = 1.0 / (d_in as f64).sqrt();
    let p = 1.0 / (d_head as f64).sqrt();
    HeadParams {
        w_q: Var::constant(Tensor::randn(&[d_in, d_head], s, rng)),
        w_k: Var::constant(Tensor::randn(&[d_in, d_head], s, rng)),
        w_v: Var::constant(Tensor::randn(&[d_in, d_head], s, rng)),
        q_pool: Var::constant(Tensor::randn(&[d_head], p, rng)),
        k_pool: Var::constant(Tensor::randn(&[d_head], p, rng)),
    }
}

/// Median per-call forward time of both attention kinds at every T.
pub fn bench_attention(args: &BenchArgs, tau: f64) -> Result<BenchReport> {
    if args.t_list.is_empty() || args.t_list.contains(&0) {
        return Err(CliError::config("T list must hold positive lengths"));
    }
    if args.t_list.windows(2).any(|w| w[0] >= w[1]) {
        return Err(CliError::config("T values must be strictly ascending"));
    }
    if args.trials == 0 || args.d_head == 0 || args.d_in == 0 {
        return Err(CliError::config("trials, d_head and d_in must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let head = random_head(args.d_in, args.d_head, &mut rng);
    let mut rows = Vec::new();
    for &t in &args.t_list {
        let x = Var::constant(Tensor::randn(&[t, args.d_in], 1.0, &mut rng));
        for kind in [AttentionKind::Additive, AttentionKind::Vanilla] {
            if kind == AttentionKind::Vanilla && t > args.vanilla_ceiling {
                rows.push(BenchRow { kind, t, median_seconds: None });
                continue;
            }
            let run = || match kind {
                AttentionKind::Additive => additive_attention_head(&x, &head, None, tau),
                AttentionKind::Vanilla => vanilla_attention_head(&x, &head, tau, args.vanilla_ceiling),
            };
            // The warm-up call also sizes the repetition count.
            let start = Instant::now();
            let out = run()?;
            if out.shape() != [t, args.d_head] {
                return Err(m2m_core::Error::shape("attention output", &[t, args.d_head], out.shape()).into());
            }
            drop(out);
            let reps = (MIN_SAMPLE_SECONDS / start.elapsed().as_secs_f64().max(1e-9)).ceil().clamp(1.0, 1e4) as usize;
            let mut times = Vec::with_capacity(args.trials);
            for _ in 0..args.trials {
                let start = Instant::now();
                for _ in 0..reps {
                    run()?;
                }
                times.push(start.elapsed().as_secs_f64() / reps as f64);
            }
            rows.push(BenchRow { kind, t, median_seconds: Some(median(times)) });
        }
    }
    let slopes = [AttentionKind::Additive, AttentionKind::Vanilla]
        .into_iter()
        .map(|kind| {
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter(|r| r.kind == kind)
                .filter_map(|r| r.median_seconds.map(|s| (r.t as f64, s)))
                .collect();
            (kind, log_log_slope(&pts))
        })
        .collect();
    Ok(BenchReport {
        format_version: REPORT_VERSION,
        d_head: args.d_head,
        d_in: args.d_in,
        trials: args.trials,
        rows,
        slopes,
    })
}

pub fn cmd_bench_attn(cfg: &RunConfig, args: &BenchArgs) -> Result<Value> {
    let report = bench_attention(args, cfg.stack.tau_attn)?;
    create_dir(&cfg.out_dir)?;
    write_atomic(&cfg.out_dir.join(BENCH_CSV_FILE), report.to_csv().as_bytes())?;
    write_json(&cfg.out_dir.join(BENCH_JSON_FILE), &report)?;
    Ok(json!({
        "additive_slope": report.slope(AttentionKind::Additive),
        "vanilla_slope": report.slope(AttentionKind::Vanilla),
    }))
}

#[derive(Clone, Debug)]
pub struct NonlocalityArgs {
    pub checkpoint: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub n_bins: usize,
    pub ceiling: usize,
}

impl Default for NonlocalityArgs {
    fn default() -> Self {
        NonlocalityArgs { checkpoint: None, data_dir: None, n_bins: 5, ceiling: DEFAULT_PAIRWISE_CEILING }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvRow {
    pub kernel_size: usize,
    pub dim: usize,
    pub phi_enumerated: f64,
    pub phi_closed_form: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairNonlocality {
    pub pair_id: String,
    #[serde(flatten)]
    pub report: NonlocalityReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NonlocalityOutput {
    pub format_version: u32,
    pub pairs: Vec<PairNonlocality>,
    /// Empty when no pair carries difficulty labels.
    pub bins: Vec<DifficultyBin>,
    pub unlabeled_pairs: usize,
    pub conv: Vec<ConvRow>,
}

pub fn conv_table() -> Result<Vec<ConvRow>> {
    let mut rows = Vec::new();
    for &kernel_size in &CONV_KERNELS {
        for &dim in &CONV_DIMS {
            let spec = ConvSpec::new(kernel_size, dim)?;
            rows.push(ConvRow {
                kernel_size,
                dim,
                phi_enumerated: nonlocality_conv(spec)?,
                phi_closed_form: nonlocality_conv_closed_form(spec)?,
            });
        }
    }
    Ok(rows)
}

pub fn nonlocality_analysis(model: &LoadedModel, pairs: &[PreparedPair], n_bins: usize, ceiling: usize) -> Result<NonlocalityOutput> {
    let mut out = Vec::with_capacity(pairs.len());
    let mut labeled = Vec::new();
    for p in pairs {
        let report = refiner_nonlocality(&model.refiner, &model.correlation(p)?, ceiling)?;
        if let Some(d) = &p.data.pair.difficulty {
            labeled.push((report.total, d.clone()));
        }
        out.push(PairNonlocality { pair_id: p.data.pair.pair_id.clone(), report });
    }
    let bins = if labeled.is_empty() { Vec::new() } else { difficulty_binning(&labeled, n_bins)? };
    Ok(NonlocalityOutput {
        format_version: REPORT_VERSION,
        unlabeled_pairs: pairs.len() - labeled.len(),
        pairs: out,
        bins,
        conv: conv_table()?,
    })
}

pub fn cmd_nonlocality(cfg: &RunConfig, args: &NonlocalityArgs) -> Result<Value> {
    if args.n_bins == 0 {
        return Err(CliError::config("n_bins must be at least 1"));
    }
    let model = LoadedModel::load(&checkpoint_dir(cfg, args.checkpoint.as_deref()))?;
    let t = model.refiner.config().sequence_len();
    if t > args.ceiling {
        return Err(m2m_core::Error::CeilingExceeded { len: t, ceiling: args.ceiling }.into());
    }
    let pairs = model.prepare(inference_pairs(cfg, args.data_dir.as_deref())?)?;
    let result = nonlocality_analysis(&model, &pairs, args.n_bins, args.ceiling)?;

    let mut layers = format!("{LAYER_CSV_HEADER}\n");
    for p in &result.pairs {
        for (l, phi) in p.report.per_layer.iter().enumerate() {
            layers.push_str(&format!("{},{l},{phi}\n", p.pair_id));
        }
    }
    let mut conv = format!("{CONV_CSV_HEADER}\n");
    for r in &result.conv {
        conv.push_str(&format!("{},{},{},{}\n", r.kernel_size, r.dim, r.phi_enumerated, r.phi_closed_form));
    }
    create_dir(&cfg.out_dir)?;
    write_atomic(&cfg.out_dir.join(NONLOCALITY_LAYERS_FILE), layers.as_bytes())?;
    write_atomic(&cfg.out_dir.join(NONLOCALITY_BINS_FILE), bins_to_csv(&result.bins).as_bytes())?;
    write_atomic(&cfg.out_dir.join(NONLOCALITY_CONV_FILE), conv.as_bytes())?;
    write_json(&cfg.out_dir.join(NONLOCALITY_JSON_FILE), &result)?;
    let mean = result.pairs.iter().map(|p| p.report.total).sum::<f64>() / result.pairs.len() as f64;
    Ok(json!({ "pairs": result.pairs.len(), "mean_phi": mean, "bins": result.bins.len() }))
}

#[derive(Clone, Debug, Default)]
pub struct GenSynthArgs {
    /// Generate the holdout provider instead of the training one.
    pub holdout: bool,
    pub n_pairs: Option<usize>,
}

/// Writes a file-backed dataset from the configured synthetic provider;
/// `--seed` selects the generator seed.
pub fn cmd_gen_synth(cfg: &RunConfig, seed: Option<u64>, args: &GenSynthArgs) -> Result<Value> {
    let provider = if args.holdout {
        cfg.holdout.clone().ok_or_else(|| CliError::config("no holdout provider configured"))?
    } else {
        cfg.provider.clone()
    };
    let mut synth = match provider {
        FeatureProviderConfig::Synthetic(s) => s,
        FeatureProviderConfig::Encoder { input, .. } => match *input {
            FeatureProviderConfig::Synthetic(s) => s,
            _ => return Err(CliError::config("gen-synth needs a synthetic provider")),
        },
        FeatureProviderConfig::File { .. } => return Err(CliError::config("gen-synth needs a synthetic provider")),
    };
    if let Some(s) = seed {
        synth.seed = s;
    }
    if let Some(n) = args.n_pairs {
        synth.n_pairs = n;
    }
    synth.validate()?;
    let pairs: Vec<PairData> = synth.generate()?.into_iter().map(PairData::from).collect();
    save_dataset(&cfg.out_dir, &pairs)?;
    Ok(json!({ "data_dir": cfg.out_dir, "pairs": pairs.len() }))
}
