//! Seeded Adam training of the refiner (and optionally the encoder) on the
//! matching loss.

use std::path::{Path, PathBuf};
use std::time::Instant;

use m2m_core::attention::{checkpoint, Refiner};
use m2m_core::datasets::{provide_pairs, EncoderConfig, EncoderParams, FeatureProviderConfig, PairData};
use m2m_core::evaluation::{PckReport, PairPrediction};
use m2m_core::tensor::io::{save as save_tensor, write_atomic};
use m2m_core::{Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::eval::score_predictions;
use crate::optim::Adam;
use crate::pipeline::{correlation_var, pair_loss, predict, PreparedPair};

pub const RUN_RECORD_VERSION: u32 = 1;
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const ENCODER_DIR: &str = "encoder";
pub const RUN_RECORD_FILE: &str = "run_record.json";
pub const LOSS_CURVE_FILE: &str = "loss_curve.csv";

/// Batch sampling draws from a stream independent of initialization.
const BATCH_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// PCK `all` row on the holdout pairs, when a holdout is configured.
    pub holdout_pck: Option<f64>,
    pub holdout_pairs: usize,
    /// Holdout keypoints that fell back to their nearest grid point.
    pub fallback_keypoints: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub setup_seconds: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub format_version: u32,
    pub config: RunConfig,
    pub loss_curve: Vec<f64>,
    pub final_metrics: FinalMetrics,
    pub timings: Timings,
    pub checkpoint: PathBuf,
}

/// Trained state, kept in memory for callers that continue with it.
pub struct TrainOutput {
    pub record: RunRecord,
    pub refiner: Refiner,
    pub encoder: Option<EncoderParams<Tensor>>,
    pub holdout_report: Option<PckReport>,
}

fn encoder_config(provider: &FeatureProviderConfig) -> Option<&EncoderConfig> {
    match provider {
        FeatureProviderConfig::Encoder { encoder, .. } => Some(encoder),
        _ => None,
    }
}

pub fn prepare(pairs: Vec<PairData>, grid: (usize, usize), precompute: bool) -> Result<Vec<PreparedPair>> {
    if pairs.is_empty() {
        return Err(CliError::config("feature provider yielded no pairs"));
    }
    let out = pairs
        .into_iter()
        .map(|p| PreparedPair::new(p, grid, precompute))
        .collect::<m2m_core::Result<Vec<_>>>()?;
    let channels = out[0].channels();
    if out.iter().any(|p| p.channels() != channels) {
        return Err(CliError::config("pairs disagree on the number of feature layers"));
    }
    Ok(out)
}

/// Mean loss over `pairs` without recording gradients.
pub fn mean_loss(
    refiner: &Refiner,
    encoder: Option<&EncoderParams<Tensor>>,
    pairs: &[PreparedPair],
    cfg: &RunConfig,
) -> Result<f64> {
    let params = refiner.params().to_constants();
    let enc = encoder.map(EncoderParams::to_constants);
    let mut total = 0.0;
    for p in pairs {
        let corr = correlation_var(p, enc.as_ref(), cfg.grid)?;
        total += pair_loss(refiner, &params, &corr, p, &cfg.flow)?.value().item()?;
    }
    Ok(total / pairs.len() as f64)
}

pub fn predict_all(
    refiner: &Refiner,
    encoder: Option<&EncoderParams<Tensor>>,
    pairs: &[PreparedPair],
    cfg: &RunConfig,
) -> Result<Vec<(PairPrediction, Tensor)>> {
    pairs
        .iter()
        .map(|p| Ok(predict(refiner, encoder, p, &cfg.flow)?))
        .collect()
}

fn dump_non_finite(dir: &Path, step: usize, refiner: &Refiner, pair: &PreparedPair, corr: &Var) -> Result<PathBuf> {
    let dump = dir.join("diagnostics").join(format!("step{step}"));
    std::fs::create_dir_all(&dump).map_err(|e| CliError::io(&dump, e))?;
    save_tensor(corr.value(), &dump.join("correlation.tfmf"))?;
    save_tensor(&pair.tgt_grid_kps, &dump.join("target_keypoints.tfmf"))?;
    checkpoint::save(refiner, &dump.join("refiner"))?;
    let note = serde_json::json!({ "step": step, "pair_id": pair.data.pair.pair_id });
    write_atomic(&dump.join("pair.json"), note.to_string().as_bytes())?;
    Ok(dump)
}

#[derive(Serialize, Deserialize)]
struct EncoderManifest {
    config: EncoderConfig,
    files: Vec<String>,
}

pub fn save_encoder(params: &EncoderParams<Tensor>, cfg: &EncoderConfig, dir: &Path) -> Result<()> {
    params.check(cfg)?;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let mut files = Vec::new();
    for (name, t) in params.flat() {
        let file = format!("{name}.tfmf");
        save_tensor(&t, &dir.join(&file))?;
        files.push(file);
    }
    let manifest = EncoderManifest { config: cfg.clone(), files };
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    write_atomic(&dir.join("manifest.json"), &json)?;
    Ok(())
}

/// Loads an encoder saved by [`save_encoder`]; files alternate weight, bias.
pub fn load_encoder(dir: &Path) -> Result<(EncoderConfig, EncoderParams<Tensor>)> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    let manifest: EncoderManifest = serde_json::from_str(&text)?;
    let bad = |msg: String| CliError::Core(m2m_core::Error::Checkpoint(msg));
    if manifest.files.len() != 2 * manifest.config.widths.len() {
        return Err(bad("encoder manifest lists the wrong number of tensors".into()));
    }
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for (i, name) in manifest.files.iter().enumerate() {
        if name.contains(['/', '\\']) || name.starts_with('.') {
            return Err(bad(format!("encoder file {name} escapes the checkpoint")));
        }
        let t = m2m_core::tensor::io::load(&dir.join(name))?;
        if i % 2 == 0 {
            weights.push(t);
        } else {
            biases.push(t);
        }
    }
    let params = EncoderParams { weights, biases };
    params.check(&manifest.config)?;
    Ok((manifest.config, params))
}

fn write_loss_curve(path: &Path, curve: &[f64]) -> Result<()> {
    let mut csv = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        csv.push_str(&format!("{},{l:e}\n", i + 1));
    }
    write_atomic(path, csv.as_bytes())?;
    Ok(())
}

/// Runs the configured training and writes checkpoint, loss curve and run
/// record under `cfg.out_dir`.
pub fn train(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let t0 = Instant::now();
    let enc_cfg = encoder_config(&cfg.provider).cloned();
    let precompute = enc_cfg.is_none();
    let pairs = prepare(provide_pairs(&cfg.provider)?, cfg.grid, precompute)?;
    let holdout = match &cfg.holdout {
        Some(h) => Some(prepare(provide_pairs(h)?, cfg.grid, precompute)?),
        None => None,
    };
    let channels = match &enc_cfg {
        Some(e) => e.widths.len(),
        None => pairs[0].channels(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed);
    let mut refiner = Refiner::init(cfg.refiner_config(channels), &mut rng)?;
    let mut encoder = match &enc_cfg {
        Some(e) => Some(EncoderParams::init(e, &mut rng)?),
        None => None,
    };
    let mut batch_rng = ChaCha8Rng::seed_from_u64(cfg.optim.seed ^ BATCH_STREAM);

    let o = &cfg.optim;
    let flat = refiner.params().flat();
    let shapes: Vec<&[usize]> = flat.iter().map(|(_, t)| t.shape()).collect();
    let mut adam = Adam::new(o.lr, o.beta1, o.beta2, o.eps, &shapes);
    let mut enc_adam = encoder.as_ref().map(|e| {
        let s: Vec<&[usize]> = e.weights.iter().chain(&e.biases).map(Tensor::shape).collect();
        Adam::new(o.encoder_lr, o.beta1, o.beta2, o.eps, &s)
    });

    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    let initial_loss = mean_loss(&refiner, encoder.as_ref(), &pairs, cfg)?;
    let setup_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let mut curve = Vec::with_capacity(o.steps);
    let mut order: Vec<usize> = Vec::new();
    for step in 1..=o.steps {
        let vars = refiner.params().to_vars();
        let enc_vars = encoder.as_ref().map(EncoderParams::to_vars);
        let mut batch_loss = 0.0;
        for _ in 0..o.batch_size {
            if order.is_empty() {
                order = (0..pairs.len()).collect();
                order.shuffle(&mut batch_rng);
            }
            let pair = &pairs[order.pop().expect("refilled")];
            let corr = correlation_var(pair, enc_vars.as_ref(), cfg.grid)?;
            let loss = pair_loss(&refiner, &vars, &corr, pair, &cfg.flow)?;
            let value = loss.value().item()?;
            if !value.is_finite() {
                let dump = dump_non_finite(&cfg.out_dir, step, &refiner, pair, &corr)?;
                return Err(CliError::NonFiniteLoss { step, dump });
            }
            batch_loss += value;
            loss.scale(1.0 / o.batch_size as f64).backward()?;
        }
        curve.push(batch_loss / o.batch_size as f64);

        let mut values: Vec<Tensor> = refiner.params().flat().into_iter().map(|(_, t)| t).collect();
        let grads: Vec<Tensor> = vars.grads().flat().into_iter().map(|(_, t)| t).collect();
        adam.step(&mut values, &grads);
        let next = refiner.params().with_values(values)?;
        refiner.set_params(next)?;
        if let (Some(enc), Some(ev), Some(ea)) = (encoder.as_mut(), enc_vars.as_ref(), enc_adam.as_mut()) {
            let g = ev.grads();
            let n = enc.weights.len();
            let mut values: Vec<Tensor> = enc.weights.iter().chain(&enc.biases).cloned().collect();
            let grads: Vec<Tensor> = g.weights.into_iter().chain(g.biases).collect();
            ea.step(&mut values, &grads);
            enc.biases = values.split_off(n);
            enc.weights = values;
        }
    }
    let final_loss = mean_loss(&refiner, encoder.as_ref(), &pairs, cfg)?;
    let train_seconds = t1.elapsed().as_secs_f64();

    let t2 = Instant::now();
    let (holdout_pck, holdout_report, holdout_pairs, fallback_keypoints) = match &holdout {
        Some(h) => {
            let preds: Vec<PairPrediction> = predict_all(&refiner, encoder.as_ref(), h, cfg)?
                .into_iter()
                .map(|(p, _)| p)
                .collect();
            let anns: Vec<_> = h.iter().map(|p| p.data.pair.clone()).collect();
            let report = score_predictions(&preds, &anns, &cfg.eval)?;
            let fallbacks = preds.iter().map(|p| p.fallback.len()).sum();
            (Some(report.overall().pck), Some(report), h.len(), fallbacks)
        }
        None => (None, None, 0, 0),
    };
    let eval_seconds = t2.elapsed().as_secs_f64();

    let ckpt = cfg.out_dir.join(CHECKPOINT_DIR);
    checkpoint::save(&refiner, &ckpt)?;
    if let (Some(enc), Some(ec)) = (&encoder, &enc_cfg) {
        save_encoder(enc, ec, &ckpt.join(ENCODER_DIR))?;
    }
    write_loss_curve(&cfg.out_dir.join(LOSS_CURVE_FILE), &curve)?;
    let record = RunRecord {
        format_version: RUN_RECORD_VERSION,
        config: cfg.clone(),
        loss_curve: curve,
        final_metrics: FinalMetrics { initial_loss, final_loss, holdout_pck, holdout_pairs, fallback_keypoints },
        timings: Timings { setup_seconds, train_seconds, eval_seconds },
        checkpoint: ckpt,
    };
    let mut json = serde_json::to_vec_pretty(&record)?;
    json.push(b'\n');
    write_atomic(&cfg.out_dir.join(RUN_RECORD_FILE), &json)?;
    Ok(TrainOutput { record, refiner, encoder, holdout_report })
}
