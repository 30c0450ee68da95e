//! Model checkpoint file: versioned header, dimensions, row-major parameter
//! blocks, and the training config and seed for provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::io::atomic_write;
use crate::num::Real;

use super::linalg::Mat;
use super::train::TrainerConfig;
use super::{EvalError, EvaluatorModel};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    d_e: usize,
    d_p: usize,
    /// Row-major `d_p × d_e`.
    w_v: Vec<f64>,
    /// Row-major `d_p × d_e`.
    w_t: Vec<f64>,
    w: Vec<f64>,
    b: f64,
    config: CheckpointConfig,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
struct CheckpointConfig {
    tau: f64,
    lambda_c: f64,
    lambda_m: f64,
    batch_size: usize,
    learning_rate: f64,
    epochs: usize,
    seed: u64,
    frames_per_moment: usize,
    projection_dim: usize,
}

pub fn save_checkpoint<F: Real>(
    model: &EvaluatorModel<F>,
    cfg: &TrainerConfig<F>,
    path: &Path,
) -> Result<(), EvalError> {
    let to_f64 = |xs: &[F]| xs.iter().map(|x| x.to_f64_lossy()).collect::<Vec<f64>>();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        d_e: model.d_e(),
        d_p: model.d_p(),
        w_v: to_f64(model.w_v.data()),
        w_t: to_f64(model.w_t.data()),
        w: to_f64(&model.w),
        b: model.b.to_f64_lossy(),
        config: CheckpointConfig {
            tau: cfg.tau.to_f64_lossy(),
            lambda_c: cfg.lambda_c.to_f64_lossy(),
            lambda_m: cfg.lambda_m.to_f64_lossy(),
            batch_size: cfg.batch_size,
            learning_rate: cfg.learning_rate.to_f64_lossy(),
            epochs: cfg.epochs,
            seed: cfg.seed,
            frames_per_moment: cfg.frames_per_moment,
            projection_dim: cfg.projection_dim,
        },
    };
    let value =
        serde_json::to_value(&file).map_err(|e| EvalError::Checkpoint(e.to_string()))?;
    let mut bytes =
        serde_json::to_vec(&value).map_err(|e| EvalError::Checkpoint(e.to_string()))?;
    bytes.push(b'\n');
    atomic_write(path, &bytes).map_err(|e| EvalError::Checkpoint(e.to_string()))
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(EvaluatorModel<f64>, TrainerConfig<f64>), EvalError> {
    let text =
        std::fs::read_to_string(path).map_err(|e| EvalError::Checkpoint(e.to_string()))?;
    let file: CheckpointFile =
        serde_json::from_str(&text).map_err(|e| EvalError::Checkpoint(e.to_string()))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(EvalError::Checkpoint(format!(
            "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
            file.version
        )));
    }
    let expect = file.d_e * file.d_p;
    if file.w_v.len() != expect || file.w_t.len() != expect || file.w.len() != file.d_p {
        return Err(EvalError::Checkpoint("parameter block size mismatch".into()));
    }
    let model = EvaluatorModel {
        w_v: Mat::from_row_major(file.d_p, file.d_e, file.w_v)
            .ok_or_else(|| EvalError::Checkpoint("bad w_v block".into()))?,
        w_t: Mat::from_row_major(file.d_p, file.d_e, file.w_t)
            .ok_or_else(|| EvalError::Checkpoint("bad w_t block".into()))?,
        w: file.w,
        b: file.b,
    };
    if !model.is_finite() {
        return Err(EvalError::Checkpoint("non-finite parameters".into()));
    }
    let cfg = TrainerConfig {
        tau: file.config.tau,
        lambda_c: file.config.lambda_c,
        lambda_m: file.config.lambda_m,
        batch_size: file.config.batch_size,
        learning_rate: file.config.learning_rate,
        epochs: file.config.epochs,
        seed: file.config.seed,
        frames_per_moment: file.config.frames_per_moment,
        projection_dim: file.config.projection_dim,
    };
    Ok((model, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let mut model: EvaluatorModel<f64> = EvaluatorModel::init(3, 2);
        model.w_v.set(1, 2, 0.1234567890123);
        model.w = vec![0.5, -0.25];
        model.b = 1e-9;
        let cfg = TrainerConfig {
            seed: 7,
            ..TrainerConfig::defaults()
        };
        save_checkpoint(&model, &cfg, &path).unwrap();
        let (loaded, loaded_cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, model);
        assert_eq!(loaded_cfg, cfg);
    }

    #[test]
    fn version_mismatch_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let model: EvaluatorModel<f64> = EvaluatorModel::init(2, 2);
        save_checkpoint(&model, &TrainerConfig::defaults(), &path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\":1", "\"version\":99");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(EvalError::Checkpoint(_))
        ));
    }
}
