//! Resumable checkpoints.
//!
//! `checkpoints/epoch-NNNNN/` holds `patch.png` + `patch.json` (the 16-bit
//! patch and its manifest) and `optimizer.json` (Adam moments plus the exact
//! f64 patch values, so a resumed run continues bit for bit). Each directory
//! is assembled under a temporary name and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use depthpatch_core::attack::{PatchState, RunState};
use depthpatch_core::optim::Adam;
use depthpatch_core::Patch;

use crate::error::{AppError, AppResult};
use crate::io::{load_patch, read_json, save_patch, write_json, PatchManifest};

pub const DIR: &str = "checkpoints";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerFile {
    pub adam: Adam,
    pub patch_values: Vec<f64>,
    pub epoch: usize,
    pub step: u64,
    pub best_metric: f64,
}

fn epoch_dir(root: &Path, epoch: usize) -> PathBuf {
    root.join(DIR).join(format!("epoch-{epoch:05}"))
}

pub fn manifest_for(ps: &PatchState) -> PatchManifest {
    PatchManifest {
        side: ps.patch.side(),
        seed: ps.seed,
        config_hash: ps.config_hash.clone(),
        epoch: ps.epoch,
        step: ps.step,
        png_sha256: String::new(),
    }
}

/// Write a checkpoint of `state` under `run_dir`; returns its directory.
pub fn save_checkpoint(run_dir: &Path, state: &RunState) -> AppResult<PathBuf> {
    let parent = run_dir.join(DIR);
    fs::create_dir_all(&parent).map_err(|e| AppError::io(&parent, e))?;
    let tmp = tempfile::Builder::new()
        .prefix(".partial-")
        .tempdir_in(&parent)
        .map_err(|e| AppError::io(&parent, e))?;
    let ps = &state.patch;
    save_patch(&tmp.path().join("patch.png"), &ps.patch, manifest_for(ps))?;
    write_json(
        &tmp.path().join("optimizer.json"),
        &OptimizerFile {
            adam: ps.optimizer.clone(),
            patch_values: ps.patch.data().to_vec(),
            epoch: ps.epoch,
            step: ps.step,
            best_metric: state.best_metric,
        },
    )?;
    let target = epoch_dir(run_dir, ps.epoch);
    if target.exists() {
        fs::remove_dir_all(&target).map_err(|e| AppError::io(&target, e))?;
    }
    let staged = tmp.keep();
    fs::rename(&staged, &target).map_err(|e| AppError::io(&target, e))?;
    Ok(target)
}

/// Completed checkpoint directories, oldest first.
pub fn list_checkpoints(run_dir: &Path) -> AppResult<Vec<(usize, PathBuf)>> {
    let parent = run_dir.join(DIR);
    if !parent.is_dir() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for entry in fs::read_dir(&parent).map_err(|e| AppError::io(&parent, e))? {
        let path = entry.map_err(|e| AppError::io(&parent, e))?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if let Some(n) = name.strip_prefix("epoch-").and_then(|n| n.parse().ok()) {
            out.push((n, path));
        }
    }
    out.sort();
    Ok(out)
}

/// Rebuild the run state stored in checkpoint directory `dir`.
///
/// The PNG must match its manifest and agree with the exact values to
/// within the 16-bit quantum.
pub fn load_checkpoint(dir: &Path) -> AppResult<RunState> {
    let (png_patch, manifest) = load_patch(&dir.join("patch.png"))?;
    let opt: OptimizerFile = read_json(&dir.join("optimizer.json"))?;
    let patch = Patch::new(manifest.side, opt.patch_values).map_err(|e| AppError::io(dir, e))?;
    let drift = patch
        .data()
        .iter()
        .zip(png_patch.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if drift > 2f64.powi(-15) || opt.epoch != manifest.epoch || opt.step != manifest.step {
        return Err(AppError::Data(format!(
            "{}: optimizer.json and patch.png disagree",
            dir.display()
        )));
    }
    if opt.adam.m.len() != patch.data().len() || opt.adam.v.len() != patch.data().len() {
        return Err(AppError::Data(format!(
            "{}: optimizer moments do not match the patch size",
            dir.display()
        )));
    }
    Ok(RunState {
        patch: PatchState {
            patch,
            optimizer: opt.adam,
            epoch: opt.epoch,
            step: opt.step,
            seed: manifest.seed,
            config_hash: manifest.config_hash,
        },
        best_metric: opt.best_metric,
        history: Vec::new(),
    })
}

pub fn latest_checkpoint(run_dir: &Path) -> AppResult<Option<RunState>> {
    match list_checkpoints(run_dir)?.pop() {
        Some((_, dir)) => load_checkpoint(&dir).map(Some),
        None => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use depthpatch_core::attack::{initial_state, AttackConfig};

    fn state() -> RunState {
        let mut s = RunState::new(initial_state(&AttackConfig::default()).unwrap());
        s.patch.epoch = 7;
        s.patch.step = 40;
        s.patch.optimizer.m[3] = 0.125;
        s.best_metric = 0.5;
        s
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = state();
        save_checkpoint(dir.path(), &s).unwrap();
        let back = latest_checkpoint(dir.path()).unwrap().unwrap();
        assert_eq!(back, s);
        let entries: Vec<_> = fs::read_dir(dir.path().join(DIR)).unwrap().collect();
        assert_eq!(entries.len(), 1, "no staging directory left behind");
    }

    #[test]
    fn latest_wins() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = state();
        save_checkpoint(dir.path(), &s).unwrap();
        s.patch.epoch = 12;
        save_checkpoint(dir.path(), &s).unwrap();
        assert_eq!(latest_checkpoint(dir.path()).unwrap().unwrap().patch.epoch, 12);
        assert_eq!(list_checkpoints(dir.path()).unwrap().len(), 2);
    }

    #[test]
    fn inconsistent_checkpoint_refused() {
        let dir = tempfile::tempdir().unwrap();
        let d = save_checkpoint(dir.path(), &state()).unwrap();
        let p = d.join("optimizer.json");
        let mut opt: OptimizerFile = read_json(&p).unwrap();
        opt.patch_values[0] = (opt.patch_values[0] + 0.5) % 1.0;
        write_json(&p, &opt).unwrap();
        assert!(load_checkpoint(&d).is_err());
    }
}
