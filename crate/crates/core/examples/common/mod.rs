#![allow(dead_code)]

use std::path::PathBuf;

use caneft::pipeline::{PipelineConfig, Workspace};

/// Opens the workspace named by the first CLI argument, or a throwaway one,
/// with the quick preset, then generates data and pretrains the base model
/// unless those artifacts already exist.
pub fn quick_workspace() -> caneft::Result<(Option<tempfile::TempDir>, Workspace)> {
    let (tmp, root) = match std::env::args().nth(1) {
        Some(dir) => (None, PathBuf::from(dir)),
        None => {
            let t = tempfile::tempdir().map_err(|source| caneft::Error::Io {
                path: std::env::temp_dir(),
                source,
            })?;
            let p = t.path().to_path_buf();
            (Some(t), p)
        }
    };
    let ws = Workspace::open(&root, PipelineConfig::quick())?;
    if !ws.data_dir().join("domains.json").exists() {
        ws.gen_data(false)?;
    }
    if !ws.base_checkpoint().exists() {
        let t = std::time::Instant::now();
        let log = ws.pretrain(false)?;
        let l = log.losses();
        println!(
            "pretrained {} steps in {:.0}s, loss {:.3} -> {:.3}",
            l.len(),
            t.elapsed().as_secs_f64(),
            l[0],
            l[l.len() - 1]
        );
    }
    Ok((tmp, ws))
}
