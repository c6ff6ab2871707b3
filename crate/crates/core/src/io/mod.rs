//! Dataset manifests, training checkpoints, the viewer export bundle and
//! animation pose files.

mod bundle;
mod checkpoint;
mod dataset;
mod pose;

pub use bundle::{
    export_viewer_bundle, read_bundle, sidecar_path, write_bundle, BundleMetadata, ViewerBundle, BUNDLE_VERSION,
};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use dataset::{
    load_dataset, read_manifest, write_manifest, Dataset, DatasetManifest, Extrinsics, Frame, FrameRecord,
};
pub(crate) use dataset::nearest_index;
pub use pose::{read_pose_file, BoneOverride, Keyframe, PoseFile};

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Leading bytes of every binary file.
pub const MAGIC: [u8; 4] = *b"BAGS";

/// Writes to a sibling temporary file, syncs it and renames it over `path`.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("not a file path: {}", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(name);
    tmp_name.push(format!(".tmp{}", std::process::id()));
    let tmp: PathBuf = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}
