//! Siamese relative-pose regression for visual servoing.
//!
//! The crate is organized bottom-up:
//!
//! * [`geometry`]: pose algebra, Euler conversion and error metrics.
//! * [`scene`]: synthetic connector scene, pinhole camera and rasterizer.
//! * [`sampler`]: pose sampling, dataset generation and pair streams.
//! * [`tensornet`]: reverse-mode autodiff, the Siamese network and training.
//! * [`servo`]: one-shot and iterative servoing, insertion tolerance.
//! * [`cli`]: the `generate`/`train`/`eval`/`servo`/`tolerance` commands.

pub mod geometry;
pub mod scene;
pub mod sampler;
pub mod tensornet;
pub mod servo;
pub mod cli;

use std::io::Write;
use std::path::Path;

/// Writes `bytes` to a temporary sibling of `path`, then renames it into
/// place so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "path has no file name"))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    result
}
