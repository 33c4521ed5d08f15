//! File staging: the payload is published under a random name by an atomic
//! rename and claimed by the consumer with a second atomic rename.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use super::{new_token, IpcError};

pub(super) fn stage(root: &Path, token: &str, bytes: &[u8]) -> Result<PathBuf, IpcError> {
    let failed = |e: io::Error| IpcError::StagingFailed(format!("{}: {e}", root.display()));
    fs::create_dir_all(root).map_err(failed)?;
    let tmp = root.join(format!("{token}.tmp"));
    let path = root.join(format!("{token}.stage"));
    let mut f = fs::File::create(&tmp).map_err(failed)?;
    f.write_all(bytes).and_then(|_| f.sync_data()).map_err(failed)?;
    drop(f);
    fs::rename(&tmp, &path).map_err(failed)?;
    Ok(path)
}

pub(super) fn redeem(address: &str) -> Result<Vec<u8>, IpcError> {
    let path = Path::new(address);
    let claimed = path.with_extension(format!("claimed-{}", new_token()));
    match fs::rename(path, &claimed) {
        Ok(()) => {}
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(IpcError::AlreadyRedeemed),
        Err(e) => return Err(IpcError::TransportError(format!("{address}: {e}"))),
    }
    let bytes = fs::read(&claimed).map_err(|e| IpcError::TransportError(format!("{address}: {e}")));
    let _ = fs::remove_file(&claimed);
    bytes
}
