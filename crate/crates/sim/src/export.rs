use std::path::Path;

use surveychat_core::export::export;
use surveychat_core::{ExportFilter, ExportShape, SqliteStore};

use crate::SimError;

/// Writes the same bytes as the HTTP export, straight from the database file.
pub fn export_cli(db: &Path, shape: ExportShape, out: &Path) -> Result<(), SimError> {
    let store = SqliteStore::open_existing(db)
        .map_err(|e| SimError::DbUnreadable(format!("{}: {e}", db.display())))?;
    let bytes = export(&store, shape, &ExportFilter::all())
        .map_err(|e| SimError::DbUnreadable(e.to_string()))?;
    std::fs::write(out, bytes)?;
    Ok(())
}
