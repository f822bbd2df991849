//! Columnar storage, time-sorted CSR adjacency, snapshot views and a mappable
//! on-disk format.

mod access;
mod adjacency;
mod column;
mod file;
mod ingest;
mod snapshot;
mod synthetic;

use thiserror::Error;

pub use access::{AccessRecorder, NeighborAccess, Store};
pub use adjacency::{build_adjacency, AdjacencyIndex, Csr, EdgeType, EdgeTypeInfo};
pub use column::{Bitmap, Buf, Column, ColumnData, DictBuilder, Dictionary, NULL_CODE};
pub use file::{load_store, save_store, FORMAT_VERSION, MAGIC};
pub use ingest::{
    chunks_from_raw, ingest_csv, ingest_dir, parse_column, read_raw_csv, ColumnReport, IngestOptions, IngestReport,
    LinkReport, TableReport,
};
pub use snapshot::{snapshot, SnapshotView};
pub use synthetic::synthetic_store;

use crate::relgraph::SchemaError;

#[derive(Debug, Error)]
pub enum ColstoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("CSV error in {path}: {message}")]
    Csv { path: String, message: String },
    #[error("{path}: missing declared column '{column}'")]
    MissingColumn { path: String, column: String },
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error("bad magic bytes {found:?}, expected \"RLCT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported store version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("truncated section '{section}'")]
    Truncated { section: String },
    #[error("corrupt store: {0}")]
    Corrupt(String),
    #[error("unknown edge type {0}")]
    UnknownEdgeType(u32),
    #[error("node {table}:{row} does not exist or is not a source of edge type {edge_type}")]
    BadNode { table: u32, row: u32, edge_type: u32 },
    #[error("no CSV files found in {0}")]
    EmptyDirectory(String),
}
