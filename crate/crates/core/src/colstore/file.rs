//! Binary store layout (all integers little-endian):
//!
//! ```text
//! 0      magic "RLCT", u32 version, u32 section count, u32 table count, u32 link count, zero pad to 64
//! 64     section table: per section name[48] (NUL padded), u64 offset, u64 length
//! ...    sections, each starting on a 64-byte boundary, zero padded between
//! ```
//!
//! Sections: `schema` and `meta` (JSON), `t{i}.times`, `t{i}.c{j}.valid` plus one of
//! `.f64` / `.i64` / (`.codes`, `.doff`, `.dbytes`), and `e{k}.off` / `.nbr` / `.time`
//! per directed edge type. Loading maps the file and slices arrays out of it in place.

use std::borrow::Cow;
use std::fs::File;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use bytemuck::Pod;
use memmap2::Mmap;
use serde::{Deserialize, Serialize};

use super::{AdjacencyIndex, Bitmap, Buf, ColstoreError, Column, ColumnData, Csr, Dictionary, EdgeTypeInfo, Store};
use crate::relgraph::{Schema, SemanticType, TemporalGraph};

pub const MAGIC: [u8; 4] = *b"RLCT";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 64;
const ENTRY_LEN: usize = 64;
const NAME_LEN: usize = 48;
const ALIGN: usize = 64;

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Kind {
    F64,
    I64,
    Codes,
}

#[derive(Serialize, Deserialize)]
struct ColumnEntry {
    name: String,
    stype: SemanticType,
    kind: Kind,
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    rows: usize,
    columns: Vec<ColumnEntry>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    tables: Vec<TableEntry>,
    edge_types: Vec<EdgeTypeInfo>,
    dangling: Vec<u64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ColstoreError + '_ {
    move |source| ColstoreError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn align(x: usize) -> usize {
    x.div_ceil(ALIGN) * ALIGN
}

/// Writes the graph and its adjacency to `path`. Output is a pure function of the
/// store contents.
pub fn save_store(store: &Store, path: &Path) -> Result<(), ColstoreError> {
    let graph = &store.graph;
    let index = &store.index;
    let mut sections: Vec<(String, Cow<[u8]>)> = Vec::new();
    sections.push(("schema".into(), Cow::Owned(graph.schema().to_json().into_bytes())));
    let meta = Meta {
        tables: graph
            .tables()
            .iter()
            .map(|t| TableEntry {
                rows: t.row_count(),
                columns: t
                    .columns()
                    .iter()
                    .map(|c| ColumnEntry {
                        name: c.name.clone(),
                        stype: c.stype,
                        kind: match c.data {
                            ColumnData::Float(_) => Kind::F64,
                            ColumnData::Time(_) => Kind::I64,
                            ColumnData::Codes { .. } => Kind::Codes,
                        },
                    })
                    .collect(),
            })
            .collect(),
        edge_types: index.types.clone(),
        dangling: index.dangling.clone(),
    };
    sections.push((
        "meta".into(),
        Cow::Owned(serde_json::to_vec(&meta).expect("meta serializes")),
    ));
    for (ti, t) in graph.tables().iter().enumerate() {
        sections.push((format!("t{ti}.times"), Cow::Borrowed(t.times_buf().as_bytes())));
        for (ci, c) in t.columns().iter().enumerate() {
            let p = format!("t{ti}.c{ci}");
            sections.push((format!("{p}.valid"), Cow::Borrowed(c.valid.bits.as_bytes())));
            match &c.data {
                ColumnData::Float(v) => sections.push((format!("{p}.f64"), Cow::Borrowed(v.as_bytes()))),
                ColumnData::Time(v) => sections.push((format!("{p}.i64"), Cow::Borrowed(v.as_bytes()))),
                ColumnData::Codes { codes, dict } => {
                    sections.push((format!("{p}.codes"), Cow::Borrowed(codes.as_bytes())));
                    sections.push((format!("{p}.doff"), Cow::Borrowed(dict.offsets.as_bytes())));
                    sections.push((format!("{p}.dbytes"), Cow::Borrowed(dict.bytes.as_bytes())));
                }
            }
        }
    }
    for (ei, csr) in index.csr.iter().enumerate() {
        sections.push((format!("e{ei}.off"), Cow::Borrowed(csr.offsets.as_bytes())));
        sections.push((format!("e{ei}.nbr"), Cow::Borrowed(csr.nbrs.as_bytes())));
        sections.push((format!("e{ei}.time"), Cow::Borrowed(csr.times.as_bytes())));
    }

    let mut header = vec![0u8; HEADER_LEN];
    header[0..4].copy_from_slice(&MAGIC);
    header[4..8].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
    header[8..12].copy_from_slice(&(sections.len() as u32).to_le_bytes());
    header[12..16].copy_from_slice(&(graph.tables().len() as u32).to_le_bytes());
    header[16..20].copy_from_slice(&(graph.schema().links.len() as u32).to_le_bytes());

    let mut offset = align(HEADER_LEN + ENTRY_LEN * sections.len());
    let mut table = Vec::with_capacity(ENTRY_LEN * sections.len());
    let mut offsets = Vec::with_capacity(sections.len());
    for (name, bytes) in &sections {
        if name.len() >= NAME_LEN {
            return Err(ColstoreError::Corrupt(format!("section name too long: {name}")));
        }
        let mut entry = [0u8; ENTRY_LEN];
        entry[..name.len()].copy_from_slice(name.as_bytes());
        entry[NAME_LEN..NAME_LEN + 8].copy_from_slice(&(offset as u64).to_le_bytes());
        entry[NAME_LEN + 8..].copy_from_slice(&(bytes.len() as u64).to_le_bytes());
        table.extend_from_slice(&entry);
        offsets.push(offset);
        offset = align(offset + bytes.len());
    }

    let file = File::create(path).map_err(io_err(path))?;
    let mut w = std::io::BufWriter::new(file);
    let mut pos = 0usize;
    let put = |w: &mut std::io::BufWriter<File>, b: &[u8], pos: &mut usize| {
        *pos += b.len();
        w.write_all(b)
    };
    put(&mut w, &header, &mut pos).map_err(io_err(path))?;
    put(&mut w, &table, &mut pos).map_err(io_err(path))?;
    for ((_, bytes), off) in sections.iter().zip(&offsets) {
        let pad = vec![0u8; off - pos];
        put(&mut w, &pad, &mut pos).map_err(io_err(path))?;
        put(&mut w, bytes, &mut pos).map_err(io_err(path))?;
    }
    let pad = vec![0u8; align(pos) - pos];
    put(&mut w, &pad, &mut pos).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))?;
    Ok(())
}

struct Sections {
    map: Arc<Mmap>,
    entries: Vec<(String, usize, usize)>,
}

impl Sections {
    fn find(&self, name: &str) -> Result<(usize, usize), ColstoreError> {
        self.entries
            .iter()
            .find(|e| e.0 == name)
            .map(|e| (e.1, e.2))
            .ok_or_else(|| ColstoreError::Truncated {
                section: name.to_string(),
            })
    }

    fn bytes(&self, name: &str) -> Result<&[u8], ColstoreError> {
        let (o, l) = self.find(name)?;
        Ok(&self.map[o..o + l])
    }

    fn buf<T: Pod>(&self, name: &str, expect_len: Option<usize>) -> Result<Buf<T>, ColstoreError> {
        let (offset, bytes) = self.find(name)?;
        let size = std::mem::size_of::<T>();
        if bytes % size != 0 || offset % std::mem::align_of::<T>() != 0 {
            return Err(ColstoreError::Corrupt(format!("misaligned section '{name}'")));
        }
        let len = bytes / size;
        if expect_len.is_some_and(|e| e != len) {
            return Err(ColstoreError::Corrupt(format!(
                "section '{name}' holds {len} values, expected {}",
                expect_len.unwrap_or(0)
            )));
        }
        Ok(Buf::Mapped {
            map: Arc::clone(&self.map),
            offset,
            len,
        })
    }
}

fn read_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().expect("4 bytes"))
}

fn read_u64(b: &[u8], at: usize) -> u64 {
    u64::from_le_bytes(b[at..at + 8].try_into().expect("8 bytes"))
}

/// Maps a store file. Only the header, section table and the two small JSON sections
/// are parsed; column and adjacency arrays are referenced in place.
pub fn load_store(path: &Path) -> Result<Store, ColstoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    // SAFETY: the mapping is read-only; store files are not modified while mapped.
    let map = unsafe { Mmap::map(&file) }.map_err(io_err(path))?;
    if map.len() < 4 {
        return Err(ColstoreError::Truncated {
            section: "header".into(),
        });
    }
    let found: [u8; 4] = map[0..4].try_into().expect("4 bytes");
    if found != MAGIC {
        return Err(ColstoreError::BadMagic { found });
    }
    if map.len() < HEADER_LEN {
        return Err(ColstoreError::Truncated {
            section: "header".into(),
        });
    }
    let version = read_u32(&map, 4);
    if version != FORMAT_VERSION {
        return Err(ColstoreError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let n_sections = read_u32(&map, 8) as usize;
    let table_end = HEADER_LEN + n_sections * ENTRY_LEN;
    if map.len() < table_end {
        return Err(ColstoreError::Truncated {
            section: "section table".into(),
        });
    }
    let mut entries = Vec::with_capacity(n_sections);
    for i in 0..n_sections {
        let e = &map[HEADER_LEN + i * ENTRY_LEN..HEADER_LEN + (i + 1) * ENTRY_LEN];
        let name_len = e[..NAME_LEN].iter().position(|&b| b == 0).unwrap_or(NAME_LEN);
        let name = String::from_utf8_lossy(&e[..name_len]).into_owned();
        let offset = read_u64(e, NAME_LEN) as usize;
        let len = read_u64(e, NAME_LEN + 8) as usize;
        if offset.checked_add(len).is_none_or(|end| end > map.len()) {
            return Err(ColstoreError::Truncated { section: name });
        }
        entries.push((name, offset, len));
    }
    let sections = Sections {
        map: Arc::new(map),
        entries,
    };
    let schema = Schema::from_json(
        std::str::from_utf8(sections.bytes("schema")?)
            .map_err(|e| ColstoreError::Corrupt(format!("schema section: {e}")))?,
    )
    .map_err(|e| ColstoreError::Corrupt(format!("schema section: {e}")))?;
    let meta: Meta = serde_json::from_slice(sections.bytes("meta")?)
        .map_err(|e| ColstoreError::Corrupt(format!("meta section: {e}")))?;
    if meta.tables.len() != schema.tables.len() {
        return Err(ColstoreError::Corrupt("table count mismatch".into()));
    }

    let mut tables = Vec::with_capacity(meta.tables.len());
    for (ti, t) in meta.tables.iter().enumerate() {
        let times = sections.buf::<i64>(&format!("t{ti}.times"), Some(t.rows))?;
        let mut columns = Vec::with_capacity(t.columns.len());
        for (ci, c) in t.columns.iter().enumerate() {
            let p = format!("t{ti}.c{ci}");
            let valid = Bitmap {
                bits: sections.buf::<u8>(&format!("{p}.valid"), Some(t.rows.div_ceil(8)))?,
                len: t.rows,
            };
            let data = match c.kind {
                Kind::F64 => ColumnData::Float(sections.buf(&format!("{p}.f64"), Some(t.rows))?),
                Kind::I64 => ColumnData::Time(sections.buf(&format!("{p}.i64"), Some(t.rows))?),
                Kind::Codes => ColumnData::Codes {
                    codes: sections.buf(&format!("{p}.codes"), Some(t.rows))?,
                    dict: Dictionary {
                        offsets: sections.buf(&format!("{p}.doff"), None)?,
                        bytes: sections.buf(&format!("{p}.dbytes"), None)?,
                    },
                },
            };
            columns.push(Column {
                name: c.name.clone(),
                stype: c.stype,
                data,
                valid,
            });
        }
        tables.push((columns, times));
    }
    let graph = TemporalGraph::from_loaded(schema, tables);

    let mut csr = Vec::with_capacity(meta.edge_types.len());
    for (ei, info) in meta.edge_types.iter().enumerate() {
        let rows = graph
            .tables()
            .get(info.from_table as usize)
            .ok_or_else(|| ColstoreError::Corrupt(format!("edge type {ei} source table")))?
            .row_count();
        let offsets: Buf<u64> = sections.buf(&format!("e{ei}.off"), Some(rows + 1))?;
        let edges = offsets.last().copied().unwrap_or(0) as usize;
        csr.push(Csr {
            offsets,
            nbrs: sections.buf(&format!("e{ei}.nbr"), Some(edges))?,
            times: sections.buf(&format!("e{ei}.time"), Some(edges))?,
        });
    }
    let index = AdjacencyIndex {
        types: meta.edge_types,
        csr,
        dangling: meta.dangling,
    };
    Ok(Store::new(graph, index))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relgraph::{build_graph, infer_schema, RawColumn, RawTable};

    fn store() -> Store {
        let col = |n: &str, v: Vec<String>| RawColumn {
            name: n.into(),
            values: v.into_iter().map(Some).collect(),
        };
        let users = RawTable {
            name: "users".into(),
            columns: vec![
                col("user_id", (0..5).map(|i| format!("u{i}")).collect()),
                col("age", (0..5).map(|i| format!("{}", 20 + i)).collect()),
            ],
        };
        let orders = RawTable {
            name: "orders".into(),
            columns: vec![
                col("order_id", (0..30).map(|i| format!("o{i}")).collect()),
                col("user_id", (0..30).map(|i| format!("u{}", i % 5)).collect()),
                col("price", (0..30).map(|i| format!("{}.5", i)).collect()),
                col(
                    "order_time",
                    (0..30).map(|i| format!("2024-02-{:02}", 1 + (i * 7) % 28)).collect(),
                ),
            ],
        };
        let data = [users, orders];
        let schema = infer_schema(&data).unwrap();
        Store::build(build_graph(&schema, &data).unwrap())
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.rlct");
        let b = dir.path().join("b.rlct");
        let s = store();
        save_store(&s, &a).unwrap();
        let loaded = load_store(&a).unwrap();
        assert!(loaded.graph.table(1).times_buf().is_mapped());
        save_store(&loaded, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        let bytes = std::fs::read(&a).unwrap();
        assert_eq!(bytes.len() % 64, 0);
    }

    #[test]
    fn bad_magic_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.rlct");
        save_store(&store(), &a).unwrap();
        let mut bytes = std::fs::read(&a).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        std::fs::write(&a, &bytes).unwrap();
        let err = load_store(&a).unwrap_err();
        assert!(matches!(err, ColstoreError::BadMagic { found } if &found == b"XXXX"));
        assert!(err.to_string().contains("magic"));
    }

    #[test]
    fn version_and_truncation_errors() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.rlct");
        save_store(&store(), &a).unwrap();
        let good = std::fs::read(&a).unwrap();
        let mut bytes = good.clone();
        bytes[4] = 9;
        std::fs::write(&a, &bytes).unwrap();
        assert!(matches!(load_store(&a), Err(ColstoreError::Version { found: 9, .. })));
        std::fs::write(&a, &good[..good.len() - 128]).unwrap();
        assert!(matches!(load_store(&a), Err(ColstoreError::Truncated { .. })));
    }
}
