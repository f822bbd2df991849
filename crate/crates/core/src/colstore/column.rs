use std::collections::HashMap;
use std::ops::Deref;
use std::sync::Arc;

use bytemuck::Pod;
use memmap2::Mmap;

use crate::relgraph::SemanticType;

/// Sentinel stored in code arrays for null cells.
pub const NULL_CODE: u32 = u32::MAX;

/// A read-only array that is either owned or a window into a mapped store file.
pub enum Buf<T: Pod> {
    Owned(Vec<T>),
    Mapped { map: Arc<Mmap>, offset: usize, len: usize },
}

impl<T: Pod> Buf<T> {
    pub fn as_slice(&self) -> &[T] {
        match self {
            Buf::Owned(v) => v,
            Buf::Mapped { map, offset, len } => {
                let bytes = &map[*offset..*offset + len * std::mem::size_of::<T>()];
                bytemuck::cast_slice(bytes)
            }
        }
    }

    pub fn is_mapped(&self) -> bool {
        matches!(self, Buf::Mapped { .. })
    }

    pub fn as_bytes(&self) -> &[u8] {
        bytemuck::cast_slice(self.as_slice())
    }
}

impl<T: Pod> Deref for Buf<T> {
    type Target = [T];
    fn deref(&self) -> &[T] {
        self.as_slice()
    }
}

impl<T: Pod> Clone for Buf<T> {
    fn clone(&self) -> Self {
        match self {
            Buf::Owned(v) => Buf::Owned(v.clone()),
            Buf::Mapped { map, offset, len } => Buf::Mapped {
                map: Arc::clone(map),
                offset: *offset,
                len: *len,
            },
        }
    }
}

impl<T: Pod + std::fmt::Debug> std::fmt::Debug for Buf<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_list().entries(self.as_slice().iter().take(16)).finish()
    }
}

impl<T: Pod> From<Vec<T>> for Buf<T> {
    fn from(v: Vec<T>) -> Self {
        Buf::Owned(v)
    }
}

/// Validity bitmap: bit set = value present.
#[derive(Clone, Debug)]
pub struct Bitmap {
    pub(crate) bits: Buf<u8>,
    pub(crate) len: usize,
}

impl Bitmap {
    pub fn from_bools(valid: &[bool]) -> Bitmap {
        let mut bits = vec![0u8; valid.len().div_ceil(8)];
        for (i, &v) in valid.iter().enumerate() {
            if v {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        Bitmap {
            bits: Buf::Owned(bits),
            len: valid.len(),
        }
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        self.bits[i / 8] & (1 << (i % 8)) != 0
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn null_count(&self) -> usize {
        (0..self.len).filter(|&i| !self.get(i)).count()
    }
}

/// String dictionary stored as an offsets array plus a UTF-8 blob.
#[derive(Clone, Debug)]
pub struct Dictionary {
    pub(crate) offsets: Buf<u32>,
    pub(crate) bytes: Buf<u8>,
}

impl Dictionary {
    pub fn from_values<S: AsRef<str>>(values: &[S]) -> Dictionary {
        let mut offsets = Vec::with_capacity(values.len() + 1);
        let mut bytes = Vec::new();
        offsets.push(0u32);
        for v in values {
            bytes.extend_from_slice(v.as_ref().as_bytes());
            offsets.push(bytes.len() as u32);
        }
        Dictionary {
            offsets: Buf::Owned(offsets),
            bytes: Buf::Owned(bytes),
        }
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, code: u32) -> &str {
        let (a, b) = (
            self.offsets[code as usize] as usize,
            self.offsets[code as usize + 1] as usize,
        );
        std::str::from_utf8(&self.bytes[a..b]).expect("dictionary holds UTF-8")
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> + '_ {
        (0..self.len() as u32).map(move |c| self.get(c))
    }

    pub fn lookup_map(&self) -> HashMap<&str, u32> {
        self.iter().enumerate().map(|(i, s)| (s, i as u32)).collect()
    }
}

/// Builds a dictionary in first-occurrence order.
#[derive(Default)]
pub struct DictBuilder {
    values: Vec<String>,
    index: HashMap<String, u32>,
}

impl DictBuilder {
    pub fn code(&mut self, s: &str) -> u32 {
        if let Some(&c) = self.index.get(s) {
            return c;
        }
        let c = self.values.len() as u32;
        self.values.push(s.to_string());
        self.index.insert(s.to_string(), c);
        c
    }

    pub fn finish(self) -> Dictionary {
        Dictionary::from_values(&self.values)
    }
}

#[derive(Clone, Debug)]
pub enum ColumnData {
    /// Numerical values; nulls hold NaN.
    Float(Buf<f64>),
    /// Epoch milliseconds; nulls hold `i64::MIN`.
    Time(Buf<i64>),
    /// Dictionary codes; nulls hold [`NULL_CODE`].
    Codes { codes: Buf<u32>, dict: Dictionary },
}

/// One column of one table.
#[derive(Clone, Debug)]
pub struct Column {
    pub name: String,
    pub stype: SemanticType,
    pub data: ColumnData,
    pub valid: Bitmap,
}

impl Column {
    pub fn len(&self) -> usize {
        self.valid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.valid.is_empty()
    }

    #[inline]
    pub fn is_valid(&self, row: usize) -> bool {
        self.valid.get(row)
    }

    pub fn f64_at(&self, row: usize) -> Option<f64> {
        if !self.is_valid(row) {
            return None;
        }
        match &self.data {
            ColumnData::Float(v) => Some(v[row]),
            ColumnData::Time(v) => Some(v[row] as f64),
            ColumnData::Codes { codes, .. } => Some(codes[row] as f64),
        }
    }

    pub fn time_at(&self, row: usize) -> Option<i64> {
        match &self.data {
            ColumnData::Time(v) if self.is_valid(row) => Some(v[row]),
            _ => None,
        }
    }

    pub fn code_at(&self, row: usize) -> Option<u32> {
        match &self.data {
            ColumnData::Codes { codes, .. } if self.is_valid(row) => Some(codes[row]),
            _ => None,
        }
    }

    pub fn dictionary(&self) -> Option<&Dictionary> {
        match &self.data {
            ColumnData::Codes { dict, .. } => Some(dict),
            _ => None,
        }
    }

    pub fn str_at(&self, row: usize) -> Option<&str> {
        match &self.data {
            ColumnData::Codes { codes, dict } if self.is_valid(row) => Some(dict.get(codes[row])),
            _ => None,
        }
    }

    /// Renders a cell back to text; `None` for null.
    pub fn render(&self, row: usize) -> Option<String> {
        if !self.is_valid(row) {
            return None;
        }
        Some(match &self.data {
            ColumnData::Float(v) => format!("{:?}", v[row]),
            ColumnData::Time(v) => crate::time::format_timestamp(v[row]),
            ColumnData::Codes { codes, dict } => dict.get(codes[row]).to_string(),
        })
    }

    pub fn from_f64(name: &str, values: &[Option<f64>]) -> Column {
        Column {
            name: name.to_string(),
            stype: SemanticType::Numerical,
            data: ColumnData::Float(Buf::Owned(values.iter().map(|v| v.unwrap_or(f64::NAN)).collect())),
            valid: Bitmap::from_bools(&values.iter().map(Option::is_some).collect::<Vec<_>>()),
        }
    }

    pub fn from_times(name: &str, values: &[Option<i64>]) -> Column {
        Column {
            name: name.to_string(),
            stype: SemanticType::Timestamp,
            data: ColumnData::Time(Buf::Owned(values.iter().map(|v| v.unwrap_or(i64::MIN)).collect())),
            valid: Bitmap::from_bools(&values.iter().map(Option::is_some).collect::<Vec<_>>()),
        }
    }

    pub fn from_strings<S: AsRef<str>>(name: &str, stype: SemanticType, values: &[Option<S>]) -> Column {
        let mut dict = DictBuilder::default();
        let codes = values
            .iter()
            .map(|v| v.as_ref().map_or(NULL_CODE, |s| dict.code(s.as_ref())))
            .collect();
        Column {
            name: name.to_string(),
            stype,
            data: ColumnData::Codes {
                codes: Buf::Owned(codes),
                dict: dict.finish(),
            },
            valid: Bitmap::from_bools(&values.iter().map(Option::is_some).collect::<Vec<_>>()),
        }
    }

    /// Keeps only the rows selected by `keep`, preserving dictionaries.
    pub fn filter_rows(&self, keep: &[usize]) -> Column {
        let valid = Bitmap::from_bools(&keep.iter().map(|&r| self.is_valid(r)).collect::<Vec<_>>());
        let data = match &self.data {
            ColumnData::Float(v) => ColumnData::Float(Buf::Owned(keep.iter().map(|&r| v[r]).collect())),
            ColumnData::Time(v) => ColumnData::Time(Buf::Owned(keep.iter().map(|&r| v[r]).collect())),
            ColumnData::Codes { codes, dict } => ColumnData::Codes {
                codes: Buf::Owned(keep.iter().map(|&r| codes[r]).collect()),
                dict: dict.clone(),
            },
        };
        Column {
            name: self.name.clone(),
            stype: self.stype,
            data,
            valid,
        }
    }
}
