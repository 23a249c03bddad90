//! Bundle archive: `u16 count`, then per class `u16 name_len, name,
//! u32 payload_len, classfile bytes`.

use crate::codec::{ByteReader, ByteWriter, Truncated};

use super::classfile::{parse_classfile, serialize_classfile, ClassFile, ClassFileError};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BundleEntry {
    pub name: String,
    pub class: ClassFile,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Bundle {
    pub entries: Vec<BundleEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BundleError {
    #[error("truncated bundle at byte offset {offset}")]
    Truncated { offset: usize },
    #[error("invalid UTF-8 entry name at byte offset {offset}")]
    BadName { offset: usize },
    #[error("class {name:?} (payload at byte offset {offset}): {source}")]
    Class {
        name: String,
        offset: usize,
        #[source]
        source: ClassFileError,
    },
    #[error("{0} trailing bytes after bundle")]
    TrailingBytes(usize),
    #[error("bundle too large: {0}")]
    TooLarge(String),
}

impl BundleError {
    /// Absolute byte offset of the failure, when known.
    pub fn offset(&self) -> Option<usize> {
        match self {
            BundleError::Truncated { offset } | BundleError::BadName { offset } => Some(*offset),
            BundleError::Class { offset, source, .. } => match source {
                ClassFileError::TruncatedInput { offset: inner } => Some(offset + inner),
                _ => Some(*offset),
            },
            _ => None,
        }
    }
}

impl From<Truncated> for BundleError {
    fn from(t: Truncated) -> Self {
        BundleError::Truncated { offset: t.offset }
    }
}

impl Bundle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, class: ClassFile) -> Result<(), ClassFileError> {
        let name = class.name()?.to_string();
        self.entries.push(BundleEntry { name, class });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ClassFile> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.class)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn parse(bytes: &[u8]) -> Result<Bundle, BundleError> {
        let mut r = ByteReader::new(bytes);
        let count = r.u16()?;
        let mut entries = Vec::with_capacity(count.min(256) as usize);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name_off = r.offset();
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| BundleError::BadName { offset: name_off })?
                .to_string();
            let payload_len = r.u32()? as usize;
            let offset = r.offset();
            let payload = r.take(payload_len)?;
            let class = parse_classfile(payload).map_err(|source| BundleError::Class {
                name: name.clone(),
                offset,
                source,
            })?;
            entries.push(BundleEntry { name, class });
        }
        if !r.is_empty() {
            return Err(BundleError::TrailingBytes(r.remaining()));
        }
        Ok(Bundle { entries })
    }

    pub fn serialize(&self) -> Result<Vec<u8>, BundleError> {
        let mut w = ByteWriter::new();
        let count = u16::try_from(self.entries.len()).map_err(|_| BundleError::TooLarge("class count".into()))?;
        w.u16(count);
        for e in &self.entries {
            let payload = serialize_classfile(&e.class).map_err(|source| BundleError::Class {
                name: e.name.clone(),
                offset: w.len(),
                source,
            })?;
            let name_len = u16::try_from(e.name.len()).map_err(|_| BundleError::TooLarge("entry name".into()))?;
            w.u16(name_len).bytes(e.name.as_bytes()).blob32(&payload);
        }
        Ok(w.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_bundle_is_two_zero_bytes() {
        assert_eq!(Bundle::new().serialize().unwrap(), vec![0, 0]);
        assert!(Bundle::parse(&[0, 0]).unwrap().is_empty());
    }

    #[test]
    fn round_trip() {
        let mut b = Bundle::new();
        b.push(ClassFile::empty("A")).unwrap();
        b.push(ClassFile::empty("pkg/B")).unwrap();
        let bytes = b.serialize().unwrap();
        let back = Bundle::parse(&bytes).unwrap();
        assert_eq!(back, b);
        assert_eq!(back.serialize().unwrap(), bytes);
        assert!(back.get("pkg/B").is_some());
    }

    #[test]
    fn class_error_carries_absolute_offset() {
        let mut b = Bundle::new();
        b.push(ClassFile::empty("A")).unwrap();
        let mut bytes = b.serialize().unwrap();
        let cut = bytes.len() - 3;
        // shrink declared payload so the class is truncated inside
        bytes.truncate(cut);
        let err = Bundle::parse(&bytes).unwrap_err();
        assert!(err.offset().is_some());
    }
}
