//! Versioned binary index file.
//!
//! Layout (little endian): magic, version, doc count, avgdl, k1, b; the item
//! id table and doc lengths; the vocabulary block; then one posting list per
//! term as a varint length, varint doc-id gaps and raw f64 impacts.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use integer_encoding::{VarIntReader, VarIntWriter};

use super::index::{Bm25Index, Bm25Params};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SQRBM25\0";
pub const INDEX_VERSION: u32 = 1;

fn write_str<W: Write>(w: &mut W, s: &str) -> std::io::Result<()> {
    w.write_varint(s.len() as u64)?;
    w.write_all(s.as_bytes())
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let n: u64 = r.read_varint()?;
    if n > 1 << 20 {
        return Err(Error::format("index", format!("string length {n} too large")));
    }
    let mut buf = vec![0; n as usize];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::format("index", e.to_string()))
}

pub fn write_index<W: Write>(w: &mut W, idx: &Bm25Index) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(INDEX_VERSION)?;
    w.write_u64::<LE>(idx.num_docs() as u64)?;
    w.write_f64::<LE>(idx.avgdl)?;
    w.write_f64::<LE>(idx.params.k1)?;
    w.write_f64::<LE>(idx.params.b)?;
    for (id, &len) in idx.item_ids.iter().zip(&idx.doc_lens) {
        write_str(w, id)?;
        w.write_varint(len)?;
    }
    let vocab = idx.vocabulary();
    w.write_varint(vocab.len() as u64)?;
    for t in &vocab {
        write_str(w, t)?;
    }
    for list in &idx.postings {
        w.write_varint(list.len() as u64)?;
        let mut prev = 0u32;
        for &(d, _) in list {
            w.write_varint(d - prev)?;
            prev = d;
        }
        for &(_, s) in list {
            w.write_f64::<LE>(s)?;
        }
    }
    Ok(())
}

pub fn read_index<R: Read>(r: &mut R) -> Result<Bm25Index> {
    let bad = |reason: String| Error::format("index", reason);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("not a BM25 index file".into()));
    }
    let version = r.read_u32::<LE>()?;
    if version != INDEX_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let n_docs = r.read_u64::<LE>()? as usize;
    let avgdl = r.read_f64::<LE>()?;
    let k1 = r.read_f64::<LE>()?;
    let b = r.read_f64::<LE>()?;
    if n_docs == 0 || !(avgdl > 0.0) {
        return Err(bad("empty index header".into()));
    }
    let mut item_ids = Vec::with_capacity(n_docs.min(1 << 20));
    let mut doc_lens = Vec::with_capacity(n_docs.min(1 << 20));
    for _ in 0..n_docs {
        item_ids.push(read_str(r)?);
        doc_lens.push(r.read_varint::<u32>()?);
    }
    let n_terms: u64 = r.read_varint()?;
    let mut terms = HashMap::new();
    for c in 0..n_terms as usize {
        if terms.insert(read_str(r)?, c).is_some() {
            return Err(bad("duplicate vocabulary term".into()));
        }
    }
    let mut postings = Vec::with_capacity(terms.len());
    for _ in 0..n_terms {
        let len: u64 = r.read_varint()?;
        if len as usize > n_docs {
            return Err(bad("posting list longer than the corpus".into()));
        }
        let mut docs = Vec::with_capacity(len as usize);
        let mut d = 0u32;
        for i in 0..len {
            let gap: u32 = r.read_varint()?;
            if i > 0 && gap == 0 {
                return Err(bad("posting doc ids not increasing".into()));
            }
            d += gap;
            if d as usize >= n_docs {
                return Err(bad(format!("doc id {d} out of range")));
            }
            docs.push(d);
        }
        let list = docs
            .into_iter()
            .map(|d| Ok((d, r.read_f64::<LE>()?)))
            .collect::<Result<Vec<_>>>()?;
        postings.push(list);
    }
    Ok(Bm25Index {
        params: Bm25Params { k1, b },
        avgdl,
        doc_lens,
        item_ids,
        terms,
        postings,
    })
}

pub fn save(idx: &Bm25Index, path: &Path) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_index(&mut w, idx)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Bm25Index> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_index(&mut BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::CorpusDoc;
    use crate::retrieval::{bm25_score, build_index};

    fn docs() -> Vec<CorpusDoc> {
        ["red wool sweater", "blue shirt", "red socks red", "wool"]
            .iter()
            .enumerate()
            .map(|(i, t)| CorpusDoc {
                item_id: format!("I{i}"),
                text: t.to_string(),
                tokens: t.split(' ').map(String::from).collect(),
            })
            .collect()
    }

    #[test]
    fn round_trip_is_exact() {
        let idx = build_index(&docs(), Bm25Params::default()).unwrap();
        let mut buf = Vec::new();
        write_index(&mut buf, &idx).unwrap();
        let back = read_index(&mut buf.as_slice()).unwrap();
        assert_eq!(back, idx);
        assert_eq!(bm25_score(&back, &["red", "wool"]), bm25_score(&idx, &["red", "wool"]));
        let mut again = Vec::new();
        write_index(&mut again, &back).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn rejects_damage() {
        let idx = build_index(&docs(), Bm25Params::default()).unwrap();
        let mut buf = Vec::new();
        write_index(&mut buf, &idx).unwrap();
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(read_index(&mut wrong.as_slice()).is_err());
        let mut ver = buf.clone();
        ver[8] = 9;
        assert!(read_index(&mut ver.as_slice()).is_err());
        assert!(read_index(&mut &buf[..buf.len() - 3]).is_err());
    }
}
