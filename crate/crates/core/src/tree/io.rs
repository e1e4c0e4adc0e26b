//! Tree index file format.
//!
//! ```text
//! magic        8 bytes "TCANIDX\0"
//! version      u32
//! videos       u64
//! depth        u32
//! dim          u32
//! node_count   u32
//! seed         u64
//! iterations   u32
//! checksum     u64   embedding table checksum
//! fingerprint  u64   model fingerprint, 0 if unknown
//! node_count records, breadth-first:
//!   id u32, depth u32, left u32, right u32, medoid u32, dim × f32
//! ```
//! Leaves store `u32::MAX` in both child slots. Little-endian throughout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{BuildMetadata, NodeId, TreeIndex, TreeNode};
use crate::binio::*;
use crate::error::{Error, Result};
use crate::model::VideoId;

pub const INDEX_MAGIC: [u8; 8] = *b"TCANIDX\0";
pub const INDEX_VERSION: u32 = 1;
const NO_CHILD: u32 = u32::MAX;

pub fn write_index<W: Write>(w: &mut W, t: &TreeIndex) -> Result<()> {
    write_preamble(w, INDEX_MAGIC, INDEX_VERSION)?;
    write_u64(w, t.len() as u64)?;
    write_u32(w, t.depth())?;
    write_u32(w, t.dim() as u32)?;
    write_u32(w, t.node_count() as u32)?;
    let m = t.metadata();
    write_u64(w, m.seed)?;
    write_u32(w, m.medoid_iterations)?;
    write_u64(w, m.embedding_checksum)?;
    write_u64(w, m.model_fingerprint)?;
    for n in t.nodes() {
        let (left, right) = match n.children.as_slice() {
            [l, r] => (l.0, r.0),
            _ => (NO_CHILD, NO_CHILD),
        };
        for v in [n.id.0, n.depth, left, right, n.medoid.0] {
            write_u32(w, v)?;
        }
        write_f32s(w, n.embedding.iter().copied())?;
    }
    Ok(())
}

pub fn read_index<R: Read>(r: &mut R) -> Result<TreeIndex> {
    read_preamble(r, INDEX_MAGIC, INDEX_VERSION)?;
    let videos = read_u64(r)?;
    let depth = read_u32(r)?;
    let dim = read_u32(r)? as usize;
    let node_count = read_u32(r)? as usize;
    let meta = BuildMetadata {
        seed: read_u64(r)?,
        medoid_iterations: read_u32(r)?,
        embedding_checksum: read_u64(r)?,
        model_fingerprint: read_u64(r)?,
    };
    if videos == 0 || node_count as u64 != 2 * videos - 1 {
        return Err(Error::Format(format!("{videos} videos cannot form {node_count} nodes")));
    }
    let mut nodes = Vec::with_capacity(node_count);
    for _ in 0..node_count {
        let id = read_u32(r)?;
        let node_depth = read_u32(r)?;
        let left = read_u32(r)?;
        let right = read_u32(r)?;
        let medoid = read_u32(r)?;
        let children = match (left, right) {
            (NO_CHILD, NO_CHILD) => Vec::new(),
            (NO_CHILD, _) | (_, NO_CHILD) => {
                return Err(Error::Format(format!("node {id} has a single child")));
            }
            (l, r) => vec![NodeId(l), NodeId(r)],
        };
        nodes.push(TreeNode {
            id: NodeId(id),
            depth: node_depth,
            parent: None,
            children,
            medoid: VideoId(medoid),
            embedding: read_f32s(r, dim)?,
            members: Vec::new(),
        });
    }
    expect_eof(r)?;
    let tree = TreeIndex::from_nodes(nodes, dim, meta)?;
    if tree.depth() != depth {
        return Err(Error::Format(format!(
            "header depth {depth} but tree depth {}",
            tree.depth()
        )));
    }
    Ok(tree)
}

pub fn save_index(t: &TreeIndex, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_index(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_index(path: impl AsRef<Path>) -> Result<TreeIndex> {
    read_index(&mut BufReader::new(File::open(path)?))
}
