//! In-memory corpus and its on-disk format.
//!
//! ```text
//! magic    8 bytes "TCANCRP\0"
//! version  u32
//! dim      u32
//! records  u32
//! per record:
//!   video u32, category u32 (u32::MAX = none),
//!   raw_boxes u32, centroids u32, title_words u32, queries u32
//!   per query: id u32, words u32, relevant u32, relevant × u32 video ids
//!   payload f32: raw boxes, centroids, title, then each query's words,
//!   every block dim × count in row-major order
//! ```
//! Little-endian throughout.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::kmeans::cluster_boxes;
use crate::binio::*;
use crate::error::{Error, Result};
use crate::model::{QueryFeatures, VideoFeatures, VideoId};
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: [u8; 8] = *b"TCANCRP\0";
pub const CORPUS_VERSION: u32 = 1;
const NO_CATEGORY: u32 = u32::MAX;

#[derive(Clone, Debug, PartialEq)]
pub struct QueryRecord {
    pub id: u32,
    pub features: QueryFeatures,
    /// Relevant videos, ascending. Always contains the owning record's video.
    pub relevant: Vec<VideoId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub video: VideoId,
    /// Unclustered box features, `dim × B`.
    pub raw_boxes: Option<Tensor>,
    /// Box-centroid tokens, `dim × K`.
    pub centroids: Option<Tensor>,
    pub title: Option<Tensor>,
    pub category: Option<u32>,
    pub queries: Vec<QueryRecord>,
}

impl CorpusRecord {
    /// Scorer input for this video. Raw boxes must be clustered first.
    pub fn features(&self) -> Result<VideoFeatures> {
        if self.centroids.is_none() && self.raw_boxes.is_some() {
            return Err(Error::input(format!("video {} has unclustered boxes", self.video)));
        }
        VideoFeatures::new(self.video, self.centroids.clone(), self.title.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    dim: usize,
    records: Vec<CorpusRecord>,
}

impl Corpus {
    pub fn new(dim: usize, records: Vec<CorpusRecord>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::input("corpus dimension must be positive"));
        }
        let mut videos = HashSet::new();
        let mut queries = HashSet::new();
        for r in &records {
            if !videos.insert(r.video) {
                return Err(Error::input(format!("duplicate video id {}", r.video)));
            }
            if r.raw_boxes.is_none() && r.centroids.is_none() && r.title.is_none() {
                return Err(Error::input(format!("video {} has no features", r.video)));
            }
            let tensors = r.raw_boxes.iter().chain(&r.centroids).chain(&r.title);
            if tensors
                .chain(r.queries.iter().map(|q| &q.features.words))
                .any(|t| t.rows() != dim)
            {
                return Err(Error::input(format!(
                    "record {} has features of the wrong width",
                    r.video
                )));
            }
            for q in &r.queries {
                if !queries.insert(q.id) {
                    return Err(Error::input(format!("duplicate query id {}", q.id)));
                }
            }
        }
        for q in records.iter().flat_map(|r| &r.queries) {
            if let Some(v) = q.relevant.iter().find(|v| !videos.contains(v)) {
                return Err(Error::input(format!("query {} marks unknown video {v} relevant", q.id)));
            }
        }
        Ok(Self { dim, records })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[CorpusRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn query_count(&self) -> usize {
        self.records.iter().map(|r| r.queries.len()).sum()
    }

    /// `(query, the video it was written for)` in record order.
    pub fn pairs(&self) -> impl Iterator<Item = (&QueryRecord, &CorpusRecord)> {
        self.records.iter().flat_map(|r| r.queries.iter().map(move |q| (q, r)))
    }

    pub fn video_features(&self) -> Result<Vec<VideoFeatures>> {
        self.records.iter().map(CorpusRecord::features).collect()
    }

    pub fn categories(&self) -> HashMap<VideoId, u32> {
        self.records
            .iter()
            .filter_map(|r| r.category.map(|c| (r.video, c)))
            .collect()
    }

    /// Replace raw boxes by `k` centroids wherever centroids are missing.
    pub fn cluster_raw_boxes(&mut self, k: usize, seed: u64) -> Result<()> {
        for r in &mut self.records {
            if let (None, Some(raw)) = (&r.centroids, &r.raw_boxes) {
                r.centroids = Some(cluster_boxes(raw, k, seed ^ r.video.0 as u64)?);
            }
        }
        Ok(())
    }

    /// Visual-only ablation.
    pub fn without_titles(&self) -> Result<Self> {
        let mut c = self.clone();
        c.records.iter_mut().for_each(|r| r.title = None);
        Self::new(c.dim, c.records)
    }

    /// Title-only ablation.
    pub fn without_boxes(&self) -> Result<Self> {
        let mut c = self.clone();
        for r in &mut c.records {
            r.raw_boxes = None;
            r.centroids = None;
        }
        Self::new(c.dim, c.records)
    }
}

fn write_block<W: Write>(w: &mut W, t: &Option<Tensor>) -> Result<()> {
    if let Some(t) = t {
        write_f32s(w, t.data().iter().map(|&v| v as f32))?;
    }
    Ok(())
}

fn count(t: &Option<Tensor>) -> u32 {
    t.as_ref().map_or(0, |t| t.cols() as u32)
}

pub fn write_corpus<W: Write>(w: &mut W, c: &Corpus) -> Result<()> {
    write_preamble(w, CORPUS_MAGIC, CORPUS_VERSION)?;
    write_u32(w, c.dim as u32)?;
    write_u32(w, c.records.len() as u32)?;
    for r in &c.records {
        write_u32(w, r.video.0)?;
        write_u32(w, r.category.unwrap_or(NO_CATEGORY))?;
        for n in [
            count(&r.raw_boxes),
            count(&r.centroids),
            count(&r.title),
            r.queries.len() as u32,
        ] {
            write_u32(w, n)?;
        }
        for q in &r.queries {
            write_u32(w, q.id)?;
            write_u32(w, q.features.len() as u32)?;
            write_u32(w, q.relevant.len() as u32)?;
            for v in &q.relevant {
                write_u32(w, v.0)?;
            }
        }
        write_block(w, &r.raw_boxes)?;
        write_block(w, &r.centroids)?;
        write_block(w, &r.title)?;
        for q in &r.queries {
            write_f32s(w, q.features.words.data().iter().map(|&v| v as f32))?;
        }
    }
    Ok(())
}

fn read_block<R: Read>(r: &mut R, dim: usize, n: u32) -> Result<Option<Tensor>> {
    if n == 0 {
        return Ok(None);
    }
    let values = read_f32s(r, dim * n as usize)?;
    Ok(Some(Tensor::from_vec(
        dim,
        n as usize,
        values.into_iter().map(f64::from).collect(),
    )?))
}

pub fn read_corpus<R: Read>(r: &mut R) -> Result<Corpus> {
    read_preamble(r, CORPUS_MAGIC, CORPUS_VERSION)?;
    let dim = read_u32(r)? as usize;
    let n = read_u32(r)?;
    if dim == 0 {
        return Err(Error::Format("corpus dimension is zero".into()));
    }
    let mut records = Vec::new();
    for _ in 0..n {
        let video = VideoId(read_u32(r)?);
        let category = Some(read_u32(r)?).filter(|&c| c != NO_CATEGORY);
        let raw = read_u32(r)?;
        let cent = read_u32(r)?;
        let title = read_u32(r)?;
        let nq = read_u32(r)?;
        let mut heads = Vec::new();
        for _ in 0..nq {
            let id = read_u32(r)?;
            let words = read_u32(r)?;
            if words == 0 {
                return Err(Error::Format(format!("query {id} has no words")));
            }
            let nrel = read_u32(r)?;
            let relevant = (0..nrel)
                .map(|_| read_u32(r).map(VideoId))
                .collect::<std::io::Result<Vec<_>>>()?;
            heads.push((id, words, relevant));
        }
        let raw_boxes = read_block(r, dim, raw)?;
        let centroids = read_block(r, dim, cent)?;
        let title = read_block(r, dim, title)?;
        let mut queries = Vec::new();
        for (id, words, relevant) in heads {
            let words = read_block(r, dim, words)?.expect("non-empty query");
            queries.push(QueryRecord {
                id,
                features: QueryFeatures::new(words),
                relevant,
            });
        }
        records.push(CorpusRecord {
            video,
            raw_boxes,
            centroids,
            title,
            category,
            queries,
        });
    }
    expect_eof(r)?;
    Corpus::new(dim, records).map_err(|e| Error::Format(format!("inconsistent corpus: {e}")))
}

pub fn save_corpus(c: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_corpus(&mut w, c)?;
    w.flush()?;
    Ok(())
}

pub fn load_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    read_corpus(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn t(d: usize, n: usize, base: f64) -> Tensor {
        Tensor::from_vec(d, n, (0..d * n).map(|i| base + i as f64 * 0.25).collect()).unwrap()
    }

    fn small() -> Corpus {
        let records = vec![
            CorpusRecord {
                video: VideoId(4),
                raw_boxes: Some(t(2, 3, 0.0)),
                centroids: Some(t(2, 2, 1.0)),
                title: None,
                category: Some(1),
                queries: vec![QueryRecord {
                    id: 0,
                    features: QueryFeatures::new(t(2, 2, -1.0)),
                    relevant: vec![VideoId(4), VideoId(9)],
                }],
            },
            CorpusRecord {
                video: VideoId(9),
                raw_boxes: None,
                centroids: None,
                title: Some(t(2, 1, 3.0)),
                category: None,
                queries: vec![],
            },
        ];
        Corpus::new(2, records).unwrap()
    }

    #[test]
    fn round_trip() {
        let c = small();
        let mut b = Vec::new();
        write_corpus(&mut b, &c).unwrap();
        let back = read_corpus(&mut Cursor::new(&b)).unwrap();
        assert_eq!(back, c);
        let mut b2 = Vec::new();
        write_corpus(&mut b2, &back).unwrap();
        assert_eq!(b, b2);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let mut b = Vec::new();
        write_corpus(&mut b, &small()).unwrap();
        assert_eq!(
            read_corpus(&mut Cursor::new(&b[..b.len() - 2])).unwrap_err().kind(),
            "truncated"
        );
        let mut bad = b.clone();
        bad[0] = 0;
        assert_eq!(read_corpus(&mut Cursor::new(&bad)).unwrap_err().kind(), "bad-magic");
    }

    #[test]
    fn validation() {
        let mut c = small();
        c.records[1].video = VideoId(4);
        assert!(Corpus::new(2, c.records).is_err());
        let c = small();
        assert!(c.without_boxes().is_err(), "record 4 would have no tokens");
        let v = c.without_titles().unwrap_err();
        assert_eq!(v.kind(), "input");
    }

    #[test]
    fn raw_boxes_need_clustering() {
        let mut c = small();
        c.records[0].centroids = None;
        assert!(c.records[0].features().is_err());
        c.cluster_raw_boxes(2, 0).unwrap();
        assert_eq!(c.records[0].features().unwrap().box_count(), 2);
    }
}
