use std::fmt;

use crate::attention::{HiddenSequence, TokenRole};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct VideoId(pub u32);

impl fmt::Display for VideoId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

/// Word vectors of a text query, one column per word.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryFeatures {
    pub words: Tensor,
    pub text: Option<String>,
}

impl QueryFeatures {
    pub fn new(words: Tensor) -> Self {
        Self { words, text: None }
    }

    pub fn len(&self) -> usize {
        self.words.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.words.rows()
    }
}

/// Local features of a video: box-centroid tokens and title word tokens.
///
/// Either part may be absent (title-only / visual-only ablations) but not both.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFeatures {
    pub id: VideoId,
    pub boxes: Option<Tensor>,
    pub title: Option<Tensor>,
}

impl VideoFeatures {
    pub fn new(id: VideoId, boxes: Option<Tensor>, title: Option<Tensor>) -> Result<Self> {
        let v = Self { id, boxes, title };
        v.validate()?;
        Ok(v)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.boxes, &self.title) {
            (None, None) => Err(Error::input(format!("video {} has no tokens", self.id))),
            (Some(b), Some(t)) if b.rows() != t.rows() => Err(Error::Dimension {
                op: "video features",
                left: b.shape(),
                right: t.shape(),
            }),
            _ => Ok(()),
        }
    }

    pub fn dim(&self) -> usize {
        self.boxes.as_ref().or(self.title.as_ref()).map_or(0, Tensor::rows)
    }

    pub fn box_count(&self) -> usize {
        self.boxes.as_ref().map_or(0, Tensor::cols)
    }

    pub fn title_len(&self) -> usize {
        self.title.as_ref().map_or(0, Tensor::cols)
    }

    pub fn token_count(&self) -> usize {
        self.box_count() + self.title_len()
    }

    /// Drop title tokens (visual-only ablation).
    pub fn without_title(&self) -> Result<Self> {
        Self::new(self.id, self.boxes.clone(), None)
    }

    /// Drop box tokens (title-only ablation).
    pub fn without_boxes(&self) -> Result<Self> {
        Self::new(self.id, None, self.title.clone())
    }
}

/// Sinusoidal position code of width `d` for position `pos`.
pub fn positional_encoding(pos: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn push_words(cols: &mut Vec<Vec<f64>>, roles: &mut Vec<TokenRole>, words: &Tensor, role: TokenRole, positional: bool) {
    for (pos, mut w) in words.columns().enumerate() {
        if positional {
            for (x, p) in w.iter_mut().zip(positional_encoding(pos, words.rows())) {
                *x += p;
            }
        }
        cols.push(w);
        roles.push(role);
    }
}

/// `[query words | box centroids | title words]`, positions added to word
/// tokens only.
pub fn build_input_sequence(q: &QueryFeatures, v: &VideoFeatures, positional: bool) -> Result<HiddenSequence> {
    if q.is_empty() {
        return Err(Error::input("empty query"));
    }
    v.validate()?;
    if q.dim() != v.dim() {
        return Err(Error::Dimension {
            op: "build_input_sequence",
            left: q.words.shape(),
            right: [v.dim(), v.token_count()],
        });
    }
    let mut cols = Vec::with_capacity(q.len() + v.token_count());
    let mut roles = Vec::with_capacity(cols.capacity());
    push_words(&mut cols, &mut roles, &q.words, TokenRole::QueryWord, positional);
    if let Some(b) = &v.boxes {
        cols.extend(b.columns());
        roles.extend(std::iter::repeat_n(TokenRole::BoxCentroid, b.cols()));
    }
    if let Some(t) = &v.title {
        push_words(&mut cols, &mut roles, t, TokenRole::TitleWord, positional);
    }
    HiddenSequence::new(Tensor::from_columns(&cols)?, roles)
}

/// Query words alone (embedding path input, class token added later).
pub fn query_sequence(q: &QueryFeatures, positional: bool) -> Result<HiddenSequence> {
    if q.is_empty() {
        return Err(Error::input("empty query"));
    }
    let mut cols = Vec::new();
    let mut roles = Vec::new();
    push_words(&mut cols, &mut roles, &q.words, TokenRole::QueryWord, positional);
    HiddenSequence::new(Tensor::from_columns(&cols)?, roles)
}

/// Video tokens alone (embedding path input, class token added later).
pub fn video_sequence(v: &VideoFeatures, positional: bool) -> Result<HiddenSequence> {
    v.validate()?;
    let mut cols = Vec::new();
    let mut roles = Vec::new();
    if let Some(b) = &v.boxes {
        cols.extend(b.columns());
        roles.extend(std::iter::repeat_n(TokenRole::BoxCentroid, b.cols()));
    }
    if let Some(t) = &v.title {
        push_words(&mut cols, &mut roles, t, TokenRole::TitleWord, positional);
    }
    HiddenSequence::new(Tensor::from_columns(&cols)?, roles)
}

#[cfg(test)]
mod tests {
    use super::*;
    use TokenRole::*;

    fn tokens(d: usize, n: usize, base: f64) -> Tensor {
        Tensor::from_vec(d, n, (0..d * n).map(|i| base + i as f64).collect()).unwrap()
    }

    #[test]
    fn concatenation_order_and_tags() {
        let q = QueryFeatures::new(tokens(4, 2, 0.0));
        let v = VideoFeatures::new(VideoId(1), Some(tokens(4, 3, 100.0)), Some(tokens(4, 2, 200.0))).unwrap();
        let s = build_input_sequence(&q, &v, true).unwrap();
        assert_eq!(
            s.roles,
            vec![
                QueryWord,
                QueryWord,
                BoxCentroid,
                BoxCentroid,
                BoxCentroid,
                TitleWord,
                TitleWord
            ]
        );
        let boxes = v.boxes.as_ref().unwrap();
        for k in 0..3 {
            assert_eq!(s.tokens.column(2 + k), boxes.column(k));
        }
        let pe1 = positional_encoding(1, 4);
        let want: Vec<f64> = q.words.column(1).iter().zip(&pe1).map(|(a, b)| a + b).collect();
        assert_eq!(s.tokens.column(1), want);
    }

    #[test]
    fn empty_title_and_width_mismatch() {
        let q = QueryFeatures::new(tokens(4, 2, 0.0));
        let v = VideoFeatures::new(VideoId(1), Some(tokens(4, 3, 1.0)), None).unwrap();
        let s = build_input_sequence(&q, &v, true).unwrap();
        assert_eq!(s.len(), 5);
        assert!(!s.roles.contains(&TitleWord));
        assert!(VideoFeatures::new(VideoId(2), None, None).is_err());
        let bad = VideoFeatures::new(VideoId(3), Some(tokens(3, 1, 0.0)), None).unwrap();
        assert!(matches!(
            build_input_sequence(&q, &bad, true),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn positional_code_starts_with_sin_cos_of_zero() {
        assert_eq!(positional_encoding(0, 4), vec![0.0, 1.0, 0.0, 1.0]);
    }
}
