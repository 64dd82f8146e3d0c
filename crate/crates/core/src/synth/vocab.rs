use std::fmt;

use serde::{Deserialize, Serialize};

use super::scene::{Attribute, Scene, ATTRIBUTES, VALUES};
use crate::error::{Error, Result};

pub const VOCAB_SIZE: usize = 48;

/// `[BOS, A, photo, of]` precedes the caption targets.
pub const CAPTION_PROMPT_LEN: usize = 4;

const FIRST_QUERY: usize = 6;
const FIRST_VALUE: usize = FIRST_QUERY + ATTRIBUTES.len();
const FIRST_RESERVED: usize = FIRST_VALUE + ATTRIBUTES.len() * VALUES;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Token {
    Pad,
    Bos,
    Eos,
    A,
    Photo,
    Of,
    Query(Attribute),
    /// Attribute value index in `0..VALUES`.
    Value(Attribute, usize),
    /// Padding of the id space up to `VOCAB_SIZE`; never produced by the data.
    Reserved(usize),
}

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Token::Pad => f.write_str("<pad>"),
            Token::Bos => f.write_str("<bos>"),
            Token::Eos => f.write_str("<eos>"),
            Token::A => f.write_str("A"),
            Token::Photo => f.write_str("photo"),
            Token::Of => f.write_str("of"),
            Token::Query(a) => write!(f, "<q:{a}>"),
            Token::Value(Attribute::Count, v) => write!(f, "count_{}", v + 1),
            Token::Value(a, v) => write!(f, "{a}_{v}"),
            Token::Reserved(i) => write!(f, "<reserved{i}>"),
        }
    }
}

/// Fixed bijection between tokens and ids `0..VOCAB_SIZE`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary;

impl Vocabulary {
    pub fn size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn id(&self, t: Token) -> usize {
        match t {
            Token::Pad => 0,
            Token::Bos => 1,
            Token::Eos => 2,
            Token::A => 3,
            Token::Photo => 4,
            Token::Of => 5,
            Token::Query(a) => FIRST_QUERY + a.index(),
            Token::Value(a, v) => FIRST_VALUE + a.index() * VALUES + v,
            Token::Reserved(i) => FIRST_RESERVED + i,
        }
    }

    pub fn token(&self, id: usize) -> Result<Token> {
        Ok(match id {
            0 => Token::Pad,
            1 => Token::Bos,
            2 => Token::Eos,
            3 => Token::A,
            4 => Token::Photo,
            5 => Token::Of,
            i if i < FIRST_VALUE => Token::Query(ATTRIBUTES[i - FIRST_QUERY]),
            i if i < FIRST_RESERVED => {
                let k = i - FIRST_VALUE;
                Token::Value(ATTRIBUTES[k / VALUES], k % VALUES)
            }
            i if i < VOCAB_SIZE => Token::Reserved(i - FIRST_RESERVED),
            i => return Err(Error::InvalidArgument(format!("token id {i} outside vocabulary"))),
        })
    }

    pub fn value_id(&self, a: Attribute, v: usize) -> usize {
        self.id(Token::Value(a, v))
    }

    /// Ids of the value tokens of one attribute, in value order.
    pub fn value_ids(&self, a: Attribute) -> std::ops::Range<usize> {
        let start = self.value_id(a, 0);
        start..start + VALUES
    }

    pub fn encode(&self, tokens: &[Token]) -> Vec<usize> {
        tokens.iter().map(|&t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<Token>> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).map_or_else(|_| format!("<{i}?>"), |t| t.to_string()))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionTokens {
    pub ids: Vec<usize>,
    /// `loss_mask[t]` marks tokens that are prediction targets.
    pub loss_mask: Vec<bool>,
}

impl CaptionTokens {
    pub fn prompt(&self) -> &[usize] {
        &self.ids[..CAPTION_PROMPT_LEN]
    }

    pub fn targets(&self) -> &[usize] {
        &self.ids[CAPTION_PROMPT_LEN..]
    }
}

/// `[BOS, A, photo, of, color, shape, count, position, EOS]`.
pub fn caption_tokens(scene: &Scene) -> CaptionTokens {
    let v = Vocabulary;
    let mut ids = v.encode(&[Token::Bos, Token::A, Token::Photo, Token::Of]);
    for a in ATTRIBUTES {
        ids.push(v.value_id(a, scene.value(a)));
    }
    ids.push(v.id(Token::Eos));
    let loss_mask = (0..ids.len()).map(|t| t >= CAPTION_PROMPT_LEN).collect();
    CaptionTokens { ids, loss_mask }
}

/// Recover the scene from the caption targets (four value tokens in order,
/// optionally followed by EOS).
pub fn decode_caption(targets: &[usize]) -> Result<Scene> {
    let v = Vocabulary;
    if targets.len() < ATTRIBUTES.len() {
        return Err(Error::InvalidArgument(format!(
            "caption has {} target tokens, need {}",
            targets.len(),
            ATTRIBUTES.len()
        )));
    }
    let mut values = [0usize; 4];
    for (slot, a) in ATTRIBUTES.into_iter().enumerate() {
        match v.token(targets[slot])? {
            Token::Value(b, x) if b == a => values[slot] = x,
            t => {
                return Err(Error::InvalidArgument(format!(
                    "caption slot {slot} expects a {a} token, got {t}"
                )))
            }
        }
    }
    Scene::from_values(values)
}

/// Prompt `[BOS, QUERY_attr]` and the id of the answer value token.
pub fn qa_tokens(scene: &Scene, attribute: &str) -> Result<(Vec<usize>, usize)> {
    let a: Attribute = attribute.parse()?;
    let v = Vocabulary;
    let prompt = v.encode(&[Token::Bos, Token::Query(a)]);
    Ok((prompt, v.value_id(a, scene.value(a))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bijective_over_all_ids() {
        let v = Vocabulary;
        for id in 0..VOCAB_SIZE {
            let t = v.token(id).unwrap();
            assert_eq!(v.id(t), id);
        }
        assert!(v.token(VOCAB_SIZE).is_err());
        let names: std::collections::HashSet<String> =
            (0..VOCAB_SIZE).map(|i| v.token(i).unwrap().to_string()).collect();
        assert_eq!(names.len(), VOCAB_SIZE);
    }

    #[test]
    fn caption_layout() {
        let s = Scene::new(2, 5, 3, 1).unwrap();
        let c = caption_tokens(&s);
        assert_eq!(c.ids.len(), 9);
        let v = Vocabulary;
        assert_eq!(
            &c.ids[4..8],
            &[
                v.value_id(Attribute::Color, 2),
                v.value_id(Attribute::Shape, 5),
                v.value_id(Attribute::Count, 2),
                v.value_id(Attribute::Position, 1),
            ]
        );
        assert_eq!(c.loss_mask, vec![false, false, false, false, true, true, true, true, true]);
        assert_eq!(decode_caption(c.targets()).unwrap(), s);
    }

    #[test]
    fn color_change_touches_one_token() {
        let a = caption_tokens(&Scene::new(2, 5, 3, 1).unwrap());
        let b = caption_tokens(&Scene::new(6, 5, 3, 1).unwrap());
        let diff = a.ids.iter().zip(&b.ids).filter(|(x, y)| x != y).count();
        assert_eq!(diff, 1);
    }

    #[test]
    fn qa_answers_are_distinct() {
        let s = Scene::new(1, 1, 2, 1).unwrap();
        let answers: std::collections::HashSet<usize> = ATTRIBUTES
            .iter()
            .map(|a| qa_tokens(&s, a.name()).unwrap().1)
            .collect();
        assert_eq!(answers.len(), 4);
        assert!(qa_tokens(&s, "texture").is_err());
    }
}
