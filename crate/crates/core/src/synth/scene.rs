use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::RngState;

/// Distinct values per attribute.
pub const VALUES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Attribute {
    Color,
    Shape,
    Count,
    Position,
}

pub const ATTRIBUTES: [Attribute; 4] = [
    Attribute::Color,
    Attribute::Shape,
    Attribute::Count,
    Attribute::Position,
];

impl Attribute {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Attribute::Color => "color",
            Attribute::Shape => "shape",
            Attribute::Count => "count",
            Attribute::Position => "position",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Attribute {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ATTRIBUTES
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown attribute {s:?}")))
    }
}

/// One synthetic image: four categorical attributes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scene {
    pub color: u8,
    pub shape: u8,
    /// Object count in `1..=8`.
    pub count: u8,
    pub position: u8,
}

impl Scene {
    pub fn new(color: u8, shape: u8, count: u8, position: u8) -> Result<Self> {
        let s = Self {
            color,
            shape,
            count,
            position,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let v = VALUES as u8;
        if self.color >= v || self.shape >= v || !(1..=v).contains(&self.count) || self.position >= v {
            return Err(Error::InvalidArgument(format!("scene out of range: {self:?}")));
        }
        Ok(())
    }

    /// Attribute value as an index in `0..VALUES`.
    pub fn value(&self, a: Attribute) -> usize {
        match a {
            Attribute::Color => self.color as usize,
            Attribute::Shape => self.shape as usize,
            Attribute::Count => self.count as usize - 1,
            Attribute::Position => self.position as usize,
        }
    }

    /// Copy with one attribute replaced by value index `v`.
    pub fn with_value(mut self, a: Attribute, v: usize) -> Self {
        let v = v as u8;
        match a {
            Attribute::Color => self.color = v,
            Attribute::Shape => self.shape = v,
            Attribute::Count => self.count = v + 1,
            Attribute::Position => self.position = v,
        }
        self
    }

    pub fn from_values(values: [usize; 4]) -> Result<Self> {
        Self::new(
            values[0] as u8,
            values[1] as u8,
            values[2] as u8 + 1,
            values[3] as u8,
        )
    }

    pub fn random(rng: &mut RngState) -> Self {
        Self {
            color: rng.below(VALUES) as u8,
            shape: rng.below(VALUES) as u8,
            count: rng.below(VALUES) as u8 + 1,
            position: rng.below(VALUES) as u8,
        }
    }
}

impl fmt::Display for Scene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "color={} shape={} count={} position={}",
            self.color, self.shape, self.count, self.position
        )
    }
}

impl FromStr for Scene {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut vals = [None; 4];
        for field in line.split_whitespace() {
            let (k, v) = field
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("malformed field {field:?}")))?;
            let a: Attribute = k.parse()?;
            let v: u8 = v
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad value in {field:?}")))?;
            vals[a.index()] = Some(v);
        }
        match vals {
            [Some(c), Some(s), Some(n), Some(p)] => Scene::new(c, s, n, p),
            _ => Err(Error::InvalidArgument(format!("incomplete scene record {line:?}"))),
        }
    }
}

/// `n` scenes with independently uniform attributes. Scene `i` is drawn from
/// the stream derived from `(rng, i)`, so any prefix is stable.
pub fn generate_scenes(n: usize, rng: &RngState) -> Result<Vec<Scene>> {
    if n == 0 {
        return Err(Error::InvalidArgument("generate_scenes needs n >= 1".into()));
    }
    Ok((0..n)
        .map(|i| Scene::random(&mut rng.derive(i as u64)))
        .collect())
}

/// One `key=value` record per line.
pub fn write_scenes<W: Write>(mut w: W, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        writeln!(w, "{s}")?;
    }
    Ok(())
}

pub fn read_scenes<R: BufRead>(r: R) -> Result<Vec<Scene>> {
    r.lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| l?.parse())
        .collect()
}
