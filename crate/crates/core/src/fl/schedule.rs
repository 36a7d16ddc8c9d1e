use thiserror::Error;

#[cfg(feature = "serde")]
use serde::{Deserialize, Serialize};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum RatioError {
    #[error("ratio denominator must be positive")]
    ZeroTotal,
    #[error("ratio {syn}/{tot} exceeds one")]
    AboveOne { syn: u32, tot: u32 },
}

/// Fraction `syn/tot` of interleaved rounds, kept in lowest terms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(Serialize, Deserialize))]
#[cfg_attr(feature = "serde", serde(try_from = "alloc::string::String", into = "alloc::string::String"))]
pub struct InterleaveRatio {
    syn: u32,
    tot: u32,
}

fn gcd(mut a: u32, mut b: u32) -> u32 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl InterleaveRatio {
    pub const ZERO: Self = Self { syn: 0, tot: 1 };
    pub const ONE: Self = Self { syn: 1, tot: 1 };

    pub fn new(syn: u32, tot: u32) -> Result<Self, RatioError> {
        if tot == 0 {
            return Err(RatioError::ZeroTotal);
        }
        if syn > tot {
            return Err(RatioError::AboveOne { syn, tot });
        }
        let g = gcd(syn, tot).max(1);
        Ok(Self { syn: syn / g, tot: tot / g })
    }

    pub fn syn(&self) -> u32 {
        self.syn
    }

    pub fn tot(&self) -> u32 {
        self.tot
    }

    pub fn value(&self) -> f64 {
        self.syn as f64 / self.tot as f64
    }

    pub fn is_zero(&self) -> bool {
        self.syn == 0
    }

    pub fn is_one(&self) -> bool {
        self.syn == self.tot
    }

    /// The grid used for interleaving methods; PI also runs at 1.
    pub fn grid() -> [Self; 6] {
        [Self::ZERO, Self { syn: 1, tot: 4 }, Self { syn: 2, tot: 5 }, Self { syn: 1, tot: 2 }, Self { syn: 3, tot: 5 }, Self { syn: 3, tot: 4 }]
    }
}

impl core::fmt::Display for InterleaveRatio {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        if self.syn == 0 || self.syn == self.tot {
            write!(f, "{}", self.syn)
        } else {
            write!(f, "{}/{}", self.syn, self.tot)
        }
    }
}

impl core::str::FromStr for InterleaveRatio {
    type Err = RatioError;

    /// Accepts `"a/b"` or a bare integer `"0"` / `"1"`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (a, b) = match s.split_once('/') {
            Some((a, b)) => (a.trim().parse().map_err(|_| RatioError::ZeroTotal)?, b.trim().parse().map_err(|_| RatioError::ZeroTotal)?),
            None => (s.parse().map_err(|_| RatioError::ZeroTotal)?, 1),
        };
        Self::new(a, b)
    }
}

impl TryFrom<alloc::string::String> for InterleaveRatio {
    type Error = RatioError;

    fn try_from(s: alloc::string::String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<InterleaveRatio> for alloc::string::String {
    fn from(r: InterleaveRatio) -> Self {
        alloc::format!("{r}")
    }
}

/// Round-type predicate for 1-indexed round `t`: `t mod tot < tot − syn`.
/// True marks an authentic round for SI methods and an HE round for PI.
pub fn round_flag(t: u64, ratio: InterleaveRatio) -> bool {
    t % u64::from(ratio.tot) < u64::from(ratio.tot - ratio.syn)
}
