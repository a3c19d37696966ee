//! Domain types shared by every other module: node identities, millisecond
//! durations, link and load models, strategies and scenarios.

mod preset;
mod rng;
mod scenario;
mod strategy;

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Sub};
use std::str::FromStr;

pub use preset::{
    apportion, link_profile, oh_preset, eh_preset, region_continent, Continent, LinkProfile,
    TABLE1_OH_COUNTS, TABLE2_EH_COUNTS,
};
pub use rng::{derive_link_rng, derive_rng, RngStream};
pub use scenario::{
    load_scenario, FailureEvent, NetParams, NodeSpec, ScenarioError, ScenarioSpec,
    ScheduledFailure,
};
pub use strategy::{Strategy, StrategyParseError};

/// Host type. The derived order (OH < EH < MH) is part of the global
/// tie-break order on [`NodeId`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    Oh,
    Eh,
    Mh,
}

impl Role {
    pub const fn prefix(self) -> &'static str {
        match self {
            Role::Oh => "oh",
            Role::Eh => "eh",
            Role::Mh => "mh",
        }
    }

    pub const fn to_byte(self) -> u8 {
        match self {
            Role::Oh => 0,
            Role::Eh => 1,
            Role::Mh => 2,
        }
    }

    pub const fn from_byte(b: u8) -> Option<Role> {
        match b {
            0 => Some(Role::Oh),
            1 => Some(Role::Eh),
            2 => Some(Role::Mh),
            _ => None,
        }
    }
}

/// Node identity, ordered by `(role, id)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub role: Role,
    pub id: u32,
}

impl NodeId {
    pub const fn new(role: Role, id: u32) -> Self {
        Self { role, id }
    }

    pub const fn oh(id: u32) -> Self {
        Self::new(Role::Oh, id)
    }

    pub const fn eh(id: u32) -> Self {
        Self::new(Role::Eh, id)
    }

    pub const fn mh(id: u32) -> Self {
        Self::new(Role::Mh, id)
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}{}", self.role.prefix(), self.id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid node id `{0}` (expected oh<n>, eh<n> or mh<n>)")]
pub struct NodeIdParseError(pub String);

impl FromStr for NodeId {
    type Err = NodeIdParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || NodeIdParseError(s.to_string());
        let role = match s.get(..2) {
            Some("oh") => Role::Oh,
            Some("eh") => Role::Eh,
            Some("mh") => Role::Mh,
            _ => return Err(err()),
        };
        let id = s[2..].parse::<u32>().map_err(|_| err())?;
        Ok(NodeId::new(role, id))
    }
}

/// Non-negative duration in milliseconds. All timing arithmetic in the crate
/// uses this unit.
#[derive(Clone, Copy, Debug, Default, PartialEq, PartialOrd)]
pub struct DurationMs(f64);

impl DurationMs {
    pub const ZERO: DurationMs = DurationMs(0.0);

    /// Panics on negative or non-finite input.
    pub fn new(ms: f64) -> Self {
        assert!(ms.is_finite() && ms >= 0.0, "invalid duration {ms} ms");
        Self(ms)
    }

    pub fn try_new(ms: f64) -> Option<Self> {
        (ms.is_finite() && ms >= 0.0).then_some(Self(ms))
    }

    pub fn from_secs(s: f64) -> Self {
        Self::new(s * 1000.0)
    }

    pub const fn ms(self) -> f64 {
        self.0
    }

    pub fn max(self, other: Self) -> Self {
        if other.0 > self.0 {
            other
        } else {
            self
        }
    }

    pub fn min(self, other: Self) -> Self {
        if other.0 < self.0 {
            other
        } else {
            self
        }
    }

    pub fn total_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl fmt::Display for DurationMs {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(&self.0, f)
    }
}

impl Add for DurationMs {
    type Output = DurationMs;
    fn add(self, rhs: Self) -> Self {
        DurationMs(self.0 + rhs.0)
    }
}

impl AddAssign for DurationMs {
    fn add_assign(&mut self, rhs: Self) {
        self.0 += rhs.0;
    }
}

/// Saturates at zero.
impl Sub for DurationMs {
    type Output = DurationMs;
    fn sub(self, rhs: Self) -> Self {
        DurationMs((self.0 - rhs.0).max(0.0))
    }
}

impl Mul<f64> for DurationMs {
    type Output = DurationMs;
    fn mul(self, rhs: f64) -> Self {
        DurationMs::new(self.0 * rhs)
    }
}

impl Div<f64> for DurationMs {
    type Output = DurationMs;
    fn div(self, rhs: f64) -> Self {
        DurationMs::new(self.0 / rhs)
    }
}

impl Sum for DurationMs {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(DurationMs::ZERO, Add::add)
    }
}

/// Per directed region pair network behaviour.
#[derive(Clone, Debug, PartialEq)]
pub struct LinkModel {
    /// One-way latency.
    pub base_latency_ms: DurationMs,
    /// Half-width of the uniform jitter around `base_latency_ms`.
    pub jitter_ms: DurationMs,
    /// Handshake time of an unimpeded connect.
    pub connect_fast_ms: DurationMs,
    pub slow_connect_probability: f64,
    /// Lower bound of the slow connect tail; samples fall in `[slow, 2 * slow)`.
    pub slow_connect_ms: DurationMs,
    pub syn_loss_probability: f64,
    pub drop_probability: f64,
}

impl LinkModel {
    /// A loss-free link with a fixed one-way latency and handshake time.
    pub fn fixed(base_ms: f64, connect_ms: f64) -> Self {
        Self {
            base_latency_ms: DurationMs::new(base_ms),
            jitter_ms: DurationMs::ZERO,
            connect_fast_ms: DurationMs::new(connect_ms),
            slow_connect_probability: 0.0,
            slow_connect_ms: DurationMs::ZERO,
            syn_loss_probability: 0.0,
            drop_probability: 0.0,
        }
    }

    /// Returns the name of the first probability outside `[0, 1]`.
    pub fn invalid_probability(&self) -> Option<(&'static str, f64)> {
        [
            ("slow_p", self.slow_connect_probability),
            ("syn_loss_p", self.syn_loss_probability),
            ("drop_p", self.drop_probability),
        ]
        .into_iter()
        .find(|(_, p)| !(0.0..=1.0).contains(p))
    }
}

/// Node load: `load_factor` scales service delays, `reported_load` is what the
/// node advertises to the monitor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LoadClass {
    pub load_factor: f64,
    pub reported_load: f64,
}

impl LoadClass {
    pub const IDLE: LoadClass = LoadClass {
        load_factor: 0.0,
        reported_load: 0.0,
    };

    /// Simulated nodes report `min(1, load_factor)`.
    pub fn from_factor(load_factor: f64) -> Self {
        assert!(load_factor >= 0.0, "load factor must be non-negative");
        Self {
            load_factor,
            reported_load: load_factor.min(1.0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn node_order_is_role_then_id() {
        let mut ids = vec![NodeId::mh(0), NodeId::eh(1), NodeId::oh(7), NodeId::oh(2)];
        ids.sort();
        assert_eq!(
            ids,
            vec![NodeId::oh(2), NodeId::oh(7), NodeId::eh(1), NodeId::mh(0)]
        );
    }

    #[test]
    fn node_id_display_parses_back() {
        for id in [NodeId::oh(0), NodeId::eh(999), NodeId::mh(3)] {
            assert_eq!(id.to_string().parse::<NodeId>().unwrap(), id);
        }
        assert!("xx1".parse::<NodeId>().is_err());
        assert!("oh".parse::<NodeId>().is_err());
    }

    #[test]
    fn duration_sub_saturates() {
        assert_eq!(DurationMs::new(3.0) - DurationMs::new(5.0), DurationMs::ZERO);
        assert!(DurationMs::try_new(-1.0).is_none());
        assert!(DurationMs::try_new(f64::NAN).is_none());
    }

    #[test]
    fn load_class_reports_capped_factor() {
        assert_eq!(LoadClass::from_factor(0.8).reported_load, 0.8);
        assert_eq!(LoadClass::from_factor(3.0).reported_load, 1.0);
    }
}
