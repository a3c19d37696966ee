use std::fmt;
use std::str::FromStr;

use super::DurationMs;

pub const DEFAULT_MAX_ATTEMPTS: u32 = 5;

/// How an end-host treats slow or failing connects while measuring.
#[derive(Clone, Debug, PartialEq)]
pub enum Strategy {
    /// Retry failed connects immediately, up to `max_attempts` in total.
    BaselineReconnect { max_attempts: u32 },
    /// Single attempt; a failed OH is dropped from the candidate set.
    NoReconnect,
    /// Single attempt abandoned after `timeout`.
    AppTimeout { timeout: DurationMs },
    /// Probe only the OHs of the end-host's own sub-group.
    Partitioned { groups: u32, inner: Box<Strategy> },
}

impl Default for Strategy {
    fn default() -> Self {
        Strategy::BaselineReconnect {
            max_attempts: DEFAULT_MAX_ATTEMPTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid strategy `{input}`: {reason}")]
pub struct StrategyParseError {
    pub input: String,
    pub reason: &'static str,
}

impl Strategy {
    pub fn app_timeout(ms: f64) -> Self {
        Strategy::AppTimeout {
            timeout: DurationMs::new(ms),
        }
    }

    /// The per-connect policy after removing any partitioning layer.
    pub fn connect_policy(&self) -> &Strategy {
        match self {
            Strategy::Partitioned { inner, .. } => inner.connect_policy(),
            s => s,
        }
    }

    pub fn group_count(&self) -> Option<u32> {
        match self {
            Strategy::Partitioned { groups, .. } => Some(*groups),
            _ => None,
        }
    }

    /// Application timeout applied to each connect attempt, if any.
    pub fn connect_timeout(&self) -> Option<DurationMs> {
        match self.connect_policy() {
            Strategy::AppTimeout { timeout } => Some(*timeout),
            _ => None,
        }
    }

    pub fn max_attempts(&self) -> u32 {
        match self.connect_policy() {
            Strategy::BaselineReconnect { max_attempts } => *max_attempts,
            _ => 1,
        }
    }

    pub fn validate(&self) -> Result<(), &'static str> {
        match self {
            Strategy::BaselineReconnect { max_attempts } if *max_attempts < 1 => {
                Err("max_attempts must be at least 1")
            }
            Strategy::AppTimeout { timeout } if timeout.ms() <= 0.0 => {
                Err("timeout must be positive")
            }
            Strategy::Partitioned { groups, .. } if *groups < 1 => {
                Err("group count must be at least 1")
            }
            Strategy::Partitioned { inner, .. } => {
                if matches!(**inner, Strategy::Partitioned { .. }) {
                    Err("partitioning cannot be nested")
                } else {
                    inner.validate()
                }
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Strategy::BaselineReconnect { max_attempts } => write!(f, "baseline:{max_attempts}"),
            Strategy::NoReconnect => f.write_str("noreconnect"),
            Strategy::AppTimeout { timeout } => write!(f, "apptimeout:{timeout}"),
            Strategy::Partitioned { groups, inner } => write!(f, "partition:{groups}+{inner}"),
        }
    }
}

impl FromStr for Strategy {
    type Err = StrategyParseError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = |reason| StrategyParseError {
            input: s.to_string(),
            reason,
        };
        let (head, arg) = match s.split_once(':') {
            Some((h, a)) => (h, Some(a)),
            None => (s, None),
        };
        let parsed = match (head, arg) {
            ("baseline", None) => Strategy::default(),
            ("baseline", Some(n)) => Strategy::BaselineReconnect {
                max_attempts: n.parse().map_err(|_| err("bad attempt count"))?,
            },
            ("noreconnect", None) => Strategy::NoReconnect,
            ("apptimeout", Some(ms)) => {
                let ms: f64 = ms.parse().map_err(|_| err("bad timeout"))?;
                Strategy::AppTimeout {
                    timeout: DurationMs::try_new(ms).ok_or_else(|| err("bad timeout"))?,
                }
            }
            ("partition", Some(rest)) => {
                let (g, inner) = rest
                    .split_once('+')
                    .ok_or_else(|| err("expected partition:<groups>+<inner>"))?;
                Strategy::Partitioned {
                    groups: g.parse().map_err(|_| err("bad group count"))?,
                    inner: Box::new(inner.parse()?),
                }
            }
            _ => return Err(err("unknown strategy")),
        };
        parsed.validate().map_err(err)?;
        Ok(parsed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_all_forms() {
        assert_eq!("baseline".parse::<Strategy>().unwrap(), Strategy::default());
        assert_eq!(
            "baseline:3".parse::<Strategy>().unwrap(),
            Strategy::BaselineReconnect { max_attempts: 3 }
        );
        assert_eq!("noreconnect".parse::<Strategy>().unwrap(), Strategy::NoReconnect);
        assert_eq!(
            "apptimeout:10000".parse::<Strategy>().unwrap(),
            Strategy::app_timeout(10_000.0)
        );
        let p: Strategy = "partition:5+apptimeout:10000".parse().unwrap();
        assert_eq!(p.group_count(), Some(5));
        assert_eq!(p.connect_timeout(), Some(DurationMs::new(10_000.0)));
        assert_eq!(p.to_string().parse::<Strategy>().unwrap(), p);
    }

    #[test]
    fn rejects_invalid_parameters() {
        for bad in [
            "baseline:0",
            "apptimeout:0",
            "apptimeout:-5",
            "partition:0+noreconnect",
            "partition:2+partition:2+noreconnect",
            "partition:2",
            "fastest",
        ] {
            assert!(bad.parse::<Strategy>().is_err(), "{bad} should be rejected");
        }
    }
}
