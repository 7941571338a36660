use std::time::Duration;

/// Tree and failure-detection parameters shared by every node of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlayConfig {
    pub max_degree: usize,
    /// A slot whose candidate has not finished connecting by then is purged;
    /// a candidate not connected by then starts over.
    pub candidate_timeout: Duration,
    pub heartbeat_interval: Duration,
    pub heartbeat_timeout: Duration,
    pub status_interval: Duration,
    /// Replaces the per-child `max_degree * leaves` gate capacity.
    pub limit_override: Option<usize>,
    /// Joins beyond this many tree nodes (root included) are rejected.
    pub max_nodes: Option<usize>,
    /// Failed attempts at one input before the run fails.
    pub job_max_attempts: u32,
    /// First delay before a candidate retries; doubles up to `retry_cap`.
    pub retry_base: Duration,
    pub retry_cap: Duration,
}

impl Default for OverlayConfig {
    fn default() -> Self {
        Self {
            max_degree: 10,
            candidate_timeout: Duration::from_secs(60),
            heartbeat_interval: Duration::from_secs(2),
            heartbeat_timeout: Duration::from_secs(10),
            status_interval: Duration::from_secs(1),
            limit_override: None,
            max_nodes: None,
            job_max_attempts: 5,
            retry_base: Duration::from_secs(1),
            retry_cap: Duration::from_secs(30),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ConfigError {
    #[error("max_degree must be at least 1")]
    ZeroDegree,
    #[error("heartbeat_timeout must exceed heartbeat_interval")]
    HeartbeatOrder,
    #[error("candidate_timeout must be positive")]
    ZeroCandidateTimeout,
    #[error("{0} must be positive")]
    Zero(&'static str),
}

impl OverlayConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.max_degree == 0 {
            return Err(ConfigError::ZeroDegree);
        }
        if self.heartbeat_timeout <= self.heartbeat_interval {
            return Err(ConfigError::HeartbeatOrder);
        }
        if self.candidate_timeout.is_zero() {
            return Err(ConfigError::ZeroCandidateTimeout);
        }
        if self.heartbeat_interval.is_zero() {
            return Err(ConfigError::Zero("heartbeat_interval"));
        }
        if self.status_interval.is_zero() {
            return Err(ConfigError::Zero("status_interval"));
        }
        if self.limit_override == Some(0) {
            return Err(ConfigError::Zero("limit"));
        }
        if self.job_max_attempts == 0 {
            return Err(ConfigError::Zero("job_max_attempts"));
        }
        Ok(())
    }

    /// Gate capacity for a child whose subtree reported `leaves` leaves.
    pub fn child_capacity(&self, leaves: u64) -> usize {
        self.limit_override
            .unwrap_or_else(|| self.max_degree.saturating_mul(leaves.max(1) as usize))
    }

    /// Delay before retry number `attempt` (1-based).
    pub fn retry_delay(&self, attempt: u32) -> Duration {
        let shift = attempt.saturating_sub(1).min(20);
        self.retry_base
            .saturating_mul(1u32 << shift)
            .min(self.retry_cap)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        OverlayConfig::default().validate().unwrap();
    }

    #[test]
    fn capacity_follows_reported_leaves() {
        let c = OverlayConfig::default();
        assert_eq!(c.child_capacity(3), 30);
        assert_eq!(c.child_capacity(2), 20);
        assert_eq!(c.child_capacity(0), 10);
        let c = OverlayConfig {
            limit_override: Some(4),
            ..c
        };
        assert_eq!(c.child_capacity(50), 4);
    }

    #[test]
    fn retry_backoff_doubles_to_cap() {
        let c = OverlayConfig::default();
        let secs: Vec<_> = (1..=7).map(|a| c.retry_delay(a).as_secs()).collect();
        assert_eq!(secs, [1, 2, 4, 8, 16, 30, 30]);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let ok = OverlayConfig::default();
        let bad = OverlayConfig {
            heartbeat_timeout: ok.heartbeat_interval,
            ..ok.clone()
        };
        assert_eq!(bad.validate(), Err(ConfigError::HeartbeatOrder));
        let bad = OverlayConfig {
            max_degree: 0,
            ..ok.clone()
        };
        assert_eq!(bad.validate(), Err(ConfigError::ZeroDegree));
    }
}
