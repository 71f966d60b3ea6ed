use thiserror::Error;

/// Rejections raised while validating configurations and analysis inputs.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("server count must be positive")]
    NoServers,
    #[error("service rate of server {server} must be positive and finite, got {rate}")]
    BadServiceRate { server: usize, rate: f64 },
    #[error("{what} must be positive")]
    NotPositive { what: &'static str },
    #[error("invalid arrival law: {0}")]
    Arrival(String),
    #[error("invalid service law: {0}")]
    Service(String),
    #[error("invalid policy {policy}: {reason}")]
    Policy { policy: String, reason: String },
    #[error("arrival rate {lambda} does not leave spare capacity (total service rate {mu_total})")]
    Capacity { lambda: f64, mu_total: f64 },
    #[error("warmup ({warmup}) must be shorter than the horizon ({horizon})")]
    Warmup { warmup: u64, horizon: u64 },
    #[error("scenario error: {0}")]
    Scenario(String),
}

/// Errors from the dispatching-distribution analysis.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("policy {0} has no closed-form dispatching distribution")]
    Unsupported(String),
    #[error("memory-size distribution is required for {0}")]
    MissingMemoryStats(String),
    #[error("memory-size distribution must have {expected} entries, got {got}")]
    MemoryStatsLength { expected: usize, got: usize },
    #[error("memory-size distribution sums to {0}, expected 1")]
    MemoryStatsMass(String),
    #[error("queue vector has {queues} entries but {rates} service rates were given")]
    Dimension { queues: usize, rates: usize },
    #[error(transparent)]
    Config(#[from] ConfigError),
}

/// Batch-means interval is undefined with fewer than two batches.
#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("confidence interval needs at least 2 batches, got {0}")]
pub struct TooFewBatches(pub usize);
