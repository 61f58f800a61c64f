use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("degenerate pulse: {0}")]
    DegeneratePulse(String),

    #[error("frequency {0} Hz is not finite")]
    NonFiniteFrequency(f64),

    #[error("carrier magnitude is zero; spur ratio undefined")]
    ZeroCarrier,

    #[error("threshold {threshold} dBc is at or below the numerical floor {floor} dBc")]
    ThresholdBelowFloor { threshold: f64, floor: f64 },

    #[error("register address {0} out of range")]
    BadAddress(usize),

    #[error("code {code} out of range for register {address} (max {max})")]
    CodeOutOfRange { address: usize, code: u32, max: u32 },

    #[error("grid lattice has {points} points, budget is {budget}")]
    BudgetExceeded { points: usize, budget: usize },

    #[error("plant is not calibratable: best reachable spur {best_dbc:.1} dBc")]
    NotCalibratable { best_dbc: f64 },

    #[error("config error: {0}")]
    Config(String),

    #[error("config validation failed:\n  {}", .0.join("\n  "))]
    Validation(Vec<String>),

    #[error("annealing aborted after {} measurements: {source}", partial.measurement_count)]
    Aborted {
        partial: Box<crate::anneal::AnnealResult>,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
