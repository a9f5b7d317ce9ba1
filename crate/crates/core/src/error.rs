use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid route {service_id}/{direction}: {reason}")]
    InvalidRoute {
        service_id: String,
        direction: u8,
        reason: String,
    },

    #[error("non-finite coordinate ({lat}, {lon})")]
    NonFiniteCoordinate { lat: f64, lon: f64 },

    /// No GPS position and no positive historical speed to derive progress from.
    #[error("observation at stop {stop_id} is unusable: no position and no historical speed")]
    UnusableObservation { stop_id: String },

    #[error("invalid trajectory for bus {bus_id}: {reason}")]
    InvalidTrajectory { bus_id: u32, reason: String },

    #[error("no route for service {service_id} direction {direction}")]
    UnknownRoute { service_id: String, direction: u8 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid world config: {0}")]
    InvalidConfig(String),

    #[error("feed adapter failure: {0}")]
    Feed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}
