//! Timestamps for run records and the event log.

use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;

/// Time source for `last_run_at`. Replay runs use a fixed reading so that
/// their output is reproducible.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Clock {
    Wall,
    Fixed(i64),
}

impl Clock {
    /// Fixed clock at `SOURCE_DATE_EPOCH`, or the Unix epoch when unset.
    pub fn reproducible() -> Clock {
        let secs = std::env::var("SOURCE_DATE_EPOCH")
            .ok()
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(0);
        Clock::Fixed(secs)
    }

    pub fn now(&self) -> String {
        match self {
            Clock::Wall => now_rfc3339(),
            Clock::Fixed(secs) => format(
                OffsetDateTime::from_unix_timestamp(*secs).unwrap_or(OffsetDateTime::UNIX_EPOCH),
            ),
        }
    }
}

pub fn now_rfc3339() -> String {
    format(OffsetDateTime::now_utc())
}

fn format(t: OffsetDateTime) -> String {
    t.replace_nanosecond(0)
        .unwrap_or(t)
        .format(&Rfc3339)
        .unwrap_or_else(|_| "1970-01-01T00:00:00Z".into())
}
