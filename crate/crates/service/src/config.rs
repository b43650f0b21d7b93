use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::ServiceError;

/// Forwarding policy of a sub-unit: `attempts` tries with doubling backoff,
/// then the sub-prediction is dropped and the gap logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub attempts: u32,
    pub backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, backoff_ms: 50 }
    }
}

impl RetryPolicy {
    pub(crate) fn delay(&self, attempt: u32) -> Duration {
        Duration::from_millis(self.backoff_ms.saturating_mul(1 << attempt.min(16)))
    }
}

/// One service. The meta service has `unit_id` "meta", no downstream and a
/// non-empty `expected_units`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ServiceConfig {
    pub artifact: PathBuf,
    /// Base URL of the meta service, e.g. `http://127.0.0.1:7000`.
    pub downstream: Option<String>,
    #[serde(default)]
    pub expected_units: Vec<String>,
    /// Socket address to bind, e.g. `127.0.0.1:7001`.
    pub listen: String,
    /// Overrides the marker stored in the artifact.
    pub marker: Option<f64>,
    #[serde(default)]
    pub retry: RetryPolicy,
    pub unit_id: String,
}

impl ServiceConfig {
    pub fn is_meta(&self) -> bool {
        self.downstream.is_none()
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.listen)
    }
}

/// Configuration of a whole mesh.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeshConfig {
    pub meta: ServiceConfig,
    pub units: Vec<ServiceConfig>,
}

impl MeshConfig {
    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let cfg: MeshConfig = serde_json::from_slice(&std::fs::read(path)?)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        if !self.meta.is_meta() {
            return Err(ServiceError::Config("the meta service must not have a downstream".into()));
        }
        let meta_url = self.meta.url();
        for u in &self.units {
            if u.downstream.as_deref() != Some(meta_url.as_str()) {
                return Err(ServiceError::Config(format!(
                    "unit {} forwards to {:?}, not to the meta service at {meta_url}",
                    u.unit_id, u.downstream
                )));
            }
            if !self.meta.expected_units.contains(&u.unit_id) {
                return Err(ServiceError::Config(format!("unit {} is not expected by the meta service", u.unit_id)));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(id: &str, downstream: &str) -> ServiceConfig {
        ServiceConfig {
            artifact: format!("{id}.json").into(),
            downstream: Some(downstream.into()),
            expected_units: Vec::new(),
            listen: "127.0.0.1:7001".into(),
            marker: None,
            retry: RetryPolicy::default(),
            unit_id: id.into(),
        }
    }

    fn mesh(downstream: &str) -> MeshConfig {
        MeshConfig {
            meta: ServiceConfig {
                artifact: "meta.json".into(),
                downstream: None,
                expected_units: vec!["L0".into()],
                listen: "127.0.0.1:7000".into(),
                marker: None,
                retry: RetryPolicy::default(),
                unit_id: "meta".into(),
            },
            units: vec![unit("L0", downstream)],
        }
    }

    #[test]
    fn downstream_must_be_the_meta_service() {
        assert!(mesh("http://127.0.0.1:7000").validate().is_ok());
        assert!(mesh("http://127.0.0.1:9999").validate().is_err());
    }

    #[test]
    fn round_trips_through_json() {
        let cfg = mesh("http://127.0.0.1:7000");
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<MeshConfig>(&text).unwrap(), cfg);
    }

    #[test]
    fn backoff_doubles() {
        let p = RetryPolicy { attempts: 3, backoff_ms: 10 };
        assert_eq!((p.delay(0).as_millis(), p.delay(2).as_millis()), (10, 40));
    }
}
