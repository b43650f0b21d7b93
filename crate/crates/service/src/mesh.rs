use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use axum::Router;
use metastack::stacking::{Deployment, MetaModelArtifact, UnitModelArtifact};
use tokio::net::TcpListener;
use tokio::task::JoinHandle;

use crate::{meta_router, subunit_router, MeshConfig, MetaState, RetryPolicy, ServiceError, SubUnitState};

/// A running set of services in this process.
pub struct Mesh {
    pub meta_url: String,
    /// Base URL of each sub-unit service, by unit id.
    pub unit_urls: BTreeMap<String, String>,
    pub meta: Arc<MetaState>,
    tasks: Vec<JoinHandle<std::io::Result<()>>>,
}

impl Mesh {
    /// Runs until a service stops.
    pub async fn wait(mut self) -> Result<(), ServiceError> {
        let tasks = std::mem::take(&mut self.tasks);
        for t in tasks {
            match t.await {
                Ok(r) => r?,
                Err(e) => return Err(ServiceError::Config(format!("service task failed: {e}"))),
            }
        }
        Ok(())
    }
}

impl Drop for Mesh {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

pub async fn serve(listener: TcpListener, router: Router) -> std::io::Result<()> {
    axum::serve(listener, router).await
}

async fn start(addr: &str, router: Router) -> Result<(String, JoinHandle<std::io::Result<()>>), ServiceError> {
    let listener = TcpListener::bind(addr).await?;
    let url = format!("http://{}", listener.local_addr()?);
    log::info!("listening on {url}");
    Ok((url, tokio::spawn(serve(listener, router))))
}

async fn launch(
    meta: MetaModelArtifact,
    meta_addr: &str,
    units: Vec<(UnitModelArtifact, String, RetryPolicy)>,
) -> Result<Mesh, ServiceError> {
    let state = Arc::new(MetaState::new(meta));
    let (meta_url, task) = start(meta_addr, meta_router(Arc::clone(&state))).await?;
    let mut tasks = vec![task];
    let mut unit_urls = BTreeMap::new();
    for (artifact, addr, retry) in units {
        let id = artifact.unit_id.clone();
        let sub = Arc::new(SubUnitState::new(artifact, Some(meta_url.clone()), retry));
        let (url, task) = start(&addr, subunit_router(sub)).await?;
        tasks.push(task);
        unit_urls.insert(id, url);
    }
    Ok(Mesh { meta_url, unit_urls, meta: state, tasks })
}

/// Starts the meta service and one service per deployed unit on `host`.
/// With `base_port` 0 every service gets an ephemeral port; otherwise the
/// meta service takes `base_port` and unit `k` takes `base_port + 1 + k`.
pub async fn spawn_mesh(
    deployment: &Deployment,
    host: &str,
    base_port: u16,
    retry: RetryPolicy,
) -> Result<Mesh, ServiceError> {
    let port = |k: u16| if base_port == 0 { 0 } else { base_port + k };
    let units = deployment
        .units
        .iter()
        .enumerate()
        .map(|(k, a)| (a.clone(), format!("{host}:{}", port(1 + k as u16)), retry.clone()))
        .collect();
    launch(deployment.meta.clone(), &format!("{host}:{}", port(0)), units).await
}

fn load<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, ServiceError> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Starts the services described by a mesh configuration file.
pub async fn spawn_configured(cfg: &MeshConfig) -> Result<Mesh, ServiceError> {
    cfg.validate()?;
    let mut meta: MetaModelArtifact = load(&cfg.meta.artifact)?;
    if let Some(m) = cfg.meta.marker {
        meta.marker = m;
    }
    if !cfg.meta.expected_units.is_empty() && cfg.meta.expected_units != meta.expected_units {
        return Err(ServiceError::Config("expected_units differ from the meta artifact".into()));
    }
    let mut units = Vec::new();
    for u in &cfg.units {
        let mut artifact: UnitModelArtifact = load(&u.artifact)?;
        if artifact.unit_id != u.unit_id {
            return Err(ServiceError::Config(format!("artifact of {} belongs to {}", u.unit_id, artifact.unit_id)));
        }
        if let Some(m) = u.marker {
            artifact.marker = m;
        }
        units.push((artifact, u.listen.clone(), u.retry.clone()));
    }
    launch(meta, &cfg.meta.listen, units).await
}
