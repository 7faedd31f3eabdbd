use std::path::Path;

use ssync_core::bli::EmbeddingCache;
use ssync_core::pipeline::NoopObserver;
use ssync_core::{Engine, RunConfig, RunOptions, RunResult, ThresholdMethod, Toggles};

use crate::emit::{self, MetricsRow};
use crate::error::CliError;

pub const SWEEP: [f64; 3] = [0.3, 0.5, 0.7];

/// Execution settings shared by every command.
#[derive(Clone, Copy, Debug, Default)]
pub struct Settings {
    pub threads: Option<usize>,
    pub seed: Option<u64>,
}

impl Settings {
    fn apply(&self, mut config: RunConfig) -> RunConfig {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        config
    }

    fn options(&self, cache: Option<EmbeddingCache<f64>>) -> RunOptions<'static> {
        RunOptions {
            threads: self.threads,
            cache,
            observer: None,
        }
    }
}

/// Reads `SSYNC_THREADS`; unset means the global pool.
pub fn threads_from_env() -> Result<Option<usize>, CliError> {
    match std::env::var("SSYNC_THREADS") {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Config(format!("SSYNC_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

pub fn run(config: RunConfig, settings: Settings, out_dir: &Path) -> Result<RunResult, CliError> {
    let config = settings.apply(config);
    config.validate()?;
    let result = Engine::new(&config)?.run(settings.options(None))?;
    emit::write_run(out_dir, "run", &result)?;
    Ok(result)
}

/// The cells of the ablation grid, in output order.
pub fn ablation_grid(base: &RunConfig) -> Vec<(String, RunConfig)> {
    let with = |toggles: Toggles| RunConfig { toggles, ..base.clone() };
    let full = Toggles::ALL_ON;
    let mut cells = vec![
        ("full".to_string(), with(full)),
        ("no_mask".to_string(), with(Toggles { masks: false, ..full })),
        ("no_rfh".to_string(), with(Toggles { rfh: false, ..full })),
        ("no_pv".to_string(), with(Toggles { bli: false, dropouts: false, ..full })),
    ];
    for method in [ThresholdMethod::Niblack, ThresholdMethod::Sauvola, ThresholdMethod::AdaptiveMean] {
        cells.push((format!("threshold_{method}"), RunConfig { threshold: method, ..with(full) }));
    }
    for g in SWEEP {
        cells.push((format!("gamma_{g}"), RunConfig { gamma: g, ..with(full) }));
    }
    for l in SWEEP {
        cells.push((format!("lambda_{l}"), RunConfig { lambda: l, ..with(full) }));
    }
    cells
}

/// Runs every ablation cell. The vanilla pass does not depend on anything the
/// grid varies, so it runs once and its cache is shared.
pub fn ablate(config: RunConfig, settings: Settings, out_dir: &Path) -> Result<Vec<MetricsRow>, CliError> {
    let base = settings.apply(config);
    base.validate()?;
    let threads = settings.threads;
    let cache = in_pool(threads, || {
        let engine = Engine::new(&base)?;
        engine.vanilla_pass(&mut NoopObserver).map(|(_, cache)| cache)
    })?;
    let mut rows = Vec::new();
    for (id, cell) in ablation_grid(&base) {
        let cache = cell.toggles.bli.then(|| cache.clone());
        let result = Engine::new(&cell)?.run(settings.options(cache))?;
        rows.push(MetricsRow::new(&id, &cell, &result.metrics));
    }
    std::fs::create_dir_all(out_dir)?;
    emit::write_metrics(&out_dir.join("metrics.csv"), &rows)?;
    Ok(rows)
}

fn in_pool<T: Send>(
    threads: Option<usize>,
    f: impl FnOnce() -> ssync_core::Result<T> + Send,
) -> Result<T, CliError> {
    match threads {
        None => Ok(f()?),
        Some(k) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
            Ok(pool.install(f)?)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Delta {
    pub run_id: String,
    pub metric: &'static str,
    pub a: Option<f64>,
    pub b: Option<f64>,
}

impl Delta {
    pub fn value(&self) -> Option<f64> {
        Some(self.b? - self.a?)
    }
}

/// Per-metric `b − a` for every run id present in both directories.
pub fn compare(a: &Path, b: &Path) -> Result<Vec<Delta>, CliError> {
    let rows_a = emit::read_metrics(&a.join("metrics.csv"))?;
    let rows_b = emit::read_metrics(&b.join("metrics.csv"))?;
    let pairs: Vec<(&MetricsRow, &MetricsRow)> = match (rows_a.as_slice(), rows_b.as_slice()) {
        // Two single runs compare directly whatever their ids.
        ([ra], [rb]) => vec![(ra, rb)],
        _ => rows_a
            .iter()
            .filter_map(|ra| rows_b.iter().find(|r| r.run_id == ra.run_id).map(|rb| (ra, rb)))
            .collect(),
    };
    let mut out = Vec::new();
    for (ra, rb) in pairs {
        for metric in MetricsRow::METRICS {
            out.push(Delta {
                run_id: ra.run_id.clone(),
                metric,
                a: ra.metric(metric),
                b: rb.metric(metric),
            });
        }
    }
    Ok(out)
}
