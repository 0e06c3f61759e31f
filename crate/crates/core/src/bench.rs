//! Capacity and CPU latency benchmark over checkpoints and volumes.
//!
//! Analytic columns (params, FLOPs, activation estimate) come from the
//! plan; measured columns (latency, peak RSS) from timing `predict` on the
//! host. Models are run interleaved (A, B, C, A, B, C, ...) so slow drift
//! in clock speed hits every model alike. Only ratios and orderings of the
//! measured columns are meaningful across machines.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::infer::{count_inference_cost, predict, SlidingWindowConfig};
use crate::metrics::percentile_linear;
use crate::unet::{capacity, Network, Scale};
use crate::volume::Volume;

pub const MIN_WARMUP: usize = 2;
pub const MIN_RUNS: usize = 5;

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub window: SlidingWindowConfig,
    pub warmup: usize,
    pub runs: usize,
    pub threads: usize,
}

impl BenchConfig {
    pub fn new(window: SlidingWindowConfig) -> Self {
        BenchConfig {
            window,
            warmup: MIN_WARMUP,
            runs: MIN_RUNS,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.window.validate()?;
        if self.warmup < MIN_WARMUP || self.runs < MIN_RUNS {
            return Err(Error::invalid(format!(
                "need at least {MIN_WARMUP} warm-up and {MIN_RUNS} timed runs, got {} / {}",
                self.warmup, self.runs
            )));
        }
        if self.threads == 0 {
            return Err(Error::invalid("thread count must be positive"));
        }
        Ok(())
    }
}

pub struct BenchModel {
    pub name: String,
    pub network: Network,
}

/// Seconds per volume over the timed runs.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencyStats {
    pub median: f64,
    pub p5: f64,
    pub p95: f64,
    pub n_runs: usize,
    pub samples: Vec<f64>,
}

impl LatencyStats {
    pub fn from_samples(samples: Vec<f64>) -> Result<Self> {
        if samples.is_empty() || samples.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("latency samples must be positive"));
        }
        let q = |p| percentile_linear(&samples, p).expect("non-empty");
        Ok(LatencyStats {
            median: q(0.5),
            p5: q(0.05),
            p95: q(0.95),
            n_runs: samples.len(),
            samples,
        })
    }

    /// Whether the p5-p95 bands intersect.
    pub fn overlaps(&self, other: &LatencyStats) -> bool {
        self.p5 <= other.p95 && other.p5 <= self.p95
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub name: String,
    pub scale: Scale,
    pub params: u64,
    pub flops_per_patch: u64,
    /// Sliding-window FLOPs summed over the volume set.
    pub inference_flops: u64,
    pub peak_activation_bytes: u64,
    pub measured_peak_rss_bytes: u64,
    pub latency: LatencyStats,
}

impl BenchRow {
    pub fn gflops_per_patch(&self) -> f64 {
        self.flops_per_patch as f64 / 1e9
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MachineFingerprint {
    pub cpu_model: String,
    pub logical_cores: usize,
    pub threads: usize,
}

impl MachineFingerprint {
    pub fn detect(threads: usize) -> Self {
        let cpu_model = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split_once(':'))
                    .map(|(_, v)| v.trim().to_string())
            })
            .unwrap_or_else(|| std::env::consts::ARCH.to_string());
        MachineFingerprint {
            cpu_model,
            logical_cores: std::thread::available_parallelism().map_or(1, |n| n.get()),
            threads,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
    pub machine: MachineFingerprint,
    pub config: BenchConfig,
    pub volumes: usize,
    /// False when the peak-RSS mark could not be reset between models, so
    /// the RSS column is the process-wide peak so far.
    pub per_model_rss: bool,
}

impl BenchReport {
    pub fn row(&self, name: &str) -> Option<&BenchRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# cpu: {} ({} logical cores, {} thread(s))",
            self.machine.cpu_model, self.machine.logical_cores, self.machine.threads
        );
        let w = &self.config.window;
        let _ =
            writeln!(
            s,
            "# patch {:?}, overlap {}, blend {}, {} volume(s), {} warm-up + {} timed runs, rss {}",
            w.patch_size,
            w.overlap,
            w.blend,
            self.volumes,
            self.config.warmup,
            self.config.runs,
            if self.per_model_rss { "per model" } else { "process-wide" }
        );
        let _ = writeln!(
            s,
            "{:<16} {:>6} {:>12} {:>12} {:>14} {:>12} {:>12} {:>10} {:>10} {:>10}",
            "model",
            "alpha",
            "params",
            "GFLOPs/patch",
            "act_peak_MB",
            "rss_peak_MB",
            "GFLOPs/vol",
            "median_s",
            "p5_s",
            "p95_s"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<16} {:>6} {:>12} {:>12.3} {:>14.1} {:>12.1} {:>12.3} {:>10.4} {:>10.4} {:>10.4}",
                r.name,
                r.scale.to_string(),
                r.params,
                r.gflops_per_patch(),
                r.peak_activation_bytes as f64 / 1e6,
                r.measured_peak_rss_bytes as f64 / 1e6,
                r.inference_flops as f64 / 1e9 / self.volumes as f64,
                r.latency.median,
                r.latency.p5,
                r.latency.p95
            );
        }
        s
    }

    /// Only the columns that must reproduce exactly.
    pub fn analytic_tsv(&self) -> String {
        let mut s = String::from(
            "model\talpha\tparams\tflops_per_patch\tinference_flops\tpeak_activation_bytes\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}",
                r.name,
                r.scale,
                r.params,
                r.flops_per_patch,
                r.inference_flops,
                r.peak_activation_bytes
            );
        }
        s
    }

    pub fn to_tsv(&self) -> String {
        let mut s = format!(
            "#cpu={}\n#logical_cores={}\n#threads={}\n",
            self.machine.cpu_model, self.machine.logical_cores, self.machine.threads
        );
        s.push_str("model\talpha\tparams\tflops_per_patch\tinference_flops\tpeak_activation_bytes\tmeasured_peak_rss_bytes\tmedian_s\tp5_s\tp95_s\tn_runs\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{:?}\t{:?}\t{:?}\t{}",
                r.name,
                r.scale,
                r.params,
                r.flops_per_patch,
                r.inference_flops,
                r.peak_activation_bytes,
                r.measured_peak_rss_bytes,
                r.latency.median,
                r.latency.p5,
                r.latency.p95,
                r.latency.n_runs
            );
        }
        s
    }
}

fn read_status_kb(field: &str) -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with(field))?;
    let kb = line.split_whitespace().nth(1)?.parse::<u64>().ok()?;
    Some(kb * 1024)
}

/// Resets the kernel's peak-RSS mark to the current RSS, where supported.
fn reset_peak_rss() -> bool {
    std::fs::write("/proc/self/clear_refs", "5").is_ok()
}

/// Process peak resident set size in bytes.
pub fn peak_rss_bytes() -> Option<u64> {
    read_status_kb("VmHWM:")
}

pub fn bench(models: &[BenchModel], volumes: &[Volume], cfg: &BenchConfig) -> Result<BenchReport> {
    cfg.validate()?;
    if models.is_empty() || volumes.is_empty() {
        return Err(Error::invalid(
            "bench needs at least one model and one volume",
        ));
    }
    let classes = models[0].network.plan().num_classes;
    if let Some(m) = models
        .iter()
        .find(|m| m.network.plan().num_classes != classes)
    {
        return Err(Error::invalid(format!(
            "model {} predicts {} classes but {} predicts {classes}; not comparable",
            m.name,
            m.network.plan().num_classes,
            models[0].name
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;

    let mut samples = vec![Vec::with_capacity(cfg.runs); models.len()];
    let mut rss = vec![0u64; models.len()];
    let mut per_model_rss = true;
    for round in 0..cfg.warmup + cfg.runs {
        for (i, m) in models.iter().enumerate() {
            per_model_rss &= reset_peak_rss();
            let start = Instant::now();
            pool.install(|| -> Result<()> {
                for v in volumes {
                    predict(&m.network, v, &cfg.window)?;
                }
                Ok(())
            })?;
            let secs = start.elapsed().as_secs_f64() / volumes.len() as f64;
            if round >= cfg.warmup {
                samples[i].push(secs);
                let peak = peak_rss_bytes().ok_or_else(|| {
                    Error::Data("peak RSS is not available on this platform".into())
                })?;
                rss[i] = rss[i].max(peak);
            }
        }
    }

    let mut rows = Vec::with_capacity(models.len());
    for ((m, s), peak) in models.iter().zip(samples).zip(rss) {
        let plan = m.network.plan();
        let cap = crate::unet::capacity_for_patch(plan, cfg.window.patch_size)?;
        let mut inference_flops = 0;
        for v in volumes {
            inference_flops += count_inference_cost(&m.network, v, &cfg.window)?;
        }
        rows.push(BenchRow {
            name: m.name.clone(),
            scale: plan.scale,
            params: capacity(plan)?.params,
            flops_per_patch: cap.flops_per_patch,
            inference_flops,
            peak_activation_bytes: cap.peak_activation_bytes,
            measured_peak_rss_bytes: peak,
            latency: LatencyStats::from_samples(s)?,
        });
    }
    Ok(BenchReport {
        rows,
        machine: MachineFingerprint::detect(cfg.threads),
        config: cfg.clone(),
        volumes: volumes.len(),
        per_model_rss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use crate::unet::NetworkPlan;

    #[test]
    fn latency_stats() {
        let s = LatencyStats::from_samples(vec![3.0, 1.0, 2.0, 5.0, 4.0]).unwrap();
        assert_eq!(s.median, 3.0);
        assert!((s.p5 - 1.2).abs() < 1e-12);
        assert!((s.p95 - 4.8).abs() < 1e-12);
        let t = LatencyStats::from_samples(vec![4.7; 5]).unwrap();
        assert!(s.overlaps(&t));
        let u = LatencyStats::from_samples(vec![9.0; 5]).unwrap();
        assert!(!s.overlaps(&u));
        assert!(LatencyStats::from_samples(vec![0.0]).is_err());
    }

    #[test]
    fn small_bench_is_complete() {
        let plan = NetworkPlan {
            num_classes: 2,
            input_channels: 1,
            num_stages: 2,
            base_width: 4,
            max_width: 8,
            scale: Scale::ONE,
            convs_per_stage: 1,
            patch_size: [8, 8, 8],
        };
        let models: Vec<BenchModel> = [Scale::ONE, Scale::HALF]
            .iter()
            .map(|&s| BenchModel {
                name: format!("x{s}"),
                network: Network::build(&plan.with_scale(s), 1).unwrap(),
            })
            .collect();
        let vol = Volume::new(Tensor::zeros(&[1, 8, 8, 12]), [1.0; 3]).unwrap();
        let report = bench(
            &models,
            &[vol],
            &BenchConfig::new(SlidingWindowConfig::new([8; 3])),
        )
        .unwrap();
        assert_eq!(report.rows.len(), 2);
        for r in &report.rows {
            assert_eq!(r.latency.n_runs, 5);
            assert!(r.measured_peak_rss_bytes > 0);
            // 12 voxels along W with step 4 -> 2 windows
            assert_eq!(r.inference_flops, 2 * r.flops_per_patch);
        }
        assert!(report.to_text().contains("x1/2"));
        let mut bad = BenchConfig::new(SlidingWindowConfig::new([8; 3]));
        bad.warmup = 1;
        assert!(bad.validate().is_err());
    }
}
