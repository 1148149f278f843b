//! Experiment driver: configuration, the simulated world, metrics, growth
//! tables, chain audits and parameter sweeps.

pub mod audit;
pub mod config;
pub mod growth;
pub mod metrics;
pub mod output;
pub mod sweep;
pub mod view;
pub mod world;

pub use audit::{adoption_curves, audit, audit_archive, AdoptionCurve, AdoptionPoint, AuditError, AuditReport, ChainAudit, SignatureTimeline};
pub use config::{
    AttackConfig, ConfigError, ExperimentConfig, ExtraDevice, NetworkConfig, PowConfig, ProtocolConfig, TraceSource,
};
pub use growth::{chain_growth_report, ChainGrowth, GrowthReport};
pub use metrics::{AttackMetrics, ChainMetrics, ControlMetrics, DeviceMetrics, GrowthRow, MetricsReport, NodeMetrics};
pub use output::{report_json, run_all, seed_dir, write_audit, write_growth, write_report_csvs, write_run, write_sweep, OutputError};
pub use sweep::{breaking_point_sweep, SweepPoint, SweepReport, SweepRun};
pub use view::{detect_mode, ForkInfo, LedgerView};
pub use world::{run_experiment, DeviceTally, LogLine, RunOutput, World};
