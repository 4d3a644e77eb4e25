//! Service builder: turns Production promotions into running prediction servers.

pub mod daemon;
pub mod jobs;
pub mod package;
pub mod serving;
pub mod supervisor;

pub use daemon::{parse_port_range, run_daemon, Builder, BuilderConfig};
pub use jobs::{BuildJob, JobState, JobStore};
pub use package::{package, PackageError, PackageRecipe, RegistryApi};
pub use supervisor::{
    DeployError, DeploymentRecord, Health, InProcessLauncher, Launcher, ProcessLauncher, Supervisor,
    SupervisorConfig,
};
