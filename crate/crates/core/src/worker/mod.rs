//! Worker side: task execution and the networked worker agent.

mod exec;

pub use exec::execute_task;
