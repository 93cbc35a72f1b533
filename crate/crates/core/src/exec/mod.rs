//! Plan execution over in-memory tables.

pub mod eval;
pub mod reference;
pub mod table;

pub use eval::{
    evaluate, execute, node_epsilon, plan_epsilon, ExecContext, ExecError, ExecutionReceipt, FnPredictor, FunctionModels,
    LookupPredictor, MechanismTrace, Predictor,
};
pub use reference::{bag, reference_eval};
pub use table::{Table, TableError, TableSet};
