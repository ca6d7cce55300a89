//! RAW programs and their lowering to transformer weights, one layer per
//! RAW op (or per fused bundle of independent ops).

mod approx;
mod layout;
mod library;
mod lower;
mod program;
mod raw;
mod verify;

pub use approx::{
    approx_mul, gelu_bypass, gelu_mul, layer_norm_bypass, layer_norm_divide, relu_square, tanh_mul, MulApprox,
    MulScheme, MUL_DOMAIN, TANH_DELTA,
};
pub use layout::{Constants, Layout};
pub use library::{
    program_sgd_multi_step, program_sgd_step, program_sherman_morrison, sgd_rows, sherman_morrison_rows, SgdRows,
    ShermanMorrisonRows,
};
pub use lower::{
    check_independent, compile_div_layer, compile_layer, compile_op, fuse_parallel, scratch_needed, LoweredLayer,
};
pub use program::{
    params_hash, ColumnRule, CompiledProgram, Execution, ExecutionReport, LayerSpec, OutputCell, RawProgram,
    FORMAT_VERSION,
};
pub use raw::{apply_div, apply_ops, DivOp, OpKind, RawOp, Span, TimestepMap};
pub use verify::{verify_model, verify_program, ProgramSpec, VerifyReport};
