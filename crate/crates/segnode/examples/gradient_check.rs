//! The oracle triangle: adjoint-sensitivity gradients against the unrolled
//! (discretize-then-optimize) route and central finite differences, on a
//! tiny f64 model.
//!
//! Run with: cargo run --release --example gradient_check

use segnode::cli::run_gradcheck;

fn main() {
    let outcome = run_gradcheck(8, 80, 0).unwrap();
    println!(
        "adjoint vs direct   rel L2 over all parameters: {:.3e}",
        outcome.adjoint_vs_direct_rel_l2
    );
    println!(
        "adjoint vs fin-diff worst sampled coordinate:   {:.3e} at {}[{}]",
        outcome.adjoint_vs_fd_max.0, outcome.adjoint_vs_fd_max.1, outcome.adjoint_vs_fd_max.2
    );
    println!(
        "direct  vs fin-diff worst sampled coordinate:   {:.3e} at {}[{}]",
        outcome.direct_vs_fd_max.0, outcome.direct_vs_fd_max.1, outcome.direct_vs_fd_max.2
    );
}
