//! Finite-difference check of every tape op and of small adapted models, then
//! the same suite with analytic gradients negated as a negative control.
//!
//! ```bash
//! cargo run -p solo-connection --example gradcheck_suite
//! ```

use solo_connection::gradcheck::run_suite;

fn main() -> solo_connection::Result<()> {
    for (label, flip) in [("analytic", false), ("sign-flipped", true)] {
        let entries = run_suite(0, flip)?;
        let passed = entries.iter().filter(|e| e.passed).count();
        println!("{label}: {passed}/{} checks pass", entries.len());
        for e in &entries {
            println!("  {:<22} {:.3e}", e.name, e.max_rel_error);
        }
    }
    Ok(())
}
