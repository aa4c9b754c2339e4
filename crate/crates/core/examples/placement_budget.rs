//! Connection placement for several depths and spans, and the parameter budget
//! the placement implies.
//!
//! ```bash
//! cargo run -p solo-connection --example placement_budget
//! ```

use solo_connection::{budget_formula, plan_placement};

fn main() -> solo_connection::Result<()> {
    for (layers, span) in [(4, 1), (12, 1), (24, 1), (12, 3), (12, 5), (24, 3)] {
        let plan = plan_placement(layers, span)?;
        let wiring: Vec<String> = plan
            .iter()
            .map(|p| format!("{}→{}", p.input_index, p.placement_index))
            .collect();
        println!(
            "L={layers:<3} span={span}  {} connections  [{}]",
            plan.len(),
            wiring.join(", ")
        );
    }

    println!(
        "\n{:>5} {:>4} {:>4} {:>3} {:>10}",
        "d", "r", "s", "T", "params"
    );
    for (d, r, s, t) in [
        (1024, 32, 0.7, 11),
        (768, 128, 0.6, 5),
        (768, 8, 0.6, 5),
        (768, 512, 0.6, 5),
        (1024, 512, 0.7, 11),
        (64, 16, 0.6, 5),
    ] {
        println!(
            "{d:>5} {r:>4} {s:>4} {t:>3} {:>10}",
            budget_formula(d, r, s, 2, t)?
        );
    }
    Ok(())
}
