//! Size of each built-in search space and the parameter counts of its presets.
//!
//! ```text
//! cargo run --example count_spaces
//! ```

use ofat::supernet::{count_params, count_subnets, SearchSpace, SubnetConfig};

fn main() -> ofat::Result<()> {
    let spaces = [
        ("paper_small", SearchSpace::paper_small()),
        ("paper_base", SearchSpace::paper_base()),
        ("desk_small", SearchSpace::desk_small()),
        ("desk_base", SearchSpace::desk_base()),
    ];
    for (name, space) in &spaces {
        space.validate()?;
        println!("{name}: {} subnets", count_subnets(space));
        for preset in ["min", "a_small", "max"] {
            let c = SubnetConfig::preset(preset, space).expect("known preset");
            let encoder = count_params(space, &c, false, false)?;
            let full = count_params(space, &c, true, true)?;
            println!(
                "  {preset:<8} {c}\n           encoder {:>11}  with frontend and head {:>11}",
                encoder.total, full.total
            );
        }
    }

    let space = SearchSpace::desk_small();
    let c = SubnetConfig::preset("max", &space).unwrap();
    println!("\ndesk_small max by component:");
    for (part, n) in &count_params(&space, &c, true, true)?.by_component {
        println!("  {part:<12} {n}");
    }
    Ok(())
}
