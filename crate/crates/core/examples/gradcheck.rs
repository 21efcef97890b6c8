//! Central-difference checks for every op, the pyramid path and the full
//! model.

use sapnet::checks::{full_model_check, op_suite, sap_path_check};

fn main() -> sapnet::Result<()> {
    let seed = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let mut all = op_suite(seed)?;
    all.push(sap_path_check(seed)?);
    all.extend(full_model_check(seed)?);
    for c in &all {
        println!("{}", c.line());
    }
    let failed = all.iter().filter(|c| !c.passed()).count();
    println!("{} checks, {failed} failed", all.len());
    Ok(())
}
