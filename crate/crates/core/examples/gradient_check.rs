//! Finite-difference checks of every primitive.

use evogen::tensor::gradcheck::{primitive_suite, GradcheckConfig};

fn main() -> evogen::Result<()> {
    let reports = primitive_suite(&GradcheckConfig::default())?;
    for r in &reports {
        println!("{:<28} {:>5} entries  max rel err {:.2e}  {}", r.name, r.checked, r.max_rel_err, if r.passed { "ok" } else { "FAIL" });
    }
    Ok(())
}
