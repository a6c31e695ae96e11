// Checks analytic gradients against central finite differences.

use querymix::gradcheck::{check_op, registry, run_checks, GradCase, DEFAULT_ABS_FLOOR, DEFAULT_TOL_REL};
use querymix::tensor::RngState;

pub fn run_example() -> querymix::Result<()> {
    // A hand-written op: f(x) = [x0 * x1, sin(x2)].
    let case = GradCase::new(
        "product_and_sine",
        None,
        vec![0.3, -1.2, 0.7],
        |x| Ok(vec![x[0] * x[1], x[2].sin()]),
        |x, g| Ok(vec![g[0] * x[1], g[0] * x[0], g[1] * x[2].cos()]),
    );
    println!(
        "{}",
        check_op(&case, &mut RngState::new(0), DEFAULT_TOL_REL, DEFAULT_ABS_FLOOR)?.line()
    );

    let reports = run_checks(&registry(0)?, 0, true)?;
    for r in &reports {
        println!("{}", r.line());
    }
    let failed = reports.iter().filter(|r| !r.pass).count();
    println!("{} checks, {failed} failed", reports.len());
    Ok(())
}

fn main() {
    if let Err(e) = run_example() {
        eprintln!("{e}");
        std::process::exit(1);
    }
}
