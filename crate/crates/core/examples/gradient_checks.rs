//! Runs the central-difference gradient suite over every trainable block.

use prioralign::gradsuite;

fn main() -> prioralign::Result<()> {
    let start = std::time::Instant::now();
    for r in gradsuite::run_all(&[])? {
        let worst = r.per_parameter.iter().max_by(|a, b| a.1.total_cmp(b.1)).map(|(k, v)| format!("{k} ({v:.2e})")).unwrap_or_default();
        println!("{:<10} max_rel_err {:.2e} over {:>5} scalars, worst {worst}", r.op_name, r.max_rel_err, r.scalars_checked);
        assert!(r.passed(gradsuite::TOLERANCE));
    }
    println!("done in {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
