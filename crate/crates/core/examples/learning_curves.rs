//! Aggregate per-seed learning curves, compute the interaction reduction and
//! write the SVG plot with its CSV companion.

use aorl::eval::{self, LearningCurve};

fn main() -> aorl::Result<()> {
    let mut curves = Vec::new();
    for seed in 0..3u64 {
        let mut ft = LearningCurve::new("I+P", seed, "large");
        let mut act = LearningCurve::new("A+U", seed, "large");
        for step in 1..=8u64 {
            let s = step as f64 + seed as f64 * 0.3;
            ft.push(step * 5_000, 10.0 * s.sqrt())?;
            act.push(step * 5_000, 14.0 * s.sqrt())?;
        }
        curves.push(ft);
        curves.push(act);
    }
    for (label, band) in eval::aggregate_curves(&curves) {
        let last = band.last().expect("curves are non-empty");
        println!("{label}: final {:.1} ± {:.1} over {} seeds", last.mean, last.std, last.n_curves);
    }
    for seed in 0..3 {
        let act = &curves[2 * seed + 1];
        let ft = &curves[2 * seed];
        println!("seed {seed}: {}% fewer steps", eval::interaction_reduction(act, ft)?);
    }
    let dir = tempfile::tempdir().map_err(aorl::Error::RawIo)?;
    let (svg, csv) = eval::emit_plots(&curves, dir.path())?;
    let text = std::fs::read_to_string(&csv).map_err(aorl::Error::RawIo)?;
    println!("{} ({} bytes)", svg.display(), std::fs::metadata(&svg).map_err(aorl::Error::RawIo)?.len());
    print!("{}", text.lines().take(4).collect::<Vec<_>>().join("\n"));
    println!();
    Ok(())
}
