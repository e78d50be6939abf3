/// `floor(fraction * total)`, robust to representation error: 0.3 * 10
/// must count as 3, not 2.
pub(crate) fn floor_count(fraction: f64, total: usize) -> usize {
    let t = fraction * total as f64;
    let nearest = t.round();
    if (t - nearest).abs() < 1e-9 {
        nearest as usize
    } else {
        t.floor() as usize
    }
}
