use super::grid::BevFeature;

/// Cell pairs `(i_prev, j_next)` whose world centers coincide within a
/// quarter cell, ordered by `j_next`.
pub fn compute_overlap(prev: &BevFeature, next: &BevFeature) -> Vec<(usize, usize)> {
    let cfg = &next.config;
    let c = cfg.cell_size();
    let tol = c / 4.0;
    let mut pairs = Vec::new();
    for j in 0..cfg.num_cells() {
        let p = next.cell_center(j);
        let fh = (p[0] - prev.ego[0]) / c + (prev.config.grid_h - 1) as f64 / 2.0;
        let fw = (p[1] - prev.ego[1]) / c + (prev.config.grid_w - 1) as f64 / 2.0;
        let (h, w) = (fh.round(), fw.round());
        if h < 0.0 || w < 0.0 || h >= prev.config.grid_h as f64 || w >= prev.config.grid_w as f64 {
            continue;
        }
        let i = prev.config.cell_index(h as usize, w as usize);
        let q = prev.cell_center(i);
        if ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt() <= tol {
            pairs.push((i, j));
        }
    }
    pairs
}
