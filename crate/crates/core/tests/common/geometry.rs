//! Independent geometry oracles for graph extraction.

use std::collections::BTreeMap;

use gcdlab::image::LabeledMask;

/// Whether the point `p` lies in the closed unit square (centered on the
/// pixel) of any pixel owned by an instance other than `i` and `j`.
pub fn blocked_at(mask: &LabeledMask, p: [f64; 2], i: u32, j: u32) -> bool {
    let (h, w) = (mask.height() as f64, mask.width() as f64);
    for r in [p[0].floor(), p[0].ceil()] {
        for c in [p[1].floor(), p[1].ceil()] {
            if r < 0.0 || c < 0.0 || r >= h || c >= w {
                continue;
            }
            if (p[0] - r).abs() <= 0.5 && (p[1] - c).abs() <= 0.5 {
                let id = mask.id_at(r as usize, c as usize);
                if id != 0 && id != i && id != j {
                    return true;
                }
            }
        }
    }
    false
}

/// Dense parametric oracle: sample the segment at `n` evenly spaced t.
pub fn oracle_visible(mask: &LabeledMask, i: u32, j: u32, ci: [f64; 2], cj: [f64; 2], n: usize) -> bool {
    (0..n).all(|k| {
        let t = k as f64 / (n - 1) as f64;
        let p = [ci[0] + t * (cj[0] - ci[0]), ci[1] + t * (cj[1] - ci[1])];
        !blocked_at(mask, p, i, j)
    })
}

pub fn brute_coms(mask: &LabeledMask) -> BTreeMap<u32, [f64; 2]> {
    let mut acc: BTreeMap<u32, (f64, f64, f64)> = BTreeMap::new();
    for r in 0..mask.height() {
        for c in 0..mask.width() {
            let id = mask.id_at(r, c);
            if id > 0 {
                let e = acc.entry(id).or_default();
                e.0 += r as f64;
                e.1 += c as f64;
                e.2 += 1.0;
            }
        }
    }
    acc.into_iter().map(|(id, (r, c, n))| (id, [r / n, c / n])).collect()
}
