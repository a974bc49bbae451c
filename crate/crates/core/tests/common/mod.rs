#![allow(dead_code)]

use airformer::dartboard::{DartboardProjection, DartboardSpec, Station, StationSet};
use airformer::numerics::Tensor;
use rand::Rng;
use rand_distr::StandardNormal;

pub const R_EARTH: f64 = 6371.0;

fn unit(s: &Station) -> [f64; 3] {
    let (p, l) = (s.latitude.to_radians(), s.longitude.to_radians());
    [p.cos() * l.cos(), p.cos() * l.sin(), p.sin()]
}

fn dot3(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Great-circle distance from the angle between unit vectors.
pub fn vector_distance_km(a: &Station, b: &Station) -> f64 {
    let (u, v) = (unit(a), unit(b));
    let c = cross3(u, v);
    R_EARTH * dot3(c, c).sqrt().atan2(dot3(u, v))
}

/// Initial bearing from the local east/north frame at `a`.
pub fn vector_bearing_deg(a: &Station, b: &Station) -> f64 {
    let (p, l) = (a.latitude.to_radians(), a.longitude.to_radians());
    let east = [-l.sin(), l.cos(), 0.0];
    let north = [-p.sin() * l.cos(), -p.sin() * l.sin(), p.cos()];
    // Tangent direction of the great circle towards b.
    let n = cross3(unit(a), unit(b));
    let t = cross3(n, unit(a));
    dot3(t, east).atan2(dot3(t, north)).to_degrees().rem_euclid(360.0)
}

/// Region by exhaustive search over rings and sectors.
pub fn brute_force_region(spec: &DartboardSpec, d: f64, bearing: f64) -> Option<usize> {
    let width = 360.0 / spec.n_sectors as f64;
    let rel = (bearing - spec.sector_offset_deg).rem_euclid(360.0);
    for (ring, &r) in spec.radii_km.iter().enumerate() {
        let inner = if ring == 0 { 0.0 } else { spec.radii_km[ring - 1] };
        if d > inner && d <= r {
            for s in 0..spec.n_sectors {
                let (lo, hi) = (s as f64 * width, (s + 1) as f64 * width);
                if rel >= lo && rel < hi {
                    return Some(1 + ring * spec.n_sectors + s);
                }
            }
        }
    }
    None
}

pub fn random_stations(rng: &mut impl Rng, n: usize, lat: f64, lon: f64, spread_deg: f64) -> StationSet {
    StationSet::new(
        (0..n)
            .map(|i| Station {
                id: format!("R{i:04}"),
                latitude: lat + rng.random_range(-spread_deg..spread_deg),
                longitude: lon + rng.random_range(-spread_deg..spread_deg),
            })
            .collect(),
    )
    .unwrap()
}

pub fn randn(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Dense multi-head attention of each station over `A_i K`, `A_i V`; `q`,
/// `k`, `v` are `N × C` row-major and `bias` is `heads × M`.
pub fn dense_dartboard_attention(
    projection: &DartboardProjection,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    bias: &[f64],
    c: usize,
    heads: usize,
) -> Vec<f64> {
    let (n, m) = (projection.n_stations(), projection.n_regions());
    let dh = c / heads;
    let alpha = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; n * c];
    for i in 0..n {
        let a = projection.dense_matrix(i);
        let mut kr = vec![0.0; m * c];
        let mut vr = vec![0.0; m * c];
        for r in 0..m {
            for j in 0..n {
                let w = a.get(&[r, j]);
                for x in 0..c {
                    kr[r * c + x] += w * k[j * c + x];
                    vr[r * c + x] += w * v[j * c + x];
                }
            }
        }
        let present: Vec<bool> = (0..m).map(|r| (0..n).any(|j| a.get(&[r, j]) != 0.0)).collect();
        for h in 0..heads {
            let logits: Vec<f64> = (0..m)
                .map(|r| {
                    let s: f64 = (0..dh).map(|x| q[i * c + h * dh + x] * kr[r * c + h * dh + x]).sum();
                    alpha * s + bias[h * m + r]
                })
                .collect();
            let mx = (0..m).filter(|&r| present[r]).map(|r| logits[r]).fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = (0..m).map(|r| if present[r] { (logits[r] - mx).exp() } else { 0.0 }).collect();
            let z: f64 = e.iter().sum();
            for r in 0..m {
                for x in 0..dh {
                    out[i * c + h * dh + x] += e[r] / z * vr[r * c + h * dh + x];
                }
            }
        }
    }
    out
}

/// Textbook multi-head attention on one `S × C` sequence with given
/// projections; `allowed(s, u)` selects visible keys.
pub fn dense_msa(
    x: &[f64],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    s: usize,
    c: usize,
    heads: usize,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let proj = |w: &[f64]| {
        let mut o = vec![0.0; s * c];
        for t in 0..s {
            for j in 0..c {
                o[t * c + j] = (0..c).map(|i| x[t * c + i] * w[i * c + j]).sum();
            }
        }
        o
    };
    let (q, k, v) = (proj(wq), proj(wk), proj(wv));
    attend(&q, &k, &v, s, c, heads, allowed)
}

pub fn attend(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    s: usize,
    c: usize,
    heads: usize,
    allowed: impl Fn(usize, usize) -> bool,
) -> Vec<f64> {
    let dh = c / heads;
    let alpha = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; s * c];
    for h in 0..heads {
        for t in 0..s {
            let logits: Vec<Option<f64>> = (0..s)
                .map(|u| {
                    allowed(t, u).then(|| alpha * (0..dh).map(|x| q[t * c + h * dh + x] * k[u * c + h * dh + x]).sum::<f64>())
                })
                .collect();
            let mx = logits.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let e: Vec<f64> = logits.iter().map(|l| l.map_or(0.0, |l| (l - mx).exp())).collect();
            let z: f64 = e.iter().sum();
            for u in 0..s {
                for x in 0..dh {
                    out[t * c + h * dh + x] += e[u] / z * v[u * c + h * dh + x];
                }
            }
        }
    }
    out
}
