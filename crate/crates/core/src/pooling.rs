//! Global pooling of activation tensors into descriptors, with gradients.
//!
//! * MAC: channelwise spatial maximum.
//! * SPoC: channelwise spatial sum.
//! * GeM(p): channelwise power mean, activations clamped at [`GEM_EPS`].
//! * R-MAC: sum of ℓ2-normalized regional maxima over a 3-scale grid with
//!   about 40% overlap between neighbouring regions, plus the whole map.
//! * CroW: sum weighted spatially by the square root of the ℓ2-normalized
//!   channel-summed map, then per channel by the log inverse fraction of
//!   nonzero activations.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::descriptor::{self, Descriptor};
use crate::error::{Error, Result};
use crate::tensor::ActivationTensor;

pub const GEM_EPS: f64 = 1e-6;
pub const DEFAULT_GEM_P: f64 = 3.0;
const RMAC_LEVELS: usize = 3;
const RMAC_OVERLAP: f64 = 0.4;
const RMAC_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PoolingKind {
    Mac,
    Spoc,
    Gem { p: f64 },
    Rmac,
    Crow,
}

impl PoolingKind {
    pub fn gem() -> Self {
        PoolingKind::Gem { p: DEFAULT_GEM_P }
    }

    pub fn all() -> [PoolingKind; 5] {
        [PoolingKind::Mac, PoolingKind::Spoc, PoolingKind::gem(), PoolingKind::Rmac, PoolingKind::Crow]
    }

    fn validate(self) -> Result<Self> {
        match self {
            PoolingKind::Gem { p } if !(p > 0.0) || !p.is_finite() => {
                Err(Error::Config(format!("GeM exponent must be positive, got {p}")))
            }
            k => Ok(k),
        }
    }
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PoolingKind::Mac => f.write_str("mac"),
            PoolingKind::Spoc => f.write_str("spoc"),
            PoolingKind::Gem { p } if *p == DEFAULT_GEM_P => f.write_str("gem"),
            PoolingKind::Gem { p } => write!(f, "gem:{p}"),
            PoolingKind::Rmac => f.write_str("rmac"),
            PoolingKind::Crow => f.write_str("crow"),
        }
    }
}

impl FromStr for PoolingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let kind = match lower.as_str() {
            "mac" => PoolingKind::Mac,
            "spoc" => PoolingKind::Spoc,
            "gem" => PoolingKind::gem(),
            "rmac" | "r-mac" => PoolingKind::Rmac,
            "crow" => PoolingKind::Crow,
            other => match other.strip_prefix("gem:") {
                Some(p) => PoolingKind::Gem {
                    p: p.parse().map_err(|_| Error::Config(format!("bad GeM exponent in '{s}'")))?,
                },
                None => return Err(Error::Config(format!("unknown pooling '{s}'"))),
            },
        };
        kind.validate()
    }
}

impl TryFrom<String> for PoolingKind {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PoolingKind> for String {
    fn from(k: PoolingKind) -> Self {
        k.to_string()
    }
}

/// Pooled and ℓ2-normalized descriptor.
pub fn pool(tensor: &ActivationTensor, kind: PoolingKind) -> Result<Descriptor> {
    Descriptor::from_unnormalized(pool_raw(tensor, kind)?)
}

/// Pooled vector before normalization.
pub fn pool_raw(tensor: &ActivationTensor, kind: PoolingKind) -> Result<Vec<f64>> {
    let kind = kind.validate()?;
    let d = tensor.channels();
    let n = tensor.spatial() as f64;
    Ok(match kind {
        PoolingKind::Mac => (0..d).map(|i| tensor.channel(i).iter().copied().fold(0.0, f64::max)).collect(),
        PoolingKind::Spoc => (0..d).map(|i| tensor.channel(i).iter().sum()).collect(),
        PoolingKind::Gem { p } => (0..d)
            .map(|i| {
                let m: f64 = tensor.channel(i).iter().map(|v| v.max(GEM_EPS).powf(p)).sum::<f64>() / n;
                m.powf(1.0 / p)
            })
            .collect(),
        PoolingKind::Rmac => rmac_raw(tensor),
        PoolingKind::Crow => crow_raw(tensor),
    })
}

/// Gradient with respect to the tensor, given the gradient with respect to
/// the raw pooled vector. Returned in the tensor's channel-major layout.
pub fn pool_raw_backward(tensor: &ActivationTensor, kind: PoolingKind, grad_raw: &[f64]) -> Result<Vec<f64>> {
    let kind = kind.validate()?;
    let d = tensor.channels();
    let s = tensor.spatial();
    let mut g = vec![0.0; tensor.len()];
    match kind {
        PoolingKind::Mac => {
            for i in 0..d {
                let j = argmax(tensor.channel(i));
                g[i * s + j] = grad_raw[i];
            }
        }
        PoolingKind::Spoc => {
            for i in 0..d {
                g[i * s..(i + 1) * s].iter_mut().for_each(|v| *v = grad_raw[i]);
            }
        }
        PoolingKind::Gem { p } => {
            let raw = pool_raw(tensor, kind)?;
            for i in 0..d {
                let scale = grad_raw[i] * raw[i].powf(1.0 - p) / s as f64;
                for (gv, x) in g[i * s..(i + 1) * s].iter_mut().zip(tensor.channel(i)) {
                    if *x > GEM_EPS {
                        *gv = scale * x.powf(p - 1.0);
                    }
                }
            }
        }
        PoolingKind::Rmac => rmac_backward(tensor, grad_raw, &mut g),
        PoolingKind::Crow => crow_backward(tensor, grad_raw, &mut g),
    }
    Ok(g)
}

/// Gradient with respect to the tensor of `⟨pool(tensor), grad_desc⟩`.
pub fn pool_backward(tensor: &ActivationTensor, kind: PoolingKind, grad_desc: &[f64]) -> Result<Vec<f64>> {
    let raw = pool_raw(tensor, kind)?;
    let grad_raw = descriptor::normalize_backward(&raw, grad_desc);
    pool_raw_backward(tensor, kind, &grad_raw)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Square region `(y0, x0, size_h, size_w)`.
type Region = (usize, usize, usize, usize);

/// Region grid for an `h x w` map: the full map first, then the regions of
/// each of the three scales.
pub fn rmac_regions(h: usize, w: usize) -> Vec<Region> {
    let mut regions = vec![(0, 0, h, w)];
    let side = h.min(w) as f64;
    let long = h.max(w) as f64;
    let mut best = 0usize;
    let mut best_err = f64::INFINITY;
    for (idx, steps) in (2..=7).enumerate() {
        let b = (long - side) / (steps as f64 - 1.0);
        let err = (((side * side - side * b) / (side * side)) - RMAC_OVERLAP).abs();
        if err < best_err {
            best_err = err;
            best = idx;
        }
    }
    let (wd, hd) = match h.cmp(&w) {
        std::cmp::Ordering::Less => (best + 1, 0),
        std::cmp::Ordering::Greater => (0, best + 1),
        std::cmp::Ordering::Equal => (0, 0),
    };
    for l in 1..=RMAC_LEVELS {
        let wl = (2.0 * side / (l as f64 + 1.0)).floor() as usize;
        if wl == 0 {
            continue;
        }
        let wl2 = (wl as f64 / 2.0 - 1.0).floor();
        let centres = |len: usize, extra: usize| -> Vec<usize> {
            let count = l + extra;
            let b = if count == 1 { 0.0 } else { (len - wl) as f64 / (count - 1) as f64 };
            (0..count)
                .map(|k| {
                    let c = (wl2 + k as f64 * b).floor() - wl2;
                    (c.max(0.0) as usize).min(len - wl)
                })
                .collect()
        };
        for y in centres(h, hd) {
            for x in centres(w, wd) {
                regions.push((y, x, wl, wl));
            }
        }
    }
    regions
}

fn region_max(t: &ActivationTensor, r: Region) -> (Vec<f64>, Vec<usize>) {
    let (y0, x0, rh, rw) = r;
    let w = t.width();
    let mut vals = Vec::with_capacity(t.channels());
    let mut idx = Vec::with_capacity(t.channels());
    for i in 0..t.channels() {
        let ch = t.channel(i);
        let mut best = y0 * w + x0;
        for y in y0..y0 + rh {
            for x in x0..x0 + rw {
                if ch[y * w + x] > ch[best] {
                    best = y * w + x;
                }
            }
        }
        vals.push(ch[best]);
        idx.push(best);
    }
    (vals, idx)
}

fn rmac_raw(t: &ActivationTensor) -> Vec<f64> {
    let mut out = vec![0.0; t.channels()];
    for r in rmac_regions(t.height(), t.width()) {
        let (v, _) = region_max(t, r);
        let n = descriptor::norm(&v) + RMAC_EPS;
        out.iter_mut().zip(&v).for_each(|(o, x)| *o += x / n);
    }
    out
}

fn rmac_backward(t: &ActivationTensor, grad: &[f64], g: &mut [f64]) {
    let s = t.spatial();
    for r in rmac_regions(t.height(), t.width()) {
        let (v, idx) = region_max(t, r);
        let nv = descriptor::norm(&v);
        if nv == 0.0 {
            continue;
        }
        let denom = nv + RMAC_EPS;
        let vg = descriptor::dot(&v, grad);
        for i in 0..v.len() {
            let gv = grad[i] / denom - v[i] * vg / (nv * denom * denom);
            g[i * s + idx[i]] += gv;
        }
    }
}

fn crow_spatial(t: &ActivationTensor) -> (Vec<f64>, f64) {
    let s = t.spatial();
    let mut z = vec![0.0; s];
    for i in 0..t.channels() {
        z.iter_mut().zip(t.channel(i)).for_each(|(a, b)| *a += b);
    }
    let n = descriptor::norm(&z);
    (z, n)
}

fn crow_channel_weights(t: &ActivationTensor) -> Vec<f64> {
    let area = t.spatial() as f64;
    let nz: Vec<f64> = (0..t.channels())
        .map(|i| t.channel(i).iter().filter(|v| **v != 0.0).count() as f64 / area)
        .collect();
    let total: f64 = nz.iter().sum();
    nz.iter().map(|q| if *q > 0.0 { (total / q).ln() } else { 0.0 }).collect()
}

fn crow_raw(t: &ActivationTensor) -> Vec<f64> {
    let (z, n) = crow_spatial(t);
    if n == 0.0 {
        return vec![0.0; t.channels()];
    }
    let sw: Vec<f64> = z.iter().map(|v| (v / n).sqrt()).collect();
    let cw = crow_channel_weights(t);
    (0..t.channels())
        .map(|i| cw[i] * descriptor::dot(t.channel(i), &sw))
        .collect()
}

fn crow_backward(t: &ActivationTensor, grad: &[f64], g: &mut [f64]) {
    let (z, n) = crow_spatial(t);
    if n == 0.0 {
        return;
    }
    let s = t.spatial();
    let sw: Vec<f64> = z.iter().map(|v| (v / n).sqrt()).collect();
    let cw = crow_channel_weights(t);
    // gradient reaching the spatial weights
    let mut gs = vec![0.0; s];
    for i in 0..t.channels() {
        let a = grad[i] * cw[i];
        if a == 0.0 {
            continue;
        }
        gs.iter_mut().zip(t.channel(i)).for_each(|(o, x)| *o += a * x);
        g[i * s..(i + 1) * s].iter_mut().zip(&sw).for_each(|(o, w)| *o += a * w);
    }
    // through S_p = sqrt(Z_p / n), n = ‖Z‖
    let cross: f64 = gs.iter().zip(&z).map(|(gp, zp)| gp * (zp * n).sqrt() / 2.0).sum();
    let n3 = n * n * n;
    let gz: Vec<f64> = gs
        .iter()
        .zip(&z)
        .map(|(gq, zq)| {
            let direct = if *zq > 0.0 { gq / (2.0 * (zq * n).sqrt()) } else { 0.0 };
            direct - zq / n3 * cross
        })
        .collect();
    for i in 0..t.channels() {
        g[i * s..(i + 1) * s].iter_mut().zip(&gz).for_each(|(o, v)| *o += v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(seed: u64, c: usize, h: usize, w: usize, sparsity: f64) -> ActivationTensor {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..c * h * w)
            .map(|_| if r.gen::<f64>() < sparsity { 0.0 } else { r.gen::<f64>() * 2.0 })
            .collect();
        ActivationTensor::new(c, h, w, data).unwrap()
    }

    #[test]
    fn parse_and_display() {
        for k in PoolingKind::all() {
            assert_eq!(k.to_string().parse::<PoolingKind>().unwrap(), k);
        }
        assert_eq!("GeM:2.5".parse::<PoolingKind>().unwrap(), PoolingKind::Gem { p: 2.5 });
        assert_eq!("R-MAC".parse::<PoolingKind>().unwrap(), PoolingKind::Rmac);
        assert!("gem:-1".parse::<PoolingKind>().is_err());
        assert!("avg".parse::<PoolingKind>().is_err());
    }

    #[test]
    fn constant_tensor_gives_uniform_descriptor() {
        let d = 6;
        let t = ActivationTensor::new(d, 5, 7, vec![0.8; d * 35]).unwrap();
        for k in PoolingKind::all() {
            let desc = pool(&t, k).unwrap();
            for v in desc.values() {
                assert!((v - 1.0 / (d as f64).sqrt()).abs() < 1e-12, "{k}: {v}");
            }
        }
    }

    #[test]
    fn all_zero_tensor_is_undefined() {
        let t = ActivationTensor::new(3, 4, 4, vec![0.0; 48]).unwrap();
        for k in [PoolingKind::Mac, PoolingKind::Spoc, PoolingKind::Rmac, PoolingKind::Crow] {
            assert!(matches!(pool(&t, k), Err(Error::UndefinedDirection(_))), "{k}");
        }
    }

    #[test]
    fn gem_p1_equals_spoc() {
        let t = random_tensor(1, 16, 6, 9, 0.4);
        let a = pool(&t, PoolingKind::Gem { p: 1.0 }).unwrap();
        let b = pool(&t, PoolingKind::Spoc).unwrap();
        assert!(a.dot(&b) >= 1.0 - 1e-6);
    }

    #[test]
    fn gem_large_p_approaches_mac() {
        let t = random_tensor(2, 16, 6, 9, 0.3);
        let a = pool(&t, PoolingKind::Gem { p: 100.0 }).unwrap();
        let b = pool(&t, PoolingKind::Mac).unwrap();
        assert!(a.dot(&b) >= 0.999, "{}", a.dot(&b));
    }

    #[test]
    fn scale_invariant_direction() {
        let t = random_tensor(3, 8, 5, 5, 0.2);
        for k in [PoolingKind::Mac, PoolingKind::Spoc, PoolingKind::gem()] {
            let a = pool(&t, k).unwrap();
            let b = pool(&t.scaled(7.5), k).unwrap();
            assert!(a.dot(&b) >= 1.0 - 1e-6);
        }
    }

    #[test]
    fn rmac_regions_cover_map_and_stay_inside() {
        for (h, w) in [(1, 1), (4, 4), (6, 10), (13, 7), (30, 40), (2, 9)] {
            let regions = rmac_regions(h, w);
            assert_eq!(regions[0], (0, 0, h, w));
            for &(y, x, rh, rw) in &regions {
                assert!(y + rh <= h && x + rw <= w, "({h},{w}) -> {:?}", (y, x, rh, rw));
            }
        }
        // square map: 1 + 4 + 9 regions at levels 1..3, plus the full map
        assert_eq!(rmac_regions(12, 12).len(), 1 + 1 + 4 + 9);
        // 3:4 map picks one extra region along the long side
        assert_eq!(rmac_regions(30, 40).len(), 1 + 2 + 6 + 12);
    }

    #[test]
    fn crow_matches_reference_formula() {
        let t = random_tensor(4, 5, 4, 6, 0.5);
        let raw = pool_raw(&t, PoolingKind::Crow).unwrap();
        // direct reimplementation
        let s = t.spatial();
        let mut z = vec![0.0; s];
        for c in 0..5 {
            for p in 0..s {
                z[p] += t.channel(c)[p];
            }
        }
        let zn = z.iter().map(|v| v * v).sum::<f64>().sqrt();
        let q: Vec<f64> = (0..5)
            .map(|c| t.channel(c).iter().filter(|v| **v > 0.0).count() as f64 / s as f64)
            .collect();
        let qs: f64 = q.iter().sum();
        for c in 0..5 {
            let mut acc = 0.0;
            for p in 0..s {
                acc += t.channel(c)[p] * (z[p] / zn).sqrt();
            }
            let w = if q[c] > 0.0 { (qs / q[c]).ln() } else { 0.0 };
            assert!((raw[c] - w * acc).abs() < 1e-12);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        // Strictly positive entries keep CroW's channel weights constant
        // and GeM away from its clamp.
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..6 * 5 * 7).map(|_| 0.1 + r.gen::<f64>()).collect();
        let t = ActivationTensor::new(6, 5, 7, data.clone()).unwrap();
        let gdesc: Vec<f64> = (0..6).map(|_| r.gen::<f64>() - 0.5).collect();
        for k in PoolingKind::all() {
            let an = pool_backward(&t, k, &gdesc).unwrap();
            let f = |d: &[f64]| {
                let tt = ActivationTensor::new(6, 5, 7, d.to_vec()).unwrap();
                descriptor::dot(pool(&tt, k).unwrap().values(), &gdesc)
            };
            for idx in [0, 17, 33, 100, 151, 209] {
                let h = 1e-6;
                let mut p = data.clone();
                let mut m = data.clone();
                p[idx] += h;
                m[idx] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                assert!(
                    (fd - an[idx]).abs() <= 1e-6 + 1e-4 * fd.abs(),
                    "{k} at {idx}: analytic {} vs fd {fd}",
                    an[idx]
                );
            }
        }
    }
}
