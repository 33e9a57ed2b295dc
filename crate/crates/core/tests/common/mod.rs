//! Independent reference implementations for the oracle tests. Everything
//! here is written with plain loops over nested vectors and shares no code
//! with the library beyond its public types.
#![allow(dead_code)]

use std::collections::BTreeMap;

use pgs_core::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, random_vec(rng, n).into_iter().map(|v| v * scale).collect()).unwrap()
}

pub fn naive_ncc(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    let den = (aa.sqrt() * bb.sqrt()).max(1e-12);
    (ab / den).clamp(-1.0, 1.0)
}

pub fn naive_euclidean(a: &[f64], b: &[f64]) -> f64 {
    -a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Full similarity row, stable sort by (similarity desc, index asc), first `k`.
/// Returns `(key index, similarity)` per query.
pub fn brute_knn(
    queries: &[Vec<f64>],
    keys: &[Vec<f64>],
    k: usize,
    euclidean: bool,
    exclude_self: bool,
) -> Vec<Vec<(usize, f64)>> {
    queries
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let mut all: Vec<(usize, f64)> = keys
                .iter()
                .enumerate()
                .filter(|(j, _)| !(exclude_self && *j == i))
                .map(|(j, key)| {
                    let s = if euclidean {
                        naive_euclidean(q, key)
                    } else {
                        naive_ncc(q, key)
                    };
                    (j, s)
                })
                .collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            all.truncate(k);
            all
        })
        .collect()
}

fn leaky(x: f64, slope: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        slope * x
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// `W · v` for a row-major `[out, in]` tensor.
pub fn matvec(w: &Tensor, v: &[f64]) -> Vec<f64> {
    let (o, i) = (w.shape()[0], w.shape()[1]);
    assert_eq!(i, v.len());
    (0..o)
        .map(|r| (0..i).map(|c| w.data()[r * i + c] * v[c]).sum())
        .collect()
}

/// Channel vector at patch position `pos` of a channel-major node feature.
pub fn pixel(x: &[f64], channels: usize, pos: usize) -> Vec<f64> {
    let positions = x.len() / channels;
    (0..channels).map(|ch| x[ch * positions + pos]).collect()
}

/// Writes per-position channel vectors back into channel-major layout.
pub fn from_pixels(pixels: &[Vec<f64>], channels: usize) -> Vec<f64> {
    let positions = pixels.len();
    let mut out = vec![0.0; channels * positions];
    for (pos, v) in pixels.iter().enumerate() {
        for ch in 0..channels {
            out[ch * positions + pos] = v[ch];
        }
    }
    out
}

pub struct DenseGat<'a> {
    pub wb: &'a Tensor,
    pub att_left: &'a Tensor,
    pub att_right: &'a Tensor,
    pub out_weight: &'a Tensor,
    pub out_bias: &'a Tensor,
    pub slope: f64,
}

impl DenseGat<'_> {
    fn heads(&self) -> usize {
        self.att_left.shape()[0]
    }

    fn dh(&self) -> usize {
        self.att_left.shape()[1]
    }

    fn channels(&self) -> usize {
        self.wb.shape()[1]
    }

    /// Transformed vectors per position: `[pos][heads·dh]`.
    fn transform(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let c = self.channels();
        (0..x.len() / c).map(|pos| matvec(self.wb, &pixel(x, c, pos))).collect()
    }

    fn half(&self, z: &[Vec<f64>], att: &Tensor, h: usize) -> f64 {
        let dh = self.dh();
        let mut s = 0.0;
        for zp in z {
            for d in 0..dh {
                s += att.data()[h * dh + d] * zp[h * dh + d];
            }
        }
        s / z.len() as f64
    }

    /// Attention weights `[head][neighbor]`.
    pub fn weights(&self, center: &[f64], neighbors: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let zc = self.transform(center);
        let zn: Vec<_> = neighbors.iter().map(|n| self.transform(n)).collect();
        (0..self.heads())
            .map(|h| {
                let l = self.half(&zc, self.att_left, h);
                let logits: Vec<f64> = zn
                    .iter()
                    .map(|z| leaky(l + self.half(z, self.att_right, h), self.slope))
                    .collect();
                softmax(&logits)
            })
            .collect()
    }

    /// Attention update with residual.
    pub fn aggregate(&self, center: &[f64], neighbors: &[Vec<f64>]) -> Vec<f64> {
        let (c, dh, heads) = (self.channels(), self.dh(), self.heads());
        let positions = center.len() / c;
        let w = self.weights(center, neighbors);
        let zn: Vec<_> = neighbors.iter().map(|n| self.transform(n)).collect();
        let mut pixels = Vec::new();
        for pos in 0..positions {
            let mut u = vec![0.0; dh];
            for h in 0..heads {
                for (j, z) in zn.iter().enumerate() {
                    for d in 0..dh {
                        u[d] += w[h][j] * z[pos][h * dh + d] / heads as f64;
                    }
                }
            }
            let mut o = matvec(self.out_weight, &u);
            let own = pixel(center, c, pos);
            for ch in 0..c {
                o[ch] += self.out_bias.data()[ch] + own[ch];
            }
            pixels.push(o);
        }
        from_pixels(&pixels, c)
    }
}

fn affine(arrays: &BTreeMap<String, Tensor>, prefix: &str, v: &[f64]) -> Vec<f64> {
    let w = &arrays[&format!("{prefix}weight")];
    let b = &arrays[&format!("{prefix}bias")];
    matvec(w, v).iter().zip(b.data()).map(|(a, b)| a + b).collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

/// Alternative aggregator formulas (no residual) applied per patch position.
pub fn dense_alt(kind: &str, arrays: &BTreeMap<String, Tensor>, center: &[f64], neighbors: &[Vec<f64>]) -> Vec<f64> {
    let c = arrays
        .get("weight")
        .or_else(|| arrays.get("mlp1.weight"))
        .unwrap()
        .shape()[0];
    let positions = center.len() / c;
    let k = neighbors.len() as f64;
    let pixels: Vec<Vec<f64>> = (0..positions)
        .map(|pos| {
            let own = pixel(center, c, pos);
            let nb: Vec<Vec<f64>> = neighbors.iter().map(|n| pixel(n, c, pos)).collect();
            let mean: Vec<f64> = (0..c).map(|ch| nb.iter().map(|v| v[ch]).sum::<f64>() / k).collect();
            match kind {
                "gcn" => affine(arrays, "", &mean),
                "gin" => {
                    let eps = arrays["eps"].data()[0];
                    let h: Vec<f64> = (0..c)
                        .map(|ch| (1.0 + eps) * own[ch] + nb.iter().map(|v| v[ch]).sum::<f64>())
                        .collect();
                    affine(arrays, "mlp2.", &relu(affine(arrays, "mlp1.", &h)))
                }
                "sage" => {
                    let cat: Vec<f64> = own.iter().chain(mean.iter()).copied().collect();
                    affine(arrays, "", &cat)
                }
                "edgeconv" => {
                    let mut best = vec![f64::NEG_INFINITY; c];
                    for v in &nb {
                        let cat: Vec<f64> = own
                            .iter()
                            .chain(v.iter().zip(&own).map(|(a, b)| a - b).collect::<Vec<_>>().iter())
                            .copied()
                            .collect();
                        let m = affine(arrays, "mlp2.", &relu(affine(arrays, "mlp1.", &cat)));
                        for ch in 0..c {
                            best[ch] = best[ch].max(m[ch]);
                        }
                    }
                    best
                }
                other => panic!("unknown kind {other}"),
            }
        })
        .collect();
    from_pixels(&pixels, c)
}

/// Corner-aligned bilinear sample of a square `side × side` plane at
/// fractional coordinates.
pub fn bilinear(plane: &[f64], side: usize, y: f64, x: f64) -> f64 {
    let y0 = (y.floor() as usize).min(side - 1);
    let x0 = (x.floor() as usize).min(side - 1);
    let y1 = (y0 + 1).min(side - 1);
    let x1 = (x0 + 1).min(side - 1);
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| plane[r * side + c];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Resizes a `(c, side, side)` patch to `(c, t, t)`.
pub fn resize_oracle(data: &[f64], c: usize, side: usize, t: usize) -> Vec<f64> {
    let coord = |i: usize| {
        if t == 1 {
            (side - 1) as f64 / 2.0
        } else {
            i as f64 * (side - 1) as f64 / (t - 1) as f64
        }
    };
    let mut out = Vec::new();
    for ch in 0..c {
        let plane = &data[ch * side * side..(ch + 1) * side * side];
        for py in 0..t {
            for px in 0..t {
                out.push(bilinear(plane, side, coord(py), coord(px)));
            }
        }
    }
    out
}

/// Window of side `scale` around base location `(oy, ox)` of a `p`-grid,
/// shifted to stay inside `(h, w)`, resized to `p × p`.
pub fn window_oracle(
    map: &[f64],
    (c, h, w): (usize, usize, usize),
    oy: usize,
    ox: usize,
    p: usize,
    scale: usize,
) -> Vec<f64> {
    let start = |o: usize, n: usize| -> usize {
        let s = (o + (p - 1) / 2) as i64 - ((scale - 1) / 2) as i64;
        s.clamp(0, (n - scale) as i64) as usize
    };
    let (sy, sx) = (start(oy, h), start(ox, w));
    let mut patch = Vec::with_capacity(c * scale * scale);
    for ch in 0..c {
        for y in 0..scale {
            for x in 0..scale {
                patch.push(map[(ch * h + sy + y) * w + sx + x]);
            }
        }
    }
    resize_oracle(&patch, c, scale, p)
}

/// Two-pass per-channel mean and population standard deviation.
pub fn stats_oracle(data: &[f64], c: usize) -> (Vec<f64>, Vec<f64>) {
    let hw = data.len() / c;
    let mut means = Vec::new();
    let mut stds = Vec::new();
    for ch in 0..c {
        let plane = &data[ch * hw..(ch + 1) * hw];
        let m = plane.iter().sum::<f64>() / hw as f64;
        let v = plane.iter().map(|x| (x - m).powi(2)).sum::<f64>() / hw as f64;
        means.push(m);
        stds.push(v.sqrt());
    }
    (means, stds)
}

/// Overlap mean computed by explicit value and count accumulation.
pub fn overlap_mean_oracle(patches: &[Vec<f64>], (c, h, w): (usize, usize, usize), p: usize, s: usize) -> Vec<f64> {
    let gw = (w - p) / s + 1;
    let mut acc = vec![0.0; c * h * w];
    let mut cnt = vec![0usize; h * w];
    for (i, patch) in patches.iter().enumerate() {
        let (oy, ox) = ((i / gw) * s, (i % gw) * s);
        for y in 0..p {
            for x in 0..p {
                cnt[(oy + y) * w + ox + x] += 1;
                for ch in 0..c {
                    acc[(ch * h + oy + y) * w + ox + x] += patch[(ch * p + y) * p + x];
                }
            }
        }
    }
    acc.iter()
        .enumerate()
        .map(|(i, v)| {
            let n = cnt[i % (h * w)];
            if n == 0 {
                0.0
            } else {
                v / n as f64
            }
        })
        .collect()
}

pub fn rms(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

/// Largest relative error `|a − n| / max(|a|, |n|, floor)` between analytic
/// and numeric derivatives.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
