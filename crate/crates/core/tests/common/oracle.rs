//! Brute-force attention oracles shared by the attention and acceptance tests.

use videobooth::unet::AttnProj;
use videobooth::{Graph, Real, RngStream, Tensor};

pub type Mat = Vec<Vec<f64>>;

pub fn mat(t: &Tensor<f64>, rows: usize, cols: usize, offset: usize) -> Mat {
    (0..rows).map(|r| t.data()[offset + r * cols..offset + (r + 1) * cols].to_vec()).collect()
}

pub fn mm(a: &Mat, w: &Mat) -> Mat {
    a.iter()
        .map(|row| (0..w[0].len()).map(|j| row.iter().zip(w).map(|(x, wr)| x * wr[j]).sum()).collect())
        .collect()
}

pub fn cols(a: &Mat, from: usize, n: usize) -> Mat {
    a.iter().map(|r| r[from..from + n].to_vec()).collect()
}

pub fn cat(a: &Mat, b: &Mat) -> Mat {
    a.iter().chain(b).cloned().collect()
}

/// Single-head softmax attention, optional key keep flags.
pub fn attend(q: &Mat, k: &Mat, v: &Mat, keep: Option<&[bool]>) -> Mat {
    let d = q[0].len() as f64;
    q.iter()
        .map(|qr| {
            let s: Vec<f64> = k
                .iter()
                .enumerate()
                .map(|(j, kr)| match keep {
                    Some(m) if !m[j] => f64::NEG_INFINITY,
                    _ => qr.iter().zip(kr).map(|(a, b)| a * b).sum::<f64>() / d.sqrt(),
                })
                .collect();
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len()).map(|c| e.iter().zip(v).map(|(w, vr)| w / z * vr[c]).sum()).collect()
        })
        .collect()
}

/// Per-head attention, heads concatenated along channels.
pub fn attend_heads(q: &Mat, k: &Mat, v: &Mat, heads: usize, keep: Option<&[bool]>) -> Mat {
    let d = q[0].len() / heads;
    let per: Vec<Mat> = (0..heads)
        .map(|h| attend(&cols(q, h * d, d), &cols(k, h * d, d), &cols(v, h * d, d), keep))
        .collect();
    (0..q.len()).map(|r| per.iter().flat_map(|p| p[r].clone()).collect()).collect()
}

pub struct Weights {
    pub q: Tensor<f64>,
    pub k: Tensor<f64>,
    pub v: Tensor<f64>,
    pub o: Tensor<f64>,
    pub ob: Tensor<f64>,
}

impl Weights {
    /// Fan-in scaled, like the model's own initialization.
    pub fn random(rng: &mut RngStream, c: usize, ctx: usize) -> Self {
        let s = (1.0 / c as f64).sqrt();
        let sc = (1.0 / ctx as f64).sqrt();
        Weights {
            q: rng.normal_tensor::<f64>(vec![c, c]).scale(s),
            k: rng.normal_tensor::<f64>(vec![ctx, c]).scale(sc),
            v: rng.normal_tensor::<f64>(vec![ctx, c]).scale(sc),
            o: rng.normal_tensor::<f64>(vec![c, c]).scale(s),
            ob: rng.normal_tensor::<f64>(vec![c]).scale(0.1),
        }
    }

    pub fn bind<T: Real>(&self, g: &Graph<T>, heads: usize) -> AttnProj {
        AttnProj {
            q: g.constant(self.q.cast()),
            k: g.constant(self.k.cast()),
            v: g.constant(self.v.cast()),
            out_w: g.constant(self.o.cast()),
            out_b: Some(g.constant(self.ob.cast())),
            heads,
        }
    }

    pub fn m(&self, t: &Tensor<f64>) -> Mat {
        mat(t, t.shape()[0], t.shape()[1], 0)
    }

    pub fn out(&self, x: &Mat) -> Mat {
        mm(x, &self.m(&self.o)).into_iter().map(|r| r.iter().zip(self.ob.data()).map(|(a, b)| a + b).collect()).collect()
    }
}

pub fn flat(rows: impl IntoIterator<Item = Mat>) -> Vec<f64> {
    rows.into_iter().flatten().flatten().collect()
}

pub fn close(got: &Tensor<f64>, want: &[f64], tol: f64) {
    assert_eq!(got.numel(), want.len());
    for (i, (a, b)) in got.data().iter().zip(want).enumerate() {
        assert!((a - b).abs() < tol, "[{i}] {a} vs {b}");
    }
}

/// Frame `f` of batch `b` in a `[B, F, N, C]` tensor.
pub fn frame(x: &Tensor<f64>, b: usize, f: usize) -> Mat {
    let s = x.shape();
    mat(x, s[2], s[3], ((b * s[1]) + f) * s[2] * s[3])
}

pub fn cross_frame_oracle(x: &Tensor<f64>, w: &Weights, heads: usize, prompt: Option<(&Tensor<f64>, &Weights, bool)>) -> Vec<f64> {
    let s = x.shape();
    let mut out = Vec::new();
    for b in 0..s[0] {
        let xs: Vec<Mat> = (0..s[1]).map(|f| frame(x, b, f)).collect();
        let q: Vec<Mat> = xs.iter().map(|m| mm(m, &w.m(&w.q))).collect();
        let k: Vec<Mat> = xs.iter().map(|m| mm(m, &w.m(&w.k))).collect();
        let v: Vec<Mat> = xs.iter().map(|m| mm(m, &w.m(&w.v))).collect();
        let mut o: Vec<Mat> = Vec::new();
        match prompt {
            None => {
                o.push(attend_heads(&q[0], &k[0], &v[0], heads, None));
                for i in 1..s[1] {
                    o.push(attend_heads(&q[i], &cat(&k[0], &k[i - 1]), &cat(&v[0], &v[i - 1]), heads, None));
                }
            }
            Some((p, pw, recursive)) => {
                let ni = p.shape()[1];
                let pm = mat(p, ni, s[3], b * ni * s[3]);
                let (ki, vi) = (mm(&pm, &pw.m(&pw.k)), mm(&pm, &pw.m(&pw.v)));
                let v0_new = attend_heads(&q[0], &cat(&ki, &k[0]), &cat(&vi, &v[0]), heads, None);
                o.push(v0_new.clone());
                for i in 1..s[1] {
                    let vp = if recursive { o[i - 1].clone() } else { v[i - 1].clone() };
                    o.push(attend_heads(&q[i], &cat(&k[0], &k[i - 1]), &cat(&v0_new, &vp), heads, None));
                }
            }
        }
        out.extend(flat(o.iter().map(|m| w.out(m))));
    }
    out
}

pub fn invert(m: &Mat) -> Mat {
    let n = m.len();
    let mut a: Mat = m.iter().enumerate().map(|(i, r)| r.iter().cloned().chain((0..n).map(|j| (i == j) as u8 as f64)).collect()).collect();
    for c in 0..n {
        let p = (c..n).max_by(|&x, &y| a[x][c].abs().total_cmp(&a[y][c].abs())).unwrap();
        a.swap(c, p);
        let d = a[c][c];
        a[c].iter_mut().for_each(|v| *v /= d);
        for r in 0..n {
            if r != c {
                let f = a[r][c];
                let pivot = a[c].clone();
                a[r].iter_mut().zip(&pivot).for_each(|(v, pv)| *v -= f * pv);
            }
        }
    }
    a.into_iter().map(|r| r[n..].to_vec()).collect()
}
