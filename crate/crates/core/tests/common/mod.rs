#![allow(dead_code)]

use std::path::Path;

use extsub::{DType, Matrix, TensorEntry, TensorStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_vec(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix<f64> {
    let data = (0..rows * cols).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng)).collect();
    Matrix::from_vec(rows, cols, data)
}

pub fn vec_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn vec_dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn rel_err(got: &[f64], want: &[f64]) -> f64 {
    let diff: Vec<f64> = got.iter().zip(want).map(|(a, b)| a - b).collect();
    let scale = vec_norm(want);
    if scale == 0.0 {
        vec_norm(&diff)
    } else {
        vec_norm(&diff) / scale
    }
}

pub fn max_abs_diff(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Double-double number `hi + lo`, about 106 bits of significand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };

    pub fn from(x: f64) -> Dd {
        Dd { hi: x, lo: 0.0 }
    }

    fn norm(hi: f64, lo: f64) -> Dd {
        let (hi, lo) = quick_two_sum(hi, lo);
        Dd { hi, lo }
    }

    pub fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        Dd::norm(s, e + f)
    }

    pub fn neg(self) -> Dd {
        Dd { hi: -self.hi, lo: -self.lo }
    }

    pub fn sub(self, o: Dd) -> Dd {
        self.add(o.neg())
    }

    pub fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        Dd::norm(p, e + (self.hi * o.lo + self.lo * o.hi))
    }

    pub fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self.sub(o.mul(Dd::from(q1)));
        let q2 = r.hi / o.hi;
        let r = r.sub(o.mul(Dd::from(q2)));
        let q3 = r.hi / o.hi;
        Dd::norm(q1, q2).add(Dd::from(q3))
    }

    pub fn sqrt(self) -> Dd {
        if self.hi <= 0.0 {
            return Dd::ZERO;
        }
        let q = Dd::from(self.hi.sqrt());
        let r = self.sub(q.mul(q));
        q.add(r.div(q.mul(Dd::from(2.0))))
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }
}

fn dd_norm(v: &[Dd]) -> Dd {
    v.iter().fold(Dd::ZERO, |acc, &x| acc.add(x.mul(x))).sqrt()
}

/// Sequential extended-precision evaluation of one row. Returns
/// `(general_part, deficiency, result)`.
pub fn reference_row(v_plus: &[f64], v_minus: &[f64], lambda: f64) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let p: Vec<Dd> = v_plus.iter().map(|&x| Dd::from(x)).collect();
    let m: Vec<Dd> = v_minus.iter().map(|&x| Dd::from(x)).collect();
    let np = dd_norm(&p);
    let nm = dd_norm(&m);
    let g: Vec<Dd> = p.iter().zip(&m).map(|(&a, &b)| a.div(np).add(b.div(nm))).collect();
    let ng = dd_norm(&g);
    let g_hat: Vec<Dd> = g.iter().map(|&x| x.div(ng)).collect();
    let s = m.iter().zip(&g_hat).fold(Dd::ZERO, |acc, (&a, &b)| acc.add(a.mul(b)));
    let general: Vec<Dd> = g_hat.iter().map(|&x| s.mul(x)).collect();
    let deficiency: Vec<Dd> = m.iter().zip(&general).map(|(&a, &b)| a.sub(b)).collect();
    let lam = Dd::from(lambda);
    let result: Vec<Dd> = p.iter().zip(&deficiency).map(|(&a, &d)| a.sub(lam.mul(d))).collect();
    let f = |v: Vec<Dd>| v.into_iter().map(Dd::to_f64).collect::<Vec<_>>();
    (f(general), f(deficiency), f(result))
}

/// Singular values by one-sided Jacobi rotations, descending.
pub fn jacobi_singular_values(m: &Matrix<f64>) -> Vec<f64> {
    // Work on columns of the taller orientation.
    let a = if m.rows() >= m.cols() { m.clone() } else { m.transpose() };
    let (rows, cols) = a.shape();
    let mut c: Vec<Vec<f64>> = (0..cols).map(|j| (0..rows).map(|i| a.get(i, j)).collect()).collect();
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..cols {
            for q in p + 1..cols {
                let alpha = vec_dot(&c[p], &c[p]);
                let beta = vec_dot(&c[q], &c[q]);
                let gamma = vec_dot(&c[p], &c[q]);
                if gamma.abs() <= 1e-16 * (alpha * beta).sqrt() || gamma == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let t = if zeta == 0.0 { 1.0 } else { t };
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (left, right) = c.split_at_mut(q);
                for (x, y) in left[p].iter_mut().zip(right[0].iter_mut()) {
                    (*x, *y) = (cs * *x - sn * *y, sn * *x + cs * *y);
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut s: Vec<f64> = c.iter().map(|col| vec_norm(col)).collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    s
}

/// Random `n×r` matrix with orthonormal columns.
pub fn random_orthonormal(rng: &mut impl Rng, n: usize, r: usize) -> Matrix<f64> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(r);
    while cols.len() < r {
        let mut v = normal_vec(rng, n);
        for _ in 0..2 {
            for c in &cols {
                let d = vec_dot(&v, c);
                v.iter_mut().zip(c).for_each(|(x, y)| *x -= d * y);
            }
        }
        let nv = vec_norm(&v);
        if nv > 1e-8 {
            cols.push(v.into_iter().map(|x| x / nv).collect());
        }
    }
    Matrix::from_fn(n, r, |i, j| cols[j][i])
}

pub const B_SUFFIX: &str = ".lora_B.weight";
pub const A_SUFFIX: &str = ".lora_A.weight";

pub fn layer_key(i: usize) -> String {
    format!("base_model.model.layers.{i}.self_attn.q_proj")
}

/// Synthetic adapter store: `layers` standard-orientation pairs with
/// `B: d×r`, `A: r×k`, plus two passthrough tensors and `lora_alpha`.
pub fn lora_store(seed: u64, layers: usize, d: usize, k: usize, r: usize, dtype: DType) -> TensorStore {
    let mut rng = rng(seed);
    let mut store = TensorStore::new();
    for i in 0..layers {
        let key = layer_key(i);
        let b = normal_matrix(&mut rng, d, r, 0.05);
        let a = normal_matrix(&mut rng, r, k, 0.05);
        store.insert(TensorEntry::from_matrix(format!("{key}{B_SUFFIX}"), &b, dtype));
        store.insert(TensorEntry::from_matrix(format!("{key}{A_SUFFIX}"), &a, dtype));
    }
    let bias: Vec<f64> = normal_vec(&mut rng, k);
    store.insert(TensorEntry::from_f64("score.bias", vec![k], &bias, DType::F32).unwrap());
    let scale: Vec<f64> = (0..d).map(|i| i as f64 * 0.25).collect();
    store.insert(TensorEntry::from_f64("modules_to_save.norm.weight", vec![d], &scale, DType::F16).unwrap());
    store.metadata_mut().insert("lora_alpha".into(), "32".into());
    store.metadata_mut().insert("format".into(), "pt".into());
    store
}

pub fn write_store(store: &TensorStore, path: &Path) {
    store.save(path).expect("save store");
}
