//! Minimal reverse-mode autodiff over `Array2<f64>`, sized for the set
//! denoiser: a flat tape of ops with hand-written adjoints. Values are always
//! 2-D; vectors are 1 x H rows and scalars 1 x 1.

use ndarray::{Array2, Axis};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VarId(pub usize);

enum Op {
    Leaf,
    MatMul(VarId, VarId),
    Add(VarId, VarId),
    /// Broadcast-add a 1 x H row onto every row of the left operand.
    AddRow(VarId, VarId),
    Mul(VarId, VarId),
    AddScalar(VarId, #[allow(dead_code)] f64),
    Scale(VarId, f64),
    Sub(VarId, VarId),
    Silu(VarId),
    LayerNorm(VarId),
    SoftmaxRows(VarId),
    SliceCols(VarId, usize, usize),
    SliceRows(VarId, usize, usize),
    Transpose(VarId),
    MaxPoolRows(VarId),
    SumSq(VarId),
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
}

pub(crate) const LN_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::with_capacity(256) }
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> VarId {
        self.nodes.push(Node { value, op });
        VarId(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> VarId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: VarId) -> &Array2<f64> {
        &self.nodes[id.0].value
    }

    pub fn matmul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: VarId, row: VarId) -> VarId {
        let v = &self.nodes[a.0].value + &self.nodes[row.0].value;
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: VarId, c: f64) -> VarId {
        let v = &self.nodes[a.0].value + c;
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn scale(&mut self, a: VarId, c: f64) -> VarId {
        let v = &self.nodes[a.0].value * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn sub(&mut self, a: VarId, b: VarId) -> VarId {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(v, Op::Sub(a, b))
    }

    pub fn silu(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    /// Row-wise layer normalization without learnable affine.
    pub fn layer_norm(&mut self, a: VarId) -> VarId {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|e| (e - mean) * (e - mean)).mean().unwrap();
            let inv = 1.0 / (var + LN_EPS).sqrt();
            row.mapv_inplace(|e| (e - mean) * inv);
        }
        self.push(v, Op::LayerNorm(a))
    }

    pub fn softmax_rows(&mut self, a: VarId) -> VarId {
        let mut v = self.nodes[a.0].value.clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &e| m.max(e));
            row.mapv_inplace(|e| (e - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|e| e / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn slice_cols(&mut self, a: VarId, start: usize, end: usize) -> VarId {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![.., start..end])
            .to_owned();
        self.push(v, Op::SliceCols(a, start, end))
    }

    pub fn slice_rows(&mut self, a: VarId, start: usize, end: usize) -> VarId {
        let v = self.nodes[a.0]
            .value
            .slice(ndarray::s![start..end, ..])
            .to_owned();
        self.push(v, Op::SliceRows(a, start, end))
    }

    pub fn transpose(&mut self, a: VarId) -> VarId {
        let v = self.nodes[a.0].value.t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    /// Column-wise max over rows, producing a 1 x H row.
    pub fn max_pool_rows(&mut self, a: VarId) -> VarId {
        let x = &self.nodes[a.0].value;
        let mut v = Array2::from_elem((1, x.ncols()), f64::NEG_INFINITY);
        for row in x.rows() {
            for (j, &e) in row.iter().enumerate() {
                if e > v[[0, j]] {
                    v[[0, j]] = e;
                }
            }
        }
        self.push(v, Op::MaxPoolRows(a))
    }

    /// Sum of squared entries as a 1 x 1 scalar.
    pub fn sum_sq(&mut self, a: VarId) -> VarId {
        let s = self.nodes[a.0].value.iter().map(|&e| e * e).sum::<f64>();
        self.push(Array2::from_elem((1, 1), s), Op::SumSq(a))
    }

    /// Backpropagate from `root` (seeded with grad 1) and return per-node
    /// gradients.
    pub fn backward(&self, root: VarId) -> Vec<Array2<f64>> {
        let mut grads: Vec<Array2<f64>> = self
            .nodes
            .iter()
            .map(|n| Array2::zeros(n.value.dim()))
            .collect();
        grads[root.0].fill(1.0);
        for i in (0..=root.0).rev() {
            if grads[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[i].clone();
            match self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&g);
                    grads[a.0] += &da;
                    grads[b.0] += &db;
                }
                Op::Add(a, b) => {
                    grads[a.0] += &g;
                    grads[b.0] += &g;
                }
                Op::AddRow(a, row) => {
                    grads[a.0] += &g;
                    let summed = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    grads[row.0] += &summed;
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[b.0].value;
                    let db = &g * &self.nodes[a.0].value;
                    grads[a.0] += &da;
                    grads[b.0] += &db;
                }
                Op::AddScalar(a, _) => grads[a.0] += &g,
                Op::Scale(a, c) => {
                    let da = &g * c;
                    grads[a.0] += &da;
                }
                Op::Sub(a, b) => {
                    grads[a.0] += &g;
                    grads[b.0] -= &g;
                }
                Op::Silu(a) => {
                    let x = &self.nodes[a.0].value;
                    let da = ndarray::Zip::from(&g).and(x).map_collect(|&gv, &xv| {
                        let s = sigmoid(xv);
                        gv * s * (1.0 + xv * (1.0 - s))
                    });
                    grads[a.0] += &da;
                }
                Op::LayerNorm(a) => {
                    let x = &self.nodes[a.0].value;
                    let y = &self.nodes[i].value;
                    let mut da = Array2::zeros(x.dim());
                    for (r, row) in x.rows().into_iter().enumerate() {
                        let n = row.len() as f64;
                        let mean = row.mean().unwrap();
                        let var = row.mapv(|e| (e - mean) * (e - mean)).mean().unwrap();
                        let inv = 1.0 / (var + LN_EPS).sqrt();
                        let gy = g.row(r);
                        let yr = y.row(r);
                        let mean_gy = gy.mean().unwrap();
                        let mean_gy_y = gy
                            .iter()
                            .zip(yr.iter())
                            .map(|(&a, &b)| a * b)
                            .sum::<f64>()
                            / n;
                        for j in 0..row.len() {
                            da[[r, j]] = inv * (gy[j] - mean_gy - yr[j] * mean_gy_y);
                        }
                    }
                    grads[a.0] += &da;
                }
                Op::SoftmaxRows(a) => {
                    let y = &self.nodes[i].value;
                    let mut da = Array2::zeros(y.dim());
                    for (r, yr) in y.rows().into_iter().enumerate() {
                        let gy = g.row(r);
                        let dot = gy.iter().zip(yr.iter()).map(|(&a, &b)| a * b).sum::<f64>();
                        for j in 0..yr.len() {
                            da[[r, j]] = yr[j] * (gy[j] - dot);
                        }
                    }
                    grads[a.0] += &da;
                }
                Op::SliceCols(a, start, end) => {
                    let mut view = grads[a.0].slice_mut(ndarray::s![.., start..end]);
                    view += &g;
                }
                Op::SliceRows(a, start, end) => {
                    let mut view = grads[a.0].slice_mut(ndarray::s![start..end, ..]);
                    view += &g;
                }
                Op::Transpose(a) => {
                    let da = g.t().to_owned();
                    grads[a.0] += &da;
                }
                Op::MaxPoolRows(a) => {
                    let x = &self.nodes[a.0].value;
                    for j in 0..x.ncols() {
                        let mut best = 0usize;
                        for r in 1..x.nrows() {
                            if x[[r, j]] > x[[best, j]] {
                                best = r;
                            }
                        }
                        grads[a.0][[best, j]] += g[[0, j]];
                    }
                }
                Op::SumSq(a) => {
                    let da = self.nodes[a.0].value.mapv(|e| 2.0 * e * g[[0, 0]]);
                    grads[a.0] += &da;
                }
            }
        }
        grads
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Finite-difference check of a scalar function of one leaf.
    fn check_grad(
        build: impl Fn(&mut Tape, VarId) -> VarId,
        x0: Array2<f64>,
        tol: f64,
    ) {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let y = build(&mut tape, x);
        assert_eq!(tape.value(y).dim(), (1, 1));
        let grads = tape.backward(y);
        let h = 1e-6;
        for r in 0..x0.nrows() {
            for c in 0..x0.ncols() {
                let eval = |delta: f64| {
                    let mut xp = x0.clone();
                    xp[[r, c]] += delta;
                    let mut t = Tape::new();
                    let xv = t.leaf(xp);
                    let yv = build(&mut t, xv);
                    t.value(yv)[[0, 0]]
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                let an = grads[x.0][[r, c]];
                assert!(
                    (fd - an).abs() < tol * (1.0 + fd.abs()),
                    "({r},{c}): fd {fd} analytic {an}"
                );
            }
        }
    }

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn grad_matmul_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_mat(&mut rng, 4, 3);
        check_grad(
            move |t, x| {
                let wv = t.leaf(w.clone());
                let y = t.matmul(x, wv);
                let s = t.silu(y);
                t.sum_sq(s)
            },
            rand_mat(&mut rng, 5, 4),
            1e-4,
        );
    }

    #[test]
    fn grad_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        check_grad(
            |t, x| {
                let y = t.layer_norm(x);
                let z = t.add_scalar(y, 0.3);
                let m = t.mul(z, y);
                t.sum_sq(m)
            },
            rand_mat(&mut rng, 3, 6),
            1e-4,
        );
    }

    #[test]
    fn grad_softmax_attention_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let k = rand_mat(&mut rng, 4, 3);
        check_grad(
            move |t, x| {
                let kv = t.leaf(k.clone());
                let kt = t.transpose(kv);
                let scores = t.matmul(x, kt);
                let scaled = t.scale(scores, 1.0 / 3.0f64.sqrt());
                let att = t.softmax_rows(scaled);
                let out = t.matmul(att, kv);
                t.sum_sq(out)
            },
            rand_mat(&mut rng, 4, 3),
            1e-4,
        );
    }

    #[test]
    fn grad_slices_and_pool() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check_grad(
            |t, x| {
                let a = t.slice_cols(x, 0, 3);
                let b = t.slice_cols(x, 3, 6);
                let m = t.mul(a, b);
                let p = t.max_pool_rows(m);
                t.sum_sq(p)
            },
            rand_mat(&mut rng, 5, 6),
            1e-4,
        );
    }

    #[test]
    fn grad_broadcast_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = rand_mat(&mut rng, 4, 3);
        check_grad(
            move |t, x| {
                let av = t.leaf(a.clone());
                // x is a 1 x 3 row broadcast over 4 rows
                let y = t.add_row(av, x);
                let s = t.silu(y);
                t.sum_sq(s)
            },
            rand_mat(&mut rng, 1, 3),
            1e-4,
        );
    }

    #[test]
    fn values_match_manual() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[1.0, 2.0], [3.0, 4.0]]);
        let b = tape.leaf(array![[1.0, 0.0], [0.0, 1.0]]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c), &array![[1.0, 2.0], [3.0, 4.0]]);
        let s = tape.sum_sq(c);
        assert_eq!(tape.value(s)[[0, 0]], 30.0);
    }
}
