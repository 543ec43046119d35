//! Parameter initialisation and the two reusable layers: affine maps and LSTM
//! cells. Each layer has a graph form for training and a plain-tensor form
//! for decoding.

use rand::Rng;

use super::graph::{sigmoid, Graph, ParamStore, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub(crate) fn get<'a>(store: &'a ParamStore, name: &str) -> Result<&'a Tensor> {
    store
        .get(name)
        .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
}

/// `{prefix}.w` (`input × output`, std 1/√input) and `{prefix}.b` (zeros).
pub fn init_linear<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input: usize, output: usize, rng: &mut R) {
    let std = 1.0 / (input.max(1) as f64).sqrt();
    store.insert(format!("{prefix}.w"), Tensor::randn(&[input, output], std, rng));
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[1, output]));
}

/// A bias-free projection `{prefix}` (`input × output`).
pub fn init_matrix<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, input: usize, output: usize, rng: &mut R) {
    let std = 1.0 / (input.max(1) as f64).sqrt();
    store.insert(name.to_string(), Tensor::randn(&[input, output], std, rng));
}

pub fn linear(g: &mut Graph, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param_from(store, &format!("{prefix}.w"))?;
    let b = g.param_from(store, &format!("{prefix}.b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

pub fn linear_eval(store: &ParamStore, prefix: &str, x: &Tensor) -> Result<Tensor> {
    let w = get(store, &format!("{prefix}.w"))?;
    let b = get(store, &format!("{prefix}.b"))?;
    let mut y = x.matmul(w)?;
    add_row_in_place(&mut y, b)?;
    Ok(y)
}

pub(crate) fn add_row_in_place(x: &mut Tensor, row: &Tensor) -> Result<()> {
    if row.len() != x.cols() {
        return Err(Error::dim("add_row", format!("{:?} + row {:?}", x.shape(), row.shape())));
    }
    for r in 0..x.rows() {
        for (v, b) in x.row_mut(r).iter_mut().zip(row.data()) {
            *v += b;
        }
    }
    Ok(())
}

/// LSTM weights `{prefix}.w_ih` (`input × 4H`), `{prefix}.w_hh` (`H × 4H`)
/// and `{prefix}.b` (`1 × 4H`), gate order input, forget, cell, output. The
/// forget-gate bias starts at 1.
pub fn init_lstm<R: Rng + ?Sized>(store: &mut ParamStore, prefix: &str, input: usize, hidden: usize, rng: &mut R) {
    let std = 1.0 / (hidden.max(1) as f64).sqrt();
    store.insert(format!("{prefix}.w_ih"), Tensor::randn(&[input, 4 * hidden], std, rng));
    store.insert(format!("{prefix}.w_hh"), Tensor::randn(&[hidden, 4 * hidden], std, rng));
    let mut b = Tensor::zeros(&[1, 4 * hidden]);
    for v in &mut b.data_mut()[hidden..2 * hidden] {
        *v = 1.0;
    }
    store.insert(format!("{prefix}.b"), b);
}

/// Graph handles of one LSTM's weights.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    w_ih: Var,
    w_hh: Var,
    b: Var,
    hidden: usize,
}

impl LstmVars {
    pub fn load(g: &mut Graph, store: &ParamStore, prefix: &str) -> Result<Self> {
        let w_ih = g.param_from(store, &format!("{prefix}.w_ih"))?;
        let w_hh = g.param_from(store, &format!("{prefix}.w_hh"))?;
        let b = g.param_from(store, &format!("{prefix}.b"))?;
        let hidden = g.value(w_hh).rows();
        Ok(LstmVars { w_ih, w_hh, b, hidden })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// One step for a batch of rows: `x` is `B × input`, `h`, `c` are `B × H`.
    pub fn step(&self, g: &mut Graph, x: Var, h: Var, c: Var) -> Result<(Var, Var)> {
        let hd = self.hidden;
        let a = g.matmul(x, self.w_ih)?;
        let r = g.matmul(h, self.w_hh)?;
        let z = g.add(a, r)?;
        let z = g.add_row(z, self.b)?;
        let i = g.slice(z, 1, 0, hd)?;
        let f = g.slice(z, 1, hd, 2 * hd)?;
        let gg = g.slice(z, 1, 2 * hd, 3 * hd)?;
        let o = g.slice(z, 1, 3 * hd, 4 * hd)?;
        let i = g.sigmoid(i);
        let f = g.sigmoid(f);
        let gg = g.tanh(gg);
        let o = g.sigmoid(o);
        let fc = g.mul(f, c)?;
        let ig = g.mul(i, gg)?;
        let c2 = g.add(fc, ig)?;
        let tc = g.tanh(c2);
        let h2 = g.mul(o, tc)?;
        Ok((h2, c2))
    }
}

/// Plain-tensor LSTM step for a single row; returns `(h, c)`.
pub fn lstm_step_eval(store: &ParamStore, prefix: &str, x: &[f64], h: &[f64], c: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let w_ih = get(store, &format!("{prefix}.w_ih"))?;
    let w_hh = get(store, &format!("{prefix}.w_hh"))?;
    let b = get(store, &format!("{prefix}.b"))?;
    let hd = w_hh.rows();
    if x.len() != w_ih.rows() || h.len() != hd || c.len() != hd {
        return Err(Error::dim("lstm_step", format!("input {} / state {} vs weights {:?}", x.len(), h.len(), w_ih.shape())));
    }
    let xt = Tensor::new(vec![1, x.len()], x.to_vec())?;
    let ht = Tensor::new(vec![1, hd], h.to_vec())?;
    let z = xt.matmul(w_ih)?.add(&ht.matmul(w_hh)?)?.add(b)?;
    let z = z.data();
    let mut h2 = vec![0.0; hd];
    let mut c2 = vec![0.0; hd];
    for j in 0..hd {
        let i = sigmoid(z[j]);
        let f = sigmoid(z[hd + j]);
        let gg = z[2 * hd + j].tanh();
        let o = sigmoid(z[3 * hd + j]);
        c2[j] = f * c[j] + i * gg;
        h2[j] = o * c2[j].tanh();
    }
    Ok((h2, c2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_unit_lstm_matches_hand_recurrence() {
        let mut store = ParamStore::new();
        // input, forget, cell, output gate weights for a 1-unit cell.
        store.insert("l.w_ih".into(), Tensor::from_rows(&[[0.5, -0.3, 0.8, 0.1]]).unwrap());
        store.insert("l.w_hh".into(), Tensor::from_rows(&[[0.2, 0.4, -0.6, 0.9]]).unwrap());
        store.insert("l.b".into(), Tensor::from_rows(&[[0.0, 1.0, 0.1, -0.2]]).unwrap());
        let s = |z: f64| 1.0 / (1.0 + (-z).exp());
        let (x, h0, c0) = (0.7, -0.2, 0.3);
        let i = s(0.5 * x + 0.2 * h0);
        let f = s(-0.3 * x + 0.4 * h0 + 1.0);
        let gg = (0.8 * x - 0.6 * h0 + 0.1).tanh();
        let o = s(0.1 * x + 0.9 * h0 - 0.2);
        let c1 = f * c0 + i * gg;
        let h1 = o * c1.tanh();

        let (h, c) = lstm_step_eval(&store, "l", &[x], &[h0], &[c0]).unwrap();
        assert!((h[0] - h1).abs() < 1e-15 && (c[0] - c1).abs() < 1e-15);

        let mut g = Graph::new();
        let vars = LstmVars::load(&mut g, &store, "l").unwrap();
        let xv = g.constant(Tensor::scalar(x).reshape(&[1, 1]).unwrap());
        let hv = g.constant(Tensor::scalar(h0).reshape(&[1, 1]).unwrap());
        let cv = g.constant(Tensor::scalar(c0).reshape(&[1, 1]).unwrap());
        let (hg, cg) = vars.step(&mut g, xv, hv, cv).unwrap();
        assert!((g.value(hg).item() - h1).abs() < 1e-15);
        assert!((g.value(cg).item() - c1).abs() < 1e-15);
    }

    #[test]
    fn graph_and_eval_paths_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        init_lstm(&mut store, "l", 3, 4, &mut rng);
        init_linear(&mut store, "p", 4, 2, &mut rng);
        let x = [0.3, -1.0, 0.5];
        let h0 = [0.1, 0.2, -0.3, 0.0];
        let c0 = [0.5, -0.5, 0.0, 0.2];
        let (h, _) = lstm_step_eval(&store, "l", &x, &h0, &c0).unwrap();
        let y = linear_eval(&store, "p", &Tensor::new(vec![1, 4], h.clone()).unwrap()).unwrap();

        let mut g = Graph::new();
        let vars = LstmVars::load(&mut g, &store, "l").unwrap();
        let xv = g.constant(Tensor::new(vec![1, 3], x.to_vec()).unwrap());
        let hv = g.constant(Tensor::new(vec![1, 4], h0.to_vec()).unwrap());
        let cv = g.constant(Tensor::new(vec![1, 4], c0.to_vec()).unwrap());
        let (hg, _) = vars.step(&mut g, xv, hv, cv).unwrap();
        let yg = linear(&mut g, &store, "p", hg).unwrap();
        for (a, b) in g.value(hg).data().iter().zip(&h) {
            assert!((a - b).abs() < 1e-14);
        }
        for (a, b) in g.value(yg).data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn zero_weights_give_zero_state() {
        let mut store = ParamStore::new();
        store.insert("l.w_ih".into(), Tensor::zeros(&[2, 8]));
        store.insert("l.w_hh".into(), Tensor::zeros(&[2, 8]));
        store.insert("l.b".into(), Tensor::zeros(&[1, 8]));
        let (h, c) = lstm_step_eval(&store, "l", &[1.0, -2.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(h, vec![0.0, 0.0]);
        assert_eq!(c, vec![0.0, 0.0]);
    }
}
