//! Dense layers shared by the agent, the reward decoder and the environment model.

use rand::Rng;

use super::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use crate::Result;

/// Whether a forward pass should produce gradients for a module's parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    Train,
    Frozen,
}

pub(crate) fn bind<S: Scalar>(g: &mut Graph<S>, store: &ParamStore<S>, id: ParamId, b: Bind) -> Var {
    match b {
        Bind::Train => g.param(store, id),
        Bind::Frozen => g.frozen(store, id),
    }
}

/// `y = x·W + b` with `W: [in, out]`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` initialization for weight and bias.
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(&[in_dim, out_dim], bound, rng),
        );
        let bias = store.add(format!("{name}.bias"), Tensor::uniform(&[out_dim], bound, rng));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        b: Bind,
    ) -> Result<Var> {
        let w = bind(g, store, self.weight, b);
        let bias = bind(g, store, self.bias, b);
        let y = g.matmul(x, w)?;
        g.add_row_bias(y, bias)
    }
}

/// Fully connected ReLU network with a linear output layer.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        b: Bind,
    ) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, store, h, b)?;
            if i < last {
                h = g.relu(h);
            }
        }
        Ok(h)
    }

    /// Zero the weights and bias of the output layer.
    pub fn zero_output<S: Scalar>(&self, store: &mut ParamStore<S>) {
        let out = self.layers.last().expect("non-empty mlp");
        store.value_mut(out.weight).fill(S::zero());
        store.value_mut(out.bias).fill(S::zero());
    }
}

/// Gated recurrent unit.
///
/// ```text
/// r  = σ(x·W_r + b_r + h·U_r + c_r)
/// u  = σ(x·W_u + b_u + h·U_u + c_u)
/// c  = tanh(x·W_c + b_c + r ⊙ (h·U_c + c_c))
/// h' = (1 − u) ⊙ h + u ⊙ c
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: [Linear; 3],
    pub hidden: [Linear; 3],
    pub in_dim: usize,
    pub hidden_dim: usize,
}

impl GruCell {
    pub fn new<S: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<S>,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Self {
        // Both input and recurrent maps use the ±1/sqrt(hidden) range.
        let mk = |store: &mut ParamStore<S>, tag: &str, d_in: usize, rng: &mut R| {
            let bound = 1.0 / (hidden_dim as f64).sqrt();
            let weight = store.add(
                format!("{name}.{tag}.weight"),
                Tensor::uniform(&[d_in, hidden_dim], bound, rng),
            );
            let bias = store.add(
                format!("{name}.{tag}.bias"),
                Tensor::uniform(&[hidden_dim], bound, rng),
            );
            Linear {
                weight,
                bias,
                in_dim: d_in,
                out_dim: hidden_dim,
            }
        };
        let input = [
            mk(store, "x_reset", in_dim, rng),
            mk(store, "x_update", in_dim, rng),
            mk(store, "x_cand", in_dim, rng),
        ];
        let hidden = [
            mk(store, "h_reset", hidden_dim, rng),
            mk(store, "h_update", hidden_dim, rng),
            mk(store, "h_cand", hidden_dim, rng),
        ];
        GruCell {
            input,
            hidden,
            in_dim,
            hidden_dim,
        }
    }

    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        store: &ParamStore<S>,
        x: Var,
        h: Var,
        b: Bind,
    ) -> Result<Var> {
        let xr = self.input[0].forward(g, store, x, b)?;
        let hr = self.hidden[0].forward(g, store, h, b)?;
        let r = g.add(xr, hr)?;
        let r = g.sigmoid(r);

        let xu = self.input[1].forward(g, store, x, b)?;
        let hu = self.hidden[1].forward(g, store, h, b)?;
        let u = g.add(xu, hu)?;
        let u = g.sigmoid(u);

        let xc = self.input[2].forward(g, store, x, b)?;
        let hc = self.hidden[2].forward(g, store, h, b)?;
        let rh = g.mul(r, hc)?;
        let c = g.add(xc, rh)?;
        let c = g.tanh(c);

        let keep = g.one_minus(u);
        let old = g.mul(keep, h)?;
        let new = g.mul(u, c)?;
        g.add(old, new)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.input
            .iter()
            .chain(self.hidden.iter())
            .flat_map(|l| [l.weight, l.bias])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_gru(in_dim: usize, hidden: usize) -> (ParamStore<f64>, GruCell) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let cell = GruCell::new(&mut store, "gru", in_dim, hidden, &mut rng);
        for p in store.iter_mut() {
            p.value.fill(0.0);
        }
        (store, cell)
    }

    #[test]
    fn zero_gru_from_zero_state_stays_zero() {
        let (store, cell) = zero_gru(3, 4);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(&[1, 3], &[0.3, -1.0, 2.0]).unwrap());
        let h = g.constant(Tensor::zeros(&[1, 4]));
        let h2 = cell.forward(&mut g, &store, x, h, Bind::Frozen).unwrap();
        assert!(g.value(h2).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_gru_halves_the_state() {
        let (store, cell) = zero_gru(2, 3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_f64(&[1, 2], &[5.0, -5.0]).unwrap());
        let h = g.constant(Tensor::from_f64(&[1, 3], &[1.0, -2.0, 0.5]).unwrap());
        let h2 = cell.forward(&mut g, &store, x, h, Bind::Frozen).unwrap();
        assert_eq!(g.value(h2).data(), &[0.5, -1.0, 0.25]);
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let lin = Linear::new(&mut store, "l", 3, 2, &mut rng);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[4, 5]));
        assert!(lin.forward(&mut g, &store, x, Bind::Train).is_err());
    }
}
