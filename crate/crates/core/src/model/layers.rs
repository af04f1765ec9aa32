use autodiff::{ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

/// Tensor of uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` entries.
pub(crate) fn uniform_init(shape: &[usize], fan_in: usize, r: &mut ChaCha8Rng) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Affine map `x W + b` with `W: [fan_in, fan_out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: usize,
    pub b: usize,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn register(params: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, r: &mut ChaCha8Rng) -> Self {
        let w = params.add(format!("{name}.w"), uniform_init(&[fan_in, fan_out], fan_in, r));
        let b = params.add(format!("{name}.b"), uniform_init(&[fan_out], fan_in, r));
        Self { w, b, fan_in, fan_out }
    }

    /// A layer whose output starts at exactly zero.
    pub fn register_zero(params: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = params.add(format!("{name}.w"), Tensor::zeros(&[fan_in, fan_out]));
        let b = params.add(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let y = tape.matmul(x, vars[self.w])?;
        Ok(tape.add(y, vars[self.b])?)
    }
}

/// Stack of linear layers with SiLU between them (none after the last).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn register(params: &mut ParamStore, name: &str, widths: &[usize], r: &mut ChaCha8Rng) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::register(params, &format!("{name}.{i}"), w[0], w[1], r))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            x = l.forward(tape, vars, x)?;
            if i < last {
                x = tape.silu(x)?;
            }
        }
        Ok(x)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn init_respects_fan_in_bound() {
        let mut r = rng::stream(0, rng::STREAM_INIT, 0, 0);
        let t = uniform_init(&[100, 7], 100, &mut r);
        assert!(t.data().iter().all(|x| x.abs() < 0.1));
        assert!(t.data().iter().any(|x| x.abs() > 0.05));
    }

    #[test]
    fn zero_layer_outputs_zero() {
        let mut params = ParamStore::new();
        let l = Linear::register_zero(&mut params, "z", 4, 3);
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape, false);
        let x = tape.constant(Tensor::full(&[2, 4], 1.5));
        let y = l.forward(&mut tape, &vars, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0; 6]);
    }
}
