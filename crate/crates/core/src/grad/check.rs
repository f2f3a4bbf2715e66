//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::Rng;

use super::param::ParamStore;
use super::tape::{Tape, Var};
use crate::error::Result;

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor of the relative error, so gradients near zero are
/// compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Name of the parameter holding the worst entry.
    pub worst: String,
    pub entries: usize,
}

/// Compares tape gradients of the scalar `loss` with central differences
/// on up to `per_param` random entries of every trainable parameter.
pub fn check_param_gradients<R: Rng + ?Sized>(
    store: &mut ParamStore,
    per_param: usize,
    rng: &mut R,
    loss: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
) -> Result<GradCheck> {
    let mut tape = Tape::new();
    let l = loss(&mut tape, store)?;
    let grads = tape.backward(l)?.param_grads(store);
    let eval = |store: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = loss(&mut t, store)?;
        Ok(t.value(l).item())
    };
    let mut out = GradCheck { max_rel_error: 0.0, worst: String::new(), entries: 0 };
    for p in 0..store.len() {
        let (len, trainable, name) = {
            let param = store.iter().nth(p).expect("index in range");
            (param.tensor.len(), param.trainable, param.id.clone())
        };
        if !trainable {
            continue;
        }
        let picks: Vec<usize> = if len <= per_param { (0..len).collect() } else { sample(rng, len, per_param).into_vec() };
        for j in picks {
            let id = store.lookup(&name).expect("name from store");
            let orig = store.param(id).tensor.data()[j];
            store.param_mut(id).tensor.data_mut()[j] = orig + FD_STEP;
            let plus = eval(store)?;
            store.param_mut(id).tensor.data_mut()[j] = orig - FD_STEP;
            let minus = eval(store)?;
            store.param_mut(id).tensor.data_mut()[j] = orig;
            let err = relative_error(grads[p].data()[j], (plus - minus) / (2.0 * FD_STEP));
            out.entries += 1;
            if err > out.max_rel_error {
                out.max_rel_error = err;
                out.worst = format!("{name}[{j}]");
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::{Init, Linear, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn linear_tanh_free_model_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, Init::XavierUniform, &mut rng).unwrap();
        let x = Tensor::randn(vec![4, 3], &mut rng);
        let r = check_param_gradients(&mut store, 100, &mut rng, |t, s| {
            let xv = t.constant(x.clone());
            let y = lin.forward(t, s, xv)?;
            let y = t.gelu(y);
            Ok(t.sum(y))
        })
        .unwrap();
        assert_eq!(r.entries, 8);
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn wrong_gradient_is_caught() {
        assert!(relative_error(1.0, 1.1) > 0.05);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
    }
}
