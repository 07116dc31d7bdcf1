//! Central finite-difference verification of tape gradients.

use crate::tape::{Tape, Var};
use ndarray::ArrayD;

/// Compare analytic gradients against central finite differences for a
/// scalar-valued graph of the given inputs. Returns the maximum
/// relative error over all input entries.
///
/// `build` must construct the same graph every call (it is re-run for
/// every perturbed evaluation).
pub fn max_rel_err<B>(inputs: &[ArrayD<f64>], build: B, step: f64) -> f64
where
    B: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let mut t = Tape::<f64>::new();
        let vars: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let root = build(&mut t, &vars);
        t.scalar(root)
    };

    // Analytic pass.
    let mut t = Tape::<f64>::new();
    let vars: Vec<Var> = inputs.iter().map(|x| t.leaf(x.clone())).collect();
    let root = build(&mut t, &vars);
    let grads = t.backward(root);

    let mut worst = 0.0f64;
    let mut xs: Vec<ArrayD<f64>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let zero = ArrayD::zeros(input.raw_dim());
        let analytic = grads.of(vars[i]).unwrap_or(&zero);
        for (idx, _) in input.indexed_iter() {
            let orig = xs[i][&idx];
            xs[i][&idx] = orig + step;
            let fp = eval(&xs);
            xs[i][&idx] = orig - step;
            let fm = eval(&xs);
            xs[i][&idx] = orig;
            let numeric = (fp - fm) / (2.0 * step);
            let a = analytic[&idx];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            let rel = (a - numeric).abs() / denom;
            if rel > worst {
                worst = rel;
            }
        }
    }
    worst
}
