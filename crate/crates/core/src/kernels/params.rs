//! Uniform access to trainable tensors, used for flattening parameter
//! bundles during training and for the weight checkpoint layout.

use super::tensor::{GroupNormParams, LinearLayer};

/// Visits every trainable tensor in a fixed, declared order.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &[usize], &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, _, v| out.extend_from_slice(v));
        out
    }

    /// Overwrites every tensor from a flat vector laid out as [`Parameters::flatten`].
    fn assign(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.param_count(), "flat parameter length mismatch");
        let mut at = 0;
        self.visit_mut(&mut |_, _, v| {
            v.copy_from_slice(&flat[at..at + v.len()]);
            at += v.len();
        });
    }

    /// Named blocks with their flat offsets: `(name, start, len)`.
    fn layout(&self) -> Vec<(String, usize, usize)> {
        let mut out = Vec::new();
        let mut at = 0;
        self.visit(&mut |name, _, v| {
            out.push((name.to_string(), at, v.len()));
            at += v.len();
        });
        out
    }

    fn fill(&mut self, value: f64) {
        self.visit_mut(&mut |_, _, v| v.fill(value));
    }
}

pub(crate) fn visit_linear(
    prefix: &str,
    l: &LinearLayer,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    f(
        &format!("{prefix}.weight"),
        &[l.weight.rows(), l.weight.cols()],
        l.weight.data(),
    );
    f(&format!("{prefix}.bias"), &[l.bias.len()], &l.bias);
}

pub(crate) fn visit_linear_mut(
    prefix: &str,
    l: &mut LinearLayer,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let shape = [l.weight.rows(), l.weight.cols()];
    f(&format!("{prefix}.weight"), &shape, l.weight.data_mut());
    let n = l.bias.len();
    f(&format!("{prefix}.bias"), &[n], &mut l.bias);
}

pub(crate) fn visit_norm(
    prefix: &str,
    g: &GroupNormParams,
    f: &mut dyn FnMut(&str, &[usize], &[f64]),
) {
    f(&format!("{prefix}.gamma"), &[g.gamma.len()], &g.gamma);
    f(&format!("{prefix}.beta"), &[g.beta_shift.len()], &g.beta_shift);
}

pub(crate) fn visit_norm_mut(
    prefix: &str,
    g: &mut GroupNormParams,
    f: &mut dyn FnMut(&str, &[usize], &mut [f64]),
) {
    let n = g.gamma.len();
    f(&format!("{prefix}.gamma"), &[n], &mut g.gamma);
    f(&format!("{prefix}.beta"), &[n], &mut g.beta_shift);
}
