//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::config::{DecoderConfig, EncoderConfig};
use crate::decoder::{make_permutation_masks, VisibilityMask};
use crate::model::Recognizer;
use crate::params::GradMode;
use crate::raster::GrayImage;
use crate::seeds;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.params.iter().all(|p| p.passed)
    }

    pub fn worst(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn failures(&self) -> Vec<&ParamCheck> {
        self.params.iter().filter(|p| !p.passed).collect()
    }
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences `(f(x+h) - f(x-h)) / 2h`, one scalar at a time.
///
/// `f` builds the scalar output on a fresh graph from leaves bound to the
/// given parameters (in order).
pub fn finite_difference_check<F>(
    f: F,
    params: &[(String, Tensor)],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Parameter(format!("eps must be in (0, 1e-2], got {eps}")));
    }
    let eval = |values: &[Tensor], grad: bool| -> Result<(f64, Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), grad)).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::Dimension("finite_difference_check needs a scalar output".into()));
        }
        let v = g.value(out).data()[0];
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value {v} is not finite")));
        }
        Ok((v, g, out, vars))
    };

    let mut values: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (_, g, out, vars) = eval(&values, true)?;
    let grads = g.backward(out, &Tensor::scalar(1.0))?;

    let mut report = Vec::with_capacity(params.len());
    for (pi, (name, t)) in params.iter().enumerate() {
        let analytic = grads
            .get(vars[pi])
            .map(Tensor::into_data)
            .unwrap_or_else(|| vec![0.0; t.len()]);
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for i in 0..t.len() {
            let orig = values[pi].data()[i];
            values[pi].data_mut()[i] = orig + eps;
            let plus = eval(&values, false)?.0;
            values[pi].data_mut()[i] = orig - eps;
            let minus = eval(&values, false)?.0;
            values[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic[i], numeric);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = analytic[i];
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_error <= tol;
        report.push(check);
    }
    Ok(GradCheckReport {
        eps,
        tol,
        params: report,
    })
}

/// Finite-difference check of a recognizer's loss with respect to every
/// parameter `mode` trains, using the model's own forward pass.
pub fn check_model_gradients(
    model: &Recognizer,
    mode: GradMode,
    image: &GrayImage,
    target: &[usize],
    masks: &[VisibilityMask],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Parameter(format!("eps must be in (0, 1e-2], got {eps}")));
    }
    let analytic = model.sample_grad(mode.clone(), image, target, masks)?;
    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| mode.trains(n))
        .cloned()
        .collect();
    let mut probe = model.clone();
    let mut report = Vec::with_capacity(names.len());
    for name in names {
        let len = model.params.get(&name)?.len();
        let grad = analytic
            .grads
            .iter()
            .find(|(n, _)| n == &name)
            .map(|(_, g)| g.clone())
            .unwrap_or_else(|| vec![0.0; len]);
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
            passed: true,
        };
        for i in 0..len {
            let orig = model.params.get(&name)?.data()[i];
            probe.params.get_mut(&name)?.data_mut()[i] = orig + eps;
            let plus = probe.sample_loss(image, target, masks)?;
            probe.params.get_mut(&name)?.data_mut()[i] = orig - eps;
            let minus = probe.sample_loss(image, target, masks)?;
            probe.params.get_mut(&name)?.data_mut()[i] = orig;
            if !(plus.is_finite() && minus.is_finite()) {
                return Err(Error::Numeric(format!("loss not finite while probing {name}")));
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(grad[i], numeric);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = grad[i];
                check.numeric = numeric;
            }
        }
        check.passed = check.max_rel_error <= tol;
        report.push(check);
    }
    Ok(GradCheckReport {
        eps,
        tol,
        params: report,
    })
}

/// Tiny recognizer with every adapter path live: random expert
/// up-projections and nonzero gates.
pub fn tiny_check_model(seed: u64) -> Result<Recognizer> {
    use rand::Rng;
    let enc = EncoderConfig {
        image_size: 8,
        patch_size: 4,
        embed_dim: 8,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        adapter_layers: vec![0, 1],
        num_experts: 4,
        top_k: 2,
        expert_bottleneck: 3,
    };
    let dec = DecoderConfig {
        num_permutations: 3,
        max_label_len: 3,
        num_categories: 3,
        heads: 2,
        mlp_ratio: 2,
    };
    let mut model = Recognizer::new(enc, dec, seed)?;
    let mut rng = seeds::stream(seed, "gradcheck.live");
    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| n.contains(".up.") || n.ends_with(".gate"))
        .cloned()
        .collect();
    for name in names {
        for v in model.params.get_mut(&name)?.data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
    }
    Ok(model)
}

/// Checks every adapter and decoder gradient of [`tiny_check_model`] on a
/// random image with a three-token label under permuted masks.
pub fn tiny_model_gradient_check(seed: u64, eps: f64, tol: f64) -> Result<GradCheckReport> {
    use rand::Rng;
    let model = tiny_check_model(seed)?;
    let mut rng = seeds::stream(seed, "gradcheck.input");
    let image = GrayImage::from_pixels(8, 8, (0..64).map(|_| rng.gen_range(0.0..1.0)).collect())?;
    let target = [0, 2, 1];
    let masks = make_permutation_masks(target.len() + 1, model.decoder.num_permutations, seed)?;
    check_model_gradients(&model, GradMode::Adapters, &image, &target, &masks, eps, tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_exact() {
        let c = Tensor::new(vec![3], vec![2.0, -1.5, 0.25]).unwrap();
        let x = Tensor::new(vec![3], vec![0.3, 0.1, -0.7]).unwrap();
        let report = finite_difference_check(
            |g, v| {
                let cv = g.constant(c.clone());
                let p = g.mul(v[0], cv)?;
                Ok(g.sum(p))
            },
            &[("x".into(), x)],
            1e-3,
            1e-10,
        )
        .unwrap();
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn null_function() {
        let x = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        let report = finite_difference_check(
            |g, v| {
                let z = g.scale(v[0], 0.0);
                Ok(g.sum(z))
            },
            &[("x".into(), x)],
            1e-4,
            1e-10,
        )
        .unwrap();
        assert!(report.all_passed());
        assert_eq!(report.params[0].analytic, 0.0);
        assert_eq!(report.params[0].numeric, 0.0);
    }

    #[test]
    fn bad_eps_and_non_finite() {
        let x = Tensor::scalar(1.0);
        let r = finite_difference_check(|g, v| Ok(g.sum(v[0])), &[("x".into(), x.clone())], 0.1, 1e-4);
        assert!(matches!(r, Err(Error::Parameter(_))));
        let r = finite_difference_check(
            |g, v| {
                let s = g.scale(v[0], f64::INFINITY);
                Ok(g.sum(s))
            },
            &[("x".into(), x)],
            1e-4,
            1e-4,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    fn composite_matmul_softmax_cross_entropy() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut rand_t = |r: usize, c: usize| {
            Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let x = rand_t(3, 4);
        let w1 = rand_t(4, 5);
        let w2 = rand_t(5, 3);
        let report = finite_difference_check(
            |g, v| {
                let h = g.matmul(v[0], v[1])?;
                let h = g.softmax(h, 1)?;
                let logits = g.matmul(h, v[2])?;
                g.cross_entropy(logits, &[Some(0), Some(2), None])
            },
            &[("x".into(), x), ("w1".into(), w1), ("w2".into(), w2)],
            1e-6,
            1e-4,
        )
        .unwrap();
        assert!(report.all_passed(), "{report:?}");
    }

    #[test]
    fn tiny_model_passes() {
        let report = tiny_model_gradient_check(0, 1e-4, 1e-4).unwrap();
        assert!(report.all_passed(), "{:?}", report.failures());
        assert!(report.params.iter().any(|p| p.name.contains(".up.w") && p.analytic != 0.0));
    }
}
