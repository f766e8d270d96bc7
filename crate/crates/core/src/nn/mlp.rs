use ndarray::{s, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::embedding::write_time_embedding;
use super::params::{Param, ParamSet};
use crate::error::{Error, Result};

/// Shape of a conditional denoiser MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Arch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub time_embed_dim: usize,
    pub num_conditions: usize,
    pub cond_embed_dim: usize,
}

impl Arch {
    pub fn new(input_dim: usize, num_conditions: usize) -> Self {
        Self {
            input_dim,
            hidden: vec![128, 128, 128],
            time_embed_dim: 32,
            num_conditions,
            cond_embed_dim: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("arch.input_dim must be positive"));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(Error::config("arch.hidden must list positive widths"));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(Error::config("arch.time_embed_dim must be even and positive"));
        }
        if self.num_conditions == 0 {
            return Err(Error::config("arch.num_conditions must be positive"));
        }
        if self.cond_embed_dim == 0 {
            return Err(Error::config("arch.cond_embed_dim must be positive"));
        }
        Ok(())
    }

    /// Index of the reserved empty condition.
    pub fn empty_condition(&self) -> usize {
        self.num_conditions
    }

    fn concat_dim(&self) -> usize {
        self.input_dim + self.time_embed_dim + self.cond_embed_dim
    }
}

/// Which gradients a backward pass should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    /// Parameter gradients and the gradient with respect to `x`.
    ParamsAndInput,
    /// Only the gradient with respect to `x`; the network is treated as frozen.
    InputOnly,
}

/// Activations kept from a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    cond: Vec<usize>,
    input: Array2<f64>,
    pre: Vec<Array2<f64>>,
    post: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.input.nrows()
    }
}

#[derive(Debug, Clone)]
pub struct Backward {
    pub params: Option<ParamSet>,
    pub input: Array2<f64>,
}

/// Conditional MLP `f(x, t, c)` over `concat(x, time_embedding(t), cond_embedding(c))`
/// with SiLU hidden layers and a linear head of width `input_dim`.
///
/// The head is read as an epsilon prediction; denoiser-space outputs are obtained
/// through the schedule bijection in [`crate::diffusion`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserNet {
    pub arch: Arch,
    pub params: ParamSet,
}

const COND: usize = 0;

fn hidden_weight(i: usize) -> usize {
    1 + 2 * i
}

fn hidden_bias(i: usize) -> usize {
    2 + 2 * i
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl DenoiserNet {
    /// Hidden layers get uniform init with variance `2 / fan_in`; the condition
    /// table is unit-variance uniform; the output layer starts at zero.
    pub fn new<R: Rng + ?Sized>(arch: Arch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut entries = Vec::new();
        let unit = 3f64.sqrt();
        entries.push(Param {
            name: "cond_embed".into(),
            value: Array2::from_shape_fn((arch.num_conditions + 1, arch.cond_embed_dim), |_| {
                rng.random_range(-unit..unit)
            }),
        });
        let mut fan_in = arch.concat_dim();
        for (i, &width) in arch.hidden.iter().enumerate() {
            let limit = (6.0 / fan_in as f64).sqrt();
            entries.push(Param {
                name: format!("hidden{i}.weight"),
                value: Array2::from_shape_fn((fan_in, width), |_| rng.random_range(-limit..limit)),
            });
            entries.push(Param {
                name: format!("hidden{i}.bias"),
                value: Array2::zeros((1, width)),
            });
            fan_in = width;
        }
        entries.push(Param {
            name: "out.weight".into(),
            value: Array2::zeros((fan_in, arch.input_dim)),
        });
        entries.push(Param {
            name: "out.bias".into(),
            value: Array2::zeros((1, arch.input_dim)),
        });
        Ok(Self {
            params: ParamSet::new(entries)?,
            arch,
        })
    }

    /// Rebuilds a network from stored parameters, checking them against `arch`.
    pub fn from_params(arch: Arch, params: ParamSet) -> Result<Self> {
        arch.validate()?;
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let template = Self::new(arch.clone(), &mut rng)?;
        template
            .params
            .ensure_congruent(&params, "parameters do not match architecture")?;
        Ok(Self { arch, params })
    }

    fn out_weight(&self) -> usize {
        hidden_weight(self.arch.hidden.len())
    }

    fn out_bias(&self) -> usize {
        hidden_bias(self.arch.hidden.len())
    }

    fn build_input(&self, x: ArrayView2<f64>, t: &[usize], c: &[usize]) -> Result<Array2<f64>> {
        let n = x.nrows();
        let d = self.arch.input_dim;
        if x.ncols() != d {
            return Err(Error::config(format!(
                "input has {} columns, network expects {d}",
                x.ncols()
            )));
        }
        if t.len() != n || c.len() != n {
            return Err(Error::config(format!(
                "batch length mismatch: x={n}, t={}, c={}",
                t.len(),
                c.len()
            )));
        }
        if let Some(&bad) = c.iter().find(|&&ci| ci > self.arch.num_conditions) {
            return Err(Error::input(format!(
                "condition index {bad} out of range 0..={}",
                self.arch.num_conditions
            )));
        }
        let te = self.arch.time_embed_dim;
        let ce = self.arch.cond_embed_dim;
        let table = self.params.get(COND);
        let mut input = Array2::zeros((n, self.arch.concat_dim()));
        for (i, mut row) in input.outer_iter_mut().enumerate() {
            row.slice_mut(s![..d]).assign(&x.row(i));
            let slice = row.as_slice_mut().expect("row-major input");
            write_time_embedding(t[i], te, &mut slice[d..d + te])?;
            slice[d + te..d + te + ce]
                .copy_from_slice(table.row(c[i]).as_slice().expect("row-major table"));
        }
        Ok(input)
    }

    pub fn forward(&self, x: ArrayView2<f64>, t: &[usize], c: &[usize]) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x, t, c)?.0)
    }

    pub fn forward_cached(
        &self,
        x: ArrayView2<f64>,
        t: &[usize],
        c: &[usize],
    ) -> Result<(Array2<f64>, ForwardCache)> {
        let input = self.build_input(x, t, c)?;
        let depth = self.arch.hidden.len();
        let mut pre = Vec::with_capacity(depth);
        let mut post: Vec<Array2<f64>> = Vec::with_capacity(depth);
        for i in 0..depth {
            let h = if i == 0 { &input } else { &post[i - 1] };
            let mut z = h.dot(self.params.get(hidden_weight(i)));
            z += &self.params.get(hidden_bias(i)).row(0);
            let a = z.mapv(|v| v * sigmoid(v));
            pre.push(z);
            post.push(a);
        }
        let mut out = post[depth - 1].dot(self.params.get(self.out_weight()));
        out += &self.params.get(self.out_bias()).row(0);
        Ok((
            out,
            ForwardCache {
                cond: c.to_vec(),
                input,
                pre,
                post,
            },
        ))
    }

    /// Reverse pass for `grad_out = dL/d(output)`.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<f64>,
        mode: GradMode,
    ) -> Result<Backward> {
        let n = cache.batch();
        if grad_out.nrows() != n || grad_out.ncols() != self.arch.input_dim {
            return Err(Error::config("output gradient shape does not match forward batch"));
        }
        let want_params = mode == GradMode::ParamsAndInput;
        let mut grads = want_params.then(|| ParamSet::zeros_like(&self.params));
        let depth = self.arch.hidden.len();

        if let Some(g) = grads.as_mut() {
            *g.get_mut(self.out_weight()) = cache.post[depth - 1].t().dot(&grad_out);
            *g.get_mut(self.out_bias()) = grad_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        }
        let mut grad_h = grad_out.dot(&self.params.get(self.out_weight()).t());
        let d = self.arch.input_dim;
        let mut grad_x = None;
        for i in (0..depth).rev() {
            let mut grad_z = grad_h;
            ndarray::Zip::from(&mut grad_z)
                .and(&cache.pre[i])
                .for_each(|g, &z| {
                    let s = sigmoid(z);
                    *g *= s * (1.0 + z * (1.0 - s));
                });
            let prev = if i == 0 { &cache.input } else { &cache.post[i - 1] };
            if let Some(g) = grads.as_mut() {
                *g.get_mut(hidden_weight(i)) = prev.t().dot(&grad_z);
                *g.get_mut(hidden_bias(i)) = grad_z.sum_axis(Axis(0)).insert_axis(Axis(0));
            }
            let w = self.params.get(hidden_weight(i));
            if i > 0 {
                grad_h = grad_z.dot(&w.t());
            } else if want_params {
                grad_h = grad_z.dot(&w.t());
                grad_x = Some(grad_h.slice(s![.., ..d]).to_owned());
                let te = self.arch.time_embed_dim;
                let g = grads.as_mut().expect("param grads requested");
                let table = g.get_mut(COND);
                for (row, &ci) in cache.cond.iter().enumerate() {
                    let mut dst = table.row_mut(ci);
                    dst += &grad_h.slice(s![row, d + te..]);
                }
                break;
            } else {
                // only the x columns of the first layer matter for a frozen net
                grad_x = Some(grad_z.dot(&w.slice(s![..d, ..]).t()));
                break;
            }
        }
        let input = grad_x.expect("network has at least one hidden layer");
        if input.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("input_grad", "non-finite gradient"));
        }
        if let Some(g) = grads.as_ref() {
            g.ensure_finite()?;
        }
        Ok(Backward {
            params: grads,
            input,
        })
    }
}

/// Gradient of a scalar loss built on one network evaluation.
#[derive(Debug, Clone)]
pub struct NetGrad {
    pub loss: f64,
    pub params: ParamSet,
    pub input: Array2<f64>,
}

/// Evaluates `loss(net(x, t, c))` and returns its gradient with respect to the
/// parameters and to `x`. The closure returns the loss value and `dL/d(output)`.
pub fn net_grad<L>(
    net: &DenoiserNet,
    x: ArrayView2<f64>,
    t: &[usize],
    c: &[usize],
    loss: L,
) -> Result<NetGrad>
where
    L: FnOnce(ArrayView2<f64>) -> (f64, Array2<f64>),
{
    let (out, cache) = net.forward_cached(x, t, c)?;
    let (value, grad_out) = loss(out.view());
    if !value.is_finite() {
        return Err(Error::numeric("loss", "non-finite loss value"));
    }
    let back = net.backward(&cache, grad_out.view(), GradMode::ParamsAndInput)?;
    Ok(NetGrad {
        loss: value,
        params: back.params.expect("param grads requested"),
        input: back.input,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_arch() -> Arch {
        Arch {
            input_dim: 2,
            hidden: vec![8, 8],
            time_embed_dim: 4,
            num_conditions: 3,
            cond_embed_dim: 3,
        }
    }

    fn randomized(seed: u64) -> DenoiserNet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = DenoiserNet::new(small_arch(), &mut rng).unwrap();
        for p in net.params.iter_mut() {
            p.value.mapv_inplace(|_| rng.random_range(-0.8..0.8));
        }
        net
    }

    fn batch() -> (Array2<f64>, Vec<usize>, Vec<usize>) {
        (
            array![[0.3, -1.2], [1.5, 0.4], [-0.7, 0.9]],
            vec![3, 250, 999],
            vec![0, 3, 2],
        )
    }

    #[test]
    fn zero_output_layer_gives_constant_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = DenoiserNet::new(small_arch(), &mut rng).unwrap();
        net.params.find_mut("out.bias").unwrap().assign(&array![[0.25, -2.0]]);
        let (x, t, c) = batch();
        let out = net.forward(x.view(), &t, &c).unwrap();
        for row in out.outer_iter() {
            assert_eq!(row.to_vec(), vec![0.25, -2.0]);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let net = randomized(2);
        let (x, t, c) = batch();
        let a = net.forward(x.view(), &t, &c).unwrap();
        let b = net.forward(x.view(), &t, &c).unwrap();
        assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    #[test]
    fn shape_and_condition_errors() {
        let net = randomized(3);
        let (x, t, c) = batch();
        assert!(matches!(net.forward(x.view(), &t[..2], &c), Err(Error::Config(_))));
        assert!(matches!(
            net.forward(x.view(), &t, &[0, 1, 4]),
            Err(Error::Input(_))
        ));
        let wide = Array2::zeros((3, 3));
        assert!(matches!(net.forward(wide.view(), &t, &c), Err(Error::Config(_))));
    }

    #[test]
    fn sum_loss_gives_unit_bias_gradient() {
        let net = randomized(4);
        let (x, t, c) = batch();
        let g = net_grad(&net, x.view(), &t, &c, |out| {
            (out.sum(), Array2::ones(out.raw_dim()))
        })
        .unwrap();
        // each of the 3 rows contributes 1 to every output bias
        assert_eq!(g.params.find("out.bias").unwrap(), &array![[3.0, 3.0]]);
    }

    #[test]
    fn unused_condition_rows_get_exact_zero() {
        let net = randomized(5);
        let (x, t, c) = batch();
        let g = net_grad(&net, x.view(), &t, &c, |out| {
            (out.sum(), Array2::ones(out.raw_dim()))
        })
        .unwrap();
        // condition 1 never appears in the batch
        assert!(g.params.find("cond_embed").unwrap().row(1).iter().all(|&v| v == 0.0));
    }

    fn quad_loss(out: ArrayView2<f64>) -> (f64, Array2<f64>) {
        let target = array![[0.1, 0.2], [-0.3, 0.5], [0.0, -1.0]];
        let diff = &out - &target;
        ((&diff * &diff).sum(), diff * 2.0)
    }

    #[test]
    fn reverse_mode_matches_central_differences() {
        let net = randomized(6);
        let (x, t, c) = batch();
        let g = net_grad(&net, x.view(), &t, &c, quad_loss).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for pi in 0..net.params.len() {
            for idx in 0..net.params.get(pi).len() {
                let mut plus = net.clone();
                let mut minus = net.clone();
                plus.params.get_mut(pi).as_slice_mut().unwrap()[idx] += h;
                minus.params.get_mut(pi).as_slice_mut().unwrap()[idx] -= h;
                let lp = quad_loss(plus.forward(x.view(), &t, &c).unwrap().view()).0;
                let lm = quad_loss(minus.forward(x.view(), &t, &c).unwrap().view()).0;
                let fd = (lp - lm) / (2.0 * h);
                let an = g.params.get(pi).as_slice().unwrap()[idx];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst <= 1e-4, "max relative error {worst}");
    }

    #[test]
    fn input_gradient_matches_central_differences_in_both_modes() {
        let net = randomized(7);
        let (x, t, c) = batch();
        let (out, cache) = net.forward_cached(x.view(), &t, &c).unwrap();
        let (_, gout) = quad_loss(out.view());
        let full = net.backward(&cache, gout.view(), GradMode::ParamsAndInput).unwrap();
        let frozen = net.backward(&cache, gout.view(), GradMode::InputOnly).unwrap();
        assert!(frozen.params.is_none());
        let h = 1e-6;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[[i, j]] += h;
                xm[[i, j]] -= h;
                let lp = quad_loss(net.forward(xp.view(), &t, &c).unwrap().view()).0;
                let lm = quad_loss(net.forward(xm.view(), &t, &c).unwrap().view()).0;
                let fd = (lp - lm) / (2.0 * h);
                for g in [&full.input, &frozen.input] {
                    let rel = (fd - g[[i, j]]).abs() / fd.abs().max(1e-6);
                    assert!(rel < 1e-6, "dx[{i},{j}]: fd {fd} vs {}", g[[i, j]]);
                }
            }
        }
    }

    #[test]
    fn single_weight_perturbation_is_linear_to_first_order() {
        let net = randomized(8);
        let (x, t, c) = batch();
        // d(out[0,0]) / d(hidden1.weight[2,5])
        let g = net_grad(&net, x.view(), &t, &c, |out| {
            let mut go = Array2::zeros(out.raw_dim());
            go[[0, 0]] = 1.0;
            (out[[0, 0]], go)
        })
        .unwrap();
        let an = g.params.find("hidden1.weight").unwrap()[[2, 5]];
        let delta = 1e-5;
        let bump = |s: f64| {
            let mut n = net.clone();
            n.params.find_mut("hidden1.weight").unwrap()[[2, 5]] += s;
            n.forward(x.view(), &t, &c).unwrap()[[0, 0]]
        };
        let fd = (bump(delta) - bump(-delta)) / (2.0 * delta);
        assert!((fd - an).abs() / an.abs().max(1e-8) < 1e-6, "fd {fd} analytic {an}");
    }

    #[test]
    fn from_params_rejects_wrong_shapes() {
        let net = randomized(9);
        let mut arch = small_arch();
        arch.hidden = vec![8, 9];
        assert!(DenoiserNet::from_params(arch, net.params.clone()).is_err());
        assert!(DenoiserNet::from_params(small_arch(), net.params).is_ok());
    }
}
