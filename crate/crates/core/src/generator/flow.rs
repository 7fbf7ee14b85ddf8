//! Flow matching between standard Gaussian noise and latent tokens, and the
//! transformer denoiser that regresses its velocity.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{timestep_embedding, Block, Graph, LayerNorm, Linear, Mlp, ParamId, ParamStore, Tensor, Var};

use super::{GeneratorConfig, LatentTokens};

/// Standard Gaussian `rows x cols` draw, a pure function of `seed`.
pub fn noise(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::randn(rows, cols, 1.0, &mut rng)
}

/// `x_t = (1 - t) x_0 + t x_1`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Tensor {
    let mut out = x0.clone();
    for (o, b) in out.data.iter_mut().zip(&x1.data) {
        *o = (1.0 - t) * *o + t * b;
    }
    out
}

fn difference(x1: &Tensor, x0: &Tensor) -> Tensor {
    let mut out = x1.clone();
    for (o, a) in out.data.iter_mut().zip(&x0.data) {
        *o -= a;
    }
    out
}

/// A velocity `u(x, t)` with any conditioning already bound.
pub trait VelocityField {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor>;
}

/// Field that ignores its inputs.
#[derive(Debug, Clone)]
pub struct ConstantField(pub Tensor);

impl VelocityField for ConstantField {
    fn velocity(&self, _x: &Tensor, _t: f64) -> Result<Tensor> {
        Ok(self.0.clone())
    }
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    in_proj: Linear,
    pos: ParamId,
    t_mlp: Mlp,
    blocks: Vec<Block>,
    ln: LayerNorm,
    out: Linear,
    tokens: usize,
    latent_dim: usize,
    width: usize,
}

impl Denoiser {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &GeneratorConfig, rng: &mut impl Rng) -> Self {
        let c = cfg.width;
        Self {
            in_proj: Linear::new(store, &format!("{name}.in"), cfg.latent_dim, c, rng),
            pos: store.add_normal(format!("{name}.pos"), cfg.latent_tokens, c, 0.1, rng),
            t_mlp: Mlp::new(store, &format!("{name}.t"), &[c, c, c], rng),
            blocks: (0..cfg.denoiser_depth)
                .map(|i| Block::new(store, &format!("{name}.block{i}"), c, cfg.heads, Some(c), rng))
                .collect(),
            ln: LayerNorm::new(store, &format!("{name}.ln"), c),
            out: Linear::new(store, &format!("{name}.out"), c, cfg.latent_dim, rng),
            tokens: cfg.latent_tokens,
            latent_dim: cfg.latent_dim,
            width: cfg.width,
        }
    }

    pub fn check_shapes(&self, x: (usize, usize), cond: (usize, usize)) -> Result<()> {
        if x != (self.tokens, self.latent_dim) {
            return Err(Error::ShapeMismatch(format!(
                "state {x:?}, denoiser expects {}x{}",
                self.tokens, self.latent_dim
            )));
        }
        if cond.1 != self.width || cond.0 == 0 {
            return Err(Error::ShapeMismatch(format!(
                "condition {cond:?}, denoiser width {}",
                self.width
            )));
        }
        Ok(())
    }

    /// `u(x_t, t, cond)` with the same shape as `x`.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, t: f64, cond: Var) -> Var {
        let h = self.in_proj.forward(g, store, x);
        let p = g.param(store, self.pos);
        let h = g.add(h, p);
        let te = g.input(timestep_embedding(t, self.width));
        let te = self.t_mlp.forward(g, store, te);
        let mut h = g.add(h, te);
        for b in &self.blocks {
            h = b.forward(g, store, h, Some(cond));
        }
        let h = self.ln.forward(g, store, h);
        self.out.forward(g, store, h)
    }
}

/// A denoiser with its parameters and a fixed condition sequence.
pub struct DenoiserField<'a> {
    pub denoiser: &'a Denoiser,
    pub store: &'a ParamStore,
    pub cond: Tensor,
}

impl VelocityField for DenoiserField<'_> {
    fn velocity(&self, x: &Tensor, t: f64) -> Result<Tensor> {
        self.denoiser.check_shapes(x.shape(), self.cond.shape())?;
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let c = g.input(self.cond.clone());
        let u = self.denoiser.forward(&mut g, self.store, xv, t, c);
        Ok(g.value(u).clone())
    }
}

/// `|u(x_t, t, cond) - (x_1 - x_0)|^2`, summed over channels and averaged
/// over tokens, with `x_0` drawn from `noise_seed`.
pub fn fm_loss(
    g: &mut Graph,
    store: &ParamStore,
    denoiser: &Denoiser,
    x1: &Tensor,
    cond: Var,
    t: f64,
    noise_seed: u64,
) -> Result<Var> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("flow time {t} outside [0, 1]")));
    }
    denoiser.check_shapes(x1.shape(), g.shape(cond))?;
    let x0 = noise(x1.rows, x1.cols, noise_seed);
    let xt = g.input(interpolate(&x0, x1, t));
    let u = denoiser.forward(g, store, xt, t, cond);
    let target = g.input(difference(x1, &x0));
    let d = g.sub(u, target);
    let d = g.square(d);
    let s = g.sum(d);
    Ok(g.scale(s, 1.0 / x1.rows as f64))
}

/// [`fm_loss`] for any field, without gradients.
pub fn fm_loss_value(field: &dyn VelocityField, x1: &Tensor, t: f64, noise_seed: u64) -> Result<f64> {
    let x0 = noise(x1.rows, x1.cols, noise_seed);
    let u = field.velocity(&interpolate(&x0, x1, t), t)?;
    let target = difference(x1, &x0);
    if u.shape() != target.shape() {
        return Err(Error::ShapeMismatch(format!(
            "velocity {:?}, state {:?}",
            u.shape(),
            target.shape()
        )));
    }
    let s: f64 = u.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / x1.rows as f64)
}

/// Explicit Euler from `x(0) ~ N(0, I)` to `x(1)` in `steps` uniform steps.
pub fn sample_with(field: &dyn VelocityField, rows: usize, cols: usize, steps: usize, seed: u64) -> Result<Tensor> {
    if steps == 0 {
        return Err(Error::InvalidArgument("sampling needs at least one step".into()));
    }
    let mut x = noise(rows, cols, seed);
    let h = 1.0 / steps as f64;
    for i in 0..steps {
        let u = field.velocity(&x, i as f64 * h)?;
        for (a, b) in x.data.iter_mut().zip(&u.data) {
            *a += h * b;
        }
    }
    Ok(x)
}

pub fn sample(denoiser: &Denoiser, store: &ParamStore, cond: &Tensor, steps: usize, seed: u64) -> Result<LatentTokens> {
    let field = DenoiserField {
        denoiser,
        store,
        cond: cond.clone(),
    };
    LatentTokens::new(sample_with(&field, denoiser.tokens, denoiser.latent_dim, steps, seed)?)
}

/// Energy distance `2 E|X-Y| - E|X-X'| - E|Y-Y'|` between two samples
/// (V-statistic, Euclidean norm).
pub fn energy_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    fn mean_dist(x: &[Vec<f64>], y: &[Vec<f64>]) -> f64 {
        let mut s = 0.0;
        for p in x {
            for q in y {
                s += p.iter().zip(q).map(|(u, v)| (u - v) * (u - v)).sum::<f64>().sqrt();
            }
        }
        s / (x.len() * y.len()) as f64
    }
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    2.0 * mean_dist(a, b) - mean_dist(a, a) - mean_dist(b, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generator::autoencoder::tests::tiny;
    use crate::nn::gradcheck;

    struct Linear1(f64);

    impl VelocityField for Linear1 {
        fn velocity(&self, x: &Tensor, _t: f64) -> Result<Tensor> {
            Ok(x.map(|v| self.0 * v))
        }
    }

    #[test]
    fn endpoints_and_oracle_loss() {
        let x0 = noise(4, 3, 9);
        let x1 = noise(4, 3, 10);
        assert_eq!(interpolate(&x0, &x1, 0.0), x0);
        assert_eq!(interpolate(&x0, &x1, 1.0), x1);
        let oracle = ConstantField(difference(&x1, &x0));
        for t in [0.0, 0.25, 0.5, 1.0] {
            assert_eq!(fm_loss_value(&oracle, &x1, t, 9).unwrap(), 0.0);
        }
        assert!(fm_loss_value(&oracle, &x1, 0.5, 11).unwrap() > 0.0);
    }

    #[test]
    fn euler_is_exact_for_constants_and_first_order_for_linear() {
        let v = noise(3, 2, 1);
        let x0 = noise(3, 2, 5);
        for steps in [1, 7, 50] {
            let x = sample_with(&ConstantField(v.clone()), 3, 2, steps, 5).unwrap();
            for ((a, b), c) in x.data.iter().zip(&x0.data).zip(&v.data) {
                assert!((a - (b + c)).abs() < 1e-12);
            }
        }
        assert!(sample_with(&ConstantField(v), 3, 2, 0, 5).is_err());

        let lambda = 0.8;
        let exact: Vec<f64> = x0.data.iter().map(|v| v * f64::exp(lambda)).collect();
        let err = |steps: usize| {
            let x = sample_with(&Linear1(lambda), 3, 2, steps, 5).unwrap();
            x.data
                .iter()
                .zip(&exact)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let hs = [8usize, 16, 32, 64, 128];
        let pts: Vec<(f64, f64)> = hs.iter().map(|&n| ((1.0 / n as f64).ln(), err(n).ln())).collect();
        let n = pts.len() as f64;
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope - 1.0).abs() < 0.2, "slope {slope}");
    }

    #[test]
    fn denoiser_preserves_shape_and_depends_on_time() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let den = Denoiser::new(&mut store, "d", &cfg, &mut rng);
        let cond = Tensor::randn(5, cfg.width, 1.0, &mut rng);
        let field = DenoiserField {
            denoiser: &den,
            store: &store,
            cond: cond.clone(),
        };
        let x = noise(cfg.latent_tokens, cfg.latent_dim, 3);
        let a = field.velocity(&x, 0.3).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a, field.velocity(&x, 0.3).unwrap());
        let b = field.velocity(&x, 0.301).unwrap();
        assert!(a.data.iter().zip(&b.data).any(|(p, q)| (p - q).abs() > 1e-9));
        assert!(field.velocity(&Tensor::zeros(2, 2), 0.3).is_err());
        let s1 = sample(&den, &store, &cond, 4, 8).unwrap();
        assert_eq!(s1, sample(&den, &store, &cond, 4, 8).unwrap());
    }

    #[test]
    fn fm_loss_gradients() {
        let cfg = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let den = Denoiser::new(&mut store, "d", &cfg, &mut rng);
        assert!(store.count() <= 1000, "{}", store.count());
        let cond = Tensor::randn(3, cfg.width, 1.0, &mut rng);
        let x1 = noise(cfg.latent_tokens, cfg.latent_dim, 4);
        let r = gradcheck(&mut store, |g, st| {
            let c = g.input(cond.clone());
            fm_loss(g, st, &den, &x1, c, 0.37, 2).unwrap()
        });
        assert!(r.relative_error < 1e-3, "{r:?}");
    }

    #[test]
    fn energy_distance_separates_shifted_samples() {
        let a: Vec<Vec<f64>> = (0..40).map(|i| vec![(i as f64 * 0.7).sin()]).collect();
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 3.0]).collect();
        assert!(energy_distance(&a, &a).abs() < 1e-12);
        assert!(energy_distance(&a, &b) > 1.0);
    }
}
