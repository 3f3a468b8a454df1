//! Neural Process interpolator.
//!
//! Context pairs `(state, improved mean)` are encoded independently, averaged
//! into one representation and mapped to a Gaussian over a global latent `z`.
//! The decoder maps `(z, state)` to a Gaussian over the improved mean.
//! Training minimizes a one-sample reparameterized ELBO:
//!
//! ```text
//! loss = ( sum_targets -log p(y | x, z) + KL(q(z | C u T) || q(z | C)) ) / |T|,
//! z ~ q(z | C u T)
//! ```

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::memory::ContextPoint;
use crate::nn::{self, sigmoid, softplus, Activation, NetParams, SnapshotLines, Trace, Trainable};
use crate::policy::GaussianStats;
use crate::rng::{self, standard_normal};

/// Lower bound added to every softplus-produced standard deviation.
pub const STD_FLOOR: f64 = 1e-3;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NpConfig {
    /// Hidden widths of the encoder and of the decoder.
    pub hidden: Vec<usize>,
    /// Hidden widths of the latent head.
    pub latent_hidden: Vec<usize>,
    pub r_dim: usize,
    pub z_dim: usize,
}

impl Default for NpConfig {
    fn default() -> Self {
        NpConfig {
            hidden: vec![64, 64],
            latent_hidden: vec![64],
            r_dim: 32,
            z_dim: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentPosterior {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentPosterior {
    pub fn as_stats(&self) -> GaussianStats {
        GaussianStats {
            mean: self.mean.clone(),
            std: self.std.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ZMode {
    /// Use the posterior mean (deterministic).
    Mean,
    /// Draw one latent sample.
    Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NpModel {
    pub encoder: NetParams,
    pub latent: NetParams,
    pub decoder: NetParams,
    x_dim: usize,
    y_dim: usize,
    z_dim: usize,
}

#[derive(Clone, Debug)]
pub struct ElboLoss {
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub grad: Vec<f64>,
}

/// Correctly rounded sum (Shewchuk partials with half-way correction), so
/// the result does not depend on summation order.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

fn mean_of(vectors: &[&[f64]], dim: usize) -> Vec<f64> {
    let n = vectors.len() as f64;
    (0..dim)
        .map(|d| exact_sum(vectors.iter().map(|v| v[d])) / n)
        .collect()
}

fn split_head(raw: &[f64], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mean = raw[..dim].to_vec();
    let std = raw[dim..2 * dim]
        .iter()
        .map(|&r| STD_FLOOR + softplus(r))
        .collect();
    (mean, std)
}

impl NpModel {
    pub fn new(x_dim: usize, y_dim: usize, config: &NpConfig, seed: u64) -> Result<Self> {
        if x_dim == 0 || y_dim == 0 || config.r_dim == 0 || config.z_dim == 0 {
            return Err(Error::Config("np dimensions must be positive".into()));
        }
        let mut rng = rng::stream(seed, rng::Stream::Init, 1);
        let encoder = nn::init_params_with(
            &nn::mlp_shapes(
                x_dim + y_dim,
                &config.hidden,
                config.r_dim,
                Activation::Tanh,
                Activation::Identity,
            ),
            &mut rng,
        );
        let latent = nn::init_params_with(
            &nn::mlp_shapes(
                config.r_dim,
                &config.latent_hidden,
                2 * config.z_dim,
                Activation::Tanh,
                Activation::Identity,
            ),
            &mut rng,
        );
        let mut decoder = nn::init_params_with(
            &nn::mlp_shapes(
                config.z_dim + x_dim,
                &config.hidden,
                2 * y_dim,
                Activation::Tanh,
                Activation::Identity,
            ),
            &mut rng,
        );
        // untrained decoders predict zero
        let (w0, _) = decoder.last_layer_offsets();
        decoder.values[w0..].iter_mut().for_each(|v| *v = 0.0);
        Ok(NpModel {
            encoder,
            latent,
            decoder,
            x_dim,
            y_dim,
            z_dim: config.z_dim,
        })
    }

    pub fn x_dim(&self) -> usize {
        self.x_dim
    }

    pub fn y_dim(&self) -> usize {
        self.y_dim
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    fn pair_input(&self, p: &ContextPoint<'_>) -> Result<Vec<f64>> {
        check_len("np context state", self.x_dim, p.state.len())?;
        check_len("np context target", self.y_dim, p.target.len())?;
        let mut input = Vec::with_capacity(self.x_dim + self.y_dim);
        input.extend_from_slice(p.state);
        input.extend_from_slice(p.target);
        Ok(input)
    }

    /// Representation of one context pair.
    pub fn represent(&self, p: &ContextPoint<'_>) -> Result<Vec<f64>> {
        self.encoder.forward(&self.pair_input(p)?)
    }

    fn posterior_from_mean(&self, r_mean: &[f64]) -> Result<LatentPosterior> {
        let raw = self.latent.forward(r_mean)?;
        let (mean, std) = split_head(&raw, self.z_dim);
        Ok(LatentPosterior { mean, std })
    }

    /// Posterior over `z` given a context. Invariant to permutation and
    /// duplication of the context, bit for bit.
    pub fn encode(&self, context: &[ContextPoint<'_>]) -> Result<LatentPosterior> {
        if context.is_empty() {
            return Err(Error::EmptyContext);
        }
        let reps: Vec<Vec<f64>> = context
            .iter()
            .map(|p| self.represent(p))
            .collect::<Result<_>>()?;
        let refs: Vec<&[f64]> = reps.iter().map(|r| r.as_slice()).collect();
        self.posterior_from_mean(&mean_of(&refs, self.encoder.output_dim()))
    }

    /// Predictive Gaussian over the improved mean at `x`.
    pub fn decode(&self, z: &[f64], x: &[f64]) -> Result<GaussianStats> {
        check_len("np latent", self.z_dim, z.len())?;
        check_len("np state", self.x_dim, x.len())?;
        let mut input = Vec::with_capacity(self.z_dim + self.x_dim);
        input.extend_from_slice(z);
        input.extend_from_slice(x);
        let raw = self.decoder.forward(&input)?;
        let (mean, std) = split_head(&raw, self.y_dim);
        Ok(GaussianStats { mean, std })
    }

    /// Latent value used for prediction under `mode`.
    pub fn latent_for(
        &self,
        context: &[ContextPoint<'_>],
        mode: ZMode,
        rng: &mut rng::StreamRng,
    ) -> Result<Vec<f64>> {
        let post = self.encode(context)?;
        Ok(match mode {
            ZMode::Mean => post.mean,
            ZMode::Sample => post
                .mean
                .iter()
                .zip(&post.std)
                .map(|(m, s)| m + s * standard_normal(rng))
                .collect(),
        })
    }

    pub fn predict(
        &self,
        x: &[f64],
        context: &[ContextPoint<'_>],
        mode: ZMode,
        rng: &mut rng::StreamRng,
    ) -> Result<GaussianStats> {
        let z = self.latent_for(context, mode, rng)?;
        self.decode(&z, x)
    }

    /// One-sample ELBO loss (per target point) and its gradient with respect
    /// to `[encoder, latent head, decoder]` parameters. `z_seed` fixes the
    /// reparameterization noise.
    pub fn elbo_loss(
        &self,
        context: &[ContextPoint<'_>],
        targets: &[ContextPoint<'_>],
        z_seed: u64,
    ) -> Result<ElboLoss> {
        if context.is_empty() || targets.is_empty() {
            return Err(Error::EmptyContext);
        }
        let n_ctx = context.len();
        let n_tgt = targets.len();
        let n_all = (n_ctx + n_tgt) as f64;
        let r_dim = self.encoder.output_dim();
        let zd = self.z_dim;
        let yd = self.y_dim;

        let enc_ctx: Vec<Trace> = context
            .iter()
            .map(|p| self.encoder.forward_trace(&self.pair_input(p)?))
            .collect::<Result<_>>()?;
        let enc_tgt: Vec<Trace> = targets
            .iter()
            .map(|p| self.encoder.forward_trace(&self.pair_input(p)?))
            .collect::<Result<_>>()?;
        let ctx_refs: Vec<&[f64]> = enc_ctx.iter().map(Trace::output).collect();
        let all_refs: Vec<&[f64]> = ctx_refs
            .iter()
            .copied()
            .chain(enc_tgt.iter().map(Trace::output))
            .collect();
        let r_ctx = mean_of(&ctx_refs, r_dim);
        let r_all = mean_of(&all_refs, r_dim);

        let lat_ctx = self.latent.forward_trace(&r_ctx)?;
        let lat_all = self.latent.forward_trace(&r_all)?;
        let (mu_c, sd_c) = split_head(lat_ctx.output(), zd);
        let (mu_f, sd_f) = split_head(lat_all.output(), zd);

        let mut noise_rng = rng::seeded(z_seed);
        let xi: Vec<f64> = (0..zd).map(|_| standard_normal(&mut noise_rng)).collect();
        let z: Vec<f64> = (0..zd).map(|j| mu_f[j] + sd_f[j] * xi[j]).collect();

        let inv_t = 1.0 / n_tgt as f64;
        let n_enc = self.encoder.num_params();
        let n_lat = self.latent.num_params();
        let mut grad = vec![0.0; n_enc + n_lat + self.decoder.num_params()];
        let (g_enc, rest) = grad.split_at_mut(n_enc);
        let (g_lat, g_dec) = rest.split_at_mut(n_lat);

        let mut dz = vec![0.0; zd];
        let mut nll = 0.0;
        let mut dec_input = vec![0.0; zd + self.x_dim];
        dec_input[..zd].copy_from_slice(&z);
        for p in targets {
            dec_input[zd..].copy_from_slice(p.state);
            let trace = self.decoder.forward_trace(&dec_input)?;
            let raw = trace.output();
            let mut up = vec![0.0; 2 * yd];
            for d in 0..yd {
                let m = raw[d];
                let s = STD_FLOOR + softplus(raw[yd + d]);
                let e = p.target[d] - m;
                nll += HALF_LN_2PI + s.ln() + e * e / (2.0 * s * s);
                up[d] = -e / (s * s) * inv_t;
                up[yd + d] = (1.0 / s - e * e / (s * s * s)) * sigmoid(raw[yd + d]) * inv_t;
            }
            let din = self.decoder.backward_trace(&trace, &up, g_dec)?;
            for j in 0..zd {
                dz[j] += din[j];
            }
        }

        let mut kl = 0.0;
        let mut d_mu_f = vec![0.0; zd];
        let mut d_sd_f = vec![0.0; zd];
        let mut d_mu_c = vec![0.0; zd];
        let mut d_sd_c = vec![0.0; zd];
        for j in 0..zd {
            let diff = mu_f[j] - mu_c[j];
            let vc = sd_c[j] * sd_c[j];
            kl += (sd_c[j] / sd_f[j]).ln() + (sd_f[j] * sd_f[j] + diff * diff) / (2.0 * vc) - 0.5;
            d_mu_f[j] = diff / vc * inv_t + dz[j];
            d_mu_c[j] = -diff / vc * inv_t;
            d_sd_f[j] = (-1.0 / sd_f[j] + sd_f[j] / vc) * inv_t + dz[j] * xi[j];
            d_sd_c[j] =
                (1.0 / sd_c[j] - (sd_f[j] * sd_f[j] + diff * diff) / (vc * sd_c[j])) * inv_t;
        }

        let head_upstream = |d_mu: &[f64], d_sd: &[f64], raw: &[f64]| -> Vec<f64> {
            let mut up = d_mu.to_vec();
            up.extend((0..zd).map(|j| d_sd[j] * sigmoid(raw[zd + j])));
            up
        };
        let up_all = head_upstream(&d_mu_f, &d_sd_f, lat_all.output());
        let up_ctx = head_upstream(&d_mu_c, &d_sd_c, lat_ctx.output());
        let dr_all = self.latent.backward_trace(&lat_all, &up_all, g_lat)?;
        let dr_ctx = self.latent.backward_trace(&lat_ctx, &up_ctx, g_lat)?;

        let per_ctx: Vec<f64> = (0..r_dim)
            .map(|k| dr_ctx[k] / n_ctx as f64 + dr_all[k] / n_all)
            .collect();
        let per_tgt: Vec<f64> = dr_all.iter().map(|g| g / n_all).collect();
        for trace in &enc_ctx {
            self.encoder.backward_trace(trace, &per_ctx, g_enc)?;
        }
        for trace in &enc_tgt {
            self.encoder.backward_trace(trace, &per_tgt, g_enc)?;
        }

        let loss = (nll + kl) * inv_t;
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged("np loss is not finite".into()));
        }
        Ok(ElboLoss {
            loss,
            nll,
            kl,
            grad,
        })
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "imel-np 1")?;
        writeln!(w, "dims {} {} {}", self.x_dim, self.y_dim, self.z_dim)?;
        writeln!(w, "[encoder]")?;
        self.encoder.write_snapshot(w)?;
        writeln!(w, "[latent]")?;
        self.latent.write_snapshot(w)?;
        writeln!(w, "[decoder]")?;
        self.decoder.write_snapshot(w)
    }

    pub fn read_checkpoint<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = SnapshotLines { inner: r };
        if lines.next_line()? != "imel-np 1" {
            return Err(Error::format("np checkpoint", "bad header"));
        }
        let dims = lines.next_line()?;
        let dims: Vec<usize> = dims
            .strip_prefix("dims ")
            .map(|s| {
                s.split_whitespace()
                    .filter_map(|v| v.parse().ok())
                    .collect()
            })
            .unwrap_or_default();
        if dims.len() != 3 {
            return Err(Error::format("np checkpoint", "bad dims line"));
        }
        let encoder = read_section(lines.inner, "encoder")?;
        let latent = read_section(lines.inner, "latent")?;
        let decoder = read_section(lines.inner, "decoder")?;
        let model = NpModel {
            encoder,
            latent,
            decoder,
            x_dim: dims[0],
            y_dim: dims[1],
            z_dim: dims[2],
        };
        check_len(
            "np encoder input",
            model.x_dim + model.y_dim,
            model.encoder.input_dim(),
        )?;
        check_len("np latent head", 2 * model.z_dim, model.latent.output_dim())?;
        check_len(
            "np decoder input",
            model.z_dim + model.x_dim,
            model.decoder.input_dim(),
        )?;
        check_len(
            "np decoder output",
            2 * model.y_dim,
            model.decoder.output_dim(),
        )?;
        Ok(model)
    }
}

fn read_section<R: BufRead>(r: &mut R, name: &str) -> Result<NetParams> {
    let mut lines = SnapshotLines { inner: r };
    if lines.next_line()? != format!("[{name}]") {
        return Err(Error::format("np checkpoint", format!("missing [{name}]")));
    }
    NetParams::read_snapshot(lines.inner)
}

impl Trainable for NpModel {
    fn num_params(&self) -> usize {
        self.encoder.num_params() + self.latent.num_params() + self.decoder.num_params()
    }

    fn flat_params(&self) -> Vec<f64> {
        nn::concat_params(&[&self.encoder, &self.latent, &self.decoder])
    }

    fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        nn::split_params(
            &mut [&mut self.encoder, &mut self.latent, &mut self.decoder],
            values,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> NpModel {
        let cfg = NpConfig {
            hidden: vec![8],
            latent_hidden: vec![6],
            r_dim: 5,
            z_dim: 3,
        };
        NpModel::new(2, 1, &cfg, 7).unwrap()
    }

    fn points(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut r = rng::seeded(seed);
        let xs = (0..n)
            .map(|_| vec![standard_normal(&mut r), standard_normal(&mut r)])
            .collect();
        let ys = (0..n).map(|_| vec![standard_normal(&mut r)]).collect();
        (xs, ys)
    }

    fn ctx<'a>(xs: &'a [Vec<f64>], ys: &'a [Vec<f64>]) -> Vec<ContextPoint<'a>> {
        xs.iter()
            .zip(ys)
            .map(|(x, y)| ContextPoint {
                state: x,
                target: y,
            })
            .collect()
    }

    #[test]
    fn exact_sum_is_order_free() {
        let v = [1e16, 1.0, -1e16, 3.5, 1e-8, -2.25];
        let mut w = v;
        w.reverse();
        assert_eq!(exact_sum(v), exact_sum(w));
        assert_eq!(exact_sum(v), 1.0 + 3.5 - 2.25 + 1e-8);
        assert_eq!(exact_sum([0.1; 10]), 1.0);
    }

    #[test]
    fn encode_is_permutation_and_duplication_invariant() {
        let m = small();
        let (xs, ys) = points(9, 1);
        let c = ctx(&xs, &ys);
        let base = m.encode(&c).unwrap();
        let mut rev = c.clone();
        rev.reverse();
        assert_eq!(m.encode(&rev).unwrap(), base);
        let dup: Vec<_> = c.iter().chain(c.iter()).copied().collect();
        assert_eq!(m.encode(&dup).unwrap(), base);
    }

    #[test]
    fn single_point_context_uses_its_representation() {
        let m = small();
        let (xs, ys) = points(1, 2);
        let c = ctx(&xs, &ys);
        let r = m.represent(&c[0]).unwrap();
        assert_eq!(m.encode(&c).unwrap(), m.posterior_from_mean(&r).unwrap());
        assert!(matches!(m.encode(&[]), Err(Error::EmptyContext)));
    }

    #[test]
    fn kl_vanishes_when_targets_repeat_context() {
        let m = small();
        let (xs, ys) = points(4, 3);
        let c = ctx(&xs, &ys);
        let l = m.elbo_loss(&c, &c, 0).unwrap();
        assert_eq!(l.kl, 0.0);
    }

    #[test]
    fn decode_is_deterministic_and_positive() {
        let m = small();
        let a = m.decode(&[0.1, -0.3, 2.0], &[0.5, 0.5]).unwrap();
        let b = m.decode(&[0.1, -0.3, 2.0], &[0.5, 0.5]).unwrap();
        assert_eq!(a, b);
        assert!(a.std.iter().all(|s| *s > 0.0));
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = small();
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        let back = NpModel::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, m);
    }
}
