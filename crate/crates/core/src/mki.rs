//! Mean Kernel Interpolation.
//!
//! States are projected by a learned feature net `z = f(x)`; context targets
//! are interpolated with the exponential kernel `k = exp(dz^T W dz)` where
//! `W = -L L^T`, so `log k = -|L^T dz|^2 <= 0` decays with feature distance.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::memory::ContextPoint;
use crate::nn::{self, Activation, NetParams, SnapshotLines, Trace, Trainable};

/// Kernel mass below which normalized prediction falls back to the nearest point.
pub const MIN_KERNEL_MASS: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MkiConfig {
    pub hidden: Vec<usize>,
    /// Feature dimension; 0 picks [`default_feature_dim`].
    pub feature_dim: usize,
    /// Divide by the kernel mass (convex combination of context targets).
    pub normalize: bool,
    /// Initial `L = kernel_scale * I`.
    pub kernel_scale: f64,
}

impl Default for MkiConfig {
    fn default() -> Self {
        MkiConfig {
            hidden: vec![64, 64],
            feature_dim: 0,
            normalize: true,
            kernel_scale: 1.0,
        }
    }
}

/// `min(d_x - 1, 8)` for inputs wider than 2, otherwise `d_x`.
pub fn default_feature_dim(x_dim: usize) -> usize {
    if x_dim <= 2 {
        x_dim
    } else {
        (x_dim - 1).min(8)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MkiModel {
    pub features: NetParams,
    /// Row-major `z_dim x z_dim` factor `L`.
    pub kernel_factor: Vec<f64>,
    pub normalize: bool,
    z_dim: usize,
}

/// Context features computed once for repeated predictions.
#[derive(Clone, Debug)]
pub struct PreparedMki<'m, 'c> {
    model: &'m MkiModel,
    features: Vec<Vec<f64>>,
    targets: Vec<&'c [f64]>,
}

impl MkiModel {
    pub fn new(x_dim: usize, config: &MkiConfig, seed: u64) -> Result<Self> {
        let z_dim = if config.feature_dim == 0 {
            default_feature_dim(x_dim)
        } else {
            config.feature_dim
        };
        if z_dim == 0 || x_dim == 0 {
            return Err(Error::Config("mki dimensions must be positive".into()));
        }
        if x_dim > 2 && z_dim >= x_dim {
            return Err(Error::Config(format!(
                "mki.feature_dim must be below the state dimension {x_dim}, got {z_dim}"
            )));
        }
        let shapes = nn::mlp_shapes(
            x_dim,
            &config.hidden,
            z_dim,
            Activation::Tanh,
            Activation::Identity,
        );
        let mut rng = crate::rng::stream(seed, crate::rng::Stream::Init, 2);
        let features = nn::init_params_with(&shapes, &mut rng);
        let mut kernel_factor = vec![0.0; z_dim * z_dim];
        for i in 0..z_dim {
            kernel_factor[i * z_dim + i] = config.kernel_scale;
        }
        Ok(MkiModel {
            features,
            kernel_factor,
            normalize: config.normalize,
            z_dim,
        })
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn x_dim(&self) -> usize {
        self.features.input_dim()
    }

    pub fn features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.features.forward(x)
    }

    /// `L^T dz`.
    fn project(&self, dz: &[f64]) -> Vec<f64> {
        let n = self.z_dim;
        let mut u = vec![0.0; n];
        for (a, d) in dz.iter().enumerate() {
            let row = &self.kernel_factor[a * n..(a + 1) * n];
            for (ub, l) in u.iter_mut().zip(row) {
                *ub += l * d;
            }
        }
        u
    }

    /// `dz^T W dz = -|L^T dz|^2`.
    pub fn log_kernel(&self, z_n: &[f64], z_i: &[f64]) -> f64 {
        let dz: Vec<f64> = z_n.iter().zip(z_i).map(|(a, b)| a - b).collect();
        -self.project(&dz).iter().map(|u| u * u).sum::<f64>()
    }

    pub fn kernel_weight(&self, z_n: &[f64], z_i: &[f64]) -> f64 {
        self.log_kernel(z_n, z_i).exp()
    }

    pub fn prepare<'m, 'c>(&'m self, context: &[ContextPoint<'c>]) -> Result<PreparedMki<'m, 'c>> {
        if context.is_empty() {
            return Err(Error::EmptyContext);
        }
        let y_dim = context[0].target.len();
        let mut features = Vec::with_capacity(context.len());
        let mut targets = Vec::with_capacity(context.len());
        for p in context {
            check_len("mki context target", y_dim, p.target.len())?;
            features.push(self.features(p.state)?);
            targets.push(p.target);
        }
        Ok(PreparedMki {
            model: self,
            features,
            targets,
        })
    }

    pub fn predict(&self, x: &[f64], context: &[ContextPoint<'_>]) -> Result<Vec<f64>> {
        self.prepare(context)?.predict(x)
    }

    /// Mean squared error of predictions at the targets' states against
    /// their stored improved means, with gradient over `[features, L]`.
    pub fn loss(
        &self,
        context: &[ContextPoint<'_>],
        targets: &[ContextPoint<'_>],
    ) -> Result<(f64, Vec<f64>)> {
        if context.is_empty() || targets.is_empty() {
            return Err(Error::EmptyContext);
        }
        let zd = self.z_dim;
        let yd = context[0].target.len();
        let n_feat = self.features.num_params();
        let mut grad = vec![0.0; n_feat + zd * zd];

        let ctx_traces: Vec<Trace> = context
            .iter()
            .map(|p| self.features.forward_trace(p.state))
            .collect::<Result<_>>()?;
        let mut ctx_dz = vec![vec![0.0; zd]; context.len()];
        let scale = 1.0 / (targets.len() * yd) as f64;
        let mut loss = 0.0;

        let mut log_k = vec![0.0; context.len()];
        let mut projections = vec![vec![0.0; zd]; context.len()];
        let mut deltas = vec![vec![0.0; zd]; context.len()];
        for target in targets {
            check_len("mki target", yd, target.target.len())?;
            let t_trace = self.features.forward_trace(target.state)?;
            let z_n = t_trace.output();
            for (i, c) in ctx_traces.iter().enumerate() {
                for (d, (a, b)) in deltas[i].iter_mut().zip(z_n.iter().zip(c.output())) {
                    *d = a - b;
                }
                projections[i] = self.project(&deltas[i]);
                log_k[i] = -projections[i].iter().map(|u| u * u).sum::<f64>();
            }
            let combo = combine(&log_k, context, yd, self.normalize);
            let mut g_y = vec![0.0; yd];
            for d in 0..yd {
                let e = combo.prediction[d] - target.target[d];
                loss += e * e * scale;
                g_y[d] = 2.0 * e * scale;
            }
            let mut dz_n = vec![0.0; zd];
            for (i, p) in context.iter().enumerate() {
                let w = combo.weights[i];
                if w == 0.0 {
                    continue;
                }
                // dL/dlog k_i
                let ds = if self.normalize {
                    w * (0..yd)
                        .map(|d| g_y[d] * (p.target[d] - combo.prediction[d]))
                        .sum::<f64>()
                } else {
                    w * (0..yd).map(|d| g_y[d] * p.target[d]).sum::<f64>()
                };
                if ds == 0.0 {
                    continue;
                }
                let u = &projections[i];
                let delta = &deltas[i];
                for a in 0..zd {
                    let row = &self.kernel_factor[a * zd..(a + 1) * zd];
                    let d_delta = -2.0 * ds * row.iter().zip(u).map(|(l, ub)| l * ub).sum::<f64>();
                    dz_n[a] += d_delta;
                    ctx_dz[i][a] -= d_delta;
                    let g_l = &mut grad[n_feat + a * zd..n_feat + (a + 1) * zd];
                    for (g, ub) in g_l.iter_mut().zip(u) {
                        *g += -2.0 * ds * delta[a] * ub;
                    }
                }
            }
            self.features
                .backward_trace(&t_trace, &dz_n, &mut grad[..n_feat])?;
        }
        for (trace, dz) in ctx_traces.iter().zip(&ctx_dz) {
            self.features
                .backward_trace(trace, dz, &mut grad[..n_feat])?;
        }
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged("mki loss is not finite".into()));
        }
        Ok((loss, grad))
    }

    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "imel-mki 1")?;
        writeln!(w, "normalize {}", u8::from(self.normalize))?;
        writeln!(w, "[features]")?;
        self.features.write_snapshot(w)?;
        writeln!(w, "[kernel] {}", self.z_dim)?;
        for v in &self.kernel_factor {
            writeln!(w, "{v:?}")?;
        }
        writeln!(w, "end")
    }

    pub fn read_checkpoint<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut lines = SnapshotLines { inner: r };
        if lines.next_line()? != "imel-mki 1" {
            return Err(Error::format("mki checkpoint", "bad header"));
        }
        let normalize: u8 = lines.keyed("normalize")?;
        if lines.next_line()? != "[features]" {
            return Err(Error::format("mki checkpoint", "missing [features]"));
        }
        let features = NetParams::read_snapshot(lines.inner)?;
        let z_dim: usize = lines.keyed("[kernel]")?;
        check_len("mki feature dim", z_dim, features.output_dim())?;
        let kernel_factor = (0..z_dim * z_dim)
            .map(|_| {
                lines
                    .next_line()?
                    .parse::<f64>()
                    .map_err(|e| Error::format("mki checkpoint", e.to_string()))
            })
            .collect::<Result<Vec<f64>>>()?;
        if lines.next_line()? != "end" {
            return Err(Error::format("mki checkpoint", "missing `end`"));
        }
        Ok(MkiModel {
            features,
            kernel_factor,
            normalize: normalize == 1,
            z_dim,
        })
    }
}

struct Combination {
    prediction: Vec<f64>,
    /// Normalized weights, raw kernel values, or a one-hot fallback with
    /// zeroed gradient weights.
    weights: Vec<f64>,
}

fn combine(log_k: &[f64], context: &[ContextPoint<'_>], yd: usize, normalize: bool) -> Combination {
    let mut prediction = vec![0.0; yd];
    if normalize {
        let (best, max) = log_k
            .iter()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
            );
        let shifted: Vec<f64> = log_k.iter().map(|v| (v - max).exp()).collect();
        let mass: f64 = shifted.iter().sum();
        if max + mass.ln() < MIN_KERNEL_MASS.ln() {
            log::warn!("kernel mass below {MIN_KERNEL_MASS:e}; using the nearest context point");
            prediction.copy_from_slice(context[best].target);
            return Combination {
                prediction,
                weights: vec![0.0; log_k.len()],
            };
        }
        let weights: Vec<f64> = shifted.iter().map(|w| w / mass).collect();
        for (w, p) in weights.iter().zip(context) {
            for (acc, y) in prediction.iter_mut().zip(p.target) {
                *acc += w * y;
            }
        }
        Combination {
            prediction,
            weights,
        }
    } else {
        let weights: Vec<f64> = log_k.iter().map(|v| v.exp()).collect();
        for (w, p) in weights.iter().zip(context) {
            for (acc, y) in prediction.iter_mut().zip(p.target) {
                *acc += w * y;
            }
        }
        Combination {
            prediction,
            weights,
        }
    }
}

impl PreparedMki<'_, '_> {
    pub fn predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        let z_n = self.model.features(x)?;
        let log_k: Vec<f64> = self
            .features
            .iter()
            .map(|z_i| self.model.log_kernel(&z_n, z_i))
            .collect();
        let yd = self.targets[0].len();
        let mut prediction = vec![0.0; yd];
        let weights = if self.model.normalize {
            let (best, max) =
                log_k
                    .iter()
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc },
                    );
            let shifted: Vec<f64> = log_k.iter().map(|v| (v - max).exp()).collect();
            let mass: f64 = shifted.iter().sum();
            if max + mass.ln() < MIN_KERNEL_MASS.ln() {
                log::warn!(
                    "kernel mass below {MIN_KERNEL_MASS:e}; using the nearest context point"
                );
                return Ok(self.targets[best].to_vec());
            }
            shifted.into_iter().map(|w| w / mass).collect::<Vec<_>>()
        } else {
            log_k.iter().map(|v| v.exp()).collect()
        };
        for (w, y) in weights.iter().zip(&self.targets) {
            for (acc, v) in prediction.iter_mut().zip(y.iter()) {
                *acc += w * v;
            }
        }
        Ok(prediction)
    }
}

impl Trainable for MkiModel {
    fn num_params(&self) -> usize {
        self.features.num_params() + self.kernel_factor.len()
    }

    fn flat_params(&self) -> Vec<f64> {
        let mut v = self.features.values.clone();
        v.extend_from_slice(&self.kernel_factor);
        v
    }

    fn set_flat_params(&mut self, values: &[f64]) -> Result<()> {
        check_len("mki parameters", self.num_params(), values.len())?;
        let n = self.features.num_params();
        self.features.values.copy_from_slice(&values[..n]);
        self.kernel_factor.copy_from_slice(&values[n..]);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model(normalize: bool) -> MkiModel {
        let cfg = MkiConfig {
            hidden: vec![6],
            feature_dim: 2,
            normalize,
            kernel_scale: 1.0,
        };
        MkiModel::new(2, &cfg, 3).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let m = model(true);
        assert_eq!(m.kernel_weight(&[0.3, 0.1], &[0.3, 0.1]), 1.0);
        assert!((m.kernel_weight(&[1.0, 0.0], &[0.0, 0.0]) - (-1f64).exp()).abs() < 1e-15);
        let mut prev = 1.0;
        for i in 1..20 {
            let w = m.kernel_weight(&[0.2 * i as f64, -0.1 * i as f64], &[0.0, 0.0]);
            assert!(w < prev);
            prev = w;
        }
    }

    #[test]
    fn single_point_normalized_prediction_is_its_target() {
        let m = model(true);
        let y = [0.75];
        let c = [ContextPoint {
            state: &[3.0, -1.0],
            target: &y,
        }];
        assert_eq!(m.predict(&[-2.0, 0.4], &c).unwrap(), vec![0.75]);
    }

    #[test]
    fn feature_dim_constraint() {
        let cfg = MkiConfig {
            feature_dim: 4,
            ..Default::default()
        };
        assert!(MkiModel::new(4, &cfg, 0).is_err());
        assert_eq!(default_feature_dim(4), 3);
        assert_eq!(default_feature_dim(17), 8);
        assert_eq!(default_feature_dim(2), 2);
        assert_eq!(default_feature_dim(1), 1);
    }

    #[test]
    fn far_query_falls_back_to_nearest() {
        let mut m = model(true);
        for v in &mut m.kernel_factor {
            *v *= 1e6;
        }
        let (ya, yb) = ([1.0], [-1.0]);
        let c = [
            ContextPoint {
                state: &[0.0, 0.0],
                target: &ya,
            },
            ContextPoint {
                state: &[1.0, 1.0],
                target: &yb,
            },
        ];
        let z0 = m.features(&[0.0, 0.0]).unwrap();
        let z1 = m.features(&[1.0, 1.0]).unwrap();
        let q = [5.0, 5.0];
        let zq = m.features(&q).unwrap();
        let expected = if m.log_kernel(&zq, &z0) > m.log_kernel(&zq, &z1) {
            1.0
        } else {
            -1.0
        };
        assert_eq!(m.predict(&q, &c).unwrap(), vec![expected]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let m = model(false);
        let mut buf = Vec::new();
        m.write_checkpoint(&mut buf).unwrap();
        assert_eq!(MkiModel::read_checkpoint(&mut buf.as_slice()).unwrap(), m);
    }
}
