use std::ops::Range;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::net::{Net, NetworkSpec, ParamBlock, Trace};
use super::rich::RichTransition;
use crate::error::{Error, Result};
use crate::seed;

/// Nuisance encoders start this much smaller than the other networks, so
/// the shared encoder, which sees every environment, picks up the common
/// signal before the per-environment channels can.
pub const NUISANCE_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub x_dim: usize,
    pub z_dim: usize,
    pub h_dim: usize,
    pub n_actions: usize,
    /// Number of training environments (classifier classes, nuisance heads).
    pub n_envs: usize,
}

/// Function class of every network except the classifier, which is always
/// a single affine layer followed by a softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionClass {
    Affine,
    Tanh { hidden: usize },
}

impl FunctionClass {
    fn spec(self, input: usize, output: usize) -> NetworkSpec {
        match self {
            FunctionClass::Affine => NetworkSpec::affine(input, output),
            FunctionClass::Tanh { hidden } => NetworkSpec::tanh_mlp(input, hidden, output),
        }
    }

    /// Default SGD step for the class.
    pub fn default_lr(self) -> f64 {
        match self {
            FunctionClass::Affine => 1e-2,
            FunctionClass::Tanh { .. } => 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NetId {
    Phi,
    Psi(usize),
    Dynamics,
    NuisanceDynamics(usize),
    Decoder,
    Reward,
    Classifier,
}

/// Parameter groups updated by the separate phases of a training step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    /// `psi^e` and `f_eta^e`.
    Nuisance(usize),
    /// `phi`, `f_s`, reward head and decoder.
    Shared,
    Classifier,
}

/// All parameters of the gradient-based abstraction learner in one flat
/// vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MisaModel {
    pub dims: ModelDims,
    pub class: FunctionClass,
    pub params: Vec<f64>,
    phi: Net,
    psi: Vec<Net>,
    f_s: Net,
    f_eta: Vec<Net>,
    decoder: Net,
    reward: Net,
    classifier: Net,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Alphas {
    pub reward: f64,
    pub classifier: f64,
}

impl Default for Alphas {
    fn default() -> Self {
        Self {
            reward: 1.0,
            classifier: 0.1,
        }
    }
}

/// Coefficients of the differentiated objective
/// `d j_d + r j_r + h entropy + ce cross_entropy`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub d: f64,
    pub r: f64,
    pub h: f64,
    pub ce: f64,
}

impl LossWeights {
    pub fn j_all(alphas: Alphas) -> Self {
        Self {
            d: 1.0,
            r: alphas.reward,
            h: -alphas.classifier,
            ce: 0.0,
        }
    }

    pub fn j_d() -> Self {
        Self {
            d: 1.0,
            r: 0.0,
            h: 0.0,
            ce: 0.0,
        }
    }

    pub fn cross_entropy() -> Self {
        Self {
            d: 0.0,
            r: 0.0,
            h: 0.0,
            ce: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub j_d: f64,
    pub j_r: f64,
    pub entropy: f64,
    pub cross_entropy: f64,
    pub j_all: f64,
    pub per_env_j_d: Vec<f64>,
}

impl LossBreakdown {
    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in [
            ("j_d", self.j_d),
            ("j_r", self.j_r),
            ("entropy", self.entropy),
            ("cross_entropy", self.cross_entropy),
        ] {
            if !v.is_finite() {
                return Err(Error::NonFinite(format!("loss term {name} = {v}")));
            }
        }
        Ok(())
    }
}

/// Minibatch of one training environment; `env` indexes the model's
/// nuisance heads and classifier classes.
#[derive(Debug, Clone)]
pub struct EnvBatch<'a> {
    pub env: usize,
    pub transitions: Vec<&'a RichTransition>,
}

fn onehot(a: usize, n: usize) -> impl Iterator<Item = f64> {
    (0..n).map(move |i| if i == a { 1.0 } else { 0.0 })
}

fn cat(parts: &[&[f64]]) -> Vec<f64> {
    parts.iter().flat_map(|p| p.iter().copied()).collect()
}

/// Numerically stable softmax and log-softmax.
fn softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|l| (l - m).exp()).sum::<f64>().ln();
    let logp: Vec<f64> = logits.iter().map(|l| l - lse).collect();
    (logp.iter().map(|v| v.exp()).collect(), logp)
}

impl MisaModel {
    /// Zero-initialized model.
    pub fn zeros(dims: ModelDims, class: FunctionClass) -> Self {
        let mut at = 0;
        let mut next = |spec: NetworkSpec| {
            let net = Net::new(spec, at);
            at = net.end();
            net
        };
        let na = dims.n_actions;
        let phi = next(class.spec(dims.x_dim, dims.z_dim));
        let psi: Vec<Net> = (0..dims.n_envs).map(|_| next(class.spec(dims.x_dim, dims.h_dim))).collect();
        let f_s = next(class.spec(dims.z_dim + na, dims.z_dim));
        let f_eta: Vec<Net> = (0..dims.n_envs).map(|_| next(class.spec(dims.h_dim + na, dims.h_dim))).collect();
        let decoder = next(class.spec(dims.z_dim + dims.h_dim, dims.x_dim));
        let reward = next(class.spec(2 * dims.z_dim + na, 1));
        let classifier = next(NetworkSpec::affine(dims.z_dim, dims.n_envs));
        Self {
            dims,
            class,
            params: vec![0.0; at],
            phi,
            psi,
            f_s,
            f_eta,
            decoder,
            reward,
            classifier,
        }
    }

    /// Randomly initialized model; see [`Net::init`].
    pub fn new(dims: ModelDims, class: FunctionClass, seed: u64) -> Self {
        let mut model = Self::zeros(dims, class);
        let mut rng = seed::rng(seed);
        let nets: Vec<Net> = model.nets().into_iter().map(|(_, n)| n.clone()).collect();
        for net in nets {
            net.init(&mut model.params, &mut rng);
        }
        for e in 0..dims.n_envs {
            let range = model.range(NetId::Psi(e));
            for p in &mut model.params[range] {
                *p *= NUISANCE_INIT_SCALE;
            }
        }
        // the decoder starts blind to the nuisance input
        let dec = model.decoder.clone();
        let (fan_in, out) = (dec.spec.sizes[0], dec.spec.sizes[1]);
        for o in 0..out {
            let row = dec.offset + o * fan_in;
            model.params[row + dims.z_dim..row + fan_in].fill(0.0);
        }
        model
    }

    fn nets(&self) -> Vec<(String, &Net)> {
        let mut out = vec![("phi".to_string(), &self.phi)];
        out.extend(self.psi.iter().enumerate().map(|(e, n)| (format!("psi[{e}]"), n)));
        out.push(("f_s".into(), &self.f_s));
        out.extend(self.f_eta.iter().enumerate().map(|(e, n)| (format!("f_eta[{e}]"), n)));
        out.push(("decoder".into(), &self.decoder));
        out.push(("reward".into(), &self.reward));
        out.push(("classifier".into(), &self.classifier));
        out
    }

    /// Named parameter blocks in storage order.
    pub fn layout(&self) -> Vec<ParamBlock> {
        self.nets().into_iter().map(|(name, n)| n.block(&name)).collect()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    fn net(&self, id: NetId) -> &Net {
        match id {
            NetId::Phi => &self.phi,
            NetId::Psi(e) => &self.psi[e],
            NetId::Dynamics => &self.f_s,
            NetId::NuisanceDynamics(e) => &self.f_eta[e],
            NetId::Decoder => &self.decoder,
            NetId::Reward => &self.reward,
            NetId::Classifier => &self.classifier,
        }
    }

    pub fn range(&self, id: NetId) -> Range<usize> {
        let n = self.net(id);
        n.offset..n.end()
    }

    pub fn group(&self, group: ParamGroup) -> Vec<Range<usize>> {
        match group {
            ParamGroup::Nuisance(e) => vec![self.range(NetId::Psi(e)), self.range(NetId::NuisanceDynamics(e))],
            ParamGroup::Shared => vec![
                self.range(NetId::Phi),
                self.range(NetId::Dynamics),
                self.range(NetId::Decoder),
                self.range(NetId::Reward),
            ],
            ParamGroup::Classifier => vec![self.range(NetId::Classifier)],
        }
    }

    /// Overwrites an affine network with `weights` (out x in) and `bias`.
    pub fn set_affine(&mut self, id: NetId, weights: &DMatrix<f64>, bias: &[f64]) -> Result<()> {
        let net = self.net(id).clone();
        if net.spec.sizes.len() != 2
            || weights.nrows() != net.spec.output()
            || weights.ncols() != net.spec.input()
            || bias.len() != net.spec.output()
        {
            return Err(Error::InvalidInput("shape does not match an affine network".into()));
        }
        let (out, fan_in) = weights.shape();
        for o in 0..out {
            for i in 0..fan_in {
                self.params[net.offset + o * fan_in + i] = weights[(o, i)];
            }
        }
        self.params[net.offset + out * fan_in..net.end()].copy_from_slice(bias);
        Ok(())
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        self.phi.forward(&self.params, x).output().to_vec()
    }

    pub fn classify(&self, z: &[f64]) -> Vec<f64> {
        softmax(self.classifier.forward(&self.params, z).output()).0
    }

    /// Predicted next observation. Without a nuisance head the decoder is
    /// fed `h' = 0`.
    pub fn predict_next(&self, env: Option<usize>, x: &[f64], a: usize) -> Vec<f64> {
        let na = self.dims.n_actions;
        let z = self.encode(x);
        let za = cat(&[&z, &onehot(a, na).collect::<Vec<_>>()]);
        let zp = self.f_s.forward(&self.params, &za).output().to_vec();
        let hp = match env {
            Some(e) if e < self.dims.n_envs => {
                let h = self.psi[e].forward(&self.params, x).output().to_vec();
                let ha = cat(&[&h, &onehot(a, na).collect::<Vec<_>>()]);
                self.f_eta[e].forward(&self.params, &ha).output().to_vec()
            }
            _ => vec![0.0; self.dims.h_dim],
        };
        self.decoder.forward(&self.params, &cat(&[&zp, &hp])).output().to_vec()
    }

    /// Loss breakdown and, when `weights` is given, the gradient of the
    /// weighted objective with respect to every parameter.
    pub fn evaluate(
        &self,
        batches: &[EnvBatch<'_>],
        alphas: Alphas,
        weights: Option<LossWeights>,
    ) -> Result<(LossBreakdown, Option<Vec<f64>>)> {
        if batches.is_empty() {
            return Err(Error::InvalidInput("no environment batches".into()));
        }
        for b in batches {
            if b.env >= self.dims.n_envs {
                return Err(Error::UnknownEnv(b.env));
            }
            if b.transitions.is_empty() {
                return Err(Error::InvalidInput(format!("batch for environment {} is empty", b.env)));
            }
        }
        let mut grad = weights.map(|_| vec![0.0; self.params.len()]);
        let w = weights.unwrap_or(LossWeights::j_d());
        let n_env = batches.len() as f64;
        let (mut j_d, mut j_r, mut ent, mut ce) = (0.0, 0.0, 0.0, 0.0);
        let mut per_env = Vec::with_capacity(batches.len());
        let na = self.dims.n_actions;
        let p = &self.params;
        for b in batches {
            let n = b.transitions.len() as f64;
            let c = 1.0 / (n_env * n);
            let mut env_d = 0.0;
            for t in &b.transitions {
                let oh: Vec<f64> = onehot(t.a, na).collect();
                let tz = self.phi.forward(p, &t.x);
                let tz2 = self.phi.forward(p, &t.x_next);
                let z = tz.output();
                let z2 = tz2.output();
                let th = self.psi[b.env].forward(p, &t.x);
                let tfs = self.f_s.forward(p, &cat(&[z, &oh]));
                let tfe = self.f_eta[b.env].forward(p, &cat(&[th.output(), &oh]));
                let tdec = self.decoder.forward(p, &cat(&[tfs.output(), tfe.output()]));
                let trew = self.reward.forward(p, &cat(&[z, &oh, z2]));
                let tcls = self.classifier.forward(p, z);

                let resid: Vec<f64> = tdec.output().iter().zip(&t.x_next).map(|(a, b)| a - b).collect();
                let ld: f64 = resid.iter().map(|r| r * r).sum();
                let rr = trew.output()[0] - t.r;
                let (probs, logp) = softmax(tcls.output());
                let h: f64 = -probs.iter().zip(&logp).map(|(q, l)| if *q > 0.0 { q * l } else { 0.0 }).sum::<f64>();
                let lce = -logp[b.env];
                env_d += ld / n;
                j_d += c * ld;
                j_r += c * rr * rr;
                ent += c * h;
                ce += c * lce;

                if let Some(g) = grad.as_mut() {
                    self.backprop_sample(
                        b.env,
                        w,
                        c,
                        Traces {
                            z: &tz,
                            z2: &tz2,
                            h: &th,
                            fs: &tfs,
                            fe: &tfe,
                            dec: &tdec,
                            rew: &trew,
                            cls: &tcls,
                        },
                        Residuals {
                            next: &resid,
                            reward: rr,
                            probs: &probs,
                            logp: &logp,
                            entropy: h,
                        },
                        g,
                    );
                }
            }
            per_env.push(env_d);
        }
        let breakdown = LossBreakdown {
            j_d,
            j_r,
            entropy: ent,
            cross_entropy: ce,
            j_all: j_d + alphas.reward * j_r - alphas.classifier * ent,
            per_env_j_d: per_env,
        };
        Ok((breakdown, grad))
    }

    fn backprop_sample(&self, env: usize, w: LossWeights, c: f64, tr: Traces<'_>, res: Residuals<'_>, g: &mut [f64]) {
        let p = &self.params;
        let (zd, na) = (self.dims.z_dim, self.dims.n_actions);
        let mut dz = vec![0.0; zd];
        let mut dz2 = vec![0.0; zd];
        if w.d != 0.0 {
            let dout: Vec<f64> = res.next.iter().map(|r| 2.0 * w.d * c * r).collect();
            let din = self.decoder.backward(p, tr.dec, &dout, g);
            let (dzp, dhp) = din.split_at(zd);
            let dza = self.f_s.backward(p, tr.fs, dzp, g);
            add(&mut dz, &dza[..zd]);
            let dha = self.f_eta[env].backward(p, tr.fe, dhp, g);
            self.psi[env].backward(p, tr.h, &dha[..self.dims.h_dim], g);
        }
        if w.r != 0.0 {
            let din = self.reward.backward(p, tr.rew, &[2.0 * w.r * c * res.reward], g);
            add(&mut dz, &din[..zd]);
            add(&mut dz2, &din[zd + na..]);
        }
        if w.h != 0.0 || w.ce != 0.0 {
            let dlogits: Vec<f64> = res
                .probs
                .iter()
                .zip(res.logp)
                .enumerate()
                .map(|(j, (q, l))| {
                    let dh = -q * (l + res.entropy);
                    let dce = q - if j == env { 1.0 } else { 0.0 };
                    c * (w.h * dh + w.ce * dce)
                })
                .collect();
            let din = self.classifier.backward(p, tr.cls, &dlogits, g);
            add(&mut dz, &din);
        }
        self.phi.backward(p, tr.z, &dz, g);
        self.phi.backward(p, tr.z2, &dz2, g);
    }
}

struct Traces<'a> {
    z: &'a Trace,
    z2: &'a Trace,
    h: &'a Trace,
    fs: &'a Trace,
    fe: &'a Trace,
    dec: &'a Trace,
    rew: &'a Trace,
    cls: &'a Trace,
}

struct Residuals<'a> {
    next: &'a [f64],
    reward: f64,
    probs: &'a [f64],
    logp: &'a [f64],
    entropy: f64,
}

fn add(acc: &mut [f64], v: &[f64]) {
    for (a, b) in acc.iter_mut().zip(v) {
        *a += b;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_covers_every_parameter_once() {
        for class in [FunctionClass::Affine, FunctionClass::Tanh { hidden: 5 }] {
            let m = MisaModel::zeros(
                ModelDims {
                    x_dim: 4,
                    z_dim: 2,
                    h_dim: 2,
                    n_actions: 2,
                    n_envs: 3,
                },
                class,
            );
            let mut at = 0;
            for b in m.layout() {
                assert_eq!(b.offset, at, "{}", b.name);
                at += b.len;
            }
            assert_eq!(at, m.n_params());
            let mut covered: Vec<Range<usize>> = [ParamGroup::Shared, ParamGroup::Classifier]
                .into_iter()
                .chain((0..3).map(ParamGroup::Nuisance))
                .flat_map(|g| m.group(g))
                .collect();
            covered.sort_by_key(|r| r.start);
            assert_eq!(covered.iter().map(|r| r.len()).sum::<usize>(), m.n_params());
        }
    }

    #[test]
    fn uniform_classifier_has_log_n_entropy() {
        let dims = ModelDims {
            x_dim: 2,
            z_dim: 1,
            h_dim: 1,
            n_actions: 1,
            n_envs: 4,
        };
        let m = MisaModel::zeros(dims, FunctionClass::Affine);
        let p = m.classify(&[0.7]);
        assert!(p.iter().all(|q| (q - 0.25).abs() < 1e-15));
        let t = RichTransition {
            x: vec![1.0, 2.0],
            a: 0,
            r: 0.0,
            x_next: vec![0.0, 0.0],
            s: vec![],
            s_next: vec![],
        };
        let batches: Vec<EnvBatch> = (0..4).map(|e| EnvBatch { env: e, transitions: vec![&t] }).collect();
        let (loss, _) = m.evaluate(&batches, Alphas::default(), None).unwrap();
        assert!((loss.entropy - 4f64.ln()).abs() < 1e-12);
        assert_eq!(loss.j_d, 0.0);
    }
}
