//! Prototype-dictionary part encoding.
//!
//! Each part feature `z_m ∈ ℝ^C` is projected to a code `π_m = P_m z_m ∈ ℝ^K`
//! and reconstructed as `D_mᵀ π_m`. The rows of `D_m` are the part's `K`
//! prototypes. The projection is linear: codes are not normalized and may be
//! negative.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{Group, ParamSet};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

pub const ENCODER_P: &str = "encoder.P";
pub const ENCODER_D: &str = "encoder.D";

/// Per-part encoder/decoder matrices, both stored as `[M, K, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeDictionary {
    pub encoder: Tensor,
    pub decoder: Tensor,
}

impl PrototypeDictionary {
    pub fn new(encoder: Tensor, decoder: Tensor) -> Result<Self> {
        if encoder.shape().len() != 3 || encoder.shape() != decoder.shape() {
            return Err(Error::shape(
                "prototype_dictionary",
                format!("P {:?}, D {:?}", encoder.shape(), decoder.shape()),
            ));
        }
        if !encoder.is_finite() || !decoder.is_finite() {
            return Err(Error::Invalid("dictionary entries must be finite".into()));
        }
        Ok(Self { encoder, decoder })
    }

    pub fn from_params(params: &ParamSet) -> Result<Self> {
        Self::new(params.tensor(ENCODER_P)?.clone(), params.tensor(ENCODER_D)?.clone())
    }

    pub fn parts(&self) -> usize {
        self.encoder.shape()[0]
    }

    pub fn prototypes(&self) -> usize {
        self.encoder.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.encoder.shape()[2]
    }

    /// Prototype `k` of part `m` (row of the decoder).
    pub fn prototype(&self, m: usize, k: usize) -> &[f64] {
        let (kk, c) = (self.prototypes(), self.channels());
        &self.decoder.data()[(m * kk + k) * c..(m * kk + k + 1) * c]
    }

    fn to_params(&self) -> Result<ParamSet> {
        let mut ps = ParamSet::new();
        ps.insert(ENCODER_P, Group::Encoder, self.encoder.clone())?;
        ps.insert(ENCODER_D, Group::Encoder, self.decoder.clone())?;
        Ok(ps)
    }

    fn check_codes(&self, v: &Tensor, last: usize, op: &'static str) -> Result<()> {
        if v.shape() != [self.parts(), last] {
            return Err(Error::shape(op, format!("expected [{}, {last}], got {:?}", self.parts(), v.shape())));
        }
        Ok(())
    }

    /// `π_m = P_m z_m` for a single sample's `[M, C]` part features.
    pub fn encode(&self, z: &Tensor) -> Result<Tensor> {
        self.check_codes(z, self.channels(), "encode")?;
        let ps = self.to_params()?;
        let mut g = Graph::frozen();
        let zv = g.constant(z.clone().reshaped(&[1, self.parts(), self.channels()])?)?;
        let pi = encode(&mut g, &ps, zv)?;
        g.value(pi).clone().reshaped(&[self.parts(), self.prototypes()])
    }

    /// `ẑ_m = D_mᵀ π_m` for a single sample's `[M, K]` code.
    pub fn reconstruct(&self, pi: &Tensor) -> Result<Tensor> {
        self.check_codes(pi, self.prototypes(), "reconstruct")?;
        let ps = self.to_params()?;
        let mut g = Graph::frozen();
        let pv = g.constant(pi.clone().reshaped(&[1, self.parts(), self.prototypes()])?)?;
        let z = reconstruct(&mut g, &ps, pv)?;
        g.value(z).clone().reshaped(&[self.parts(), self.channels()])
    }

    /// `ℓ_prob` of a single sample's `[M, C]` part features.
    pub fn loss_prob(&self, z: &Tensor, lambda_reg: f64) -> Result<f64> {
        self.check_codes(z, self.channels(), "loss_prob")?;
        let ps = self.to_params()?;
        let mut g = Graph::frozen();
        let zv = g.constant(z.clone().reshaped(&[1, self.parts(), self.channels()])?)?;
        let l = loss_prob(&mut g, &ps, zv, lambda_reg)?;
        Ok(g.scalar(l))
    }
}

/// Inserts `P` and `D` with `N(0, 1/C)` entries.
pub fn init_params(params: &mut ParamSet, parts: usize, prototypes: usize, channels: usize, seed: u64) -> Result<()> {
    let mut rng = rng::stream(seed, Purpose::Init, 2, 0);
    let std = 1.0 / libm::sqrt(channels as f64);
    let n = parts * prototypes * channels;
    let p: Vec<f64> = (0..n).map(|_| rng::normal(&mut rng, std)).collect();
    let d: Vec<f64> = (0..n).map(|_| rng::normal(&mut rng, std)).collect();
    params.insert(ENCODER_P, Group::Encoder, Tensor::new(&[parts, prototypes, channels], p)?)?;
    params.insert(ENCODER_D, Group::Encoder, Tensor::new(&[parts, prototypes, channels], d)?)?;
    Ok(())
}

fn check_features(g: &Graph, params: &ParamSet, v: Var, want_last_of_p: bool, op: &'static str) -> Result<()> {
    let ps = params.tensor(ENCODER_P)?.shape();
    let vs = g.shape(v);
    let last = if want_last_of_p { ps[2] } else { ps[1] };
    if vs.len() != 3 || vs[1] != ps[0] || vs[2] != last {
        return Err(Error::shape(op, format!("input {vs:?} vs dictionary {ps:?}")));
    }
    Ok(())
}

/// `[N, M, C] → [N, M, K]`.
pub fn encode(g: &mut Graph, params: &ParamSet, z: Var) -> Result<Var> {
    check_features(g, params, z, true, "encode")?;
    let p = g.param(params, ENCODER_P)?;
    let zt = g.transpose01(z)?;
    let pi = g.matmul(zt, p, true)?;
    g.transpose01(pi)
}

/// `[N, M, K] → [N, M, C]`.
pub fn reconstruct(g: &mut Graph, params: &ParamSet, pi: Var) -> Result<Var> {
    check_features(g, params, pi, false, "reconstruct")?;
    let d = g.param(params, ENCODER_D)?;
    let pt = g.transpose01(pi)?;
    let z = g.matmul(pt, d, false)?;
    g.transpose01(z)
}

/// `Σ_m ‖z_m − D_mᵀ P_m z_m‖² + λ‖P_m‖²_F + λ‖D_m‖²_F`, summed over the batch.
pub fn loss_prob(g: &mut Graph, params: &ParamSet, z: Var, lambda_reg: f64) -> Result<Var> {
    let n = g.shape(z)[0] as f64;
    let pi = encode(g, params, z)?;
    let recon = reconstruct(g, params, pi)?;
    let residual = g.sub(z, recon)?;
    let fit = g.sq_norm(residual)?;
    let p = g.param(params, ENCODER_P)?;
    let d = g.param(params, ENCODER_D)?;
    let pn = g.sq_norm(p)?;
    let dn = g.sq_norm(d)?;
    let reg = g.add(pn, dn)?;
    let reg = g.scale(reg, lambda_reg * n)?;
    g.add(fit, reg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    fn single(p: &[f64], d: &[f64], k: usize, c: usize) -> PrototypeDictionary {
        PrototypeDictionary::new(t(&[1, k, c], p), t(&[1, k, c], d)).unwrap()
    }

    #[test]
    fn zero_features_encode_to_zero() {
        let dict = single(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[0.0; 6], 2, 3);
        assert_eq!(dict.encode(&Tensor::zeros(&[1, 3])).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn coordinate_selection() {
        let dict = single(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[0.0; 6], 2, 3);
        assert_eq!(dict.encode(&t(&[1, 3], &[3.0, 4.0, 5.0])).unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn encode_hand_product() {
        let dict = single(&[0.5, -1.0, 2.0, 1.5, 0.25, -0.75], &[0.0; 6], 2, 3);
        let pi = dict.encode(&t(&[1, 3], &[1.0, 2.0, 3.0])).unwrap();
        // [0.5 - 2 + 6, 1.5 + 0.5 - 2.25]
        assert_eq!(pi.data(), &[4.5, -0.25]);
    }

    #[test]
    fn reconstruct_cases() {
        let d = [0.5, -1.0, 2.0, 1.5, 0.25, -0.75];
        let dict = single(&[0.0; 6], &d, 2, 3);
        assert_eq!(dict.reconstruct(&Tensor::zeros(&[1, 2])).unwrap().data(), &[0.0; 3]);
        assert_eq!(dict.reconstruct(&t(&[1, 2], &[0.0, 1.0])).unwrap().data(), dict.prototype(0, 1));
        // 2·row0 − row1
        let z = dict.reconstruct(&t(&[1, 2], &[2.0, -1.0])).unwrap();
        assert_eq!(z.data(), &[-0.5, -2.25, 4.75]);
    }

    #[test]
    fn identity_autoencoder_is_lossless() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        let dict = single(&eye, &eye, 2, 2);
        let z = t(&[1, 2], &[0.3, -2.0]);
        assert_eq!(dict.loss_prob(&z, 0.0).unwrap(), 0.0);
        assert_eq!(dict.loss_prob(&z, 1.0).unwrap(), 4.0);
    }

    #[test]
    fn annihilated_features_cost_their_norm() {
        let dict = single(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0], 2, 3);
        let z = t(&[1, 3], &[0.0, 0.0, 3.0]);
        assert_eq!(dict.loss_prob(&z, 0.0).unwrap(), 9.0);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let dict = single(&[0.0; 6], &[0.0; 6], 2, 3);
        assert!(matches!(dict.encode(&Tensor::zeros(&[1, 4])), Err(Error::Shape { op: "encode", .. })));
        assert!(matches!(dict.reconstruct(&Tensor::zeros(&[2, 2])), Err(Error::Shape { .. })));
        assert!(PrototypeDictionary::new(Tensor::zeros(&[1, 2, 3]), Tensor::zeros(&[1, 3, 3])).is_err());
    }

    #[test]
    fn batch_encode_matches_per_sample() {
        let mut ps = ParamSet::new();
        init_params(&mut ps, 2, 3, 5, 11).unwrap();
        let dict = PrototypeDictionary::from_params(&ps).unwrap();
        let zs: Vec<f64> = (0..20).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut g = Graph::frozen();
        let z = g.constant(t(&[2, 2, 5], &zs)).unwrap();
        let pi = encode(&mut g, &ps, z).unwrap();
        for n in 0..2 {
            let single = dict.encode(&t(&[2, 5], &zs[n * 10..(n + 1) * 10])).unwrap();
            assert_eq!(&g.value(pi).data()[n * 6..(n + 1) * 6], single.data());
        }
    }
}
