//! Parameter-efficient adapters.
//!
//! Three sites are supported: LoRA deltas on the attention query/value
//! projections (`Q = X W^q + s * X W_down W_up`, same for V), an AdaptFormer
//! branch running in parallel with the FFN
//! (`X + FFN(X) + s * ReLU(X W_down) W_up`), and the key-refinement adapter
//! of the differentiable merge module (`K' = K + s * ReLU(K W_down) W_up`).
//! Adapters carry no biases. At initialization `w_up` is zero, making every
//! adapter an exact identity delta; `w_down` is Gaussian(0, 0.02) and the
//! scale `s` defaults to 1.0.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::Elem;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdapterSite {
    AttnQ,
    AttnV,
    FfnParallel,
    KeyRefine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    None,
    Relu,
}

/// Down/up projection pair with scale, bound to a site.
#[derive(Clone, Debug)]
pub struct AdapterWeights {
    pub w_down: Tensor,
    pub w_up: Tensor,
    pub scale: Elem,
    pub activation: Activation,
    pub site: AdapterSite,
}

impl AdapterWeights {
    /// Low-rank init: `h` must be strictly below `d_in`.
    pub fn init(site: AdapterSite, d_in: usize, h: usize, scale: Elem, rng: &mut Rng) -> Result<AdapterWeights> {
        if h == 0 || h >= d_in {
            return Err(Error::invalid(format!(
                "adapter hidden width {} must satisfy 0 < h < d_in = {}",
                h, d_in
            )));
        }
        let activation = match site {
            AdapterSite::AttnQ | AdapterSite::AttnV => Activation::None,
            AdapterSite::FfnParallel | AdapterSite::KeyRefine => Activation::Relu,
        };
        Ok(AdapterWeights {
            w_down: Tensor::randn(&[d_in, h], 0.02, rng),
            w_up: Tensor::zeros(&[h, d_in]),
            scale,
            activation,
            site,
        })
    }

    /// Additive LoRA delta for the query/value projection.
    pub fn lora_delta(&self, x: &Tensor) -> Result<Tensor> {
        if !matches!(self.site, AdapterSite::AttnQ | AdapterSite::AttnV) {
            return Err(Error::invalid("lora_delta called on a non-attention adapter"));
        }
        Ok(x.matmul(&self.w_down)?.matmul(&self.w_up)?.scale(self.scale))
    }

    /// Additive branch output running in parallel with the FFN.
    pub fn adaptformer_branch(&self, x: &Tensor) -> Result<Tensor> {
        if self.site != AdapterSite::FfnParallel {
            return Err(Error::invalid("adaptformer_branch called on a non-FFN adapter"));
        }
        Ok(x.matmul(&self.w_down)?.relu().matmul(&self.w_up)?.scale(self.scale))
    }

    /// Refined keys `K' = K + s * ReLU(K W_down) W_up`. The caller detaches
    /// `k` from the backbone graph first; see the tape variant below.
    pub fn refine_keys(&self, k: &Tensor) -> Result<Tensor> {
        if self.site != AdapterSite::KeyRefine {
            return Err(Error::invalid("refine_keys called on a non-refinement adapter"));
        }
        let delta = k.matmul(&self.w_down)?.relu().matmul(&self.w_up)?.scale(self.scale);
        k.add(&delta)
    }
}

/// Tape version of the LoRA delta: `s * x W_down W_up`.
pub fn lora_delta(tape: &Tape, x: Var, w_down: Var, w_up: Var, scale: Elem) -> Result<Var> {
    let d = tape.matmul(tape.matmul(x, w_down)?, w_up)?;
    Ok(tape.scale(d, scale))
}

/// Tape version of the AdaptFormer branch: `s * ReLU(x W_down) W_up`.
pub fn adaptformer_branch(tape: &Tape, x: Var, w_down: Var, w_up: Var, scale: Elem) -> Result<Var> {
    let d = tape.matmul(tape.relu(tape.matmul(x, w_down)?), w_up)?;
    Ok(tape.scale(d, scale))
}

/// Tape version of key refinement: `k + s * ReLU(k W_down) W_up`.
/// `k` must already be detached (stop_gradient) so matching gradients reach
/// only the adapter weights, never the backbone key path.
pub fn refine_keys(tape: &Tape, k: Var, w_down: Var, w_up: Var, scale: Elem) -> Result<Var> {
    let d = tape.matmul(tape.relu(tape.matmul(k, w_down)?), w_up)?;
    tape.add(k, tape.scale(d, scale))
}

/// Whether a model parameter (by name) is trained. Everything else is the
/// frozen backbone.
pub fn is_trainable(name: &str) -> bool {
    name.contains(".adapter.") || name.starts_with("head.") || name.starts_with("merge.refine")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    fn t(shape: &[usize], data: &[Elem]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn zero_up_projection_is_identity_delta() {
        let mut rng = rng_from(1);
        let a = AdapterWeights::init(AdapterSite::AttnQ, 4, 2, 1.0, &mut rng).unwrap();
        assert_eq!(a.w_up, Tensor::zeros(&[2, 4]));
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(a.lora_delta(&x).unwrap(), Tensor::zeros(&[3, 4]));

        let f = AdapterWeights::init(AdapterSite::FfnParallel, 4, 2, 1.0, &mut rng).unwrap();
        assert_eq!(f.adaptformer_branch(&x).unwrap(), Tensor::zeros(&[3, 4]));

        let r = AdapterWeights::init(AdapterSite::KeyRefine, 4, 2, 1.0, &mut rng).unwrap();
        let k = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(r.refine_keys(&k).unwrap(), k);
    }

    #[test]
    fn lora_worked_example() {
        let a = AdapterWeights {
            w_down: t(&[2, 1], &[1.0, 0.0]),
            w_up: t(&[1, 2], &[0.0, 1.0]),
            scale: 0.1,
            activation: Activation::None,
            site: AdapterSite::AttnQ,
        };
        let x = t(&[1, 2], &[1.0, 0.0]);
        let d = a.lora_delta(&x).unwrap();
        assert_eq!(d, t(&[1, 2], &[0.0, 0.1]));
    }

    #[test]
    fn delta_linear_in_scale() {
        let mut rng = rng_from(2);
        let mut a = AdapterWeights::init(AdapterSite::AttnV, 6, 3, 0.7, &mut rng).unwrap();
        a.w_up = Tensor::randn(&[3, 6], 0.5, &mut rng);
        let x = Tensor::randn(&[2, 6], 1.0, &mut rng);
        let d1 = a.lora_delta(&x).unwrap();
        a.scale *= 2.0;
        let d2 = a.lora_delta(&x).unwrap();
        assert!(d2.max_abs_diff(&d1.scale(2.0)).unwrap() < 1e-12);

        let mut f = AdapterWeights::init(AdapterSite::FfnParallel, 6, 3, 0.7, &mut rng).unwrap();
        f.w_up = Tensor::randn(&[3, 6], 0.5, &mut rng);
        let b1 = f.adaptformer_branch(&x).unwrap();
        f.scale *= 3.0;
        let b2 = f.adaptformer_branch(&x).unwrap();
        assert!(b2.max_abs_diff(&b1.scale(3.0)).unwrap() < 1e-12);
    }

    #[test]
    fn relu_kills_negative_preactivations() {
        let f = AdapterWeights {
            w_down: t(&[2, 2], &[-1.0, -2.0, -3.0, -1.0]),
            w_up: t(&[2, 2], &[1.0, 1.0, 1.0, 1.0]),
            scale: 1.0,
            activation: Activation::Relu,
            site: AdapterSite::FfnParallel,
        };
        let x = t(&[1, 2], &[1.0, 1.0]);
        assert_eq!(f.adaptformer_branch(&x).unwrap(), t(&[1, 2], &[0.0, 0.0]));
    }

    #[test]
    fn adaptformer_matches_loop_oracle() {
        let mut rng = rng_from(3);
        let mut f = AdapterWeights::init(AdapterSite::FfnParallel, 5, 2, 1.3, &mut rng).unwrap();
        f.w_up = Tensor::randn(&[2, 5], 0.5, &mut rng);
        let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let got = f.adaptformer_branch(&x).unwrap();
        for i in 0..4 {
            for j in 0..5 {
                let mut acc = 0.0;
                for h in 0..2 {
                    let mut pre = 0.0;
                    for k in 0..5 {
                        pre += x.at(&[i, k]) * f.w_down.at(&[k, h]);
                    }
                    acc += pre.max(0.0) * f.w_up.at(&[h, j]);
                }
                assert!((got.at(&[i, j]) - 1.3 * acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_scale_refinement_is_identity() {
        let mut rng = rng_from(4);
        let mut r = AdapterWeights::init(AdapterSite::KeyRefine, 4, 2, 0.0, &mut rng).unwrap();
        r.w_up = Tensor::randn(&[2, 4], 0.5, &mut rng);
        let k = Tensor::randn(&[3, 4], 1.0, &mut rng);
        assert_eq!(r.refine_keys(&k).unwrap(), k);
    }

    #[test]
    fn site_mismatch_errors() {
        let mut rng = rng_from(5);
        let a = AdapterWeights::init(AdapterSite::AttnQ, 4, 2, 1.0, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 4]);
        assert!(a.adaptformer_branch(&x).is_err());
        assert!(a.refine_keys(&x).is_err());
        let f = AdapterWeights::init(AdapterSite::FfnParallel, 4, 2, 1.0, &mut rng).unwrap();
        assert!(f.lora_delta(&x).is_err());
    }

    #[test]
    fn rank_must_be_low() {
        let mut rng = rng_from(6);
        assert!(AdapterWeights::init(AdapterSite::AttnQ, 4, 4, 1.0, &mut rng).is_err());
        assert!(AdapterWeights::init(AdapterSite::AttnQ, 4, 0, 1.0, &mut rng).is_err());
    }

    #[test]
    fn partition_rules() {
        assert!(is_trainable("block3.adapter.q.down"));
        assert!(is_trainable("head.w"));
        assert!(is_trainable("merge.refine.up"));
        assert!(!is_trainable("block3.attn.wq"));
        assert!(!is_trainable("pos_embed"));
        assert!(!is_trainable("ln_f.g"));
    }
}
