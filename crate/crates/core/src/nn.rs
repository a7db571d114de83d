//! Small building blocks shared by the encoder, integrator and decoder.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::Result;
use crate::params::{glorot, ParamSet, ParamStore};
use crate::Tensor;

/// Affine map with weight `out × in` and optional bias `out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn load(ps: &ParamSet, prefix: &str, bias: bool) -> Result<Linear> {
        Ok(Linear {
            weight: ps.get(&format!("{prefix}.weight"))?.clone(),
            bias: if bias { Some(ps.get(&format!("{prefix}.bias"))?.clone()) } else { None },
        })
    }

    /// Registers `prefix.weight` (Glorot scaled by `gain`) and a zero `prefix.bias`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        gain: f64,
        bias: bool,
    ) -> Result<()> {
        store.insert(&format!("{prefix}.weight"), &[fan_out, fan_in], glorot(rng, fan_in, fan_out, gain))?;
        if bias {
            store.insert(&format!("{prefix}.bias"), &[fan_out], vec![0.0; fan_out])?;
        }
        Ok(())
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape()[0]
    }

    /// Applies the map to every column of `batch × in × n`.
    pub fn forward_columns(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.weight.matmul(x)?;
        match &self.bias {
            Some(b) => y.add(&b.reshape(&[self.out_features(), 1])?),
            None => Ok(y),
        }
    }

    /// Applies the map to every row of `batch × n × in`.
    pub fn forward_rows(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight.transpose()?)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

/// Column-wise tanh MLP `in → hidden → hidden → out`. The output optionally
/// adds a skip path: the identity when `in == out`, a bias-free linear map
/// otherwise.
#[derive(Debug, Clone)]
pub struct TanhMlp {
    layers: Vec<Linear>,
    skip: Skip,
}

#[derive(Debug, Clone)]
enum Skip {
    None,
    Identity,
    Linear(Linear),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SkipKind {
    None,
    Identity,
    Linear,
}

impl TanhMlp {
    pub const DEPTH: usize = 3;

    pub fn load(ps: &ParamSet, prefix: &str, skip: SkipKind) -> Result<TanhMlp> {
        let layers = (0..Self::DEPTH)
            .map(|i| Linear::load(ps, &format!("{prefix}.l{i}"), true))
            .collect::<Result<_>>()?;
        let skip = match skip {
            SkipKind::None => Skip::None,
            SkipKind::Identity => Skip::Identity,
            SkipKind::Linear => Skip::Linear(Linear::load(ps, &format!("{prefix}.skip"), false)?),
        };
        Ok(TanhMlp { layers, skip })
    }

    /// Registers the three layers; the last one uses `out_gain`.
    #[allow(clippy::too_many_arguments)]
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        input: usize,
        hidden: usize,
        output: usize,
        out_gain: f64,
        skip: SkipKind,
    ) -> Result<()> {
        Linear::init(store, rng, &format!("{prefix}.l0"), input, hidden, 1.0, true)?;
        Linear::init(store, rng, &format!("{prefix}.l1"), hidden, hidden, 1.0, true)?;
        Linear::init(store, rng, &format!("{prefix}.l2"), hidden, output, out_gain, true)?;
        if skip == SkipKind::Linear {
            Linear::init(store, rng, &format!("{prefix}.skip"), input, output, 1.0, false)?;
        }
        Ok(())
    }

    pub fn forward_columns(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.layers[0].forward_columns(x)?.tanh()?;
        let h = self.layers[1].forward_columns(&h)?.tanh()?;
        let y = self.layers[2].forward_columns(&h)?;
        match &self.skip {
            Skip::None => Ok(y),
            Skip::Identity => y.add(x),
            Skip::Linear(l) => y.add(&l.forward_columns(x)?),
        }
    }
}
