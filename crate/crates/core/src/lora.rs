//! Low-rank adapters on attention projections.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{gaussian, Linear, LoraPair};
use crate::param::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Which of the four attention projections receive an adapter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraTargets {
    pub wq: bool,
    pub wk: bool,
    pub wv: bool,
    pub wo: bool,
}

impl LoraTargets {
    pub const ALL: Self = Self {
        wq: true,
        wk: true,
        wv: true,
        wo: true,
    };

    pub fn count(&self) -> usize {
        [self.wq, self.wk, self.wv, self.wo].iter().filter(|&&b| b).count()
    }

    /// Whether the projection named `...attn.<suffix>` is targeted.
    pub fn matches(&self, linear_name: &str) -> bool {
        let suffix = linear_name.rsplit('.').next().unwrap_or("");
        match suffix {
            "wq" => self.wq,
            "wk" => self.wk,
            "wv" => self.wv,
            "wo" => self.wo,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub targets: LoraTargets,
    pub init_std: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self::with_rank(2)
    }
}

impl LoraConfig {
    /// Rank `r` with `alpha = 2r`.
    pub fn with_rank(rank: usize) -> Self {
        Self {
            rank,
            alpha: 2.0 * rank as f64,
            targets: LoraTargets::ALL,
            init_std: 0.02,
        }
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `r >= 1` and `r <= min(d, k) / 4` for a `d x k` weight.
    pub fn validate(&self, d: usize, k: usize) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        if self.rank * 4 > d.min(k) {
            return Err(Error::Config(format!(
                "LoRA rank {} too large for a {d}x{k} weight (at most min(d, k)/4)",
                self.rank
            )));
        }
        if !self.alpha.is_finite() || !self.init_std.is_finite() || self.init_std < 0.0 {
            return Err(Error::Config("LoRA alpha and init_std must be finite".into()));
        }
        Ok(())
    }
}

/// Adapter parameters added for `n_layers` layers of `d x k` projections.
pub fn param_count(cfg: &LoraConfig, n_layers: usize, d: usize, k: usize) -> Result<usize> {
    cfg.validate(d, k)?;
    Ok(cfg.rank * (d + k) * cfg.targets.count() * n_layers)
}

pub fn adapter_name(linear: &Linear, part: &str) -> alloc::string::String {
    format!("lora.{}.{part}", linear.name)
}

/// Attach an adapter to every targeted projection and freeze the base
/// weights. `A` is Gaussian, `B` zero, so the adapted model starts out
/// computing exactly what the base model does. Re-injecting over existing
/// adapters re-initialises them. Returns the number of adapters.
pub fn inject<'a, T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    linears: impl IntoIterator<Item = &'a mut Linear>,
    cfg: &LoraConfig,
    rng: &mut R,
) -> Result<usize> {
    let mut n = 0;
    for lin in linears {
        if !cfg.targets.matches(&lin.name) {
            continue;
        }
        cfg.validate(lin.d_in, lin.d_out)?;
        let a_val: Tensor<T> = gaussian(&[lin.d_in, cfg.rank], cfg.init_std, rng);
        let b_val = Tensor::zeros(&[cfg.rank, lin.d_out]);
        let (a_name, b_name) = (adapter_name(lin, "a"), adapter_name(lin, "b"));
        let a = match store.id(&a_name) {
            Some(id) => {
                store.set_tensor(id, a_val)?;
                id
            }
            None => store.add(&a_name, a_val, false)?,
        };
        let b = match store.id(&b_name) {
            Some(id) => {
                store.set_tensor(id, b_val)?;
                id
            }
            None => store.add(&b_name, b_val, false)?,
        };
        store.get_mut(lin.weight).frozen = true;
        store.get_mut(lin.weight).grad = None;
        if let Some(bias) = lin.bias {
            store.get_mut(bias).frozen = true;
        }
        lin.lora = Some(LoraPair {
            a,
            b,
            rank: cfg.rank,
            scale: cfg.scale(),
        });
        n += 1;
    }
    Ok(n)
}

/// Fold the adapter into its base weight (`W + scale * A B`) and detach it.
pub fn merge<T: Scalar>(store: &mut ParamStore<T>, linear: &mut Linear) -> Result<()> {
    let Some(l) = linear.lora.take() else {
        return Ok(());
    };
    let ab = store.tensor(l.a).matmul(store.tensor(l.b))?;
    let merged = store.tensor(linear.weight).add(&ab.scale(T::from_f64(l.scale)))?;
    store.set_tensor(linear.weight, merged)
}

/// Adapters currently attached, by linear name.
pub fn attached<'a>(linears: impl IntoIterator<Item = &'a Linear>) -> Vec<&'a Linear> {
    linears.into_iter().filter(|l| l.lora.is_some()).collect()
}
