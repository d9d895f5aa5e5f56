use crate::autodiff::{BatchStats, NormStats, Tape, Tensor, Var};
use crate::nn::params::{ParamId, ParamKind, ParamStore};
use crate::nn::{Mode, ParamBinder};
use crate::{Error, Real, Result};

/// One set of affine parameters and running statistics. Banks of a layer may
/// alias `gamma`/`beta` while keeping distinct statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BnBank {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    /// Set on banks whose statistics are being estimated in [`Mode::Calibrate`].
    pub calibrating: bool,
}

/// Batch statistics observed for one bank during a forward pass.
#[derive(Clone, Debug)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub stats: BatchStats,
}

#[derive(Clone, Debug)]
pub struct BatchNormLayer {
    pub channels: usize,
    pub eps: Real,
    pub momentum: Real,
    pub banks: Vec<BnBank>,
}

impl BatchNormLayer {
    /// Registers a layer with one bank. Names are `{prefix}.gamma` and so on.
    pub fn new(store: &mut ParamStore, prefix: &str, channels: usize, eps: Real, momentum: Real) -> Result<Self> {
        let mut layer = BatchNormLayer {
            channels,
            eps,
            momentum,
            banks: Vec::new(),
        };
        let gamma = store.add(format!("{prefix}.gamma"), ParamKind::BnGamma, Tensor::full([channels], 1.0))?;
        let beta = store.add(format!("{prefix}.beta"), ParamKind::BnBeta, Tensor::zeros([channels]))?;
        layer.push_stats_bank(store, prefix, gamma, beta)?;
        Ok(layer)
    }

    /// Appends a bank with fresh running statistics and the given affine parameters.
    pub(crate) fn push_stats_bank(
        &mut self,
        store: &mut ParamStore,
        prefix: &str,
        gamma: ParamId,
        beta: ParamId,
    ) -> Result<usize> {
        let c = self.channels;
        let (m, v) = if self.banks.is_empty() {
            (format!("{prefix}.running_mean"), format!("{prefix}.running_var"))
        } else {
            let k = self.banks.len();
            (format!("{prefix}.bank{k}.running_mean"), format!("{prefix}.bank{k}.running_var"))
        };
        let running_mean = store.add(m, ParamKind::BnRunningMean, Tensor::zeros([c]))?;
        let running_var = store.add(v, ParamKind::BnRunningVar, Tensor::full([c], 1.0))?;
        self.banks.push(BnBank {
            gamma,
            beta,
            running_mean,
            running_var,
            calibrating: false,
        });
        Ok(self.banks.len() - 1)
    }

    /// Appends a bank with its own gamma (initialized to `gamma_init`), beta and statistics.
    pub(crate) fn push_full_bank(&mut self, store: &mut ParamStore, prefix: &str, gamma_init: Real) -> Result<usize> {
        let k = self.banks.len();
        let c = self.channels;
        let gamma = store.add(format!("{prefix}.bank{k}.gamma"), ParamKind::BnGamma, Tensor::full([c], gamma_init))?;
        let beta = store.add(format!("{prefix}.bank{k}.beta"), ParamKind::BnBeta, Tensor::zeros([c]))?;
        self.push_stats_bank(store, prefix, gamma, beta)
    }

    pub fn bank(&self, step: Option<usize>) -> Result<&BnBank> {
        match step {
            None if self.banks.len() == 1 => Ok(&self.banks[0]),
            None => Err(Error::InvalidArgument(format!(
                "batch norm has {} step banks; a step index is required",
                self.banks.len()
            ))),
            Some(k) => self.banks.get(k).ok_or_else(|| {
                Error::InvalidArgument(format!("step index {k} out of range for {} banks", self.banks.len()))
            }),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        binder: &mut ParamBinder,
        x: Var,
        mode: Mode,
        step: Option<usize>,
    ) -> Result<(Var, Option<BnUpdate>)> {
        let bank = *self.bank(step)?;
        let c = tape.shape(x).get(1).copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::shape(
                "batchnorm",
                format!("input has {c} channels, layer expects {}", self.channels),
            ));
        }
        let gamma = binder.bind(tape, store, bank.gamma)?;
        let beta = binder.bind(tape, store, bank.beta)?;
        let batch = match mode {
            Mode::Train => true,
            Mode::Eval => false,
            Mode::Calibrate => bank.calibrating,
        };
        let stats = if batch {
            NormStats::Batch
        } else {
            NormStats::Fixed {
                mean: store.value(bank.running_mean).data().to_vec(),
                var: store.value(bank.running_var).data().to_vec(),
            }
        };
        let (y, observed) = tape.batch_norm(x, gamma, beta, self.eps, stats)?;
        Ok((
            y,
            observed.map(|stats| BnUpdate {
                running_mean: bank.running_mean,
                running_var: bank.running_var,
                stats,
            }),
        ))
    }
}
