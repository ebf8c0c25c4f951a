use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Schedule {
    Constant,
    Poly { power: f64 },
}

/// `lr_end + (lr_start − lr_end)·(1 − epoch/(epochs−1))^power`; one epoch gives `lr_start`.
pub fn poly_lr(epoch: usize, epochs: usize, lr_start: f64, lr_end: f64, power: f64) -> f64 {
    if epochs <= 1 {
        return lr_start;
    }
    let frac = 1.0 - epoch.min(epochs - 1) as f64 / (epochs - 1) as f64;
    lr_end + (lr_start - lr_end) * frac.powf(power)
}

impl Schedule {
    pub fn lr(&self, epoch: usize, epochs: usize, lr_start: f64, lr_end: f64) -> f64 {
        match *self {
            Schedule::Constant => lr_start,
            Schedule::Poly { power } => poly_lr(epoch, epochs, lr_start, lr_end, power),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_and_midpoint() {
        assert_eq!(poly_lr(0, 11, 1e-5, 5e-6, 1.0), 1e-5);
        assert_eq!(poly_lr(10, 11, 1e-5, 5e-6, 1.0), 5e-6);
        assert!((poly_lr(5, 11, 1e-5, 5e-6, 1.0) - 7.5e-6).abs() < 1e-18);
        assert_eq!(poly_lr(0, 1, 3e-4, 1e-4, 1.0), 3e-4);
        assert_eq!(Schedule::Constant.lr(7, 10, 2e-3, 1e-4), 2e-3);
    }

    #[test]
    fn poly_is_monotone() {
        let lrs: Vec<f64> = (0..50).map(|e| poly_lr(e, 50, 1e-3, 1e-4, 1.0)).collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }
}
