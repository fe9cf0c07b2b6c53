use serde::{Deserialize, Serialize};

/// PSNR in dB of a mean squared error for colors in `[0, 1]`.
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse > 0.0 {
        -10.0 * mse.log10()
    } else {
        f64::INFINITY
    }
}

/// Per-image exponential moving average of squared color error for both heads.
///
/// The first update of a slot stores the batch mean as is; later updates
/// apply `slot = gamma * slot + (1 - gamma) * mean`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PsnrTracker {
    pub gamma: f64,
    mse_o: Vec<Option<f64>>,
    mse_n: Vec<Option<f64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    O,
    N,
}

impl PsnrTracker {
    pub fn new(images: usize, gamma: f64) -> Self {
        assert!(gamma > 0.0 && gamma < 1.0);
        PsnrTracker {
            gamma,
            mse_o: vec![None; images],
            mse_n: vec![None; images],
        }
    }

    pub fn len(&self) -> usize {
        self.mse_o.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mse_o.is_empty()
    }

    fn slots(&mut self, head: Head) -> &mut Vec<Option<f64>> {
        match head {
            Head::O => &mut self.mse_o,
            Head::N => &mut self.mse_n,
        }
    }

    /// Folds a batch of per-ray squared errors into the slot of `image`.
    pub fn track(&mut self, image: usize, errors: &[f64], head: Head) {
        if errors.is_empty() {
            return;
        }
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        let gamma = self.gamma;
        let slot = &mut self.slots(head)[image];
        *slot = Some(match *slot {
            None => mean,
            Some(prev) => gamma * prev + (1.0 - gamma) * mean,
        });
    }

    /// Overwrites a slot with a freshly measured MSE.
    pub fn reset(&mut self, image: usize, mse: f64, head: Head) {
        self.slots(head)[image] = Some(mse);
    }

    pub fn mse(&self, image: usize, head: Head) -> Option<f64> {
        match head {
            Head::O => self.mse_o[image],
            Head::N => self.mse_n[image],
        }
    }

    pub fn psnr(&self, image: usize, head: Head) -> Option<f64> {
        self.mse(image, head).map(psnr_from_mse)
    }

    /// PSNR of every image for one head; unseen images report 0 dB.
    pub fn psnr_all(&self, head: Head) -> Vec<f64> {
        (0..self.len()).map(|i| self.psnr(i, head).unwrap_or(0.0)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_stream_converges() {
        let mut t = PsnrTracker::new(1, 0.95);
        for _ in 0..200 {
            t.track(0, &[0.02, 0.02], Head::O);
        }
        assert!((t.mse(0, Head::O).unwrap() - 0.02).abs() < 1e-6);
    }

    #[test]
    fn step_change_decays_geometrically() {
        let mut t = PsnrTracker::new(1, 0.95);
        t.track(0, &[0.5], Head::O);
        for n in 1..=300 {
            t.track(0, &[0.02], Head::O);
            let expect = 0.02 + 0.48 * 0.95f64.powi(n);
            assert!((t.mse(0, Head::O).unwrap() - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn psnr_definition() {
        assert!((psnr_from_mse(1e-3) - 30.0).abs() < 1e-12);
    }

    #[test]
    fn first_batch_sets_slot_to_mean() {
        let mut t = PsnrTracker::new(2, 0.95);
        t.track(1, &[0.1, 0.3], Head::N);
        assert!((t.mse(1, Head::N).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(t.mse(1, Head::O), None);
        assert_eq!(t.mse(0, Head::N), None);
    }
}
