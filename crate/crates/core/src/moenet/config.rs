use crate::error::{Error, Result};

/// Architecture and routing hyperparameters of the velocity network.
#[derive(Clone, Debug, PartialEq)]
pub struct MoeConfig {
    /// Routed experts (the shared expert is extra).
    pub n_experts: usize,
    /// Routed experts active per sample.
    pub top_k: usize,
    /// Capacity factor `c` of `⌈c·B/N⌉`.
    pub capacity_factor: f64,
    /// Window length in IMU samples.
    pub window_len: usize,
    pub n_patch: usize,
    /// Samples per patch.
    pub l_feature: usize,
    /// Width of the ResMLP trunk.
    pub l_inner: usize,
    /// Width of each expert's output features.
    pub l_out: usize,
    /// Number of ResMLP blocks per expert.
    pub depth: usize,
    /// Weight λ of the auxiliary balancing loss.
    pub aux_weight: f64,
    /// Channels of the gate's convolution.
    pub gate_channels: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        MoeConfig {
            n_experts: 8,
            top_k: 2,
            capacity_factor: 1.25,
            window_len: 200,
            n_patch: 20,
            l_feature: 10,
            l_inner: 64,
            l_out: 32,
            depth: 3,
            aux_weight: 0.01,
            gate_channels: 16,
        }
    }
}

/// Input rows per IMU epoch: gyro (3), accel (3), body-frame gravity direction (3).
pub const INPUT_ROWS: usize = 9;

impl MoeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        let extents = [
            ("N", self.n_experts),
            ("K", self.top_k),
            ("L", self.window_len),
            ("N_patch", self.n_patch),
            ("L_feature", self.l_feature),
            ("L_inner_feature", self.l_inner),
            ("L_out_dim", self.l_out),
            ("depth", self.depth),
            ("gate_channels", self.gate_channels),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return bad(format!("{name} must be positive"));
        }
        if self.top_k >= self.n_experts {
            return bad(format!("K < N violated (K = {}, N = {})", self.top_k, self.n_experts));
        }
        if !(self.capacity_factor >= 1.0) || !self.capacity_factor.is_finite() {
            return bad(format!("c >= 1 violated (c = {})", self.capacity_factor));
        }
        if self.n_patch * self.l_feature != self.window_len {
            return bad(format!(
                "L = N_patch * L_feature violated ({} != {} * {})",
                self.window_len, self.n_patch, self.l_feature
            ));
        }
        if !(self.aux_weight >= 0.0) || !self.aux_weight.is_finite() {
            return bad(format!("lambda must be a non-negative number (got {})", self.aux_weight));
        }
        Ok(())
    }

    /// `(key, value)` pairs in the config-file grammar, without section prefix.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("N", self.n_experts.to_string()),
            ("K", self.top_k.to_string()),
            ("c", self.capacity_factor.to_string()),
            ("L", self.window_len.to_string()),
            ("N_patch", self.n_patch.to_string()),
            ("L_feature", self.l_feature.to_string()),
            ("L_inner_feature", self.l_inner.to_string()),
            ("L_out_dim", self.l_out.to_string()),
            ("depth", self.depth.to_string()),
            ("lambda", self.aux_weight.to_string()),
            ("gate_channels", self.gate_channels.to_string()),
        ]
    }

    /// Sets one field by its config key. Cross-field checks are left to
    /// [`MoeConfig::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn int(v: &str) -> std::result::Result<usize, String> {
            v.parse().map_err(|_| format!("expected a non-negative integer, got {v:?}"))
        }
        fn real(v: &str) -> std::result::Result<f64, String> {
            v.parse().map_err(|_| format!("expected a number, got {v:?}"))
        }
        match key {
            "N" => self.n_experts = int(value)?,
            "K" => self.top_k = int(value)?,
            "c" => self.capacity_factor = real(value)?,
            "L" => self.window_len = int(value)?,
            "N_patch" => self.n_patch = int(value)?,
            "L_feature" => self.l_feature = int(value)?,
            "L_inner_feature" => self.l_inner = int(value)?,
            "L_out_dim" => self.l_out = int(value)?,
            "depth" => self.depth = int(value)?,
            "lambda" => self.aux_weight = real(value)?,
            "gate_channels" => self.gate_channels = int(value)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Flattened patch width `9·L_feature`.
    pub fn patch_dim(&self) -> usize {
        INPUT_ROWS * self.l_feature
    }
}

/// Per-expert capacity `⌈c·B/N⌉`, identical for every expert.
pub fn expert_capacity(cfg: &MoeConfig, batch: usize) -> usize {
    assert!(batch >= 1, "batch must be non-empty");
    let raw = cfg.capacity_factor * batch as f64 / cfg.n_experts as f64;
    // Guard against products like 1.25·32/8 landing a hair above an integer.
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(n: usize, c: f64) -> MoeConfig {
        MoeConfig {
            n_experts: n,
            top_k: 1,
            capacity_factor: c,
            ..MoeConfig::default()
        }
    }

    #[test]
    fn capacity_hand_cases() {
        assert_eq!(expert_capacity(&cfg(8, 1.25), 32), 5);
        assert_eq!(expert_capacity(&cfg(8, 1.0), 8), 1);
        assert_eq!(expert_capacity(&cfg(4, 2.0), 7), 4);
        assert_eq!(expert_capacity(&cfg(8, 1.25), 1), 1);
    }

    #[test]
    fn default_is_valid() {
        MoeConfig::default().validate().unwrap();
    }

    #[test]
    fn rejects_k_not_below_n() {
        let c = MoeConfig {
            top_k: 8,
            ..MoeConfig::default()
        };
        let msg = c.validate().unwrap_err().to_string();
        assert!(msg.contains("K < N"), "{msg}");
    }

    #[test]
    fn rejects_patch_product_mismatch() {
        let c = MoeConfig {
            n_patch: 25,
            ..MoeConfig::default()
        };
        assert!(c.validate().is_err());
        let c = MoeConfig {
            n_patch: 25,
            l_feature: 8,
            ..MoeConfig::default()
        };
        c.validate().unwrap();
    }

    #[test]
    fn entries_round_trip_through_set() {
        let c = MoeConfig {
            capacity_factor: 1.1,
            aux_weight: 0.0,
            n_experts: 5,
            ..MoeConfig::default()
        };
        let mut d = MoeConfig::default();
        for (k, v) in c.entries() {
            d.set(k, &v).unwrap();
        }
        assert_eq!(c, d);
        assert!(d.set("width", "3").is_err());
        assert!(d.set("N", "-1").is_err());
    }

    #[test]
    fn rejects_small_capacity_factor() {
        assert!(cfg(8, 0.9).validate().is_err());
    }
}
