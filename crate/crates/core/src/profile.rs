use std::time::Duration;

/// Runtime categories of the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Component {
    /// Activation quantization and every GQMV call.
    Matrix,
    Attention,
    SwiGlu,
    Rope,
    RmsNorm,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::Matrix,
        Component::Attention,
        Component::SwiGlu,
        Component::Rope,
        Component::RmsNorm,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Component::Matrix => "matrix computation",
            Component::Attention => "multi-head attention",
            Component::SwiGlu => "swiglu",
            Component::Rope => "rope",
            Component::RmsNorm => "rmsnorm",
        }
    }

    /// Column name used in CSV reports.
    pub fn key(self) -> &'static str {
        match self {
            Component::Matrix => "matrix",
            Component::Attention => "attention",
            Component::SwiGlu => "swiglu",
            Component::Rope => "rope",
            Component::RmsNorm => "rmsnorm",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Inclusive timers around the forward-pass call sites, plus time spent
/// blocked on layer weights (reported separately, not a compute category).
#[derive(Debug, Clone, Default)]
pub struct Profile {
    totals: [Duration; 5],
    pub weight_wait: Duration,
    /// Time spent computing the classifier projection (logits), per call.
    pub logits: Vec<Duration>,
}

impl Profile {
    #[inline]
    pub fn add(&mut self, c: Component, d: Duration) {
        self.totals[c.index()] += d;
    }

    pub fn total(&self, c: Component) -> Duration {
        self.totals[c.index()]
    }

    pub fn compute_total(&self) -> Duration {
        self.totals.iter().sum()
    }

    /// Share of compute time per category; sums to 1 when any time was
    /// recorded, all zeros otherwise.
    pub fn fractions(&self) -> [(Component, f64); 5] {
        let total = self.compute_total().as_secs_f64();
        Component::ALL.map(|c| {
            let f = if total > 0.0 {
                self.total(c).as_secs_f64() / total
            } else {
                0.0
            };
            (c, f)
        })
    }

    pub fn reset(&mut self) {
        *self = Profile::default();
    }
}
