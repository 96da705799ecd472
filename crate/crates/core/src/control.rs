//! Decoupling and aggregating attention control over a 1 + k batch.
//!
//! Batch element `base` is conditioned on the overall caption; each of the
//! k sub-latents is conditioned on one window's recaption and duration.
//! Decoupling rewrites sub-latent queries at cross-attention so each
//! sub-latent's active prefix attends from the base's queries for its
//! window (base-to-sub flow). Aggregation stitches the sub-latents' active
//! attention outputs onto the base's timeline and blends them into the base
//! output (sub-to-base flow): at cross sites the base keeps weight `alpha`,
//! at self sites the stitched output gets weight `beta`.

use crate::dit::{AttnSite, HookPhase, HookSet};
use crate::error::{Error, Result};
use crate::numerics::Tensor2D;
use crate::plan::WindowPlan;

/// One window's image in frame space.
#[derive(Debug, Clone, PartialEq)]
pub struct LayoutWindow {
    pub start_frame: usize,
    pub end_frame: usize,
    /// Batch position of the sub-latent generating this window.
    pub batch_index: usize,
    /// Index of the originating plan window.
    pub plan_index: usize,
}

impl LayoutWindow {
    pub fn len(&self) -> usize {
        self.end_frame - self.start_frame
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Frame-space layout of a window plan for one 1 + k batch.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingLayout {
    pub frame_rate: f64,
    /// Batch position of the base latent.
    pub base_index: usize,
    /// Active prefix length of the base latent, in frames.
    pub base_active_frames: usize,
    pub windows: Vec<LayoutWindow>,
}

/// Round-half-up conversion of seconds to a frame index.
pub fn frame_of(seconds: f64, frame_rate: f64) -> usize {
    (seconds * frame_rate + 0.5).floor() as usize
}

/// Converts a plan's window boundaries to frame ranges. Windows that
/// collapse to zero frames after rounding merge into their left neighbour
/// (the shared rounded boundary absorbs them). Batch indices are assigned
/// in window order, starting at 1 (slot 0 is the base).
pub fn layout_from_plan(plan: &WindowPlan, frame_rate: f64) -> Result<TimingLayout> {
    plan.validate()?;
    if !(frame_rate > 0.0) {
        return Err(Error::range(format!("frame rate {frame_rate} must be positive")));
    }
    let base_active_frames = frame_of(plan.total_s, frame_rate);
    if base_active_frames == 0 {
        return Err(Error::range(format!(
            "plan of {}s yields no frames at {frame_rate} frames/s",
            plan.total_s
        )));
    }
    let mut boundaries: Vec<usize> = Vec::with_capacity(plan.windows.len() + 1);
    boundaries.push(0);
    for w in &plan.windows {
        boundaries.push(frame_of(w.end_s, frame_rate));
    }
    *boundaries.last_mut().unwrap() = base_active_frames;
    let mut windows = Vec::new();
    let mut batch_index = 1;
    for (j, pair) in boundaries.windows(2).enumerate() {
        let (start, end) = (pair[0], pair[1]);
        if end <= start {
            continue; // merged left
        }
        windows.push(LayoutWindow {
            start_frame: start,
            end_frame: end,
            batch_index,
            plan_index: j,
        });
        batch_index += 1;
    }
    if windows.is_empty() {
        return Err(Error::range("no non-degenerate windows in plan"));
    }
    Ok(TimingLayout {
        frame_rate,
        base_index: 0,
        base_active_frames,
        windows,
    })
}

impl TimingLayout {
    /// Number of sub-latents (k).
    pub fn sub_count(&self) -> usize {
        self.windows.len()
    }

    /// Shifts all batch positions by `offset` (for multi-segment batches).
    pub fn with_batch_offset(mut self, offset: usize) -> Self {
        self.base_index += offset;
        for w in &mut self.windows {
            w.batch_index += offset;
        }
        self
    }

    fn check_batch(&self, batch: &[Tensor2D]) -> Result<()> {
        let max_idx = self
            .windows
            .iter()
            .map(|w| w.batch_index)
            .max()
            .unwrap_or(self.base_index)
            .max(self.base_index);
        if max_idx >= batch.len() {
            return Err(Error::shape(format!(
                "layout addresses batch element {max_idx} but batch has {}",
                batch.len()
            )));
        }
        if batch[self.base_index].rows() < self.base_active_frames {
            return Err(Error::shape(format!(
                "base has {} rows, layout needs {}",
                batch[self.base_index].rows(),
                self.base_active_frames
            )));
        }
        for w in &self.windows {
            if batch[w.batch_index].rows() < w.len() {
                return Err(Error::shape(format!(
                    "sub-latent {} has {} rows, window needs {}",
                    w.batch_index,
                    batch[w.batch_index].rows(),
                    w.len()
                )));
            }
        }
        Ok(())
    }

    fn check_tiling(&self) -> Result<()> {
        let total: usize = self.windows.iter().map(|w| w.len()).sum();
        if total != self.base_active_frames {
            return Err(Error::shape(format!(
                "window lengths sum to {total}, base active length is {}",
                self.base_active_frames
            )));
        }
        let mut sorted: Vec<&LayoutWindow> = self.windows.iter().collect();
        sorted.sort_by_key(|w| w.start_frame);
        let mut cursor = 0;
        for w in sorted {
            if w.start_frame != cursor {
                return Err(Error::shape(format!(
                    "windows do not tile the base prefix at frame {cursor}"
                )));
            }
            cursor = w.end_frame;
        }
        Ok(())
    }
}

/// Fusion and enablement knobs.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlConfig {
    /// Cross-attention fusion ratio: weight kept by the base output.
    pub alpha: f64,
    /// Self-attention fusion ratio: weight given to the stitched output.
    pub beta: f64,
    pub decouple_enabled: bool,
    pub aggregate_self: bool,
    pub aggregate_cross: bool,
}

impl Default for ControlConfig {
    fn default() -> Self {
        ControlConfig {
            alpha: 0.2,
            beta: 0.8,
            decouple_enabled: true,
            aggregate_self: true,
            aggregate_cross: true,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::range(format!(
                "fusion ratios must lie in [0, 1]: alpha {}, beta {}",
                self.alpha, self.beta
            )));
        }
        Ok(())
    }
}

/// Base-to-sub query replacement: sub-latent `j`'s first `len_j` query rows
/// are overwritten with the base's rows for window `j`. Everything else,
/// including the base, is untouched.
pub fn decouple_queries(q_batch: &mut [Tensor2D], layout: &TimingLayout) -> Result<()> {
    layout.check_batch(q_batch)?;
    for w in &layout.windows {
        for (dst_row, src_row) in (0..w.len()).zip(w.start_frame..w.end_frame) {
            let src: Vec<f64> = q_batch[layout.base_index].row(src_row).to_vec();
            q_batch[w.batch_index].row_mut(dst_row).copy_from_slice(&src);
        }
    }
    Ok(())
}

/// Sub-to-base fusion: stitches each window's active segment onto the base
/// timeline and blends `ratio * base + (1 - ratio) * stitched` over the base
/// active prefix. Sub outputs and base padding are untouched.
pub fn aggregate_outputs(
    o_batch: &mut [Tensor2D],
    layout: &TimingLayout,
    ratio: f64,
) -> Result<()> {
    layout.check_batch(o_batch)?;
    layout.check_tiling()?;
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::range(format!("fusion ratio {ratio} outside [0, 1]")));
    }
    if ratio == 1.0 {
        return Ok(());
    }
    let cols = o_batch[layout.base_index].cols();
    let mut timing = Tensor2D::zeros(layout.base_active_frames, cols);
    for w in &layout.windows {
        for (src_row, dst_row) in (0..w.len()).zip(w.start_frame..w.end_frame) {
            timing
                .row_mut(dst_row)
                .copy_from_slice(o_batch[w.batch_index].row(src_row));
        }
    }
    let base = &mut o_batch[layout.base_index];
    for r in 0..layout.base_active_frames {
        let trow = timing.row(r);
        for (b, t) in base.row_mut(r).iter_mut().zip(trow) {
            *b = ratio * *b + (1.0 - ratio) * *t;
        }
    }
    Ok(())
}

/// Installs the control callbacks: decoupling at cross pre-query,
/// aggregation at cross and/or self post-output. Several layouts may be
/// active at once (one per long-form segment); each addresses its own batch
/// slice. Errors if a needed slot is already occupied.
pub fn install(hooks: &mut HookSet, layouts: &[TimingLayout], config: &ControlConfig) -> Result<()> {
    config.validate()?;
    for layout in layouts {
        layout.check_tiling()?;
    }
    if config.decouple_enabled {
        let ls = layouts.to_vec();
        hooks.install_pre_query(
            AttnSite::CrossAttn,
            Box::new(move |_, qs| {
                for l in &ls {
                    decouple_queries(qs, l)?;
                }
                Ok(())
            }),
        )?;
    }
    if config.aggregate_cross {
        let ls = layouts.to_vec();
        let alpha = config.alpha;
        hooks.install_post_output(
            AttnSite::CrossAttn,
            Box::new(move |_, _, outs| {
                for l in &ls {
                    aggregate_outputs(outs, l, alpha)?;
                }
                Ok(())
            }),
        )?;
    }
    if config.aggregate_self {
        let ls = layouts.to_vec();
        let base_keep = 1.0 - config.beta;
        hooks.install_post_output(
            AttnSite::SelfAttn,
            Box::new(move |_, _, outs| {
                for l in &ls {
                    aggregate_outputs(outs, l, base_keep)?;
                }
                Ok(())
            }),
        )?;
    }
    Ok(())
}

/// Removes the slots [`install`] occupies.
pub fn uninstall(hooks: &mut HookSet) {
    hooks.uninstall(AttnSite::CrossAttn, HookPhase::PreQuery);
    hooks.uninstall(AttnSite::CrossAttn, HookPhase::PostOutput);
    hooks.uninstall(AttnSite::SelfAttn, HookPhase::PostOutput);
}
