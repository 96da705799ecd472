//! Long-form generation beyond the model's duration range.
//!
//! The target duration is covered by segments of the model's maximum
//! length (the last one shortened to end exactly at the target), adjacent
//! segments overlapping by exactly `overlap_s` seconds. Three mechanisms
//! keep the result coherent:
//!
//! - composition: at every sampler step the predicted-clean latents of
//!   adjacent segments are reconciled on their shared overlap (earlier
//!   half from the predecessor, later half from the successor, written
//!   into both);
//! - reference guidance: every non-reference segment's self-attention
//!   output is pulled toward attention over the reference segment's
//!   keys/values with weight `lambda`;
//! - trim-and-concatenate: decoded waveforms are joined with the same
//!   half-overlap split, yielding exactly the requested duration.

use crate::codec::{Codec, Latent};
use crate::control::{self, ControlConfig, TimingLayout};
use crate::diffusion::{sample, NoiseSchedule, SamplerConfig};
use crate::dit::{AttnSite, DitModel, HookSet, TextCondition};
use crate::error::{Error, Result};
use crate::numerics::Tensor2D;
use crate::pipeline::BatchConditions;
use crate::plan::{PlanWindow, WindowPlan};

/// One long-form segment: global time span and its caption.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub start_s: f64,
    pub end_s: f64,
    pub caption: String,
}

/// Overlapping decomposition of a long duration.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentLayout {
    pub total_s: f64,
    pub seg_len_s: f64,
    pub overlap_s: f64,
    pub frame_rate: f64,
    pub segments: Vec<Segment>,
}

impl SegmentLayout {
    pub fn overlap_frames(&self) -> usize {
        control::frame_of(self.overlap_s, self.frame_rate)
    }

    pub fn start_frame(&self, i: usize) -> usize {
        control::frame_of(self.segments[i].start_s, self.frame_rate)
    }

    pub fn end_frame(&self, i: usize) -> usize {
        control::frame_of(self.segments[i].end_s, self.frame_rate)
    }

    pub fn active_frames(&self, i: usize) -> usize {
        self.end_frame(i) - self.start_frame(i)
    }

    pub fn total_frames(&self) -> usize {
        control::frame_of(self.total_s, self.frame_rate)
    }
}

/// Splits a plan for `total_s > max_seconds` into segments of length
/// `max_seconds` (the last shortened to end at the target) overlapping by
/// exactly `overlap_s`. Each segment's caption joins the recaptions of the
/// plan windows it intersects, in time order.
pub fn plan_segments(
    plan: &WindowPlan,
    max_seconds: f64,
    overlap_s: f64,
    frame_rate: f64,
) -> Result<SegmentLayout> {
    plan.validate()?;
    let total_s = plan.total_s;
    if !(total_s > max_seconds) {
        return Err(Error::range(format!(
            "long-form needs total {total_s}s > segment length {max_seconds}s"
        )));
    }
    if !(overlap_s > 0.0) || overlap_s >= max_seconds {
        return Err(Error::range(format!(
            "overlap {overlap_s}s must lie in (0, {max_seconds})"
        )));
    }
    let ov_frames_f = overlap_s * frame_rate;
    let ov_frames = control::frame_of(overlap_s, frame_rate);
    if (ov_frames_f - ov_frames as f64).abs() > 1e-9 || ov_frames % 2 != 0 || ov_frames == 0 {
        return Err(Error::range(format!(
            "overlap of {overlap_s}s is {ov_frames_f} frames at {frame_rate} frames/s; \
             it must be a positive even whole number of frames"
        )));
    }
    let stride = max_seconds - overlap_s;
    let n = ((total_s - overlap_s) / stride).ceil() as usize;
    let mut segments = Vec::with_capacity(n);
    for i in 0..n {
        let start_s = i as f64 * stride;
        let end_s = if i + 1 == n {
            total_s
        } else {
            start_s + max_seconds
        };
        let caption = segment_caption(plan, start_s, end_s);
        segments.push(Segment {
            start_s,
            end_s,
            caption,
        });
    }
    Ok(SegmentLayout {
        total_s,
        seg_len_s: max_seconds,
        overlap_s,
        frame_rate,
        segments,
    })
}

fn segment_caption(plan: &WindowPlan, start_s: f64, end_s: f64) -> String {
    let mut parts: Vec<&str> = Vec::new();
    for w in &plan.windows {
        if w.end_s > start_s + 1e-9 && w.start_s < end_s - 1e-9 {
            let r = w.recaption.as_str();
            if parts.last() != Some(&r) {
                parts.push(r);
            }
        }
    }
    if parts.is_empty() {
        plan.global_caption.clone()
    } else {
        parts.join(" then ")
    }
}

/// Restricts a plan to `[start_s, end_s]`, shifted to segment-local time.
/// Windows crossing the boundary are split at it.
pub fn clip_plan(plan: &WindowPlan, start_s: f64, end_s: f64) -> WindowPlan {
    let mut windows = Vec::new();
    for w in &plan.windows {
        let lo = w.start_s.max(start_s);
        let hi = w.end_s.min(end_s);
        if hi - lo > 1e-9 {
            windows.push(PlanWindow {
                start_s: lo - start_s,
                end_s: hi - start_s,
                events: w.events.clone(),
                recaption: w.recaption.clone(),
            });
        }
    }
    // Re-pin the edges so the clipped plan partitions exactly.
    if let Some(first) = windows.first_mut() {
        first.start_s = 0.0;
    }
    let total = end_s - start_s;
    if let Some(last) = windows.last_mut() {
        last.end_s = total;
    }
    for i in 1..windows.len() {
        let prev_end = windows[i - 1].end_s;
        windows[i].start_s = prev_end;
    }
    WindowPlan {
        total_s: total,
        global_caption: segment_caption(plan, start_s, end_s),
        windows,
    }
}

/// Reconciles adjacent segments' latents on their shared overlap: the
/// earlier half keeps the predecessor's frames, the later half the
/// successor's, and the composite is written into both segments. After the
/// call, frames representing the same global instant agree batch-wide.
pub fn compose_latents(batch: &mut [Tensor2D], layout: &SegmentLayout) -> Result<()> {
    let n = layout.segments.len();
    if batch.len() != n {
        return Err(Error::shape(format!(
            "{} latents for {n} segments",
            batch.len()
        )));
    }
    for i in 0..n {
        if batch[i].rows() < layout.active_frames(i) {
            return Err(Error::shape(format!(
                "segment {i} latent has {} rows, needs {}",
                batch[i].rows(),
                layout.active_frames(i)
            )));
        }
    }
    for i in 0..n.saturating_sub(1) {
        let j = i + 1;
        let ov = layout.end_frame(i) as isize - layout.start_frame(j) as isize;
        if ov <= 0 || ov % 2 != 0 {
            return Err(Error::shape(format!(
                "segments {i}/{j} overlap by {ov} frames; need a positive even overlap"
            )));
        }
        let ov = ov as usize;
        let half = ov / 2;
        let active_i = layout.active_frames(i);
        let cols = batch[i].cols();
        let mut composite = Tensor2D::zeros(ov, cols);
        for r in 0..ov {
            let src = if r < half {
                batch[i].row(active_i - ov + r)
            } else {
                batch[j].row(r)
            };
            composite.row_mut(r).copy_from_slice(src);
        }
        for r in 0..ov {
            batch[i]
                .row_mut(active_i - ov + r)
                .copy_from_slice(composite.row(r));
            batch[j].row_mut(r).copy_from_slice(composite.row(r));
        }
    }
    Ok(())
}

/// Reference-guided self-attention output: attention of `q` over the
/// reference keys/values, blended with the original output at weight
/// `lambda`. `lambda = 0` returns `o` bitwise.
pub fn reference_guidance(
    attend: &dyn Fn(&Tensor2D, &Tensor2D, &Tensor2D) -> Result<Tensor2D>,
    q: &Tensor2D,
    o: &Tensor2D,
    k_ref: &Tensor2D,
    v_ref: &Tensor2D,
    lambda: f64,
) -> Result<Tensor2D> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::range(format!("lambda {lambda} outside [0, 1]")));
    }
    if lambda == 0.0 {
        return Ok(o.clone());
    }
    let guided = attend(q, k_ref, v_ref)?;
    if guided.rows() != o.rows() || guided.cols() != o.cols() {
        return Err(Error::shape(format!(
            "guided output {}x{} vs original {}x{}",
            guided.rows(),
            guided.cols(),
            o.rows(),
            o.cols()
        )));
    }
    Ok(guided.scale(lambda).add(&o.scale(1.0 - lambda))?)
}

/// Joins decoded segment waveforms, keeping one copy of each overlap using
/// the same half-split as latent composition, then resizing to exactly
/// `round(total_s * sample_rate)` samples.
pub fn trim_concat(
    segments: &[Vec<f64>],
    layout: &SegmentLayout,
    sample_rate: u32,
) -> Result<Vec<f64>> {
    let n = layout.segments.len();
    if segments.len() != n {
        return Err(Error::shape(format!(
            "{} waveforms for {n} segments",
            segments.len()
        )));
    }
    let spf = (sample_rate as f64 / layout.frame_rate).round() as usize;
    for (i, s) in segments.iter().enumerate() {
        let want = layout.active_frames(i) * spf;
        if s.len() != want {
            return Err(Error::shape(format!(
                "segment {i} duration mismatch: {} samples, expected {want}",
                s.len()
            )));
        }
    }
    let mut out = Vec::new();
    for (i, s) in segments.iter().enumerate() {
        let head = if i == 0 {
            0
        } else {
            let ov = layout.end_frame(i - 1) - layout.start_frame(i);
            ov / 2 * spf
        };
        let tail = if i + 1 == n {
            s.len()
        } else {
            let ov = layout.end_frame(i) - layout.start_frame(i + 1);
            s.len() - ov / 2 * spf
        };
        out.extend_from_slice(&s[head..tail]);
    }
    let target = (layout.total_s * sample_rate as f64).round() as usize;
    out.resize(target, 0.0);
    Ok(out)
}

/// Long-form generation settings.
#[derive(Debug, Clone)]
pub struct LongFormConfig {
    pub overlap_s: f64,
    pub lambda: f64,
    /// Per-step overlap composition on/off.
    pub compose: bool,
    pub control: Option<ControlConfig>,
    pub sampler: SamplerConfig,
}

impl Default for LongFormConfig {
    fn default() -> Self {
        LongFormConfig {
            overlap_s: 2.0,
            lambda: 0.2,
            compose: true,
            control: Some(ControlConfig::default()),
            sampler: SamplerConfig::default(),
        }
    }
}

/// Output of a long-form run.
pub struct LongFormOutput {
    pub waveform: Vec<f64>,
    pub segment_waveforms: Vec<Vec<f64>>,
    pub layout: SegmentLayout,
}

/// Runs the full long-form pipeline: segment the plan, denoise all
/// segments in lockstep (attention control per segment where its sub-plan
/// has several windows, reference guidance from segment 0, per-step
/// composition), decode, trim and concatenate.
pub fn generate_long(
    model: &DitModel,
    codec: &Codec,
    schedule: &NoiseSchedule,
    plan: &WindowPlan,
    cfg: &LongFormConfig,
) -> Result<LongFormOutput> {
    let mcfg = model.config();
    let fr = mcfg.frame_rate;
    let layout = plan_segments(plan, mcfg.max_seconds(), cfg.overlap_s, fr)?;
    let n_seg = layout.segments.len();

    // Assemble the batch: per segment, a base element plus sub-latents when
    // the segment's clipped plan has more than one window.
    let mut conds: Vec<TextCondition> = Vec::new();
    let mut durations: Vec<f64> = Vec::new();
    let mut base_indices: Vec<usize> = Vec::new();
    let mut control_layouts: Vec<TimingLayout> = Vec::new();
    let mut frames = 0usize;
    for i in 0..n_seg {
        let seg = &layout.segments[i];
        let active = layout.active_frames(i);
        frames = frames.max(active);
        let base_index = conds.len();
        base_indices.push(base_index);
        conds.push(model.embed_text(&seg.caption)?);
        durations.push(active as f64 / fr);
        if let Some(ctrl) = &cfg.control {
            let sub_plan = clip_plan(plan, seg.start_s, seg.end_s);
            let sub_layout = control::layout_from_plan(&sub_plan, fr)?;
            if sub_layout.sub_count() >= 2 {
                for w in &sub_layout.windows {
                    conds.push(model.embed_text(&sub_plan.windows[w.plan_index].recaption)?);
                    durations.push(w.len() as f64 / fr);
                }
                control_layouts.push(sub_layout.with_batch_offset(base_index));
                let _ = ctrl;
            }
        }
    }
    let batch_len = conds.len();

    // Hooks: decoupling, aggregation, then reference guidance at self sites.
    let mut hooks = HookSet::new();
    let ctrl = cfg.control.clone().unwrap_or_default();
    ctrl.validate()?;
    if !control_layouts.is_empty() && ctrl.decouple_enabled {
        let ls = control_layouts.clone();
        hooks.install_pre_query(
            AttnSite::CrossAttn,
            Box::new(move |_, qs| {
                for l in &ls {
                    control::decouple_queries(qs, l)?;
                }
                Ok(())
            }),
        )?;
    }
    if !control_layouts.is_empty() && ctrl.aggregate_cross {
        let ls = control_layouts.clone();
        let alpha = ctrl.alpha;
        hooks.install_post_output(
            AttnSite::CrossAttn,
            Box::new(move |_, _, outs| {
                for l in &ls {
                    control::aggregate_outputs(outs, l, alpha)?;
                }
                Ok(())
            }),
        )?;
    }
    {
        let ls = control_layouts.clone();
        let base_keep = 1.0 - ctrl.beta;
        let aggregate_self = !control_layouts.is_empty() && ctrl.aggregate_self;
        let lambda = cfg.lambda;
        let targets: Vec<usize> = base_indices[1..].to_vec();
        let ref_index = base_indices[0];
        hooks.install_post_output(
            AttnSite::SelfAttn,
            Box::new(move |_, ctx, outs| {
                if aggregate_self {
                    for l in &ls {
                        control::aggregate_outputs(outs, l, base_keep)?;
                    }
                }
                if lambda > 0.0 {
                    // Reference = segment 0's own keys/values at this step
                    // and layer, restricted to its active prefix.
                    let k_ref = ctx.k[ref_index].slice_rows(0..ctx.key_len[ref_index]);
                    let v_ref = ctx.v[ref_index].slice_rows(0..ctx.key_len[ref_index]);
                    for &t in &targets {
                        outs[t] = reference_guidance(
                            ctx.attend,
                            &ctx.q[t],
                            &outs[t],
                            &k_ref,
                            &v_ref,
                            lambda,
                        )?;
                    }
                }
                Ok(())
            }),
        )?;
    }

    // Per-step composition reconciles the segment base latents.
    let compose = cfg.compose;
    let seg_layout = layout.clone();
    let bidx = base_indices.clone();
    let mut callback = move |_: usize, _: usize, pred: &mut Vec<Tensor2D>| -> Result<()> {
        if !compose {
            return Ok(());
        }
        let mut bases: Vec<Tensor2D> = bidx
            .iter()
            .map(|&b| std::mem::replace(&mut pred[b], Tensor2D::zeros(0, 0)))
            .collect();
        let result = compose_latents(&mut bases, &seg_layout);
        for (&b, t) in bidx.iter().zip(bases) {
            pred[b] = t;
        }
        result
    };

    let batch = BatchConditions {
        conds,
        durations,
        guidance_scale: cfg.sampler.guidance_scale,
    };
    let mut predict =
        |xs: &[Tensor2D], t: usize| -> Result<Vec<Tensor2D>> { batch.predict(model, xs, t, &mut hooks) };
    let latents = sample(
        schedule,
        batch_len,
        frames,
        mcfg.latent_channels,
        &cfg.sampler,
        &mut predict,
        &mut callback,
    )?;

    // Decode each segment's active prefix and join.
    let mut segment_waveforms = Vec::with_capacity(n_seg);
    for (i, &b) in base_indices.iter().enumerate() {
        let active = layout.active_frames(i);
        let tokens = latents[b].slice_rows(0..active);
        let latent = Latent::from_tokens(&tokens, fr);
        segment_waveforms.push(codec.decode_model(&latent)?);
    }
    let waveform = trim_concat(&segment_waveforms, &layout, codec.config().sample_rate)?;
    Ok(LongFormOutput {
        waveform,
        segment_waveforms,
        layout,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use crate::plan::make_plan_template;

    fn plan_for(total_s: f64) -> WindowPlan {
        make_plan_template("steady rain", "", total_s).unwrap()
    }

    #[test]
    fn segments_for_26_seconds() {
        let layout = plan_segments(&plan_for(26.0), 10.0, 2.0, 25.0).unwrap();
        let starts: Vec<f64> = layout.segments.iter().map(|s| s.start_s).collect();
        assert_eq!(starts, vec![0.0, 8.0, 16.0]);
        assert_eq!(layout.segments.last().unwrap().end_s, 26.0);
        for pair in layout.segments.windows(2) {
            assert!((pair[0].end_s - pair[1].start_s - 2.0).abs() < 1e-9);
        }
    }

    #[test]
    fn segments_for_90_seconds() {
        let layout = plan_segments(&plan_for(90.0), 10.0, 2.0, 25.0).unwrap();
        assert_eq!(layout.segments.len(), 11);
        assert_eq!(layout.segments.last().unwrap().end_s, 90.0);
    }

    #[test]
    fn minimal_long_form_is_two_right_aligned_segments() {
        let layout = plan_segments(&plan_for(10.1), 10.0, 2.0, 25.0).unwrap();
        assert_eq!(layout.segments.len(), 2);
        assert_eq!(layout.segments[1].start_s, 8.0);
        assert!((layout.segments[1].end_s - 10.1).abs() < 1e-12);
        // Overlap still exactly epsilon.
        assert!((layout.segments[0].end_s - layout.segments[1].start_s - 2.0).abs() < 1e-9);
    }

    #[test]
    fn segment_planning_rejects_bad_inputs() {
        assert!(plan_segments(&plan_for(8.0), 10.0, 2.0, 25.0).is_err());
        let p26 = plan_for(26.0);
        assert!(plan_segments(&p26, 10.0, 10.0, 25.0).is_err());
        assert!(plan_segments(&p26, 10.0, 12.0, 25.0).is_err());
        // 1.98 s at 25 frames/s is 49.5 frames: not a whole even count.
        assert!(plan_segments(&p26, 10.0, 1.98, 25.0).is_err());
    }

    #[test]
    fn segment_captions_join_intersecting_windows() {
        let plan = make_plan_template(
            "city then storm",
            "city hum <0,13>\nstorm <13,26>",
            26.0,
        )
        .unwrap();
        let layout = plan_segments(&plan, 10.0, 2.0, 25.0).unwrap();
        assert_eq!(layout.segments[0].caption, "city hum");
        assert_eq!(layout.segments[1].caption, "city hum then storm");
        assert_eq!(layout.segments[2].caption, "storm");
    }

    #[test]
    fn clip_plan_splits_windows_at_boundaries() {
        let plan = make_plan_template("a and b", "a <0,13>\nb <13,26>", 26.0).unwrap();
        let clipped = clip_plan(&plan, 8.0, 18.0);
        clipped.validate().unwrap();
        assert_eq!(clipped.windows.len(), 2);
        assert_eq!(clipped.windows[0].start_s, 0.0);
        assert!((clipped.windows[0].end_s - 5.0).abs() < 1e-9);
        assert!((clipped.windows[1].end_s - 10.0).abs() < 1e-9);
        assert_eq!(clipped.windows[0].recaption, "a");
        assert_eq!(clipped.windows[1].recaption, "b");
    }

    fn const_tensor(rows: usize, cols: usize, v: f64) -> Tensor2D {
        Tensor2D::from_fn(rows, cols, |_, _| v)
    }

    #[test]
    fn compose_takes_tail_then_head() {
        let layout = plan_segments(&plan_for(26.0), 10.0, 2.0, 25.0).unwrap();
        let mut batch = vec![
            const_tensor(250, 4, 1.0),
            const_tensor(250, 4, 0.0),
            const_tensor(250, 4, 2.0),
        ];
        compose_latents(&mut batch, &layout).unwrap();
        // First overlap (frames 200..250 of segment 0 = frames 0..50 of
        // segment 1): earlier 25 frames from segment 0 (1s), later 25 from
        // segment 1 (0s). Written into both.
        for r in 0..25 {
            assert_eq!(batch[0].get(200 + r, 0), 1.0);
            assert_eq!(batch[1].get(r, 0), 1.0);
        }
        for r in 25..50 {
            assert_eq!(batch[0].get(200 + r, 0), 0.0);
            assert_eq!(batch[1].get(r, 0), 0.0);
        }
    }

    #[test]
    fn compose_single_segment_is_noop() {
        let plan = plan_for(12.0);
        let layout = plan_segments(&plan, 10.0, 2.0, 25.0).unwrap();
        assert_eq!(layout.segments.len(), 2);
        // Build a single-segment layout directly for the no-op case.
        let single = SegmentLayout {
            total_s: 10.0,
            seg_len_s: 10.0,
            overlap_s: 2.0,
            frame_rate: 25.0,
            segments: vec![Segment {
                start_s: 0.0,
                end_s: 10.0,
                caption: "x".into(),
            }],
        };
        let mut rng = SeededRng::new(8);
        let mut batch = vec![rng.normal_tensor(250, 4)];
        let before = batch.clone();
        compose_latents(&mut batch, &single).unwrap();
        assert_eq!(batch, before);
    }

    #[test]
    fn compose_is_idempotent_and_syncs_shared_frames() {
        let layout = plan_segments(&plan_for(26.0), 10.0, 2.0, 25.0).unwrap();
        let mut rng = SeededRng::new(9);
        let mut batch: Vec<Tensor2D> = (0..3).map(|_| rng.normal_tensor(250, 4)).collect();
        compose_latents(&mut batch, &layout).unwrap();
        // Shared global frames agree bitwise.
        for i in 0..2 {
            let ov = layout.end_frame(i) - layout.start_frame(i + 1);
            let active_i = layout.active_frames(i);
            for r in 0..ov {
                assert_eq!(batch[i].row(active_i - ov + r), batch[i + 1].row(r));
            }
        }
        let once = batch.clone();
        compose_latents(&mut batch, &layout).unwrap();
        assert_eq!(batch, once, "composition must be idempotent");
    }

    #[test]
    fn reference_guidance_endpoints_and_affinity() {
        let attend = |q: &Tensor2D, k: &Tensor2D, v: &Tensor2D| crate::numerics::attention(q, k, v);
        let mut rng = SeededRng::new(10);
        let q = rng.normal_tensor(6, 4);
        let o = rng.normal_tensor(6, 4);
        let k_ref = rng.normal_tensor(5, 4);
        let v_ref = rng.normal_tensor(5, 4);

        let at_zero = reference_guidance(&attend, &q, &o, &k_ref, &v_ref, 0.0).unwrap();
        assert_eq!(at_zero, o, "lambda = 0 must be bitwise identity");

        let at_one = reference_guidance(&attend, &q, &o, &k_ref, &v_ref, 1.0).unwrap();
        let direct = attend(&q, &k_ref, &v_ref).unwrap();
        assert!(at_one.max_abs_diff(&direct) < 1e-15);

        // o'(lambda) - o is proportional to lambda.
        let deltas: Vec<Tensor2D> = [0.25, 0.5, 1.0]
            .iter()
            .map(|&l| {
                reference_guidance(&attend, &q, &o, &k_ref, &v_ref, l)
                    .unwrap()
                    .sub(&o)
                    .unwrap()
                    .scale(1.0 / l)
            })
            .collect();
        assert!(deltas[0].max_abs_diff(&deltas[1]) < 1e-9);
        assert!(deltas[1].max_abs_diff(&deltas[2]) < 1e-9);

        assert!(reference_guidance(&attend, &q, &o, &k_ref, &v_ref, 1.5).is_err());
    }

    #[test]
    fn trim_concat_lengths_and_split() {
        let layout = plan_segments(&plan_for(26.0), 10.0, 2.0, 25.0).unwrap();
        let spf = 160;
        let segs: Vec<Vec<f64>> = (0..3)
            .map(|i| vec![i as f64; layout.active_frames(i) * spf])
            .collect();
        let out = trim_concat(&segs, &layout, 4000).unwrap();
        assert_eq!(out.len(), 26 * 4000);
        // Boundary between segments 0 and 1 sits at 9 s: the last epsilon/2
        // of segment 0's overlap is kept, then segment 1 takes over.
        let boundary = 9 * 4000;
        assert_eq!(out[boundary - 1], 0.0);
        assert_eq!(out[boundary], 1.0);
        let boundary2 = 17 * 4000;
        assert_eq!(out[boundary2 - 1], 1.0);
        assert_eq!(out[boundary2], 2.0);
    }

    #[test]
    fn trim_concat_single_segment_identity() {
        let single = SegmentLayout {
            total_s: 10.0,
            seg_len_s: 10.0,
            overlap_s: 2.0,
            frame_rate: 25.0,
            segments: vec![Segment {
                start_s: 0.0,
                end_s: 10.0,
                caption: "x".into(),
            }],
        };
        let seg = vec![0.25; 250 * 160];
        let out = trim_concat(&[seg.clone()], &single, 4000).unwrap();
        assert_eq!(out, seg);
    }

    #[test]
    fn trim_concat_length_property_over_random_layouts() {
        let mut rng = SeededRng::new(11);
        for _ in 0..200 {
            // Durations on the 0.2 s grid, overlaps an even frame count.
            let total_s = 10.2 + (rng.uniform_usize(400) as f64) * 0.2;
            let ov_frames = 2 * (1 + rng.uniform_usize(50));
            let overlap_s = ov_frames as f64 / 25.0;
            if overlap_s >= 10.0 {
                continue;
            }
            let plan = plan_for(total_s);
            let layout = plan_segments(&plan, 10.0, overlap_s, 25.0).unwrap();
            let segs: Vec<Vec<f64>> = (0..layout.segments.len())
                .map(|i| vec![0.0; layout.active_frames(i) * 160])
                .collect();
            let out = trim_concat(&segs, &layout, 4000).unwrap();
            assert_eq!(
                out.len(),
                (total_s * 4000.0).round() as usize,
                "total_s {total_s}, overlap {overlap_s}"
            );
        }
    }

    #[test]
    fn trim_concat_rejects_wrong_segment_lengths() {
        let layout = plan_segments(&plan_for(26.0), 10.0, 2.0, 25.0).unwrap();
        let segs: Vec<Vec<f64>> = vec![vec![0.0; 10]; 3];
        assert!(trim_concat(&segs, &layout, 4000).is_err());
    }
}
