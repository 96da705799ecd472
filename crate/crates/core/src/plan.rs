//! Timing prompts and the non-overlapping window plan.
//!
//! A timing prompt says *what* should sound and *when* ("Frying. <0.0,8.0>").
//! The planner turns a noisy block of such prompts plus a global caption into
//! an ordered list of windows that partition `[0, M]`: boundaries are the
//! union of all start/end timestamps, each window collects the prompts that
//! span it, uncovered windows are filled from the caption's residual events,
//! and every window gets a single natural-language recaption.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use regex::Regex;

use crate::error::{Error, Result};

/// Timestamps closer than this many seconds are considered equal.
pub const MERGE_TOLERANCE_S: f64 = 1e-6;

/// One parsed timing constraint: `caption` should occur in `[start_s, end_s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingPrompt {
    pub caption: String,
    pub start_s: f64,
    pub end_s: f64,
}

/// One plan window with the events assigned to it and its recaption.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanWindow {
    pub start_s: f64,
    pub end_s: f64,
    pub events: Vec<String>,
    pub recaption: String,
}

impl PlanWindow {
    pub fn duration_s(&self) -> f64 {
        self.end_s - self.start_s
    }
}

/// Ordered, non-overlapping windows partitioning `[0, total_s]`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowPlan {
    pub total_s: f64,
    pub global_caption: String,
    pub windows: Vec<PlanWindow>,
}

impl WindowPlan {
    /// Checks the partition invariants: windows sorted, abutting exactly,
    /// covering `[0, total_s]`, at least one window.
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() {
            return Err(Error::range("plan has no windows"));
        }
        if self.windows[0].start_s != 0.0 {
            return Err(Error::range("first window does not start at 0"));
        }
        if self.windows.last().unwrap().end_s != self.total_s {
            return Err(Error::range("last window does not end at total_s"));
        }
        for w in &self.windows {
            if !(w.start_s < w.end_s) {
                return Err(Error::range(format!(
                    "empty window [{}, {}]",
                    w.start_s, w.end_s
                )));
            }
        }
        for pair in self.windows.windows(2) {
            if pair[0].end_s != pair[1].start_s {
                return Err(Error::range(format!(
                    "windows do not abut: {} vs {}",
                    pair[0].end_s, pair[1].start_s
                )));
            }
        }
        Ok(())
    }
}

struct IntervalPatterns {
    angle: Regex,
    from_to: Regex,
    tilde: Regex,
    unit_dash: Regex,
    bare_dash: Regex,
}

impl IntervalPatterns {
    fn new() -> Self {
        let num = r"(\d+(?:\.\d+)?)";
        let unit = r"(?:s\b|sec\b|secs\b|seconds?\b)";
        IntervalPatterns {
            angle: Regex::new(&format!(r"<\s*{num}\s*,\s*{num}\s*>")).unwrap(),
            from_to: Regex::new(&format!(
                r"(?i)\bfrom\s+{num}\s*{unit}?\s*to\s+{num}\s*{unit}?"
            ))
            .unwrap(),
            tilde: Regex::new(&format!(r"(?i){num}\s*[~∼]\s*{num}\s*{unit}?")).unwrap(),
            unit_dash: Regex::new(&format!(r"(?i){num}\s*{unit}\s*-\s*{num}\s*{unit}?")).unwrap(),
            bare_dash: Regex::new(&format!(r"(?i){num}\s*-\s*{num}\s*{unit}?")).unwrap(),
        }
    }

    /// Finds the first recognized interval in `entry`. Returns the matched
    /// span along with the parsed (start, end).
    fn find(&self, entry: &str) -> Option<(std::ops::Range<usize>, f64, f64)> {
        for re in [
            &self.angle,
            &self.from_to,
            &self.tilde,
            &self.unit_dash,
            &self.bare_dash,
        ] {
            if let Some(caps) = re.captures(entry) {
                let whole = caps.get(0).unwrap();
                let a: f64 = caps[1].parse().ok()?;
                let b: f64 = caps[2].parse().ok()?;
                return Some((whole.range(), a, b));
            }
        }
        None
    }
}

/// Splits a raw prompt block into entries. Entries are separated by
/// newlines or by commas that are not inside `<...>` brackets.
fn split_entries(raw: &str) -> Vec<String> {
    let mut entries = Vec::new();
    let mut current = String::new();
    let mut depth = 0usize;
    for ch in raw.chars() {
        match ch {
            '<' => {
                depth += 1;
                current.push(ch);
            }
            '>' => {
                depth = depth.saturating_sub(1);
                current.push(ch);
            }
            '\n' => {
                entries.push(std::mem::take(&mut current));
                depth = 0;
            }
            ',' if depth == 0 => {
                entries.push(std::mem::take(&mut current));
            }
            _ => current.push(ch),
        }
    }
    entries.push(current);
    entries
        .into_iter()
        .map(|e| e.trim().to_string())
        .filter(|e| !e.is_empty())
        .collect()
}

fn strip_punctuation(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| c.is_whitespace() || ".,;:!?".contains(c))
        .trim()
        .to_string()
}

/// Parses a noisy block of timing prompts.
///
/// Recognized interval syntaxes: `<a,b>`, `a s - b s`, `From a to b`,
/// `a ~ b sec` and `a-b`, with optional decimals and whitespace. The
/// caption is the remainder of the entry with trailing punctuation removed.
pub fn parse_prompts(raw: &str) -> Result<Vec<TimingPrompt>> {
    let patterns = IntervalPatterns::new();
    let entries = split_entries(raw);
    if entries.is_empty() {
        return Err(Error::parse("no timing entries found"));
    }
    let mut prompts = Vec::with_capacity(entries.len());
    for entry in &entries {
        let (span, start_s, end_s) = patterns
            .find(entry)
            .ok_or_else(|| Error::parse(format!("no recognizable interval in entry {entry:?}")))?;
        if start_s >= end_s {
            return Err(Error::range(format!(
                "interval start {start_s} >= end {end_s} in entry {entry:?}"
            )));
        }
        let mut caption = String::new();
        caption.push_str(&entry[..span.start]);
        caption.push(' ');
        caption.push_str(&entry[span.end..]);
        let caption = strip_punctuation(&caption);
        if caption.is_empty() {
            return Err(Error::parse(format!("empty caption in entry {entry:?}")));
        }
        prompts.push(TimingPrompt {
            caption,
            start_s,
            end_s,
        });
    }
    Ok(prompts)
}

/// Collects all distinct start/end timestamps, inserts 0 and `total_s`, and
/// returns them sorted. Timestamps closer than [`MERGE_TOLERANCE_S`] merge.
pub fn build_boundaries(prompts: &[TimingPrompt], total_s: f64) -> Result<Vec<f64>> {
    if !(total_s > 0.0) {
        return Err(Error::range(format!("total_s must be positive, got {total_s}")));
    }
    for p in prompts {
        if p.start_s < 0.0 || p.end_s > total_s + MERGE_TOLERANCE_S {
            return Err(Error::range(format!(
                "prompt {:?} interval [{}, {}] outside [0, {total_s}]",
                p.caption, p.start_s, p.end_s
            )));
        }
    }
    let snap = |t: f64| -> f64 {
        if t.abs() < MERGE_TOLERANCE_S {
            0.0
        } else if (t - total_s).abs() < MERGE_TOLERANCE_S {
            total_s
        } else {
            t
        }
    };
    let mut ts: Vec<f64> = vec![0.0, total_s];
    for p in prompts {
        ts.push(snap(p.start_s));
        ts.push(snap(p.end_s));
    }
    ts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut out: Vec<f64> = Vec::with_capacity(ts.len());
    for t in ts {
        match out.last() {
            Some(&last) if t - last < MERGE_TOLERANCE_S => {}
            _ => out.push(t),
        }
    }
    Ok(out)
}

/// Builds one window per boundary pair and assigns to it every prompt whose
/// interval spans the window. Event order follows input prompt order.
pub fn assign_window_events(boundaries: &[f64], prompts: &[TimingPrompt]) -> Vec<PlanWindow> {
    let tol = MERGE_TOLERANCE_S;
    boundaries
        .windows(2)
        .map(|pair| {
            let (lo, hi) = (pair[0], pair[1]);
            let events = prompts
                .iter()
                .filter(|p| p.start_s <= lo + tol && p.end_s >= hi - tol)
                .map(|p| p.caption.clone())
                .collect();
            PlanWindow {
                start_s: lo,
                end_s: hi,
                events,
                recaption: String::new(),
            }
        })
        .collect()
}

/// Supplies event assignments for empty windows, keyed by window index.
pub trait GapFiller {
    fn assignments(
        &mut self,
        plan: &WindowPlan,
        consumed: &[String],
    ) -> Result<BTreeMap<usize, Vec<String>>>;
}

/// Deterministic filler: empty windows receive the global caption's residual
/// events (phrases not covered by any timing prompt), or the caption itself
/// when nothing is left over.
pub struct ResidualFiller;

/// Splits a caption into event phrases at commas and connective words.
pub fn split_caption_events(caption: &str) -> Vec<String> {
    let connectives = ["and", "while", "with", "then"];
    let mut phrases = Vec::new();
    let mut current: Vec<&str> = Vec::new();
    for chunk in caption.split(',') {
        for word in chunk.split_whitespace() {
            let bare = word
                .trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase();
            if connectives.contains(&bare.as_str()) {
                if !current.is_empty() {
                    phrases.push(current.join(" "));
                    current.clear();
                }
            } else {
                current.push(word);
            }
        }
        if !current.is_empty() {
            phrases.push(current.join(" "));
            current.clear();
        }
    }
    phrases
        .into_iter()
        .map(|p| strip_punctuation(&p))
        .filter(|p| !p.is_empty())
        .collect()
}

/// Residual events of `caption`: phrases not matched (case-insensitive, by
/// substring in either direction) by any entry of `consumed`.
pub fn residual_events(caption: &str, consumed: &[String]) -> Vec<String> {
    split_caption_events(caption)
        .into_iter()
        .filter(|phrase| {
            let pl = phrase.to_lowercase();
            !consumed.iter().any(|c| {
                let cl = c.to_lowercase();
                pl.contains(&cl) || cl.contains(&pl)
            })
        })
        .collect()
}

impl GapFiller for ResidualFiller {
    fn assignments(
        &mut self,
        plan: &WindowPlan,
        consumed: &[String],
    ) -> Result<BTreeMap<usize, Vec<String>>> {
        let residual = residual_events(&plan.global_caption, consumed);
        let mut out = BTreeMap::new();
        for (i, w) in plan.windows.iter().enumerate() {
            if w.events.is_empty() {
                let events = if residual.is_empty() {
                    vec![plan.global_caption.clone()]
                } else {
                    residual.clone()
                };
                out.insert(i, events);
            }
        }
        Ok(out)
    }
}

/// Fills empty windows from `filler`, validating every assignment; windows
/// the filler misses or fills invalidly fall back to [`ResidualFiller`]'s
/// rule. The returned plan has no empty event lists.
pub fn fill_gaps(mut plan: WindowPlan, filler: &mut dyn GapFiller) -> Result<WindowPlan> {
    let consumed: Vec<String> = plan
        .windows
        .iter()
        .flat_map(|w| w.events.iter().cloned())
        .collect();
    let proposed = match filler.assignments(&plan, &consumed) {
        Ok(a) => a,
        Err(err) => {
            log::warn!("gap filler failed ({err}); using residual rule");
            ResidualFiller.assignments(&plan, &consumed)?
        }
    };
    let fallback = ResidualFiller.assignments(&plan, &consumed)?;
    for (i, w) in plan.windows.iter_mut().enumerate() {
        if !w.events.is_empty() {
            continue;
        }
        let valid = proposed
            .get(&i)
            .filter(|evs| !evs.is_empty() && evs.iter().all(|e| !e.trim().is_empty()));
        match valid {
            Some(evs) => w.events = evs.clone(),
            None => {
                w.events = fallback
                    .get(&i)
                    .cloned()
                    .unwrap_or_else(|| vec![plan.global_caption.clone()])
            }
        }
    }
    Ok(plan)
}

/// Produces a single natural-language recaption for a window's events.
pub trait Recaptioner {
    fn recaption(
        &mut self,
        events: &[String],
        global_caption: &str,
        window_s: (f64, f64),
    ) -> Result<String>;
}

/// Joins events as `"E1 while E2 and E3"`.
pub fn template_recaption(events: &[String]) -> String {
    let mut out = String::new();
    for (i, e) in events.iter().enumerate() {
        match i {
            0 => out.push_str(e),
            1 => {
                let _ = write!(out, " while {e}");
            }
            _ => {
                let _ = write!(out, " and {e}");
            }
        }
    }
    out
}

/// The deterministic recaptioner; never fails.
pub struct TemplateRecaptioner;

impl Recaptioner for TemplateRecaptioner {
    fn recaption(&mut self, events: &[String], _: &str, _: (f64, f64)) -> Result<String> {
        Ok(template_recaption(events))
    }
}

/// Recaption one window, degrading to the template on recaptioner failure.
pub fn recaption_window(
    mut window: PlanWindow,
    global_caption: &str,
    recaptioner: &mut dyn Recaptioner,
) -> PlanWindow {
    let span = (window.start_s, window.end_s);
    window.recaption = match recaptioner.recaption(&window.events, global_caption, span) {
        Ok(text) if !text.trim().is_empty() => text,
        Ok(_) => template_recaption(&window.events),
        Err(err) => {
            log::warn!("recaption failed ({err}); using template");
            template_recaption(&window.events)
        }
    };
    window
}

/// End-to-end planner: parse, build boundaries, assign events, fill gaps,
/// recaption. An empty `raw_timing` yields a single window captioned by the
/// global caption.
pub fn make_plan(
    global_caption: &str,
    raw_timing: &str,
    total_s: f64,
    filler: &mut dyn GapFiller,
    recaptioner: &mut dyn Recaptioner,
) -> Result<WindowPlan> {
    let global_caption = global_caption.trim();
    if global_caption.is_empty() {
        return Err(Error::parse("empty global caption"));
    }
    if !(total_s > 0.0) {
        return Err(Error::range(format!("total_s must be positive, got {total_s}")));
    }
    let windows = if raw_timing.trim().is_empty() {
        vec![PlanWindow {
            start_s: 0.0,
            end_s: total_s,
            events: vec![global_caption.to_string()],
            recaption: String::new(),
        }]
    } else {
        let prompts = parse_prompts(raw_timing)?;
        let boundaries = build_boundaries(&prompts, total_s)?;
        assign_window_events(&boundaries, &prompts)
    };
    let plan = WindowPlan {
        total_s,
        global_caption: global_caption.to_string(),
        windows,
    };
    let plan = fill_gaps(plan, filler)?;
    let windows = plan
        .windows
        .into_iter()
        .map(|w| recaption_window(w, global_caption, recaptioner))
        .collect();
    let plan = WindowPlan {
        total_s,
        global_caption: global_caption.to_string(),
        windows,
    };
    plan.validate()?;
    Ok(plan)
}

/// Convenience wrapper using the deterministic filler and template recaption.
pub fn make_plan_template(
    global_caption: &str,
    raw_timing: &str,
    total_s: f64,
) -> Result<WindowPlan> {
    make_plan(
        global_caption,
        raw_timing,
        total_s,
        &mut ResidualFiller,
        &mut TemplateRecaptioner,
    )
}

const EVENT_SEPARATOR: &str = " | ";

/// Serializes a plan to the line-oriented plan file format. Field order is
/// fixed so plan files can be compared byte-for-byte.
pub fn write_plan_text(plan: &WindowPlan) -> String {
    let mut out = String::new();
    out.push_str("plan v1\n");
    let _ = writeln!(out, "total_s {}", plan.total_s);
    let _ = writeln!(out, "caption {}", plan.global_caption);
    for w in &plan.windows {
        let _ = writeln!(out, "window {} {}", w.start_s, w.end_s);
        let _ = writeln!(out, "events {}", w.events.join(EVENT_SEPARATOR));
        let _ = writeln!(out, "recaption {}", w.recaption);
    }
    out
}

/// Parses the plan file format produced by [`write_plan_text`].
pub fn read_plan_text(text: &str) -> Result<WindowPlan> {
    let mut lines = text.lines();
    match lines.next() {
        Some("plan v1") => {}
        other => {
            return Err(Error::Format(format!(
                "bad plan header: {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut total_s = None;
    let mut caption = None;
    let mut windows: Vec<PlanWindow> = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (key, value) = line.split_once(' ').unwrap_or((line, ""));
        match key {
            "total_s" => {
                total_s = Some(
                    value
                        .trim()
                        .parse::<f64>()
                        .map_err(|e| Error::Format(format!("bad total_s: {e}")))?,
                )
            }
            "caption" => caption = Some(value.to_string()),
            "window" => {
                let mut parts = value.split_whitespace();
                let start_s: f64 = parts
                    .next()
                    .ok_or_else(|| Error::Format("window missing start".into()))?
                    .parse()
                    .map_err(|e| Error::Format(format!("bad window start: {e}")))?;
                let end_s: f64 = parts
                    .next()
                    .ok_or_else(|| Error::Format("window missing end".into()))?
                    .parse()
                    .map_err(|e| Error::Format(format!("bad window end: {e}")))?;
                windows.push(PlanWindow {
                    start_s,
                    end_s,
                    events: Vec::new(),
                    recaption: String::new(),
                });
            }
            "events" => {
                let w = windows
                    .last_mut()
                    .ok_or_else(|| Error::Format("events before any window".into()))?;
                w.events = value
                    .split(EVENT_SEPARATOR)
                    .map(str::to_string)
                    .filter(|s| !s.is_empty())
                    .collect();
            }
            "recaption" => {
                let w = windows
                    .last_mut()
                    .ok_or_else(|| Error::Format("recaption before any window".into()))?;
                w.recaption = value.to_string();
            }
            other => return Err(Error::Format(format!("unknown plan field {other:?}"))),
        }
    }
    let plan = WindowPlan {
        total_s: total_s.ok_or_else(|| Error::Format("plan missing total_s".into()))?,
        global_caption: caption.ok_or_else(|| Error::Format("plan missing caption".into()))?,
        windows,
    };
    plan.validate()?;
    Ok(plan)
}
