/// How the active count of a [`ChannelGate`] maps onto channel indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GateKind {
    /// Channels `[0, a)`.
    Prefix,
    /// Channels `[0, a) ∪ [C/2, C/2 + a)`; keeps both halves of a GLU input
    /// paired.
    Paired,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GateRun {
    pub start: usize,
    pub end: usize,
    pub active: usize,
}

/// Per-frame active channel counts, run-length encoded.
///
/// A static utilization factor is a single run; dynamic routing produces one
/// run per stretch of frames sharing a decision.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelGate {
    kind: GateKind,
    runs: Vec<GateRun>,
}

impl ChannelGate {
    pub fn constant(kind: GateKind, frames: usize, active: usize) -> Self {
        ChannelGate {
            kind,
            runs: vec![GateRun {
                start: 0,
                end: frames,
                active,
            }],
        }
    }

    pub fn from_per_frame(kind: GateKind, active: &[usize]) -> Self {
        let mut runs: Vec<GateRun> = Vec::new();
        for (t, &a) in active.iter().enumerate() {
            match runs.last_mut() {
                Some(run) if run.active == a => run.end = t + 1,
                _ => runs.push(GateRun {
                    start: t,
                    end: t + 1,
                    active: a,
                }),
            }
        }
        ChannelGate { kind, runs }
    }

    pub fn kind(&self) -> GateKind {
        self.kind
    }

    pub fn runs(&self) -> &[GateRun] {
        &self.runs
    }

    pub fn frames(&self) -> usize {
        self.runs.last().map_or(0, |r| r.end)
    }

    /// Largest active count over all frames.
    pub fn max_active(&self) -> usize {
        self.runs.iter().map(|r| r.active).max().unwrap_or(0)
    }

    pub fn active_at(&self, t: usize) -> usize {
        self.runs
            .iter()
            .find(|r| r.start <= t && t < r.end)
            .map_or(0, |r| r.active)
    }

    /// Channel indices enabled by an active count `a` out of `channels`.
    pub fn rows(kind: GateKind, channels: usize, a: usize) -> Vec<usize> {
        match kind {
            GateKind::Prefix => (0..a.min(channels)).collect(),
            GateKind::Paired => {
                let half = channels / 2;
                let a = a.min(half);
                (0..a).chain(half..half + a).collect()
            }
        }
    }
}

/// A stretch of output frames with a fixed set of active output rows and a
/// fixed number of active input channels.
pub(crate) struct Segment {
    pub start: usize,
    pub end: usize,
    pub rows: Vec<usize>,
    pub in_count: usize,
}

/// Intersects the runs of an optional output gate and an optional input gate
/// over `frames` output frames.
pub(crate) fn segments(
    frames: usize,
    c_out: usize,
    c_in: usize,
    out_gate: Option<&ChannelGate>,
    in_gate: Option<&ChannelGate>,
) -> Vec<Segment> {
    let mut cuts = vec![0, frames];
    for g in [out_gate, in_gate].into_iter().flatten() {
        for r in g.runs() {
            cuts.push(r.start.min(frames));
            cuts.push(r.end.min(frames));
        }
    }
    cuts.sort_unstable();
    cuts.dedup();
    let mut out = Vec::with_capacity(cuts.len());
    for w in cuts.windows(2) {
        let (start, end) = (w[0], w[1]);
        if start == end {
            continue;
        }
        let rows = match out_gate {
            Some(g) => ChannelGate::rows(g.kind(), c_out, g.active_at(start)),
            None => (0..c_out).collect(),
        };
        let in_count = in_gate.map_or(c_in, |g| g.active_at(start).min(c_in));
        out.push(Segment {
            start,
            end,
            rows,
            in_count,
        });
    }
    out
}
