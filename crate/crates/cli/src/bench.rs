//! Streaming throughput and transient-memory measurement.

use std::time::Instant;

use serde::Serialize;
use vidcompress::{Real, RunConfig, SyntheticVideoSpec, VidCompress};

use crate::alloc;

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub frames: usize,
    pub clips: usize,
    pub memory_size: usize,
    /// Keys seen by the first block once the cache is full.
    pub kbar_tokens: usize,
    /// Median wall time per clip over the whole run.
    pub clip_ms: f64,
    /// Medians over the first and last `WINDOW` clips after the cache fills.
    pub early_clip_ms: f64,
    pub late_clip_ms: f64,
    /// Highest live heap above the pre-run baseline.
    pub peak_transient_bytes: usize,
}

const WINDOW: usize = 8;

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Streams a synthetic `frames`-long video clip by clip. Frames are generated
/// per clip and every output is dropped, so nothing grows with the length.
fn stream<T: Real>(model: &VidCompress<T>, cfg: &RunConfig, frames: usize) -> anyhow::Result<BenchRow> {
    let mut spec = SyntheticVideoSpec::new(frames, cfg.d, cfg.seed);
    spec.grid = cfg.grid;
    let tc = cfg.clip_size;
    let clips = frames.div_ceil(tc);
    let prompt = model.prompt("what happens in the video")?;
    let mut times = Vec::with_capacity(clips);

    let baseline = alloc::live_bytes();
    alloc::reset_peak();
    {
        let mut session = model.session(prompt);
        for c in 0..clips {
            let start = Instant::now();
            let n = tc.min(frames - c * tc);
            let clip = spec.frames_range::<T>(c * tc, n)?;
            let out = session.push_clip(&clip)?;
            drop(out);
            drop(clip);
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    let peak = alloc::peak_bytes().saturating_sub(baseline);

    let steady = &times[cfg.memory_size.min(clips.saturating_sub(1))..];
    let w = WINDOW.min(steady.len());
    let pooled = tc * (cfg.grid / 2) * (cfg.grid / 2);
    Ok(BenchRow {
        frames,
        clips,
        memory_size: cfg.memory_size,
        kbar_tokens: pooled * (cfg.memory_size + 1),
        clip_ms: median(&times),
        early_clip_ms: median(&steady[..w]),
        late_clip_ms: median(&steady[steady.len() - w..]),
        peak_transient_bytes: peak,
    })
}

pub fn run<T: Real>(cfg: &RunConfig, lengths: &[usize]) -> anyhow::Result<Vec<BenchRow>> {
    let model = VidCompress::<T>::new(cfg.model(), cfg.seed)?;
    // warm-up so first-touch costs do not land on the first measured length
    stream(&model, cfg, cfg.clip_size * (cfg.memory_size + 2))?;
    lengths.iter().map(|&frames| stream(&model, cfg, frames)).collect()
}
