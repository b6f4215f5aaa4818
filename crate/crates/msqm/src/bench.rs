//! Token-keep-ratio benchmark sweep: allocator high-water bytes, wall-clock
//! ms per frame, and mIoU per keep ratio.
//!
//! Memory is an allocator high-water proxy, not device memory: binaries that
//! want the numbers must install [`alloc_stats::CountingAllocator`] as their
//! `#[global_allocator]`. Timing runs are single-threaded; each ratio gets
//! warmup passes and the median of K timed passes.

use std::fs;
use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::metrics::{mean, miou};
use crate::model::Model;
use crate::pipeline::ClipSample;
use crate::rng::{derive_seed, tag};
use crate::svg::{render, Panel};

pub mod alloc_stats {
    //! Counting wrapper around the system allocator.
    use std::alloc::{GlobalAlloc, Layout, System};
    use std::sync::atomic::{AtomicUsize, Ordering};

    static CURRENT: AtomicUsize = AtomicUsize::new(0);
    static PEAK: AtomicUsize = AtomicUsize::new(0);

    /// Install in a binary with
    /// `#[global_allocator] static A: CountingAllocator = CountingAllocator;`
    pub struct CountingAllocator;

    unsafe impl GlobalAlloc for CountingAllocator {
        unsafe fn alloc(&self, layout: Layout) -> *mut u8 {
            let p = System.alloc(layout);
            if !p.is_null() {
                let cur = CURRENT.fetch_add(layout.size(), Ordering::Relaxed) + layout.size();
                PEAK.fetch_max(cur, Ordering::Relaxed);
            }
            p
        }

        unsafe fn dealloc(&self, ptr: *mut u8, layout: Layout) {
            System.dealloc(ptr, layout);
            CURRENT.fetch_sub(layout.size(), Ordering::Relaxed);
        }
    }

    /// Live bytes right now.
    pub fn current_bytes() -> u64 {
        CURRENT.load(Ordering::Relaxed) as u64
    }

    /// High-water mark since the last reset.
    pub fn peak_bytes() -> u64 {
        PEAK.load(Ordering::Relaxed) as u64
    }

    /// Restart the high-water mark from the current level.
    pub fn reset_peak() {
        PEAK.store(CURRENT.load(Ordering::Relaxed), Ordering::Relaxed);
    }
}

/// One sweep point.
#[derive(Clone, Debug)]
pub struct BenchRecord {
    pub r: f32,
    pub peak_bytes: u64,
    pub ms_per_frame: f64,
    pub miou: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct SweepSettings {
    /// Timed passes per ratio (median is reported).
    pub runs: usize,
    /// Untimed passes before measuring.
    pub warmups: usize,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings { runs: 5, warmups: 2 }
    }
}

/// Sweep the token keep ratio over a validation set. The model's keep ratio
/// is overridden per point; everything else stays fixed, so the numbers
/// isolate the cost of kept tokens in the dropping self-attention layers.
pub fn sweep_token_keep(
    model: &mut Model,
    clips: &[ClipSample],
    r_values: &[f32],
    settings: SweepSettings,
    seed: u64,
) -> Result<Vec<BenchRecord>> {
    if clips.is_empty() {
        return Err(Error::InvalidConfig("sweep needs at least one clip".into()));
    }
    assert!(settings.runs >= 1);
    let total_frames: usize = clips.iter().map(|c| c.dims().0).sum();
    let mut records = Vec::with_capacity(r_values.len());
    for (ri, &r) in r_values.iter().enumerate() {
        model.set_keep_ratio(r)?;
        let pass = |keep_masks: bool| -> Result<Vec<crate::seg_head::MaskClip>> {
            let mut masks = Vec::new();
            for (ci, clip) in clips.iter().enumerate() {
                let fwd = derive_seed(seed, &[tag("bench"), ri as u64, ci as u64]);
                let pred = model.predict(&clip.frames, fwd)?;
                if keep_masks {
                    masks.push(pred);
                }
            }
            Ok(masks)
        };

        for _ in 0..settings.warmups {
            pass(false)?;
        }
        alloc_stats::reset_peak();
        let mut times = Vec::with_capacity(settings.runs);
        let mut last_masks = Vec::new();
        for run in 0..settings.runs {
            let keep = run + 1 == settings.runs;
            let t0 = Instant::now();
            let masks = pass(keep)?;
            times.push(t0.elapsed().as_secs_f64() * 1000.0 / total_frames as f64);
            if keep {
                last_masks = masks;
            }
        }
        let peak = alloc_stats::peak_bytes();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let ms_per_frame = times[times.len() / 2];

        let scores: Vec<f64> = clips
            .iter()
            .zip(&last_masks)
            .map(|(clip, pred)| miou(&pred.binary, &clip.masks))
            .collect::<Result<_>>()?;
        records.push(BenchRecord {
            r,
            peak_bytes: peak,
            ms_per_frame,
            miou: mean(&scores),
        });
    }
    Ok(records)
}

/// `sweep.csv` with header `r,peak_bytes,ms_per_frame,miou`.
pub fn write_sweep_csv(records: &[BenchRecord], path: &Path) -> Result<()> {
    let mut csv = String::from("r,peak_bytes,ms_per_frame,miou\n");
    for rec in records {
        csv.push_str(&format!(
            "{},{},{:.3},{:.6}\n",
            rec.r, rec.peak_bytes, rec.ms_per_frame, rec.miou
        ));
    }
    fs::write(path, csv).map_err(|e| Error::io(path, e))
}

/// Three-panel plot (memory, latency, quality vs r), mirroring the usual
/// keep-ratio analysis layout.
pub fn write_sweep_svg(records: &[BenchRecord], path: &Path) -> Result<()> {
    let panels = vec![
        Panel {
            title: "Peak memory".into(),
            ylabel: "peak bytes (MiB)".into(),
            points: records
                .iter()
                .map(|r| (r.r as f64, r.peak_bytes as f64 / (1024.0 * 1024.0)))
                .collect(),
        },
        Panel {
            title: "Inference time".into(),
            ylabel: "ms / frame".into(),
            points: records
                .iter()
                .map(|r| (r.r as f64, r.ms_per_frame))
                .collect(),
        },
        Panel {
            title: "Segmentation quality".into(),
            ylabel: "mIoU (%)".into(),
            points: records
                .iter()
                .map(|r| (r.r as f64, r.miou * 100.0))
                .collect(),
        },
    ];
    fs::write(path, render(&panels)).map_err(|e| Error::io(path, e))
}
