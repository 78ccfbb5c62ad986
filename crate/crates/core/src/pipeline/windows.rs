use std::ops::Range;

use crate::error::{Error, Result};

/// Partition of `0..n_frames` into windows of at most `len` frames.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WindowSchedule {
    pub windows: Vec<Range<usize>>,
    pub len: usize,
    pub stride: usize,
}

impl WindowSchedule {
    pub fn n_frames(&self) -> usize {
        self.windows.last().map_or(0, |w| w.end)
    }
}

/// Windows start at `0, stride, 2·stride, …` until every frame is covered.
pub fn make_windows(n_frames: usize, len: usize, stride: usize) -> Result<WindowSchedule> {
    if n_frames == 0 || len == 0 || stride == 0 {
        return Err(Error::Config(format!(
            "need n_frames, L and stride ≥ 1 (got {n_frames}, {len}, {stride})"
        )));
    }
    if stride > len {
        return Err(Error::Gap { stride, len });
    }
    let mut windows = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + len).min(n_frames);
        windows.push(start..end);
        if end == n_frames {
            break;
        }
        start += stride;
    }
    Ok(WindowSchedule { windows, len, stride })
}
