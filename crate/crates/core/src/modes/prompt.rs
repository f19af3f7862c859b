//! Chat-template serialization for video inputs.
//!
//! The prompt opens with a framerate marker, then interleaves numeric
//! timestamps (seconds, minimal decimal form) with frame placeholders:
//! `Video of 2 fps:1<frame1>2.5<frame2>4<frame3>`. The `<frameN>`
//! placeholder stands for the frame's vision-tagged token block; the
//! timestamp/placeholder section is byte-stable and injective over
//! `(fps, timestamps)`.

use crate::error::{Error, Result};

/// Minimal decimal rendering: shortest string that round-trips the value
/// (`2.0` → `"2"`, `2.5` → `"2.5"`).
fn minimal_decimal(x: f64) -> String {
    format!("{x}")
}

pub fn serialize_prompt(timestamps: &[f64], fps: f64) -> Result<String> {
    if !fps.is_finite() || fps <= 0.0 {
        return Err(Error::invalid("serialize_prompt", format!("fps must be positive, got {fps}")));
    }
    for &t in timestamps {
        if !t.is_finite() || t < 0.0 {
            return Err(Error::invalid("serialize_prompt", format!("negative timestamp {t}")));
        }
    }
    for pair in timestamps.windows(2) {
        if pair[1] < pair[0] {
            return Err(Error::invalid("serialize_prompt", "timestamps must be non-decreasing"));
        }
    }
    let mut out = format!("Video of {} fps:", minimal_decimal(fps));
    for (i, &t) in timestamps.iter().enumerate() {
        out.push_str(&minimal_decimal(t));
        out.push_str(&format!("<frame{}>", i + 1));
    }
    Ok(out)
}
