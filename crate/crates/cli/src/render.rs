use std::fmt::Write;

use duplex_latent::engine::EventTrace;

const BARS: [char; 8] = ['▁', '▂', '▃', '▄', '▅', '▆', '▇', '█'];
const COL: usize = 7;

pub fn spark(g: f32) -> char {
    let i = (g.clamp(0.0, 1.0) * BARS.len() as f32) as usize;
    BARS[i.min(BARS.len() - 1)]
}

/// Aligned `user` / `agent` / `ĝ` rows, `per_line` frames per block.
pub fn render_trace(trace: &EventTrace, per_line: usize) -> String {
    let mut out = String::new();
    for chunk in trace.frames.chunks(per_line.max(1)) {
        let mut rows = [String::from("t     "), String::from("user  "), String::from("agent "), String::from("ĝ     ")];
        for f in chunk {
            let _ = write!(rows[0], "{:<COL$}", f.t);
            let _ = write!(rows[1], "{:<COL$}", f.user.surface());
            let mark = if f.anomaly.is_some() { "!" } else { "" };
            let _ = write!(rows[2], "{:<COL$}", format!("{}{mark}", f.agent.surface()));
            let _ = write!(rows[3], "{:<COL$}", spark(f.g));
        }
        for r in rows {
            out.push_str(r.trim_end());
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
