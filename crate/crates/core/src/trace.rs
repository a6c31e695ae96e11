//! Prediction and sampling-trace files, and their SVG rendering.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::{DecoderConfig, StageOutput};
use crate::error::Result;
use crate::geometry::decode_box;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryPrediction {
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Per-class sigmoid scores.
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePredictions {
    pub stage: usize,
    pub queries: Vec<QueryPrediction>,
}

/// Every stage's boxes and class probabilities for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub image: [f64; 2],
    pub stages: Vec<StagePredictions>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryTrace {
    /// `(x, y, z, r)` the stage sampled from.
    pub pos: [f64; 4],
    /// Box decoded from `pos`, in pixels.
    #[serde(rename = "box")]
    pub bbox: [f64; 4],
    /// Per group, the `(x̃, ỹ, z̃)` sampling points.
    pub groups: Vec<Vec<[f64; 3]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTrace {
    pub stage: usize,
    pub queries: Vec<QueryTrace>,
}

/// Sampling locations of every query in every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingTrace {
    pub s_base: u32,
    pub image: [f64; 2],
    pub stages: Vec<StageTrace>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

macro_rules! json_file {
    ($t:ty) => {
        impl $t {
            pub fn to_json(&self) -> Result<String> {
                Ok(serde_json::to_string_pretty(self)?)
            }

            pub fn from_json(text: &str) -> Result<Self> {
                Ok(serde_json::from_str(text)?)
            }

            pub fn write(&self, path: &Path) -> Result<()> {
                std::fs::write(path, self.to_json()?)?;
                Ok(())
            }

            pub fn read(path: &Path) -> Result<Self> {
                Self::from_json(&std::fs::read_to_string(path)?)
            }
        }
    };
}

json_file!(Predictions);
json_file!(SamplingTrace);

impl Predictions {
    pub fn from_outputs(outputs: &[StageOutput], image: (f64, f64)) -> Self {
        let stages = outputs
            .iter()
            .enumerate()
            .map(|(s, out)| StagePredictions {
                stage: s,
                queries: out
                    .boxes
                    .iter()
                    .enumerate()
                    .map(|(i, b)| QueryPrediction {
                        bbox: b.to_array(),
                        probs: out.logits.row(i).iter().map(|&v| sigmoid(v)).collect(),
                    })
                    .collect(),
            })
            .collect();
        Self {
            image: [image.0, image.1],
            stages,
        }
    }
}

impl SamplingTrace {
    /// Builds the trace from decoder outputs; `initial` holds the positions
    /// fed to the first stage.
    pub fn from_outputs(
        outputs: &[StageOutput],
        initial: &[crate::geometry::QueryPos],
        cfg: &DecoderConfig,
        image: (f64, f64),
    ) -> Result<Self> {
        let mut stages = Vec::with_capacity(outputs.len());
        let mut positions: Vec<_> = initial.to_vec();
        for (s, out) in outputs.iter().enumerate() {
            let mut queries = Vec::with_capacity(out.trace.len());
            for (loc, pos) in out.trace.iter().zip(&positions) {
                queries.push(QueryTrace {
                    pos: pos.to_array(),
                    bbox: decode_box(*pos, cfg.s_base as f64)?.to_array(),
                    groups: (0..loc.groups).map(|k| loc.group(k).to_vec()).collect(),
                });
            }
            stages.push(StageTrace { stage: s, queries });
            positions = out.states.iter().map(|q| q.pos).collect();
        }
        Ok(Self {
            s_base: cfg.s_base,
            image: [image.0, image.1],
            stages,
        })
    }
}

const PALETTE: [&str; 10] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf",
];

/// Point radius in pixels for a sampling point at level coordinate `z`.
pub fn radius_for_z(z: f64) -> f64 {
    0.5 + 1.5 * (0.5 * z).exp2()
}

pub fn group_color(k: usize) -> &'static str {
    PALETTE[k % PALETTE.len()]
}

/// SVG for one stage: each query's sampling box outlined, its points
/// colored by group and sized by `z̃`.
pub fn stage_svg(stage: &StageTrace, s_base: u32, image: [f64; 2]) -> String {
    let s = s_base as f64;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = image[0],
        h = image[1]
    );
    let _ = writeln!(
        out,
        r#"<rect x="0" y="0" width="{}" height="{}" fill="white"/>"#,
        image[0], image[1]
    );
    for (i, q) in stage.queries.iter().enumerate() {
        let [x1, y1, x2, y2] = q.bbox;
        let _ = writeln!(out, r#"<g class="query" data-query="{i}">"#);
        let _ = writeln!(
            out,
            r#"<rect class="box" x="{x1:.3}" y="{y1:.3}" width="{:.3}" height="{:.3}" fill="none" stroke="black" stroke-width="0.5"/>"#,
            x2 - x1,
            y2 - y1
        );
        for (k, points) in q.groups.iter().enumerate() {
            for p in points {
                let _ = writeln!(
                    out,
                    r#"<circle cx="{:.3}" cy="{:.3}" r="{:.4}" fill="{}" fill-opacity="0.7" data-group="{k}"/>"#,
                    p[0] * s,
                    p[1] * s,
                    radius_for_z(p[2]),
                    group_color(k)
                );
            }
        }
        out.push_str("</g>\n");
    }
    out.push_str("</svg>\n");
    out
}

/// One `(file name, svg)` pair per stage; a trace without stages yields a
/// single empty canvas.
pub fn dump_svg(trace: &SamplingTrace) -> Vec<(String, String)> {
    if trace.stages.is_empty() {
        let empty = StageTrace {
            stage: 0,
            queries: Vec::new(),
        };
        return vec![("stage_0.svg".into(), stage_svg(&empty, trace.s_base, trace.image))];
    }
    trace
        .stages
        .iter()
        .map(|st| {
            (
                format!("stage_{}.svg", st.stage),
                stage_svg(st, trace.s_base, trace.image),
            )
        })
        .collect()
}

/// Writes [`dump_svg`] output into `dir` and returns the written paths.
pub fn write_svgs(trace: &SamplingTrace, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut paths = Vec::new();
    for (name, svg) in dump_svg(trace) {
        let p = dir.join(name);
        std::fs::write(&p, svg)?;
        paths.push(p);
    }
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_query_trace() -> SamplingTrace {
        SamplingTrace {
            s_base: 4,
            image: [64.0, 64.0],
            stages: vec![StageTrace {
                stage: 0,
                queries: vec![QueryTrace {
                    pos: [8.0, 8.0, 4.0, 0.0],
                    bbox: [0.0, 0.0, 64.0, 64.0],
                    groups: vec![
                        vec![[1.0, 2.0, 0.0], [3.0, 4.0, 1.0], [5.0, 6.0, 2.0], [7.0, 8.0, 3.0]],
                        vec![[2.0, 2.0, 0.5], [4.0, 4.0, 1.5], [6.0, 6.0, 2.5], [8.0, 8.0, 3.5]],
                    ],
                }],
            }],
        }
    }

    #[test]
    fn one_query_svg_structure() {
        let svgs = dump_svg(&one_query_trace());
        assert_eq!(svgs.len(), 1);
        let svg = &svgs[0].1;
        assert_eq!(svg.matches("<circle").count(), 8);
        let colors: std::collections::BTreeSet<&str> = PALETTE.iter().copied().filter(|c| svg.contains(c)).collect();
        assert_eq!(colors.len(), 2);
        assert_eq!(svg.matches(r#"class="box""#).count(), 1);
    }

    #[test]
    fn radius_strictly_increasing() {
        let zs: Vec<f64> = (-40..60).map(|i| i as f64 * 0.1).collect();
        for w in zs.windows(2) {
            assert!(radius_for_z(w[1]) > radius_for_z(w[0]));
        }
    }

    #[test]
    fn empty_trace_is_valid_svg() {
        let trace = SamplingTrace {
            s_base: 4,
            image: [32.0, 32.0],
            stages: vec![],
        };
        let svgs = dump_svg(&trace);
        assert_eq!(svgs.len(), 1);
        assert!(svgs[0].1.starts_with("<svg"));
        assert!(svgs[0].1.trim_end().ends_with("</svg>"));
        assert!(!svgs[0].1.contains("<circle"));
    }

    #[test]
    fn trace_round_trip() {
        let t = one_query_trace();
        let text = t.to_json().unwrap();
        let back = SamplingTrace::from_json(&text).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.to_json().unwrap(), text);
    }
}
