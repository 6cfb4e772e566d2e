//! Temporal frame stacking for video object detection, plus the evaluation,
//! feature pooling and tracklet metric-learning tools around it.
//!
//! | module | purpose |
//! |---|---|
//! | [`tensor`] | `MTENSOR` container and binary PPM frames |
//! | [`frames`] | stacked-input variants and dataset building |
//! | [`surgery`] | first-layer weight inflation for stacked inputs |
//! | [`metrics`] | greedy matching, AP, mAP, precision/recall |
//! | [`roi`] | RoIAlign pooling of appearance vectors |
//! | [`tracklets`] | tracklet sets, overlap graph, identity maps |
//! | [`embed`] | triplet mining, embedding MLP, training, re-identification |
//! | [`synth`] | deterministic synthetic scenes |

pub mod embed;
pub mod error;
pub mod frames;
pub mod metrics;
pub mod roi;
pub mod surgery;
pub mod synth;
pub mod tensor;
pub mod tracklets;

pub use error::{Error, ErrorClass, Result};
pub use frames::{build_input, diff_image, FrameSource, InputConfig, StackedInput, Variant};
pub use metrics::{evaluate, iou, BBox, Detection, EvalReport, GroundTruth};
pub use tensor::{read_tensor, write_tensor, DType, ImageFrame, Tensor};

// The guide's code blocks run as doc-tests, one module per chapter so a
// failure points at its chapter.
#[cfg(doctest)]
mod book {
    macro_rules! chapters {
        ($($name:ident => $file:literal),* $(,)?) => {
            $(
                #[doc = include_str!(concat!("../../../book/src/", $file))]
                mod $name {}
            )*
        };
    }

    chapters! {
        introduction => "introduction.md",
        stacking => "stacking.md",
        containers => "containers.md",
        surgery => "surgery.md",
        metrics => "metrics.md",
        roi => "roi.md",
        tracklets => "tracklets.md",
        embedding => "embedding.md",
        synthetic => "synthetic.md",
        cli => "cli.md",
    }
}
