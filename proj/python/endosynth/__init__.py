"""Python bindings for the endosynth core: metrics, evaluation, selection and study analysis."""

from ._core import (
    Error,
    aggregate_study,
    build_caption,
    evaluate,
    fid,
    fid_ratio,
    frechet_distance,
    inception_score,
    iou,
    likert_to_prob,
    parse_caption,
    rater_auc,
    select_top_uncertain,
    split_counts,
)

__all__ = [
    "Error",
    "aggregate_study",
    "build_caption",
    "evaluate",
    "fid",
    "fid_ratio",
    "frechet_distance",
    "inception_score",
    "iou",
    "likert_to_prob",
    "parse_caption",
    "rater_auc",
    "select_top_uncertain",
    "split_counts",
]
