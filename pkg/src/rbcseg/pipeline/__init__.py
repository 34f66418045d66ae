"""Batch orchestration: configuration, runs, crops, synthetic scenes and evaluation."""
from .config import ConfigError, PipelineConfig, load_config
from .evaluate import EvalReport, eval_separation
from .render import export_crops, render_overlay
from .run import CellAnnotation, ImageResult, run_segment, segment_image, timing_report
from .synth import SceneSpec, gen_synthetic

__all__ = [
    "CellAnnotation", "ConfigError", "EvalReport", "ImageResult", "PipelineConfig", "SceneSpec",
    "eval_separation", "export_crops", "gen_synthetic", "load_config", "render_overlay",
    "run_segment", "segment_image", "timing_report",
]
