"""Orchestration: configuration, manifests, staged training, reports, CLI."""
from .config import PipelineConfig, load_config, parse_config
from .errors import ConfigError, DependencyError, ManifestError, MissingArtifactError, ValidationError
from .manifest import CorpusManifest, ManifestRecord, load_manifest
from .report import emit_report
from .stages import Pipeline, RunReport, stage2_diagnostics, synthesize

__all__ = [
    "ConfigError",
    "CorpusManifest",
    "DependencyError",
    "ManifestError",
    "ManifestRecord",
    "MissingArtifactError",
    "Pipeline",
    "PipelineConfig",
    "RunReport",
    "ValidationError",
    "emit_report",
    "load_config",
    "load_manifest",
    "parse_config",
    "stage2_diagnostics",
    "synthesize",
]
