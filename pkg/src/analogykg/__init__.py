"""Analogical reasoning over multimodal knowledge graphs.

Submodules: ``graph`` (data model and I/O), ``synth`` (planted synthetic
worlds), ``kge`` and ``pipeline`` (embedding-based reasoner), ``mart``
(end-to-end prompt transformer), ``metrics``/``evaluation`` and ``cli``.
"""

from .graph import AnalogyDataset, AnalogyInstance, KnowledgeGraph, TaskSetting, load_graph, save_graph
from .metrics import MetricsReport, RankingResult, TieRule
from .synth import SynthConfig, generate_synthetic, generate_world

__version__ = "0.1.0"

__all__ = [
    "AnalogyDataset", "AnalogyInstance", "KnowledgeGraph", "MetricsReport", "RankingResult", "SynthConfig",
    "TaskSetting", "TieRule", "generate_synthetic", "generate_world", "load_graph", "save_graph",
]
