"""Binary hash codes for bipartite graphs and Hamming-space Top-N retrieval."""

__version__ = "0.1.0"

from .config import ABLATIONS, ConfigError, TrainConfig, config_from_mapping, load_config
from .dispersion import DispersionConfig, ProjectionState, disperse, power_iterate, validate_dispersion_ordering
from .estimators import KINDS, EstimatorSpec, backprop_sign, surrogate_grad, surrogate_value
from .evaluation import run_ablation_suite, run_estimator_suite, space_audit, theoretical_ratio
from .graph import (BipartiteGraph, DataSplit, load_edge_list, load_graph, normalize, planted_clusters,
                    save_graph, split)
from .hashing import HashCodeTable, build_code_table, convolve_stack, rescale_factor, sign_binarize
from .metrics import MetricReport, evaluate_table, ndcg_at, recall_at
from .retrieval import FloatIndex, RetrievalIndex, bench_matching, score_identity_fuzz
from .training import TrainResult, landscape_scan, load_checkpoint, save_checkpoint, train

__all__ = [name for name in dir() if not name.startswith("_")]
