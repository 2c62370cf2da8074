"""Simulator for Byzantine-robust learning with compressed worker-to-master messages."""

from .aggregators import AggregatorSpec, aggregate, geometric_median, norm_threshold, sign_majority
from .compressors import CompressedMessage, CompressorSpec, compress, decode
from .engine import AlgorithmSpec, RunTrace, Topology, measure_lemma1, plateau_estimate, run
from .errors import ConvergenceError, DivergenceError, InvalidInputError, ParseError
from .harness import ExperimentConfig, ReportBundle, emit_summary, preset_paper_fig, run_experiment
from .objective import Dataset, Objective, generate_synthetic, load_libsvm, solve_reference
from .workers import AttackSpec

__version__ = "0.1.0"
