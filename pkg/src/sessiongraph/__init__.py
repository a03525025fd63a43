"""Multi-session pose-graph localization and mapping driven by spectral
connectivity of the joint pose graph."""

from .decision import DecisionConfig, DecisionState, Event, Mode
from .evaluation import evaluate_ate, run_scenario
from .geometry import Pose
from .graph import Edge, EdgeKind, PoseGraph, Role, Vertex, VertexId
from .optimizer import Convergence, optimize
from .pipeline import KeyframeEvent, Pipeline, PipelineConfig, SessionStream
from .simulator import NoiseModel, OracleMatcher, World, build_scenario, generate_session
from .spectral import Weighting, build_laplacian, fiedler, spectral_report

__version__ = "0.1.0"

__all__ = [
    "Convergence", "DecisionConfig", "DecisionState", "Edge", "EdgeKind", "Event", "KeyframeEvent",
    "Mode", "NoiseModel", "OracleMatcher", "Pipeline", "PipelineConfig", "Pose", "PoseGraph", "Role",
    "SessionStream", "Vertex", "VertexId", "Weighting", "World", "build_laplacian", "build_scenario",
    "evaluate_ate", "fiedler", "generate_session", "optimize", "run_scenario", "spectral_report",
]
