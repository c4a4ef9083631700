"""Pipelined split training for collaborative learning on weak devices.

Dense-network numerics, model partitioning, the per-iteration stage graph and
its makespan estimator, parameter selection, a discrete-event simulator and a
training orchestrator that runs devices and server over a virtual clock.
"""

from .cost import EpochShape, LayerProfiles, NetworkProfile, network, profile_model
from .nn import SequentialModel, backward, forward, init_model, sgd_step
from .optimizer import PipelineParams, candidate_N, score, select_params
from .orchestrator import TrainingConfig, convergence_check, run_fl_reference, run_training
from .partition import ModelPair, fedavg, join_models, split_model
from .sim import RunMetrics, exhaustive_search, simulate, true_epoch_time
from .stages import StageGraph, build_iteration_graph, estimate_makespan

__version__ = "0.1.0"
