"""Personalized federated prototype learning at desk scale.

A numpy simulation of prototype-exchange federated learning on mixed
heterogeneous data (label skew plus feature skew), with baseline strategies,
synthetic multi-domain data, communication accounting, and convergence
diagnostics. See README.md for the tour; demos/ has narrative scripts.
"""

from .analysis import CommCost, ConvergenceDiag, RoundReport, comm_cost, convergence_diag, evaluate
from .config import ExperimentConfig, parse_config
from .data_domains import (
    ClientDataset,
    DomainSpec,
    LabeledData,
    PartitionPlan,
    default_domain_specs,
    load_csv,
    load_idx,
    make_synthetic_domain,
    partition,
)
from .federation import (
    ClientState,
    ExperimentResult,
    FederationState,
    LocalUpdateReport,
    Strategy,
    init_state,
    local_update,
    run_experiment,
    run_round,
)
from .numeric_core import (
    Batch,
    Gradients,
    Model,
    OptimizerState,
    backward,
    cross_entropy,
    forward_features,
    forward_logits,
    init_model,
    sgd_step,
)
from .prototypes import (
    ClassCluster,
    PersonalizedTargets,
    PrototypeSet,
    cluster_by_class,
    compute_local_prototypes,
    global_prototype,
    l2_distance,
    peer_weights,
    personalized_prototype,
    unbiased_prototype,
)

__version__ = "0.1.0"
