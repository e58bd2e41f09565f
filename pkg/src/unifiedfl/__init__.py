"""Federated training of heterogeneous networks through a shared modulation vector.

Each client's network is encoded as a model-graph whose weights and biases are
modulated by a small shared vector; only that vector is exchanged, averaged
inside client clusters and, less often, across them.
"""

from .clustering import (
    LinkageTree,
    Partition,
    cut_by_silhouette,
    cut_tree,
    gradient_moment_descriptor,
    pairwise_distances,
    silhouette,
    static_topology_clusters,
    ward_agglomerate,
)
from .data import (
    Dataset,
    SplitPlan,
    kmeans,
    load_csv,
    load_idx,
    partition_iid,
    partition_noniid,
    synth_gaussian_mixture,
    train_test_split,
)
from .engine import Batch, GradientBundle, backward, forward, gradient_check, local_epoch, loss_cross_entropy
from .exceptions import ConfigError, ContractViolation, NumericError, ParseError, SpecValidationError, UnifiedFLError
from .federation import (
    ClientSpec,
    FederationConfig,
    RunHistory,
    Schedule,
    inter_cluster_aggregate,
    intra_cluster_aggregate,
    run_federation,
    run_round,
)
from .metrics import aggregate_folds, confusion_matrix, precision_recall_f1, write_report
from .model_graph import (
    ArchitectureSpec,
    ModelGraph,
    build_model_graph,
    deserialize_graph,
    serialize_graph,
    topology_descriptor,
)
from .roster import MANDATORY, ROSTER, get_architecture
from .theta import ThetaVector, init_theta, load_theta, modulate, save_theta, softsign

__version__ = "0.1.0"
