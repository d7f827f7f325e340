"""Pair-dependent node embeddings from attention between the neighborhoods of both endpoints."""
from .graph import (
    EdgeSplit,
    Graph,
    GraphParseError,
    NoCandidateError,
    parse_edge_list,
    read_edge_list,
    sample_negative,
    sample_nonedges,
    split_edges,
)
from .metrics import ami, auc, eval_clustering, eval_link_prediction, mutual_information, nmi, spectral_clustering
from .model import ForwardState, GapParams, MlpParams, forward, init_params, mlp_forward, pair_embed, score, static_embedding
from .neighborhood import NeighborhoodSeq, first_order_neighbors, materialize
from .trainer import TrainConfig, backward, grad_check, hinge_loss, train

__version__ = "0.1.0"
