"""Cooperative furniture-moving gridworld with coordination-aware multi-agent policies."""
from .actions import Action, Heading, Modality, build_coordination_tensor, is_coordinated
from .gridworld import GridMap, GridWorld, WorldState, load_map, parse_map
from .policy import CentralPolicy, MarginalPolicy, SyncPolicy, assemble_joint, sync_sample, tvd

__version__ = "0.1.0"

__all__ = [
    "Action",
    "Heading",
    "Modality",
    "build_coordination_tensor",
    "is_coordinated",
    "GridMap",
    "GridWorld",
    "WorldState",
    "load_map",
    "parse_map",
    "CentralPolicy",
    "MarginalPolicy",
    "SyncPolicy",
    "assemble_joint",
    "sync_sample",
    "tvd",
]
