"""Shared builders for the test-suite."""

from dataclasses import dataclass

import numpy as np

from odecorrect.dataset import DemoPair, PromptInstance
from odecorrect.integrators import Grid, Trajectory

SEQ_FIELDS = ("keys", "values", "category", "demo", "node", "targets", "target_mask")


def toy_trajectory(n_nodes, dim, rng, params=None):
    states = rng.normal(size=(n_nodes, dim))
    return Trajectory("damped_oscillator", params or {"zeta": 0.5, "omega": 2.0}, states[0], 0.01, 10, states,
                      "rk4", Grid.COARSE)


def toy_instance(d=1, n_nodes=3, dim=2, with_target=True, seed=0) -> PromptInstance:
    """Random states and labels with consistent provenance (not a real simulation)."""
    rng = np.random.default_rng(seed)
    demos = [DemoPair(toy_trajectory(n_nodes, dim, rng), rng.normal(size=(n_nodes - 1, dim))) for _ in range(d)]
    q = toy_trajectory(n_nodes, dim, rng)
    return PromptInstance(demos, q, rng.normal(size=(n_nodes - 1, dim)) if with_target else None)


@dataclass
class Permuted:
    order: np.ndarray       # new position i holds old token order[i]
    fields: dict


def permute_sequence(seq, rng) -> Permuted:
    """Shuffle the final block's query tokens among their own positions."""
    qs = seq.final_queries
    order = np.arange(len(seq))
    order[qs] = qs[rng.permutation(len(qs))]
    return Permuted(order, {f: getattr(seq, f)[order] for f in SEQ_FIELDS})
