"""Shared fixtures and small data generators for the test suite."""

import time

import numpy as np
import pytest

from pitchgraph import graphs
from pitchgraph.colorfeat import Histogram64


def random_histogram(rng, peaked=False):
    """A random L1-normalized 64-bin histogram."""
    if peaked:
        bins = np.zeros(64)
        bins[rng.integers(64)] = 1.0
        noise = rng.random(64) * 0.01
        bins = bins + noise
    else:
        bins = rng.random(64)
    return Histogram64(bins=bins / bins.sum(), support_px=100)


def random_graph(rng, n_nodes, timestamp_s=0.0, edge_p=0.4):
    nodes = np.zeros((n_nodes, graphs.NODE_DIM))
    if n_nodes:
        probs = rng.random((n_nodes, 5))
        nodes[:, :5] = probs / probs.sum(axis=1, keepdims=True)
        nodes[:, 5:12] = rng.normal(0.0, 2.0, (n_nodes, 7))
        nodes[:, 12] = rng.random(n_nodes)
    edges = tuple(
        (i, j)
        for i in range(n_nodes)
        for j in range(i + 1, n_nodes)
        if rng.random() < edge_p
    )
    return graphs.PlayerGraph(nodes=nodes, edges=edges, timestamp_s=timestamp_s)


def random_window(seed, label="Goal", max_nodes=6, center=7.25):
    rng = np.random.default_rng(seed)
    slots = tuple(
        random_graph(rng, int(rng.integers(0, max_nodes)), timestamp_s=k * 0.5)
        for k in range(graphs.WINDOW_SLOTS)
    )
    return graphs.GraphWindow(graphs=slots, center_time_s=center, label=label)


def permuted_window(window, rng):
    """The same window with every graph's nodes renumbered randomly."""
    slots = []
    for g in window.graphs:
        perm = rng.permutation(g.n_nodes)
        inv = np.argsort(perm)
        edges = tuple(
            (min(int(inv[i]), int(inv[j])), max(int(inv[i]), int(inv[j])))
            for i, j in g.edges
        )
        slots.append(
            graphs.PlayerGraph(nodes=g.nodes[perm], edges=edges, timestamp_s=g.timestamp_s)
        )
    return graphs.GraphWindow(
        graphs=tuple(slots), center_time_s=window.center_time_s, label=window.label
    )


def class_coded_window(label_idx, seed, labels=("Goal", "Corner", "Throw-in", "Kick-off")):
    """A window whose motion features encode its class (separable by design)."""
    rng = np.random.default_rng(seed)
    signature = [(3.0, 0.0), (-3.0, 0.0), (0.0, 3.0), (0.0, -3.0)][label_idx]
    slots = []
    for k in range(graphs.WINDOW_SLOTS):
        n = 3
        nodes = np.zeros((n, graphs.NODE_DIM))
        nodes[:, :5] = 0.2
        nodes[:, 5] = signature[0] + rng.normal(0, 0.05, n)
        nodes[:, 6] = signature[1] + rng.normal(0, 0.05, n)
        nodes[:, 7] = 0.01
        nodes[:, 8:10] = rng.normal(0, 5.0, (n, 2))
        nodes[:, 12] = 0.95
        slots.append(graphs.PlayerGraph(nodes=nodes, edges=((0, 1),), timestamp_s=k * 0.5))
    return graphs.GraphWindow(graphs=tuple(slots), center_time_s=7.25, label=labels[label_idx])


@pytest.fixture(scope="session")
def synth_match_dir(tmp_path_factory):
    """The bundled synthetic match, generated once per session.

    Returns (paths dict, generation seconds).
    """
    from pitchgraph.synth import synth_match

    out = tmp_path_factory.mktemp("synthmatch")
    start = time.monotonic()
    paths = synth_match(str(out), seed=0)
    return paths, time.monotonic() - start
