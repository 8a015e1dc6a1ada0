"""Selection-frequency heatmaps: where the agents look, per class.

Every step of an episode observes the window at one (time, channel) location
per agent. Denormalizing those locations to grid indices and counting them
over many episodes gives a (time x channel) selection-frequency matrix per
agent, the data behind attention visualizations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .network import HEATMAP_TAG, ChunkResult, Model, episode_streams, run_chunk


@dataclass
class SelectionHeatmap:
    """Per-agent selection counts over the window grid."""

    counts: np.ndarray          # (n_agents, window_len, n_channels) nonnegative ints

    @property
    def normalized(self) -> np.ndarray:
        totals = self.counts.sum(axis=(1, 2), keepdims=True).astype(np.float64)
        safe = np.where(totals > 0, totals, 1.0)
        return self.counts / safe

    def merge(self, other: "SelectionHeatmap"):
        self.counts += other.counts


def empty_heatmap(cfg: RunConfig) -> SelectionHeatmap:
    return SelectionHeatmap(
        np.zeros((cfg.n_agents, cfg.window_len, cfg.n_channels), dtype=np.int64))


def count_chunk(heatmap: SelectionHeatmap, res: ChunkResult, cfg: RunConfig):
    """Tally the locations each episode actually observed, step by step."""
    rows, cols = cfg.window_len, cfg.n_channels
    used = res.used                            # (S, n, H+1)
    t_idx = np.clip(np.floor((used[:, :, -1] + 1.0) / 2.0 * (rows - 1) + 0.5),
                    0, rows - 1).astype(np.intp)
    l_idx = np.clip(np.floor((used[:, :, :-1] + 1.0) / 2.0 * (cols - 1) + 0.5),
                    0, cols - 1).astype(np.intp)
    for agent in range(cfg.n_agents):
        np.add.at(heatmap.counts[agent], (t_idx, l_idx[:, :, agent]), 1)


def collect_heatmaps(model: Model, cfg: RunConfig, windows, episodes_per_window: int,
                     seed: int | None = None, per_class: bool = True):
    """Run episodes over every window and build selection heatmaps.

    Returns (aggregate, by_class) where by_class maps label -> SelectionHeatmap
    (empty dict when per_class is False).
    """
    if episodes_per_window < 1:
        raise ValueError("episodes_per_window must be >= 1")
    seed = cfg.seed if seed is None else seed
    aggregate = empty_heatmap(cfg)
    by_class: dict[int, SelectionHeatmap] = {}
    for i, w in enumerate(windows):
        streams = episode_streams(seed, HEATMAP_TAG, 0, i, episodes_per_window)
        res = run_chunk(model, cfg, w.values, w.label, streams=streams)
        count_chunk(aggregate, res, cfg)
        if per_class:
            if w.label not in by_class:
                by_class[w.label] = empty_heatmap(cfg)
            count_chunk(by_class[w.label], res, cfg)
    return aggregate, by_class


def write_heatmap_csvs(aggregate: SelectionHeatmap, by_class: dict, cfg: RunConfig, outdir):
    """One counts file and one frequency file per agent, per class and aggregate."""
    from pathlib import Path

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    written = []

    def dump(tag: str, hm: SelectionHeatmap):
        freq = hm.normalized
        for agent in range(cfg.n_agents):
            for kind, mat, fmt in (("counts", hm.counts[agent], "%d"),
                                   ("freq", freq[agent], "%.10g")):
                path = outdir / f"heatmap_{kind}_agent{agent}_{tag}.csv"
                np.savetxt(path, mat, fmt=fmt, delimiter=",")
                written.append(path)

    dump("aggregate", aggregate)
    for label in sorted(by_class):
        dump(f"class{label}", by_class[label])
    return written


def serialize_trajectories(trajectories, path):
    """Append-style JSONL dump of observed locations, one episode per line.

    Records only what an external recount needs: per step, the shared time
    coordinate and the per-agent channel coordinates that were observed.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for traj in trajectories:
            steps = [{"t": s.time, "locs": [float(v) for v in s.locations]}
                     for s in traj.steps]
            fh.write(json.dumps({"reward": traj.reward, "steps": steps}) + "\n")
