"""Model assembly, episode rollouts, Monte-Carlo duplication, and training.

An episode processes one window for `episode_len` steps: extract per-agent
glimpses, encode them with the shared (time, channel) location, merge the
agents' observations with a row-wise convolution, update the recurrent core,
propose the next locations stochastically, and classify. Only the final
step's prediction feeds the loss and the binary reward.

The engine runs all Monte-Carlo copies of one window as a single vectorized
"chunk". Chunks are the unit of parallelism and of gradient reduction:
per-chunk gradients are accumulated into private buffers and summed in window
order, so results are bitwise reproducible for a fixed seed regardless of the
worker count.
"""

from __future__ import annotations

import json
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .errors import CheckpointError, check_dims
from .glimpse import Window, foveate_batch, glimpse_length
from .numerics import (
    LstmState,
    ParamGroup,
    clip_gradients,
    conv_1xm_backward,
    conv_1xm_forward,
    cross_entropy,
    cross_entropy_backward,
    linear_backward,
    linear_forward,
    lstm_cell_backward,
    lstm_cell_forward,
    lstm_param,
    relu_backward,
    relu_forward,
    sgd_step,
    softmax,
    softmax_backward,
    xavier_param,
)
from .policy import GaussianPolicyHead, SampledAction, accumulate_reinforce, gaussian_log_pdf

CHECKPOINT_MAGIC = b"STAR1"

# rng stream purpose tags; part of the determinism contract
TRAIN_TAG, EVAL_TAG, HEATMAP_TAG, INIT_TAG, SHUFFLE_TAG = 0, 1, 2, 3, 4


def episode_streams(seed: int, tag: int, epoch: int, window_index: int, n_copies: int):
    """One counter-seeded RNG stream per Monte-Carlo copy.

    Streams depend only on (seed, purpose, epoch, window index, copy), never
    on batch position or worker scheduling.
    """
    return [np.random.default_rng((seed, tag, epoch, window_index, m)) for m in range(n_copies)]


@dataclass
class StepRecord:
    """What one episode did at one step."""

    locations: np.ndarray                    # (H,) channel coords used for extraction
    time: float                              # time coord used for extraction
    loc_actions: list                        # H SampledAction proposed this step
    time_action: SampledAction | None        # None when temporal attention is ablated
    prediction: np.ndarray                   # (C,) per-step class probabilities
    loc_head_inputs: np.ndarray | None = None   # (H, core+obs) detached head inputs
    time_head_input: np.ndarray | None = None   # (core,)


@dataclass
class Trajectory:
    steps: list
    reward: int | None = None
    final_prediction: np.ndarray | None = None


class Model:
    """All trainable parameter groups, wired according to the config flags."""

    def __init__(self, cfg: RunConfig, rng: np.random.Generator | None = None,
                 groups: dict | None = None):
        self.cfg = cfg
        if groups is None:
            rng = rng if rng is not None else np.random.default_rng((cfg.seed, INIT_TAG))
            groups = self._build_groups(cfg, rng)
        self.groups = groups
        self._wire()

    @staticmethod
    def _build_groups(cfg: RunConfig, rng: np.random.Generator) -> dict:
        g_len = glimpse_length(cfg)
        obs_w = cfg.observation_width
        groups: dict[str, ParamGroup] = {}
        if cfg.use_encoder:
            n_enc = cfg.n_agents if cfg.per_agent_encoders else 1
            for i in range(n_enc):
                suffix = f"_{i}" if cfg.per_agent_encoders else ""
                groups[f"enc_glimpse{suffix}"] = xavier_param(
                    f"enc_glimpse{suffix}", cfg.enc_glimpse_width, g_len, rng)
                groups[f"enc_loc{suffix}"] = xavier_param(
                    f"enc_loc{suffix}", cfg.enc_loc_width, 2, rng)
                groups[f"enc_out{suffix}"] = xavier_param(
                    f"enc_out{suffix}", cfg.enc_out_width, cfg.enc_glimpse_width, rng)
        if cfg.use_conv_merge:
            groups["conv_merge"] = xavier_param("conv_merge", cfg.conv_filters, obs_w, rng)
        groups["core"] = lstm_param("core", cfg.core_input_width, cfg.core_width, rng)
        for i in range(cfg.n_agents):
            groups[f"loc_head_{i}"] = xavier_param(
                f"loc_head_{i}", 1, cfg.core_width + obs_w, rng)
        if cfg.use_time_attention:
            groups["time_head"] = xavier_param("time_head", 1, cfg.core_width, rng)
        groups["classifier"] = xavier_param("classifier", cfg.n_classes, cfg.core_width, rng)
        return groups

    def _wire(self):
        cfg = self.cfg
        if cfg.use_encoder:
            n_enc = cfg.n_agents if cfg.per_agent_encoders else 1
            suffixes = [f"_{i}" for i in range(n_enc)] if cfg.per_agent_encoders else [""]
            self.enc_glimpse = [self.groups[f"enc_glimpse{s}"] for s in suffixes]
            self.enc_loc = [self.groups[f"enc_loc{s}"] for s in suffixes]
            self.enc_out = [self.groups[f"enc_out{s}"] for s in suffixes]
        else:
            self.enc_glimpse = self.enc_loc = self.enc_out = []
        self.conv = self.groups.get("conv_merge")
        self.core = self.groups["core"]
        self.loc_heads = [
            GaussianPolicyHead(self.groups[f"loc_head_{i}"], cfg.variance)
            for i in range(cfg.n_agents)
        ]
        self.time_head = (GaussianPolicyHead(self.groups["time_head"], cfg.time_policy_variance)
                          if cfg.use_time_attention else None)
        self.classifier = self.groups["classifier"]

    def param_groups(self) -> list:
        return list(self.groups.values())

    def zero_grads(self):
        for p in self.groups.values():
            p.zero_grad()

    def grad_clone(self) -> "Model":
        """Share the weights, own fresh zero gradient buffers."""
        return Model(self.cfg, groups={k: g.grad_view() for k, g in self.groups.items()})

    def n_params(self) -> int:
        return sum(p.n_params for p in self.groups.values())


def sweep_times(cfg: RunConfig) -> np.ndarray:
    """Deterministic time schedule used when temporal attention is ablated:
    scan the window uniformly from start to end over the episode."""
    if cfg.episode_len == 1:
        return np.zeros(1)
    return -1.0 + 2.0 * np.arange(cfg.episode_len) / (cfg.episode_len - 1)


@dataclass
class ChunkResult:
    """Vectorized record of n episodes over a stack of windows."""

    final_probs: np.ndarray          # (n, C)
    step_probs: np.ndarray           # (S, n, C)
    used: np.ndarray                 # (S, n, H+1): [loc_0..loc_{H-1}, time] used per step
    values: np.ndarray | None        # (S, n, H+1) clamped samples proposed at each step
    means: np.ndarray | None
    samples: np.ndarray | None       # pre-clamp draws
    rewards: np.ndarray              # (n,) binary terminal rewards
    labels: np.ndarray               # (n,) per-episode labels
    tape: dict | None                # forward caches for the backward pass


def run_chunk(model: Model, cfg: RunConfig, window_values: np.ndarray, labels,
              streams=None, n_episodes: int | None = None,
              actions_override: np.ndarray | None = None,
              init_override: np.ndarray | None = None,
              want_tape: bool = False) -> ChunkResult:
    """Run n episodes, vectorized across episodes.

    `window_values` is one (time, channels) window or a (B, time, channels)
    stack; episodes are distributed evenly over the stack in order, window
    major (episode e reads window e // (n // B)). `labels` is an int or an
    array of B ints.

    `actions_override` (S, n, H+1) replays a fixed sequence of extraction
    locations and skips all sampling; used to freeze the stochastic choices
    for finite-difference gradient checks.
    """
    S, H = cfg.episode_len, cfg.n_agents
    core_w = cfg.core_width
    frozen = actions_override is not None
    if frozen:
        n = actions_override.shape[1]
    elif n_episodes is not None:
        n = n_episodes
    else:
        n = len(streams)

    stack = np.ascontiguousarray(window_values, dtype=np.float64)
    if stack.ndim == 2:
        stack = stack[None, :, :]
    b = stack.shape[0]
    check_dims("run_chunk", stack.shape[1:] == (cfg.window_len, cfg.n_channels),
               f"window shape {stack.shape[1:]} does not match config "
               f"({cfg.window_len}, {cfg.n_channels})")
    check_dims("run_chunk", n % b == 0,
               f"{n} episodes cannot be split evenly over {b} windows")
    copies = n // b
    widx = np.repeat(np.arange(b, dtype=np.intp), copies)
    ep_labels = np.repeat(np.asarray(labels, dtype=np.int64).reshape(-1), copies)
    sweep = sweep_times(cfg)

    if frozen:
        locs = actions_override[0, :, :H].copy()
        times = actions_override[0, :, H].copy()
    elif init_override is not None:
        locs = init_override[:, :H].copy()
        times = init_override[:, H].copy()
    else:
        locs = np.stack([streams[e].uniform(-1.0, 1.0, size=H) for e in range(n)])
        if cfg.use_time_attention:
            times = np.array([streams[e].uniform(-1.0, 1.0) for e in range(n)])
        else:
            times = np.full(n, sweep[0])

    state = LstmState.zeros(core_w, batch=n)
    used = np.empty((S, n, H + 1))
    step_probs = np.empty((S, n, cfg.n_classes))
    if frozen:
        values = means = samples = None
    else:
        values = np.zeros((S, n, H + 1))
        means = np.zeros((S, n, H + 1))
        samples = np.zeros((S, n, H + 1))
    tape = {"glimpses": [], "enc": [], "obs": [], "lstm": [], "hidden": [],
            "loc_inputs": [], "time_inputs": []} if want_tape else None

    for s in range(S):
        used[s, :, :H] = locs
        used[s, :, H] = times
        glimpses = foveate_batch(stack, widx, times, locs, cfg)     # (n, H, G)

        if cfg.use_encoder:
            obs, enc_cache = _encode_forward(model, cfg, glimpses, times, locs)
        else:
            obs, enc_cache = glimpses, None
        if cfg.use_conv_merge:
            merged = conv_1xm_forward(model.conv, obs)               # (n, H, F)
        else:
            merged = obs
        core_in = merged.reshape(n, -1)
        state, lstm_cache = lstm_cell_forward(model.core, core_in, state)
        h = state.hidden
        step_probs[s] = softmax(linear_forward(model.classifier, h))

        loc_inputs = np.concatenate(
            [np.broadcast_to(h[:, None, :], (n, H, core_w)), obs], axis=-1)  # (n, H, core+obs)

        if want_tape:
            tape["glimpses"].append(glimpses)
            tape["enc"].append(enc_cache)
            tape["obs"].append(obs)
            tape["lstm"].append(lstm_cache)
            tape["hidden"].append(h)
            tape["loc_inputs"].append(loc_inputs)
            tape["time_inputs"].append(h)

        if frozen:
            if s + 1 < S:
                locs = actions_override[s + 1, :, :H].copy()
                times = actions_override[s + 1, :, H].copy()
            continue

        # propose actions for the next step (sampled at every step, the
        # final step's proposals included, per the trajectory contract).
        # Draw order per episode stream: one block of H (+1 with temporal
        # attention) standard normals per step, [loc_0..loc_{H-1}, time].
        n_draws = H + (1 if cfg.use_time_attention else 0)
        noise = np.empty((n, n_draws))
        for e in range(n):
            noise[e] = streams[e].standard_normal(n_draws)
        sd_loc = np.sqrt(cfg.variance)
        for i in range(H):
            m = model.loc_heads[i].mean(loc_inputs[:, i, :])
            raw = m + sd_loc * noise[:, i] if cfg.variance > 0 else m
            values[s, :, i] = np.clip(raw, -1.0, 1.0)
            means[s, :, i], samples[s, :, i] = m, raw
        if cfg.use_time_attention:
            var_t = cfg.time_policy_variance
            m = model.time_head.mean(h)
            raw = m + np.sqrt(var_t) * noise[:, H] if var_t > 0 else m
            values[s, :, H] = np.clip(raw, -1.0, 1.0)
            means[s, :, H], samples[s, :, H] = m, raw
        else:
            t_next = sweep[min(s + 1, S - 1)]
            values[s, :, H] = means[s, :, H] = samples[s, :, H] = t_next
        if s + 1 < S:
            locs = values[s, :, :H].copy()
            times = values[s, :, H].copy()

    final_probs = step_probs[-1]
    rewards = (np.argmax(final_probs, axis=1) == ep_labels).astype(np.int64)
    return ChunkResult(final_probs=final_probs, step_probs=step_probs, used=used,
                       values=values, means=means, samples=samples,
                       rewards=rewards, labels=ep_labels, tape=tape)


def _encode_forward(model: Model, cfg: RunConfig, glimpses, times, locs):
    """What+where encoding: relu(out(relu(glimpse branch) + relu(location branch)))."""
    n, H, G = glimpses.shape
    tl = np.stack([np.broadcast_to(times[:, None], locs.shape), locs], axis=-1)  # (n, H, 2)
    if not cfg.per_agent_encoders:
        gf = glimpses.reshape(n * H, G)
        tf = tl.reshape(n * H, 2)
        u1 = linear_forward(model.enc_glimpse[0], gf)
        v1 = linear_forward(model.enc_loc[0], tf)
        msum = relu_forward(u1) + relu_forward(v1)
        w2 = linear_forward(model.enc_out[0], msum)
        obs = relu_forward(w2).reshape(n, H, cfg.enc_out_width)
        return obs, (gf, tf, u1, v1, msum, w2)
    caches = []
    obs = np.empty((n, H, cfg.enc_out_width))
    for i in range(H):
        gf = glimpses[:, i, :]
        tf = tl[:, i, :]
        u1 = linear_forward(model.enc_glimpse[i], gf)
        v1 = linear_forward(model.enc_loc[i], tf)
        msum = relu_forward(u1) + relu_forward(v1)
        w2 = linear_forward(model.enc_out[i], msum)
        obs[:, i, :] = relu_forward(w2)
        caches.append((gf, tf, u1, v1, msum, w2))
    return obs, caches


def _encode_backward(model: Model, cfg: RunConfig, enc_cache, d_obs):
    n, H, _ = d_obs.shape
    if not cfg.per_agent_encoders:
        gf, tf, u1, v1, msum, w2 = enc_cache
        d = relu_backward(w2, d_obs.reshape(n * H, -1))
        dm = linear_backward(model.enc_out[0], msum, d)
        linear_backward(model.enc_glimpse[0], gf, relu_backward(u1, dm))
        linear_backward(model.enc_loc[0], tf, relu_backward(v1, dm))
        return
    for i in range(H):
        gf, tf, u1, v1, msum, w2 = enc_cache[i]
        d = relu_backward(w2, d_obs[:, i, :])
        dm = linear_backward(model.enc_out[i], msum, d)
        linear_backward(model.enc_glimpse[i], gf, relu_backward(u1, dm))
        linear_backward(model.enc_loc[i], tf, relu_backward(v1, dm))


def chunk_backward(model: Model, cfg: RunConfig, res: ChunkResult,
                   d_final_probs: np.ndarray, reinforce_coeffs: np.ndarray | None):
    """Reverse sweep over one chunk.

    `d_final_probs` is dL_c/d(final probabilities) per episode. The policy
    credit (`reinforce_coeffs`, one advantage weight per episode) is assigned
    to the sampled actions' log-densities with detached head inputs, or, in
    "prediction" mode, to every step's class log-likelihood.
    """
    tape = res.tape
    if tape is None:
        raise RuntimeError("chunk_backward: forward pass was run without want_tape=True")
    S, H = cfg.episode_len, cfg.n_agents
    n = d_final_probs.shape[0]
    predict_mode = reinforce_coeffs is not None and cfg.reinforce_target == "prediction"

    d_state = LstmState.zeros(cfg.core_width, batch=n)
    for s in reversed(range(S)):
        h = tape["hidden"][s]
        d_logits = np.zeros((n, cfg.n_classes))
        if s == S - 1:
            d_logits += softmax_backward(res.step_probs[s], d_final_probs)
        if predict_mode:
            # surrogate loss -coeff * log p_s[label]: d logits = coeff * (p - onehot)
            onehot = np.zeros((n, cfg.n_classes))
            onehot[np.arange(n), res.labels] = 1.0
            d_logits += reinforce_coeffs[:, None] * (res.step_probs[s] - onehot)
        d_h = d_state.hidden
        if d_logits.any():
            d_h = d_h + linear_backward(model.classifier, h, d_logits)
        d_core_in, d_state = lstm_cell_backward(model.core, tape["lstm"][s], d_h, d_state.cell)
        obs = tape["obs"][s]
        d_merged = d_core_in.reshape(obs.shape[0], H, -1)
        if cfg.use_conv_merge:
            d_obs = conv_1xm_backward(model.conv, obs, d_merged)
        else:
            d_obs = d_merged
        if cfg.use_encoder:
            _encode_backward(model, cfg, tape["enc"][s], d_obs)
        # the glimpse and location inputs are constants of the sampled
        # trajectory, so the chain stops here

    if reinforce_coeffs is not None and not predict_mode and res.samples is not None:
        for s in range(S):
            loc_inputs = tape["loc_inputs"][s]
            for i in range(H):
                accumulate_reinforce(model.loc_heads[i], loc_inputs[:, i, :],
                                     res.samples[s, :, i], res.means[s, :, i],
                                     reinforce_coeffs)
            if cfg.use_time_attention:
                accumulate_reinforce(model.time_head, tape["time_inputs"][s],
                                     res.samples[s, :, H], res.means[s, :, H],
                                     reinforce_coeffs)


def build_trajectories(res: ChunkResult, cfg: RunConfig, keep_head_inputs: bool = False):
    """Expand a vectorized chunk into per-episode Trajectory records."""
    S, H = cfg.episode_len, cfg.n_agents
    n = res.final_probs.shape[0]
    var_l = cfg.variance
    var_t = cfg.time_policy_variance
    out = []
    for e in range(n):
        steps = []
        for s in range(S):
            loc_actions = []
            for i in range(H):
                m = float(res.means[s, e, i])
                raw = float(res.samples[s, e, i])
                ld = 0.0 if var_l == 0.0 else gaussian_log_pdf(raw, m, var_l)
                loc_actions.append(SampledAction(float(res.values[s, e, i]), m, raw, ld))
            if cfg.use_time_attention:
                m = float(res.means[s, e, H])
                raw = float(res.samples[s, e, H])
                ld = 0.0 if var_t == 0.0 else gaussian_log_pdf(raw, m, var_t)
                time_action = SampledAction(float(res.values[s, e, H]), m, raw, ld)
            else:
                time_action = None
            rec = StepRecord(
                locations=res.used[s, e, :H].copy(),
                time=float(res.used[s, e, H]),
                loc_actions=loc_actions,
                time_action=time_action,
                prediction=res.step_probs[s, e].copy(),
            )
            if keep_head_inputs and res.tape is not None:
                rec.loc_head_inputs = res.tape["loc_inputs"][s][e].copy()
                rec.time_head_input = res.tape["time_inputs"][s][e].copy()
            steps.append(rec)
        out.append(Trajectory(steps=steps, reward=int(res.rewards[e]),
                              final_prediction=res.final_probs[e].copy()))
    return out


# ---------------------------------------------------------------------------
# single-step public surfaces (the engine runs the same math vectorized)
# ---------------------------------------------------------------------------

def encode_observation(model: Model, cfg: RunConfig, glimpse_flat: np.ndarray,
                       loc: float, t: float, agent: int = 0) -> np.ndarray:
    """One agent's observation vector from its glimpse and (time, location)."""
    if not cfg.use_encoder:
        return np.asarray(glimpse_flat, dtype=np.float64)
    idx = agent if cfg.per_agent_encoders else 0
    u1 = linear_forward(model.enc_glimpse[idx], np.asarray(glimpse_flat, dtype=np.float64))
    v1 = linear_forward(model.enc_loc[idx], np.array([t, loc]))
    return relu_forward(linear_forward(model.enc_out[idx],
                                       relu_forward(u1) + relu_forward(v1)))


def merge_observations(model: Model, cfg: RunConfig, obs_rows: np.ndarray):
    """Stack agents' observations and merge them row-wise.

    Returns (stacked, merged): the (agents x width) stack and the flattened
    merged representation fed to the recurrent core.
    """
    stacked = np.asarray(obs_rows, dtype=np.float64)
    check_dims("merge_observations", stacked.shape == (cfg.n_agents, cfg.observation_width),
               f"expected ({cfg.n_agents}, {cfg.observation_width}), got {stacked.shape}")
    merged = conv_1xm_forward(model.conv, stacked) if cfg.use_conv_merge else stacked
    return stacked, merged.reshape(-1)


def core_step(model: Model, merged: np.ndarray, state: LstmState) -> LstmState:
    """One recurrent-core update on the merged representation."""
    new_state, _ = lstm_cell_forward(model.core, merged, state)
    return new_state


def classify(model: Model, hidden: np.ndarray) -> np.ndarray:
    """Class probabilities from the core's hidden state."""
    return softmax(linear_forward(model.classifier, hidden))


def propose_actions(model: Model, cfg: RunConfig, hidden: np.ndarray,
                    obs_rows: np.ndarray, rng: np.random.Generator):
    """Sample every agent's next location and the shared next time.

    Location head i reads concat(hidden, obs_i); the time head reads the
    hidden state alone. Returns (list of location actions, time action or
    None when temporal attention is off).
    """
    from .policy import sample_action

    loc_actions = []
    for i in range(cfg.n_agents):
        x = np.concatenate([hidden, obs_rows[i]])
        loc_actions.append(sample_action(model.loc_heads[i], x, rng))
    time_action = sample_action(model.time_head, hidden, rng) if cfg.use_time_attention else None
    return loc_actions, time_action


# ---------------------------------------------------------------------------
# public episode surfaces
# ---------------------------------------------------------------------------

def rollout_episode(window: Window, model: Model, cfg: RunConfig,
                    stream: np.random.Generator,
                    init_override: np.ndarray | None = None,
                    keep_head_inputs: bool = True) -> Trajectory:
    """One episode over one window; trajectory includes per-step predictions."""
    init = init_override[None, :] if init_override is not None else None
    res = run_chunk(model, cfg, window.values, window.label, streams=[stream],
                    init_override=init, want_tape=keep_head_inputs)
    return build_trajectories(res, cfg, keep_head_inputs=keep_head_inputs)[0]


def monte_carlo_predict(window: Window, model: Model, cfg: RunConfig, streams,
                        want_trajectories: bool = True):
    """Duplicate the window over M stochastic episodes; average the final
    predictions. Returns (mean probability vector, trajectories)."""
    res = run_chunk(model, cfg, window.values, window.label, streams=streams)
    mean_probs = res.final_probs.mean(axis=0)
    trajs = build_trajectories(res, cfg) if want_trajectories else []
    return mean_probs, trajs


def _group_pass(model: Model, cfg: RunConfig, group, group_streams,
                batch_size: int, baseline: float):
    """Forward+backward for one fused group of windows on a grad clone.

    All Monte-Carlo copies of up to `fuse_windows` windows run as a single
    vectorized chunk. Returns (clone, total loss, rewards) so the caller can
    reduce gradients in group order.
    """
    clone = model.grad_clone()
    m = cfg.mc_copies
    values = np.stack([w.values for w in group])
    labels = np.array([w.label for w in group], dtype=np.int64)
    res = run_chunk(clone, cfg, values, labels, streams=group_streams, want_tape=True)
    mean_probs = res.final_probs.reshape(len(group), m, -1).mean(axis=1)
    loss = 0.0
    d_probs = np.empty_like(res.final_probs)
    for k, label in enumerate(labels):
        loss += cross_entropy(mean_probs[k], int(label))
        d_mean = cross_entropy_backward(mean_probs[k], int(label)) / batch_size
        d_probs[k * m:(k + 1) * m] = d_mean / m
    # both objective terms are batch means: 1/M per the Monte-Carlo
    # approximation, 1/batch like the cross-entropy term
    coeffs = (cfg.reinforce_weight * (res.rewards.astype(np.float64) - baseline)
              / (m * batch_size))
    chunk_backward(clone, cfg, res, d_probs, coeffs)
    return clone, loss, res.rewards


def train_step(model: Model, cfg: RunConfig, batch, batch_streams=None,
               baseline: float = 0.0, executor: ThreadPoolExecutor | None = None):
    """One combined update over a batch of windows.

    Zeroes grads, runs the windows' Monte-Carlo chunks in fused groups of
    `fuse_windows` (in parallel when an executor is given), reduces gradients
    in group order, and applies the cross-entropy and policy-gradient terms
    in a single clipped SGD step. Group size is a config constant, so results
    are bitwise identical for any worker count.
    Returns (batch cross-entropy loss, mean binary reward).
    """
    if not batch:
        raise ValueError("train_step: batch must be nonempty")
    if batch_streams is None:
        batch_streams = [episode_streams(cfg.seed, TRAIN_TAG, 0, i, cfg.mc_copies)
                         for i in range(len(batch))]
    model.zero_grads()
    b = len(batch)
    fuse = cfg.fuse_windows
    groups = [(batch[i:i + fuse],
               [s for streams in batch_streams[i:i + fuse] for s in streams])
              for i in range(0, b, fuse)]
    if executor is None:
        results = [_group_pass(model, cfg, g, s, b, baseline) for g, s in groups]
    else:
        futures = [executor.submit(_group_pass, model, cfg, g, s, b, baseline)
                   for g, s in groups]
        results = [f.result() for f in futures]

    total_loss = 0.0
    all_rewards = []
    for clone, loss, rewards in results:   # fixed group order
        for name, p in model.groups.items():
            p.add_grads_from(clone.groups[name])
        total_loss += loss
        all_rewards.append(rewards)
    clip_gradients(model.param_groups(), cfg.grad_clip)
    sgd_step(model.param_groups(), cfg.learning_rate)
    mean_reward = float(np.concatenate(all_rewards).mean())
    return total_loss / b, mean_reward


def predict_dataset(model: Model, cfg: RunConfig, windows, seed: int,
                    tag: int = EVAL_TAG, epoch: int = 0):
    """Monte-Carlo prediction for every window. Returns (argmax preds, mean probs)."""
    m = cfg.mc_copies
    preds = np.empty(len(windows), dtype=np.int64)
    probs = np.empty((len(windows), cfg.n_classes))
    fuse = cfg.fuse_windows
    for start in range(0, len(windows), fuse):
        group = windows[start:start + fuse]
        streams = [s for i in range(start, start + len(group))
                   for s in episode_streams(seed, tag, epoch, i, m)]
        values = np.stack([w.values for w in group])
        labels = np.array([w.label for w in group], dtype=np.int64)
        res = run_chunk(model, cfg, values, labels, streams=streams)
        mean = res.final_probs.reshape(len(group), m, -1).mean(axis=1)
        probs[start:start + len(group)] = mean
        preds[start:start + len(group)] = np.argmax(mean, axis=1)
    return preds, probs


def train_model(model: Model, cfg: RunConfig, windows, epochs: int | None = None,
                baseline_tracker=None, log=None):
    """Full training loop: shuffled batches, per-epoch loss/reward history.

    With `keep_best` (default), the parameters from the epoch with the best
    mean training reward are restored at the end: the score-function term
    keeps random-walking the policies after the reward saturates, and an
    unlucky late walk can push the tanh means into saturation and undo a
    trained model. Returns (history, best_epoch).
    """
    epochs = cfg.epochs if epochs is None else epochs
    history = []
    best_reward, best_epoch, best_params = -1.0, -1, None
    executor = ThreadPoolExecutor(max_workers=cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(epochs):
            order = np.random.default_rng((cfg.seed, SHUFFLE_TAG, epoch)).permutation(len(windows))
            losses, rewards = [], []
            for start in range(0, len(order), cfg.batch_size):
                idxs = order[start:start + cfg.batch_size]
                batch = [windows[i] for i in idxs]
                streams = [episode_streams(cfg.seed, TRAIN_TAG, epoch, int(i), cfg.mc_copies)
                           for i in idxs]
                baseline = baseline_tracker.value if baseline_tracker is not None else 0.0
                loss, reward = train_step(model, cfg, batch, streams, baseline, executor)
                if baseline_tracker is not None:
                    baseline_tracker.update(reward)
                losses.append(loss)
                rewards.append(reward)
            row = (epoch, float(np.mean(losses)), float(np.mean(rewards)))
            history.append(row)
            if cfg.keep_best and row[2] > best_reward:
                best_reward, best_epoch = row[2], epoch
                best_params = {k: (g.weight.copy(), g.bias.copy())
                               for k, g in model.groups.items()}
            if log is not None:
                log(*row)
    finally:
        if executor is not None:
            executor.shutdown()
    if best_params is not None and best_epoch < epochs - 1:
        for k, (w, b) in best_params.items():
            model.groups[k].weight[...] = w
            model.groups[k].bias[...] = b
    return history, best_epoch


# ---------------------------------------------------------------------------
# checkpoint format: b"STAR1" | uint64 manifest length | manifest JSON |
# little-endian float64 arrays in manifest order
# ---------------------------------------------------------------------------

def save_checkpoint(path, model: Model, extras: dict | None = None):
    """Write the model (and optional named extra arrays) to `path`.

    Round-trips are bitwise exact: arrays are stored as raw little-endian
    float64 in the order the manifest lists them.
    """
    arrays = []
    blobs = []
    for name, p in model.groups.items():
        for kind, arr in (("weight", p.weight), ("bias", p.bias)):
            arrays.append({"name": f"{name}/{kind}", "shape": list(arr.shape)})
            blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for name, arr in (extras or {}).items():
        arr = np.asarray(arr, dtype=np.float64)
        arrays.append({"name": f"extra/{name}", "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    manifest = json.dumps({"config": model.cfg.to_dict(), "arrays": arrays}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Read a checkpoint. Returns (model, config, extras dict)."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (mlen,) = struct.unpack("<Q", fh.read(8))
        manifest = json.loads(fh.read(mlen).decode("utf-8"))
        cfg = RunConfig.from_dict(manifest["config"])
        model = Model(cfg)  # freshly initialized, overwritten below
        extras = {}
        for entry in manifest["arrays"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            raw = fh.read(8 * count)
            if len(raw) != 8 * count:
                raise CheckpointError(f"{path}: truncated array {entry['name']}")
            arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
            name = entry["name"]
            if name.startswith("extra/"):
                extras[name[len("extra/"):]] = arr
                continue
            group_name, _, kind = name.rpartition("/")
            if group_name not in model.groups:
                raise CheckpointError(f"{path}: unknown parameter group {group_name!r}")
            target = model.groups[group_name]
            if kind == "weight":
                if target.weight.shape != arr.shape:
                    raise CheckpointError(f"{path}: shape mismatch for {name}")
                target.weight[...] = arr
            elif kind == "bias":
                if target.bias.shape != arr.shape:
                    raise CheckpointError(f"{path}: shape mismatch for {name}")
                target.bias[...] = arr
            else:
                raise CheckpointError(f"{path}: unknown array kind {name!r}")
    return model, cfg, extras


# ---------------------------------------------------------------------------
# finite-difference gate over the full cross-entropy path
# ---------------------------------------------------------------------------

def tiny_gate_config() -> RunConfig:
    """Desk-size configuration for the end-to-end gradient gate."""
    return RunConfig(
        window_len=8, n_channels=6, n_classes=3, n_agents=2, episode_len=3,
        mc_copies=1, enc_glimpse_width=10, enc_loc_width=10, enc_out_width=12,
        conv_filters=4, core_width=16, variance=0.0, seed=7,
    )


def lc_gradient_gate(cfg: RunConfig | None = None, epsilon: float = 1e-5) -> float:
    """Finite-difference check of the full classification-loss gradient.

    Runs one episode with variance 0 and frozen extraction locations, then
    compares the analytic gradient of the cross-entropy loss for every
    parameter coordinate against central differences. Returns the max
    relative error.
    """
    from .numerics import grad_check

    cfg = cfg or tiny_gate_config()
    rng = np.random.default_rng((cfg.seed, INIT_TAG))
    model = Model(cfg, rng)
    window_values = rng.normal(size=(cfg.window_len, cfg.n_channels))
    label = 1 % cfg.n_classes

    streams = episode_streams(cfg.seed, TRAIN_TAG, 0, 0, cfg.mc_copies)
    first = run_chunk(model, cfg, window_values, label, streams=streams)
    frozen_actions = first.used.copy()

    def f():
        model.zero_grads()
        res = run_chunk(model, cfg, window_values, label,
                        actions_override=frozen_actions, want_tape=True)
        mean_probs = res.final_probs.mean(axis=0)
        loss = cross_entropy(mean_probs, label)
        d_mean = cross_entropy_backward(mean_probs, label)
        d_probs = np.tile(d_mean / cfg.mc_copies, (cfg.mc_copies, 1))
        chunk_backward(model, cfg, res, d_probs, None)
        return loss

    return grad_check(f, model.param_groups(), epsilon)
