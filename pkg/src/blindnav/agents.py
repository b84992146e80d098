"""The two recurrent agents.

Main agent: range scan + goal vector + previous action feed a GRU; its hidden
state r is the representation everything else consumes, and linear heads read
policy logits and a value estimate from r.

Mole: a structurally blind GRU policy. Its inputs are the subgoal vector, its
own previous action, and (depending on the communication variant) the main
agent's r; there is no observation pathway by construction.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import GruParams, ParamStore, Tensor
from .world import N_ACTIONS

START_ACTION = N_ACTIONS          # previous-action token used at episode starts
N_ACTION_TOKENS = N_ACTIONS + 1

COMMUNICATION_VARIANTS = ("as_observation", "copy_init", "copy_extend")
CONTINUITY_VARIANTS = ("zero", "restore", "continue")


class AgentError(Exception):
    pass


@dataclass
class MainConfig:
    n_rays: int = 64
    range_scale: float = 5.0      # ranges divided by this before the encoder
    enc_hidden: int = 128
    enc_out: int = 128
    goal_dim: int = 64
    action_dim: int = 32
    hidden: int = 128


@dataclass
class MoleConfig:
    goal_dim: int = 64
    action_dim: int = 32
    hidden: int = 128             # used directly only by as_observation
    extend: int = 128             # extra state dims for copy_extend


def _linear(store: ParamStore, rng, name: str, n_in: int, n_out: int, dtype,
            scale: float = 1.0):
    w = store.add(f"{name}/w", ad.glorot_uniform(rng, n_in, n_out, dtype) * scale)
    b = store.add(f"{name}/b", np.zeros(n_out, dtype=dtype))
    return w, b


def _gru(store: ParamStore, rng, name: str, n_in: int, hidden: int, dtype) -> GruParams:
    u_zr = np.concatenate(
        [ad.orthogonal(rng, hidden, hidden, dtype) for _ in range(2)], axis=1
    )
    return GruParams(
        w_in=store.add(f"{name}/w_in", ad.glorot_uniform(rng, n_in, 3 * hidden, dtype)),
        bias=store.add(f"{name}/bias", np.zeros(3 * hidden, dtype=dtype)),
        u_zr=store.add(f"{name}/u_zr", u_zr),
        u_c=store.add(f"{name}/u_c", ad.orthogonal(rng, hidden, hidden, dtype)),
    )


def _check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise AgentError(f"non-finite values in {name}")


class MainAgent:
    """Recurrent PointGoal agent; r is the GRU hidden state."""

    def __init__(self, config: MainConfig | None = None, seed: int = 0,
                 dtype=np.float32):
        self.config = config or MainConfig()
        self.dtype = dtype
        self.store = ParamStore()
        self.encoder_forwards = 0     # rows pushed through the observation encoder
        c = self.config
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
        self.enc0 = _linear(self.store, rng, "main/enc0", c.n_rays, c.enc_hidden, dtype)
        self.enc1 = _linear(self.store, rng, "main/enc1", c.enc_hidden, c.enc_out, dtype)
        self.goal = _linear(self.store, rng, "main/goal", 3, c.goal_dim, dtype)
        self.act_emb = self.store.add(
            "main/act_emb",
            (0.1 * rng.standard_normal((N_ACTION_TOKENS, c.action_dim))).astype(dtype),
        )
        gru_in = c.enc_out + c.goal_dim + c.action_dim
        self.gru = _gru(self.store, rng, "main/gru", gru_in, c.hidden, dtype)
        self._init_heads(rng)

    def _init_heads(self, rng) -> None:
        c, dtype = self.config, self.dtype
        self.policy = _linear(self.store, rng, "main/policy", c.hidden, N_ACTIONS,
                              dtype, scale=0.01)
        self.value = _linear(self.store, rng, "main/value", c.hidden, 1, dtype)

    def reinit_heads(self, seed: int) -> None:
        """Fresh policy/value heads; encoder, embeddings, and GRU are kept."""
        rng = np.random.default_rng(np.random.SeedSequence((seed, 1)))
        for name in ("main/policy/w", "main/policy/b", "main/value/w", "main/value/b"):
            self.store.remove(name)
        self._init_heads(rng)

    def initial_state(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.config.hidden), dtype=self.dtype)

    def encode_obs(self, ranges: np.ndarray) -> Tensor:
        _check_finite("observation ranges", ranges)
        self.encoder_forwards += ranges.shape[0]
        x = Tensor(np.asarray(ranges, dtype=self.dtype) / self.config.range_scale)
        h = ad.relu(ad.add(ad.matmul(x, self.enc0[0]), self.enc0[1]))
        return ad.add(ad.matmul(h, self.enc1[0]), self.enc1[1])

    def precompute_gates(self, ranges: np.ndarray, goal_vec: np.ndarray,
                         prev_action: np.ndarray) -> Tensor:
        """Input projection x @ w_in + bias for a batch of slots.

        Nothing here depends on the recurrent state, so sequence replays can
        run this once over every slot and keep only gru_step_pre sequential.
        """
        _check_finite("goal vector", goal_vec)
        obs_t = self.encode_obs(ranges)
        g = Tensor(np.asarray(goal_vec, dtype=self.dtype))
        goal_t = ad.add(ad.matmul(g, self.goal[0]), self.goal[1])
        act_t = ad.gather_rows(self.act_emb, np.asarray(prev_action))
        x = ad.concat([obs_t, goal_t, act_t], axis=1)
        return ad.add(ad.matmul(x, self.gru.w_in), self.gru.bias)

    def heads(self, r: Tensor) -> tuple:
        logits = ad.add(ad.matmul(r, self.policy[0]), self.policy[1])
        value = ad.add(ad.matmul(r, self.value[0]), self.value[1])
        return logits, value

    def step(self, ranges: np.ndarray, goal_vec: np.ndarray, prev_action: np.ndarray,
             r_prev) -> tuple:
        """One recurrent update; returns (r, policy logits, value)."""
        r_prev = r_prev if isinstance(r_prev, Tensor) else Tensor(r_prev)
        gates = self.precompute_gates(ranges, goal_vec, prev_action)
        r = ad.gru_step_pre(self.gru, gates, r_prev)
        logits, value = self.heads(r)
        return r, logits, value


class MoleAgent:
    """Blind auxiliary policy; sees only subgoal vector, own action, and r."""

    def __init__(self, config: MoleConfig | None = None,
                 variant: str = "as_observation", main_hidden: int = 128,
                 seed: int = 0, dtype=np.float32):
        if variant not in COMMUNICATION_VARIANTS:
            raise AgentError(f"unknown communication variant {variant!r}")
        self.config = config or MoleConfig()
        self.variant = variant
        self.main_hidden = main_hidden
        self.dtype = dtype
        c = self.config
        if variant == "as_observation":
            self.hidden = c.hidden
        elif variant == "copy_init":
            self.hidden = main_hidden
        else:
            self.hidden = main_hidden + c.extend
        self.store = ParamStore()
        rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
        self.goal = _linear(self.store, rng, "mole/goal", 3, c.goal_dim, dtype)
        self.act_emb = self.store.add(
            "mole/act_emb",
            (0.1 * rng.standard_normal((N_ACTION_TOKENS, c.action_dim))).astype(dtype),
        )
        gru_in = c.goal_dim + c.action_dim
        if variant == "as_observation":
            gru_in += main_hidden
        self.gru = _gru(self.store, rng, "mole/gru", gru_in, self.hidden, dtype)
        self.policy = _linear(self.store, rng, "mole/policy", self.hidden, N_ACTIONS,
                              dtype, scale=0.01)

    def init_state(self, r) -> Tensor:
        """Hidden state at a short-episode start, from the waypoint's r."""
        r = r if isinstance(r, Tensor) else Tensor(r)
        batch = r.shape[0]
        if r.shape[1] != self.main_hidden:
            raise AgentError(f"r has {r.shape[1]} dims, agent built for {self.main_hidden}")
        if self.variant == "copy_init":
            return r
        if self.variant == "copy_extend":
            zeros = Tensor(np.zeros((batch, self.config.extend), dtype=self.dtype))
            return ad.concat([r, zeros], axis=1)
        return Tensor(np.zeros((batch, self.hidden), dtype=self.dtype))

    def input_split(self) -> tuple:
        """(w_x, w_r) split of the input projection.

        w_r is None unless the as_observation variant feeds r as an extra
        input; callers doing sequence replays split once and reuse both.
        """
        if self.variant != "as_observation":
            return self.gru.w_in, None
        base = self.config.goal_dim + self.config.action_dim
        w_x, w_r = ad.split(self.gru.w_in, [base, self.main_hidden], axis=0)
        return w_x, w_r

    def precompute_gates(self, subgoal_vec: np.ndarray, prev_action: np.ndarray,
                         w_x=None) -> Tensor:
        """[subgoal, prev-action] @ w_x + bias for a batch of slots.

        The r term (as_observation only) depends on the main agent's live
        state, so replays add it per slot against input_split()'s w_r.
        """
        _check_finite("subgoal vector", subgoal_vec)
        g = Tensor(np.asarray(subgoal_vec, dtype=self.dtype))
        goal_t = ad.add(ad.matmul(g, self.goal[0]), self.goal[1])
        act_t = ad.gather_rows(self.act_emb, np.asarray(prev_action))
        x = ad.concat([goal_t, act_t], axis=1)
        if w_x is None:
            w_x = self.input_split()[0]
        return ad.add(ad.matmul(x, w_x), self.gru.bias)

    def head(self, h: Tensor) -> Tensor:
        return ad.add(ad.matmul(h, self.policy[0]), self.policy[1])

    def step(self, h, subgoal_vec: np.ndarray, prev_action: np.ndarray, r=None) -> tuple:
        """(h', logits); r is consumed only by the as_observation variant."""
        h = h if isinstance(h, Tensor) else Tensor(h)
        w_x, w_r = self.input_split()
        gates = self.precompute_gates(subgoal_vec, prev_action, w_x=w_x)
        if self.variant == "as_observation":
            if r is None:
                raise AgentError("as_observation variant needs r every step")
            r = r if isinstance(r, Tensor) else Tensor(r)
            gates = ad.add(gates, ad.matmul(r, w_r))
        h_new = ad.gru_step_pre(self.gru, gates, h)
        logits = self.head(h_new)
        return h_new, logits


class ContinuityTracker:
    """Main-state bookkeeping at long/short boundaries, one of three rules.

    zero: r is cleared at each waypoint arrival and after each short segment.
    restore: r is saved at waypoint arrival and put back after each short
    segment and at long-resume, bit-exact.
    continue: r is never touched (teleports go uncorrected).
    """

    def __init__(self, variant: str):
        if variant not in CONTINUITY_VARIANTS:
            raise AgentError(f"unknown continuity variant {variant!r}")
        self.variant = variant
        self.saved = None

    def on_waypoint(self, r: np.ndarray) -> np.ndarray:
        if self.variant == "zero":
            return np.zeros_like(r)
        if self.variant == "restore":
            self.saved = r.copy()
        return r

    def on_short_end(self, r: np.ndarray) -> np.ndarray:
        if self.variant == "zero":
            return np.zeros_like(r)
        if self.variant == "restore":
            if self.saved is None:
                raise AgentError("restore requested before any waypoint save")
            return self.saved.copy()
        return r

    def on_episode_start(self) -> None:
        self.saved = None


def goal_feature(dist: np.ndarray, bearing: np.ndarray) -> np.ndarray:
    """(distance, sin bearing, cos bearing) rows from polar goal vectors."""
    return np.stack([dist, np.sin(bearing), np.cos(bearing)], axis=-1)


def sample_actions(logits: np.ndarray, rng: np.random.Generator) -> tuple:
    """Sample per-row actions; returns (actions, log-probs of the samples)."""
    shift = logits - logits.max(axis=1, keepdims=True)
    logp = shift - np.log(np.exp(shift).sum(axis=1, keepdims=True))
    p = np.exp(logp)
    u = rng.random((logits.shape[0], 1))
    actions = (p.cumsum(axis=1) > u).argmax(axis=1)
    return actions, logp[np.arange(logits.shape[0]), actions]


def greedy_actions(logits: np.ndarray) -> np.ndarray:
    return logits.argmax(axis=1)


def save_agent(path, main: MainAgent, mole: MoleAgent | None = None,
               optimizer: ad.AdamW | None = None, extra_meta: dict | None = None) -> None:
    params = main.store.state_dict()
    meta = {
        "format": "agent",
        "main": asdict(main.config),
        "mole": None,
        "variant": None,
    }
    if mole is not None:
        params.update(mole.store.state_dict())
        meta["mole"] = asdict(mole.config)
        meta["variant"] = mole.variant
    if extra_meta:
        meta.update(extra_meta)
    ad.save_checkpoint(path, params, optimizer.state_dict() if optimizer else None, meta)


def load_agent(path, seed: int = 0):
    """(main, mole or None, optim_state or None, meta) from a checkpoint."""
    params, optim_state, meta = ad.load_checkpoint(path)
    if meta.get("format") != "agent":
        raise AgentError(f"{path}: not an agent checkpoint")
    main = MainAgent(MainConfig(**meta["main"]), seed=seed)
    main.store.load_state_dict({k: v for k, v in params.items() if k.startswith("main/")})
    mole = None
    if meta.get("mole") is not None:
        mole = MoleAgent(MoleConfig(**meta["mole"]), variant=meta["variant"],
                         main_hidden=main.config.hidden, seed=seed)
        mole.store.load_state_dict({k: v for k, v in params.items() if k.startswith("mole/")})
    return main, mole, optim_state, meta


def architecture_manifest(main: MainAgent, mole: MoleAgent | None = None) -> str:
    """JSON description of dims and variants, for sidecar files and logs."""
    doc = {"main": asdict(main.config), "main_params": main.store.names()}
    if mole is not None:
        doc["mole"] = asdict(mole.config)
        doc["variant"] = mole.variant
        doc["mole_params"] = mole.store.names()
    return json.dumps(doc, indent=2, sort_keys=True)
