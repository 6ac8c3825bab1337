"""External knowledge: scripted rules, frozen learned policies, and packs.

A knowledge mapping turns an observation into an action distribution. Grid
mappings return a 7-way pmf; continuous mappings return a diagonal Gaussian
over the 4-d action (``squashed`` mappings apply tanh to their samples).
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from kgrl import grid_env as G
from kgrl import point_env as P
from kgrl.approx import ParameterStore, blob_bytes, blob_values, no_grad
from kgrl.policy import (
    GRID_LAYOUT,
    POINT_LAYOUT,
    GridArch,
    PointArch,
    arch_from_dict,
    grid_inner_logp,
    grid_trunk,
    point_inner,
)

SMOOTHING = 0.01
SCRIPTED_SIGMA = 0.05
CONTROLLER_GAIN = 5.0
PICK_EPSILON = 0.03
PACK_FORMAT = "kgrl-pack"
PACK_VERSION = 1

GRID_RULES = ("grid_kg1_pickup_key", "grid_kg2_open_door", "grid_kg3_reach_goal")
CONT_RULES = ("cont_kg1_to_goal", "cont_kg2_to_object")
ACTION_SPACES = ("grid7", "cont4")


class PackError(ValueError):
    """Corrupt, mismatched or incompatible knowledge pack."""


# -- grid rules --------------------------------------------------------------------
def _smoothed(action: int) -> np.ndarray:
    pmf = np.full(G.N_ACTIONS, SMOOTHING / (G.N_ACTIONS - 1))
    pmf[action] = 1.0 - SMOOTHING
    return pmf


_SMOOTHED = [_smoothed(a) for a in range(G.N_ACTIONS)]
_EXPLORE = (G.TURN_LEFT, G.TURN_RIGHT, G.FORWARD)
FALLBACK = np.full(G.N_ACTIONS, SMOOTHING / (G.N_ACTIONS - len(_EXPLORE)))
FALLBACK[list(_EXPLORE)] = (1.0 - SMOOTHING) / len(_EXPLORE)

# view cells sorted by distance from the agent: (row, col, forward, lateral)
_CELLS_BY_DISTANCE = sorted(
    (
        (r, c, G.AGENT_ROW - r, c - G.AGENT_COL)
        for r in range(G.VIEW)
        for c in range(G.VIEW)
        if (r, c) != (G.AGENT_ROW, G.AGENT_COL)
    ),
    key=lambda t: (t[2] + abs(t[3]), abs(t[3])),
)
_AHEAD = (G.AGENT_ROW - 1, G.AGENT_COL)


def locate(obs: G.GridObservation, kind: int) -> tuple[int, int, int, int] | None:
    """Nearest visible cell of ``kind`` as (row, col, forward, lateral)."""
    kinds = obs.view[:, :, 0]
    if not (kinds == kind).any():
        return None
    for cell in _CELLS_BY_DISTANCE:
        if kinds[cell[0], cell[1]] == kind:
            return cell
    return None


def _ahead_passable(obs: G.GridObservation) -> bool:
    k, _, s = obs.view[_AHEAD]
    return k in (G.EMPTY, G.GOAL) or (k == G.DOOR and s == G.OPEN)


def go_toward(forward: int, lateral: int, ahead_passable: bool) -> int | None:
    """Action that heads toward an egocentric target.

    Centered targets get ``forward``. A target at least as far ahead as it is
    sideways also gets ``forward`` while the way is clear (ties go forward);
    otherwise turn toward the target's side. Returns None when nothing sensible
    applies (target dead ahead behind an obstacle is still ``forward``).
    """
    if lateral == 0:
        return G.FORWARD
    if forward >= abs(lateral) and ahead_passable:
        return G.FORWARD
    return G.TURN_LEFT if lateral < 0 else G.TURN_RIGHT


def grid_kg1_pickup_key(obs: G.GridObservation) -> np.ndarray:
    hit = locate(obs, G.KEY)
    if hit is None:
        return FALLBACK.copy()
    r, c, f, lat = hit
    if (r, c) == _AHEAD:
        return _SMOOTHED[G.PICKUP].copy()
    return _SMOOTHED[go_toward(f, lat, _ahead_passable(obs))].copy()


def grid_kg2_open_door(obs: G.GridObservation) -> np.ndarray:
    hit = locate(obs, G.DOOR)
    if hit is None:
        return FALLBACK.copy()
    r, c, f, lat = hit
    if (r, c) == _AHEAD:
        # an open door ahead is walked through rather than closed again
        action = G.FORWARD if obs.view[r, c, 2] == G.OPEN else G.TOGGLE
        return _SMOOTHED[action].copy()
    return _SMOOTHED[go_toward(f, lat, _ahead_passable(obs))].copy()


def grid_kg3_reach_goal(obs: G.GridObservation) -> np.ndarray:
    hit = locate(obs, G.GOAL)
    if hit is None:
        return FALLBACK.copy()
    _, _, f, lat = hit
    return _SMOOTHED[go_toward(f, lat, _ahead_passable(obs))].copy()


# -- continuous rules ------------------------------------------------------------------
def _batch(obs) -> np.ndarray:
    obs = np.asarray(obs, dtype=np.float64)
    return obs[None] if obs.ndim == 1 else obs


def cont_kg1_to_goal(obs, epsilon: float = np.inf) -> tuple[np.ndarray, np.ndarray]:
    """Move straight to the goal with the gripper closed once the object is in hand.

    Returns (mean, sigma), each (N, 4) (or (4,) for a single observation).
    """
    single = np.ndim(obs) == 1
    o = _batch(obs)
    near = np.linalg.norm(o[:, P.OBJ_REL], axis=1) < epsilon
    mean = np.zeros((len(o), 4))
    mean[:, :3] = np.where(
        near[:, None], np.clip(CONTROLLER_GAIN * (o[:, P.GOAL] - o[:, P.EE_POS]), -1.0, 1.0), 0.0
    )
    mean[:, 3] = -1.0
    sigma = np.full_like(mean, SCRIPTED_SIGMA)
    return (mean[0], sigma[0]) if single else (mean, sigma)


def cont_kg2_to_object(obs, epsilon: float = PICK_EPSILON) -> tuple[np.ndarray, np.ndarray]:
    """Move straight to the object with the gripper open until within epsilon."""
    single = np.ndim(obs) == 1
    o = _batch(obs)
    far = np.linalg.norm(o[:, P.OBJ_REL], axis=1) >= epsilon
    mean = np.zeros((len(o), 4))
    mean[:, :3] = np.where(far[:, None], np.clip(CONTROLLER_GAIN * o[:, P.OBJ_REL], -1.0, 1.0), 0.0)
    mean[:, 3] = np.where(far, 1.0, 0.0)
    sigma = np.full_like(mean, SCRIPTED_SIGMA)
    return (mean[0], sigma[0]) if single else (mean, sigma)


_GRID_FNS = {
    "grid_kg1_pickup_key": grid_kg1_pickup_key,
    "grid_kg2_open_door": grid_kg2_open_door,
    "grid_kg3_reach_goal": grid_kg3_reach_goal,
}
_CONT_FNS = {"cont_kg1_to_goal": cont_kg1_to_goal, "cont_kg2_to_object": cont_kg2_to_object}
SHORT_NAMES = {
    "KG1": "grid_kg1_pickup_key",
    "KG2": "grid_kg2_open_door",
    "KG3": "grid_kg3_reach_goal",
    "CKG1": "cont_kg1_to_goal",
    "CKG2": "cont_kg2_to_object",
}


# -- mappings ------------------------------------------------------------------------
@dataclass
class KnowledgeMapping:
    kind: str  # "scripted" | "learned"
    action_space: str
    rule_id: str | None = None
    epsilon: float | None = None  # continuous scripted rules only
    params: ParameterStore | None = None  # frozen snapshot for learned mappings
    arch: dict | None = None
    obs_layout: str = ""
    adapter: str | None = None  # "reach_zero_fill" for pick-and-place packs run on reach

    def __post_init__(self):
        if self.action_space not in ACTION_SPACES:
            raise ValueError(f"action space must be one of {ACTION_SPACES}")
        if not self.obs_layout:
            self.obs_layout = GRID_LAYOUT if self.action_space == "grid7" else POINT_LAYOUT
        if self.kind == "scripted":
            table = _GRID_FNS if self.action_space == "grid7" else _CONT_FNS
            if self.rule_id not in table:
                raise ValueError(f"unknown {self.action_space} rule {self.rule_id!r}")
        elif self.kind == "learned":
            if self.params is None or self.arch is None:
                raise ValueError("learned mappings need a parameter snapshot and an arch")
            self._arch = arch_from_dict(self.arch)
        else:
            raise ValueError(f"unknown knowledge kind {self.kind!r}")

    @property
    def squashed(self) -> bool:
        return self.kind == "learned"

    # discrete
    def grid_logpmf(self, observations: Sequence[G.GridObservation], onehot: np.ndarray | None = None) -> np.ndarray:
        """(N, 7) log-probabilities for a batch of grid observations."""
        if self.action_space != "grid7":
            raise TypeError("not a grid mapping")
        if self.kind == "scripted":
            fn = _GRID_FNS[self.rule_id]
            return np.log(np.stack([fn(o) for o in observations]))
        if onehot is None:
            onehot = G.encode_onehot(
                np.stack([o.view for o in observations]), np.array([o.carrying for o in observations])
            )
        with no_grad():
            _, hidden = grid_trunk(self._arch, self.params, onehot)
            return grid_inner_logp(self._arch, self.params, hidden).data

    # continuous
    def gaussian(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """(mean, log_std), each (N, 4). Learned means are pre-squash."""
        if self.action_space != "cont4":
            raise TypeError("not a continuous mapping")
        obs = _batch(obs)
        if self.kind == "scripted":
            eps = np.inf if self.epsilon is None else self.epsilon
            mean, sigma = _CONT_FNS[self.rule_id](obs, eps)
            return mean, np.log(sigma)
        if self.adapter == "reach_zero_fill":
            obs = P.reach_adapter(obs)
        with no_grad():
            mean, log_std = point_inner(self._arch, self.params, obs)
        return mean.data, log_std.data

    def evaluate(self, obs):
        """Single-observation distribution: pmf (7,) or (mean, sigma) in action space."""
        if self.action_space == "grid7":
            return np.exp(self.grid_logpmf([obs])[0])
        mean, log_std = self.gaussian(obs)
        return mean[0], np.exp(log_std[0])


def scripted(rule: str, epsilon: float | None = None) -> KnowledgeMapping:
    rule = SHORT_NAMES.get(rule, rule)
    space = "grid7" if rule in _GRID_FNS else "cont4"
    return KnowledgeMapping("scripted", space, rule_id=rule, epsilon=epsilon)


def evaluate_learned(mapping: KnowledgeMapping, obs, layout: str | None = None):
    if mapping.kind != "learned":
        raise TypeError("evaluate_learned needs a learned mapping")
    if layout is not None and layout != mapping.obs_layout:
        raise PackError(f"observation layout {layout!r} does not match pack layout {mapping.obs_layout!r}")
    return mapping.evaluate(obs)


# -- knowledge set -------------------------------------------------------------------
@dataclass
class KnowledgeEntry:
    name: str
    mapping: KnowledgeMapping
    key: np.ndarray


@dataclass
class KnowledgeSet:
    d_k: int
    action_space: str
    entries: list[KnowledgeEntry] = field(default_factory=list)

    def add(self, name: str, mapping: KnowledgeMapping, key: np.ndarray) -> None:
        key = np.asarray(key, dtype=np.float64).reshape(-1)
        if name in self.names:
            raise ValueError(f"duplicate knowledge name {name!r}")
        if key.shape != (self.d_k,):
            raise PackError(f"key for {name!r} has dim {key.size}, actor expects d_k={self.d_k}")
        if mapping.action_space != self.action_space:
            raise PackError(f"{name!r} acts in {mapping.action_space}, set is {self.action_space}")
        self.entries.append(KnowledgeEntry(name, mapping, key))

    @property
    def names(self) -> list[str]:
        return [e.name for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self) -> np.ndarray:
        return np.stack([e.key for e in self.entries]) if self.entries else np.zeros((0, self.d_k))

    def subset(self, names: Sequence[str]) -> KnowledgeSet:
        out = KnowledgeSet(self.d_k, self.action_space)
        lookup = {e.name: e for e in self.entries}
        for n in names:
            e = lookup[n]
            out.entries.append(KnowledgeEntry(e.name, e.mapping, e.key.copy()))
        return out

    def grid_logpmf(self, observations: Sequence[G.GridObservation]) -> np.ndarray:
        """(N, n, 7) log pmfs of every mapping."""
        if not self.entries:
            return np.zeros((len(observations), 0, G.N_ACTIONS))
        onehot = None
        if any(e.mapping.kind == "learned" for e in self.entries):
            onehot = G.encode_onehot(
                np.stack([o.view for o in observations]), np.array([o.carrying for o in observations])
            )
        return np.stack([e.mapping.grid_logpmf(observations, onehot) for e in self.entries], axis=1)

    def gaussians(self, obs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(means (N, n, 4), log_stds (N, n, 4), squashed (n,))."""
        obs = _batch(obs)
        if not self.entries:
            z = np.zeros((len(obs), 0, 4))
            return z, z.copy(), np.zeros(0, dtype=bool)
        pairs = [e.mapping.gaussian(obs) for e in self.entries]
        return (
            np.stack([m for m, _ in pairs], axis=1),
            np.stack([s for _, s in pairs], axis=1),
            np.array([e.mapping.squashed for e in self.entries]),
        )


# -- packs ---------------------------------------------------------------------------
def pack_files(path: str | Path) -> tuple[Path, Path]:
    path = Path(path)
    if path.suffix == ".json":
        path = path.with_suffix("")
    return path.with_suffix(".json"), path.with_suffix(".kgrlpb")


def save_pack(path: str | Path, name: str, mapping: KnowledgeMapping, key: np.ndarray, metadata: dict | None = None) -> Path:
    """Write ``<path>.json`` (manifest) and, for learned mappings, ``<path>.kgrlpb``."""
    manifest_path, blob_path = pack_files(path)
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    key32 = np.asarray(key, dtype=np.float32).reshape(-1)
    manifest = {
        "format": PACK_FORMAT,
        "version": PACK_VERSION,
        "name": name,
        "kind": mapping.kind,
        "rule_id": mapping.rule_id,
        "epsilon": None if mapping.epsilon is None or np.isinf(mapping.epsilon) else mapping.epsilon,
        "d_k": int(key32.size),
        "action_space": mapping.action_space,
        "obs_layout": mapping.obs_layout,
        "key": [float(v) for v in key32],
        "arch": mapping.arch,
        "blob": None,
        "blob_sha256": None,
        "created": {"time": time.strftime("%Y-%m-%dT%H:%M:%S"), **(metadata or {})},
    }
    if mapping.kind == "learned":
        raw = blob_bytes(mapping.params.numpy())
        blob_path.write_bytes(raw)
        manifest["blob"] = blob_path.name
        manifest["blob_sha256"] = hashlib.sha256(raw).hexdigest()
    manifest_path.write_text(json.dumps(manifest, indent=2))
    return manifest_path


def load_pack(path: str | Path, expect_d_k: int | None = None, expect_layout: str | None = None):
    """Returns (name, mapping, key, manifest)."""
    manifest_path, _ = pack_files(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except json.JSONDecodeError as exc:
        raise PackError(f"{manifest_path}: not valid JSON ({exc})") from exc
    if manifest.get("format") != PACK_FORMAT:
        raise PackError(f"{manifest_path}: not a knowledge pack")
    if manifest.get("version") != PACK_VERSION:
        raise PackError(f"{manifest_path}: pack version {manifest.get('version')} != {PACK_VERSION}")
    key = np.asarray(manifest["key"], dtype=np.float64)
    if key.size != manifest["d_k"]:
        raise PackError(f"{manifest_path}: key length {key.size} != d_k {manifest['d_k']}")
    if expect_d_k is not None and manifest["d_k"] != expect_d_k:
        raise PackError(f"{manifest_path}: pack d_k={manifest['d_k']} but actor uses d_k={expect_d_k}")
    if expect_layout is not None and manifest["obs_layout"] != expect_layout:
        raise PackError(
            f"{manifest_path}: pack observation layout {manifest['obs_layout']!r} != {expect_layout!r}"
        )
    if manifest["kind"] == "scripted":
        mapping = KnowledgeMapping(
            "scripted",
            manifest["action_space"],
            rule_id=manifest["rule_id"],
            epsilon=manifest.get("epsilon"),
            obs_layout=manifest["obs_layout"],
        )
    else:
        blob_path = manifest_path.parent / manifest["blob"]
        raw = blob_path.read_bytes()
        if hashlib.sha256(raw).hexdigest() != manifest["blob_sha256"]:
            raise PackError(f"{blob_path}: checksum mismatch")
        mapping = KnowledgeMapping(
            "learned",
            manifest["action_space"],
            params=ParameterStore(blob_values(raw)),
            arch=manifest["arch"],
            obs_layout=manifest["obs_layout"],
        )
    return manifest["name"], mapping, key, manifest


def snapshot_mapping(params: ParameterStore, arch, action_space: str) -> KnowledgeMapping:
    """Frozen copy of a live inner policy (``enc.*``/``pi.*`` parameters)."""
    prefixes = ("enc.", "pi.") if isinstance(arch, GridArch) else ("pi.",)
    values = {n: t.data.copy() for n, t in params.items() if n.startswith(prefixes)}
    return KnowledgeMapping("learned", action_space, params=ParameterStore(values), arch=arch.to_dict())


def arch_of(mapping: KnowledgeMapping) -> GridArch | PointArch:
    return arch_from_dict(mapping.arch)
