"""Trajectory collection, the binary trajectory file format, and dataset
manifests.

File layout (all integers little-endian):
    magic "EGO1"
    u32 x5: H, W, C, n_views, L
    L bytes of action ids (u8)
    L ground-truth states as 5 x u16: x, y, heading, target_x, target_y
    FPV frames: L*H*W*C float32
    each TPV stream in view order: L*H*W*C float32
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from . import gridworld as gw
from .errors import ConfigError, FormatError

MAGIC = b"EGO1"


@dataclass
class Trajectory:
    """Synchronized expert rollout: one egocentric stream, n fixed-camera
    streams, the expert's actions, and the ground-truth states (evaluation
    only). Frame t of every stream depicts the same world state."""

    fpv: np.ndarray       # (L, H, W, 3) float32
    tpv: np.ndarray       # (n_views, L, H, W, 3) float32
    actions: np.ndarray   # (L,) uint8
    states: np.ndarray    # (L, 5) uint16: x, y, heading, target_x, target_y

    @property
    def length(self) -> int:
        return self.fpv.shape[0]

    @property
    def n_views(self) -> int:
        return self.tpv.shape[0]

    @property
    def resolution(self) -> int:
        return self.fpv.shape[1]

    def state_at(self, t: int, grid_size: int, horizon: int) -> gw.WorldState:
        x, y, heading, tx, ty = (int(v) for v in self.states[t])
        return gw.WorldState(grid_size=grid_size, agent_pos=(x, y), agent_heading=heading,
                             target_pos=(tx, ty), step_count=t, horizon=horizon)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trajectory):
            return NotImplemented
        return (np.array_equal(self.fpv, other.fpv)
                and np.array_equal(self.tpv, other.tpv)
                and np.array_equal(self.actions, other.actions)
                and np.array_equal(self.states, other.states))


def _pack_state(state: gw.WorldState) -> tuple:
    return (state.agent_pos[0], state.agent_pos[1], state.agent_heading,
            state.target_pos[0], state.target_pos[1])


def collect_trajectory(seed: int, config: gw.EnvConfig = gw.EnvConfig(),
                       viewpoints: Optional[Sequence[gw.Viewpoint]] = None) -> Trajectory:
    """Roll the expert oracle from a seeded reset until it stands on the
    target or the horizon runs out, rendering every view at every step."""
    config.validate()
    if viewpoints is None:
        viewpoints = gw.viewpoints_for_seed(seed, config.n_views)
    state = gw.reset(seed, config)
    fpv, tpv, actions, states = [], [], [], []
    while True:
        fpv.append(gw.render_fpv(state, config.resolution))
        tpv.append([gw.render_tpv(state, v, config.resolution) for v in viewpoints])
        states.append(_pack_state(state))
        actions.append(gw.expert_action(state))
        if state.on_target() or state.step_count >= state.horizon:
            break
        state = gw.step(state, actions[-1])
    return Trajectory(
        fpv=np.stack(fpv),
        tpv=np.stack([np.stack(frames) for frames in tpv]).transpose(1, 0, 2, 3, 4),
        actions=np.asarray(actions, dtype=np.uint8),
        states=np.asarray(states, dtype=np.uint16),
    )


def write_trajectory(traj: Trajectory, path) -> None:
    length, h, w, c = traj.fpv.shape
    header = MAGIC + struct.pack("<5I", h, w, c, traj.n_views, length)
    with open(path, "wb") as f:
        f.write(header)
        f.write(traj.actions.astype(np.uint8).tobytes())
        f.write(traj.states.astype("<u2").tobytes())
        f.write(traj.fpv.astype("<f4").tobytes())
        for v in range(traj.n_views):
            f.write(traj.tpv[v].astype("<f4").tobytes())


def read_trajectory(path) -> Trajectory:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise FormatError(f"{path}: not a trajectory file (bad magic)")
    if len(raw) < 24:
        raise FormatError(f"{path}: truncated header")
    h, w, c, n_views, length = struct.unpack("<5I", raw[4:24])
    if length == 0 or n_views == 0 or c == 0 or h == 0 or w == 0:
        raise FormatError(f"{path}: inconsistent header fields "
                          f"H={h} W={w} C={c} views={n_views} L={length}")
    frame_bytes = 4 * length * h * w * c
    expected = 24 + length + 10 * length + frame_bytes * (1 + n_views)
    if len(raw) != expected:
        raise FormatError(f"{path}: file size {len(raw)} does not match header "
                          f"(expected {expected})")
    off = 24
    actions = np.frombuffer(raw, dtype=np.uint8, count=length, offset=off).copy()
    off += length
    states = np.frombuffer(raw, dtype="<u2", count=length * 5, offset=off).reshape(length, 5).copy()
    off += 10 * length
    fpv = np.frombuffer(raw, dtype="<f4", count=length * h * w * c,
                        offset=off).reshape(length, h, w, c).copy()
    off += frame_bytes
    tpv = np.empty((n_views, length, h, w, c), dtype=np.float32)
    for v in range(n_views):
        tpv[v] = np.frombuffer(raw, dtype="<f4", count=length * h * w * c,
                               offset=off).reshape(length, h, w, c)
        off += frame_bytes
    return Trajectory(fpv=fpv, tpv=tpv, actions=actions, states=states)


@dataclass
class Manifest:
    """Dataset index: trajectory file names (relative to the manifest's
    directory), their train/test split, and the collection settings."""

    root: Path
    train: List[str]
    test: List[str]
    n_views: int
    env: gw.EnvConfig
    seed: int

    def train_paths(self) -> List[Path]:
        return [self.root / p for p in self.train]

    def test_paths(self) -> List[Path]:
        return [self.root / p for p in self.test]


def write_manifest(manifest: Manifest, path=None) -> Path:
    path = Path(path) if path is not None else manifest.root / "manifest.json"
    doc = {
        "train": manifest.train,
        "test": manifest.test,
        "n_views": manifest.n_views,
        "env": {
            "grid_size": manifest.env.grid_size,
            "n_views": manifest.env.n_views,
            "horizon": manifest.env.horizon,
            "resolution": manifest.env.resolution,
        },
        "seed": manifest.seed,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, ValueError) as e:
        raise FormatError(f"{path}: unreadable manifest ({e})") from None
    try:
        env = gw.EnvConfig(**doc["env"])
        return Manifest(root=path.parent, train=list(doc["train"]), test=list(doc["test"]),
                        n_views=int(doc["n_views"]), env=env, seed=int(doc["seed"]))
    except (KeyError, TypeError) as e:
        raise FormatError(f"{path}: manifest missing field ({e})") from None


def collect_dataset(out_dir, n_trajectories: int, config: gw.EnvConfig = gw.EnvConfig(),
                    seed: int = 0, test_fraction: float = 0.2) -> Manifest:
    """Collect a seeded dataset of expert trajectories and write it plus a
    manifest. The last floor(n * test_fraction) trajectories are held out."""
    if n_trajectories < 1:
        raise ConfigError("need at least one trajectory")
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigError(f"test_fraction {test_fraction} outside [0, 1)")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    names = []
    for i in range(n_trajectories):
        traj_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        traj = collect_trajectory(seed=traj_seed, config=config)
        name = f"traj_{i:03d}.ego"
        write_trajectory(traj, out_dir / name)
        names.append(name)
    n_test = int(n_trajectories * test_fraction)
    manifest = Manifest(root=out_dir, train=names[:n_trajectories - n_test],
                        test=names[n_trajectories - n_test:], n_views=config.n_views,
                        env=config, seed=seed)
    write_manifest(manifest)
    return manifest


def load_split(manifest: Manifest, split: str) -> List[Trajectory]:
    if split == "train":
        paths = manifest.train_paths()
    elif split == "test":
        paths = manifest.test_paths()
    else:
        raise ConfigError(f"unknown split {split!r}")
    return [read_trajectory(p) for p in paths]
