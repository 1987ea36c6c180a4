"""Representation quality measurements: temporal alignment error between the
egocentric stream and each fixed-camera stream, latent-swap reconstruction
dumps, and a 2D principal-component projection of the latent space."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import FormatError, ShapeError
from .model import FPV, TPV, DualAE, frames_to_input, output_to_frames
from .trajectory import Trajectory


def encode_states(model: DualAE, frames: np.ndarray, branch: str) -> np.ndarray:
    """State parts of a frame stack, as a plain (N, dim_h) array (no tape)."""
    return model.encode(frames.astype(np.float64), branch).h.data


def alignment_error(model: DualAE, traj: Trajectory, view: int) -> float:
    """Mean normalized temporal offset between each egocentric frame and its
    nearest fixed-camera neighbor in state space (L2; ties to the smaller
    index). 0 means perfectly aligned; uniform random matching gives ~1/3."""
    if traj.length < 2:
        raise ShapeError("alignment error needs at least two frames")
    h_fpv = encode_states(model, traj.fpv, FPV)
    h_tpv = encode_states(model, traj.tpv[view], TPV)
    return _alignment_from_states(h_fpv, h_tpv)


def _alignment_from_states(h_fpv: np.ndarray, h_tpv: np.ndarray) -> float:
    length = h_fpv.shape[0]
    d2 = ((h_fpv[:, None, :] - h_tpv[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(d2, axis=1)  # argmin takes the first (smallest) index on ties
    return float(np.mean(np.abs(np.arange(length) - nearest)) / length)


@dataclass
class AlignmentReport:
    """Per-(trajectory, view) alignment errors plus aggregates. The all-views
    variant matches each egocentric frame against every camera's frames at
    once and is reported separately."""

    model_id: str
    split: str
    entries: List[Tuple[int, int, float]] = field(default_factory=list)
    all_views_entries: List[Tuple[int, float]] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean([e[2] for e in self.entries]))

    @property
    def all_views_mean(self) -> float:
        return float(np.mean([e[1] for e in self.all_views_entries]))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["trajectory", "view", "alignment_error"])
            for t, v, e in self.entries:
                w.writerow([t, v, f"{e:.10g}"])
            for t, e in self.all_views_entries:
                w.writerow([t, "all", f"{e:.10g}"])
            w.writerow(["mean", "", f"{self.mean:.10g}"])
            w.writerow(["mean", "all", f"{self.all_views_mean:.10g}"])


def eval_alignment(model: DualAE, trajectories: Sequence[Trajectory],
                   split: str = "test", model_id: str = "model") -> AlignmentReport:
    """Alignment error averaged over every (trajectory, view) pair."""
    report = AlignmentReport(model_id=model_id, split=split)
    for ti, traj in enumerate(trajectories):
        h_fpv = encode_states(model, traj.fpv, FPV)
        all_h, all_t = [], []
        for v in range(traj.n_views):
            h_tpv = encode_states(model, traj.tpv[v], TPV)
            report.entries.append((ti, v, _alignment_from_states(h_fpv, h_tpv)))
            all_h.append(h_tpv)
            all_t.append(np.arange(traj.length))
        h_cat = np.concatenate(all_h, axis=0)
        t_cat = np.concatenate(all_t)
        d2 = ((h_fpv[:, None, :] - h_cat[None, :, :]) ** 2).sum(axis=2)
        nearest_t = t_cat[np.argmin(d2, axis=1)]
        err = float(np.mean(np.abs(np.arange(traj.length) - nearest_t)) / traj.length)
        report.all_views_entries.append((ti, err))
    return report


# ---------------------------------------------------------------------------
# binary PPM (P6) image dumps
# ---------------------------------------------------------------------------

def write_ppm(path, frame: np.ndarray) -> None:
    """Write an (H,W,3) float frame as 8-bit binary PPM: round(clamp(x)*255)."""
    if frame.ndim != 3 or frame.shape[2] != 3:
        raise ShapeError(f"write_ppm: need (H,W,3), got {frame.shape}")
    h, w = frame.shape[:2]
    data = np.round(np.clip(frame, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P6"):
        raise FormatError(f"{path}: not a binary PPM")
    parts = raw.split(b"\n", 3)
    if len(parts) < 4:
        raise FormatError(f"{path}: truncated PPM header")
    w, h = (int(v) for v in parts[1].split())
    if parts[2] != b"255":
        raise FormatError(f"{path}: unsupported maxval {parts[2]!r}")
    pixels = np.frombuffer(parts[3], dtype=np.uint8, count=h * w * 3)
    if pixels.size < h * w * 3:
        raise FormatError(f"{path}: truncated PPM data")
    return pixels.reshape(h, w, 3).copy()


def _decode_frames(model: DualAE, z: np.ndarray) -> np.ndarray:
    return output_to_frames(model.decode(z, TPV))


def dump_permutation_recon(model: DualAE, traj: Trajectory, out_dir,
                           t: Optional[int] = None, view: int = 0,
                           times: Optional[Sequence[int]] = None) -> List[Path]:
    """Write latent-swap reconstructions of held-out frames as PPM files:
    originals, identity reconstructions, state-part swaps (egocentric state
    into each camera's latent at one timestep), and viewpoint-part swaps
    (across timesteps of one camera, and across cameras at one timestep)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    t = traj.length // 2 if t is None else t
    if times is None:
        times = sorted({0, traj.length // 2, traj.length - 1})
    written: List[Path] = []

    def put(name: str, frame: np.ndarray) -> None:
        path = out_dir / f"{name}.ppm"
        write_ppm(path, frame)
        written.append(path)

    # originals and identity reconstructions
    fpv_lat = model.encode(traj.fpv[t], FPV)
    put("orig_fpv", traj.fpv[t])
    put(f"recon_fpv", output_to_frames(model.decode(fpv_lat.z, FPV))[0])
    at_t = traj.tpv[:, t]                       # (V, H, W, 3)
    lat_t = model.encode(at_t, TPV)
    recons_t = _decode_frames(model, lat_t.z.data)
    for v in range(traj.n_views):
        put(f"orig_view{v}_t{t}", at_t[v])
        put(f"recon_view{v}_t{t}", recons_t[v])

    dim_h = model.config.dim_h
    # state-part swap: egocentric state into each camera's latent
    z_h_swap = lat_t.z.data.copy()
    z_h_swap[:, :dim_h] = fpv_lat.h.data[0]
    for v, frame in enumerate(_decode_frames(model, z_h_swap)):
        put(f"hswap_fpv_into_view{v}_t{t}", frame)

    # viewpoint-part swap across timesteps of one camera (cyclic shift)
    stream = traj.tpv[view][list(times)]
    lat_s = model.encode(stream, TPV)
    z_v_time = lat_s.z.data.copy()
    z_v_time[:, dim_h:] = np.roll(lat_s.z.data[:, dim_h:], 1, axis=0)
    for i, frame in enumerate(_decode_frames(model, z_v_time)):
        put(f"vswap_time_view{view}_t{times[i]}", frame)

    # viewpoint-part swap across cameras at one timestep (cyclic shift)
    z_v_view = lat_t.z.data.copy()
    z_v_view[:, dim_h:] = np.roll(lat_t.z.data[:, dim_h:], 1, axis=0)
    for v, frame in enumerate(_decode_frames(model, z_v_view)):
        put(f"vswap_view{(v - 1) % traj.n_views}_into_view{v}_t{t}", frame)
    return written


def vswap_success_rate(model: DualAE, trajectories: Sequence[Trajectory],
                       n_pairs: int, rng: np.random.Generator) -> float:
    """Fraction of sampled cross-camera viewpoint swaps whose reconstruction
    lands closer (pixel MSE) to the camera that donated the viewpoint part
    than to the camera that donated the state part."""
    if model.config.dim_v == 0:
        raise ShapeError("viewpoint swaps need dim_v > 0")
    dim_h = model.config.dim_h
    hits = 0
    for _ in range(n_pairs):
        traj = trajectories[int(rng.integers(len(trajectories)))]
        t = int(rng.integers(traj.length))
        vi, vj = rng.choice(traj.n_views, size=2, replace=False)
        lat = model.encode(np.stack([traj.tpv[vi, t], traj.tpv[vj, t]]), TPV)
        z = lat.z.data
        z_swap = np.concatenate([z[0, :dim_h], z[1, dim_h:]])[None]
        recon = _decode_frames(model, z_swap)[0]
        mse_target = float(np.mean((recon - traj.tpv[vj, t]) ** 2))
        mse_source = float(np.mean((recon - traj.tpv[vi, t]) ** 2))
        hits += int(mse_target < mse_source)
    return hits / n_pairs


# ---------------------------------------------------------------------------
# principal-component projection of the state space
# ---------------------------------------------------------------------------

def pca_projection(model: DualAE, trajectories: Sequence[Trajectory]
                   ) -> Tuple[List[tuple], int]:
    """Project every state vector of the split onto its top-2 principal
    components. Returns ((trajectory, stream, timestep, pc1, pc2) rows, rank).

    Components use a deterministic sign: the largest-magnitude entry of each
    eigenvector is positive. If the covariance has rank < 2 the missing
    column is zero and the returned rank says so.
    """
    rows_meta: List[Tuple[int, str, int]] = []
    vectors: List[np.ndarray] = []
    for ti, traj in enumerate(trajectories):
        h = encode_states(model, traj.fpv, FPV)
        vectors.append(h)
        rows_meta += [(ti, "fpv", t) for t in range(traj.length)]
        for v in range(traj.n_views):
            h = encode_states(model, traj.tpv[v], TPV)
            vectors.append(h)
            rows_meta += [(ti, f"tpv{v}", t) for t in range(traj.length)]
    stacked = np.concatenate(vectors, axis=0)
    if stacked.shape[0] < 3:
        raise ShapeError("projection needs at least three state vectors")
    centered = stacked - stacked.mean(axis=0)
    cov = centered.T @ centered / stacked.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]
    tol = max(eigvals[0], 0.0) * 1e-12
    rank = int(np.sum(eigvals > tol))
    proj = np.zeros((stacked.shape[0], 2))
    for k in range(min(2, rank)):
        vec = eigvecs[:, k]
        if vec[np.argmax(np.abs(vec))] < 0:
            vec = -vec
        proj[:, k] = centered @ vec
    rows = [(ti, stream, t, float(p1), float(p2))
            for (ti, stream, t), (p1, p2) in zip(rows_meta, proj)]
    return rows, rank


def write_pca_csv(rows: Sequence[tuple], rank: int, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["trajectory", "stream", "timestep", "pc1", "pc2"])
        for row in rows:
            w.writerow([row[0], row[1], row[2], f"{row[3]:.10g}", f"{row[4]:.10g}"])


def params_checksum(params: Dict[str, "ad.Tensor"]) -> str:
    """Stable digest of parameter values, for asserting evaluation never
    mutates a model."""
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(params[name].data).tobytes())
    return digest.hexdigest()
