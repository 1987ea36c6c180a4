"""Batch sampling and the representation optimization loop.

Batches are drawn fresh each step from the training split (the datasets are
tiny, so there is no epoch structure). The loop keeps the checkpoint with the
best held-out alignment error seen at the periodic evaluations, and the whole
run is a pure function of (manifest, config): identical seeds give bit
identical checkpoints and logs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ShapeError
from .evaluation import eval_alignment
from .losses import (LossConfig, PermuteBatch, SingleViewTCBatch, StepBatch, TCBatch,
                     single_view_total_loss, total_loss)
from .model import DualAE, ModelConfig
from .optim import AdamState, adam_step
from .trajectory import Manifest, Trajectory, load_split

LOG_COLUMNS = ("step", "l_tc_f", "l_tc_t", "l_match", "l_v", "l_h", "l_recon", "total")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 20000
    anchors: int = 8           # contrastive anchors per step
    perm_times: int = 4        # timesteps in the same-camera permutation group
    perm_views: int = 4        # cameras in the same-timestep permutation group
    lr: float = 1e-3
    seed: int = 0
    eval_every: int = 500
    dim_h: int = 16
    dim_v: int = 8
    channels: Tuple[int, ...] = (16, 32, 64, 64)
    shared_encoder: bool = False
    fpv_only: bool = False     # single-view baseline: train on the egocentric stream only
    use_vmatch: bool = False   # ablation: literal view-similarity loss instead of permutation
    loss: LossConfig = field(default_factory=LossConfig)

    def validate(self) -> "TrainConfig":
        if self.steps < 1 or self.anchors < 1:
            raise ConfigError("steps and anchors must be positive")
        if self.perm_times < 2 or self.perm_views < 2:
            raise ConfigError("permutation groups need at least two members")
        if self.dim_h < 1 or self.dim_v < 0:
            raise ConfigError("bad latent dims")
        if self.fpv_only and not (self.shared_encoder and self.dim_v == 0):
            raise ConfigError("the single-view baseline uses one shared encoder and dim_v = 0")
        if self.use_vmatch and self.dim_v == 0:
            raise ConfigError("the vmatch ablation needs dim_v > 0")
        self.loss.validate()
        return self

    def model_config(self, resolution: int) -> ModelConfig:
        return ModelConfig(resolution=resolution, channels=self.channels,
                           dim_h=self.dim_h, dim_v=self.dim_v,
                           shared_encoder=self.shared_encoder).validate()


@dataclass
class SampleIndex:
    """Precomputed sampling index over the training split."""

    trajectories: List[Trajectory]
    tc_eligible: List[int]       # long enough for margin-separated negatives
    perm_time_eligible: List[int]
    n_views: int


def build_index(trajectories: Sequence[Trajectory], loss: LossConfig,
                perm_times: int = 4) -> SampleIndex:
    trajectories = list(trajectories)
    if not trajectories:
        raise ConfigError("empty training split")
    tc_ok = [i for i, t in enumerate(trajectories) if t.length > 2 * loss.neg_margin]
    if not tc_ok:
        raise ShapeError(f"no trajectory longer than 2 * neg_margin = {2 * loss.neg_margin}")
    perm_ok = [i for i, t in enumerate(trajectories) if t.length >= perm_times]
    return SampleIndex(trajectories=trajectories, tc_eligible=tc_ok,
                       perm_time_eligible=perm_ok, n_views=trajectories[0].n_views)


def _negative_times(length: int, anchor: int, margin: int) -> np.ndarray:
    times = np.arange(length)
    return times[np.abs(times - anchor) >= margin]


def sample_anchor_indices(index: SampleIndex, loss: LossConfig,
                          rng: np.random.Generator) -> tuple:
    """One anchor draw: (trajectory, time, is_fpv_anchor, view, negative times).

    The anchor time is uniform over the trajectory; negatives are uniform
    (with replacement) over the times at least neg_margin away; the camera
    for the opposite stream is uniform per anchor.
    """
    ti = index.tc_eligible[int(rng.integers(len(index.tc_eligible)))]
    traj = index.trajectories[ti]
    a = int(rng.integers(traj.length))
    is_fpv = bool(rng.integers(2))
    view = int(rng.integers(index.n_views))
    pool = _negative_times(traj.length, a, loss.neg_margin)
    negs = pool[rng.integers(len(pool), size=loss.n_negatives)]
    return ti, a, is_fpv, view, negs


def sample_tc_batch(index: SampleIndex, loss: LossConfig, anchors: int,
                    rng: np.random.Generator) -> TCBatch:
    f_anchor, t_pos, t_neg = [], [], []
    t_anchor, f_pos, f_neg = [], [], []
    meta = {"fpv": [], "tpv": []}
    for _ in range(anchors):
        ti, a, is_fpv, view, negs = sample_anchor_indices(index, loss, rng)
        traj = index.trajectories[ti]
        if is_fpv:
            f_anchor.append(traj.fpv[a])
            t_pos.append(traj.tpv[view, a])
            t_neg.append(traj.tpv[view, negs])
            meta["fpv"].append((ti, a, view, negs))
        else:
            t_anchor.append(traj.tpv[view, a])
            f_pos.append(traj.fpv[a])
            f_neg.append(traj.fpv[negs])
            meta["tpv"].append((ti, a, view, negs))
    shape = index.trajectories[0].fpv.shape[1:]
    empty = np.zeros((0,) + shape, dtype=np.float32)
    empty_neg = np.zeros((0, loss.n_negatives) + shape, dtype=np.float32)
    return TCBatch(
        fpv_anchor=np.stack(f_anchor) if f_anchor else empty,
        tpv_positive=np.stack(t_pos) if t_pos else empty,
        tpv_negative=np.stack(t_neg) if t_neg else empty_neg,
        tpv_anchor=np.stack(t_anchor) if t_anchor else empty,
        fpv_positive=np.stack(f_pos) if f_pos else empty,
        fpv_negative=np.stack(f_neg) if f_neg else empty_neg,
        meta=meta,
    )


def sample_permute_batch(index: SampleIndex, perm_times: int, perm_views: int,
                         rng: np.random.Generator) -> PermuteBatch:
    if not index.perm_time_eligible:
        raise ShapeError(f"no trajectory with at least {perm_times} frames")
    if index.n_views < perm_views:
        raise ShapeError(f"need {perm_views} cameras, dataset has {index.n_views}")
    ti = index.perm_time_eligible[int(rng.integers(len(index.perm_time_eligible)))]
    traj = index.trajectories[ti]
    view = int(rng.integers(index.n_views))
    times = rng.choice(traj.length, size=perm_times, replace=False)
    tj = index.perm_time_eligible[int(rng.integers(len(index.perm_time_eligible)))]
    traj_v = index.trajectories[tj]
    t = int(rng.integers(traj_v.length))
    views = rng.choice(index.n_views, size=perm_views, replace=False)
    return PermuteBatch(
        time_frames=traj.tpv[view][times],
        view_frames=traj_v.tpv[views, t],
        meta={"time": (ti, view, times), "view": (tj, t, views)},
    )


def sample_single_view_batch(index: SampleIndex, loss: LossConfig, anchors: int,
                             rng: np.random.Generator) -> SingleViewTCBatch:
    """Baseline sampler: anchors from the egocentric stream with the
    temporally adjacent frame as positive."""
    anchor, pos, neg, meta = [], [], [], []
    for _ in range(anchors):
        ti = index.tc_eligible[int(rng.integers(len(index.tc_eligible)))]
        traj = index.trajectories[ti]
        a = int(rng.integers(traj.length))
        candidates = [t for t in (a - 1, a + 1) if 0 <= t < traj.length]
        p = candidates[int(rng.integers(len(candidates)))]
        pool = _negative_times(traj.length, a, loss.neg_margin)
        negs = pool[rng.integers(len(pool), size=loss.n_negatives)]
        anchor.append(traj.fpv[a])
        pos.append(traj.fpv[p])
        neg.append(traj.fpv[negs])
        meta.append((ti, a, p, negs))
    return SingleViewTCBatch(anchor=np.stack(anchor), positive=np.stack(pos),
                             negative=np.stack(neg), meta={"draws": meta})


@dataclass
class TrainResult:
    model: DualAE
    log_rows: List[dict]
    eval_rows: List[Tuple[int, float]]
    best_step: int
    best_alignment: Optional[float]
    final_alignment: Optional[float]
    best_path: Optional[Path] = None
    final_path: Optional[Path] = None


def train(manifest: Manifest, config: TrainConfig, out_dir=None,
          progress: Optional[Callable[[int, dict], None]] = None) -> TrainResult:
    """Run the optimization loop over the manifest's training split.

    Writes (when out_dir is given): best.egw, final.egw, train_log.csv with
    one row per step, and eval_log.csv with one row per evaluation.
    """
    config = config.validate()
    train_trajs = load_split(manifest, "train")
    test_trajs = load_split(manifest, "test")
    index = build_index(train_trajs, config.loss, config.perm_times)
    model = DualAE(config.model_config(manifest.env.resolution), seed=config.seed)
    state = AdamState.for_params(model.params, lr=config.lr)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x7121]))

    def evaluate() -> Optional[float]:
        if not test_trajs:
            return None
        return eval_alignment(model, test_trajs, split="test").mean

    log_rows: List[dict] = []
    eval_rows: List[Tuple[int, float]] = []
    best = (None, 0, None)  # (alignment, step, params snapshot)
    use_permute = config.dim_v > 0 and not config.fpv_only
    for step_i in range(1, config.steps + 1):
        if config.fpv_only:
            batch = sample_single_view_batch(index, config.loss, config.anchors, rng)
        else:
            tc = sample_tc_batch(index, config.loss, config.anchors, rng)
            permute = (sample_permute_batch(index, config.perm_times, config.perm_views, rng)
                       if use_permute else None)
            step_batch = StepBatch(tc=tc, permute=permute)
        ad.zero_gradients(model.params.values())
        with ad.Tape():
            if config.fpv_only:
                loss, breakdown = single_view_total_loss(model, batch, config.loss)
            else:
                loss, breakdown = total_loss(model, step_batch, config.loss, rng=rng,
                                             use_vmatch=config.use_vmatch)
            ad.backward(loss)
        adam_step(model.params, state)
        row = {"step": step_i, **breakdown}
        log_rows.append(row)
        if progress is not None:
            progress(step_i, row)
        if config.eval_every and step_i % config.eval_every == 0:
            err = evaluate()
            if err is not None:
                eval_rows.append((step_i, err))
                if best[0] is None or err < best[0]:
                    best = (err, step_i, model.state_copy())

    final_err = evaluate()
    if final_err is not None and (not eval_rows or eval_rows[-1][0] != config.steps):
        eval_rows.append((config.steps, final_err))
        if best[0] is None or final_err < best[0]:
            best = (final_err, config.steps, model.state_copy())

    result = TrainResult(model=model, log_rows=log_rows, eval_rows=eval_rows,
                         best_step=best[1] if best[0] is not None else config.steps,
                         best_alignment=best[0], final_alignment=final_err)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        final_path = out_dir / "final.egw"
        model.save(final_path, extra_meta={"train": {"step": config.steps,
                                                     "seed": config.seed}})
        best_path = out_dir / "best.egw"
        if best[0] is not None:
            snapshot = DualAE(model.config)
            snapshot.load_state(best[2])
            snapshot.save(best_path, extra_meta={"train": {"step": best[1],
                                                           "seed": config.seed,
                                                           "alignment": best[0]}})
        else:
            model.save(best_path, extra_meta={"train": {"step": config.steps,
                                                        "seed": config.seed}})
        with open(out_dir / "train_log.csv", "w", newline="") as f:
            w = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
            w.writeheader()
            for row in log_rows:
                w.writerow({k: row[k] for k in LOG_COLUMNS})
        with open(out_dir / "eval_log.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "alignment_error"])
            for s, e in eval_rows:
                w.writerow([s, f"{e:.10g}"])
        result.best_path = best_path
        result.final_path = final_path
    return result
