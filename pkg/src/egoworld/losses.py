"""Training objectives for the dual auto-encoder.

Three families, combined as alpha * contrastive + beta * permutation +
reconstruction:

- a time-contrastive objective in InfoNCE form over anchor/positive/negative
  frame sets, plus an L2 matching term pulling same-timestep latents together,
  with stop-gradients on the positive/negative scores and on the egocentric
  side of the matching term to block representation collapse;
- a permutation objective that swaps viewpoint parts across timesteps of one
  camera and state parts across cameras at one timestep, requiring the
  fixed-camera decoder to still reconstruct the right frames (never applied
  to the egocentric branch, whose viewpoint tracks the agent's own motion);
- a plain sum-of-squares reconstruction objective over every frame that
  passes through the model in a step.

A literal view-similarity ablation (cosine pulled down for same-camera pairs,
clamped cosine for cross-camera pairs) is included for comparison runs only.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ShapeError
from .model import FPV, TPV, DualAE, frames_to_input


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0        # weight of the contrastive family
    beta: float = 1.0         # weight of the permutation family
    tau: float = 5.0          # critic temperature
    neg_margin: int = 5       # minimum |t - anchor| for negatives, in frames
    n_negatives: int = 16     # negatives per anchor

    def validate(self) -> "LossConfig":
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be nonnegative")
        if self.tau <= 0:
            raise ConfigError("tau must be positive")
        if self.neg_margin < 2:
            raise ConfigError("neg_margin must be at least 2")
        if self.n_negatives < 1:
            raise ConfigError("need at least one negative per anchor")
        return self


@dataclass
class TCBatch:
    """Anchor/positive/negative frame sets for both anchor directions.

    Egocentric anchors pair with the same-timestep frame of one fixed camera
    and draw negatives from that camera's stream; fixed-camera anchors pair
    with the egocentric frame and draw negatives from the egocentric stream.
    Either direction may be empty.
    """

    fpv_anchor: np.ndarray     # (Na, H, W, C)
    tpv_positive: np.ndarray   # (Na, H, W, C)
    tpv_negative: np.ndarray   # (Na, K, H, W, C)
    tpv_anchor: np.ndarray     # (Nt, H, W, C)
    fpv_positive: np.ndarray   # (Nt, H, W, C)
    fpv_negative: np.ndarray   # (Nt, K, H, W, C)
    meta: dict = field(default_factory=dict)


@dataclass
class PermuteBatch:
    """Frames for the permutation objective: one camera at distinct timesteps
    and distinct cameras at one timestep."""

    time_frames: np.ndarray    # (k, H, W, C) same camera, different timesteps
    view_frames: np.ndarray    # (m, H, W, C) same timestep, different cameras
    meta: dict = field(default_factory=dict)


@dataclass
class StepBatch:
    tc: TCBatch
    permute: Optional[PermuteBatch] = None


def critic_score(h1: Tensor, h2: Tensor, tau: float) -> Tensor:
    """exp(cos(h1, h2) * tau), batched over rows for 2-d inputs."""
    axis = 1 if h1.ndim == 2 else 0
    return ad.exp(ad.mul(ad.cosine_similarity(h1, h2, axis=axis), tau))


def sample_derangement(rng: np.random.Generator, n: int) -> np.ndarray:
    """Uniform permutation of [0, n) without fixed points, by rejection."""
    if n < 2:
        raise ConfigError("derangement needs at least two elements")
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == np.arange(n)):
            return perm


def _perm_matrix(perm: np.ndarray) -> Tensor:
    mat = np.zeros((len(perm), len(perm)))
    mat[np.arange(len(perm)), perm] = 1.0
    return Tensor(mat)


def _rows_cos(a: Tensor, b: Tensor) -> Tensor:
    """cos between row i of a (n,d) and every b[i,k] of b (n,K,d) -> (n,K)."""
    n, d = a.shape
    dots = ad.tsum(ad.mul(ad.reshape(a, (n, 1, d)), b), axis=2)
    na = ad.reshape(ad.l2_norm(a, axis=1), (n, 1))
    nb = ad.l2_norm(b, axis=2)
    return ad.div(dots, ad.mul(na, nb))


def _info_nce(h_anchor: Tensor, h_pos: Tensor, h_neg: Tensor, tau: float) -> Tensor:
    """-log(d(A,P) / (d(A,P) + sum_i d(A,N_i))) averaged over anchors, with
    d the exponentiated scaled cosine. Callers stop-gradient P and N."""
    d_pos = ad.exp(ad.mul(ad.cosine_similarity(h_anchor, h_pos, axis=1), tau))
    d_neg = ad.exp(ad.mul(_rows_cos(h_anchor, h_neg), tau))
    denom = ad.add(d_pos, ad.tsum(d_neg, axis=1))
    return ad.tmean(ad.sub(ad.log(denom), ad.log(d_pos)))


def _match_term(h_tpv: Tensor, h_fpv_ref: Tensor) -> Tensor:
    """Mean L2 distance of same-timestep latent pairs; the egocentric side is
    the stop-gradient reference, so only the fixed-camera encoder moves."""
    diff = ad.sub(h_tpv, ad.stop_grad(h_fpv_ref))
    return ad.tmean(ad.l2_norm(diff, axis=1))


def _sum_sq(x: Tensor) -> Tensor:
    return ad.tsum(ad.square(x))


def _zero() -> Tensor:
    return Tensor(0.0)


class _Encoded:
    """One encoder pass per stream per step; role tensors are row slices."""

    def __init__(self, model: DualAE, batch: StepBatch):
        tc = batch.tc
        self.na = tc.fpv_anchor.shape[0]
        self.nt = tc.tpv_anchor.shape[0]
        if self.na + self.nt == 0:
            raise ShapeError("contrastive batch is empty")
        self.k_neg = tc.tpv_negative.shape[1] if self.na else tc.fpv_negative.shape[1]
        frame_shape = (tc.fpv_anchor.shape[1:] if self.na else tc.tpv_anchor.shape[1:])
        flat = (-1,) + tuple(frame_shape)

        fpv_parts = [tc.fpv_anchor, tc.fpv_positive, tc.fpv_negative.reshape(flat)]
        tpv_parts = [tc.tpv_anchor, tc.tpv_positive, tc.tpv_negative.reshape(flat)]
        self.n_time = self.n_view = 0
        if batch.permute is not None:
            self.n_time = batch.permute.time_frames.shape[0]
            self.n_view = batch.permute.view_frames.shape[0]
            tpv_parts += [batch.permute.time_frames, batch.permute.view_frames]
        self.fpv_frames = np.concatenate([p.astype(np.float64) for p in fpv_parts], axis=0)
        self.tpv_frames = np.concatenate([p.astype(np.float64) for p in tpv_parts], axis=0)

        self.fpv_latent = model.encode(self.fpv_frames, FPV)
        self.tpv_latent = model.encode(self.tpv_frames, TPV)

        dim_h = model.config.dim_h
        h_f, h_t = self.fpv_latent.h, self.tpv_latent.h
        na, nt, k = self.na, self.nt, self.k_neg
        self.h_fpv_anchor = ad.slice_axis(h_f, 0, 0, na)
        self.h_fpv_positive = ad.slice_axis(h_f, 0, na, na + nt)
        self.h_fpv_negative = ad.reshape(
            ad.slice_axis(h_f, 0, na + nt, na + nt + nt * k), (nt, k, dim_h))
        self.h_tpv_anchor = ad.slice_axis(h_t, 0, 0, nt)
        self.h_tpv_positive = ad.slice_axis(h_t, 0, nt, nt + na)
        self.h_tpv_negative = ad.reshape(
            ad.slice_axis(h_t, 0, nt + na, nt + na + na * k), (na, k, dim_h))
        base = nt + na + na * k
        self.z_time = ad.slice_axis(self.tpv_latent.z, 0, base, base + self.n_time)
        self.z_view = ad.slice_axis(self.tpv_latent.z, 0, base + self.n_time,
                                    base + self.n_time + self.n_view)


def time_contrastive_loss(model: DualAE, batch: TCBatch,
                          config: LossConfig) -> Dict[str, Tensor]:
    """Both directional InfoNCE terms plus the matching term."""
    enc = _Encoded(model, StepBatch(tc=batch))
    return _tc_terms(enc, config)


def _tc_terms(enc: _Encoded, config: LossConfig) -> Dict[str, Tensor]:
    tau = config.tau
    l_f = (_info_nce(enc.h_fpv_anchor, ad.stop_grad(enc.h_tpv_positive),
                     ad.stop_grad(enc.h_tpv_negative), tau) if enc.na else _zero())
    l_t = (_info_nce(enc.h_tpv_anchor, ad.stop_grad(enc.h_fpv_positive),
                     ad.stop_grad(enc.h_fpv_negative), tau) if enc.nt else _zero())
    pairs_t, pairs_f = [], []
    if enc.na:
        pairs_t.append(enc.h_tpv_positive)
        pairs_f.append(enc.h_fpv_anchor)
    if enc.nt:
        pairs_t.append(enc.h_tpv_anchor)
        pairs_f.append(enc.h_fpv_positive)
    l_match = _match_term(ad.concat(pairs_t, 0) if len(pairs_t) > 1 else pairs_t[0],
                          ad.concat(pairs_f, 0) if len(pairs_f) > 1 else pairs_f[0])
    total = ad.add(ad.add(l_f, l_t), l_match)
    return {"l_tc_f": l_f, "l_tc_t": l_t, "l_match": l_match, "total": total}


def _split_z(model: DualAE, z: Tensor) -> Tuple[Tensor, Tensor]:
    cfg = model.config
    return (ad.slice_axis(z, 1, 0, cfg.dim_h),
            ad.slice_axis(z, 1, cfg.dim_h, cfg.dim_z))


def _permute_terms(model: DualAE, z_time: Tensor, x_time: np.ndarray,
                   z_view: Tensor, x_view: np.ndarray,
                   time_perm: np.ndarray, view_perm: np.ndarray) -> Dict[str, Tensor]:
    h_t, v_t = _split_z(model, z_time)
    h_w, v_w = _split_z(model, z_view)
    # swap viewpoint parts across timesteps of one camera; targets unchanged
    v_swapped = ad.matmul(_perm_matrix(time_perm), v_t)
    recon_time = model.decode(ad.concat([h_t, v_swapped], 1), TPV)
    diff_t = ad.sub(recon_time, frames_to_input(x_time))
    l_v = ad.tmean(ad.l2_norm(ad.reshape(diff_t, (diff_t.shape[0], -1)), axis=1))
    # swap state parts across cameras at one timestep
    h_swapped = ad.matmul(_perm_matrix(view_perm), h_w)
    recon_view = model.decode(ad.concat([h_swapped, v_w], 1), TPV)
    diff_w = ad.sub(recon_view, frames_to_input(x_view))
    l_h = ad.tmean(ad.l2_norm(ad.reshape(diff_w, (diff_w.shape[0], -1)), axis=1))
    return {"l_v": l_v, "l_h": l_h, "total": ad.add(l_v, l_h)}


def permutation_loss(model: DualAE, batch: PermuteBatch, config: LossConfig,
                     rng: Optional[np.random.Generator] = None,
                     time_perm: Optional[np.ndarray] = None,
                     view_perm: Optional[np.ndarray] = None) -> Dict[str, Tensor]:
    """Viewpoint-part and state-part permutation reconstruction errors.

    Permutations default to fresh uniform derangements from rng; tests may
    inject explicit permutations (including the identity).
    """
    if model.config.dim_v == 0:
        raise ConfigError("permutation loss needs a nonzero viewpoint dimension")
    k, m = batch.time_frames.shape[0], batch.view_frames.shape[0]
    if k < 2 or m < 2:
        raise ShapeError("permutation batch needs at least two frames per group")
    if time_perm is None:
        time_perm = sample_derangement(rng, k)
    if view_perm is None:
        view_perm = sample_derangement(rng, m)
    z_time = model.encode(batch.time_frames, TPV).z
    z_view = model.encode(batch.view_frames, TPV).z
    return _permute_terms(model, z_time, batch.time_frames, z_view, batch.view_frames,
                          np.asarray(time_perm), np.asarray(view_perm))


def reconstruction_loss(model: DualAE, fpv_frames: Optional[np.ndarray],
                        tpv_frames: Optional[np.ndarray]) -> Tensor:
    """Mean over samples of the per-sample sum of squared pixel errors."""
    total = _zero()
    count = 0
    for frames, branch in ((fpv_frames, FPV), (tpv_frames, TPV)):
        if frames is None or frames.shape[0] == 0:
            continue
        _, recon = model.reconstruct(frames, branch)
        total = ad.add(total, _sum_sq(ad.sub(recon, frames_to_input(frames))))
        count += frames.shape[0]
    if count == 0:
        raise ShapeError("reconstruction loss needs at least one frame")
    return ad.div(total, float(count))


def _cos_matrix(v: Tensor) -> Tensor:
    n = v.shape[0]
    vn = ad.div(v, ad.reshape(ad.l2_norm(v, axis=1), (n, 1)))
    return ad.matmul(vn, ad.transpose2d(vn))


def _upper_mean(mat: Tensor) -> Tensor:
    n = mat.shape[0]
    mask = np.triu(np.ones((n, n)), k=1)
    return ad.div(ad.tsum(ad.mul(mat, Tensor(mask))), float(mask.sum()))


def vmatch_loss(model: DualAE, batch: PermuteBatch) -> Dict[str, Tensor]:
    """Ablation objective on the viewpoint part, implemented literally:
    cosine over same-camera pairs plus max(cosine, 0) over cross-camera
    pairs. Used only for comparison runs."""
    if model.config.dim_v == 0:
        raise ConfigError("vmatch loss needs a nonzero viewpoint dimension")
    v_time = model.encode(batch.time_frames, TPV).v
    v_view = model.encode(batch.view_frames, TPV).v
    return _vmatch_terms(v_time, v_view)


def _vmatch_terms(v_time: Tensor, v_view: Tensor) -> Dict[str, Tensor]:
    l_sim = _upper_mean(_cos_matrix(v_time))
    l_dissim = _upper_mean(ad.maximum(_cos_matrix(v_view), Tensor(np.zeros(1))))
    return {"l_vsim": l_sim, "l_vdissim": l_dissim, "total": ad.add(l_sim, l_dissim)}


def total_loss(model: DualAE, batch: StepBatch, config: LossConfig,
               rng: Optional[np.random.Generator] = None,
               time_perm: Optional[np.ndarray] = None,
               view_perm: Optional[np.ndarray] = None,
               use_vmatch: bool = False) -> Tuple[Tensor, Dict[str, float]]:
    """alpha * contrastive + beta * permutation + reconstruction, sharing one
    encoder pass per stream. Returns the scalar plus a per-term breakdown.

    The reconstruction term covers the identity reconstruction of every frame
    loaded for the step (anchors, positives, negatives, permutation frames);
    permuted reconstructions are supervised by their own term only.
    """
    config.validate()
    permute_active = model.config.dim_v > 0 and batch.permute is not None
    enc = _Encoded(model, batch if permute_active else StepBatch(tc=batch.tc))

    tc = _tc_terms(enc, config)

    if permute_active:
        k, m = enc.n_time, enc.n_view
        if time_perm is None:
            time_perm = sample_derangement(rng, k)
        if view_perm is None:
            view_perm = sample_derangement(rng, m)
        if use_vmatch:
            perm = _vmatch_terms(_split_z(model, enc.z_time)[1],
                                 _split_z(model, enc.z_view)[1])
            l_v, l_h = perm["l_vsim"], perm["l_vdissim"]
        else:
            perm = _permute_terms(model, enc.z_time, batch.permute.time_frames,
                                  enc.z_view, batch.permute.view_frames,
                                  np.asarray(time_perm), np.asarray(view_perm))
            l_v, l_h = perm["l_v"], perm["l_h"]
        l_permute = perm["total"]
    else:
        l_v = l_h = l_permute = _zero()

    recon_fpv = model.decode(enc.fpv_latent.z, FPV)
    recon_tpv = model.decode(enc.tpv_latent.z, TPV)
    n_samples = enc.fpv_frames.shape[0] + enc.tpv_frames.shape[0]
    se = ad.add(_sum_sq(ad.sub(recon_fpv, frames_to_input(enc.fpv_frames))),
                _sum_sq(ad.sub(recon_tpv, frames_to_input(enc.tpv_frames))))
    l_recon = ad.div(se, float(n_samples))

    total = ad.add(ad.add(ad.mul(tc["total"], config.alpha),
                          ad.mul(l_permute, config.beta)), l_recon)
    breakdown = {
        "l_tc_f": tc["l_tc_f"].item(), "l_tc_t": tc["l_tc_t"].item(),
        "l_match": tc["l_match"].item(), "l_v": l_v.item(), "l_h": l_h.item(),
        "l_recon": l_recon.item(), "total": total.item(),
    }
    return total, breakdown


@dataclass
class SingleViewTCBatch:
    """Anchor/positive/negative sets drawn from the egocentric stream only,
    for the single-view baseline (positives are temporally adjacent frames)."""

    anchor: np.ndarray     # (Na, H, W, C)
    positive: np.ndarray   # (Na, H, W, C)
    negative: np.ndarray   # (Na, K, H, W, C)
    meta: dict = field(default_factory=dict)


def single_view_total_loss(model: DualAE, batch: SingleViewTCBatch,
                           config: LossConfig) -> Tuple[Tensor, Dict[str, float]]:
    """Contrastive + reconstruction for the single-stream baseline."""
    config.validate()
    na, k = batch.anchor.shape[0], batch.negative.shape[1]
    flat = (-1,) + tuple(batch.anchor.shape[1:])
    frames = np.concatenate([batch.anchor.astype(np.float64),
                             batch.positive.astype(np.float64),
                             batch.negative.reshape(flat).astype(np.float64)], axis=0)
    latent = model.encode(frames, FPV)
    dim_h = model.config.dim_h
    h_anchor = ad.slice_axis(latent.h, 0, 0, na)
    h_pos = ad.slice_axis(latent.h, 0, na, 2 * na)
    h_neg = ad.reshape(ad.slice_axis(latent.h, 0, 2 * na, 2 * na + na * k), (na, k, dim_h))
    l_tc = _info_nce(h_anchor, ad.stop_grad(h_pos), ad.stop_grad(h_neg), config.tau)

    recon = model.decode(latent.z, FPV)
    l_recon = ad.div(_sum_sq(ad.sub(recon, frames_to_input(frames))), float(frames.shape[0]))
    total = ad.add(ad.mul(l_tc, config.alpha), l_recon)
    breakdown = {"l_tc_f": l_tc.item(), "l_tc_t": 0.0, "l_match": 0.0,
                 "l_v": 0.0, "l_h": 0.0, "l_recon": l_recon.item(), "total": total.item()}
    return total, breakdown
