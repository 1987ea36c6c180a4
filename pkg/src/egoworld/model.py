"""Dual auto-encoder with a split latent: a state part shared across views
and a viewpoint part.

Two encoder/decoder pairs with identical architecture but separate weights,
one for the egocentric stream and one for the fixed-camera streams (a single
shared pair in the baseline configuration). Each encoder maps a frame to a
latent vector z whose first dim_h entries are the state representation and
whose remaining dim_v entries are the viewpoint representation; slicing z at
dim_h recovers the two parts exactly.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Tuple, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import ConfigError, ShapeError

FPV, TPV = "fpv", "tpv"


@dataclass(frozen=True)
class ModelConfig:
    resolution: int = 32
    in_channels: int = 3
    channels: Tuple[int, ...] = (16, 32, 64, 64)
    kernel: int = 4
    stride: int = 2
    dim_h: int = 16
    dim_v: int = 8
    shared_encoder: bool = False

    @property
    def dim_z(self) -> int:
        return self.dim_h + self.dim_v

    @property
    def depth(self) -> int:
        return len(self.channels)

    @property
    def feature_side(self) -> int:
        return self.resolution >> self.depth

    @property
    def feature_size(self) -> int:
        return self.channels[-1] * self.feature_side * self.feature_side

    def validate(self) -> "ModelConfig":
        if self.dim_h < 1 or self.dim_v < 0:
            raise ConfigError(f"bad latent dims h={self.dim_h} v={self.dim_v}")
        if self.kernel != 4 or self.stride != 2:
            raise ConfigError("the conv stack assumes kernel 4 / stride 2 layers")
        if self.resolution % (1 << self.depth) != 0 or self.feature_side < 1:
            raise ConfigError(
                f"resolution {self.resolution} not divisible by 2^{self.depth}; "
                "each pad-1 conv layer halves the side exactly")
        if self.shared_encoder and self.dim_v != 0:
            raise ConfigError("the shared-encoder baseline uses dim_v = 0")
        return self

    def to_meta(self) -> dict:
        return {
            "resolution": self.resolution, "in_channels": self.in_channels,
            "channels": list(self.channels), "kernel": self.kernel, "stride": self.stride,
            "dim_h": self.dim_h, "dim_v": self.dim_v, "shared_encoder": self.shared_encoder,
        }

    @classmethod
    def from_meta(cls, meta: dict) -> "ModelConfig":
        meta = dict(meta)
        meta["channels"] = tuple(meta["channels"])
        return cls(**meta).validate()


@dataclass
class LatentSplit:
    """Full latent z together with its state part h and viewpoint part v."""

    h: Tensor
    v: Tensor
    z: Tensor


def frames_to_input(frames: Union[np.ndarray, Tensor]) -> Tensor:
    """(N,H,W,C) or (H,W,C) frames in [0,1] -> float64 NCHW tensor."""
    if isinstance(frames, Tensor):
        return frames
    arr = np.asarray(frames, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"expected (N,H,W,C) frames, got shape {arr.shape}")
    return Tensor(np.moveaxis(arr, 3, 1))


def output_to_frames(x: Tensor) -> np.ndarray:
    """NCHW decoder output -> (N,H,W,C) float array."""
    return np.moveaxis(x.data, 1, 3)


class DualAE:
    """Encoder/decoder pairs for both streams, parameters keyed by name."""

    def __init__(self, config: ModelConfig = ModelConfig(), seed: int = 0):
        self.config = config.validate()
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x0ae]))
        if config.shared_encoder:
            pairs = [("enc", "dec")]
        else:
            pairs = [("enc_fpv", "dec_fpv"), ("enc_tpv", "dec_tpv")]
        for enc, dec in pairs:
            self._init_encoder(enc, rng)
            self._init_decoder(dec, rng)

    # -- construction -------------------------------------------------------

    def _add(self, name: str, arr: np.ndarray) -> None:
        self.params[name] = Tensor(arr, requires_grad=True)

    def _init_encoder(self, prefix: str, rng) -> None:
        cfg = self.config
        cin = cfg.in_channels
        k = cfg.kernel
        for i, cout in enumerate(cfg.channels):
            std = np.sqrt(2.0 / (cin * k * k))
            self._add(f"{prefix}.conv{i}.w", rng.standard_normal((cout, cin, k, k)) * std)
            self._add(f"{prefix}.conv{i}.b", rng.standard_normal(cout) * 0.01)
            cin = cout
        std = np.sqrt(1.0 / cfg.feature_size)
        self._add(f"{prefix}.dense.w", rng.standard_normal((cfg.feature_size, cfg.dim_z)) * std)
        # small nonzero bias keeps latents off the exact-zero point that the
        # cosine critic rejects, even when a narrow relu stack goes dark
        self._add(f"{prefix}.dense.b", rng.standard_normal(cfg.dim_z) * 0.01)

    def _init_decoder(self, prefix: str, rng) -> None:
        cfg = self.config
        k = cfg.kernel
        std = np.sqrt(1.0 / max(cfg.dim_z, 1))
        self._add(f"{prefix}.dense.w", rng.standard_normal((cfg.dim_z, cfg.feature_size)) * std)
        self._add(f"{prefix}.dense.b", rng.standard_normal(cfg.feature_size) * 0.01)
        chain = list(cfg.channels[::-1][1:]) + [cfg.in_channels]
        cin = cfg.channels[-1]
        for i, cout in enumerate(chain):
            std = np.sqrt(2.0 / (cin * k * k))
            self._add(f"{prefix}.tconv{i}.w", rng.standard_normal((cin, cout, k, k)) * std)
            self._add(f"{prefix}.tconv{i}.b", rng.standard_normal(cout) * 0.01)
            cin = cout

    # -- forward ------------------------------------------------------------

    def _prefix(self, kind: str, branch: str) -> str:
        if branch not in (FPV, TPV):
            raise ConfigError(f"unknown branch {branch!r}")
        return kind if self.config.shared_encoder else f"{kind}_{branch}"

    def encode(self, frames: Union[np.ndarray, Tensor], branch: str) -> LatentSplit:
        """Map frames through the branch's encoder and split the latent."""
        cfg = self.config
        x = frames_to_input(frames)
        if x.shape[1:] != (cfg.in_channels, cfg.resolution, cfg.resolution):
            raise ShapeError(f"encode: frame shape {x.shape[1:]} does not match the "
                             f"configured {cfg.in_channels}x{cfg.resolution}x{cfg.resolution}")
        p = self._prefix("enc", branch)
        for i in range(cfg.depth):
            w = self.params[f"{p}.conv{i}.w"]
            b = self.params[f"{p}.conv{i}.b"]
            x = ad.conv2d(ad.pad2d(x, 1), w, stride=cfg.stride)
            x = ad.relu(ad.add(x, ad.reshape(b, (1, w.shape[0], 1, 1))))
        x = ad.reshape(x, (x.shape[0], cfg.feature_size))
        z = ad.add(ad.matmul(x, self.params[f"{p}.dense.w"]), self.params[f"{p}.dense.b"])
        h = ad.slice_axis(z, 1, 0, cfg.dim_h)
        v = ad.slice_axis(z, 1, cfg.dim_h, cfg.dim_z)
        return LatentSplit(h=h, v=v, z=z)

    def decode(self, z: Union[np.ndarray, Tensor], branch: str) -> Tensor:
        """Map latents back to frames; output is NCHW with values in (0,1)."""
        cfg = self.config
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != cfg.dim_z:
            raise ShapeError(f"decode: latent shape {z.shape} does not match dim_z={cfg.dim_z}")
        p = self._prefix("dec", branch)
        x = ad.relu(ad.add(ad.matmul(z, self.params[f"{p}.dense.w"]),
                           self.params[f"{p}.dense.b"]))
        x = ad.reshape(x, (z.shape[0], cfg.channels[-1], cfg.feature_side, cfg.feature_side))
        for i in range(cfg.depth):
            w = self.params[f"{p}.tconv{i}.w"]
            b = self.params[f"{p}.tconv{i}.b"]
            x = ad.crop2d(ad.transposed_conv2d(x, w, stride=cfg.stride), 1)
            x = ad.add(x, ad.reshape(b, (1, w.shape[1], 1, 1)))
            x = ad.sigmoid(x) if i == cfg.depth - 1 else ad.relu(x)
        return x

    def reconstruct(self, frames: Union[np.ndarray, Tensor], branch: str) -> Tuple[LatentSplit, Tensor]:
        latent = self.encode(frames, branch)
        return latent, self.decode(latent.z, branch)

    # -- parameter plumbing --------------------------------------------------

    def parameters(self) -> "OrderedDict[str, Tensor]":
        return self.params

    def named_subset(self, prefix: str) -> "OrderedDict[str, Tensor]":
        return OrderedDict((n, p) for n, p in self.params.items() if n.startswith(prefix))

    def encoder_params(self, branch: str) -> "OrderedDict[str, Tensor]":
        return self.named_subset(self._prefix("enc", branch) + ".")

    def decoder_params(self, branch: str) -> "OrderedDict[str, Tensor]":
        return self.named_subset(self._prefix("dec", branch) + ".")

    def state_copy(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.params.items())

    def load_state(self, state) -> None:
        for name, p in self.params.items():
            if name not in state:
                raise ConfigError(f"state missing parameter {name!r}")
            if state[name].shape != p.data.shape:
                raise ShapeError(f"parameter {name!r}: shape {state[name].shape} != "
                                 f"{p.data.shape}")
            p.data[...] = state[name]
        p_names = set(self.params)
        extra = [n for n in state if n not in p_names]
        if extra:
            raise ConfigError(f"state has unknown parameters: {extra[:3]}")

    def save(self, path, extra_meta: Optional[dict] = None) -> None:
        meta = {"model": self.config.to_meta()}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, self.params, meta=meta)

    @classmethod
    def load(cls, path) -> Tuple["DualAE", dict]:
        state, meta = load_checkpoint(path)
        if "model" not in meta:
            raise ConfigError(f"{path}: checkpoint has no model configuration")
        model = cls(ModelConfig.from_meta(meta["model"]))
        model.load_state(state)
        return model, meta
