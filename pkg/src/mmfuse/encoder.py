"""Patch-location encoder, projection heads and mirror decoder.

An image is cut into a ``g x g`` grid of non-overlapping patches.  A shared
per-patch stack maps every patch to a ``d_loc`` feature vector (the location
features); an aggregator stack maps the flattened grid to the latent vector.
All functions operate on batches ``[N, side, side]``; single-image wrappers
are provided for convenience.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import diffcore as dc
from .diffcore import ShapeError, Tensor

EMBED_DIM = 64


@dataclass(frozen=True)
class EncoderConfig:
    image_side: int = 16
    patch_side: int = 4
    d_loc: int = 32
    d_z: int = 64
    hidden: tuple[int, ...] = (64,)
    embed_dim: int = EMBED_DIM

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if min(self.image_side, self.patch_side, self.d_loc, self.d_z, self.embed_dim) <= 0:
            raise ValueError("encoder sizes must be positive")
        if self.image_side % self.patch_side:
            raise ValueError(f"patch_side {self.patch_side} does not divide image_side {self.image_side}")

    @property
    def grid(self) -> int:
        return self.image_side // self.patch_side

    @property
    def n_locations(self) -> int:
        return self.grid**2

    @property
    def patch_pixels(self) -> int:
        return self.patch_side**2


class EncoderOutput(NamedTuple):
    locations: Tensor  # [N, L, d_loc]
    latent: Tensor  # [N, d_z]


Params = dict[str, Tensor]


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def _stack(rng, prefix: str, widths: list[int]) -> dict[str, np.ndarray]:
    out = {}
    for i, (fi, fo) in enumerate(zip(widths[:-1], widths[1:])):
        out[f"{prefix}.{i}.W"] = _glorot(rng, fi, fo)
        out[f"{prefix}.{i}.b"] = np.zeros(fo)
    return out


def init_encoder(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "enc") -> dict[str, np.ndarray]:
    patch = [cfg.patch_pixels, *cfg.hidden, cfg.d_loc]
    agg = [cfg.n_locations * cfg.d_loc, *cfg.hidden, cfg.d_z]
    return {**_stack(rng, f"{prefix}.patch", patch), **_stack(rng, f"{prefix}.agg", agg)}


def init_decoder(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "dec") -> dict[str, np.ndarray]:
    agg = [cfg.d_z, *reversed(cfg.hidden), cfg.n_locations * cfg.d_loc]
    patch = [cfg.d_loc, *reversed(cfg.hidden), cfg.patch_pixels]
    return {**_stack(rng, f"{prefix}.agg", agg), **_stack(rng, f"{prefix}.patch", patch)}


def init_location_head(cfg: EncoderConfig, rng: np.random.Generator, prefix: str = "phi") -> dict[str, np.ndarray]:
    return _stack(rng, prefix, [cfg.d_loc, cfg.embed_dim, cfg.embed_dim])


def _layers(params: Params, prefix: str) -> list[tuple[Tensor, Tensor]]:
    layers = []
    i = 0
    while f"{prefix}.{i}.W" in params:
        layers.append((params[f"{prefix}.{i}.W"], params[f"{prefix}.{i}.b"]))
        i += 1
    if not layers:
        raise KeyError(f"no layers under {prefix!r}")
    return layers


def mlp(x: Tensor, layers: list[tuple[Tensor, Tensor]], final_relu: bool) -> Tensor:
    for i, (w, b) in enumerate(layers):
        if x.shape[-1] != w.shape[0]:
            raise ShapeError("affine", x.shape, w.shape)
        x = x @ w + b
        if i < len(layers) - 1 or final_relu:
            x = dc.relu(x)
    return x


def patchify(images: Tensor, cfg: EncoderConfig) -> Tensor:
    """[N, S, S] -> [N, L, p*p], locations in row-major grid order."""
    n = images.shape[0]
    g, p = cfg.grid, cfg.patch_side
    x = images.reshape(n, g, p, g, p)
    x = dc.transpose(x, (0, 1, 3, 2, 4))
    return x.reshape(n, g * g, p * p)


def unpatchify(patches: Tensor, cfg: EncoderConfig) -> Tensor:
    n = patches.shape[0]
    g, p = cfg.grid, cfg.patch_side
    x = patches.reshape(n, g, g, p, p)
    x = dc.transpose(x, (0, 1, 3, 2, 4))
    return x.reshape(n, g * p, g * p)


def encode_batch(params: Params, images, cfg: EncoderConfig, prefix: str = "enc") -> EncoderOutput:
    images = dc.as_tensor(images)
    if images.ndim != 3 or images.shape[1:] != (cfg.image_side, cfg.image_side):
        raise ShapeError("encode", images.shape, (None, cfg.image_side, cfg.image_side))
    n, L = images.shape[0], cfg.n_locations
    patches = patchify(images, cfg).reshape(n * L, cfg.patch_pixels)
    loc = mlp(patches, _layers(params, f"{prefix}.patch"), final_relu=True)
    locations = loc.reshape(n, L, cfg.d_loc)
    latent = mlp(loc.reshape(n, L * cfg.d_loc), _layers(params, f"{prefix}.agg"), final_relu=False)
    return EncoderOutput(locations, latent)


def encode(params: Params, image, cfg: EncoderConfig, prefix: str = "enc") -> EncoderOutput:
    """Encode one ``[side, side]`` image; returns locations ``[L, d_loc]`` and latent ``[d_z]``."""
    image = dc.as_tensor(image)
    if image.shape != (cfg.image_side, cfg.image_side):
        raise ShapeError("encode", image.shape, (cfg.image_side, cfg.image_side))
    out = encode_batch(params, image.reshape(1, cfg.image_side, cfg.image_side), cfg, prefix)
    return EncoderOutput(out.locations.reshape(cfg.n_locations, cfg.d_loc), out.latent.reshape(cfg.d_z))


def decode_batch(params: Params, z, cfg: EncoderConfig, prefix: str = "dec") -> Tensor:
    z = dc.as_tensor(z)
    n, L = z.shape[0], cfg.n_locations
    grid = mlp(z, _layers(params, f"{prefix}.agg"), final_relu=True)
    per_loc = grid.reshape(n * L, cfg.d_loc)
    pix = mlp(per_loc, _layers(params, f"{prefix}.patch"), final_relu=False)
    return unpatchify(pix.reshape(n, L, cfg.patch_pixels), cfg)


def decode(params: Params, z, cfg: EncoderConfig, prefix: str = "dec") -> Tensor:
    z = dc.as_tensor(z)
    return decode_batch(params, z.reshape(1, cfg.d_z), cfg, prefix).reshape(cfg.image_side, cfg.image_side)


def project_location(params: Params, locations, prefix: str = "phi") -> Tensor:
    """Shared two-layer per-location head (kernel-size-1 analogue).

    Accepts ``[L, d_loc]`` or ``[N, L, d_loc]``; each row is mapped independently.
    """
    locations = dc.as_tensor(locations)
    layers = _layers(params, prefix)
    w0 = layers[0][0]
    if locations.shape[-1] != w0.shape[0]:
        raise ShapeError("project_location", locations.shape, w0.shape)
    lead = locations.shape[:-1]
    flat = locations.reshape(int(np.prod(lead)), locations.shape[-1])
    out = mlp(flat, layers, final_relu=False)
    return out.reshape(*lead, out.shape[-1])


def project_latent(z, head=None) -> Tensor:
    """Latent projection; identity unless an explicit head callable is supplied."""
    z = dc.as_tensor(z)
    return z if head is None else head(z)


@dataclass
class ModelParams:
    """Encoder, location-head and decoder parameters for both modalities."""

    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: EncoderConfig, seed: int, n_modalities: int = 2, decoders: bool = True,
             classifier: bool = True) -> "ModelParams":
        rng = np.random.default_rng(seed)
        arrays: dict[str, np.ndarray] = {}
        for m in range(1, n_modalities + 1):
            arrays.update(init_encoder(cfg, rng, f"enc{m}"))
            arrays.update(init_location_head(cfg, rng, f"phi{m}"))
            if decoders:
                arrays.update(init_decoder(cfg, rng, f"dec{m}"))
            if classifier:
                arrays[f"cls{m}.w"] = np.zeros(cfg.d_z)
                arrays[f"cls{m}.b"] = np.zeros(1)
        return cls(arrays)

    def tensors(self, requires_grad: bool = True) -> Params:
        return {k: Tensor(v, requires_grad=requires_grad) for k, v in self.arrays.items()}
