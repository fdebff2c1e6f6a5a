"""InfoNCE estimators, the clipped separable critic, and objective graphs.

An objective graph is a set of directed edges between (modality, level)
endpoints.  Each edge contributes one InfoNCE term whose anchors come from
the source endpoint and whose positives/negatives come from the destination.
Reconstruction, CCA and a supervised reference term can be mixed in as
weighted auxiliary losses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import diffcore as dc
from .diffcore import ContractError, ShapeError, Tensor
from .encoder import EncoderConfig, EncoderOutput, decode_batch, project_latent, project_location

LOCATION = "location"
LATENT = "latent"
LEVELS = (LOCATION, LATENT)


@dataclass(frozen=True)
class CriticConfig:
    clip: float = 20.0
    penalty: float = 4e-2
    embed_dim: int = 64

    def __post_init__(self):
        if self.clip <= 0:
            raise ValueError("clip must be positive")
        if self.penalty < 0:
            raise ValueError("penalty must be nonnegative")
        if self.embed_dim <= 0:
            raise ValueError("embed_dim must be positive")


# --------------------------------------------------------------------------
# critic and estimators
# --------------------------------------------------------------------------


_TANH_ARG_MAX = 18.0


def critic_scores(u: Tensor, v: Tensor, cfg: CriticConfig) -> Tensor:
    """Clipped scores ``c tanh(u v^T / (sqrt(n) c))`` for all anchor/candidate pairs.

    ``u`` is ``[..., N, n]`` and ``v`` is ``[..., M, n]``; returns ``[..., N, M]``.
    """
    u, v = dc.as_tensor(u), dc.as_tensor(v)
    if u.shape[-1] != v.shape[-1] or u.shape[-1] != cfg.embed_dim:
        raise ShapeError("critic", u.shape, v.shape, (cfg.embed_dim,))
    n = cfg.embed_dim
    vt = dc.transpose(v, tuple(range(v.ndim - 2)) + (v.ndim - 1, v.ndim - 2))
    raw = dc.scale(u @ vt, 1.0 / (math.sqrt(n) * cfg.clip))
    # float64 tanh rounds to exactly 1 past ~19.06; keep outputs strictly inside (-c, c)
    raw = dc.clamp(raw, -_TANH_ARG_MAX, _TANH_ARG_MAX)
    return dc.scale(dc.tanh(raw), cfg.clip)


def critic_score(u, v, cfg: CriticConfig) -> Tensor:
    u, v = dc.as_tensor(u), dc.as_tensor(v)
    if u.ndim != 1 or u.shape != v.shape:
        raise ShapeError("critic", u.shape, v.shape)
    n = u.shape[0]
    return critic_scores(u.reshape(1, n), v.reshape(1, n), cfg).reshape(())


def infonce_from_scores(scores, cfg: CriticConfig) -> tuple[Tensor, Tensor]:
    """InfoNCE over score blocks ``[..., N, N]`` with positives on the diagonal.

    The bound averages ``f(u_m, v_m) - logsumexp_k f(u_m, v_k) + log N`` over
    anchors (and over leading block axes); the loss negates it and adds
    ``penalty * mean(f^2)`` over every scored pair.
    """
    scores = dc.as_tensor(scores)
    if scores.ndim < 2 or scores.shape[-1] != scores.shape[-2]:
        raise ShapeError("infonce", scores.shape)
    n = scores.shape[-1]
    idx = np.arange(n)
    positives = scores[(Ellipsis, idx, idx)]
    bound = dc.mean(positives - dc.logsumexp(scores, axis=-1)) + math.log(n)
    loss = -bound
    if cfg.penalty:
        loss = loss + dc.scale(dc.mean(dc.square(scores)), cfg.penalty)
    return loss, bound


def infonce(u, v, cfg: CriticConfig) -> tuple[Tensor, Tensor]:
    """Returns ``(loss, bound)`` for anchors ``u[m]`` with positives ``v[m]``."""
    u, v = dc.as_tensor(u), dc.as_tensor(v)
    if u.ndim != 2 or u.shape != v.shape:
        raise ShapeError("infonce", u.shape, v.shape)
    return infonce_from_scores(critic_scores(u, v, cfg), cfg)


def location_infonce(c, t, cfg: CriticConfig) -> tuple[Tensor, Tensor]:
    """Every (sample, location) of ``c [N, L, n]`` is an anchor against targets ``t [N, n]``."""
    c, t = dc.as_tensor(c), dc.as_tensor(t)
    if c.ndim != 3 or t.ndim != 2 or c.shape[0] != t.shape[0] or c.shape[2] != t.shape[1]:
        raise ShapeError("location_infonce", c.shape, t.shape)
    n, L, _ = c.shape
    # [L, N, n] anchors per location, all sharing the same N targets
    per_loc = dc.transpose(c, (1, 0, 2))
    scores = critic_scores(per_loc, t, cfg)
    return infonce_from_scores(scores, cfg)


def cross_spatial_infonce(ci, cj, cfg: CriticConfig) -> tuple[Tensor, Tensor]:
    """Location ``l`` of modality i contrasts against location ``l`` of modality j across the batch."""
    ci, cj = dc.as_tensor(ci), dc.as_tensor(cj)
    if ci.ndim != 3 or ci.shape != cj.shape:
        raise ShapeError("cross_spatial_infonce", ci.shape, cj.shape)
    a = dc.transpose(ci, (1, 0, 2))
    b = dc.transpose(cj, (1, 0, 2))
    return infonce_from_scores(critic_scores(a, b, cfg), cfg)


def cca_loss(z1, z2, ridge: float = 1e-3, floor: float = 1e-6) -> Tensor:
    """Negative total canonical correlation of two batches of latents."""
    z1, z2 = dc.as_tensor(z1), dc.as_tensor(z2)
    if z1.ndim != 2 or z2.ndim != 2 or z1.shape[0] != z2.shape[0]:
        raise ShapeError("cca_loss", z1.shape, z2.shape)
    if not (np.all(np.isfinite(z1.value)) and np.all(np.isfinite(z2.value))):
        raise ValueError("cca_loss: non-finite latents")
    n = z1.shape[0]
    c1 = z1 - dc.mean(z1, axis=0, keepdims=True)
    c2 = z2 - dc.mean(z2, axis=0, keepdims=True)
    k = 1.0 / max(n - 1, 1)
    s11 = dc.scale(c1.T @ c1, k) + ridge * np.eye(z1.shape[1])
    s22 = dc.scale(c2.T @ c2, k) + ridge * np.eye(z2.shape[1])
    s12 = dc.scale(c1.T @ c2, k)
    t = dc.sym_inv_sqrt(s11, floor) @ s12 @ dc.sym_inv_sqrt(s22, floor)
    return -dc.nuclear_norm(t)


def canonical_correlations(z1: np.ndarray, z2: np.ndarray, ridge: float = 1e-3) -> np.ndarray:
    z1c = z1 - z1.mean(0)
    z2c = z2 - z2.mean(0)
    k = 1.0 / max(len(z1) - 1, 1)
    s11 = k * z1c.T @ z1c + ridge * np.eye(z1.shape[1])
    s22 = k * z2c.T @ z2c + ridge * np.eye(z2.shape[1])
    s12 = k * z1c.T @ z2c
    w1 = dc.sym_inv_sqrt(s11).value
    w2 = dc.sym_inv_sqrt(s22).value
    return np.linalg.svd(w1 @ s12 @ w2, compute_uv=False)


def recon_loss(x, x_hat) -> Tensor:
    x, x_hat = dc.as_tensor(x), dc.as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError("recon_loss", x.shape, x_hat.shape)
    return dc.mean(dc.square(x_hat - x))


def logistic_loss(scores: Tensor, y: np.ndarray) -> Tensor:
    """Mean binary cross-entropy from logits, via a stable softplus."""
    s = scores.reshape(scores.shape[0], 1)
    softplus = dc.logsumexp(dc.concat([Tensor(np.zeros(s.shape)), s], axis=1), axis=1)
    return dc.mean(softplus - dc.mul(scores.reshape(scores.shape[0]), Tensor(y.astype(float))))


# --------------------------------------------------------------------------
# objective graphs
# --------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Edge:
    src: tuple[int, str]
    dst: tuple[int, str]

    def __post_init__(self):
        for m, level in (self.src, self.dst):
            if m not in (1, 2) or level not in LEVELS:
                raise ValueError(f"bad endpoint ({m}, {level})")
        self.kind  # validates the combination

    @property
    def kind(self) -> str:
        (i, a), (j, b) = self.src, self.dst
        if i == j and (a, b) == (LOCATION, LATENT):
            return "L"
        if i != j and (a, b) == (LOCATION, LATENT):
            return "CL"
        if i != j and (a, b) == (LOCATION, LOCATION):
            return "CS"
        if i != j and (a, b) == (LATENT, LATENT):
            return "S"
        raise ValueError(f"edge {self.src}->{self.dst} is not an L/CL/CS/S edge")

    @property
    def name(self) -> str:
        (i, _), (j, _) = self.src, self.dst
        return f"{self.kind}{i}" if self.kind == "L" else f"{self.kind}{i}{j}"

    def to_json(self) -> dict:
        return {"src": list(self.src), "dst": list(self.dst)}

    @classmethod
    def from_json(cls, d: Mapping) -> "Edge":
        return cls(tuple(d["src"]), tuple(d["dst"]))


def kind_edges(kind: str) -> list[Edge]:
    if kind == "L":
        return [Edge((1, LOCATION), (1, LATENT)), Edge((2, LOCATION), (2, LATENT))]
    if kind == "CL":
        return [Edge((1, LOCATION), (2, LATENT)), Edge((2, LOCATION), (1, LATENT))]
    if kind == "CS":
        return [Edge((1, LOCATION), (2, LOCATION)), Edge((2, LOCATION), (1, LOCATION))]
    if kind == "S":
        return [Edge((1, LATENT), (2, LATENT)), Edge((2, LATENT), (1, LATENT))]
    raise ValueError(f"unknown edge kind {kind!r}")


@dataclass(frozen=True)
class ObjectiveGraph:
    edges: tuple[Edge, ...] = ()
    recon: float = 0.0
    cca: float = 0.0
    supervised: float = 0.0
    cca_ridge: float = 1e-3
    name: str = ""

    def __post_init__(self):
        if len(set(self.edges)) != len(self.edges):
            raise ValueError("duplicate edges in objective graph")
        if min(self.recon, self.cca, self.supervised) < 0:
            raise ValueError("aux weights must be nonnegative")

    @property
    def is_empty(self) -> bool:
        return not self.edges and not (self.recon or self.cca or self.supervised)

    @property
    def aux_names(self) -> list[str]:
        names = []
        if self.recon:
            names += ["recon1", "recon2"]
        if self.cca:
            names.append("cca")
        if self.supervised:
            names += ["sup1", "sup2"]
        return names

    @property
    def uses_locations(self) -> bool:
        return any(LOCATION in (e.src[1], e.dst[1]) for e in self.edges)

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "edges": [e.to_json() for e in self.edges],
            "recon": self.recon,
            "cca": self.cca,
            "supervised": self.supervised,
            "cca_ridge": self.cca_ridge,
        }

    @classmethod
    def from_json(cls, d) -> "ObjectiveGraph":
        if isinstance(d, str):
            return preset(d)
        if "preset" in d:
            unknown = set(d) - {"preset"}
            if unknown:
                raise ValueError(f"unknown objective keys {sorted(unknown)}")
            return preset(d["preset"])
        unknown = set(d) - {"name", "edges", "recon", "cca", "supervised", "cca_ridge"}
        if unknown:
            raise ValueError(f"unknown objective keys {sorted(unknown)}")
        edges = tuple(Edge.from_json(e) for e in d.get("edges", ()))
        return cls(
            edges=edges,
            recon=float(d.get("recon", 0.0)),
            cca=float(d.get("cca", 0.0)),
            supervised=float(d.get("supervised", 0.0)),
            cca_ridge=float(d.get("cca_ridge", 1e-3)),
            name=d.get("name", "custom"),
        )


_KIND_ORDER = ("L", "CL", "CS", "S")

PRESETS: tuple[str, ...] = (
    "L", "CL", "CS", "S",
    "L-CL", "L-CS", "L-S", "CL-CS", "CL-S", "S-CS", "L-CL-CS",
    "AE", "S-AE", "CCA", "L-CCA", "DCCAE", "supervised",
)


def preset(name: str, aux_weight: float = 1.0) -> ObjectiveGraph:
    """Resolve a named objective.

    Hyphen-separated tokens from {L, CL, CS, S, AE, CCA}; ``DCCAE`` is CCA
    plus reconstruction; ``supervised`` is the cross-entropy reference.
    """
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}")
    if name == "supervised":
        return ObjectiveGraph(supervised=aux_weight, name=name)
    tokens = ["CCA", "AE"] if name == "DCCAE" else name.split("-")
    edges: list[Edge] = []
    for kind in sorted((t for t in tokens if t in _KIND_ORDER), key=_KIND_ORDER.index):
        edges += kind_edges(kind)
    return ObjectiveGraph(
        edges=tuple(edges),
        recon=aux_weight if "AE" in tokens else 0.0,
        cca=aux_weight if "CCA" in tokens else 0.0,
        name=name,
    )


# --------------------------------------------------------------------------
# composition
# --------------------------------------------------------------------------


@dataclass
class LossReport:
    total: float
    bounds: dict[str, float] = field(default_factory=dict)
    losses: dict[str, float] = field(default_factory=dict)
    aux: dict[str, float] = field(default_factory=dict)


def build_loss(
    graph: ObjectiveGraph,
    outputs: Sequence[EncoderOutput],
    params: Mapping[str, Tensor],
    cfg: CriticConfig,
    *,
    enc_cfg: EncoderConfig | None = None,
    images: Sequence | None = None,
    labels: np.ndarray | None = None,
) -> tuple[Tensor, LossReport]:
    """Sum of edge losses and weighted auxiliary terms for one batch.

    ``outputs[m-1]`` holds modality ``m``'s batched encoder output.  Location
    features are projected once per modality and shared by all edges.
    """
    if graph.is_empty:
        raise ContractError("build_loss: empty objective graph")
    projected: dict[tuple[int, str], Tensor] = {}

    def endpoint(m: int, level: str) -> Tensor:
        key = (m, level)
        if key not in projected:
            out = outputs[m - 1]
            if level == LOCATION:
                projected[key] = project_location(params, out.locations, prefix=f"phi{m}")
            else:
                projected[key] = project_latent(out.latent)
        return projected[key]

    terms: list[Tensor] = []
    report = LossReport(total=0.0)
    for edge in graph.edges:
        u = endpoint(*edge.src)
        v = endpoint(*edge.dst)
        if edge.kind in ("L", "CL"):
            loss, bound = location_infonce(u, v, cfg)
        elif edge.kind == "CS":
            loss, bound = cross_spatial_infonce(u, v, cfg)
        else:
            loss, bound = infonce(u, v, cfg)
        terms.append(loss)
        report.bounds[edge.name] = bound.item()
        report.losses[edge.name] = loss.item()

    if graph.recon:
        if images is None or enc_cfg is None:
            raise ContractError("build_loss: reconstruction needs images and enc_cfg")
        for m in (1, 2):
            x_hat = decode_batch(params, outputs[m - 1].latent, enc_cfg, prefix=f"dec{m}")
            r = recon_loss(images[m - 1], x_hat)
            report.aux[f"recon{m}"] = r.item()
            terms.append(dc.scale(r, graph.recon))
    if graph.cca:
        c = cca_loss(outputs[0].latent, outputs[1].latent, ridge=graph.cca_ridge)
        report.aux["cca"] = c.item()
        terms.append(dc.scale(c, graph.cca))
    if graph.supervised:
        if labels is None:
            raise ContractError("build_loss: supervised term needs labels")
        keep = np.flatnonzero(labels <= 1)
        if keep.size:
            for m in (1, 2):
                z = outputs[m - 1].latent[keep]
                s = z @ params[f"cls{m}.w"].reshape(-1, 1)
                s = s.reshape(keep.size) + params[f"cls{m}.b"]
                sup = logistic_loss(s, labels[keep])
                report.aux[f"sup{m}"] = sup.item()
                terms.append(dc.scale(sup, graph.supervised))
    if not terms:
        raise ContractError("build_loss: no terms evaluated")
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    report.total = total.item()
    return total, report
