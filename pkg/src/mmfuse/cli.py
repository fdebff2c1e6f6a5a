"""Command-line pipeline: generate, train, probe, similarity, saliency, report.

Every command takes ``--config`` (JSON), ``--seed`` and ``--out``, writes the
fully resolved config to ``config.resolved.json`` in the output directory and
exits with 0 on success, 1 on runtime failure and 2 on configuration errors.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import numpy as np

from . import __version__
from .encoder import EncoderConfig, ModelParams
from .experiments import RANDOM_INIT, encode_latents, rank_correlation
from .introspect import (
    cross_modal_saliency_correlation,
    group_diff_map,
    postprocess,
    select_extreme_dims,
    smoothgrad_batch,
    threshold_map,
)
from .objectives import CriticConfig
from .optim import NonFiniteError, TrainConfig, train, write_history
from .probe import ProbeConfig, SearchSpace, evaluate_representation, fit_logreg
from .similarity import group_similarity_report
from .synthdata import (
    GROUPS,
    SPLITS,
    AugmentFlags,
    ContainerError,
    GeneratorConfig,
    NormStats,
    disk_mask,
    generate,
    load_dataset,
    load_tensors,
    norm_stats,
    save_dataset,
    save_tensors,
    znormalize,
)

log = logging.getLogger("mmfuse")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2
ABSENT = "absent"


class ConfigError(ValueError):
    pass


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SaliencyConfig:
    sigma: float = 0.05
    n: int = 5
    gauss_sigma: float = 1.5
    mask_coverage: float = 0.6
    percentile: float = 90.0
    max_subjects: int = 64
    probe_C: float = 1.0


@dataclass(frozen=True)
class SimilarityConfig:
    var_keep: float = 0.99


@dataclass
class RunConfig:
    seed: int = 0
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    critic: CriticConfig = field(default_factory=CriticConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: SearchSpace = field(default_factory=SearchSpace)
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    saliency: SaliencyConfig = field(default_factory=SaliencyConfig)


_SECTIONS = {f.name: f for f in fields(RunConfig)}


def _build(cls, raw: Any, where: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(known)}")
    kwargs = dict(raw)
    if cls is TrainConfig and "augment" in kwargs:
        kwargs["augment"] = _build(AugmentFlags, kwargs["augment"], f"{where}.augment")
    try:
        return cls(**kwargs)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def parse_config(text: str | None) -> RunConfig:
    """Strict JSON config; unknown keys at any level are rejected."""
    if text is None:
        return RunConfig()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {unknown}; allowed: {sorted(_SECTIONS)}")
    cfg = RunConfig()
    for name, value in raw.items():
        if name == "seed":
            if not isinstance(value, int) or isinstance(value, bool):
                raise ConfigError("seed must be an integer")
            cfg.seed = value
        else:
            setattr(cfg, name, _build(_SECTIONS[name].default_factory().__class__, value, name))
    return cfg


def validate(cfg: RunConfig) -> None:
    """Cross-section checks that single dataclasses cannot see."""
    try:
        graph = cfg.train.graph
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"train.objective: {exc.args[0] if exc.args else exc}") from None
    if cfg.encoder.embed_dim != cfg.critic.embed_dim:
        raise ConfigError(f"encoder.embed_dim {cfg.encoder.embed_dim} != critic.embed_dim {cfg.critic.embed_dim}")
    if any(e.src[1] == "latent" or e.dst[1] == "latent" for e in graph.edges) and cfg.encoder.d_z != cfg.critic.embed_dim:
        raise ConfigError(f"latent edges score z directly, so encoder.d_z ({cfg.encoder.d_z}) must equal "
                          f"critic.embed_dim ({cfg.critic.embed_dim})")
    if cfg.generator.image_side != cfg.encoder.image_side:
        raise ConfigError("generator.image_side must equal encoder.image_side")


def _jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {k: _jsonable(v) for k, v in asdict(obj).items()}
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def resolved(cfg: RunConfig) -> dict:
    return _jsonable(cfg)


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def _fmt(x) -> str:
    if x is None:
        return ABSENT
    if isinstance(x, (float, np.floating)):
        return repr(float(x)) if math.isfinite(x) else ABSENT
    return str(x)


def _write_csv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


# --------------------------------------------------------------------------
# run directories
# --------------------------------------------------------------------------


def _save_model(path: Path, params: ModelParams, stats: NormStats) -> None:
    tensors = dict(sorted(params.arrays.items()))
    tensors["norm.mean"] = np.array(stats.mean)
    tensors["norm.std"] = np.array(stats.std)
    save_tensors(path, tensors)


def _load_model(path: Path) -> tuple[ModelParams, NormStats]:
    t = load_tensors(path)
    stats = NormStats(tuple(t.pop("norm.mean").tolist()), tuple(t.pop("norm.std").tolist()))
    return ModelParams(t), stats


@dataclass
class Model:
    name: str
    preset: str
    params: ModelParams
    stats: NormStats


def _model_for(args, cfg: RunConfig, data) -> Model:
    if args.run is None:
        params = ModelParams.init(cfg.encoder, cfg.seed, decoders=False, classifier=False)
        stats = norm_stats(data, data.split_indices("train"))
        return Model(RANDOM_INIT, RANDOM_INIT, params, stats)
    run = Path(args.run)
    params, stats = _load_model(run / "model.mmdt")
    meta = json.loads((run / "run.json").read_text()) if (run / "run.json").exists() else {}
    name = meta.get("preset", run.name)
    return Model(name, meta.get("preset", name), params, stats)


def _provenance(model: Model, cfg: RunConfig) -> dict:
    return {"model": model.name, "preset": model.preset, "seed": cfg.seed}


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------


def cmd_generate(args, cfg: RunConfig, out: Path) -> None:
    gen = dataclasses.replace(cfg.generator, seed=cfg.seed)
    save_dataset(out, generate(gen), gen)


def cmd_train(args, cfg: RunConfig, out: Path) -> None:
    data = load_dataset(args.data)
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed)
    graph = tcfg.graph
    result = train(tcfg, data, cfg.encoder, cfg.critic, checkpoint_dir=out)
    _save_model(out / "model.mmdt", result.params, result.norm)
    write_history(out / "history.csv", result.history, graph)
    name = tcfg.objective if isinstance(tcfg.objective, str) else graph.name or "custom"
    _dump_json(out / "run.json", {"preset": name, "seed": cfg.seed, "graph": graph.to_json(), "version": __version__})


def _enc_fn(model: Model, cfg: RunConfig):
    def enc(m, images):
        return encode_latents(model.params, images, m, cfg.encoder, model.stats)

    return enc


def cmd_probe(args, cfg: RunConfig, out: Path) -> None:
    data = load_dataset(args.data)
    model = _model_for(args, cfg, data)
    rep = evaluate_representation(_enc_fn(model, cfg), data, cfg.probe, cfg.seed)
    prov = _provenance(model, cfg)
    rows = [(prov["model"], prov["seed"], prov["preset"], m, r.cv_auc, r.holdout_auc)
            for m, r in sorted(rep["per_modality"].items())]
    _write_csv(out / "probe.csv", ["model", "seed", "preset", "modality", "cv_auc", "holdout_auc"], rows)
    _dump_json(out / "probe.json", {
        **prov,
        "mean_auc": rep["mean_auc"],
        "modalities": {
            str(m): {"holdout_auc": r.holdout_auc, "cv_auc": r.cv_auc, "config": r.config.to_json(),
                     "weights": r.weights.tolist(), "bias": r.bias}
            for m, r in sorted(rep["per_modality"].items())
        },
    })


def cmd_similarity(args, cfg: RunConfig, out: Path) -> None:
    data = load_dataset(args.data).one_pair_per_subject()
    model = _model_for(args, cfg, data)
    ho = data.split_indices("holdout")
    enc = _enc_fn(model, cfg)
    z1, z2 = enc(1, data.images1[ho]), enc(2, data.images2[ho])
    labels = data.labels[ho]
    prov = _provenance(model, cfg)
    rows = []
    overall = group_similarity_report(z1, z2, np.zeros(len(ho), dtype=int), {0: "all"}, cfg.similarity.var_keep)
    groups = group_similarity_report(z1, z2, labels, dict(enumerate(GROUPS)), cfg.similarity.var_keep)
    for g in GROUPS:
        if g not in groups.values and g not in groups.absent:
            groups.absent.append(g)  # group missing from the holdout split entirely
    for rep in (overall, groups):
        for group, metric, value in rep.rows():
            rows.append((prov["model"], prov["seed"], prov["preset"], group, metric, value))
    _write_csv(out / "similarity.csv", ["model", "seed", "preset", "group", "metric", "value"], rows)


def _write_pgm(path: Path, img: np.ndarray) -> None:
    """8-bit binary PGM of values in [0, 1]."""
    img = np.clip(np.nan_to_num(img), 0.0, 1.0)
    data = np.round(img * 255).astype(np.uint8)
    h, w = data.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def _write_grid(path: Path, grid: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in grid:
            w.writerow([repr(float(v)) for v in row])


def cmd_saliency(args, cfg: RunConfig, out: Path) -> None:
    data = load_dataset(args.data).one_pair_per_subject()
    model = _model_for(args, cfg, data)
    sc = cfg.saliency
    ecfg = cfg.encoder
    mask = disk_mask(ecfg.image_side, sc.mask_coverage)
    ho = np.flatnonzero((data.split == SPLITS.index("holdout")) & (data.labels <= 1))[: sc.max_subjects]
    tr = np.flatnonzero((data.split == SPLITS.index("train")) & (data.labels <= 1))
    if len(ho) < 3:
        raise RuntimeError("saliency needs at least 3 holdout HC/AD subjects")
    tensors = model.params.tensors(requires_grad=False)
    enc = _enc_fn(model, cfg)
    sal_dir = out / "saliency"
    sal_dir.mkdir(exist_ok=True)
    per_mod = {}
    summary: dict[str, Any] = {**_provenance(model, cfg), "subjects": len(ho), "modalities": {}}
    for m in (1, 2):
        x = znormalize(data.images(m)[ho], model.stats, m)
        maps = np.empty((len(ho), ecfg.d_z, ecfg.image_side, ecfg.image_side))
        for d in range(ecfg.d_z):
            raw = smoothgrad_batch(tensors, x, d, ecfg, f"enc{m}", sc.sigma, sc.n, seed=cfg.seed * 1000 + d)
            maps[:, d] = postprocess(raw, mask, sc.gauss_sigma)
            mean_map = maps[:, d].mean(axis=0)
            _write_pgm(sal_dir / f"mod{m}_dim{d:02d}.pgm", mean_map)
            _write_grid(sal_dir / f"mod{m}_dim{d:02d}.csv", mean_map)
        per_mod[m] = maps
        # probe weights pick the dimensions whose saliency is contrasted between groups
        z_tr = enc(m, data.images(m)[tr])
        mu, sd = z_tr.mean(0), np.where(z_tr.std(0) > 1e-12, z_tr.std(0), 1.0)
        w, _ = fit_logreg((z_tr - mu) / sd, data.labels[tr], ProbeConfig(C=sc.probe_C))
        pos, neg = select_extreme_dims(w)
        info: dict[str, Any] = {"extreme_dims": {"positive": pos, "negative": neg}, "contrasts": {}}
        for tag, d in (("positive", pos), ("negative", neg)):
            diff = group_diff_map(maps[:, d], data.labels[ho], group_a=1, group_b=0, dim=d)
            _write_pgm(sal_dir / f"mod{m}_rbc_{tag}.pgm", (diff.rbc + 1) / 2)
            _write_grid(sal_dir / f"mod{m}_rbc_{tag}.csv", diff.rbc)
            mean_map = maps[:, d].mean(axis=0)
            cut = float(np.percentile(mean_map[mask > 0], sc.percentile))
            _write_grid(sal_dir / f"mod{m}_dim{d:02d}_thresholded.csv", threshold_map(mean_map, sc.percentile, mask))
            info["contrasts"][tag] = {"dim": d, "peak": list(diff.peak), "peak_rbc": float(diff.rbc[diff.peak]),
                                      "threshold_percentile": sc.percentile, "threshold_value": cut}
        summary["modalities"][str(m)] = info
    corr = cross_modal_saliency_correlation(per_mod[1], per_mod[2], mask)
    _write_grid(out / "saliency_correlation.csv", corr.matrix)
    summary["argmax_pair"] = {"dim_mod1": corr.pair[0], "dim_mod2": corr.pair[1], "correlation": corr.value}
    _dump_json(out / "saliency.json", summary)


def _read_row(run: Path) -> dict:
    row: dict[str, Any] = {"run": run.name, "model": run.name, "seed": None,
                           "auc1": None, "auc2": None, "mean_auc": None, "cka": None, "svcca": None}
    meta = run / "run.json"
    if meta.exists():
        m = json.loads(meta.read_text())
        row["model"], row["seed"] = m.get("preset", run.name), m.get("seed")
    probe = run / "probe.json"
    if probe.exists():
        p = json.loads(probe.read_text())
        row["model"] = p.get("model", row["model"])
        row["seed"] = p.get("seed", row["seed"])
        row["auc1"] = p["modalities"].get("1", {}).get("holdout_auc")
        row["auc2"] = p["modalities"].get("2", {}).get("holdout_auc")
        row["mean_auc"] = p.get("mean_auc")
    sim = run / "similarity.csv"
    if sim.exists():
        with open(sim) as fh:
            for r in csv.DictReader(fh):
                if r["group"] == "all" and r["metric"] in ("cka", "svcca") and r["value"] != ABSENT:
                    row[r["metric"]] = float(r["value"])
    return row


def sort_rows(rows: list[dict]) -> list[dict]:
    """Descending mean AUC; rows without it go last, in input order."""
    have = [r for r in rows if r["mean_auc"] is not None]
    missing = [r for r in rows if r["mean_auc"] is None]
    return sorted(have, key=lambda r: -r["mean_auc"]) + missing


REPORT_COLUMNS = ["run", "model", "seed", "auc1", "auc2", "mean_auc", "cka", "svcca"]


def summary_row(summary, run: str = "") -> dict:
    """Report row for an in-memory run summary."""
    return {"run": run or f"{summary.model}-seed{summary.seed}", "model": summary.model, "seed": summary.seed,
            "auc1": summary.auc.get(1), "auc2": summary.auc.get(2), "mean_auc": summary.mean_auc,
            "cka": summary.cka, "svcca": summary.svcca}


def write_report(rows: list[dict], out: Path) -> dict:
    """Write report.csv, report.md and report.json; returns the JSON payload."""
    out.mkdir(parents=True, exist_ok=True)
    rows = sort_rows(rows)
    cols = REPORT_COLUMNS
    _write_csv(out / "report.csv", cols, [[r[c] for c in cols] for r in rows])
    both = [r for r in rows if r["cka"] is not None and r["mean_auc"] is not None]
    rho = rank_correlation([r["cka"] for r in both], [r["mean_auc"] for r in both]) if both else float("nan")
    lines = ["# Model comparison", "", "Sorted by mean holdout AUC across modalities.", "",
             "| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in rows:
        lines.append("| " + " | ".join(_fmt(r[c]) if r[c] is not None else ABSENT for c in cols) + " |")
    lines += ["", f"Spearman rank correlation between cross-modal CKA and mean AUC "
                  f"(n={len(both)}): {_fmt(rho)}", ""]
    (out / "report.md").write_text("\n".join(lines))
    payload = {"rows": rows, "spearman_cka_mean_auc": rho if math.isfinite(rho) else None, "n": len(both)}
    _dump_json(out / "report.json", payload)
    return payload


def cmd_report(args, cfg: RunConfig, out: Path) -> None:
    runs = [Path(r) for r in args.runs]
    for r in runs:
        if not r.is_dir():
            raise FileNotFoundError(f"run directory {r} does not exist")
    write_report([_read_row(r) for r in runs], out)


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "probe": cmd_probe,
    "similarity": cmd_similarity,
    "saliency": cmd_saliency,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmfuse", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"mmfuse {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name in ("train", "probe", "similarity", "saliency"):
            p.add_argument("--data", required=True, help="dataset directory written by `generate`")
        if name == "train":
            p.add_argument("--preset", help="objective preset; overrides train.objective")
        if name in ("probe", "similarity", "saliency"):
            p.add_argument("--run", help="training run directory; omit for a random-init encoder")
        if name == "report":
            p.add_argument("runs", nargs="+", help="run directories to aggregate")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors already
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        text = Path(args.config).read_text() if args.config else None
    except OSError as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        cfg = parse_config(text)
        if args.seed is not None:
            cfg.seed = args.seed
        if getattr(args, "preset", None):
            cfg.train = dataclasses.replace(cfg.train, objective=args.preset)
        validate(cfg)
        # the global seed drives every stage; echo it into each section
        cfg.generator = dataclasses.replace(cfg.generator, seed=cfg.seed)
        cfg.train = dataclasses.replace(cfg.train, seed=cfg.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        _dump_json(out / "config.resolved.json", resolved(cfg))
        COMMANDS[args.command](args, cfg, out)
    except (NonFiniteError, ContainerError, OSError, RuntimeError, ValueError, KeyError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
