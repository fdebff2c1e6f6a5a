"""Train-then-evaluate runs shared by the CLI, scripts and acceptance tests."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from .encoder import EncoderConfig, ModelParams, encode_batch
from .objectives import CriticConfig
from .optim import TrainConfig, TrainResult, train
from .probe import SearchSpace, evaluate_representation
from .similarity import linear_cka, svcca
from .synthdata import SPLITS, AugmentFlags, GeneratorConfig, NormStats, PairedDataset, generate, norm_stats, znormalize

RANDOM_INIT = "random-init"


def encode_latents(params: ModelParams, images: np.ndarray, modality: int, cfg: EncoderConfig,
                   stats: NormStats, chunk: int = 512) -> np.ndarray:
    x = znormalize(images, stats, modality)
    tensors = params.tensors(requires_grad=False)
    parts = [encode_batch(tensors, x[i:i + chunk], cfg, f"enc{modality}").latent.value
             for i in range(0, len(x), chunk)]
    return np.concatenate(parts) if parts else np.zeros((0, cfg.d_z))


@dataclass
class RunSummary:
    model: str
    seed: int
    auc: dict[int, float]
    mean_auc: float
    cka: float
    svcca: float
    final_bounds: dict[str, float] = field(default_factory=dict)
    probe: dict = field(default_factory=dict)


def run_model(model: str, data: PairedDataset, seed: int, *, epochs: int = 30, enc_cfg: EncoderConfig = EncoderConfig(),
              critic: CriticConfig = CriticConfig(), space: SearchSpace = SearchSpace(),
              train_cfg: TrainConfig | None = None) -> tuple[RunSummary, TrainResult | None]:
    """Pretrain ``model`` (a preset name or ``random-init``) and probe its frozen latents."""
    if model == RANDOM_INIT:
        params = ModelParams.init(enc_cfg, seed, decoders=False, classifier=False)
        stats = norm_stats(data, np.flatnonzero(data.split == SPLITS.index("train")))
        result = None
        bounds: dict[str, float] = {}
    else:
        base = train_cfg or TrainConfig()
        cfg = replace(base, epochs=epochs, seed=seed, objective=model)
        result = train(cfg, data, enc_cfg, critic)
        params, stats = result.params, result.norm
        last = max(r.epoch for r in result.history) if result.history else -1
        bounds = {r.edge: r.bound for r in result.history if r.epoch == last and r.bound is not None}

    def enc(m, images):
        return encode_latents(params, images, m, enc_cfg, stats)

    probe = evaluate_representation(enc, data, space, seed)
    holdout = data.one_pair_per_subject()
    ho = holdout.split == SPLITS.index("holdout")
    z1, z2 = enc(1, holdout.images1[ho]), enc(2, holdout.images2[ho])
    summary = RunSummary(
        model=model,
        seed=seed,
        auc={m: r.holdout_auc for m, r in probe["per_modality"].items()},
        mean_auc=probe["mean_auc"],
        cka=linear_cka(z1, z2),
        svcca=svcca(z1, z2),
        final_bounds=bounds,
        probe=probe,
    )
    return summary, result


def rank_correlation(x, y) -> float:
    """Spearman correlation; NaN when either input is constant."""
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 3 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return float("nan")
    return float(spearmanr(x, y).statistic)


# crop only: synthetic blob layouts are not mirror-symmetric, so flips give off-distribution images
SYNTH_AUGMENT = AugmentFlags(hflip=False, vflip=False, crop=0.875)
QUICK_SEARCH = SearchSpace(iterations=10, max_iter=200)


def sweep(models, seeds, *, generator: GeneratorConfig = GeneratorConfig(), epochs: int = 30,
          space: SearchSpace = QUICK_SEARCH, train_cfg: TrainConfig | None = None,
          callback=None) -> dict[str, list[RunSummary]]:
    """Run every model on one dataset per seed; results keyed by model in seed order."""
    train_cfg = train_cfg or TrainConfig(augment=SYNTH_AUGMENT)
    out: dict[str, list[RunSummary]] = {m: [] for m in models}
    for seed in seeds:
        data = generate(replace(generator, seed=seed))
        for m in models:
            summary, _ = run_model(m, data, seed, epochs=epochs, space=space, train_cfg=train_cfg)
            out[m].append(summary)
            if callback is not None:
                callback(summary)
    return out


def summary_table(results: dict[str, list[RunSummary]]) -> list[dict]:
    """Per-model means over seeds, sorted by mean AUC descending."""
    rows = []
    for model, runs in results.items():
        rows.append({
            "model": model,
            "seeds": len(runs),
            "auc1": float(np.mean([r.auc[1] for r in runs])),
            "auc2": float(np.mean([r.auc[2] for r in runs])),
            "mean_auc": float(np.mean([r.mean_auc for r in runs])),
            "cka": float(np.mean([r.cka for r in runs])),
            "svcca": float(np.mean([r.svcca for r in runs])),
        })
    return sorted(rows, key=lambda r: -r["mean_auc"])
