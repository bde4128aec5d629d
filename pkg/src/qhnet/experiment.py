"""The desk-scale purification experiment.

Toy images are corrupted with synthetic weather, a small restorer learns to
undo it, I-FGSM attacks the restorer, and QHNet learns to map attacked
inputs back to the unattacked ones. Scores are reported at two levels:

* ``input``: the purifier's output against the unattacked input.
* ``target``: the restorer's output on purified input against ground truth.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .attack import AttackSpec, ToyRestorer, ifgsm
from .data import make_toy_corpus, split_indices, weather_corrupt
from .metrics import psnr, ssim
from .network import QHNet, QHNetConfig
from .train import PRESETS, TrainConfig, train, train_restorer

__all__ = ["ToyData", "prepare_toy_data", "score", "train_purifier", "purify", "run_toy_experiment"]


@dataclass
class ToyData:
    truth: np.ndarray
    weather: np.ndarray
    attacked: np.ndarray
    target: ToyRestorer
    train_idx: np.ndarray
    val_idx: np.ndarray

    def pairs(self, idx) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(self.attacked[i], self.weather[i]) for i in idx]


def prepare_toy_data(
    n_images: int = 32,
    size: int = 128,
    seed: int = 0,
    epsilon: float = 5,
    iterations: int = 5,
    restorer_steps: int = 2000,
) -> ToyData:
    truth = make_toy_corpus(n_images, size, seed)
    weather = weather_corrupt(truth, seed + 1)
    target = ToyRestorer(seed=seed)
    train_restorer(target, weather, truth, steps=restorer_steps, seed=seed)
    x = torch.as_tensor(weather, dtype=torch.float32)
    y = torch.as_tensor(truth, dtype=torch.float32)
    adv = ifgsm(target, x, y, AttackSpec(epsilon, iterations))
    # attacked images are stored as 8-bit files in practice
    adv = torch.round(adv * 255) / 255
    train_idx, val_idx = split_indices(n_images, seed)
    return ToyData(truth, weather, adv.numpy().astype(np.float64), target, train_idx, val_idx)


def score(images: np.ndarray, data: ToyData, idx) -> dict:
    """Input- and target-level PSNR/SSIM of ``images`` (aligned with ``idx``)."""
    x = torch.as_tensor(images, dtype=torch.float32)
    ref_in = torch.as_tensor(data.weather[idx], dtype=torch.float32)
    ref_out = torch.as_tensor(data.truth[idx], dtype=torch.float32)
    with torch.no_grad():
        restored = data.target(x)
    return {
        "input_psnr": psnr(x, ref_in),
        "input_ssim": float(ssim(x.double(), ref_in.double())),
        "target_psnr": psnr(restored, ref_out),
        "target_ssim": float(ssim(restored.double(), ref_out.double())),
    }


def train_purifier(
    data: ToyData,
    config: QHNetConfig | None = None,
    train_config: TrainConfig | None = None,
    seed: int = 0,
    on_epoch=None,
) -> tuple[QHNet, list[dict]]:
    model = QHNet(config or QHNetConfig.toy(), seed=seed)
    tcfg = train_config or TrainConfig(**{**PRESETS["toy"], "seed": seed})
    result = train(model, data.pairs(data.train_idx), tcfg, data.pairs(data.val_idx), on_epoch=on_epoch)
    return model, result.log


def purify(model: QHNet, images: np.ndarray) -> np.ndarray:
    model.eval()
    with torch.no_grad():
        return model(torch.as_tensor(images, dtype=torch.float32)).numpy().astype(np.float64)


def run_toy_experiment(
    seed: int = 0,
    n_images: int = 32,
    size: int = 128,
    config: QHNetConfig | None = None,
    train_config: TrainConfig | None = None,
    on_epoch=None,
) -> dict:
    """Full pipeline; returns held-out scores for clean, attacked and defended inputs."""
    t0 = time.perf_counter()
    data = prepare_toy_data(n_images, size, seed)
    t_data = time.perf_counter() - t0
    model, log = train_purifier(data, config, train_config, seed, on_epoch)
    va = data.val_idx
    return {
        "clean": score(data.weather[va], data, va),
        "attacked": score(data.attacked[va], data, va),
        "defended": score(purify(model, data.attacked[va]), data, va),
        "log": log,
        "seconds": {"data": t_data, "total": time.perf_counter() - t0},
        "model": model,
    }


ABLATIONS = ("all", "use_qhpdb", "use_qfarb", "use_attention", "use_pt")


def run_ablation(seeds=(0, 1, 2), train_overrides: dict | None = None, n_images: int = 32, size: int = 128) -> dict:
    """Held-out input-level SSIM for the full toy model and each single toggle off.

    Returns ``{name: [ssim per seed]}``; ``"all"`` is the full model.
    """
    out = {name: [] for name in ABLATIONS}
    for seed in seeds:
        data = prepare_toy_data(n_images, size, seed)
        tcfg = TrainConfig(**{**PRESETS["toy"], **(train_overrides or {}), "seed": seed})
        for name in ABLATIONS:
            cfg = QHNetConfig.toy() if name == "all" else QHNetConfig.toy(**{name: False})
            model, _ = train_purifier(data, cfg, tcfg, seed)
            va = data.val_idx
            out[name].append(score(purify(model, data.attacked[va]), data, va)["input_ssim"])
    return out
