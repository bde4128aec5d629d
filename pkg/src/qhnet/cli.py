"""Command-line entry point: ``qhnet {gen,attack,fit-thresholds,train,defend,eval}``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric divergence.
``QHNET_THREADS`` sets the torch thread count.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .attack import AttackSpec, ToyRestorer, fgsm, ifgsm
from .data import make_toy_corpus, split_indices, weather_corrupt
from .graph import NonDifferentiableError
from .io import (
    CheckpointError,
    append_jsonl,
    list_pngs,
    load_model,
    read_json,
    read_png,
    save_model,
    write_json,
    write_png,
)
from .metrics import psnr, ssim
from .network import QHNet, QHNetConfig
from .plotting import plot_metrics, plot_threshold, plot_training
from .polythresh import PUBLISHED_COEFFS, PolyThreshold, apply_tensor, fit_mmse
from .train import PRESETS, DivergenceError, TrainConfig, train, train_restorer
from .wht import is_power_of_two, wht2d

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
RULE = "=" * 72


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _banner(title: str) -> None:
    print(RULE)
    print(title)
    print(RULE)


def _name(i: int) -> str:
    return f"img_{i:04d}.png"


def _load_dir(directory: Path, names=None) -> tuple[list[str], list[np.ndarray]]:
    if not directory.is_dir():
        raise DataError(f"missing directory {directory}")
    names = list_pngs(directory) if names is None else names
    images = []
    for n in names:
        if not (directory / n).exists():
            raise DataError(f"{directory / n} not found")
        images.append(read_png(directory / n))
    return names, images


def _paired(data: Path) -> tuple[list[str], list[np.ndarray], list[np.ndarray]]:
    attacked = list_pngs(data / "attacked")
    clean = list_pngs(data / "clean")
    if not attacked:
        raise DataError(f"no attacked images under {data}")
    missing = sorted(set(attacked) - set(clean))
    if missing:
        raise DataError(f"attacked files without clean counterpart: {missing[:3]}")
    _, adv = _load_dir(data / "attacked", attacked)
    _, cln = _load_dir(data / "clean", attacked)
    return attacked, adv, cln


def _load(path) -> torch.nn.Module:
    try:
        return load_model(path)
    except CheckpointError as exc:
        raise DataError(str(exc)) from exc


# ---------------------------------------------------------------- gen


def cmd_gen(args) -> int:
    if not is_power_of_two(args.size):
        raise UsageError("size must be a power of two")
    if args.n < 0:
        raise UsageError("--n must be nonnegative")
    out = Path(args.out)
    truth = make_toy_corpus(args.n, args.size, args.seed)
    weather = weather_corrupt(truth, args.seed + 1)
    target = ToyRestorer(seed=args.seed)
    if args.n:
        train_restorer(target, weather, truth, steps=args.restorer_steps, patch=min(32, args.size), seed=args.seed)
    (out / "clean").mkdir(parents=True, exist_ok=True)
    (out / "truth").mkdir(parents=True, exist_ok=True)
    for i in range(args.n):
        write_png(out / "clean" / _name(i), weather[i])
        write_png(out / "truth" / _name(i), truth[i])
    save_model(out / "target.qhn", target, {"seed": args.seed, "steps": args.restorer_steps})
    write_json(
        out / "manifest.json",
        {
            "kind": "toy_corpus",
            "seed": args.seed,
            "size": args.size,
            "files": [_name(i) for i in range(args.n)],
            "target_model": "target.qhn",
            "restorer_steps": args.restorer_steps,
        },
    )
    _banner(f"qhnet gen: {args.n} images {args.size}x{args.size} seed={args.seed}")
    if args.n:
        print(f"truth   mean={truth.mean():.4f} std={truth.std():.4f}")
        print(f"weather mean={weather.mean():.4f} std={weather.std():.4f}")
        with torch.no_grad():
            restored = target(torch.as_tensor(weather, dtype=torch.float32))
        y = torch.as_tensor(truth, dtype=torch.float32)
        print(f"weather PSNR vs truth  {psnr(torch.as_tensor(weather, dtype=torch.float32), y):.2f} dB")
        print(f"restored PSNR vs truth {psnr(restored, y):.2f} dB")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- attack


def cmd_attack(args) -> int:
    if not 0 <= args.eps <= 255:
        raise UsageError("--eps must lie in [0, 255]")
    if args.iters < 1:
        raise UsageError("--iters must be >= 1")
    data, out = Path(args.data), Path(args.out)
    model = _load(args.model)
    names, clean = _load_dir(data / "clean")
    _, truth = _load_dir(data / "truth", names)
    spec = AttackSpec(args.eps, args.iters)
    attack = fgsm if args.iters == 1 else ifgsm
    records = []
    for name, x, y in zip(names, clean, truth):
        xb = torch.as_tensor(x, dtype=torch.float32).unsqueeze(0)
        yb = torch.as_tensor(y, dtype=torch.float32).unsqueeze(0)
        try:
            adv = attack(model, xb, yb, spec)[0].numpy()
        except NonDifferentiableError as exc:
            raise DataError(f"cannot attack {args.model}: {exc}") from exc
        write_png(out / "attacked" / name, adv)
        write_png(out / "clean" / name, x)
        write_png(out / "truth" / name, y)
        records.append({"file": name, "attack": "fgsm" if args.iters == 1 else "ifgsm", **spec.to_dict()})
    write_json(
        out / "manifest.json",
        {"kind": "attacked_pairs", "seed": args.seed, "model": str(args.model), "source": str(data), "files": records},
    )
    _banner(f"qhnet attack: eps={args.eps} iters={args.iters} on {len(names)} images")
    if names:
        a = torch.as_tensor(np.stack([read_png(out / "attacked" / n) for n in names]), dtype=torch.float32)
        c = torch.as_tensor(np.stack(clean), dtype=torch.float32)
        y = torch.as_tensor(np.stack(truth), dtype=torch.float32)
        linf = float((a - c).abs().max()) * 255
        with torch.no_grad():
            print(f"l-inf after quantization: {linf:.0f} levels")
            print(f"attacked PSNR vs clean input {psnr(a, c):.2f} dB")
            print(f"target PSNR clean -> attacked {psnr(model(c), y):.2f} -> {psnr(model(a), y):.2f} dB")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- fit-thresholds


def _gray(img: np.ndarray) -> np.ndarray:
    return (0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2])[None]


def _tiles(img: np.ndarray, patch: int) -> list[np.ndarray]:
    h, w = img.shape[-2:]
    return [img[..., r : r + patch, c : c + patch] for r in range(0, h - patch + 1, patch) for c in range(0, w - patch + 1, patch)]


def cmd_fit_thresholds(args) -> int:
    if args.N < 2:
        raise UsageError("--N must be >= 2")
    if args.delta < 0:
        raise UsageError("--delta must be nonnegative")
    if not is_power_of_two(args.patch):
        raise UsageError("--patch must be a power of two")
    names, adv, cln = _paired(Path(args.data))
    noisy, clean = [], []
    for a, c in zip(adv, cln):
        if args.gray:
            a, c = _gray(a), _gray(c)
        for ta, tc in zip(_tiles(a, args.patch), _tiles(c, args.patch)):
            noisy.append(wht2d(ta).ravel())
            clean.append(wht2d(tc).ravel())
    if not noisy:
        raise DataError(f"images smaller than patch {args.patch}")
    noisy_v, clean_v = np.concatenate(noisy), np.concatenate(clean)
    try:
        a = fit_mmse(noisy_v, clean_v, args.N, args.delta, tied=args.tied)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    fitted = apply_tensor(noisy_v.reshape(1, 1, 1, -1), PolyThreshold(args.delta, a)).ravel()
    before = float(np.mean((noisy_v - clean_v) ** 2))
    after = float(np.mean((fitted - clean_v) ** 2))
    result = {
        "N": args.N,
        "delta": args.delta,
        "tied": args.tied,
        "gray": args.gray,
        "patch": args.patch,
        "coeffs": a.tolist(),
        "samples": int(noisy_v.size),
        "mse_before": before,
        "mse_after": after,
        "published_coeffs_for_comparison": list(PUBLISHED_COEFFS),
    }
    out = Path(args.out)
    write_json(out, result)
    plot_threshold(a, args.delta, out.with_suffix(".png"))
    _banner(f"qhnet fit-thresholds: N={args.N} delta={args.delta} on {len(names)} pairs")
    print(f"samples              {noisy_v.size}")
    print(f"coefficients         {np.array2string(a, precision=4)}")
    print(f"published (tied a)   {list(PUBLISHED_COEFFS)}")
    print(f"residual MSE before  {before:.6e}")
    print(f"residual MSE after   {after:.6e}")
    print(f"wrote {out} and {out.with_suffix('.png')}")
    return EXIT_OK


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    names, adv, cln = _paired(Path(args.data))
    overrides = dict(PRESETS[args.preset])
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    tcfg = TrainConfig(**{**overrides, "seed": args.seed})
    qcfg = QHNetConfig.toy() if args.preset == "toy" else QHNetConfig()
    model = QHNet(qcfg, seed=args.seed)
    if args.coeffs:
        fitted = read_json(args.coeffs)
        if len(fitted["coeffs"]) != qcfg.pt_degree + 1:
            raise DataError(f"{args.coeffs} has {len(fitted['coeffs'])} coefficients, need {qcfg.pt_degree + 1}")
        model.load_pt_coeffs(fitted["coeffs"])
    tr, va = split_indices(len(names), args.seed)
    pairs = [(adv[i], cln[i]) for i in tr]
    val = [(adv[i], cln[i]) for i in va]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    log_path.write_text("")
    _banner(f"qhnet train: preset={args.preset} seed={args.seed} epochs={tcfg.epochs} pairs={len(pairs)}+{len(val)}")
    try:
        result = train(model, pairs, tcfg, val, on_epoch=lambda r: (append_jsonl(log_path, [r]), print(_fmt_epoch(r))))
    except DivergenceError as exc:
        print(f"diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    model.eval()
    save_model(out / "qhnet.qhn", model, {"seed": args.seed, "preset": args.preset, "epochs": tcfg.epochs})
    write_json(out / "train_config.json", tcfg.to_dict())
    if result.log:
        plot_training(result.log, out / "training.png")
    print(f"wrote {out / 'qhnet.qhn'}")
    return EXIT_OK


def _fmt_epoch(r: dict) -> str:
    extra = f" val_psnr={r['psnr']:.3f} val_ssim={r['ssim']:.4f}" if "psnr" in r else ""
    return f"epoch {r['epoch']:3d} loss={r['loss']:.5f} lr={r['lr']:.3e}{extra}"


# ---------------------------------------------------------------- defend


def _next_pow2(n: int) -> int:
    return max(4, 1 << (n - 1).bit_length())


def pad_reflect(img: np.ndarray) -> np.ndarray:
    """Reflect-pad the bottom and right edges up to power-of-two sizes (at least 4)."""
    h, w = img.shape[-2:]
    ph, pw = _next_pow2(h) - h, _next_pow2(w) - w
    mode = "reflect" if min(h, w) > 1 else "edge"
    return np.pad(img, ((0, 0), (0, ph), (0, pw)), mode=mode)


def cmd_defend(args) -> int:
    model = _load(args.ckpt)
    if not isinstance(model, QHNet):
        raise DataError(f"{args.ckpt} is not a QHNet checkpoint")
    model.eval()
    src, out = Path(args.inp), Path(args.out)
    names, images = _load_dir(src)
    for name, img in zip(names, images):
        h, w = img.shape[-2:]
        with torch.no_grad():
            y = model(torch.as_tensor(pad_reflect(img), dtype=torch.float32).unsqueeze(0))[0].numpy()
        write_png(out / name, y[:, :h, :w])
    _banner(f"qhnet defend: {len(names)} images from {src}")
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- eval


def _score(pred: np.ndarray, ref: np.ndarray) -> dict:
    p = torch.as_tensor(pred, dtype=torch.float64).unsqueeze(0)
    r = torch.as_tensor(ref, dtype=torch.float64).unsqueeze(0)
    return {"psnr": psnr(p, r), "ssim": float(ssim(p, r))}


def cmd_eval(args) -> int:
    ref_dir = Path(args.ref)
    series = {"pred": Path(args.pred)}
    if args.attacked:
        series = {"attacked": Path(args.attacked), "defended": Path(args.pred)}
    ref_names = list_pngs(ref_dir)
    for label, d in series.items():
        names = list_pngs(d)
        if names != ref_names:
            raise DataError(f"basenames in {d} do not match {ref_dir}")
    _, refs = _load_dir(ref_dir, ref_names)
    report = {"ref": str(ref_dir), "series": {}}
    for label, d in series.items():
        _, preds = _load_dir(d, ref_names)
        per = {n: _score(p, r) for n, p, r in zip(ref_names, preds, refs)}
        mean = {
            "psnr": float(np.mean([v["psnr"] for v in per.values()])) if per else float("nan"),
            "ssim": float(np.mean([v["ssim"] for v in per.values()])) if per else float("nan"),
        }
        report["series"][label] = {"dir": str(d), "per_image": per, "mean": mean}
    _banner(f"qhnet eval: {len(ref_names)} images against {ref_dir}")
    print(f"{'image':<16}" + "".join(f"{lab + ' PSNR':>18}{lab + ' SSIM':>18}" for lab in series))
    for n in ref_names:
        row = "".join(
            f"{report['series'][lab]['per_image'][n]['psnr']:>18.3f}{report['series'][lab]['per_image'][n]['ssim']:>18.4f}"
            for lab in series
        )
        print(f"{n:<16}{row}")
    print("-" * 72)
    print(
        f"{'mean':<16}"
        + "".join(f"{report['series'][lab]['mean']['psnr']:>18.3f}{report['series'][lab]['mean']['ssim']:>18.4f}" for lab in series)
    )
    print(RULE)
    if args.out:
        out = Path(args.out)
        write_json(out, report)
        if ref_names:
            for metric in ("psnr", "ssim"):
                rows = {lab: {n: v[metric] for n, v in report["series"][lab]["per_image"].items()} for lab in series}
                plot_metrics(rows, out.with_name(f"{out.stem}_{metric}.png"), metric)
        print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="qhnet", description="Quaternion-Hadamard purification toolkit.")
    p.add_argument("--version", action="version", version=f"qhnet {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="toy corpus plus a trained toy restoration model")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--restorer-steps", type=int, default=2000)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    a = sub.add_parser("attack", help="FGSM / I-FGSM against the toy model")
    a.add_argument("--model", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--eps", type=float, required=True, help="budget in 8-bit levels")
    a.add_argument("--iters", type=int, default=1)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_attack)

    f = sub.add_parser("fit-thresholds", help="closed-form MMSE fit of thresholding coefficients")
    f.add_argument("--data", required=True)
    f.add_argument("--N", type=int, default=5)
    f.add_argument("--delta", type=float, default=1.0)
    f.add_argument("--patch", type=int, default=64)
    f.add_argument("--tied", action="store_true", help="force a_N = a_{N-1}")
    f.add_argument("--gray", action="store_true", help="fit on luminance instead of RGB")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit_thresholds)

    t = sub.add_parser("train", help="train QHNet on attacked/clean pairs")
    t.add_argument("--data", required=True)
    t.add_argument("--preset", choices=sorted(PRESETS), default="toy")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--epochs", type=int, default=None, help="override the preset's epoch count")
    t.add_argument("--coeffs", default=None, help="initialize thresholding from a fit-thresholds file")
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("defend", help="purify a directory of PNGs")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--in", dest="inp", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_defend)

    e = sub.add_parser("eval", help="PSNR/SSIM report against references")
    e.add_argument("--pred", required=True)
    e.add_argument("--ref", required=True)
    e.add_argument("--attacked", default=None, help="also score these inputs (three-way report)")
    e.add_argument("--out", default=None, help="JSON report path; figures are written next to it")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("QHNET_THREADS")
    if threads:
        torch.set_num_threads(int(threads))
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"qhnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"qhnet {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
