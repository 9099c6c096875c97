"""Command-line surface: prepare, train, sr, eval, bench, ablate.

Exit status: 0 success, 1 usage error, 2 data error, 3 numeric divergence.
Every command emits a run header (resolved config, seed, weight digest) before
any output row, both on stdout and as '#' comment lines in CSV outputs.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import statistics
import sys
import time
from contextlib import nullcontext
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .data import (
    DataError,
    PatchPair,
    PatchSource,
    augment_x8,
    batch_iter,
    extract_patches,
    load_manifest,
    load_pair_dir,
    make_pair,
    planes_to_tensor,
    save_pair,
)
from .imaging import (
    ImageFormatError,
    ImageU8,
    Plane,
    bicubic_resize,
    modcrop,
    png_load,
    png_save,
    rgb_to_ycbcr,
    shaved_metrics,
    y_merge_back,
)
from .model import (
    SrfrnModel,
    WeightFormatError,
    forward,
    init_params,
    load_weights,
    param_count,
    save_weights,
)
from .optim import (
    Adam,
    AdamConfig,
    DivergenceError,
    PlateauSchedule,
    TrainLog,
    evaluate_loss,
    train_epoch,
)

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - optional
    threadpool_limits = None


class UsageError(ValueError):
    pass


@dataclass
class RunConfig:
    scale: int = 2
    n_blocks: int = 6
    epochs: int = 50
    batch_size: int = 24
    lr: float = 1e-3
    patience: int = 10
    patch: int = 48
    stride: int = 48
    seed: int = 0
    determinism: bool = False
    shave: int | None = None
    manifest: str | None = None
    cache: str | None = None
    weights: str | None = None
    output: str | None = None

    def resolved_shave(self) -> int:
        return self.scale if self.shave is None else self.shave


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def run_header(command: str, config: RunConfig, weights_path=None) -> list[str]:
    resolved = {k: v for k, v in asdict(config).items() if v is not None}
    lines = [
        f"srfrn {command}",
        f"config {json.dumps(resolved, sort_keys=True, default=str)}",
        f"seed {config.seed}",
    ]
    if weights_path and Path(weights_path).exists():
        lines.append(f"weights_sha256 {_sha256(weights_path)}")
    else:
        lines.append("weights_sha256 none")
    return lines


def _emit_header(lines: list[str]) -> None:
    for line in lines:
        print(f"# {line}")


def _write_csv(path, header_lines: list[str], fieldnames, rows) -> None:
    with open(path, "w", newline="") as fh:
        for line in header_lines:
            fh.write(f"# {line}\n")
        writer = csv.writer(fh)
        writer.writerow(fieldnames)
        writer.writerows(rows)


def _thread_limit(n: int | None):
    """Context manager limiting BLAS threads; no-op when unavailable or n is None."""
    if n is None or threadpool_limits is None:
        return nullcontext()
    return threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# inference helpers

def predict_plane(model: SrfrnModel, ilr: Plane) -> Plane:
    """Run the network on one interpolated Y plane (255-range in and out)."""
    out, _ = forward(model, planes_to_tensor([ilr]))
    arr = np.clip(out.data[0, 0].astype(np.float64) * 255.0, 0.0, 255.0)
    return Plane(arr)


def patchset_psnr(pairs: list[PatchPair], model: SrfrnModel | None, scale: int) -> float:
    """PSNR from the aggregated MSE over all patches (shave = scale).

    With model=None the interpolated input itself is scored (bicubic baseline).
    """
    shave = scale
    total_se = 0.0
    total_n = 0
    for pair in pairs:
        pred = pair.ilr if model is None else predict_plane(model, pair.ilr)
        sa = pair.hr.samples[shave:-shave, shave:-shave]
        sb = pred.samples[shave:-shave, shave:-shave]
        total_se += float(((sa - sb) ** 2).sum())
        total_n += sa.size
    mse = total_se / total_n
    return math.inf if mse == 0 else 10.0 * math.log10(255.0**2 / mse)


def synthesize_eval_planes(y_hr: Plane, scale: int) -> tuple[Plane, Plane]:
    """(ground truth, interpolated LR) for one Y plane: modcrop, down, up."""
    gt = modcrop(y_hr, scale)
    lr = bicubic_resize(gt, gt.width // scale, gt.height // scale)
    ilr = bicubic_resize(lr, gt.width, gt.height)
    return gt, ilr


# ---------------------------------------------------------------------------
# training driver

def fit(
    model: SrfrnModel,
    train_pairs: list[PatchPair],
    val_pairs: list[PatchPair],
    config: RunConfig,
    log_path=None,
    header_lines: list[str] | None = None,
    start_t: int = 0,
    start_lr: float | None = None,
) -> tuple[SrfrnModel, float, Adam, PlateauSchedule]:
    """Epoch loop: train, validate, plateau-decay, track best-validation weights.

    Returns (model restored to its best-validation parameters, best val loss,
    optimizer, schedule).
    """
    optimizer = Adam(AdamConfig(lr=start_lr if start_lr is not None else config.lr))
    optimizer.t = start_t
    sched = PlateauSchedule(lr=optimizer.config.lr, patience=config.patience)
    log = TrainLog(log_path, header_lines) if log_path else None

    best_val = math.inf
    best_state = [(layer.weights.copy(), layer.bias.copy()) for layer in model.layers()]
    limit = 1 if config.determinism else None
    with _thread_limit(limit):
        for epoch in range(config.epochs):
            batches = batch_iter(train_pairs, config.batch_size, seed=config.seed + epoch)
            train_loss = train_epoch(model, batches, optimizer)
            val_loss = evaluate_loss(model, batch_iter(val_pairs, config.batch_size, seed=0))
            optimizer.config.lr = sched.update(val_loss)
            if val_loss < best_val:
                best_val = val_loss
                best_state = [(l.weights.copy(), l.bias.copy()) for l in model.layers()]
            if log:
                log.append(epoch, train_loss, val_loss, optimizer.config.lr)

    for layer, (w, b) in zip(model.layers(), best_state):
        layer.weights[:] = w
        layer.bias[:] = b
    return model, best_val, optimizer, sched


# ---------------------------------------------------------------------------
# subcommands

def cmd_prepare(args) -> int:
    config = RunConfig(
        scale=args.scale, patch=args.patch, stride=args.stride, seed=args.seed,
        manifest=args.manifest, cache=str(args.cache),
    )
    _emit_header(run_header("prepare", config))
    manifest = load_manifest(args.manifest, args.scale)
    if not manifest.entries:
        raise DataError(f"manifest {args.manifest} is empty")

    cache = Path(args.cache)
    images_in = 0
    augmented = 0
    patches_out = 0
    failures = []
    # a manifest without val entries falls back to a 95/5 patch holdout
    auto_holdout = not manifest.split("val")
    holdout_counter = 0
    for split in ("train", "val"):
        entries = manifest.split(split)
        if not entries:
            continue
        out_dir = cache / split
        out_dir.mkdir(parents=True, exist_ok=True)
        if auto_holdout:
            (cache / "val").mkdir(parents=True, exist_ok=True)
        for index, entry in enumerate(entries):
            try:
                image = png_load(entry.path)
            except (ImageFormatError, FileNotFoundError) as exc:
                failures.append(f"{entry.path}: {exc}")
                continue
            images_in += 1
            y_plane = modcrop(rgb_to_ycbcr(image)[0], args.scale)
            variants = augment_x8(y_plane) if split == "train" and not args.no_augment else [y_plane]
            augmented += len(variants)
            image_id = f"{index:04d}-{entry.path.stem}"
            for variant_id, variant in enumerate(variants):
                if min(variant.height, variant.width) < args.patch:
                    continue
                for patch, y, x in extract_patches(variant, args.patch, args.stride):
                    pair = make_pair(patch, args.scale, PatchSource(image_id, y, x, variant_id))
                    target = out_dir
                    if auto_holdout and split == "train":
                        target = cache / ("val" if holdout_counter % 20 == 19 else "train")
                        holdout_counter += 1
                    save_pair(pair, target)
                    patches_out += 1

    for failure in failures:
        print(f"skipped {failure}", file=sys.stderr)
    print(f"images_in={images_in} augmented={augmented} patches_out={patches_out}")
    if images_in == 0:
        raise DataError("no readable images in manifest")
    return 0


def _write_sidecar(weights_path, config: RunConfig, optimizer: Adam, epoch: int) -> None:
    meta = {
        "scale": config.scale,
        "n_blocks": config.n_blocks,
        "seed": config.seed,
        "adam_t": optimizer.t,
        "lr": optimizer.config.lr,
        "epochs_done": epoch,
        "config": {k: v for k, v in asdict(config).items() if v is not None},
    }
    Path(str(weights_path) + ".json").write_text(json.dumps(meta, indent=2, default=str) + "\n")


def _read_sidecar(weights_path) -> dict | None:
    sidecar = Path(str(weights_path) + ".json")
    if not sidecar.exists():
        return None
    return json.loads(sidecar.read_text())


def _check_scale(weights_path, requested: int) -> None:
    meta = _read_sidecar(weights_path)
    if meta is not None and meta.get("scale") not in (None, requested):
        raise UsageError(
            f"weights {weights_path} were trained for scale {meta['scale']}, "
            f"requested {requested}"
        )


def cmd_train(args) -> int:
    config = RunConfig(
        scale=args.scale, n_blocks=args.n_blocks, epochs=args.epochs,
        batch_size=args.batch_size, lr=args.lr, patience=args.patience,
        seed=args.seed, determinism=args.determinism,
        cache=str(args.cache), weights=str(args.out),
    )
    header = run_header("train", config)
    _emit_header(header)

    cache = Path(args.cache)
    train_pairs = load_pair_dir(cache / "train")
    val_pairs = load_pair_dir(cache / "val")

    start_t = 0
    start_lr = None
    if args.resume:
        model = load_weights(args.resume)
        if model.n_blocks != args.n_blocks:
            raise UsageError(
                f"resume weights have {model.n_blocks} blocks, requested {args.n_blocks}"
            )
        meta = _read_sidecar(args.resume)
        if meta:
            start_t = int(meta.get("adam_t", 0))
            start_lr = float(meta.get("lr", args.lr))
    else:
        model = init_params(SrfrnModel(args.n_blocks), args.seed)

    log_path = args.log or (str(args.out) + ".log.csv")
    model, best_val, optimizer, _ = fit(
        model, train_pairs, val_pairs, config, log_path, header, start_t, start_lr
    )
    save_weights(model, args.out)
    _write_sidecar(args.out, config, optimizer, args.epochs)
    print(f"best_val_loss={best_val:.8f} weights={args.out}")
    return 0


def cmd_sr(args) -> int:
    config = RunConfig(scale=args.scale, weights=str(args.weights), output=str(args.output))
    _emit_header(run_header("sr", config, args.weights))
    _check_scale(args.weights, args.scale)
    model = load_weights(args.weights)

    image = png_load(args.input)
    scale = args.scale
    out_w, out_h = image.width * scale, image.height * scale
    y, cb, cr = rgb_to_ycbcr(image)
    ilr = bicubic_resize(y, out_w, out_h)
    sr_y = predict_plane(model, ilr)

    if image.channels == 1:
        png_save(ImageU8(np.rint(sr_y.samples).astype(np.uint8)[:, :, None]), args.output)
    else:
        cb_up = bicubic_resize(cb, out_w, out_h)
        cr_up = bicubic_resize(cr, out_w, out_h)
        png_save(y_merge_back(sr_y, cb_up, cr_up), args.output)
    print(f"wrote {args.output} ({out_w}x{out_h})")
    return 0


def cmd_eval(args) -> int:
    config = RunConfig(
        scale=args.scale, shave=args.shave, manifest=args.manifest,
        weights=str(args.weights) if args.weights else None,
    )
    header = run_header("eval", config, args.weights)
    _emit_header(header)

    model = None
    if not args.bicubic_only:
        if args.weights is None:
            raise UsageError("either --weights or --bicubic-only is required")
        _check_scale(args.weights, args.scale)
        model = load_weights(args.weights)

    manifest = load_manifest(args.manifest, args.scale)
    entries = manifest.split("test")
    if not entries:
        raise DataError(f"manifest {args.manifest} has no test entries")

    shave = config.resolved_shave()
    rows = []
    per_dataset: dict[str, list[tuple[float, float]]] = {}
    for entry in entries:
        image = png_load(entry.path)
        gt, ilr = synthesize_eval_planes(rgb_to_ycbcr(image)[0], args.scale)
        start = time.perf_counter()
        pred = ilr if model is None else predict_plane(model, ilr)
        infer_ms = (time.perf_counter() - start) * 1000.0
        p, s = shaved_metrics(gt, pred, shave)
        rows.append([entry.path.name, args.scale, _fmt_psnr(p), f"{s:.4f}", f"{infer_ms:.2f}"])
        per_dataset.setdefault(entry.dataset, []).append((p, s))

    for dataset, values in sorted(per_dataset.items()):
        mean_p = _mean_psnr([v[0] for v in values])
        mean_s = sum(v[1] for v in values) / len(values)
        rows.append([f"mean:{dataset}", args.scale, _fmt_psnr(mean_p), f"{mean_s:.4f}", ""])

    fields = ("image", "scale", "psnr_db", "ssim", "infer_ms")
    if args.out:
        _write_csv(args.out, header, fields, rows)
    writer = csv.writer(sys.stdout)
    writer.writerow(fields)
    writer.writerows(rows)
    return 0


def _fmt_psnr(value: float) -> str:
    return "inf" if math.isinf(value) else f"{value:.4f}"


def _mean_psnr(values: list[float]) -> float:
    finite = [v for v in values if math.isfinite(v)]
    if not finite:
        return math.inf
    return sum(finite) / len(finite)


def cmd_bench(args) -> int:
    config = RunConfig(
        scale=0, n_blocks=args.n_blocks, seed=args.seed,
        weights=str(args.weights) if args.weights else None,
    )
    header = run_header("bench", config, args.weights)
    _emit_header(header)

    if args.weights:
        model = load_weights(args.weights)
    else:
        model = init_params(SrfrnModel(args.n_blocks), args.seed)

    if args.backend:
        kernels.set_backend(args.backend)

    scales = [int(s) for s in args.scales.split(",")]
    hr = args.hr_size
    if args.images:
        planes = []
        for path in args.images:
            y = rgb_to_ycbcr(png_load(path))[0]
            if y.height < hr or y.width < hr:
                raise DataError(f"{path} smaller than --hr-size {hr}")
            planes.append(Plane(y.samples[:hr, :hr]))
    else:
        rng = np.random.default_rng(args.seed)
        planes = [Plane(rng.uniform(0.0, 255.0, (hr, hr)))]

    rows = []
    limit = None if args.threads == 0 else args.threads
    with _thread_limit(limit):
        for scale in scales:
            forward_ms: list[float] = []
            total_ms: list[float] = []
            for plane in planes:
                lr = bicubic_resize(plane, hr // scale, hr // scale)
                ilr = planes_to_tensor([bicubic_resize(lr, hr, hr)])
                for _ in range(args.warmup):
                    forward(model, ilr)
                for _ in range(args.reps):
                    t0 = time.perf_counter()
                    ilr_rep = planes_to_tensor([bicubic_resize(lr, hr, hr)])
                    t1 = time.perf_counter()
                    forward(model, ilr_rep)
                    t2 = time.perf_counter()
                    forward_ms.append((t2 - t1) * 1000.0)
                    total_ms.append((t2 - t0) * 1000.0)
            row = {
                "scale": scale,
                "hr_size": hr,
                "backend": kernels.backend_name(),
                "reps": len(forward_ms),
                "forward_mean_ms": statistics.mean(forward_ms),
                "forward_median_ms": statistics.median(forward_ms),
                "forward_std_ms": statistics.pstdev(forward_ms) if len(forward_ms) > 1 else 0.0,
                "e2e_mean_ms": statistics.mean(total_ms),
            }
            rows.append(row)
            print(
                f"scale=x{scale} forward {row['forward_mean_ms']:.2f} ms "
                f"(median {row['forward_median_ms']:.2f}, std {row['forward_std_ms']:.2f}), "
                f"end-to-end {row['e2e_mean_ms']:.2f} ms"
            )

    if args.out:
        fields = list(rows[0].keys())
        _write_csv(args.out, header, fields, [[f"{r[k]:.4f}" if isinstance(r[k], float) else r[k] for k in fields] for r in rows])
    return 0


def cmd_ablate(args) -> int:
    blocks = [int(b) for b in args.blocks.split(",")]
    config = RunConfig(
        scale=args.scale, epochs=args.epochs, batch_size=args.batch_size,
        lr=args.lr, patience=args.patience, seed=args.seed,
        determinism=args.determinism, cache=str(args.cache),
    )
    header = run_header("ablate", config)
    _emit_header(header)

    cache = Path(args.cache)
    train_pairs = load_pair_dir(cache / "train")
    val_pairs = load_pair_dir(cache / "val")

    rows = []
    for n in blocks:
        run_cfg = RunConfig(**{**asdict(config), "n_blocks": n})
        model = init_params(SrfrnModel(n), args.seed)
        model, _, _, _ = fit(model, train_pairs, val_pairs, run_cfg)
        val_psnr = patchset_psnr(val_pairs, model, args.scale)
        rows.append([n, param_count(n), f"{val_psnr:.4f}"])
        print(f"n_blocks={n} params={param_count(n)} val_psnr={val_psnr:.4f}")

    fields = ("n_blocks", "param_count", "val_psnr")
    if args.out:
        _write_csv(args.out, header, fields, rows)
    return 0


# ---------------------------------------------------------------------------
# parser / entry point

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="srfrn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="build the patch-pair cache from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cache", required=True, type=Path)
    p.add_argument("--scale", type=int, default=2, choices=(2, 3, 4))
    p.add_argument("--patch", type=int, default=48)
    p.add_argument("--stride", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-augment", action="store_true")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train on a prepared cache")
    p.add_argument("--cache", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--scale", type=int, default=2, choices=(2, 3, 4))
    p.add_argument("--n-blocks", type=int, default=6, choices=range(1, 8))
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--batch-size", type=int, default=24)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--determinism", action="store_true")
    p.add_argument("--resume", type=Path, default=None)
    p.add_argument("--log", type=Path, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sr", help="super-resolve one PNG")
    p.add_argument("--weights", required=True, type=Path)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--output", required=True, type=Path)
    p.add_argument("--scale", type=int, default=2, choices=(2, 3, 4))
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("eval", help="PSNR/SSIM over a test manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scale", type=int, default=2, choices=(2, 3, 4))
    p.add_argument("--weights", type=Path, default=None)
    p.add_argument("--bicubic-only", action="store_true")
    p.add_argument("--shave", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="inference latency at fixed HR output size")
    p.add_argument("--weights", type=Path, default=None)
    p.add_argument("--n-blocks", type=int, default=6, choices=range(1, 8))
    p.add_argument("--images", nargs="*", default=None)
    p.add_argument("--scales", default="2,3,4")
    p.add_argument("--hr-size", type=int, default=240)
    p.add_argument("--reps", type=int, default=10)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--threads", type=int, default=1, help="BLAS threads; 0 = unpinned")
    p.add_argument("--backend", choices=("compiled", "numpy"), default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("ablate", help="train per block count, report params + val PSNR")
    p.add_argument("--cache", required=True, type=Path)
    p.add_argument("--blocks", default="1,2,3,4,5,6,7")
    p.add_argument("--scale", type=int, default=2, choices=(2, 3, 4))
    p.add_argument("--epochs", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=24)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--determinism", action="store_true")
    p.add_argument("--out", type=Path, default=None)
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"srfrn: usage error: {exc}", file=sys.stderr)
        return 1
    except (DataError, ImageFormatError, WeightFormatError, FileNotFoundError) as exc:
        print(f"srfrn: data error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"srfrn: numeric divergence: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
