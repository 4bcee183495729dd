"""Command-line entry point: ``transmix <command> --config FILE [--set key=value ...]``.

Exit codes: 0 success, 1 contract/runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint, config, gradcheck, imageio, mix, robustness, train, vit
from .data import BlobParams, Dataset, generate_synthetic_blobs, load_cifar10_binary
from .errors import ContractError, TransmixError

log = logging.getLogger("transmix")

EXIT_OK, EXIT_ERROR, EXIT_USAGE = 0, 1, 2


def load_datasets(cfg: config.ExperimentConfig) -> tuple[Dataset, Dataset]:
    d, m = cfg.data, cfg.model
    if d.source == "cifar10_binary":
        if (m.image_h, m.image_w, m.channels, m.num_classes) != (32, 32, 3, 10):
            raise ContractError("cifar10_binary needs model 32x32x3 with 10 classes")
        return (
            load_cifar10_binary(d.train_path, d.norm_mean, d.norm_std),
            load_cifar10_binary(d.eval_path, d.norm_mean, d.norm_std),
        )
    if m.image_h != m.image_w:
        raise ContractError("synthetic blobs are square; set model.image_h == model.image_w")
    common = dict(image_size=m.image_h, channels=m.channels, num_classes=m.num_classes,
                  noise_std=d.noise_std, amplitude=d.amplitude, min_radius=d.min_radius, max_radius=d.max_radius)
    return (
        generate_synthetic_blobs(BlobParams(samples=d.train_samples, **common), d.seed),
        generate_synthetic_blobs(BlobParams(samples=d.eval_samples, **common), d.seed + 1),
    )


def _load_model(cfg: config.ExperimentConfig, path: str | None):
    ckpt = Path(path) if path else cfg.checkpoint_path
    model_cfg, params = checkpoint.load_checkpoint(ckpt)
    return model_cfg, params


def cmd_train(cfg, args) -> int:
    train_set, eval_set = load_datasets(cfg)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    params, records = train.train(
        train_set, eval_set, cfg.model, cfg.train, metrics_path=cfg.metrics_path, mix_log_path=cfg.mix_log_path,
    )
    checkpoint.save_checkpoint(cfg.checkpoint_path, params, cfg.model)
    last = records[-1]
    print(f"trained {len(records)} epochs: loss {last.train_loss:.4f} eval_top1 {last.eval_top1:.4f}")
    print(f"checkpoint {cfg.checkpoint_path}")
    print(f"metrics {cfg.metrics_path}")
    return EXIT_OK


def cmd_eval(cfg, args) -> int:
    _, eval_set = load_datasets(cfg)
    model_cfg, params = _load_model(cfg, args.checkpoint)
    print(f"eval_top1 {train.evaluate_top1(params, model_cfg, eval_set)!r}")
    return EXIT_OK


def cmd_occlusion(cfg, args) -> int:
    _, eval_set = load_datasets(cfg)
    model_cfg, params = _load_model(cfg, args.checkpoint)
    order = args.order or cfg.eval.occlusion_order
    curve = robustness.occlusion_curve(params, model_cfg, eval_set, cfg.eval.occlusion_ratios, order, cfg.eval.seed)
    rows = [(f"occlusion_{order}", r, acc) for r, acc in curve]
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.output_dir / f"occlusion_{order}.csv"
    robustness.write_results(out, rows)
    for r, acc in curve:
        print(f"drop_ratio {r:.3f} top1 {acc:.4f}")
    print(f"results {out}")
    return EXIT_OK


def cmd_shuffle(cfg, args) -> int:
    _, eval_set = load_datasets(cfg)
    model_cfg, params = _load_model(cfg, args.checkpoint)
    curve = robustness.shuffle_curve(params, model_cfg, eval_set, cfg.eval.shuffle_grids, cfg.eval.seed)
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.output_dir / "shuffle.csv"
    robustness.write_results(out, [("shuffle", g, acc) for g, acc in curve])
    for g, acc in curve:
        print(f"grid {g} top1 {acc:.4f}")
    print(f"results {out}")
    return EXIT_OK


def cmd_wsol(cfg, args) -> int:
    _, eval_set = load_datasets(cfg)
    if eval_set.masks is None:
        raise ContractError("wsol needs ground-truth masks (data.source = synthetic_blobs)")
    model_cfg, params = _load_model(cfg, args.checkpoint)
    subset = eval_set.subset(np.arange(min(cfg.eval.samples, len(eval_set))))
    res = robustness.wsol_evaluate(params, model_cfg, subset, cfg.eval.mask_threshold, cfg.eval.mask_mode)
    rows = [("wsol_jaccard", i, v) for i, v in enumerate(res.jaccard)]
    rows += [("wsol_bbox_iou", i, v) for i, v in enumerate(res.iou)]
    rows += [("wsol_jaccard", "mean", res.mean_jaccard), ("wsol_bbox_iou", "mean", res.mean_iou)]
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    out = cfg.output_dir / "wsol.csv"
    robustness.write_results(out, rows)
    print(f"jaccard {res.mean_jaccard!r}")
    print(f"bbox_miou {res.mean_iou!r}")
    print(f"results {out}")
    return EXIT_OK


def cmd_gradcheck(cfg, args) -> int:
    results = gradcheck.toy_model_gradcheck(cfg.model, seed=cfg.train.seed)
    worst = max(r.max_rel_err for r in results)
    failed = [r for r in results if not r.passed()]
    for r in results:
        print(f"{'ok  ' if r.passed() else 'FAIL'} {r.name:32s} n={r.size:6d} max_rel_err={r.max_rel_err:.3e}")
    print(f"{len(results) - len(failed)}/{len(results)} parameters pass (worst {worst:.3e}, tol {gradcheck.DEFAULT_RTOL:g})")
    return EXIT_ERROR if failed else EXIT_OK


def cmd_visualize(cfg, args) -> int:
    _, eval_set = load_datasets(cfg)
    try:
        model_cfg, params = _load_model(cfg, args.checkpoint)
    except (OSError, TransmixError):
        log.warning("no checkpoint at %s; visualising a freshly initialised model", cfg.checkpoint_path)
        model_cfg, params = cfg.model, vit.init_params(cfg.model, seed=cfg.train.seed)
    n = max(2, min(cfg.train.batch_size, len(eval_set)))
    x = eval_set.images[:n]
    h, w = x.shape[2:]
    rng = np.random.default_rng(cfg.eval.seed)
    if args.lam is None:
        plan = mix.plan_cutmix(n, h, w, cfg.train.beta_alpha, rng)
    else:
        box = mix.sample_cutbox(args.lam, h, w, rng)
        m = mix.build_mask(box, h, w)
        plan = mix.MixPlan(box, m, mix.mask_lambda(m), args.lam, pairing=mix.pairing(n))
    xm = mix.apply_cutmix_batch(x, plan.mask)
    out = vit.forward(xm, params, model_cfg)
    attn = out.attention.select(cfg.train.attention_source, None if cfg.train.attention_block < 0 else cfg.train.attention_block)
    mix.finalize_transmix(plan, attn, model_cfg.grid, cfg.train.lambda_mode, cfg.train.renormalize_attention)

    lo, hi = float(x.min()), float(x.max())
    scale = lambda img: (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)  # noqa: E731
    a_map = attn[0] / attn[0].max() if attn[0].max() > 0 else attn[0]
    heat = np.kron(a_map.reshape(model_cfg.grid), np.ones((model_cfg.patch_size,) * 2))
    outdir = cfg.output_dir / "visualize"
    outdir.mkdir(parents=True, exist_ok=True)
    files = {
        "image_a.ppm": scale(x[0]),
        "image_b.ppm": scale(x[n - 1]),
        "mixed.ppm": scale(xm[0]),
        "attention.ppm": imageio.attention_overlay(xm[0], heat),
    }
    for name, img in files.items():
        imageio.write_ppm(img[:3] if img.shape[0] >= 3 else img[:1], outdir / name)
    lam_attn = "n/a" if plan.lambda_attn is None else f"{float(plan.lambda_attn[0]):.6f}"
    print(f"box {plan.box} lambda_area {plan.lambda_area:.6f} lambda_attn {lam_attn} "
          f"lambda_final {float(np.atleast_1d(plan.lambda_final)[0]):.6f}")
    print(f"wrote {', '.join(str(outdir / f) for f in files)}")
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "occlusion": cmd_occlusion,
    "shuffle": cmd_shuffle,
    "wsol": cmd_wsol,
    "gradcheck": cmd_gradcheck,
    "visualize": cmd_visualize,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="transmix", description="Toy ViT training with attention-guided mixing.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        if name not in ("train", "gradcheck"):
            p.add_argument("--checkpoint", default=None, help="defaults to output.dir/output.checkpoint")
        if name == "occlusion":
            p.add_argument("--order", choices=robustness.ORDERS, default=None)
        if name == "visualize":
            p.add_argument("--lam", type=float, default=None, help="force the cut-box lambda")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if not Path(args.config).is_file():
        parser.print_usage(sys.stderr)
        print(f"transmix: error: config file not found: {args.config}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = config.load(args.config, args.overrides)
        return COMMANDS[args.command](cfg, args)
    except (TransmixError, OSError) as exc:
        print(f"transmix: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
