"""Command line: generate / verify / pretrain / bench / probe.

Machine-readable output is line-delimited ``key=value`` records in UTF-8.
Record files contain only deterministic quantities; wall-clock timings go
to stdout tables, never into records. Exit codes: 0 success, 1 invariant
or check failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys

USAGE_ERROR = 2


def _fmt_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_record(rec: dict) -> str:
    return " ".join(f"{k}={_fmt_value(v)}" for k, v in rec.items())


def write_records(path: str | None, records: list[dict]) -> None:
    lines = "".join(format_record(r) + "\n" for r in records)
    if path:
        with open(path, "w", encoding="utf-8") as f:
            f.write(lines)
    else:
        sys.stdout.write(lines)


def _apply_global_options(args) -> None:
    if args.threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                    "NUMEXPR_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    from . import tensor as tc

    tc.set_precision(args.precision)


def _run_config(args):
    from .config import RunConfig, parse_config_file

    overrides = {}
    if getattr(args, "config", None):
        overrides.update(parse_config_file(args.config))
    for key in ("seed", "precision", "threads"):
        overrides[key] = getattr(args, key)
    for key in ("model", "epochs", "batch_size", "enc_depth", "dec_depth", "rank",
                "ratio", "base_lr", "data_dir"):
        val = getattr(args, key, None)
        if val is not None:
            overrides[key] = val
    return RunConfig(**overrides)


# ---------------------------------------------------------------------------
# Dataset plumbing shared by pretrain and probe


def _load_dataset(data_dir: str):
    """Read every tile behind the manifest, normalized against train stats.

    Returns dict with per-split (pixels, labels) plus shared metadata.
    Pixels are mapped through the dataset 3..97 percentile band into (0,255)
    and then scaled to (0,1).
    """
    import numpy as np

    from . import data_io as dio

    manifest = os.path.join(data_dir, "manifest.txt")
    if not os.path.exists(manifest):
        raise FileNotFoundError(f"no manifest at {manifest}")
    records = dio.read_manifest(manifest)
    cubes = {r["path"]: dio.read_tile(os.path.join(data_dir, r["path"])) for r in records}
    train_cubes = [cubes[r["path"]] for r in records if r["split"] == "train"]
    stats = dio.compute_stats(train_cubes if train_cubes else list(cubes.values()))

    splits: dict[str, dict] = {}
    meta = None
    for rec in records:
        cube = dio.normalize_tile(cubes[rec["path"]], stats)
        if meta is None:
            meta = {
                "wavelengths": cube.wavelengths,
                "n_optical": cube.n_optical,
                "resolution": cube.resolution,
            }
        split = splits.setdefault(rec["split"], {"pixels": [], "labels": []})
        split["pixels"].append(cube.pixels / 255.0)
        split["labels"].append(-1 if rec["label"] is None else rec["label"])
    for split in splits.values():
        split["pixels"] = np.stack(split["pixels"])
        split["labels"] = np.array(split["labels"])
    return splits, meta


def _encode_features(model, pixels, meta, batch_size=32):
    """Frozen-encoder features for probing: global CLS, channel CLS, patches."""
    import numpy as np

    from .heads import grid_features

    outs = {"global_cls": [], "channel_cls": [], "patch_tokens": []}
    for start in range(0, pixels.shape[0], batch_size):
        grid = model.encode(
            pixels[start : start + batch_size],
            meta["wavelengths"], meta["n_optical"], meta["resolution"],
        )
        feats = grid_features(grid)
        for k in outs:
            outs[k].append(feats[k])
    return {k: np.concatenate(v) for k, v in outs.items()}


# ---------------------------------------------------------------------------
# Commands


def cmd_generate(args) -> int:
    import numpy as np

    from . import data_io as dio

    out_dir = args.out
    wavelengths = None if args.channels != 13 else dio.SENTINEL2_WAVELENGTHS_NM
    cfg = dio.SynthConfig(
        channels=args.channels,
        height=args.size,
        width=args.size,
        resolution=args.resolution,
        wavelengths=wavelengths,
        mixing_rank=min(args.channels, max(args.classes, 4)),
        n_classes=args.classes,
        noise_level=args.noise,
        n_radar=args.radar,
        label_rule_seed=args.seed,
    )
    manifest = dio.generate_dataset(cfg, args.num, out_dir, seed=args.seed)
    records = dio.read_manifest(manifest)
    labels = [r["label"] for r in records]
    print(f"wrote {len(records)} tiles to {out_dir}")
    print(f"channels={cfg.channels + cfg.n_radar} size={cfg.height}x{cfg.width} "
          f"resolution={cfg.resolution} classes={args.classes}")
    print("label counts: " + " ".join(
        f"{i}:{labels.count(i)}" for i in range(args.classes)))
    return 0


def cmd_verify(args) -> int:
    from .verify import run_checks

    results = run_checks(inject_fault=args.inject_fault)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        line = f"{status} {r.name} ({r.seconds:.3f}s)"
        if not r.passed and r.detail:
            line += f" :: {r.detail.splitlines()[0][:100]}"
        print(line)
    n_fail = sum(1 for r in results if not r.passed)
    print(f"{len(results) - n_fail}/{len(results)} checks passed")
    return 1 if n_fail else 0


def cmd_pretrain(args) -> int:
    import numpy as np

    from .hypermae import HyperMaeModel, PretrainConfig, pretrain_loop, save_checkpoint

    run = _run_config(args)
    data_dir = run.resolved_data_dir()
    if not data_dir:
        print("error: no dataset; pass --data or set LESS_DATA_DIR", file=sys.stderr)
        return USAGE_ERROR
    splits, meta = _load_dataset(data_dir)
    if "train" not in splits:
        print("error: manifest has no train split", file=sys.stderr)
        return USAGE_ERROR
    pixels = splits["train"]["pixels"]
    os.makedirs(args.out, exist_ok=True)

    model = HyperMaeModel(run.hypermae_config(), np.random.default_rng(run.seed))
    curve_path = os.path.join(args.out, "loss_curve.txt")
    curve = open(curve_path, "w", encoding="utf-8")

    def hook(rec):
        curve.write(format_record(rec) + "\n")
        if rec["step"] == -1:
            print(f"epoch {rec['epoch']:3d} loss {rec['loss']:.6f} lr {rec['lr']:.2e}")

    try:
        pretrain_loop(
            model, pixels, meta["wavelengths"], meta["n_optical"], meta["resolution"],
            PretrainConfig(
                epochs=run.epochs, batch_size=run.batch_size, base_lr=run.base_lr,
                warmup_frac=run.warmup_frac, weight_decay=run.weight_decay, seed=run.seed,
            ),
            record_hook=hook,
        )
    finally:
        curve.close()

    ckpt_path = os.path.join(args.out, "checkpoint.lvck")
    save_checkpoint(
        ckpt_path, dict(model.cfg.__dict__), model.parameters(),
        rng_state={"seed": run.seed, "epochs": run.epochs},
    )
    print(f"checkpoint: {ckpt_path}")
    print(f"loss curve: {curve_path}")
    return 0


def cmd_bench(args) -> int:
    from .attention import AttentionRatioConfig, flop_report
    from .config import MODEL_PRESETS

    preset = MODEL_PRESETS[args.model]
    cfg = AttentionRatioConfig(
        dim=preset["dim"], num_heads=preset["num_heads"], ratio=args.ratio, rank=args.rank,
    )
    channels = [int(c) for c in args.channels.split(",")]
    reports = [flop_report(cfg, n=args.n, c=c, seed=args.seed) for c in channels]

    print(f"{'N':>5} {'C':>4} {'D':>5} | {'LESS MACs':>14} {'vanilla MACs':>14} "
          f"{'MAC x':>8} | {'LESS t':>7} {'vanilla t':>9} {'time x':>7}")
    for r in reports:
        print(f"{r['n']:>5} {r['c']:>4} {r['dim']:>5} | {r['less_macs']:>14,} "
              f"{r['vanilla_macs']:>14,} {r['ratio']:>8.2f} | 1.0 "
              f"{r['vanilla_seconds'] / max(r['less_seconds'], 1e-12):>12.2f}x")

    records = [
        {
            "n": r["n"], "c": r["c"], "dim": r["dim"],
            "less_macs": r["less_macs"], "vanilla_macs": r["vanilla_macs"],
            "vanilla_attention_macs": r["vanilla_attention_macs"],
            "less_norm": 1.0, "vanilla_norm": r["ratio"],
        }
        for r in reports
    ]
    write_records(args.out, records)
    if args.out:
        print(f"records: {args.out}")
    return 0


def cmd_probe(args) -> int:
    import numpy as np

    from . import heads as hd
    from .hypermae import HyperMaeConfig, HyperMaeModel, model_from_checkpoint

    run = _run_config(args)
    data_dir = run.resolved_data_dir()
    if not data_dir:
        print("error: no dataset; pass --data or set LESS_DATA_DIR", file=sys.stderr)
        return USAGE_ERROR
    splits, meta = _load_dataset(data_dir)
    train = splits.get("train")
    test = splits.get("test") or splits.get("val") or train
    if train is None:
        print("error: manifest has no train split", file=sys.stderr)
        return USAGE_ERROR

    if args.random_init:
        from .hypermae import load_checkpoint

        config, _, _ = load_checkpoint(args.checkpoint)
        model = HyperMaeModel(HyperMaeConfig(**config), np.random.default_rng(run.seed))
    else:
        model = model_from_checkpoint(args.checkpoint)

    train_feats = _encode_features(model, train["pixels"], meta)
    test_feats = _encode_features(model, test["pixels"], meta)
    y_train, y_test = train["labels"], test["labels"]
    n_classes = int(max(y_train.max(), y_test.max())) + 1
    records = []

    if args.mode == "linear":
        w, b = hd.train_linear_probe(
            train_feats["global_cls"], y_train, n_classes,
            epochs=args.probe_epochs, lr=args.probe_lr, seed=run.seed,
        )
        acc_train = float(np.mean(hd.linear_predict(train_feats["global_cls"], w, b) == y_train))
        acc_test = float(np.mean(hd.linear_predict(test_feats["global_cls"], w, b) == y_test))
        records.append({"mode": "linear", "acc_train": acc_train, "acc_test": acc_test,
                        "n_train": len(y_train), "n_test": len(y_test)})
        print(f"linear probe: train {acc_train:.4f} test {acc_test:.4f}")
    elif args.mode == "knn":
        k = min(args.k, len(y_train))
        acc = hd.knn_probe(train_feats["global_cls"], y_train,
                           test_feats["global_cls"], y_test, k=k)
        records.append({"mode": "knn", "k": k, "acc_test": acc,
                        "n_train": len(y_train), "n_test": len(y_test)})
        print(f"knn probe (k={k}): test {acc:.4f}")
    elif args.mode == "moe":
        for n_experts in range(1, args.max_experts + 1):
            head = hd.train_moe(
                train_feats["channel_cls"], y_train, n_classes, n_experts,
                top_k=min(args.moe_top_k, train_feats["channel_cls"].shape[1]),
                epochs=args.probe_epochs, lr=args.probe_lr, seed=run.seed,
            )
            acc = float(np.mean(hd.moe_forward(test_feats["channel_cls"], head) == y_test))
            records.append({"mode": "moe", "experts": n_experts, "acc_test": acc})
            print(f"moe probe, {n_experts} experts: test {acc:.4f}")
    elif args.mode == "pca":
        os.makedirs(args.pca_dir or ".", exist_ok=True)
        n_tiles = min(args.pca_tiles, test["pixels"].shape[0])
        for i in range(n_tiles):
            toks = test_feats["patch_tokens"][i]  # (N, C, D)
            per_patch = toks.mean(axis=1)  # channel-mean per spatial patch
            scores, comps, vals = hd.pca_patch_features(per_patch, n_components=3)
            gh = gw = int(np.sqrt(per_patch.shape[0]))
            path = os.path.join(args.pca_dir or ".", f"pca_{i:03d}.ppm")
            hd.export_ppm(scores.reshape(gh, gw, 3), path)
            explained = vals / max(vals.sum(), 1e-12)
            records.append({
                "mode": "pca", "tile": i,
                "ev1": float(vals[0]), "ev2": float(vals[1]), "ev3": float(vals[2]),
                "explained1": float(explained[0]),
            })
            print(f"pca tile {i}: eigenvalues {np.round(vals, 5).tolist()} -> {path}")
    write_records(args.out, records)
    if args.out:
        print(f"records: {args.out}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lessvit",
        description="Low-rank spatial-spectral transformer: data, training, probes, benchmarks.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--config", help="text config file of key = value lines")
        p.add_argument("--threads", type=int, default=0, help="thread cap for array math")
        p.add_argument("--precision", choices=["f32", "f64"], default="f64")

    g = sub.add_parser("generate", help="write a synthetic tile dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.add_argument("--num", type=int, default=100)
    g.add_argument("--channels", type=int, default=13)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--resolution", type=float, default=10.0)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--radar", type=int, default=0, help="extra radar channels")
    g.set_defaults(fn=cmd_generate)

    v = sub.add_parser("verify", help="run every invariant check")
    common(v)
    v.add_argument("--inject-fault", choices=["kron-order"],
                   help="negative control: deliberately break the kron pathway")
    v.set_defaults(fn=cmd_verify)

    t = sub.add_parser("pretrain", help="masked-autoencoder pretraining")
    common(t)
    t.add_argument("--data", dest="data_dir", help="dataset dir (or LESS_DATA_DIR)")
    t.add_argument("--out", required=True, help="output dir for checkpoint and curve")
    t.add_argument("--model", choices=["small", "base"], default="small")
    t.add_argument("--enc-depth", dest="enc_depth", type=int)
    t.add_argument("--dec-depth", dest="dec_depth", type=int)
    t.add_argument("--rank", type=int)
    t.add_argument("--ratio", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", dest="base_lr", type=float)
    t.set_defaults(fn=cmd_pretrain)

    b = sub.add_parser("bench", help="MAC and wall-clock contrast vs the brute-force block")
    common(b)
    b.add_argument("--n", type=int, default=64, help="patch count (square grid)")
    b.add_argument("--channels", default="4,8,16,32", help="comma-separated channel sweep")
    b.add_argument("--model", choices=["small", "base"], default="base")
    b.add_argument("--ratio", type=int, default=16)
    b.add_argument("--rank", type=int, default=1)
    b.add_argument("--out", help="records file (default stdout)")
    b.set_defaults(fn=cmd_bench)

    p = sub.add_parser("probe", help="evaluate a checkpoint with a downstream head")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", dest="data_dir", help="dataset dir (or LESS_DATA_DIR)")
    p.add_argument("--mode", choices=["linear", "knn", "moe", "pca"], default="linear")
    p.add_argument("--k", type=int, default=20, help="neighbors for knn mode")
    p.add_argument("--max-experts", dest="max_experts", type=int, default=8)
    p.add_argument("--moe-top-k", dest="moe_top_k", type=int, default=3)
    p.add_argument("--probe-epochs", dest="probe_epochs", type=int, default=100)
    p.add_argument("--probe-lr", dest="probe_lr", type=float, default=1e-2)
    p.add_argument("--random-init", action="store_true",
                   help="probe a random-initialized model of the checkpoint's shape")
    p.add_argument("--pca-dir", dest="pca_dir", help="output dir for PPM renderings")
    p.add_argument("--pca-tiles", dest="pca_tiles", type=int, default=4)
    p.add_argument("--out", help="records file (default stdout)")
    p.set_defaults(fn=cmd_probe)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _apply_global_options(args)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
