"""Micro end-to-end run: synthesize tiles, pretrain, probe the features.

A toy-sized model on a few hundred toy tiles, small enough to watch the
whole masked-reconstruction loop converge in a couple of minutes. The real
desk-scale configuration lives in the acceptance suite; the command-line
equivalents of each stage are printed at the end.

Run: python demos/04_pretrain_and_probe.py  (a few minutes)
"""

import numpy as np

from lessvit import tensor as tc

tc.set_precision("f32")

from lessvit import data_io as dio
from lessvit import heads as hd
from lessvit.hypermae import (
    HyperMaeConfig,
    HyperMaeModel,
    PretrainConfig,
    pretrain_loop,
    sample_mask_plan,
)

print("== synthesize a labeled hyperspectral toy dataset ==")
cfg = dio.SynthConfig(channels=6, height=32, width=32, mixing_rank=4, n_classes=4,
                      noise_level=0.2, wavelengths=np.linspace(450, 2200, 6))
tiles, labels = [], []
for i in range(240):
    cube, lab = dio.generate_tile(cfg, seed=i)
    tiles.append(cube)
    labels.append(lab)
labels = np.array(labels)
stats = dio.compute_stats(tiles[:180])
px = np.stack([dio.normalize_tile(t, stats).pixels / 255.0 for t in tiles]).astype(np.float32)
print(f"  {len(tiles)} tiles, {cfg.channels} channels, "
      f"{cfg.height}x{cfg.width} px, label counts {np.bincount(labels)}")

print()
print("== what one mask plan removes ==")
plan = sample_mask_plan(4, 6, 0.75, 0.5, seed=0)
print(f"  4 patches -> {plan.masked_patches.size} masked; "
      f"6 channels -> {plan.masked_channels.size} masked")
print(f"  visible tokens into the encoder: "
      f"{(plan.visible_patches.size + 1) * (plan.visible_channels.size + 1)} "
      f"(CLS rows/columns survive)")

print()
print("== pretrain a toy model ==")
mcfg = HyperMaeConfig(dim=64, depth=2, num_heads=1, dec_dim=64, dec_depth=1,
                      dec_num_heads=1, ratio=16, rank=1, patch=16)
model = HyperMaeModel(mcfg, np.random.default_rng(7))
random_model = HyperMaeModel(mcfg, np.random.default_rng(7))

history = pretrain_loop(
    model, px[:180], cfg.wavelengths, 6, cfg.resolution,
    PretrainConfig(epochs=10, batch_size=30, seed=0, base_lr=1e-3),
    record_hook=lambda r: print(f"  epoch {r['epoch']:2d} loss {r['loss']:.4f}")
    if r["step"] == -1 else None,
)

def global_cls(m):
    feats = []
    for s in range(0, 240, 60):
        grid = m.encode(px[s:s + 60], cfg.wavelengths, 6, cfg.resolution)
        feats.append(grid.tokens.data[:, 0, 0, :])
    return np.concatenate(feats).astype(np.float64)

print()
print("== probe the frozen features ==")
for name, m in [("pretrained", model), ("random-init", random_model)]:
    feats = global_cls(m)
    mu, sd = feats[:180].mean(0), feats[:180].std(0) + 1e-8
    z = (feats - mu) / sd
    w, b = hd.train_linear_probe(z[:180], labels[:180], 4, epochs=200, lr=3e-2)
    acc = np.mean(hd.linear_predict(z[180:], w, b) == labels[180:])
    knn = hd.knn_probe(feats[:180], labels[:180], feats[180:], labels[180:], k=15)
    print(f"  {name:12s} linear probe {acc:.3f}   knn {knn:.3f}")

print()
print("the command-line equivalents:")
print("  lessvit generate --out data/ --num 2000 --channels 13 --size 64 --classes 4")
print("  lessvit pretrain --data data/ --out run/ --model small --enc-depth 4 --dec-depth 2 \\")
print("                   --epochs 30 --batch-size 32 --precision f32")
print("  lessvit probe --checkpoint run/checkpoint.lvck --data data/ --mode linear")
print("  lessvit probe --checkpoint run/checkpoint.lvck --data data/ --mode knn")
