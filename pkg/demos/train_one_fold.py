"""Train the transformer on one fold of a short synthetic record and compare with the per-cell baseline.

Uses a reduced model so it runs in seconds:

    python3 demos/train_one_fold.py [n_days] [epochs]
"""
import sys

from pollutionnet import (FusionParams, TrainConfig, ViTConfig, evaluate, gap_fill, kfold_split,
                          linear_baseline, regrid_stations, train)
from pollutionnet.synth import preset, synth_generate


def main():
    days = int(sys.argv[1]) if len(sys.argv) > 1 else 100
    epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 30
    sat, recs, _ = synth_generate(preset("no2", n_days=days, seed=0))
    ground = regrid_stations(recs, sat.spec, sat.times)
    fused, _ = gap_fill(sat, ground, FusionParams())

    split = kfold_split(days, seed=0)[0]
    vit = ViTConfig(embed_dim=32, heads=4, blocks=4, mlp_hidden=64)
    model, hist = train(fused, ground, split, vit, TrainConfig(epochs=epochs))
    for h in hist[:: max(1, epochs // 6)] + hist[-1:]:
        print(f"epoch {h['epoch']:3d}  train_mse {h['train_mse']:9.3f}  val_mse {h['val_mse']:9.3f}")

    m = evaluate(model, fused, ground, split.validation_indices)
    b = linear_baseline(fused, ground, split)
    print(f"validation RMSE: transformer {m.rmse:.3f}, per-cell linear {b.rmse:.3f}")


if __name__ == "__main__":
    main()
