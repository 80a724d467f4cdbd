"""Gap-fill a synthetic NO2 stack and compare against copying the last valid value.

    python3 demos/fusion_walkthrough.py [n_days]
"""
import sys

import numpy as np

from pollutionnet import FusionParams, gap_fill, regrid_stations
from pollutionnet.synth import preset, synth_generate


def persistence(values):
    out = values.copy()
    for t in range(1, len(out)):
        miss = np.isnan(out[t])
        out[t][miss] = out[t - 1][miss]
    return out


def main():
    days = int(sys.argv[1]) if len(sys.argv) > 1 else 60
    cfg = preset("no2", n_days=days, seed=3)
    sat, recs, truth = synth_generate(cfg)
    ground = regrid_stations(recs, sat.spec, sat.times)
    print(f"{days} days on a {sat.spec.rows}x{sat.spec.cols} grid, "
          f"{1 - sat.mask.mean():.1%} of satellite cells missing, {len(recs)} station readings")

    fused, rep = gap_fill(sat, ground, FusionParams())
    print(f"copied {rep.copied}  filled {rep.filled}  unfilled {rep.unfilled}")

    # compare in satellite units, on cells both methods filled
    expect = cfg.sat_gain * truth.values + cfg.sat_offset
    hole = ~sat.mask & fused.mask
    pers = persistence(sat.values)
    both = hole & np.isfinite(pers)
    print(f"mean abs error on {both.sum()} filled cells: "
          f"fusion {np.mean(np.abs(fused.values - expect)[both]):.3f}, "
          f"persistence {np.mean(np.abs(pers - expect)[both]):.3f}")


if __name__ == "__main__":
    main()
