"""Regenerate the pinned golden encoder output used by the backbone tests.

Only rerun this after an intentional architecture or initialization change.
"""

from pathlib import Path

import numpy as np
import torch

from sitsr.backbones import ModelSpec, build_model

OUT = Path(__file__).resolve().parents[1] / "tests" / "data"


def golden_inputs():
    return np.random.default_rng(2024).random((1, 3, 8, 8)).astype(np.float32)


def main():
    model = build_model(ModelSpec(kind="rrdb_sisr", base_channels=8, n_rrdb_blocks=1), seed=0)
    with torch.no_grad():
        feats = model.encoder(torch.from_numpy(golden_inputs()))[0].numpy()
    OUT.mkdir(parents=True, exist_ok=True)
    np.save(OUT / "golden_rrdb_features.npy", feats)
    print("wrote", OUT / "golden_rrdb_features.npy", feats.shape)


if __name__ == "__main__":
    main()
